use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sttn::metrics::read_eval_csv;

const TINY: &str = "frame_width = 16\nframe_height = 16\nencoder_channels = [4, 4, 8, 8]\n\
decoder_channels = [8, 4, 4]\nheads = \"4x4,2x2\"\ndisc_channels = [4, 4]\n\
steps = 3\nsource_frames = 8\nsprites = 2\nlr = 0.001\nradius = 1\nrate = 3\n";

fn sttn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sttn"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_digest_printed(o: &Output) {
    let out = stdout(o);
    let line = out
        .lines()
        .find(|l| l.starts_with("config digest: "))
        .expect("digest line");
    assert_eq!(line.len(), "config digest: ".len() + 64);
}

#[test]
fn make_masks_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = sttn(&["make-masks", "--count", "5", "--seed", "7", "--out", p(d)]);
        assert_eq!(code(&o), 0, "{o:?}");
        assert_digest_printed(&o);
    }
    for i in 0..5 {
        let name = format!("{i:05}.pgm");
        let x = fs::read(a.join(&name)).unwrap();
        assert_eq!(x, fs::read(b.join(&name)).unwrap());
        assert!(x.starts_with(b"P5"));
    }
    let o = sttn(&["make-masks", "--count", "1", "--seed", "8", "--out", p(&b)]);
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(a.join("00000.pgm")).unwrap(),
        fs::read(b.join("00000.pgm")).unwrap()
    );
}

#[test]
fn eval_identical_dirs_hits_caps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = sttn(&[
        "gen-data",
        "--videos",
        "2",
        "--frames",
        "6",
        "--seed",
        "3",
        "--out",
        p(&data),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(data.join("v0001/frames/00005.png").is_file());
    assert!(data.join("v0001/masks/00005.pgm").is_file());
    assert!(data.join("v0001/flows/00004.flo").is_file());

    let csv = dir.path().join("eval.csv");
    let o = sttn(&[
        "eval",
        "--truth",
        p(&data),
        "--results",
        p(&data),
        "--out",
        p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_digest_printed(&o);
    let rows = read_eval_csv(&csv).unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.psnr, 100.0);
        assert!((r.ssim - 1.0).abs() < 1e-9);
        assert!(r.e_warp.unwrap() < 1e-6);
    }
}

#[test]
fn train_infer_and_attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = sttn(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_digest_printed(&o);
    let ck = run.join("checkpoint.bin");
    assert!(ck.is_file());
    let log = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("step,l_hole,l_valid,l_adv,l_d"));

    let data = dir.path().join("data");
    let o = sttn(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--videos",
        "1",
        "--frames",
        "7",
        "--out",
        p(&data),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    let (frames, masks) = (data.join("v0000/frames"), data.join("v0000/masks"));
    let out = dir.path().join("out");
    let args = [
        "infer",
        "--checkpoint",
        p(&ck),
        "--frames",
        p(&frames),
        "--masks",
        p(&masks),
        "--out",
        p(&out),
    ];
    let o = sttn(&args);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_digest_printed(&o);
    let first = fs::read(out.join("00006.png")).unwrap();
    assert_eq!(code(&sttn(&args)), 0);
    assert_eq!(first, fs::read(out.join("00006.png")).unwrap());

    // Same model, different config file: rejected by digest.
    let other = dir.path().join("other.cfg");
    fs::write(&other, TINY.replace("lr = 0.001", "lr = 0.002")).unwrap();
    let mut mismatched = args.to_vec();
    mismatched.extend(["--config", p(&other)]);
    let o = sttn(&mismatched);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));

    let heat = dir.path().join("heat");
    let o = sttn(&[
        "attn-dump",
        "--checkpoint",
        p(&ck),
        "--frames",
        p(&frames),
        "--masks",
        p(&masks),
        "--frame",
        "3",
        "--out",
        p(&heat),
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(fs::read_dir(&heat).unwrap().count(), 2 * (1 + 4));
}

#[test]
fn validation_and_runtime_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    assert_eq!(
        code(&sttn(&[
            "make-masks",
            "--count",
            "1",
            "--out",
            p(&out),
            "--bogus"
        ])),
        1
    );
    assert_eq!(code(&sttn(&["nope"])), 1);
    assert_eq!(
        code(&sttn(&[
            "make-masks",
            "--count",
            "1",
            "--out",
            p(&out),
            "--set",
            "colour=3"
        ])),
        1
    );
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "windw = 5\n").unwrap();
    assert_eq!(code(&sttn(&["selftest", "--config", p(&cfg)])), 1);
    let missing = dir.path().join("missing");
    let o = sttn(&[
        "eval",
        "--truth",
        p(&missing),
        "--results",
        p(&missing),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&sttn(&["--help"])), 0);
}

#[test]
fn selftest_passes() {
    let o = sttn(&["selftest", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_digest_printed(&o);
    let out = stdout(&o);
    assert!(out.contains("PASS attention oracle"));
    assert!(!out.contains("FAIL"));
}
