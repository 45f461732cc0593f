use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sttn::checkpoint::Checkpoint;
use sttn::config::Config;
use sttn::data::{generate_clip, list_videos, read_frames, write_frames, SceneSpec, VideoDir};
use sttn::infer::{dump_attention, Inpainter};
use sttn::maskgen::{derive_seed, generate_stationary_mask, load_moving_masks, mask_sequence};
use sttn::metrics::{psnr, ssim, warping_error, write_eval_csv, EvalRow};
use sttn::train::train;
use sttn::verify;
use sttn::{Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "sttn",
    version,
    about = "Video inpainting with a spatial-temporal transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o
    }

    fn load(&self, extra: &[String]) -> Result<Config> {
        let mut o = self.overrides();
        o.extend_from_slice(extra);
        let cfg = Config::load(self.config.as_deref(), &o)?;
        println!("config digest: {}", cfg.digest());
        Ok(cfg)
    }

    /// Inference model from a checkpoint. With `--config`, the file must
    /// describe the same model as the checkpoint.
    fn inpainter(&self, checkpoint: &Path) -> Result<Inpainter> {
        let expected = match &self.config {
            Some(p) => Some(Config::load(Some(p), &self.overrides())?.digest()),
            None => None,
        };
        let ck = Checkpoint::load(checkpoint, expected.as_deref())?;
        let inp = Inpainter::from_checkpoint(&ck, &self.overrides())?;
        println!("config digest: {}", inp.cfg.digest());
        Ok(inp)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train generator and discriminator; writes a checkpoint and a loss CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Complete the masked regions of one video.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of `*.png` frames.
        #[arg(long)]
        frames: PathBuf,
        /// Directory of per-frame masks (`*.pgm`, nonzero marks a hole).
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded free-form masks as `%05d.pgm`.
    MakeMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR, SSIM and warping error of result videos against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset with ground truth (`<id>/frames`, optional `<id>/flows`).
        #[arg(long)]
        truth: PathBuf,
        /// Results: `<id>/frames` or `<id>` holding `*.png` frames.
        #[arg(long)]
        results: PathBuf,
        /// CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention heatmaps for every query patch of one frame.
    AttnDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// 0-based frame whose query patches are dumped.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic moving-sprite dataset with masks and true flows.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        videos: u64,
        /// Frames per video (defaults to `source_frames`).
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient checks, attention oracle, patch roundtrip and FLOP scaling.
    Selftest {
        #[command(flatten)]
        common: Common,
        /// Random seeds per gradient check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn load_video(frames: &Path, masks: &Path) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let x = read_frames(frames)?;
    let s = x.shape();
    let m = load_moving_masks(masks, Some((s[0], s[3], s[2])))?;
    Ok((x, mask_sequence(&m)?))
}

fn run_train(common: &Common, out: Option<PathBuf>, resume: bool) -> Result<bool> {
    let mut extra = Vec::new();
    if let Some(o) = out {
        extra.push(format!("out_dir={}", toml_string(&o)));
    }
    if resume {
        extra.push("resume=true".into());
    }
    let cfg = common.load(&extra)?;
    let every = (cfg.steps / 20).max(1);
    let summary = train(&cfg, |r| {
        if r.step % every == 0 || r.step == cfg.steps {
            println!(
                "step {:>6}  l_hole {:.5}  l_valid {:.5}  l_adv {:.5}  l_d {:.5}",
                r.step, r.l_hole, r.l_valid, r.l_adv, r.l_d
            );
        }
    })?;
    println!("checkpoint: {}", summary.checkpoint.display());
    println!("loss log: {}", summary.log.display());
    Ok(true)
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn run_eval(common: &Common, truth: &Path, results: &Path, out: &Path) -> Result<bool> {
    common.load(&[])?;
    let videos = list_videos(truth)?;
    if videos.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no videos",
            truth.display()
        )));
    }
    let mut rows = Vec::new();
    for v in videos {
        let gt = read_frames(&v.frames())?;
        let res = VideoDir::new(results, &v.id);
        let dir = if res.frames().is_dir() {
            res.frames()
        } else {
            res.root
        };
        let got = read_frames(&dir)?;
        let e_warp = match v.read_flows()? {
            Some(f) => Some(warping_error(&got, &f)?),
            None => None,
        };
        let row = EvalRow {
            id: v.id.clone(),
            psnr: psnr(&gt, &got)?,
            ssim: ssim(&gt, &got)?,
            e_warp,
        };
        println!(
            "{}  psnr {:.4}  ssim {:.6}  e_warp {}",
            row.id,
            row.psnr,
            row.ssim,
            row.e_warp.map_or("-".into(), |e| format!("{e:.6}"))
        );
        rows.push(row);
    }
    write_eval_csv(out, &rows)?;
    Ok(true)
}

fn run_gen_data(common: &Common, videos: u64, frames: Option<usize>, out: &Path) -> Result<bool> {
    let cfg = common.load(&[])?;
    let t = frames.unwrap_or(cfg.source_frames);
    for i in 0..videos {
        let v = VideoDir::new(out, &format!("v{i:04}"));
        let spec = SceneSpec::random(
            cfg.frame_width,
            cfg.frame_height,
            t,
            cfg.sprites,
            derive_seed(cfg.seed, 2 * i),
        );
        let clip = generate_clip(&spec)?;
        let mask = generate_stationary_mask(&cfg.mask_spec(derive_seed(cfg.seed, 2 * i + 1)))?;
        write_frames(&v.frames(), &clip.frames)?;
        v.write_masks(&vec![mask; t])?;
        v.write_flows(&clip.flows)?;
    }
    println!("wrote {videos} videos to {}", out.display());
    Ok(true)
}

fn run_selftest(common: &Common, seeds: u64) -> Result<bool> {
    let cfg = common.load(&[])?;
    let mut ok = true;
    let mut report = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    for r in verify::gradient_suite(seeds)? {
        let detail = format!(
            "worst rel err {:.3e} < {:.0e} over {} seeds",
            r.worst, r.tolerance, r.trials
        );
        report(&format!("gradient {}", r.name), r.passed(), detail);
    }
    let a = verify::attention_oracle(200, cfg.seed)?;
    report(
        "attention oracle",
        a.passed(),
        format!(
            "{} instances, err {:.2e}, invisible {:.1e}, row sum {:.2e}, perm {:.1e}",
            a.instances,
            a.max_oracle_error,
            a.max_invisible_weight,
            a.max_row_sum_error,
            a.max_permutation_error
        ),
    );
    let bad = verify::patch_roundtrip(100, cfg.seed)?;
    report(
        "patch roundtrip",
        bad == 0,
        format!("{bad} of 100 tensors differ"),
    );
    let (f4, f8) = (
        verify::attention_flops(4, cfg.seed)?,
        verify::attention_flops(8, cfg.seed)?,
    );
    report(
        "attention flops",
        f8 == 4 * f4,
        format!("T=4 {f4}, T=8 {f8}"),
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            common,
            out,
            resume,
        } => run_train(&common, out, resume),
        Command::Infer {
            common,
            checkpoint,
            frames,
            masks,
            out,
        } => {
            let inp = common.inpainter(&checkpoint)?;
            let (x, m) = load_video(&frames, &masks)?;
            write_frames(&out, &inp.complete(&x, &m)?)?;
            println!("wrote {} frames to {}", x.shape()[0], out.display());
            Ok(true)
        }
        Command::MakeMasks { common, count, out } => {
            let cfg = common.load(&[])?;
            let spec = cfg.mask_spec(cfg.seed);
            for i in 0..count {
                generate_stationary_mask(&spec.derive(i))?
                    .write_pgm(&out.join(format!("{i:05}.pgm")))?;
            }
            println!("wrote {count} masks to {}", out.display());
            Ok(true)
        }
        Command::Eval {
            common,
            truth,
            results,
            out,
        } => run_eval(&common, &truth, &results, &out),
        Command::AttnDump {
            common,
            checkpoint,
            frames,
            masks,
            frame,
            out,
        } => {
            let inp = common.inpainter(&checkpoint)?;
            let (x, m) = load_video(&frames, &masks)?;
            let n = dump_attention(&inp, &x, &m, frame, &out)?;
            println!("wrote {n} heatmaps to {}", out.display());
            Ok(true)
        }
        Command::GenData {
            common,
            videos,
            frames,
            out,
        } => run_gen_data(&common, videos, frames, &out),
        Command::Selftest { common, seeds } => run_selftest(&common, seeds),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
