//! Sliding-window completion of whole videos and attention-map export.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{select_frames, SamplingPlan};
use crate::error::{Error, Result};
use crate::io;
use crate::models::{Generator, FEATURE_STRIDE};
use crate::nn::{ParamBinding, ParamStore};
use crate::tensor::Tensor;
use crate::train::{load_store, zero_holes, Trainer};
use crate::transformer::{attention_heatmap, AttentionTrace};

/// A generator with its weights, ready to complete videos.
#[derive(Clone, Debug)]
pub struct Inpainter {
    pub cfg: Config,
    pub generator: Generator,
    pub params: ParamStore<f32>,
}

impl Inpainter {
    /// Rebuilds the generator from the configuration stored in `ck`.
    /// `overrides` may change inference keys; any change to the model makes
    /// the digest differ and is rejected.
    pub fn from_checkpoint(ck: &Checkpoint, overrides: &[String]) -> Result<Self> {
        let text = std::str::from_utf8(ck.get("config")?)
            .map_err(|_| Error::Checkpoint("stored config is not utf-8".into()))?;
        let cfg = Config::parse(text, overrides)?;
        if cfg.digest() != ck.digest_hex() {
            return Err(Error::Checkpoint(format!(
                "config digest {} does not match checkpoint {}",
                cfg.digest(),
                ck.digest_hex()
            )));
        }
        let mut inp = Self::new(cfg)?;
        load_store(&mut inp.params, ck, "gen")?;
        Ok(inp)
    }

    /// Freshly initialised generator, as at step 0 of training.
    pub fn new(cfg: Config) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(&cfg.model()?, &mut params, &mut rng)?;
        Ok(Self {
            cfg,
            generator,
            params,
        })
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            cfg: t.cfg.clone(),
            generator: t.generator.clone(),
            params: t.gen_params.clone(),
        }
    }

    /// Raw generator output in `[0, 1]` for one window (`[T, 3, H, W]`
    /// frames in `[0, 1]`, `[T, 1, H, W]` masks).
    pub fn generate(
        &self,
        frames: &Tensor<f64>,
        masks: &Tensor<f64>,
        traces: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Tensor<f64>> {
        let m = masks.cast::<f32>();
        let x = zero_holes(&frames.map(|v| 2.0 * v - 1.0).cast::<f32>(), &m)?;
        let mut tape = Tape::<f32>::new();
        let mut binding = ParamBinding::new(&self.params, false);
        let xv = tape.constant(x);
        let out = self
            .generator
            .forward(&mut tape, &mut binding, xv, &m, traces)?;
        if let Some(name) = tape.first_non_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        Ok(tape.value(out).cast::<f64>().map(|v| (v + 1.0) / 2.0))
    }

    /// Completes every frame: windows from the sampling plan, each frame
    /// taken from the window whose centre is nearest, then composited so
    /// known pixels are returned unchanged.
    pub fn complete(&self, frames: &Tensor<f64>, masks: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!(
                "expected [T, 3, H, W] frames, got {s:?}"
            )));
        }
        if masks.shape() != [s[0], 1, s[2], s[3]] {
            return Err(Error::shape(format!(
                "masks {:?} do not match frames {s:?}",
                masks.shape()
            )));
        }
        if !s[2].is_multiple_of(FEATURE_STRIDE) || !s[3].is_multiple_of(FEATURE_STRIDE) {
            return Err(Error::InvalidInput(format!(
                "frame size {}x{} not divisible by {FEATURE_STRIDE}",
                s[3], s[2]
            )));
        }
        let (t, plane) = (s[0], s[2] * s[3]);
        let centres = window_centres(t, self.cfg.radius);
        let mut out = frames.clone();
        for (w, &c) in centres.iter().enumerate() {
            let plan = SamplingPlan {
                target: c,
                ..self.cfg.plan(c)
            };
            let sel = plan.select(t)?;
            let owned: Vec<(usize, usize)> = sel
                .neighbors
                .iter()
                .enumerate()
                .filter(|&(_, &f)| nearest_window(&centres, f) == w)
                .map(|(k, &f)| (k, f))
                .collect();
            if owned.is_empty() {
                continue;
            }
            let idx = sel.indices();
            let generated = self.generate(
                &select_frames(frames, &idx)?,
                &select_frames(masks, &idx)?,
                None,
            )?;
            for (k, f) in owned {
                for ch in 0..3 {
                    for p in 0..plane {
                        let m = masks.data()[f * plane + p];
                        let o = (f * 3 + ch) * plane + p;
                        let g = generated.data()[(k * 3 + ch) * plane + p];
                        out.data_mut()[o] = m * g + (1.0 - m) * frames.data()[o];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Reference completion: each hole pixel gets its frame's mean known colour
/// (mid-gray when the whole frame is masked).
pub fn mean_color_fill(frames: &Tensor<f64>, masks: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 || masks.shape() != [s[0], 1, s[2], s[3]] {
        return Err(Error::shape(format!(
            "masks {:?} do not match frames {s:?}",
            masks.shape()
        )));
    }
    let plane = s[2] * s[3];
    let mut out = frames.clone();
    for f in 0..s[0] {
        let m = &masks.data()[f * plane..(f + 1) * plane];
        let known = m.iter().filter(|&&v| v == 0.0).count();
        for c in 0..3 {
            let base = (f * 3 + c) * plane;
            let sum: f64 = (0..plane)
                .filter(|&p| m[p] == 0.0)
                .map(|p| frames.data()[base + p])
                .sum();
            let mean = if known > 0 { sum / known as f64 } else { 0.5 };
            for p in (0..plane).filter(|&p| m[p] != 0.0) {
                out.data_mut()[base + p] = mean;
            }
        }
    }
    Ok(out)
}

/// Window centres with stride `radius + 1`, the last one flush with the end.
/// A video no longer than one window gets a single centre covering it.
pub fn window_centres(frames: usize, radius: usize) -> Vec<usize> {
    if frames <= 2 * radius + 1 {
        return vec![radius.min(frames - 1)];
    }
    let last = frames - 1 - radius;
    let mut c: Vec<usize> = (radius..=last).step_by(radius + 1).collect();
    if *c.last().expect("nonempty") != last {
        c.push(last);
    }
    c
}

/// Index of the centre closest to `frame`; ties go to the earlier window.
pub fn nearest_window(centres: &[usize], frame: usize) -> usize {
    let mut best = 0;
    for (i, &c) in centres.iter().enumerate() {
        if c.abs_diff(frame) < centres[best].abs_diff(frame) {
            best = i;
        }
    }
    best
}

/// Grayscale image of one query's attention: key frames side by side, each
/// key patch drawn at its pixel footprint, scaled so the peak is 255.
/// Returns `(width, height, pixels)`.
pub fn heatmap_image(
    trace: &AttentionTrace,
    query: usize,
    frame_width: usize,
    frame_height: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    let l = trace.layout;
    let (bh, bw) = (l.patch.rows * FEATURE_STRIDE, l.patch.cols * FEATURE_STRIDE);
    let map = attention_heatmap(trace, query)?;
    let peak = map.max_abs().max(f64::MIN_POSITIVE);
    let width = l.frames * frame_width;
    let mut img = vec![0u8; width * frame_height];
    for y in 0..frame_height {
        for x in 0..width {
            let (kf, xx) = (x / frame_width, x % frame_width);
            let v = map.at(&[kf, y / bh, xx / bw]);
            img[y * width + x] = (255.0 * v / peak).round() as u8;
        }
    }
    Ok((width, frame_height, img))
}

/// Traces of the window used to complete `frame`, and the position of
/// `frame` within that window.
pub fn attention_traces(
    inp: &Inpainter,
    frames: &Tensor<f64>,
    masks: &Tensor<f64>,
    frame: usize,
) -> Result<(Vec<AttentionTrace>, usize)> {
    let t = frames.shape()[0];
    if frame >= t {
        return Err(Error::InvalidInput(format!("frame {frame} of {t}")));
    }
    let idx = inp.cfg.plan(frame).select(t)?.indices();
    let pos = idx
        .iter()
        .position(|&i| i == frame)
        .expect("target is selected");
    let mut traces = Vec::new();
    inp.generate(
        &select_frames(frames, &idx)?,
        &select_frames(masks, &idx)?,
        Some(&mut traces),
    )?;
    Ok((traces, pos))
}

/// Writes one PGM per (layer, head, query patch of `frame`) as drawn by
/// [`heatmap_image`]. Returns the number of files.
pub fn dump_attention(
    inp: &Inpainter,
    frames: &Tensor<f64>,
    masks: &Tensor<f64>,
    frame: usize,
    out_dir: &Path,
) -> Result<usize> {
    let (traces, pos) = attention_traces(inp, frames, masks, frame)?;
    let (h, w) = (frames.shape()[2], frames.shape()[3]);
    let mut written = 0;
    for trace in &traces {
        let per_frame = trace.layout.patches_per_frame();
        for q in 0..per_frame {
            let (iw, ih, img) = heatmap_image(trace, pos * per_frame + q, w, h)?;
            let name = format!("l{}_h{}_q{q:04}.pgm", trace.layer, trace.head);
            io::write_pgm(&out_dir.join(name), iw, ih, &img)?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clip, SceneSpec};
    use crate::maskgen::{generate_stationary_mask, stationary_sequence, MaskSpec};

    fn tiny() -> Config {
        Config::parse(
            "frame_width = 16\nframe_height = 16\nencoder_channels = [4, 4, 8, 8]\n\
             decoder_channels = [8, 4, 4]\nheads = \"4x4,2x2\"\ndisc_channels = [4, 4]\n\
             source_frames = 8\nradius = 1\nrate = 4\n",
            &[],
        )
        .unwrap()
    }

    fn inpainter() -> Inpainter {
        Inpainter::from_trainer(&Trainer::new(&tiny()).unwrap())
    }

    #[test]
    fn fresh_generator_matches_trainer_init() {
        let a = Inpainter::new(tiny()).unwrap();
        assert_eq!(a.params.values(), inpainter().params.values());
    }

    #[test]
    fn mean_fill_uses_known_pixels_only() {
        let mut x = Tensor::<f64>::zeros([1, 3, 1, 4]);
        x.data_mut()
            .copy_from_slice(&[0.2, 0.4, 9.0, 9.0, 0.0, 1.0, 9.0, 9.0, 0.5, 0.5, 9.0, 9.0]);
        let m = Tensor::from_f64([1, 1, 1, 4], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let y = mean_color_fill(&x, &m).unwrap();
        let want = [0.2, 0.4, 0.3, 0.3, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let all = Tensor::full([1, 1, 1, 4], 1.0);
        assert!(mean_color_fill(&x, &all)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.5));
    }

    #[test]
    fn centres_cover_video() {
        assert_eq!(window_centres(3, 2), vec![2]);
        assert_eq!(window_centres(5, 2), vec![2]);
        assert_eq!(window_centres(1, 2), vec![0]);
        assert_eq!(window_centres(10, 2), vec![2, 5, 7]);
        assert_eq!(nearest_window(&[2, 5, 7], 6), 1);
        assert_eq!(nearest_window(&[2, 5, 7], 9), 2);
        assert_eq!(nearest_window(&[2, 5, 7], 0), 0);
    }

    #[test]
    fn empty_masks_return_input_exactly() {
        let clip = generate_clip(&SceneSpec::random(16, 16, 7, 2, 3)).unwrap();
        let masks = Tensor::zeros([7, 1, 16, 16]);
        let out = inpainter().complete(&clip.frames, &masks).unwrap();
        assert_eq!(out.data(), clip.frames.data());
    }

    #[test]
    fn completion_is_deterministic_and_keeps_known_pixels() {
        let clip = generate_clip(&SceneSpec::random(16, 16, 9, 2, 4)).unwrap();
        let mask = generate_stationary_mask(&MaskSpec::new(16, 16, 2)).unwrap();
        let masks = stationary_sequence::<f64>(&mask, 9);
        let inp = inpainter();
        let a = inp.complete(&clip.frames, &masks).unwrap();
        let b = inp.complete(&clip.frames, &masks).unwrap();
        assert_eq!(a.data(), b.data());
        let plane = 256;
        for (i, (&o, &x)) in a.data().iter().zip(clip.frames.data()).enumerate() {
            let m = masks.data()[(i / (3 * plane)) * plane + i % plane];
            if m == 0.0 {
                assert_eq!(o, x);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_model_override_rejected() {
        let t = Trainer::new(&tiny()).unwrap();
        let ck = t.to_checkpoint().unwrap();
        let inp = Inpainter::from_checkpoint(&ck, &["radius=3".into()]).unwrap();
        assert_eq!(inp.params.values(), t.gen_params.values());
        assert_eq!(inp.cfg.radius, 3);
        assert!(Inpainter::from_checkpoint(&ck, &["layers=3".into()]).is_err());
    }

    #[test]
    fn attention_dump_writes_one_map_per_query_patch() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(&SceneSpec::random(16, 16, 5, 1, 1)).unwrap();
        let mask = generate_stationary_mask(&MaskSpec::new(16, 16, 5)).unwrap();
        let masks = stationary_sequence::<f64>(&mask, 5);
        let n = dump_attention(&inpainter(), &clip.frames, &masks, 2, dir.path()).unwrap();
        // Feature map 4x4: head 4x4 has 1 patch per frame, head 2x2 has 4;
        // two layers.
        assert_eq!(n, 2 * (1 + 4));
        let (w, h, _) = io::read_gray(&dir.path().join("l1_h1_q0003.pgm")).unwrap();
        assert_eq!(h, 16);
        assert_eq!(w % 16, 0);
    }
}
