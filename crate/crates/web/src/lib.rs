//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Images cross the boundary as RGBA bytes ready for `ImageData`.

use wasm_bindgen::prelude::*;

use sttn::checkpoint::Checkpoint;
use sttn::config::Config;
use sttn::data::{generate_clip, select_frames, SceneSpec};
use sttn::infer::{attention_traces, heatmap_image, Inpainter};
use sttn::maskgen::{generate_stationary_mask, stationary_sequence, BinaryMask, MaskSpec};
use sttn::models::FEATURE_STRIDE;
use sttn::transformer::AttentionTrace;
use sttn::Tensor;

const CLIP_FRAMES: usize = 12;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gray_rgba(gray: &[u8]) -> Vec<u8> {
    gray.iter().flat_map(|&g| [g, g, g, 255]).collect()
}

/// Mask from the free-form stroke generator: white holes on black.
#[wasm_bindgen]
pub fn mask_rgba(
    width: usize,
    height: usize,
    seed: u32,
    max_point_num: usize,
) -> Result<Vec<u8>, String> {
    let mut spec = MaskSpec::new(height, width, seed as u64);
    spec.max_point_num = max_point_num;
    spec.validate().map_err(err)?;
    let m = generate_stationary_mask(&spec).map_err(err)?;
    Ok(gray_rgba(&m.to_gray()))
}

/// Fraction of pixels covered by the same mask.
#[wasm_bindgen]
pub fn mask_fraction(
    width: usize,
    height: usize,
    seed: u32,
    max_point_num: usize,
) -> Result<f64, String> {
    let mut spec = MaskSpec::new(height, width, seed as u64);
    spec.max_point_num = max_point_num;
    Ok(generate_stationary_mask(&spec).map_err(err)?.fraction())
}

/// Black-red-yellow-white ramp.
fn hot(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    [
        v.min(1.0),
        (v - 1.0).clamp(0.0, 1.0),
        (v - 2.0).clamp(0.0, 1.0),
    ]
}

/// A synthetic clip with one stationary mask and a generator to complete it.
#[wasm_bindgen]
pub struct Scene {
    frames: Tensor<f64>,
    masks: Tensor<f64>,
    mask: BinaryMask,
    inp: Inpainter,
    completed: Option<Tensor<f64>>,
    traces: Vec<AttentionTrace>,
    window: Vec<usize>,
    target: usize,
}

#[wasm_bindgen]
impl Scene {
    /// Desk-size clip and an untrained generator, both from `seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Scene, String> {
        let cfg = Config::parse("", &[format!("seed={seed}")]).map_err(err)?;
        Self::build(Inpainter::new(cfg).map_err(err)?)
    }

    /// Replaces the generator with the one in a checkpoint file; the clip is
    /// regenerated at the checkpoint's frame size.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), String> {
        let ck = Checkpoint::decode(bytes).map_err(err)?;
        *self = Self::build(Inpainter::from_checkpoint(&ck, &[]).map_err(err)?)?;
        Ok(())
    }

    fn build(inp: Inpainter) -> Result<Scene, String> {
        let c = &inp.cfg;
        let spec = SceneSpec::random(
            c.frame_width,
            c.frame_height,
            CLIP_FRAMES,
            c.sprites,
            c.seed,
        );
        let clip = generate_clip(&spec).map_err(err)?;
        let mask = generate_stationary_mask(&c.mask_spec(c.seed ^ 0x5eed)).map_err(err)?;
        Ok(Scene {
            frames: clip.frames,
            masks: stationary_sequence(&mask, CLIP_FRAMES),
            mask,
            inp,
            completed: None,
            traces: Vec::new(),
            window: Vec::new(),
            target: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frames(&self) -> usize {
        CLIP_FRAMES
    }

    pub fn hole_fraction(&self) -> f64 {
        self.mask.fraction()
    }

    /// Runs the generator over the whole clip.
    pub fn complete(&mut self) -> Result<(), String> {
        self.completed = Some(self.inp.complete(&self.frames, &self.masks).map_err(err)?);
        Ok(())
    }

    /// Frame `i` as RGBA. `view`: 0 original, 1 with the hole blacked out,
    /// 2 completed (after [`Scene::complete`]).
    pub fn frame_rgba(&self, i: usize, view: u8) -> Result<Vec<u8>, String> {
        let src = match (view, &self.completed) {
            (2, Some(c)) => c,
            (2, None) => return Err("call complete() first".into()),
            _ => &self.frames,
        };
        let (w, h) = (self.width(), self.height());
        let plane = w * h;
        Ok((0..plane)
            .flat_map(|p| {
                let hole = view == 1 && self.mask.data[p] != 0;
                let px = |c: usize| {
                    if hole {
                        0
                    } else {
                        (src.data()[(i * 3 + c) * plane + p] * 255.0).round() as u8
                    }
                };
                [px(0), px(1), px(2), 255]
            })
            .collect())
    }

    /// Computes attention for the window centred on `frame`; returns the
    /// number of (layer, head) maps.
    pub fn trace(&mut self, frame: usize) -> Result<usize, String> {
        let (traces, pos) =
            attention_traces(&self.inp, &self.frames, &self.masks, frame).map_err(err)?;
        self.window = self
            .inp
            .cfg
            .plan(frame)
            .select(CLIP_FRAMES)
            .map_err(err)?
            .indices();
        self.traces = traces;
        self.target = pos;
        Ok(self.traces.len())
    }

    pub fn head_label(&self, head: usize) -> String {
        match self.traces.get(head) {
            Some(t) => format!(
                "layer {} head {} ({} patches)",
                t.layer + 1,
                t.head + 1,
                t.layout.patch
            ),
            None => String::new(),
        }
    }

    /// Frame numbers of the window's key frames, left to right.
    pub fn window(&self) -> Vec<usize> {
        self.window.clone()
    }

    /// Attention of the patch under pixel `(x, y)` of the traced frame over
    /// all key frames, as a heat overlay `frames * width` pixels wide.
    pub fn heatmap_rgba(&self, head: usize, x: usize, y: usize) -> Result<Vec<u8>, String> {
        let t = self.traces.get(head).ok_or("call trace() first")?;
        let (w, h) = (self.width(), self.height());
        if x >= w || y >= h {
            return Err(format!("({x}, {y}) outside {w}x{h}"));
        }
        let l = t.layout;
        let (bh, bw) = (l.patch.rows * FEATURE_STRIDE, l.patch.cols * FEATURE_STRIDE);
        let q = self.target * l.patches_per_frame() + (y / bh) * l.grid_cols() + x / bw;
        let (iw, _, heat) = heatmap_image(t, q, w, h).map_err(err)?;
        let keys = select_frames(&self.frames, &self.window).map_err(err)?;
        let plane = w * h;
        Ok((0..iw * h)
            .flat_map(|o| {
                let (py, px) = (o / iw, o % iw);
                let (k, xx) = (px / w, px % w);
                let v = heat[o] as f64 / 255.0;
                let c = hot(v);
                let rgb = |ch: usize| {
                    let base = keys.data()[(k * 3 + ch) * plane + py * w + xx];
                    ((0.35 * base + 0.65 * c[ch]) * 255.0).round() as u8
                };
                [rgb(0), rgb(1), rgb(2), 255]
            })
            .collect())
    }
}
