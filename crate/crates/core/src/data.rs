//! Synthetic moving-sprite videos with exact flow, the neighbour/distant
//! frame sampling plan, and the on-disk dataset layout.
//!
//! Frames are `[T, 3, H, W]` tensors in `[0, 1]`, quantized to multiples of
//! 1/255 so they survive a PNG roundtrip unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::maskgen::BinaryMask;
use crate::metrics::{Flow, FlowField};
use crate::tensor::{Scalar, Tensor};

pub const MAX_SPEED: i64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Gradient,
    Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteShape {
    Rect,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    Linear,
    /// Linear in x, `y0 + amplitude * sin(2 pi t / period)` rounded in y.
    Sinusoidal {
        amplitude: f64,
        period: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub shape: SpriteShape,
    pub width: usize,
    pub height: usize,
    pub color: [u8; 3],
    /// Top-left corner in frame 0.
    pub x: i64,
    pub y: i64,
    /// Pixels per frame; `|v| <= MAX_SPEED`.
    pub vx: i64,
    pub vy: i64,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background: Background,
    pub sprites: Vec<Sprite>,
    /// Seeds background colours and texture.
    pub seed: u64,
}

impl SceneSpec {
    /// A random scene with `count` sprites that all fit on the canvas.
    pub fn random(width: usize, height: usize, frames: usize, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background = if rng.random_bool(0.5) {
            Background::Gradient
        } else {
            Background::Texture
        };
        let sprites = (0..count)
            .map(|_| random_sprite(width, height, &mut rng))
            .collect();
        Self {
            width,
            height,
            frames,
            background,
            sprites,
            seed,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::Config(
                "scene size and frame count must be nonzero".into(),
            ));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            if s.vx.abs() > MAX_SPEED || s.vy.abs() > MAX_SPEED {
                return Err(Error::Config(format!(
                    "sprite {i} faster than {MAX_SPEED} px/frame"
                )));
            }
            if let Trajectory::Sinusoidal { amplitude, period } = s.trajectory {
                if !(period > 0.0) || 2.0 * std::f64::consts::PI * amplitude / period > 3.0 {
                    return Err(Error::Config(format!("sprite {i} oscillates too fast")));
                }
            }
            let fits = |pos: i64, size: usize, extent: usize| {
                size <= extent && pos >= 0 && pos as usize + size <= extent
            };
            if s.width == 0
                || s.height == 0
                || !fits(s.x, s.width, self.width)
                || !fits(s.y, s.height, self.height)
            {
                return Err(Error::InvalidInput(format!(
                    "sprite {i} does not fit the canvas"
                )));
            }
            if let Trajectory::Sinusoidal { amplitude, .. } = s.trajectory {
                let a = amplitude.abs().ceil() as i64;
                if s.y - a < 0 || (s.y + a) as usize + s.height > self.height {
                    return Err(Error::InvalidInput(format!(
                        "sprite {i} oscillates off the canvas"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn random_sprite(width: usize, height: usize, rng: &mut impl Rng) -> Sprite {
    let sw = rng.random_range(width / 8..=width / 3).max(2);
    let sh = rng.random_range(height / 8..=height / 3).max(2);
    let trajectory = if rng.random_bool(0.5) {
        Trajectory::Linear
    } else {
        Trajectory::Sinusoidal {
            amplitude: rng
                .random_range(1.0..3.0f64)
                .min(((height - sh) / 2) as f64),
            period: rng.random_range(8.0..16.0),
        }
    };
    let margin = match trajectory {
        Trajectory::Sinusoidal { amplitude, .. } => amplitude.ceil() as usize,
        Trajectory::Linear => 0,
    };
    let mut speed = || loop {
        let v = rng.random_range(-MAX_SPEED..=MAX_SPEED);
        if v != 0 {
            break v;
        }
    };
    let (vx, vy) = (speed(), speed());
    let color = [rng.random(), rng.random(), rng.random()];
    Sprite {
        shape: if rng.random_bool(0.5) {
            SpriteShape::Rect
        } else {
            SpriteShape::Disc
        },
        width: sw,
        height: sh,
        color,
        x: rng.random_range(0..=(width - sw)) as i64,
        y: rng.random_range(margin..=(height - sh - margin)) as i64,
        vx,
        vy: if margin > 0 { 0 } else { vy },
        trajectory,
    }
}

/// Position after one step with reflection at `0` and `max`.
fn bounce(pos: i64, vel: i64, max: i64) -> (i64, i64) {
    let (mut p, mut v) = (pos + vel, vel);
    if max == 0 {
        return (0, vel);
    }
    loop {
        if p < 0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// Top-left corners of a sprite in every frame.
pub fn sprite_path(s: &Sprite, width: usize, height: usize, frames: usize) -> Vec<(i64, i64)> {
    let max_x = (width - s.width) as i64;
    let max_y = (height - s.height) as i64;
    let (mut x, mut vx) = (s.x, s.vx);
    let (mut y, mut vy) = (s.y, s.vy);
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let yy = match s.trajectory {
            Trajectory::Linear => y,
            Trajectory::Sinusoidal { amplitude, period } => {
                s.y + (amplitude * (2.0 * std::f64::consts::PI * t as f64 / period).sin()).round()
                    as i64
            }
        };
        out.push((x, yy));
        (x, vx) = bounce(x, vx, max_x);
        if s.trajectory == Trajectory::Linear {
            (y, vy) = bounce(y, vy, max_y);
        }
    }
    out
}

fn sprite_covers(s: &Sprite, dx: i64, dy: i64) -> bool {
    if dx < 0 || dy < 0 || dx >= s.width as i64 || dy >= s.height as i64 {
        return false;
    }
    match s.shape {
        SpriteShape::Rect => true,
        SpriteShape::Disc => {
            let (rx, ry) = (s.width as f64 / 2.0, s.height as f64 / 2.0);
            let (u, v) = ((dx as f64 + 0.5 - rx) / rx, (dy as f64 + 0.5 - ry) / ry);
            u * u + v * v <= 1.0
        }
    }
}

/// Sprite colour with a diagonal stripe pattern fixed to the sprite.
fn sprite_color(s: &Sprite, dx: i64, dy: i64) -> [u8; 3] {
    let dark = (dx + dy).rem_euclid(6) < 2;
    s.color.map(|c| if dark { c / 2 } else { c })
}

fn background_color(
    spec: &SceneSpec,
    x: usize,
    y: usize,
    palette: &[[f64; 3]; 2],
    freq: &[f64; 3],
) -> [u8; 3] {
    let (u, v) = (x as f64 / spec.width as f64, y as f64 / spec.height as f64);
    let t = match spec.background {
        Background::Gradient => 0.5 * (u + v),
        Background::Texture => {
            0.5 + 0.25 * (freq[0] * x as f64).sin() * (freq[1] * y as f64).cos()
                + 0.2 * (freq[2] * (x + y) as f64).sin()
        }
    };
    let t = t.clamp(0.0, 1.0);
    std::array::from_fn(|c| (255.0 * (palette[0][c] * (1.0 - t) + palette[1][c] * t)).round() as u8)
}

/// Owner of each pixel in one frame: `0` is background, `k + 1` is sprite `k`
/// (later sprites are drawn on top).
fn owners(spec: &SceneSpec, positions: &[(i64, i64)]) -> Vec<usize> {
    let (w, h) = (spec.width, spec.height);
    let mut own = vec![0usize; w * h];
    for (k, (s, &(sx, sy))) in spec.sprites.iter().zip(positions).enumerate() {
        for dy in 0..s.height as i64 {
            for dx in 0..s.width as i64 {
                if sprite_covers(s, dx, dy) {
                    own[((sy + dy) as usize) * w + (sx + dx) as usize] = k + 1;
                }
            }
        }
    }
    own
}

#[derive(Clone, Debug)]
pub struct Clip {
    /// `[T, 3, H, W]` in `[0, 1]`.
    pub frames: Tensor<f64>,
    pub flows: FlowField,
    /// Per sprite, per frame top-left corner.
    pub paths: Vec<Vec<(i64, i64)>>,
}

/// Renders the scene and its ground-truth forward flows. A pixel's flow is
/// the motion of whatever it shows; it is valid when the same object shows
/// at the displaced position in the next frame.
pub fn generate_clip(spec: &SceneSpec) -> Result<Clip> {
    spec.validate()?;
    let (w, h, t) = (spec.width, spec.height, spec.frames);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xB4C6_A1D2);
    let palette = [
        [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ],
        [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ],
    ];
    let freq = [
        rng.random_range(0.1..0.6),
        rng.random_range(0.1..0.6),
        rng.random_range(0.05..0.3),
    ];
    let background: Vec<[u8; 3]> = (0..w * h)
        .map(|p| background_color(spec, p % w, p / w, &palette, &freq))
        .collect();

    let paths: Vec<Vec<(i64, i64)>> = spec
        .sprites
        .iter()
        .map(|s| sprite_path(s, w, h, t))
        .collect();
    let at = |f: usize| paths.iter().map(|p| p[f]).collect::<Vec<_>>();

    let plane = w * h;
    let mut data = vec![0.0; t * 3 * plane];
    let mut frame_owners = Vec::with_capacity(t);
    for f in 0..t {
        let pos = at(f);
        let own = owners(spec, &pos);
        for p in 0..plane {
            let rgb = match own[p] {
                0 => background[p],
                k => {
                    let (sx, sy) = pos[k - 1];
                    sprite_color(
                        &spec.sprites[k - 1],
                        (p % w) as i64 - sx,
                        (p / w) as i64 - sy,
                    )
                }
            };
            for c in 0..3 {
                data[(f * 3 + c) * plane + p] = rgb[c] as f64 / 255.0;
            }
        }
        frame_owners.push(own);
    }

    let mut pairs = Vec::with_capacity(t.saturating_sub(1));
    for f in 0..t.saturating_sub(1) {
        let (now, next) = (at(f), at(f + 1));
        let mut flow = Flow::zero(w, h);
        for p in 0..plane {
            let k = frame_owners[f][p];
            let (dx, dy) = if k == 0 {
                (0, 0)
            } else {
                (next[k - 1].0 - now[k - 1].0, next[k - 1].1 - now[k - 1].1)
            };
            flow.dx[p] = dx as f64;
            flow.dy[p] = dy as f64;
            let (x, y) = ((p % w) as i64 + dx, (p / w) as i64 + dy);
            let inside = x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h;
            flow.valid[p] = (inside && frame_owners[f + 1][y as usize * w + x as usize] == k) as u8;
        }
        pairs.push(flow);
    }
    Ok(Clip {
        frames: Tensor::new([t, 3, h, w], data)?,
        flows: FlowField { pairs },
        paths,
    })
}

/// Target frame `t`, temporal radius `n` and sampling rate `s`. Frame
/// indices are 0-based: neighbours are `[t - n, t + n]` clipped to the
/// video and distant frames are `{0, s, 2s, ...}` minus the neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingPlan {
    pub target: usize,
    pub radius: usize,
    pub rate: usize,
    pub neighbors_only: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub neighbors: Vec<usize>,
    pub distant: Vec<usize>,
}

impl Selection {
    /// Neighbours then distant frames.
    pub fn indices(&self) -> Vec<usize> {
        self.neighbors
            .iter()
            .chain(&self.distant)
            .copied()
            .collect()
    }
}

impl SamplingPlan {
    pub fn select(&self, frames: usize) -> Result<Selection> {
        if frames == 0 {
            return Err(Error::InvalidInput("empty video".into()));
        }
        if self.target >= frames {
            return Err(Error::InvalidInput(format!(
                "target frame {} outside a {frames}-frame video",
                self.target
            )));
        }
        if self.rate == 0 {
            return Err(Error::Config("sampling rate must be >= 1".into()));
        }
        let lo = self.target.saturating_sub(self.radius);
        let hi = (self.target + self.radius).min(frames - 1);
        let neighbors: Vec<usize> = (lo..=hi).collect();
        let distant = if self.neighbors_only {
            Vec::new()
        } else {
            (0..frames)
                .step_by(self.rate)
                .filter(|i| !(lo..=hi).contains(i))
                .collect()
        };
        Ok(Selection { neighbors, distant })
    }
}

/// Rows `indices` of the leading axis.
pub fn select_frames<T: Scalar>(x: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.is_empty() {
        return Err(Error::shape("cannot select frames of a scalar"));
    }
    let row: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        if i >= shape[0] {
            return Err(Error::InvalidInput(format!("frame {i} of {}", shape[0])));
        }
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[0] = indices.len();
    Tensor::new(out_shape, data)
}

/// Model input for one plan: selected frames and aligned masks.
pub fn build_batch<T: Scalar>(
    frames: &Tensor<T>,
    masks: &Tensor<T>,
    plan: &SamplingPlan,
) -> Result<(Tensor<T>, Tensor<T>, Selection)> {
    if frames.shape().first() != masks.shape().first() {
        return Err(Error::shape("frame and mask counts differ"));
    }
    let sel = plan.select(frames.shape()[0])?;
    let idx = sel.indices();
    Ok((
        select_frames(frames, &idx)?,
        select_frames(masks, &idx)?,
        sel,
    ))
}

fn frame_to_rgb(frames: &Tensor<f64>, f: usize) -> Vec<u8> {
    let [_, _, h, w] = frames.shape().try_into().expect("rank-4 frames");
    let plane = h * w;
    let mut rgb = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            let v = frames.data()[(f * 3 + c) * plane + p];
            rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    rgb
}

pub fn write_frames(dir: &Path, frames: &Tensor<f64>) -> Result<()> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(format!(
            "expected [T, 3, H, W] frames, got {s:?}"
        )));
    }
    for f in 0..s[0] {
        io::write_png_rgb(
            &dir.join(format!("{f:05}.png")),
            s[3],
            s[2],
            &frame_to_rgb(frames, f),
        )?;
    }
    Ok(())
}

/// Reads `*.png` frames in name order into `[T, 3, H, W]`.
pub fn read_frames(dir: &Path) -> Result<Tensor<f64>> {
    let files = io::list_files(dir, "png")?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no png frames",
            dir.display()
        )));
    }
    let mut size = None;
    let mut data = Vec::new();
    for f in &files {
        let (w, h, rgb) = io::read_rgb(f)?;
        if *size.get_or_insert((w, h)) != (w, h) {
            return Err(Error::InvalidInput(format!(
                "{}: frame sizes differ",
                f.display()
            )));
        }
        let plane = w * h;
        let start = data.len();
        data.resize(start + 3 * plane, 0.0);
        for p in 0..plane {
            for c in 0..3 {
                data[start + c * plane + p] = rgb[p * 3 + c] as f64 / 255.0;
            }
        }
    }
    let (w, h) = size.expect("at least one frame");
    Tensor::new([files.len(), 3, h, w], data)
}

const FLO_TAG: f32 = 202021.25;

/// Middlebury `.flo` bytes.
pub fn encode_flo(flow: &Flow) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.dx.len());
    out.extend_from_slice(&FLO_TAG.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.dx.iter().zip(&flow.dy) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8], valid: Vec<u8>) -> Result<Flow> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| Error::InvalidInput("truncated flow file".into()))
    };
    if f32::from_le_bytes(word(0)?) != FLO_TAG {
        return Err(Error::InvalidInput("not a .flo file".into()));
    }
    let w = i32::from_le_bytes(word(1)?);
    let h = i32::from_le_bytes(word(2)?);
    if w <= 0 || h <= 0 {
        return Err(Error::InvalidInput("bad flow size".into()));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(Error::InvalidInput(
            "flow file size does not match header".into(),
        ));
    }
    let mut dx = Vec::with_capacity(w * h);
    let mut dy = Vec::with_capacity(w * h);
    for p in 0..w * h {
        dx.push(f32::from_le_bytes(word(3 + 2 * p)?) as f64);
        dy.push(f32::from_le_bytes(word(4 + 2 * p)?) as f64);
    }
    let flow = Flow {
        width: w,
        height: h,
        dx,
        dy,
        valid,
    };
    flow.check()?;
    Ok(flow)
}

/// Paths of one video in the dataset layout.
#[derive(Clone, Debug)]
pub struct VideoDir {
    pub id: String,
    pub root: PathBuf,
}

impl VideoDir {
    pub fn new(dataset: &Path, id: &str) -> Self {
        Self {
            id: id.to_string(),
            root: dataset.join(id),
        }
    }

    pub fn frames(&self) -> PathBuf {
        self.root.join("frames")
    }

    pub fn masks(&self) -> PathBuf {
        self.root.join("masks")
    }

    pub fn flows(&self) -> PathBuf {
        self.root.join("flows")
    }

    pub fn write_masks(&self, masks: &[BinaryMask]) -> Result<()> {
        for (i, m) in masks.iter().enumerate() {
            m.write_pgm(&self.masks().join(format!("{i:05}.pgm")))?;
        }
        Ok(())
    }

    /// `flows/%05d.flo` plus `flows/%05d_valid.pgm`.
    pub fn write_flows(&self, flows: &FlowField) -> Result<()> {
        for (i, f) in flows.pairs.iter().enumerate() {
            io::atomic_write(&self.flows().join(format!("{i:05}.flo")), &encode_flo(f))?;
            let valid: Vec<u8> = f.valid.iter().map(|&v| v * 255).collect();
            io::write_pgm(
                &self.flows().join(format!("{i:05}_valid.pgm")),
                f.width,
                f.height,
                &valid,
            )?;
        }
        Ok(())
    }

    /// Flows if the video has a `flows` directory.
    pub fn read_flows(&self) -> Result<Option<FlowField>> {
        let dir = self.flows();
        if !dir.is_dir() {
            return Ok(None);
        }
        let mut pairs = Vec::new();
        for path in io::list_files(&dir, "flo")? {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let stem = path
                .file_stem()
                .expect("file name")
                .to_string_lossy()
                .into_owned();
            let (w, h, valid) = io::read_gray(&dir.join(format!("{stem}_valid.pgm")))?;
            let valid: Vec<u8> = valid.iter().map(|&v| (v > 127) as u8).collect();
            let flow = decode_flo(&bytes, valid)?;
            if (flow.width, flow.height) != (w, h) {
                return Err(Error::InvalidInput(format!(
                    "{}: validity size differs",
                    path.display()
                )));
            }
            pairs.push(flow);
        }
        Ok(Some(FlowField { pairs }))
    }
}

/// Video ids (subdirectories with a `frames` directory), sorted.
pub fn list_videos(dataset: &Path) -> Result<Vec<VideoDir>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dataset).map_err(|e| Error::io(dataset, e))? {
        let path = entry.map_err(|e| Error::io(dataset, e))?.path();
        if path.join("frames").is_dir() {
            let id = path
                .file_name()
                .expect("dir name")
                .to_string_lossy()
                .into_owned();
            out.push(VideoDir { id, root: path });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::warping_error;
    use proptest::prelude::*;

    fn sprite(vx: i64, vy: i64) -> Sprite {
        Sprite {
            shape: SpriteShape::Rect,
            width: 6,
            height: 5,
            color: [200, 40, 90],
            x: 4,
            y: 6,
            vx,
            vy,
            trajectory: Trajectory::Linear,
        }
    }

    fn scene(sprites: Vec<Sprite>) -> SceneSpec {
        SceneSpec {
            width: 32,
            height: 20,
            frames: 6,
            background: Background::Texture,
            sprites,
            seed: 9,
        }
    }

    #[test]
    fn static_sprites_give_identical_frames_and_zero_flow() {
        let clip = generate_clip(&scene(vec![sprite(0, 0)])).unwrap();
        let plane = 3 * 20 * 32;
        for f in 1..6 {
            assert_eq!(
                &clip.frames.data()[..plane],
                &clip.frames.data()[f * plane..(f + 1) * plane]
            );
        }
        for p in &clip.flows.pairs {
            assert!(p.dx.iter().chain(&p.dy).all(|&v| v == 0.0));
            assert!(p.valid.iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn rightward_sprite_has_flow_two_zero() {
        let clip = generate_clip(&scene(vec![sprite(2, 0)])).unwrap();
        let f0 = &clip.flows.pairs[0];
        for y in 0..20 {
            for x in 0..32 {
                let p = y * 32 + x;
                let on = (4..10).contains(&x) && (6..11).contains(&y);
                let expect = if on { 2.0 } else { 0.0 };
                assert_eq!((f0.dx[p], f0.dy[p]), (expect, 0.0), "pixel {x},{y}");
            }
        }
        // Background uncovered by the sprite's head is occluded next frame.
        assert_eq!(f0.valid[6 * 32 + 10], 0);
        assert_eq!(f0.valid[6 * 32 + 4], 1);
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let spec = SceneSpec::random(64, 36, 8, 3, 5);
        let a = generate_clip(&spec).unwrap();
        let b = generate_clip(&spec).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
        assert_eq!(a.flows, b.flows);
    }

    #[test]
    fn bounce_reflects_at_edges() {
        assert_eq!(bounce(1, -3, 10), (2, 3));
        assert_eq!(bounce(9, 3, 10), (8, -3));
        assert_eq!(bounce(5, 2, 10), (7, 2));
    }

    #[test]
    fn sampling_plan_example() {
        // Frames 1..=20 in 1-based numbering, target 10: neighbours 8..=12,
        // distant {1, 11} minus the window = {1}.
        let plan = SamplingPlan {
            target: 9,
            radius: 2,
            rate: 10,
            neighbors_only: false,
        };
        let sel = plan.select(20).unwrap();
        assert_eq!(sel.neighbors, vec![7, 8, 9, 10, 11]);
        assert_eq!(sel.distant, vec![0]);
    }

    #[test]
    fn sampling_rate_beyond_length_keeps_first_frame() {
        let plan = SamplingPlan {
            target: 9,
            radius: 2,
            rate: 25,
            neighbors_only: false,
        };
        assert_eq!(plan.select(20).unwrap().distant, vec![0]);
        let only = SamplingPlan {
            neighbors_only: true,
            ..plan
        };
        assert!(only.select(20).unwrap().distant.is_empty());
        assert!(SamplingPlan { target: 20, ..plan }.select(20).is_err());
        assert!(SamplingPlan { rate: 0, ..plan }.select(20).is_err());
    }

    #[test]
    fn build_batch_aligns_masks() {
        let frames = Tensor::<f64>::from_fn([6, 3, 2, 2], |i| (i / 12) as f64);
        let masks = Tensor::<f64>::from_fn([6, 1, 2, 2], |i| (i / 4) as f64);
        let plan = SamplingPlan {
            target: 4,
            radius: 1,
            rate: 2,
            neighbors_only: false,
        };
        let (f, m, sel) = build_batch(&frames, &masks, &plan).unwrap();
        assert_eq!(sel.indices(), vec![3, 4, 5, 0, 2]);
        assert_eq!(f.shape(), &[5, 3, 2, 2]);
        for (k, &i) in sel.indices().iter().enumerate() {
            assert_eq!(f.data()[k * 12], i as f64);
            assert_eq!(m.data()[k * 4], i as f64);
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(&SceneSpec::random(16, 12, 4, 2, 1)).unwrap();
        let v = VideoDir::new(dir.path(), "vid0");
        write_frames(&v.frames(), &clip.frames).unwrap();
        v.write_flows(&clip.flows).unwrap();
        v.write_masks(&[BinaryMask::empty(16, 12)]).unwrap();
        assert_eq!(read_frames(&v.frames()).unwrap().data(), clip.frames.data());
        assert_eq!(v.read_flows().unwrap().unwrap(), clip.flows);
        assert_eq!(list_videos(dir.path()).unwrap()[0].id, "vid0");
        assert!(v.masks().join("00000.pgm").is_file());
    }

    #[test]
    fn flo_rejects_garbage() {
        assert!(decode_flo(b"abcd", vec![]).is_err());
        let f = Flow::zero(2, 1);
        let mut bytes = encode_flo(&f);
        bytes.pop();
        assert!(decode_flo(&bytes, vec![1, 1]).is_err());
    }

    #[test]
    fn oversized_sprite_rejected() {
        let mut s = sprite(1, 1);
        s.width = 40;
        assert!(generate_clip(&scene(vec![s])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn true_flow_warps_exactly(seed in any::<u64>(), count in 0usize..5) {
            let clip = generate_clip(&SceneSpec::random(48, 28, 6, count, seed)).unwrap();
            prop_assert!(warping_error(&clip.frames, &clip.flows).unwrap() < 1e-6);
        }

        #[test]
        fn sprites_stay_inside_and_move_slowly(seed in any::<u64>()) {
            let spec = SceneSpec::random(40, 24, 30, 3, seed);
            for (s, path) in spec.sprites.iter().zip(
                spec.sprites.iter().map(|s| sprite_path(s, 40, 24, 30)),
            ) {
                for w in path.windows(2) {
                    prop_assert!((w[1].0 - w[0].0).abs() <= MAX_SPEED);
                    prop_assert!((w[1].1 - w[0].1).abs() <= MAX_SPEED);
                }
                for &(x, y) in &path {
                    prop_assert!(x >= 0 && y >= 0);
                    prop_assert!(x as usize + s.width <= 40 && y as usize + s.height <= 24);
                }
            }
        }

        #[test]
        fn plan_never_duplicates_and_keeps_target(
            frames in 1usize..40, t in 0usize..40, n in 0usize..6, s in 1usize..15,
        ) {
            let plan = SamplingPlan { target: t % frames, radius: n, rate: s, neighbors_only: false };
            let idx = plan.select(frames).unwrap().indices();
            let mut sorted = idx.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), idx.len());
            prop_assert!(idx.contains(&(t % frames)));
        }
    }
}
