//! Video quality metrics: PSNR, SSIM and flow warping error.
//!
//! Videos are `[T, C, H, W]` tensors with values in `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{Scalar, Tensor};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn video_dims(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [t, c, h, w] if t > 0 && h > 0 && w > 0 && (c == 1 || c == 3) => Ok([t, c, h, w]),
        _ => Err(Error::shape(format!(
            "expected a [T, 1|3, H, W] video, got {shape:?}"
        ))),
    }
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10 log10(1 / MSE)` over all values, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    if a.numel() == 0 {
        return Err(Error::Degenerate("psnr of an empty tensor".into()));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(psnr_from_mse(se / a.numel() as f64))
}

/// PSNR restricted to hole pixels. `masks` is `[T, 1, H, W]`.
pub fn masked_psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, masks: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let [t, c, h, w] = video_dims(a.shape())?;
    if masks.shape() != [t, 1, h, w] {
        return Err(Error::shape(format!(
            "mask shape {:?} for video {:?}",
            masks.shape(),
            a.shape()
        )));
    }
    let plane = h * w;
    let (mut se, mut n) = (0.0, 0usize);
    for f in 0..t {
        for ch in 0..c {
            let base = (f * c + ch) * plane;
            for p in 0..plane {
                if masks.data()[f * plane + p].as_f64() > 0.5 {
                    let d = a.data()[base + p].as_f64() - b.data()[base + p].as_f64();
                    se += d * d;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("masked psnr with an empty mask".into()));
    }
    Ok(psnr_from_mse(se / n as f64))
}

/// Luminance planes `[T][H*W]`, BT.601 weights for colour input.
fn luminance<T: Scalar>(v: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let [t, c, h, w] = video_dims(v.shape())?;
    let plane = h * w;
    let d = v.data();
    Ok((0..t)
        .map(|f| {
            let base = f * c * plane;
            (0..plane)
                .map(|p| {
                    if c == 1 {
                        d[base + p].as_f64()
                    } else {
                        0.299 * d[base + p].as_f64()
                            + 0.587 * d[base + plane + p].as_f64()
                            + 0.114 * d[base + 2 * plane + p].as_f64()
                    }
                })
                .collect()
        })
        .collect())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" Gaussian filter of an `h x w` plane.
fn blur(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean local SSIM of one pair of planes.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, mu_b) = (blur(a, h, w, g), blur(b, h, w, g));
    let aa = blur(&prod(a, a), h, w, g);
    let bb = blur(&prod(b, b), h, w, g);
    let ab = blur(&prod(a, b), h, w, g);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM over frames, on luminance, with an 11-tap Gaussian window
/// (sigma 1.5) and no padding.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let [t, _, h, w] = video_dims(a.shape())?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let (la, lb) = (luminance(a)?, luminance(b)?);
    let g = gaussian_window();
    let total: f64 = la
        .iter()
        .zip(&lb)
        .map(|(pa, pb)| ssim_plane(pa, pb, h, w, &g))
        .sum();
    Ok(total / t as f64)
}

/// Displacement from frame `t` to frame `t + 1`, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    /// 1 where the pixel is visible in both frames.
    pub valid: Vec<u8>,
}

impl Flow {
    pub fn zero(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            valid: vec![1; n],
        }
    }

    pub fn check(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.dx.len() != n || self.dy.len() != n || self.valid.len() != n {
            return Err(Error::shape("flow buffers do not match its size"));
        }
        if !self.dx.iter().chain(&self.dy).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite flow".into()));
        }
        if self.valid.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("flow validity is not binary".into()));
        }
        Ok(())
    }
}

/// Flows between consecutive frames; `pairs[t]` maps frame `t` to `t + 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowField {
    pub pairs: Vec<Flow>,
}

/// Bilinear sample of plane `p` at `(x, y)`; `None` outside the pixel grid.
fn bilinear(p: &[f64], w: usize, h: usize, x: f64, y: f64) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let at = |xx: usize, yy: usize| p[yy * w + xx];
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Mean over valid pixels of `sum_c |frame_t(p) - frame_{t+1}(p + flow_t(p))|`,
/// with bilinear sampling of frame `t + 1`. Pixels whose target falls off
/// the frame are skipped.
pub fn warping_error<T: Scalar>(video: &Tensor<T>, flows: &FlowField) -> Result<f64> {
    let [t, c, h, w] = video_dims(video.shape())?;
    if flows.pairs.len() + 1 < t {
        return Err(Error::InvalidInput(format!(
            "{} flow pairs for {t} frames",
            flows.pairs.len()
        )));
    }
    let plane = h * w;
    let data = video.to_f64_vec();
    let (mut total, mut count) = (0.0, 0usize);
    for (f, flow) in flows.pairs.iter().take(t.saturating_sub(1)).enumerate() {
        flow.check()?;
        if (flow.width, flow.height) != (w, h) {
            return Err(Error::shape(format!(
                "flow {f} is {}x{}, video is {w}x{h}",
                flow.width, flow.height
            )));
        }
        for p in 0..plane {
            if flow.valid[p] == 0 {
                continue;
            }
            let (x, y) = ((p % w) as f64 + flow.dx[p], (p / w) as f64 + flow.dy[p]);
            let mut err = 0.0;
            let mut inside = true;
            for ch in 0..c {
                let cur = &data[(f * c + ch) * plane..][..plane];
                let next = &data[((f + 1) * c + ch) * plane..][..plane];
                match bilinear(next, w, h, x, y) {
                    Some(v) => err += (cur[p] - v).abs(),
                    None => inside = false,
                }
            }
            if inside {
                total += err;
                count += 1;
            }
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// One line of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub e_warp: Option<f64>,
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    io::atomic_write(path, &bytes)
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
