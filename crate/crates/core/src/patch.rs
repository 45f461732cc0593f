//! Non-overlapping spatial patches across all frames.
//!
//! A `T x c x h x w` feature volume is cut into `r1 x r2` patches, giving
//! `N = T * (h / r1) * (w / r2)` rows of length `L = r1 * r2 * c`. Rows are
//! ordered frame-major, then row-major over the patch grid; within a row the
//! layout is `(channel, dy, dx)`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::permute_tensor;
use crate::tensor::{Scalar, Tensor};

/// Patch extent in feature pixels: `rows` along height, `cols` along width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PatchShape {
    pub rows: usize,
    pub cols: usize,
}

impl PatchShape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }
}

impl std::fmt::Display for PatchShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// How a feature volume maps onto patch rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: PatchShape,
}

impl PatchLayout {
    pub fn new(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        patch: PatchShape,
    ) -> Result<Self> {
        if patch.rows == 0
            || patch.cols == 0
            || !height.is_multiple_of(patch.rows)
            || !width.is_multiple_of(patch.cols)
        {
            return Err(Error::shape(format!(
                "patch {patch} does not tile a {height}x{width} feature map"
            )));
        }
        Ok(Self {
            frames,
            channels,
            height,
            width,
            patch,
        })
    }

    pub fn for_features(shape: &[usize], patch: PatchShape) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "expected T x c x h x w features, got {shape:?}"
            )));
        }
        Self::new(shape[0], shape[1], shape[2], shape[3], patch)
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch.rows
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch.cols
    }

    pub fn patches_per_frame(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// `N`.
    pub fn num_patches(&self) -> usize {
        self.frames * self.patches_per_frame()
    }

    /// `L`.
    pub fn patch_len(&self) -> usize {
        self.patch.rows * self.patch.cols * self.channels
    }

    /// `(frame, grid row, grid col)` of patch `n`.
    pub fn locate(&self, n: usize) -> (usize, usize, usize) {
        let per = self.patches_per_frame();
        let (t, r) = (n / per, n % per);
        (t, r / self.grid_cols(), r % self.grid_cols())
    }

    fn split_shape(&self) -> [usize; 6] {
        [
            self.frames,
            self.channels,
            self.grid_rows(),
            self.patch.rows,
            self.grid_cols(),
            self.patch.cols,
        ]
    }

    fn grid_shape(&self) -> [usize; 6] {
        [
            self.frames,
            self.grid_rows(),
            self.grid_cols(),
            self.channels,
            self.patch.rows,
            self.patch.cols,
        ]
    }
}

const TO_PATCHES: [usize; 6] = [0, 2, 4, 1, 3, 5];
const FROM_PATCHES: [usize; 6] = [0, 3, 1, 4, 2, 5];

/// Flattened patches plus per-patch visibility (`true` = usable as a key).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T = f32> {
    pub patches: Tensor<T>,
    pub layout: PatchLayout,
    pub visibility: Vec<bool>,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn with_visibility(mut self, visibility: Vec<bool>) -> Result<Self> {
        if visibility.len() != self.layout.num_patches() {
            return Err(Error::shape(format!(
                "{} visibility flags for {} patches",
                visibility.len(),
                self.layout.num_patches()
            )));
        }
        self.visibility = visibility;
        Ok(self)
    }
}

pub fn extract_patches<T: Scalar>(features: &Tensor<T>, patch: PatchShape) -> Result<PatchGrid<T>> {
    let layout = PatchLayout::for_features(features.shape(), patch)?;
    let split = features.clone().reshape(layout.split_shape().to_vec())?;
    let patches = permute_tensor(&split, &TO_PATCHES)?
        .reshape(vec![layout.num_patches(), layout.patch_len()])?;
    Ok(PatchGrid {
        patches,
        visibility: vec![true; layout.num_patches()],
        layout,
    })
}

pub fn reassemble<T: Scalar>(grid: &PatchGrid<T>) -> Result<Tensor<T>> {
    let l = &grid.layout;
    if grid.patches.shape() != [l.num_patches(), l.patch_len()] {
        return Err(Error::shape(format!(
            "patch matrix {:?} inconsistent with layout ({} x {})",
            grid.patches.shape(),
            l.num_patches(),
            l.patch_len()
        )));
    }
    if grid.visibility.len() != l.num_patches() {
        return Err(Error::shape("visibility length inconsistent with layout"));
    }
    let g = grid.patches.clone().reshape(l.grid_shape().to_vec())?;
    permute_tensor(&g, &FROM_PATCHES)?.reshape(vec![l.frames, l.channels, l.height, l.width])
}

/// Differentiable extraction: `T x c x h x w` to `N x L`.
pub fn extract_patches_var<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    patch: PatchShape,
) -> Result<(Var, PatchLayout)> {
    let layout = PatchLayout::for_features(tape.shape(features), patch)?;
    let split = tape.reshape(features, &layout.split_shape())?;
    let perm = tape.permute(split, &TO_PATCHES)?;
    let rows = tape.reshape(perm, &[layout.num_patches(), layout.patch_len()])?;
    Ok((rows, layout))
}

/// Differentiable inverse of [`extract_patches_var`].
pub fn reassemble_var<T: Scalar>(
    tape: &mut Tape<T>,
    rows: Var,
    layout: &PatchLayout,
) -> Result<Var> {
    if tape.shape(rows) != [layout.num_patches(), layout.patch_len()] {
        return Err(Error::shape("patch rows inconsistent with layout"));
    }
    let g = tape.reshape(rows, &layout.grid_shape())?;
    let perm = tape.permute(g, &FROM_PATCHES)?;
    tape.reshape(
        perm,
        &[layout.frames, layout.channels, layout.height, layout.width],
    )
}

fn check_binary<T: Scalar>(mask: &Tensor<T>) -> Result<()> {
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
    }
    Ok(())
}

/// A patch is visible iff its fraction of masked pixels is `<= threshold`.
/// With `threshold = 0` any masked pixel hides the patch.
pub fn patch_visibility<T: Scalar>(
    mask: &Tensor<T>,
    patch: PatchShape,
    threshold: f64,
) -> Result<Vec<bool>> {
    let shape = mask.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::shape(format!(
            "expected T x 1 x h x w mask, got {shape:?}"
        )));
    }
    check_binary(mask)?;
    let layout = PatchLayout::for_features(shape, patch)?;
    let area = (patch.rows * patch.cols) as f64;
    let (h, w) = (layout.height, layout.width);
    let data = mask.data();
    Ok((0..layout.num_patches())
        .map(|n| {
            let (t, gr, gc) = layout.locate(n);
            let mut masked = 0usize;
            for dy in 0..patch.rows {
                let row = (t * h + gr * patch.rows + dy) * w + gc * patch.cols;
                masked += data[row..row + patch.cols]
                    .iter()
                    .filter(|&&v| v == T::one())
                    .count();
            }
            masked as f64 / area <= threshold
        })
        .collect())
}

/// Max-pools a `T x 1 x H x W` binary mask by `factor` in both directions: a
/// pooled pixel is masked if any pixel it covers is.
pub fn downsample_mask<T: Scalar>(mask: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let shape = mask.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::shape(format!(
            "expected T x 1 x H x W mask, got {shape:?}"
        )));
    }
    let (t, h, w) = (shape[0], shape[2], shape[3]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "mask {h}x{w} not divisible by {factor}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let src = mask.data();
    let mut out = Tensor::zeros([t, 1, ho, wo]);
    let dst = out.data_mut();
    for f in 0..t {
        for y in 0..h {
            for x in 0..w {
                let v = src[(f * h + y) * w + x];
                let o = &mut dst[(f * ho + y / factor) * wo + x / factor];
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    Ok(out)
}
