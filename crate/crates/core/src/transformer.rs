//! Multi-head, multi-scale spatial-temporal patch attention.
//!
//! One layer runs, per head:
//!
//! 1. **Embedding**: 1x1 convolutions map features to query, key and value
//!    maps. The three full-width convolutions are split by channel, so head
//!    `i` sees channels `i * c_head .. (i + 1) * c_head`.
//! 2. **Matching**: queries and keys are cut into `r1 x r2` patches across
//!    all frames and compared by scaled dot product,
//!    `s_ij = q_i . k_j / sqrt(r1 * r2 * c_head)`.
//! 3. **Attending**: a softmax restricted to visible key patches weights the
//!    value patches; the result is pieced back into frames.
//!
//! Head outputs are concatenated, fused by a 1x1 convolution and refined by
//! a 3x3 residual block.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2dLayer, ParamBinding, ParamStore, ResidualBlock};
use crate::patch::{
    extract_patches_var, patch_visibility, reassemble_var, PatchGrid, PatchLayout, PatchShape,
};
use crate::tensor::{Scalar, Tensor};

/// Counter key for the two attention matrix products (`Q K^T` and `A V`).
pub const ATTENTION_FLOPS: &str = "attention_matmul_flops";

/// Similarity matrix `S = Q K^T / sqrt(L)` for `N x L` query and key rows.
pub fn similarity_var<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape(format!("match {qs:?} against {ks:?}")));
    }
    let kt = tape.permute(k, &[1, 0])?;
    let s = tape.matmul(q, kt)?;
    tape.count(ATTENTION_FLOPS, 2 * (qs[0] * ks[0] * qs[1]) as u64);
    Ok(tape.scale(s, 1.0 / (qs[1] as f64).sqrt()))
}

/// Row-wise softmax over visible columns; invisible columns are exactly 0.
pub fn attention_weights_var<T: Scalar>(
    tape: &mut Tape<T>,
    scores: Var,
    visible: &[bool],
) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 2 || shape[1] != visible.len() {
        return Err(Error::shape(format!(
            "scores {shape:?} with {} visibility flags",
            visible.len()
        )));
    }
    let keys: Vec<usize> = (0..visible.len()).filter(|&j| visible[j]).collect();
    if keys.is_empty() {
        return Err(Error::Degenerate("no visible key patches".into()));
    }
    let (n, m) = (shape[0], shape[1]);
    let s = tape.value(scores).data();
    let mut a = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &s[i * m..(i + 1) * m];
        let max = keys.iter().map(|&j| row[j]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for &j in &keys {
            let e = (row[j] - max).exp();
            a[i * m + j] = e;
            total += e;
        }
        for &j in &keys {
            a[i * m + j] = a[i * m + j] / total;
        }
    }
    let out = Tensor::new(shape, a)?;
    Ok(tape.push_op(
        "attention_weights",
        out,
        &[scores],
        Box::new(move |ctx| {
            let a = ctx.output.data();
            let g = ctx.grad.data();
            let mut ds = vec![T::zero(); n * m];
            for i in 0..n {
                let dot: T = keys.iter().map(|&j| a[i * m + j] * g[i * m + j]).sum();
                for &j in &keys {
                    ds[i * m + j] = a[i * m + j] * (g[i * m + j] - dot);
                }
            }
            vec![Some(Tensor::new(vec![n, m], ds).expect("shape"))]
        }),
    ))
}

/// `O = A V`.
pub fn attend_var<T: Scalar>(tape: &mut Tape<T>, weights: Var, values: Var) -> Result<Var> {
    let (n, m) = (tape.shape(weights)[0], tape.shape(weights)[1]);
    let l = tape.shape(values).get(1).copied().unwrap_or(0);
    let out = tape.matmul(weights, values)?;
    tape.count(ATTENTION_FLOPS, 2 * (n * m * l) as u64);
    Ok(out)
}

/// Plain-tensor similarity between two patch grids.
pub fn match_patches<T: Scalar>(q: &PatchGrid<T>, k: &PatchGrid<T>) -> Result<Tensor<T>> {
    if q.patches.shape() != k.patches.shape() {
        return Err(Error::shape(format!(
            "query patches {:?} vs key patches {:?}",
            q.patches.shape(),
            k.patches.shape()
        )));
    }
    let mut tape = Tape::new();
    let qv = tape.constant(q.patches.clone());
    let kv = tape.constant(k.patches.clone());
    let s = similarity_var(&mut tape, qv, kv)?;
    Ok(tape.value(s).clone())
}

/// Plain-tensor masked softmax.
pub fn attention_weights<T: Scalar>(scores: &Tensor<T>, visible: &[bool]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let a = attention_weights_var(&mut tape, s, visible)?;
    Ok(tape.value(a).clone())
}

/// Plain-tensor weighted sum of value patches.
pub fn attend<T: Scalar>(weights: &Tensor<T>, values: &PatchGrid<T>) -> Result<PatchGrid<T>> {
    let n = values.layout.num_patches();
    if weights.shape() != [n, n] {
        return Err(Error::shape(format!(
            "weights {:?} for {n} value patches",
            weights.shape()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(weights.clone());
    let v = tape.constant(values.patches.clone());
    let o = attend_var(&mut tape, a, v)?;
    Ok(PatchGrid {
        patches: tape.value(o).clone(),
        layout: values.layout,
        visibility: values.visibility.clone(),
    })
}

/// Attention matrix of one head, kept for inspection.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub layer: usize,
    pub head: usize,
    pub layout: PatchLayout,
    pub visibility: Vec<bool>,
    /// `N x N`; row `i` is the distribution of query patch `i` over keys.
    pub weights: Tensor<f64>,
}

/// Key visibility for one head. When no patch passes `threshold` (a head
/// whose patches all overlap the hole), the least-masked patches are used.
pub fn head_visibility<T: Scalar>(
    mask: &Tensor<T>,
    patch: PatchShape,
    threshold: f64,
) -> Result<Vec<bool>> {
    let vis = patch_visibility(mask, patch, threshold)?;
    if vis.iter().any(|&v| v) {
        return Ok(vis);
    }
    let layout = PatchLayout::for_features(mask.shape(), patch)?;
    let per_patch = masked_fractions(mask, &layout);
    let least = per_patch.iter().copied().fold(f64::INFINITY, f64::min);
    if least >= 1.0 {
        return Err(Error::Degenerate(
            "mask covers every pixel; nothing to attend to".into(),
        ));
    }
    Ok(per_patch.iter().map(|&f| f <= least).collect())
}

fn masked_fractions<T: Scalar>(mask: &Tensor<T>, layout: &PatchLayout) -> Vec<f64> {
    let (h, w) = (layout.height, layout.width);
    let p = layout.patch;
    let data = mask.data();
    (0..layout.num_patches())
        .map(|n| {
            let (t, gr, gc) = layout.locate(n);
            let mut masked = 0.0;
            for dy in 0..p.rows {
                for dx in 0..p.cols {
                    masked += data[(t * h + gr * p.rows + dy) * w + gc * p.cols + dx].as_f64();
                }
            }
            masked / (p.rows * p.cols) as f64
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub channels: usize,
    pub heads: Vec<PatchShape>,
    pub query: Conv2dLayer,
    pub key: Conv2dLayer,
    pub value: Conv2dLayer,
    pub fusion: Conv2dLayer,
    pub residual: ResidualBlock,
    /// Masked-pixel fraction above which a key patch is excluded.
    pub visibility_threshold: f64,
}

/// Per-head embedded maps, each `T x c_head x h x w`.
pub struct Embedded {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        heads: &[PatchShape],
        visibility_threshold: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads.is_empty() || !channels.is_multiple_of(heads.len()) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split across {} heads",
                heads.len()
            )));
        }
        let c = channels;
        Ok(Self {
            channels,
            heads: heads.to_vec(),
            query: Conv2dLayer::linear(store, &format!("{name}.query"), c, c, 1, rng),
            key: Conv2dLayer::linear(store, &format!("{name}.key"), c, c, 1, rng),
            value: Conv2dLayer::linear(store, &format!("{name}.value"), c, c, 1, rng),
            fusion: Conv2dLayer::linear(store, &format!("{name}.fusion"), c, c, 1, rng),
            residual: ResidualBlock::new(store, &format!("{name}.residual"), c, rng),
            visibility_threshold,
        })
    }

    pub fn head_channels(&self) -> usize {
        self.channels / self.heads.len()
    }

    pub fn num_params(&self) -> usize {
        self.query.num_params()
            + self.key.num_params()
            + self.value.num_params()
            + self.fusion.num_params()
            + self.residual.num_params()
    }

    /// Checks that every head tiles an `h x w` feature map.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        for p in &self.heads {
            if p.rows == 0 || p.cols == 0 || !h.is_multiple_of(p.rows) || !w.is_multiple_of(p.cols)
            {
                return Err(Error::Config(format!(
                    "head patch {p} does not tile a {h}x{w} feature map"
                )));
            }
        }
        Ok(())
    }

    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamBinding<'_, T>,
        features: Var,
    ) -> Result<Embedded> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "transformer expects T x {} x h x w, got {shape:?}",
                self.channels
            )));
        }
        let ch = self.head_channels();
        let mut split = |tape: &mut Tape<T>, conv: &Conv2dLayer| -> Result<Vec<Var>> {
            let full = conv.forward(tape, params, features)?;
            (0..self.heads.len())
                .map(|h| tape.slice(full, 1, h * ch, ch))
                .collect()
        };
        Ok(Embedded {
            query: split(tape, &self.query)?,
            key: split(tape, &self.key)?,
            value: split(tape, &self.value)?,
        })
    }

    /// `features`: `T x c x h x w`; `mask`: `T x 1 x h x w` at feature
    /// resolution (1 = hole). Appends one trace per head when asked.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamBinding<'_, T>,
        features: Var,
        mask: &Tensor<T>,
        mut traces: Option<(&mut Vec<AttentionTrace>, usize)>,
    ) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "expected T x c x h x w, got {shape:?}"
            )));
        }
        if mask.shape() != [shape[0], 1, shape[2], shape[3]] {
            return Err(Error::shape(format!(
                "mask {:?} does not match features {shape:?}",
                mask.shape()
            )));
        }
        self.validate(shape[2], shape[3])?;
        let emb = self.embed(tape, params, features)?;
        let mut outputs = Vec::with_capacity(self.heads.len());
        for (h, &patch) in self.heads.iter().enumerate() {
            let visible = head_visibility(mask, patch, self.visibility_threshold)?;
            let (q, layout) = extract_patches_var(tape, emb.query[h], patch)?;
            let (k, _) = extract_patches_var(tape, emb.key[h], patch)?;
            let (v, _) = extract_patches_var(tape, emb.value[h], patch)?;
            let s = similarity_var(tape, q, k)?;
            let a = attention_weights_var(tape, s, &visible)?;
            if let Some((sink, layer)) = traces.as_mut() {
                sink.push(AttentionTrace {
                    layer: *layer,
                    head: h,
                    layout,
                    visibility: visible.clone(),
                    weights: tape.value(a).cast(),
                });
            }
            let o = attend_var(tape, a, v)?;
            outputs.push(reassemble_var(tape, o, &layout)?);
        }
        let joined = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat(&outputs, 1)?
        };
        let fused = self.fusion.forward(tape, params, joined)?;
        self.residual.forward(tape, params, fused)
    }
}

/// Applies layers in order. Visibility comes from the same input mask at
/// every layer.
pub fn stack_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut ParamBinding<'_, T>,
    layers: &[TransformerLayer],
    features: Var,
    mask: &Tensor<T>,
    mut traces: Option<&mut Vec<AttentionTrace>>,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::Config(
            "transformer stack needs at least one layer".into(),
        ));
    }
    let mut f = features;
    for (i, layer) in layers.iter().enumerate() {
        let sink = traces.as_deref_mut().map(|s| (s, i));
        f = layer.forward(tape, params, f, mask, sink)?;
    }
    Ok(f)
}

/// Rows of `weights` reshaped as `T x grid_rows x grid_cols` heatmaps, for
/// query patch `query`.
pub fn attention_heatmap(trace: &AttentionTrace, query: usize) -> Result<Tensor<f64>> {
    let l = &trace.layout;
    let n = l.num_patches();
    if query >= n {
        return Err(Error::InvalidInput(format!(
            "query patch {query} out of {n}"
        )));
    }
    let row = trace.weights.data()[query * n..(query + 1) * n].to_vec();
    Tensor::new([l.frames, l.grid_rows(), l.grid_cols()], row)
}
