//! 2D and 3D convolution (cross-correlation) via im2col + GEMM.
//!
//! A 2D convolution is run as a 3D one with a unit temporal extent, so both
//! share one kernel and one backward rule.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::params::{Init, ParamBinding, ParamId, ParamStore};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// `(dx, dw, dbias)`.
type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// `floor((n + 2p - d(k-1) - 1) / s) + 1`, rejecting non-positive results.
pub fn output_extent(n: usize, k: usize, s: usize, p: usize, d: usize) -> Result<usize> {
    let span = d * (k - 1) + 1;
    if s == 0 || n + 2 * p < span {
        return Err(Error::shape(format!(
            "kernel {k} (dilation {d}) does not fit input {n} with padding {p}"
        )));
    }
    Ok((n + 2 * p - span) / s + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    fn new(
        batch: usize,
        in_ch: usize,
        out_ch: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        dilation: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for d in 0..3 {
            output[d] = output_extent(input[d], kernel[d], stride[d], padding[d], dilation[d])?;
        }
        Ok(Self {
            batch,
            in_ch,
            out_ch,
            input,
            kernel,
            stride,
            padding,
            dilation,
            output,
        })
    }

    fn rows(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn plane_out(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn in_volume(&self) -> usize {
        self.in_ch * self.input.iter().product::<usize>()
    }

    fn out_volume(&self) -> usize {
        self.out_ch * self.output.iter().product::<usize>()
    }

    /// Source index along one axis, or `None` when it falls in the padding.
    #[inline]
    fn source(&self, axis: usize, out: usize, k: usize) -> Option<usize> {
        let pos = (out * self.stride[axis] + k * self.dilation[axis]) as isize
            - self.padding[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Column matrix (`rows x plane_out`) for batch item `x` at output frame `to`.
    fn im2col<T: Scalar>(&self, x: &[T], to: usize) -> Vec<T> {
        let [kt, kh, kw] = self.kernel;
        let [_, hi_n, wi_n] = self.input;
        let [_, ho_n, wo_n] = self.output;
        let plane_in = hi_n * wi_n;
        let frames_in = self.input[0];
        let p = self.plane_out();
        let mut col = vec![T::zero(); self.rows() * p];
        let mut r = 0;
        for c in 0..self.in_ch {
            for a in 0..kt {
                let ti = self.source(0, to, a);
                for i in 0..kh {
                    for j in 0..kw {
                        if let Some(ti) = ti {
                            let base = (c * frames_in + ti) * plane_in;
                            let row = &mut col[r * p..(r + 1) * p];
                            for ho in 0..ho_n {
                                let Some(hi) = self.source(1, ho, i) else {
                                    continue;
                                };
                                for wo in 0..wo_n {
                                    if let Some(wi) = self.source(2, wo, j) {
                                        row[ho * wo_n + wo] = x[base + hi * wi_n + wi];
                                    }
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
        col
    }

    /// Scatter-adds a column matrix back into the input-shaped buffer `dx`.
    fn col2im<T: Scalar>(&self, col: &[T], to: usize, dx: &mut [T]) {
        let [kt, kh, kw] = self.kernel;
        let [_, hi_n, wi_n] = self.input;
        let [_, ho_n, wo_n] = self.output;
        let plane_in = hi_n * wi_n;
        let frames_in = self.input[0];
        let p = self.plane_out();
        let mut r = 0;
        for c in 0..self.in_ch {
            for a in 0..kt {
                let ti = self.source(0, to, a);
                for i in 0..kh {
                    for j in 0..kw {
                        if let Some(ti) = ti {
                            let base = (c * frames_in + ti) * plane_in;
                            let row = &col[r * p..(r + 1) * p];
                            for ho in 0..ho_n {
                                let Some(hi) = self.source(1, ho, i) else {
                                    continue;
                                };
                                for wo in 0..wo_n {
                                    if let Some(wi) = self.source(2, wo, j) {
                                        dx[base + hi * wi_n + wi] += row[ho * wo_n + wo];
                                    }
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    /// Copies the `(out_ch x plane)` slab of frame `to` out of an output buffer.
    fn gather_frame<T: Scalar>(&self, out: &[T], to: usize) -> Vec<T> {
        let p = self.plane_out();
        let frames = self.output[0];
        let mut slab = Vec::with_capacity(self.out_ch * p);
        for o in 0..self.out_ch {
            let start = (o * frames + to) * p;
            slab.extend_from_slice(&out[start..start + p]);
        }
        slab
    }

    fn forward<T: Scalar>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        let frames = self.output[0];
        let p = self.plane_out();
        let rows = self.rows();
        let slabs = par::map(self.batch * frames, |idx| {
            let (b, to) = (idx / frames, idx % frames);
            let xb = &x[b * self.in_volume()..(b + 1) * self.in_volume()];
            let col = self.im2col(xb, to);
            let mut out = vec![T::zero(); self.out_ch * p];
            T::gemm(
                self.out_ch,
                rows,
                p,
                w,
                false,
                &col,
                false,
                T::zero(),
                &mut out,
            );
            if let Some(bias) = bias {
                for (o, chunk) in out.chunks_mut(p).enumerate() {
                    for v in chunk {
                        *v += bias[o];
                    }
                }
            }
            out
        });
        let mut y = vec![T::zero(); self.batch * self.out_volume()];
        for (idx, slab) in slabs.into_iter().enumerate() {
            let (b, to) = (idx / frames, idx % frames);
            let yb = &mut y[b * self.out_volume()..(b + 1) * self.out_volume()];
            for o in 0..self.out_ch {
                let start = (o * frames + to) * p;
                yb[start..start + p].copy_from_slice(&slab[o * p..(o + 1) * p]);
            }
        }
        y
    }

    /// Returns `(dx, dw, dbias)`, each only when requested.
    fn backward<T: Scalar>(&self, x: &[T], w: &[T], grad: &[T], needs: [bool; 3]) -> ConvGrads<T> {
        let frames = self.output[0];
        let p = self.plane_out();
        let rows = self.rows();
        let ov = self.out_volume();
        let iv = self.in_volume();

        let dbias = needs[2].then(|| {
            let mut db = vec![T::zero(); self.out_ch];
            for b in 0..self.batch {
                for (o, d) in db.iter_mut().enumerate() {
                    let start = b * ov + o * frames * p;
                    *d += grad[start..start + frames * p].iter().copied().sum();
                }
            }
            db
        });

        let dw = needs[1].then(|| {
            let partials = par::map(self.batch * frames, |idx| {
                let (b, to) = (idx / frames, idx % frames);
                let col = self.im2col(&x[b * iv..(b + 1) * iv], to);
                let g = self.gather_frame(&grad[b * ov..(b + 1) * ov], to);
                let mut dw = vec![T::zero(); self.out_ch * rows];
                T::gemm(
                    self.out_ch,
                    p,
                    rows,
                    &g,
                    false,
                    &col,
                    true,
                    T::zero(),
                    &mut dw,
                );
                dw
            });
            let mut dw = vec![T::zero(); self.out_ch * rows];
            for part in partials {
                for (a, b) in dw.iter_mut().zip(part) {
                    *a += b;
                }
            }
            dw
        });

        let dx = needs[0].then(|| {
            let per_batch = par::map(self.batch, |b| {
                let cols = par::map(frames, |to| {
                    let g = self.gather_frame(&grad[b * ov..(b + 1) * ov], to);
                    let mut col = vec![T::zero(); rows * p];
                    T::gemm(
                        rows,
                        self.out_ch,
                        p,
                        w,
                        true,
                        &g,
                        false,
                        T::zero(),
                        &mut col,
                    );
                    col
                });
                let mut dx = vec![T::zero(); iv];
                for (to, col) in cols.iter().enumerate() {
                    self.col2im(col, to, &mut dx);
                }
                dx
            });
            per_batch.concat()
        });

        (dx, dw, dbias)
    }
}

fn conv_op<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeom,
    out_shape: Vec<usize>,
) -> Result<Var> {
    let y = geom.forward(
        tape.value(x).data(),
        tape.value(weight).data(),
        bias.map(|b| tape.value(b).data()),
    );
    let out = Tensor::new(out_shape, y)?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(tape.push_op(
        "conv",
        out,
        &inputs,
        Box::new(move |ctx| {
            let needs = [
                ctx.needs[0],
                ctx.needs[1],
                ctx.needs.get(2).copied().unwrap_or(false),
            ];
            let (dx, dw, db) = geom.backward(
                ctx.inputs[0].data(),
                ctx.inputs[1].data(),
                ctx.grad.data(),
                needs,
            );
            let wrap = |d: Option<Vec<T>>, i: usize| {
                d.map(|d| Tensor::new(ctx.inputs[i].shape().to_vec(), d).expect("shape"))
            };
            let mut grads = vec![wrap(dx, 0), wrap(dw, 1)];
            if ctx.inputs.len() == 3 {
                grads.push(wrap(db, 2));
            }
            grads
        }),
    ))
}

/// Differentiable 2D convolution on `B x C x H x W`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(format!("conv2d input {xs:?}, weight {ws:?}")));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {}, weight expects {}",
            xs[1], ws[1]
        )));
    }
    if let Some(b) = bias {
        if tape.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d bias length"));
        }
    }
    let geom = ConvGeom::new(
        xs[0],
        xs[1],
        ws[0],
        [1, xs[2], xs[3]],
        [1, ws[2], ws[3]],
        [1, stride, stride],
        [0, padding, padding],
        [1, dilation, dilation],
    )?;
    let out_shape = vec![xs[0], ws[0], geom.output[1], geom.output[2]];
    conv_op(tape, x, weight, bias, geom, out_shape)
}

/// Differentiable 3D convolution on `B x C x T x H x W`.
pub fn conv3d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weight).to_vec();
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::shape(format!("conv3d input {xs:?}, weight {ws:?}")));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(format!(
            "conv3d channel mismatch: input has {}, weight expects {}",
            xs[1], ws[1]
        )));
    }
    if let Some(b) = bias {
        if tape.shape(b) != [ws[0]] {
            return Err(Error::shape("conv3d bias length"));
        }
    }
    let geom = ConvGeom::new(
        xs[0],
        xs[1],
        ws[0],
        [xs[2], xs[3], xs[4]],
        [ws[2], ws[3], ws[4]],
        stride,
        padding,
        [1, 1, 1],
    )?;
    let [t, h, w] = geom.output;
    conv_op(tape, x, weight, bias, geom, vec![xs[0], ws[0], t, h, w])
}

/// 2D convolution layer with "same"-style padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_init(
            store,
            name,
            in_ch,
            out_ch,
            kernel,
            stride,
            1,
            Init::Rectified,
            rng,
        )
    }

    /// A layer with no rectifier after it.
    pub fn linear<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_init(store, name, in_ch, out_ch, kernel, 1, 1, Init::Linear, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn dilated<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_init(
            store,
            name,
            in_ch,
            out_ch,
            kernel,
            stride,
            dilation,
            Init::Rectified,
            rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            init.bound(in_ch * kernel * kernel),
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[out_ch]);
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &mut ParamBinding<'_, T>,
        x: Var,
    ) -> Result<Var> {
        let w = params.var(tape, self.weight);
        let b = params.var(tape, self.bias);
        conv2d(
            tape,
            x,
            w,
            Some(b),
            self.stride,
            self.padding,
            self.dilation,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_size_formula() {
        assert_eq!(output_extent(432, 3, 2, 1, 1).unwrap(), 216);
        assert_eq!(output_extent(216, 3, 2, 1, 1).unwrap(), 108);
        assert_eq!(output_extent(240, 3, 2, 1, 1).unwrap(), 120);
        assert_eq!(output_extent(120, 3, 2, 1, 1).unwrap(), 60);
        assert!(output_extent(2, 5, 1, 0, 1).is_err());
        assert_eq!(output_extent(7, 3, 1, 2, 2).unwrap(), 7);
    }

    #[test]
    fn identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::eye(3).reshape([3, 3, 1, 1]).unwrap());
        let y = conv2d(&mut tape, xv, w, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn ones_kernel_on_one_hot() {
        let mut x = Tensor::<f64>::zeros([1, 1, 5, 5]);
        x.set(&[0, 0, 2, 2], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = conv2d(&mut tape, xv, w, None, 1, 1, 1).unwrap();
        let y = tape.value(y);
        for i in 0..5 {
            for j in 0..5 {
                let inside = (1..=3).contains(&i) && (1..=3).contains(&j);
                assert_eq!(y.at(&[0, 0, i, j]), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn two_stride2_convs_give_quarter_size() {
        // 432 x 240 frames reach a 108 x 60 feature map.
        let mut h = 240;
        let mut w = 432;
        for _ in 0..2 {
            h = output_extent(h, 3, 2, 1, 1).unwrap();
            w = output_extent(w, 3, 2, 1, 1).unwrap();
        }
        assert_eq!((w, h), (108, 60));

        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 240, 432]));
        let k = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let a = conv2d(&mut tape, x, k, None, 2, 1, 1).unwrap();
        let b = conv2d(&mut tape, a, k, None, 2, 1, 1).unwrap();
        assert_eq!(tape.shape(b), &[1, 1, 60, 108]);
    }

    #[test]
    fn conv3d_discriminator_geometry() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 5, 64, 64]));
        let w = tape.constant(Tensor::zeros([3, 2, 3, 5, 5]));
        let y = conv3d(&mut tape, x, w, None, [1, 2, 2], [1, 2, 2]).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 5, 32, 32]);
    }

    #[test]
    fn conv3d_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform([1, 2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(Tensor::eye(2).reshape([2, 2, 1, 1, 1]).unwrap());
        let y = conv3d(&mut tape, xv, w, None, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(
            conv2d(&mut tape, x, w, None, 1, 1, 1),
            Err(Error::Shape(_))
        ));
        let x = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros([1, 1, 5, 5]));
        assert!(conv2d(&mut tape, x, w, None, 1, 0, 1).is_err());
    }

    #[test]
    fn random_conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (b, c, o) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(1..4),
            );
            let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
            let k = [1, 3][rng.random_range(0..2)];
            let s = rng.random_range(1..3);
            let d = rng.random_range(1..3);
            let p = rng.random_range(0..3);
            if output_extent(h, k, s, p, d).is_err() || output_extent(w, k, s, p, d).is_err() {
                continue;
            }
            let x = Tensor::<f64>::uniform([b, c, h, w], -1.0, 1.0, &mut rng);
            let wt = Tensor::<f64>::uniform([o, c, k, k], -1.0, 1.0, &mut rng);
            let bias = Tensor::<f64>::uniform([o], -1.0, 1.0, &mut rng);
            let expect = oracle::conv2d(&x, &wt, Some(&bias), s, p, d);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x), tape.constant(wt), tape.constant(bias));
            let y = conv2d(&mut tape, xv, wv, Some(bv), s, p, d).unwrap();
            assert_eq!(tape.shape(y), expect.shape());
            for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-6);
            }
        }
    }
}
