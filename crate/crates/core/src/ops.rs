//! Differentiable tensor ops recorded on a [`Tape`].

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output shape of a broadcast binary op. Ranks must match and every extent
/// pair must be equal or contain a 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every element of `out_shape`, the flat offset into a tensor of
/// `in_shape` that broadcasts to it.
fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let in_strides = contiguous_strides(in_shape);
    let eff: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&n, &s)| if n == 1 { 0 } else { s })
        .collect();
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape.to_vec());
    let offsets = broadcast_offsets(shape, grad.shape());
    let dst = out.data_mut();
    for (&o, &g) in offsets.iter().zip(grad.data()) {
        dst[o] += g;
    }
    out
}

fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let oa = broadcast_offsets(a.shape(), &shape);
    let ob = broadcast_offsets(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(shape, data)
}

/// Permutes axes: output axis `i` is input axis `axes[i]`.
pub fn permute_tensor<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank
        || axes
            .iter()
            .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::shape(format!(
            "invalid permutation {axes:?} for rank {rank}"
        )));
    }
    let in_strides = contiguous_strides(t.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut data = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..t.numel() {
        data.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Numerically stable softmax along `axis`.
pub fn softmax_tensor<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for {shape:?}"
        )));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n)
                .map(|j| d[base + j * inner])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (d[base + j * inner] - max).exp();
                d[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                d[base + j * inner] = d[base + j * inner] / total;
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> Tape<T> {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), f)?;
        Ok(self.push_op(
            name,
            out,
            &[a, b],
            Box::new(move |ctx| {
                let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                let shape = ctx.grad.shape();
                let xs = broadcast_offsets(x.shape(), shape);
                let ys = broadcast_offsets(y.shape(), shape);
                let (xd, yd) = (x.data(), y.data());
                let mut gx = ctx.needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
                let mut gy = ctx.needs[1].then(|| Tensor::zeros(y.shape().to_vec()));
                for ((&i, &j), &g) in xs.iter().zip(&ys).zip(ctx.grad.data()) {
                    let (u, v) = (xd[i], yd[j]);
                    if let Some(gx) = gx.as_mut() {
                        gx.data_mut()[i] += g * da(u, v);
                    }
                    if let Some(gy) = gy.as_mut() {
                        gy.data_mut()[j] += g * db(u, v);
                    }
                }
                vec![gx, gy]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
            return Ok(self.push_op(
                "add",
                out,
                &[a, b],
                Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
            ));
        }
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push_op(
            "add",
            out,
            &[a, b],
            Box::new(|ctx| {
                vec![
                    ctx.needs[0].then(|| reduce_to(ctx.grad, ctx.inputs[0].shape())),
                    ctx.needs[1].then(|| reduce_to(ctx.grad, ctx.inputs[1].shape())),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        // derivative from (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        self.push_op(
            name,
            out,
            &[a],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let data = (0..g.len()).map(|i| g[i] * df(x[i], y[i])).collect();
                vec![Some(
                    Tensor::new(ctx.grad.shape().to_vec(), data).expect("same shape"),
                )]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary("scale", a, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary("add_scalar", a, move |x| x + c, |_, _| T::one())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.unary(
            "leaky_relu",
            a,
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary("tanh", a, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary("square", a, |x| x * x, |x, _| x + x)
    }

    fn reduce_all(
        &mut self,
        name: &'static str,
        a: Var,
        value: T,
        df: impl Fn(T) -> T + 'static,
    ) -> Var {
        self.push_op(
            name,
            Tensor::scalar(value),
            &[a],
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                vec![Some(ctx.inputs[0].map(|x| g * df(x)))]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.reduce_all("sum", a, v, |_| T::one())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = T::from_f64(t.numel().max(1) as f64);
        let v = t.sum() / n;
        self.reduce_all("mean", a, v, move |_| T::one() / n)
    }

    /// Sum of absolute values (the L1 norm).
    pub fn abs_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().map(|x| x.abs()).sum();
        self.reduce_all("abs_sum", a, v, |x| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Divides by a scalar var.
    pub fn div_scalar(&mut self, a: Var, denom: Var) -> Result<Var> {
        if self.value(denom).numel() != 1 {
            return Err(Error::shape("denominator must be a scalar"));
        }
        let d = self.value(denom).item();
        let out = self.value(a).map(|x| x / d);
        Ok(self.push_op(
            "div_scalar",
            out,
            &[a, denom],
            Box::new(|ctx| {
                let d = ctx.inputs[1].item();
                let ga = ctx.needs[0].then(|| ctx.grad.map(|g| g / d));
                let gd = ctx.needs[1].then(|| {
                    let s: T = ctx
                        .grad
                        .data()
                        .iter()
                        .zip(ctx.inputs[0].data())
                        .map(|(&g, &x)| g * x)
                        .sum();
                    Tensor::scalar(-s / (d * d))
                });
                vec![ga, gd]
            }),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros([m, n]);
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            out.data_mut(),
        );
        Ok(self.push_op(
            "matmul",
            out,
            &[a, b],
            Box::new(move |ctx| {
                let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
                let ga = ctx.needs[0].then(|| {
                    let mut ga = Tensor::zeros([m, k]);
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        y.data(),
                        true,
                        T::zero(),
                        ga.data_mut(),
                    );
                    ga
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = Tensor::zeros([k, n]);
                    T::gemm(
                        k,
                        m,
                        n,
                        x.data(),
                        true,
                        g.data(),
                        false,
                        T::zero(),
                        gb.data_mut(),
                    );
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_tensor(self.value(a), axis)?;
        Ok(self.push_op(
            "softmax",
            out,
            &[a],
            Box::new(move |ctx| {
                let y = ctx.output;
                let shape = y.shape();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let (yd, gd) = (y.data(), ctx.grad.data());
                let mut gx = Tensor::zeros(shape.to_vec());
                let dx = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: T = (0..n)
                            .map(|j| yd[base + j * inner] * gd[base + j * inner])
                            .sum();
                        for j in 0..n {
                            let p = base + j * inner;
                            dx[p] = yd[p] * (gd[p] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push_op(
            "reshape",
            out,
            &[a],
            Box::new(|ctx| {
                vec![Some(
                    ctx.grad
                        .clone()
                        .reshape(ctx.inputs[0].shape().to_vec())
                        .expect("same numel"),
                )]
            }),
        ))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = permute_tensor(self.value(a), axes)?;
        let inv = inverse_permutation(axes);
        Ok(self.push_op(
            "permute",
            out,
            &[a],
            Box::new(move |ctx| vec![Some(permute_tensor(ctx.grad, &inv).expect("valid"))]),
        ))
    }

    /// Concatenates along `axis`; all other extents must match.
    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *vars
                    .first()
                    .ok_or_else(|| Error::shape("concat of nothing"))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat axis out of range"));
        }
        let mut widths = Vec::with_capacity(vars.len());
        for &v in vars {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::shape(format!("concat {first:?} with {s:?}")));
            }
            widths.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in vars.iter().zip(&widths) {
                let chunk = w * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(
            "concat",
            out,
            vars,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<T>> = widths
                    .iter()
                    .map(|&w| Vec::with_capacity(outer * w * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (buf, &w) in grads.iter_mut().zip(&widths) {
                        buf.extend_from_slice(&g[pos..pos + w * inner]);
                        pos += w * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&ctx.inputs)
                    .zip(&ctx.needs)
                    .map(|((buf, x), &need)| {
                        need.then(|| Tensor::new(x.shape().to_vec(), buf).expect("shape"))
                    })
                    .collect()
            }),
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} of axis {axis} in {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            "slice",
            out,
            &[a],
            Box::new(move |ctx| {
                let mut gx = Tensor::zeros(shape.clone());
                let dst = gx.data_mut();
                let g = ctx.grad.data();
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst[base..base + len * inner].copy_from_slice(src);
                }
                vec![Some(gx)]
            }),
        ))
    }
}
