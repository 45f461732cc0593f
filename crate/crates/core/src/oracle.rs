//! Slow, loop-only reference implementations.
//!
//! Nothing here shares code with the fast paths it is compared against: no
//! GEMM, no im2col, no tape. Used by the test suites and by `sttn selftest`.

#![allow(clippy::needless_range_loop)]

use crate::tensor::Tensor;

pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    assert_eq!(k, b.shape()[0]);
    let mut c = Tensor::zeros([m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            c.set(&[i, j], s);
        }
    }
    c
}

pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor<f64> {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let ho = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let wo = (wd + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let mut y = Tensor::zeros([b, o, ho, wo]);
    for bi in 0..b {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = bias.map_or(0.0, |bb| bb.data()[oc]);
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let yy = (i * stride + u * dilation) as isize - padding as isize;
                                let xx = (j * stride + v * dilation) as isize - padding as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                s += w.at(&[oc, ic, u, v])
                                    * x.at(&[bi, ic, yy as usize, xx as usize]);
                            }
                        }
                    }
                    y.set(&[bi, oc, i, j], s);
                }
            }
        }
    }
    y
}

pub fn conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (b, c) = (xs[0], xs[1]);
    let o = ws[0];
    let k = [ws[2], ws[3], ws[4]];
    let n = [xs[2], xs[3], xs[4]];
    let out: Vec<usize> = (0..3)
        .map(|d| (n[d] + 2 * padding[d] - k[d]) / stride[d] + 1)
        .collect();
    let mut y = Tensor::zeros([b, o, out[0], out[1], out[2]]);
    for bi in 0..b {
        for oc in 0..o {
            for t in 0..out[0] {
                for i in 0..out[1] {
                    for j in 0..out[2] {
                        let mut s = bias.map_or(0.0, |bb| bb.data()[oc]);
                        for ic in 0..c {
                            for a in 0..k[0] {
                                for u in 0..k[1] {
                                    for v in 0..k[2] {
                                        let p = [
                                            (t * stride[0] + a) as isize - padding[0] as isize,
                                            (i * stride[1] + u) as isize - padding[1] as isize,
                                            (j * stride[2] + v) as isize - padding[2] as isize,
                                        ];
                                        if (0..3).any(|d| p[d] < 0 || p[d] >= n[d] as isize) {
                                            continue;
                                        }
                                        s += w.at(&[oc, ic, a, u, v])
                                            * x.at(&[
                                                bi,
                                                ic,
                                                p[0] as usize,
                                                p[1] as usize,
                                                p[2] as usize,
                                            ]);
                                    }
                                }
                            }
                        }
                        y.set(&[bi, oc, t, i, j], s);
                    }
                }
            }
        }
    }
    y
}

/// Row-wise masked softmax: exponentiates only visible columns, leaves the
/// rest at exactly zero.
pub fn masked_softmax_rows(s: &Tensor<f64>, visible: &[bool]) -> Tensor<f64> {
    let (n, m) = (s.shape()[0], s.shape()[1]);
    let mut a = Tensor::zeros([n, m]);
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            if visible[j] {
                max = max.max(s.at(&[i, j]));
            }
        }
        let mut total = 0.0;
        for j in 0..m {
            if visible[j] {
                total += (s.at(&[i, j]) - max).exp();
            }
        }
        for j in 0..m {
            if visible[j] {
                a.set(&[i, j], (s.at(&[i, j]) - max).exp() / total);
            }
        }
    }
    a
}

/// `o_i = sum_j a[i, j] * v_j`, one row at a time.
pub fn weighted_sum_rows(a: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (n, m) = (a.shape()[0], a.shape()[1]);
    let l = v.shape()[1];
    let mut o = Tensor::zeros([n, l]);
    for i in 0..n {
        for j in 0..m {
            let w = a.at(&[i, j]);
            if w == 0.0 {
                continue;
            }
            for c in 0..l {
                let cur = o.at(&[i, c]);
                o.set(&[i, c], cur + w * v.at(&[j, c]));
            }
        }
    }
    o
}

pub fn leaky_relu(x: &Tensor<f64>, slope: f64) -> Tensor<f64> {
    x.map(|v| if v > 0.0 { v } else { v * slope })
}

/// Weights of one transformer layer as `(weight, bias)` pairs: query, key,
/// value, fusion, then the two residual convolutions.
pub struct LayerWeights<'a> {
    pub convs: [(&'a Tensor<f64>, &'a Tensor<f64>); 6],
}

/// One transformer layer written out pixel by pixel. `heads` are
/// `(rows, cols)` patch sizes; `visible[h][n]` flags key patch `n` of head `h`.
pub fn transformer_layer(
    x: &Tensor<f64>,
    heads: &[(usize, usize)],
    visible: &[Vec<bool>],
    weights: &LayerWeights<'_>,
) -> Tensor<f64> {
    let [t, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let conv1x1 = |i: usize| conv2d(x, weights.convs[i].0, Some(weights.convs[i].1), 1, 0, 1);
    let (q, k, v) = (conv1x1(0), conv1x1(1), conv1x1(2));
    let ch = c / heads.len();
    let mut joined = Tensor::zeros([t, c, h, w]);
    for (hi, &(pr, pc)) in heads.iter().enumerate() {
        let (gr, gc) = (h / pr, w / pc);
        let n = t * gr * gc;
        let len = ch * pr * pc;
        // Patch n covers frame n / (gr*gc), block row (n / gc) % gr, block col n % gc.
        let pixel = |n: usize, e: usize| {
            let (ft, r, cc) = (n / (gr * gc), (n / gc) % gr, n % gc);
            let (cch, dy, dx) = (e / (pr * pc), (e / pc) % pr, e % pc);
            [ft, hi * ch + cch, r * pr + dy, cc * pc + dx]
        };
        let mut s = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for e in 0..len {
                    dot += q.at(&pixel(i, e)) * k.at(&pixel(j, e));
                }
                s.set(&[i, j], dot / (len as f64).sqrt());
            }
        }
        let a = masked_softmax_rows(&s, &visible[hi]);
        for i in 0..n {
            for e in 0..len {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += a.at(&[i, j]) * v.at(&pixel(j, e));
                }
                joined.set(&pixel(i, e), acc);
            }
        }
    }
    let conv = |x: &Tensor<f64>, i: usize, pad: usize| {
        conv2d(x, weights.convs[i].0, Some(weights.convs[i].1), 1, pad, 1)
    };
    let fused = conv(&joined, 3, 0);
    let inner = leaky_relu(&conv(&fused, 4, 1), 0.2);
    let refined = conv(&inner, 5, 1);
    fused.zip_map(&refined, |a, b| a + b).expect("same shape")
}

/// 4-connected flood from every border pixel that is neither outline nor
/// fill, never entering outline pixels. True if it reaches a fill pixel.
pub fn flood_leaks(width: usize, height: usize, outline: &[u8], fill: &[u8]) -> bool {
    let mut seen = vec![false; width * height];
    let mut stack = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let border = x == 0 || y == 0 || x + 1 == width || y + 1 == height;
            let i = y * width + x;
            if border && outline[i] == 0 && fill[i] == 0 {
                seen[i] = true;
                stack.push(i);
            }
        }
    }
    while let Some(i) = stack.pop() {
        if fill[i] == 1 {
            return true;
        }
        let (x, y) = (i % width, i / width);
        let mut next = Vec::with_capacity(4);
        if x > 0 {
            next.push(i - 1);
        }
        if x + 1 < width {
            next.push(i + 1);
        }
        if y > 0 {
            next.push(i - width);
        }
        if y + 1 < height {
            next.push(i + width);
        }
        for j in next {
            if !seen[j] && outline[j] == 0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    false
}
