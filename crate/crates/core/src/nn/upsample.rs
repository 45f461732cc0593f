//! Bilinear upsampling with `align_corners = false`: output pixel centres map
//! to `(i + 0.5) / factor - 0.5` in source coordinates, clamped at the
//! borders. Constants stay constant.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn taps(n_in: usize, factor: usize) -> Vec<Tap> {
    (0..n_in * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

/// Upsamples `B x C x H x W` by an integer factor.
pub fn bilinear_upsample<T: Scalar>(tape: &mut Tape<T>, x: Var, factor: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "upsample expects B x C x H x W, got {shape:?}"
        )));
    }
    if factor == 0 {
        return Err(Error::InvalidInput("upsample factor must be >= 1".into()));
    }
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let ty = taps(h, factor);
    let tx = taps(w, factor);

    let src = tape.value(x).data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for ry in &ty {
            let wy = T::from_f64(ry.w_hi);
            for rx in &tx {
                let wx = T::from_f64(rx.w_hi);
                let top =
                    plane[ry.lo * w + rx.lo] * (T::one() - wx) + plane[ry.lo * w + rx.hi] * wx;
                let bot =
                    plane[ry.hi * w + rx.lo] * (T::one() - wx) + plane[ry.hi * w + rx.hi] * wx;
                out.push(top * (T::one() - wy) + bot * wy);
            }
        }
    }
    let out = Tensor::new(vec![shape[0], shape[1], ho, wo], out)?;
    Ok(tape.push_op(
        "bilinear_upsample",
        out,
        &[x],
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut dx = Tensor::zeros(shape.clone());
            let d = dx.data_mut();
            for p in 0..planes {
                let plane = &mut d[p * h * w..(p + 1) * h * w];
                let gp = &g[p * ho * wo..(p + 1) * ho * wo];
                for (oy, ry) in ty.iter().enumerate() {
                    let wy = T::from_f64(ry.w_hi);
                    for (ox, rx) in tx.iter().enumerate() {
                        let wx = T::from_f64(rx.w_hi);
                        let gv = gp[oy * wo + ox];
                        let top = gv * (T::one() - wy);
                        let bot = gv * wy;
                        plane[ry.lo * w + rx.lo] += top * (T::one() - wx);
                        plane[ry.lo * w + rx.hi] += top * wx;
                        plane[ry.hi * w + rx.lo] += bot * (T::one() - wx);
                        plane[ry.hi * w + rx.hi] += bot * wx;
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}
