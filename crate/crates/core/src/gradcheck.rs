//! Central finite-difference gradient checking at 64-bit precision.

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Errors of an input are normalized by at least this fraction of the
/// largest gradient scale among all inputs. An input whose true gradient is
/// identically zero (a key bias under softmax) would otherwise divide
/// rounding noise by rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-3;
/// Absolute lower bound on the normalizer.
pub const SCALE_FLOOR: f64 = 1e-12;

/// Times the step is divided by 10 when the one-sided differences disagree,
/// which happens when `x +- h` straddles a kink (ReLU-like activations).
pub const KINK_REFINEMENTS: usize = 2;
const KINK_REL_GAP: f64 = 1e-3;
/// Multiple of the rounding noise in a one-sided difference that a gap must
/// exceed before it counts.
const KINK_NOISE: f64 = 1e3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates probed per input; `None` probes every element.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords: None,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per input: `max |analytic - numeric|` over the probed coordinates,
    /// divided by `max(max |analytic|, max |numeric|)`, floored at
    /// [`RELATIVE_FLOOR`] times the largest such scale of any input.
    pub rel_errors: Vec<f64>,
    pub coords_checked: usize,
    /// Coordinates whose step was refined around a kink.
    pub refined: usize,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], projection: &Option<Tensor<f64>>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    Ok(match projection {
        Some(p) => value.data().iter().zip(p.data()).map(|(a, b)| a * b).sum(),
        None => value.item(),
    })
}

/// Central difference at coordinate `c` of input `i`. Shrinks the step when
/// the forward and backward differences disagree beyond smooth curvature.
fn derivative<F>(
    f: &F,
    probe: &mut [Tensor<f64>],
    (i, c): (usize, usize),
    step: f64,
    center: f64,
    projection: &Option<Tensor<f64>>,
) -> Result<(f64, bool)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let orig = probe[i].data()[c];
    let mut h = step;
    for round in 0..=KINK_REFINEMENTS {
        probe[i].data_mut()[c] = orig + h;
        let plus = evaluate(f, probe, projection)?;
        probe[i].data_mut()[c] = orig - h;
        let minus = evaluate(f, probe, projection)?;
        probe[i].data_mut()[c] = orig;
        let (fwd, bwd) = ((plus - center) / h, (center - minus) / h);
        let noise = f64::EPSILON * center.abs().max(plus.abs()).max(minus.abs()) / h;
        let smooth =
            (fwd - bwd).abs() <= KINK_REL_GAP * fwd.abs().max(bwd.abs()) + KINK_NOISE * noise;
        if smooth || round == KINK_REFINEMENTS {
            return Ok(((plus - minus) / (2.0 * h), round > 0));
        }
        h /= 10.0;
    }
    unreachable!()
}

/// Compares tape gradients of `f` against central differences.
///
/// Non-scalar outputs are reduced by a fixed random projection
/// `sum(out * r)` so every output element contributes.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    f: F,
    cfg: GradCheck,
    rng: &mut impl Rng,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let projection = (tape.value(out).numel() != 1)
        .then(|| Tensor::<f64>::uniform(tape.shape(out).to_vec(), -1.0, 1.0, rng));
    let loss = match &projection {
        Some(p) => {
            let pv = tape.constant(p.clone());
            let prod = tape.mul(out, pv)?;
            tape.sum(prod)
        }
        None => out,
    };
    tape.backward(loss)?;

    let mut diffs = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    let mut refined = 0;
    let mut probe = inputs.to_vec();
    let center = evaluate(&f, &probe, &projection)?;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).expect("leaf gradient");
        let n = inputs[i].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for &c in &coords {
            let (numeric, kink) =
                derivative(&f, &mut probe, (i, c), cfg.step, center, &projection)?;
            refined += kink as usize;
            let a = analytic.data()[c];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        coords_checked += coords.len();
        diffs.push((max_diff, scale));
    }
    let global = diffs.iter().map(|d| d.1).fold(0.0, f64::max);
    let floor = (RELATIVE_FLOOR * global).max(SCALE_FLOOR);
    let rel_errors = diffs.iter().map(|&(d, s)| d / s.max(floor)).collect();
    Ok(GradReport {
        rel_errors,
        coords_checked,
        refined,
    })
}
