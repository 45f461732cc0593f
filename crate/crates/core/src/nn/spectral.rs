//! Spectral normalization by power iteration.
//!
//! The weight is viewed as an `out_ch x rest` matrix `W`. Power iteration
//! keeps a persistent left vector `u`; the normalized weight is `W / sigma`
//! with `sigma = u^T W v`. During backprop `u` and `v` are held fixed and
//! `sigma` is differentiated through `W`.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Below this estimate the weight is passed through unscaled.
pub const SIGMA_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralNormState {
    /// Unit left-singular-vector estimate, length `out_ch`.
    pub u: Vec<f64>,
    /// Right vector from the last iteration, length `rest`.
    pub v: Vec<f64>,
    pub iterations: u64,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > SIGMA_EPS {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

impl SpectralNormState {
    pub fn new(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        if normalize(&mut u) <= SIGMA_EPS {
            u = vec![0.0; rows];
            u[0] = 1.0;
        }
        Self {
            u,
            v: vec![0.0; cols],
            iterations: 0,
        }
    }

    /// One power-iteration step on `w` (`rows x cols`, row-major). Returns the
    /// updated estimate of the largest singular value.
    pub fn step<T: Scalar>(&mut self, w: &[T], rows: usize, cols: usize) -> f64 {
        debug_assert_eq!(w.len(), rows * cols);
        let mut v = vec![0.0; cols];
        for (r, &ur) in self.u.iter().enumerate() {
            for (c, vc) in v.iter_mut().enumerate() {
                *vc += w[r * cols + c].as_f64() * ur;
            }
        }
        if normalize(&mut v) <= SIGMA_EPS {
            // Zero matrix: keep the old vectors.
            return 0.0;
        }
        let mut u = vec![0.0; rows];
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = (0..cols).map(|c| w[r * cols + c].as_f64() * v[c]).sum();
        }
        if normalize(&mut u) <= SIGMA_EPS {
            return 0.0;
        }
        self.u = u;
        self.v = v;
        self.iterations += 1;
        self.sigma(w, cols)
    }

    /// `u^T W v` for the current vectors.
    pub fn sigma<T: Scalar>(&self, w: &[T], cols: usize) -> f64 {
        self.u
            .iter()
            .enumerate()
            .map(|(r, &ur)| {
                ur * (0..cols)
                    .map(|c| w[r * cols + c].as_f64() * self.v[c])
                    .sum::<f64>()
            })
            .sum()
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    (rows, shape[1..].iter().product())
}

/// Runs `iterations` power steps and returns `W / sigma` (plain tensors).
pub fn spectral_normalize<T: Scalar>(
    weight: &Tensor<T>,
    state: &mut SpectralNormState,
    iterations: usize,
) -> Tensor<T> {
    let (rows, cols) = matrix_dims(weight.shape());
    let mut sigma = 0.0;
    for _ in 0..iterations.max(1) {
        sigma = state.step(weight.data(), rows, cols);
    }
    if sigma.abs() < SIGMA_EPS {
        return weight.clone();
    }
    let s = T::from_f64(sigma);
    weight.map(|x| x / s)
}

/// Differentiable `W / (u^T W v)` with the state's vectors held fixed. Set
/// `update` to advance the power iteration first (one step per forward).
pub fn spectral_normalize_op<T: Scalar>(
    tape: &mut Tape<T>,
    weight: Var,
    state: &mut SpectralNormState,
    update: bool,
) -> Result<Var> {
    let shape = tape.shape(weight).to_vec();
    let (rows, cols) = matrix_dims(&shape);
    if update {
        state.step(tape.value(weight).data(), rows, cols);
    }
    let sigma = state.sigma(tape.value(weight).data(), cols);
    if sigma.abs() < SIGMA_EPS {
        return tape.reshape(weight, &shape);
    }
    let s = T::from_f64(sigma);
    let out = tape.value(weight).map(|x| x / s);
    let u: Vec<T> = state.u.iter().map(|&x| T::from_f64(x)).collect();
    let v: Vec<T> = state.v.iter().map(|&x| T::from_f64(x)).collect();
    Ok(tape.push_op(
        "spectral_normalize",
        out,
        &[weight],
        Box::new(move |ctx| {
            let w = ctx.inputs[0].data();
            let g = ctx.grad.data();
            let inner: T = g.iter().zip(w).map(|(&a, &b)| a * b).sum();
            let coef = inner / (s * s);
            let mut dw = Vec::with_capacity(w.len());
            for r in 0..rows {
                for c in 0..cols {
                    dw.push(g[r * cols + c] / s - coef * u[r] * v[c]);
                }
            }
            vec![Some(
                Tensor::new(ctx.inputs[0].shape().to_vec(), dw).expect("shape"),
            )]
        }),
    ))
}

/// Largest singular value by many power-iteration steps from a fresh state.
pub fn estimate_sigma_max<T: Scalar>(
    weight: &Tensor<T>,
    iterations: usize,
    rng: &mut impl Rng,
) -> f64 {
    let (rows, cols) = matrix_dims(weight.shape());
    let mut st = SpectralNormState::new(rows, cols, rng);
    let mut sigma = 0.0;
    for _ in 0..iterations {
        sigma = st.step(weight.data(), rows, cols);
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_weight_normalizes_to_unit_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::<f64>::from_f64([2, 2], &[3., 0., 0., 1.]).unwrap();
        let mut st = SpectralNormState::new(2, 2, &mut rng);
        let wn = spectral_normalize(&w, &mut st, 20);
        let sigma = estimate_sigma_max(&wn, 100, &mut rng);
        assert!((sigma - 1.0).abs() < 1e-3, "sigma {sigma}");
        assert!((wn.at(&[0, 0]) - 1.0).abs() < 1e-3);
        assert!((wn.at(&[1, 1]) - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn orthogonal_weight_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, s) = (0.6f64, 0.8f64);
        let w = Tensor::<f64>::from_f64([2, 2], &[c, -s, s, c]).unwrap();
        let mut st = SpectralNormState::new(2, 2, &mut rng);
        let wn = spectral_normalize(&w, &mut st, 20);
        for (a, b) in wn.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_weight_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::<f64>::zeros([3, 4]);
        let mut st = SpectralNormState::new(3, 4, &mut rng);
        let u0 = st.u.clone();
        let wn = spectral_normalize(&w, &mut st, 5);
        assert_eq!(wn, w);
        assert_eq!(st.u, u0);
    }

    #[test]
    fn u_stays_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f64>::uniform([4, 6], -1.0, 1.0, &mut rng);
        let mut st = SpectralNormState::new(4, 6, &mut rng);
        for _ in 0..5 {
            st.step(w.data(), 4, 6);
            let n: f64 = st.u.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_weight_sigma_bounded_after_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::<f64>::uniform([5, 7], -2.0, 2.0, &mut rng);
        let mut st = SpectralNormState::new(5, 7, &mut rng);
        let wn = spectral_normalize(&w, &mut st, 30);
        let sigma = estimate_sigma_max(&wn, 200, &mut rng);
        assert!(sigma <= 1.0 + 1e-2, "sigma {sigma}");
    }
}
