//! Reconstruction and adversarial objectives.

use std::fs::{File, OpenOptions};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub hole: f64,
    pub valid: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            hole: 1.0,
            valid: 1.0,
            adv: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.hole, self.valid, self.adv]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Config(format!(
                "loss weights must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean absolute error over the color values selected by `region`
/// (`T x 1 x H x W`, broadcast across channels).
fn region_l1<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    output: Var,
    region: &Tensor<T>,
    what: &str,
) -> Result<Var> {
    let shape = tape.shape(output).to_vec();
    if tape.shape(target) != shape.as_slice() {
        return Err(Error::shape(format!(
            "target {:?} vs output {shape:?}",
            tape.shape(target)
        )));
    }
    if shape.len() != 4 || region.shape() != [shape[0], 1, shape[2], shape[3]] {
        return Err(Error::shape(format!(
            "mask {:?} does not match frames {shape:?}",
            region.shape()
        )));
    }
    let count = region.sum().as_f64() * shape[1] as f64;
    if count <= 0.0 {
        return Err(Error::Degenerate(format!("{what} region is empty")));
    }
    let m = tape.constant(region.clone());
    let diff = tape.sub(target, output)?;
    let masked = tape.mul(diff, m)?;
    let total = tape.abs_sum(masked);
    Ok(tape.scale(total, 1.0 / count))
}

fn check_binary<T: Scalar>(mask: &Tensor<T>) -> Result<()> {
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidInput("mask must be binary".into()));
    }
    Ok(())
}

/// `|M * (Y - Y_hat)|_1 / |M|_1` with `M` counted once per color channel.
pub fn l1_hole<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    output: Var,
    masks: &Tensor<T>,
) -> Result<Var> {
    check_binary(masks)?;
    region_l1(tape, target, output, masks, "hole")
}

/// Mirror of [`l1_hole`] over the known pixels `1 - M`.
pub fn l1_valid<T: Scalar>(
    tape: &mut Tape<T>,
    target: Var,
    output: Var,
    masks: &Tensor<T>,
) -> Result<Var> {
    check_binary(masks)?;
    let valid = masks.map(|v| T::one() - v);
    region_l1(tape, target, output, &valid, "valid")
}

/// Hinge loss for the discriminator:
/// `mean(relu(1 - D(real))) + mean(relu(1 + D(fake)))`.
pub fn d_loss<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    if tape.shape(real) != tape.shape(fake) {
        return Err(Error::shape(format!(
            "real scores {:?} vs fake scores {:?}",
            tape.shape(real),
            tape.shape(fake)
        )));
    }
    let r = tape.neg(real);
    let r = tape.add_scalar(r, 1.0);
    let r = tape.relu(r);
    let r = tape.mean(r);
    let f = tape.add_scalar(fake, 1.0);
    let f = tape.relu(f);
    let f = tape.mean(f);
    tape.add(r, f)
}

/// `-mean(D(fake))`.
pub fn g_adv_loss<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Var {
    let m = tape.mean(fake);
    tape.neg(m)
}

pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    hole: Var,
    valid: Var,
    adv: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let h = tape.scale(hole, weights.hole);
    let v = tape.scale(valid, weights.valid);
    let a = tape.scale(adv, weights.adv);
    let hv = tape.add(h, v)?;
    tape.add(hv, a)
}

/// One row of the training loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_hole: f64,
    pub l_valid: f64,
    pub l_adv: f64,
    pub l_d: f64,
}

/// Appends [`LossRecord`]s to a CSV file, writing the header only when the
/// file starts empty.
pub struct LossLog {
    writer: csv::Writer<File>,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let writer = csv::WriterBuilder::new()
            .has_headers(empty)
            .from_writer(file);
        Ok(Self { writer })
    }

    pub fn append(&mut self, record: &LossRecord) -> Result<()> {
        self.writer.serialize(record)?;
        self.writer.flush().map_err(|e| Error::io("loss log", e))?;
        Ok(())
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape)?;
        Ok(tape.value(v).item())
    }

    fn hole_mask(pixels: usize) -> Tensor<f64> {
        let mut m = Tensor::zeros([1, 1, 4, 8]);
        for i in 0..pixels {
            m.data_mut()[i] = 1.0;
        }
        m
    }

    fn l1(
        f: fn(&mut Tape<f64>, Var, Var, &Tensor<f64>) -> Result<Var>,
        y: &Tensor<f64>,
        yh: &Tensor<f64>,
        m: &Tensor<f64>,
    ) -> Result<f64> {
        eval(|t| {
            let (a, b) = (t.constant(y.clone()), t.constant(yh.clone()));
            f(t, a, b, m)
        })
    }

    #[test]
    fn hole_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::<f64>::uniform([1, 3, 4, 8], -1.0, 1.0, &mut rng);
        let m = hole_mask(10);
        assert_eq!(l1(l1_hole, &y, &y, &m).unwrap(), 0.0);
        let yh = y.map(|v| v - 2.0);
        assert!((l1(l1_hole, &y, &yh, &m).unwrap() - 2.0).abs() < 1e-12);
        let m2 = hole_mask(20);
        assert!((l1(l1_hole, &y, &yh, &m2).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            l1(l1_hole, &y, &yh, &hole_mask(0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn valid_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::<f64>::uniform([1, 3, 4, 8], -1.0, 1.0, &mut rng);
        let m = hole_mask(22);
        assert_eq!(l1(l1_valid, &y, &y, &m).unwrap(), 0.0);
        let yh = y.map(|v| v + 2.0);
        assert!((l1(l1_valid, &y, &yh, &m).unwrap() - 2.0).abs() < 1e-12);
        assert!((l1(l1_valid, &y, &yh, &hole_mask(12)).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            l1(l1_valid, &y, &yh, &hole_mask(32)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn only_the_selected_region_counts() {
        let y = Tensor::<f64>::zeros([1, 3, 4, 8]);
        let m = hole_mask(10);
        // Error only outside the hole.
        let mut yh = y.clone();
        for c in 0..3 {
            yh.set(&[0, c, 3, 7], 5.0);
        }
        assert_eq!(l1(l1_hole, &y, &yh, &m).unwrap(), 0.0);
        assert!((l1(l1_valid, &y, &yh, &m).unwrap() - 15.0 / 66.0).abs() < 1e-12);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let y = Tensor::<f64>::zeros([1, 3, 4, 8]);
        let m = Tensor::full([1, 1, 4, 8], 0.5);
        assert!(matches!(
            l1(l1_hole, &y, &y, &m),
            Err(Error::InvalidInput(_))
        ));
    }

    fn hinge(real: f64, fake: f64) -> f64 {
        eval(|t| {
            let r = t.constant(Tensor::full([1, 2, 3, 1, 1], real));
            let f = t.constant(Tensor::full([1, 2, 3, 1, 1], fake));
            d_loss(t, r, f)
        })
        .unwrap()
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(1.5, -1.0), 0.0);
        assert_eq!(hinge(0.0, 0.0), 2.0);
        let mut tape = Tape::<f64>::new();
        let r = tape.leaf(Tensor::from_f64([3], &[2.0, 0.5, 3.0]).unwrap());
        let f = tape.leaf(Tensor::from_f64([3], &[-2.0, -1.5, 0.0]).unwrap());
        let l = d_loss(&mut tape, r, f).unwrap();
        tape.backward(l).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(tape.grad(r).unwrap().data(), &[0.0, -third, 0.0]);
        assert_eq!(tape.grad(f).unwrap().data(), &[0.0, 0.0, third]);
    }

    #[test]
    fn generator_adversarial_examples() {
        let g = |s: f64| {
            eval(|t| {
                let d = t.constant(Tensor::full([2, 3], s));
                Ok(g_adv_loss(t, d))
            })
            .unwrap()
        };
        assert_eq!(g(0.0), 0.0);
        assert_eq!(g(3.0), -3.0);
        assert!((g(1.5) + g(0.5) - g(2.0)).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let total = |p: [f64; 3], w: LossWeights| {
            eval(|t| {
                let [a, b, c] = p.map(|x| t.constant(Tensor::scalar(x)));
                total_loss(t, a, b, c, &w)
            })
            .unwrap()
        };
        assert!((total([1.0, 1.0, 1.0], LossWeights::default()) - 2.01).abs() < 1e-15);
        assert_eq!(total([0.0; 3], LossWeights::default()), 0.0);
        let adv_only = LossWeights {
            hole: 0.0,
            valid: 0.0,
            adv: 1.0,
        };
        assert_eq!(total([3.0, 4.0, -2.0], adv_only), -2.0);
        assert!(LossWeights {
            hole: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn loss_log_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rec = |s| LossRecord {
            step: s,
            l_hole: 0.5,
            l_valid: 0.25,
            l_adv: -0.1,
            l_d: 2.0,
        };
        LossLog::open(&path).unwrap().append(&rec(1)).unwrap();
        LossLog::open(&path).unwrap().append(&rec(2)).unwrap();
        let back = read_loss_log(&path).unwrap();
        assert_eq!(back, vec![rec(1), rec(2)]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,l_hole,l_valid,l_adv,l_d\n"));
    }

    proptest::proptest! {
        #[test]
        fn l1_terms_symmetric_and_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
            let mut m = Tensor::<f64>::from_fn([2, 1, 4, 4], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
            m.data_mut()[0] = 1.0;
            m.data_mut()[1] = 0.0;
            for f in [l1_hole::<f64> as fn(&mut Tape<f64>, Var, Var, &Tensor<f64>) -> Result<Var>, l1_valid] {
                let ab = l1(f, &a, &b, &m).unwrap();
                let ba = l1(f, &b, &a, &m).unwrap();
                proptest::prop_assert!(ab >= 0.0);
                proptest::prop_assert!((ab - ba).abs() < 1e-12);
                proptest::prop_assert_eq!(l1(f, &a, &a, &m).unwrap(), 0.0);
            }
        }

        #[test]
        fn hinge_nonnegative(real in -3.0f64..3.0, fake in -3.0f64..3.0) {
            let v = hinge(real, fake);
            proptest::prop_assert!(v >= 0.0);
            proptest::prop_assert_eq!(v == 0.0, real >= 1.0 && fake <= -1.0);
        }

        #[test]
        fn total_is_linear(p in proptest::array::uniform3(-5.0f64..5.0), q in proptest::array::uniform3(-5.0f64..5.0)) {
            let w = LossWeights::default();
            let total = |p: [f64; 3]| eval(|t| {
                let [a, b, c] = p.map(|x| t.constant(Tensor::scalar(x)));
                total_loss(t, a, b, c, &w)
            }).unwrap();
            let sum = [p[0] + q[0], p[1] + q[1], p[2] + q[2]];
            proptest::prop_assert!((total(sum) - total(p) - total(q)).abs() < 1e-10);
        }
    }
}
