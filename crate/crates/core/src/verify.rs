//! Numerical self-checks shared by `sttn selftest` and the test suites:
//! finite-difference gradients for every differentiable operation,
//! attention against the loop oracle, patch roundtrips and FLOP scaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{check, GradCheck};
use crate::losses::{d_loss, g_adv_loss, l1_hole, l1_valid, total_loss, LossWeights};
use crate::models::{composite, Discriminator, Generator, ModelConfig};
use crate::nn::{
    bilinear_upsample, conv2d, conv3d, spectral_normalize_op, ParamBinding, ParamStore,
    ResidualBlock, SpectralNormState,
};
use crate::oracle;
use crate::patch::{extract_patches, extract_patches_var, reassemble, reassemble_var, PatchShape};
use crate::tensor::Tensor;
use crate::transformer::{
    attend, attend_var, attention_weights, attention_weights_var, match_patches, similarity_var,
    TransformerLayer, ATTENTION_FLOPS,
};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

/// Worst outcome of one named check across seeds.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub trials: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<f64>;

/// A differentiable operation and its gradient tolerance.
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: CaseFn,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Values with `0.1 <= |x| <= 1`, so kinks at zero are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn binary_mask(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut m = Tensor::from_fn(
        shape.to_vec(),
        |_| if rng.random_bool(p) { 1.0 } else { 0.0 },
    );
    // Both regions non-empty.
    m.data_mut()[0] = 1.0;
    let n = m.numel();
    m.data_mut()[n - 1] = 0.0;
    m
}

fn grad<F>(inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(check(&inputs, f, GradCheck::default(), rng)?.max_rel_error())
}

/// Checks gradients of a parameterized function with respect to every
/// parameter and every extra input, probing at most `coords` entries each.
fn grad_params<F>(
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    coords: Option<usize>,
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &mut ParamBinding<'_, f64>, &[Var]) -> Result<Var>,
{
    let n = store.len();
    let mut inputs = store.values().to_vec();
    inputs.extend(extra);
    let cfg = GradCheck {
        max_coords: coords,
        ..Default::default()
    };
    let report = check(
        &inputs,
        |tape, vars| {
            let mut binding = ParamBinding::from_vars(store, &vars[..n]);
            f(tape, &mut binding, &vars[n..])
        },
        cfg,
        rng,
    )?;
    Ok(report.max_rel_error())
}

fn randomize(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    for v in store.values_mut() {
        *v = Tensor::uniform(v.shape().to_vec(), -scale, scale, rng);
    }
}

/// Variance-preserving weights for LeakyReLU stacks and non-zero biases, so
/// deep pre-activations are O(1) rather than clustered at the kink.
fn randomize_fan_in(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for v in store.values_mut() {
        let shape = v.shape().to_vec();
        let bound = if shape.len() > 1 {
            (6.0 / shape[1..].iter().product::<usize>() as f64).sqrt()
        } else {
            0.5
        };
        *v = Tensor::uniform(shape, -bound, bound, rng);
    }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        frame_height: 16,
        frame_width: 16,
        encoder_channels: [4, 4, 4, 4],
        decoder_channels: [4, 4, 4],
        layers: 2,
        heads: vec![PatchShape::new(4, 4), PatchShape::new(2, 2)],
        visibility_threshold: 0.0,
        disc_channels: vec![2, 2, 2, 2, 2, 2],
    }
}

macro_rules! case {
    ($name:expr, $run:expr) => {
        GradCase {
            name: $name,
            tolerance: OP_TOLERANCE,
            run: $run,
        }
    };
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        case!("add", |r| grad(
            vec![uniform(&[2, 3], r), uniform(&[1, 3], r)],
            r,
            |t, v| t.add(v[0], v[1])
        )),
        case!("sub", |r| grad(
            vec![uniform(&[2, 1], r), uniform(&[2, 4], r)],
            r,
            |t, v| t.sub(v[0], v[1])
        )),
        case!("mul", |r| {
            grad(
                vec![uniform(&[2, 1, 3], r), uniform(&[2, 4, 1], r)],
                r,
                |t, v| t.mul(v[0], v[1]),
            )
        }),
        case!("scale", |r| grad(vec![uniform(&[5], r)], r, |t, v| Ok(
            t.scale(v[0], -1.7)
        ))),
        case!("add_scalar", |r| grad(
            vec![uniform(&[5], r)],
            r,
            |t, v| Ok(t.add_scalar(v[0], 0.3))
        )),
        case!("neg", |r| grad(vec![uniform(&[5], r)], r, |t, v| Ok(
            t.neg(v[0])
        ))),
        case!("leaky_relu", |r| {
            grad(vec![away_from_zero(&[3, 4], r)], r, |t, v| {
                Ok(t.leaky_relu(v[0], 0.2))
            })
        }),
        case!("relu", |r| grad(
            vec![away_from_zero(&[3, 4], r)],
            r,
            |t, v| Ok(t.relu(v[0]))
        )),
        case!("tanh", |r| grad(vec![uniform(&[3, 4], r)], r, |t, v| Ok(
            t.tanh(v[0])
        ))),
        case!("square", |r| grad(vec![uniform(&[3, 4], r)], r, |t, v| Ok(
            t.square(v[0])
        ))),
        case!("sum", |r| grad(vec![uniform(&[3, 4], r)], r, |t, v| Ok(
            t.sum(v[0])
        ))),
        case!("mean", |r| grad(vec![uniform(&[3, 4], r)], r, |t, v| Ok(
            t.mean(v[0])
        ))),
        case!("abs_sum", |r| grad(
            vec![away_from_zero(&[3, 4], r)],
            r,
            |t, v| Ok(t.abs_sum(v[0]))
        )),
        case!("div_scalar", |r| {
            let denom = Tensor::from_fn([3], |_| r.random_range(0.5..2.0));
            grad(vec![uniform(&[2, 3], r), denom], r, |t, v| {
                let s = t.sum(v[1]);
                t.div_scalar(v[0], s)
            })
        }),
        case!("matmul", |r| {
            grad(vec![uniform(&[3, 4], r), uniform(&[4, 2], r)], r, |t, v| {
                t.matmul(v[0], v[1])
            })
        }),
        case!("softmax", |r| {
            grad(vec![uniform(&[3, 5], r)], r, |t, v| {
                let a = t.softmax(v[0], 1)?;
                let b = t.softmax(v[0], 0)?;
                t.add(a, b)
            })
        }),
        case!("reshape", |r| grad(vec![uniform(&[2, 6], r)], r, |t, v| t
            .reshape(v[0], &[3, 4]))),
        case!("permute", |r| {
            grad(vec![uniform(&[2, 3, 4], r)], r, |t, v| {
                t.permute(v[0], &[2, 0, 1])
            })
        }),
        case!("concat", |r| {
            grad(
                vec![uniform(&[2, 3, 2], r), uniform(&[2, 1, 2], r)],
                r,
                |t, v| t.concat(&[v[0], v[1]], 1),
            )
        }),
        case!("slice", |r| grad(
            vec![uniform(&[2, 5, 3], r)],
            r,
            |t, v| t.slice(v[0], 1, 1, 3)
        )),
        case!("conv2d", |r| {
            let inputs = vec![
                uniform(&[2, 2, 5, 6], r),
                uniform(&[3, 2, 3, 3], r),
                uniform(&[3], r),
            ];
            grad(inputs, r, |t, v| conv2d(t, v[0], v[1], Some(v[2]), 2, 1, 1))
        }),
        case!("conv2d_dilated", |r| {
            let inputs = vec![
                uniform(&[1, 2, 7, 7], r),
                uniform(&[2, 2, 3, 3], r),
                uniform(&[2], r),
            ];
            grad(inputs, r, |t, v| conv2d(t, v[0], v[1], Some(v[2]), 1, 2, 2))
        }),
        case!("conv3d", |r| {
            let inputs = vec![
                uniform(&[1, 2, 3, 6, 6], r),
                uniform(&[2, 2, 3, 5, 5], r),
                uniform(&[2], r),
            ];
            grad(inputs, r, |t, v| {
                conv3d(t, v[0], v[1], Some(v[2]), [1, 2, 2], [1, 2, 2])
            })
        }),
        case!("bilinear_upsample", |r| {
            grad(vec![uniform(&[2, 2, 3, 4], r)], r, |t, v| {
                bilinear_upsample(t, v[0], 2)
            })
        }),
        case!("spectral_normalize", |r| {
            let w = uniform(&[3, 2, 2, 2], r);
            let mut st = SpectralNormState::new(3, 8, r);
            for _ in 0..3 {
                st.step(w.data(), 3, 8);
            }
            grad(vec![w], r, move |t, v| {
                let mut s = st.clone();
                spectral_normalize_op(t, v[0], &mut s, false)
            })
        }),
        case!("similarity", |r| {
            grad(vec![uniform(&[4, 6], r), uniform(&[5, 6], r)], r, |t, v| {
                similarity_var(t, v[0], v[1])
            })
        }),
        case!("masked_softmax", |r| {
            let mut vis: Vec<bool> = (0..6).map(|_| r.random_bool(0.6)).collect();
            vis[2] = true;
            grad(vec![uniform(&[4, 6], r)], r, move |t, v| {
                attention_weights_var(t, v[0], &vis)
            })
        }),
        case!("attend", |r| {
            grad(vec![uniform(&[4, 5], r), uniform(&[5, 3], r)], r, |t, v| {
                attend_var(t, v[0], v[1])
            })
        }),
        case!("patch_roundtrip", |r| {
            grad(vec![uniform(&[2, 2, 4, 6], r)], r, |t, v| {
                let (rows, layout) = extract_patches_var(t, v[0], PatchShape::new(2, 3))?;
                let rows = t.square(rows);
                reassemble_var(t, rows, &layout)
            })
        }),
        case!("residual_block", |r| {
            let mut store = ParamStore::new();
            let block = ResidualBlock::new(&mut store, "res", 2, r);
            randomize(&mut store, 0.5, r);
            grad_params(
                &store,
                vec![uniform(&[2, 2, 4, 4], r)],
                None,
                r,
                |t, p, v| block.forward(t, p, v[0]),
            )
        }),
        case!("transformer_layer", |r| {
            let mut store = ParamStore::new();
            let heads = [PatchShape::new(4, 4), PatchShape::new(2, 2)];
            let layer = TransformerLayer::new(&mut store, "tf", 4, &heads, 0.0, r)?;
            randomize(&mut store, 0.5, r);
            let mask = binary_mask(&[2, 1, 4, 4], 0.3, r);
            grad_params(
                &store,
                vec![uniform(&[2, 4, 4, 4], r)],
                Some(12),
                r,
                move |t, p, v| layer.forward(t, p, v[0], &mask, None),
            )
        }),
        case!("l1_hole", |r| {
            let m = binary_mask(&[2, 1, 3, 3], 0.5, r);
            grad(
                vec![uniform(&[2, 3, 3, 3], r), uniform(&[2, 3, 3, 3], r)],
                r,
                move |t, v| l1_hole(t, v[0], v[1], &m),
            )
        }),
        case!("l1_valid", |r| {
            let m = binary_mask(&[2, 1, 3, 3], 0.5, r);
            grad(
                vec![uniform(&[2, 3, 3, 3], r), uniform(&[2, 3, 3, 3], r)],
                r,
                move |t, v| l1_valid(t, v[0], v[1], &m),
            )
        }),
        case!("d_loss", |r| {
            let scores = |r: &mut ChaCha8Rng| {
                Tensor::from_fn([1, 2, 3, 1, 1], |_| {
                    // Keep clear of the hinge kinks at +-1.
                    let x: f64 = r.random_range(-0.8..0.8);
                    if r.random_bool(0.3) {
                        x * 3.0 + x.signum() * 1.5
                    } else {
                        x
                    }
                })
            };
            grad(vec![scores(r), scores(r)], r, |t, v| d_loss(t, v[0], v[1]))
        }),
        case!("g_adv_loss", |r| grad(
            vec![uniform(&[1, 2, 3, 1, 1], r)],
            r,
            |t, v| Ok(g_adv_loss(t, v[0]))
        )),
        case!("total_loss", |r| {
            let w = LossWeights::default();
            grad(
                vec![uniform(&[], r), uniform(&[], r), uniform(&[], r)],
                r,
                move |t, v| total_loss(t, v[0], v[1], v[2], &w),
            )
        }),
        case!("composite", |r| {
            let m = binary_mask(&[2, 1, 4, 4], 0.4, r);
            grad(
                vec![uniform(&[2, 3, 4, 4], r), uniform(&[2, 3, 4, 4], r)],
                r,
                move |t, v| composite(t, v[0], v[1], &m),
            )
        }),
        case!("discriminator", |r| {
            let mut store = ParamStore::new();
            let disc = Discriminator::new(&[2, 2, 2], &mut store, r);
            randomize(&mut store, 0.5, r);
            let mut disc = disc;
            // Warm the power iteration so sigma is well away from zero.
            {
                let mut tape = Tape::new();
                let mut p = ParamBinding::new(&store, false);
                let v = tape.constant(Tensor::zeros([1, 3, 3, 8, 8]));
                disc.forward(&mut tape, &mut p, v, true)?;
            }
            grad_params(
                &store,
                vec![uniform(&[1, 3, 3, 8, 8], r)],
                Some(16),
                r,
                move |t, p, v| {
                    let mut d = disc.clone();
                    d.forward(t, p, v[0], false)
                },
            )
        }),
        GradCase {
            name: "generator_composed",
            tolerance: COMPOSED_TOLERANCE,
            run: |r| {
                let cfg = toy_config();
                let mut store = ParamStore::new();
                let g = Generator::new(&cfg, &mut store, r)?;
                randomize_fan_in(&mut store, r);
                let mask = Tensor::from_fn([2, 1, 16, 16], |i| {
                    let (y, x) = ((i / 16) % 16, i % 16);
                    if (4..10).contains(&y) && (5..11).contains(&x) {
                        1.0
                    } else {
                        0.0
                    }
                });
                let frames = uniform(&[2, 3, 16, 16], r);
                // The output is reduced by a random projection, so no
                // parameter's gradient is a near-cancelling sum.
                grad_params(&store, vec![frames], Some(4), r, move |t, p, v| {
                    g.forward(t, p, v[0], &mask, None)
                })
            },
        },
    ]
}

/// Runs every gradient case on seeds `0..seeds`.
pub fn gradient_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    gradient_cases()
        .iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let e = (case.run)(&mut rng)?;
                worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
            }
            Ok(CheckResult {
                name: case.name.to_string(),
                worst,
                tolerance: case.tolerance,
                trials: seeds as usize,
            })
        })
        .collect()
}

/// Outcome of comparing attention against the loop oracle.
#[derive(Clone, Debug, Default)]
pub struct AttentionOracleReport {
    pub instances: usize,
    /// Max |fast - oracle| over weights and outputs.
    pub max_oracle_error: f64,
    /// Largest weight placed on an invisible key (must be exactly 0).
    pub max_invisible_weight: f64,
    pub max_row_sum_error: f64,
    /// Max |out - out_permuted| under a joint key/value permutation.
    pub max_permutation_error: f64,
}

impl AttentionOracleReport {
    /// Oracle and row sums within 1e-6, invisible keys exactly zero,
    /// permutation error at rounding level.
    pub fn passed(&self) -> bool {
        self.max_oracle_error < 1e-6
            && self.max_invisible_weight == 0.0
            && self.max_row_sum_error < 1e-6
            && self.max_permutation_error < 1e-12
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Random instances with `T <= 3`, `h, w <= 8`.
pub fn attention_oracle(instances: usize, seed: u64) -> Result<AttentionOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = AttentionOracleReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let t = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let c = rng.random_range(1..=3);
        let dr = divisors(h);
        let dc = divisors(w);
        let patch = PatchShape::new(
            dr[rng.random_range(0..dr.len())],
            dc[rng.random_range(0..dc.len())],
        );
        let q = extract_patches(&uniform(&[t, c, h, w], &mut rng), patch)?;
        let k = extract_patches(&uniform(&[t, c, h, w], &mut rng), patch)?;
        let v = extract_patches(&uniform(&[t, c, h, w], &mut rng), patch)?;
        let n = q.layout.num_patches();
        let len = q.layout.patch_len();
        let mut vis: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        vis[rng.random_range(0..n)] = true;

        let s = match_patches(&q, &k)?;
        let a = attention_weights(&s, &vis)?;
        let o = attend(&a, &v)?;

        let mut s_ref = Tensor::zeros([n, n]);
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for e in 0..len {
                    dot += q.patches.at(&[i, e]) * k.patches.at(&[j, e]);
                }
                s_ref.set(&[i, j], dot / (len as f64).sqrt());
            }
        }
        let a_ref = oracle::masked_softmax_rows(&s_ref, &vis);
        let o_ref = oracle::weighted_sum_rows(&a_ref, &v.patches);
        for (x, y) in a
            .data()
            .iter()
            .zip(a_ref.data())
            .chain(o.patches.data().iter().zip(o_ref.data()))
        {
            rep.max_oracle_error = rep.max_oracle_error.max((x - y).abs());
        }
        for i in 0..n {
            let row: f64 = (0..n).map(|j| a.at(&[i, j])).sum();
            rep.max_row_sum_error = rep.max_row_sum_error.max((row - 1.0).abs());
            for j in (0..n).filter(|&j| !vis[j]) {
                rep.max_invisible_weight = rep.max_invisible_weight.max(a.at(&[i, j]).abs());
            }
        }

        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffle = |x: &Tensor<f64>| {
            Tensor::from_fn([n, len], |o| x.data()[perm[o / len] * len + o % len])
        };
        let mut kp = k.clone();
        kp.patches = shuffle(&k.patches);
        let mut vp = v.clone();
        vp.patches = shuffle(&v.patches);
        let visp: Vec<bool> = perm.iter().map(|&j| vis[j]).collect();
        let sp = match_patches(&q, &kp)?;
        let ap = attention_weights(&sp, &visp)?;
        let op = attend(&ap, &vp)?;
        for (x, y) in o.patches.data().iter().zip(op.patches.data()) {
            rep.max_permutation_error = rep.max_permutation_error.max((x - y).abs());
        }
    }
    Ok(rep)
}

/// Extract/reassemble on random divisible shapes, including the
/// whole-frame head. Returns the number of mismatching tensors.
pub fn patch_roundtrip(tensors: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for i in 0..tensors {
        let t = rng.random_range(1..=4);
        let c = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let patch = if i % 4 == 0 {
            PatchShape::new(h, w)
        } else {
            let dr = divisors(h);
            let dc = divisors(w);
            PatchShape::new(
                dr[rng.random_range(0..dr.len())],
                dc[rng.random_range(0..dc.len())],
            )
        };
        let x = Tensor::<f64>::uniform([t, c, h, w], -1e3, 1e3, &mut rng);
        let back = reassemble(&extract_patches(&x, patch)?)?;
        if back
            .data()
            .iter()
            .zip(x.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Attention matmul FLOPs of one layer forward at `frames` frames.
pub fn attention_flops(frames: usize, seed: u64) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let heads = [PatchShape::new(4, 4), PatchShape::new(2, 2)];
    let layer = TransformerLayer::new(&mut store, "tf", 4, &heads, 0.0, &mut rng)?;
    let mut tape = Tape::new();
    let mut p = ParamBinding::new(&store, false);
    let x = tape.constant(uniform(&[frames, 4, 8, 8], &mut rng));
    let mask = Tensor::zeros([frames, 1, 8, 8]);
    layer.forward(&mut tape, &mut p, x, &mask, None)?;
    Ok(tape.counter(ATTENTION_FLOPS))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_one_seed() {
        for r in gradient_suite(1).unwrap() {
            assert!(r.passed(), "{} rel error {:e}", r.name, r.worst);
        }
    }

    #[test]
    fn small_oracle_and_roundtrip_runs() {
        let rep = attention_oracle(10, 1).unwrap();
        assert!(rep.max_oracle_error < 1e-9);
        assert_eq!(rep.max_invisible_weight, 0.0);
        assert!(rep.passed());
        assert_eq!(patch_roundtrip(10, 1).unwrap(), 0);
        assert_eq!(
            attention_flops(8, 0).unwrap(),
            4 * attention_flops(4, 0).unwrap()
        );
    }
}
