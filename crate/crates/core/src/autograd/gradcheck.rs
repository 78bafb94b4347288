//! Finite-difference verification of every operator's backward pass.
//!
//! Protocol: float64, central differences with ε = 1e-4, relative error
//! `|a - n| / max(|a|, |n|, 1e-3)`. Inputs are drawn away from the kinks of
//! the non-smooth ops (relu, abs, clamp, maxpool ties) so the derivative is
//! well-defined at every probed point.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, TensorData, ValueId};

pub const FD_EPSILON: f64 = 1e-4;
pub const PER_OP_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < PER_OP_TOLERANCE
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Weighted-sum readout so the loss is scalar but every output element
/// carries a distinct weight.
fn readout(tape: &mut Tape<f64>, out: ValueId) -> ValueId {
    let n = tape.values(out).len();
    let weights: Vec<f64> = (0..n).map(|j| ((j as f64) * 0.73 + 0.21).sin() + 1.5).collect();
    let w = tape.constant(TensorData::from_values(tape.shape(out), weights));
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod)
}

/// Max relative error between analytic and central-difference gradients for
/// a graph builder over the given inputs.
fn fd_check(
    inputs: &[TensorData<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[ValueId]) -> ValueId,
) -> f64 {
    // analytic
    let mut tape = Tape::<f64>::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let eval = |probe: &[TensorData<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<ValueId> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids);
        tape.scalar(loss)
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].values[j] += FD_EPSILON;
            let mut minus = inputs.to_vec();
            minus[i].values[j] -= FD_EPSILON;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPSILON);
            let a = if analytic[i].is_empty() {
                0.0
            } else {
                analytic[i][j]
            };
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> TensorData<f64> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    TensorData::from_values(shape, values)
}

/// Uniform values pushed away from zero (for relu/abs kinks).
fn uniform_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> TensorData<f64> {
    let mut t = uniform(rng, shape, -1.0, 1.0);
    for v in &mut t.values {
        if v.abs() < margin {
            *v = margin * if *v >= 0.0 { 1.0 } else { -1.0 } + *v;
        }
    }
    t
}

/// Well-separated values so max-pool argmax is stable under ±ε probes.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorData<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates driven by the rng
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let values = order.iter().map(|&r| r as f64 * 0.1).collect();
    TensorData::from_values(shape, values)
}

/// Run the finite-difference protocol on every operator.
pub fn check_all_ops(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: f64| out.push(OpCheck { name, max_rel_err: err });

    push(
        "conv2d",
        fd_check(
            &[
                uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0),
                uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5),
                uniform(&mut rng, &[4], -0.5, 0.5),
            ],
            &|t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2]).unwrap();
                readout(t, y)
            },
        ),
    );
    push(
        "dense",
        fd_check(
            &[
                uniform(&mut rng, &[3, 5], -1.0, 1.0),
                uniform(&mut rng, &[4, 5], -0.7, 0.7),
                uniform(&mut rng, &[4], -0.5, 0.5),
            ],
            &|t, ids| {
                let y = t.dense(ids[0], ids[1], ids[2]).unwrap();
                readout(t, y)
            },
        ),
    );
    push(
        "relu",
        fd_check(&[uniform_away_from_zero(&mut rng, &[3, 7], 0.05)], &|t, ids| {
            let y = t.relu(ids[0]);
            readout(t, y)
        }),
    );
    push(
        "sigmoid",
        fd_check(&[uniform(&mut rng, &[3, 7], -2.0, 2.0)], &|t, ids| {
            let y = t.sigmoid(ids[0]);
            readout(t, y)
        }),
    );
    push(
        "abs",
        fd_check(&[uniform_away_from_zero(&mut rng, &[3, 7], 0.05)], &|t, ids| {
            let y = t.abs(ids[0]);
            readout(t, y)
        }),
    );
    push(
        "exp",
        fd_check(&[uniform(&mut rng, &[3, 5], -1.5, 1.5)], &|t, ids| {
            let y = t.exp(ids[0]);
            readout(t, y)
        }),
    );
    push(
        "log",
        fd_check(&[uniform(&mut rng, &[3, 5], 0.2, 2.5)], &|t, ids| {
            let y = t.log(ids[0]).unwrap();
            readout(t, y)
        }),
    );
    push(
        "add",
        fd_check(
            &[
                uniform(&mut rng, &[2, 6], -1.0, 1.0),
                uniform(&mut rng, &[2, 6], -1.0, 1.0),
            ],
            &|t, ids| {
                let y = t.add(ids[0], ids[1]).unwrap();
                readout(t, y)
            },
        ),
    );
    push(
        "sub",
        fd_check(
            &[
                uniform(&mut rng, &[2, 6], -1.0, 1.0),
                uniform(&mut rng, &[2, 6], -1.0, 1.0),
            ],
            &|t, ids| {
                let y = t.sub(ids[0], ids[1]).unwrap();
                readout(t, y)
            },
        ),
    );
    push(
        "mul",
        fd_check(
            &[
                uniform(&mut rng, &[2, 6], -1.0, 1.0),
                uniform(&mut rng, &[2, 6], -1.0, 1.0),
            ],
            &|t, ids| {
                let y = t.mul(ids[0], ids[1]).unwrap();
                readout(t, y)
            },
        ),
    );
    push(
        "scale",
        fd_check(&[uniform(&mut rng, &[7], -1.0, 1.0)], &|t, ids| {
            let y = t.scale(ids[0], -1.7);
            readout(t, y)
        }),
    );
    push(
        "clamp",
        fd_check(
            &[{
                let mut t = uniform(&mut rng, &[9], -1.0, 1.0);
                // keep probes clear of the clamp edges at ±0.5
                for v in &mut t.values {
                    if (v.abs() - 0.5).abs() < 0.05 {
                        *v += 0.1;
                    }
                }
                t
            }],
            &|t, ids| {
                let y = t.clamp(ids[0], -0.5, 0.5);
                readout(t, y)
            },
        ),
    );
    push(
        "concat",
        fd_check(
            &[
                uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
                uniform(&mut rng, &[1, 3, 3, 3], -1.0, 1.0),
            ],
            &|t, ids| {
                let y = t.concat_channels(ids[0], ids[1]).unwrap();
                readout(t, y)
            },
        ),
    );
    push(
        "maxpool2",
        fd_check(&[separated(&mut rng, &[1, 2, 4, 4])], &|t, ids| {
            let y = t.maxpool2(ids[0]).unwrap();
            readout(t, y)
        }),
    );
    push(
        "global_avg_pool",
        fd_check(&[uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0)], &|t, ids| {
            let y = t.global_avg_pool(ids[0]).unwrap();
            readout(t, y)
        }),
    );
    push(
        "sum_all",
        fd_check(&[uniform(&mut rng, &[5], -1.0, 1.0)], &|t, ids| {
            let y = t.sum_all(ids[0]);
            let w = t.scale(y, 1.3);
            t.sum_all(w)
        }),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_difference_check() {
        for check in check_all_ops(20240) {
            assert!(
                check.passed(),
                "{} max rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn check_covers_the_full_op_set() {
        let names: Vec<&str> = check_all_ops(1).iter().map(|c| c.name).collect();
        for expected in [
            "conv2d",
            "dense",
            "relu",
            "sigmoid",
            "abs",
            "exp",
            "log",
            "add",
            "sub",
            "mul",
            "scale",
            "clamp",
            "concat",
            "maxpool2",
            "global_avg_pool",
            "sum_all",
        ] {
            assert!(names.contains(&expected), "missing {expected}");
        }
    }
}
