//! Loss graphs and their plain-arithmetic references.
//!
//! The heteroscedastic losses are implemented in log form: with
//! ŝ = log|σ̂| the absolute-deviation loss per sample is
//! `exp(-ŝ)·|err| + ŝ` and the variance loss is `exp(-2ŝ)·err² + 2ŝ`,
//! algebraically identical to dividing by |σ̂| and σ̂². The raw-σ
//! parameterization converts through |σ̂| with a tiny floor before the log;
//! it exists to reproduce the training instability of the variance form.

use crate::autograd::{Scalar, Tape, ValueId};

use super::DdnError;

/// Floor applied to |σ̂| in the raw parameterization before taking logs.
pub const RAW_SIGMA_FLOOR: f64 = 1e-8;
pub const RAW_SIGMA_CEIL: f64 = 1e8;

/// Mean absolute blur error: (1/N) Σ |b - b̂|.
pub fn loss_l1<T: Scalar>(
    tape: &mut Tape<T>,
    pred_blur: ValueId,
    target: ValueId,
    batch_n: usize,
) -> Result<ValueId, DdnError> {
    let err = tape.sub(pred_blur, target)?;
    let err = tape.abs(err);
    let sum = tape.sum_all(err);
    Ok(tape.scale(sum, T::from_f64(1.0 / batch_n as f64)))
}

/// Convert a raw σ̂ head output into log|σ̂| with the guard floor.
pub fn raw_sigma_to_log<T: Scalar>(
    tape: &mut Tape<T>,
    sigma_raw: ValueId,
) -> Result<ValueId, DdnError> {
    let mag = tape.abs(sigma_raw);
    let mag = tape.clamp(mag, T::from_f64(RAW_SIGMA_FLOOR), T::from_f64(RAW_SIGMA_CEIL));
    Ok(tape.log(mag)?)
}

/// Heteroscedastic absolute-deviation loss:
/// (1/2N) Σ exp(-ŝ)·|b' - b̂| + ŝ.
pub fn loss_bayes_l1<T: Scalar>(
    tape: &mut Tape<T>,
    pred_blur: ValueId,
    log_sigma: ValueId,
    target: ValueId,
    batch_n: usize,
) -> Result<ValueId, DdnError> {
    let err = tape.sub(pred_blur, target)?;
    let err = tape.abs(err);
    let neg_s = tape.scale(log_sigma, -T::ONE);
    let inv_sigma = tape.exp(neg_s);
    let scaled = tape.mul(inv_sigma, err)?;
    let data_term = tape.sum_all(scaled);
    let reg_term = tape.sum_all(log_sigma);
    let total = tape.add(data_term, reg_term)?;
    Ok(tape.scale(total, T::from_f64(0.5 / batch_n as f64)))
}

/// Heteroscedastic variance loss:
/// (1/2N) Σ exp(-2ŝ)·(b' - b̂)² + 2ŝ. Kept for the stability comparison.
pub fn loss_bayes_l2<T: Scalar>(
    tape: &mut Tape<T>,
    pred_blur: ValueId,
    log_sigma: ValueId,
    target: ValueId,
    batch_n: usize,
) -> Result<ValueId, DdnError> {
    let err = tape.sub(pred_blur, target)?;
    let sq = tape.mul(err, err)?;
    let neg_2s = tape.scale(log_sigma, T::from_f64(-2.0));
    let inv_var = tape.exp(neg_2s);
    let scaled = tape.mul(inv_var, sq)?;
    let data_term = tape.sum_all(scaled);
    let reg = tape.sum_all(log_sigma);
    let reg_term = tape.scale(reg, T::from_f64(2.0));
    let total = tape.add(data_term, reg_term)?;
    Ok(tape.scale(total, T::from_f64(0.5 / batch_n as f64)))
}

// -- plain references (oracles for the tape versions) -----------------------

pub fn reference_l1(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n
}

/// Per-sample absolute-deviation term: (1/2)(|err|/σ + ln σ).
pub fn sample_bayes_l1(err: f64, sigma: f64) -> f64 {
    0.5 * (err.abs() / sigma + sigma.ln())
}

/// Per-sample variance term: (1/2)(err²/σ² + 2 ln σ).
pub fn sample_bayes_l2(err: f64, sigma: f64) -> f64 {
    0.5 * (err * err / (sigma * sigma) + 2.0 * sigma.ln())
}

pub fn reference_bayes_l1(pred: &[f64], log_sigma: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(log_sigma)
        .zip(target)
        .map(|((p, s), t)| (-s).exp() * (p - t).abs() + s)
        .sum::<f64>()
        / (2.0 * n)
}

pub fn reference_bayes_l2(pred: &[f64], log_sigma: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(log_sigma)
        .zip(target)
        .map(|((p, s), t)| (-2.0 * s).exp() * (p - t) * (p - t) + 2.0 * s)
        .sum::<f64>()
        / (2.0 * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::TensorData;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tape_l1(pred: &[f64], target: &[f64]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(TensorData::from_values(&[pred.len(), 1], pred.to_vec()), true);
        let t = tape.constant(TensorData::from_values(&[target.len(), 1], target.to_vec()));
        let l = loss_l1(&mut tape, p, t, pred.len()).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn l1_zero_when_exact() {
        assert_eq!(tape_l1(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
    }

    #[test]
    fn l1_worked_example() {
        // batch {(0,1),(2,2)} -> mean(|0-1|, |2-2|) = 0.5
        assert_eq!(tape_l1(&[0.0, 2.0], &[1.0, 2.0]), 0.5);
    }

    #[test]
    fn l1_matches_reference_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let n = 1 + rng.random_range(0..40);
            let pred: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 16.0 - 8.0).collect();
            let target: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 16.0 - 8.0).collect();
            let got = tape_l1(&pred, &target);
            let expect = reference_l1(&pred, &target);
            assert!((got - expect).abs() < 1e-7, "{got} vs {expect}");
        }
    }

    fn tape_bayes_l1(pred: &[f64], log_sigma: &[f64], target: &[f64]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(TensorData::from_values(&[pred.len(), 1], pred.to_vec()), true);
        let s = tape.leaf(
            TensorData::from_values(&[log_sigma.len(), 1], log_sigma.to_vec()),
            true,
        );
        let t = tape.constant(TensorData::from_values(&[target.len(), 1], target.to_vec()));
        let l = loss_bayes_l1(&mut tape, p, s, t, pred.len()).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn bayes_l1_zero_error_unit_sigma_is_zero() {
        assert_eq!(tape_bayes_l1(&[2.0], &[0.0], &[2.0]), 0.0);
    }

    #[test]
    fn bayes_l1_minimizer_over_sigma_is_the_error() {
        // numeric 1-D minimization oracle: for fixed err e, the per-sample
        // term (1/2)(e/σ + ln σ) is minimized at σ* = e
        for &e in &[0.5, 2.0, 7.3] {
            let mut best_sigma = f64::NAN;
            let mut best = f64::INFINITY;
            let mut sigma = e * 0.25;
            while sigma <= e * 4.0 {
                let v = sample_bayes_l1(e, sigma);
                if v < best {
                    best = v;
                    best_sigma = sigma;
                }
                sigma += e * 1e-4;
            }
            assert!(
                (best_sigma - e).abs() < 1e-3 * e.max(1.0),
                "sigma* {best_sigma} for e={e}"
            );
        }
        // frozen value: e=2 at σ*=2 gives (1+ln2)/2
        let v = sample_bayes_l1(2.0, 2.0);
        assert!((v - 0.5 * (1.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((v - 0.8466).abs() < 1e-4);
    }

    #[test]
    fn bayes_l1_gradient_wrt_log_sigma_matches_hand_value() {
        // d/dŝ [ (exp(-ŝ)e + ŝ) / 2N ] at ŝ=0, e=2 is (1-2)/(2N) = -0.5/N
        let n = 4usize;
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(TensorData::from_values(&[n, 1], vec![2.0; n]));
        let s = tape.leaf(TensorData::from_values(&[n, 1], vec![0.0; n]), true);
        let t = tape.constant(TensorData::from_values(&[n, 1], vec![0.0; n]));
        let l = loss_bayes_l1(&mut tape, p, s, t, n).unwrap();
        tape.backward(l).unwrap();
        for &g in tape.grad(s).unwrap() {
            assert!((g - (-0.5 / n as f64)).abs() < 1e-12, "grad {g}");
        }
        // and against finite differences
        let e = 1e-6;
        let f = |s_val: f64| {
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(TensorData::from_values(&[1, 1], vec![2.0]));
            let s = tape.leaf(TensorData::from_values(&[1, 1], vec![s_val]), false);
            let t = tape.constant(TensorData::from_values(&[1, 1], vec![0.0]));
            let l = loss_bayes_l1(&mut tape, p, s, t, 1).unwrap();
            tape.scalar(l)
        };
        let numeric = (f(e) - f(-e)) / (2.0 * e);
        assert!((numeric - (-0.5)).abs() < 1e-5, "numeric {numeric}");
    }

    #[test]
    fn bayes_l1_matches_reference_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let n = 1 + rng.random_range(0..30);
            let pred: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 16.0 - 8.0).collect();
            let ls: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let target: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 16.0 - 8.0).collect();
            let got = tape_bayes_l1(&pred, &ls, &target);
            let expect = reference_bayes_l1(&pred, &ls, &target);
            assert!((got - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn bayes_l2_minimizer_and_value() {
        // minimizer σ* = e; value at e=2 is (1 + 2 ln 2)/2
        for &e in &[0.5, 2.0] {
            let mut best_sigma = f64::NAN;
            let mut best = f64::INFINITY;
            let mut sigma = e * 0.25;
            while sigma <= e * 4.0 {
                let v = sample_bayes_l2(e, sigma);
                if v < best {
                    best = v;
                    best_sigma = sigma;
                }
                sigma += e * 1e-4;
            }
            assert!((best_sigma - e).abs() < 1e-3 * e.max(1.0));
        }
        let v = sample_bayes_l2(2.0, 2.0);
        assert!((v - 0.5 * (1.0 + 2.0 * std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((v - 1.193).abs() < 1e-3);
    }

    #[test]
    fn bayes_l2_blows_up_second_order_against_first() {
        // at σ = e/10: the L2 error term is (1/2)e²/σ² = 50, the L1 error
        // term is (1/2)e/σ = 5 — a 10x gap that grows with e/σ
        let e = 2.0f64;
        let sigma = e / 10.0;
        let l2_err_term = 0.5 * e * e / (sigma * sigma);
        let l1_err_term = 0.5 * e / sigma;
        assert!((l2_err_term - 50.0).abs() < 1e-12);
        assert!((l1_err_term - 5.0).abs() < 1e-12);
        assert!(sample_bayes_l2(e, sigma) > 10.0 * sample_bayes_l1(e, sigma));
    }

    #[test]
    fn bayes_l1_with_frozen_zero_log_sigma_is_half_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 17;
        let pred: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let zeros = vec![0.0; n];
        let bayes = tape_bayes_l1(&pred, &zeros, &target);
        let l1 = tape_l1(&pred, &target);
        assert!((bayes - 0.5 * l1).abs() < 1e-12);
    }

    #[test]
    fn raw_sigma_path_equals_log_of_abs() {
        let mut tape = Tape::<f64>::new();
        let raw = tape.leaf(
            TensorData::from_values(&[3, 1], vec![2.0, -0.5, 1e-12]),
            true,
        );
        let ls = raw_sigma_to_log(&mut tape, raw).unwrap();
        let v = tape.values(ls);
        assert!((v[0] - 2.0f64.ln()).abs() < 1e-12);
        assert!((v[1] - 0.5f64.ln()).abs() < 1e-12);
        // floored at RAW_SIGMA_FLOOR
        assert!((v[2] - RAW_SIGMA_FLOOR.ln()).abs() < 1e-9);
    }
}
