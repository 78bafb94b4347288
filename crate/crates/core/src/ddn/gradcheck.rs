//! End-to-end gradient verification of the full network graph.
//!
//! The whole forward + loss graph is instantiated in f64 and a random
//! subset of parameters is probed with central finite differences. Input
//! construction (gradients, hue/saturation) is excluded: it is data, not
//! part of the differentiated graph.
//!
//! The probe step is 1e-6, smaller than the per-op protocol's 1e-4: with
//! tens of thousands of ReLU units downstream of one parameter, the number
//! of units whose kink falls inside the ±ε band grows linearly with ε and
//! dominates the finite-difference error at 1e-4 (measured up to 1e-1 at
//! full width, shrinking to ~1e-7 at 1e-6 — the signature of kink
//! crossings, not of a wrong gradient). f64 keeps cancellation noise at
//! ~1e-9 for this ε.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::rel_err;
use crate::autograd::{Tape, TensorData};
use crate::config::{LossKind, SigmaParam};

use super::loss::{loss_bayes_l1, loss_bayes_l2, loss_l1, raw_sigma_to_log};
use super::model::DdnModel;
use super::preprocess::preprocess;
use super::{DdnConfig, DdnError};

pub const FULL_GRAPH_TOLERANCE: f64 = 1e-3;
const EPSILON: f64 = 1e-6;

fn forward_loss(
    model: &DdnModel<f64>,
    inputs: &(TensorData<f64>, TensorData<f64>, TensorData<f64>),
    targets: &TensorData<f64>,
) -> Result<f64, DdnError> {
    let mut tape = Tape::<f64>::new();
    let ids = model.insert_leaves(&mut tape, false);
    let main = tape.leaf(inputs.0.clone(), false);
    let pos = tape.leaf(inputs.1.clone(), false);
    let color = tape.leaf(inputs.2.clone(), false);
    let target = tape.leaf(targets.clone(), false);
    let out = model.forward(&mut tape, &ids, main, pos, color)?;
    let log_sigma = match model.cfg.sigma_param {
        SigmaParam::Log => out.sigma_head,
        SigmaParam::Raw => raw_sigma_to_log(&mut tape, out.sigma_head)?,
    };
    let n = targets.shape[0];
    let loss = match model.cfg.loss {
        LossKind::L1 => loss_l1(&mut tape, out.blur, target, n)?,
        LossKind::BayesL1 => loss_bayes_l1(&mut tape, out.blur, log_sigma, target, n)?,
        LossKind::BayesL2 => loss_bayes_l2(&mut tape, out.blur, log_sigma, target, n)?,
    };
    Ok(tape.scalar(loss))
}

/// Max relative error between analytic and finite-difference gradients over
/// `probes` randomly chosen parameters of the full graph.
pub fn gradcheck_full(cfg: &DdnConfig, seed: u64, probes: usize) -> Result<f64, DdnError> {
    let model = DdnModel::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let n = 2usize;
    let s = cfg.patch_side;

    // random in-range patches through the real input construction
    let mut main = Vec::new();
    let mut pos = Vec::new();
    let mut color = Vec::new();
    for _ in 0..n {
        let patch: Vec<f32> = (0..3 * s * s).map(|_| rng.random::<f32>()).collect();
        let p = preprocess(
            &patch,
            s,
            (
                rng.random::<f32>() * 2.0 - 1.0,
                rng.random::<f32>() * 2.0 - 1.0,
            ),
            cfg.input_mode,
        );
        main.extend(p.main.iter().map(|&v| v as f64));
        pos.extend(p.pos.iter().map(|&v| v as f64));
        color.extend(p.color.iter().map(|&v| v as f64));
    }
    let inputs = (
        TensorData::from_values(&[n, cfg.in_channels(), s, s], main),
        TensorData::from_values(&[n, 2, s, s], pos),
        TensorData::from_values(&[n, 2, s, s], color),
    );
    let targets = TensorData::from_values(
        &[n, 1],
        (0..n).map(|_| rng.random::<f64>() * 16.0 - 8.0).collect(),
    );

    // analytic gradients
    let mut tape = Tape::<f64>::new();
    let ids = model.insert_leaves(&mut tape, true);
    let main_id = tape.leaf(inputs.0.clone(), false);
    let pos_id = tape.leaf(inputs.1.clone(), false);
    let color_id = tape.leaf(inputs.2.clone(), false);
    let target_id = tape.leaf(targets.clone(), false);
    let out = model.forward(&mut tape, &ids, main_id, pos_id, color_id)?;
    let log_sigma = match cfg.sigma_param {
        SigmaParam::Log => out.sigma_head,
        SigmaParam::Raw => raw_sigma_to_log(&mut tape, out.sigma_head)?,
    };
    let loss = match cfg.loss {
        LossKind::L1 => loss_l1(&mut tape, out.blur, target_id, n)?,
        LossKind::BayesL1 => loss_bayes_l1(&mut tape, out.blur, log_sigma, target_id, n)?,
        LossKind::BayesL2 => loss_bayes_l2(&mut tape, out.blur, log_sigma, target_id, n)?,
    };
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.values(id).len()])
        })
        .collect();

    // probe random parameters with central differences
    let tensor_count = model.named_tensors().len();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let ti = rng.random_range(0..tensor_count);
        let numel = analytic[ti].len();
        let ei = rng.random_range(0..numel);
        let mut plus = model.clone();
        plus.tensors_mut()[ti].values[ei] += EPSILON;
        let mut minus = model.clone();
        minus.tensors_mut()[ti].values[ei] -= EPSILON;
        let numeric =
            (forward_loss(&plus, &inputs, &targets)? - forward_loss(&minus, &inputs, &targets)?)
                / (2.0 * EPSILON);
        let e = rel_err(analytic[ti][ei], numeric);
        if std::env::var_os("CCA_GRADCHECK_DEBUG").is_some() && e > 1e-4 {
            let name = &model.named_tensors()[ti].0;
            eprintln!(
                "probe {name}[{ei}]: analytic {:.8e} numeric {numeric:.8e} rel {e:.3e}",
                analytic[ti][ei]
            );
        }
        worst = worst.max(e);
    }
    Ok(worst)
}
