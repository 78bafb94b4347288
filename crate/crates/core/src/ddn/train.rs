//! Training loop: seeded shuffling, PSF-safe augmentation, chunked
//! data-parallel gradients with an ordered reduction, ADAM updates, and
//! per-epoch test metrics.
//!
//! Batches are split into fixed-size chunks; each chunk runs forward and
//! backward on its own tape and the chunk gradients are summed in chunk
//! order, so results do not depend on the worker count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{adam_step_refs, AdamParams, AdamState, Tape, TensorData};
use crate::config::{LossKind, SigmaParam};
use crate::optics::{LensConfig, SignedBlur};
use crate::render::{substream, Dataset, PatchSample};

use super::loss::{loss_bayes_l1, loss_bayes_l2, loss_l1, raw_sigma_to_log, RAW_SIGMA_FLOOR};
use super::model::DdnModel;
use super::preprocess::preprocess;
use super::{apply_augment, sample_augment, AugmentSpec, DdnConfig, DdnError, Prediction};

const TAG_SHUFFLE: u64 = 0x10;
const TAG_AUGMENT: u64 = 0x11;

/// Samples per gradient chunk; fixed so the reduction order (and thus the
/// result) is independent of the worker count.
pub const GRAD_CHUNK: usize = 16;

/// Where the regression target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSource {
    /// Ideal-lens blur implied by the ground-truth distance (the
    /// deaberration target). The default.
    IdealFromDistance,
    /// The stored per-sample blur label (used by the loss-stability runs,
    /// whose datasets carry deliberately perturbed labels).
    StoredBlur,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub workers: usize,
    pub target_source: TargetSource,
    /// Assert every parameter stays finite after each step.
    pub validate_params: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            target_source: TargetSource::IdealFromDistance,
            validate_params: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mae_px: f64,
    pub test_acc: f64,
    pub wall_s: f64,
}

impl EpochLog {
    /// Equality ignoring wall-clock (the only non-reproducible column).
    pub fn same_metrics(&self, other: &EpochLog) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.test_mae_px.to_bits() == other.test_mae_px.to_bits()
            && self.test_acc.to_bits() == other.test_acc.to_bits()
    }
}

/// CSV with a fixed header; `wall_s` is wall-clock and not reproducible.
pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,test_mae_px,test_acc,wall_s\n");
    for e in log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3}\n",
            e.epoch, e.train_loss, e.test_mae_px, e.test_acc, e.wall_s
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: DdnModel<f32>,
    pub best_model: DdnModel<f32>,
    pub best_epoch: usize,
    pub best_test_mae: f64,
    pub log: Vec<EpochLog>,
}

fn target_of(sample: &PatchSample, lens: &LensConfig, source: TargetSource) -> f32 {
    match source {
        TargetSource::IdealFromDistance => sample.ideal_blur_px(lens) as f32,
        TargetSource::StoredBlur => sample.blur_px,
    }
}

struct BatchInputs {

    main: TensorData<f32>,
    pos: TensorData<f32>,
    color: TensorData<f32>,
    target: TensorData<f32>,
}

fn assemble_inputs(
    cfg: &DdnConfig,
    ds: &Dataset,
    targets: &[f32],
    indices: &[usize],
    augment_seed: Option<(u64, usize)>, // (run seed, epoch)
) -> BatchInputs {
    let s = cfg.patch_side;
    let area = s * s;
    let in_ch = cfg.in_channels();
    let n = indices.len();
    let mut main = Vec::with_capacity(n * in_ch * area);
    let mut pos = Vec::with_capacity(n * 2 * area);
    let mut color = Vec::with_capacity(n * 2 * area);
    let mut target = Vec::with_capacity(n);
    for &idx in indices {
        let sample = &ds.samples[idx];
        let stored = sample.side;
        let spec = match augment_seed {
            Some((seed, epoch)) if cfg.augment => {
                let mut rng = ChaCha8Rng::seed_from_u64(substream(
                    seed,
                    TAG_AUGMENT,
                    ((epoch as u64) << 32) | idx as u64,
                ));
                sample_augment(&mut rng, stored, s)
            }
            _ => AugmentSpec::center(stored, s),
        };
        let patch = apply_augment(&sample.planes, stored, s, &spec);
        let p = preprocess(&patch, s, sample.pos, cfg.input_mode);
        main.extend(p.main);
        pos.extend(p.pos);
        color.extend(p.color);
        target.push(targets[idx]);
    }
    BatchInputs {

        main: TensorData::from_values(&[n, in_ch, s, s], main),
        pos: TensorData::from_values(&[n, 2, s, s], pos),
        color: TensorData::from_values(&[n, 2, s, s], color),
        target: TensorData::from_values(&[n, 1], target),
    }
}

/// Forward + loss + backward for one chunk on a private tape. Returns the
/// chunk's contribution to the batch loss and per-parameter gradients.
fn chunk_gradients(
    model: &DdnModel<f32>,
    inputs: BatchInputs,
    batch_n: usize,
) -> Result<(f64, Vec<Vec<f32>>), DdnError> {
    let cfg = &model.cfg;
    let mut tape = Tape::<f32>::new();
    let ids = model.insert_leaves(&mut tape, true);
    let main = tape.leaf(inputs.main, false);
    let pos = tape.leaf(inputs.pos, false);
    let color = tape.leaf(inputs.color, false);
    let target = tape.leaf(inputs.target, false);
    let out = model.forward(&mut tape, &ids, main, pos, color)?;
    let log_sigma = match cfg.sigma_param {
        SigmaParam::Log => out.sigma_head,
        SigmaParam::Raw => raw_sigma_to_log(&mut tape, out.sigma_head)?,
    };
    let loss = match cfg.loss {
        LossKind::L1 => loss_l1(&mut tape, out.blur, target, batch_n)?,
        LossKind::BayesL1 => loss_bayes_l1(&mut tape, out.blur, log_sigma, target, batch_n)?,
        LossKind::BayesL2 => loss_bayes_l2(&mut tape, out.blur, log_sigma, target, batch_n)?,
    };
    let loss_value = tape.scalar(loss) as f64;
    tape.backward(loss)?;
    let grads = ids
        .ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.values(id).len()])
        })
        .collect();
    Ok((loss_value, grads))
}

/// Batched forward-only predictions for a list of samples (center-cropped,
/// no augmentation). Chunked and order-preserving.
pub fn batched_predict(
    model: &DdnModel<f32>,
    samples: &[PatchSample],
) -> Result<Vec<Prediction>, DdnError> {
    let cfg = &model.cfg;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    for sample in samples {
        if sample.side < cfg.patch_side {
            return Err(DdnError::PatchSide {
                found: sample.side,
                need: cfg.patch_side,
            });
        }
    }
    let chunks: Vec<&[PatchSample]> = samples.chunks(64).collect();
    let per: Result<Vec<Vec<Prediction>>, DdnError> = chunks
        .par_iter()
        .map(|chunk| {
            let s = cfg.patch_side;
            let area = s * s;
            let in_ch = cfg.in_channels();
            let n = chunk.len();
            let mut main = Vec::with_capacity(n * in_ch * area);
            let mut pos = Vec::with_capacity(n * 2 * area);
            let mut color = Vec::with_capacity(n * 2 * area);
            for sample in *chunk {
                let patch = apply_augment(
                    &sample.planes,
                    sample.side,
                    s,
                    &AugmentSpec::center(sample.side, s),
                );
                let p = preprocess(&patch, s, sample.pos, cfg.input_mode);
                main.extend(p.main);
                pos.extend(p.pos);
                color.extend(p.color);
            }
            let mut tape = Tape::<f32>::new();
            let ids = model.insert_leaves(&mut tape, false);
            let main = tape.leaf(TensorData::from_values(&[n, in_ch, s, s], main), false);
            let pos = tape.leaf(TensorData::from_values(&[n, 2, s, s], pos), false);
            let color = tape.leaf(TensorData::from_values(&[n, 2, s, s], color), false);
            let out = model.forward(&mut tape, &ids, main, pos, color)?;
            let blur = tape.values(out.blur);
            let sig = tape.values(out.sigma_head);
            Ok((0..n)
                .map(|i| {
                    let sigma = match cfg.sigma_param {
                        SigmaParam::Log => (sig[i] as f64).exp(),
                        SigmaParam::Raw => (sig[i] as f64).abs().max(RAW_SIGMA_FLOOR),
                    };
                    Prediction {
                        blur: SignedBlur::new(blur[i] as f64),
                        sigma,
                    }
                })
                .collect())
        })
        .collect();
    Ok(per?.into_iter().flatten().collect())
}

/// Train a model. Deterministic for a fixed seed and config, regardless of
/// worker count (except the wall-clock column of the log).
pub fn train(
    cfg: &DdnConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    lens: &LensConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainResult, DdnError> {
    cfg.validate()?;
    if train_ds.side < cfg.patch_side {
        return Err(DdnError::PatchSide {
            found: train_ds.side,
            need: cfg.patch_side,
        });
    }
    if train_ds.samples.is_empty() {
        return Err(DdnError::BadConfig("empty training dataset".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| DdnError::BadConfig(format!("thread pool: {e}")))?;

    let mut model = DdnModel::<f32>::init(cfg, seed)?;
    let mut adam = AdamState::new(
        &model
            .named_tensors()
            .iter()
            .map(|(_, t)| (*t).clone())
            .collect::<Vec<_>>(),
    );
    let hp = AdamParams {
        lr: cfg.lr,
        ..AdamParams::default()
    };

    let train_targets: Vec<f32> = train_ds
        .samples
        .iter()
        .map(|s| target_of(s, lens, opts.target_source))
        .collect();
    let test_targets: Vec<f32> = test_ds
        .samples
        .iter()
        .map(|s| target_of(s, lens, opts.target_source))
        .collect();

    let n = train_ds.samples.len();
    let batch = cfg.batch.min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best_model = model.clone();
    let mut best_epoch = 0usize;
    let mut best_test_mae = f64::INFINITY;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, TAG_SHUFFLE, epoch as u64));
        indices.shuffle(&mut rng);
        let full_batches = n / batch;
        let mut epoch_loss = 0.0;
        for step in 0..full_batches.max(1) {
            let lo = step * batch;
            let hi = (lo + batch).min(n);
            let batch_idx = &indices[lo..hi];
            let t_asm = std::sync::atomic::AtomicU64::new(0);
            let t_grad = std::sync::atomic::AtomicU64::new(0);
            let chunk_results: Result<Vec<(f64, Vec<Vec<f32>>)>, DdnError> = pool.install(|| {
                batch_idx
                    .par_chunks(GRAD_CHUNK)
                    .map(|chunk| {
                        let t0 = Instant::now();
                        let inputs = assemble_inputs(
                            cfg,
                            train_ds,
                            &train_targets,
                            chunk,
                            Some((seed, epoch)),
                        );
                        t_asm.fetch_add(t0.elapsed().as_micros() as u64, std::sync::atomic::Ordering::Relaxed);
                        let t1 = Instant::now();
                        let r = chunk_gradients(&model, inputs, batch_idx.len());
                        t_grad.fetch_add(t1.elapsed().as_micros() as u64, std::sync::atomic::Ordering::Relaxed);
                        r
                    })
                    .collect()
            });
            if std::env::var_os("CCA_TIME").is_some() {
                eprintln!("step {step}: assemble {:.0}ms grad {:.0}ms (cpu-summed)",
                    t_asm.load(std::sync::atomic::Ordering::Relaxed) as f64 / 1e3,
                    t_grad.load(std::sync::atomic::Ordering::Relaxed) as f64 / 1e3);
            }
            let t_reduce = Instant::now();
            let chunk_results = chunk_results?;
            let mut batch_loss = 0.0f64;
            let mut grads: Vec<Vec<f32>> = model
                .named_tensors()
                .iter()
                .map(|(_, t)| vec![0.0f32; t.numel()])
                .collect();
            for (chunk_loss, chunk_grads) in chunk_results {
                batch_loss += chunk_loss;
                for (acc, g) in grads.iter_mut().zip(chunk_grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(DdnError::NanLoss { epoch, step });
            }
            let mut params = model.tensors_mut();
            adam_step_refs(&mut params, &grads, &mut adam, &hp);
            if opts.validate_params {
                for t in model.named_tensors().iter().map(|(_, t)| *t) {
                    if t.values.iter().any(|v| !v.is_finite()) {
                        return Err(DdnError::NanLoss { epoch, step });
                    }
                }
            }
            if std::env::var_os("CCA_TIME").is_some() {
                eprintln!("step {step}: reduce+adam {:.0}ms", t_reduce.elapsed().as_secs_f64() * 1e3);
            }
            epoch_loss += batch_loss;
        }
        let steps = full_batches.max(1) as f64;
        let train_loss = epoch_loss / steps;

        let t_eval = Instant::now();
        let preds = pool.install(|| batched_predict(&model, &test_ds.samples))?;
        if std::env::var_os("CCA_TIME").is_some() {
            eprintln!("epoch {epoch}: eval {:.0}ms", t_eval.elapsed().as_secs_f64() * 1e3);
        }
        let (mut mae, mut acc) = (0.0f64, 0.0f64);
        for (p, &t) in preds.iter().zip(&test_targets) {
            let err = (p.blur.px - t as f64).abs();
            mae += err;
            if err < cfg.acc_tau_px {
                acc += 1.0;
            }
        }
        let count = preds.len().max(1) as f64;
        let test_mae_px = mae / count;
        let test_acc = acc / count;
        if test_mae_px < best_test_mae {
            best_test_mae = test_mae_px;
            best_model = model.clone();
            best_epoch = epoch;
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            test_mae_px,
            test_acc,
            wall_s: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainResult {
        model,
        best_model,
        best_epoch,
        best_test_mae,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ToolConfig;
    use crate::render::{Dataset, PatchSample};

    fn synthetic_dataset(n: usize, side: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let planes: Vec<f32> = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
                let distance: f32 = 1100.0 + 1300.0 * rng.random::<f32>();
                PatchSample {
                    side,
                    planes,
                    pos: (
                        rng.random::<f32>() * 2.0 - 1.0,
                        rng.random::<f32>() * 2.0 - 1.0,
                    ),
                    distance_mm: distance,
                    blur_px: 0.0,
                }
            })
            .collect();
        Dataset { side, samples }
    }

    fn tiny_cfg() -> DdnConfig {
        DdnConfig {
            channels: 8,
            resblocks: 1,
            batch: 4,
            epochs: 2,
            augment: true,
            ..DdnConfig::default()
        }
    }

    #[test]
    fn one_sample_memorization_under_l1() {
        // a single repeated sample must be memorized within 200 steps; the
        // L1 gradient is a sign, so ADAM hovers around zero error at lr
        // scale — the achieved (minimum) loss is the memorization evidence
        let lens = LensConfig::reference();
        let mut ds = synthetic_dataset(1, 20, 3);
        ds.samples[0].distance_mm = 1200.0;
        let cfg = DdnConfig {
            loss: crate::config::LossKind::L1,
            epochs: 200,
            batch: 1,
            augment: false,
            lr: 3e-3,
            channels: 8,
            resblocks: 1,
            ..DdnConfig::default()
        };
        let result = train(&cfg, &ds, &ds, &lens, 11, &TrainOptions::default()).unwrap();
        let achieved = result
            .log
            .iter()
            .map(|e| e.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(achieved < 0.01, "achieved loss {achieved}");
    }

    #[test]
    fn training_is_deterministic_across_runs_and_workers() {
        let lens = LensConfig::reference();
        let train_ds = synthetic_dataset(24, 20, 5);
        let test_ds = synthetic_dataset(8, 16, 6);
        let cfg = tiny_cfg();
        let run = |workers: usize| {
            train(
                &cfg,
                &train_ds,
                &test_ds,
                &lens,
                77,
                &TrainOptions {
                    workers,
                    ..TrainOptions::default()
                },
            )
            .unwrap()
        };
        let a = run(1);
        let b = run(1);
        let c = run(2);
        for (x, y) in a.log.iter().zip(&b.log) {
            assert!(x.same_metrics(y));
        }
        for (x, y) in a.log.iter().zip(&c.log) {
            assert!(x.same_metrics(y), "worker-count dependence detected");
        }
        for ((_, ta), (_, tb)) in a
            .model
            .named_tensors()
            .iter()
            .zip(b.model.named_tensors().iter())
        {
            assert_eq!(ta.values.len(), tb.values.len());
            for (u, v) in ta.values.iter().zip(&tb.values) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn nan_label_aborts_with_diagnostic() {
        let lens = LensConfig::reference();
        let mut ds = synthetic_dataset(4, 16, 9);
        ds.samples[2].blur_px = f32::NAN;
        let cfg = DdnConfig {
            augment: false,
            ..tiny_cfg()
        };
        let err = train(
            &cfg,
            &ds,
            &ds,
            &lens,
            1,
            &TrainOptions {
                target_source: TargetSource::StoredBlur,
                ..TrainOptions::default()
            },
        );
        assert!(matches!(err, Err(DdnError::NanLoss { .. })));
    }

    #[test]
    fn csv_log_has_expected_columns() {
        let log = vec![EpochLog {
            epoch: 0,
            train_loss: 1.5,
            test_mae_px: 2.25,
            test_acc: 0.125,
            wall_s: 3.0,
        }];
        let csv = epoch_log_csv(&log);
        assert!(csv.starts_with("epoch,train_loss,test_mae_px,test_acc,wall_s\n"));
        assert!(csv.contains("0,1.500000,2.250000,0.125000,"));
    }

    #[test]
    fn undersized_patches_are_rejected() {
        let lens = LensConfig::reference();
        let ds = synthetic_dataset(4, 8, 9);
        let cfg = tiny_cfg();
        assert!(matches!(
            train(&cfg, &ds, &ds, &lens, 1, &TrainOptions::default()),
            Err(DdnError::PatchSide { found: 8, need: 16 })
        ));
    }

    #[test]
    fn config_from_tool_matches_defaults() {
        let cfg = DdnConfig::from_tool(&ToolConfig::default());
        assert_eq!(cfg.patch_side, 16);
        assert_eq!(cfg.channels, 32);
        assert_eq!(cfg.resblocks, 5);
        assert_eq!(cfg.batch, 128);
        assert!(cfg.positional && cfg.color);
    }
}

