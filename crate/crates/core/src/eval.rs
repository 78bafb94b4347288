//! Metrics, the ablation harness, and loss-stability statistics.
//!
//! Errors are always measured against the ideal-lens blur implied by the
//! ground-truth distance (and its distance equivalent): that is the quantity
//! a depth estimator owes the user, whatever the rendering aberrations did.

use std::fmt::Write as _;

use thiserror::Error;

use crate::config::{InputMode, LossKind, ToolConfig};
use crate::ddn::{batched_predict, train, DdnConfig, DdnError, DdnModel, TrainOptions};
use crate::dfad::{DfadError, DfadSearcher, BlurSearchSpec, DFAD_WINDOW};
use crate::optics::{distance_from_blur, LensConfig, SignedBlur};
use crate::render::{Dataset, DatasetManifest, PatchSample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("estimator and dataset lens configs differ: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Ddn(#[from] DdnError),
    #[error(transparent)]
    Dfad(#[from] DfadError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One estimate for one sample; `None` means the estimator declared no cue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub blur_px: f64,
    pub sigma: Option<f64>,
}

/// Anything that maps patches to signed blur.
pub trait BlurEstimator: Sync {
    fn name(&self) -> &str;
    fn estimate_batch(&self, samples: &[PatchSample]) -> Result<Vec<Option<Estimate>>, EvalError>;
}

/// Test oracle: returns a caller-supplied function of the sample.
pub struct OracleEstimator<F: Fn(&PatchSample) -> f64 + Sync> {
    pub f: F,
}

impl<F: Fn(&PatchSample) -> f64 + Sync> BlurEstimator for OracleEstimator<F> {
    fn name(&self) -> &str {
        "oracle"
    }
    fn estimate_batch(&self, samples: &[PatchSample]) -> Result<Vec<Option<Estimate>>, EvalError> {
        Ok(samples
            .iter()
            .map(|s| {
                Some(Estimate {
                    blur_px: (self.f)(s),
                    sigma: None,
                })
            })
            .collect())
    }
}

pub struct DdnEstimator<'a> {
    pub model: &'a DdnModel<f32>,
}

impl BlurEstimator for DdnEstimator<'_> {
    fn name(&self) -> &str {
        "ddn"
    }
    fn estimate_batch(&self, samples: &[PatchSample]) -> Result<Vec<Option<Estimate>>, EvalError> {
        let preds = batched_predict(self.model, samples)?;
        Ok(preds
            .into_iter()
            .map(|p| {
                Some(Estimate {
                    blur_px: p.blur.px,
                    sigma: Some(p.sigma),
                })
            })
            .collect())
    }
}

pub struct DfadEstimator {
    searcher: DfadSearcher,
    tau_g: f64,
}

impl DfadEstimator {
    pub fn new(lens: &LensConfig, spec: BlurSearchSpec, tau_g: f64) -> Result<Self, EvalError> {
        Ok(Self {
            searcher: DfadSearcher::new(lens, spec)?,
            tau_g,
        })
    }
}

impl BlurEstimator for DfadEstimator {
    fn name(&self) -> &str {
        "dfad"
    }
    fn estimate_batch(&self, samples: &[PatchSample]) -> Result<Vec<Option<Estimate>>, EvalError> {
        use rayon::prelude::*;
        let results: Vec<Option<Estimate>> = samples
            .par_iter()
            .map(|s| {
                // center 16x16 window in f64
                let side = s.side;
                let w = DFAD_WINDOW.min(side);
                let off = (side - w) / 2;
                let mut planes = Vec::with_capacity(3 * w * w);
                for c in 0..3 {
                    for y in 0..w {
                        for x in 0..w {
                            planes
                                .push(s.planes[c * side * side + (y + off) * side + x + off] as f64);
                        }
                    }
                }
                match self.searcher.estimate(&planes, w, self.tau_g) {
                    Ok((b, _cost)) => Some(Estimate {
                        blur_px: b.px,
                        sigma: None,
                    }),
                    Err(_) => None,
                }
            })
            .collect();
        Ok(results)
    }
}

/// Aggregated per-bin statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub distance_mm: f64,
    pub n: usize,
    pub mae_px: f64,
    pub mae_mm: f64,
}

/// Full evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub estimator: String,
    pub n_samples: usize,
    pub n_evaluated: usize,
    pub masked_fraction: f64,
    pub mae_px: f64,
    pub mae_mm: f64,
    /// Fraction of evaluated samples with |error| below the threshold.
    pub acc_within_tau: f64,
    pub acc_tau_px: f64,
    /// Radial split at r = 0.5 of the normalized sensor radius.
    pub center_mae_px: f64,
    pub periphery_mae_px: f64,
    pub center_n: usize,
    pub periphery_n: usize,
    pub bins: Vec<BinStats>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# estimator={}", self.estimator);
        let _ = writeln!(
            out,
            "summary,n,{},evaluated,{},masked_fraction,{:.6},mae_px,{:.6},mae_mm,{:.6},acc@{:.3}px,{:.6},center_mae_px,{:.6},periphery_mae_px,{:.6}",
            self.n_samples,
            self.n_evaluated,
            self.masked_fraction,
            self.mae_px,
            self.mae_mm,
            self.acc_tau_px,
            self.acc_within_tau,
            self.center_mae_px,
            self.periphery_mae_px
        );
        let _ = writeln!(out, "distance_mm,n,mae_px,mae_mm");
        for b in &self.bins {
            let _ = writeln!(
                out,
                "{:.3},{},{:.6},{:.6}",
                b.distance_mm, b.n, b.mae_px, b.mae_mm
            );
        }
        out
    }
}

/// Lens fields of the dataset manifest must match the evaluation lens.
pub fn check_lens_match(manifest: &DatasetManifest, lens: &LensConfig) -> Result<(), EvalError> {
    let cfg = ToolConfig::from_text(&manifest.config_snapshot)
        .map_err(|e| EvalError::ConfigMismatch(format!("manifest snapshot: {e}")))?;
    let mlens = cfg
        .lens()
        .map_err(|e| EvalError::ConfigMismatch(e.to_string()))?;
    if mlens != *lens {
        return Err(EvalError::ConfigMismatch(format!(
            "dataset lens {mlens:?} vs estimator lens {lens:?}"
        )));
    }
    Ok(())
}

/// Run an estimator over a dataset and aggregate by distance bin and by
/// radial band (r < 0.5 vs r >= 0.5).
pub fn evaluate(
    estimator: &dyn BlurEstimator,
    ds: &Dataset,
    lens: &LensConfig,
    acc_tau_px: f64,
) -> Result<MetricsReport, EvalError> {
    if ds.samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let estimates = estimator.estimate_batch(&ds.samples)?;

    // sums run over canonically sorted values so the report is exactly
    // permutation-invariant despite float rounding
    fn sorted_mean(mut v: Vec<f64>) -> f64 {
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        v.iter().sum::<f64>() / n
    }

    struct Record {
        err_px: f64,
        err_mm: f64,
        radius: f64,
        distance_mm: f64,
    }
    let mut records: Vec<Record> = Vec::new();
    for (sample, est) in ds.samples.iter().zip(&estimates) {
        let Some(est) = est else {
            continue;
        };
        let target = sample.ideal_blur_px(lens);
        let clamped = est.blur_px.clamp(-12.0, 12.0);
        let est_mm =
            distance_from_blur(lens, SignedBlur::new(clamped)).unwrap_or(lens.focus_distance_mm);
        records.push(Record {
            err_px: (est.blur_px - target).abs(),
            err_mm: (est_mm - sample.distance_mm as f64).abs(),
            radius: sample.radius(),
            distance_mm: sample.distance_mm as f64,
        });
    }
    let n_evaluated = records.len();
    if n_evaluated == 0 {
        return Err(EvalError::EmptyDataset);
    }
    let acc = records.iter().filter(|r| r.err_px < acc_tau_px).count();
    let center: Vec<f64> = records
        .iter()
        .filter(|r| r.radius < 0.5)
        .map(|r| r.err_px)
        .collect();
    let periphery: Vec<f64> = records
        .iter()
        .filter(|r| r.radius >= 0.5)
        .map(|r| r.err_px)
        .collect();
    let mut keys: Vec<f64> = Vec::new();
    for r in &records {
        if !keys.iter().any(|k| (k - r.distance_mm).abs() < 1e-6) {
            keys.push(r.distance_mm);
        }
    }
    keys.sort_by(f64::total_cmp);
    let bins = keys
        .into_iter()
        .map(|key| {
            let px: Vec<f64> = records
                .iter()
                .filter(|r| (r.distance_mm - key).abs() < 1e-6)
                .map(|r| r.err_px)
                .collect();
            let mm: Vec<f64> = records
                .iter()
                .filter(|r| (r.distance_mm - key).abs() < 1e-6)
                .map(|r| r.err_mm)
                .collect();
            BinStats {
                distance_mm: key,
                n: px.len(),
                mae_px: sorted_mean(px),
                mae_mm: sorted_mean(mm),
            }
        })
        .collect();
    Ok(MetricsReport {
        estimator: estimator.name().to_string(),
        n_samples: ds.samples.len(),
        n_evaluated,
        masked_fraction: 1.0 - n_evaluated as f64 / ds.samples.len() as f64,
        mae_px: sorted_mean(records.iter().map(|r| r.err_px).collect()),
        mae_mm: sorted_mean(records.iter().map(|r| r.err_mm).collect()),
        acc_within_tau: acc as f64 / n_evaluated as f64,
        acc_tau_px,
        center_n: center.len(),
        periphery_n: periphery.len(),
        center_mae_px: sorted_mean(center),
        periphery_mae_px: sorted_mean(periphery),
        bins,
    })
}

/// The blur-space equivalent of a distance tolerance at a given distance
/// (used to echo millimeter accuracy thresholds in pixels).
pub fn blur_tolerance_px(lens: &LensConfig, at_mm: f64, tol_mm: f64) -> f64 {
    let ab = crate::optics::AberrationField::ideal();
    let b0 = crate::optics::blur_from_distance(lens, at_mm - tol_mm, crate::optics::SensorPos::CENTER, &ab)
        .map(|b| b.px)
        .unwrap_or(0.0);
    let b1 = crate::optics::blur_from_distance(lens, at_mm + tol_mm, crate::optics::SensorPos::CENTER, &ab)
        .map(|b| b.px)
        .unwrap_or(0.0);
    ((b0 - b1) / 2.0).abs()
}

// ---------------------------------------------------------------------------
// ablation suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub status: String,
    pub test_mae_px: f64,
    pub center_mae_px: f64,
    pub periphery_mae_px: f64,
    pub acc_within_tau: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,status,test_mae_px,center_mae_px,periphery_mae_px,acc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.variant, r.status, r.test_mae_px, r.center_mae_px, r.periphery_mae_px, r.acc_within_tau
        );
    }
    out
}

/// The five standard variants, trained and evaluated on a fixed dataset
/// pair with the identical seed. A variant whose training aborts is
/// recorded as failed and the suite continues.
pub fn ablation_suite(
    base: &ToolConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    lens: &LensConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Vec<AblationRow> {
    let variants: Vec<(&str, DdnConfig)> = vec![
        ("full", DdnConfig::from_tool(base)),
        ("no_positional", {
            let mut c = DdnConfig::from_tool(base);
            c.positional = false;
            c
        }),
        ("no_color", {
            let mut c = DdnConfig::from_tool(base);
            c.color = false;
            c
        }),
        ("raw_input", {
            let mut c = DdnConfig::from_tool(base);
            c.input_mode = InputMode::Raw;
            c
        }),
        ("l1_loss", {
            let mut c = DdnConfig::from_tool(base);
            c.loss = LossKind::L1;
            c
        }),
    ];
    variants
        .into_iter()
        .map(|(name, cfg)| match train(&cfg, train_ds, test_ds, lens, seed, opts) {
            Ok(result) => {
                let est = DdnEstimator {
                    model: &result.best_model,
                };
                match evaluate(&est, test_ds, lens, cfg.acc_tau_px) {
                    Ok(report) => AblationRow {
                        variant: name.to_string(),
                        status: "ok".to_string(),
                        test_mae_px: report.mae_px,
                        center_mae_px: report.center_mae_px,
                        periphery_mae_px: report.periphery_mae_px,
                        acc_within_tau: report.acc_within_tau,
                    },
                    Err(e) => AblationRow {
                        variant: name.to_string(),
                        status: format!("eval_failed:{e}"),
                        test_mae_px: f64::NAN,
                        center_mae_px: f64::NAN,
                        periphery_mae_px: f64::NAN,
                        acc_within_tau: f64::NAN,
                    },
                }
            }
            Err(e) => AblationRow {
                variant: name.to_string(),
                status: format!("train_failed:{e}"),
                test_mae_px: f64::NAN,
                center_mae_px: f64::NAN,
                periphery_mae_px: f64::NAN,
                acc_within_tau: f64::NAN,
            },
        })
        .collect()
}

// ---------------------------------------------------------------------------
// loss stability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeStats {
    pub max: f64,
    pub median: f64,
    /// max / median
    pub ratio: f64,
    /// epochs whose loss exceeds 10x the median
    pub epochs_over_10x: usize,
}

/// Spike statistics of a per-epoch loss sequence. Any non-finite entry
/// makes the ratio infinite.
pub fn spike_stats(losses: &[f64]) -> SpikeStats {
    assert!(!losses.is_empty());
    if losses.iter().any(|v| !v.is_finite()) {
        return SpikeStats {
            max: f64::INFINITY,
            median: f64::NAN,
            ratio: f64::INFINITY,
            epochs_over_10x: losses.len(),
        };
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let max = *sorted.last().unwrap();
    let ratio = if median != 0.0 { max / median } else { f64::INFINITY };
    SpikeStats {
        max,
        median,
        ratio,
        epochs_over_10x: losses.iter().filter(|&&v| v > 10.0 * median).count(),
    }
}

/// Comparison of the two heteroscedastic losses on identical data/seeds.
#[derive(Debug, Clone)]
pub struct LossStabilityReport {
    pub bayes_l1: SpikeStats,
    /// None when the variance-loss run aborted on a non-finite loss.
    pub bayes_l2: Option<SpikeStats>,
    pub l2_aborted: bool,
    /// Epochs excluded from the front of each sequence (shared descent
    /// transient).
    pub warmup_excluded: usize,
}

pub fn loss_stability_report(
    bayes_l1_losses: &[f64],
    bayes_l2_losses: Option<&[f64]>,
    warmup: usize,
) -> LossStabilityReport {
    let slice = |v: &[f64]| -> Vec<f64> {
        let w = warmup.min(v.len().saturating_sub(1));
        v[w..].to_vec()
    };
    LossStabilityReport {
        bayes_l1: spike_stats(&slice(bayes_l1_losses)),
        bayes_l2: bayes_l2_losses.map(|v| spike_stats(&slice(v))),
        l2_aborted: bayes_l2_losses.is_none(),
        warmup_excluded: warmup,
    }
}

impl LossStabilityReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "warmup_excluded={}", self.warmup_excluded);
        let _ = writeln!(
            out,
            "bayes_l1 max={:.6} median={:.6} ratio={:.3} over10x={}",
            self.bayes_l1.max, self.bayes_l1.median, self.bayes_l1.ratio, self.bayes_l1.epochs_over_10x
        );
        match &self.bayes_l2 {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "bayes_l2 max={:.6} median={:.6} ratio={:.3} over10x={}",
                    s.max, s.median, s.ratio, s.epochs_over_10x
                );
            }
            None => {
                let _ = writeln!(out, "bayes_l2 aborted=non_finite_loss");
            }
        }
        out
    }
}
