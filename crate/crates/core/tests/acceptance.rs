//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its key numbers (run with `-- --nocapture` to see them).
//!
//! The heavyweight fixtures — the aberrated dataset and the three trained
//! models — are built once and shared across criteria through `LazyLock`.
//! Every tolerance is pinned here, in code.

use std::sync::LazyLock;
use std::time::Instant;

use ccadepth_core::autograd::gradcheck::{check_all_ops, PER_OP_TOLERANCE};
use ccadepth_core::config::{LossKind, SigmaParam, ToolConfig};
use ccadepth_core::ddn::gradcheck::{gradcheck_full, FULL_GRAPH_TOLERANCE};
use ccadepth_core::ddn::{
    self, batched_predict, predict_depth_map, sample_bayes_l1, DdnConfig, DdnError, DdnModel,
    TargetSource, TrainOptions,
};
use ccadepth_core::dfad::{
    dfad_cost, render_patch_wrap, BlurSearchSpec, DfadSearcher,
};
use ccadepth_core::eval::{evaluate, spike_stats, DdnEstimator, OracleEstimator};
use ccadepth_core::optics::{
    blur_from_distance, distance_from_blur, psf, AberrationField, Channel, LensConfig, SensorPos,
    SignedBlur,
};
use ccadepth_core::render::{
    build_split, perturb_labels, procedural_texture, render_flat, Dataset, PatchSample,
    RenderParams, Split, TextureFlavor,
};

/// Frozen seed for the whole suite.
const SEED: u64 = 20240;
/// Training epochs for the shared full / no-positional / no-color models
/// (the criterion allows up to 60).
const EPOCHS: usize = 12;
/// Desk-scale learning rate (see the training-log commentary in the README).
const LR: f64 = 3e-3;
const WORKERS: usize = 2;

/// The aberrated acceptance configuration: strong field curvature plus
/// moderate coma and lateral chromatic scaling.
fn aberrated_config() -> ToolConfig {
    ToolConfig {
        fc_coeff: 2.0,
        coma_coeff: 0.3,
        chroma_r: 1.003,
        chroma_b: 0.997,
        epochs: EPOCHS,
        lr: LR,
        test_textures: 5,
        ..ToolConfig::default()
    }
}

struct Fixture {
    cfg: ToolConfig,
    lens: LensConfig,
    train: Dataset,
    test: Dataset,
}

static DATASET: LazyLock<Fixture> = LazyLock::new(|| {
    let cfg = aberrated_config();
    let lens = cfg.lens().expect("valid lens");
    let (train, train_manifest) = build_split(&cfg, Split::Train, SEED).expect("train split");
    let (test, _) = build_split(&cfg, Split::Test, SEED).expect("test split");
    eprintln!(
        "[acceptance] dataset ready: {} train / {} test samples over {} distances",
        train.samples.len(),
        test.samples.len(),
        train_manifest.distances.len()
    );
    Fixture {
        cfg,
        lens,
        train,
        test,
    }
});

struct Trained {
    full: DdnModel<f32>,
    no_positional: DdnModel<f32>,
    no_color: DdnModel<f32>,
}

static TRAINED: LazyLock<Trained> = LazyLock::new(|| {
    let fx = &*DATASET;
    let opts = TrainOptions {
        workers: WORKERS,
        target_source: TargetSource::IdealFromDistance,
        validate_params: true,
    };
    let train_one = |label: &str, mutate: &dyn Fn(&mut DdnConfig)| {
        let mut cfg = DdnConfig::from_tool(&fx.cfg);
        mutate(&mut cfg);
        let started = Instant::now();
        let result =
            ddn::train(&cfg, &fx.train, &fx.test, &fx.lens, SEED, &opts).expect("training");
        eprintln!(
            "[acceptance] trained {label}: best test MAE {:.4} px (epoch {}) in {:.0}s",
            result.best_test_mae,
            result.best_epoch,
            started.elapsed().as_secs_f64()
        );
        result.best_model
    };
    Trained {
        full: train_one("full", &|_| {}),
        no_positional: train_one("no_positional", &|c| c.positional = false),
        no_color: train_one("no_color", &|c| c.color = false),
    }
});

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_autograd_correctness() {
    let started = Instant::now();
    let checks = check_all_ops(SEED);
    let mut worst_op = 0.0f64;
    for c in &checks {
        assert!(
            c.passed(),
            "op {} failed: max rel err {}",
            c.name,
            c.max_rel_err
        );
        worst_op = worst_op.max(c.max_rel_err);
    }
    let full = gradcheck_full(&DdnConfig::default(), SEED, 10).expect("full-graph check");
    assert!(
        full < FULL_GRAPH_TOLERANCE,
        "full graph rel err {full} >= {FULL_GRAPH_TOLERANCE}"
    );
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "gradcheck took {elapsed:?}, budget is one minute"
    );
    println!(
        "[acceptance] criterion 1 (autograd correctness): PASS — {} ops worst {:.2e} (< {PER_OP_TOLERANCE}), full graph {:.2e} (< {FULL_GRAPH_TOLERANCE}), {:.1}s",
        checks.len(),
        worst_op,
        full,
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_2_optics_self_consistency() {
    let started = Instant::now();
    let lens = LensConfig::reference();
    let ab = AberrationField::ideal();

    // PSF normalization and mirror symmetry over a blur grid
    let mut b = -12.0;
    while b <= 12.0 {
        let blur = SignedBlur::new(b);
        for c in Channel::ALL {
            let k = psf(&lens, blur, c, SensorPos::CENTER, &ab);
            assert!(
                (k.sum() - 1.0).abs() < 1e-9,
                "kernel sum {} at b={b} {c:?}",
                k.sum()
            );
        }
        let r = psf(&lens, blur, Channel::R, SensorPos::CENTER, &ab);
        let bl = psf(&lens, blur, Channel::B, SensorPos::CENTER, &ab);
        let rm = r.mirror_x();
        assert_eq!(rm.side, bl.side);
        for (a, e) in rm.taps.iter().zip(&bl.taps) {
            assert!((a - e).abs() < 1e-12, "mirror asymmetry at b={b}");
        }
        b += 0.75;
    }

    // distance <-> blur round trip over 100 distances
    for i in 0..100 {
        let u = 1100.0 + (2400.0 - 1100.0) * i as f64 / 99.0;
        let blur = blur_from_distance(&lens, u, SensorPos::CENTER, &ab).unwrap();
        let back = distance_from_blur(&lens, blur).unwrap();
        assert!(
            ((back - u) / u).abs() < 1e-6,
            "round trip {u} -> {} -> {back}",
            blur.px
        );
    }

    // independent thin-lens oracle for the anchor value at 1100 mm
    let f = 50.0f64;
    let n = 4.0;
    let u_f = 1500.0;
    let u = 1100.0;
    let v = 1.0 / (1.0 / f - 1.0 / u);
    let v_f = 1.0 / (1.0 / f - 1.0 / u_f);
    let oracle_px = (f / n) / 2.0 * (v - v_f).abs() / v / 0.01;
    let got = blur_from_distance(&lens, u, SensorPos::CENTER, &ab).unwrap();
    assert!((got.px - oracle_px).abs() < 1e-9);
    assert!(
        (got.px - 7.84).abs() < 0.01,
        "anchor blur {} px vs 7.84",
        got.px
    );
    assert!(got.px > 0.0);
    println!(
        "[acceptance] criterion 2 (optics self-consistency): PASS — anchor {:.4} px, round trip < 1e-6, {:.2}s",
        got.px,
        started.elapsed().as_secs_f64()
    );
}

/// Tinted-gray toroidal texture: channels are positive-affine in one
/// luminance, the regime where DfAD's correlations are exact.
fn tinted_texture(seed: u64, side: usize) -> Vec<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let gains = [
        0.5 + 0.5 * rng.random::<f64>(),
        0.5 + 0.5 * rng.random::<f64>(),
        0.5 + 0.5 * rng.random::<f64>(),
    ];
    let offsets = [
        0.2 * rng.random::<f64>(),
        0.2 * rng.random::<f64>(),
        0.2 * rng.random::<f64>(),
    ];
    let cells = 4usize;
    let cell_px = side / cells;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
    let mut planes = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let cell = (y / cell_px).min(cells - 1) * cells + (x / cell_px).min(cells - 1);
            for c in 0..3 {
                planes[c * side * side + y * side + x] = gains[c] * lattice[cell] + offsets[c];
            }
        }
    }
    planes
}

#[test]
fn criterion_3_dfad_exactness_on_ideal_lens() {
    use rayon::prelude::*;
    let started = Instant::now();
    let lens = LensConfig::reference();
    let searcher = DfadSearcher::new(&lens, BlurSearchSpec::default()).unwrap();
    let blurs = [-8.0, -6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0, 8.0];
    let cases: Vec<(f64, u64)> = blurs
        .iter()
        .flat_map(|&b| (0..20u64).map(move |t| (b, t)))
        .collect();
    let results: Vec<(f64, f64, f64)> = cases
        .par_iter()
        .map(|&(b_true, tex_seed)| {
            let tex = tinted_texture(9000 + tex_seed, 16);
            let patch = render_patch_wrap(&tex, 16, SignedBlur::new(b_true), &lens);
            let cost_at_truth = dfad_cost(&patch, 16, SignedBlur::new(b_true), &lens);
            let (b_hat, _) = searcher.estimate(&patch, 16, 0.0).expect("estimate");
            (b_true, b_hat.px, cost_at_truth)
        })
        .collect();
    let mut worst = 0.0f64;
    for (b_true, b_hat, cost) in &results {
        assert!(
            (b_hat - b_true).abs() <= 0.25,
            "estimate {b_hat} for true blur {b_true}"
        );
        assert!(*cost < 1e-6, "cost {cost} at true blur {b_true}");
        worst = worst.max((b_hat - b_true).abs());
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 2 min");
    println!(
        "[acceptance] criterion 3 (DfAD exactness, ideal lens): PASS — {} cases, worst |error| {:.3} px (<= 0.25), {:.1}s",
        results.len(),
        worst,
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_4_dfad_aberration_failure_direction() {
    use rayon::prelude::*;
    let started = Instant::now();
    let fx = &*DATASET;
    // grayscale-texture samples isolate the aberration failure from color
    // confusion; flavors cycle by distance so pick those distances
    let gray_samples: Vec<&PatchSample> = {
        let grid = ccadepth_core::render::blur_spaced_distances(
            &fx.lens,
            fx.cfg.near_mm,
            fx.cfg.far_mm,
            fx.cfg.distance_count,
        )
        .unwrap();
        let gray_distances: Vec<f64> = grid
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let flavor = TextureFlavor::CYCLE[(*i % fx.cfg.test_textures) % TextureFlavor::CYCLE.len()];
                flavor == TextureFlavor::MosaicGray
            })
            .map(|(_, &(u, _))| u)
            .collect();
        fx.test
            .samples
            .iter()
            .filter(|s| {
                gray_distances
                    .iter()
                    .any(|&u| (s.distance_mm as f64 - u).abs() < 1e-3)
            })
            .collect()
    };
    assert!(
        gray_samples.len() >= 100,
        "need grayscale samples, found {}",
        gray_samples.len()
    );
    let searcher = DfadSearcher::new(&fx.lens, BlurSearchSpec::default()).unwrap();
    let errors: Vec<(f64, f64)> = gray_samples
        .par_iter()
        .filter_map(|s| {
            let planes: Vec<f64> = s.planes.iter().map(|&v| v as f64).collect();
            let (b_hat, _) = searcher.estimate(&planes, s.side, 0.0).ok()?;
            let target = s.ideal_blur_px(&fx.lens);
            Some((s.radius(), (b_hat.px - target).abs()))
        })
        .collect();
    let center: Vec<f64> = errors
        .iter()
        .filter(|(r, _)| *r < 0.5)
        .map(|(_, e)| *e)
        .collect();
    let periphery: Vec<f64> = errors
        .iter()
        .filter(|(r, _)| *r >= 0.5)
        .map(|(_, e)| *e)
        .collect();
    assert!(center.len() >= 20, "center samples {}", center.len());
    assert!(periphery.len() >= 20, "periphery samples {}", periphery.len());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let center_mae = mean(&center);
    let periphery_mae = mean(&periphery);
    let elapsed = started.elapsed();
    assert!(
        periphery_mae >= 2.0 * center_mae,
        "periphery {periphery_mae:.3} px vs center {center_mae:.3} px: ratio {:.2} < 2",
        periphery_mae / center_mae
    );
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}, budget 5 min");
    println!(
        "[acceptance] criterion 4 (DfAD aberration failure): PASS — center {:.3} px, periphery {:.3} px, ratio {:.2}x (>= 2x), {:.0}s",
        center_mae,
        periphery_mae,
        periphery_mae / center_mae,
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_5_positional_branch_benefit() {
    let fx = &*DATASET;
    let models = &*TRAINED;
    let full = evaluate(
        &DdnEstimator { model: &models.full },
        &fx.test,
        &fx.lens,
        fx.cfg.acc_tau_px,
    )
    .unwrap();
    let no_pos = evaluate(
        &DdnEstimator {
            model: &models.no_positional,
        },
        &fx.test,
        &fx.lens,
        fx.cfg.acc_tau_px,
    )
    .unwrap();
    let gap = (no_pos.periphery_mae_px - full.periphery_mae_px) / no_pos.periphery_mae_px;
    assert!(
        gap >= 0.20,
        "peripheral MAE: full {:.4} px vs no-positional {:.4} px — improvement {:.1}% < 20%",
        full.periphery_mae_px,
        no_pos.periphery_mae_px,
        gap * 100.0
    );
    println!(
        "[acceptance] criterion 5 (positional branch): PASS — peripheral MAE full {:.4} px vs no-positional {:.4} px ({:.1}% better, >= 20%)",
        full.periphery_mae_px,
        no_pos.periphery_mae_px,
        gap * 100.0
    );
}

fn mean_saturation(s: &PatchSample) -> f64 {
    let area = s.side * s.side;
    let mut acc = 0.0;
    for i in 0..area {
        let (_, sat) = ddn::hue_saturation(
            s.planes[i],
            s.planes[area + i],
            s.planes[2 * area + i],
        );
        acc += sat as f64;
    }
    acc / area as f64
}

#[test]
fn criterion_6_color_branch_benefit() {
    let fx = &*DATASET;
    let models = &*TRAINED;
    let saturated: Dataset = Dataset {
        side: fx.test.side,
        samples: fx
            .test
            .samples
            .iter()
            .filter(|s| mean_saturation(s) > 0.5)
            .cloned()
            .collect(),
    };
    let grayscale: Dataset = Dataset {
        side: fx.test.side,
        samples: fx
            .test
            .samples
            .iter()
            .filter(|s| mean_saturation(s) < 0.05)
            .cloned()
            .collect(),
    };
    assert!(
        saturated.samples.len() >= 50,
        "saturated split has {} samples",
        saturated.samples.len()
    );
    assert!(
        grayscale.samples.len() >= 50,
        "grayscale split has {} samples",
        grayscale.samples.len()
    );
    let eval_pair = |ds: &Dataset| {
        let full = evaluate(
            &DdnEstimator { model: &models.full },
            ds,
            &fx.lens,
            fx.cfg.acc_tau_px,
        )
        .unwrap()
        .mae_px;
        let no_color = evaluate(
            &DdnEstimator {
                model: &models.no_color,
            },
            ds,
            &fx.lens,
            fx.cfg.acc_tau_px,
        )
        .unwrap()
        .mae_px;
        (full, no_color)
    };
    let (sat_full, sat_nc) = eval_pair(&saturated);
    let (gray_full, gray_nc) = eval_pair(&grayscale);
    assert!(
        sat_full < sat_nc,
        "saturated split: full {sat_full:.4} px should beat no-color {sat_nc:.4} px"
    );
    let gray_rel = (gray_full - gray_nc).abs() / gray_full.max(gray_nc);
    assert!(
        gray_rel <= 0.10,
        "grayscale split disagrees by {:.1}% (> 10%): full {gray_full:.4} vs no-color {gray_nc:.4}",
        gray_rel * 100.0
    );
    println!(
        "[acceptance] criterion 6 (color branch): PASS — saturated split full {:.4} < no-color {:.4} px; grayscale split within {:.1}% (<= 10%)",
        sat_full,
        sat_nc,
        gray_rel * 100.0
    );
}

#[test]
fn criterion_7_bayes_l1_stability() {
    let started = Instant::now();
    // analytic minimizer property first: argmin_sigma (e/sigma + ln sigma) = e
    for &e in &[0.25, 1.0, 2.0, 5.5] {
        let mut best = (f64::INFINITY, f64::NAN);
        let mut sigma = e * 0.2;
        while sigma <= e * 5.0 {
            let v = sample_bayes_l1(e, sigma);
            if v < best.0 {
                best = (v, sigma);
            }
            sigma += e * 1e-4;
        }
        assert!(
            (best.1 - e).abs() < 1e-3 * e.max(1.0),
            "sigma* {} for e={e}",
            best.1
        );
    }

    // stress dataset: ideal lens, small scale, 10% of labels perturbed
    let stress_cfg = ToolConfig {
        sensor_width: 192,
        sensor_height: 192,
        distance_count: 8,
        patches_per_distance: 64,
        train_textures: 4,
        test_textures: 2,
        batch: 128,
        epochs: 25,
        lr: LR,
        ..ToolConfig::default()
    };
    let lens = stress_cfg.lens().unwrap();
    let (mut stress_train, _) = build_split(&stress_cfg, Split::Train, SEED ^ 7).unwrap();
    let (stress_test, _) = build_split(&stress_cfg, Split::Test, SEED ^ 7).unwrap();
    perturb_labels(&mut stress_train, 0.10, 8.0, SEED ^ 7);

    let opts = TrainOptions {
        workers: WORKERS,
        target_source: TargetSource::StoredBlur,
        validate_params: false,
    };
    let run = |loss: LossKind| -> Result<Vec<f64>, DdnError> {
        let cfg = DdnConfig {
            loss,
            sigma_param: SigmaParam::Raw,
            ..DdnConfig::from_tool(&stress_cfg)
        };
        ddn::train(&cfg, &stress_train, &stress_test, &lens, SEED ^ 7, &opts)
            .map(|r| r.log.iter().map(|e| e.train_loss).collect())
    };

    let l1_losses = run(LossKind::BayesL1).expect("absolute-deviation run must complete");
    let warmup = (stress_cfg.epochs / 5).max(2);
    let l1_stats = spike_stats(&l1_losses[warmup..]);
    assert!(
        l1_stats.ratio < 3.0,
        "absolute-deviation spike ratio {:.2} >= 3 (losses {:?})",
        l1_stats.ratio,
        l1_losses
    );

    let l2_outcome = run(LossKind::BayesL2);
    let l2_desc = match &l2_outcome {
        Err(DdnError::NanLoss { epoch, step }) => {
            format!("aborted non-finite at epoch {epoch} step {step}")
        }
        Err(e) => panic!("unexpected variance-loss failure: {e}"),
        Ok(losses) => {
            let stats = spike_stats(&losses[warmup..]);
            assert!(
                stats.ratio >= 10.0,
                "variance loss neither spiked (ratio {:.2} < 10) nor aborted",
                stats.ratio
            );
            format!("spike ratio {:.1}", stats.ratio)
        }
    };
    println!(
        "[acceptance] criterion 7 (absolute-deviation stability): PASS — stable ratio {:.2} (< 3), variance loss {}, sigma* = |err| to 1e-3, {:.0}s",
        l1_stats.ratio,
        l2_desc,
        started.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_8_reliability_direction() {
    let fx = &*DATASET;
    let models = &*TRAINED;
    // a flat scene with clipped-saturated and well-exposed textured regions
    let scene_cfg = &fx.cfg;
    let texture = procedural_texture(
        scene_cfg.sensor_width,
        scene_cfg.sensor_height,
        TextureFlavor::MosaicSaturated,
        SEED ^ 99,
    );
    let distance = 1300.0;
    let img = render_flat(
        &texture,
        distance,
        &fx.lens,
        &fx.cfg.aberration(),
        &RenderParams {
            block_size: scene_cfg.block_size,
            noise_sigma: scene_cfg.noise_sigma,
        },
        SEED ^ 99,
    )
    .unwrap();
    let map = predict_depth_map(&models.full, &img, &fx.lens, 16, fx.cfg.tau_g, 0.0).unwrap();

    // classify windows by clipping fraction
    let window = map.window;
    let mut saturated_sigma = Vec::new();
    let mut exposed_sigma = Vec::new();
    let mut cells = Vec::new();
    for cy in 0..map.cells_y {
        for cx in 0..map.cells_x {
            let cell = cy * map.cells_x + cx;
            if !map.cue_mask[cell] {
                continue;
            }
            let planes = img.window(cx * map.stride, cy * map.stride, window);
            let clipped = planes.iter().filter(|&&v| v >= 0.995).count() as f64
                / planes.len() as f64;
            let sigma = map.sigma[cell];
            cells.push((cell, sigma));
            if clipped >= 0.25 {
                saturated_sigma.push(sigma);
            } else if clipped < 0.01 {
                exposed_sigma.push(sigma);
            }
        }
    }
    assert!(
        saturated_sigma.len() >= 10 && exposed_sigma.len() >= 10,
        "window classes too small: {} saturated, {} exposed",
        saturated_sigma.len(),
        exposed_sigma.len()
    );
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sat_mean = mean(&saturated_sigma);
    let exp_mean = mean(&exposed_sigma);
    assert!(
        sat_mean > exp_mean,
        "mean |sigma| over saturated windows {sat_mean:.4} must exceed well-exposed {exp_mean:.4}"
    );

    // rejecting high-sigma windows strictly reduces MAE for two thresholds
    let target = blur_from_distance(&fx.lens, distance, SensorPos::CENTER, &AberrationField::ideal())
        .unwrap()
        .px;
    let errors: Vec<(f64, f64)> = cells
        .iter()
        .map(|&(cell, sigma)| (sigma, (map.blur_px[cell] - target).abs()))
        .collect();
    let mae_all = mean(&errors.iter().map(|(_, e)| *e).collect::<Vec<_>>());
    let mut sigmas: Vec<f64> = errors.iter().map(|(s, _)| *s).collect();
    sigmas.sort_by(f64::total_cmp);
    let mut reductions = Vec::new();
    for q in [0.5, 0.75] {
        let threshold = sigmas[(sigmas.len() as f64 * q) as usize];
        let kept: Vec<f64> = errors
            .iter()
            .filter(|(s, _)| *s < threshold)
            .map(|(_, e)| *e)
            .collect();
        assert!(!kept.is_empty());
        let mae_kept = mean(&kept);
        assert!(
            mae_kept < mae_all,
            "threshold at q{q}: retained MAE {mae_kept:.4} !< all {mae_all:.4}"
        );
        reductions.push(mae_all - mae_kept);
    }
    println!(
        "[acceptance] criterion 8 (reliability direction): PASS — mean |sigma| saturated {:.4} > exposed {:.4}; rejection reduces MAE {:.4} -> -{:.4}/-{:.4} px",
        sat_mean, exp_mean, mae_all, reductions[0], reductions[1]
    );
}

#[test]
fn criterion_9_determinism() {
    // render determinism: byte-identical datasets for a fixed seed
    let cfg = ToolConfig {
        sensor_width: 128,
        sensor_height: 128,
        distance_count: 3,
        patches_per_distance: 10,
        train_textures: 2,
        test_textures: 1,
        ..ToolConfig::default()
    };
    let a = build_split(&cfg, Split::Train, 77).unwrap();
    let b = build_split(&cfg, Split::Train, 77).unwrap();
    assert_eq!(a.0, b.0, "datasets differ between identical seeded builds");
    assert_eq!(a.1.to_text(), b.1.to_text());

    // train determinism: bit-identical weights, metrics equal minus wall time
    let lens = cfg.lens().unwrap();
    let tiny = DdnConfig {
        channels: 6,
        resblocks: 1,
        batch: 8,
        epochs: 2,
        lr: LR,
        ..DdnConfig::from_tool(&cfg)
    };
    let opts = TrainOptions {
        workers: 1,
        target_source: TargetSource::IdealFromDistance,
        validate_params: true,
    };
    let r1 = ddn::train(&tiny, &a.0, &a.0, &lens, 13, &opts).unwrap();
    let r2 = ddn::train(&tiny, &a.0, &a.0, &lens, 13, &opts).unwrap();
    for (x, y) in r1.log.iter().zip(&r2.log) {
        assert!(x.same_metrics(y), "epoch logs differ");
    }
    for ((_, ta), (_, tb)) in r1
        .model
        .named_tensors()
        .iter()
        .zip(r2.model.named_tensors().iter())
    {
        for (u, v) in ta.values.iter().zip(&tb.values) {
            assert_eq!(u.to_bits(), v.to_bits(), "weights differ bitwise");
        }
    }

    // eval determinism: byte-identical reports
    let est = OracleEstimator {
        f: |s: &PatchSample| s.blur_px as f64 + 0.25,
    };
    let e1 = evaluate(&est, &a.0, &lens, 0.5).unwrap().to_csv();
    let e2 = evaluate(&est, &a.0, &lens, 0.5).unwrap().to_csv();
    assert_eq!(e1, e2);

    // and prediction determinism on the trained model
    let p1 = batched_predict(&r1.model, &a.0.samples[..4]).unwrap();
    let p2 = batched_predict(&r2.model, &a.0.samples[..4]).unwrap();
    for (x, y) in p1.iter().zip(&p2) {
        assert_eq!(x.blur.px.to_bits(), y.blur.px.to_bits());
    }
    println!(
        "[acceptance] criterion 9 (determinism): PASS — byte-identical renders, bit-identical training, identical reports"
    );
}
