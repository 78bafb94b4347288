//! Subcommand implementations and the error-to-exit-code mapping.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccadepth_core::autograd::checkpoint;
use ccadepth_core::autograd::gradcheck::{check_all_ops, PER_OP_TOLERANCE};
use ccadepth_core::config::{LossKind, RenderMode, SceneKind, SigmaParam, ToolConfig};
use ccadepth_core::ddn::gradcheck::{gradcheck_full, FULL_GRAPH_TOLERANCE};
use ccadepth_core::ddn::{
    self, epoch_log_csv, predict_depth_map, DdnConfig, DdnError, DdnModel, TargetSource,
    TrainOptions,
};
use ccadepth_core::dfad::{
    dfad_depth_map, write_ccaz, write_depth_pgm, BlurSearchSpec, DfadError,
};
use ccadepth_core::eval::{
    ablation_csv, ablation_suite, check_lens_match, evaluate, loss_stability_report, DdnEstimator,
    DfadEstimator, EvalError,
};
use ccadepth_core::image::{write_pgm16, RgbImage};
use ccadepth_core::optics::LensConfig;
use ccadepth_core::render::{
    build_dataset, perturb_labels, procedural_texture, read_dataset, render_flat,
    render_two_plane, Dataset, DatasetManifest, RenderError, RenderParams, TextureFlavor,
};

pub struct Ctx {
    pub cfg: ToolConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    ConfigUnknownKey(String),
    MissingFile(String),
    Io(String),
    ConfigMismatch(String),
    TrainingNan(String),
    GradcheckFailed(String),
    BadArgs(String),
    Other(String),
}

impl CliError {
    fn category(&self) -> (&'static str, u8) {
        match self {
            CliError::ConfigUnknownKey(_) => ("config_unknown_key", 2),
            CliError::Config(_) => ("config", 2),
            CliError::MissingFile(_) => ("missing_file", 3),
            CliError::Io(_) => ("io", 3),
            CliError::ConfigMismatch(_) => ("config_mismatch", 4),
            CliError::TrainingNan(_) => ("training_nan", 5),
            CliError::GradcheckFailed(_) => ("gradcheck_failed", 6),
            CliError::BadArgs(_) => ("bad_args", 7),
            CliError::Other(_) => ("error", 1),
        }
    }

    fn detail(&self) -> &str {
        match self {
            CliError::Config(s)
            | CliError::ConfigUnknownKey(s)
            | CliError::MissingFile(s)
            | CliError::Io(s)
            | CliError::ConfigMismatch(s)
            | CliError::TrainingNan(s)
            | CliError::GradcheckFailed(s)
            | CliError::BadArgs(s)
            | CliError::Other(s) => s,
        }
    }

    pub fn report(&self) -> ExitCode {
        let (category, code) = self.category();
        eprintln!("error: category={category} exit={code} detail={}", self.detail());
        ExitCode::from(code)
    }
}

impl From<ccadepth_core::config::ConfigError> for CliError {
    fn from(e: ccadepth_core::config::ConfigError) -> Self {
        use ccadepth_core::config::ConfigError as C;
        match e {
            C::UnknownKey(k) => CliError::ConfigUnknownKey(k),
            C::Io(io) => io_error(io),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_error(e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::MissingFile(e.to_string())
    } else {
        CliError::Io(e.to_string())
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::Io(io) => io_error(io),
            RenderError::TextureSource(src, detail) => {
                CliError::MissingFile(format!("{src}: {detail}"))
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DfadError> for CliError {
    fn from(e: DfadError) -> Self {
        match e {
            DfadError::Io(io) => io_error(io),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DdnError> for CliError {
    fn from(e: DdnError) -> Self {
        match e {
            DdnError::NanLoss { .. } => CliError::TrainingNan(e.to_string()),
            DdnError::CheckpointMismatch(s) => CliError::ConfigMismatch(s),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ConfigMismatch(s) => CliError::ConfigMismatch(s),
            EvalError::Io(io) => io_error(io),
            EvalError::Ddn(d) => d.into(),
            EvalError::Dfad(d) => d.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ccadepth_core::autograd::AutogradError> for CliError {
    fn from(e: ccadepth_core::autograd::AutogradError) -> Self {
        use ccadepth_core::autograd::AutogradError as A;
        match e {
            A::Io(io) => io_error(io),
            A::Format(s) => CliError::ConfigMismatch(s),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ccadepth_core::image::ImageError> for CliError {
    fn from(e: ccadepth_core::image::ImageError) -> Self {
        match e {
            ccadepth_core::image::ImageError::Io(io) => io_error(io),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ccadepth_core::optics::OpticsError> for CliError {
    fn from(e: ccadepth_core::optics::OpticsError) -> Self {
        CliError::Other(e.to_string())
    }
}

/// Write the resolved config + run parameters into the output directory.
fn write_snapshot(ctx: &Ctx, subcommand: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(&ctx.out).map_err(io_error)?;
    let mut text = String::new();
    text.push_str(&format!("run.subcommand={subcommand}\n"));
    text.push_str(&format!("run.seed={}\n", ctx.seed));
    text.push_str(&format!("run.workers={}\n", ctx.workers));
    text.push_str(&ctx.cfg.snapshot());
    std::fs::write(ctx.out.join("resolved_config.txt"), text).map_err(io_error)?;
    Ok(())
}

fn lens_of(ctx: &Ctx) -> Result<LensConfig, CliError> {
    ctx.cfg.lens().map_err(CliError::from)
}

fn pool(ctx: &Ctx) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers)
        .build()
        .map_err(|e| CliError::Other(e.to_string()))
}

pub fn render(ctx: &Ctx) -> Result<(), CliError> {
    write_snapshot(ctx, "render")?;
    match ctx.cfg.render_mode {
        RenderMode::Dataset => {
            let (train_manifest, test_manifest) =
                pool(ctx)?.install(|| build_dataset(&ctx.cfg, ctx.seed, &ctx.out))?;
            println!(
                "dataset: train {} samples, test {} samples, {} distances",
                train_manifest.samples,
                test_manifest.samples,
                train_manifest.distances.len()
            );
        }
        RenderMode::Scene => {
            let lens = lens_of(ctx)?;
            let ab = ctx.cfg.aberration();
            let params = RenderParams {
                block_size: ctx.cfg.block_size,
                noise_sigma: ctx.cfg.noise_sigma,
            };
            let texture = procedural_texture(
                ctx.cfg.sensor_width,
                ctx.cfg.sensor_height,
                TextureFlavor::MosaicMixed,
                ctx.seed,
            );
            let (img, truth) = match ctx.cfg.scene_kind {
                SceneKind::Flat => (
                    pool(ctx)?.install(|| {
                        render_flat(&texture, ctx.cfg.scene_distance_mm, &lens, &ab, &params, ctx.seed)
                    })?,
                    format!("scene=flat\ndistance_mm={}\n", ctx.cfg.scene_distance_mm),
                ),
                SceneKind::TwoPlane => (
                    pool(ctx)?.install(|| {
                        render_two_plane(
                            &texture,
                            ctx.cfg.scene_left_mm,
                            ctx.cfg.scene_right_mm,
                            &lens,
                            &ab,
                            &params,
                            ctx.seed,
                        )
                    })?,
                    format!(
                        "scene=two_plane\nleft_mm={}\nright_mm={}\nsplit_x={}\n",
                        ctx.cfg.scene_left_mm,
                        ctx.cfg.scene_right_mm,
                        ctx.cfg.sensor_width / 2
                    ),
                ),
            };
            img.write_ppm(&ctx.out.join("scene.ppm"))?;
            std::fs::write(ctx.out.join("scene_truth.txt"), truth).map_err(io_error)?;
            println!("scene: {}x{} written", img.width, img.height);
        }
    }
    Ok(())
}

fn load_split(dir: &Path, split: &str) -> Result<(Dataset, DatasetManifest), CliError> {
    let data_path = dir.join(format!("{split}.ccad"));
    let manifest_path = dir.join(format!("{split}_manifest.txt"));
    if !data_path.exists() {
        return Err(CliError::MissingFile(data_path.display().to_string()));
    }
    if !manifest_path.exists() {
        return Err(CliError::MissingFile(manifest_path.display().to_string()));
    }
    let ds = read_dataset(&data_path)?;
    let manifest_text = std::fs::read_to_string(&manifest_path).map_err(io_error)?;
    let manifest = DatasetManifest::from_text(&manifest_text)?;
    Ok((ds, manifest))
}

pub fn train(ctx: &Ctx, data: &Path) -> Result<(), CliError> {
    write_snapshot(ctx, "train")?;
    let lens = lens_of(ctx)?;
    let (train_ds, train_manifest) = load_split(data, "train")?;
    let (test_ds, _) = load_split(data, "test")?;
    check_lens_match(&train_manifest, &lens)?;
    let cfg = DdnConfig::from_tool(&ctx.cfg);
    let opts = TrainOptions {
        workers: ctx.workers,
        target_source: TargetSource::IdealFromDistance,
        validate_params: true,
    };
    let result = ddn::train(&cfg, &train_ds, &test_ds, &lens, ctx.seed, &opts)?;
    let tensors = result.best_model.to_checkpoint();
    checkpoint::save(&ctx.out.join("model.ccaw"), &tensors)?;
    checkpoint::write_summary(&ctx.out.join("model.txt"), &tensors)?;
    std::fs::write(ctx.out.join("train_log.csv"), epoch_log_csv(&result.log)).map_err(io_error)?;
    let last = result.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs; best test MAE {:.4} px at epoch {}; final train loss {:.4}",
        result.log.len(),
        result.best_test_mae,
        result.best_epoch,
        last.train_loss
    );
    Ok(())
}

fn search_spec(cfg: &ToolConfig) -> BlurSearchSpec {
    BlurSearchSpec {
        b_min: cfg.search_b_min,
        b_max: cfg.search_b_max,
        grid_count: cfg.search_grid,
        refine: cfg.search_refine,
    }
}

pub fn dfad(ctx: &Ctx, image: &Path) -> Result<(), CliError> {
    write_snapshot(ctx, "dfad")?;
    if !image.exists() {
        return Err(CliError::MissingFile(image.display().to_string()));
    }
    let lens = lens_of(ctx)?;
    let img = RgbImage::read_ppm(image)?;
    let map = pool(ctx)?.install(|| {
        dfad_depth_map(&img, &lens, search_spec(&ctx.cfg), ctx.cfg.stride, ctx.cfg.tau_g)
    })?;
    write_depth_outputs(
        &ctx.out,
        "depth",
        map.cells_x,
        map.cells_y,
        &map.distance_mm,
        &map.cue_mask,
        &ctx.cfg,
    )?;
    let cued = map.cue_mask.iter().filter(|&&c| c).count();
    println!(
        "dfad: {}x{} cells, {} with depth cue",
        map.cells_x, map.cells_y, cued
    );
    Ok(())
}

fn write_depth_outputs(
    out: &Path,
    stem: &str,
    cells_x: usize,
    cells_y: usize,
    distance_mm: &[f64],
    cue_mask: &[bool],
    cfg: &ToolConfig,
) -> Result<(), CliError> {
    write_ccaz(&out.join(format!("{stem}.ccaz")), cells_x, cells_y, distance_mm)?;
    write_depth_pgm(
        &out.join(format!("{stem}.pgm")),
        cells_x,
        cells_y,
        distance_mm,
        (cfg.near_mm, cfg.far_mm),
    )?;
    let mask: Vec<u16> = cue_mask.iter().map(|&c| if c { 65535 } else { 0 }).collect();
    write_pgm16(&out.join(format!("{stem}_cue_mask.pgm")), cells_x, cells_y, &mask)?;
    Ok(())
}

fn load_model(ctx: &Ctx, path: &Path) -> Result<DdnModel<f32>, CliError> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.display().to_string()));
    }
    let tensors = checkpoint::load(path)?;
    let cfg = DdnConfig::from_tool(&ctx.cfg);
    Ok(DdnModel::from_checkpoint(&cfg, &tensors)?)
}

pub fn infer(ctx: &Ctx, model_path: &Path, image: &Path) -> Result<(), CliError> {
    write_snapshot(ctx, "infer")?;
    if !image.exists() {
        return Err(CliError::MissingFile(image.display().to_string()));
    }
    let lens = lens_of(ctx)?;
    let model = load_model(ctx, model_path)?;
    let img = RgbImage::read_ppm(image)?;
    let map = pool(ctx)?.install(|| {
        predict_depth_map(
            &model,
            &img,
            &lens,
            ctx.cfg.stride,
            ctx.cfg.tau_g,
            ctx.cfg.sigma_threshold,
        )
    })?;
    write_depth_outputs(
        &ctx.out,
        "depth",
        map.cells_x,
        map.cells_y,
        &map.distance_mm,
        &map.cue_mask,
        &ctx.cfg,
    )?;
    // depth with unreliable cells rejected as well
    let rejected: Vec<f64> = map
        .distance_mm
        .iter()
        .zip(&map.reliable_mask)
        .map(|(&d, &ok)| if ok { d } else { f64::NAN })
        .collect();
    write_depth_pgm(
        &ctx.out.join("depth_reliable.pgm"),
        map.cells_x,
        map.cells_y,
        &rejected,
        (ctx.cfg.near_mm, ctx.cfg.far_mm),
    )?;
    // reliability raster: |sigma| scaled over its finite range, 0 = no cue
    let finite: Vec<f64> = map.sigma.iter().copied().filter(|s| s.is_finite()).collect();
    let (lo, hi): (f64, f64) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let span = (hi - lo).max(1e-12);
    let sigma_px: Vec<u16> = map
        .sigma
        .iter()
        .map(|&s| {
            if s.is_finite() {
                (1.0 + (s - lo) / span * 65534.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    write_pgm16(&ctx.out.join("sigma.pgm"), map.cells_x, map.cells_y, &sigma_px)?;
    std::fs::write(
        ctx.out.join("sigma.pgm.txt"),
        format!("format=sigma_pgm16\nmin_sigma={lo}\nmax_sigma={hi}\nmask_value=0\n"),
    )
    .map_err(io_error)?;
    let reliable: Vec<u16> = map
        .reliable_mask
        .iter()
        .zip(&map.cue_mask)
        .map(|(&r, &c)| if r && c { 65535 } else { 0 })
        .collect();
    write_pgm16(
        &ctx.out.join("reliable_mask.pgm"),
        map.cells_x,
        map.cells_y,
        &reliable,
    )?;
    let cued = map.cue_mask.iter().filter(|&&c| c).count();
    println!(
        "infer: {}x{} cells, {} with depth cue",
        map.cells_x, map.cells_y, cued
    );
    Ok(())
}

pub fn eval(
    ctx: &Ctx,
    data: &Path,
    estimator: &str,
    model: Option<&Path>,
) -> Result<(), CliError> {
    write_snapshot(ctx, "eval")?;
    let lens = lens_of(ctx)?;
    let (test_ds, test_manifest) = load_split(data, "test")?;
    check_lens_match(&test_manifest, &lens)?;
    let report = match estimator {
        "ddn" => {
            let model_path =
                model.ok_or_else(|| CliError::BadArgs("--estimator ddn needs --model".into()))?;
            let model = load_model(ctx, model_path)?;
            let est = DdnEstimator { model: &model };
            pool(ctx)?.install(|| evaluate(&est, &test_ds, &lens, ctx.cfg.acc_tau_px))?
        }
        "dfad" => {
            let est = DfadEstimator::new(&lens, search_spec(&ctx.cfg), ctx.cfg.tau_g)?;
            pool(ctx)?.install(|| evaluate(&est, &test_ds, &lens, ctx.cfg.acc_tau_px))?
        }
        other => {
            return Err(CliError::BadArgs(format!(
                "unknown estimator `{other}` (expected ddn|dfad)"
            )))
        }
    };
    std::fs::write(ctx.out.join("report.csv"), report.to_csv()).map_err(io_error)?;
    println!(
        "eval[{}]: mae {:.4} px / {:.1} mm, acc@{:.3}px {:.3}, center {:.4} px, periphery {:.4} px",
        report.estimator,
        report.mae_px,
        report.mae_mm,
        report.acc_tau_px,
        report.acc_within_tau,
        report.center_mae_px,
        report.periphery_mae_px
    );
    Ok(())
}

pub fn ablate(ctx: &Ctx, data: &Path) -> Result<(), CliError> {
    write_snapshot(ctx, "ablate")?;
    let lens = lens_of(ctx)?;
    let (train_ds, train_manifest) = load_split(data, "train")?;
    let (test_ds, _) = load_split(data, "test")?;
    check_lens_match(&train_manifest, &lens)?;
    let opts = TrainOptions {
        workers: ctx.workers,
        target_source: TargetSource::IdealFromDistance,
        validate_params: true,
    };
    let rows = ablation_suite(&ctx.cfg, &train_ds, &test_ds, &lens, ctx.seed, &opts);
    std::fs::write(ctx.out.join("ablation.csv"), ablation_csv(&rows)).map_err(io_error)?;
    for row in &rows {
        println!(
            "ablate[{}]: status={} mae={:.4} periphery={:.4}",
            row.variant, row.status, row.test_mae_px, row.periphery_mae_px
        );
    }
    Ok(())
}

pub fn gradcheck(ctx: &Ctx) -> Result<(), CliError> {
    write_snapshot(ctx, "gradcheck")?;
    let checks = check_all_ops(ctx.seed);
    let mut all_ok = true;
    println!("{:<18} {:>14}  status", "op", "max_rel_err");
    for c in &checks {
        let ok = c.passed();
        all_ok &= ok;
        println!(
            "{:<18} {:>14.3e}  {}",
            c.name,
            c.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    let cfg = DdnConfig::from_tool(&ctx.cfg);
    let full = gradcheck_full(&cfg, ctx.seed, 10)?;
    let full_ok = full < FULL_GRAPH_TOLERANCE;
    all_ok &= full_ok;
    println!(
        "{:<18} {:>14.3e}  {}",
        "full_network",
        full,
        if full_ok { "ok" } else { "FAIL" }
    );
    let mut table = String::new();
    for c in &checks {
        table.push_str(&format!("{},{:.3e}\n", c.name, c.max_rel_err));
    }
    table.push_str(&format!("full_network,{full:.3e}\n"));
    std::fs::write(ctx.out.join("gradcheck.csv"), table).map_err(io_error)?;
    if all_ok {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(format!(
            "tolerances: per-op < {PER_OP_TOLERANCE}, full graph < {FULL_GRAPH_TOLERANCE}"
        )))
    }
}

pub fn losscmp(ctx: &Ctx, data: &Path) -> Result<(), CliError> {
    write_snapshot(ctx, "losscmp")?;
    let lens = lens_of(ctx)?;
    let (mut train_ds, train_manifest) = load_split(data, "train")?;
    let (test_ds, _) = load_split(data, "test")?;
    check_lens_match(&train_manifest, &lens)?;
    let fraction = if ctx.cfg.outlier_fraction > 0.0 {
        ctx.cfg.outlier_fraction
    } else {
        0.1
    };
    perturb_labels(&mut train_ds, fraction, ctx.cfg.outlier_px, ctx.seed);

    let opts = TrainOptions {
        workers: ctx.workers,
        target_source: TargetSource::StoredBlur,
        validate_params: false,
    };
    let run_one = |loss: LossKind, name: &str| -> Result<Option<Vec<f64>>, CliError> {
        let cfg = DdnConfig {
            loss,
            sigma_param: SigmaParam::Raw,
            ..DdnConfig::from_tool(&ctx.cfg)
        };
        match ddn::train(&cfg, &train_ds, &test_ds, &lens, ctx.seed, &opts) {
            Ok(result) => {
                let losses: Vec<f64> = result.log.iter().map(|e| e.train_loss).collect();
                std::fs::write(
                    ctx.out.join(format!("losscmp_{name}.csv")),
                    epoch_log_csv(&result.log),
                )
                .map_err(io_error)?;
                Ok(Some(losses))
            }
            Err(DdnError::NanLoss { epoch, step }) => {
                std::fs::write(
                    ctx.out.join(format!("losscmp_{name}.csv")),
                    format!("aborted=non_finite_loss\nepoch={epoch}\nstep={step}\n"),
                )
                .map_err(io_error)?;
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    };

    let l1 = run_one(LossKind::BayesL1, "bayes_l1")?
        .ok_or_else(|| CliError::TrainingNan("absolute-deviation loss run aborted".into()))?;
    let l2 = run_one(LossKind::BayesL2, "bayes_l2")?;
    let warmup = (ctx.cfg.epochs / 5).max(2).min(l1.len().saturating_sub(1));
    let report = loss_stability_report(&l1, l2.as_deref(), warmup);
    std::fs::write(ctx.out.join("losscmp.txt"), report.to_text()).map_err(io_error)?;
    print!("{}", report.to_text());
    Ok(())
}
