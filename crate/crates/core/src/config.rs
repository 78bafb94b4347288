//! Flat `key=value` run configuration.
//!
//! Every run is driven by one plain-text config file plus command-line
//! overrides. Lines are `key=value`, `#` starts a comment, unknown keys are
//! rejected. [`ToolConfig::snapshot`] serializes the resolved config back to
//! sorted `key=value` text so each run can record exactly what it ran with.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::optics::{AberrationField, LensConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: `{value}` ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("malformed config line {line}: `{text}` (expected key=value)")]
    Malformed { line: usize, text: String },
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid lens: {0}")]
    Lens(String),
}

/// How the CLI `render` subcommand is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// Build a patch dataset (train + test splits plus manifest).
    Dataset,
    /// Emit a single rendered scene image.
    Scene,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// One fronto-parallel plane at `scene_distance_mm`.
    Flat,
    /// Left half at `scene_left_mm`, right half at `scene_right_mm`.
    TwoPlane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Gradients,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    BayesL1,
    BayesL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaParam {
    /// Head predicts log|σ̂| (clamped); numerically safe.
    Log,
    /// Head predicts σ̂ directly; kept only to reproduce training instability.
    Raw,
}

/// Resolved configuration for every subsystem, one flat namespace.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolConfig {
    // lens + aberration
    pub focal_length_mm: f64,
    pub f_number: f64,
    pub focus_distance_mm: f64,
    pub pixel_pitch_mm: f64,
    pub sensor_width: usize,
    pub sensor_height: usize,
    pub sigma_per_px: f64,
    pub fc_coeff: f64,
    pub coma_coeff: f64,
    pub chroma_r: f64,
    pub chroma_g: f64,
    pub chroma_b: f64,
    // rendering / dataset
    pub block_size: usize,
    pub noise_sigma: f64,
    pub tau_g: f64,
    pub near_mm: f64,
    pub far_mm: f64,
    pub distance_count: usize,
    pub patches_per_distance: usize,
    pub train_textures: usize,
    pub test_textures: usize,
    pub texture_dir: String,
    pub patch_side: usize,
    pub crop_margin: usize,
    pub render_mode: RenderMode,
    pub scene_kind: SceneKind,
    pub scene_distance_mm: f64,
    pub scene_left_mm: f64,
    pub scene_right_mm: f64,
    // network / training
    pub channels: usize,
    pub resblocks: usize,
    pub branch_positional: bool,
    pub branch_color: bool,
    pub input_mode: InputMode,
    pub loss: LossKind,
    pub sigma_param: SigmaParam,
    pub log_sigma_clamp_lo: f64,
    pub log_sigma_clamp_hi: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub augment: bool,
    pub acc_tau_px: f64,
    pub outlier_fraction: f64,
    pub outlier_px: f64,
    // blur search (DfAD) + map inference
    pub search_b_min: f64,
    pub search_b_max: f64,
    pub search_grid: usize,
    pub search_refine: bool,
    pub stride: usize,
    /// Reliability rejection threshold on |σ̂|; `<= 0` disables rejection.
    pub sigma_threshold: f64,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            focal_length_mm: 50.0,
            f_number: 4.0,
            focus_distance_mm: 1500.0,
            pixel_pitch_mm: 0.01,
            sensor_width: 576,
            sensor_height: 576,
            sigma_per_px: 0.5,
            fc_coeff: 0.0,
            coma_coeff: 0.0,
            chroma_r: 1.0,
            chroma_g: 1.0,
            chroma_b: 1.0,
            block_size: 32,
            noise_sigma: 0.002,
            tau_g: 0.02,
            near_mm: 1100.0,
            far_mm: 2400.0,
            distance_count: 20,
            patches_per_distance: 250,
            train_textures: 6,
            test_textures: 2,
            texture_dir: String::new(),
            patch_side: 16,
            crop_margin: 2,
            render_mode: RenderMode::Dataset,
            scene_kind: SceneKind::Flat,
            scene_distance_mm: 1300.0,
            scene_left_mm: 1100.0,
            scene_right_mm: 2400.0,
            channels: 32,
            resblocks: 5,
            branch_positional: true,
            branch_color: true,
            input_mode: InputMode::Gradients,
            loss: LossKind::BayesL1,
            sigma_param: SigmaParam::Log,
            log_sigma_clamp_lo: -6.0,
            log_sigma_clamp_hi: 6.0,
            batch: 128,
            epochs: 30,
            lr: 1e-3,
            augment: true,
            acc_tau_px: 0.5,
            outlier_fraction: 0.0,
            outlier_px: 8.0,
            search_b_min: -12.0,
            search_b_max: 12.0,
            search_grid: 65,
            search_refine: true,
            stride: 16,
            sigma_threshold: 0.0,
        }
    }
}

fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Malformed {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

macro_rules! bad {
    ($key:expr, $value:expr, $reason:expr) => {
        ConfigError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            reason: $reason.to_string(),
        }
    };
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>().map_err(|e| bad!(key, v, e))
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse::<usize>().map_err(|e| bad!(key, v, e))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad!(key, v, "expected true/false")),
    }
}

impl ToolConfig {
    /// Parse config text, starting from defaults.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_map(&parse_kv_text(text)?)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Apply `key=value` override strings (CLI `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for ov in overrides {
            let Some((k, v)) = ov.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line: 0,
                    text: ov.clone(),
                });
            };
            let mut map = BTreeMap::new();
            map.insert(k.trim().to_string(), v.trim().to_string());
            self.apply_map(&map)?;
        }
        Ok(())
    }

    fn apply_map(&mut self, map: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        for (k, v) in map {
            self.apply_one(k, v)?;
        }
        Ok(())
    }

    fn apply_one(&mut self, k: &str, v: &str) -> Result<(), ConfigError> {
        match k {
            "focal_length_mm" => self.focal_length_mm = parse_f64(k, v)?,
            "f_number" => self.f_number = parse_f64(k, v)?,
            "focus_distance_mm" => self.focus_distance_mm = parse_f64(k, v)?,
            "pixel_pitch_mm" => self.pixel_pitch_mm = parse_f64(k, v)?,
            "sensor_width" => self.sensor_width = parse_usize(k, v)?,
            "sensor_height" => self.sensor_height = parse_usize(k, v)?,
            "sigma_per_px" => self.sigma_per_px = parse_f64(k, v)?,
            "fc_coeff" => self.fc_coeff = parse_f64(k, v)?,
            "coma_coeff" => self.coma_coeff = parse_f64(k, v)?,
            "chroma_r" => self.chroma_r = parse_f64(k, v)?,
            "chroma_g" => self.chroma_g = parse_f64(k, v)?,
            "chroma_b" => self.chroma_b = parse_f64(k, v)?,
            "block_size" => self.block_size = parse_usize(k, v)?,
            "noise_sigma" => self.noise_sigma = parse_f64(k, v)?,
            "tau_g" => self.tau_g = parse_f64(k, v)?,
            "near_mm" => self.near_mm = parse_f64(k, v)?,
            "far_mm" => self.far_mm = parse_f64(k, v)?,
            "distance_count" => self.distance_count = parse_usize(k, v)?,
            "patches_per_distance" => self.patches_per_distance = parse_usize(k, v)?,
            "train_textures" => self.train_textures = parse_usize(k, v)?,
            "test_textures" => self.test_textures = parse_usize(k, v)?,
            "texture_dir" => self.texture_dir = v.to_string(),
            "patch_side" => self.patch_side = parse_usize(k, v)?,
            "crop_margin" => self.crop_margin = parse_usize(k, v)?,
            "render_mode" => {
                self.render_mode = match v {
                    "dataset" => RenderMode::Dataset,
                    "scene" => RenderMode::Scene,
                    _ => return Err(bad!(k, v, "expected dataset|scene")),
                }
            }
            "scene_kind" => {
                self.scene_kind = match v {
                    "flat" => SceneKind::Flat,
                    "two_plane" => SceneKind::TwoPlane,
                    _ => return Err(bad!(k, v, "expected flat|two_plane")),
                }
            }
            "scene_distance_mm" => self.scene_distance_mm = parse_f64(k, v)?,
            "scene_left_mm" => self.scene_left_mm = parse_f64(k, v)?,
            "scene_right_mm" => self.scene_right_mm = parse_f64(k, v)?,
            "channels" => self.channels = parse_usize(k, v)?,
            "resblocks" => self.resblocks = parse_usize(k, v)?,
            "branch_positional" => self.branch_positional = parse_bool(k, v)?,
            "branch_color" => self.branch_color = parse_bool(k, v)?,
            "input_mode" => {
                self.input_mode = match v {
                    "gradients" => InputMode::Gradients,
                    "raw" => InputMode::Raw,
                    _ => return Err(bad!(k, v, "expected gradients|raw")),
                }
            }
            "loss" => {
                self.loss = match v {
                    "l1" => LossKind::L1,
                    "bayes_l1" => LossKind::BayesL1,
                    "bayes_l2" => LossKind::BayesL2,
                    _ => return Err(bad!(k, v, "expected l1|bayes_l1|bayes_l2")),
                }
            }
            "sigma_param" => {
                self.sigma_param = match v {
                    "log" => SigmaParam::Log,
                    "raw" => SigmaParam::Raw,
                    _ => return Err(bad!(k, v, "expected log|raw")),
                }
            }
            "log_sigma_clamp_lo" => self.log_sigma_clamp_lo = parse_f64(k, v)?,
            "log_sigma_clamp_hi" => self.log_sigma_clamp_hi = parse_f64(k, v)?,
            "batch" => self.batch = parse_usize(k, v)?,
            "epochs" => self.epochs = parse_usize(k, v)?,
            "lr" => self.lr = parse_f64(k, v)?,
            "augment" => self.augment = parse_bool(k, v)?,
            "acc_tau_px" => self.acc_tau_px = parse_f64(k, v)?,
            "outlier_fraction" => self.outlier_fraction = parse_f64(k, v)?,
            "outlier_px" => self.outlier_px = parse_f64(k, v)?,
            "search_b_min" => self.search_b_min = parse_f64(k, v)?,
            "search_b_max" => self.search_b_max = parse_f64(k, v)?,
            "search_grid" => self.search_grid = parse_usize(k, v)?,
            "search_refine" => self.search_refine = parse_bool(k, v)?,
            "stride" => self.stride = parse_usize(k, v)?,
            "sigma_threshold" => self.sigma_threshold = parse_f64(k, v)?,
            _ => return Err(ConfigError::UnknownKey(k.to_string())),
        }
        Ok(())
    }

    pub fn lens(&self) -> Result<LensConfig, ConfigError> {
        LensConfig::new(
            self.focal_length_mm,
            self.f_number,
            self.focus_distance_mm,
            self.pixel_pitch_mm,
            self.sensor_width,
            self.sensor_height,
            self.sigma_per_px,
        )
        .map_err(|e| ConfigError::Lens(e.to_string()))
    }

    pub fn aberration(&self) -> AberrationField {
        AberrationField {
            field_curvature: self.fc_coeff,
            coma: self.coma_coeff,
            lateral_chromatic: [self.chroma_r, self.chroma_g, self.chroma_b],
        }
    }

    /// Serialize the resolved config as sorted `key=value` lines.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        push("acc_tau_px", self.acc_tau_px.to_string());
        push("augment", self.augment.to_string());
        push("batch", self.batch.to_string());
        push("block_size", self.block_size.to_string());
        push("branch_color", self.branch_color.to_string());
        push("branch_positional", self.branch_positional.to_string());
        push("channels", self.channels.to_string());
        push("chroma_b", self.chroma_b.to_string());
        push("chroma_g", self.chroma_g.to_string());
        push("chroma_r", self.chroma_r.to_string());
        push("coma_coeff", self.coma_coeff.to_string());
        push("crop_margin", self.crop_margin.to_string());
        push("distance_count", self.distance_count.to_string());
        push("epochs", self.epochs.to_string());
        push("f_number", self.f_number.to_string());
        push("far_mm", self.far_mm.to_string());
        push("fc_coeff", self.fc_coeff.to_string());
        push("focal_length_mm", self.focal_length_mm.to_string());
        push("focus_distance_mm", self.focus_distance_mm.to_string());
        push(
            "input_mode",
            match self.input_mode {
                InputMode::Gradients => "gradients",
                InputMode::Raw => "raw",
            }
            .to_string(),
        );
        push("log_sigma_clamp_hi", self.log_sigma_clamp_hi.to_string());
        push("log_sigma_clamp_lo", self.log_sigma_clamp_lo.to_string());
        push(
            "loss",
            match self.loss {
                LossKind::L1 => "l1",
                LossKind::BayesL1 => "bayes_l1",
                LossKind::BayesL2 => "bayes_l2",
            }
            .to_string(),
        );
        push("lr", self.lr.to_string());
        push("near_mm", self.near_mm.to_string());
        push("noise_sigma", self.noise_sigma.to_string());
        push("outlier_fraction", self.outlier_fraction.to_string());
        push("outlier_px", self.outlier_px.to_string());
        push("patch_side", self.patch_side.to_string());
        push(
            "patches_per_distance",
            self.patches_per_distance.to_string(),
        );
        push("pixel_pitch_mm", self.pixel_pitch_mm.to_string());
        push(
            "render_mode",
            match self.render_mode {
                RenderMode::Dataset => "dataset",
                RenderMode::Scene => "scene",
            }
            .to_string(),
        );
        push("resblocks", self.resblocks.to_string());
        push("scene_distance_mm", self.scene_distance_mm.to_string());
        push(
            "scene_kind",
            match self.scene_kind {
                SceneKind::Flat => "flat",
                SceneKind::TwoPlane => "two_plane",
            }
            .to_string(),
        );
        push("scene_left_mm", self.scene_left_mm.to_string());
        push("scene_right_mm", self.scene_right_mm.to_string());
        push("search_b_max", self.search_b_max.to_string());
        push("search_b_min", self.search_b_min.to_string());
        push("search_grid", self.search_grid.to_string());
        push("search_refine", self.search_refine.to_string());
        push("sensor_height", self.sensor_height.to_string());
        push("sensor_width", self.sensor_width.to_string());
        push("sigma_param", {
            match self.sigma_param {
                SigmaParam::Log => "log",
                SigmaParam::Raw => "raw",
            }
            .to_string()
        });
        push("sigma_per_px", self.sigma_per_px.to_string());
        push("sigma_threshold", self.sigma_threshold.to_string());
        push("stride", self.stride.to_string());
        push("tau_g", self.tau_g.to_string());
        push("test_textures", self.test_textures.to_string());
        push("texture_dir", self.texture_dir.clone());
        push("train_textures", self.train_textures.to_string());
        out
    }
}
