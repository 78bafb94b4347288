//! Deep deaberration network: a patch CNN that regresses signed blur and a
//! per-patch reliability estimate.
//!
//! The main branch reads channel gradients; two sigmoid-attention branches
//! fold in positional and color information so the network can undo
//! shift-variant aberrations and discount color-confused cues. Training uses
//! the absolute-deviation heteroscedastic loss, which divides by |σ̂| to the
//! first power instead of σ̂² and stays stable when outlier errors meet a
//! small predicted deviation.

mod augment;
pub mod gradcheck;
mod loss;
mod model;
mod predict;
mod preprocess;
mod train;

pub use augment::{apply_augment, sample_augment, AugmentSpec, EraseSpec};
pub use loss::{
    loss_bayes_l1, loss_bayes_l2, loss_l1, raw_sigma_to_log, reference_bayes_l1,
    reference_bayes_l2, reference_l1, sample_bayes_l1, sample_bayes_l2,
};
pub use model::{
    fnv1a64, BranchParams, ConvParams, DdnModel, DenseParams, ForwardOutput, ForwardTrace,
    ModelIds, ResBlockParams,
};
pub use predict::{predict_depth_map, DdnDepthResult, PREDICT_BLUR_CLAMP_PX};
pub use preprocess::{hue_saturation, preprocess, Preprocessed};
pub use train::{
    batched_predict, epoch_log_csv, train, EpochLog, TargetSource, TrainOptions, TrainResult,
};

use thiserror::Error;

use crate::config::{InputMode, LossKind, SigmaParam, ToolConfig};
use crate::optics::SignedBlur;

#[derive(Debug, Error)]
pub enum DdnError {
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
    #[error("training loss became non-finite at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },
    #[error("dataset patch side {found} does not fit network input {need}")]
    PatchSide { found: usize, need: usize },
    #[error("image {width}x{height} smaller than one {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error(transparent)]
    Optics(#[from] crate::optics::OpticsError),
    #[error("checkpoint does not match the network topology: {0}")]
    CheckpointMismatch(String),
}

/// Network topology and training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DdnConfig {
    pub patch_side: usize,
    pub channels: usize,
    pub resblocks: usize,
    pub positional: bool,
    pub color: bool,
    pub input_mode: InputMode,
    pub loss: LossKind,
    pub sigma_param: SigmaParam,
    pub log_sigma_clamp: (f64, f64),
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub augment: bool,
    pub crop_margin: usize,
    pub acc_tau_px: f64,
}

impl Default for DdnConfig {
    fn default() -> Self {
        Self::from_tool(&ToolConfig::default())
    }
}

impl DdnConfig {
    pub fn from_tool(cfg: &ToolConfig) -> Self {
        Self {
            patch_side: cfg.patch_side,
            channels: cfg.channels,
            resblocks: cfg.resblocks,
            positional: cfg.branch_positional,
            color: cfg.branch_color,
            input_mode: cfg.input_mode,
            loss: cfg.loss,
            sigma_param: cfg.sigma_param,
            log_sigma_clamp: (cfg.log_sigma_clamp_lo, cfg.log_sigma_clamp_hi),
            batch: cfg.batch,
            epochs: cfg.epochs,
            lr: cfg.lr,
            augment: cfg.augment,
            crop_margin: cfg.crop_margin,
            acc_tau_px: cfg.acc_tau_px,
        }
    }

    pub fn validate(&self) -> Result<(), DdnError> {
        if self.patch_side % 2 != 0 || self.patch_side < 4 {
            return Err(DdnError::BadConfig(format!(
                "patch_side {} must be even and >= 4",
                self.patch_side
            )));
        }
        if self.channels < 1 {
            return Err(DdnError::BadConfig("channels must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(DdnError::BadConfig("batch must be >= 1".into()));
        }
        if !(self.log_sigma_clamp.0 < self.log_sigma_clamp.1) {
            return Err(DdnError::BadConfig("log_sigma_clamp must be ordered".into()));
        }
        Ok(())
    }

    /// Channels of the main-branch input.
    pub fn in_channels(&self) -> usize {
        match self.input_mode {
            InputMode::Gradients => 6,
            InputMode::Raw => 3,
        }
    }
}

/// Network output for one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub blur: SignedBlur,
    /// Reliability |σ̂|; low means trustworthy. Always positive and finite
    /// (the log-σ head is clamped).
    pub sigma: f64,
}
