//! Sliding-window depth-map inference with no-cue and reliability masks.

use crate::image::{mean_gradient_magnitude, RgbImage};
use crate::optics::{distance_from_blur, LensConfig, SignedBlur};
use crate::render::PatchSample;

use super::train::batched_predict;
use super::{DdnError, DdnModel};

/// Network blur predictions are clamped into this range before the
/// distance conversion so the inverse always exists.
pub const PREDICT_BLUR_CLAMP_PX: f64 = 12.0;

/// Window-grid output of [`predict_depth_map`].
#[derive(Debug, Clone)]
pub struct DdnDepthResult {
    pub cells_x: usize,
    pub cells_y: usize,
    pub window: usize,
    pub stride: usize,
    /// NaN where the window had no depth cue.
    pub distance_mm: Vec<f64>,
    pub blur_px: Vec<f64>,
    /// Predicted |σ̂| per window (NaN where no cue).
    pub sigma: Vec<f64>,
    /// true where the window passed the gradient threshold
    pub cue_mask: Vec<bool>,
    /// true where |σ̂| is below the rejection threshold (all true when the
    /// threshold is disabled); meaningful only where `cue_mask` holds
    pub reliable_mask: Vec<bool>,
}

/// Slide the network over an image. Windows below `tau_g` carry no depth
/// cue and are masked; windows at or above `sigma_threshold` (when > 0)
/// are flagged unreliable.
pub fn predict_depth_map(
    model: &DdnModel<f32>,
    img: &RgbImage,
    lens: &LensConfig,
    stride: usize,
    tau_g: f64,
    sigma_threshold: f64,
) -> Result<DdnDepthResult, DdnError> {
    let window = model.cfg.patch_side;
    if img.width < window || img.height < window {
        return Err(DdnError::ImageTooSmall {
            width: img.width,
            height: img.height,
            window,
        });
    }
    let stride = stride.max(1);
    let cells_x = (img.width - window) / stride + 1;
    let cells_y = (img.height - window) / stride + 1;
    let total = cells_x * cells_y;

    let mut cue_mask = vec![false; total];
    let mut queued: Vec<PatchSample> = Vec::new();
    let mut queued_cells: Vec<usize> = Vec::new();
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let x0 = cx * stride;
            let y0 = cy * stride;
            let planes = img.window(x0, y0, window);
            if mean_gradient_magnitude(&planes, window) < tau_g {
                continue;
            }
            let cell = cy * cells_x + cx;
            cue_mask[cell] = true;
            let cxf = x0 as f64 + (window as f64 - 1.0) / 2.0;
            let cyf = y0 as f64 + (window as f64 - 1.0) / 2.0;
            let posx = if img.width > 1 {
                2.0 * cxf / (img.width as f64 - 1.0) - 1.0
            } else {
                0.0
            };
            let posy = if img.height > 1 {
                2.0 * cyf / (img.height as f64 - 1.0) - 1.0
            } else {
                0.0
            };
            queued.push(PatchSample {
                side: window,
                planes: planes.iter().map(|&v| v as f32).collect(),
                pos: (posx as f32, posy as f32),
                distance_mm: 0.0,
                blur_px: 0.0,
            });
            queued_cells.push(cell);
        }
    }

    let preds = batched_predict(model, &queued)?;
    let mut distance_mm = vec![f64::NAN; total];
    let mut blur_px = vec![f64::NAN; total];
    let mut sigma = vec![f64::NAN; total];
    let mut reliable_mask = vec![false; total];
    for (pred, &cell) in preds.iter().zip(&queued_cells) {
        let clamped = pred
            .blur
            .px
            .clamp(-PREDICT_BLUR_CLAMP_PX, PREDICT_BLUR_CLAMP_PX);
        blur_px[cell] = pred.blur.px;
        sigma[cell] = pred.sigma;
        distance_mm[cell] = distance_from_blur(lens, SignedBlur::new(clamped))?;
        reliable_mask[cell] = sigma_threshold <= 0.0 || pred.sigma < sigma_threshold;
    }
    Ok(DdnDepthResult {
        cells_x,
        cells_y,
        window,
        stride,
        distance_mm,
        blur_px,
        sigma,
        cue_mask,
        reliable_mask,
    })
}
