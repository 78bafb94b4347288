//! Depth from analytical defocus (DfAD).
//!
//! The estimator deforms the R and B channels with the kernel that would make
//! their half-Gaussian blur match the G channel under a blur hypothesis, then
//! scores the hypothesis by zero-mean normalized cross correlation between
//! channel gradients. The cost `3 - D(R',G) - D(G,B') - D(R',B')` is zero
//! when the hypothesis matches the real blur and the lens is ideal — which is
//! exactly its weakness: a shift-variant PSF biases the match away from the
//! true distance, and it gets worse toward the image periphery.
//!
//! Deformation kernels come from the same generator as the simulator
//! (`k_R(b)` is the B-channel PSF and vice versa), and patch deformation uses
//! circular convolution, so on toroidally rendered patches the cost at the
//! true blur vanishes to machine precision.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{central_gradients, mean_gradient_magnitude, write_pgm16, RgbImage};
use crate::optics::{
    distance_from_blur, psf, AberrationField, Channel, LensConfig, OpticsError, PsfKernel,
    SensorPos, SignedBlur,
};

#[derive(Debug, Error)]
pub enum DfadError {
    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("vectors too short for correlation (need >= 2 samples)")]
    TooShort,
    #[error("patch below gradient threshold: no depth cue")]
    NoCue,
    #[error("invalid search spec: {0}")]
    BadSpec(String),
    #[error("image {width}x{height} smaller than one {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error("depth map i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Zero-mean normalized cross correlation in [-1, 1].
/// Returns 0 when either vector has zero variance.
pub fn zncc(a: &[f64], b: &[f64]) -> Result<f64, DfadError> {
    if a.len() != b.len() {
        return Err(DfadError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(DfadError::TooShort);
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let da = x - mean_a;
        let db = y - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}

/// Per-channel horizontal and vertical central-difference planes.
#[derive(Debug, Clone)]
pub struct GradientStack {
    pub side: usize,
    /// For each channel, gx planes then gy concatenated into one vector.
    pub channels: [Vec<f64>; 3],
}

impl GradientStack {
    /// Build from planar RGB data (`3 * side * side` values).
    pub fn compute(planes: &[f64], side: usize) -> Self {
        let mut channels: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (c, chan) in channels.iter_mut().enumerate() {
            let p = &planes[c * side * side..(c + 1) * side * side];
            let (gx, gy) = central_gradients(p, side, side);
            let mut v = gx;
            v.extend(gy);
            *chan = v;
        }
        Self { side, channels }
    }
}

/// Circular (wrap-around) convolution of a square plane with a PSF kernel.
pub fn wrap_convolve(plane: &[f64], side: usize, k: &PsfKernel) -> Vec<f64> {
    let n = side as i64;
    let h = k.half();
    let mut out = vec![0.0; side * side];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for ty in -h..=h {
                for tx in -h..=h {
                    let w = k.tap(tx, ty);
                    if w != 0.0 {
                        let sx = (x - tx).rem_euclid(n);
                        let sy = (y - ty).rem_euclid(n);
                        acc += w * plane[(sy * n + sx) as usize];
                    }
                }
            }
            out[(y * n + x) as usize] = acc;
        }
    }
    out
}

/// Render a self-consistent CCA patch on the torus: each channel of the
/// texture is circularly convolved with its ideal PSF at blur `b`. The
/// exactness oracles rely on this generator.
pub fn render_patch_wrap(texture: &[f64], side: usize, b: SignedBlur, lens: &LensConfig) -> Vec<f64> {
    let ab = AberrationField::ideal();
    let mut out = Vec::with_capacity(3 * side * side);
    for c in Channel::ALL {
        let k = psf(lens, b, c, SensorPos::CENTER, &ab);
        let plane = &texture[c.index() * side * side..(c.index() + 1) * side * side];
        out.extend(wrap_convolve(plane, side, &k));
    }
    out
}

/// Deformation kernels for one hypothesis: `k_R` makes the R channel match
/// G, `k_B` the B channel. They are the opposite channels' PSFs.
fn deform_kernels(lens: &LensConfig, b: SignedBlur) -> (PsfKernel, PsfKernel) {
    let ab = AberrationField::ideal();
    let k_r = psf(lens, b, Channel::B, SensorPos::CENTER, &ab);
    let k_b = psf(lens, b, Channel::R, SensorPos::CENTER, &ab);
    (k_r, k_b)
}

fn cost_with_kernels(
    planes: &[f64],
    side: usize,
    k_r: &PsfKernel,
    k_b: &PsfKernel,
) -> f64 {
    let area = side * side;
    let r_def = wrap_convolve(&planes[0..area], side, k_r);
    let b_def = wrap_convolve(&planes[2 * area..3 * area], side, k_b);
    let mut deformed = Vec::with_capacity(3 * area);
    deformed.extend(&r_def);
    deformed.extend(&planes[area..2 * area]);
    deformed.extend(&b_def);
    let grads = GradientStack::compute(&deformed, side);
    let d_rg = zncc(&grads.channels[0], &grads.channels[1]).unwrap_or(0.0);
    let d_gb = zncc(&grads.channels[1], &grads.channels[2]).unwrap_or(0.0);
    let d_rb = zncc(&grads.channels[0], &grads.channels[2]).unwrap_or(0.0);
    3.0 - d_rg - d_gb - d_rb
}

/// DfAD cost of a blur hypothesis for one patch (planar RGB, row-major).
pub fn dfad_cost(planes: &[f64], side: usize, b: SignedBlur, lens: &LensConfig) -> f64 {
    let (k_r, k_b) = deform_kernels(lens, b);
    cost_with_kernels(planes, side, &k_r, &k_b)
}

/// Blur hypothesis search: uniform grid plus optional parabolic refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurSearchSpec {
    pub b_min: f64,
    pub b_max: f64,
    pub grid_count: usize,
    pub refine: bool,
}

impl Default for BlurSearchSpec {
    fn default() -> Self {
        Self {
            b_min: -12.0,
            b_max: 12.0,
            grid_count: 65,
            refine: true,
        }
    }
}

impl BlurSearchSpec {
    pub fn validate(&self) -> Result<(), DfadError> {
        if !(self.b_min < self.b_max) {
            return Err(DfadError::BadSpec(format!(
                "b_min {} must be < b_max {}",
                self.b_min, self.b_max
            )));
        }
        if self.grid_count < 3 {
            return Err(DfadError::BadSpec(format!(
                "grid_count {} must be >= 3",
                self.grid_count
            )));
        }
        Ok(())
    }
}

/// Precomputed hypothesis grid with deformation kernels, reusable across
/// patches and safe to share between threads.
pub struct DfadSearcher {
    lens: LensConfig,
    spec: BlurSearchSpec,
    grid: Vec<f64>,
    kernels: Vec<(PsfKernel, PsfKernel)>,
}

impl DfadSearcher {
    pub fn new(lens: &LensConfig, spec: BlurSearchSpec) -> Result<Self, DfadError> {
        spec.validate()?;
        let grid: Vec<f64> = (0..spec.grid_count)
            .map(|i| {
                spec.b_min + (spec.b_max - spec.b_min) * i as f64 / (spec.grid_count as f64 - 1.0)
            })
            .collect();
        let kernels = grid
            .iter()
            .map(|&b| deform_kernels(lens, SignedBlur::new(b)))
            .collect();
        Ok(Self {
            lens: lens.clone(),
            spec,
            grid,
            kernels,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Estimate the signed blur of one patch. The gradient threshold is
    /// checked first; below it there is no depth cue and the caller must
    /// mask the result.
    pub fn estimate(
        &self,
        planes: &[f64],
        side: usize,
        tau_g: f64,
    ) -> Result<(SignedBlur, f64), DfadError> {
        if mean_gradient_magnitude(planes, side) < tau_g {
            return Err(DfadError::NoCue);
        }
        let costs: Vec<f64> = self
            .kernels
            .iter()
            .map(|(k_r, k_b)| cost_with_kernels(planes, side, k_r, k_b))
            .collect();
        let mut best = 0;
        for (i, &c) in costs.iter().enumerate() {
            if c < costs[best] {
                best = i;
            }
        }
        let mut b_hat = self.grid[best];
        let mut cost = costs[best];
        if self.spec.refine && best > 0 && best + 1 < costs.len() {
            let h = self.grid[1] - self.grid[0];
            let c0 = costs[best - 1];
            let c1 = costs[best];
            let c2 = costs[best + 1];
            let denom = c0 - 2.0 * c1 + c2;
            if denom > 0.0 {
                let delta = 0.5 * h * (c0 - c2) / denom;
                let refined = self.grid[best] + delta.clamp(-h * 0.5, h * 0.5);
                let refined_cost =
                    dfad_cost(planes, side, SignedBlur::new(refined), &self.lens);
                if refined_cost <= cost {
                    b_hat = refined;
                    cost = refined_cost;
                }
            }
        }
        Ok((SignedBlur::new(b_hat), cost))
    }
}

/// Convenience one-shot estimate (builds the kernel grid each call).
pub fn estimate_blur(
    planes: &[f64],
    side: usize,
    spec: BlurSearchSpec,
    lens: &LensConfig,
    tau_g: f64,
) -> Result<(SignedBlur, f64), DfadError> {
    DfadSearcher::new(lens, spec)?.estimate(planes, side, tau_g)
}

/// Window-grid depth map with a cue mask. Masked cells hold NaN.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub cells_x: usize,
    pub cells_y: usize,
    pub window: usize,
    pub stride: usize,
    pub distance_mm: Vec<f64>,
    pub blur_px: Vec<f64>,
    /// true where the window had a usable depth cue
    pub cue_mask: Vec<bool>,
}

impl DepthMap {
    pub fn cell(&self, cx: usize, cy: usize) -> f64 {
        self.distance_mm[cy * self.cells_x + cx]
    }
}

pub const DFAD_WINDOW: usize = 16;

/// Sliding-window DfAD depth map. Windows without a cue are masked.
pub fn dfad_depth_map(
    img: &RgbImage,
    lens: &LensConfig,
    spec: BlurSearchSpec,
    stride: usize,
    tau_g: f64,
) -> Result<DepthMap, DfadError> {
    let window = DFAD_WINDOW;
    if img.width < window || img.height < window {
        return Err(DfadError::ImageTooSmall {
            width: img.width,
            height: img.height,
            window,
        });
    }
    let stride = stride.max(1);
    let searcher = DfadSearcher::new(lens, spec)?;
    let cells_x = (img.width - window) / stride + 1;
    let cells_y = (img.height - window) / stride + 1;
    let cells: Vec<(usize, usize)> = (0..cells_y)
        .flat_map(|cy| (0..cells_x).map(move |cx| (cx, cy)))
        .collect();
    let results: Vec<(f64, f64, bool)> = cells
        .par_iter()
        .map(|&(cx, cy)| {
            let planes = img.window(cx * stride, cy * stride, window);
            match searcher.estimate(&planes, window, tau_g) {
                Ok((b, _cost)) => match distance_from_blur(lens, b) {
                    Ok(d) => (d, b.px, true),
                    Err(_) => (f64::NAN, b.px, true),
                },
                Err(DfadError::NoCue) => (f64::NAN, f64::NAN, false),
                Err(_) => (f64::NAN, f64::NAN, false),
            }
        })
        .collect();
    let mut distance_mm = Vec::with_capacity(results.len());
    let mut blur_px = Vec::with_capacity(results.len());
    let mut cue_mask = Vec::with_capacity(results.len());
    for (d, b, cue) in results {
        distance_mm.push(d);
        blur_px.push(b);
        cue_mask.push(cue);
    }
    Ok(DepthMap {
        cells_x,
        cells_y,
        window,
        stride,
        distance_mm,
        blur_px,
        cue_mask,
    })
}

const CCAZ_MAGIC: &[u8; 4] = b"CCAZ";

/// Float raster: magic, width, height, then row-major f32 millimeters with
/// NaN for masked cells.
pub fn write_ccaz(path: &Path, width: usize, height: usize, mm: &[f64]) -> Result<(), DfadError> {
    assert_eq!(mm.len(), width * height);
    let mut buf = Vec::with_capacity(12 + mm.len() * 4);
    buf.extend_from_slice(CCAZ_MAGIC);
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    for &v in mm {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_ccaz(path: &Path) -> Result<(usize, usize, Vec<f64>), DfadError> {
    let data = std::fs::read(path)?;
    if data.len() < 12 || &data[0..4] != CCAZ_MAGIC {
        return Err(DfadError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad CCAZ header",
        )));
    }
    let w = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let off = 12 + i * 4;
        out.push(f32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as f64);
    }
    Ok((w, h, out))
}

/// 16-bit PGM of a depth map plus a sidecar text file declaring the scale.
/// Gray value 0 is reserved for masked cells; distances map to [1, 65535]
/// over the declared range.
pub fn write_depth_pgm(
    path: &Path,
    map_w: usize,
    map_h: usize,
    mm: &[f64],
    range_mm: (f64, f64),
) -> Result<(), DfadError> {
    let (lo, hi) = range_mm;
    let span = (hi - lo).max(1e-9);
    let values: Vec<u16> = mm
        .iter()
        .map(|&v| {
            if v.is_nan() {
                0u16
            } else {
                let t = ((v - lo) / span).clamp(0.0, 1.0);
                (1.0 + t * 65534.0).round() as u16
            }
        })
        .collect();
    write_pgm16(path, map_w, map_h, &values).map_err(|e| {
        DfadError::Io(std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
    })?;
    let sidecar = path.with_extension("pgm.txt");
    std::fs::write(
        &sidecar,
        format!(
            "format=depth_pgm16\nmin_mm={lo}\nmax_mm={hi}\nmask_value=0\nvalue_range=1..65535\n"
        ),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lens() -> LensConfig {
        LensConfig::reference()
    }

    /// High-contrast toroidal test texture (planar RGB, side 16).
    ///
    /// Channels are positive-affine maps of one luminance pattern (a tinted
    /// gray), which is the regime where the three pairwise correlations can
    /// reach exactly 1 at the true hypothesis.
    fn test_texture(seed: u64, side: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
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
                let lum = lattice[cell];
                for c in 0..3 {
                    planes[c * side * side + y * side + x] = gains[c] * lum + offsets[c];
                }
            }
        }
        planes
    }

    #[test]
    fn zncc_self_correlation_is_one() {
        let a = vec![0.3, 0.9, -1.2, 4.0, 0.0];
        assert!((zncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zncc_anti_correlation_is_minus_one() {
        let a = vec![0.3, 0.9, -1.2, 4.0, 0.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((zncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zncc_positive_affine_invariance() {
        let a = vec![0.3, 0.9, -1.2, 4.0, 0.0];
        let affine: Vec<f64> = a.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((zncc(&a, &affine).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zncc_zero_variance_is_zero() {
        let a = vec![1.0, 1.0, 1.0, 1.0];
        let b = vec![0.2, 0.4, 0.8, 0.1];
        assert_eq!(zncc(&a, &b).unwrap(), 0.0);
        assert_eq!(zncc(&b, &a).unwrap(), 0.0);
    }

    #[test]
    fn zncc_length_mismatch_is_error() {
        assert!(matches!(
            zncc(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(DfadError::LengthMismatch(2, 3))
        ));
    }

    proptest! {
        #[test]
        fn zncc_symmetric_and_bounded(
            a in proptest::collection::vec(-10.0f64..10.0, 8..32),
            b in proptest::collection::vec(-10.0f64..10.0, 8..32),
        ) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let ab = zncc(a, b).unwrap();
            let ba = zncc(b, a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn zncc_invariant_to_positive_affine(
            a in proptest::collection::vec(-5.0f64..5.0, 8..24),
            scale in 0.1f64..5.0,
            offset in -4.0f64..4.0,
        ) {
            prop_assume!(a.iter().any(|&v| (v - a[0]).abs() > 1e-6));
            let b: Vec<f64> = a.iter().map(|v| scale * v + offset).collect();
            let r = zncc(&a, &b).unwrap();
            prop_assert!((r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_vanishes_at_true_blur_on_self_consistent_patch() {
        let lens = lens();
        for &b_true in &[-6.0f64, -2.0, 3.0, 7.0] {
            let tex = test_texture(b_true.to_bits(), 16);
            let patch = render_patch_wrap(&tex, 16, SignedBlur::new(b_true), &lens);
            let cost = dfad_cost(&patch, 16, SignedBlur::new(b_true), &lens);
            assert!(cost < 1e-6, "cost {cost} at b={b_true}");
        }
    }

    #[test]
    fn constant_patch_cost_is_three() {
        let lens = lens();
        let patch = vec![0.5; 3 * 256];
        let cost = dfad_cost(&patch, 16, SignedBlur::new(2.0), &lens);
        assert_eq!(cost, 3.0);
    }

    #[test]
    fn wrong_sign_costs_more_than_true_sign() {
        let lens = lens();
        let tex = test_texture(77, 16);
        let patch = render_patch_wrap(&tex, 16, SignedBlur::new(4.0), &lens);
        let right = dfad_cost(&patch, 16, SignedBlur::new(4.0), &lens);
        let wrong = dfad_cost(&patch, 16, SignedBlur::new(-4.0), &lens);
        assert!(wrong > right, "wrong {wrong} right {right}");
    }

    #[test]
    fn cost_is_bounded_zero_to_six() {
        let lens = lens();
        let tex = test_texture(5, 16);
        for &b_true in &[-8.0, 0.0, 5.0] {
            let patch = render_patch_wrap(&tex, 16, SignedBlur::new(b_true), &lens);
            let mut b = -12.0;
            while b <= 12.0 {
                let c = dfad_cost(&patch, 16, SignedBlur::new(b), &lens);
                assert!((0.0..=6.0).contains(&c), "cost {c} out of range");
                b += 1.7;
            }
        }
    }

    #[test]
    fn estimate_recovers_zero_blur() {
        let lens = lens();
        let tex = test_texture(13, 16);
        let patch = render_patch_wrap(&tex, 16, SignedBlur::new(0.0), &lens);
        let spec = BlurSearchSpec::default();
        let (b, cost) = estimate_blur(&patch, 16, spec, &lens, 0.0).unwrap();
        let step = (spec.b_max - spec.b_min) / (spec.grid_count as f64 - 1.0);
        assert!(b.px.abs() <= step, "b {} step {step}", b.px);
        assert!(cost < 1e-6);
    }

    #[test]
    fn estimate_sweep_stays_within_quarter_pixel() {
        let lens = lens();
        let searcher = DfadSearcher::new(&lens, BlurSearchSpec::default()).unwrap();
        for &b_true in &[-8.0, -6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0, 8.0] {
            for tex_seed in 0..4u64 {
                let tex = test_texture(1000 + tex_seed, 16);
                let patch = render_patch_wrap(&tex, 16, SignedBlur::new(b_true), &lens);
                let (b, _) = searcher.estimate(&patch, 16, 0.0).unwrap();
                assert!(
                    (b.px - b_true).abs() <= 0.25,
                    "b_hat {} vs {b_true} (texture {tex_seed})",
                    b.px
                );
            }
        }
    }

    #[test]
    fn estimate_is_deterministic() {
        let lens = lens();
        let tex = test_texture(3, 16);
        let patch = render_patch_wrap(&tex, 16, SignedBlur::new(3.0), &lens);
        let spec = BlurSearchSpec::default();
        let a = estimate_blur(&patch, 16, spec, &lens, 0.0).unwrap();
        let b = estimate_blur(&patch, 16, spec, &lens, 0.0).unwrap();
        assert_eq!(a.0.px.to_bits(), b.0.px.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn low_gradient_patch_is_no_cue() {
        let lens = lens();
        let patch = vec![0.7; 3 * 256];
        let err = estimate_blur(&patch, 16, BlurSearchSpec::default(), &lens, 0.02);
        assert!(matches!(err, Err(DfadError::NoCue)));
    }

    #[test]
    fn bad_search_spec_is_rejected() {
        let lens = lens();
        let spec = BlurSearchSpec {
            b_min: 3.0,
            b_max: -3.0,
            grid_count: 65,
            refine: true,
        };
        assert!(matches!(
            DfadSearcher::new(&lens, spec),
            Err(DfadError::BadSpec(_))
        ));
    }

    #[test]
    fn constant_image_depth_map_fully_masked() {
        let l = lens();
        let img = RgbImage::from_fn(64, 64, |_, _| [0.6, 0.6, 0.6]);
        let spec = BlurSearchSpec {
            grid_count: 9,
            ..BlurSearchSpec::default()
        };
        let map = dfad_depth_map(&img, &l, spec, 16, 0.02).unwrap();
        assert!(map.cue_mask.iter().all(|&m| !m));
        assert!(map.distance_mm.iter().all(|d| d.is_nan()));
    }

    #[test]
    fn image_smaller_than_window_is_error() {
        let l = lens();
        let img = RgbImage::new(8, 8);
        assert!(matches!(
            dfad_depth_map(&img, &l, BlurSearchSpec::default(), 16, 0.02),
            Err(DfadError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn ccaz_roundtrip() {
        let dir = std::env::temp_dir().join("ccadepth_dfad_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.ccaz");
        let data = vec![1100.0, f64::NAN, 2400.0, 1500.0];
        write_ccaz(&path, 2, 2, &data).unwrap();
        let (w, h, back) = read_ccaz(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(back[0], 1100.0);
        assert!(back[1].is_nan());
        assert_eq!(back[2], 2400.0);
    }
}
