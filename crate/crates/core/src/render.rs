//! Synthetic CCA image rendering and patch datasets.
//!
//! A "capture" is a texture placed fronto-parallel at a known distance and
//! blurred with the per-channel, per-position PSFs from [`crate::optics`].
//! Shift variance is handled block-wise: the image is tiled and each block
//! convolved with the PSF of its center. Patches are sampled from edge/texture
//! regions only and serialized with their ground truth.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::ToolConfig;
use crate::image::{mean_gradient_magnitude, RgbImage};
use crate::optics::{
    blur_from_distance, distance_from_blur, psf, AberrationField, Channel, LensConfig, OpticsError,
    SensorPos, SignedBlur,
};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("texture {width}x{height} smaller than kernel support {support}")]
    TextureTooSmall {
        width: usize,
        height: usize,
        support: usize,
    },
    #[error("image {width}x{height} smaller than one {side}x{side} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        side: usize,
    },
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset file: {0}")]
    Format(String),
    #[error("texture source `{0}`: {1}")]
    TextureSource(String, String),
}

/// Deterministic substream derivation (splitmix64 over seed and tags).
pub fn substream(seed: u64, tag: u64, idx: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15) ^ idx.wrapping_mul(0xbf58476d1ce4e5b9);
    for _ in 0..3 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        z = x ^ (x >> 31);
    }
    z
}

const TAG_TEXTURE: u64 = 1;
const TAG_RENDER_NOISE: u64 = 2;
const TAG_EXTRACT: u64 = 3;
const TAG_TEXTURE_PREP: u64 = 4;
const TAG_LABEL_NOISE: u64 = 5;

/// Spatially-varying convolution parameters.
#[derive(Debug, Clone, Copy)]
pub struct RenderParams {
    pub block_size: usize,
    pub noise_sigma: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            block_size: 32,
            noise_sigma: 0.0,
        }
    }
}

fn normalized_center(px: f64, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 * px / (extent as f64 - 1.0) - 1.0
    }
}

/// Render a fronto-parallel texture at distance `u_mm`.
///
/// Per channel, the image is tiled into `block_size` blocks and each block is
/// convolved (true convolution, replicated borders) with the PSF evaluated at
/// the block center. Optional additive Gaussian sensor noise, then clamp.
pub fn render_flat(
    texture: &RgbImage,
    u_mm: f64,
    lens: &LensConfig,
    ab: &AberrationField,
    params: &RenderParams,
    seed: u64,
) -> Result<RgbImage, RenderError> {
    let w = texture.width;
    let h = texture.height;
    let bs = params.block_size.max(1);
    let blocks_x = w.div_ceil(bs);
    let blocks_y = h.div_ceil(bs);

    struct BlockJob {
        x0: usize,
        y0: usize,
        bw: usize,
        bh: usize,
        kernels: [crate::optics::PsfKernel; 3],
    }

    let mut jobs = Vec::with_capacity(blocks_x * blocks_y);
    let mut max_support = 1usize;
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let x0 = bx * bs;
            let y0 = by * bs;
            let bw = bs.min(w - x0);
            let bh = bs.min(h - y0);
            let cx = x0 as f64 + (bw as f64 - 1.0) / 2.0;
            let cy = y0 as f64 + (bh as f64 - 1.0) / 2.0;
            let pos = SensorPos::new(normalized_center(cx, w), normalized_center(cy, h));
            let b = blur_from_distance(lens, u_mm, pos, ab)?;
            let kernels = [
                psf(lens, b, Channel::R, pos, ab),
                psf(lens, b, Channel::G, pos, ab),
                psf(lens, b, Channel::B, pos, ab),
            ];
            for k in &kernels {
                max_support = max_support.max(k.side);
            }
            jobs.push(BlockJob {
                x0,
                y0,
                bw,
                bh,
                kernels,
            });
        }
    }
    if w < max_support || h < max_support {
        return Err(RenderError::TextureTooSmall {
            width: w,
            height: h,
            support: max_support,
        });
    }

    let rendered: Vec<(usize, Vec<[f64; 3]>)> = jobs
        .par_iter()
        .enumerate()
        .map(|(bi, job)| {
            let mut out = vec![[0.0f64; 3]; job.bw * job.bh];
            for c in 0..3 {
                let k = &job.kernels[c];
                let half = k.half();
                for yy in 0..job.bh {
                    for xx in 0..job.bw {
                        let px = (job.x0 + xx) as i64;
                        let py = (job.y0 + yy) as i64;
                        let mut acc = 0.0;
                        for ty in -half..=half {
                            for tx in -half..=half {
                                let wgt = k.tap(tx, ty);
                                if wgt != 0.0 {
                                    acc += wgt * texture.get_clamped(c, px - tx, py - ty);
                                }
                            }
                        }
                        out[yy * job.bw + xx][c] = acc;
                    }
                }
            }
            (bi, out)
        })
        .collect();

    let mut img = RgbImage::new(w, h);
    for (bi, data) in rendered {
        let job = &jobs[bi];
        for yy in 0..job.bh {
            for xx in 0..job.bw {
                let v = data[yy * job.bw + xx];
                for c in 0..3 {
                    img.set(c, job.x0 + xx, job.y0 + yy, v[c]);
                }
            }
        }
    }

    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, TAG_RENDER_NOISE, 0));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let n = gaussian(&mut rng) * params.noise_sigma;
                    let v = img.get(c, x, y) + n;
                    img.set(c, x, y, v);
                }
            }
        }
    }
    Ok(img)
}

/// Standard normal via Box-Muller (two uniform draws per sample).
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Two fronto-parallel planes: columns left of the split at `left_mm`,
/// the rest at `right_mm`. Blur is not mixed across the seam.
pub fn render_two_plane(
    texture: &RgbImage,
    left_mm: f64,
    right_mm: f64,
    lens: &LensConfig,
    ab: &AberrationField,
    params: &RenderParams,
    seed: u64,
) -> Result<RgbImage, RenderError> {
    let left = render_flat(texture, left_mm, lens, ab, params, seed)?;
    let right = render_flat(texture, right_mm, lens, ab, params, seed)?;
    let split = texture.width / 2;
    let mut img = RgbImage::new(texture.width, texture.height);
    for c in 0..3 {
        for y in 0..texture.height {
            for x in 0..texture.width {
                let v = if x < split {
                    left.get(c, x, y)
                } else {
                    right.get(c, x, y)
                };
                img.set(c, x, y, v);
            }
        }
    }
    Ok(img)
}

/// One labeled training/test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// Stored patch side (16, or 16 + 2*crop_margin for train splits).
    pub side: usize,
    /// 3 * side * side values, planes R,G,B row-major.
    pub planes: Vec<f32>,
    /// Normalized patch-center sensor coordinates in [-1,1]^2.
    pub pos: (f32, f32),
    pub distance_mm: f32,
    /// Signed blur of the generating configuration at this position.
    pub blur_px: f32,
}

impl PatchSample {
    /// Ideal-lens blur implied by the ground-truth distance: the regression
    /// target and evaluation reference (deaberrated).
    pub fn ideal_blur_px(&self, lens: &LensConfig) -> f64 {
        blur_from_distance(
            lens,
            self.distance_mm as f64,
            SensorPos::CENTER,
            &AberrationField::ideal(),
        )
        .map(|b| b.px)
        .unwrap_or(0.0)
    }

    pub fn radius(&self) -> f64 {
        ((self.pos.0 as f64).powi(2) + (self.pos.1 as f64).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractOutcome {
    pub requested: usize,
    pub found: usize,
}

impl ExtractOutcome {
    pub fn shortfall(&self) -> bool {
        self.found < self.requested
    }
}

/// Uniformly random non-overlapping windows whose mean gradient magnitude
/// passes `tau_g`. Deterministic for a given seed.
pub fn extract_patches(
    img: &RgbImage,
    u_mm: f64,
    lens: &LensConfig,
    ab: &AberrationField,
    tau_g: f64,
    n: usize,
    side: usize,
    seed: u64,
) -> Result<(Vec<PatchSample>, ExtractOutcome), RenderError> {
    if img.width < side || img.height < side {
        return Err(RenderError::ImageTooSmall {
            width: img.width,
            height: img.height,
            side,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, TAG_EXTRACT, 0));
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    let mut samples = Vec::new();
    let max_attempts = 400 * n + 500;
    let mut attempts = 0;
    while samples.len() < n && attempts < max_attempts {
        attempts += 1;
        let x0 = rng.random_range(0..=img.width - side);
        let y0 = rng.random_range(0..=img.height - side);
        let overlaps = accepted
            .iter()
            .any(|&(ax, ay)| x0 + side > ax && ax + side > x0 && y0 + side > ay && ay + side > y0);
        if overlaps {
            continue;
        }
        let window = img.window(x0, y0, side);
        if mean_gradient_magnitude(&window, side) < tau_g {
            continue;
        }
        let cx = x0 as f64 + (side as f64 - 1.0) / 2.0;
        let cy = y0 as f64 + (side as f64 - 1.0) / 2.0;
        // ground truth computed from the f32-rounded stored fields so that
        // records are exactly self-consistent for readers of the file
        let pos_f32 = (
            normalized_center(cx, img.width) as f32,
            normalized_center(cy, img.height) as f32,
        );
        let dist_f32 = u_mm as f32;
        let pos = SensorPos::new(pos_f32.0 as f64, pos_f32.1 as f64);
        let blur = blur_from_distance(lens, dist_f32 as f64, pos, ab)?;
        accepted.push((x0, y0));
        samples.push(PatchSample {
            side,
            planes: window.iter().map(|&v| v as f32).collect(),
            pos: pos_f32,
            distance_mm: dist_f32,
            blur_px: blur.px as f32,
        });
    }
    let outcome = ExtractOutcome {
        requested: n,
        found: samples.len(),
    };
    Ok((samples, outcome))
}

// ---------------------------------------------------------------------------
// procedural textures
// ---------------------------------------------------------------------------

/// What a generated texture is made of. Flavors cycle through the dataset so
/// the splits contain saturated-color, grayscale, and mixed content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureFlavor {
    MosaicSaturated,
    MosaicGray,
    MosaicMixed,
    ValueNoise,
    Strokes,
}

impl TextureFlavor {
    pub const CYCLE: [TextureFlavor; 5] = [
        TextureFlavor::MosaicSaturated,
        TextureFlavor::MosaicGray,
        TextureFlavor::MosaicMixed,
        TextureFlavor::ValueNoise,
        TextureFlavor::Strokes,
    ];
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Deterministic procedural texture. Values may exceed 1 before the final
/// clamp so overexposed (clipped) plateaus occur, which matters for the
/// reliability experiments.
pub fn procedural_texture(
    width: usize,
    height: usize,
    flavor: TextureFlavor,
    seed: u64,
) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, TAG_TEXTURE, flavor as u64));
    let mut raw = vec![[0.0f64; 3]; width * height];

    let fill_rect =
        |raw: &mut Vec<[f64; 3]>, x0: usize, y0: usize, w: usize, h: usize, color: [f64; 3]| {
            for y in y0..(y0 + h).min(height) {
                for x in x0..(x0 + w).min(width) {
                    raw[y * width + x] = color;
                }
            }
        };

    let pick_color = |rng: &mut ChaCha8Rng, flavor: TextureFlavor| -> [f64; 3] {
        match flavor {
            TextureFlavor::MosaicSaturated => hsv_to_rgb(
                rng.random::<f64>(),
                0.85 + 0.15 * rng.random::<f64>(),
                // up to 1.4 before the clamp, so some cells clip
                0.25 + 1.15 * rng.random::<f64>(),
            ),
            TextureFlavor::MosaicGray => {
                // bimodal grays so cell boundaries keep contrast under blur
                let r = rng.random::<f64>();
                let v = if rng.random::<bool>() {
                    0.7 + 0.5 * r
                } else {
                    0.3 * r
                };
                [v, v, v]
            }
            _ => {
                let roll: f64 = rng.random();
                if roll < 0.25 {
                    let v = rng.random::<f64>() * 1.3; // may clip
                    [v, v, v]
                } else if roll < 0.5 {
                    hsv_to_rgb(
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                        1.3 * rng.random::<f64>(),
                    )
                } else {
                    let v = rng.random::<f64>();
                    hsv_to_rgb(rng.random::<f64>(), 0.3 * rng.random::<f64>(), v)
                }
            }
        }
    };

    match flavor {
        TextureFlavor::MosaicSaturated | TextureFlavor::MosaicGray | TextureFlavor::MosaicMixed => {
            let base = pick_color(&mut rng, flavor);
            fill_rect(&mut raw, 0, 0, width, height, base);
            let cells = 180 + rng.random_range(0..80);
            for _ in 0..cells {
                let w = rng.random_range(width / 40..width / 8);
                let h = rng.random_range(height / 40..height / 8);
                let x0 = rng.random_range(0..width);
                let y0 = rng.random_range(0..height);
                let color = pick_color(&mut rng, flavor);
                fill_rect(&mut raw, x0, y0, w, h, color);
            }
        }
        TextureFlavor::ValueNoise => {
            let cell = rng.random_range(5..12usize);
            let gw = width / cell + 2;
            let gh = height / cell + 2;
            let grayscale = rng.random::<f64>() < 0.5;
            let lattice: Vec<[f64; 3]> = (0..gw * gh)
                .map(|_| {
                    // bimodal values keep contrast after heavy blur
                    let peak = |r: f64| if r < 0.5 { 0.1 * r } else { 0.95 + 0.1 * (r - 1.0) };
                    if grayscale {
                        let v = peak(rng.random::<f64>());
                        [v, v, v]
                    } else {
                        [
                            peak(rng.random()),
                            peak(rng.random()),
                            peak(rng.random()),
                        ]
                    }
                })
                .collect();
            for y in 0..height {
                for x in 0..width {
                    let fx = x as f64 / cell as f64;
                    let fy = y as f64 / cell as f64;
                    let x0 = fx.floor() as usize;
                    let y0 = fy.floor() as usize;
                    let tx = fx - x0 as f64;
                    let ty = fy - y0 as f64;
                    let mut px = [0.0; 3];
                    for c in 0..3 {
                        let v00 = lattice[y0 * gw + x0][c];
                        let v10 = lattice[y0 * gw + x0 + 1][c];
                        let v01 = lattice[(y0 + 1) * gw + x0][c];
                        let v11 = lattice[(y0 + 1) * gw + x0 + 1][c];
                        px[c] = v00 * (1.0 - tx) * (1.0 - ty)
                            + v10 * tx * (1.0 - ty)
                            + v01 * (1.0 - tx) * ty
                            + v11 * tx * ty;
                    }
                    raw[y * width + x] = px;
                }
            }
        }
        TextureFlavor::Strokes => {
            let bg = 0.15 + 0.7 * rng.random::<f64>();
            fill_rect(&mut raw, 0, 0, width, height, [bg, bg, bg]);
            let strokes = 400 + rng.random_range(0..200);
            for _ in 0..strokes {
                let x0 = rng.random_range(0..width) as f64;
                let y0 = rng.random_range(0..height) as f64;
                let len = rng.random_range(8..48) as f64;
                let angle = rng.random::<f64>() * std::f64::consts::TAU;
                let thick = rng.random_range(2..6i64);
                let color = if rng.random::<f64>() < 0.5 {
                    let v = rng.random::<f64>() * 1.2;
                    [v, v, v]
                } else {
                    hsv_to_rgb(rng.random(), rng.random(), rng.random::<f64>() * 1.2)
                };
                let steps = len as usize * 2;
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let px = x0 + angle.cos() * len * t;
                    let py = y0 + angle.sin() * len * t;
                    for dy in -thick / 2..=thick / 2 {
                        for dx in -thick / 2..=thick / 2 {
                            let xi = px as i64 + dx;
                            let yi = py as i64 + dy;
                            if xi >= 0 && yi >= 0 && (xi as usize) < width && (yi as usize) < height
                            {
                                raw[yi as usize * width + xi as usize] = color;
                            }
                        }
                    }
                }
            }
        }
    }

    RgbImage::from_fn(width, height, |x, y| raw[y * width + x])
}

/// Render-time anti-context randomization: flips plus bilinear rescale.
pub fn randomize_texture(texture: &RgbImage, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, TAG_TEXTURE_PREP, 0));
    let hflip = rng.random::<bool>();
    let vflip = rng.random::<bool>();
    let scale = 0.8 + 0.5 * rng.random::<f64>();
    let w = texture.width;
    let h = texture.height;
    RgbImage::from_fn(w, h, |x, y| {
        let mut sx = x as f64 / scale;
        let mut sy = y as f64 / scale;
        if hflip {
            sx = (w as f64 - 1.0) - sx.min(w as f64 - 1.0);
        }
        if vflip {
            sy = (h as f64 - 1.0) - sy.min(h as f64 - 1.0);
        }
        let x0 = sx.floor().max(0.0) as i64;
        let y0 = sy.floor().max(0.0) as i64;
        let tx = (sx - x0 as f64).clamp(0.0, 1.0);
        let ty = (sy - y0 as f64).clamp(0.0, 1.0);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let v00 = texture.get_clamped(c, x0, y0);
            let v10 = texture.get_clamped(c, x0 + 1, y0);
            let v01 = texture.get_clamped(c, x0, y0 + 1);
            let v11 = texture.get_clamped(c, x0 + 1, y0 + 1);
            out[c] = v00 * (1.0 - tx) * (1.0 - ty)
                + v10 * tx * (1.0 - ty)
                + v01 * (1.0 - tx) * ty
                + v11 * tx * ty;
        }
        out
    })
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// In-memory dataset: homogeneous patch side.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub samples: Vec<PatchSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRecord {
    pub distance_mm: f64,
    /// Ideal signed blur of the grid point (the equally spaced coordinate).
    pub blur_px: f64,
    pub count: usize,
    pub texture: String,
    pub shortfall: bool,
}

/// Plain-text manifest: config snapshot, distance grid, per-distance counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub patch_side: usize,
    pub samples: usize,
    pub config_snapshot: String,
    pub distances: Vec<DistanceRecord>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("ccad_manifest=1\n");
        out.push_str(&format!("split={}\n", self.split.name()));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("patch_side={}\n", self.patch_side));
        out.push_str(&format!("samples={}\n", self.samples));
        out.push_str(&format!("distance_count={}\n", self.distances.len()));
        for (i, d) in self.distances.iter().enumerate() {
            out.push_str(&format!("distance_mm.{i}={}\n", d.distance_mm));
            out.push_str(&format!("blur_px.{i}={}\n", d.blur_px));
            out.push_str(&format!("count.{i}={}\n", d.count));
            out.push_str(&format!("texture.{i}={}\n", d.texture));
            out.push_str(&format!("shortfall.{i}={}\n", d.shortfall));
        }
        for line in self.config_snapshot.lines() {
            out.push_str(&format!("cfg.{line}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, RenderError> {
        let mut cfg_lines = Vec::new();
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            if let Some(rest) = k.strip_prefix("cfg.") {
                cfg_lines.push(format!("{rest}={v}"));
                continue;
            }
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String, RenderError> {
            map.get(k)
                .cloned()
                .ok_or_else(|| RenderError::Format(format!("manifest missing `{k}`")))
        };
        if get("ccad_manifest")? != "1" {
            return Err(RenderError::Format("unsupported manifest version".into()));
        }
        let split = match get("split")?.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(RenderError::Format(format!("bad split `{other}`"))),
        };
        let seed = get("seed")?
            .parse()
            .map_err(|_| RenderError::Format("bad seed".into()))?;
        let patch_side = get("patch_side")?
            .parse()
            .map_err(|_| RenderError::Format("bad patch_side".into()))?;
        let samples = get("samples")?
            .parse()
            .map_err(|_| RenderError::Format("bad samples".into()))?;
        let count: usize = get("distance_count")?
            .parse()
            .map_err(|_| RenderError::Format("bad distance_count".into()))?;
        let mut distances = Vec::with_capacity(count);
        for i in 0..count {
            distances.push(DistanceRecord {
                distance_mm: get(&format!("distance_mm.{i}"))?
                    .parse()
                    .map_err(|_| RenderError::Format("bad distance_mm".into()))?,
                blur_px: get(&format!("blur_px.{i}"))?
                    .parse()
                    .map_err(|_| RenderError::Format("bad blur_px".into()))?,
                count: get(&format!("count.{i}"))?
                    .parse()
                    .map_err(|_| RenderError::Format("bad count".into()))?,
                texture: get(&format!("texture.{i}"))?,
                shortfall: get(&format!("shortfall.{i}"))? == "true",
            });
        }
        Ok(Self {
            split,
            seed,
            patch_side,
            samples,
            config_snapshot: cfg_lines.join("\n") + "\n",
            distances,
        })
    }
}

const CCAD_MAGIC: &[u8; 4] = b"CCAD";
const CCAD_VERSION: u32 = 1;

/// Serialize a dataset to the binary sample format.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), RenderError> {
    let side = ds.side as u32;
    let mut buf = Vec::with_capacity(16 + ds.samples.len() * (3 * ds.side * ds.side + 4) * 4);
    buf.extend_from_slice(CCAD_MAGIC);
    buf.extend_from_slice(&CCAD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&side.to_le_bytes());
    for s in &ds.samples {
        debug_assert_eq!(s.side, ds.side);
        for v in &s.planes {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.pos.0.to_le_bytes());
        buf.extend_from_slice(&s.pos.1.to_le_bytes());
        buf.extend_from_slice(&s.distance_mm.to_le_bytes());
        buf.extend_from_slice(&s.blur_px.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, RenderError> {
    let data = std::fs::read(path)?;
    if data.len() < 16 || &data[0..4] != CCAD_MAGIC {
        return Err(RenderError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != CCAD_VERSION {
        return Err(RenderError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let count = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let side = u32::from_le_bytes(data[12..16].try_into().unwrap()) as usize;
    let rec_floats = 3 * side * side + 4;
    let need = 16 + count * rec_floats * 4;
    if data.len() != need {
        return Err(RenderError::Format(format!(
            "expected {need} bytes, found {}",
            data.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    let mut off = 16;
    let read_f32 = |off: &mut usize| {
        let v = f32::from_le_bytes(data[*off..*off + 4].try_into().unwrap());
        *off += 4;
        v
    };
    for _ in 0..count {
        let mut planes = Vec::with_capacity(3 * side * side);
        for _ in 0..3 * side * side {
            planes.push(read_f32(&mut off));
        }
        let pos = (read_f32(&mut off), read_f32(&mut off));
        let distance_mm = read_f32(&mut off);
        let blur_px = read_f32(&mut off);
        samples.push(PatchSample {
            side,
            planes,
            pos,
            distance_mm,
            blur_px,
        });
    }
    Ok(Dataset { side, samples })
}

/// The distance grid: signed blur equally spaced between the ideal blur at
/// `near_mm` and at `far_mm`, mapped back through the ideal inverse.
pub fn blur_spaced_distances(
    lens: &LensConfig,
    near_mm: f64,
    far_mm: f64,
    count: usize,
) -> Result<Vec<(f64, f64)>, OpticsError> {
    let ab = AberrationField::ideal();
    let b0 = blur_from_distance(lens, near_mm, SensorPos::CENTER, &ab)?.px;
    let b1 = blur_from_distance(lens, far_mm, SensorPos::CENTER, &ab)?.px;
    let mut grid = Vec::with_capacity(count);
    for i in 0..count {
        let b = if count == 1 {
            b0
        } else {
            b0 + (b1 - b0) * i as f64 / (count as f64 - 1.0)
        };
        let u = distance_from_blur(lens, SignedBlur::new(b))?;
        grid.push((u, b));
    }
    Ok(grid)
}

/// Load texture sources: PPM files from a directory (sorted by name), or
/// procedural textures when `texture_dir` is empty.
fn texture_bank(
    cfg: &ToolConfig,
    split: Split,
    seed: u64,
) -> Result<Vec<(String, RgbImage)>, RenderError> {
    let n = match split {
        Split::Train => cfg.train_textures.max(1),
        Split::Test => cfg.test_textures.max(1),
    };
    if cfg.texture_dir.is_empty() {
        let base = match split {
            Split::Train => 0u64,
            Split::Test => 1_000_000u64,
        };
        Ok((0..n)
            .map(|i| {
                let flavor = TextureFlavor::CYCLE[i % TextureFlavor::CYCLE.len()];
                let name = format!("{}_proc_{i}_{flavor:?}", split.name());
                (
                    name,
                    procedural_texture(
                        cfg.sensor_width,
                        cfg.sensor_height,
                        flavor,
                        substream(seed, TAG_TEXTURE, base + i as u64),
                    ),
                )
            })
            .collect())
    } else {
        let dir = Path::new(&cfg.texture_dir);
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| RenderError::TextureSource(cfg.texture_dir.clone(), e.to_string()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        names.sort();
        if names.len() < cfg.train_textures + cfg.test_textures {
            return Err(RenderError::TextureSource(
                cfg.texture_dir.clone(),
                format!(
                    "need {} ppm files, found {}",
                    cfg.train_textures + cfg.test_textures,
                    names.len()
                ),
            ));
        }
        let range = match split {
            Split::Train => 0..cfg.train_textures,
            Split::Test => cfg.train_textures..cfg.train_textures + cfg.test_textures,
        };
        range
            .map(|i| {
                let p = &names[i];
                let img = RgbImage::read_ppm(p).map_err(|e| {
                    RenderError::TextureSource(p.display().to_string(), e.to_string())
                })?;
                Ok((p.display().to_string(), img))
            })
            .collect()
    }
}

/// Build one split: render each grid distance against its texture, extract
/// patches, and assemble the dataset + manifest. Distances fan out in
/// parallel with per-distance seeds and an ordered merge.
pub fn build_split(
    cfg: &ToolConfig,
    split: Split,
    seed: u64,
) -> Result<(Dataset, DatasetManifest), RenderError> {
    let lens = cfg.lens().map_err(|e| RenderError::Format(e.to_string()))?;
    let ab = cfg.aberration();
    let grid = blur_spaced_distances(&lens, cfg.near_mm, cfg.far_mm, cfg.distance_count)?;
    let textures = texture_bank(cfg, split, seed)?;
    let side = match split {
        Split::Train => cfg.patch_side + 2 * cfg.crop_margin,
        Split::Test => cfg.patch_side,
    };
    let per_distance = match split {
        Split::Train => cfg.patches_per_distance,
        Split::Test => (cfg.patches_per_distance / 5).max(1),
    };
    let params = RenderParams {
        block_size: cfg.block_size,
        noise_sigma: cfg.noise_sigma,
    };
    let split_tag = match split {
        Split::Train => 0x7261u64,
        Split::Test => 0x7465u64,
    };

    let per: Result<Vec<_>, RenderError> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(u_mm, blur))| {
            let dseed = substream(seed, split_tag, i as u64);
            let (tex_name, tex) = &textures[i % textures.len()];
            let prepared = randomize_texture(tex, dseed);
            let img = render_flat(&prepared, u_mm, &lens, &ab, &params, dseed)?;
            let (samples, outcome) =
                extract_patches(&img, u_mm, &lens, &ab, cfg.tau_g, per_distance, side, dseed)?;
            Ok((
                samples,
                DistanceRecord {
                    distance_mm: u_mm,
                    blur_px: blur,
                    count: outcome.found,
                    texture: tex_name.clone(),
                    shortfall: outcome.shortfall(),
                },
            ))
        })
        .collect();
    let per = per?;

    let mut samples = Vec::new();
    let mut records = Vec::new();
    for (s, r) in per {
        samples.extend(s);
        records.push(r);
    }
    let manifest = DatasetManifest {
        split,
        seed,
        patch_side: side,
        samples: samples.len(),
        config_snapshot: cfg.snapshot(),
        distances: records,
    };
    Ok((Dataset { side, samples }, manifest))
}

/// Build both splits and write `train.ccad`, `test.ccad`, and manifests.
pub fn build_dataset(
    cfg: &ToolConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest), RenderError> {
    std::fs::create_dir_all(out_dir)?;
    let (train, train_manifest) = build_split(cfg, Split::Train, seed)?;
    let (test, test_manifest) = build_split(cfg, Split::Test, seed)?;
    write_dataset(&out_dir.join("train.ccad"), &train)?;
    write_dataset(&out_dir.join("test.ccad"), &test)?;
    let mut f = std::fs::File::create(out_dir.join("train_manifest.txt"))?;
    f.write_all(train_manifest.to_text().as_bytes())?;
    let mut f = std::fs::File::create(out_dir.join("test_manifest.txt"))?;
    f.write_all(test_manifest.to_text().as_bytes())?;
    Ok((train_manifest, test_manifest))
}

/// Perturb a fraction of blur labels with large offsets (stress datasets for
/// the loss-stability comparison). Deterministic per seed.
pub fn perturb_labels(ds: &mut Dataset, fraction: f64, magnitude_px: f64, seed: u64) {
    if fraction <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, TAG_LABEL_NOISE, 0));
    for s in &mut ds.samples {
        if rng.random::<f64>() < fraction {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let offset = magnitude_px * (0.75 + 0.5 * rng.random::<f64>()) * sign;
            s.blur_px += offset as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ToolConfig {
        ToolConfig {
            sensor_width: 96,
            sensor_height: 96,
            distance_count: 3,
            patches_per_distance: 10,
            train_textures: 2,
            test_textures: 1,
            noise_sigma: 0.0,
            ..ToolConfig::default()
        }
    }

    #[test]
    fn delta_psf_renders_identity() {
        let lens = LensConfig::reference();
        let tex = procedural_texture(64, 64, TextureFlavor::MosaicMixed, 7);
        let out = render_flat(
            &tex,
            1500.0,
            &lens,
            &AberrationField::ideal(),
            &RenderParams::default(),
            0,
        )
        .unwrap();
        assert_eq!(out, tex);
    }

    #[test]
    fn constant_texture_stays_constant() {
        let lens = LensConfig::reference();
        let tex = RgbImage::from_fn(80, 80, |_, _| [0.42, 0.55, 0.33]);
        let out = render_flat(
            &tex,
            1200.0,
            &lens,
            &AberrationField::ideal(),
            &RenderParams::default(),
            0,
        )
        .unwrap();
        for c in 0..3 {
            let want = tex.get(c, 0, 0);
            for y in 0..80 {
                for x in 0..80 {
                    assert!((out.get(c, x, y) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impulse_response_reproduces_psf_taps() {
        let lens = LensConfig::reference();
        let ab = AberrationField::ideal();
        let mut tex = RgbImage::new(96, 96);
        for c in 0..3 {
            tex.set(c, 48, 48, 1.0);
        }
        let out = render_flat(&tex, 1100.0, &lens, &ab, &RenderParams::default(), 0).unwrap();
        let b = blur_from_distance(&lens, 1100.0, SensorPos::CENTER, &ab).unwrap();
        for c in Channel::ALL {
            let k = psf(&lens, b, c, SensorPos::CENTER, &ab);
            let h = k.half();
            for ty in -h..=h {
                for tx in -h..=h {
                    let v = out.get(c.index(), (48 + tx) as usize, (48 + ty) as usize);
                    assert!(
                        (v - k.tap(tx, ty)).abs() < 1e-9,
                        "channel {c:?} tap ({tx},{ty}): {v} vs {}",
                        k.tap(tx, ty)
                    );
                }
            }
        }
    }

    #[test]
    fn too_small_texture_is_size_error() {
        let lens = LensConfig::reference();
        let tex = RgbImage::new(8, 8);
        let err = render_flat(
            &tex,
            1100.0,
            &lens,
            &AberrationField::ideal(),
            &RenderParams::default(),
            0,
        );
        assert!(matches!(err, Err(RenderError::TextureTooSmall { .. })));
    }

    #[test]
    fn extract_from_constant_image_is_empty() {
        let lens = LensConfig::reference();
        let img = RgbImage::from_fn(64, 64, |_, _| [0.5, 0.5, 0.5]);
        let (samples, outcome) = extract_patches(
            &img,
            1500.0,
            &lens,
            &AberrationField::ideal(),
            0.02,
            8,
            16,
            1,
        )
        .unwrap();
        assert!(samples.is_empty());
        assert!(outcome.shortfall());
    }

    #[test]
    fn extract_zero_requested_is_empty() {
        let lens = LensConfig::reference();
        let img = procedural_texture(64, 64, TextureFlavor::Strokes, 3);
        let (samples, outcome) = extract_patches(
            &img,
            1500.0,
            &lens,
            &AberrationField::ideal(),
            0.02,
            0,
            16,
            1,
        )
        .unwrap();
        assert!(samples.is_empty());
        assert!(!outcome.shortfall());
    }

    #[test]
    fn checkerboard_extraction_is_disjoint_and_deterministic() {
        let lens = LensConfig::reference();
        let img = RgbImage::from_fn(128, 128, |x, y| {
            let v = if (x / 4 + y / 4) % 2 == 0 { 0.9 } else { 0.1 };
            [v, v, v]
        });
        let run = || {
            extract_patches(
                &img,
                1500.0,
                &lens,
                &AberrationField::ideal(),
                0.02,
                10,
                16,
                99,
            )
            .unwrap()
        };
        let (a, outcome) = run();
        let (b, _) = run();
        assert_eq!(a.len(), 10);
        assert!(!outcome.shortfall());
        assert_eq!(a, b);
        // brute-force pairwise overlap check on recovered window centers
        let centers: Vec<(f64, f64)> = a
            .iter()
            .map(|s| {
                (
                    (s.pos.0 as f64 + 1.0) / 2.0 * 127.0,
                    (s.pos.1 as f64 + 1.0) / 2.0 * 127.0,
                )
            })
            .collect();
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                let dx = (centers[i].0 - centers[j].0).abs();
                let dy = (centers[i].1 - centers[j].1).abs();
                assert!(dx >= 16.0 || dy >= 16.0, "windows {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn blur_grid_is_equally_spaced_in_blur() {
        let lens = LensConfig::reference();
        let grid = blur_spaced_distances(&lens, 1100.0, 2400.0, 100).unwrap();
        let step = grid[1].1 - grid[0].1;
        for w in grid.windows(2) {
            assert!(((w[1].1 - w[0].1) - step).abs() < 1e-9);
        }
        assert!((grid[0].0 - 1100.0).abs() < 1e-6);
        assert!((grid[99].0 - 2400.0).abs() < 1e-6);
    }

    #[test]
    fn single_position_at_focus_has_zero_blur() {
        let cfg = ToolConfig {
            near_mm: 1500.0,
            far_mm: 1500.0,
            distance_count: 1,
            patches_per_distance: 5,
            ..small_cfg()
        };
        let (ds, manifest) = build_split(&cfg, Split::Test, 11).unwrap();
        assert_eq!(manifest.distances.len(), 1);
        assert!(!ds.samples.is_empty());
        for s in &ds.samples {
            assert_eq!(s.blur_px, 0.0);
        }
    }

    #[test]
    fn manifest_counts_match_dataset() {
        let cfg = small_cfg();
        let (ds, manifest) = build_split(&cfg, Split::Train, 5).unwrap();
        let total: usize = manifest.distances.iter().map(|d| d.count).sum();
        assert_eq!(total, ds.samples.len());
        assert_eq!(manifest.samples, ds.samples.len());
        assert_eq!(manifest.patch_side, cfg.patch_side + 2 * cfg.crop_margin);
    }

    #[test]
    fn stored_blur_matches_generating_config() {
        let cfg = ToolConfig {
            fc_coeff: 2.0,
            ..small_cfg()
        };
        let lens = cfg.lens().unwrap();
        let ab = cfg.aberration();
        let (ds, _) = build_split(&cfg, Split::Test, 21).unwrap();
        for s in &ds.samples {
            let pos = SensorPos::new(s.pos.0 as f64, s.pos.1 as f64);
            let b = blur_from_distance(&lens, s.distance_mm as f64, pos, &ab).unwrap();
            assert_eq!(s.blur_px, b.px as f32);
        }
    }

    #[test]
    fn dataset_file_roundtrip_and_determinism() {
        let cfg = small_cfg();
        let dir = std::env::temp_dir().join("ccadepth_render_test");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        build_dataset(&cfg, 42, &dir).unwrap();
        let bytes_a = std::fs::read(dir.join("train.ccad")).unwrap();
        let manifest_a = std::fs::read(dir.join("train_manifest.txt")).unwrap();
        build_dataset(&cfg, 42, &dir).unwrap();
        let bytes_b = std::fs::read(dir.join("train.ccad")).unwrap();
        let manifest_b = std::fs::read(dir.join("train_manifest.txt")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(manifest_a, manifest_b);

        let ds = read_dataset(&dir.join("train.ccad")).unwrap();
        let manifest = DatasetManifest::from_text(&String::from_utf8(manifest_a).unwrap()).unwrap();
        assert_eq!(manifest.samples, ds.samples.len());
        let reparsed = DatasetManifest::from_text(&manifest.to_text()).unwrap();
        assert_eq!(manifest, reparsed);
    }

    #[test]
    fn two_plane_scene_has_two_blur_levels() {
        let lens = LensConfig::reference();
        let tex = procedural_texture(192, 96, TextureFlavor::Strokes, 9);
        let img = render_two_plane(
            &tex,
            1100.0,
            2400.0,
            &lens,
            &AberrationField::ideal(),
            &RenderParams::default(),
            0,
        )
        .unwrap();
        assert_eq!(img.width, 192);
        assert_eq!(img.height, 96);
    }

    #[test]
    fn label_perturbation_touches_expected_fraction() {
        let mut ds = Dataset {
            side: 16,
            samples: (0..1000)
                .map(|i| PatchSample {
                    side: 16,
                    planes: vec![0.0; 3 * 256],
                    pos: (0.0, 0.0),
                    distance_mm: 1500.0,
                    blur_px: i as f32 * 0.001,
                })
                .collect(),
        };
        let before: Vec<f32> = ds.samples.iter().map(|s| s.blur_px).collect();
        perturb_labels(&mut ds, 0.1, 8.0, 7);
        let changed = ds
            .samples
            .iter()
            .zip(&before)
            .filter(|(s, &b)| s.blur_px != b)
            .count();
        assert!((50..200).contains(&changed), "changed {changed}");
        for (s, &b) in ds.samples.iter().zip(&before) {
            if s.blur_px != b {
                assert!((s.blur_px - b).abs() >= 8.0 * 0.74);
            }
        }
    }
}
