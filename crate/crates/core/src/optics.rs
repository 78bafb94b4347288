//! Thin-lens signed-blur model and per-channel CCA point-spread functions.
//!
//! The aperture carries complementary color filters, so the R and B channels
//! see opposite halves of the pupil: their defocus kernels are half-Gaussians
//! leaning to opposite sides, and the lean flips sign at the focus distance.
//! The G channel sees the whole pupil; its kernel is the convolution of the
//! two halves. Signed blur is therefore recoverable from a single shot.
//!
//! Sign convention: positive blur radius means the object is *nearer* than
//! the focus distance, and the R kernel leans toward +x.
//!
//! Shift-variant aberrations are a deliberately small parametric model:
//! a quadratic field-curvature offset on the blur radius, a linear comatic
//! shear of the kernel along the radial direction, and per-channel radial
//! magnification for lateral chromatic aberration.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpticsError {
    #[error("non-physical object distance {distance_mm} mm (must exceed focal length {focal_mm} mm)")]
    NonPhysicalDistance { distance_mm: f64, focal_mm: f64 },
    #[error("blur {blur_px} px outside the invertible range for this lens")]
    BlurOutOfRange { blur_px: f64 },
    #[error("invalid lens config: {0}")]
    BadLens(String),
}

/// Color channel of the coded aperture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }
}

/// Thin-lens + aperture + sensor parameters defining the signed-blur model.
#[derive(Debug, Clone, PartialEq)]
pub struct LensConfig {
    pub focal_length_mm: f64,
    pub f_number: f64,
    pub focus_distance_mm: f64,
    pub pixel_pitch_mm: f64,
    pub sensor_width: usize,
    pub sensor_height: usize,
    /// Gaussian σ per pixel of |blur radius|.
    pub sigma_per_px: f64,
}

impl LensConfig {
    pub fn new(
        focal_length_mm: f64,
        f_number: f64,
        focus_distance_mm: f64,
        pixel_pitch_mm: f64,
        sensor_width: usize,
        sensor_height: usize,
        sigma_per_px: f64,
    ) -> Result<Self, OpticsError> {
        if !(focal_length_mm > 0.0) {
            return Err(OpticsError::BadLens("focal_length_mm must be > 0".into()));
        }
        if !(f_number > 0.0) {
            return Err(OpticsError::BadLens("f_number must be > 0".into()));
        }
        if !(focus_distance_mm > focal_length_mm) {
            return Err(OpticsError::BadLens(
                "focus_distance_mm must exceed focal_length_mm".into(),
            ));
        }
        if !(pixel_pitch_mm > 0.0) {
            return Err(OpticsError::BadLens("pixel_pitch_mm must be > 0".into()));
        }
        if !(sigma_per_px > 0.0) {
            return Err(OpticsError::BadLens("sigma_per_px must be > 0".into()));
        }
        Ok(Self {
            focal_length_mm,
            f_number,
            focus_distance_mm,
            pixel_pitch_mm,
            sensor_width,
            sensor_height,
            sigma_per_px,
        })
    }

    /// Reference lens used across tests: 50mm f/4 focused at 1500mm on a
    /// 0.01mm-pitch 512x512 sensor.
    pub fn reference() -> Self {
        Self::new(50.0, 4.0, 1500.0, 0.01, 512, 512, 0.5).unwrap()
    }

    pub fn aperture_diameter_mm(&self) -> f64 {
        self.focal_length_mm / self.f_number
    }

    /// Image distance for an object at `u_mm` (thin lens).
    fn image_distance_mm(&self, u_mm: f64) -> f64 {
        self.focal_length_mm * u_mm / (u_mm - self.focal_length_mm)
    }

    /// Sensor plane position: the image distance of the focus distance.
    fn sensor_plane_mm(&self) -> f64 {
        self.image_distance_mm(self.focus_distance_mm)
    }
}

/// Normalized sensor position, both components in [-1, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPos {
    pub x: f64,
    pub y: f64,
}

impl SensorPos {
    pub const CENTER: SensorPos = SensorPos { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Radial distance from the optical axis in normalized units.
    pub fn radius(&self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }
}

/// Signed defocus blur radius in pixels. Positive = nearer than focus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedBlur {
    pub px: f64,
}

impl SignedBlur {
    pub fn new(px: f64) -> Self {
        Self { px }
    }

    pub fn magnitude(&self) -> f64 {
        self.px.abs()
    }

    pub fn is_near_side(&self) -> bool {
        self.px > 0.0
    }
}

/// Parametric shift-variant PSF perturbation.
///
/// `field_curvature` adds `c_fc * r^2` pixels to the blur magnitude,
/// `coma` shears the kernel by `c_cm * r` along the radial direction, and
/// `lateral_chromatic` magnifies each channel radially by `s_c` (≈ 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AberrationField {
    pub field_curvature: f64,
    pub coma: f64,
    /// Radial scale factors for R, G, B.
    pub lateral_chromatic: [f64; 3],
}

impl AberrationField {
    pub fn ideal() -> Self {
        Self {
            field_curvature: 0.0,
            coma: 0.0,
            lateral_chromatic: [1.0, 1.0, 1.0],
        }
    }

    pub fn is_ideal(&self) -> bool {
        self.field_curvature == 0.0
            && self.coma == 0.0
            && self.lateral_chromatic == [1.0, 1.0, 1.0]
    }
}

impl Default for AberrationField {
    fn default() -> Self {
        Self::ideal()
    }
}

/// Signed blur radius of an object at distance `u_mm` seen at sensor
/// position `pos` under aberration `ab`.
pub fn blur_from_distance(
    lens: &LensConfig,
    u_mm: f64,
    pos: SensorPos,
    ab: &AberrationField,
) -> Result<SignedBlur, OpticsError> {
    if !(u_mm > lens.focal_length_mm) {
        return Err(OpticsError::NonPhysicalDistance {
            distance_mm: u_mm,
            focal_mm: lens.focal_length_mm,
        });
    }
    let v = lens.image_distance_mm(u_mm);
    let v_f = lens.sensor_plane_mm();
    let radius_mm = 0.5 * lens.aperture_diameter_mm() * (v - v_f).abs() / v;
    let mut magnitude_px = radius_mm / lens.pixel_pitch_mm;
    let r = pos.radius();
    magnitude_px = (magnitude_px + ab.field_curvature * r * r).max(0.0);
    let signed = if magnitude_px == 0.0 {
        0.0
    } else if u_mm < lens.focus_distance_mm {
        magnitude_px
    } else {
        -magnitude_px
    };
    Ok(SignedBlur::new(signed))
}

/// Exact algebraic inverse of [`blur_from_distance`] for the ideal lens.
pub fn distance_from_blur(lens: &LensConfig, b: SignedBlur) -> Result<f64, OpticsError> {
    if b.px == 0.0 {
        return Ok(lens.focus_distance_mm);
    }
    let aperture = lens.aperture_diameter_mm();
    let blur_mm = b.px * lens.pixel_pitch_mm;
    let denom = 1.0 - 2.0 * blur_mm / aperture;
    if denom <= 0.0 {
        return Err(OpticsError::BlurOutOfRange { blur_px: b.px });
    }
    let v = lens.sensor_plane_mm() / denom;
    if v <= lens.focal_length_mm {
        return Err(OpticsError::BlurOutOfRange { blur_px: b.px });
    }
    Ok(lens.focal_length_mm * v / (v - lens.focal_length_mm))
}

/// Discrete PSF kernel for one channel: odd square support, taps sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    pub channel: Channel,
    /// Side length of the square support (odd, >= 1).
    pub side: usize,
    /// Row-major taps, index (y + half) * side + (x + half).
    pub taps: Vec<f64>,
}

impl PsfKernel {
    pub fn delta(channel: Channel) -> Self {
        Self {
            channel,
            side: 1,
            taps: vec![1.0],
        }
    }

    pub fn half(&self) -> i64 {
        (self.side as i64 - 1) / 2
    }

    /// Tap at offset (x, y) from the kernel center; zero outside support.
    pub fn tap(&self, x: i64, y: i64) -> f64 {
        let h = self.half();
        if x < -h || x > h || y < -h || y > h {
            return 0.0;
        }
        self.taps[((y + h) * self.side as i64 + (x + h)) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Mirror about the vertical axis (x -> -x).
    pub fn mirror_x(&self) -> Self {
        let h = self.half();
        let mut taps = vec![0.0; self.taps.len()];
        for y in -h..=h {
            for x in -h..=h {
                taps[((y + h) * self.side as i64 + (x + h)) as usize] = self.tap(-x, y);
            }
        }
        Self {
            channel: self.channel,
            side: self.side,
            taps,
        }
    }

    fn normalize(&mut self) {
        let s = self.sum();
        if s > 0.0 {
            for t in &mut self.taps {
                *t /= s;
            }
        }
    }
}

/// Half-Gaussian kernel: 2-D Gaussian(σ) restricted to sign·x >= 0,
/// sampled at pixel centers and renormalized.
fn half_gaussian(channel: Channel, sigma: f64, toward_positive_x: bool) -> PsfKernel {
    let h = (3.0 * sigma).ceil() as i64;
    let side = (2 * h + 1) as usize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut taps = vec![0.0; side * side];
    for y in -h..=h {
        for x in -h..=h {
            let keep = if toward_positive_x { x >= 0 } else { x <= 0 };
            if keep {
                taps[((y + h) * side as i64 + (x + h)) as usize] =
                    (-((x * x + y * y) as f64) * inv).exp();
            }
        }
    }
    let mut k = PsfKernel {
        channel,
        side,
        taps,
    };
    k.normalize();
    k
}

/// Full discrete convolution of two kernels (support grows accordingly).
fn convolve_kernels(channel: Channel, a: &PsfKernel, b: &PsfKernel) -> PsfKernel {
    let ha = a.half();
    let hb = b.half();
    let h = ha + hb;
    let side = (2 * h + 1) as usize;
    let mut taps = vec![0.0; side * side];
    for ya in -ha..=ha {
        for xa in -ha..=ha {
            let wa = a.tap(xa, ya);
            if wa == 0.0 {
                continue;
            }
            for yb in -hb..=hb {
                for xb in -hb..=hb {
                    let wb = b.tap(xb, yb);
                    if wb == 0.0 {
                        continue;
                    }
                    taps[((ya + yb + h) * side as i64 + (xa + xb + h)) as usize] += wa * wb;
                }
            }
        }
    }
    let mut k = PsfKernel {
        channel,
        side,
        taps,
    };
    k.normalize();
    k
}

/// Bilinear sample of a kernel at a real-valued offset from its center.
fn sample_bilinear(k: &PsfKernel, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as i64;
    let y0 = y0 as i64;
    k.tap(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + k.tap(x0 + 1, y0) * fx * (1.0 - fy)
        + k.tap(x0, y0 + 1) * (1.0 - fx) * fy
        + k.tap(x0 + 1, y0 + 1) * fx * fy
}

/// Apply the shift-variant warp (chromatic magnification + comatic shear)
/// to an ideal kernel by inverse-mapped bilinear resampling.
fn warp_kernel(
    ideal: &PsfKernel,
    lens: &LensConfig,
    pos: SensorPos,
    scale: f64,
    coma: f64,
) -> PsfKernel {
    let r = pos.radius();
    let shear = coma * r;
    // center displacement from global radial magnification, in pixels
    let px = pos.x * lens.sensor_width as f64 * 0.5;
    let py = pos.y * lens.sensor_height as f64 * 0.5;
    let dx = (scale - 1.0) * px;
    let dy = (scale - 1.0) * py;
    // radial / tangential unit vectors (no direction at the exact center)
    let (er_x, er_y) = if r > 0.0 {
        (pos.x / r, pos.y / r)
    } else {
        (1.0, 0.0)
    };
    let (et_x, et_y) = (-er_y, er_x);

    let h_src = ideal.half() as f64;
    let reach = h_src * scale.max(1.0) + dx.abs().max(dy.abs()) + shear.abs() * h_src + 1.0;
    let h = reach.ceil() as i64;
    let side = (2 * h + 1) as usize;
    let mut taps = vec![0.0; side * side];
    for y in -h..=h {
        for x in -h..=h {
            // undo chromatic magnification: global map G -> scale*G
            let ux = (x as f64 - dx) / scale;
            let uy = (y as f64 - dy) / scale;
            // undo comatic shear in the radial/tangential basis
            let a_r = ux * er_x + uy * er_y;
            let a_t = ux * et_x + uy * et_y;
            let s_r = a_r - shear * a_t;
            let s_t = a_t;
            let sx = s_r * er_x + s_t * et_x;
            let sy = s_r * er_y + s_t * et_y;
            taps[((y + h) * side as i64 + (x + h)) as usize] = sample_bilinear(ideal, sx, sy);
        }
    }
    let mut k = PsfKernel {
        channel: ideal.channel,
        side,
        taps,
    };
    k.normalize();
    k
}

/// Per-channel PSF at signed blur `b` and sensor position `pos`.
///
/// Ideal model: R is the half-Gaussian leaning toward the blur sign, B its
/// mirror, and G the discrete convolution of the two. `b = 0` is the
/// identity kernel for every channel. Aberration warps are applied on top.
pub fn psf(
    lens: &LensConfig,
    b: SignedBlur,
    channel: Channel,
    pos: SensorPos,
    ab: &AberrationField,
) -> PsfKernel {
    let sigma = lens.sigma_per_px * b.magnitude();
    if sigma == 0.0 {
        return PsfKernel::delta(channel);
    }
    let ideal = ideal_kernel(channel, sigma, b.is_near_side());
    let scale = ab.lateral_chromatic[channel.index()];
    if scale == 1.0 && ab.coma == 0.0 {
        return ideal;
    }
    warp_kernel(&ideal, lens, pos, scale, ab.coma)
}

fn ideal_kernel(channel: Channel, sigma: f64, near_side: bool) -> PsfKernel {
    match channel {
        Channel::R => half_gaussian(Channel::R, sigma, near_side),
        Channel::B => half_gaussian(Channel::B, sigma, !near_side),
        Channel::G => {
            let r = half_gaussian(Channel::G, sigma, near_side);
            let b = half_gaussian(Channel::G, sigma, !near_side);
            convolve_kernels(Channel::G, &r, &b)
        }
    }
}
