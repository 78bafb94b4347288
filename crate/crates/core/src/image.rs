//! Planar RGB images in [0,1] plus the binary PPM/PGM formats the toolkit
//! reads and writes.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad ppm/pgm: {0}")]
    Format(String),
    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    TooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
}

/// Dense RGB image, three planes of f64 clamped to [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    planes: [Vec<f64>; 3],
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            planes: [
                vec![0.0; width * height],
                vec![0.0; width * height],
                vec![0.0; width * height],
            ],
        }
    }

    /// Build from a per-pixel function returning (r,g,b); values are clamped.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                let rgb = f(x, y);
                for c in 0..3 {
                    img.planes[c][y * width + x] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.planes[c][y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.planes[c][y * self.width + x] = v.clamp(0.0, 1.0);
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.planes[c]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.planes[c]
    }

    /// Sample with replicated (clamped) borders; `x`/`y` may fall outside.
    #[inline]
    pub fn get_clamped(&self, c: usize, x: i64, y: i64) -> f64 {
        let xi = x.clamp(0, self.width as i64 - 1) as usize;
        let yi = y.clamp(0, self.height as i64 - 1) as usize;
        self.planes[c][yi * self.width + xi]
    }

    /// Copy a `side` x `side` window with top-left at (x0, y0) into
    /// row-major planes R,G,B.
    pub fn window(&self, x0: usize, y0: usize, side: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * side * side);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    out.push(self.get(c, x0 + x, y0 + y));
                }
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        let mut buf = Vec::with_capacity(self.width * self.height * 3 + 32);
        write!(buf, "P6\n{} {}\n255\n", self.width, self.height)?;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = (self.get(c, x, y) * 255.0).round().clamp(0.0, 255.0) as u8;
                    buf.push(v);
                }
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self, ImageError> {
        let mut data = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut data)?;
        parse_ppm(&data)
    }
}

fn next_token(data: &[u8], pos: &mut usize) -> Result<String, ImageError> {
    // skip whitespace and comments
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::Format("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

fn parse_ppm(data: &[u8]) -> Result<RgbImage, ImageError> {
    let mut pos = 0usize;
    let magic = next_token(data, &mut pos)?;
    if magic != "P6" {
        return Err(ImageError::Format(format!("expected P6, got {magic}")));
    }
    let w: usize = next_token(data, &mut pos)?
        .parse()
        .map_err(|_| ImageError::Format("bad width".into()))?;
    let h: usize = next_token(data, &mut pos)?
        .parse()
        .map_err(|_| ImageError::Format("bad height".into()))?;
    let maxval: u32 = next_token(data, &mut pos)?
        .parse()
        .map_err(|_| ImageError::Format("bad maxval".into()))?;
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::Format(format!("bad maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let bpc = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bpc;
    if data.len() < pos + need {
        return Err(ImageError::Format("truncated pixel data".into()));
    }
    let mut img = RgbImage::new(w, h);
    let scale = 1.0 / maxval as f64;
    let mut i = pos;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = if bpc == 1 {
                    data[i] as f64
                } else {
                    u16::from_be_bytes([data[i], data[i + 1]]) as f64
                };
                i += bpc;
                img.set(c, x, y, v * scale);
            }
        }
    }
    Ok(img)
}

/// Write a 16-bit big-endian binary PGM (P5, maxval 65535).
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<(), ImageError> {
    assert_eq!(values.len(), width * height);
    let mut buf = Vec::with_capacity(width * height * 2 + 32);
    write!(buf, "P5\n{width} {height}\n65535\n")?;
    for v in values {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Central differences with replicated borders, same size as the input.
/// Returns (d/dx, d/dy).
pub fn central_gradients(plane: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: i64, y: i64| {
        let xi = x.clamp(0, width as i64 - 1) as usize;
        let yi = y.clamp(0, height as i64 - 1) as usize;
        plane[yi * width + xi]
    };
    let mut gx = vec![0.0; width * height];
    let mut gy = vec![0.0; width * height];
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let i = y as usize * width + x as usize;
            gx[i] = (at(x + 1, y) - at(x - 1, y)) * 0.5;
            gy[i] = (at(x, y + 1) - at(x, y - 1)) * 0.5;
        }
    }
    (gx, gy)
}

/// Mean gradient magnitude over all pixels and channels of planar RGB data.
/// This is the edge/texture selection score compared against `tau_g`.
pub fn mean_gradient_magnitude(planes: &[f64], side: usize) -> f64 {
    debug_assert_eq!(planes.len(), 3 * side * side);
    let mut sum = 0.0;
    for c in 0..3 {
        let p = &planes[c * side * side..(c + 1) * side * side];
        let (gx, gy) = central_gradients(p, side, side);
        for i in 0..side * side {
            sum += (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
        }
    }
    sum / (3 * side * side) as f64
}
