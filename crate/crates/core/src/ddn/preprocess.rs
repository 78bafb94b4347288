//! Input construction: channel gradients, broadcast position planes, and
//! hue/saturation planes.

use crate::config::InputMode;

/// Per-sample network inputs, planar row-major f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    /// Main-branch input: 6 gradient planes (or 3 raw planes).
    pub main: Vec<f32>,
    /// Two constant planes holding the normalized patch position.
    pub pos: Vec<f32>,
    /// Hue and saturation planes.
    pub color: Vec<f32>,
}

/// Central differences with replicated borders, f32.
fn gradients_f32(plane: &[f32], side: usize) -> (Vec<f32>, Vec<f32>) {
    let at = |x: i64, y: i64| {
        let xi = x.clamp(0, side as i64 - 1) as usize;
        let yi = y.clamp(0, side as i64 - 1) as usize;
        plane[yi * side + xi]
    };
    let mut gx = vec![0.0f32; side * side];
    let mut gy = vec![0.0f32; side * side];
    for y in 0..side as i64 {
        for x in 0..side as i64 {
            let i = y as usize * side + x as usize;
            gx[i] = (at(x + 1, y) - at(x - 1, y)) * 0.5;
            gy[i] = (at(x, y + 1) - at(x, y - 1)) * 0.5;
        }
    }
    (gx, gy)
}

/// Hexagonal hue in [0,1) and max-min saturation in [0,1].
pub fn hue_saturation(r: f32, g: f32, b: f32) -> (f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let hue = if c == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / c).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / c + 2.0) / 6.0
    } else {
        ((r - g) / c + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { c / max };
    (hue, sat)
}

/// Build the three input stacks from a patch (planar RGB in [0,1]) and its
/// normalized center position.
pub fn preprocess(patch: &[f32], side: usize, pos: (f32, f32), mode: InputMode) -> Preprocessed {
    debug_assert_eq!(patch.len(), 3 * side * side);
    let area = side * side;
    let main = match mode {
        InputMode::Gradients => {
            let mut main = Vec::with_capacity(6 * area);
            for c in 0..3 {
                let (gx, gy) = gradients_f32(&patch[c * area..(c + 1) * area], side);
                main.extend(gx);
                main.extend(gy);
            }
            main
        }
        InputMode::Raw => patch.to_vec(),
    };
    let mut posp = Vec::with_capacity(2 * area);
    posp.extend(std::iter::repeat_n(pos.0, area));
    posp.extend(std::iter::repeat_n(pos.1, area));
    let mut color = vec![0.0f32; 2 * area];
    for i in 0..area {
        let (h, s) = hue_saturation(patch[i], patch[area + i], patch[2 * area + i]);
        color[i] = h;
        color[area + i] = s;
    }
    Preprocessed {
        main,
        pos: posp,
        color,
    }
}
