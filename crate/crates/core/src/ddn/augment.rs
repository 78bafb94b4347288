//! PSF-safe augmentations: random crop, brightness, random erasing.
//!
//! Train patches are stored with a crop margin so the random 16x16 crop
//! never fabricates pixels; brightness rescales globally; random erasing
//! paints one small constant rectangle. None of these change the blur
//! kernel that produced the patch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EraseSpec {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub value: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub crop_x: usize,
    pub crop_y: usize,
    pub brightness: f32,
    pub erase: Option<EraseSpec>,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            crop_x: 0,
            crop_y: 0,
            brightness: 1.0,
            erase: None,
        }
    }

    /// Center crop, unit brightness, no erase.
    pub fn center(stored_side: usize, out_side: usize) -> Self {
        let off = (stored_side - out_side) / 2;
        Self {
            crop_x: off,
            crop_y: off,
            brightness: 1.0,
            erase: None,
        }
    }
}

pub const ERASE_PROBABILITY: f64 = 0.3;
pub const BRIGHTNESS_RANGE: (f32, f32) = (0.8, 1.25);
pub const ERASE_SIDE_RANGE: (usize, usize) = (2, 6);

/// Draw one augmentation. The rng consumption order is fixed:
/// crop x, crop y, brightness, erase roll, then the erase rectangle.
pub fn sample_augment(rng: &mut ChaCha8Rng, stored_side: usize, out_side: usize) -> AugmentSpec {
    let margin = stored_side - out_side;
    let crop_x = rng.random_range(0..=margin);
    let crop_y = rng.random_range(0..=margin);
    let brightness =
        BRIGHTNESS_RANGE.0 + (BRIGHTNESS_RANGE.1 - BRIGHTNESS_RANGE.0) * rng.random::<f32>();
    let erase = if rng.random::<f64>() < ERASE_PROBABILITY {
        let w = rng.random_range(ERASE_SIDE_RANGE.0..=ERASE_SIDE_RANGE.1);
        let h = rng.random_range(ERASE_SIDE_RANGE.0..=ERASE_SIDE_RANGE.1);
        let x = rng.random_range(0..out_side.saturating_sub(w).max(1));
        let y = rng.random_range(0..out_side.saturating_sub(h).max(1));
        let value = rng.random::<f32>();
        Some(EraseSpec { x, y, w, h, value })
    } else {
        None
    };
    AugmentSpec {
        crop_x,
        crop_y,
        brightness,
        erase,
    }
}

/// Apply a spec to a stored patch (planar RGB, `stored_side`), producing an
/// `out_side` patch.
pub fn apply_augment(
    patch: &[f32],
    stored_side: usize,
    out_side: usize,
    spec: &AugmentSpec,
) -> Vec<f32> {
    debug_assert_eq!(patch.len(), 3 * stored_side * stored_side);
    debug_assert!(spec.crop_x + out_side <= stored_side);
    debug_assert!(spec.crop_y + out_side <= stored_side);
    let mut out = Vec::with_capacity(3 * out_side * out_side);
    for c in 0..3 {
        let plane = &patch[c * stored_side * stored_side..(c + 1) * stored_side * stored_side];
        for y in 0..out_side {
            for x in 0..out_side {
                let v = plane[(y + spec.crop_y) * stored_side + (x + spec.crop_x)];
                out.push((v * spec.brightness).clamp(0.0, 1.0));
            }
        }
    }
    if let Some(e) = spec.erase {
        for c in 0..3 {
            for y in e.y..(e.y + e.h).min(out_side) {
                for x in e.x..(e.x + e.w).min(out_side) {
                    out[c * out_side * out_side + y * out_side + x] = e.value;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn stored_patch(side: usize) -> Vec<f32> {
        (0..3 * side * side)
            .map(|i| ((i * 37 % 101) as f32) / 101.0)
            .collect()
    }

    #[test]
    fn center_crop_unit_brightness_is_identity() {
        let patch = stored_patch(20);
        let out = apply_augment(&patch, 20, 16, &AugmentSpec::center(20, 16));
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let expect = patch[c * 400 + (y + 2) * 20 + (x + 2)];
                    assert_eq!(out[c * 256 + y * 16 + x], expect);
                }
            }
        }
    }

    #[test]
    fn no_margin_identity_spec_is_identity() {
        let patch = stored_patch(16);
        let out = apply_augment(&patch, 16, 16, &AugmentSpec::identity());
        assert_eq!(out, patch);
    }

    #[test]
    fn erased_region_is_constant() {
        let patch = stored_patch(20);
        let spec = AugmentSpec {
            crop_x: 1,
            crop_y: 3,
            brightness: 1.1,
            erase: Some(EraseSpec {
                x: 4,
                y: 5,
                w: 4,
                h: 3,
                value: 0.77,
            }),
        };
        let out = apply_augment(&patch, 20, 16, &spec);
        for c in 0..3 {
            for y in 5..8 {
                for x in 4..8 {
                    assert_eq!(out[c * 256 + y * 16 + x], 0.77);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_augment(&mut ChaCha8Rng::seed_from_u64(5), 20, 16);
        let b = sample_augment(&mut ChaCha8Rng::seed_from_u64(5), 20, 16);
        assert_eq!(a, b);
        let patch = stored_patch(20);
        assert_eq!(
            apply_augment(&patch, 20, 16, &a),
            apply_augment(&patch, 20, 16, &b)
        );
    }

    #[test]
    fn brightness_clamps_to_unit_range() {
        let patch = vec![0.9f32; 3 * 400];
        let spec = AugmentSpec {
            crop_x: 0,
            crop_y: 0,
            brightness: 1.25,
            erase: None,
        };
        let out = apply_augment(&patch, 20, 16, &spec);
        assert!(out.iter().all(|&v| v == 1.0));
    }
}
