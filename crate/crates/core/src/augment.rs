//! The fixed transformation family used for multi-view training.
//!
//! Id 0 is the untouched image; ids 1..=9 are the transformed views. The id
//! doubles as the self-supervised target class.

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Number of transformed views per image.
pub const NUM_TRANSFORMS: usize = 9;
/// Views per image including the original.
pub const NUM_VIEWS: usize = NUM_TRANSFORMS + 1;

const CROP_FRACTIONS: [f64; 3] = [0.6, 0.75, 0.9];
const ERASE_FILL: u8 = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransformId(u8);

impl TransformId {
    pub const ORIGINAL: Self = Self(0);
    pub const ROTATE_180: Self = Self(5);
    pub const RANDOM_ERASE: Self = Self(7);
    pub const GRAY: Self = Self(8);
    pub const SOBEL: Self = Self(9);

    pub fn new(id: usize) -> Result<Self> {
        if id > NUM_TRANSFORMS {
            return Err(Error::domain(format!("transform id {id} not in 0..={NUM_TRANSFORMS}")));
        }
        Ok(Self(id as u8))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn all() -> impl Iterator<Item = TransformId> {
        (0..=NUM_TRANSFORMS as u8).map(TransformId)
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "original",
            1 => "scale-0.60",
            2 => "scale-0.75",
            3 => "scale-0.90",
            4 => "rotate-90",
            5 => "rotate-180",
            6 => "rotate-270",
            7 => "random-erase",
            8 => "gray",
            _ => "sobel",
        }
    }
}

/// Applies transform `t`. Only random erasing consumes `seed`.
pub fn apply(image: &LabeledImage, t: TransformId, seed: u64) -> LabeledImage {
    let pixels = match t.0 {
        0 => image.pixels.clone(),
        1..=3 => per_plane(image, |p, n| center_crop_resize(p, n, CROP_FRACTIONS[t.index() - 1])),
        4..=6 => per_plane(image, |p, n| rotate_quarter_turns(p, n, t.index() - 3)),
        7 => random_erase(image, seed),
        8 => gray(image),
        _ => per_plane(image, sobel_magnitude),
    };
    image.with_pixels(pixels)
}

/// Id-checked variant of [`apply`].
pub fn apply_id(image: &LabeledImage, id: usize, seed: u64) -> Result<LabeledImage> {
    Ok(apply(image, TransformId::new(id)?, seed))
}

/// All `NUM_VIEWS` views in transform-id order.
pub fn expand(image: &LabeledImage, seed: u64) -> Vec<LabeledImage> {
    TransformId::all().map(|t| apply(image, t, seed)).collect()
}

fn per_plane(image: &LabeledImage, f: impl Fn(&[u8], usize) -> Vec<u8>) -> Vec<u8> {
    (0..image.channels)
        .flat_map(|c| f(image.plane(c), image.size))
        .collect()
}

fn center_crop_resize(plane: &[u8], n: usize, fraction: f64) -> Vec<u8> {
    let crop = ((fraction * n as f64).round() as usize).clamp(1, n);
    let off = (n - crop) / 2;
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        let sy = off + y * crop / n;
        for x in 0..n {
            let sx = off + x * crop / n;
            out.push(plane[sy * n + sx]);
        }
    }
    out
}

/// Clockwise rotation by `quarters` × 90°.
fn rotate_quarter_turns(plane: &[u8], n: usize, quarters: usize) -> Vec<u8> {
    let mut out = vec![0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = match quarters % 4 {
                0 => (y, x),
                1 => (n - 1 - x, y),
                2 => (n - 1 - y, n - 1 - x),
                _ => (x, n - 1 - y),
            };
            out[y * n + x] = plane[sy * n + sx];
        }
    }
    out
}

/// Rectangle `(top, left, height, width)` erased for `seed`.
pub fn erase_rect(size: usize, seed: u64) -> (usize, usize, usize, usize) {
    let mut rng = SplitMix64::keyed(seed, TransformId::RANDOM_ERASE.index() as u64);
    let area = (size * size) as f64;
    for _ in 0..100 {
        let target = rng.uniform(0.1, 0.3) * area;
        let aspect = rng.uniform(0.5, 2.0);
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        let covered = (h * w) as f64;
        if h == 0 || w == 0 || h > size || w > size || covered < 0.1 * area || covered > 0.3 * area {
            continue;
        }
        let top = rng.below(size - h + 1);
        let left = rng.below(size - w + 1);
        return (top, left, h, w);
    }
    // Unreachable for 16- and 32-pixel images; a centered ~20% square otherwise.
    let side = ((0.2 * area).sqrt().round() as usize).clamp(1, size);
    ((size - side) / 2, (size - side) / 2, side, side)
}

fn random_erase(image: &LabeledImage, seed: u64) -> Vec<u8> {
    let n = image.size;
    let (top, left, h, w) = erase_rect(n, seed);
    let mut out = image.pixels.clone();
    for c in 0..image.channels {
        for y in top..top + h {
            for x in left..left + w {
                out[c * n * n + y * n + x] = ERASE_FILL;
            }
        }
    }
    out
}

/// Luminance for RGB; a min-max contrast stretch for single-channel images.
fn gray(image: &LabeledImage) -> Vec<u8> {
    let n2 = image.size * image.size;
    if image.channels == 3 {
        let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
        let luma: Vec<u8> = (0..n2)
            .map(|i| {
                let l = 0.299 * f64::from(r[i]) + 0.587 * f64::from(g[i]) + 0.114 * f64::from(b[i]);
                l.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        return luma.repeat(3);
    }
    let lo = *image.pixels.iter().min().expect("non-empty image");
    let hi = *image.pixels.iter().max().expect("non-empty image");
    if hi == lo {
        return image.pixels.clone();
    }
    let scale = 255.0 / f64::from(hi - lo);
    image
        .pixels
        .iter()
        .map(|&p| (f64::from(p - lo) * scale).round() as u8)
        .collect()
}

/// `sqrt(Gx² + Gy²)` with the standard 3×3 Sobel kernels and replicated
/// borders, clamped to 255.
fn sobel_magnitude(plane: &[u8], n: usize) -> Vec<u8> {
    let at = |y: isize, x: isize| -> f64 {
        let cy = y.clamp(0, n as isize - 1) as usize;
        let cx = x.clamp(0, n as isize - 1) as usize;
        f64::from(plane[cy * n + cx])
    };
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n as isize {
        for x in 0..n as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.push((gx * gx + gy * gy).sqrt().round().min(255.0) as u8);
        }
    }
    out
}
