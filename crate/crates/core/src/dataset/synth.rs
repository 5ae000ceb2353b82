//! Procedural grayscale pattern families.
//!
//! Every category owns a distinct `(stripe frequency, stripe angle, blob
//! count)` triple plus an anchored phase and blob layout. Each image jitters
//! phase, angle, frequency and blob positions and draws its own brightness,
//! contrast, illumination ramp and pixel noise from a SplitMix64 stream keyed
//! by `(seed, image_id)`. The lighting nuisances are strong on purpose: they
//! dominate the features of an untrained network, so few-shot accuracy
//! measures what pre-training learned.

use std::f64::consts::PI;

use super::{FewShotDataset, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

const FREQUENCIES: [f64; 5] = [1.0, 1.75, 2.5, 3.25, 4.0];
const ANGLES_DEG: [f64; 4] = [0.0, 22.5, 45.0, 67.5];
const BLOB_COUNTS: [usize; 4] = [0, 1, 2, 3];

/// Rendered intensities stay inside `[PIXEL_FLOOR, 1 - PIXEL_FLOOR]`, so a
/// full-range contrast stretch always moves pixels.
const PIXEL_FLOOR: f64 = 0.04;

/// Key of the stream that assigns pattern triples to categories.
const CATEGORY_STREAM: u64 = u64::MAX;
/// Key of the stream that anchors each family's phase and blob layout.
const LAYOUT_STREAM: u64 = u64::MAX - 1;

const PHASE_JITTER: f64 = 0.5;
const BLOB_JITTER: f64 = 0.06;
/// Largest intensity change across the image from the illumination ramp.
const MAX_RAMP: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Pattern {
    frequency: f64,
    angle: f64,
    blobs: usize,
}

fn pattern_grid() -> Vec<Pattern> {
    let mut grid = Vec::new();
    for &frequency in &FREQUENCIES {
        for &deg in &ANGLES_DEG {
            for &blobs in &BLOB_COUNTS {
                grid.push(Pattern {
                    frequency,
                    angle: deg.to_radians(),
                    blobs,
                });
            }
        }
    }
    grid
}

/// A pattern anchored at a category-specific phase and blob layout.
#[derive(Clone, Debug, PartialEq)]
struct Family {
    pattern: Pattern,
    phase: f64,
    centers: Vec<(f64, f64)>,
}

impl Family {
    fn new(pattern: Pattern, rng: &mut SplitMix64) -> Self {
        let phase = rng.uniform(0.0, 2.0 * PI);
        let centers = (0..pattern.blobs)
            .map(|_| (rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75)))
            .collect();
        Family {
            pattern,
            phase,
            centers,
        }
    }
}

fn render(f: &Family, size: usize, rng: &mut SplitMix64) -> Vec<u8> {
    let s = size as f64;
    let p = &f.pattern;
    let phase = f.phase + rng.uniform(-PHASE_JITTER, PHASE_JITTER);
    let angle = p.angle + rng.uniform(-6.0, 6.0).to_radians();
    let freq = p.frequency * rng.uniform(0.92, 1.08);
    let contrast = rng.uniform(0.5, 0.9);
    let brightness = rng.uniform(0.2, 0.8);
    // A linear illumination ramp of random strength and direction.
    let ramp = MAX_RAMP * rng.next_f64();
    let ramp_angle = rng.uniform(0.0, 2.0 * PI);
    let (ramp_x, ramp_y) = (ramp * ramp_angle.cos() / s, ramp * ramp_angle.sin() / s);
    let blob_radius = 0.11 * s;
    let blobs: Vec<(f64, f64)> = f
        .centers
        .iter()
        .map(|&(cx, cy)| {
            (
                (cx + rng.uniform(-BLOB_JITTER, BLOB_JITTER)) * s,
                (cy + rng.uniform(-BLOB_JITTER, BLOB_JITTER)) * s,
            )
        })
        .collect();
    let (cos_a, sin_a) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let u = (fx - s / 2.0) * cos_a + (fy - s / 2.0) * sin_a;
            let stripe = (2.0 * PI * freq * u / s + phase).sin();
            let blob: f64 = blobs
                .iter()
                .map(|&(bx, by)| {
                    let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                    (-d2 / (2.0 * blob_radius * blob_radius)).exp()
                })
                .sum();
            let light = brightness + ramp_x * (fx - s / 2.0) + ramp_y * (fy - s / 2.0);
            let v = light + contrast * (0.3 * stripe + 0.45 * blob.min(1.5) - 0.2) + 0.04 * rng.normal();
            out.push((v.clamp(PIXEL_FLOOR, 1.0 - PIXEL_FLOOR) * 255.0).round() as u8);
        }
    }
    out
}

/// Renders disjoint base and novel splits.
///
/// Base categories take ids `0..num_base`, novel ones
/// `num_base..num_base + num_novel`. Image ids run consecutively across both
/// splits so every `(seed, image_id)` stream is distinct.
pub fn generate_synthetic(
    num_base: usize,
    num_novel: usize,
    per_category: usize,
    size: usize,
    seed: u64,
) -> Result<(FewShotDataset, FewShotDataset)> {
    if num_base < 2 {
        return Err(Error::domain(format!(
            "need at least 2 base categories, got {num_base}"
        )));
    }
    if num_novel < 5 {
        return Err(Error::domain(format!(
            "need at least 5 novel categories, got {num_novel}"
        )));
    }
    if per_category < 20 {
        return Err(Error::domain(format!(
            "need at least 20 images per category, got {per_category}"
        )));
    }
    if !matches!(size, 16 | 32) {
        return Err(Error::domain(format!("image size must be 16 or 32, got {size}")));
    }
    let mut grid = pattern_grid();
    if num_base + num_novel > grid.len() {
        return Err(Error::domain(format!(
            "at most {} categories can be generated, asked for {}",
            grid.len(),
            num_base + num_novel
        )));
    }
    SplitMix64::keyed(seed, CATEGORY_STREAM).shuffle(&mut grid);
    let mut layout = SplitMix64::keyed(seed, LAYOUT_STREAM);
    let families: Vec<Family> = grid[..num_base + num_novel]
        .iter()
        .map(|&p| Family::new(p, &mut layout))
        .collect();

    let mut next_id = 0u32;
    let mut build = |categories: std::ops::Range<usize>, split: Split| {
        let mut images = Vec::with_capacity(categories.len() * per_category);
        for category in categories.clone() {
            for _ in 0..per_category {
                let mut rng = SplitMix64::keyed(seed, u64::from(next_id));
                let pixels = render(&families[category], size, &mut rng);
                images.push(LabeledImage {
                    pixels,
                    channels: 1,
                    size,
                    category,
                    image_id: next_id,
                });
                next_id += 1;
            }
        }
        FewShotDataset::new(images, categories.end, split, size, 1)
    };
    let base = build(0..num_base, Split::Base)?;
    let novel = build(num_base..num_base + num_novel, Split::Novel)?;
    Ok((base, novel))
}
