//! Labeled raster images, base/novel splits, the synthetic pattern generator
//! and the `MGRCLDS1` container format.

mod container;
mod synth;

pub use container::{load, read_from, save, write_to, MAGIC as CONTAINER_MAGIC};
pub use synth::generate_synthetic;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    pub fn tag(self) -> u32 {
        match self {
            Split::Base => 0,
            Split::Novel => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Split::Base),
            1 => Some(Split::Novel),
            _ => None,
        }
    }
}

/// A `C×H×W` image of 8-bit pixels with its category label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImage {
    pub pixels: Vec<u8>,
    pub channels: usize,
    pub size: usize,
    pub category: usize,
    pub image_id: u32,
}

impl LabeledImage {
    pub fn new(pixels: Vec<u8>, channels: usize, size: usize, category: usize, image_id: u32) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::domain(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != channels * size * size {
            return Err(Error::shape(format!(
                "{} pixels for a {channels}x{size}x{size} image",
                pixels.len()
            )));
        }
        Ok(Self {
            pixels,
            channels,
            size,
            category,
            image_id,
        })
    }

    /// Same geometry and labels, new pixels.
    pub fn with_pixels(&self, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Self { pixels, ..self.clone() }
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.size * self.size;
        &self.pixels[c * n..(c + 1) * n]
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_unit_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotDataset {
    pub images: Vec<LabeledImage>,
    /// Exclusive upper bound on category ids.
    pub num_categories: usize,
    pub split: Split,
    pub size: usize,
    pub channels: usize,
}

impl FewShotDataset {
    pub fn new(
        images: Vec<LabeledImage>,
        num_categories: usize,
        split: Split,
        size: usize,
        channels: usize,
    ) -> Result<Self> {
        let ds = Self {
            images,
            num_categories,
            split,
            size,
            channels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.size, 16 | 32) {
            return Err(Error::domain(format!("image size must be 16 or 32, got {}", self.size)));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::domain(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        let mut seen = std::collections::HashSet::new();
        for img in &self.images {
            if img.size != self.size || img.channels != self.channels {
                return Err(Error::shape(format!("image {} has the wrong geometry", img.image_id)));
            }
            if img.category >= self.num_categories {
                return Err(Error::domain(format!(
                    "image {} has category {} >= {}",
                    img.image_id, img.category, self.num_categories
                )));
            }
            if !seen.insert(img.image_id) {
                return Err(Error::domain(format!("duplicate image id {}", img.image_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image indices grouped by category, in ascending category order.
    pub fn by_category(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, img) in self.images.iter().enumerate() {
            map.entry(img.category).or_default().push(i);
        }
        map
    }

    /// Distinct category ids present, ascending.
    pub fn categories(&self) -> Vec<usize> {
        self.by_category().into_keys().collect()
    }
}
