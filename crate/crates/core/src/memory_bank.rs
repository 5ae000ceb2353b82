//! Per-image embedding store with momentum updates and per-category
//! sampling.

use std::collections::{BTreeMap, HashMap};

use crate::dataset::{FewShotDataset, Split};
use crate::error::{Error, Result};
use crate::model::EMBED_DIM;
use crate::rng::SplitMix64;
use crate::tensor_core::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Key of the stream that fills the initial slots.
const INIT_STREAM: u64 = 0xB4;
/// Key of the stream used for per-category sampling.
const SAMPLE_STREAM: u64 = 0xB5;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    slots: HashMap<u32, Vec<f64>>,
    category_index: BTreeMap<usize, Vec<u32>>,
    momentum: f64,
    rng: SplitMix64,
}

fn unit(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::domain(format!("cannot normalize a vector of norm {norm}")));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

impl MemoryBank {
    /// One random unit vector per base image. Every category below
    /// `num_categories` gets an index entry, possibly empty.
    pub fn init(dataset: &FewShotDataset, seed: u64) -> Result<Self> {
        Self::with_momentum(dataset, seed, DEFAULT_MOMENTUM)
    }

    pub fn with_momentum(dataset: &FewShotDataset, seed: u64, momentum: f64) -> Result<Self> {
        if dataset.split != Split::Base {
            return Err(Error::domain("the memory bank is built from the base split"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::domain(format!("momentum {momentum} must lie in [0, 1)")));
        }
        let mut init = SplitMix64::keyed(seed, INIT_STREAM);
        let mut slots = HashMap::with_capacity(dataset.len());
        let mut category_index: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for img in &dataset.images {
            let mut v: Vec<f64> = (0..EMBED_DIM).map(|_| init.normal()).collect();
            unit(&mut v)?;
            slots.insert(img.image_id, v);
            category_index.entry(img.category).or_default().push(img.image_id);
        }
        for c in 0..dataset.num_categories {
            category_index.entry(c).or_default();
        }
        Ok(Self {
            slots,
            category_index,
            momentum,
            rng: SplitMix64::keyed(seed, SAMPLE_STREAM),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, image_id: u32) -> Option<&[f64]> {
        self.slots.get(&image_id).map(Vec::as_slice)
    }

    /// Image ids of every category, in dataset order.
    pub fn category_index(&self) -> &BTreeMap<usize, Vec<u32>> {
        &self.category_index
    }

    /// `slot ← normalize(r · slot + (1 − r) · normalize(v_q))`.
    pub fn update(&mut self, image_id: u32, v_q: &[f64]) -> Result<()> {
        if v_q.len() != EMBED_DIM {
            return Err(Error::shape(format!("bank update with {} values", v_q.len())));
        }
        let r = self.momentum;
        let slot = self.slots.get_mut(&image_id).ok_or(Error::UnknownImage(image_id))?;
        let mut q = v_q.to_vec();
        unit(&mut q)?;
        let mut mixed: Vec<f64> = slot.iter().zip(&q).map(|(k, q)| r * k + (1.0 - r) * q).collect();
        unit(&mut mixed)?;
        *slot = mixed;
        Ok(())
    }

    /// One uniformly chosen slot per category, as detached tensors.
    pub fn sample_per_category(&mut self) -> Result<BTreeMap<usize, Tensor>> {
        let mut out = BTreeMap::new();
        for (&c, ids) in &self.category_index {
            if ids.is_empty() {
                return Err(Error::EmptyCategory(c));
            }
            let id = ids[self.rng.below(ids.len())];
            out.insert(c, Tensor::vector(self.slots[&id].clone()));
        }
        Ok(out)
    }
}
