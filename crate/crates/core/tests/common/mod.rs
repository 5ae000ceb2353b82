//! Independent scalar re-computations of the losses and the bank update,
//! written as plain loops over `f64` slices.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mgrcl::augment::NUM_VIEWS;
use mgrcl::losses::{BatchViews, LossWeights};
use mgrcl::rng::SplitMix64;
use mgrcl::tensor_core::{Tape, Tensor};

/// Raw values of one batch, independent of any tape.
#[derive(Clone, Debug)]
pub struct RawBatch {
    pub images: usize,
    pub categories: usize,
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub ss_logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub samples: BTreeMap<usize, Vec<f64>>,
}

impl RawBatch {
    pub fn random(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let images = 1 + rng.below(4);
        let categories = 2 + rng.below(7);
        let dim = 64;
        let rows = images * NUM_VIEWS;
        let mat = |r: usize, c: usize, scale: f64, rng: &mut SplitMix64| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| scale * rng.normal()).collect()).collect()
        };
        let embeddings = mat(rows, dim, 1.0, &mut rng);
        let logits = mat(rows, categories, 3.0, &mut rng);
        let ss_logits = mat(rows, NUM_VIEWS, 2.0, &mut rng);
        let labels = (0..images).map(|_| rng.below(categories)).collect();
        let samples = (0..categories)
            .map(|c| (c, (0..dim).map(|_| rng.normal()).collect()))
            .collect();
        Self {
            images,
            categories,
            dim,
            embeddings,
            logits,
            ss_logits,
            labels,
            samples,
        }
    }

    pub fn sample_tensors(&self) -> BTreeMap<usize, Tensor> {
        self.samples
            .iter()
            .map(|(&c, v)| (c, Tensor::vector(v.clone())))
            .collect()
    }

    pub fn on_tape(&self, tape: &mut Tape, requires_grad: bool) -> BatchViews {
        let flat =
            |m: &[Vec<f64>]| Tensor::from_data(&[m.len(), m[0].len()], m.iter().flatten().copied().collect()).unwrap();
        let e = tape.leaf(flat(&self.embeddings), requires_grad);
        let l = tape.leaf(flat(&self.logits), requires_grad);
        let s = tape.leaf(flat(&self.ss_logits), requires_grad);
        let ids = (0..self.images as u32).collect();
        BatchViews::new(tape, e, l, s, self.labels.clone(), ids).unwrap()
    }
}

pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| ((x - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn neg_log_softmax(z: &[f64], target: usize) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lse - z[target]
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (p[i] / q[i]).ln();
        }
    }
    s
}

pub fn js(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = (0..p.len()).map(|i| (p[i] + q[i]) / 2.0).collect();
    kl(p, &m) / 2.0 + kl(q, &m) / 2.0
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn cls(b: &RawBatch) -> f64 {
    let mut s = 0.0;
    for i in 0..b.images {
        for m in 0..NUM_VIEWS {
            s += neg_log_softmax(&b.logits[i * NUM_VIEWS + m], b.labels[i]);
        }
    }
    s / (b.images * NUM_VIEWS) as f64
}

pub fn ss(b: &RawBatch) -> f64 {
    let mut s = 0.0;
    for i in 0..b.images {
        for m in 0..NUM_VIEWS {
            s += neg_log_softmax(&b.ss_logits[i * NUM_VIEWS + m], m);
        }
    }
    s / (b.images * NUM_VIEWS) as f64
}

pub fn tcl(b: &RawBatch, tau1: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..b.images {
        let p = softmax(&b.logits[i * NUM_VIEWS], tau1);
        for m in 1..NUM_VIEWS {
            let q = softmax(&b.logits[i * NUM_VIEWS + m], tau1);
            s += js(&p, &q);
        }
    }
    s / (b.images * (NUM_VIEWS - 1)) as f64
}

pub fn ccl(b: &RawBatch, tau2: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..b.images {
        let v = unit(&b.embeddings[i * NUM_VIEWS]);
        let sims: Vec<f64> = (0..b.categories)
            .map(|c| {
                let k = unit(&b.samples[&c]);
                v.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / tau2
            })
            .collect();
        s += neg_log_softmax(&sims, b.labels[i]);
    }
    s / b.images as f64
}

pub fn total(b: &RawBatch, w: &LossWeights) -> f64 {
    let ss_term = if w.ss { ss(b) } else { 0.0 };
    cls(b) + ss_term + w.alpha * tcl(b, w.tau1) + w.beta * ccl(b, w.tau2)
}

/// `normalize(r · k + (1 − r) · normalize(q))`, element by element.
pub fn ema(k: &[f64], q: &[f64], r: f64) -> Vec<f64> {
    let qn = unit(q);
    let mut mixed = vec![0.0; k.len()];
    for i in 0..k.len() {
        mixed[i] = r * k[i] + (1.0 - r) * qn[i];
    }
    unit(&mixed)
}

pub fn random_distribution(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.next_f64().powi(3)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}
