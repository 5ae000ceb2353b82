//! The five training objectives over a mini-batch of expanded views.
//!
//! A batch stores its views image-major: row `i * NUM_VIEWS + m` holds view
//! `m` of image `i`, and view 0 is the untransformed original.

use std::collections::BTreeMap;

use crate::augment::NUM_VIEWS;
use crate::error::{Error, Result};
use crate::tensor_core::{Tape, Tensor, Var};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tape handles for every view of a mini-batch.
#[derive(Clone, Debug)]
pub struct BatchViews {
    /// `[B * 10, 64]`.
    pub embeddings: Var,
    /// `[B * 10, |C_base|]`.
    pub logits: Var,
    /// `[B * 10, 10]`.
    pub ss_logits: Var,
    /// Category of each original image.
    pub labels: Vec<usize>,
    pub image_ids: Vec<u32>,
}

impl BatchViews {
    pub fn new(
        tape: &Tape,
        embeddings: Var,
        logits: Var,
        ss_logits: Var,
        labels: Vec<usize>,
        image_ids: Vec<u32>,
    ) -> Result<Self> {
        let b = labels.len();
        if b == 0 {
            return Err(Error::domain("empty batch"));
        }
        if image_ids.len() != b {
            return Err(Error::shape(format!("{} image ids for {b} labels", image_ids.len())));
        }
        for (what, v) in [("embeddings", embeddings), ("logits", logits), ("ss logits", ss_logits)] {
            let s = tape.shape(v);
            if s.len() != 2 || s[0] != b * NUM_VIEWS {
                return Err(Error::shape(format!(
                    "{what} {s:?} for {b} images of {NUM_VIEWS} views"
                )));
            }
            if !tape.value(v).is_finite() {
                return Err(Error::domain(format!("{what} contain non-finite values")));
            }
        }
        if tape.shape(ss_logits)[1] != NUM_VIEWS {
            return Err(Error::shape(format!("ss logits need {NUM_VIEWS} columns")));
        }
        Ok(Self {
            embeddings,
            logits,
            ss_logits,
            labels,
            image_ids,
        })
    }

    pub fn num_images(&self) -> usize {
        self.labels.len()
    }

    pub fn num_categories(&self, tape: &Tape) -> usize {
        tape.shape(self.logits)[1]
    }

    /// Row index of every original view.
    pub fn original_rows(&self) -> Vec<usize> {
        (0..self.num_images()).map(|i| i * NUM_VIEWS).collect()
    }
}

/// Loss weights and temperatures. `ss` switches the self-supervised term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub ss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            tau1: 4.0,
            tau2: 0.1,
            ss: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0) || !(self.tau2 > 0.0) {
            return Err(Error::domain(format!(
                "temperatures must be > 0, got tau1={} tau2={}",
                self.tau1, self.tau2
            )));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::domain(format!(
                "weights must be >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn for_ablation(a: Ablation) -> Self {
        let d = Self::default();
        match a {
            Ablation::Base => Self {
                alpha: 0.0,
                beta: 0.0,
                ss: false,
                ..d
            },
            Ablation::Ss => Self {
                alpha: 0.0,
                beta: 0.0,
                ..d
            },
            Ablation::Tcl => Self {
                beta: 0.0,
                ss: false,
                ..d
            },
            Ablation::Ccl => Self {
                alpha: 0.0,
                ss: false,
                ..d
            },
            Ablation::All => d,
        }
    }
}

/// Which objectives a run trains with: the base learner alone, or the base
/// learner plus one or all of the extra terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Base,
    Ss,
    Tcl,
    Ccl,
    All,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Self::Base, Self::Ss, Self::Tcl, Self::Ccl, Self::All];

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Ss => "ss",
            Self::Tcl => "tcl",
            Self::Ccl => "ccl",
            Self::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// JS divergence of two distributions, natural log.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl = |x: &[f64], m: &[f64]| -> f64 {
        x.iter()
            .zip(m)
            .filter(|(&xi, _)| xi > 0.0)
            .map(|(&xi, &mi)| xi * (xi.max(PROB_FLOOR).ln() - mi.max(PROB_FLOOR).ln()))
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

/// Mean negative log-likelihood of column `targets[row]`.
fn mean_nll(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick_columns(ls, targets)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

pub fn l_cls(tape: &mut Tape, batch: &BatchViews) -> Result<Var> {
    let nc = batch.num_categories(tape);
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= nc) {
        return Err(Error::domain(format!(
            "label {y} out of range for {nc} base categories"
        )));
    }
    let targets: Vec<usize> = batch
        .labels
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, NUM_VIEWS))
        .collect();
    mean_nll(tape, batch.logits, &targets)
}

pub fn l_ss(tape: &mut Tape, batch: &BatchViews) -> Result<Var> {
    let targets: Vec<usize> = (0..batch.num_images()).flat_map(|_| 0..NUM_VIEWS).collect();
    mean_nll(tape, batch.ss_logits, &targets)
}

/// `Σ x ln x` over every element, with the log floored.
fn neg_entropy(tape: &mut Tape, x: Var) -> Result<Var> {
    let lx = tape.ln_floor(x, PROB_FLOOR);
    let prod = tape.mul(x, lx)?;
    Ok(tape.sum(prod))
}

pub fn l_tcl(tape: &mut Tape, batch: &BatchViews, tau1: f64) -> Result<Var> {
    let probs = tape.softmax_t(batch.logits, tau1)?;
    let b = batch.num_images();
    let mut orig = Vec::with_capacity(b * (NUM_VIEWS - 1));
    let mut other = Vec::with_capacity(b * (NUM_VIEWS - 1));
    for i in 0..b {
        for m in 1..NUM_VIEWS {
            orig.push(i * NUM_VIEWS);
            other.push(i * NUM_VIEWS + m);
        }
    }
    let p = tape.select_rows(probs, &orig)?;
    let q = tape.select_rows(probs, &other)?;
    let pq = tape.add(p, q)?;
    let a = tape.scale(pq, 0.5);
    let hp = neg_entropy(tape, p)?;
    let hq = neg_entropy(tape, q)?;
    let ha = neg_entropy(tape, a)?;
    let half = tape.add(hp, hq)?;
    let half = tape.scale(half, 0.5);
    let js = tape.sub(half, ha)?;
    Ok(tape.scale(js, 1.0 / orig.len() as f64))
}

/// `samples[c]` is the bank embedding drawn for category `c`; every
/// category of the classifier must have one.
pub fn l_ccl(tape: &mut Tape, batch: &BatchViews, samples: &BTreeMap<usize, Tensor>, tau2: f64) -> Result<Var> {
    if !(tau2 > 0.0) {
        return Err(Error::domain(format!("tau2 {tau2} must be > 0")));
    }
    let nc = batch.num_categories(tape);
    let dim = tape.shape(batch.embeddings)[1];
    let mut keys = vec![0.0; dim * nc];
    for c in 0..nc {
        let s = samples
            .get(&c)
            .ok_or_else(|| Error::BankNotReady(format!("no sample for category {c}")))?;
        if s.numel() != dim {
            return Err(Error::shape(format!(
                "bank sample of {} values for {dim}-dim embeddings",
                s.numel()
            )));
        }
        let norm = s.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (j, &x) in s.data().iter().enumerate() {
            keys[j * nc + c] = x / norm;
        }
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= nc) {
        return Err(Error::domain(format!(
            "label {y} out of range for {nc} base categories"
        )));
    }
    let keys = tape.constant(Tensor::from_data(&[dim, nc], keys)?);
    let v = tape.select_rows(batch.embeddings, &batch.original_rows())?;
    let v = tape.normalize_rows(v);
    let sims = tape.matmul(v, keys)?;
    let sims = tape.scale(sims, 1.0 / tau2);
    mean_nll(tape, sims, &batch.labels)
}

/// Every component plus the weighted total, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub ss: Var,
    pub tcl: Var,
    pub ccl: Var,
    pub total: Var,
}

/// Scalar values of a [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub cls: f64,
    pub ss: f64,
    pub tcl: f64,
    pub ccl: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let get = |v: Var| tape.value(v).data()[0];
        LossValues {
            cls: get(self.cls),
            ss: get(self.ss),
            tcl: get(self.tcl),
            ccl: get(self.ccl),
            total: get(self.total),
        }
    }
}

pub fn loss_terms(
    tape: &mut Tape,
    batch: &BatchViews,
    samples: &BTreeMap<usize, Tensor>,
    w: &LossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    let cls = l_cls(tape, batch)?;
    let ss = l_ss(tape, batch)?;
    let tcl = l_tcl(tape, batch, w.tau1)?;
    let ccl = l_ccl(tape, batch, samples, w.tau2)?;
    let mut total = cls;
    if w.ss {
        total = tape.add(total, ss)?;
    }
    let a = tape.scale(tcl, w.alpha);
    total = tape.add(total, a)?;
    let b = tape.scale(ccl, w.beta);
    total = tape.add(total, b)?;
    Ok(LossTerms {
        cls,
        ss,
        tcl,
        ccl,
        total,
    })
}

/// `l_cls + l_ss + alpha * l_tcl + beta * l_ccl` (the `l_ss` term only when
/// `w.ss`).
pub fn l_total(tape: &mut Tape, batch: &BatchViews, samples: &BTreeMap<usize, Tensor>, w: &LossWeights) -> Result<Var> {
    Ok(loss_terms(tape, batch, samples, w)?.total)
}
