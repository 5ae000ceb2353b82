//! Finite-difference verification of every loss gradient on a seeded
//! micro-batch: two base images, eight categories, all ten views each.

use std::collections::BTreeMap;

use crate::augment::expand;
use crate::dataset::generate_synthetic;
use crate::error::{Error, Result};
use crate::losses::{loss_terms, BatchViews, LossTerms, LossValues, LossWeights};
use crate::memory_bank::MemoryBank;
use crate::model::{images_to_tensor, Mode, ModelParams};
use crate::rng::SplitMix64;
use crate::tensor_core::{relative_error, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossKind {
    Cls,
    Ss,
    Tcl,
    Ccl,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [Self::Cls, Self::Ss, Self::Tcl, Self::Ccl, Self::Total];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cls => "cls",
            Self::Ss => "ss",
            Self::Tcl => "tcl",
            Self::Ccl => "ccl",
            Self::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn of(self, v: &LossValues) -> f64 {
        match self {
            Self::Cls => v.cls,
            Self::Ss => v.ss,
            Self::Tcl => v.tcl,
            Self::Ccl => v.ccl,
            Self::Total => v.total,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter tensor; smaller tensors are checked
    /// in full.
    pub coords_per_tensor: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eps: 1e-4,
            tolerance: 1e-4,
            coords_per_tensor: 24,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossCheck {
    pub kind: LossKind,
    pub max_rel_error: f64,
    /// `name[index]` of the coordinate with the largest error.
    pub worst: String,
    pub coordinates: usize,
    /// Coordinates replaced because a ±eps step flipped a ReLU input.
    pub kink_skips: usize,
}

impl LossCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Everything the losses need except the parameters.
#[derive(Clone, Debug)]
pub struct MicroBatch {
    pub params: ModelParams,
    pub views: Tensor,
    pub labels: Vec<usize>,
    pub image_ids: Vec<u32>,
    pub samples: BTreeMap<usize, Tensor>,
    pub weights: LossWeights,
}

impl MicroBatch {
    pub fn new(seed: u64) -> Result<Self> {
        let (base, _) = generate_synthetic(8, 5, 20, 16, seed)?;
        let by_cat = base.by_category();
        let picks = [by_cat[&0][0], by_cat[&1][0]];
        let images: Vec<_> = picks.iter().map(|&i| &base.images[i]).collect();
        let views: Vec<_> = images
            .iter()
            .flat_map(|img| expand(img, seed ^ u64::from(img.image_id)))
            .collect();
        let mut bank = MemoryBank::init(&base, seed)?;
        Ok(Self {
            params: ModelParams::init(8, 1, seed)?,
            views: images_to_tensor(views.iter())?,
            labels: images.iter().map(|i| i.category).collect(),
            image_ids: images.iter().map(|i| i.image_id).collect(),
            samples: bank.sample_per_category()?,
            weights: LossWeights::default(),
        })
    }

    fn build(&self, params: &ModelParams, tape: &mut Tape, grad: bool) -> Result<(Vec<Var>, LossTerms)> {
        let bound = params.bind(tape, grad);
        let input = tape.constant(self.views.clone());
        let out = params.forward(tape, &bound, input, Mode::Train)?;
        let bv = BatchViews::new(
            tape,
            out.embeddings,
            out.logits,
            out.ss_logits,
            self.labels.clone(),
            self.image_ids.clone(),
        )?;
        Ok((bound.vars, loss_terms(tape, &bv, &self.samples, &self.weights)?))
    }

    /// All five losses at `params`, plus the ReLU sign pattern of the pass.
    pub fn evaluate(&self, params: &ModelParams) -> Result<(LossValues, Vec<bool>)> {
        let mut tape = Tape::new();
        let (_, terms) = self.build(params, &mut tape, false)?;
        Ok((terms.values(&tape), tape.relu_pattern()))
    }

    /// Autodiff gradient of `kind` for every learnable tensor.
    pub fn gradients(&self, kind: LossKind) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let (vars, terms) = self.build(&self.params, &mut tape, true)?;
        let loss = match kind {
            LossKind::Cls => terms.cls,
            LossKind::Ss => terms.ss,
            LossKind::Tcl => terms.tcl,
            LossKind::Ccl => terms.ccl,
            LossKind::Total => terms.total,
        };
        tape.backward(loss)?;
        Ok(vars
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect())
    }
}

/// Picks coordinates per tensor and central-differences all losses at once.
/// Coordinates whose ±eps perturbation flips any ReLU input are replaced by
/// fresh draws, since the loss is not differentiable across the flip; a
/// tensor with fewer clean coordinates than requested is checked on all of
/// its clean ones.
pub fn run_suite(config: &SuiteConfig, kinds: &[LossKind]) -> Result<Vec<LossCheck>> {
    if kinds.is_empty() {
        return Err(Error::domain("no losses selected"));
    }
    let mb = MicroBatch::new(config.seed)?;
    let analytic: Vec<Vec<Tensor>> = kinds.iter().map(|&k| mb.gradients(k)).collect::<Result<_>>()?;
    let (_, base_pattern) = mb.evaluate(&mb.params)?;
    let names: Vec<String> = mb.params.learnable().into_iter().map(|(n, _, _)| n).collect();
    let mut checks: Vec<LossCheck> = kinds
        .iter()
        .map(|&kind| LossCheck {
            kind,
            max_rel_error: 0.0,
            worst: String::new(),
            coordinates: 0,
            kink_skips: 0,
        })
        .collect();

    let mut probe = mb.params.clone();
    for (ti, name) in names.iter().enumerate() {
        let numel = mb.params.learnable()[ti].1.numel();
        let want = config.coords_per_tensor.min(numel);
        let mut candidates: Vec<usize> = (0..numel).collect();
        SplitMix64::keyed(config.seed, 1000 + ti as u64).shuffle(&mut candidates);
        let mut accepted = 0;
        let mut skipped = 0;
        for &c in &candidates {
            if accepted == want {
                break;
            }
            let orig = mb.params.learnable()[ti].1.data()[c];
            probe.learnable_mut()[ti].data_mut()[c] = orig + config.eps;
            let (plus, pp) = mb.evaluate(&probe)?;
            probe.learnable_mut()[ti].data_mut()[c] = orig - config.eps;
            let (minus, pm) = mb.evaluate(&probe)?;
            probe.learnable_mut()[ti].data_mut()[c] = orig;
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                continue;
            }
            accepted += 1;
            for (check, grads) in checks.iter_mut().zip(&analytic) {
                let numeric = (check.kind.of(&plus) - check.kind.of(&minus)) / (2.0 * config.eps);
                let err = relative_error(grads[ti].data()[c], numeric, config.floor);
                check.coordinates += 1;
                if err >= check.max_rel_error {
                    check.max_rel_error = err;
                    check.worst = format!("{name}[{c}]");
                }
            }
        }
        if accepted == 0 {
            return Err(Error::domain(format!(
                "every coordinate of {name} crosses a ReLU kink at eps {}",
                config.eps
            )));
        }
        for check in &mut checks {
            check.kink_skips += skipped;
        }
    }
    Ok(checks)
}
