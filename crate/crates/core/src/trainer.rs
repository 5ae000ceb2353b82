//! Momentum-SGD pre-training on the base split.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::augment::{expand, NUM_VIEWS};
use crate::dataset::{FewShotDataset, Split};
use crate::error::{Error, Result};
use crate::losses::{loss_terms, BatchViews, LossValues, LossWeights};
use crate::memory_bank::MemoryBank;
use crate::model::{images_to_tensor, Mode, ModelParams, ParamRole, EMBED_DIM};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor_core::Tape;

const SHUFFLE_TAG: u64 = 0x5348_5546;
const AUGMENT_TAG: u64 = 0x4155_474D;
const BANK_TAG: u64 = 0x4241_4E4B;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 30 epochs of batch 16, decays after 20 and 25.
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay_epochs: vec![20, 25],
            lr_decay_factor: 0.1,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 80 epochs of batch 32 with decays after 60 and 70.
    pub fn paper_protocol() -> Self {
        Self {
            epochs: 80,
            batch_size: 32,
            lr_decay_epochs: vec![60, 70],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::domain(format!("lr0 {} must be > 0", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::domain(format!(
                "momentum {} must lie in [0, 1) and weight decay {} must be >= 0",
                self.momentum, self.weight_decay
            )));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::domain(format!(
                "decay factor {} must be > 0",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("decay epochs must be strictly increasing"));
        }
        if let Some(&last) = self.lr_decay_epochs.last() {
            if last >= self.epochs {
                return Err(Error::domain(format!(
                    "decay epoch {last} is not below {} epochs",
                    self.epochs
                )));
            }
        }
        self.loss_weights.validate()
    }
}

/// `lr0 · factor^(decay epochs ≤ epoch)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::domain(format!("epoch {epoch} outside 0..{}", config.epochs)));
    }
    let decays = config.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(config.lr0 * config.lr_decay_factor.powi(decays as i32))
}

/// `buf ← momentum · buf + (grad + wd · param); param ← param − lr · buf`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], buf: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = momentum * *b + (g + weight_decay * *p);
        *p -= lr * *b;
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean: LossValues,
    pub first_batch: LossValues,
    pub images: usize,
    pub seconds: f64,
}

impl EpochStats {
    pub fn images_per_second(&self) -> f64 {
        self.images as f64 / self.seconds.max(1e-9)
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossValues,
}

impl From<&EpochStats> for HistoryRow {
    fn from(s: &EpochStats) -> Self {
        Self {
            epoch: s.epoch,
            lr: s.lr,
            losses: s.mean,
        }
    }
}

pub const HISTORY_HEADER: &str = "epoch\tlr\tl_cls\tl_ss\tl_tcl\tl_ccl\tl_total";

pub fn write_history(rows: &[HistoryRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in rows {
        let l = &r.losses;
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.lr, l.cls, l.ss, l.tcl, l.ccl, l.total
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_history(rows: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    write_history(rows, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Model, memory bank and optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    pub params: ModelParams,
    pub bank: MemoryBank,
    dataset: &'a FewShotDataset,
    config: TrainConfig,
    buffers: Vec<Vec<f64>>,
    roles: Vec<ParamRole>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a FewShotDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.split != Split::Base {
            return Err(Error::domain("training runs on the base split"));
        }
        if dataset.is_empty() {
            return Err(Error::domain("training set is empty"));
        }
        let params = ModelParams::init(dataset.num_categories, dataset.channels, config.seed)?;
        let bank = MemoryBank::init(dataset, derive_seed(config.seed, BANK_TAG))?;
        let learnable = params.learnable();
        let buffers = learnable.iter().map(|(_, t, _)| vec![0.0; t.numel()]).collect();
        let roles = learnable.iter().map(|&(_, _, r)| r).collect();
        Ok(Self {
            params,
            bank,
            dataset,
            config,
            buffers,
            roles,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Image indices of every mini-batch of `epoch`, in training order.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        SplitMix64::keyed(derive_seed(self.config.seed, SHUFFLE_TAG), epoch as u64).shuffle(&mut order);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let start = Instant::now();
        let lr = lr_at(&self.config, epoch)?;
        let aug_seed = derive_seed(derive_seed(self.config.seed, AUGMENT_TAG), epoch as u64);
        let mut sum = LossValues::default();
        let mut first_batch = None;
        let mut images = 0;
        for batch in self.batches(epoch) {
            let v = self.train_batch(&batch, lr, aug_seed)?;
            first_batch.get_or_insert(v);
            let w = batch.len() as f64;
            sum.cls += w * v.cls;
            sum.ss += w * v.ss;
            sum.tcl += w * v.tcl;
            sum.ccl += w * v.ccl;
            sum.total += w * v.total;
            images += batch.len();
        }
        let n = images as f64;
        let mean = LossValues {
            cls: sum.cls / n,
            ss: sum.ss / n,
            tcl: sum.tcl / n,
            ccl: sum.ccl / n,
            total: sum.total / n,
        };
        Ok(EpochStats {
            epoch,
            lr,
            mean,
            first_batch: first_batch.unwrap_or_default(),
            images,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn train_batch(&mut self, batch: &[usize], lr: f64, aug_seed: u64) -> Result<LossValues> {
        let ds = self.dataset;
        let views: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                let img = &ds.images[i];
                expand(img, derive_seed(aug_seed, u64::from(img.image_id)))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();
        let labels: Vec<usize> = batch.iter().map(|&i| ds.images[i].category).collect();
        let ids: Vec<u32> = batch.iter().map(|&i| ds.images[i].image_id).collect();
        let samples = self.bank.sample_per_category()?;

        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let input = tape.constant(images_to_tensor(views.iter())?);
        let out = self.params.forward(&mut tape, &bound, input, Mode::Train)?;
        let bv = BatchViews::new(&tape, out.embeddings, out.logits, out.ss_logits, labels, ids.clone())?;
        let terms = loss_terms(&mut tape, &bv, &samples, &self.config.loss_weights)?;
        let values = terms.values(&tape);
        if !values.total.is_finite() {
            return Err(Error::domain(format!("training loss diverged to {}", values.total)));
        }
        tape.backward(terms.total)?;

        let (momentum, wd) = (self.config.momentum, self.config.weight_decay);
        for (((t, &var), buf), &role) in self
            .params
            .learnable_mut()
            .into_iter()
            .zip(&bound.vars)
            .zip(&mut self.buffers)
            .zip(&self.roles)
        {
            let decay = if role == ParamRole::Weight { wd } else { 0.0 };
            match tape.grad(var) {
                Some(g) => sgd_step(t.data_mut(), g.data(), buf, lr, momentum, decay),
                None => {
                    let zeros = vec![0.0; buf.len()];
                    sgd_step(t.data_mut(), &zeros, buf, lr, momentum, decay);
                }
            }
        }
        self.params.update_running_stats(&tape, &out);

        let emb = tape.value(out.embeddings).data();
        for (i, &id) in ids.iter().enumerate() {
            let row = i * NUM_VIEWS * EMBED_DIM;
            self.bank.update(id, &emb[row..row + EMBED_DIM])?;
        }
        Ok(values)
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }
}

/// Runs every epoch, calling `observe` after each one.
pub fn pretrain_with(
    dataset: &FewShotDataset,
    config: &TrainConfig,
    mut observe: impl FnMut(&EpochStats),
) -> Result<(ModelParams, Vec<HistoryRow>)> {
    let mut trainer = Trainer::new(dataset, config.clone())?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let stats = trainer.train_epoch(epoch)?;
        observe(&stats);
        history.push(HistoryRow::from(&stats));
    }
    Ok((trainer.into_params(), history))
}

pub fn pretrain(dataset: &FewShotDataset, config: &TrainConfig) -> Result<(ModelParams, Vec<HistoryRow>)> {
    pretrain_with(dataset, config, |_| {})
}
