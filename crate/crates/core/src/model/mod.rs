//! The micro-CNN backbone, the linear classifier and the self-supervised
//! head.
//!
//! Backbone: three blocks of `3×3 conv (stride 1, pad 1) → batch norm → ReLU
//! → 2×2 average pool` with 16, 32 and 64 filters, then a global average pool
//! to a 64-dimensional embedding. The classifier is a single linear layer
//! over the embedding; the self-supervised head is `linear(64→32) → batch
//! norm → ReLU → linear(32→10)`, also over the embedding.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use crate::augment::NUM_VIEWS;
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor_core::{BatchStats, Tape, Tensor, Var};

pub const EMBED_DIM: usize = 64;
pub const BLOCK_FILTERS: [usize; 3] = [16, 32, EMBED_DIM];
pub const SS_HIDDEN: usize = 32;
pub const SS_CLASSES: usize = NUM_VIEWS;
/// Weight kept on the old running statistic at each training step.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How the optimizer treats a learnable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Conv kernels and linear weights; weight decay applies.
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    fn update_running(&mut self, stats: &BatchStats) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`, applied as `x · weight + bias`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[filters, in_channels, 3, 3]`.
    pub kernels: Tensor,
    pub bn: BatchNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<ConvBlock>,
    pub classifier: Linear,
    pub ss_fc1: Linear,
    pub ss_bn: BatchNormParams,
    pub ss_fc2: Linear,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut SplitMix64) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_data(shape, data).expect("shape product")
}

fn linear(inputs: usize, outputs: usize, rng: &mut SplitMix64) -> Linear {
    Linear {
        weight: kaiming_uniform(&[inputs, outputs], inputs, rng),
        bias: Tensor::zeros(&[outputs]),
    }
}

impl ModelParams {
    /// Kaiming-uniform weights, zero biases, unit batch-norm scale.
    pub fn init(num_base_categories: usize, channels: usize, seed: u64) -> Result<Self> {
        if num_base_categories < 2 {
            return Err(Error::domain(format!(
                "need at least 2 base categories, got {num_base_categories}"
            )));
        }
        if !matches!(channels, 1 | 3) {
            return Err(Error::domain(format!("channels must be 1 or 3, got {channels}")));
        }
        let mut stream = 0u64;
        let mut next_rng = || {
            stream += 1;
            SplitMix64::keyed(seed, stream)
        };
        let mut blocks = Vec::new();
        let mut in_ch = channels;
        for &filters in &BLOCK_FILTERS {
            blocks.push(ConvBlock {
                kernels: kaiming_uniform(&[filters, in_ch, 3, 3], in_ch * 9, &mut next_rng()),
                bn: BatchNormParams::new(filters),
            });
            in_ch = filters;
        }
        Ok(Self {
            blocks,
            classifier: linear(EMBED_DIM, num_base_categories, &mut next_rng()),
            ss_fc1: linear(EMBED_DIM, SS_HIDDEN, &mut next_rng()),
            ss_bn: BatchNormParams::new(SS_HIDDEN),
            ss_fc2: linear(SS_HIDDEN, SS_CLASSES, &mut next_rng()),
        })
    }

    pub fn num_base_categories(&self) -> usize {
        self.classifier.bias.numel()
    }

    pub fn input_channels(&self) -> usize {
        self.blocks[0].kernels.shape()[1]
    }

    /// Learnable tensors in binding order.
    pub fn learnable(&self) -> Vec<(String, &Tensor, ParamRole)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((
                format!("backbone.block{}.conv.weight", i + 1),
                &b.kernels,
                ParamRole::Weight,
            ));
            out.push((
                format!("backbone.block{}.bn.weight", i + 1),
                &b.bn.gamma,
                ParamRole::Norm,
            ));
            out.push((format!("backbone.block{}.bn.bias", i + 1), &b.bn.beta, ParamRole::Norm));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight, ParamRole::Weight));
        out.push(("classifier.bias".into(), &self.classifier.bias, ParamRole::Bias));
        out.push(("ss_head.fc1.weight".into(), &self.ss_fc1.weight, ParamRole::Weight));
        out.push(("ss_head.fc1.bias".into(), &self.ss_fc1.bias, ParamRole::Bias));
        out.push(("ss_head.bn.weight".into(), &self.ss_bn.gamma, ParamRole::Norm));
        out.push(("ss_head.bn.bias".into(), &self.ss_bn.beta, ParamRole::Norm));
        out.push(("ss_head.fc2.weight".into(), &self.ss_fc2.weight, ParamRole::Weight));
        out.push(("ss_head.fc2.bias".into(), &self.ss_fc2.bias, ParamRole::Bias));
        out
    }

    /// Same order as [`ModelParams::learnable`].
    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.kernels);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out.push(&mut self.ss_fc1.weight);
        out.push(&mut self.ss_fc1.bias);
        out.push(&mut self.ss_bn.gamma);
        out.push(&mut self.ss_bn.beta);
        out.push(&mut self.ss_fc2.weight);
        out.push(&mut self.ss_fc2.bias);
        out
    }

    /// Every tensor, learnable or not, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("backbone.block{}", i + 1);
            out.push((format!("{p}.conv.weight"), &b.kernels));
            out.push((format!("{p}.bn.weight"), &b.bn.gamma));
            out.push((format!("{p}.bn.bias"), &b.bn.beta));
            out.push((format!("{p}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("{p}.bn.running_var"), &b.bn.running_var));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out.push(("ss_head.fc1.weight".into(), &self.ss_fc1.weight));
        out.push(("ss_head.fc1.bias".into(), &self.ss_fc1.bias));
        out.push(("ss_head.bn.weight".into(), &self.ss_bn.gamma));
        out.push(("ss_head.bn.bias".into(), &self.ss_bn.beta));
        out.push(("ss_head.bn.running_mean".into(), &self.ss_bn.running_mean));
        out.push(("ss_head.bn.running_var".into(), &self.ss_bn.running_var));
        out.push(("ss_head.fc2.weight".into(), &self.ss_fc2.weight));
        out.push(("ss_head.fc2.bias".into(), &self.ss_fc2.bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|(_, t, _)| t.numel()).sum()
    }

    /// Puts every learnable tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .learnable()
            .into_iter()
            .map(|(_, t, _)| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams { vars }
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape, out: &ForwardOutput) {
        let bns = self
            .blocks
            .iter_mut()
            .map(|b| &mut b.bn)
            .chain(std::iter::once(&mut self.ss_bn));
        for (bn, &var) in bns.zip(&out.bn_nodes) {
            if let Some(stats) = tape.batch_stats(var) {
                bn.update_running(stats);
            }
        }
    }
}

/// Tape handles for the learnable tensors of a [`ModelParams`], in
/// [`ModelParams::learnable`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn block(&self, i: usize) -> (Var, Var, Var) {
        (self.vars[3 * i], self.vars[3 * i + 1], self.vars[3 * i + 2])
    }

    fn at(&self, offset: usize) -> Var {
        self.vars[3 * BLOCK_FILTERS.len() + offset]
    }

    pub fn classifier(&self) -> (Var, Var) {
        (self.at(0), self.at(1))
    }

    fn ss_head(&self) -> [Var; 6] {
        [self.at(2), self.at(3), self.at(4), self.at(5), self.at(6), self.at(7)]
    }
}

/// Nodes produced by one forward pass over a batch of views.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, 64]`.
    pub embeddings: Var,
    /// `[N, |C_base|]`.
    pub logits: Var,
    /// `[N, 10]`.
    pub ss_logits: Var,
    /// Batch-norm nodes (three backbone blocks, then the SS head).
    bn_nodes: Vec<Var>,
}

/// Stacks images into an `[N, C, H, W]` tensor of pixels scaled to `[0, 1]`.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a LabeledImage>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut geom = None;
    let mut n = 0;
    for img in images {
        match geom {
            None => geom = Some((img.channels, img.size)),
            Some(g) if g != (img.channels, img.size) => {
                return Err(Error::shape("images in one batch must share their geometry"));
            }
            Some(_) => {}
        }
        data.extend(img.pixels.iter().map(|&p| f64::from(p) / 255.0));
        n += 1;
    }
    let (c, s) = geom.ok_or_else(|| Error::shape("empty image batch"))?;
    Tensor::from_data(&[n, c, s, s], data)
}

fn norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, stats: &BatchNormParams, mode: Mode) -> Result<Var> {
    match mode {
        Mode::Train => tape.batch_norm(x, gamma, beta),
        Mode::Eval => tape.batch_norm_eval(x, gamma, beta, stats.running_mean.data(), stats.running_var.data()),
    }
}

fn apply_linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

impl ModelParams {
    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(Error::shape(format!("expected [N, C, H, W], got {shape:?}")));
        };
        if c != self.input_channels() {
            return Err(Error::shape(format!(
                "model expects {} channels, got {c}",
                self.input_channels()
            )));
        }
        let factor = 1 << BLOCK_FILTERS.len();
        if h != w || h % factor != 0 {
            return Err(Error::shape(format!(
                "image side must be square and divisible by {factor}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// `[N, C, H, W] -> [N, 64]` embedding. Returns the batch-norm nodes.
    pub fn backbone(&self, tape: &mut Tape, bound: &BoundParams, input: Var, mode: Mode) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.shape(input))?;
        let mut h = input;
        let mut bn_nodes = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let (k, gamma, beta) = bound.block(i);
            h = tape.conv2d(h, k, 1, 1)?;
            h = norm(tape, h, gamma, beta, &block.bn, mode)?;
            bn_nodes.push(h);
            h = tape.relu(h);
            h = tape.avg_pool2(h)?;
        }
        Ok((tape.global_avg_pool(h)?, bn_nodes))
    }

    pub fn classifier_logits(&self, tape: &mut Tape, bound: &BoundParams, v: Var) -> Result<Var> {
        let (w, b) = bound.classifier();
        apply_linear(tape, v, w, b)
    }

    /// SS head logits; returns `(logits, batch-norm node)`.
    pub fn ss_logits(&self, tape: &mut Tape, bound: &BoundParams, v: Var, mode: Mode) -> Result<(Var, Var)> {
        let [w1, b1, gamma, beta, w2, b2] = bound.ss_head();
        let h = apply_linear(tape, v, w1, b1)?;
        let bn = norm(tape, h, gamma, beta, &self.ss_bn, mode)?;
        let h = tape.relu(bn);
        Ok((apply_linear(tape, h, w2, b2)?, bn))
    }

    /// Full forward pass of a batch of images.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, input: Var, mode: Mode) -> Result<ForwardOutput> {
        let (embeddings, mut bn_nodes) = self.backbone(tape, bound, input, mode)?;
        let logits = self.classifier_logits(tape, bound, embeddings)?;
        let (ss_logits, ss_bn) = self.ss_logits(tape, bound, embeddings, mode)?;
        bn_nodes.push(ss_bn);
        Ok(ForwardOutput {
            embeddings,
            logits,
            ss_logits,
            bn_nodes,
        })
    }

    /// Eval-mode embeddings, one row per image.
    pub fn embed_batch(&self, images: &[&LabeledImage]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images_to_tensor(images.iter().copied())?);
        let (v, _) = self.backbone(&mut tape, &bound, x, Mode::Eval)?;
        Ok(tape.value(v).clone())
    }

    /// Eval-mode embedding `v` of one image.
    pub fn embed(&self, image: &LabeledImage) -> Result<Tensor> {
        let rows = self.embed_batch(&[image])?;
        rows.reshape(&[EMBED_DIM])
    }

    fn embedding_rows(v: &Tensor) -> Result<Tensor> {
        match v.shape() {
            [EMBED_DIM] => v.reshape(&[1, EMBED_DIM]),
            [_, EMBED_DIM] => Ok(v.clone()),
            s => Err(Error::shape(format!("expected a {EMBED_DIM}-dim embedding, got {s:?}"))),
        }
    }

    /// Classifier logits `p` for an embedding (`[64]` or `[N, 64]`).
    pub fn classify(&self, v: &Tensor) -> Result<Tensor> {
        let rows = Self::embedding_rows(v)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(rows);
        let p = self.classifier_logits(&mut tape, &bound, x)?;
        Self::match_rank(tape.value(p), v)
    }

    /// Self-supervised logits for an embedding (`[64]` or `[N, 64]`).
    pub fn ss_predict(&self, v: &Tensor, mode: Mode) -> Result<Tensor> {
        let rows = Self::embedding_rows(v)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(rows);
        let (s, _) = self.ss_logits(&mut tape, &bound, x, mode)?;
        Self::match_rank(tape.value(s), v)
    }

    fn match_rank(out: &Tensor, v: &Tensor) -> Result<Tensor> {
        if v.rank() == 1 {
            out.reshape(&[out.numel()])
        } else {
            Ok(out.clone())
        }
    }
}

#[cfg(test)]
mod tests;
