use super::conv::{self, ConvGeom, KERNEL};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of a training-mode batch-norm application.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance, the one used for normalization.
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Relu(Var),
    LnFloor {
        x: Var,
        floor: f64,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        stats: BatchStats,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        tau: f64,
    },
    LogSoftmax {
        x: Var,
        tau: f64,
    },
    PickColumns {
        x: Var,
        idx: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records primitive applications in topological order and replays them in
/// reverse to compute gradients.
///
/// Nodes are appended only, so a node's inputs always precede it. Leaf
/// gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().expect("tensor has rank >= 1");
    (t.numel() / cols, cols)
}

/// `(batch, channels, spatial)` view of an `[N, C, ...]` tensor.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("batch norm needs [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Statistics computed by a training-mode [`Tape::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => Some(stats),
            _ => None,
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let out = Tensor::from_data(v.shape(), data).expect("same shape");
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_data(va.shape(), data).expect("same shape");
        self.push(out, op, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |e| c * e)
    }

    /// `x[.., j] + bias[j]` over the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_of(self.value(x));
        if self.shape(bias) != [cols] {
            return Err(Error::shape(format!("bias {:?} for rows of {cols}", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let v = self.value(x);
        let data = v.data().iter().enumerate().map(|(i, &e)| e + b[i % cols]).collect();
        let out = Tensor::from_data(v.shape(), data)?;
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums the last dimension: `[.., d] -> [..]` (rank-1 inputs give a scalar).
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = rows_of(v);
        let data: Vec<f64> = v.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let shape = if v.rank() > 1 {
            v.shape()[..v.rank() - 1].to_vec()
        } else {
            vec![1]
        };
        debug_assert_eq!(data.len(), rows);
        let out = Tensor::from_data(&shape, data).expect("row count");
        self.push(out, Op::RowSum(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |e| e.max(0.0))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, Op::LnFloor { x, floor }, |e| e.max(floor).ln())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let out = Tensor::from_data(&[m, n], out)?;
        Ok(self.push(out, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// 3×3 cross-correlation (no kernel flip).
    ///
    /// `input` is `[C, H, W]` or `[N, C, H, W]`; `kernels` is `[F, C, 3, 3]`.
    /// The output keeps the input's rank.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        let (batch, c, h, w) = match *si.as_slice() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(format!("conv2d input {si:?}"))),
        };
        if sk.len() != 4 || sk[2] != KERNEL || sk[3] != KERNEL {
            return Err(Error::shape(format!("conv2d kernels must be [F, C, 3, 3], got {sk:?}")));
        }
        if sk[1] != c {
            return Err(Error::shape(format!(
                "conv2d kernels expect {} channels, input has {c}",
                sk[1]
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::domain(format!("conv2d stride {stride} not in {{1, 2}}")));
        }
        if h + 2 * padding < KERNEL || w + 2 * padding < KERNEL {
            return Err(Error::shape(format!(
                "conv2d input {h}x{w} with padding {padding} is smaller than the kernel"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_channels: c,
            filters: sk[0],
            height: h,
            width: w,
            stride,
            padding,
        };
        let data = conv::forward(&geom, self.value(input).data(), self.value(kernels).data());
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let shape = if si.len() == 3 {
            vec![geom.filters, oh, ow]
        } else {
            vec![batch, geom.filters, oh, ow]
        };
        let out = Tensor::from_data(&shape, data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x: input,
                w: kernels,
                geom,
            },
            &[input, kernels],
        ))
    }

    /// Non-overlapping 2×2 mean pooling over `[N, C, H, W]` with even H, W.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, c, h, w] = s[..] else {
            return Err(Error::shape(format!("avg_pool2 input {s:?}")));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 needs even sides, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let ip = &src[plane * h * w..][..h * w];
            let op = &mut out[plane * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x0) = (2 * oy, 2 * ox);
                    op[oy * ow + ox] =
                        0.25 * (ip[y * w + x0] + ip[y * w + x0 + 1] + ip[(y + 1) * w + x0] + ip[(y + 1) * w + x0 + 1]);
                }
            }
        }
        let out = Tensor::from_data(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, c, h, w] = s[..] else {
            return Err(Error::shape(format!("global_avg_pool input {s:?}")));
        };
        let hw = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_data(&[n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, s) = channel_layout(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batch norm affine {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((n, c, s))
    }

    /// Training-mode batch normalization over every axis except the channel
    /// axis (axis 1) of `[N, C, ...]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, s) = self.check_affine(x, gamma, beta)?;
        let count = n * s;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += src[(i * c + ch) * s..][..s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for i in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                var[ch] += src[(i * c + ch) * s..][..s]
                    .iter()
                    .map(|&e| (e - mu) * (e - mu))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for j in off..off + s {
                    let h = (src[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let out = Tensor::from_data(self.shape(x), out)?;
        let stats = BatchStats { mean, var, count };
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let (n, c, s) = self.check_affine(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("running statistics length"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for j in off..off + s {
                    out[j] = g[ch] * (src[j] - running_mean[ch]) * inv_std[ch] + b[ch];
                }
            }
        }
        let out = Tensor::from_data(self.shape(x), out)?;
        let mean = running_mean.to_vec();
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Temperature softmax over the last dimension.
    pub fn softmax_t(&mut self, logits: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::domain(format!("softmax temperature {tau} must be > 0")));
        }
        let v = self.value(logits);
        let (_, cols) = rows_of(v);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let start = out.len();
            out.extend(row.iter().map(|&z| ((z - m) / tau).exp()));
            let total: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let out = Tensor::from_data(v.shape(), out)?;
        Ok(self.push(out, Op::Softmax { x: logits, tau }, &[logits]))
    }

    /// Max-subtracted `log(softmax(z / tau))` over the last dimension.
    pub fn log_softmax_t(&mut self, logits: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::domain(format!("softmax temperature {tau} must be > 0")));
        }
        let v = self.value(logits);
        let (_, cols) = rows_of(v);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|&z| ((z - m) / tau).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&z| (z - m) / tau - lse));
        }
        let out = Tensor::from_data(v.shape(), out)?;
        Ok(self.push(out, Op::LogSoftmax { x: logits, tau }, &[logits]))
    }

    pub fn log_softmax(&mut self, logits: Var) -> Result<Var> {
        self.log_softmax_t(logits, 1.0)
    }

    /// `out[i] = x[i, idx[i]]` for a rank-2 `x`.
    pub fn pick_columns(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [rows, cols] = s[..] else {
            return Err(Error::shape(format!("pick_columns input {s:?}")));
        };
        if idx.len() != rows {
            return Err(Error::shape(format!("{} indices for {rows} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(Error::domain(format!("column {bad} out of range for {cols} columns")));
        }
        let d = self.value(x).data();
        let data = idx.iter().enumerate().map(|(i, &j)| d[i * cols + j]).collect();
        let out = Tensor::from_data(&[rows], data)?;
        Ok(self.push(out, Op::PickColumns { x, idx: idx.to_vec() }, &[x]))
    }

    /// Gathers rows of a rank-2 `x` (indices may repeat).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [rows, cols] = s[..] else {
            return Err(Error::shape(format!("select_rows input {s:?}")));
        };
        if idx.is_empty() {
            return Err(Error::shape("select_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("row {bad} out of range for {rows} rows")));
        }
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_data(&[idx.len(), cols], data)?;
        Ok(self.push(out, Op::SelectRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Scales each row (last dimension) to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, cols) = rows_of(v);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let norm = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            let denom = norm.max(NORMALIZE_EPS);
            norms.push(norm);
            out.extend(row.iter().map(|e| e / denom));
        }
        let out = Tensor::from_data(v.shape(), out).expect("same shape");
        self.push(out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Sign (`> 0`) of every ReLU input on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&e| e > 0.0));
            }
        }
        out
    }

    /// Reverse pass from a one-element node. Every `requires_grad` leaf the
    /// loss depends on gets `d loss / d leaf` added to its gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NotScalar(numel));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::Reshape(x) => sink.add(*x, |d| axpy(d, 1.0, &g)),
                Op::Add(a, b) => {
                    sink.add(*a, |d| axpy(d, 1.0, &g));
                    sink.add(*b, |d| axpy(d, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    sink.add(*a, |d| axpy(d, 1.0, &g));
                    sink.add(*b, |d| axpy(d, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (sink.value(*a), sink.value(*b));
                    sink.add(*a, |d| {
                        for ((o, &gi), &bi) in d.iter_mut().zip(&g).zip(vb) {
                            *o += gi * bi;
                        }
                    });
                    sink.add(*b, |d| {
                        for ((o, &gi), &ai) in d.iter_mut().zip(&g).zip(va) {
                            *o += gi * ai;
                        }
                    });
                }
                Op::Scale(x, c) => sink.add(*x, |d| axpy(d, *c, &g)),
                Op::AddBias { x, bias } => {
                    sink.add(*x, |d| axpy(d, 1.0, &g));
                    sink.add(*bias, |d| {
                        let cols = d.len();
                        for (i, &gi) in g.iter().enumerate() {
                            d[i % cols] += gi;
                        }
                    });
                }
                Op::Sum(x) => sink.add(*x, |d| d.iter_mut().for_each(|o| *o += g[0])),
                Op::Mean(x) => sink.add(*x, |d| {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|o| *o += s);
                }),
                Op::RowSum(x) => sink.add(*x, |d| {
                    let cols = d.len() / g.len();
                    for (row, &gi) in d.chunks_mut(cols).zip(&g) {
                        row.iter_mut().for_each(|o| *o += gi);
                    }
                }),
                Op::Relu(x) => {
                    let vx = sink.value(*x);
                    sink.add(*x, |d| {
                        for ((o, &gi), &xi) in d.iter_mut().zip(&g).zip(vx) {
                            if xi > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
                Op::LnFloor { x, floor } => {
                    let vx = sink.value(*x);
                    sink.add(*x, |d| {
                        for ((o, &gi), &xi) in d.iter_mut().zip(&g).zip(vx) {
                            if xi > *floor {
                                *o += gi / xi;
                            }
                        }
                    });
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (va, vb) = (sink.value(*a), sink.value(*b));
                    sink.add(*a, |d| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &vb[p * n..(p + 1) * n];
                                d[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    sink.add(*b, |d| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = va[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in d[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                    *o += aip * gv;
                                }
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, geom } => {
                    let (want_x, want_w) = (sink.wants(*x), sink.wants(*w));
                    let (dx, dw) = conv::backward(geom, sink.value(*x), sink.value(*w), &g, want_x, want_w);
                    if let Some(dx) = dx {
                        sink.add(*x, |d| axpy(d, 1.0, &dx));
                    }
                    if let Some(dw) = dw {
                        sink.add(*w, |d| axpy(d, 1.0, &dw));
                    }
                }
                Op::AvgPool2(x) => {
                    let s = sink.shape(*x);
                    let (h, w) = (s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    sink.add(*x, |d| {
                        for (plane, gp) in g.chunks(oh * ow).enumerate() {
                            let dp = &mut d[plane * h * w..][..h * w];
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let q = 0.25 * gp[oy * ow + ox];
                                    let (y, x0) = (2 * oy, 2 * ox);
                                    dp[y * w + x0] += q;
                                    dp[y * w + x0 + 1] += q;
                                    dp[(y + 1) * w + x0] += q;
                                    dp[(y + 1) * w + x0 + 1] += q;
                                }
                            }
                        }
                    });
                }
                Op::GlobalAvgPool(x) => {
                    let s = sink.shape(*x);
                    let hw = s[2] * s[3];
                    sink.add(*x, |d| {
                        for (plane, &gi) in d.chunks_mut(hw).zip(&g) {
                            let q = gi / hw as f64;
                            plane.iter_mut().for_each(|o| *o += q);
                        }
                    });
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    stats,
                } => {
                    let (n, c, s) = channel_layout(sink.shape(*x)).expect("checked on forward");
                    let count = stats.count as f64;
                    let gv = sink.value(*gamma);
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            for j in off..off + s {
                                sum_g[ch] += g[j];
                                sum_gx[ch] += g[j] * xhat[j];
                            }
                        }
                    }
                    sink.add(*x, |d| {
                        for i in 0..n {
                            for ch in 0..c {
                                let off = (i * c + ch) * s;
                                let k = gv[ch] * inv_std[ch] / count;
                                for j in off..off + s {
                                    d[j] += k * (count * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                                }
                            }
                        }
                    });
                    sink.add(*gamma, |d| axpy(d, 1.0, &sum_gx));
                    sink.add(*beta, |d| axpy(d, 1.0, &sum_g));
                }
                Op::BatchNormEval {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (n, c, s) = channel_layout(sink.shape(*x)).expect("checked on forward");
                    let (vx, gv) = (sink.value(*x), sink.value(*gamma));
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            for j in off..off + s {
                                sum_g[ch] += g[j];
                                sum_gx[ch] += g[j] * (vx[j] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    sink.add(*x, |d| {
                        for i in 0..n {
                            for ch in 0..c {
                                let off = (i * c + ch) * s;
                                let k = gv[ch] * inv_std[ch];
                                for j in off..off + s {
                                    d[j] += k * g[j];
                                }
                            }
                        }
                    });
                    sink.add(*gamma, |d| axpy(d, 1.0, &sum_gx));
                    sink.add(*beta, |d| axpy(d, 1.0, &sum_g));
                }
                Op::Softmax { x, tau } => {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().expect("rank >= 1");
                    sink.add(*x, |d| {
                        for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                            let gy: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                                *o += yi * (gi - gy) / tau;
                            }
                        }
                    });
                }
                Op::LogSoftmax { x, tau } => {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().expect("rank >= 1");
                    sink.add(*x, |d| {
                        for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                            let total: f64 = gr.iter().sum();
                            for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                                *o += (gi - yi.exp() * total) / tau;
                            }
                        }
                    });
                }
                Op::PickColumns { x, idx } => {
                    let cols = sink.shape(*x)[1];
                    sink.add(*x, |d| {
                        for (i, (&j, &gi)) in idx.iter().zip(&g).enumerate() {
                            d[i * cols + j] += gi;
                        }
                    });
                }
                Op::SelectRows { x, idx } => {
                    let cols = sink.shape(*x)[1];
                    sink.add(*x, |d| {
                        for (&i, gr) in idx.iter().zip(g.chunks(cols)) {
                            axpy(&mut d[i * cols..(i + 1) * cols], 1.0, gr);
                        }
                    });
                }
                Op::NormalizeRows { x, norms } => {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().expect("rank >= 1");
                    sink.add(*x, |d| {
                        let rows = d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols));
                        for (((dr, yr), gr), &norm) in rows.zip(norms) {
                            if norm > NORMALIZE_EPS {
                                let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                                for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                                    *o += (gi - yi * yg) / norm;
                                }
                            } else {
                                axpy(dr, 1.0 / NORMALIZE_EPS, gr);
                            }
                        }
                    });
                }
            }
        }
        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match node.grad.as_mut() {
                Some(acc) => axpy(acc.data_mut(), 1.0, &g),
                None => {
                    node.grad = Some(Tensor::from_data(node.value.shape(), g).expect("leaf shape"));
                }
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Borrow split between immutable node values and the mutable gradient
/// buffers of the current reverse pass.
struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    fn value(&self, v: Var) -> &'a [f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &'a [usize] {
        self.nodes[v.0].value.shape()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(buf);
    }
}
