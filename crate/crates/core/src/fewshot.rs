//! Episodic evaluation on frozen features: N-way K-shot task sampling,
//! multinomial logistic regression on the support set, and accuracy with a
//! 95% confidence interval.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{FewShotDataset, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{ModelParams, EMBED_DIM};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor_core::Tensor;

pub const DEFAULT_EPISODES: usize = 2000;
pub const DEFAULT_QUERY: usize = 15;
/// Images embedded per forward pass during feature extraction.
const EXTRACT_CHUNK: usize = 64;

/// Dataset indices and episode labels of one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskIndices {
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTask {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    /// Sampled category ids, ascending; episode label `j` is `categories[j]`.
    pub categories: Vec<usize>,
    pub support: Vec<(LabeledImage, usize)>,
    pub query: Vec<(LabeledImage, usize)>,
}

/// Draws `n` categories with at least `k + q` images each, then `k` support
/// and `q` disjoint query images per category.
pub fn sample_indices(
    novel: &FewShotDataset,
    n: usize,
    k: usize,
    q: usize,
    seed: u64,
) -> Result<(Vec<usize>, TaskIndices)> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::domain(format!(
            "n_way, k_shot and q_query must be >= 1, got {n}, {k}, {q}"
        )));
    }
    let by_cat = novel.by_category();
    let mut eligible: Vec<usize> = by_cat
        .iter()
        .filter(|(_, v)| v.len() >= k + q)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < n {
        return Err(Error::InsufficientData(format!(
            "{n}-way {k}-shot with {q} queries needs {n} categories of >= {} images, found {}",
            k + q,
            eligible.len()
        )));
    }
    let mut rng = SplitMix64::new(seed);
    rng.shuffle(&mut eligible);
    let mut cats = eligible[..n].to_vec();
    cats.sort_unstable();
    let mut task = TaskIndices {
        support: Vec::with_capacity(n * k),
        query: Vec::with_capacity(n * q),
    };
    for (label, c) in cats.iter().enumerate() {
        let mut members = by_cat[c].clone();
        rng.shuffle(&mut members);
        task.support.extend(members[..k].iter().map(|&i| (i, label)));
        task.query.extend(members[k..k + q].iter().map(|&i| (i, label)));
    }
    Ok((cats, task))
}

pub fn sample_task(novel: &FewShotDataset, n: usize, k: usize, q: usize, seed: u64) -> Result<EpisodeTask> {
    let (categories, idx) = sample_indices(novel, n, k, q, seed)?;
    let take = |items: &[(usize, usize)]| items.iter().map(|&(i, l)| (novel.images[i].clone(), l)).collect();
    Ok(EpisodeTask {
        n_way: n,
        k_shot: k,
        q_query: q,
        categories,
        support: take(&idx.support),
        query: take(&idx.query),
    })
}

fn normalize_rows(m: &mut Tensor) {
    let cols = m.shape()[1];
    for row in m.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Eval-mode embeddings of `images`, one L2-normalized row each.
pub fn extract_features(params: &ModelParams, images: &[&LabeledImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::shape("no images to embed"));
    }
    let mut data = Vec::with_capacity(images.len() * EMBED_DIM);
    for chunk in images.chunks(EXTRACT_CHUNK) {
        data.extend_from_slice(params.embed_batch(chunk)?.data());
    }
    let mut m = Tensor::from_data(&[images.len(), EMBED_DIM], data)?;
    normalize_rows(&mut m);
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRegConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub step: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            iterations: 500,
            step: 1.0,
        }
    }
}

/// Softmax classifier `z = x W + b` with `W: [d, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRegModel {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    z.iter_mut().for_each(|v| *v = (*v - m).exp());
    let s: f64 = z.iter().sum();
    z.iter_mut().for_each(|v| *v /= s);
}

impl LogRegModel {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// Class probabilities for each row of `features`.
    pub fn predict_proba(&self, features: &Tensor) -> Result<Tensor> {
        let (rows, d) = match features.shape() {
            &[r, d] => (r, d),
            s => return Err(Error::shape(format!("features must be a matrix, got {s:?}"))),
        };
        if d != self.weights.shape()[0] {
            return Err(Error::shape(format!(
                "{d}-dim features for a {}-dim model",
                self.weights.shape()[0]
            )));
        }
        let n = self.num_classes();
        let w = self.weights.data();
        let mut out = vec![0.0; rows * n];
        for (x, z) in features.data().chunks(d).zip(out.chunks_mut(n)) {
            z.copy_from_slice(&self.bias);
            for (j, &xj) in x.iter().enumerate() {
                for (zc, &wc) in z.iter_mut().zip(&w[j * n..(j + 1) * n]) {
                    *zc += xj * wc;
                }
            }
            softmax_in_place(z);
        }
        Tensor::from_data(&[rows, n], out)
    }

    /// Arg-max class of each row; ties go to the lowest index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let p = self.predict_proba(features)?;
        let n = self.num_classes();
        Ok(p.data()
            .chunks(n)
            .map(|r| (0..n).fold(0, |best, c| if r[c] > r[best] { c } else { best }))
            .collect())
    }
}

/// Full-batch gradient descent on
/// `mean cross-entropy + λ / (2N) · ‖W‖²` from zero weights; the bias is
/// not penalized.
pub fn fit_logreg(features: &Tensor, labels: &[usize], n_classes: usize, config: &LogRegConfig) -> Result<LogRegModel> {
    let (rows, d) = match features.shape() {
        &[r, d] => (r, d),
        s => return Err(Error::shape(format!("features must be a matrix, got {s:?}"))),
    };
    if labels.len() != rows {
        return Err(Error::shape(format!("{} labels for {rows} feature rows", labels.len())));
    }
    if n_classes == 0 {
        return Err(Error::DegenerateInput("no classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::DegenerateInput(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    if let Some(missing) = (0..n_classes).find(|c| !labels.contains(c)) {
        return Err(Error::DegenerateInput(format!("class {missing} has no examples")));
    }
    let n = n_classes;
    let x = features.data();
    let mut w = vec![0.0; d * n];
    let mut b = vec![0.0; n];
    let mut gw = vec![0.0; d * n];
    let mut gb = vec![0.0; n];
    let mut z = vec![0.0; n];
    let inv_n = 1.0 / rows as f64;
    for _ in 0..config.iterations {
        gw.iter_mut()
            .enumerate()
            .for_each(|(i, g)| *g = config.lambda * inv_n * w[i]);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (xi, &y) in x.chunks(d).zip(labels) {
            z.copy_from_slice(&b);
            for (j, &xj) in xi.iter().enumerate() {
                for (zc, &wc) in z.iter_mut().zip(&w[j * n..(j + 1) * n]) {
                    *zc += xj * wc;
                }
            }
            softmax_in_place(&mut z);
            z[y] -= 1.0;
            for (j, &xj) in xi.iter().enumerate() {
                for (g, &e) in gw[j * n..(j + 1) * n].iter_mut().zip(&z) {
                    *g += inv_n * xj * e;
                }
            }
            for (g, &e) in gb.iter_mut().zip(&z) {
                *g += inv_n * e;
            }
        }
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= config.step * g);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= config.step * g);
    }
    Ok(LogRegModel {
        weights: Tensor::from_data(&[d, n], w)?,
        bias: b,
    })
}

/// Fits on the support rows and returns query accuracy.
pub fn classify_episode(
    support: &Tensor,
    support_labels: &[usize],
    query: &Tensor,
    query_labels: &[usize],
    n_classes: usize,
    config: &LogRegConfig,
) -> Result<f64> {
    if query_labels.is_empty() || query.shape()[0] != query_labels.len() {
        return Err(Error::shape(format!(
            "{} query labels for {:?} features",
            query_labels.len(),
            query.shape()
        )));
    }
    let model = fit_logreg(support, support_labels, n_classes, config)?;
    let pred = model.predict(query)?;
    let hits = pred.iter().zip(query_labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / query_labels.len() as f64)
}

pub fn evaluate_episode(params: &ModelParams, task: &EpisodeTask) -> Result<f64> {
    evaluate_episode_with(params, task, &LogRegConfig::default())
}

pub fn evaluate_episode_with(params: &ModelParams, task: &EpisodeTask, config: &LogRegConfig) -> Result<f64> {
    fn imgs(items: &[(LabeledImage, usize)]) -> Vec<&LabeledImage> {
        items.iter().map(|(i, _)| i).collect()
    }
    let labels = |items: &[(LabeledImage, usize)]| items.iter().map(|&(_, l)| l).collect::<Vec<_>>();
    let s = extract_features(params, &imgs(&task.support))?;
    let q = extract_features(params, &imgs(&task.query))?;
    classify_episode(&s, &labels(&task.support), &q, &labels(&task.query), task.n_way, config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub mean_accuracy: f64,
    pub ci95_half_width: f64,
    pub per_episode_accuracies: Vec<f64>,
}

impl EvalReport {
    /// Mean and `1.96 · s / √n` with `s` the sample standard deviation.
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        let n = accuracies.len();
        if n == 0 {
            return Err(Error::domain("no episodes"));
        }
        // Shifted by the first value so constant inputs give exact results.
        let k = accuracies[0];
        let nf = n as f64;
        let (s1, s2) = accuracies
            .iter()
            .fold((0.0, 0.0), |(s1, s2), a| (s1 + (a - k), s2 + (a - k) * (a - k)));
        let mean = k + s1 / nf;
        let half = if n > 1 {
            let var = ((s2 - s1 * s1 / nf) / (nf - 1.0)).max(0.0);
            1.96 * var.sqrt() / nf.sqrt()
        } else {
            0.0
        };
        Ok(Self {
            n_episodes: n,
            mean_accuracy: mean,
            ci95_half_width: half,
            per_episode_accuracies: accuracies,
        })
    }

    /// `mean±ci` in percent with two decimals.
    pub fn summary(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean_accuracy, 100.0 * self.ci95_half_width)
    }
}

pub const REPORT_HEADER: &str = "episode\taccuracy\tci95_half_width";

/// One row per episode, then a `mean` row carrying the interval.
pub fn write_report(report: &EvalReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for (i, a) in report.per_episode_accuracies.iter().enumerate() {
        writeln!(w, "{i}\t{a}\t")?;
    }
    writeln!(w, "mean\t{}\t{}", report.mean_accuracy, report.ci95_half_width)?;
    w.flush()?;
    Ok(())
}

pub fn save_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    write_report(report, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// Protocol of one evaluation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalProtocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            q_query: DEFAULT_QUERY,
            episodes: DEFAULT_EPISODES,
            seed: 0,
        }
    }
}

/// Embeds the novel split once, then runs every episode on the cached
/// features. Episode `i` uses seed `derive_seed(seed, i)`.
pub fn run_eval(params: &ModelParams, novel: &FewShotDataset, p: &EvalProtocol) -> Result<EvalReport> {
    if p.episodes == 0 {
        return Err(Error::domain("episodes must be >= 1"));
    }
    let images: Vec<&LabeledImage> = novel.images.iter().collect();
    let features = extract_features(params, &images)?;
    run_eval_on_features(&features, novel, p, &LogRegConfig::default())
}

/// [`run_eval`] over precomputed feature rows (row `i` belongs to image `i`).
pub fn run_eval_on_features(
    features: &Tensor,
    novel: &FewShotDataset,
    p: &EvalProtocol,
    config: &LogRegConfig,
) -> Result<EvalReport> {
    if features.shape() != [novel.len(), EMBED_DIM] {
        return Err(Error::shape(format!(
            "features {:?} for {} images",
            features.shape(),
            novel.len()
        )));
    }
    sample_indices(novel, p.n_way, p.k_shot, p.q_query, p.seed)?;
    let gather = |items: &[(usize, usize)]| -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(items.len() * EMBED_DIM);
        for &(i, _) in items {
            data.extend_from_slice(features.row(i));
        }
        Ok((
            Tensor::from_data(&[items.len(), EMBED_DIM], data)?,
            items.iter().map(|&(_, l)| l).collect(),
        ))
    };
    let accuracies = (0..p.episodes)
        .into_par_iter()
        .map(|e| {
            let (_, task) = sample_indices(novel, p.n_way, p.k_shot, p.q_query, derive_seed(p.seed, e as u64))?;
            let (s, sl) = gather(&task.support)?;
            let (q, ql) = gather(&task.query)?;
            classify_episode(&s, &sl, &q, &ql, p.n_way, config)
        })
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_accuracies(accuracies)
}

pub const EMBEDDING_HEADER_PREFIX: &str = "image_id\tcategory";

/// `image_id, category` and the 64 normalized feature values of every image.
pub fn write_embeddings(params: &ModelParams, dataset: &FewShotDataset, mut w: impl Write) -> Result<()> {
    let images: Vec<&LabeledImage> = dataset.images.iter().collect();
    let features = extract_features(params, &images)?;
    write!(w, "{EMBEDDING_HEADER_PREFIX}")?;
    for j in 0..EMBED_DIM {
        write!(w, "\tf{j}")?;
    }
    writeln!(w)?;
    for (i, img) in images.iter().enumerate() {
        write!(w, "{}\t{}", img.image_id, img.category)?;
        for v in features.row(i) {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
