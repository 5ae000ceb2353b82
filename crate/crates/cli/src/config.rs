//! `key = value` run configuration, one pair per line, `#` starts a comment.

use std::fmt::Write as _;
use std::str::FromStr;

use mgrcl::fewshot::EvalProtocol;
use mgrcl::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalProtocol,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
}

const KEYS: [&str; 19] = [
    "epochs",
    "batch_size",
    "lr0",
    "momentum",
    "weight_decay",
    "lr_decay_epochs",
    "lr_decay_factor",
    "alpha",
    "beta",
    "tau1",
    "tau2",
    "ss_loss",
    "seed",
    "n_way",
    "k_shot",
    "q_query",
    "episodes",
    "eval_seed",
    "preset",
];

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn render(&self) -> String {
        let t = &self.train;
        let w = &t.loss_weights;
        let e = &self.eval;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("writing to a String");
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr0", t.lr0.to_string());
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("lr_decay_epochs", list(&t.lr_decay_epochs));
        put("lr_decay_factor", t.lr_decay_factor.to_string());
        put("alpha", w.alpha.to_string());
        put("beta", w.beta.to_string());
        put("tau1", w.tau1.to_string());
        put("tau2", w.tau2.to_string());
        put("ss_loss", w.ss.to_string());
        put("seed", t.seed.to_string());
        put("n_way", e.n_way.to_string());
        put("k_shot", e.k_shot.to_string());
        put("q_query", e.q_query.to_string());
        put("episodes", e.episodes.to_string());
        put("eval_seed", e.seed.to_string());
        out
    }

    /// Applies the pairs in `text` on top of the defaults. A `preset` key
    /// (`desk` or `paper-protocol`) resets the training schedule before the
    /// other keys apply, wherever it appears.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(ConfigError::UnknownKey { line, key: k.into() });
            }
            if pairs.iter().any(|&(_, seen, _)| seen == k) {
                return Err(ConfigError::Duplicate { line, key: k.into() });
            }
            pairs.push((line, k, v));
        }
        let mut cfg = Self::default();
        if let Some(&(line, key, value)) = pairs.iter().find(|p| p.1 == "preset") {
            cfg.train = preset(value).ok_or_else(|| bad(line, key, value))?;
        }
        for &(line, key, value) in pairs.iter().filter(|p| p.1 != "preset") {
            cfg.set(key, value).ok_or_else(|| bad(line, key, value))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Option<()> {
        fn num<T: FromStr>(v: &str) -> Option<T> {
            v.parse().ok()
        }
        let t = &mut self.train;
        let w = &mut t.loss_weights;
        let e = &mut self.eval;
        match key {
            "epochs" => t.epochs = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "lr0" => t.lr0 = num(value)?,
            "momentum" => t.momentum = num(value)?,
            "weight_decay" => t.weight_decay = num(value)?,
            "lr_decay_epochs" => {
                t.lr_decay_epochs = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|s| s.trim().parse().ok()).collect::<Option<_>>()?
                }
            }
            "lr_decay_factor" => t.lr_decay_factor = num(value)?,
            "alpha" => w.alpha = num(value)?,
            "beta" => w.beta = num(value)?,
            "tau1" => w.tau1 = num(value)?,
            "tau2" => w.tau2 = num(value)?,
            "ss_loss" => w.ss = num(value)?,
            "seed" => t.seed = num(value)?,
            "n_way" => e.n_way = num(value)?,
            "k_shot" => e.k_shot = num(value)?,
            "q_query" => e.q_query = num(value)?,
            "episodes" => e.episodes = num(value)?,
            "eval_seed" => e.seed = num(value)?,
            _ => return None,
        }
        Some(())
    }
}

fn bad(line: usize, key: &str, value: &str) -> ConfigError {
    ConfigError::BadValue {
        line,
        key: key.into(),
        value: value.into(),
    }
}

pub fn preset(name: &str) -> Option<TrainConfig> {
    match name {
        "desk" => Some(TrainConfig::default()),
        "paper-protocol" => Some(TrainConfig::paper_protocol()),
        _ => None,
    }
}
