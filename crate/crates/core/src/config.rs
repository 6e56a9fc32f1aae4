//! Run configuration files: UTF-8 lines `key = value`, `#` starts a comment.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Architecture, ModelConfig};
use crate::ops::CorrSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanMode {
    Dense,
    Grouped,
}

impl FromStr for PlanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(PlanMode::Dense),
            "grouped" => Ok(PlanMode::Grouped),
            other => Err(Error::config(format!("mode must be dense or grouped, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for PlanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanMode::Dense => "dense",
            PlanMode::Grouped => "grouped",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub steps: usize,
    pub seed: u64,
    pub log_interval: usize,
    pub data: Option<PathBuf>,
    pub mode: PlanMode,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            weights: LossWeights::defaults(model.n),
            model,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            grad_clip: 0.0,
            steps: 200,
            seed: 0,
            log_interval: 10,
            data: None,
            mode: PlanMode::Dense,
            workers: 1,
        }
    }
}

/// Keys that must appear in every config file.
pub const REQUIRED_KEYS: [&str; 8] = ["n", "m", "d", "h", "w", "lr", "steps", "seed"];

const KNOWN_KEYS: [&str; 26] = [
    "n",
    "m",
    "u",
    "stem_channels",
    "max_disp",
    "num_classes",
    "d",
    "h",
    "w",
    "groups",
    "lambda_s",
    "lambda_i",
    "lambda_r",
    "alpha_neg",
    "alpha_k",
    "beta",
    "optimizer",
    "lr",
    "momentum",
    "grad_clip",
    "steps",
    "seed",
    "log_interval",
    "data",
    "mode",
    "workers",
];

fn parse_num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value {v:?} for key {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(Error::config(format!("unknown key {k} on line {}", i + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("duplicate key {k} on line {}", i + 1)));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        for key in REQUIRED_KEYS {
            if !seen.contains(key) {
                return Err(Error::config(format!("missing required key {key}")));
            }
        }

        let mut c = RunConfig::default();
        let mut alpha_k = None;
        for (k, v) in &pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "n" => c.model.n = parse_num(k, v)?,
                "m" => c.model.m = parse_num(k, v)?,
                "u" => c.model.u = parse_num(k, v)?,
                "stem_channels" => c.model.stem_channels = parse_num(k, v)?,
                "max_disp" => c.model.corr = CorrSpec::new(parse_num(k, v)?),
                "num_classes" => c.model.num_classes = parse_num(k, v)?,
                "d" => c.model.extents[0] = parse_num(k, v)?,
                "h" => c.model.extents[1] = parse_num(k, v)?,
                "w" => c.model.extents[2] = parse_num(k, v)?,
                "groups" => c.model.groups = parse_num(k, v)?,
                "lambda_s" => c.weights.lambda_s = parse_num(k, v)?,
                "lambda_i" => c.weights.lambda_i = parse_num(k, v)?,
                "lambda_r" => c.weights.lambda_r = parse_num(k, v)?,
                "alpha_neg" => c.weights.alpha_neg = parse_num(k, v)?,
                "alpha_k" => {
                    alpha_k = Some(
                        v.split(',')
                            .map(|s| parse_num::<f64>(k, s.trim()))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "beta" => c.weights.beta = parse_num(k, v)?,
                "optimizer" => {
                    c.optimizer = match v {
                        "sgd" => OptimizerKind::Sgd,
                        "adam" => OptimizerKind::Adam,
                        _ => return Err(Error::config(format!("optimizer must be sgd or adam, got {v:?}"))),
                    }
                }
                "lr" => c.lr = parse_num(k, v)?,
                "momentum" => c.momentum = parse_num(k, v)?,
                "grad_clip" => c.grad_clip = parse_num(k, v)?,
                "steps" => c.steps = parse_num(k, v)?,
                "seed" => c.seed = parse_num(k, v)?,
                "log_interval" => c.log_interval = parse_num(k, v)?,
                "data" => c.data = Some(PathBuf::from(v)),
                "mode" => c.mode = v.parse()?,
                "workers" => c.workers = parse_num(k, v)?,
                _ => unreachable!("key checked above"),
            }
        }
        c.weights.alpha_k = alpha_k.unwrap_or_else(|| LossWeights::defaults(c.model.n).alpha_k);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        Architecture::new(&self.model).map_err(|e| match e {
            Error::Shape(m) => Error::Config(m),
            other => other,
        })?;
        self.weights.validate(self.model.n)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip must be non-negative"));
        }
        if self.log_interval == 0 || self.workers == 0 {
            return Err(Error::config("log_interval and workers must be positive"));
        }
        if self.mode == PlanMode::Dense && self.model.groups != 1 {
            return Err(Error::config("dense mode requires groups = 1"));
        }
        Ok(())
    }

    /// Every key with its value, in a form [`RunConfig::parse`] accepts.
    pub fn to_text(&self) -> String {
        let c = &self.model;
        let w = &self.weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n", c.n.to_string());
        kv("m", c.m.to_string());
        kv("u", c.u.to_string());
        kv("stem_channels", c.stem_channels.to_string());
        kv("max_disp", c.corr.max_disp.to_string());
        kv("num_classes", c.num_classes.to_string());
        kv("d", c.extents[0].to_string());
        kv("h", c.extents[1].to_string());
        kv("w", c.extents[2].to_string());
        kv("groups", c.groups.to_string());
        kv("lambda_s", w.lambda_s.to_string());
        kv("lambda_i", w.lambda_i.to_string());
        kv("lambda_r", w.lambda_r.to_string());
        kv("alpha_neg", w.alpha_neg.to_string());
        kv(
            "alpha_k",
            w.alpha_k.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("beta", w.beta.to_string());
        kv(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
            .into(),
        );
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        kv("steps", self.steps.to_string());
        kv("seed", self.seed.to_string());
        kv("log_interval", self.log_interval.to_string());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        kv("mode", self.mode.to_string());
        kv("workers", self.workers.to_string());
        s
    }
}
