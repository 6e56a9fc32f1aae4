//! Gradient-descent training on phantom sequences.

use std::collections::HashMap;

use log::info;

use crate::config::{OptimizerKind, RunConfig};
use crate::data::{iterate_triples, normalize, Order, Triple, VolumeSequence};
use crate::error::{Error, Result};
use crate::losses::loss_total;
use crate::metrics::{argmax_labels, foreground_dice};
use crate::model::{model_forward, Architecture, ParamStore, Session};
use crate::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    t: u64,
    first: HashMap<String, Vec<f32>>,
    second: HashMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        Optimizer {
            kind,
            lr,
            momentum,
            t: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    /// Apply one update. SGD keeps `v <- mu v + g; p <- p - lr v`; Adam uses
    /// bias-corrected moment estimates.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &HashMap<String, Tensor<f32>>) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        for (name, p) in store.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient of {name} has shape {:?}", g.shape())));
            }
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.numel()]);
            match self.kind {
                OptimizerKind::Sgd => {
                    let (mu, lr) = (self.momentum as f32, self.lr as f32);
                    for ((w, &gi), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *v = mu * *v + gi;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let s = self
                        .second
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; g.numel()]);
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((w, &gi), mi), si) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let gi = gi as f64;
                        let m1 = ADAM_BETA1 * *mi as f64 + (1.0 - ADAM_BETA1) * gi;
                        let m2 = ADAM_BETA2 * *si as f64 + (1.0 - ADAM_BETA2) * gi * gi;
                        *mi = m1 as f32;
                        *si = m2 as f32;
                        let upd = self.lr * (m1 / c1) / ((m2 / c2).sqrt() + ADAM_EPS);
                        *w -= upd as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Values of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub frame: usize,
    pub total: f64,
    pub ce_sum: f64,
    pub l_ica: f64,
    pub dice_train: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "step,total,ce_sum,l_ica,dice_train";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.total, self.ce_sum, self.l_ica, self.dice_train
        )
    }
}

pub struct Trainer {
    pub arch: Architecture,
    pub store: ParamStore<f32>,
    pub config: RunConfig,
    optimizer: Optimizer,
    step: usize,
}

/// Seed of the frame order used in epoch `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config.model)?;
        let store = ParamStore::init(&arch, config.seed);
        Self::with_store(config, store)
    }

    pub fn with_store(config: &RunConfig, store: ParamStore<f32>) -> Result<Self> {
        let arch = Architecture::new(&config.model)?;
        store.check(&arch)?;
        Ok(Trainer {
            arch,
            store,
            optimizer: Optimizer::new(config.optimizer, config.lr, config.momentum),
            config: config.clone(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update on `triple`; `frames` holds the normalized sequence.
    pub fn step(&mut self, seq: &VolumeSequence, frames: &[Tensor<f32>], triple: Triple) -> Result<StepReport> {
        self.step += 1;
        let (report, grads, stats) = {
            let mut sess = Session::train(&self.store);
            let f = [&frames[triple.prev], &frames[triple.center], &frames[triple.next]];
            let out = model_forward(&mut sess, &self.arch, f)?;
            let [d, h, w] = self.arch.config.extents;
            let target = sess.input(frames[triple.center].clone().reshape(vec![1, 1, d, h, w])?);
            let gt = triple.labels(seq);
            let loss = loss_total(&mut sess.graph, &self.arch, &out, gt, target, &self.config.weights)?;
            let g = &sess.graph;
            let total = g.value(loss.total).item()? as f64;
            let ce_sum = loss
                .ce
                .iter()
                .map(|&v| g.value(v).item().map(|x| x as f64))
                .sum::<Result<f64>>()?;
            let l_ica = g.value(loss.ica.total).item()? as f64;
            let pred = argmax_labels(g.value(*out.logits.last().expect("n >= 2")))?;
            let report = StepReport {
                step: self.step,
                frame: triple.center,
                total,
                ce_sum,
                l_ica,
                dice_train: foreground_dice(&pred, gt)?,
            };
            if !total.is_finite() {
                return Err(self.non_finite(&report, "loss"));
            }
            let mut grads = sess.graph.backward(loss.total)?;
            let mut named = HashMap::new();
            for (name, v) in sess.param_vars() {
                if let Some(t) = grads.take(v) {
                    named.insert(name.to_string(), t);
                }
            }
            (report, named, sess.take_stats())
        };
        let norm = grads
            .values()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(self.non_finite(&report, "gradient"));
        }
        let mut grads = grads;
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let s = (self.config.grad_clip / norm) as f32;
            for t in grads.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        self.optimizer.step(&mut self.store, &grads)?;
        Session::commit_stats(&stats, &mut self.store)?;
        Ok(report)
    }

    fn non_finite(&self, r: &StepReport, what: &str) -> Error {
        Error::Numerics(format!(
            "non-finite {what} at step {} (frame {}, run seed {}): total={} ce_sum={} l_ica={}",
            r.step,
            r.frame,
            self.config.seed,
            r.total,
            r.ce_sum,
            r.l_ica
        ))
    }

    /// Run `config.steps` updates over seeded epoch permutations of `seq`,
    /// calling `log` on every logged step.
    pub fn train(&mut self, seq: &VolumeSequence, mut log: impl FnMut(&StepReport)) -> Result<Vec<StepReport>> {
        seq.validate()?;
        if seq.extents() != self.arch.config.extents {
            return Err(Error::data(format!(
                "sequence extents {:?} do not match the model's {:?}",
                seq.extents(),
                self.arch.config.extents
            )));
        }
        let frames: Vec<Tensor<f32>> = seq.frames.iter().map(normalize).collect();
        let len = seq.len();
        let mut reports = Vec::with_capacity(self.config.steps);
        let mut order = Vec::new();
        for s in 0..self.config.steps {
            let (epoch, i) = (s / len, s % len);
            if i == 0 {
                order = iterate_triples(len, Order::Shuffled(epoch_seed(self.config.seed, epoch)));
            }
            let r = self.step(seq, &frames, order[i]).map_err(|e| match e {
                Error::Numerics(m) => Error::Numerics(format!("{m}; epoch {epoch}, order seed {}", epoch_seed(self.config.seed, epoch))),
                other => other,
            })?;
            if r.step % self.config.log_interval == 0 || r.step == 1 || s + 1 == self.config.steps {
                info!("{}", r.csv_row());
                log(&r);
            }
            reports.push(r);
        }
        Ok(reports)
    }
}
