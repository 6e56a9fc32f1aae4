use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{Architecture, Layer, LEAKY_SLOPE};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::norm::BN_EPS;
use crate::ops::BnStats;
use crate::tensor::{Real, Tensor};

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }
}

pub(crate) fn weight_name(layer: &str) -> String {
    format!("{layer}.w")
}

pub(crate) fn bias_name(layer: &str) -> String {
    format!("{layer}.b")
}

const RUNNING_MEAN: &str = ".bn.running_mean";
const RUNNING_VAR: &str = ".bn.running_var";

impl<T: Real> ParamStore<T> {
    /// Fan-in scaled uniform weights, zero biases, unit BN scale.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for layer in arch.layers() {
            let bound = (3.0 / layer.fan_in() as f64).sqrt();
            let w = Tensor::from_fn(layer.weight_shape().to_vec(), |_| {
                T::from_f64_lossy(rng.random_range(-bound..bound))
            });
            store.params.insert(weight_name(&layer.name), w);
            let c = layer.spec.out_channels;
            if layer.kind.normalized() {
                store.params.insert(format!("{}.bn.gamma", layer.name), Tensor::ones(vec![c]));
                store.params.insert(format!("{}.bn.beta", layer.name), Tensor::zeros(vec![c]));
                store.buffers.insert(format!("{}{RUNNING_MEAN}", layer.name), Tensor::zeros(vec![c]));
                store.buffers.insert(format!("{}{RUNNING_VAR}", layer.name), Tensor::ones(vec![c]));
            } else {
                store.params.insert(bias_name(&layer.name), Tensor::zeros(vec![c]));
            }
        }
        store
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameters then buffers, in a stable order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params().chain(self.buffers())
    }

    /// Insert by name; names ending in a running-statistic suffix are buffers.
    pub fn insert(&mut self, name: String, value: Tensor<T>) {
        if name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR) {
            self.buffers.insert(name, value);
        } else {
            self.params.insert(name, value);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn bn_stats(&self, layer: &str) -> Result<BnStats<T>> {
        let get = |suffix: &str| {
            let name = format!("{layer}{suffix}");
            self.buffers
                .get(&name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::config(format!("missing buffer {name}")))
        };
        Ok(BnStats {
            mean: get(RUNNING_MEAN)?,
            var: get(RUNNING_VAR)?,
        })
    }

    pub fn set_bn_stats(&mut self, layer: &str, stats: &BnStats<T>) -> Result<()> {
        for (suffix, values) in [(RUNNING_MEAN, &stats.mean), (RUNNING_VAR, &stats.var)] {
            let name = format!("{layer}{suffix}");
            let slot = self
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::config(format!("missing buffer {name}")))?;
            if slot.numel() != values.len() {
                return Err(Error::shape(format!("{name} holds {} channels", slot.numel())));
            }
            slot.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|(_, t)| t.is_finite())
    }

    /// Check that every layer of `arch` has correctly shaped tensors.
    pub fn check(&self, arch: &Architecture) -> Result<()> {
        for layer in arch.layers() {
            let w = self.param(&weight_name(&layer.name))?;
            if w.shape() != layer.weight_shape() {
                return Err(Error::shape(format!(
                    "{} weight is {:?}, architecture needs {:?}",
                    layer.name,
                    w.shape(),
                    layer.weight_shape()
                )));
            }
            let c = [layer.spec.out_channels];
            if layer.kind.normalized() {
                for p in ["gamma", "beta"] {
                    if self.param(&format!("{}.bn.{p}", layer.name))?.shape() != c {
                        return Err(Error::shape(format!("{}.bn.{p} has the wrong width", layer.name)));
                    }
                }
                let stats = self.bn_stats(&layer.name)?;
                if stats.mean.len() != c[0] || stats.var.len() != c[0] {
                    return Err(Error::shape(format!("{} running stats have the wrong width", layer.name)));
                }
            } else if self.param(&bias_name(&layer.name))?.shape() != c {
                return Err(Error::shape(format!("{} bias has the wrong width", layer.name)));
            }
        }
        Ok(())
    }

    /// Parameters of one coefficient group of a grouped backbone: every
    /// backbone tensor is sliced along its leading axis.
    pub fn group_slice(&self, arch: &Architecture, group: usize) -> Result<ParamStore<T>> {
        let g = arch.config.groups;
        if group >= g {
            return Err(Error::config(format!("group {group} out of range for {g} groups")));
        }
        let mut out = ParamStore::default();
        for layer in arch.backbone_layers() {
            let prefix = format!("{}.", layer.name);
            for (name, t) in self.tensors().filter(|(n, _)| n.starts_with(&prefix)) {
                let len = t.shape()[0] / g;
                out.insert(name.to_string(), t.leading_slice(group * len, len)?);
            }
        }
        Ok(out)
    }
}

/// One forward (and optionally backward) pass: a graph, the parameters
/// registered on it, and batch-norm statistics produced along the way.
pub struct Session<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    vars: IndexMap<String, Var>,
    training: bool,
    trainable: bool,
    stats: HashMap<String, BnStats<T>>,
}

impl<'s, T: Real> Session<'s, T> {
    /// Training pass: parameters require gradients and batch statistics
    /// normalize every BN layer.
    pub fn train(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, true, true)
    }

    /// Inference pass: parameters are constants and BN uses running statistics.
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, false, false)
    }

    pub fn with_mode(store: &'s ParamStore<T>, training: bool, trainable: bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            vars: IndexMap::new(),
            training,
            trainable,
            stats: HashMap::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Variable of a named parameter, registered on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.param(name)?.clone();
        let v = if self.trainable {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Use `var` for parameter `name` in place of the stored value.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Parameters used so far, in registration order.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.constant(value)
    }

    pub fn apply(&mut self, layer: &Layer, x: Var) -> Result<Var> {
        let w = self.param(&weight_name(&layer.name))?;
        let bias = if layer.kind.normalized() {
            None
        } else {
            Some(self.param(&bias_name(&layer.name))?)
        };
        let y = if layer.kind.transposed() {
            self.graph.transposed_conv3d(x, w, bias, &layer.spec)?
        } else {
            self.graph.conv3d(x, w, bias, &layer.spec)?
        };
        if !layer.kind.normalized() {
            return Ok(y);
        }
        let gamma = self.param(&format!("{}.bn.gamma", layer.name))?;
        let beta = self.param(&format!("{}.bn.beta", layer.name))?;
        if !self.stats.contains_key(&layer.name) {
            let s = self.store.bn_stats(&layer.name)?;
            self.stats.insert(layer.name.clone(), s);
        }
        let stats = self.stats.get_mut(&layer.name).expect("inserted above");
        let y = self
            .graph
            .batch_norm(y, gamma, beta, stats, self.training, T::from_f64_lossy(BN_EPS))?;
        Ok(self.graph.leaky_relu(y, T::from_f64_lossy(LEAKY_SLOPE)))
    }

    /// Running statistics after this pass, keyed by layer name.
    pub fn take_stats(&mut self) -> HashMap<String, BnStats<T>> {
        std::mem::take(&mut self.stats)
    }

    /// Fold the statistics of a finished pass into `store`.
    pub fn commit_stats(stats: &HashMap<String, BnStats<T>>, store: &mut ParamStore<T>) -> Result<()> {
        let mut names: Vec<&String> = stats.keys().collect();
        names.sort();
        for name in names {
            store.set_bn_stats(name, &stats[name])?;
        }
        Ok(())
    }
}
