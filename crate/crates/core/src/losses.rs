//! Training objective: the ICA regularizer on `(A_n, X)` and the weighted
//! multi-resolution cross-entropy.

use crate::autodiff::{Graph, ReduceKind, Var};
use crate::error::{Error, Result};
use crate::model::{mix, Architecture, ModelOutputs};
use crate::ops::Labels;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_i: f64,
    pub lambda_r: f64,
    pub alpha_neg: f64,
    /// Cross-entropy weight of each level `1..=n`.
    pub alpha_k: Vec<f64>,
    pub beta: f64,
}

impl LossWeights {
    /// Defaults for an `n`-level model: unit ICA weights, `alpha = 0.75`,
    /// level weights 0.1 except 1.0 at full resolution, `beta = 0.2`.
    pub fn defaults(n: usize) -> Self {
        let mut alpha_k = vec![0.1; n];
        if let Some(last) = alpha_k.last_mut() {
            *last = 1.0;
        }
        LossWeights {
            lambda_s: 1.0,
            lambda_i: 1.0,
            lambda_r: 1.0,
            alpha_neg: 0.75,
            alpha_k,
            beta: 0.2,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.alpha_k.len() != n {
            return Err(Error::config(format!(
                "alpha_k has {} entries, model has {n} levels",
                self.alpha_k.len()
            )));
        }
        let all = [self.lambda_s, self.lambda_i, self.lambda_r, self.alpha_neg, self.beta];
        if all.iter().chain(&self.alpha_k).any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.alpha_neg == 0.0 {
            return Err(Error::config("alpha_neg must be positive"));
        }
        Ok(())
    }
}

/// Unweighted terms of the ICA loss and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct IcaLoss {
    /// `||X||_1`.
    pub sparsity: Var,
    /// `avg(-alpha log cosh(X / alpha))`.
    pub negentropy: Var,
    /// `||mean_u(A_n (x) X) - F||_2^2`.
    pub reconstruction: Var,
    pub total: Var,
}

/// `avg(-alpha * log cosh(x / alpha))` on the graph.
pub fn negentropy<T: Real>(g: &mut Graph<T>, x: Var, alpha: f64) -> Result<Var> {
    let scaled = g.scale(x, T::from_f64_lossy(1.0 / alpha));
    let lc = g.log_cosh(scaled);
    let avg = g.mean(lc)?;
    Ok(g.scale(avg, T::from_f64_lossy(-alpha)))
}

fn weighted<T: Real>(g: &mut Graph<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let t = g.scale(v, T::from_f64_lossy(w));
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::config("empty weighted sum"))
}

/// ICA loss of one frame. `frame` is the `(1,1,d,h,w)` input the
/// reconstruction is compared with.
pub fn loss_ica<T: Real>(
    g: &mut Graph<T>,
    arch: &Architecture,
    a_n: Var,
    x: Var,
    frame: Var,
    w: &LossWeights,
) -> Result<IcaLoss> {
    let c = &arch.config;
    let sparsity = g.reduce(ReduceKind::L1, x)?;
    let negentropy = negentropy(g, x, w.alpha_neg)?;
    let mixed = mix(g, a_n, x, &arch.mixing, c.m, c.u)?;
    let rec = g.channel_mean(mixed)?;
    if g.shape(rec) != g.shape(frame) {
        return Err(Error::shape(format!(
            "reconstruction {:?} does not match frame {:?}",
            g.shape(rec),
            g.shape(frame)
        )));
    }
    let diff = g.sub(rec, frame)?;
    let reconstruction = g.reduce(ReduceKind::L2Squared, diff)?;
    let total = weighted(
        g,
        &[(w.lambda_s, sparsity), (w.lambda_i, negentropy), (w.lambda_r, reconstruction)],
    )?;
    Ok(IcaLoss {
        sparsity,
        negentropy,
        reconstruction,
        total,
    })
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    /// Cross-entropy of each level `1..=n` against rescaled labels.
    pub ce: Vec<Var>,
    pub ica: IcaLoss,
    pub total: Var,
}

/// `sum_k alpha_k CE(y'_k, rescale(gt, k)) + beta L_ICA`.
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    arch: &Architecture,
    outputs: &ModelOutputs,
    gt: &Labels,
    frame: Var,
    w: &LossWeights,
) -> Result<TotalLoss> {
    let n = arch.config.n;
    w.validate(n)?;
    if gt.extents() != arch.config.extents {
        return Err(Error::shape(format!(
            "labels {:?} do not match model extents {:?}",
            gt.extents(),
            arch.config.extents
        )));
    }
    let mut ce = Vec::with_capacity(n);
    for k in 1..=n {
        let target = gt.rescale(arch.config.output_extents(k))?;
        ce.push(g.cross_entropy(outputs.logits[k - 1], &target)?);
    }
    let ica = loss_ica(g, arch, outputs.a_n, outputs.x, frame, w)?;
    let mut terms: Vec<(f64, Var)> = w.alpha_k.iter().copied().zip(ce.iter().copied()).collect();
    terms.push((w.beta, ica.total));
    let total = weighted(g, &terms)?;
    Ok(TotalLoss { ce, ica, total })
}
