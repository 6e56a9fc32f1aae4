//! Finite-difference verification of every differentiable operation.
//!
//! [`check_gradients`] compares reverse-mode gradients against central
//! differences at 64-bit. [`run_suite`] applies it to each op in the layer
//! vocabulary and to an end-to-end tiny model.

mod suite;

pub use suite::{
    check_names, e2e_config, run_suite, CheckResult, SuiteOptions, SuiteResult, SuiteScale, E2E_NAME, E2E_TOLERANCE,
    OP_TOLERANCE,
};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{finite_diff_grad, relative_error, Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Uniform values in [-1, 1] with `|x| >= 1e-3`, away from the kinks of
/// abs, L1 and leaky-relu.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = rng.random_range(-1.0..1.0);
        if v.abs() >= 1e-3 {
            break v;
        }
    })
}

/// Largest relative error between analytic and central-difference
/// gradients over all `inputs`.
///
/// `build` records the function on a fresh graph given one variable per
/// input and returns a scalar.
pub fn check_gradients<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with(build, inputs, eps, |_, _| {})
}

/// Like [`check_gradients`]; `tamper` may modify the analytic gradient of
/// input `i` before comparison (negative controls).
pub fn check_gradients_with<F>(
    build: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tamper: impl Fn(usize, &mut Tensor<f64>),
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut analytic = grads
            .take(vars[i])
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        tamper(i, &mut analytic);
        let numeric = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = build(&mut g, &vars)?;
                g.value(out).item()
            },
            input,
            eps,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric)?);
    }
    Ok(worst)
}

/// Weighted sum `sum(r * x)` with fixed pseudo-random weights, turning a
/// tensor-valued op into a scalar with a non-uniform upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let r = random_input(g.shape(x), seed);
    let r = g.constant(r);
    let p = g.mul(x, r)?;
    g.sum(p)
}
