use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{check_gradients_with, random_input, weighted_sum, DEFAULT_EPS};
use crate::autodiff::{Graph, ReduceKind, Var};
use crate::data::{generate_phantom, normalize};
use crate::error::{Error, Result};
use crate::losses::{loss_total, LossWeights};
use crate::model::{mix, model_forward, Architecture, MixingGeometry, ModelConfig, ParamStore, Session};
use crate::ops::{BnStats, ConvSpec, CorrSpec, Labels};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const E2E_TOLERANCE: f64 = 1e-3;
pub const E2E_NAME: &str = "e2e_tiny_model";

/// Step of the end-to-end probe. The loss is a sum over thousands of voxels
/// and passes through leaky-relu kinks, so a smaller step than the per-op one
/// keeps kink crossings rare.
const E2E_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteScale {
    Tiny,
    Small,
}

impl FromStr for SuiteScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(SuiteScale::Tiny),
            "small" => Ok(SuiteScale::Small),
            other => Err(Error::config(format!("unknown gradcheck scale '{other}' (tiny|small)"))),
        }
    }
}

impl fmt::Display for SuiteScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuiteScale::Tiny => "tiny",
            SuiteScale::Small => "small",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub scale: SuiteScale,
    /// Name of a check whose analytic gradient is deliberately perturbed.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            scale: SuiteScale::Tiny,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteResult {
    pub checks: Vec<CheckResult>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

fn case(name: &'static str, shapes: Vec<Vec<usize>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        shapes,
        build: Box::new(build),
    }
}

fn v5(s: [usize; 5]) -> Vec<usize> {
    s.to_vec()
}

fn op_cases(scale: SuiteScale) -> Vec<OpCase> {
    // spatial growth for the larger scale
    let k = match scale {
        SuiteScale::Tiny => 1,
        SuiteScale::Small => 2,
    };
    let flat = vec![2, 3, 2 * k, 3];
    let vol = [1, 3, 2, 3 * k, 4];
    let mut cases = vec![
        case("add", vec![flat.clone(), flat.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        case("sub", vec![flat.clone(), flat.clone()], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
        case("mul", vec![flat.clone(), flat.clone()], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 3)
        }),
        case("div", vec![flat.clone(), flat.clone()], |g, v| {
            // keep the denominator in [1, 3]
            let den = g.add_scalar(v[1], 2.0);
            let y = g.div(v[0], den)?;
            weighted_sum(g, y, 4)
        }),
        case("add_scalar", vec![flat.clone()], |g, v| {
            let y = g.add_scalar(v[0], -0.75);
            let y = g.mul(y, y)?;
            weighted_sum(g, y, 5)
        }),
        case("scale", vec![flat.clone()], |g, v| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y, 6)
        }),
        case("abs", vec![flat.clone()], |g, v| {
            let y = g.abs(v[0]);
            weighted_sum(g, y, 7)
        }),
        case("log_cosh", vec![flat.clone()], |g, v| {
            let y = g.scale(v[0], 3.0);
            let y = g.log_cosh(y);
            weighted_sum(g, y, 8)
        }),
        case("leaky_relu", vec![flat.clone()], |g, v| {
            let y = g.leaky_relu(v[0], 0.01);
            weighted_sum(g, y, 9)
        }),
    ];
    for (name, kind) in [
        ("reduce_sum", ReduceKind::Sum),
        ("reduce_mean", ReduceKind::Mean),
        ("reduce_l1", ReduceKind::L1),
        ("reduce_l2_squared", ReduceKind::L2Squared),
    ] {
        cases.push(case(name, vec![flat.clone()], move |g, v| g.reduce(kind, v[0])));
    }

    let conv = ConvSpec::new(2, 3, [2, 3, 3], [1, 2, 2], [0, 1, 1]);
    cases.push(case(
        "conv3d",
        vec![vec![1, 2, 3, 4 * k + 1, 7], v5(conv.weight_shape()), vec![3]],
        move |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), &conv)?;
            weighted_sum(g, y, 10)
        },
    ));
    let grouped = ConvSpec::new(4, 6, [1, 3, 3], [1, 1, 1], [0, 1, 1]).with_groups(2);
    cases.push(case(
        "conv3d_grouped",
        vec![vec![1, 4, 2, 3 * k, 4], v5(grouped.weight_shape())],
        move |g, v| {
            let y = g.conv3d(v[0], v[1], None, &grouped)?;
            weighted_sum(g, y, 11)
        },
    ));
    let tconv = ConvSpec::new(3, 2, [2, 2, 2], [2, 2, 2], [0, 0, 0]);
    cases.push(case(
        "transposed_conv3d",
        vec![vec![1, 3, 1, 2 * k, 3], v5(tconv.transposed_weight_shape()), vec![2]],
        move |g, v| {
            let y = g.transposed_conv3d(v[0], v[1], Some(v[2]), &tconv)?;
            weighted_sum(g, y, 12)
        },
    ));
    let tgrouped = ConvSpec::new(4, 4, [1, 4, 4], [1, 2, 2], [0, 1, 1]).with_groups(2);
    cases.push(case(
        "transposed_conv3d_grouped",
        vec![vec![1, 4, 1, 2 * k, 3], v5(tgrouped.transposed_weight_shape())],
        move |g, v| {
            let y = g.transposed_conv3d(v[0], v[1], None, &tgrouped)?;
            weighted_sum(g, y, 13)
        },
    ));
    for (name, training) in [("batch_norm_train", true), ("batch_norm_eval", false)] {
        cases.push(case(name, vec![v5(vol), vec![3], vec![3]], move |g, v| {
            let mut stats = BnStats::new(3);
            stats.mean = vec![0.1, -0.2, 0.05];
            stats.var = vec![0.5, 1.3, 0.8];
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, training, 1e-5)?;
            weighted_sum(g, y, 14)
        }));
    }
    cases.push(case(
        "correlation3d",
        vec![vec![1, 3, 2, 4 * k, 5], vec![1, 3, 2, 4 * k, 5]],
        |g, v| {
            let y = g.correlation3d(v[0], v[1], CorrSpec::new(2))?;
            weighted_sum(g, y, 15)
        },
    ));
    cases.push(case(
        "concat_channels",
        vec![v5(vol), vec![1, 2, 2, 3 * k, 4]],
        |g, v| {
            let y = g.concat_channels(&[v[0], v[1], v[0]])?;
            weighted_sum(g, y, 16)
        },
    ));
    cases.push(case("slice_channels", vec![v5(vol)], |g, v| {
        let y = g.slice_channels(v[0], 1, 2)?;
        weighted_sum(g, y, 17)
    }));
    cases.push(case("slice_leading", vec![vec![4, 2, 1, 2 * k, 2]], |g, v| {
        let y = g.slice_leading(v[0], 1, 2)?;
        weighted_sum(g, y, 18)
    }));
    cases.push(case("pad", vec![v5(vol)], |g, v| {
        let y = g.pad(v[0], [(1, 0), (0, 2), (1, 1)])?;
        weighted_sum(g, y, 19)
    }));
    cases.push(case("channel_mean", vec![v5(vol)], |g, v| {
        let y = g.channel_mean(v[0])?;
        weighted_sum(g, y, 20)
    }));
    cases.push(case("reshape", vec![v5(vol)], move |g, v| {
        let y = g.reshape(v[0], &[3, 2, 3 * k, 4])?;
        weighted_sum(g, y, 21)
    }));
    let extents = [2, 2 * k, 3];
    cases.push(case("cross_entropy", vec![vec![1, 4, 2, 2 * k, 3]], move |g, v| {
        let n: usize = extents.iter().product();
        let labels = Labels::new(extents, (0..n).map(|i| ((i * 7 + 1) % 4) as u8).collect())?;
        let y = g.scale(v[0], 2.0);
        g.cross_entropy(y, &labels)
    }));
    // the decoder's reshape + transposed conv + border pad composite
    cases.push(case(
        "mixing",
        vec![vec![1, 4, 1, 2, 2 * k], vec![1, 4, 2, 4, 4]],
        |g, v| {
            let geom = MixingGeometry {
                kernel: [2, 4, 2],
                stride: [2, 2, 4],
                padding: [0, 1, 0],
                border: [0, 0, 1],
            };
            let y = mix(g, v[0], v[1], &geom, 4, 2)?;
            weighted_sum(g, y, 22)
        },
    ));
    cases
}

/// Every op case name, in suite order, followed by the end-to-end check.
pub fn check_names() -> Vec<&'static str> {
    let mut names: Vec<_> = op_cases(SuiteScale::Tiny).iter().map(|c| c.name).collect();
    names.push(E2E_NAME);
    names
}

fn perturb(t: &mut Tensor<f64>) {
    let bump = 1e-2 * t.max_abs().max(1.0);
    t.data_mut()[0] += bump;
}

/// Run every per-op check and the end-to-end tiny-model check.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteResult> {
    if let Some(name) = &opts.corrupt {
        if !check_names().contains(&name.as_str()) {
            return Err(Error::config(format!("unknown check '{name}' to corrupt")));
        }
    }
    let corrupt = |name: &str| opts.corrupt.as_deref() == Some(name);
    let mut result = SuiteResult::default();
    for (i, c) in op_cases(opts.scale).into_iter().enumerate() {
        let inputs: Vec<Tensor<f64>> = c
            .shapes
            .iter()
            .enumerate()
            .map(|(j, s)| random_input(s, 1000 + 10 * i as u64 + j as u64))
            .collect();
        let bad = corrupt(c.name);
        let err = check_gradients_with(&c.build, &inputs, DEFAULT_EPS, |j, t| {
            if bad && j == 0 {
                perturb(t);
            }
        })?;
        log::debug!("gradcheck {}: {err:.3e}", c.name);
        result.checks.push(CheckResult {
            name: c.name.to_string(),
            max_rel_err: err,
            tolerance: OP_TOLERANCE,
        });
    }
    let err = e2e_check(opts.scale, corrupt(E2E_NAME))?;
    result.checks.push(CheckResult {
        name: E2E_NAME.to_string(),
        max_rel_err: err,
        tolerance: E2E_TOLERANCE,
    });
    Ok(result)
}

/// Configuration of the end-to-end model.
pub fn e2e_config() -> ModelConfig {
    ModelConfig {
        n: 2,
        m: 4,
        u: 2,
        extents: [2, 32, 32],
        ..ModelConfig::default()
    }
}

struct E2eProblem {
    arch: Architecture,
    frames: Vec<Tensor<f64>>,
    labels: Labels,
    weights: LossWeights,
}

impl E2eProblem {
    fn new() -> Result<Self> {
        let config = e2e_config();
        let arch = Architecture::new(&config)?;
        let seq = generate_phantom(11, 3, config.extents, [10.0, 1.5, 1.5])?;
        let frames = seq.frames.iter().map(|f| normalize(f).cast()).collect();
        Ok(E2eProblem {
            arch,
            frames,
            labels: seq.labels[1].clone(),
            weights: LossWeights::defaults(config.n),
        })
    }

    fn loss(&self, sess: &mut Session<'_, f64>) -> Result<Var> {
        let f = [&self.frames[0], &self.frames[1], &self.frames[2]];
        let out = model_forward(sess, &self.arch, f)?;
        let [d, h, w] = self.arch.config.extents;
        let target = sess.input(self.frames[1].clone().reshape(vec![1, 1, d, h, w])?);
        Ok(loss_total(&mut sess.graph, &self.arch, &out, &self.labels, target, &self.weights)?.total)
    }

    fn value(&self, store: &ParamStore<f64>) -> Result<f64> {
        let mut sess = Session::with_mode(store, true, false);
        let l = self.loss(&mut sess)?;
        sess.graph.value(l).item()
    }
}

/// Training-mode gradient of the total loss with respect to every parameter,
/// probed at a few sampled coordinates of each tensor.
fn e2e_check(scale: SuiteScale, corrupt: bool) -> Result<f64> {
    let problem = E2eProblem::new()?;
    let store = ParamStore::<f64>::init(&problem.arch, 5);
    let mut sess = Session::train(&store);
    let loss = problem.loss(&mut sess)?;
    let mut grads = sess.graph.backward(loss)?;
    let mut analytic = Vec::new();
    for (name, v) in sess.param_vars() {
        let t = match grads.take(v) {
            Some(t) => t,
            None => Tensor::zeros(store.param(name)?.shape().to_vec()),
        };
        analytic.push((name.to_string(), t));
    }
    drop(sess);

    let samples = match scale {
        SuiteScale::Tiny => 2,
        SuiteScale::Small => 6,
    };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(17);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        let mut diff: f64 = 0.0;
        let mut seen: f64 = 0.0;
        for _ in 0..samples {
            let idx = rng.random_range(0..grad.numel());
            let orig = store.param(name)?.data()[idx];
            probe.param_mut(name)?.data_mut()[idx] = orig + E2E_EPS;
            let plus = problem.value(&probe)?;
            probe.param_mut(name)?.data_mut()[idx] = orig - E2E_EPS;
            let minus = problem.value(&probe)?;
            probe.param_mut(name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * E2E_EPS);
            let mut a = grad.data()[idx];
            if corrupt {
                a *= 1.01;
            }
            diff = diff.max((a - numeric).abs());
            seen = seen.max(numeric.abs());
        }
        let err = diff / grad.max_abs().max(seen).max(1e-12);
        log::debug!("gradcheck {E2E_NAME} {name}: {err:.3e}");
        worst = worst.max(err);
    }
    Ok(worst)
}
