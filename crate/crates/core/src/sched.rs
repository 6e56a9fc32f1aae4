//! Coefficient-group parallel inference and the latency benchmark.
//!
//! In grouped mode every backbone convolution has `groups = g`, so the
//! backbone splits into `g` independent sub-networks, one per slice of
//! `m / g` coefficient maps. [`Engine`] runs them on a worker pool and
//! concatenates their outputs ahead of each decoder.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::PlanMode;
use crate::error::{Error, Result};
use crate::model::{
    as_volume, backbone_forward, decode, encode, encode_coefficients, model_forward, Architecture, ModelConfig, ParamStore,
    Session,
};
use crate::tensor::{Real, Tensor};

pub const TARGET_FPS: f64 = 22.0;
pub const TARGET_LATENCY_MS: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParallelPlan {
    pub mode: PlanMode,
    pub groups: usize,
    pub workers: usize,
}

impl ParallelPlan {
    pub fn dense() -> Self {
        ParallelPlan {
            mode: PlanMode::Dense,
            groups: 1,
            workers: 1,
        }
    }

    pub fn grouped(groups: usize, workers: usize) -> Self {
        ParallelPlan {
            mode: PlanMode::Grouped,
            groups,
            workers,
        }
    }

    /// Check the plan against the model it will run.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be positive"));
        }
        if self.groups == 0 || config.m % self.groups != 0 {
            return Err(Error::config(format!(
                "groups = {} must divide m = {}",
                self.groups, config.m
            )));
        }
        match self.mode {
            PlanMode::Dense if self.groups != 1 || config.groups != 1 => Err(Error::config(format!(
                "dense plan needs a dense model and one group (plan {}, model {})",
                self.groups, config.groups
            ))),
            PlanMode::Grouped if config.groups != self.groups => Err(Error::config(format!(
                "plan has {} groups, model was built with {}",
                self.groups, config.groups
            ))),
            _ => Ok(()),
        }
    }
}

/// Split a `(1, m, ...)` tensor into `g` channel groups of `m / g`.
pub fn split_mixing_tensor<T: Real>(a: &Tensor<T>, g: usize) -> Result<Vec<Tensor<T>>> {
    let m = a.dims5()?[1];
    if g == 0 || m % g != 0 {
        return Err(Error::shape(format!("{g} groups do not divide {m} channels")));
    }
    let len = m / g;
    (0..g).map(|i| a.channel_slice(i * len, len)).collect()
}

/// Values a forward pass hands to evaluation and the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Logits of levels `1..=n`.
    pub logits: Vec<Tensor<f32>>,
    pub a_n: Tensor<f32>,
    pub x: Tensor<f32>,
}

/// A model prepared for inference under a plan.
pub struct Engine {
    pub arch: Architecture,
    pub store: ParamStore<f32>,
    pub plan: ParallelPlan,
    group_arch: Architecture,
    group_stores: Vec<ParamStore<f32>>,
    pool: rayon::ThreadPool,
}

impl Engine {
    pub fn new(arch: Architecture, store: ParamStore<f32>, plan: ParallelPlan) -> Result<Self> {
        plan.validate(&arch.config)?;
        store.check(&arch)?;
        let group_arch = Architecture::new(&arch.config.group_config())?;
        let group_stores = if plan.mode == PlanMode::Grouped {
            (0..plan.groups)
                .map(|i| store.group_slice(&arch, i))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(plan.workers)
            .thread_name(|i| format!("icaunet-group-{i}"))
            .build()
            .map_err(|e| Error::config(format!("cannot start {} workers: {e}", plan.workers)))?;
        Ok(Engine {
            arch,
            store,
            plan,
            group_arch,
            group_stores,
            pool,
        })
    }

    /// Eval-mode forward pass over frames `(t-1, t, t+1)`.
    pub fn infer(&self, frames: [&Tensor<f32>; 3]) -> Result<Prediction> {
        match self.plan.mode {
            PlanMode::Dense => {
                let mut sess = Session::eval(&self.store);
                let out = model_forward(&mut sess, &self.arch, frames)?;
                let g = &sess.graph;
                Ok(Prediction {
                    logits: out.logits.iter().map(|&v| g.value(v).clone()).collect(),
                    a_n: g.value(out.a_n).clone(),
                    x: g.value(out.x).clone(),
                })
            }
            PlanMode::Grouped => self.infer_grouped(frames),
        }
    }

    fn infer_grouped(&self, frames: [&Tensor<f32>; 3]) -> Result<Prediction> {
        let arch = &self.arch;
        let vols = frames
            .iter()
            .map(|f| as_volume(arch, f))
            .collect::<Result<Vec<_>>>()?;

        // encoder on the coordinating thread
        let mut sess = Session::eval(&self.store);
        let inputs: Vec<_> = vols.into_iter().map(|v| sess.input(v)).collect();
        let a_prev = encode_coefficients(&mut sess, arch, inputs[0])?;
        let (a_n, x) = encode(&mut sess, arch, inputs[1])?;
        let a_next = encode_coefficients(&mut sess, arch, inputs[2])?;
        let g = self.plan.groups;
        let prev = split_mixing_tensor(sess.graph.value(a_prev), g)?;
        let center = split_mixing_tensor(sess.graph.value(a_n), g)?;
        let next = split_mixing_tensor(sess.graph.value(a_next), g)?;

        let per_group: Vec<Vec<Tensor<f32>>> = self.pool.install(|| {
            (0..g)
                .into_par_iter()
                .map(|i| {
                    let mut gs = Session::eval(&self.group_stores[i]);
                    let p = gs.input(prev[i].clone());
                    let c = gs.input(center[i].clone());
                    let n = gs.input(next[i].clone());
                    let out = backbone_forward(&mut gs, &self.group_arch, p, c, n)?;
                    Ok(out.reduced.iter().map(|&v| gs.graph.value(v).clone()).collect())
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut logits = Vec::with_capacity(arch.config.n);
        for k in 1..=arch.config.n {
            let parts: Vec<&Tensor<f32>> = per_group.iter().map(|r| &r[k - 1]).collect();
            let coeffs = sess.input(Tensor::concat_channels(&parts)?);
            let y = decode(&mut sess, arch, coeffs, x, k)?;
            logits.push(sess.graph.value(y).clone());
        }
        Ok(Prediction {
            logits,
            a_n: sess.graph.value(a_n).clone(),
            x: sess.graph.value(x).clone(),
        })
    }
}

/// Latency samples of one benchmark run and their summary.
#[derive(Clone, Debug)]
pub struct BenchReport {
    /// Compute latency of each timed frame in milliseconds.
    pub samples_ms: Vec<f64>,
    /// Wall time of the timed window in seconds.
    pub window_s: f64,
    pub plan: ParallelPlan,
    pub config: ModelConfig,
    pub hardware: String,
    /// Each output waits for frame `t + 1`; that wait is not in the samples.
    pub lookahead: bool,
}

/// Nearest-rank percentile of ascending `sorted`, `q` in (0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl BenchReport {
    pub fn throughput_fps(&self) -> f64 {
        self.samples_ms.len() as f64 / self.window_s
    }

    /// `(p50, p90, p99)` in milliseconds.
    pub fn percentiles(&self) -> (f64, f64, f64) {
        let mut s = self.samples_ms.clone();
        s.sort_by(f64::total_cmp);
        (percentile(&s, 50.0), percentile(&s, 90.0), percentile(&s, 99.0))
    }

    pub fn meets_fps_target(&self) -> bool {
        self.throughput_fps() >= TARGET_FPS
    }

    pub fn meets_latency_target(&self) -> bool {
        self.percentiles().2 <= TARGET_LATENCY_MS
    }

    /// `# throughput_fps=..., p50=..., ...` summary line.
    pub fn summary(&self) -> String {
        let (p50, p90, p99) = self.percentiles();
        format!(
            "# throughput_fps={:.3}, p50={p50:.3}, p90={p90:.3}, p99={p99:.3}, mode={}, groups={}, workers={}, lookahead={}",
            self.throughput_fps(),
            self.plan.mode,
            self.plan.groups,
            self.plan.workers,
            self.lookahead as u8
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,latency_ms\n");
        for (i, v) in self.samples_ms.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:.6}");
        }
        let _ = writeln!(s, "{}", self.summary());
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "# target_fps={TARGET_FPS} {} (measured {:.3})",
            verdict(self.meets_fps_target()),
            self.throughput_fps()
        );
        let _ = writeln!(
            s,
            "# target_latency_ms={TARGET_LATENCY_MS} {} (p99 {:.3})",
            verdict(self.meets_latency_target()),
            self.percentiles().2
        );
        let c = &self.config;
        let _ = writeln!(
            s,
            "# model n={} m={} u={} extents={}x{}x{}, window_s={:.6}, hardware={}",
            c.n, c.m, c.u, c.extents[0], c.extents[1], c.extents[2], self.window_s, self.hardware
        );
        s
    }
}

/// Short description of the host.
pub fn hardware_note() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpus} logical cpus {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Run `warmup` untimed then `iters` timed forward passes, cycling over
/// `stream`.
pub fn benchmark(engine: &Engine, stream: &[[&Tensor<f32>; 3]], warmup: usize, iters: usize) -> Result<BenchReport> {
    if stream.is_empty() {
        return Err(Error::config("benchmark needs at least one frame triple"));
    }
    if iters == 0 {
        return Err(Error::config("benchmark needs at least one timed iteration"));
    }
    for i in 0..warmup {
        engine.infer(stream[i % stream.len()])?;
    }
    let mut samples_ms = Vec::with_capacity(iters);
    let start = Instant::now();
    let mut last = start;
    for i in 0..iters {
        engine.infer(stream[(warmup + i) % stream.len()])?;
        let now = Instant::now();
        samples_ms.push((now - last).as_secs_f64() * 1e3);
        last = now;
    }
    Ok(BenchReport {
        samples_ms,
        window_s: (last - start).as_secs_f64(),
        plan: engine.plan,
        config: engine.arch.config.clone(),
        hardware: hardware_note(),
        lookahead: true,
    })
}
