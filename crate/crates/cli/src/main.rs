mod montage;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icaunet::config::{PlanMode, RunConfig};
use icaunet::data::{
    frame_file_name, generate_phantom, load_dataset, load_volume, normalize, save_dataset, save_volume, Triple,
    Volume,
};
use icaunet::gradcheck::{run_suite, SuiteOptions, SuiteScale};
use icaunet::ica::{relative_error, FastIcaOptions, IcaModel, PatchMatrix};
use icaunet::metrics::{argmax_labels, frame_metrics, metrics_csv};
use icaunet::model::{load_checkpoint, save_checkpoint, Architecture, ModelConfig, ParamStore};
use icaunet::sched::{benchmark, ParallelPlan};
use icaunet::tensor::max_abs_diff;
use icaunet::train::{StepReport, Trainer};
use icaunet::{Error, Tensor};

const DEFAULT_SPACING: [f64; 3] = [10.0, 1.5, 1.5];

#[derive(Parser)]
#[command(name = "icaunet", version, about = "ICA-inspired U-Net for volumetric cine segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset directory and write a checkpoint.
    Train(TrainArgs),
    /// Segment every frame of a dataset directory.
    Infer(InferArgs),
    /// Measure inference latency and throughput on phantom frames.
    Bench(BenchArgs),
    /// Patch-based FastICA on one volume.
    IcaDemo(IcaDemoArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic cardiac cine sequence as a dataset directory.
    Phantom(PhantomArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// CSV of logged steps.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write montage.png.
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialized default model otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Number of timed frames.
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, env = "ICAUNET_THREADS")]
    workers: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    /// dense or grouped; grouped when more than one group.
    #[arg(long)]
    mode: Option<PlanMode>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Compare grouped outputs of one worker against all workers.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct IcaDemoArgs {
    /// f32 ICAV volume.
    #[arg(long)]
    input: PathBuf,
    /// `p` for a 1 x p x p patch, or `DxHxW`.
    #[arg(long, default_value = "4")]
    patch: String,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 8)]
    components: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    scale: SuiteScale,
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    /// `DxHxW`.
    #[arg(long, default_value = "8x64x64")]
    extents: String,
}

enum Failure {
    Core(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Bench(a) => cmd_bench(a),
        Command::IcaDemo(a) => cmd_ica_demo(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Phantom(a) => cmd_phantom(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_extents(s: &str) -> Result<[usize; 3], Error> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad extents {s:?}, expected DxHxW")))?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("bad extents {s:?}, expected DxHxW")))
}

fn parse_patch(s: &str) -> Result<[usize; 3], Error> {
    match s.trim().parse::<usize>() {
        Ok(p) => Ok([1, p, p]),
        Err(_) => parse_extents(s),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", a.config.display())))?;
    let rc = RunConfig::parse(&text)?;
    let data = a
        .data
        .or_else(|| rc.data.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data in the config".into()))?;
    let seq = load_dataset(&data)?;
    let mut trainer = Trainer::new(&rc)?;
    let mut log = format!("{}\n", StepReport::CSV_HEADER);
    let reports = trainer.train(&seq, |r| {
        let _ = writeln!(log, "{}", r.csv_row());
    })?;
    if let Some(path) = &a.log {
        fs::write(path, &log)?;
    }
    save_checkpoint(&a.out, &trainer.arch.config, &trainer.store)?;
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        println!(
            "trained {} steps: total {:.4} -> {:.4}, checkpoint {}",
            reports.len(),
            first.total,
            last.total,
            a.out.display()
        );
    }
    Ok(())
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn plan_for(config: &ModelConfig, workers: usize) -> ParallelPlan {
    if config.groups > 1 {
        ParallelPlan::grouped(config.groups, workers)
    } else {
        ParallelPlan::dense()
    }
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let (config, store) = load_checkpoint(&a.ckpt)?;
    let seq = load_dataset(&a.input)?;
    if seq.extents() != config.extents {
        return Err(Error::Shape(format!(
            "input extents {:?} do not match the checkpoint's {:?}",
            seq.extents(),
            config.extents
        ))
        .into());
    }
    let arch = Architecture::new(&config)?;
    let engine = icaunet::sched::Engine::new(arch, store, plan_for(&config, default_workers()))?;
    let frames: Vec<Tensor<f32>> = seq.frames.iter().map(normalize).collect();
    create_dir(&a.output)?;
    let has_labels = a.input.join("labels").is_dir();
    let mut preds = Vec::with_capacity(seq.len());
    let mut rows = Vec::new();
    for t in 0..seq.len() {
        let tr = Triple::around(t, seq.len());
        let out = engine.infer([&frames[tr.prev], &frames[tr.center], &frames[tr.next]])?;
        let pred = argmax_labels(out.logits.last().expect("at least two levels"))?;
        save_volume(a.output.join(frame_file_name(t)), &Volume::from(&pred))?;
        if has_labels {
            rows.extend(frame_metrics(t, &pred, &seq.labels[t], seq.spacing)?);
        }
        preds.push(pred);
    }
    if has_labels {
        fs::write(a.output.join("metrics.csv"), metrics_csv(&rows))?;
        for (cls, name) in [(1u8, "RV"), (2, "MYO"), (3, "LV")] {
            let dice: Vec<f64> = rows.iter().filter(|r| r.class == cls).map(|r| r.dice).collect();
            println!("{name} mean dice {:.4}", dice.iter().sum::<f64>() / dice.len() as f64);
        }
    }
    if a.png {
        let img = montage::render(&seq.frames, &preds)?;
        montage::save(&a.output.join("montage.png"), &img)?;
    }
    println!("wrote {} label volumes to {}", preds.len(), a.output.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let workers = a.workers.unwrap_or_else(default_workers);
    let (mut config, store) = match &a.ckpt {
        Some(p) => {
            let (c, s) = load_checkpoint(p)?;
            (c, Some(s))
        }
        None => (ModelConfig::default(), None),
    };
    let groups = a.groups.unwrap_or(config.groups);
    let mode = a
        .mode
        .unwrap_or(if groups > 1 { PlanMode::Grouped } else { PlanMode::Dense });
    let plan = ParallelPlan { mode, groups, workers };
    if store.is_none() && mode == PlanMode::Grouped {
        config.groups = groups;
    }
    plan.validate(&config)?;
    let arch = Architecture::new(&config)?;
    let store = store.unwrap_or_else(|| ParamStore::init(&arch, 0));

    let seq = generate_phantom(0, 12, config.extents, DEFAULT_SPACING)?;
    let frames: Vec<Tensor<f32>> = seq.frames.iter().map(normalize).collect();
    let stream: Vec<[&Tensor<f32>; 3]> = (0..frames.len())
        .map(|t| {
            let tr = Triple::around(t, frames.len());
            [&frames[tr.prev], &frames[tr.center], &frames[tr.next]]
        })
        .collect();

    if a.verify {
        verify_workers(&arch, &store, plan, stream[0])?;
    }
    let engine = icaunet::sched::Engine::new(arch, store, plan)?;
    let report = benchmark(&engine, &stream, a.warmup, a.frames)?;
    let csv = report.to_csv();
    for line in csv.lines().filter(|l| l.starts_with('#')) {
        println!("{line}");
    }
    if let Some(path) = &a.csv {
        fs::write(path, csv)?;
    }
    Ok(())
}

/// Grouped outputs with one worker and with `plan.workers` must agree.
fn verify_workers(arch: &Architecture, store: &ParamStore<f32>, plan: ParallelPlan, triple: [&Tensor<f32>; 3]) -> CmdResult {
    let run = |workers| -> Result<_, Error> {
        let p = ParallelPlan { workers, ..plan };
        icaunet::sched::Engine::new(arch.clone(), store.clone(), p)?.infer(triple)
    };
    let one = run(1)?;
    let many = run(plan.workers.max(1))?;
    let mut worst: f64 = 0.0;
    for (x, y) in one.logits.iter().zip(&many.logits) {
        worst = worst.max(max_abs_diff(x, y)?);
    }
    let ok = worst <= 1e-6;
    println!(
        "# verify workers=1 vs workers={}: max_abs_diff={worst:.3e} {}",
        plan.workers,
        if ok { "PASS" } else { "FAIL" }
    );
    if ok {
        Ok(())
    } else {
        Err(Failure::Verify(format!("worker outputs differ by {worst:.3e}")))
    }
}

fn cmd_ica_demo(a: IcaDemoArgs) -> CmdResult {
    let patch = parse_patch(&a.patch)?;
    let volume = load_volume(&a.input)?.into_f32()?;
    let patches = PatchMatrix::extract(&volume, patch, a.stride)?;
    let opts = FastIcaOptions {
        seed: a.seed,
        ..FastIcaOptions::default()
    };
    let model = IcaModel::fit(&patches.rows, a.components, &opts)?;
    let comps = model.unmix(&patches.rows)?;
    let rec = model.reconstruct(&comps)?;
    let err = relative_error(&patches.rows, &rec);

    create_dir(&a.out)?;
    let basis = model.basis();
    let [pd, ph, pw] = patch;
    let basis_t = Tensor::<f32>::from_fn(vec![model.m, pd, ph, pw], |i| {
        let (k, c) = (i / patches.patch_len(), i % patches.patch_len());
        basis[(c, k)] as f32
    });
    save_volume(a.out.join("basis.icav"), &Volume::F32(basis_t))?;
    let image = patches.with_rows(rec)?.assemble().cast::<f32>();
    save_volume(a.out.join("reconstruction.icav"), &Volume::F32(image))?;
    println!(
        "patches={} patch_len={} components={} converged={} relative_error={err:.6e}",
        patches.num_patches(),
        patches.patch_len(),
        model.m,
        model.converged
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let res = run_suite(&SuiteOptions {
        scale: a.scale,
        corrupt: a.corrupt,
    })?;
    for c in &res.checks {
        println!(
            "{:<28} max_rel_err={:.3e} tol={:.0e} {}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failing: Vec<&str> = res.failures().map(|c| c.name.as_str()).collect();
    if failing.is_empty() {
        println!("gradcheck ({}) passed: {} checks", a.scale, res.checks.len());
        Ok(())
    } else {
        Err(Failure::Verify(format!("gradient check failed for {}", failing.join(", "))))
    }
}

fn cmd_phantom(a: PhantomArgs) -> CmdResult {
    let extents = parse_extents(&a.extents)?;
    let seq = generate_phantom(a.seed, a.frames, extents, DEFAULT_SPACING)?;
    save_dataset(&a.out, &seq)?;
    println!("wrote {} frames of {:?} to {}", seq.len(), extents, a.out.display());
    Ok(())
}
