use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use icaunet::data::load_volume;

fn icaunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icaunet"))
        .args(args)
        .env_remove("ICAUNET_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = "\
# tiny overfit run
n = 2
m = 4
u = 2
d = 2
h = 32
w = 32
lr = 1e-3
grad_clip = 10
steps = 200
seed = 1
log_interval = 10
";

fn phantom(dir: &Path, extents: &str) {
    let o = icaunet(&["phantom", "--out", s(dir), "--seed", "3", "--frames", "4", "--extents", extents]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train(dir: &Path, cfg: &str, tag: &str) -> (Output, String) {
    let cfg_path = dir.join(format!("{tag}.cfg"));
    std::fs::write(&cfg_path, cfg).unwrap();
    let log = dir.join(format!("{tag}.csv"));
    let ckpt = dir.join(format!("{tag}.icac"));
    let o = icaunet(&[
        "train",
        "--config",
        s(&cfg_path),
        "--data",
        s(&dir.join("ds")),
        "--out",
        s(&ckpt),
        "--log",
        s(&log),
    ]);
    let text = std::fs::read_to_string(&log).unwrap_or_default();
    (o, text)
}

fn totals(log: &str) -> Vec<f64> {
    log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn train_overfits_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    phantom(&dir.path().join("ds"), "2x32x32");
    let (o, log) = train(dir.path(), CONFIG, "a");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(log.starts_with("step,total,ce_sum,l_ica,dice_train\n"));
    let t = totals(&log);
    assert!(t.len() >= 20);
    assert!(t.last().unwrap() < t.first().unwrap(), "{t:?}");
    // the second half of the log sits below the first half on average
    let half = t.len() / 2;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&t[half..]) < mean(&t[..half]));

    let (o, again) = train(dir.path(), CONFIG, "b");
    assert_eq!(code(&o), 0);
    assert_eq!(log, again);
    assert_eq!(
        std::fs::read(dir.path().join("a.icac")).unwrap(),
        std::fs::read(dir.path().join("b.icac")).unwrap()
    );
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    phantom(&dir.path().join("ds"), "2x32x32");
    let no_steps: String = CONFIG.lines().filter(|l| !l.starts_with("steps")).map(|l| format!("{l}\n")).collect();
    let (o, _) = train(dir.path(), &no_steps, "missing");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("steps"), "{}", stderr(&o));

    let (o, _) = train(dir.path(), &format!("{CONFIG}colour = red\n"), "unknown");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"));

    let o = icaunet(&["train", "--config", s(&dir.path().join("absent.cfg")), "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn infer_writes_labels_and_montage() {
    let dir = tempfile::tempdir().unwrap();
    phantom(&dir.path().join("ds"), "2x32x32");
    let (o, _) = train(dir.path(), &CONFIG.replace("steps = 200", "steps = 20"), "m");
    assert_eq!(code(&o), 0);
    let ckpt = dir.path().join("m.icac");
    let out = dir.path().join("pred");
    let run = |out: &Path| {
        icaunet(&["infer", "--ckpt", s(&ckpt), "--input", s(&dir.path().join("ds")), "--output", s(out), "--png"])
    };
    let o = run(&out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for t in 0..4 {
        let l = load_volume(out.join(format!("t{t:04}.icav"))).unwrap().into_labels().unwrap();
        assert_eq!(l.extents(), [2, 32, 32]);
        assert!(l.data().iter().all(|&c| c < 4));
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("frame_index,class,dice,hausdorff_mm"));
    let img = image::open(out.join("montage.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (4 * 32, 3 * 32));

    let out2 = dir.path().join("pred2");
    assert_eq!(code(&run(&out2)), 0);
    for t in 0..4 {
        let name = format!("t{t:04}.icav");
        assert_eq!(std::fs::read(out.join(&name)).unwrap(), std::fs::read(out2.join(&name)).unwrap());
    }

    let big = dir.path().join("big");
    phantom(&big, "2x64x64");
    let o = icaunet(&["infer", "--ckpt", s(&ckpt), "--input", s(&big), "--output", s(&dir.path().join("p3"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn bench_reports_and_validates_plans() {
    let dir = tempfile::tempdir().unwrap();
    phantom(&dir.path().join("ds"), "2x32x32");
    let cfg = CONFIG.replace("m = 4", "m = 8\ngroups = 4\nmode = grouped").replace("steps = 200", "steps = 2");
    let (o, _) = train(dir.path(), &cfg, "g");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = dir.path().join("g.icac");
    let csv = dir.path().join("bench.csv");
    let o = icaunet(&[
        "bench", "--ckpt", s(&ckpt), "--frames", "6", "--workers", "4", "--csv", s(&csv), "--verify",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for key in ["throughput_fps=", "p50=", "p90=", "p99=", "mode=grouped", "groups=4", "workers=4"] {
        assert!(out.contains(key), "{key} missing from {out}");
    }
    assert!(out.contains("verify workers=1 vs workers=4") && out.contains("PASS"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 7);

    let o = icaunet(&["bench", "--ckpt", s(&ckpt), "--groups", "3", "--mode", "grouped"]);
    assert_eq!(code(&o), 2);
    let o = icaunet(&["bench", "--ckpt", s(&ckpt), "--mode", "dense"]);
    assert_eq!(code(&o), 2);
}

fn relative_error(out: &str) -> f64 {
    out.split("relative_error=").nth(1).unwrap().trim().parse().unwrap()
}

#[test]
fn ica_demo_full_rank_and_truncated() {
    let dir = tempfile::tempdir().unwrap();
    phantom(&dir.path().join("ds"), "2x32x32");
    let input = dir.path().join("ds/frames/t0001.icav");
    let run = |m: &str, out: &str| {
        let o = icaunet(&["ica-demo", "--input", s(&input), "--patch", "3", "--components", m, "--out", s(&dir.path().join(out))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        relative_error(&stdout(&o))
    };
    let full = run("9", "full");
    assert!(full < 1e-4, "{full}");
    let one = run("1", "one");
    assert!(one > full);
    let basis = load_volume(dir.path().join("full/basis.icav")).unwrap();
    assert_eq!(basis.shape(), [9, 1, 3, 3]);
    let rec = load_volume(dir.path().join("full/reconstruction.icav")).unwrap();
    assert_eq!(rec.shape(), [2, 32, 32]);

    run("9", "again");
    assert_eq!(
        std::fs::read(dir.path().join("full/basis.icav")).unwrap(),
        std::fs::read(dir.path().join("again/basis.icav")).unwrap()
    );

    let o = icaunet(&["ica-demo", "--input", s(&input), "--patch", "64", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_passes_and_names_corrupted_op() {
    let start = Instant::now();
    let o = icaunet(&["gradcheck", "--scale", "tiny"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(start.elapsed().as_secs() < 60);
    let out = stdout(&o);
    for op in ["conv3d", "transposed_conv3d", "batch_norm_train", "correlation3d", "cross_entropy", "e2e_tiny_model"] {
        assert!(out.lines().any(|l| l.starts_with(op) && l.ends_with("ok")), "{op}");
    }

    let o = icaunet(&["gradcheck", "--corrupt", "correlation3d"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("correlation3d"));
    assert!(stdout(&o).lines().any(|l| l.starts_with("correlation3d") && l.ends_with("FAIL")));
}
