use std::path::Path;
use std::process::{Command, Output};

fn splat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splat")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = splat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic dataset with one held-out view.
fn dataset(root: &Path) -> std::path::PathBuf {
    let config = root.join("synth.toml");
    std::fs::write(&config, "gaussians = 40\nviews = 6\nsize = 32\nfloaters = 2\noutliers = 2\nheld_out = [5]\n").unwrap();
    let ds = root.join("ds");
    ok(&["synth", "--out", p(&ds), "--config", p(&config)]);
    ds
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(splat(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(splat(&["eval", "--dataset", "x"]).status.code(), Some(2));
    assert_eq!(splat(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = splat(&["eval", "--dataset", p(&dir.path().join("missing")), "--renders", "r"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: ") && err.trim_end().lines().count() == 1, "{err}");
}

#[test]
fn zero_iterations_still_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--dataset", p(&ds), "--out", p(&run), "--iterations", "0"]);
    assert!(run.join("checkpoint.bin").is_file());
    assert!(run.join("config.toml").is_file());
    assert_eq!(std::fs::read_to_string(run.join("train.jsonl")).unwrap(), "");
}

#[test]
fn ground_truth_renders_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let out = ok(&["eval", "--dataset", p(&ds), "--renders", p(&ds.join("images"))]);
    let mean = out.lines().find(|l| l.starts_with("mean")).unwrap();
    assert!(mean.contains("99.000") && mean.contains("1.000"), "{out}");
}

#[test]
fn pipeline_is_deterministic_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let config = dir.path().join("train.toml");
    std::fs::write(&config, "iterations = 30\nviews_per_step = 2\nprune_every = 10\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        ok(&["train", "--dataset", p(&ds), "--out", p(run), "--config", p(&config), "--seed", "3"]);
    }
    for file in ["train.jsonl", "checkpoint.bin", "metrics.json", "config.toml"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let log = std::fs::read_to_string(a.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 30);
    let record: serde_json::Value = serde_json::from_str(log.lines().nth(9).unwrap()).unwrap();
    assert!(record["prune"].is_object(), "{record}");

    let ckpt = a.join("checkpoint.bin");
    let renders = dir.path().join("renders");
    let out = ok(&["render", "--checkpoint", p(&ckpt), "--cameras", p(&ds), "--out", p(&renders)]);
    assert!(out.contains("rendered 6 views"));
    let from_ckpt = ok(&["eval", "--dataset", p(&ds), "--checkpoint", p(&ckpt), "--json"]);
    let from_renders = ok(&["eval", "--dataset", p(&ds), "--renders", p(&renders), "--json"]);
    let x: serde_json::Value = serde_json::from_str(&from_ckpt).unwrap();
    let y: serde_json::Value = serde_json::from_str(&from_renders).unwrap();
    // Renders are quantized to 8 bits on disk.
    let (px, py) = (x["mean_psnr"].as_f64().unwrap(), y["mean_psnr"].as_f64().unwrap());
    assert!((px - py).abs() < 0.5, "{px} vs {py}");
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, x);

    let pruned = dir.path().join("pruned.bin");
    let out = ok(&["prune-report", "--checkpoint", p(&ckpt), "--dataset", p(&ds), "--out", p(&pruned)]);
    let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    let report = lines.last().unwrap();
    assert_eq!(report["iteration"], 30);
    assert!(report["surviving_gaussians"].as_u64().unwrap() > 0);
    assert!(pruned.is_file());
}
