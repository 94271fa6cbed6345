use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use sparce::learning::METRIC_TRACE_HEADER;

const SMALL_STORAGE: &str = r#"
task = "storage"
seed = 3

[reservoir]
n_nodes = 120
alpha = 0.1
rho = 0.95
gamma = 1.0
p_er = 0.02
activation = "relu"
input_dist = { kind = "lognormal", mu = 0.0, sigma = 1.0 }

[storage]
n_sequences = 32

[train]
epochs = 20
minibatch_size = 8
eval_every = 10
"#;

fn sparce(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparce")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn summary(dir: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_s");
    v
}

#[test]
fn dry_run_prints_dimensions_without_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "task = \"storage\"\n");
    let out = sparce(tmp.path(), &["run", &cfg, "--dry-run", "--set", "output_dir=never"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["readout_dim"], 1000);
    assert_eq!(v["n_class"], 2);
    assert_eq!(v["n_params"]["p50"], 1000 * 2 + 1000);
    assert_eq!(v["minibatches_per_epoch"], 10);
    assert!(!tmp.path().join("never").exists());

    let out = sparce(tmp.path(), &["sweep", &cfg, "--dry-run"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n_params"]["standard"], 2000);
    assert_eq!(v["n_params"].as_object().unwrap().len(), 10);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "task = \"storage\"\n");
    assert_eq!(sparce(tmp.path(), &["validate", &cfg]).status.code(), Some(0));
    let bad = |extra: &str| sparce(tmp.path(), &["validate", &cfg, "--set", extra]).status.code();
    assert_eq!(bad("train.typo=1"), Some(2));
    assert_eq!(bad("reservoir.alpha=2.0"), Some(2));
    assert_eq!(bad("readout.model.percentile=150"), Some(2));
    assert_eq!(sparce(tmp.path(), &["validate", "missing.toml"]).status.code(), Some(2));

    let mnist = write_config(tmp.path(), "task = \"mnist\"\n[mnist]\ndir = \"nowhere\"\n");
    assert_eq!(sparce(tmp.path(), &["validate", &mnist]).status.code(), Some(3));
    assert_eq!(sparce(tmp.path(), &["run", &mnist]).status.code(), Some(3));

    let cfg = write_config(tmp.path(), SMALL_STORAGE);
    let out = sparce(
        tmp.path(),
        &["run", &cfg, "--set", "rates.eta_w=1e300", "--set", "rates.optimizer.kind=sgd", "--set", "output_dir=blowup"],
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reruns_are_identical_and_snapshots_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_STORAGE);
    let a = tmp.path().join("a");
    let mut first = None;
    for _ in 0..2 {
        let o = sparce(tmp.path(), &["run", &cfg, "--set", "output_dir=a"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let now = (summary(&a), fs::read(a.join("checkpoint.json")).unwrap());
        if let Some(prev) = &first {
            assert_eq!(prev, &now);
        }
        first = Some(now);
    }

    let snapshot = fs::read_to_string(a.join("config.toml")).unwrap();
    let hash = fs::read_to_string(a.join("config.sha256")).unwrap();
    let digest: String = Sha256::digest(snapshot.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hash.trim(), digest);

    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let header = csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, METRIC_TRACE_HEADER);
    for key in ["config_hash", "seed", "git_describe", "wall_time_s"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("# {key}: "))), "{key}");
    }
    let steps: Vec<u64> = csv
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*steps.last().unwrap(), 80);

    // the snapshot alone reproduces the run
    let replay = tmp.path().join("a").join("config.toml").display().to_string();
    let o = sparce(tmp.path(), &["run", &replay, "--set", "output_dir=c"]);
    assert!(o.status.success());
    let mut c = summary(&tmp.path().join("c"));
    let mut a = summary(&a);
    for v in [&mut a, &mut c] {
        v.as_object_mut().unwrap().remove("config_hash");
    }
    assert_eq!(a, c);
}

#[test]
fn sweep_of_one_point_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_STORAGE);
    let grid = ["--set", "sweep.percentiles=[50.0]", "--set", "sweep.include_standard=false"];
    let o = sparce(tmp.path(), &[&["sweep", &cfg, "--set", "output_dir=s"][..], &grid[..]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sparce(tmp.path(), &[&["run", &cfg, "--set", "output_dir=r"][..], &grid[..]].concat());
    assert!(o.status.success());
    let (s, r) = (summary(&tmp.path().join("s")), summary(&tmp.path().join("r")));
    assert_eq!(s["model"], r["model"]);
    assert_eq!(
        fs::read(tmp.path().join("s/checkpoint.json")).unwrap(),
        fs::read(tmp.path().join("r/checkpoint.json")).unwrap()
    );
    let surface = fs::read_to_string(tmp.path().join("s/surface.csv")).unwrap();
    assert_eq!(surface.lines().count(), 2);
}

#[test]
fn selection_modes_write_a_surface() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_STORAGE);
    for mode in ["early", "specialization"] {
        let o = sparce(
            tmp.path(),
            &["sweep", &cfg, "--set", &format!("sweep.selection=\"{mode}\""), "--set", &format!("output_dir={mode}")],
        );
        assert!(o.status.success(), "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        let dir = tmp.path().join(mode);
        let surface = fs::read_to_string(dir.join("surface.csv")).unwrap();
        assert_eq!(surface.lines().count(), 10);
        assert_eq!(surface.lines().filter(|l| l.ends_with(",selected")).count(), 1);
        let s = summary(&dir);
        let sel = s["selected"].as_str().unwrap();
        assert!(surface.lines().any(|l| l.starts_with(&format!("{sel},")) && l.ends_with(",selected")));
    }
}
