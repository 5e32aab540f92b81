mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cbcf::pipeline::{run_pipeline, ExperimentConfig, Manifest, Target};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("ratings.data");
    common::synthetic(60, 40, 0.6, 21).write_movielens(&data).unwrap();
    Fixture { _dir: dir, root, data }
}

fn config(fx: &Fixture, name: &str, cache: bool) -> ExperimentConfig {
    let text = format!(
        r#"
name = "{name}"
dataset = "{}"
seed = 3
out = "{}"
{}

[split]
mode = "random_holdout"
test_fraction = 0.2

[predictor]
method = "item_based"
k = 20

[clustering]
algorithm = "spectral"
c = 3

[evaluation]
alpha = 4.0
beta = 3.5
gamma = 3.5
threshold = 3.5
grid_step = 0.5
"#,
        fx.data.display(),
        fx.root.join(name).display(),
        if cache { format!("cache = \"{}\"", fx.root.join("cache").display()) } else { String::new() }
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical() {
    let fx = fixture();
    let cfg = config(&fx, "run", false);
    run_pipeline(&cfg, Target::Sweep).unwrap();
    let first = files(&cfg.out);
    fs::remove_dir_all(&cfg.out).unwrap();
    run_pipeline(&cfg, Target::Sweep).unwrap();
    let second = files(&cfg.out);
    assert_eq!(first.len(), second.len());
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.0, b.0);
        assert!(a.1 == b.1, "{} differs between runs", a.0.display());
    }
    for name in [
        "config.toml",
        "manifest.json",
        "predictions.csv",
        "clusters.csv",
        "sweep.csv",
        "sweep_baseline.csv",
        "summary.json",
    ] {
        assert!(first.iter().any(|f| f.0 == Path::new(name)), "missing {name}");
    }
}

#[test]
fn manifest_hashes_every_artifact() {
    let fx = fixture();
    let cfg = config(&fx, "manifest", false);
    run_pipeline(&cfg, Target::Evaluate).unwrap();
    let m: Manifest = serde_json::from_str(&fs::read_to_string(cfg.out.join("manifest.json")).unwrap()).unwrap();
    assert!(!m.artifacts.is_empty());
    for a in &m.artifacts {
        let bytes = fs::read(cfg.out.join(&a.path)).unwrap();
        assert_eq!(cbcf::pipeline::sha256_hex(&bytes), a.sha256, "{}", a.path);
        assert_eq!(bytes.len() as u64, a.bytes);
    }
    assert!(!fs::read_to_string(cfg.out.join("manifest.json")).unwrap().contains("time"));
}

#[test]
fn warm_cache_hits_every_cached_stage() {
    let fx = fixture();
    let cfg = config(&fx, "warm", true);
    let cold = run_pipeline(&cfg, Target::Sweep).unwrap();
    let manifest_cold = fs::read(cfg.out.join("manifest.json")).unwrap();
    let warm = run_pipeline(&cfg, Target::Sweep).unwrap();
    let cached = ["similarity", "predict", "cluster"];
    for s in cold.stages.iter().filter(|s| cached.contains(&s.stage.as_str())) {
        assert!(!s.cache_hit, "{} hit on a cold cache", s.stage);
    }
    let warm_cached: Vec<_> = warm.stages.iter().filter(|s| cached.contains(&s.stage.as_str())).collect();
    assert!(warm_cached.len() >= 3);
    assert!(warm_cached.iter().all(|s| s.cache_hit));
    assert_eq!(fs::read(cfg.out.join("manifest.json")).unwrap(), manifest_cold);
}

#[test]
fn changed_config_recomputes_downstream_only() {
    let fx = fixture();
    let mut cfg = config(&fx, "changed", true);
    run_pipeline(&cfg, Target::Predict).unwrap();
    cfg.predictor.k = 5;
    let again = run_pipeline(&cfg, Target::Predict).unwrap();
    let hit = |stage: &str| again.stages.iter().find(|s| s.stage == stage).unwrap().cache_hit;
    assert!(hit("similarity"));
    assert!(!hit("predict"));
}

#[test]
fn tampered_cache_entry_is_recomputed() {
    let fx = fixture();
    let cfg = config(&fx, "tamper", true);
    let first = run_pipeline(&cfg, Target::Predict).unwrap();
    let preds_before = fs::read(cfg.out.join("predictions.csv")).unwrap();
    let cache = fx.root.join("cache");
    let victim = fs::read_dir(&cache)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.starts_with("predict-") && !name.ends_with(".sha256")
        })
        .expect("prediction cache entry");
    let mut bytes = fs::read(&victim).unwrap();
    let at = bytes.len() / 2;
    bytes[at] ^= 1;
    fs::write(&victim, bytes).unwrap();

    let second = run_pipeline(&cfg, Target::Predict).unwrap();
    let hit =
        |b: &cbcf::pipeline::RunBundle, stage: &str| b.stages.iter().find(|s| s.stage == stage).unwrap().cache_hit;
    assert!(!hit(&first, "predict"));
    assert!(!hit(&second, "predict"));
    assert!(hit(&second, "similarity"));
    assert_eq!(fs::read(cfg.out.join("predictions.csv")).unwrap(), preds_before);
}

#[test]
fn stage_errors_name_the_stage() {
    let fx = fixture();
    let bad = fx.root.join("bad.data");
    fs::write(&bad, "1\t2\t4\n1\tx\t3\n").unwrap();
    let mut cfg = config(&fx, "bad", false);
    cfg.dataset = bad;
    let err = run_pipeline(&cfg, Target::Ingest).unwrap_err();
    assert!(err.to_string().contains("ingest"), "{err}");
    assert!(err.to_string().contains("line 2"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = ExperimentConfig::from_toml_str("dataset = \"x\"\nsede = 3\n").unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

fn cbcf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cbcf"))
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn cli_exit_codes() {
    let fx = fixture();
    let out = fx.root.join("cli");
    assert_eq!(code(cbcf().arg("--help")), 0);
    assert_eq!(code(cbcf().arg("ingest").arg("--no-such-flag")), 1);
    assert_eq!(code(cbcf().args(["ingest", "--dataset"]).arg(fx.root.join("missing.data"))), 1);
    assert_eq!(code(cbcf().args(["ingest", "--seed", "abc"])), 1);
    assert_eq!(code(cbcf().args(["evaluate", "--alpha", "2", "--beta", "3"]).arg("--dataset").arg(&fx.data)), 1);

    let bad = fx.root.join("bad.data");
    fs::write(&bad, "1\t2\t9\n").unwrap();
    assert_eq!(code(cbcf().arg("ingest").arg("--dataset").arg(&bad).arg("--out").arg(&out)), 2);

    let ok = cbcf().arg("ingest").arg("--dataset").arg(&fx.data).arg("--out").arg(&out).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("users=60"));
}

#[test]
fn cli_flags_override_config_fields() {
    let fx = fixture();
    let cfg = config(&fx, "flags", false);
    let path = fx.root.join("flags.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let status = cbcf()
        .arg("evaluate")
        .arg("--config")
        .arg(&path)
        .args(["--k", "7", "--c", "2", "--seed", "11", "--set", "evaluation.beta=3.0"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let written = ExperimentConfig::from_toml_str(&fs::read_to_string(cfg.out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(written.predictor.k, 7);
    assert_eq!(written.clustering.as_ref().unwrap().c, 2);
    assert_eq!(written.seed, 11);
    assert_eq!(written.evaluation.beta, Some(3.0));
}

#[test]
fn cli_reproduce_writes_tables() {
    let fx = fixture();
    let out = fx.root.join("repro");
    let o = cbcf()
        .arg("reproduce")
        .arg("--dataset")
        .arg(&fx.data)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "2", "--jobs", "2"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["matched_precision.csv", "item_based.csv", "user_based.csv", "cold_start.csv", "tables.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let item = fs::read_to_string(out.join("item_based.csv")).unwrap();
    assert_eq!(item.lines().count(), 4);
    assert!(item.lines().nth(1).unwrap().starts_with("Spectral,"));
}
