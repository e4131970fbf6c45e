use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bilab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilab")).args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn defaults_round_trip_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = bilab(&["defaults", "data_stats"]);
    let cfg = stdout_json(&o);
    assert_eq!(cfg["experiment"], "data_stats");
    assert_eq!(cfg["markov"]["synthetic_N"], 65);
    let file = dir.path().join("c.json");
    std::fs::write(&file, &o.stdout).unwrap();
    let out = dir.path().join("out");
    let s = stdout_json(&bilab(&["run", path(&file), "--out", path(&out)]));
    assert_eq!(s["N"], 65.0);
    for f in ["resolved_config.json", "summary.json", "markov.json", "data_stats.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn unknown_field_exits_with_schema_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = bilab(&["run", "--set", "experiment=train", "--set", "train.etta=0.1", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["kind"], "schema");
    assert_eq!(err["field"], "train.etta");
}

#[test]
fn invalid_values_exit_with_schema_code() {
    for set in ["train.eta=-1", "geometry.T=1", "triggers.K=0"] {
        let dir = tempfile::tempdir().unwrap();
        let o = bilab(&["run", "--set", "experiment=train", "--set", set, "--out", path(dir.path())]);
        assert_eq!(o.status.code(), Some(2), "{set}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn runtime_error_writes_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = bilab(&[
        "run",
        "--set",
        "experiment=data_stats",
        "--set",
        "markov.corpus_path=/nonexistent/corpus.txt",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("error.json")).unwrap()).unwrap();
    assert_eq!(err["kind"], "runtime");
}

#[test]
fn corpus_statistics_of_a_tiny_text() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("text.txt");
    std::fs::write(&corpus, "ababab").unwrap();
    let out = dir.path().join("out");
    let corpus_set = format!("markov.corpus_path={}", path(&corpus));
    let s = stdout_json(&bilab(&[
        "run",
        "--set",
        "experiment=data_stats",
        "--set",
        &corpus_set,
        "--set",
        "triggers.K=1",
        "--set",
        "geometry.T=8",
        "--out",
        path(&out),
    ]));
    assert_eq!(s["N"], 2.0);
    let stats: Value = serde_json::from_str(&std::fs::read_to_string(out.join("data_stats.json")).unwrap()).unwrap();
    assert_eq!(stats["chars"], "ab");
    assert_eq!(stats["pi_b"], serde_json::json!([[0.0, 1.0], [1.0, 0.0]]));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    stdout_json(&bilab(&["run", "--set", "experiment=data_stats", "--set", "seed=3", "--seed", "9", "--out", path(&out)]));
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["train"]["seed"], 9);
}

#[test]
fn small_training_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let s = stdout_json(&bilab(&[
        "run",
        "--set",
        "experiment=train",
        "--set",
        "geometry.d=16",
        "--set",
        "geometry.T=16",
        "--set",
        "markov.synthetic_N=8",
        "--set",
        "train.iters=5",
        "--set",
        "train.batch_size=4",
        "--out",
        path(&out),
    ]));
    assert_eq!(s["iters"], 5.0);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let pgm = std::fs::read(out.join("attn_layer1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), b"P5\n16 16\n255\n".len() + 16 * 16);
    let ckpt = bilab_core::Params64::load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    assert_eq!((ckpt.d(), ckpt.n(), ckpt.t_max()), (16, 8, 16));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    stdout_json(&bilab(&[
        "run",
        "--set",
        "experiment=sweep",
        "--set",
        "sweep.axis=d",
        "--set",
        "sweep.values=[8,16]",
        "--set",
        "onestep.r1.T=16",
        "--set",
        "onestep.r1.n_batches=1",
        "--set",
        "onestep.r1.batch_size=4",
        "--out",
        path(&out),
    ]));
    let rows = bilab_cli::run::read_sweep_summary(&out.join("sweep_summary.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![8.0, 16.0]);
    assert!(rows.iter().all(|(_, m)| m["r1"].is_some()));
    let sub: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("d=8/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(sub["onestep"]["r1"]["d"], 8);
    assert_eq!(sub["experiment"], "theory_onestep");
}

#[test]
fn empty_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = bilab(&["run", "--set", "experiment=sweep", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}
