use std::path::Path;
use std::process::Command;

use allattn::Error;
use allattn_cli::config::RunConfig;
use allattn_cli::runner::{cmd_ablate, cmd_eval, cmd_train};
use allattn_cli::synth::text8_like;
use serde_json::Value;

/// A tiny char model on a synthetic corpus written into `dir`.
fn tiny(dir: &Path, extra: &[&str]) -> RunConfig {
    let (train, dev) = text8_like(20_000, 3_000, 3);
    std::fs::write(dir.join("train.txt"), &train).unwrap();
    std::fs::write(dir.join("dev.txt"), &dev).unwrap();
    std::fs::write(dir.join("test.txt"), &dev[..1500]).unwrap();
    let mut overrides: Vec<String> = [
        "preset=toy",
        "d_model=16",
        "n_heads=2",
        "n_layers=2",
        "n_persistent=8",
        "ff_dim=8",
        "max_span=16",
        "span_ramp=4",
        "span_init=16",
        "attn_dropout=0.1",
        "batch_size=2",
        "block_size=8",
        "max_steps=12",
        "warmup_steps=4",
        "log_interval=1",
        "eval_interval=4",
        "eval_lanes=2",
        "eval_block=16",
        "eval_max_tokens=400",
        "checkpoint_interval=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for (k, f) in [
        ("train_path", "train.txt"),
        ("dev_path", "dev.txt"),
        ("test_path", "test.txt"),
        ("metrics_path", "metrics.jsonl"),
        ("checkpoint_path", "model.ckpt"),
    ] {
        overrides.push(format!("{k}={}", dir.join(f).display()));
    }
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::resolve(None, &overrides).unwrap()
}

fn records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn train_nll(records: &[Value]) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter(|r| r["split"] == "train")
        .map(|r| (r["step"].as_u64().unwrap(), r["nll"].as_f64().unwrap()))
        .collect()
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = tiny(a.path(), &[]);
    cmd_train(&full).unwrap();

    let mut first = tiny(b.path(), &["max_steps=5"]);
    cmd_train(&first).unwrap();
    first.max_steps = 12;
    let resumed = cmd_train(&first).unwrap();
    assert_eq!(resumed.steps, 12);

    let whole = train_nll(&records(&full.metrics_path.unwrap()));
    let split = train_nll(&records(&first.metrics_path.unwrap()));
    assert_eq!(whole.len(), 12);
    // Bit-exact, including the dropout stream and the memory cache.
    assert_eq!(whole, split);
}

#[test]
fn metrics_streams_are_byte_identical_and_tagged() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &[]);
    let metrics = cfg.metrics_path.clone().unwrap();
    cmd_train(&cfg).unwrap();
    let first = std::fs::read(&metrics).unwrap();
    std::fs::remove_file(&metrics).unwrap();
    std::fs::remove_file(cfg.checkpoint_path.as_ref().unwrap()).unwrap();
    cmd_train(&cfg).unwrap();
    assert_eq!(first, std::fs::read(&metrics).unwrap());

    let recs = records(&metrics);
    assert_eq!(recs[0]["type"], "header");
    assert_eq!(recs[0]["config"]["d_model"], "16");
    let hash = cfg.hash();
    assert!(recs.iter().all(|r| r["config_hash"] == hash.as_str()));
    assert!(recs.iter().all(|r| r["wall_ms"].is_null()));
    let mut other = cfg.clone();
    other.lr *= 2.0;
    assert_ne!(other.hash(), hash);
}

#[test]
fn eval_is_repeatable_and_labels_splits() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &[]);
    cmd_train(&cfg).unwrap();
    let ckpt = cfg.checkpoint_path.clone().unwrap();
    let splits = vec!["dev".to_string(), "test".to_string()];
    let first = cmd_eval(&cfg, &ckpt, &splits).unwrap();
    let second = cmd_eval(&cfg, &ckpt, &splits).unwrap();
    assert_eq!(first.len(), 2);
    for ((s1, r1), (s2, r2)) in first.iter().zip(&second) {
        assert_eq!(s1, s2);
        assert_eq!(r1.nll.to_bits(), r2.nll.to_bits());
        assert_eq!(r1.bpc(), r1.nll / std::f64::consts::LN_2);
    }
    let recs = records(cfg.metrics_path.as_ref().unwrap());
    let evals: Vec<_> = recs
        .iter()
        .filter(|r| r["split"].is_string() && r["final"].is_null() && r["lr"].is_null())
        .collect();
    assert_eq!(evals.len(), 4);
    assert_eq!(evals[0]["split"], "dev");
    assert_eq!(evals[1]["split"], "test");
}

#[test]
fn eval_with_mismatched_shapes_lists_the_paths() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &[]);
    cmd_train(&cfg).unwrap();
    let mut wrong = cfg.clone();
    wrong.n_persistent = 4;
    let err = cmd_eval(
        &wrong,
        cfg.checkpoint_path.as_ref().unwrap(),
        &["dev".into()],
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Checkpoint(_)));
    assert!(msg.contains("layer0.attn.mem_k"), "{msg}");
    assert!(msg.contains("layer1.attn.mem_v"), "{msg}");
}

#[test]
fn ablation_rows_share_everything_but_the_swept_knob() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &["max_steps=3", "eval_interval=0"]);
    let (csv, rows) = cmd_ablate(&cfg, "n_persistent=0,4,8").unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(csv.lines().next().unwrap(), "n_persistent,params,dev_bpc");
    assert_eq!(csv.lines().count(), 4);
    assert!(rows[0].params < rows[1].params && rows[1].params < rows[2].params);

    let headers: Vec<Value> = ["0", "8"]
        .iter()
        .map(|v| {
            records(&d.path().join(format!("metrics.n_persistent-{v}.jsonl")))[0]["config"].clone()
        })
        .collect();
    let (a, b) = (
        headers[0].as_object().unwrap(),
        headers[1].as_object().unwrap(),
    );
    let differing: Vec<_> = a.keys().filter(|k| a[*k] != b[*k]).cloned().collect();
    assert_eq!(
        differing,
        ["checkpoint_path", "metrics_path", "n_persistent"]
    );
    assert_eq!(a["seed"], b["seed"]);
}

#[test]
fn variant_sweep_emits_one_row_per_ablation_variant() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &["max_steps=2", "eval_interval=0"]);
    let (csv, rows) = cmd_ablate(&cfg, "variant=all").unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.value.as_str()).collect();
    assert_eq!(
        names,
        [
            "all_attn",
            "attn_split",
            "head_split",
            "single_head",
            "ff_attn"
        ]
    );
    assert!(csv.starts_with("variant,params,dev_bpc\n"));
    assert!(rows.iter().all(|r| r.dev.is_finite()));
}

#[test]
fn bad_sweeps_are_config_errors() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path(), &[]);
    for s in ["n_persistent", "bogus=1,2", "n_persistent="] {
        assert!(matches!(cmd_ablate(&cfg, s), Err(Error::Config(_))), "{s}");
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_allattn"))
}

#[test]
fn exit_codes_follow_the_error_class() {
    let d = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--preset", "toy", "--set", "d_modle=3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key `d_modle`"));
    let missing = d.path().join("nope.txt");
    let out = bin()
        .args(["train", "--preset", "toy", "--set"])
        .arg(format!("train_path={}", missing.display()))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn param_count_and_variant_flag() {
    let out = bin()
        .args(["param-count", "--preset", "char-large"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("per layer, weights only 3145728"), "{text}");
    let out = bin()
        .args([
            "param-count",
            "--preset",
            "char-small",
            "--variant",
            "attn_split",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
}

#[test]
fn verify_fails_on_an_injected_fault() {
    let out = bin()
        .args(["verify", "--inject-fault", "layer_norm"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[FAIL] numerics"));
    assert!(text.contains("backward of op `layer_norm` corrupted"));
}
