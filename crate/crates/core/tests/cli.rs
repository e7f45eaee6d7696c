use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixmoe::train::load_checkpoint;

fn tiny_config(dir: &Path, overrides: serde_json::Value) -> PathBuf {
    let mut doc = serde_json::json!({
        "seed": 11,
        "model": {"d_model": 16, "d_ff": 32, "n_layers": 2, "n_heads": 2, "max_seq_len": 64, "moe_interval": 1},
        "data": {"n_languages": 2, "mono_per_language": 12, "parallel_per_direction": 6, "test_per_direction": 2, "mono_eval_per_language": 2},
        "pretrain": {"steps": 4, "batch_size": 4},
        "stage1": {"steps": 6, "batch_size": 4},
        "stage2": {"steps": 6, "batch_size": 4},
        "eval": {"bleu_per_direction": 2}
    });
    merge(&mut doc, overrides);
    let path = dir.join("config.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

fn merge(into: &mut serde_json::Value, from: serde_json::Value) {
    match (into, from) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn mixmoe(args: &[&str]) -> Output {
    mixmoe_env(args, &[])
}

fn mixmoe_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mixmoe"));
    cmd.args(args).env_remove("MIXMOE_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_is_reproducible_and_creates_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), serde_json::json!({}));
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    assert!(mixmoe(&["gen-data", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(mixmoe(&["gen-data", "--config", s(&cfg), "--out", s(&b)]).status.success());
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    for f in ["mono.jsonl", "parallel_train.jsonl", "parallel_test.jsonl", "mono_eval.jsonl"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    assert_eq!(manifest["directions"].as_array().unwrap().len(), 4);
}

#[test]
fn schema_errors_name_the_json_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), serde_json::json!({"data": {"pairs": [["xa", "en"], ["xz", "en"]]}}));
    let out = mixmoe(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("$.data.pairs[1][0]"), "{}", stderr(&out));

    let cfg = tiny_config(dir.path(), serde_json::json!({"stage1": {"learning_rat": 1.0}}));
    let out = mixmoe(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("$.stage1.learning_rat"), "{}", stderr(&out));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), serde_json::json!({}));
    let out = mixmoe(&["train", "--config", s(&cfg), "--stage", "2", "--out", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(2), "stage 2 without --init");

    let out = mixmoe(&["gen-data", "--config", s(&dir.path().join("missing.json")), "--out", "x"]);
    assert_eq!(out.status.code(), Some(4), "unreadable config");

    let out = mixmoe_env(
        &["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))],
        &[("MIXMOE_THREADS", "zero")],
    );
    assert_eq!(out.status.code(), Some(2), "bad thread count");

    let hot = tiny_config(dir.path(), serde_json::json!({"pretrain": {"steps": 0}, "stage1": {"learning_rate": 1e200, "warmup_ratio": 0.0}}));
    let out = mixmoe(&["train", "--config", s(&hot), "--stage", "1", "--out", s(&dir.path().join("hot.ckpt"))]);
    assert_eq!(out.status.code(), Some(3), "divergence: {}", stderr(&out));
}

#[test]
fn two_stage_training_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = tiny_config(dir.path(), serde_json::json!({}));
    let data = p("data");
    assert!(mixmoe(&["gen-data", "--config", s(&cfg), "--out", s(&data)]).status.success());

    let out = mixmoe_env(
        &[
            "train", "--config", s(&cfg), "--data", s(&data), "--stage", "1", "--base-out", s(&p("base.ckpt")), "--out",
            s(&p("s1.ckpt")),
        ],
        &[("MIXMOE_THREADS", "3")],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("stage 1 finished at step 6"));
    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(p("s1.ckpt.run.json")).unwrap()).unwrap();
    assert_eq!(run["threads"], 3);
    assert_eq!(std::fs::read_to_string(p("s1.ckpt.losses.csv")).unwrap().lines().count(), 7);

    let out = mixmoe(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--stage", "2", "--init", s(&p("s1.ckpt")), "--out",
        s(&p("s2.ckpt")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    // A stage-2 checkpoint cannot seed another stage 2.
    let out = mixmoe(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--stage", "2", "--init", s(&p("s2.ckpt")), "--out",
        s(&p("bad.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lineage"), "{}", stderr(&out));

    // Zero steps leaves every inherited tensor untouched.
    let out = mixmoe(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--stage", "2", "--init", s(&p("s1.ckpt")), "--steps", "0",
        "--out", s(&p("s2_zero.ckpt")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let init = load_checkpoint(&p("s1.ckpt")).unwrap();
    let zero = load_checkpoint(&p("s2_zero.ckpt")).unwrap();
    assert_eq!(zero.meta.step, 0);
    for (id, name, t) in init.model.store.iter() {
        let other = zero.model.store.by_name(name).unwrap();
        assert_eq!(t.data(), other.data(), "{name}");
        assert_eq!(init.model.store.sha256(id), other.sha256());
    }

    let out = mixmoe(&[
        "eval", "--config", s(&cfg), "--data", s(&data), "--ckpt", s(&p("s2.ckpt")), "--mode", "bleu", "--out",
        s(&p("bleu.json")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bleu: serde_json::Value = serde_json::from_slice(&std::fs::read(p("bleu.json")).unwrap()).unwrap();
    assert!(bleu["overall"]["score"].is_number());

    let out = mixmoe(&[
        "eval", "--config", s(&cfg), "--ckpt", s(&p("s2.ckpt")), "--mode", "routes", "--out", s(&p("routes.csv")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = std::fs::read_to_string(p("routes.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, 2 * 2 * 4, "layers x groups x experts");

    let out = mixmoe(&[
        "eval", "--config", s(&cfg), "--ckpt", s(&p("s1.ckpt")), "--mode", "ppl", "--out", s(&p("ppl.json")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));

    let out = mixmoe(&[
        "eval", "--config", s(&cfg), "--ckpt", s(&p("s1.ckpt")), "--mode", "interference", "--out", s(&p("i.json")),
    ]);
    assert_eq!(out.status.code(), Some(2), "interference needs two checkpoints");

    let out = mixmoe(&[
        "eval", "--config", s(&cfg), "--ckpt", s(&p("s1.ckpt")), "--ckpt2", s(&p("s2.ckpt")), "--mode", "interference",
        "--out", s(&p("i.json")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let probe: serde_json::Value = serde_json::from_slice(&std::fs::read(p("i.json")).unwrap()).unwrap();
    assert!(probe["delta_mt_disabled"].as_f64().unwrap().abs() <= 1e-9);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = tiny_config(dir.path(), serde_json::json!({}));
    let full = mixmoe(&["train", "--config", s(&cfg), "--stage", "1", "--base-out", s(&p("base.ckpt")), "--out", s(&p("full.ckpt"))]);
    assert!(full.status.success(), "{}", stderr(&full));
    let part = mixmoe(&[
        "train", "--config", s(&cfg), "--stage", "1", "--init", s(&p("base.ckpt")), "--steps", "2", "--out",
        s(&p("part.ckpt")),
    ]);
    assert!(part.status.success(), "{}", stderr(&part));
    let rest = mixmoe(&["train", "--config", s(&cfg), "--stage", "1", "--resume", s(&p("part.ckpt")), "--out", s(&p("rest.ckpt"))]);
    assert!(rest.status.success(), "{}", stderr(&rest));
    assert_eq!(std::fs::read(p("full.ckpt")).unwrap(), std::fs::read(p("rest.ckpt")).unwrap());

    let wrong = mixmoe(&["train", "--config", s(&cfg), "--stage", "2", "--resume", s(&p("part.ckpt")), "--out", s(&p("w.ckpt"))]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn ablate_rejects_values_off_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), serde_json::json!({}));
    let out = mixmoe(&["ablate", "--config", s(&cfg), "--axis", "n_experts", "--values", "3", "--out", s(&dir.path().join("a.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = mixmoe(&["ablate", "--config", s(&cfg), "--axis", "depth", "--out", s(&dir.path().join("a.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}
