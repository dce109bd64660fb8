use std::path::Path;
use std::process::{Command, Output};

use rlpf::cli::apply_overrides;
use rlpf::pipeline::RunConfig;

fn rlpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlpf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = rlpf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_manifest_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen-data", "--count", "512", "--seed", "7", "--out", s(&a)]);
    ok(&["gen-data", "--count", "512", "--seed", "7", "--out", s(&b)]);
    let ma = std::fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(std::fs::read(a.join("mol_00511.xyz")).unwrap(), std::fs::read(b.join("mol_00511.xyz")).unwrap());
    let m = manifest(&a);
    assert_eq!(m["complete"], true);
    assert_eq!(m["details"]["files"].as_array().unwrap().len(), 512);
}

#[test]
fn usage_errors_exit_with_two() {
    let out = rlpf(&["gen-data", "--count", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rlpf(&["finetune", "--from", "x", "--out", "y", "--reward", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(rlpf(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn failures_emit_a_json_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{ "steps": 10, "learning_rate": 1e-3 }"#).unwrap();
    let out = rlpf(&["pretrain", "--config", s(&cfg), "--data", s(tmp.path()), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(line.trim().lines().last().unwrap()).unwrap();
    assert_eq!(v["kind"], "Config");
    assert!(v["error"].as_str().unwrap().contains("learning_rate"));

    let out = rlpf(&["sample", "--from", s(&tmp.path().join("missing.ckpt")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(v["kind"], "Io");
}

#[test]
fn overrides_reach_nested_fields() {
    let base = RunConfig::default();
    let c = apply_overrides(&base, &["optimizer.lr=3e-4".into(), "reward=valency".into(), "external_command=\"true\"".into()]).unwrap();
    assert_eq!(c.optimizer.lr, 3e-4);
    assert_eq!(c.reward, rlpf::reward::RewardKind::Valency);
    assert_eq!(c.external_command.as_deref(), Some("true"));
    assert!(apply_overrides(&base, &["optimizer.momentum=1".into()]).is_err());
    assert!(apply_overrides(&base, &["steps=many".into()]).is_err());
    assert!(apply_overrides(&base, &["steps".into()]).is_err());
}

#[test]
fn tiny_workflow_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let (data, pre, ft, abl) = (p("data"), p("pre"), p("ft"), p("abl"));
    ok(&["gen-data", "--count", "24", "--seed", "3", "--out", s(&data)]);
    let small = ["--steps", "10", "--hidden", "8", "--layers", "1"];
    let mut args = vec!["pretrain", "--data", s(&data), "--out", s(&pre), "--max-iters", "20", "--set", "pretrain.batch=8"];
    args.extend(small);
    ok(&args);
    assert_eq!(manifest(&p("pre"))["complete"], true);
    assert!(p("pre").join("loss.csv").exists());
    let ckpt = p("pre").join("pretrained.ckpt");

    let mut args = vec!["finetune", "--from", s(&ckpt), "--out", s(&ft), "--epochs", "2", "--trajectories", "4", "--minibatch", "16", "--no-early-stop"];
    args.extend(small);
    ok(&args);
    let metrics = std::fs::read_to_string(p("ft").join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    for col in [
        "schema_version", "epoch", "mean_reward", "molecule_stability", "atom_stability", "validity", "uniqueness", "novelty",
        "kl_to_pretrained", "clip_fraction",
    ] {
        assert!(header.split(',').any(|h| h == col), "{col}");
    }
    assert_eq!(metrics.lines().count(), 3);
    let resolved: RunConfig = serde_json::from_str(&std::fs::read_to_string(p("ft").join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved.epsilon, 0.2);
    assert_eq!(resolved.steps, 10);
    assert_eq!(manifest(&p("ft"))["complete"], true);

    ok(&["sample", "--from", s(&p("ft").join("final.ckpt")), "-n", "5", "--seed", "2", "--out", s(&p("samples"))]);
    assert!(p("samples").join("sample_00004.xyz").exists());
    ok(&["eval", "--samples", s(&p("samples")), "--train-hashes", s(&p("data")), "--out", s(&p("eval.csv"))]);
    let eval = std::fs::read_to_string(p("eval.csv")).unwrap();
    assert!(eval.starts_with("n_samples,"));
    ok(&["eval", "--samples", s(&p("samples")), "--train-hashes", s(&ckpt)]);

    ok(&["reject", "--from", s(&ckpt), "--threshold", "1000", "-n", "3", "--batch", "2", "--out", s(&p("rej.csv"))]);
    let rej = std::fs::read_to_string(p("rej.csv")).unwrap();
    assert_eq!(rej.lines().next().unwrap(), "time_s,molecules_sampled");

    let mut args = vec!["ablate-eps", "--from", s(&ckpt), "--out", s(&abl), "--values", "0.2,100", "--epochs", "1", "--trajectories", "4"];
    args.extend(small);
    ok(&args);
    for v in ["eps_0.2", "eps_100"] {
        assert!(p("abl").join(v).join("metrics.csv").exists());
    }
}

/// Every key and default of the shipped schema matches `RunConfig::default()`.
#[test]
fn schema_matches_defaults() {
    fn check(schema: &serde_json::Value, value: &serde_json::Value, path: &str) {
        let props = schema["properties"].as_object().unwrap();
        let obj = value.as_object().unwrap();
        let mut a: Vec<&String> = props.keys().collect();
        let mut b: Vec<&String> = obj.keys().collect();
        a.sort();
        b.sort();
        assert_eq!(a, b, "keys under {path}");
        for (k, v) in obj {
            let sub = &props[k];
            if v.is_object() {
                check(sub, v, &format!("{path}.{k}"));
            } else {
                assert_eq!(&sub["default"], v, "default of {path}.{k}");
            }
        }
    }
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.schema.json")).unwrap();
    let schema: serde_json::Value = serde_json::from_str(&text).unwrap();
    check(&schema, &serde_json::to_value(RunConfig::default()).unwrap(), "");
}
