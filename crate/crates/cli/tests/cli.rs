use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn pdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdd")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn put(dir: &Path, name: &str, v: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a bicubic and a pseudo-real dataset of `count` 16x16 images.
fn datasets(dir: &Path, count: usize) -> (PathBuf, PathBuf) {
    let bic = put(dir, "bic.json", json!({"procedural": {"count": count, "height": 16, "width": 16, "seed": 1}, "domain": "D_S"}));
    let pr = put(dir, "pr.json", json!({"procedural": {"count": count, "height": 16, "width": 16, "seed": 2}, "domain": "pseudo_real"}));
    let (a, b) = (dir.join("bic"), dir.join("pr"));
    assert_eq!(code(&pdd(&["synth", "--config", s(&bic), "--out", s(&a)])), 0);
    assert_eq!(code(&pdd(&["synth", "--config", s(&pr), "--out", s(&b)])), 0);
    (a, b)
}

fn train_config(dir: &Path, bic: &Path, pr: &Path) -> PathBuf {
    put(
        dir,
        "train.json",
        json!({
            "batch_size": 2,
            "lr_size": 4,
            "generator": {"scale": 4, "channels": 8, "growth": 4, "blocks": 1},
            "discriminator": {"channels": 4},
            "checkpoint_every": 1,
            "data": {"labeled": bic.join("manifest.json"), "unlabeled": pr.join("lr"), "val": bic.join("manifest.json")}
        }),
    )
}

#[test]
fn help_lists_every_flag() {
    let o = pdd(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--config", "--out", "--seed", "--mode", "--iters"] {
        assert!(text.contains(flag), "{flag} missing from:\n{text}");
    }
    let top = String::from_utf8_lossy(&pdd(&["--help"]).stdout).to_string();
    for cmd in ["synth", "train", "eval", "analyze", "gradcheck"] {
        assert!(top.contains(cmd));
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&pdd(&["frobnicate"])), 2);
    assert_eq!(code(&pdd(&["synth", "--out", "x"])), 2);
    assert_eq!(code(&pdd(&["synth", "--config", "/nonexistent.json", "--out", s(dir.path())])), 2);
    let typo = put(dir.path(), "typo.json", json!({"procedural": {"count": 1, "height": 8, "width": 8}, "domian": "D_S"}));
    let o = pdd(&["synth", "--config", s(&typo), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("domian"));
    let both = put(dir.path(), "both.json", json!({"hr_dir": "x", "procedural": {"count": 1, "height": 8, "width": 8}, "domain": "D_S"}));
    assert_eq!(code(&pdd(&["synth", "--config", s(&both), "--out", s(&dir.path().join("o"))])), 2);
    let t = put(dir.path(), "t.json", json!({"batchsize": 2}));
    assert_eq!(code(&pdd(&["train", "--config", s(&t), "--out", s(&dir.path().join("t"))])), 2);
    let t = put(dir.path(), "t2.json", json!({}));
    assert_eq!(code(&pdd(&["train", "--config", s(&t), "--mode", "pdd", "--out", s(&dir.path().join("t"))])), 2);
    assert!(!dir.path().join("o").join(".pdd.lock").exists());
}

#[test]
fn synth_is_reproducible_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let c = put(dir.path(), "g.json", json!({"procedural": {"count": 3, "height": 16, "width": 16}, "domain": "D_G", "seed": 5}));
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["synth", "--config", s(&c), "--out", s(&out)];
        args.extend_from_slice(extra);
        assert_eq!(code(&pdd(&args)), 0);
        (0..3).map(|i| fs::read(out.join(format!("lr/img_{i:04}.png"))).unwrap()).collect::<Vec<_>>()
    };
    let a = run("a", &[]);
    assert_eq!(a, run("b", &[]));
    assert_ne!(a, run("c", &["--seed", "6"]));
    assert!(dir.path().join("a/manifest.json").exists());
    assert!(!dir.path().join("a/.pdd.lock").exists());
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let c = put(dir.path(), "c.json", json!({"procedural": {"count": 1, "height": 8, "width": 8}, "domain": "D_S"}));
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".pdd.lock"), "1").unwrap();
    let o = pdd(&["synth", "--config", s(&c), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lock"));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (bic, pr) = datasets(dir.path(), 8);
    let tc = train_config(dir.path(), &bic, &pr);
    let run = dir.path().join("run");
    let o = pdd(&["train", "--config", s(&tc), "--mode", "pdd_ema", "--iters", "2", "--seed", "3", "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["ckpt_000001.bin", "ckpt_000001.json", "ckpt_000002.bin", "log.jsonl", "config.json", "status.json", "eval_summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!((saved["total_iters"].as_u64(), saved["halve_at"].as_u64(), saved["seed"].as_u64()), (Some(2), Some(1), Some(3)));
    assert_eq!(saved["mode"], "pdd_ema");

    // same config and seed → same loss trajectory
    let again = dir.path().join("again");
    assert_eq!(code(&pdd(&["train", "--config", s(&tc), "--iters", "2", "--seed", "3", "--out", s(&again)])), 0);
    assert_eq!(fs::read_to_string(run.join("log.jsonl")).unwrap(), fs::read_to_string(again.join("log.jsonl")).unwrap());

    let ec = put(dir.path(), "eval.json", json!({"checkpoint": run.join("ckpt_000002.bin"), "manifest": pr.join("manifest.json"), "color_correction": true}));
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    assert_eq!(code(&pdd(&["eval", "--config", s(&ec), "--out", s(&e1)])), 0);
    assert_eq!(code(&pdd(&["eval", "--config", s(&ec), "--out", s(&e2)])), 0);
    assert_eq!(fs::read(e1.join("report.json")).unwrap(), fs::read(e2.join("report.json")).unwrap());

    let ac = put(
        dir.path(),
        "analyze.json",
        json!({"before": run.join("ckpt_000001.bin"), "after": run.join("ckpt_000002.bin"), "labeled": bic.join("manifest.json"), "unlabeled": pr.join("lr")}),
    );
    let an = dir.path().join("an");
    let o = pdd(&["analyze", "--config", s(&ac), "--out", s(&an)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let body: serde_json::Value = serde_json::from_str(&fs::read_to_string(an.join("analysis.json")).unwrap()).unwrap();
    assert!(body["before"]["kl"].as_f64().unwrap() >= 0.0 && body["after"]["kl"].as_f64().is_some());
    assert!(fs::read_to_string(an.join("projection.svg")).unwrap().starts_with("<svg"));

    let missing = put(dir.path(), "bad_eval.json", json!({"checkpoint": dir.path().join("nope.bin"), "manifest": pr.join("manifest.json")}));
    assert_eq!(code(&pdd(&["eval", "--config", s(&missing), "--out", s(&dir.path().join("e3"))])), 1);
}

#[test]
fn bicubic_eval_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (bic, _) = datasets(dir.path(), 2);
    let ec = put(dir.path(), "e.json", json!({"manifest": bic.join("manifest.json"), "role": "bicubic"}));
    let out = dir.path().join("e");
    assert_eq!(code(&pdd(&["eval", "--config", s(&ec), "--out", s(&out)])), 0);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["model_id"], "bicubic");
    assert_eq!(r["images"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = pdd(&["gradcheck", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.ends_with("PASS")).count(), 6);
}
