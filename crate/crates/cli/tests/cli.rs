use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "data": {"synth": {"persons": 24, "samples_per_person": 12}},
  "folds": 3,
  "pretrain": {"epochs": 6},
  "adapt": {"epochs": 6},
  "stratifier": {"variant": "pca"},
  "landscape": {"grid_n": 3},
  "seeds": [1]
}"#;

fn flare(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flare"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn flare")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = setup();
    assert_eq!(code(&flare(dir.path(), &[])), 1);
    assert_eq!(code(&flare(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&flare(dir.path(), &["run", "--mode", "nope"])), 1);
    assert_eq!(code(&flare(dir.path(), &["eval", "--checkpoint", "c.json", "--models", "m.json"])), 1);
    assert_eq!(code(&flare(dir.path(), &["--help"])), 0);
}

#[test]
fn invalid_inputs_exit_with_one() {
    let dir = setup();
    fs::write(dir.path().join("bad.json"), r#"{"folds": 1}"#).unwrap();
    assert_eq!(code(&flare(dir.path(), &["run", "--config", "bad.json"])), 1);
    fs::write(dir.path().join("unknown.json"), r#"{"fold": 3}"#).unwrap();
    assert_eq!(code(&flare(dir.path(), &["synth", "--config", "unknown.json"])), 1);
    fs::write(dir.path().join("bad.csv"), "a,b\n1,2\n").unwrap();
    let o = flare(dir.path(), &["pretrain", "--config", "cfg.json", "--data", "bad.csv"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("person_id"));
}

#[test]
fn overflowing_features_exit_with_two() {
    let dir = setup();
    assert_eq!(code(&flare(dir.path(), &["synth", "--config", "cfg.json", "--out", "s"])), 0);
    let text = fs::read_to_string(dir.path().join("s/dataset.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let col = header.split(',').position(|h| h == "x0").unwrap();
    let mut out = format!("{header}\n");
    for l in lines {
        let mut f: Vec<&str> = l.split(',').collect();
        f[col] = "1e300";
        out.push_str(&f.join(","));
        out.push('\n');
    }
    fs::write(dir.path().join("huge.csv"), out).unwrap();
    let o = flare(dir.path(), &["pretrain", "--config", "cfg.json", "--data", "huge.csv"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn staged_verbs_chain() {
    let dir = setup();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = flare(d, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };
    ok(&["synth", "--config", "cfg.json", "--out", "s"]);
    for f in ["dataset.csv", "folds.json", "summary.json"] {
        assert!(d.join("s").join(f).exists());
    }
    let data = ["--config", "cfg.json", "--data", "s/dataset.csv", "--fold", "1"];
    let with = |verb: &str, rest: &[&str]| -> Vec<String> {
        let mut v = vec![verb.to_string()];
        v.extend(data.iter().map(|s| s.to_string()));
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    };
    let run = |v: Vec<String>| ok(&v.iter().map(String::as_str).collect::<Vec<_>>());

    run(with("pretrain", &["--out", "p"]));
    assert!(d.join("p/checkpoint.json").exists() && d.join("p/history.csv").exists());
    run(with("cluster", &["--checkpoint", "p/checkpoint.json", "--out", "c"]));
    assert!(d.join("c/stratifier.json").exists());
    run(with(
        "adapt",
        &["--checkpoint", "p/checkpoint.json", "--stratifier", "c/stratifier.json", "--out", "a"],
    ));
    let log = fs::read_to_string(d.join("a/adoption_log.csv")).unwrap();
    assert!(log.starts_with("epoch,cluster,adopted,f1_before,f1_after"));
    run(with("eval", &["--checkpoint", "p/checkpoint.json", "--out", "eb"]));
    run(with(
        "eval",
        &[
            "--checkpoint",
            "p/checkpoint.json",
            "--stratifier",
            "c/stratifier.json",
            "--models",
            "a/cluster_models.json",
            "--mode",
            "flare",
            "--out",
            "ef",
        ],
    ));
    let table = ok(&[
        "bhe",
        "--base",
        "eb/predictions.csv",
        "--cand",
        "ef/predictions.csv",
        "--out",
        "b",
    ]);
    assert!(table.contains("group_proxy") && table.contains("noisy_proxy"));
    let out = run(with("landscape", &["--checkpoint", "p/checkpoint.json", "--out", "l"]));
    assert!(out.contains("center loss"));
    assert_eq!(
        fs::read_to_string(d.join("l/landscape_bpt_w_fisher.csv")).unwrap().lines().count(),
        10
    );
}

#[test]
fn run_writes_reports() {
    let dir = setup();
    let o = flare(dir.path(), &["run", "--config", "cfg.json", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = dir.path().join("r");
    for f in [
        "report.json",
        "bhe.csv",
        "bhe_flare.csv",
        "fold_cluster_delta.csv",
        "predictions.csv",
        "timing.json",
        "manifest.json",
        "landscape_benign.csv",
        "landscape_flare.csv",
    ] {
        assert!(r.join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(r.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 1);
    assert!(report["failures"].as_array().unwrap().is_empty());
}
