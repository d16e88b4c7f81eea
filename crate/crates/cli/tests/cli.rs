use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn fairfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairfed"))
        .args(args)
        .env("FAIRFED_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fairfed(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, train: &str) -> std::path::PathBuf {
    let text = format!(
        r#"
[data]
train = "{train}"
schema = "synthetic"
[federation]
clients = 3
clients_per_round = 3
rounds = 3
[privacy]
enabled = true
noise_multiplier = 1.0
[model]
hidden = [8]
[training]
batch_size = 32
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.csv");
    ok(&["gen-synth", "--rows", "600", "--bias", "1.0", "--seed", "3", "--out", s(&data)]);
    let cfg = write_config(dir.path(), "synth.csv");
    (dir, cfg)
}

#[test]
fn gen_synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    ok(&["gen-synth", "--rows", "50", "--seed", "9", "--out", s(&a)]);
    ok(&["gen-synth", "--rows", "50", "--seed", "9", "--out", s(&b)]);
    ok(&["gen-synth", "--rows", "50", "--seed", "10", "--out", s(&c)]);
    let a = std::fs::read(a).unwrap();
    assert_eq!(a, std::fs::read(b).unwrap());
    assert_ne!(a, std::fs::read(c).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let (dir, cfg) = setup();
    let one = dir.path().join("one");
    let two = dir.path().join("two");
    ok(&["run", "--config", s(&cfg), "--out", s(&one), "--seed", "5"]);
    ok(&["run", "--config", s(&cfg), "--out", s(&two), "--seed", "5"]);
    let m1 = std::fs::read(one.join("metrics.csv")).unwrap();
    assert_eq!(m1, std::fs::read(two.join("metrics.csv")).unwrap());
    let header = String::from_utf8(m1).unwrap().lines().next().unwrap().to_owned();
    assert!(header.starts_with("round,client,acc_overall,"), "{header}");
    assert!(header.ends_with("demp_error,eo_error,di_error"), "{header}");
    assert!(one.join("model.ckpt").is_file());
}

#[test]
fn existing_run_needs_overwrite() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(&["run", "--config", s(&cfg), "--out", s(&out)]);
    let again = fairfed(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("overwrite"));
    ok(&["run", "--config", s(&cfg), "--out", s(&out), "--overwrite"]);
}

#[test]
fn manifest_records_the_full_config() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(&["run", "--config", s(&cfg), "--out", s(&out), "--seed", "11"]);
    let manifest: toml::Table = std::fs::read_to_string(out.join("manifest.toml")).unwrap().parse().unwrap();
    let config = manifest["config"].as_table().unwrap();
    let defaults: toml::Table = toml::to_string(&fairfed::config::ExperimentConfig::default())
        .unwrap()
        .parse()
        .unwrap();
    for (section, body) in &defaults {
        let Some(body) = body.as_table() else { continue };
        for key in body.keys() {
            // optional tables and the either-or noise setting are checked below
            if section == "data" || (section == "output" && key == "dir") || (section == "privacy" && key == "epsilon") {
                continue;
            }
            assert!(
                config.get(section).and_then(|t| t.get(key)).is_some(),
                "config.{section}.{key} missing from manifest"
            );
        }
    }
    for key in ["train", "schema"] {
        assert!(config["data"].get(key).is_some(), "config.data.{key} missing");
    }
    assert_eq!(config["training"]["seed"].as_integer(), Some(11));
    assert_eq!(config["privacy"].get("epsilon"), None);
    assert_eq!(config["privacy"]["noise_multiplier"].as_float(), Some(1.0));
    assert!(manifest.contains_key("run"));
}

#[test]
fn paired_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.csv");
    ok(&["gen-synth", "--rows", "2500", "--seed", "1", "--out", s(&data)]);
    let cfg = write_config(dir.path(), "synth.csv");
    std::fs::write(
        &cfg,
        std::fs::read_to_string(&cfg)
            .unwrap()
            .replace("clients = 3\nclients_per_round = 3\nrounds = 3", "clients = 5\nclients_per_round = 5\nrounds = 10")
            .replace("hidden = [8]", "hidden = [100, 100, 100]"),
    )
    .unwrap();
    let out = dir.path().join("paired");
    let start = Instant::now();
    ok(&["run", "--config", s(&cfg), "--out", s(&out), "--paired-privacy"]);
    assert!(start.elapsed() < Duration::from_secs(60), "paired run took {:?}", start.elapsed());
    for file in ["privacy-on/metrics.csv", "privacy-off/metrics.csv", "comparison.csv", "plot_data.csv", "final_accuracy.csv"] {
        assert!(out.join(file).is_file(), "{file} missing");
    }

    let report = dir.path().join("report");
    ok(&["report", "--runs", s(&out.join("privacy-on")), s(&out.join("privacy-off")), "--out", s(&report)]);
    for file in ["comparison.csv", "plot_data.csv", "final_accuracy.csv"] {
        assert_eq!(
            std::fs::read(report.join(file)).unwrap(),
            std::fs::read(out.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[data]\ntrain = \"x.csv\"\n[federation]\nround = 2\n").unwrap();
    let out = fairfed(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("round"));

    std::fs::write(&cfg, "[data]\ntrain = \"missing.csv\"\n").unwrap();
    let out = fairfed(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.train"));

    let out = fairfed(&["report", "--runs", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
}
