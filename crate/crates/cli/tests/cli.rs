use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 9
members = 5000
t_max = 2.0
[output]
spacing = 0.1
[step]
dt = 0.002
[model]
preset = "two_level"
initial = "superposition"
delta = { kind = "damped_oscillation", amplitude = 1.0, decay = 0.25, frequency = 2.0 }
"#;

fn nmqj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmqj"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn identical_seeds_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = nmqj(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["timeseries.csv", "events.jsonl", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let c = dir.path().join("c");
    let o = nmqj(&["run", "--config", &cfg, "--out", c.to_str().unwrap(), "--seed", "10"]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(a.join("events.jsonl")).unwrap(),
        fs::read(c.join("events.jsonl")).unwrap()
    );
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("seed = 9", ""));
    let o = nmqj(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed required"));

    let o = nmqj(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn every_mode_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let cases: [(&str, &[&str]); 4] = [
        ("trajectory", &["trajectory.csv", "trajectory_events.jsonl", "summary.json"]),
        ("oracle", &["oracle.csv", "timing.json"]),
        ("compare", &["compare.json", "oracle.csv", "timeseries.csv"]),
        ("bench", &["bench.csv", "bench.json"]),
    ];
    for (mode, files) in cases {
        let out = dir.path().join(mode);
        let mut args = vec![mode, "--config", &cfg, "--out", out.to_str().unwrap()];
        if mode == "bench" {
            args.extend(["--members", "100,200"]);
        }
        let o = nmqj(&args);
        assert!(o.status.success(), "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files {
            assert!(out.join(f).exists(), "{mode}: {f}");
        }
    }
}

#[test]
fn strict_orphan_policy_aborts_and_permissive_continues() {
    // negative rate from t = 0 with only |e> populated: the reverse channel has no source
    let text = CONFIG
        .replace("initial = \"superposition\"", "initial = \"excited\"")
        .replace(
            "{ kind = \"damped_oscillation\", amplitude = 1.0, decay = 0.25, frequency = 2.0 }",
            "{ kind = \"constant\", value = -0.5 }",
        );
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().to_str().unwrap();
    let o = nmqj(&["run", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unraveling breakdown"));
    let o = nmqj(&["run", "--config", &cfg, "--out", out, "--permissive"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
