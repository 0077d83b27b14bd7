//! End-to-end runs of the `evpool` binary on a tiny grid.

use std::path::Path;
use std::process::Command;

use serde_json::Value;

const TINY: &str = r#"
seed = 4
policy = "itx"
warmup_days = 0.02
run_days = 0.08
charging_enabled = CHARGING

[network.grid]
rows = 5
cols = 5
spacing_m = 400.0

[demand.synthetic]
base_rate = 1.5
seed = 9

[[fleet]]
preset = "leaf"
count = 4

[[fleet]]
preset = "model3"
count = 2

[chargers]
count = 2
seed = 3
"#;

fn evpool(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_evpool"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    out
}

fn ok(args: &[&str]) -> String {
    let out = evpool(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, charging: bool) -> String {
    let p = dir.join(name);
    std::fs::write(&p, TINY.replace("CHARGING", &charging.to_string())).unwrap();
    p.to_str().unwrap().to_string()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_run_files_and_compare_tabulates_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", true);
    let a = dir.path().join("itx");
    let b = dir.path().join("qn");
    ok(&["simulate", &cfg, "--out", s(&a)]);
    ok(&["simulate", &cfg, "--policy", "qn", "--out", s(&b)]);
    for d in [&a, &b] {
        for f in ["summary.json", "metrics.csv", "events.jsonl", "runtime.csv", "manifest.json"] {
            assert!(d.join(f).is_file(), "{} missing in {}", f, d.display());
        }
    }
    assert_eq!(summary(&a)["policy"], "itx");
    assert!(summary(&a)["served"].as_u64().unwrap() > 0);
    assert_eq!(summary(&b)["policy"], "qn");
    let table = ok(&["compare", s(&a), s(&b)]);
    assert!(table.lines().count() >= 3);
    assert!(table.contains("itx") && table.contains("qn"));
    assert!(!table.contains("WARNING"));
}

#[test]
fn generated_scenario_reproduces_the_synthetic_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", true);
    let gen = dir.path().join("gen");
    ok(&["generate", &cfg, "--out", s(&gen)]);
    for f in ["network.graphml", "trips.pre.csv", "stations.csv", "scenario.toml"] {
        assert!(gen.join(f).is_file(), "{f} missing");
    }
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["simulate", &cfg, "--out", s(&a)]);
    ok(&["simulate", s(&gen.join("scenario.toml")), "--out", s(&b)]);
    let (x, y) = (summary(&a), summary(&b));
    for k in ["reward_cents", "served", "rejected", "arrived"] {
        assert_eq!(x[k], y[k], "{k}");
    }
}

#[test]
fn charger_sweep_makes_one_directory_per_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", true);
    let out = dir.path().join("sweep");
    ok(&["simulate", &cfg, "--chargers", "1,3", "--out", s(&out)]);
    for k in [1, 3] {
        assert!(out.join(format!("chargers-{k}")).join("summary.json").is_file());
    }
}

#[test]
fn samples_feed_a_table_that_itx_can_use() {
    let dir = tempfile::tempdir().unwrap();
    let free = write_config(dir.path(), "free.toml", false);
    let samples = dir.path().join("samples").join("s.bin");
    ok(&["logsamples", &free, "--out", s(&samples)]);
    assert!(samples.is_file());
    let table = dir.path().join("table.bin");
    ok(&["buildtable", s(&samples), "--out", s(&table)]);

    let text = TINY.replace("CHARGING", "true") + "\n[predictor]\nkind = \"table\"\npath = \"table.bin\"\n";
    let cfg = dir.path().join("with-table.toml");
    std::fs::write(&cfg, text).unwrap();
    let run = dir.path().join("run");
    ok(&["simulate", s(&cfg), "--out", s(&run)]);
    assert_eq!(summary(&run)["policy"], "itx");
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let charging = write_config(dir.path(), "c.toml", true);
    let out = evpool(&["logsamples", &charging, "--out", s(&dir.path().join("x.bin"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("charging-free"));

    let out = evpool(&["simulate", s(&dir.path().join("missing.toml"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = evpool(&["simulate", &charging, "--policy", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}
