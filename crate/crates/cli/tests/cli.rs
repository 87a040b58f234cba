use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nuca(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nuca"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("NUCA_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nuca(&["fly-to-moon"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fly-to-moon"));
}

#[test]
fn bad_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"machine": {"mesh_width": 1}}"#).unwrap();
    let o = nuca(&["profile", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mesh_width"));
}

#[test]
fn tampered_dram_latency_fails_the_timer_criterion_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"machine": {"lat_dram": 20}}"#).unwrap();
    let o = nuca(
        &[
            "reproduce-all",
            "--only",
            "1,7",
            "--check",
            "--config",
            cfg.to_str().unwrap(),
        ],
        dir.path(),
    );
    let text = stdout(&o);
    assert_eq!(o.status.code(), Some(1), "{text}");
    assert!(text.contains("FAIL criterion  7 prefetchw-timer"), "{text}");
    assert!(text.contains("PASS criterion  1 bank-mapping"), "{text}");

    let o = nuca(&["reproduce-all", "--only", "1,5,7", "--check"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let report = dir.path().join("reproduce-all/seed-1/report.json");
    let v: serde_json::Value = serde_json::from_slice(&fs::read(report).unwrap()).unwrap();
    assert_eq!(v["report"]["criteria"].as_array().unwrap().len(), 3);
    assert!(v["report"]["criteria"][0]["runtime_s"].is_number());
}

#[test]
fn same_seed_gives_byte_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = nuca(&["covert", "--reduced", "--seed", "5"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
        let o = nuca(
            &["toy-attack", "--reduced", "--seeds", "2..3", "--check"],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    }
    let files = [
        "covert/seed-5/covert.json",
        "covert/seed-5/covert.json.meta.json",
        "toy-attack/seed-2/toy_attack.json",
        "toy-attack/seed-3/toy_latency_histogram.csv",
    ];
    for f in files {
        let x = fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_slice(
        &fs::read(a.path().join("covert/seed-5/covert.json.meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["machine"]["rng_seed"], 5);
    assert_eq!(meta["params"]["bits"], 2000);
    // Different seeds give different data.
    assert_ne!(
        fs::read(a.path().join("toy-attack/seed-2/toy_latency_histogram.csv")).unwrap(),
        fs::read(a.path().join("toy-attack/seed-3/toy_latency_histogram.csv")).unwrap()
    );
}

#[test]
fn noc_sweep_csv_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let o = nuca(
        &["noc-sweep", "--rates", "0.01:0.2:0.01", "--check"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = fs::read_to_string(dir.path().join("noc-sweep/seed-1/noc_sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("rate,mean_latency,saturated"));
    let lat: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(lat.len(), 20);
    assert!(lat.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn aes_attack_accuracy_csv_ends_at_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = nuca(
        &[
            "aes-attack",
            "--reduced",
            "--keys",
            "2",
            "--trials",
            "1500",
            "--training-samples",
            "20000",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = fs::read_to_string(dir.path().join("aes-attack/seed-1/aes_accuracy.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("trials,accuracy"));
    assert_eq!(text.lines().last(), Some("1500,1.0"));
    let keys = fs::read_to_string(dir.path().join("aes-attack/seed-1/aes_keys.csv")).unwrap();
    // Keys and recovered words are hex.
    let row: Vec<&str> = keys.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0].len(), 32);
    assert_eq!(row[1], row[2]);
}
