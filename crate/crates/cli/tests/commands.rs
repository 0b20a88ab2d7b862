use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[workload]
prefill_len = 128
prefix_end = 16
retrieved_end = 96
page_size = 16
decode_len = 12
max_len = 12

[sweep]
budgets = 0.1,0.3,0.6
seeds = 0,1
";

fn sphkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphkv")).args(args).output().expect("binary runs")
}

fn setup(dir: &Path, extra: &str) -> String {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, format!("{SMALL}{extra}")).unwrap();
    cfg.to_str().unwrap().to_string()
}

fn out_arg(dir: &Path) -> String {
    dir.join("out").to_str().unwrap().to_string()
}

#[test]
fn calibrate_writes_monotone_table_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = out_arg(dir.path());
    assert!(sphkv(&["calibrate", "--config", &cfg, "--out", &out]).status.success());
    let first = fs::read(dir.path().join("out/calibration.csv")).unwrap();
    assert!(sphkv(&["calibrate", "--config", &cfg, "--out", &out]).status.success());
    assert_eq!(fs::read(dir.path().join("out/calibration.csv")).unwrap(), first);

    let text = String::from_utf8(first).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for pair in rows.windows(2) {
        assert!(pair[1][1] < pair[0][1] && pair[1][2] <= pair[0][2]);
    }
}

#[test]
fn lossless_tier_calibrates_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "\n[tiers]\ntier 0 0 0 0\ntier 1 53 53 16\n");
    assert!(sphkv(&["calibrate", "--config", &cfg, "--out", &out_arg(dir.path())]).status.success());
    let text = fs::read_to_string(dir.path().join("out/calibration.csv")).unwrap();
    let row: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!(row[1] <= 1e-9 && row[2] <= 1e-9);
}

fn summary_field(text: &str, key: &str) -> u64 {
    text.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing"))
        .parse::<f64>()
        .unwrap() as u64
}

#[test]
fn dense_rollout_has_no_code_streams() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let o = sphkv(&["rollout", "--config", &cfg, "--out", &out_arg(dir.path()), "--variant", "dense"]);
    assert!(o.status.success());
    let s = fs::read_to_string(dir.path().join("out/summary_dense.txt")).unwrap();
    assert_eq!(summary_field(&s, "k_codes_read"), 0);
    assert_eq!(summary_field(&s, "k_codes_write"), 0);
    assert!(summary_field(&s, "baseline_k_read") > 0);
    assert!(summary_field(&s, "values_read") > 0);
}

#[test]
fn lossless_angle_rollout_matches_dense_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "\n[tiers]\ntier 0 0 0 0\ntier 1 53 53 16\n\n[controller]\nbudget = 4\n");
    let out = out_arg(dir.path());
    assert!(sphkv(&["rollout", "--config", &cfg, "--out", &out, "--variant", "dense"]).status.success());
    assert!(sphkv(&["rollout", "--config", &cfg, "--out", &out, "--variant", "angle-only"]).status.success());
    let tokens = |name: &str| -> Vec<String> {
        fs::read_to_string(dir.path().join("out").join(name))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect()
    };
    assert_eq!(tokens("trace_angle-only.csv"), tokens("trace_dense.csv"));
    let s = fs::read_to_string(dir.path().join("out/summary_angle-only.txt")).unwrap();
    assert_eq!(summary_field(&s, "dense_k_read") + summary_field(&s, "dense_k_write"), 0);
    assert!(fs::read_to_string(dir.path().join("out/gate_angle-only.csv")).unwrap().starts_with("step,"));
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let o = sphkv(&["rollout", "--variant", "turbo"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn unknown_config_key_fails_closed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "\n[gate]\nsensitivity = 3\n");
    let o = sphkv(&["calibrate", "--config", &cfg, "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sensitivity"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn sweep_then_verify_round_trips_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = out_arg(dir.path());
    let o = sphkv(&["sweep", "--config", &cfg, "--out", &out, "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    for f in ["frontier.csv", "summary.csv", "runs.csv", "stability.csv", "config.txt"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let frontier = fs::read_to_string(dir.path().join("out/frontier.csv")).unwrap();
    assert_eq!(frontier.lines().next().unwrap(), "model,variant,L,budget_idx,b_kv,b_hbm,s,q,retained,on_envelope,is_star");

    // recon rows pay more traffic than joint rows at the same budget
    let rows: Vec<Vec<&str>> = frontier.lines().skip(1).map(|l| l.split(',').collect()).collect();
    for r in rows.iter().filter(|r| r[1] == "recon") {
        let joint = rows.iter().find(|j| j[1] == "joint" && j[3] == r[3]).unwrap();
        assert!(r[5].parse::<f64>().unwrap() > joint[5].parse::<f64>().unwrap());
    }

    let v = sphkv(&["verify", "--out", &out]);
    assert!(v.status.success());
    assert!(String::from_utf8_lossy(&v.stdout).contains("0 mismatches"));

    // flip one recorded flag: verification must fail with the invariant code
    let mut lines: Vec<String> = frontier.lines().map(str::to_string).collect();
    let last = lines.last_mut().unwrap();
    let flipped = if last.ends_with(",0") { "1" } else { "0" };
    last.truncate(last.len() - 1);
    last.push_str(flipped);
    let tampered = dir.path().join("tampered.csv");
    fs::write(&tampered, lines.join("\n") + "\n").unwrap();
    let v = sphkv(&["verify", "--out", &out, tampered.to_str().unwrap()]);
    assert_eq!(v.status.code(), Some(3));
}

#[test]
fn dense_only_sweep_has_unit_gammas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "variants = dense\n");
    assert!(sphkv(&["sweep", "--config", &cfg, "--out", &out_arg(dir.path())]).status.success());
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[2], row[3]), ("1", "1"));
}

#[test]
fn written_config_reparses_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "");
    let out = out_arg(dir.path());
    assert!(sphkv(&["calibrate", "--config", &cfg, "--out", &out, "--seed", "9"]).status.success());
    let written = dir.path().join("out/config.txt");
    let first = fs::read_to_string(&written).unwrap();
    assert!(first.contains("seed = 9"));
    let again = dir.path().join("again");
    let o = sphkv(&["calibrate", "--config", written.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    let second = fs::read_to_string(again.join("config.txt")).unwrap();
    assert_eq!(first.replace(&out, ""), second.replace(again.to_str().unwrap(), ""));
}
