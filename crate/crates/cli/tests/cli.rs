//! End-to-end drives of the `ecoate` binary: exit codes, config precedence,
//! reproducibility, and the multi-process federated run agreeing with the
//! in-process estimate byte for byte.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecoate::simlab::{replicate_rng, sample_replication};
use ecoate_cli::data::write_site_csv;

const XI: [&str; 3] = [
    "x1*log(y), x1*a*log(y)",
    "a*log(y)",
    "x1*a*log(y)",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecoate"))
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Drop four synthetic site tables (ids 0..3) into `dir`.
fn write_sites(dir: &Path, n: usize, epsilon: f64) -> Vec<PathBuf> {
    let mut rng = replicate_rng(99, 5);
    let sites = sample_replication(n, epsilon, &mut rng).unwrap();
    sites
        .iter()
        .map(|site| {
            let path = dir.join(format!("site{}.csv", site.site));
            write_site_csv(&path, site).unwrap();
            path
        })
        .collect()
}

#[test]
fn estimate_runs_on_site_tables() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_sites(dir.path(), 400, 0.5);
    let out = bin()
        .arg("estimate")
        .args(["--target", paths[0].to_str().unwrap()])
        .args(["--source", paths[1].to_str().unwrap(), "--xi", XI[0]])
        .args(["--source", paths[2].to_str().unwrap(), "--xi", XI[1]])
        .args(["--source", paths[3].to_str().unwrap(), "--xi", XI[2]])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_str(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout_str(&out)).unwrap();
    assert_eq!(report["estimator"], "eco-ate");
    assert_eq!(report["n_total"], 1600);
    let estimate = report["estimate"].as_f64().unwrap();
    let se = report["se"].as_f64().unwrap();
    assert!((estimate - 1.0).abs() < 0.5, "estimate {estimate}");
    assert!(se > 0.0 && se < 0.5, "se {se}");
    let log = stderr_str(&out);
    assert!(log.contains("[ecoate] build "), "missing build line: {log}");
    assert!(log.contains("\"command\":\"estimate\""), "missing config echo: {log}");
}

#[test]
fn usage_problems_exit_2() {
    let out = bin().args(["simulate", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().arg("estimate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"repz": 5}"#).unwrap();
    let out = bin()
        .args(["simulate", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_str(&out).contains("repz"));
}

#[test]
fn missing_input_exits_1() {
    let out = bin()
        .args(["report", "definitely-not-here.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr_str(&out));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"n": 2000, "reps": 2, "seed": 3, "estimators": ["aipw"]}"#,
    )
    .unwrap();
    let rows = dir.path().join("rows.csv");
    let out = bin()
        .args(["simulate", "--config", cfg.to_str().unwrap()])
        .args(["--n", "60", "--epsilon", "0"])
        .args(["--out", rows.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_str(&out));
    let log = stderr_str(&out);
    assert!(log.contains("\"n_per_site\":60"), "flag must win: {log}");
    assert!(log.contains("\"replications\":2"), "file value must apply: {log}");
    assert!(log.contains("\"seed\":3"), "seed must be logged: {log}");
    let body = std::fs::read_to_string(&rows).unwrap();
    assert_eq!(body.lines().count(), 1 + 2, "header plus one row per replication");
}

#[test]
fn simulate_output_is_bytewise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<u8> {
        let rows = dir.path().join(name);
        let out = bin()
            .args(["simulate", "--epsilon", "0.5", "--n", "60", "--reps", "3"])
            .args(["--seed", "11", "--estimators", "eco-ate-1,aipw", "--workers", "2"])
            .args(["--out", rows.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_str(&out));
        std::fs::read(&rows).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn report_emits_table_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let rows = dir.path().join("rows.csv");
    let out = bin()
        .args(["simulate", "--epsilon", "0", "--epsilon", "1", "--n", "60"])
        .args(["--reps", "3", "--seed", "4", "--estimators", "aipw,eco-ate-2"])
        .args(["--out", rows.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_str(&out));

    let out = bin()
        .args(["report", rows.to_str().unwrap(), "--truth", "1.0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_str(&out));
    let table = stdout_str(&out);
    assert!(table.contains("coverage"), "table: {table}");
    assert!(table.contains("eco-ate-2") && table.contains("aipw"));
    let svg = std::fs::read_to_string(dir.path().join("rows.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("eco-ate-2"));
}

#[test]
fn fed_run_processes_match_estimate_bytewise() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_sites(dir.path(), 250, 0.7);
    let run_dir = dir.path().join("wire");

    let mut sources = Vec::new();
    for (i, path) in paths[1..].iter().enumerate() {
        let child = bin()
            .args(["fed-run", "--role", "source"])
            .args(["--dir", run_dir.to_str().unwrap()])
            .args(["--data", path.to_str().unwrap()])
            .args(["--site-id", &(i + 1).to_string()])
            .args(["--xi", XI[i], "--timeout-secs", "60"])
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::piped())
            .spawn()
            .unwrap();
        sources.push(child);
    }
    let target = bin()
        .args(["fed-run", "--role", "target"])
        .args(["--dir", run_dir.to_str().unwrap()])
        .args(["--data", paths[0].to_str().unwrap()])
        .args(["--expect-sources", "1,2,3", "--timeout-secs", "60"])
        .output()
        .unwrap();
    assert_eq!(
        target.status.code(),
        Some(0),
        "target stderr: {}",
        stderr_str(&target)
    );
    for child in sources {
        let out = child.wait_with_output().unwrap();
        assert_eq!(out.status.code(), Some(0), "source stderr: {}", stderr_str(&out));
    }

    let solo = bin()
        .arg("estimate")
        .args(["--target", paths[0].to_str().unwrap()])
        .args(["--source", paths[1].to_str().unwrap(), "--xi", XI[0]])
        .args(["--source", paths[2].to_str().unwrap(), "--xi", XI[1]])
        .args(["--source", paths[3].to_str().unwrap(), "--xi", XI[2]])
        .output()
        .unwrap();
    assert_eq!(solo.status.code(), Some(0), "stderr: {}", stderr_str(&solo));
    assert_eq!(
        stdout_str(&target),
        stdout_str(&solo),
        "multi-process federated report must equal the in-process report"
    );
}
