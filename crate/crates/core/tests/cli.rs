//! End-to-end tests of the `saeplan` binary: exit codes, file outputs,
//! audit headers, and byte-identical reruns.

use std::path::Path;
use std::process::{Command, Output};

fn saeplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saeplan"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, body: &str) {
    std::fs::write(dir.join("saeplan.toml"), body).unwrap();
}

fn synth_bundle(dir: &Path) {
    let out = saeplan(
        dir,
        &[
            "synth",
            "--areas",
            "16",
            "--groups",
            "2",
            "--rates",
            "0.2,0.35",
            "--headcount-min",
            "6000",
            "--headcount-max",
            "12000",
            "--seed",
            "5",
            "--out",
            "data",
        ],
    );
    assert_eq!(
        code(&out),
        0,
        "synth failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const BASE_CONFIG: &str = r#"
[paths]
population = "data/population.csv"
covariates = "data/covariates.csv"
adjacency = "data/adjacency.csv"
out_dir = "out"

[run]
master_seed = 12
jobs = 1

[fit]
fraction = 0.03

[ssd]
f_a = 0.01
f_b = 0.08
h = 0.02
replications = 6
gamma = 0.2
pilot_fraction = 0.02
deffs = [1.16, 1.44]

[sim]
scenarios = ["S1", "S2"]
fractions = [0.03]
replications = 4
"#;

#[test]
fn validate_reports_summary_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path());
    write_config(dir.path(), BASE_CONFIG);
    let out = saeplan(dir.path(), &["validate"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.contains("16 areas x 2 groups"));
    assert!(stdout.contains("eligible cells"));
    assert!(stdout.contains("validation clean"));
}

#[test]
fn validate_missing_file_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path());
    write_config(
        dir.path(),
        &BASE_CONFIG.replace("data/adjacency.csv", "data/nonexistent.csv"),
    );
    let out = saeplan(dir.path(), &["validate"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent.csv"));
}

#[test]
fn validate_bad_cell_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path());
    // corrupt one row: Y > N
    let pop_path = dir.path().join("data/population.csv");
    let text = std::fs::read_to_string(&pop_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let broken = {
        let fields: Vec<&str> = lines[2].split(',').collect();
        format!(
            "{},{},{},{}",
            fields[0],
            fields[1],
            fields[2],
            fields[2].parse::<u64>().unwrap() + 1
        )
    };
    lines[2] = broken;
    std::fs::write(&pop_path, lines.join("\n")).unwrap();

    write_config(dir.path(), BASE_CONFIG);
    let out = saeplan(dir.path(), &["validate"]);
    assert_eq!(code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Y ="), "stderr: {stderr}");
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = saeplan(dir.path(), &["frobnicate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn dry_run_estimates_cost_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path());
    write_config(dir.path(), BASE_CONFIG);
    let out = saeplan(dir.path(), &["ssd", "--dry-run"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("dry run"), "{stdout}");
    assert!(
        !dir.path().join("out").exists(),
        "dry run must not write files"
    );

    let out = saeplan(dir.path(), &["simulate", "--dry-run"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("model fits"), "{stdout}");
}

#[test]
fn fit_writes_posterior_and_suppression_reports() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path());
    write_config(dir.path(), BASE_CONFIG);
    let out = saeplan(dir.path(), &["fit"]);
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cells = std::fs::read_to_string(dir.path().join("out/fit_cells.csv")).unwrap();
    let mut lines = cells.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("# saeplan fit config_hash="));
    assert_eq!(
        lines.next().unwrap(),
        "group_id,area_id,post_mean,post_sd,rse"
    );
    assert_eq!(cells.lines().count(), 2 + 32);
    let sup = std::fs::read_to_string(dir.path().join("out/fit_suppression.csv")).unwrap();
    assert!(sup
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("group_id,area_id,post_mean,rse,eligible"));
}

#[test]
fn ssd_outputs_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path());
    write_config(dir.path(), BASE_CONFIG);

    let out = saeplan(dir.path(), &["ssd"]);
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace1 = std::fs::read(dir.path().join("out/ssd_trace.csv")).unwrap();
    let summary1 = std::fs::read(dir.path().join("out/ssd_summary.json")).unwrap();

    let out = saeplan(dir.path(), &["ssd"]);
    assert_eq!(code(&out), 0);
    let trace2 = std::fs::read(dir.path().join("out/ssd_trace.csv")).unwrap();
    let summary2 = std::fs::read(dir.path().join("out/ssd_summary.json")).unwrap();
    assert_eq!(trace1, trace2);
    assert_eq!(summary1, summary2);

    // header carries the audit line; summary carries planning numbers
    let text = String::from_utf8(trace1).unwrap();
    assert!(text.starts_with("# saeplan ssd config_hash="));
    let summary: serde_json::Value = serde_json::from_slice(&summary1).unwrap();
    assert!(summary["recommended_fraction"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["actual_sizes"].as_array().unwrap().len(), 2);

    // a different seed changes the outputs
    let out = saeplan(dir.path(), &["ssd", "--seed", "999"]);
    assert_eq!(code(&out), 0);
    let trace3 = std::fs::read(dir.path().join("out/ssd_trace.csv")).unwrap();
    assert_ne!(trace2, trace3);
}

#[test]
fn simulate_writes_a_table_pair_per_scenario_fraction() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path());
    write_config(
        dir.path(),
        &BASE_CONFIG
            .replace(
                "scenarios = [\"S1\", \"S2\"]",
                "scenarios = [\"S1\", \"S2\", \"S3\", \"S4\"]",
            )
            .replace("fractions = [0.03]", "fractions = [0.02, 0.04]"),
    );
    let out = saeplan(dir.path(), &["simulate"]);
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let files: Vec<_> = std::fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    // 4 scenarios x 2 fractions = 8 metric tables, each a cells+groups pair
    let cells = files.iter().filter(|f| f.starts_with("sim_cells_")).count();
    let groups = files
        .iter()
        .filter(|f| f.starts_with("sim_groups_"))
        .count();
    assert_eq!(cells, 8, "files: {files:?}");
    assert_eq!(groups, 8, "files: {files:?}");
}

#[test]
fn simulate_s1_only_needs_no_model_inputs() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path());
    // population only; no covariates or adjacency paths
    write_config(
        dir.path(),
        r#"
[paths]
population = "data/population.csv"
out_dir = "out"

[run]
master_seed = 3
jobs = 1

[sim]
scenarios = ["S1"]
fractions = [0.05]
replications = 5
"#,
    );
    let out = saeplan(dir.path(), &["simulate"]);
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("out/sim_cells_s1_f0p05.csv").exists());
}

#[test]
fn low_replication_count_warns_against_gamma() {
    let dir = tempfile::tempdir().unwrap();
    synth_bundle(dir.path());
    write_config(
        dir.path(),
        &BASE_CONFIG
            .replace("gamma = 0.2", "gamma = 0.01")
            .replace("replications = 6", "replications = 10"),
    );
    let out = saeplan(dir.path(), &["ssd", "--dry-run"]);
    assert_eq!(code(&out), 0);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("order of magnitude"), "stderr: {stderr}");
}
