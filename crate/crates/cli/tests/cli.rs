use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbsde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"];
    args.extend_from_slice(extra);
    fbsde(&args)
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn total_violations(report: &Value) -> u64 {
    report["conditions"]["inequalities"]
        .as_array()
        .unwrap()
        .iter()
        .map(|entry| entry["violations"].as_u64().unwrap())
        .sum()
}

#[test]
fn hand_forward_lq_config_reports_the_closed_form_optimum() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let output = run(&configs().join("flq_hand.toml"), &out, &[]);
    assert!(output.status.success(), "{}", stderr(&output));
    let report = report(&out);
    assert_eq!(report["schema"], "fbsde-report/1");
    assert_eq!(report["status"], "ok");
    let quantities = &report["solution"]["quantities"];
    let initial = quantities["initial_state[0]"].as_f64().unwrap();
    let cost = quantities["cost"].as_f64().unwrap();
    assert!((initial + 1.0 / 3.0).abs() < 1e-10, "initial state {initial}");
    assert!((cost - 1.0 / 6.0).abs() < 1e-10, "cost {cost}");
    assert!(report["optimality"]["min_comparison_gap"].as_f64().unwrap() >= -1e-10);
    assert!(report["residual"]["overall"].as_f64().unwrap() <= report["residuals"]["bound"].as_f64().unwrap());
    assert!(out.join("trajectories.csv").exists());
    assert!(out.join("diagnostics.csv").exists());
}

#[test]
fn check_mode_on_the_built_in_family_finds_no_violations() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let output = run(&configs().join("check_family.toml"), &out, &[]);
    assert!(output.status.success(), "{}", stderr(&output));
    let report = report(&out);
    assert_eq!(report["conditions"]["samples"], 10_000);
    assert_eq!(total_violations(&report), 0);
    let table = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(table.starts_with("inequality,evaluated,violations,worst_slack\n"));
}

#[test]
fn negated_family_fails_the_standard_check() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        &dir,
        "negated.toml",
        "mode = \"check\"\nseed = 7\n[topology]\nhorizon = 3\n\
         [coefficients.family]\ndim = 2\nrows = 2\ncase = \"mu\"\nnegate = true\n[check]\nsamples = 2000\n",
    );
    let out = dir.path().join("out");
    let output = run(&config, &out, &[]);
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(total_violations(&report(&out)) > 0);
}

#[test]
fn missing_horizon_is_a_validation_error_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        &dir,
        "bad.toml",
        "mode = \"flq\"\n[topology]\nsupport = [1.0, -1.0]\nprobabilities = [0.5, 0.5]\n",
    );
    let out = dir.path().join("out");
    let output = run(&config, &out, &[]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("horizon"), "{}", stderr(&output));
    assert!(!out.exists());

    let config = write_config(&dir, "no_topology.toml", "mode = \"blq\"\n[blq.random]\nstate_dim = 1\ncontrol_dim = 1\n");
    let output = run(&config, &out, &[]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("topology.horizon"), "{}", stderr(&output));
}

#[test]
fn unknown_keys_and_bad_shapes_are_rejected() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let config = write_config(&dir, "unknown.toml", "mode = \"sde\"\ncolour = 1\n");
    let output = run(&config, &out, &[]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("colour"));

    let config = write_config(
        &dir,
        "shape.toml",
        "mode = \"sde\"\n[topology]\nhorizon = 2\n[sde]\ninitial = [1.0]\n\
         drift = [{ matrix = [[1.0]] }]\ndiffusion = { matrix = [[1.0]] }\n",
    );
    let output = run(&config, &out, &[]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("sde.drift"), "{}", stderr(&output));
}

#[test]
fn empty_suite_selection_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "empty.toml", "mode = \"suite\"\n[suite]\ncriteria = []\n");
    let out = dir.path().join("out");
    let output = fbsde(&["suite", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("suite.criteria"));
}

#[test]
fn suite_subset_reports_one_row_per_measurement() {
    let dir = TempDir::new().unwrap();
    let config = write_config(&dir, "subset.toml", "mode = \"suite\"\n[suite]\ncriteria = [7, 9]\n");
    let out = dir.path().join("out");
    let output = fbsde(&["suite", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(output.status.success(), "{}", stderr(&output));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]")).count(), 2);
    let report = report(&out);
    let outcomes = report["suite"].as_array().unwrap();
    assert_eq!(outcomes.len(), 2);
    let measurements: usize = outcomes.iter().map(|o| o["measurements"].as_array().unwrap().len()).sum();
    let table = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert_eq!(table.lines().count(), measurements + 1);
}

#[test]
fn identical_configs_give_byte_identical_outputs() {
    let dir = TempDir::new().unwrap();
    for name in ["fbsde_family.toml", "blq_random.toml", "insurance.toml"] {
        let first = dir.path().join(format!("{name}.1"));
        let second = dir.path().join(format!("{name}.2"));
        assert!(run(&configs().join(name), &first, &[]).status.success());
        assert!(run(&configs().join(name), &second, &[]).status.success());
        for file in ["report.json", "trajectories.csv"] {
            assert_eq!(
                fs::read(first.join(file)).unwrap(),
                fs::read(second.join(file)).unwrap(),
                "{name}: {file} differs"
            );
        }
    }
}

#[test]
fn seed_override_reaches_every_generator_and_is_recorded() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        &dir,
        "seeded.toml",
        "mode = \"fbsde\"\nseed = 1\n[topology]\nhorizon = 3\n\
         [coefficients.family]\ndim = 2\nrows = 2\ncase = \"mu\"\nseed = 500\n\
         [perturbation]\nscale = 1.0\nseed = 600\n[check]\nsamples = 500\nseed = 700\n",
    );
    let plain = dir.path().join("plain");
    assert!(run(&config, &plain, &[]).status.success());
    let seeds = report(&plain)["seeds"].clone();
    assert_eq!(seeds["family"], 500);
    assert_eq!(seeds["perturbation"], 600);
    assert_eq!(seeds["check"], 700);

    let overridden = dir.path().join("overridden");
    assert!(run(&config, &overridden, &["--seed", "99"]).status.success());
    let seeds = report(&overridden)["seeds"].clone();
    assert_eq!(seeds["base"], 99);
    assert_eq!(seeds["family"], 99);
    assert_eq!(seeds["perturbation"], 100);
    assert_eq!(seeds["check"], 101);
    assert_ne!(
        fs::read(plain.join("trajectories.csv")).unwrap(),
        fs::read(overridden.join("trajectories.csv")).unwrap()
    );
}

#[test]
fn oversized_step_exits_with_a_partial_report() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        &dir,
        "oversized.toml",
        "mode = \"fbsde\"\nseed = 1\n[topology]\nhorizon = 4\n\
         [coefficients.family]\ndim = 2\nrows = 2\ncase = \"mu\"\ncoupling = 3.0\n\
         [perturbation]\nscale = 1.0\n[solver]\ndelta_init = 1.0\ndelta_min = 1.0\nflat_first = false\n",
    );
    let out = dir.path().join("out");
    let output = run(&config, &out, &[]);
    assert_eq!(output.status.code(), Some(3), "{}", stderr(&output));
    let report = report(&out);
    assert_eq!(report["status"], "not_converged");
    assert!(report["error"].as_str().unwrap().contains("did not converge"));
    assert!(!report["diagnostics"]["attempts"].as_array().unwrap().is_empty());
    assert!(report.get("solution").is_none());
    assert!(out.join("diagnostics.csv").exists());
}

#[test]
fn flipped_orientation_solves_the_negated_family() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let output = run(&configs().join("fbsde_flipped.toml"), &out, &[]);
    assert!(output.status.success(), "{}", stderr(&output));
    let report = report(&out);
    assert_eq!(report["conditions"]["orientation"], "flipped");
    assert_eq!(total_violations(&report), 0);
    assert!(report["residual"]["overall"].as_f64().unwrap() <= report["residuals"]["bound"].as_f64().unwrap());
    assert!(report["estimates"]["perturbation"]["monotonicity"]["slack"].as_f64().unwrap() >= -1e-10);
}

#[test]
fn trajectories_export_matches_the_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    assert!(run(&configs().join("insurance.toml"), &out, &[]).status.success());
    let report = report(&out);
    let mut reader = csv::Reader::from_path(out.join("trajectories.csv")).unwrap();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.unwrap();
        let process = report["solution"]["processes"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["name"] == record[0])
            .unwrap();
        let time: usize = record[1].parse().unwrap();
        let index = time - process["start"].as_u64().unwrap() as usize;
        let node: usize = record[2].parse().unwrap();
        let component: usize = record[3].parse().unwrap();
        let value: f64 = record[4].parse().unwrap();
        assert_eq!(process["values"][index][node][component].as_f64().unwrap(), value);
        rows += 1;
    }
    assert!(rows > 0);
    assert!(report["residuals"]["path_sum_gap"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn validate_builds_inputs_without_writing_anything() {
    let dir = TempDir::new().unwrap();
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let output = fbsde(&["validate", path.to_str().unwrap()]);
        assert!(output.status.success(), "{}: {}", path.display(), stderr(&output));
    }
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn every_example_config_runs() {
    let dir = TempDir::new().unwrap();
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.file_stem().is_some_and(|s| s == "suite") {
            continue;
        }
        let out = dir.path().join(path.file_stem().unwrap());
        let output = run(&path, &out, &[]);
        assert!(output.status.success(), "{}: {}", path.display(), stderr(&output));
        assert_eq!(report(&out)["status"], "ok");
    }
}
