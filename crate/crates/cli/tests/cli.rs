use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmc-colloc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .to_string()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn solve_exp_endpoint_is_e() {
    let o = run(&["solve-ode"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let end: f64 = value(&stdout(&o), "end_state").parse().unwrap();
    assert!((end - std::f64::consts::E).abs() < 1e-7, "{end}");
}

#[test]
fn solve_oscillator_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[ode]\nproblem = \"oscillator\"\nhorizon = 1.0\ngrid = 5\n");
    let out = dir.path().join("out");
    let o = run(&["solve-ode", "--config", &cfg, "--output", out.to_str().unwrap(), "--oracle"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let end: Vec<f64> = value(&text, "end_state").split(',').map(|v| v.parse().unwrap()).collect();
    assert!((end[0] - 1f64.cos()).abs() < 1e-7);
    assert!((end[1] + 1f64.sin()).abs() < 1e-7);
    let oracle_err: f64 = value(&text, "oracle.max_error").parse().unwrap();
    assert!(oracle_err < 1e-7);
    let traj = fs::read_to_string(out.join("trajectory.tsv")).unwrap();
    assert_eq!(traj.lines().count(), 6);
    assert!(traj.starts_with("t\td0_x1\td1_x1\n"));
    assert!(out.join("summary.txt").exists());
}

#[test]
fn solve_glm_s_against_reference() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.txt"), "3 2\n1.0 0.5\n-0.5 1.0\n0.2 0.3\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "[density]\nkind = \"glm\"\nmatrix = \"a.txt\"\n[ode]\nproblem = \"glm-s\"\nhorizon = 0.5\nx0 = [0.3, -0.2]\nv0 = [1.0, 0.5]\neps = 1e-9\n",
    );
    let o = run(&["solve-ode", "--config", &cfg, "--oracle", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(j["problem"], "glm-s");
    assert_eq!(j["dim"], 3);
    assert!(j["oracle"]["max_error"].as_f64().unwrap() < 1e-7, "{j}");
}

#[test]
fn certified_single_segment_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[ode]\nsegments = 1\ngamma_policy = \"certified\"\n");
    let o = run(&["solve-ode", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("γ·L·T"));
}

#[test]
fn gaussian_sample_moment_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[run]\nchains = 256\nseed = 11\n[density]\ndim = 3\n[sampler]\nh = \"cap\"\ngamma_policy = \"measured\"\n",
    );
    let o = run(&["sample", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(value(&text, "moment_check.status"), "pass");
    for key in ["h", "iterations_n", "theta", "eps_bar", "h_cap"] {
        value(&text, key);
    }
}

#[test]
fn sample_files_are_deterministic_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[run]\nchains = 6\nseed = 3\n[density]\nkind = \"softabs\"\ndim = 2\n[sampler]\nh = \"cap\"\niterations = 5\ngamma_policy = \"measured\"\n",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, threads) in [(&a, "1"), (&b, "2")] {
        let o = run(&["sample", "--config", &cfg, "--output", out.to_str().unwrap(), "--threads", threads]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["samples.tsv", "diagnostics.tsv", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let other = dir.path().join("c");
    run(&["sample", "--config", &cfg, "--output", other.to_str().unwrap(), "--seed", "4"]);
    assert_ne!(
        fs::read(a.join("samples.tsv")).unwrap(),
        fs::read(other.join("samples.tsv")).unwrap()
    );
}

#[test]
fn step_above_cap_exits_two_naming_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[sampler]\nh = 0.9\n");
    let o = run(&["sample", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("step-size cap h ≤ m₂^{1/4}/(2·M₂^{3/4})"), "{err}");
}

#[test]
fn logistic_toy_reports_drift_monitor() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.txt"), "4 1\n0.1\n-0.2\n0.15\n0.05\n").unwrap();
    let cfg = write_config(
        dir.path(),
        "[run]\nchains = 4\n[density]\nkind = \"glm\"\nmatrix = \"a.txt\"\n[sampler]\nh = \"cap\"\niterations = 20\ngamma_policy = \"measured\"\n",
    );
    let out = dir.path().join("out");
    let o = run(&["sample", "--config", &cfg, "--output", out.to_str().unwrap(), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(j["mode"], "glm");
    assert!(j["drift_monitor"]["max_ratio"].as_f64().unwrap() <= 1.0, "{j}");
    assert!(j["delta"].as_f64().unwrap() > 0.0);
    assert!(out.join("summary.json").exists());
    let samples = fs::read_to_string(out.join("samples.tsv")).unwrap();
    assert_eq!(samples.lines().count(), 5);
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[run]\nunknown = 1\n");
    assert_eq!(run(&["sample", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(run(&["sample", "--config", "/nonexistent.toml"]).status.code(), Some(2));
}

#[test]
fn verify_json_bundle_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[verify]\ncontraction_trials = 50\nbasis_max_degree = 6\n");
    let o = run(&["verify", "--config", &cfg, "--json"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let j: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(j["status"], "pass");
    assert_eq!(j["failed"], 0);
    assert_eq!(j["hmc_contraction"]["trials"], 50);
}

#[test]
fn verify_negative_controls_flip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[verify]\ncontraction_trials = 20\nbasis_max_degree = 4\nbias_chains = 16\n",
    );
    let o = run(&["verify", "--config", &cfg, "--negative-controls"]);
    let text = stdout(&o);
    assert!(o.status.success(), "{text}");
    for name in ["negative_gamma_lt", "negative_order_two", "negative_step_cap"] {
        assert_eq!(value(&text, &format!("{name}.pass")), "true", "{name}");
        assert!(value(&text, &format!("{name}.error")).contains("precondition"));
    }
    assert_eq!(value(&text, "negative_forced_step_bias.hard"), "false");
}

#[test]
fn basis_check_reports_gamma() {
    let o = run(&["basis-check", "--max-degree", "4", "--max-pieces", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(value(&text, "bases"), "15");
    let g: f64 = value(&text, "max_measured_gamma").parse().unwrap();
    assert!(g < 2000.0);
}
