//! End-to-end checks of the `vvord` binary: exit codes, output files and
//! report fields.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

use vvord::dynamics::multiphase_step_bound;
use vvord::synth::{self, FeederSpec};
use vvord::RuleParams;

fn vvord(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vvord"))
        .args(["--threads", "2"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Small radial feeder with a scenario file next to it.
fn radial_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let feeder = synth::random_radial_feeder(&FeederSpec::with_nodes(4), &mut rng).unwrap();
    let feeder_path = dir.join("feeder.json");
    feeder.save(&feeder_path).unwrap();
    let scen_path = dir.join("scenarios.csv");
    let out = vvord(&["gen-scenarios", "--feeder", s(&feeder_path), "--count", "6", "--seed", "1", "--out", s(&scen_path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (feeder_path, scen_path)
}

fn write_curve_rules(path: &Path, n: usize, alpha: f64) {
    let rules: Vec<RuleParams> = (0..n)
        .map(|node| RuleParams {
            node,
            v_ref: 1.0,
            delta: 0.005,
            alpha,
            q_max: 0.2,
            sigma: None,
        })
        .collect();
    std::fs::write(path, serde_json::to_vec(&rules).unwrap()).unwrap();
}

#[test]
fn version_names_file_format() {
    let out = vvord(&["--version"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("file format"));
}

#[test]
fn gen_scenarios_writes_manifest_with_input_hash() {
    let dir = tempfile::tempdir().unwrap();
    let (_, scen) = radial_inputs(dir.path());
    let text = std::fs::read_to_string(&scen).unwrap();
    assert_eq!(text.lines().count(), 7);
    let manifest = read_json(&dir.path().join("scenarios.csv.manifest.json"));
    assert_eq!(manifest["subcommand"], "gen-scenarios");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["provenance"]["kind"], "synthetic");
    assert_eq!(manifest["config"]["provenance"]["seed"], 1);
}

#[test]
fn analyze_reports_steps_and_depths() {
    let dir = tempfile::tempdir().unwrap();
    let (feeder, _) = radial_inputs(dir.path());
    let out = vvord(&["analyze", "--feeder", s(&feeder)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["kappa", "mu0", "contraction", "T_single", "T_multi", "default_step_inc", "default_step_acc"] {
        assert!(report[key].is_number(), "{key} missing: {report}");
    }
    let (lmin, lmax) = (report["lambda_min"].as_f64().unwrap(), report["lambda_max"].as_f64().unwrap());
    assert!((report["mu0"].as_f64().unwrap() - 2.0 / (lmin + lmax)).abs() < 1e-12);
}

#[test]
fn simulate_inc_converges_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let (feeder, scen) = radial_inputs(dir.path());
    let rules = dir.path().join("rules.json");
    write_curve_rules(&rules, 4, 5.0);
    let summary = dir.path().join("summary.json");
    let trace = dir.path().join("trace.csv");
    let out = vvord(&[
        "simulate", "--feeder", s(&feeder), "--rules", s(&rules), "--scenarios", s(&scen), "--scenario", "2",
        "--rule", "inc", "--out", s(&summary), "--trace", s(&trace),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let j = read_json(&summary);
    assert_eq!(j["converged"], true);
    assert_eq!(j["stability"]["verdict"], "stable");
    let iterations = j["iterations"].as_u64().unwrap() as usize;
    let text = std::fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,node,q,v");
    assert_eq!(text.lines().count(), 1 + 4 * (iterations + 1));
    assert!(dir.path().join("summary.json.manifest.json").exists());
}

#[test]
fn unstable_noninc_still_runs_and_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let (feeder, scen) = radial_inputs(dir.path());
    let rules = dir.path().join("rules.json");
    write_curve_rules(&rules, 4, 500.0);
    let summary = dir.path().join("summary.json");
    let out = vvord(&[
        "simulate", "--feeder", s(&feeder), "--rules", s(&rules), "--scenarios", s(&scen), "--rule", "noninc",
        "--max-iter", "200", "--out", s(&summary),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let j = read_json(&summary);
    assert_eq!(j["stability"]["verdict"], "unstable");
    assert_eq!(j["converged"], false);
}

#[test]
fn invalid_input_exits_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (feeder, scen) = radial_inputs(dir.path());
    let rules = dir.path().join("rules.json");
    write_curve_rules(&rules, 4, 5.0);
    let summary = dir.path().join("summary.json");
    let out = vvord(&[
        "simulate", "--feeder", s(&feeder), "--rules", s(&rules), "--scenarios", s(&scen), "--scenario", "99",
        "--out", s(&summary),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
    assert!(!summary.exists());
    assert!(!dir.path().join("summary.json.manifest.json").exists());

    let missing = vvord(&["analyze", "--feeder", s(&dir.path().join("nope.json"))]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn transformed_rules_require_step() {
    let dir = tempfile::tempdir().unwrap();
    let (feeder_path, scen) = radial_inputs(dir.path());
    let feeder = vvord::grid::load_feeder(&feeder_path).unwrap();
    let zt = synth::random_transformed(&feeder, &mut ChaCha20Rng::seed_from_u64(5));
    let rules = dir.path().join("rules.json");
    std::fs::write(&rules, serde_json::to_vec(&zt).unwrap()).unwrap();
    let report = dir.path().join("eval.json");
    let args = ["evaluate", "--feeder", s(&feeder_path), "--rules", s(&rules), "--scenarios", s(&scen), "--out", s(&report)];
    assert_eq!(code(&vvord(&args)), 1);
    let mut with_mu = args.to_vec();
    with_mu.extend(["--mu", "0.5"]);
    let out = vvord(&with_mu);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let j = read_json(&report);
    assert_eq!(j["n_scenarios"], 6);
    assert!(j["objective"].as_f64().unwrap() >= 0.0);
}

#[test]
fn unstable_multiphase_evaluation_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let feeder = synth::random_multiphase_feeder(&FeederSpec::with_nodes(4), 0.2, &mut rng).unwrap();
    let feeder_path = dir.path().join("feeder.json");
    feeder.save(&feeder_path).unwrap();
    let scen = dir.path().join("scenarios.csv");
    assert_eq!(code(&vvord(&["gen-scenarios", "--feeder", s(&feeder_path), "--count", "2", "--out", s(&scen)])), 0);
    let zt: Vec<_> = synth::random_transformed(&feeder, &mut rng)
        .into_iter()
        .map(|mut p| {
            p.alpha_t = 1.0;
            p.delta_t = 0.0;
            p
        })
        .collect();
    let rules = dir.path().join("rules.json");
    std::fs::write(&rules, serde_json::to_vec(&zt).unwrap()).unwrap();
    let mu = 3.0 * multiphase_step_bound(&feeder).unwrap();
    let report = dir.path().join("eval.json");
    let out = vvord(&[
        "evaluate", "--feeder", s(&feeder_path), "--rules", s(&rules), "--scenarios", s(&scen), "--mu", &mu.to_string(),
        "--out", s(&report),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!report.exists());
}

#[test]
fn design_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (feeder, scen) = radial_inputs(dir.path());
    let run = |tag: &str, threads: &str| {
        let out_path = dir.path().join(format!("rules_{tag}.json"));
        let hist = dir.path().join(format!("hist_{tag}.csv"));
        let out = Command::new(env!("CARGO_BIN_EXE_vvord"))
            .args(["--threads", threads, "design", "--feeder", s(&feeder), "--scenarios", s(&scen)])
            .args(["--epochs", "3", "--batch", "2", "--seed", "4", "--out", s(&out_path), "--history", s(&hist)])
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        (std::fs::read(&out_path).unwrap(), std::fs::read_to_string(&hist).unwrap())
    };
    let a = run("a", "1");
    let b = run("b", "3");
    assert_eq!(a, b);
    assert_eq!(a.1.lines().next().unwrap(), "epoch,objective");
    assert_eq!(a.1.lines().count(), 1 + 4);
    let rules: Value = serde_json::from_slice(&a.0).unwrap();
    assert_eq!(rules.as_array().unwrap().len(), 4);
    assert!(rules[0].get("alpha_t").is_some());
}
