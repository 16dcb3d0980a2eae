//! Subcommand implementations. Every command computes all of its outputs
//! before writing any of them.

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use vvord::analysis::{depth_bound_contraction, depth_bound_single, optimal_step_single};
use vvord::analysis::{apgd_iteration_estimate, pgd_iteration_estimate};
use vvord::dynamics::{
    self, check_stability_inc_single, check_stability_noninc, contraction_norm, ControlRule, RuleKind, Stability,
    StopRule,
};
use vvord::emulator::DepthPolicy;
use vvord::equilibrium::RuleSource;
use vvord::grid::{load_feeder, spectral_norm, symmetric_eig_extremes};
use vvord::rules::{self, load_rules, RulesFile};
use vvord::scenarios::{generate_synthetic, load_scenarios, write_scenarios, SyntheticRanges};
use vvord::trainer::{evaluate_rules, train, Init, Optimizer, TrainConfig};
use vvord::{FeederModel, RuleParams};

use crate::output::{csv_bytes, json_bytes, num, Run};
use crate::{AnalyzeArgs, DesignArgs, EvaluateArgs, GenScenariosArgs, OptimizerArg, SimulateArgs};

fn require_mu(mu: Option<f64>, path: &std::path::Path) -> Result<f64> {
    mu.ok_or_else(|| {
        anyhow!(vvord::Error::InvalidParameter(format!(
            "{} holds transformed parameters; pass --mu",
            path.display()
        )))
    })
}

/// Stability of incremental rules at step `mu`.
fn incremental_stability(feeder: &FeederModel, mu: f64) -> Result<Stability> {
    if feeder.is_single_phase() {
        Ok(check_stability_inc_single(mu, feeder)?)
    } else {
        let norm = contraction_norm(feeder.x(), mu);
        Ok(Stability {
            stable: norm < 1.0,
            norm,
        })
    }
}

fn verdict(stable: bool) -> &'static str {
    if stable {
        "stable"
    } else {
        "unstable"
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut run = Run::new("simulate");
    run.input(&a.feeder);
    run.input(&a.rules);
    run.input(&a.scenarios);
    let feeder = load_feeder(&a.feeder)?;
    let set = load_scenarios(&a.scenarios, &feeder)?;
    let scenario = set.scenarios().get(a.scenario).ok_or_else(|| {
        vvord::Error::InvalidParameter(format!(
            "scenario index {} out of range ({} scenarios)",
            a.scenario,
            set.len()
        ))
    })?;
    let kind: RuleKind = a.rule.into();
    let rules_file = load_rules(&a.rules)?;

    let (rule, stability, mu) = match kind {
        RuleKind::NonIncremental => {
            let params: Vec<RuleParams> = match &rules_file {
                RulesFile::Params(z) => z.clone(),
                RulesFile::Transformed(zt) => {
                    let mu = require_mu(a.mu, &a.rules)?;
                    zt.iter().map(|p| rules::from_transformed(p, mu)).collect::<vvord::Result<_>>()?
                }
            };
            let stability = check_stability_noninc(&params, &feeder)?;
            (ControlRule::non_incremental(&feeder, &params)?, stability, None)
        }
        _ => {
            let mu = match (&rules_file, a.mu) {
                (_, Some(mu)) => mu,
                (RulesFile::Params(_), None) => dynamics::default_step(&feeder, kind)?,
                (RulesFile::Transformed(_), None) => require_mu(None, &a.rules)?,
            };
            let rule = match &rules_file {
                RulesFile::Params(z) => ControlRule::from_params(kind, &feeder, z, mu)?,
                RulesFile::Transformed(zt) if kind == RuleKind::Incremental => {
                    ControlRule::incremental(&feeder, zt, mu)?
                }
                RulesFile::Transformed(zt) => ControlRule::accelerated(&feeder, zt, mu)?,
            };
            (rule, incremental_stability(&feeder, mu)?, Some(mu))
        }
    };

    let stop = match a.steps {
        Some(t) => StopRule::Fixed(t),
        None => StopRule::Tolerance {
            eps: a.tol,
            max_iter: a.max_iter,
        },
    };
    let trace = dynamics::simulate(&rule, &feeder, scenario, stop)?;
    let final_v = trace.final_v();
    let summary = json!({
        "rule": kind,
        "mu": mu,
        "status": trace.status,
        "converged": trace.converged(),
        "iterations": trace.iterations_used,
        "residual": trace.final_residual,
        "stability": {
            "verdict": verdict(stability.stable),
            "stable": stability.stable,
            "norm": stability.norm,
        },
        "final_q": trace.final_q().as_slice(),
        "final_v": final_v.as_slice(),
        "max_voltage_deviation": final_v.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max),
    });
    run.output(&a.out, json_bytes(&summary)?);
    if let Some(path) = &a.trace {
        let rows = trace
            .q_history
            .iter()
            .zip(&trace.v_history)
            .enumerate()
            .flat_map(|(t, (q, v))| {
                (0..q.len()).map(move |i| vec![t.to_string(), i.to_string(), num(q[i]), num(v[i])])
            });
        run.output(path, csv_bytes(&["t", "node", "q", "v"], rows));
    }
    run.commit(&json!({ "args": a, "mu": mu }))
}

pub fn design(a: &DesignArgs) -> Result<()> {
    let mut run = Run::new("design");
    run.input(&a.feeder);
    run.input(&a.scenarios);
    let feeder = load_feeder(&a.feeder)?;
    let set = load_scenarios(&a.scenarios, &feeder)?;
    let kind = if a.accelerated {
        RuleKind::Accelerated
    } else {
        RuleKind::Incremental
    };
    let mu = match a.mu {
        Some(mu) => mu,
        None => dynamics::default_step(&feeder, kind)?,
    };
    let init = match &a.init {
        None => Init::Preset,
        Some(path) => {
            run.input(path);
            match load_rules(path)? {
                RulesFile::Transformed(zt) => Init::Explicit(zt),
                RulesFile::Params(z) => Init::Explicit(
                    z.iter().map(|p| rules::to_transformed(p, mu)).collect::<vvord::Result<_>>()?,
                ),
            }
        }
    };
    let config = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::adam(),
        },
        seed: a.seed,
        mu,
        accelerated: a.accelerated,
        depth: match a.depth {
            Some(t) => DepthPolicy::Fixed(t),
            None => DepthPolicy::Dynamic {
                eps: a.depth_eps,
                max_layers: a.max_layers,
            },
        },
        init,
        ..TrainConfig::new(mu)
    };
    let outcome = train(&feeder, set.scenarios(), &config)?;
    let h = &outcome.history;
    let baseline = vvord::equilibrium::baseline_objective(set.scenarios())?;
    eprintln!(
        "best objective {:e} at epoch {} (initial {:e}, no control {:e})",
        h.epoch_objective[h.best_epoch], h.best_epoch, h.epoch_objective[0], baseline
    );

    run.output(&a.out, json_bytes(&outcome.params)?);
    if let Some(path) = &a.history {
        let rows = h
            .epoch_objective
            .iter()
            .enumerate()
            .map(|(e, f)| vec![e.to_string(), num(*f)]);
        run.output(path, csv_bytes(&["epoch", "objective"], rows));
    }
    run.commit(&json!({
        "args": a,
        "train": config,
        "best_epoch": h.best_epoch,
        "best_objective": h.epoch_objective[h.best_epoch],
        "baseline_objective": baseline,
        "truncated_unrolls": h.truncated_unrolls,
    }))
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    n_nodes: usize,
    phase_layout: vvord::PhaseLayout,
    x_norm: f64,
    q_norm: f64,
    eps1: f64,
    kappa: Option<f64>,
    lambda_min: Option<f64>,
    lambda_max: Option<f64>,
    mu0: Option<f64>,
    contraction: Option<f64>,
    #[serde(rename = "T_single")]
    t_single: Option<usize>,
    mu_bound_multiphase: Option<f64>,
    /// Step used for the contraction-based bound.
    mu: f64,
    contraction_at_mu: f64,
    #[serde(rename = "T_multi")]
    t_multi: Option<usize>,
    default_step_inc: f64,
    default_step_acc: f64,
    stability: serde_json::Value,
    pgd_iterations: Option<usize>,
    apgd_iterations: Option<usize>,
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let mut run = Run::new("analyze");
    run.input(&a.feeder);
    let feeder = load_feeder(&a.feeder)?;
    let x_norm = spectral_norm(feeder.x());
    let q_norm = a.q_norm.unwrap_or_else(|| feeder.rating_norm());
    if q_norm.is_nan() || q_norm <= 0.0 {
        bail!(vvord::Error::InvalidParameter(
            "setpoint norm is zero; pass --q-norm".into()
        ));
    }
    let single = if feeder.is_single_phase() {
        Some(optimal_step_single(&feeder)?)
    } else {
        None
    };
    let mu_bound = match dynamics::multiphase_step_bound(&feeder) {
        Ok(b) => Some(b),
        Err(e) if feeder.is_single_phase() => {
            eprintln!("note: {e}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let default_inc = dynamics::default_step(&feeder, RuleKind::Incremental)?;
    let default_acc = dynamics::default_step(&feeder, RuleKind::Accelerated)?;
    let mu = a.mu.unwrap_or(default_inc);
    let c = contraction_norm(feeder.x(), mu);
    let t_multi = if c < 1.0 {
        Some(depth_bound_contraction(c, x_norm, q_norm, a.eps1)?)
    } else {
        None
    };
    let t_single = match &single {
        Some(s) => Some(depth_bound_single(s.kappa, x_norm, q_norm, a.eps1)?),
        None => None,
    };
    let (pgd, apgd) = match &single {
        Some(s) => (
            Some(pgd_iteration_estimate(s.kappa, a.eps)?),
            Some(apgd_iteration_estimate(s.kappa, a.eps)?),
        ),
        None => (None, None),
    };
    let stability = if feeder.is_single_phase() {
        let (_, lmax) = symmetric_eig_extremes(feeder.x())?;
        json!({
            "inc_stable_at_mu": mu < 2.0 / lmax,
            "inc_step_limit": 2.0 / lmax,
            "contraction_below_one": c < 1.0,
        })
    } else {
        json!({
            "inc_stable_at_mu": mu_bound.is_some_and(|b| mu < b),
            "contraction_below_one": c < 1.0,
        })
    };
    let report = AnalyzeReport {
        n_nodes: feeder.n_nodes(),
        phase_layout: feeder.layout(),
        x_norm,
        q_norm,
        eps1: a.eps1,
        kappa: single.map(|s| s.kappa),
        lambda_min: single.map(|s| s.lambda_min),
        lambda_max: single.map(|s| s.lambda_max),
        mu0: single.map(|s| s.mu0),
        contraction: single.map(|s| s.contraction),
        t_single,
        mu_bound_multiphase: mu_bound,
        mu,
        contraction_at_mu: c,
        t_multi,
        default_step_inc: default_inc,
        default_step_acc: default_acc,
        stability,
        pgd_iterations: pgd,
        apgd_iterations: apgd,
    };
    let bytes = json_bytes(&report)?;
    match &a.out {
        Some(path) => {
            run.output(path, bytes);
            run.commit(&json!({ "args": a }))
        }
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes).context("writing report")
        }
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut run = Run::new("evaluate");
    run.input(&a.feeder);
    run.input(&a.rules);
    run.input(&a.scenarios);
    let feeder = load_feeder(&a.feeder)?;
    let set = load_scenarios(&a.scenarios, &feeder)?;
    let rules_file = load_rules(&a.rules)?;
    let report = match &rules_file {
        RulesFile::Params(z) => evaluate_rules(RuleSource::Params(z), &feeder, set.scenarios())?,
        RulesFile::Transformed(zt) => {
            let mu = require_mu(a.mu, &a.rules)?;
            evaluate_rules(RuleSource::Transformed { params: zt, mu }, &feeder, set.scenarios())?
        }
    };
    let worst = report.scenarios.iter().map(|s| s.worst_deviation).fold(0.0, f64::max);
    let aggregate = json!({
        "objective": report.objective,
        "baseline": report.baseline,
        "ratio_to_baseline": if report.baseline > 0.0 { Some(report.objective / report.baseline) } else { None },
        "worst_deviation": worst,
        "n_scenarios": report.scenarios.len(),
        "mu": report.mu,
        "stability": report.stability,
        "curve_params": report.curve_params,
        "transformed_params": report.transformed_params,
    });
    run.output(&a.out, json_bytes(&aggregate)?);
    if let Some(path) = &a.per_scenario {
        let rows = report.scenarios.iter().enumerate().map(|(s, e)| {
            vec![
                s.to_string(),
                num(e.objective),
                num(e.baseline),
                num(e.worst_deviation),
                e.iterations.to_string(),
            ]
        });
        run.output(
            path,
            csv_bytes(&["scenario", "objective", "baseline", "worst_deviation", "iterations"], rows),
        );
    }
    run.commit(&json!({ "args": a }))
}

pub fn gen_scenarios(a: &GenScenariosArgs) -> Result<()> {
    let mut run = Run::new("gen-scenarios");
    run.input(&a.feeder);
    let feeder = load_feeder(&a.feeder)?;
    let ranges = SyntheticRanges {
        load: (a.load_min, a.load_max),
        solar: (a.solar_min, a.solar_max),
        reactive_ratio: a.reactive_ratio,
    };
    let set = generate_synthetic(&feeder, a.count, ranges, a.seed)?;
    let mut bytes = Vec::new();
    write_scenarios(&mut bytes, set.scenarios())?;
    run.output(&a.out, bytes);
    run.commit(&json!({ "args": a, "provenance": set.provenance }))
}
