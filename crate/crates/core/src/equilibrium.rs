//! Equilibrium setpoints and the rule-design objective.
//!
//! On single-phase feeders the equilibrium of every stable rule family is the
//! minimizer of
//!
//! ```text
//! min_{-q_max <= q <= q_max}  1/2 q'Xq + q'(v~ - v_ref) + 1/2 q' diag(1/alpha) q + delta'|q|
//! ```
//!
//! which [`solve_inner`] finds by cyclic exact coordinate minimization. This
//! path shares no code with the proximal-gradient rules, so it serves as an
//! oracle for them. Multiphase equilibria have no such characterization and
//! are taken as the converged fixed point of the incremental dynamics.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{self, ControlRule, RuleKind, StopRule};
use crate::rules::der_order;
use crate::util::pairwise_mean;
use crate::{Error, FeederModel, Result, RuleParams, Scenario, TransformedParams};

/// Coordinate-descent sweep cap.
pub const MAX_SWEEPS: usize = 500_000;
/// Default optimality tolerance for objective evaluation.
pub const DEFAULT_TOL: f64 = 1e-12;
/// Iteration cap when multiphase equilibria are found by simulation.
pub const MULTIPHASE_MAX_ITER: usize = 200_000;

/// Dense weights of the inner problem, one entry per node.
///
/// `inv_alpha` is `1/alpha`; frozen DERs (`alpha = 0`) and nodes without a
/// DER are marked by `q_max = 0` or an infinite `inv_alpha` and stay at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerProblem {
    pub v_ref: DVector<f64>,
    pub delta: DVector<f64>,
    pub inv_alpha: DVector<f64>,
    pub q_max: DVector<f64>,
}

impl InnerProblem {
    fn empty(n: usize) -> Self {
        InnerProblem {
            v_ref: DVector::from_element(n, 1.0),
            delta: DVector::zeros(n),
            inv_alpha: DVector::from_element(n, f64::INFINITY),
            q_max: DVector::zeros(n),
        }
    }

    pub fn from_params(feeder: &FeederModel, params: &[RuleParams]) -> Result<Self> {
        let mut out = InnerProblem::empty(feeder.n_nodes());
        let order = der_order(feeder, params.iter().map(|p| p.node))?;
        for (p, der) in params.iter().zip(order) {
            p.validate(feeder.q_rating()[der])?;
            out.v_ref[p.node] = p.v_ref;
            out.delta[p.node] = p.delta;
            out.inv_alpha[p.node] = if p.alpha > 0.0 { 1.0 / p.alpha } else { f64::INFINITY };
            out.q_max[p.node] = p.q_max;
        }
        Ok(out)
    }

    /// Inner problem for transformed parameters defined with step `mu`.
    /// `alpha~ = 1` maps to `1/alpha = 0`, `alpha~ = 0` to a frozen DER.
    pub fn from_transformed(
        feeder: &FeederModel,
        params: &[TransformedParams],
        mu: f64,
    ) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::InvalidParameter(format!("step size {mu} must be positive")));
        }
        let mut out = InnerProblem::empty(feeder.n_nodes());
        let order = der_order(feeder, params.iter().map(|p| p.node))?;
        for (p, der) in params.iter().zip(order) {
            p.validate(feeder.q_rating()[der])?;
            out.v_ref[p.node] = p.v_ref;
            out.q_max[p.node] = p.q_max;
            if p.alpha_t > 0.0 {
                out.inv_alpha[p.node] = (1.0 - p.alpha_t) / (mu * p.alpha_t);
                out.delta[p.node] = p.delta_t / p.alpha_t;
            }
        }
        Ok(out)
    }

    fn is_frozen(&self, i: usize) -> bool {
        self.q_max[i] == 0.0 || self.inv_alpha[i].is_infinite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub q_star: DVector<f64>,
    pub v_star: DVector<f64>,
    /// Largest change any single coordinate would make if re-minimized.
    pub kkt_residual: f64,
    /// Sweeps (coordinate descent) or updates (simulation) used.
    pub iterations: usize,
}

/// Closed-form minimizer over coordinate `i` given the others.
#[inline]
fn coordinate_update(problem: &InnerProblem, x: &nalgebra::DMatrix<f64>, q: &DVector<f64>, v_tilde: &DVector<f64>, i: usize) -> f64 {
    if problem.is_frozen(i) {
        return 0.0;
    }
    let n = q.len();
    let mut b = v_tilde[i] - problem.v_ref[i];
    for j in 0..n {
        if j != i {
            b += x[(i, j)] * q[j];
        }
    }
    let thr = problem.delta[i];
    let soft = if b > thr {
        b - thr
    } else if b < -thr {
        b + thr
    } else {
        0.0
    };
    (-soft / (x[(i, i)] + problem.inv_alpha[i])).clamp(-problem.q_max[i], problem.q_max[i])
}

/// Minimizes the inner problem by cyclic coordinate descent, ascending node
/// order, until no coordinate moves by more than `tol` in a sweep.
pub fn solve_inner_problem(
    problem: &InnerProblem,
    feeder: &FeederModel,
    scenario: &Scenario,
    tol: f64,
) -> Result<EquilibriumResult> {
    if !feeder.is_single_phase() {
        return Err(Error::WrongLayout {
            expected: "single-phase",
        });
    }
    let n = feeder.n_nodes();
    if scenario.len() != n || problem.v_ref.len() != n {
        return Err(Error::Dimension(format!(
            "feeder has {n} nodes, scenario {} and rules {}",
            scenario.len(),
            problem.v_ref.len()
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let x = feeder.x();
    let v_tilde = &scenario.v_tilde;
    let mut q = DVector::zeros(n);
    for sweep in 1..=MAX_SWEEPS {
        let mut max_change = 0.0_f64;
        for i in 0..n {
            let new = coordinate_update(problem, x, &q, v_tilde, i);
            max_change = max_change.max((new - q[i]).abs());
            q[i] = new;
        }
        if max_change <= tol {
            let kkt_residual = (0..n)
                .map(|i| (coordinate_update(problem, x, &q, v_tilde, i) - q[i]).abs())
                .fold(0.0, f64::max);
            let v_star = feeder.voltages(&q, scenario)?;
            return Ok(EquilibriumResult {
                q_star: q,
                v_star,
                kkt_residual,
                iterations: sweep,
            });
        }
    }
    Err(Error::NoConvergence(format!(
        "coordinate descent did not reach tolerance {tol:e} in {MAX_SWEEPS} sweeps"
    )))
}

/// Equilibrium of curve parameters `z` on a single-phase feeder.
pub fn solve_inner(
    z: &[RuleParams],
    feeder: &FeederModel,
    scenario: &Scenario,
    tol: f64,
) -> Result<EquilibriumResult> {
    let problem = InnerProblem::from_params(feeder, z)?;
    solve_inner_problem(&problem, feeder, scenario, tol)
}

/// `v* = X q* + v~`.
pub fn equilibrium_voltages(
    q_star: &DVector<f64>,
    feeder: &FeederModel,
    scenario: &Scenario,
) -> Result<DVector<f64>> {
    feeder.voltages(q_star, scenario)
}

/// Rules in either coordinate system.
#[derive(Debug, Clone, Copy)]
pub enum RuleSource<'a> {
    Params(&'a [RuleParams]),
    Transformed {
        params: &'a [TransformedParams],
        mu: f64,
    },
}

/// Equilibrium of one scenario, by coordinate descent on single-phase
/// feeders and by simulating incremental rules otherwise.
pub fn equilibrium(
    rules: RuleSource<'_>,
    feeder: &FeederModel,
    scenario: &Scenario,
    tol: f64,
) -> Result<EquilibriumResult> {
    if feeder.is_single_phase() {
        let problem = match rules {
            RuleSource::Params(z) => InnerProblem::from_params(feeder, z)?,
            RuleSource::Transformed { params, mu } => InnerProblem::from_transformed(feeder, params, mu)?,
        };
        return solve_inner_problem(&problem, feeder, scenario, tol);
    }
    let rule = match rules {
        RuleSource::Params(z) => {
            let mu = dynamics::default_step(feeder, RuleKind::Incremental)?;
            ControlRule::from_params(RuleKind::Incremental, feeder, z, mu)?
        }
        RuleSource::Transformed { params, mu } => ControlRule::incremental(feeder, params, mu)?,
    };
    let trace = dynamics::simulate(
        &rule,
        feeder,
        scenario,
        StopRule::Tolerance {
            eps: tol,
            max_iter: MULTIPHASE_MAX_ITER,
        },
    )?;
    if !trace.converged() {
        return Err(Error::NoConvergence(format!(
            "incremental dynamics stopped with residual {:e} after {} updates",
            trace.final_residual, trace.iterations_used
        )));
    }
    Ok(EquilibriumResult {
        q_star: trace.final_q().clone(),
        v_star: trace.final_v().clone(),
        kkt_residual: trace.final_residual,
        iterations: trace.iterations_used,
    })
}

/// Per-scenario evaluation of a rule set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioEvaluation {
    /// `||v* - 1||^2`.
    pub objective: f64,
    /// `||v~ - 1||^2`.
    pub baseline: f64,
    /// `max |v* - 1|`.
    pub worst_deviation: f64,
    pub iterations: usize,
}

/// Evaluates every scenario in parallel; results keep scenario order.
pub fn evaluate_scenarios(
    rules: RuleSource<'_>,
    feeder: &FeederModel,
    scenarios: &[Scenario],
    tol: f64,
) -> Result<Vec<ScenarioEvaluation>> {
    if scenarios.is_empty() {
        return Err(Error::InvalidParameter("no scenarios".into()));
    }
    scenarios
        .par_iter()
        .enumerate()
        .map(|(s, scenario)| {
            let eq = equilibrium(rules, feeder, scenario, tol).map_err(|e| match e {
                Error::NoConvergence(msg) => Error::NoConvergence(format!("scenario {s}: {msg}")),
                other => other,
            })?;
            let dev = eq.v_star.map(|v| v - 1.0);
            Ok(ScenarioEvaluation {
                objective: dev.norm_squared(),
                baseline: scenario.baseline_deviation(),
                worst_deviation: dev.amax(),
                iterations: eq.iterations,
            })
        })
        .collect()
}

/// Mean squared deviation of equilibrium voltages from unity.
pub fn objective(
    rules: RuleSource<'_>,
    feeder: &FeederModel,
    scenarios: &[Scenario],
) -> Result<f64> {
    let evals = evaluate_scenarios(rules, feeder, scenarios, DEFAULT_TOL)?;
    let values: Vec<f64> = evals.iter().map(|e| e.objective).collect();
    Ok(pairwise_mean(&values))
}

/// `F(z) = (1/S) sum_s ||v_z(v~_s) - 1||^2`.
pub fn objective_f(z: &[RuleParams], feeder: &FeederModel, scenarios: &[Scenario]) -> Result<f64> {
    objective(RuleSource::Params(z), feeder, scenarios)
}

/// Objective with all DER setpoints held at zero.
pub fn baseline_objective(scenarios: &[Scenario]) -> Result<f64> {
    if scenarios.is_empty() {
        return Err(Error::InvalidParameter("no scenarios".into()));
    }
    let values: Vec<f64> = scenarios.iter().map(Scenario::baseline_deviation).collect();
    Ok(pairwise_mean(&values))
}
