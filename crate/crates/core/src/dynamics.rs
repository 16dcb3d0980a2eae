//! Closed-loop simulation of rules interacting with the feeder.
//!
//! Every rule family starts from `q^0 = 0` and alternates a local update with
//! the grid response `v^{t+1} = X q^{t+1} + v~`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::grid::{spectral_norm, symmetric_eig_extremes};
use crate::rules::{self, curve_value, ProxBranch, RuleVectors};
use crate::{analysis, Error, FeederModel, Result, RuleParams, Scenario, TransformedParams};

/// Default convergence tolerance on `||q^t - q^{t-1}||_2`.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// A trace is aborted once `||q|| > DIVERGENCE_FACTOR * ||q^||`.
pub const DIVERGENCE_FACTOR: f64 = 1e3;
/// Fraction of the multiphase step bound used as the default step.
pub const MULTIPHASE_STEP_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    #[serde(rename = "noninc")]
    NonIncremental,
    #[serde(rename = "inc")]
    Incremental,
    #[serde(rename = "acc")]
    Accelerated,
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleKind::NonIncremental => "noninc",
            RuleKind::Incremental => "inc",
            RuleKind::Accelerated => "acc",
        })
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noninc" => Ok(RuleKind::NonIncremental),
            "inc" => Ok(RuleKind::Incremental),
            "acc" => Ok(RuleKind::Accelerated),
            other => Err(Error::InvalidParameter(format!(
                "unknown rule kind {other:?} (expected noninc, inc or acc)"
            ))),
        }
    }
}

/// Non-incremental curve parameters scattered onto every node.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveVectors {
    pub v_ref: DVector<f64>,
    pub delta: DVector<f64>,
    pub slope: DVector<f64>,
    pub q_max: DVector<f64>,
}

impl CurveVectors {
    pub fn from_params(feeder: &FeederModel, params: &[RuleParams]) -> Result<Self> {
        let n = feeder.n_nodes();
        let mut out = CurveVectors {
            v_ref: DVector::from_element(n, 1.0),
            delta: DVector::zeros(n),
            slope: DVector::zeros(n),
            q_max: DVector::zeros(n),
        };
        let order = rules::der_order(feeder, params.iter().map(|p| p.node))?;
        for (p, der) in params.iter().zip(order) {
            p.validate(feeder.q_rating()[der])?;
            out.v_ref[p.node] = p.v_ref;
            out.delta[p.node] = p.delta;
            out.slope[p.node] = p.curve_slope()?;
            out.q_max[p.node] = p.q_max;
        }
        Ok(out)
    }
}

/// A rule family together with everything needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlRule {
    NonIncremental(CurveVectors),
    Incremental { rules: RuleVectors, mu: f64 },
    Accelerated { rules: RuleVectors, mu: f64 },
}

impl ControlRule {
    pub fn non_incremental(feeder: &FeederModel, params: &[RuleParams]) -> Result<Self> {
        Ok(ControlRule::NonIncremental(CurveVectors::from_params(feeder, params)?))
    }

    pub fn incremental(feeder: &FeederModel, params: &[TransformedParams], mu: f64) -> Result<Self> {
        check_mu(mu)?;
        Ok(ControlRule::Incremental {
            rules: RuleVectors::from_transformed(feeder, params)?,
            mu,
        })
    }

    pub fn accelerated(feeder: &FeederModel, params: &[TransformedParams], mu: f64) -> Result<Self> {
        check_mu(mu)?;
        Ok(ControlRule::Accelerated {
            rules: RuleVectors::from_transformed(feeder, params)?,
            mu,
        })
    }

    /// Builds any rule family from curve parameters; incremental families
    /// transform them with step `mu` (ignored for non-incremental rules).
    pub fn from_params(
        kind: RuleKind,
        feeder: &FeederModel,
        params: &[RuleParams],
        mu: f64,
    ) -> Result<Self> {
        match kind {
            RuleKind::NonIncremental => ControlRule::non_incremental(feeder, params),
            RuleKind::Incremental | RuleKind::Accelerated => {
                check_mu(mu)?;
                let rules = RuleVectors::from_params(feeder, params, mu)?;
                Ok(if kind == RuleKind::Incremental {
                    ControlRule::Incremental { rules, mu }
                } else {
                    ControlRule::Accelerated { rules, mu }
                })
            }
        }
    }

    pub fn kind(&self) -> RuleKind {
        match self {
            ControlRule::NonIncremental(_) => RuleKind::NonIncremental,
            ControlRule::Incremental { .. } => RuleKind::Incremental,
            ControlRule::Accelerated { .. } => RuleKind::Accelerated,
        }
    }

    pub fn step_size(&self) -> Option<f64> {
        match self {
            ControlRule::NonIncremental(_) => None,
            ControlRule::Incremental { mu, .. } | ControlRule::Accelerated { mu, .. } => Some(*mu),
        }
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("step size {mu} must be positive")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Run exactly this many updates.
    Fixed(usize),
    /// Stop once `||q^t - q^{t-1}||_2 <= eps`, or after `max_iter` updates.
    Tolerance { eps: f64, max_iter: usize },
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::Tolerance {
            eps: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl StopRule {
    fn validate(&self) -> Result<()> {
        match *self {
            StopRule::Fixed(0) => {
                Err(Error::InvalidParameter("fixed depth must be at least 1".into()))
            }
            StopRule::Tolerance { eps, max_iter } if !(eps >= 0.0) || max_iter == 0 => Err(
                Error::InvalidParameter(format!("bad tolerance rule eps={eps} max_iter={max_iter}")),
            ),
            _ => Ok(()),
        }
    }

    fn max_iter(&self) -> usize {
        match *self {
            StopRule::Fixed(t) => t,
            StopRule::Tolerance { max_iter, .. } => max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Converged,
    /// Ran the requested fixed number of updates.
    FixedDepth,
    /// Hit the iteration cap before meeting the tolerance.
    MaxIterations,
    Diverged,
}

/// Setpoints and voltages at every step, `t = 0` included.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub q_history: Vec<DVector<f64>>,
    pub v_history: Vec<DVector<f64>>,
    pub status: TraceStatus,
    pub iterations_used: usize,
    pub final_residual: f64,
}

impl SimulationTrace {
    pub fn converged(&self) -> bool {
        self.status == TraceStatus::Converged
    }

    pub fn final_q(&self) -> &DVector<f64> {
        self.q_history.last().expect("trace holds q^0")
    }

    pub fn final_v(&self) -> &DVector<f64> {
        self.v_history.last().expect("trace holds v^0")
    }
}

/// Outcome of a run without the stored history.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RunSummary {
    pub status: TraceStatus,
    pub iterations: usize,
    pub residual: f64,
}

/// One incremental layer as seen by an observer.
pub(crate) struct Layer<'a> {
    pub beta: f64,
    pub y: &'a DVector<f64>,
    pub branches: &'a [ProxBranch],
    pub q: &'a DVector<f64>,
    pub v: &'a DVector<f64>,
}

/// Runs the (accelerated) incremental recursion from `q^0 = 0`, calling
/// `observer` after each layer. Shared by [`simulate`] and the emulator so
/// both produce identical floating-point results.
pub(crate) fn run_incremental(
    rules: &RuleVectors,
    mu: f64,
    accelerated: bool,
    feeder: &FeederModel,
    v_tilde: &DVector<f64>,
    stop: StopRule,
    mut observer: impl FnMut(&Layer<'_>),
) -> RunSummary {
    let n = feeder.n_nodes();
    let x = feeder.x();
    let blowup = DIVERGENCE_FACTOR * feeder.rating_norm();
    let mut q = DVector::zeros(n);
    let mut v = v_tilde.clone();
    let mut q_next = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    let mut y_prev = DVector::zeros(n);
    let mut y_ext = DVector::zeros(n);
    let mut branches = vec![ProxBranch::Dead; n];
    let mut residual = f64::INFINITY;

    for t in 1..=stop.max_iter() {
        rules::pre_activation(&q, &v, rules, mu, &mut y);
        let beta = if accelerated { rules::nesterov_beta(t) } else { 0.0 };
        if beta != 0.0 {
            for i in 0..n {
                y_ext[i] = (1.0 + beta) * y[i] - beta * y_prev[i];
            }
        } else {
            y_ext.copy_from(&y);
        }
        rules::prox_vec(&y_ext, rules, mu, &mut q_next, Some(&mut branches));
        residual = (&q_next - &q).norm();
        std::mem::swap(&mut q, &mut q_next);
        v.copy_from(v_tilde);
        v.gemv(1.0, x, &q, 1.0);
        std::mem::swap(&mut y, &mut y_prev);
        observer(&Layer {
            beta,
            y: &y_prev,
            branches: &branches,
            q: &q,
            v: &v,
        });
        if q.norm() > blowup && blowup > 0.0 {
            return RunSummary {
                status: TraceStatus::Diverged,
                iterations: t,
                residual,
            };
        }
        if let StopRule::Tolerance { eps, .. } = stop {
            // with momentum a small step is not enough: two saturated iterates can
            // coincide away from the fixed point, so also test the plain map at q
            let settled = residual <= eps
                && (!accelerated || {
                    rules::pre_activation(&q, &v, rules, mu, &mut y_ext);
                    rules::prox_vec(&y_ext, rules, mu, &mut q_next, None);
                    (&q_next - &q).norm() <= eps
                });
            if settled {
                return RunSummary {
                    status: TraceStatus::Converged,
                    iterations: t,
                    residual,
                };
            }
        }
    }
    RunSummary {
        status: match stop {
            StopRule::Fixed(_) => TraceStatus::FixedDepth,
            StopRule::Tolerance { .. } => TraceStatus::MaxIterations,
        },
        iterations: stop.max_iter(),
        residual,
    }
}

/// Simulates `rule` on `feeder` under `scenario` from `q^0 = 0`.
///
/// Non-convergence is reported through the trace status, not as an error.
pub fn simulate(
    rule: &ControlRule,
    feeder: &FeederModel,
    scenario: &Scenario,
    stop: StopRule,
) -> Result<SimulationTrace> {
    stop.validate()?;
    let n = feeder.n_nodes();
    if scenario.len() != n {
        return Err(Error::Dimension(format!(
            "scenario has {} entries, feeder has {n} nodes",
            scenario.len()
        )));
    }
    let v_tilde = &scenario.v_tilde;
    let mut q_history = vec![DVector::zeros(n)];
    let mut v_history = vec![v_tilde.clone()];

    let summary = match rule {
        ControlRule::Incremental { rules, mu } | ControlRule::Accelerated { rules, mu } => {
            if rules.len() != n {
                return Err(Error::Dimension("rule vectors do not match feeder".into()));
            }
            let accelerated = rule.kind() == RuleKind::Accelerated;
            run_incremental(rules, *mu, accelerated, feeder, v_tilde, stop, |layer| {
                q_history.push(layer.q.clone());
                v_history.push(layer.v.clone());
            })
        }
        ControlRule::NonIncremental(curves) => {
            if curves.v_ref.len() != n {
                return Err(Error::Dimension("curve vectors do not match feeder".into()));
            }
            run_nonincremental(curves, feeder, v_tilde, stop, &mut q_history, &mut v_history)
        }
    };

    Ok(SimulationTrace {
        q_history,
        v_history,
        status: summary.status,
        iterations_used: summary.iterations,
        final_residual: summary.residual,
    })
}

fn run_nonincremental(
    curves: &CurveVectors,
    feeder: &FeederModel,
    v_tilde: &DVector<f64>,
    stop: StopRule,
    q_history: &mut Vec<DVector<f64>>,
    v_history: &mut Vec<DVector<f64>>,
) -> RunSummary {
    let n = feeder.n_nodes();
    let blowup = DIVERGENCE_FACTOR * feeder.rating_norm();
    let mut q = DVector::zeros(n);
    let mut v = v_tilde.clone();
    let mut residual = f64::INFINITY;
    for t in 1..=stop.max_iter() {
        let q_next = DVector::from_fn(n, |i, _| {
            curve_value(v[i], curves.v_ref[i], curves.delta[i], curves.slope[i], curves.q_max[i])
        });
        residual = (&q_next - &q).norm();
        q = q_next;
        v.copy_from(v_tilde);
        v.gemv(1.0, feeder.x(), &q, 1.0);
        q_history.push(q.clone());
        v_history.push(v.clone());
        if q.norm() > blowup && blowup > 0.0 {
            return RunSummary {
                status: TraceStatus::Diverged,
                iterations: t,
                residual,
            };
        }
        if let StopRule::Tolerance { eps, .. } = stop {
            if residual <= eps {
                return RunSummary {
                    status: TraceStatus::Converged,
                    iterations: t,
                    residual,
                };
            }
        }
    }
    RunSummary {
        status: match stop {
            StopRule::Fixed(_) => TraceStatus::FixedDepth,
            StopRule::Tolerance { .. } => TraceStatus::MaxIterations,
        },
        iterations: stop.max_iter(),
        residual,
    }
}

/// A stability verdict and the norm it was based on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub stable: bool,
    pub norm: f64,
}

/// Non-incremental rules are stable when `||diag(alpha) X||_2 < 1`.
pub fn check_stability_noninc(params: &[RuleParams], feeder: &FeederModel) -> Result<Stability> {
    let curves = CurveVectors::from_params(feeder, params)?;
    Ok(stability_from_slopes(&curves.slope, feeder.x()))
}

pub(crate) fn stability_from_slopes(slopes: &DVector<f64>, x: &DMatrix<f64>) -> Stability {
    let mut scaled = x.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= slopes[i];
    }
    let norm = spectral_norm(&scaled);
    Stability {
        stable: norm < 1.0,
        norm,
    }
}

/// Incremental rules on a single-phase feeder are stable iff
/// `mu < 2 / lambda_max(X)`; the returned norm is `||I - mu X||_2`.
pub fn check_stability_inc_single(mu: f64, feeder: &FeederModel) -> Result<Stability> {
    if !feeder.is_single_phase() {
        return Err(Error::WrongLayout {
            expected: "single-phase",
        });
    }
    check_mu(mu)?;
    let (_, lmax) = symmetric_eig_extremes(feeder.x())?;
    Ok(Stability {
        stable: mu < 2.0 / lmax,
        norm: contraction_norm(feeder.x(), mu),
    })
}

/// `||I - mu X||_2`.
pub fn contraction_norm(x: &DMatrix<f64>, mu: f64) -> f64 {
    let n = x.nrows();
    spectral_norm(&(DMatrix::identity(n, n) - x * mu))
}

/// Largest step keeping incremental rules stable on a multiphase feeder:
/// `lambda_min(L^{-1/2} U^T (X + X^T) U L^{-1/2})` with `X X^T = U L U^T`.
pub fn multiphase_step_bound(feeder: &FeederModel) -> Result<f64> {
    step_bound_for_matrix(feeder.x())
}

pub fn step_bound_for_matrix(x: &DMatrix<f64>) -> Result<f64> {
    let gram = x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let lmin = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lmin >= 1e-12) {
        return Err(Error::IllConditioned(format!(
            "X X^T has smallest eigenvalue {lmin:e}"
        )));
    }
    let scale = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.powf(-0.5)));
    let u = &eig.eigenvectors;
    let mut m = u.transpose() * (x + x.transpose()) * u;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] *= scale[i] * scale[j];
        }
    }
    // symmetrize away rounding before the eigen solve
    let m = (&m + m.transpose()) * 0.5;
    let eig_m = SymmetricEigen::new(m);
    Ok(eig_m.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Default step size for a rule family on `feeder`.
///
/// Single-phase: `mu0 = 2/(lambda_max + lambda_min)` for plain incremental
/// rules and `1/lambda_max` for accelerated ones, whose momentum is unstable
/// along negative eigen-directions of `I - mu X`. Multiphase: 0.9 of the
/// multiphase bound for both.
pub fn default_step(feeder: &FeederModel, kind: RuleKind) -> Result<f64> {
    if feeder.is_single_phase() {
        match kind {
            RuleKind::Accelerated => {
                let (_, lmax) = symmetric_eig_extremes(feeder.x())?;
                Ok(1.0 / lmax)
            }
            _ => Ok(analysis::optimal_step_single(feeder)?.mu0),
        }
    } else {
        let bound = multiphase_step_bound(feeder)?;
        if !(bound > 0.0) {
            return Err(Error::IllConditioned(format!(
                "multiphase step bound {bound:e} admits no positive step"
            )));
        }
        Ok(MULTIPHASE_STEP_FRACTION * bound)
    }
}
