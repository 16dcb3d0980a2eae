//! Pointwise Volt/VAR rule primitives.
//!
//! Rule parameters come in two coordinates. [`RuleParams`] is the physical
//! curve description `z = (v_ref, delta, alpha, q_max)`; [`TransformedParams`]
//! is `z~ = (v_ref, delta~, alpha~, q_max)` with
//!
//! ```text
//! alpha~ = 1 / (1 + mu/alpha)      delta~ = delta / (1 + mu/alpha)
//! ```
//!
//! The incremental rule is written in `z~`: each DER forms
//! `y = alpha~ (q - mu (v - v_ref))` and sets `q+ = g(y)`, where `g` is the
//! five-branch soft-threshold-and-clip map [`prox_g`].

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::{Error, FeederModel, Result};

/// Lower and upper bound on the reference voltage, p.u.
pub const V_REF_MIN: f64 = 0.95;
pub const V_REF_MAX: f64 = 1.05;

/// Curve parameters of one DER.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleParams {
    pub node: usize,
    pub v_ref: f64,
    pub delta: f64,
    pub alpha: f64,
    pub q_max: f64,
    /// Saturation half-width of the non-incremental curve. When present it
    /// must agree with `alpha = q_max / (sigma - delta)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

/// Incremental-rule parameters of one DER in transformed coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformedParams {
    pub node: usize,
    pub v_ref: f64,
    pub delta_t: f64,
    pub alpha_t: f64,
    pub q_max: f64,
}

impl RuleParams {
    /// Builds curve parameters from `(v_ref, delta, sigma, q_max)`, deriving
    /// the slope.
    pub fn from_curve(node: usize, v_ref: f64, delta: f64, sigma: f64, q_max: f64) -> Result<Self> {
        if !(sigma > delta) {
            return Err(Error::InvalidParameter(format!(
                "node {node}: sigma {sigma} must exceed delta {delta}"
            )));
        }
        Ok(RuleParams {
            node,
            v_ref,
            delta,
            alpha: q_max / (sigma - delta),
            q_max,
            sigma: Some(sigma),
        })
    }

    /// Slope of the non-incremental curve.
    pub fn curve_slope(&self) -> Result<f64> {
        match self.sigma {
            Some(sigma) if !(sigma > self.delta) => Err(Error::InvalidParameter(format!(
                "node {}: sigma {sigma} must exceed delta {}",
                self.node, self.delta
            ))),
            Some(sigma) => Ok(self.q_max / (sigma - self.delta)),
            None => Ok(self.alpha),
        }
    }

    /// Checks the feasible set for rules deployed on `rating`.
    pub fn validate(&self, rating: f64) -> Result<()> {
        let fields = [self.v_ref, self.delta, self.alpha, self.q_max];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "node {}: parameters must be finite and nonnegative",
                self.node
            )));
        }
        if !(V_REF_MIN..=V_REF_MAX).contains(&self.v_ref) {
            return Err(Error::InvalidParameter(format!(
                "node {}: v_ref {} outside [{V_REF_MIN}, {V_REF_MAX}]",
                self.node, self.v_ref
            )));
        }
        if self.q_max > rating {
            return Err(Error::InvalidParameter(format!(
                "node {}: q_max {} exceeds rating {rating}",
                self.node, self.q_max
            )));
        }
        if let Some(sigma) = self.sigma {
            let slope = self.curve_slope()?;
            if (slope - self.alpha).abs() > 1e-9 * self.alpha.max(1.0) {
                return Err(Error::InvalidParameter(format!(
                    "node {}: alpha {} disagrees with q_max/(sigma-delta) = {slope} (sigma {sigma})",
                    self.node, self.alpha
                )));
            }
        }
        Ok(())
    }
}

impl TransformedParams {
    pub fn validate(&self, rating: f64) -> Result<()> {
        let fields = [self.v_ref, self.delta_t, self.alpha_t, self.q_max];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "node {}: parameters must be finite and nonnegative",
                self.node
            )));
        }
        if self.alpha_t > 1.0 {
            return Err(Error::InvalidParameter(format!(
                "node {}: alpha_t {} exceeds 1",
                self.node, self.alpha_t
            )));
        }
        if !(V_REF_MIN..=V_REF_MAX).contains(&self.v_ref) {
            return Err(Error::InvalidParameter(format!(
                "node {}: v_ref {} outside [{V_REF_MIN}, {V_REF_MAX}]",
                self.node, self.v_ref
            )));
        }
        if self.q_max > rating {
            return Err(Error::InvalidParameter(format!(
                "node {}: q_max {} exceeds rating {rating}",
                self.node, self.q_max
            )));
        }
        Ok(())
    }
}

/// IEEE 1547 Volt/VAR curve: zero in the deadband, slope `-alpha` out to
/// `sigma`, saturated at `-/+ q_max` beyond.
pub fn nonincremental_curve(v: f64, params: &RuleParams) -> Result<f64> {
    let slope = params.curve_slope()?;
    Ok(curve_value(v, params.v_ref, params.delta, slope, params.q_max))
}

pub(crate) fn curve_value(v: f64, v_ref: f64, delta: f64, slope: f64, q_max: f64) -> f64 {
    let dev = v - v_ref;
    let excess = if dev > delta {
        dev - delta
    } else if dev < -delta {
        dev + delta
    } else {
        return 0.0;
    };
    (-slope * excess).clamp(-q_max, q_max)
}

/// Which piece of the proximal map an input falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProxBranch {
    SatPos,
    LinPos,
    Dead,
    LinNeg,
    SatNeg,
}

impl ProxBranch {
    /// `dg/dy` on this branch.
    pub fn slope(self) -> f64 {
        match self {
            ProxBranch::LinPos | ProxBranch::LinNeg => 1.0,
            _ => 0.0,
        }
    }

    /// `dg/d(mu delta~)` on this branch.
    pub fn threshold_sensitivity(self) -> f64 {
        match self {
            ProxBranch::LinPos => -1.0,
            ProxBranch::LinNeg => 1.0,
            _ => 0.0,
        }
    }

    /// `dg/dq_max` on this branch.
    pub fn limit_sensitivity(self) -> f64 {
        match self {
            ProxBranch::SatPos => 1.0,
            ProxBranch::SatNeg => -1.0,
            _ => 0.0,
        }
    }
}

/// Branch selection with the interval tests in the order the map is usually
/// printed; the first closed test that fires wins.
pub fn prox_branch(y: f64, mu: f64, delta_t: f64, q_max: f64) -> ProxBranch {
    let thr = mu * delta_t;
    if y > q_max + thr {
        ProxBranch::SatPos
    } else if y > thr {
        ProxBranch::LinPos
    } else if y >= -thr {
        ProxBranch::Dead
    } else if y >= -q_max - thr {
        ProxBranch::LinNeg
    } else {
        ProxBranch::SatNeg
    }
}

#[inline]
pub(crate) fn prox_on_branch(branch: ProxBranch, y: f64, thr: f64, q_max: f64) -> f64 {
    match branch {
        ProxBranch::SatPos => q_max,
        ProxBranch::LinPos => y - thr,
        ProxBranch::Dead => 0.0,
        ProxBranch::LinNeg => y + thr,
        ProxBranch::SatNeg => -q_max,
    }
}

/// Proximal operator of the incremental rule: saturate at `+-q_max` outside
/// `+-(q_max + mu delta~)`, soft-threshold by `mu delta~` in between, zero in
/// the dead zone.
pub fn prox_g(y: f64, mu: f64, delta_t: f64, q_max: f64) -> f64 {
    let branch = prox_branch(y, mu, delta_t, q_max);
    prox_on_branch(branch, y, mu * delta_t, q_max)
}

#[inline]
fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// The same map as [`prox_g`] written as four shifted ReLUs.
pub fn prox_g_relu_form(y: f64, mu: f64, delta_t: f64, q_max: f64) -> f64 {
    let thr = mu * delta_t;
    relu(y - thr) - relu(y - thr - q_max) - relu(-y - thr) + relu(-y - thr - q_max)
}

/// `z -> z~` for step size `mu`.
pub fn to_transformed(z: &RuleParams, mu: f64) -> Result<TransformedParams> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("step size {mu} must be positive")));
    }
    if !(z.alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "node {}: slope {} must be positive to transform",
            z.node, z.alpha
        )));
    }
    let shrink = 1.0 + mu / z.alpha;
    Ok(TransformedParams {
        node: z.node,
        v_ref: z.v_ref,
        delta_t: z.delta / shrink,
        alpha_t: 1.0 / shrink,
        q_max: z.q_max,
    })
}

/// `z~ -> z` for step size `mu`. `alpha~ = 1` means an infinite slope and is
/// rejected.
pub fn from_transformed(zt: &TransformedParams, mu: f64) -> Result<RuleParams> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter(format!("step size {mu} must be positive")));
    }
    if !(zt.alpha_t > 0.0 && zt.alpha_t < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "node {}: alpha_t {} has no finite slope (needs 0 < alpha_t < 1)",
            zt.node, zt.alpha_t
        )));
    }
    Ok(RuleParams {
        node: zt.node,
        v_ref: zt.v_ref,
        delta: zt.delta_t / zt.alpha_t,
        alpha: mu * zt.alpha_t / (1.0 - zt.alpha_t),
        q_max: zt.q_max,
        sigma: None,
    })
}

/// Transformed parameters scattered onto every node of a feeder.
///
/// Nodes without a DER get `alpha~ = q_max = 0`, which pins their setpoint at
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleVectors {
    pub v_ref: DVector<f64>,
    pub delta_t: DVector<f64>,
    pub alpha_t: DVector<f64>,
    pub q_max: DVector<f64>,
}

impl RuleVectors {
    pub fn from_transformed(feeder: &FeederModel, params: &[TransformedParams]) -> Result<Self> {
        let n = feeder.n_nodes();
        let mut out = RuleVectors {
            v_ref: DVector::from_element(n, 1.0),
            delta_t: DVector::zeros(n),
            alpha_t: DVector::zeros(n),
            q_max: DVector::zeros(n),
        };
        let order = der_order(feeder, params.iter().map(|p| p.node))?;
        for (p, der) in params.iter().zip(order) {
            p.validate(feeder.q_rating()[der])?;
            out.v_ref[p.node] = p.v_ref;
            out.delta_t[p.node] = p.delta_t;
            out.alpha_t[p.node] = p.alpha_t;
            out.q_max[p.node] = p.q_max;
        }
        Ok(out)
    }

    pub fn from_params(feeder: &FeederModel, params: &[RuleParams], mu: f64) -> Result<Self> {
        let zt = params
            .iter()
            .map(|z| to_transformed(z, mu))
            .collect::<Result<Vec<_>>>()?;
        RuleVectors::from_transformed(feeder, &zt)
    }

    pub fn len(&self) -> usize {
        self.v_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_ref.is_empty()
    }
}

/// Checks that `nodes` lists every DER of the feeder exactly once and returns
/// each entry's position in the feeder's DER list.
pub(crate) fn der_order(
    feeder: &FeederModel,
    nodes: impl Iterator<Item = usize>,
) -> Result<Vec<usize>> {
    let mut seen = vec![false; feeder.der_nodes().len()];
    let mut order = Vec::new();
    for node in nodes {
        let idx = feeder.der_index(node).ok_or_else(|| {
            Error::InvalidParameter(format!("rules given for node {node}, which hosts no DER"))
        })?;
        if seen[idx] {
            return Err(Error::InvalidParameter(format!("node {node} has two rule entries")));
        }
        seen[idx] = true;
        order.push(idx);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidParameter(format!(
            "no rule entry for DER node {}",
            feeder.der_nodes()[missing]
        )));
    }
    Ok(order)
}

/// `y = alpha~ (q - mu (v - v_ref))`, written into `out`.
pub(crate) fn pre_activation(
    q: &DVector<f64>,
    v: &DVector<f64>,
    rules: &RuleVectors,
    mu: f64,
    out: &mut DVector<f64>,
) {
    for i in 0..q.len() {
        out[i] = rules.alpha_t[i] * (q[i] - mu * (v[i] - rules.v_ref[i]));
    }
}

/// Momentum weight `beta_t = (t - 1) / (t + 2)`.
pub fn nesterov_beta(t: usize) -> f64 {
    (t as f64 - 1.0) / (t as f64 + 2.0)
}

/// Applies `g` nodewise, optionally recording the branch of every node.
pub(crate) fn prox_vec(
    y: &DVector<f64>,
    rules: &RuleVectors,
    mu: f64,
    q_out: &mut DVector<f64>,
    mut branches: Option<&mut [ProxBranch]>,
) {
    for i in 0..y.len() {
        let thr = mu * rules.delta_t[i];
        let b = prox_branch(y[i], mu, rules.delta_t[i], rules.q_max[i]);
        q_out[i] = prox_on_branch(b, y[i], thr, rules.q_max[i]);
        if let Some(br) = branches.as_deref_mut() {
            br[i] = b;
        }
    }
}

fn check_lengths(n: usize, what: &[(&str, usize)]) -> Result<()> {
    for (name, len) in what {
        if *len != n {
            return Err(Error::Dimension(format!("{name} has {len} entries, expected {n}")));
        }
    }
    Ok(())
}

/// One incremental update `q+ = g(alpha~ (q - mu (v - v_ref)))`.
pub fn incremental_step(
    q: &DVector<f64>,
    v: &DVector<f64>,
    rules: &RuleVectors,
    mu: f64,
) -> Result<DVector<f64>> {
    let n = rules.len();
    check_lengths(n, &[("q", q.len()), ("v", v.len())])?;
    let mut y = DVector::zeros(n);
    pre_activation(q, v, rules, mu, &mut y);
    let mut out = DVector::zeros(n);
    prox_vec(&y, rules, mu, &mut out, None);
    Ok(out)
}

/// One accelerated update: extrapolate `y~ = (1 + beta_t) y_t - beta_t y_{t-1}`
/// and apply `g`. Returns `(q+, y~)`. At `t = 1` the momentum weight is zero.
pub fn accelerated_step(
    y: &DVector<f64>,
    y_prev: &DVector<f64>,
    t: usize,
    rules: &RuleVectors,
    mu: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if t < 1 {
        return Err(Error::InvalidParameter("iteration index must be >= 1".into()));
    }
    let n = rules.len();
    check_lengths(n, &[("y", y.len()), ("y_prev", y_prev.len())])?;
    let beta = nesterov_beta(t);
    let y_ext = y * (1.0 + beta) - y_prev * beta;
    let mut q = DVector::zeros(n);
    prox_vec(&y_ext, rules, mu, &mut q, None);
    Ok((q, y_ext))
}

/// A rules file: either curve parameters or transformed parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum RulesFile {
    Params(Vec<RuleParams>),
    Transformed(Vec<TransformedParams>),
}

/// Reads a rules JSON array. Entries carrying `alpha_t` are read as
/// transformed parameters.
pub fn load_rules(path: impl AsRef<Path>) -> Result<RulesFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rules(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_rules(text: &str) -> Result<RulesFile> {
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let transformed = raw.first().is_some_and(|v| v.get("alpha_t").is_some());
    let parse_err = |e: serde_json::Error| Error::Parse(e.to_string());
    if transformed {
        let v = raw
            .into_iter()
            .map(serde_json::from_value)
            .collect::<Result<Vec<TransformedParams>, _>>()
            .map_err(parse_err)?;
        Ok(RulesFile::Transformed(v))
    } else {
        let v = raw
            .into_iter()
            .map(serde_json::from_value)
            .collect::<Result<Vec<RuleParams>, _>>()
            .map_err(parse_err)?;
        Ok(RulesFile::Params(v))
    }
}
