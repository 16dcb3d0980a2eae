//! Random feeders, rules and scenarios for tests, benchmarks and demos.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::{stability_from_slopes, step_bound_for_matrix};
use crate::grid::{build_radial_feeder, Branch};
use crate::{FeederModel, PhaseLayout, Result, RuleParams, Scenario, TransformedParams};

/// Sampling ranges for a random radial feeder. Every bus hosts a DER.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederSpec {
    pub n_nodes: usize,
    pub reactance: (f64, f64),
    pub r_over_x: (f64, f64),
    pub rating: (f64, f64),
    pub v0: f64,
}

impl FeederSpec {
    pub fn with_nodes(n_nodes: usize) -> Self {
        FeederSpec {
            n_nodes,
            reactance: (0.02, 0.1),
            r_over_x: (0.5, 2.0),
            rating: (0.2, 0.5),
            v0: 1.0,
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Random tree: bus `i` attaches to a uniformly chosen earlier bus.
pub fn random_radial_feeder(spec: &FeederSpec, rng: &mut impl Rng) -> Result<FeederModel> {
    let branches: Vec<Branch> = (1..=spec.n_nodes)
        .map(|to| {
            let x = uniform(rng, spec.reactance);
            let r = x * uniform(rng, spec.r_over_x);
            Branch {
                from: rng.gen_range(0..to),
                to,
                r,
                x,
            }
        })
        .collect();
    let base = build_radial_feeder(&branches, spec.v0)?;
    let ratings = (0..spec.n_nodes).map(|_| uniform(rng, spec.rating)).collect();
    base.with_ders((0..spec.n_nodes).collect(), ratings)
}

/// Asymmetric sensitivity matrix: a random radial `X` plus a relative
/// asymmetric perturbation of size `skew`, resampled until incremental rules
/// admit a positive step.
pub fn random_multiphase_feeder(spec: &FeederSpec, skew: f64, rng: &mut impl Rng) -> Result<FeederModel> {
    loop {
        let radial = random_radial_feeder(spec, rng)?;
        let n = spec.n_nodes;
        let scale = radial.x().amax();
        let noise = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0) * skew * scale);
        let x = radial.x() + noise;
        if !matches!(step_bound_for_matrix(&x), Ok(b) if b > 0.0) {
            continue;
        }
        return FeederModel::new(
            x,
            radial.r().clone(),
            spec.v0,
            PhaseLayout::Multi,
            radial.der_nodes().to_vec(),
            radial.q_rating().to_vec(),
        );
    }
}

/// Random feasible transformed parameters for every DER, kept a little away
/// from the box faces.
pub fn random_transformed(feeder: &FeederModel, rng: &mut impl Rng) -> Vec<TransformedParams> {
    feeder
        .der_nodes()
        .iter()
        .zip(feeder.q_rating())
        .map(|(&node, &rating)| TransformedParams {
            node,
            v_ref: rng.gen_range(0.97..1.03),
            delta_t: rng.gen_range(0.001..0.01),
            alpha_t: rng.gen_range(0.2..0.95),
            q_max: rating * rng.gen_range(0.2..0.9),
        })
        .collect()
}

/// Random curve parameters whose non-incremental rules are stable with
/// `||diag(alpha) X||_2 = margin`.
pub fn random_stable_params(feeder: &FeederModel, margin: f64, rng: &mut impl Rng) -> Vec<RuleParams> {
    let mut params: Vec<RuleParams> = feeder
        .der_nodes()
        .iter()
        .zip(feeder.q_rating())
        .map(|(&node, &rating)| RuleParams {
            node,
            v_ref: rng.gen_range(0.98..1.02),
            delta: rng.gen_range(0.0..0.01),
            alpha: rng.gen_range(0.5..2.0),
            q_max: rating * rng.gen_range(0.3..1.0),
            sigma: None,
        })
        .collect();
    let mut slopes = DVector::zeros(feeder.n_nodes());
    for p in &params {
        slopes[p.node] = p.alpha;
    }
    let norm = stability_from_slopes(&slopes, feeder.x()).norm;
    for p in &mut params {
        p.alpha *= margin / norm;
    }
    params
}

/// `v~` with every entry drawn from `1 +- spread`.
pub fn random_scenario(feeder: &FeederModel, spread: f64, rng: &mut impl Rng) -> Scenario {
    let v = DVector::from_fn(feeder.n_nodes(), |_, _| 1.0 + rng.gen_range(-spread..=spread));
    Scenario::new(v).expect("finite draw")
}
