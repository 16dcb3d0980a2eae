//! Unrolled emulator of the incremental dynamics and its reverse-mode
//! gradient.
//!
//! Each layer of the unroll is one rule update. All layers share the same
//! weights, the transformed parameters `(v_ref, delta~, alpha~, q_max)` of
//! every DER, so the network has `4 N` trainable parameters whatever its
//! depth. The forward pass runs the exact kernel used by
//! [`dynamics::simulate`](crate::dynamics::simulate) and records the branch of
//! the proximal map taken by every node at every layer; the backward pass
//! differentiates the piecewise-linear unroll along those branches.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{run_incremental, StopRule, TraceStatus};
use crate::rules::{self, der_order, ProxBranch, RuleVectors};
use crate::util::pairwise_mean;
use crate::{Error, FeederModel, Result, Scenario, TransformedParams};

/// How many layers the unroll runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthPolicy {
    /// Exactly this many layers.
    Fixed(usize),
    /// Stop once `||q^t - q^{t-1}||_2 <= eps`, after at most `max_layers`.
    Dynamic { eps: f64, max_layers: usize },
}

impl Default for DepthPolicy {
    fn default() -> Self {
        DepthPolicy::Dynamic {
            eps: 1e-6,
            max_layers: 5000,
        }
    }
}

impl DepthPolicy {
    fn stop_rule(self) -> StopRule {
        match self {
            DepthPolicy::Fixed(t) => StopRule::Fixed(t),
            DepthPolicy::Dynamic { eps, max_layers } => StopRule::Tolerance {
                eps,
                max_iter: max_layers,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnrolledConfig {
    pub mu: f64,
    pub accelerated: bool,
    pub depth: DepthPolicy,
}

impl UnrolledConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("step size {} must be positive", self.mu)));
        }
        match self.depth {
            DepthPolicy::Fixed(0) => Err(Error::InvalidParameter("depth must be at least 1".into())),
            DepthPolicy::Dynamic { eps, max_layers } if !(eps > 0.0) || max_layers == 0 => {
                Err(Error::InvalidParameter(format!(
                    "dynamic depth needs eps > 0 and max_layers >= 1 (got {eps}, {max_layers})"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Activations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeLayer {
    pub beta: f64,
    /// Pre-activation `alpha~ (q^{t-1} - mu (v^{t-1} - v_ref))`.
    pub y: DVector<f64>,
    pub branches: Vec<ProxBranch>,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

/// Recorded forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub layers: Vec<TapeLayer>,
    pub v_tilde: DVector<f64>,
    pub rules: RuleVectors,
    pub mu: f64,
    pub accelerated: bool,
    /// DER nodes in the order of the parameter slice given to [`forward`].
    pub nodes: Vec<usize>,
    /// The dynamic policy ran out of layers before meeting its tolerance.
    pub truncated: bool,
}

impl GradientTape {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn final_v(&self) -> &DVector<f64> {
        &self.layers.last().expect("tape has at least one layer").v
    }

    /// `||v^T - 1||^2`.
    pub fn loss(&self) -> f64 {
        self.final_v().iter().map(|v| (v - 1.0) * (v - 1.0)).sum()
    }

    /// Re-runs the unroll forcing the recorded branches. Bit-identical to the
    /// recorded `v^T` for a tape produced by [`forward`].
    pub fn replay(&self, feeder: &FeederModel) -> DVector<f64> {
        let n = self.v_tilde.len();
        let mut q = DVector::zeros(n);
        let mut v = self.v_tilde.clone();
        let mut y = DVector::zeros(n);
        let mut y_prev: DVector<f64> = DVector::zeros(n);
        for layer in &self.layers {
            rules::pre_activation(&q, &v, &self.rules, self.mu, &mut y);
            let beta = layer.beta;
            for i in 0..n {
                let y_ext = if beta != 0.0 { (1.0 + beta) * y[i] - beta * y_prev[i] } else { y[i] };
                let thr = self.mu * self.rules.delta_t[i];
                q[i] = rules::prox_on_branch(layer.branches[i], y_ext, thr, self.rules.q_max[i]);
            }
            v.copy_from(&self.v_tilde);
            v.gemv(1.0, feeder.x(), &q, 1.0);
            std::mem::swap(&mut y, &mut y_prev);
        }
        v
    }
}

/// Gradient of one DER's transformed parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamGradient {
    pub node: usize,
    pub v_ref: f64,
    pub delta_t: f64,
    pub alpha_t: f64,
    pub q_max: f64,
}

impl ParamGradient {
    pub fn as_array(&self) -> [f64; 4] {
        [self.v_ref, self.delta_t, self.alpha_t, self.q_max]
    }
}

/// Flattens gradients as `(v_ref, delta~, alpha~, q_max)` per DER.
pub fn flatten(grad: &[ParamGradient]) -> Vec<f64> {
    grad.iter().flat_map(|g| g.as_array()).collect()
}

/// Runs the unroll and records the tape.
pub fn forward(
    params: &[TransformedParams],
    feeder: &FeederModel,
    scenario: &Scenario,
    config: &UnrolledConfig,
) -> Result<GradientTape> {
    config.validate()?;
    let n = feeder.n_nodes();
    if scenario.len() != n {
        return Err(Error::Dimension(format!(
            "scenario has {} entries, feeder has {n} nodes",
            scenario.len()
        )));
    }
    let rules = RuleVectors::from_transformed(feeder, params)?;
    let mut layers = Vec::new();
    let summary = run_incremental(
        &rules,
        config.mu,
        config.accelerated,
        feeder,
        &scenario.v_tilde,
        config.depth.stop_rule(),
        |layer| {
            layers.push(TapeLayer {
                beta: layer.beta,
                y: layer.y.clone(),
                branches: layer.branches.to_vec(),
                q: layer.q.clone(),
                v: layer.v.clone(),
            })
        },
    );
    if summary.status == TraceStatus::Diverged {
        return Err(Error::NoConvergence(format!(
            "unroll diverged after {} layers",
            summary.iterations
        )));
    }
    Ok(GradientTape {
        layers,
        v_tilde: scenario.v_tilde.clone(),
        rules,
        mu: config.mu,
        accelerated: config.accelerated,
        nodes: params.iter().map(|p| p.node).collect(),
        truncated: summary.status == TraceStatus::MaxIterations,
    })
}

/// `d ||v^T - 1||^2 / d z~`, one entry per DER in tape order.
pub fn backward(tape: &GradientTape, feeder: &FeederModel) -> Vec<ParamGradient> {
    let n = tape.v_tilde.len();
    let x = feeder.x();
    let mu = tape.mu;
    let r = &tape.rules;
    let mut g_vref = DVector::zeros(n);
    let mut g_delta = DVector::zeros(n);
    let mut g_alpha = DVector::zeros(n);
    let mut g_qmax = DVector::zeros(n);

    // adjoints flowing into layer k from the loss and from layer k + 1
    let mut adj_v = tape.final_v().map(|v| 2.0 * (v - 1.0));
    let mut carry_q: DVector<f64> = DVector::zeros(n);
    let mut carry_y: DVector<f64> = DVector::zeros(n);
    let mut adj_q = DVector::zeros(n);
    let zeros = DVector::zeros(n);

    for k in (0..tape.layers.len()).rev() {
        let layer = &tape.layers[k];
        adj_q.copy_from(&carry_q);
        adj_q.gemv_tr(1.0, x, &adj_v, 1.0);
        let (q_prev, v_prev) = if k == 0 {
            (&zeros, &tape.v_tilde)
        } else {
            (&tape.layers[k - 1].q, &tape.layers[k - 1].v)
        };
        for i in 0..n {
            let b = layer.branches[i];
            let a_q = adj_q[i];
            g_delta[i] += mu * b.threshold_sensitivity() * a_q;
            g_qmax[i] += b.limit_sensitivity() * a_q;
            let a_ext = b.slope() * a_q;
            let a_y = (1.0 + layer.beta) * a_ext + carry_y[i];
            carry_y[i] = -layer.beta * a_ext;
            let w = q_prev[i] - mu * (v_prev[i] - r.v_ref[i]);
            g_alpha[i] += a_y * w;
            g_vref[i] += mu * r.alpha_t[i] * a_y;
            carry_q[i] = r.alpha_t[i] * a_y;
            adj_v[i] = -mu * r.alpha_t[i] * a_y;
        }
    }

    tape.nodes
        .iter()
        .map(|&node| ParamGradient {
            node,
            v_ref: g_vref[node],
            delta_t: g_delta[node],
            alpha_t: g_alpha[node],
            q_max: g_qmax[node],
        })
        .collect()
}

/// Mean loss and gradient over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<ParamGradient>,
    /// Unroll depth per batch member.
    pub depths: Vec<usize>,
    /// Batch members whose dynamic unroll hit its layer cap.
    pub truncated: usize,
}

/// Evaluates the batch in parallel and reduces in a fixed order, so the
/// result does not depend on the number of worker threads.
pub fn loss_and_grad_batch(
    params: &[TransformedParams],
    feeder: &FeederModel,
    batch: &[Scenario],
    config: &UnrolledConfig,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    der_order(feeder, params.iter().map(|p| p.node))?;
    let per: Vec<(f64, Vec<f64>, usize, bool)> = batch
        .par_iter()
        .map(|s| {
            let tape = forward(params, feeder, s, config)?;
            let grad = flatten(&backward(&tape, feeder));
            Ok((tape.loss(), grad, tape.depth(), tape.truncated))
        })
        .collect::<Result<_>>()?;

    let losses: Vec<f64> = per.iter().map(|p| p.0).collect();
    let mut column = vec![0.0; per.len()];
    let mut flat = vec![0.0; 4 * params.len()];
    for (j, out) in flat.iter_mut().enumerate() {
        for (c, p) in column.iter_mut().zip(&per) {
            *c = p.1[j];
        }
        *out = pairwise_mean(&column);
    }
    let grad = params
        .iter()
        .enumerate()
        .map(|(d, p)| ParamGradient {
            node: p.node,
            v_ref: flat[4 * d],
            delta_t: flat[4 * d + 1],
            alpha_t: flat[4 * d + 2],
            q_max: flat[4 * d + 3],
        })
        .collect();
    Ok(BatchGradient {
        loss: pairwise_mean(&losses),
        grad,
        depths: per.iter().map(|p| p.2).collect(),
        truncated: per.iter().filter(|p| p.3).count(),
    })
}

/// Smallest distance from any DER pre-activation on the tape to a breakpoint
/// of the proximal map.
pub fn breakpoint_margin(tape: &GradientTape) -> f64 {
    let n = tape.v_tilde.len();
    let mut margin = f64::INFINITY;
    let mut y_prev: DVector<f64> = DVector::zeros(n);
    for layer in &tape.layers {
        for &node in &tape.nodes {
            let beta = layer.beta;
            let y = if beta != 0.0 {
                (1.0 + beta) * layer.y[node] - beta * y_prev[node]
            } else {
                layer.y[node]
            };
            let thr = tape.mu * tape.rules.delta_t[node];
            let qm = tape.rules.q_max[node];
            for bp in [thr, -thr, thr + qm, -thr - qm] {
                margin = margin.min((y - bp).abs());
            }
        }
        y_prev.copy_from(&layer.y);
    }
    margin
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{self, ControlRule};
    use crate::equilibrium::objective;
    use crate::equilibrium::RuleSource;
    use crate::synth;
    use crate::PhaseLayout;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn bus(x: f64) -> FeederModel {
        FeederModel::new(dmatrix![x], dmatrix![x], 1.0, PhaseLayout::Single, vec![0], vec![1.0]).unwrap()
    }

    fn one(v_ref: f64, delta_t: f64, alpha_t: f64, q_max: f64) -> Vec<TransformedParams> {
        vec![TransformedParams {
            node: 0,
            v_ref,
            delta_t,
            alpha_t,
            q_max,
        }]
    }

    fn sc(v: &[f64]) -> Scenario {
        Scenario::new(DVector::from_column_slice(v)).unwrap()
    }

    fn fixed(mu: f64, accelerated: bool, t: usize) -> UnrolledConfig {
        UnrolledConfig {
            mu,
            accelerated,
            depth: DepthPolicy::Fixed(t),
        }
    }

    #[test]
    fn forward_matches_simulation_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for trial in 0..20 {
            let f = synth::random_radial_feeder(&synth::FeederSpec::with_nodes(2 + trial % 8), &mut rng).unwrap();
            let mu = dynamics::default_step(&f, dynamics::RuleKind::Accelerated).unwrap();
            let z = synth::random_transformed(&f, &mut rng);
            let s = synth::random_scenario(&f, 0.05, &mut rng);
            for accelerated in [false, true] {
                let tape = forward(&z, &f, &s, &fixed(mu, accelerated, 60)).unwrap();
                let rule = if accelerated {
                    ControlRule::accelerated(&f, &z, mu).unwrap()
                } else {
                    ControlRule::incremental(&f, &z, mu).unwrap()
                };
                let trace = dynamics::simulate(&rule, &f, &s, StopRule::Fixed(60)).unwrap();
                assert_eq!(tape.final_v(), trace.final_v());
                assert_eq!(&tape.replay(&f), tape.final_v());
            }
        }
    }

    #[test]
    fn flat_grid_is_all_dead() {
        let tape = forward(&one(1.0, 0.0, 0.5, 1.0), &bus(0.5), &sc(&[1.0]), &fixed(1.0, true, 5)).unwrap();
        assert_eq!(tape.final_v()[0], 1.0);
        assert!(tape.layers.iter().all(|l| l.branches[0] == ProxBranch::Dead));
        let g = backward(&tape, &bus(0.5));
        assert_eq!((g[0].v_ref, g[0].alpha_t), (0.0, 0.0));
    }

    #[test]
    fn deadband_never_exited_has_zero_gradient() {
        let f = bus(0.5);
        let tape = forward(&one(1.0, 0.05, 0.5, 1.0), &f, &sc(&[1.02]), &fixed(1.0, false, 20)).unwrap();
        assert!(tape.layers.iter().all(|l| l.branches[0] == ProxBranch::Dead));
        let g = backward(&tape, &f);
        assert_eq!((g[0].v_ref, g[0].alpha_t, g[0].q_max), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_layer_is_one_incremental_step() {
        let f = bus(0.5);
        let z = one(1.0, 0.01, 0.5, 1.0);
        let s = sc(&[1.2]);
        let tape = forward(&z, &f, &s, &fixed(1.0, false, 1)).unwrap();
        let rules = RuleVectors::from_transformed(&f, &z).unwrap();
        let q = rules::incremental_step(&DVector::zeros(1), &s.v_tilde, &rules, 1.0).unwrap();
        assert_eq!(tape.layers[0].q, q);
    }

    #[test]
    fn single_layer_hand_derivative() {
        let (x, mu, v_ref, v0) = (0.5, 0.8, 1.01, 1.2);
        let f = bus(x);
        let tape = forward(&one(v_ref, 0.0, 0.6, 1.0), &f, &sc(&[v0]), &fixed(mu, false, 1)).unwrap();
        assert_eq!(tape.layers[0].branches[0], ProxBranch::LinNeg);
        let v1 = tape.final_v()[0];
        // dv1/dalpha~ = x (q0 - mu (v0 - v_ref)) with q0 = 0
        let dv_dalpha = x * (0.0 - mu * (v0 - v_ref));
        let g = backward(&tape, &f);
        assert!((g[0].alpha_t - 2.0 * (v1 - 1.0) * dv_dalpha).abs() < 1e-15);
    }

    fn loss_at(z: &[TransformedParams], f: &FeederModel, s: &Scenario, cfg: &UnrolledConfig) -> f64 {
        forward(z, f, s, cfg).unwrap().loss()
    }

    fn perturbed(z: &[TransformedParams], d: usize, k: usize, h: f64) -> Vec<TransformedParams> {
        let mut out = z.to_vec();
        match k {
            0 => out[d].v_ref += h,
            1 => out[d].delta_t += h,
            2 => out[d].alpha_t += h,
            _ => out[d].q_max += h,
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 24 {
            let n = [2, 5, 10][checked % 3];
            let f = synth::random_radial_feeder(&synth::FeederSpec::with_nodes(n), &mut rng).unwrap();
            let mu = dynamics::default_step(&f, dynamics::RuleKind::Accelerated).unwrap();
            let z = synth::random_transformed(&f, &mut rng);
            if z.iter().any(|p| p.v_ref < 0.95 + h || p.v_ref > 1.05 - h || p.alpha_t > 1.0 - h || p.delta_t < h) {
                continue;
            }
            let s = synth::random_scenario(&f, 0.05, &mut rng);
            let cfg = fixed(mu, rng.gen_bool(0.5), 40);
            let tape = forward(&z, &f, &s, &cfg).unwrap();
            if breakpoint_margin(&tape) < 1e-4 {
                continue;
            }
            let analytic = flatten(&backward(&tape, &f));
            let mut numeric = Vec::new();
            for d in 0..z.len() {
                for k in 0..4 {
                    let up = loss_at(&perturbed(&z, d, k, h), &f, &s, &cfg);
                    let dn = loss_at(&perturbed(&z, d, k, -h), &f, &s, &cfg);
                    numeric.push((up - dn) / (2.0 * h));
                }
            }
            let a = DVector::from_vec(analytic);
            let b = DVector::from_vec(numeric);
            let rel = (&a - &b).norm() / b.norm().max(1e-12);
            assert!(rel <= 1e-5, "n={n}: relative error {rel:e}");
            checked += 1;
        }
    }

    #[test]
    fn batch_of_copies_matches_single() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let f = synth::random_radial_feeder(&synth::FeederSpec::with_nodes(5), &mut rng).unwrap();
        let z = synth::random_transformed(&f, &mut rng);
        let s = synth::random_scenario(&f, 0.05, &mut rng);
        let cfg = UnrolledConfig {
            mu: dynamics::default_step(&f, dynamics::RuleKind::Accelerated).unwrap(),
            accelerated: true,
            depth: DepthPolicy::default(),
        };
        let single = loss_and_grad_batch(&z, &f, std::slice::from_ref(&s), &cfg).unwrap();
        let copies = loss_and_grad_batch(&z, &f, &vec![s.clone(); 4], &cfg).unwrap();
        assert_eq!(single.loss, copies.loss);
        assert_eq!(single.grad, copies.grad);

        let batch: Vec<Scenario> = (0..5).map(|_| synth::random_scenario(&f, 0.05, &mut rng)).collect();
        let doubled: Vec<Scenario> = batch.iter().chain(batch.iter()).cloned().collect();
        let a = loss_and_grad_batch(&z, &f, &batch, &cfg).unwrap();
        let b = loss_and_grad_batch(&z, &f, &doubled, &cfg).unwrap();
        assert!((a.loss - b.loss).abs() <= 1e-15 * a.loss.abs());
        for (ga, gb) in flatten(&a.grad).iter().zip(flatten(&b.grad)) {
            assert!((ga - gb).abs() <= 1e-14 * ga.abs().max(1e-12));
        }
        assert!(loss_and_grad_batch(&z, &f, &[], &cfg).is_err());
    }

    #[test]
    fn converged_loss_equals_objective() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let f = synth::random_radial_feeder(&synth::FeederSpec::with_nodes(6), &mut rng).unwrap();
        let z = synth::random_transformed(&f, &mut rng);
        let mu = dynamics::default_step(&f, dynamics::RuleKind::Incremental).unwrap();
        let batch: Vec<Scenario> = (0..6).map(|_| synth::random_scenario(&f, 0.05, &mut rng)).collect();
        let cfg = UnrolledConfig {
            mu,
            accelerated: false,
            depth: DepthPolicy::Dynamic {
                eps: 1e-12,
                max_layers: 200_000,
            },
        };
        let out = loss_and_grad_batch(&z, &f, &batch, &cfg).unwrap();
        assert_eq!(out.truncated, 0);
        let obj = objective(RuleSource::Transformed { params: &z, mu }, &f, &batch).unwrap();
        assert!((out.loss - obj).abs() <= 1e-9, "{} vs {obj}", out.loss);
    }

    #[test]
    fn truncation_is_flagged() {
        let f = bus(0.5);
        let cfg = UnrolledConfig {
            mu: 0.1,
            accelerated: false,
            depth: DepthPolicy::Dynamic {
                eps: 1e-14,
                max_layers: 3,
            },
        };
        let tape = forward(&one(1.0, 0.0, 0.5, 1.0), &f, &sc(&[1.2]), &cfg).unwrap();
        assert!(tape.truncated);
        assert_eq!(tape.depth(), 3);
        assert_eq!(backward(&tape, &f).len(), 1);
    }

    #[test]
    fn parameter_count_is_independent_of_depth() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let f = synth::random_radial_feeder(&synth::FeederSpec::with_nodes(7), &mut rng).unwrap();
        let z = synth::random_transformed(&f, &mut rng);
        let s = synth::random_scenario(&f, 0.05, &mut rng);
        for t in [1, 10, 100] {
            let tape = forward(&z, &f, &s, &fixed(0.5, true, t)).unwrap();
            assert_eq!(flatten(&backward(&tape, &f)).len(), 4 * f.der_nodes().len());
        }
    }

    #[test]
    fn tiny_perturbation_keeps_branches() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let mut tested = 0;
        while tested < 10 {
            let f = synth::random_radial_feeder(&synth::FeederSpec::with_nodes(5), &mut rng).unwrap();
            let z = synth::random_transformed(&f, &mut rng);
            let s = synth::random_scenario(&f, 0.05, &mut rng);
            let cfg = fixed(0.5, true, 30);
            let tape = forward(&z, &f, &s, &cfg).unwrap();
            if breakpoint_margin(&tape) < 1e-8 {
                continue;
            }
            let mut z2 = z.clone();
            z2[0].alpha_t = (z2[0].alpha_t - 5e-13).max(0.0);
            let tape2 = forward(&z2, &f, &s, &cfg).unwrap();
            for (a, b) in tape.layers.iter().zip(&tape2.layers) {
                assert_eq!(a.branches, b.branches);
            }
            tested += 1;
        }
    }

    #[test]
    fn config_validation() {
        let f = bus(0.5);
        let z = one(1.0, 0.0, 0.5, 1.0);
        assert!(forward(&z, &f, &sc(&[1.0]), &fixed(0.0, false, 3)).is_err());
        assert!(forward(&z, &f, &sc(&[1.0]), &fixed(1.0, false, 0)).is_err());
        assert!(forward(&z, &f, &sc(&[1.0, 1.0]), &fixed(1.0, false, 3)).is_err());
        assert!(forward(&one(1.0, 0.0, 1.2, 1.0), &f, &sc(&[1.0]), &fixed(1.0, false, 3)).is_err());
    }
}
