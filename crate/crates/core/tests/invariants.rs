//! Property tests of model-level invariants across modules.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use vvord::analysis::{depth_bound_contraction, optimal_step_single};
use vvord::dynamics::{self, contraction_norm, default_step, multiphase_step_bound, ControlRule, RuleKind, StopRule};
use vvord::emulator::{forward, DepthPolicy, UnrolledConfig};
use vvord::equilibrium::{solve_inner, solve_inner_problem, InnerProblem};
use vvord::grid::{build_radial_feeder, grid_conditions, spectral_norm, Branch, Scenario};
use vvord::rules::{prox_g, prox_g_relu_form};
use vvord::synth::{self, FeederSpec};
use vvord::trainer::project_box;
use vvord::{FeederModel, RuleParams, TransformedParams};

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn radial(seed: u64, n: usize) -> (FeederModel, ChaCha20Rng) {
    let mut r = rng(seed);
    let f = synth::random_radial_feeder(&FeederSpec::with_nodes(n), &mut r).unwrap();
    (f, r)
}

fn tol(eps: f64) -> StopRule {
    StopRule::Tolerance {
        eps,
        max_iter: 2_000_000,
    }
}

/// Plain projected gradient on the equilibrium objective, written out
/// independently of the library's rule code.
fn projected_gradient(feeder: &FeederModel, z: &[RuleParams], s: &Scenario, mu: f64) -> DVector<f64> {
    let n = feeder.n_nodes();
    let mut q = DVector::zeros(n);
    for _ in 0..1_000_000 {
        let v = feeder.x() * &q + &s.v_tilde;
        let mut next = q.clone();
        for p in z {
            let i = p.node;
            let y = q[i] - mu * (v[i] - p.v_ref);
            let shrunk = y.signum() * (y.abs() - mu * p.delta).max(0.0);
            next[i] = (shrunk / (1.0 + mu / p.alpha)).clamp(-p.q_max, p.q_max);
        }
        let done = (&next - &q).norm() <= 1e-15;
        q = next;
        if done {
            break;
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spectral_norm_matches_svd(seed in any::<u64>(), rows in 1usize..=20, cols in 1usize..=20) {
        let mut r = rng(seed);
        let m = DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-1.0..1.0));
        let oracle = m.clone().svd(false, false).singular_values.max();
        prop_assert!((spectral_norm(&m) - oracle).abs() <= 1e-8 * oracle.max(1e-300));
    }

    #[test]
    fn radial_feeders_are_positive_definite(seed in any::<u64>(), n in 1usize..=12) {
        let mut r = rng(seed);
        let branches: Vec<Branch> = (1..=n)
            .map(|to| Branch { from: r.gen_range(0..to), to, r: r.gen_range(1e-3..0.1), x: r.gen_range(1e-3..0.1) })
            .collect();
        let f = build_radial_feeder(&branches, 1.0).unwrap();
        let x = f.x();
        // nodes whose paths to the substation share no branch couple by exactly 0
        prop_assert!(x.iter().all(|v| *v >= 0.0));
        prop_assert!(x.diagonal().iter().all(|v| *v > 0.0));
        prop_assert_eq!(x, &x.transpose());
        prop_assert!(x.clone().symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn grid_conditions_are_affine(seed in any::<u64>(), n in 1usize..=8, a in -3.0f64..3.0) {
        let (f, mut r) = radial(seed, n);
        let p = DVector::from_fn(n, |_, _| r.gen_range(-0.2..0.2));
        let ql = DVector::from_fn(n, |_, _| r.gen_range(-0.2..0.2));
        let base = grid_conditions(&f, &p, &ql).unwrap().v_tilde.add_scalar(-f.v0());
        let scaled = grid_conditions(&f, &(&p * a), &(&ql * a)).unwrap().v_tilde.add_scalar(-f.v0());
        prop_assert!((scaled - base * a).amax() <= 1e-13);
    }

    #[test]
    fn prox_forms_agree(y in -2.0f64..2.0, mu in 1e-3f64..5.0, delta_t in 0.0f64..0.05, q_max in 0.0f64..1.0) {
        prop_assert!((prox_g(y, mu, delta_t, q_max) - prox_g_relu_form(y, mu, delta_t, q_max)).abs() <= 1e-15);
    }

    #[test]
    fn equilibrium_matches_projected_gradient(seed in any::<u64>(), n in 1usize..=6) {
        let (f, mut r) = radial(seed, n);
        let z = synth::random_stable_params(&f, 0.8, &mut r);
        let s = synth::random_scenario(&f, 0.05, &mut r);
        let mu0 = optimal_step_single(&f).unwrap().mu0;
        let q_pgd = projected_gradient(&f, &z, &s, mu0);
        let q_star = solve_inner(&z, &f, &s, 1e-14).unwrap().q_star;
        prop_assert!((q_star - q_pgd).amax() <= 1e-6);
    }

    #[test]
    fn equilibrium_is_odd_in_the_voltage_offset(seed in any::<u64>(), n in 1usize..=8) {
        let (f, mut r) = radial(seed, n);
        let z = synth::random_stable_params(&f, 0.8, &mut r);
        let s = synth::random_scenario(&f, 0.05, &mut r);
        let v_ref = DVector::from_fn(n, |i, _| z.iter().find(|p| p.node == i).map_or(1.0, |p| p.v_ref));
        let mirrored = Scenario::new(&v_ref * 2.0 - &s.v_tilde).unwrap();
        let q = solve_inner(&z, &f, &s, 1e-14).unwrap().q_star;
        let q_m = solve_inner(&z, &f, &mirrored, 1e-14).unwrap().q_star;
        prop_assert!((q + q_m).amax() <= 1e-10);
    }

    #[test]
    fn all_rule_families_share_the_single_phase_equilibrium(seed in any::<u64>(), n in 1usize..=6) {
        let (f, mut r) = radial(seed, n);
        let z = synth::random_stable_params(&f, 0.7, &mut r);
        let s = synth::random_scenario(&f, 0.05, &mut r);
        let q_star = solve_inner(&z, &f, &s, 1e-14).unwrap().q_star;
        for kind in [RuleKind::NonIncremental, RuleKind::Incremental, RuleKind::Accelerated] {
            let mu = default_step(&f, kind).unwrap();
            let rule = ControlRule::from_params(kind, &f, &z, mu).unwrap();
            let trace = dynamics::simulate(&rule, &f, &s, tol(1e-12)).unwrap();
            prop_assert!(trace.converged(), "{kind} did not converge");
            prop_assert!((trace.final_q() - &q_star).amax() <= 1e-7, "{kind} off the equilibrium");
        }
    }

    #[test]
    fn multiphase_incremental_families_agree(seed in any::<u64>(), n in 2usize..=6) {
        let mut r = rng(seed);
        let f = synth::random_multiphase_feeder(&FeederSpec::with_nodes(n), 0.2, &mut r).unwrap();
        let mu = 0.5 * multiphase_step_bound(&f).unwrap();
        prop_assume!(contraction_norm(f.x(), mu) < 0.999);
        let zt = synth::random_transformed(&f, &mut r);
        let s = synth::random_scenario(&f, 0.05, &mut r);
        let inc = dynamics::simulate(&ControlRule::incremental(&f, &zt, mu).unwrap(), &f, &s, tol(1e-13)).unwrap();
        let acc = dynamics::simulate(&ControlRule::accelerated(&f, &zt, mu).unwrap(), &f, &s, tol(1e-13)).unwrap();
        prop_assert!(inc.converged());
        prop_assume!(acc.converged());
        prop_assert!((inc.final_q() - acc.final_q()).amax() <= 1e-7);
    }

    #[test]
    fn contraction_depth_meets_fidelity(seed in any::<u64>(), n in 2usize..=10) {
        let (f, mut r) = radial(seed, n);
        let opt = optimal_step_single(&f).unwrap();
        prop_assume!(opt.kappa <= 100.0);
        let eps1 = 1e-5;
        let t = depth_bound_contraction(opt.contraction, spectral_norm(f.x()), f.rating_norm(), eps1).unwrap();
        let zt = synth::random_transformed(&f, &mut r);
        let s = synth::random_scenario(&f, 0.1, &mut r);
        let problem = InnerProblem::from_transformed(&f, &zt, opt.mu0).unwrap();
        let v_star = solve_inner_problem(&problem, &f, &s, 1e-14).unwrap().v_star;
        let cfg = UnrolledConfig { mu: opt.mu0, accelerated: false, depth: DepthPolicy::Fixed(t) };
        let tape = forward(&zt, &f, &s, &cfg).unwrap();
        prop_assert!((tape.final_v() - v_star).norm() <= eps1);
    }

    #[test]
    fn projection_lands_in_the_box(seed in any::<u64>(), n in 1usize..=6) {
        let (f, mut r) = radial(seed, n);
        let wild: Vec<TransformedParams> = (0..n)
            .map(|node| TransformedParams {
                node,
                v_ref: r.gen_range(0.5..1.5),
                delta_t: r.gen_range(-0.1..0.1),
                alpha_t: r.gen_range(-1.0..2.0),
                q_max: r.gen_range(-1.0..2.0),
            })
            .collect();
        for (p, rating) in project_box(&wild, &f).iter().zip(f.q_rating()) {
            prop_assert!(p.delta_t >= 0.0);
            prop_assert!((0.0..=1.0).contains(&p.alpha_t));
            prop_assert!((0.0..=*rating).contains(&p.q_max));
            prop_assert!(p.validate(*rating).is_ok());
        }
    }
}
