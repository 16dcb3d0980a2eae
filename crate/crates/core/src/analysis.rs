//! Step sizes, emulator depth bounds and iteration estimates.
//!
//! All logarithms are natural and depths are the ceiling of the real-valued
//! bound, never below one layer.

use serde::Serialize;

use crate::dynamics::contraction_norm;
use crate::grid::{spectral_norm, symmetric_eig_extremes};
use crate::util::ceil_tol;
use crate::{Error, FeederModel, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimalStep {
    pub mu0: f64,
    /// `1 - 2/(kappa + 1)`, the minimum of `||I - mu X||_2` over `mu`.
    pub contraction: f64,
    pub kappa: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

/// `mu0 = 2 / (lambda_max(X) + lambda_min(X))` for a single-phase feeder.
pub fn optimal_step_single(feeder: &FeederModel) -> Result<OptimalStep> {
    if !feeder.is_single_phase() {
        return Err(Error::WrongLayout {
            expected: "single-phase",
        });
    }
    let (lmin, lmax) = symmetric_eig_extremes(feeder.x())?;
    if lmin <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            name: "X".into(),
            min_eig: lmin,
        });
    }
    let kappa = lmax / lmin;
    Ok(OptimalStep {
        mu0: 2.0 / (lmax + lmin),
        contraction: 1.0 - 2.0 / (kappa + 1.0),
        kappa,
        lambda_min: lmin,
        lambda_max: lmax,
    })
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} = {v} must be positive")))
    }
}

/// Depth `T >= ((kappa - 1)/2) ln(2 ||X|| ||q^|| / eps1)` for the plain
/// incremental emulator at `mu0`.
pub fn depth_bound_single(kappa: f64, x_norm: f64, q_norm: f64, eps1: f64) -> Result<usize> {
    if !(kappa >= 1.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!("kappa = {kappa} must be >= 1")));
    }
    check_positive("||X||", x_norm)?;
    check_positive("||q^||", q_norm)?;
    check_positive("eps1", eps1)?;
    let ratio = 2.0 * x_norm * q_norm / eps1;
    if ratio <= 1.0 {
        return Ok(1);
    }
    let t = 0.5 * (kappa - 1.0) * ratio.ln();
    Ok((ceil_tol(t) as usize).max(1))
}

/// Depth `T >= ln(eps1 / (2 ||X|| ||q^||)) / ln ||I - mu X||` given the
/// contraction factor directly.
pub fn depth_bound_contraction(contraction: f64, x_norm: f64, q_norm: f64, eps1: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&contraction) {
        return Err(Error::InvalidParameter(format!(
            "||I - mu X|| = {contraction} is not a contraction"
        )));
    }
    check_positive("||X||", x_norm)?;
    check_positive("||q^||", q_norm)?;
    check_positive("eps1", eps1)?;
    let ratio = eps1 / (2.0 * x_norm * q_norm);
    if ratio >= 1.0 {
        return Ok(1);
    }
    if contraction == 0.0 {
        return Ok(1);
    }
    let t = ratio.ln() / contraction.ln();
    Ok((ceil_tol(t) as usize).max(1))
}

/// Multiphase depth bound at step `mu`; errors unless `||I - mu X||_2 < 1`.
pub fn depth_bound_multiphase(feeder: &FeederModel, mu: f64, q_norm: f64, eps1: f64) -> Result<usize> {
    check_positive("mu", mu)?;
    let c = contraction_norm(feeder.x(), mu);
    if c >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "||I - mu X||_2 = {c} >= 1 at mu = {mu}"
        )));
    }
    depth_bound_contraction(c, spectral_norm(feeder.x()), q_norm, eps1)
}

fn iteration_estimate(factor: f64, eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("eps = {eps} must lie in (0, 1)")));
    }
    let t = -2.0 * eps.ln() / std::f64::consts::LN_2 * factor;
    Ok(ceil_tol(t) as usize)
}

/// `-(2 ln eps / ln 2) kappa` iterations for plain proximal gradient.
pub fn pgd_iteration_estimate(kappa: f64, eps: f64) -> Result<usize> {
    if !(kappa >= 1.0) {
        return Err(Error::InvalidParameter(format!("kappa = {kappa} must be >= 1")));
    }
    iteration_estimate(kappa, eps)
}

/// `-(2 ln eps / ln 2) sqrt(kappa)` iterations for the accelerated variant.
pub fn apgd_iteration_estimate(kappa: f64, eps: f64) -> Result<usize> {
    if !(kappa >= 1.0) {
        return Err(Error::InvalidParameter(format!("kappa = {kappa} must be >= 1")));
    }
    iteration_estimate(kappa.sqrt(), eps)
}
