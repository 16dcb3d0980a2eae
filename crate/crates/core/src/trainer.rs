//! Projected stochastic training of incremental rule parameters.
//!
//! Each step draws a batch of scenarios, differentiates the mean squared
//! voltage deviation through the unrolled emulator, takes an SGD or Adam
//! step in transformed coordinates and clips back onto the feasible box.
//! The objective is re-evaluated on the full scenario set with the
//! equilibrium solver at every epoch boundary and the best iterate is kept.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, check_stability_noninc, contraction_norm, RuleKind, Stability};
use crate::emulator::{loss_and_grad_batch, DepthPolicy, UnrolledConfig};
use crate::equilibrium::{evaluate_scenarios, RuleSource, ScenarioEvaluation, DEFAULT_TOL};
use crate::rules::{self, der_order, V_REF_MAX, V_REF_MIN};
use crate::util::pairwise_mean;
use crate::{Error, FeederModel, Result, RuleParams, Scenario, TransformedParams};

/// Curve preset used to initialize training: `(v_ref, delta, q_max cap, alpha)`.
pub const PRESET_V_REF: f64 = 0.95;
pub const PRESET_DELTA: f64 = 0.01;
pub const PRESET_Q_MAX: f64 = 0.3;
pub const PRESET_ALPHA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::adam()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Init {
    /// The fixed curve preset mapped into transformed coordinates.
    Preset,
    Explicit(Vec<TransformedParams>),
}

/// Which parameter groups move during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    pub v_ref: bool,
    pub delta_t: bool,
    pub alpha_t: bool,
    pub q_max: bool,
}

impl Default for TrainMask {
    fn default() -> Self {
        TrainMask {
            v_ref: true,
            delta_t: true,
            alpha_t: true,
            q_max: true,
        }
    }
}

impl TrainMask {
    fn as_array(self) -> [bool; 4] {
        [self.v_ref, self.delta_t, self.alpha_t, self.q_max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub mu: f64,
    pub accelerated: bool,
    pub depth: DepthPolicy,
    pub init: Init,
    pub mask: TrainMask,
    /// Record parameters every this many epochs (epoch 0 included).
    pub snapshot_every: Option<usize>,
}

impl TrainConfig {
    /// Adam with learning rate 0.001, batch 8 and the accelerated unroll.
    pub fn new(mu: f64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 100,
            optimizer: Optimizer::default(),
            seed: 0,
            mu,
            accelerated: true,
            depth: DepthPolicy::default(),
            init: Init::Preset,
            mask: TrainMask::default(),
            snapshot_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be nonnegative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter("batch size and epochs must be at least 1".into()));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::InvalidParameter("snapshot cadence must be at least 1".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "bad Adam settings beta1={beta1} beta2={beta2} eps={eps}"
                )));
            }
        }
        self.unrolled().validate()
    }

    fn unrolled(&self) -> UnrolledConfig {
        UnrolledConfig {
            mu: self.mu,
            accelerated: self.accelerated,
            depth: self.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub params: Vec<TransformedParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Full-set objective before training and after every epoch.
    pub epoch_objective: Vec<f64>,
    /// Batch loss at every step, `epochs * steps_per_epoch` entries.
    pub step_loss: Vec<f64>,
    pub steps_per_epoch: usize,
    pub snapshots: Vec<Snapshot>,
    pub best_epoch: usize,
    /// Batch members whose dynamic unroll hit the layer cap, summed over steps.
    pub truncated_unrolls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Vec<TransformedParams>,
    pub history: TrainHistory,
}

/// The preset curve `(0.95, 0.01, min(0.3, rating), 1.5)` for every DER in
/// transformed coordinates.
pub fn preset_params(feeder: &FeederModel, mu: f64) -> Result<Vec<TransformedParams>> {
    feeder
        .der_nodes()
        .iter()
        .zip(feeder.q_rating())
        .map(|(&node, &rating)| {
            let z = RuleParams {
                node,
                v_ref: PRESET_V_REF,
                delta: PRESET_DELTA,
                alpha: PRESET_ALPHA,
                q_max: PRESET_Q_MAX.min(rating),
                sigma: None,
            };
            rules::to_transformed(&z, mu)
        })
        .collect()
}

/// Clips every field onto the feasible box. Parameters for nodes without a
/// DER are left for validation to reject.
pub fn project_box(params: &[TransformedParams], feeder: &FeederModel) -> Vec<TransformedParams> {
    params
        .iter()
        .map(|p| {
            let rating = feeder.der_index(p.node).map_or(0.0, |i| feeder.q_rating()[i]);
            TransformedParams {
                node: p.node,
                v_ref: p.v_ref.clamp(V_REF_MIN, V_REF_MAX),
                delta_t: p.delta_t.max(0.0),
                alpha_t: p.alpha_t.clamp(0.0, 1.0),
                q_max: p.q_max.clamp(0.0, rating),
            }
        })
        .collect()
}

fn full_objective(
    params: &[TransformedParams],
    feeder: &FeederModel,
    scenarios: &[Scenario],
    mu: f64,
) -> Result<f64> {
    let evals = evaluate_scenarios(RuleSource::Transformed { params, mu }, feeder, scenarios, DEFAULT_TOL)?;
    let values: Vec<f64> = evals.iter().map(|e| e.objective).collect();
    Ok(pairwise_mean(&values))
}

fn get(p: &TransformedParams, k: usize) -> f64 {
    match k {
        0 => p.v_ref,
        1 => p.delta_t,
        2 => p.alpha_t,
        _ => p.q_max,
    }
}

fn set(p: &mut TransformedParams, k: usize, value: f64) {
    match k {
        0 => p.v_ref = value,
        1 => p.delta_t = value,
        2 => p.alpha_t = value,
        _ => p.q_max = value,
    }
}

/// Trains transformed rule parameters on `scenarios`.
pub fn train(feeder: &FeederModel, scenarios: &[Scenario], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if scenarios.is_empty() {
        return Err(Error::InvalidParameter("no scenarios to train on".into()));
    }
    let init = match &config.init {
        Init::Preset => preset_params(feeder, config.mu)?,
        Init::Explicit(p) => p.clone(),
    };
    der_order(feeder, init.iter().map(|p| p.node))?;
    let mut params = project_box(&init, feeder);
    let unrolled = config.unrolled();
    let mask = config.mask.as_array();

    let dim = 4 * params.len();
    let mut first_moment = vec![0.0; dim];
    let mut second_moment = vec![0.0; dim];
    let mut step_count: i32 = 0;

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let mut order: Vec<usize> = (0..scenarios.len()).collect();
    let steps_per_epoch = scenarios.len().div_ceil(config.batch_size);

    let f0 = full_objective(&params, feeder, scenarios, config.mu)?;
    let mut history = TrainHistory {
        epoch_objective: vec![f0],
        step_loss: Vec::with_capacity(config.epochs * steps_per_epoch),
        steps_per_epoch,
        snapshots: Vec::new(),
        best_epoch: 0,
        truncated_unrolls: 0,
    };
    if config.snapshot_every.is_some() {
        history.snapshots.push(Snapshot {
            epoch: 0,
            params: params.clone(),
        });
    }
    let mut best = (f0, params.clone());
    let mut batch = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let step = history.step_loss.len();
            batch.clear();
            batch.extend(chunk.iter().map(|&s| scenarios[s].clone()));
            let out = loss_and_grad_batch(&params, feeder, &batch, &unrolled).map_err(|e| Error::Training {
                step,
                source: Box::new(e),
            })?;
            history.step_loss.push(out.loss);
            history.truncated_unrolls += out.truncated;
            step_count += 1;

            for (d, (p, g)) in params.iter_mut().zip(&out.grad).enumerate() {
                let grad = g.as_array();
                for k in 0..4 {
                    if !mask[k] {
                        continue;
                    }
                    let g = 0.5 * grad[k];
                    let update = match config.optimizer {
                        Optimizer::Sgd => config.learning_rate * g,
                        Optimizer::Adam { beta1, beta2, eps } => {
                            let j = 4 * d + k;
                            first_moment[j] = beta1 * first_moment[j] + (1.0 - beta1) * g;
                            second_moment[j] = beta2 * second_moment[j] + (1.0 - beta2) * g * g;
                            let m_hat = first_moment[j] / (1.0 - beta1.powi(step_count));
                            let v_hat = second_moment[j] / (1.0 - beta2.powi(step_count));
                            config.learning_rate * m_hat / (v_hat.sqrt() + eps)
                        }
                    };
                    set(p, k, get(p, k) - update);
                }
            }
            params = project_box(&params, feeder);
        }

        let f = full_objective(&params, feeder, scenarios, config.mu).map_err(|e| Error::Training {
            step: history.step_loss.len(),
            source: Box::new(e),
        })?;
        history.epoch_objective.push(f);
        if f < best.0 {
            best = (f, params.clone());
            history.best_epoch = epoch;
        }
        if let Some(every) = config.snapshot_every {
            if epoch % every == 0 {
                history.snapshots.push(Snapshot {
                    epoch,
                    params: params.clone(),
                });
            }
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        history,
    })
}

/// Stability margins of a rule set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    /// `||diag(alpha) X||_2` of the non-incremental curves, when every DER
    /// has a finite slope.
    pub nonincremental: Option<Stability>,
    /// `||I - mu X||_2` for the incremental rules at `mu`.
    pub incremental: Stability,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub objective: f64,
    pub baseline: f64,
    pub mu: f64,
    pub stability: StabilityReport,
    pub scenarios: Vec<ScenarioEvaluation>,
    /// Curve rendering; `None` where `alpha~` is 0 or 1.
    pub curve_params: Vec<Option<RuleParams>>,
    pub transformed_params: Vec<TransformedParams>,
}

/// Evaluates rules on `scenarios`. Curve parameters are rendered in
/// transformed coordinates at the default incremental step.
pub fn evaluate_rules(
    source: RuleSource<'_>,
    feeder: &FeederModel,
    scenarios: &[Scenario],
) -> Result<EvaluationReport> {
    let (transformed, curves, mu) = match source {
        RuleSource::Params(z) => {
            let mu = dynamics::default_step(feeder, RuleKind::Incremental)?;
            let zt = z.iter().map(|p| rules::to_transformed(p, mu)).collect::<Result<Vec<_>>>()?;
            (zt, z.iter().copied().map(Some).collect::<Vec<_>>(), mu)
        }
        RuleSource::Transformed { params, mu } => {
            let curves = params.iter().map(|p| rules::from_transformed(p, mu).ok()).collect();
            (params.to_vec(), curves, mu)
        }
    };
    let evals = evaluate_scenarios(source, feeder, scenarios, DEFAULT_TOL)?;
    let objective = pairwise_mean(&evals.iter().map(|e| e.objective).collect::<Vec<_>>());
    let baseline = pairwise_mean(&evals.iter().map(|e| e.baseline).collect::<Vec<_>>());
    let nonincremental = match curves.iter().copied().collect::<Option<Vec<RuleParams>>>() {
        Some(z) => Some(check_stability_noninc(&z, feeder)?),
        None => None,
    };
    let incremental = if feeder.is_single_phase() {
        dynamics::check_stability_inc_single(mu, feeder)?
    } else {
        let norm = contraction_norm(feeder.x(), mu);
        Stability {
            stable: norm < 1.0,
            norm,
        }
    };
    Ok(EvaluationReport {
        objective,
        baseline,
        mu,
        stability: StabilityReport {
            nonincremental,
            incremental,
        },
        scenarios: evals,
        curve_params: curves,
        transformed_params: transformed,
    })
}
