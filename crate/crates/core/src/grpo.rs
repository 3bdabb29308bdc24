//! Clipped policy-gradient training over rollout trees.
//!
//! Each stored edge is one decision of the behaviour policy. Its probability
//! ratio is recomputed under the current parameters by re-evaluating the
//! transition mean and keeping the stored noise scale; the objective is the
//! mean over all distinct edges of the clipped surrogate minus an optional
//! closed-form KL penalty to a frozen reference model.

use std::time::Instant;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{tree_advantages, AdvantageTable, GroupingConfig, RewardVector};
use crate::envs::ToyEnv;
use crate::error::{Error, Result};
use crate::flow::{
    mean_velocity_slope, transition_logprob, transition_mean, NoiseSchedule, TimeGrid, Transition, VelocityField,
    VelocityModel,
};
use crate::nn::{AdamConfig, AdamState, ParamVector, ScalarLoss};
use crate::rng::{derive_seed, StreamRng};
use crate::rollout::{leaf_diversity, rollout_tree, BranchSchedule, TrajectoryTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub eps_clip: f64,
    pub beta_kl: f64,
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub prompts_per_iter: usize,
    pub iterations: usize,
    pub grouping: GroupingConfig,
    pub schedule: BranchSchedule,
    pub time_steps: usize,
    pub noise: NoiseSchedule,
}

impl GrpoConfig {
    pub fn validate(&self, num_rewards: usize) -> Result<()> {
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(Error::config("eps_clip", "must lie in (0, 1)"));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return Err(Error::config("beta_kl", "must be finite and non-negative"));
        }
        if self.inner_epochs == 0 {
            return Err(Error::config("inner_epochs", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if self.prompts_per_iter == 0 {
            return Err(Error::config("prompts_per_iter", "must be at least 1"));
        }
        if !(self.noise.a > 0.0) {
            return Err(Error::config("noise_level", "must be positive for stochastic rollouts"));
        }
        TimeGrid::new(self.time_steps)?;
        self.schedule
            .validate(self.time_steps)
            .map_err(|e| Error::config("branch_schedule", e.to_string()))?;
        if self.grouping.temporal && self.schedule.root_factor < 2 {
            return Err(Error::config(
                "root_factor",
                "temporal grouping needs at least 2 chains in the first segment",
            ));
        }
        if self.schedule.leaf_count() < 2 {
            return Err(Error::config("root_factor", "need at least 2 leaves per tree"));
        }
        self.grouping.validate(num_rewards)
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.time_steps).expect("validated")
    }
}

/// Recomputes the transition mean for `edge` under `model`.
fn edge_mean<M: VelocityField + ?Sized>(model: &M, edge: &Transition, noise: &NoiseSchedule) -> Result<Vec<f64>> {
    let v = model.velocity(&edge.x_from, edge.t, edge.condition)?;
    Ok(transition_mean(&edge.x_from, &v, edge.t, edge.dt, noise))
}

/// `pi_theta(x_to | x_from) / pi_old(x_to | x_from)` with the stored
/// behaviour noise scale.
pub fn edge_ratio<M: VelocityField + ?Sized>(model: &M, edge: &Transition, noise: &NoiseSchedule) -> Result<f64> {
    let mean = edge_mean(model, edge, noise)?;
    let ratio = (transition_logprob(&edge.x_to, &mean, edge.noise_scale)? - edge.logp_old).exp();
    if !ratio.is_finite() {
        return Err(Error::numeric(format!("ratio at step {}", edge.step)));
    }
    Ok(ratio)
}

fn clip(ratio: f64, eps_clip: f64) -> f64 {
    ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip)
}

/// `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_edge_objective(ratio: f64, advantage: f64, eps_clip: f64) -> f64 {
    (ratio * advantage).min(clip(ratio, eps_clip) * advantage)
}

/// Derivative of [`clipped_edge_objective`] with respect to the ratio. The
/// unclipped branch wins ties, so the slope is `A` whenever `r A` attains the
/// minimum and 0 when the clipped branch is strictly smaller.
pub fn clipped_edge_slope(ratio: f64, advantage: f64, eps_clip: f64) -> f64 {
    if ratio * advantage <= clip(ratio, eps_clip) * advantage {
        advantage
    } else {
        0.0
    }
}

/// `||mean_theta - mean_ref||^2 / (2 s^2)`: KL between the two transition
/// Gaussians, which share the covariance `s^2 I`.
pub fn kl_edge_penalty<M: VelocityField + ?Sized, R: VelocityField + ?Sized>(
    model: &M,
    reference: &R,
    edge: &Transition,
    noise: &NoiseSchedule,
) -> Result<f64> {
    if !(edge.noise_scale > 0.0) {
        return Err(Error::Domain("KL penalty needs a positive noise scale".into()));
    }
    let a = edge_mean(model, edge, noise)?;
    let b = edge_mean(reference, edge, noise)?;
    let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq / (2.0 * edge.noise_scale * edge.noise_scale))
}

/// A rolled-out tree with its leaf rewards and edge advantages.
#[derive(Debug, Clone)]
pub struct TreeBatch {
    pub tree: TrajectoryTree,
    pub rewards: Vec<RewardVector>,
    pub advantages: AdvantageTable,
}

/// Objective value plus the diagnostics gathered while computing it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub value: f64,
    pub edges: usize,
    /// Fraction of edges where the clipped branch is strictly smaller.
    pub clip_fraction: f64,
    pub mean_abs_ratio_minus_one: f64,
}

#[derive(Default)]
struct TreePartial {
    value: f64,
    grad: Vec<f64>,
    clipped: usize,
    abs_ratio_dev: f64,
    edges: usize,
}

/// The batch objective as a function of the current parameters.
pub struct GrpoObjective<'a> {
    /// Supplies the architecture; its parameters are ignored.
    pub model: &'a VelocityModel,
    pub reference: Option<&'a VelocityModel>,
    pub batches: &'a [TreeBatch],
    pub noise: NoiseSchedule,
    pub eps_clip: f64,
    pub beta_kl: f64,
}

impl GrpoObjective<'_> {
    fn tree_partial(&self, current: &VelocityModel, batch: &TreeBatch, with_grad: bool) -> Result<TreePartial> {
        let mlp = current.mlp();
        let mut part = TreePartial {
            grad: if with_grad { vec![0.0; current.params.len()] } else { Vec::new() },
            ..TreePartial::default()
        };
        let use_kl = self.beta_kl > 0.0;
        for node in batch.tree.edges() {
            let edge = node.transition.as_ref().expect("non-root nodes carry a transition");
            let advantage = batch
                .advantages
                .get(node.id)
                .ok_or_else(|| Error::Domain(format!("missing advantage for edge {}", node.id)))?;
            let input = current.input(&edge.x_from, edge.t, edge.condition)?;
            let cache = mlp.forward_cached(&input)?;
            let mean = transition_mean(&edge.x_from, cache.output(), edge.t, edge.dt, &self.noise);
            let s2 = edge.noise_scale * edge.noise_scale;
            let ratio = (transition_logprob(&edge.x_to, &mean, edge.noise_scale)? - edge.logp_old).exp();
            if !ratio.is_finite() {
                return Err(Error::numeric(format!("ratio of edge {} at step {}", node.id, edge.step)));
            }
            let slope_r = clipped_edge_slope(ratio, advantage, self.eps_clip);
            part.value += clipped_edge_objective(ratio, advantage, self.eps_clip);
            if slope_r == 0.0 && advantage != 0.0 {
                part.clipped += 1;
            }
            part.abs_ratio_dev += (ratio - 1.0).abs();
            part.edges += 1;

            let mean_ref = match (use_kl, self.reference) {
                (true, Some(r)) => Some(edge_mean(r, edge, &self.noise)?),
                (true, None) => return Err(Error::Domain("KL penalty requires a reference model".into())),
                _ => None,
            };
            if let Some(mr) = &mean_ref {
                let sq: f64 = mean.iter().zip(mr).map(|(a, b)| (a - b) * (a - b)).sum();
                part.value -= self.beta_kl * sq / (2.0 * s2);
            }

            if with_grad {
                // d objective / d mean, then through the affine map v -> mean.
                let dv = mean_velocity_slope(edge.t, edge.dt, &self.noise);
                let dout: Vec<f64> = (0..mean.len())
                    .map(|i| {
                        let mut g = slope_r * ratio * (edge.x_to[i] - mean[i]) / s2;
                        if let Some(mr) = &mean_ref {
                            g -= self.beta_kl * (mean[i] - mr[i]) / s2;
                        }
                        g * dv
                    })
                    .collect();
                mlp.backward(&cache, &dout, &mut part.grad)?;
            }
        }
        Ok(part)
    }

    /// Evaluates the objective and, if `grad` is given, writes its gradient.
    pub fn evaluate(&self, params: &ParamVector, grad: Option<&mut [f64]>) -> Result<ObjectiveReport> {
        let current = self.model.with_params(params.clone())?;
        let with_grad = grad.is_some();
        let partials = self
            .batches
            .par_iter()
            .map(|b| self.tree_partial(&current, b, with_grad))
            .collect::<Result<Vec<_>>>()?;
        let edges: usize = partials.iter().map(|p| p.edges).sum();
        if edges == 0 {
            return Err(Error::Domain("objective over an empty batch".into()));
        }
        let scale = 1.0 / edges as f64;
        // Fixed tree order keeps the reduction independent of scheduling.
        let mut value = 0.0;
        let mut clipped = 0;
        let mut dev = 0.0;
        for p in &partials {
            value += p.value;
            clipped += p.clipped;
            dev += p.abs_ratio_dev;
        }
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v = 0.0);
            for p in &partials {
                for (acc, v) in g.iter_mut().zip(&p.grad) {
                    *acc += v;
                }
            }
            g.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(ObjectiveReport {
            value: value * scale,
            edges,
            clip_fraction: clipped as f64 * scale,
            mean_abs_ratio_minus_one: dev * scale,
        })
    }
}

impl ScalarLoss for GrpoObjective<'_> {
    fn value_and_grad(&self, params: &ParamVector, grad: &mut [f64]) -> Result<f64> {
        Ok(self.evaluate(params, Some(grad))?.value)
    }
}

/// Mean over all edges of `clipped surrogate - beta * KL` (to be maximised).
pub fn batch_objective(
    model: &VelocityModel,
    reference: Option<&VelocityModel>,
    batches: &[TreeBatch],
    config: &GrpoConfig,
) -> Result<f64> {
    let objective = GrpoObjective {
        model,
        reference,
        batches,
        noise: config.noise,
        eps_clip: config.eps_clip,
        beta_kl: config.beta_kl,
    };
    Ok(objective.evaluate(&model.params, None)?.value)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub mean_reward: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub mean_abs_ratio_minus_one: f64,
    pub leaf_diversity: f64,
    pub velocity_evals: usize,
    pub wall_clock_seconds: f64,
}

impl MetricRecord {
    /// The record with its timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: VelocityModel,
    /// Behaviour snapshot, refreshed at the start of every rollout phase.
    pub old_params: ParamVector,
    /// Frozen reference (the pretrained parameters).
    pub ref_params: ParamVector,
    pub optimizer: AdamState,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(pretrained: VelocityModel, learning_rate: f64) -> Self {
        let n = pretrained.params.len();
        Self {
            old_params: pretrained.params.clone(),
            ref_params: pretrained.params.clone(),
            optimizer: AdamState::new(n, AdamConfig::with_lr(learning_rate)),
            model: pretrained,
            iteration: 0,
        }
    }
}

const PROMPT_LABEL: u64 = 0x5052_4F4D_5054;

/// Builds one tree per prompt under `model` with rewards and advantages.
pub fn collect_batches(
    model: &VelocityModel,
    env: &ToyEnv,
    config: &GrpoConfig,
    conditions: &[usize],
    seed: u64,
    iteration: usize,
) -> Result<Vec<TreeBatch>> {
    let grid = config.grid();
    conditions
        .par_iter()
        .enumerate()
        .map(|(p, &c)| {
            let tree_seed = derive_seed(seed, &[iteration as u64, p as u64]);
            let tree = rollout_tree(model, c, &config.schedule, &grid, &config.noise, tree_seed)?;
            let rewards = tree
                .leaf_states()
                .iter()
                .map(|x| env.reward_vector(x, c))
                .collect::<Result<Vec<_>>>()?;
            let advantages = tree_advantages(&tree, &rewards, &config.grouping)?;
            Ok(TreeBatch {
                tree,
                rewards,
                advantages,
            })
        })
        .collect()
}

/// Conditions sampled for one iteration.
pub fn iteration_conditions(env: &ToyEnv, prompts: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut rng = StreamRng::seed_from_u64(derive_seed(seed, &[iteration as u64, PROMPT_LABEL]));
    (0..prompts).map(|_| env.sample_condition(&mut rng)).collect()
}

/// Rollout, reward, advantage, then `inner_epochs` Adam ascent steps.
pub fn train_iteration(state: &mut TrainState, env: &ToyEnv, config: &GrpoConfig, seed: u64) -> Result<MetricRecord> {
    let started = Instant::now();
    state.old_params = state.model.params.clone();
    let behaviour = state.model.clone();
    let reference = state.model.with_params(state.ref_params.clone())?;

    let conditions = iteration_conditions(env, config.prompts_per_iter, seed, state.iteration);
    let batches = collect_batches(&behaviour, env, config, &conditions, seed, state.iteration)?;

    let objective = GrpoObjective {
        model: &behaviour,
        reference: Some(&reference),
        batches: &batches,
        noise: config.noise,
        eps_clip: config.eps_clip,
        beta_kl: config.beta_kl,
    };
    let mut grad = vec![0.0; state.model.params.len()];
    let mut grad_norm = 0.0;
    for _ in 0..config.inner_epochs {
        objective.evaluate(&state.model.params, Some(&mut grad))?;
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::numeric(format!("gradient at iteration {}", state.iteration)));
        }
        // Ascent on the objective.
        grad.iter_mut().for_each(|g| *g = -*g);
        state.optimizer.step(&mut state.model.params, &grad)?;
        state
            .model
            .params
            .check_finite(&format!("parameters after iteration {}", state.iteration))?;
    }
    let after = objective.evaluate(&state.model.params, None)?;

    let m = env.num_rewards();
    let mut reward_sum = vec![0.0; m];
    let mut leaves = 0usize;
    let mut diversity = 0.0;
    let mut velocity_evals = 0;
    for b in &batches {
        for r in &b.rewards {
            for (acc, v) in reward_sum.iter_mut().zip(r.values()) {
                *acc += v;
            }
        }
        leaves += b.rewards.len();
        diversity += leaf_diversity(&b.tree)?;
        velocity_evals += b.tree.velocity_evals;
    }
    let record = MetricRecord {
        iteration: state.iteration,
        mean_reward: reward_sum.iter().map(|s| s / leaves as f64).collect(),
        objective: after.value,
        grad_norm,
        clip_fraction: after.clip_fraction,
        mean_abs_ratio_minus_one: after.mean_abs_ratio_minus_one,
        leaf_diversity: diversity / batches.len() as f64,
        velocity_evals,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    state.iteration += 1;
    Ok(record)
}

/// Runs `config.iterations` iterations from `pretrained`, handing every
/// record and the updated model to `on_record` as soon as they exist.
pub fn train<F>(
    config: &GrpoConfig,
    env: &ToyEnv,
    pretrained: &VelocityModel,
    seed: u64,
    mut on_record: F,
) -> Result<(VelocityModel, Vec<MetricRecord>)>
where
    F: FnMut(&MetricRecord, &VelocityModel) -> Result<()>,
{
    config.validate(env.num_rewards())?;
    if pretrained.dim() != env.dim() || pretrained.cond_dim != env.num_conditions() {
        return Err(Error::config(
            "checkpoint",
            format!(
                "model (dim {}, conditions {}) does not match env (dim {}, conditions {})",
                pretrained.dim(),
                pretrained.cond_dim,
                env.dim(),
                env.num_conditions()
            ),
        ));
    }
    let mut state = TrainState::new(pretrained.clone(), config.learning_rate);
    let mut log = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let record = train_iteration(&mut state, env, config, seed)?;
        on_record(&record, &state.model)?;
        log.push(record);
    }
    Ok((state.model, log))
}
