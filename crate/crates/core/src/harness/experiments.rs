//! Experiment drivers. Each `*_experiment` function computes results in
//! memory; each `run_*` function also writes them under a [`RunDir`].

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::envs::ToyEnv;
use crate::error::{Error, Result};
use crate::flow::{sample_ode, sample_sde, FlowMatchingLoss, FmSample, TimeGrid, VelocityModel};
use crate::grpo::{train, MetricRecord};
use crate::nn::{load_checkpoint, mlp_init, AdamConfig, AdamState, ScalarLoss};
use crate::rng::{derive_seed, standard_normal_vec, stream};
use crate::rollout::{leaf_diversity, rollout_tree, BranchSchedule};

use super::config::ExperimentConfig;
use super::output::{MetricSink, RunDir, FINAL_CHECKPOINT};

const PRETRAIN_LABEL: u64 = 1;
const INIT_LABEL: u64 = 2;
const DIVERSITY_LABEL: u64 = 3;
const EVAL_LABEL: u64 = 4;

const FM_CHUNK: usize = 32;

/// Loads a checkpoint and checks it fits `env`.
pub fn load_model(path: &Path, env: &ToyEnv) -> Result<VelocityModel> {
    let (spec, params) = load_checkpoint(path)?;
    if spec.output_dim != env.dim() || spec.input_dim != env.dim() + 1 + env.num_conditions() {
        return Err(Error::config(
            "checkpoint",
            format!(
                "{} has input {} / output {}, env needs {} / {}",
                path.display(),
                spec.input_dim,
                spec.output_dim,
                env.dim() + 1 + env.num_conditions(),
                env.dim()
            ),
        ));
    }
    VelocityModel::new(spec, params, env.num_conditions())
}

fn require_checkpoint(config: &ExperimentConfig, env: &ToyEnv) -> Result<VelocityModel> {
    let path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("checkpoint", "this command needs a pretrained checkpoint"))?;
    load_model(path, env)
}

fn fm_batch(env: &ToyEnv, size: usize, seed: u64, iteration: usize) -> Result<Vec<FmSample>> {
    let mut rng = stream(seed, &[PRETRAIN_LABEL, iteration as u64]);
    (0..size)
        .map(|_| {
            let condition = env.sample_condition(&mut rng);
            let x0 = env.data.sample_data(condition, &mut rng)?;
            let x1 = standard_normal_vec(&mut rng, env.dim());
            let t = rng.gen::<f64>();
            Ok(FmSample { x0, x1, t, condition })
        })
        .collect()
}

/// Flow-matching pretraining from a seeded initialisation. `on_loss` sees the
/// loss of every batch before its update.
pub fn pretrain<F>(config: &ExperimentConfig, env: &ToyEnv, mut on_loss: F) -> Result<VelocityModel>
where
    F: FnMut(usize, f64) -> Result<()>,
{
    let spec = config.model_spec(env)?;
    let params = mlp_init(&spec, derive_seed(config.seed, &[INIT_LABEL]))?;
    let mut model = VelocityModel::new(spec, params, env.num_conditions())?;
    let mut adam = AdamState::new(model.params.len(), AdamConfig::with_lr(config.pretrain_lr));
    let mut grad = vec![0.0; model.params.len()];
    for it in 0..config.pretrain_iterations {
        let batch = fm_batch(env, config.pretrain_batch, config.seed, it)?;
        let chunks = batch
            .par_chunks(FM_CHUNK)
            .map(|chunk| {
                let loss = FlowMatchingLoss {
                    spec: &model.spec,
                    cond_dim: model.cond_dim,
                    batch: chunk,
                };
                let mut g = vec![0.0; model.params.len()];
                let v = loss.value_and_grad(&model.params, &mut g)?;
                Ok((chunk.len(), v, g))
            })
            .collect::<Result<Vec<_>>>()?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (n, v, g) in &chunks {
            let w = *n as f64 / batch.len() as f64;
            loss += w * v;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += w * gi;
            }
        }
        if !loss.is_finite() {
            return Err(Error::numeric(format!("pretraining loss at iteration {it}")));
        }
        on_loss(it, loss)?;
        adam.step(&mut model.params, &grad)?;
        model.params.check_finite(&format!("parameters after pretraining iteration {it}"))?;
    }
    Ok(model)
}

pub fn run_pretrain(config: &ExperimentConfig, out: &Path) -> Result<VelocityModel> {
    config.validate()?;
    let env = config.env()?;
    let dir = RunDir::create(out, config)?;
    let mut table = dir.table("loss", vec!["iteration".into(), "loss".into()])?;
    let model = pretrain(config, &env, |it, loss| table.row(vec![json!(it), json!(loss)], None))?;
    table.flush()?;
    dir.save_model(FINAL_CHECKPOINT, &model)?;
    Ok(model)
}

/// Per-reward mean over the first and last `window` records.
pub fn reward_window_means(log: &[MetricRecord], window: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if log.is_empty() || window == 0 || window > log.len() {
        return Err(Error::Domain(format!(
            "reward window {window} does not fit a log of {} records",
            log.len()
        )));
    }
    let m = log[0].mean_reward.len();
    let avg = |records: &[MetricRecord]| -> Vec<f64> {
        (0..m)
            .map(|k| records.iter().map(|r| r.mean_reward[k]).sum::<f64>() / records.len() as f64)
            .collect()
    };
    Ok((avg(&log[..window]), avg(&log[log.len() - window..])))
}

/// Window used when summarising a run: a fifth of the run, at most 20.
pub fn summary_window(iterations: usize) -> usize {
    (iterations / 5).clamp(1, 20)
}

pub fn run_align(config: &ExperimentConfig, out: &Path) -> Result<(VelocityModel, Vec<MetricRecord>)> {
    config.validate()?;
    let env = config.env()?;
    let pretrained = require_checkpoint(config, &env)?;
    let grpo = config.grpo(&env)?;
    let dir = RunDir::create(out, config)?;
    align_into(&dir, config, &env, &pretrained, &grpo)
}

fn align_into(
    dir: &RunDir,
    config: &ExperimentConfig,
    env: &ToyEnv,
    pretrained: &VelocityModel,
    grpo: &crate::grpo::GrpoConfig,
) -> Result<(VelocityModel, Vec<MetricRecord>)> {
    let mut sink = MetricSink::create(dir, &env.rewards.names())?;
    let (model, log) = train(grpo, env, pretrained, config.seed, |record, model| {
        sink.write(record)?;
        let done = record.iteration + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            dir.save_model(&format!("iter_{done:06}.ckpt"), model)?;
        }
        Ok(())
    })?;
    dir.save_model(FINAL_CHECKPOINT, &model)?;
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    /// Target step of the single branch point.
    pub branch_step: usize,
    pub factor: usize,
    /// One value per tree; tree `k` uses the same seed for every row.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Leaf diversity of trees with one branch of `factor` children at each
/// candidate step (and a single root chain).
pub fn diversity_experiment(
    model: &VelocityModel,
    config: &ExperimentConfig,
    env: &ToyEnv,
) -> Result<Vec<DiversityRow>> {
    let grid = TimeGrid::new(config.time_steps)?;
    let noise = config.noise()?;
    config
        .diversity_steps
        .iter()
        .map(|&b| {
            let schedule = BranchSchedule::new(1, &[(b, config.diversity_factor)]);
            schedule
                .validate(config.time_steps)
                .map_err(|e| Error::config("diversity_steps", e.to_string()))?;
            let values = (0..config.diversity_trees)
                .into_par_iter()
                .map(|k| {
                    let condition = k % env.num_conditions();
                    let seed = derive_seed(config.seed, &[DIVERSITY_LABEL, k as u64]);
                    let tree = rollout_tree(model, condition, &schedule, &grid, &noise, seed)?;
                    leaf_diversity(&tree)
                })
                .collect::<Result<Vec<_>>>()?;
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            Ok(DiversityRow {
                branch_step: b,
                factor: config.diversity_factor,
                values,
                mean,
                std,
            })
        })
        .collect()
}

pub fn run_diversity(config: &ExperimentConfig, out: &Path) -> Result<Vec<DiversityRow>> {
    config.validate()?;
    let env = config.env()?;
    let model = require_checkpoint(config, &env)?;
    let rows = diversity_experiment(&model, config, &env)?;
    let dir = RunDir::create(out, config)?;
    let mut table = dir.table(
        "diversity",
        ["branch_step", "factor", "trees", "mean", "std"].map(String::from).to_vec(),
    )?;
    for r in &rows {
        table.row(
            vec![json!(r.branch_step), json!(r.factor), json!(r.values.len()), json!(r.mean), json!(r.std)],
            Some(("values", json!(r.values))),
        )?;
    }
    table.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub time_steps: usize,
    pub step: usize,
    pub t: f64,
    pub coefficient: f64,
}

/// `sigma_t * sqrt(dt)` at every step `T..=1` for each configured `T`.
pub fn noise_table(config: &ExperimentConfig) -> Result<Vec<NoiseRow>> {
    let noise = config.noise()?;
    let mut rows = Vec::new();
    for &steps in &config.noise_table_steps {
        let grid = TimeGrid::new(steps).map_err(|e| Error::config("noise_table_steps", e.to_string()))?;
        for j in (1..=steps).rev() {
            let (t, dt) = (grid.t(j), grid.dt(j));
            rows.push(NoiseRow {
                time_steps: steps,
                step: j,
                t,
                coefficient: noise.noise_scale(t, dt),
            });
        }
    }
    Ok(rows)
}

pub fn run_noise_table(config: &ExperimentConfig, out: &Path) -> Result<Vec<NoiseRow>> {
    let rows = noise_table(config)?;
    let dir = RunDir::create(out, config)?;
    let mut table = dir.table("noise_table", ["time_steps", "step", "t", "coefficient"].map(String::from).to_vec())?;
    for r in &rows {
        table.row(vec![json!(r.time_steps), json!(r.step), json!(r.t), json!(r.coefficient)], None)?;
    }
    table.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub name: String,
    pub strategy: String,
    pub branch_schedule: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    pub initial_mean_reward: Vec<f64>,
    pub final_mean_reward: Vec<f64>,
    pub delta: Vec<f64>,
    pub log: Vec<MetricRecord>,
}

struct Arm {
    name: String,
    config: ExperimentConfig,
}

fn ablation_arms(config: &ExperimentConfig) -> Result<Vec<Arm>> {
    let mut arms = Vec::new();
    for rule in &config.ablate_schedules {
        config
            .schedule_from(rule)
            .map_err(|e| Error::config("ablate_schedules", e.to_string()))?;
        let mut c = config.clone();
        c.branch_schedule = rule.clone();
        let label = if rule.is_empty() {
            "batch".to_string()
        } else {
            rule.iter().map(|(i, b)| format!("{i}x{b}")).collect::<Vec<_>>().join("-")
        };
        arms.push(Arm {
            name: format!("schedule-{label}"),
            config: c,
        });
    }
    if !config.ablate_weight_sets.is_empty() {
        let fmt_w = |w: &[f64]| w.iter().map(f64::to_string).collect::<Vec<_>>().join("-");
        for w in &config.ablate_weight_sets {
            let mut c = config.clone();
            c.strategy = crate::advantage::GroupingStrategy::NaiveMix;
            c.weights = w.clone();
            arms.push(Arm {
                name: format!("naive_mix-w{}", fmt_w(w)),
                config: c,
            });
        }
        let mut c = config.clone();
        c.strategy = crate::advantage::GroupingStrategy::RewardGrouped;
        arms.push(Arm {
            name: format!("reward_grouped-w{}", fmt_w(&config.weights)),
            config: c,
        });
    }
    if arms.is_empty() {
        return Err(Error::config(
            "ablate_schedules",
            "nothing to compare: set ablate_schedules and/or ablate_weight_sets",
        ));
    }
    Ok(arms)
}

/// Paired alignments: every arm starts from `pretrained` with the same seed.
pub fn ablation_experiment(
    pretrained: &VelocityModel,
    config: &ExperimentConfig,
    env: &ToyEnv,
    out: Option<&RunDir>,
) -> Result<Vec<AblationRun>> {
    let window = summary_window(config.iterations);
    let mut runs = Vec::new();
    for (k, arm) in ablation_arms(config)?.into_iter().enumerate() {
        let grpo = arm.config.grpo(env)?;
        let log = match out {
            Some(dir) => {
                let sub = dir.subdir(&format!("runs/{k:02}-{}", arm.name))?;
                sub.write_text(super::output::CONFIG_SNAPSHOT, &arm.config.to_text())?;
                align_into(&sub, &arm.config, env, pretrained, &grpo)?.1
            }
            None => train(&grpo, env, pretrained, arm.config.seed, |_, _| Ok(()))?.1,
        };
        let (initial, last) = if log.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            reward_window_means(&log, window)?
        };
        runs.push(AblationRun {
            name: arm.name,
            strategy: arm.config.strategy.name().to_string(),
            branch_schedule: arm.config.branch_schedule.clone(),
            weights: arm.config.weights.clone(),
            delta: last.iter().zip(&initial).map(|(a, b)| a - b).collect(),
            initial_mean_reward: initial,
            final_mean_reward: last,
            log,
        });
    }
    Ok(runs)
}

pub fn run_ablate(config: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRun>> {
    config.validate()?;
    let env = config.env()?;
    let pretrained = require_checkpoint(config, &env)?;
    let dir = RunDir::create(out, config)?;
    let runs = ablation_experiment(&pretrained, config, &env, Some(&dir))?;
    let mut table = dir.table(
        "ablate",
        ["name", "strategy", "branch_schedule", "weights"].map(String::from).to_vec().into_iter().chain(
            env.rewards.names().into_iter().flat_map(|n| {
                [format!("initial_{n}"), format!("final_{n}"), format!("delta_{n}")]
            }),
        ).collect(),
    )?;
    for r in &runs {
        let mut row: Vec<Value> = vec![
            json!(r.name),
            json!(r.strategy),
            json!(r.branch_schedule.iter().map(|(i, b)| format!("{i}:{b}")).collect::<Vec<_>>().join(" ")),
            json!(r.weights.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")),
        ];
        for m in 0..env.num_rewards() {
            row.extend([
                json!(r.initial_mean_reward.get(m)),
                json!(r.final_mean_reward.get(m)),
                json!(r.delta.get(m)),
            ]);
        }
        table.row(row, None)?;
    }
    table.flush()?;
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub sampler: String,
    pub reward_names: Vec<String>,
    pub mean_reward: Vec<f64>,
    /// Fraction of samples within `3 * data_std + 0.5` of their mode.
    pub mode_hit_rate: f64,
    pub seconds: f64,
}

/// Samples `eval_samples` points (conditions cycled) and scores them.
pub fn evaluate(model: &VelocityModel, config: &ExperimentConfig, env: &ToyEnv) -> Result<EvalReport> {
    let started = Instant::now();
    let grid = TimeGrid::new(config.time_steps)?;
    let noise = config.noise()?;
    let radius = 3.0 * env.data.data_std() + 0.5;
    let results = (0..config.eval_samples)
        .into_par_iter()
        .map(|n| {
            let condition = n % env.num_conditions();
            let mut rng = stream(config.seed, &[EVAL_LABEL, n as u64]);
            let x_start = standard_normal_vec(&mut rng, env.dim());
            let x = if config.eval_sde {
                sample_sde(model, condition, &x_start, &grid, &noise, &mut rng)?.0
            } else {
                sample_ode(model, condition, &x_start, &grid)?
            };
            let center = env.data.center(condition)?;
            let dist = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            Ok((env.reward_vector(&x, condition)?, dist <= radius))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mut mean_reward = vec![0.0; env.num_rewards()];
    for (r, _) in &results {
        for (acc, v) in mean_reward.iter_mut().zip(r.values()) {
            *acc += v / n;
        }
    }
    Ok(EvalReport {
        samples: results.len(),
        sampler: if config.eval_sde { "sde" } else { "ode" }.to_string(),
        reward_names: env.rewards.names().into_iter().map(String::from).collect(),
        mean_reward,
        mode_hit_rate: results.iter().filter(|(_, hit)| *hit).count() as f64 / n,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_eval(config: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    config.validate()?;
    let env = config.env()?;
    let model = require_checkpoint(config, &env)?;
    let report = evaluate(&model, config, &env)?;
    let dir = RunDir::create(out, config)?;
    let mut columns: Vec<String> = ["samples", "sampler", "mode_hit_rate"].map(String::from).to_vec();
    columns.extend(report.reward_names.iter().map(|n| format!("mean_reward_{n}")));
    let mut row = vec![json!(report.samples), json!(report.sampler), json!(report.mode_hit_rate)];
    row.extend(report.mean_reward.iter().map(|v| json!(v)));
    let mut table = dir.table("eval", columns)?;
    table.row(row, None)?;
    table.flush()?;
    Ok(report)
}
