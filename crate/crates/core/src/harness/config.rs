//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated; lists of lists (schedules and weight sets in ablations)
//! are separated by `;`. Branch schedules are written as `i:B` pairs where `i`
//! counts denoising steps from the start (noise end) of sampling, so `2:3`
//! with `time_steps = 10` branches into 3 children at step 8.
//!
//! See `docs/config.md` for every key and its default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::advantage::{GroupingConfig, GroupingStrategy, DEFAULT_EPS_STD};
use crate::envs::{GaussMixEnv, RewardKind, RewardSpec, ToyEnv};
use crate::error::{Error, Result};
use crate::flow::{NoiseSchedule, VelocityModel, DEFAULT_T_CLIP};
use crate::grpo::GrpoConfig;
use crate::nn::{Activation, MlpSpec};
use crate::rollout::BranchSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    // sampling
    pub time_steps: usize,
    pub noise_level: f64,
    pub t_clip: f64,
    pub root_factor: usize,
    pub branch_schedule: Vec<(usize, usize)>,
    // advantages
    pub strategy: GroupingStrategy,
    pub temporal: bool,
    pub scaled: bool,
    pub weights: Vec<f64>,
    pub eps_std: f64,
    // optimisation
    pub eps_clip: f64,
    pub beta_kl: f64,
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub prompts_per_iter: usize,
    pub checkpoint_every: usize,
    // environment
    pub env_offset: f64,
    pub env_data_std: f64,
    pub rewards: Vec<String>,
    pub target_width: f64,
    pub ring_radius: f64,
    pub ring_width: f64,
    pub ring_scale: f64,
    // model and pretraining
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub pretrain_iterations: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub checkpoint: Option<PathBuf>,
    // analyses
    pub diversity_steps: Vec<usize>,
    pub diversity_factor: usize,
    pub diversity_trees: usize,
    pub noise_table_steps: Vec<usize>,
    pub ablate_schedules: Vec<Vec<(usize, usize)>>,
    pub ablate_weight_sets: Vec<Vec<f64>>,
    pub eval_samples: usize,
    pub eval_sde: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            time_steps: 10,
            noise_level: 0.7,
            t_clip: DEFAULT_T_CLIP,
            root_factor: 8,
            branch_schedule: vec![(2, 3), (4, 2)],
            strategy: GroupingStrategy::RewardGrouped,
            temporal: true,
            scaled: true,
            weights: vec![1.0, 1.0, 1.0],
            eps_std: DEFAULT_EPS_STD,
            eps_clip: 0.2,
            beta_kl: 0.0,
            inner_epochs: 1,
            learning_rate: 1e-3,
            iterations: 100,
            prompts_per_iter: 4,
            checkpoint_every: 0,
            env_offset: 2.0,
            env_data_std: 0.3,
            rewards: vec!["target".into(), "ring".into(), "angle".into()],
            target_width: 0.3,
            ring_radius: 3.4,
            ring_width: 0.4,
            ring_scale: 50.0,
            hidden_dims: vec![64, 64],
            activation: Activation::Tanh,
            pretrain_iterations: 3000,
            pretrain_batch: 256,
            pretrain_lr: 3e-3,
            checkpoint: None,
            diversity_steps: vec![8, 2],
            diversity_factor: 4,
            diversity_trees: 20,
            noise_table_steps: vec![6, 10, 28, 40],
            ablate_schedules: Vec::new(),
            ablate_weight_sets: Vec::new(),
            eval_samples: 256,
            eval_sde: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got {value:?}"))),
    }
}

fn split_list(value: &str, sep: char) -> impl Iterator<Item = &str> {
    value.split(sep).map(str::trim).filter(|s| !s.is_empty())
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    split_list(value, ',').map(|v| parse_num(key, v)).collect()
}

fn parse_pairs(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    split_list(value, ',')
        .map(|pair| {
            let (i, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::config(key, format!("expected i:B, got {pair:?}")))?;
            Ok((parse_num(key, i.trim())?, parse_num(key, b.trim())?))
        })
        .collect()
}

fn fmt_list<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_pairs(pairs: &[(usize, usize)]) -> String {
    pairs.iter().map(|(i, b)| format!("{i}:{b}")).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text, starting from the defaults. Unknown and repeated
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            config.set(key, value)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "time_steps" => self.time_steps = parse_num(key, value)?,
            "noise_level" => self.noise_level = parse_num(key, value)?,
            "t_clip" => self.t_clip = parse_num(key, value)?,
            "root_factor" => self.root_factor = parse_num(key, value)?,
            "branch_schedule" => self.branch_schedule = parse_pairs(key, value)?,
            "strategy" => self.strategy = value.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "temporal" => self.temporal = parse_bool(key, value)?,
            "scaled" => self.scaled = parse_bool(key, value)?,
            "weights" => self.weights = parse_list(key, value)?,
            "eps_std" => self.eps_std = parse_num(key, value)?,
            "eps_clip" => self.eps_clip = parse_num(key, value)?,
            "beta_kl" => self.beta_kl = parse_num(key, value)?,
            "inner_epochs" => self.inner_epochs = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "prompts_per_iter" => self.prompts_per_iter = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "env_offset" => self.env_offset = parse_num(key, value)?,
            "env_data_std" => self.env_data_std = parse_num(key, value)?,
            "rewards" => self.rewards = split_list(value, ',').map(String::from).collect(),
            "target_width" => self.target_width = parse_num(key, value)?,
            "ring_radius" => self.ring_radius = parse_num(key, value)?,
            "ring_width" => self.ring_width = parse_num(key, value)?,
            "ring_scale" => self.ring_scale = parse_num(key, value)?,
            "hidden_dims" => self.hidden_dims = parse_list(key, value)?,
            "activation" => self.activation = value.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "pretrain_iterations" => self.pretrain_iterations = parse_num(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse_num(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, value)?,
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            "diversity_steps" => self.diversity_steps = parse_list(key, value)?,
            "diversity_factor" => self.diversity_factor = parse_num(key, value)?,
            "diversity_trees" => self.diversity_trees = parse_num(key, value)?,
            "noise_table_steps" => self.noise_table_steps = parse_list(key, value)?,
            "ablate_schedules" => {
                self.ablate_schedules = value
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| if s == "-" { Ok(Vec::new()) } else { parse_pairs(key, s) })
                    .collect::<Result<_>>()?
            }
            "ablate_weight_sets" => {
                self.ablate_weight_sets = split_list(value, ';').map(|s| parse_list(key, s)).collect::<Result<_>>()?
            }
            "eval_samples" => self.eval_samples = parse_num(key, value)?,
            "eval_sde" => self.eval_sde = parse_bool(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// The fully resolved configuration, parseable by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("time_steps", self.time_steps.to_string());
        kv("noise_level", self.noise_level.to_string());
        kv("t_clip", self.t_clip.to_string());
        kv("root_factor", self.root_factor.to_string());
        kv("branch_schedule", fmt_pairs(&self.branch_schedule));
        kv("strategy", self.strategy.name().to_string());
        kv("temporal", self.temporal.to_string());
        kv("scaled", self.scaled.to_string());
        kv("weights", fmt_list(&self.weights));
        kv("eps_std", self.eps_std.to_string());
        kv("eps_clip", self.eps_clip.to_string());
        kv("beta_kl", self.beta_kl.to_string());
        kv("inner_epochs", self.inner_epochs.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("iterations", self.iterations.to_string());
        kv("prompts_per_iter", self.prompts_per_iter.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("env_offset", self.env_offset.to_string());
        kv("env_data_std", self.env_data_std.to_string());
        kv("rewards", self.rewards.join(","));
        kv("target_width", self.target_width.to_string());
        kv("ring_radius", self.ring_radius.to_string());
        kv("ring_width", self.ring_width.to_string());
        kv("ring_scale", self.ring_scale.to_string());
        kv("hidden_dims", fmt_list(&self.hidden_dims));
        kv("activation", self.activation.name().to_string());
        kv("pretrain_iterations", self.pretrain_iterations.to_string());
        kv("pretrain_batch", self.pretrain_batch.to_string());
        kv("pretrain_lr", self.pretrain_lr.to_string());
        kv(
            "checkpoint",
            self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("diversity_steps", fmt_list(&self.diversity_steps));
        kv("diversity_factor", self.diversity_factor.to_string());
        kv("diversity_trees", self.diversity_trees.to_string());
        kv("noise_table_steps", fmt_list(&self.noise_table_steps));
        kv(
            "ablate_schedules",
            self.ablate_schedules
                .iter()
                .map(|p| if p.is_empty() { "-".to_string() } else { fmt_pairs(p) })
                .collect::<Vec<_>>()
                .join(";"),
        );
        kv(
            "ablate_weight_sets",
            self.ablate_weight_sets.iter().map(|w| fmt_list(w)).collect::<Vec<_>>().join(";"),
        );
        kv("eval_samples", self.eval_samples.to_string());
        kv("eval_sde", self.eval_sde.to_string());
        s
    }

    pub fn env(&self) -> Result<ToyEnv> {
        if !(self.env_offset > 0.0 && self.env_offset.is_finite()) {
            return Err(Error::config("env_offset", "must be positive"));
        }
        let o = self.env_offset;
        let data = GaussMixEnv::new(vec![vec![o, o], vec![-o, o], vec![-o, -o], vec![o, -o]], self.env_data_std)?;
        let kinds = self
            .rewards
            .iter()
            .map(|name| match name.as_str() {
                "target" => Ok(RewardKind::Target {
                    width: self.target_width,
                }),
                "ring" => Ok(RewardKind::Ring {
                    radius: self.ring_radius,
                    width: self.ring_width,
                    scale: self.ring_scale,
                }),
                "angle" => Ok(RewardKind::Angle),
                other => Err(Error::config("rewards", format!("unknown reward {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        ToyEnv::new(data.clone(), RewardSpec::with_default_phases(kinds, &data))
    }

    pub fn noise(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.noise_level, self.t_clip).map_err(|e| {
            let key = if self.noise_level < 0.0 || !self.noise_level.is_finite() {
                "noise_level"
            } else {
                "t_clip"
            };
            Error::config(key, e.to_string())
        })
    }

    pub fn schedule(&self) -> Result<BranchSchedule> {
        self.schedule_from(&self.branch_schedule)
    }

    pub fn schedule_from(&self, rule: &[(usize, usize)]) -> Result<BranchSchedule> {
        if self.root_factor == 0 {
            return Err(Error::config("root_factor", "must be at least 1"));
        }
        if self.time_steps < 2 {
            return Err(Error::config("time_steps", "must be at least 2"));
        }
        BranchSchedule::from_denoising_rule(self.root_factor, rule, self.time_steps)
            .map_err(|e| Error::config("branch_schedule", e.to_string()))
    }

    pub fn model_spec(&self, env: &ToyEnv) -> Result<MlpSpec> {
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "widths must be positive"));
        }
        Ok(VelocityModel::spec_for(env.dim(), env.num_conditions(), self.hidden_dims.clone())
            .with_activation(self.activation))
    }

    pub fn grouping(&self, num_rewards: usize) -> Result<GroupingConfig> {
        let grouping = GroupingConfig {
            strategy: self.strategy,
            temporal: self.temporal,
            weights: self.weights.clone(),
            scaled: self.scaled,
            eps_std: self.eps_std,
        };
        grouping.validate(num_rewards).map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::config("weights", other.to_string()),
        })?;
        Ok(grouping)
    }

    /// Trainer settings for `schedule`, with everything validated.
    pub fn grpo_with(&self, env: &ToyEnv, schedule: BranchSchedule, grouping: GroupingConfig) -> Result<GrpoConfig> {
        let config = GrpoConfig {
            eps_clip: self.eps_clip,
            beta_kl: self.beta_kl,
            inner_epochs: self.inner_epochs,
            learning_rate: self.learning_rate,
            prompts_per_iter: self.prompts_per_iter,
            iterations: self.iterations,
            grouping,
            schedule,
            time_steps: self.time_steps,
            noise: self.noise()?,
        };
        config.validate(env.num_rewards())?;
        Ok(config)
    }

    pub fn grpo(&self, env: &ToyEnv) -> Result<GrpoConfig> {
        self.grpo_with(env, self.schedule()?, self.grouping(env.num_rewards())?)
    }

    /// Checks the keys shared by all commands. Keys whose validity depends on
    /// `time_steps` (`diversity_steps`, `ablate_schedules`) are checked by the
    /// command that reads them.
    pub fn validate(&self) -> Result<()> {
        let env = self.env()?;
        self.model_spec(&env)?.validate().map_err(|e| Error::config("hidden_dims", e.to_string()))?;
        self.grpo(&env)?;
        if self.pretrain_batch == 0 {
            return Err(Error::config("pretrain_batch", "must be at least 1"));
        }
        if !(self.pretrain_lr >= 0.0 && self.pretrain_lr.is_finite()) {
            return Err(Error::config("pretrain_lr", "must be finite and non-negative"));
        }
        if self.diversity_factor < 2 {
            return Err(Error::config("diversity_factor", "must be at least 2"));
        }
        if self.diversity_trees < 2 {
            return Err(Error::config("diversity_trees", "need at least 2 trees"));
        }
        if self.noise_table_steps.iter().any(|&t| t < 2) {
            return Err(Error::config("noise_table_steps", "each entry must be at least 2"));
        }
        for w in &self.ablate_weight_sets {
            if w.len() != env.num_rewards() {
                return Err(Error::config(
                    "ablate_weight_sets",
                    format!("weight set has {} entries, expected {}", w.len(), env.num_rewards()),
                ));
            }
        }
        if self.eval_samples < 2 {
            return Err(Error::config("eval_samples", "need at least 2 samples"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        let g = c.grpo(&c.env().unwrap()).unwrap();
        assert_eq!(g.schedule.leaf_count(), 48);
        assert_eq!(g.schedule, BranchSchedule::new(8, &[(8, 3), (6, 2)]));
    }

    #[test]
    fn parse_overrides_and_lists() {
        let text = "# comment\nseed = 7\nbranch_schedule = 3:2\nweights=1, 4, 1\n\nstrategy = naive_mix\n\
                    ablate_schedules = 2:3,4:2; 6:3,8:2; -\nablate_weight_sets = 1,1,1;1,10,1\ncheckpoint = a/b.ckpt\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.branch_schedule, vec![(3, 2)]);
        assert_eq!(c.weights, vec![1.0, 4.0, 1.0]);
        assert_eq!(c.strategy, GroupingStrategy::NaiveMix);
        assert_eq!(c.ablate_schedules, vec![vec![(2, 3), (4, 2)], vec![(6, 3), (8, 2)], vec![]]);
        assert_eq!(c.ablate_weight_sets.len(), 2);
        assert_eq!(c.checkpoint, Some(PathBuf::from("a/b.ckpt")));
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        let empty = ExperimentConfig::parse("branch_schedule =\n").unwrap();
        assert!(empty.branch_schedule.is_empty());
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("bogus = 1", "bogus"),
            ("seed = x", "seed"),
            ("seed = 1\nseed = 2", "seed"),
            ("temporal = maybe", "temporal"),
            ("branch_schedule = 2-3", "branch_schedule"),
            ("noise_level = -1", "noise_level"),
            ("t_clip = 0.7", "t_clip"),
            ("eps_clip = 1.5", "eps_clip"),
            ("inner_epochs = 0", "inner_epochs"),
            ("branch_schedule = 1:2", "branch_schedule"),
            ("branch_schedule = 4:2,2:3", "branch_schedule"),
            ("branch_schedule = 2:1", "branch_schedule"),
            ("root_factor = 0", "root_factor"),
            ("weights = 1,1", "weights"),
            ("rewards = target,colour", "rewards"),
            ("ring_scale = 0", "ring_scale"),
            ("diversity_factor = 1", "diversity_factor"),
            ("ablate_weight_sets = 1,2", "ablate_weight_sets"),
            ("hidden_dims = 0", "hidden_dims"),
            ("just text", "line 1"),
        ];
        for (text, key) in cases {
            let err = ExperimentConfig::parse(text).and_then(|c| c.validate().map(|_| c));
            assert_eq!(key_of(err.unwrap_err()), key, "{text}");
        }
    }
}
