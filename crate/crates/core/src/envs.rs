//! Toy conditional data and closed-form rewards.
//!
//! The rewards are deliberately mismatched in scale: `target` and `angle`
//! live in `[0, 1]`, while `ring` reaches `scale` (50 by default).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::RewardVector;
use crate::error::{check_len, Error, Result};
use crate::rng::standard_normal_vec;

/// Isotropic Gaussian mixture with one mode per condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussMixEnv {
    centers: Vec<Vec<f64>>,
    data_std: f64,
}

impl GaussMixEnv {
    pub fn new(centers: Vec<Vec<f64>>, data_std: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::config("env_centers", "need at least 2 modes"));
        }
        let dim = centers[0].len();
        if dim == 0 {
            return Err(Error::config("env_centers", "centers must have at least one coordinate"));
        }
        for (i, c) in centers.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::config(
                    "env_centers",
                    format!("center {i} has dimension {} (expected {dim})", c.len()),
                ));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("env_centers", format!("center {i} is not finite")));
            }
            if centers[..i].contains(c) {
                return Err(Error::config("env_centers", format!("center {i} duplicates an earlier one")));
            }
        }
        if !(data_std >= 0.0 && data_std.is_finite()) {
            return Err(Error::config("env_data_std", "must be finite and non-negative"));
        }
        Ok(Self { centers, data_std })
    }

    /// Four modes at `(±2, ±2)` with standard deviation 0.3.
    pub fn default_2d() -> Self {
        Self::new(
            vec![vec![2.0, 2.0], vec![-2.0, 2.0], vec![-2.0, -2.0], vec![2.0, -2.0]],
            0.3,
        )
        .expect("default centers are valid")
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn num_conditions(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn data_std(&self) -> f64 {
        self.data_std
    }

    pub fn center(&self, condition: usize) -> Result<&[f64]> {
        self.centers
            .get(condition)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Domain(format!("unknown condition {condition}")))
    }

    pub fn sample_data<R: Rng + ?Sized>(&self, condition: usize, rng: &mut R) -> Result<Vec<f64>> {
        let center = self.center(condition)?;
        let z = standard_normal_vec(rng, center.len());
        Ok(center
            .iter()
            .zip(z)
            .map(|(m, z)| m + self.data_std * z)
            .collect())
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `exp(-||x - center||^2 / (2 width^2))`.
pub fn reward_target(x: &[f64], center: &[f64], width: f64) -> f64 {
    let d2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * width * width)).exp()
}

/// `scale * exp(-(||x|| - radius)^2 / (2 width^2))`.
pub fn reward_ring(x: &[f64], radius: f64, width: f64, scale: f64) -> f64 {
    let r = norm(x) - radius;
    scale * (-r * r / (2.0 * width * width)).exp()
}

/// `(1 + cos(angle(x) - phase)) / 2` on the first two coordinates; 0.5 at
/// the origin.
pub fn reward_angle(x: &[f64], phase: f64) -> f64 {
    if x[0] == 0.0 && x[1] == 0.0 {
        return 0.5;
    }
    0.5 * (1.0 + (x[1].atan2(x[0]) - phase).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RewardKind {
    Target { width: f64 },
    Ring { radius: f64, width: f64, scale: f64 },
    Angle,
}

impl RewardKind {
    pub fn name(&self) -> &'static str {
        match self {
            RewardKind::Target { .. } => "target",
            RewardKind::Ring { .. } => "ring",
            RewardKind::Angle => "angle",
        }
    }
}

/// Ordered reward functions plus the per-condition angle phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub rewards: Vec<RewardKind>,
    /// `phi_c` per condition; used only by [`RewardKind::Angle`].
    pub angle_phases: Vec<f64>,
}

impl RewardSpec {
    /// Phases default to the polar angle of each mode center.
    pub fn with_default_phases(rewards: Vec<RewardKind>, env: &GaussMixEnv) -> Self {
        let angle_phases = env
            .centers()
            .iter()
            .map(|c| if c.len() >= 2 { c[1].atan2(c[0]) } else { 0.0 })
            .collect();
        Self { rewards, angle_phases }
    }

    pub fn validate(&self, env: &GaussMixEnv) -> Result<()> {
        if self.rewards.is_empty() {
            return Err(Error::config("rewards", "need at least one reward"));
        }
        for r in &self.rewards {
            match *r {
                RewardKind::Target { width } => {
                    if !(width > 0.0 && width.is_finite()) {
                        return Err(Error::config("target_width", "must be positive"));
                    }
                }
                RewardKind::Ring { radius, width, scale } => {
                    if !(radius >= 0.0 && radius.is_finite()) {
                        return Err(Error::config("ring_radius", "must be finite and non-negative"));
                    }
                    if !(width > 0.0 && width.is_finite()) {
                        return Err(Error::config("ring_width", "must be positive"));
                    }
                    if !(scale > 0.0 && scale.is_finite()) {
                        return Err(Error::config("ring_scale", "must be positive"));
                    }
                }
                RewardKind::Angle => {
                    if env.dim() < 2 {
                        return Err(Error::config("rewards", "angle reward needs at least 2 dimensions"));
                    }
                    if self.angle_phases.len() != env.num_conditions() {
                        return Err(Error::config(
                            "angle_phases",
                            format!("expected {} phases", env.num_conditions()),
                        ));
                    }
                    if self.angle_phases.iter().any(|p| !p.is_finite()) {
                        return Err(Error::config("angle_phases", "phases must be finite"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.rewards.iter().map(RewardKind::name).collect()
    }
}

/// Data distribution plus rewards: everything the trainer needs from a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEnv {
    pub data: GaussMixEnv,
    pub rewards: RewardSpec,
}

impl ToyEnv {
    pub fn new(data: GaussMixEnv, rewards: RewardSpec) -> Result<Self> {
        rewards.validate(&data)?;
        Ok(Self { data, rewards })
    }

    /// Default mixture with the target/ring/angle rewards.
    pub fn default_three_reward() -> Self {
        let data = GaussMixEnv::default_2d();
        let rewards = RewardSpec::with_default_phases(
            vec![
                RewardKind::Target { width: 0.3 },
                RewardKind::Ring {
                    radius: 3.4,
                    width: 0.4,
                    scale: 50.0,
                },
                RewardKind::Angle,
            ],
            &data,
        );
        Self::new(data, rewards).expect("default env is valid")
    }

    pub fn num_rewards(&self) -> usize {
        self.rewards.rewards.len()
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn num_conditions(&self) -> usize {
        self.data.num_conditions()
    }

    pub fn sample_condition<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.num_conditions())
    }

    pub fn reward_vector(&self, x: &[f64], condition: usize) -> Result<RewardVector> {
        check_len("reward input", self.dim(), x.len())?;
        let center = self.data.center(condition)?;
        let values = self
            .rewards
            .rewards
            .iter()
            .map(|r| match *r {
                RewardKind::Target { width } => reward_target(x, center, width),
                RewardKind::Ring { radius, width, scale } => reward_ring(x, radius, width, scale),
                RewardKind::Angle => reward_angle(x, self.rewards.angle_phases[condition]),
            })
            .collect();
        Ok(RewardVector(values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn data_sampling() {
        let exact = GaussMixEnv::new(vec![vec![1.0, 2.0], vec![-1.0, 0.5]], 0.0).unwrap();
        let mut rng = stream(0, &[]);
        assert_eq!(exact.sample_data(1, &mut rng).unwrap(), vec![-1.0, 0.5]);
        assert!(exact.sample_data(2, &mut rng).is_err());

        let env = GaussMixEnv::default_2d();
        let n = 10_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let x = env.sample_data(3, &mut rng).unwrap();
            acc[0] += x[0];
            acc[1] += x[1];
        }
        assert!((acc[0] / n as f64 - 2.0).abs() < 3.0 * 0.3 / 100.0);
        assert!((acc[1] / n as f64 + 2.0).abs() < 3.0 * 0.3 / 100.0);
        assert_ne!(env.center(0).unwrap(), env.center(1).unwrap());
    }

    #[test]
    fn env_validation() {
        assert!(GaussMixEnv::new(vec![vec![1.0]], 0.1).is_err());
        assert!(GaussMixEnv::new(vec![vec![1.0], vec![1.0]], 0.1).is_err());
        assert!(GaussMixEnv::new(vec![vec![1.0], vec![1.0, 2.0]], 0.1).is_err());
        assert!(GaussMixEnv::new(vec![vec![1.0], vec![2.0]], -0.1).is_err());
        let one_d = GaussMixEnv::new(vec![vec![1.0], vec![2.0]], 0.1).unwrap();
        let spec = RewardSpec::with_default_phases(vec![RewardKind::Angle], &one_d);
        assert!(ToyEnv::new(one_d, spec).is_err());
    }

    #[test]
    fn target_reward() {
        assert_eq!(reward_target(&[1.0, 2.0], &[1.0, 2.0], 0.3), 1.0);
        let r = reward_target(&[1.3, 2.0], &[1.0, 2.0], 0.3);
        assert!((r - (-0.5f64).exp()).abs() < 1e-12);
        assert!((r - 0.6065).abs() < 1e-4);
        assert!(reward_target(&[1.5, 2.0], &[1.0, 2.0], 0.3) < r);
    }

    #[test]
    fn ring_reward() {
        assert_eq!(reward_ring(&[3.0, 4.0], 5.0, 0.4, 50.0), 50.0);
        let a = reward_ring(&[1.0, 2.0], 3.0, 0.4, 50.0);
        let b = reward_ring(&[-2.0, 1.0], 3.0, 0.4, 50.0);
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0 && a < 50.0);
    }

    #[test]
    fn angle_reward() {
        assert!((reward_angle(&[1.0, 1.0], FRAC_PI_4) - 1.0).abs() < 1e-15);
        assert!(reward_angle(&[-1.0, -1.0], FRAC_PI_4).abs() < 1e-15);
        assert_eq!(reward_angle(&[0.0, 0.0], 1.0), 0.5);
    }

    #[test]
    fn reward_vectors() {
        let env = ToyEnv::default_three_reward();
        let radius = 8f64.sqrt();
        let data = env.data.clone();
        let rewards = RewardSpec::with_default_phases(
            vec![
                RewardKind::Target { width: 0.3 },
                RewardKind::Ring {
                    radius,
                    width: 0.4,
                    scale: 50.0,
                },
                RewardKind::Angle,
            ],
            &data,
        );
        let on_ring = ToyEnv::new(data, rewards).unwrap();
        let r = on_ring.reward_vector(&[2.0, 2.0], 0).unwrap();
        assert!((r.0[0] - 1.0).abs() < 1e-15);
        assert!((r.0[1] - 50.0).abs() < 1e-12);
        assert!((r.0[2] - 1.0).abs() < 1e-15);

        let single = ToyEnv::new(
            env.data.clone(),
            RewardSpec::with_default_phases(vec![RewardKind::Target { width: 0.3 }], &env.data),
        )
        .unwrap();
        assert_eq!(single.reward_vector(&[0.1, 0.2], 2).unwrap().len(), 1);
        assert_eq!(env.reward_vector(&[0.1, 0.2], 2).unwrap(), env.reward_vector(&[0.1, 0.2], 2).unwrap());
        assert!(env.reward_vector(&[0.1], 2).is_err());
    }
}
