//! Rectified-flow primitives: interpolation, the flow-matching loss, time
//! grids, the noise schedule, and the Euler–Maruyama reverse SDE step whose
//! transitions are isotropic Gaussians.
//!
//! Time runs from `t = 1` (noise) at step `T` down to `t = 0` (data) at step 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{Mlp, MlpSpec, ParamVector, ScalarLoss};
use crate::rng::standard_normal_vec;

pub const DEFAULT_T_CLIP: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Anything that can produce a velocity `v(x, t, c)`.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, condition: usize) -> Result<Vec<f64>>;
}

/// The MLP velocity field. Its input is `concat(x, t, one_hot(c))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub cond_dim: usize,
}

impl VelocityModel {
    pub fn new(spec: MlpSpec, params: ParamVector, cond_dim: usize) -> Result<Self> {
        spec.validate()?;
        check_len("velocity model parameters", spec.param_count(), params.len())?;
        if spec.input_dim != spec.output_dim + 1 + cond_dim {
            return Err(Error::config(
                "hidden_dims",
                format!(
                    "velocity network input {} must equal dim {} + 1 + conditions {}",
                    spec.input_dim, spec.output_dim, cond_dim
                ),
            ));
        }
        Ok(Self {
            spec,
            params,
            cond_dim,
        })
    }

    /// Architecture for a `dim`-dimensional flow with `cond_dim` conditions.
    pub fn spec_for(dim: usize, cond_dim: usize, hidden: Vec<usize>) -> MlpSpec {
        MlpSpec::new(dim + 1 + cond_dim, hidden, dim)
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.spec.clone(), params, self.cond_dim)
    }

    pub fn input(&self, x: &[f64], t: f64, condition: usize) -> Result<Vec<f64>> {
        encode_input(self.dim(), self.cond_dim, x, t, condition)
    }

    pub fn mlp(&self) -> Mlp<'_> {
        Mlp::new(&self.spec, &self.params).expect("validated on construction")
    }
}

pub(crate) fn encode_input(
    dim: usize,
    cond_dim: usize,
    x: &[f64],
    t: f64,
    condition: usize,
) -> Result<Vec<f64>> {
    check_len("velocity input state", dim, x.len())?;
    if condition >= cond_dim {
        return Err(Error::Domain(format!(
            "condition {condition} out of range (have {cond_dim})"
        )));
    }
    let mut input = Vec::with_capacity(dim + 1 + cond_dim);
    input.extend_from_slice(x);
    input.push(t);
    input.extend((0..cond_dim).map(|k| if k == condition { 1.0 } else { 0.0 }));
    Ok(input)
}

impl VelocityField for VelocityModel {
    fn dim(&self) -> usize {
        self.spec.output_dim
    }

    fn velocity(&self, x: &[f64], t: f64, condition: usize) -> Result<Vec<f64>> {
        self.mlp().forward(&self.input(x, t, condition)?)
    }
}

/// Uniform grid `t_j = j / T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("time_steps", "must be at least 1"));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t(&self, j: usize) -> f64 {
        j as f64 / self.steps as f64
    }

    /// `t_j - t_{j-1}`; defined for `j >= 1`.
    pub fn dt(&self, j: usize) -> f64 {
        debug_assert!(j >= 1);
        self.t(j) - self.t(j - 1)
    }

    pub fn t_values(&self) -> Vec<f64> {
        (0..=self.steps).map(|j| self.t(j)).collect()
    }
}

/// `sigma(t) = a * sqrt(t / (1 - t))` with clipped time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub a: f64,
    pub t_clip: f64,
}

impl NoiseSchedule {
    pub fn new(a: f64, t_clip: f64) -> Result<Self> {
        if !(a.is_finite() && a >= 0.0) {
            return Err(Error::config("noise_level", "must be finite and non-negative"));
        }
        if !(t_clip > 0.0 && t_clip < 0.5) {
            return Err(Error::config("t_clip", "must lie in (0, 0.5)"));
        }
        Ok(Self { a, t_clip })
    }

    pub fn with_level(a: f64) -> Result<Self> {
        Self::new(a, DEFAULT_T_CLIP)
    }

    fn sigma_clamped(&self, t: f64, upper: f64) -> f64 {
        let t = t.clamp(self.t_clip, upper);
        self.a * (t / (1.0 - t)).sqrt()
    }

    /// Noise level at time `t`, with `t` clipped into `[t_clip, 1 - t_clip]`.
    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_clamped(t, 1.0 - self.t_clip)
    }

    /// Noise level used by a reverse step of length `dt` leaving time `t`.
    ///
    /// The upper clip is `1 - max(t_clip, dt / 2)`: at `t = 1` the schedule
    /// diverges, and clipping at `1 - t_clip` would inject noise of order
    /// `a / sqrt(t_clip)` into the first step.
    pub fn step_sigma(&self, t: f64, dt: f64) -> f64 {
        self.sigma_clamped(t, 1.0 - self.t_clip.max(0.5 * dt))
    }

    /// Standard deviation of the Gaussian transition, `sigma * sqrt(dt)`.
    pub fn noise_scale(&self, t: f64, dt: f64) -> f64 {
        self.step_sigma(t, dt) * dt.sqrt()
    }
}

/// `x_t = (1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len("interpolate", x0.len(), x1.len())?;
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// Score of the marginal implied by a rectified-flow velocity:
/// `-x/t - (1-t)/t * v`, with `t` clipped into `[t_clip, 1 - t_clip]`.
pub fn score(x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    let t = t.clamp(DEFAULT_T_CLIP, 1.0 - DEFAULT_T_CLIP);
    let k = (1.0 - t) / t;
    x.iter().zip(v).map(|(xi, vi)| -xi / t - k * vi).collect()
}

/// Scalar coefficients of the transition mean `x - [v + s^2/(2t)(x + (1-t)v)] dt`
/// written as `mean = cx * x + cv * v`.
fn mean_coefficients(t: f64, dt: f64, schedule: &NoiseSchedule) -> (f64, f64) {
    let sigma = schedule.step_sigma(t, dt);
    let t = t.max(schedule.t_clip);
    let k = sigma * sigma / (2.0 * t);
    (1.0 - k * dt, -(1.0 + k * (1.0 - t)) * dt)
}

/// Derivative of the transition mean with respect to the velocity
/// (the mean is affine in `v` with a scalar slope).
pub fn mean_velocity_slope(t: f64, dt: f64, schedule: &NoiseSchedule) -> f64 {
    mean_coefficients(t, dt, schedule).1
}

/// Mean of the reverse-SDE transition leaving `(x, t)`.
pub fn transition_mean(x: &[f64], v: &[f64], t: f64, dt: f64, schedule: &NoiseSchedule) -> Vec<f64> {
    let (cx, cv) = mean_coefficients(t, dt, schedule);
    x.iter().zip(v).map(|(xi, vi)| cx * xi + cv * vi).collect()
}

/// Log-density of an isotropic Gaussian `N(mean, noise_scale^2 I)` at `x_to`.
pub fn transition_logprob(x_to: &[f64], mean: &[f64], noise_scale: f64) -> Result<f64> {
    if !(noise_scale > 0.0) || !noise_scale.is_finite() {
        return Err(Error::Domain(format!(
            "transition noise scale must be positive, got {noise_scale}"
        )));
    }
    check_len("transition_logprob", mean.len(), x_to.len())?;
    let var = noise_scale * noise_scale;
    let sq: f64 = x_to.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    Ok(-0.5 * x_to.len() as f64 * (LN_2PI + var.ln()) - sq / (2.0 * var))
}

/// One stochastic edge `x_from -> x_to`, recorded under the behaviour policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Index `j` of the state the transition leaves.
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub x_from: Vec<f64>,
    pub x_to: Vec<f64>,
    pub mean_old: Vec<f64>,
    pub noise_scale: f64,
    /// Zero for deterministic (`a = 0`) transitions, which carry no density.
    pub logp_old: f64,
    pub condition: usize,
}

/// The Gaussian kernel of one reverse step: shared by every child drawn from
/// the same parent state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepKernel {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub mean: Vec<f64>,
    pub noise_scale: f64,
    pub condition: usize,
}

impl StepKernel {
    pub fn new<M: VelocityField + ?Sized>(
        model: &M,
        x: &[f64],
        condition: usize,
        j: usize,
        grid: &TimeGrid,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        if j == 0 || j > grid.steps() {
            return Err(Error::Domain(format!("step index {j} outside 1..={}", grid.steps())));
        }
        let v = model.velocity(x, grid.t(j), condition)?;
        Self::from_velocity(x, &v, condition, j, grid, schedule)
    }

    pub fn from_velocity(
        x: &[f64],
        v: &[f64],
        condition: usize,
        j: usize,
        grid: &TimeGrid,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        check_len("velocity", x.len(), v.len())?;
        let (t, dt) = (grid.t(j), grid.dt(j));
        let mean = transition_mean(x, v, t, dt, schedule);
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::numeric(format!("transition mean[{i}] at step {j}")));
        }
        Ok(Self {
            step: j,
            t,
            dt,
            mean,
            noise_scale: schedule.noise_scale(t, dt),
            condition,
        })
    }

    /// Draws `x_to = mean + noise_scale * z` and records the transition.
    pub fn sample(&self, x_from: &[f64], z: &[f64]) -> Result<Transition> {
        check_len("sde noise", self.mean.len(), z.len())?;
        let x_to: Vec<f64> = self
            .mean
            .iter()
            .zip(z)
            .map(|(m, zi)| m + self.noise_scale * zi)
            .collect();
        if let Some(i) = x_to.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("state[{i}] at step {}", self.step - 1)));
        }
        let logp_old = if self.noise_scale > 0.0 {
            transition_logprob(&x_to, &self.mean, self.noise_scale)?
        } else {
            0.0
        };
        Ok(Transition {
            step: self.step,
            t: self.t,
            dt: self.dt,
            x_from: x_from.to_vec(),
            x_to,
            mean_old: self.mean.clone(),
            noise_scale: self.noise_scale,
            logp_old,
            condition: self.condition,
        })
    }
}

/// Euler–Maruyama reverse step from step `j` to `j - 1` with the given noise.
pub fn sde_step<M: VelocityField + ?Sized>(
    model: &M,
    x: &[f64],
    condition: usize,
    j: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    z: &[f64],
) -> Result<(Vec<f64>, Transition)> {
    let kernel = StepKernel::new(model, x, condition, j, grid, schedule)?;
    let tr = kernel.sample(x, z)?;
    Ok((tr.x_to.clone(), tr))
}

/// Euler step of the probability-flow ODE: `x - v(x, t_j) dt_j`.
pub fn ode_step<M: VelocityField + ?Sized>(
    model: &M,
    x: &[f64],
    condition: usize,
    j: usize,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    if j == 0 || j > grid.steps() {
        return Err(Error::Domain(format!("step index {j} outside 1..={}", grid.steps())));
    }
    let v = model.velocity(x, grid.t(j), condition)?;
    check_len("velocity", x.len(), v.len())?;
    let dt = grid.dt(j);
    Ok(x.iter().zip(&v).map(|(xi, vi)| xi - vi * dt).collect())
}

/// Full reverse-SDE trajectory from `x_T`; returns the final state and the
/// `T` transitions in denoising order.
pub fn sample_sde<M: VelocityField + ?Sized, R: Rng + ?Sized>(
    model: &M,
    condition: usize,
    x_start: &[f64],
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<Transition>)> {
    if let Some(i) = x_start.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("initial state[{i}]")));
    }
    let mut x = x_start.to_vec();
    let mut transitions = Vec::with_capacity(grid.steps());
    for j in (1..=grid.steps()).rev() {
        let z = standard_normal_vec(rng, x.len());
        let (next, tr) = sde_step(model, &x, condition, j, grid, schedule, &z)?;
        transitions.push(tr);
        x = next;
    }
    Ok((x, transitions))
}

pub fn sample_ode<M: VelocityField + ?Sized>(
    model: &M,
    condition: usize,
    x_start: &[f64],
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let mut x = x_start.to_vec();
    for j in (1..=grid.steps()).rev() {
        x = ode_step(model, &x, condition, j, grid)?;
    }
    Ok(x)
}

/// One flow-matching training tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct FmSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub t: f64,
    pub condition: usize,
}

/// `mean_i ||v(x_t, t, c) - (x1 - x0)||^2` as a differentiable loss.
pub struct FlowMatchingLoss<'a> {
    pub spec: &'a MlpSpec,
    pub cond_dim: usize,
    pub batch: &'a [FmSample],
}

impl ScalarLoss for FlowMatchingLoss<'_> {
    fn value_and_grad(&self, params: &ParamVector, grad: &mut [f64]) -> Result<f64> {
        if self.batch.is_empty() {
            return Err(Error::Domain("flow-matching batch is empty".into()));
        }
        let mlp = Mlp::new(self.spec, params)?;
        let dim = self.spec.output_dim;
        let scale = 1.0 / self.batch.len() as f64;
        let mut total = 0.0;
        for s in self.batch {
            let xt = interpolate(&s.x0, &s.x1, s.t)?;
            let input = encode_input(dim, self.cond_dim, &xt, s.t, s.condition)?;
            let cache = mlp.forward_cached(&input)?;
            let diff: Vec<f64> = cache
                .output()
                .iter()
                .zip(s.x1.iter().zip(&s.x0))
                .map(|(o, (a, b))| o - (a - b))
                .collect();
            total += diff.iter().map(|d| d * d).sum::<f64>();
            let dout: Vec<f64> = diff.iter().map(|d| 2.0 * d * scale).collect();
            mlp.backward(&cache, &dout, grad)?;
        }
        Ok(total * scale)
    }
}

pub fn fm_loss(model: &VelocityModel, batch: &[FmSample]) -> Result<f64> {
    FlowMatchingLoss {
        spec: &model.spec,
        cond_dim: model.cond_dim,
        batch,
    }
    .value(&model.params)
}
