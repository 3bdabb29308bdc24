//! A small multilayer perceptron over a flat parameter vector.
//!
//! Parameters are laid out layer by layer; each layer stores its weight
//! matrix (row-major, `out x in`) followed by its bias vector. Hidden layers
//! apply the configured activation, the output layer is affine.
//!
//! Gradients are computed by an explicit backward pass
//! ([`Mlp::backward`]), which is enough for every loss in this crate: each
//! one is a sum of differentiable "heads" applied to network outputs (see
//! [`HeadLoss`]) plus, optionally, terms that act on the parameters directly.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::standard_normal_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `h = act(z)`.
    #[inline]
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(
                "activation",
                format!("unknown activation `{other}` (expected tanh or relu)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be at least 1"));
        }
        if self.output_dim == 0 {
            return Err(Error::config("output_dim", "must be at least 1"));
        }
        if let Some(pos) = self.hidden_dims.iter().position(|&h| h == 0) {
            return Err(Error::config(
                "hidden_dims",
                format!("hidden layer {pos} has width 0"),
            ));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flat parameter vector. The layout is a pure function of the [`MlpSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(format!("{what}[{i}]"))),
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Draws weights from `N(0, 1/fan_in)`; biases start at zero.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for w in spec.layer_dims().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        values.extend(
            standard_normal_vec(&mut rng, fan_in * fan_out)
                .into_iter()
                .map(|z| z * scale),
        );
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(ParamVector(values))
}

/// Per-layer activations recorded by a forward pass, consumed by
/// [`Mlp::backward`]. `layers[0]` is the input, the last entry the output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("cache always holds the input")
    }
}

/// A spec paired with borrowed parameters, checked once on construction.
#[derive(Debug, Clone, Copy)]
pub struct Mlp<'a> {
    spec: &'a MlpSpec,
    params: &'a [f64],
}

impl<'a> Mlp<'a> {
    pub fn new(spec: &'a MlpSpec, params: &'a ParamVector) -> Result<Self> {
        Self::from_slice(spec, params.as_slice())
    }

    pub fn from_slice(spec: &'a MlpSpec, params: &'a [f64]) -> Result<Self> {
        spec.validate()?;
        check_len("mlp parameters", spec.param_count(), params.len())?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        self.spec
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.layers.pop().unwrap_or_default())
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        check_len("mlp input", self.spec.input_dim, input.len())?;
        let dims = self.spec.layer_dims();
        let n_layers = dims.len() - 1;
        let mut layers = Vec::with_capacity(dims.len());
        layers.push(input.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let prev = &layers[l];
            let is_output = l + 1 == n_layers;
            let next: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    let z = bias[o] + row.iter().zip(prev).map(|(w, h)| w * h).sum::<f64>();
                    if is_output {
                        z
                    } else {
                        self.spec.activation.apply(z)
                    }
                })
                .collect();
            layers.push(next);
        }
        Ok(ForwardCache { layers })
    }

    /// Accumulates `J^T · output_grad` into `grad`, where `J` is the Jacobian
    /// of the network output with respect to the parameters at the cached
    /// forward pass.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64], grad: &mut [f64]) -> Result<()> {
        check_len("mlp output gradient", self.spec.output_dim, output_grad.len())?;
        check_len("mlp gradient buffer", self.params.len(), grad.len())?;
        let dims = self.spec.layer_dims();
        let n_layers = dims.len() - 1;

        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for w in dims.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }

        // delta holds dL/dz for the current layer.
        let mut delta = output_grad.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let w_off = offsets[l];
            let b_off = w_off + fan_in * fan_out;
            let prev = &cache.layers[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (g, h) in row.iter_mut().zip(prev) {
                    *g += d * h;
                }
                grad[b_off + o] += d;
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[w_off..b_off];
            let mut next = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                    *n += d * w;
                }
            }
            for (n, h) in next.iter_mut().zip(prev) {
                *n *= self.spec.activation.derivative_from_output(*h);
            }
            delta = next;
        }
        Ok(())
    }
}

/// Convenience wrapper around [`Mlp::forward`].
pub fn mlp_forward(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    Mlp::new(spec, params)?.forward(input)
}

/// A scalar function of the parameters that can report its own gradient.
pub trait ScalarLoss {
    /// Returns the loss value and writes its gradient into `grad`
    /// (which arrives zeroed and has the parameter vector's length).
    fn value_and_grad(&self, params: &ParamVector, grad: &mut [f64]) -> Result<f64>;

    fn value(&self, params: &ParamVector) -> Result<f64> {
        let mut scratch = vec![0.0; params.len()];
        self.value_and_grad(params, &mut scratch)
    }
}

/// Gradient of `loss` at `params`, rejecting non-finite results.
pub fn grad_scalar<L: ScalarLoss + ?Sized>(params: &ParamVector, loss: &L) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    let value = loss.value_and_grad(params, &mut grad)?;
    if !value.is_finite() {
        return Err(Error::numeric("loss value"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("gradient[{i}]")));
    }
    Ok(grad)
}

/// `||params||^2 / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HalfSquaredNorm;

impl ScalarLoss for HalfSquaredNorm {
    fn value_and_grad(&self, params: &ParamVector, grad: &mut [f64]) -> Result<f64> {
        grad.copy_from_slice(params.as_slice());
        Ok(0.5 * params.as_slice().iter().map(|p| p * p).sum::<f64>())
    }
}

/// A loss that ignores its parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConstantLoss(pub f64);

impl ScalarLoss for ConstantLoss {
    fn value_and_grad(&self, _params: &ParamVector, _grad: &mut [f64]) -> Result<f64> {
        Ok(self.0)
    }
}

/// `sum_i head(i, mlp(inputs[i]))`, where each head returns its value and the
/// derivative with respect to the network output.
pub struct HeadLoss<'a, F> {
    pub spec: &'a MlpSpec,
    pub inputs: &'a [Vec<f64>],
    pub head: F,
}

impl<F> ScalarLoss for HeadLoss<'_, F>
where
    F: Fn(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn value_and_grad(&self, params: &ParamVector, grad: &mut [f64]) -> Result<f64> {
        let mlp = Mlp::new(self.spec, params)?;
        let mut total = 0.0;
        for (i, input) in self.inputs.iter().enumerate() {
            let cache = mlp.forward_cached(input)?;
            let (value, dout) = (self.head)(i, cache.output())?;
            total += value;
            mlp.backward(&cache, &dout, grad)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad<L: ScalarLoss>(loss: &L, params: &ParamVector, i: usize, h: f64) -> f64 {
        let mut p = params.clone();
        p.as_mut_slice()[i] += h;
        let up = loss.value(&p).unwrap();
        p.as_mut_slice()[i] -= 2.0 * h;
        let down = loss.value(&p).unwrap();
        (up - down) / (2.0 * h)
    }

    #[test]
    fn layout_lengths() {
        assert_eq!(mlp_init(&MlpSpec::new(1, vec![], 1), 3).unwrap().len(), 2);
        assert_eq!(MlpSpec::new(2, vec![4], 1).param_count(), 17);
        assert_eq!(mlp_init(&MlpSpec::new(2, vec![4], 1), 0).unwrap().len(), 17);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = MlpSpec::new(3, vec![5], 2);
        let a = mlp_init(&spec, 11).unwrap();
        assert_eq!(a, mlp_init(&spec, 11).unwrap());
        assert_ne!(a, mlp_init(&spec, 12).unwrap());
        // biases of the hidden layer: after 15 weights
        assert!(a.as_slice()[15..20].iter().all(|&b| b == 0.0));
        assert!(a.as_slice()[30..32].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(matches!(
            mlp_init(&MlpSpec::new(0, vec![], 1), 0),
            Err(Error::Config { .. })
        ));
        assert!(MlpSpec::new(1, vec![3, 0], 1).validate().is_err());
        assert!(MlpSpec::new(1, vec![], 0).validate().is_err());
    }

    #[test]
    fn forward_small_cases() {
        let spec = MlpSpec::new(1, vec![], 1);
        let p = ParamVector::new(vec![2.0, 1.0]);
        assert_eq!(mlp_forward(&p, &spec, &[3.0]).unwrap(), vec![7.0]);

        let spec = MlpSpec::new(1, vec![1], 1);
        let p = ParamVector::new(vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(mlp_forward(&p, &spec, &[0.0]).unwrap(), vec![0.0]);

        let spec = MlpSpec::new(3, vec![4, 4], 2);
        let p = ParamVector::zeros(spec.param_count());
        assert_eq!(mlp_forward(&p, &spec, &[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_shape_error() {
        let spec = MlpSpec::new(2, vec![3], 1);
        let p = mlp_init(&spec, 1).unwrap();
        assert!(matches!(
            mlp_forward(&p, &spec, &[1.0]),
            Err(Error::Shape { expected: 2, actual: 1, .. })
        ));
        let short = ParamVector::zeros(3);
        assert!(mlp_forward(&short, &spec, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn half_norm_and_constant_gradients() {
        let p = ParamVector::new(vec![1.0, -2.0, 0.5]);
        assert_eq!(grad_scalar(&p, &HalfSquaredNorm).unwrap(), vec![1.0, -2.0, 0.5]);
        assert_eq!(grad_scalar(&p, &ConstantLoss(4.0)).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let spec = MlpSpec::new(1, vec![], 1);
        let p = ParamVector::new(vec![1.0, 0.0]);
        let inputs = vec![vec![1.0]];
        let loss = HeadLoss {
            spec: &spec,
            inputs: &inputs,
            head: |_, _: &[f64]| Ok((0.0, vec![f64::NAN])),
        };
        let err = grad_scalar(&p, &loss).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref location } if location.starts_with("gradient")));
    }

    #[test]
    fn head_loss_matches_finite_differences() {
        for (k, act) in [(0u64, Activation::Tanh), (1, Activation::Relu), (2, Activation::Tanh)] {
            let spec = MlpSpec::new(3, vec![6, 5], 2).with_activation(act);
            let params = mlp_init(&spec, 40 + k).unwrap();
            let inputs: Vec<Vec<f64>> = (0..4)
                .map(|i| vec![0.3 * i as f64 - 0.5, 0.7, -0.2 * i as f64])
                .collect();
            let target = [0.25, -0.75];
            let loss = HeadLoss {
                spec: &spec,
                inputs: &inputs,
                head: |_, out: &[f64]| {
                    let diff: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o - t).collect();
                    let value = diff.iter().map(|d| d * d).sum::<f64>();
                    Ok((value, diff.iter().map(|d| 2.0 * d).collect()))
                },
            };
            let grad = grad_scalar(&params, &loss).unwrap();
            for i in (0..params.len()).step_by(3) {
                let fd = fd_grad(&loss, &params, i, 1e-5);
                let denom = grad[i].abs().max(fd.abs()).max(1e-8);
                assert!(
                    (grad[i] - fd).abs() / denom < 1e-4 || (grad[i] - fd).abs() < 1e-9,
                    "coord {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let spec = MlpSpec::new(2, vec![8], 3);
        let p = mlp_init(&spec, 9).unwrap();
        let a = mlp_forward(&p, &spec, &[0.1, 0.2]).unwrap();
        let b = mlp_forward(&p, &spec, &[0.1, 0.2]).unwrap();
        assert_eq!(a, b);
    }
}
