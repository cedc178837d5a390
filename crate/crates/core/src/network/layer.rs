use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::neuron::NeuronConfig;
use crate::tensor::Tensor;

use super::NetworkError;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    /// `[Cout, Cin, kh, kw]`
    pub weight: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    /// He-uniform weights, zero bias.
    pub fn init<R: Rng>(rng: &mut R, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..cout * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_f64(vec![cout, cin, kernel, kernel], w).expect("sized"),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `[outputs, inputs]`
    pub weight: Tensor,
    /// `[outputs]`
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::from_f64(vec![outputs, inputs], w).expect("sized"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-channel normalization over axis 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Inference-time `(scale, shift)` with
    /// `scale = gamma / sqrt(var + eps)` and `shift = beta - mean * scale`.
    pub fn fold_params(&self) -> Result<(Vec<f64>, Vec<f64>), NetworkError> {
        if !(self.eps >= 0.0) {
            return Err(NetworkError::Invalid(format!("batch norm eps {} must be >= 0", self.eps)));
        }
        let gamma = self.gamma.real_values();
        let beta = self.beta.real_values();
        let mean = self.running_mean.real_values();
        let var = self.running_var.real_values();
        let mut scale = Vec::with_capacity(gamma.len());
        let mut shift = Vec::with_capacity(gamma.len());
        for c in 0..gamma.len() {
            let denom = var[c] + self.eps;
            if !(denom > 0.0) {
                return Err(NetworkError::Invalid(format!(
                    "batch norm channel {c}: var + eps = {denom} is not positive"
                )));
            }
            let s = gamma[c] / denom.sqrt();
            scale.push(s);
            shift.push(beta[c] - mean[c] * s);
        }
        Ok((scale, shift))
    }

    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        let rm = self.running_mean.as_f64_mut().expect("real64 running stats");
        for (r, v) in rm.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        let rv = self.running_var.as_f64_mut().expect("real64 running stats");
        for (r, v) in rv.iter_mut().zip(var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

/// Pointwise nonlinearity of a conventional network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    /// `clip(x, 0, ceiling)`
    Clip { ceiling: f64 },
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Clip { ceiling } => x.clamp(0.0, ceiling),
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let inside = match *self {
            Activation::Identity => true,
            Activation::Relu => x > 0.0,
            Activation::Clip { ceiling } => x > 0.0 && x < ceiling,
        };
        if inside {
            1.0
        } else {
            0.0
        }
    }
}

/// Order in which bit-planes of one timestep are accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlaneOrder {
    LsbFirst,
}

/// How a lowered neuron layer transmits its integer levels as binary spikes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "coding", rename_all = "kebab-case")]
pub enum SpikeCoding {
    /// Bit `b` of the level, weighted `2^b`; `planes = B`.
    BitPlane { n: u32, planes: u32, plane_order: PlaneOrder },
    /// Level `v` as `v` ones over `d` virtual steps.
    Unary { d: u32 },
    /// Plain 0/1 spikes.
    Binary,
}

impl SpikeCoding {
    /// Virtual steps needed per timestep.
    pub fn planes(&self) -> u32 {
        match *self {
            SpikeCoding::BitPlane { planes, .. } => planes,
            SpikeCoding::Unary { d } => d,
            SpikeCoding::Binary => 1,
        }
    }

    /// Whether plane `p` of `level` carries a spike.
    #[inline]
    pub fn bit(&self, level: i32, p: u32) -> bool {
        match self {
            SpikeCoding::BitPlane { .. } => (level >> p) & 1 == 1,
            SpikeCoding::Unary { .. } => level > p as i32,
            SpikeCoding::Binary => level != 0,
        }
    }

    /// Integer weight of plane `p` when recombining partial sums.
    #[inline]
    pub fn plane_weight(&self, p: u32) -> f64 {
        match self {
            SpikeCoding::BitPlane { .. } => (1u64 << p) as f64,
            SpikeCoding::Unary { .. } | SpikeCoding::Binary => 1.0,
        }
    }

    /// Number of spikes used to send `level`.
    pub fn spike_count(&self, level: i32) -> u32 {
        match self {
            SpikeCoding::BitPlane { .. } => (level as u32).count_ones(),
            SpikeCoding::Unary { .. } => level as u32,
            SpikeCoding::Binary => (level != 0) as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronLayer {
    pub config: NeuronConfig,
    /// Set by lowering.
    pub coding: Option<SpikeCoding>,
}

impl NeuronLayer {
    pub fn new(config: NeuronConfig) -> Self {
        Self { config, coding: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2dLayer),
    Linear(LinearLayer),
    BatchNorm(BatchNormLayer),
    Neuron(NeuronLayer),
    Activation(Activation),
    /// Non-overlapping max pooling with window and stride `size`.
    MaxPool { size: usize },
    Flatten,
    /// Classification readout; its outputs are averaged over timesteps.
    Head(LinearLayer),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::BatchNorm(_) => "batch-norm",
            Layer::Neuron(_) => "neuron",
            Layer::Activation(_) => "activation",
            Layer::MaxPool { .. } => "max-pool",
            Layer::Flatten => "flatten",
            Layer::Head(_) => "head",
        }
    }

    pub fn is_synapse(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Linear(_) | Layer::Head(_))
    }

    /// Learnable tensors with their names.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::Linear(l) | Layer::Head(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::BatchNorm(b) => vec![("gamma", &b.gamma), ("beta", &b.beta)],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Conv(c) => vec![("weight", &mut c.weight), ("bias", &mut c.bias)],
            Layer::Linear(l) | Layer::Head(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm(b) => vec![("gamma", &mut b.gamma), ("beta", &mut b.beta)],
            _ => vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(mean: f64, var: f64, gamma: f64, beta: f64, eps: f64) -> BatchNormLayer {
        BatchNormLayer {
            gamma: Tensor::full(&[1], gamma),
            beta: Tensor::full(&[1], beta),
            running_mean: Tensor::full(&[1], mean),
            running_var: Tensor::full(&[1], var),
            eps,
            momentum: 0.1,
        }
    }

    #[test]
    fn fold_examples() {
        assert_eq!(bn(0.0, 1.0, 1.0, 0.0, 0.0).fold_params().unwrap(), (vec![1.0], vec![0.0]));
        assert_eq!(bn(1.0, 4.0, 2.0, 3.0, 0.0).fold_params().unwrap(), (vec![1.0], vec![2.0]));
    }

    #[test]
    fn fold_rejects_bad_eps() {
        assert!(bn(0.0, 1.0, 1.0, 0.0, -1e-3).fold_params().is_err());
        assert!(bn(0.0, 0.0, 1.0, 0.0, 0.0).fold_params().is_err());
    }

    #[test]
    fn coding_bits() {
        let bp = SpikeCoding::BitPlane { n: 100, planes: 3, plane_order: PlaneOrder::LsbFirst };
        let bits: Vec<bool> = (0..3).map(|p| bp.bit(4, p)).collect();
        assert_eq!(bits, vec![false, false, true]);
        assert_eq!(bp.spike_count(4), 1);
        let un = SpikeCoding::Unary { d: 4 };
        let bits: Vec<bool> = (0..4).map(|p| un.bit(3, p)).collect();
        assert_eq!(bits, vec![true, true, true, false]);
        assert_eq!(un.spike_count(4), 4);
    }
}
