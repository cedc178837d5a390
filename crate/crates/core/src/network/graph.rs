use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::neuron::{encode_direct, NeuronConfig};
use crate::tensor::{ParamKey, Tape, Tensor, TensorError, Var};

use super::layer::{Activation, BatchNormLayer, Conv2dLayer, Layer, LinearLayer, NeuronLayer};
use super::NetworkError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    Training,
    Lowered,
}

/// How the input reaches the first synaptic layer over `T` timesteps.
///
/// Both feed the same image at every step. They differ only in energy
/// accounting: `Direct` prices the first layer `T` times, `Spike` once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputEncoding {
    Direct,
    Spike,
}

/// Batch-norm behaviour during a tape forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are left for the caller to update.
    Train,
    /// Running statistics through the folded per-channel affine map.
    Eval,
}

/// Nonlinearity used by the presets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unit {
    Neuron(NeuronConfig),
    Activation(Activation),
}

impl Unit {
    fn layer(self) -> Layer {
        match self {
            Unit::Neuron(cfg) => Layer::Neuron(NeuronLayer::new(cfg)),
            Unit::Activation(a) => Layer::Activation(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    /// Per-sample input shape, `[C, H, W]` or `[n]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub mode: GraphMode,
    pub encoding: InputEncoding,
    /// Index of the training-mode layer each layer came from.
    pub origin: Vec<usize>,
}

/// A tape recording of all timesteps.
#[derive(Debug, Clone)]
pub struct Unrolled {
    /// Mean over timesteps of the last layer's output.
    pub readout: Var,
    /// `outputs[t][l]` is layer `l`'s output at step `t`.
    pub outputs: Vec<Vec<Var>>,
    pub params: BTreeMap<ParamKey, Var>,
    /// Batch statistics per batch-norm layer and step, in recording order.
    pub bn_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Values of an evaluation-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub readout: Tensor,
    /// `outputs[t][l]` is layer `l`'s output at step `t`.
    pub outputs: Vec<Vec<Tensor>>,
}

impl LayerGraph {
    /// A validated training-mode graph.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self, NetworkError> {
        let origin = (0..layers.len()).collect();
        let g = Self {
            input_shape,
            layers,
            mode: GraphMode::Training,
            encoding: InputEncoding::Direct,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_encoding(mut self, encoding: InputEncoding) -> Self {
        self.encoding = encoding;
        self
    }

    /// Per-sample output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NetworkError> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer_shape(i, layer, &shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, NetworkError> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(NetworkError::Invalid(format!("bad input shape {:?}", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(NetworkError::Invalid("graph has no layers".into()));
        }
        if self.origin.len() != self.layers.len() {
            return Err(NetworkError::Invalid(format!(
                "{} origin entries for {} layers",
                self.origin.len(),
                self.layers.len()
            )));
        }
        self.shapes()?;
        self.timesteps_checked()?;
        if self.mode == GraphMode::Lowered {
            for (i, layer) in self.layers.iter().enumerate() {
                match layer {
                    Layer::BatchNorm(_) | Layer::Activation(_) => {
                        return Err(NetworkError::at(i, layer.kind(), "not allowed in a lowered graph"))
                    }
                    Layer::Neuron(NeuronLayer { coding: None, .. }) => {
                        return Err(NetworkError::at(i, layer.kind(), "lowered neuron has no spike coding"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn timesteps_checked(&self) -> Result<usize, NetworkError> {
        let mut t = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Neuron(n) = layer {
                match t {
                    None => t = Some(n.config.timesteps),
                    Some(t) if t != n.config.timesteps => {
                        return Err(NetworkError::at(
                            i,
                            "neuron",
                            format!("timesteps {} disagree with earlier layers ({t})", n.config.timesteps),
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(t.unwrap_or(1))
    }

    /// Shared `T` of all neuron layers; `1` without neurons.
    pub fn timesteps(&self) -> usize {
        self.timesteps_checked().unwrap_or(1)
    }

    pub fn params(&self) -> Vec<(ParamKey, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| l.params().into_iter().map(move |(name, t)| (ParamKey { layer, name }, t)))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKey, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(layer, l)| l.params_mut().into_iter().map(move |(name, t)| (ParamKey { layer, name }, t)))
            .collect()
    }

    pub fn neuron_configs(&self) -> Vec<(usize, NeuronConfig)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Neuron(n) => Some((i, n.config)),
                _ => None,
            })
            .collect()
    }

    /// The same graph with every neuron layer swapped for `unit`.
    pub fn with_neurons_replaced(&self, unit: Unit) -> Result<Self, NetworkError> {
        let mut g = self.clone();
        for layer in &mut g.layers {
            if matches!(layer, Layer::Neuron(_)) {
                *layer = unit.layer();
            }
        }
        g.validate()?;
        Ok(g)
    }

    fn check_batch(&self, x: &Tensor) -> Result<usize, NetworkError> {
        let s = x.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(NetworkError::Invalid(format!(
                "input shape {s:?} does not match [batch, {:?}]",
                self.input_shape
            )));
        }
        Ok(s[0])
    }

    /// Records a forward pass over per-timestep batched inputs.
    pub fn record(&self, tape: &mut Tape, inputs: &[Tensor], bn: BnMode) -> Result<Unrolled, NetworkError> {
        if self.mode != GraphMode::Training {
            return Err(NetworkError::Invalid("tape forward needs a training-mode graph".into()));
        }
        if inputs.is_empty() {
            return Err(NetworkError::Invalid("no timesteps given".into()));
        }
        for x in inputs {
            self.check_batch(x)?;
        }
        let mut params = BTreeMap::new();
        for (key, t) in self.params() {
            params.insert(key, tape.leaf(t.clone()));
        }
        let folds: Vec<Option<(Vec<f64>, Vec<f64>)>> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match (l, bn) {
                (Layer::BatchNorm(b), BnMode::Eval) => b.fold_params().map(Some).map_err(|e| relabel(i, l, e)),
                _ => Ok(None),
            })
            .collect::<Result<_, _>>()?;

        let mut state: Vec<Option<Var>> = vec![None; self.layers.len()];
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut bn_stats = Vec::new();
        let mut acc: Option<Var> = None;
        for x in inputs {
            let mut h = tape.leaf(x.clone());
            let mut step = Vec::with_capacity(self.layers.len());
            for (i, layer) in self.layers.iter().enumerate() {
                let p = |name| params[&ParamKey { layer: i, name }];
                let wrap = |e: TensorError| NetworkError::at(i, layer.kind(), e.to_string());
                h = match layer {
                    Layer::Conv(c) => tape
                        .conv2d(h, p("weight"), Some(p("bias")), c.stride, c.padding)
                        .map_err(wrap)?,
                    Layer::Linear(_) | Layer::Head(_) => tape.linear(h, p("weight"), Some(p("bias"))).map_err(wrap)?,
                    Layer::BatchNorm(b) => match &folds[i] {
                        Some((scale, shift)) => tape.channel_affine(h, scale.clone(), shift.clone()).map_err(wrap)?,
                        None => {
                            let (y, mean, var) = tape.batch_norm_train(h, p("gamma"), p("beta"), b.eps).map_err(wrap)?;
                            bn_stats.push((i, mean, var));
                            y
                        }
                    },
                    Layer::Neuron(n) => {
                        let (out, v) = n.config.record(tape, state[i], h).map_err(wrap)?;
                        state[i] = Some(v);
                        out
                    }
                    Layer::Activation(a) => {
                        let a = *a;
                        tape.custom_grad_apply(h, move |x| a.apply(x), move |x| a.derivative(x))
                    }
                    Layer::MaxPool { size } => tape.max_pool2d(h, *size).map_err(wrap)?,
                    Layer::Flatten => {
                        let s = tape.value(h).shape();
                        let flat = [s[0], s[1..].iter().product()];
                        tape.reshape(h, &flat).map_err(wrap)?
                    }
                };
                step.push(h);
            }
            acc = Some(match acc {
                None => h,
                Some(a) => tape.add(a, h)?,
            });
            outputs.push(step);
        }
        let sum = acc.expect("at least one step");
        let readout = if inputs.len() == 1 {
            sum
        } else {
            tape.scale(sum, 1.0 / inputs.len() as f64)
        };
        Ok(Unrolled {
            readout,
            outputs,
            params,
            bn_stats,
        })
    }

    /// Evaluation-mode forward over explicit per-timestep inputs.
    pub fn forward_t(&self, inputs: &[Tensor]) -> Result<Forward, NetworkError> {
        let mut tape = Tape::new();
        let u = self.record(&mut tape, inputs, BnMode::Eval)?;
        Ok(Forward {
            readout: tape.value(u.readout).clone(),
            outputs: u
                .outputs
                .iter()
                .map(|s| s.iter().map(|&v| tape.value(v).clone()).collect())
                .collect(),
        })
    }

    /// Evaluation-mode readout for a batch repeated over `T` steps.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        Ok(self.forward_t(&encode_direct(x, self.timesteps()))?.readout)
    }

    /// Fully connected classifier: `[Linear, (BN), unit]` per hidden width,
    /// then a head.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize, unit: Unit, bn: bool, seed: u64) -> Result<Self, NetworkError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(Layer::Linear(LinearLayer::init(&mut rng, width, h)));
            if bn {
                layers.push(Layer::BatchNorm(BatchNormLayer::new(h)));
            }
            layers.push(unit.layer());
            width = h;
        }
        layers.push(Layer::Head(LinearLayer::init(&mut rng, width, classes)));
        Self::new(vec![inputs], layers)
    }

    /// Convolutional classifier: `[Conv3x3, BN, unit, MaxPool2]` per channel
    /// count, then flatten and a head.
    pub fn cnn(input: [usize; 3], channels: &[usize], classes: usize, unit: Unit, seed: u64) -> Result<Self, NetworkError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [mut c, mut h, mut w] = input;
        let mut layers = Vec::new();
        for &out in channels {
            layers.push(Layer::Conv(Conv2dLayer::init(&mut rng, c, out, 3, 1, 1)));
            layers.push(Layer::BatchNorm(BatchNormLayer::new(out)));
            layers.push(unit.layer());
            layers.push(Layer::MaxPool { size: 2 });
            c = out;
            h /= 2;
            w /= 2;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Head(LinearLayer::init(&mut rng, c * h * w, classes)));
        Self::new(input.to_vec(), layers)
    }
}

fn relabel(i: usize, layer: &Layer, e: NetworkError) -> NetworkError {
    match e {
        NetworkError::Invalid(m) => NetworkError::at(i, layer.kind(), m),
        other => other,
    }
}

fn layer_shape(i: usize, layer: &Layer, input: &[usize]) -> Result<Vec<usize>, NetworkError> {
    let err = |m: String| NetworkError::at(i, layer.kind(), m);
    match layer {
        Layer::Conv(c) => {
            let ws = c.weight.shape();
            if ws.len() != 4 || c.bias.shape() != [ws[0]] {
                return Err(err(format!("weight {ws:?} / bias {:?} malformed", c.bias.shape())));
            }
            if input.len() != 3 {
                return Err(err(format!("expects [C, H, W] input, got {input:?}")));
            }
            let mut batched = vec![1];
            batched.extend_from_slice(input);
            let g = crate::tensor::ops::Conv2dGeometry::new(&batched, ws, c.stride, c.padding)
                .map_err(|e| err(e.to_string()))?;
            Ok(vec![g.out_channels, g.out_h, g.out_w])
        }
        Layer::Linear(l) | Layer::Head(l) => {
            let ws = l.weight.shape();
            if ws.len() != 2 || l.bias.shape() != [ws[0]] {
                return Err(err(format!("weight {ws:?} / bias {:?} malformed", l.bias.shape())));
            }
            if input != [ws[1]] {
                return Err(err(format!("expects [{}] input, got {input:?}", ws[1])));
            }
            Ok(vec![ws[0]])
        }
        Layer::BatchNorm(b) => {
            let c = b.channels();
            let ok = [&b.beta, &b.running_mean, &b.running_var].iter().all(|t| t.shape() == [c]);
            if !ok || input.first() != Some(&c) {
                return Err(err(format!("{c} channels do not fit input {input:?}")));
            }
            if !(b.eps >= 0.0) {
                return Err(err(format!("eps {} must be >= 0", b.eps)));
            }
            Ok(input.to_vec())
        }
        Layer::Neuron(n) => {
            n.config.validate().map_err(|e| err(e.to_string()))?;
            Ok(input.to_vec())
        }
        Layer::Activation(a) => {
            if let Activation::Clip { ceiling } = a {
                if !(*ceiling > 0.0) {
                    return Err(err(format!("clip ceiling {ceiling} must be positive")));
                }
            }
            Ok(input.to_vec())
        }
        Layer::MaxPool { size } => {
            if input.len() != 3 || *size == 0 || input[1] < *size || input[2] < *size {
                return Err(err(format!("window {size} does not fit {input:?}")));
            }
            Ok(vec![input[0], input[1] / size, input[2] / size])
        }
        Layer::Flatten => Ok(vec![input.iter().product()]),
    }
}
