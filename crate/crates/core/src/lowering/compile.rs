use crate::network::{
    Activation, GraphMode, Layer, LayerGraph, LinearLayer, NeuronLayer, PlaneOrder, SpikeCoding,
};
use crate::neuron::{NeuronConfig, NeuronKind};
use crate::tensor::Tensor;

use super::LoweringError;

/// Spike coding a lowered neuron layer uses for its levels.
pub fn coding_for(cfg: &NeuronConfig) -> SpikeCoding {
    match cfg.kind {
        NeuronKind::IbraLif => SpikeCoding::BitPlane {
            n: cfg.n,
            planes: cfg.planes(),
            plane_order: PlaneOrder::LsbFirst,
        },
        NeuronKind::ILif => SpikeCoding::Unary { d: cfg.d_n() },
        NeuronKind::Lif => SpikeCoding::Binary,
    }
}

/// Multiplies output channel `c` of a weight (leading axis) by `scale[c]`.
fn scale_rows(w: &mut Tensor, scale: &[f64]) {
    let rows = w.shape()[0];
    let per = w.numel() / rows.max(1);
    let v = w.as_f64_mut().expect("real64 weights");
    for (c, chunk) in v.chunks_mut(per).enumerate() {
        for x in chunk {
            *x *= scale[c];
        }
    }
}

fn synapse_mut(layer: &mut Layer) -> Option<(&mut Tensor, &mut Tensor)> {
    match layer {
        Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
        Layer::Linear(LinearLayer { weight, bias }) | Layer::Head(LinearLayer { weight, bias }) => Some((weight, bias)),
        _ => None,
    }
}

/// Compiles a training-mode graph into its spike-driven form.
///
/// * batch norm is folded into the conv/linear layer right before it;
/// * the weights of every synapse fed by an IBRA-LIF layer (possibly through
///   pooling or flattening) are divided by that layer's `N`;
/// * neuron layers get their spike coding: bit-planes for IBRA-LIF, unary for
///   I-LIF and single binary spikes for LIF.
pub fn lower_graph(graph: &LayerGraph) -> Result<LayerGraph, LoweringError> {
    graph.validate()?;
    if graph.mode != GraphMode::Training {
        return Err(LoweringError::Unsupported {
            layer: 0,
            kind: "graph",
            reason: "graph is already lowered".into(),
        });
    }
    let mut layers: Vec<Layer> = Vec::with_capacity(graph.layers.len());
    let mut origin: Vec<usize> = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        match layer {
            Layer::BatchNorm(bn) => {
                let prev = layers.last_mut().and_then(synapse_mut);
                let Some((w, b)) = prev else {
                    return Err(LoweringError::Unfoldable {
                        layer: i,
                        reason: format!(
                            "batch norm follows {}, not a conv or linear layer",
                            i.checked_sub(1).map_or("the input", |p| graph.layers[p].kind())
                        ),
                    });
                };
                let (scale, shift) = bn.fold_params().map_err(|e| LoweringError::Unfoldable {
                    layer: i,
                    reason: e.to_string(),
                })?;
                scale_rows(w, &scale);
                for ((bias, s), t) in b.as_f64_mut().expect("real64 bias").iter_mut().zip(&scale).zip(&shift) {
                    *bias = *bias * s + t;
                }
                *origin.last_mut().expect("synapse present") = i;
            }
            Layer::Activation(_) => {
                return Err(LoweringError::Unsupported {
                    layer: i,
                    kind: "activation",
                    reason: "real-valued activations have no spike form; convert the network first".into(),
                })
            }
            Layer::Neuron(n) => {
                if n.config.kind == NeuronKind::ILif && n.config.d.fract() != 0.0 {
                    return Err(LoweringError::Unsupported {
                        layer: i,
                        kind: "neuron",
                        reason: format!("I-LIF unary expansion needs an integer D, got {}", n.config.d),
                    });
                }
                layers.push(Layer::Neuron(NeuronLayer {
                    config: n.config,
                    coding: Some(coding_for(&n.config)),
                }));
                origin.push(i);
            }
            other => {
                layers.push(other.clone());
                origin.push(i);
            }
        }
    }

    let mut source: Option<NeuronConfig> = None;
    for layer in &mut layers {
        match layer {
            Layer::Neuron(n) => source = Some(n.config),
            Layer::MaxPool { .. } | Layer::Flatten => {}
            _ => {
                if let (Some(cfg), Some((w, _))) = (source, synapse_mut(layer)) {
                    if cfg.kind == NeuronKind::IbraLif && cfg.n != 1 {
                        let n = cfg.n as f64;
                        for x in w.as_f64_mut().expect("real64 weights") {
                            *x /= n;
                        }
                    }
                }
                source = None;
            }
        }
    }

    let lowered = LayerGraph {
        input_shape: graph.input_shape.clone(),
        layers,
        mode: GraphMode::Lowered,
        encoding: graph.encoding,
        origin,
    };
    lowered.validate()?;
    Ok(lowered)
}

/// `q`-quantile of `values` by linear interpolation between order statistics.
fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Percentile used to pick a clip ceiling for unbounded activations.
pub const CALIBRATION_QUANTILE: f64 = 0.999;

/// Replaces each activation of a conventional network by an IBRA-LIF neuron
/// with `T = 1`, `alpha = 1` and scale `n`.
///
/// `clip(x, 0, D)` maps to `D` rounded onto the `1/n` grid. ReLU needs
/// `calibration` inputs: its ceiling is the 99.9th percentile of the layer's
/// outputs over that batch. Identity activations are dropped.
pub fn convert_ann(ann: &LayerGraph, n: u32, calibration: Option<&Tensor>) -> Result<LayerGraph, LoweringError> {
    ann.validate()?;
    if n == 0 {
        return Err(LoweringError::Unsupported {
            layer: 0,
            kind: "graph",
            reason: "N must be >= 1".into(),
        });
    }
    let traces = match calibration {
        Some(x) => Some(ann.forward_t(&[x.clone()])?.outputs.remove(0)),
        None => None,
    };
    let nf = n as f64;
    let mut layers = Vec::with_capacity(ann.layers.len());
    for (i, layer) in ann.layers.iter().enumerate() {
        let ceiling = match layer {
            Layer::Activation(Activation::Identity) => continue,
            Layer::Activation(Activation::Clip { ceiling }) => *ceiling,
            Layer::Activation(Activation::Relu) => {
                let Some(traces) = &traces else {
                    return Err(LoweringError::Uncalibrated { layer: i });
                };
                let mut vals = traces[i].real_values().into_owned();
                if vals.is_empty() {
                    return Err(LoweringError::Uncalibrated { layer: i });
                }
                quantile(&mut vals, CALIBRATION_QUANTILE)
            }
            Layer::Neuron(_) => {
                return Err(LoweringError::Unsupported {
                    layer: i,
                    kind: "neuron",
                    reason: "network already spikes".into(),
                })
            }
            other => {
                layers.push(other.clone());
                continue;
            }
        };
        let d = ((ceiling * nf).round().max(1.0)) / nf;
        layers.push(Layer::Neuron(NeuronLayer::new(NeuronConfig::ibra(d, n, 1))));
    }
    Ok(LayerGraph::new(ann.input_shape.clone(), layers)?.with_encoding(ann.encoding))
}
