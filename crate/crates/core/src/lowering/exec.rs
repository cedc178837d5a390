//! Spike-driven execution of lowered graphs.
//!
//! Layers fed by spikes run event-driven: for each bit-plane (or unary step)
//! every set bit adds its synaptic weights into a partial sum, and the planes
//! are combined LSB first by power-of-two shifts once per timestep. Layers fed
//! by the real-valued input run as dense multiply-accumulates.

use crate::energy::OpLedger;
use crate::network::{GraphMode, InputEncoding, Layer, LayerGraph, LinearLayer, PlaneOrder, SpikeCoding};
use crate::neuron::{NeuronConfig, NeuronKind};
use crate::tensor::ops::{self, Conv2dGeometry};
use crate::tensor::Tensor;

use super::LoweringError;

/// Which spike coding the executor uses for integer levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CountRule {
    /// The coding stored in each neuron layer.
    #[default]
    Native,
    /// Binary bit-planes: a level costs its popcount.
    Popcount,
    /// Unary expansion over `D_N` steps: a level costs its value.
    Unary,
}

impl CountRule {
    fn coding(self, native: SpikeCoding, cfg: &NeuronConfig) -> SpikeCoding {
        if cfg.kind == NeuronKind::Lif {
            return native;
        }
        match self {
            CountRule::Native => native,
            CountRule::Popcount => SpikeCoding::BitPlane {
                n: cfg.n,
                planes: cfg.planes(),
                plane_order: PlaneOrder::LsbFirst,
            },
            CountRule::Unary => SpikeCoding::Unary { d: cfg.d_n() },
        }
    }
}

/// Result of running a lowered graph over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LoweredRun {
    /// Mean over timesteps of the last layer's output, `[B, ...]`.
    pub readout: Tensor,
    /// `outputs[t][l]`: layer `l` at step `t`, spikes decoded to their values.
    pub outputs: Vec<Vec<Tensor>>,
    pub ledger: OpLedger,
}

#[derive(Clone)]
enum Signal {
    Real { values: Vec<f64>, from_input: bool },
    Spikes { levels: Vec<i32>, coding: SpikeCoding, cfg: NeuronConfig },
}

impl Signal {
    /// Values for traces and the readout; never fed back into the network.
    fn decode(&self) -> Vec<f64> {
        match self {
            Signal::Real { values, .. } => values.clone(),
            Signal::Spikes { levels, cfg, .. } => levels.iter().map(|&k| cfg.activation(k)).collect(),
        }
    }
}

struct Plan<'a> {
    graph: &'a LayerGraph,
    in_shapes: Vec<Vec<usize>>,
    out_shapes: Vec<Vec<usize>>,
    geoms: Vec<Option<Conv2dGeometry>>,
    codings: Vec<Option<SpikeCoding>>,
}

impl<'a> Plan<'a> {
    fn new(graph: &'a LayerGraph, rule: CountRule) -> Result<Self, LoweringError> {
        graph.validate()?;
        if graph.mode != GraphMode::Lowered {
            return Err(LoweringError::Unsupported {
                layer: 0,
                kind: "graph",
                reason: "the spike executor runs lowered graphs only".into(),
            });
        }
        let out_shapes = graph.shapes()?;
        let mut in_shapes = vec![graph.input_shape.clone()];
        in_shapes.extend(out_shapes[..out_shapes.len() - 1].iter().cloned());
        let mut geoms = Vec::with_capacity(graph.layers.len());
        let mut codings = Vec::with_capacity(graph.layers.len());
        let mut spiking = false;
        for (i, layer) in graph.layers.iter().enumerate() {
            geoms.push(match layer {
                Layer::Conv(c) => {
                    let mut s = vec![1];
                    s.extend_from_slice(&in_shapes[i]);
                    Some(Conv2dGeometry::new(&s, c.weight.shape(), c.stride, c.padding)?)
                }
                _ => None,
            });
            codings.push(match layer {
                Layer::Neuron(n) => {
                    if spiking {
                        return Err(LoweringError::Unsupported {
                            layer: i,
                            kind: "neuron",
                            reason: "neuron fed directly by spikes".into(),
                        });
                    }
                    spiking = true;
                    Some(rule.coding(n.coding.expect("validated lowered graph"), &n.config))
                }
                _ => None,
            });
            if layer.is_synapse() {
                spiking = false;
            }
        }
        Ok(Self {
            graph,
            in_shapes,
            out_shapes,
            geoms,
            codings,
        })
    }

    fn run_sample(&self, x: &[f64], ledger: &mut OpLedger, traces: &mut [Vec<Vec<f64>>]) -> Vec<f64> {
        let steps = self.graph.timesteps();
        let n_layers = self.graph.layers.len();
        let cache_input = self.graph.encoding == InputEncoding::Spike;
        let mut states: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut cache: Vec<Option<Signal>> = vec![None; n_layers];
        let mut acc: Option<Vec<f64>> = None;
        for t in 0..steps {
            let mut sig = Signal::Real {
                values: x.to_vec(),
                from_input: true,
            };
            for l in 0..n_layers {
                let cached = matches!(sig, Signal::Real { from_input: true, .. }) && cache[l].is_some();
                sig = if cached {
                    cache[l].clone().expect("checked")
                } else {
                    let out = self.layer(l, t, sig, &mut states[l], ledger);
                    if cache_input && matches!(out, Signal::Real { from_input: true, .. }) {
                        cache[l] = Some(out.clone());
                    }
                    out
                };
                if !traces.is_empty() {
                    traces[t][l] = sig.decode();
                }
            }
            let out = sig.decode();
            acc = Some(match acc {
                None => out,
                Some(a) => a.iter().zip(&out).map(|(p, q)| p + q).collect(),
            });
        }
        let sum = acc.unwrap_or_default();
        if steps == 1 {
            sum
        } else {
            let f = 1.0 / steps as f64;
            sum.into_iter().map(|v| v * f).collect()
        }
    }

    fn layer(&self, l: usize, t: usize, input: Signal, state: &mut Vec<f64>, ledger: &mut OpLedger) -> Signal {
        let layer = &self.graph.layers[l];
        match (layer, input) {
            (Layer::Conv(c), Signal::Real { values, from_input }) => {
                let g = self.geoms[l].as_ref().expect("conv geometry");
                let w = c.weight.real_values();
                ledger.add_macs(l, t, conv_taps(g));
                let out = ops::conv2d_forward(g, &values, &w, Some(&c.bias.real_values()));
                Signal::Real { values: out, from_input }
            }
            (Layer::Conv(c), Signal::Spikes { levels, coding, .. }) => {
                let g = self.geoms[l].as_ref().expect("conv geometry");
                let values = conv_events(g, &c.weight.real_values(), &c.bias.real_values(), &levels, coding, |p, n| {
                    ledger.add_acs(l, t, p, n)
                });
                Signal::Real { values, from_input: false }
            }
            (Layer::Linear(lin) | Layer::Head(lin), Signal::Real { values, from_input }) => {
                let (inputs, outputs) = (lin.inputs(), lin.outputs());
                ledger.add_macs(l, t, (inputs * outputs) as u64);
                let out = ops::linear_forward(
                    1,
                    inputs,
                    outputs,
                    &values,
                    &lin.weight.real_values(),
                    Some(&lin.bias.real_values()),
                );
                Signal::Real { values: out, from_input }
            }
            (Layer::Linear(lin) | Layer::Head(lin), Signal::Spikes { levels, coding, .. }) => {
                let values = linear_events(lin, &levels, coding, |p, n| ledger.add_acs(l, t, p, n));
                Signal::Real { values, from_input: false }
            }
            (Layer::Neuron(n), Signal::Real { values, .. }) => {
                if state.is_empty() {
                    *state = vec![0.0; values.len()];
                }
                let mut levels = Vec::with_capacity(values.len());
                for (v, &x) in state.iter_mut().zip(&values) {
                    let (k, _, next) = n.config.update(*v, x);
                    *v = next;
                    levels.push(k);
                }
                Signal::Spikes {
                    levels,
                    coding: self.codings[l].expect("neuron coding"),
                    cfg: n.config,
                }
            }
            (Layer::MaxPool { size }, Signal::Real { values, from_input }) => {
                let shape = batched(&self.in_shapes[l]);
                Signal::Real {
                    values: ops::max_pool2d_forward(&shape, &values, *size).1,
                    from_input,
                }
            }
            (Layer::MaxPool { size }, Signal::Spikes { levels, coding, cfg }) => {
                let shape = batched(&self.in_shapes[l]);
                Signal::Spikes {
                    levels: ops::max_pool2d_i32(&shape, &levels, *size).1,
                    coding,
                    cfg,
                }
            }
            (Layer::Flatten, s) => s,
            (Layer::Neuron(_), Signal::Spikes { .. }) => unreachable!("rejected by the plan"),
            (Layer::BatchNorm(_) | Layer::Activation(_), _) => unreachable!("not present in lowered graphs"),
        }
    }
}

fn batched(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// Multiply-accumulates of one dense conv, padding taps excluded.
pub(crate) fn conv_taps(g: &Conv2dGeometry) -> u64 {
    let rows: usize = (0..g.out_h)
        .map(|oy| (0..g.kernel_h).filter(|&ky| g.input_row(oy, ky).is_some()).count())
        .sum();
    let cols: usize = (0..g.out_w)
        .map(|ox| (0..g.kernel_w).filter(|&kx| g.input_col(ox, kx).is_some()).count())
        .sum();
    (g.batch * g.out_channels * g.in_channels * rows * cols) as u64
}

/// Adds `partial * 2^p` (or `* 1` for unary/binary steps) into `acc`.
fn combine(acc: &mut [f64], partial: &[f64], shift: f64) {
    for (a, q) in acc.iter_mut().zip(partial) {
        *a += q * shift;
    }
}

fn conv_events(
    g: &Conv2dGeometry,
    w: &[f64],
    bias: &[f64],
    levels: &[i32],
    coding: SpikeCoding,
    mut count: impl FnMut(u32, u64),
) -> Vec<f64> {
    let (cin, h, wd) = (g.in_channels, g.height, g.width);
    let (cout, oh, ow, kh, kw) = (g.out_channels, g.out_h, g.out_w, g.kernel_h, g.kernel_w);
    let mut acc = vec![0.0; cout * oh * ow];
    let mut partial = vec![0.0; acc.len()];
    for p in 0..coding.planes() {
        partial.fill(0.0);
        let mut events = 0u64;
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    if !coding.bit(levels[(ci * h + iy) * wd + ix], p) {
                        continue;
                    }
                    for co in 0..cout {
                        let wbase = (co * cin + ci) * kh;
                        for ky in 0..kh {
                            let Some(oy) = g.output_row(iy, ky) else { continue };
                            for kx in 0..kw {
                                let Some(ox) = g.output_col(ix, kx) else { continue };
                                partial[(co * oh + oy) * ow + ox] += w[(wbase + ky) * kw + kx];
                                events += 1;
                            }
                        }
                    }
                }
            }
        }
        if events > 0 {
            count(p, events);
            combine(&mut acc, &partial, coding.plane_weight(p));
        }
    }
    let plane = oh * ow;
    acc.iter()
        .enumerate()
        .map(|(o, a)| bias[o / plane] + a)
        .collect()
}

fn linear_events(lin: &LinearLayer, levels: &[i32], coding: SpikeCoding, mut count: impl FnMut(u32, u64)) -> Vec<f64> {
    let (inputs, outputs) = (lin.inputs(), lin.outputs());
    let w = lin.weight.real_values();
    let mut acc = vec![0.0; outputs];
    let mut partial = vec![0.0; outputs];
    for p in 0..coding.planes() {
        partial.fill(0.0);
        let mut events = 0u64;
        for (i, &k) in levels.iter().enumerate() {
            if !coding.bit(k, p) {
                continue;
            }
            for (o, s) in partial.iter_mut().enumerate() {
                *s += w[o * inputs + i];
            }
            events += outputs as u64;
        }
        if events > 0 {
            count(p, events);
            combine(&mut acc, &partial, coding.plane_weight(p));
        }
    }
    lin.bias.real_values().iter().zip(&acc).map(|(b, a)| b + a).collect()
}

/// Runs a lowered graph on a batch `[B, ...]`, counting every synaptic
/// operation. With `keep_traces` the per-layer outputs are returned too.
pub fn run_lowered(graph: &LayerGraph, x: &Tensor, rule: CountRule, keep_traces: bool) -> Result<LoweredRun, LoweringError> {
    let plan = Plan::new(graph, rule)?;
    let s = x.shape();
    if s.len() != graph.input_shape.len() + 1 || s[1..] != graph.input_shape[..] {
        return Err(LoweringError::Architecture(format!(
            "input shape {s:?} does not match [batch, {:?}]",
            graph.input_shape
        )));
    }
    let batch = s[0];
    let per: usize = graph.input_shape.iter().product();
    let xs = x.real_values();
    let steps = graph.timesteps();
    let n_layers = graph.layers.len();
    let mut ledger = OpLedger::new();
    let mut readout = Vec::new();
    let mut all: Vec<Vec<Vec<f64>>> = if keep_traces {
        vec![vec![Vec::new(); n_layers]; steps]
    } else {
        Vec::new()
    };
    let mut traces: Vec<Vec<Vec<f64>>> = all.clone();
    for b in 0..batch {
        readout.extend(plan.run_sample(&xs[b * per..(b + 1) * per], &mut ledger, &mut traces));
        for (dst, src) in all.iter_mut().zip(&traces) {
            for (d, s) in dst.iter_mut().zip(src) {
                d.extend_from_slice(s);
            }
        }
    }
    let out_shape = plan.out_shapes.last().expect("non-empty graph");
    let outputs = all
        .into_iter()
        .map(|step| {
            step.into_iter()
                .zip(&plan.out_shapes)
                .map(|(v, shape)| Tensor::from_f64(batched_n(batch, shape), v))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LoweredRun {
        readout: Tensor::from_f64(batched_n(batch, out_shape), readout)?,
        outputs,
        ledger,
    })
}

fn batched_n(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(shape);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowering::lower_graph;
    use crate::network::{LayerGraph, NeuronLayer, Unit};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn worked_example_three_hundredths() {
        let layers = vec![
            Layer::Neuron(NeuronLayer::new(NeuronConfig::ibra(5.11, 100, 1))),
            Layer::Linear(LinearLayer { weight: t(&[1, 1], vec![1.0]), bias: t(&[1], vec![0.0]) }),
        ];
        let g = LayerGraph::new(vec![1], layers).unwrap();
        let lowered = lower_graph(&g).unwrap();
        let x = t(&[1, 1], vec![0.03]);
        let run = run_lowered(&lowered, &x, CountRule::Native, false).unwrap();
        let trained = g.forward(&x).unwrap().as_f64().unwrap()[0];
        assert_eq!(trained, 0.03);
        assert!((run.readout.as_f64().unwrap()[0] - trained).abs() <= 1e-5 * trained);
        assert_eq!(run.ledger.totals().acs, 2);
    }

    #[test]
    fn popcount_and_unary_costs() {
        let layers = vec![
            Layer::Neuron(NeuronLayer::new(NeuronConfig::ibra(7.0, 1, 1))),
            Layer::Linear(LinearLayer { weight: t(&[3, 1], vec![1.0, 2.0, 3.0]), bias: t(&[3], vec![0.0; 3]) }),
        ];
        let g = lower_graph(&LayerGraph::new(vec![1], layers).unwrap()).unwrap();
        let x = t(&[1, 1], vec![5.0]);
        let bin = run_lowered(&g, &x, CountRule::Popcount, false).unwrap();
        let un = run_lowered(&g, &x, CountRule::Unary, false).unwrap();
        assert_eq!(bin.ledger.totals().acs, 2 * 3);
        assert_eq!(un.ledger.totals().acs, 5 * 3);
        assert_eq!(bin.readout, un.readout);
        assert_eq!(bin.readout.as_f64().unwrap(), &[5.0, 10.0, 15.0]);
    }

    #[test]
    fn cnn_matches_training_forward() {
        let cfg = NeuronConfig::ibra(5.11, 100, 2);
        let mut g = LayerGraph::cnn([2, 8, 8], &[4, 6], 3, Unit::Neuron(cfg), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for layer in &mut g.layers {
            if let Layer::BatchNorm(b) = layer {
                b.running_mean.as_f64_mut().unwrap().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                b.running_var.as_f64_mut().unwrap().iter_mut().for_each(|v| *v = rng.random_range(0.2..2.0));
            }
        }
        let x = t(&[3, 2, 8, 8], (0..384).map(|_| rng.random_range(-2.0..2.0)).collect());
        let lowered = lower_graph(&g).unwrap();
        let run = run_lowered(&lowered, &x, CountRule::Native, true).unwrap();
        let reference = g.forward(&x).unwrap();
        for (a, b) in reference.as_f64().unwrap().iter().zip(run.readout.as_f64().unwrap()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
        assert_eq!(run.outputs.len(), 2);
        assert_eq!(run.outputs[0].len(), lowered.layers.len());
    }

    #[test]
    fn spike_encoding_prices_first_layer_once() {
        let cfg = NeuronConfig::ibra(5.11, 100, 3);
        let g = LayerGraph::mlp(4, &[5], 2, Unit::Neuron(cfg), false, 1).unwrap();
        let x = t(&[1, 4], vec![0.5, -0.1, 0.3, 0.9]);
        let direct = run_lowered(&lower_graph(&g).unwrap(), &x, CountRule::Native, false).unwrap();
        let spike = lower_graph(&g.clone().with_encoding(InputEncoding::Spike)).unwrap();
        let spike = run_lowered(&spike, &x, CountRule::Native, false).unwrap();
        assert_eq!(direct.ledger.layer_totals()[&0].macs, 3 * 20);
        assert_eq!(spike.ledger.layer_totals()[&0].macs, 20);
        assert_eq!(direct.readout, spike.readout);
    }

    #[test]
    fn padding_taps_are_not_macs() {
        let g = Conv2dGeometry::new(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, 1).unwrap();
        assert_eq!(conv_taps(&g), 4 * 4 + 4 * 6 + 9);
    }
}
