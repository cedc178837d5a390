use std::fmt;

use crate::energy::OpLedger;
use crate::network::{GraphMode, Layer, LayerGraph, SpikeCoding};
use crate::neuron::{encode_direct, NeuronKind};
use crate::tensor::Tensor;

use super::exec::{run_lowered, CountRule};
use super::LoweringError;

/// Where the lowered and training-mode computations first disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    /// Lowered layer index.
    pub layer: usize,
    /// Training layer it reproduces.
    pub origin: usize,
    pub kind: &'static str,
    pub timestep: usize,
    pub rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub samples: usize,
    pub max_abs: f64,
    /// Largest per-sample `max|a - b| / max(max|a|, max|b|)` of the readout.
    pub max_rel: f64,
    pub tol: f64,
    pub pass: bool,
    /// First layer and step exceeding `tol`; only searched on failure.
    pub divergence: Option<Divergence>,
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples: {}", self.samples)?;
        writeln!(f, "max_abs_diff: {:e}", self.max_abs)?;
        writeln!(f, "max_rel_diff: {:e}", self.max_rel)?;
        writeln!(f, "tolerance: {:e}", self.tol)?;
        writeln!(f, "result: {}", if self.pass { "pass" } else { "FAIL" })?;
        if let Some(d) = &self.divergence {
            writeln!(
                f,
                "first divergence: lowered layer {} ({}, training layer {}) at timestep {}, rel {:e}",
                d.layer, d.kind, d.origin, d.timestep, d.rel
            )?;
        }
        Ok(())
    }
}

/// Row-wise `(max abs diff, max rel diff)` of two `[B, ...]` tensors.
fn diff(a: &Tensor, b: &Tensor) -> (f64, f64) {
    if a.shape() != b.shape() {
        return (f64::INFINITY, f64::INFINITY);
    }
    let batch = a.shape().first().copied().unwrap_or(1).max(1);
    let (av, bv) = (a.real_values(), b.real_values());
    let per = av.len() / batch;
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for i in 0..batch {
        let (ra, rb) = (&av[i * per..(i + 1) * per], &bv[i * per..(i + 1) * per]);
        let abs = ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = ra.iter().chain(rb).map(|x| x.abs()).fold(0.0, f64::max);
        let rel = if abs == 0.0 { 0.0 } else { abs / scale };
        if abs.is_nan() {
            return (f64::NAN, f64::NAN);
        }
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    (max_abs, max_rel)
}

fn check_pair(trained: &LayerGraph, lowered: &LayerGraph) -> Result<(), LoweringError> {
    let mismatch = |m: String| Err(LoweringError::Architecture(m));
    if trained.mode != GraphMode::Training || lowered.mode != GraphMode::Lowered {
        return mismatch("expected a training-mode graph and a lowered graph".into());
    }
    if trained.input_shape != lowered.input_shape {
        return mismatch(format!("input shapes {:?} vs {:?}", trained.input_shape, lowered.input_shape));
    }
    if trained.timesteps() != lowered.timesteps() {
        return mismatch(format!("timesteps {} vs {}", trained.timesteps(), lowered.timesteps()));
    }
    if trained.output_shape()? != lowered.output_shape()? {
        return mismatch("output shapes differ".into());
    }
    for (l, (&o, layer)) in lowered.origin.iter().zip(&lowered.layers).enumerate() {
        let Some(src) = trained.layers.get(o) else {
            return mismatch(format!("lowered layer {l} refers to missing training layer {o}"));
        };
        let ok = match (layer, src) {
            (Layer::Conv(_) | Layer::Linear(_) | Layer::Head(_), Layer::BatchNorm(_)) => true,
            (a, b) => a.kind() == b.kind(),
        };
        if !ok {
            return mismatch(format!("lowered layer {l} ({}) vs training layer {o} ({})", layer.kind(), src.kind()));
        }
    }
    if lowered.origin.last() != Some(&(trained.layers.len() - 1)) {
        return mismatch("lowered graph does not end where the training graph ends".into());
    }
    Ok(())
}

/// Runs both graphs on `corpus` (`[B, ...]`, repeated over `T` steps) and
/// compares their readouts.
pub fn verify_equivalence(
    trained: &LayerGraph,
    lowered: &LayerGraph,
    corpus: &Tensor,
    tol: f64,
) -> Result<EquivalenceReport, LoweringError> {
    check_pair(trained, lowered)?;
    let steps = trained.timesteps();
    let reference = trained.forward_t(&encode_direct(corpus, steps))?;
    let run = run_lowered(lowered, corpus, CountRule::Native, true)?;
    let (max_abs, max_rel) = diff(&reference.readout, &run.readout);
    let pass = max_rel <= tol;
    let mut divergence = None;
    if !pass {
        'search: for (l, &o) in lowered.origin.iter().enumerate() {
            for t in 0..steps {
                let (_, rel) = diff(&reference.outputs[t][o], &run.outputs[t][l]);
                if !(rel <= tol) {
                    divergence = Some(Divergence {
                        layer: l,
                        origin: o,
                        kind: lowered.layers[l].kind(),
                        timestep: t,
                        rel,
                    });
                    break 'search;
                }
            }
        }
    }
    Ok(EquivalenceReport {
        samples: corpus.shape()[0],
        max_abs,
        max_rel,
        tol,
        pass,
        divergence,
    })
}

/// One multiplication found on an activation path.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditFinding {
    pub layer: usize,
    pub kind: &'static str,
    pub message: String,
}

impl fmt::Display for AuditFinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} ({}): {}", self.layer, self.kind, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditReport {
    pub findings: Vec<AuditFinding>,
    /// Layers allowed to multiply: they consume the real-valued input.
    pub input_layers: Vec<usize>,
    /// Layers consuming spikes with additions only.
    pub accumulate_layers: Vec<usize>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }

    /// Cross-checks an execution ledger: only input layers may hold MACs.
    pub fn check_ledger(&self, ledger: &OpLedger) -> Vec<AuditFinding> {
        ledger
            .layer_totals()
            .into_iter()
            .filter(|(l, c)| c.macs > 0 && !self.input_layers.contains(l))
            .map(|(layer, c)| AuditFinding {
                layer,
                kind: "ledger",
                message: format!("{} MACs recorded on an activation path", c.macs),
            })
            .collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Flow {
    /// Derived from the real-valued input only.
    Input,
    Spikes,
    /// Accumulated synaptic sums of spikes.
    Sums,
}

/// Structural scan of a lowered graph for multiplications that consume
/// activations.
///
/// Synapses fed by the input are dense encoders and may multiply. Synapses
/// fed by spikes only add weights and shift-combine planes. Anything else
/// consuming a spike tensor or an accumulated sum by multiplication is a
/// finding.
pub fn audit(graph: &LayerGraph) -> AuditReport {
    let mut r = AuditReport::default();
    let mut find = |layer: usize, kind: &'static str, message: String| {
        r.findings.push(AuditFinding { layer, kind, message });
    };
    if graph.mode != GraphMode::Lowered {
        find(0, "graph", "graph is not lowered".into());
    }
    let mut flow = Flow::Input;
    let mut input_layers = Vec::new();
    let mut accumulate_layers = Vec::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        let kind = layer.kind();
        match layer {
            Layer::Conv(_) | Layer::Linear(_) | Layer::Head(_) => match flow {
                Flow::Input => input_layers.push(i),
                Flow::Spikes => {
                    accumulate_layers.push(i);
                    flow = Flow::Sums;
                }
                Flow::Sums => find(i, kind, "multiplies accumulated sums by weights".into()),
            },
            Layer::BatchNorm(_) => find(i, kind, "per-channel scale on an activation path".into()),
            Layer::Activation(_) => find(i, kind, "real-valued nonlinearity left in graph".into()),
            Layer::Neuron(n) => {
                if flow == Flow::Spikes {
                    find(i, kind, "rescales incoming spikes".into());
                }
                match (n.coding, n.config.kind) {
                    (None, _) => find(i, kind, "no spike coding".into()),
                    (Some(SpikeCoding::BitPlane { n: cn, planes, .. }), NeuronKind::IbraLif | NeuronKind::ILif) => {
                        if cn != n.config.n || planes != n.config.planes() {
                            find(i, kind, "bit-plane metadata disagrees with the neuron".into());
                        }
                    }
                    (Some(SpikeCoding::Unary { d }), NeuronKind::IbraLif | NeuronKind::ILif) => {
                        if d != n.config.d_n() {
                            find(i, kind, "unary length disagrees with the neuron".into());
                        }
                    }
                    (Some(SpikeCoding::Binary), NeuronKind::Lif) => {}
                    (Some(c), k) => find(i, kind, format!("{c:?} cannot carry {k:?} levels")),
                }
                flow = Flow::Spikes;
            }
            Layer::MaxPool { .. } | Layer::Flatten => {}
        }
    }
    r.input_layers = input_layers;
    r.accumulate_layers = accumulate_layers;
    r
}
