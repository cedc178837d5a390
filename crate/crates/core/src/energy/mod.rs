//! Synaptic operation counting and energy pricing.
//!
//! Only synaptic work is priced: dense multiply-accumulates (MACs) on
//! real-valued paths and accumulates (ACs) triggered by 1-spikes. Batch norm,
//! pooling and neuron-update arithmetic are not counted.

mod ledger;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::lowering::{conv_taps, lower_graph, run_lowered, CountRule, LoweringError};
use crate::network::{Activation, GraphMode, InputEncoding, Layer, LayerGraph, Unit};
use crate::neuron::NeuronConfig;
use crate::tensor::ops::Conv2dGeometry;
use crate::tensor::Tensor;

pub use ledger::{OpCount, OpKey, OpLedger};

/// Picojoules per millijoule.
pub const PJ_PER_MJ: f64 = 1e9;

/// Header stated in every energy report.
pub const EXCLUSIONS: &str = "synaptic operations only; batch norm, pooling and neuron updates are excluded; \
input-fed layers are priced as MACs (T times under direct encoding, once under spike encoding)";

#[derive(Debug, thiserror::Error)]
pub enum EnergyError {
    #[error("energy constants must be positive (e_mac = {e_mac}, e_ac = {e_ac})")]
    Constants { e_mac: f64, e_ac: f64 },
    #[error(transparent)]
    Lowering(#[from] LoweringError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Energy per operation in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_mac: 4.6, e_ac: 0.9 }
    }
}

impl EnergyModel {
    pub fn new(e_mac: f64, e_ac: f64) -> Result<Self, EnergyError> {
        let m = Self { e_mac, e_ac };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        if self.e_mac > 0.0 && self.e_ac > 0.0 && self.e_mac.is_finite() && self.e_ac.is_finite() {
            Ok(())
        } else {
            Err(EnergyError::Constants {
                e_mac: self.e_mac,
                e_ac: self.e_ac,
            })
        }
    }

    pub fn pj(&self, c: OpCount) -> f64 {
        self.e_mac * c.macs as f64 + self.e_ac * c.acs as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub per_layer_mj: BTreeMap<usize, f64>,
    pub totals: OpCount,
    pub total_mj: f64,
}

pub fn price(ledger: &OpLedger, model: &EnergyModel) -> EnergyReport {
    let per_layer_mj = ledger
        .layer_totals()
        .into_iter()
        .map(|(l, c)| (l, model.pj(c) / PJ_PER_MJ))
        .collect();
    let totals = ledger.totals();
    EnergyReport {
        per_layer_mj,
        totals,
        total_mj: model.pj(totals) / PJ_PER_MJ,
    }
}

/// How many times cheaper `other` is than `baseline`.
pub fn efficiency_ratio(baseline_mj: f64, other_mj: f64) -> f64 {
    baseline_mj / other_mj
}

/// `6.34×` style, two decimals.
pub fn format_ratio(ratio: f64) -> String {
    format!("{ratio:.2}×")
}

/// Dense MACs per sample of every synapse in a graph, keyed by layer.
fn dense_macs(graph: &LayerGraph) -> Result<BTreeMap<usize, u64>, LoweringError> {
    let shapes = graph.shapes()?;
    let mut out = BTreeMap::new();
    for (i, layer) in graph.layers.iter().enumerate() {
        let input = if i == 0 { &graph.input_shape } else { &shapes[i - 1] };
        let macs = match layer {
            Layer::Conv(c) => {
                let mut s = vec![1];
                s.extend_from_slice(input);
                conv_taps(&Conv2dGeometry::new(&s, c.weight.shape(), c.stride, c.padding)?)
            }
            Layer::Linear(l) | Layer::Head(l) => (l.inputs() * l.outputs()) as u64,
            _ => continue,
        };
        out.insert(i, macs);
    }
    Ok(out)
}

/// Counts synaptic operations of `graph` over `corpus` (`[B, ...]`).
///
/// A training-mode graph is counted as a dense network: every synapse costs
/// its MACs at every timestep. A lowered graph is executed and counted event
/// by event with the given spike rule.
pub fn count_ops(graph: &LayerGraph, corpus: &Tensor, rule: CountRule) -> Result<OpLedger, LoweringError> {
    match graph.mode {
        GraphMode::Lowered => Ok(run_lowered(graph, corpus, rule, false)?.ledger),
        GraphMode::Training => {
            let batch = corpus.shape().first().copied().unwrap_or(0) as u64;
            let mut ledger = OpLedger::new();
            let macs = dense_macs(graph)?;
            let first = macs.keys().next().copied();
            for t in 0..graph.timesteps() {
                for (&l, &m) in &macs {
                    if t > 0 && graph.encoding == InputEncoding::Spike && Some(l) == first {
                        continue;
                    }
                    ledger.add_macs(l, t, m * batch);
                }
            }
            Ok(ledger)
        }
    }
}

/// One row of a mode comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeRow {
    pub mode: &'static str,
    pub timesteps: usize,
    pub totals: OpCount,
    pub energy_mj: f64,
    /// ANN energy divided by this row's energy.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub samples: usize,
    pub model: EnergyModel,
    pub rows: Vec<ModeRow>,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {EXCLUSIONS}")?;
        writeln!(
            f,
            "# e_mac = {} pJ, e_ac = {} pJ, {} samples",
            self.model.e_mac, self.model.e_ac, self.samples
        )?;
        writeln!(f, "{:<14} {:>3} {:>14} {:>14} {:>14} {:>9}", "mode", "T", "MACs", "ACs", "energy_mJ", "vs_ANN")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:>3} {:>14} {:>14} {:>14.6e} {:>9}",
                r.mode,
                r.timesteps,
                r.totals.macs,
                r.totals.acs,
                r.energy_mj,
                format_ratio(r.ratio)
            )?;
        }
        Ok(())
    }
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String, EnergyError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mode", "timesteps", "macs", "acs", "energy_mj", "ratio_vs_ann"])?;
        for r in &self.rows {
            w.write_record([
                r.mode.to_string(),
                r.timesteps.to_string(),
                r.totals.macs.to_string(),
                r.totals.acs.to_string(),
                format!("{:e}", r.energy_mj),
                format!("{:.4}", r.ratio),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("utf-8 csv"))
    }
}

/// Ledger as CSV: `layer,timestep,plane,macs,acs,energy_pj`.
pub fn ledger_csv(ledger: &OpLedger, model: &EnergyModel) -> Result<String, EnergyError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "timestep", "plane", "macs", "acs", "energy_pj"])?;
    for (k, c) in ledger.cells() {
        w.write_record([
            k.layer.to_string(),
            k.timestep.to_string(),
            k.plane.to_string(),
            c.macs.to_string(),
            c.acs.to_string(),
            format!("{}", model.pj(*c)),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("utf-8 csv"))
}

/// Per-layer text table of a priced ledger.
pub fn report_text(ledger: &OpLedger, model: &EnergyModel) -> String {
    let r = price(ledger, model);
    let mut s = String::new();
    let _ = writeln!(s, "# {EXCLUSIONS}");
    let _ = writeln!(s, "{:<6} {:>14} {:>14} {:>14}", "layer", "MACs", "ACs", "energy_mJ");
    for (l, c) in ledger.layer_totals() {
        let _ = writeln!(s, "{:<6} {:>14} {:>14} {:>14.6e}", l, c.macs, c.acs, r.per_layer_mj[&l]);
    }
    let _ = writeln!(s, "{:<6} {:>14} {:>14} {:>14.6e}", "total", r.totals.macs, r.totals.acs, r.total_mj);
    s
}

/// Prices one corpus under four execution regimes of the same weights:
///
/// * `ANN`: neurons replaced by ReLU, dense MACs;
/// * `LIF`: neurons replaced by binary LIF (`V_th = 1`, `alpha = 0.5`,
///   `lif_timesteps` steps), lowered and counted per spike;
/// * `I-LIF-unary`: the lowered graph's levels sent as unary spike trains;
/// * `IBRA-bitplane`: the same levels sent as bit-planes.
pub fn compare_modes(
    trained: &LayerGraph,
    lowered: &LayerGraph,
    corpus: &Tensor,
    model: &EnergyModel,
    lif_timesteps: usize,
) -> Result<Comparison, EnergyError> {
    model.validate()?;
    if trained.input_shape != lowered.input_shape
        || trained.output_shape().map_err(LoweringError::from)? != lowered.output_shape().map_err(LoweringError::from)?
        || lowered.mode != GraphMode::Lowered
        || trained.mode != GraphMode::Training
    {
        return Err(LoweringError::Architecture("graphs do not share an architecture".into()).into());
    }
    let synapses = |g: &LayerGraph| g.layers.iter().filter(|l| l.is_synapse()).count();
    if synapses(trained) != synapses(lowered) {
        return Err(LoweringError::Architecture("synapse counts differ".into()).into());
    }

    let ann = trained
        .with_neurons_replaced(Unit::Activation(Activation::Relu))
        .map_err(LoweringError::from)?;
    let lif = trained
        .with_neurons_replaced(Unit::Neuron(NeuronConfig::lif(1.0, 0.5, lif_timesteps)))
        .map_err(LoweringError::from)?;
    let lif = lower_graph(&lif)?;

    let runs = [
        ("ANN", count_ops(&ann, corpus, CountRule::Native)?, 1),
        ("LIF", count_ops(&lif, corpus, CountRule::Native)?, lif_timesteps),
        ("I-LIF-unary", count_ops(lowered, corpus, CountRule::Unary)?, lowered.timesteps()),
        ("IBRA-bitplane", count_ops(lowered, corpus, CountRule::Popcount)?, lowered.timesteps()),
    ];
    let ann_mj = price(&runs[0].1, model).total_mj;
    let rows = runs
        .into_iter()
        .map(|(mode, ledger, timesteps)| {
            let p = price(&ledger, model);
            ModeRow {
                mode,
                timesteps,
                totals: p.totals,
                energy_mj: p.total_mj,
                ratio: efficiency_ratio(ann_mj, p.total_mj),
            }
        })
        .collect();
    Ok(Comparison {
        samples: corpus.shape().first().copied().unwrap_or(0),
        model: *model,
        rows,
    })
}
