use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{Dataset, LayerGraph, NetworkError};
use crate::neuron::{encode_direct, NeuronConfig};
use crate::tensor::{Tape, Tensor, TensorError};

/// Emitted-level histogram of one neuron layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRange {
    pub layer: usize,
    pub config: NeuronConfig,
    /// `histogram[k]` counts emissions of level `k`, for `k` in `[0, D_N]`.
    pub histogram: Vec<u64>,
}

impl LayerRange {
    pub fn theoretical_max(&self) -> u32 {
        self.config.d_n()
    }

    pub fn achieved_max(&self) -> u32 {
        self.histogram.iter().rposition(|&c| c > 0).unwrap_or(0) as u32
    }

    /// Distinct emitted levels over `D_N + 1`.
    pub fn coverage(&self) -> f64 {
        self.histogram.iter().filter(|&&c| c > 0).count() as f64 / self.histogram.len() as f64
    }
}

/// How much of each neuron layer's integer range a network actually uses.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeCoverageReport {
    pub label: String,
    pub layers: Vec<LayerRange>,
}

impl RangeCoverageReport {
    /// Mean coverage over neuron layers.
    pub fn coverage(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(LayerRange::coverage).sum::<f64>() / self.layers.len() as f64
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("layer,level,count\n");
        for l in &self.layers {
            for (k, c) in l.histogram.iter().enumerate() {
                let _ = writeln!(s, "{},{k},{c}", l.layer);
            }
        }
        s
    }
}

impl fmt::Display for RangeCoverageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run: {}", self.label)?;
        writeln!(f, "{:<6} {:>6} {:>6} {:>12} {:>12} {:>9}", "layer", "N", "D_N", "achieved_max", "distinct", "coverage")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<6} {:>6} {:>6} {:>12} {:>12} {:>9.4}",
                l.layer,
                l.config.n,
                l.theoretical_max(),
                l.achieved_max(),
                l.histogram.iter().filter(|&&c| c > 0).count(),
                l.coverage()
            )?;
        }
        writeln!(f, "mean coverage: {:.4}", self.coverage())
    }
}

/// Runs a training-mode graph over `data` and histograms every neuron
/// layer's emitted levels across all samples and timesteps.
pub fn range_coverage(
    graph: &LayerGraph,
    data: &Dataset,
    batch_size: usize,
    label: &str,
) -> Result<RangeCoverageReport, NetworkError> {
    let mut layers: Vec<LayerRange> = graph
        .neuron_configs()
        .into_iter()
        .map(|(layer, config)| LayerRange {
            layer,
            config,
            histogram: vec![0; config.d_n() as usize + 1],
        })
        .collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        let fwd = graph.forward_t(&encode_direct(&x, graph.timesteps()))?;
        for step in &fwd.outputs {
            for r in layers.iter_mut() {
                let n = r.config.n as f64;
                let top = r.histogram.len() - 1;
                for &v in step[r.layer].as_f64()? {
                    let k = (v * n).round() as usize;
                    r.histogram[k.min(top)] += 1;
                }
            }
        }
    }
    Ok(RangeCoverageReport {
        label: label.to_string(),
        layers,
    })
}

/// One row of the gradient scaling probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub case: &'static str,
    pub activation: f64,
    pub max_abs_grad: f64,
}

/// Weight-gradient magnitude of a linear layer whose presynaptic neurons all
/// emit the same value, under a fixed upstream gradient.
///
/// Cases: silent neurons, a unit-activation control, saturation of an
/// `N = 1` neuron (activation `D_N`) and of a range-aligned neuron with the
/// same `D_N` (activation `D_N / n`).
pub fn gradient_probe(d_n: u32, n: u32, seed: u64) -> Result<Vec<ProbeRow>, TensorError> {
    let (inputs, outputs) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..inputs * outputs).map(|_| rng.random_range(-0.5..0.5)).collect();
    let upstream: Vec<f64> = (0..outputs).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cases = [
        ("zero", 0.0),
        ("unit", 1.0),
        ("saturated-n1", d_n as f64),
        ("saturated-aligned", d_n as f64 / n as f64),
    ];
    cases
        .into_iter()
        .map(|(case, a)| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::full(&[1, inputs], a));
            let wv = tape.leaf(Tensor::from_f64(vec![outputs, inputs], w.clone())?);
            let y = tape.linear(x, wv, None)?;
            let g = tape.leaf(Tensor::from_f64(vec![1, outputs], upstream.clone())?);
            let weighted = tape.mul(y, g)?;
            let loss = tape.sum(weighted);
            let grads = tape.backward(loss)?;
            let max_abs_grad = grads.values(wv).unwrap_or(&[]).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            Ok(ProbeRow {
                case,
                activation: a,
                max_abs_grad,
            })
        })
        .collect()
}

/// Mean and standard deviation over every feature value of `data`.
pub fn feature_stats(data: &Dataset) -> (f64, f64) {
    let v = data.features.real_values();
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, std)
}

/// `(x - mean) / std` applied to every feature value.
pub fn standardize(data: &Dataset, mean: f64, std: f64) -> Dataset {
    let v: Vec<f32> = data.features.real_values().iter().map(|x| ((x - mean) / std) as f32).collect();
    Dataset {
        features: Tensor::from_f32(data.features.shape().to_vec(), v).expect("same shape"),
        labels: data.labels.clone(),
        classes: data.classes,
    }
}
