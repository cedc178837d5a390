use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::neuron::encode_direct;
use crate::tensor::{Optimizer, Tape};

use super::data::Dataset;
use super::graph::{BnMode, LayerGraph};
use super::layer::Layer;
use super::NetworkError;

/// Gradient magnitude of one layer over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradStats {
    /// Largest `|dL/dp|` over all of the layer's parameters and batches.
    pub max_abs: f64,
    /// Mean over batches of the L2 norm of the layer's gradient.
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
    pub grads: BTreeMap<usize, GradStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest logit in each row, first one on ties.
pub(crate) fn argmax_rows(values: &[f64], classes: usize) -> Vec<usize> {
    values
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}

/// One shuffled pass over `data` with cross-entropy loss on the readout.
pub fn train_epoch<R: Rng>(
    graph: &mut LayerGraph,
    data: &Dataset,
    opt: &mut dyn Optimizer,
    batch_size: usize,
    rng: &mut R,
    epoch: usize,
) -> Result<EpochMetrics, NetworkError> {
    if batch_size == 0 {
        return Err(NetworkError::Invalid("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let steps = graph.timesteps();
    let classes = data.classes;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut grads: BTreeMap<usize, GradStats> = BTreeMap::new();
    let mut batches = 0usize;

    for (b, idx) in order.chunks(batch_size).enumerate() {
        let (x, labels) = data.batch(idx)?;
        let mut tape = Tape::new();
        let u = graph.record(&mut tape, &encode_direct(&x, steps), BnMode::Train)?;
        let loss = tape.softmax_cross_entropy(u.readout, &labels)?;
        let loss_value = tape.value(loss).as_f64()?[0];
        let g = tape.backward(loss)?;

        let mut per_layer: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for (key, &var) in &u.params {
            let gv = g.values(var).unwrap_or(&[]);
            let e = per_layer.entry(key.layer).or_default();
            for &v in gv {
                e.0 = if v.is_nan() || e.0.is_nan() { f64::NAN } else { e.0.max(v.abs()) };
                e.1 += v * v;
            }
        }
        if !loss_value.is_finite() {
            let mut report = String::new();
            for (layer, (max, sq)) in &per_layer {
                let kind = graph.layers[*layer].kind();
                let _ = writeln!(report, "  layer {layer} ({kind}): max |g| = {max}, norm = {}", sq.sqrt());
            }
            return Err(NetworkError::NonFinite { epoch, batch: b, report });
        }
        for (layer, (max, sq)) in &per_layer {
            let s = grads.entry(*layer).or_default();
            s.max_abs = s.max_abs.max(*max);
            s.norm += sq.sqrt();
        }
        batches += 1;

        let preds = argmax_rows(tape.value(u.readout).as_f64()?, classes);
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        loss_sum += loss_value * labels.len() as f64;

        for (key, param) in graph.params_mut() {
            let var = u.params[&key];
            if let Some(gv) = g.values(var) {
                opt.step(key, param.as_f64_mut()?, gv)?;
            }
        }
        for (layer, mean, var) in &u.bn_stats {
            if let Layer::BatchNorm(bn) = &mut graph.layers[*layer] {
                bn.update_running(mean, var);
            }
        }
    }
    for s in grads.values_mut() {
        s.norm /= batches.max(1) as f64;
    }
    let n = data.len().max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        grads,
    })
}

/// Evaluation-mode loss and accuracy.
pub fn evaluate(graph: &LayerGraph, data: &Dataset, batch_size: usize) -> Result<Evaluation, NetworkError> {
    let steps = graph.timesteps();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let u = graph.record(&mut tape, &encode_direct(&x, steps), BnMode::Eval)?;
        let loss = tape.softmax_cross_entropy(u.readout, &labels)?;
        loss_sum += tape.value(loss).as_f64()?[0] * labels.len() as f64;
        let preds = argmax_rows(tape.value(u.readout).as_f64()?, data.classes);
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    let n = data.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
    })
}
