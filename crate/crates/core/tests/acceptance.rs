//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ibra_snn::cli::{feature_stats, standardize};
use ibra_snn::energy::{efficiency_ratio, format_ratio, OpKey, OpLedger};
use ibra_snn::lowering::{
    audit, convert_ann, levels_to_bitplanes, lower_graph, reconstruct, run_lowered, to_bitplanes, verify_equivalence,
    CountRule,
};
use ibra_snn::network::{
    evaluate, train_epoch, Activation, BatchNormLayer, BnMode, Conv2dLayer, Dataset, Layer, LayerGraph, LinearLayer,
    NeuronLayer, Unit,
};
use ibra_snn::neuron::{encode_direct, NeuronConfig, NeuronKind};
use ibra_snn::tensor::{Adam, AdamConfig, Tape, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("{what} took {took:.2?}, limit {limit:?}"))
}

fn tensor(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

// 1

fn bit_round_trip() -> Outcome {
    let start = Instant::now();
    let ceilings = [15u32, 31, 63, 127, 255, 511, 1023, 2047, 4095, 8191];
    for &d_n in &ceilings {
        let planes = 32 - d_n.leading_zeros();
        let levels: Vec<i32> = (0..=d_n as i32).collect();
        let bits = levels_to_bitplanes(&[levels.len()], &levels, planes).map_err(|e| e.to_string())?;
        let back = reconstruct(&bits).map_err(|e| e.to_string())?;
        ensure(back.as_i32().unwrap() == levels.as_slice(), || format!("integer round trip failed at D_N = {d_n}"))?;

        let n = 100u32;
        let act = tensor(&[levels.len()], levels.iter().map(|&k| k as f64 / n as f64).collect());
        let bits = to_bitplanes(&act, n, d_n).map_err(|e| e.to_string())?;
        let back = reconstruct(&bits).map_err(|e| e.to_string())?;
        ensure(back.as_i32().unwrap() == levels.as_slice(), || format!("scaled round trip failed at D_N = {d_n}"))?;
    }
    within(start, Duration::from_secs(1), "round trip")?;
    Ok(format!("{} ceilings, every level exact", ceilings.len()))
}

// 2 and 3

fn random_bn(rng: &mut ChaCha8Rng, c: usize) -> Layer {
    let mut bn = BatchNormLayer::new(c);
    bn.gamma = uniform(rng, &[c], 0.5, 1.5);
    bn.beta = uniform(rng, &[c], -0.5, 0.5);
    bn.running_mean = uniform(rng, &[c], -0.3, 0.3);
    bn.running_var = uniform(rng, &[c], 0.5, 2.0);
    Layer::BatchNorm(bn)
}

fn random_neuron(rng: &mut ChaCha8Rng, t: usize) -> Layer {
    let n = [1u32, 10, 100, 1000][rng.random_range(0..4)];
    let d_n = rng.random_range(1..=255u32);
    let alpha = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.5..1.0) };
    Layer::Neuron(NeuronLayer::new(NeuronConfig::ibra(d_n as f64 / n as f64, n, t).with_alpha(alpha)))
}

/// 2 to 5 synaptic layers mixing conv, linear, batch norm and IBRA-LIF,
/// every width at most 64.
fn random_graph(rng: &mut ChaCha8Rng) -> LayerGraph {
    let synapses = rng.random_range(2..=5usize);
    let convs = if rng.random_bool(0.6) { rng.random_range(1..synapses) } else { 0 };
    let t = rng.random_range(1..=3);
    let mut layers = Vec::new();
    let input;
    let mut width;
    if convs > 0 {
        let (c, hw) = (rng.random_range(1..=3usize), [6usize, 8][rng.random_range(0..2)]);
        input = vec![c, hw, hw];
        let (mut c, mut h) = (c, hw);
        for _ in 0..convs {
            let out = rng.random_range(1..=8usize);
            let k = if h >= 3 { [1usize, 3][rng.random_range(0..2)] } else { 1 };
            let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
            let stride = if h >= 4 { rng.random_range(1..=2) } else { 1 };
            layers.push(Layer::Conv(Conv2dLayer::init(rng, c, out, k, stride, pad)));
            h = (h + 2 * pad - k) / stride + 1;
            c = out;
            if rng.random_bool(0.7) {
                layers.push(random_bn(rng, c));
            }
            layers.push(random_neuron(rng, t));
            if h >= 2 && rng.random_bool(0.4) {
                layers.push(Layer::MaxPool { size: 2 });
                h /= 2;
            }
        }
        layers.push(Layer::Flatten);
        width = c * h * h;
    } else {
        width = rng.random_range(2..=64usize);
        input = vec![width];
    }
    for _ in convs..synapses - 1 {
        let out = rng.random_range(2..=64usize);
        layers.push(Layer::Linear(LinearLayer::init(rng, width, out)));
        if rng.random_bool(0.7) {
            layers.push(random_bn(rng, out));
        }
        layers.push(random_neuron(rng, t));
        width = out;
    }
    let classes = rng.random_range(2..=10);
    layers.push(Layer::Head(LinearLayer::init(rng, width, classes)));
    LayerGraph::new(input, layers).expect("generator builds valid graphs")
}

fn random_cases() -> Vec<(LayerGraph, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..50)
        .map(|_| {
            let g = random_graph(&mut rng);
            let mut shape = vec![10];
            shape.extend_from_slice(&g.input_shape);
            let x = uniform(&mut rng, &shape, -2.0, 2.0);
            (g, x)
        })
        .collect()
}

fn lowering_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let (mut active, mut total) = (0usize, 0usize);
    for (i, (g, x)) in random_cases().iter().enumerate() {
        let lowered = lower_graph(g).map_err(|e| format!("graph {i}: {e}"))?;
        let r = verify_equivalence(g, &lowered, x, 1e-5).map_err(|e| format!("graph {i}: {e}"))?;
        ensure(r.pass, || format!("graph {i}:\n{r}"))?;
        worst = worst.max(r.max_rel);
        let fwd = g.forward_t(&encode_direct(x, g.timesteps())).map_err(|e| e.to_string())?;
        for step in &fwd.outputs {
            for (l, _) in g.neuron_configs() {
                let v = step[l].as_f64().unwrap();
                active += v.iter().filter(|&&a| a != 0.0).count();
                total += v.len();
            }
        }
    }
    within(start, Duration::from_secs(60), "50 graphs")?;
    let rate = active as f64 / total as f64;
    ensure(rate > 0.05, || format!("only {rate:.3} of neuron outputs are non-zero"))?;
    Ok(format!(
        "50 graphs x 10 inputs, max relative difference {worst:e}, {:.1}% of neuron outputs non-zero",
        100.0 * rate
    ))
}

fn accumulate_only_audit() -> Outcome {
    let mut graphs: Vec<(LayerGraph, Tensor)> = random_cases();
    let cfg = NeuronConfig::ibra(5.11, 100, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    graphs.push((
        LayerGraph::cnn([1, 8, 8], &[8, 16], 10, Unit::Neuron(cfg), 1).unwrap(),
        uniform(&mut rng, &[4, 1, 8, 8], -1.0, 1.0),
    ));
    let ann = LayerGraph::mlp(2, &[16, 16], 3, Unit::Activation(Activation::Clip { ceiling: 2.0 }), true, 2).unwrap();
    let x = uniform(&mut rng, &[8, 2], -2.0, 2.0);
    graphs.push((convert_ann(&ann, 100, None).unwrap(), x));
    let mut scanned = 0;
    for (i, (g, x)) in graphs.iter().enumerate() {
        let lowered = lower_graph(g).map_err(|e| format!("graph {i}: {e}"))?;
        let report = audit(&lowered);
        ensure(report.passed(), || format!("graph {i}: {:?}", report.findings))?;
        let ledger = run_lowered(&lowered, x, CountRule::Native, false).map_err(|e| e.to_string())?.ledger;
        let extra = report.check_ledger(&ledger);
        ensure(extra.is_empty(), || format!("graph {i}: {extra:?}"))?;
        scanned += 1;
    }
    Ok(format!("{scanned} lowered graphs, no multiplication on an activation path"))
}

// 4

/// Independent statement of the surrogate window.
fn window_oracle(kind: NeuronKind, d: f64, v_th: f64, v: f64) -> f64 {
    let inside = match kind {
        NeuronKind::Lif => v >= v_th - 0.5 && v <= v_th + 0.5,
        NeuronKind::ILif | NeuronKind::IbraLif => v >= 0.0 && v <= d,
    };
    if inside {
        1.0
    } else {
        0.0
    }
}

fn finite_difference_agreement() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let layers = vec![
        Layer::Conv(Conv2dLayer::init(&mut rng, 2, 3, 3, 1, 1)),
        Layer::BatchNorm(BatchNormLayer::new(3)),
        Layer::Activation(Activation::Identity),
        Layer::Flatten,
        Layer::Linear(LinearLayer::init(&mut rng, 3 * 4 * 4, 5)),
        Layer::BatchNorm(BatchNormLayer::new(5)),
        Layer::Head(LinearLayer::init(&mut rng, 5, 3)),
    ];
    let mut g = LayerGraph::new(vec![2, 4, 4], layers).unwrap();
    for (_, p) in g.params_mut() {
        for v in p.as_f64_mut().unwrap() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x = uniform(&mut rng, &[4, 2, 4, 4], -1.0, 1.0);
    let labels = [0usize, 2, 1, 2];
    let loss_of = |g: &LayerGraph| -> (f64, BTreeMap<String, Vec<f64>>) {
        let mut tape = Tape::new();
        let u = g.record(&mut tape, &[x.clone()], BnMode::Train).unwrap();
        let loss = tape.softmax_cross_entropy(u.readout, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let by_key = u
            .params
            .iter()
            .map(|(k, &v)| (k.to_string(), grads.values(v).unwrap().to_vec()))
            .collect();
        (tape.value(loss).as_f64().unwrap()[0], by_key)
    };
    let (_, analytic) = loss_of(&g);
    let h = 1e-6;
    let mut checked = 0;
    let keys: Vec<String> = g.params().iter().map(|(k, _)| k.to_string()).collect();
    for (pi, key) in keys.iter().enumerate() {
        let len = g.params()[pi].1.numel();
        for j in (0..len).step_by(3) {
            let bump = |g: &mut LayerGraph, delta: f64| {
                let mut ps = g.params_mut();
                ps[pi].1.as_f64_mut().unwrap()[j] += delta;
            };
            bump(&mut g, h);
            let (up, _) = loss_of(&g);
            bump(&mut g, -2.0 * h);
            let (down, _) = loss_of(&g);
            bump(&mut g, h);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[key][j];
            // Central differences resolve about 1e-10 here, so gradients that
            // vanish identically (biases cancelled by batch norm) are
            // compared against a 1e-5 floor.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            ensure(rel <= 1e-4, || format!("{key}[{j}]: analytic {a}, numeric {numeric}, rel {rel:e}"))?;
            checked += 1;
        }
    }
    Ok(checked)
}

fn surrogate_gradient() -> Outcome {
    let configs = [
        NeuronConfig::lif(1.0, 0.5, 1),
        NeuronConfig::lif(0.7, 1.0, 1),
        NeuronConfig::ilif(3, 1),
        NeuronConfig::ilif(15, 1),
        NeuronConfig::ibra(5.11, 100, 1),
        NeuronConfig::ibra(0.15, 100, 1),
        NeuronConfig::ibra(15.0, 1, 1),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for cfg in configs {
        let (lo, hi) = (-cfg.d - 2.0, 2.0 * cfg.d + 2.0);
        let mut v: Vec<f64> = (0..1000).map(|_| rng.random_range(lo..hi)).collect();
        v.extend([0.0, cfg.d, -1e-12, cfg.d + 1e-12, cfg.v_th - 0.5, cfg.v_th + 0.5]);
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[v.len()], v.clone()));
        let (out, _) = cfg.record(&mut tape, None, x).map_err(|e| e.to_string())?;
        let loss = tape.sum(out);
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        let g = grads.values(x).ok_or("no gradient reached the input")?;
        for (i, (&vi, &gi)) in v.iter().zip(g).enumerate() {
            let want = window_oracle(cfg.kind, cfg.d, cfg.v_th, vi);
            ensure(gi == want, || format!("{cfg:?}: v_pre[{i}] = {vi}: got {gi}, want {want}"))?;
        }
    }
    let checked = finite_difference_agreement()?;
    Ok(format!(
        "{} configs x 1006 points exact; {checked} finite-difference checks within 1e-4",
        configs.len()
    ))
}

// 5

/// Per-spike enumeration over a lowered graph, using levels taken from the
/// training-mode forward pass.
fn enumerate_events(trained: &LayerGraph, lowered: &LayerGraph, x: &Tensor, rule: CountRule) -> OpLedger {
    let steps = trained.timesteps();
    let fwd = trained.forward_t(&encode_direct(x, steps)).unwrap();
    let batch = x.shape()[0];
    let shapes = lowered.shapes().unwrap();
    let mut ledger = OpLedger::new();
    for (l, layer) in lowered.layers.iter().enumerate() {
        if !layer.is_synapse() {
            continue;
        }
        let in_shape = if l == 0 { lowered.input_shape.clone() } else { shapes[l - 1].clone() };
        // Fan-out of each input position.
        let fan_out: Vec<u64> = match layer {
            Layer::Conv(c) => {
                let ws = c.weight.shape();
                let (oc, k) = (ws[0], ws[2]);
                let (ch, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (shapes[l][1], shapes[l][2]);
                let mut f = vec![0u64; ch * h * w];
                for ci in 0..ch {
                    for iy in 0..h {
                        for ix in 0..w {
                            let mut n = 0;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let ky = (iy + c.padding) as isize - (oy * c.stride) as isize;
                                    let kx = (ix + c.padding) as isize - (ox * c.stride) as isize;
                                    if (0..k as isize).contains(&ky) && (0..k as isize).contains(&kx) {
                                        n += 1;
                                    }
                                }
                            }
                            f[(ci * h + iy) * w + ix] = n * oc as u64;
                        }
                    }
                }
                f
            }
            Layer::Linear(li) | Layer::Head(li) => vec![li.outputs() as u64; li.inputs()],
            _ => unreachable!(),
        };
        if l == 0 {
            let macs: u64 = fan_out.iter().sum::<u64>() * batch as u64;
            for t in 0..steps {
                ledger.add_macs(l, t, macs);
            }
            continue;
        }
        // The neuron that produced this layer's input.
        let cfg = lowered.layers[..l]
            .iter()
            .rev()
            .find_map(|p| match p {
                Layer::Neuron(n) => Some(n.config),
                _ => None,
            })
            .unwrap();
        let origin = lowered.origin[l - 1];
        let n = cfg.n as f64;
        for t in 0..steps {
            let values = fwd.outputs[t][origin].as_f64().unwrap();
            let per = fan_out.len();
            for (i, &v) in values.iter().enumerate() {
                let level = (v * n).round() as u64;
                let fo = fan_out[i % per];
                match rule {
                    CountRule::Unary => {
                        for j in 0..level {
                            ledger.add_acs(l, t, j as u32, fo);
                        }
                    }
                    _ => {
                        for p in 0..64 {
                            if level >> p & 1 == 1 {
                                ledger.add_acs(l, t, p, fo);
                            }
                        }
                    }
                }
            }
        }
    }
    ledger
}

fn energy_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = NeuronConfig::ibra(5.11, 100, 2);
    let mut g = LayerGraph::cnn([2, 8, 8], &[4, 6], 4, Unit::Neuron(cfg), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for layer in &mut g.layers {
        if let Layer::BatchNorm(bn) = layer {
            let c = bn.channels();
            if let Layer::BatchNorm(r) = random_bn(&mut rng, c) {
                *bn = r;
            }
        }
    }
    let x = uniform(&mut rng, &[10, 2, 8, 8], -2.0, 2.0);
    let lowered = lower_graph(&g).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for rule in [CountRule::Popcount, CountRule::Unary] {
        let ledger = run_lowered(&lowered, &x, rule, false).map_err(|e| e.to_string())?.ledger;
        let oracle = enumerate_events(&g, &lowered, &x, rule);
        if ledger != oracle {
            let keys: std::collections::BTreeSet<&OpKey> = ledger.cells().keys().chain(oracle.cells().keys()).collect();
            let first = keys
                .into_iter()
                .find(|k| ledger.cells().get(k) != oracle.cells().get(k))
                .unwrap();
            return Err(format!(
                "{rule:?}: at {first:?} ledger {:?}, enumeration {:?}",
                ledger.cells().get(first),
                oracle.cells().get(first)
            ));
        }
        let t = ledger.totals();
        summary.push(format!("{rule:?} {} MACs / {} ACs", t.macs, t.acs));
    }
    within(start, Duration::from_secs(10), "energy oracle")?;
    Ok(format!("3-layer CNN, 10 inputs, ledgers equal: {}", summary.join(", ")))
}

// 6

fn ratio_arithmetic() -> Outcome {
    let r = efficiency_ratio(2.79, 0.44);
    let s = format_ratio(r);
    ensure(s == "6.34×", || format!("formatted {s}"))?;
    ensure(format!("{r:.1}") == "6.3", || format!("ratio {r}"))?;
    Ok(format!("2.79 mJ / 0.44 mJ = {s}"))
}

// 7 and 8

struct Task {
    name: &'static str,
    train: Dataset,
    test: Dataset,
}

fn task(name: &'static str, data: Dataset, test: usize, flatten: bool) -> Task {
    let (train, test) = data.split(test).unwrap();
    let (m, s) = feature_stats(&train);
    let (mut train, mut test) = (standardize(&train, m, s), standardize(&test, m, s));
    if flatten {
        train = train.flattened();
        test = test.flattened();
    }
    Task { name, train, test }
}

/// Trains with Adam and returns (train accuracy, test accuracy).
fn fit(g: &mut LayerGraph, t: &Task, epochs: usize, lr: f64, seed: u64) -> Result<(f64, f64), String> {
    let mut opt = Adam::new(AdamConfig { lr, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in 0..epochs {
        train_epoch(g, &t.train, &mut opt, 32, &mut rng, e).map_err(|e| e.to_string())?;
    }
    let tr = evaluate(g, &t.train, 256).map_err(|e| e.to_string())?;
    let te = evaluate(g, &t.test, 256).map_err(|e| e.to_string())?;
    Ok((tr.accuracy, te.accuracy))
}

fn desk_training() -> Outcome {
    let start = Instant::now();
    let ibra = Unit::Neuron(NeuronConfig::ibra(5.11, 100, 1));
    let relu = Unit::Activation(Activation::Relu);
    let blobs = task("blobs MLP", Dataset::blobs(600, 3, 1), 200, false);
    let digits = task("digits CNN", Dataset::digits(1200, 2), 300, false);
    let mut lines = Vec::new();
    for t in [&blobs, &digits] {
        let build = |unit| match t.name {
            "blobs MLP" => LayerGraph::mlp(2, &[32], 3, unit, true, 4).unwrap(),
            _ => LayerGraph::cnn([1, 8, 8], &[8, 16], 10, unit, 4).unwrap(),
        };
        let (mut snn, mut ann) = (build(ibra), build(relu));
        let epochs = if t.name == "blobs MLP" { 30 } else { 25 };
        let (s_tr, s_te) = fit(&mut snn, t, epochs, 1e-2, 9)?;
        let (_, a_te) = fit(&mut ann, t, epochs, 1e-2, 9)?;
        ensure(s_tr >= 0.98, || format!("{}: IBRA-LIF train accuracy {s_tr:.4} < 0.98", t.name))?;
        ensure(s_te >= a_te - 0.02, || {
            format!("{}: IBRA-LIF test {s_te:.4} more than 2 points below ANN {a_te:.4}", t.name)
        })?;
        lines.push(format!("{}: train {s_tr:.4}, test {s_te:.4} vs ANN {a_te:.4}", t.name));
    }
    within(start, Duration::from_secs(300), "desk-scale training")?;
    Ok(lines.join("; "))
}

fn conversion() -> Outcome {
    let blobs = task("blobs MLP", Dataset::blobs(600, 3, 5), 200, false);
    let digits = task("digits MLP", Dataset::digits(1200, 6), 300, true);
    let clip = Unit::Activation(Activation::Clip { ceiling: 2.0 });
    let mut lines = Vec::new();
    for t in [&blobs, &digits] {
        let inputs = t.train.sample_shape()[0];
        let mut ann = LayerGraph::mlp(inputs, &[64, 32], t.train.classes, clip, true, 7).unwrap();
        let (_, ann_acc) = fit(&mut ann, t, 25, 1e-2, 3)?;
        let snn = convert_ann(&ann, 100, None).map_err(|e| e.to_string())?;
        let snn_acc = evaluate(&snn, &t.test, 256).map_err(|e| e.to_string())?.accuracy;
        let lowered = lower_graph(&snn).map_err(|e| e.to_string())?;
        let x = t.test.features.to_f64();
        let out = run_lowered(&lowered, &x, CountRule::Native, false).map_err(|e| e.to_string())?.readout;
        let classes = t.test.classes;
        let hits = out
            .as_f64()
            .unwrap()
            .chunks(classes)
            .zip(&t.test.labels)
            .filter(|(row, &l)| (0..classes).all(|j| row[j] <= row[l]) && (0..l).all(|j| row[j] < row[l]))
            .count();
        let low_acc = hits as f64 / t.test.len() as f64;
        ensure((snn_acc - ann_acc).abs() <= 0.01, || {
            format!("{}: converted {snn_acc:.4} vs ANN {ann_acc:.4}", t.name)
        })?;
        ensure(low_acc == snn_acc, || format!("{}: lowered {low_acc:.4} vs converted {snn_acc:.4}", t.name))?;
        lines.push(format!("{}: ANN {ann_acc:.4}, converted {snn_acc:.4}", t.name));
    }
    Ok(lines.join("; "))
}

// 9 and 10

fn ibra(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ibra"))
        .args(args)
        .current_dir(dir)
        .env_remove("IBRA_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`ibra {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
    })?;
    Ok(out.stdout)
}

fn coverage_pair(summary: &str) -> Option<(f64, f64)> {
    let line = summary.lines().find(|l| l.starts_with("coverage no-ra"))?;
    let nums: Vec<f64> = line
        .split(|c: char| c == ' ' || c == ',' || c == ':')
        .filter_map(|w| w.parse().ok())
        .collect();
    Some((nums[0], nums[1]))
}

fn range_coverage() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for (name, extra) in [
        ("blobs MLP", vec![]),
        ("digits CNN", vec!["--dataset", "digits", "--arch", "cnn", "--samples", "800", "--epochs", "10"]),
    ] {
        let out = name.replace(' ', "_");
        let mut args = vec!["range-report", "--paired", "--out", &out];
        args.extend(extra);
        ibra(dir.path(), &args)?;
        let base = dir.path().join(&out);
        for f in ["range_no-ra.csv", "range_ra.csv", "range_no-ra.txt", "range_ra.txt"] {
            ensure(base.join(f).is_file(), || format!("{name}: {f} missing"))?;
        }
        let summary = std::fs::read_to_string(base.join("range_summary.txt")).map_err(|e| e.to_string())?;
        let (no_ra, ra) = coverage_pair(&summary).ok_or("no coverage line in summary")?;
        ensure(ra >= no_ra, || format!("{name}: range-aligned coverage {ra} below {no_ra}"))?;
        lines.push(format!("{name}: coverage N=1 {no_ra:.4}, range-aligned {ra:.4}"));
    }
    Ok(lines.join("; "))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let pipeline: &[&[&str]] = &[
        &["gen-data", "--dataset", "digits", "--samples", "400", "--seed", "3", "--out", "data"],
        &["--data", "data", "--arch", "cnn", "--epochs", "3", "--seed", "3", "--test-samples", "100", "train", "--out", "train"],
        &["--data", "data", "--test-samples", "100", "lower", "--checkpoint", "train/checkpoint", "--out", "lower"],
        &["--data", "data", "--test-samples", "100", "infer", "--checkpoint", "lower/checkpoint", "--out", "infer"],
        &["--data", "data", "--test-samples", "100", "verify", "--trained", "train/checkpoint", "--lowered", "lower/checkpoint", "--out", "verify"],
        &["--data", "data", "--test-samples", "100", "energy", "--trained", "train/checkpoint", "--lowered", "lower/checkpoint", "--out", "energy"],
        &["--data", "data", "--test-samples", "100", "range-report", "--checkpoint", "train/checkpoint", "--out", "range"],
        &["--epochs", "4", "range-report", "--paired", "--out", "paired"],
        &["--epochs", "3", "grad-report", "--out", "grads"],
        &["--neuron", "clip", "--d", "2", "--epochs", "5", "train", "--out", "ann"],
        &["lower", "--checkpoint", "ann/checkpoint", "--out", "ann_lower"],
    ];
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    for args in pipeline {
        let sa = ibra(a.path(), args)?;
        let sb = ibra(b.path(), args)?;
        ensure(sa == sb, || format!("stdout of `ibra {}` differs", args.join(" ")))?;
    }
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    ensure(fa == fb, || format!("file sets differ: {fa:?} vs {fb:?}"))?;
    for f in &fa {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        ensure(x == y, || format!("{} differs between repeated runs", f.display()))?;
    }
    Ok(format!("{} commands repeated, {} output files byte-identical", pipeline.len(), fa.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("bit-plane round trip", bit_round_trip),
        ("lowering equivalence", lowering_equivalence),
        ("accumulate-only audit", accumulate_only_audit),
        ("surrogate gradient", surrogate_gradient),
        ("energy accounting oracle", energy_oracle),
        ("efficiency ratio arithmetic", ratio_arithmetic),
        ("desk-scale training", desk_training),
        ("activation-to-spike conversion", conversion),
        ("range coverage diagnostic", range_coverage),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
