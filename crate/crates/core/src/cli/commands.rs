use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::energy::{compare_modes, count_ops, ledger_csv, report_text};
use crate::lowering::{audit, convert_ann, lower_graph, run_lowered, verify_equivalence, CountRule};
use crate::network::{
    argmax_rows, evaluate, load_checkpoint, save_checkpoint, train_epoch, Activation, Dataset, EpochMetrics, Generator,
    GraphMode, Layer, LayerGraph, NetworkError,
};
use crate::tensor::{OptimError, Tensor};

use super::config::{NeuronChoice, RunConfig, RESOLVED_CONFIG_FILE};
use super::reports::{feature_stats, gradient_probe, range_coverage, standardize, RangeCoverageReport};
use super::{CliError, Command};

const EVAL_BATCH: usize = 256;
const CALIBRATION_SAMPLES: usize = 512;

pub(super) fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<String, CliError> {
    match cmd {
        Command::GenData { out } => gen_data(cfg, out),
        Command::Train { out } => train(cfg, out),
        Command::Lower { checkpoint, out } => lower(cfg, checkpoint, out),
        Command::Infer { checkpoint, out } => infer(cfg, checkpoint, out),
        Command::Verify { trained, lowered, out } => verify(cfg, trained, lowered, out),
        Command::Energy { trained, lowered, out } => energy(cfg, trained, lowered, out),
        Command::RangeReport {
            checkpoint,
            paired,
            ceiling,
            out,
        } => match (checkpoint, paired) {
            (_, true) => range_paired(cfg, *ceiling, out),
            (Some(c), false) => range_single(cfg, c, out),
            (None, false) => Err(CliError::Usage("range-report needs --checkpoint or --paired".into())),
        },
        Command::GradReport { out } => grad_report(cfg, out),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `out` and writes the resolved config into it.
fn prepare_out(out: &Path, cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write(out, RESOLVED_CONFIG_FILE, &cfg.dump(command))
}

fn write(out: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = out.join(name);
    std::fs::write(&path, contents).map_err(io_err(&path))
}

fn raw_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data {
        Some(dir) => Ok(Dataset::load(dir, None)?),
        None => {
            let g: Generator = cfg.dataset.parse()?;
            Ok(Dataset::generate(g, cfg.samples, cfg.seed))
        }
    }
}

/// Training and held-out splits, standardized with training statistics
/// when configured.
fn splits(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = raw_dataset(cfg)?.split(cfg.test_samples)?;
    if train.is_empty() {
        return Err(CliError::Usage("no training samples left after the held-out split".into()));
    }
    if cfg.standardize {
        let (m, s) = feature_stats(&train);
        Ok((standardize(&train, m, s), standardize(&test, m, s)))
    } else {
        Ok((train, test))
    }
}

/// Reshapes samples to `shape` when the sizes agree.
fn fit(data: Dataset, shape: &[usize]) -> Result<Dataset, CliError> {
    let per: usize = shape.iter().product();
    if data.sample_shape().iter().product::<usize>() != per {
        return Err(CliError::Usage(format!(
            "samples of shape {:?} do not fit network input {shape:?}",
            data.sample_shape()
        )));
    }
    let mut s = vec![data.len()];
    s.extend_from_slice(shape);
    Ok(Dataset {
        features: data.features.reshape(&s)?,
        ..data
    })
}

fn fitted_splits(cfg: &RunConfig, shape: &[usize]) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = splits(cfg)?;
    Ok((fit(train, shape)?, fit(test, shape)?))
}

/// Held-out features, or the training ones when nothing is held out.
fn corpus(train: &Dataset, test: &Dataset) -> Tensor {
    if test.is_empty() { &train.features } else { &test.features }.to_f64()
}

fn load_training(path: &Path) -> Result<LayerGraph, CliError> {
    let g = load_checkpoint(path)?;
    if g.mode != GraphMode::Training {
        return Err(CliError::Usage(format!("{} is not a training-mode checkpoint", path.display())));
    }
    Ok(g)
}

fn has_activations(g: &LayerGraph) -> bool {
    g.layers
        .iter()
        .any(|l| matches!(l, Layer::Activation(a) if *a != Activation::Identity))
}

/// The spiking network behind a checkpoint: itself, or its conversion when
/// it is a conventional network.
fn spiking(graph: LayerGraph, cfg: &RunConfig, train: &Dataset) -> Result<(LayerGraph, bool), CliError> {
    if !has_activations(&graph) {
        return Ok((graph, false));
    }
    let take = train.len().min(CALIBRATION_SAMPLES);
    let calib = train.features.slice_rows(0, take)?.to_f64();
    Ok((convert_ann(&graph, cfg.n, Some(&calib))?, true))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let g: Generator = cfg.dataset.parse()?;
    let d = Dataset::generate(g, cfg.samples, cfg.seed);
    prepare_out(out, cfg, "gen-data")?;
    d.save(out)?;
    Ok(format!(
        "{g}: {} samples of shape {:?}, class counts {:?}\n",
        d.len(),
        d.sample_shape(),
        d.class_counts()
    ))
}

struct EpochRow {
    epoch: usize,
    loss: f64,
    train: f64,
    test: Option<(f64, f64)>,
}

#[derive(Default)]
struct TrainLog {
    rows: Vec<EpochRow>,
    grads: Vec<EpochMetrics>,
    failure: Option<String>,
}

impl TrainLog {
    fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_accuracy,test_loss,test_accuracy\n");
        for r in &self.rows {
            let (tl, ta) = r.test.map_or((String::new(), String::new()), |(l, a)| (l.to_string(), a.to_string()));
            let _ = writeln!(s, "{},{},{},{tl},{ta}", r.epoch, r.loss, r.train);
        }
        s
    }

    fn grads_csv(&self, graph: &LayerGraph) -> String {
        let mut s = String::from("epoch,layer,kind,max_abs_grad,mean_grad_norm,finite\n");
        for m in &self.grads {
            for (l, g) in &m.grads {
                let finite = g.max_abs.is_finite() && g.norm.is_finite();
                let _ = writeln!(
                    s,
                    "{},{l},{},{},{},{finite}",
                    m.epoch,
                    graph.layers[*l].kind(),
                    g.max_abs,
                    g.norm
                );
            }
        }
        s
    }
}

/// Trains for `cfg.epochs`, stopping at the first non-finite event, which
/// is recorded rather than returned.
fn fit_graph(cfg: &RunConfig, graph: &mut LayerGraph, train: &Dataset, test: &Dataset) -> Result<TrainLog, CliError> {
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let m = match train_epoch(graph, train, opt.as_mut(), cfg.batch_size, &mut rng, epoch) {
            Ok(m) => m,
            Err(e @ NetworkError::NonFinite { .. })
            | Err(e @ NetworkError::Optim(OptimError::NonFiniteGradient { .. })) => {
                log.failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let tr = evaluate(graph, train, EVAL_BATCH)?;
        let te = if test.is_empty() {
            None
        } else {
            let e = evaluate(graph, test, EVAL_BATCH)?;
            Some((e.loss, e.accuracy))
        };
        log.rows.push(EpochRow {
            epoch,
            loss: m.loss,
            train: tr.accuracy,
            test: te,
        });
        log.grads.push(m);
    }
    Ok(log)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let (train, test) = splits(cfg)?;
    let mut graph = cfg.build_graph(train.sample_shape(), train.classes)?;
    let (train, test) = (fit(train, &graph.input_shape)?, fit(test, &graph.input_shape)?);
    prepare_out(out, cfg, "train")?;
    let log = fit_graph(cfg, &mut graph, &train, &test)?;
    write(out, "metrics.csv", &log.metrics_csv())?;
    write(out, "grads.csv", &log.grads_csv(&graph))?;
    if let Some(f) = log.failure {
        write(out, "nonfinite.txt", &f)?;
        return Err(CliError::NonFinite(f));
    }
    save_checkpoint(&graph, out.join("checkpoint"))?;
    let mut s = String::new();
    if let Some(r) = log.rows.last() {
        let _ = write!(s, "epoch {}: loss {:.6}, train accuracy {:.4}", r.epoch, r.loss, r.train);
        if let Some((_, a)) = r.test {
            let _ = write!(s, ", test accuracy {a:.4}");
        }
        s.push('\n');
    }
    write(out, "summary.txt", &s)?;
    Ok(s)
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

/// Equivalence, structural audit and ledger audit as one text report.
fn check(trained: &LayerGraph, lowered: &LayerGraph, corpus: &Tensor, tol: f64) -> Result<(String, bool), CliError> {
    let eq = verify_equivalence(trained, lowered, corpus, tol)?;
    let au = audit(lowered);
    let ledger = count_ops(lowered, corpus, CountRule::Native)?;
    let ledger_findings = au.check_ledger(&ledger);
    let mut s = eq.to_string();
    let _ = writeln!(s, "audit input layers: {:?}", au.input_layers);
    let _ = writeln!(s, "audit accumulate-only layers: {:?}", au.accumulate_layers);
    for f in au.findings.iter().chain(&ledger_findings) {
        let _ = writeln!(s, "audit finding: {f}");
    }
    let ok = eq.pass && au.passed() && ledger_findings.is_empty();
    let _ = writeln!(s, "audit: {}", if au.passed() && ledger_findings.is_empty() { "pass" } else { "FAIL" });
    Ok((s, ok))
}

fn lower(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<String, CliError> {
    let dst = out.join("checkpoint");
    if same_path(checkpoint, &dst) {
        return Err(CliError::Usage("refusing to overwrite the input checkpoint".into()));
    }
    let source = load_training(checkpoint)?;
    let (train, test) = fitted_splits(cfg, &source.input_shape)?;
    let (snn, converted) = spiking(source, cfg, &train)?;
    let lowered = lower_graph(&snn)?;
    prepare_out(out, cfg, "lower")?;
    if converted {
        save_checkpoint(&snn, out.join("converted"))?;
    }
    save_checkpoint(&lowered, &dst)?;
    let (report, ok) = check(&snn, &lowered, &corpus(&train, &test), cfg.tol)?;
    write(out, "equivalence.txt", &report)?;
    if !ok {
        return Err(CliError::Verification(format!("see {}", out.join("equivalence.txt").display())));
    }
    Ok(report)
}

fn verify(cfg: &RunConfig, trained: &Path, lowered: &Path, out: &Path) -> Result<String, CliError> {
    let t = load_training(trained)?;
    let l = load_checkpoint(lowered)?;
    let (train, test) = fitted_splits(cfg, &t.input_shape)?;
    let (t, _) = spiking(t, cfg, &train)?;
    prepare_out(out, cfg, "verify")?;
    let (report, ok) = check(&t, &l, &corpus(&train, &test), cfg.tol)?;
    write(out, "equivalence.txt", &report)?;
    if !ok {
        return Err(CliError::Verification(format!("see {}", out.join("equivalence.txt").display())));
    }
    Ok(report)
}

fn infer(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<String, CliError> {
    let g = load_checkpoint(checkpoint)?;
    let (train, test) = fitted_splits(cfg, &g.input_shape)?;
    let data = if test.is_empty() { train } else { test };
    let classes = g.output_shape()?.iter().product::<usize>();
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        let readout = match g.mode {
            GraphMode::Training => g.forward(&x)?,
            GraphMode::Lowered => run_lowered(&g, &x, CountRule::Native, false)?.readout,
        };
        preds.extend(argmax_rows(readout.as_f64()?, classes));
    }
    prepare_out(out, cfg, "infer")?;
    let mut csv = String::from("sample,label,prediction\n");
    for (i, (p, l)) in preds.iter().zip(&data.labels).enumerate() {
        let _ = writeln!(csv, "{i},{l},{p}");
    }
    write(out, "predictions.csv", &csv)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    let s = format!(
        "samples: {}\naccuracy: {:.4}\n",
        data.len(),
        correct as f64 / data.len().max(1) as f64
    );
    write(out, "summary.txt", &s)?;
    Ok(s)
}

fn energy(cfg: &RunConfig, trained: &Path, lowered: &Path, out: &Path) -> Result<String, CliError> {
    let model = cfg.energy_model()?;
    let t = load_training(trained)?;
    let l = load_checkpoint(lowered)?;
    let (train, test) = fitted_splits(cfg, &t.input_shape)?;
    let (t, _) = spiking(t, cfg, &train)?;
    let x = corpus(&train, &test);
    let cmp = compare_modes(&t, &l, &x, &model, cfg.lif_timesteps)?;
    let ledger = count_ops(&l, &x, CountRule::Popcount)?;
    prepare_out(out, cfg, "energy")?;
    let mut text = cmp.to_string();
    text.push_str("\nbit-plane execution per layer:\n");
    text.push_str(&report_text(&ledger, &model));
    write(out, "energy.txt", &text)?;
    write(out, "energy.csv", &cmp.to_csv()?)?;
    write(out, "ledger.csv", &ledger_csv(&ledger, &model)?)?;
    Ok(text)
}

fn normalization_note(cfg: &RunConfig) -> &'static str {
    if cfg.standardize {
        "inputs: standardized with the training split's global mean and standard deviation\n"
    } else {
        "inputs: raw generator or file values\n"
    }
}

fn range_single(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<String, CliError> {
    let g = load_training(checkpoint)?;
    let (train, _) = fitted_splits(cfg, &g.input_shape)?;
    let r = range_coverage(&g, &train, EVAL_BATCH, "checkpoint")?;
    prepare_out(out, cfg, "range-report")?;
    write(out, "range.csv", &r.histogram_csv())?;
    let text = format!("{}{r}", normalization_note(cfg));
    write(out, "range.txt", &text)?;
    Ok(text)
}

fn range_paired(cfg: &RunConfig, ceiling: u32, out: &Path) -> Result<String, CliError> {
    if ceiling == 0 {
        return Err(CliError::Usage("ceiling must be >= 1".into()));
    }
    let n = if cfg.n > 1 { cfg.n } else { 100 };
    let runs = [
        ("no-ra", 1, ceiling as f64),
        ("ra", n, ceiling as f64 / n as f64),
    ];
    prepare_out(out, cfg, "range-report")?;
    let (train, test) = splits(cfg)?;
    let mut reports: Vec<(RangeCoverageReport, Option<f64>)> = Vec::new();
    for (label, n, d) in runs {
        let run_cfg = RunConfig {
            neuron: NeuronChoice::Ibra,
            n,
            d,
            ..cfg.clone()
        };
        let mut g = run_cfg.build_graph(train.sample_shape(), train.classes)?;
        let tr = fit(train.clone(), &g.input_shape)?;
        let te = fit(test.clone(), &g.input_shape)?;
        let log = fit_graph(&run_cfg, &mut g, &tr, &te)?;
        if let Some(f) = log.failure {
            return Err(CliError::NonFinite(format!("{label} run: {f}")));
        }
        let r = range_coverage(&g, &tr, EVAL_BATCH, &format!("{label} (N = {n}, D = {d})"))?;
        write(out, &format!("range_{label}.csv"), &r.histogram_csv())?;
        write(out, &format!("range_{label}.txt"), &r.to_string())?;
        write(out, &format!("metrics_{label}.csv"), &log.metrics_csv())?;
        reports.push((r, log.rows.last().and_then(|r| r.test.map(|t| t.1))));
    }
    let mut s = String::from(normalization_note(cfg));
    let _ = writeln!(s, "shared ceiling D_N = {ceiling}");
    for (r, acc) in &reports {
        s.push_str(&r.to_string());
        if let Some(a) = acc {
            let _ = writeln!(s, "final test accuracy: {a:.4}");
        }
    }
    let (a, b) = (reports[0].0.coverage(), reports[1].0.coverage());
    let _ = writeln!(s, "coverage no-ra {a:.4}, ra {b:.4}: ra >= no-ra: {}", if b >= a { "yes" } else { "no" });
    write(out, "range_summary.txt", &s)?;
    Ok(s)
}

fn grad_report(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let (train, test) = splits(cfg)?;
    let mut graph = cfg.build_graph(train.sample_shape(), train.classes)?;
    let (train, test) = (fit(train, &graph.input_shape)?, fit(test, &graph.input_shape)?);
    prepare_out(out, cfg, "grad-report")?;
    let log = fit_graph(cfg, &mut graph, &train, &test)?;
    write(out, "grads.csv", &log.grads_csv(&graph))?;

    let (d_n, n) = match cfg.unit()? {
        crate::network::Unit::Neuron(c) => (c.d_n(), c.n),
        crate::network::Unit::Activation(_) => ((cfg.d * cfg.n as f64).round() as u32, cfg.n),
    };
    let probe = gradient_probe(d_n, n, cfg.seed)?;
    let unit = probe.iter().find(|r| r.case == "unit").map_or(1.0, |r| r.max_abs_grad);
    let mut csv = String::from("case,activation,max_abs_grad,ratio_to_unit\n");
    for r in &probe {
        let _ = writeln!(csv, "{},{},{},{}", r.case, r.activation, r.max_abs_grad, r.max_abs_grad / unit);
    }
    write(out, "probe.csv", &csv)?;

    let mut s = String::new();
    let nonfinite = log
        .grads
        .iter()
        .flat_map(|m| m.grads.iter().map(move |(l, g)| (m.epoch, *l, g)))
        .filter(|(_, _, g)| !(g.max_abs.is_finite() && g.norm.is_finite()))
        .count();
    let _ = writeln!(s, "epochs recorded: {}", log.grads.len());
    let _ = writeln!(s, "non-finite gradient records: {nonfinite}");
    if let Some(f) = &log.failure {
        let _ = writeln!(s, "training stopped: {f}");
    }
    for r in &probe {
        let _ = writeln!(s, "probe {:<18} activation {:>10} max |dL/dW| {:.6e}", r.case, r.activation, r.max_abs_grad);
    }
    write(out, "summary.txt", &s)?;
    Ok(s)
}
