mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qgbdt::bench::{histogram_benchmark, parse_arms};
use qgbdt::booster::{TrainOutput, TrainReport};
use qgbdt::dataset::{bin_dataset, BinnedDataset, RawDataset};
use qgbdt::distsim::{comm_report, train_distributed_sim};
use qgbdt::loss::compute_gradients;
use qgbdt::theory::{empirical_bound_check, gamma_cdf, write_bound_csv, write_gamma_csv, BoundFixture};
use qgbdt::{train_raw, Metric, Model};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "qgbdt",
    version,
    about = "Gradient boosting with low-bit quantized gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Training data (CSV or LibSVM); overrides the `data` config key.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it with a metrics report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Validation data; overrides the `valid` config key.
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Model output path.
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSON path; defaults to the model path with `.metrics.json`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Write one prediction per input row.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emit raw scores instead of probabilities for classification.
        #[arg(long)]
        raw_score: bool,
    },
    /// Score a model on labelled data.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
        /// `rmse` or `auc`; defaults to the objective's metric.
        #[arg(long)]
        metric: Option<String>,
    },
    /// Train several quantization arms with a shared seed and compare them.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Comma-separated arms, e.g. `fp32,3-bit-sr-refit,2-bit-rn-norefit`.
        #[arg(long)]
        arms: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time packed-integer against f64 histogram construction on synthetic bins.
    BenchHist {
        #[arg(long, default_value_t = 1_000_000)]
        rows: usize,
        #[arg(long, default_value_t = 50)]
        features: usize,
        #[arg(long, default_value_t = 2)]
        bits: u8,
        #[arg(long, default_value_t = 64)]
        partitions: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate data-parallel training and report histogram traffic.
    Distsim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: usize,
        /// Directory for `comm.csv`, `metrics.json` and `model.json`.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Record per-split γ̂ during training and check the gain-error bound.
    TheoryReport {
        #[command(flatten)]
        common: Common,
        /// Directory for `gamma.csv`, `gamma_cdf.csv` and `bound.csv`.
        #[arg(long)]
        out_dir: PathBuf,
        /// Bit widths for the bound check.
        #[arg(long, value_delimiter = ',', default_value = "2,3")]
        bits: Vec<u8>,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// Monte-Carlo trials per bit width; 0 skips the bound check.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Feature whose bins supply the candidate splits of the bound check.
        #[arg(long, default_value_t = 0)]
        feature: usize,
    },
}

#[derive(Serialize)]
struct IterationMetrics {
    iter: usize,
    train_metric: Option<f64>,
    valid_metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hist_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    total_seconds: Option<f64>,
}

#[derive(Serialize)]
struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    arm: Option<String>,
    metric: &'static str,
    iterations: Vec<IterationMetrics>,
    best_iteration: Option<usize>,
    best_metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hist_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    total_seconds: Option<f64>,
}

impl Metrics {
    fn new(model: &Model, report: Option<&TrainReport>, arm: Option<String>) -> Self {
        let log = &model.log;
        let iterations = log
            .iterations
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let timing = report.and_then(|r| r.timings.get(i));
                IterationMetrics {
                    iter: it.iter,
                    train_metric: it.train_metric,
                    valid_metric: it.valid_metric,
                    hist_seconds: timing.map(|t| t.hist_seconds),
                    total_seconds: timing.map(|t| t.total_seconds),
                }
            })
            .collect();
        Self {
            arm,
            metric: log.metric.name(),
            iterations,
            best_iteration: log.best_iteration,
            best_metric: log.best_metric,
            hist_seconds: report.map(TrainReport::hist_seconds),
            total_seconds: report.map(TrainReport::total_seconds),
        }
    }
}

/// Writes through a sibling temp file so a failed run never leaves a
/// truncated artifact behind.
fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

struct Loaded {
    cfg: RunConfig,
    train: RawDataset,
    valid: Option<RawDataset>,
}

fn load_inputs(common: &Common, valid_flag: Option<&Path>) -> Result<Loaded> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(d) = &common.data {
        cfg.data.data = Some(d.clone());
    }
    if let Some(v) = valid_flag {
        cfg.data.valid = Some(v.to_path_buf());
    }
    let Some(path) = cfg.data.data.clone() else {
        bail!("no training data: pass --data or set `data` in the config");
    };
    let train = cfg.load_dataset(&path)?;
    let valid = match cfg.data.valid.clone() {
        Some(p) => Some(cfg.load_dataset(&p)?),
        None => None,
    };
    Ok(Loaded { cfg, train, valid })
}

fn cmd_train(common: &Common, valid: Option<&Path>, out: &Path, metrics: Option<&Path>) -> Result<()> {
    let input = load_inputs(common, valid)?;
    let TrainOutput { model, report } = train_raw(&input.train, input.valid.as_ref(), &input.cfg.train)?;
    let metrics_path = metrics.map_or_else(|| out.with_extension("metrics.json"), Path::to_path_buf);
    write_file(out, model.to_json()?.as_bytes())?;
    write_json(&metrics_path, &Metrics::new(&model, Some(&report), None))?;
    eprintln!(
        "trained {} trees in {:.3}s; model {}, metrics {}",
        model.num_trees(),
        report.total_seconds(),
        out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn predictions_text(values: &[f64]) -> String {
    let mut text = String::with_capacity(values.len() * 20);
    for v in values {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    text
}

fn load_eval_data(common: &Common) -> Result<RawDataset> {
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let path = common
        .data
        .clone()
        .or(cfg.data.data.clone())
        .context("no input data: pass --data or set `data` in the config")?;
    cfg.load_dataset(&path)
}

fn cmd_predict(model: &Path, common: &Common, out: Option<&Path>, raw_score: bool) -> Result<()> {
    let model = Model::load(model)?;
    let data = load_eval_data(common)?;
    let preds = if raw_score {
        model.predict(&data)?
    } else {
        model.predict_transformed(&data)?
    };
    let text = predictions_text(&preds);
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct EvalResult {
    metric: &'static str,
    value: f64,
    rows: usize,
}

fn cmd_eval(model: &Path, common: &Common, metric: Option<&str>) -> Result<()> {
    let model = Model::load(model)?;
    let data = load_eval_data(common)?;
    let metric = match metric {
        Some(m) => Metric::parse(m).with_context(|| format!("unknown metric {m:?}; expected rmse or auc"))?,
        None => model.objective.default_metric(),
    };
    let value = model.evaluate(&data, metric)?;
    let result = EvalResult {
        metric: metric.name(),
        value,
        rows: data.num_rows(),
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    arms: Vec<Metrics>,
}

fn cmd_bench(common: &Common, valid: Option<&Path>, arms: &str, out: &Path) -> Result<()> {
    let arms = parse_arms(arms)?;
    if arms.is_empty() {
        bail!("--arms lists no arms");
    }
    let input = load_inputs(common, valid)?;
    let mut entries = Vec::with_capacity(arms.len());
    for arm in &arms {
        let config = arm.apply(&input.cfg.train);
        let TrainOutput { model, report } = train_raw(&input.train, input.valid.as_ref(), &config)?;
        eprintln!(
            "{}: best {} {:?} in {:.3}s (histograms {:.3}s)",
            arm.name(),
            model.log.metric.name(),
            model.log.best_metric,
            report.total_seconds(),
            report.hist_seconds()
        );
        entries.push(Metrics::new(&model, Some(&report), Some(arm.name())));
    }
    write_json(out, &BenchReport { arms: entries })
}

fn cmd_bench_hist(
    rows: usize,
    features: usize,
    bits: u8,
    partitions: usize,
    repeats: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let result = histogram_benchmark(rows, features, bits, partitions, repeats, seed)?;
    let text = serde_json::to_string_pretty(&result)? + "\n";
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn bin_inputs(input: &Loaded) -> Result<(BinnedDataset, Option<BinnedDataset>)> {
    let train = bin_dataset(&input.train, input.cfg.train.max_bin)?;
    let valid = match &input.valid {
        Some(v) => Some(BinnedDataset::with_bounds(v, train.upper_bounds().to_vec())?),
        None => None,
    };
    Ok((train, valid))
}

fn cmd_distsim(common: &Common, workers: usize, out_dir: &Path) -> Result<()> {
    let input = load_inputs(common, None)?;
    let (train, valid) = bin_inputs(&input)?;
    let (out, stats) = train_distributed_sim(&train, valid.as_ref(), &input.cfg.train, workers, None)?;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("comm.csv"), &csv_bytes(|b| comm_report(&stats, b))?)?;
    // Timings vary run to run, so they stay out of this report.
    write_json(&out_dir.join("metrics.json"), &Metrics::new(&out.model, None, None))?;
    write_file(&out_dir.join("model.json"), out.model.to_json()?.as_bytes())?;
    let (q, f32b, f64b) = (stats.total_bytes(), stats.total_fp32_bytes(), stats.total_fp64_bytes());
    let ratio = |b: u64| if b == 0 { f64::NAN } else { q as f64 / b as f64 };
    eprintln!(
        "{workers} workers, {} reductions: {q} bytes ({:.3} of f32 bins, {:.3} of f64 bins)",
        stats.total_reductions(),
        ratio(f32b),
        ratio(f64b)
    );
    Ok(())
}

const CDF_POINTS: usize = 101;

fn cmd_theory_report(
    common: &Common,
    out_dir: &Path,
    bits: &[u8],
    delta: f64,
    trials: usize,
    feature: usize,
) -> Result<()> {
    let mut input = load_inputs(common, None)?;
    input.cfg.train.record_theory = true;
    let (train, _) = bin_inputs(&input)?;
    if feature >= train.num_features() {
        bail!("--feature {feature} out of range for {} features", train.num_features());
    }
    let model = qgbdt::train(&train, &input.cfg.train)?;
    let records = &model.log.gamma;
    ensure_dir(out_dir)?;
    write_file(&out_dir.join("gamma.csv"), &csv_bytes(|b| write_gamma_csv(records, b))?)?;

    let points: Vec<f64> = (0..CDF_POINTS)
        .map(|i| 0.5 * i as f64 / (CDF_POINTS - 1) as f64)
        .collect();
    let cdf = gamma_cdf(records, &points);
    let mut text = String::from("gamma,fraction_at_most\n");
    for (p, f) in points.iter().zip(&cdf) {
        text.push_str(&format!("{p},{f}\n"));
    }
    write_file(&out_dir.join("gamma_cdf.csv"), text.as_bytes())?;

    let above = records.iter().filter(|r| r.gamma_hat > 0.05).count();
    eprintln!(
        "{} splits recorded; {:.1}% have gamma_hat > 0.05",
        records.len(),
        if records.is_empty() {
            0.0
        } else {
            100.0 * above as f64 / records.len() as f64
        }
    );

    if trials > 0 {
        // The root leaf at the initial score: every row shares one hessian.
        let objective = input.cfg.train.objective;
        let labels = train.labels();
        let init = objective.init_score(labels);
        let grads = compute_gradients(objective, &vec![init; labels.len()], labels)?;
        let fixture = BoundFixture {
            hessian: grads.hess[0],
            grads: grads.grad,
            bins: (0..train.num_rows()).map(|r| train.bin(r, feature)).collect(),
        };
        let mut checks = Vec::with_capacity(bits.len());
        for &b in bits {
            let check = empirical_bound_check(&fixture, b, delta, trials, input.cfg.train.seed)?;
            eprintln!(
                "B={b}: {}/{trials} trials above the bound {:.4} (largest relative error {:.5})",
                check.violations, check.bound, check.max_observed
            );
            checks.push(check);
        }
        write_file(&out_dir.join("bound.csv"), &csv_bytes(|b| write_bound_csv(&checks, b))?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train {
            common,
            valid,
            out,
            metrics,
        } => cmd_train(common, valid.as_deref(), out, metrics.as_deref()),
        Command::Predict {
            model,
            common,
            out,
            raw_score,
        } => cmd_predict(model, common, out.as_deref(), *raw_score),
        Command::Eval { model, common, metric } => cmd_eval(model, common, metric.as_deref()),
        Command::Bench {
            common,
            valid,
            arms,
            out,
        } => cmd_bench(common, valid.as_deref(), arms, out),
        Command::BenchHist {
            rows,
            features,
            bits,
            partitions,
            repeats,
            seed,
            out,
        } => cmd_bench_hist(*rows, *features, *bits, *partitions, *repeats, *seed, out.as_deref()),
        Command::Distsim {
            common,
            workers,
            out_dir,
        } => cmd_distsim(common, *workers, out_dir),
        Command::TheoryReport {
            common,
            out_dir,
            bits,
            delta,
            trials,
            feature,
        } => cmd_theory_report(common, out_dir, bits, *delta, *trials, *feature),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
