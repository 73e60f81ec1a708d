//! The boosting loop, trained models, and model files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{bin_dataset, BinnedDataset, RawDataset, DEFAULT_MAX_BIN, MAX_BIN_LIMIT};
use crate::error::{Error, Result};
use crate::histogram::{
    select_bitwidth, BinLayout, FloatHistogram, FloatSource, HistogramSource, LocalMerge, PackedHistogram,
    QuantizedSource, Reducer, RowPartition, WidthUsage,
};
use crate::loss::{compute_gradients, evaluate, GradientBuffer, Metric, Objective};
use crate::quantize::{
    compute_scales, quantize_gradients, CounterRng, HalfWidth, PackedWord, QuantizedGradients, Rounding,
};
use crate::theory::{record_split, LeafTheoryRecord};
use crate::tree::{grow_tree, refit_leaf_values, GainScale, GrowConfig, SplitConstraints, SplitEvent, Tree};

pub const MODEL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub num_iterations: usize,
    pub learning_rate: f64,
    pub num_leaves: usize,
    pub max_bin: usize,
    /// Gradient bits; 0 trains on full-precision gradients.
    pub grad_bits: u8,
    pub rounding: Rounding,
    pub refit: bool,
    pub min_data_in_leaf: usize,
    pub min_child_weight: f64,
    pub num_partitions: usize,
    pub seed: u64,
    pub histogram_subtraction: bool,
    pub record_theory: bool,
    /// Worker thread cap; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::SquaredError,
            num_iterations: 500,
            learning_rate: 0.1,
            num_leaves: 255,
            max_bin: DEFAULT_MAX_BIN,
            grad_bits: 3,
            rounding: Rounding::Stochastic,
            refit: true,
            min_data_in_leaf: 20,
            min_child_weight: 1e-3,
            num_partitions: 8,
            seed: 0,
            histogram_subtraction: true,
            record_theory: false,
            threads: None,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "objective",
    "num_iterations",
    "learning_rate",
    "num_leaves",
    "max_bin",
    "grad_bits",
    "rounding",
    "refit",
    "min_data_in_leaf",
    "min_child_weight",
    "num_partitions",
    "seed",
    "histogram_subtraction",
    "record_theory",
    "threads",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Sets one field from its textual form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "objective" => {
                self.objective = Objective::parse(value)
                    .ok_or_else(|| Error::Config(format!("objective: unknown objective {value:?}")))?
            }
            "num_iterations" => self.num_iterations = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "num_leaves" => self.num_leaves = parse_num(key, value)?,
            "max_bin" => self.max_bin = parse_num(key, value)?,
            "grad_bits" => {
                self.grad_bits = value
                    .parse()
                    .map_err(|_| Error::Config(format!("grad_bits must be one of {{0,2,3,4,5}}, got {value:?}")))?
            }
            "rounding" => {
                self.rounding = Rounding::parse(value)
                    .ok_or_else(|| Error::Config(format!("rounding must be sr or rn, got {value:?}")))?
            }
            "refit" => self.refit = parse_flag(key, value)?,
            "min_data_in_leaf" => self.min_data_in_leaf = parse_num(key, value)?,
            "min_child_weight" => self.min_child_weight = parse_num(key, value)?,
            "num_partitions" => self.num_partitions = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "histogram_subtraction" => self.histogram_subtraction = parse_flag(key, value)?,
            "record_theory" => self.record_theory = parse_flag(key, value)?,
            "threads" => {
                let t: usize = parse_num(key, value)?;
                self.threads = (t > 0).then_some(t);
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.grad_bits, 0 | 2..=5) {
            return Err(Error::Config(format!(
                "grad_bits must be one of {{0,2,3,4,5}}, got {}",
                self.grad_bits
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.num_leaves == 0 {
            return Err(Error::Config("num_leaves must be at least 1".into()));
        }
        if !(2..=MAX_BIN_LIMIT).contains(&self.max_bin) {
            return Err(Error::Config(format!(
                "max_bin must be in [2, {MAX_BIN_LIMIT}], got {}",
                self.max_bin
            )));
        }
        if self.num_partitions == 0 {
            return Err(Error::Config("num_partitions must be at least 1".into()));
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return Err(Error::Config(format!(
                "min_child_weight must be non-negative, got {}",
                self.min_child_weight
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    fn grow_config(&self) -> GrowConfig {
        GrowConfig {
            num_leaves: self.num_leaves,
            constraints: SplitConstraints {
                min_data_in_leaf: self.min_data_in_leaf,
                min_child_weight: self.min_child_weight,
            },
            histogram_subtraction: self.histogram_subtraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub train_metric: Option<f64>,
    pub valid_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub metric: Metric,
    pub iterations: Vec<IterationLog>,
    /// Number of trees at the best validation (or training) metric.
    pub best_iteration: Option<usize>,
    pub best_metric: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gamma: Vec<LeafTheoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub version: u64,
    pub objective: Objective,
    pub init_score: f64,
    pub learning_rate: f64,
    pub num_features: usize,
    #[serde(with = "crate::json::real_table")]
    pub bin_upper_bounds: Vec<Vec<f64>>,
    pub trees: Vec<Tree>,
    pub log: TrainLog,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u64,
}

impl Model {
    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.num_features {
            return Err(Error::DimensionMismatch {
                expected: self.num_features,
                actual: row.len(),
            });
        }
        Ok(())
    }

    /// Raw score using the first `num_trees` trees.
    pub fn predict_row_upto(&self, row: &[f64], num_trees: usize) -> Result<f64> {
        self.check_row(row)?;
        let mut score = self.init_score;
        for tree in self.trees.iter().take(num_trees) {
            score += self.learning_rate * tree.leaves()[tree.leaf_index(row)].value;
        }
        Ok(score)
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        self.predict_row_upto(row, self.trees.len())
    }

    /// Raw scores for every row of `data`.
    pub fn predict(&self, data: &RawDataset) -> Result<Vec<f64>> {
        self.predict_upto(data, self.trees.len())
    }

    pub fn predict_upto(&self, data: &RawDataset, num_trees: usize) -> Result<Vec<f64>> {
        if data.num_features() != self.num_features {
            return Err(Error::DimensionMismatch {
                expected: self.num_features,
                actual: data.num_features(),
            });
        }
        (0..data.num_rows())
            .into_par_iter()
            .map(|i| self.predict_row_upto(data.row(i), num_trees))
            .collect()
    }

    /// Scores on the output scale (probabilities for logloss).
    pub fn predict_transformed(&self, data: &RawDataset) -> Result<Vec<f64>> {
        Ok(self
            .predict(data)?
            .into_iter()
            .map(|s| self.objective.transform(s))
            .collect())
    }

    pub fn evaluate(&self, data: &RawDataset, metric: Metric) -> Result<f64> {
        evaluate(metric, &self.predict_transformed(data)?, data.labels())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Model(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::Model(format!("malformed model: {e}")))?;
        if probe.version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion {
                found: probe.version,
                supported: MODEL_VERSION,
            });
        }
        let model: Model = serde_json::from_str(text).map_err(|e| Error::Model(format!("malformed model: {e}")))?;
        if model.bin_upper_bounds.len() != model.num_features {
            return Err(Error::Model("bin boundaries do not match the feature count".into()));
        }
        for tree in &model.trees {
            if tree.num_features() != model.num_features {
                return Err(Error::Model("tree feature count does not match the model".into()));
            }
            tree.validate()?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Model(e.to_string()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Model(m) => Error::Model(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Wall-clock breakdown of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct IterationTiming {
    pub hist_seconds: f64,
    pub total_seconds: f64,
}

/// Run statistics kept outside the model so model files stay reproducible.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub timings: Vec<IterationTiming>,
    pub width_usage: WidthUsage,
    pub total_width: Option<HalfWidth>,
}

impl TrainReport {
    pub fn hist_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.hist_seconds).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.total_seconds).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub report: TrainReport,
}

/// A total histogram as seen by observers.
pub enum HistogramView<'a> {
    Packed16(&'a PackedHistogram<u32>),
    Packed32(&'a PackedHistogram<u64>),
    Float(&'a FloatHistogram),
}

/// Read-only hooks into a training run.
pub trait TrainObserver: Send {
    fn on_gradients(&mut self, _iteration: usize, _grads: &GradientBuffer, _quantized: Option<&QuantizedGradients>) {}

    /// Called for every leaf histogram, built or derived by subtraction.
    fn on_histogram(&mut self, _iteration: usize, _rows: &[u32], _hist: HistogramView<'_>) {}
}

trait Viewable {
    fn view(&self) -> HistogramView<'_>;
}

impl Viewable for PackedHistogram<u32> {
    fn view(&self) -> HistogramView<'_> {
        HistogramView::Packed16(self)
    }
}

impl Viewable for PackedHistogram<u64> {
    fn view(&self) -> HistogramView<'_> {
        HistogramView::Packed32(self)
    }
}

impl Viewable for FloatHistogram {
    fn view(&self) -> HistogramView<'_> {
        HistogramView::Float(self)
    }
}

struct Observed<'o, 'd, S> {
    inner: S,
    observer: Option<&'o mut (dyn TrainObserver + 'd)>,
    iteration: usize,
}

impl<S> HistogramSource for Observed<'_, '_, S>
where
    S: HistogramSource,
    S::Hist: Viewable,
{
    type Hist = S::Hist;

    fn build(&mut self, rows: &[u32]) -> S::Hist {
        let h = self.inner.build(rows);
        if let Some(o) = self.observer.as_deref_mut() {
            o.on_histogram(self.iteration, rows, h.view());
        }
        h
    }

    fn subtract(&mut self, parent: &S::Hist, child: &S::Hist, rows: &[u32]) -> S::Hist {
        let h = self.inner.subtract(parent, child, rows);
        if let Some(o) = self.observer.as_deref_mut() {
            o.on_histogram(self.iteration, rows, h.view());
        }
        h
    }

    fn elapsed(&self) -> Duration {
        self.inner.elapsed()
    }
}

impl<R: Reducer + ?Sized> Reducer for &mut R {
    fn begin_iteration(&mut self, iteration: usize) {
        (**self).begin_iteration(iteration)
    }

    fn reduce_packed<P: PackedWord>(
        &mut self,
        layout: &Arc<BinLayout>,
        locals: Vec<PackedHistogram<P>>,
    ) -> PackedHistogram<P> {
        (**self).reduce_packed(layout, locals)
    }

    fn reduce_float(&mut self, layout: &Arc<BinLayout>, locals: Vec<FloatHistogram>) -> FloatHistogram {
        (**self).reduce_float(layout, locals)
    }
}

/// Trains with the default in-process histogram reduction.
pub fn train(data: &BinnedDataset, config: &TrainConfig) -> Result<Model> {
    Ok(train_with(data, None, config, &mut LocalMerge, None)?.model)
}

/// Bins `train_raw` with `config.max_bin`, bins `valid` with the same
/// boundaries, and trains.
pub fn train_raw(train_raw: &RawDataset, valid: Option<&RawDataset>, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let data = bin_dataset(train_raw, config.max_bin)?;
    let valid = valid
        .map(|v| BinnedDataset::with_bounds(v, data.upper_bounds().to_vec()))
        .transpose()?;
    train_with(&data, valid.as_ref(), config, &mut LocalMerge, None)
}

/// The full training loop with a pluggable histogram reduction and optional
/// observer. `valid` must be binned with the training boundaries.
pub fn train_with<R: Reducer + Send>(
    data: &BinnedDataset,
    valid: Option<&BinnedDataset>,
    config: &TrainConfig,
    reducer: &mut R,
    observer: Option<&mut dyn TrainObserver>,
) -> Result<TrainOutput> {
    config.validate()?;
    match config.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {t} threads: {e}")))?;
            pool.install(|| run(data, valid, config, reducer, observer))
        }
        None => run(data, valid, config, reducer, observer),
    }
}

fn run<R: Reducer>(
    data: &BinnedDataset,
    valid: Option<&BinnedDataset>,
    config: &TrainConfig,
    reducer: &mut R,
    mut observer: Option<&mut dyn TrainObserver>,
) -> Result<TrainOutput> {
    let n = data.num_rows();
    if n == 0 {
        return Err(Error::EmptyData("training set has no rows".into()));
    }
    if let Some(v) = valid {
        if v.num_features() != data.num_features() {
            return Err(Error::DimensionMismatch {
                expected: data.num_features(),
                actual: v.num_features(),
            });
        }
        config.objective.check_labels(v.labels())?;
    }
    let objective = config.objective;
    let labels = data.labels();
    objective.check_labels(labels)?;
    let metric = objective.default_metric();
    let init_score = objective.init_score(labels);
    let mut preds = vec![init_score; n];
    let mut valid_preds = valid.map(|v| vec![init_score; v.num_rows()]);

    let layout = Arc::new(BinLayout::for_dataset(data));
    let partition = RowPartition::contiguous(n, config.num_partitions);
    let rng = CounterRng::new(config.seed);
    let grow = config.grow_config();
    let bits = config.grad_bits;
    let constant_hessian = objective.constant_hessian().is_some();
    let total_width = (bits > 0).then(|| select_bitwidth(1, n, bits, constant_hessian, partition.num_parts()).total);

    let mut trees = Vec::with_capacity(config.num_iterations);
    let mut iterations = Vec::with_capacity(config.num_iterations);
    let mut gamma = Vec::new();
    let mut report = TrainReport {
        total_width,
        ..TrainReport::default()
    };
    let mut best: Option<(usize, f64)> = None;

    for it in 0..config.num_iterations {
        let started = Instant::now();
        reducer.begin_iteration(it);
        let grads = compute_gradients(objective, &preds, labels)?;
        let mut records: Vec<LeafTheoryRecord> = Vec::new();
        let mut record = |ev: SplitEvent<'_>| records.push(record_split(it, &ev, &grads));
        let theory: Option<&mut dyn FnMut(SplitEvent<'_>)> =
            if config.record_theory { Some(&mut record) } else { None };

        let (mut tree, hist_time) = if bits == 0 {
            if let Some(o) = observer.as_deref_mut() {
                o.on_gradients(it, &grads, None);
            }
            let mut src = Observed {
                inner: FloatSource::new(data, layout.clone(), &partition, &grads, &mut *reducer),
                observer: observer.as_deref_mut(),
                iteration: it,
            };
            let tree = grow_tree(data, &mut src, GainScale::FULL_PRECISION, &grow, theory);
            (tree, src.elapsed())
        } else {
            let scales = compute_scales(&grads, bits)?;
            let q = quantize_gradients(&grads, &scales, config.rounding, &rng, it as u64);
            if let Some(o) = observer.as_deref_mut() {
                o.on_gradients(it, &grads, Some(&q));
            }
            let scale = GainScale::quantized(&scales);
            let track_counts = !constant_hessian;
            let (tree, elapsed, usage) = match total_width {
                Some(HalfWidth::W16) | Some(HalfWidth::W8) => {
                    let mut src = Observed {
                        inner: QuantizedSource::<u32, _>::new(
                            data,
                            layout.clone(),
                            &partition,
                            &q,
                            track_counts,
                            &mut *reducer,
                        ),
                        observer: observer.as_deref_mut(),
                        iteration: it,
                    };
                    let tree = grow_tree(data, &mut src, scale, &grow, theory);
                    (tree, src.elapsed(), src.inner.width_usage())
                }
                _ => {
                    let mut src = Observed {
                        inner: QuantizedSource::<u64, _>::new(
                            data,
                            layout.clone(),
                            &partition,
                            &q,
                            track_counts,
                            &mut *reducer,
                        ),
                        observer: observer.as_deref_mut(),
                        iteration: it,
                    };
                    let tree = grow_tree(data, &mut src, scale, &grow, theory);
                    (tree, src.elapsed(), src.inner.width_usage())
                }
            };
            report.width_usage.w8 += usage.w8;
            report.width_usage.w16 += usage.w16;
            report.width_usage.w32 += usage.w32;
            (tree, elapsed)
        };
        if bits > 0 && config.refit {
            refit_leaf_values(&mut tree, &grads)?;
        }

        let lr = config.learning_rate;
        for (leaf, rows) in tree.leaves().iter().zip(tree.leaf_rows()) {
            let step = lr * leaf.value;
            for &r in rows {
                preds[r as usize] += step;
            }
        }
        if let (Some(v), Some(vp)) = (valid, valid_preds.as_mut()) {
            vp.par_iter_mut().enumerate().for_each(|(i, p)| {
                *p += lr * tree.leaves()[tree.leaf_index_binned(v, i)].value;
            });
        }

        let score = |p: &[f64], y: &[f64]| -> Option<f64> {
            let t: Vec<f64> = p.iter().map(|&s| objective.transform(s)).collect();
            evaluate(metric, &t, y).ok()
        };
        let train_metric = score(&preds, labels);
        let valid_metric = match (valid, &valid_preds) {
            (Some(v), Some(vp)) => score(vp, v.labels()),
            _ => None,
        };
        let tracked = if valid.is_some() { valid_metric } else { train_metric };
        if let Some(m) = tracked {
            if best.is_none_or(|(_, b)| metric.is_better(m, b)) {
                best = Some((it + 1, m));
            }
        }
        iterations.push(IterationLog {
            iter: it + 1,
            train_metric,
            valid_metric,
        });
        gamma.append(&mut records);
        trees.push(tree);
        report.timings.push(IterationTiming {
            hist_seconds: hist_time.as_secs_f64(),
            total_seconds: started.elapsed().as_secs_f64(),
        });
    }

    let model = Model {
        version: MODEL_VERSION,
        objective,
        init_score,
        learning_rate: config.learning_rate,
        num_features: data.num_features(),
        bin_upper_bounds: data.upper_bounds().to_vec(),
        trees,
        log: TrainLog {
            metric,
            iterations,
            best_iteration: best.map(|b| b.0),
            best_metric: best.map(|b| b.1),
            gamma,
        },
    };
    Ok(TrainOutput { model, report })
}

/// Raw scores the booster cached for its own training rows, recomputed from
/// the trees' recorded leaf membership.
pub fn training_scores(model: &Model, num_rows: usize) -> Result<Vec<f64>> {
    let mut preds = vec![model.init_score; num_rows];
    for tree in &model.trees {
        if !tree.has_leaf_rows() {
            return Err(Error::Model("trees carry no training rows".into()));
        }
        for (leaf, rows) in tree.leaves().iter().zip(tree.leaf_rows()) {
            let step = model.learning_rate * leaf.value;
            for &r in rows {
                preds[r as usize] += step;
            }
        }
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{friedman1, logistic};

    fn small_config() -> TrainConfig {
        TrainConfig {
            num_iterations: 20,
            num_leaves: 15,
            min_data_in_leaf: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_is_init_only() {
        let raw = friedman1(200, 1);
        let out = train_raw(
            &raw,
            None,
            &TrainConfig {
                num_iterations: 0,
                ..small_config()
            },
        )
        .unwrap();
        let mean = raw.labels().iter().sum::<f64>() / 200.0;
        assert_eq!(out.model.num_trees(), 0);
        assert!(out.model.predict(&raw).unwrap().iter().all(|&p| p == mean));
    }

    #[test]
    fn one_single_leaf_round_predicts_mean() {
        let raw = friedman1(300, 2);
        let config = TrainConfig {
            num_iterations: 1,
            num_leaves: 1,
            learning_rate: 1.0,
            grad_bits: 0,
            ..small_config()
        };
        let model = train_raw(&raw, None, &config).unwrap().model;
        let mean = raw.labels().iter().sum::<f64>() / 300.0;
        for p in model.predict(&raw).unwrap() {
            assert!((p - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn predictions_match_training_cache() {
        for bits in [0, 2, 3] {
            let raw = friedman1(500, 3);
            let config = TrainConfig {
                grad_bits: bits,
                ..small_config()
            };
            let model = train_raw(&raw, None, &config).unwrap().model;
            let cached = training_scores(&model, 500).unwrap();
            assert_eq!(model.predict(&raw).unwrap(), cached);
        }
    }

    #[test]
    fn squared_error_training_loss_never_rises_at_full_precision() {
        let raw = friedman1(1000, 4);
        let config = TrainConfig {
            grad_bits: 0,
            ..small_config()
        };
        let model = train_raw(&raw, None, &config).unwrap().model;
        let rmse: Vec<f64> = model.log.iterations.iter().map(|i| i.train_metric.unwrap()).collect();
        assert!(rmse.windows(2).all(|w| w[1] <= w[0]), "{rmse:?}");
    }

    #[test]
    fn every_arm_runs_on_every_objective() {
        for (raw, objective) in [
            (friedman1(400, 5), Objective::SquaredError),
            (logistic(400, 5), Objective::BinaryLogloss),
        ] {
            for rounding in [Rounding::Stochastic, Rounding::Nearest] {
                for refit in [true, false] {
                    let config = TrainConfig {
                        objective,
                        rounding,
                        refit,
                        grad_bits: 2,
                        num_iterations: 5,
                        ..small_config()
                    };
                    let model = train_raw(&raw, None, &config).unwrap().model;
                    assert_eq!(model.num_trees(), 5);
                }
            }
        }
    }

    #[test]
    fn deterministic_across_threads_and_partitions() {
        let raw = logistic(800, 6);
        let base = TrainConfig {
            objective: Objective::BinaryLogloss,
            ..small_config()
        };
        let reference = train_raw(&raw, None, &base).unwrap().model.to_json().unwrap();
        for (threads, parts) in [(Some(1), 1), (Some(3), 4), (None, 16)] {
            let config = TrainConfig {
                threads,
                num_partitions: parts,
                ..base.clone()
            };
            assert_eq!(
                train_raw(&raw, None, &config).unwrap().model.to_json().unwrap(),
                reference
            );
        }
    }

    #[test]
    fn model_file_round_trip() {
        let raw = friedman1(300, 7);
        let model = train_raw(&raw, None, &small_config()).unwrap().model;
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        model.save(&a).unwrap();
        let back = Model::load(&a).unwrap();
        back.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(back.predict(&raw).unwrap(), model.predict(&raw).unwrap());

        let text = fs::read_to_string(&a).unwrap();
        fs::write(&b, &text[..text.len() / 2]).unwrap();
        assert!(matches!(Model::load(&b), Err(Error::Model(_))));
        fs::write(&b, text.replacen("\"version\":1", "\"version\":9", 1)).unwrap();
        assert!(matches!(
            Model::load(&b),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn config_parsing_and_validation() {
        let mut c = TrainConfig::default();
        c.set("grad_bits", "2").unwrap();
        c.set("rounding", "rn").unwrap();
        c.set("refit", "false").unwrap();
        c.set("objective", "binary").unwrap();
        assert_eq!((c.grad_bits, c.rounding, c.refit), (2, Rounding::Nearest, false));
        assert!(c.set("learning_rat", "0.1").is_err());
        c.set("grad_bits", "7").unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("{0,2,3,4,5}"), "{err}");
        for key in CONFIG_KEYS {
            assert!(
                !matches!(TrainConfig::default().set(key, "?"), Err(Error::Config(m)) if m.starts_with("unknown config key"))
            );
        }
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            num_partitions: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn validation_metrics_and_best_iteration() {
        let raw = friedman1(600, 8);
        let valid = friedman1(200, 9);
        let out = train_raw(&raw, Some(&valid), &small_config()).unwrap();
        let log = &out.model.log;
        assert!(log.iterations.iter().all(|i| i.valid_metric.is_some()));
        let best = log.best_iteration.unwrap();
        let want = log.iterations[best - 1].valid_metric.unwrap();
        assert_eq!(log.best_metric, Some(want));
        let direct = out.model.evaluate(&valid, Metric::Rmse).unwrap();
        assert!((direct - log.iterations.last().unwrap().valid_metric.unwrap()).abs() < 1e-9);
        assert!(out.report.hist_seconds() <= out.report.total_seconds());
    }

    #[test]
    fn theory_records_only_when_enabled() {
        let raw = friedman1(500, 10);
        let off = train_raw(&raw, None, &small_config()).unwrap().model;
        assert!(off.log.gamma.is_empty());
        let on = train_raw(
            &raw,
            None,
            &TrainConfig {
                record_theory: true,
                ..small_config()
            },
        )
        .unwrap()
        .model;
        let splits: usize = on.trees.iter().map(|t| t.nodes().len()).sum();
        assert_eq!(on.log.gamma.len(), splits);
        assert!(on.log.gamma.iter().all(|r| r.gain <= 0.0 || r.gamma_hat > 0.0));
    }

    #[test]
    fn prediction_dimension_checked() {
        let raw = friedman1(100, 11);
        let model = train_raw(
            &raw,
            None,
            &TrainConfig {
                num_iterations: 2,
                ..small_config()
            },
        )
        .unwrap()
        .model;
        assert!(matches!(
            model.predict_row(&[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
