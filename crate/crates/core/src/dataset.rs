//! Tabular data ingestion and per-feature quantile binning.
//!
//! Raw values are kept as `f64`. Missing cells are stored as [`MISSING`]
//! (negative infinity); binning reserves bin 0 for them, so a missing value
//! always sorts below every observed value and routes left at prediction time.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Sentinel for a missing feature value.
pub const MISSING: f64 = f64::NEG_INFINITY;

/// Upper limit on bins per feature; bin indices are stored in one byte.
pub const MAX_BIN_LIMIT: usize = 255;

pub const DEFAULT_MAX_BIN: usize = 255;

/// Dense row-major matrix of raw feature values plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    features: Vec<f64>,
    labels: Vec<f64>,
    num_features: usize,
}

impl RawDataset {
    /// Builds a dataset from row-major values. NaN is normalized to [`MISSING`].
    pub fn new(mut features: Vec<f64>, labels: Vec<f64>, num_features: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyData("dataset has no rows".into()));
        }
        if num_features == 0 {
            return Err(Error::EmptyData("dataset has no feature columns".into()));
        }
        if features.len() != labels.len() * num_features {
            return Err(Error::InvalidInput(format!(
                "{} values cannot form {} rows of {} features",
                features.len(),
                labels.len(),
                num_features
            )));
        }
        if let Some(i) = labels.iter().position(|y| !y.is_finite()) {
            return Err(Error::InvalidInput(format!("label of row {i} is not finite")));
        }
        for v in &mut features {
            if v.is_nan() {
                *v = MISSING;
            }
        }
        Ok(Self {
            features,
            labels,
            num_features,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        let num_features = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != num_features) {
            return Err(Error::InvalidInput(format!(
                "row {i} has {} values, expected {num_features}",
                rows[i].len()
            )));
        }
        Self::new(rows.concat(), labels, num_features)
    }

    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.features[row * self.num_features + feature]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.num_features)
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        self.rows().map(|r| r[feature]).collect()
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(rows.len() * self.num_features);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, labels, self.num_features)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeaderMode {
    /// Treat the first line as a header when any of its cells is not numeric.
    #[default]
    Auto,
    Present,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CsvOptions {
    pub label_column: usize,
    pub header: HeaderMode,
}

pub fn load_csv(path: impl AsRef<Path>, label_column: usize) -> Result<RawDataset> {
    load_csv_with(
        path,
        &CsvOptions {
            label_column,
            header: HeaderMode::Auto,
        },
    )
}

fn parse_cell(cell: &str) -> Option<f64> {
    let cell = cell.trim();
    if cell.is_empty() || ["na", "nan", "null"].iter().any(|m| cell.eq_ignore_ascii_case(m)) {
        return Some(MISSING);
    }
    cell.parse::<f64>().ok()
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(BufReader::new(file));

    let mut width = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(idx + 1, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if idx == 0 {
            let is_header = match opts.header {
                HeaderMode::Present => true,
                HeaderMode::Absent => false,
                HeaderMode::Auto => record.iter().any(|c| parse_cell(c).is_none()),
            };
            if is_header {
                width = Some(record.len());
                continue;
            }
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::parse(
                path,
                line,
                format!("ragged row: {} columns, expected {expected}", record.len()),
            ));
        }
        if opts.label_column >= expected {
            return Err(Error::parse(
                path,
                line,
                format!("label column {} out of range for {expected} columns", opts.label_column),
            ));
        }
        if expected < 2 {
            return Err(Error::parse(path, line, "need a label column and at least one feature"));
        }
        for (col, cell) in record.iter().enumerate() {
            let v = parse_cell(cell)
                .ok_or_else(|| Error::parse(path, line, format!("column {}: non-numeric value {cell:?}", col + 1)))?;
            if col == opts.label_column {
                if v == MISSING {
                    return Err(Error::parse(path, line, "missing label"));
                }
                labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let num_features = match width {
        Some(w) if !labels.is_empty() => w - 1,
        _ => return Err(Error::EmptyData(format!("{} contains no data rows", path.display()))),
    };
    RawDataset::new(features, labels, num_features)
}

/// Reads `label idx:val ...` lines with 1-based, strictly ascending indices.
/// Absent indices become [`MISSING`].
pub fn load_libsvm(path: impl AsRef<Path>) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sparse_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut num_features = 0;

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().unwrap_or_default();
        let label: f64 = label_tok
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad label {label_tok:?}")))?;
        let mut row = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(path, lineno, format!("malformed pair {tok:?}")))?;
            let i: usize = i
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad index in {tok:?}")))?;
            let v = parse_cell(v)
                .filter(|_| !v.trim().is_empty())
                .ok_or_else(|| Error::parse(path, lineno, format!("bad value in {tok:?}")))?;
            if i == 0 {
                return Err(Error::parse(path, lineno, "feature indices are 1-based"));
            }
            if i <= last {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("index {i} does not ascend (previous {last})"),
                ));
            }
            last = i;
            row.push((i - 1, v));
        }
        num_features = num_features.max(last);
        sparse_rows.push(row);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyData(format!("{} contains no data rows", path.display())));
    }
    let num_features = num_features.max(1);
    let mut features = vec![MISSING; labels.len() * num_features];
    for (r, row) in sparse_rows.iter().enumerate() {
        for &(j, v) in row {
            features[r * num_features + j] = v;
        }
    }
    RawDataset::new(features, labels, num_features)
}

/// Binned training substrate: one byte per (row, feature) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDataset {
    bins: Vec<u8>,
    upper_bounds: Vec<Vec<f64>>,
    labels: Vec<f64>,
    num_features: usize,
}

impl BinnedDataset {
    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Row-major bin matrix, `num_rows * num_features` cells.
    pub fn bin_matrix(&self) -> &[u8] {
        &self.bins
    }

    pub fn row_bins(&self, row: usize) -> &[u8] {
        &self.bins[row * self.num_features..(row + 1) * self.num_features]
    }

    pub fn bin(&self, row: usize, feature: usize) -> u8 {
        self.bins[row * self.num_features + feature]
    }

    pub fn upper_bounds(&self) -> &[Vec<f64>] {
        &self.upper_bounds
    }

    pub fn num_bins(&self, feature: usize) -> usize {
        self.upper_bounds[feature].len()
    }

    /// Bins `raw` with boundaries learned elsewhere (validation/test data).
    pub fn with_bounds(raw: &RawDataset, upper_bounds: Vec<Vec<f64>>) -> Result<Self> {
        if upper_bounds.len() != raw.num_features() {
            return Err(Error::DimensionMismatch {
                expected: upper_bounds.len(),
                actual: raw.num_features(),
            });
        }
        let bins = raw
            .rows()
            .flat_map(|row| row.iter().zip(&upper_bounds).map(|(&v, bounds)| locate_bin(bounds, v)))
            .collect();
        Ok(Self {
            bins,
            upper_bounds,
            labels: raw.labels().to_vec(),
            num_features: raw.num_features(),
        })
    }
}

/// Index of the first bin whose upper bound is `>= value`; missing maps to 0.
pub fn locate_bin(upper_bounds: &[f64], value: f64) -> u8 {
    if value.is_nan() || value == MISSING {
        return 0;
    }
    let b = upper_bounds.partition_point(|&u| u < value);
    b.min(upper_bounds.len() - 1) as u8
}

pub fn bin_dataset(raw: &RawDataset, max_bin: usize) -> Result<BinnedDataset> {
    if !(2..=MAX_BIN_LIMIT).contains(&max_bin) {
        return Err(Error::Config(format!(
            "max_bin must be in [2, {MAX_BIN_LIMIT}], got {max_bin}"
        )));
    }
    let upper_bounds: Vec<Vec<f64>> = (0..raw.num_features())
        .into_par_iter()
        .map(|j| feature_upper_bounds(&raw.column(j), max_bin))
        .collect();
    BinnedDataset::with_bounds(raw, upper_bounds)
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let mut mid = lo + (hi - lo) * 0.5;
    if !mid.is_finite() {
        mid = lo * 0.5 + hi * 0.5;
    }
    if mid >= hi || !mid.is_finite() {
        lo
    } else {
        mid
    }
}

/// Quantile bin boundaries for one column. The last entry is `+inf`; when the
/// column has missing values the first entry is `-inf` (the reserved bin).
pub(crate) fn feature_upper_bounds(values: &[f64], max_bin: usize) -> Vec<f64> {
    let mut present: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| !v.is_nan() && *v != MISSING)
        .collect();
    let has_missing = present.len() < values.len();
    present.sort_unstable_by(f64::total_cmp);

    let mut distinct: Vec<f64> = Vec::new();
    let mut cumulative: Vec<usize> = Vec::new();
    for (i, &v) in present.iter().enumerate() {
        if distinct.last() != Some(&v) {
            distinct.push(v);
            cumulative.push(0);
        }
        *cumulative.last_mut().unwrap() = i + 1;
    }

    let mut bounds = Vec::new();
    if has_missing && !distinct.is_empty() {
        bounds.push(MISSING);
    }
    let budget = max_bin - usize::from(has_missing);
    if distinct.len() <= budget {
        bounds.extend(distinct.windows(2).map(|w| midpoint(w[0], w[1])));
    } else {
        let n = present.len() as f64;
        // Cut after the distinct value whose cumulative count is closest to
        // each equal-count target.
        let mut prev: Option<usize> = None;
        for k in 1..budget {
            let target = k as f64 * n / budget as f64;
            let lo = prev.map_or(0, |p| p + 1);
            if lo > distinct.len() - 2 {
                break;
            }
            let hi = distinct.len() - 2;
            let pos = lo + cumulative[lo..=hi].partition_point(|&c| (c as f64) < target);
            let m = if pos > hi {
                hi
            } else if pos > lo && (target - cumulative[pos - 1] as f64) <= (cumulative[pos] as f64 - target) {
                pos - 1
            } else {
                pos
            };
            if prev != Some(m) {
                bounds.push(midpoint(distinct[m], distinct[m + 1]));
                prev = Some(m);
            }
        }
    }
    bounds.push(f64::INFINITY);
    bounds
}
