//! Per-leaf histogram construction on integer (or, for the baseline, float)
//! gradient statistics.
//!
//! Rows are split into contiguous partitions. Each partition accumulates into
//! its own local histogram whose packed half-width is the narrowest one that
//! cannot overflow for the rows it holds; locals are then widened and reduced
//! into the leaf's total histogram. Integer reduction is exact, so the total
//! does not depend on the number of partitions or the reduction order.

use std::ops::{Add, Sub};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dataset::BinnedDataset;
use crate::loss::GradientBuffer;
use crate::quantize::{max_grad_code, max_hess_code, HalfWidth, PackedWord, QuantizedGradients};

/// Offsets of each feature's bins in a flat histogram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinLayout {
    offsets: Vec<usize>,
}

impl BinLayout {
    pub fn new(bins_per_feature: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for n in bins_per_feature {
            offsets.push(offsets.last().unwrap() + n);
        }
        Self { offsets }
    }

    pub fn for_dataset(data: &BinnedDataset) -> Self {
        Self::new((0..data.num_features()).map(|j| data.num_bins(j)))
    }

    pub fn num_features(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total_bins(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_bins(&self, feature: usize) -> usize {
        self.offsets[feature + 1] - self.offsets[feature]
    }

    pub fn range(&self, feature: usize) -> std::ops::Range<usize> {
        self.offsets[feature]..self.offsets[feature + 1]
    }

    fn starts(&self) -> &[usize] {
        &self.offsets[..self.offsets.len() - 1]
    }
}

/// Contiguous, near-equal row ranges fixed for the whole training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowPartition {
    bounds: Vec<usize>,
}

impl RowPartition {
    pub fn contiguous(num_rows: usize, parts: usize) -> Self {
        let parts = parts.clamp(1, num_rows.max(1));
        let bounds = (0..=parts).map(|k| k * num_rows / parts).collect();
        Self { bounds }
    }

    pub fn num_parts(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn range(&self, part: usize) -> std::ops::Range<usize> {
        self.bounds[part]..self.bounds[part + 1]
    }

    pub fn max_rows(&self) -> usize {
        self.bounds.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// Splits an ascending row list into its per-partition runs.
    pub fn split<'r>(&self, rows: &'r [u32]) -> Vec<&'r [u32]> {
        let mut out = Vec::with_capacity(self.num_parts());
        let mut rest = rows;
        for k in 0..self.num_parts() {
            let end = self.bounds[k + 1];
            let cut = rest.partition_point(|&r| (r as usize) < end);
            let (head, tail) = rest.split_at(cut);
            out.push(head);
            rest = tail;
        }
        out
    }
}

/// Chosen half-widths for local (per-partition) and total histograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramSpec {
    pub local: HalfWidth,
    pub total: HalfWidth,
    pub num_partitions: usize,
    pub bits: u8,
}

fn fits_rows(width: HalfWidth, rows: usize, bits: u8, constant_hessian: bool) -> bool {
    let rows = rows as u128;
    let grad_need = rows * max_grad_code(bits) as u128;
    let hess_need = if constant_hessian {
        rows
    } else {
        rows * max_hess_code(bits) as u128
    };
    grad_need <= width.max_signed() as u128 && hess_need <= width.max_unsigned() as u128
}

fn narrowest(candidates: &[HalfWidth], rows: usize, bits: u8, constant_hessian: bool) -> HalfWidth {
    candidates
        .iter()
        .copied()
        .find(|&w| fits_rows(w, rows, bits, constant_hessian))
        .unwrap_or(HalfWidth::W32)
}

/// Narrowest half-widths that cannot overflow even if every row of a partition
/// (or of the whole dataset, for the total) lands in one bin with the extreme
/// code.
pub fn select_bitwidth(
    max_rows_per_partition: usize,
    total_rows: usize,
    bits: u8,
    constant_hessian: bool,
    num_partitions: usize,
) -> HistogramSpec {
    let total = narrowest(&[HalfWidth::W16, HalfWidth::W32], total_rows, bits, constant_hessian);
    let local = narrowest(
        &[HalfWidth::W8, HalfWidth::W16, HalfWidth::W32],
        max_rows_per_partition,
        bits,
        constant_hessian,
    )
    .min(total);
    HistogramSpec {
        local,
        total,
        num_partitions,
        bits,
    }
}

/// Accumulator value usable in split scans.
pub trait StatSum:
    Copy + Default + PartialEq + PartialOrd + std::fmt::Debug + Send + Sync + Add<Output = Self> + Sub<Output = Self>
{
    fn as_f64(self) -> f64;
}

impl StatSum for i64 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl StatSum for u64 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl StatSum for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

/// Gradient sum, hessian sum (or count for constant hessians), and row count.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NodeStats<G, H> {
    pub grad: G,
    pub hess: H,
    pub count: u64,
}

impl<G: StatSum, H: StatSum> Add for NodeStats<G, H> {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            grad: self.grad + o.grad,
            hess: self.hess + o.hess,
            count: self.count + o.count,
        }
    }
}

impl<G: StatSum, H: StatSum> Sub for NodeStats<G, H> {
    type Output = Self;

    fn sub(self, o: Self) -> Self {
        Self {
            grad: self.grad - o.grad,
            hess: self.hess - o.hess,
            count: self.count - o.count,
        }
    }
}

/// Read access shared by packed and float histograms.
pub trait FeatureHistogram: Send + Sync {
    type Grad: StatSum;
    type Hess: StatSum;

    fn layout(&self) -> &BinLayout;
    fn num_rows(&self) -> usize;
    fn bin_stats(&self, feature: usize, bin: usize) -> NodeStats<Self::Grad, Self::Hess>;

    fn feature_total(&self, feature: usize) -> NodeStats<Self::Grad, Self::Hess> {
        (0..self.layout().num_bins(feature))
            .map(|b| self.bin_stats(feature, b))
            .fold(NodeStats::default(), |a, b| a + b)
    }
}

/// Integer histogram with packed `(gradient, hessian|count)` bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedHistogram<P> {
    layout: Arc<BinLayout>,
    bins: Vec<P>,
    /// Per-bin row counts, kept only when the lower half holds hessian codes.
    counts: Option<Vec<u32>>,
    num_rows: usize,
}

impl<P: PackedWord> PackedHistogram<P> {
    pub fn zeros(layout: Arc<BinLayout>, track_counts: bool) -> Self {
        let n = layout.total_bins();
        Self {
            layout,
            bins: vec![P::default(); n],
            counts: track_counts.then(|| vec![0; n]),
            num_rows: 0,
        }
    }

    pub fn width(&self) -> HalfWidth {
        P::WIDTH
    }

    pub fn bins(&self) -> &[P] {
        &self.bins
    }

    pub fn counts(&self) -> Option<&[u32]> {
        self.counts.as_deref()
    }

    pub fn feature_bins(&self, feature: usize) -> &[P] {
        &self.bins[self.layout.range(feature)]
    }

    /// `(gradient sum, lower-half sum)` of one bin.
    pub fn unpack_bin(&self, feature: usize, bin: usize) -> (i64, u64) {
        self.bins[self.layout.offsets[feature] + bin].unpack()
    }

    /// Re-encodes every bin at a wider half-width.
    pub fn widen<Q: PackedWord>(&self) -> PackedHistogram<Q> {
        assert!(Q::WIDTH >= P::WIDTH, "cannot narrow a histogram");
        PackedHistogram {
            layout: self.layout.clone(),
            bins: self
                .bins
                .iter()
                .map(|b| {
                    let (g, h) = b.unpack();
                    Q::from_codes(g, h)
                })
                .collect(),
            counts: self.counts.clone(),
            num_rows: self.num_rows,
        }
    }

    /// Adds another histogram of the same width in place.
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(*self.layout, *other.layout);
        for (a, &b) in self.bins.iter_mut().zip(&other.bins) {
            *a = a.add(b);
        }
        if let (Some(a), Some(b)) = (&mut self.counts, &other.counts) {
            for (a, &b) in a.iter_mut().zip(b) {
                *a += b;
            }
        }
        self.num_rows += other.num_rows;
    }

    /// Bin-wise `self − child`; exact when `child` covers a subset of the rows.
    pub fn subtract(&self, child: &Self) -> Self {
        debug_assert_eq!(*self.layout, *child.layout);
        let bins = self.bins.iter().zip(&child.bins).map(|(&a, &b)| a.sub(b)).collect();
        let counts = match (&self.counts, &child.counts) {
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(a, b)| a - b).collect()),
            _ => None,
        };
        Self {
            layout: self.layout.clone(),
            bins,
            counts,
            num_rows: self.num_rows - child.num_rows,
        }
    }

    pub(crate) fn bins_mut(&mut self) -> &mut [P] {
        &mut self.bins
    }

    pub(crate) fn counts_mut(&mut self) -> Option<&mut [u32]> {
        self.counts.as_deref_mut()
    }

    pub(crate) fn set_num_rows(&mut self, n: usize) {
        self.num_rows = n;
    }
}

impl<P: PackedWord> FeatureHistogram for PackedHistogram<P> {
    type Grad = i64;
    type Hess = u64;

    fn layout(&self) -> &BinLayout {
        &self.layout
    }

    fn num_rows(&self) -> usize {
        self.num_rows
    }

    fn bin_stats(&self, feature: usize, bin: usize) -> NodeStats<i64, u64> {
        let idx = self.layout.offsets[feature] + bin;
        let (grad, hess) = self.bins[idx].unpack();
        let count = self.counts.as_ref().map_or(hess, |c| u64::from(c[idx]));
        NodeStats { grad, hess, count }
    }
}

/// Packs each row's codes into one word of width `P`.
pub fn pack_row_codes<P: PackedWord>(q: &QuantizedGradients) -> Vec<P> {
    match &q.hess {
        Some(h) => q
            .grad
            .par_iter()
            .zip(h.par_iter())
            .map(|(&g, &h)| P::from_codes(i64::from(g), u64::from(h)))
            .collect(),
        None => q.grad.par_iter().map(|&g| P::from_codes(i64::from(g), 1)).collect(),
    }
}

/// Histogram construction for one leaf over one partition's rows: every row
/// adds its packed word to its bin in every feature.
pub fn build_local_histogram<P: PackedWord>(
    data: &BinnedDataset,
    layout: &Arc<BinLayout>,
    row_words: &[P],
    rows: &[u32],
    track_counts: bool,
) -> PackedHistogram<P> {
    let mut hist = PackedHistogram::<P>::zeros(layout.clone(), track_counts);
    let num_features = data.num_features();
    let matrix = data.bin_matrix();
    let starts = layout.starts();
    let bins = hist.bins_mut();
    for &r in rows {
        let r = r as usize;
        let word = row_words[r];
        let row_bins = &matrix[r * num_features..(r + 1) * num_features];
        for (&start, &b) in starts.iter().zip(row_bins) {
            let slot = &mut bins[start + b as usize];
            *slot = PackedWord::add(*slot, word);
        }
    }
    if let Some(counts) = hist.counts_mut() {
        for &r in rows {
            let r = r as usize;
            let row_bins = &matrix[r * num_features..(r + 1) * num_features];
            for (&start, &b) in starts.iter().zip(row_bins) {
                counts[start + b as usize] += 1;
            }
        }
    }
    hist.set_num_rows(rows.len());
    hist
}

/// Widens every local histogram to `T` and sums them.
pub fn merge_histograms<L: PackedWord, T: PackedWord>(
    layout: &Arc<BinLayout>,
    locals: &[PackedHistogram<L>],
    track_counts: bool,
) -> PackedHistogram<T> {
    let mut total = PackedHistogram::<T>::zeros(layout.clone(), track_counts);
    for local in locals {
        total.accumulate(&local.widen::<T>());
    }
    total
}

/// Baseline histogram accumulating full-precision `f64` sums.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatHistogram {
    layout: Arc<BinLayout>,
    bins: Vec<[f64; 2]>,
    counts: Option<Vec<u32>>,
    /// Hessian value when constant; counts are then recovered from sums.
    constant_hessian: Option<f64>,
    num_rows: usize,
}

impl FloatHistogram {
    pub fn zeros(layout: Arc<BinLayout>, constant_hessian: Option<f64>) -> Self {
        let n = layout.total_bins();
        Self {
            layout,
            bins: vec![[0.0; 2]; n],
            counts: constant_hessian.is_none().then(|| vec![0; n]),
            constant_hessian,
            num_rows: 0,
        }
    }

    pub fn bins(&self) -> &[[f64; 2]] {
        &self.bins
    }

    pub fn counts(&self) -> Option<&[u32]> {
        self.counts.as_deref()
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a[0] += b[0];
            a[1] += b[1];
        }
        if let (Some(a), Some(b)) = (&mut self.counts, &other.counts) {
            for (a, &b) in a.iter_mut().zip(b) {
                *a += b;
            }
        }
        self.num_rows += other.num_rows;
    }

    pub fn subtract(&self, child: &Self) -> Self {
        let bins = self
            .bins
            .iter()
            .zip(&child.bins)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1]])
            .collect();
        let counts = match (&self.counts, &child.counts) {
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(a, b)| a - b).collect()),
            _ => None,
        };
        Self {
            layout: self.layout.clone(),
            bins,
            counts,
            constant_hessian: self.constant_hessian,
            num_rows: self.num_rows - child.num_rows,
        }
    }

    pub(crate) fn bins_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.bins
    }

    pub(crate) fn counts_mut(&mut self) -> Option<&mut [u32]> {
        self.counts.as_deref_mut()
    }

    pub(crate) fn set_num_rows(&mut self, n: usize) {
        self.num_rows = n;
    }
}

impl FeatureHistogram for FloatHistogram {
    type Grad = f64;
    type Hess = f64;

    fn layout(&self) -> &BinLayout {
        &self.layout
    }

    fn num_rows(&self) -> usize {
        self.num_rows
    }

    fn bin_stats(&self, feature: usize, bin: usize) -> NodeStats<f64, f64> {
        let idx = self.layout.offsets[feature] + bin;
        let [grad, hess] = self.bins[idx];
        let count = match (&self.counts, self.constant_hessian) {
            (Some(c), _) => u64::from(c[idx]),
            (None, Some(h)) => (hess / h).round() as u64,
            (None, None) => 0,
        };
        NodeStats { grad, hess, count }
    }
}

pub fn build_float_histogram(
    data: &BinnedDataset,
    layout: &Arc<BinLayout>,
    grads: &GradientBuffer,
    rows: &[u32],
) -> FloatHistogram {
    let mut hist = FloatHistogram::zeros(layout.clone(), grads.constant_hessian);
    let num_features = data.num_features();
    let matrix = data.bin_matrix();
    let starts = layout.starts();
    let bins = hist.bins_mut();
    for &r in rows {
        let r = r as usize;
        let (g, h) = (grads.grad[r], grads.hess[r]);
        let row_bins = &matrix[r * num_features..(r + 1) * num_features];
        for (&start, &b) in starts.iter().zip(row_bins) {
            let slot = &mut bins[start + b as usize];
            slot[0] += g;
            slot[1] += h;
        }
    }
    if let Some(counts) = hist.counts_mut() {
        for &r in rows {
            let r = r as usize;
            let row_bins = &matrix[r * num_features..(r + 1) * num_features];
            for (&start, &b) in starts.iter().zip(row_bins) {
                counts[start + b as usize] += 1;
            }
        }
    }
    hist.set_num_rows(rows.len());
    hist
}

/// Combines per-partition histograms into the leaf total.
///
/// The default [`LocalMerge`] sums in partition order; the distributed
/// simulator substitutes a ring allreduce with byte accounting.
pub trait Reducer {
    /// Marks the start of a boosting iteration.
    fn begin_iteration(&mut self, _iteration: usize) {}

    fn reduce_packed<P: PackedWord>(
        &mut self,
        layout: &Arc<BinLayout>,
        locals: Vec<PackedHistogram<P>>,
    ) -> PackedHistogram<P>;

    fn reduce_float(&mut self, layout: &Arc<BinLayout>, locals: Vec<FloatHistogram>) -> FloatHistogram;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LocalMerge;

impl Reducer for LocalMerge {
    fn reduce_packed<P: PackedWord>(
        &mut self,
        _layout: &Arc<BinLayout>,
        locals: Vec<PackedHistogram<P>>,
    ) -> PackedHistogram<P> {
        let mut iter = locals.into_iter();
        let mut total = iter.next().expect("at least one partition");
        for local in iter {
            total.accumulate(&local);
        }
        total
    }

    fn reduce_float(&mut self, _layout: &Arc<BinLayout>, locals: Vec<FloatHistogram>) -> FloatHistogram {
        let mut iter = locals.into_iter();
        let mut total = iter.next().expect("at least one partition");
        for local in iter {
            total.accumulate(&local);
        }
        total
    }
}

/// Builds leaf histograms for the tree grower.
pub trait HistogramSource {
    type Hist: FeatureHistogram;

    fn build(&mut self, rows: &[u32]) -> Self::Hist;
    /// Histogram of `rows`, the rows of `parent` not in `child`.
    fn subtract(&mut self, parent: &Self::Hist, child: &Self::Hist, rows: &[u32]) -> Self::Hist;
    /// Time spent in `build` and `subtract` so far.
    fn elapsed(&self) -> Duration;
}

/// How many leaf builds used each local half-width.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WidthUsage {
    pub w8: u64,
    pub w16: u64,
    pub w32: u64,
}

impl WidthUsage {
    fn record(&mut self, w: HalfWidth) {
        match w {
            HalfWidth::W8 => self.w8 += 1,
            HalfWidth::W16 => self.w16 += 1,
            HalfWidth::W32 => self.w32 += 1,
        }
    }
}

/// Quantized histogram source with total bins of type `T`.
pub struct QuantizedSource<'a, T: PackedWord, R: Reducer> {
    data: &'a BinnedDataset,
    layout: Arc<BinLayout>,
    partition: &'a RowPartition,
    grads: &'a QuantizedGradients,
    track_counts: bool,
    words8: OnceLock<Vec<u16>>,
    words16: OnceLock<Vec<u32>>,
    words32: OnceLock<Vec<u64>>,
    reducer: R,
    elapsed: Duration,
    usage: WidthUsage,
    _total: std::marker::PhantomData<T>,
}

impl<'a, T: PackedWord, R: Reducer> QuantizedSource<'a, T, R> {
    pub fn new(
        data: &'a BinnedDataset,
        layout: Arc<BinLayout>,
        partition: &'a RowPartition,
        grads: &'a QuantizedGradients,
        track_counts: bool,
        reducer: R,
    ) -> Self {
        Self {
            data,
            layout,
            partition,
            grads,
            track_counts,
            words8: OnceLock::new(),
            words16: OnceLock::new(),
            words32: OnceLock::new(),
            reducer,
            elapsed: Duration::ZERO,
            usage: WidthUsage::default(),
            _total: std::marker::PhantomData,
        }
    }

    pub fn width_usage(&self) -> WidthUsage {
        self.usage
    }

    pub fn into_reducer(self) -> R {
        self.reducer
    }

    fn build_at<L: PackedWord>(&mut self, words: &[L], parts: &[&[u32]]) -> PackedHistogram<T> {
        let locals: Vec<PackedHistogram<T>> = parts
            .par_iter()
            .map(|rows| {
                let local = build_local_histogram::<L>(self.data, &self.layout, words, rows, self.track_counts);
                local.widen::<T>()
            })
            .collect();
        self.reducer.reduce_packed(&self.layout, locals)
    }
}

impl<T: PackedWord, R: Reducer> HistogramSource for QuantizedSource<'_, T, R> {
    type Hist = PackedHistogram<T>;

    fn build(&mut self, rows: &[u32]) -> PackedHistogram<T> {
        let start = Instant::now();
        let parts = self.partition.split(rows);
        let max_rows = parts.iter().map(|p| p.len()).max().unwrap_or(0);
        let spec = select_bitwidth(
            max_rows,
            self.data.num_rows(),
            self.grads.scales.bits,
            self.grads.hess.is_none(),
            parts.len(),
        );
        debug_assert_eq!(spec.total, T::WIDTH);
        self.usage.record(spec.local);
        let hist = match spec.local {
            HalfWidth::W8 => {
                let words = std::mem::take(&mut self.words8);
                let w = words.get_or_init(|| pack_row_codes::<u16>(self.grads));
                let h = self.build_at(w, &parts);
                self.words8 = words;
                h
            }
            HalfWidth::W16 => {
                let words = std::mem::take(&mut self.words16);
                let w = words.get_or_init(|| pack_row_codes::<u32>(self.grads));
                let h = self.build_at(w, &parts);
                self.words16 = words;
                h
            }
            HalfWidth::W32 => {
                let words = std::mem::take(&mut self.words32);
                let w = words.get_or_init(|| pack_row_codes::<u64>(self.grads));
                let h = self.build_at(w, &parts);
                self.words32 = words;
                h
            }
        };
        self.elapsed += start.elapsed();
        hist
    }

    fn subtract(&mut self, parent: &Self::Hist, child: &Self::Hist, _rows: &[u32]) -> Self::Hist {
        let start = Instant::now();
        let hist = parent.subtract(child);
        self.elapsed += start.elapsed();
        hist
    }

    fn elapsed(&self) -> Duration {
        self.elapsed
    }
}

/// Full-precision baseline source.
pub struct FloatSource<'a, R: Reducer> {
    data: &'a BinnedDataset,
    layout: Arc<BinLayout>,
    partition: &'a RowPartition,
    grads: &'a GradientBuffer,
    reducer: R,
    elapsed: Duration,
}

impl<'a, R: Reducer> FloatSource<'a, R> {
    pub fn new(
        data: &'a BinnedDataset,
        layout: Arc<BinLayout>,
        partition: &'a RowPartition,
        grads: &'a GradientBuffer,
        reducer: R,
    ) -> Self {
        Self {
            data,
            layout,
            partition,
            grads,
            reducer,
            elapsed: Duration::ZERO,
        }
    }

    pub fn into_reducer(self) -> R {
        self.reducer
    }
}

impl<R: Reducer> HistogramSource for FloatSource<'_, R> {
    type Hist = FloatHistogram;

    fn build(&mut self, rows: &[u32]) -> FloatHistogram {
        let start = Instant::now();
        let parts = self.partition.split(rows);
        let locals: Vec<FloatHistogram> = parts
            .par_iter()
            .map(|rows| build_float_histogram(self.data, &self.layout, self.grads, rows))
            .collect();
        let hist = self.reducer.reduce_float(&self.layout, locals);
        self.elapsed += start.elapsed();
        hist
    }

    fn subtract(&mut self, parent: &FloatHistogram, child: &FloatHistogram, _rows: &[u32]) -> FloatHistogram {
        let start = Instant::now();
        let hist = parent.subtract(child);
        self.elapsed += start.elapsed();
        hist
    }

    fn elapsed(&self) -> Duration {
        self.elapsed
    }
}

#[cfg(test)]
mod tests {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::dataset::{bin_dataset, RawDataset};
    use crate::quantize::QuantScales;

    fn fixture(
        rows: usize,
        features: usize,
        bits: u8,
        constant: bool,
        seed: u64,
    ) -> (BinnedDataset, QuantizedGradients) {
        let mut rng = StdRng::seed_from_u64(seed);
        let values: Vec<f64> = (0..rows * features).map(|_| rng.random_range(0..12) as f64).collect();
        let raw = RawDataset::new(values, vec![0.0; rows], features).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let g = max_grad_code(bits);
        let grad = (0..rows).map(|_| rng.random_range(-g..=g) as i8).collect();
        let hess = (!constant).then(|| {
            (0..rows)
                .map(|_| rng.random_range(0..=max_hess_code(bits)) as u8)
                .collect()
        });
        let scales = QuantScales {
            bits,
            grad_scale: 0.1,
            hess_scale: if constant { 0.0 } else { 0.05 },
            constant_hessian: constant.then_some(1.0),
        };
        (data, QuantizedGradients { grad, hess, scales })
    }

    /// Unpacked 64-bit scatter-add oracle.
    fn oracle(data: &BinnedDataset, q: &QuantizedGradients, rows: &[u32]) -> Vec<Vec<(i64, u64, u64)>> {
        let mut out: Vec<Vec<(i64, u64, u64)>> = (0..data.num_features())
            .map(|j| vec![(0, 0, 0); data.num_bins(j)])
            .collect();
        for &r in rows {
            let r = r as usize;
            for (j, feat) in out.iter_mut().enumerate() {
                let cell = &mut feat[data.bin(r, j) as usize];
                cell.0 += i64::from(q.grad[r]);
                cell.1 += q.hess_code(r);
                cell.2 += 1;
            }
        }
        out
    }

    fn assert_matches_oracle<H: FeatureHistogram<Grad = i64, Hess = u64>>(hist: &H, want: &[Vec<(i64, u64, u64)>]) {
        for (j, feat) in want.iter().enumerate() {
            for (b, &(g, h, c)) in feat.iter().enumerate() {
                let s = hist.bin_stats(j, b);
                assert_eq!((s.grad, s.hess, s.count), (g, h, c), "feature {j} bin {b}");
            }
        }
    }

    #[test]
    fn bitwidth_rule() {
        assert_eq!(select_bitwidth(100, 100, 2, true, 1).local, HalfWidth::W8);
        assert_eq!(select_bitwidth(100, 100, 3, true, 1).local, HalfWidth::W16);
        assert_eq!(select_bitwidth(1_000_000, 1_000_000, 5, true, 1).local, HalfWidth::W32);
        // 127 rows of ±1 fit a signed byte; 128 do not.
        assert_eq!(select_bitwidth(127, 127, 2, true, 1).local, HalfWidth::W8);
        assert_eq!(select_bitwidth(128, 128, 2, true, 1).local, HalfWidth::W16);
        // Non-constant 2-bit hessian codes reach 2 per row: 127·2 = 254 ≤ 255.
        assert_eq!(select_bitwidth(127, 127, 2, false, 1).local, HalfWidth::W8);
        let spec = select_bitwidth(100, 10_000, 3, true, 100);
        assert_eq!((spec.local, spec.total), (HalfWidth::W16, HalfWidth::W16));
        let spec = select_bitwidth(100, 100_000, 3, true, 1000);
        assert_eq!(spec.total, HalfWidth::W32);
    }

    #[test]
    fn partition_split() {
        let p = RowPartition::contiguous(10, 3);
        assert_eq!(p.num_parts(), 3);
        assert_eq!(p.max_rows(), 4);
        let rows = [0u32, 2, 3, 5, 6, 9];
        let parts = p.split(&rows);
        assert_eq!(parts.concat(), rows);
        for (k, part) in parts.iter().enumerate() {
            assert!(part.iter().all(|&r| p.range(k).contains(&(r as usize))));
        }
        assert_eq!(RowPartition::contiguous(3, 8).num_parts(), 3);
    }

    #[test]
    fn single_row_and_same_bin_sums() {
        let raw = RawDataset::new((0..5).map(f64::from).collect(), vec![0.0; 5], 1).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let layout = Arc::new(BinLayout::for_dataset(&data));
        let words: Vec<u32> = [(-2, 1), (3, 1), (0, 0), (-2, 1), (0, 0)]
            .iter()
            .map(|&(g, h)| u32::from_codes(g, h))
            .collect();
        let h = build_local_histogram(&data, &layout, &words, &[3], false);
        for b in 0..5 {
            let want = if b == 3 { (-2, 1) } else { (0, 0) };
            assert_eq!(h.unpack_bin(0, b), want);
        }

        let raw = RawDataset::new(vec![1.0, 1.0], vec![0.0; 2], 1).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let layout = Arc::new(BinLayout::for_dataset(&data));
        let h = build_local_histogram(&data, &layout, &words[..2], &[0, 1], false);
        assert_eq!(h.unpack_bin(0, 0), (1, 2));
    }

    #[test]
    fn local_build_matches_scatter_oracle() {
        for constant in [true, false] {
            let (data, q) = fixture(500, 4, 4, constant, 1);
            let layout = Arc::new(BinLayout::for_dataset(&data));
            let rows: Vec<u32> = (0..500).collect();
            let words = pack_row_codes::<u64>(&q);
            let hist = build_local_histogram(&data, &layout, &words, &rows, !constant);
            assert_matches_oracle(&hist, &oracle(&data, &q, &rows));
        }
    }

    #[test]
    fn merged_partitions_equal_single_build() {
        let (data, q) = fixture(1000, 3, 3, true, 2);
        let layout = Arc::new(BinLayout::for_dataset(&data));
        let rows: Vec<u32> = (0..1000).filter(|r| r % 3 != 1).collect();
        let words16 = pack_row_codes::<u32>(&q);
        let words64 = pack_row_codes::<u64>(&q);
        let whole: PackedHistogram<u64> = build_local_histogram(&data, &layout, &words64, &rows, false);
        for k in [1, 2, 4, 8] {
            let partition = RowPartition::contiguous(1000, k);
            let locals: Vec<PackedHistogram<u32>> = partition
                .split(&rows)
                .iter()
                .map(|r| build_local_histogram(&data, &layout, &words16, r, false))
                .collect();
            let merged: PackedHistogram<u64> = merge_histograms(&layout, &locals, false);
            assert_eq!(merged, whole);
        }
        let single: PackedHistogram<u64> =
            merge_histograms(&layout, std::slice::from_ref(&whole.widen::<u64>()), false);
        assert_eq!(single, whole);
        let zeros = vec![PackedHistogram::<u16>::zeros(layout.clone(), false); 3];
        let merged: PackedHistogram<u32> = merge_histograms(&layout, &zeros, false);
        assert!(merged.bins().iter().all(|&b| b == 0));
    }

    #[test]
    fn subtraction_is_exact() {
        let (data, q) = fixture(300, 3, 2, false, 3);
        let layout = Arc::new(BinLayout::for_dataset(&data));
        let words = pack_row_codes::<u32>(&q);
        let parent_rows: Vec<u32> = (0..300).collect();
        let child_rows: Vec<u32> = (0..300).filter(|r| r % 4 == 0).collect();
        let sibling_rows: Vec<u32> = (0..300).filter(|r| r % 4 != 0).collect();
        let parent = build_local_histogram(&data, &layout, &words, &parent_rows, true);
        let child = build_local_histogram(&data, &layout, &words, &child_rows, true);
        let sibling = build_local_histogram(&data, &layout, &words, &sibling_rows, true);
        assert_eq!(parent.subtract(&child), sibling);
        let zero = parent.subtract(&parent);
        assert!(zero.bins().iter().all(|&b| b == 0));
        let empty = PackedHistogram::zeros(layout.clone(), true);
        assert_eq!(parent.subtract(&empty), parent);

        let three = build_local_histogram(&data, &layout, &words, &[1, 2, 3], true);
        let one = build_local_histogram(&data, &layout, &words, &[1], true);
        let two_three = build_local_histogram(&data, &layout, &words, &[2, 3], true);
        assert_eq!(three.subtract(&one), two_three);
    }

    #[test]
    fn selected_width_never_overflows_single_bin() {
        // Every row in one bin with the most negative gradient and largest
        // hessian code; compare against checked 64-bit accumulation.
        for bits in 2..=5u8 {
            for constant in [true, false] {
                for rows in [1usize, 63, 64, 127, 128, 255, 256, 4000, 20_000, 70_000] {
                    let spec = select_bitwidth(rows, rows, bits, constant, 1);
                    let g = -max_grad_code(bits);
                    let h = if constant { 1 } else { max_hess_code(bits) };
                    let grad_sum = g * rows as i64;
                    let hess_sum = h * rows as u64;
                    assert!(spec.local.fits(grad_sum, hess_sum), "{bits} {constant} {rows}");
                    let raw = RawDataset::new(vec![0.0; rows], vec![0.0; rows], 1).unwrap();
                    let data = bin_dataset(&raw, 255).unwrap();
                    let layout = Arc::new(BinLayout::for_dataset(&data));
                    let all: Vec<u32> = (0..rows as u32).collect();
                    let (g0, h0) = match spec.local {
                        HalfWidth::W8 => {
                            build_local_histogram(&data, &layout, &vec![u16::from_codes(g, h); rows], &all, false)
                                .unpack_bin(0, 0)
                        }
                        HalfWidth::W16 => {
                            build_local_histogram(&data, &layout, &vec![u32::from_codes(g, h); rows], &all, false)
                                .unpack_bin(0, 0)
                        }
                        HalfWidth::W32 => {
                            build_local_histogram(&data, &layout, &vec![u64::from_codes(g, h); rows], &all, false)
                                .unpack_bin(0, 0)
                        }
                    };
                    assert_eq!((g0, h0), (grad_sum, hess_sum));
                }
            }
        }
    }

    #[test]
    fn quantized_source_is_partition_invariant() {
        let (data, q) = fixture(2000, 5, 2, true, 4);
        let layout = Arc::new(BinLayout::for_dataset(&data));
        let rows: Vec<u32> = (0..2000).filter(|r| r % 5 != 2).collect();
        let mut reference = None;
        for k in [1, 2, 4, 8, 64] {
            let partition = RowPartition::contiguous(2000, k);
            let mut src = QuantizedSource::<u32, _>::new(&data, layout.clone(), &partition, &q, false, LocalMerge);
            let hist = src.build(&rows);
            assert_matches_oracle(&hist, &oracle(&data, &q, &rows));
            if k == 64 {
                assert_eq!(src.width_usage().w8, 1);
            }
            match &reference {
                None => reference = Some(hist),
                Some(r) => assert_eq!(&hist, r),
            }
        }
    }

    #[test]
    fn float_source_sums() {
        let raw = RawDataset::new(vec![0.0, 1.0, 0.0, 1.0], vec![0.0; 4], 1).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let layout = Arc::new(BinLayout::for_dataset(&data));
        let grads = GradientBuffer {
            grad: vec![1.0, 2.0, 3.0, 4.0],
            hess: vec![0.5, 0.25, 0.5, 0.25],
            constant_hessian: None,
        };
        let partition = RowPartition::contiguous(4, 2);
        let mut src = FloatSource::new(&data, layout, &partition, &grads, LocalMerge);
        let h = src.build(&[0, 1, 2, 3]);
        assert_eq!(
            h.bin_stats(0, 0),
            NodeStats {
                grad: 4.0,
                hess: 1.0,
                count: 2
            }
        );
        assert_eq!(
            h.bin_stats(0, 1),
            NodeStats {
                grad: 6.0,
                hess: 0.5,
                count: 2
            }
        );
        let child = src.build(&[1]);
        assert_eq!(src.subtract(&h, &child, &[0, 2, 3]).bin_stats(0, 1).count, 1);
    }
}
