//! In-process simulation of data-parallel training: each contiguous row
//! partition is a virtual worker, and leaf histograms are combined by a ring
//! allreduce whose traffic is counted byte by byte.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::booster::{train_with, TrainConfig, TrainObserver, TrainOutput};
use crate::dataset::BinnedDataset;
use crate::error::{Error, Result};
use crate::histogram::{BinLayout, FeatureHistogram, FloatHistogram, PackedHistogram, Reducer};
use crate::quantize::PackedWord;

/// Bytes of one row count when counts travel with the histogram.
const COUNT_BYTES: u64 = 4;
/// Baseline bins holding a gradient and a hessian as `f32` or `f64`.
const FP32_BIN_BYTES: u64 = 8;
const FP64_BIN_BYTES: u64 = 16;

/// Traffic of one boosting iteration, summed over all workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct IterationComm {
    pub iteration: usize,
    pub reductions: u64,
    pub bytes: u64,
    /// The same reductions with `f32` gradient/hessian bins.
    pub fp32_bytes: u64,
    /// The same reductions with `f64` gradient/hessian bins.
    pub fp64_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct CommStats {
    pub workers: usize,
    pub iterations: Vec<IterationComm>,
}

impl CommStats {
    pub fn total_bytes(&self) -> u64 {
        self.iterations.iter().map(|i| i.bytes).sum()
    }

    pub fn total_fp32_bytes(&self) -> u64 {
        self.iterations.iter().map(|i| i.fp32_bytes).sum()
    }

    pub fn total_fp64_bytes(&self) -> u64 {
        self.iterations.iter().map(|i| i.fp64_bytes).sum()
    }

    pub fn total_reductions(&self) -> u64 {
        self.iterations.iter().map(|i| i.reductions).sum()
    }
}

/// Sums equal-length buffers in place with a ring allreduce (reduce-scatter
/// then allgather) and returns the number of elements sent by all workers.
pub fn ring_allreduce<T: Copy>(bufs: &mut [&mut [T]], add: impl Fn(T, T) -> T) -> u64 {
    let k = bufs.len();
    if k <= 1 {
        return 0;
    }
    let len = bufs[0].len();
    let segment = |s: usize| (s * len / k)..((s + 1) * len / k);
    let mut sent = 0u64;
    let mut scratch: Vec<T> = Vec::with_capacity(len / k + 1);
    // Within a step every worker sends and receives distinct segments, so
    // applying the transfers one after another matches simultaneous sends.
    for step in 0..k - 1 {
        for w in 0..k {
            let range = segment((w + k - step) % k);
            scratch.clear();
            scratch.extend_from_slice(&bufs[w][range.clone()]);
            let dst = &mut bufs[(w + 1) % k][range];
            for (d, &s) in dst.iter_mut().zip(&scratch) {
                *d = add(*d, s);
            }
            sent += scratch.len() as u64;
        }
    }
    for step in 0..k - 1 {
        for w in 0..k {
            let range = segment((w + 1 + k - step) % k);
            scratch.clear();
            scratch.extend_from_slice(&bufs[w][range.clone()]);
            bufs[(w + 1) % k][range].copy_from_slice(&scratch);
            sent += scratch.len() as u64;
        }
    }
    sent
}

/// Reducer that runs a ring allreduce across the partitions and records
/// traffic per iteration.
#[derive(Debug, Default)]
pub struct RingAllreduce {
    stats: CommStats,
}

impl RingAllreduce {
    pub fn new(workers: usize) -> Self {
        Self {
            stats: CommStats {
                workers,
                iterations: Vec::new(),
            },
        }
    }

    pub fn into_stats(self) -> CommStats {
        self.stats
    }

    fn record(&mut self, bins: usize, bin_bytes: u64, with_counts: bool, workers: usize) {
        let extra = if with_counts { COUNT_BYTES } else { 0 };
        let factor = 2 * (workers as u64 - 1);
        let bins = bins as u64;
        let cur = self
            .stats
            .iterations
            .last_mut()
            .expect("begin_iteration precedes reductions");
        cur.reductions += 1;
        cur.bytes += factor * bins * (bin_bytes + extra);
        cur.fp32_bytes += factor * bins * (FP32_BIN_BYTES + extra);
        cur.fp64_bytes += factor * bins * (FP64_BIN_BYTES + extra);
    }
}

fn reduce_counts(counts: Vec<Option<&mut [u32]>>) {
    let mut bufs: Vec<&mut [u32]> = counts.into_iter().flatten().collect();
    ring_allreduce(&mut bufs, |a, b| a + b);
}

impl Reducer for RingAllreduce {
    fn begin_iteration(&mut self, iteration: usize) {
        self.stats.iterations.push(IterationComm {
            iteration,
            ..IterationComm::default()
        });
    }

    fn reduce_packed<P: PackedWord>(
        &mut self,
        layout: &Arc<BinLayout>,
        mut locals: Vec<PackedHistogram<P>>,
    ) -> PackedHistogram<P> {
        let workers = locals.len();
        let rows: usize = locals.iter().map(|h| h.num_rows()).sum();
        let with_counts = locals[0].counts().is_some();
        {
            let mut bufs: Vec<&mut [P]> = locals.iter_mut().map(|h| h.bins_mut()).collect();
            ring_allreduce(&mut bufs, |a, b| a.add(b));
        }
        if with_counts {
            reduce_counts(locals.iter_mut().map(|h| h.counts_mut()).collect());
        }
        self.record(layout.total_bins(), P::WIDTH.bin_bytes() as u64, with_counts, workers);
        let mut out = locals.swap_remove(0);
        out.set_num_rows(rows);
        out
    }

    fn reduce_float(&mut self, layout: &Arc<BinLayout>, mut locals: Vec<FloatHistogram>) -> FloatHistogram {
        let workers = locals.len();
        let rows: usize = locals.iter().map(|h| h.num_rows()).sum();
        let with_counts = locals[0].counts().is_some();
        {
            let mut bufs: Vec<&mut [[f64; 2]]> = locals.iter_mut().map(|h| h.bins_mut()).collect();
            ring_allreduce(&mut bufs, |a, b| [a[0] + b[0], a[1] + b[1]]);
        }
        if with_counts {
            reduce_counts(locals.iter_mut().map(|h| h.counts_mut()).collect());
        }
        self.record(layout.total_bins(), FP64_BIN_BYTES, with_counts, workers);
        let mut out = locals.swap_remove(0);
        out.set_num_rows(rows);
        out
    }
}

/// Trains with `workers` virtual workers. With quantized gradients the model
/// is identical to single-process training for any worker count.
pub fn train_distributed_sim(
    data: &BinnedDataset,
    valid: Option<&BinnedDataset>,
    config: &TrainConfig,
    workers: usize,
    observer: Option<&mut dyn TrainObserver>,
) -> Result<(TrainOutput, CommStats)> {
    if workers == 0 {
        return Err(Error::Config("need at least one worker".into()));
    }
    if workers > data.num_rows() {
        return Err(Error::Config(format!(
            "{workers} workers for {} rows; every worker needs a row",
            data.num_rows()
        )));
    }
    let config = TrainConfig {
        num_partitions: workers,
        ..config.clone()
    };
    let mut ring = RingAllreduce::new(workers);
    let out = train_with(data, valid, &config, &mut ring, observer)?;
    Ok((out, ring.into_stats()))
}

/// Per-iteration and cumulative traffic as CSV.
pub fn comm_report<W: Write>(stats: &CommStats, mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,reductions,bytes,cumulative_bytes")?;
    let mut cumulative = 0u64;
    for it in &stats.iterations {
        cumulative += it.bytes;
        writeln!(out, "{},{},{},{}", it.iteration, it.reductions, it.bytes, cumulative)?;
    }
    Ok(())
}
