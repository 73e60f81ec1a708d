//! Training arms for side-by-side comparisons and a histogram-construction
//! micro-benchmark.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::booster::TrainConfig;
use crate::dataset::bin_dataset;
use crate::error::{Error, Result};
use crate::histogram::{
    select_bitwidth, BinLayout, FloatSource, HistogramSource, LocalMerge, QuantizedSource, RowPartition,
};
use crate::loss::GradientBuffer;
use crate::quantize::{compute_scales, quantize_gradients, CounterRng, HalfWidth, Rounding};
use crate::synthetic::uniform_bins;

/// One training variant: full precision, or B-bit gradients with a rounding
/// mode and optional refit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arm {
    pub bits: u8,
    pub rounding: Rounding,
    pub refit: bool,
}

impl Arm {
    pub const FULL_PRECISION: Arm = Arm {
        bits: 0,
        rounding: Rounding::Stochastic,
        refit: false,
    };

    /// Accepts `fp32` or `{B}[-bit]-{sr|rn}-{refit|norefit}`, e.g. `3-bit-sr-refit`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "fp32" || s == "fp" {
            return Ok(Self::FULL_PRECISION);
        }
        let bad = || Error::Config(format!("unknown arm {s:?}; expected fp32 or e.g. 3-bit-sr-refit"));
        let parts: Vec<&str> = s.split('-').filter(|p| *p != "bit").collect();
        let [bits, rounding, refit] = parts.as_slice() else {
            return Err(bad());
        };
        let bits: u8 = bits.trim_end_matches("bit").parse().map_err(|_| bad())?;
        if !(2..=5).contains(&bits) {
            return Err(Error::Config(format!("arm {s:?}: bits must be in 2..=5")));
        }
        let rounding = Rounding::parse(rounding).ok_or_else(bad)?;
        let refit = match *refit {
            "refit" => true,
            "norefit" => false,
            _ => return Err(bad()),
        };
        Ok(Self { bits, rounding, refit })
    }

    pub fn name(&self) -> String {
        if self.bits == 0 {
            "fp32".into()
        } else {
            format!(
                "{}-bit-{}-{}",
                self.bits,
                self.rounding.name(),
                if self.refit { "refit" } else { "norefit" }
            )
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            grad_bits: self.bits,
            rounding: self.rounding,
            refit: self.refit,
            ..base.clone()
        }
    }
}

pub fn parse_arms(list: &str) -> Result<Vec<Arm>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Arm::parse)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct HistogramBench {
    pub rows: usize,
    pub features: usize,
    pub bits: u8,
    pub partitions: usize,
    pub local_width_bits: u32,
    pub quantized_seconds: f64,
    pub float_seconds: f64,
    /// `quantized_seconds / float_seconds`; below 1 means the packed build is faster.
    pub ratio: f64,
}

/// Times one root-leaf histogram build over all rows with packed integer
/// bins against the same build with `f64` gradient/hessian accumulators.
/// Each side reports its fastest of `repeats` runs after a warm-up.
pub fn histogram_benchmark(
    rows: usize,
    features: usize,
    bits: u8,
    partitions: usize,
    repeats: usize,
    seed: u64,
) -> Result<HistogramBench> {
    let raw = uniform_bins(rows, features, 255, seed);
    let data = bin_dataset(&raw, 255)?;
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let grads = GradientBuffer {
        grad: (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect(),
        hess: vec![1.0; rows],
        constant_hessian: Some(1.0),
    };
    let scales = compute_scales(&grads, bits)?;
    let q = quantize_gradients(&grads, &scales, Rounding::Stochastic, &CounterRng::new(seed), 0);
    let layout = Arc::new(BinLayout::for_dataset(&data));
    let partition = RowPartition::contiguous(rows, partitions);
    let spec = select_bitwidth(partition.max_rows(), rows, bits, true, partition.num_parts());
    let all: Vec<u32> = (0..rows as u32).collect();

    fn time<S: HistogramSource>(src: &mut S, rows: &[u32], repeats: usize) -> Duration {
        std::hint::black_box(src.build(rows));
        (0..repeats.max(1))
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(src.build(rows));
                t.elapsed()
            })
            .min()
            .unwrap()
    }

    let quantized = match spec.total {
        HalfWidth::W32 => time(
            &mut QuantizedSource::<u64, _>::new(&data, layout.clone(), &partition, &q, false, LocalMerge),
            &all,
            repeats,
        ),
        _ => time(
            &mut QuantizedSource::<u32, _>::new(&data, layout.clone(), &partition, &q, false, LocalMerge),
            &all,
            repeats,
        ),
    };
    let float = time(
        &mut FloatSource::new(&data, layout.clone(), &partition, &grads, LocalMerge),
        &all,
        repeats,
    );
    Ok(HistogramBench {
        rows,
        features,
        bits,
        partitions: partition.num_parts(),
        local_width_bits: spec.local.bits(),
        quantized_seconds: quantized.as_secs_f64(),
        float_seconds: float.as_secs_f64(),
        ratio: quantized.as_secs_f64() / float.as_secs_f64(),
    })
}
