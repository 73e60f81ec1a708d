//! Seeded synthetic datasets for tests, benchmarks, and examples.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::RawDataset;
use crate::loss::sigmoid;

/// Friedman #1 regression: ten U(0,1) features of which five matter,
/// `y = 10 sin(π x₁x₂) + 20 (x₃ − ½)² + 10 x₄ + 5 x₅ + N(0, 1)`.
pub fn friedman1(rows: usize, seed: u64) -> RawDataset {
    let mut rng = StdRng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::with_capacity(rows * 10);
    let mut y = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row: [f64; 10] = std::array::from_fn(|_| rng.random::<f64>());
        let target = 10.0 * (std::f64::consts::PI * row[0] * row[1]).sin()
            + 20.0 * (row[2] - 0.5).powi(2)
            + 10.0 * row[3]
            + 5.0 * row[4]
            + noise.sample(&mut rng);
        x.extend_from_slice(&row);
        y.push(target);
    }
    RawDataset::new(x, y, 10).expect("generated data is well formed")
}

/// Binary classification with eight standard-normal features; the label is
/// drawn from a logistic model with a few interactions.
pub fn logistic(rows: usize, seed: u64) -> RawDataset {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(rows * 8);
    let mut y = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row: [f64; 8] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let margin = 1.5 * row[0] - row[1] + 0.8 * row[2] * row[3] + (row[4] > 0.5) as u8 as f64 - 0.3;
        let label = if rng.random::<f64>() < sigmoid(margin) {
            1.0
        } else {
            0.0
        };
        x.extend_from_slice(&row);
        y.push(label);
    }
    RawDataset::new(x, y, 8).expect("generated data is well formed")
}

/// Uniform features with small-integer values, for histogram benchmarks.
pub fn uniform_bins(rows: usize, features: usize, levels: u32, seed: u64) -> RawDataset {
    let mut rng = StdRng::seed_from_u64(seed);
    let x: Vec<f64> = (0..rows * features)
        .map(|_| f64::from(rng.random_range(0..levels)))
        .collect();
    let y: Vec<f64> = (0..rows).map(|_| rng.random::<f64>()).collect();
    RawDataset::new(x, y, features).expect("generated data is well formed")
}
