//! Weak-learnability statistics of executed splits and the probabilistic
//! bounds on split-gain error under stochastic rounding.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::GradientBuffer;
use crate::quantize::{compute_scales, quantize_gradients, CounterRng, Rounding};
use crate::tree::SplitEvent;

/// `(|G₁| + |G₂|) / (2·Σ|gᵢ|)`: the edge over random guessing of the stump
/// that predicts each side's gradient sign. `None` when every gradient is zero.
pub fn gamma_hat(grad_left: f64, grad_right: f64, sum_abs_grad: f64) -> Option<f64> {
    (sum_abs_grad > 0.0).then(|| (grad_left.abs() + grad_right.abs()) / (2.0 * sum_abs_grad))
}

/// Weighted error of the stump that labels each side with the sign of its
/// gradient sum (sign(0) = +1), against targets sign(gᵢ) and weights |gᵢ|.
pub fn stump_error(left: &[f64], right: &[f64]) -> Option<f64> {
    let sign = |x: f64| if x >= 0.0 { 1.0 } else { -1.0 };
    let total: f64 = left.iter().chain(right).map(|g| g.abs()).sum();
    if total == 0.0 {
        return None;
    }
    let side_error = |side: &[f64]| -> f64 {
        let guess = sign(side.iter().sum());
        side.iter().filter(|&&g| sign(g) != guess).map(|g| g.abs()).sum()
    };
    Some((side_error(left) + side_error(right)) / total)
}

/// Statistics of one executed split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafTheoryRecord {
    pub iteration: usize,
    /// Split node index within its tree.
    pub leaf: usize,
    pub n_s: usize,
    pub n_s1: usize,
    pub n_s2: usize,
    pub gamma_hat: f64,
    pub mean_hessian: f64,
    pub gain: f64,
}

/// Builds the record for a split from full-precision derivatives.
pub fn record_split(iteration: usize, event: &SplitEvent<'_>, grads: &GradientBuffer) -> LeafTheoryRecord {
    let sum = |rows: &[u32]| rows.iter().map(|&r| grads.grad[r as usize]).sum::<f64>();
    let sum_abs: f64 = event.rows.iter().map(|&r| grads.grad[r as usize].abs()).sum();
    let hess: f64 = event.rows.iter().map(|&r| grads.hess[r as usize]).sum();
    LeafTheoryRecord {
        iteration,
        leaf: event.node,
        n_s: event.rows.len(),
        n_s1: event.left.len(),
        n_s2: event.right.len(),
        gamma_hat: gamma_hat(sum(event.left), sum(event.right), sum_abs).unwrap_or(0.0),
        mean_hessian: hess / event.rows.len() as f64,
        gain: event.gain,
    }
}

pub fn write_gamma_csv<W: Write>(records: &[LeafTheoryRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,leaf,n_s,gamma_hat,mean_hessian")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.leaf, r.n_s, r.gamma_hat, r.mean_hessian
        )?;
    }
    Ok(())
}

/// Empirical CDF of γ̂ evaluated at `points`.
pub fn gamma_cdf(records: &[LeafTheoryRecord], points: &[f64]) -> Vec<f64> {
    let n = records.len().max(1) as f64;
    points
        .iter()
        .map(|&p| records.iter().filter(|r| r.gamma_hat <= p).count() as f64 / n)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub max_abs_g: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub delta: f64,
    pub bits: u8,
    pub n_s: f64,
    pub n_s1: f64,
    pub n_s2: f64,
}

/// Extra inputs of the bound for non-constant hessians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianInputs {
    pub grad_scale: f64,
    pub hess_scale: f64,
    pub mean_hess: f64,
    pub mean_hess_left: f64,
    pub mean_hess_right: f64,
}

/// Relative split-gain error bound for constant-hessian losses, holding with
/// probability at least 1 − δ.
pub fn bound_constant_hessian(b: &BoundInputs) -> f64 {
    let log_term = (4.0 / b.delta).ln();
    let gamma2 = b.gamma * b.gamma;
    let first = b.max_abs_g * (2.0 * log_term).sqrt() / (gamma2 * b.epsilon * 2f64.powi(i32::from(b.bits) - 1))
        * (1.0 / b.n_s1.sqrt() + 1.0 / b.n_s2.sqrt());
    let second = b.max_abs_g * b.max_abs_g * log_term
        / (gamma2 * b.epsilon * b.epsilon * b.n_s * 4f64.powi(i32::from(b.bits) - 2));
    first + second
}

/// The general-hessian bound, or `None` when a child is too small for it to
/// apply (`n_child < 8·δ_h²·ln(8/δ)/h̄_child²`).
pub fn bound_nonconstant_hessian(b: &BoundInputs, h: &HessianInputs) -> Option<f64> {
    let log_term = (8.0 / b.delta).ln();
    let need = |mean: f64| 8.0 * h.hess_scale * h.hess_scale * log_term / (mean * mean);
    if b.n_s1 < need(h.mean_hess_left) || b.n_s2 < need(h.mean_hess_right) {
        return None;
    }
    let gamma2 = b.gamma * b.gamma;
    let root = (2.0 * log_term).sqrt();
    let first = h.grad_scale * root / (gamma2 * b.epsilon)
        * (1.0 / (h.mean_hess_left * b.n_s1.sqrt()) + 1.0 / (h.mean_hess_right * b.n_s2.sqrt()));
    let second = h.mean_hess * h.hess_scale * root / (2.0 * gamma2)
        * (b.n_s / (h.mean_hess_left.powi(2) * b.n_s1 * b.n_s1.sqrt())
            + b.n_s / (h.mean_hess_right.powi(2) * b.n_s2 * b.n_s2.sqrt()));
    let third = h.grad_scale * h.grad_scale * log_term / (gamma2 * h.mean_hess * b.epsilon * b.epsilon)
        * (1.0 / (h.mean_hess_left * b.n_s) + 1.0 / (h.mean_hess_right * b.n_s));
    Some(first + second + third)
}

/// A single leaf with a constant hessian and one binned feature whose bin
/// boundaries are the candidate splits.
#[derive(Debug, Clone)]
pub struct BoundFixture {
    pub grads: Vec<f64>,
    pub hessian: f64,
    pub bins: Vec<u8>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub bits: u8,
    pub delta: f64,
    pub trials: usize,
    pub violations: usize,
    pub bound: f64,
    pub max_observed: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Relative error of every trial.
    #[serde(skip)]
    pub errors: Vec<f64>,
}

impl BoundCheck {
    pub fn violation_fraction(&self) -> f64 {
        self.violations as f64 / self.trials as f64
    }
}

pub fn write_bound_csv<W: Write>(checks: &[BoundCheck], mut out: W) -> std::io::Result<()> {
    writeln!(out, "B,delta,trials,violations,bound,max_observed")?;
    for c in checks {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.bits, c.delta, c.trials, c.violations, c.bound, c.max_observed
        )?;
    }
    Ok(())
}

fn split_value(g1: f64, n1: f64, g2: f64, n2: f64, h: f64) -> f64 {
    g1 * g1 / (2.0 * h * n1) + g2 * g2 / (2.0 * h * n2)
}

/// Monte-Carlo check of the constant-hessian bound on the fixture's optimal
/// split: quantizes the gradients `trials` times with stochastic rounding and
/// counts trials whose relative gain error exceeds the bound.
///
/// γ is the measured γ̂ of the split and ε sits just below the leaf's mean
/// absolute gradient, so the probabilistic conclusion is the binding one.
pub fn empirical_bound_check(
    fixture: &BoundFixture,
    bits: u8,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<BoundCheck> {
    let n = fixture.grads.len();
    if n == 0 || fixture.bins.len() != n {
        return Err(Error::InvalidInput("fixture needs one bin per gradient".into()));
    }
    let h = fixture.hessian;
    let num_bins = fixture.bins.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut bin_sum = vec![0.0; num_bins];
    let mut bin_count = vec![0usize; num_bins];
    for (&g, &b) in fixture.grads.iter().zip(&fixture.bins) {
        bin_sum[b as usize] += g;
        bin_count[b as usize] += 1;
    }
    let total: f64 = fixture.grads.iter().sum();
    let (mut best, mut best_bin) = (0.0, None);
    let (mut gl, mut nl) = (0.0, 0usize);
    for b in 0..num_bins.saturating_sub(1) {
        gl += bin_sum[b];
        nl += bin_count[b];
        if nl == 0 || nl == n {
            continue;
        }
        let v = split_value(gl, nl as f64, total - gl, (n - nl) as f64, h);
        if v > best {
            (best, best_bin) = (v, Some(b as u8));
        }
    }
    let Some(split) = best_bin else {
        return Err(Error::Degenerate("fixture has no split with positive value".into()));
    };
    let left: Vec<bool> = fixture.bins.iter().map(|&b| b <= split).collect();
    let n1 = left.iter().filter(|&&l| l).count();
    let n2 = n - n1;
    let g1: f64 = fixture
        .grads
        .iter()
        .zip(&left)
        .filter(|(_, &l)| l)
        .map(|(g, _)| g)
        .sum();
    let g2 = total - g1;
    let exact = split_value(g1, n1 as f64, g2, n2 as f64, h);

    let sum_abs: f64 = fixture.grads.iter().map(|g| g.abs()).sum();
    let gamma = gamma_hat(g1, g2, sum_abs).ok_or_else(|| Error::Degenerate("all gradients are zero".into()))?;
    let epsilon = 0.999 * sum_abs / n as f64;
    let buffer = GradientBuffer {
        grad: fixture.grads.clone(),
        hess: vec![h; n],
        constant_hessian: Some(h),
    };
    let scales = compute_scales(&buffer, bits)?;
    let bound = bound_constant_hessian(&BoundInputs {
        max_abs_g: buffer.max_abs_grad(),
        epsilon,
        gamma,
        delta,
        bits,
        n_s: n as f64,
        n_s1: n1 as f64,
        n_s2: n2 as f64,
    });

    let rng = CounterRng::new(seed);
    let errors: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let q = quantize_gradients(&buffer, &scales, Rounding::Stochastic, &rng, t);
            let (mut q1, mut q2) = (0i64, 0i64);
            for (&c, &l) in q.grad.iter().zip(&left) {
                if l {
                    q1 += i64::from(c);
                } else {
                    q2 += i64::from(c);
                }
            }
            let est = split_value(
                q1 as f64 * scales.grad_scale,
                n1 as f64,
                q2 as f64 * scales.grad_scale,
                n2 as f64,
                h,
            );
            (est - exact).abs() / best
        })
        .collect();
    let violations = errors.iter().filter(|&&e| e > bound).count();
    let max_observed = errors.iter().copied().fold(0.0, f64::max);
    Ok(BoundCheck {
        bits,
        delta,
        trials,
        violations,
        bound,
        max_observed,
        gamma,
        epsilon,
        errors,
    })
}
