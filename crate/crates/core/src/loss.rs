//! Objectives, per-sample derivatives, and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `½(ŷ − y)²`, constant hessian 1.
    #[default]
    SquaredError,
    /// Cross-entropy on a raw margin, labels in {0, 1}.
    BinaryLogloss,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::SquaredError => "squared_error",
            Objective::BinaryLogloss => "binary_logloss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squared_error" | "regression" | "l2" => Some(Objective::SquaredError),
            "binary_logloss" | "binary" | "logloss" => Some(Objective::BinaryLogloss),
            _ => None,
        }
    }

    /// The hessian when it does not depend on the sample.
    pub fn constant_hessian(self) -> Option<f64> {
        match self {
            Objective::SquaredError => Some(1.0),
            Objective::BinaryLogloss => None,
        }
    }

    pub fn default_metric(self) -> Metric {
        match self {
            Objective::SquaredError => Metric::Rmse,
            Objective::BinaryLogloss => Metric::Auc,
        }
    }

    pub fn check_labels(self, labels: &[f64]) -> Result<()> {
        if self == Objective::BinaryLogloss {
            if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::InvalidInput(format!(
                    "binary_logloss needs labels in {{0, 1}}; row {i} has {}",
                    labels[i]
                )));
            }
        }
        Ok(())
    }

    /// Loss of a single sample at raw score `score`.
    pub fn loss(self, score: f64, label: f64) -> f64 {
        match self {
            Objective::SquaredError => 0.5 * (score - label) * (score - label),
            // log(1 + e^s) − y·s, written to stay finite for large |s|.
            Objective::BinaryLogloss => {
                let softplus = if score > 0.0 {
                    score + (-score).exp().ln_1p()
                } else {
                    score.exp().ln_1p()
                };
                softplus - label * score
            }
        }
    }

    /// Constant starting score: mean label, or the log-odds of the base rate.
    pub fn init_score(self, labels: &[f64]) -> f64 {
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        match self {
            Objective::SquaredError => mean,
            Objective::BinaryLogloss => {
                let p = mean.clamp(1e-15, 1.0 - 1e-15);
                (p / (1.0 - p)).ln()
            }
        }
    }

    /// Maps a raw score to the output scale (probability for logloss).
    pub fn transform(self, score: f64) -> f64 {
        match self {
            Objective::SquaredError => score,
            Objective::BinaryLogloss => sigmoid(score),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Full-precision first and second derivatives for every training row.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    /// Set when every hessian equals this value.
    pub constant_hessian: Option<f64>,
}

impl GradientBuffer {
    pub fn len(&self) -> usize {
        self.grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_empty()
    }

    pub fn max_abs_grad(&self) -> f64 {
        self.grad.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn max_hess(&self) -> f64 {
        self.hess.iter().fold(0.0, |m: f64, &h| m.max(h))
    }
}

pub fn compute_gradients(objective: Objective, predictions: &[f64], labels: &[f64]) -> Result<GradientBuffer> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    objective.check_labels(labels)?;
    let n = labels.len();
    let mut grad = Vec::with_capacity(n);
    let mut hess = Vec::with_capacity(n);
    match objective {
        Objective::SquaredError => {
            grad.extend(predictions.iter().zip(labels).map(|(p, y)| p - y));
            hess.resize(n, 1.0);
        }
        Objective::BinaryLogloss => {
            for (&s, &y) in predictions.iter().zip(labels) {
                let p = sigmoid(s);
                grad.push(p - y);
                hess.push(p * (1.0 - p));
            }
        }
    }
    Ok(GradientBuffer {
        grad,
        hess,
        constant_hessian: objective.constant_hessian(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Auc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Auc => "auc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rmse" => Some(Metric::Rmse),
            "auc" => Some(Metric::Auc),
            _ => None,
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Auc)
    }

    pub fn is_better(self, candidate: f64, incumbent: f64) -> bool {
        if self.higher_is_better() {
            candidate > incumbent
        } else {
            candidate < incumbent
        }
    }
}

/// Evaluates `metric` on already-transformed predictions.
pub fn evaluate(metric: Metric, predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "cannot evaluate {} predictions against {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    match metric {
        Metric::Rmse => {
            let sse: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
            Ok((sse / predictions.len() as f64).sqrt())
        }
        Metric::Auc => auc(predictions, labels),
    }
}

/// Mann-Whitney AUC with average ranks for ties.
fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidInput("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their mean.
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] > 0.5).count();
        positive_rank_sum += avg_rank * pos_in_group as f64;
        start = end;
    }
    let p = positives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}
