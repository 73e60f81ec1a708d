//! Leaf-wise tree growth on histogram statistics, leaf refitting, and routing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::BinnedDataset;
use crate::error::{Error, Result};
use crate::histogram::{FeatureHistogram, HistogramSource, NodeStats, StatSum};
use crate::loss::GradientBuffer;
use crate::quantize::QuantScales;

/// Converts accumulated statistics to real scale: `G = grad·Σgrad`,
/// `H = hess·Σhess`. For quantized constant-hessian statistics the hessian
/// sum is a row count and `hess` is the constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainScale {
    pub grad: f64,
    pub hess: f64,
}

impl GainScale {
    pub const FULL_PRECISION: GainScale = GainScale { grad: 1.0, hess: 1.0 };

    pub fn quantized(scales: &QuantScales) -> Self {
        Self {
            grad: scales.grad_scale,
            hess: scales.constant_hessian.unwrap_or(scales.hess_scale),
        }
    }

    pub fn real<G: StatSum, H: StatSum>(&self, s: &NodeStats<G, H>) -> (f64, f64) {
        (s.grad.as_f64() * self.grad, s.hess.as_f64() * self.hess)
    }

    /// `−G/H`, or 0 for an empty hessian.
    pub fn leaf_value<G: StatSum, H: StatSum>(&self, s: &NodeStats<G, H>) -> f64 {
        let (g, h) = self.real(s);
        if h > 0.0 {
            -g / h
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConstraints {
    pub min_data_in_leaf: usize,
    pub min_child_weight: f64,
}

impl Default for SplitConstraints {
    fn default() -> Self {
        Self {
            min_data_in_leaf: 0,
            min_child_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitInfo<G, H> {
    pub feature: usize,
    /// Rows with bin ≤ `threshold_bin` go left.
    pub threshold_bin: u8,
    pub gain: f64,
    pub left: NodeStats<G, H>,
    pub right: NodeStats<G, H>,
}

fn half_score(g: f64, h: f64) -> f64 {
    g * g / (2.0 * h)
}

/// Loss reduction `G₁²/2H₁ + G₂²/2H₂ − G²/2H` on real-scale sums.
pub fn split_gain(left: (f64, f64), right: (f64, f64), parent: (f64, f64)) -> f64 {
    half_score(left.0, left.1) + half_score(right.0, right.1) - half_score(parent.0, parent.1)
}

/// Best split of one leaf by a prefix scan over every feature's bins.
pub fn find_best_split<Hist: FeatureHistogram>(
    hist: &Hist,
    leaf: NodeStats<Hist::Grad, Hist::Hess>,
    scale: GainScale,
    constraints: &SplitConstraints,
) -> Option<SplitInfo<Hist::Grad, Hist::Hess>> {
    let parent = scale.real(&leaf);
    let per_feature: Vec<Option<SplitInfo<Hist::Grad, Hist::Hess>>> = (0..hist.layout().num_features())
        .into_par_iter()
        .map(|j| best_for_feature(hist, j, leaf, parent, scale, constraints))
        .collect();
    let mut best: Option<SplitInfo<_, _>> = None;
    for cand in per_feature.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| cand.gain > b.gain) {
            best = Some(cand);
        }
    }
    best
}

fn admissible(real_hess: f64, count: u64, c: &SplitConstraints) -> bool {
    real_hess > 0.0 && real_hess >= c.min_child_weight && count >= c.min_data_in_leaf.max(1) as u64
}

fn best_for_feature<Hist: FeatureHistogram>(
    hist: &Hist,
    feature: usize,
    leaf: NodeStats<Hist::Grad, Hist::Hess>,
    parent: (f64, f64),
    scale: GainScale,
    constraints: &SplitConstraints,
) -> Option<SplitInfo<Hist::Grad, Hist::Hess>> {
    let num_bins = hist.layout().num_bins(feature);
    let mut left = NodeStats::default();
    let mut best: Option<SplitInfo<_, _>> = None;
    for b in 0..num_bins.saturating_sub(1) {
        left = left + hist.bin_stats(feature, b);
        let right = leaf - left;
        let l = scale.real(&left);
        let r = scale.real(&right);
        if !admissible(l.1, left.count, constraints) || !admissible(r.1, right.count, constraints) {
            continue;
        }
        let gain = split_gain(l, r, parent);
        if gain > 0.0 && best.as_ref().is_none_or(|s| gain > s.gain) {
            best = Some(SplitInfo {
                feature,
                threshold_bin: b as u8,
                gain,
                left,
                right,
            });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Child {
    Node(usize),
    Leaf(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitNode {
    pub feature: usize,
    pub threshold_bin: u8,
    /// Upper bound of `threshold_bin`; raw values ≤ this go left.
    #[serde(with = "crate::json::real")]
    pub threshold: f64,
    pub gain: f64,
    pub left: Child,
    pub right: Child,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafNode {
    pub value: f64,
    /// Training rows that reached this leaf.
    pub count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    num_features: usize,
    nodes: Vec<SplitNode>,
    leaves: Vec<LeafNode>,
    #[serde(skip)]
    leaf_rows: Vec<Vec<u32>>,
}

impl PartialEq for Tree {
    /// Structural equality; training row sets are not compared.
    fn eq(&self, other: &Self) -> bool {
        self.num_features == other.num_features && self.nodes == other.nodes && self.leaves == other.leaves
    }
}

impl Tree {
    pub fn single_leaf(num_features: usize, value: f64, rows: Vec<u32>) -> Self {
        Self {
            num_features,
            nodes: Vec::new(),
            leaves: vec![LeafNode {
                value,
                count: rows.len() as u64,
            }],
            leaf_rows: vec![rows],
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn nodes(&self) -> &[SplitNode] {
        &self.nodes
    }

    pub fn leaves(&self) -> &[LeafNode] {
        &self.leaves
    }

    /// Training rows per leaf; empty for a tree loaded from disk.
    pub fn leaf_rows(&self) -> &[Vec<u32>] {
        &self.leaf_rows
    }

    pub fn has_leaf_rows(&self) -> bool {
        self.leaf_rows.len() == self.leaves.len()
    }

    pub fn set_leaf_value(&mut self, leaf: usize, value: f64) {
        self.leaves[leaf].value = value;
    }

    fn root(&self) -> Child {
        if self.nodes.is_empty() {
            Child::Leaf(0)
        } else {
            Child::Node(0)
        }
    }

    /// Leaf reached by a raw feature vector. Missing (NaN or −∞) values go left.
    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut at = self.root();
        loop {
            match at {
                Child::Leaf(i) => return i,
                Child::Node(n) => {
                    let node = &self.nodes[n];
                    let v = row[node.feature];
                    at = if v.is_nan() || v <= node.threshold {
                        node.left
                    } else {
                        node.right
                    };
                }
            }
        }
    }

    /// Leaf reached by a binned training row.
    pub fn leaf_index_binned(&self, data: &BinnedDataset, row: usize) -> usize {
        let bins = data.row_bins(row);
        let mut at = self.root();
        loop {
            match at {
                Child::Leaf(i) => return i,
                Child::Node(n) => {
                    let node = &self.nodes[n];
                    at = if bins[node.feature] <= node.threshold_bin {
                        node.left
                    } else {
                        node.right
                    };
                }
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.num_features {
            return Err(Error::DimensionMismatch {
                expected: self.num_features,
                actual: row.len(),
            });
        }
        Ok(self.leaves[self.leaf_index(row)].value)
    }

    /// Checks internal references after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.leaves.is_empty() || self.nodes.len() + 1 != self.leaves.len() {
            return Err(Error::Model(format!(
                "tree has {} split nodes and {} leaves",
                self.nodes.len(),
                self.leaves.len()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.feature >= self.num_features {
                return Err(Error::Model(format!(
                    "node {i} splits on unknown feature {}",
                    node.feature
                )));
            }
            for c in [node.left, node.right] {
                let ok = match c {
                    Child::Node(k) => k > i && k < self.nodes.len(),
                    Child::Leaf(k) => k < self.leaves.len(),
                };
                if !ok {
                    return Err(Error::Model(format!("node {i} has a dangling child {c:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Replaces every leaf value with `−G/H` over the leaf's training rows using
/// full-precision derivatives. Structure is left unchanged.
pub fn refit_leaf_values(tree: &mut Tree, grads: &GradientBuffer) -> Result<()> {
    if !tree.has_leaf_rows() {
        return Err(Error::Model("refit needs the training rows of every leaf".into()));
    }
    for (leaf, rows) in tree.leaves.iter_mut().zip(&tree.leaf_rows) {
        let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
            (g + grads.grad[r as usize], h + grads.hess[r as usize])
        });
        leaf.value = if h > 0.0 { -g / h } else { 0.0 };
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowConfig {
    pub num_leaves: usize,
    pub constraints: SplitConstraints,
    /// Derive the larger child's histogram as parent − smaller child.
    pub histogram_subtraction: bool,
}

impl Default for GrowConfig {
    fn default() -> Self {
        Self {
            num_leaves: 255,
            constraints: SplitConstraints::default(),
            histogram_subtraction: true,
        }
    }
}

/// One split as it happened, with the rows on each side.
pub struct SplitEvent<'a> {
    /// Index of the new split node within the tree.
    pub node: usize,
    pub feature: usize,
    pub threshold_bin: u8,
    pub gain: f64,
    pub rows: &'a [u32],
    pub left: &'a [u32],
    pub right: &'a [u32],
}

struct LiveLeaf<H: FeatureHistogram> {
    rows: Vec<u32>,
    stats: NodeStats<H::Grad, H::Hess>,
    hist: Option<H>,
    best: Option<SplitInfo<H::Grad, H::Hess>>,
    created: u64,
    /// Split node pointing at this leaf, and whether it is the left child.
    parent: Option<(usize, bool)>,
}

/// Grows one tree best-first: repeatedly splits the live leaf with the
/// largest gain until `num_leaves` is reached or no split has positive gain.
/// Leaf values are `−G/H` of the statistics in `source`.
pub fn grow_tree<S: HistogramSource>(
    data: &BinnedDataset,
    source: &mut S,
    scale: GainScale,
    config: &GrowConfig,
    mut observer: Option<&mut dyn FnMut(SplitEvent<'_>)>,
) -> Tree {
    let num_rows = data.num_rows();
    let all: Vec<u32> = (0..num_rows as u32).collect();
    let root_hist = source.build(&all);
    let root_stats = root_hist.feature_total(0);
    let constraints = &config.constraints;
    let best = (config.num_leaves > 1)
        .then(|| find_best_split(&root_hist, root_stats, scale, constraints))
        .flatten();
    let mut live = vec![LiveLeaf {
        rows: all,
        stats: root_stats,
        hist: Some(root_hist),
        best,
        created: 0,
        parent: None,
    }];
    let mut nodes: Vec<SplitNode> = Vec::new();
    let mut created = 1u64;

    while live.len() < config.num_leaves {
        let mut pick: Option<usize> = None;
        for (i, leaf) in live.iter().enumerate() {
            let Some(s) = &leaf.best else { continue };
            let better = match pick {
                None => true,
                Some(p) => {
                    let cur = live[p].best.as_ref().unwrap();
                    s.gain > cur.gain || (s.gain == cur.gain && leaf.created < live[p].created)
                }
            };
            if better {
                pick = Some(i);
            }
        }
        let Some(idx) = pick else { break };
        let split = live[idx].best.take().unwrap();
        let parent_hist = live[idx].hist.take();
        let rows = std::mem::take(&mut live[idx].rows);

        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows
            .iter()
            .partition(|&&r| data.bin(r as usize, split.feature) <= split.threshold_bin);
        debug_assert_eq!(left_rows.len() as u64, split.left.count);

        let node_id = nodes.len();
        if let Some((p, is_left)) = live[idx].parent {
            let link = Child::Node(node_id);
            if is_left {
                nodes[p].left = link;
            } else {
                nodes[p].right = link;
            }
        }
        let right_id = live.len();
        nodes.push(SplitNode {
            feature: split.feature,
            threshold_bin: split.threshold_bin,
            threshold: data.upper_bounds()[split.feature][split.threshold_bin as usize],
            gain: split.gain,
            left: Child::Leaf(idx),
            right: Child::Leaf(right_id),
        });
        if let Some(obs) = observer.as_mut() {
            obs(SplitEvent {
                node: node_id,
                feature: split.feature,
                threshold_bin: split.threshold_bin,
                gain: split.gain,
                rows: &rows,
                left: &left_rows,
                right: &right_rows,
            });
        }
        drop(rows);

        let more = live.len() + 1 < config.num_leaves;
        let splittable = |n: usize| more && n >= 2 * constraints.min_data_in_leaf.max(1);
        let (mut left_hist, mut right_hist) = (None, None);
        let (want_left, want_right) = (splittable(left_rows.len()), splittable(right_rows.len()));
        if want_left || want_right {
            let left_smaller = left_rows.len() <= right_rows.len();
            let (small_rows, large_rows) = if left_smaller {
                (&left_rows, &right_rows)
            } else {
                (&right_rows, &left_rows)
            };
            let (want_small, want_large) = if left_smaller {
                (want_left, want_right)
            } else {
                (want_right, want_left)
            };
            let small = (want_small || (want_large && config.histogram_subtraction && parent_hist.is_some()))
                .then(|| source.build(small_rows));
            let large = match (want_large, &parent_hist, &small) {
                (false, _, _) => None,
                (true, Some(p), Some(s)) if config.histogram_subtraction => Some(source.subtract(p, s, large_rows)),
                (true, _, _) => Some(source.build(large_rows)),
            };
            let small = small.filter(|_| want_small);
            if left_smaller {
                (left_hist, right_hist) = (small, large);
            } else {
                (left_hist, right_hist) = (large, small);
            }
        }
        drop(parent_hist);

        let left_best = left_hist
            .as_ref()
            .and_then(|h| find_best_split(h, split.left, scale, constraints));
        let right_best = right_hist
            .as_ref()
            .and_then(|h| find_best_split(h, split.right, scale, constraints));
        live[idx] = LiveLeaf {
            rows: left_rows,
            stats: split.left,
            hist: left_hist,
            best: left_best,
            created,
            parent: Some((node_id, true)),
        };
        live.push(LiveLeaf {
            rows: right_rows,
            stats: split.right,
            hist: right_hist,
            best: right_best,
            created: created + 1,
            parent: Some((node_id, false)),
        });
        created += 2;
    }

    let leaves = live
        .iter()
        .map(|l| LeafNode {
            value: scale.leaf_value(&l.stats),
            count: l.rows.len() as u64,
        })
        .collect();
    Tree {
        num_features: data.num_features(),
        nodes,
        leaves,
        leaf_rows: live.into_iter().map(|l| l.rows).collect(),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::dataset::{bin_dataset, RawDataset};
    use crate::histogram::{
        build_float_histogram, BinLayout, FloatHistogram, FloatSource, LocalMerge, PackedHistogram, QuantizedSource,
        RowPartition,
    };
    use crate::quantize::{compute_scales, quantize_gradients, CounterRng, QuantizedGradients, Rounding};

    fn random_data(rows: usize, features: usize, seed: u64) -> (BinnedDataset, GradientBuffer) {
        let mut rng = StdRng::seed_from_u64(seed);
        let values: Vec<f64> = (0..rows * features).map(|_| rng.random_range(0..20) as f64).collect();
        let labels: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw = RawDataset::new(values, labels.clone(), features).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let grads = GradientBuffer {
            grad: labels.iter().map(|y| -y).collect(),
            hess: vec![1.0; rows],
            constant_hessian: Some(1.0),
        };
        (data, grads)
    }

    fn float_hist(data: &BinnedDataset, grads: &GradientBuffer, rows: &[u32]) -> FloatHistogram {
        build_float_histogram(data, &Arc::new(BinLayout::for_dataset(data)), grads, rows)
    }

    #[test]
    fn hand_evaluated_gain() {
        // Two bins, three rows each, quantized gradients −10 and +10 with δ_g = 0.1.
        let raw = RawDataset::new(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0], vec![0.0; 6], 1).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let q = QuantizedGradients {
            grad: vec![-10, -10, -10, 10, 10, 10],
            hess: None,
            scales: QuantScales {
                bits: 5,
                grad_scale: 0.1,
                hess_scale: 0.0,
                constant_hessian: Some(1.0),
            },
        };
        let layout = Arc::new(BinLayout::for_dataset(&data));
        let partition = RowPartition::contiguous(6, 1);
        let mut src = QuantizedSource::<u32, _>::new(&data, layout, &partition, &q, false, LocalMerge);
        let hist: PackedHistogram<u32> = src.build(&[0, 1, 2, 3, 4, 5]);
        let leaf = hist.feature_total(0);
        let s = find_best_split(
            &hist,
            leaf,
            GainScale::quantized(&q.scales),
            &SplitConstraints::default(),
        )
        .unwrap();
        assert_eq!((s.feature, s.threshold_bin), (0, 0));
        assert!((s.gain - 3.0).abs() < 1e-12);
        assert_eq!(s.left + s.right, leaf);
    }

    #[test]
    fn identical_gradients_do_not_split() {
        let raw = RawDataset::new((0..10).map(f64::from).collect(), vec![0.0; 10], 1).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let grads = GradientBuffer {
            grad: vec![0.5; 10],
            hess: vec![1.0; 10],
            constant_hessian: Some(1.0),
        };
        let rows: Vec<u32> = (0..10).collect();
        let h = float_hist(&data, &grads, &rows);
        assert!(find_best_split(
            &h,
            h.feature_total(0),
            GainScale::FULL_PRECISION,
            &SplitConstraints::default()
        )
        .is_none());
    }

    #[test]
    fn split_matches_exhaustive_oracle() {
        let (data, grads) = random_data(200, 3, 5);
        let rows: Vec<u32> = (0..200).collect();
        let h = float_hist(&data, &grads, &rows);
        let s = find_best_split(
            &h,
            h.feature_total(0),
            GainScale::FULL_PRECISION,
            &SplitConstraints::default(),
        )
        .unwrap();
        // Direct evaluation on row sets for every (feature, bin).
        let (g_all, h_all): (f64, f64) = (grads.grad.iter().sum(), 200.0);
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for j in 0..3 {
            for b in 0..data.num_bins(j) - 1 {
                let (mut gl, mut hl) = (0.0, 0.0);
                for r in 0..200 {
                    if data.bin(r, j) as usize <= b {
                        gl += grads.grad[r];
                        hl += 1.0;
                    }
                }
                let (gr, hr) = (g_all - gl, h_all - hl);
                if hl == 0.0 || hr == 0.0 {
                    continue;
                }
                let gain = gl * gl / (2.0 * hl) + gr * gr / (2.0 * hr) - g_all * g_all / (2.0 * h_all);
                if gain > best.0 + 1e-12 {
                    best = (gain, j, b);
                }
            }
        }
        assert_eq!((s.feature, s.threshold_bin as usize), (best.1, best.2));
        assert!((s.gain - best.0).abs() <= 1e-12 * best.0.abs());
    }

    #[test]
    fn constraints_filter_candidates() {
        let raw = RawDataset::new((0..10).map(f64::from).collect(), vec![0.0; 10], 1).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let mut grad = vec![1.0; 10];
        grad[0] = -9.0;
        let grads = GradientBuffer {
            grad,
            hess: vec![1.0; 10],
            constant_hessian: Some(1.0),
        };
        let rows: Vec<u32> = (0..10).collect();
        let h = float_hist(&data, &grads, &rows);
        let leaf = h.feature_total(0);
        let free = find_best_split(&h, leaf, GainScale::FULL_PRECISION, &SplitConstraints::default()).unwrap();
        assert_eq!(free.threshold_bin, 0);
        let c = SplitConstraints {
            min_data_in_leaf: 3,
            min_child_weight: 0.0,
        };
        let s = find_best_split(&h, leaf, GainScale::FULL_PRECISION, &c).unwrap();
        assert_eq!(s.threshold_bin, 2);
        let c = SplitConstraints {
            min_data_in_leaf: 0,
            min_child_weight: 6.0,
        };
        assert!(find_best_split(&h, leaf, GainScale::FULL_PRECISION, &c).is_none());
    }

    fn grow_fp(data: &BinnedDataset, grads: &GradientBuffer, config: &GrowConfig) -> Tree {
        let layout = Arc::new(BinLayout::for_dataset(data));
        let partition = RowPartition::contiguous(data.num_rows(), 4);
        let mut src = FloatSource::new(data, layout, &partition, grads, LocalMerge);
        grow_tree(data, &mut src, GainScale::FULL_PRECISION, config, None)
    }

    fn grow_quantized(data: &BinnedDataset, q: &QuantizedGradients, config: &GrowConfig, parts: usize) -> Tree {
        let layout = Arc::new(BinLayout::for_dataset(data));
        let partition = RowPartition::contiguous(data.num_rows(), parts);
        let mut src = QuantizedSource::<u32, _>::new(data, layout, &partition, q, false, LocalMerge);
        grow_tree(data, &mut src, GainScale::quantized(&q.scales), config, None)
    }

    #[test]
    fn single_leaf_tree() {
        let (data, grads) = random_data(50, 2, 6);
        let config = GrowConfig {
            num_leaves: 1,
            ..GrowConfig::default()
        };
        let tree = grow_fp(&data, &grads, &config);
        assert_eq!(tree.num_leaves(), 1);
        let want = -grads.grad.iter().sum::<f64>() / 50.0;
        assert!((tree.leaves()[0].value - want).abs() < 1e-12);
        assert_eq!(tree.predict_row(&[123.0, -4.0]).unwrap(), tree.leaves()[0].value);
    }

    #[test]
    fn separable_data_splits_by_class() {
        let x: Vec<f64> = (0..20).map(|i| f64::from(i % 2)).collect();
        let raw = RawDataset::new(x.clone(), x.clone(), 1).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let grads = GradientBuffer {
            grad: x.iter().map(|y| 0.5 - y).collect(),
            hess: vec![1.0; 20],
            constant_hessian: Some(1.0),
        };
        let tree = grow_fp(&data, &grads, &GrowConfig::default());
        assert_eq!(tree.num_leaves(), 2);
        let l = tree.predict_row(&[0.0]).unwrap();
        let r = tree.predict_row(&[1.0]).unwrap();
        assert!(l < 0.0 && r > 0.0);
    }

    #[test]
    fn subtraction_matches_direct_builds() {
        let (data, grads) = random_data(1000, 4, 7);
        let scales = compute_scales(&grads, 3).unwrap();
        let q = quantize_gradients(&grads, &scales, Rounding::Stochastic, &CounterRng::new(1), 0);
        for leaves in [4, 16] {
            let with = grow_quantized(
                &data,
                &q,
                &GrowConfig {
                    num_leaves: leaves,
                    ..GrowConfig::default()
                },
                3,
            );
            let without = grow_quantized(
                &data,
                &q,
                &GrowConfig {
                    num_leaves: leaves,
                    histogram_subtraction: false,
                    ..GrowConfig::default()
                },
                3,
            );
            assert_eq!(with, without);
            assert_eq!(with.num_leaves(), leaves);
        }
    }

    #[test]
    fn growth_is_a_prefix_in_num_leaves() {
        let (data, grads) = random_data(800, 3, 8);
        let scales = compute_scales(&grads, 2).unwrap();
        let q = quantize_gradients(&grads, &scales, Rounding::Stochastic, &CounterRng::new(2), 0);
        let mut prev: Option<Tree> = None;
        for leaves in 2..12 {
            let t = grow_quantized(
                &data,
                &q,
                &GrowConfig {
                    num_leaves: leaves,
                    ..GrowConfig::default()
                },
                2,
            );
            if let Some(p) = &prev {
                for (a, b) in p.nodes().iter().zip(t.nodes()) {
                    assert_eq!((a.feature, a.threshold_bin), (b.feature, b.threshold_bin));
                }
            }
            prev = Some(t);
        }
    }

    #[test]
    fn partition_count_does_not_change_tree() {
        let (data, grads) = random_data(600, 3, 9);
        let scales = compute_scales(&grads, 4).unwrap();
        let q = quantize_gradients(&grads, &scales, Rounding::Stochastic, &CounterRng::new(3), 0);
        let config = GrowConfig {
            num_leaves: 8,
            ..GrowConfig::default()
        };
        let reference = grow_quantized(&data, &q, &config, 1);
        for k in [2, 4, 8] {
            assert_eq!(grow_quantized(&data, &q, &config, k), reference);
        }
    }

    #[test]
    fn every_row_reaches_one_leaf() {
        let (data, grads) = random_data(500, 3, 10);
        let tree = grow_fp(
            &data,
            &grads,
            &GrowConfig {
                num_leaves: 10,
                ..GrowConfig::default()
            },
        );
        let mut seen = vec![0; 500];
        for (leaf, rows) in tree.leaf_rows().iter().enumerate() {
            for &r in rows {
                seen[r as usize] += 1;
                assert_eq!(tree.leaf_index_binned(&data, r as usize), leaf);
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        tree.validate().unwrap();
    }

    #[test]
    fn refit_values() {
        let raw = RawDataset::new(vec![0.0, 0.0, 1.0], vec![0.0; 3], 1).unwrap();
        let data = bin_dataset(&raw, 255).unwrap();
        let grads = GradientBuffer {
            grad: vec![1.0, -1.0, 2.0],
            hess: vec![1.0; 3],
            constant_hessian: Some(1.0),
        };
        let mut tree = grow_fp(&data, &grads, &GrowConfig::default());
        assert_eq!(tree.num_leaves(), 2);
        for l in 0..2 {
            tree.set_leaf_value(l, 99.0);
        }
        refit_leaf_values(&mut tree, &grads).unwrap();
        assert_eq!(tree.predict_row(&[0.0]).unwrap(), 0.0);
        assert_eq!(tree.predict_row(&[1.0]).unwrap(), -2.0);
    }

    #[test]
    fn prediction_boundaries() {
        let (data, grads) = random_data(300, 2, 11);
        let tree = grow_fp(
            &data,
            &grads,
            &GrowConfig {
                num_leaves: 6,
                ..GrowConfig::default()
            },
        );
        let root = &tree.nodes()[0];
        let mut row = vec![0.0; 2];
        row[root.feature] = root.threshold;
        let at = tree.leaf_index(&row);
        row[root.feature] = f64::NAN;
        let missing = tree.leaf_index(&row);
        row[root.feature] = f64::NEG_INFINITY;
        assert_eq!(tree.leaf_index(&row), missing);
        // Both the boundary value and missing values take the left branch.
        let mut left_leaves = Vec::new();
        let mut stack = vec![root.left];
        while let Some(c) = stack.pop() {
            match c {
                Child::Leaf(l) => left_leaves.push(l),
                Child::Node(n) => stack.extend([tree.nodes()[n].left, tree.nodes()[n].right]),
            }
        }
        assert!(left_leaves.contains(&at) && left_leaves.contains(&missing));
        assert!(matches!(tree.predict_row(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn tree_json_round_trip() {
        let (data, grads) = random_data(300, 2, 12);
        let tree = grow_fp(
            &data,
            &grads,
            &GrowConfig {
                num_leaves: 5,
                ..GrowConfig::default()
            },
        );
        let s = serde_json::to_string(&tree).unwrap();
        let back: Tree = serde_json::from_str(&s).unwrap();
        assert_eq!(back, tree);
        assert!(!back.has_leaf_rows());
        back.validate().unwrap();
    }
}
