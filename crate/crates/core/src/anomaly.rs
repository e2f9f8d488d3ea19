//! Isolation forest over standardized features.
//!
//! Trees are grown on independent subsamples (without replacement) by
//! picking a splittable feature uniformly and a threshold uniformly inside
//! the node's range of that feature. A point's anomaly score is
//! `2^(-E[h(x)] / c(psi))`, with `h` the path length corrected at
//! truncated leaves by `c(leaf size)`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

const EULER_GAMMA: f64 = 0.577_215_664_9;
const MAGIC: &[u8; 8] = b"MEISOFOR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub subsample_size: usize,
    pub contamination: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 20,
            subsample_size: 50,
            contamination: 0.1,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::arg("isolation forest needs at least one tree"));
        }
        if self.subsample_size < 2 {
            return Err(Error::arg("isolation subsample size must be at least 2"));
        }
        if !(self.contamination > 0.0 && self.contamination <= 0.5) {
            return Err(Error::arg(format!(
                "contamination {} outside (0, 0.5]",
                self.contamination
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IsolationNode {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        size: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    nodes: Vec<IsolationNode>,
    height_limit: usize,
}

impl IsolationTree {
    pub fn nodes(&self) -> &[IsolationNode] {
        &self.nodes
    }

    pub fn height_limit(&self) -> usize {
        self.height_limit
    }

    /// Longest root-to-leaf edge count.
    pub fn height(&self) -> usize {
        fn walk(nodes: &[IsolationNode], at: usize) -> usize {
            match nodes[at] {
                IsolationNode::Leaf { .. } => 0,
                IsolationNode::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        let mut depth = 0usize;
        loop {
            match self.nodes[at] {
                IsolationNode::Leaf { size } => return depth as f64 + average_path_length(size as usize),
                IsolationNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[feature as usize] < threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                    depth += 1;
                }
            }
        }
    }

    fn grow(x: &FeatureMatrix, sample: Vec<usize>, height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = Self {
            nodes: Vec::new(),
            height_limit,
        };
        tree.grow_node(x, sample, 0, rng);
        tree
    }

    fn grow_node(&mut self, x: &FeatureMatrix, rows: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> u32 {
        let slot = self.nodes.len() as u32;
        self.nodes.push(IsolationNode::Leaf { size: rows.len() as u32 });
        if depth >= self.height_limit || rows.len() <= 1 {
            return slot;
        }
        let ranges: Vec<(usize, f64, f64)> = (0..x.cols())
            .filter_map(|f| {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                    let v = x.get(r, f);
                    (lo.min(v), hi.max(v))
                });
                let mid = lo + (hi - lo) / 2.0;
                (mid > lo && mid < hi).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return slot;
        }
        let (feature, lo, hi) = ranges[rng.gen_range(0..ranges.len())];
        let threshold = sample_open_interval(rng, lo, hi);
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| x.get(r, feature) < threshold);
        let left = self.grow_node(x, left_rows, depth + 1, rng);
        let right = self.grow_node(x, right_rows, depth + 1, rng);
        self.nodes[slot as usize] = IsolationNode::Split {
            feature: feature as u32,
            threshold,
            left,
            right,
        };
        slot
    }
}

/// Uniform draw strictly inside `(lo, hi)`.
fn sample_open_interval(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    for _ in 0..64 {
        let t = rng.gen_range(lo..hi);
        if t > lo {
            return t;
        }
    }
    lo + (hi - lo) / 2.0
}

/// Average unsuccessful-search path length in a binary search tree of
/// `n` keys, the usual isolation normalizer `c(n)`.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<IsolationTree>,
    arity: usize,
    subsample_size: usize,
    contamination: f64,
    threshold: f64,
    seed: u64,
}

impl ForestModel {
    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn subsample_size(&self) -> usize {
        self.subsample_size
    }

    pub fn contamination(&self) -> f64 {
        self.contamination
    }

    /// Scores strictly above this value are anomalous.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.arity {
            return Err(Error::arg(format!(
                "expected {} features, got {}",
                self.arity,
                x.len()
            )));
        }
        Ok(self.score_unchecked(x))
    }

    fn score_unchecked(&self, x: &[f64]) -> f64 {
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        let mean = total / self.trees.len() as f64;
        2f64.powf(-mean / average_path_length(self.subsample_size))
    }

    pub fn scores(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        x.check_arity(self.arity)?;
        Ok(x.iter_rows().map(|row| self.score_unchecked(row)).collect())
    }

    pub fn is_anomaly(&self, x: &[f64]) -> Result<bool> {
        Ok(self.score(x)? > self.threshold)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(MAGIC, VERSION);
        w.len_u32(self.arity);
        w.len_u32(self.subsample_size);
        w.f64(self.contamination);
        w.f64(self.threshold);
        w.u64(self.seed);
        w.len_u32(self.trees.len());
        for tree in &self.trees {
            w.len_u32(tree.height_limit);
            w.len_u32(tree.nodes.len());
            for node in &tree.nodes {
                match *node {
                    IsolationNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        w.u8(0);
                        w.u32(feature);
                        w.f64(threshold);
                        w.u32(left);
                        w.u32(right);
                    }
                    IsolationNode::Leaf { size } => {
                        w.u8(1);
                        w.u32(size);
                        w.f64(0.0);
                        w.u32(0);
                        w.u32(0);
                    }
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, MAGIC, VERSION)?;
        let arity = r.u32()? as usize;
        let subsample_size = r.u32()? as usize;
        let contamination = r.f64()?;
        let threshold = r.f64()?;
        let seed = r.u64()?;
        let n_trees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            let height_limit = r.u32()? as usize;
            let n_nodes = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes.min(1 << 16));
            for _ in 0..n_nodes {
                let tag = r.u8()?;
                let a = r.u32()?;
                let threshold = r.f64()?;
                let left = r.u32()?;
                let right = r.u32()?;
                nodes.push(match tag {
                    0 => {
                        if a as usize >= arity || left as usize >= n_nodes || right as usize >= n_nodes {
                            return Err(Error::format("isolation node index out of range"));
                        }
                        IsolationNode::Split {
                            feature: a,
                            threshold,
                            left,
                            right,
                        }
                    }
                    1 => IsolationNode::Leaf { size: a },
                    t => return Err(Error::format(format!("unknown node tag {t}"))),
                });
            }
            if nodes.is_empty() {
                return Err(Error::format("empty isolation tree"));
            }
            trees.push(IsolationTree { nodes, height_limit });
        }
        r.finish()?;
        if trees.is_empty() || subsample_size < 2 {
            return Err(Error::format("forest header is inconsistent"));
        }
        Ok(Self {
            trees,
            arity,
            subsample_size,
            contamination,
            threshold,
            seed,
        })
    }
}

/// Fits the forest and sets the anomaly threshold at the
/// `(1 - contamination)` quantile of the training scores.
///
/// Each tree draws from its own ChaCha stream (stream id = tree index), so
/// the parallel build is bit-identical to a sequential one.
pub fn fit_forest(x: &FeatureMatrix, params: &ForestParams, seed: u64) -> Result<ForestModel> {
    params.validate()?;
    if x.rows() < params.subsample_size {
        return Err(Error::size(format!(
            "isolation forest needs at least {} rows, got {}",
            params.subsample_size,
            x.rows()
        )));
    }
    let height_limit = (params.subsample_size as f64).log2().ceil() as usize;
    let trees: Vec<IsolationTree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let sample = index::sample(&mut rng, x.rows(), params.subsample_size).into_vec();
            IsolationTree::grow(x, sample, height_limit, &mut rng)
        })
        .collect();
    let mut model = ForestModel {
        trees,
        arity: x.cols(),
        subsample_size: params.subsample_size,
        contamination: params.contamination,
        threshold: f64::INFINITY,
        seed,
    };
    let scores = model.scores(x)?;
    model.threshold = contamination_threshold(&scores, params.contamination);
    Ok(model)
}

/// Score of the `ceil(c * n) + 1`-th most anomalous row. Flagging scores
/// strictly above it marks `ceil(c * n)` rows, fewer when rows tie at the
/// cut: tied rows are never flagged.
fn contamination_threshold(scores: &[f64], contamination: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n_flag = (contamination * sorted.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    sorted[n_flag.min(sorted.len() - 1)]
}

pub fn anomaly_score(m: &ForestModel, x: &[f64]) -> Result<f64> {
    m.score(x)
}

/// `true` for rows whose score exceeds the model threshold.
pub fn flag_anomalies(m: &ForestModel, x: &FeatureMatrix) -> Result<Vec<bool>> {
    Ok(m.scores(x)?.into_iter().map(|s| s > m.threshold).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{apply_scaler, fit_scaler, split, synth_ccpp};
    use rand_distr::Distribution;

    fn one_d(values: &[f64]) -> FeatureMatrix {
        FeatureMatrix::column(values)
    }

    fn small_params(trees: usize, subsample: usize) -> ForestParams {
        ForestParams {
            n_trees: trees,
            subsample_size: subsample,
            contamination: 0.1,
        }
    }

    #[test]
    fn normalizer_values() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        let c256 = average_path_length(256);
        assert!((c256 - 10.244).abs() < 1e-3, "{c256}");
    }

    #[test]
    fn expected_depth_equal_to_normalizer_scores_half() {
        // identical rows never split, so every tree is one leaf of size psi
        let x = one_d(&[3.0; 64]);
        let m = fit_forest(&x, &small_params(5, 16), 1).unwrap();
        assert!(m.trees().iter().all(|t| t.nodes().len() == 1));
        assert_eq!(m.score(&[3.0]).unwrap(), 0.5);
    }

    #[test]
    fn ccpp_training_flags_contamination_share() {
        let d = synth_ccpp(9568, 1).unwrap();
        let (train, _) = split(&d, 0.9, 42).unwrap();
        let s = fit_scaler(&train).unwrap();
        let x = apply_scaler(&s, &train);
        let m = fit_forest(&x, &ForestParams::default(), 17).unwrap();
        let flagged = flag_anomalies(&m, &x).unwrap().iter().filter(|&&f| f).count();
        assert!((861..=862).contains(&flagged), "flagged {flagged}");
    }

    #[test]
    fn fit_is_deterministic() {
        let d = synth_ccpp(500, 5).unwrap();
        let x = d.features();
        let a = fit_forest(&x, &ForestParams::default(), 9).unwrap();
        let b = fit_forest(&x, &ForestParams::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scores(&x).unwrap(), b.scores(&x).unwrap());
        let c = fit_forest(&x, &ForestParams::default(), 10).unwrap();
        assert_ne!(a.trees(), c.trees());
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = one_d(&[1.0]);
        assert!(matches!(fit_forest(&x, &ForestParams::default(), 0), Err(Error::Size(_))));
        let x = one_d(&(0..100).map(f64::from).collect::<Vec<_>>());
        for c in [0.0, 0.51, -0.2] {
            let p = ForestParams { contamination: c, ..Default::default() };
            assert!(matches!(fit_forest(&x, &p, 0), Err(Error::InvalidArgument(_))));
        }
        let m = fit_forest(&x, &ForestParams::default(), 0).unwrap();
        assert!(m.score(&[1.0, 2.0]).is_err());
        assert!(flag_anomalies(&m, &FeatureMatrix::from_rows(&[[1.0, 2.0]]).unwrap()).is_err());
    }

    #[test]
    fn empty_matrix_gives_empty_mask() {
        let x = one_d(&(0..100).map(f64::from).collect::<Vec<_>>());
        let m = fit_forest(&x, &ForestParams::default(), 0).unwrap();
        assert!(flag_anomalies(&m, &FeatureMatrix::empty(1)).unwrap().is_empty());
    }

    #[test]
    fn tree_invariants_hold() {
        let d = synth_ccpp(2000, 8).unwrap();
        let x = d.features();
        let m = fit_forest(&x, &ForestParams::default(), 3).unwrap();
        for t in m.trees() {
            assert_eq!(t.height_limit(), 6);
            assert!(t.height() <= t.height_limit());
            let leaf_total: u32 = t
                .nodes()
                .iter()
                .map(|n| match n {
                    IsolationNode::Leaf { size } => *size,
                    _ => 0,
                })
                .sum();
            assert_eq!(leaf_total, 50);
        }
    }

    #[test]
    fn thresholds_fall_strictly_inside_node_range() {
        // replay the build to recover each node's rows
        let x = one_d(&[0.0, 0.0, 1.0, 1.0, 1.0, 2.5, 7.0, 7.0, 9.0, 9.5]);
        let m = fit_forest(&x, &small_params(30, 10), 4).unwrap();
        for t in m.trees() {
            let mut stack = vec![(0usize, (0..10).collect::<Vec<usize>>())];
            while let Some((at, rows)) = stack.pop() {
                if let IsolationNode::Split { feature, threshold, left, right } = t.nodes()[at] {
                    let vals: Vec<f64> = rows.iter().map(|&r| x.get(r, feature as usize)).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert!(threshold > lo && threshold < hi);
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.into_iter().partition(|&r| x.get(r, feature as usize) < threshold);
                    stack.push((left as usize, l));
                    stack.push((right as usize, r));
                }
            }
        }
    }

    #[test]
    fn far_point_gets_top_score() {
        let mut values: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        values.push(10.0);
        let x = one_d(&values);
        for seed in 0..12 {
            let m = fit_forest(&x, &small_params(100, 8), seed).unwrap();
            let s = m.scores(&x).unwrap();
            let argmax = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            assert_eq!(argmax, 10, "seed {seed}: {s:?}");
        }
    }

    #[test]
    fn duplicate_of_dense_point_scores_below_median() {
        let mut values: Vec<f64> = (0..40).map(|i| 5.0 + (i as f64 - 20.0) * 0.01).collect();
        values.extend([0.0, 1.0, 2.0, 8.0, 9.0, 10.0]);
        let dense = 5.0;
        values.push(dense);
        let x = one_d(&values);
        for seed in 0..10 {
            let m = fit_forest(&x, &small_params(100, 32), seed).unwrap();
            let mut s = m.scores(&x).unwrap();
            let dup = m.score(&[dense]).unwrap();
            s.sort_by(f64::total_cmp);
            let median = s[s.len() / 2];
            assert!(dup < median, "seed {seed}: {dup} vs median {median}");
        }
    }

    #[test]
    fn moving_outward_does_not_lower_score() {
        // one-sided sign test at 5%: at least 15 of 20 seeds non-decreasing
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..200).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        let x = one_d(&values);
        let probes = [0.0, 1.0, 2.0, 3.0, 10.0];
        let mut non_decreasing = vec![0usize; probes.len() - 1];
        for seed in 0..20 {
            let m = fit_forest(&x, &small_params(50, 32), seed).unwrap();
            let s: Vec<f64> = probes.iter().map(|&p| m.score(&[p]).unwrap()).collect();
            for i in 0..probes.len() - 1 {
                if s[i + 1] >= s[i] {
                    non_decreasing[i] += 1;
                }
            }
        }
        for (i, &count) in non_decreasing.iter().enumerate() {
            assert!(count >= 15, "probe {i}: {count}/20");
        }
    }

    #[test]
    fn score_bounds() {
        let d = synth_ccpp(600, 2).unwrap();
        let x = d.features();
        let m = fit_forest(&x, &ForestParams::default(), 1).unwrap();
        for s in m.scores(&x).unwrap() {
            assert!(s > 0.0 && s < 1.0);
        }
        let far = m.score(&[1e9, -1e9, 1e9, -1e9]).unwrap();
        assert!(far > 0.0 && far < 1.0);
    }

    #[test]
    fn serialization_round_trip() {
        let d = synth_ccpp(300, 2).unwrap();
        let x = d.features();
        let m = fit_forest(&x, &ForestParams::default(), 5).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = ForestModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(ForestModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(ForestModel::from_bytes(&bad).is_err());
    }
}
