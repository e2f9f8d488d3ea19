//! Least-squares gradient boosting over shallow regression trees.
//!
//! Trees are grown level by level with an exact greedy split search: each
//! feature column is sorted once per fit, and every level scans each
//! column once, keeping running left-side sums per frontier node.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

const MAGIC: &[u8; 8] = b"MEGBRT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GbrtProfile {
    Paper,
    Fast,
}

impl GbrtProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            GbrtProfile::Paper => "paper",
            GbrtProfile::Fast => "fast",
        }
    }
}

impl fmt::Display for GbrtProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GbrtProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(GbrtProfile::Paper),
            "fast" => Ok(GbrtProfile::Fast),
            other => Err(Error::arg(format!("unknown gbrt profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbrtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Recorded with the model; the fit itself does no subsampling.
    pub seed: u64,
}

impl GbrtParams {
    pub fn paper() -> Self {
        Self {
            n_trees: 9000,
            learning_rate: 0.0075,
            max_depth: 3,
            min_samples_leaf: 5,
            seed: 0,
        }
    }

    pub fn fast() -> Self {
        Self {
            n_trees: 1500,
            learning_rate: 0.045,
            ..Self::paper()
        }
    }

    pub fn profile(profile: GbrtProfile) -> Self {
        match profile {
            GbrtProfile::Paper => Self::paper(),
            GbrtProfile::Fast => Self::fast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::arg(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::arg("min_samples_leaf must be at least 1"));
        }
        Ok(())
    }
}

impl Default for GbrtParams {
    fn default() -> Self {
        Self::paper()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] <= threshold {
                        left
                    } else {
                        right
                    } as usize;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    base_prediction: f64,
    trees: Vec<RegressionTree>,
    params: GbrtParams,
    arity: usize,
}

impl BoostedEnsemble {
    pub fn base_prediction(&self) -> f64 {
        self.base_prediction
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn params(&self) -> &GbrtParams {
        &self.params
    }

    pub fn learning_rate(&self) -> f64 {
        self.params.learning_rate
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    /// `base + lr * sum(tree outputs)`, summing the trees in order.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.arity {
            return Err(Error::arg(format!(
                "expected {} features, got {}",
                self.arity,
                x.len()
            )));
        }
        let mut acc = 0.0;
        for tree in &self.trees {
            acc += tree.predict(x);
        }
        Ok(self.base_prediction + self.params.learning_rate * acc)
    }

    pub fn predict_all(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        x.iter_rows().map(|row| self.predict(row)).collect()
    }

    /// Mean squared error on `(x, y)` after 0, 1, ..., `n_trees` trees.
    pub fn staged_mse(&self, x: &FeatureMatrix, y: &[f64]) -> Result<Vec<f64>> {
        check_xy(x, y)?;
        if x.cols() != self.arity {
            return Err(Error::arg("arity mismatch"));
        }
        let mut acc = vec![0.0; y.len()];
        let mse = |acc: &[f64]| {
            acc.iter()
                .zip(y)
                .map(|(a, t)| {
                    let e = t - (self.base_prediction + self.params.learning_rate * a);
                    e * e
                })
                .sum::<f64>()
                / y.len() as f64
        };
        let mut out = Vec::with_capacity(self.trees.len() + 1);
        out.push(mse(&acc));
        for tree in &self.trees {
            for (a, row) in acc.iter_mut().zip(x.iter_rows()) {
                *a += tree.predict(row);
            }
            out.push(mse(&acc));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(MAGIC, VERSION);
        w.f64(self.base_prediction);
        w.f64(self.params.learning_rate);
        w.len_u32(self.params.max_depth);
        w.len_u32(self.params.min_samples_leaf);
        w.u64(self.params.seed);
        w.len_u32(self.arity);
        w.len_u32(self.trees.len());
        for tree in &self.trees {
            w.len_u32(tree.nodes.len());
            for node in &tree.nodes {
                match *node {
                    TreeNode::Split {
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
                    TreeNode::Leaf { value } => {
                        w.u8(1);
                        w.u32(0);
                        w.f64(value);
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
        let base_prediction = r.f64()?;
        let learning_rate = r.f64()?;
        let max_depth = r.u32()? as usize;
        let min_samples_leaf = r.u32()? as usize;
        let seed = r.u64()?;
        let arity = r.u32()? as usize;
        let n_trees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            let n_nodes = r.u32()? as usize;
            if n_nodes == 0 {
                return Err(Error::format("tree without nodes"));
            }
            let mut nodes = Vec::with_capacity(n_nodes.min(1 << 16));
            for i in 0..n_nodes {
                let tag = r.u8()?;
                let feature = r.u32()?;
                let value = r.f64()?;
                let left = r.u32()?;
                let right = r.u32()?;
                let node = match tag {
                    0 => {
                        // children always follow their parent, which rules out cycles
                        let ok = |c: u32| (c as usize) > i && (c as usize) < n_nodes;
                        if !ok(left) || !ok(right) || feature as usize >= arity {
                            return Err(Error::format("tree node out of range"));
                        }
                        TreeNode::Split {
                            feature,
                            threshold: value,
                            left,
                            right,
                        }
                    }
                    1 if value.is_finite() => TreeNode::Leaf { value },
                    1 => return Err(Error::format("non-finite leaf value")),
                    t => return Err(Error::format(format!("unknown node tag {t}"))),
                };
                nodes.push(node);
            }
            trees.push(RegressionTree { nodes });
        }
        r.finish()?;
        let params = GbrtParams {
            n_trees,
            learning_rate,
            max_depth,
            min_samples_leaf,
            seed,
        };
        params.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(Self {
            base_prediction,
            trees,
            params,
            arity,
        })
    }
}

fn check_xy(x: &FeatureMatrix, y: &[f64]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::arg(format!(
            "{} feature rows but {} targets",
            x.rows(),
            y.len()
        )));
    }
    Ok(())
}

/// Frontier node during level-wise growth.
struct Open {
    node: usize,
    sum: f64,
    count: usize,
}

#[derive(Clone, Copy)]
struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct TreeGrower<'a> {
    columns: &'a [Vec<f64>],
    sorted: &'a [Vec<u32>],
    max_depth: usize,
    min_leaf: usize,
}

const CLOSED: u32 = u32::MAX;

impl TreeGrower<'_> {
    /// Fits one tree to `residual`, writing each row's leaf value to `fitted`.
    fn grow(&self, residual: &[f64], slot: &mut [u32], fitted: &mut [f64]) -> RegressionTree {
        let n = residual.len();
        slot.fill(0);
        let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
        let mut open = vec![Open {
            node: 0,
            sum: 0.0,
            count: 0,
        }];
        for depth in 0..=self.max_depth {
            for o in open.iter_mut() {
                o.sum = 0.0;
                o.count = 0;
            }
            for (&s, &r) in slot.iter().zip(residual) {
                if s != CLOSED {
                    open[s as usize].sum += r;
                    open[s as usize].count += 1;
                }
            }
            let best = if depth < self.max_depth {
                self.best_splits(residual, slot, &open)
            } else {
                vec![None; open.len()]
            };

            // new slot per open node: Some((left slot, feature, threshold)) when split
            let mut next = Vec::new();
            let mut route: Vec<Option<(u32, usize, f64)>> = Vec::with_capacity(open.len());
            let mut leaf_value = vec![0.0; open.len()];
            for (s, o) in open.iter().enumerate() {
                match best[s] {
                    Some(b) => {
                        let left = nodes.len();
                        nodes.push(TreeNode::Leaf { value: 0.0 });
                        nodes.push(TreeNode::Leaf { value: 0.0 });
                        nodes[o.node] = TreeNode::Split {
                            feature: b.feature as u32,
                            threshold: b.threshold,
                            left: left as u32,
                            right: left as u32 + 1,
                        };
                        route.push(Some((next.len() as u32, b.feature, b.threshold)));
                        for node in [left, left + 1] {
                            next.push(Open {
                                node,
                                sum: 0.0,
                                count: 0,
                            });
                        }
                    }
                    None => {
                        let value = o.sum / o.count as f64;
                        nodes[o.node] = TreeNode::Leaf { value };
                        leaf_value[s] = value;
                        route.push(None);
                    }
                }
            }
            for row in 0..n {
                let s = slot[row];
                if s == CLOSED {
                    continue;
                }
                match route[s as usize] {
                    Some((left, feature, threshold)) => {
                        slot[row] = if self.columns[feature][row] <= threshold {
                            left
                        } else {
                            left + 1
                        };
                    }
                    None => {
                        fitted[row] = leaf_value[s as usize];
                        slot[row] = CLOSED;
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            open = next;
        }
        RegressionTree { nodes }
    }

    fn best_splits(&self, residual: &[f64], slot: &[u32], open: &[Open]) -> Vec<Option<BestSplit>> {
        let m = open.len();
        let mut best: Vec<Option<BestSplit>> = vec![None; m];
        let mut left_sum = vec![0.0; m];
        let mut left_count = vec![0usize; m];
        let mut last_x = vec![0.0; m];
        for (feature, (column, order)) in self.columns.iter().zip(self.sorted).enumerate() {
            left_sum.fill(0.0);
            left_count.fill(0);
            for &row in order {
                let s = slot[row as usize];
                if s == CLOSED {
                    continue;
                }
                let s = s as usize;
                let x = column[row as usize];
                let nl = left_count[s];
                let nr = open[s].count - nl;
                if nl >= self.min_leaf && nr >= self.min_leaf && x > last_x[s] {
                    let sl = left_sum[s];
                    let sr = open[s].sum - sl;
                    let total = open[s].sum;
                    let gain = sl * sl / nl as f64 + sr * sr / nr as f64
                        - total * total / open[s].count as f64;
                    if gain > best[s].map_or(0.0, |b| b.gain) {
                        let mut threshold = 0.5 * (last_x[s] + x);
                        if threshold >= x {
                            threshold = last_x[s];
                        }
                        best[s] = Some(BestSplit {
                            gain,
                            feature,
                            threshold,
                        });
                    }
                }
                left_sum[s] += residual[row as usize];
                left_count[s] = nl + 1;
                last_x[s] = x;
            }
        }
        best
    }
}

/// Least-squares gradient boosting.
pub fn fit_gbrt(x: &FeatureMatrix, y: &[f64], params: &GbrtParams) -> Result<BoostedEnsemble> {
    params.validate()?;
    check_xy(x, y)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("targets must be finite"));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("features must be finite"));
    }
    let n = y.len();
    if n == 0 || n < 2 * params.min_samples_leaf {
        return Err(Error::size(format!(
            "{n} rows cannot support min_samples_leaf = {}",
            params.min_samples_leaf
        )));
    }
    let columns: Vec<Vec<f64>> = (0..x.cols())
        .map(|c| x.iter_rows().map(|row| row[c]).collect())
        .collect();
    let sorted: Vec<Vec<u32>> = columns
        .iter()
        .map(|col| {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            order
        })
        .collect();
    let grower = TreeGrower {
        columns: &columns,
        sorted: &sorted,
        max_depth: params.max_depth,
        min_leaf: params.min_samples_leaf,
    };

    let base_prediction = y.iter().sum::<f64>() / n as f64;
    let lr = params.learning_rate;
    // same accumulation order as `predict`, so fitted values match it bit for bit
    let mut acc = vec![0.0; n];
    let mut residual: Vec<f64> = y.iter().map(|t| t - base_prediction).collect();
    let mut slot = vec![0u32; n];
    let mut fitted = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        let tree = grower.grow(&residual, &mut slot, &mut fitted);
        for i in 0..n {
            acc[i] += fitted[i];
            residual[i] = y[i] - (base_prediction + lr * acc[i]);
        }
        trees.push(tree);
    }
    Ok(BoostedEnsemble {
        base_prediction,
        trees,
        params: *params,
        arity: x.cols(),
    })
}

pub fn predict(model: &BoostedEnsemble, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub ae: f64,
    pub r2: f64,
}

impl RegressionMetrics {
    /// Field-wise mean; `rmse` is the mean of the per-fold values.
    pub fn mean(all: &[RegressionMetrics]) -> Result<Self> {
        if all.is_empty() {
            return Err(Error::arg("no metrics to average"));
        }
        let n = all.len() as f64;
        let avg = |f: fn(&RegressionMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mse: avg(|m| m.mse),
            rmse: avg(|m| m.rmse),
            ae: avg(|m| m.ae),
            r2: avg(|m| m.r2),
        })
    }
}

fn check_pair(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::arg(format!(
            "{} observations but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::arg("metrics of an empty sample"));
    }
    Ok(())
}

/// MSE, RMSE, mean absolute error and R^2. With constant `y_true`, R^2 is
/// 1 for a perfect fit and 0 otherwise.
pub fn metrics(y_true: &[f64], y_pred: &[f64]) -> Result<RegressionMetrics> {
    check_pair(y_true, y_pred)?;
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let (mut sse, mut sae, mut sst) = (0.0, 0.0, 0.0);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let e = t - p;
        sse += e * e;
        sae += e.abs();
        sst += (t - mean) * (t - mean);
    }
    let mse = sse / n;
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(RegressionMetrics {
        mse,
        rmse: mse.sqrt(),
        ae: sae / n,
        r2,
    })
}

/// Fold index per row: a seeded shuffle dealt round-robin into `folds`.
pub fn fold_assignments(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::arg(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(Error::arg(format!("{folds} folds for {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos % folds;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<RegressionMetrics>,
    pub mean: RegressionMetrics,
}

/// Cross-validation with an arbitrary learner. `fit_predict` receives the
/// training rows, their targets and the held-out rows, and returns one
/// prediction per held-out row.
pub fn kfold_cv_with<F>(x: &FeatureMatrix, y: &[f64], folds: usize, seed: u64, mut fit_predict: F) -> Result<CvReport>
where
    F: FnMut(&FeatureMatrix, &[f64], &FeatureMatrix) -> Result<Vec<f64>>,
{
    check_xy(x, y)?;
    let assignment = fold_assignments(y.len(), folds, seed)?;
    let mut per_fold = Vec::with_capacity(folds);
    for f in 0..folds {
        let (held, kept): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| assignment[i] == f);
        let train_y: Vec<f64> = kept.iter().map(|&i| y[i]).collect();
        let test_y: Vec<f64> = held.iter().map(|&i| y[i]).collect();
        let pred = fit_predict(&x.select(&kept), &train_y, &x.select(&held))?;
        per_fold.push(metrics(&test_y, &pred)?);
    }
    Ok(CvReport {
        mean: RegressionMetrics::mean(&per_fold)?,
        folds: per_fold,
    })
}

pub fn kfold_cv(x: &FeatureMatrix, y: &[f64], folds: usize, params: &GbrtParams, seed: u64) -> Result<CvReport> {
    kfold_cv_with(x, y, folds, seed, |tx, ty, vx| fit_gbrt(tx, ty, params)?.predict_all(vx))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub observed: f64,
    pub predicted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualExport {
    pub rows: Vec<Residual>,
    /// `(theoretical normal quantile, standardized residual)`, both ascending.
    pub qq: Vec<(f64, f64)>,
}

impl ResidualExport {
    pub fn residuals_csv(&self) -> String {
        let mut out = String::from("observed,predicted,residual\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.observed, r.predicted, r.residual));
        }
        out
    }

    pub fn qq_csv(&self) -> String {
        let mut out = String::from("theoretical,sample\n");
        for (t, s) in &self.qq {
            out.push_str(&format!("{t},{s}\n"));
        }
        out
    }
}

/// Residuals `observed - predicted` and normal Q-Q pairs using plotting
/// positions `(i - 0.5) / n` and residuals scaled by their sample standard
/// deviation.
pub fn residuals(y_true: &[f64], y_pred: &[f64]) -> Result<ResidualExport> {
    check_pair(y_true, y_pred)?;
    let rows: Vec<Residual> = y_true
        .iter()
        .zip(y_pred)
        .map(|(&observed, &predicted)| Residual {
            observed,
            predicted,
            residual: observed - predicted,
        })
        .collect();
    let n = rows.len();
    let mean = rows.iter().map(|r| r.residual).sum::<f64>() / n as f64;
    let var = if n > 1 {
        rows.iter().map(|r| (r.residual - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let sd = var.sqrt();
    let mut standardized: Vec<f64> = rows
        .iter()
        .map(|r| if sd > 0.0 { (r.residual - mean) / sd } else { 0.0 })
        .collect();
    standardized.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let qq = standardized
        .into_iter()
        .enumerate()
        .map(|(i, s)| (normal.inverse_cdf((i as f64 + 0.5) / n as f64), s))
        .collect();
    Ok(ResidualExport { rows, qq })
}
