//! Exact Shapley values of training rows under an unweighted KNN-regression
//! utility.
//!
//! For a reference point `(x, y)` and a coalition `S` of training rows, the
//! utility is `U(S) = -(mean of the targets of the min(k, |S|) members of S
//! nearest to x - y)^2`, and `U(empty) = -(mean of all training targets -
//! y)^2`. Values are averaged over the reference points.
//!
//! Per reference point the rows are sorted by distance (ties by row index).
//! The value of the farthest row only depends on coalitions smaller than
//! `k` and has a closed form in the first two moments of the other
//! residuals. Adjacent rows in the ranking differ by a sum over the
//! coalitions that contain neither of them; with the coalition-size
//! weights folded in, that sum reduces to hypergeometric tail weights
//! that depend only on `(N, k)` and on rank, plus prefix/suffix sums of the
//! residuals. One reference point therefore costs a sort plus `O(N + k)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, FeatureMatrix};

/// Feature rows with one real target each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    x: FeatureMatrix,
    y: Vec<f64>,
}

impl LabeledSet {
    pub fn new(x: FeatureMatrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::arg(format!(
                "{} feature rows but {} targets",
                x.rows(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("targets must be finite"));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &FeatureMatrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            x: self.x.select(positions),
            y: positions.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::arg("targets must be finite"));
        }
        self.x.push_row(x)?;
        self.y.push(y);
        Ok(())
    }

    fn mean_target(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }
}

/// Training rows sorted by distance to each reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborRanking {
    orders: Vec<Vec<u32>>,
}

impl NeighborRanking {
    pub fn order(&self, reference: usize) -> &[u32] {
        &self.orders[reference]
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }
}

/// Row indices ordered by ascending `(distance, index)`.
fn ranked_rows(train_x: &FeatureMatrix, point: &[f64]) -> (Vec<u32>, Vec<f64>) {
    let dist: Vec<f64> = train_x.iter_rows().map(|row| squared_distance(row, point)).collect();
    let mut order: Vec<u32> = (0..train_x.rows() as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        dist[a as usize]
            .total_cmp(&dist[b as usize])
            .then(a.cmp(&b))
    });
    let sorted = order.iter().map(|&i| dist[i as usize]).collect();
    (order, sorted)
}

/// Full exact sort of the training rows for every reference row.
pub fn knn_sorted_indices(train_x: &FeatureMatrix, ref_x: &FeatureMatrix) -> Result<NeighborRanking> {
    if train_x.is_empty() || ref_x.is_empty() {
        return Err(Error::arg("neighbor ranking needs non-empty training and reference sets"));
    }
    if train_x.cols() != ref_x.cols() {
        return Err(Error::arg(format!(
            "training arity {} differs from reference arity {}",
            train_x.cols(),
            ref_x.cols()
        )));
    }
    let orders = ref_x.iter_rows().map(|p| ranked_rows(train_x, p).0).collect();
    Ok(NeighborRanking { orders })
}

/// Utility of a coalition of training rows for one reference point.
///
/// The empty coalition predicts the mean target of the whole training set.
pub fn knn_utility(train: &LabeledSet, subset: &[usize], ref_x: &[f64], ref_y: f64, k: usize) -> f64 {
    if subset.is_empty() {
        let err = train.mean_target() - ref_y;
        return -err * err;
    }
    let mut members: Vec<(f64, usize)> = subset
        .iter()
        .map(|&i| (squared_distance(train.x.row(i), ref_x), i))
        .collect();
    members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let m = k.min(members.len());
    let prediction = members[..m].iter().map(|&(_, i)| train.y[i]).sum::<f64>() / m as f64;
    let err = prediction - ref_y;
    -err * err
}

/// Rank weights of one game size, shared by every reference point.
#[derive(Debug, Clone)]
struct GameWeights {
    n: usize,
    k: usize,
    /// Weight of a row ranked below the swapped pair, by the number of
    /// other rows above it.
    below: Vec<f64>,
    /// Weight of the pair itself, by the number of rows above it.
    pair: Vec<f64>,
    small_pair: f64,
    small_pool: f64,
}

impl GameWeights {
    fn new(n: usize, k: usize) -> Self {
        let tri = |m: usize| (m * (m + 1) / 2) as f64;
        let pool = n.saturating_sub(2);
        let mf = pool as f64;
        let s_max = (k - 1).min(pool);

        // sum over coalition sizes s >= k of P_s(j in S, at most k-2 of the
        // R rows above j in S); the all-sizes sum comes from a random
        // permutation with a pivot, the sizes below k are subtracted
        let small_below = if pool > 0 { tri(s_max) / mf } else { 0.0 };
        let below = (0..pool)
            .map(|r| {
                let r1 = (r + 1) as f64;
                (mf + 1.0) * tri((k - 1).min(r + 1)) / (r1 * (r1 + 1.0)) - small_below
            })
            .collect();
        // sum over s >= k of P_s(at most k-1 of the R rows above the pair in S)
        let small_pair_count = k.min(pool + 1) as f64;
        let pair = (0..=pool)
            .map(|r| {
                let r1 = (r + 1) as f64;
                (mf + 1.0) * k.min(r + 1) as f64 / r1 - small_pair_count
            })
            .collect();

        let mut small_pair = 0.0;
        let mut small_pool = 0.0;
        for s in 0..=s_max {
            let d = ((s + 1) * (s + 1)) as f64;
            small_pair += 1.0 / d;
            if pool > 0 {
                small_pool += 2.0 * s as f64 / (mf * d);
            }
        }
        Self {
            n,
            k,
            below,
            pair,
            small_pair,
            small_pool,
        }
    }

    /// Value of the last-ranked row; only coalitions smaller than `k` see it.
    fn last_value(&self, z_last: f64, total: f64, total_sq: f64, u_empty: f64) -> f64 {
        let n = self.n;
        let pool = (n - 1) as f64;
        let a = total - z_last;
        let b = total_sq - z_last * z_last;
        let mut acc = -z_last * z_last - u_empty;
        for s in 1..=(self.k - 1).min(n - 1) {
            let sf = s as f64;
            let mean_sum = sf * a / pool;
            let mut mean_sq = sf * b / pool;
            if n >= 3 {
                mean_sq += sf * (sf - 1.0) / (pool * (pool - 1.0)) * (a * a - b);
            }
            let with = (mean_sq + 2.0 * z_last * mean_sum + z_last * z_last) / ((sf + 1.0) * (sf + 1.0));
            acc += mean_sq / (sf * sf) - with;
        }
        acc / n as f64
    }

    /// Values at ranks `start..n` of one reference game.
    ///
    /// `tail[i]` is the residual `y - y_ref` at rank `start + i`; `head`
    /// holds the running sums of residuals and squared residuals over
    /// ranks `0..start`, accumulated left to right from zero. Running the
    /// routine on a suffix is bit-identical to running it on the full
    /// ranking and discarding the head.
    fn rank_values(&self, tail: &[f64], start: usize, head: (f64, f64), u_empty: f64, prefix: &mut Vec<f64>, out: &mut Vec<f64>) {
        let n = self.n;
        debug_assert_eq!(start + tail.len(), n);
        prefix.clear();
        let (mut sum, mut sq) = head;
        for &z in tail {
            prefix.push(sum);
            sum += z;
            sq += z * z;
        }
        out.clear();
        out.resize(tail.len(), 0.0);
        let last = tail.len() - 1;
        out[last] = self.last_value(tail[last], sum, sq, u_empty);
        if n == 1 {
            return;
        }
        let scale = 1.0 / (n - 1) as f64;
        let kk = (self.k * self.k) as f64;
        let mut below = 0.0;
        for i in (0..last).rev() {
            let q = start + i;
            let (zq, zn) = (tail[i], tail[i + 1]);
            let pair = zq + zn;
            let above = if q >= 1 { self.below[q - 1] * prefix[i] } else { 0.0 };
            let small = self.small_pool * (sum - pair) + self.small_pair * pair;
            let large = (2.0 * (above + below) + pair * self.pair[q]) / kk;
            out[i] = out[i + 1] + (zn - zq) * (small + large) * scale;
            if q >= 1 {
                below += zn * self.below[q - 1];
            }
        }
    }
}

fn check_game(train: &LabeledSet, refs: &LabeledSet, k: usize) -> Result<()> {
    if train.is_empty() {
        return Err(Error::arg("valuation needs at least one training row"));
    }
    if refs.is_empty() {
        return Err(Error::arg("valuation needs at least one reference point"));
    }
    if train.x.cols() != refs.x.cols() {
        return Err(Error::arg(format!(
            "training arity {} differs from reference arity {}",
            train.x.cols(),
            refs.x.cols()
        )));
    }
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    if k > train.len() {
        return Err(Error::arg(format!(
            "k = {k} exceeds the {} training rows",
            train.len()
        )));
    }
    Ok(())
}

/// Shapley values of the training rows, averaged over reference points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Valuation {
    pub values: Vec<f64>,
    pub k: usize,
    pub ref_set_size: usize,
    /// Mean over reference points of `U(all rows) - U(empty)`.
    pub total_gain: f64,
}

impl Valuation {
    /// `|sum(values) - total_gain| / max(1, |total_gain|)`, the efficiency defect.
    pub fn efficiency_error(&self) -> f64 {
        let sum: f64 = self.values.iter().sum();
        (sum - self.total_gain).abs() / self.total_gain.abs().max(1.0)
    }
}

/// Exact KNN-Shapley values by the rank recursion.
pub fn shapley_exact(train: &LabeledSet, refs: &LabeledSet, k: usize) -> Result<Valuation> {
    check_game(train, refs, k)?;
    let n = train.len();
    let weights = GameWeights::new(n, k);
    let y_mean = train.mean_target();
    let mut acc = vec![0.0; n];
    let mut gain_acc = 0.0;
    let (mut z, mut prefix, mut out) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (point, &y_ref) in refs.x.iter_rows().zip(&refs.y) {
        let (order, _) = ranked_rows(&train.x, point);
        z.clear();
        z.extend(order.iter().map(|&i| train.y[i as usize] - y_ref));
        let u_empty = -(y_mean - y_ref) * (y_mean - y_ref);
        weights.rank_values(&z, 0, (0.0, 0.0), u_empty, &mut prefix, &mut out);
        for (&row, &v) in order.iter().zip(&out) {
            acc[row as usize] += v;
        }
        let top = z[..k].iter().sum::<f64>() / k as f64;
        gain_acc += -top * top - u_empty;
    }
    let r = refs.len() as f64;
    Ok(Valuation {
        values: acc.into_iter().map(|a| a / r).collect(),
        k,
        ref_set_size: refs.len(),
        total_gain: gain_acc / r,
    })
}

/// Subset-enumeration oracle for small games.
pub mod oracle {
    use super::*;

    pub const MAX_PLAYERS: usize = 14;

    fn weight(n: usize, s: usize) -> f64 {
        // s! (n - 1 - s)! / n!
        let fact = |m: usize| (1..=m).map(|v| v as f64).product::<f64>();
        fact(s) * fact(n - 1 - s) / fact(n)
    }

    fn utilities(train: &LabeledSet, point: &[f64], y_ref: f64, k: usize) -> Vec<f64> {
        let n = train.len();
        (0..1usize << n)
            .map(|mask| {
                let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
                knn_utility(train, &subset, point, y_ref, k)
            })
            .collect()
    }

    /// Shapley values by the weighted marginal-contribution sum over every
    /// coalition, averaged over reference points.
    pub fn shapley_bruteforce(train: &LabeledSet, refs: &LabeledSet, k: usize) -> Result<Vec<f64>> {
        check_game(train, refs, k)?;
        let n = train.len();
        if n > MAX_PLAYERS {
            return Err(Error::size(format!(
                "brute-force valuation is limited to {MAX_PLAYERS} rows, got {n}"
            )));
        }
        let mut values = vec![0.0; n];
        for (point, &y_ref) in refs.x.iter_rows().zip(&refs.y) {
            let u = utilities(train, point, y_ref, k);
            for (i, value) in values.iter_mut().enumerate() {
                for mask in 0..1usize << n {
                    if mask >> i & 1 == 0 {
                        let s = mask.count_ones() as usize;
                        *value += weight(n, s) * (u[mask | 1 << i] - u[mask]);
                    }
                }
            }
        }
        Ok(values.into_iter().map(|v| v / refs.len() as f64).collect())
    }

    /// Contribution of `player` to its Shapley value, split by the size of
    /// the coalition it joins (averaged over reference points).
    pub fn contributions_by_size(train: &LabeledSet, refs: &LabeledSet, k: usize, player: usize) -> Result<Vec<f64>> {
        check_game(train, refs, k)?;
        let n = train.len();
        if n > MAX_PLAYERS || player >= n {
            return Err(Error::size("player out of range or game too large"));
        }
        let mut by_size = vec![0.0; n];
        for (point, &y_ref) in refs.x.iter_rows().zip(&refs.y) {
            let u = utilities(train, point, y_ref, k);
            for mask in 0..1usize << n {
                if mask >> player & 1 == 0 {
                    let s = mask.count_ones() as usize;
                    by_size[s] += weight(n, s) * (u[mask | 1 << player] - u[mask]);
                }
            }
        }
        Ok(by_size.into_iter().map(|v| v / refs.len() as f64).collect())
    }
}

pub use oracle::shapley_bruteforce;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum KeepPolicy {
    /// Keep rows with a strictly positive value.
    Positive,
    /// Keep the `ceil(f * N)` highest-valued rows.
    TopFraction { fraction: f64 },
}

impl fmt::Display for KeepPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeepPolicy::Positive => f.write_str("positive"),
            KeepPolicy::TopFraction { fraction } => write!(f, "top_fraction({fraction})"),
        }
    }
}

/// Number of rows kept by a top-fraction policy.
pub fn top_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

pub fn select_keep(values: &[f64], policy: KeepPolicy) -> Result<Vec<bool>> {
    if values.is_empty() {
        return Err(Error::arg("no values to select from"));
    }
    match policy {
        KeepPolicy::Positive => Ok(values.iter().map(|&v| v > 0.0).collect()),
        KeepPolicy::TopFraction { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::arg(format!("keep fraction {fraction} outside (0, 1]")));
            }
            let mut ranked: Vec<usize> = (0..values.len()).collect();
            ranked.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            let mut mask = vec![false; values.len()];
            for &i in &ranked[..top_count(fraction, values.len())] {
                mask[i] = true;
            }
            Ok(mask)
        }
    }
}

/// Linear-interpolation percentile (`p` in [0, 100]) of a sample.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::arg(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationReport {
    pub values: Vec<f64>,
    pub k: usize,
    pub ref_set_size: usize,
    pub total_gain: f64,
    pub keep_mask: Vec<bool>,
    pub policy: KeepPolicy,
}

impl ValuationReport {
    pub fn new(valuation: Valuation, policy: KeepPolicy) -> Result<Self> {
        let keep_mask = select_keep(&valuation.values, policy)?;
        Ok(Self {
            values: valuation.values,
            k: valuation.k,
            ref_set_size: valuation.ref_set_size,
            total_gain: valuation.total_gain,
            keep_mask,
            policy,
        })
    }

    /// See [`Valuation::efficiency_error`].
    pub fn efficiency_error(&self) -> f64 {
        let sum: f64 = self.values.iter().sum();
        (sum - self.total_gain).abs() / self.total_gain.abs().max(1.0)
    }

    pub fn kept(&self) -> usize {
        self.keep_mask.iter().filter(|&&k| k).count()
    }

    /// `id,value,kept` rows.
    pub fn to_csv(&self, ids: &[u32]) -> String {
        let mut out = String::from("id,value,kept\n");
        for ((id, v), keep) in ids.iter().zip(&self.values).zip(&self.keep_mask) {
            out.push_str(&format!("{id},{v:e},{}\n", u8::from(*keep)));
        }
        out
    }
}

struct ReferenceCache {
    y_ref: f64,
    sorted_dist: Vec<f64>,
    sorted_z: Vec<f64>,
    /// Running sums from the nearest row, `prefix[i]` covering ranks `0..i`.
    prefix_sum: Vec<f64>,
    prefix_sq: Vec<f64>,
}

/// Values streamed candidates against a fixed training game.
///
/// A candidate's value is its Shapley value in the game on `train` plus
/// the candidate (appended as the last row). Reference rankings of the
/// training rows are cached; the candidate is inserted by binary search and
/// only the ranks from its position down are re-evaluated, which gives the
/// same bits as [`shapley_exact`] on the augmented set.
pub struct CandidateValuer {
    train: LabeledSet,
    refs: LabeledSet,
    k: usize,
    weights: GameWeights,
    y_sum: f64,
    cache: Vec<ReferenceCache>,
}

impl CandidateValuer {
    pub fn new(train: LabeledSet, refs: LabeledSet, k: usize) -> Result<Self> {
        check_game(&train, &refs, k)?;
        let cache = refs
            .x
            .iter_rows()
            .zip(&refs.y)
            .map(|(point, &y_ref)| {
                let (order, sorted_dist) = ranked_rows(&train.x, point);
                let sorted_z: Vec<f64> = order.iter().map(|&i| train.y[i as usize] - y_ref).collect();
                let mut prefix_sum = Vec::with_capacity(sorted_z.len() + 1);
                let mut prefix_sq = Vec::with_capacity(sorted_z.len() + 1);
                let (mut s, mut q) = (0.0, 0.0);
                for &z in &sorted_z {
                    prefix_sum.push(s);
                    prefix_sq.push(q);
                    s += z;
                    q += z * z;
                }
                prefix_sum.push(s);
                prefix_sq.push(q);
                ReferenceCache {
                    y_ref,
                    sorted_dist,
                    sorted_z,
                    prefix_sum,
                    prefix_sq,
                }
            })
            .collect();
        Ok(Self {
            weights: GameWeights::new(train.len() + 1, k),
            y_sum: train.y.iter().sum(),
            train,
            refs,
            k,
            cache,
        })
    }

    pub fn train(&self) -> &LabeledSet {
        &self.train
    }

    pub fn refs(&self) -> &LabeledSet {
        &self.refs
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn value(&self, x: &[f64], y: f64) -> Result<f64> {
        self.train.x.check_arity(x.len())?;
        if !y.is_finite() {
            return Err(Error::arg("candidate target must be finite"));
        }
        let n_aug = self.train.len() + 1;
        let y_mean = (self.y_sum + y) / n_aug as f64;
        let mut tail = Vec::with_capacity(n_aug);
        let (mut prefix, mut out) = (Vec::with_capacity(n_aug), Vec::with_capacity(n_aug));
        let mut acc = 0.0;
        for (cache, point) in self.cache.iter().zip(self.refs.x.iter_rows()) {
            let d = squared_distance(x, point);
            // the candidate carries the largest row index, so it ranks after equal distances
            let pos = cache.sorted_dist.partition_point(|&t| t <= d);
            tail.clear();
            tail.push(y - cache.y_ref);
            tail.extend_from_slice(&cache.sorted_z[pos..]);
            let u_empty = -(y_mean - cache.y_ref) * (y_mean - cache.y_ref);
            self.weights.rank_values(
                &tail,
                pos,
                (cache.prefix_sum[pos], cache.prefix_sq[pos]),
                u_empty,
                &mut prefix,
                &mut out,
            );
            acc += out[0];
        }
        Ok(acc / self.refs.len() as f64)
    }
}

/// One-shot candidate valuation; see [`CandidateValuer`] for repeated use.
pub fn value_candidate(x: &[f64], y: f64, train: &LabeledSet, refs: &LabeledSet, k: usize) -> Result<f64> {
    CandidateValuer::new(train.clone(), refs.clone(), k)?.value(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[&[f64]], y: &[f64]) -> LabeledSet {
        LabeledSet::new(FeatureMatrix::from_rows(rows).unwrap(), y.to_vec()).unwrap()
    }

    fn random_game(rng: &mut ChaCha8Rng, n: usize, refs: usize, dims: usize) -> (LabeledSet, LabeledSet) {
        let mut make = |m: usize| {
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..dims).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            LabeledSet::new(FeatureMatrix::from_rows(&rows).unwrap(), y).unwrap()
        };
        (make(n), make(refs))
    }

    #[test]
    fn ranking_by_hand() {
        let train = FeatureMatrix::column(&[0.0, 1.0, 2.0]);
        let r = knn_sorted_indices(&train, &FeatureMatrix::column(&[0.9])).unwrap();
        assert_eq!(r.order(0), &[1, 0, 2]);
        let r = knn_sorted_indices(&train, &FeatureMatrix::column(&[2.0])).unwrap();
        assert_eq!(r.order(0)[0], 2);
        let r = knn_sorted_indices(&train, &FeatureMatrix::column(&[0.5])).unwrap();
        assert_eq!(r.order(0), &[0, 1, 2]);
        let bad = FeatureMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!(knn_sorted_indices(&train, &bad).is_err());
    }

    #[test]
    fn utility_by_hand() {
        let train = set(&[&[0.0], &[1.0], &[5.0]], &[3.0, 4.0, 11.0]);
        assert_eq!(knn_utility(&train, &[1], &[0.0], 4.0, 2), 0.0);
        // k = 1 over all rows: nearest is row 0
        assert_eq!(knn_utility(&train, &[0, 1, 2], &[0.2], 5.0, 1), -4.0);
        // empty coalition predicts the mean target 6
        assert_eq!(knn_utility(&train, &[], &[0.0], 6.0, 1), 0.0);
        assert_eq!(knn_utility(&train, &[], &[0.0], 4.0, 1), -4.0);
        // two nearest of three: mean(3, 4) = 3.5
        assert_eq!(knn_utility(&train, &[0, 1, 2], &[0.0], 4.5, 2), -1.0);
    }

    #[test]
    fn single_player() {
        let train = set(&[&[0.0]], &[2.0]);
        let refs = set(&[&[0.5]], &[3.0]);
        let v = shapley_exact(&train, &refs, 1).unwrap();
        let expected = knn_utility(&train, &[0], &[0.5], 3.0, 1) - knn_utility(&train, &[], &[0.5], 3.0, 1);
        assert_eq!(v.values, vec![expected]);
    }

    #[test]
    fn three_players_match_enumeration() {
        let train = set(&[&[0.0], &[1.0], &[3.0]], &[1.0, 2.0, 7.0]);
        let refs = set(&[&[0.8], &[2.4]], &[2.5, 5.0]);
        for k in 1..=3 {
            let fast = shapley_exact(&train, &refs, k).unwrap();
            let slow = shapley_bruteforce(&train, &refs, k).unwrap();
            for (a, b) in fast.values.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn matches_oracle_on_random_games() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let n = rng.gen_range(2..=10);
            let k = rng.gen_range(1..=3usize).min(n);
            let refs = rng.gen_range(1..=3);
            let (train, refs) = random_game(&mut rng, n, refs, 2);
            let fast = shapley_exact(&train, &refs, k).unwrap();
            let slow = shapley_bruteforce(&train, &refs, k).unwrap();
            for (a, b) in fast.values.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-9, "n={n} k={k}: {a} vs {b}");
            }
            assert!(fast.efficiency_error() < 1e-9);
        }
    }

    #[test]
    fn large_k_and_ties_match_oracle() {
        // duplicated coordinates create distance ties resolved by index
        let train = set(
            &[&[0.0], &[1.0], &[1.0], &[2.0], &[1.0], &[4.0], &[0.0], &[2.0]],
            &[1.0, 2.0, -1.0, 3.0, 0.5, 9.0, 1.5, 2.5],
        );
        let refs = set(&[&[1.0], &[0.0], &[3.0]], &[1.0, 0.0, 5.0]);
        for k in 1..=8 {
            let fast = shapley_exact(&train, &refs, k).unwrap();
            let slow = shapley_bruteforce(&train, &refs, k).unwrap();
            for (a, b) in fast.values.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-9, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn oracle_axioms() {
        let train = set(&[&[0.0], &[1.0], &[1.0], &[3.0], &[0.5]], &[1.0, 2.0, 2.0, 7.0, 1.0]);
        let refs = set(&[&[0.8], &[2.4]], &[2.5, 5.0]);
        let v = shapley_bruteforce(&train, &refs, 2).unwrap();
        let gain: f64 = refs
            .x()
            .iter_rows()
            .zip(refs.y())
            .map(|(p, &y)| knn_utility(&train, &[0, 1, 2, 3, 4], p, y, 2) - knn_utility(&train, &[], p, y, 2))
            .sum::<f64>()
            / 2.0;
        assert!((v.iter().sum::<f64>() - gain).abs() < 1e-12);
        assert!((v[1] - v[2]).abs() < 1e-12);
        let too_big = set(&vec![&[0.0][..]; 15], &[0.0; 15]);
        assert!(matches!(shapley_bruteforce(&too_big, &refs, 1), Err(Error::Size(_))));
    }

    #[test]
    fn identical_rows_get_identical_values() {
        let train = set(&[&[0.0], &[2.0], &[2.0], &[5.0], &[7.0]], &[1.0, 4.0, 4.0, 2.0, 9.0]);
        let refs = set(&[&[1.0], &[6.0], &[2.5]], &[2.0, 7.0, 3.0]);
        for k in 1..=4 {
            let v = shapley_exact(&train, &refs, k).unwrap();
            assert_eq!(v.values[1], v.values[2]);
        }
    }

    #[test]
    fn permutation_moves_values_with_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (train, refs) = random_game(&mut rng, 9, 3, 3);
        let v = shapley_exact(&train, &refs, 3).unwrap();
        let perm = [4, 7, 0, 2, 8, 1, 5, 3, 6];
        let shuffled = train.select(&perm);
        let w = shapley_exact(&shuffled, &refs, 3).unwrap();
        for (new_pos, &old) in perm.iter().enumerate() {
            assert!((w.values[new_pos] - v.values[old]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_k_above_training_size() {
        let train = set(&[&[0.0], &[1.0]], &[1.0, 2.0]);
        let refs = set(&[&[0.5]], &[1.0]);
        assert!(matches!(shapley_exact(&train, &refs, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(shapley_exact(&train, &refs, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn efficiency_at_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (train, refs) = random_game(&mut rng, 3000, 40, 4);
        let v = shapley_exact(&train, &refs, 5).unwrap();
        assert!(v.efficiency_error() < 1e-6, "{}", v.efficiency_error());
    }

    #[test]
    fn quadratic_scale_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (train, refs) = random_game(&mut rng, 30, 4, 2);
        let c = 3.0;
        let scale = |s: &LabeledSet| LabeledSet::new(s.x().clone(), s.y().iter().map(|y| y * c).collect()).unwrap();
        let v = shapley_exact(&train, &refs, 3).unwrap();
        let w = shapley_exact(&scale(&train), &scale(&refs), 3).unwrap();
        for (a, b) in v.values.iter().zip(&w.values) {
            assert!((b - c * c * a).abs() <= 1e-9 * (1.0 + a.abs()));
        }
        let p = KeepPolicy::TopFraction { fraction: 0.4 };
        assert_eq!(select_keep(&v.values, p).unwrap(), select_keep(&w.values, p).unwrap());
    }

    #[test]
    fn keep_policies() {
        let p = KeepPolicy::TopFraction { fraction: 0.5 };
        assert_eq!(select_keep(&[1.0; 5], p).unwrap(), vec![true, true, true, false, false]);
        assert!(select_keep(&[3.0, 1.0, 2.0], KeepPolicy::TopFraction { fraction: 1.0 }).unwrap().iter().all(|&k| k));
        assert_eq!(select_keep(&[3.0, -1.0, 2.0], KeepPolicy::Positive).unwrap(), vec![true, false, true]);
        assert_eq!(
            select_keep(&[0.1, 0.9, 0.5, 0.7], KeepPolicy::TopFraction { fraction: 0.5 }).unwrap(),
            vec![false, true, false, true]
        );
        for f in [0.0, 1.2, -0.5] {
            assert!(select_keep(&[1.0], KeepPolicy::TopFraction { fraction: f }).is_err());
        }
        assert!(select_keep(&[], KeepPolicy::Positive).is_err());
        assert_eq!(top_count(0.9, 7750), 6975);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        assert_eq!(percentile(&v, 20.0).unwrap(), 1.8);
    }

    #[test]
    fn candidate_matches_augmented_game_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (train, refs) = random_game(&mut rng, 200, 12, 3);
        let valuer = CandidateValuer::new(train.clone(), refs.clone(), 4).unwrap();
        for t in 0..20 {
            let x: Vec<f64> = if t % 4 == 0 {
                train.x().row(t).to_vec()
            } else {
                (0..3).map(|_| rng.gen_range(-2.5..2.5)).collect()
            };
            let y = rng.gen_range(-5.0..5.0);
            let mut aug = train.clone();
            aug.push(&x, y).unwrap();
            let full = shapley_exact(&aug, &refs, 4).unwrap();
            assert_eq!(valuer.value(&x, y).unwrap().to_bits(), full.values[200].to_bits());
        }
        assert!(valuer.value(&[0.0], 1.0).is_err());
    }

    #[test]
    fn duplicate_candidate_equals_its_twin() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (train, refs) = random_game(&mut rng, 12, 3, 2);
        let x = train.x().row(11).to_vec();
        let y = train.y()[11];
        let cand = value_candidate(&x, y, &train, &refs, 2).unwrap();
        let mut aug = train.clone();
        aug.push(&x, y).unwrap();
        let full = shapley_exact(&aug, &refs, 2).unwrap();
        // the twin is the last training row, adjacent to the candidate in every ranking
        assert_eq!(cand, full.values[11]);
    }

    #[test]
    fn augmented_game_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (train, refs) = random_game(&mut rng, 5, 3, 2);
        let x = [0.3, -0.7];
        let y = 1.25;
        let mut aug = train.clone();
        aug.push(&x, y).unwrap();
        let slow = shapley_bruteforce(&aug, &refs, 2).unwrap();
        let cand = value_candidate(&x, y, &train, &refs, 2).unwrap();
        assert!((cand - slow[5]).abs() < 1e-9);
    }

    #[test]
    fn far_candidate_only_counts_small_coalitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for k in 1..=3 {
            let (train, refs) = random_game(&mut rng, 8, 3, 2);
            let far = [100.0, -100.0];
            let mut aug = train.clone();
            aug.push(&far, 0.5).unwrap();
            let by_size = oracle::contributions_by_size(&aug, &refs, k, 8).unwrap();
            assert!(by_size[k..].iter().all(|&c| c == 0.0), "{by_size:?}");
            let total: f64 = by_size.iter().sum();
            let cand = value_candidate(&far, 0.5, &train, &refs, k).unwrap();
            assert!((cand - total).abs() < 1e-9);
        }
    }

    #[test]
    fn report_csv() {
        let val = Valuation { values: vec![0.5, -0.25], k: 1, ref_set_size: 1, total_gain: 0.25 };
        let r = ValuationReport::new(val, KeepPolicy::Positive).unwrap();
        assert_eq!(r.kept(), 1);
        assert_eq!(r.to_csv(&[10, 11]), "id,value,kept\n10,5e-1,1\n11,-2.5e-1,0\n");
    }
}
