//! Forest-based IV via the oracle-reduction algorithm: a follow-the-leader
//! regression oracle (bootstrap forest) plays the adversary, a weighted
//! binary classification tree plays the learner, and the returned hypothesis
//! is the ensemble average of the T learner trees.
//!
//! The reduction operates on y affinely rescaled to [-1, 1]; classification
//! leaves output +/-1, so every intermediate quantity stays in the ranges the
//! approximation bound 8(ln T + 1)/T assumes.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use crate::data::{Dataset, Model};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use rand::Rng;

/// Axis-aligned binary tree node.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
}

impl TreeNode {
    pub fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        match self {
            TreeNode::Leaf(v) => *v,
            TreeNode::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub n_trees: usize,
    pub bootstrap: bool,
    /// Features examined per split: None = all, Some(k) = k drawn from the
    /// tree's RNG (forest-style decorrelation).
    pub max_features: Option<usize>,
    /// Classification leaves: false = hard majority votes (+/-1, the exact
    /// argmax of the weighted-accuracy oracle), true = the weighted vote
    /// margin in [-1, 1].
    pub soft_leaves: bool,
}

impl TreeParams {
    /// Adversary defaults: 40-tree bootstrap forest, depth 2, min leaf 40.
    pub fn adversary_default() -> Self {
        TreeParams { max_depth: 2, min_leaf: 40, n_trees: 40, bootstrap: true, max_features: None, soft_leaves: false }
    }

    /// Learner defaults: a 5-tree classification forest, depth 2, min leaf
    /// 40, bootstrap rows for tree diversity, soft (vote-margin) leaves.
    pub fn learner_default() -> Self {
        TreeParams {
            max_depth: 2,
            min_leaf: 40,
            n_trees: 5,
            bootstrap: true,
            max_features: None,
            soft_leaves: true,
        }
    }

    /// Single plain tree (no randomization); exact oracle at depth 1.
    pub fn single_tree(max_depth: usize, min_leaf: usize) -> Self {
        TreeParams { max_depth, min_leaf, n_trees: 1, bootstrap: false, max_features: None, soft_leaves: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_leaf < 1 || self.n_trees < 1 {
            return Err(Error::invalid("min_leaf and n_trees must be at least 1"));
        }
        Ok(())
    }

    fn features_per_split(&self, d: usize) -> usize {
        match self.max_features {
            None => d,
            Some(0) => (d as f64).sqrt().ceil() as usize,
            Some(k) => k.min(d).max(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionTree {
    root: TreeNode,
}

impl RegressionTree {
    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn from_root(root: TreeNode) -> Self {
        RegressionTree { root }
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.root.predict(x)
    }
}

/// Bootstrap forest; prediction is the mean over trees.
#[derive(Debug, Clone)]
pub struct RegressionForest {
    trees: Vec<RegressionTree>,
}

impl RegressionForest {
    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct ClassificationTree {
    root: TreeNode,
}

impl ClassificationTree {
    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn from_root(root: TreeNode) -> Self {
        ClassificationTree { root }
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.root.predict(x)
    }
}

/// Distinct feature indices drawn without replacement from the tree RNG;
/// all features when k >= d.
fn sample_features(d: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    if k >= d {
        return (0..d).collect();
    }
    let mut pool: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = i + rng.gen_range(0..(d - i));
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Candidate thresholds: midpoints between consecutive distinct sorted
/// values. Exact optimality for stump oracles follows from sweeping all of
/// them.
fn best_regression_split(
    features: &Array2<f64>,
    targets: &[f64],
    rows: &[usize],
    min_leaf: usize,
    candidates: &[usize],
) -> Option<(usize, f64, f64)> {
    let m = rows.len();
    if m < 2 * min_leaf {
        return None;
    }
    let total_sum: f64 = rows.iter().map(|&i| targets[i]).sum();
    let total_sq: f64 = rows.iter().map(|&i| targets[i] * targets[i]).sum();
    let parent_sse = total_sq - total_sum * total_sum / m as f64;

    let mut best: Option<(usize, f64, f64)> = None;
    let mut col: Vec<(f64, f64)> = Vec::with_capacity(m);
    for &feature in candidates {
        col.clear();
        col.extend(rows.iter().map(|&i| (features[[i, feature]], targets[i])));
        col.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for k in 0..m - 1 {
            left_sum += col[k].1;
            left_sq += col[k].1 * col[k].1;
            if col[k + 1].0 <= col[k].0 {
                continue; // not a boundary between distinct values
            }
            let nl = k + 1;
            let nr = m - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let right_sum = total_sum - left_sum;
            let right_sq = total_sq - left_sq;
            let sse = (left_sq - left_sum * left_sum / nl as f64)
                + (right_sq - right_sum * right_sum / nr as f64);
            if sse < parent_sse - 1e-12
                && best.as_ref().map_or(true, |b| sse < b.2)
            {
                best = Some((feature, 0.5 * (col[k].0 + col[k + 1].0), sse));
            }
        }
    }
    best
}

fn grow_regression(
    features: &Array2<f64>,
    targets: &[f64],
    rows: &[usize],
    depth: usize,
    params: &TreeParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TreeNode {
    let mean = rows.iter().map(|&i| targets[i]).sum::<f64>() / rows.len().max(1) as f64;
    if depth >= params.max_depth || rows.len() < 2 * params.min_leaf {
        return TreeNode::Leaf(mean);
    }
    let k = params.features_per_split(features.ncols());
    let candidates = sample_features(features.ncols(), k, rng);
    match best_regression_split(features, targets, rows, params.min_leaf, &candidates) {
        None => TreeNode::Leaf(mean),
        Some((feature, threshold, _)) => {
            let (lrows, rrows): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&i| features[[i, feature]] <= threshold);
            TreeNode::Split {
                feature,
                threshold,
                left: Box::new(grow_regression(features, targets, &lrows, depth + 1, params, rng)),
                right: Box::new(grow_regression(features, targets, &rrows, depth + 1, params, rng)),
            }
        }
    }
}

/// Square-loss oracle over the tree/forest class: fits a (bootstrap) CART
/// forest to (z, u). Deterministic given the seed.
pub fn regression_oracle(
    z: &Array2<f64>,
    u: &Array1<f64>,
    params: &TreeParams,
    seed: u64,
) -> Result<RegressionForest> {
    params.validate()?;
    if z.nrows() != u.len() || z.nrows() == 0 {
        return Err(Error::invalid("regression_oracle: z and u must align and be nonempty"));
    }
    let n = z.nrows();
    let targets: Vec<f64> = u.to_vec();
    let seeds: Vec<u64> = (0..params.n_trees).map(|t| derive_seed(seed, t as u64)).collect();
    let trees: Vec<RegressionTree> = seeds
        .par_iter()
        .map(|&tree_seed| {
            let mut rng = rng_from_seed(tree_seed);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            RegressionTree { root: grow_regression(z, &targets, &rows, 0, params, &mut rng) }
        })
        .collect();
    Ok(RegressionForest { trees })
}

/// Weighted accuracy of a leaf that outputs the weighted majority label.
fn leaf_vote(w1: f64, w0: f64) -> (f64, f64) {
    if w1 >= w0 {
        (1.0, w1)
    } else {
        (-1.0, w0)
    }
}

fn best_classification_split(
    features: &Array2<f64>,
    labels: &[u8],
    weights: &[f64],
    rows: &[usize],
    min_leaf: usize,
    candidates: &[usize],
) -> Option<(usize, f64, f64)> {
    let m = rows.len();
    if m < 2 * min_leaf {
        return None;
    }
    let total_w1: f64 = rows.iter().filter(|&&i| labels[i] == 1).map(|&i| weights[i]).sum();
    let total_w0: f64 = rows.iter().filter(|&&i| labels[i] == 0).map(|&i| weights[i]).sum();
    let (_, parent_correct) = leaf_vote(total_w1, total_w0);

    let mut best: Option<(usize, f64, f64)> = None;
    let mut col: Vec<(f64, u8, f64)> = Vec::with_capacity(m);
    for &feature in candidates {
        col.clear();
        col.extend(rows.iter().map(|&i| (features[[i, feature]], labels[i], weights[i])));
        col.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut w1_left = 0.0;
        let mut w0_left = 0.0;
        for k in 0..m - 1 {
            if col[k].1 == 1 {
                w1_left += col[k].2;
            } else {
                w0_left += col[k].2;
            }
            if col[k + 1].0 <= col[k].0 {
                continue;
            }
            let nl = k + 1;
            let nr = m - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let (_, cl) = leaf_vote(w1_left, w0_left);
            let (_, cr) = leaf_vote(total_w1 - w1_left, total_w0 - w0_left);
            let correct = cl + cr;
            if correct > parent_correct + 1e-12
                && best.as_ref().map_or(true, |b| correct > b.2)
            {
                best = Some((feature, 0.5 * (col[k].0 + col[k + 1].0), correct));
            }
        }
    }
    best
}

fn grow_classification(
    features: &Array2<f64>,
    labels: &[u8],
    weights: &[f64],
    rows: &[usize],
    depth: usize,
    params: &TreeParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TreeNode {
    let w1: f64 = rows.iter().filter(|&&i| labels[i] == 1).map(|&i| weights[i]).sum();
    let w0: f64 = rows.iter().filter(|&&i| labels[i] == 0).map(|&i| weights[i]).sum();
    if w1 + w0 <= 0.0 {
        return TreeNode::Leaf(0.0);
    }
    let vote = if params.soft_leaves {
        (w1 - w0) / (w1 + w0)
    } else {
        leaf_vote(w1, w0).0
    };
    if depth >= params.max_depth || rows.len() < 2 * params.min_leaf {
        return TreeNode::Leaf(vote);
    }
    let k = params.features_per_split(features.ncols());
    let candidates = sample_features(features.ncols(), k, rng);
    match best_classification_split(features, labels, weights, rows, params.min_leaf, &candidates)
    {
        None => TreeNode::Leaf(vote),
        Some((feature, threshold, _)) => {
            let (lrows, rrows): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&i| features[[i, feature]] <= threshold);
            TreeNode::Split {
                feature,
                threshold,
                left: Box::new(grow_classification(
                    features, labels, weights, &lrows, depth + 1, params, rng,
                )),
                right: Box::new(grow_classification(
                    features, labels, weights, &rrows, depth + 1, params, rng,
                )),
            }
        }
    }
}

fn check_classification_inputs(
    x: &Array2<f64>,
    labels: &Array1<u8>,
    weights: &Array1<f64>,
) -> Result<()> {
    if x.nrows() != labels.len() || x.nrows() != weights.len() || x.nrows() == 0 {
        return Err(Error::invalid("classification_oracle: inputs must align"));
    }
    if labels.iter().any(|&v| v > 1) {
        return Err(Error::invalid("labels must be 0/1"));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("weights must be nonnegative and finite"));
    }
    Ok(())
}

/// Weighted binary classification oracle: a single tree with greedy splits
/// maximizing weighted accuracy, leaves voting +1/-1 by weighted majority
/// (0 when all weights vanish). Considers every feature at every split.
pub fn classification_oracle(
    x: &Array2<f64>,
    labels: &Array1<u8>,
    weights: &Array1<f64>,
    params: &TreeParams,
) -> Result<ClassificationTree> {
    params.validate()?;
    check_classification_inputs(x, labels, weights)?;
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let labels_v: Vec<u8> = labels.to_vec();
    let weights_v: Vec<f64> = weights.to_vec();
    // the single-tree oracle is the exact argmax of the weighted-accuracy
    // objective: all features considered, hard majority leaves
    let mut single = *params;
    single.max_features = None;
    single.soft_leaves = false;
    let mut rng = rng_from_seed(0);
    Ok(ClassificationTree {
        root: grow_classification(x, &labels_v, &weights_v, &rows, 0, &single, &mut rng),
    })
}

/// Forest variant of the classification oracle: n_trees trees decorrelated
/// by bootstrap rows and/or per-split feature subsampling per `params`.
pub fn classification_forest_oracle(
    x: &Array2<f64>,
    labels: &Array1<u8>,
    weights: &Array1<f64>,
    params: &TreeParams,
    seed: u64,
) -> Result<Vec<ClassificationTree>> {
    params.validate()?;
    check_classification_inputs(x, labels, weights)?;
    let n = x.nrows();
    let labels_v: Vec<u8> = labels.to_vec();
    let weights_v: Vec<f64> = weights.to_vec();
    let seeds: Vec<u64> = (0..params.n_trees).map(|t| derive_seed(seed, t as u64)).collect();
    Ok(seeds
        .par_iter()
        .map(|&tree_seed| {
            let mut rng = rng_from_seed(tree_seed);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            ClassificationTree {
                root: grow_classification(x, &labels_v, &weights_v, &rows, 0, params, &mut rng),
            }
        })
        .collect())
}

/// Ensemble of the T learner trees plus the affine y-scaling and the
/// averaged adversary values recorded during training (used by the gap
/// certificate).
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    trees: Vec<ClassificationTree>,
    input_dim: usize,
    y_center: f64,
    y_half: f64,
    avg_adversary: Array1<f64>,
    round_diagnostics: Vec<(f64, f64)>,
}

impl EnsembleModel {
    pub fn trees(&self) -> &[ClassificationTree] {
        &self.trees
    }

    pub fn y_scaling(&self) -> (f64, f64) {
        (self.y_center, self.y_half)
    }

    /// Averaged adversary values (scaled game) at the training rows.
    pub fn avg_adversary(&self) -> &Array1<f64> {
        &self.avg_adversary
    }

    /// Per-round (adversary square loss, learner weighted accuracy).
    pub fn round_diagnostics(&self) -> &[(f64, f64)] {
        &self.round_diagnostics
    }

    pub fn from_parts(
        trees: Vec<ClassificationTree>,
        input_dim: usize,
        y_center: f64,
        y_half: f64,
    ) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::invalid("ensemble needs at least one tree"));
        }
        Ok(EnsembleModel {
            trees,
            input_dim,
            y_center,
            y_half,
            avg_adversary: Array1::zeros(0),
            round_diagnostics: Vec::new(),
        })
    }

    /// Ensemble average in the scaled [-1, 1] game.
    fn predict_scaled(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

impl Model for EnsembleModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn predict(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.y_center + self.y_half * self.predict_scaled(x)
    }
}

/// The 8 (ln T + 1)/T approximation bound of the reduction.
pub fn regret_bound(t: usize) -> f64 {
    8.0 * ((t as f64).ln() + 1.0) / t as f64
}

/// Runs the oracle reduction for `t_rounds`; y is rescaled to [-1, 1] for
/// the game and predictions are unscaled on the way out.
pub fn fit_rfiv(
    data: &Dataset,
    t_rounds: usize,
    adversary: &TreeParams,
    learner: &TreeParams,
    seed: u64,
) -> Result<EnsembleModel> {
    if t_rounds < 1 {
        return Err(Error::invalid("fit_rfiv needs T >= 1"));
    }
    adversary.validate()?;
    learner.validate()?;
    let n = data.n();
    // robust affine scaling: anchored at the 1%/99% quantiles rather than the
    // min/max, so a handful of noise-tail outcomes cannot shrink the
    // resolution of the +/-1 ensemble votes
    let mut sorted_y: Vec<f64> = data.y().to_vec();
    sorted_y.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| sorted_y[((p * (n - 1) as f64).round() as usize).min(n - 1)];
    let (y_lo, y_hi) = (q(0.01), q(0.99));
    let y_center = 0.5 * (y_lo + y_hi);
    let y_half = (0.5 * (y_hi - y_lo)).max(1e-12);
    let y_scaled = Array1::from_iter(data.y().iter().map(|&v| (v - y_center) / y_half));

    let mut sum_h = vec![0.0f64; n];
    let mut adv_sum = vec![0.0f64; n];
    let mut trees = Vec::with_capacity(t_rounds * learner.n_trees);
    let mut diagnostics = Vec::with_capacity(t_rounds);

    for t in 1..=t_rounds {
        let u = Array1::from_shape_fn(n, |i| {
            let past_mean = if t > 1 { sum_h[i] / (t - 1) as f64 } else { 0.0 };
            0.5 * (y_scaled[i] - past_mean)
        });
        let f_t = regression_oracle(data.z(), &u, adversary, derive_seed(seed, t as u64))?;
        let a: Vec<f64> = (0..n).map(|i| f_t.predict(data.z().row(i))).collect();
        let labels = Array1::from_shape_fn(n, |i| u8::from(a[i] > 0.0));
        let weights = Array1::from_shape_fn(n, |i| a[i].abs());
        // h_t is the mean of this round's classification forest; the flat
        // tree list averages to the same ensemble since every round
        // contributes the same number of trees
        let round_trees = classification_forest_oracle(
            data.x(),
            &labels,
            &weights,
            learner,
            derive_seed(seed, (t_rounds + t) as u64),
        )?;

        let adv_loss = (0..n).map(|i| (u[i] - a[i]).powi(2)).sum::<f64>() / n as f64;
        let mut learner_obj = 0.0;
        for i in 0..n {
            let pred = round_trees.iter().map(|tr| tr.predict(data.x().row(i))).sum::<f64>()
                / round_trees.len() as f64;
            sum_h[i] += pred;
            adv_sum[i] += a[i];
            if (pred > 0.0) == (labels[i] == 1) {
                learner_obj += weights[i];
            }
        }
        diagnostics.push((adv_loss, learner_obj / n as f64));
        trees.extend(round_trees);
    }

    Ok(EnsembleModel {
        trees,
        input_dim: data.p(),
        y_center,
        y_half,
        avg_adversary: Array1::from_iter(adv_sum.iter().map(|&v| v / t_rounds as f64)),
        round_diagnostics: diagnostics,
    })
}

/// Primal-dual gap of the scaled game at the trained ensemble: the best
/// adversary response value against the ensemble minus the best learner
/// response value against the averaged adversary, one oracle call each.
pub fn minimax_gap(
    ensemble: &EnsembleModel,
    data: &Dataset,
    adversary: &TreeParams,
    learner: &TreeParams,
    seed: u64,
) -> Result<f64> {
    if ensemble.avg_adversary.len() != data.n() {
        return Err(Error::invalid(
            "minimax_gap needs the ensemble trained on this dataset (averaged adversary missing)",
        ));
    }
    let n = data.n();
    let y_scaled =
        Array1::from_iter(data.y().iter().map(|&v| (v - ensemble.y_center) / ensemble.y_half));
    let b_bar: Vec<f64> = (0..n).map(|i| ensemble.predict_scaled(data.x().row(i))).collect();

    // adversary best response: the square-loss oracle on u = (y - b)/2
    let u = Array1::from_shape_fn(n, |i| 0.5 * (y_scaled[i] - b_bar[i]));
    let f_star = regression_oracle(data.z(), &u, adversary, derive_seed(seed, 0))?;
    let upper = (0..n)
        .map(|i| {
            let a = f_star.predict(data.z().row(i));
            (y_scaled[i] - b_bar[i]) * a - a * a
        })
        .sum::<f64>()
        / n as f64;

    // learner best response to the averaged adversary
    let a_bar = &ensemble.avg_adversary;
    let labels = Array1::from_shape_fn(n, |i| u8::from(a_bar[i] > 0.0));
    let weights = Array1::from_shape_fn(n, |i| a_bar[i].abs());
    let h_star =
        classification_forest_oracle(data.x(), &labels, &weights, learner, derive_seed(seed, 1))?;
    let lower = (0..n)
        .map(|i| {
            let b = h_star.iter().map(|tr| tr.predict(data.x().row(i))).sum::<f64>()
                / h_star.len() as f64;
            (y_scaled[i] - b) * a_bar[i] - a_bar[i] * a_bar[i]
        })
        .sum::<f64>()
        / n as f64;

    Ok(upper - lower)
}
