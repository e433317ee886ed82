//! Random forest shape classifier.
//!
//! Trees are CART classifiers grown on bootstrap samples with Gini
//! impurity, considering a random subset of features at every split.
//! Training rows are put in canonical order (by row id) before sampling, so
//! a forest depends only on row content, parameters and seed.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::{Error, Result};

/// Number of candidate features examined at each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeaturesPerSplit {
    Sqrt,
    Third,
    All,
    Count(usize),
}

impl FeaturesPerSplit {
    pub fn resolve(self, n_features: usize) -> usize {
        let m = match self {
            FeaturesPerSplit::Sqrt => (n_features as f64).sqrt().floor() as usize,
            FeaturesPerSplit::Third => n_features / 3,
            FeaturesPerSplit::All => n_features,
            FeaturesPerSplit::Count(c) => c,
        };
        m.clamp(1, n_features.max(1))
    }
}

impl fmt::Display for FeaturesPerSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeaturesPerSplit::Sqrt => f.write_str("sqrt"),
            FeaturesPerSplit::Third => f.write_str("third"),
            FeaturesPerSplit::All => f.write_str("all"),
            FeaturesPerSplit::Count(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for FeaturesPerSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sqrt" => Ok(FeaturesPerSplit::Sqrt),
            "third" => Ok(FeaturesPerSplit::Third),
            "all" => Ok(FeaturesPerSplit::All),
            other => other
                .parse::<usize>()
                .ok()
                .filter(|&c| c > 0)
                .map(FeaturesPerSplit::Count)
                .ok_or_else(|| {
                    Error::invalid("features_per_split", format!("unrecognized `{other}`"))
                }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub features_per_split: FeaturesPerSplit,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_leaf: 1,
            features_per_split: FeaturesPerSplit::Sqrt,
        }
    }
}

impl fmt::Display for ForestParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let depth = self
            .max_depth
            .map_or_else(|| "none".to_string(), |d| d.to_string());
        write!(
            f,
            "n_trees={} max_depth={} min_leaf={} features_per_split={}",
            self.n_trees, depth, self.min_leaf, self.features_per_split
        )
    }
}

/// Cartesian product of the axes, iterating the last axis fastest.
pub fn expand_grid(
    n_trees: &[usize],
    max_depth: &[Option<usize>],
    min_leaf: &[usize],
    features_per_split: &[FeaturesPerSplit],
) -> Vec<ForestParams> {
    let mut grid = Vec::new();
    for &t in n_trees {
        for &d in max_depth {
            for &l in min_leaf {
                for &f in features_per_split {
                    grid.push(ForestParams {
                        n_trees: t,
                        max_depth: d,
                        min_leaf: l,
                        features_per_split: f,
                    });
                }
            }
        }
    }
    grid
}

pub fn default_grid() -> Vec<ForestParams> {
    expand_grid(
        &[100, 300],
        &[Some(8), Some(16), None],
        &[1, 5],
        &[FeaturesPerSplit::Sqrt, FeaturesPerSplit::Third],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Class histogram (indexed by class position) of the rows routed here.
    Leaf { counts: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    fn leaf(&self, row: &[f64]) -> &[u32] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// Class position with the largest leaf count.
    fn predict_position(&self, row: &[f64]) -> usize {
        argmax_lowest(self.leaf(row).iter().copied())
    }

    /// Leaf histograms in node order.
    pub fn leaf_histograms(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { counts } => Some(counts.as_slice()),
            Node::Split { .. } => None,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

fn argmax_lowest<I: Iterator<Item = u32>>(values: I) -> usize {
    let mut best = (0, 0u32);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub seed: u64,
    /// Sorted distinct training labels.
    pub class_labels: Vec<usize>,
    pub columns: Vec<String>,
    trees: Vec<DecisionTree>,
}

impl ForestModel {
    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        predict_forest(self, x)
    }
}

struct TreeBuilder<'a> {
    x: &'a [f64],
    n_features: usize,
    y: &'a [usize],
    n_classes: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
    per_split: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct Split {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl TreeBuilder<'_> {
    fn value(&self, row: usize, feature: usize) -> f64 {
        self.x[row * self.n_features + feature]
    }

    fn histogram(&self, rows: &[usize]) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_classes];
        for &r in rows {
            counts[self.y[r]] += 1;
        }
        counts
    }

    /// Best threshold on one feature, scored by the sum over children of
    /// `sum_c count_c^2 / n_child` (larger means lower weighted Gini).
    fn best_threshold(&self, rows: &[usize], feature: usize, parent: &[u32]) -> Option<Split> {
        let mut order: Vec<(f64, usize)> = rows.iter().map(|&r| (self.value(r, feature), r)).collect();
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let n = order.len();
        let mut left = vec![0u32; self.n_classes];
        let mut right = parent.to_vec();
        let mut sq_left = 0.0;
        let mut sq_right: f64 = parent.iter().map(|&c| f64::from(c) * f64::from(c)).sum();
        let mut best: Option<Split> = None;

        for p in 0..n - 1 {
            let c = self.y[order[p].1];
            sq_left += 2.0 * f64::from(left[c]) + 1.0;
            left[c] += 1;
            sq_right -= 2.0 * f64::from(right[c]) - 1.0;
            right[c] -= 1;

            let n_left = p + 1;
            let n_right = n - n_left;
            if n_left < self.min_leaf || n_right < self.min_leaf {
                continue;
            }
            let (lo, hi) = (order[p].0, order[p + 1].0);
            if lo >= hi {
                continue;
            }
            let score = sq_left / n_left as f64 + sq_right / n_right as f64;
            if best.as_ref().is_none_or(|b| score > b.score) {
                let mid = 0.5 * (lo + hi);
                let threshold = if mid < hi { mid } else { lo };
                best = Some(Split {
                    feature,
                    threshold,
                    score,
                });
            }
        }
        best
    }

    fn find_split(&mut self, rows: &[usize], parent: &[u32]) -> Option<Split> {
        let mut features: Vec<usize> = (0..self.n_features).collect();
        features.shuffle(&mut self.rng);
        let (sampled, rest) = features.split_at(self.per_split);
        let mut sampled = sampled.to_vec();
        sampled.sort_unstable();

        let mut best: Option<Split> = None;
        for &f in &sampled {
            if let Some(s) = self.best_threshold(rows, f, parent) {
                if best.as_ref().is_none_or(|b| s.score > b.score) {
                    best = Some(s);
                }
            }
        }
        if best.is_some() {
            return best;
        }
        // every sampled feature was constant here; fall back to the others
        rest.iter().find_map(|&f| self.best_threshold(rows, f, parent))
    }

    fn build(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let counts = self.histogram(&rows);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_reached = self.max_depth.is_some_and(|d| depth >= d);
        let split = if pure || depth_reached || rows.len() < 2 * self.min_leaf {
            None
        } else {
            self.find_split(&rows, &counts)
        };

        let Some(split) = split else {
            self.nodes.push(Node::Leaf { counts });
            return self.nodes.len() - 1;
        };

        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&r| self.value(r, split.feature) <= split.threshold);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { counts: Vec::new() });
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

fn validate_params(params: &ForestParams) -> Result<()> {
    if params.n_trees == 0 {
        return Err(Error::invalid("n_trees", "must be at least 1"));
    }
    if params.min_leaf == 0 {
        return Err(Error::invalid("min_leaf", "must be at least 1"));
    }
    if params.max_depth == Some(0) {
        return Err(Error::invalid("max_depth", "must be at least 1"));
    }
    Ok(())
}

pub fn fit_forest(
    x: &FeatureMatrix,
    y: &[usize],
    params: &ForestParams,
    seed: u64,
) -> Result<ForestModel> {
    validate_params(params)?;
    if x.n_rows() == 0 || x.n_cols() == 0 {
        return Err(Error::EmptyInput);
    }
    if x.n_rows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.n_rows(),
            right: y.len(),
        });
    }
    let class_labels: Vec<usize> = y.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if class_labels.len() < 2 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..x.n_rows()).collect();
    order.sort_by(|&a, &b| x.row_ids()[a].cmp(&x.row_ids()[b]).then(a.cmp(&b)));
    let n = order.len();
    let d = x.n_cols();
    let mut values = Vec::with_capacity(n * d);
    for &i in &order {
        values.extend_from_slice(x.row(i));
    }
    let positions: Vec<usize> = order
        .iter()
        .map(|&i| class_labels.binary_search(&y[i]).expect("label is in class set"))
        .collect();
    let per_split = params.features_per_split.resolve(d);

    let trees = (0..params.n_trees as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
            let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut builder = TreeBuilder {
                x: &values,
                n_features: d,
                y: &positions,
                n_classes: class_labels.len(),
                max_depth: params.max_depth,
                min_leaf: params.min_leaf,
                per_split,
                rng,
                nodes: Vec::new(),
            };
            builder.build(sample, 0);
            DecisionTree {
                nodes: builder.nodes,
            }
        })
        .collect();

    Ok(ForestModel {
        params: *params,
        seed,
        class_labels,
        columns: x.columns().to_vec(),
        trees,
    })
}

/// Majority vote over the trees; vote ties go to the lowest class label.
pub fn predict_forest(model: &ForestModel, x: &FeatureMatrix) -> Result<Vec<usize>> {
    if x.columns() != model.columns.as_slice() {
        return Err(Error::ColumnMismatch {
            expected: model.columns.join(","),
            found: x.columns().join(","),
        });
    }
    Ok(x
        .rows()
        .map(|row| {
            let mut votes = vec![0u32; model.class_labels.len()];
            for tree in &model.trees {
                votes[tree.predict_position(row)] += 1;
            }
            model.class_labels[argmax_lowest(votes.into_iter())]
        })
        .collect())
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub best: ForestParams,
    pub best_index: usize,
    /// Mean cross-validated accuracy per grid entry.
    pub scores: Vec<f64>,
}

/// Stratified fold index for every row.
fn stratified_folds(x: &FeatureMatrix, y: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| x.row_ids()[a].cmp(&x.row_ids()[b]).then(a.cmp(&b)));
    let classes: BTreeSet<usize> = y.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; y.len()];
    for c in classes {
        let mut members: Vec<usize> = order.iter().copied().filter(|&i| y[i] == c).collect();
        members.shuffle(&mut rng);
        for (pos, i) in members.into_iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }
    fold_of
}

/// Stratified k-fold cross-validated accuracy for every combination; the
/// first combination with the highest mean wins.
pub fn grid_search(
    x: &FeatureMatrix,
    y: &[usize],
    grid: &[ForestParams],
    folds: usize,
    seed: u64,
) -> Result<GridSearch> {
    if grid.is_empty() {
        return Err(Error::invalid("grid", "must contain at least one combination"));
    }
    if folds < 2 {
        return Err(Error::invalid("folds", "must be at least 2"));
    }
    if x.n_rows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.n_rows(),
            right: y.len(),
        });
    }
    let classes: BTreeSet<usize> = y.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let smallest = classes
        .iter()
        .map(|c| y.iter().filter(|&l| l == c).count())
        .min()
        .unwrap_or(0);
    if folds > smallest {
        return Err(Error::FoldsExceedClass { folds, smallest });
    }

    let fold_of = stratified_folds(x, y, folds, seed);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| (0..y.len()).partition(|&i| fold_of[i] != f))
        .collect();

    let scores = grid
        .par_iter()
        .map(|params| {
            let mut total = 0.0;
            for (train, test) in &splits {
                let train_y: Vec<usize> = train.iter().map(|&i| y[i]).collect();
                let test_y: Vec<usize> = test.iter().map(|&i| y[i]).collect();
                let model = fit_forest(&x.select_rows(train), &train_y, params, seed)?;
                let pred = predict_forest(&model, &x.select_rows(test))?;
                total += accuracy(&pred, &test_y)?;
            }
            Ok(total / folds as f64)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut best_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best_index] {
            best_index = i;
        }
    }
    Ok(GridSearch {
        best: grid[best_index],
        best_index,
        scores,
    })
}
