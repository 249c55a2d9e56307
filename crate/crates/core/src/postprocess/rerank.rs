//! Re-rank model: per-prediction retrieval features and a small
//! gradient-boosted tree ensemble that maps them to the probability that the
//! prediction is correct.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::SearchResult;
use crate::recognition::{csv_reader, parse_f64, ClassifierProbs, Prediction};
use crate::store::LandmarkLabel;

use super::rules::check_alignment;

pub const FEATURE_NAMES: [&str; 7] = [
    "top1_sim",
    "mean_top3_sim",
    "top1_nonlandmark_sim",
    "mean_top3_nonlandmark_sim",
    "class_vote_count",
    "class_test_frequency",
    "classifier_prob",
];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RerankFeatures {
    pub top1_sim: f64,
    pub mean_top3_sim: f64,
    pub top1_nonlandmark_sim: f64,
    pub mean_top3_nonlandmark_sim: f64,
    pub class_vote_count: f64,
    pub class_test_frequency: f64,
    pub classifier_prob: f64,
}

impl RerankFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.top1_sim,
            self.mean_top3_sim,
            self.top1_nonlandmark_sim,
            self.mean_top3_nonlandmark_sim,
            self.class_vote_count,
            self.class_test_frequency,
            self.classifier_prob,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != FEATURE_NAMES.len() {
            return Err(Error::Param(format!(
                "expected {} features, got {}",
                FEATURE_NAMES.len(),
                v.len()
            )));
        }
        Ok(RerankFeatures {
            top1_sim: v[0],
            mean_top3_sim: v[1],
            top1_nonlandmark_sim: v[2],
            mean_top3_nonlandmark_sim: v[3],
            class_vote_count: v[4],
            class_test_frequency: v[5],
            classifier_prob: v[6],
        })
    }
}

fn top1_and_mean3(result: Option<&SearchResult>) -> (f64, f64) {
    match result {
        Some(r) if !r.is_empty() => {
            let top = &r.similarities[..3.min(r.len())];
            let mean = top.iter().map(|&s| f64::from(s)).sum::<f64>() / top.len() as f64;
            (f64::from(r.similarities[0]), mean)
        }
        _ => (0.0, 0.0),
    }
}

/// Builds one feature row per prediction.
///
/// `search` holds each query's neighbors in the labeled index and
/// `nonlandmark` its neighbors in the non-landmark reference set; both are
/// aligned with `predictions` and `query_ids`. Missing non-landmark searches
/// or classifier probabilities fill their features with zero.
pub fn extract_rerank_features(
    predictions: &[Prediction],
    query_ids: &[String],
    search: &[SearchResult],
    index_labels: &[LandmarkLabel],
    nonlandmark: Option<&[SearchResult]>,
    probs: Option<&ClassifierProbs>,
) -> Result<Vec<RerankFeatures>> {
    check_alignment(predictions, query_ids)?;
    if search.len() != predictions.len() {
        return Err(Error::Integrity(format!(
            "{} search results for {} predictions",
            search.len(),
            predictions.len()
        )));
    }
    if let Some(nl) = nonlandmark {
        if nl.len() != predictions.len() {
            return Err(Error::Integrity(format!(
                "{} non-landmark results for {} predictions",
                nl.len(),
                predictions.len()
            )));
        }
    }

    let mut frequency: HashMap<LandmarkLabel, usize> = HashMap::new();
    for p in predictions.iter().filter(|p| !p.is_abstention()) {
        *frequency.entry(p.landmark).or_insert(0) += 1;
    }

    predictions
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (top1_sim, mean_top3_sim) = top1_and_mean3(Some(&search[i]));
            let (top1_nl, mean3_nl) = top1_and_mean3(nonlandmark.map(|nl| &nl[i]));
            let (votes, freq, prob) = if p.is_abstention() {
                (0, 0, 0.0)
            } else {
                let mut votes = 0;
                for &row in &search[i].neighbors {
                    let label = index_labels.get(row).ok_or(Error::Index {
                        index: row,
                        len: index_labels.len(),
                    })?;
                    if *label == p.landmark {
                        votes += 1;
                    }
                }
                let prob = probs
                    .and_then(|pr| pr.get(&p.query_id))
                    .and_then(|row| row.get(&p.landmark))
                    .copied()
                    .unwrap_or(0.0);
                (votes, frequency[&p.landmark], prob)
            };
            Ok(RerankFeatures {
                top1_sim,
                mean_top3_sim,
                top1_nonlandmark_sim: top1_nl,
                mean_top3_nonlandmark_sim: mean3_nl,
                class_vote_count: votes as f64,
                class_test_frequency: freq as f64,
                classifier_prob: prob,
            })
        })
        .collect()
}

/// Writes `query_id` followed by the features in [`FEATURE_NAMES`] order.
pub fn write_features_csv(
    path: impl AsRef<Path>,
    query_ids: &[String],
    features: &[RerankFeatures],
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "query_id,{}", FEATURE_NAMES.join(",")).unwrap();
    for (id, f) in query_ids.iter().zip(features) {
        write!(out, "{id}").unwrap();
        for v in f.to_vec() {
            // shortest round-trip representation keeps files lossless
            write!(out, ",{v:?}").unwrap();
        }
        writeln!(out).unwrap();
    }
    crate::store::write_atomic(path.as_ref(), &out)
}

pub fn read_features_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<RerankFeatures>)> {
    let mut reader = csv_reader(path.as_ref())?;
    let header = reader.headers()?.clone();
    let expected: Vec<&str> = std::iter::once("query_id").chain(FEATURE_NAMES).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!("unexpected feature header {header:?}")));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        ids.push(record[0].to_string());
        let values = (1..record.len())
            .map(|i| parse_f64(&record[i], FEATURE_NAMES[i - 1]))
            .collect::<Result<Vec<_>>>()?;
        rows.push(RerankFeatures::from_slice(&values)?);
    }
    Ok((ids, rows))
}

/// One node of a regression tree. Leaves have no feature and no children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: Option<usize>,
    pub threshold: f64,
    pub left: Option<usize>,
    pub right: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub shrinkage: f64,
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    /// Rows with `x[feature] <= threshold` go left.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = &self.nodes[0];
        while let (Some(f), Some(l), Some(r)) = (node.feature, node.left, node.right) {
            node = if x[f] <= node.threshold {
                &self.nodes[l]
            } else {
                &self.nodes[r]
            };
        }
        node.value
    }

    fn depth_from(&self, i: usize) -> usize {
        match (self.nodes[i].left, self.nodes[i].right) {
            (Some(l), Some(r)) => 1 + self.depth_from(l).max(self.depth_from(r)),
            _ => 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth_from(0)
    }
}

/// Boosted ensemble in log-odds space. `base_score` is the prior probability;
/// the output is `sigmoid(logit(base_score) + Σ shrinkage·tree(x))` clamped to
/// `[0, 1]`, so an ensemble without trees returns `base_score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub base_score: f64,
    pub num_features: usize,
    pub trees: Vec<RegressionTree>,
}

pub const MAX_TREE_DEPTH: usize = 3;

impl TreeModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.base_score) {
            return Err(Error::Format(format!(
                "base score {} outside [0, 1]",
                self.base_score
            )));
        }
        for (t, tree) in self.trees.iter().enumerate() {
            if tree.nodes.is_empty() || !tree.shrinkage.is_finite() {
                return Err(Error::Format(format!("tree {t} is malformed")));
            }
            for (i, node) in tree.nodes.iter().enumerate() {
                let bad = match (node.feature, node.left, node.right) {
                    (Some(f), Some(l), Some(r)) => {
                        f >= self.num_features
                            || !node.threshold.is_finite()
                            || l <= i
                            || r <= i
                            || l >= tree.nodes.len()
                            || r >= tree.nodes.len()
                    }
                    (None, None, None) => !node.value.is_finite(),
                    _ => true,
                };
                if bad {
                    return Err(Error::Format(format!("tree {t} node {i} is malformed")));
                }
            }
            if tree.depth() > MAX_TREE_DEPTH {
                return Err(Error::Format(format!("tree {t} is deeper than {MAX_TREE_DEPTH}")));
            }
        }
        Ok(())
    }

    pub fn raw_score(&self, x: &[f64]) -> f64 {
        logit(self.base_score)
            + self
                .trees
                .iter()
                .map(|t| t.shrinkage * t.predict(x))
                .sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        if self.trees.is_empty() {
            return self.base_score;
        }
        sigmoid(self.raw_score(x)).clamp(0.0, 1.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TreeModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::store::write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeHyper {
    pub n_trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_leaf: usize,
    /// L2 penalty on leaf values.
    pub lambda: f64,
}

impl Default for TreeHyper {
    fn default() -> Self {
        TreeHyper {
            n_trees: 100,
            max_depth: 3,
            shrinkage: 0.1,
            min_leaf: 5,
            lambda: 1.0,
        }
    }
}

/// Gains at or below this are not worth a split.
const MIN_GAIN: f64 = 1e-12;

struct SplitCandidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct Booster<'a> {
    rows: &'a [Vec<f64>],
    /// Row indices sorted by value for each feature, ties by row index.
    sorted: Vec<Vec<usize>>,
    hyper: TreeHyper,
}

impl Booster<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.hyper.lambda)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.hyper.lambda)
    }

    /// Exact greedy split search. Features are scanned in ascending order and
    /// thresholds from low to high; only a strictly larger gain replaces the
    /// incumbent.
    fn best_split(&self, member: &[bool], count: usize, grad: &[f64], hess: &[f64]) -> Option<SplitCandidate> {
        let (g_total, h_total) = self.sorted[0]
            .iter()
            .filter(|&&i| member[i])
            .fold((0.0, 0.0), |(g, h), &i| (g + grad[i], h + hess[i]));
        let parent = self.score(g_total, h_total);
        let mut best: Option<SplitCandidate> = None;
        for (f, order) in self.sorted.iter().enumerate() {
            let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
            let mut prev: Option<usize> = None;
            for &i in order.iter().filter(|&&i| member[i]) {
                if let Some(p) = prev {
                    let (a, b) = (self.rows[p][f], self.rows[i][f]);
                    if a < b && nl >= self.hyper.min_leaf && count - nl >= self.hyper.min_leaf {
                        let gain = self.score(gl, hl) + self.score(g_total - gl, h_total - hl) - parent;
                        if gain > MIN_GAIN && best.as_ref().is_none_or(|s| gain > s.gain) {
                            let mid = a + (b - a) / 2.0;
                            let threshold = if mid < b { mid } else { a };
                            best = Some(SplitCandidate {
                                feature: f,
                                threshold,
                                gain,
                            });
                        }
                    }
                }
                gl += grad[i];
                hl += hess[i];
                nl += 1;
                prev = Some(i);
            }
        }
        best
    }

    fn grow(
        &self,
        nodes: &mut Vec<TreeNode>,
        member: Vec<bool>,
        count: usize,
        depth: usize,
        grad: &[f64],
        hess: &[f64],
    ) -> usize {
        let id = nodes.len();
        let (g, h) = member
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .fold((0.0, 0.0), |(g, h), (i, _)| (g + grad[i], h + hess[i]));
        nodes.push(TreeNode {
            feature: None,
            threshold: 0.0,
            left: None,
            right: None,
            value: self.leaf_value(g, h),
        });
        if depth >= self.hyper.max_depth || count < 2 * self.hyper.min_leaf {
            return id;
        }
        let Some(split) = self.best_split(&member, count, grad, hess) else {
            return id;
        };
        let mut left = vec![false; member.len()];
        let mut right = vec![false; member.len()];
        let mut n_left = 0;
        for (i, &m) in member.iter().enumerate() {
            if m {
                if self.rows[i][split.feature] <= split.threshold {
                    left[i] = true;
                    n_left += 1;
                } else {
                    right[i] = true;
                }
            }
        }
        let l = self.grow(nodes, left, n_left, depth + 1, grad, hess);
        let r = self.grow(nodes, right, count - n_left, depth + 1, grad, hess);
        let node = &mut nodes[id];
        node.feature = Some(split.feature);
        node.threshold = split.threshold;
        node.left = Some(l);
        node.right = Some(r);
        node.value = 0.0;
        id
    }
}

/// Fits a boosted tree ensemble to binary labels under logistic loss.
///
/// Each tree is grown greedily with exact splits and Newton leaf values.
/// Training is single-threaded and bit-deterministic for a given input order.
pub fn train_rerank_tree(rows: &[Vec<f64>], labels: &[bool], hyper: &TreeHyper) -> Result<TreeModel> {
    if rows.len() != labels.len() {
        return Err(Error::Param(format!(
            "{} feature rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if hyper.max_depth > MAX_TREE_DEPTH || hyper.min_leaf == 0 || !(hyper.shrinkage > 0.0) || hyper.lambda < 0.0 {
        return Err(Error::Param(format!("invalid tree hyperparameters {hyper:?}")));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::DegenerateLabel);
    }
    let dim = rows[0].len();
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Param("feature rows must share a positive width".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Param("features must be finite".into()));
    }

    let n = rows.len();
    let sorted = (0..dim)
        .map(|f| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]).then(a.cmp(&b)));
            order
        })
        .collect();
    let booster = Booster {
        rows,
        sorted,
        hyper: *hyper,
    };

    let base_score = positives as f64 / n as f64;
    let mut raw = vec![logit(base_score); n];
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut trees = Vec::with_capacity(hyper.n_trees);
    for _ in 0..hyper.n_trees {
        let prob: Vec<f64> = raw.iter().map(|&r| sigmoid(r)).collect();
        let grad: Vec<f64> = prob.iter().zip(&y).map(|(p, y)| p - y).collect();
        let hess: Vec<f64> = prob.iter().map(|p| (p * (1.0 - p)).max(1e-12)).collect();
        let mut nodes = Vec::new();
        booster.grow(&mut nodes, vec![true; n], n, 0, &grad, &hess);
        let tree = RegressionTree {
            shrinkage: hyper.shrinkage,
            nodes,
        };
        for (r, x) in raw.iter_mut().zip(rows) {
            *r += tree.shrinkage * tree.predict(x);
        }
        trees.push(tree);
    }
    Ok(TreeModel {
        base_score,
        num_features: dim,
        trees,
    })
}

/// Recalibrated confidences in `[0, 1]`, one per feature row.
pub fn apply_rerank(model: &TreeModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != model.num_features) {
        return Err(Error::Param(format!(
            "feature row of width {} for a model trained on {}",
            r.len(),
            model.num_features
        )));
    }
    Ok(rows.par_iter().map(|x| model.predict(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 + 0.5) / n as f64]).collect();
        let labels = rows.iter().map(|r| r[0] > 0.5).collect();
        (rows, labels)
    }

    #[test]
    fn one_tree_separates_a_single_feature() {
        let (rows, labels) = separable(100);
        let hyper = TreeHyper {
            n_trees: 1,
            ..Default::default()
        };
        let model = train_rerank_tree(&rows, &labels, &hyper).unwrap();
        let root = &model.trees[0].nodes[0];
        assert_eq!(root.feature, Some(0));
        assert!((root.threshold - 0.5).abs() < 1e-9);
        let out = apply_rerank(&model, &rows).unwrap();
        for (p, &y) in out.iter().zip(&labels) {
            assert_eq!(*p > 0.5, y);
        }
    }

    #[test]
    fn constant_columns_are_never_split() {
        let (rows, labels) = separable(60);
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| vec![7.0, r[0], -1.0]).collect();
        let model = train_rerank_tree(&rows, &labels, &TreeHyper::default()).unwrap();
        for tree in &model.trees {
            for node in &tree.nodes {
                assert!(node.feature.is_none() || node.feature == Some(1));
            }
        }
    }

    #[test]
    fn single_class_labels_are_degenerate() {
        let rows = vec![vec![0.1], vec![0.2]];
        assert!(matches!(
            train_rerank_tree(&rows, &[true, true], &TreeHyper::default()),
            Err(Error::DegenerateLabel)
        ));
    }

    #[test]
    fn empty_ensemble_returns_base() {
        let model = TreeModel {
            base_score: 0.37,
            num_features: 2,
            trees: vec![],
        };
        assert_eq!(apply_rerank(&model, &[vec![0.0, 1.0], vec![5.0, -3.0]]).unwrap(), vec![0.37, 0.37]);
        assert!(matches!(apply_rerank(&model, &[vec![0.0]]), Err(Error::Param(_))));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let (rows, labels) = separable(40);
        let model = train_rerank_tree(&rows, &labels, &TreeHyper { n_trees: 3, ..Default::default() }).unwrap();
        let back = TreeModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);

        let mut broken = model.clone();
        broken.trees[0].nodes[0].feature = Some(4);
        assert!(TreeModel::from_json(&broken.to_json()).is_err());
    }

    #[test]
    fn abstention_rows_have_no_votes() {
        let preds = vec![Prediction::abstain("q")];
        let search = vec![SearchResult {
            neighbors: vec![0, 1, 2],
            similarities: vec![0.9, 0.8, 0.7],
        }];
        let labels = vec![LandmarkLabel::NON_LANDMARK; 3];
        let f = extract_rerank_features(&preds, &["q".to_string()], &search, &labels, None, None).unwrap();
        assert_eq!(f[0].class_vote_count, 0.0);
        assert_eq!(f[0].class_test_frequency, 0.0);
        assert_eq!(f[0].classifier_prob, 0.0);
        assert!((f[0].top1_sim - 0.9).abs() < 1e-7);
    }

    #[test]
    fn misaligned_inputs_are_integrity_errors() {
        let preds = vec![Prediction::abstain("q")];
        assert!(matches!(
            extract_rerank_features(&preds, &["other".to_string()], &[], &[], None, None),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            extract_rerank_features(&preds, &["q".to_string()], &[], &[], None, None),
            Err(Error::Integrity(_))
        ));
    }
}
