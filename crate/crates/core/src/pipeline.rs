//! End-to-end orchestration: load, search, predict, post-process, evaluate.
//!
//! Each stage writes its predictions before the next one starts. Confidences
//! are rounded to the six decimals of the prediction files at every stage
//! boundary, so a stage fed from the previous stage's file computes exactly
//! what the orchestrated run computes.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::knn::{fused_search, write_neighbors_csv, FeatureSet, FeatureSetBundle, SearchParams, SearchResult};
use crate::metrics::{gap_at_1, map_at_100, GroundTruth};
use crate::postprocess::{
    apply_rerank, extract_rerank_features, frequency_suppression, nonlandmark_penalty_from_results,
    train_rerank_tree, write_features_csv, PostprocessParams, RerankFeatures, TreeHyper, TreeModel,
};
use crate::recognition::{
    predict_from_results, quantize_confidence, read_classifier_probs, write_predictions, ClassifierProbs,
    Prediction,
};
use crate::store::{l2_normalize, load_descriptors, DescriptorSet, LandmarkLabel};

/// Loads an LMKE file ready for search. Files flagged as normalized are
/// checked and used as they are; anything else is normalized once.
pub fn load_normalized(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    let set = load_descriptors(path)?;
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    if set.is_normalized() {
        set.into_normalized()
    } else {
        l2_normalize(&set)
    }
}

fn load_bundle(cfg: &PipelineConfig, paths: &[PathBuf]) -> Result<FeatureSetBundle> {
    let members = paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(FeatureSet {
                name: cfg.feature_name(i),
                set: load_normalized(p)?,
                weight: cfg.weight(i),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureSetBundle::new(members)
}

/// Descriptor sets and side inputs named by a config.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub queries: FeatureSetBundle,
    pub index: FeatureSetBundle,
    pub nonlandmark: Option<FeatureSetBundle>,
    pub probs: Option<ClassifierProbs>,
    pub truth: Option<GroundTruth>,
}

impl PipelineInputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        if cfg.queries.is_empty() || cfg.queries.len() != cfg.index.len() {
            return Err(Error::Param("need matching `queries` and `index` lists".into()));
        }
        let queries = load_bundle(cfg, &cfg.queries)?;
        let index = load_bundle(cfg, &cfg.index)?;
        if index.primary().labels().is_none() {
            return Err(Error::Integrity("index set carries no landmark labels".into()));
        }
        let nonlandmark = if cfg.nonlandmark.is_empty() {
            None
        } else {
            Some(load_bundle(cfg, &cfg.nonlandmark)?)
        };
        let probs = cfg.classifier_probs.as_ref().map(read_classifier_probs).transpose()?;
        let truth = cfg.truth.as_ref().map(GroundTruth::read_csv).transpose()?;
        Ok(PipelineInputs {
            queries,
            index,
            nonlandmark,
            probs,
            truth,
        })
    }

    pub fn index_labels(&self) -> &[LandmarkLabel] {
        self.index.primary().labels().expect("checked at load")
    }
}

pub fn quantize(predictions: Vec<Prediction>) -> Vec<Prediction> {
    predictions
        .into_iter()
        .map(|mut p| {
            p.confidence = quantize_confidence(p.confidence);
            p
        })
        .collect()
}

/// Neighbors of every query in the labeled index.
pub fn index_search(inputs: &PipelineInputs, k: usize, search: &SearchParams) -> Result<Vec<SearchResult>> {
    fused_search(&inputs.queries, &inputs.index, k.min(inputs.index.len()), search)
}

/// Neighbors of every query in the non-landmark set; at least three so the
/// re-rank features are always filled the same way.
pub fn nonlandmark_search(
    inputs: &PipelineInputs,
    post: &PostprocessParams,
    search: &SearchParams,
) -> Result<Option<Vec<SearchResult>>> {
    let Some(nl) = &inputs.nonlandmark else {
        return Ok(None);
    };
    let k = post.topk_nl.max(3).min(nl.len());
    fused_search(&inputs.queries, nl, k, search).map(Some)
}

pub fn raw_predictions(
    inputs: &PipelineInputs,
    results: &[SearchResult],
    cfg: &PipelineConfig,
) -> Result<Vec<Prediction>> {
    cfg.fusion.validate(cfg.k_search)?;
    let preds = predict_from_results(
        inputs.queries.ids(),
        results,
        Some(inputs.index_labels()),
        inputs.probs.as_ref(),
        &cfg.fusion,
    )?;
    Ok(quantize(preds))
}

pub fn apply_rule1(
    predictions: &[Prediction],
    query_ids: &[String],
    nonlandmark: Option<&[SearchResult]>,
    post: &PostprocessParams,
) -> Result<Vec<Prediction>> {
    let nl = nonlandmark.ok_or_else(|| Error::Param("rule1 needs a nonlandmark set".into()))?;
    crate::postprocess::check_alignment(predictions, query_ids)?;
    Ok(quantize(nonlandmark_penalty_from_results(predictions, nl, post)?))
}

pub fn apply_rule2(predictions: &[Prediction], post: &PostprocessParams) -> Result<Vec<Prediction>> {
    post.validate()?;
    Ok(quantize(frequency_suppression(predictions, post.cap)))
}

/// Deterministic split of the queries into re-rank training (`true`) and
/// held-out rows, uniform at random under `seed`.
pub fn rerank_split(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = ((n as f64) * fraction).round() as usize;
    let mut train = vec![false; n];
    for &i in &order[..take.min(n)] {
        train[i] = true;
    }
    train
}

/// Whether each prediction names the query's true landmark.
pub fn correctness_labels(predictions: &[Prediction], truth: &GroundTruth) -> Result<Vec<bool>> {
    predictions
        .iter()
        .map(|p| {
            let t = truth
                .get(&p.query_id)
                .ok_or_else(|| Error::Integrity(format!("no ground truth for {}", p.query_id)))?;
            Ok(!p.is_abstention() && t == p.landmark)
        })
        .collect()
}

/// Fits the re-rank model on the training share of the rows.
pub fn train_rerank_on_split(
    features: &[RerankFeatures],
    predictions: &[Prediction],
    truth: &GroundTruth,
    fraction: f64,
    seed: u64,
    hyper: &TreeHyper,
) -> Result<TreeModel> {
    if features.len() != predictions.len() {
        return Err(Error::Integrity(format!(
            "{} feature rows for {} predictions",
            features.len(),
            predictions.len()
        )));
    }
    let labels = correctness_labels(predictions, truth)?;
    let split = rerank_split(predictions.len(), fraction, seed);
    let (rows, ys): (Vec<Vec<f64>>, Vec<bool>) = features
        .iter()
        .zip(labels)
        .zip(&split)
        .filter(|(_, &train)| train)
        .map(|((f, y), _)| (f.to_vec(), y))
        .unzip();
    train_rerank_tree(&rows, &ys, hyper)
}

/// Replaces confidences with the model's probability of being correct.
/// Rows demoted by frequency suppression stay below every other row.
pub fn rerank_predictions(
    model: &TreeModel,
    features: &[RerankFeatures],
    predictions: &[Prediction],
) -> Result<Vec<Prediction>> {
    if features.len() != predictions.len() {
        return Err(Error::Integrity(format!(
            "{} feature rows for {} predictions",
            features.len(),
            predictions.len()
        )));
    }
    let rows: Vec<Vec<f64>> = features.iter().map(RerankFeatures::to_vec).collect();
    let scores = apply_rerank(model, &rows)?;
    let out = predictions
        .iter()
        .zip(scores)
        .map(|(p, s)| {
            let mut p = p.clone();
            if !p.is_abstention() {
                p.confidence = if p.confidence < 0.0 { s - 2.0 } else { s };
            }
            p
        })
        .collect();
    Ok(quantize(out))
}

/// Index ids sharing each query's true landmark; empty for distractors.
pub fn relevant_index_ids(
    query_ids: &[String],
    index_ids: &[String],
    index_labels: &[LandmarkLabel],
    truth: &GroundTruth,
) -> Vec<HashSet<String>> {
    query_ids
        .iter()
        .map(|q| match truth.get(q) {
            Some(label) if label.is_landmark() => index_ids
                .iter()
                .zip(index_labels)
                .filter(|(_, l)| **l == label)
                .map(|(id, _)| id.clone())
                .collect(),
            _ => HashSet::new(),
        })
        .collect()
}

/// Scores and output file of one pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub name: &'static str,
    pub predictions: PathBuf,
    pub abstentions: usize,
    pub gap: Option<f64>,
    /// GAP on the queries held out of re-rank training.
    pub holdout_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub queries: usize,
    pub index_size: usize,
    pub feature_sets: Vec<String>,
    pub map_at_100: Option<f64>,
    pub stages: Vec<StageReport>,
    pub timings: Vec<(&'static str, Duration)>,
}

impl PipelineReport {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Text written to `report.txt`. Timings are left out so the file is
    /// identical across runs.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        writeln!(s, "queries: {}", self.queries).unwrap();
        writeln!(s, "index: {}", self.index_size).unwrap();
        writeln!(s, "feature_sets: {}", self.feature_sets.join(",")).unwrap();
        writeln!(s, "map@100: {}", fmt(self.map_at_100)).unwrap();
        writeln!(s, "stage,gap@1,holdout_gap@1,abstentions,predictions").unwrap();
        for st in &self.stages {
            let file = st.predictions.file_name().map(|f| f.to_string_lossy()).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{file}",
                st.name,
                fmt(st.gap),
                fmt(st.holdout_gap),
                st.abstentions
            )
            .unwrap();
        }
        s
    }

    pub fn render_timings(&self) -> String {
        self.timings
            .iter()
            .map(|(stage, d)| format!("{stage}: {:.3}s", d.as_secs_f64()))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    })
}

struct Timer {
    timings: Vec<(&'static str, Duration)>,
}

impl Timer {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = staged(stage, f());
        self.timings.push((stage, start.elapsed()));
        if out.is_ok() {
            log::info!("{stage} done in {:.3}s", start.elapsed().as_secs_f64());
        }
        out
    }
}

/// Runs every enabled stage and writes per-stage predictions plus
/// `report.txt` into `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let mut timer = Timer { timings: Vec::new() };
    timer.time("config", || cfg.validate())?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let inputs = timer.time("load", || PipelineInputs::load(cfg))?;
    let query_ids = inputs.queries.ids().to_vec();

    let results = timer.time("search", || {
        let r = index_search(&inputs, cfg.k_search, &cfg.search)?;
        if cfg.write_neighbors {
            write_neighbors_csv(out.join("neighbors.csv"), &query_ids, inputs.index.ids(), &r)?;
        }
        Ok(r)
    })?;
    let nl_results = timer.time("nonlandmark_search", || nonlandmark_search(&inputs, &cfg.post, &cfg.search))?;

    let mut stages: Vec<(&'static str, Vec<Prediction>)> = Vec::new();
    let raw = timer.time("predict", || raw_predictions(&inputs, &results, cfg))?;
    stages.push(("raw", raw));
    if cfg.rule1 {
        let last = &stages.last().unwrap().1;
        let p = timer.time("rule1", || apply_rule1(last, &query_ids, nl_results.as_deref(), &cfg.post))?;
        stages.push(("rule1", p));
    }
    if cfg.rule2 {
        let last = &stages.last().unwrap().1;
        let p = timer.time("rule2", || apply_rule2(last, &cfg.post))?;
        stages.push(("rule2", p));
    }

    let features = timer.time("features", || {
        let last = &stages.last().unwrap().1;
        let f = extract_rerank_features(
            last,
            &query_ids,
            &results,
            inputs.index_labels(),
            nl_results.as_deref(),
            inputs.probs.as_ref(),
        )?;
        write_features_csv(out.join("features.csv"), &query_ids, &f)?;
        Ok(f)
    })?;

    let mut split = None;
    if cfg.rerank {
        let truth = inputs.truth.as_ref().expect("checked by validate");
        let last = &stages.last().unwrap().1;
        let p = timer.time("rerank", || {
            let model = train_rerank_on_split(
                &features,
                last,
                truth,
                cfg.rerank_train_fraction,
                cfg.seed,
                &cfg.rerank_hyper,
            )?;
            model.save(out.join("rerank_model.json"))?;
            rerank_predictions(&model, &features, last)
        })?;
        stages.push(("rerank", p));
        split = Some(rerank_split(query_ids.len(), cfg.rerank_train_fraction, cfg.seed));
    }

    let mut reports = Vec::new();
    for &(name, ref preds) in &stages {
        let path = out.join(format!("predictions_{name}.csv"));
        staged(name, write_predictions(&path, preds, cfg.abstention_style))?;
        reports.push(StageReport {
            name,
            predictions: path,
            abstentions: preds.iter().filter(|p| p.is_abstention()).count(),
            gap: None,
            holdout_gap: None,
        });
    }

    let map = timer.time("evaluate", || {
        let Some(truth) = &inputs.truth else {
            return Ok(None);
        };
        for (report, (_, preds)) in reports.iter_mut().zip(&stages) {
            report.gap = Some(gap_at_1(preds, truth)?);
            if let Some(split) = &split {
                report.holdout_gap = holdout_gap(preds, split, truth);
            }
        }
        let ranked: Vec<Vec<String>> = results
            .iter()
            .map(|r| r.neighbors.iter().map(|&i| inputs.index.ids()[i].clone()).collect())
            .collect();
        let relevant = relevant_index_ids(&query_ids, inputs.index.ids(), inputs.index_labels(), truth);
        Ok(match map_at_100(&ranked, &relevant) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        })
    })?;

    let report = PipelineReport {
        queries: query_ids.len(),
        index_size: inputs.index.len(),
        feature_sets: inputs.queries.members().iter().map(|m| m.name.clone()).collect(),
        map_at_100: map,
        stages: reports,
        timings: timer.timings,
    };
    staged(
        "report",
        crate::store::write_atomic(&out.join("report.txt"), report.render().as_bytes()),
    )?;
    Ok(report)
}

/// GAP restricted to the held-out queries, `None` if they hold no landmark.
fn holdout_gap(predictions: &[Prediction], train: &[bool], truth: &GroundTruth) -> Option<f64> {
    let held: Vec<Prediction> = predictions
        .iter()
        .zip(train)
        .filter(|(_, &t)| !t)
        .map(|(p, _)| p.clone())
        .collect();
    let ids: HashSet<&str> = held.iter().map(|p| p.query_id.as_str()).collect();
    let sub = GroundTruth::new(
        truth
            .iter()
            .filter(|(q, _)| ids.contains(q))
            .map(|(q, l)| (q.to_string(), l))
            .collect(),
    );
    gap_at_1(&held, &sub).ok()
}
