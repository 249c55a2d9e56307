//! Recognition by retrieval: neighbor lists become one `(landmark, confidence)`
//! prediction per query.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::{top_k_search_with, SearchParams, SearchResult};
use crate::store::{DescriptorSet, LandmarkLabel};

/// One submission row.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query_id: String,
    pub landmark: LandmarkLabel,
    pub confidence: f64,
}

impl Prediction {
    pub fn abstain(query_id: impl Into<String>) -> Self {
        Prediction {
            query_id: query_id.into(),
            landmark: LandmarkLabel::NON_LANDMARK,
            confidence: 0.0,
        }
    }

    pub fn is_abstention(&self) -> bool {
        !self.landmark.is_landmark()
    }
}

/// Aggregated retrieval score per landmark for one query.
pub type ClassScores = BTreeMap<LandmarkLabel, f64>;

/// Classifier probabilities keyed by query id, then landmark.
pub type ClassifierProbs = HashMap<String, HashMap<LandmarkLabel, f64>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    /// Neighbors per class that contribute to its score.
    pub k_agg: usize,
    /// Exponent applied to the classifier probability.
    pub alpha: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams { k_agg: 3, alpha: 0.5 }
    }
}

impl FusionParams {
    pub fn validate(&self, k_search: usize) -> Result<()> {
        if self.k_agg == 0 || self.k_agg > k_search {
            return Err(Error::Param(format!(
                "k_agg={} must lie in [1, k_search={k_search}]",
                self.k_agg
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Param(format!("alpha={} must lie in [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Sums the `k_agg` highest similarities of each class among the neighbors.
/// Neighbors labeled `-1` do not vote.
pub fn aggregate_class_scores(
    result: &SearchResult,
    index_labels: Option<&[LandmarkLabel]>,
    k_agg: usize,
) -> Result<ClassScores> {
    let labels = index_labels
        .ok_or_else(|| Error::Integrity("index set carries no landmark labels".into()))?;
    let mut scores = ClassScores::new();
    let mut used: HashMap<LandmarkLabel, usize> = HashMap::new();
    // neighbors arrive best-first, so the first k_agg per class are its top
    for (row, sim) in result.iter() {
        let label = *labels.get(row).ok_or(Error::Index {
            index: row,
            len: labels.len(),
        })?;
        if !label.is_landmark() {
            continue;
        }
        let n = used.entry(label).or_insert(0);
        if *n < k_agg {
            *n += 1;
            *scores.entry(label).or_insert(0.0) += f64::from(sim);
        }
    }
    Ok(scores)
}

/// `retrieval · prob^alpha`, or the bare retrieval score without a probability.
pub fn fuse_with_classifier(retrieval: f64, class_prob: Option<f64>, alpha: f64) -> Result<f64> {
    match class_prob {
        None => Ok(retrieval),
        Some(p) if (0.0..=1.0).contains(&p) => Ok(retrieval * p.powf(alpha)),
        Some(p) => Err(Error::Param(format!("class probability {p} outside [0, 1]"))),
    }
}

/// Turns neighbor lists into predictions.
///
/// The landmark with the highest fused score wins, ties going to the lowest
/// landmark id. A query with no scored landmark, or whose best fused score is
/// not positive, abstains with `(-1, 0)`. A class missing from a query's
/// classifier row is fused as if no probability were given.
pub fn predict_from_results(
    query_ids: &[String],
    results: &[SearchResult],
    index_labels: Option<&[LandmarkLabel]>,
    probs: Option<&ClassifierProbs>,
    params: &FusionParams,
) -> Result<Vec<Prediction>> {
    if query_ids.len() != results.len() {
        return Err(Error::Integrity(format!(
            "{} query ids for {} search results",
            query_ids.len(),
            results.len()
        )));
    }
    if !(0.0..=1.0).contains(&params.alpha) || params.k_agg == 0 {
        return Err(Error::Param(format!("invalid fusion params {params:?}")));
    }
    query_ids
        .par_iter()
        .zip(results.par_iter())
        .map(|(qid, res)| {
            let scores = aggregate_class_scores(res, index_labels, params.k_agg)?;
            let row = probs.and_then(|p| p.get(qid));
            let mut best: Option<(LandmarkLabel, f64)> = None;
            for (&label, &score) in &scores {
                let prob = row.and_then(|r| r.get(&label)).copied();
                let fused = fuse_with_classifier(score, prob, params.alpha)?;
                if best.is_none_or(|(_, b)| fused > b) {
                    best = Some((label, fused));
                }
            }
            Ok(match best {
                Some((landmark, confidence)) if confidence > 0.0 => Prediction {
                    query_id: qid.clone(),
                    landmark,
                    confidence,
                },
                _ => Prediction::abstain(qid.clone()),
            })
        })
        .collect()
}

/// Searches the index and predicts one landmark per query.
pub fn predict(
    queries: &DescriptorSet,
    index: &DescriptorSet,
    probs: Option<&ClassifierProbs>,
    params: &FusionParams,
    k_search: usize,
    search: &SearchParams,
) -> Result<Vec<Prediction>> {
    params.validate(k_search)?;
    let results = top_k_search_with(queries, index, k_search, search)?;
    predict_from_results(queries.ids(), &results, index.labels(), probs, params)
}

/// How an abstention's landmark cell is rendered in CSV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbstentionStyle {
    /// Empty cell, as in competition submissions.
    #[default]
    Empty,
    MinusOne,
}

/// Rounds a confidence to the 6 decimals used in prediction files.
pub fn quantize_confidence(c: f64) -> f64 {
    format!("{c:.6}").parse().expect("formatted float parses")
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    predictions: &[Prediction],
    style: AbstentionStyle,
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "query_id,landmark_id,confidence").unwrap();
    for p in predictions {
        let landmark = match (p.is_abstention(), style) {
            (true, AbstentionStyle::Empty) => String::new(),
            _ => p.landmark.to_string(),
        };
        writeln!(out, "{},{landmark},{:.6}", p.query_id, p.confidence).unwrap();
    }
    crate::store::write_atomic(path.as_ref(), &out)
}

pub(crate) fn parse_label(cell: &str) -> Result<LandmarkLabel> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(LandmarkLabel::NON_LANDMARK);
    }
    let v: i64 = cell
        .parse()
        .map_err(|_| Error::Format(format!("bad landmark id {cell:?}")))?;
    LandmarkLabel::new(v)
}

pub(crate) fn parse_f64(cell: &str, what: &str) -> Result<f64> {
    cell.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad {what} {cell:?}")))
}

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let mut reader = csv_reader(path.as_ref())?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 3 {
            return Err(Error::Format(format!(
                "prediction row has {} fields",
                record.len()
            )));
        }
        out.push(Prediction {
            query_id: record[0].to_string(),
            landmark: parse_label(&record[1])?,
            confidence: parse_f64(&record[2], "confidence")?,
        });
    }
    Ok(out)
}

/// Reads `query_id,landmark_id,prob` rows.
pub fn read_classifier_probs(path: impl AsRef<Path>) -> Result<ClassifierProbs> {
    let mut reader = csv_reader(path.as_ref())?;
    let mut out = ClassifierProbs::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 3 {
            return Err(Error::Format(format!(
                "classifier row has {} fields",
                record.len()
            )));
        }
        let prob = parse_f64(&record[2], "probability")?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Param(format!("class probability {prob} outside [0, 1]")));
        }
        out.entry(record[0].to_string())
            .or_default()
            .insert(parse_label(&record[1])?, prob);
    }
    Ok(out)
}
