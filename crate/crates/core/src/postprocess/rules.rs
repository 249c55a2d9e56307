//! Distractor suppression rules.
//!
//! * Non-landmark penalty: a query that closely resembles the reference set of
//!   non-landmark images loses confidence.
//! * Frequency suppression: a landmark predicted more than `cap` times across
//!   the whole test set is demoted below every other prediction.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::{top_k_search_with, SearchParams, SearchResult};
use crate::recognition::Prediction;
use crate::store::{DescriptorSet, LandmarkLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltyMode {
    /// `confidence − s̄`, floored at zero.
    #[default]
    Subtract,
    /// Confidence set to zero.
    Zero,
}

/// How the top non-landmark similarities are summarized into `s̄`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonLandmarkStatistic {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessParams {
    pub tau: f64,
    pub topk_nl: usize,
    pub cap: usize,
    pub penalty_mode: PenaltyMode,
    pub statistic: NonLandmarkStatistic,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams {
            tau: 0.3,
            topk_nl: 3,
            cap: 20,
            penalty_mode: PenaltyMode::Subtract,
            statistic: NonLandmarkStatistic::Mean,
        }
    }
}

impl PostprocessParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Param(format!("tau={} must lie in [0, 1]", self.tau)));
        }
        if self.topk_nl == 0 {
            return Err(Error::Param("topk_nl must be at least 1".into()));
        }
        if self.cap == 0 {
            return Err(Error::Param("cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// `s̄` for one query. Similarities are `f32` quantities, so the statistic is
/// rounded back to `f32` before it meets the threshold.
pub fn nonlandmark_statistic(result: &SearchResult, params: &PostprocessParams) -> f32 {
    let top = &result.similarities[..params.topk_nl.min(result.len())];
    if top.is_empty() {
        return 0.0;
    }
    match params.statistic {
        NonLandmarkStatistic::Mean => {
            (top.iter().map(|&s| f64::from(s)).sum::<f64>() / top.len() as f64) as f32
        }
        NonLandmarkStatistic::Max => top.iter().copied().fold(f32::NEG_INFINITY, f32::max),
    }
}

fn penalize(p: &Prediction, s_bar: f32, params: &PostprocessParams) -> Prediction {
    let mut out = p.clone();
    // strict: s̄ equal to tau is left alone
    if s_bar > params.tau as f32 && p.confidence > 0.0 {
        out.confidence = match params.penalty_mode {
            PenaltyMode::Subtract => (p.confidence - f64::from(s_bar)).max(0.0),
            PenaltyMode::Zero => 0.0,
        };
    }
    out
}

/// Applies the non-landmark penalty from precomputed searches of each query
/// against the non-landmark set, aligned with `predictions`.
pub fn nonlandmark_penalty_from_results(
    predictions: &[Prediction],
    nonlandmark: &[SearchResult],
    params: &PostprocessParams,
) -> Result<Vec<Prediction>> {
    params.validate()?;
    if predictions.len() != nonlandmark.len() {
        return Err(Error::Integrity(format!(
            "{} predictions for {} non-landmark searches",
            predictions.len(),
            nonlandmark.len()
        )));
    }
    Ok(predictions
        .par_iter()
        .zip(nonlandmark.par_iter())
        .map(|(p, r)| penalize(p, nonlandmark_statistic(r, params), params))
        .collect())
}

/// Searches the non-landmark reference set for every query and lowers the
/// confidence of queries whose `s̄` exceeds `tau`. Landmark ids never change
/// and no confidence ever increases.
///
/// `queries` must list the predicted query ids in the same order.
pub fn nonlandmark_penalty(
    predictions: &[Prediction],
    queries: &DescriptorSet,
    nonlandmark_set: &DescriptorSet,
    params: &PostprocessParams,
    search: &SearchParams,
) -> Result<Vec<Prediction>> {
    params.validate()?;
    if nonlandmark_set.is_empty() {
        return Err(Error::Param("non-landmark set is empty".into()));
    }
    check_alignment(predictions, queries.ids())?;
    let k = params.topk_nl.min(nonlandmark_set.len());
    let results = top_k_search_with(queries, nonlandmark_set, k, search)?;
    nonlandmark_penalty_from_results(predictions, &results, params)
}

pub(crate) fn check_alignment(predictions: &[Prediction], query_ids: &[String]) -> Result<()> {
    if predictions.len() != query_ids.len()
        || predictions.iter().zip(query_ids).any(|(p, q)| &p.query_id != q)
    {
        return Err(Error::Integrity(
            "predictions are not aligned with the query set".into(),
        ));
    }
    Ok(())
}

/// Landmarks predicted strictly more than `cap` times.
pub fn overpredicted_landmarks(predictions: &[Prediction], cap: usize) -> Vec<LandmarkLabel> {
    let mut counts: HashMap<LandmarkLabel, usize> = HashMap::new();
    for p in predictions.iter().filter(|p| !p.is_abstention()) {
        *counts.entry(p.landmark).or_insert(0) += 1;
    }
    let mut over: Vec<LandmarkLabel> = counts
        .into_iter()
        .filter(|&(_, n)| n > cap)
        .map(|(l, _)| l)
        .collect();
    over.sort();
    over
}

/// Demotes every prediction of an over-predicted landmark by
/// `C = 1 + max confidence`, which places it strictly below every
/// non-negative confidence while keeping the demoted block's internal order.
///
/// Negative confidences mark rows that were already demoted; they are left
/// as they are, which makes the rule idempotent.
pub fn frequency_suppression(predictions: &[Prediction], cap: usize) -> Vec<Prediction> {
    let over = overpredicted_landmarks(predictions, cap);
    if over.is_empty() {
        return predictions.to_vec();
    }
    let shift = 1.0
        + predictions
            .iter()
            .map(|p| p.confidence)
            .fold(0.0f64, f64::max);
    predictions
        .par_iter()
        .map(|p| {
            let mut out = p.clone();
            if p.confidence >= 0.0 && over.binary_search(&p.landmark).is_ok() {
                out.confidence = p.confidence - shift;
            }
            out
        })
        .collect()
}
