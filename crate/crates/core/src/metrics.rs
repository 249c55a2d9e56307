//! Global Average Precision at 1 and mean Average Precision at k.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::recognition::{csv_reader, parse_label, Prediction};
use crate::store::LandmarkLabel;

/// True landmark of every test query; `-1` marks a distractor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    labels: HashMap<String, LandmarkLabel>,
}

impl GroundTruth {
    pub fn new(labels: HashMap<String, LandmarkLabel>) -> Self {
        GroundTruth { labels }
    }

    pub fn get(&self, query_id: &str) -> Option<LandmarkLabel> {
        self.labels.get(query_id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of queries that depict a landmark.
    pub fn landmark_queries(&self) -> usize {
        self.labels.values().filter(|l| l.is_landmark()).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, LandmarkLabel)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Reads `query_id,landmark_id` rows; `-1` or an empty cell is a distractor.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv_reader(path.as_ref())?;
        let mut labels = HashMap::new();
        for record in reader.records() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::Format(format!("truth row has {} fields", record.len())));
            }
            if labels
                .insert(record[0].to_string(), parse_label(&record[1])?)
                .is_some()
            {
                return Err(Error::Integrity(format!("duplicate truth row for {}", &record[0])));
            }
        }
        Ok(GroundTruth { labels })
    }

    /// Writes rows sorted by query id, distractors as `-1`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut rows: Vec<_> = self.labels.iter().collect();
        rows.sort();
        let mut out = Vec::new();
        writeln!(out, "query_id,landmark_id").unwrap();
        for (id, label) in rows {
            writeln!(out, "{id},{label}").unwrap();
        }
        crate::store::write_atomic(path.as_ref(), &out)
    }
}

/// One scored row of the GAP ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionPoint {
    pub rank: usize,
    pub query_id: String,
    pub landmark: LandmarkLabel,
    pub confidence: f64,
    pub relevant: bool,
    pub precision: f64,
}

/// Ranks the non-abstaining predictions by confidence (ties by query id) and
/// records the running precision.
pub fn gap_trace(predictions: &[Prediction], truth: &GroundTruth) -> Result<Vec<PrecisionPoint>> {
    let mut seen = HashSet::with_capacity(predictions.len());
    for p in predictions {
        if !seen.insert(p.query_id.as_str()) {
            return Err(Error::Integrity(format!("duplicate prediction for {}", p.query_id)));
        }
        if truth.get(&p.query_id).is_none() {
            return Err(Error::Integrity(format!("no ground truth for {}", p.query_id)));
        }
    }
    let mut ranked: Vec<&Prediction> = predictions.iter().filter(|p| !p.is_abstention()).collect();
    ranked.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.query_id.cmp(&b.query_id))
    });
    let mut correct = 0usize;
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let relevant = truth.get(&p.query_id) == Some(p.landmark);
            if relevant {
                correct += 1;
            }
            PrecisionPoint {
                rank: i + 1,
                query_id: p.query_id.clone(),
                landmark: p.landmark,
                confidence: p.confidence,
                relevant,
                precision: correct as f64 / (i + 1) as f64,
            }
        })
        .collect())
}

/// Global Average Precision over one prediction per query:
/// `(1/M) Σ_i P(i)·rel(i)` with `M` the number of landmark queries.
pub fn gap_at_1(predictions: &[Prediction], truth: &GroundTruth) -> Result<f64> {
    let trace = gap_trace(predictions, truth)?;
    let m = truth.landmark_queries();
    if m == 0 {
        return Err(Error::UndefinedMetric(
            "ground truth holds no landmark queries".into(),
        ));
    }
    let sum: f64 = trace.iter().filter(|p| p.relevant).map(|p| p.precision).sum();
    Ok(sum / m as f64)
}

pub fn write_precision_trace(path: impl AsRef<Path>, trace: &[PrecisionPoint]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "rank,query_id,landmark_id,confidence,relevant,precision").unwrap();
    for p in trace {
        writeln!(
            out,
            "{},{},{},{:.6},{},{:.6}",
            p.rank, p.query_id, p.landmark, p.confidence, p.relevant as u8, p.precision
        )
        .unwrap();
    }
    crate::store::write_atomic(path.as_ref(), &out)
}

/// Average precision of one ranked list truncated at `k`:
/// `(1/min(R, k)) Σ_{r≤k} P(r)·rel(r)`. `None` when nothing is relevant.
pub fn average_precision_at_k<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, item) in ranked.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / relevant.len().min(k) as f64)
}

/// Mean over queries of [`average_precision_at_k`]. Queries without relevant
/// items are left out of the mean.
pub fn map_at_k<T: Eq + Hash>(ranked: &[Vec<T>], relevant: &[HashSet<T>], k: usize) -> Result<f64> {
    if ranked.len() != relevant.len() {
        return Err(Error::Integrity(format!(
            "{} ranked lists for {} relevance sets",
            ranked.len(),
            relevant.len()
        )));
    }
    if k == 0 {
        return Err(Error::Param("k must be at least 1".into()));
    }
    let mut total = 0.0;
    let mut scored = 0usize;
    for (q, (list, rel)) in ranked.iter().zip(relevant).enumerate() {
        let mut seen = HashSet::with_capacity(list.len());
        if !list.iter().all(|item| seen.insert(item)) {
            return Err(Error::Integrity(format!("ranked list {q} repeats an item")));
        }
        match average_precision_at_k(list, rel, k) {
            Some(ap) => {
                total += ap;
                scored += 1;
            }
            None => log::debug!("query {q} has no relevant items; excluded from mAP"),
        }
    }
    if scored == 0 {
        return Err(Error::UndefinedMetric("no query has a relevant item".into()));
    }
    Ok(total / scored as f64)
}

pub fn map_at_100<T: Eq + Hash>(ranked: &[Vec<T>], relevant: &[HashSet<T>]) -> Result<f64> {
    map_at_k(ranked, relevant, 100)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(v: i64) -> LandmarkLabel {
        LandmarkLabel::new(v).unwrap()
    }

    fn pred(id: &str, l: i64, c: f64) -> Prediction {
        Prediction {
            query_id: id.into(),
            landmark: label(l),
            confidence: c,
        }
    }

    fn truth(rows: &[(&str, i64)]) -> GroundTruth {
        GroundTruth::new(rows.iter().map(|(k, v)| (k.to_string(), label(*v))).collect())
    }

    #[test]
    fn all_correct_is_one() {
        let t = truth(&[("a", 1), ("b", 2), ("c", 3)]);
        let p = [pred("a", 1, 0.1), pred("b", 2, 5.0), pred("c", 3, 0.7)];
        assert_eq!(gap_at_1(&p, &t).unwrap(), 1.0);
    }

    #[test]
    fn wrong_then_correct() {
        let t = truth(&[("a", 1), ("b", 2)]);
        let p = [pred("a", 9, 0.9), pred("b", 2, 0.5)];
        assert_eq!(gap_at_1(&p, &t).unwrap(), 0.25);
    }

    #[test]
    fn confident_distractor_dilutes_precision() {
        let t = truth(&[("d", -1), ("a", 1)]);
        let p = [pred("d", 4, 0.9), pred("a", 1, 0.5)];
        assert_eq!(gap_at_1(&p, &t).unwrap(), 0.5);
        // abstaining on the distractor restores full precision
        let p = [Prediction::abstain("d"), pred("a", 1, 0.5)];
        assert_eq!(gap_at_1(&p, &t).unwrap(), 1.0);
    }

    #[test]
    fn ties_break_on_query_id() {
        let t = truth(&[("a", 1), ("b", 2)]);
        let p = [pred("b", 2, 0.5), pred("a", 7, 0.5)];
        // "a" (wrong) ranks first
        assert_eq!(gap_at_1(&p, &t).unwrap(), 0.25);
    }

    #[test]
    fn gap_errors() {
        let t = truth(&[("a", 1)]);
        assert!(matches!(gap_at_1(&[pred("z", 1, 1.0)], &t), Err(Error::Integrity(_))));
        assert!(matches!(
            gap_at_1(&[pred("a", 1, 1.0), pred("a", 1, 0.5)], &t),
            Err(Error::Integrity(_))
        ));
        let t = truth(&[("d", -1)]);
        assert!(matches!(gap_at_1(&[], &t), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn map_hand_values() {
        let rel: HashSet<&str> = ["x", "y"].into_iter().collect();
        let ranked = vec!["x", "n", "y"];
        let v = map_at_100(&[ranked], &[rel]).unwrap();
        assert!((v - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((v - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn map_truncates_at_100() {
        let mut ranked: Vec<String> = (0..100).map(|i| format!("n{i}")).collect();
        ranked.push("hit".into());
        let rel: HashSet<String> = ["hit".to_string()].into_iter().collect();
        assert_eq!(map_at_100(&[ranked], &[rel]).unwrap(), 0.0);
    }

    #[test]
    fn map_excludes_queries_without_relevant_items() {
        let ranked = vec![vec![1, 2], vec![3, 4]];
        let rel = vec![HashSet::from([1]), HashSet::new()];
        assert_eq!(map_at_100(&ranked, &rel).unwrap(), 1.0);
        assert!(matches!(
            map_at_100(&[vec![1]], &[HashSet::<i32>::new()]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            map_at_100(&[vec![1, 1]], &[HashSet::from([1])]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn truth_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "query_id,landmark_id\na,5\nb,-1\nc,\n").unwrap();
        let t = GroundTruth::read_csv(&path).unwrap();
        assert_eq!(t.get("a"), Some(label(5)));
        assert_eq!(t.get("b"), Some(LandmarkLabel::NON_LANDMARK));
        assert_eq!(t.get("c"), Some(LandmarkLabel::NON_LANDMARK));
        t.write_csv(&path).unwrap();
        assert_eq!(GroundTruth::read_csv(&path).unwrap(), t);
    }
}
