//! Synthetic recognition datasets with a known ground truth.
//!
//! Landmark images are unit vectors scattered around one random unit centroid
//! per class: `normalize(c + σ·z/√d)` with `z ~ N(0, I)`, so `σ` is the
//! expected relative noise norm regardless of dimension.
//!
//! Non-landmark references are spread the same way around a handful of
//! non-landmark centroids. A quarter of the index images of the first few
//! landmarks are drawn around those centroids too, the kind of label noise
//! that makes some distractor queries look like confident landmark hits.
//! Exactly `⌈ρ·D⌉` distractor queries are drawn near a non-landmark centroid
//! with a mean top-3 similarity above 0.3 against the references; the others
//! are uniform random directions kept at or below 0.3.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::knn::inner_product;
use crate::metrics::GroundTruth;
use crate::store::{save_descriptors, DescriptorSet, LandmarkLabel};

/// Similarity bar the distractor construction is built around.
pub const DISTRACTOR_THRESHOLD: f32 = 0.3;
/// Non-landmark neighbors averaged when measuring a distractor.
pub const DISTRACTOR_TOPK: usize = 3;
const MAX_NONLANDMARK_CLUSTERS: usize = 10;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_landmarks: usize,
    pub images_per_landmark: usize,
    pub queries_per_landmark: usize,
    pub num_distractor_queries: usize,
    pub num_nonlandmark_refs: usize,
    pub dim: usize,
    /// Intra-class noise.
    pub sigma: f64,
    /// Fraction of distractors that resemble the non-landmark references.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_landmarks: 50,
            images_per_landmark: 20,
            queries_per_landmark: 5,
            num_distractor_queries: 200,
            num_nonlandmark_refs: 1000,
            dim: 512,
            sigma: 0.05,
            rho: 0.3,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_landmarks", self.num_landmarks),
            ("images_per_landmark", self.images_per_landmark),
            ("queries_per_landmark", self.queries_per_landmark),
            ("num_nonlandmark_refs", self.num_nonlandmark_refs),
            ("dim", self.dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Param(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Param(format!("rho={} must lie in [0, 1]", self.rho)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Param(format!("sigma={} must be positive", self.sigma)));
        }
        Ok(())
    }

    /// Number of distractor queries built to trip the non-landmark rule.
    pub fn near_distractors(&self) -> usize {
        (self.rho * self.num_distractor_queries as f64).ceil() as usize
    }

    pub fn nonlandmark_clusters(&self) -> usize {
        self.num_nonlandmark_refs.min(MAX_NONLANDMARK_CLUSTERS)
    }

    /// Index images per contaminated landmark that sit on a non-landmark
    /// centroid.
    pub fn contaminated_per_landmark(&self) -> usize {
        self.images_per_landmark / 4
    }
}

/// A generated dataset; every set is normalized.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub index: DescriptorSet,
    pub queries: DescriptorSet,
    pub nonlandmark: DescriptorSet,
    pub truth: GroundTruth,
    /// Ids of the distractor queries built to resemble non-landmark images.
    pub near_distractors: Vec<String>,
}

/// Paths of the files written by [`SynthDataset::write`].
#[derive(Debug, Clone)]
pub struct SynthFiles {
    pub index: PathBuf,
    pub queries: PathBuf,
    pub nonlandmark: PathBuf,
    pub truth: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        SynthFiles {
            index: dir.join("index.lmke"),
            queries: dir.join("queries.lmke"),
            nonlandmark: dir.join("nonlandmark.lmke"),
            truth: dir.join("truth.csv"),
        }
    }
}

impl SynthDataset {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SynthFiles> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles::in_dir(dir);
        save_descriptors(&self.index, &files.index)?;
        save_descriptors(&self.queries, &files.queries)?;
        save_descriptors(&self.nonlandmark, &files.nonlandmark)?;
        self.truth.write_csv(&files.truth)?;
        Ok(files)
    }
}

struct Sampler {
    rng: ChaCha8Rng,
    dim: usize,
    sigma: f64,
}

impl Sampler {
    fn unit(&mut self) -> Vec<f32> {
        let v: Vec<f64> = (0..self.dim).map(|_| self.rng.sample(StandardNormal)).collect();
        normalize(&v)
    }

    fn around(&mut self, center: &[f32]) -> Vec<f32> {
        let scale = self.sigma / (self.dim as f64).sqrt();
        let v: Vec<f64> = center
            .iter()
            .map(|&c| f64::from(c) + scale * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        normalize(&v)
    }
}

fn normalize(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Mean of the `DISTRACTOR_TOPK` largest similarities of `q` against `refs`.
pub fn mean_top_similarity(q: &[f32], refs: &DescriptorSet) -> f32 {
    let mut sims: Vec<f32> = refs.rows().map(|r| inner_product(q, r)).collect();
    sims.sort_by(|a, b| b.total_cmp(a));
    let top = &sims[..DISTRACTOR_TOPK.min(sims.len())];
    (top.iter().map(|&s| f64::from(s)).sum::<f64>() / top.len() as f64) as f32
}

fn build(ids: Vec<String>, labels: Option<Vec<LandmarkLabel>>, rows: Vec<Vec<f32>>, dim: usize) -> Result<DescriptorSet> {
    DescriptorSet::new(ids, labels, rows.concat(), dim)?.into_normalized()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        dim: spec.dim,
        sigma: spec.sigma,
    };

    let centroids: Vec<Vec<f32>> = (0..spec.num_landmarks).map(|_| s.unit()).collect();
    let nl_centroids: Vec<Vec<f32>> = (0..spec.nonlandmark_clusters()).map(|_| s.unit()).collect();

    let mut index_ids = Vec::new();
    let mut index_labels = Vec::new();
    let mut index_rows = Vec::new();
    for (j, c) in centroids.iter().enumerate() {
        let noisy = if j < nl_centroids.len() {
            spec.contaminated_per_landmark()
        } else {
            0
        };
        for i in 0..spec.images_per_landmark {
            let row = if i < noisy {
                s.around(&nl_centroids[j])
            } else {
                s.around(c)
            };
            index_ids.push(format!("idx{:07}", index_rows.len()));
            index_labels.push(LandmarkLabel::new(j as i64)?);
            index_rows.push(row);
        }
    }
    let index = build(index_ids, Some(index_labels), index_rows, spec.dim)?;

    let nl_rows: Vec<Vec<f32>> = (0..spec.num_nonlandmark_refs)
        .map(|i| {
            let c = nl_centroids[i % nl_centroids.len()].clone();
            s.around(&c)
        })
        .collect();
    let nl_ids = (0..nl_rows.len()).map(|i| format!("nl{i:07}")).collect();
    let nonlandmark = build(nl_ids, None, nl_rows, spec.dim)?;

    // (row, true label, near distractor)
    let mut queries: Vec<(Vec<f32>, LandmarkLabel, bool)> = Vec::new();
    for (j, c) in centroids.iter().enumerate() {
        for _ in 0..spec.queries_per_landmark {
            queries.push((s.around(c), LandmarkLabel::new(j as i64)?, false));
        }
    }
    let near = spec.near_distractors();
    for d in 0..spec.num_distractor_queries {
        let want_near = d < near;
        let mut placed = None;
        let mut last = 0.0;
        for _ in 0..MAX_ATTEMPTS {
            let row = if want_near {
                let c = nl_centroids[s.rng.random_range(0..nl_centroids.len())].clone();
                s.around(&c)
            } else {
                s.unit()
            };
            last = mean_top_similarity(&row, &nonlandmark);
            if (last > DISTRACTOR_THRESHOLD) == want_near {
                placed = Some(row);
                break;
            }
        }
        let row = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not draw a {} distractor in {MAX_ATTEMPTS} attempts \
                 (last mean top-{DISTRACTOR_TOPK} non-landmark similarity {last:.4}, \
                 threshold {DISTRACTOR_THRESHOLD}); sigma={} dim={} refs={}",
                if want_near { "near" } else { "far" },
                spec.sigma,
                spec.dim,
                spec.num_nonlandmark_refs
            ))
        })?;
        queries.push((row, LandmarkLabel::NON_LANDMARK, want_near));
    }
    queries.shuffle(&mut s.rng);

    let mut ids = Vec::with_capacity(queries.len());
    let mut rows = Vec::with_capacity(queries.len());
    let mut truth = HashMap::new();
    let mut near_ids = Vec::new();
    for (i, (row, label, is_near)) in queries.into_iter().enumerate() {
        let id = format!("q{i:07}");
        if is_near {
            near_ids.push(id.clone());
        }
        truth.insert(id.clone(), label);
        ids.push(id);
        rows.push(row);
    }
    let queries = build(ids, None, rows, spec.dim)?;

    Ok(SynthDataset {
        index,
        queries,
        nonlandmark,
        truth: GroundTruth::new(truth),
        near_distractors: near_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_landmarks: 6,
            images_per_landmark: 8,
            queries_per_landmark: 2,
            num_distractor_queries: 10,
            num_nonlandmark_refs: 30,
            dim: 64,
            sigma: 0.05,
            rho: 0.5,
            seed: 3,
        }
    }

    #[test]
    fn counts_follow_the_spec() {
        let spec = small();
        let d = generate_synthetic(&spec).unwrap();
        assert_eq!(d.index.len(), 48);
        assert_eq!(d.queries.len(), 6 * 2 + 10);
        assert_eq!(d.nonlandmark.len(), 30);
        assert_eq!(d.truth.len(), d.queries.len());
        assert_eq!(d.truth.landmark_queries(), 12);
        assert_eq!(d.near_distractors.len(), 5);
        let labels = d.index.labels().unwrap();
        for j in 0..6 {
            assert_eq!(labels.iter().filter(|l| l.value() == j).count(), 8);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.index, b.index);
        assert_eq!(a.truth, b.truth);
        let c = generate_synthetic(&SynthSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.queries, c.queries);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_synthetic(&SynthSpec { sigma: 0.0, ..small() }).is_err());
        assert!(generate_synthetic(&SynthSpec { rho: 1.5, ..small() }).is_err());
        assert!(generate_synthetic(&SynthSpec { num_landmarks: 0, ..small() }).is_err());
    }

    #[test]
    fn infeasible_rho_reports_generation_error() {
        // with this much noise no sample lands close to its cluster mates
        let spec = SynthSpec {
            sigma: 50.0,
            rho: 1.0,
            dim: 512,
            ..small()
        };
        match generate_synthetic(&spec).err() {
            Some(Error::Generation(msg)) => assert!(msg.contains("near distractor")),
            other => panic!("expected generation error, got {other:?}"),
        }
    }
}
