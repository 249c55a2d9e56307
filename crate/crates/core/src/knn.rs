//! Exact top-k inner-product search over normalized descriptor sets, and
//! similarity-level fusion of several feature sets.
//!
//! Every similarity is the `f64` sum of the exact `f32 × f32` products taken
//! in dimension order, rounded once to `f32`. The blocked kernel vectorizes
//! across index rows rather than across dimensions, so each dot product keeps
//! that sequential order and the output does not depend on block sizes or on
//! the number of workers. Ranking is by similarity descending, then by index
//! row ascending.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::DescriptorSet;

/// Index rows processed together by the kernel.
const PANEL: usize = 8;
/// Queries processed together by the kernel.
const MICRO: usize = 8;

/// Ranked neighbors of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub neighbors: Vec<usize>,
    pub similarities: Vec<f32>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.neighbors.iter().copied().zip(self.similarities.iter().copied())
    }
}

/// Tuning knobs for [`top_k_search_with`]. None of them affect the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchParams {
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
    /// Queries per parallel task.
    pub query_block: usize,
    /// Index rows packed per tile, widened to `f64`.
    pub index_tile: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        // 128 rows x 512 dims x 8 bytes = 512 KiB per packed tile
        SearchParams {
            workers: None,
            query_block: 64,
            index_tile: 128,
        }
    }
}

/// Similarity used throughout the engine: sequential `f64` dot product
/// rounded to `f32`.
pub fn inner_product(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += f64::from(x) * f64::from(y);
    }
    acc as f32
}

/// `true` when `(sa, ia)` ranks strictly ahead of `(sb, ib)`.
#[inline]
fn ranks_before(sa: f32, ia: usize, sb: f32, ib: usize) -> bool {
    sa > sb || (sa == sb && ia < ib)
}

/// Heap entry ordered so that the worst-ranked candidate sits on top.
#[derive(Clone, Copy)]
struct Candidate {
    sim: f32,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .sim
            .total_cmp(&self.sim)
            .then(self.row.cmp(&other.row))
    }
}

/// Bounded selection of the `k` best `(similarity, row)` pairs.
struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn push(&mut self, sim: f32, row: usize) {
        if self.heap.len() < self.k {
            self.heap.push(Candidate { sim, row });
            return;
        }
        let mut worst = self.heap.peek_mut().expect("k >= 1");
        if ranks_before(sim, row, worst.sim, worst.row) {
            *worst = Candidate { sim, row };
        }
    }

    /// Current admission bar; rows scoring strictly below it cannot enter.
    #[inline]
    fn floor(&self) -> f32 {
        if self.heap.len() < self.k {
            f32::NEG_INFINITY
        } else {
            self.heap.peek().map_or(f32::NEG_INFINITY, |c| c.sim)
        }
    }

    fn into_result(self) -> SearchResult {
        let mut items = self.heap.into_vec();
        items.sort_unstable();
        SearchResult {
            neighbors: items.iter().map(|c| c.row).collect(),
            similarities: items.iter().map(|c| c.sim).collect(),
        }
    }
}

/// Packs up to `PANEL` consecutive rows into dimension-major order:
/// `out[t * PANEL + j] = rows[j][t]`, zero-padded past the last row.
/// Widening to `f64` is exact.
fn pack_panel(set: &DescriptorSet, start: usize, out: &mut [f64]) {
    out.fill(0.0);
    for j in 0..PANEL.min(set.len() - start) {
        for (t, &v) in set.row(start + j).iter().enumerate() {
            out[t * PANEL + j] = f64::from(v);
        }
    }
}

/// `acc[r][j] = Σ_t q[t][r] · x[t][j]`, each sum taken in order of `t`.
#[inline(always)]
fn panel_kernel(queries: &[f64], panel: &[f64], dim: usize) -> [[f64; PANEL]; MICRO] {
    let mut acc = [[0.0f64; PANEL]; MICRO];
    for t in 0..dim {
        let q: &[f64; MICRO] = queries[t * MICRO..(t + 1) * MICRO].try_into().unwrap();
        let xd: &[f64; PANEL] = panel[t * PANEL..(t + 1) * PANEL].try_into().unwrap();
        for r in 0..MICRO {
            let qv = q[r];
            for j in 0..PANEL {
                // an f32 x f32 product is exact in f64, so fusing the
                // multiply into the add does not change the rounded sum
                acc[r][j] = qv.mul_add(xd[j], acc[r][j]);
            }
        }
    }
    acc
}

fn search_block(
    queries: &DescriptorSet,
    first: usize,
    count: usize,
    index: &DescriptorSet,
    k: usize,
    tile_rows: usize,
) -> Vec<SearchResult> {
    let dim = queries.dim();
    let micro_blocks = count.div_ceil(MICRO);

    // queries in dimension-major micro-panels, zero-padded
    let mut qpack = vec![0.0f64; micro_blocks * MICRO * dim];
    for m in 0..micro_blocks {
        let dst = &mut qpack[m * MICRO * dim..(m + 1) * MICRO * dim];
        for r in 0..MICRO.min(count - m * MICRO) {
            for (t, &v) in queries.row(first + m * MICRO + r).iter().enumerate() {
                dst[t * MICRO + r] = f64::from(v);
            }
        }
    }

    let mut tops: Vec<TopK> = (0..count).map(|_| TopK::new(k)).collect();
    let panels_per_tile = tile_rows / PANEL;
    let mut tile = vec![0.0f64; panels_per_tile * PANEL * dim];
    let n_index = index.len();

    let mut tile_start = 0;
    while tile_start < n_index {
        let rows = tile_rows.min(n_index - tile_start);
        let panels = rows.div_ceil(PANEL);
        for p in 0..panels {
            pack_panel(
                index,
                tile_start + p * PANEL,
                &mut tile[p * PANEL * dim..(p + 1) * PANEL * dim],
            );
        }
        for m in 0..micro_blocks {
            let qp = &qpack[m * MICRO * dim..(m + 1) * MICRO * dim];
            let live = MICRO.min(count - m * MICRO);
            for p in 0..panels {
                let acc = panel_kernel(qp, &tile[p * PANEL * dim..(p + 1) * PANEL * dim], dim);
                let base = tile_start + p * PANEL;
                let valid = PANEL.min(n_index - base);
                for (r, row_acc) in acc.iter().enumerate().take(live) {
                    let top = &mut tops[m * MICRO + r];
                    let floor = top.floor();
                    for (j, &s) in row_acc.iter().enumerate().take(valid) {
                        let s = s as f32;
                        if s >= floor {
                            top.push(s, base + j);
                        }
                    }
                }
            }
        }
        tile_start += rows;
    }
    tops.into_iter().map(TopK::into_result).collect()
}

/// Exact top-`k` search with default tuning.
pub fn top_k_search(
    queries: &DescriptorSet,
    index: &DescriptorSet,
    k: usize,
) -> Result<Vec<SearchResult>> {
    top_k_search_with(queries, index, k, &SearchParams::default())
}

/// Exact top-`k` search of every query row against every index row.
pub fn top_k_search_with(
    queries: &DescriptorSet,
    index: &DescriptorSet,
    k: usize,
    params: &SearchParams,
) -> Result<Vec<SearchResult>> {
    queries.require_normalized("query")?;
    index.require_normalized("index")?;
    if queries.dim() != index.dim() {
        return Err(Error::Param(format!(
            "query dim {} differs from index dim {}",
            queries.dim(),
            index.dim()
        )));
    }
    if k == 0 || k > index.len() {
        return Err(Error::Param(format!(
            "k={k} must lie in [1, {}]",
            index.len()
        )));
    }
    let query_block = params.query_block.max(1).next_multiple_of(MICRO);
    let tile_rows = params.index_tile.max(1).next_multiple_of(PANEL);
    let n = queries.len();

    let run = || {
        let blocks: Vec<usize> = (0..n).step_by(query_block).collect();
        blocks
            .par_iter()
            .map(|&first| {
                search_block(queries, first, query_block.min(n - first), index, k, tile_rows)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect::<Vec<_>>()
    };

    match params.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Param(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(run))
        }
        None => Ok(run()),
    }
}

/// A named descriptor set taking part in a multi-feature ensemble.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub name: String,
    pub set: DescriptorSet,
    pub weight: f64,
}

/// Several descriptor sets describing the same images (same ids, same order),
/// e.g. different backbones, input sizes or test-time augmentations.
#[derive(Debug, Clone)]
pub struct FeatureSetBundle {
    members: Vec<FeatureSet>,
}

impl FeatureSetBundle {
    pub fn new(members: Vec<FeatureSet>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Param("feature set bundle is empty".into()))?;
        for m in &members[1..] {
            if m.set.ids() != first.set.ids() {
                return Err(Error::Integrity(format!(
                    "feature set `{}` ids differ from `{}`",
                    m.name, first.name
                )));
            }
        }
        let weights: Vec<f64> = members.iter().map(|m| m.weight).collect();
        check_weights(&weights)?;
        Ok(FeatureSetBundle { members })
    }

    /// Bundle of one set with weight 1.
    pub fn single(set: DescriptorSet) -> Self {
        FeatureSetBundle {
            members: vec![FeatureSet {
                name: "default".into(),
                set,
                weight: 1.0,
            }],
        }
    }

    pub fn members(&self) -> &[FeatureSet] {
        &self.members
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }

    /// The first member; all members share its ids and labels layout.
    pub fn primary(&self) -> &DescriptorSet {
        &self.members[0].set
    }

    pub fn ids(&self) -> &[String] {
        self.primary().ids()
    }

    pub fn len(&self) -> usize {
        self.primary().len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary().is_empty()
    }
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Param("feature set weights must be finite and non-negative".into()));
    }
    if !weights.iter().any(|w| *w > 0.0) {
        return Err(Error::Param("at least one feature set weight must be positive".into()));
    }
    Ok(())
}

/// Weighted mean of per-feature-set similarities for the same
/// `(query, index)` pairs: `Σ_f w_f·s_f / Σ_f w_f`, computed in `f64`.
pub fn fuse_similarities(per_set: &[Vec<f32>], weights: &[f64]) -> Result<Vec<f32>> {
    if per_set.len() != weights.len() || per_set.is_empty() {
        return Err(Error::Param(format!(
            "{} similarity lists for {} weights",
            per_set.len(),
            weights.len()
        )));
    }
    check_weights(weights)?;
    let pairs = per_set[0].len();
    if per_set.iter().any(|s| s.len() != pairs) {
        return Err(Error::Integrity(
            "feature sets do not score the same pairs".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    Ok((0..pairs)
        .map(|i| {
            let num: f64 = per_set
                .iter()
                .zip(weights)
                .map(|(s, &w)| w * f64::from(s[i]))
                .sum();
            (num / total) as f32
        })
        .collect())
}

/// Searches each feature set separately, pools the candidates of every set,
/// rescores the pool with the fused similarity and keeps the best `k`.
///
/// Weights come from the query bundle; the index bundle must list the same
/// feature sets in the same order.
pub fn fused_search(
    queries: &FeatureSetBundle,
    index: &FeatureSetBundle,
    k: usize,
    params: &SearchParams,
) -> Result<Vec<SearchResult>> {
    if queries.members.len() != index.members.len()
        || queries
            .members
            .iter()
            .zip(&index.members)
            .any(|(q, i)| q.name != i.name)
    {
        return Err(Error::Integrity(
            "query and index bundles hold different feature sets".into(),
        ));
    }
    if queries.members.len() == 1 {
        return top_k_search_with(&queries.members[0].set, &index.members[0].set, k, params);
    }

    let weights = queries.weights();
    let per_set = queries
        .members
        .iter()
        .zip(&index.members)
        .map(|(q, i)| top_k_search_with(&q.set, &i.set, k, params))
        .collect::<Result<Vec<_>>>()?;

    let fused = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let pool: BTreeSet<usize> = per_set
                .iter()
                .flat_map(|r| r[qi].neighbors.iter().copied())
                .collect();
            let rows: Vec<usize> = pool.into_iter().collect();
            let sims: Vec<Vec<f32>> = queries
                .members
                .iter()
                .zip(&index.members)
                .map(|(q, i)| {
                    let qrow = q.set.row(qi);
                    rows.iter().map(|&r| inner_product(qrow, i.set.row(r))).collect()
                })
                .collect();
            let fused = fuse_similarities(&sims, &weights)?;
            let mut ranked: Vec<(f32, usize)> = fused.into_iter().zip(rows).collect();
            ranked.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            ranked.truncate(k);
            Ok(SearchResult {
                neighbors: ranked.iter().map(|r| r.1).collect(),
                similarities: ranked.iter().map(|r| r.0).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fused)
}

/// Writes `query_id,rank,index_id,similarity` rows, ranks starting at 1.
pub fn write_neighbors_csv(
    path: impl AsRef<Path>,
    query_ids: &[String],
    index_ids: &[String],
    results: &[SearchResult],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "query_id,rank,index_id,similarity").unwrap();
    for (qid, res) in query_ids.iter().zip(results) {
        for (rank, (row, sim)) in res.iter().enumerate() {
            writeln!(out, "{qid},{},{},{sim:.6}", rank + 1, index_ids[row]).unwrap();
        }
    }
    crate::store::write_atomic(path, &out)
}
