//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are ignored. Later assignments override
//! earlier ones, so command-line overrides are simply applied last.
//! List-valued keys (`queries`, `index`, `nonlandmark`, `weights`,
//! `feature_names`) take comma-separated values, one per feature set.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::knn::SearchParams;
use crate::postprocess::{NonLandmarkStatistic, PenaltyMode, PostprocessParams, TreeHyper};
use crate::recognition::{AbstentionStyle, FusionParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub queries: Vec<PathBuf>,
    pub index: Vec<PathBuf>,
    pub nonlandmark: Vec<PathBuf>,
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub classifier_probs: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub k_search: usize,
    pub fusion: FusionParams,
    pub post: PostprocessParams,
    pub rule1: bool,
    pub rule2: bool,
    pub rerank: bool,
    pub rerank_hyper: TreeHyper,
    /// Share of queries whose labels train the re-rank model.
    pub rerank_train_fraction: f64,
    pub seed: u64,
    pub search: SearchParams,
    pub abstention_style: AbstentionStyle,
    pub write_neighbors: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            queries: Vec::new(),
            index: Vec::new(),
            nonlandmark: Vec::new(),
            feature_names: Vec::new(),
            weights: Vec::new(),
            classifier_probs: None,
            truth: None,
            out_dir: PathBuf::from("out"),
            k_search: 100,
            fusion: FusionParams::default(),
            post: PostprocessParams::default(),
            rule1: true,
            rule2: true,
            rerank: false,
            rerank_hyper: TreeHyper::default(),
            rerank_train_fraction: 0.5,
            seed: 0,
            search: SearchParams::default(),
            abstention_style: AbstentionStyle::Empty,
            write_neighbors: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Param(format!("invalid value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Param(format!("invalid boolean {value:?} for `{key}`"))),
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl PipelineConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "queries" => self.queries = split_list(value).map(PathBuf::from).collect(),
            "index" => self.index = split_list(value).map(PathBuf::from).collect(),
            "nonlandmark" => self.nonlandmark = split_list(value).map(PathBuf::from).collect(),
            "feature_names" => self.feature_names = split_list(value).map(String::from).collect(),
            "weights" => {
                self.weights = split_list(value)
                    .map(|v| parse(key, v))
                    .collect::<Result<_>>()?
            }
            "classifier_probs" => self.classifier_probs = optional_path(value),
            "truth" => self.truth = optional_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "k_search" => self.k_search = parse(key, value)?,
            "k_agg" => self.fusion.k_agg = parse(key, value)?,
            "alpha" => self.fusion.alpha = parse(key, value)?,
            "tau" => self.post.tau = parse(key, value)?,
            "topk_nl" => self.post.topk_nl = parse(key, value)?,
            "cap" => self.post.cap = parse(key, value)?,
            "penalty_mode" => {
                self.post.penalty_mode = match value {
                    "subtract" => PenaltyMode::Subtract,
                    "zero" => PenaltyMode::Zero,
                    _ => return Err(Error::Param(format!("unknown penalty_mode {value:?}"))),
                }
            }
            "nl_statistic" => {
                self.post.statistic = match value {
                    "mean" => NonLandmarkStatistic::Mean,
                    "max" => NonLandmarkStatistic::Max,
                    _ => return Err(Error::Param(format!("unknown nl_statistic {value:?}"))),
                }
            }
            "rule1" => self.rule1 = parse_bool(key, value)?,
            "rule2" => self.rule2 = parse_bool(key, value)?,
            "rerank" => self.rerank = parse_bool(key, value)?,
            "rerank_trees" => self.rerank_hyper.n_trees = parse(key, value)?,
            "rerank_depth" => self.rerank_hyper.max_depth = parse(key, value)?,
            "rerank_shrinkage" => self.rerank_hyper.shrinkage = parse(key, value)?,
            "rerank_min_leaf" => self.rerank_hyper.min_leaf = parse(key, value)?,
            "rerank_train_fraction" => self.rerank_train_fraction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => {
                self.search.workers = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "query_block" => self.search.query_block = parse(key, value)?,
            "index_tile" => self.search.index_tile = parse(key, value)?,
            "abstention" => {
                self.abstention_style = match value {
                    "empty" => AbstentionStyle::Empty,
                    "minus_one" | "-1" => AbstentionStyle::MinusOne,
                    _ => return Err(Error::Param(format!("unknown abstention style {value:?}"))),
                }
            }
            "write_neighbors" => self.write_neighbors = parse_bool(key, value)?,
            _ => return Err(Error::Param(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Param(format!("override {assignment:?} is not key=value")))?;
        self.set(key, value)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Param(format!("config line {} is not key = value: {line:?}", n + 1))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Checks cross-field constraints and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() || self.queries.len() != self.index.len() {
            return Err(Error::Param(format!(
                "need one index file per query file ({} queries, {} index)",
                self.queries.len(),
                self.index.len()
            )));
        }
        let sets = self.queries.len();
        if !self.nonlandmark.is_empty() && self.nonlandmark.len() != sets {
            return Err(Error::Param(format!(
                "{} non-landmark files for {sets} feature sets",
                self.nonlandmark.len()
            )));
        }
        if !self.weights.is_empty() && self.weights.len() != sets {
            return Err(Error::Param(format!("{} weights for {sets} feature sets", self.weights.len())));
        }
        if !self.feature_names.is_empty() && self.feature_names.len() != sets {
            return Err(Error::Param(format!(
                "{} feature names for {sets} feature sets",
                self.feature_names.len()
            )));
        }
        if self.rule1 && self.nonlandmark.is_empty() {
            return Err(Error::Param("rule1 needs a nonlandmark set".into()));
        }
        if self.rerank && self.truth.is_none() {
            return Err(Error::Param("rerank training needs truth labels".into()));
        }
        if !(0.0 < self.rerank_train_fraction && self.rerank_train_fraction < 1.0) {
            return Err(Error::Param("rerank_train_fraction must lie in (0, 1)".into()));
        }
        self.fusion.validate(self.k_search)?;
        self.post.validate()?;
        let files = self
            .queries
            .iter()
            .chain(&self.index)
            .chain(&self.nonlandmark)
            .chain(&self.classifier_probs)
            .chain(&self.truth);
        for f in files {
            if !f.is_file() {
                return Err(Error::io(
                    f,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file is missing"),
                ));
            }
        }
        Ok(())
    }

    pub fn feature_name(&self, i: usize) -> String {
        self.feature_names
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("f{i}"))
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights.get(i).copied().unwrap_or(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_text_with_comments() {
        let cfg = PipelineConfig::parse_str(
            "# experiment\nqueries = a.lmke, b.lmke\nindex = c.lmke,d.lmke\nweights = 1, 0.5\n\
             k_search = 50  # fewer\npenalty_mode = zero\nworkers = 2\nrule2 = off\n",
        )
        .unwrap();
        assert_eq!(cfg.queries.len(), 2);
        assert_eq!(cfg.weights, vec![1.0, 0.5]);
        assert_eq!(cfg.k_search, 50);
        assert_eq!(cfg.post.penalty_mode, PenaltyMode::Zero);
        assert_eq!(cfg.search.workers, Some(2));
        assert!(!cfg.rule2);
        assert_eq!(cfg.weight(1), 0.5);
        assert_eq!(cfg.feature_name(1), "f1");
    }

    #[test]
    fn overrides_win() {
        let mut cfg = PipelineConfig::parse_str("tau = 0.3\n").unwrap();
        cfg.apply_override("tau=0.45").unwrap();
        assert_eq!(cfg.post.tau, 0.45);
        assert!(cfg.apply_override("nonsense").is_err());
        assert!(cfg.apply_override("bogus_key=1").is_err());
        assert!(cfg.apply_override("k_search=many").is_err());
    }

    #[test]
    fn validation_catches_missing_pieces() {
        let cfg = PipelineConfig::default();
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::parse_str("queries = /nope/q.lmke\nindex = /nope/i.lmke\n").unwrap();
        cfg.rule1 = false;
        assert!(matches!(cfg.validate(), Err(Error::Io { .. })));
        cfg.rule1 = true;
        assert!(matches!(cfg.validate(), Err(Error::Param(_))));
    }
}
