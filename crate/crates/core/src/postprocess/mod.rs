//! Confidence post-processing: distractor rules, then an optional tree
//! re-rank model.

pub mod rerank;
pub mod rules;

pub use rerank::{
    apply_rerank, extract_rerank_features, read_features_csv, train_rerank_tree,
    write_features_csv, RegressionTree, RerankFeatures, TreeHyper, TreeModel, TreeNode,
    FEATURE_NAMES,
};
pub use rules::{
    frequency_suppression, nonlandmark_penalty, nonlandmark_penalty_from_results,
    nonlandmark_statistic, overpredicted_landmarks, NonLandmarkStatistic, PenaltyMode,
    PostprocessParams,
};
pub(crate) use rules::check_alignment;
