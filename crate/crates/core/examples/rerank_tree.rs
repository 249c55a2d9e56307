//! Training the boosted-tree re-ranker on retrieval features and applying it.

use landmark_core::pipeline::{correctness_labels, rerank_predictions, train_rerank_on_split};
use landmark_core::metrics::gap_at_1;
use landmark_core::postprocess::{extract_rerank_features, TreeHyper, TreeModel};
use landmark_core::recognition::predict_from_results;
use landmark_core::synth::{generate_synthetic, SynthSpec};
use landmark_core::{top_k_search, FusionParams};

fn main() -> landmark_core::Result<()> {
    let data = generate_synthetic(&SynthSpec { dim: 128, ..Default::default() })?;
    let labels = data.index.labels().unwrap();
    let results = top_k_search(&data.queries, &data.index, 100)?;
    let nl = top_k_search(&data.queries, &data.nonlandmark, 3)?;
    let preds = predict_from_results(data.queries.ids(), &results, Some(labels), None, &FusionParams::default())?;
    let features = extract_rerank_features(&preds, data.queries.ids(), &results, labels, Some(&nl), None)?;

    let correct = correctness_labels(&preds, &data.truth)?;
    println!("{} of {} predictions correct", correct.iter().filter(|&&c| c).count(), preds.len());
    let hyper = TreeHyper { n_trees: 30, ..Default::default() };
    let model = train_rerank_on_split(&features, &preds, &data.truth, 0.5, 3, &hyper)?;
    let reranked = rerank_predictions(&model, &features, &preds)?;
    println!("GAP before {:.4} after {:.4}", gap_at_1(&preds, &data.truth)?, gap_at_1(&reranked, &data.truth)?);

    let json = model.to_json();
    assert_eq!(TreeModel::from_json(&json)?, model);
    println!("model: {} trees, {} bytes of JSON", model.trees.len(), json.len());
    Ok(())
}
