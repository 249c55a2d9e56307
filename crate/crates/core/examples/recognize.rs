//! Recognition by retrieval: nearest neighbors vote for a landmark, optionally
//! fused with classifier probabilities.

use std::collections::HashMap;

use landmark_core::recognition::{predict, ClassifierProbs};
use landmark_core::synth::{generate_synthetic, SynthSpec};
use landmark_core::{FusionParams, SearchParams};

fn main() -> landmark_core::Result<()> {
    let spec = SynthSpec { num_landmarks: 8, queries_per_landmark: 2, num_distractor_queries: 4, dim: 32, ..Default::default() };
    let data = generate_synthetic(&spec)?;
    let fusion = FusionParams::default();
    let preds = predict(&data.queries, &data.index, None, &fusion, 50, &SearchParams::default())?;
    for p in preds.iter().take(6) {
        let truth = data.truth.get(&p.query_id).map(|l| l.value());
        println!("{:<8} predicted {:>3} conf {:.4} truth {:?}", p.query_id, p.landmark.value(), p.confidence, truth);
    }

    // a classifier that doubts the retrieval winner of the first query
    let first = &preds[0];
    let mut probs: ClassifierProbs = HashMap::new();
    probs.insert(first.query_id.clone(), HashMap::from([(first.landmark, 0.2)]));
    let fused = FusionParams { alpha: 1.0, ..fusion };
    let with = predict(&data.queries, &data.index, Some(&probs), &fused, 50, &SearchParams::default())?;
    println!(
        "{} with classifier prob 0.2 on {}: now {} at {:.4}",
        first.query_id,
        first.landmark.value(),
        with[0].landmark.value(),
        with[0].confidence
    );
    Ok(())
}
