//! Searching with two descriptor families at once. Similarities are
//! combined by weight before ranking.

use landmark_core::knn::{fused_search, FeatureSet, FeatureSetBundle};
use landmark_core::synth::{generate_synthetic, SynthSpec};
use landmark_core::{top_k_search, SearchParams};

fn main() -> landmark_core::Result<()> {
    let small = SynthSpec { num_landmarks: 10, num_distractor_queries: 20, num_nonlandmark_refs: 50, dim: 64, ..Default::default() };
    let a = generate_synthetic(&small)?;
    let b = generate_synthetic(&SynthSpec { seed: 99, ..small })?;

    // the second family is indexed on the same ids, only its vectors differ
    let bundle = |x, y, wa, wb| {
        FeatureSetBundle::new(vec![
            FeatureSet { name: "delg".into(), set: x, weight: wa },
            FeatureSet { name: "gem".into(), set: y, weight: wb },
        ])
    };
    for (wa, wb) in [(1.0, 0.0), (1.0, 1.0), (2.0, 1.0)] {
        let q = bundle(a.queries.clone(), b.queries.clone(), wa, wb)?;
        let i = bundle(a.index.clone(), b.index.clone(), wa, wb)?;
        let res = fused_search(&q, &i, 3, &SearchParams::default())?;
        let top: Vec<_> = res[0].iter().map(|(r, s)| format!("{}:{s:.3}", a.index.ids()[r])).collect();
        println!("weights {wa}/{wb}: {} -> {}", a.queries.ids()[0], top.join(" "));
    }
    let single = top_k_search(&a.queries, &a.index, 3)?;
    println!("family a alone:  {:?}", single[0].neighbors);
    Ok(())
}
