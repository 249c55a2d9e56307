//! GAP@1 and mAP@100 on hand-built predictions and rankings.

use std::collections::{HashMap, HashSet};

use landmark_core::metrics::{gap_at_1, gap_trace, map_at_100, GroundTruth};
use landmark_core::{LandmarkLabel, Prediction};

fn main() -> landmark_core::Result<()> {
    let l = |v| LandmarkLabel::new(v).unwrap();
    let truth = GroundTruth::new(HashMap::from([
        ("a".to_string(), l(1)),
        ("b".to_string(), l(2)),
        ("c".to_string(), l(-1)),
        ("d".to_string(), l(3)),
    ]));
    let pred = |q: &str, lm, c| Prediction { query_id: q.into(), landmark: l(lm), confidence: c };
    let preds = vec![pred("c", 7, 0.95), pred("a", 1, 0.9), pred("b", 5, 0.6), pred("d", 3, 0.4)];
    for p in gap_trace(&preds, &truth)? {
        println!("{p:?}");
    }
    println!("GAP@1 {:.4}", gap_at_1(&preds, &truth)?);

    let ranked = vec![vec!["x1", "n", "x2"], vec!["n", "n2", "y1"]];
    let relevant: Vec<HashSet<&str>> = vec![["x1", "x2"].into(), ["y1"].into()];
    println!("mAP@100 {:.4}", map_at_100(&ranked, &relevant)?);
    Ok(())
}
