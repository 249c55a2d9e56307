//! Distractor suppression on synthetic data: the non-landmark penalty and
//! the per-landmark frequency cap, scored with GAP.

use landmark_core::metrics::gap_at_1;
use landmark_core::postprocess::{frequency_suppression, nonlandmark_penalty, overpredicted_landmarks, PostprocessParams};
use landmark_core::recognition::predict;
use landmark_core::synth::{generate_synthetic, SynthSpec};
use landmark_core::{FusionParams, SearchParams};

fn main() -> landmark_core::Result<()> {
    let data = generate_synthetic(&SynthSpec::default())?;
    let search = SearchParams::default();
    let post = PostprocessParams::default();
    let raw = predict(&data.queries, &data.index, None, &FusionParams::default(), 100, &search)?;
    let penalized = nonlandmark_penalty(&raw, &data.queries, &data.nonlandmark, &post, &search)?;
    let capped = frequency_suppression(&penalized, post.cap);

    let lowered = raw.iter().zip(&penalized).filter(|(a, b)| b.confidence < a.confidence).count();
    println!("non-landmark penalty lowered {lowered} of {} confidences", raw.len());
    println!("landmarks over the cap of {}: {:?}", post.cap, overpredicted_landmarks(&penalized, post.cap));
    for (name, p) in [("raw", &raw), ("penalty", &penalized), ("penalty+cap", &capped)] {
        println!("{name:<12} GAP {:.4}", gap_at_1(p, &data.truth)?);
    }
    Ok(())
}
