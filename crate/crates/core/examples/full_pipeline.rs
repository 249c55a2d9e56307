//! Whole pipeline from a config: synthetic data on disk, search, predict,
//! both rules, re-rank and the report.

use landmark_core::synth::{generate_synthetic, SynthSpec};
use landmark_core::{run_pipeline, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let files = generate_synthetic(&SynthSpec::default())?.write(dir.path().join("data"))?;
    let text = format!(
        "queries = {}\nindex = {}\nnonlandmark = {}\ntruth = {}\nout_dir = {}\nrerank = true\nseed = 7\n",
        files.queries.display(),
        files.index.display(),
        files.nonlandmark.display(),
        files.truth.display(),
        dir.path().join("out").display(),
    );
    let mut cfg = PipelineConfig::parse_str(&text)?;
    cfg.apply_override("rerank_trees=50")?;
    let report = run_pipeline(&cfg)?;
    print!("{}", report.render());
    print!("{}", report.render_timings());
    Ok(())
}
