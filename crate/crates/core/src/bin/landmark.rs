use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use landmark_core::config::PipelineConfig;
use landmark_core::knn::write_neighbors_csv;
use landmark_core::metrics::{gap_at_1, gap_trace, write_precision_trace, GroundTruth};
use landmark_core::pipeline::{
    apply_rule1, apply_rule2, index_search, load_normalized, nonlandmark_search, raw_predictions,
    rerank_predictions, run_pipeline, train_rerank_on_split, PipelineInputs,
};
use landmark_core::postprocess::{extract_rerank_features, read_features_csv, write_features_csv, TreeModel};
use landmark_core::recognition::{read_predictions, write_predictions};
use landmark_core::store::save_descriptors;
use landmark_core::synth::{generate_synthetic, SynthSpec};
use landmark_core::verify::{run_checks, CheckParams};
use landmark_core::{Error, Result};

#[derive(Parser)]
#[command(name = "landmark", version, about = "Landmark recognition by retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file, `--set` overrides and the common shortcuts, applied in that
/// order.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Query descriptor files, comma separated, one per feature set.
    #[arg(long)]
    queries: Option<String>,
    #[arg(long)]
    index: Option<String>,
    #[arg(long)]
    nonlandmark: Option<String>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    probs: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        let shortcuts = [
            ("queries", self.queries.clone()),
            ("index", self.index.clone()),
            ("nonlandmark", self.nonlandmark.clone()),
            ("weights", self.weights.clone()),
            ("classifier_probs", self.probs.as_ref().map(|p| p.display().to_string())),
            ("truth", self.truth.as_ref().map(|p| p.display().to_string())),
            ("workers", self.workers.map(|w| w.to_string())),
        ];
        for (key, value) in shortcuts {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        landmarks: usize,
        #[arg(long, default_value_t = 20)]
        images_per_landmark: usize,
        #[arg(long, default_value_t = 5)]
        queries_per_landmark: usize,
        #[arg(long, default_value_t = 200)]
        distractors: usize,
        #[arg(long, default_value_t = 1000)]
        nonlandmark_refs: usize,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 0.3)]
        rho: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// L2-normalize a descriptor file and save it.
    BuildIndex {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Exact top-k search; writes neighbors CSV.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search and predict one landmark per query.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the enabled distractor rules to a predictions file.
    Postprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write re-rank features for the output predictions.
        #[arg(long)]
        features_out: Option<PathBuf>,
    },
    /// Train the re-rank model on the seeded training share of the queries.
    RerankTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace confidences with re-rank model scores.
    RerankApply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file with GAP@1.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Per-rank precision trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the whole pipeline.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Verify GeM gradients and limits and the ArcMargin reductions.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        maps: usize,
    },
}

fn write_stage(cfg: &PipelineConfig, path: &Path, preds: &[landmark_core::Prediction]) -> Result<()> {
    write_predictions(path, preds, cfg.abstention_style)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            landmarks,
            images_per_landmark,
            queries_per_landmark,
            distractors,
            nonlandmark_refs,
            dim,
            sigma,
            rho,
            seed,
        } => {
            let spec = SynthSpec {
                num_landmarks: landmarks,
                images_per_landmark,
                queries_per_landmark,
                num_distractor_queries: distractors,
                num_nonlandmark_refs: nonlandmark_refs,
                dim,
                sigma,
                rho,
                seed,
            };
            let data = generate_synthetic(&spec)?;
            let files = data.write(&out)?;
            println!(
                "wrote {} index, {} queries, {} non-landmark descriptors to {}",
                data.index.len(),
                data.queries.len(),
                data.nonlandmark.len(),
                files.index.parent().unwrap_or(Path::new(".")).display()
            );
        }
        Command::BuildIndex { input, output } => {
            let set = load_normalized(&input)?;
            save_descriptors(&set, &output)?;
            println!("normalized {} descriptors of dim {}", set.len(), set.dim());
        }
        Command::Search { cfg, k, out } => {
            let cfg = cfg.resolve()?;
            let inputs = PipelineInputs::load(&cfg)?;
            let results = index_search(&inputs, k.unwrap_or(cfg.k_search), &cfg.search)?;
            write_neighbors_csv(&out, inputs.queries.ids(), inputs.index.ids(), &results)?;
        }
        Command::Predict { cfg, out } => {
            let cfg = cfg.resolve()?;
            let inputs = PipelineInputs::load(&cfg)?;
            let results = index_search(&inputs, cfg.k_search, &cfg.search)?;
            write_stage(&cfg, &out, &raw_predictions(&inputs, &results, &cfg)?)?;
        }
        Command::Postprocess {
            cfg,
            predictions,
            out,
            features_out,
        } => {
            let cfg = cfg.resolve()?;
            let inputs = PipelineInputs::load(&cfg)?;
            let ids = inputs.queries.ids();
            let mut preds = read_predictions(&predictions)?;
            let nl = nonlandmark_search(&inputs, &cfg.post, &cfg.search)?;
            if cfg.rule1 {
                preds = apply_rule1(&preds, ids, nl.as_deref(), &cfg.post)?;
            }
            if cfg.rule2 {
                preds = apply_rule2(&preds, &cfg.post)?;
            }
            write_stage(&cfg, &out, &preds)?;
            if let Some(path) = features_out {
                let results = index_search(&inputs, cfg.k_search, &cfg.search)?;
                let features = extract_rerank_features(
                    &preds,
                    ids,
                    &results,
                    inputs.index_labels(),
                    nl.as_deref(),
                    inputs.probs.as_ref(),
                )?;
                write_features_csv(path, ids, &features)?;
            }
        }
        Command::RerankTrain {
            cfg,
            features,
            predictions,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let truth_path = cfg
                .truth
                .clone()
                .ok_or_else(|| Error::Param("rerank-train needs --truth".into()))?;
            let truth = GroundTruth::read_csv(truth_path)?;
            let (ids, rows) = read_features_csv(&features)?;
            let preds = read_predictions(&predictions)?;
            check_ids(&ids, &preds)?;
            let model = train_rerank_on_split(
                &rows,
                &preds,
                &truth,
                cfg.rerank_train_fraction,
                cfg.seed,
                &cfg.rerank_hyper,
            )?;
            model.save(&out)?;
            println!("trained {} trees on {} features", model.trees.len(), model.num_features);
        }
        Command::RerankApply {
            model,
            features,
            predictions,
            out,
        } => {
            let model = TreeModel::load(&model)?;
            let (ids, rows) = read_features_csv(&features)?;
            let preds = read_predictions(&predictions)?;
            check_ids(&ids, &preds)?;
            let reranked = rerank_predictions(&model, &rows, &preds)?;
            write_predictions(&out, &reranked, Default::default())?;
        }
        Command::Evaluate {
            predictions,
            truth,
            trace,
        } => {
            let preds = read_predictions(&predictions)?;
            let truth = GroundTruth::read_csv(&truth)?;
            let gap = gap_at_1(&preds, &truth)?;
            if let Some(path) = trace {
                write_precision_trace(path, &gap_trace(&preds, &truth)?)?;
            }
            println!(
                "{}",
                serde_json::json!({
                    "gap_at_1": gap,
                    "predictions": preds.len(),
                    "abstentions": preds.iter().filter(|p| p.is_abstention()).count(),
                    "landmark_queries": truth.landmark_queries(),
                })
            );
        }
        Command::Run { cfg, out_dir } => {
            let mut cfg = cfg.resolve()?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            let report = run_pipeline(&cfg)?;
            print!("{}", report.render());
            println!("{}", report.render_timings());
        }
        Command::CheckGrad { seed, maps } => {
            let params = CheckParams {
                seed,
                maps,
                ..Default::default()
            };
            let outcomes = run_checks(&params)?;
            let mut failed = Vec::new();
            for c in &outcomes {
                println!(
                    "{} {} observed={:e} tolerance={:e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.observed,
                    c.tolerance
                );
                if !c.passed {
                    failed.push(c.name);
                }
            }
            if !failed.is_empty() {
                return Err(Error::Integrity(format!("checks failed: {}", failed.join(","))));
            }
        }
    }
    Ok(())
}

fn check_ids(ids: &[String], preds: &[landmark_core::Prediction]) -> Result<()> {
    if ids.len() != preds.len() || ids.iter().zip(preds).any(|(i, p)| *i != p.query_id) {
        return Err(Error::Integrity("feature rows and predictions are not aligned".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": e.kind(),
                    "stage": e.stage(),
                    "message": e.to_string(),
                })
            );
            ExitCode::FAILURE
        }
    }
}
