//! Recognition-by-retrieval engine for landmark recognition.
//!
//! Global descriptors flow through the crate as [`DescriptorSet`]s: they are
//! normalized and stored ([`store`]), searched exactly ([`knn`]), turned into
//! one landmark prediction per query ([`recognition`]), cleaned of distractors
//! and re-ranked ([`postprocess`]), and scored with GAP@1 and mAP@100
//! ([`metrics`]). [`descriptor_math`] holds the pooling and margin-loss head
//! that produces such descriptors, and [`synth`] plus [`pipeline`] drive the
//! whole chain on synthetic data.

pub mod config;
pub mod descriptor_math;
pub mod error;
pub mod knn;
pub mod metrics;
pub mod postprocess;
pub mod pipeline;
pub mod recognition;
pub mod store;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use knn::{top_k_search, top_k_search_with, SearchParams, SearchResult};
pub use config::PipelineConfig;
pub use pipeline::{run_pipeline, PipelineReport};
pub use recognition::{FusionParams, Prediction};
pub use store::{l2_normalize, load_descriptors, save_descriptors, DescriptorSet, LandmarkLabel};
