//! Fully test-time adaptation for tabular classification streams.
//!
//! A source classifier is adapted online on unlabeled batches by three
//! cooperating parts: [`cdo`] tracks the shifted label prior and adjusts
//! predictions with it, [`lcw`] weights samples by agreement with their
//! neighborhood, and [`dme`] combines several learners by their losses.
//! [`engine`] runs the predict-then-adapt loop over a stream.

pub mod backbone;
pub mod cdo;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dme;
pub mod engine;
pub mod error;
pub mod lcw;
pub mod math;
pub mod metrics;
pub mod report;
pub mod train;

pub use backbone::{MlpModel, OptimizerState, UpdateRule};
pub use cdo::{PriorTracker, TrackerRule, UpdateSign};
pub use checkpoint::Checkpoint;
pub use config::{Config, EngineConfig, Method};
pub use data::{Batch, Dataset, GroundTruth, LabeledBatch, ShiftSpec, Standardizer, SynthSpec, TableSchema};
pub use engine::{run_stream, BatchResult, Engine};
pub use error::{Error, Result};
pub use math::{Matrix, ProbVector, SquareMatrix};
pub use report::MetricRecord;
pub use train::train_source;
