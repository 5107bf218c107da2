//! Affordance dataset model, detection-database ingestion, stratified
//! sampling and the synthetic shape world used for desk-scale training.

mod augment;
mod coco;
mod compose;
mod dataset;
mod imageio;
mod microworld;
mod rle;

pub use augment::{augment, AugmentConfig};
pub use coco::{load_detection_db, parse_detection_db, DetectionDb, DetAnnotation, DetCategory, DetImage};
pub use compose::{
    classify, compose_affordance_dataset, stratum_counts, ComposeConfig, Composition, PoolImage, PoolInstance,
    SplitEntry, StratumReport, TaskRanks, TaskSplit, DEFAULT_FRACTIONS, STRATA,
};
pub use dataset::{
    mask_bbox, AffordanceDataset, AnnotationRecord, CategoryRecord, CompositionSection, ImageRecord, RankEntry,
    Split, TaskRecord, FORMAT, FORMAT_VERSION,
};
pub use imageio::{read_png, write_png};
pub use microworld::{
    assemble, gen_microworld, parse_rank_table, render_scene, Placed, Scene, ShapeKind, ShapeSpec, MicroWorld,
    MicroWorldSpec, RankRow, DEFAULT_RANK_TABLE,
};
pub use rle::Rle;

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("annotation record {index}: unknown category id {category}")]
    UnknownCategory { index: usize, category: u64 },
    #[error("{0}")]
    Invalid(String),
    #[error("image codec: {0}")]
    Codec(String),
    #[error("micro-world spec: {0}")]
    Spec(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}
