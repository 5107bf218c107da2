//! Noun-pronoun distillation: memory bank, prototypes, optimizer and the
//! teacher/student training loops.

mod bank;
mod optim;
mod train;

pub use bank::{kmeans, nearest, select_prototype, KMeans, MemoryBank, KMEANS_MAX_ITER, KMEANS_TOL};
pub use optim::{Adam, AdamConfig};
pub use train::{
    distill, distill_step, extract_noun_feature, predict_student, replace_pronoun, student_forward, train_plain,
    DistillConfig, DistillState, EpochRecord, PromptContext, PromptMode, Sample, StudentForward, TrainConfig,
};

use thiserror::Error;

use crate::detector::ModelError;
use crate::lang_vision::LangError;
use crate::matching::MatchError;
use crate::nn::ParamStore;
use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("k-means needs 1 <= k <= {points} points, got k={k}")]
    BadClusterCount { k: usize, points: usize },
    #[error("no cluster centers to select from")]
    NoCenters,
    #[error("centers of task {0} are stale")]
    StaleCenters(usize),
    #[error("task {0} is not in the memory bank")]
    UnknownTask(usize),
    #[error("feature has dimension {got}, bank expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid memory bank: {0}")]
    BadBank(String),
    #[error("span {start}..{end} reaches past the {content_len} content tokens")]
    SpanAtPad { start: usize, end: usize, content_len: usize },
    #[error("loss diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<ParamStore>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<LangError> for DistillError {
    fn from(e: LangError) -> Self {
        DistillError::Model(e.into())
    }
}
