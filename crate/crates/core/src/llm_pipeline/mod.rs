//! Task-object table construction with a pluggable completion client:
//! task generation per category, matching with preference ranks,
//! inspection, and dataset assembly.

mod client;
mod pipeline;
mod table;

pub use client::{field, CompletionClient, DecodeParams, MockClient, MockKnowledge, RemoteClient};
pub use pipeline::{
    build_dataset, build_microworld, inspect_pairs, match_pairs, pool_tasks, produce_tasks, quarantine_tsv, render,
    run_pipeline, write_quarantine, InspectionReport, PipelineConfig, PipelineReport, QuarantineEntry,
    INSPECTOR_TEMPLATE, MATCHER_TEMPLATE, PRODUCER_TEMPLATE, TASKS_PER_CATEGORY,
};
pub use table::{Provenance, TableRow, TaskObjectTable};

use thiserror::Error;

use crate::dataforge::DataError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("auth token variable `{0}` is not set")]
    Auth(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: Box<ClientError> },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{stage} output unusable: {reason}")]
    Unparseable {
        stage: &'static str,
        reason: String,
        raw: String,
    },
    #[error("{0}")]
    Input(String),
    #[error("table: {0}")]
    Table(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] DataError),
}
