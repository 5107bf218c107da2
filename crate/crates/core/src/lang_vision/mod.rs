//! Prompt construction, closed-vocabulary tokenization and the toy text and
//! vision encoders.

mod encoder;
mod prompt;
mod vocab;

pub use encoder::{patchify, standardize, Image, TextEncoder, TextFeatures, VisionEncoder, VisualFeatures};
pub use prompt::{build_prompt, pronoun_prompt, Prompt, PromptForm};
pub use vocab::{Pronoun, Tokenized, Vocabulary};

use thiserror::Error;

use crate::nn::AttentionError;
use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LangError {
    #[error("verb phrase is empty")]
    EmptyVerb,
    #[error("categories must be given exactly for verb-noun prompts with targets ({0})")]
    CategoryFormMismatch(String),
    #[error("prompt needs {required} slots but n_max is {n_max}")]
    PromptTooLong { required: usize, n_max: usize },
    #[error("word `{0}` is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("image {height}x{width} is not a multiple of patch {patch}; nearest valid size is {}x{}", nearest.0, nearest.1)]
    BadImageSize {
        height: usize,
        width: usize,
        patch: usize,
        nearest: (usize, usize),
    },
    #[error("vocabulary file: {0}")]
    BadVocabulary(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl From<AttentionError> for LangError {
    fn from(e: AttentionError) -> Self {
        match e {
            AttentionError::Numerics(n) => LangError::Numerics(n),
            // encoders pass `None` for prompts without content
            AttentionError::EmptyKeys => LangError::Numerics(NumericsError::ShapeMismatch {
                node: 0,
                op: "attention",
                detail: "empty key set".into(),
            }),
        }
    }
}
