//! End-to-end experiment stages driven by one [`ExperimentConfig`]:
//! preprocess, build vocabularies, train, evaluate and summarize.

mod artifacts;
mod commands;
mod config;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::model::ModelError;
use crate::vocab::VocabError;

pub use artifacts::{fingerprint, Artifacts, Encoder, Tokenizer};
pub use commands::{
    build_vocab, evaluate, preprocess, summarize, train, EvaluationOutcome, PreprocessReport,
    TrainOptions, TrainSummary, VocabReport,
};
pub use config::{
    apply_override, CorpusConfig, DataConfig, DecodingConfig, ExperimentConfig, ModelSection,
    StrategyName, TagSource, TrainingConfig, Variant, VocabConfig,
};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const WORD_VOCAB_FILE: &str = "vocab.txt";
pub const BPE_MERGES_FILE: &str = "bpe_merges.txt";
pub const BPE_VOCAB_FILE: &str = "bpe_vocab.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";

/// Failures grouped by process exit code.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training failed: {0}")]
    Training(String),
}

impl PipelineError {
    /// 1 for usage and configuration problems, 2 for bad data, 3 for a failed run.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Training(_) => 3,
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(_) | CorpusError::Version(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<VocabError> for PipelineError {
    fn from(e: VocabError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFiniteLoss { .. } | ModelError::NonFiniteGradient { .. } => {
                PipelineError::Training(e.to_string())
            }
            ModelError::Config(_) | ModelError::Checkpoint(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}
