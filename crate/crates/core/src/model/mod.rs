//! Encoder-decoder Transformer with pluggable input embeddings.
//!
//! The network is a pre-norm Transformer: every sub-layer reads a
//! layer-normalized copy of its input and adds its (dropped-out) output back
//! onto the residual stream; each stack ends in a final layer norm. Gradients
//! are exact, computed by the tape in [`crate::autodiff`].

mod batch;
pub mod checkpoint;
mod decode;
pub mod gradcheck;
mod params;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, ParamStore};
use crate::features::{EmbeddingVariant, FeatureError};
use crate::lvt::{BatchVocabSource, LvtError, DEFAULT_BATCH_VOCAB_SIZE};
use crate::tensor::Matrix;
use crate::vocab::NUM_SPECIALS;

pub use batch::{Batch, SourceInput, TrainingPair};
pub use decode::{decode, DecodeStrategy, Hypothesis};
pub use params::{parameter_shapes, ParamIds};
pub use train::{learning_rate, AdamMoments, OptimizerConfig, StepReport};
pub use transformer::{
    cross_entropy_loss, positional_encoding, scaled_dot_attention, Mode, OutputVocab,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Lvt(#[from] LvtError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> ModelError {
    ModelError::Contract(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub max_positions: usize,
    pub embedding: EmbeddingVariant,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub tie_output_to_embedding: bool,
    pub lvt_enabled: bool,
    pub lvt_size: usize,
    pub lvt_source: BatchVocabSource,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 64 wide, 2 layers, 4 heads, 256-wide FFN.
    pub fn desk(embedding: EmbeddingVariant, source_vocab_size: usize, target_vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            dropout_rate: 0.1,
            max_positions: 256,
            embedding,
            source_vocab_size,
            target_vocab_size,
            tie_output_to_embedding: false,
            lvt_enabled: false,
            lvt_size: DEFAULT_BATCH_VOCAB_SIZE,
            lvt_source: BatchVocabSource::SourceAndTarget,
            label_smoothing: 0.0,
            seed: 1,
        }
    }

    /// Transformer "base" dimensions: 512 wide, 6 layers, 8 heads, 2048-wide FFN.
    pub fn base(embedding: EmbeddingVariant, source_vocab_size: usize, target_vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 512,
            num_layers: 6,
            num_heads: 8,
            ffn_dim: 2048,
            ..Self::desk(embedding, source_vocab_size, target_vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return err(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
            return err("num_layers, ffn_dim and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.source_vocab_size < NUM_SPECIALS || self.target_vocab_size < NUM_SPECIALS {
            return err("vocabularies must hold at least the special tokens".into());
        }
        match &self.embedding {
            EmbeddingVariant::SharedBpe => {
                if self.source_vocab_size != self.target_vocab_size {
                    return err("a shared embedding needs one vocabulary for both sides".into());
                }
                if self.lvt_enabled {
                    return err("batch vocabularies need a separate decoder embedding".into());
                }
            }
            EmbeddingVariant::SeparateWord => {}
            EmbeddingVariant::FreFitToHidden(layout) => {
                if layout.concat_dim != self.d_model {
                    return err(format!(
                        "fit-to-hidden layout is {} wide but d_model is {}",
                        layout.concat_dim, self.d_model
                    ));
                }
            }
            EmbeddingVariant::FreLinearMapToHidden(layout) => {
                if layout.word_dim == 0 {
                    return err("linear-map layout needs a word embedding span".into());
                }
            }
        }
        if let Some(layout) = self.embedding.layout() {
            let expected = layout.word_dim + layout.pos_dim + layout.tf_dim + layout.idf_dim;
            if layout.concat_dim != expected || layout.word_dim == 0 {
                return err("inconsistent feature layout".into());
            }
        }
        if self.lvt_enabled && self.source_vocab_size != self.target_vocab_size {
            return err("batch vocabularies need one word vocabulary for both sides".into());
        }
        if self.lvt_enabled && self.lvt_size < NUM_SPECIALS {
            return err(format!("lvt_size {} cannot hold the special tokens", self.lvt_size));
        }
        Ok(())
    }
}

/// Parameters, Adam moments and the step counter of a model.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
    moments: AdamMoments,
    step: u64,
}

impl ModelState {
    /// Fresh, seeded initialization.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = params::init_params(&config);
        Self::from_parts(config, params, None, 0)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        moments: Option<AdamMoments>,
        step: u64,
    ) -> Result<Self, ModelError> {
        let ids = ParamIds::resolve(&config, &params)?;
        let moments = moments.unwrap_or_else(|| AdamMoments::zeros_like(&params));
        Ok(ModelState {
            config,
            params,
            ids,
            moments,
            step,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access to one parameter tensor by name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.by_name_mut(name)
    }

    pub fn moments(&self) -> &AdamMoments {
        &self.moments
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.names().to_vec()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|(_, _, m)| m.is_finite())
    }

    pub(crate) fn ids(&self) -> &ParamIds {
        &self.ids
    }

    /// Number of target-side classes scored by the output layer.
    pub fn target_vocab_size(&self) -> usize {
        self.config.target_vocab_size
    }

    /// Gradients of the batch loss scaled by `loss_scale`. Dropout is drawn
    /// from `rng` in train mode; eval mode is deterministic.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
        mode: Mode,
        vocab: OutputVocab<'_>,
        rng: Option<&mut rand_chacha::ChaCha8Rng>,
        loss_scale: f64,
    ) -> Result<(f64, Gradients), ModelError> {
        transformer::loss_and_gradients(self, batch, mode, vocab, rng, loss_scale)
    }
}
