#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sumlab_core::corpus::PosTag;
use sumlab_core::features::{EmbeddingVariant, FeatureLayout, TokenFeatures};
use sumlab_core::model::{Batch, ModelConfig, SourceInput, TrainingPair};

pub const TF_BINS: usize = 3;
pub const IDF_BINS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    SharedBpe,
    Word,
    FreFitToHidden,
    FreLinearMap,
    FreLvt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SharedBpe,
        Variant::Word,
        Variant::FreFitToHidden,
        Variant::FreLinearMap,
        Variant::FreLvt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SharedBpe => "bpe",
            Variant::Word => "word",
            Variant::FreFitToHidden => "fre-f2h",
            Variant::FreLinearMap => "fre-lm2h",
            Variant::FreLvt => "fre-lvt",
        }
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Variant::FreFitToHidden | Variant::FreLinearMap | Variant::FreLvt)
    }
}

/// A small model of the given variant; FRE layouts use the universal tag set
/// and `TF_BINS`/`IDF_BINS` bins.
pub fn config(variant: Variant, d_model: usize, vocab: usize) -> ModelConfig {
    let features = PosTag::COUNT + TF_BINS + IDF_BINS;
    let embedding = match variant {
        Variant::SharedBpe => EmbeddingVariant::SharedBpe,
        Variant::Word => EmbeddingVariant::SeparateWord,
        Variant::FreFitToHidden => EmbeddingVariant::FreFitToHidden(
            FeatureLayout::fit_to_hidden(d_model, PosTag::COUNT, TF_BINS, IDF_BINS).unwrap(),
        ),
        Variant::FreLinearMap | Variant::FreLvt => EmbeddingVariant::FreLinearMapToHidden(
            FeatureLayout::for_bins(d_model.saturating_sub(features).max(4), TF_BINS, IDF_BINS),
        ),
    };
    let mut c = ModelConfig::desk(embedding, vocab, vocab);
    c.d_model = d_model;
    c.num_heads = 2;
    c.ffn_dim = 2 * d_model;
    c.max_positions = 32;
    c.dropout_rate = 0.0;
    c.lvt_enabled = variant == Variant::FreLvt;
    c.lvt_size = 10.min(vocab);
    c
}

/// Deterministic pseudo-random training pairs over ids `4..vocab`.
pub fn random_pairs(variant: Variant, n: usize, vocab: usize, seed: u64) -> Vec<TrainingPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let src_len = rng.gen_range(2..7);
            let tgt_len = rng.gen_range(1..5);
            let ids: Vec<usize> = (0..src_len).map(|_| rng.gen_range(4..vocab)).collect();
            let target = (0..tgt_len).map(|_| rng.gen_range(4..vocab)).collect();
            let source = if variant.uses_features() {
                let f = (0..src_len)
                    .map(|_| TokenFeatures {
                        pos: rng.gen_range(0..PosTag::COUNT),
                        tf_bin: rng.gen_range(0..TF_BINS),
                        idf_bin: rng.gen_range(0..IDF_BINS),
                    })
                    .collect();
                SourceInput::with_features(ids, f)
            } else {
                SourceInput::ids(ids)
            };
            TrainingPair { source, target }
        })
        .collect()
}

pub fn batch(pairs: &[TrainingPair], config: &ModelConfig) -> Batch {
    Batch::new(pairs, config.max_positions).unwrap()
}

pub mod fixtures;
