//! Feature-rich encoder inputs.
//!
//! An encoder input vector is `word | POS | TF | IDF`: the learned word
//! embedding followed by three constant one-hot spans. In the fit-to-hidden
//! layout the concatenation is already `d_model` wide; in the
//! linear-map-to-hidden layout a bias-free `concat_dim × d_model` matrix maps
//! it to the model width.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PosTag;
use crate::tensor::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
}

fn contract(msg: impl Into<String>) -> FeatureError {
    FeatureError::Contract(msg.into())
}

/// Widths of the sub-vectors of an FRE input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub word_dim: usize,
    pub pos_dim: usize,
    pub tf_dim: usize,
    pub idf_dim: usize,
    pub concat_dim: usize,
}

impl FeatureLayout {
    pub fn new(word_dim: usize, pos_dim: usize, tf_dim: usize, idf_dim: usize) -> Self {
        FeatureLayout {
            word_dim,
            pos_dim,
            tf_dim,
            idf_dim,
            concat_dim: word_dim + pos_dim + tf_dim + idf_dim,
        }
    }

    /// Shrinks the word span so the whole concatenation is exactly `hidden` wide.
    pub fn fit_to_hidden(
        hidden: usize,
        pos_dim: usize,
        tf_dim: usize,
        idf_dim: usize,
    ) -> Result<Self, FeatureError> {
        let features = pos_dim + tf_dim + idf_dim;
        if features >= hidden {
            return Err(FeatureError::Config(format!(
                "one-hot features need {features} dims, leaving no room for word embeddings in d_model={hidden}"
            )));
        }
        Ok(Self::new(hidden - features, pos_dim, tf_dim, idf_dim))
    }

    /// Standard layout for the universal tag set and the given bin counts.
    pub fn for_bins(word_dim: usize, n_tf_bins: usize, n_idf_bins: usize) -> Self {
        Self::new(word_dim, PosTag::COUNT, n_tf_bins, n_idf_bins)
    }

    /// Start offsets of the word, POS, TF and IDF spans.
    pub fn offsets(&self) -> [usize; 4] {
        [
            0,
            self.word_dim,
            self.word_dim + self.pos_dim,
            self.word_dim + self.pos_dim + self.tf_dim,
        ]
    }

    pub fn feature_dim(&self) -> usize {
        self.pos_dim + self.tf_dim + self.idf_dim
    }

    pub fn check(&self, features: &TokenFeatures) -> Result<(), FeatureError> {
        for (name, index, size) in [
            ("POS tag", features.pos, self.pos_dim),
            ("TF bin", features.tf_bin, self.tf_dim),
            ("IDF bin", features.idf_bin, self.idf_dim),
        ] {
            if index >= size {
                return Err(contract(format!("{name} {index} out of range for {size} slots")));
            }
        }
        Ok(())
    }
}

/// Per-token categorical features, as one-hot indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFeatures {
    pub pos: usize,
    pub tf_bin: usize,
    pub idf_bin: usize,
}

impl TokenFeatures {
    pub fn new(pos: PosTag, tf_bin: usize, idf_bin: usize) -> Self {
        TokenFeatures {
            pos: pos.index(),
            tf_bin,
            idf_bin,
        }
    }
}

/// How token ids become encoder and decoder input vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layout")]
pub enum EmbeddingVariant {
    /// One subword table shared by encoder and decoder.
    SharedBpe,
    /// Separate word tables for encoder and decoder.
    SeparateWord,
    /// Word embedding plus one-hots, concatenated to exactly `d_model`.
    FreFitToHidden(FeatureLayout),
    /// Word embedding plus one-hots, mapped to `d_model` by a bias-free matrix.
    FreLinearMapToHidden(FeatureLayout),
}

impl EmbeddingVariant {
    pub fn layout(&self) -> Option<&FeatureLayout> {
        match self {
            EmbeddingVariant::FreFitToHidden(l) | EmbeddingVariant::FreLinearMapToHidden(l) => {
                Some(l)
            }
            _ => None,
        }
    }

    pub fn uses_features(&self) -> bool {
        self.layout().is_some()
    }
}

pub fn one_hot(index: usize, size: usize) -> Result<Vec<f64>, FeatureError> {
    if index >= size {
        return Err(contract(format!("one-hot index {index} out of range for size {size}")));
    }
    let mut v = vec![0.0; size];
    v[index] = 1.0;
    Ok(v)
}

/// The constant `POS | TF | IDF` part of an FRE vector.
pub fn feature_one_hots(
    features: &TokenFeatures,
    layout: &FeatureLayout,
) -> Result<Vec<f64>, FeatureError> {
    layout.check(features)?;
    let mut v = one_hot(features.pos, layout.pos_dim)?;
    v.extend(one_hot(features.tf_bin, layout.tf_dim)?);
    v.extend(one_hot(features.idf_bin, layout.idf_dim)?);
    Ok(v)
}

/// One-hot rows for a whole sequence: `len × layout.feature_dim()`.
pub fn feature_matrix(
    features: &[TokenFeatures],
    layout: &FeatureLayout,
) -> Result<Matrix, FeatureError> {
    let rows = features
        .iter()
        .map(|f| feature_one_hots(f, layout))
        .collect::<Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, layout.feature_dim()));
    }
    Ok(Matrix::from_rows(&rows))
}

pub fn assemble_fre_vector(
    word_emb: &[f64],
    pos_tag: PosTag,
    tf_bin: usize,
    idf_bin: usize,
    layout: &FeatureLayout,
) -> Result<Vec<f64>, FeatureError> {
    if word_emb.len() != layout.word_dim {
        return Err(contract(format!(
            "word embedding has {} dims, layout expects {}",
            word_emb.len(),
            layout.word_dim
        )));
    }
    let mut v = word_emb.to_vec();
    v.extend(feature_one_hots(&TokenFeatures::new(pos_tag, tf_bin, idf_bin), layout)?);
    Ok(v)
}

/// The encoder-side map from concatenation width to model width.
#[derive(Clone, Copy, Debug)]
pub enum HiddenProjection<'a> {
    /// Fit-to-hidden: the concatenation is used as is.
    Identity { hidden: usize },
    /// Linear-map-to-hidden: `concat · map`, with `map` of shape `concat_dim × hidden`.
    Linear(&'a Matrix),
}

pub fn project_to_hidden(
    concat: &[f64],
    projection: HiddenProjection<'_>,
) -> Result<Vec<f64>, FeatureError> {
    match projection {
        HiddenProjection::Identity { hidden } => {
            if concat.len() != hidden {
                return Err(contract(format!(
                    "fit-to-hidden input has {} dims, d_model is {hidden}",
                    concat.len()
                )));
            }
            Ok(concat.to_vec())
        }
        HiddenProjection::Linear(map) => {
            if concat.len() != map.rows() {
                return Err(contract(format!(
                    "projection expects {} inputs, got {}",
                    map.rows(),
                    concat.len()
                )));
            }
            Ok(Matrix::row_vector(concat.to_vec()).matmul(map).into_vec())
        }
    }
}
