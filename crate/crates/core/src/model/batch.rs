use super::{contract, ModelError};
use crate::corpus::PosTag;
use crate::features::TokenFeatures;
use crate::lvt::BatchVocab;
use crate::vocab::{BOS, EOS, PAD};

/// Encoder input for one example: token ids and, for FRE models, per-token features.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceInput {
    pub ids: Vec<usize>,
    pub features: Option<Vec<TokenFeatures>>,
}

impl SourceInput {
    pub fn ids(ids: Vec<usize>) -> Self {
        SourceInput {
            ids,
            features: None,
        }
    }

    pub fn with_features(ids: Vec<usize>, features: Vec<TokenFeatures>) -> Self {
        SourceInput {
            ids,
            features: Some(features),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keeps at most `max_len` leading tokens.
    pub fn truncate(&mut self, max_len: usize) {
        self.ids.truncate(max_len);
        if let Some(f) = &mut self.features {
            f.truncate(max_len);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub source: SourceInput,
    pub target: Vec<usize>,
}

/// Padding placeholder for feature rows; masked out like the PAD token itself.
pub(crate) const PAD_FEATURES: TokenFeatures = TokenFeatures {
    pos: PosTag::X as usize,
    tf_bin: 0,
    idf_bin: 0,
};

/// Padded encoder/decoder sequences.
///
/// `decoder_input` is the target shifted right behind `BOS`; `target` is the
/// target followed by `EOS`. Positions past the end are `PAD`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub source: Vec<Vec<usize>>,
    pub source_features: Option<Vec<Vec<TokenFeatures>>>,
    pub decoder_input: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
}

impl Batch {
    /// Sources are cut to `max_positions` tokens and targets to
    /// `max_positions − 1` so the `EOS` still fits.
    pub fn new(pairs: &[TrainingPair], max_positions: usize) -> Result<Batch, ModelError> {
        if pairs.is_empty() {
            return Err(contract("empty batch"));
        }
        if max_positions < 2 {
            return Err(contract("max_positions must allow at least one target token and EOS"));
        }
        let with_features = pairs[0].source.features.is_some();
        let mut sources = Vec::with_capacity(pairs.len());
        let mut features = Vec::with_capacity(pairs.len());
        let mut dec_in = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let mut src = pair.source.clone();
            if src.is_empty() {
                return Err(contract("empty source sequence"));
            }
            if src.features.is_some() != with_features {
                return Err(contract("either every source in a batch has features or none does"));
            }
            if let Some(f) = &src.features {
                if f.len() != src.ids.len() {
                    return Err(contract("features are not aligned with source tokens"));
                }
            }
            src.truncate(max_positions);
            let tgt = &pair.target[..pair.target.len().min(max_positions - 1)];
            let mut din = vec![BOS];
            din.extend_from_slice(tgt);
            let mut out = tgt.to_vec();
            out.push(EOS);
            sources.push(src.ids);
            if let Some(f) = src.features {
                features.push(f);
            }
            dec_in.push(din);
            targets.push(out);
        }
        let src_len = sources.iter().map(Vec::len).max().unwrap_or(0);
        let tgt_len = targets.iter().map(Vec::len).max().unwrap_or(0);
        for s in &mut sources {
            s.resize(src_len, PAD);
        }
        for f in &mut features {
            f.resize(src_len, PAD_FEATURES);
        }
        for (d, t) in dec_in.iter_mut().zip(&mut targets) {
            d.resize(tgt_len, PAD);
            t.resize(tgt_len, PAD);
        }
        Ok(Batch {
            source: sources,
            source_features: with_features.then_some(features),
            decoder_input: dec_in,
            target: targets,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source_mask(&self, i: usize) -> Vec<bool> {
        self.source[i].iter().map(|&t| t != PAD).collect()
    }

    pub fn target_mask(&self, i: usize) -> Vec<bool> {
        self.target[i].iter().map(|&t| t != PAD).collect()
    }

    pub fn num_target_tokens(&self) -> usize {
        self.target.iter().flatten().filter(|&&t| t != PAD).count()
    }

    /// Copy whose decoder ids outside `bv` become `UNK`.
    pub fn restricted(&self, bv: &BatchVocab) -> Batch {
        Batch {
            decoder_input: self.decoder_input.iter().map(|s| bv.restrict(s)).collect(),
            target: self.target.iter().map(|s| bv.restrict(s)).collect(),
            ..self.clone()
        }
    }
}
