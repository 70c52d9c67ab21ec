//! Per-batch decoder vocabularies.
//!
//! During LVT training the decoder softmax runs over a small vocabulary built
//! from the batch: the special tokens, every word in the batch, and the most
//! frequent remaining words up to a fixed size. Only the embedding and output
//! rows of those words are read or updated. Inference uses the full vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::tensor::Matrix;
use crate::vocab::{Vocabulary, NUM_SPECIALS, UNK};

pub const DEFAULT_BATCH_VOCAB_SIZE: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum LvtError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Which batch texts contribute words to the batch vocabulary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchVocabSource {
    /// Source and target tokens. Every target is then guaranteed to be in the batch vocabulary.
    #[default]
    SourceAndTarget,
    /// Source tokens only; targets outside the batch vocabulary train as `UNK`.
    SourceOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchVocab {
    local_to_global: Vec<usize>,
    global_to_local: HashMap<usize, usize>,
    vocab_size: usize,
    batch_tokens: usize,
    dropped_tokens: usize,
}

/// Coverage numbers for logging.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchVocabStats {
    pub size: usize,
    pub batch_tokens: usize,
    pub fill_tokens: usize,
    pub dropped_tokens: usize,
}

/// Builds the batch vocabulary from the union of source and target words.
pub fn build_batch_vocab(
    batch: &[Document],
    full_vocab: &Vocabulary,
    size: usize,
) -> Result<BatchVocab, LvtError> {
    build_batch_vocab_with(batch, full_vocab, size, BatchVocabSource::SourceAndTarget)
}

pub fn build_batch_vocab_with(
    batch: &[Document],
    full_vocab: &Vocabulary,
    size: usize,
    source: BatchVocabSource,
) -> Result<BatchVocab, LvtError> {
    let ids = batch.iter().flat_map(|d| {
        let target: &[String] = match source {
            BatchVocabSource::SourceAndTarget => &d.target_tokens,
            BatchVocabSource::SourceOnly => &[],
        };
        d.source_tokens
            .iter()
            .chain(target)
            .map(|t| full_vocab.id_or_unk(t))
    });
    BatchVocab::from_ids(ids, full_vocab.len(), size)
}

impl BatchVocab {
    /// Builds a batch vocabulary from global ids already present in a batch.
    ///
    /// Global ids must be frequency ordered (as [`Vocabulary`] guarantees), so
    /// "most frequent" is "smallest id".
    pub fn from_ids(
        batch_ids: impl IntoIterator<Item = usize>,
        vocab_size: usize,
        size: usize,
    ) -> Result<BatchVocab, LvtError> {
        if size < NUM_SPECIALS {
            return Err(LvtError::Config(format!(
                "batch vocabulary size {size} cannot hold the {NUM_SPECIALS} special tokens"
            )));
        }
        if vocab_size < NUM_SPECIALS {
            return Err(LvtError::Contract(format!("vocabulary of size {vocab_size} lacks specials")));
        }
        let mut words = BTreeSet::new();
        for id in batch_ids {
            if id >= vocab_size {
                return Err(LvtError::Contract(format!(
                    "token id {id} outside vocabulary of size {vocab_size}"
                )));
            }
            if id >= NUM_SPECIALS {
                words.insert(id);
            }
        }
        let room = size - NUM_SPECIALS;
        let dropped_tokens = words.len().saturating_sub(room);
        let mut local_to_global: Vec<usize> = (0..NUM_SPECIALS).collect();
        local_to_global.extend(words.iter().copied().take(room));
        let batch_tokens = local_to_global.len() - NUM_SPECIALS;
        let mut fill = (NUM_SPECIALS..vocab_size).filter(|id| !words.contains(id));
        while local_to_global.len() < size {
            match fill.next() {
                Some(id) => local_to_global.push(id),
                None => break,
            }
        }
        let global_to_local = local_to_global
            .iter()
            .enumerate()
            .map(|(local, &global)| (global, local))
            .collect();
        Ok(BatchVocab {
            local_to_global,
            global_to_local,
            vocab_size,
            batch_tokens,
            dropped_tokens,
        })
    }

    /// Wraps an explicit local-to-global table. It must be duplicate-free,
    /// start with the specials and stay inside the vocabulary.
    pub fn from_table(local_to_global: Vec<usize>, vocab_size: usize) -> Result<BatchVocab, LvtError> {
        if local_to_global.len() < NUM_SPECIALS || local_to_global[..NUM_SPECIALS] != [0, 1, 2, 3] {
            return Err(LvtError::Contract("table must start with the special ids".into()));
        }
        let mut global_to_local = HashMap::with_capacity(local_to_global.len());
        for (local, &global) in local_to_global.iter().enumerate() {
            if global >= vocab_size || global_to_local.insert(global, local).is_some() {
                return Err(LvtError::Contract(format!("invalid or repeated id {global}")));
            }
        }
        Ok(BatchVocab {
            batch_tokens: local_to_global.len() - NUM_SPECIALS,
            local_to_global,
            global_to_local,
            vocab_size,
            dropped_tokens: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local_to_global.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn local_to_global(&self) -> &[usize] {
        &self.local_to_global
    }

    pub fn local(&self, global: usize) -> Option<usize> {
        self.global_to_local.get(&global).copied()
    }

    pub fn contains(&self, global: usize) -> bool {
        self.global_to_local.contains_key(&global)
    }

    pub fn stats(&self) -> BatchVocabStats {
        BatchVocabStats {
            size: self.len(),
            batch_tokens: self.batch_tokens,
            fill_tokens: self.len() - NUM_SPECIALS - self.batch_tokens,
            dropped_tokens: self.dropped_tokens,
        }
    }

    /// Replaces ids absent from the batch vocabulary by `UNK` (a member by construction).
    pub fn restrict(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter()
            .map(|&id| if self.contains(id) { id } else { UNK })
            .collect()
    }
}

pub fn remap_targets(targets: &[usize], bv: &BatchVocab) -> Result<Vec<usize>, LvtError> {
    targets
        .iter()
        .map(|&id| {
            bv.local(id).ok_or_else(|| {
                LvtError::Contract(format!("target id {id} is not in the batch vocabulary"))
            })
        })
        .collect()
}

fn check_rows(weights: &Matrix, bv: &BatchVocab) -> Result<(), LvtError> {
    if weights.rows() != bv.vocab_size {
        return Err(LvtError::Contract(format!(
            "matrix has {} rows, vocabulary has {}",
            weights.rows(),
            bv.vocab_size
        )));
    }
    Ok(())
}

/// Row `i` of the result is row `local_to_global[i]` of `weights`.
pub fn gather_rows(weights: &Matrix, bv: &BatchVocab) -> Result<Matrix, LvtError> {
    check_rows(weights, bv)?;
    let mut out = Matrix::zeros(bv.len(), weights.cols());
    for (local, &global) in bv.local_to_global.iter().enumerate() {
        out.row_mut(local).copy_from_slice(weights.row(global));
    }
    Ok(out)
}

/// Adds `local_grads[i]` into row `local_to_global[i]` of `sink`; no other row is written.
pub fn scatter_row_gradients(
    sink: &mut Matrix,
    local_grads: &Matrix,
    bv: &BatchVocab,
) -> Result<(), LvtError> {
    check_rows(sink, bv)?;
    if local_grads.shape() != (bv.len(), sink.cols()) {
        return Err(LvtError::Contract(format!(
            "local gradient shape {:?} does not match ({}, {})",
            local_grads.shape(),
            bv.len(),
            sink.cols()
        )));
    }
    for (local, &global) in bv.local_to_global.iter().enumerate() {
        for (s, g) in sink.row_mut(global).iter_mut().zip(local_grads.row(local)) {
            *s += g;
        }
    }
    Ok(())
}

/// Column version of [`gather_rows`] for `1 × |V|` output biases.
pub fn gather_cols(bias: &Matrix, bv: &BatchVocab) -> Result<Matrix, LvtError> {
    if bias.shape() != (1, bv.vocab_size) {
        return Err(LvtError::Contract(format!(
            "bias shape {:?} does not match (1, {})",
            bias.shape(),
            bv.vocab_size
        )));
    }
    Ok(Matrix::row_vector(
        bv.local_to_global.iter().map(|&g| bias.get(0, g)).collect(),
    ))
}

pub fn scatter_col_gradients(
    sink: &mut Matrix,
    local_grads: &Matrix,
    bv: &BatchVocab,
) -> Result<(), LvtError> {
    if sink.shape() != (1, bv.vocab_size) || local_grads.shape() != (1, bv.len()) {
        return Err(LvtError::Contract("bias gradient shape mismatch".into()));
    }
    for (local, &global) in bv.local_to_global.iter().enumerate() {
        sink.data_mut()[global] += local_grads.get(0, local);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{BOS, EOS, PAD};
    use proptest::prelude::*;

    /// Global order a, b, d, c, e at ids 4..9.
    fn vocab() -> Vocabulary {
        let counts = [("a", 9), ("b", 8), ("d", 7), ("c", 6), ("e", 5)];
        Vocabulary::from_counts(counts.iter().map(|(t, c)| (t.to_string(), *c)), 100, 1).unwrap()
    }

    fn batch(texts: &[(&str, &str)]) -> Vec<Document> {
        texts
            .iter()
            .enumerate()
            .map(|(i, (s, t))| Document::new(i.to_string(), s, t))
            .collect()
    }

    fn tokens(bv: &BatchVocab, v: &Vocabulary) -> Vec<String> {
        bv.local_to_global()
            .iter()
            .map(|&g| v.token(g).unwrap().to_string())
            .collect()
    }

    #[test]
    fn batch_words_then_frequent_fill() {
        let v = vocab();
        let bv = build_batch_vocab(&batch(&[("b", "c")]), &v, 8).unwrap();
        assert_eq!(tokens(&bv, &v), ["<pad>", "<unk>", "<s>", "</s>", "b", "c", "a", "d"]);
        let stats = bv.stats();
        assert_eq!((stats.batch_tokens, stats.fill_tokens, stats.dropped_tokens), (2, 2, 0));
        // With room for exactly the batch words there is no fill.
        let bv = build_batch_vocab(&batch(&[("b", "c")]), &v, 6).unwrap();
        assert_eq!(tokens(&bv, &v)[4..], ["b", "c"]);
    }

    #[test]
    fn overflowing_batch_keeps_most_frequent() {
        let v = vocab();
        let bv = build_batch_vocab(&batch(&[("e c d", "b")]), &v, 6).unwrap();
        assert_eq!(tokens(&bv, &v)[4..], ["b", "d"]);
        assert_eq!(bv.stats().dropped_tokens, 2);
    }

    #[test]
    fn saturated_batch_is_a_permutation() {
        let v = vocab();
        let bv = build_batch_vocab(&batch(&[("e d", "c b a")]), &v, v.len()).unwrap();
        let mut ids = bv.local_to_global().to_vec();
        ids.sort();
        assert_eq!(ids, (0..v.len()).collect::<Vec<_>>());
    }

    #[test]
    fn empty_batch_is_pure_fill() {
        let v = vocab();
        let bv = build_batch_vocab(&[], &v, 7).unwrap();
        assert_eq!(tokens(&bv, &v)[4..], ["a", "b", "d"]);
        assert!(matches!(build_batch_vocab(&[], &v, 3), Err(LvtError::Config(_))));
    }

    #[test]
    fn source_only_mode_ignores_targets() {
        let v = vocab();
        let docs = batch(&[("e", "c")]);
        let bv = build_batch_vocab_with(&docs, &v, 5, BatchVocabSource::SourceOnly).unwrap();
        assert_eq!(tokens(&bv, &v)[4..], ["e"]);
        let c = v.id("c").unwrap();
        assert_eq!(bv.restrict(&[c, v.id("e").unwrap()]), [UNK, v.id("e").unwrap()]);
    }

    #[test]
    fn remap_examples() {
        let bv = BatchVocab::from_ids([9, 7], 10, 6).unwrap();
        assert_eq!(bv.local_to_global(), [0, 1, 2, 3, 7, 9]);
        assert_eq!(remap_targets(&[9, 7], &bv).unwrap(), [5, 4]);
        assert!(remap_targets(&[], &bv).unwrap().is_empty());
        assert!(matches!(remap_targets(&[8], &bv), Err(LvtError::Contract(_))));
        let table = BatchVocab::from_table(vec![0, 1, 2, 3, 9, 7], 10).unwrap();
        assert_eq!(remap_targets(&[9, 7], &table).unwrap(), [4, 5]);
        assert!(BatchVocab::from_table(vec![0, 1, 2, 3, 9, 9], 10).is_err());
        let prefix = BatchVocab::from_ids([], 10, 10).unwrap();
        assert_eq!(remap_targets(&[PAD, BOS, EOS, 5, 9], &prefix).unwrap(), [0, 2, 3, 5, 9]);
    }

    #[test]
    fn gather_rows_examples() {
        let w = Matrix::from_vec(6, 2, (0..12).map(f64::from).collect());
        let prefix = BatchVocab::from_ids([], 6, 5).unwrap();
        assert_eq!(gather_rows(&w, &prefix).unwrap(), Matrix::from_vec(5, 2, (0..10).map(f64::from).collect()));
        let bv = BatchVocab::from_ids([5], 6, 5).unwrap();
        assert_eq!(gather_rows(&w, &bv).unwrap().row(4), [10.0, 11.0]);
        assert!(gather_rows(&Matrix::zeros(5, 2), &bv).is_err());
    }

    #[test]
    fn gather_then_scatter_unchanged_rows_is_identity() {
        let w = Matrix::from_vec(8, 3, (0..24).map(|i| f64::from(i) * 0.37).collect());
        let bv = BatchVocab::from_ids([6, 4], 8, 6).unwrap();
        let rows = gather_rows(&w, &bv).unwrap();
        let mut copy = w.clone();
        for (local, &global) in bv.local_to_global().iter().enumerate() {
            copy.row_mut(global).copy_from_slice(rows.row(local));
        }
        assert_eq!(copy, w);
        let mut sink = w.clone();
        scatter_row_gradients(&mut sink, &Matrix::zeros(6, 3), &bv).unwrap();
        assert_eq!(sink, w);
    }

    #[test]
    fn scatter_matches_dense_gradient() {
        // 10-word toy vocabulary, loss = sum_i <g_i, gathered_i>: the dense
        // gradient is g on batch rows and zero elsewhere.
        let bv = BatchVocab::from_ids([8, 5, 9], 10, 7).unwrap();
        let local = Matrix::from_vec(7, 2, (0..14).map(|i| f64::from(i) - 3.5).collect());
        let mut sink = Matrix::zeros(10, 2);
        scatter_row_gradients(&mut sink, &local, &bv).unwrap();
        let mut dense = Matrix::zeros(10, 2);
        for row in 0..10 {
            if let Some(l) = bv.local(row) {
                dense.row_mut(row).copy_from_slice(local.row(l));
            }
        }
        assert_eq!(sink, dense);
        assert!(scatter_row_gradients(&mut sink, &Matrix::zeros(6, 2), &bv).is_err());
    }

    #[test]
    fn column_gather_scatter() {
        let bias = Matrix::row_vector((0..6).map(f64::from).collect());
        let bv = BatchVocab::from_ids([5], 6, 5).unwrap();
        assert_eq!(gather_cols(&bias, &bv).unwrap().data(), [0.0, 1.0, 2.0, 3.0, 5.0]);
        let mut sink = Matrix::zeros(1, 6);
        scatter_col_gradients(&mut sink, &Matrix::filled(1, 5, 1.0), &bv).unwrap();
        assert_eq!(sink.data(), [1.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn batch_vocab_invariants(ids in prop::collection::vec(0usize..50, 0..40), size in 4usize..60) {
            let bv = BatchVocab::from_ids(ids.clone(), 50, size).unwrap();
            prop_assert_eq!(bv.len(), size.min(50));
            prop_assert!((0..NUM_SPECIALS).all(|s| bv.contains(s)));
            for (local, &global) in bv.local_to_global().iter().enumerate() {
                prop_assert_eq!(bv.local(global), Some(local));
            }
            let distinct: BTreeSet<_> = bv.local_to_global().iter().collect();
            prop_assert_eq!(distinct.len(), bv.len());
            prop_assert_eq!(BatchVocab::from_ids(ids.clone(), 50, size).unwrap(), bv.clone());
            let words: BTreeSet<_> = ids.iter().filter(|&&i| i >= NUM_SPECIALS).collect();
            if words.len() + NUM_SPECIALS <= size {
                prop_assert!(words.iter().all(|&&w| bv.contains(w)));
            }
        }

        #[test]
        fn disjoint_vocabs_scatter_into_disjoint_rows(a in prop::collection::btree_set(4usize..30, 0..6),
                                                      b in prop::collection::btree_set(4usize..30, 0..6)) {
            let b: BTreeSet<usize> = b.difference(&a).copied().collect();
            let bva = BatchVocab::from_ids(a.iter().copied(), 30, 4 + a.len()).unwrap();
            let bvb = BatchVocab::from_ids(b.iter().copied(), 30, 4 + b.len()).unwrap();
            let mut sa = Matrix::zeros(30, 1);
            let mut sb = Matrix::zeros(30, 1);
            scatter_row_gradients(&mut sa, &Matrix::filled(bva.len(), 1, 1.0), &bva).unwrap();
            scatter_row_gradients(&mut sb, &Matrix::filled(bvb.len(), 1, 1.0), &bvb).unwrap();
            for row in NUM_SPECIALS..30 {
                prop_assert!(sa.get(row, 0) == 0.0 || sb.get(row, 0) == 0.0);
            }
        }
    }
}
