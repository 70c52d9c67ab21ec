use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, TagSource, Variant};
use super::{
    PipelineError, BPE_MERGES_FILE, BPE_VOCAB_FILE, CHECKPOINT_FILE, STATS_FILE, TRAIN_FILE,
    TRAIN_LOG_FILE, VALID_FILE, WORD_VOCAB_FILE,
};
use crate::corpus::{annotate_document, read_corpus, CorpusStats, Document, LexiconTagger};
use crate::features::TokenFeatures;
use crate::model::{SourceInput, TrainingPair};
use crate::vocab::{BpeModel, Vocabulary};

/// FNV-1a over the token list, as 16 hex digits.
pub fn fingerprint(tokens: &[String]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.bytes().chain([0u8]) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Token ↔ id mapping of one variant.
#[derive(Clone, Debug)]
pub enum Tokenizer {
    Word(Vocabulary),
    Bpe(BpeModel),
}

impl Tokenizer {
    pub fn len(&self) -> usize {
        self.vocab().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Tokenizer::Word(v) => v,
            Tokenizer::Bpe(b) => b.vocab(),
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        match self {
            Tokenizer::Word(v) => v.encode(tokens),
            Tokenizer::Bpe(b) => b.encode(tokens),
        }
    }

    /// Ids back to words; BPE pieces are joined at word boundaries.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>, PipelineError> {
        Ok(match self {
            Tokenizer::Word(v) => v.decode(ids)?,
            Tokenizer::Bpe(b) => b.decode(ids)?,
        })
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self.vocab().tokens())
    }
}

/// Locations of every artifact under a work directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub work_dir: PathBuf,
}

impl Artifacts {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        Artifacts {
            work_dir: work_dir.into(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    pub fn train(&self) -> PathBuf {
        self.path(TRAIN_FILE)
    }

    pub fn valid(&self) -> PathBuf {
        self.path(VALID_FILE)
    }

    pub fn stats(&self) -> PathBuf {
        self.path(STATS_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path(CHECKPOINT_FILE)
    }

    pub fn train_log(&self) -> PathBuf {
        self.path(TRAIN_LOG_FILE)
    }

    /// Fails with a configuration error naming the stage that produces `path`.
    pub fn require(&self, path: &Path, stage: &str) -> Result<(), PipelineError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(PipelineError::Config(format!(
                "missing {}; run `{stage}` first",
                path.display()
            )))
        }
    }

    pub fn read_split(&self, path: &Path) -> Result<Vec<Document>, PipelineError> {
        self.require(path, "preprocess")?;
        Ok(read_corpus(path)?)
    }

    pub fn tokenizer(&self, variant: Variant) -> Result<Tokenizer, PipelineError> {
        if variant.uses_bpe() {
            let (merges, vocab) = (self.path(BPE_MERGES_FILE), self.path(BPE_VOCAB_FILE));
            self.require(&merges, "build-vocab")?;
            self.require(&vocab, "build-vocab")?;
            Ok(Tokenizer::Bpe(BpeModel::load(merges, vocab)?))
        } else {
            let vocab = self.path(WORD_VOCAB_FILE);
            self.require(&vocab, "build-vocab")?;
            Ok(Tokenizer::Word(Vocabulary::load(vocab)?))
        }
    }

    /// The encoder for `config`'s variant, with corpus statistics when it needs features.
    pub fn encoder(&self, config: &ExperimentConfig) -> Result<Encoder, PipelineError> {
        let variant = config.model.variant;
        let tokenizer = self.tokenizer(variant)?;
        let stats = if variant.uses_features() {
            let path = self.stats();
            self.require(&path, "preprocess")?;
            let stats = CorpusStats::load(&path)?;
            if stats.n_tf_bins != config.corpus.tf_bins || stats.n_idf_bins != config.corpus.idf_bins {
                return Err(PipelineError::Config(format!(
                    "{} was computed with {}/{} TF/IDF bins but the config asks for {}/{}",
                    path.display(),
                    stats.n_tf_bins,
                    stats.n_idf_bins,
                    config.corpus.tf_bins,
                    config.corpus.idf_bins
                )));
            }
            Some(stats)
        } else {
            None
        };
        Ok(Encoder {
            variant,
            tokenizer,
            stats,
            tagger: LexiconTagger::english(),
            tag_source: config.corpus.tag_source,
        })
    }
}

/// Turns documents into model inputs for one variant.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub variant: Variant,
    pub tokenizer: Tokenizer,
    pub stats: Option<CorpusStats>,
    pub tagger: LexiconTagger,
    pub tag_source: TagSource,
}

impl Encoder {
    /// Adds POS tags and TF/IDF bins when the variant uses them.
    pub fn annotate(&self, doc: &mut Document) {
        if let Some(stats) = &self.stats {
            if self.tag_source == TagSource::Lexicon {
                doc.pos_tags.clear();
            }
            annotate_document(doc, stats, &self.tagger);
        }
    }

    pub fn source_input(&self, doc: &Document) -> Result<SourceInput, PipelineError> {
        let ids = self.tokenizer.encode(&doc.source_tokens);
        if !self.variant.uses_features() {
            return Ok(SourceInput::ids(ids));
        }
        if !doc.is_annotated() {
            return Err(PipelineError::Data(format!("document {} lacks annotations", doc.id)));
        }
        let features = doc
            .pos_tags
            .iter()
            .zip(&doc.tf_bins)
            .zip(&doc.idf_bins)
            .map(|((&pos, &tf_bin), &idf_bin)| TokenFeatures::new(pos, tf_bin, idf_bin))
            .collect();
        Ok(SourceInput::with_features(ids, features))
    }

    pub fn training_pair(&self, doc: &Document) -> Result<TrainingPair, PipelineError> {
        Ok(TrainingPair {
            source: self.source_input(doc)?,
            target: self.tokenizer.encode(&doc.target_tokens),
        })
    }

    pub fn words(&self, ids: &[usize]) -> Result<Vec<String>, PipelineError> {
        self.tokenizer.decode(ids)
    }
}
