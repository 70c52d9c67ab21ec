use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::PosTag;
use crate::features::{EmbeddingVariant, FeatureLayout};
use crate::lvt::{BatchVocabSource, DEFAULT_BATCH_VOCAB_SIZE};
use crate::model::{DecodeStrategy, ModelConfig, OptimizerConfig};

/// Everything one experiment needs, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub decoding: DecodingConfig,
}

/// Relative paths are resolved against the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Raw line-delimited corpus of source/target records.
    pub corpus: PathBuf,
    /// Held-out records for `evaluate`.
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Directory receiving every artifact.
    pub work_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagSource {
    /// Tags supplied in the records win; the bundled tagger fills the rest.
    #[default]
    Records,
    /// Always use the bundled tagger.
    Lexicon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_valid: usize,
    pub split_seed: u64,
    pub tf_bins: usize,
    pub idf_bins: usize,
    pub tag_source: TagSource,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_valid: 2000,
            split_seed: 1,
            tf_bins: 10,
            idf_bins: 10,
            tag_source: TagSource::Records,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub word_max_size: usize,
    pub word_min_freq: u64,
    pub bpe_merges: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            word_max_size: 123_000,
            word_min_freq: 1,
            bpe_merges: 32_000,
        }
    }
}

/// The five model variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "bpe")]
    #[default]
    SharedBpe,
    #[serde(rename = "word")]
    Word,
    #[serde(rename = "fre-f2h")]
    FreFitToHidden,
    #[serde(rename = "fre-lm2h")]
    FreLinearMap,
    #[serde(rename = "fre-lvt")]
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

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SharedBpe => "bpe",
            Variant::Word => "word",
            Variant::FreFitToHidden => "fre-f2h",
            Variant::FreLinearMap => "fre-lm2h",
            Variant::FreLvt => "fre-lvt",
        }
    }

    pub fn uses_bpe(self) -> bool {
        self == Variant::SharedBpe
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Variant::FreFitToHidden | Variant::FreLinearMap | Variant::FreLvt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected bpe, word, fre-f2h, fre-lm2h or fre-lvt)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub max_positions: usize,
    /// Word span of the linear-map layout; defaults to `d_model`.
    pub lm2h_word_dim: Option<usize>,
    pub tie_output_to_embedding: bool,
    pub lvt_size: usize,
    pub lvt_source: BatchVocabSource,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::SharedBpe,
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            dropout_rate: 0.1,
            max_positions: 256,
            lm2h_word_dim: None,
            tie_output_to_embedding: false,
            lvt_size: DEFAULT_BATCH_VOCAB_SIZE,
            lvt_source: BatchVocabSource::SourceAndTarget,
            label_smoothing: 0.0,
            seed: 1,
        }
    }
}

impl ModelSection {
    /// Embedding variant for the given bin counts.
    pub fn embedding(&self, tf_bins: usize, idf_bins: usize) -> Result<EmbeddingVariant, PipelineError> {
        Ok(match self.variant {
            Variant::SharedBpe => EmbeddingVariant::SharedBpe,
            Variant::Word => EmbeddingVariant::SeparateWord,
            Variant::FreFitToHidden => EmbeddingVariant::FreFitToHidden(
                FeatureLayout::fit_to_hidden(self.d_model, PosTag::COUNT, tf_bins, idf_bins)
                    .map_err(|e| PipelineError::Config(e.to_string()))?,
            ),
            Variant::FreLinearMap | Variant::FreLvt => EmbeddingVariant::FreLinearMapToHidden(
                FeatureLayout::for_bins(self.lm2h_word_dim.unwrap_or(self.d_model), tf_bins, idf_bins),
            ),
        })
    }

    pub fn model_config(
        &self,
        source_vocab_size: usize,
        target_vocab_size: usize,
        tf_bins: usize,
        idf_bins: usize,
    ) -> Result<ModelConfig, PipelineError> {
        let c = ModelConfig {
            d_model: self.d_model,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            dropout_rate: self.dropout_rate,
            max_positions: self.max_positions,
            embedding: self.embedding(tf_bins, idf_bins)?,
            source_vocab_size,
            target_vocab_size,
            tie_output_to_embedding: self.tie_output_to_embedding,
            lvt_enabled: self.variant == Variant::FreLvt,
            lvt_size: self.lvt_size,
            lvt_source: self.lvt_source,
            label_smoothing: self.label_smoothing,
            seed: self.seed,
        };
        c.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    /// When set, overrides `max_steps` with `epochs · ⌈train pairs / batch_size⌉`.
    pub epochs: Option<u64>,
    /// Steps between validation records; 0 disables them.
    pub eval_interval: u64,
    /// Validation pairs decoded for ROUGE at each evaluation; 0 means all.
    pub eval_decode_limit: usize,
    /// Steps between numbered checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub shuffle_seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 32,
            max_steps: 1000,
            epochs: None,
            eval_interval: 100,
            eval_decode_limit: 100,
            checkpoint_interval: 0,
            shuffle_seed: 1,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn total_steps(&self, train_pairs: usize) -> u64 {
        match self.epochs {
            Some(e) => e * (train_pairs.div_ceil(self.batch_size.max(1)) as u64),
            None => self.max_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Greedy,
    #[default]
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub strategy: StrategyName,
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            strategy: StrategyName::Beam,
            beam_width: 4,
            max_len: 30,
        }
    }
}

impl DecodingConfig {
    pub fn strategy(&self) -> DecodeStrategy {
        match self.strategy {
            StrategyName::Greedy => DecodeStrategy::Greedy,
            StrategyName::Beam => DecodeStrategy::Beam {
                width: self.beam_width,
            },
        }
    }
}

/// Sets a dotted key such as `training.max_steps` to a TOML value; bare words
/// that do not parse as TOML are taken as strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| {
        PipelineError::Config(format!("override {assignment:?} has an empty key"))
    })?;
    let mut node = table;
    for p in parts {
        node = node
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| PipelineError::Config(format!("{p} in {key} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads, overrides and validates a config; relative paths are resolved
    /// against the config file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.data.resolve(base);
        Ok(config)
    }

    /// Checks every knob before any work starts.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.corpus.tf_bins == 0 || self.corpus.idf_bins == 0 {
            return err("tf_bins and idf_bins must be positive".into());
        }
        if self.vocab.word_max_size < crate::vocab::NUM_SPECIALS {
            return err("word_max_size cannot hold the special tokens".into());
        }
        if self.training.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        self.training
            .optimizer
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.decoding.max_len == 0 {
            return err("decoding.max_len must be at least 1".into());
        }
        if self.decoding.strategy == StrategyName::Beam && self.decoding.beam_width == 0 {
            return err("decoding.beam_width must be at least 1".into());
        }
        // Vocabulary sizes are not known yet; placeholders exercise the
        // shape rules that do not depend on them.
        let probe = if self.model.variant.uses_bpe() { 8 } else { self.model.lvt_size.max(8) };
        self.model
            .model_config(probe, probe, self.corpus.tf_bins, self.corpus.idf_bins)?;
        Ok(())
    }
}

impl DataConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.work_dir);
        if let Some(t) = &mut self.test {
            fix(t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [data]
        corpus = "corpus.jsonl"
        work_dir = "run"
    "#;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = ExperimentConfig::from_toml(MINIMAL, &[]).unwrap();
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.corpus.tf_bins, 10);
        assert_eq!(c.vocab.bpe_merges, 32_000);
        assert_eq!(c.training.optimizer.warmup_steps, 4000);
        assert_eq!(c.decoding.strategy(), DecodeStrategy::Beam { width: 4 });
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = ExperimentConfig::from_toml(
            MINIMAL,
            &[
                "training.max_steps=7".into(),
                "model.variant=fre-lm2h".into(),
                "training.optimizer.learning_rate = 0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.training.max_steps, 7);
        assert_eq!(c.model.variant, Variant::FreLinearMap);
        assert_eq!(c.training.optimizer.learning_rate, 0.5);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "model.num_heads=5",
            "model.dropout_rate=1.0",
            "training.batch_size=0",
            "decoding.max_len=0",
            "model.variant=rnn",
            "model.unknown_key=1",
        ] {
            assert!(ExperimentConfig::from_toml(MINIMAL, &[bad.into()]).is_err(), "{bad}");
        }
        let f2h_too_narrow = ["model.variant=fre-f2h".to_string(), "model.d_model=16".into()];
        assert!(ExperimentConfig::from_toml(MINIMAL, &f2h_too_narrow).is_err());
    }

    #[test]
    fn epochs_become_steps() {
        let t = TrainingConfig {
            batch_size: 4,
            epochs: Some(3),
            ..Default::default()
        };
        assert_eq!(t.total_steps(10), 9);
        assert_eq!(TrainingConfig::default().total_steps(10), 1000);
    }
}
