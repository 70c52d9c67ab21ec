use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::artifacts::{Artifacts, Encoder};
use super::config::{ExperimentConfig, TagSource};
use super::{PipelineError, BPE_MERGES_FILE, BPE_VOCAB_FILE, EVAL_REPORT_FILE, WORD_VOCAB_FILE};
use crate::corpus::{
    annotate_document, compute_corpus_stats, deduplicate, ingest, split, write_corpus,
    CorpusError, Document, LexiconTagger,
};
use crate::eval::{evaluate_corpus, RougeReport, RougeScore};
use crate::model::checkpoint;
use crate::model::{decode, Batch, ModelConfig, ModelState, TrainingPair};
use crate::vocab::{bpe_learn, build_word_vocab};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PreprocessReport {
    pub records: usize,
    pub skipped_empty: usize,
    pub duplicates_removed: usize,
    pub train: usize,
    pub valid: usize,
    pub outputs: Vec<PathBuf>,
}

/// Reads every record of a raw corpus, collecting malformed ones into one error.
fn ingest_all(path: &Path) -> Result<(Vec<Document>, usize), PipelineError> {
    let mut reader = ingest(path).map_err(|e| {
        PipelineError::Data(format!("cannot read {}: {e}", path.display()))
    })?;
    let mut docs = Vec::new();
    let mut malformed = Vec::new();
    for item in reader.by_ref() {
        match item {
            Ok(d) => docs.push(d),
            Err(e @ CorpusError::Malformed { .. }) => malformed.push(e),
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(first) = malformed.first() {
        return Err(PipelineError::Data(format!(
            "{} malformed record(s) in {} ({} well-formed, {} skipped as empty); first: {first}",
            malformed.len(),
            path.display(),
            docs.len(),
            reader.skipped()
        )));
    }
    Ok((docs, reader.skipped()))
}

/// Dedup, split, tag and bin the raw corpus; writes the two annotated splits
/// and the corpus statistics.
pub fn preprocess(config: &ExperimentConfig) -> Result<PreprocessReport, PipelineError> {
    let (docs, skipped) = ingest_all(&config.data.corpus)?;
    let records = docs.len() + skipped;
    let before = docs.len();
    let docs: Vec<Document> = deduplicate(docs).collect();
    let duplicates_removed = before - docs.len();
    if docs.is_empty() {
        return Err(PipelineError::Data(format!(
            "{} holds no usable records",
            config.data.corpus.display()
        )));
    }
    let c = &config.corpus;
    let (mut train, mut valid) = split(docs, c.n_valid, c.split_seed)
        .map_err(|e| PipelineError::Config(format!("corpus.n_valid: {e}")))?;
    if train.is_empty() {
        return Err(PipelineError::Config(format!(
            "corpus.n_valid ({}) leaves no training documents",
            c.n_valid
        )));
    }
    let stats = compute_corpus_stats(&train, c.tf_bins, c.idf_bins)?;
    let tagger = LexiconTagger::english();
    for d in train.iter_mut().chain(valid.iter_mut()) {
        if c.tag_source == TagSource::Lexicon {
            d.pos_tags.clear();
        }
        annotate_document(d, &stats, &tagger);
    }
    let art = Artifacts::new(&config.data.work_dir);
    fs::create_dir_all(&art.work_dir)?;
    write_corpus(art.train(), &train)?;
    write_corpus(art.valid(), &valid)?;
    stats.save(art.stats())?;
    Ok(PreprocessReport {
        records,
        skipped_empty: skipped,
        duplicates_removed,
        train: train.len(),
        valid: valid.len(),
        outputs: vec![art.train(), art.valid(), art.stats()],
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct VocabReport {
    pub word_vocab_size: usize,
    pub bpe_merges: usize,
    pub bpe_vocab_size: usize,
}

/// Word vocabulary and BPE model from the training split.
pub fn build_vocab(config: &ExperimentConfig) -> Result<VocabReport, PipelineError> {
    let art = Artifacts::new(&config.data.work_dir);
    let train = art.read_split(&art.train())?;
    let v = &config.vocab;
    let words = build_word_vocab(&train, v.word_max_size, v.word_min_freq)?;
    words.save(art.path(WORD_VOCAB_FILE))?;
    let tokens = train
        .iter()
        .flat_map(|d| d.source_tokens.iter().chain(&d.target_tokens));
    let bpe = bpe_learn(tokens, v.bpe_merges);
    bpe.save(art.path(BPE_MERGES_FILE), art.path(BPE_VOCAB_FILE))?;
    Ok(VocabReport {
        word_vocab_size: words.len(),
        bpe_merges: bpe.num_merges(),
        bpe_vocab_size: bpe.vocab().len(),
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint; the step counter carries on.
    pub resume: Option<PathBuf>,
    /// Where to write the final checkpoint (default: the work directory).
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub first_step: u64,
    pub final_step: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn model_config(config: &ExperimentConfig, encoder: &Encoder) -> Result<ModelConfig, PipelineError> {
    let n = encoder.tokenizer.len();
    config
        .model
        .model_config(n, n, config.corpus.tf_bins, config.corpus.idf_bins)
}

fn checkpoint_metadata(config: &ExperimentConfig, encoder: &Encoder) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("variant".to_string(), config.model.variant.to_string()),
        ("vocab_fingerprint".to_string(), encoder.tokenizer.fingerprint()),
    ])
}

/// Loads a checkpoint and checks it against the vocabulary and model settings of `config`.
/// With `exact_seed` unset the initialization seed may differ.
fn load_checked(
    path: &Path,
    config: &ExperimentConfig,
    encoder: &Encoder,
    exact_seed: bool,
) -> Result<ModelState, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Config(format!("missing checkpoint {}", path.display())));
    }
    let expected = model_config(config, encoder)?;
    let (state, metadata) = checkpoint::load(path)?;
    let mut stored = state.config().clone();
    if !exact_seed {
        stored.seed = expected.seed;
    }
    if stored != expected {
        return Err(PipelineError::Config(format!(
            "checkpoint {} was trained with a different model configuration",
            path.display()
        )));
    }
    if metadata.get("vocab_fingerprint") != Some(&encoder.tokenizer.fingerprint()) {
        return Err(PipelineError::Config(format!(
            "checkpoint {} was trained with a different vocabulary",
            path.display()
        )));
    }
    Ok(state)
}

/// Indices of the training pairs used at the 1-based `step`: epochs are
/// seeded shuffles, so any step can be replayed without its predecessors.
fn batch_indices(step: u64, n: usize, batch_size: usize, seed: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = (step - 1) / per_epoch;
    let slot = ((step - 1) % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order[slot * batch_size..((slot + 1) * batch_size).min(n)].to_vec()
}

fn batches(pairs: &[TrainingPair], size: usize, max_positions: usize) -> Result<Vec<Batch>, PipelineError> {
    pairs
        .chunks(size)
        .map(|c| Batch::new(c, max_positions).map_err(PipelineError::from))
        .collect()
}

/// Mean token loss over `batches`, weighted by their target token counts.
fn corpus_loss(state: &ModelState, batches: &[Batch]) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let n = b.num_target_tokens();
        total += state.evaluate_loss(b)? * n as f64;
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Decodes every document and scores it against its target.
fn decode_and_score(
    state: &ModelState,
    encoder: &Encoder,
    docs: &[Document],
    config: &ExperimentConfig,
) -> Result<RougeScore, PipelineError> {
    let d = &config.decoding;
    let mut pairs = Vec::with_capacity(docs.len());
    for doc in docs {
        let source = encoder.source_input(doc)?;
        let hyp = decode(state, &source, d.strategy(), d.max_len)?;
        pairs.push((encoder.words(&hyp.tokens)?, doc.target_tokens.clone()));
    }
    Ok(evaluate_corpus(&pairs)?)
}

fn write_line(w: &mut impl Write, value: &serde_json::Value) -> Result<(), PipelineError> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains the configured variant, logging one record per step plus
/// validation records every `eval_interval` steps.
pub fn train(config: &ExperimentConfig, options: &TrainOptions) -> Result<TrainSummary, PipelineError> {
    let art = Artifacts::new(&config.data.work_dir);
    let train_docs = art.read_split(&art.train())?;
    let valid_docs = art.read_split(&art.valid())?;
    let encoder = art.encoder(config)?;
    let pairs = train_docs
        .iter()
        .map(|d| encoder.training_pair(d))
        .collect::<Result<Vec<_>, _>>()?;
    let valid_pairs = valid_docs
        .iter()
        .map(|d| encoder.training_pair(d))
        .collect::<Result<Vec<_>, _>>()?;
    let model_config = model_config(config, &encoder)?;
    let max_positions = model_config.max_positions;
    let mut state = match &options.resume {
        Some(path) => load_checked(path, config, &encoder, true)?,
        None => ModelState::new(model_config)?,
    };
    let t = &config.training;
    let total = t.total_steps(pairs.len());
    let valid_batches = batches(&valid_pairs, t.batch_size, max_positions)?;
    let decode_docs = match t.eval_decode_limit {
        0 => &valid_docs[..],
        n => &valid_docs[..n.min(valid_docs.len())],
    };

    let log_path = art.train_log();
    let log_file = if options.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(log_file);
    let metadata = checkpoint_metadata(config, &encoder);
    let first_step = state.step() + 1;
    let mut final_loss = None;
    for step in first_step..=total {
        let started = Instant::now();
        let idx = batch_indices(step, pairs.len(), t.batch_size, t.shuffle_seed);
        let chosen: Vec<TrainingPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        let batch = Batch::new(&chosen, max_positions)?;
        let report = state.train_step(&batch, &t.optimizer)?;
        final_loss = Some(report.loss);
        let mut record = json!({
            "step": report.step,
            "train_loss": report.loss,
            "learning_rate": report.learning_rate,
            "wall_ms": started.elapsed().as_millis() as u64,
        });
        if let Some(bv) = report.batch_vocab {
            record["batch_vocab"] = serde_json::to_value(bv)?;
        }
        write_line(&mut log, &record)?;
        if t.eval_interval > 0 && step % t.eval_interval == 0 && !valid_docs.is_empty() {
            let valid_loss = corpus_loss(&state, &valid_batches)?;
            let rouge = decode_and_score(&state, &encoder, decode_docs, config)?.report();
            write_line(
                &mut log,
                &json!({
                    "step": step,
                    "valid_loss": valid_loss,
                    "rouge1": rouge.rouge1,
                    "rouge2": rouge.rouge2,
                    "rougeL": rouge.rouge_l,
                }),
            )?;
            log::info!("step {step}: train {:.4}, valid {valid_loss:.4}", report.loss);
        }
        if t.checkpoint_interval > 0 && step % t.checkpoint_interval == 0 {
            checkpoint::save(&state, &metadata, art.path(&format!("checkpoint-{step}.json")))?;
        }
        log.flush()?;
    }
    let ckpt = options.checkpoint.clone().unwrap_or_else(|| art.checkpoint());
    checkpoint::save(&state, &metadata, &ckpt)?;
    Ok(TrainSummary {
        first_step,
        final_step: state.step(),
        final_loss,
        checkpoint: ckpt,
        log: log_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationOutcome {
    pub pairs: usize,
    pub score: RougeScore,
    pub report: RougeReport,
}

/// Decodes every test source and reports corpus ROUGE.
pub fn evaluate(
    config: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    test_path: Option<&Path>,
) -> Result<EvaluationOutcome, PipelineError> {
    let art = Artifacts::new(&config.data.work_dir);
    let test_path = test_path
        .map(Path::to_path_buf)
        .or_else(|| config.data.test.clone())
        .ok_or_else(|| PipelineError::Config("no test set: set data.test or pass one".into()))?;
    let encoder = art.encoder(config)?;
    let ckpt = checkpoint_path.map_or_else(|| art.checkpoint(), Path::to_path_buf);
    let state = load_checked(&ckpt, config, &encoder, false)?;
    let (mut docs, _) = ingest_all(&test_path)?;
    if docs.is_empty() {
        return Err(PipelineError::Data(format!("test set {} is empty", test_path.display())));
    }
    for d in &mut docs {
        encoder.annotate(d);
    }
    let score = decode_and_score(&state, &encoder, &docs, config)?;
    let outcome = EvaluationOutcome {
        pairs: docs.len(),
        score,
        report: score.report(),
    };
    fs::write(
        art.path(EVAL_REPORT_FILE),
        serde_json::to_string_pretty(&outcome)? + "\n",
    )?;
    Ok(outcome)
}

/// Summary of free text with the configured decoding settings.
pub fn summarize(
    config: &ExperimentConfig,
    checkpoint_path: Option<&Path>,
    text: &str,
) -> Result<String, PipelineError> {
    let art = Artifacts::new(&config.data.work_dir);
    let encoder = art.encoder(config)?;
    let ckpt = checkpoint_path.map_or_else(|| art.checkpoint(), Path::to_path_buf);
    let state = load_checked(&ckpt, config, &encoder, false)?;
    let mut doc = Document::new("input", text, "");
    if doc.source_tokens.is_empty() {
        return Err(PipelineError::Data("input text is empty".into()));
    }
    encoder.annotate(&mut doc);
    let mut source = encoder.source_input(&doc)?;
    let limit = state.config().max_positions;
    if source.len() > limit {
        log::warn!("input has {} tokens; truncated to {limit}", source.len());
        source.truncate(limit);
    }
    let d = &config.decoding;
    let hyp = decode(&state, &source, d.strategy(), d.max_len)?;
    Ok(encoder.words(&hyp.tokens)?.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (1..=4).flat_map(|s| batch_indices(s, 10, 3, 9)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(4, 10, 3, 9).len(), 1);
        assert_eq!(batch_indices(6, 10, 3, 9), batch_indices(6, 10, 3, 9));
    }
}
