use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sumlab_core::model::{decode, Batch, DecodeStrategy, ModelState, OptimizerConfig};
use sumlab_core::pipeline::{self, Artifacts, ExperimentConfig, Variant};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// A small experiment over `corpus`, writing into `work_dir`.
pub fn experiment(variant: Variant, corpus: &Path, work_dir: &Path, n_valid: usize) -> ExperimentConfig {
    let text = format!(
        r#"
[data]
corpus = {corpus:?}
test = {test:?}
work_dir = {work_dir:?}

[corpus]
n_valid = {n_valid}
tf_bins = 3
idf_bins = 3

[vocab]
bpe_merges = 150

[model]
variant = "{variant}"
d_model = 32
num_layers = 2
num_heads = 4
ffn_dim = 64
dropout_rate = 0.0
max_positions = 48
lm2h_word_dim = 16
lvt_size = 40

[training]
batch_size = 16
max_steps = 60
eval_interval = 20
eval_decode_limit = 5
shuffle_seed = 3

[training.optimizer]
learning_rate = 1.0
warmup_steps = 100

[decoding]
strategy = "greedy"
max_len = 12
"#,
        test = fixture("headlines_test.jsonl"),
    );
    ExperimentConfig::from_toml(&text, &[]).unwrap()
}

pub struct Overfit {
    pub steps: u64,
    pub final_loss: f64,
    pub exact: usize,
    pub total: usize,
    pub elapsed: Duration,
}

/// Trains `variant` on the 10-pair fixture until the loss drops below
/// `target_loss` (or `max_steps`), then decodes every source greedily.
pub fn overfit(variant: Variant, max_steps: u64, target_loss: f64) -> Overfit {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = experiment(variant, &fixture("overfit_10.jsonl"), dir.path(), 0);
    cfg.vocab.bpe_merges = 400;
    cfg.model.lvt_size = sumlab_core::lvt::DEFAULT_BATCH_VOCAB_SIZE;
    pipeline::preprocess(&cfg).unwrap();
    pipeline::build_vocab(&cfg).unwrap();
    let art = Artifacts::new(dir.path());
    let encoder = art.encoder(&cfg).unwrap();
    let docs = art.read_split(&art.train()).unwrap();
    let pairs: Vec<_> = docs.iter().map(|d| encoder.training_pair(d).unwrap()).collect();
    let n = encoder.tokenizer.len();
    let model = cfg.model.model_config(n, n, cfg.corpus.tf_bins, cfg.corpus.idf_bins).unwrap();
    let batch = Batch::new(&pairs, model.max_positions).unwrap();
    let mut state = ModelState::new(model).unwrap();
    let opt = OptimizerConfig {
        learning_rate: 1.0,
        warmup_steps: 100,
        ..Default::default()
    };
    let mut final_loss = f64::INFINITY;
    while state.step() < max_steps && final_loss >= target_loss {
        final_loss = state.train_step(&batch, &opt).unwrap().loss;
    }
    let exact = docs
        .iter()
        .zip(&pairs)
        .filter(|(d, p)| {
            let hyp = decode(&state, &p.source, DecodeStrategy::Greedy, 12).unwrap();
            encoder.words(&hyp.tokens).unwrap() == d.target_tokens
        })
        .count();
    Overfit {
        steps: state.step(),
        final_loss,
        exact,
        total: docs.len(),
        elapsed: start.elapsed(),
    }
}
