mod common;

use std::fs;
use std::path::Path;

use common::fixtures::{experiment, fixture};
use serde_json::Value;
use sumlab_core::pipeline::{
    self, ExperimentConfig, PipelineError, StrategyName, TrainOptions, Variant, STATS_FILE,
    TRAIN_FILE, VALID_FILE, WORD_VOCAB_FILE,
};

fn prepared(variant: Variant, dir: &Path) -> ExperimentConfig {
    let cfg = experiment(variant, &fixture("headlines_200.jsonl"), dir, 20);
    pipeline::preprocess(&cfg).unwrap();
    pipeline::build_vocab(&cfg).unwrap();
    cfg
}

fn log_records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn preprocess_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(Variant::Word, &fixture("headlines_200.jsonl"), dir.path(), 20);
    let report = pipeline::preprocess(&cfg).unwrap();
    assert_eq!(report.records, 200);
    assert_eq!(report.valid, 20);
    assert_eq!(report.train + report.valid + report.duplicates_removed, 200);
    assert!(report.duplicates_removed >= 5);
    assert_eq!(report.outputs.len(), 3);
    let read = |name: &str| fs::read(dir.path().join(name)).unwrap();
    let first: Vec<Vec<u8>> = [TRAIN_FILE, VALID_FILE, STATS_FILE].map(read).to_vec();
    pipeline::preprocess(&cfg).unwrap();
    let second: Vec<Vec<u8>> = [TRAIN_FILE, VALID_FILE, STATS_FILE].map(read).to_vec();
    assert_eq!(first, second);
}

#[test]
fn preprocess_rejects_an_oversized_validation_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(Variant::Word, &fixture("overfit_10.jsonl"), dir.path(), 50);
    let err = pipeline::preprocess(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
    assert!(err.to_string().contains("n_valid"));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn preprocess_counts_malformed_records() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("raw.jsonl");
    fs::write(
        &corpus,
        "{\"source\": \"a b c\", \"target\": \"a\"}\nnot json\n{\"source\": \"\", \"target\": \"x\"}\n{\"target\": \"y\"}\n",
    )
    .unwrap();
    let cfg = experiment(Variant::Word, &corpus, &dir.path().join("work"), 0);
    let err = pipeline::preprocess(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("2 malformed"), "{msg}");
    assert!(msg.contains("1 skipped"), "{msg}");
}

#[test]
fn every_variant_trains_on_the_fixture() {
    for variant in Variant::ALL {
        let dir = tempfile::tempdir().unwrap();
        let cfg = prepared(variant, dir.path());
        let summary = pipeline::train(&cfg, &TrainOptions::default()).unwrap();
        assert_eq!(summary.final_step, 60);
        assert!(summary.checkpoint.is_file());
        let records = log_records(&summary.log);
        let steps: Vec<&Value> = records.iter().filter(|r| r.get("train_loss").is_some()).collect();
        let evals: Vec<&Value> = records.iter().filter(|r| r.get("valid_loss").is_some()).collect();
        assert_eq!(steps.len(), 60, "{variant}");
        assert_eq!(evals.len(), 3, "{variant}");
        for e in &evals {
            for key in ["rouge1", "rouge2", "rougeL"] {
                assert!(e[key]["recall"].is_number(), "{variant}: {e}");
            }
        }
        let first = steps[0]["train_loss"].as_f64().unwrap();
        let last = steps[59]["train_loss"].as_f64().unwrap();
        assert!(last < first, "{variant}: {first} -> {last}");
        let has_bv = steps.iter().all(|r| r.get("batch_vocab").is_some());
        assert_eq!(has_bv, variant == Variant::FreLvt, "{variant}");
        if variant == Variant::FreLvt {
            assert_eq!(steps[0]["batch_vocab"]["size"], 40);
        }
    }
}

#[test]
fn resume_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(Variant::FreLinearMap, dir.path());
    cfg.model.dropout_rate = 0.1;
    let straight_dir = tempfile::tempdir().unwrap();
    let mut straight = cfg.clone();
    straight.data.work_dir = straight_dir.path().to_path_buf();
    pipeline::preprocess(&straight).unwrap();
    pipeline::build_vocab(&straight).unwrap();
    let full = pipeline::train(&straight, &TrainOptions::default()).unwrap();

    cfg.training.max_steps = 30;
    let half = pipeline::train(&cfg, &TrainOptions::default()).unwrap();
    assert_eq!(half.final_step, 30);
    cfg.training.max_steps = 60;
    let options = TrainOptions {
        resume: Some(half.checkpoint.clone()),
        checkpoint: None,
    };
    let rest = pipeline::train(&cfg, &options).unwrap();
    assert_eq!((rest.first_step, rest.final_step), (31, 60));
    assert_eq!(log_records(&rest.log), log_records(&full.log));
    assert_eq!(fs::read(&rest.checkpoint).unwrap(), fs::read(&full.checkpoint).unwrap());
}

#[test]
fn numbered_checkpoints_follow_the_interval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = prepared(Variant::Word, dir.path());
    cfg.training.max_steps = 20;
    cfg.training.checkpoint_interval = 8;
    pipeline::train(&cfg, &TrainOptions::default()).unwrap();
    assert!(dir.path().join("checkpoint-8.json").is_file());
    assert!(dir.path().join("checkpoint-16.json").is_file());
    assert!(!dir.path().join("checkpoint-20.json").exists());
}

#[test]
fn missing_artifacts_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(Variant::FreFitToHidden, dir.path());
    fs::remove_file(dir.path().join(STATS_FILE)).unwrap();
    let err = pipeline::train(&cfg, &TrainOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
    assert!(err.to_string().contains("preprocess"));
    assert!(!dir.path().join("train_log.jsonl").exists());

    let mut cfg = cfg;
    cfg.corpus.tf_bins = 4;
    pipeline::preprocess(&cfg).unwrap();
    cfg.corpus.tf_bins = 3;
    let err = pipeline::train(&cfg, &TrainOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

/// Trains the word model on the 10-pair fixture and evaluates on the same pairs.
fn overfit_pipeline(dir: &Path) -> ExperimentConfig {
    let mut cfg = experiment(Variant::Word, &fixture("overfit_10.jsonl"), dir, 0);
    cfg.data.test = Some(fixture("overfit_10.jsonl"));
    cfg.training.batch_size = 10;
    cfg.training.max_steps = 150;
    pipeline::preprocess(&cfg).unwrap();
    pipeline::build_vocab(&cfg).unwrap();
    pipeline::train(&cfg, &TrainOptions::default()).unwrap();
    cfg
}

#[test]
fn evaluation_of_an_overfit_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = overfit_pipeline(dir.path());
    let first = pipeline::evaluate(&cfg, None, None).unwrap();
    assert_eq!(first.pairs, 10);
    assert!(first.score.rouge1.recall > 0.9, "{:?}", first.score);
    let second = pipeline::evaluate(&cfg, None, None).unwrap();
    assert_eq!(first, second);
    let written: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_report.json")).unwrap()).unwrap();
    assert!(written["report"]["rougeL"]["f1"].is_number());

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let err = pipeline::evaluate(&cfg, None, Some(&empty)).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");

    let mut other = cfg.clone();
    other.vocab.word_max_size = 30;
    pipeline::build_vocab(&other).unwrap();
    let err = pipeline::evaluate(&other, None, None).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn summarize_honors_decoding_options() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = overfit_pipeline(dir.path());
    let text = "oil prices fell sharply after the opec meeting";
    let greedy = pipeline::summarize(&cfg, None, text).unwrap();
    assert_eq!(greedy, "oil prices fall");
    cfg.decoding.strategy = StrategyName::Beam;
    cfg.decoding.beam_width = 1;
    assert_eq!(pipeline::summarize(&cfg, None, text).unwrap(), greedy);
    cfg.decoding.beam_width = 4;
    assert!(!pipeline::summarize(&cfg, None, text).unwrap().is_empty());

    let long = vec!["police arrest two men"; 40].join(" ");
    let out = pipeline::summarize(&cfg, None, &long).unwrap();
    assert!(out.split(' ').count() <= cfg.decoding.max_len);

    let err = pipeline::summarize(&cfg, None, "   ").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = pipeline::summarize(&cfg, Some(&dir.path().join("nope.json")), text).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn word_vocab_is_written_by_build_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(Variant::Word, &fixture("headlines_200.jsonl"), dir.path(), 20);
    pipeline::preprocess(&cfg).unwrap();
    let report = pipeline::build_vocab(&cfg).unwrap();
    assert!(dir.path().join(WORD_VOCAB_FILE).is_file());
    assert!(report.bpe_merges <= 150);
    assert!(report.word_vocab_size > 40);
}
