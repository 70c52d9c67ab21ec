mod common;

use std::collections::BTreeSet;

use common::{batch, config, random_pairs, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sumlab_core::model::checkpoint;
use sumlab_core::model::{
    decode, parameter_shapes, DecodeStrategy, Mode, ModelState, OptimizerConfig, OutputVocab,
    SourceInput, TrainingPair,
};

const VOCAB: usize = 30;

fn fast_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 1.0,
        warmup_steps: 20,
        ..Default::default()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn decoder_is_causal() {
    let cfg = config(Variant::Word, 16, VOCAB);
    let state = ModelState::new(cfg.clone()).unwrap();
    let src = SourceInput::ids(vec![5, 6, 7, 8]);
    let target = vec![9, 10, 11, 12, 13];
    let base = batch(&[TrainingPair { source: src.clone(), target: target.clone() }], &cfg);
    let base = &state.forward(&base, Mode::Eval, OutputVocab::Full, None).unwrap()[0];
    for changed in 0..target.len() {
        let mut t = target.clone();
        t[changed] = 20;
        let b = batch(&[TrainingPair { source: src.clone(), target: t }], &cfg);
        let z = &state.forward(&b, Mode::Eval, OutputVocab::Full, None).unwrap()[0];
        // Target token `changed` is decoder input at position `changed + 1`.
        for s in 0..=changed {
            assert_eq!(z.row(s), base.row(s), "position {s} saw token {changed}");
        }
        assert_ne!(z.row(changed + 1), base.row(changed + 1));
    }
}

#[test]
fn padding_does_not_leak() {
    for variant in Variant::ALL {
        let cfg = config(variant, 24, VOCAB);
        let state = ModelState::new(cfg.clone()).unwrap();
        let pairs = random_pairs(variant, 6, VOCAB, 3);
        let alone = batch(&pairs[..1], &cfg);
        let together = batch(&pairs, &cfg);
        assert!(together.source[0].len() >= alone.source[0].len());
        let a = &state.forward(&alone, Mode::Eval, OutputVocab::Full, None).unwrap()[0];
        let t = &state.forward(&together, Mode::Eval, OutputVocab::Full, None).unwrap()[0];
        for s in 0..a.rows() {
            for (x, y) in a.row(s).iter().zip(t.row(s)) {
                assert!((x - y).abs() < 1e-6, "{}: {x} vs {y}", variant.name());
            }
        }
    }
}

#[test]
fn fresh_model_loss_is_near_log_vocab() {
    for variant in Variant::ALL {
        let cfg = config(variant, 24, 50);
        let state = ModelState::new(cfg.clone()).unwrap();
        let b = batch(&random_pairs(variant, 8, 50, 11), &cfg);
        let loss = state.evaluate_loss(&b).unwrap();
        let expected = 50f64.ln();
        assert!(rel(loss, expected) < 0.1, "{}: {loss} vs {expected}", variant.name());
    }
}

#[test]
fn zero_output_weights_give_uniform_loss_and_no_upstream_gradient() {
    let cfg = config(Variant::Word, 16, VOCAB);
    let mut state = ModelState::new(cfg.clone()).unwrap();
    state.param_mut("output.weight").unwrap().data_mut().fill(0.0);
    let b = batch(&random_pairs(Variant::Word, 4, VOCAB, 5), &cfg);
    let (loss, grads) = state
        .loss_and_gradients(&b, Mode::Eval, OutputVocab::Full, None, 1.0)
        .unwrap();
    assert!((loss - (VOCAB as f64).ln()).abs() < 1e-12);
    for (id, name, _) in state.params().iter() {
        let g = grads.get(id);
        if name.starts_with("output.") {
            continue;
        }
        assert!(g.is_none_or(|g| g.data().iter().all(|&x| x == 0.0)), "{name}");
    }
    let bias = state.params().id("output.bias").unwrap();
    assert!(grads.get(bias).unwrap().data().iter().any(|&x| x != 0.0));
}

#[test]
fn scaling_the_loss_scales_every_gradient() {
    let cfg = config(Variant::FreLinearMap, 16, VOCAB);
    let state = ModelState::new(cfg.clone()).unwrap();
    let b = batch(&random_pairs(Variant::FreLinearMap, 3, VOCAB, 8), &cfg);
    let (l1, g1) = state.loss_and_gradients(&b, Mode::Eval, OutputVocab::Full, None, 1.0).unwrap();
    let (l2, g2) = state.loss_and_gradients(&b, Mode::Eval, OutputVocab::Full, None, 2.0).unwrap();
    assert_eq!(l1, l2);
    for (id, a) in g1.iter() {
        let b = g2.get(id).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
        }
    }
}

#[test]
fn zero_learning_rate_only_advances_the_step() {
    let cfg = config(Variant::Word, 16, VOCAB);
    let mut state = ModelState::new(cfg.clone()).unwrap();
    let before = state.params().clone();
    let b = batch(&random_pairs(Variant::Word, 4, VOCAB, 1), &cfg);
    let opt = OptimizerConfig {
        learning_rate: 0.0,
        ..Default::default()
    };
    for _ in 0..3 {
        state.train_step(&b, &opt).unwrap();
    }
    assert_eq!(state.step(), 3);
    for ((_, name, a), (_, _, b)) in before.iter().zip(state.params().iter()) {
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn training_is_deterministic_with_dropout() {
    let mut cfg = config(Variant::FreLinearMap, 16, VOCAB);
    cfg.dropout_rate = 0.2;
    let pairs = random_pairs(Variant::FreLinearMap, 8, VOCAB, 2);
    let run = || {
        let mut state = ModelState::new(cfg.clone()).unwrap();
        (0..6)
            .map(|i| {
                let b = batch(&pairs[(i % 2) * 4..(i % 2) * 4 + 4], &cfg);
                state.train_step(&b, &fast_optimizer()).unwrap().loss.to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_loss() {
    let cfg = config(Variant::Word, 16, VOCAB);
    let mut state = ModelState::new(cfg.clone()).unwrap();
    let b = batch(&random_pairs(Variant::Word, 4, VOCAB, 4), &cfg);
    let first = state.train_step(&b, &fast_optimizer()).unwrap().loss;
    let mut last = first;
    for _ in 0..60 {
        last = state.train_step(&b, &fast_optimizer()).unwrap().loss;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(state.all_finite());
}

#[test]
fn lvt_leaves_unseen_rows_untouched() {
    let mut cfg = config(Variant::FreLvt, 16, 50);
    cfg.lvt_size = 10;
    let mut state = ModelState::new(cfg.clone()).unwrap();
    let initial = state.params().clone();
    let pairs = random_pairs(Variant::FreLvt, 200, 50, 21);
    let mut seen = BTreeSet::new();
    for step in 0..100 {
        let b = batch(&pairs[2 * step..2 * step + 2], &cfg);
        seen.extend(state.batch_vocab(&b).unwrap().local_to_global().iter().copied());
        let report = state.train_step(&b, &fast_optimizer()).unwrap();
        assert_eq!(report.batch_vocab.unwrap().size, 10);
    }
    let unseen: Vec<usize> = (0..50).filter(|id| !seen.contains(id)).collect();
    assert!(!unseen.is_empty(), "fixture should leave some rows unseen");
    for name in ["decoder.embedding", "output.weight"] {
        let (a, b) = (initial.by_name(name).unwrap(), state.params().by_name(name).unwrap());
        for &r in &unseen {
            assert_eq!(a.row(r), b.row(r), "{name} row {r}");
        }
        assert!(seen.iter().any(|&r| a.row(r) != b.row(r)));
    }
    let (a, b) = (initial.by_name("output.bias").unwrap(), state.params().by_name("output.bias").unwrap());
    for &c in &unseen {
        assert_eq!(a.get(0, c).to_bits(), b.get(0, c).to_bits());
    }
}

#[test]
fn full_size_batch_vocab_matches_plain_training() {
    let mut lvt = config(Variant::FreLvt, 16, VOCAB);
    lvt.lvt_size = VOCAB;
    let mut plain = lvt.clone();
    plain.lvt_enabled = false;
    let (mut a, mut b) = (ModelState::new(lvt.clone()).unwrap(), ModelState::new(plain).unwrap());
    let pairs = random_pairs(Variant::FreLvt, 40, VOCAB, 6);
    for step in 0..20 {
        let batch = batch(&pairs[2 * step..2 * step + 2], &lvt);
        let la = a.train_step(&batch, &fast_optimizer()).unwrap().loss;
        let lb = b.train_step(&batch, &fast_optimizer()).unwrap().loss;
        assert!(rel(la, lb) < 1e-6, "step {step}: {la} vs {lb}");
    }
}

#[test]
fn checkpoint_resume_replays_exactly() {
    let mut cfg = config(Variant::FreLvt, 16, VOCAB);
    cfg.dropout_rate = 0.1;
    let pairs = random_pairs(Variant::FreLvt, 10, VOCAB, 9);
    let b = batch(&pairs, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");

    let mut straight = ModelState::new(cfg.clone()).unwrap();
    let mut resumed = ModelState::new(cfg.clone()).unwrap();
    for _ in 0..3 {
        straight.train_step(&b, &fast_optimizer()).unwrap();
        resumed.train_step(&b, &fast_optimizer()).unwrap();
    }
    let meta = [("note".to_string(), "x".to_string())].into_iter().collect();
    checkpoint::save(&resumed, &meta, &path).unwrap();
    let (mut resumed, loaded_meta) = checkpoint::load(&path).unwrap();
    assert_eq!(loaded_meta, meta);
    assert_eq!(resumed.step(), 3);
    assert_eq!(resumed.moments(), straight.moments());
    for _ in 0..2 {
        let x = straight.train_step(&b, &fast_optimizer()).unwrap();
        let y = resumed.train_step(&b, &fast_optimizer()).unwrap();
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    }
    for ((_, n, x), (_, _, y)) in straight.params().iter().zip(resumed.params().iter()) {
        assert_eq!(x, y, "{n}");
    }
}

#[test]
fn checkpoint_rejects_a_different_config() {
    let cfg = config(Variant::Word, 16, VOCAB);
    let state = ModelState::new(cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    checkpoint::save(&state, &Default::default(), &path).unwrap();
    let mut other = cfg.clone();
    other.num_layers = 3;
    assert!(checkpoint::load_expecting(&path, &other).is_err());
    assert!(checkpoint::load_expecting(&path, &cfg).is_ok());
}

#[test]
fn beam_search_dominates_greedy() {
    for variant in [Variant::SharedBpe, Variant::FreLinearMap] {
        let cfg = config(variant, 16, VOCAB);
        let mut state = ModelState::new(cfg.clone()).unwrap();
        let pairs = random_pairs(variant, 6, VOCAB, 13);
        let b = batch(&pairs, &cfg);
        for _ in 0..15 {
            state.train_step(&b, &fast_optimizer()).unwrap();
        }
        for p in &pairs {
            let greedy = decode(&state, &p.source, DecodeStrategy::Greedy, 8).unwrap();
            let one = decode(&state, &p.source, DecodeStrategy::Beam { width: 1 }, 8).unwrap();
            assert_eq!(one, greedy);
            let wide = decode(&state, &p.source, DecodeStrategy::Beam { width: 4 }, 8).unwrap();
            assert!(wide.score() >= greedy.score() - 1e-12);
            assert!(greedy.tokens.len() <= 8);
        }
    }
}

#[test]
fn eval_mode_ignores_the_rng() {
    let mut cfg = config(Variant::Word, 16, VOCAB);
    cfg.dropout_rate = 0.5;
    let state = ModelState::new(cfg.clone()).unwrap();
    let b = batch(&random_pairs(Variant::Word, 3, VOCAB, 2), &cfg);
    let plain = state.forward(&b, Mode::Eval, OutputVocab::Full, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seeded = state.forward(&b, Mode::Eval, OutputVocab::Full, Some(&mut rng)).unwrap();
    assert_eq!(plain, seeded);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train = state.forward(&b, Mode::Train, OutputVocab::Full, Some(&mut rng)).unwrap();
    assert_ne!(plain, train);
}

#[test]
fn parameter_sets_follow_the_variant() {
    let names = |v: Variant| -> BTreeSet<String> {
        let cfg = config(v, 24, VOCAB);
        let state = ModelState::new(cfg.clone()).unwrap();
        let shapes = parameter_shapes(&cfg);
        let from_state: Vec<(String, (usize, usize))> = state
            .params()
            .iter()
            .map(|(_, n, m)| (n.to_string(), m.shape()))
            .collect();
        assert_eq!(from_state, shapes);
        state.param_names().into_iter().collect()
    };
    let bpe = names(Variant::SharedBpe);
    let word = names(Variant::Word);
    let f2h = names(Variant::FreFitToHidden);
    let lm2h = names(Variant::FreLinearMap);
    let lvt = names(Variant::FreLvt);

    let diff = |a: &BTreeSet<String>, b: &BTreeSet<String>| -> Vec<String> {
        a.difference(b).cloned().collect()
    };
    assert_eq!(diff(&word, &bpe), ["decoder.embedding", "encoder.embedding"]);
    assert_eq!(diff(&bpe, &word), ["embedding.shared"]);
    assert_eq!(f2h, word);
    assert_eq!(diff(&lm2h, &word), ["encoder.fre_map"]);
    assert!(diff(&word, &lm2h).is_empty());
    assert_eq!(lvt, lm2h);

    let f2h_cfg = config(Variant::FreFitToHidden, 24, VOCAB);
    let layout = f2h_cfg.embedding.layout().unwrap();
    let f2h_state = ModelState::new(f2h_cfg.clone()).unwrap();
    assert_eq!(
        f2h_state.params().by_name("encoder.embedding").unwrap().shape(),
        (VOCAB, layout.word_dim)
    );
    assert_eq!(layout.concat_dim, 24);

    let lm2h_cfg = config(Variant::FreLinearMap, 24, VOCAB);
    let layout = lm2h_cfg.embedding.layout().unwrap();
    let lm2h_state = ModelState::new(lm2h_cfg.clone()).unwrap();
    assert_eq!(
        lm2h_state.params().by_name("encoder.fre_map").unwrap().shape(),
        (layout.concat_dim, 24)
    );

    let mut tied = config(Variant::Word, 24, VOCAB);
    tied.tie_output_to_embedding = true;
    let tied = names_of(&tied);
    assert!(!tied.contains("output.weight"));
    assert!(tied.contains("output.bias"));
}

fn names_of(cfg: &sumlab_core::model::ModelConfig) -> BTreeSet<String> {
    ModelState::new(cfg.clone()).unwrap().param_names().into_iter().collect()
}
