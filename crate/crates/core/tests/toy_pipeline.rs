//! End-to-end runs on small synthetic corpora.

use glatts_core::eval::metrics::token_accuracy;
use glatts_core::eval::toy::{gen_toy_corpus, ToyCorpus, ToyCorpusSpec};
use glatts_core::ist::{ist_tune, IstConfig};
use glatts_core::model::checkpoint::load_checkpoint;
use glatts_core::model::SamplingOptions;
use glatts_core::tokenizer::bpe_train;
use glatts_core::training::{encode_corpus, per_token_loss, train, Example, TrainConfig, TrainOutputs};
use glatts_core::{BpeVocab, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab_for(corpus: &ToyCorpus) -> BpeVocab {
    let texts: Vec<&str> = corpus.records.iter().map(|r| r.text.as_str()).collect();
    bpe_train(&texts, 256).unwrap()
}

fn encode(vocab: &BpeVocab, corpus: &ToyCorpus, speaker: &str) -> Vec<Example> {
    encode_corpus(vocab, &corpus.records_of(speaker), 64).unwrap()
}

fn recipe(steps: usize) -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: steps / 20,
        total_steps: steps,
        batch_token_budget: 512,
        ..TrainConfig::default()
    }
}

#[test]
fn memorized_record_is_reproduced_exactly() {
    let mut model = Model::new(ModelConfig::tiny(), 2).unwrap();
    let record = vec![Example {
        text_ids: vec![4, 1, 7, 7, 2],
        audio_ids: vec![9, 0, 3, 3, 8, 1, 5, 2],
    }];
    let tc = TrainConfig {
        peak_lr: 1e-2,
        warmup_steps: 10,
        total_steps: 200,
        weight_decay: 0.0,
        batch_token_budget: 64,
        ..TrainConfig::default()
    };
    let rep = train(&mut model, &record, &tc, &TrainOutputs::default()).unwrap();
    assert!(rep.steps.last().unwrap().loss < 0.05);
    assert_eq!(token_accuracy(&model, &record, None).unwrap(), 1.0);
}

#[test]
fn deterministic_speaker_is_learned() {
    let corpus = gen_toy_corpus(&ToyCorpusSpec {
        n_speakers: 1,
        n_heldout: 0,
        utts_per_speaker: 60,
        lexicon_size: 8,
        variants: 1,
        min_words: 3,
        max_words: 8,
        seed: 4,
        ..ToyCorpusSpec::default()
    })
    .unwrap();
    assert!(corpus.speakers[0].is_deterministic());
    let vocab = vocab_for(&corpus);
    let examples = encode(&vocab, &corpus, "s0");
    let mut model = Model::new(ModelConfig::desk(), 0).unwrap();
    train(&mut model, &examples, &recipe(1500), &TrainOutputs::default()).unwrap();

    let acc = token_accuracy(&model, &examples, None).unwrap();
    assert!(acc > 0.9, "accuracy {acc}");

    // Greedy generations stop on their own, inside the training length range.
    let lens: Vec<usize> = examples.iter().map(|e| e.audio_ids.len()).collect();
    let (lo, hi) = (*lens.iter().min().unwrap(), *lens.iter().max().unwrap());
    let opts = SamplingOptions {
        top_k: 1,
        temperature: 1.0,
        max_len: 4 * hi,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ex in examples.iter().take(12) {
        let g = model.generate(&ex.text_ids, &[], None, opts, &mut rng).unwrap();
        assert!(!g.hit_max_len);
        assert!((lo..=hi).contains(&g.tokens.len()), "length {} outside {lo}..={hi}", g.tokens.len());
    }
}

#[test]
fn heldout_loss_falls_over_first_evals() {
    let corpus = gen_toy_corpus(&ToyCorpusSpec {
        lexicon_size: 8,
        min_words: 3,
        max_words: 8,
        ..ToyCorpusSpec::default()
    })
    .unwrap();
    let vocab = vocab_for(&corpus);
    // The last ten utterances of every training speaker are held out.
    let (mut examples, mut heldout) = (Vec::new(), Vec::new());
    for s in &corpus.train_speakers {
        let mut ex = encode(&vocab, &corpus, s);
        heldout.extend(ex.split_off(40));
        examples.extend(ex);
    }
    let dir = tempfile::tempdir().unwrap();
    let tc = TrainConfig {
        checkpoint_every: 50,
        ..recipe(150)
    };
    let outputs = TrainOutputs {
        metrics: None,
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    let mut model = Model::new(ModelConfig::desk(), 0).unwrap();
    let rep = train(&mut model, &examples, &tc, &outputs).unwrap();
    assert_eq!(rep.checkpoints.len(), 3);
    let evals: Vec<f64> = rep
        .checkpoints
        .iter()
        .map(|p| per_token_loss(&load_checkpoint(p).unwrap(), &heldout, None).unwrap())
        .collect();
    assert!(evals.windows(2).all(|w| w[1] < w[0]), "{evals:?}");
}

#[test]
fn tuned_states_raise_heldout_accuracy() {
    let corpus = gen_toy_corpus(&ToyCorpusSpec {
        n_speakers: 33,
        utts_per_speaker: 100,
        lexicon_size: 8,
        min_words: 3,
        max_words: 8,
        seed: 1,
        ..ToyCorpusSpec::default()
    })
    .unwrap();
    let vocab = vocab_for(&corpus);
    let examples = encode_corpus(&vocab, &corpus.train_records(), 64).unwrap();
    let mut model = Model::new(ModelConfig::desk(), 0).unwrap();
    train(&mut model, &examples, &recipe(1000), &TrainOutputs::default()).unwrap();

    for h in &corpus.heldout_speakers {
        let mut ex = encode(&vocab, &corpus, h);
        let test = ex.split_off(80);
        let out = ist_tune(&model, &ex, None, &IstConfig::default()).unwrap();
        let before = token_accuracy(&model, &test, None).unwrap();
        let after = token_accuracy(&model, &test, Some(&out.bundle)).unwrap();
        assert!(after > before, "{h}: accuracy {before} -> {after}");
    }
}
