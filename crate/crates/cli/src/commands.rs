use std::path::{Path, PathBuf};

use glatts_core::config::{apply_file, KvConfig};
use glatts_core::eval::metrics::{heldout_loss, token_accuracy};
use glatts_core::eval::throughput::{bench_csv, throughput_bench, throughput_ratios, BenchConfig};
use glatts_core::eval::toy::{gen_toy_corpus, ToyCorpusSpec};
use glatts_core::ist::{
    ist_tune, load_bundle, low_rank_vs_best, rank_sweep, save_bundle, sweep_csv, IstConfig, SpeakerSplit,
};
use glatts_core::model::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use glatts_core::model::{Model, ModelConfig, SamplingOptions, StateBundle, StateRank};
use glatts_core::tokenizer::{bpe_train, BpeVocab};
use glatts_core::training::{
    corpus_to_jsonl, encode_corpus, read_corpus, train, CorpusRecord, Example, TrainConfig, TrainOutputs,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::RunManifest;
use crate::*;

pub fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Tokenizer(a) => tokenizer(a, seed),
        Command::GenCorpus(a) => gen_corpus(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::TuneState(a) => tune_state(a, seed),
        Command::Generate(a) => generate(a, seed),
        Command::Evaluate(a) => evaluate(a),
        Command::SweepRank(a) => sweep_rank(a, seed),
        Command::Bench(a) => bench(a, seed),
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError {
            exit: 2,
            code: "io",
            message: format!("{} does not exist", path.display()),
        })
    }
}

fn texts(records: &[CorpusRecord]) -> Vec<&str> {
    records.iter().map(|r| r.text.as_str()).collect()
}

fn tokenizer(a: TokenizerArgs, seed: Option<u64>) -> CliResult<()> {
    require(&a.corpus)?;
    let records = read_corpus(&a.corpus)?;
    let vocab = bpe_train(&texts(&records), a.vocab_size)?;
    vocab.save(&a.out)?;
    println!("vocabulary of {} symbols written to {}", vocab.len(), a.out.display());
    let mut m = RunManifest::new("tokenizer", seed.unwrap_or(0));
    m.set("vocab_size", a.vocab_size).input(&a.corpus)?.output(&a.out);
    m.write_beside(&a.out)?;
    Ok(())
}

fn gen_corpus(a: GenCorpusArgs, seed: Option<u64>) -> CliResult<()> {
    let spec = ToyCorpusSpec {
        n_speakers: a.speakers,
        n_heldout: a.heldout,
        utts_per_speaker: a.utts,
        lexicon_size: a.lexicon,
        audio_vocab: a.audio_vocab,
        variants: a.variants,
        seed: seed.unwrap_or(0),
        ..ToyCorpusSpec::default()
    };
    let corpus = gen_toy_corpus(&spec)?;
    write_atomic(&a.out, corpus_to_jsonl(&corpus.records)?.as_bytes())?;
    println!(
        "{} records; train speakers {}; held-out speakers {}",
        corpus.records.len(),
        corpus.train_speakers.join(","),
        corpus.heldout_speakers.join(",")
    );
    let mut m = RunManifest::new("gen-corpus", spec.seed);
    m.set("speakers", a.speakers)
        .set("heldout", a.heldout)
        .set("utts", a.utts)
        .set("lexicon", a.lexicon)
        .set("audio_vocab", a.audio_vocab)
        .set("variants", a.variants)
        .output(&a.out);
    m.write_beside(&a.out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> CliResult<()> {
    require(&a.corpus)?;
    let mut mc = ModelConfig::desk();
    let mut tc = TrainConfig::default();
    if let Some(p) = &a.config {
        require(p)?;
        apply_file(p, &mut [&mut mc, &mut tc])?;
    }
    if let Some(s) = seed {
        tc.seed = s;
    }
    mc.validate()?;
    tc.validate()?;
    let records: Vec<CorpusRecord> = read_corpus(&a.corpus)?
        .into_iter()
        .filter(|r| !a.exclude_speakers.contains(&r.speaker_id))
        .collect();
    if records.is_empty() {
        return Err(CliError::assertion("no training records left after speaker filtering"));
    }
    let vocab = match &a.vocab {
        Some(p) => {
            require(p)?;
            BpeVocab::load(p)?
        }
        None => bpe_train(&texts(&records), mc.text_vocab)?,
    };
    if vocab.len() > mc.text_vocab {
        return Err(CliError::assertion(format!(
            "vocabulary has {} symbols, model text_vocab is {}",
            vocab.len(),
            mc.text_vocab
        )));
    }
    let examples = encode_corpus(&vocab, &records, mc.audio_vocab)?;
    let mut model = Model::new(mc.clone(), tc.seed)?;

    std::fs::create_dir_all(&a.out)?;
    let metrics = a.out.join("metrics.csv");
    let metrics_tmp = a.out.join(".metrics.csv.partial");
    let outputs = TrainOutputs {
        metrics: Some(metrics_tmp.clone()),
        checkpoint_dir: (tc.checkpoint_every > 0).then(|| a.out.join("checkpoints")),
    };
    let report = train(&mut model, &examples, &tc, &outputs)?;
    std::fs::rename(&metrics_tmp, &metrics)?;
    let ckpt = a.out.join("model.ckpt");
    let vocab_path = a.out.join("vocab.bpe");
    save_checkpoint(&model, &ckpt)?;
    vocab.save(&vocab_path)?;
    if let Some(last) = report.steps.last() {
        println!("step {} loss {:.4} tokens {}", last.step, last.loss, last.tokens_seen);
    }
    println!("checkpoint written to {}", ckpt.display());

    let mut m = RunManifest::new("train", tc.seed);
    m.config_pairs(mc.to_pairs()).config_pairs(tc.to_pairs());
    m.set("exclude_speakers", a.exclude_speakers.join(","));
    m.input(&a.corpus)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    if let Some(p) = &a.vocab {
        m.input(p)?;
    }
    m.output(&ckpt).output(&vocab_path).output(&metrics);
    for p in &report.checkpoints {
        m.output(p);
    }
    m.write_beside(&a.out)?;
    Ok(())
}

fn load_model(a: &ModelArgs) -> CliResult<(Model, BpeVocab, PathBuf)> {
    require(&a.checkpoint)?;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("vocab.bpe")
    });
    require(&vocab_path)?;
    Ok((load_checkpoint(&a.checkpoint)?, BpeVocab::load(&vocab_path)?, vocab_path))
}

fn speaker_examples(model: &Model, vocab: &BpeVocab, corpus: &Path, speaker: Option<&str>) -> CliResult<Vec<Example>> {
    require(corpus)?;
    let records: Vec<CorpusRecord> = read_corpus(corpus)?
        .into_iter()
        .filter(|r| speaker.map_or(true, |s| r.speaker_id == s))
        .collect();
    if records.is_empty() {
        return Err(CliError::assertion(match speaker {
            Some(s) => format!("no records of speaker {s} in {}", corpus.display()),
            None => format!("{} holds no records", corpus.display()),
        }));
    }
    Ok(encode_corpus(vocab, &records, model.config().audio_vocab)?)
}

fn ist_config(path: Option<&PathBuf>, seed: Option<u64>) -> CliResult<IstConfig> {
    let mut c = IstConfig::default();
    if let Some(p) = path {
        require(p)?;
        apply_file(p, &mut [&mut c])?;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn tune_state(a: TuneStateArgs, seed: Option<u64>) -> CliResult<()> {
    let (model, vocab, vocab_path) = load_model(&a.model)?;
    let mut cfg = ist_config(a.config.as_ref(), seed)?;
    if let Some(r) = &a.rank {
        cfg.rank = r.parse()?;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let examples = speaker_examples(&model, &vocab, &a.corpus, Some(&a.speaker))?;
    if a.holdout >= examples.len() {
        return Err(CliError::assertion(format!(
            "holdout of {} leaves no tuning utterances out of {}",
            a.holdout,
            examples.len()
        )));
    }
    let (train_part, test_part) = examples.split_at(examples.len() - a.holdout);
    let test = (!test_part.is_empty()).then_some(test_part);
    let out = ist_tune(&model, train_part, test, &cfg)?;
    for (i, l) in out.train_losses.iter().enumerate() {
        println!("step {} loss {l:.4}", i + 1);
    }
    if let Some(best) = out.best_test_loss() {
        println!("best held-out loss {best:.4} after {} steps", out.best_step);
    }
    save_bundle(&out.bundle, &model, &a.out)?;
    println!("state bundle written to {}", a.out.display());

    let mut m = RunManifest::new("tune-state", cfg.seed);
    m.config_pairs(cfg.to_pairs())
        .set("speaker", &a.speaker)
        .set("holdout", a.holdout);
    m.input(&a.model.checkpoint)?.input(&vocab_path)?.input(&a.corpus)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    m.output(&a.out);
    m.write_beside(&a.out)?;
    Ok(())
}

fn parse_ids(s: &str) -> CliResult<Vec<usize>> {
    s.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::assertion(format!("audio id {t:?} is not a non-negative integer")))
        })
        .collect()
}

fn load_states(path: Option<&PathBuf>, model: &Model) -> CliResult<Option<StateBundle>> {
    match path {
        Some(p) => {
            require(p)?;
            Ok(Some(load_bundle(p, model)?))
        }
        None => Ok(None),
    }
}

fn generate(a: GenerateArgs, seed: Option<u64>) -> CliResult<()> {
    let (model, vocab, vocab_path) = load_model(&a.model)?;
    let states = load_states(a.states.as_ref(), &model)?;
    let text = vocab.encode(&a.text)?;
    let prompt = parse_ids(&a.prompt_audio)?;
    let seed = seed.unwrap_or(0);
    let opts = SamplingOptions {
        top_k: a.top_k,
        temperature: a.temperature,
        max_len: a.max_len.unwrap_or(model.config().max_len),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = model.generate(text.ids(), &prompt, states.as_ref(), opts, &mut rng)?;
    let line = g
        .tokens
        .ids()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
        + "\n";
    print!("{line}");
    if g.hit_max_len {
        eprintln!("note: stopped at max_len {} without EOS", opts.max_len);
    }
    if let Some(out) = &a.out {
        write_atomic(out, line.as_bytes())?;
        let mut m = RunManifest::new("generate", seed);
        m.set("text", &a.text)
            .set("prompt_audio", &a.prompt_audio)
            .set("top_k", a.top_k)
            .set("temperature", format!("{:?}", a.temperature))
            .set("max_len", opts.max_len)
            .set("hit_max_len", g.hit_max_len);
        m.input(&a.model.checkpoint)?.input(&vocab_path)?;
        if let Some(p) = &a.states {
            m.input(p)?;
        }
        m.output(out);
        m.write_beside(out)?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let (model, vocab, _) = load_model(&a.model)?;
    let states = load_states(a.states.as_ref(), &model)?;
    let mut examples = speaker_examples(&model, &vocab, &a.corpus, a.speaker.as_deref())?;
    if let Some(n) = a.last {
        let skip = examples.len().saturating_sub(n);
        examples.drain(..skip);
    }
    let loss = heldout_loss(&model, &examples, states.as_ref())?;
    let acc = token_accuracy(&model, &examples, states.as_ref())?;
    println!("utterances={} loss={loss:.6} accuracy={acc:.6}", examples.len());
    Ok(())
}

fn sweep_rank(a: SweepRankArgs, seed: Option<u64>) -> CliResult<()> {
    let (model, vocab, vocab_path) = load_model(&a.model)?;
    let base = ist_config(a.config.as_ref(), seed)?;
    let ranks = a
        .ranks
        .iter()
        .map(|r| r.parse::<StateRank>())
        .collect::<glatts_core::Result<Vec<_>>>()?;
    require(&a.corpus)?;
    let records = read_corpus(&a.corpus)?;
    let mut names: Vec<String> = a.speakers.clone();
    if names.is_empty() {
        for r in &records {
            if !names.contains(&r.speaker_id) {
                names.push(r.speaker_id.clone());
            }
        }
    }
    let mut splits = Vec::with_capacity(names.len());
    for name in &names {
        let own: Vec<CorpusRecord> = records.iter().filter(|r| &r.speaker_id == name).cloned().collect();
        if own.len() <= a.test_utts || a.test_utts == 0 {
            return Err(CliError::assertion(format!(
                "speaker {name} has {} utterances; need more than the {} test utterances",
                own.len(),
                a.test_utts
            )));
        }
        let ex = encode_corpus(&vocab, &own, model.config().audio_vocab)?;
        let (tr, te) = ex.split_at(ex.len() - a.test_utts);
        splits.push(SpeakerSplit {
            name: name.clone(),
            train: tr.to_vec(),
            test: te.to_vec(),
        });
    }
    let cells = rank_sweep(&model, &splits, &ranks, &a.lrs, &base)?;
    let csv = sweep_csv(&cells);
    write_atomic(&a.out, csv.as_bytes())?;
    print!("{csv}");
    if let Some((low, best)) = low_rank_vs_best(&cells, 2) {
        let gap = low.mean_best_test_loss / best.mean_best_test_loss - 1.0;
        println!(
            "best rank<=2 cell: rank {} lr {} ({:.2}% above the best cell)",
            low.rank,
            low.lr,
            100.0 * gap
        );
        if gap > 0.05 {
            eprintln!("warning: low ranks are more than 5% worse than the best cell");
        }
    }
    let mut m = RunManifest::new("sweep-rank", base.seed);
    m.config_pairs(base.to_pairs())
        .set("ranks", a.ranks.join(","))
        .set("lrs", a.lrs.iter().map(|l| format!("{l:?}")).collect::<Vec<_>>().join(","))
        .set("speakers", names.join(","))
        .set("test_utts", a.test_utts);
    m.input(&a.model.checkpoint)?.input(&vocab_path)?.input(&a.corpus)?;
    m.output(&a.out);
    m.write_beside(&a.out)?;
    Ok(())
}

fn bench(a: BenchArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = BenchConfig::default();
    if let Some(p) = &a.config {
        require(p)?;
        apply_file(p, &mut [&mut cfg])?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let results = throughput_bench(&cfg, &a.batch_sizes, a.len)?;
    let csv = bench_csv(&results);
    write_atomic(&a.out, csv.as_bytes())?;
    print!("{csv}");
    for r in &results {
        println!(
            "{} batch {}: step time {:.3e}s near t=100, {:.3e}s near t=1000, state {} bytes",
            r.attention_kind.name(),
            r.batch_size,
            r.step_time_early,
            r.step_time_late,
            r.peak_state_memory
        );
    }
    for (b, ratio) in throughput_ratios(&results) {
        println!("gla/softmax throughput at batch {b}: {ratio:.2}");
    }
    let mut m = RunManifest::new("bench", cfg.seed);
    m.config_pairs(cfg.to_pairs())
        .set(
            "batch_sizes",
            a.batch_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        )
        .set("len", a.len);
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    m.output(&a.out);
    m.write_beside(&a.out)?;
    Ok(())
}
