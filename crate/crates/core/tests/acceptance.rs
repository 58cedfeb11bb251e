//! Acceptance run. Prints one line per criterion and exits non-zero when a
//! hard criterion fails. `ACCEPT_ONLY=1,5,9` restricts the run.

use std::time::Instant;

use glatts_core::attention::{
    gla_chunkwise, gla_chunkwise_var, gla_parallel, gla_parallel_var, gla_recurrent, softmax_attention,
    softmax_attention_var, AttentionInputs, DecayGates, GlaState,
};
use glatts_core::eval::throughput::{throughput_bench, throughput_ratios, AttentionKind, BenchConfig};
use glatts_core::eval::toy::{gen_toy_corpus, ToyCorpusSpec};
use glatts_core::gradcheck::grad_check_many;
use glatts_core::ist::{ist_tune, low_rank_vs_best, rank_sweep, IstConfig, SpeakerSplit};
use glatts_core::model::{sample_top_k, Mode, StateRank, StateVars};
use glatts_core::tokenizer::bpe_train;
use glatts_core::training::{
    bucket_batches, clip_gradients, encode_corpus, lr_at, padding_fraction, per_token_loss, train,
    unbucketed_batches, Example, TrainConfig, TrainOutputs,
};
use glatts_core::{Model, ModelConfig, StateBundle, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

fn gla_forms() -> Outcome {
    let mut r = rng(1);
    let (mut par, mut chunk) = (0.0f64, 0.0f64);
    for i in 0..200 {
        let n = r.gen_range(1..=64);
        let dk = r.gen_range(1..=16);
        let dv = r.gen_range(1..=16);
        let inp = AttentionInputs::random(n, dk, dv, &mut r);
        let gates = DecayGates::random(n, dk, 0.5, 0.999, &mut r);
        let s0 = if i % 2 == 0 {
            GlaState::zeros(dk, dv)
        } else {
            GlaState(Tensor::randn([dk, dv], 1.0, &mut r))
        };
        let (rec, s_rec) = gla_recurrent(&inp, &gates, &s0).unwrap();
        par = par.max(max_diff(&rec, &gla_parallel(&inp, &gates, &s0).unwrap()));
        for c in [1, 2, 3, 8, 16, n] {
            let (o, s) = gla_chunkwise(&inp, &gates, &s0, c).unwrap();
            chunk = chunk.max(max_diff(&rec, &o)).max(max_diff(&s_rec.0, &s.0));
        }
    }
    (
        par < 1e-10 && chunk < 1e-8,
        format!("parallel {par:.2e} (< 1e-10), chunkwise {chunk:.2e} (< 1e-8)"),
    )
}

/// Literal per-row softmax sum.
fn softmax_loop(inp: &AttentionInputs) -> Tensor {
    let (n, dk, dv) = (inp.len(), inp.dk(), inp.dv());
    let mut out = Tensor::zeros([n, dv]);
    for t in 0..n {
        let scores: Vec<f64> = (0..=t)
            .map(|i| (0..dk).map(|j| inp.q.at2(t, j) * inp.k.at2(i, j)).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (i, w) in e.iter().enumerate() {
            for c in 0..dv {
                out.data_mut()[t * dv + c] += w / z * inp.v.at2(i, c);
            }
        }
    }
    out
}

fn softmax_oracle() -> Outcome {
    let mut r = rng(2);
    let mut err = 0.0f64;
    for _ in 0..100 {
        let (n, dk, dv) = (r.gen_range(1..=32), r.gen_range(1..=16), r.gen_range(1..=16));
        let inp = AttentionInputs::random(n, dk, dv, &mut r);
        err = err.max(max_diff(&softmax_attention(&inp, true).unwrap(), &softmax_loop(&inp)));
    }
    (err < 1e-12, format!("max error {err:.2e} (< 1e-12)"))
}

fn gradients() -> Outcome {
    let mut r = rng(3);
    let (n, dk, dv) = (6, 3, 4);
    let qkv = [
        Tensor::randn([n, dk], 1.0, &mut r),
        Tensor::randn([n, dk], 1.0, &mut r),
        Tensor::randn([n, dv], 1.0, &mut r),
    ];
    let mut worst = Vec::new();
    let sm = grad_check_many(
        |t, x| {
            let o = softmax_attention_var(t, x[0], x[1], x[2], true)?;
            let o = t.mul(o, o)?;
            t.sum(o)
        },
        &qkv,
        1e-5,
    )
    .unwrap();
    worst.push(("softmax", sm));
    let mut gla_in = qkv.to_vec();
    gla_in.push(Tensor::uniform([n, dk], 0.3, 0.95, &mut r));
    gla_in.push(Tensor::randn([dk, dv], 1.0, &mut r));
    let rec = grad_check_many(
        |t, x| {
            let (o, s) = t.gla_recurrent(x[0], x[1], x[2], x[3], x[4], 1)?;
            let (a, b) = (t.sum(o)?, t.sum(s)?);
            let o2 = t.mul(o, o)?;
            let c = t.sum(o2)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        },
        &gla_in,
        1e-5,
    )
    .unwrap();
    worst.push(("recurrent", rec));
    let par = grad_check_many(
        |t, x| {
            let o = gla_parallel_var(t, x[0], x[1], x[2], x[3], x[4])?;
            let o = t.mul(o, o)?;
            t.sum(o)
        },
        &gla_in,
        1e-5,
    )
    .unwrap();
    worst.push(("parallel", par));
    for c in [1, 2, 4] {
        let e = grad_check_many(
            |t, x| {
                let (o, s) = gla_chunkwise_var(t, x[0], x[1], x[2], x[3], x[4], c)?;
                let o = t.mul(o, o)?;
                let (a, b) = (t.sum(o)?, t.sum(s)?);
                t.add(a, b)
            },
            &gla_in,
            1e-5,
        )
        .unwrap();
        worst.push(("chunkwise", e));
    }

    let m = Model::new(ModelConfig::tiny(), 5).unwrap();
    let text = [1, 2, 3, 4];
    let audio = [3, 1, 4, 1, 5, 9];
    let targets: Vec<usize> = audio.iter().copied().chain([m.config().eos_id()]).collect();
    let names: Vec<String> = m.params().names().to_vec();
    let picked: Vec<Tensor> = names.iter().map(|n| m.params().by_name(n).unwrap().clone()).collect();
    let full = grad_check_many(
        |tape, vars| {
            let mut b = m.params().bind(tape, false);
            for (n, &v) in names.iter().zip(vars) {
                b = b.with_var(m.params().id(n).unwrap(), v);
            }
            let sv = StateVars::zeros(tape, m.config())?;
            let out = m.forward_var(tape, &b, &text, &audio, &sv, &mut Mode::Eval)?;
            tape.cross_entropy(out.logits, &targets)
        },
        &picked,
        1e-5,
    )
    .unwrap();
    worst.push(("tiny model", full));
    let ok = worst.iter().all(|(_, e)| *e < 1e-4);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    (ok, format!("relative errors {detail} (< 1e-4)"))
}

fn causality_and_continuation() -> Outcome {
    let m = Model::new(ModelConfig::tiny(), 6).unwrap();
    let av = m.config().audio_vocab;
    let text = [2, 7, 1];
    let audio = [0, 4, 2, 9, 7, 1, 3, 3];
    let base = m.forward(&text, &audio, None).unwrap();
    let width = av + 1;
    let mut causal = true;
    for t in 0..audio.len() {
        let mut pert = audio;
        for v in &mut pert[t..] {
            *v = (*v + 1) % av;
        }
        let out = m.forward(&text, &pert, None).unwrap();
        causal &= base.data()[..(t + 1) * width] == out.data()[..(t + 1) * width];
    }

    let states = StateBundle::random_factored(m.config(), 2, 0.3, &mut rng(7)).unwrap();
    let (logits, one_shot) = m.forward_with_states(&text, &audio, Some(&states)).unwrap();
    let ctx = m.text_context(&text).unwrap();
    let mut st = m.initial_state(Some(&states)).unwrap();
    let mut inputs = vec![av];
    inputs.extend_from_slice(&audio);
    let mut rows = Vec::new();
    for chunk in [&inputs[..2], &inputs[2..3], &inputs[3..7], &inputs[7..]] {
        rows.extend(m.forward_chunk(&ctx, chunk, &mut st).unwrap().into_data());
    }
    let continued = st == one_shot && rows == logits.data();
    (
        causal && continued,
        format!("bitwise causal {causal}, chunked state and logits identical {continued}"),
    )
}

fn zero_state_identity() -> Outcome {
    let m = Model::new(ModelConfig::tiny(), 8).unwrap();
    let text = [3, 1, 4];
    let audio = [1, 5, 9, 2];
    let none = m.forward(&text, &audio, None).unwrap();
    let zeros = m.forward(&text, &audio, Some(&StateBundle::zeros(m.config()))).unwrap();
    let same = none == zeros;
    (same, format!("zero bundle logits bitwise equal {same}"))
}

/// Trained desk model and the held-out splits shared by the adaptation
/// criteria.
struct Adapted {
    model: Model,
    splits: Vec<SpeakerSplit>,
    train_secs: f64,
}

const TUNE_UTTS: usize = 160;

fn train_toy() -> Adapted {
    let spec = ToyCorpusSpec {
        n_speakers: 83,
        n_heldout: 3,
        utts_per_speaker: 200,
        variants: 8,
        ..ToyCorpusSpec::default()
    };
    let corpus = gen_toy_corpus(&spec).unwrap();
    let texts: Vec<&str> = corpus.records.iter().map(|r| r.text.as_str()).collect();
    let cfg = ModelConfig::desk();
    let vocab = bpe_train(&texts, cfg.text_vocab).unwrap();
    let examples = encode_corpus(&vocab, &corpus.train_records(), cfg.audio_vocab).unwrap();
    let tc = TrainConfig {
        peak_lr: 3e-3,
        warmup_steps: 250,
        total_steps: 5000,
        batch_token_budget: 1024,
        ..TrainConfig::default()
    };
    let mut model = Model::new(cfg.clone(), 0).unwrap();
    let t0 = Instant::now();
    train(&mut model, &examples, &tc, &TrainOutputs::default()).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let splits = corpus
        .heldout_speakers
        .iter()
        .map(|h| {
            let mut ex = encode_corpus(&vocab, &corpus.records_of(h), cfg.audio_vocab).unwrap();
            let test = ex.split_off(TUNE_UTTS);
            SpeakerSplit {
                name: h.clone(),
                train: ex,
                test,
            }
        })
        .collect();
    Adapted {
        model,
        splits,
        train_secs,
    }
}

fn toy_adaptation(a: &Adapted) -> Outcome {
    let cfg = IstConfig::default();
    let mut ok = a.train_secs <= 1800.0;
    let mut parts = vec![format!("training {:.0}s", a.train_secs)];
    for s in &a.splits {
        let zero = per_token_loss(&a.model, &s.test, None).unwrap();
        let t0 = Instant::now();
        let out = ist_tune(&a.model, &s.train, None, &cfg).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let tuned = per_token_loss(&a.model, &s.test, Some(&out.bundle)).unwrap();
        let gain = 1.0 - tuned / zero;
        ok &= gain >= 0.10 && secs <= 60.0;
        parts.push(format!(
            "{} {zero:.3} -> {tuned:.3} ({:.1}%, {secs:.1}s)",
            s.name,
            100.0 * gain
        ));
    }
    (ok, parts.join("; "))
}

fn rank_sweep_shape(a: &Adapted) -> Outcome {
    let ranks = [
        StateRank::Factored(1),
        StateRank::Factored(2),
        StateRank::Factored(4),
        StateRank::Full,
    ];
    let cells = rank_sweep(&a.model, &a.splits, &ranks, &[0.01, 0.1], &IstConfig::default()).unwrap();
    let (low, best) = low_rank_vs_best(&cells, 2).unwrap();
    let gap = low.mean_best_test_loss / best.mean_best_test_loss - 1.0;
    (
        gap <= 0.05,
        format!(
            "best r<=2 {} lr {} loss {:.4}; best {} lr {} loss {:.4}; gap {:.2}%",
            low.rank,
            low.lr,
            low.mean_best_test_loss,
            best.rank,
            best.lr,
            best.mean_best_test_loss,
            100.0 * gap
        ),
    )
}

fn throughput_shape() -> Outcome {
    let res = throughput_bench(&BenchConfig::default(), &[1, 4, 16, 64], 1024).unwrap();
    let ratios = throughput_ratios(&res);
    let monotone = ratios.windows(2).all(|w| w[1].1 >= w[0].1);
    let mut flat = true;
    let mut grows = true;
    let mut drift = Vec::new();
    for r in &res {
        let f = r.step_time_late / r.step_time_early;
        match r.attention_kind {
            AttentionKind::Gla => flat &= (f - 1.0).abs() <= 0.20,
            AttentionKind::Softmax => grows &= f >= 2.0,
        }
        drift.push(format!("{}@{} x{f:.2}", r.attention_kind.name(), r.batch_size));
    }
    let ratio_text = ratios
        .iter()
        .map(|(b, x)| format!("{b}:{x:.2}"))
        .collect::<Vec<_>>()
        .join(" ");
    (
        monotone && flat && grows,
        format!(
            "ratios {ratio_text}; monotone {monotone}, gla flat {flat}, softmax grows {grows}; t1000/t100 {}",
            drift.join(" ")
        ),
    )
}

fn training_recipe() -> Outcome {
    let mut cfg = ModelConfig::tiny();
    cfg.audio_vocab = 10;
    let mut model = Model::new(cfg.clone(), 9).unwrap();
    let record = vec![Example {
        text_ids: vec![1, 5, 2, 7, 3],
        audio_ids: vec![4, 4, 1, 8, 0, 6, 2, 9, 3, 5],
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
    let final_loss = rep.steps.last().unwrap().loss;
    let memorized = final_loss < 0.05;

    let sched = TrainConfig::default();
    let at_peak = lr_at(1000, &sched) == 2e-4;
    let max_jump = (1..sched.total_steps)
        .map(|s| (lr_at(s + 1, &sched) - lr_at(s, &sched)).abs())
        .fold(0.0, f64::max);
    let continuous = max_jump <= 2e-4 / 1000.0 + 1e-18;

    let mut r = rng(10);
    let mut clipped = true;
    for _ in 0..1000 {
        let scale = 10f64.powf(r.gen_range(-3.0..3.0));
        let mut a: Vec<f64> = (0..7).map(|_| r.gen_range(-1.0..1.0) * scale).collect();
        let mut b: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0) * scale).collect();
        clip_gradients(&mut [&mut a, &mut b], 1.0);
        let norm = a.iter().chain(&b).map(|x| x * x).sum::<f64>().sqrt();
        clipped &= norm <= 1.0 + 1e-12;
    }

    let lengths: Vec<usize> = (0..400)
        .map(|i| if i % 2 == 0 { r.gen_range(8..16) } else { r.gen_range(90..120) })
        .collect();
    let bucketed = padding_fraction(&bucket_batches(&lengths, 10, 512, 1).unwrap(), &lengths);
    let plain = padding_fraction(&unbucketed_batches(&lengths, 512, 1).unwrap(), &lengths);
    let less_padding = bucketed < plain;
    (
        memorized && at_peak && continuous && clipped && less_padding,
        format!(
            "overfit loss {final_loss:.4} (< 0.05); lr(1000) = 2e-4 {at_peak}, max step change {max_jump:.2e}; \
             clipped norms <= 1 {clipped}; padding {bucketed:.3} vs {plain:.3}"
        ),
    )
}

fn sampler() -> Outcome {
    let logits = [0.1, 1.7, -0.4, 1.2, 2.2, 0.9, -2.0];
    let mut r = rng(11);
    let argmax = (0..100).all(|_| sample_top_k(&logits, 1, 1.0, &mut r).unwrap() == 4);
    let (k, draws) = (3, 100_000);
    let top = [4usize, 1, 3];
    let w: Vec<f64> = top.iter().map(|&i| f64::exp(logits[i])).collect();
    let z: f64 = w.iter().sum();
    let mut counts = [0usize; 7];
    for _ in 0..draws {
        counts[sample_top_k(&logits, k, 1.0, &mut r).unwrap()] += 1;
    }
    let mut within = counts.iter().enumerate().all(|(i, &c)| top.contains(&i) || c == 0);
    let mut worst = 0.0f64;
    for (j, &i) in top.iter().enumerate() {
        let p = w[j] / z;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        let dev = (counts[i] as f64 - draws as f64 * p).abs() / sigma;
        worst = worst.max(dev);
        within &= dev < 3.0;
    }
    (
        argmax && within,
        format!("k=1 is argmax {argmax}; largest deviation {worst:.2} sigma (< 3)"),
    )
}

fn param_count() -> Outcome {
    let n = ModelConfig::paper().param_count() as f64;
    let rel = n / 169e6 - 1.0;
    (
        rel.abs() <= 0.05,
        format!("{:.1}M parameters, {:+.2}% from 169M", n / 1e6, 100.0 * rel),
    )
}

fn tokenizer() -> Outcome {
    let corpus = gen_toy_corpus(&ToyCorpusSpec::default()).unwrap();
    let texts: Vec<&str> = corpus.records.iter().map(|r| r.text.as_str()).collect();
    let a = bpe_train(&texts, 256).unwrap();
    let b = bpe_train(&texts, 256).unwrap();
    let identical = a.to_file_string() == b.to_file_string();
    let round_trip = texts
        .iter()
        .all(|t| a.decode(&a.encode(t).unwrap()).unwrap() == *t);
    (
        identical && round_trip,
        format!(
            "{} lines round-trip {round_trip}; vocab files identical {identical}",
            texts.len()
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |o| o.contains(&i));
    let mut failed = Vec::new();
    let mut report = |i: usize, name: &str, soft: bool, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(i) {
            return;
        }
        let t0 = Instant::now();
        let (ok, detail) = f();
        let verdict = match (ok, soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        println!(
            "criterion {i:>2} {name}: {verdict} ({:.1}s) {detail}",
            t0.elapsed().as_secs_f64()
        );
        if !ok && !soft {
            failed.push(i);
        }
    };
    report(1, "form equivalence", false, &mut gla_forms);
    report(2, "softmax oracle", false, &mut softmax_oracle);
    report(3, "gradients", false, &mut gradients);
    report(4, "causality and continuation", false, &mut causality_and_continuation);
    report(5, "zero-state identity", false, &mut zero_state_identity);
    let adapted = (wanted(6) || wanted(7)).then(train_toy);
    if let Some(a) = &adapted {
        report(6, "toy adaptation", false, &mut || toy_adaptation(a));
        report(7, "rank sweep shape", true, &mut || rank_sweep_shape(a));
    }
    report(8, "throughput shape", false, &mut throughput_shape);
    report(9, "training recipe", false, &mut training_recipe);
    report(10, "sampler", false, &mut sampler);
    report(11, "parameter count", false, &mut param_count);
    report(12, "tokenizer", false, &mut tokenizer);
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
