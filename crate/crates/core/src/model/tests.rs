use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{conv_pos_embed, cross_attend, rope_apply, swiglu_ffn, Mode};
use super::*;
use crate::gradcheck::grad_check_many;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn tiny() -> Model {
    Model::new(ModelConfig::tiny(), 11).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn allocated_size_matches_formula() {
    for cfg in [ModelConfig::tiny(), ModelConfig::desk()] {
        let m = Model::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.params().numel(), cfg.param_count());
    }
}

#[test]
fn rope_is_a_relative_rotation() {
    let mut r = rng(1);
    let x = Tensor::randn([1, 8], 1.0, &mut r);
    assert_eq!(rope_apply(&x, &[0]).unwrap(), x);
    let q = Tensor::randn([1, 8], 1.0, &mut r);
    let k = Tensor::randn([1, 8], 1.0, &mut r);
    let dot = |m: usize, n: usize| {
        let a = rope_apply(&q, &[m]).unwrap();
        let b = rope_apply(&k, &[n]).unwrap();
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
    };
    for (m, n) in [(5, 2), (13, 10), (103, 100)] {
        assert!((dot(m, n) - dot(3, 0)).abs() < 1e-10);
    }
    let many = Tensor::randn([6, 8], 1.0, &mut r);
    let rot = rope_apply(&many, &[0, 1, 2, 3, 40, 500]).unwrap();
    for t in 0..6 {
        let n0: f64 = many.row(t).iter().map(|v| v * v).sum();
        let n1: f64 = rot.row(t).iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-12);
    }
    assert!(rope_apply(&Tensor::zeros([2, 3]), &[0, 1]).is_err());
}

#[test]
fn swiglu_zero_input_and_gradient() {
    let mut r = rng(2);
    let ws: Vec<Tensor> = vec![
        Tensor::randn([4, 6], 0.5, &mut r),
        Tensor::randn([4, 6], 0.5, &mut r),
        Tensor::randn([6, 4], 0.5, &mut r),
    ];
    let y = swiglu_ffn(&Tensor::zeros([3, 4]), &ws[0], &ws[1], &ws[2]).unwrap();
    assert_eq!(y.max_abs(), 0.0);
    let x = Tensor::randn([3, 4], 1.0, &mut r);
    let mut all = vec![x];
    all.extend(ws);
    let err = grad_check_many(
        |t, v| {
            let y = super::layers::swiglu_var(t, v[0], v[1], v[2], v[3])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        },
        &all,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn conv_embedding_properties() {
    let mut r = rng(3);
    let x = Tensor::randn([7, 4], 1.0, &mut r);
    assert_eq!(conv_pos_embed(&x, &Tensor::zeros([3, 4]), true).unwrap(), x);
    let w = Tensor::randn([3, 4], 1.0, &mut r);
    let base = conv_pos_embed(&x, &w, true).unwrap();
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[4 * 4..] {
        *v += 1.0;
    }
    let pert = conv_pos_embed(&x2, &w, true).unwrap();
    assert_eq!(&base.data()[..16], &pert.data()[..16]);
    assert_ne!(&base.data()[16..], &pert.data()[16..]);
}

#[test]
fn cross_attention_properties() {
    let mut r = rng(4);
    let d = 8;
    let w = |r: &mut ChaCha8Rng| Tensor::randn([d, d], 0.4, r);
    let (wq, wk, wv, wo) = (w(&mut r), w(&mut r), w(&mut r), w(&mut r));
    let conv_q = Tensor::randn([3, d], 0.3, &mut r);
    let conv_kv = Tensor::randn([3, d], 0.3, &mut r);
    let audio = Tensor::randn([5, d], 1.0, &mut r);
    let text = Tensor::randn([4, d], 1.0, &mut r);
    let (_, weights) = cross_attend(&audio, &text, &conv_q, &conv_kv, &wq, &wk, &wv, &wo, 2).unwrap();
    for wt in &weights {
        for i in 0..5 {
            assert!((wt.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    // One text state: every audio step receives its value projection.
    let one = Tensor::randn([1, d], 1.0, &mut r);
    let (out, _) = cross_attend(&audio, &one, &conv_q, &conv_kv, &wq, &wk, &wv, &wo, 2).unwrap();
    let t = conv_pos_embed(&one, &conv_kv, false).unwrap();
    let want = t.matmul(&wv).unwrap().matmul(&wo).unwrap();
    for i in 0..5 {
        for j in 0..d {
            assert!((out.at2(i, j) - want.at2(0, j)).abs() < 1e-12);
        }
    }
    // Zero key projection: uniform weights, output is the mean value.
    let zk = Tensor::zeros([d, d]);
    let (out, _) = cross_attend(&audio, &text, &conv_q, &conv_kv, &wq, &zk, &wv, &wo, 2).unwrap();
    let tv = conv_pos_embed(&text, &conv_kv, false).unwrap().matmul(&wv).unwrap();
    let mut mean = vec![0.0; d];
    for i in 0..4 {
        for j in 0..d {
            mean[j] += tv.at2(i, j) / 4.0;
        }
    }
    let want = Tensor::new([1, d], mean).unwrap().matmul(&wo).unwrap();
    for i in 0..5 {
        for j in 0..d {
            assert!((out.at2(i, j) - want.at2(0, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn text_encoder_modes() {
    let m = tiny();
    let ids = [1, 5, 3, 7, 2];
    assert_eq!(m.text_encode(&ids).unwrap(), m.text_encode(&ids).unwrap());
    assert!(m.text_encode(&[]).is_err());
    assert!(m.text_encode(&[99]).is_err());

    // Without rotary embedding the encoder is permutation equivariant.
    let perm = [3, 0, 4, 1, 2];
    let enc = |ids: &[usize]| {
        let mut tape = Tape::new();
        let b = m.params().bind(&mut tape, false);
        let h = m.text_encode_inner(&mut tape, &b, ids, &mut Mode::Eval, false).unwrap();
        tape.tensor(h)
    };
    let a = enc(&ids);
    let p: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
    let bp = enc(&p);
    for (row, &src) in perm.iter().enumerate() {
        for (x, y) in bp.row(row).iter().zip(a.row(src)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    let mut r = rng(5);
    let outs: Vec<Tensor> = (0..10)
        .map(|_| {
            let mut tape = Tape::new();
            let b = m.params().bind(&mut tape, false);
            let h = m.text_encode_var(&mut tape, &b, &ids, &mut Mode::Train(&mut r)).unwrap();
            tape.tensor(h)
        })
        .collect();
    let distinct = outs.windows(2).filter(|w| w[0] != w[1]).count();
    assert!(distinct >= 8, "dropout changed only {distinct} of 9 consecutive pairs");
}

#[test]
fn logits_are_causal_bitwise() {
    let m = tiny();
    let text = [1, 2, 3, 4];
    let audio = [0, 4, 2, 9, 7, 1, 3];
    let base = m.forward(&text, &audio, None).unwrap();
    assert_eq!(base.shape(), [audio.len() + 1, m.config().audio_vocab + 1]);
    assert!(base.is_finite());
    let width = base.shape()[1];
    for t in 0..audio.len() {
        let mut pert = audio;
        for v in &mut pert[t..] {
            *v = (*v + 3) % m.config().audio_vocab;
        }
        let out = m.forward(&text, &pert, None).unwrap();
        // Row t sees inputs up to audio[t-1].
        assert_eq!(&base.data()[..(t + 1) * width], &out.data()[..(t + 1) * width]);
        assert_ne!(&base.data()[(t + 1) * width..], &out.data()[(t + 1) * width..]);
    }
}

#[test]
fn every_text_position_reaches_every_audio_row() {
    let mut m = tiny();
    // Give the conv kernels weight so positions are visible.
    let mut r = rng(6);
    for name in ["cross.0.conv_q", "cross.0.conv_kv"] {
        let id = m.params().id(name).unwrap();
        let shape = m.params().get(id).shape().to_vec();
        *m.params_mut().get_mut(id) = Tensor::randn(shape, 0.3, &mut r);
    }
    let text = [1, 2, 3, 4, 5];
    let audio = [3, 1, 4];
    let base = m.forward(&text, &audio, None).unwrap();
    for t in 0..text.len() {
        let mut pert = text;
        pert[t] = (pert[t] + 1) % m.config().text_vocab;
        let out = m.forward(&pert, &audio, None).unwrap();
        for row in 0..=audio.len() {
            assert_ne!(base.row(row), out.row(row), "text {t} did not reach row {row}");
        }
    }
}

#[test]
fn zero_bundle_equals_no_bundle() {
    let m = tiny();
    let cfg = m.config().clone();
    let text = [1, 2, 3];
    let audio = [5, 6, 1, 0];
    let none = m.forward(&text, &audio, None).unwrap();
    let full = m.forward(&text, &audio, Some(&StateBundle::zeros(&cfg))).unwrap();
    assert_eq!(none, full);
    let mut r = rng(7);
    let mut fact = StateBundle::random_factored(&cfg, 1, 0.02, &mut r).unwrap();
    fact.tensors_mut().into_iter().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    assert_eq!(none, m.forward(&text, &audio, Some(&fact)).unwrap());
    let mut wrong = ModelConfig::tiny();
    wrong.n_dec_blocks = 2;
    assert!(m.forward(&text, &audio, Some(&StateBundle::zeros(&wrong))).is_err());
}

#[test]
fn chunked_consumption_matches_one_shot() {
    let m = tiny();
    let mut r = rng(8);
    let states = StateBundle::random_factored(m.config(), 2, 0.3, &mut r).unwrap();
    let text = [4, 2, 8];
    let audio = [1, 5, 9, 3, 3, 0, 2];
    let (logits, one_shot) = m.forward_with_states(&text, &audio, Some(&states)).unwrap();

    let ctx = m.text_context(&text).unwrap();
    let mut st = m.initial_state(Some(&states)).unwrap();
    let mut inputs = vec![m.config().audio_vocab];
    inputs.extend_from_slice(&audio);
    let mut rows = Vec::new();
    for chunk in [&inputs[..1], &inputs[1..4], &inputs[4..5], &inputs[5..]] {
        rows.extend(m.forward_chunk(&ctx, chunk, &mut st).unwrap().into_data());
    }
    assert_eq!(st, one_shot);
    assert_eq!(rows, logits.data());

    let g = m
        .generate(
            &text,
            &audio,
            Some(&states),
            SamplingOptions {
                top_k: 1,
                temperature: 1.0,
                max_len: 5,
            },
            &mut r,
        )
        .unwrap();
    assert_eq!(g.prompt_state, one_shot);
}

#[test]
fn greedy_generation_is_deterministic() {
    let m = tiny();
    let opts = SamplingOptions {
        top_k: 1,
        temperature: 1.0,
        max_len: 12,
    };
    let a = m.generate(&[1, 2], &[], None, opts, &mut rng(1)).unwrap();
    let b = m.generate(&[1, 2], &[], None, opts, &mut rng(2)).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert!(a.tokens.len() <= 12);
    assert_eq!(a.hit_max_len, a.tokens.len() == 12);
    assert!(!a.tokens.ends_with_eos());
}

#[test]
fn sampler_statistics() {
    let logits = [0.3, 2.0, -1.0, 1.5, 1.9, -0.2];
    assert_eq!(sample_top_k(&logits, 1, 1.0, &mut rng(0)).unwrap(), 1);
    assert!(sample_top_k(&logits, 0, 1.0, &mut rng(0)).is_err());
    assert!(sample_top_k(&logits, 2, 0.0, &mut rng(0)).is_err());

    let k = 3;
    let temp = 0.7;
    let top = [1usize, 4, 3];
    let w: Vec<f64> = top.iter().map(|&i| (logits[i] / temp).exp()).collect();
    let z: f64 = w.iter().sum();
    let draws = 100_000;
    let mut counts = [0usize; 6];
    let mut r = rng(9);
    for _ in 0..draws {
        counts[sample_top_k(&logits, k, temp, &mut r).unwrap()] += 1;
    }
    for (j, &i) in top.iter().enumerate() {
        let p = w[j] / z;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[i] as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{i}: {counts:?}");
    }
    assert_eq!(counts[0] + counts[2] + counts[5], 0);

    // k beyond the vocabulary is plain tempered sampling.
    let mut a = rng(10);
    let mut b = rng(10);
    for _ in 0..100 {
        assert_eq!(
            sample_top_k(&logits, 6, temp, &mut a).unwrap(),
            sample_top_k(&logits, 600, temp, &mut b).unwrap()
        );
    }
}

/// Full-model gradient against finite differences on a handful of
/// parameters that touch every stage.
#[test]
fn full_model_gradient() {
    let m = tiny();
    let text = [1, 3, 5];
    let audio = [2, 7, 1, 4, 8];
    let targets: Vec<usize> = audio.iter().copied().chain([m.config().eos_id()]).collect();
    let names = [
        "text.0.wq",
        "enc.0.wk",
        "enc.0.gate_up",
        "cross.0.wv",
        "cross.0.conv_q",
        "dec.0.wo",
        "dec.0.gate_bias",
        "head.0.weight",
    ];
    let picked: Vec<Tensor> = names.iter().map(|n| m.params().by_name(n).unwrap().clone()).collect();
    let err = grad_check_many(
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
    assert!(err < 1e-4, "{err}");
}
