//! Initial-state tuning: fit the per-layer, per-head initial recurrent
//! states of a frozen model to a small speaker or style corpus.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{ensure, Error, Result};
use crate::kv_config;
use crate::model::checkpoint::{decode_container, encode_container, model_hash, write_atomic, BUNDLE_MAGIC};
use crate::model::{HeadState, Mode, Model, ModelConfig, Stack, StateBundle, StateRank};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{per_token_loss, AdamW, Example};

/// Standard deviation of the factors of a fresh factored bundle.
pub const INIT_SIGMA: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IstConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_utterances: usize,
    pub max_steps: usize,
    pub rank: StateRank,
    pub seed: u64,
}

kv_config!(IstConfig {
    lr,
    epochs,
    batch_utterances,
    max_steps,
    rank,
    seed,
});

impl Default for IstConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 2,
            batch_utterances: 8,
            max_steps: 40,
            rank: StateRank::Factored(1),
            seed: 0,
        }
    }
}

impl IstConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        ensure!(self.lr.is_finite() && self.lr >= 0.0, "state tuning lr must be finite and >= 0");
        ensure!(
            self.epochs >= 1 && self.batch_utterances >= 1,
            "epochs and batch size must be positive"
        );
        if let StateRank::Factored(r) = self.rank {
            let cap = model.d_k.min(model.d_v);
            ensure!(r >= 1 && r <= cap, "state rank {r} outside [1, min(d_k, d_v) = {cap}]");
        }
        Ok(())
    }

    /// `min(epochs * ceil(n / batch), max_steps)`.
    pub fn n_steps(&self, n_utterances: usize) -> usize {
        (self.epochs * n_utterances.div_ceil(self.batch_utterances)).min(self.max_steps)
    }
}

/// Starting bundle: exact zeros for full rank, small gaussian factors
/// otherwise.
pub fn init_states(cfg: &IstConfig, model: &ModelConfig) -> Result<StateBundle> {
    cfg.validate(model)?;
    match cfg.rank {
        StateRank::Full => Ok(StateBundle::zeros(model)),
        StateRank::Factored(r) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            StateBundle::random_factored(model, r, INIT_SIGMA, &mut rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IstOutcome {
    /// The returned bundle: best on the test split if one was given,
    /// otherwise the last.
    pub bundle: StateBundle,
    /// Training batch loss of every optimizer step.
    pub train_losses: Vec<f64>,
    /// Test loss before tuning and after every step; empty without a test
    /// split.
    pub test_losses: Vec<f64>,
    /// Number of optimizer steps after which `bundle` was taken.
    pub best_step: usize,
}

impl IstOutcome {
    pub fn best_test_loss(&self) -> Option<f64> {
        self.test_losses.get(self.best_step).copied()
    }
}

/// Gradient of the per-token batch loss with respect to the bundle,
/// written into the bundle's gradient slots. Returns the loss.
fn state_gradient(model: &Model, bundle: &mut StateBundle, examples: &[&Example]) -> Result<f64> {
    let eos = model.config().eos_id();
    let total: usize = examples.iter().map(|e| e.audio_ids.len() + 1).sum();
    bundle.tensors_mut().into_iter().for_each(Tensor::clear_grad);
    let mut loss = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape, false);
        let sv = bundle.bind(&mut tape, true)?;
        let out = model.forward_var(&mut tape, &b, &ex.text_ids, &ex.audio_ids, &sv, &mut Mode::Eval)?;
        let targets = ex.targets(eos);
        let ce = tape.cross_entropy(out.logits, &targets)?;
        let weighted = tape.scale(ce, targets.len() as f64 / total as f64)?;
        loss += tape.scalar(weighted);
        tape.backward(weighted)?;
        for (t, &v) in bundle.tensors_mut().into_iter().zip(&sv.leaves) {
            tape.accumulate_into(v, t)?;
        }
    }
    Ok(loss)
}

/// Tunes a bundle on `train` with AdamW (no weight decay). The model is
/// only read; its parameter hash is checked before and after.
pub fn ist_tune(model: &Model, train: &[Example], test: Option<&[Example]>, cfg: &IstConfig) -> Result<IstOutcome> {
    ensure!(!train.is_empty(), "state tuning needs at least one utterance");
    if let Some(t) = test {
        ensure!(!t.is_empty(), "empty test split");
    }
    let hash_before = model_hash(model);
    let mut bundle = init_states(cfg, model.config())?;
    let decay = vec![false; bundle.tensors().len()];
    let mut opt = AdamW::new(bundle.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let n_steps = cfg.n_steps(train.len());

    let mut test_losses = Vec::new();
    let mut best = (bundle.clone(), 0usize, f64::INFINITY);
    if let Some(t) = test {
        let l = per_token_loss(model, t, Some(&bundle))?;
        test_losses.push(l);
        best.2 = l;
    }
    let mut order: Vec<usize> = Vec::new();
    let mut train_losses = Vec::with_capacity(n_steps);
    for step in 1..=n_steps {
        if order.is_empty() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let take = cfg.batch_utterances.min(order.len());
        let batch: Vec<&Example> = order.split_off(order.len() - take).iter().rev().map(|&i| &train[i]).collect();
        let loss = state_gradient(model, &mut bundle, &batch)?;
        if !loss.is_finite() {
            return Err(Error::numeric("ist_tune", format!("loss {loss} at step {step}")));
        }
        opt.step(&mut bundle.tensors_mut(), &decay, cfg.lr, 0.0)?;
        train_losses.push(loss);
        if let Some(t) = test {
            let l = per_token_loss(model, t, Some(&bundle))?;
            test_losses.push(l);
            if l < best.2 {
                best = (bundle.clone(), step, l);
            }
        }
    }
    if model_hash(model) != hash_before {
        return Err(Error::Invariant("model weights changed during state tuning".into()));
    }
    let (mut bundle, best_step) = if test.is_some() { (best.0, best.1) } else { (bundle, n_steps) };
    bundle.tensors_mut().into_iter().for_each(Tensor::clear_grad);
    Ok(IstOutcome {
        bundle,
        train_losses,
        test_losses,
        best_step,
    })
}

/// One speaker's tuning and evaluation split.
#[derive(Clone, Debug)]
pub struct SpeakerSplit {
    pub name: String,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub rank: StateRank,
    pub lr: f64,
    /// Mean over speakers of the best test loss.
    pub mean_best_test_loss: f64,
    pub per_speaker: Vec<f64>,
}

/// Tunes every speaker at every `(rank, lr)` and averages the best test
/// losses. Other settings come from `base`.
pub fn rank_sweep(
    model: &Model,
    speakers: &[SpeakerSplit],
    ranks: &[StateRank],
    lrs: &[f64],
    base: &IstConfig,
) -> Result<Vec<SweepCell>> {
    ensure!(speakers.len() >= 2, "a sweep needs at least two speakers, got {}", speakers.len());
    ensure!(!ranks.is_empty() && !lrs.is_empty(), "empty sweep grid");
    let mut cells = Vec::with_capacity(ranks.len() * lrs.len());
    for &rank in ranks {
        for &lr in lrs {
            let cfg = IstConfig { rank, lr, ..base.clone() };
            let per_speaker = speakers
                .iter()
                .map(|s| {
                    let out = ist_tune(model, &s.train, Some(&s.test), &cfg)?;
                    Ok(out.best_test_loss().expect("test split given"))
                })
                .collect::<Result<Vec<f64>>>()?;
            cells.push(SweepCell {
                rank,
                lr,
                mean_best_test_loss: per_speaker.iter().sum::<f64>() / per_speaker.len() as f64,
                per_speaker,
            });
        }
    }
    Ok(cells)
}

/// CSV `rank,lr,mean_best_test_loss`.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("rank,lr,mean_best_test_loss\n");
    for c in cells {
        s.push_str(&format!("{},{:?},{:?}\n", c.rank, c.lr, c.mean_best_test_loss));
    }
    s
}

/// The best cell with rank at most `max_rank` (full rank never qualifies)
/// and the best cell overall.
pub fn low_rank_vs_best(cells: &[SweepCell], max_rank: usize) -> Option<(&SweepCell, &SweepCell)> {
    let by_loss = |a: &&SweepCell, b: &&SweepCell| a.mean_best_test_loss.total_cmp(&b.mean_best_test_loss);
    let best = cells.iter().min_by(by_loss)?;
    let low = cells
        .iter()
        .filter(|c| matches!(c.rank, StateRank::Factored(r) if r <= max_rank))
        .min_by(by_loss)?;
    Some((low, best))
}

/// Serializes a bundle bound to the checkpoint with hash `checkpoint_hash`.
pub fn bundle_bytes(bundle: &StateBundle, checkpoint_hash: &str) -> Result<Vec<u8>> {
    let names = bundle.tensor_names();
    let tensors: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(bundle.tensors()).collect();
    let heads = |s: Stack| bundle.layers(s).iter().map(Vec::len).collect::<Vec<_>>();
    let (d_k, d_v) = bundle_dims(bundle);
    let manifest = json!({
        "kind": "state_bundle",
        "checkpoint_hash": checkpoint_hash,
        "rank": bundle.rank().to_string(),
        "d_k": d_k,
        "d_v": d_v,
        "layers": { "enc": heads(Stack::Encoder), "dec": heads(Stack::Decoder) },
    });
    encode_container(BUNDLE_MAGIC, manifest, &tensors)
}

fn bundle_dims(bundle: &StateBundle) -> (usize, usize) {
    match bundle.iter_heads().next().map(|(_, _, _, h)| h) {
        Some(HeadState::Full(s)) => (s.shape()[0], s.shape()[1]),
        Some(HeadState::Factored { u, w }) => (u.shape()[1], w.shape()[1]),
        None => (0, 0),
    }
}

pub fn save_bundle(bundle: &StateBundle, model: &Model, path: impl AsRef<Path>) -> Result<()> {
    bundle.check(model.config())?;
    write_atomic(path.as_ref(), &bundle_bytes(bundle, &model_hash(model))?)
}

/// Parses a bundle, rejecting it unless it was tuned for `model`.
pub fn load_bundle_bytes(bytes: &[u8], model: &Model) -> Result<StateBundle> {
    let (manifest, tensors) = decode_container(BUNDLE_MAGIC, bytes)?;
    let field = |k: &str| manifest.get(k).ok_or_else(|| Error::format(format!("bundle manifest lacks {k}")));
    let hash = field("checkpoint_hash")?.as_str().unwrap_or_default();
    let want = model_hash(model);
    ensure!(
        hash == want,
        "state bundle was tuned for checkpoint {hash}, loaded model is {want}"
    );
    let rank: StateRank = field("rank")?
        .as_str()
        .ok_or_else(|| Error::format("bundle rank is not a string"))?
        .parse()?;
    let cfg = model.config();
    let mut it = tensors.into_iter();
    let mut next = |expect: String| -> Result<Tensor> {
        match it.next() {
            Some((name, t)) if name == expect => Ok(t),
            Some((name, _)) => Err(Error::format(format!("bundle tensor {name}, expected {expect}"))),
            None => Err(Error::format(format!("bundle is missing {expect}"))),
        }
    };
    let mut stack = |s: Stack, n_layers: usize| -> Result<Vec<Vec<HeadState>>> {
        (0..n_layers)
            .map(|l| {
                (0..cfg.n_heads)
                    .map(|h| {
                        let base = format!("state.{}.{l}.{h}", s.prefix());
                        Ok(match rank {
                            StateRank::Full => HeadState::Full(next(format!("{base}.s"))?),
                            StateRank::Factored(_) => HeadState::Factored {
                                u: next(format!("{base}.u"))?,
                                w: next(format!("{base}.w"))?,
                            },
                        })
                    })
                    .collect()
            })
            .collect()
    };
    let enc = stack(Stack::Encoder, cfg.n_audio_enc_blocks)?;
    let dec = stack(Stack::Decoder, cfg.n_dec_blocks)?;
    ensure!(it.next().is_none(), "bundle holds more tensors than the model has heads");
    StateBundle::from_layers(rank, cfg.d_k, cfg.d_v, enc, dec)
}

pub fn load_bundle(path: impl AsRef<Path>, model: &Model) -> Result<StateBundle> {
    load_bundle_bytes(&std::fs::read(path)?, model)
}
