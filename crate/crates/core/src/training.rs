//! Next-token training: corpus records, loss, AdamW, the warmup-cosine
//! schedule, global-norm clipping, length bucketing and the training loop.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::kv_config;
use crate::model::checkpoint::save_checkpoint;
use crate::model::{Mode, Model, StateBundle, StateVars};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::BpeVocab;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_token_budget: usize,
    pub n_buckets: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

kv_config!(TrainConfig {
    peak_lr,
    warmup_steps,
    total_steps,
    weight_decay,
    clip_norm,
    batch_token_budget,
    n_buckets,
    seed,
    checkpoint_every,
});

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-4,
            warmup_steps: 1000,
            total_steps: 10_000,
            weight_decay: 0.1,
            clip_norm: 1.0,
            batch_token_budget: 4096,
            n_buckets: 10,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale recipe values.
    pub fn paper() -> Self {
        Self {
            total_steps: 500_000,
            batch_token_budget: 100_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.warmup_steps < self.total_steps,
            "warmup_steps ({}) must be below total_steps ({})",
            self.warmup_steps,
            self.total_steps
        );
        ensure!(
            self.peak_lr > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0,
            "learning rate and clip norm must be positive, weight decay non-negative"
        );
        ensure!(
            self.batch_token_budget > 0 && self.n_buckets > 0,
            "token budget and bucket count must be positive"
        );
        Ok(())
    }
}

// ── corpus ──────────────────────────────────────────────────────────

/// One utterance. Serialized as `{"text", "audio", "speaker", "style"}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    #[serde(rename = "audio")]
    pub audio_ids: Vec<usize>,
    #[serde(rename = "speaker")]
    pub speaker_id: String,
    #[serde(rename = "style")]
    pub style_id: Option<String>,
}

impl CorpusRecord {
    pub fn validate(&self, audio_vocab: usize) -> Result<()> {
        ensure!(!self.audio_ids.is_empty(), "record of speaker {} has no audio", self.speaker_id);
        if let Some(&bad) = self.audio_ids.iter().find(|&&i| i >= audio_vocab) {
            return Err(Error::contract(format!(
                "record of speaker {} has audio id {bad} outside codebook of {audio_vocab}",
                self.speaker_id
            )));
        }
        Ok(())
    }
}

pub fn corpus_to_jsonl(records: &[CorpusRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (no, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("corpus line {}: {e}", no + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// A record with its text tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub text_ids: Vec<usize>,
    pub audio_ids: Vec<usize>,
}

impl Example {
    /// Text plus audio tokens, the unit of the batch budget.
    pub fn len(&self) -> usize {
        self.text_ids.len() + self.audio_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Audio targets followed by EOS.
    pub fn targets(&self, eos: usize) -> Vec<usize> {
        let mut t = self.audio_ids.clone();
        t.push(eos);
        t
    }
}

pub fn encode_corpus(vocab: &BpeVocab, records: &[CorpusRecord], audio_vocab: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            r.validate(audio_vocab)?;
            let text = vocab.encode(&r.text)?;
            ensure!(!text.is_empty(), "record of speaker {} has empty text", r.speaker_id);
            Ok(Example {
                text_ids: text.into_ids(),
                audio_ids: r.audio_ids.clone(),
            })
        })
        .collect()
}

// ── loss ────────────────────────────────────────────────────────────

/// Mean over rows of `-log softmax(logits[t])[targets[t]]`.
pub fn cross_entropy_next_token(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let loss = tape.cross_entropy(l, targets)?;
    Ok(tape.scalar(loss))
}

/// Per-token mean loss over `examples` under optional initial states.
pub fn per_token_loss(model: &Model, examples: &[Example], states: Option<&StateBundle>) -> Result<f64> {
    ensure!(!examples.is_empty(), "loss over an empty set");
    let eos = model.config().eos_id();
    let (mut total, mut count) = (0.0, 0usize);
    for ex in examples {
        let logits = model.forward(&ex.text_ids, &ex.audio_ids, states)?;
        let t = ex.targets(eos);
        total += cross_entropy_next_token(&logits, &t)? * t.len() as f64;
        count += t.len();
    }
    Ok(total / count as f64)
}

// ── optimizer ───────────────────────────────────────────────────────

/// One AdamW update of a flat parameter slice. `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    ensure!(step >= 1, "AdamW step counter starts at 1");
    ensure!(
        params.len() == grads.len() && params.len() == m.len() && params.len() == v.len(),
        "AdamW buffers disagree in length"
    );
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric("adamw_step", format!("gradient {i} is {}", grads[i])));
    }
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        params[i] -= lr * weight_decay * params[i];
        params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// AdamW moments for a list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = tensors.into_iter().map(|t| vec![0.0; t.numel()]).collect();
        let v = m.clone();
        Self { m, v, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every tensor from its gradient slot (missing slots count as
    /// zero). `decay[i]` selects weight decay for tensor `i`.
    pub fn step(&mut self, tensors: &mut [&mut Tensor], decay: &[bool], lr: f64, weight_decay: f64) -> Result<()> {
        ensure!(
            tensors.len() == self.m.len() && decay.len() == tensors.len(),
            "optimizer built for {} tensors, given {}",
            self.m.len(),
            tensors.len()
        );
        for t in tensors.iter() {
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::numeric("adamw_step", format!("gradient {i} is {}", g[i])));
                }
            }
        }
        self.step += 1;
        for (i, t) in tensors.iter_mut().enumerate() {
            let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            let wd = if decay[i] { weight_decay } else { 0.0 };
            adamw_step(t.data_mut(), &g, &mut self.m[i], &mut self.v[i], self.step, lr, wd)?;
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

// ── batching ────────────────────────────────────────────────────────

/// Bucket of each length: boundaries sit at the length values of the
/// `i/n_buckets` quantiles, so equal lengths always share a bucket.
pub fn bucket_of(lengths: &[usize], n_buckets: usize) -> Vec<usize> {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mut bounds: Vec<usize> = (1..n_buckets).map(|i| sorted[i * n / n_buckets]).collect();
    bounds.dedup();
    lengths
        .iter()
        .map(|&l| bounds.iter().take_while(|&&b| b <= l).count())
        .collect()
}

fn pack(order: &[usize], lengths: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut max_len = 0;
    for &i in order {
        let m = max_len.max(lengths[i]);
        if !cur.is_empty() && m * (cur.len() + 1) > budget {
            batches.push(std::mem::take(&mut cur));
            max_len = 0;
        }
        max_len = max_len.max(lengths[i]);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn check_budget(lengths: &[usize], budget: usize) -> Result<()> {
    ensure!(!lengths.is_empty(), "cannot batch an empty corpus");
    if let Some(i) = lengths.iter().position(|&l| l > budget) {
        return Err(Error::contract(format!(
            "record {i} has {} tokens, above the batch budget of {budget}",
            lengths[i]
        )));
    }
    Ok(())
}

/// One epoch of batches: records are grouped into length buckets, shuffled
/// within each bucket, packed so that `max_len * count <= budget`, and the
/// batches are shuffled. Every record appears exactly once.
pub fn bucket_batches(
    lengths: &[usize],
    n_buckets: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    check_budget(lengths, budget)?;
    ensure!(n_buckets >= 1, "need at least one bucket");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let which = bucket_of(lengths, n_buckets);
    let mut batches = Vec::new();
    for b in 0..n_buckets {
        let mut members: Vec<usize> = (0..lengths.len()).filter(|&i| which[i] == b).collect();
        members.shuffle(&mut rng);
        batches.extend(pack(&members, lengths, budget));
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Baseline without buckets: a global shuffle packed under the same budget.
pub fn unbucketed_batches(lengths: &[usize], budget: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_budget(lengths, budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    Ok(pack(&order, lengths, budget))
}

/// Padded slots over allocated slots, with each batch padded to its
/// longest member.
pub fn padding_fraction(batches: &[Vec<usize>], lengths: &[usize]) -> f64 {
    let (mut pad, mut alloc) = (0usize, 0usize);
    for b in batches {
        let max = b.iter().map(|&i| lengths[i]).max().unwrap_or(0);
        alloc += max * b.len();
        pad += b.iter().map(|&i| max - lengths[i]).sum::<usize>();
    }
    if alloc == 0 {
        0.0
    } else {
        pad as f64 / alloc as f64
    }
}

// ── loop ────────────────────────────────────────────────────────────

/// Where the loop writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// CSV `step,loss,lr,tokens_seen`.
    pub metrics: Option<PathBuf>,
    /// Directory for `step_<n>.ckpt` files.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens_seen: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn batch_fingerprint(batch: &[usize]) -> String {
    let mut h = Sha256::new();
    for i in batch {
        h.update((*i as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Accumulates the gradient of the batch loss (sum over records of the
/// token-summed cross-entropy, divided by the batch's target-token count)
/// into the parameters' gradient slots and returns that loss.
pub fn batch_gradient(
    model: &mut Model,
    examples: &[Example],
    batch: &[usize],
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let eos = model.config().eos_id();
    let total_targets: usize = batch.iter().map(|&i| examples[i].audio_ids.len() + 1).sum();
    let mut loss = 0.0;
    for &i in batch {
        let ex = &examples[i];
        let mut tape = Tape::new();
        let b = model.params().bind(&mut tape, true);
        let sv = StateVars::zeros(&mut tape, model.config())?;
        let out = model.forward_var(&mut tape, &b, &ex.text_ids, &ex.audio_ids, &sv, &mut Mode::Train(dropout_rng))?;
        let targets = ex.targets(eos);
        let ce = tape.cross_entropy(out.logits, &targets)?;
        let weighted = tape.scale(ce, targets.len() as f64 / total_targets as f64)?;
        loss += tape.scalar(weighted);
        tape.backward(weighted)?;
        for (t, &v) in model.params_mut().tensors_mut().iter_mut().zip(b.vars()) {
            tape.accumulate_into(v, t)?;
        }
    }
    Ok(loss)
}

/// Runs the full loop. Deterministic given `cfg.seed` and the model's
/// initial parameters.
pub fn train(model: &mut Model, examples: &[Example], cfg: &TrainConfig, outputs: &TrainOutputs) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(!examples.is_empty(), "training corpus is empty");
    let lengths: Vec<usize> = examples.iter().map(Example::len).collect();
    check_budget(&lengths, cfg.batch_token_budget)?;

    let mut metrics = match &outputs.metrics {
        Some(p) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(f, "step,loss,lr,tokens_seen")?;
            Some(f)
        }
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    model.params_mut().set_requires_grad(true);
    let decay = model.params().decay_mask().to_vec();
    let mut opt = AdamW::new(model.params().tensors());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d409);
    let mut report = TrainReport::default();
    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut tokens_seen = 0usize;

    for step in 1..=cfg.total_steps {
        if queue.is_empty() {
            queue = bucket_batches(&lengths, cfg.n_buckets, cfg.batch_token_budget, cfg.seed.wrapping_add(epoch))?;
            queue.reverse();
            epoch += 1;
        }
        let batch = queue.pop().expect("refilled above");
        model.params_mut().zero_grads();
        let loss = batch_gradient(model, examples, &batch, &mut dropout_rng)?;
        if !loss.is_finite() {
            return Err(Error::numeric(
                "train",
                format!("loss {loss} at step {step}, batch {}", batch_fingerprint(&batch)),
            ));
        }
        let grad_norm = {
            let mut grads: Vec<&mut [f64]> = model
                .params_mut()
                .tensors_mut()
                .iter_mut()
                .filter_map(|t| t.grad_mut())
                .collect();
            clip_gradients(&mut grads, cfg.clip_norm)
        };
        let lr = lr_at(step, cfg);
        {
            let mut ts: Vec<&mut Tensor> = model.params_mut().tensors_mut().iter_mut().collect();
            opt.step(&mut ts, &decay, lr, cfg.weight_decay)?;
        }
        tokens_seen += batch.iter().map(|&i| lengths[i]).sum::<usize>();
        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{step},{loss:?},{lr:?},{tokens_seen}")?;
        }
        report.steps.push(StepRecord {
            step,
            loss,
            lr,
            grad_norm,
            tokens_seen,
        });
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let p = dir.join(format!("step_{step}.ckpt"));
                save_checkpoint(model, &p)?;
                report.checkpoints.push(p);
            }
        }
    }
    if let Some(mut f) = metrics {
        f.flush()?;
    }
    model.params_mut().set_requires_grad(false);
    model.params_mut().tensors_mut().iter_mut().for_each(Tensor::clear_grad);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    #[test]
    fn cross_entropy_oracles() {
        let v = 7;
        let uniform = Tensor::zeros([3, v]);
        let l = cross_entropy_next_token(&uniform, &[0, 3, 6]).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);

        let mut sharp = Tensor::zeros([2, v]);
        sharp.data_mut()[2] = 60.0;
        sharp.data_mut()[v + 5] = 60.0;
        assert!(cross_entropy_next_token(&sharp, &[2, 5]).unwrap() < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([4, v], 2.0, &mut rng);
        let t = [1, 0, 6, 2];
        let mut want = 0.0;
        for (i, &ti) in t.iter().enumerate() {
            let z: f64 = x.row(i).iter().map(|a| a.exp()).sum();
            want -= (x.row(i)[ti].exp() / z).ln();
        }
        want /= 4.0;
        assert!((cross_entropy_next_token(&x, &t).unwrap() - want).abs() < 1e-12);
        assert!(cross_entropy_next_token(&x, &[0, 0, 0, 7]).is_err());
    }

    #[test]
    fn adamw_limits_and_convergence() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 2, 0.1, 0.5).unwrap();
        assert_eq!(p, vec![1.0 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);
        assert!(adamw_step(&mut p, &[f64::NAN, 0.0], &mut m, &mut v, 3, 0.1, 0.0).is_err());

        // f(x, y) = x^2 + 10 y^2.
        let mut p = vec![3.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let f = |p: &[f64]| p[0] * p[0] + 10.0 * p[1] * p[1];
        let mut prev = f(&p);
        for step in 1..=50 {
            let g = [2.0 * p[0], 20.0 * p[1]];
            adamw_step(&mut p, &g, &mut m, &mut v, step, 0.05, 0.0).unwrap();
            let cur = f(&p);
            if step > 1 {
                assert!(cur < prev, "step {step}: {cur} >= {prev}");
            }
            prev = cur;
        }
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            total_steps: 5000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(1000, &cfg), 2e-4);
        assert_eq!(lr_at(5000, &cfg), 0.0);
        let left = lr_at(999, &cfg);
        let right = lr_at(1001, &cfg);
        assert!((left - 2e-4).abs() < 2.1e-7 && (right - 2e-4).abs() < 1e-9);
        for s in 1..5000 {
            assert!((lr_at(s, &cfg) - lr_at(s - 1, &cfg)).abs() < 2.1e-7);
        }
    }

    #[test]
    fn clipping() {
        let mut a = vec![0.3, 0.4];
        let n = clip_gradients(&mut [&mut a[..]], 1.0);
        assert_eq!((n, a.clone()), (0.5, vec![0.3, 0.4]));
        let mut a = vec![2.4];
        let mut b = vec![3.2];
        clip_gradients(&mut [&mut a[..], &mut b[..]], 1.0);
        assert!(((a[0] * a[0] + b[0] * b[0]).sqrt() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let scale = rng.gen_range(0.01..100.0);
            let mut g: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            clip_gradients(&mut [&mut g[..]], 1.0);
            assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn bucketing() {
        let uniform = vec![50; 40];
        let b = bucket_batches(&uniform, 10, 400, 1).unwrap();
        assert_eq!(padding_fraction(&b, &uniform), 0.0);
        assert!(b.iter().all(|x| x.len() == 8));

        let bimodal: Vec<usize> = (0..200).map(|i| if i % 3 == 0 { 1000 } else { 10 }).collect();
        let b = bucket_batches(&bimodal, 10, 4000, 2).unwrap();
        for batch in &b {
            let long = batch.iter().filter(|&&i| bimodal[i] == 1000).count();
            assert!(long == 0 || long == batch.len());
        }
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        assert_eq!(b, bucket_batches(&bimodal, 10, 4000, 2).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let random: Vec<usize> = (0..500).map(|_| rng.gen_range(5..300)).collect();
        let bucketed = padding_fraction(&bucket_batches(&random, 10, 2000, 5).unwrap(), &random);
        let flat = padding_fraction(&unbucketed_batches(&random, 2000, 5).unwrap(), &random);
        assert!(bucketed < flat, "{bucketed} vs {flat}");

        let err = bucket_batches(&[10, 5000, 20], 2, 4096, 0).unwrap_err().to_string();
        assert!(err.contains("record 1"), "{err}");
    }

    #[test]
    fn records_round_trip_as_jsonl() {
        let recs = vec![
            CorpusRecord {
                text: "ka lo".into(),
                audio_ids: vec![1, 2, 3],
                speaker_id: "s0".into(),
                style_id: None,
            },
            CorpusRecord {
                text: "mi".into(),
                audio_ids: vec![4],
                speaker_id: "s1".into(),
                style_id: Some("calm".into()),
            },
        ];
        let text = corpus_to_jsonl(&recs).unwrap();
        assert!(text.lines().next().unwrap().contains("\"audio\":[1,2,3]"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, &text).unwrap();
        assert_eq!(read_corpus(&p).unwrap(), recs);
        assert!(recs[0].validate(3).is_err());
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let cfg = TrainConfig {
            peak_lr: 5e-3,
            warmup_steps: 2,
            total_steps: 6,
            weight_decay: 0.1,
            batch_token_budget: 64,
            n_buckets: 2,
            seed: 9,
            ..TrainConfig::default()
        };
        let examples: Vec<Example> = (0..6)
            .map(|i| Example {
                text_ids: vec![1 + i % 5, 2, 3],
                audio_ids: (0..3 + i).map(|j| (i + j) % 10).collect(),
            })
            .collect();
        let run = || {
            let mut m = Model::new(ModelConfig::tiny(), 1).unwrap();
            let r = train(&mut m, &examples, &cfg, &TrainOutputs::default()).unwrap();
            (r.steps.iter().map(|s| s.loss).collect::<Vec<_>>(), m.params().content_hash())
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(a.iter().all(|l| l.is_finite()));
    }
}
