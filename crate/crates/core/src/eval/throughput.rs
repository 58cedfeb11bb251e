//! Batched autoregressive decoding engine used to compare generation
//! throughput of GLA against softmax self-attention.
//!
//! The engine runs a stack of pre-norm blocks (time mixing, output gate,
//! SwiGLU) over a batch of independent sequences, one token per sequence
//! per step, with greedy decoding. The two variants share every projection
//! and differ only in time mixing: GLA carries a fixed `[H, d_k, d_v]`
//! state per sequence, softmax attention appends to a key/value cache and
//! attends over all of it.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::kv_config;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    Gla,
    Softmax,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Gla => "gla",
            AttentionKind::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    pub gate_rank: usize,
    pub vocab: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub seed: u64,
}

kv_config!(BenchConfig {
    d_model,
    n_heads,
    d_k,
    d_v,
    n_layers,
    ffn_hidden,
    gate_rank,
    vocab,
    warmup_runs,
    timed_runs,
    seed,
});

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 2,
            d_k: 16,
            d_v: 32,
            n_layers: 2,
            ffn_hidden: 128,
            gate_rank: 4,
            vocab: 64,
            warmup_runs: 3,
            timed_runs: 10,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.d_v * self.n_heads == self.d_model && self.d_k >= 1,
            "d_v * n_heads must equal d_model"
        );
        ensure!(
            self.n_layers >= 1 && self.ffn_hidden >= 1 && self.gate_rank >= 1 && self.vocab >= 2,
            "bench model sizes must be positive"
        );
        ensure!(self.timed_runs >= 1, "need at least one timed run");
        Ok(())
    }
}

struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> Mat<T> {
    fn random(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols)
            .map(|_| T::from(n.sample(rng)).expect("representable"))
            .collect();
        Self { rows, cols, data }
    }

    fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Floats the engine runs in, with a matrix product for the projections.
pub trait Scalar: Float + 'static {
    /// `c[m, n] = a[m, k] b[k, n]`, all row-major.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);
}

macro_rules! scalar_impl {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: bounds asserted above; strides describe dense row-major storage.
                unsafe {
                    $f(
                        m, k, n, 1.0,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        0.0,
                        c.as_mut_ptr(), n as isize, 1,
                    )
                }
            }
        }
    };
}

scalar_impl!(f32, matrixmultiply::sgemm);
scalar_impl!(f64, matrixmultiply::dgemm);

/// Below this many rows a vector-matrix loop beats packing `W`.
const GEMV_ROWS: usize = 16;

/// `out[b, :] = x[b, :] W` for `b < batch`.
fn linear<T: Scalar>(x: &[T], batch: usize, w: &Mat<T>, out: &mut [T]) {
    if batch >= GEMV_ROWS {
        return T::gemm(batch, w.rows, w.cols, x, &w.data, out);
    }
    let out = &mut out[..batch * w.cols];
    out.iter_mut().for_each(|o| *o = T::zero());
    // Each weight row is loaded once and applied to every sequence.
    for (k, wr) in w.data.chunks(w.cols).enumerate() {
        for (xr, or) in x.chunks(w.rows).zip(out.chunks_mut(w.cols)) {
            let a = xr[k];
            for (o, &b) in or.iter_mut().zip(wr) {
                *o = *o + a * b;
            }
        }
    }
}

fn rmsnorm<T: Float>(x: &[T], width: usize, out: &mut [T]) {
    let eps = T::from(1e-6).expect("representable");
    for (xr, or) in x.chunks(width).zip(out.chunks_mut(width)) {
        let ms = xr.iter().fold(T::zero(), |a, &v| a + v * v) / T::from(width).expect("width");
        let r = (ms + eps).sqrt().recip();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v * r;
        }
    }
}

fn silu<T: Float>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

struct Layer<T> {
    wq: Mat<T>,
    wk: Mat<T>,
    wv: Mat<T>,
    wg: Mat<T>,
    gate: Option<(Mat<T>, Mat<T>, Vec<T>)>,
    wo: Mat<T>,
    ffn_gate: Mat<T>,
    ffn_up: Mat<T>,
    ffn_out: Mat<T>,
}

/// Per-sequence decoding memory of one layer.
enum Memory<T> {
    /// `[batch, H * d_k, d_v]`.
    Gla(Vec<T>),
    /// Per sequence, the growing key and value rows.
    Cache { keys: Vec<Vec<T>>, values: Vec<Vec<T>> },
}

pub struct Engine<T> {
    cfg: BenchConfig,
    kind: AttentionKind,
    embed: Mat<T>,
    layers: Vec<Layer<T>>,
    head: Mat<T>,
}

pub struct DecodeState<T> {
    batch: usize,
    steps: usize,
    memory: Vec<Memory<T>>,
    tokens: Vec<usize>,
    scratch: Scratch<T>,
}

struct Scratch<T> {
    x: Vec<T>,
    h: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    g: Vec<T>,
    o: Vec<T>,
    low: Vec<T>,
    alpha: Vec<T>,
    f1: Vec<T>,
    f2: Vec<T>,
    y: Vec<T>,
    scores: Vec<T>,
    logits: Vec<T>,
}

impl<T: Scalar> Engine<T> {
    pub fn new(cfg: &BenchConfig, kind: AttentionKind) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let (hk, hv) = (cfg.n_heads * cfg.d_k, cfg.n_heads * cfg.d_v);
        let s = |fan: usize| 1.0 / (fan as f64).sqrt();
        let embed = Mat::random(cfg.vocab, d, 1.0, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let wq = Mat::random(d, hk, s(d), &mut rng);
                let wk = Mat::random(d, hk, s(d), &mut rng);
                let wv = Mat::random(d, hv, s(d), &mut rng);
                let wg = Mat::random(d, hv, s(d), &mut rng);
                let down = Mat::random(d, cfg.gate_rank, s(d), &mut rng);
                let up = Mat::random(cfg.gate_rank, hk, s(cfg.gate_rank), &mut rng);
                let bias = (0..hk)
                    .map(|i| T::from(-3.0 + 5.0 * (i as f64 + 0.5) / hk as f64).expect("bias"))
                    .collect();
                Layer {
                    wq,
                    wk,
                    wv,
                    wg,
                    gate: (kind == AttentionKind::Gla).then_some((down, up, bias)),
                    wo: Mat::random(hv, d, 0.5 * s(hv), &mut rng),
                    ffn_gate: Mat::random(d, cfg.ffn_hidden, s(d), &mut rng),
                    ffn_up: Mat::random(d, cfg.ffn_hidden, s(d), &mut rng),
                    ffn_out: Mat::random(cfg.ffn_hidden, d, 0.5 * s(cfg.ffn_hidden), &mut rng),
                }
            })
            .collect();
        let head = Mat::random(d, cfg.vocab, s(d), &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            embed,
            layers,
            head,
        })
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn param_count(&self) -> usize {
        let layer: usize = self
            .layers
            .iter()
            .map(|l| {
                let gate = l.gate.as_ref().map_or(0, |(a, b, c)| a.numel() + b.numel() + c.len());
                [&l.wq, &l.wk, &l.wv, &l.wg, &l.wo, &l.ffn_gate, &l.ffn_up, &l.ffn_out]
                    .iter()
                    .map(|m| m.numel())
                    .sum::<usize>()
                    + gate
            })
            .sum();
        self.embed.numel() + layer + self.head.numel()
    }

    /// Bytes of decoding memory for `batch` sequences after `len` tokens.
    pub fn state_bytes(&self, batch: usize, len: usize) -> usize {
        let c = &self.cfg;
        let per_layer = match self.kind {
            AttentionKind::Gla => c.n_heads * c.d_k * c.d_v,
            AttentionKind::Softmax => len * c.n_heads * (c.d_k + c.d_v),
        };
        batch * c.n_layers * per_layer * std::mem::size_of::<T>()
    }

    pub fn start(&self, first_tokens: &[usize]) -> DecodeState<T> {
        let c = &self.cfg;
        let b = first_tokens.len();
        let (d, hk, hv, f) = (c.d_model, c.n_heads * c.d_k, c.n_heads * c.d_v, c.ffn_hidden);
        let memory = (0..c.n_layers)
            .map(|_| match self.kind {
                AttentionKind::Gla => Memory::Gla(vec![T::zero(); b * hk * c.d_v]),
                AttentionKind::Softmax => Memory::Cache {
                    keys: vec![Vec::new(); b],
                    values: vec![Vec::new(); b],
                },
            })
            .collect();
        let z = |n: usize| vec![T::zero(); n];
        DecodeState {
            batch: b,
            steps: 0,
            memory,
            tokens: first_tokens.to_vec(),
            scratch: Scratch {
                x: z(b * d),
                h: z(b * d),
                q: z(b * hk),
                k: z(b * hk),
                v: z(b * hv),
                g: z(b * hv),
                o: z(b * hv),
                low: z(b * c.gate_rank),
                alpha: z(b * hk),
                f1: z(b * f),
                f2: z(b * f),
                y: z(b * d),
                scores: Vec::new(),
                logits: z(b * c.vocab),
            },
        }
    }

    /// Consumes the current token of every sequence and replaces it with
    /// the greedy next token.
    pub fn step(&self, st: &mut DecodeState<T>) {
        let c = &self.cfg;
        let b = st.batch;
        let (d, dk, dv, heads) = (c.d_model, c.d_k, c.d_v, c.n_heads);
        let (hk, hv) = (heads * dk, heads * dv);
        let s = &mut st.scratch;
        for (i, &tok) in st.tokens.iter().enumerate() {
            s.x[i * d..(i + 1) * d].copy_from_slice(&self.embed.data[tok * d..(tok + 1) * d]);
        }
        let qscale = T::from(1.0 / (dk as f64).sqrt()).expect("scale");
        let tau_inv = T::from(1.0 / crate::attention::GATE_TAU).expect("tau");
        let eps = T::from(crate::attention::GATE_EPS).expect("eps");
        for (layer, mem) in self.layers.iter().zip(st.memory.iter_mut()) {
            rmsnorm(&s.x, d, &mut s.h);
            linear(&s.h, b, &layer.wq, &mut s.q);
            linear(&s.h, b, &layer.wk, &mut s.k);
            linear(&s.h, b, &layer.wv, &mut s.v);
            linear(&s.h, b, &layer.wg, &mut s.g);
            s.q.iter_mut().for_each(|v| *v = *v * qscale);
            match mem {
                Memory::Gla(state) => {
                    let (down, up, bias) = layer.gate.as_ref().expect("gla layer has a gate");
                    linear(&s.h, b, down, &mut s.low);
                    linear(&s.low, b, up, &mut s.alpha);
                    for (i, a) in s.alpha.iter_mut().enumerate() {
                        // sigmoid(z)^(1/tau)
                        let z = *a + bias[i % hk];
                        let g = ((T::one() + (-z).exp()).recip().ln() * tau_inv).exp();
                        *a = g.max(eps).min(T::one() - eps);
                    }
                    for seq in 0..b {
                        let st_seq = &mut state[seq * hk * dv..(seq + 1) * hk * dv];
                        for h in 0..heads {
                            let vt = &s.v[seq * hv + h * dv..seq * hv + (h + 1) * dv];
                            let ot = &mut s.o[seq * hv + h * dv..seq * hv + (h + 1) * dv];
                            ot.iter_mut().for_each(|x| *x = T::zero());
                            for j in 0..dk {
                                let r = seq * hk + h * dk + j;
                                let (a, kj, qj) = (s.alpha[r], s.k[r], s.q[r]);
                                let row = &mut st_seq[(h * dk + j) * dv..(h * dk + j + 1) * dv];
                                for ((sm, &vm), om) in row.iter_mut().zip(vt).zip(ot.iter_mut()) {
                                    *sm = a * *sm + kj * vm;
                                    *om = *om + qj * *sm;
                                }
                            }
                        }
                    }
                }
                Memory::Cache { keys, values } => {
                    let len = st.steps + 1;
                    s.scores.resize(len, T::zero());
                    for seq in 0..b {
                        keys[seq].extend_from_slice(&s.k[seq * hk..(seq + 1) * hk]);
                        values[seq].extend_from_slice(&s.v[seq * hv..(seq + 1) * hv]);
                        let (kc, vc) = (&keys[seq], &values[seq]);
                        for h in 0..heads {
                            let q = &s.q[seq * hk + h * dk..seq * hk + (h + 1) * dk];
                            let mut max = T::neg_infinity();
                            for (t, sc) in s.scores.iter_mut().enumerate() {
                                let kr = &kc[t * hk + h * dk..t * hk + (h + 1) * dk];
                                let dot = q.iter().zip(kr).fold(T::zero(), |a, (&x, &y)| a + x * y);
                                *sc = dot;
                                max = max.max(dot);
                            }
                            let mut z = T::zero();
                            for sc in s.scores.iter_mut() {
                                *sc = (*sc - max).exp();
                                z = z + *sc;
                            }
                            let ot = &mut s.o[seq * hv + h * dv..seq * hv + (h + 1) * dv];
                            ot.iter_mut().for_each(|x| *x = T::zero());
                            for (t, &p) in s.scores.iter().enumerate() {
                                let w = p / z;
                                let vr = &vc[t * hv + h * dv..t * hv + (h + 1) * dv];
                                for (o, &v) in ot.iter_mut().zip(vr) {
                                    *o = *o + w * v;
                                }
                            }
                        }
                    }
                }
            }
            // Per-head norm, output gate, projection, residual.
            let o_norm = &mut s.f1[..b * hv];
            rmsnorm(&s.o, dv, o_norm);
            for (o, &g) in o_norm.iter_mut().zip(&s.g) {
                *o = *o * silu(g);
            }
            linear(o_norm, b, &layer.wo, &mut s.y);
            for (x, &y) in s.x.iter_mut().zip(&s.y) {
                *x = *x + y;
            }
            rmsnorm(&s.x, d, &mut s.h);
            linear(&s.h, b, &layer.ffn_gate, &mut s.f1);
            linear(&s.h, b, &layer.ffn_up, &mut s.f2);
            for (a, &u) in s.f1.iter_mut().zip(&s.f2) {
                *a = silu(*a) * u;
            }
            linear(&s.f1, b, &layer.ffn_out, &mut s.y);
            for (x, &y) in s.x.iter_mut().zip(&s.y) {
                *x = *x + y;
            }
        }
        rmsnorm(&s.x, d, &mut s.h);
        linear(&s.h, b, &self.head, &mut s.logits);
        for (i, tok) in st.tokens.iter_mut().enumerate() {
            let row = &s.logits[i * c.vocab..(i + 1) * c.vocab];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            *tok = best;
        }
        st.steps += 1;
    }

    /// Decodes `len` steps for `batch` sequences and returns each step's
    /// wall time in seconds.
    pub fn run(&self, batch: usize, len: usize) -> Vec<f64> {
        let first: Vec<usize> = (0..batch).map(|i| i % self.cfg.vocab).collect();
        let mut st = self.start(&first);
        let mut times = Vec::with_capacity(len);
        for _ in 0..len {
            let t0 = Instant::now();
            self.step(&mut st);
            times.push(t0.elapsed().as_secs_f64());
        }
        times
    }
}

impl<T> DecodeState<T> {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// One measured cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub attention_kind: AttentionKind,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub tokens_per_second: f64,
    /// Analytic decoding memory at the end of generation.
    pub peak_state_memory: usize,
    /// Median per-step seconds around `t = 100`.
    pub step_time_early: f64,
    /// Median per-step seconds around `t = 1000` (or the last steps when
    /// the sequence is shorter).
    pub step_time_late: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn window(times: &[f64], center: usize) -> f64 {
    let lo = center.saturating_sub(8).min(times.len().saturating_sub(16));
    let hi = (lo + 16).min(times.len());
    median(times[lo..hi].to_vec())
}

/// Times generation for both kinds over `batch_sizes`. Each cell runs
/// `warmup_runs` discarded and `timed_runs` measured generations per kind;
/// the reported throughput uses the median run time.
pub fn throughput_bench(cfg: &BenchConfig, batch_sizes: &[usize], len: usize) -> Result<Vec<BenchResult>> {
    ensure!(!batch_sizes.is_empty() && batch_sizes.iter().all(|&b| b >= 1), "batch sizes must be positive");
    ensure!(len >= 16, "generation length {len} is too short to time");
    let gla = Engine::<f32>::new(cfg, AttentionKind::Gla)?;
    let sm = Engine::<f32>::new(cfg, AttentionKind::Softmax)?;
    let (pg, ps) = (gla.param_count() as f64, sm.param_count() as f64);
    ensure!(
        (pg / ps - 1.0).abs() <= 0.02,
        "compared models differ in size: {pg} vs {ps} parameters"
    );
    let early = 100.min(len - 1);
    let late = 1000.min(len - 1);
    let mut out = Vec::new();
    for &b in batch_sizes {
        let engines = [&gla, &sm];
        for _ in 0..cfg.warmup_runs {
            engines.iter().for_each(|e| drop(e.run(b, len)));
        }
        // Alternate the kinds so slow drifts of the host hit both alike.
        let mut runs: [Vec<Vec<f64>>; 2] = Default::default();
        for _ in 0..cfg.timed_runs {
            for (e, r) in engines.iter().zip(runs.iter_mut()) {
                r.push(e.run(b, len));
            }
        }
        for (engine, runs) in engines.iter().zip(runs) {
            let total = median(runs.iter().map(|r| r.iter().sum()).collect());
            out.push(BenchResult {
                attention_kind: engine.kind(),
                batch_size: b,
                sequence_length: len,
                tokens_per_second: (b * len) as f64 / total,
                peak_state_memory: engine.state_bytes(b, len),
                step_time_early: median(runs.iter().map(|r| window(r, early)).collect()),
                step_time_late: median(runs.iter().map(|r| window(r, late)).collect()),
            });
        }
    }
    Ok(out)
}

/// CSV `kind,batch,len,tok_per_s`.
pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("kind,batch,len,tok_per_s\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{:.3}\n",
            r.attention_kind.name(),
            r.batch_size,
            r.sequence_length,
            r.tokens_per_second
        ));
    }
    s
}

pub fn write_bench_csv(results: &[BenchResult], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bench_csv(results).as_bytes())?;
    Ok(())
}

/// GLA-over-softmax throughput ratio per batch size, in input order.
pub fn throughput_ratios(results: &[BenchResult]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for r in results.iter().filter(|r| r.attention_kind == AttentionKind::Gla) {
        if let Some(s) = results
            .iter()
            .find(|s| s.attention_kind == AttentionKind::Softmax && s.batch_size == r.batch_size)
        {
            out.push((r.batch_size, r.tokens_per_second / s.tokens_per_second));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            d_model: 16,
            n_heads: 2,
            d_k: 4,
            d_v: 8,
            ffn_hidden: 32,
            gate_rank: 1,
            warmup_runs: 0,
            timed_runs: 1,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn models_are_matched_in_size() {
        let c = BenchConfig::default();
        let g = Engine::<f32>::new(&c, AttentionKind::Gla).unwrap().param_count() as f64;
        let s = Engine::<f32>::new(&c, AttentionKind::Softmax).unwrap().param_count() as f64;
        assert!((g / s - 1.0).abs() <= 0.02);
    }

    #[test]
    fn batch_rows_are_independent() {
        let e = Engine::<f64>::new(&small(), AttentionKind::Softmax).unwrap();
        let mut one = e.start(&[5]);
        let mut many = e.start(&[3, 5, 9]);
        for _ in 0..20 {
            e.step(&mut one);
            e.step(&mut many);
            assert_eq!(one.tokens()[0], many.tokens()[1]);
        }
    }

    #[test]
    fn gla_state_size_is_constant() {
        let c = small();
        let e = Engine::<f64>::new(&c, AttentionKind::Gla).unwrap();
        let mut st = e.start(&[1, 2]);
        for _ in 0..5 {
            e.step(&mut st);
        }
        assert_eq!(st.steps(), 5);
        match &st.memory[0] {
            Memory::Gla(s) => assert_eq!(s.len(), 2 * c.n_heads * c.d_k * c.d_v),
            Memory::Cache { .. } => unreachable!(),
        }
    }

    #[test]
    fn state_memory_accounting() {
        let c = small();
        let g = Engine::<f32>::new(&c, AttentionKind::Gla).unwrap();
        let s = Engine::<f32>::new(&c, AttentionKind::Softmax).unwrap();
        assert_eq!(g.state_bytes(4, 10), g.state_bytes(4, 1000));
        assert_eq!(s.state_bytes(4, 1000), 100 * s.state_bytes(4, 10));
    }

    #[test]
    fn csv_shape() {
        let r = throughput_bench(&small(), &[1, 2], 32).unwrap();
        assert_eq!(r.len(), 4);
        let csv = bench_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,batch,len,tok_per_s");
        assert!(lines[1].starts_with("gla,1,32,"));
        assert!(r.iter().all(|x| x.tokens_per_second > 0.0));
        assert_eq!(throughput_ratios(&r).len(), 2);
    }
}
