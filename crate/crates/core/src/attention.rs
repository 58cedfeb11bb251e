//! Softmax attention, linear attention and gated linear attention (GLA).
//!
//! GLA keeps a matrix state per head,
//!
//! ```text
//! S_t = G_t ⊙ S_{t-1} + k_t^T v_t,    o_t = q_t S_t,
//! ```
//!
//! with `G_t = alpha_t^T 1`: every row `j` of the state decays by
//! `alpha_t[j]`. Three evaluation strategies are provided and must agree:
//!
//! * recurrent: the literal per-step loop (fused tape op, O(N d_k d_v));
//! * parallel: the O(N^2) form built from cumulative decay products;
//! * chunkwise: parallel inside fixed-size chunks, recurrent across them.
//!
//! The `*_var` functions work on tape variables and are differentiable;
//! the plain functions take and return tensors.

use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gates are clamped into `[GATE_EPS, 1 - GATE_EPS]`.
pub const GATE_EPS: f64 = 1e-6;
/// Default gate temperature; `alpha = sigmoid(z)^(1/tau)`.
pub const GATE_TAU: f64 = 16.0;
/// Cumulative decay products below this switch the chunkwise form to
/// log-space accumulation.
pub const LOG_SPACE_THRESHOLD: f64 = 1e-30;
/// The parallel form refuses cumulative decays below this.
pub const PARALLEL_UNDERFLOW: f64 = 1e-300;

/// Single-head attention operands.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let (n, dk) = q.dims2()?;
        let (nk, dk2) = k.dims2()?;
        let (nv, _) = v.dims2()?;
        ensure!(dk == dk2, "queries have d_k = {dk}, keys have {dk2}");
        ensure!(nk == nv, "keys have {nk} rows, values have {nv}");
        ensure!(n == nk, "queries have {n} rows, keys have {nk}");
        Ok(Self { q, k, v })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, dk: usize, dv: usize, rng: &mut R) -> Self {
        Self {
            q: Tensor::randn([n, dk], 1.0, rng),
            k: Tensor::randn([n, dk], 1.0, rng),
            v: Tensor::randn([n, dv], 1.0, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dk(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn dv(&self) -> usize {
        self.v.shape()[1]
    }
}

/// Recurrent memory `S: [d_k, d_v]` of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct GlaState(pub Tensor);

impl GlaState {
    pub fn zeros(dk: usize, dv: usize) -> Self {
        GlaState(Tensor::zeros([dk, dv]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per-step decay vectors `alpha_t ∈ (0,1)^{d_k}`, stored as `[N, d_k]`.
#[derive(Clone, Debug)]
pub struct DecayGates {
    alpha: Tensor,
}

impl DecayGates {
    pub fn new(alpha: Tensor) -> Result<Self> {
        alpha.dims2()?;
        if let Some((i, a)) = alpha
            .data()
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0 && **a < 1.0))
        {
            return Err(Error::contract(format!(
                "decay gate {a} at flat index {i} outside (0, 1)"
            )));
        }
        Ok(Self { alpha })
    }

    /// Every gate equal to `value`.
    pub fn constant(n: usize, dk: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full([n, dk], value))
    }

    pub fn random<R: Rng + ?Sized>(n: usize, dk: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::new(Tensor::uniform([n, dk], lo, hi, rng)).expect("gate range inside (0, 1)")
    }

    pub fn alpha(&self) -> &Tensor {
        &self.alpha
    }

    /// The full `[d_k, d_v]` decay matrix `G_t` for step `t`.
    pub fn materialize(&self, t: usize, dv: usize) -> Tensor {
        let row = self.alpha.row(t);
        let data = row
            .iter()
            .flat_map(|&a| std::iter::repeat(a).take(dv))
            .collect();
        Tensor::new([row.len(), dv], data).expect("gate row shape")
    }
}

fn check_gla(inp: &AttentionInputs, gates: &DecayGates, s0: &GlaState) -> Result<()> {
    let (n, dk) = gates.alpha.dims2()?;
    ensure!(
        n == inp.len() && dk == inp.dk(),
        "gates of shape [{n}, {dk}] for inputs with N = {}, d_k = {}",
        inp.len(),
        inp.dk()
    );
    ensure!(
        s0.0.shape() == [inp.dk(), inp.dv()],
        "initial state {:?} does not match [{}, {}]",
        s0.0.shape(),
        inp.dk(),
        inp.dv()
    );
    Ok(())
}

fn lower_triangular_mask(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for t in 0..n {
        for i in 0..=t {
            m[t * n + i] = 1.0;
        }
    }
    m
}

// ── softmax attention ───────────────────────────────────────────────

/// `softmax(Q K^T / sqrt(d_k)) V`. With `causal`, masked logits receive a
/// large negative offset before the softmax, so position `t` attends only to
/// `i <= t`.
pub fn softmax_attention_var(tape: &mut Tape, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    let dk = tape.shape(q)[1];
    let n = tape.shape(q)[0];
    let m = tape.shape(k)[0];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let scores = if causal {
        ensure!(n == m, "causal attention needs square scores, got [{n}, {m}]");
        let mask = (0..n * n)
            .map(|idx| if idx % n <= idx / n { 0.0 } else { -1e30 })
            .collect();
        let mask = tape.constant([n, n], mask)?;
        tape.add(scores, mask)?
    } else {
        scores
    };
    let weights = tape.softmax_lastdim(scores)?;
    tape.matmul(weights, v)
}

pub fn softmax_attention(inp: &AttentionInputs, causal: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.leaf(&inp.q), tape.leaf(&inp.k), tape.leaf(&inp.v));
    let o = softmax_attention_var(&mut tape, q, k, v, causal)?;
    Ok(tape.tensor(o))
}

// ── linear attention ────────────────────────────────────────────────

/// `1 + elu(x)`, strictly positive.
pub fn one_plus_elu(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| if v > 0.0 { v + 1.0 } else { v.exp() })
        .collect()
}

/// Normalized linear attention run as a recurrence:
/// `S_t = S_{t-1} + phi(k_t)^T v_t`, `z_t = z_{t-1} + phi(k_t)^T`,
/// `o_t = phi(q_t) S_t / (phi(q_t) z_t)`.
pub fn linear_attention_normalized<F>(
    inp: &AttentionInputs,
    phi: F,
    s0: &GlaState,
    z0: &Tensor,
) -> Result<(Tensor, GlaState, Tensor)>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let (n, dk, dv) = (inp.len(), inp.dk(), inp.dv());
    ensure!(
        s0.0.shape() == [dk, dv],
        "initial state {:?} does not match [{dk}, {dv}]",
        s0.0.shape()
    );
    ensure!(z0.numel() == dk, "normalizer has {} entries, expected {dk}", z0.numel());
    let mut s = s0.0.data().to_vec();
    let mut z = z0.data().to_vec();
    let mut out = vec![0.0; n * dv];
    for t in 0..n {
        let fk = phi(inp.k.row(t));
        let fq = phi(inp.q.row(t));
        ensure!(
            fk.len() == dk && fq.len() == dk,
            "feature map changed the key dimension"
        );
        let vt = inp.v.row(t);
        for j in 0..dk {
            z[j] += fk[j];
            for m in 0..dv {
                s[j * dv + m] += fk[j] * vt[m];
            }
        }
        let den: f64 = fq.iter().zip(&z).map(|(a, b)| a * b).sum();
        if den == 0.0 || !den.is_finite() {
            return Err(Error::numeric(
                "linear_attention_normalized",
                format!("denominator {den} at timestep {}", t + 1),
            ));
        }
        for m in 0..dv {
            let num: f64 = (0..dk).map(|j| fq[j] * s[j * dv + m]).sum();
            out[t * dv + m] = num / den;
        }
    }
    Ok((
        Tensor::new([n, dv], out)?,
        GlaState(Tensor::new([dk, dv], s)?),
        Tensor::new([dk], z)?,
    ))
}

/// `S_t = S_{t-1} + k_t^T v_t`, `o_t = q_t S_t`.
pub fn linear_attention_unnormalized(
    inp: &AttentionInputs,
    s0: &GlaState,
) -> Result<(Tensor, GlaState)> {
    let (n, dk, dv) = (inp.len(), inp.dk(), inp.dv());
    ensure!(
        s0.0.shape() == [dk, dv],
        "initial state {:?} does not match [{dk}, {dv}]",
        s0.0.shape()
    );
    let mut s = s0.0.data().to_vec();
    let mut out = vec![0.0; n * dv];
    for t in 0..n {
        let (qt, kt, vt) = (inp.q.row(t), inp.k.row(t), inp.v.row(t));
        for j in 0..dk {
            for m in 0..dv {
                s[j * dv + m] += kt[j] * vt[m];
            }
        }
        for m in 0..dv {
            out[t * dv + m] = (0..dk).map(|j| qt[j] * s[j * dv + m]).sum();
        }
    }
    Ok((Tensor::new([n, dv], out)?, GlaState(Tensor::new([dk, dv], s)?)))
}

// ── gated linear attention ──────────────────────────────────────────

/// Exact per-step recurrence. Returns the outputs and `S_N`.
pub fn gla_recurrent(
    inp: &AttentionInputs,
    gates: &DecayGates,
    s0: &GlaState,
) -> Result<(Tensor, GlaState)> {
    check_gla(inp, gates, s0)?;
    let mut tape = Tape::new();
    let (q, k, v) = (tape.leaf(&inp.q), tape.leaf(&inp.k), tape.leaf(&inp.v));
    let a = tape.leaf(&gates.alpha);
    let s = tape.leaf(&s0.0);
    let (o, sn) = tape.gla_recurrent(q, k, v, a, s, 1)?;
    Ok((tape.tensor(o), GlaState(tape.tensor(sn))))
}

/// Materialized O(N^2) form for one head:
/// `O = ((Q ⊙ B)(K / B)^T ⊙ M) V + (Q ⊙ B) S0`, with `B = cumprod(alpha)`
/// and `M` the inclusive causal mask.
pub fn gla_parallel_var(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    alpha: Var,
    s0: Var,
) -> Result<Var> {
    let n = tape.shape(q)[0];
    let b = tape.cumprod(alpha, 0)?;
    let min = tape.value(b).iter().cloned().fold(f64::INFINITY, f64::min);
    if min < PARALLEL_UNDERFLOW {
        return Err(Error::numeric(
            "gla_parallel",
            format!(
                "cumulative decay {min:e} underflows below {PARALLEL_UNDERFLOW:e}; use the chunkwise form"
            ),
        ));
    }
    let qb = tape.mul(q, b)?;
    let kb = tape.div(k, b)?;
    let kbt = tape.transpose(kb)?;
    let scores = tape.matmul(qb, kbt)?;
    let mask = tape.constant([n, n], lower_triangular_mask(n))?;
    let scores = tape.mul(scores, mask)?;
    let intra = tape.matmul(scores, v)?;
    let carry = tape.matmul(qb, s0)?;
    tape.add(intra, carry)
}

pub fn gla_parallel(inp: &AttentionInputs, gates: &DecayGates, s0: &GlaState) -> Result<Tensor> {
    check_gla(inp, gates, s0)?;
    let mut tape = Tape::new();
    let (q, k, v) = (tape.leaf(&inp.q), tape.leaf(&inp.k), tape.leaf(&inp.v));
    let a = tape.leaf(&gates.alpha);
    let s = tape.leaf(&s0.0);
    let o = gla_parallel_var(&mut tape, q, k, v, a, s)?;
    Ok(tape.tensor(o))
}

/// One chunk: parallel inside, carrying `state` in. Returns the chunk
/// outputs and the state after the chunk.
fn gla_chunk(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    alpha: Var,
    state: Var,
) -> Result<(Var, Var)> {
    let c = tape.shape(q)[0];
    let dk = tape.shape(q)[1];
    let b = tape.cumprod(alpha, 0)?;
    let min = tape.value(b).iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= LOG_SPACE_THRESHOLD {
        let qb = tape.mul(q, b)?;
        let kb = tape.div(k, b)?;
        let kbt = tape.transpose(kb)?;
        let scores = tape.matmul(qb, kbt)?;
        let mask = tape.constant([c, c], lower_triangular_mask(c))?;
        let scores = tape.mul(scores, mask)?;
        let intra = tape.matmul(scores, v)?;
        let inter = tape.matmul(qb, state)?;
        let out = tape.add(intra, inter)?;

        let last = tape.slice(b, 0, c - 1, c)?;
        let to_end = tape.div(last, b)?;
        let kd = tape.mul(k, to_end)?;
        let kdt = tape.transpose(kd)?;
        let update = tape.matmul(kdt, v)?;
        let last_col = tape.transpose(last)?;
        let kept = tape.mul(last_col, state)?;
        let next = tape.add(kept, update)?;
        return Ok((out, next));
    }

    // Log-space: every decay ratio is exp of a non-positive number.
    let la = tape.log(alpha)?;
    let l = tape.cumsum(la, 0)?;
    let lt = tape.reshape(l, [c, 1, dk])?;
    let li = tape.reshape(l, [1, c, dk])?;
    let diff = tape.sub(lt, li)?;
    let mask3 = tape.constant([c, c, 1], lower_triangular_mask(c))?;
    let diff = tape.mul(diff, mask3)?;
    let decay = tape.exp(diff)?;
    let decay = tape.mul(decay, mask3)?;
    let qr = tape.reshape(q, [c, 1, dk])?;
    let kr = tape.reshape(k, [1, c, dk])?;
    let qk = tape.mul(qr, kr)?;
    let weighted = tape.mul(qk, decay)?;
    let scores = tape.sum_axis(weighted, 2)?;
    let intra = tape.matmul(scores, v)?;
    let el = tape.exp(l)?;
    let qb = tape.mul(q, el)?;
    let inter = tape.matmul(qb, state)?;
    let out = tape.add(intra, inter)?;

    let l_last = tape.slice(l, 0, c - 1, c)?;
    let rel = tape.sub(l_last, l)?;
    let to_end = tape.exp(rel)?;
    let kd = tape.mul(k, to_end)?;
    let kdt = tape.transpose(kd)?;
    let update = tape.matmul(kdt, v)?;
    let last = tape.exp(l_last)?;
    let last_col = tape.transpose(last)?;
    let kept = tape.mul(last_col, state)?;
    let next = tape.add(kept, update)?;
    Ok((out, next))
}

/// Chunkwise form: `ceil(N / chunk_size)` chunks evaluated in order.
pub fn gla_chunkwise_var(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    alpha: Var,
    s0: Var,
    chunk_size: usize,
) -> Result<(Var, Var)> {
    ensure!(chunk_size >= 1, "chunk size must be at least 1");
    let n = tape.shape(q)[0];
    let mut state = s0;
    let mut outs = Vec::with_capacity(n.div_ceil(chunk_size));
    let mut start = 0;
    while start < n {
        let end = (start + chunk_size).min(n);
        let qc = tape.slice(q, 0, start, end)?;
        let kc = tape.slice(k, 0, start, end)?;
        let vc = tape.slice(v, 0, start, end)?;
        let ac = tape.slice(alpha, 0, start, end)?;
        let (o, next) = gla_chunk(tape, qc, kc, vc, ac, state)?;
        outs.push(o);
        state = next;
        start = end;
    }
    let out = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 0)?
    };
    Ok((out, state))
}

pub fn gla_chunkwise(
    inp: &AttentionInputs,
    gates: &DecayGates,
    s0: &GlaState,
    chunk_size: usize,
) -> Result<(Tensor, GlaState)> {
    check_gla(inp, gates, s0)?;
    let mut tape = Tape::new();
    let (q, k, v) = (tape.leaf(&inp.q), tape.leaf(&inp.k), tape.leaf(&inp.v));
    let a = tape.leaf(&gates.alpha);
    let s = tape.leaf(&s0.0);
    let (o, sn) = gla_chunkwise_var(&mut tape, q, k, v, a, s, chunk_size)?;
    Ok((tape.tensor(o), GlaState(tape.tensor(sn))))
}

// ── data-dependent decay gate ───────────────────────────────────────

/// Low-rank gate projection: `alpha = clamp(sigmoid(x W_down W_up + b)^(1/tau))`.
#[derive(Clone, Debug)]
pub struct DecayGate {
    pub w_down: Tensor,
    pub w_up: Tensor,
    pub bias: Tensor,
    pub tau: f64,
}

/// Tape form of the gate; `x: [N, d_model]` gives `[N, d_k]`.
pub fn decay_gate_var(
    tape: &mut Tape,
    x: Var,
    w_down: Var,
    w_up: Var,
    bias: Var,
    tau: f64,
) -> Result<Var> {
    ensure!(tau >= 1.0, "gate temperature {tau} below 1");
    let low = tape.matmul(x, w_down)?;
    let z = tape.matmul(low, w_up)?;
    let z = tape.add(z, bias)?;
    let ls = tape.log_sigmoid(z)?;
    let ls = tape.scale(ls, 1.0 / tau)?;
    let a = tape.exp(ls)?;
    tape.clamp(a, GATE_EPS, 1.0 - GATE_EPS)
}

impl DecayGate {
    pub fn new(w_down: Tensor, w_up: Tensor, bias: Tensor, tau: f64) -> Result<Self> {
        let (_, r) = w_down.dims2()?;
        let (r2, dk) = w_up.dims2()?;
        ensure!(r == r2, "gate rank mismatch: {r} vs {r2}");
        ensure!(bias.numel() == dk, "gate bias has {} entries, expected {dk}", bias.numel());
        ensure!(tau >= 1.0, "gate temperature {tau} below 1");
        Ok(Self {
            w_down,
            w_up,
            bias,
            tau,
        })
    }

    /// Gates for every row of `x: [N, d_model]`.
    pub fn alpha(&self, x: &Tensor) -> Result<DecayGates> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wd = tape.leaf(&self.w_down);
        let wu = tape.leaf(&self.w_up);
        let b = tape.leaf(&self.bias);
        let a = decay_gate_var(&mut tape, xv, wd, wu, b, self.tau)?;
        DecayGates::new(tape.tensor(a))
    }
}
