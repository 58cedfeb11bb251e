//! Building blocks shared by the text encoder, the GLA stacks and the
//! cross-attention layer. Each `*_var` function records onto a tape; the
//! plain functions are tape-free conveniences over tensors.

use rand::{Rng, RngCore};

use crate::attention::{decay_gate_var, softmax_attention_var, GATE_TAU};
use crate::error::{ensure, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// Training mode carries the dropout randomness.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// RMS normalization over the last axis followed by a learned gain.
pub fn norm_var(tape: &mut Tape, x: Var, gain: Var) -> Result<Var> {
    let n = tape.rmsnorm(x, NORM_EPS)?;
    tape.mul(n, gain)
}

/// Inverted dropout; identity in eval mode or when `p == 0`.
pub fn dropout_var(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(shape, mask)?;
    tape.mul(x, mask)
}

/// Rotary embedding applied independently to each `head_dim`-wide slice.
pub fn rope_heads_var(tape: &mut Tape, x: Var, heads: usize, positions: &[usize]) -> Result<Var> {
    let d = tape.shape(x)[1];
    ensure!(d % heads == 0, "width {d} not divisible by {heads} heads");
    let hd = d / heads;
    if heads == 1 {
        return tape.rope(x, positions, ROPE_BASE);
    }
    let parts = (0..heads)
        .map(|h| {
            let s = tape.slice(x, 1, h * hd, (h + 1) * hd)?;
            tape.rope(s, positions, ROPE_BASE)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&parts, 1)
}

/// Rotary position embedding of the rows of `x: [N, d]`.
pub fn rope_apply(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let y = tape.rope(v, positions, ROPE_BASE)?;
    Ok(tape.tensor(y))
}

/// `W_out(silu(x W_gate) * (x W_up))`.
pub fn swiglu_var(tape: &mut Tape, x: Var, w_gate: Var, w_up: Var, w_out: Var) -> Result<Var> {
    let g = tape.matmul(x, w_gate)?;
    let g = tape.silu(g)?;
    let u = tape.matmul(x, w_up)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, w_out)
}

pub fn swiglu_ffn(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_out: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = [x, w_gate, w_up, w_out].map(|t| tape.leaf(t));
    let y = swiglu_var(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok(tape.tensor(y))
}

/// `x + depthwise_conv(x)` along time. The causal variant optionally takes
/// `K-1` rows of history that precede `x`; the returned history holds the
/// last `K-1` rows of `[history; x]`.
pub fn conv_pos_embed_var(
    tape: &mut Tape,
    x: Var,
    w: Var,
    causal: bool,
    history: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    if !causal {
        ensure!(history.is_none(), "history only applies to the causal variant");
        let c = tape.depthwise_conv1d(x, w, false)?;
        return Ok((tape.add(x, c)?, None));
    }
    let Some(hist) = history else {
        let c = tape.depthwise_conv1d(x, w, true)?;
        return Ok((tape.add(x, c)?, None));
    };
    let n = tape.shape(x)[0];
    let h = tape.shape(hist)[0];
    let full = tape.concat(&[hist, x], 0)?;
    let c = tape.depthwise_conv1d(full, w, true)?;
    let c = tape.slice(c, 0, h, h + n)?;
    let y = tape.add(x, c)?;
    let new_hist = tape.slice(full, 0, n, n + h)?;
    Ok((y, Some(new_hist)))
}

pub fn conv_pos_embed(x: &Tensor, w: &Tensor, causal: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(x), tape.leaf(w));
    let (y, _) = conv_pos_embed_var(&mut tape, xv, wv, causal, None)?;
    Ok(tape.tensor(y))
}

/// Multi-head attention over column slices. `q`, `k`, `v` are `[*, heads *
/// hd]`; returns the concatenated head outputs.
pub fn multi_head_var(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    ensure!(d % heads == 0, "width {d} not divisible by {heads} heads");
    let hd = d / heads;
    if heads == 1 {
        return softmax_attention_var(tape, q, k, v, causal);
    }
    let outs = (0..heads)
        .map(|h| {
            let qh = tape.slice(q, 1, h * hd, (h + 1) * hd)?;
            let kh = tape.slice(k, 1, h * hd, (h + 1) * hd)?;
            let vh = tape.slice(v, 1, h * hd, (h + 1) * hd)?;
            softmax_attention_var(tape, qh, kh, vh, causal)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&outs, 1)
}

/// Cross-attention weights for one layer.
#[derive(Clone, Copy, Debug)]
pub struct CrossVars {
    pub conv_q: Var,
    pub conv_kv: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Text-side keys and values, computed once per text.
pub fn cross_keys_values(tape: &mut Tape, text_h: Var, w: &CrossVars) -> Result<(Var, Var)> {
    let (t, _) = conv_pos_embed_var(tape, text_h, w.conv_kv, false, None)?;
    Ok((tape.matmul(t, w.wk)?, tape.matmul(t, w.wv)?))
}

/// Queries from the causal convolutional embedding of `audio_h`, softmax
/// attention over all text positions, then `W_o`.
pub fn cross_attend_var(
    tape: &mut Tape,
    audio_h: Var,
    text_k: Var,
    text_v: Var,
    w: &CrossVars,
    heads: usize,
    history: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    let (a, hist) = conv_pos_embed_var(tape, audio_h, w.conv_q, true, history)?;
    let q = tape.matmul(a, w.wq)?;
    let o = multi_head_var(tape, q, text_k, text_v, heads, false)?;
    Ok((tape.matmul(o, w.wo)?, hist))
}

/// Tensor-level cross-attention. Returns the output and, per head, the
/// `[N_a, N_t]` attention weights.
#[allow(clippy::too_many_arguments)]
pub fn cross_attend(
    audio_h: &Tensor,
    text_h: &Tensor,
    conv_q: &Tensor,
    conv_kv: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let a = tape.leaf(audio_h);
    let t = tape.leaf(text_h);
    let w = CrossVars {
        conv_q: tape.leaf(conv_q),
        conv_kv: tape.leaf(conv_kv),
        wq: tape.leaf(wq),
        wk: tape.leaf(wk),
        wv: tape.leaf(wv),
        wo: tape.leaf(wo),
    };
    let (k, v) = cross_keys_values(&mut tape, t, &w)?;
    let (o, _) = cross_attend_var(&mut tape, a, k, v, &w, heads, None)?;

    // Recompute the weights for inspection.
    let (aq, _) = conv_pos_embed_var(&mut tape, a, w.conv_q, true, None)?;
    let q = tape.matmul(aq, w.wq)?;
    let d = tape.shape(q)[1];
    let hd = d / heads;
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * hd, (h + 1) * hd)?;
        let kh = tape.slice(k, 1, h * hd, (h + 1) * hd)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, 1.0 / (hd as f64).sqrt())?;
        let p = tape.softmax_lastdim(s)?;
        weights.push(tape.tensor(p));
    }
    Ok((tape.tensor(o), weights))
}

/// Weights of one GLA block.
#[derive(Clone, Copy, Debug)]
pub struct GlaBlockVars {
    pub norm1: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wg: Var,
    pub gate_down: Var,
    pub gate_up: Var,
    pub gate_bias: Var,
    pub head_norm: Var,
    pub wo: Var,
    pub norm2: Var,
    pub ffn_gate: Var,
    pub ffn_up: Var,
    pub ffn_out: Var,
}

/// Pre-norm GLA time mixing followed by a SwiGLU channel mixer. Returns the
/// block output and the final recurrent state.
pub fn gla_block_var(
    tape: &mut Tape,
    x: Var,
    s0: Var,
    w: &GlaBlockVars,
    heads: usize,
    d_k: usize,
    d_v: usize,
) -> Result<(Var, Var)> {
    let n = tape.shape(x)[0];
    let h = norm_var(tape, x, w.norm1)?;
    let q = tape.matmul(h, w.wq)?;
    let q = tape.scale(q, 1.0 / (d_k as f64).sqrt())?;
    let k = tape.matmul(h, w.wk)?;
    let v = tape.matmul(h, w.wv)?;
    let alpha = decay_gate_var(tape, h, w.gate_down, w.gate_up, w.gate_bias, GATE_TAU)?;
    let (o, s_n) = tape.gla_recurrent(q, k, v, alpha, s0, heads)?;
    let o = tape.reshape(o, [n * heads, d_v])?;
    let o = norm_var(tape, o, w.head_norm)?;
    let o = tape.reshape(o, [n, heads * d_v])?;
    let g = tape.matmul(h, w.wg)?;
    let g = tape.silu(g)?;
    let o = tape.mul(o, g)?;
    let o = tape.matmul(o, w.wo)?;
    let x = tape.add(x, o)?;
    let h2 = norm_var(tape, x, w.norm2)?;
    let f = swiglu_var(tape, h2, w.ffn_gate, w.ffn_up, w.ffn_out)?;
    Ok((tape.add(x, f)?, s_n))
}
