use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{
    cross_attend_var, cross_keys_values, dropout_var, gla_block_var, multi_head_var, norm_var,
    rope_heads_var, swiglu_var, CrossVars, GlaBlockVars, Mode,
};
use super::params::{Bound, ParamId, ParamStore};
use super::states::{StateBundle, StateVars};
use crate::error::{ensure, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

enum Init {
    Ones,
    Zeros,
    Normal(f64),
    /// Gate bias spread so that initial decays cover roughly `[0.8, 0.99]`.
    GateBias,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    decay: bool,
    init: Init,
}

fn layout(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.d_model;
    let f = cfg.ffn_hidden;
    let mut out = Vec::new();
    let mut p = |name: String, shape: Vec<usize>, decay: bool, init: Init| {
        out.push(Spec {
            name,
            shape,
            decay,
            init,
        })
    };
    let proj = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let out_proj = |fan_in: usize| Init::Normal(0.5 / (fan_in as f64).sqrt());
    let ffn = |p: &mut dyn FnMut(String, Vec<usize>, bool, Init), base: &str| {
        p(format!("{base}.ffn_gate"), vec![d, f], true, proj(d));
        p(format!("{base}.ffn_up"), vec![d, f], true, proj(d));
        p(format!("{base}.ffn_out"), vec![f, d], true, out_proj(f));
    };

    p("text.embed.weight".into(), vec![cfg.text_vocab, d], false, Init::Normal(1.0));
    for i in 0..cfg.n_text_blocks {
        let b = format!("text.{i}");
        p(format!("{b}.norm1"), vec![d], false, Init::Ones);
        for w in ["wq", "wk", "wv"] {
            p(format!("{b}.{w}"), vec![d, d], true, proj(d));
        }
        p(format!("{b}.wo"), vec![d, d], true, out_proj(d));
        p(format!("{b}.norm2"), vec![d], false, Init::Ones);
        ffn(&mut p, &b);
    }
    p("text.final.norm".into(), vec![d], false, Init::Ones);
    p("audio.embed.weight".into(), vec![cfg.audio_vocab, d], false, Init::Normal(1.0));
    p("audio.bos.weight".into(), vec![1, d], false, Init::Normal(1.0));

    let gla = |p: &mut dyn FnMut(String, Vec<usize>, bool, Init), b: String| {
        let (hk, hv, r) = (cfg.hk(), cfg.hv(), cfg.gate_rank);
        p(format!("{b}.norm1"), vec![d], false, Init::Ones);
        p(format!("{b}.wq"), vec![d, hk], true, proj(d));
        p(format!("{b}.wk"), vec![d, hk], true, proj(d));
        p(format!("{b}.wv"), vec![d, hv], true, proj(d));
        p(format!("{b}.wg"), vec![d, hv], true, proj(d));
        p(format!("{b}.gate_down"), vec![d, r], true, proj(d));
        p(format!("{b}.gate_up"), vec![r, hk], true, proj(r));
        p(format!("{b}.gate_bias"), vec![hk], false, Init::GateBias);
        p(format!("{b}.head_norm"), vec![cfg.d_v], false, Init::Ones);
        p(format!("{b}.wo"), vec![hv, d], true, out_proj(hv));
        p(format!("{b}.norm2"), vec![d], false, Init::Ones);
        ffn(p, &b);
    };
    for i in 0..cfg.n_audio_enc_blocks {
        gla(&mut p, format!("enc.{i}"));
    }
    let k = cfg.conv_pos_kernel;
    p("cross.0.norm_a".into(), vec![d], false, Init::Ones);
    p("cross.0.norm_t".into(), vec![d], false, Init::Ones);
    p("cross.0.conv_q".into(), vec![k, d], false, Init::Zeros);
    p("cross.0.conv_kv".into(), vec![k, d], false, Init::Zeros);
    for w in ["wq", "wk", "wv"] {
        p(format!("cross.0.{w}"), vec![d, d], true, proj(d));
    }
    p("cross.0.wo".into(), vec![d, d], true, out_proj(d));
    for i in 0..cfg.n_dec_blocks {
        gla(&mut p, format!("dec.{i}"));
    }
    p("head.0.norm".into(), vec![d], false, Init::Ones);
    p("head.0.weight".into(), vec![d, cfg.audio_vocab + 1], true, proj(d));
    p("head.0.bias".into(), vec![cfg.audio_vocab + 1], false, Init::Zeros);
    out
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    gate: ParamId,
    up: ParamId,
    out: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct TextBlockIds {
    norm1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm2: ParamId,
    ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
struct GlaBlockIds {
    norm1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wg: ParamId,
    gate_down: ParamId,
    gate_up: ParamId,
    gate_bias: ParamId,
    head_norm: ParamId,
    wo: ParamId,
    norm2: ParamId,
    ffn: FfnIds,
}

#[derive(Clone, Copy, Debug)]
struct CrossIds {
    norm_a: ParamId,
    norm_t: ParamId,
    conv_q: ParamId,
    conv_kv: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    text_embed: ParamId,
    text: Vec<TextBlockIds>,
    text_norm: ParamId,
    audio_embed: ParamId,
    bos: ParamId,
    enc: Vec<GlaBlockIds>,
    cross: CrossIds,
    dec: Vec<GlaBlockIds>,
    head_norm: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl Ids {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let id = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
        };
        let ffn = |b: &str| -> Result<FfnIds> {
            Ok(FfnIds {
                gate: id(format!("{b}.ffn_gate"))?,
                up: id(format!("{b}.ffn_up"))?,
                out: id(format!("{b}.ffn_out"))?,
            })
        };
        let gla = |b: String| -> Result<GlaBlockIds> {
            Ok(GlaBlockIds {
                norm1: id(format!("{b}.norm1"))?,
                wq: id(format!("{b}.wq"))?,
                wk: id(format!("{b}.wk"))?,
                wv: id(format!("{b}.wv"))?,
                wg: id(format!("{b}.wg"))?,
                gate_down: id(format!("{b}.gate_down"))?,
                gate_up: id(format!("{b}.gate_up"))?,
                gate_bias: id(format!("{b}.gate_bias"))?,
                head_norm: id(format!("{b}.head_norm"))?,
                wo: id(format!("{b}.wo"))?,
                norm2: id(format!("{b}.norm2"))?,
                ffn: ffn(&b)?,
            })
        };
        let text = (0..cfg.n_text_blocks)
            .map(|i| {
                let b = format!("text.{i}");
                Ok(TextBlockIds {
                    norm1: id(format!("{b}.norm1"))?,
                    wq: id(format!("{b}.wq"))?,
                    wk: id(format!("{b}.wk"))?,
                    wv: id(format!("{b}.wv"))?,
                    wo: id(format!("{b}.wo"))?,
                    norm2: id(format!("{b}.norm2"))?,
                    ffn: ffn(&b)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            text_embed: id("text.embed.weight".into())?,
            text,
            text_norm: id("text.final.norm".into())?,
            audio_embed: id("audio.embed.weight".into())?,
            bos: id("audio.bos.weight".into())?,
            enc: (0..cfg.n_audio_enc_blocks)
                .map(|i| gla(format!("enc.{i}")))
                .collect::<Result<_>>()?,
            cross: CrossIds {
                norm_a: id("cross.0.norm_a".into())?,
                norm_t: id("cross.0.norm_t".into())?,
                conv_q: id("cross.0.conv_q".into())?,
                conv_kv: id("cross.0.conv_kv".into())?,
                wq: id("cross.0.wq".into())?,
                wk: id("cross.0.wk".into())?,
                wv: id("cross.0.wv".into())?,
                wo: id("cross.0.wo".into())?,
            },
            dec: (0..cfg.n_dec_blocks)
                .map(|i| gla(format!("dec.{i}")))
                .collect::<Result<_>>()?,
            head_norm: id("head.0.norm".into())?,
            head_w: id("head.0.weight".into())?,
            head_b: id("head.0.bias".into())?,
        })
    }
}

fn gla_vars(b: &Bound, g: &GlaBlockIds) -> GlaBlockVars {
    GlaBlockVars {
        norm1: b.var(g.norm1),
        wq: b.var(g.wq),
        wk: b.var(g.wk),
        wv: b.var(g.wv),
        wg: b.var(g.wg),
        gate_down: b.var(g.gate_down),
        gate_up: b.var(g.gate_up),
        gate_bias: b.var(g.gate_bias),
        head_norm: b.var(g.head_norm),
        wo: b.var(g.wo),
        norm2: b.var(g.norm2),
        ffn_gate: b.var(g.ffn.gate),
        ffn_up: b.var(g.ffn.up),
        ffn_out: b.var(g.ffn.out),
    }
}

/// The text-conditioned audio token model.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

/// Tape outputs of the audio stack.
#[derive(Clone, Debug)]
pub struct ChunkVars {
    /// `[rows, audio_vocab + 1]`.
    pub logits: Var,
    pub enc_states: Vec<Var>,
    pub dec_states: Vec<Var>,
    pub conv_history: Option<Var>,
}

/// Text keys and values for the cross-attention, fixed for one utterance.
#[derive(Clone, Debug)]
pub struct TextContext {
    pub keys: Tensor,
    pub values: Tensor,
}

/// Everything the audio stack carries between chunks: one recurrent state
/// per GLA layer and the causal convolution history. Its size does not
/// depend on how many tokens were consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceState {
    pub enc: Vec<Tensor>,
    pub dec: Vec<Tensor>,
    pub conv_history: Option<Tensor>,
    pub consumed: usize,
}

/// Result of [`Model::generate`].
#[derive(Clone, Debug)]
pub struct Generation {
    /// Sampled tokens, excluding the prompt and EOS.
    pub tokens: TokenSequence,
    /// True when `max_len` was reached before EOS.
    pub hit_max_len: bool,
    /// State after the prompt was consumed.
    pub prompt_state: InferenceState,
}

#[derive(Clone, Copy, Debug)]
pub struct SamplingOptions {
    pub top_k: usize,
    pub temperature: f64,
    pub max_len: usize,
}

/// Keeps the `k` largest logits (ties to the lower id), renormalizes a
/// tempered softmax over them and draws one id. `k = 1` is argmax and draws
/// nothing from `rng`.
pub fn sample_top_k<R: Rng + ?Sized>(
    logits: &[f64],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    ensure!(k >= 1, "top-k needs k >= 1, got {k}");
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        "temperature must be positive, got {temperature}"
    );
    ensure!(!logits.is_empty(), "cannot sample from empty logits");
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("sample_top_k", "NaN logit"));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if k == 1 {
        return Ok(order[0]);
    }
    order.truncate(k.min(logits.len()));
    let max = logits[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(*order.last().expect("k >= 1"))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in layout(&config) {
            let n: usize = spec.shape.iter().product();
            let t = match spec.init {
                Init::Ones => Tensor::full(spec.shape, 1.0),
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Normal(std) => Tensor::randn(spec.shape, std, &mut rng),
                Init::GateBias => {
                    let data = (0..n)
                        .map(|i| -3.0 + 5.0 * (i as f64 + 0.5) / n as f64)
                        .collect();
                    Tensor::new(spec.shape, data)?
                }
            };
            store.insert(spec.name, t, spec.decay)?;
        }
        Self::from_params(config, store)
    }

    /// Wraps an existing store after checking every expected name, shape
    /// and weight-decay flag, in order.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        ensure!(
            specs.len() == params.len(),
            "parameter store holds {} tensors, configuration expects {}",
            params.len(),
            specs.len()
        );
        for (i, spec) in specs.iter().enumerate() {
            let id = ParamId(i);
            ensure!(
                params.name(id) == spec.name,
                "parameter {i} is {}, expected {}",
                params.name(id),
                spec.name
            );
            ensure!(
                params.get(id).shape() == spec.shape.as_slice(),
                "parameter {} has shape {:?}, expected {:?}",
                spec.name,
                params.get(id).shape(),
                spec.shape
            );
            ensure!(
                params.decays(id) == spec.decay,
                "parameter {} has the wrong weight-decay flag",
                spec.name
            );
        }
        let ids = Ids::resolve(&params, &config)?;
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    /// Names, shapes and decay flags the configuration expects, in order.
    pub fn expected_params(config: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
        layout(config)
            .into_iter()
            .map(|s| (s.name, s.shape, s.decay))
            .collect()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    fn check_text(&self, text_ids: &[usize]) -> Result<()> {
        ensure!(!text_ids.is_empty(), "text input is empty");
        if let Some(&bad) = text_ids.iter().find(|&&i| i >= self.config.text_vocab) {
            return Err(Error::contract(format!(
                "text id {bad} outside vocabulary of {}",
                self.config.text_vocab
            )));
        }
        Ok(())
    }

    fn check_audio(&self, audio_ids: &[usize]) -> Result<()> {
        if let Some(&bad) = audio_ids.iter().find(|&&i| i >= self.config.audio_vocab) {
            return Err(Error::contract(format!(
                "audio input id {bad} outside codebook of {}",
                self.config.audio_vocab
            )));
        }
        Ok(())
    }

    /// Bidirectional text encoder: embedding, then pre-norm blocks of
    /// rotary multi-head self-attention and SwiGLU, then a final norm.
    pub fn text_encode_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        text_ids: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.text_encode_inner(tape, b, text_ids, mode, true)
    }

    pub(crate) fn text_encode_inner(
        &self,
        tape: &mut Tape,
        b: &Bound,
        text_ids: &[usize],
        mode: &mut Mode<'_>,
        rope: bool,
    ) -> Result<Var> {
        self.check_text(text_ids)?;
        let cfg = &self.config;
        let positions: Vec<usize> = (0..text_ids.len()).collect();
        let mut x = tape.embedding(b.var(self.ids.text_embed), text_ids)?;
        for blk in &self.ids.text {
            let h = norm_var(tape, x, b.var(blk.norm1))?;
            let mut q = tape.matmul(h, b.var(blk.wq))?;
            let mut k = tape.matmul(h, b.var(blk.wk))?;
            let v = tape.matmul(h, b.var(blk.wv))?;
            if rope {
                q = rope_heads_var(tape, q, cfg.n_heads, &positions)?;
                k = rope_heads_var(tape, k, cfg.n_heads, &positions)?;
            }
            let a = multi_head_var(tape, q, k, v, cfg.n_heads, false)?;
            let a = tape.matmul(a, b.var(blk.wo))?;
            let a = dropout_var(tape, a, cfg.dropout_text, mode)?;
            x = tape.add(x, a)?;
            let h = norm_var(tape, x, b.var(blk.norm2))?;
            let f = swiglu_var(tape, h, b.var(blk.ffn.gate), b.var(blk.ffn.up), b.var(blk.ffn.out))?;
            let f = dropout_var(tape, f, cfg.dropout_text, mode)?;
            x = tape.add(x, f)?;
        }
        norm_var(tape, x, b.var(self.ids.text_norm))
    }

    fn cross_vars(&self, b: &Bound) -> CrossVars {
        let c = &self.ids.cross;
        CrossVars {
            conv_q: b.var(c.conv_q),
            conv_kv: b.var(c.conv_kv),
            wq: b.var(c.wq),
            wk: b.var(c.wk),
            wv: b.var(c.wv),
            wo: b.var(c.wo),
        }
    }

    /// Encodes `text_ids` and projects the cross-attention keys and values.
    pub fn text_context_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        text_ids: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        let h = self.text_encode_var(tape, b, text_ids, mode)?;
        let h = norm_var(tape, h, b.var(self.ids.cross.norm_t))?;
        cross_keys_values(tape, h, &self.cross_vars(b))
    }

    /// Runs the audio stack over `inputs`, where id `audio_vocab` stands for
    /// the begin-of-audio embedding. Row `t` of the logits predicts the token
    /// after `inputs[t]`.
    #[allow(clippy::too_many_arguments)]
    pub fn audio_chunk_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        text_k: Var,
        text_v: Var,
        inputs: &[usize],
        enc_s0: &[Var],
        dec_s0: &[Var],
        conv_history: Option<Var>,
    ) -> Result<ChunkVars> {
        let cfg = &self.config;
        ensure!(!inputs.is_empty(), "audio chunk is empty");
        if let Some(&bad) = inputs.iter().find(|&&i| i > cfg.audio_vocab) {
            return Err(Error::contract(format!(
                "audio input id {bad} outside codebook of {}",
                cfg.audio_vocab
            )));
        }
        ensure!(
            enc_s0.len() == cfg.n_audio_enc_blocks && dec_s0.len() == cfg.n_dec_blocks,
            "initial states cover {}+{} layers, model has {}+{}",
            enc_s0.len(),
            dec_s0.len(),
            cfg.n_audio_enc_blocks,
            cfg.n_dec_blocks
        );
        for &s in enc_s0.iter().chain(dec_s0) {
            ensure!(
                tape.shape(s) == [cfg.hk(), cfg.d_v],
                "initial state has shape {:?}, expected [{}, {}]",
                tape.shape(s),
                cfg.hk(),
                cfg.d_v
            );
        }
        let table = tape.concat(&[b.var(self.ids.audio_embed), b.var(self.ids.bos)], 0)?;
        let mut x = tape.embedding(table, inputs)?;
        let mut enc_states = Vec::with_capacity(enc_s0.len());
        for (blk, &s0) in self.ids.enc.iter().zip(enc_s0) {
            let (y, s) = gla_block_var(tape, x, s0, &gla_vars(b, blk), cfg.n_heads, cfg.d_k, cfg.d_v)?;
            x = y;
            enc_states.push(s);
        }
        let a = norm_var(tape, x, b.var(self.ids.cross.norm_a))?;
        let (c, conv_history) =
            cross_attend_var(tape, a, text_k, text_v, &self.cross_vars(b), cfg.n_heads, conv_history)?;
        x = tape.add(x, c)?;
        let mut dec_states = Vec::with_capacity(dec_s0.len());
        for (blk, &s0) in self.ids.dec.iter().zip(dec_s0) {
            let (y, s) = gla_block_var(tape, x, s0, &gla_vars(b, blk), cfg.n_heads, cfg.d_k, cfg.d_v)?;
            x = y;
            dec_states.push(s);
        }
        let h = norm_var(tape, x, b.var(self.ids.head_norm))?;
        let logits = tape.matmul(h, b.var(self.ids.head_w))?;
        let logits = tape.add(logits, b.var(self.ids.head_b))?;
        Ok(ChunkVars {
            logits,
            enc_states,
            dec_states,
            conv_history,
        })
    }

    fn empty_history(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let k = self.config.conv_pos_kernel;
        if k <= 1 {
            return Ok(None);
        }
        let d = self.config.d_model;
        tape.constant([k - 1, d], vec![0.0; (k - 1) * d]).map(Some)
    }

    /// Teacher-forced pass over `[BOS, audio_ids...]`, giving
    /// `audio_ids.len() + 1` rows of logits; the last row predicts EOS.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        b: &Bound,
        text_ids: &[usize],
        audio_ids: &[usize],
        states: &StateVars,
        mode: &mut Mode<'_>,
    ) -> Result<ChunkVars> {
        self.check_audio(audio_ids)?;
        let (k, v) = self.text_context_var(tape, b, text_ids, mode)?;
        let mut inputs = Vec::with_capacity(audio_ids.len() + 1);
        inputs.push(self.config.audio_vocab);
        inputs.extend_from_slice(audio_ids);
        let hist = self.empty_history(tape)?;
        self.audio_chunk_var(tape, b, k, v, &inputs, &states.enc, &states.dec, hist)
    }

    /// Eval-mode logits `[audio_ids.len() + 1, audio_vocab + 1]`.
    pub fn forward(
        &self,
        text_ids: &[usize],
        audio_ids: &[usize],
        states: Option<&StateBundle>,
    ) -> Result<Tensor> {
        Ok(self.forward_with_states(text_ids, audio_ids, states)?.0)
    }

    /// [`Self::forward`] plus the inference state after the last input.
    pub fn forward_with_states(
        &self,
        text_ids: &[usize],
        audio_ids: &[usize],
        states: Option<&StateBundle>,
    ) -> Result<(Tensor, InferenceState)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let sv = self.bind_states(&mut tape, states)?;
        let out = self.forward_var(&mut tape, &b, text_ids, audio_ids, &sv, &mut Mode::Eval)?;
        let state = InferenceState {
            enc: out.enc_states.iter().map(|&v| tape.tensor(v)).collect(),
            dec: out.dec_states.iter().map(|&v| tape.tensor(v)).collect(),
            conv_history: out.conv_history.map(|v| tape.tensor(v)),
            consumed: audio_ids.len() + 1,
        };
        Ok((tape.tensor(out.logits), state))
    }

    pub fn bind_states(&self, tape: &mut Tape, states: Option<&StateBundle>) -> Result<StateVars> {
        match states {
            Some(s) => {
                s.check(&self.config)?;
                s.bind(tape, false)
            }
            None => StateVars::zeros(tape, &self.config),
        }
    }

    /// Eval-mode text encoding `[N_text, d_model]`.
    pub fn text_encode(&self, text_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let h = self.text_encode_var(&mut tape, &b, text_ids, &mut Mode::Eval)?;
        Ok(tape.tensor(h))
    }

    pub fn text_context(&self, text_ids: &[usize]) -> Result<TextContext> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let (k, v) = self.text_context_var(&mut tape, &b, text_ids, &mut Mode::Eval)?;
        Ok(TextContext {
            keys: tape.tensor(k),
            values: tape.tensor(v),
        })
    }

    /// State before any audio input.
    pub fn initial_state(&self, states: Option<&StateBundle>) -> Result<InferenceState> {
        let cfg = &self.config;
        let (enc, dec) = match states {
            Some(s) => {
                s.check(cfg)?;
                (
                    (0..cfg.n_audio_enc_blocks)
                        .map(|l| s.layer_state(super::states::Stack::Encoder, l))
                        .collect::<Result<_>>()?,
                    (0..cfg.n_dec_blocks)
                        .map(|l| s.layer_state(super::states::Stack::Decoder, l))
                        .collect::<Result<_>>()?,
                )
            }
            None => (
                vec![Tensor::zeros([cfg.hk(), cfg.d_v]); cfg.n_audio_enc_blocks],
                vec![Tensor::zeros([cfg.hk(), cfg.d_v]); cfg.n_dec_blocks],
            ),
        };
        let k = cfg.conv_pos_kernel;
        let conv_history = (k > 1).then(|| Tensor::zeros([k - 1, cfg.d_model]));
        Ok(InferenceState {
            enc,
            dec,
            conv_history,
            consumed: 0,
        })
    }

    /// Advances `state` over `inputs` (id `audio_vocab` is BOS) and returns
    /// the logits of every input row.
    pub fn forward_chunk(
        &self,
        ctx: &TextContext,
        inputs: &[usize],
        state: &mut InferenceState,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let k = tape.constant(ctx.keys.shape().to_vec(), ctx.keys.data().to_vec())?;
        let v = tape.constant(ctx.values.shape().to_vec(), ctx.values.data().to_vec())?;
        let konst = |tape: &mut Tape, t: &Tensor| tape.constant(t.shape().to_vec(), t.data().to_vec());
        let enc = state.enc.iter().map(|t| konst(&mut tape, t)).collect::<Result<Vec<_>>>()?;
        let dec = state.dec.iter().map(|t| konst(&mut tape, t)).collect::<Result<Vec<_>>>()?;
        let hist = state.conv_history.as_ref().map(|t| konst(&mut tape, t)).transpose()?;
        let out = self.audio_chunk_var(&mut tape, &b, k, v, inputs, &enc, &dec, hist)?;
        state.enc = out.enc_states.iter().map(|&v| tape.tensor(v)).collect();
        state.dec = out.dec_states.iter().map(|&v| tape.tensor(v)).collect();
        state.conv_history = out.conv_history.map(|v| tape.tensor(v));
        state.consumed += inputs.len();
        Ok(tape.tensor(out.logits))
    }

    /// Consumes BOS and the prompt, then samples until EOS or `max_len`
    /// new tokens.
    pub fn generate<R: RngCore + ?Sized>(
        &self,
        text_ids: &[usize],
        prompt: &[usize],
        states: Option<&StateBundle>,
        opts: SamplingOptions,
        rng: &mut R,
    ) -> Result<Generation> {
        ensure!(opts.max_len >= 1, "max_len must be at least 1");
        self.check_audio(prompt)?;
        let ctx = self.text_context(text_ids)?;
        let mut state = self.initial_state(states)?;
        let mut inputs = vec![self.config.audio_vocab];
        inputs.extend_from_slice(prompt);
        let logits = self.forward_chunk(&ctx, &inputs, &mut state)?;
        let prompt_state = state.clone();
        let width = self.config.audio_vocab + 1;
        let mut last = logits.data()[logits.numel() - width..].to_vec();
        let eos = self.config.eos_id();
        let mut out = Vec::new();
        let mut hit_max_len = true;
        while out.len() < opts.max_len {
            let tok = sample_top_k(&last, opts.top_k, opts.temperature, rng)?;
            if tok == eos {
                hit_max_len = false;
                break;
            }
            out.push(tok);
            if out.len() == opts.max_len {
                break;
            }
            last = self.forward_chunk(&ctx, &[tok], &mut state)?.into_data();
        }
        Ok(Generation {
            tokens: TokenSequence::audio(out, self.config.audio_vocab)?,
            hit_max_len,
            prompt_state,
        })
    }
}
