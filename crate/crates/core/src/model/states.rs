use rand::Rng;

use super::config::ModelConfig;
use crate::error::{ensure, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Initial state of one head.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadState {
    /// `S0: [d_k, d_v]`.
    Full(Tensor),
    /// `S0 = U^T W` with `U: [r, d_k]`, `W: [r, d_v]`.
    Factored { u: Tensor, w: Tensor },
}

impl HeadState {
    pub fn materialize(&self) -> Result<Tensor> {
        match self {
            HeadState::Full(s) => Ok(s.clone()),
            HeadState::Factored { u, w } => u.transposed()?.matmul(w),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            HeadState::Full(s) => vec![s],
            HeadState::Factored { u, w } => vec![u, w],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            HeadState::Full(s) => vec![s],
            HeadState::Factored { u, w } => vec![u, w],
        }
    }
}

/// Parameterization of a [`StateBundle`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StateRank {
    Full,
    Factored(usize),
}

impl From<StateRank> for String {
    fn from(r: StateRank) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for StateRank {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::fmt::Display for StateRank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateRank::Full => write!(f, "full"),
            StateRank::Factored(r) => write!(f, "{r}"),
        }
    }
}

impl std::str::FromStr for StateRank {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(StateRank::Full);
        }
        match s.parse::<usize>() {
            Ok(r) if r >= 1 => Ok(StateRank::Factored(r)),
            _ => Err(Error::contract(format!("rank must be a positive integer or \"full\", got {s:?}"))),
        }
    }
}

impl crate::config::KvValue for StateRank {
    fn parse_kv(raw: &str, _key: &str) -> Result<Self> {
        raw.parse()
    }
    fn to_kv(&self) -> String {
        self.to_string()
    }
}

/// Which GLA stack a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        }
    }
}

/// Initial recurrent states for every head of every GLA layer in the audio
/// encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBundle {
    rank: StateRank,
    d_k: usize,
    d_v: usize,
    enc: Vec<Vec<HeadState>>,
    dec: Vec<Vec<HeadState>>,
}

/// Tape variables of a bound bundle.
#[derive(Clone, Debug)]
pub struct StateVars {
    /// Per encoder layer, `[H*d_k, d_v]`.
    pub enc: Vec<Var>,
    /// Per decoder layer, `[H*d_k, d_v]`.
    pub dec: Vec<Var>,
    /// The bundle's own tensors in [`StateBundle::tensors`] order.
    pub leaves: Vec<Var>,
}

impl StateBundle {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, StateRank::Full, |r, c| Tensor::zeros([r, c]))
    }

    /// Factored bundle with gaussian entries of standard deviation `sigma`.
    pub fn random_factored<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        rank: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            rank >= 1 && rank <= cfg.d_k.min(cfg.d_v),
            "state rank {rank} outside [1, min(d_k, d_v) = {}]",
            cfg.d_k.min(cfg.d_v)
        );
        Ok(Self::build(cfg, StateRank::Factored(rank), |r, c| {
            Tensor::randn([r, c], sigma, rng)
        }))
    }

    fn build(cfg: &ModelConfig, rank: StateRank, mut make: impl FnMut(usize, usize) -> Tensor) -> Self {
        let mut layer = |_: usize| -> Vec<HeadState> {
            (0..cfg.n_heads)
                .map(|_| match rank {
                    StateRank::Full => HeadState::Full(make(cfg.d_k, cfg.d_v)),
                    StateRank::Factored(r) => {
                        let u = make(r, cfg.d_k);
                        let w = make(r, cfg.d_v);
                        HeadState::Factored { u, w }
                    }
                })
                .collect()
        };
        let enc = (0..cfg.n_audio_enc_blocks).map(&mut layer).collect();
        let dec = (0..cfg.n_dec_blocks).map(&mut layer).collect();
        Self {
            rank,
            d_k: cfg.d_k,
            d_v: cfg.d_v,
            enc,
            dec,
        }
    }

    /// Assembles a bundle from explicit per-layer head states.
    pub fn from_layers(
        rank: StateRank,
        d_k: usize,
        d_v: usize,
        enc: Vec<Vec<HeadState>>,
        dec: Vec<Vec<HeadState>>,
    ) -> Result<Self> {
        let b = Self {
            rank,
            d_k,
            d_v,
            enc,
            dec,
        };
        for (stack, l, h, hs) in b.iter_heads() {
            let ok = match (rank, hs) {
                (StateRank::Full, HeadState::Full(s)) => s.shape() == [d_k, d_v],
                (StateRank::Factored(r), HeadState::Factored { u, w }) => {
                    u.shape() == [r, d_k] && w.shape() == [r, d_v]
                }
                _ => false,
            };
            ensure!(ok, "{}.{l} head {h} does not match rank {rank} with d_k={d_k}, d_v={d_v}", stack.prefix());
        }
        Ok(b)
    }

    pub fn rank(&self) -> StateRank {
        self.rank
    }

    pub fn layers(&self, stack: Stack) -> &[Vec<HeadState>] {
        match stack {
            Stack::Encoder => &self.enc,
            Stack::Decoder => &self.dec,
        }
    }

    pub fn iter_heads(&self) -> impl Iterator<Item = (Stack, usize, usize, &HeadState)> {
        let e = self.enc.iter().enumerate().flat_map(|(l, hs)| {
            hs.iter().enumerate().map(move |(h, s)| (Stack::Encoder, l, h, s))
        });
        let d = self.dec.iter().enumerate().flat_map(|(l, hs)| {
            hs.iter().enumerate().map(move |(h, s)| (Stack::Decoder, l, h, s))
        });
        e.chain(d)
    }

    /// Every tunable tensor, encoder layers first, then heads, then `U`
    /// before `W`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.enc
            .iter()
            .chain(&self.dec)
            .flatten()
            .flat_map(HeadState::tensors)
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.enc
            .iter_mut()
            .chain(self.dec.iter_mut())
            .flatten()
            .flat_map(HeadState::tensors_mut)
            .collect()
    }

    /// Names matching [`Self::tensors`]: `state.<stack>.<layer>.<head>.<s|u|w>`.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (stack, l, h, hs) in self.iter_heads() {
            let base = format!("state.{}.{l}.{h}", stack.prefix());
            match hs {
                HeadState::Full(_) => out.push(format!("{base}.s")),
                HeadState::Factored { .. } => {
                    out.push(format!("{base}.u"));
                    out.push(format!("{base}.w"));
                }
            }
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        ensure!(
            self.d_k == cfg.d_k && self.d_v == cfg.d_v,
            "state bundle head shape {}x{} does not match model {}x{}",
            self.d_k,
            self.d_v,
            cfg.d_k,
            cfg.d_v
        );
        ensure!(
            self.enc.len() == cfg.n_audio_enc_blocks && self.dec.len() == cfg.n_dec_blocks,
            "state bundle covers {}+{} layers, model has {}+{}",
            self.enc.len(),
            self.dec.len(),
            cfg.n_audio_enc_blocks,
            cfg.n_dec_blocks
        );
        ensure!(
            self.enc.iter().chain(&self.dec).all(|l| l.len() == cfg.n_heads),
            "state bundle head count does not match the model's {} heads",
            cfg.n_heads
        );
        Ok(())
    }

    /// Stacked `[H*d_k, d_v]` state of one layer.
    pub fn layer_state(&self, stack: Stack, layer: usize) -> Result<Tensor> {
        let heads = &self.layers(stack)[layer];
        let mut data = Vec::with_capacity(heads.len() * self.d_k * self.d_v);
        for h in heads {
            data.extend_from_slice(h.materialize()?.data());
        }
        Tensor::new([heads.len() * self.d_k, self.d_v], data)
    }

    /// Puts the bundle on `tape`. With `trainable`, its tensors become
    /// gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<StateVars> {
        let mut leaves = Vec::new();
        let mut leaf = |tape: &mut Tape, t: &Tensor| -> Result<Var> {
            let v = if trainable {
                tape.leaf(&t.clone().with_grad())
            } else {
                tape.constant(t.shape().to_vec(), t.data().to_vec())?
            };
            leaves.push(v);
            Ok(v)
        };
        let mut stack_vars = |tape: &mut Tape, layers: &[Vec<HeadState>]| -> Result<Vec<Var>> {
            let mut out = Vec::with_capacity(layers.len());
            for heads in layers {
                let mut hv = Vec::with_capacity(heads.len());
                for h in heads {
                    hv.push(match h {
                        HeadState::Full(s) => leaf(tape, s)?,
                        HeadState::Factored { u, w } => {
                            let u = leaf(tape, u)?;
                            let w = leaf(tape, w)?;
                            let ut = tape.transpose(u)?;
                            tape.matmul(ut, w)?
                        }
                    });
                }
                out.push(if hv.len() == 1 { hv[0] } else { tape.concat(&hv, 0)? });
            }
            Ok(out)
        };
        let enc = stack_vars(tape, &self.enc)?;
        let dec = stack_vars(tape, &self.dec)?;
        Ok(StateVars { enc, dec, leaves })
    }
}

impl StateVars {
    /// All-zero constant states for `cfg`.
    pub fn zeros(tape: &mut Tape, cfg: &ModelConfig) -> Result<Self> {
        let shape = [cfg.hk(), cfg.d_v];
        let mut make = |n: usize| -> Result<Vec<Var>> {
            (0..n)
                .map(|_| tape.constant(shape, vec![0.0; cfg.hk() * cfg.d_v]))
                .collect()
        };
        Ok(Self {
            enc: make(cfg.n_audio_enc_blocks)?,
            dec: make(cfg.n_dec_blocks)?,
            leaves: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_one_stores_one_vector_pair_per_head() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = StateBundle::random_factored(&cfg, 1, 0.02, &mut rng).unwrap();
        let per_head = cfg.d_k + cfg.d_v;
        assert_eq!(b.numel(), per_head * cfg.n_heads * cfg.n_gla_layers());
        assert_eq!(b.tensors().len(), b.tensor_names().len());
        assert!(StateBundle::random_factored(&cfg, cfg.d_k + 1, 0.02, &mut rng).is_err());
    }

    #[test]
    fn bound_layer_state_matches_materialized() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = StateBundle::random_factored(&cfg, 2, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = b.bind(&mut tape, true).unwrap();
        assert_eq!(vars.leaves.len(), b.tensors().len());
        let want = b.layer_state(Stack::Decoder, 0).unwrap();
        assert_eq!(tape.tensor(vars.dec[0]), want);
    }

    #[test]
    fn rank_parses() {
        assert_eq!("full".parse::<StateRank>().unwrap(), StateRank::Full);
        assert_eq!("3".parse::<StateRank>().unwrap(), StateRank::Factored(3));
        assert!("0".parse::<StateRank>().is_err());
    }
}
