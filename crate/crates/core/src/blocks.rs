//! Cover Embedding, token shift, and the DR block built from a signal-mixing
//! (attention) sub-layer and a channel-mixing (feed-forward) sub-layer.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::cowkv::CoWkvParams;
use crate::error::{invalid, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{uniform, Bindings, ParamId, ParamKind, ParamStore};

/// How Cover Embedding fills window slots that run past the last sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TailPadding {
    #[default]
    Zero,
    /// Repeat the last sample.
    Replicate,
}

impl TailPadding {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Replicate => "replicate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "replicate" => Ok(Self::Replicate),
            other => Err(invalid(format!("unknown padding `{other}`"))),
        }
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoverEmbedConfig {
    pub cover_length: usize,
    pub embed_dim: usize,
    pub padding: TailPadding,
}

/// Window slicing plus an `n -> C` projection with bias.
#[derive(Clone, Debug)]
pub struct CoverEmbed {
    pub config: CoverEmbedConfig,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl CoverEmbed {
    pub fn new(store: &mut ParamStore, prefix: &str, config: CoverEmbedConfig, rng: &mut impl Rng) -> Self {
        let n = config.cover_length;
        let bound = 1.0 / libm::sqrt(n as f64);
        Self {
            config,
            weight: store.add(
                &format!("{prefix}.weight"),
                uniform(&[n, config.embed_dim], bound, rng),
                ParamKind::Weight,
            ),
            bias: store.add(
                &format!("{prefix}.bias"),
                Tensor::zeros(&[config.embed_dim]),
                ParamKind::Weight,
            ),
        }
    }

    /// `[.., T] -> [.., T, C]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let windows = tape.cover_windows(x, self.config.cover_length, self.config.padding)?;
        let h = tape.matmul(windows, p[self.weight])?;
        tape.add(h, p[self.bias])
    }
}

/// Value-level Cover Embedding of one signal: token `t` is the projection of
/// `x[t..t + n]`, padded past the end, so the output always has `T` tokens.
pub fn cover_embed(x: &[f64], config: &CoverEmbedConfig, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::Empty("cover_embed"));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::from_vec(x.to_vec())?);
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let windows = tape.cover_windows(xv, config.cover_length, config.padding)?;
    let h = tape.matmul(windows, w)?;
    let out = tape.add(h, b)?;
    Ok(tape.value(out).clone())
}

/// Value-level token shift over a `[T, C]` (or batched) tensor.
pub fn token_shift(x: &Tensor, mix: &[f64]) -> Result<Tensor> {
    if mix.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(invalid("token-shift mix must lie in [0, 1]"));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mv = tape.constant(Tensor::from_vec(mix.to_vec())?);
    let out = tape.token_shift(xv, mv)?;
    Ok(tape.value(out).clone())
}

/// Per-token normalization over channels followed by a learned scale and offset.
#[derive(Clone, Debug)]
pub struct PreNorm {
    pub scale: ParamId,
    pub offset: ParamId,
}

impl PreNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            scale: store.add(&format!("{prefix}.scale"), Tensor::full(&[dim], 1.0), ParamKind::Weight),
            offset: store.add(&format!("{prefix}.offset"), Tensor::zeros(&[dim]), ParamKind::Weight),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let n = tape.normalize_last(x, NORM_EPS)?;
        let n = tape.mul(n, p[self.scale])?;
        tape.add(n, p[self.offset])
    }
}

/// Affine map `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(inputs as f64);
        Self {
            weight: store.add(
                &format!("{prefix}.weight"),
                uniform(&[inputs, outputs], bound, rng),
                ParamKind::Weight,
            ),
            bias: bias.then(|| {
                store.add(&format!("{prefix}.bias"), Tensor::zeros(&[outputs]), ParamKind::Weight)
            }),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => tape.add(h, p[b]),
            None => Ok(h),
        }
    }
}

fn mix_param(store: &mut ParamStore, name: &str, dim: usize) -> ParamId {
    store.add(name, Tensor::full(&[dim], 0.5), ParamKind::Mix)
}

fn square(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
    let bound = 1.0 / libm::sqrt(rows as f64);
    store.add(name, uniform(&[rows, cols], bound, rng), ParamKind::Weight)
}

/// Token shift, `R/K/V` projections, Co-WKV, receptance gate, output projection.
#[derive(Clone, Debug)]
pub struct SignalMix {
    pub mix_r: ParamId,
    pub mix_k: ParamId,
    pub mix_v: ParamId,
    pub w_r: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub decay: ParamId,
    pub bonus: ParamId,
}

impl SignalMix {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let init = CoWkvParams::init(dim);
        Self {
            mix_r: mix_param(store, &format!("{prefix}.mix_r"), dim),
            mix_k: mix_param(store, &format!("{prefix}.mix_k"), dim),
            mix_v: mix_param(store, &format!("{prefix}.mix_v"), dim),
            w_r: square(store, &format!("{prefix}.w_r"), dim, dim, rng),
            w_k: square(store, &format!("{prefix}.w_k"), dim, dim, rng),
            w_v: square(store, &format!("{prefix}.w_v"), dim, dim, rng),
            w_o: square(store, &format!("{prefix}.w_o"), dim, dim, rng),
            decay: store.add(
                &format!("{prefix}.decay"),
                Tensor::from_vec(init.decay).expect("finite"),
                ParamKind::Weight,
            ),
            bonus: store.add(
                &format!("{prefix}.bonus"),
                Tensor::from_vec(init.bonus).expect("finite"),
                ParamKind::Weight,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let xr = tape.token_shift(x, p[self.mix_r])?;
        let xk = tape.token_shift(x, p[self.mix_k])?;
        let xv = tape.token_shift(x, p[self.mix_v])?;
        let r = tape.matmul(xr, p[self.w_r])?;
        let k = tape.matmul(xk, p[self.w_k])?;
        let v = tape.matmul(xv, p[self.w_v])?;
        let wkv = tape.cowkv(k, v, p[self.decay], p[self.bonus])?;
        let gate = tape.sigmoid(r)?;
        let gated = tape.mul(gate, wkv)?;
        tape.matmul(gated, p[self.w_o])
    }
}

/// Token shift, receptance gate, squared-ReLU key, value projection.
#[derive(Clone, Debug)]
pub struct ChannelMix {
    pub mix_r: ParamId,
    pub mix_k: ParamId,
    pub w_r: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl ChannelMix {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            mix_r: mix_param(store, &format!("{prefix}.mix_r"), dim),
            mix_k: mix_param(store, &format!("{prefix}.mix_k"), dim),
            w_r: square(store, &format!("{prefix}.w_r"), dim, dim, rng),
            w_k: square(store, &format!("{prefix}.w_k"), dim, hidden, rng),
            w_v: square(store, &format!("{prefix}.w_v"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let xr = tape.token_shift(x, p[self.mix_r])?;
        let xk = tape.token_shift(x, p[self.mix_k])?;
        let r = tape.matmul(xr, p[self.w_r])?;
        let k = tape.matmul(xk, p[self.w_k])?;
        let k = tape.relu(k)?;
        let k = tape.square(k)?;
        let v = tape.matmul(k, p[self.w_v])?;
        let gate = tape.sigmoid(r)?;
        tape.mul(gate, v)
    }
}

/// `y = x + signal_mix(norm1(x)); out = y + channel_mix(norm2(y))`.
#[derive(Clone, Debug)]
pub struct DrBlock {
    pub norm1: PreNorm,
    pub signal: SignalMix,
    pub norm2: PreNorm,
    pub channel: ChannelMix,
}

impl DrBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: PreNorm::new(store, &format!("{prefix}.norm1"), dim),
            signal: SignalMix::new(store, &format!("{prefix}.signal"), dim, rng),
            norm2: PreNorm::new(store, &format!("{prefix}.norm2"), dim),
            channel: ChannelMix::new(store, &format!("{prefix}.channel"), dim, hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.signal.forward(tape, p, h)?;
        let y = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, y)?;
        let h = self.channel.forward(tape, p, h)?;
        tape.add(y, h)
    }

    /// Output projections of both sub-layers; zeroing them reduces the block
    /// to its residual path.
    pub fn output_projections(&self) -> [ParamId; 2] {
        [self.signal.w_o, self.channel.w_v]
    }
}

/// A stack of DR blocks applied in order.
#[derive(Clone, Debug)]
pub struct DrStack {
    pub blocks: Vec<DrBlock>,
}

impl DrStack {
    pub fn new(store: &mut ParamStore, prefix: &str, depth: usize, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            blocks: (0..depth)
                .map(|i| DrBlock::new(store, &format!("{prefix}.{i}"), dim, hidden, rng))
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(tape, p, x)?;
        }
        Ok(x)
    }
}
