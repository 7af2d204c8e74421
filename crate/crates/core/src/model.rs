//! Encoder `E`, denoising decoder `G_s`, and representation decoder `G_n`.
//!
//! The encoder maps a normalized signal to a pair of factor sequences: content
//! `Z_s` and context `Z_n`, each `T x D`, produced by two linear heads on a
//! shared trunk. Both decoders take `concat(Z_s, Z_n)` and return a length-`T`
//! signal; they share an architecture but not parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{CoverEmbed, CoverEmbedConfig, DrStack, Linear, PreNorm, TailPadding};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bindings, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub channels: usize,
    pub factor_dim: usize,
    pub hidden: usize,
    pub cover_length: usize,
    pub padding: TailPadding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_width(12, 64)
    }
}

impl ModelConfig {
    /// `factor_dim = C / 2`, channel-mix width `4C`, cover length 3.
    pub fn with_width(n_blocks: usize, channels: usize) -> Self {
        Self {
            n_blocks,
            channels,
            factor_dim: (channels / 2).max(1),
            hidden: 4 * channels,
            cover_length: 3,
            padding: TailPadding::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.factor_dim == 0 || self.hidden == 0 {
            return Err(invalid("model widths must be >= 1"));
        }
        if self.cover_length == 0 {
            return Err(invalid("cover_length must be >= 1"));
        }
        Ok(())
    }
}

/// Content and context factors, each `[.., T, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    pub content: Tensor,
    pub context: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: CoverEmbed,
    pub norm_in: PreNorm,
    pub trunk: DrStack,
    pub norm_out: PreNorm,
    pub head_content: Linear,
    pub head_context: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub input: Linear,
    pub norm_in: PreNorm,
    pub trunk: DrStack,
    pub norm_out: PreNorm,
    pub head: Linear,
}

impl Decoder {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        Self {
            input: Linear::new(store, &format!("{prefix}.input"), 2 * cfg.factor_dim, c, true, rng),
            norm_in: PreNorm::new(store, &format!("{prefix}.norm_in"), c),
            trunk: DrStack::new(store, &format!("{prefix}.blocks"), cfg.n_blocks, c, cfg.hidden, rng),
            norm_out: PreNorm::new(store, &format!("{prefix}.norm_out"), c),
            head: Linear::new(store, &format!("{prefix}.head"), c, 1, true, rng),
        }
    }

    /// `[B, T, D] x [B, T, D] -> [B, T]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, content: Var, context: Var) -> Result<Var> {
        if tape.shape(content) != tape.shape(context) {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: tape.shape(content).to_vec(),
                right: tape.shape(context).to_vec(),
            });
        }
        let z = tape.concat(&[content, context])?;
        let h = self.input.forward(tape, p, z)?;
        let h = self.norm_in.forward(tape, p, h)?;
        let h = self.trunk.forward(tape, p, h)?;
        let h = self.norm_out.forward(tape, p, h)?;
        let y = self.head.forward(tape, p, h)?;
        let shape = tape.shape(y);
        let shape = shape[..shape.len() - 1].to_vec();
        tape.reshape(y, &shape)
    }
}

/// The full model: one encoder and two decoders over a single parameter store.
#[derive(Clone, Debug)]
pub struct Dremnet {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub signal_decoder: Decoder,
    pub repr_decoder: Decoder,
}

impl Dremnet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let encoder = Encoder {
            embed: CoverEmbed::new(
                &mut store,
                "encoder.embed",
                CoverEmbedConfig {
                    cover_length: config.cover_length,
                    embed_dim: c,
                    padding: config.padding,
                },
                &mut rng,
            ),
            norm_in: PreNorm::new(&mut store, "encoder.norm_in", c),
            trunk: DrStack::new(&mut store, "encoder.blocks", config.n_blocks, c, config.hidden, &mut rng),
            norm_out: PreNorm::new(&mut store, "encoder.norm_out", c),
            head_content: Linear::new(&mut store, "encoder.head_content", c, config.factor_dim, true, &mut rng),
            head_context: Linear::new(&mut store, "encoder.head_context", c, config.factor_dim, true, &mut rng),
        };
        let signal_decoder = Decoder::new(&mut store, "decoder_s", &config, &mut rng);
        let repr_decoder = Decoder::new(&mut store, "decoder_n", &config, &mut rng);
        Ok(Self {
            config,
            params: store,
            encoder,
            signal_decoder,
            repr_decoder,
        })
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bindings {
        self.params.bind(tape, requires_grad)
    }

    /// `[B, T] -> ([B, T, D], [B, T, D])`.
    pub fn encode_on(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<(Var, Var)> {
        let e = &self.encoder;
        let h = e.embed.forward(tape, p, x)?;
        let h = e.norm_in.forward(tape, p, h)?;
        let h = e.trunk.forward(tape, p, h)?;
        let h = e.norm_out.forward(tape, p, h)?;
        Ok((
            e.head_content.forward(tape, p, h)?,
            e.head_context.forward(tape, p, h)?,
        ))
    }

    /// `G_s`.
    pub fn decode_signal_on(&self, tape: &mut Tape, p: &Bindings, content: Var, context: Var) -> Result<Var> {
        self.signal_decoder.forward(tape, p, content, context)
    }

    /// `G_n`.
    pub fn decode_repr_on(&self, tape: &mut Tape, p: &Bindings, content: Var, context: Var) -> Result<Var> {
        self.repr_decoder.forward(tape, p, content, context)
    }

    pub fn encode(&self, x: &Tensor) -> Result<FactorPair> {
        let (batched, squeeze) = as_batch(x)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(batched);
        let (zs, zn) = self.encode_on(&mut tape, &p, xv)?;
        let fix = |t: &Tensor| if squeeze { drop_batch(t) } else { Ok(t.clone()) };
        Ok(FactorPair {
            content: fix(tape.value(zs))?,
            context: fix(tape.value(zn))?,
        })
    }

    pub fn decode_signal(&self, content: &Tensor, context: &Tensor) -> Result<Tensor> {
        self.decode_values(content, context, false)
    }

    pub fn decode_repr(&self, content: &Tensor, context: &Tensor) -> Result<Tensor> {
        self.decode_values(content, context, true)
    }

    fn decode_values(&self, content: &Tensor, context: &Tensor, repr: bool) -> Result<Tensor> {
        let squeeze = content.rank() == 2;
        let lift = |t: &Tensor| {
            if t.rank() == 2 {
                let mut s = alloc::vec![1];
                s.extend_from_slice(t.shape());
                t.reshape(&s)
            } else {
                Ok(t.clone())
            }
        };
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let zs = tape.constant(lift(content)?);
        let zn = tape.constant(lift(context)?);
        let out = if repr {
            self.decode_repr_on(&mut tape, &p, zs, zn)?
        } else {
            self.decode_signal_on(&mut tape, &p, zs, zn)?
        };
        if squeeze {
            drop_batch(tape.value(out))
        } else {
            Ok(tape.value(out).clone())
        }
    }

    /// Denoises a normalized signal (`[T]` or `[B, T]`).
    ///
    /// The context factor is the zero tensor unless a clean `reference` is
    /// supplied, in which case its encoded context factor is used.
    pub fn denoise(&self, noisy: &Tensor, reference: Option<&Tensor>) -> Result<Tensor> {
        let factors = self.encode(noisy)?;
        let context = match reference {
            Some(r) => {
                if r.shape() != noisy.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "denoise",
                        left: noisy.shape().to_vec(),
                        right: r.shape().to_vec(),
                    });
                }
                self.encode(r)?.context
            }
            None => Tensor::zeros(factors.context.shape()),
        };
        self.decode_signal(&factors.content, &context)
    }

    /// Named tensors for checkpointing, in store order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(n, t)| (String::from(n), t.clone()))
            .collect()
    }

    pub fn parameter(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }
}

fn as_batch(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.rank() {
        1 => {
            if x.is_empty() {
                return Err(Error::Empty("encode"));
            }
            Ok((x.reshape(&[1, x.len()])?, true))
        }
        2 => {
            if x.shape()[1] == 0 {
                return Err(Error::Empty("encode"));
            }
            Ok((x.clone(), false))
        }
        _ => Err(invalid(format!("expected [T] or [B, T] signal, got {:?}", x.shape()))),
    }
}

fn drop_batch(t: &Tensor) -> Result<Tensor> {
    t.reshape(&t.shape()[1..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dremnet {
        Dremnet::new(ModelConfig::with_width(1, 8), 3).unwrap()
    }

    fn signal(t: usize) -> Tensor {
        Tensor::from_vec((0..t).map(|i| 3.0 - 0.1 * i as f64).collect()).unwrap()
    }

    #[test]
    fn shapes_are_length_preserving() {
        let m = tiny();
        for t in [1, 2, 7] {
            let f = m.encode(&signal(t)).unwrap();
            assert_eq!(f.content.shape(), &[t, 4]);
            assert_eq!(f.context.shape(), &[t, 4]);
            assert_eq!(m.decode_signal(&f.content, &f.context).unwrap().shape(), &[t]);
            assert_eq!(m.decode_repr(&f.content, &f.context).unwrap().shape(), &[t]);
            assert_eq!(m.denoise(&signal(t), None).unwrap().shape(), &[t]);
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = tiny();
        assert_eq!(m.encode(&signal(9)).unwrap(), m.encode(&signal(9)).unwrap());
        assert_eq!(
            m.denoise(&signal(9), None).unwrap(),
            m.denoise(&signal(9), None).unwrap()
        );
    }

    #[test]
    fn empty_signal_is_rejected() {
        let m = tiny();
        assert!(matches!(m.encode(&Tensor::zeros(&[0])), Err(Error::Empty(_))));
    }

    #[test]
    fn context_head_does_not_touch_content() {
        let mut m = tiny();
        let before = m.encode(&signal(6)).unwrap();
        let id = m.encoder.head_context.weight;
        let shape = m.params.get(id).shape().to_vec();
        m.params.set(id, Tensor::zeros(&shape)).unwrap();
        let after = m.encode(&signal(6)).unwrap();
        assert_eq!(before.content, after.content);
        assert_ne!(before.context, after.context);
    }

    #[test]
    fn decoders_have_independent_parameters() {
        let m = tiny();
        let f = m.encode(&signal(5)).unwrap();
        assert_ne!(
            m.decode_signal(&f.content, &f.context).unwrap(),
            m.decode_repr(&f.content, &f.context).unwrap()
        );
    }

    #[test]
    fn manifest_names_are_unique() {
        let m = Dremnet::new(ModelConfig::with_width(2, 8), 0).unwrap();
        let names: Vec<String> = m.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }
}
