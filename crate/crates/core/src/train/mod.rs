//! Dual-decoder training: reconstruction losses, the KL regularizer on one
//! factor of the clean encoding, an optional CLUB penalty, and AdamW.

mod club;
mod loss;
mod optim;

pub use club::{as_rows, ClubNet};
pub use loss::{loss_clean, loss_kl, loss_noise, mse_on, VARIANCE_FLOOR};
pub use optim::{adamw_step, clip_global_norm, global_norm, OptState};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::TailPadding;
use crate::checkpoint::Checkpoint;
use crate::config::{apply, render};
use crate::error::{invalid, Error, Result};
use crate::model::{Dremnet, ModelConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bindings, ParamStore};

/// Which factor of the clean encoding the KL term pulls toward `N(0, 1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlTarget {
    ContentOfClean,
    #[default]
    ContextOfClean,
}

impl KlTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ContentOfClean => "content_of_clean",
            Self::ContextOfClean => "context_of_clean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "content_of_clean" => Ok(Self::ContentOfClean),
            "context_of_clean" => Ok(Self::ContextOfClean),
            _ => Err(invalid(format!(
                "unknown kl_target `{s}` (expected content_of_clean or context_of_clean)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub n_blocks: usize,
    pub channels: usize,
    pub factor_dim: usize,
    pub cover_length: usize,
    pub padding: TailPadding,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lambda_clean: f64,
    pub lambda_noise: f64,
    pub lambda_kl: f64,
    pub lambda_club: f64,
    pub kl_target: KlTarget,
    /// Probability that a record's clean context factor is replaced by zero
    /// in the clean-reconstruction term, matching the zero-context decode
    /// used at inference.
    pub context_dropout: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub club_hidden: usize,
    pub club_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_blocks: 12,
            channels: 64,
            factor_dim: 32,
            cover_length: 3,
            padding: TailPadding::Zero,
            batch_size: 32,
            lr: 1e-4,
            epochs: 200,
            lambda_clean: 1.0,
            lambda_noise: 1.0,
            lambda_kl: 1.0,
            lambda_club: 0.0,
            kl_target: KlTarget::ContextOfClean,
            context_dropout: 0.0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            club_hidden: 64,
            club_lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_blocks: self.n_blocks,
            channels: self.channels,
            factor_dim: self.factor_dim,
            hidden: 4 * self.channels,
            cover_length: self.cover_length,
            padding: self.padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let weights = [
            ("lambda_clean", self.lambda_clean),
            ("lambda_noise", self.lambda_noise),
            ("lambda_kl", self.lambda_kl),
            ("lambda_club", self.lambda_club),
            ("weight_decay", self.weight_decay),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.context_dropout) {
            return Err(invalid(format!(
                "context_dropout must be in [0, 1], got {}",
                self.context_dropout
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.club_lr >= 0.0 && self.club_lr.is_finite()) {
            return Err(invalid(format!("club_lr must be >= 0, got {}", self.club_lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(invalid(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.club_hidden == 0 {
            return Err(invalid("club_hidden must be >= 1"));
        }
        Ok(())
    }
}

/// Normalized `(clean, noisy)` training pairs of a common length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    len: usize,
    clean: Vec<f64>,
    noisy: Vec<f64>,
}

impl PairSet {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            ..Self::default()
        }
    }

    pub fn push(&mut self, clean: &[f64], noisy: &[f64]) -> Result<()> {
        if clean.len() != self.len || noisy.len() != self.len {
            return Err(Error::ShapeMismatch {
                op: "pair_set",
                left: alloc::vec![self.len],
                right: alloc::vec![clean.len(), noisy.len()],
            });
        }
        self.clean.extend_from_slice(clean);
        self.noisy.extend_from_slice(noisy);
        Ok(())
    }

    /// Signal length `T`.
    pub fn signal_len(&self) -> usize {
        self.len
    }

    pub fn count(&self) -> usize {
        if self.len == 0 {
            0
        } else {
            self.clean.len() / self.len
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn clean(&self, i: usize) -> &[f64] {
        &self.clean[i * self.len..(i + 1) * self.len]
    }

    pub fn noisy(&self, i: usize) -> &[f64] {
        &self.noisy[i * self.len..(i + 1) * self.len]
    }

    /// `([B, T] clean, [B, T] noisy)` for the given record indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let gather = |f: fn(&Self, usize) -> &[f64]| {
            let mut out = Vec::with_capacity(indices.len() * self.len);
            for &i in indices {
                out.extend_from_slice(f(self, i));
            }
            Tensor::new(&[indices.len(), self.len], out)
        };
        Ok((gather(Self::clean)?, gather(Self::noisy)?))
    }
}

/// Per-step loss terms, as written to the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub l_clean: f64,
    pub l_noise: f64,
    pub l_kl: f64,
    pub l_club: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub kl_clamped: bool,
}

pub const LOG_HEADER: &str = "step,L_clean,L_noise,L_kl,L_club,total";

impl StepStats {
    pub fn log_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            self.step, self.l_clean, self.l_noise, self.l_kl, self.l_club, self.total
        );
        s
    }
}

/// Means of the per-step terms over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub steps: usize,
    pub l_clean: f64,
    pub l_noise: f64,
    pub l_kl: f64,
    pub l_club: f64,
    pub total: f64,
    pub kl_clamped_steps: usize,
}

/// All loss terms of one batch, recorded on a tape.
pub struct LossGraph {
    pub model: Bindings,
    pub club: Bindings,
    pub content_noisy: Var,
    pub context_noisy: Var,
    pub l_clean: Var,
    pub l_noise: Var,
    pub l_kl: Var,
    pub l_club: Option<Var>,
    /// Weighted sum of the terms whose weight is nonzero, if any.
    pub total: Option<Var>,
    pub kl_clamped: bool,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Dremnet,
    pub club: ClubNet,
    pub opt: OptState,
    pub club_opt: OptState,
    /// Batches processed so far.
    pub step: u64,
    /// Completed epochs; selects the shuffle stream of the next epoch.
    pub epoch: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Dremnet::new(config.model_config(), config.seed)?;
        let club = ClubNet::new(config.factor_dim, config.club_hidden, config.seed ^ 0x5eed_c1b);
        let opt = OptState::new(&model.params, config.weight_decay);
        let club_opt = OptState::new(&club.params, 0.0);
        Ok(Self {
            config,
            model,
            club,
            opt,
            club_opt,
            step: 0,
            epoch: 0,
        })
    }

    /// Records every loss term for `clean` / `noisy` (`[B, T]` each).
    ///
    /// Model parameters are gradient leaves; the CLUB net is bound as
    /// constants so the main objective never updates it.
    pub fn loss_graph(&self, tape: &mut Tape, clean: &Tensor, noisy: &Tensor) -> Result<LossGraph> {
        let cfg = &self.config;
        let model = self.model.bind(tape, true);
        let club = self.club.params.bind(tape, false);
        let xs = tape.constant(clean.clone());
        let xn = tape.constant(noisy.clone());
        let (zs1, zn1) = self.model.encode_on(tape, &model, xn)?;
        let (zs2, zn2) = self.model.encode_on(tape, &model, xs)?;
        let context = if cfg.context_dropout > 0.0 {
            let keep = self.context_mask(tape.shape(zn2))?;
            let keep = tape.constant(keep);
            tape.mul(zn2, keep)?
        } else {
            zn2
        };
        let s_hat = self.model.decode_signal_on(tape, &model, zs1, context)?;
        let n_hat = self.model.decode_repr_on(tape, &model, zs2, zn1)?;
        let l_clean = loss_clean(tape, s_hat, xs)?;
        let l_noise = loss_noise(tape, n_hat, xn)?;
        let kl_input = match cfg.kl_target {
            KlTarget::ContentOfClean => zs2,
            KlTarget::ContextOfClean => zn2,
        };
        let (l_kl, kl_clamped) = loss_kl(tape, kl_input)?;
        let l_club = if cfg.lambda_club > 0.0 {
            let d = cfg.factor_dim;
            let rows = tape.value(zs1).len() / d;
            let x = tape.reshape(zs1, &[rows, d])?;
            let y = tape.reshape(zn1, &[rows, d])?;
            Some(self.club.estimate_on(tape, &club, x, y)?)
        } else {
            None
        };
        let mut total: Option<Var> = None;
        let terms = [
            (cfg.lambda_clean, Some(l_clean)),
            (cfg.lambda_noise, Some(l_noise)),
            (cfg.lambda_kl, Some(l_kl)),
            (cfg.lambda_club, l_club),
        ];
        for (w, term) in terms {
            if let (true, Some(t)) = (w > 0.0, term) {
                let scaled = tape.scale(t, w)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, scaled)?,
                    None => scaled,
                });
            }
        }
        Ok(LossGraph {
            model,
            club,
            content_noisy: zs1,
            context_noisy: zn1,
            l_clean,
            l_noise,
            l_kl,
            l_club,
            total,
            kl_clamped,
        })
    }

    /// Per-record keep mask for the clean context factor of the next step;
    /// depends only on the seed and the step index.
    fn context_mask(&self, shape: &[usize]) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xd20f_c0de);
        rng.set_stream(self.step);
        let rows = shape[0];
        let per_row = shape[1..].iter().product::<usize>();
        let mut data = Vec::with_capacity(rows * per_row);
        for _ in 0..rows {
            let keep = if rng.random::<f64>() < self.config.context_dropout {
                0.0
            } else {
                1.0
            };
            data.extend(core::iter::repeat(keep).take(per_row));
        }
        Tensor::new(shape, data)
    }

    /// One optimizer step on a batch. `batch` is the index reported if the
    /// loss turns non-finite.
    pub fn train_step(&mut self, clean: &Tensor, noisy: &Tensor, batch: usize) -> Result<StepStats> {
        let non_finite = |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { batch },
            other => other,
        };
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, clean, noisy).map_err(non_finite)?;
        let value = |v: Var| tape.value(v).item();
        let mut stats = StepStats {
            step: self.step + 1,
            l_clean: value(g.l_clean)?,
            l_noise: value(g.l_noise)?,
            l_kl: value(g.l_kl)?,
            l_club: g.l_club.map(value).transpose()?.unwrap_or(0.0),
            total: 0.0,
            grad_norm: 0.0,
            kl_clamped: g.kl_clamped,
        };
        if let Some(total) = g.total {
            stats.total = value(total)?;
            if !stats.total.is_finite() {
                return Err(Error::NonFiniteLoss { batch });
            }
            tape.backward(total).map_err(non_finite)?;
            let mut grads = g.model.grads(&tape, &self.model.params);
            for (id, gr) in self.model.params.ids().zip(&grads) {
                if gr.data().iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(self.model.params.name(id).into()));
                }
            }
            stats.grad_norm = clip_global_norm(&mut grads, self.config.grad_clip)?;
            adamw_step(&mut self.model.params, &grads, &mut self.opt, self.config.lr)?;
            self.model.params.clamp_mixes();
        }
        if g.l_club.is_some() {
            let x = as_rows(tape.value(g.content_noisy))?;
            let y = as_rows(tape.value(g.context_noisy))?;
            self.club.fit_step(&x, &y, &mut self.club_opt, self.config.club_lr)?;
        }
        self.step += 1;
        Ok(stats)
    }

    /// Record order for the next epoch; depends only on the seed and the
    /// epoch index.
    pub fn epoch_order(&self, count: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch);
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `set` in shuffled batches; `on_step` sees every step.
    pub fn train_epoch(&mut self, set: &PairSet, mut on_step: impl FnMut(&StepStats)) -> Result<EpochStats> {
        if set.is_empty() {
            return Err(Error::Empty("train_epoch"));
        }
        let order = self.epoch_order(set.count());
        let mut acc = EpochStats::default();
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let (clean, noisy) = set.batch(chunk)?;
            let s = self.train_step(&clean, &noisy, b)?;
            on_step(&s);
            acc.steps += 1;
            acc.l_clean += s.l_clean;
            acc.l_noise += s.l_noise;
            acc.l_kl += s.l_kl;
            acc.l_club += s.l_club;
            acc.total += s.total;
            acc.kl_clamped_steps += usize::from(s.kl_clamped);
        }
        let n = acc.steps as f64;
        acc.l_clean /= n;
        acc.l_noise /= n;
        acc.l_kl /= n;
        acc.l_club /= n;
        acc.total /= n;
        self.epoch += 1;
        Ok(acc)
    }
}

fn push_moments(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore, opt: &OptState) {
    for ((name, _), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
        out.push((format!("{prefix}.m.{name}"), m.clone()));
        out.push((format!("{prefix}.v.{name}"), v.clone()));
    }
    out.push((format!("{prefix}.step"), Tensor::full(&[1], opt.step as f64)));
}

fn load_moments(ck: &Checkpoint, prefix: &str, store: &ParamStore, opt: &mut OptState) -> Result<()> {
    let get = |name: String, shape: &[usize]| -> Result<Tensor> {
        let t = ck
            .tensor(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                left: shape.to_vec(),
                right: t.shape().to_vec(),
            });
        }
        Ok(t.clone())
    };
    for (i, (name, p)) in store.iter().enumerate() {
        opt.m[i] = get(format!("{prefix}.m.{name}"), p.shape())?;
        opt.v[i] = get(format!("{prefix}.v.{name}"), p.shape())?;
    }
    opt.step = get(format!("{prefix}.step"), &[1])?.data()[0] as u64;
    Ok(())
}

const ADAM: &str = "adam";
const CLUB_ADAM: &str = "club_adam";

impl Trainer {
    /// Model, CLUB net, and both optimizer states, with the configuration
    /// embedded as `key = value` text.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.named_tensors();
        tensors.extend(self.club.params.iter().map(|(n, t)| (String::from(n), t.clone())));
        push_moments(&mut tensors, ADAM, &self.model.params, &self.opt);
        push_moments(&mut tensors, CLUB_ADAM, &self.club.params, &self.club_opt);
        Checkpoint {
            step: self.step,
            epoch: self.epoch,
            config: render(&self.config),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut config = TrainConfig::default();
        apply(&mut config, &ck.config)?;
        let mut t = Self::new(config)?;
        let is_state = |n: &str| n.starts_with("adam.") || n.starts_with("club_adam.");
        t.model.params.load_named(
            ck.tensors
                .iter()
                .filter(|(n, _)| !is_state(n) && !n.starts_with("club."))
                .map(|(n, v)| (n.as_str(), v)),
        )?;
        t.club.params.load_named(
            ck.tensors
                .iter()
                .filter(|(n, _)| n.starts_with("club."))
                .map(|(n, v)| (n.as_str(), v)),
        )?;
        load_moments(ck, ADAM, &t.model.params, &mut t.opt)?;
        load_moments(ck, CLUB_ADAM, &t.club.params, &mut t.club_opt)?;
        t.step = ck.step;
        t.epoch = ck.epoch;
        Ok(t)
    }
}
