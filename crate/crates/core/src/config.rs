//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Every key of
//! [`RunConfig`] is addressable; unknown keys and unparsable values are
//! errors that carry the offending line number.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::blocks::TailPadding;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::train::{KlTarget, TrainConfig};

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry<'a> {
    pub line: usize,
    pub key: &'a str,
    pub value: &'a str,
}

pub fn parse(text: &str) -> Result<Vec<Entry<'_>>> {
    let mut out: Vec<Entry<'_>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Config {
                line,
                message: format!("expected `key = value`, got `{trimmed}`"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Config {
                line,
                message: "empty key".into(),
            });
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(Error::Config {
                line,
                message: format!("key `{key}` already set on line {}", prev.line),
            });
        }
        out.push(Entry { line, key, value });
    }
    Ok(out)
}

/// A scalar that can appear on the right of `=`.
pub trait Value: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl Value for f64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl Value for usize {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for TailPadding {
    fn parse_value(s: &str) -> Option<Self> {
        TailPadding::parse(s).ok()
    }
    fn render(&self) -> String {
        self.as_str().into()
    }
}

impl Value for KlTarget {
    fn parse_value(s: &str) -> Option<Self> {
        KlTarget::parse(s).ok()
    }
    fn render(&self) -> String {
        self.as_str().into()
    }
}

fn value<T: Value>(key: &str, raw: &str) -> Result<T> {
    T::parse_value(raw).ok_or_else(|| Error::InvalidArgument(format!("invalid value `{raw}` for `{key}`")))
}

/// A configuration whose fields are addressed by flat keys.
pub trait Settings {
    /// Sets `key`; `Ok(false)` if the key is not recognized.
    fn set(&mut self, key: &str, raw: &str) -> Result<bool>;
    /// Every key with its current value, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;
}

macro_rules! settings {
    ($ty:ty { $($key:literal => $($field:ident).+),* $(,)? }) => {
        impl Settings for $ty {
            fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
                match key {
                    $($key => self.$($field).+ = value(key, raw)?,)*
                    _ => return Ok(false),
                }
                Ok(true)
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                alloc::vec![$(($key, self.$($field).+.render())),*]
            }
        }
    };
}

settings!(TrainConfig {
    "n_blocks" => n_blocks,
    "channels" => channels,
    "factor_dim" => factor_dim,
    "cover_length" => cover_length,
    "padding" => padding,
    "batch_size" => batch_size,
    "lr" => lr,
    "epochs" => epochs,
    "lambda_clean" => lambda_clean,
    "lambda_noise" => lambda_noise,
    "lambda_kl" => lambda_kl,
    "lambda_club" => lambda_club,
    "kl_target" => kl_target,
    "context_dropout" => context_dropout,
    "weight_decay" => weight_decay,
    "grad_clip" => grad_clip,
    "club_hidden" => club_hidden,
    "club_lr" => club_lr,
    "seed" => seed,
});

settings!(DataConfig {
    "gates" => gates,
    "t_min" => t_min,
    "t_max" => t_max,
    "curve_max_terms" => curve.max_terms,
    "curve_power_min" => curve.power_min,
    "curve_power_max" => curve.power_max,
    "curve_amplitude_min" => curve.amplitude_min,
    "curve_amplitude_max" => curve.amplitude_max,
    "curve_reference_time" => curve.reference_time,
    "curve_slope_min" => curve.slope_min,
    "curve_slope_max" => curve.slope_max,
    "curve_max_draws" => curve.max_draws,
    "noise_std" => noise.std,
    "noise_b_min" => noise.b_min,
    "noise_b_max" => noise.b_max,
    "sferic_rate" => noise.sferic_rate,
    "sferic_amp_min" => noise.sferic_amp_min,
    "sferic_amp_max" => noise.sferic_amp_max,
    "sferic_rise" => noise.sferic_rise,
    "sferic_fall" => noise.sferic_fall,
    "powerline_base" => noise.powerline_base,
    "powerline_harmonics" => noise.powerline_harmonics,
    "powerline_amp" => noise.powerline_amp,
    "motion_amp" => noise.motion_amp,
    "motion_window" => noise.motion_window,
    "gaussian_std" => noise.gaussian_std,
    "norm_eps" => norm.eps,
    "norm_scale" => norm.scale,
    "data_seed" => seed,
});

/// Everything a command can be configured with.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Settings for RunConfig {
    fn set(&mut self, key: &str, raw: &str) -> Result<bool> {
        Ok(self.train.set(key, raw)? || self.data.set(key, raw)?)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = self.train.entries();
        e.extend(self.data.entries());
        e
    }
}

/// Applies every line of `text` to `target`.
pub fn apply(target: &mut impl Settings, text: &str) -> Result<()> {
    for e in parse(text)? {
        apply_entry(target, e.key, e.value).map_err(|err| Error::Config {
            line: e.line,
            message: match err {
                Error::InvalidArgument(m) => m,
                other => other.to_string(),
            },
        })?;
    }
    Ok(())
}

/// Applies one override; unknown keys are errors.
pub fn apply_entry(target: &mut impl Settings, key: &str, raw: &str) -> Result<()> {
    if target.set(key, raw)? {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("unknown key `{key}`")))
    }
}

/// `key = value` lines that [`apply`] reads back to the same settings.
pub fn render(target: &impl Settings) -> String {
    let mut s = String::new();
    for (k, v) in target.entries() {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    }
    s
}
