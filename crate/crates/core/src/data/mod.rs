//! Synthetic decay-curve records: log-spaced gates, a parametric clean
//! response, and a layered noise model.

mod curve;
mod format;
mod noise;

pub use curve::{
    draw_curve_params, gen_clean_curve, gen_gate_times, late_time_slope, CurveConfig, CurveParams, DecayTerm,
};
pub use format::{
    decode_dataset, encode_dataset, format_forward_csv, parse_forward_csv, Dataset, DEFAULT_UNITS, HEADER_LEN, MAGIC,
    VERSION,
};
pub use noise::{
    add_gaussian, add_motion_drift, add_powerline, add_sferics, apply_auken_noise, auken_sigma, background_noise,
    motion_drift, powerline_component, sferic_pulse, NoiseConfig,
};

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Parameters of the sign-preserving log normalizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormMeta {
    pub eps: f64,
    pub scale: f64,
}

impl Default for NormMeta {
    fn default() -> Self {
        Self { eps: 0.01, scale: 1.0 }
    }
}

impl NormMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid(alloc::format!("normalization eps must be > 0, got {}", self.eps)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid(alloc::format!("normalization scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }
}

/// `sign(x) log10(1 + |x| / eps) / scale`.
pub fn normalize(x: &[f64], meta: NormMeta) -> Result<Vec<f64>> {
    meta.validate()?;
    Ok(x.iter()
        .map(|&v| libm::copysign(libm::log1p(v.abs() / meta.eps) / core::f64::consts::LN_10, v) / meta.scale)
        .collect())
}

/// Inverse of [`normalize`].
pub fn denormalize(y: &[f64], meta: NormMeta) -> Result<Vec<f64>> {
    meta.validate()?;
    Ok(y.iter()
        .map(|&v| {
            let m = (v * meta.scale).abs() * core::f64::consts::LN_10;
            libm::copysign(meta.eps * libm::expm1(m), v)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub gate_times: Vec<f64>,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub norm: NormMeta,
}

impl SignalRecord {
    pub fn len(&self) -> usize {
        self.gate_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gate_times.is_empty()
    }

    pub fn normalized_clean(&self) -> Result<Vec<f64>> {
        normalize(&self.clean, self.norm)
    }

    pub fn normalized_noisy(&self) -> Result<Vec<f64>> {
        normalize(&self.noisy, self.norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub gates: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub curve: CurveConfig,
    pub noise: NoiseConfig,
    pub norm: NormMeta,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            gates: 200,
            t_min: 1e-5,
            t_max: 1e-2,
            curve: CurveConfig::default(),
            noise: NoiseConfig::default(),
            norm: NormMeta::default(),
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        gen_gate_times(self.gates, self.t_min, self.t_max)?;
        self.curve.validate()?;
        self.noise.validate()?;
        self.norm.validate()
    }

    pub fn gate_times(&self) -> Result<Vec<f64>> {
        gen_gate_times(self.gates, self.t_min, self.t_max)
    }
}

/// Independent random stream for record `index`, so records can be made in
/// any order.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Applies every noise component to `clean` in a fixed order.
pub fn add_noise(clean: &[f64], gates: &[f64], cfg: &NoiseConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let b = if cfg.b_max > cfg.b_min {
        rng.random_range(cfg.b_min..=cfg.b_max)
    } else {
        cfg.b_min
    };
    let mut noisy = apply_auken_noise(clean, gates, cfg.std, b, rng)?;
    add_sferics(&mut noisy, gates, cfg, rng)?;
    add_powerline(&mut noisy, gates, cfg, rng);
    add_motion_drift(&mut noisy, cfg, rng);
    add_gaussian(&mut noisy, cfg.gaussian_std, rng);
    Ok(noisy)
}

pub fn gen_record(cfg: &DataConfig, gates: &[f64], index: u64) -> Result<SignalRecord> {
    let mut rng = record_rng(cfg.seed, index);
    let clean = gen_clean_curve(gates, &cfg.curve, &mut rng)?;
    let noisy = add_noise(&clean, gates, &cfg.noise, &mut rng)?;
    Ok(SignalRecord {
        gate_times: gates.to_vec(),
        clean,
        noisy,
        norm: cfg.norm,
    })
}

/// `count` records `0..count` from `cfg`.
pub fn gen_dataset(cfg: &DataConfig, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    let gates = cfg.gate_times()?;
    let records = (0..count as u64)
        .map(|i| gen_record(cfg, &gates, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        signal_len: cfg.gates,
        seed: cfg.seed,
        units: alloc::string::String::from(format::DEFAULT_UNITS),
        has_clean: true,
        records,
    })
}

/// Replaces the noisy channel of imported clean responses using the noise
/// model; record `i` draws from stream `i` of `seed`.
pub fn noise_records(records: &mut [SignalRecord], cfg: &NoiseConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    for (i, r) in records.iter_mut().enumerate() {
        // Stream numbers above 2^63 keep imported noise apart from generated
        // curves that share the seed.
        let mut rng = record_rng(seed, (1u64 << 63) | i as u64);
        r.noisy = add_noise(&r.clean, &r.gate_times, cfg, &mut rng)?;
    }
    Ok(())
}
