use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Uniform relative noise level.
    pub std: f64,
    /// Background level at 1 ms (nV/m^2), drawn uniformly per record.
    pub b_min: f64,
    pub b_max: f64,
    /// Mean impulse count per record.
    pub sferic_rate: f64,
    pub sferic_amp_min: f64,
    pub sferic_amp_max: f64,
    pub sferic_rise: f64,
    pub sferic_fall: f64,
    pub powerline_base: f64,
    pub powerline_harmonics: usize,
    pub powerline_amp: f64,
    pub motion_amp: f64,
    /// Moving-average window as a fraction of the gate count.
    pub motion_window: f64,
    pub gaussian_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            std: 0.03,
            b_min: 1.0,
            b_max: 5.0,
            sferic_rate: 0.3,
            sferic_amp_min: 1.0,
            sferic_amp_max: 20.0,
            sferic_rise: 1e-6,
            sferic_fall: 1e-4,
            powerline_base: 50.0,
            powerline_harmonics: 3,
            powerline_amp: 1.0,
            motion_amp: 1.0,
            motion_window: 0.25,
            gaussian_std: 0.2,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("std", self.std),
            ("b_min", self.b_min),
            ("sferic_rate", self.sferic_rate),
            ("sferic_amp_min", self.sferic_amp_min),
            ("powerline_amp", self.powerline_amp),
            ("motion_amp", self.motion_amp),
            ("gaussian_std", self.gaussian_std),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(alloc::format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.b_max >= self.b_min) || !(self.sferic_amp_max >= self.sferic_amp_min) {
            return Err(invalid("noise ranges must satisfy min <= max"));
        }
        if !(self.sferic_rise > 0.0 && self.sferic_fall > self.sferic_rise) {
            return Err(invalid("need 0 < sferic_rise < sferic_fall"));
        }
        if !(self.powerline_base > 0.0) {
            return Err(invalid("powerline_base must be > 0"));
        }
        if !(self.motion_window > 0.0 && self.motion_window <= 1.0) {
            return Err(invalid("motion_window must be in (0, 1]"));
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `b (t / 1 ms)^(-1/2)`.
pub fn background_noise(t: f64, b: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid(alloc::format!("gate time must be > 0, got {t}")));
    }
    if !(b >= 0.0) {
        return Err(invalid(alloc::format!("background level must be >= 0, got {b}")));
    }
    Ok(b * libm::pow(t / 1e-3, -0.5))
}

/// Per-gate standard deviation `s * sqrt(STD^2 + (n/s)^2)` of the uniform
/// plus background noise model.
pub fn auken_sigma(s: f64, t: f64, std: f64, b: f64) -> Result<f64> {
    if s == 0.0 {
        return Err(invalid("clean response is zero; relative noise undefined"));
    }
    let n = background_noise(t, b)?;
    let r = n / s;
    Ok(libm::sqrt(std * std + r * r) * s.abs())
}

/// `s + N(0,1) sqrt(STD^2 + (n/s)^2) s` with an independent draw per gate.
pub fn apply_auken_noise(clean: &[f64], gates: &[f64], std: f64, b: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if clean.len() != gates.len() {
        return Err(invalid("clean curve and gates differ in length"));
    }
    clean
        .iter()
        .zip(gates)
        .map(|(&s, &t)| {
            let sigma = auken_sigma(s, t, std, b)?;
            let g = normal(rng);
            // sign(s) is absorbed by the symmetric draw
            Ok(s + g * sigma)
        })
        .collect()
}

/// Double-exponential impulse starting at gate `start`; zero at and before it.
pub fn sferic_pulse(gates: &[f64], start: usize, amplitude: f64, rise: f64, fall: f64) -> Vec<f64> {
    let t0 = gates[start];
    gates
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if i <= start {
                0.0
            } else {
                let dt = t - t0;
                amplitude * (libm::exp(-dt / fall) - libm::exp(-dt / rise))
            }
        })
        .collect()
}

/// Adds a Poisson number of impulses at uniformly drawn gates with random
/// sign; returns how many were added.
pub fn add_sferics(noisy: &mut [f64], gates: &[f64], cfg: &NoiseConfig, rng: &mut impl Rng) -> Result<usize> {
    if cfg.sferic_rate == 0.0 || noisy.is_empty() {
        return Ok(0);
    }
    let poisson = Poisson::new(cfg.sferic_rate).map_err(|_| invalid("invalid sferic rate"))?;
    let count = poisson.sample(rng) as usize;
    for _ in 0..count {
        let start = rng.random_range(0..noisy.len());
        let amp = rng.random_range(cfg.sferic_amp_min..=cfg.sferic_amp_max);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let pulse = sferic_pulse(gates, start, sign * amp, cfg.sferic_rise, cfg.sferic_fall);
        for (x, p) in noisy.iter_mut().zip(pulse) {
            *x += p;
        }
    }
    Ok(count)
}

/// `sum_h A_h sin(2 pi h f t + phi_h)` for harmonics `h = 1..`.
pub fn powerline_component(times: &[f64], base: f64, amplitudes: &[f64], phases: &[f64]) -> Vec<f64> {
    times
        .iter()
        .map(|&t| {
            amplitudes
                .iter()
                .zip(phases)
                .enumerate()
                .map(|(i, (&a, &phi))| a * libm::sin(2.0 * PI * (i + 1) as f64 * base * t + phi))
                .sum()
        })
        .collect()
}

/// Harmonic `h` gets amplitude `powerline_amp / h` and a uniform phase.
pub fn add_powerline(noisy: &mut [f64], gates: &[f64], cfg: &NoiseConfig, rng: &mut impl Rng) {
    if cfg.powerline_amp == 0.0 || cfg.powerline_harmonics == 0 {
        return;
    }
    let amps: Vec<f64> = (1..=cfg.powerline_harmonics)
        .map(|h| cfg.powerline_amp / h as f64)
        .collect();
    let phases: Vec<f64> = amps.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    for (x, p) in noisy
        .iter_mut()
        .zip(powerline_component(gates, cfg.powerline_base, &amps, &phases))
    {
        *x += p;
    }
}

/// Gaussian random walk smoothed by a centered moving average, scaled to an
/// RMS of `amplitude`.
pub fn motion_drift(len: usize, amplitude: f64, window_fraction: f64, rng: &mut impl Rng) -> Vec<f64> {
    if len == 0 || amplitude == 0.0 {
        return alloc::vec![0.0; len];
    }
    let mut walk = Vec::with_capacity(len);
    let mut acc = 0.0;
    for _ in 0..len {
        acc += normal(rng);
        walk.push(acc);
    }
    let window = (libm::ceil(window_fraction * len as f64) as usize).max(1);
    let half = window / 2;
    let smooth: Vec<f64> = (0..len)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(len);
            walk[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let rms = libm::sqrt(smooth.iter().map(|x| x * x).sum::<f64>() / len as f64);
    if rms == 0.0 {
        return smooth;
    }
    smooth.iter().map(|x| x * amplitude / rms).collect()
}

pub fn add_motion_drift(noisy: &mut [f64], cfg: &NoiseConfig, rng: &mut impl Rng) {
    if cfg.motion_amp == 0.0 {
        return;
    }
    let drift = motion_drift(noisy.len(), cfg.motion_amp, cfg.motion_window, rng);
    for (x, d) in noisy.iter_mut().zip(drift) {
        *x += d;
    }
}

pub fn add_gaussian(noisy: &mut [f64], std: f64, rng: &mut impl Rng) {
    if std == 0.0 {
        return;
    }
    for x in noisy.iter_mut() {
        *x += std * normal(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn background_anchors() {
        assert_eq!(background_noise(1e-3, 1.0).unwrap(), 1.0);
        assert_eq!(background_noise(4e-3, 4.0).unwrap(), 2.0);
        assert_eq!(background_noise(1e-5, 0.0).unwrap(), 0.0);
        assert!(background_noise(0.0, 1.0).is_err());
        assert!(background_noise(-1.0, 1.0).is_err());
    }

    #[test]
    fn zero_levels_leave_clean_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clean = [5.0, 2.0, 0.5];
        let gates = [1e-5, 1e-4, 1e-3];
        assert_eq!(apply_auken_noise(&clean, &gates, 0.0, 0.0, &mut rng).unwrap(), clean);
        assert!(apply_auken_noise(&[1.0, 0.0], &[1e-5, 1e-4], 0.03, 1.0, &mut rng).is_err());
    }

    #[test]
    fn disabled_components_are_no_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gates = [1e-5, 1e-4, 1e-3, 1e-2];
        let cfg = NoiseConfig {
            sferic_rate: 0.0,
            powerline_amp: 0.0,
            motion_amp: 0.0,
            ..NoiseConfig::default()
        };
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(add_sferics(&mut x, &gates, &cfg, &mut rng).unwrap(), 0);
        add_powerline(&mut x, &gates, &cfg, &mut rng);
        add_motion_drift(&mut x, &cfg, &mut rng);
        add_gaussian(&mut x, 0.0, &mut rng);
        assert_eq!(x, [1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn single_harmonic_is_a_sinusoid() {
        let t = [0.0, 0.005, 0.0125];
        let y = powerline_component(&t, 50.0, &[2.0], &[0.3]);
        for (ti, yi) in t.iter().zip(&y) {
            assert_eq!(*yi, 2.0 * libm::sin(2.0 * PI * 50.0 * ti + 0.3));
        }
    }

    #[test]
    fn drift_has_requested_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = motion_drift(200, 3.0, 0.25, &mut rng);
        let rms = libm::sqrt(d.iter().map(|x| x * x).sum::<f64>() / 200.0);
        assert!((rms - 3.0).abs() < 1e-12);
    }
}
