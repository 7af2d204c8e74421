use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};

/// `len` logarithmically spaced gates over `[t_min, t_max]`, endpoints
/// included.
pub fn gen_gate_times(len: usize, t_min: f64, t_max: f64) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(invalid("need at least two gates"));
    }
    if !(t_min > 0.0 && t_max > t_min && t_max.is_finite()) {
        return Err(invalid(alloc::format!("invalid gate range [{t_min}, {t_max}]")));
    }
    let (lo, hi) = (libm::log(t_min), libm::log(t_max));
    let step = (hi - lo) / (len - 1) as f64;
    let mut gates: Vec<f64> = (0..len).map(|i| libm::exp(lo + step * i as f64)).collect();
    gates[0] = t_min;
    gates[len - 1] = t_max;
    Ok(gates)
}

/// One `a * t^-p * exp(-t / tau)` term; `tau` may be infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayTerm {
    pub amplitude: f64,
    pub power: f64,
    pub tau: f64,
}

/// `sum_j a_j t^-p_j e^(-t/tau_j) + a0 t^-5/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveParams {
    pub terms: Vec<DecayTerm>,
    pub late: f64,
}

impl CurveParams {
    pub fn eval(&self, t: f64) -> f64 {
        let mut s = self.late * libm::pow(t, -2.5);
        for term in &self.terms {
            s += term.amplitude * libm::pow(t, -term.power) * libm::exp(-t / term.tau);
        }
        s
    }

    pub fn sample(&self, gates: &[f64]) -> Vec<f64> {
        gates.iter().map(|&t| self.eval(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveConfig {
    pub max_terms: usize,
    pub power_min: f64,
    pub power_max: f64,
    /// Response at `reference_time` is drawn log-uniformly from this range.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    pub reference_time: f64,
    pub slope_min: f64,
    pub slope_max: f64,
    pub max_draws: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            max_terms: 4,
            power_min: 0.5,
            power_max: 2.5,
            amplitude_min: 10.0,
            amplitude_max: 1000.0,
            reference_time: 1e-3,
            slope_min: -3.5,
            slope_max: -0.5,
            max_draws: 100,
        }
    }
}

impl CurveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_terms == 0 {
            return Err(invalid("max_terms must be >= 1"));
        }
        if !(self.power_min <= self.power_max && self.power_min > 0.0) {
            return Err(invalid("need 0 < power_min <= power_max"));
        }
        if !(self.amplitude_min > 0.0 && self.amplitude_max >= self.amplitude_min) {
            return Err(invalid("need 0 < amplitude_min <= amplitude_max"));
        }
        if !(self.reference_time > 0.0) {
            return Err(invalid("reference_time must be > 0"));
        }
        if !(self.slope_min <= self.slope_max) {
            return Err(invalid("need slope_min <= slope_max"));
        }
        if self.max_draws == 0 {
            return Err(invalid("max_draws must be >= 1"));
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    libm::exp(rng.random_range(libm::log(lo)..libm::log(hi)))
}

/// Draws the parameters of one decay family member over `gates`.
pub fn draw_curve_params(gates: &[f64], cfg: &CurveConfig, rng: &mut impl Rng) -> CurveParams {
    let (t0, t1) = (gates[0], gates[gates.len() - 1]);
    let count = rng.random_range(1..=cfg.max_terms);
    // Weights are set relative to the first gate so no term starts out
    // negligible, then the whole curve is rescaled at the reference time.
    let mut terms: Vec<DecayTerm> = (0..count)
        .map(|_| {
            let power = rng.random_range(cfg.power_min..=cfg.power_max);
            let tau = log_uniform(rng, t0, t1);
            let weight: f64 = rng.random_range(0.05..1.0);
            DecayTerm {
                amplitude: weight * libm::pow(t0, power) * libm::exp(t0 / tau),
                power,
                tau,
            }
        })
        .collect();
    let late = rng.random_range(0.05..1.0) * libm::pow(t0, 2.5);
    let raw = CurveParams { terms: terms.clone(), late };
    let target = log_uniform(rng, cfg.amplitude_min, cfg.amplitude_max);
    let k = target / raw.eval(cfg.reference_time);
    for term in &mut terms {
        term.amplitude *= k;
    }
    CurveParams { terms, late: late * k }
}

/// Least-squares slope of `ln s` against `ln t` over the last quarter of the
/// gates (at least two).
pub fn late_time_slope(gates: &[f64], curve: &[f64]) -> f64 {
    let n = gates.len();
    let start = n - (n / 4).max(2).min(n);
    let xs: Vec<f64> = gates[start..].iter().map(|&t| libm::log(t)).collect();
    let ys: Vec<f64> = curve[start..].iter().map(|&s| libm::log(s)).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

fn acceptable(gates: &[f64], curve: &[f64], cfg: &CurveConfig) -> bool {
    if curve.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return false;
    }
    if curve.windows(2).any(|w| w[1] > w[0] * 1.01) {
        return false;
    }
    let slope = late_time_slope(gates, curve);
    slope >= cfg.slope_min && slope <= cfg.slope_max
}

/// A positive, non-increasing decay curve whose late-time log-log slope lies
/// in the configured range; redraws until one qualifies.
pub fn gen_clean_curve(gates: &[f64], cfg: &CurveConfig, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if gates.len() < 2 || gates.windows(2).any(|w| w[1] <= w[0]) || gates[0] <= 0.0 {
        return Err(invalid("gates must be positive and strictly increasing"));
    }
    for _ in 0..cfg.max_draws {
        let curve = draw_curve_params(gates, cfg, rng).sample(gates);
        if acceptable(gates, &curve, cfg) {
            return Ok(curve);
        }
    }
    Err(Error::Rejected(cfg.max_draws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_gates_are_decades() {
        let g = gen_gate_times(3, 1e-5, 1e-3).unwrap();
        assert_eq!(g[0], 1e-5);
        assert!((g[1] - 1e-4).abs() < 1e-18);
        assert_eq!(g[2], 1e-3);
    }

    #[test]
    fn invalid_gate_ranges() {
        assert!(gen_gate_times(1, 1e-5, 1e-3).is_err());
        assert!(gen_gate_times(5, 0.0, 1e-3).is_err());
        assert!(gen_gate_times(5, 1e-3, 1e-3).is_err());
    }

    #[test]
    fn inverse_time_closed_form() {
        let c = CurveParams {
            terms: vec![DecayTerm {
                amplitude: 1.0,
                power: 1.0,
                tau: f64::INFINITY,
            }],
            late: 0.0,
        };
        for t in [1e-5, 3.3e-4, 1e-2] {
            assert_eq!(c.eval(t), 1.0 / t);
        }
    }

    #[test]
    fn reference_amplitude_in_range() {
        let cfg = CurveConfig::default();
        let gates = gen_gate_times(200, 1e-5, 1e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = draw_curve_params(&gates, &cfg, &mut rng);
            let v = p.eval(cfg.reference_time);
            assert!(v >= cfg.amplitude_min * (1.0 - 1e-12) && v <= cfg.amplitude_max * (1.0 + 1e-12));
        }
    }

    #[test]
    fn impossible_slope_range_is_rejected() {
        let cfg = CurveConfig {
            slope_min: 5.0,
            slope_max: 6.0,
            ..CurveConfig::default()
        };
        let gates = gen_gate_times(20, 1e-5, 1e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(gen_clean_curve(&gates, &cfg, &mut rng), Err(Error::Rejected(100)));
    }
}
