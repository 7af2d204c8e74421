//! Denoising quality metrics: MSE, SNR with denoised energy in the
//! numerator, and single-window SSIM.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{invalid, Error, Result};

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: alloc::vec![a.len()],
            right: alloc::vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(Error::Empty(op));
    }
    Ok(())
}

pub fn mse(denoised: &[f64], truth: &[f64]) -> Result<f64> {
    same_len("mse", denoised, truth)?;
    let sum: f64 = denoised
        .iter()
        .zip(truth)
        .map(|(d, t)| (d - t) * (d - t))
        .sum();
    Ok(sum / denoised.len() as f64)
}

/// `10 log10(|x_d|^2 / |x_t - x_d|^2)` in dB.
///
/// Returns `f64::INFINITY` when the two inputs are equal; an all-zero
/// `denoised` against a different `truth` gives `f64::NEG_INFINITY`.
pub fn snr(denoised: &[f64], truth: &[f64]) -> Result<f64> {
    same_len("snr", denoised, truth)?;
    let energy: f64 = denoised.iter().map(|d| d * d).sum();
    let residual: f64 = denoised
        .iter()
        .zip(truth)
        .map(|(d, t)| (t - d) * (t - d))
        .sum();
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    if energy == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * libm::log10(energy / residual))
}

/// Default SSIM dynamic range: the spread of the reference.
pub fn dynamic_range(truth: &[f64]) -> f64 {
    let (lo, hi) = truth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    hi - lo
}

/// Global SSIM over the whole record with population statistics.
pub fn ssim(denoised: &[f64], truth: &[f64], range: f64) -> Result<f64> {
    same_len("ssim", denoised, truth)?;
    if denoised.len() < 2 {
        return Err(invalid("ssim needs at least two samples"));
    }
    if !range.is_finite() || range < 0.0 {
        return Err(invalid("ssim range must be finite and non-negative"));
    }
    let n = denoised.len() as f64;
    let mu_d = denoised.iter().sum::<f64>() / n;
    let mu_t = truth.iter().sum::<f64>() / n;
    let (mut var_d, mut var_t, mut cov) = (0.0, 0.0, 0.0);
    for (d, t) in denoised.iter().zip(truth) {
        var_d += (d - mu_d) * (d - mu_d);
        var_t += (t - mu_t) * (t - mu_t);
        cov += (d - mu_d) * (t - mu_t);
    }
    var_d /= n;
    var_t /= n;
    cov /= n;
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let num = (2.0 * mu_d * mu_t + c1) * (2.0 * cov + c2);
    let den = (mu_d * mu_d + mu_t * mu_t + c1) * (var_d + var_t + c2);
    if den == 0.0 {
        // Both records identically zero.
        return Ok(1.0);
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecordMetrics {
    pub mse: f64,
    pub snr_db: f64,
    pub ssim: f64,
}

impl RecordMetrics {
    pub fn compute(denoised: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Self {
            mse: mse(denoised, truth)?,
            snr_db: snr(denoised, truth)?,
            ssim: ssim(denoised, truth, dynamic_range(truth))?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            mean: values.iter().sum::<f64>() / n as f64,
            median,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<Bin>> {
    if values.is_empty() {
        return Err(Error::Empty("histogram"));
    }
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite { op: "histogram" });
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            lo: lo + i as f64 * width,
            hi: if i + 1 == bins && hi > lo {
                hi
            } else {
                lo + (i + 1) as f64 * width
            },
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub records: Vec<RecordMetrics>,
    pub mse: Summary,
    pub snr_db: Summary,
    pub ssim: Summary,
    pub mse_histogram: Vec<Bin>,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Per-record metrics, aggregates, and an MSE histogram for
/// `(denoised, truth)` pairs.
pub fn batch_report<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<MetricReport> {
    let records = pairs
        .into_iter()
        .map(|(d, t)| RecordMetrics::compute(d, t))
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(Error::Empty("batch_report"));
    }
    let column = |f: fn(&RecordMetrics) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let mses = column(|r| r.mse);
    Ok(MetricReport {
        mse: Summary::of(&mses),
        snr_db: Summary::of(&column(|r| r.snr_db)),
        ssim: Summary::of(&column(|r| r.ssim)),
        mse_histogram: histogram(&mses, HISTOGRAM_BINS)?,
        records,
    })
}

impl MetricReport {
    /// `record_id,mse,snr_db,ssim`
    pub fn records_csv(&self) -> String {
        let mut s = String::from("record_id,mse,snr_db,ssim\n");
        for (i, r) in self.records.iter().enumerate() {
            let _ = writeln!(s, "{i},{:e},{},{}", r.mse, r.snr_db, r.ssim);
        }
        s
    }

    /// `bin_lo,bin_hi,count`
    pub fn histogram_csv(&self) -> String {
        histogram_csv(&self.mse_histogram)
    }
}

pub fn histogram_csv(bins: &[Bin]) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for b in bins {
        let _ = writeln!(s, "{:e},{:e},{}", b.lo, b.hi, b.count);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn anchors() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 2.0]).unwrap(), 0.5);
        assert_eq!(snr(&[2.0, 0.0], &[2.0, 0.2]).unwrap(), 20.0);
        assert_eq!(snr(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), f64::INFINITY);
        assert_eq!(ssim(&[1.0, 5.0, 2.0], &[1.0, 5.0, 2.0], 4.0).unwrap(), 1.0);
        assert_eq!(ssim(&[3.0, 3.0], &[3.0, 3.0], 0.0).unwrap(), 1.0);
        assert_eq!(ssim(&[0.0; 4], &[0.0; 4], 0.0).unwrap(), 1.0);
    }

    #[test]
    fn anti_correlated_ssim_matches_direct_formula() {
        let d = [1.0, -1.0, 2.0, -2.0];
        let t = [-1.0, 1.0, -2.0, 2.0];
        // mu = 0, var = 2.5, cov = -2.5, L = 4
        let (c1, c2) = (0.04f64.powi(2), 0.12f64.powi(2));
        let expected = c1 * (-5.0 + c2) / (c1 * (5.0 + c2));
        let got = ssim(&d, &t, 4.0).unwrap();
        assert!(got < 0.0);
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_denoised_is_minus_infinity() {
        assert_eq!(snr(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse(&[], &[]).is_err());
        assert!(ssim(&[1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn report_aggregates() {
        let d = vec![1.0, 2.0, 3.0];
        let t = vec![1.5, 2.0, 2.0];
        let one = batch_report([(d.as_slice(), t.as_slice())]).unwrap();
        assert_eq!(one.mse.mean, one.records[0].mse);
        assert_eq!(one.mse.median, one.records[0].mse);
        let many = batch_report((0..5).map(|_| (d.as_slice(), t.as_slice()))).unwrap();
        assert_eq!(many.mse, one.mse);
        assert_eq!(many.snr_db, one.snr_db);
        assert_eq!(many.ssim, one.ssim);
        assert_eq!(many.mse_histogram.iter().map(|b| b.count).sum::<usize>(), 5);
        assert!(batch_report(core::iter::empty()).is_err());
    }

    #[test]
    fn histogram_covers_extremes() {
        let h = histogram(&[0.0, 1.0, 2.0, 10.0], 5).unwrap();
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(h[0].count, 2);
        assert_eq!(h[1].count, 1);
        assert_eq!(h[4].count, 1);
        assert_eq!(h[4].hi, 10.0);
    }
}
