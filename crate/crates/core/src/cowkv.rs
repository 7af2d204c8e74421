//! Contextual-WKV: bidirectional weighted-key-value linear attention.
//!
//! For every channel `c` and position `t` the output is a normalized
//! weighted average of all values in the sequence:
//!
//! ```text
//!           Σ_{i≠t} e^{-(|t-i|-1)·w + k_i} · v_i  +  e^{u + k_t} · v_t
//! wkv_t = -------------------------------------------------------------
//!           Σ_{i≠t} e^{-(|t-i|-1)·w + k_i}        +  e^{u + k_t}
//! ```
//!
//! [`cowkv_naive`] evaluates the double sum directly in O(T²·C) and serves
//! as the reference. [`cowkv_scan`] computes the same value in O(T·C) with
//! one left-to-right and one right-to-left recurrence. Each recurrence keeps
//! its sums scaled by a running maximum exponent, so unbounded keys never
//! overflow. [`cowkv_grad`] differentiates the scan analytically.
//!
//! Inputs have shape `[.., T, C]`; leading axes are independent sequences.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

/// Per-channel decay `w` and current-token bonus `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoWkvParams {
    pub decay: Vec<f64>,
    pub bonus: Vec<f64>,
}

impl CoWkvParams {
    pub fn new(decay: Vec<f64>, bonus: Vec<f64>) -> Result<Self> {
        if decay.len() != bonus.len() {
            return Err(Error::ShapeMismatch {
                op: "cowkv_params",
                left: vec![decay.len()],
                right: vec![bonus.len()],
            });
        }
        if decay.iter().chain(&bonus).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "cowkv_params" });
        }
        Ok(Self { decay, bonus })
    }

    /// Log-spaced positive decays in `[0.01, 2]`, zero bonus.
    pub fn init(channels: usize) -> Self {
        let decay = (0..channels)
            .map(|c| {
                let frac = if channels > 1 {
                    c as f64 / (channels - 1) as f64
                } else {
                    0.5
                };
                libm::pow(10.0, -2.0 + frac * libm::log10(200.0))
            })
            .collect();
        Self {
            decay,
            bonus: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.decay.len()
    }
}

/// Gradients of a scalar objective with respect to every kernel input.
#[derive(Clone, Debug, PartialEq)]
pub struct CoWkvGrads {
    pub k: Tensor,
    pub v: Tensor,
    pub decay: Vec<f64>,
    pub bonus: Vec<f64>,
}

#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
}

impl Layout {
    #[inline]
    fn at(&self, b: usize, t: usize, c: usize) -> usize {
        (b * self.len + t) * self.channels + c
    }
}

pub(crate) fn layout(k: &[usize], v: &[usize], decay: usize, bonus: usize) -> Result<Layout> {
    if k != v {
        return Err(Error::ShapeMismatch {
            op: "cowkv",
            left: k.to_vec(),
            right: v.to_vec(),
        });
    }
    if k.len() < 2 {
        return Err(invalid("cowkv expects [.., T, C] inputs"));
    }
    let channels = k[k.len() - 1];
    let len = k[k.len() - 2];
    if len == 0 {
        return Err(Error::Empty("cowkv"));
    }
    if decay != channels || bonus != channels {
        return Err(Error::ShapeMismatch {
            op: "cowkv",
            left: k.to_vec(),
            right: vec![decay, bonus],
        });
    }
    let batch = k[..k.len() - 2].iter().product();
    Ok(Layout {
        batch,
        len,
        channels,
    })
}

/// Reference evaluation by direct double summation.
pub fn cowkv_naive(k: &Tensor, v: &Tensor, params: &CoWkvParams) -> Result<Tensor> {
    let lay = layout(k.shape(), v.shape(), params.decay.len(), params.bonus.len())?;
    let (kd, vd) = (k.data(), v.data());
    let mut out = vec![0.0; kd.len()];
    let mut expo = vec![0.0; lay.len];
    for b in 0..lay.batch {
        for c in 0..lay.channels {
            let (w, u) = (params.decay[c], params.bonus[c]);
            for t in 0..lay.len {
                for (i, e) in expo.iter_mut().enumerate() {
                    let ki = kd[lay.at(b, i, c)];
                    *e = if i == t {
                        u + ki
                    } else {
                        -((t.abs_diff(i) - 1) as f64) * w + ki
                    };
                }
                let max = expo.iter().fold(f64::NEG_INFINITY, |m, &e| m.max(e));
                let (mut num, mut den) = (0.0, 0.0);
                for (i, &e) in expo.iter().enumerate() {
                    let p = libm::exp(e - max);
                    num += p * vd[lay.at(b, i, c)];
                    den += p;
                }
                out[lay.at(b, t, c)] = num / den;
            }
        }
    }
    Tensor::checked("cowkv_naive", k.shape().to_vec(), out)
}

/// Causal single-direction WKV (sum over `i < t` plus the bonus term only).
///
/// Kept as a baseline: unlike Co-WKV its first output ignores later values.
pub fn wkv_unidirectional(k: &Tensor, v: &Tensor, params: &CoWkvParams) -> Result<Tensor> {
    let lay = layout(k.shape(), v.shape(), params.decay.len(), params.bonus.len())?;
    let (kd, vd) = (k.data(), v.data());
    let mut out = vec![0.0; kd.len()];
    for b in 0..lay.batch {
        for c in 0..lay.channels {
            let (w, u) = (params.decay[c], params.bonus[c]);
            for t in 0..lay.len {
                let expo = |i: usize| {
                    let ki = kd[lay.at(b, i, c)];
                    if i == t {
                        u + ki
                    } else {
                        -((t - i - 1) as f64) * w + ki
                    }
                };
                let max = (0..=t).map(expo).fold(f64::NEG_INFINITY, f64::max);
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..=t {
                    let p = libm::exp(expo(i) - max);
                    num += p * vd[lay.at(b, i, c)];
                    den += p;
                }
                out[lay.at(b, t, c)] = num / den;
            }
        }
    }
    Tensor::checked("wkv_unidirectional", k.shape().to_vec(), out)
}

/// Two sums with a shared running scale: the represented values are
/// `s1·e^m` and `s2·e^m`. `d1`/`d2` carry the distance-weighted companions
/// `Σ (|t-i|-1)·(...)` needed for the decay gradient.
#[derive(Clone, Copy, Debug)]
struct Scaled {
    m: f64,
    s1: f64,
    s2: f64,
    d1: f64,
    d2: f64,
}

impl Scaled {
    const EMPTY: Self = Self {
        m: f64::NEG_INFINITY,
        s1: 0.0,
        s2: 0.0,
        d1: 0.0,
        d2: 0.0,
    };

    fn is_empty(&self) -> bool {
        self.m == f64::NEG_INFINITY
    }

    /// Advance one position: every stored term moves one step further away.
    #[inline]
    fn decay(&mut self, w: f64) {
        if self.is_empty() {
            return;
        }
        self.d1 += self.s1;
        self.d2 += self.s2;
        self.m -= w;
    }

    /// Add the term `(c1, c2)·e^x` at distance zero.
    #[inline]
    fn push(&mut self, x: f64, c1: f64, c2: f64) {
        if self.is_empty() {
            *self = Self {
                m: x,
                s1: c1,
                s2: c2,
                d1: 0.0,
                d2: 0.0,
            };
            return;
        }
        if x > self.m {
            let r = libm::exp(self.m - x);
            self.s1 *= r;
            self.s2 *= r;
            self.d1 *= r;
            self.d2 *= r;
            self.m = x;
        }
        let p = libm::exp(x - self.m);
        self.s1 += c1 * p;
        self.s2 += c2 * p;
    }

    /// Factor `e^{m - max}` to bring this state onto a common scale.
    #[inline]
    fn factor(&self, max: f64) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            libm::exp(self.m - max)
        }
    }
}

/// For each position, the states summarizing all terms strictly to the left
/// and strictly to the right. Term `i` has log-magnitude `x[i]` and
/// coefficients `c1[i], c2[i]`; its weight seen from `t` carries the extra
/// factor `e^{-(|t-i|-1)·w}`.
fn directional_states(
    x: &[f64],
    c1: &[f64],
    c2: &[f64],
    w: f64,
    left: &mut [Scaled],
    right: &mut [Scaled],
) {
    let n = x.len();
    let mut st = Scaled::EMPTY;
    for t in 0..n {
        if t > 0 {
            st.decay(w);
            st.push(x[t - 1], c1[t - 1], c2[t - 1]);
        }
        left[t] = st;
    }
    st = Scaled::EMPTY;
    for t in (0..n).rev() {
        if t + 1 < n {
            st.decay(w);
            st.push(x[t + 1], c1[t + 1], c2[t + 1]);
        }
        right[t] = st;
    }
}

/// Per-sequence scratch buffers reused across channels.
struct Scratch {
    x: Vec<f64>,
    c1: Vec<f64>,
    c2: Vec<f64>,
    left: Vec<Scaled>,
    right: Vec<Scaled>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            x: vec![0.0; n],
            c1: vec![0.0; n],
            c2: vec![0.0; n],
            left: vec![Scaled::EMPTY; n],
            right: vec![Scaled::EMPTY; n],
        }
    }
}

/// Forward quantities for one position of one channel.
#[derive(Clone, Copy, Default)]
struct Point {
    out: f64,
    /// log of the full denominator.
    log_den: f64,
    /// ∂out/∂w.
    dout_dw: f64,
}

fn forward_line(
    kd: &[f64],
    vd: &[f64],
    lay: Layout,
    b: usize,
    c: usize,
    w: f64,
    u: f64,
    s: &mut Scratch,
    points: &mut [Point],
) {
    for t in 0..lay.len {
        let idx = lay.at(b, t, c);
        s.x[t] = kd[idx];
        s.c1[t] = vd[idx];
        s.c2[t] = 1.0;
    }
    directional_states(&s.x, &s.c1, &s.c2, w, &mut s.left, &mut s.right);
    for t in 0..lay.len {
        let (l, r) = (&s.left[t], &s.right[t]);
        let center = u + s.x[t];
        let max = center.max(l.m).max(r.m);
        let (fl, fr) = (l.factor(max), r.factor(max));
        let pc = libm::exp(center - max);
        let num = l.s1 * fl + r.s1 * fr + s.c1[t] * pc;
        let den = l.s2 * fl + r.s2 * fr + pc;
        let out = num / den;
        let dnum = l.d1 * fl + r.d1 * fr;
        let dden = l.d2 * fl + r.d2 * fr;
        points[t] = Point {
            out,
            log_den: max + libm::log(den),
            dout_dw: (out * dden - dnum) / den,
        };
    }
}

/// O(T·C) evaluation via left and right streaming recurrences.
pub fn cowkv_scan(k: &Tensor, v: &Tensor, params: &CoWkvParams) -> Result<Tensor> {
    layout(k.shape(), v.shape(), params.decay.len(), params.bonus.len())?;
    let out = scan_raw(k.shape(), k.data(), v.data(), &params.decay, &params.bonus)?;
    Tensor::checked("cowkv_scan", k.shape().to_vec(), out)
}

pub(crate) fn scan_raw(
    shape: &[usize],
    kd: &[f64],
    vd: &[f64],
    decay: &[f64],
    bonus: &[f64],
) -> Result<Vec<f64>> {
    let lay = layout(shape, shape, decay.len(), bonus.len())?;
    let mut out = vec![0.0; kd.len()];
    let mut s = Scratch::new(lay.len);
    let mut points = vec![Point::default(); lay.len];
    for b in 0..lay.batch {
        for c in 0..lay.channels {
            forward_line(kd, vd, lay, b, c, decay[c], bonus[c], &mut s, &mut points);
            for (t, p) in points.iter().enumerate() {
                out[lay.at(b, t, c)] = p.out;
            }
        }
    }
    Ok(out)
}

/// Gradients of `Σ upstream ⊙ cowkv(K, V)` with respect to `K`, `V`, `w`, `u`.
pub fn cowkv_grad(
    k: &Tensor,
    v: &Tensor,
    params: &CoWkvParams,
    upstream: &Tensor,
) -> Result<CoWkvGrads> {
    layout(k.shape(), v.shape(), params.decay.len(), params.bonus.len())?;
    if upstream.shape() != k.shape() {
        return Err(Error::ShapeMismatch {
            op: "cowkv_grad",
            left: k.shape().to_vec(),
            right: upstream.shape().to_vec(),
        });
    }
    let g = grad_raw(
        k.shape(),
        k.data(),
        v.data(),
        &params.decay,
        &params.bonus,
        upstream.data(),
    )?;
    Ok(CoWkvGrads {
        k: Tensor::checked("cowkv_grad", k.shape().to_vec(), g.k)?,
        v: Tensor::checked("cowkv_grad", k.shape().to_vec(), g.v)?,
        decay: g.decay,
        bonus: g.bonus,
    })
}

pub(crate) struct RawGrads {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub decay: Vec<f64>,
    pub bonus: Vec<f64>,
}

pub(crate) fn grad_raw(
    shape: &[usize],
    kd: &[f64],
    vd: &[f64],
    decay: &[f64],
    bonus: &[f64],
    gd: &[f64],
) -> Result<RawGrads> {
    let lay = layout(shape, shape, decay.len(), bonus.len())?;
    if gd.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "cowkv_grad" });
    }
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; kd.len()];
    let mut gw = vec![0.0; lay.channels];
    let mut gu = vec![0.0; lay.channels];
    let mut fwd = Scratch::new(lay.len);
    let mut bwd = Scratch::new(lay.len);
    let mut points = vec![Point::default(); lay.len];
    for b in 0..lay.batch {
        for c in 0..lay.channels {
            let (w, u) = (decay[c], bonus[c]);
            forward_line(kd, vd, lay, b, c, w, u, &mut fwd, &mut points);
            // Upstream terms seen by each key: α_t = g_t / den_t and
            // β_t = g_t·out_t / den_t, both stored as coefficient·e^{-log_den}.
            for (t, p) in points.iter().enumerate() {
                let g = gd[lay.at(b, t, c)];
                bwd.x[t] = -p.log_den;
                bwd.c1[t] = g;
                bwd.c2[t] = g * p.out;
                gw[c] += g * p.dout_dw;
                let p_center = libm::exp(u + fwd.x[t] - p.log_den);
                gu[c] += g * p_center * (fwd.c1[t] - p.out);
            }
            directional_states(&bwd.x, &bwd.c1, &bwd.c2, w, &mut bwd.left, &mut bwd.right);
            for i in 0..lay.len {
                let (l, r) = (&bwd.left[i], &bwd.right[i]);
                let center = u + bwd.x[i];
                let max = center.max(l.m).max(r.m);
                let (fl, fr) = (l.factor(max), r.factor(max));
                let pc = libm::exp(center - max);
                let s1 = l.s1 * fl + r.s1 * fr + bwd.c1[i] * pc;
                let s2 = l.s2 * fl + r.s2 * fr + bwd.c2[i] * pc;
                let scale = libm::exp(fwd.x[i] + max);
                let dv = s1 * scale;
                let idx = lay.at(b, i, c);
                gv[idx] = dv;
                gk[idx] = fwd.c1[i] * dv - s2 * scale;
            }
        }
    }
    Ok(RawGrads {
        k: gk,
        v: gv,
        decay: gw,
        bonus: gu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn params(c: usize, rng: &mut ChaCha8Rng) -> CoWkvParams {
        CoWkvParams::new(
            (0..c).map(|_| rng.random_range(-0.5..1.5)).collect(),
            (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().max_abs() / b.max_abs().max(1e-300)
    }

    #[test]
    fn single_token_returns_value() {
        let k = Tensor::new(&[1, 3], vec![0.3, -2.0, 5.0]).unwrap();
        let v = Tensor::new(&[1, 3], vec![1.5, -0.25, 7.0]).unwrap();
        let p = CoWkvParams::init(3);
        assert_eq!(cowkv_naive(&k, &v, &p).unwrap(), v);
        assert_eq!(cowkv_scan(&k, &v, &p).unwrap(), v);
    }

    #[test]
    fn constant_values_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random(&[9, 2], -3.0, 3.0, &mut rng);
        let v = Tensor::full(&[9, 2], 5.0);
        let p = params(2, &mut rng);
        for out in [cowkv_naive(&k, &v, &p).unwrap(), cowkv_scan(&k, &v, &p).unwrap()] {
            for &o in out.data() {
                assert!((o - 5.0).abs() < 1e-12);
            }
        }
    }

    // Frozen from an independent NumPy evaluation of the double sum
    // (T=4, C=2, w = [0.5, -0.25], u = [0.1, 0.3]).
    #[test]
    fn frozen_regression_vector() {
        let k = Tensor::new(
            &[4, 2],
            vec![0.2, -0.7, 0.9, 0.1, -0.4, 0.6, 0.3, -0.9],
        )
        .unwrap();
        let v = Tensor::new(
            &[4, 2],
            vec![-0.5, 0.8, 0.4, -0.3, 1.0, 0.2, -0.8, 0.6],
        )
        .unwrap();
        let p = CoWkvParams::new(vec![0.5, -0.25], vec![0.1, 0.3]).unwrap();
        let naive = cowkv_naive(&k, &v, &p).unwrap();
        let expected = Tensor::new(&[4, 2], FROZEN.to_vec()).unwrap();
        assert!(rel_err(&naive, &expected) < 1e-12, "{:?}", naive.data());
        assert!(rel_err(&cowkv_scan(&k, &v, &p).unwrap(), &expected) < 1e-12);
    }

    const FROZEN: [f64; 8] = [
        0.067523684893585359, 0.22460257521666199, 0.090619041254002511, 0.14480352236209401,
        0.051853753241857752, 0.1983986224208375, -0.036817774422489034, 0.20026673993146821,
    ];

    #[test]
    fn scan_matches_naive_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let t = rng.random_range(1..40);
            let c = rng.random_range(1..6);
            let k = random(&[2, t, c], -3.0, 3.0, &mut rng);
            let v = random(&[2, t, c], -2.0, 2.0, &mut rng);
            let p = params(c, &mut rng);
            let err = rel_err(&cowkv_scan(&k, &v, &p).unwrap(), &cowkv_naive(&k, &v, &p).unwrap());
            assert!(err < 1e-10, "T={t} C={c} err={err}");
        }
    }

    #[test]
    fn large_key_does_not_overflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut kd = vec![0.0; 16 * 2];
        kd[7 * 2] = 80.0;
        kd[3 * 2 + 1] = 800.0;
        let k = Tensor::new(&[16, 2], kd).unwrap();
        let v = random(&[16, 2], -1.0, 1.0, &mut rng);
        let p = CoWkvParams::init(2);
        let scan = cowkv_scan(&k, &v, &p).unwrap();
        let naive = cowkv_naive(&k, &v, &p).unwrap();
        assert!(rel_err(&scan, &naive) < 1e-10);
        let g = cowkv_grad(&k, &v, &p, &Tensor::full(&[16, 2], 1.0)).unwrap();
        assert!(g.k.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random(&[5, 3], -1.0, 1.0, &mut rng);
        let v = random(&[5, 3], -1.0, 1.0, &mut rng);
        let p = params(3, &mut rng);
        let g = cowkv_grad(&k, &v, &p, &Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(g.k.max_abs(), 0.0);
        assert_eq!(g.v.max_abs(), 0.0);
        assert!(g.decay.iter().chain(&g.bonus).all(|&x| x == 0.0));
    }

    #[test]
    fn reversal_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, c) = (11, 3);
        let k = random(&[t, c], -2.0, 2.0, &mut rng);
        let v = random(&[t, c], -2.0, 2.0, &mut rng);
        let p = params(c, &mut rng);
        let rev = |x: &Tensor| {
            let mut d = Vec::new();
            for row in x.data().chunks(c).rev() {
                d.extend_from_slice(row);
            }
            Tensor::new(&[t, c], d).unwrap()
        };
        let out = cowkv_scan(&k, &v, &p).unwrap();
        let out_rev = cowkv_scan(&rev(&k), &rev(&v), &p).unwrap();
        assert!(rel_err(&out_rev, &rev(&out)) < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = CoWkvParams::init(2);
        let k = Tensor::zeros(&[0, 2]);
        assert!(matches!(cowkv_scan(&k, &k, &p), Err(Error::Empty(_))));
        let a = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(cowkv_scan(&a, &b, &p).is_err());
        assert!(cowkv_scan(&b, &b, &p).is_err());
    }
}
