//! Contrastive log-ratio upper bound on `I(Z_s; Z_n)` with a diagonal
//! Gaussian variational net `q(Z_n | Z_s)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::Linear;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bindings, ParamStore};
use crate::train::optim::{adamw_step, OptState};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug)]
pub struct ClubNet {
    pub params: ParamStore,
    hidden: Linear,
    mean: Linear,
    log_var: Linear,
    dim: usize,
}

impl ClubNet {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = Linear::new(&mut params, "club.hidden", dim, hidden, true, &mut rng);
        let mean = Linear::new(&mut params, "club.mean", hidden, dim, true, &mut rng);
        let log_var = Linear::new(&mut params, "club.log_var", hidden, dim, true, &mut rng);
        Self {
            params,
            hidden: h,
            mean,
            log_var,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean and log-variance of `q(. | x)` for `x: [N, D]`; the log-variance
    /// is squashed into `(-1, 1)` with `tanh`.
    fn moments(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let mu = self.mean.forward(tape, p, h)?;
        let raw = self.log_var.forward(tape, p, h)?;
        let twice = tape.scale(raw, 2.0)?;
        let s = tape.sigmoid(twice)?;
        let s2 = tape.scale(s, 2.0)?;
        let lv = tape.add_scalar(s2, -1.0)?;
        Ok((mu, lv))
    }

    /// Mean over rows of `log q(y_i | x_i)`.
    pub fn log_likelihood_on(&self, tape: &mut Tape, p: &Bindings, x: Var, y: Var) -> Result<Var> {
        let n = check_pairs(tape, x, y, self.dim, 1)?;
        let (mu, lv) = self.moments(tape, p, x)?;
        let r = tape.sub(y, mu)?;
        let r2 = tape.square(r)?;
        let neg_lv = tape.scale(lv, -1.0)?;
        let inv_var = tape.exp(neg_lv)?;
        let quad = tape.mul(r2, inv_var)?;
        let per = tape.add(quad, lv)?;
        let total = tape.sum(per)?;
        let mean = tape.scale(total, -0.5 / n as f64)?;
        tape.add_scalar(mean, -HALF_LN_2PI * self.dim as f64)
    }

    /// `mean_i log q(y_i|x_i) - mean_{i != j} log q(y_j|x_i)`.
    ///
    /// The log-variance and normalizing terms cancel between the two means,
    /// and the mismatched sum has a closed form in the per-dimension first and
    /// second moments of `y`, so the cost is linear in `N`.
    pub fn estimate_on(&self, tape: &mut Tape, p: &Bindings, x: Var, y: Var) -> Result<Var> {
        let n = check_pairs(tape, x, y, self.dim, 2)? as f64;
        let (mu, lv) = self.moments(tape, p, x)?;
        let neg_lv = tape.scale(lv, -1.0)?;
        let inv_var = tape.exp(neg_lv)?;
        let r = tape.sub(y, mu)?;
        let r2 = tape.square(r)?;
        // sum_j (y_j - mu_i)^2 = S2 - 2 mu_i S1 + N mu_i^2
        let s1 = tape.sum_rows(y)?;
        let y2 = tape.square(y)?;
        let s2 = tape.sum_rows(y2)?;
        let mu_s1 = tape.mul(mu, s1)?;
        let mu_s1 = tape.scale(mu_s1, -2.0)?;
        let mu2 = tape.square(mu)?;
        let mu2 = tape.scale(mu2, n)?;
        let all = tape.add(mu_s1, mu2)?;
        let all = tape.add(all, s2)?;
        let others = tape.sub(all, r2)?;
        let others = tape.scale(others, 1.0 / (n - 1.0))?;
        let gap = tape.sub(others, r2)?;
        let weighted = tape.mul(gap, inv_var)?;
        let total = tape.sum(weighted)?;
        tape.scale(total, 0.5 / n)
    }

    /// Value-level MI estimate; no gradients are recorded.
    pub fn estimate(&self, content: &Tensor, context: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(content.clone());
        let y = tape.constant(context.clone());
        let e = self.estimate_on(&mut tape, &p, x, y)?;
        tape.value(e).item()
    }

    pub fn log_likelihood(&self, content: &Tensor, context: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(content.clone());
        let y = tape.constant(context.clone());
        let e = self.log_likelihood_on(&mut tape, &p, x, y)?;
        tape.value(e).item()
    }

    /// One ascent step on the mean log-likelihood of `context` given
    /// `content`. Inputs are values, so nothing flows back into their source.
    /// Returns the log-likelihood before the step.
    pub fn fit_step(&mut self, content: &Tensor, context: &Tensor, opt: &mut OptState, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let x = tape.constant(content.clone());
        let y = tape.constant(context.clone());
        let ll = self.log_likelihood_on(&mut tape, &p, x, y)?;
        let before = tape.value(ll).item()?;
        let loss = tape.scale(ll, -1.0)?;
        tape.backward(loss)?;
        let grads = p.grads(&tape, &self.params);
        adamw_step(&mut self.params, &grads, opt, lr)?;
        Ok(before)
    }
}

/// Flattens `[.., D]` factor tensors to `[N, D]` sample rows.
pub fn as_rows(z: &Tensor) -> Result<Tensor> {
    let d = z.last_dim();
    z.reshape(&[z.len() / d.max(1), d])
}

fn check_pairs(tape: &Tape, x: Var, y: Var, dim: usize, min: usize) -> Result<usize> {
    let (xs, ys) = (tape.shape(x), tape.shape(y));
    if xs.len() != 2 || xs != ys || xs[1] != dim {
        return Err(Error::ShapeMismatch {
            op: "club",
            left: xs.to_vec(),
            right: ys.to_vec(),
        });
    }
    if xs[0] < min {
        return Err(Error::InvalidArgument(alloc::format!(
            "club needs at least {min} paired samples, got {}",
            xs[0]
        )));
    }
    Ok(xs[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    /// Direct double sum over all pairs.
    fn brute_estimate(net: &ClubNet, x: &Tensor, y: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (mu, lv) = net.moments(&mut tape, &p, xv).unwrap();
        let (mu, lv) = (tape.value(mu).clone(), tape.value(lv).clone());
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let logq = |i: usize, j: usize| -> f64 {
            (0..d)
                .map(|c| {
                    let m = mu.data()[i * d + c];
                    let l = lv.data()[i * d + c];
                    let r = y.data()[j * d + c] - m;
                    -0.5 * (r * r / libm::exp(l) + l) - HALF_LN_2PI
                })
                .sum()
        };
        let pos: f64 = (0..n).map(|i| logq(i, i)).sum::<f64>() / n as f64;
        let mut neg = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    neg += logq(i, j);
                }
            }
        }
        pos - neg / (n * (n - 1)) as f64
    }

    #[test]
    fn closed_form_matches_double_sum() {
        let net = ClubNet::new(3, 8, 4);
        let x = Tensor::new(&[5, 3], (0..15).map(|i| libm::sin(i as f64)).collect()).unwrap();
        let y = Tensor::new(&[5, 3], (0..15).map(|i| libm::cos(1.3 * i as f64)).collect()).unwrap();
        let fast = net.estimate(&x, &y).unwrap();
        let slow = brute_estimate(&net, &x, &y);
        assert!((fast - slow).abs() < 1e-12 * (1.0 + slow.abs()), "{fast} vs {slow}");
    }

    #[test]
    fn single_pair_rejected() {
        let net = ClubNet::new(2, 4, 0);
        let one = Tensor::zeros(&[1, 2]);
        assert!(net.estimate(&one, &one).is_err());
    }

    #[test]
    fn zero_lr_fit_leaves_net_unchanged() {
        let mut net = ClubNet::new(2, 4, 1);
        let before: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
        let mut opt = OptState::new(&net.params, 0.0);
        let x = Tensor::new(&[3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        net.fit_step(&x, &x, &mut opt, 0.0).unwrap();
        let after: Vec<Tensor> = net.params.iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, after);
    }
}
