use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Variances below this are clamped before the log in [`loss_kl`].
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Mean squared error between `pred` and `target` of identical shape.
pub fn mse_on(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "mse",
            left: tape.shape(pred).to_vec(),
            right: tape.shape(target).to_vec(),
        });
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Reconstruction of the clean target by the signal decoder.
pub fn loss_clean(tape: &mut Tape, pred: Var, clean: Var) -> Result<Var> {
    mse_on(tape, pred, clean)
}

/// Reconstruction of the noisy input by the representation decoder.
pub fn loss_noise(tape: &mut Tape, pred: Var, noisy: Var) -> Result<Var> {
    mse_on(tape, pred, noisy)
}

/// `mu^2 + sigma^2 - log(sigma^2) - 1` with `mu`, `sigma` pooled over every
/// element of `z` (population variance).
///
/// The second value reports whether the variance floor engaged.
pub fn loss_kl(tape: &mut Tape, z: Var) -> Result<(Var, bool)> {
    if tape.value(z).len() < 2 {
        return Err(Error::InvalidArgument("kl needs at least two elements".into()));
    }
    let mu = tape.mean(z)?;
    let var = tape.variance(z)?;
    let clamped = tape.value(var).item()? < VARIANCE_FLOOR;
    let var = tape.clamp_min(var, VARIANCE_FLOOR)?;
    let mu2 = tape.square(mu)?;
    let log_var = tape.log(var)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, log_var)?;
    Ok((tape.add_scalar(b, -1.0)?, clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use alloc::vec;
    use alloc::vec::Vec;

    fn mse_of(pred: &[f64], target: &[f64]) -> f64 {
        let mut t = Tape::new();
        let p = t.constant(Tensor::from_vec(pred.to_vec()).unwrap());
        let s = t.constant(Tensor::from_vec(target.to_vec()).unwrap());
        let l = loss_clean(&mut t, p, s).unwrap();
        t.value(l).item().unwrap()
    }

    fn kl_of(z: Vec<f64>) -> (f64, bool) {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_vec(z).unwrap());
        let (l, c) = loss_kl(&mut t, v).unwrap();
        (t.value(l).item().unwrap(), c)
    }

    #[test]
    fn reconstruction_anchors() {
        assert_eq!(mse_of(&[1.0, 3.0], &[1.0, 3.0]), 0.0);
        assert_eq!(mse_of(&[2.0, 4.0, -1.0], &[1.0, 3.0, -2.0]), 1.0);
        assert_eq!(mse_of(&[1.0, 3.0], &[0.0, 3.0]), 0.5);
    }

    #[test]
    fn kl_anchors() {
        // mu = 0, sigma = 1
        assert_eq!(kl_of(vec![1.0, -1.0]).0, 0.0);
        // mu = 1, sigma = 1
        assert_eq!(kl_of(vec![2.0, 0.0]).0, 1.0);
    }

    #[test]
    fn kl_grows_as_spread_shrinks() {
        let mut last = kl_of(vec![1.0, -1.0]).0;
        for k in 1..12 {
            let s = libm::pow(10.0, -(k as f64) / 2.0);
            let (v, clamped) = kl_of(vec![s, -s]);
            assert!(v > last, "{v} <= {last}");
            assert!(!clamped);
            last = v;
        }
        let (v, clamped) = kl_of(vec![0.5, 0.5, 0.5]);
        assert!(clamped);
        assert!(v.is_finite());
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::zeros(&[3]));
        let s = t.constant(Tensor::zeros(&[2]));
        assert!(loss_noise(&mut t, p, s).is_err());
        let one = t.constant(Tensor::zeros(&[1]));
        assert!(loss_kl(&mut t, one).is_err());
    }
}
