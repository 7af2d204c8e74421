use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

/// AdamW moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(store: &mut ParamStore, grads: &[Tensor], opt: &mut OptState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || opt.m.len() != store.len() {
        return Err(Error::InvalidArgument("gradient/state count differs from parameters".to_string()));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                left: store.get(id).shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    opt.step += 1;
    let t = opt.step as f64;
    let c1 = 1.0 - libm::pow(opt.beta1, t);
    let c2 = 1.0 - libm::pow(opt.beta2, t);
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let decay = 1.0 - lr * opt.weight_decay;
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = grads[i].data();
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        }
        let (m, v) = (opt.m[i].data(), opt.v[i].data());
        store.get_mut(id).update(|j, x| {
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            x * decay - lr * mh / (libm::sqrt(vh) + eps)
        })?;
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    libm::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>(),
    )
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.update(|_, x| x * s)?;
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use alloc::vec;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::from_vec(vec![x]).unwrap(), ParamKind::Weight);
        s
    }

    fn theta(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().1.data()[0]
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut s = scalar_store(1.5);
        let mut opt = OptState::new(&s, 0.0);
        for _ in 0..3 {
            adamw_step(&mut s, &[Tensor::zeros(&[1])], &mut opt, 0.1).unwrap();
        }
        assert_eq!(theta(&s), 1.5);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn first_step_by_hand() {
        let mut s = scalar_store(1.0);
        let mut opt = OptState::new(&s, 0.0);
        adamw_step(&mut s, &[Tensor::full(&[1], 1.0)], &mut opt, 0.1).unwrap();
        assert_eq!(theta(&s), 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)));
    }

    #[test]
    fn decay_only_path() {
        let mut s = scalar_store(2.0);
        let mut opt = OptState::new(&s, 0.01);
        adamw_step(&mut s, &[Tensor::zeros(&[1])], &mut opt, 0.1).unwrap();
        assert_eq!(theta(&s), 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut opt = OptState::new(&s, 0.0);
        let bad = Tensor::from_parts(vec![1], vec![f64::NAN]);
        match adamw_step(&mut s, &[bad], &mut opt, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "theta"),
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![Tensor::from_vec(vec![0.3, 0.4]).unwrap()];
        clip_global_norm(&mut small, 1.0).unwrap();
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }
}
