//! Finite-difference checks for every differentiable tape op and for each
//! layer built out of them.

use dremnet_core::blocks::{ChannelMix, DrStack, SignalMix, TailPadding};
use dremnet_core::cowkv::{cowkv_grad, cowkv_naive, CoWkvParams};
use dremnet_core::model::{Dremnet, ModelConfig};
use dremnet_core::numerics::{finite_diff_check, Tape, Tensor, Var};
use dremnet_core::params::{Bindings, ParamStore};
use dremnet_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Contracts `y` with fixed random weights so every output element matters.
fn project(t: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = t.shape(y).to_vec();
    let r = t.constant(random(&shape, 0.5, 1.5, &mut rng));
    let p = t.mul(y, r)?;
    t.sum(p)
}

fn check(params: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let r = finite_diff_check(params, H, f).unwrap();
    r.max_rel_error
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[3, 4], -2.0, 2.0, &mut rng);
    let y = random(&[3, 4], -2.0, 2.0, &mut rng);
    let row = random(&[4], -2.0, 2.0, &mut rng);
    let pos = random(&[3, 4], 0.5, 2.0, &mut rng);
    type Unary = fn(&mut Tape, Var) -> Result<Var>;
    let unary: [(&str, Unary); 6] = [
        ("exp", |t, v| t.exp(v)),
        ("sigmoid", |t, v| t.sigmoid(v)),
        ("square", |t, v| t.square(v)),
        ("scale", |t, v| t.scale(v, -1.7)),
        ("add_scalar", |t, v| t.add_scalar(v, 0.3)),
        ("normalize_last", |t, v| t.normalize_last(v, 1e-5)),
    ];
    for (name, op) in unary {
        let e = check(&[x.clone()], |t, p| {
            let o = op(t, p[0])?;
            project(t, o, 1)
        });
        assert!(e < 1e-5, "{name}: {e}");
    }
    let e = check(&[pos.clone()], |t, p| {
        let o = t.log(p[0])?;
        project(t, o, 2)
    });
    assert!(e < 1e-5, "log: {e}");
    // relu and clamp are checked away from their kinks
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.5 } else { v }).unwrap();
    let e = check(&[away.clone()], |t, p| {
        let o = t.relu(p[0])?;
        project(t, o, 3)
    });
    assert!(e < 1e-5, "relu: {e}");
    let e = check(&[away], |t, p| {
        let o = t.clamp_min(p[0], 0.0)?;
        project(t, o, 3)
    });
    assert!(e < 1e-5, "clamp_min: {e}");

    type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;
    let binary: [(&str, Binary); 3] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ];
    for (name, op) in binary {
        for rhs in [&y, &row] {
            let e = check(&[x.clone(), rhs.clone()], |t, p| {
                let o = op(t, p[0], p[1])?;
                project(t, o, 4)
            });
            assert!(e < 1e-5, "{name} {:?}: {e}", rhs.shape());
        }
    }
}

#[test]
fn structural_and_reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[2, 3, 2], -2.0, 2.0, &mut rng);
    let b = random(&[2, 3, 3], -2.0, 2.0, &mut rng);
    let w = random(&[5, 4], -2.0, 2.0, &mut rng);
    let e = check(&[a.clone(), b.clone(), w], |t, p| {
        let c = t.concat(&[p[0], p[1]])?;
        let m = t.matmul(c, p[2])?;
        let s = t.slice_last(m, 1, 2)?;
        project(t, s, 5)
    });
    assert!(e < 1e-5, "concat/matmul/slice: {e}");

    let e = check(&[a.clone()], |t, p| {
        let m = t.mean(p[0])?;
        let v = t.variance(p[0])?;
        let s = t.sum(p[0])?;
        let mv = t.mul(m, v)?;
        let out = t.add(mv, s)?;
        t.square(out)
    });
    assert!(e < 1e-5, "mean/variance/sum: {e}");

    let row = random(&[2], -2.0, 2.0, &mut rng);
    let e = check(&[a.clone(), row], |t, p| {
        let r = t.sum_rows(p[0])?;
        let b = t.broadcast(p[1], &[4, 2])?;
        let rb = t.mul(b, r)?;
        let resh = t.reshape(rb, &[8])?;
        project(t, resh, 6)
    });
    assert!(e < 1e-5, "sum_rows/broadcast/reshape: {e}");

    let mix = random(&[2], 0.0, 1.0, &mut rng);
    let e = check(&[a, mix], |t, p| {
        let o = t.token_shift(p[0], p[1])?;
        project(t, o, 7)
    });
    assert!(e < 1e-5, "token_shift: {e}");

    for pad in [TailPadding::Zero, TailPadding::Replicate] {
        let x = random(&[2, 6], -2.0, 2.0, &mut rng);
        let e = check(&[x], |t, p| {
            let o = t.cover_windows(p[0], 3, pad)?;
            project(t, o, 8)
        });
        assert!(e < 1e-5, "cover_windows {pad:?}: {e}");
    }
}

#[test]
fn cowkv_tape_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (t_len, c) = (8, 4);
    let k = random(&[t_len, c], -2.0, 2.0, &mut rng);
    let v = random(&[t_len, c], -2.0, 2.0, &mut rng);
    let w = random(&[c], -0.5, 1.5, &mut rng);
    let u = random(&[c], -1.0, 1.0, &mut rng);
    let e = check(&[k, v, w, u], |t, p| {
        let o = t.cowkv(p[0], p[1], p[2], p[3])?;
        project(t, o, 9)
    });
    assert!(e < 1e-5, "cowkv: {e}");
}

/// The analytic scan gradient against central differences of the naive
/// double sum, not of the scan.
#[test]
fn cowkv_grad_matches_naive_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (t_len, c) = (6, 3);
    let k = random(&[t_len, c], -2.0, 2.0, &mut rng);
    let v = random(&[t_len, c], -2.0, 2.0, &mut rng);
    let params = CoWkvParams::new(
        (0..c).map(|_| rng.random_range(-0.5..1.5)).collect(),
        (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let upstream = random(&[t_len, c], 0.5, 1.5, &mut rng);
    let objective = |k: &Tensor, v: &Tensor, p: &CoWkvParams| -> f64 {
        let out = cowkv_naive(k, v, p).unwrap();
        out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    let g = cowkv_grad(&k, &v, &params, &upstream).unwrap();
    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs() + 1e-12);
    let mut worst = 0.0f64;
    for i in 0..k.len() {
        for (which, analytic) in [(0, g.k.data()[i]), (1, g.v.data()[i])] {
            let bump = |d: f64| {
                let mut kd = k.data().to_vec();
                let mut vd = v.data().to_vec();
                if which == 0 {
                    kd[i] += d
                } else {
                    vd[i] += d
                }
                objective(
                    &Tensor::new(k.shape(), kd).unwrap(),
                    &Tensor::new(k.shape(), vd).unwrap(),
                    &params,
                )
            };
            worst = worst.max(rel(analytic, (bump(H) - bump(-H)) / (2.0 * H)));
        }
    }
    for ch in 0..c {
        for (which, analytic) in [(0, g.decay[ch]), (1, g.bonus[ch])] {
            let bump = |d: f64| {
                let mut p = params.clone();
                if which == 0 {
                    p.decay[ch] += d
                } else {
                    p.bonus[ch] += d
                }
                objective(&k, &v, &p)
            };
            worst = worst.max(rel(analytic, (bump(H) - bump(-H)) / (2.0 * H)));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn constant_values_have_zero_decay_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let k = random(&[7, 2], -2.0, 2.0, &mut rng);
    let v = Tensor::full(&[7, 2], 3.0);
    let params = CoWkvParams::init(2);
    let g = cowkv_grad(&k, &v, &params, &random(&[7, 2], -1.0, 1.0, &mut rng)).unwrap();
    for d in g.decay.iter().chain(&g.bonus) {
        assert!(d.abs() < 1e-12, "{d}");
    }
    for x in g.k.data() {
        assert!(x.abs() < 1e-12);
    }
}

fn layer_params(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

fn bind(vars: &[Var]) -> Bindings {
    Bindings::from_vars(vars.to_vec())
}

#[test]
fn signal_mix_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let layer = SignalMix::new(&mut store, "sm", 4, &mut rng);
    let x = random(&[2, 6, 4], -2.0, 2.0, &mut rng);
    let mut params = layer_params(&store);
    params.push(x);
    let e = check(&params, |t, p| {
        let b = bind(&p[..p.len() - 1]);
        let o = layer.forward(t, &b, p[p.len() - 1])?;
        project(t, o, 16)
    });
    assert!(e < 1e-5, "signal_mix: {e}");
}

#[test]
fn channel_mix_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let layer = ChannelMix::new(&mut store, "cm", 4, 16, &mut rng);
    let x = random(&[2, 5, 4], -2.0, 2.0, &mut rng);
    let mut params = layer_params(&store);
    params.push(x);
    let e = check(&params, |t, p| {
        let b = bind(&p[..p.len() - 1]);
        let o = layer.forward(t, &b, p[p.len() - 1])?;
        project(t, o, 18)
    });
    assert!(e < 1e-5, "channel_mix: {e}");
}

#[test]
fn two_block_stack_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParamStore::new();
    let stack = DrStack::new(&mut store, "dr", 2, 4, 16, &mut rng);
    let x = random(&[1, 7, 4], -2.0, 2.0, &mut rng);
    let mut params = layer_params(&store);
    params.push(x);
    let e = check(&params, |t, p| {
        let b = bind(&p[..p.len() - 1]);
        let o = stack.forward(t, &b, p[p.len() - 1])?;
        project(t, o, 20)
    });
    assert!(e < 1e-5, "dr stack: {e}");
}

#[test]
fn two_block_model_end_to_end_gradient() {
    let model = Dremnet::new(ModelConfig::with_width(2, 4), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let noisy = random(&[2, 6], -2.0, 2.0, &mut rng);
    let clean = random(&[2, 6], -2.0, 2.0, &mut rng);
    let params = layer_params(&model.params);
    let e = check(&params, |t, p| {
        let b = bind(p);
        let xn = t.constant(noisy.clone());
        let xc = t.constant(clean.clone());
        let (zs1, zn1) = model.encode_on(t, &b, xn)?;
        let (zs2, zn2) = model.encode_on(t, &b, xc)?;
        let s = model.decode_signal_on(t, &b, zs1, zn2)?;
        let n = model.decode_repr_on(t, &b, zs2, zn1)?;
        let a = project(t, s, 23)?;
        let c = project(t, n, 24)?;
        t.add(a, c)
    });
    assert!(e < 1e-5, "model: {e}");
}
