use dremnet_core::numerics::Tensor;
use dremnet_core::train::{ClubNet, OptState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(&[rows, dim], data).unwrap()
}

fn noisy_copy(x: &Tensor, sd: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + sd * e
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

#[test]
fn independent_factors_estimate_near_zero() {
    let dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut net = ClubNet::new(dim, 16, 3);
    let mut opt = OptState::new(&net.params, 0.0);
    for _ in 0..50 {
        let x = gaussian(256, dim, &mut rng);
        let y = gaussian(256, dim, &mut rng);
        net.fit_step(&x, &y, &mut opt, 1e-3).unwrap();
    }
    // 20 batches x 500 rows = 1e4 samples
    let estimates: Vec<f64> = (0..20)
        .map(|_| {
            let x = gaussian(500, dim, &mut rng);
            let y = gaussian(500, dim, &mut rng);
            net.estimate(&x, &y).unwrap()
        })
        .collect();
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let ci = 3.0 * sd / n.sqrt();
    assert!(mean.abs() <= ci, "{mean} outside +-{ci}");
}

#[test]
fn dependent_factors_estimate_positive() {
    let dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut net = ClubNet::new(dim, 32, 4);
    let mut opt = OptState::new(&net.params, 0.0);
    for _ in 0..300 {
        let x = gaussian(128, dim, &mut rng);
        net.fit_step(&x, &noisy_copy(&x, 0.1, &mut rng), &mut opt, 1e-2).unwrap();
    }
    let x = gaussian(1000, dim, &mut rng);
    let y = x.clone();
    assert!(net.estimate(&x, &y).unwrap() > 0.5);
}

#[test]
fn fitting_raises_log_likelihood() {
    let dim = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = gaussian(200, dim, &mut rng);
    let y = noisy_copy(&x, 0.3, &mut rng);
    let mut net = ClubNet::new(dim, 16, 5);
    let mut opt = OptState::new(&net.params, 0.0);
    let start = net.log_likelihood(&x, &y).unwrap();
    for _ in 0..100 {
        net.fit_step(&x, &y, &mut opt, 1e-2).unwrap();
    }
    let end = net.log_likelihood(&x, &y).unwrap();
    assert!(end > start, "{start} -> {end}");
}
