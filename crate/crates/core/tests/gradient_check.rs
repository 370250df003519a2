//! Analytic gradients of the denoiser loss against central finite differences.

use lfod_core::lfdn::{LfdnConfig, LfdnParams};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Batch loss evaluated from the forward pass alone.
fn loss(p: &LfdnParams, zt: ArrayView2<f64>, ts: &[usize], z0: ArrayView2<f64>) -> f64 {
    let out = p.forward_batch(zt, ts).unwrap();
    let n = zt.nrows() as f64;
    (&out - &z0).iter().map(|v| v * v).sum::<f64>() / n
}

fn random_params(cfg: LfdnConfig, seed: u64) -> LfdnParams {
    let mut p = LfdnParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    // break the zero-initialized output layers so every path carries gradient
    for t in p.tensors_mut() {
        for v in t {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn max_relative_error(cfg: LfdnConfig, batch: usize, seed: u64) -> f64 {
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_params(cfg, seed);
    let zt = Array2::from_shape_fn((batch, cfg.input_dim), |_| rng.random_range(-2.0..2.0));
    let z0 = Array2::from_shape_fn((batch, cfg.input_dim), |_| rng.random_range(-2.0..2.0));
    let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=100)).collect();

    let (_, grads) = p.backward(zt.view(), &ts, z0.view()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let names = p.tensor_specs();

    let mut worst = 0.0f64;
    for (ti, spec) in names.iter().enumerate() {
        let n = spec.numel();
        let coords: Vec<usize> = if n <= 10 {
            (0..n).collect()
        } else {
            (0..10).map(|_| rng.random_range(0..n)).collect()
        };
        for i in coords {
            let mut plus = p.clone();
            plus.tensors_mut()[ti][i] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[ti][i] -= h;
            let numeric = (loss(&plus, zt.view(), &ts, z0.view())
                - loss(&minus, zt.view(), &ts, z0.view()))
                / (2.0 * h);
            let a = analytic[ti][i];
            // absolute floor keeps vanishing gradients from dividing by ~0
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            assert!(
                rel < 1e-4,
                "{}[{i}]: analytic {a:e} vs numeric {numeric:e} (rel {rel:e})",
                spec.name
            );
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn tiny_net_gradient_check() {
    let cfg = LfdnConfig {
        num_blocks: 2,
        ..LfdnConfig::new(8)
    };
    let worst = max_relative_error(cfg, 4, 17);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn grouped_norm_gradient_check() {
    let cfg = LfdnConfig {
        input_dim: 12,
        hidden_dim: 18,
        num_blocks: 2,
        groupnorm_groups: 3,
        time_embed_dim: 16,
    };
    let worst = max_relative_error(cfg, 3, 5);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn wide_time_embedding_single_block() {
    let cfg = LfdnConfig {
        num_blocks: 1,
        ..LfdnConfig::new(16)
    };
    let worst = max_relative_error(cfg, 2, 99);
    assert!(worst < 1e-4, "{worst}");
}
