//! Finite-difference gradient checks for every layer. f32 arithmetic limits
//! the attainable agreement; tolerances are set to catch formula and
//! indexing mistakes, which show up as O(1) relative errors.

use super::*;
use ndarray::{Array2, Array5};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn5(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize, usize)) -> Array5<f32> {
    let mut a = Array5::zeros(shape);
    for v in a.iter_mut() {
        *v = rng.random_range(-1.0f32..1.0);
    }
    a
}

fn randn2(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f32> {
    let mut a = Array2::zeros(shape);
    for v in a.iter_mut() {
        *v = rng.random_range(-1.0f32..1.0);
    }
    a
}

fn dotsum(a: &Array5<f32>, b: &Array5<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum()
}

/// Probe indices spread over a flat tensor.
fn probes(len: usize, want: usize) -> Vec<usize> {
    let step = len.div_ceil(want).max(1);
    (0..len).step_by(step).collect()
}

fn assert_close(an: f64, fd: f64, tol: f64, what: &str) {
    let denom = an.abs().max(fd.abs()).max(1.0);
    assert!(
        (an - fd).abs() / denom < tol,
        "{what}: analytic {an} vs fd {fd}"
    );
}

#[test]
fn conv3d_gradients_match_finite_differences() {
    for &(k, s, p) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
        let mut r = rng(7 + k as u64 + s as u64);
        let mut conv = Conv3d::new(2, 3, k, s, p, &mut r);
        let mut x = randn5(&mut r, (2, 2, 5, 5, 5));
        let out = conv.forward(&x);
        let upstream = randn5(&mut rng(999), out.dim());
        let dx = conv.backward(&upstream);

        // input gradient
        let h = 5e-3f32;
        let xlen = x.len();
        for i in probes(xlen, 50) {
            let orig = x.as_slice().unwrap()[i];
            x.as_slice_mut().unwrap()[i] = orig + h;
            let up = dotsum(&conv.forward(&x), &upstream);
            x.as_slice_mut().unwrap()[i] = orig - h;
            let down = dotsum(&conv.forward(&x), &upstream);
            x.as_slice_mut().unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * f64::from(h));
            assert_close(
                f64::from(dx.as_slice().unwrap()[i]),
                fd,
                3e-2,
                &format!("conv k{k}s{s} input[{i}]"),
            );
        }

        // weight gradient: re-run forward+backward to refresh grads, read them out
        let mut grad_w = Vec::new();
        let _ = conv.forward(&x);
        let _ = conv.backward(&upstream);
        conv.visit_params("c", &mut |name: &str, _p: &mut [f32], g: &mut [f32]| {
            if name == "c.weight" {
                grad_w = g.to_vec();
            }
        });
        // the second backward accumulated on top of the first; halve
        for g in &mut grad_w {
            *g /= 2.0;
        }
        let wlen = conv.weight.len();
        for i in probes(wlen, 40) {
            let orig = conv.weight.as_slice().unwrap()[i];
            conv.weight.as_slice_mut().unwrap()[i] = orig + h;
            let up = dotsum(&conv.forward(&x), &upstream);
            conv.weight.as_slice_mut().unwrap()[i] = orig - h;
            let down = dotsum(&conv.forward(&x), &upstream);
            conv.weight.as_slice_mut().unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * f64::from(h));
            assert_close(
                f64::from(grad_w[i]),
                fd,
                3e-2,
                &format!("conv k{k}s{s} weight[{i}]"),
            );
        }
    }
}

#[test]
fn batchnorm_train_gradients_match_finite_differences() {
    let mut r = rng(11);
    let mut bn = BatchNorm3d::new(3);
    for (i, g) in bn.gamma.iter_mut().enumerate() {
        *g = 0.5 + 0.3 * i as f32;
    }
    for (i, b) in bn.beta.iter_mut().enumerate() {
        *b = 0.1 * i as f32;
    }
    let mut x = randn5(&mut r, (3, 3, 3, 3, 3));
    let out = bn.forward(&x, true);
    let upstream = randn5(&mut rng(999), out.dim());
    let dx = bn.backward(&upstream);

    let h = 5e-3f32;
    for i in probes(x.len(), 60) {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + h;
        let up = dotsum(&bn.forward(&x, true), &upstream);
        x.as_slice_mut().unwrap()[i] = orig - h;
        let down = dotsum(&bn.forward(&x, true), &upstream);
        x.as_slice_mut().unwrap()[i] = orig;
        let fd = (up - down) / (2.0 * f64::from(h));
        assert_close(
            f64::from(dx.as_slice().unwrap()[i]),
            fd,
            5e-2,
            &format!("bn input[{i}]"),
        );
    }
}

#[test]
fn batchnorm_eval_backward_is_a_simple_scale() {
    let mut r = rng(12);
    let mut bn = BatchNorm3d::new(2);
    bn.running_mean = vec![0.2, -0.1];
    bn.running_var = vec![0.8, 1.5];
    bn.gamma = vec![1.3, 0.7];
    let x = randn5(&mut r, (2, 2, 2, 2, 2));
    let _ = bn.forward(&x, false);
    let upstream = randn5(&mut r, (2, 2, 2, 2, 2));
    let dx = bn.backward(&upstream);
    for ((idx, g), u) in dx.indexed_iter().zip(upstream.iter()) {
        let scale = bn.gamma[idx.1] / (bn.running_var[idx.1] + bn.eps).sqrt();
        assert!((g - u * scale).abs() < 1e-5);
    }
}

#[test]
fn se_block_gradients_match_finite_differences() {
    let mut r = rng(13);
    let mut se = SeBlock::new(4, 2, &mut r);
    let mut x = randn5(&mut r, (2, 4, 3, 3, 3));
    let out = se.forward(&x);
    let upstream = randn5(&mut rng(999), out.dim());
    let dx = se.backward(&upstream);

    let h = 5e-3f32;
    for i in probes(x.len(), 60) {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + h;
        let up = dotsum(&se.forward(&x), &upstream);
        let _ = se.backward(&upstream); // clear the taken cache path
        x.as_slice_mut().unwrap()[i] = orig - h;
        let down = dotsum(&se.forward(&x), &upstream);
        let _ = se.backward(&upstream);
        x.as_slice_mut().unwrap()[i] = orig;
        let fd = (up - down) / (2.0 * f64::from(h));
        assert_close(
            f64::from(dx.as_slice().unwrap()[i]),
            fd,
            3e-2,
            &format!("se input[{i}]"),
        );
    }
}

#[test]
fn bottleneck_gradients_match_finite_differences() {
    let mut r = rng(17);
    let mut block = Bottleneck::new(4, 2, 2, Some(2), &mut r);
    let mut x = randn5(&mut r, (2, 4, 4, 4, 4));
    let out = block.forward(&x, true);
    let upstream = randn5(&mut rng(999), out.dim());
    let dx = block.backward(&upstream);

    let h = 5e-3f32;
    for i in probes(x.len(), 60) {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + h;
        let up = dotsum(&block.forward(&x, true), &upstream);
        let _ = block.backward(&upstream);
        x.as_slice_mut().unwrap()[i] = orig - h;
        let down = dotsum(&block.forward(&x, true), &upstream);
        let _ = block.backward(&upstream);
        x.as_slice_mut().unwrap()[i] = orig;
        let fd = (up - down) / (2.0 * f64::from(h));
        assert_close(
            f64::from(dx.as_slice().unwrap()[i]),
            fd,
            8e-2,
            &format!("bottleneck input[{i}]"),
        );
    }
}

#[test]
fn maxpool_conserves_gradient_mass() {
    let mut pool = MaxPool3d::new(3, 2, 1);
    let mut r = rng(19);
    let x = randn5(&mut r, (1, 2, 5, 5, 5));
    let out = pool.forward(&x);
    let upstream = randn5(&mut rng(999), out.dim());
    let dx = pool.backward(&upstream);
    let sum_dy: f64 = upstream.iter().map(|v| f64::from(*v)).sum();
    let sum_dx: f64 = dx.iter().map(|v| f64::from(*v)).sum();
    assert!((sum_dy - sum_dx).abs() < 1e-3);
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut r = rng(21);
    let mut lin = Linear::new(6, 4, false, &mut r);
    let mut x = randn2(&mut r, (3, 6));
    let out = lin.forward(&x);
    let upstream = randn2(&mut rng(999), out.dim());
    let dx = lin.backward(&upstream);

    let loss = |lin: &mut Linear, x: &Array2<f32>| -> f64 {
        lin.forward(x)
            .iter()
            .zip(upstream.iter())
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    };
    let h = 5e-3f32;
    for i in 0..x.len() {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + h;
        let up = loss(&mut lin, &x);
        x.as_slice_mut().unwrap()[i] = orig - h;
        let down = loss(&mut lin, &x);
        x.as_slice_mut().unwrap()[i] = orig;
        let fd = (up - down) / (2.0 * f64::from(h));
        assert_close(
            f64::from(dx.as_slice().unwrap()[i]),
            fd,
            2e-2,
            &format!("linear input[{i}]"),
        );
    }
}

#[test]
fn tiny_encoder_end_to_end_gradient_check() {
    let spec = EncoderSpec {
        in_channels: 2,
        input_side: 16,
        width_scale: 0.0625, // base width 4
        stage_blocks: [1, 1, 1, 1],
        se_reduction: 2,
        se_enabled: true,
    };
    let mut enc = SeResNet3d::new(spec, 5);
    let mut r = rng(23);
    let mut x = randn5(&mut r, (2, 2, 16, 16, 16));
    let feats = enc.forward(&x, true);
    assert_eq!(feats.dim(), (2, spec.feature_dim()));
    let upstream = randn2(&mut rng(999), feats.dim());
    let dx = enc.backward(&upstream);
    assert_eq!(dx.dim(), x.dim());

    let loss = |enc: &mut SeResNet3d, x: &Array5<f32>| -> f64 {
        enc.forward(x, true)
            .iter()
            .zip(upstream.iter())
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    };
    let h = 1e-2f32;
    let probes = [(0usize, 0usize, 3usize, 5usize, 7usize), (1, 1, 8, 2, 12)];
    for (n, c, d, hh, w) in probes {
        let orig = x[[n, c, d, hh, w]];
        x[[n, c, d, hh, w]] = orig + h;
        let up = loss(&mut enc, &x);
        x[[n, c, d, hh, w]] = orig - h;
        let down = loss(&mut enc, &x);
        x[[n, c, d, hh, w]] = orig;
        let fd = (up - down) / (2.0 * f64::from(h));
        let an = f64::from(dx[[n, c, d, hh, w]]);
        let denom = an.abs().max(fd.abs()).max(0.1);
        assert!(
            (an - fd).abs() / denom < 0.15,
            "encoder input grad ({n},{c},{d},{hh},{w}): analytic {an} vs fd {fd}"
        );
    }
}
