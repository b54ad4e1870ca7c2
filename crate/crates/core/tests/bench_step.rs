//! Manual throughput probe for the desk-scale training step.
//! Run with: cargo test -p vfgrade --test bench_step -- --ignored --nocapture

use ndarray::Array5;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use vfgrade::dataset::GenantGrade;
use vfgrade::network::GradingNetwork;
use vfgrade::nn::EncoderSpec;
use vfgrade::objective::{training_step, LossConfig, OptimizerConfig, SgdState};

fn run_steps(width_scale: f64, views_n: usize, steps: usize) -> f64 {
    let spec = EncoderSpec {
        input_side: 32,
        width_scale,
        ..EncoderSpec::default()
    };
    let mut model = GradingNetwork::new(spec, 1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let mut views = Array5::<f32>::zeros((views_n, 3, 32, 32, 32));
    for v in views.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let labels: Vec<GenantGrade> = (0..views_n)
        .map(|i| GenantGrade::from_index(((i / 2) % 4) as u8).unwrap())
        .collect();
    let ids: Vec<u64> = (0..views_n as u64).map(|i| i / 2).collect();
    let loss_cfg = LossConfig::default();
    let opt_cfg = OptimizerConfig::default();
    let mut sgd = SgdState::new();

    let start = std::time::Instant::now();
    for _ in 0..steps {
        training_step(
            &mut model, &views, &labels, &ids, &loss_cfg, &opt_cfg, 1e-3, &mut sgd,
        )
        .unwrap();
    }
    start.elapsed().as_secs_f64() / steps as f64
}

#[test]
#[ignore]
fn step_timing() {
    for scale in [0.125, 0.25] {
        let per_step = run_steps(scale, 48, 3);
        println!("width_scale {scale}: {per_step:.2} s/step (48 views @ 32^3)");
    }
}
