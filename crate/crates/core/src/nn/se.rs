//! Squeeze-and-excitation block: global pool -> bottleneck MLP -> sigmoid
//! channel gates.

use ndarray::{Array2, Array5};
use rand_chacha::ChaCha8Rng;

use super::{Linear, ParamVisitor};

pub struct SeBlock {
    fc1: Linear,
    fc2: Linear,
    cache: Option<Cache>,
}

struct Cache {
    input: Array5<f32>,
    hidden: Array2<f32>, // post-ReLU fc1 output
    scale: Array2<f32>,  // sigmoid gates [N, C]
}

impl SeBlock {
    pub fn new(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (channels / reduction).max(1);
        SeBlock {
            fc1: Linear::new(channels, hidden, false, rng),
            fc2: Linear::new(hidden, channels, false, rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array5<f32>) -> Array5<f32> {
        let (n, c, d, h, w) = x.dim();
        let plane = (d * h * w) as f64;
        let mut pooled = Array2::<f32>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let sum: f64 = x
                    .slice(ndarray::s![ni, ci, .., .., ..])
                    .iter()
                    .map(|v| f64::from(*v))
                    .sum();
                pooled[[ni, ci]] = (sum / plane) as f32;
            }
        }
        let mut hidden = self.fc1.forward(&pooled);
        hidden.mapv_inplace(|v| v.max(0.0));
        let mut scale = self.fc2.forward(&hidden);
        scale.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));

        let mut out = x.clone();
        for ni in 0..n {
            for ci in 0..c {
                let s = scale[[ni, ci]];
                out.slice_mut(ndarray::s![ni, ci, .., .., ..])
                    .mapv_inplace(|v| v * s);
            }
        }
        self.cache = Some(Cache {
            input: x.clone(),
            hidden,
            scale,
        });
        out
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let cache = self.cache.take().expect("forward before backward");
        let (n, c, d, h, w) = dy.dim();
        let plane = (d * h * w) as f32;

        // Gradient wrt the gates: sum over spatial of dy * x.
        let mut dscale = Array2::<f32>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = 0f64;
                for (g, v) in dy
                    .slice(ndarray::s![ni, ci, .., .., ..])
                    .iter()
                    .zip(cache.input.slice(ndarray::s![ni, ci, .., .., ..]).iter())
                {
                    acc += f64::from(*g) * f64::from(*v);
                }
                dscale[[ni, ci]] = acc as f32;
            }
        }

        // Through the sigmoid.
        let mut dlogits = dscale;
        for (g, s) in dlogits.iter_mut().zip(cache.scale.iter()) {
            *g *= s * (1.0 - s);
        }
        let mut dhidden = self.fc2.backward(&dlogits);
        for (g, hval) in dhidden.iter_mut().zip(cache.hidden.iter()) {
            if *hval <= 0.0 {
                *g = 0.0;
            }
        }
        let dpooled = self.fc1.backward(&dhidden);

        // dx = dy * s + broadcast(dpooled) / plane
        let mut dx = dy.clone();
        for ni in 0..n {
            for ci in 0..c {
                let s = cache.scale[[ni, ci]];
                let spread = dpooled[[ni, ci]] / plane;
                dx.slice_mut(ndarray::s![ni, ci, .., .., ..])
                    .mapv_inplace(|g| g * s + spread);
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.fc1.visit_params(&format!("{prefix}.fc1"), v);
        self.fc2.visit_params(&format!("{prefix}.fc2"), v);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.fc1.clear_cache();
        self.fc2.clear_cache();
    }
}
