//! Affine map on 2D batches.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::{init, ParamVisitor};

pub struct Linear {
    /// `[out, in]`
    pub weight: Array2<f32>,
    pub bias: Vec<f32>,
    grad_weight: Array2<f32>,
    grad_bias: Vec<f32>,
    cached_input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, zero_bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut weight = Array2::zeros((out_dim, in_dim));
        init::uniform_fan_in(rng, in_dim, weight.as_slice_mut().unwrap());
        let mut bias = vec![0.0; out_dim];
        if !zero_bias {
            init::uniform_fan_in(rng, in_dim, &mut bias);
        }
        Linear {
            grad_weight: Array2::zeros(weight.raw_dim()),
            weight,
            grad_bias: vec![0.0; out_dim],
            bias,
            cached_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&mut self, x: &Array2<f32>) -> Array2<f32> {
        assert_eq!(
            x.shape()[1],
            self.in_dim(),
            "linear input dim {} != expected {}",
            x.shape()[1],
            self.in_dim()
        );
        let mut out = x.dot(&self.weight.t());
        for mut row in out.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += *b;
            }
        }
        self.cached_input = Some(x.clone());
        out
    }

    /// Forward without caching (inference / detached reads).
    pub fn forward_inference(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.dot(&self.weight.t());
        for mut row in out.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += *b;
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cached_input.as_ref().expect("forward before backward");
        self.grad_weight = &self.grad_weight + &dy.t().dot(x);
        for row in dy.rows() {
            for (g, v) in self.grad_bias.iter_mut().zip(row) {
                *g += *v;
            }
        }
        dy.dot(&self.weight)
    }

    /// Input gradient only; parameter gradients are left untouched. Used when
    /// the layer sits behind a gradient barrier probe (Grad-CAM).
    pub fn backward_data_only(&self, dy: &Array2<f32>) -> Array2<f32> {
        dy.dot(&self.weight)
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice_mut().unwrap(),
        );
        v.visit(
            &format!("{prefix}.bias"),
            &mut self.bias,
            &mut self.grad_bias,
        );
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}
