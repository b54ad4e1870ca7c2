//! Minimal 3D neural-network layers with explicit forward/backward passes.
//!
//! Layers own their parameters, gradients and forward caches; the training
//! loop drives them serially (single-writer). All arithmetic is f32. No
//! external ML framework.

mod block;
mod conv3d;
mod encoder;
mod linear;
mod norm;
mod pool;
mod se;

pub use block::Bottleneck;
pub use conv3d::Conv3d;
pub use encoder::{EncoderSpec, SeResNet3d};
pub use linear::Linear;
pub use norm::BatchNorm3d;
pub use pool::{GlobalAvgPool, MaxPool3d};
pub use se::SeBlock;

/// Visits every trainable parameter tensor together with its gradient
/// accumulator. Names are stable across runs and identify tensors in
/// checkpoints.
pub trait ParamVisitor {
    fn visit(&mut self, name: &str, param: &mut [f32], grad: &mut [f32]);
}

/// Visits non-trainable state (batch-norm running statistics).
pub trait BufferVisitor {
    fn visit(&mut self, name: &str, buf: &mut [f32]);
}

impl<F: FnMut(&str, &mut [f32], &mut [f32])> ParamVisitor for F {
    fn visit(&mut self, name: &str, param: &mut [f32], grad: &mut [f32]) {
        self(name, param, grad)
    }
}

pub(crate) mod init {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// He-normal fan-in initialization for convolution kernels.
    pub fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, out: &mut [f32]) {
        let std = (2.0 / fan_in as f64).sqrt();
        for v in out {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            *v = (n * std) as f32;
        }
    }

    /// Uniform fan-in initialization for affine maps.
    pub fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, out: &mut [f32]) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in out {
            *v = rng.random_range(-bound..bound) as f32;
        }
    }
}

#[cfg(test)]
mod gradcheck;
