//! Batch normalization over 3D feature maps.

use ndarray::Array5;

use super::{BufferVisitor, ParamVisitor};

pub struct BatchNorm3d {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    grad_gamma: Vec<f32>,
    grad_beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
    cache: Option<Cache>,
}

struct Cache {
    xhat: Array5<f32>,
    inv_std: Vec<f32>,
    train: bool,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array5<f32>, train: bool) -> Array5<f32> {
        let (n, c, d, h, w) = x.dim();
        let m = (n * d * h * w) as f64;
        let plane = d * h * w;
        let xs = x.as_slice().unwrap();

        let mut xhat = Array5::<f32>::zeros(x.raw_dim());
        let xh = xhat.as_slice_mut().unwrap();
        let mut inv_std = vec![0f32; c];

        for ci in 0..c {
            let (mean, var) = if train {
                let mut sum = 0f64;
                let mut sq = 0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for v in &xs[base..base + plane] {
                        let vf = f64::from(*v);
                        sum += vf;
                        sq += vf * vf;
                    }
                }
                let mean = sum / m;
                let var = (sq / m - mean * mean).max(0.0);
                // unbiased variance for the running buffer
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean as f32;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased as f32;
                (mean as f32, var as f32)
            } else {
                (self.running_mean[ci], self.running_var[ci])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    xh[i] = (xs[i] - mean) * istd;
                }
            }
        }

        let mut out = xhat.clone();
        let os = out.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (g, b) = (self.gamma[ci], self.beta[ci]);
                for v in &mut os[base..base + plane] {
                    *v = *v * g + b;
                }
            }
        }

        self.cache = Some(Cache {
            xhat,
            inv_std,
            train,
        });
        out
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let cache = self.cache.as_ref().expect("forward before backward");
        let (n, c, d, h, w) = dy.dim();
        let plane = d * h * w;
        let m = (n * plane) as f64;
        let dys = dy.as_slice().unwrap();
        let xh = cache.xhat.as_slice().unwrap();

        let mut dx = Array5::<f32>::zeros(dy.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();

        for ci in 0..c {
            let mut sum_dy = 0f64;
            let mut sum_dy_xhat = 0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for i in base..base + plane {
                    sum_dy += f64::from(dys[i]);
                    sum_dy_xhat += f64::from(dys[i]) * f64::from(xh[i]);
                }
            }
            self.grad_gamma[ci] += sum_dy_xhat as f32;
            self.grad_beta[ci] += sum_dy as f32;

            let g_istd = self.gamma[ci] * cache.inv_std[ci];
            if cache.train {
                let mean_dy = (sum_dy / m) as f32;
                let mean_dy_xhat = (sum_dy_xhat / m) as f32;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in base..base + plane {
                        dx_at(dxs, i, g_istd * (dys[i] - mean_dy - xh[i] * mean_dy_xhat));
                    }
                }
            } else {
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in base..base + plane {
                        dx_at(dxs, i, g_istd * dys[i]);
                    }
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(
            &format!("{prefix}.gamma"),
            &mut self.gamma,
            &mut self.grad_gamma,
        );
        v.visit(
            &format!("{prefix}.beta"),
            &mut self.beta,
            &mut self.grad_beta,
        );
    }

    pub fn visit_buffers(&mut self, prefix: &str, v: &mut dyn BufferVisitor) {
        v.visit(&format!("{prefix}.running_mean"), &mut self.running_mean);
        v.visit(&format!("{prefix}.running_var"), &mut self.running_var);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[inline]
fn dx_at(dxs: &mut [f32], i: usize, v: f32) {
    dxs[i] = v;
}
