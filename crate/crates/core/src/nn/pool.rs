//! Max pooling and global average pooling over 3D feature maps.

use ndarray::{Array2, Array5};

pub struct MaxPool3d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Flat input index of the winner per output voxel.
    cache: Option<(Vec<usize>, [usize; 5])>,
}

impl MaxPool3d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool3d {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_side(&self, in_side: usize) -> usize {
        (in_side + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&mut self, x: &Array5<f32>) -> Array5<f32> {
        let (n, c, d, h, w) = x.dim();
        let (od, oh, ow) = (self.out_side(d), self.out_side(h), self.out_side(w));
        let mut out = Array5::<f32>::zeros((n, c, od, oh, ow));
        let mut argmax = vec![0usize; n * c * od * oh * ow];
        let xs = x.as_slice().unwrap();
        let os = out.as_slice_mut().unwrap();
        let (k, s, p) = (self.kernel, self.stride, self.pad);

        let mut oi = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * d * h * w;
                for odi in 0..od {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for kd in 0..k {
                                let id = (odi * s + kd).wrapping_sub(p);
                                if id >= d {
                                    continue;
                                }
                                for kh in 0..k {
                                    let ih = (ohi * s + kh).wrapping_sub(p);
                                    if ih >= h {
                                        continue;
                                    }
                                    for kw in 0..k {
                                        let iw = (owi * s + kw).wrapping_sub(p);
                                        if iw >= w {
                                            continue;
                                        }
                                        let idx = base + (id * h + ih) * w + iw;
                                        if xs[idx] > best {
                                            best = xs[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            os[oi] = best;
                            argmax[oi] = best_idx;
                            oi += 1;
                        }
                    }
                }
            }
        }
        self.cache = Some((argmax, [n, c, d, h, w]));
        out
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let (argmax, in_shape) = self.cache.as_ref().expect("forward before backward");
        let mut dx = Array5::<f32>::zeros((
            in_shape[0],
            in_shape[1],
            in_shape[2],
            in_shape[3],
            in_shape[4],
        ));
        let dxs = dx.as_slice_mut().unwrap();
        for (g, idx) in dy.as_slice().unwrap().iter().zip(argmax) {
            dxs[*idx] += *g;
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Global average pool `[N, C, D, H, W] -> [N, C]`.
pub struct GlobalAvgPool {
    cache: Option<[usize; 5]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache: None }
    }

    pub fn forward(&mut self, x: &Array5<f32>) -> Array2<f32> {
        let (n, c, d, h, w) = x.dim();
        let plane = d * h * w;
        let xs = x.as_slice().unwrap();
        let mut out = Array2::<f32>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let sum: f64 = xs[base..base + plane].iter().map(|v| f64::from(*v)).sum();
                out[[ni, ci]] = (sum / plane as f64) as f32;
            }
        }
        self.cache = Some([n, c, d, h, w]);
        out
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array5<f32> {
        let [n, c, d, h, w] = *self.cache.as_ref().expect("forward before backward");
        let plane = (d * h * w) as f32;
        let mut dx = Array5::<f32>::zeros((n, c, d, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = dy[[ni, ci]] / plane;
                dx.slice_mut(ndarray::s![ni, ci, .., .., ..]).fill(g);
            }
        }
        dx
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}
