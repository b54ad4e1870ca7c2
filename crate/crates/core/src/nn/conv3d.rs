//! 3D convolution via im2col + GEMM (no bias; always followed by a norm
//! layer here).

use ndarray::{Array2, Array5, ArrayView2, ArrayViewMut2};
use rand_chacha::ChaCha8Rng;

use super::{init, ParamVisitor};

pub struct Conv3d {
    /// `[out_ch, in_ch, k, k, k]`
    pub weight: Array5<f32>,
    grad_weight: Array5<f32>,
    pub stride: usize,
    pub pad: usize,
    cached_input: Option<Array5<f32>>,
}

impl Conv3d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut weight = Array5::zeros((out_ch, in_ch, kernel, kernel, kernel));
        let fan_in = in_ch * kernel * kernel * kernel;
        init::he_normal(rng, fan_in, weight.as_slice_mut().unwrap());
        Conv3d {
            grad_weight: Array5::zeros(weight.raw_dim()),
            weight,
            stride,
            pad,
            cached_input: None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_side(&self, in_side: usize) -> usize {
        (in_side + 2 * self.pad - self.kernel()) / self.stride + 1
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        let (oc, ic, k, _, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((oc, ic * k * k * k))
            .expect("weight is contiguous")
    }

    pub fn forward(&mut self, x: &Array5<f32>) -> Array5<f32> {
        let (n, ic, d, h, w) = x.dim();
        debug_assert_eq!(ic, self.weight.shape()[1]);
        let oc = self.weight.shape()[0];
        let k = self.kernel();
        let (od, oh, ow) = (self.out_side(d), self.out_side(h), self.out_side(w));
        let vox = od * oh * ow;
        let mut out = Array5::<f32>::zeros((n, oc, od, oh, ow));
        let wmat = self.weight_matrix().to_owned();

        let identity = k == 1 && self.stride == 1 && self.pad == 0;
        let mut cols = if identity {
            Array2::zeros((0, 0))
        } else {
            Array2::<f32>::zeros((ic * k * k * k, vox))
        };
        for ni in 0..n {
            let x_n = x.as_slice().unwrap();
            let x_n = &x_n[ni * ic * d * h * w..(ni + 1) * ic * d * h * w];
            let out_slice = out.as_slice_mut().unwrap();
            let out_n = &mut out_slice[ni * oc * vox..(ni + 1) * oc * vox];
            let mut out_mat =
                ArrayViewMut2::from_shape((oc, vox), out_n).expect("contiguous output");
            if identity {
                // 1x1x1 stride-1: columns are the input itself
                let x_mat = ArrayView2::from_shape((ic, vox), x_n).expect("contiguous input");
                out_mat.assign(&wmat.dot(&x_mat));
            } else {
                im2col(
                    x_n,
                    (ic, d, h, w),
                    k,
                    self.stride,
                    self.pad,
                    (od, oh, ow),
                    cols.as_slice_mut().unwrap(),
                );
                out_mat.assign(&wmat.dot(&cols));
            }
        }
        self.cached_input = Some(x.clone());
        out
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let x = self.cached_input.take().expect("forward before backward");
        let (n, ic, d, h, w) = x.dim();
        let oc = self.weight.shape()[0];
        let k = self.kernel();
        let (od, oh, ow) = (dy.shape()[2], dy.shape()[3], dy.shape()[4]);
        let vox = od * oh * ow;
        let mut dx = Array5::<f32>::zeros(x.raw_dim());
        let wmat = self.weight_matrix().to_owned();

        let identity = k == 1 && self.stride == 1 && self.pad == 0;
        let mut cols = if identity {
            Array2::zeros((0, 0))
        } else {
            Array2::<f32>::zeros((ic * k * k * k, vox))
        };
        let mut grad_mat = self
            .grad_weight
            .view_mut()
            .into_shape_with_order((oc, ic * k * k * k))
            .expect("grad weight contiguous")
            .to_owned();

        for ni in 0..n {
            let x_all = x.as_slice().unwrap();
            let x_n = &x_all[ni * ic * d * h * w..(ni + 1) * ic * d * h * w];
            let dy_all = dy.as_slice().unwrap();
            let dy_n = &dy_all[ni * oc * vox..(ni + 1) * oc * vox];
            let dy_mat = ArrayView2::from_shape((oc, vox), dy_n).expect("contiguous grad");

            if identity {
                let x_mat = ArrayView2::from_shape((ic, vox), x_n).unwrap();
                grad_mat = grad_mat + dy_mat.dot(&x_mat.t());
                let dcols = wmat.t().dot(&dy_mat);
                let dx_all = dx.as_slice_mut().unwrap();
                let dx_n = &mut dx_all[ni * ic * d * h * w..(ni + 1) * ic * d * h * w];
                dx_n.copy_from_slice(dcols.as_slice().unwrap());
            } else {
                im2col(
                    x_n,
                    (ic, d, h, w),
                    k,
                    self.stride,
                    self.pad,
                    (od, oh, ow),
                    cols.as_slice_mut().unwrap(),
                );
                grad_mat = grad_mat + dy_mat.dot(&cols.t());
                let dcols = wmat.t().dot(&dy_mat);
                let dx_all = dx.as_slice_mut().unwrap();
                let dx_n = &mut dx_all[ni * ic * d * h * w..(ni + 1) * ic * d * h * w];
                col2im_add(
                    dcols.as_slice().unwrap(),
                    (ic, d, h, w),
                    k,
                    self.stride,
                    self.pad,
                    (od, oh, ow),
                    dx_n,
                );
            }
        }
        self.grad_weight
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(grad_mat.as_slice().unwrap());
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice_mut().unwrap(),
        );
    }

    pub fn clear_cache(&mut self) {
        self.cached_input = None;
    }
}

/// Output index range such that `o * stride + kk - pad` stays within
/// `[0, in_size)`.
#[inline]
fn valid_range(
    out_size: usize,
    in_size: usize,
    stride: usize,
    kk: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if pad > kk {
        (pad - kk).div_ceil(stride)
    } else {
        0
    };
    // exclusive bound for o*stride
    let max_in = (in_size + pad).saturating_sub(kk);
    let hi = max_in.div_ceil(stride).min(out_size);
    (lo.min(hi), hi)
}

/// Unfold one sample into `[ic*k^3, od*oh*ow]` columns (zero padding).
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    (ic, d, h, w): (usize, usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    (od, oh, ow): (usize, usize, usize),
    cols: &mut [f32],
) {
    let vox = od * oh * ow;
    cols.fill(0.0);
    let mut row = 0usize;
    for ici in 0..ic {
        let in_base = ici * d * h * w;
        for kd in 0..k {
            let (od0, od1) = valid_range(od, d, s, kd, p);
            for kh in 0..k {
                let (oh0, oh1) = valid_range(oh, h, s, kh, p);
                for kw in 0..k {
                    let (ow0, ow1) = valid_range(ow, w, s, kw, p);
                    let out_base = row * vox;
                    for odi in od0..od1 {
                        let id = odi * s + kd - p;
                        for ohi in oh0..oh1 {
                            let ih = ohi * s + kh - p;
                            let crow = out_base + (odi * oh + ohi) * ow;
                            let irow = in_base + (id * h + ih) * w;
                            if s == 1 {
                                let iw0 = ow0 + kw - p;
                                cols[crow + ow0..crow + ow1]
                                    .copy_from_slice(&x[irow + iw0..irow + iw0 + (ow1 - ow0)]);
                            } else {
                                for owi in ow0..ow1 {
                                    cols[crow + owi] = x[irow + owi * s + kw - p];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Fold columns back, accumulating into the sample gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f32],
    (ic, d, h, w): (usize, usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    (od, oh, ow): (usize, usize, usize),
    dx: &mut [f32],
) {
    let vox = od * oh * ow;
    let mut row = 0usize;
    for ici in 0..ic {
        let in_base = ici * d * h * w;
        for kd in 0..k {
            let (od0, od1) = valid_range(od, d, s, kd, p);
            for kh in 0..k {
                let (oh0, oh1) = valid_range(oh, h, s, kh, p);
                for kw in 0..k {
                    let (ow0, ow1) = valid_range(ow, w, s, kw, p);
                    let col_base = row * vox;
                    for odi in od0..od1 {
                        let id = odi * s + kd - p;
                        for ohi in oh0..oh1 {
                            let ih = ohi * s + kh - p;
                            let crow = col_base + (odi * oh + ohi) * ow;
                            let irow = in_base + (id * h + ih) * w;
                            if s == 1 {
                                let iw0 = ow0 + kw - p;
                                let dst = &mut dx[irow + iw0..irow + iw0 + (ow1 - ow0)];
                                let src = &cols[crow + ow0..crow + ow1];
                                for (dv, sv) in dst.iter_mut().zip(src) {
                                    *dv += *sv;
                                }
                            } else {
                                for owi in ow0..ow1 {
                                    dx[irow + owi * s + kw - p] += cols[crow + owi];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
