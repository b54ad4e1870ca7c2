//! SE-ResNet bottleneck: 1x1x1 -> 3x3x3 -> 1x1x1 convolutions with batch
//! norm, a squeeze-excitation gate on the residual branch, and a projection
//! shortcut when shape changes.

use ndarray::Array5;
use rand_chacha::ChaCha8Rng;

use super::{BatchNorm3d, BufferVisitor, Conv3d, ParamVisitor, SeBlock};

pub(super) fn relu_forward(x: &mut Array5<f32>) -> Vec<bool> {
    let xs = x.as_slice_mut().unwrap();
    let mut mask = vec![false; xs.len()];
    for (v, m) in xs.iter_mut().zip(mask.iter_mut()) {
        if *v > 0.0 {
            *m = true;
        } else {
            *v = 0.0;
        }
    }
    mask
}

pub(super) fn relu_backward(dy: &mut Array5<f32>, mask: &[bool]) {
    for (g, m) in dy.as_slice_mut().unwrap().iter_mut().zip(mask) {
        if !*m {
            *g = 0.0;
        }
    }
}

pub struct Bottleneck {
    conv1: Conv3d,
    bn1: BatchNorm3d,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    conv3: Conv3d,
    bn3: BatchNorm3d,
    se: Option<SeBlock>,
    downsample: Option<(Conv3d, BatchNorm3d)>,
    mask1: Option<Vec<bool>>,
    mask2: Option<Vec<bool>>,
    mask_out: Option<Vec<bool>>,
}

impl Bottleneck {
    pub fn new(
        in_ch: usize,
        width: usize,
        stride: usize,
        se_reduction: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out_ch = width * 4;
        let downsample = if stride != 1 || in_ch != out_ch {
            Some((
                Conv3d::new(in_ch, out_ch, 1, stride, 0, rng),
                BatchNorm3d::new(out_ch),
            ))
        } else {
            None
        };
        Bottleneck {
            conv1: Conv3d::new(in_ch, width, 1, 1, 0, rng),
            bn1: BatchNorm3d::new(width),
            conv2: Conv3d::new(width, width, 3, stride, 1, rng),
            bn2: BatchNorm3d::new(width),
            conv3: Conv3d::new(width, out_ch, 1, 1, 0, rng),
            bn3: BatchNorm3d::new(out_ch),
            se: se_reduction.map(|r| SeBlock::new(out_ch, r, rng)),
            downsample,
            mask1: None,
            mask2: None,
            mask_out: None,
        }
    }

    pub fn forward(&mut self, x: &Array5<f32>, train: bool) -> Array5<f32> {
        let mut main = self.bn1.forward(&self.conv1.forward(x), train);
        self.mask1 = Some(relu_forward(&mut main));
        let mut main = self.bn2.forward(&self.conv2.forward(&main), train);
        self.mask2 = Some(relu_forward(&mut main));
        let mut main = self.bn3.forward(&self.conv3.forward(&main), train);
        if let Some(se) = &mut self.se {
            main = se.forward(&main);
        }
        let shortcut = match &mut self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x), train),
            None => x.clone(),
        };
        let mut out = main + shortcut;
        self.mask_out = Some(relu_forward(&mut out));
        out
    }

    pub fn backward(&mut self, dy: &Array5<f32>) -> Array5<f32> {
        let mut dsum = dy.clone();
        relu_backward(&mut dsum, self.mask_out.as_ref().unwrap());

        let mut dmain = dsum.clone();
        if let Some(se) = &mut self.se {
            dmain = se.backward(&dmain);
        }
        let mut dmain = self.conv3.backward(&self.bn3.backward(&dmain));
        relu_backward(&mut dmain, self.mask2.as_ref().unwrap());
        let mut dmain = self.conv2.backward(&self.bn2.backward(&dmain));
        relu_backward(&mut dmain, self.mask1.as_ref().unwrap());
        let dx_main = self.conv1.backward(&self.bn1.backward(&dmain));

        let dx_short = match &mut self.downsample {
            Some((conv, bn)) => conv.backward(&bn.backward(&dsum)),
            None => dsum,
        };
        dx_main + dx_short
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), v);
        self.bn1.visit_params(&format!("{prefix}.bn1"), v);
        self.conv2.visit_params(&format!("{prefix}.conv2"), v);
        self.bn2.visit_params(&format!("{prefix}.bn2"), v);
        self.conv3.visit_params(&format!("{prefix}.conv3"), v);
        self.bn3.visit_params(&format!("{prefix}.bn3"), v);
        if let Some(se) = &mut self.se {
            se.visit_params(&format!("{prefix}.se"), v);
        }
        if let Some((conv, bn)) = &mut self.downsample {
            conv.visit_params(&format!("{prefix}.down.conv"), v);
            bn.visit_params(&format!("{prefix}.down.bn"), v);
        }
    }

    pub fn visit_buffers(&mut self, prefix: &str, v: &mut dyn BufferVisitor) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), v);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), v);
        self.bn3.visit_buffers(&format!("{prefix}.bn3"), v);
        if let Some((_, bn)) = &mut self.downsample {
            bn.visit_buffers(&format!("{prefix}.down.bn"), v);
        }
    }

    pub fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        self.conv3.clear_cache();
        self.bn3.clear_cache();
        if let Some(se) = &mut self.se {
            se.clear_cache();
        }
        if let Some((conv, bn)) = &mut self.downsample {
            conv.clear_cache();
            bn.clear_cache();
        }
        self.mask1 = None;
        self.mask2 = None;
        self.mask_out = None;
    }
}
