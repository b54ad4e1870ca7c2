//! The 3D squeeze-excitation residual encoder: 7x7x7 stem, four bottleneck
//! stages of [3, 4, 6, 3] blocks, global average pooling.

use ndarray::{Array2, Array5};
use serde::{Deserialize, Serialize};

use super::block::{relu_backward, relu_forward};
use super::{
    BatchNorm3d, Bottleneck, BufferVisitor, Conv3d, GlobalAvgPool, MaxPool3d, ParamVisitor,
};
use crate::seeding;

/// Architecture description. `width_scale` shrinks every stage width for
/// desk-scale runs; the published configuration is scale 1.0 with 128-voxel
/// input (2048 features).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub input_side: usize,
    /// Multiplier on the stem width of 64 (stage widths follow).
    pub width_scale: f64,
    /// Bottleneck blocks per stage.
    pub stage_blocks: [usize; 4],
    /// Squeeze-excitation reduction ratio.
    pub se_reduction: usize,
    /// Disable to fall back to the plain residual ablation.
    pub se_enabled: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            in_channels: 3,
            input_side: 128,
            width_scale: 1.0,
            stage_blocks: [3, 4, 6, 3],
            se_reduction: 16,
            se_enabled: true,
        }
    }
}

impl EncoderSpec {
    pub fn base_width(&self) -> usize {
        ((64.0 * self.width_scale).round() as usize).max(4)
    }

    /// Length of the pooled feature vector (4x the last stage width).
    pub fn feature_dim(&self) -> usize {
        self.base_width() * 8 * 4
    }
}

pub struct SeResNet3d {
    pub spec: EncoderSpec,
    stem_conv: Conv3d,
    stem_bn: BatchNorm3d,
    stem_pool: MaxPool3d,
    stages: Vec<Vec<Bottleneck>>,
    gap: GlobalAvgPool,
    stem_mask: Option<Vec<bool>>,
    /// Output of each stage from the latest forward (for Grad-CAM).
    stage_outputs: Vec<Array5<f32>>,
    /// Total forward passes (training efficiency contract: one per step).
    pub forward_count: u64,
}

impl SeResNet3d {
    pub fn new(spec: EncoderSpec, seed: u64) -> Self {
        let mut rng = seeding::rng_at(seed, seeding::tag("encoder-init"));
        let base = spec.base_width();
        let stem_conv = Conv3d::new(spec.in_channels, base, 7, 2, 3, &mut rng);
        let stem_bn = BatchNorm3d::new(base);
        let stem_pool = MaxPool3d::new(3, 2, 1);

        let se = spec.se_enabled.then_some(spec.se_reduction);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = base;
        for (stage_idx, blocks) in spec.stage_blocks.iter().enumerate() {
            let width = base << stage_idx;
            let stride = if stage_idx == 0 { 1 } else { 2 };
            let mut stage = Vec::with_capacity(*blocks);
            for b in 0..*blocks {
                let s = if b == 0 { stride } else { 1 };
                stage.push(Bottleneck::new(in_ch, width, s, se, &mut rng));
                in_ch = width * 4;
            }
            stages.push(stage);
        }

        SeResNet3d {
            spec,
            stem_conv,
            stem_bn,
            stem_pool,
            stages,
            gap: GlobalAvgPool::new(),
            stem_mask: None,
            stage_outputs: Vec::new(),
            forward_count: 0,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Pooled features `[N, feature_dim]`.
    pub fn forward(&mut self, x: &Array5<f32>, train: bool) -> Array2<f32> {
        assert_eq!(
            x.shape()[1],
            self.spec.in_channels,
            "encoder expects {} input channels",
            self.spec.in_channels
        );
        self.forward_count += 1;
        let mut cur = self.stem_bn.forward(&self.stem_conv.forward(x), train);
        self.stem_mask = Some(relu_forward(&mut cur));
        let mut cur = self.stem_pool.forward(&cur);
        self.stage_outputs.clear();
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                cur = block.forward(&cur, train);
            }
            self.stage_outputs.push(cur.clone());
        }
        self.gap.forward(&cur)
    }

    /// Output of stage `idx` from the latest forward pass.
    pub fn stage_output(&self, idx: usize) -> &Array5<f32> {
        &self.stage_outputs[idx]
    }

    /// Full backward pass; returns the input gradient.
    pub fn backward(&mut self, dfeatures: &Array2<f32>) -> Array5<f32> {
        self.backward_until(dfeatures, None)
            .expect("full backward returns the input gradient")
    }

    /// Backward from pooled features down to (and excluding) stage
    /// `stop_at_stage`: returns the gradient at that stage's output. With
    /// `None`, propagates through the stem and returns the input gradient.
    pub fn backward_until(
        &mut self,
        dfeatures: &Array2<f32>,
        stop_at_stage: Option<usize>,
    ) -> Option<Array5<f32>> {
        let mut grad = self.gap.backward(dfeatures);
        for (idx, stage) in self.stages.iter_mut().enumerate().rev() {
            if stop_at_stage == Some(idx) {
                return Some(grad);
            }
            for block in stage.iter_mut().rev() {
                grad = block.backward(&grad);
            }
        }
        let mut grad = self.stem_pool.backward(&grad);
        relu_backward(&mut grad, self.stem_mask.as_ref().unwrap());
        Some(self.stem_conv.backward(&self.stem_bn.backward(&grad)))
    }

    pub fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        self.stem_conv.visit_params("encoder.stem.conv", v);
        self.stem_bn.visit_params("encoder.stem.bn", v);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_params(&format!("encoder.stage{i}.block{b}"), v);
            }
        }
    }

    pub fn visit_buffers(&mut self, v: &mut dyn BufferVisitor) {
        self.stem_bn.visit_buffers("encoder.stem.bn", v);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_buffers(&format!("encoder.stage{i}.block{b}"), v);
            }
        }
    }

    pub fn clear_caches(&mut self) {
        self.stem_conv.clear_cache();
        self.stem_bn.clear_cache();
        self.stem_pool.clear_cache();
        for stage in &mut self.stages {
            for block in stage.iter_mut() {
                block.clear_cache();
            }
        }
        self.stem_mask = None;
        self.stage_outputs.clear();
    }
}
