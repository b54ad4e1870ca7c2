//! Volumetric Grad-CAM over the encoder's residual stages, plus slice
//! overlay rendering.

use ndarray::{Array2, Array3, Array4, Axis};
use std::path::{Path, PathBuf};

use crate::dataset::GenantGrade;
use crate::error::{Error, Result};
use crate::interp::{self, Interpolation};
use crate::network::GradingNetwork;
use crate::preprocess::VertebraPatch;

/// Normalized attention over the spatial extent of a patch.
#[derive(Debug, Clone)]
pub struct AttentionVolume {
    /// Values in [0, 1], shape equal to the input patch's spatial shape.
    pub values: Array3<f32>,
    pub target_class: GenantGrade,
}

/// Anything that can expose (feature maps, d(target logit)/d(feature maps))
/// for a patch. Implemented by the grading network and by the linearity
/// probes used to verify the attribution plumbing.
pub trait CamSource {
    /// Returns `(features, gradients)`, both `[C, D, H, W]` at the target
    /// layer's resolution.
    fn cam_pair(
        &mut self,
        patch: &VertebraPatch,
        target: GenantGrade,
    ) -> Result<(Array4<f32>, Array4<f32>)>;
}

/// Grad-CAM against the output of a configurable residual stage.
pub struct StageCam<'a> {
    pub network: &'a mut GradingNetwork,
    /// Stage index; the last stage unless overridden.
    pub stage: Option<usize>,
}

impl CamSource for StageCam<'_> {
    fn cam_pair(
        &mut self,
        patch: &VertebraPatch,
        target: GenantGrade,
    ) -> Result<(Array4<f32>, Array4<f32>)> {
        let net = &mut *self.network;
        let stage = self.stage.unwrap_or(net.encoder.num_stages() - 1);
        if stage >= net.encoder.num_stages() {
            return Err(Error::config(format!(
                "stage {stage} out of range (encoder has {})",
                net.encoder.num_stages()
            )));
        }
        let shape = patch.spatial_shape();
        let mut views = ndarray::Array5::zeros((1, 3, shape[0], shape[1], shape[2]));
        views.index_axis_mut(Axis(0), 0).assign(&patch.channels);

        let features2 = net.encode(&views, false)?;
        let logits = net.classify_inference(&features2);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "non-finite logits; model looks untrained or corrupt".to_string(),
            ));
        }
        // d(target logit)/d(pooled features) is the head's weight row.
        let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
        dlogits[[0, target.index()]] = 1.0;
        let dfeatures = net.head_input_gradient(&dlogits);
        let grads = net
            .encoder
            .backward_until(&dfeatures, Some(stage))
            .expect("stage within range");
        let features = net.encoder.stage_output(stage).clone();
        // attribution must not leave gradients behind
        net.zero_grads();

        let f = features.index_axis(Axis(0), 0).to_owned();
        let g = grads.index_axis(Axis(0), 0).to_owned();
        Ok((f, g))
    }
}

/// Trilinear upsampling of an attention map to a target spatial shape.
pub fn upsample_trilinear(map: &Array3<f32>, shape: [usize; 3]) -> Array3<f32> {
    interp::resize(map, shape, Interpolation::Trilinear)
}

/// Min-max normalize a non-negative map into [0, 1]; an identically-zero map
/// stays zero, a constant positive map becomes all ones.
pub fn normalize_attention(map: &Array3<f32>) -> Array3<f32> {
    let mx = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mn = map.iter().copied().fold(f32::INFINITY, f32::min);
    if mx <= 0.0 {
        return Array3::zeros(map.raw_dim());
    }
    if mx == mn {
        return Array3::ones(map.raw_dim());
    }
    map.mapv(|v| (v - mn) / (mx - mn))
}

/// Compute the attention volume for one patch: channel weights are the
/// spatial means of the logit gradient, the map is the rectified weighted
/// sum of feature maps, trilinearly upsampled and min-max normalized.
pub fn grad_cam(
    source: &mut dyn CamSource,
    patch: &VertebraPatch,
    target: GenantGrade,
) -> Result<AttentionVolume> {
    let (features, grads) = source.cam_pair(patch, target)?;
    let channels = features.shape()[0];
    let spatial = features.len() / channels.max(1);

    let mut map = Array3::<f32>::zeros((
        features.shape()[1],
        features.shape()[2],
        features.shape()[3],
    ));
    for c in 0..channels {
        let g = grads.index_axis(Axis(0), c);
        let weight: f64 = g.iter().map(|v| f64::from(*v)).sum::<f64>() / spatial as f64;
        let f = features.index_axis(Axis(0), c);
        for (m, fv) in map.iter_mut().zip(f.iter()) {
            *m += (weight * f64::from(*fv)) as f32;
        }
    }
    map.mapv_inplace(|v| v.max(0.0));

    let out_shape = patch.spatial_shape();
    let upsampled = interp::resize(&map, out_shape, Interpolation::Trilinear);
    Ok(AttentionVolume {
        values: normalize_attention(&upsampled),
        target_class: target,
    })
}

/// Fixed overlay rendering parameters, for byte-reproducible outputs.
#[derive(Debug, Clone, Copy)]
pub struct OverlayStyle {
    /// Blend strength of the heat map at full attention.
    pub alpha: f32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        OverlayStyle { alpha: 0.6 }
    }
}

fn heat_color(a: f32) -> [f32; 3] {
    // black -> blue -> red -> yellow ramp
    let a = a.clamp(0.0, 1.0);
    if a < 1.0 / 3.0 {
        let t = 3.0 * a;
        [0.0, 0.0, t]
    } else if a < 2.0 / 3.0 {
        let t = 3.0 * a - 1.0;
        [t, 0.0, 1.0 - t]
    } else {
        let t = 3.0 * a - 2.0;
        [1.0, t, 0.0]
    }
}

/// Write grayscale CT slices (bone-window channel) with the attention heat
/// map blended on top. Returns the written file paths; the default slice is
/// the mid-slice `floor(extent / 2)` along the chosen axis.
pub fn export_overlay(
    patch: &VertebraPatch,
    attention: &AttentionVolume,
    slice_axis: usize,
    slices: Option<&[usize]>,
    style: OverlayStyle,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if slice_axis > 2 {
        return Err(Error::config(format!(
            "slice axis {slice_axis} out of range"
        )));
    }
    let shape = patch.spatial_shape();
    if attention.values.shape() != shape {
        return Err(Error::data(format!(
            "attention shape {:?} does not match patch {:?}",
            attention.values.shape(),
            shape
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let default_slices = [shape[slice_axis] / 2];
    let slice_list: &[usize] = slices.unwrap_or(&default_slices);

    let gray = patch.channels.index_axis(Axis(0), 0);
    let mut written = Vec::new();
    for slice_idx in slice_list {
        if *slice_idx >= shape[slice_axis] {
            return Err(Error::config(format!(
                "slice {slice_idx} out of range for axis {slice_axis} (extent {})",
                shape[slice_axis]
            )));
        }
        let g2 = gray.index_axis(Axis(slice_axis), *slice_idx);
        let a2 = attention.values.index_axis(Axis(slice_axis), *slice_idx);
        let (w, h) = (g2.shape()[0], g2.shape()[1]);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (x, y, pixel) in img.enumerate_pixels_mut() {
            let gval = g2[[x as usize, y as usize]].clamp(0.0, 1.0);
            let a = a2[[x as usize, y as usize]].clamp(0.0, 1.0);
            let heat = heat_color(a);
            let blend = style.alpha * a;
            let rgb = [
                (1.0 - blend) * gval + blend * heat[0],
                (1.0 - blend) * gval + blend * heat[1],
                (1.0 - blend) * gval + blend * heat[2],
            ];
            *pixel = image::Rgb(rgb.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        let name = format!(
            "overlay_{}_axis{slice_axis}_slice{slice_idx:03}.png",
            attention.target_class
        );
        let path = out_dir.join(name);
        img.save(&path)
            .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}

/// Linearity probes for verifying the attribution plumbing without a trained
/// model.
pub mod probes {
    use super::*;

    /// A model whose target logit is constant in the input: all gradients
    /// vanish, so the attention map must be identically zero.
    pub struct ConstantLogitProbe {
        pub features: Array4<f32>,
    }

    impl CamSource for ConstantLogitProbe {
        fn cam_pair(
            &mut self,
            _patch: &VertebraPatch,
            _target: GenantGrade,
        ) -> Result<(Array4<f32>, Array4<f32>)> {
            Ok((
                self.features.clone(),
                Array4::zeros(self.features.raw_dim()),
            ))
        }
    }

    /// A model whose target logit is the spatial mean of one designated
    /// feature channel: the attention map must equal that channel after
    /// upsampling and normalization.
    pub struct ChannelMeanProbe {
        pub features: Array4<f32>,
        pub designated_channel: usize,
    }

    impl CamSource for ChannelMeanProbe {
        fn cam_pair(
            &mut self,
            _patch: &VertebraPatch,
            _target: GenantGrade,
        ) -> Result<(Array4<f32>, Array4<f32>)> {
            let mut grads = Array4::zeros(self.features.raw_dim());
            let spatial = self.features.len() / self.features.shape()[0];
            grads
                .index_axis_mut(Axis(0), self.designated_channel)
                .fill(1.0 / spatial as f32);
            Ok((self.features.clone(), grads))
        }
    }
}
