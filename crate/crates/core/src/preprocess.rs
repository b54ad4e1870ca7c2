//! Conversion of a (volume, mask, label) triple into the 3-channel isotropic
//! patch the grading network consumes: two CT windows plus a label-modulated
//! mask channel.

use ndarray::{Array4, Axis};

use crate::dataset::{GenantGrade, ValueKind, VolumeGrid, MAX_VERTEBRA_LABEL};
use crate::error::{Error, Result};
use crate::interp::{self};

pub use crate::interp::Interpolation;

/// A CT display window: linear remap of `[level - width/2, level + width/2]`
/// to `[0, 1]` with clipping.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    pub level: f64,
    pub width: f64,
}

impl WindowSpec {
    pub fn new(level: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::config(format!(
                "window width must be positive, got {width}"
            )));
        }
        Ok(WindowSpec { level, width })
    }
}

/// The two windows feeding channels 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowPair {
    pub bone: WindowSpec,
    pub soft: WindowSpec,
}

impl WindowPair {
    /// Window levels/widths exactly as published (level 1500/width 400 bone,
    /// level 200/width 40 soft tissue).
    pub fn as_published() -> Self {
        WindowPair {
            bone: WindowSpec {
                level: 1500.0,
                width: 400.0,
            },
            soft: WindowSpec {
                level: 200.0,
                width: 40.0,
            },
        }
    }

    /// The radiological convention with level and width transposed
    /// (level 400/width 1500 bone, level 40/width 400 soft tissue).
    pub fn conventional() -> Self {
        WindowPair {
            bone: WindowSpec {
                level: 400.0,
                width: 1500.0,
            },
            soft: WindowSpec {
                level: 40.0,
                width: 400.0,
            },
        }
    }
}

/// Identity of a patch within its dataset.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PatchSource {
    pub case_id: String,
    pub vertebra_label: u8,
}

/// A 3-channel canonical patch: bone window, soft-tissue window, modulated
/// mask, all in `[0, 1]`, sharing one isotropic spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct VertebraPatch {
    /// `[3, d0, d1, d2]`, channel order (bone, soft, modulated mask).
    pub channels: Array4<f32>,
    /// Isotropic voxel spacing in mm.
    pub spacing: f64,
    pub source: PatchSource,
    /// Absent at inference time.
    pub grade: Option<GenantGrade>,
}

/// Channel index of the modulated mask within a patch.
pub const MASK_CHANNEL: usize = 2;

impl VertebraPatch {
    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.channels.shape();
        [s[1], s[2], s[3]]
    }
}

/// Apply a CT window, mapping HU linearly into `[0, 1]` with clipping.
pub fn apply_window(volume: &VolumeGrid, window: WindowSpec) -> Result<VolumeGrid> {
    if volume.kind != ValueKind::Hu {
        return Err(Error::data(
            "apply_window expects a volume in Hounsfield units".to_string(),
        ));
    }
    let lo = window.level - window.width / 2.0;
    let data = volume
        .data
        .mapv(|v| (((f64::from(v) - lo) / window.width).clamp(0.0, 1.0)) as f32);
    Ok(VolumeGrid {
        data,
        spacing: volume.spacing,
        kind: ValueKind::Normalized,
    })
}

/// Tight bounding box of `mask == label`, expanded per side by
/// `margin_fraction` of that axis' extent (at least 4 voxels when the margin
/// is nonzero), clipped to the volume bounds.
///
/// Returns the cropped volume and the binarized `{0, 1}` sub-mask.
pub fn extract_patch(
    volume: &VolumeGrid,
    mask: &VolumeGrid,
    vertebra_label: u8,
    margin_fraction: f64,
) -> Result<(VolumeGrid, VolumeGrid)> {
    if volume.shape() != mask.shape() {
        return Err(Error::data(format!(
            "volume shape {:?} does not match mask shape {:?}",
            volume.shape(),
            mask.shape()
        )));
    }
    let target = f32::from(vertebra_label);
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut found = false;
    for ((x, y, z), v) in mask.data.indexed_iter() {
        if *v == target {
            found = true;
            let idx = [x, y, z];
            for a in 0..3 {
                lo[a] = lo[a].min(idx[a]);
                hi[a] = hi[a].max(idx[a]);
            }
        }
    }
    if !found {
        return Err(Error::data(format!(
            "empty vertebra: label {vertebra_label} absent from mask"
        )));
    }

    let shape = volume.shape();
    let mut start = [0usize; 3];
    let mut end = [0usize; 3];
    for a in 0..3 {
        let extent = hi[a] - lo[a] + 1;
        let expand = if margin_fraction > 0.0 {
            ((extent as f64 * margin_fraction).ceil() as usize).max(4)
        } else {
            0
        };
        start[a] = lo[a].saturating_sub(expand);
        end[a] = (hi[a] + expand).min(shape[a] - 1);
    }

    let region = ndarray::s![start[0]..=end[0], start[1]..=end[1], start[2]..=end[2]];
    let sub_volume = volume.data.slice(region).to_owned();
    let sub_mask = mask
        .data
        .slice(region)
        .mapv(|v| if v == target { 1.0 } else { 0.0 });

    Ok((
        VolumeGrid {
            data: sub_volume,
            spacing: volume.spacing,
            kind: volume.kind,
        },
        VolumeGrid {
            data: sub_mask,
            spacing: mask.spacing,
            kind: ValueKind::Labels,
        },
    ))
}

/// Scale a binary mask by the normalized anatomical label, `label / 24`.
pub fn modulate_mask(binary_mask: &VolumeGrid, vertebra_label: u8) -> Result<VolumeGrid> {
    if !(1..=MAX_VERTEBRA_LABEL).contains(&vertebra_label) {
        return Err(Error::data(format!(
            "vertebra label {vertebra_label} outside 1..={MAX_VERTEBRA_LABEL}"
        )));
    }
    if binary_mask.data.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::data(
            "modulate_mask expects a binary {0,1} mask".to_string(),
        ));
    }
    let factor = f32::from(vertebra_label) / f32::from(MAX_VERTEBRA_LABEL);
    Ok(VolumeGrid {
        data: binary_mask.data.mapv(|v| v * factor),
        spacing: binary_mask.spacing,
        kind: ValueKind::Normalized,
    })
}

/// Resample to an isotropic grid with the requested spacing. Dimensions scale
/// by `spacing / target` (rounded, at least 1). Trilinear for intensities,
/// nearest for masks.
pub fn resample_isotropic(
    field: &VolumeGrid,
    target_spacing: f64,
    interpolation: Interpolation,
) -> Result<VolumeGrid> {
    if !(target_spacing > 0.0) {
        return Err(Error::config(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    let shape = field.shape();
    let mut new_dims = [0usize; 3];
    for a in 0..3 {
        new_dims[a] =
            ((shape[a] as f64 * field.spacing[a] / target_spacing).round() as usize).max(1);
    }
    if new_dims == shape && field.spacing.iter().all(|s| *s == target_spacing) {
        return Ok(field.clone());
    }
    let data = interp::resize(&field.data, new_dims, interpolation);
    Ok(VolumeGrid {
        data,
        spacing: [target_spacing; 3],
        kind: field.kind,
    })
}

/// Stack (bone, soft, modulated mask) into a `VertebraPatch`, enforcing the
/// shape, spacing, finiteness and `[0, 1]` range invariants.
pub fn assemble_patch(
    bone: &VolumeGrid,
    soft: &VolumeGrid,
    modmask: &VolumeGrid,
    source: PatchSource,
    grade: Option<GenantGrade>,
) -> Result<VertebraPatch> {
    let shape = bone.shape();
    for (name, field) in [("soft", soft), ("mask", modmask)] {
        if field.shape() != shape {
            return Err(Error::data(format!(
                "channel shape mismatch: bone {:?} vs {name} {:?}",
                shape,
                field.shape()
            )));
        }
    }
    if bone.spacing != soft.spacing || bone.spacing != modmask.spacing {
        return Err(Error::data("channel spacing mismatch".to_string()));
    }
    if bone.spacing[0] != bone.spacing[1] || bone.spacing[0] != bone.spacing[2] {
        return Err(Error::data(format!(
            "assemble_patch expects isotropic channels, got spacing {:?}",
            bone.spacing
        )));
    }
    let mut channels = Array4::zeros((3, shape[0], shape[1], shape[2]));
    for (i, field) in [bone, soft, modmask].into_iter().enumerate() {
        for v in field.data.iter() {
            if !v.is_finite() {
                return Err(Error::numerical(format!(
                    "channel {i} contains a non-finite value"
                )));
            }
            if !(0.0..=1.0).contains(v) {
                return Err(Error::data(format!("channel {i} value {v} outside [0, 1]")));
            }
        }
        channels.index_axis_mut(Axis(0), i).assign(&field.data);
    }
    Ok(VertebraPatch {
        channels,
        spacing: bone.spacing[0],
        source,
        grade,
    })
}

/// Preprocessing parameters; defaults follow the published settings where
/// stated and the documented choices elsewhere.
#[derive(Debug, Clone, Copy)]
pub struct PreprocessParams {
    pub windows: WindowPair,
    pub margin_fraction: f64,
    pub target_spacing: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            windows: WindowPair::as_published(),
            margin_fraction: 0.25,
            target_spacing: 1.0,
        }
    }
}

/// Full deterministic pipeline for one vertebra:
/// crop -> window (both) -> modulate -> resample -> assemble.
///
/// Windowing is pointwise, so cropping before windowing is exactly equivalent
/// to the reverse order and avoids windowing the full volume per vertebra.
pub fn preprocess_vertebra(
    volume: &VolumeGrid,
    mask: &VolumeGrid,
    case_id: &str,
    vertebra_label: u8,
    grade: Option<GenantGrade>,
    params: &PreprocessParams,
) -> Result<VertebraPatch> {
    let (sub_volume, sub_mask) =
        extract_patch(volume, mask, vertebra_label, params.margin_fraction)?;
    let bone = apply_window(&sub_volume, params.windows.bone)?;
    let soft = apply_window(&sub_volume, params.windows.soft)?;
    let modulated = modulate_mask(&sub_mask, vertebra_label)?;
    let bone = resample_isotropic(&bone, params.target_spacing, Interpolation::Trilinear)?;
    let soft = resample_isotropic(&soft, params.target_spacing, Interpolation::Trilinear)?;
    let modulated = resample_isotropic(&modulated, params.target_spacing, Interpolation::Nearest)?;
    assemble_patch(
        &bone,
        &soft,
        &modulated,
        PatchSource {
            case_id: case_id.to_string(),
            vertebra_label,
        },
        grade,
    )
}
