//! Procedural generator of grade-labeled vertebra-like CT volumes. Enables
//! desk-scale end-to-end training and every pipeline test without clinical
//! data.
//!
//! Each synthetic vertebral body is an elliptic-footprint prism whose height
//! tapers linearly from a full posterior plateau to a reduced anterior
//! plateau; the anterior height loss is drawn from a grade-dependent band.
//! Grades are therefore recoverable from mask geometry alone, which is what
//! the end-to-end learning check relies on.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::dataset::{
    parse_manifest, serialize_manifest, CaseRecord, GenantGrade, Manifest, ValueKind,
    VertebraEntry, VolumeGrid, MAX_VERTEBRA_LABEL,
};
use crate::error::{Error, Result};
use crate::seeding;

/// Anterior height-loss bands per grade, adapted from the semi-quantitative
/// grading standard. Bands are disjoint so a height-ratio rule separates the
/// grades by construction.
pub const DEFAULT_DEFORMATION_BANDS: [[f64; 2]; 4] =
    [[0.00, 0.05], [0.20, 0.25], [0.26, 0.40], [0.40, 0.60]];

/// Margin kept from band edges when sampling the height loss, covering the
/// sub-voxel error of mask-based height measurement.
const BAND_GUARD: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub cases: usize,
    pub vertebrae_per_case: usize,
    /// Cubic case volume side, in voxels.
    pub volume_side: usize,
    /// Isotropic spacing, mm.
    pub spacing: f64,
    /// Relative grade frequencies G0:G1:G2:G3.
    pub grade_ratio: [f64; 4],
    pub seed: u64,
    /// Height-loss bands `[lo, hi]` per grade; must be monotone in grade.
    pub deformation_bands: [[f64; 2]; 4],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            cases: 40,
            vertebrae_per_case: 5,
            volume_side: 64,
            spacing: 1.0,
            grade_ratio: [1.0, 3.0, 3.0, 3.0],
            seed: 7,
            deformation_bands: DEFAULT_DEFORMATION_BANDS,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 || self.vertebrae_per_case == 0 {
            return Err(Error::config(
                "synth: cases and vertebrae_per_case must be positive",
            ));
        }
        if self.vertebrae_per_case > 8 {
            return Err(Error::config(
                "synth: at most 8 vertebrae fit one case volume",
            ));
        }
        if self.volume_side < 32 {
            return Err(Error::config("synth: volume_side must be at least 32"));
        }
        if self.grade_ratio.iter().any(|r| *r <= 0.0) {
            return Err(Error::config("synth: grade ratios must be positive"));
        }
        for w in self.deformation_bands.windows(2) {
            if w[1][0] < w[0][1] {
                return Err(Error::config(
                    "synth: deformation bands must be monotone in grade",
                ));
            }
        }
        for b in &self.deformation_bands {
            if !(b[0] >= 0.0 && b[1] <= 1.0 && b[0] <= b[1]) {
                return Err(Error::config(format!("synth: bad deformation band {b:?}")));
            }
        }
        Ok(())
    }

    /// Height-loss thresholds separating adjacent grades (band midpoints).
    pub fn loss_thresholds(&self) -> [f64; 3] {
        let b = &self.deformation_bands;
        [
            (b[0][1] + b[1][0]) / 2.0,
            (b[1][1] + b[2][0]) / 2.0,
            (b[2][1] + b[3][0]) / 2.0,
        ]
    }
}

/// One generated vertebral body in its local sub-volume.
pub struct SynthVertebra {
    pub hu: Array3<f32>,
    /// Binary body mask.
    pub mask: Array3<f32>,
    pub label: u8,
    /// The sampled anterior height-loss fraction.
    pub height_loss: f64,
}

/// Generate one vertebra-like body of the given grade in a cubic sub-volume.
/// HU values are integers: bone interior around 300..1200, soft-tissue
/// background in -100..100, plus noise. The anatomical label is drawn
/// uniformly from 1..=24.
pub fn generate_vertebra(grade: GenantGrade, rng: &mut ChaCha8Rng, side: usize) -> SynthVertebra {
    generate_vertebra_banded(grade, rng, side, &DEFAULT_DEFORMATION_BANDS, None)
}

fn sample_loss(grade: GenantGrade, bands: &[[f64; 2]; 4], rng: &mut ChaCha8Rng) -> f64 {
    let [lo, hi] = bands[grade.index()];
    let lo_g = if grade == GenantGrade::G0 {
        lo
    } else {
        lo + BAND_GUARD
    };
    let hi_g = (hi - BAND_GUARD).max(lo_g);
    rng.random_range(lo_g..=hi_g)
}

fn generate_vertebra_banded(
    grade: GenantGrade,
    rng: &mut ChaCha8Rng,
    side: usize,
    bands: &[[f64; 2]; 4],
    fixed_label: Option<u8>,
) -> SynthVertebra {
    let s = side as f64;
    let label = fixed_label.unwrap_or_else(|| rng.random_range(1..=MAX_VERTEBRA_LABEL));
    let loss = sample_loss(grade, bands, rng);

    // Body geometry: elliptic footprint in (x, y), height along z tapering
    // from a posterior plateau (low y) to a reduced anterior plateau (high y).
    let cx = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let cy = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let cz = s / 2.0 + rng.random_range(-0.04..0.04) * s;
    let rx = rng.random_range(0.28..0.34) * s;
    let ry = rng.random_range(0.28..0.34) * s;
    let h0 = rng.random_range(0.55..0.68) * s;
    let footprint_exp = rng.random_range(2.0..3.0); // superellipse roundness

    let mut hu = Array3::<f32>::zeros((side, side, side));
    let mut mask = Array3::<f32>::zeros((side, side, side));

    // Per-column sub-voxel dither of the body center keeps voxelized column
    // heights unbiased when averaged over the footprint.
    let dither_seed = rng.random::<u64>();
    let dither = |x: usize, y: usize| -> f64 {
        let h = seeding::subseed(dither_seed, (x * side + y) as u64);
        (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };

    for x in 0..side {
        for y in 0..side {
            let fx = ((x as f64 - cx) / rx).abs();
            let fy = ((y as f64 - cy) / ry).abs();
            let inside = fx.powf(footprint_exp) + fy.powf(footprint_exp) <= 1.0;
            if !inside {
                for z in 0..side {
                    hu[[x, y, z]] = (f64::from(sample_normal(rng)) * 50.0)
                        .clamp(-100.0, 100.0)
                        .round() as f32;
                }
                continue;
            }
            // taper profile along y: plateau, ramp, plateau
            let t = ((y as f64 - (cy - ry)) / (2.0 * ry)).clamp(0.0, 1.0);
            let ramp = ((t - 0.25) / 0.5).clamp(0.0, 1.0);
            let height = h0 * (1.0 - loss * ramp);
            let center = cz + dither(x, y);
            for z in 0..side {
                if (z as f64 - center).abs() <= height / 2.0 {
                    mask[[x, y, z]] = 1.0;
                    let v = 600.0 + f64::from(sample_normal(rng)) * 140.0;
                    hu[[x, y, z]] = v.clamp(300.0, 1200.0).round() as f32;
                } else {
                    hu[[x, y, z]] = (f64::from(sample_normal(rng)) * 50.0)
                        .clamp(-100.0, 100.0)
                        .round() as f32;
                }
            }
        }
    }

    SynthVertebra {
        hu,
        mask,
        label,
        height_loss: loss,
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    let n: f64 = rng.sample(rand_distr::StandardNormal);
    n as f32
}

/// Anterior/posterior mean column-height ratio measured on a binary mask.
/// Thanks to the per-column sub-voxel dither, the voxel count of a column is
/// an unbiased estimate of the continuous column height.
pub fn mask_height_ratio(mask: &Array3<f32>) -> Option<f64> {
    let (nx, ny, nz) = mask.dim();
    let mut y_lo = usize::MAX;
    let mut y_hi = 0usize;
    let mut heights = vec![vec![0usize; ny]; nx];
    for x in 0..nx {
        for y in 0..ny {
            let mut count = 0usize;
            for z in 0..nz {
                if mask[[x, y, z]] > 0.0 {
                    count += 1;
                }
            }
            if count > 0 {
                y_lo = y_lo.min(y);
                y_hi = y_hi.max(y);
            }
            heights[x][y] = count;
        }
    }
    if y_lo > y_hi {
        return None;
    }
    let span = (y_hi - y_lo) as f64;
    let post_cut = y_lo as f64 + 0.2 * span;
    let ant_cut = y_hi as f64 - 0.2 * span;

    let mut post = (0.0f64, 0usize);
    let mut ant = (0.0f64, 0usize);
    for x in 0..nx {
        for y in 0..ny {
            let count = heights[x][y];
            if count == 0 {
                continue;
            }
            let est = count as f64;
            if (y as f64) <= post_cut {
                post.0 += est;
                post.1 += 1;
            } else if (y as f64) >= ant_cut {
                ant.0 += est;
                ant.1 += 1;
            }
        }
    }
    if post.1 == 0 || ant.1 == 0 || post.0 == 0.0 {
        return None;
    }
    Some((ant.0 / ant.1 as f64) / (post.0 / post.1 as f64))
}

/// Grade a mask by its measured height loss against the configured bands;
/// the sanity oracle for the end-to-end learning check.
pub fn classify_by_height_ratio(ratio: f64, cfg: &SynthConfig) -> GenantGrade {
    let loss = 1.0 - ratio;
    let t = cfg.loss_thresholds();
    if loss < t[0] {
        GenantGrade::G0
    } else if loss < t[1] {
        GenantGrade::G1
    } else if loss < t[2] {
        GenantGrade::G2
    } else {
        GenantGrade::G3
    }
}

/// Exact per-grade counts from the ratio via largest remainder.
pub fn grade_counts_for(total: usize, ratio: &[f64; 4]) -> [usize; 4] {
    let sum: f64 = ratio.iter().sum();
    let raw: Vec<f64> = ratio.iter().map(|r| total as f64 * r / sum).collect();
    let mut counts = [0usize; 4];
    let mut assigned = 0usize;
    for (i, r) in raw.iter().enumerate() {
        counts[i] = r.floor() as usize;
        assigned += counts[i];
    }
    let mut rem: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - r.floor()))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in rem.into_iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Generate the full dataset on disk: one volume + mask per case and a
/// manifest indexing everything. Deterministic under the config seed.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<(Manifest, PathBuf)> {
    cfg.validate()?;
    let volumes_dir = out_dir.join("volumes");
    let masks_dir = out_dir.join("masks");
    std::fs::create_dir_all(&volumes_dir).map_err(|e| Error::io(&volumes_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    // Global grade pool honoring the ratio within rounding.
    let total = cfg.cases * cfg.vertebrae_per_case;
    let counts = grade_counts_for(total, &cfg.grade_ratio);
    let mut grade_pool = Vec::with_capacity(total);
    for (i, c) in counts.iter().enumerate() {
        for _ in 0..*c {
            grade_pool.push(GenantGrade::from_index(i as u8).unwrap());
        }
    }
    {
        use rand::seq::SliceRandom;
        let mut rng = seeding::rng_at(cfg.seed, seeding::tag("grade-pool"));
        grade_pool.shuffle(&mut rng);
    }

    let slot_side = cfg.volume_side / 2;
    let slot_offsets: [[usize; 3]; 8] = {
        let mut v = [[0usize; 3]; 8];
        for (i, o) in v.iter_mut().enumerate() {
            *o = [
                (i & 1) * slot_side,
                ((i >> 1) & 1) * slot_side,
                ((i >> 2) & 1) * slot_side,
            ];
        }
        v
    };

    let mut cases = Vec::with_capacity(cfg.cases);
    let mut pool_cursor = 0usize;
    for case_idx in 0..cfg.cases {
        let case_id = format!("case_{case_idx:03}");
        let mut rng = seeding::rng_at(
            cfg.seed,
            seeding::subseed(seeding::tag("case"), case_idx as u64),
        );

        let side = cfg.volume_side;
        let mut volume = Array3::<f32>::zeros((side, side, side));
        for v in volume.iter_mut() {
            *v = (f64::from(sample_normal(&mut rng)) * 50.0)
                .clamp(-100.0, 100.0)
                .round() as f32;
        }
        let mut mask = Array3::<f32>::zeros((side, side, side));

        // distinct anatomical labels and slots for this case
        use rand::seq::SliceRandom;
        let mut labels: Vec<u8> = (1..=MAX_VERTEBRA_LABEL).collect();
        labels.shuffle(&mut rng);
        let mut slots: Vec<usize> = (0..8).collect();
        slots.shuffle(&mut rng);

        let mut vertebrae = Vec::with_capacity(cfg.vertebrae_per_case);
        for v_idx in 0..cfg.vertebrae_per_case {
            let grade = grade_pool[pool_cursor];
            pool_cursor += 1;
            let label = labels[v_idx];
            let body = generate_vertebra_banded(
                grade,
                &mut rng,
                slot_side,
                &cfg.deformation_bands,
                Some(label),
            );
            let off = slot_offsets[slots[v_idx]];
            for ((x, y, z), m) in body.mask.indexed_iter() {
                let pos = [x + off[0], y + off[1], z + off[2]];
                if *m > 0.0 {
                    mask[[pos[0], pos[1], pos[2]]] = f32::from(label);
                    volume[[pos[0], pos[1], pos[2]]] = body.hu[[x, y, z]];
                }
            }
            vertebrae.push(VertebraEntry {
                vertebra_label: label,
                grade,
            });
        }
        vertebrae.sort_by_key(|v| v.vertebra_label);

        let volume_rel = format!("volumes/{case_id}.nii.gz");
        let mask_rel = format!("masks/{case_id}.nii.gz");
        let vol_grid = VolumeGrid::new(volume, [cfg.spacing; 3], ValueKind::Hu)?;
        let mask_grid = VolumeGrid::new(mask, [cfg.spacing; 3], ValueKind::Labels)?;
        crate::dataset::write_volume(&out_dir.join(&volume_rel), &vol_grid)?;
        crate::dataset::write_volume(&out_dir.join(&mask_rel), &mask_grid)?;

        cases.push(CaseRecord {
            case_id,
            volume_path: volume_rel,
            mask_path: mask_rel,
            vertebrae,
        });
    }

    let manifest = Manifest { cases, split: None };
    // self-check: the emitted manifest must parse
    let text = serialize_manifest(&manifest);
    parse_manifest(&text)?;
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok((manifest, manifest_path))
}
