//! Dataset manifests, the Genant grade taxonomy, patient-level splitting and
//! volume/mask file I/O.
//!
//! A manifest is a JSON document indexing cases; each case points at one CT
//! volume, one segmentation mask sharing its geometry, and the per-vertebra
//! grade annotations. Splitting happens at case level so no individual
//! contributes vertebrae to both partitions.

mod volume;

pub use volume::{load_mask, load_volume, write_volume, ValueKind, VolumeGrid};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Genant semi-quantitative fracture grade: normal, mild, moderate, severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GenantGrade {
    G0,
    G1,
    G2,
    G3,
}

impl GenantGrade {
    pub const ALL: [GenantGrade; 4] = [
        GenantGrade::G0,
        GenantGrade::G1,
        GenantGrade::G2,
        GenantGrade::G3,
    ];

    /// Number of grades (the `C` of the 4-way classification).
    pub const COUNT: usize = 4;

    pub fn from_index(value: u8) -> Result<Self> {
        match value {
            0 => Ok(GenantGrade::G0),
            1 => Ok(GenantGrade::G1),
            2 => Ok(GenantGrade::G2),
            3 => Ok(GenantGrade::G3),
            other => Err(Error::data(format!(
                "grade {other} outside the Genant range 0..=3"
            ))),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// True for any fractured grade (G1, G2, G3).
    pub fn is_fractured(self) -> bool {
        self != GenantGrade::G0
    }
}

impl fmt::Display for GenantGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.index())
    }
}

/// Highest anatomical vertebra label (C1..L5 mapped to 1..24). Used both for
/// validation and as the normalization divisor when modulating masks.
pub const MAX_VERTEBRA_LABEL: u8 = 24;

/// One annotated vertebra of a case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertebraEntry {
    /// Anatomical label in `1..=24` (C1..L5).
    pub vertebra_label: u8,
    pub grade: GenantGrade,
}

/// One scan: a volume file, its segmentation mask and the annotated vertebrae.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRecord {
    pub case_id: String,
    /// Volume path, relative to the manifest file.
    pub volume_path: String,
    /// Mask path, relative to the manifest file.
    pub mask_path: String,
    pub vertebrae: Vec<VertebraEntry>,
}

/// Partition assignment of a case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSet {
    Train,
    Test,
}

/// The dataset index: cases plus an optional train/test assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub cases: Vec<CaseRecord>,
    /// When present, covers every case exactly once.
    pub split: Option<BTreeMap<String, SplitSet>>,
}

// Wire schema. Parsing goes through these raw types so invariant violations,
// not serde type errors, produce the case-level diagnostics.
#[derive(Serialize, Deserialize)]
struct RawVertebra {
    label: i64,
    grade: i64,
}

#[derive(Serialize, Deserialize)]
struct RawCase {
    case_id: String,
    volume: String,
    mask: String,
    vertebrae: Vec<RawVertebra>,
}

#[derive(Serialize, Deserialize)]
struct RawManifest {
    cases: Vec<RawCase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<BTreeMap<String, SplitSet>>,
}

/// Parse a manifest from its JSON text, enforcing all invariants.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let raw: RawManifest =
        serde_json::from_str(text).map_err(|e| Error::data(format!("manifest syntax: {e}")))?;

    let mut seen = BTreeSet::new();
    let mut cases = Vec::with_capacity(raw.cases.len());
    for case in &raw.cases {
        if !seen.insert(case.case_id.clone()) {
            return Err(Error::data(format!(
                "duplicate case_id '{}' in manifest",
                case.case_id
            )));
        }
        let mut labels = BTreeSet::new();
        let mut vertebrae = Vec::with_capacity(case.vertebrae.len());
        for v in &case.vertebrae {
            if !(1..=i64::from(MAX_VERTEBRA_LABEL)).contains(&v.label) {
                return Err(Error::data(format!(
                    "case '{}': vertebra label {} outside 1..={}",
                    case.case_id, v.label, MAX_VERTEBRA_LABEL
                )));
            }
            if !(0..=3).contains(&v.grade) {
                return Err(Error::data(format!(
                    "case '{}': grade {} outside 0..=3",
                    case.case_id, v.grade
                )));
            }
            if !labels.insert(v.label) {
                return Err(Error::data(format!(
                    "case '{}': vertebra label {} listed twice",
                    case.case_id, v.label
                )));
            }
            vertebrae.push(VertebraEntry {
                vertebra_label: v.label as u8,
                grade: GenantGrade::from_index(v.grade as u8)?,
            });
        }
        cases.push(CaseRecord {
            case_id: case.case_id.clone(),
            volume_path: case.volume.clone(),
            mask_path: case.mask.clone(),
            vertebrae,
        });
    }

    if let Some(split) = &raw.split {
        let ids: BTreeSet<_> = cases.iter().map(|c| c.case_id.clone()).collect();
        let split_ids: BTreeSet<_> = split.keys().cloned().collect();
        if ids != split_ids {
            return Err(Error::data(
                "manifest split must cover every case exactly once".to_string(),
            ));
        }
    }

    Ok(Manifest {
        cases,
        split: raw.split,
    })
}

/// Serialize a manifest back to its JSON text.
pub fn serialize_manifest(manifest: &Manifest) -> String {
    let raw = RawManifest {
        cases: manifest
            .cases
            .iter()
            .map(|c| RawCase {
                case_id: c.case_id.clone(),
                volume: c.volume_path.clone(),
                mask: c.mask_path.clone(),
                vertebrae: c
                    .vertebrae
                    .iter()
                    .map(|v| RawVertebra {
                        label: i64::from(v.vertebra_label),
                        grade: v.grade.index() as i64,
                    })
                    .collect(),
            })
            .collect(),
        split: manifest.split.clone(),
    };
    serde_json::to_string_pretty(&raw).expect("manifest serialization cannot fail")
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_manifest(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serialize_manifest(self)).map_err(|e| Error::io(path, e))
    }

    pub fn case(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    /// Split assignment of a case; `None` when the manifest carries no split.
    pub fn assignment(&self, case_id: &str) -> Option<SplitSet> {
        self.split.as_ref().and_then(|s| s.get(case_id).copied())
    }

    /// Cases belonging to one partition (all cases when no split present and
    /// `set` is `Train`).
    pub fn cases_in(&self, set: SplitSet) -> Vec<&CaseRecord> {
        match &self.split {
            Some(split) => self
                .cases
                .iter()
                .filter(|c| split.get(&c.case_id) == Some(&set))
                .collect(),
            None => {
                if set == SplitSet::Train {
                    self.cases.iter().collect()
                } else {
                    Vec::new()
                }
            }
        }
    }

    /// Flat enumeration of (case, vertebra) pairs in one partition, in
    /// manifest order. This ordering defines the stable patch index used for
    /// seeding and sampling.
    pub fn entries_in(&self, set: SplitSet) -> Vec<(&CaseRecord, &VertebraEntry)> {
        self.cases_in(set)
            .into_iter()
            .flat_map(|c| c.vertebrae.iter().map(move |v| (c, v)))
            .collect()
    }

    /// Per-grade vertebra counts over one partition.
    pub fn grade_counts(&self, set: SplitSet) -> [usize; GenantGrade::COUNT] {
        let mut counts = [0usize; GenantGrade::COUNT];
        for (_, v) in self.entries_in(set) {
            counts[v.grade.index()] += 1;
        }
        counts
    }
}

/// Assign every case to train or test at case level.
///
/// The test partition holds `round(N * test_fraction)` cases, clamped so both
/// partitions keep at least one case. Deterministic under `seed`.
pub fn split_cases(manifest: &Manifest, test_fraction: f64, seed: u64) -> Result<Manifest> {
    if manifest.cases.len() < 2 {
        return Err(Error::data(
            "cannot split a manifest with fewer than 2 cases".to_string(),
        ));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }

    let n = manifest.cases.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeding::rng_at(seed, seeding::tag("split"));
    order.shuffle(&mut rng);

    let test_idx: BTreeSet<usize> = order.into_iter().take(n_test).collect();
    let split = manifest
        .cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let set = if test_idx.contains(&i) {
                SplitSet::Test
            } else {
                SplitSet::Train
            };
            (c.case_id.clone(), set)
        })
        .collect();

    Ok(Manifest {
        cases: manifest.cases.clone(),
        split: Some(split),
    })
}
