//! Python bindings for the vertebral fracture grading pipeline: CT
//! windowing, patch preprocessing, augmentation, the contrastive loss,
//! the per-class sampler, evaluation metrics and synthetic data generation.

use std::path::Path;

use ndarray::{Array2, Array4};
use numpy::{
    IntoPyArray, PyArray2, PyArray3, PyArray4, PyReadonlyArray2, PyReadonlyArray3, PyReadonlyArray4,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use vfgrade::augment::{make_view_pair, AugmentConfig};
use vfgrade::dataset::{GenantGrade, Manifest, ValueKind, VolumeGrid};
use vfgrade::network::EmbeddingBatch;
use vfgrade::objective::{self, LossConfig};
use vfgrade::preprocess::{self, PatchSource, VertebraPatch, WindowSpec};
use vfgrade::sampler::PerClassSampler;
use vfgrade::synthdata::{generate_dataset, SynthConfig};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn grades_from(labels: &[u8]) -> PyResult<Vec<GenantGrade>> {
    labels
        .iter()
        .map(|g| GenantGrade::from_index(*g).map_err(err))
        .collect()
}

/// Linear CT window: maps `[level - width/2, level + width/2]` to `[0, 1]`
/// with clipping.
#[pyfunction]
fn apply_window<'py>(
    py: Python<'py>,
    volume: PyReadonlyArray3<'py, f32>,
    level: f64,
    width: f64,
) -> PyResult<Bound<'py, PyArray3<f32>>> {
    let grid =
        VolumeGrid::new(volume.as_array().to_owned(), [1.0; 3], ValueKind::Hu).map_err(err)?;
    let spec = WindowSpec::new(level, width).map_err(err)?;
    let out = preprocess::apply_window(&grid, spec).map_err(err)?;
    Ok(out.data.into_pyarray(py))
}

/// Supervised contrastive loss over unit embeddings `[V, dim]` with integer
/// grade labels. Returns `(loss, gradient)`.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, temperature = 0.07))]
fn supcon_loss<'py>(
    py: Python<'py>,
    embeddings: PyReadonlyArray2<'py, f64>,
    labels: Vec<u8>,
    temperature: f64,
) -> PyResult<(f64, Bound<'py, PyArray2<f64>>)> {
    let z: Array2<f64> = embeddings.as_array().to_owned();
    let grades = grades_from(&labels)?;
    let ids = (0..grades.len() as u64).collect();
    let batch = EmbeddingBatch {
        embeddings: z,
        labels: grades,
        patch_ids: ids,
    };
    let cfg = LossConfig {
        temperature,
        ..LossConfig::default()
    };
    let out = objective::supcon_loss(&batch, &cfg).map_err(err)?;
    Ok((out.loss, out.grad.into_pyarray(py)))
}

/// Mean cross-entropy of `[V, 4]` logits against integer grade labels.
#[pyfunction]
fn cross_entropy(logits: PyReadonlyArray2<'_, f64>, labels: Vec<u8>) -> PyResult<f64> {
    let batch = vfgrade::network::LogitBatch::new(logits.as_array().to_owned()).map_err(err)?;
    let grades = grades_from(&labels)?;
    Ok(objective::cross_entropy(&batch, &grades).map_err(err)?.loss)
}

/// Area under the ROC curve (rank statistic, ties count one half).
#[pyfunction]
fn auc_roc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    vfgrade::metrics::auc_roc(&scores, &labels).map_err(err)
}

/// Macro precision/recall/F1 over `(truth, prediction)` class-index pairs.
#[pyfunction]
fn macro_prf(truth: Vec<usize>, pred: Vec<usize>, num_classes: usize) -> PyResult<(f64, f64, f64)> {
    if truth.len() != pred.len() {
        return Err(PyValueError::new_err("truth/pred length mismatch"));
    }
    if truth.iter().chain(&pred).any(|c| *c >= num_classes) {
        return Err(PyValueError::new_err("class index out of range"));
    }
    let m = vfgrade::metrics::macro_prf_from_pairs(&truth, &pred, num_classes);
    Ok((m.precision, m.recall, m.f1))
}

/// Batches before the smallest class is exhausted: `floor(min_count / n)`.
#[pyfunction]
fn epoch_length(class_counts: Vec<usize>, n: usize) -> PyResult<usize> {
    vfgrade::sampler::epoch_length(&class_counts, n).map_err(err)
}

/// The per-class batch sampler: every batch holds exactly `n` indices of
/// each present grade, drawn without replacement; pools reshuffle when the
/// smallest class is exhausted.
#[pyclass(name = "PerClassSampler")]
struct PyPerClassSampler {
    inner: PerClassSampler,
}

#[pymethods]
impl PyPerClassSampler {
    #[new]
    fn new(labels: Vec<u8>, n: usize, seed: u64) -> PyResult<Self> {
        let grades = grades_from(&labels)?;
        Ok(PyPerClassSampler {
            inner: PerClassSampler::new(&grades, n, seed).map_err(err)?,
        })
    }

    fn next_batch(&mut self) -> Vec<(usize, u8)> {
        self.inner
            .next_batch()
            .into_iter()
            .map(|(idx, g)| (idx, g.index() as u8))
            .collect()
    }

    fn epoch_len(&self) -> usize {
        self.inner.epoch_len()
    }

    fn batch_len(&self) -> usize {
        self.inner.batch_len()
    }
}

/// Generate the synthetic grade-labeled dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, cases = 40, vertebrae_per_case = 5, volume_side = 64, seed = 7))]
fn generate_synthetic_dataset(
    out_dir: &str,
    cases: usize,
    vertebrae_per_case: usize,
    volume_side: usize,
    seed: u64,
) -> PyResult<String> {
    let cfg = SynthConfig {
        cases,
        vertebrae_per_case,
        volume_side,
        seed,
        ..SynthConfig::default()
    };
    let (_, path) = generate_dataset(&cfg, Path::new(out_dir)).map_err(err)?;
    Ok(path.to_string_lossy().into_owned())
}

/// Summary of a manifest: `(case_count, vertebra_count, per_grade_counts)`.
#[pyfunction]
fn manifest_summary(path: &str) -> PyResult<(usize, usize, [usize; 4])> {
    let manifest = Manifest::load(Path::new(path)).map_err(err)?;
    let mut counts = [0usize; 4];
    let mut total = 0usize;
    for case in &manifest.cases {
        for v in &case.vertebrae {
            counts[v.grade.index()] += 1;
            total += 1;
        }
    }
    Ok((manifest.cases.len(), total, counts))
}

/// Preprocess one vertebra from volume/mask files into the 3-channel patch
/// `[3, D, H, W]` (bone window, soft-tissue window, modulated mask).
#[pyfunction]
#[pyo3(signature = (volume_path, mask_path, vertebra_label, margin_fraction = 0.25, target_spacing = 1.0, conventional_windows = false))]
fn preprocess_patch<'py>(
    py: Python<'py>,
    volume_path: &str,
    mask_path: &str,
    vertebra_label: u8,
    margin_fraction: f64,
    target_spacing: f64,
    conventional_windows: bool,
) -> PyResult<Bound<'py, PyArray4<f32>>> {
    let volume = vfgrade::dataset::load_volume(Path::new(volume_path)).map_err(err)?;
    let mask = vfgrade::dataset::load_mask(Path::new(mask_path)).map_err(err)?;
    let params = preprocess::PreprocessParams {
        windows: if conventional_windows {
            preprocess::WindowPair::conventional()
        } else {
            preprocess::WindowPair::as_published()
        },
        margin_fraction,
        target_spacing,
    };
    let patch =
        preprocess::preprocess_vertebra(&volume, &mask, "py", vertebra_label, None, &params)
            .map_err(err)?;
    Ok(patch.channels.into_pyarray(py))
}

/// Augment a `[3, D, H, W]` patch twice with the published pipeline,
/// returning the two canonical views.
#[pyfunction]
#[pyo3(signature = (patch, grade, seed, canonical_side = 128))]
fn augment_pair<'py>(
    py: Python<'py>,
    patch: PyReadonlyArray4<'py, f32>,
    grade: u8,
    seed: u64,
    canonical_side: usize,
) -> PyResult<(Bound<'py, PyArray4<f32>>, Bound<'py, PyArray4<f32>>)> {
    let channels: Array4<f32> = patch.as_array().to_owned();
    if channels.shape()[0] != 3 {
        return Err(PyValueError::new_err("patch must have 3 channels"));
    }
    let patch = VertebraPatch {
        channels,
        spacing: 1.0,
        source: PatchSource {
            case_id: "py".into(),
            vertebra_label: 1,
        },
        grade: None,
    };
    let cfg = AugmentConfig {
        canonical_side,
        ..AugmentConfig::default()
    };
    let grade = GenantGrade::from_index(grade).map_err(err)?;
    let pair = make_view_pair(&patch, grade, seed, &cfg);
    Ok((
        pair.view_a.channels.into_pyarray(py),
        pair.view_b.channels.into_pyarray(py),
    ))
}

/// Anterior/posterior height ratio measured on a binary mask `[D, H, W]`.
#[pyfunction]
fn mask_height_ratio(mask: PyReadonlyArray3<'_, f32>) -> Option<f64> {
    vfgrade::synthdata::mask_height_ratio(&mask.as_array().to_owned())
}

#[pymodule]
fn vfgrade_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(apply_window, m)?)?;
    m.add_function(wrap_pyfunction!(supcon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(auc_roc, m)?)?;
    m.add_function(wrap_pyfunction!(macro_prf, m)?)?;
    m.add_function(wrap_pyfunction!(epoch_length, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(manifest_summary, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess_patch, m)?)?;
    m.add_function(wrap_pyfunction!(augment_pair, m)?)?;
    m.add_function(wrap_pyfunction!(mask_height_ratio, m)?)?;
    m.add_class::<PyPerClassSampler>()?;
    Ok(())
}
