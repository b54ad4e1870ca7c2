//! Run orchestration: the training loop, checkpoint-driven evaluation,
//! per-vertebra inference and attention-map export.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array5, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::{center_pad, make_view_pair};
use crate::checkpoint::{Checkpoint, EpochRecord, EvalSummary};
use crate::config::RunConfig;
use crate::dataset::{
    load_mask, load_volume, split_cases, GenantGrade, Manifest, SplitSet, VolumeGrid,
};
use crate::error::{Error, Result};
use crate::explain::{export_overlay, grad_cam, AttentionVolume, OverlayStyle, StageCam};
use crate::metrics::{evaluate, EvalRecord, EvalReport};
use crate::network::GradingNetwork;
use crate::objective::{lr_at, training_step, SgdState, StepReport};
use crate::preprocess::{preprocess_vertebra, PreprocessParams, VertebraPatch};
use crate::sampler::PerClassSampler;
use crate::seeding;

/// Preprocessed patches of one partition, with stable patch ids.
pub struct PreparedSet {
    pub patches: Vec<VertebraPatch>,
    pub grades: Vec<GenantGrade>,
    /// Stable identity per patch (its index in the manifest enumeration).
    pub ids: Vec<u64>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Load and preprocess every vertebra of one partition. Volumes are read
/// once per case.
pub fn prepare_patches(
    manifest: &Manifest,
    base_dir: &Path,
    params: &PreprocessParams,
    set: SplitSet,
) -> Result<PreparedSet> {
    let mut patches = Vec::new();
    let mut grades = Vec::new();
    let mut ids = Vec::new();
    let mut next_id = 0u64;
    for case in &manifest.cases {
        let in_set = match manifest.assignment(&case.case_id) {
            Some(s) => s == set,
            None => set == SplitSet::Train,
        };
        if !in_set {
            next_id += case.vertebrae.len() as u64;
            continue;
        }
        let volume = load_volume(&base_dir.join(&case.volume_path))?;
        let mask = load_mask(&base_dir.join(&case.mask_path))?;
        for entry in &case.vertebrae {
            let patch = preprocess_vertebra(
                &volume,
                &mask,
                &case.case_id,
                entry.vertebra_label,
                Some(entry.grade),
                params,
            )?;
            patches.push(patch);
            grades.push(entry.grade);
            ids.push(next_id);
            next_id += 1;
        }
    }
    Ok(PreparedSet {
        patches,
        grades,
        ids,
    })
}

/// Express `target` relative to `base` (both directories/files resolved
/// against the current directory), falling back to the absolute path when
/// they share no common root.
fn relative_path(target: &Path, base: &Path) -> PathBuf {
    let target = std::path::absolute(target).unwrap_or_else(|_| target.to_path_buf());
    let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
    let mut t = target.components().peekable();
    let mut b = base.components().peekable();
    while let (Some(tc), Some(bc)) = (t.peek(), b.peek()) {
        if tc == bc {
            t.next();
            b.next();
        } else {
            break;
        }
    }
    let ups = b.count();
    if ups > 0 && !target.has_root() {
        return target;
    }
    let mut rel = PathBuf::new();
    for _ in 0..ups {
        rel.push("..");
    }
    for c in t {
        rel.push(c.as_os_str());
    }
    if rel.as_os_str().is_empty() {
        rel.push(".");
    }
    rel
}

/// Save a manifest copy whose volume/mask paths stay valid from the copy's
/// own directory.
fn save_manifest_rebased(manifest: &Manifest, base_dir: &Path, dest: &Path) -> Result<()> {
    let dest_dir = dest.parent().unwrap_or(Path::new("."));
    let mut rebased = manifest.clone();
    for case in &mut rebased.cases {
        case.volume_path = relative_path(&base_dir.join(&case.volume_path), dest_dir)
            .to_string_lossy()
            .into_owned();
        case.mask_path = relative_path(&base_dir.join(&case.mask_path), dest_dir)
            .to_string_lossy()
            .into_owned();
    }
    rebased.save(dest)
}

/// Deterministically padded views for an index list, stacked into a batch.
fn stack_center_padded(set: &PreparedSet, indices: &[usize], side: usize) -> Array5<f32> {
    let mut views = Array5::zeros((indices.len(), 3, side, side, side));
    for (row, idx) in indices.iter().enumerate() {
        let padded = center_pad(&set.patches[*idx], side);
        views.index_axis_mut(Axis(0), row).assign(&padded.channels);
    }
    views
}

/// Classify every patch of a set in eval mode (no augmentation beyond the
/// deterministic centered padding; the projection head is never touched).
pub fn eval_records(
    model: &mut GradingNetwork,
    set: &PreparedSet,
    side: usize,
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::with_capacity(set.len());
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(8) {
        let views = stack_center_padded(set, chunk, side);
        let features = model.encode(&views, false)?;
        let logits = model.classify_inference(&features);
        let probs = crate::network::LogitBatch::new(logits.mapv(f64::from))?.softmax();
        for (row, idx) in chunk.iter().enumerate() {
            let p = probs.row(row);
            records.push(EvalRecord::new(set.grades[*idx], [p[0], p[1], p[2], p[3]])?);
        }
    }
    model.clear_caches();
    Ok(records)
}

/// Mean within-class cosine similarity of projection embeddings over a set,
/// averaged over classes with at least two members.
pub fn within_class_cosine(
    model: &mut GradingNetwork,
    set: &PreparedSet,
    side: usize,
) -> Result<f64> {
    let mut embeddings: Vec<(GenantGrade, Vec<f32>)> = Vec::with_capacity(set.len());
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(8) {
        let views = stack_center_padded(set, chunk, side);
        let features = model.encode(&views, false)?;
        let unit = model.project(&features)?;
        for (row, idx) in chunk.iter().enumerate() {
            embeddings.push((set.grades[*idx], unit.row(row).to_vec()));
        }
    }
    model.clear_caches();

    let mut class_means = Vec::new();
    for grade in GenantGrade::ALL {
        let members: Vec<&Vec<f32>> = embeddings
            .iter()
            .filter(|(g, _)| *g == grade)
            .map(|(_, e)| e)
            .collect();
        if members.len() < 2 {
            continue;
        }
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                let dot: f64 = members[i]
                    .iter()
                    .zip(members[j])
                    .map(|(a, b)| f64::from(*a) * f64::from(*b))
                    .sum();
                total += dot;
                pairs += 1;
            }
        }
        class_means.push(total / pairs as f64);
    }
    if class_means.is_empty() {
        return Err(Error::data(
            "within-class cosine needs a class with at least two members".to_string(),
        ));
    }
    Ok(class_means.iter().sum::<f64>() / class_means.len() as f64)
}

/// Populate batch-norm running statistics with a few label-free forward
/// passes over train patches (train-mode statistics, no gradients). Without
/// this, an untrained model evaluated with the (0, 1) initialization
/// statistics collapses every embedding onto one direction, which makes
/// eval-mode baselines meaningless.
pub fn calibrate_norm_stats(
    model: &mut GradingNetwork,
    set: &PreparedSet,
    side: usize,
) -> Result<()> {
    let indices: Vec<usize> = (0..set.len().min(64)).collect();
    for _ in 0..3 {
        for chunk in indices.chunks(8) {
            let views = stack_center_padded(set, chunk, side);
            let _ = model.encode(&views, true)?;
        }
    }
    model.clear_caches();
    Ok(())
}

/// Everything `cmd_train` produces.
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub report: EvalReport,
    pub history: Vec<EpochRecord>,
    pub initial_within_class_cosine: f64,
    pub final_within_class_cosine: f64,
}

/// Run the full training loop per the configuration; see the config type
/// for every knob. Deterministic under `training.seed`.
pub fn cmd_train(
    config: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(out_dir.join("resolved_config.toml"), config.to_toml())
        .map_err(|e| Error::io(out_dir, e))?;

    let params = config.preprocess.params()?;
    let manifest_path = PathBuf::from(&config.dataset.manifest);
    let base_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = Manifest::load(&manifest_path)?;
    let manifest = if manifest.split.is_some() {
        manifest
    } else {
        split_cases(
            &manifest,
            config.dataset.test_fraction,
            config.training.seed,
        )?
    };
    save_manifest_rebased(
        &manifest,
        &base_dir,
        &out_dir.join("manifest_with_split.json"),
    )?;

    let train_set = prepare_patches(&manifest, &base_dir, &params, SplitSet::Train)?;
    let test_set = prepare_patches(&manifest, &base_dir, &params, SplitSet::Test)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::data(format!(
            "degenerate split: {} train / {} test vertebrae",
            train_set.len(),
            test_set.len()
        )));
    }
    let normals = test_set.grades.iter().filter(|g| !g.is_fractured()).count();
    if normals == 0 || normals == test_set.len() {
        return Err(Error::data(
            "test partition must contain both normal (G0) and fractured vertebrae for \
             binary evaluation; re-split with a different seed or provide an explicit split"
                .to_string(),
        ));
    }

    let seed = config.training.seed;
    let side = config.network.input_side;
    let mut model = GradingNetwork::new(config.network, seed);
    let mut sgd = SgdState::new();
    let mut sampler = PerClassSampler::new(
        &train_set.grades,
        config.sampler.n,
        seeding::subseed(seed, seeding::tag("sampler")),
    )?;

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut start_epoch = 0usize;
    let mut best_macro_f1: Option<f64> = None;
    let initial_cos;

    if let Some(resume_path) = resume {
        let ckpt = Checkpoint::load(resume_path)?;
        // Extending the epoch horizon is allowed; everything else must match.
        let mut stored = ckpt.config.clone();
        stored.optimizer.epochs = config.optimizer.epochs;
        if stored != *config {
            return Err(Error::config(
                "resume checkpoint was trained with a different configuration".to_string(),
            ));
        }
        ckpt.restore(&mut model)?;
        sgd.velocity = ckpt.velocity.clone();
        sampler.advance(ckpt.batches_emitted);
        start_epoch = ckpt.epoch;
        history = ckpt.history.clone();
        best_macro_f1 = ckpt.best_macro_f1;
        initial_cos = ckpt.initial_within_class_cosine.ok_or_else(|| {
            Error::data("resume checkpoint lacks the initial embedding record".to_string())
        })?;
    } else {
        calibrate_norm_stats(&mut model, &train_set, side)?;
        initial_cos = within_class_cosine(&mut model, &test_set, side)?;
    }

    let log_path = out_dir.join("metrics.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let epochs = config.optimizer.epochs;
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut wrote_best = false;
    let augment_base = seeding::subseed(seed, seeding::tag("augment"));

    for epoch in start_epoch..epochs {
        let lr = lr_at(epoch, &config.optimizer);
        let steps_in_epoch = sampler.epoch_len();
        let mut steps: Vec<StepReport> = Vec::with_capacity(steps_in_epoch);
        for step in 0..steps_in_epoch {
            let batch = sampler.next_batch();
            let n_views = batch.len() * 2;
            let mut views = Array5::zeros((n_views, 3, side, side, side));
            let mut labels = Vec::with_capacity(n_views);
            let mut ids = Vec::with_capacity(n_views);
            for (slot, (idx, grade)) in batch.iter().enumerate() {
                let patch_id = train_set.ids[*idx];
                let pair_seed =
                    seeding::subseed(seeding::subseed(augment_base, epoch as u64), patch_id);
                let pair =
                    make_view_pair(&train_set.patches[*idx], *grade, pair_seed, &config.augment);
                views
                    .index_axis_mut(Axis(0), 2 * slot)
                    .assign(&pair.view_a.channels);
                views
                    .index_axis_mut(Axis(0), 2 * slot + 1)
                    .assign(&pair.view_b.channels);
                labels.extend([*grade, *grade]);
                ids.extend([patch_id, patch_id]);
            }
            let report = training_step(
                &mut model,
                &views,
                &labels,
                &ids,
                &config.loss,
                &config.optimizer,
                lr,
                &mut sgd,
            )?;
            let line = serde_json::json!({
                "epoch": epoch,
                "step": step,
                "supcon": report.supcon_loss,
                "ce": report.ce_loss,
                "total": report.total_loss,
                "grad_norm": report.grad_norm,
                "lr": report.lr,
            });
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            steps.push(report);
        }

        let mean_supcon =
            steps.iter().map(|s| s.supcon_loss).sum::<f64>() / steps.len().max(1) as f64;
        let mean_ce = steps.iter().map(|s| s.ce_loss).sum::<f64>() / steps.len().max(1) as f64;
        let mut record = EpochRecord {
            epoch,
            lr,
            mean_supcon,
            mean_ce,
            steps,
            eval: None,
        };

        let cadence = config.training.checkpoint_every.max(1);
        let is_eval_epoch = (epoch + 1) % cadence == 0 || epoch + 1 == epochs;
        if is_eval_epoch {
            let records = eval_records(&mut model, &test_set, side)?;
            let report = evaluate(&records, config.metrics.binary_score_rule)?;
            let cos = within_class_cosine(&mut model, &test_set, side)?;
            record.eval = Some(EvalSummary {
                macro_f1: report.macro_f1,
                auc_roc: report.auc_roc,
                sensitivity: report.sensitivity,
                specificity: report.specificity,
                within_class_cosine: cos,
            });
            let eval_line = serde_json::json!({
                "epoch": epoch,
                "eval_macro_f1": report.macro_f1,
                "eval_auc": report.auc_roc,
                "within_class_cosine": cos,
            });
            writeln!(log, "{eval_line}").map_err(|e| Error::io(&log_path, e))?;
            eprintln!(
                "epoch {:>4}: supcon {:.4} ce {:.4} | test macro-F1 {:.3} auc {:.3} cos {:.3}",
                epoch, mean_supcon, mean_ce, report.macro_f1, report.auc_roc, cos
            );

            history.push(record);
            let improved = best_macro_f1.is_none_or(|b| report.macro_f1 > b);
            if improved {
                best_macro_f1 = Some(report.macro_f1);
            }
            let ckpt = Checkpoint::capture(
                config,
                &mut model,
                &sgd,
                epoch + 1,
                sampler.batches_emitted(),
                history.clone(),
                Some(initial_cos),
                best_macro_f1,
            );
            ckpt.save(&last_path)?;
            if improved {
                ckpt.save(&best_path)?;
                wrote_best = true;
            }
        } else {
            history.push(record);
        }
    }

    // Final numbers (the last epoch always evaluates).
    let records = eval_records(&mut model, &test_set, side)?;
    let report = evaluate(&records, config.metrics.binary_score_rule)?;
    let final_cos = within_class_cosine(&mut model, &test_set, side)?;
    std::fs::write(
        out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Error::io(out_dir, e))?;
    crate::metrics::render_roc_png(&report.roc, &out_dir.join("roc.png"))?;

    Ok(TrainOutcome {
        final_checkpoint: last_path,
        best_checkpoint: wrote_best.then_some(best_path),
        report,
        history,
        initial_within_class_cosine: initial_cos,
        final_within_class_cosine: final_cos,
    })
}

/// Rebuild the model a checkpoint describes.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<GradingNetwork> {
    let mut model = GradingNetwork::new(ckpt.config.network, ckpt.config.training.seed);
    ckpt.restore(&mut model)?;
    Ok(model)
}

/// Evaluate a checkpoint on one partition of a manifest. Evaluating the
/// train partition (or an unsplit manifest) requires `allow_train`.
pub fn cmd_eval(
    checkpoint_path: &Path,
    manifest_path: &Path,
    split: SplitSet,
    allow_train: bool,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    if split == SplitSet::Train && !allow_train {
        return Err(Error::config(
            "evaluating the train split is refused unless --allow-train is given".to_string(),
        ));
    }
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let mut model = model_from_checkpoint(&ckpt)?;
    let manifest = Manifest::load(manifest_path)?;
    if manifest.split.is_none() && !allow_train {
        return Err(Error::data(
            "manifest carries no split; evaluation would include training cases \
             (pass --allow-train to evaluate everything)"
                .to_string(),
        ));
    }
    let base_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let params = ckpt.config.preprocess.params()?;
    let set = prepare_patches(&manifest, &base_dir, &params, split)?;
    if set.is_empty() {
        return Err(Error::data(format!(
            "no vertebrae in the {split:?} partition"
        )));
    }
    let records = eval_records(&mut model, &set, ckpt.config.network.input_side)?;
    let report = evaluate(&records, ckpt.config.metrics.binary_score_rule)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(
            dir.join("eval_report.json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| Error::io(dir, e))?;
        std::fs::write(dir.join("eval_report.txt"), report.to_string())
            .map_err(|e| Error::io(dir, e))?;
        crate::metrics::render_roc_png(&report.roc, &dir.join("roc.png"))?;
    }
    Ok(report)
}

/// One row of the inference table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferRow {
    pub vertebra_label: u8,
    pub grade: u8,
    pub probabilities: [f64; 4],
}

/// Grade every labeled vertebra in a (volume, mask) pair. Inference uses
/// only the encoder and the classification head; the projection head is
/// never evaluated.
pub fn cmd_infer(
    checkpoint_path: &Path,
    volume_path: &Path,
    mask_path: &Path,
) -> Result<Vec<InferRow>> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let mut model = model_from_checkpoint(&ckpt)?;
    let params = ckpt.config.preprocess.params()?;
    let side = ckpt.config.network.input_side;

    let volume = load_volume(volume_path)?;
    let mask = load_mask(mask_path)?;
    let labels = labels_present(&mask);
    if labels.is_empty() {
        return Err(Error::data("mask contains no vertebra labels".to_string()));
    }

    let mut rows = Vec::with_capacity(labels.len());
    for label in labels {
        let patch = preprocess_vertebra(&volume, &mask, "query", label, None, &params)?;
        let padded = center_pad(&patch, side);
        let mut views = Array5::zeros((1, 3, side, side, side));
        views.index_axis_mut(Axis(0), 0).assign(&padded.channels);
        let features = model.encode(&views, false)?;
        let logits = model.classify_inference(&features);
        let probs = crate::network::LogitBatch::new(logits.mapv(f64::from))?.softmax();
        let p = probs.row(0);
        let argmax = (0..4)
            .max_by(|a, b| p[*a].partial_cmp(&p[*b]).unwrap())
            .unwrap();
        rows.push(InferRow {
            vertebra_label: label,
            grade: argmax as u8,
            probabilities: [p[0], p[1], p[2], p[3]],
        });
        model.clear_caches();
    }
    Ok(rows)
}

/// Distinct vertebra labels present in a mask, ascending.
pub fn labels_present(mask: &VolumeGrid) -> Vec<u8> {
    let mut seen = [false; 25];
    for v in mask.data.iter() {
        let label = *v as i64;
        if (1..=24).contains(&label) && *v == label as f32 {
            seen[label as usize] = true;
        }
    }
    (1u8..=24).filter(|l| seen[*l as usize]).collect()
}

/// Outputs of the `gradcam` command.
pub struct GradCamOutcome {
    pub attention: AttentionVolume,
    pub target: GenantGrade,
    pub overlays: Vec<PathBuf>,
    pub attention_volume_path: PathBuf,
}

/// Compute and export an attention map for one vertebra. When no target
/// class is given, the model's prediction is used.
#[allow(clippy::too_many_arguments)]
pub fn cmd_gradcam(
    checkpoint_path: &Path,
    volume_path: &Path,
    mask_path: &Path,
    vertebra_label: u8,
    target: Option<GenantGrade>,
    stage: Option<usize>,
    slice_axis: usize,
    out_dir: &Path,
) -> Result<GradCamOutcome> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let mut model = model_from_checkpoint(&ckpt)?;
    let params = ckpt.config.preprocess.params()?;
    let side = ckpt.config.network.input_side;

    let volume = load_volume(volume_path)?;
    let mask = load_mask(mask_path)?;
    let patch = preprocess_vertebra(&volume, &mask, "query", vertebra_label, None, &params)?;
    let padded = center_pad(&patch, side);

    let target = match target {
        Some(t) => t,
        None => {
            let mut views = Array5::zeros((1, 3, side, side, side));
            views.index_axis_mut(Axis(0), 0).assign(&padded.channels);
            let features = model.encode(&views, false)?;
            let logits = model.classify_inference(&features);
            let row = logits.row(0);
            let argmax = (0..4)
                .max_by(|a, b| row[*a].partial_cmp(&row[*b]).unwrap())
                .unwrap();
            model.clear_caches();
            GenantGrade::from_index(argmax as u8)?
        }
    };

    let mut cam_source = StageCam {
        network: &mut model,
        stage,
    };
    let attention = grad_cam(&mut cam_source, &padded, target)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let overlays = export_overlay(
        &padded,
        &attention,
        slice_axis,
        None,
        OverlayStyle::default(),
        out_dir,
    )?;
    let attn_path = out_dir.join(format!(
        "attention_label{vertebra_label:02}_{target}.nii.gz"
    ));
    let attn_grid = VolumeGrid::new(
        attention.values.clone(),
        [padded.spacing; 3],
        crate::dataset::ValueKind::Normalized,
    )?;
    crate::dataset::write_volume(&attn_path, &attn_grid)?;

    Ok(GradCamOutcome {
        attention,
        target,
        overlays,
        attention_volume_path: attn_path,
    })
}
