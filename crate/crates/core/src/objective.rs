//! Training objective: supervised contrastive loss over unit embeddings,
//! cross-entropy on the detached classification head, the step-decay SGD
//! schedule, and the composed training step.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::GenantGrade;
use crate::error::{Error, Result};
use crate::network::{EmbeddingBatch, GradingNetwork, LogitBatch};

/// Contrastive / total loss configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Softmax temperature of the contrastive loss.
    pub temperature: f64,
    /// Sum anchor contributions (the published form). Set to average over
    /// anchors instead for learning-rate comparability across batch sizes.
    pub mean_over_anchors: bool,
    pub supcon_weight: f64,
    pub ce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            mean_over_anchors: false,
            supcon_weight: 1.0,
            ce_weight: 1.0,
        }
    }
}

/// SGD schedule; defaults follow the published training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    /// Epochs at which the learning rate multiplies by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_epochs: vec![800, 900],
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 1000,
        }
    }
}

/// Piecewise-constant learning rate at a given epoch.
pub fn lr_at(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    let decays = cfg.decay_epochs.iter().filter(|e| epoch >= **e).count();
    cfg.base_lr * cfg.decay_factor.powi(decays as i32)
}

/// Result of the supervised contrastive loss: value, gradient wrt the
/// (unit) embeddings, and anchor bookkeeping.
#[derive(Debug, Clone)]
pub struct SupConOutput {
    pub loss: f64,
    /// dL/dz, same shape as the embeddings.
    pub grad: Array2<f64>,
    /// Anchors that contributed (had at least one positive).
    pub anchors_used: usize,
    /// Anchors skipped for lack of positives ("no positives" warning count).
    pub anchors_without_positives: usize,
}

/// Supervised contrastive loss over all views in the batch.
///
/// For each anchor `i`, the positive set is every other same-class view;
/// each positive contributes `log softmax(sim(z_i, .)/tau)` restricted to
/// `k != i`, averaged over the positive set and negated. Anchors without
/// positives are skipped. The log-sum is max-stabilized.
pub fn supcon_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<SupConOutput> {
    if cfg.temperature <= 0.0 {
        return Err(Error::config(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let v = batch.len();
    if v < 2 {
        return Err(Error::data(format!(
            "contrastive loss needs at least 2 views, got {v}"
        )));
    }
    batch.check_unit_norms(1e-4)?;

    let z = &batch.embeddings;
    let tau = cfg.temperature;
    // Scaled similarity matrix.
    let sims = z.dot(&z.t()) / tau;

    let mut total = 0.0f64;
    let mut coeff = Array2::<f64>::zeros((v, v)); // dL/dsims (scaled by 1/tau later via chain)
    let mut anchors_used = 0usize;
    let mut anchors_empty = 0usize;

    for i in 0..v {
        let positives: Vec<usize> = (0..v)
            .filter(|p| *p != i && batch.labels[*p] == batch.labels[i])
            .collect();
        if positives.is_empty() {
            anchors_empty += 1;
            continue;
        }
        anchors_used += 1;

        let mut max = f64::NEG_INFINITY;
        for k in 0..v {
            if k != i {
                max = max.max(sims[[i, k]]);
            }
        }
        let mut denom = 0.0f64;
        for k in 0..v {
            if k != i {
                denom += (sims[[i, k]] - max).exp();
            }
        }
        let log_denom = max + denom.ln();

        let p_count = positives.len() as f64;
        for p in &positives {
            total -= (sims[[i, *p]] - log_denom) / p_count;
        }

        // dL_i/dsims[i][j] = (q_ij - [j in P]/|P|), with q the softmax over k != i
        for j in 0..v {
            if j == i {
                continue;
            }
            let q = (sims[[i, j]] - log_denom).exp();
            coeff[[i, j]] = q;
        }
        for p in &positives {
            coeff[[i, *p]] -= 1.0 / p_count;
        }
    }

    let scale = if cfg.mean_over_anchors && anchors_used > 0 {
        1.0 / anchors_used as f64
    } else {
        1.0
    };
    total *= scale;

    // dL/dz_m = (1/tau) * sum_j (coeff[m][j] + coeff[j][m]) z_j, scaled.
    let sym = (&coeff + &coeff.t()) * (scale / tau);
    let grad = sym.dot(z);

    Ok(SupConOutput {
        loss: total,
        grad,
        anchors_used,
        anchors_without_positives: anchors_empty,
    })
}

/// Cross-entropy output: mean loss and gradient wrt logits.
#[derive(Debug, Clone)]
pub struct CrossEntropyOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Mean `-log softmax(logits)[label]` over views, max-stabilized.
pub fn cross_entropy(logits: &LogitBatch, labels: &[GenantGrade]) -> Result<CrossEntropyOutput> {
    let v = logits.logits.shape()[0];
    if labels.len() != v {
        return Err(Error::data(format!(
            "cross entropy: {v} logit rows but {} labels",
            labels.len()
        )));
    }
    if v == 0 {
        return Err(Error::data("cross entropy on an empty batch".to_string()));
    }
    let mut total = 0.0f64;
    let mut grad = logits.softmax();
    for (i, label) in labels.iter().enumerate() {
        let row = logits.logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<f64>().ln();
        total += lse - row[label.index()];
        grad[[i, label.index()]] -= 1.0;
    }
    let vf = v as f64;
    Ok(CrossEntropyOutput {
        loss: total / vf,
        grad: grad / vf,
    })
}

/// SGD momentum state, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    pub velocity: BTreeMap<String, Vec<f32>>,
}

impl SgdState {
    pub fn new() -> Self {
        SgdState::default()
    }

    /// One SGD update: `v <- momentum*v + g + weight_decay*p; p <- p - lr*v`.
    /// Gradients are consumed (zeroed). Returns the global gradient norm.
    pub fn step(
        &mut self,
        model: &mut GradingNetwork,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> f64 {
        let mut sq_norm = 0.0f64;
        let velocity = &mut self.velocity;
        model.visit_params(&mut |name: &str, p: &mut [f32], g: &mut [f32]| {
            let vel = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                sq_norm += f64::from(g[i]) * f64::from(g[i]);
                let upd = momentum as f32 * vel[i] + g[i] + weight_decay as f32 * p[i];
                vel[i] = upd;
                p[i] -= lr as f32 * upd;
                g[i] = 0.0;
            }
        });
        sq_norm.sqrt()
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub supcon_loss: f64,
    pub ce_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub anchors_without_positives: usize,
}

/// One composed training step over a balanced batch of views: forward both
/// heads, combine losses (encoder and projection receive gradient from the
/// contrastive term only; the barrier in `GradingNetwork` enforces this),
/// and apply one SGD update.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    model: &mut GradingNetwork,
    views: &ndarray::Array5<f32>,
    labels: &[GenantGrade],
    patch_ids: &[u64],
    loss_cfg: &LossConfig,
    opt_cfg: &OptimizerConfig,
    lr: f64,
    state: &mut SgdState,
) -> Result<StepReport> {
    let (embeddings, logits) = model.forward_training(views, labels, patch_ids)?;
    let supcon = supcon_loss(&embeddings, loss_cfg)?;
    let ce = cross_entropy(&logits, labels)?;
    let total = loss_cfg.supcon_weight * supcon.loss + loss_cfg.ce_weight * ce.loss;
    if !total.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite loss (supcon {}, ce {}) on batch with patch ids {:?}",
            supcon.loss, ce.loss, patch_ids
        )));
    }

    let dembed = (supcon.grad * loss_cfg.supcon_weight).mapv(|v| v as f32);
    let dlogits = (ce.grad * loss_cfg.ce_weight).mapv(|v| v as f32);
    model.backward_from(&dembed, &dlogits);
    let grad_norm = state.step(model, lr, opt_cfg.momentum, opt_cfg.weight_decay);

    Ok(StepReport {
        supcon_loss: supcon.loss,
        ce_loss: ce.loss,
        total_loss: total,
        grad_norm,
        lr,
        anchors_without_positives: supcon.anchors_without_positives,
    })
}
