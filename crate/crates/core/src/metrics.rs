//! Evaluation exactly as reported: binary screening metrics (G0 vs any
//! fracture) via AUCROC / sensitivity / specificity, 4-class macro
//! precision / recall / F1, and ROC-curve emission.

use serde::{Deserialize, Serialize};

use crate::dataset::GenantGrade;
use crate::error::{Error, Result};

/// One evaluated vertebra: truth, the 4 class probabilities and the argmax
/// prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub true_grade: GenantGrade,
    pub probabilities: [f64; 4],
    pub predicted: GenantGrade,
}

impl EvalRecord {
    pub fn new(true_grade: GenantGrade, probabilities: [f64; 4]) -> Result<Self> {
        if probabilities.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::data(format!(
                "probabilities must be non-negative and finite: {probabilities:?}"
            )));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::data(format!(
                "probabilities must sum to 1 within 1e-6, got {sum}"
            )));
        }
        let argmax = probabilities
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        Ok(EvalRecord {
            true_grade,
            probabilities,
            predicted: GenantGrade::from_index(argmax as u8)?,
        })
    }
}

/// How the scalar fracture score is formed from 4-class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinaryScoreRule {
    /// `p(G1) + p(G2) + p(G3)`, i.e. `1 - p(G0)`.
    #[default]
    FracturedMass,
    /// `max(p(G1), p(G2), p(G3))`.
    MaxFractured,
}

/// Collapse one record to (is-fractured truth, fracture score): truth is
/// `grade != G0`, score is the total fractured probability mass.
pub fn collapse_binary(record: &EvalRecord) -> (bool, f64) {
    (
        record.true_grade.is_fractured(),
        record.probabilities[1] + record.probabilities[2] + record.probabilities[3],
    )
}

pub fn binary_score(record: &EvalRecord, rule: BinaryScoreRule) -> f64 {
    match rule {
        BinaryScoreRule::FracturedMass => collapse_binary(record).1,
        BinaryScoreRule::MaxFractured => record.probabilities[1]
            .max(record.probabilities[2])
            .max(record.probabilities[3]),
    }
}

/// Area under the ROC curve by the rank statistic; ties count one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::data(
            "auc: scores/labels length mismatch".to_string(),
        ));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data(
            "auc undefined: both classes must be present".to_string(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());

    // average ranks over tie groups (ranks are 1-based)
    let mut rank = vec![0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for k in i..j {
            rank[order[k]] = avg;
        }
        i = j;
    }

    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(l, _)| **l)
        .map(|(_, r)| *r)
        .sum();
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc)
}

/// An ROC curve: monotone (fpr, tpr) points including both endpoints, plus
/// the trapezoid area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve with thresholds at the distinct scores.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if scores.len() != labels.len() || n_pos == 0 || n_neg == 0 {
        return Err(Error::data(
            "roc undefined: both classes must be present".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    debug_assert_eq!(points.last(), Some(&(1.0, 1.0)));

    let mut auc = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(RocCurve { points, auc })
}

/// Sensitivity and specificity of the argmax predictions collapsed to
/// binary (fractured vs normal).
pub fn sensitivity_specificity(records: &[EvalRecord]) -> Result<(f64, f64)> {
    let (mut tp, mut fnc, mut tn, mut fpc) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        let truth = r.true_grade.is_fractured();
        let pred = r.predicted.is_fractured();
        match (truth, pred) {
            (true, true) => tp += 1,
            (true, false) => fnc += 1,
            (false, false) => tn += 1,
            (false, true) => fpc += 1,
        }
    }
    if tp + fnc == 0 {
        return Err(Error::data(
            "sensitivity undefined: no fractured vertebrae in the set".to_string(),
        ));
    }
    if tn + fpc == 0 {
        return Err(Error::data(
            "specificity undefined: no normal (G0) vertebrae in the set".to_string(),
        ));
    }
    Ok((tp as f64 / (tp + fnc) as f64, tn as f64 / (tn + fpc) as f64))
}

/// Per-class and macro-averaged precision/recall/F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassPrf>,
    /// Classes absent from both truth and prediction (they contribute 0 and
    /// are flagged here).
    pub absent_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro metrics from (truth, prediction) index pairs over `num_classes`.
pub fn macro_prf_from_pairs(truth: &[usize], pred: &[usize], num_classes: usize) -> MacroPrf {
    let confusion = confusion_from_pairs(truth, pred, num_classes);
    let mut per_class = Vec::with_capacity(num_classes);
    let mut absent = Vec::new();
    for c in 0..num_classes {
        let tp = confusion[c][c] as f64;
        let pred_c: usize = (0..num_classes).map(|t| confusion[t][c]).sum();
        let true_c: usize = confusion[c].iter().sum();
        if pred_c == 0 && true_c == 0 {
            absent.push(c);
        }
        let precision = if pred_c > 0 { tp / pred_c as f64 } else { 0.0 };
        let recall = if true_c > 0 { tp / true_c as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassPrf {
            class: c,
            precision,
            recall,
            f1,
        });
    }
    let n = num_classes as f64;
    MacroPrf {
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / n,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / n,
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / n,
        per_class,
        absent_classes: absent,
    }
}

/// Macro metrics over evaluated records (4 Genant classes).
pub fn macro_prf(records: &[EvalRecord], num_classes: usize) -> MacroPrf {
    let truth: Vec<usize> = records.iter().map(|r| r.true_grade.index()).collect();
    let pred: Vec<usize> = records.iter().map(|r| r.predicted.index()).collect();
    macro_prf_from_pairs(&truth, &pred, num_classes)
}

/// `confusion[truth][pred]` counts.
pub fn confusion_from_pairs(
    truth: &[usize],
    pred: &[usize],
    num_classes: usize,
) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (t, p) in truth.iter().zip(pred) {
        m[*t][*p] += 1;
    }
    m
}

/// The full evaluation report emitted by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub vertebrae: usize,
    pub grade_counts: [usize; 4],
    pub auc_roc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub per_class: Vec<ClassPrf>,
    pub absent_classes: Vec<usize>,
    /// `confusion[truth][pred]`
    pub confusion: Vec<Vec<usize>>,
    pub roc: RocCurve,
    pub binary_score_rule: BinaryScoreRule,
}

/// Compute every headline metric over the records.
pub fn evaluate(records: &[EvalRecord], rule: BinaryScoreRule) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::data(
            "evaluation over an empty record set".to_string(),
        ));
    }
    let scores: Vec<f64> = records.iter().map(|r| binary_score(r, rule)).collect();
    let labels: Vec<bool> = records
        .iter()
        .map(|r| r.true_grade.is_fractured())
        .collect();
    let auc = auc_roc(&scores, &labels)?;
    let roc = roc_curve(&scores, &labels)?;
    let (sensitivity, specificity) = sensitivity_specificity(records)?;
    let macro_metrics = macro_prf(records, GenantGrade::COUNT);
    let truth: Vec<usize> = records.iter().map(|r| r.true_grade.index()).collect();
    let pred: Vec<usize> = records.iter().map(|r| r.predicted.index()).collect();
    let mut grade_counts = [0usize; 4];
    for t in &truth {
        grade_counts[*t] += 1;
    }
    Ok(EvalReport {
        vertebrae: records.len(),
        grade_counts,
        auc_roc: auc,
        sensitivity,
        specificity,
        macro_f1: macro_metrics.f1,
        macro_precision: macro_metrics.precision,
        macro_recall: macro_metrics.recall,
        per_class: macro_metrics.per_class,
        absent_classes: macro_metrics.absent_classes,
        confusion: confusion_from_pairs(&truth, &pred, GenantGrade::COUNT),
        roc,
        binary_score_rule: rule,
    })
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "vertebrae evaluated : {}", self.vertebrae)?;
        writeln!(f, "grade counts        : {:?}", self.grade_counts)?;
        writeln!(f, "binary AUCROC       : {:.4}", self.auc_roc)?;
        writeln!(f, "specificity (SPE)   : {:.4}", self.specificity)?;
        writeln!(f, "sensitivity (SEN)   : {:.4}", self.sensitivity)?;
        writeln!(f, "macro-F1            : {:.4}", self.macro_f1)?;
        writeln!(f, "macro-precision     : {:.4}", self.macro_precision)?;
        writeln!(f, "macro-recall        : {:.4}", self.macro_recall)?;
        writeln!(f, "confusion (truth x pred):")?;
        for row in &self.confusion {
            writeln!(f, "  {row:?}")?;
        }
        Ok(())
    }
}

/// Render the ROC curve into a small PNG (white canvas, grey diagonal,
/// dark polyline). Output bytes are deterministic for fixed inputs.
pub fn render_roc_png(curve: &RocCurve, path: &std::path::Path) -> Result<()> {
    const SIDE: u32 = 512;
    const MARGIN: u32 = 32;
    let mut img = image::RgbImage::from_pixel(SIDE, SIDE, image::Rgb([255, 255, 255]));
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let span = (SIDE - 2 * MARGIN) as f64;
        (
            (MARGIN as f64 + x * span).round() as i64,
            (SIDE as f64 - MARGIN as f64 - y * span).round() as i64,
        )
    };
    let mut draw_line = |a: (f64, f64), b: (f64, f64), color: image::Rgb<u8>| {
        let (x0, y0) = to_px(a.0, a.1);
        let (x1, y1) = to_px(b.0, b.1);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (x0 as f64 + t * (x1 - x0) as f64).round() as i64;
            let y = (y0 as f64 + t * (y1 - y0) as f64).round() as i64;
            if (0..SIDE as i64).contains(&x) && (0..SIDE as i64).contains(&y) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    };
    // axes and chance diagonal
    draw_line((0.0, 0.0), (1.0, 0.0), image::Rgb([0, 0, 0]));
    draw_line((0.0, 0.0), (0.0, 1.0), image::Rgb([0, 0, 0]));
    draw_line((0.0, 0.0), (1.0, 1.0), image::Rgb([200, 200, 200]));
    for w in curve.points.windows(2) {
        draw_line(w[0], w[1], image::Rgb([180, 40, 40]));
    }
    img.save(path)
        .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
}
