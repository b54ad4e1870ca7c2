//! The grading network: 3D SE-residual feature extractor, a single-linear
//! projection head normalized onto the unit sphere, and a single-linear
//! classification head that reads encoder features through a gradient
//! barrier — its loss can never update the encoder.

use ndarray::{Array2, Array5};

use crate::dataset::GenantGrade;
use crate::error::{Error, Result};
use crate::nn::{BufferVisitor, EncoderSpec, Linear, ParamVisitor, SeResNet3d};
use crate::seeding;

/// Dimension of the contrastive embedding space.
pub const EMBED_DIM: usize = 128;

/// Per-view unit embeddings plus grade labels and patch identities; the
/// domain of the supervised contrastive loss.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    /// `[V, dim]`, rows unit-norm.
    pub embeddings: Array2<f64>,
    pub labels: Vec<GenantGrade>,
    /// Views of one patch share an identity.
    pub patch_ids: Vec<u64>,
}

impl EmbeddingBatch {
    pub fn new(
        embeddings: Array2<f64>,
        labels: Vec<GenantGrade>,
        patch_ids: Vec<u64>,
    ) -> Result<Self> {
        let v = embeddings.shape()[0];
        if labels.len() != v || patch_ids.len() != v {
            return Err(Error::data(format!(
                "embedding batch size mismatch: {v} rows, {} labels, {} ids",
                labels.len(),
                patch_ids.len()
            )));
        }
        if v % 2 != 0 {
            return Err(Error::data(format!(
                "embedding batch must hold view pairs; got odd V = {v}"
            )));
        }
        let batch = EmbeddingBatch {
            embeddings,
            labels,
            patch_ids,
        };
        batch.check_unit_norms(1e-5)?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_unit_norms(&self, tolerance: f64) -> Result<()> {
        for (i, row) in self.embeddings.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > tolerance {
                return Err(Error::numerical(format!(
                    "embedding {i} has norm {norm}, expected 1 within {tolerance}"
                )));
            }
        }
        Ok(())
    }
}

/// Raw classification scores, one row of 4 per view.
#[derive(Debug, Clone)]
pub struct LogitBatch {
    /// `[V, 4]`
    pub logits: Array2<f64>,
}

impl LogitBatch {
    pub fn new(logits: Array2<f64>) -> Result<Self> {
        if logits.shape()[1] != GenantGrade::COUNT {
            return Err(Error::data(format!(
                "logit batch must have {} columns, got {}",
                GenantGrade::COUNT,
                logits.shape()[1]
            )));
        }
        Ok(LogitBatch { logits })
    }

    pub fn softmax(&self) -> Array2<f64> {
        let mut out = self.logits.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }
}

struct ProjectionCache {
    /// Pre-normalization norms per row.
    norms: Vec<f32>,
    /// Normalized outputs.
    unit: Array2<f32>,
}

pub struct GradingNetwork {
    pub encoder: SeResNet3d,
    projection: Linear,
    classification: Linear,
    proj_cache: Option<ProjectionCache>,
    /// Count of zero-norm projection fallbacks (practically unreachable).
    pub zero_norm_fallbacks: u64,
}

impl GradingNetwork {
    pub fn new(spec: EncoderSpec, seed: u64) -> Self {
        let feature_dim = spec.feature_dim();
        let mut rng = seeding::rng_at(seed, seeding::tag("heads-init"));
        GradingNetwork {
            encoder: SeResNet3d::new(spec, seed),
            projection: Linear::new(feature_dim, EMBED_DIM, false, &mut rng),
            // classification bias starts at zero
            classification: Linear::new(feature_dim, GenantGrade::COUNT, true, &mut rng),
            proj_cache: None,
            zero_norm_fallbacks: 0,
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.encoder.spec
    }

    fn check_views(&self, views: &Array5<f32>) -> Result<()> {
        let s = self.encoder.spec.input_side;
        let shape = views.shape();
        if shape[1] != self.encoder.spec.in_channels
            || shape[2] != s
            || shape[3] != s
            || shape[4] != s
        {
            return Err(Error::data(format!(
                "encoder expects [N, {}, {s}, {s}, {s}] views, got {shape:?}",
                self.encoder.spec.in_channels
            )));
        }
        Ok(())
    }

    /// Encoder forward: pooled features, batch order preserved.
    pub fn encode(&mut self, views: &Array5<f32>, train: bool) -> Result<Array2<f32>> {
        self.check_views(views)?;
        let features = self.encoder.forward(views, train);
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "encoder produced non-finite features".to_string(),
            ));
        }
        Ok(features)
    }

    /// Projection head: affine map to 128-d followed by normalization onto
    /// the unit sphere. Zero-norm rows fall back to the first basis vector.
    pub fn project(&mut self, features: &Array2<f32>) -> Result<Array2<f32>> {
        if features.shape()[1] != self.projection.in_dim() {
            return Err(Error::data(format!(
                "projection expects {} features, got {}",
                self.projection.in_dim(),
                features.shape()[1]
            )));
        }
        let raw = self.projection.forward(features);
        let mut unit = raw.clone();
        let mut norms = Vec::with_capacity(raw.shape()[0]);
        for mut row in unit.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            } else {
                self.zero_norm_fallbacks += 1;
                row.fill(0.0);
                row[0] = 1.0;
            }
            norms.push(norm);
        }
        self.proj_cache = Some(ProjectionCache {
            norms,
            unit: unit.clone(),
        });
        Ok(unit)
    }

    /// Classification head. The returned logits derive from features read as
    /// constants: backpropagation through this head never reaches the
    /// encoder (see `backward_from`).
    pub fn classify(&mut self, features: &Array2<f32>) -> Result<Array2<f32>> {
        if features.shape()[1] != self.classification.in_dim() {
            return Err(Error::data(format!(
                "classification expects {} features, got {}",
                self.classification.in_dim(),
                features.shape()[1]
            )));
        }
        Ok(self.classification.forward(features))
    }

    /// Inference-only classification (no caches touched).
    pub fn classify_inference(&self, features: &Array2<f32>) -> Array2<f32> {
        self.classification.forward_inference(features)
    }

    /// Training forward: one encoder pass over all views, then both heads.
    pub fn forward_training(
        &mut self,
        views: &Array5<f32>,
        labels: &[GenantGrade],
        patch_ids: &[u64],
    ) -> Result<(EmbeddingBatch, LogitBatch)> {
        let features = self.encode(views, true)?;
        let unit = self.project(&features)?;
        let logits = self.classify(&features)?;
        let embeddings = unit.mapv(f64::from);
        let batch = EmbeddingBatch::new(embeddings, labels.to_vec(), patch_ids.to_vec())?;
        let logits = LogitBatch::new(logits.mapv(f64::from))?;
        Ok((batch, logits))
    }

    /// Backward pass from loss gradients. `dembeddings` is the gradient wrt
    /// the normalized projection outputs; `dlogits` wrt the classification
    /// logits. The classification gradient updates only the head itself
    /// (gradient barrier); encoder and projection receive gradient solely
    /// from the embedding path.
    pub fn backward_from(&mut self, dembeddings: &Array2<f32>, dlogits: &Array2<f32>) {
        // Head gradient, input gradient discarded: the barrier.
        let _ = self.classification.backward(dlogits);

        let cache = self.proj_cache.take().expect("forward before backward");
        // Chain through row normalization: dL/dy = (g - (z . g) z) / ||y||.
        let mut draw = Array2::<f32>::zeros(dembeddings.raw_dim());
        for (i, mut out_row) in draw.rows_mut().into_iter().enumerate() {
            let norm = cache.norms[i];
            if norm <= 0.0 {
                continue; // fallback rows carry no gradient
            }
            let z = cache.unit.row(i);
            let g = dembeddings.row(i);
            let dot = z.dot(&g);
            for (o, (zv, gv)) in out_row.iter_mut().zip(z.iter().zip(g.iter())) {
                *o = (gv - dot * zv) / norm;
            }
        }
        let dfeatures = self.projection.backward(&draw);
        let _ = self.encoder.backward(&dfeatures);
    }

    /// Gradient of a logit combination wrt the pooled features, without
    /// touching any parameter gradient (used by attribution).
    pub fn head_input_gradient(&self, dlogits: &Array2<f32>) -> Array2<f32> {
        self.classification.backward_data_only(dlogits)
    }

    /// Reset all accumulated parameter gradients.
    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_: &str, _p: &mut [f32], g: &mut [f32]| {
            for v in g.iter_mut() {
                *v = 0.0;
            }
        });
    }

    pub fn visit_params(&mut self, v: &mut dyn ParamVisitor) {
        self.encoder.visit_params(v);
        self.projection.visit_params("projection", v);
        self.classification.visit_params("classification", v);
    }

    pub fn visit_buffers(&mut self, v: &mut dyn BufferVisitor) {
        self.encoder.visit_buffers(v);
    }

    /// Snapshot of all trainable parameters, keyed by name.
    pub fn param_snapshot(&mut self) -> std::collections::BTreeMap<String, Vec<f32>> {
        let mut out = std::collections::BTreeMap::new();
        self.visit_params(&mut |name: &str, p: &mut [f32], _g: &mut [f32]| {
            out.insert(name.to_string(), p.to_vec());
        });
        out
    }

    pub fn clear_caches(&mut self) {
        self.encoder.clear_caches();
        self.projection.clear_cache();
        self.classification.clear_cache();
        self.proj_cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    pub(crate) fn tiny_spec() -> EncoderSpec {
        EncoderSpec {
            in_channels: 3,
            input_side: 16,
            width_scale: 0.0625,
            stage_blocks: [1, 1, 1, 1],
            se_reduction: 4,
            se_enabled: true,
        }
    }

    fn random_views(n: usize, side: usize, seed: u64) -> Array5<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = Array5::zeros((n, 3, side, side, side));
        for x in v.iter_mut() {
            *x = rng.random_range(0.0..1.0);
        }
        v
    }

    #[test]
    fn encode_preserves_batch_order_and_count() {
        let mut net = GradingNetwork::new(tiny_spec(), 1);
        let views = random_views(4, 16, 2);
        let f = net.encode(&views, false).unwrap();
        assert_eq!(f.shape(), [4, tiny_spec().feature_dim()]);

        // permuting the batch permutes outputs identically (eval mode)
        let mut permuted = views.clone();
        permuted
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&views.index_axis(ndarray::Axis(0), 3));
        permuted
            .index_axis_mut(ndarray::Axis(0), 3)
            .assign(&views.index_axis(ndarray::Axis(0), 0));
        let g = net.encode(&permuted, false).unwrap();
        for (a, b) in f.row(0).iter().zip(g.row(3).iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in f.row(3).iter().zip(g.row(0).iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_zero_input_yields_finite_features() {
        let mut net = GradingNetwork::new(tiny_spec(), 3);
        let views = Array5::zeros((2, 3, 16, 16, 16));
        let f = net.encode(&views, false).unwrap();
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_rejects_malformed_shape() {
        let mut net = GradingNetwork::new(tiny_spec(), 4);
        let views = random_views(2, 8, 5);
        assert!(net.encode(&views, false).is_err());
    }

    #[test]
    fn projection_outputs_are_unit_norm() {
        let mut net = GradingNetwork::new(tiny_spec(), 5);
        let views = random_views(6, 16, 6);
        let f = net.encode(&views, false).unwrap();
        let z = net.project(&f).unwrap();
        assert_eq!(z.shape(), [6, EMBED_DIM]);
        for row in z.rows() {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
        }
    }

    #[test]
    fn projection_depends_continuously_on_features() {
        let mut net = GradingNetwork::new(tiny_spec(), 7);
        let views = random_views(2, 16, 8);
        let f = net.encode(&views, false).unwrap();
        let z0 = net.project(&f).unwrap();
        let mut f2 = f.clone();
        for v in f2.iter_mut() {
            *v += 1e-6;
        }
        let z1 = net.project(&f2).unwrap();
        let max_delta = z0
            .iter()
            .zip(z1.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_delta <= 1e-3, "delta {max_delta}");
    }

    #[test]
    fn project_and_classify_reject_dim_mismatch() {
        let mut net = GradingNetwork::new(tiny_spec(), 9);
        let bad = Array2::zeros((2, 7));
        assert!(net.project(&bad).is_err());
        assert!(net.classify(&bad).is_err());
    }

    #[test]
    fn forward_training_shapes_and_pairing() {
        let mut net = GradingNetwork::new(tiny_spec(), 10);
        // 4 patches -> 8 views, two views of a patch adjacent
        let views = random_views(8, 16, 11);
        let labels: Vec<GenantGrade> = [0u8, 0, 1, 1, 2, 2, 3, 3]
            .iter()
            .map(|g| GenantGrade::from_index(*g).unwrap())
            .collect();
        let ids = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let (emb, logits) = net.forward_training(&views, &labels, &ids).unwrap();
        assert_eq!(emb.embeddings.shape(), [8, EMBED_DIM]);
        assert_eq!(logits.logits.shape(), [8, 4]);
        emb.check_unit_norms(1e-5).unwrap();
        for pair in emb.patch_ids.chunks(2) {
            assert_eq!(pair[0], pair[1]);
        }
        let probs = logits.softmax();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_training_runs_the_encoder_exactly_once() {
        let mut net = GradingNetwork::new(tiny_spec(), 11);
        let views = random_views(4, 16, 12);
        let labels = vec![
            GenantGrade::G0,
            GenantGrade::G0,
            GenantGrade::G1,
            GenantGrade::G1,
        ];
        let ids = vec![0, 0, 1, 1];
        let before = net.encoder.forward_count;
        let _ = net.forward_training(&views, &labels, &ids).unwrap();
        assert_eq!(net.encoder.forward_count, before + 1);
    }

    #[test]
    fn zero_norm_projection_falls_back_to_a_unit_basis_vector() {
        let mut net = GradingNetwork::new(tiny_spec(), 13);
        // zero the projection map so every row projects to the zero vector
        net.visit_params(&mut |name: &str, p: &mut [f32], _g: &mut [f32]| {
            if name.starts_with("projection") {
                for v in p.iter_mut() {
                    *v = 0.0;
                }
            }
        });
        let features = Array2::<f32>::zeros((3, tiny_spec().feature_dim()));
        let unit = net.project(&features).unwrap();
        assert_eq!(net.zero_norm_fallbacks, 3);
        for row in unit.rows() {
            assert_eq!(row[0], 1.0);
            assert!(row.iter().skip(1).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn embedding_batch_rejects_odd_or_non_unit() {
        let mut rows = Array2::<f64>::zeros((2, 4));
        rows[[0, 0]] = 1.0;
        rows[[1, 1]] = 0.5; // not unit
        let labels = vec![GenantGrade::G0, GenantGrade::G1];
        let err = EmbeddingBatch::new(rows, labels.clone(), vec![0, 1]);
        assert!(err.is_err());

        let mut one = Array2::<f64>::zeros((1, 4));
        one[[0, 0]] = 1.0;
        assert!(EmbeddingBatch::new(one, vec![GenantGrade::G0], vec![0]).is_err());
    }
}
