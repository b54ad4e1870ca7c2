//! Checkpoint files: versioned header, full parameter/optimizer/sampler
//! state and metric history. Reloading resumes bit-identical training on the
//! same platform; loading against a mismatched network spec fails loudly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::GradingNetwork;
use crate::objective::{SgdState, StepReport};

const MAGIC: &[u8; 8] = b"VFGCKPT\0";
const VERSION: u32 = 1;

/// Per-epoch summary kept in the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_supcon: f64,
    pub mean_ce: f64,
    pub steps: Vec<StepReport>,
    /// Present on evaluation epochs.
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub macro_f1: f64,
    pub auc_roc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Mean within-class cosine similarity of test-set embeddings.
    pub within_class_cosine: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: BTreeMap<String, Vec<f32>>,
    pub buffers: BTreeMap<String, Vec<f32>>,
    pub velocity: BTreeMap<String, Vec<f32>>,
    /// Sampler batches emitted so far (replayed on resume).
    pub batches_emitted: u64,
    pub history: Vec<EpochRecord>,
    /// Within-class cosine of test embeddings at initialization.
    pub initial_within_class_cosine: Option<f64>,
    pub best_macro_f1: Option<f64>,
}

impl Checkpoint {
    /// Capture the full training state.
    pub fn capture(
        config: &RunConfig,
        model: &mut GradingNetwork,
        sgd: &SgdState,
        epoch: usize,
        batches_emitted: u64,
        history: Vec<EpochRecord>,
        initial_within_class_cosine: Option<f64>,
        best_macro_f1: Option<f64>,
    ) -> Self {
        let mut params = BTreeMap::new();
        model.visit_params(&mut |name: &str, p: &mut [f32], _g: &mut [f32]| {
            params.insert(name.to_string(), p.to_vec());
        });
        let mut buffers = BTreeMap::new();
        model.visit_buffers(&mut BufferCollector(&mut buffers));
        Checkpoint {
            config: config.clone(),
            epoch,
            params,
            buffers,
            velocity: sgd.velocity.clone(),
            batches_emitted,
            history,
            initial_within_class_cosine,
            best_macro_f1,
        }
    }

    /// Write all stored state into a freshly built model. Every parameter
    /// and buffer name/shape must match the model exactly.
    pub fn restore(&self, model: &mut GradingNetwork) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        let mut mismatched: Vec<String> = Vec::new();
        let mut seen = 0usize;
        model.visit_params(&mut |name: &str, p: &mut [f32], _g: &mut [f32]| match self
            .params
            .get(name)
        {
            Some(stored) if stored.len() == p.len() => {
                p.copy_from_slice(stored);
                seen += 1;
            }
            Some(_) => mismatched.push(name.to_string()),
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() || !mismatched.is_empty() || seen != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint does not match the configured network \
                 (missing: {missing:?}, shape-mismatched: {mismatched:?}, \
                 stored {} tensors, model consumed {seen})",
                self.params.len()
            )));
        }

        let mut buf_err: Vec<String> = Vec::new();
        {
            let mut writer = BufferWriter {
                stored: &self.buffers,
                errors: &mut buf_err,
            };
            model.visit_buffers(&mut writer);
        }
        if !buf_err.is_empty() {
            return Err(Error::config(format!(
                "checkpoint buffer mismatch: {buf_err:?}"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body =
            bincode::serialize(self).map_err(|e| Error::data(format!("checkpoint encode: {e}")))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(MAGIC).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&VERSION.to_le_bytes())
                .map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&body).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::data(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let mut ver = [0u8; 4];
        f.read_exact(&mut ver).map_err(|e| Error::io(path, e))?;
        let version = u32::from_le_bytes(ver);
        if version != VERSION {
            return Err(Error::data(format!(
                "{}: unsupported checkpoint version {version} (expected {VERSION})",
                path.display()
            )));
        }
        let mut body = Vec::new();
        f.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        bincode::deserialize(&body).map_err(|e| Error::data(format!("checkpoint decode: {e}")))
    }
}

struct BufferCollector<'a>(&'a mut BTreeMap<String, Vec<f32>>);

impl crate::nn::BufferVisitor for BufferCollector<'_> {
    fn visit(&mut self, name: &str, buf: &mut [f32]) {
        self.0.insert(name.to_string(), buf.to_vec());
    }
}

struct BufferWriter<'a> {
    stored: &'a BTreeMap<String, Vec<f32>>,
    errors: &'a mut Vec<String>,
}

impl crate::nn::BufferVisitor for BufferWriter<'_> {
    fn visit(&mut self, name: &str, buf: &mut [f32]) {
        match self.stored.get(name) {
            Some(v) if v.len() == buf.len() => buf.copy_from_slice(v),
            _ => self.errors.push(name.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderSpec;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.network = EncoderSpec {
            input_side: 16,
            width_scale: 0.0625,
            stage_blocks: [1, 1, 1, 1],
            se_reduction: 4,
            ..EncoderSpec::default()
        };
        cfg.augment.canonical_side = 16;
        cfg
    }

    #[test]
    fn save_load_restore_roundtrip() {
        let cfg = tiny_cfg();
        let mut model = GradingNetwork::new(cfg.network, 42);
        let sgd = SgdState::new();
        let ckpt = Checkpoint::capture(&cfg, &mut model, &sgd, 3, 12, Vec::new(), Some(0.5), None);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.batches_emitted, 12);
        assert_eq!(loaded.initial_within_class_cosine, Some(0.5));

        // restoring into a fresh model reproduces parameters bitwise
        let mut fresh = GradingNetwork::new(cfg.network, 999);
        loaded.restore(&mut fresh).unwrap();
        assert_eq!(fresh.param_snapshot(), model.param_snapshot());
    }

    #[test]
    fn mismatched_spec_fails_loudly() {
        let cfg = tiny_cfg();
        let mut model = GradingNetwork::new(cfg.network, 1);
        let ckpt = Checkpoint::capture(
            &cfg,
            &mut model,
            &SgdState::new(),
            0,
            0,
            Vec::new(),
            None,
            None,
        );
        let mut other_spec = cfg.network;
        other_spec.width_scale = 0.125;
        let mut other = GradingNetwork::new(other_spec, 1);
        let err = ckpt.restore(&mut other).unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");
    }

    #[test]
    fn rejects_corrupt_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
