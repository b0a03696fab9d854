//! Pipeline configuration: one JSON document drives every stage.
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. Each artifact written to disk embeds a hash of the config
//! fields it depends on; loaders refuse artifacts whose hash does not
//! match the active config.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// FNV-1a 64-bit. Stable, dependency-free, good enough for config identity.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Combine a label and values into a derived seed.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(label.len() + 16);
    buf.extend_from_slice(&master.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    fnv64(&buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    VanillaGcn,
    ClusterGcn,
    Sgcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    Contrastive,
}

/// Backbone selection. The artifact ships deterministic mocks; a named
/// pretrained network is a configuration the artifact recognizes but
/// cannot satisfy without weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneConfig {
    /// Fixed pseudo-random linear projection of 32x32 pixel patches,
    /// followed by ReLU. `channels` is the output depth C.
    MockProj { channels: usize, seed: u64 },
    /// Per-channel mean of each 32x32 patch (C = 3). Mostly for tests.
    PatchMean,
    /// Placeholder for an external pretrained backbone; extraction fails
    /// with a configuration error unless weights are supplied out of band.
    Pretrained { name: String },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::MockProj {
            channels: 512,
            seed: 0x5712,
        }
    }
}

/// Every tunable in the pipeline. Serialized as JSON with unknown keys
/// rejected; CLI flags override file values which override defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub backbone: BackboneConfig,
    /// Frame sampling rate in frames per second.
    pub rate_hz: f64,
    /// Cap on sampled frames per video; keeps graph size bounded
    /// (edges grow quadratically with frame count).
    pub max_frames: usize,
    /// Sliding-window scales as (window, stride) pairs over the feature grid.
    pub scales: Vec<(usize, usize)>,
    /// Weighted edges (cosine similarity) vs. unit weights.
    pub weighted: bool,
    pub operator_kind: OperatorKind,
    /// Number of stacked GNN layers (S).
    pub num_layers: usize,
    /// Propagation power of the simplified graph convolution (K).
    pub sgcn_power: usize,
    pub aggregator: Aggregator,
    /// Output embedding dimension (D).
    pub embed_dim: usize,
    pub loss_kind: LossKind,
    /// Margin for the triplet / contrastive hinge.
    pub margin: f64,
    pub batch_size: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Master seed; every randomized stage derives its own stream from it.
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop after this many epochs without validation-mAP improvement.
    pub patience: usize,
    /// Fraction of training groups held out for validation.
    pub val_ratio: f64,
    /// Fraction of the training split actually used (ablation axis).
    pub train_ratio: f64,
    /// Adjacency matrices stay dense up to this node count.
    pub dense_threshold: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            backbone: BackboneConfig::default(),
            rate_hz: 1.0,
            max_frames: 64,
            scales: vec![(3, 2), (4, 3), (7, 1)],
            weighted: true,
            operator_kind: OperatorKind::VanillaGcn,
            num_layers: 1,
            sgcn_power: 1,
            aggregator: Aggregator::Mean,
            embed_dim: 512,
            loss_kind: LossKind::Triplet,
            margin: 0.5,
            batch_size: 128,
            lr: 1e-4,
            seed: 42,
            max_epochs: 30,
            patience: 5,
            val_ratio: 0.15,
            train_ratio: 1.0,
            dense_threshold: 2048,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate_hz <= 0.0 {
            return Err(Error::Config("rate_hz must be positive".into()));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be at least 1".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale required".into()));
        }
        for &(w, s) in &self.scales {
            if w == 0 || s == 0 {
                return Err(Error::Config(format!("bad scale ({w}, {s})")));
            }
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.sgcn_power == 0 {
            return Err(Error::Config("sgcn_power must be at least 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::Config("margin must be nonnegative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_ratio) {
            return Err(Error::Config("val_ratio must be in [0, 1)".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(Error::Config("train_ratio must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Backbone output channel count for the configured backbone.
    pub fn backbone_channels(&self) -> usize {
        match &self.backbone {
            BackboneConfig::MockProj { channels, .. } => *channels,
            BackboneConfig::PatchMean => 3,
            BackboneConfig::Pretrained { .. } => 512,
        }
    }

    fn backbone_name(&self) -> String {
        match &self.backbone {
            BackboneConfig::MockProj { channels, seed } => format!("mockproj{channels}s{seed}"),
            BackboneConfig::PatchMean => "patchmean".into(),
            BackboneConfig::Pretrained { name } => name.clone(),
        }
    }

    /// Hash of the fields frame extraction depends on. Keys the feature cache.
    pub fn preprocess_hash(&self) -> u64 {
        let repr = format!(
            "pre|{}|{}|{}",
            self.backbone_name(),
            self.rate_hz,
            self.max_frames
        );
        fnv64(repr.as_bytes())
    }

    /// Hash of the fields graph construction depends on (includes ingest).
    pub fn graph_hash(&self) -> u64 {
        let repr = format!(
            "graph|{:016x}|{:?}|{}",
            self.preprocess_hash(),
            self.scales,
            self.weighted
        );
        fnv64(repr.as_bytes())
    }

    /// Hash of everything a trained model and its embeddings depend on.
    pub fn model_hash(&self) -> u64 {
        let repr = format!(
            "model|{:016x}|{:?}|{}|{}|{:?}|{}|{:?}|{}|{}|{}|{}|{}",
            self.graph_hash(),
            self.operator_kind,
            self.num_layers,
            self.sgcn_power,
            self.aggregator,
            self.embed_dim,
            self.loss_kind,
            self.margin,
            self.batch_size,
            self.lr,
            self.seed,
            self.train_ratio,
        );
        fnv64(repr.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = PipelineConfig::default();
        assert_eq!(c.scales, vec![(3, 2), (4, 3), (7, 1)]);
        assert_eq!(c.margin, 0.5);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.num_layers, 1);
        assert!(c.weighted);
        assert_eq!(c.embed_dim, 512);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let res: std::result::Result<PipelineConfig, _> =
            serde_json::from_str(r#"{"margin": 0.5, "no_such_key": 1}"#);
        assert!(res.is_err());
    }

    #[test]
    fn stage_hashes_ignore_unrelated_fields() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.lr = 5e-4;
        // learning rate does not touch extraction or graphs
        assert_eq!(a.preprocess_hash(), b.preprocess_hash());
        assert_eq!(a.graph_hash(), b.graph_hash());
        assert_ne!(a.model_hash(), b.model_hash());

        let mut c = a.clone();
        c.weighted = false;
        assert_eq!(a.preprocess_hash(), c.preprocess_hash());
        assert_ne!(a.graph_hash(), c.graph_hash());
    }

    #[test]
    fn fnv_is_stable() {
        // frozen reference value of FNV-1a 64 over "hello"
        assert_eq!(fnv64(b"hello"), 0xa430d84680aabd0b);
    }
}
