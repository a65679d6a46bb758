//! Run configuration, loadable from JSON with every field optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, GateKind};
use crate::metrics::NmiVariant;

/// Which samples form the negative set of the contrastive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorScope {
    #[default]
    Batch,
    /// Every sample of the dataset; only allowed up to [`FULL_SCOPE_LIMIT`] samples.
    Full,
}

pub const FULL_SCOPE_LIMIT: usize = 2000;

/// Numeric precision of the stored parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub tau: f64,
    pub lambda: f64,
    pub d_psi: usize,
    pub d_phi: usize,
    pub depth_u: usize,
    pub knn_k: usize,
    pub lr: f64,
    pub dropout: f64,
    pub base_channels: usize,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
    pub no_dshf: bool,
    pub no_akcl: bool,
    pub graph_refresh_epochs: usize,
    pub denominator_scope: DenominatorScope,
    /// Epoch interval for metrics during training; 0 disables.
    pub eval_every: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub precision: Precision,
    pub nmi_variant: NmiVariant,
    pub can_gate: GateKind,
    pub can_reduction: usize,
    pub normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            batch_size: 256,
            pretrain_epochs: 200,
            finetune_epochs: 200,
            tau: 0.5,
            lambda: 1.0,
            d_psi: 512,
            d_phi: 128,
            depth_u: 4,
            knn_k: 10,
            lr: 3e-4,
            dropout: 0.1,
            base_channels: 32,
            hidden_dims: vec![500, 500, 2000],
            seed: 0,
            no_dshf: false,
            no_akcl: false,
            graph_refresh_epochs: 0,
            denominator_scope: DenominatorScope::Batch,
            eval_every: 10,
            kmeans_restarts: 10,
            kmeans_max_iter: 300,
            precision: Precision::F64,
            nmi_variant: NmiVariant::Geometric,
            can_gate: GateKind::Sigmoid,
            can_reduction: 4,
            normalize: true,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn fusion_config(&self, views: usize) -> FusionConfig {
        FusionConfig {
            views,
            latent_dim: self.d_psi,
            depth: self.depth_u,
            base_channels: self.base_channels,
            reduction: self.can_reduction,
            gate: self.can_gate,
        }
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.d_phi == 0 || self.knn_k == 0 {
            return bad("d_phi and knn_k must be positive".into());
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !self.no_dshf {
            self.fusion_config(1).validate()?;
        }
        Ok(())
    }

    /// Checks the constraints that involve the dataset size.
    pub fn validate_for(&self, n_samples: usize) -> Result<()> {
        self.validate()?;
        if !self.no_akcl && self.finetune_epochs > 0 && self.knn_k >= n_samples {
            return Err(Error::Config(format!(
                "knn_k = {} must be smaller than the sample count {n_samples}",
                self.knn_k
            )));
        }
        if self.denominator_scope == DenominatorScope::Full && n_samples > FULL_SCOPE_LIMIT {
            return Err(Error::Config(format!(
                "full denominator scope is limited to {FULL_SCOPE_LIMIT} samples, dataset has {n_samples}"
            )));
        }
        Ok(())
    }
}
