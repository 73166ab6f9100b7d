//! Pipeline configuration: desk-scale defaults, a plain-text `key = value`
//! file parser, and command-line overrides. Every key documented in the
//! README maps 1:1 onto a field here.

use crate::error::{Error, Result};
use crate::mining::MiningConfig;
use crate::synth::SyntheticSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which triplet-mining regime the training stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningRegime {
    /// Classification-only baseline; no triplet stage.
    None,
    /// Batch OHNM over the whole dataset (M = 1).
    Global,
    /// Batch OHNM inside a random identity partition.
    Random,
    /// Batch OHNM inside a k-means partition of identity centroids.
    Kmeans,
}

impl MiningRegime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "global" => Ok(Self::Global),
            "random" => Ok(Self::Random),
            "kmeans" => Ok(Self::Kmeans),
            other => Err(Error::Config(format!(
                "unknown mining regime {other:?} (none|global|random|kmeans)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Global => "global",
            Self::Random => "random",
            Self::Kmeans => "kmeans",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    // data
    pub seed: u64,
    pub num_identities: u32,
    pub samples_per_identity: (usize, usize),
    pub d_in: usize,
    pub superclusters: usize,
    pub sigma_within: f64,
    pub sigma_between: f64,
    pub label_flip_rate: f64,
    pub noisy_identity_fraction: f64,
    pub holdout_fraction: f64,

    // model
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,

    // optimization
    pub momentum: f64,
    pub cls_learning_rate: f64,
    pub cls_stages: usize,
    pub cls_epochs_per_stage: usize,
    pub cls_batch_size: usize,
    pub triplet_learning_rate: f64,
    pub triplet_stages: usize,
    pub triplet_epochs_per_stage: usize,

    // mining
    pub mining: MiningRegime,
    pub margin: f64,
    pub top_k: usize,
    pub triplet_batch_size: usize,
    pub semi_hard: bool,
    pub subspaces: usize,
    pub joint_softmax: bool,
    pub joint_lambda: f64,
    pub reinit_head: bool,

    // cleaning
    pub cleaning_enabled: bool,
    pub init_subset_fraction: f64,

    // clustering
    pub kmeans_max_iter: usize,
    pub renormalize_centroids: bool,
    pub refresh_partition: bool,

    // evaluation
    pub threshold_steps: usize,
    pub pairs_same: usize,
    pub pairs_diff: usize,
    /// Fraction of identities whose members enter the retrieval index; the
    /// rest become out-of-index queries.
    pub index_identity_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_identities: 1000,
            samples_per_identity: (20, 20),
            d_in: 32,
            superclusters: 10,
            sigma_within: 0.15,
            sigma_between: 0.15,
            label_flip_rate: 0.0,
            noisy_identity_fraction: 0.0,
            holdout_fraction: 0.25,
            hidden_dims: vec![64],
            embed_dim: 16,
            momentum: 0.9,
            cls_learning_rate: 1.0,
            cls_stages: 4,
            cls_epochs_per_stage: 4,
            cls_batch_size: 64,
            triplet_learning_rate: 0.05,
            triplet_stages: 3,
            triplet_epochs_per_stage: 4,
            mining: MiningRegime::Kmeans,
            margin: 0.4,
            top_k: 3,
            triplet_batch_size: 32,
            semi_hard: false,
            subspaces: 10,
            joint_softmax: false,
            joint_lambda: 1.0,
            reinit_head: false,
            cleaning_enabled: false,
            init_subset_fraction: 1.0,
            kmeans_max_iter: 100,
            renormalize_centroids: false,
            refresh_partition: false,
            threshold_steps: 101,
            pairs_same: 2000,
            pairs_diff: 2000,
            index_identity_fraction: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_identities: self.num_identities,
            samples_per_identity: self.samples_per_identity,
            d_in: self.d_in,
            superclusters: self.superclusters,
            sigma_within: self.sigma_within,
            sigma_between: self.sigma_between,
            label_flip_rate: self.label_flip_rate,
            noisy_identity_fraction: self.noisy_identity_fraction,
            seed: self.seed,
        }
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            margin: self.margin,
            top_k: self.top_k,
            batch_size: self.triplet_batch_size,
            semi_hard: self.semi_hard,
        }
    }

    /// Evaluation thresholds: `threshold_steps` points spanning [0, 1].
    pub fn thresholds(&self) -> Vec<f64> {
        let n = self.threshold_steps.max(2);
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    /// Loads a plain-text `key = value` config file ('#' starts a comment).
    pub fn from_kv_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        fn boolean(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("bad bool {value:?} for {key}"))),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "num_identities" => self.num_identities = num(key, value)?,
            "samples_per_identity" => {
                self.samples_per_identity = match value.split_once("..") {
                    Some((lo, hi)) => (num(key, lo)?, num(key, hi)?),
                    None => {
                        let n = num(key, value)?;
                        (n, n)
                    }
                }
            }
            "d_in" => self.d_in = num(key, value)?,
            "superclusters" => self.superclusters = num(key, value)?,
            "sigma_within" => self.sigma_within = num(key, value)?,
            "sigma_between" => self.sigma_between = num(key, value)?,
            "label_flip_rate" => self.label_flip_rate = num(key, value)?,
            "noisy_identity_fraction" => self.noisy_identity_fraction = num(key, value)?,
            "holdout_fraction" => self.holdout_fraction = num(key, value)?,
            "hidden_dims" => {
                self.hidden_dims = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| num(key, v.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "embed_dim" => self.embed_dim = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "cls_learning_rate" => self.cls_learning_rate = num(key, value)?,
            "cls_stages" => self.cls_stages = num(key, value)?,
            "cls_epochs_per_stage" => self.cls_epochs_per_stage = num(key, value)?,
            "cls_batch_size" => self.cls_batch_size = num(key, value)?,
            "triplet_learning_rate" => self.triplet_learning_rate = num(key, value)?,
            "triplet_stages" => self.triplet_stages = num(key, value)?,
            "triplet_epochs_per_stage" => self.triplet_epochs_per_stage = num(key, value)?,
            "mining" => self.mining = MiningRegime::parse(value)?,
            "margin" => self.margin = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "triplet_batch_size" => self.triplet_batch_size = num(key, value)?,
            "semi_hard" => self.semi_hard = boolean(key, value)?,
            "subspaces" => self.subspaces = num(key, value)?,
            "joint_softmax" => self.joint_softmax = boolean(key, value)?,
            "joint_lambda" => self.joint_lambda = num(key, value)?,
            "reinit_head" => self.reinit_head = boolean(key, value)?,
            "cleaning_enabled" => self.cleaning_enabled = boolean(key, value)?,
            "init_subset_fraction" => self.init_subset_fraction = num(key, value)?,
            "kmeans_max_iter" => self.kmeans_max_iter = num(key, value)?,
            "renormalize_centroids" => self.renormalize_centroids = boolean(key, value)?,
            "refresh_partition" => self.refresh_partition = boolean(key, value)?,
            "threshold_steps" => self.threshold_steps = num(key, value)?,
            "pairs_same" => self.pairs_same = num(key, value)?,
            "pairs_diff" => self.pairs_diff = num(key, value)?,
            "index_identity_fraction" => self.index_identity_fraction = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.triplet_batch_size < 2 {
            return Err(Error::Config("triplet_batch_size must be ≥ 2".into()));
        }
        if self.top_k > 2 * self.triplet_batch_size - 2 {
            return Err(Error::Config(format!(
                "top_k {} exceeds candidate pool 2·|B|−2 = {}",
                self.top_k,
                2 * self.triplet_batch_size - 2
            )));
        }
        if self.subspaces == 0 {
            return Err(Error::Config("subspaces must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.index_identity_fraction)
            || self.index_identity_fraction == 0.0
        {
            return Err(Error::Config("index_identity_fraction must be in (0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.init_subset_fraction) || self.init_subset_fraction == 0.0 {
            return Err(Error::Config("init_subset_fraction must be in (0,1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_file_parses_and_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        std::fs::write(
            &path,
            "# comment\nseed = 7\nmining = global\nhidden_dims = 32,16\nsamples_per_identity = 5..9\njoint_softmax = true\n",
        )
        .unwrap();
        let cfg = PipelineConfig::from_kv_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mining, MiningRegime::Global);
        assert_eq!(cfg.hidden_dims, vec![32, 16]);
        assert_eq!(cfg.samples_per_identity, (5, 9));
        assert!(cfg.joint_softmax);
        // untouched keys keep defaults
        assert_eq!(cfg.margin, 0.4);
        assert_eq!(cfg.top_k, 3);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("mining", "sideways").is_err());
    }

    #[test]
    fn thresholds_span_unit_interval() {
        let cfg = PipelineConfig::default();
        let t = cfg.thresholds();
        assert_eq!(t.len(), 101);
        assert_eq!(t[0], 0.0);
        assert_eq!(*t.last().unwrap(), 1.0);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn default_config_validates() {
        PipelineConfig::default().validate().unwrap();
    }
}
