//! Samples, labeled datasets, and the per-identity index used by sampling.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// One data point: raw feature vector, identity label, stable id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: u64,
    pub identity: u32,
    pub features: Vec<f64>,
}

/// An ordered collection of samples over identities `0..num_identities`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub num_identities: u32,
    pub d_in: usize,
}

impl LabeledDataset {
    /// Validates labels, feature lengths and finiteness, and sample-id
    /// uniqueness.
    pub fn new(samples: Vec<Sample>, num_identities: u32, d_in: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if s.identity >= num_identities {
                return Err(Error::Label {
                    label: s.identity,
                    num_classes: num_identities,
                });
            }
            if s.features.len() != d_in {
                return Err(Error::Dimension {
                    expected: d_in,
                    got: s.features.len(),
                });
            }
            if s.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "sample {} has non-finite features",
                    s.sample_id
                )));
            }
            if !seen.insert(s.sample_id) {
                return Err(Error::Format(format!("duplicate sample_id {}", s.sample_id)));
            }
        }
        Ok(Self {
            samples,
            num_identities,
            d_in,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// New dataset holding the selected samples (original ids preserved).
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            num_identities: self.num_identities,
            d_in: self.d_in,
        }
    }

    /// Splits sample positions per identity: the trailing `ceil(fraction·N_c)`
    /// samples of each identity group go to the holdout. Deterministic.
    pub fn split_holdout(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let index = IdentityIndex::build(self);
        let mut train = Vec::new();
        let mut held = Vec::new();
        for group in &index.groups {
            let n_hold = ((fraction * group.len() as f64).ceil() as usize).min(group.len());
            let cut = group.len() - n_hold;
            train.extend_from_slice(&group[..cut]);
            held.extend_from_slice(&group[cut..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        (train, held)
    }
}

/// Sample positions grouped by identity label, in dataset order.
#[derive(Debug, Clone)]
pub struct IdentityIndex {
    /// `groups[identity]` lists positions into `dataset.samples`.
    pub groups: Vec<Vec<usize>>,
}

impl IdentityIndex {
    pub fn build(dataset: &LabeledDataset) -> Self {
        let mut groups = vec![Vec::new(); dataset.num_identities as usize];
        for (pos, s) in dataset.samples.iter().enumerate() {
            groups[s.identity as usize].push(pos);
        }
        Self { groups }
    }

    /// Identities usable as triplet anchor sources (≥ 2 samples).
    pub fn eligible_identities(&self) -> Vec<u32> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.len() >= 2)
            .map(|(c, _)| c as u32)
            .collect()
    }

    /// Identities with at least one sample.
    pub fn present_identities(&self) -> Vec<u32> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .map(|(c, _)| c as u32)
            .collect()
    }
}
