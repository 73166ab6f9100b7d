//! Three-step label-noise removal: train an initial classifier on all data,
//! drop every sample whose predicted identity disagrees with its label,
//! retrain from scratch on the survivors. A fixed-ratio baseline keeps the
//! top confidence fraction per identity instead.

use crate::config::PipelineConfig;
use crate::dataset::{IdentityIndex, LabeledDataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::train::{train_classifier, EpochReport};
use rand::seq::index::sample as sample_indices;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a cleaning pass kept and removed; noise precision/recall are present
/// only when ground-truth flip flags were supplied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleaningReport {
    pub kept: usize,
    pub removed: usize,
    /// Removal counts per labeled identity.
    pub removed_per_identity: Vec<usize>,
    pub noise_precision: Option<f64>,
    pub noise_recall: Option<f64>,
}

fn noise_metrics(removed_mask: &[bool], flipped: &[bool]) -> (f64, f64) {
    let removed = removed_mask.iter().filter(|&&r| r).count();
    let total_flipped = flipped.iter().filter(|&&f| f).count();
    let true_hits = removed_mask
        .iter()
        .zip(flipped)
        .filter(|(&r, &f)| r && f)
        .count();
    let precision = if removed == 0 {
        1.0
    } else {
        true_hits as f64 / removed as f64
    };
    let recall = if total_flipped == 0 {
        1.0
    } else {
        true_hits as f64 / total_flipped as f64
    };
    (precision, recall)
}

fn build_report(
    dataset: &LabeledDataset,
    removed_mask: &[bool],
    flipped: Option<&[bool]>,
) -> CleaningReport {
    let removed = removed_mask.iter().filter(|&&r| r).count();
    let mut removed_per_identity = vec![0usize; dataset.num_identities as usize];
    for (s, &r) in dataset.samples.iter().zip(removed_mask) {
        if r {
            removed_per_identity[s.identity as usize] += 1;
        }
    }
    let (noise_precision, noise_recall) = match flipped {
        Some(f) => {
            let (p, r) = noise_metrics(removed_mask, f);
            (Some(p), Some(r))
        }
        None => (None, None),
    };
    CleaningReport {
        kept: dataset.len() - removed,
        removed,
        removed_per_identity,
        noise_precision,
        noise_recall,
    }
}

/// Step 1: train the initial classifier on all data (or a per-identity
/// subset of it when `init_subset_fraction` < 1).
pub fn train_initial_classifier(
    dataset: &LabeledDataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Classifier, Vec<EpochReport>)> {
    let training_set = if cfg.init_subset_fraction < 1.0 {
        let index = IdentityIndex::build(dataset);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "cleaning:init-subset"));
        let mut keep = Vec::new();
        for group in &index.groups {
            if group.is_empty() {
                continue;
            }
            let n = ((cfg.init_subset_fraction * group.len() as f64).ceil() as usize)
                .clamp(1, group.len());
            let picks = sample_indices(&mut rng, group.len(), n);
            keep.extend(picks.iter().map(|i| group[i]));
        }
        keep.sort_unstable();
        dataset.subset(&keep)
    } else {
        dataset.clone()
    };
    train_classifier(&training_set, cfg, seed, "cleaning:init")
}

/// Step 2: keep a sample iff the classifier's argmax prediction equals its
/// label. Pass the ground-truth flip flags to get noise precision/recall.
pub fn filter_by_agreement(
    dataset: &LabeledDataset,
    classifier: &Classifier,
    flipped: Option<&[bool]>,
) -> Result<(LabeledDataset, CleaningReport)> {
    if classifier.head.num_classes() != dataset.num_identities {
        return Err(Error::Config(format!(
            "classifier covers {} identities, dataset has {}",
            classifier.head.num_classes(),
            dataset.num_identities
        )));
    }
    let mut removed_mask = vec![false; dataset.len()];
    let mut keep = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if classifier.predict(&s.features)? == s.identity {
            keep.push(i);
        } else {
            removed_mask[i] = true;
        }
    }
    let report = build_report(dataset, &removed_mask, flipped);
    Ok((dataset.subset(&keep), report))
}

/// Step 3: retrain a fresh classifier on the survivors.
pub fn retrain_clean(
    clean: &LabeledDataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(Classifier, Vec<EpochReport>)> {
    let survivors = IdentityIndex::build(clean).present_identities().len();
    if survivors < 2 {
        return Err(Error::CleaningCollapse { survivors });
    }
    train_classifier(clean, cfg, seed, "classifier")
}

/// Baseline: within each identity keep the ⌈ratio·N_c⌉ samples with the
/// highest classifier confidence in the labeled class (ties to the lowest
/// sample_id).
pub fn fixed_ratio_baseline(
    dataset: &LabeledDataset,
    classifier: &Classifier,
    ratio: f64,
    flipped: Option<&[bool]>,
) -> Result<(LabeledDataset, CleaningReport)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("ratio {ratio} must be in (0,1]")));
    }
    let index = IdentityIndex::build(dataset);
    let mut removed_mask = vec![false; dataset.len()];
    let mut keep = Vec::new();
    for group in &index.groups {
        if group.is_empty() {
            continue;
        }
        let n_keep = (ratio * group.len() as f64).ceil() as usize;
        let mut scored = group
            .iter()
            .map(|&pos| {
                let s = &dataset.samples[pos];
                Ok((
                    classifier.confidence_in(&s.features, s.identity)?,
                    s.sample_id,
                    pos,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (rank, &(_, _, pos)) in scored.iter().enumerate() {
            if rank < n_keep {
                keep.push(pos);
            } else {
                removed_mask[pos] = true;
            }
        }
    }
    keep.sort_unstable();
    let report = build_report(dataset, &removed_mask, flipped);
    Ok((dataset.subset(&keep), report))
}
