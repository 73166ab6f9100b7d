//! Synthetic hierarchically-clustered identity data: supercluster means on
//! the input sphere, identity means scattered around them, samples scattered
//! around identity means, plus optional label-flip noise (uniform or
//! concentrated in a fraction of identities).

use crate::dataset::{LabeledDataset, Sample};
use crate::derive_seed;
use crate::error::{Error, Result};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_identities: u32,
    /// Inclusive (min, max) samples per identity; equal values fix the count.
    pub samples_per_identity: (usize, usize),
    pub d_in: usize,
    pub superclusters: usize,
    /// Sample scatter around its identity mean.
    pub sigma_within: f64,
    /// Identity-mean scatter around its supercluster mean.
    pub sigma_between: f64,
    /// Fraction of samples whose label is flipped, 0 ≤ p < 1.
    pub label_flip_rate: f64,
    /// 0 → flips uniform over all samples; otherwise flips are drawn only
    /// from samples of this fraction of identities.
    pub noisy_identity_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::Config("num_identities must be positive".into()));
        }
        if self.superclusters == 0 || self.superclusters as u32 > self.num_identities {
            return Err(Error::Config("superclusters must satisfy 1 ≤ S ≤ C".into()));
        }
        if !(0.0..1.0).contains(&self.label_flip_rate) {
            return Err(Error::Config("label_flip_rate must be in [0,1)".into()));
        }
        if self.label_flip_rate > 0.0 && self.num_identities < 2 {
            return Err(Error::Config("label flips need at least 2 identities".into()));
        }
        if !(0.0..=1.0).contains(&self.noisy_identity_fraction) {
            return Err(Error::Config("noisy_identity_fraction must be in [0,1]".into()));
        }
        if self.sigma_within <= 0.0 || self.sigma_between <= 0.0 {
            return Err(Error::Config("sigmas must be positive".into()));
        }
        if self.samples_per_identity.0 == 0
            || self.samples_per_identity.0 > self.samples_per_identity.1
        {
            return Err(Error::Config("bad samples_per_identity range".into()));
        }
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample generation truth kept outside the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// The generating identity of each sample (pre-flip).
    pub true_identity: Vec<u32>,
    pub flipped: Vec<bool>,
    /// Supercluster of each identity.
    pub supercluster_of_identity: Vec<u32>,
}

impl GroundTruth {
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn unit_gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generates the dataset described by `spec`. Identities are assigned to
/// superclusters round-robin; features are quantized to f32 precision so the
/// in-memory dataset matches its TFDS serialization exactly.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(LabeledDataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth"));
    let c = spec.num_identities as usize;

    let centers: Vec<Vec<f64>> = (0..spec.superclusters)
        .map(|_| {
            let v = unit_gaussian_vec(&mut rng, spec.d_in);
            let norm = crate::embedding::l2_norm(&v);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let supercluster_of_identity: Vec<u32> =
        (0..c).map(|i| (i % spec.superclusters) as u32).collect();
    let identity_means: Vec<Vec<f64>> = (0..c)
        .map(|i| {
            let base = &centers[supercluster_of_identity[i] as usize];
            unit_gaussian_vec(&mut rng, spec.d_in)
                .into_iter()
                .zip(base)
                .map(|(g, b)| b + spec.sigma_between * g)
                .collect()
        })
        .collect();

    let mut samples = Vec::new();
    let mut true_identity = Vec::new();
    let (lo, hi) = spec.samples_per_identity;
    for (identity, mean) in identity_means.iter().enumerate() {
        let n = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        for _ in 0..n {
            let features: Vec<f64> = unit_gaussian_vec(&mut rng, spec.d_in)
                .into_iter()
                .zip(mean)
                .map(|(g, m)| (m + spec.sigma_within * g) as f32 as f64)
                .collect();
            samples.push(Sample {
                sample_id: samples.len() as u64,
                identity: identity as u32,
                features,
            });
            true_identity.push(identity as u32);
        }
    }

    let n_total = samples.len();
    let mut flipped = vec![false; n_total];
    let n_flips = (spec.label_flip_rate * n_total as f64).round() as usize;
    if n_flips > 0 {
        // uniform mode scatters flips to random targets; concentrated mode
        // sends each noisy identity's flips to one fixed wrong identity
        // (merged-identity noise), so corruption is heterogeneous across
        // identities
        let uniform_target = |rng: &mut ChaCha8Rng, own: u32| {
            let mut t = rng.random_range(0..spec.num_identities - 1);
            if t >= own {
                t += 1;
            }
            t
        };
        let candidates: Vec<usize>;
        let mut target_of: Vec<Option<u32>> = vec![None; c];
        if spec.noisy_identity_fraction > 0.0 {
            let n_noisy = ((spec.noisy_identity_fraction * c as f64).ceil() as usize)
                .clamp(1, c);
            let noisy = sample_indices(&mut rng, c, n_noisy);
            let mut noisy_ids: Vec<usize> = noisy.iter().collect();
            noisy_ids.sort_unstable();
            for id in noisy_ids {
                target_of[id] = Some(uniform_target(&mut rng, id as u32));
            }
            candidates = (0..n_total)
                .filter(|&i| target_of[true_identity[i] as usize].is_some())
                .collect();
        } else {
            candidates = (0..n_total).collect();
        }
        let k = n_flips.min(candidates.len());
        let picks = sample_indices(&mut rng, candidates.len(), k);
        let mut chosen: Vec<usize> = picks.iter().map(|p| candidates[p]).collect();
        chosen.sort_unstable();
        for i in chosen {
            let own = true_identity[i];
            samples[i].identity = match target_of[own as usize] {
                Some(t) => t,
                None => uniform_target(&mut rng, own),
            };
            flipped[i] = true;
        }
    }

    let dataset = LabeledDataset::new(samples, spec.num_identities, spec.d_in)?;
    Ok((
        dataset,
        GroundTruth {
            true_identity,
            flipped,
            supercluster_of_identity,
        },
    ))
}
