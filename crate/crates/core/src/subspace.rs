//! Identity-centroid clustering into M subspaces of similar identities, plus
//! the random-partition baseline and the per-subspace training schedule.

use crate::dataset::{IdentityIndex, LabeledDataset};
use crate::embedding::{identity_centroid, l2_normalize, sq_dist, IdentityCentroid};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Assignment of every identity to one of M clusters of similar identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspacePartition {
    pub m: usize,
    pub seed: u64,
    /// `assignment[identity]` is the subspace index, or -1 for identities the
    /// partition does not cover (e.g. emptied out by cleaning).
    pub assignment: Vec<i64>,
    pub sizes: Vec<usize>,
    /// One center per subspace; empty vectors when centers are undefined
    /// (random partitions before [`SubspacePartition::recompute_centers`]).
    pub cluster_centers: Vec<Vec<f64>>,
    pub objective_trace: Vec<f64>,
}

impl SubspacePartition {
    pub fn subspace_of(&self, identity: u32) -> Option<usize> {
        match self.assignment.get(identity as usize) {
            Some(&s) if s >= 0 => Some(s as usize),
            _ => None,
        }
    }

    /// Identities assigned to subspace `m`, ascending.
    pub fn identities_in(&self, m: usize) -> Vec<u32> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == m as i64)
            .map(|(c, _)| c as u32)
            .collect()
    }

    /// Number of identities the partition covers.
    pub fn covered(&self) -> usize {
        self.assignment.iter().filter(|&&s| s >= 0).count()
    }

    /// Fills `cluster_centers` with the mean of each subspace's member
    /// centroids (used for random partitions, whose centers start empty).
    pub fn recompute_centers(&mut self, centroids: &[IdentityCentroid]) {
        let dim = centroids.first().map_or(0, |c| c.centroid.len());
        let mut sums = vec![vec![0.0f64; dim]; self.m];
        let mut counts = vec![0usize; self.m];
        for c in centroids {
            if let Some(s) = self.subspace_of(c.identity) {
                for (acc, v) in sums[s].iter_mut().zip(&c.centroid) {
                    *acc += v;
                }
                counts[s] += 1;
            }
        }
        for (sum, &n) in sums.iter_mut().zip(&counts) {
            if n > 0 {
                for v in sum.iter_mut() {
                    *v /= n as f64;
                }
            } else {
                sum.clear();
            }
        }
        self.cluster_centers = sums;
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-iteration clustering objective, non-increasing by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansTrace {
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

/// One centroid per identity present in the dataset, embedded by `model`.
pub fn build_identity_centroids(
    dataset: &LabeledDataset,
    model: &ModelParams,
) -> Result<Vec<IdentityCentroid>> {
    let index = IdentityIndex::build(dataset);
    let mut centroids = Vec::new();
    for (identity, group) in index.groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let members = group
            .iter()
            .map(|&pos| model.embed(&dataset.samples[pos].features))
            .collect::<Result<Vec<_>>>()?;
        centroids.push(identity_centroid(identity as u32, &members)?);
    }
    Ok(centroids)
}

/// Renormalized copies of identity centroids (ablation path; the default
/// pipeline clusters raw means).
pub fn renormalized(centroids: &[IdentityCentroid]) -> Result<Vec<IdentityCentroid>> {
    centroids
        .iter()
        .map(|c| {
            Ok(IdentityCentroid {
                identity: c.identity,
                centroid: l2_normalize(&c.centroid)?.into_values(),
                member_count: c.member_count,
            })
        })
        .collect()
}

fn kmeanspp_init(points: &[&[f64]], m: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(m);
    centers.push(points[rng.random_range(0..points.len())].to_vec());
    let mut weights: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centers[0]))
        .collect();
    while centers.len() < m {
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // all remaining points coincide with a center
            rng.random_range(0..points.len())
        };
        centers.push(points[next].to_vec());
        for (w, p) in weights.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = sq_dist(point, &centers[0]);
    for (i, c) in centers.iter().enumerate().skip(1) {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Lloyd's algorithm with k-means++ seeding over identity centroids.
/// Converges when assignments are stable or `max_iter` is reached. Empty
/// clusters steal the farthest point of the largest cluster, so all M
/// subspaces end non-empty.
pub fn kmeans(
    centroids: &[IdentityCentroid],
    m: usize,
    max_iter: usize,
    seed: u64,
) -> Result<(SubspacePartition, KMeansTrace)> {
    if m == 0 || m > centroids.len() {
        return Err(Error::Config(format!(
            "M={m} must satisfy 1 ≤ M ≤ {} identities",
            centroids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<&[f64]> = centroids.iter().map(|c| c.centroid.as_slice()).collect();
    let mut centers = kmeanspp_init(&points, m, &mut rng);
    let mut assignment = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0usize;
    for _ in 0..max_iter {
        iterations += 1;
        let mut objective = 0.0f64;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (best, d) = nearest_center(p, &centers);
            objective += d;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        trace.push(objective);
        if !changed {
            break;
        }
        // update step: means of assigned points
        let dim = points[0].len();
        let mut sums = vec![vec![0.0f64; dim]; m];
        let mut counts = vec![0usize; m];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(*p) {
                *s += v;
            }
        }
        for (k, (sum, &n)) in sums.iter_mut().zip(&counts).enumerate() {
            if n > 0 {
                for v in sum.iter_mut() {
                    *v /= n as f64;
                }
                centers[k] = sum.clone();
            }
            // empty clusters keep their center until repaired below
        }
        // empty-cluster repair: steal the farthest point of the largest cluster
        for k in 0..m {
            if counts[k] > 0 {
                continue;
            }
            let largest = (0..m)
                .filter(|&c| counts[c] > 1)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .ok_or_else(|| Error::Config("cannot repair empty cluster".into()))?;
            let victim = points
                .iter()
                .enumerate()
                .filter(|(i, _)| assignment[*i] == largest)
                .max_by(|(ia, a), (ib, b)| {
                    sq_dist(a, &centers[largest])
                        .total_cmp(&sq_dist(b, &centers[largest]))
                        .then(ib.cmp(ia))
                })
                .map(|(i, _)| i)
                .unwrap();
            centers[k] = points[victim].to_vec();
            assignment[victim] = k;
            counts[k] = 1;
            counts[largest] -= 1;
        }
    }

    let mut sizes = vec![0usize; m];
    for &a in &assignment {
        sizes[a] += 1;
    }
    let max_identity = centroids.iter().map(|c| c.identity).max().unwrap();
    let mut full_assignment = vec![-1i64; max_identity as usize + 1];
    for (c, &a) in centroids.iter().zip(&assignment) {
        full_assignment[c.identity as usize] = a as i64;
    }
    Ok((
        SubspacePartition {
            m,
            seed,
            assignment: full_assignment,
            sizes,
            cluster_centers: centers,
            objective_trace: trace.clone(),
        },
        KMeansTrace {
            objective: trace,
            iterations,
            seed,
        },
    ))
}

/// Shuffles identities and deals them round-robin into M near-equal groups
/// (the random-partition baseline). Centers start empty.
pub fn random_partition(num_identities: u32, m: usize, seed: u64) -> Result<SubspacePartition> {
    if m == 0 || m as u32 > num_identities {
        return Err(Error::Config(format!(
            "M={m} must satisfy 1 ≤ M ≤ C={num_identities}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identities: Vec<u32> = (0..num_identities).collect();
    use rand::seq::SliceRandom;
    identities.shuffle(&mut rng);
    let mut assignment = vec![-1i64; num_identities as usize];
    let mut sizes = vec![0usize; m];
    for (j, &c) in identities.iter().enumerate() {
        let s = j % m;
        assignment[c as usize] = s as i64;
        sizes[s] += 1;
    }
    Ok(SubspacePartition {
        m,
        seed,
        assignment,
        sizes,
        cluster_centers: vec![Vec::new(); m],
        objective_trace: Vec::new(),
    })
}

/// Round-robin schedule of subspace indices: each epoch allocates
/// `batches_per_epoch` batches across subspaces proportionally to identity
/// count (largest-remainder rounding, ties to the lowest index), and each
/// subspace's visits are spread evenly through the epoch so no subspace
/// monopolizes a stretch of consecutive updates.
pub fn subspace_schedule(
    partition: &SubspacePartition,
    batches_per_epoch: usize,
    epochs: usize,
) -> Vec<usize> {
    let total: usize = partition.sizes.iter().sum();
    if total == 0 || batches_per_epoch == 0 {
        return Vec::new();
    }
    let quotas: Vec<f64> = partition
        .sizes
        .iter()
        .map(|&s| batches_per_epoch as f64 * s as f64 / total as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = batches_per_epoch - counts.iter().sum::<usize>();
    let mut by_frac: Vec<usize> = (0..partition.m).collect();
    by_frac.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    for &s in &by_frac {
        if remaining == 0 {
            break;
        }
        counts[s] += 1;
        remaining -= 1;
    }
    // interleave: subspace m's k-th visit sits at fractional position
    // (k + ½)/n_m; merging by position spaces every subspace evenly
    let mut slots: Vec<(f64, usize, usize)> = Vec::with_capacity(batches_per_epoch);
    for (s, &n) in counts.iter().enumerate() {
        for k in 0..n {
            slots.push(((k as f64 + 0.5) / n as f64, s, k));
        }
    }
    slots.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let per_epoch: Vec<usize> = slots.into_iter().map(|(_, s, _)| s).collect();
    let mut schedule = Vec::with_capacity(per_epoch.len() * epochs);
    for _ in 0..epochs {
        schedule.extend_from_slice(&per_epoch);
    }
    schedule
}

/// Re-clusters with fresh centroids from the current model. Disabled by
/// default in the pipeline; exposed for experiments.
pub fn refresh_partition(
    dataset: &LabeledDataset,
    model: &ModelParams,
    m: usize,
    max_iter: usize,
    seed: u64,
    renormalize_centroids: bool,
) -> Result<(SubspacePartition, KMeansTrace)> {
    let centroids = build_identity_centroids(dataset, model)?;
    let centroids = if renormalize_centroids {
        renormalized(&centroids)?
    } else {
        centroids
    };
    kmeans(&centroids, m, max_iter, seed)
}
