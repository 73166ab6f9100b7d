//! Triplet generation: hinge filtering over pre-formed triplets (OHNM),
//! in-batch top-k nearest-negative search (batch OHNM), and the same search
//! restricted to one subspace of similar identities.
//!
//! Negative search is deterministic: candidates are ordered by squared
//! distance with ties broken by lowest sample_id, and anchors are processed
//! in pair order.

use crate::dataset::{IdentityIndex, LabeledDataset};
use crate::embedding::{sq_dist, Embedding};
use crate::error::{Error, Result};
use crate::subspace::SubspacePartition;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Mining knobs. `top_k` is the number of nearest negatives kept per anchor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MiningConfig {
    pub margin: f64,
    pub top_k: usize,
    pub batch_size: usize,
    /// Restrict negatives to d_an > d_ap among the selected top-k.
    pub semi_hard: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            margin: 0.4,
            top_k: 3,
            batch_size: 32,
            semi_hard: false,
        }
    }
}

/// Where a batch was sampled from, carried through diagnostics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchScope {
    WholeDataset,
    Subspace { index: usize, fallback: bool },
}

impl BatchScope {
    pub fn label(&self) -> String {
        match self {
            BatchScope::WholeDataset => "dataset".to_string(),
            BatchScope::Subspace { index, fallback: false } => format!("subspace:{index}"),
            BatchScope::Subspace { index, fallback: true } => {
                format!("subspace:{index}+fallback")
            }
        }
    }
}

/// |B| (anchor, positive) sample positions over distinct identities.
#[derive(Debug, Clone)]
pub struct AnchorPositiveBatch {
    /// (anchor, positive) positions into `dataset.samples`; identities are
    /// pairwise distinct and anchor ≠ positive within a pair.
    pub pairs: Vec<(usize, usize)>,
    pub scope: BatchScope,
}

/// A mined triplet over dataset sample positions, with its distances and
/// hinge loss at the embedding snapshot that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
    pub loss: f64,
}

/// Samples |B| distinct identities from `identity_pool` (restricted to those
/// with ≥ 2 samples), then an anchor/positive pair within each.
pub fn sample_batch_from(
    dataset: &LabeledDataset,
    index: &IdentityIndex,
    identity_pool: &[u32],
    scope: BatchScope,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<AnchorPositiveBatch> {
    let eligible: Vec<u32> = identity_pool
        .iter()
        .copied()
        .filter(|&c| index.groups[c as usize].len() >= 2)
        .collect();
    if eligible.len() < batch_size {
        return Err(Error::ScopeTooSmall {
            needed: batch_size,
            available: eligible.len(),
        });
    }
    let chosen = sample_indices(rng, eligible.len(), batch_size);
    let mut pairs = Vec::with_capacity(batch_size);
    for idx in chosen.iter() {
        let group = &index.groups[eligible[idx] as usize];
        let two = sample_indices(rng, group.len(), 2);
        pairs.push((group[two.index(0)], group[two.index(1)]));
    }
    debug_assert!(pairs
        .iter()
        .all(|&(a, p)| dataset.samples[a].identity == dataset.samples[p].identity && a != p));
    Ok(AnchorPositiveBatch { pairs, scope })
}

/// [`sample_batch_from`] over the whole dataset.
pub fn sample_batch(
    dataset: &LabeledDataset,
    index: &IdentityIndex,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<AnchorPositiveBatch> {
    let pool: Vec<u32> = (0..dataset.num_identities).collect();
    sample_batch_from(dataset, index, &pool, BatchScope::WholeDataset, batch_size, rng)
}

/// Keeps exactly the triplets violating the margin (d_ap − d_an + α > 0),
/// order preserved; the stored loss is recomputed for the given margin.
pub fn ohnm_filter(triplets: Vec<Triplet>, margin: f64) -> Vec<Triplet> {
    triplets
        .into_iter()
        .filter_map(|mut t| {
            let violation = t.d_ap - t.d_an + margin;
            if violation > 0.0 {
                t.loss = violation;
                Some(t)
            } else {
                None
            }
        })
        .collect()
}

/// For each anchor, ranks the 2|B|−2 differently-labeled batch samples by
/// squared distance (ties by lowest sample_id) and keeps the `top_k`
/// nearest as negatives; the hinge filter is applied to the result.
///
/// `embeddings[i]` holds the (anchor, positive) embeddings of `pairs[i]`,
/// all computed by one model snapshot.
pub fn batch_ohnm_select(
    dataset: &LabeledDataset,
    batch: &AnchorPositiveBatch,
    embeddings: &[(Embedding, Embedding)],
    config: &MiningConfig,
) -> Result<Vec<Triplet>> {
    if embeddings.len() != batch.pairs.len() {
        return Err(Error::Dimension {
            expected: batch.pairs.len(),
            got: embeddings.len(),
        });
    }
    let pool = 2 * batch.pairs.len() - 2;
    if config.top_k == 0 || config.top_k > pool {
        return Err(Error::Config(format!(
            "top_k {} outside candidate pool of size {pool}",
            config.top_k
        )));
    }
    let mut triplets = Vec::with_capacity(config.top_k * batch.pairs.len());
    let mut candidates: Vec<(f64, u64, usize)> = Vec::with_capacity(pool);
    for (i, (anchor_pos, positive_pos)) in batch.pairs.iter().enumerate() {
        let anchor_emb = &embeddings[i].0;
        let d_ap = sq_dist(anchor_emb.values(), embeddings[i].1.values());
        candidates.clear();
        for (j, (a_pos, p_pos)) in batch.pairs.iter().enumerate() {
            if j == i {
                continue;
            }
            for (pos, emb) in [(a_pos, &embeddings[j].0), (p_pos, &embeddings[j].1)] {
                let d = sq_dist(anchor_emb.values(), emb.values());
                candidates.push((d, dataset.samples[*pos].sample_id, *pos));
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d_an, _, neg_pos) in candidates.iter().take(config.top_k) {
            if config.semi_hard && d_an <= d_ap {
                continue;
            }
            debug_assert_ne!(
                dataset.samples[*anchor_pos].identity,
                dataset.samples[neg_pos].identity
            );
            triplets.push(Triplet {
                anchor: *anchor_pos,
                positive: *positive_pos,
                negative: neg_pos,
                d_ap,
                d_an,
                loss: (d_ap - d_an + config.margin).max(0.0),
            });
        }
    }
    Ok(ohnm_filter(triplets, config.margin))
}

/// The identities a subspace batch may draw from. When subspace `m` has
/// fewer than `batch_size` eligible identities, the pool is topped up from
/// other subspaces in order of centroid distance (index order when centers
/// are absent), and the fallback flag is set.
pub fn subspace_scope(
    partition: &SubspacePartition,
    m: usize,
    index: &IdentityIndex,
    batch_size: usize,
) -> Result<(Vec<u32>, bool)> {
    if m >= partition.m {
        return Err(Error::Config(format!(
            "subspace {m} out of range for M={}",
            partition.m
        )));
    }
    let eligible_count = |ids: &[u32]| {
        ids.iter()
            .filter(|&&c| index.groups[c as usize].len() >= 2)
            .count()
    };
    let mut pool = partition.identities_in(m);
    if eligible_count(&pool) >= batch_size {
        return Ok((pool, false));
    }
    // fallback: nearest other subspaces by center distance, then index order
    let mut order: Vec<usize> = (0..partition.m).filter(|&s| s != m).collect();
    if partition.cluster_centers.len() == partition.m
        && !partition.cluster_centers[m].is_empty()
    {
        let home = &partition.cluster_centers[m];
        order.sort_by(|&a, &b| {
            sq_dist(&partition.cluster_centers[a], home)
                .total_cmp(&sq_dist(&partition.cluster_centers[b], home))
                .then(a.cmp(&b))
        });
    }
    for s in order {
        if eligible_count(&pool) >= batch_size {
            break;
        }
        pool.extend(partition.identities_in(s));
    }
    if eligible_count(&pool) < batch_size {
        return Err(Error::ScopeTooSmall {
            needed: batch_size,
            available: eligible_count(&pool),
        });
    }
    Ok((pool, true))
}

/// Outcome of one subspace mining step.
#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub batch: AnchorPositiveBatch,
    pub triplets: Vec<Triplet>,
    pub fallback: bool,
}

/// Batch OHNM with the batch sampled inside subspace `m` (plus fallback
/// top-up when the subspace is too small). `embed` must evaluate one model
/// snapshot.
pub fn subspace_batch_ohnm(
    partition: &SubspacePartition,
    m: usize,
    dataset: &LabeledDataset,
    index: &IdentityIndex,
    embed: impl Fn(&[f64]) -> Result<Embedding>,
    config: &MiningConfig,
    rng: &mut impl Rng,
) -> Result<MiningOutcome> {
    let (pool, fallback) = subspace_scope(partition, m, index, config.batch_size)?;
    let batch = sample_batch_from(
        dataset,
        index,
        &pool,
        BatchScope::Subspace { index: m, fallback },
        config.batch_size,
        rng,
    )?;
    let embeddings = batch
        .pairs
        .iter()
        .map(|&(a, p)| {
            Ok((
                embed(&dataset.samples[a].features)?,
                embed(&dataset.samples[p].features)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let triplets = batch_ohnm_select(dataset, &batch, &embeddings, config)?;
    Ok(MiningOutcome {
        batch,
        triplets,
        fallback,
    })
}

/// Active-triplet count and mean loss over a triplet list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveStats {
    pub active: usize,
    pub mean_loss: f64,
}

/// Number of triplets with loss > 0 and the mean loss over the whole list
/// (0 for an empty list).
pub fn count_active(triplets: &[Triplet]) -> ActiveStats {
    if triplets.is_empty() {
        return ActiveStats {
            active: 0,
            mean_loss: 0.0,
        };
    }
    let active = triplets.iter().filter(|t| t.loss > 0.0).count();
    let mean_loss = triplets.iter().map(|t| t.loss).sum::<f64>() / triplets.len() as f64;
    ActiveStats { active, mean_loss }
}

/// One line of per-step mining diagnostics, emitted as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiningDiagnostics {
    pub step: usize,
    pub scope: String,
    pub active_triplets: usize,
    pub mean_loss: f64,
    pub batch_size: usize,
    pub top_k: usize,
}
