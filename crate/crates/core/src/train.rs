//! Training drivers: softmax classifier training from scratch and triplet
//! fine-tuning under any of the mining regimes. Both use NAG with a
//! decade-drop learning-rate schedule and are fully deterministic given
//! (seed, config).

use crate::config::PipelineConfig;
use crate::dataset::{IdentityIndex, LabeledDataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::mining::{
    batch_ohnm_select, count_active, sample_batch_from, subspace_scope, BatchScope,
    MiningDiagnostics,
};
use crate::model::{
    softmax_backward, softmax_loss, triplet_backward, Classifier, GradientSet, ModelParams,
    NagState, SoftmaxHead, TrainableParams,
};
use crate::subspace::{refresh_partition, subspace_schedule, SubspacePartition};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One classifier-training epoch summary.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochReport {
    pub stage: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
}

fn stage_rates(base: f64, stages: usize) -> Vec<f64> {
    (0..stages).map(|s| base * 0.1f64.powi(s as i32)).collect()
}

/// Trains model + softmax head from scratch with softmax loss only.
/// `seed_tag` separates rng streams of independent trainings under one seed.
pub fn train_classifier(
    dataset: &LabeledDataset,
    cfg: &PipelineConfig,
    seed: u64,
    seed_tag: &str,
) -> Result<(Classifier, Vec<EpochReport>)> {
    let index = IdentityIndex::build(dataset);
    if index.present_identities().len() < 2 {
        return Err(Error::Config(
            "classification needs at least 2 identities with samples".into(),
        ));
    }
    let model = ModelParams::new_seeded(
        dataset.d_in,
        &cfg.hidden_dims,
        cfg.embed_dim,
        derive_seed(seed, &format!("{seed_tag}:model-init")),
    )?;
    let head = SoftmaxHead::new_seeded(
        dataset.num_identities,
        cfg.embed_dim,
        derive_seed(seed, &format!("{seed_tag}:head-init")),
    );
    let mut params = TrainableParams::with_head(model, head);
    let mut nag = NagState::new(&params, cfg.momentum, cfg.cls_learning_rate)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{seed_tag}:order")));
    let mut reports = Vec::new();

    for (stage, &lr) in stage_rates(cfg.cls_learning_rate, cfg.cls_stages).iter().enumerate() {
        nag.learning_rate = lr;
        for epoch in 0..cfg.cls_epochs_per_stage {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0f64;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.cls_batch_size) {
                let ahead = nag.lookahead(&params);
                let head_ref = ahead.head.as_ref().unwrap();
                let mut grads = GradientSet::zeros_like(&params);
                let scale = 1.0 / chunk.len() as f64;
                let mut batch_loss = 0.0f64;
                for &pos in chunk {
                    let s = &dataset.samples[pos];
                    let (e, trace) = ahead.model.forward(&s.features)?;
                    batch_loss += softmax_loss(head_ref, e.values(), s.identity)?;
                    let de = softmax_backward(
                        head_ref,
                        e.values(),
                        s.identity,
                        scale,
                        grads.head.as_mut().unwrap(),
                    )?;
                    ahead
                        .model
                        .backprop_embedding(&trace, &de, 1.0, &mut grads.layers)?;
                }
                nag.step(&mut params, &grads)?;
                epoch_loss += batch_loss * scale;
                batches += 1;
            }
            reports.push(EpochReport {
                stage,
                epoch,
                learning_rate: lr,
                mean_loss: epoch_loss / batches.max(1) as f64,
            });
        }
    }
    Ok((
        Classifier {
            head: params.head.take().unwrap(),
            model: params.model,
        },
        reports,
    ))
}

/// Fraction of samples whose predicted class equals the given labels.
pub fn classification_accuracy(
    classifier: &Classifier,
    dataset: &LabeledDataset,
    labels: &[u32],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for (s, &label) in dataset.samples.iter().zip(labels) {
        if classifier.predict(&s.features)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Output of the triplet fine-tuning stage.
#[derive(Debug)]
pub struct TripletTrainOutput {
    pub params: TrainableParams,
    pub steps: Vec<MiningDiagnostics>,
    /// The partition actually used in the final stage (refreshes applied).
    pub partition: Option<SubspacePartition>,
}

/// Fine-tunes `init` with hinge triplet loss (optionally joint with softmax)
/// under the configured mining regime. `partition = None` means global batch
/// OHNM over the whole dataset.
pub fn train_triplet(
    dataset: &LabeledDataset,
    init: Classifier,
    partition: Option<SubspacePartition>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<TripletTrainOutput> {
    let index = IdentityIndex::build(dataset);
    let eligible = index.eligible_identities();
    if eligible.len() < cfg.triplet_batch_size {
        return Err(Error::ScopeTooSmall {
            needed: cfg.triplet_batch_size,
            available: eligible.len(),
        });
    }
    let mining_cfg = cfg.mining_config();
    let head = if cfg.joint_softmax {
        if cfg.reinit_head {
            Some(SoftmaxHead::new_seeded(
                dataset.num_identities,
                cfg.embed_dim,
                derive_seed(seed, "triplet:head-reinit"),
            ))
        } else {
            Some(init.head)
        }
    } else {
        None
    };
    let mut params = TrainableParams {
        model: init.model,
        head,
    };
    let mut nag = NagState::new(&params, cfg.momentum, cfg.triplet_learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "triplet:mining"));
    let batches_per_epoch = eligible.len().div_ceil(cfg.triplet_batch_size);
    let mut partition = partition;
    let mut steps = Vec::new();
    let mut step = 0usize;

    for (stage, &lr) in stage_rates(cfg.triplet_learning_rate, cfg.triplet_stages)
        .iter()
        .enumerate()
    {
        nag.learning_rate = lr;
        if cfg.refresh_partition && stage > 0 {
            if let Some(p) = &partition {
                let (fresh, _) = refresh_partition(
                    dataset,
                    &params.model,
                    p.m,
                    cfg.kmeans_max_iter,
                    derive_seed(seed, &format!("triplet:refresh:{stage}")),
                    cfg.renormalize_centroids,
                )?;
                partition = Some(fresh);
            }
        }
        for _ in 0..cfg.triplet_epochs_per_stage {
            let schedule: Vec<Option<usize>> = match &partition {
                Some(p) => subspace_schedule(p, batches_per_epoch, 1)
                    .into_iter()
                    .map(Some)
                    .collect(),
                None => vec![None; batches_per_epoch],
            };
            for scoped in schedule {
                let ahead = nag.lookahead(&params);
                let batch = match (&partition, scoped) {
                    (Some(p), Some(m)) => {
                        let (pool, fallback) =
                            subspace_scope(p, m, &index, cfg.triplet_batch_size)?;
                        sample_batch_from(
                            dataset,
                            &index,
                            &pool,
                            BatchScope::Subspace { index: m, fallback },
                            cfg.triplet_batch_size,
                            &mut rng,
                        )?
                    }
                    _ => sample_batch_from(
                        dataset,
                        &index,
                        &eligible,
                        BatchScope::WholeDataset,
                        cfg.triplet_batch_size,
                        &mut rng,
                    )?,
                };

                // one forward per batch sample at the lookahead point
                let mut traces = Vec::with_capacity(batch.pairs.len());
                let mut embeddings = Vec::with_capacity(batch.pairs.len());
                for &(a, p) in &batch.pairs {
                    let (ea, ta) = ahead.model.forward(&dataset.samples[a].features)?;
                    let (ep, tp) = ahead.model.forward(&dataset.samples[p].features)?;
                    embeddings.push((ea, ep));
                    traces.push((ta, tp));
                }
                let triplets = batch_ohnm_select(dataset, &batch, &embeddings, &mining_cfg)?;

                let mut trace_of = std::collections::HashMap::new();
                for (i, &(a, p)) in batch.pairs.iter().enumerate() {
                    trace_of.insert(a, (i, 0u8));
                    trace_of.insert(p, (i, 1u8));
                }
                let pick = |pos: usize| {
                    let (i, role) = trace_of[&pos];
                    if role == 0 {
                        &traces[i].0
                    } else {
                        &traces[i].1
                    }
                };

                let mut grads = GradientSet::zeros_like(&params);
                if !triplets.is_empty() {
                    let t_scale = 1.0 / triplets.len() as f64;
                    for t in &triplets {
                        triplet_backward(
                            &ahead.model,
                            pick(t.anchor),
                            pick(t.positive),
                            pick(t.negative),
                            cfg.margin,
                            t_scale,
                            &mut grads.layers,
                        )?;
                    }
                }
                if let Some(head) = &ahead.head {
                    let n_samples = 2 * batch.pairs.len();
                    let s_scale = cfg.joint_lambda / n_samples as f64;
                    let head_grads = grads.head.as_mut().unwrap();
                    for (i, &(a, p)) in batch.pairs.iter().enumerate() {
                        for (pos, trace) in [(a, &traces[i].0), (p, &traces[i].1)] {
                            let e = trace.embedding_values().to_vec();
                            let label = dataset.samples[pos].identity;
                            let de = softmax_backward(head, &e, label, s_scale, head_grads)?;
                            ahead
                                .model
                                .backprop_embedding(trace, &de, 1.0, &mut grads.layers)?;
                        }
                    }
                }
                nag.step(&mut params, &grads)?;

                let stats = count_active(&triplets);
                steps.push(MiningDiagnostics {
                    step,
                    scope: batch.scope.label(),
                    active_triplets: stats.active,
                    mean_loss: stats.mean_loss,
                    batch_size: cfg.triplet_batch_size,
                    top_k: cfg.top_k,
                });
                step += 1;
            }
        }
    }
    Ok(TripletTrainOutput {
        params,
        steps,
        partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.num_identities = 20;
        cfg.samples_per_identity = (6, 6);
        cfg.d_in = 8;
        cfg.superclusters = 4;
        cfg.hidden_dims = vec![16];
        cfg.embed_dim = 8;
        cfg.cls_stages = 2;
        cfg.cls_epochs_per_stage = 3;
        cfg.cls_batch_size = 16;
        cfg.triplet_stages = 1;
        cfg.triplet_epochs_per_stage = 2;
        cfg.triplet_batch_size = 8;
        cfg.subspaces = 2;
        cfg
    }

    fn tiny_data(cfg: &PipelineConfig) -> LabeledDataset {
        let spec = SyntheticSpec {
            num_identities: cfg.num_identities,
            samples_per_identity: cfg.samples_per_identity,
            d_in: cfg.d_in,
            superclusters: cfg.superclusters,
            sigma_within: 0.05,
            sigma_between: 0.2,
            label_flip_rate: 0.0,
            noisy_identity_fraction: 0.0,
            seed: 5,
        };
        generate_synthetic(&spec).unwrap().0
    }

    #[test]
    fn classifier_training_reduces_loss_and_is_deterministic() {
        let cfg = tiny_config();
        let ds = tiny_data(&cfg);
        let (clf_a, reports) = train_classifier(&ds, &cfg, 3, "cls").unwrap();
        assert!(reports.last().unwrap().mean_loss < reports[0].mean_loss);
        let (clf_b, _) = train_classifier(&ds, &cfg, 3, "cls").unwrap();
        assert_eq!(clf_a.model.layers, clf_b.model.layers);
        assert_eq!(clf_a.head, clf_b.head);
        // a different seed gives different parameters
        let (clf_c, _) = train_classifier(&ds, &cfg, 4, "cls").unwrap();
        assert_ne!(clf_a.model.layers, clf_c.model.layers);
    }

    #[test]
    fn triplet_training_runs_all_regimes_deterministically() {
        let cfg = tiny_config();
        let ds = tiny_data(&cfg);
        let (clf, _) = train_classifier(&ds, &cfg, 3, "cls").unwrap();

        let run = |partition: Option<SubspacePartition>| {
            train_triplet(&ds, clf.clone(), partition, &cfg, 3).unwrap()
        };
        let global_a = run(None);
        let global_b = run(None);
        assert_eq!(global_a.params.model.layers, global_b.params.model.layers);
        assert_eq!(global_a.steps.len(), global_b.steps.len());

        let part = crate::subspace::random_partition(cfg.num_identities, 2, 9).unwrap();
        let sub = run(Some(part));
        assert!(sub.steps.iter().all(|s| s.scope.starts_with("subspace:")));
    }

    #[test]
    fn single_subspace_partition_matches_global_batches() {
        // with M=1 and identical rng streams the sampled batches coincide
        let cfg = tiny_config();
        let ds = tiny_data(&cfg);
        let (clf, _) = train_classifier(&ds, &cfg, 3, "cls").unwrap();
        let part = crate::subspace::random_partition(cfg.num_identities, 1, 9).unwrap();
        let global = train_triplet(&ds, clf.clone(), None, &cfg, 3).unwrap();
        let single = train_triplet(&ds, clf, Some(part), &cfg, 3).unwrap();
        assert_eq!(global.params.model.layers, single.params.model.layers);
        for (a, b) in global.steps.iter().zip(&single.steps) {
            assert_eq!(a.active_triplets, b.active_triplets);
            assert_eq!(a.mean_loss, b.mean_loss);
        }
    }
}
