//! End-to-end pipeline: synthetic data → (optional) noise cleaning →
//! classifier → identity centroids → partition → triplet fine-tuning →
//! retrieval index → evaluation. Plus the ablation grid over mining regimes
//! and loss modes, pair verification, hard-triplet density measurement, and
//! CSV/JSON artifact emission.
//!
//! Every artifact except `timings.csv` is byte-deterministic given
//! (seed, config): all randomness flows through per-stage seed derivation
//! and stages never share rng streams.

use crate::cleaning::{filter_by_agreement, retrain_clean, train_initial_classifier, CleaningReport};
use crate::config::{MiningRegime, PipelineConfig};
use crate::dataset::{IdentityIndex, LabeledDataset};
use crate::derive_seed;
use crate::embedding::IdentityCentroid;
use crate::error::{Error, Result};
use crate::formats;
use crate::mining::{batch_ohnm_select, count_active, sample_batch_from, subspace_scope, BatchScope, MiningDiagnostics};
use crate::model::{Classifier, ModelParams};
use crate::retrieval::{
    build_index, coverage_at_precision, precision_coverage, retrieve_flat,
    retrieve_hierarchical, LabeledResult, PrecisionCoverageCurve, RetrievalIndex,
};
use crate::subspace::{build_identity_centroids, kmeans, random_partition, renormalized, SubspacePartition};
use crate::synth::{generate_synthetic, GroundTruth};
use crate::train::{classification_accuracy, train_classifier, train_triplet, EpochReport};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Retrieval evaluation of one model over the holdout queries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub curve: PrecisionCoverageCurve,
    pub coverage_at_095: f64,
    pub coverage_at_099: f64,
    /// Fraction of queries where hierarchical and flat agree on identity.
    pub flat_agreement: f64,
    pub mean_distance_ops_hierarchical: f64,
    pub distance_ops_flat: usize,
    pub indexed_identities: usize,
}

/// Everything one pipeline run produced (wall-clock kept separately so the
/// serialized record is deterministic).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub version: String,
    pub seed: u64,
    pub cell: String,
    pub config: PipelineConfig,
    pub cleaning: Option<CleaningReport>,
    pub classifier_epochs: Vec<EpochReport>,
    pub kmeans_objective: Vec<f64>,
    pub triplet_steps: Vec<MiningDiagnostics>,
    pub pair_accuracy: Option<f64>,
    pub pair_threshold: Option<f64>,
    /// Holdout classification accuracy of the stage classifier against
    /// ground-truth identities.
    pub eval_accuracy: Option<f64>,
    pub retrieval: Option<RetrievalSummary>,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

/// Shared pipeline prefix: everything up to identity centroids, identical
/// across ablation cells that differ only in mining regime / loss mode.
pub struct PipelinePrefix {
    pub train: LabeledDataset,
    pub train_flipped: Vec<bool>,
    pub eval: LabeledDataset,
    pub eval_truth: Vec<u32>,
    pub classifier: Classifier,
    pub cleaning: Option<CleaningReport>,
    pub classifier_epochs: Vec<EpochReport>,
    pub centroids: Vec<IdentityCentroid>,
    pub timings: Vec<(String, f64)>,
}

fn timed<T>(timings: &mut Vec<(String, f64)>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| Error::Config(format!("stage {stage}: {e}")))?;
    timings.push((stage.to_string(), start.elapsed().as_secs_f64()));
    Ok(out)
}

/// Runs generation, holdout split, cleaning (when enabled), classifier
/// training, and centroid extraction.
pub fn build_prefix(cfg: &PipelineConfig) -> Result<PipelinePrefix> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let (full, truth) = timed(&mut timings, "gen-data", || {
        generate_synthetic(&cfg.synthetic_spec())
    })?;
    build_prefix_from(cfg, full, Some(&truth), timings)
}

/// [`build_prefix`] over an externally supplied dataset. Without ground
/// truth, noise metrics are omitted and evaluation uses observed labels.
pub fn build_prefix_from(
    cfg: &PipelineConfig,
    full: LabeledDataset,
    truth: Option<&GroundTruth>,
    mut timings: Vec<(String, f64)>,
) -> Result<PipelinePrefix> {
    cfg.validate()?;
    let truth = match truth {
        Some(t) => t.clone(),
        None => GroundTruth {
            true_identity: full.samples.iter().map(|s| s.identity).collect(),
            flipped: vec![false; full.len()],
            supercluster_of_identity: Vec::new(),
        },
    };
    if truth.true_identity.len() != full.len() || truth.flipped.len() != full.len() {
        return Err(Error::Config(
            "ground truth does not align with the dataset".into(),
        ));
    }
    let (train_idx, eval_idx) = full.split_holdout(cfg.holdout_fraction);
    let train = full.subset(&train_idx);
    let train_flipped: Vec<bool> = train_idx.iter().map(|&i| truth.flipped[i]).collect();
    let eval = full.subset(&eval_idx);
    let eval_truth: Vec<u32> = eval_idx.iter().map(|&i| truth.true_identity[i]).collect();

    let (classifier, cleaning, classifier_epochs, train) = if cfg.cleaning_enabled {
        let (initial, _) = timed(&mut timings, "initial-classifier", || {
            train_initial_classifier(&train, cfg, cfg.seed)
        })?;
        let (clean, report) = timed(&mut timings, "agreement-filter", || {
            filter_by_agreement(&train, &initial, Some(&train_flipped))
        })?;
        let (retrained, epochs) = timed(&mut timings, "retrain-classifier", || {
            retrain_clean(&clean, cfg, cfg.seed)
        })?;
        (retrained, Some(report), epochs, clean)
    } else {
        let (clf, epochs) = timed(&mut timings, "classifier", || {
            train_classifier(&train, cfg, cfg.seed, "classifier")
        })?;
        (clf, None, epochs, train)
    };
    // cleaning may drop samples; flipped flags apply to the pre-clean train
    // set and are only consumed above, so the clean set replaces it here.
    let centroids = timed(&mut timings, "identity-centroids", || {
        build_identity_centroids(&train, &classifier.model)
    })?;
    Ok(PipelinePrefix {
        train,
        train_flipped,
        eval,
        eval_truth,
        classifier,
        cleaning,
        classifier_epochs,
        centroids,
        timings,
    })
}

fn build_partition(
    prefix: &PipelinePrefix,
    cfg: &PipelineConfig,
) -> Result<(Option<SubspacePartition>, Vec<f64>)> {
    match cfg.mining {
        MiningRegime::None | MiningRegime::Global => Ok((None, Vec::new())),
        MiningRegime::Random => {
            let mut p = random_partition(
                prefix.train.num_identities,
                cfg.subspaces,
                derive_seed(cfg.seed, "random-partition"),
            )?;
            p.recompute_centers(&prefix.centroids);
            Ok((Some(p), Vec::new()))
        }
        MiningRegime::Kmeans => {
            let points = if cfg.renormalize_centroids {
                renormalized(&prefix.centroids)?
            } else {
                prefix.centroids.clone()
            };
            let (p, trace) = kmeans(
                &points,
                cfg.subspaces,
                cfg.kmeans_max_iter,
                derive_seed(cfg.seed, "kmeans"),
            )?;
            Ok((Some(p), trace.objective))
        }
    }
}

/// A same/different verification pair over dataset positions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Samples `n_same` same-identity and `n_diff` different-identity pairs,
/// using the supplied ground-truth labels.
pub fn make_verification_pairs(
    labels: &[u32],
    n_same: usize,
    n_diff: usize,
    rng: &mut impl Rng,
) -> Result<Vec<VerificationPair>> {
    let mut groups: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    let identities: Vec<&Vec<usize>> = groups.values().collect();
    if multi.is_empty() || identities.len() < 2 {
        return Err(Error::Config("not enough identities for pair sampling".into()));
    }
    let mut pairs = Vec::with_capacity(n_same + n_diff);
    for _ in 0..n_same {
        let g = multi[rng.random_range(0..multi.len())];
        let two = sample_indices(rng, g.len(), 2);
        pairs.push(VerificationPair {
            a: g[two.index(0)],
            b: g[two.index(1)],
            same: true,
        });
    }
    for _ in 0..n_diff {
        let two = sample_indices(rng, identities.len(), 2);
        let ga = identities[two.index(0)];
        let gb = identities[two.index(1)];
        pairs.push(VerificationPair {
            a: ga[rng.random_range(0..ga.len())],
            b: gb[rng.random_range(0..gb.len())],
            same: false,
        });
    }
    Ok(pairs)
}

/// Sweeps the squared-distance threshold over midpoints of the sorted pair
/// distances and returns (best accuracy, chosen threshold). Accuracy ties
/// resolve to the smallest threshold.
pub fn pair_verification(
    model: &ModelParams,
    dataset: &LabeledDataset,
    pairs: &[VerificationPair],
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Config("empty pair list".into()));
    }
    let mut scored = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ea = model.embed(&dataset.samples[p.a].features)?;
        let eb = model.embed(&dataset.samples[p.b].features)?;
        scored.push((crate::embedding::squared_distance(&ea, &eb)?, p.same));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = scored.len() as f64;
    let total_same = scored.iter().filter(|(_, s)| *s).count();
    // walk candidate thresholds low to high: predict same iff d ≤ t
    let mut candidates = Vec::with_capacity(scored.len() + 1);
    candidates.push(scored[0].0 - 1.0);
    for w in scored.windows(2) {
        if w[0].0 < w[1].0 {
            candidates.push((w[0].0 + w[1].0) / 2.0);
        }
    }
    candidates.push(scored.last().unwrap().0 + 1.0);
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut same_below = 0usize;
    let mut diff_below = 0usize;
    let mut cursor = 0usize;
    for t in candidates {
        while cursor < scored.len() && scored[cursor].0 <= t {
            if scored[cursor].1 {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            cursor += 1;
        }
        let correct = same_below + (scored.len() - total_same - diff_below);
        let acc = correct as f64 / n;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok(best)
}

fn index_identity_subset(cfg: &PipelineConfig, train: &LabeledDataset) -> Result<LabeledDataset> {
    if cfg.index_identity_fraction >= 1.0 {
        return Ok(train.clone());
    }
    let present = IdentityIndex::build(train).present_identities();
    let n_keep = ((cfg.index_identity_fraction * present.len() as f64).round() as usize)
        .clamp(1, present.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "index-subset"));
    let picks = sample_indices(&mut rng, present.len(), n_keep);
    let keep: std::collections::HashSet<u32> = picks.iter().map(|i| present[i]).collect();
    let positions: Vec<usize> = train
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| keep.contains(&s.identity))
        .map(|(i, _)| i)
        .collect();
    Ok(train.subset(&positions))
}

fn evaluate_retrieval(
    index: &RetrievalIndex,
    model: &ModelParams,
    eval: &LabeledDataset,
    eval_truth: &[u32],
    thresholds: &[f64],
) -> Result<RetrievalSummary> {
    let mut labeled = Vec::with_capacity(eval.len());
    let mut agree = 0usize;
    let mut hier_ops_total = 0usize;
    let mut flat_ops = 0usize;
    for (s, &truth) in eval.samples.iter().zip(eval_truth) {
        let q = model.embed(&s.features)?;
        let hier = retrieve_hierarchical(index, q.values())?;
        let flat = retrieve_flat(index, q.values())?;
        if hier.predicted_identity == flat.predicted_identity {
            agree += 1;
        }
        hier_ops_total += hier.distance_ops;
        flat_ops = flat.distance_ops;
        labeled.push(LabeledResult {
            predicted: hier.predicted_identity,
            truth,
            confidence: hier.confidence,
        });
    }
    let curve = precision_coverage(&labeled, thresholds)?;
    Ok(RetrievalSummary {
        coverage_at_095: coverage_at_precision(&curve, 0.95),
        coverage_at_099: coverage_at_precision(&curve, 0.99),
        flat_agreement: agree as f64 / eval.len() as f64,
        mean_distance_ops_hierarchical: hier_ops_total as f64 / eval.len() as f64,
        distance_ops_flat: flat_ops,
        indexed_identities: index.num_identities(),
        curve,
    })
}

/// A finished cell: the record plus the trained artifacts behind it.
pub struct CellOutput {
    pub record: ExperimentRecord,
    pub final_model: ModelParams,
    pub index: RetrievalIndex,
    pub partition: Option<SubspacePartition>,
}

/// Runs partition → triplet training → index → evaluation on a shared
/// prefix. `cell` names the run in records and file paths.
pub fn run_cell(
    prefix: &PipelinePrefix,
    cfg: &PipelineConfig,
    cell: &str,
) -> Result<ExperimentRecord> {
    run_cell_full(prefix, cfg, cell).map(|out| out.record)
}

/// [`run_cell`], also returning the model, index, and partition.
pub fn run_cell_full(
    prefix: &PipelinePrefix,
    cfg: &PipelineConfig,
    cell: &str,
) -> Result<CellOutput> {
    let mut timings = Vec::new();
    let (partition, kmeans_objective) =
        timed(&mut timings, "partition", || build_partition(prefix, cfg))?;

    let (final_model, triplet_steps, partition) = if cfg.mining == MiningRegime::None {
        (prefix.classifier.model.clone(), Vec::new(), partition)
    } else {
        let out = timed(&mut timings, "triplet-train", || {
            train_triplet(&prefix.train, prefix.classifier.clone(), partition, cfg, cfg.seed)
        })?;
        (out.params.model, out.steps, out.partition)
    };

    let index_set = index_identity_subset(cfg, &prefix.train)?;
    let index = timed(&mut timings, "build-index", || {
        build_index(&index_set, &final_model, cell, cfg.renormalize_centroids)
    })?;

    let eval_accuracy = Some(classification_accuracy(
        &prefix.classifier,
        &prefix.eval,
        &prefix.eval_truth,
    )?);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pairs"));
    let pairs = make_verification_pairs(&prefix.eval_truth, cfg.pairs_same, cfg.pairs_diff, &mut rng)?;
    let (pair_accuracy, pair_threshold) = timed(&mut timings, "pair-verification", || {
        pair_verification(&final_model, &prefix.eval, &pairs)
    })?;
    let retrieval = timed(&mut timings, "evaluate-retrieval", || {
        evaluate_retrieval(
            &index,
            &final_model,
            &prefix.eval,
            &prefix.eval_truth,
            &cfg.thresholds(),
        )
    })?;

    let record = ExperimentRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        cell: cell.to_string(),
        config: cfg.clone(),
        cleaning: prefix.cleaning.clone(),
        classifier_epochs: prefix.classifier_epochs.clone(),
        kmeans_objective,
        triplet_steps,
        pair_accuracy: Some(pair_accuracy),
        pair_threshold: Some(pair_threshold),
        eval_accuracy,
        retrieval: Some(retrieval),
        timings,
    };
    Ok(CellOutput {
        record,
        final_model,
        index,
        partition,
    })
}

/// The full pipeline for one configuration.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<ExperimentRecord> {
    let prefix = build_prefix(cfg)?;
    let mut record = run_cell(&prefix, cfg, "pipeline")?;
    let mut timings = prefix.timings;
    timings.append(&mut record.timings);
    record.timings = timings;
    Ok(record)
}

/// The full pipeline over a supplied dataset, returning every artifact.
pub fn run_pipeline_full(
    cfg: &PipelineConfig,
    full: LabeledDataset,
    truth: Option<&GroundTruth>,
) -> Result<(PipelinePrefix, CellOutput)> {
    let prefix = build_prefix_from(cfg, full, truth, Vec::new())?;
    let out = run_cell_full(&prefix, cfg, "pipeline")?;
    Ok((prefix, out))
}

/// Mean active-triplet counts of subspace-scoped versus whole-dataset batch
/// sampling at one fixed model snapshot.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DensityReport {
    pub subspace_mean: f64,
    pub global_mean: f64,
    pub ratio: f64,
    pub batches: usize,
}

pub fn hard_triplet_density(
    dataset: &LabeledDataset,
    model: &ModelParams,
    partition: &SubspacePartition,
    cfg: &PipelineConfig,
    batches: usize,
    seed: u64,
) -> Result<DensityReport> {
    let index = IdentityIndex::build(dataset);
    let eligible = index.eligible_identities();
    let mining_cfg = cfg.mining_config();
    let embed_batch = |batch: &crate::mining::AnchorPositiveBatch| -> Result<Vec<_>> {
        batch
            .pairs
            .iter()
            .map(|&(a, p)| {
                Ok((
                    model.embed(&dataset.samples[a].features)?,
                    model.embed(&dataset.samples[p].features)?,
                ))
            })
            .collect()
    };

    let schedule = crate::subspace::subspace_schedule(partition, batches, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "density:subspace"));
    let mut subspace_total = 0usize;
    for &m in &schedule {
        let (pool, fallback) = subspace_scope(partition, m, &index, cfg.triplet_batch_size)?;
        let batch = sample_batch_from(
            dataset,
            &index,
            &pool,
            BatchScope::Subspace { index: m, fallback },
            cfg.triplet_batch_size,
            &mut rng,
        )?;
        let embeddings = embed_batch(&batch)?;
        let triplets = batch_ohnm_select(dataset, &batch, &embeddings, &mining_cfg)?;
        subspace_total += count_active(&triplets).active;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "density:global"));
    let mut global_total = 0usize;
    for _ in 0..schedule.len() {
        let batch = sample_batch_from(
            dataset,
            &index,
            &eligible,
            BatchScope::WholeDataset,
            cfg.triplet_batch_size,
            &mut rng,
        )?;
        let embeddings = embed_batch(&batch)?;
        let triplets = batch_ohnm_select(dataset, &batch, &embeddings, &mining_cfg)?;
        global_total += count_active(&triplets).active;
    }

    let n = schedule.len().max(1) as f64;
    let subspace_mean = subspace_total as f64 / n;
    let global_mean = global_total as f64 / n;
    let ratio = if global_mean > 0.0 {
        subspace_mean / global_mean
    } else if subspace_mean > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    Ok(DensityReport {
        subspace_mean,
        global_mean,
        ratio,
        batches: schedule.len(),
    })
}

// --------------------------------------------------------------- ablation

/// One ablation cell: a mining regime at a subspace count, triplet-only or
/// joint with softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellKey {
    pub regime: MiningRegime,
    pub subspaces: usize,
    pub joint: bool,
}

impl CellKey {
    pub fn name(&self) -> String {
        let loss = if self.joint { "joint" } else { "triplet" };
        match self.regime {
            MiningRegime::None => format!("softmax_{loss}"),
            MiningRegime::Global => format!("global_{loss}"),
            MiningRegime::Random => format!("random{}_{loss}", self.subspaces),
            MiningRegime::Kmeans => format!("kmeans{}_{loss}", self.subspaces),
        }
    }
}

/// The 12-cell grid: {softmax-only, global batch OHNM, random partition,
/// k-means at M/2, M, 2M} × {triplet-only, joint}.
pub fn ablation_grid(m: usize) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for &joint in &[false, true] {
        for &(regime, subspaces) in &[
            (MiningRegime::None, m),
            (MiningRegime::Global, 1),
            (MiningRegime::Random, m),
            (MiningRegime::Kmeans, (m / 2).max(1)),
            (MiningRegime::Kmeans, m),
            (MiningRegime::Kmeans, 2 * m),
        ] {
            cells.push(CellKey {
                regime,
                subspaces,
                joint,
            });
        }
    }
    cells
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub cells: Vec<(CellKey, ExperimentRecord)>,
}

/// Runs the ablation grid on a shared prefix and, when `outdir` is given,
/// writes per-cell records plus `ablation_summary.csv` and `timings.csv`
/// (the only file carrying wall-clock).
pub fn ablation_suite(cfg: &PipelineConfig, outdir: Option<&Path>) -> Result<AblationSummary> {
    let prefix = build_prefix(cfg)?;
    let mut cells = Vec::new();
    for key in ablation_grid(cfg.subspaces) {
        let mut cell_cfg = cfg.clone();
        cell_cfg.mining = key.regime;
        cell_cfg.subspaces = key.subspaces;
        cell_cfg.joint_softmax = key.joint;
        let record = run_cell(&prefix, &cell_cfg, &key.name())?;
        cells.push((key, record));
    }
    let summary = AblationSummary { cells };
    if let Some(dir) = outdir {
        write_ablation(&summary, &prefix, dir)?;
    }
    Ok(summary)
}

fn write_ablation(summary: &AblationSummary, prefix: &PipelinePrefix, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from(
        "cell,regime,subspaces,joint,pair_accuracy,pair_threshold,eval_accuracy,coverage_at_095,coverage_at_099,mean_active_triplets\n",
    );
    let mut timings = String::from("cell,stage,seconds\n");
    for (stage, secs) in &prefix.timings {
        timings.push_str(&format!("prefix,{stage},{secs}\n"));
    }
    for (key, record) in &summary.cells {
        let cell_dir = dir.join("cells").join(key.name());
        std::fs::create_dir_all(&cell_dir)?;
        write_record(record, &cell_dir.join("record.json"))?;
        emit_plots(record, &cell_dir)?;
        let mean_active = if record.triplet_steps.is_empty() {
            0.0
        } else {
            record.triplet_steps.iter().map(|s| s.active_triplets).sum::<usize>() as f64
                / record.triplet_steps.len() as f64
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            key.name(),
            key.regime.name(),
            key.subspaces,
            key.joint,
            record.pair_accuracy.unwrap_or(f64::NAN),
            record.pair_threshold.unwrap_or(f64::NAN),
            record.eval_accuracy.unwrap_or(f64::NAN),
            record.retrieval.as_ref().map_or(f64::NAN, |r| r.coverage_at_095),
            record.retrieval.as_ref().map_or(f64::NAN, |r| r.coverage_at_099),
            mean_active,
        ));
        for (stage, secs) in &record.timings {
            timings.push_str(&format!("{},{stage},{secs}\n", key.name()));
        }
    }
    std::fs::write(dir.join("ablation_summary.csv"), csv)?;
    std::fs::write(dir.join("timings.csv"), timings)?;
    Ok(())
}

/// Serializes a record as pretty JSON (timings excluded by construction).
pub fn write_record(record: &ExperimentRecord, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(record)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes the record's curves as CSV bundles plus a column manifest, and
/// re-reads the coverage column to verify it is non-increasing.
pub fn emit_plots(record: &ExperimentRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    if let Some(r) = &record.retrieval {
        let path = dir.join("precision_coverage.csv");
        let mut text = String::from("threshold,precision,coverage,answered,correct\n");
        for p in &r.curve.points {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                p.threshold, p.precision, p.coverage, p.answered, p.correct
            ));
        }
        std::fs::write(&path, text)?;
        // post-emit check on the file itself
        let reread = std::fs::read_to_string(&path)?;
        let mut prev = f64::INFINITY;
        for line in reread.lines().skip(1) {
            let coverage: f64 = line
                .split(',')
                .nth(2)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format("bad coverage column".into()))?;
            if coverage > prev {
                return Err(Error::Format("coverage column is not non-increasing".into()));
            }
            prev = coverage;
        }
        written.push(path);
    }

    let path = dir.join("active_triplets.csv");
    let mut text = String::from("step,scope,active_triplets,mean_loss,batch_size,top_k\n");
    for s in &record.triplet_steps {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.step, s.scope, s.active_triplets, s.mean_loss, s.batch_size, s.top_k
        ));
    }
    std::fs::write(&path, text)?;
    written.push(path);

    let path = dir.join("classifier_loss.csv");
    let mut text = String::from("stage,epoch,learning_rate,mean_loss\n");
    for e in &record.classifier_epochs {
        text.push_str(&format!(
            "{},{},{},{}\n",
            e.stage, e.epoch, e.learning_rate, e.mean_loss
        ));
    }
    std::fs::write(&path, text)?;
    written.push(path);

    let manifest = serde_json::json!({
        "cell": record.cell,
        "files": {
            "precision_coverage.csv": "threshold,precision,coverage,answered,correct — one row per confidence threshold",
            "active_triplets.csv": "step,scope,active_triplets,mean_loss,batch_size,top_k — one row per mining step",
            "classifier_loss.csv": "stage,epoch,learning_rate,mean_loss — one row per classifier epoch",
        },
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&manifest)?))?;
    written.push(path);
    Ok(written)
}

/// Writes every per-stage artifact of one pipeline run under `dir`.
pub fn write_pipeline_artifacts(
    record: &ExperimentRecord,
    prefix: &PipelinePrefix,
    model: &ModelParams,
    index: &RetrievalIndex,
    partition: Option<&SubspacePartition>,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    formats::write_tfds(&dir.join("train_clean.tfds"), &prefix.train)?;
    let meta = formats::CheckpointMeta {
        seed: record.seed,
        stage: "classifier".into(),
        epoch: record.classifier_epochs.len(),
        config: serde_json::to_value(&record.config)?,
    };
    formats::write_checkpoint(
        &dir.join("classifier.tfmd"),
        &prefix.classifier.model,
        Some(&prefix.classifier.head),
        &meta,
    )?;
    let meta = formats::CheckpointMeta {
        stage: "final".into(),
        ..meta
    };
    formats::write_checkpoint(&dir.join("model.tfmd"), model, None, &meta)?;
    if let Some(p) = partition {
        p.save_json(&dir.join("partition.json"))?;
    }
    formats::write_tfix(&dir.join("index.tfix"), index)?;
    write_record(record, &dir.join("record.json"))?;
    emit_plots(record, dir)?;
    Ok(())
}
