//! Command-line driver for the tripletspace engine: synthetic data
//! generation, noise cleaning, training, partitioning, index building,
//! queries, evaluation, ablations, and plot-data emission.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use tripletspace::config::PipelineConfig;
use tripletspace::dataset::LabeledDataset;
use tripletspace::derive_seed;
use tripletspace::formats;
use tripletspace::model::ModelParams;
use tripletspace::pipeline;
use tripletspace::retrieval;
use tripletspace::subspace;
use tripletspace::synth::{generate_synthetic, GroundTruth};

#[derive(Parser)]
#[command(name = "tripletspace", version, about = "Embedding training with subspace hard-triplet mining and hierarchical identity retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set margin=0.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, seed: Option<u64>) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_kv_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        for kv in &self.overrides {
            let (key, value) = kv
                .split_once('=')
                .with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchically-clustered identity dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Output dataset (TFDS).
        #[arg(long)]
        out: PathBuf,
        /// Optional ground-truth sidecar (JSON).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Three-step noise removal: classifier → agreement filter → retrain.
    Clean {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        /// Cleaned dataset output (TFDS).
        #[arg(long)]
        out: PathBuf,
        /// Cleaning report output (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Retrained-classifier checkpoint output (TFMD).
        #[arg(long)]
        model_out: Option<PathBuf>,
        /// Ground-truth sidecar for noise precision/recall.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the training pipeline on a dataset (or freshly generated data).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Input dataset (TFDS or features CSV); generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Directory for checkpoints, records, and curves.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cluster identity centroids into subspaces.
    Partition {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Classifier checkpoint used to extract identity centroids.
        #[arg(long)]
        model: PathBuf,
        /// kmeans or random.
        #[arg(long, default_value = "kmeans")]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a dataset and build the two-layer retrieval index.
    BuildIndex {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tag recorded inside the index.
        #[arg(long, default_value = "model")]
        tag: String,
    },
    /// Retrieve identities for query samples.
    Query {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        index: PathBuf,
        /// Query features (TFDS or CSV).
        #[arg(long)]
        data: PathBuf,
        /// Model checkpoint that embeds raw features.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Treat input rows as embeddings, skipping the model.
        #[arg(long)]
        pre_embedded: bool,
        /// Exhaustive scan instead of the two-layer search.
        #[arg(long)]
        flat: bool,
        /// JSON results output (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precision/coverage evaluation of an index over labeled queries.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Ground-truth sidecar; observed labels are used when omitted.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Curve CSV output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 12-cell mining-regime × loss-mode ablation grid.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-emit the CSV plot bundles of a saved experiment record.
    EmitPlots {
        /// record.json produced by train or ablate.
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let ds = if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        formats::read_features_csv(path)
    } else {
        formats::read_tfds(path)
    };
    ds.with_context(|| format!("loading dataset {}", path.display()))
}

/// Reorders ground-truth rows to the dataset's sample order via sample_id.
fn align_truth(truth: &GroundTruth, ds: &LabeledDataset) -> Result<GroundTruth> {
    let n = truth.true_identity.len() as u64;
    let mut true_identity = Vec::with_capacity(ds.len());
    let mut flipped = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        if s.sample_id >= n {
            bail!(
                "sample_id {} outside ground truth of {} rows",
                s.sample_id,
                n
            );
        }
        true_identity.push(truth.true_identity[s.sample_id as usize]);
        flipped.push(truth.flipped[s.sample_id as usize]);
    }
    Ok(GroundTruth {
        true_identity,
        flipped,
        supercluster_of_identity: truth.supercluster_of_identity.clone(),
    })
}

fn load_model(path: &Path) -> Result<ModelParams> {
    let (model, _) = formats::read_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, seed, out, truth } => {
            let cfg = config.load(Some(seed))?;
            let (ds, gt) = generate_synthetic(&cfg.synthetic_spec())?;
            formats::write_tfds(&out, &ds)?;
            if let Some(path) = truth {
                gt.save_json(&path)?;
            }
            println!(
                "wrote {} samples over {} identities to {}",
                ds.len(),
                ds.num_identities,
                out.display()
            );
        }
        Command::Clean { config, seed, data, out, report, model_out, truth } => {
            let cfg = config.load(seed)?;
            let ds = load_dataset(&data)?;
            let gt = truth
                .map(|p| {
                    GroundTruth::load_json(&p)
                        .map_err(anyhow::Error::from)
                        .and_then(|t| align_truth(&t, &ds))
                })
                .transpose()?;
            let (initial, _) = tripletspace::cleaning::train_initial_classifier(&ds, &cfg, cfg.seed)?;
            let (clean, rep) = tripletspace::cleaning::filter_by_agreement(
                &ds,
                &initial,
                gt.as_ref().map(|t| t.flipped.as_slice()),
            )?;
            let (retrained, epochs) = tripletspace::cleaning::retrain_clean(&clean, &cfg, cfg.seed)?;
            formats::write_tfds(&out, &clean)?;
            if let Some(path) = report {
                std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&rep)?))?;
            }
            if let Some(path) = model_out {
                let meta = formats::CheckpointMeta {
                    seed: cfg.seed,
                    stage: "cleaning:retrain".into(),
                    epoch: epochs.len(),
                    config: serde_json::to_value(&cfg)?,
                };
                formats::write_checkpoint(&path, &retrained.model, Some(&retrained.head), &meta)?;
            }
            println!(
                "kept {} removed {} ({} -> {})",
                rep.kept,
                rep.removed,
                data.display(),
                out.display()
            );
        }
        Command::Train { config, seed, data, truth, out_dir } => {
            let cfg = config.load(Some(seed))?;
            let (full, gt) = match data {
                Some(path) => {
                    let ds = load_dataset(&path)?;
                    let gt = truth
                        .map(|p| {
                            GroundTruth::load_json(&p)
                                .map_err(anyhow::Error::from)
                                .and_then(|t| align_truth(&t, &ds))
                        })
                        .transpose()?;
                    (ds, gt)
                }
                None => {
                    let (ds, gt) = generate_synthetic(&cfg.synthetic_spec())?;
                    (ds, Some(gt))
                }
            };
            let (prefix, out) = pipeline::run_pipeline_full(&cfg, full, gt.as_ref())?;
            pipeline::write_pipeline_artifacts(
                &out.record,
                &prefix,
                &out.final_model,
                &out.index,
                out.partition.as_ref(),
                &out_dir,
            )?;
            let mut timings = String::from("stage,seconds\n");
            for (stage, secs) in prefix.timings.iter().chain(&out.record.timings) {
                timings.push_str(&format!("{stage},{secs}\n"));
            }
            std::fs::write(out_dir.join("timings.csv"), timings)?;
            println!(
                "pair accuracy {:.4}, artifacts in {}",
                out.record.pair_accuracy.unwrap_or(f64::NAN),
                out_dir.display()
            );
        }
        Command::Partition { config, data, model, method, out } => {
            let cfg = config.load(None)?;
            let ds = load_dataset(&data)?;
            let model = load_model(&model)?;
            let centroids = subspace::build_identity_centroids(&ds, &model)?;
            let partition = match method.as_str() {
                "kmeans" => {
                    let points = if cfg.renormalize_centroids {
                        subspace::renormalized(&centroids)?
                    } else {
                        centroids
                    };
                    subspace::kmeans(
                        &points,
                        cfg.subspaces,
                        cfg.kmeans_max_iter,
                        derive_seed(cfg.seed, "kmeans"),
                    )?
                    .0
                }
                "random" => {
                    let mut p = subspace::random_partition(
                        ds.num_identities,
                        cfg.subspaces,
                        derive_seed(cfg.seed, "random-partition"),
                    )?;
                    p.recompute_centers(&centroids);
                    p
                }
                other => bail!("unknown partition method {other:?} (kmeans|random)"),
            };
            partition.save_json(&out)?;
            println!("partitioned into {} subspaces: sizes {:?}", partition.m, partition.sizes);
        }
        Command::BuildIndex { config, data, model, out, tag } => {
            let cfg = config.load(None)?;
            let ds = load_dataset(&data)?;
            let model = load_model(&model)?;
            let index = retrieval::build_index(&ds, &model, &tag, cfg.renormalize_centroids)?;
            formats::write_tfix(&out, &index)?;
            println!(
                "indexed {} members across {} identities",
                index.total_members(),
                index.num_identities()
            );
        }
        Command::Query { config, index, data, model, pre_embedded, flat, out } => {
            let _cfg = config.load(None)?;
            let index = formats::read_tfix(&index)?;
            let ds = load_dataset(&data)?;
            let model = match (&model, pre_embedded) {
                (Some(path), false) => Some(load_model(path)?),
                (None, true) => None,
                (Some(_), true) => bail!("--model and --pre-embedded are mutually exclusive"),
                (None, false) => bail!("either --model or --pre-embedded is required"),
            };
            let mut results = Vec::with_capacity(ds.len());
            for s in &ds.samples {
                let vector = match &model {
                    Some(m) => m.embed(&s.features)?.into_values(),
                    None => s.features.clone(),
                };
                let r = if flat {
                    retrieval::retrieve_flat(&index, &vector)?
                } else {
                    retrieval::retrieve_hierarchical(&index, &vector)?
                };
                results.push(serde_json::json!({
                    "query_sample_id": s.sample_id,
                    "result": r,
                }));
            }
            let text = format!("{}\n", serde_json::to_string_pretty(&results)?);
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
        Command::Evaluate { config, index, model, data, truth, out } => {
            let cfg = config.load(None)?;
            let index = formats::read_tfix(&index)?;
            let model = load_model(&model)?;
            let ds = load_dataset(&data)?;
            let labels: Vec<u32> = match truth {
                Some(path) => align_truth(&GroundTruth::load_json(&path)?, &ds)?.true_identity,
                None => ds.samples.iter().map(|s| s.identity).collect(),
            };
            let mut labeled = Vec::with_capacity(ds.len());
            for (s, &label) in ds.samples.iter().zip(&labels) {
                let e = model.embed(&s.features)?;
                let r = retrieval::retrieve_hierarchical(&index, e.values())?;
                labeled.push(retrieval::LabeledResult {
                    predicted: r.predicted_identity,
                    truth: label,
                    confidence: r.confidence,
                });
            }
            let curve = retrieval::precision_coverage(&labeled, &cfg.thresholds())?;
            let mut text = String::from("threshold,precision,coverage,answered,correct\n");
            for p in &curve.points {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.threshold, p.precision, p.coverage, p.answered, p.correct
                ));
            }
            std::fs::write(&out, text)?;
            println!(
                "coverage@0.95 = {:.4}, coverage@0.99 = {:.4} ({} queries)",
                retrieval::coverage_at_precision(&curve, 0.95),
                retrieval::coverage_at_precision(&curve, 0.99),
                curve.total
            );
        }
        Command::Ablate { config, seed, out_dir } => {
            let cfg = config.load(seed)?;
            let summary = pipeline::ablation_suite(&cfg, Some(&out_dir))?;
            for (key, record) in &summary.cells {
                println!(
                    "{:<24} pair_accuracy {:.4}",
                    key.name(),
                    record.pair_accuracy.unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", out_dir.join("ablation_summary.csv").display());
        }
        Command::EmitPlots { record, out_dir } => {
            let text = std::fs::read_to_string(&record)?;
            let record: pipeline::ExperimentRecord = serde_json::from_str(&text)?;
            let written = pipeline::emit_plots(&record, &out_dir)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
