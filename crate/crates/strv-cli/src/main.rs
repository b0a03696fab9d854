//! `strv` — spatio-temporal video retrieval pipeline.
//!
//! Subcommands cover the whole flow: `synth` builds a labeled toy corpus,
//! `extract` caches backbone features, `graph` builds lattice graphs,
//! `train` fits the GNN with metric learning, `embed` produces the
//! embedding store, `search` ranks candidates for a query, `eval`
//! computes mAP reports, `attn` renders attention heat maps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use strv::config::{derive_seed, LossKind, OperatorKind, PipelineConfig};
use strv::error::{Error, ErrorCategory};
use strv::gnn::GnnModel;
use strv::manifest::{read_manifest, ManifestEntry, Split};
use strv::retrieval::{
    evaluate_map, read_embeddings, read_relevance, sample_distractors, write_embeddings,
    EvalReport,
};
use strv::synth::{Corpus, CorpusSpec};
use strv::train::{
    fit, pairs_from_relevance, split_validation, subsample_relevance, FitOptions, LossConfig,
    TrainData, TrainState,
};

#[derive(Parser)]
#[command(name = "strv", version, about = "spatio-temporal lattice-graph video retrieval")]
struct Cli {
    /// JSON config file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Cache root (overrides the STRV_CACHE_ROOT environment variable).
    #[arg(long, global = true)]
    cache_root: Option<PathBuf>,

    #[command(flatten)]
    overrides: ConfigOverrides,

    #[command(subcommand)]
    command: Command,
}

/// Flag-level overrides; precedence: flag > config file > default.
#[derive(Args, Clone)]
struct ConfigOverrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_bool)]
    weighted: Option<bool>,
    #[arg(long, global = true, value_enum)]
    operator: Option<OperatorArg>,
    #[arg(long, global = true, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, global = true)]
    margin: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    #[arg(long, global = true)]
    rate_hz: Option<f64>,
    #[arg(long, global = true)]
    max_frames: Option<usize>,
    #[arg(long, global = true)]
    embed_dim: Option<usize>,
    /// Seeded fraction of training groups to use (ablation axis).
    #[arg(long, global = true)]
    train_ratio: Option<f64>,
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("expected true/false, got {other}")),
    }
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum OperatorArg {
    VanillaGcn,
    ClusterGcn,
    Sgcn,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum LossArg {
    Triplet,
    Contrastive,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic near-duplicate corpus with manifest and
    /// relevance files.
    Synth {
        /// Output directory for clips, manifest and relevance files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        groups: usize,
        #[arg(long, default_value_t = 50)]
        distractors: usize,
        #[arg(long, default_value_t = 6)]
        frames: usize,
    },
    /// Extract backbone feature maps for every manifest entry into the cache.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Build spatio-temporal lattice graphs from cached features.
    Graph {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the GNN with triplet/contrastive metric learning.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Training relevance file (JSON-lines query/positives/negatives).
        #[arg(long)]
        relevance: PathBuf,
        /// Best-model checkpoint output; the resumable optimizer state and
        /// the per-batch training log land next to it with `.state.strw`
        /// and `.log.jsonl` extensions.
        #[arg(long)]
        out: PathBuf,
        /// Resume from `<out>.state` if present.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Embed manifest entries with a trained checkpoint into an embedding
    /// store.
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge embedding stores into one index, rejecting mixed configs and
    /// duplicate ids.
    Index {
        /// Input stores, merged in order.
        #[arg(long, required = true, num_args = 1..)]
        stores: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank stored candidates against a query id.
    Search {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Evaluate retrieval mAP over a relevance file, optionally with
    /// seeded distractors from the manifest's distractor split.
    Eval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        relevance: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render per-frame attention heat maps for one video.
    Attn {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long, value_enum, default_value = "star-gnn")]
        mode: ModeArg,
        /// Required for star-gnn mode.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum ModeArg {
    StarGnn,
    Static,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.weighted {
        cfg.weighted = v;
    }
    if let Some(v) = o.operator {
        cfg.operator_kind = match v {
            OperatorArg::VanillaGcn => OperatorKind::VanillaGcn,
            OperatorArg::ClusterGcn => OperatorKind::ClusterGcn,
            OperatorArg::Sgcn => OperatorKind::Sgcn,
        };
    }
    if let Some(v) = o.loss {
        cfg.loss_kind = match v {
            LossArg::Triplet => LossKind::Triplet,
            LossArg::Contrastive => LossKind::Contrastive,
        };
    }
    if let Some(v) = o.margin {
        cfg.margin = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = o.rate_hz {
        cfg.rate_hz = v;
    }
    if let Some(v) = o.max_frames {
        cfg.max_frames = v;
    }
    if let Some(v) = o.embed_dim {
        cfg.embed_dim = v;
    }
    if let Some(v) = o.train_ratio {
        cfg.train_ratio = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cache_root(cli: &Cli) -> PathBuf {
    cli.cache_root
        .clone()
        .or_else(|| std::env::var_os("STRV_CACHE_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("strv-cache"))
}

fn manifest_base(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn now_s() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let cache = cache_root(cli);
    match &cli.command {
        Command::Synth {
            out,
            groups,
            distractors,
            frames,
        } => {
            let spec = CorpusSpec {
                seed: cfg.seed,
                n_groups: *groups,
                n_distractors: *distractors,
                frames_per_clip: *frames,
                ..CorpusSpec::default()
            };
            let corpus = Corpus::generate(&spec);
            corpus.materialize(out)?;
            println!(
                "wrote {} clips ({} labeled groups, {} distractors) under {}",
                corpus.clips.len(),
                groups,
                distractors,
                out.display()
            );
            Ok(())
        }
        Command::Extract { manifest } => {
            let entries = read_manifest(manifest)?;
            let base = manifest_base(manifest);
            let summary = strv::pipeline::extract_stage(&entries, &base, &cfg, &cache)?;
            for (id, err) in &summary.failures {
                eprintln!("extract failed for {id}: {err}");
            }
            println!(
                "extracted {} videos, {} cache hits, {} failures",
                summary.written,
                summary.skipped,
                summary.failures.len()
            );
            if summary.failures.len() == entries.len() {
                return Err(Error::Input("every video failed extraction".into()));
            }
            Ok(())
        }
        Command::Graph { manifest } => {
            let entries = read_manifest(manifest)?;
            let summary = strv::pipeline::graph_stage(&entries, &cfg, &cache)?;
            for (id, err) in &summary.failures {
                eprintln!("graph build failed for {id}: {err}");
            }
            println!(
                "built {} graphs, {} cache hits, {} failures",
                summary.written,
                summary.skipped,
                summary.failures.len()
            );
            if summary.failures.len() == entries.len() {
                return Err(Error::Input("every graph build failed".into()));
            }
            Ok(())
        }
        Command::Train {
            manifest,
            relevance,
            out,
            resume,
        } => cmd_train(&cfg, &cache, manifest, relevance, out, *resume),
        Command::Embed {
            manifest,
            checkpoint,
            out,
        } => {
            let entries = read_manifest(manifest)?;
            let model = strv::gnn::load_checkpoint(checkpoint, Some(cfg.model_hash()))?;
            let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
            let (index, degenerate) = strv::pipeline::embed_stage(&ids, &cfg, &cache, &model)?;
            for id in &degenerate {
                eprintln!("degenerate embedding for {id}; deterministic fallback substituted");
            }
            write_embeddings(out, &index, cfg.model_hash())?;
            println!(
                "embedded {} videos into {} ({} degenerate)",
                index.len(),
                out.display(),
                degenerate.len()
            );
            Ok(())
        }
        Command::Index { stores, out } => {
            let mut merged = strv::retrieval::EmbeddingIndex::new();
            for store in stores {
                let part = read_embeddings(store, Some(cfg.model_hash()))?;
                for id in part.ids() {
                    if merged.get(id).is_some() {
                        return Err(Error::Input(format!(
                            "duplicate id {id} while merging {}",
                            store.display()
                        )));
                    }
                }
                let ids: Vec<String> = part.ids().cloned().collect();
                for id in ids {
                    let vector = part.get(&id).unwrap().to_vec();
                    merged.insert(strv::gnn::VideoEmbedding {
                        video_id: id,
                        vector,
                    })?;
                }
            }
            write_embeddings(out, &merged, cfg.model_hash())?;
            println!("merged {} embeddings into {}", merged.len(), out.display());
            Ok(())
        }
        Command::Search { store, query, top } => {
            let index = read_embeddings(store, None)?;
            let qvec = index
                .get(query)
                .ok_or_else(|| Error::UnknownId(query.clone()))?
                .to_vec();
            let candidates: BTreeSet<String> =
                index.ids().filter(|id| *id != query).cloned().collect();
            let ranked = strv::retrieval::rank(&qvec, &index, &candidates)?;
            for (rank_pos, (id, score)) in ranked.iter().take(*top).enumerate() {
                println!("{:>3}  {score:+.6}  {id}", rank_pos + 1);
            }
            Ok(())
        }
        Command::Eval {
            store,
            relevance,
            manifest,
            distractors,
            out,
        } => {
            let index = read_embeddings(store, Some(cfg.model_hash()))?;
            let queries = read_relevance(relevance)?;
            let chosen = if *distractors > 0 {
                let manifest_path = manifest.as_ref().ok_or_else(|| {
                    Error::Config("--manifest required when --distractors > 0".into())
                })?;
                let entries = read_manifest(manifest_path)?;
                let pool: Vec<String> = entries
                    .iter()
                    .filter(|e| e.split == Split::Distractor)
                    .map(|e| e.id.clone())
                    .collect();
                if pool.len() < *distractors {
                    return Err(Error::Input(format!(
                        "distractor pool has {} videos, {} requested",
                        pool.len(),
                        distractors
                    )));
                }
                sample_distractors(&pool, *distractors, cfg.seed)
            } else {
                Vec::new()
            };
            let (map, per_query) = evaluate_map(&index, &queries, &chosen)?;
            let report = EvalReport {
                map,
                per_query,
                distractor_count: chosen.len(),
                seed: cfg.seed,
                config_hash: format!("{:016x}", cfg.model_hash()),
            };
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                std::fs::write(path, &text)?;
                if !chosen.is_empty() {
                    // persist the sampled ids so the table is reproducible
                    std::fs::write(
                        path.with_extension("distractors.json"),
                        serde_json::to_string_pretty(&chosen)?,
                    )?;
                }
            }
            println!("mAP {map:.4} over {} queries ({} distractors)", report.per_query.len(), chosen.len());
            Ok(())
        }
        Command::Attn {
            manifest,
            video,
            mode,
            checkpoint,
            out,
        } => {
            let entries = read_manifest(manifest)?;
            let entry: &ManifestEntry = entries
                .iter()
                .find(|e| e.id == *video)
                .ok_or_else(|| Error::UnknownId(video.clone()))?;
            let base = manifest_base(manifest);
            let source = strv::video::open_video(&base.join(&entry.path))?;
            let (mode, model): (strv::attnviz::AttentionMode, Option<GnnModel>) = match mode {
                ModeArg::Static => (strv::attnviz::AttentionMode::Static, None),
                ModeArg::StarGnn => {
                    let ck = checkpoint.as_ref().ok_or_else(|| {
                        Error::Config("--checkpoint required for star-gnn mode".into())
                    })?;
                    (
                        strv::attnviz::AttentionMode::StarGnn,
                        Some(strv::gnn::load_checkpoint(ck, Some(cfg.model_hash()))?),
                    )
                }
            };
            let rendered = strv::attnviz::render_sequence(
                out,
                source.as_ref(),
                video,
                &cache,
                &cfg,
                model.as_ref(),
                mode,
            )?;
            println!(
                "wrote {} heat maps and {} for {video}",
                rendered.pngs.len(),
                rendered.sidecar.display()
            );
            Ok(())
        }
    }
}

fn cmd_train(
    cfg: &PipelineConfig,
    cache: &Path,
    manifest: &Path,
    relevance: &Path,
    out: &Path,
    resume: bool,
) -> Result<(), Error> {
    let entries = read_manifest(manifest)?;
    let records = read_relevance(relevance)?;
    if records.is_empty() {
        return Err(Error::Input("relevance file has no queries".into()));
    }
    let records = subsample_relevance(&records, cfg.train_ratio, cfg.seed);
    let (train_records, val_records) = split_validation(&records, cfg.val_ratio, cfg.seed);
    let (pairs, positive_sets) = pairs_from_relevance(&train_records);

    // only the ids training touches need graphs
    let mut needed: BTreeSet<String> = pairs.iter().flat_map(|(a, p)| [a.clone(), p.clone()]).collect();
    for q in &val_records {
        needed.insert(q.query.clone());
        needed.extend(q.positives.iter().cloned());
        needed.extend(q.negatives.iter().cloned());
    }
    let known: BTreeSet<String> = entries.iter().map(|e| e.id.clone()).collect();
    if let Some(missing) = needed.iter().find(|id| !known.contains(*id)) {
        return Err(Error::UnknownId(missing.clone()));
    }
    let ids: Vec<String> = needed.into_iter().collect();
    let graphs = strv::pipeline::load_graphs(cache, cfg, &ids)?;
    let feature_dim = graphs.values().next().map(|g| g.feature_dim()).unwrap_or(0);

    let state_path = out.with_extension("state.strw");
    let mut state = if resume && state_path.is_file() {
        let st = strv::train::load_train_checkpoint(&state_path, Some(cfg.model_hash()))?;
        println!("resuming from epoch {}", st.epoch);
        st
    } else {
        let model = GnnModel::init(
            cfg.operator_kind,
            &[feature_dim, cfg.embed_dim],
            cfg.aggregator,
            cfg.sgcn_power,
            derive_seed(cfg.seed, "init", 0),
            cfg.model_hash(),
        );
        TrainState::new(model, cfg.seed)
    };

    // fresh runs start a fresh log; resumed runs append to it
    let log_path = out.with_extension("log.jsonl");
    let resuming = state.epoch > 0;
    let mut log = std::io::BufWriter::new(if resuming {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?
    } else {
        std::fs::File::create(&log_path)?
    });
    let data = TrainData {
        graphs: &graphs,
        pairs,
        positive_sets,
        val_queries: val_records,
    };
    let report = fit(
        &mut state,
        &data,
        &LossConfig {
            kind: cfg.loss_kind,
            margin: cfg.margin,
        },
        &FitOptions {
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            max_epochs: cfg.max_epochs,
            patience: cfg.patience,
        },
        |stats| {
            use std::io::Write;
            for b in &stats.batches {
                let _ = writeln!(
                    log,
                    "{}",
                    serde_json::json!({
                        "step": b.step,
                        "loss": b.loss,
                        "lr": b.lr,
                        "timestamp": now_s(),
                    })
                );
            }
            let _ = log.flush();
            println!(
                "epoch {:>3}: loss {:.4} val mAP {:.4}",
                stats.epoch, stats.train_loss, stats.val_map
            );
        },
    )?;

    strv::gnn::save_checkpoint(out, &report.best_model)?;
    strv::train::save_train_checkpoint(&state_path, &state)?;
    println!(
        "best validation mAP {:.4}; checkpoint {} (resume state {})",
        report.best_val_map,
        out.display(),
        state_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.category() {
                ErrorCategory::Usage => ExitCode::from(1),
                ErrorCategory::Data => ExitCode::from(2),
                ErrorCategory::Numeric => ExitCode::from(3),
            }
        }
    }
}
