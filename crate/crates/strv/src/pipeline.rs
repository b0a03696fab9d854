//! Stage orchestration over the on-disk caches.
//!
//! Cache layout under a root directory:
//!
//! ```text
//! <root>/features/<backbone>-<preprocess_hash>/<id>.strf
//! <root>/graphs/<graph_hash>/<id>.strg
//! ```
//!
//! Every stage is idempotent: a valid cached artifact is reused, work is
//! only done for misses. A lock file serializes writers per cache root;
//! readers never take the lock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::gnn::{embed_video_with_fallback, GnnModel, VideoEmbedding};
use crate::graph::{build_graph, read_graph, write_graph, VideoGraph};
use crate::ingest::{
    extract_video, feature_file_path, read_features, regions_from_maps, Backbone,
};
use crate::manifest::ManifestEntry;
use crate::retrieval::EmbeddingIndex;
use crate::video::open_video;

/// Held while writing into a cache root. Dropping releases the lock.
pub struct CacheLock {
    path: PathBuf,
}

impl CacheLock {
    pub fn acquire(cache_root: &Path) -> Result<CacheLock> {
        std::fs::create_dir_all(cache_root)?;
        let path = cache_root.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                use std::io::Write;
                let _ = write!(f, "{}", std::process::id());
                Ok(CacheLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(format!(
                "{} exists; another process is writing this cache (remove it if stale)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Default)]
pub struct StageSummary {
    pub written: usize,
    pub skipped: usize,
    pub failures: Vec<(String, String)>,
}

fn cached_features_valid(path: &Path) -> bool {
    path.is_file() && read_features(path).is_ok()
}

/// Extract features for every manifest entry into the cache. Valid cache
/// hits are skipped; per-video failures are collected, not fatal.
pub fn extract_stage(
    entries: &[ManifestEntry],
    base_dir: &Path,
    cfg: &PipelineConfig,
    cache_root: &Path,
) -> Result<StageSummary> {
    let backbone = Backbone::from_config(&cfg.backbone)?;
    let _lock = CacheLock::acquire(cache_root)?;
    let mut summary = StageSummary::default();
    let results = crate::map_ordered(entries, |entry| -> (String, Result<bool>) {
        let out = feature_file_path(cache_root, cfg, &entry.id);
        if cached_features_valid(&out) {
            return (entry.id.clone(), Ok(false));
        }
        let work = || -> Result<()> {
            let video = open_video(&base_dir.join(&entry.path))?;
            let maps = extract_video(video.as_ref(), &backbone, cfg.rate_hz, cfg.max_frames)?;
            crate::ingest::write_features(&out, &maps)
        };
        (entry.id.clone(), work().map(|_| true))
    });
    for (id, r) in results {
        match r {
            Ok(true) => summary.written += 1,
            Ok(false) => summary.skipped += 1,
            Err(e) => summary.failures.push((id, e.to_string())),
        }
    }
    Ok(summary)
}

pub fn graph_file_path(cache_root: &Path, cfg: &PipelineConfig, video_id: &str) -> PathBuf {
    let sanitized: String = video_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    cache_root
        .join("graphs")
        .join(format!("{:016x}", cfg.graph_hash()))
        .join(format!("{sanitized}.strg"))
}

/// Build lattice graphs from cached features for every entry.
pub fn graph_stage(
    entries: &[ManifestEntry],
    cfg: &PipelineConfig,
    cache_root: &Path,
) -> Result<StageSummary> {
    let _lock = CacheLock::acquire(cache_root)?;
    let graph_hash = cfg.graph_hash();
    let mut summary = StageSummary::default();
    let results = crate::map_ordered(entries, |entry| -> (String, Result<bool>) {
        let out = graph_file_path(cache_root, cfg, &entry.id);
        if out.is_file() && read_graph(&out, cfg.dense_threshold, Some(graph_hash)).is_ok() {
            return (entry.id.clone(), Ok(false));
        }
        let work = || -> Result<()> {
            let features = read_features(&feature_file_path(cache_root, cfg, &entry.id))?;
            let regions = regions_from_maps(&features, &cfg.scales)?;
            let graph = build_graph(&entry.id, &regions, cfg.weighted, cfg.dense_threshold)?;
            write_graph(&out, &graph, graph_hash)
        };
        (entry.id.clone(), work().map(|_| true))
    });
    for (id, r) in results {
        match r {
            Ok(true) => summary.written += 1,
            Ok(false) => summary.skipped += 1,
            Err(e) => summary.failures.push((id, e.to_string())),
        }
    }
    Ok(summary)
}

/// Load the cached graph for one id.
pub fn load_graph(cache_root: &Path, cfg: &PipelineConfig, video_id: &str) -> Result<VideoGraph> {
    read_graph(
        &graph_file_path(cache_root, cfg, video_id),
        cfg.dense_threshold,
        Some(cfg.graph_hash()),
    )
}

/// Load cached graphs for a set of ids into an id-keyed map.
pub fn load_graphs(
    cache_root: &Path,
    cfg: &PipelineConfig,
    ids: &[String],
) -> Result<BTreeMap<String, VideoGraph>> {
    let loaded = crate::map_ordered(ids, |id| load_graph(cache_root, cfg, id));
    let mut out = BTreeMap::new();
    for (id, g) in ids.iter().zip(loaded) {
        out.insert(id.clone(), g?);
    }
    Ok(out)
}

/// Straight-through graph construction for an in-memory video, no cache.
pub fn graph_from_video(
    video_id: &str,
    video: &dyn crate::video::VideoSource,
    cfg: &PipelineConfig,
    backbone: &Backbone,
) -> Result<VideoGraph> {
    let maps = extract_video(video, backbone, cfg.rate_hz, cfg.max_frames)?;
    let regions = regions_from_maps(&maps, &cfg.scales)?;
    build_graph(video_id, &regions, cfg.weighted, cfg.dense_threshold)
}

/// Embed all graphs of the given ids from the cache with one model.
/// Returns the index plus the ids whose embeddings fell back to the
/// deterministic degenerate substitute.
pub fn embed_stage(
    ids: &[String],
    cfg: &PipelineConfig,
    cache_root: &Path,
    model: &GnnModel,
) -> Result<(EmbeddingIndex, Vec<String>)> {
    let results = crate::map_ordered(ids, |id| -> Result<(VideoEmbedding, bool)> {
        let graph = load_graph(cache_root, cfg, id)?;
        embed_video_with_fallback(&graph, model)
    });
    let mut index = EmbeddingIndex::new();
    let mut degenerate = Vec::new();
    for r in results {
        let (e, fell_back) = r?;
        if fell_back {
            degenerate.push(e.video_id.clone());
        }
        index.insert(e)?;
    }
    Ok((index, degenerate))
}
