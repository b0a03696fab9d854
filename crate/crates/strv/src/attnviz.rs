//! Self-attention heat maps: how much does each frame region agree with
//! the final video embedding?
//!
//! Per region node, the score is the cosine similarity between the video
//! embedding and that node's post-processed feature, clamped to [0, 1].
//! Scores are splatted back onto the feature grid — every cell averages
//! the scores of the windows covering it — and the grids of one video
//! share a single normalization so emphasis is comparable across frames.
//!
//! Two modes: `star_gnn` scores the GNN's pre-aggregation node outputs
//! against the GNN embedding; `static` scores the raw region features
//! against the static mean-pooled baseline embedding. The static mode
//! cannot tell identical frames apart (identical content, identical
//! map); the graph mode sees temporal context.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::gnn::{postprocess, static_embedding, GnnModel};
use crate::graph::{build_graph, NodeKey, VideoGraph};
use crate::ingest::{
    feature_file_path, positions_per_axis, read_features, regions_from_maps, sample_frames,
    FrameTensor, INPUT_SIZE,
};
use crate::linalg::{dot, Mat};
use crate::video::VideoSource;

/// Overlay opacity at full attention; fixed so figures reproduce.
const OVERLAY_ALPHA: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    StarGnn,
    Static,
}

impl AttentionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionMode::StarGnn => "star_gnn",
            AttentionMode::Static => "static",
        }
    }
}

/// One frame's attention grid, normalized per video to max 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionMap {
    pub frame_index: u32,
    pub mode: AttentionMode,
    pub height: usize,
    pub width: usize,
    /// Row-major grid values in [0, 1].
    pub grid: Vec<f64>,
}

/// Cosine between the video embedding and each node's post-processed
/// feature, clamped to [0, 1]. Degenerate (constant) node features score 0.
pub fn node_attention(embedding: &[f64], node_outputs: &Mat) -> Result<Vec<f64>> {
    if node_outputs.cols() != embedding.len() {
        return Err(Error::Contract(format!(
            "node feature dim {} does not match embedding dim {}",
            node_outputs.cols(),
            embedding.len()
        )));
    }
    let mut scores = Vec::with_capacity(node_outputs.rows());
    for r in 0..node_outputs.rows() {
        let score = match postprocess(node_outputs.row(r)) {
            Ok(unit) => dot(embedding, &unit).clamp(0.0, 1.0),
            Err(_) => 0.0,
        };
        scores.push(score);
    }
    Ok(scores)
}

/// How many configured windows cover each cell of the grid.
pub fn cover_counts(grid: (usize, usize), scales: &[(usize, usize)]) -> Vec<usize> {
    let (h, w) = grid;
    let mut counts = vec![0usize; h * w];
    for &(win, stride) in scales {
        let npy = positions_per_axis(h, win, stride);
        let npx = positions_per_axis(w, win, stride);
        for py in 0..npy {
            for px in 0..npx {
                for y in py * stride..py * stride + win {
                    for x in px * stride..px * stride + win {
                        counts[y * w + x] += 1;
                    }
                }
            }
        }
    }
    counts
}

/// Splat one frame's region scores onto the feature grid: each cell
/// accumulates the scores of every window covering it, divided by its
/// cover count. Not yet normalized per video.
pub fn project_to_grid(
    scores: &[(NodeKey, f64)],
    grid: (usize, usize),
    scales: &[(usize, usize)],
) -> Vec<f64> {
    let (h, w) = grid;
    let mut acc = vec![0.0f64; h * w];
    for &(key, score) in scores {
        let (win, stride) = scales[(key.scale_index - 1) as usize];
        let npx = positions_per_axis(w, win, stride);
        let py = key.position_index as usize / npx;
        let px = key.position_index as usize % npx;
        for y in py * stride..py * stride + win {
            for x in px * stride..px * stride + win {
                acc[y * w + x] += score;
            }
        }
    }
    let counts = cover_counts(grid, scales);
    for (a, &c) in acc.iter_mut().zip(&counts) {
        if c > 0 {
            *a /= c as f64;
        }
    }
    acc
}

/// Attention maps for every frame of a video, normalized per video.
pub fn attention_maps(
    graph: &VideoGraph,
    model: Option<&GnnModel>,
    mode: AttentionMode,
    grid: (usize, usize),
    scales: &[(usize, usize)],
) -> Result<Vec<AttentionMap>> {
    let (embedding, signal) = match mode {
        AttentionMode::StarGnn => {
            let model = model.ok_or_else(|| {
                Error::Config("star_gnn attention needs a trained model".into())
            })?;
            let trace = model.forward(graph)?;
            (trace.embedding.clone(), trace.node_outputs)
        }
        AttentionMode::Static => {
            let (e, _) = static_embedding(graph)?;
            (e.vector, graph.features.clone())
        }
    };
    let scores = node_attention(&embedding, &signal)?;

    let mut frames: Vec<u32> = graph.keys.iter().map(|k| k.frame_index).collect();
    frames.sort_unstable();
    frames.dedup();

    let mut maps = Vec::with_capacity(frames.len());
    for &f in &frames {
        let frame_scores: Vec<(NodeKey, f64)> = graph
            .keys
            .iter()
            .zip(&scores)
            .filter(|(k, _)| k.frame_index == f)
            .map(|(k, s)| (*k, *s))
            .collect();
        let values = project_to_grid(&frame_scores, grid, scales);
        maps.push(AttentionMap {
            frame_index: f,
            mode,
            height: grid.0,
            width: grid.1,
            grid: values,
        });
    }
    // one normalization across the whole video
    let max = maps
        .iter()
        .flat_map(|m| m.grid.iter().copied())
        .fold(0.0f64, f64::max);
    if max > 0.0 {
        for m in &mut maps {
            for v in &mut m.grid {
                *v /= max;
            }
        }
    }
    Ok(maps)
}

fn heat_color(v: f64) -> [f64; 3] {
    // blue -> cyan -> yellow -> red ramp
    let v = v.clamp(0.0, 1.0);
    if v < 1.0 / 3.0 {
        let t = v * 3.0;
        [0.0, t, 1.0]
    } else if v < 2.0 / 3.0 {
        let t = (v - 1.0 / 3.0) * 3.0;
        [t, 1.0, 1.0 - t]
    } else {
        let t = (v - 2.0 / 3.0) * 3.0;
        [1.0, 1.0 - t * 0.6, 0.0]
    }
}

fn bilinear(grid: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let gy = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let gx = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
    let y0 = gy.floor() as usize;
    let x0 = gx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = gy - y0 as f64;
    let fx = gx - x0 as f64;
    let a = grid[y0 * w + x0] * (1.0 - fx) + grid[y0 * w + x1] * fx;
    let b = grid[y1 * w + x0] * (1.0 - fx) + grid[y1 * w + x1] * fx;
    a * (1.0 - fy) + b * fy
}

/// Alpha-blend an attention map over its frame.
pub fn overlay_attention(frame: &RgbImage, map: &AttentionMap) -> RgbImage {
    let (w, h) = frame.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let v = bilinear(
            &map.grid,
            map.height,
            map.width,
            (y as f64 + 0.5) / h as f64,
            (x as f64 + 0.5) / w as f64,
        );
        let heat = heat_color(v);
        let alpha = OVERLAY_ALPHA * v;
        let base = frame.get_pixel(x, y);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let blended = (1.0 - alpha) * base.0[c] as f64 + alpha * heat[c] * 255.0;
            out[c] = blended.clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

/// JSON sidecar written next to the rendered frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionSidecar {
    pub video_id: String,
    pub mode: AttentionMode,
    pub maps: Vec<AttentionMap>,
}

#[derive(Debug)]
pub struct RenderedSequence {
    pub pngs: Vec<PathBuf>,
    pub sidecar: PathBuf,
    pub maps: Vec<AttentionMap>,
}

/// Render per-frame heat-map overlays for one video: reads the cached
/// features, rebuilds the graph, scores attention, re-decodes the frames
/// and writes `{video_id}_{frame:04}_{mode}.png` plus a JSON sidecar.
pub fn render_sequence(
    out_dir: &Path,
    video: &dyn VideoSource,
    video_id: &str,
    cache_root: &Path,
    cfg: &PipelineConfig,
    model: Option<&GnnModel>,
    mode: AttentionMode,
) -> Result<RenderedSequence> {
    let feature_path = feature_file_path(cache_root, cfg, video_id);
    if !feature_path.is_file() {
        return Err(Error::PipelineOrder(format!(
            "no cached features for {video_id} at {}; run extraction first",
            feature_path.display()
        )));
    }
    let maps_raw = read_features(&feature_path)?;
    let grid = (maps_raw[0].height, maps_raw[0].width);
    let regions = regions_from_maps(&maps_raw, &cfg.scales)?;
    let graph = build_graph(video_id, &regions, cfg.weighted, cfg.dense_threshold)?;
    let attention = attention_maps(&graph, model, mode, grid, &cfg.scales)?;

    let frames: Vec<FrameTensor> = sample_frames(video, cfg.rate_hz, cfg.max_frames)?;
    if frames.len() != attention.len() {
        return Err(Error::Contract(format!(
            "decoded {} frames but cached features cover {}",
            frames.len(),
            attention.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut pngs = Vec::new();
    for (frame, map) in frames.iter().zip(&attention) {
        debug_assert_eq!(frame.pixels.dimensions(), (INPUT_SIZE, INPUT_SIZE));
        let img = overlay_attention(&frame.pixels, map);
        let path = out_dir.join(format!(
            "{video_id}_{:04}_{}.png",
            map.frame_index,
            mode.as_str()
        ));
        img.save(&path)?;
        pngs.push(path);
    }
    let sidecar = out_dir.join(format!("{video_id}_{}.json", mode.as_str()));
    let doc = AttentionSidecar {
        video_id: video_id.to_string(),
        mode,
        maps: attention.clone(),
    };
    std::fs::write(&sidecar, serde_json::to_string_pretty(&doc)?)?;
    Ok(RenderedSequence {
        pngs,
        sidecar,
        maps: attention,
    })
}
