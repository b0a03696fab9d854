//! Browser demo bindings.
//!
//! Three interactive operations, all computed live in the page:
//!
//! - [`attention_demo`]: per-frame attention heat maps, static pooling vs
//!   graph aggregation, over procedural clips.
//! - [`graph_demo`]: the lattice structure and its renormalized adjacency
//!   (matrix heat map, edge counts, spectral range).
//! - [`retrieval_demo`]: a micro retrieval benchmark trained with triplet
//!   loss in the browser, reporting mAP for static / untrained / trained
//!   embeddings.
//!
//! Results are returned as JSON strings; frame pixels stream separately
//! as RGBA buffers for canvas rendering.

use wasm_bindgen::prelude::*;

use strv::attnviz::{attention_maps, AttentionMode};
use strv::config::{derive_seed, Aggregator, BackboneConfig, LossKind, OperatorKind, PipelineConfig};
use strv::gnn::{embed_video_with_fallback, static_embedding, GnnModel};
use strv::graph::VideoGraph;
use strv::ingest::Backbone;
use strv::linalg::symmetric_eigenvalues;
use strv::pipeline::graph_from_video;
use strv::retrieval::{evaluate_map, EmbeddingIndex, QueryRelevance};
use strv::synth::{SyntheticClip, Transform, TransformedClip};
use strv::train::{
    fit, pairs_from_relevance, FitOptions, LossConfig, TrainData, TrainState,
};
use strv::video::VideoSource;

const DEMO_CHANNELS: usize = 32;

fn demo_config(channels: usize, weighted: bool) -> PipelineConfig {
    PipelineConfig {
        backbone: BackboneConfig::MockProj {
            channels,
            seed: 0x5712,
        },
        embed_dim: channels,
        weighted,
        ..PipelineConfig::default()
    }
}

fn operator_from(name: &str) -> Result<OperatorKind, JsValue> {
    match name {
        "vanilla_gcn" => Ok(OperatorKind::VanillaGcn),
        "cluster_gcn" => Ok(OperatorKind::ClusterGcn),
        "sgcn" => Ok(OperatorKind::Sgcn),
        other => Err(JsValue::from_str(&format!("unknown operator {other}"))),
    }
}

/// The clips behind one attention scenario.
fn scenario_clips(scenario: &str, seed: u64) -> Result<Vec<(String, SyntheticClip)>, JsValue> {
    let base = SyntheticClip::new(seed, 6, 320, 256, 1.0);
    match scenario {
        // plain motion
        "moving" => Ok(vec![("clip".into(), base)]),
        // the same frame shown three times inside one clip
        "repeated" => Ok(vec![(
            "clip".into(),
            base.with_content_times(vec![0, 1, 0, 2, 0]),
        )]),
        // two clips sharing frame 0, surrounded by different content
        "shared" => Ok(vec![
            (
                "context A".into(),
                base.clone().with_content_times(vec![0, 1, 2]),
            ),
            ("context B".into(), base.with_content_times(vec![0, 4, 5])),
        ]),
        other => Err(JsValue::from_str(&format!("unknown scenario {other}"))),
    }
}

/// RGBA pixels of one scenario frame, for canvas thumbnails.
#[wasm_bindgen]
pub fn clip_frame_rgba(
    scenario: &str,
    seed: u32,
    clip_index: usize,
    frame: usize,
    width: u32,
    height: u32,
) -> Result<Vec<u8>, JsValue> {
    let clips = scenario_clips(scenario, seed as u64)?;
    let (_, clip) = clips
        .get(clip_index)
        .ok_or_else(|| JsValue::from_str("clip index out of range"))?;
    if frame >= clip.frame_count() {
        return Err(JsValue::from_str("frame out of range"));
    }
    let content = match &clip.content_times {
        Some(times) => times[frame],
        None => frame,
    };
    let img = clip.render(content, width, height);
    let mut rgba = Vec::with_capacity((width * height * 4) as usize);
    for px in img.pixels() {
        rgba.extend_from_slice(&[px.0[0], px.0[1], px.0[2], 255]);
    }
    Ok(rgba)
}

/// Static vs graph-mode attention maps for a scenario. JSON out:
/// `{clips: [{label, frames, static: [[..49]], gnn: [[..49]]}]}`.
#[wasm_bindgen]
pub fn attention_demo(
    scenario: &str,
    operator: &str,
    weighted: bool,
    seed: u32,
) -> Result<String, JsValue> {
    let cfg = demo_config(DEMO_CHANNELS, weighted);
    let op = operator_from(operator)?;
    let backbone = Backbone::from_config(&cfg.backbone).map_err(err_js)?;
    let model = GnnModel::init(
        op,
        &[DEMO_CHANNELS, DEMO_CHANNELS],
        Aggregator::Mean,
        1,
        derive_seed(seed as u64, "demo-init", 0),
        0,
    );
    let mut clips_json = Vec::new();
    for (label, clip) in scenario_clips(scenario, seed as u64)? {
        let graph = graph_from_video(&label, &clip, &cfg, &backbone).map_err(err_js)?;
        let static_maps =
            attention_maps(&graph, None, AttentionMode::Static, (7, 7), &cfg.scales)
                .map_err(err_js)?;
        let gnn_maps = attention_maps(
            &graph,
            Some(&model),
            AttentionMode::StarGnn,
            (7, 7),
            &cfg.scales,
        )
        .map_err(err_js)?;
        clips_json.push(serde_json::json!({
            "label": label,
            "frames": clip.frame_count(),
            "static": static_maps.iter().map(|m| &m.grid).collect::<Vec<_>>(),
            "gnn": gnn_maps.iter().map(|m| &m.grid).collect::<Vec<_>>(),
        }));
    }
    Ok(serde_json::json!({ "clips": clips_json }).to_string())
}

/// Lattice structure snapshot. JSON out: node/edge counts, the dense
/// renormalized adjacency, row sums and the spectral range.
#[wasm_bindgen]
pub fn graph_demo(frames: usize, weighted: bool, seed: u32) -> Result<String, JsValue> {
    if !(1..=4).contains(&frames) {
        return Err(JsValue::from_str("frames must be in 1..=4"));
    }
    let cfg = demo_config(DEMO_CHANNELS, weighted);
    let backbone = Backbone::from_config(&cfg.backbone).map_err(err_js)?;
    let clip = SyntheticClip::new(seed as u64, frames, 320, 256, 1.0);
    let graph: VideoGraph = graph_from_video("demo", &clip, &cfg, &backbone).map_err(err_js)?;
    let adj = graph.adjacency().to_dense();
    let n = adj.rows();
    let row_sums: Vec<f64> = (0..n).map(|r| adj.row(r).iter().sum()).collect();
    let eig = symmetric_eigenvalues(&adj);
    let weights: Vec<f64> = graph.edges.iter().map(|e| e.weight).collect();
    Ok(serde_json::json!({
        "nodes": n,
        "frames": graph.frame_count,
        "spatial_edges": graph.spatial_edge_count(),
        "temporal_edges": graph.temporal_edge_count(),
        "adjacency": adj.data(),
        "row_sums": row_sums,
        "eig_min": eig.first().copied().unwrap_or(0.0),
        "eig_max": eig.last().copied().unwrap_or(0.0),
        "weight_min": weights.iter().copied().fold(f64::INFINITY, f64::min),
        "weight_max": weights.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
    .to_string())
}

/// Micro retrieval benchmark trained in the browser. JSON out: per-method
/// mAP, the loss curve and a ranked example query.
#[wasm_bindgen]
pub fn retrieval_demo(groups: usize, epochs: usize, seed: u32) -> Result<String, JsValue> {
    if !(3..=10).contains(&groups) {
        return Err(JsValue::from_str("groups must be in 3..=10"));
    }
    if !(1..=40).contains(&epochs) {
        return Err(JsValue::from_str("epochs must be in 1..=40"));
    }
    let channels = 24;
    let cfg = {
        let mut c = demo_config(channels, true);
        c.batch_size = 16;
        c.lr = 3e-3;
        c
    };
    let backbone = Backbone::from_config(&cfg.backbone).map_err(err_js)?;
    let seed = seed as u64;

    // groups of near-duplicates: base + crop + overlay
    let mut graphs = std::collections::BTreeMap::new();
    let mut records: Vec<QueryRelevance> = Vec::new();
    let mut group_of = std::collections::BTreeMap::new();
    for g in 0..groups {
        let base = SyntheticClip::new(derive_seed(seed, "demo-group", g as u64), 3, 320, 256, 1.0);
        let variants: Vec<(String, Box<dyn VideoSource>)> = vec![
            (format!("g{g}_base"), Box::new(base.clone())),
            (
                format!("g{g}_crop"),
                Box::new(TransformedClip::new(base.clone(), Transform::Crop { keep: 0.65 })),
            ),
            (
                format!("g{g}_overlay"),
                Box::new(TransformedClip::new(
                    base,
                    Transform::Overlay {
                        height_frac: 0.35,
                        seed: derive_seed(seed, "demo-overlay", g as u64),
                    },
                )),
            ),
        ];
        let ids: Vec<String> = variants.iter().map(|(id, _)| id.clone()).collect();
        for (id, video) in &variants {
            let graph = graph_from_video(id, video.as_ref(), &cfg, &backbone).map_err(err_js)?;
            graphs.insert(id.clone(), graph);
            group_of.insert(id.clone(), g);
        }
        for id in &ids {
            records.push(QueryRelevance {
                query: id.clone(),
                positives: ids.iter().filter(|o| *o != id).cloned().collect(),
                negatives: vec![],
            });
        }
    }
    // negatives: everything outside the group
    let all_ids: Vec<String> = graphs.keys().cloned().collect();
    for r in &mut records {
        let own: std::collections::BTreeSet<&String> =
            r.positives.iter().chain(std::iter::once(&r.query)).collect();
        r.negatives = all_ids
            .iter()
            .filter(|id| !own.contains(id))
            .cloned()
            .collect();
    }

    let score = |model: Option<&GnnModel>| -> Result<f64, JsValue> {
        let mut index = EmbeddingIndex::new();
        for (id, g) in &graphs {
            let (e, _) = match model {
                Some(m) => embed_video_with_fallback(g, m).map_err(err_js)?,
                None => static_embedding(g).map_err(err_js)?,
            };
            let _ = id;
            index.insert(e).map_err(err_js)?;
        }
        let (map, _) = evaluate_map(&index, &records, &[]).map_err(err_js)?;
        Ok(map)
    };

    let init_model = GnnModel::init(
        OperatorKind::VanillaGcn,
        &[channels, channels],
        Aggregator::Mean,
        1,
        derive_seed(seed, "demo-init", 0),
        0,
    );
    let map_static = score(None)?;
    let map_untrained = score(Some(&init_model))?;

    let (pairs, sets) = pairs_from_relevance(&records);
    let mut state = TrainState::new(init_model, seed);
    let data = TrainData {
        graphs: &graphs,
        pairs,
        positive_sets: sets,
        val_queries: vec![],
    };
    let mut losses = Vec::new();
    fit(
        &mut state,
        &data,
        &LossConfig {
            kind: LossKind::Triplet,
            margin: cfg.margin,
        },
        &FitOptions {
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            max_epochs: epochs,
            patience: epochs,
        },
        |s| losses.push(s.train_loss),
    )
    .map_err(err_js)?;
    let map_trained = score(Some(&state.model))?;

    // one ranked example query under the trained model
    let example = {
        let mut index = EmbeddingIndex::new();
        for g in graphs.values() {
            let (e, _) = embed_video_with_fallback(g, &state.model).map_err(err_js)?;
            index.insert(e).map_err(err_js)?;
        }
        let q = &records[0];
        let qvec = index.get(&q.query).unwrap().to_vec();
        let candidates: std::collections::BTreeSet<String> = all_ids
            .iter()
            .filter(|id| **id != q.query)
            .cloned()
            .collect();
        let ranked = strv::retrieval::rank(&qvec, &index, &candidates).map_err(err_js)?;
        let qgroup = group_of[&q.query];
        serde_json::json!({
            "query": q.query,
            "ranked": ranked
                .iter()
                .map(|(id, score)| {
                    serde_json::json!({
                        "id": id,
                        "score": score,
                        "relevant": group_of[id] == qgroup,
                    })
                })
                .collect::<Vec<_>>(),
        })
    };

    Ok(serde_json::json!({
        "map_static": map_static,
        "map_untrained": map_untrained,
        "map_trained": map_trained,
        "loss_curve": losses,
        "example": example,
        "clips": graphs.len(),
    })
    .to_string())
}

fn err_js(e: strv::error::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}
