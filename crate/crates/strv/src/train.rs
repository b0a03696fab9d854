//! Mini-batch metric learning over video graphs.
//!
//! Each batch holds B (anchor, positive) video pairs. All batch members
//! are embedded with the current weights, every anchor mines its hardest
//! in-batch negative (smallest squared distance, excluding the anchor
//! itself and its labeled positives), and the mean triplet or
//! contrastive loss over the batch drives one Adam step.
//!
//! Determinism contract: given the same seed, data and config, the whole
//! weight trajectory is reproducible bit for bit, including across a
//! checkpoint save/load boundary. To make that hold with float32
//! checkpoint storage, weights and optimizer moments are snapped to the
//! f32 grid after every update; all arithmetic still runs in f64.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bytes;
use crate::config::{derive_seed, LossKind};
use crate::error::{Error, Result};
use crate::gnn::{GnnModel, LayerWeights, ModelGrads, VideoEmbedding};
use crate::graph::VideoGraph;
use crate::linalg::{norm, squared_euclidean, Mat};
use crate::retrieval::{evaluate_map, EmbeddingIndex, QueryRelevance};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
}

/// Hinge triplet loss on post-processed embeddings with squared
/// Euclidean distance: `max(0, d(a,p) - d(a,n) + margin)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (squared_euclidean(a, p) - squared_euclidean(a, n) + margin).max(0.0)
}

/// Margin contrastive loss: `d(x,y)` for positive pairs,
/// `max(0, margin - sqrt(d(x,y)))^2` for negative pairs.
pub fn contrastive_loss(x: &[f64], y: &[f64], is_positive: bool, margin: f64) -> f64 {
    let d = squared_euclidean(x, y);
    if is_positive {
        d
    } else {
        let gap = margin - d.sqrt();
        if gap > 0.0 {
            gap * gap
        } else {
            0.0
        }
    }
}

/// Index of the hardest valid negative for `anchor_idx` among
/// `embeddings`: smallest squared distance to the anchor over candidates
/// that are neither the anchor's video nor in its positive set. Ties go
/// to the lowest index.
pub fn mine_hardest_negative(
    anchor_idx: usize,
    embeddings: &[VideoEmbedding],
    anchor_positives: &BTreeSet<String>,
) -> Result<usize> {
    let anchor = &embeddings[anchor_idx];
    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in embeddings.iter().enumerate() {
        if cand.video_id == anchor.video_id || anchor_positives.contains(&cand.video_id) {
            continue;
        }
        let d = squared_euclidean(&anchor.vector, &cand.vector);
        let better = match best {
            None => true,
            Some((_, bd)) => d < bd,
        };
        if better {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Mining(anchor.video_id.clone()))
}

/// Adam moment accumulators, shaped like the model.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<LayerWeights>,
    pub v: Vec<LayerWeights>,
}

impl AdamState {
    pub fn zeros_like(model: &GnnModel) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|l| LayerWeights {
                    w: Mat::zeros(l.w.rows(), l.w.cols()),
                    w_b: l.w_b.as_ref().map(|b| Mat::zeros(b.rows(), b.cols())),
                })
                .collect::<Vec<_>>()
        };
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

fn quantize_mat(m: &mut Mat) {
    for v in m.data_mut() {
        *v = *v as f32 as f64;
    }
}

fn quantize_layers(layers: &mut [LayerWeights]) {
    for l in layers {
        quantize_mat(&mut l.w);
        if let Some(b) = l.w_b.as_mut() {
            quantize_mat(b);
        }
    }
}

fn adam_update_mat(w: &mut Mat, m: &mut Mat, v: &mut Mat, g: &Mat, lr: f64, t: u64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let (wd, md, vd, gd) = (w.data_mut(), m.data_mut(), v.data_mut(), g.data());
    for i in 0..wd.len() {
        md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
        vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        wd[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// One Adam step over all weight matrices, then snap weights and moments
/// to the f32 grid (see module docs).
pub fn adam_step(model: &mut GnnModel, adam: &mut AdamState, grads: &ModelGrads, lr: f64) {
    adam.t += 1;
    for (li, layer) in model.layers.iter_mut().enumerate() {
        adam_update_mat(
            &mut layer.w,
            &mut adam.m[li].w,
            &mut adam.v[li].w,
            &grads.layers[li].w,
            lr,
            adam.t,
        );
        if let Some(wb) = layer.w_b.as_mut() {
            adam_update_mat(
                wb,
                adam.m[li].w_b.as_mut().unwrap(),
                adam.v[li].w_b.as_mut().unwrap(),
                grads.layers[li].w_b.as_ref().unwrap(),
                lr,
                adam.t,
            );
        }
    }
    quantize_layers(&mut model.layers);
    quantize_layers(&mut adam.m);
    quantize_layers(&mut adam.v);
}

/// Full training state; checkpoints round-trip it exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: GnnModel,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: u32,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub master_seed: u64,
    pub best_val_map: f64,
    pub epochs_since_improve: u32,
}

impl TrainState {
    /// Wrap a freshly initialized model. Weights are snapped to the f32
    /// grid immediately so the first checkpoint is exact.
    pub fn new(mut model: GnnModel, master_seed: u64) -> Self {
        quantize_layers(&mut model.layers);
        let adam = AdamState::zeros_like(&model);
        TrainState {
            model,
            adam,
            epoch: 0,
            step: 0,
            master_seed,
            best_val_map: f64::NEG_INFINITY,
            epochs_since_improve: 0,
        }
    }
}

/// Everything one epoch consumes.
pub struct TrainData<'a> {
    /// Graphs for every id referenced by `pairs` and `val_queries`.
    pub graphs: &'a BTreeMap<String, VideoGraph>,
    /// (anchor, labeled positive) pairs.
    pub pairs: Vec<(String, String)>,
    /// id -> its labeled positive set.
    pub positive_sets: BTreeMap<String, BTreeSet<String>>,
    /// Held-out queries scored by mAP after each epoch. May be empty.
    pub val_queries: Vec<QueryRelevance>,
}

/// id -> labeled positive set.
pub type PositiveSets = BTreeMap<String, BTreeSet<String>>;

/// (anchor, positive) pairs plus positive sets from relevance records.
pub fn pairs_from_relevance(records: &[QueryRelevance]) -> (Vec<(String, String)>, PositiveSets) {
    let mut pairs = Vec::new();
    let mut sets: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        for p in &r.positives {
            pairs.push((r.query.clone(), p.clone()));
        }
        sets.entry(r.query.clone())
            .or_default()
            .extend(r.positives.iter().cloned());
    }
    (pairs, sets)
}

/// Canonical group key of a record: the smallest id among the query and
/// its positives.
fn group_key(r: &QueryRelevance) -> String {
    r.positives
        .iter()
        .chain(std::iter::once(&r.query))
        .min()
        .unwrap()
        .clone()
}

/// Keep a seeded `ratio` fraction of the groups (at least one).
pub fn subsample_relevance(
    records: &[QueryRelevance],
    ratio: f64,
    seed: u64,
) -> Vec<QueryRelevance> {
    if ratio >= 1.0 {
        return records.to_vec();
    }
    let mut groups: Vec<String> = records
        .iter()
        .map(group_key)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "subsample", 0));
    groups.shuffle(&mut rng);
    let keep = ((groups.len() as f64 * ratio).round() as usize).max(1);
    let kept: BTreeSet<String> = groups.into_iter().take(keep).collect();
    records
        .iter()
        .filter(|r| kept.contains(&group_key(r)))
        .cloned()
        .collect()
}

/// Split records into (train, validation) by group. Validation negatives
/// are restricted to validation-split ids so per-epoch scoring only
/// embeds the validation clips.
pub fn split_validation(
    records: &[QueryRelevance],
    val_ratio: f64,
    seed: u64,
) -> (Vec<QueryRelevance>, Vec<QueryRelevance>) {
    if val_ratio <= 0.0 {
        return (records.to_vec(), Vec::new());
    }
    let mut groups: Vec<String> = records
        .iter()
        .map(group_key)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if groups.len() < 3 {
        return (records.to_vec(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "valsplit", 0));
    groups.shuffle(&mut rng);
    let n_val = ((groups.len() as f64 * val_ratio).round() as usize).clamp(1, groups.len() - 2);
    let val_groups: BTreeSet<String> = groups.into_iter().take(n_val).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in records {
        if val_groups.contains(&group_key(r)) {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    let val_ids: BTreeSet<String> = val
        .iter()
        .flat_map(|r| {
            r.positives
                .iter()
                .chain(std::iter::once(&r.query))
                .cloned()
        })
        .collect();
    for r in &mut val {
        r.negatives.retain(|n| val_ids.contains(n));
    }
    (train, val)
}

/// One mini-batch after mining: aligned anchor / positive / negative ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<String>,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Mine the hardest negative for every (anchor, positive) pair of a batch
/// against the batch embeddings. Every negative is guaranteed to be
/// outside its anchor's positive set.
pub fn resolve_triplets(
    batch: &[(String, String)],
    embeddings: &[VideoEmbedding],
    positive_sets: &BTreeMap<String, BTreeSet<String>>,
) -> Result<TripletBatch> {
    let index_of: BTreeMap<&str, usize> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| (e.video_id.as_str(), i))
        .collect();
    let empty = BTreeSet::new();
    let mut out = TripletBatch {
        anchors: Vec::with_capacity(batch.len()),
        positives: Vec::with_capacity(batch.len()),
        negatives: Vec::with_capacity(batch.len()),
    };
    for (anchor, positive) in batch {
        let ai = *index_of
            .get(anchor.as_str())
            .ok_or_else(|| Error::UnknownId(anchor.clone()))?;
        let positives = positive_sets.get(anchor).unwrap_or(&empty);
        if !positives.contains(positive) {
            return Err(Error::Contract(format!(
                "{positive} is not a labeled positive of {anchor}"
            )));
        }
        let ni = mine_hardest_negative(ai, embeddings, positives)?;
        out.anchors.push(anchor.clone());
        out.positives.push(positive.clone());
        out.negatives.push(embeddings[ni].video_id.clone());
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: u32,
    pub mean_loss: f64,
    pub batches: Vec<BatchRecord>,
}

fn batch_group_ids<'a>(
    batch: &'a [(String, String)],
    positive_sets: &'a BTreeMap<String, BTreeSet<String>>,
) -> BTreeSet<String> {
    batch
        .iter()
        .map(|(a, _)| {
            positive_sets
                .get(a)
                .and_then(|s| s.iter().chain(std::iter::once(a)).min().cloned())
                .unwrap_or_else(|| a.clone())
        })
        .collect()
}

/// Chunk pairs into batches and guarantee every batch can mine a
/// negative: each batch must touch at least two distinct positive groups.
///
/// Single-group batches are repaired by swapping in a pair from a donor
/// batch that keeps at least one other foreign pair (so the donor cannot
/// become single-group itself), or by merging into a mixed batch when no
/// such donor exists. Deterministic given the rng state.
fn assemble_batches(
    mut pairs: Vec<(String, String)>,
    batch_size: usize,
    positive_sets: &BTreeMap<String, BTreeSet<String>>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<(String, String)>>> {
    pairs.shuffle(rng);
    let mut batches: Vec<Vec<(String, String)>> = pairs
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    // a trailing single-pair batch cannot mine; merge it backwards
    if batches.len() >= 2 && batches.last().map(|b| b.len()) == Some(1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }

    let group_of = |pair: &(String, String)| -> String {
        let (a, _) = pair;
        positive_sets
            .get(a)
            .and_then(|s| s.iter().chain(std::iter::once(a)).min().cloned())
            .unwrap_or_else(|| a.clone())
    };

    loop {
        let degenerate = batches
            .iter()
            .position(|b| batch_group_ids(b, positive_sets).len() < 2);
        let Some(i) = degenerate else {
            return Ok(batches);
        };
        let own_group = group_of(&batches[i][0]);

        // donor pair of a different group whose batch keeps a second
        // foreign pair after the swap
        let mut swap: Option<(usize, usize)> = None;
        'scan: for (j, batch) in batches.iter().enumerate() {
            if i == j {
                continue;
            }
            let foreign = batch
                .iter()
                .filter(|p| group_of(p) != own_group)
                .count();
            if foreign < 2 {
                continue;
            }
            for (k, pair) in batch.iter().enumerate() {
                if group_of(pair) != own_group {
                    swap = Some((j, k));
                    break 'scan;
                }
            }
        }
        if let Some((j, k)) = swap {
            let donated = batches[j][k].clone();
            batches[j][k] = batches[i][0].clone();
            batches[i][0] = donated;
            continue;
        }
        // no safe donor: merge into the first batch holding another group
        let target = batches.iter().position(|b| {
            b.iter().any(|p| group_of(p) != own_group)
        });
        match target {
            Some(j) if j != i => {
                let moved = batches.remove(i);
                let j = if j > i { j - 1 } else { j };
                batches[j].extend(moved);
            }
            _ => {
                return Err(Error::Mining(
                    "training pairs span a single positive group; no negatives exist".into(),
                ));
            }
        }
    }
}

struct TripleGrads {
    loss: f64,
    g_anchor: Vec<f64>,
    g_positive: Vec<f64>,
    g_negative: Vec<f64>,
}

fn loss_and_embed_grads(
    a: &[f64],
    p: &[f64],
    n: &[f64],
    cfg: &LossConfig,
) -> TripleGrads {
    let d = a.len();
    let mut g_a = vec![0.0; d];
    let mut g_p = vec![0.0; d];
    let mut g_n = vec![0.0; d];
    let loss = match cfg.kind {
        LossKind::Triplet => {
            let l = triplet_loss(a, p, n, cfg.margin);
            if l > 0.0 {
                for i in 0..d {
                    g_a[i] = 2.0 * (n[i] - p[i]);
                    g_p[i] = -2.0 * (a[i] - p[i]);
                    g_n[i] = 2.0 * (a[i] - n[i]);
                }
            }
            l
        }
        LossKind::Contrastive => {
            // positive pair pulls, mined negative pushes inside the margin
            let lp = contrastive_loss(a, p, true, cfg.margin);
            for i in 0..d {
                g_a[i] += 2.0 * (a[i] - p[i]);
                g_p[i] += -2.0 * (a[i] - p[i]);
            }
            let ln = contrastive_loss(a, n, false, cfg.margin);
            let dist = squared_euclidean(a, n).sqrt();
            if dist > 1e-12 && dist < cfg.margin {
                let coef = -2.0 * (cfg.margin - dist) / dist;
                for i in 0..d {
                    g_a[i] += coef * (a[i] - n[i]);
                    g_n[i] += -coef * (a[i] - n[i]);
                }
            }
            lp + ln
        }
    };
    TripleGrads {
        loss,
        g_anchor: g_a,
        g_positive: g_p,
        g_negative: g_n,
    }
}

/// Run one epoch: shuffle pairs, iterate batches, mine negatives, take
/// one Adam step per batch. `lr` is constant within the epoch.
pub fn train_epoch(
    state: &mut TrainState,
    data: &TrainData,
    loss_cfg: &LossConfig,
    batch_size: usize,
    lr: f64,
) -> Result<EpochReport> {
    if data.pairs.is_empty() {
        return Err(Error::Contract("no training pairs".into()));
    }
    let epoch = state.epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        state.master_seed,
        "train-epoch",
        epoch as u64,
    ));
    let batches = assemble_batches(
        data.pairs.clone(),
        batch_size,
        &data.positive_sets,
        &mut rng,
    )?;

    let mut records = Vec::with_capacity(batches.len());
    let mut loss_sum = 0.0;
    for batch in &batches {
        // unique batch members in first-appearance order
        let mut member_ids: Vec<String> = Vec::new();
        let mut member_of = BTreeMap::new();
        for (a, p) in batch {
            for id in [a, p] {
                if !member_of.contains_key(id) {
                    member_of.insert(id.clone(), member_ids.len());
                    member_ids.push(id.clone());
                }
            }
        }
        for id in &member_ids {
            if !data.graphs.contains_key(id) {
                return Err(Error::UnknownId(id.clone()));
            }
        }
        let traces = {
            let results = crate::map_ordered(&member_ids, |id| {
                let g = &data.graphs[id];
                state.model.forward(g)
            });
            let mut traces = Vec::with_capacity(results.len());
            for r in results {
                traces.push(r?);
            }
            traces
        };
        let embeddings: Vec<VideoEmbedding> = member_ids
            .iter()
            .zip(&traces)
            .map(|(id, t)| VideoEmbedding {
                video_id: id.clone(),
                vector: t.embedding.clone(),
            })
            .collect();

        let triplets = resolve_triplets(batch, &embeddings, &data.positive_sets)?;
        let b = triplets.len() as f64;
        let mut grad_at_embedding: Vec<Vec<f64>> =
            vec![vec![0.0; state.model.output_dim()]; member_ids.len()];
        let mut batch_loss = 0.0;
        for i in 0..triplets.len() {
            let ai = member_of[&triplets.anchors[i]];
            let pi = member_of[&triplets.positives[i]];
            let ni = member_of[&triplets.negatives[i]];
            let tg = loss_and_embed_grads(
                &embeddings[ai].vector,
                &embeddings[pi].vector,
                &embeddings[ni].vector,
                loss_cfg,
            );
            batch_loss += tg.loss;
            for (g, v) in grad_at_embedding[ai].iter_mut().zip(&tg.g_anchor) {
                *g += v / b;
            }
            for (g, v) in grad_at_embedding[pi].iter_mut().zip(&tg.g_positive) {
                *g += v / b;
            }
            for (g, v) in grad_at_embedding[ni].iter_mut().zip(&tg.g_negative) {
                *g += v / b;
            }
        }
        batch_loss /= b;
        if !batch_loss.is_finite() {
            let norms: Vec<f64> = state.model.layers.iter().map(|l| norm(l.w.data())).collect();
            return Err(Error::Numeric(format!(
                "non-finite loss in epoch {epoch} (batch ids {:?}, weight norms {:?})",
                member_ids, norms
            )));
        }
        loss_sum += batch_loss;

        // mean-loss gradients, accumulated per member then pushed back in
        // a fixed order so thread count cannot change the result
        let member_grads = crate::map_ordered(
            &(0..member_ids.len()).collect::<Vec<_>>(),
            |&mi| -> Option<ModelGrads> {
                let g_e = &grad_at_embedding[mi];
                if g_e.iter().all(|&v| v == 0.0) {
                    return None;
                }
                let graph = &data.graphs[&member_ids[mi]];
                Some(state.model.backward(graph, &traces[mi], g_e))
            },
        );
        let mut total = ModelGrads::zeros_like(&state.model);
        for g in member_grads.into_iter().flatten() {
            total.add_assign(&g);
        }
        adam_step(&mut state.model, &mut state.adam, &total, lr);
        state.step += 1;
        records.push(BatchRecord {
            step: state.step,
            loss: batch_loss,
            lr,
        });
    }
    state.epoch += 1;
    Ok(EpochReport {
        epoch,
        mean_loss: loss_sum / batches.len() as f64,
        batches: records,
    })
}

/// Validation mAP of the current weights over the held-out queries.
pub fn validation_map(
    model: &GnnModel,
    graphs: &BTreeMap<String, VideoGraph>,
    queries: &[QueryRelevance],
) -> Result<f64> {
    if queries.is_empty() {
        return Ok(f64::NAN);
    }
    let ids: BTreeSet<String> = queries
        .iter()
        .flat_map(|q| {
            q.positives
                .iter()
                .chain(q.negatives.iter())
                .chain(std::iter::once(&q.query))
                .cloned()
        })
        .collect();
    let id_list: Vec<String> = ids.into_iter().collect();
    let embedded = crate::map_ordered(&id_list, |id| {
        let g = graphs
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.clone()))?;
        crate::gnn::embed_video_with_fallback(g, model).map(|(e, _)| e)
    });
    let mut index = EmbeddingIndex::new();
    for e in embedded {
        index.insert(e?)?;
    }
    let (map, _) = evaluate_map(&index, queries, &[])?;
    Ok(map)
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_map: f64,
    pub batches: Vec<BatchRecord>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochStats>,
    /// Weights at the best validation epoch (final weights when no
    /// validation queries exist).
    pub best_model: GnnModel,
    pub best_val_map: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

/// Train until `max_epochs` or until validation mAP has not improved for
/// `patience` epochs. Resuming from a loaded `TrainState` continues the
/// exact uninterrupted trajectory.
pub fn fit(
    state: &mut TrainState,
    data: &TrainData,
    loss_cfg: &LossConfig,
    opts: &FitOptions,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<FitReport> {
    let mut history = Vec::new();
    let mut best_model = state.model.clone();
    while (state.epoch as usize) < opts.max_epochs {
        let report = train_epoch(state, data, loss_cfg, opts.batch_size, opts.lr)?;
        let val_map = validation_map(&state.model, data.graphs, &data.val_queries)?;
        let stats = EpochStats {
            epoch: report.epoch,
            train_loss: report.mean_loss,
            val_map,
            batches: report.batches,
        };
        on_epoch(&stats);
        history.push(stats);
        if data.val_queries.is_empty() {
            best_model = state.model.clone();
            state.best_val_map = f64::NAN;
        } else if val_map > state.best_val_map {
            state.best_val_map = val_map;
            state.epochs_since_improve = 0;
            best_model = state.model.clone();
        } else {
            state.epochs_since_improve += 1;
            if state.epochs_since_improve as usize >= opts.patience {
                break;
            }
        }
    }
    Ok(FitReport {
        history,
        best_model,
        best_val_map: state.best_val_map,
    })
}

// --- checkpoint io ----------------------------------------------------------

/// Write a full training checkpoint: the model section with the Adam
/// state and counters appended.
pub fn save_train_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let mut buf = Vec::new();
    crate::gnn::write_model_section(&mut buf, &state.model)?;
    bytes::w_u8(&mut buf, 1)?; // optimizer section present
    bytes::w_u64(&mut buf, state.adam.t)?;
    for l in &state.adam.m {
        for &v in l.w.data() {
            bytes::w_f32(&mut buf, v as f32)?;
        }
        if let Some(b) = &l.w_b {
            for &v in b.data() {
                bytes::w_f32(&mut buf, v as f32)?;
            }
        }
    }
    for l in &state.adam.v {
        for &v in l.w.data() {
            bytes::w_f32(&mut buf, v as f32)?;
        }
        if let Some(b) = &l.w_b {
            for &v in b.data() {
                bytes::w_f32(&mut buf, v as f32)?;
            }
        }
    }
    bytes::w_u32(&mut buf, state.epoch)?;
    bytes::w_u64(&mut buf, state.step)?;
    bytes::w_u64(&mut buf, state.master_seed)?;
    bytes::w_f64(&mut buf, state.best_val_map)?;
    bytes::w_u32(&mut buf, state.epochs_since_improve)?;
    bytes::atomic_write(path, &buf)
}

fn read_layers_like<R: std::io::Read>(r: &mut R, model: &GnnModel) -> Result<Vec<LayerWeights>> {
    let mut out = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let read_mat = |r: &mut R, rows: usize, cols: usize| -> Result<Mat> {
            let mut raw = vec![0u8; rows * cols * 4];
            r.read_exact(&mut raw)?;
            Ok(Mat::from_row_major(
                rows,
                cols,
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
            ))
        };
        let w = read_mat(r, l.w.rows(), l.w.cols())?;
        let w_b = match &l.w_b {
            Some(b) => Some(read_mat(r, b.rows(), b.cols())?),
            None => None,
        };
        out.push(LayerWeights { w, w_b });
    }
    Ok(out)
}

/// Load a full training checkpoint written by [`save_train_checkpoint`].
pub fn load_train_checkpoint(path: &Path, expected_hash: Option<u64>) -> Result<TrainState> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::PipelineOrder(format!(
            "checkpoint {} missing ({e}); run training first",
            path.display()
        ))
    })?;
    let mut r = BufReader::new(file);
    let model = crate::gnn::read_model_section(&mut r, path)?;
    if let Some(expected) = expected_hash {
        if model.config_hash != expected {
            return Err(Error::ConfigMismatch {
                path: path.to_path_buf(),
                found: model.config_hash,
                expected,
            });
        }
    }
    let has_optimizer = bytes::r_u8(&mut r)?;
    if has_optimizer == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "checkpoint has no optimizer state; cannot resume training".into(),
        });
    }
    let t = bytes::r_u64(&mut r)?;
    let m = read_layers_like(&mut r, &model)?;
    let v = read_layers_like(&mut r, &model)?;
    let epoch = bytes::r_u32(&mut r)?;
    let step = bytes::r_u64(&mut r)?;
    let master_seed = bytes::r_u64(&mut r)?;
    let best_val_map = bytes::r_f64(&mut r)?;
    let epochs_since_improve = bytes::r_u32(&mut r)?;
    Ok(TrainState {
        model,
        adam: AdamState { t, m, v },
        epoch,
        step,
        master_seed,
        best_val_map,
        epochs_since_improve,
    })
}
