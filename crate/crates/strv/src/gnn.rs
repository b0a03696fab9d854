//! Pluggable graph-convolution forward pass and its reverse-mode
//! gradients.
//!
//! Three layer operators over the renormalized adjacency `Â`:
//!
//! - vanilla GCN: `H' = ReLU(Â H W)` (Kipf & Welling, 2017)
//! - Cluster-GCN: `H' = ReLU(Â H W_a + H W_b)` (Chiang et al., 2019)
//! - SGC: `H' = Â^K H W`, no activation (Wu et al., 2019)
//!
//! A global aggregation (mean or max over nodes) compresses the node
//! states into one vector, which is then centered to zero mean and
//! L2-normalized into the final video embedding. Gradients are
//! hand-derived; `train` composes them with the metric-loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::bytes;
use crate::config::{Aggregator, OperatorKind};
use crate::error::{Error, Result};
use crate::graph::{Adjacency, VideoGraph};
use crate::linalg::{dot, mean, norm, Mat};

const CHECKPOINT_MAGIC: &[u8; 4] = b"STRW";
const CHECKPOINT_VERSION: u16 = 1;

/// Centered norm below this (relative to the raw vector) counts as a
/// collapsed, degenerate embedding.
const DEGENERATE_EPS: f64 = 1e-12;

/// Node states at some layer: an N x D matrix, one row per graph node.
/// The layer-0 signal is the raw region feature matrix X.
pub type GraphSignal = Mat;

/// Weights of one layer. `w` is W for vanilla GCN and SGC, W_a for
/// Cluster-GCN; `w_b` exists only for Cluster-GCN.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w: Mat,
    pub w_b: Option<Mat>,
}

/// The GNN: operator kind, per-layer weights, aggregation and
/// post-processing specification.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    pub operator: OperatorKind,
    pub layers: Vec<LayerWeights>,
    pub aggregator: Aggregator,
    pub sgcn_power: usize,
    pub init_seed: u64,
    pub config_hash: u64,
}

/// Final D-dimensional video descriptor: zero component mean, unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbedding {
    pub video_id: String,
    pub vector: Vec<f64>,
}

/// Per-layer weight gradients, same shape as the model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub layers: Vec<LayerWeights>,
}

impl ModelGrads {
    pub fn zeros_like(model: &GnnModel) -> Self {
        ModelGrads {
            layers: model
                .layers
                .iter()
                .map(|l| LayerWeights {
                    w: Mat::zeros(l.w.rows(), l.w.cols()),
                    w_b: l
                        .w_b
                        .as_ref()
                        .map(|b| Mat::zeros(b.rows(), b.cols())),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.add_assign(&b.w);
            if let (Some(ab), Some(bb)) = (a.w_b.as_mut(), b.w_b.as_ref()) {
                ab.add_assign(bb);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w.scale(s);
            if let Some(b) = l.w_b.as_mut() {
                b.scale(s);
            }
        }
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug)]
pub struct ForwardTrace {
    /// Input signal of every layer (layer_inputs[0] is X).
    layer_inputs: Vec<Mat>,
    /// Propagated signal `Â^{(K)} H` of every layer.
    propagated: Vec<Mat>,
    /// Pre-activation of every layer.
    preacts: Vec<Mat>,
    /// Post-activation node states of the last layer (the per-node output
    /// matrix O).
    pub node_outputs: Mat,
    /// Aggregated vector before post-processing.
    pub raw: Vec<f64>,
    /// Row chosen per column when the aggregator is max.
    argmax: Option<Vec<usize>>,
    centered_norm: f64,
    /// Final embedding (fallback vector when degenerate).
    pub embedding: Vec<f64>,
    /// True when post-processing collapsed and the fallback was substituted.
    pub degenerate: bool,
}

impl GnnModel {
    /// Variance-scaled uniform initialization: bound `sqrt(6/(fan_in+fan_out))`,
    /// drawn from a stream seeded with `init_seed`.
    ///
    /// `dims` chains the layer dimensions: layer `l` maps `dims[l]` to
    /// `dims[l+1]`.
    pub fn init(
        operator: OperatorKind,
        dims: &[usize],
        aggregator: Aggregator,
        sgcn_power: usize,
        init_seed: u64,
        config_hash: u64,
    ) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut draw = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        let layers = dims
            .windows(2)
            .map(|d| LayerWeights {
                w: draw(d[0], d[1]),
                w_b: match operator {
                    OperatorKind::ClusterGcn => Some(draw(d[0], d[1])),
                    _ => None,
                },
            })
            .collect();
        GnnModel {
            operator,
            layers,
            aggregator,
            sgcn_power,
            init_seed,
            config_hash,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.cols()
    }

    /// One layer of the configured operator.
    pub fn layer_forward(&self, layer: usize, adj: &Adjacency, h: &Mat) -> Result<Mat> {
        let (out, _, _) = self.layer_forward_cached(layer, adj, h)?;
        Ok(out)
    }

    /// Layer forward returning (output, propagated input, pre-activation).
    fn layer_forward_cached(
        &self,
        layer: usize,
        adj: &Adjacency,
        h: &Mat,
    ) -> Result<(Mat, Mat, Mat)> {
        let lw = &self.layers[layer];
        if h.cols() != lw.w.rows() {
            return Err(Error::Contract(format!(
                "layer {layer}: signal dim {} does not match weight dim {}",
                h.cols(),
                lw.w.rows()
            )));
        }
        let (propagated, preact) = match self.operator {
            OperatorKind::VanillaGcn => {
                let p = adj.apply(h);
                let z = p.matmul(&lw.w);
                (p, z)
            }
            OperatorKind::ClusterGcn => {
                let p = adj.apply(h);
                let mut z = p.matmul(&lw.w);
                z.add_assign(&h.matmul(lw.w_b.as_ref().expect("cluster layer has W_b")));
                (p, z)
            }
            OperatorKind::Sgcn => {
                let mut p = h.clone();
                for _ in 0..self.sgcn_power {
                    p = adj.apply(&p);
                }
                let z = p.matmul(&lw.w);
                (p, z)
            }
        };
        if !preact.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite activations in layer {layer}"
            )));
        }
        let out = match self.operator {
            OperatorKind::Sgcn => preact.clone(),
            _ => preact.map(|v| v.max(0.0)),
        };
        Ok((out, propagated, preact))
    }

    /// Full forward pass caching everything the backward pass needs.
    pub fn forward(&self, graph: &VideoGraph) -> Result<ForwardTrace> {
        if graph.feature_dim() != self.input_dim() {
            return Err(Error::Contract(format!(
                "graph feature dim {} does not match model input dim {}",
                graph.feature_dim(),
                self.input_dim()
            )));
        }
        let adj = graph.adjacency();
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut propagated = Vec::with_capacity(self.num_layers());
        let mut preacts = Vec::with_capacity(self.num_layers());
        let mut h = graph.features.clone();
        for layer in 0..self.num_layers() {
            let (out, p, z) = self.layer_forward_cached(layer, adj, &h)?;
            layer_inputs.push(h);
            propagated.push(p);
            preacts.push(z);
            h = out;
        }
        let node_outputs = h;
        let (raw, argmax) = aggregate_with_argmax(&node_outputs, self.aggregator);
        let (embedding, centered_norm, degenerate) = match postprocess(&raw) {
            Ok(e) => {
                let centered_norm = centered_norm_of(&raw);
                (e, centered_norm, false)
            }
            Err(_) => (fallback_embedding(raw.len()), 0.0, true),
        };
        Ok(ForwardTrace {
            layer_inputs,
            propagated,
            preacts,
            node_outputs,
            raw,
            argmax,
            centered_norm,
            embedding,
            degenerate,
        })
    }

    /// Gradients of a scalar loss with respect to every weight matrix,
    /// given the loss gradient at the embedding.
    ///
    /// A degenerate trace contributes nothing: the fallback vector does
    /// not depend on the weights.
    pub fn backward(
        &self,
        graph: &VideoGraph,
        trace: &ForwardTrace,
        grad_embedding: &[f64],
    ) -> ModelGrads {
        let mut grads = ModelGrads::zeros_like(self);
        if trace.degenerate {
            return grads;
        }
        let adj = graph.adjacency();
        let e = &trace.embedding;
        // through L2 normalization: g_c = (g_e - (g_e . e) e) / ||c||
        let ge_dot_e = dot(grad_embedding, e);
        let mut g_raw: Vec<f64> = grad_embedding
            .iter()
            .zip(e)
            .map(|(g, ei)| (g - ge_dot_e * ei) / trace.centered_norm)
            .collect();
        // through centering: subtract the gradient's own mean
        let m = mean(&g_raw);
        for g in &mut g_raw {
            *g -= m;
        }
        // through aggregation into the node-output matrix
        let n = trace.node_outputs.rows();
        let d = trace.node_outputs.cols();
        let mut g_nodes = Mat::zeros(n, d);
        match self.aggregator {
            Aggregator::Mean => {
                let inv_n = 1.0 / n as f64;
                for r in 0..n {
                    let row = g_nodes.row_mut(r);
                    for c in 0..d {
                        row[c] = g_raw[c] * inv_n;
                    }
                }
            }
            Aggregator::Max => {
                let argmax = trace.argmax.as_ref().expect("max trace has argmax");
                for c in 0..d {
                    g_nodes[(argmax[c], c)] = g_raw[c];
                }
            }
        }
        // through the layers, last to first
        let mut g_out = g_nodes;
        for layer in (0..self.num_layers()).rev() {
            let lw = &self.layers[layer];
            let z = &trace.preacts[layer];
            let g_z = match self.operator {
                OperatorKind::Sgcn => g_out,
                _ => {
                    let mut g = g_out;
                    for (gv, &zv) in g.data_mut().iter_mut().zip(z.data()) {
                        if zv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
            };
            let p = &trace.propagated[layer];
            let h = &trace.layer_inputs[layer];
            match self.operator {
                OperatorKind::VanillaGcn => {
                    grads.layers[layer].w = p.transpose_matmul(&g_z);
                    let g_p = g_z.matmul_transpose(&lw.w);
                    g_out = adj.apply(&g_p); // Â is symmetric
                }
                OperatorKind::ClusterGcn => {
                    grads.layers[layer].w = p.transpose_matmul(&g_z);
                    grads.layers[layer].w_b = Some(h.transpose_matmul(&g_z));
                    let g_p = g_z.matmul_transpose(&lw.w);
                    let mut g_h = adj.apply(&g_p);
                    g_h.add_assign(&g_z.matmul_transpose(lw.w_b.as_ref().unwrap()));
                    g_out = g_h;
                }
                OperatorKind::Sgcn => {
                    grads.layers[layer].w = p.transpose_matmul(&g_z);
                    let mut g_p = g_z.matmul_transpose(&lw.w);
                    for _ in 0..self.sgcn_power {
                        g_p = adj.apply(&g_p);
                    }
                    g_out = g_p;
                }
            }
        }
        grads
    }
}

/// Column-wise aggregation over all node rows.
pub fn aggregate(signal: &Mat, aggregator: Aggregator) -> Vec<f64> {
    aggregate_with_argmax(signal, aggregator).0
}

fn aggregate_with_argmax(signal: &Mat, aggregator: Aggregator) -> (Vec<f64>, Option<Vec<usize>>) {
    let n = signal.rows();
    let d = signal.cols();
    assert!(n >= 1, "cannot aggregate an empty signal");
    match aggregator {
        Aggregator::Mean => {
            let mut out = vec![0.0; d];
            for r in 0..n {
                for (o, &v) in out.iter_mut().zip(signal.row(r)) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o /= n as f64;
            }
            (out, None)
        }
        Aggregator::Max => {
            let mut out = signal.row(0).to_vec();
            let mut argmax = vec![0usize; d];
            for r in 1..n {
                for (c, &v) in signal.row(r).iter().enumerate() {
                    if v > out[c] {
                        out[c] = v;
                        argmax[c] = r;
                    }
                }
            }
            (out, Some(argmax))
        }
    }
}

fn centered_norm_of(raw: &[f64]) -> f64 {
    let m = mean(raw);
    raw.iter().map(|v| (v - m) * (v - m)).sum::<f64>().sqrt()
}

/// Zero-mean then L2-normalize. A vector that centers to (numerically)
/// zero cannot be normalized and is reported as degenerate.
pub fn postprocess(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding input".into()));
    }
    let m = mean(raw);
    let centered: Vec<f64> = raw.iter().map(|v| v - m).collect();
    let n = norm(&centered);
    let scale_ref = norm(raw).max(1.0);
    if n <= DEGENERATE_EPS * scale_ref {
        return Err(Error::DegenerateEmbedding(String::new()));
    }
    Ok(centered.iter().map(|v| v / n).collect())
}

/// Deterministic zero-mean unit vector substituted for degenerate
/// embeddings: a centered, normalized index ramp.
pub fn fallback_embedding(dim: usize) -> Vec<f64> {
    assert!(dim >= 2);
    let half = (dim as f64 - 1.0) / 2.0;
    let v: Vec<f64> = (0..dim).map(|i| i as f64 - half).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Embed one video graph. Degenerate post-processing is an error here;
/// see [`embed_video_with_fallback`] for the substituting variant.
pub fn embed_video(graph: &VideoGraph, model: &GnnModel) -> Result<VideoEmbedding> {
    let trace = model.forward(graph)?;
    if trace.degenerate {
        return Err(Error::DegenerateEmbedding(graph.video_id.clone()));
    }
    Ok(VideoEmbedding {
        video_id: graph.video_id.clone(),
        vector: trace.embedding,
    })
}

/// Embed one video graph, substituting the deterministic fallback vector
/// when post-processing collapses. Returns the degenerate flag so callers
/// can log the video id.
pub fn embed_video_with_fallback(
    graph: &VideoGraph,
    model: &GnnModel,
) -> Result<(VideoEmbedding, bool)> {
    let trace = model.forward(graph)?;
    Ok((
        VideoEmbedding {
            video_id: graph.video_id.clone(),
            vector: trace.embedding,
        },
        trace.degenerate,
    ))
}

/// Static-aggregation baseline: mean of the raw region features, centered
/// and normalized, with no graph propagation.
pub fn static_embedding(graph: &VideoGraph) -> Result<(VideoEmbedding, bool)> {
    let raw = aggregate(&graph.features, Aggregator::Mean);
    let (vector, degenerate) = match postprocess(&raw) {
        Ok(v) => (v, false),
        Err(_) => (fallback_embedding(raw.len()), true),
    };
    Ok((
        VideoEmbedding {
            video_id: graph.video_id.clone(),
            vector,
        },
        degenerate,
    ))
}

// --- checkpoint io ----------------------------------------------------------

fn operator_code(op: OperatorKind) -> u8 {
    match op {
        OperatorKind::VanillaGcn => 0,
        OperatorKind::ClusterGcn => 1,
        OperatorKind::Sgcn => 2,
    }
}

fn operator_from_code(code: u8, path: &Path) -> Result<OperatorKind> {
    Ok(match code {
        0 => OperatorKind::VanillaGcn,
        1 => OperatorKind::ClusterGcn,
        2 => OperatorKind::Sgcn,
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unknown operator code {code}"),
            })
        }
    })
}

fn write_mat(buf: &mut Vec<u8>, m: &Mat) -> Result<()> {
    for &v in m.data() {
        bytes::w_f32(buf, v as f32)?;
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Mat> {
    let mut raw = vec![0u8; rows * cols * 4];
    r.read_exact(&mut raw)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Mat::from_row_major(rows, cols, data))
}

/// Serialize the model section (header, dimension table, weights, init
/// seed and config hash) into `buf`. The training checkpoint appends its
/// optimizer state after this section.
pub fn write_model_section(buf: &mut Vec<u8>, model: &GnnModel) -> Result<()> {
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    bytes::w_u16(buf, CHECKPOINT_VERSION)?;
    bytes::w_u8(buf, operator_code(model.operator))?;
    bytes::w_u16(buf, model.num_layers() as u16)?;
    bytes::w_u16(buf, model.sgcn_power as u16)?;
    bytes::w_u8(buf, matches!(model.aggregator, Aggregator::Max) as u8)?;
    // dimension table: d0, d1, ..., dS
    bytes::w_u32(buf, model.input_dim() as u32)?;
    for l in &model.layers {
        bytes::w_u32(buf, l.w.cols() as u32)?;
    }
    for l in &model.layers {
        write_mat(buf, &l.w)?;
        if let Some(b) = &l.w_b {
            write_mat(buf, b)?;
        }
    }
    bytes::w_u64(buf, model.init_seed)?;
    bytes::w_u64(buf, model.config_hash)?;
    Ok(())
}

/// Deserialize the model section written by [`write_model_section`].
pub fn read_model_section<R: Read>(r: &mut R, path: &Path) -> Result<GnnModel> {
    bytes::expect_magic(r, CHECKPOINT_MAGIC, path)?;
    let version = bytes::r_u16(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}"),
        });
    }
    let operator = operator_from_code(bytes::r_u8(r)?, path)?;
    let num_layers = bytes::r_u16(r)? as usize;
    let sgcn_power = bytes::r_u16(r)? as usize;
    let aggregator = if bytes::r_u8(r)? != 0 {
        Aggregator::Max
    } else {
        Aggregator::Mean
    };
    let mut dims = Vec::with_capacity(num_layers + 1);
    for _ in 0..=num_layers {
        dims.push(bytes::r_u32(r)? as usize);
    }
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let w = read_mat(r, dims[l], dims[l + 1])?;
        let w_b = match operator {
            OperatorKind::ClusterGcn => Some(read_mat(r, dims[l], dims[l + 1])?),
            _ => None,
        };
        layers.push(LayerWeights { w, w_b });
    }
    let init_seed = bytes::r_u64(r)?;
    let config_hash = bytes::r_u64(r)?;
    Ok(GnnModel {
        operator,
        layers,
        aggregator,
        sgcn_power,
        init_seed,
        config_hash,
    })
}

/// Write a model-only checkpoint file.
pub fn save_checkpoint(path: &Path, model: &GnnModel) -> Result<()> {
    let mut buf = Vec::new();
    write_model_section(&mut buf, model)?;
    bytes::atomic_write(path, &buf)
}

/// Load the model from a checkpoint, ignoring any appended optimizer
/// state. `expected_hash` (when given) must match the stored config hash.
pub fn load_checkpoint(path: &Path, expected_hash: Option<u64>) -> Result<GnnModel> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::PipelineOrder(format!(
            "checkpoint {} missing ({e}); run training first",
            path.display()
        ))
    })?;
    let mut r = BufReader::new(file);
    let model = read_model_section(&mut r, path)?;
    if let Some(expected) = expected_hash {
        if model.config_hash != expected {
            return Err(Error::ConfigMismatch {
                path: path.to_path_buf(),
                found: model.config_hash,
                expected,
            });
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::ingest::RegionNode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(seed: u64, frames: usize, dim: usize) -> VideoGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut regions = Vec::new();
        for f in 0..frames {
            for (k, npos) in [(1u16, 9usize), (2, 4), (3, 1)] {
                for j in 0..npos {
                    regions.push(RegionNode {
                        frame_index: f as u32,
                        scale_index: k,
                        position_index: j as u16,
                        feature: (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                    });
                }
            }
        }
        build_graph("test", &regions, true, 2048).unwrap()
    }

    fn model(op: OperatorKind, dims: &[usize], agg: Aggregator, seed: u64) -> GnnModel {
        GnnModel::init(op, dims, agg, 1, seed, 0)
    }

    #[test]
    fn single_node_identity_weights_is_relu() {
        // graph with one node: Â = [1]
        let regions = vec![RegionNode {
            frame_index: 0,
            scale_index: 1,
            position_index: 0,
            feature: vec![1.5, -2.0],
        }];
        let g = build_graph("v", &regions, true, 2048).unwrap();
        let mut m = model(OperatorKind::VanillaGcn, &[2, 2], Aggregator::Mean, 1);
        m.layers[0].w = Mat::eye(2);
        let out = m.layer_forward(0, g.adjacency(), &g.features).unwrap();
        assert_eq!(out.row(0), &[1.5, 0.0]);
    }

    #[test]
    fn cluster_with_zero_wa_is_a_per_node_linear_layer() {
        let g = random_graph(1, 2, 5);
        let mut m = model(OperatorKind::ClusterGcn, &[5, 3], Aggregator::Mean, 2);
        m.layers[0].w = Mat::zeros(5, 3);
        let out = m.layer_forward(0, g.adjacency(), &g.features).unwrap();
        let oracle = g
            .features
            .matmul(m.layers[0].w_b.as_ref().unwrap())
            .map(|v| v.max(0.0));
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn sgcn_k1_equals_vanilla_without_relu_on_nonnegative_preacts() {
        let g = random_graph(2, 1, 6);
        let mut sg = model(OperatorKind::Sgcn, &[6, 4], Aggregator::Mean, 3);
        // nonnegative weights + nonnegative features -> nonnegative preacts
        sg.layers[0].w = sg.layers[0].w.map(f64::abs);
        let mut vg = model(OperatorKind::VanillaGcn, &[6, 4], Aggregator::Mean, 3);
        vg.layers[0].w = sg.layers[0].w.clone();

        let s_out = sg.layer_forward(0, g.adjacency(), &g.features).unwrap();
        let v_out = vg.layer_forward(0, g.adjacency(), &g.features).unwrap();
        assert!(s_out.max_abs_diff(&v_out) < 1e-12);

        // and equals the dense matrix-product oracle A X W exactly
        let oracle = g
            .adjacency()
            .to_dense()
            .matmul(&g.features)
            .matmul(&sg.layers[0].w);
        assert!(s_out.max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn aggregate_examples() {
        let constant = Mat::from_rows(&[vec![3.0, -1.0], vec![3.0, -1.0], vec![3.0, -1.0]]);
        assert_eq!(aggregate(&constant, Aggregator::Mean), vec![3.0, -1.0]);
        assert_eq!(aggregate(&constant, Aggregator::Max), vec![3.0, -1.0]);

        let two = Mat::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]);
        assert_eq!(aggregate(&two, Aggregator::Mean), vec![1.0, 1.0]);
        assert_eq!(aggregate(&two, Aggregator::Max), vec![2.0, 2.0]);
    }

    #[test]
    fn aggregate_mean_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sig = Mat::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
        let got = aggregate(&sig, Aggregator::Mean);
        for c in 0..8 {
            let mut s = 0.0;
            for r in 0..5 {
                s += sig[(r, c)];
            }
            assert!((got[c] - s / 5.0).abs() < 1e-7);
        }
    }

    #[test]
    fn postprocess_centers_then_normalizes() {
        let out = postprocess(&[1.0, 3.0]).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] + s).abs() < 1e-12);
        assert!((out[1] - s).abs() < 1e-12);
    }

    #[test]
    fn postprocess_rejects_constant_vectors() {
        let err = postprocess(&[0.7, 0.7, 0.7]).unwrap_err();
        assert!(matches!(err, Error::DegenerateEmbedding(_)));
    }

    #[test]
    fn postprocess_is_idempotent_on_fixed_points() {
        let v = postprocess(&[0.3, -1.0, 2.5, 0.0]).unwrap();
        let again = postprocess(&v).unwrap();
        for (a, b) in v.iter().zip(&again) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn fallback_embedding_satisfies_the_contract() {
        for dim in [2usize, 3, 7, 64] {
            let v = fallback_embedding(dim);
            assert!(mean(&v).abs() < 1e-12);
            assert!((norm(&v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_graphs_embed_identically() {
        let m = model(OperatorKind::ClusterGcn, &[6, 6], Aggregator::Mean, 5);
        let a = embed_video(&random_graph(11, 3, 6), &m).unwrap();
        let b = embed_video(&random_graph(11, 3, 6), &m).unwrap();
        assert_eq!(a.vector, b.vector);
    }

    #[test]
    fn embeddings_satisfy_zero_mean_unit_norm() {
        for op in [
            OperatorKind::VanillaGcn,
            OperatorKind::ClusterGcn,
            OperatorKind::Sgcn,
        ] {
            for agg in [Aggregator::Mean, Aggregator::Max] {
                let m = model(op, &[5, 4], agg, 6);
                let e = embed_video(&random_graph(12, 2, 5), &m).unwrap();
                assert!(mean(&e.vector).abs() < 1e-6);
                assert!((norm(&e.vector) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frame_reversal_preserves_the_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut regions = Vec::new();
        let frames = 4u32;
        for f in 0..frames {
            for (k, npos) in [(1u16, 9usize), (2, 4), (3, 1)] {
                for j in 0..npos {
                    regions.push(RegionNode {
                        frame_index: f,
                        scale_index: k,
                        position_index: j as u16,
                        feature: (0..5).map(|_| rng.random_range(0.0..1.0)).collect(),
                    });
                }
            }
        }
        let reversed: Vec<RegionNode> = regions
            .iter()
            .map(|r| RegionNode {
                frame_index: frames - 1 - r.frame_index,
                ..r.clone()
            })
            .collect();
        let ga = build_graph("v", &regions, true, 2048).unwrap();
        let gb = build_graph("v", &reversed, true, 2048).unwrap();
        for op in [
            OperatorKind::VanillaGcn,
            OperatorKind::ClusterGcn,
            OperatorKind::Sgcn,
        ] {
            let m = model(op, &[5, 4], Aggregator::Mean, 7);
            let ea = embed_video(&ga, &m).unwrap();
            let eb = embed_video(&gb, &m).unwrap();
            for (a, b) in ea.vector.iter().zip(&eb.vector) {
                assert!((a - b).abs() < 1e-5, "{op:?}");
            }
        }
    }

    #[test]
    fn single_frame_embed_matches_hand_rolled_dense_pass() {
        // an independently written dense forward: renormalize, multiply,
        // relu, average, center, normalize
        let g = random_graph(14, 1, 2);
        let mut m = model(OperatorKind::VanillaGcn, &[2, 2], Aggregator::Mean, 8);
        m.layers[0].w = Mat::from_rows(&[vec![0.5, -0.25], vec![1.0, 0.75]]);

        let n = g.node_count();
        let a = g.adjacency().to_dense();
        let mut h = vec![vec![0.0f64; 2]; n];
        for i in 0..n {
            for j in 0..n {
                for c in 0..2 {
                    h[i][c] += a[(i, j)] * g.features[(j, c)];
                }
            }
        }
        let w = &m.layers[0].w;
        let mut out = vec![vec![0.0f64; 2]; n];
        for i in 0..n {
            for c in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += h[i][k] * w[(k, c)];
                }
                out[i][c] = acc.max(0.0);
            }
        }
        let mut agg = [0.0f64; 2];
        for row in &out {
            agg[0] += row[0];
            agg[1] += row[1];
        }
        agg[0] /= n as f64;
        agg[1] /= n as f64;
        let mu = (agg[0] + agg[1]) / 2.0;
        let c = [agg[0] - mu, agg[1] - mu];
        let nn = (c[0] * c[0] + c[1] * c[1]).sqrt();
        let oracle = [c[0] / nn, c[1] / nn];

        let e = embed_video(&g, &m).unwrap();
        assert!((e.vector[0] - oracle[0]).abs() < 1e-9);
        assert!((e.vector[1] - oracle[1]).abs() < 1e-9);
    }

    #[test]
    fn layer_forward_is_permutation_equivariant() {
        let g = random_graph(15, 2, 4);
        let n = g.node_count();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);

        let dense = g.adjacency().to_dense();
        let mut permuted_adj = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                permuted_adj[(perm[i], perm[j])] = dense[(i, j)];
            }
        }
        let mut permuted_h = Mat::zeros(n, 4);
        for i in 0..n {
            for c in 0..4 {
                permuted_h[(perm[i], c)] = g.features[(i, c)];
            }
        }
        for op in [
            OperatorKind::VanillaGcn,
            OperatorKind::ClusterGcn,
            OperatorKind::Sgcn,
        ] {
            let m = model(op, &[4, 3], Aggregator::Mean, 17);
            let base = m
                .layer_forward(0, &Adjacency::Dense(dense.clone()), &g.features)
                .unwrap();
            let perm_out = m
                .layer_forward(0, &Adjacency::Dense(permuted_adj.clone()), &permuted_h)
                .unwrap();
            for i in 0..n {
                for c in 0..3 {
                    assert!(
                        (base[(i, c)] - perm_out[(perm[i], c)]).abs() < 1e-6,
                        "{op:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_contract_violation() {
        let g = random_graph(18, 1, 5);
        let m = model(OperatorKind::VanillaGcn, &[4, 4], Aggregator::Mean, 18);
        let err = m.forward(&g).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for op in [
            OperatorKind::VanillaGcn,
            OperatorKind::ClusterGcn,
            OperatorKind::Sgcn,
        ] {
            let mut m = model(op, &[6, 4], Aggregator::Max, 19);
            // force weights onto the f32 grid, as training does
            for l in &mut m.layers {
                l.w = l.w.map(|v| v as f32 as f64);
                if let Some(b) = l.w_b.as_mut() {
                    *b = b.map(|v| v as f32 as f64);
                }
            }
            let path = dir.path().join(format!("{op:?}.strw"));
            save_checkpoint(&path, &m).unwrap();
            let loaded = load_checkpoint(&path, Some(0)).unwrap();
            assert_eq!(loaded, m);
            // a second save produces identical bytes
            let path2 = dir.path().join(format!("{op:?}-2.strw"));
            save_checkpoint(&path2, &loaded).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&path2).unwrap()
            );
        }
    }
}
