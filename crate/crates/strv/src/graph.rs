//! Spatio-temporal lattice graph for one video.
//!
//! Nodes are the multi-scale frame regions. Two distinct nodes are
//! connected iff they share a frame (spatial rule: each frame's regions
//! form a complete subgraph) or they share both scale and position
//! (temporal rule: each region position forms a complete subgraph across
//! frames). Edge weights are cosine similarities of the raw region
//! features, clamped to [0, 1], or unit weights in unweighted mode.
//!
//! GNN propagation consumes the renormalized adjacency
//! `D^{-1/2} (A + I) D^{-1/2}`, cached on the graph after first use and
//! stored dense below a configurable node count, sparse above it.

use std::io::{BufReader, Read};
use std::path::Path;
use std::sync::OnceLock;

use crate::bytes;
use crate::error::{Error, Result};
use crate::ingest::RegionNode;
use crate::linalg::{dot, norm, Mat};

const GRAPH_MAGIC: &[u8; 4] = b"STRG";
const GRAPH_VERSION: u16 = 1;

/// Node coordinates without the feature payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeKey {
    pub frame_index: u32,
    pub scale_index: u16,
    pub position_index: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    pub weight: f64,
}

/// Cosine similarity clamped to [0, 1]; zero vectors are defined to have
/// similarity 0 to everything.
pub fn cosine_weight(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_weight dimension mismatch");
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(0.0, 1.0)
}

/// Renormalized adjacency, dense or coordinate-list sparse.
#[derive(Debug, Clone)]
pub enum Adjacency {
    Dense(Mat),
    Sparse(SparseAdj),
}

/// Full COO storage (both orientations plus the diagonal).
#[derive(Debug, Clone)]
pub struct SparseAdj {
    pub n: usize,
    pub entries: Vec<(u32, u32, f64)>,
}

impl Adjacency {
    pub fn n(&self) -> usize {
        match self {
            Adjacency::Dense(m) => m.rows(),
            Adjacency::Sparse(s) => s.n,
        }
    }

    /// `Â · H`.
    pub fn apply(&self, h: &Mat) -> Mat {
        match self {
            Adjacency::Dense(m) => m.matmul(h),
            Adjacency::Sparse(s) => {
                assert_eq!(s.n, h.rows(), "adjacency/signal dimension mismatch");
                let mut out = Mat::zeros(h.rows(), h.cols());
                for &(r, c, v) in &s.entries {
                    let src = h.row(c as usize);
                    let dst = out.row_mut(r as usize);
                    for (o, &x) in dst.iter_mut().zip(src) {
                        *o += v * x;
                    }
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> Mat {
        match self {
            Adjacency::Dense(m) => m.clone(),
            Adjacency::Sparse(s) => {
                let mut m = Mat::zeros(s.n, s.n);
                for &(r, c, v) in &s.entries {
                    m[(r as usize, c as usize)] += v;
                }
                m
            }
        }
    }
}

/// Weighted undirected lattice graph of one video.
#[derive(Debug, Clone)]
pub struct VideoGraph {
    pub video_id: String,
    /// Node coordinates in node order (frame-major, then scale, then position).
    pub keys: Vec<NodeKey>,
    /// N x C raw region features stacked in node order.
    pub features: Mat,
    /// Undirected edge list, `a < b`, no self-edges.
    pub edges: Vec<Edge>,
    pub frame_count: usize,
    pub num_scales: usize,
    pub weighted: bool,
    pub dense_threshold: usize,
    adjacency: OnceLock<Adjacency>,
}

impl VideoGraph {
    pub fn node_count(&self) -> usize {
        self.keys.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Spatial edges join nodes of the same frame.
    pub fn spatial_edge_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| {
                self.keys[e.a as usize].frame_index == self.keys[e.b as usize].frame_index
            })
            .count()
    }

    pub fn temporal_edge_count(&self) -> usize {
        self.edges.len() - self.spatial_edge_count()
    }

    /// The cached `D^{-1/2} (A + I) D^{-1/2}`.
    pub fn adjacency(&self) -> &Adjacency {
        self.adjacency
            .get_or_init(|| renormalized_adjacency(self))
    }
}

/// Connectivity predicate of the lattice: same frame, or same (scale,
/// position) across frames.
pub fn lattice_connected(u: &NodeKey, v: &NodeKey) -> bool {
    u.frame_index == v.frame_index
        || (u.scale_index == v.scale_index && u.position_index == v.position_index)
}

/// Assemble the lattice graph from a video's region nodes.
pub fn build_graph(
    video_id: &str,
    regions: &[RegionNode],
    weighted: bool,
    dense_threshold: usize,
) -> Result<VideoGraph> {
    if regions.is_empty() {
        return Err(Error::Contract("cannot build a graph from zero regions".into()));
    }
    let dim = regions[0].feature.len();
    for r in regions {
        if r.feature.len() != dim {
            return Err(Error::Contract("region feature dimensions disagree".into()));
        }
        if r.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite region feature in video {video_id}"
            )));
        }
    }

    // canonical node order: frame-major, then scale, then position
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by_key(|&i| {
        (
            regions[i].frame_index,
            regions[i].scale_index,
            regions[i].position_index,
        )
    });
    let keys: Vec<NodeKey> = order
        .iter()
        .map(|&i| NodeKey {
            frame_index: regions[i].frame_index,
            scale_index: regions[i].scale_index,
            position_index: regions[i].position_index,
        })
        .collect();
    for w in keys.windows(2) {
        if w[0] == w[1] {
            return Err(Error::Contract(format!(
                "duplicate region (frame {}, scale {}, position {}) in video {video_id}",
                w[0].frame_index, w[0].scale_index, w[0].position_index
            )));
        }
    }

    let features = Mat::from_fn(keys.len(), dim, |r, c| regions[order[r]].feature[c]);
    let norms: Vec<f64> = (0..keys.len()).map(|i| norm(features.row(i))).collect();

    let mut edges = Vec::new();
    for a in 0..keys.len() {
        for b in (a + 1)..keys.len() {
            if !lattice_connected(&keys[a], &keys[b]) {
                continue;
            }
            let weight = if weighted {
                if norms[a] == 0.0 || norms[b] == 0.0 {
                    0.0
                } else {
                    (dot(features.row(a), features.row(b)) / (norms[a] * norms[b])).clamp(0.0, 1.0)
                }
            } else {
                1.0
            };
            edges.push(Edge {
                a: a as u32,
                b: b as u32,
                weight,
            });
        }
    }

    let frame_count = keys
        .iter()
        .map(|k| k.frame_index)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let num_scales = keys
        .iter()
        .map(|k| k.scale_index)
        .collect::<std::collections::BTreeSet<_>>()
        .len();

    Ok(VideoGraph {
        video_id: video_id.to_string(),
        keys,
        features,
        edges,
        frame_count,
        num_scales,
        weighted,
        dense_threshold,
        adjacency: OnceLock::new(),
    })
}

/// `D^{-1/2} (A + I) D^{-1/2}` over the graph's weighted edge list.
///
/// Row sums of `A + I` are at least 1 thanks to the unit self-loop, so the
/// inverse square roots always exist.
pub fn renormalized_adjacency(g: &VideoGraph) -> Adjacency {
    let n = g.node_count();
    let mut degree = vec![1.0f64; n]; // self-loop
    for e in &g.edges {
        degree[e.a as usize] += e.weight;
        degree[e.b as usize] += e.weight;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();

    if n <= g.dense_threshold {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = inv_sqrt[i] * inv_sqrt[i];
        }
        for e in &g.edges {
            let (a, b) = (e.a as usize, e.b as usize);
            let v = e.weight * inv_sqrt[a] * inv_sqrt[b];
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
        Adjacency::Dense(m)
    } else {
        let mut entries = Vec::with_capacity(2 * g.edges.len() + n);
        for (i, inv) in inv_sqrt.iter().enumerate() {
            entries.push((i as u32, i as u32, inv * inv));
        }
        for e in &g.edges {
            let v = e.weight * inv_sqrt[e.a as usize] * inv_sqrt[e.b as usize];
            entries.push((e.a, e.b, v));
            entries.push((e.b, e.a, v));
        }
        Adjacency::Sparse(SparseAdj { n, entries })
    }
}

// --- serialization ----------------------------------------------------------

/// Write a graph as an STRG file, embedding the graph-stage config hash.
pub fn write_graph(path: &Path, g: &VideoGraph, graph_hash: u64) -> Result<()> {
    let n = g.node_count();
    let c = g.feature_dim();
    let mut buf = Vec::with_capacity(64 + g.edges.len() * 12 + n * (16 + c * 4));
    buf.extend_from_slice(GRAPH_MAGIC);
    bytes::w_u16(&mut buf, GRAPH_VERSION)?;
    bytes::w_str(&mut buf, &g.video_id)?;
    bytes::w_u32(&mut buf, n as u32)?;
    bytes::w_u32(&mut buf, g.frame_count as u32)?;
    bytes::w_u16(&mut buf, g.num_scales as u16)?;
    bytes::w_u8(&mut buf, g.weighted as u8)?;
    bytes::w_u16(&mut buf, c as u16)?;
    bytes::w_u64(&mut buf, graph_hash)?;
    bytes::w_u64(&mut buf, g.edges.len() as u64)?;
    for (i, k) in g.keys.iter().enumerate() {
        bytes::w_u32(&mut buf, k.frame_index)?;
        bytes::w_u16(&mut buf, k.scale_index)?;
        bytes::w_u16(&mut buf, k.position_index)?;
        bytes::w_u64(&mut buf, (i * c * 4) as u64)?; // offset into the feature block
    }
    for e in &g.edges {
        bytes::w_u32(&mut buf, e.a)?;
        bytes::w_u32(&mut buf, e.b)?;
        bytes::w_f32(&mut buf, e.weight as f32)?;
    }
    for &v in g.features.data() {
        bytes::w_f32(&mut buf, v as f32)?;
    }
    bytes::atomic_write(path, &buf)
}

/// Read an STRG file; `expected_hash` (when given) must match the stored
/// graph-stage config hash.
pub fn read_graph(
    path: &Path,
    dense_threshold: usize,
    expected_hash: Option<u64>,
) -> Result<VideoGraph> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::PipelineOrder(format!(
            "graph file {} missing ({e}); run graph construction first",
            path.display()
        ))
    })?;
    let mut r = BufReader::new(file);
    bytes::expect_magic(&mut r, GRAPH_MAGIC, path)?;
    let version = bytes::r_u16(&mut r)?;
    if version != GRAPH_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}"),
        });
    }
    let video_id = bytes::r_str(&mut r)?;
    let n = bytes::r_u32(&mut r)? as usize;
    let frame_count = bytes::r_u32(&mut r)? as usize;
    let num_scales = bytes::r_u16(&mut r)? as usize;
    let weighted = bytes::r_u8(&mut r)? != 0;
    let c = bytes::r_u16(&mut r)? as usize;
    let stored_hash = bytes::r_u64(&mut r)?;
    if let Some(expected) = expected_hash {
        if stored_hash != expected {
            return Err(Error::ConfigMismatch {
                path: path.to_path_buf(),
                found: stored_hash,
                expected,
            });
        }
    }
    let edge_count = bytes::r_u64(&mut r)? as usize;
    let mut keys = Vec::with_capacity(n);
    for i in 0..n {
        let key = NodeKey {
            frame_index: bytes::r_u32(&mut r)?,
            scale_index: bytes::r_u16(&mut r)?,
            position_index: bytes::r_u16(&mut r)?,
        };
        let offset = bytes::r_u64(&mut r)?;
        if offset != (i * c * 4) as u64 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("node {i} feature offset {offset} out of place"),
            });
        }
        keys.push(key);
    }
    let mut edges = Vec::with_capacity(edge_count);
    for _ in 0..edge_count {
        edges.push(Edge {
            a: bytes::r_u32(&mut r)?,
            b: bytes::r_u32(&mut r)?,
            weight: bytes::r_f32(&mut r)? as f64,
        });
    }
    let mut raw = vec![0u8; n * c * 4];
    r.read_exact(&mut raw).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "truncated feature matrix".into(),
    })?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(VideoGraph {
        video_id,
        keys,
        features: Mat::from_row_major(n, c, data),
        edges,
        frame_count,
        num_scales,
        weighted,
        dense_threshold,
        adjacency: OnceLock::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random region set shaped like the default 14-regions-per-frame scheme.
    pub(crate) fn random_regions(seed: u64, frames: usize, dim: usize) -> Vec<RegionNode> {
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
        regions
    }

    #[test]
    fn cosine_weight_examples() {
        let a = vec![1.0, 1.0];
        assert!((cosine_weight(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_weight(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        // hand-evaluated: (1,1)·(1,0) / (√2·1) = 1/√2
        let got = cosine_weight(&[1.0, 1.0], &[1.0, 0.0]);
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_weight(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        // anti-parallel clamps to 0
        assert_eq!(cosine_weight(&[1.0, 0.0], &[-1.0, 0.0]), 0.0);
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn cosine_weight_rejects_dimension_mismatch() {
        cosine_weight(&[1.0], &[1.0, 2.0]);
    }

    #[test]
    fn single_frame_graph_has_91_edges() {
        let g = build_graph("v", &random_regions(1, 1, 8), true, 2048).unwrap();
        assert_eq!(g.node_count(), 14);
        assert_eq!(g.edges.len(), 91);
        assert_eq!(g.temporal_edge_count(), 0);
    }

    #[test]
    fn three_frame_graph_combinatorics() {
        let g = build_graph("v", &random_regions(2, 3, 8), true, 2048).unwrap();
        assert_eq!(g.node_count(), 42);
        assert_eq!(g.spatial_edge_count(), 91 * 3);
        assert_eq!(g.temporal_edge_count(), 14 * 3); // 14 * C(3,2)
        assert_eq!(g.edges.len(), 315);
    }

    #[test]
    fn identical_frames_give_unit_temporal_weights() {
        let mut regions = random_regions(3, 1, 8);
        let copy: Vec<RegionNode> = regions
            .iter()
            .map(|r| RegionNode {
                frame_index: 1,
                ..r.clone()
            })
            .collect();
        regions.extend(copy);
        let g = build_graph("v", &regions, true, 2048).unwrap();
        for e in &g.edges {
            let (ka, kb) = (&g.keys[e.a as usize], &g.keys[e.b as usize]);
            if ka.frame_index != kb.frame_index {
                assert!((e.weight - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_region_is_contract_violation() {
        let mut regions = random_regions(4, 1, 4);
        regions.push(regions[0].clone());
        let err = build_graph("v", &regions, true, 2048).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn unweighted_mode_is_weighted_with_unit_weights() {
        let regions = random_regions(5, 2, 6);
        let gw = build_graph("v", &regions, true, 2048).unwrap();
        let gu = build_graph("v", &regions, false, 2048).unwrap();
        assert_eq!(gw.edges.len(), gu.edges.len());
        for (a, b) in gw.edges.iter().zip(&gu.edges) {
            assert_eq!((a.a, a.b), (b.a, b.b));
            assert_eq!(b.weight, 1.0);
        }
    }

    #[test]
    fn single_node_adjacency_is_identity() {
        let regions = vec![RegionNode {
            frame_index: 0,
            scale_index: 1,
            position_index: 0,
            feature: vec![1.0, 2.0],
        }];
        let g = build_graph("v", &regions, true, 2048).unwrap();
        let adj = g.adjacency().to_dense();
        assert_eq!(adj.rows(), 1);
        assert!((adj[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unweighted_complete_graph_normalizes_to_uniform() {
        // a single frame is a complete graph on 14 nodes
        let g = build_graph("v", &random_regions(6, 1, 4), false, 2048).unwrap();
        let adj = g.adjacency().to_dense();
        let n = 14.0;
        for r in 0..14 {
            let mut row_sum = 0.0;
            for c in 0..14 {
                assert!((adj[(r, c)] - 1.0 / n).abs() < 1e-12);
                row_sum += adj[(r, c)];
            }
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_frame_weighted_adjacency_matches_dense_oracle() {
        // independent dense evaluation of D^{-1/2} (A+I) D^{-1/2}
        let regions = random_regions(7, 2, 5);
        let g = build_graph("v", &regions, true, 2048).unwrap();
        let n = g.node_count();
        let mut a = Mat::zeros(n, n);
        for e in &g.edges {
            a[(e.a as usize, e.b as usize)] = e.weight;
            a[(e.b as usize, e.a as usize)] = e.weight;
        }
        for i in 0..n {
            a[(i, i)] = 1.0;
        }
        let mut d_inv_sqrt = Mat::zeros(n, n);
        for i in 0..n {
            let deg: f64 = (0..n).map(|j| a[(i, j)]).sum();
            d_inv_sqrt[(i, i)] = deg.powf(-0.5);
        }
        let oracle = d_inv_sqrt.matmul(&a).matmul(&d_inv_sqrt);
        let got = g.adjacency().to_dense();
        assert!(got.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn sparse_and_dense_adjacency_agree() {
        let regions = random_regions(8, 3, 4);
        let gd = build_graph("v", &regions, true, 2048).unwrap();
        let gs = build_graph("v", &regions, true, 1).unwrap(); // force sparse
        assert!(matches!(gs.adjacency(), Adjacency::Sparse(_)));
        let dense = gd.adjacency().to_dense();
        let sparse = gs.adjacency().to_dense();
        assert!(dense.max_abs_diff(&sparse) < 1e-12);
        // apply() agrees too
        let h = Mat::from_fn(gd.node_count(), 3, |r, c| ((r + c) as f64).sin());
        let a = gd.adjacency().apply(&h);
        let b = gs.adjacency().apply(&h);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn graph_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = build_graph("vid-9", &random_regions(9, 2, 6), true, 2048).unwrap();
        let path = dir.path().join("g.strg");
        write_graph(&path, &g, 0xDEAD).unwrap();
        let back = read_graph(&path, 2048, Some(0xDEAD)).unwrap();
        assert_eq!(back.video_id, "vid-9");
        assert_eq!(back.node_count(), g.node_count());
        assert_eq!(back.edges.len(), g.edges.len());
        assert_eq!(back.frame_count, 2);
        assert_eq!(back.num_scales, 3);
        assert!(back.weighted);
        for (x, y) in g.features.data().iter().zip(back.features.data()) {
            assert!((x - y).abs() <= x.abs() * 1e-6 + 1e-12);
        }
        // wrong expected hash is a config mismatch
        let err = read_graph(&path, 2048, Some(0xBEEF)).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch { .. }));
    }
}
