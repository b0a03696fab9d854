//! Video-level feature embeddings from spatio-temporal lattice graphs.
//!
//! The pipeline turns a video into a single retrieval embedding in four
//! stages:
//!
//! 1. [`ingest`] — sample frames, run a (pluggable) backbone to get a
//!    spatial feature map per frame, and max-pool multi-scale sliding
//!    windows into regional feature nodes.
//! 2. [`graph`] — connect the region nodes into a weighted undirected
//!    lattice: complete spatial subgraphs within each frame, complete
//!    temporal subgraphs across frames at each fixed region position.
//! 3. [`gnn`] — propagate node features with a graph convolution
//!    (vanilla GCN, Cluster-GCN or SGC), aggregate all node states into
//!    one vector, and post-process it (zero-mean, L2) into the video
//!    embedding.
//! 4. [`retrieval`] — index embeddings, rank candidates by cosine
//!    similarity and score retrieval quality with mean average precision.
//!
//! [`train`] fits the GNN weights with a triplet / contrastive objective
//! over mini-batches of video pairs, mining the hardest in-batch negative
//! for each anchor. [`attnviz`] projects the similarity between the final
//! embedding and each region node back onto the frame grid as heat maps.
//!
//! Everything is deterministic given a seed: same input bytes plus same
//! config produce identical artifacts.

pub mod attnviz;
pub(crate) mod bytes;
pub mod config;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod ingest;
pub mod linalg;
pub mod manifest;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod train;
pub mod video;

pub use config::PipelineConfig;
pub use error::{Error, Result};

/// Map `f` over `items` preserving order, in parallel when the `parallel`
/// feature is enabled.
pub(crate) fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
