//! Embedding index, similarity ranking and retrieval evaluation.
//!
//! Ranking is an exact full scan: candidates are scored by the dot
//! product of unit-norm embeddings (cosine similarity), sorted
//! descending with ties broken by ascending video id, so result tables
//! are identical across runs. Retrieval quality is mean average
//! precision over a set of relevance-labeled queries, optionally with a
//! seeded distractor set injected into every candidate pool.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::bytes;
use crate::error::{Error, Result};
use crate::gnn::VideoEmbedding;
use crate::linalg::{dot, mean, norm};

const EMBED_MAGIC: &[u8; 4] = b"STRE";
const EMBED_VERSION: u16 = 1;

/// Tolerance for the zero-mean / unit-norm embedding contract.
pub const EMBED_CONTRACT_TOL: f64 = 1e-6;

/// All embeddings of a corpus, keyed by video id.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    entries: BTreeMap<String, Vec<f64>>,
    dim: Option<usize>,
}

impl EmbeddingIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert one embedding; it must satisfy the contract and match the
    /// index dimension.
    pub fn insert(&mut self, e: VideoEmbedding) -> Result<()> {
        if let Some(dim) = self.dim {
            if e.vector.len() != dim {
                return Err(Error::Contract(format!(
                    "embedding dim {} does not match index dim {dim}",
                    e.vector.len()
                )));
            }
        } else {
            self.dim = Some(e.vector.len());
        }
        if !embedding_contract_ok(&e.vector) {
            return Err(Error::Numeric(format!(
                "embedding for {} violates the zero-mean/unit-norm contract",
                e.video_id
            )));
        }
        self.entries.insert(e.video_id, e.vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.entries.get(id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// Zero component mean and unit L2 norm, both at [`EMBED_CONTRACT_TOL`].
pub fn embedding_contract_ok(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
        && mean(v).abs() <= EMBED_CONTRACT_TOL
        && (norm(v) - 1.0).abs() <= EMBED_CONTRACT_TOL
}

/// Relevance labels for one query.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueryRelevance {
    pub query: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

pub fn read_relevance(path: &Path) -> Result<Vec<QueryRelevance>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Input(format!("cannot open relevance file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRelevance = serde_json::from_str(&line).map_err(|e| {
            Error::Input(format!(
                "bad relevance record at {}:{}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if rec.positives.is_empty() {
            return Err(Error::Input(format!(
                "query {} has no positives",
                rec.query
            )));
        }
        if rec.positives.contains(&rec.query) || rec.negatives.contains(&rec.query) {
            return Err(Error::Input(format!(
                "query {} appears in its own candidate labels",
                rec.query
            )));
        }
        let pos: BTreeSet<&String> = rec.positives.iter().collect();
        if rec.negatives.iter().any(|n| pos.contains(n)) {
            return Err(Error::Input(format!(
                "query {}: positive and negative sets overlap",
                rec.query
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_relevance(path: &Path, records: &[QueryRelevance]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Score all candidates against the query embedding: cosine similarity,
/// descending, ties by ascending id.
pub fn rank(
    query: &[f64],
    index: &EmbeddingIndex,
    candidate_ids: &BTreeSet<String>,
) -> Result<Vec<(String, f64)>> {
    let mut scored = Vec::with_capacity(candidate_ids.len());
    for id in candidate_ids {
        let v = index
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.clone()))?;
        scored.push((id.clone(), dot(query, v)));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(scored)
}

/// Average precision of a ranking: mean over the positives of the
/// precision at each positive's rank; positives missing from the ranking
/// contribute zero.
pub fn average_precision(ranked_ids: &[String], positives: &BTreeSet<String>) -> f64 {
    assert!(!positives.is_empty(), "average_precision needs positives");
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked_ids.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / positives.len() as f64
}

/// Deterministic distractor sampling: a seeded permutation of the pool,
/// truncated to `n`. Growing `n` with the same seed yields nested sets,
/// so evaluations at increasing distractor counts are comparable.
pub fn sample_distractors(pool: &[String], n: usize, seed: u64) -> Vec<String> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut sorted: Vec<String> = pool.to_vec();
    sorted.sort();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    sorted.truncate(n);
    sorted
}

/// Evaluation report, serialized as the JSON artifact of `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_query: BTreeMap<String, f64>,
    pub distractor_count: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// One query's ranked candidates and its average precision.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub query: String,
    /// (video id, score), scores non-increasing.
    pub ranked: Vec<(String, f64)>,
    pub ap: f64,
}

/// Rank and score every query. A query's candidate set is its positives,
/// its labeled negatives and the shared distractor set.
pub fn evaluate_queries(
    index: &EmbeddingIndex,
    queries: &[QueryRelevance],
    distractor_ids: &[String],
) -> Result<Vec<RetrievalResult>> {
    if queries.is_empty() {
        return Err(Error::Contract("no queries to evaluate".into()));
    }
    let results = crate::map_ordered(queries, |q| -> Result<RetrievalResult> {
        let qvec = index
            .get(&q.query)
            .ok_or_else(|| Error::UnknownId(q.query.clone()))?;
        let mut candidates: BTreeSet<String> = q.positives.iter().cloned().collect();
        candidates.extend(q.negatives.iter().cloned());
        candidates.extend(distractor_ids.iter().cloned());
        candidates.remove(&q.query);
        let ranked = rank(qvec, index, &candidates)?;
        let ranked_ids: Vec<String> = ranked.iter().map(|(id, _)| id.clone()).collect();
        let positives: BTreeSet<String> = q.positives.iter().cloned().collect();
        let ap = average_precision(&ranked_ids, &positives);
        Ok(RetrievalResult {
            query: q.query.clone(),
            ranked,
            ap,
        })
    });
    results.into_iter().collect()
}

/// Mean average precision over `queries`; see [`evaluate_queries`].
pub fn evaluate_map(
    index: &EmbeddingIndex,
    queries: &[QueryRelevance],
    distractor_ids: &[String],
) -> Result<(f64, BTreeMap<String, f64>)> {
    let results = evaluate_queries(index, queries, distractor_ids)?;
    let per_query: BTreeMap<String, f64> =
        results.into_iter().map(|r| (r.query, r.ap)).collect();
    let map = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok((map, per_query))
}

// --- embedding store --------------------------------------------------------

/// Write an index as an STRE file, embedding the model-stage config hash.
pub fn write_embeddings(path: &Path, index: &EmbeddingIndex, config_hash: u64) -> Result<()> {
    let dim = index.dim().unwrap_or(0);
    let mut buf = Vec::new();
    buf.extend_from_slice(EMBED_MAGIC);
    bytes::w_u16(&mut buf, EMBED_VERSION)?;
    bytes::w_u64(&mut buf, config_hash)?;
    bytes::w_u32(&mut buf, index.len() as u32)?;
    bytes::w_u32(&mut buf, dim as u32)?;
    for (id, vec) in &index.entries {
        bytes::w_str(&mut buf, id)?;
        for &v in vec {
            bytes::w_f32(&mut buf, v as f32)?;
        }
    }
    bytes::atomic_write(path, &buf)
}

/// Read an STRE file. `expected_hash` (when given) must match the stored
/// model-stage config hash.
pub fn read_embeddings(path: &Path, expected_hash: Option<u64>) -> Result<EmbeddingIndex> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::PipelineOrder(format!(
            "embedding store {} missing ({e}); run embedding first",
            path.display()
        ))
    })?;
    let mut r = BufReader::new(file);
    bytes::expect_magic(&mut r, EMBED_MAGIC, path)?;
    let version = bytes::r_u16(&mut r)?;
    if version != EMBED_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported version {version}"),
        });
    }
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
    let count = bytes::r_u32(&mut r)? as usize;
    let dim = bytes::r_u32(&mut r)? as usize;
    let mut index = EmbeddingIndex::new();
    for _ in 0..count {
        let id = bytes::r_str(&mut r)?;
        let mut raw = vec![0u8; dim * 4];
        r.read_exact(&mut raw).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: "truncated embedding record".into(),
        })?;
        let vector: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        index.insert(VideoEmbedding { video_id: id, vector })?;
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::postprocess;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_embedding(id: &str, raw: &[f64]) -> VideoEmbedding {
        VideoEmbedding {
            video_id: id.into(),
            vector: postprocess(raw).unwrap(),
        }
    }

    fn random_embedding(id: &str, dim: usize, rng: &mut ChaCha8Rng) -> VideoEmbedding {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        unit_embedding(id, &raw)
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identical_candidate_ranks_first_with_score_one() {
        let mut index = EmbeddingIndex::new();
        let q = unit_embedding("q", &[1.0, 2.0, 3.0]);
        index
            .insert(VideoEmbedding {
                video_id: "same".into(),
                vector: q.vector.clone(),
            })
            .unwrap();
        // orthogonal in the centered space
        index
            .insert(unit_embedding("other", &[3.0, 1.0, 2.0]))
            .unwrap();
        let ranked = rank(&q.vector, &index, &set(&["same", "other"])).unwrap();
        assert_eq!(ranked[0].0, "same");
        assert!((ranked[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_candidate_scores_zero() {
        // 4 dims: centered orthogonal pairs do not exist in 2
        let mut index = EmbeddingIndex::new();
        let q = unit_embedding("q", &[1.0, 0.0, 1.0, 0.0]);
        index
            .insert(VideoEmbedding {
                video_id: "identical".into(),
                vector: q.vector.clone(),
            })
            .unwrap();
        // (1,1,0,0) centers to (.5,.5,-.5,-.5), orthogonal to q's (.5,-.5,.5,-.5)
        index
            .insert(unit_embedding("orth", &[1.0, 1.0, 0.0, 0.0]))
            .unwrap();
        let ranked = rank(&q.vector, &index, &set(&["identical", "orth"])).unwrap();
        assert_eq!(ranked[0].0, "identical");
        assert!((ranked[0].1 - 1.0).abs() < 1e-9);
        assert_eq!(ranked[1].0, "orth");
        assert!(ranked[1].1.abs() < 1e-9);
    }

    #[test]
    fn rank_matches_full_scan_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut index = EmbeddingIndex::new();
        let q = random_embedding("q", 8, &mut rng);
        let mut ids = BTreeSet::new();
        for i in 0..100 {
            let id = format!("c{i:03}");
            index.insert(random_embedding(&id, 8, &mut rng)).unwrap();
            ids.insert(id);
        }
        let ranked = rank(&q.vector, &index, &ids).unwrap();
        // oracle: score everything, sort by (-score, id)
        let mut oracle: Vec<(String, f64)> = ids
            .iter()
            .map(|id| (id.clone(), dot(&q.vector, index.get(id).unwrap())))
            .collect();
        oracle.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        assert_eq!(ranked, oracle);
    }

    #[test]
    fn missing_candidate_names_the_id() {
        let index = EmbeddingIndex::new();
        let err = rank(&[0.0], &index, &set(&["ghost"])).unwrap_err();
        match err {
            Error::UnknownId(id) => assert_eq!(id, "ghost"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn ap_examples() {
        // all positives first
        let ranked: Vec<String> = ["a", "b", "x", "y"].iter().map(|s| s.to_string()).collect();
        assert_eq!(average_precision(&ranked, &set(&["a", "b"])), 1.0);
        // positives {a,b}, ranking [a, x, b] -> (1/1 + 2/3)/2 = 5/6
        let ranked: Vec<String> = ["a", "x", "b"].iter().map(|s| s.to_string()).collect();
        let ap = average_precision(&ranked, &set(&["a", "b"]));
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        // single positive ranked last of n
        let ranked: Vec<String> = ["x1", "x2", "x3", "p"].iter().map(|s| s.to_string()).collect();
        assert!((average_precision(&ranked, &set(&["p"])) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_order_below_the_last_positive() {
        let positives = set(&["p"]);
        let a: Vec<String> = ["p", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let b: Vec<String> = ["p", "z", "y", "x"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            average_precision(&a, &positives),
            average_precision(&b, &positives)
        );
    }

    #[test]
    fn nested_distractor_sampling() {
        let pool: Vec<String> = (0..50).map(|i| format!("d{i:02}")).collect();
        let small = sample_distractors(&pool, 10, 7);
        let big = sample_distractors(&pool, 25, 7);
        assert_eq!(small.len(), 10);
        assert_eq!(big.len(), 25);
        assert_eq!(&big[..10], &small[..]);
        // same seed, same selection
        assert_eq!(sample_distractors(&pool, 10, 7), small);
        assert_ne!(sample_distractors(&pool, 10, 8), small);
    }

    #[test]
    fn perfect_separation_gives_map_one() {
        let mut index = EmbeddingIndex::new();
        let q = unit_embedding("q", &[1.0, 0.0, 2.0, 0.5]);
        index
            .insert(VideoEmbedding {
                video_id: "pos".into(),
                vector: q.vector.clone(),
            })
            .unwrap();
        index
            .insert(unit_embedding("neg", &[0.0, 2.0, 0.0, 1.0]))
            .unwrap();
        index.insert(q.clone()).unwrap();
        let queries = vec![QueryRelevance {
            query: "q".into(),
            positives: vec!["pos".into()],
            negatives: vec!["neg".into()],
        }];
        let (map, per_query) = evaluate_map(&index, &queries, &[]).unwrap();
        assert_eq!(map, 1.0);
        assert_eq!(per_query["q"], 1.0);
    }

    #[test]
    fn map_matches_independent_ap_oracle_per_query() {
        // independent oracle: precision@k prefix-sum formulation
        fn ap_oracle(ranked: &[String], positives: &BTreeSet<String>) -> f64 {
            let rel: Vec<bool> = ranked.iter().map(|id| positives.contains(id)).collect();
            let mut prefix = 0usize;
            let mut total = 0.0;
            for (k, &is_rel) in rel.iter().enumerate() {
                if is_rel {
                    prefix += 1;
                    let precision_at_k = prefix as f64 / (k + 1) as f64;
                    total += precision_at_k;
                }
            }
            total / positives.len() as f64
        }

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.random_range(3..20);
            let ranked: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
            let mut positives = BTreeSet::new();
            let npos = rng.random_range(1..n);
            while positives.len() < npos.min(3) {
                positives.insert(format!("v{}", rng.random_range(0..n)));
            }
            let got = average_precision(&ranked, &positives);
            let want = ap_oracle(&ranked, &positives);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_store_round_trips_and_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut index = EmbeddingIndex::new();
        for i in 0..7 {
            index
                .insert(random_embedding(&format!("v{i}"), 6, &mut rng))
                .unwrap();
        }
        let path = dir.path().join("e.stre");
        write_embeddings(&path, &index, 0xAB).unwrap();
        let back = read_embeddings(&path, Some(0xAB)).unwrap();
        assert_eq!(back.len(), 7);
        assert_eq!(back.dim(), Some(6));
        for id in index.ids() {
            let a = index.get(id).unwrap();
            let b = back.get(id).unwrap();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= x.abs() * 1e-6 + 1e-12);
            }
        }
        assert!(matches!(
            read_embeddings(&path, Some(0xCD)).unwrap_err(),
            Error::ConfigMismatch { .. }
        ));
    }

    #[test]
    fn index_rejects_contract_violations() {
        let mut index = EmbeddingIndex::new();
        let err = index
            .insert(VideoEmbedding {
                video_id: "bad".into(),
                vector: vec![1.0, 1.0],
            })
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
