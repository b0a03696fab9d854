//! Shared fixtures for the integration and acceptance suites.
#![allow(dead_code)] // each test binary uses a different subset
//!
//! The ablation fixture is expensive (synthetic corpus, feature
//! extraction, three training runs), so it is built once per test binary
//! behind `OnceLock` accessors and shared by every criterion.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use strv::config::{derive_seed, BackboneConfig, PipelineConfig};
use strv::gnn::{embed_video_with_fallback, static_embedding, GnnModel};
use strv::graph::{build_graph, VideoGraph};
use strv::ingest::{extract_video, regions_from_maps, Backbone, FeatureMap, RegionNode};
use strv::manifest::Split;
use strv::retrieval::{evaluate_map, EmbeddingIndex, QueryRelevance};
use strv::synth::{Corpus, CorpusSpec};
use strv::train::{
    fit, pairs_from_relevance, split_validation, FitOptions, LossConfig, TrainData, TrainState,
};

pub const FEATURE_DIM: usize = 64;

/// The pinned configuration of the ablation fixture.
pub fn fixture_config() -> PipelineConfig {
    PipelineConfig {
        backbone: BackboneConfig::MockProj {
            channels: FEATURE_DIM,
            seed: 0x5712,
        },
        embed_dim: FEATURE_DIM,
        lr: 2e-3,
        max_epochs: 60,
        patience: 20,
        batch_size: 128,
        seed: 42,
        ..PipelineConfig::default()
    }
}

pub struct AblationFixture {
    pub corpus: Corpus,
    /// Per-clip backbone feature maps, shared by every graph arm.
    pub features: BTreeMap<String, Vec<FeatureMap>>,
    pub train_relevance: Vec<QueryRelevance>,
    pub test_relevance: Vec<QueryRelevance>,
    pub distractor_pool: Vec<String>,
}

fn extract_corpus_features(
    corpus: &Corpus,
    cfg: &PipelineConfig,
) -> BTreeMap<String, Vec<FeatureMap>> {
    let backbone = Backbone::from_config(&cfg.backbone).unwrap();
    let clips: Vec<_> = corpus.clips.iter().collect();
    let extracted: Vec<Vec<FeatureMap>> = {
        use std::sync::Mutex;
        let out = Mutex::new((0..clips.len()).map(|_| None).collect::<Vec<_>>());
        let threads = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        std::thread::scope(|scope| {
            for t in 0..threads {
                let out = &out;
                let clips = &clips;
                let backbone = &backbone;
                scope.spawn(move || {
                    for i in (t..clips.len()).step_by(threads) {
                        let maps = extract_video(
                            clips[i].source.as_video(),
                            backbone,
                            cfg.rate_hz,
                            cfg.max_frames,
                        )
                        .unwrap();
                        out.lock().unwrap()[i] = Some(maps);
                    }
                });
            }
        });
        out.into_inner()
            .unwrap()
            .into_iter()
            .map(|m| m.unwrap())
            .collect()
    };
    clips
        .iter()
        .map(|c| c.id.clone())
        .zip(extracted)
        .collect()
}

pub fn ablation_fixture() -> &'static AblationFixture {
    static FIXTURE: OnceLock<AblationFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let spec = CorpusSpec {
            seed: 42,
            n_groups: 50,
            n_distractors: 1000,
            frames_per_clip: 6,
            distractor_frames: 4,
            ..CorpusSpec::default()
        };
        let corpus = Corpus::generate(&spec);
        let cfg = fixture_config();
        let features = extract_corpus_features(&corpus, &cfg);
        let train_relevance = corpus.relevance(Split::Train);
        let test_relevance = corpus.relevance(Split::Test);
        let distractor_pool = corpus.ids_in_split(Split::Distractor);
        AblationFixture {
            corpus,
            features,
            train_relevance,
            test_relevance,
            distractor_pool,
        }
    })
}

/// Graphs for `ids` under an arbitrary scale/weighting config, built from
/// the shared feature maps.
pub fn graphs_for(
    fixture: &AblationFixture,
    cfg: &PipelineConfig,
    ids: &[String],
) -> BTreeMap<String, VideoGraph> {
    let built: Vec<VideoGraph> = {
        use std::sync::Mutex;
        let out = Mutex::new((0..ids.len()).map(|_| None).collect::<Vec<_>>());
        let threads = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1);
        std::thread::scope(|scope| {
            for t in 0..threads {
                let out = &out;
                scope.spawn(move || {
                    for i in (t..ids.len()).step_by(threads) {
                        let maps = &fixture.features[&ids[i]];
                        let regions = regions_from_maps(maps, &cfg.scales).unwrap();
                        let g =
                            build_graph(&ids[i], &regions, cfg.weighted, cfg.dense_threshold)
                                .unwrap();
                        out.lock().unwrap()[i] = Some(g);
                    }
                });
            }
        });
        out.into_inner()
            .unwrap()
            .into_iter()
            .map(|g| g.unwrap())
            .collect()
    };
    ids.iter().cloned().zip(built).collect()
}

pub fn labeled_ids(fixture: &AblationFixture) -> Vec<String> {
    let mut ids = fixture.corpus.ids_in_split(Split::Train);
    ids.extend(fixture.corpus.ids_in_split(Split::Test));
    ids
}

/// A fully trained arm of the ablation: config, graphs, model.
pub struct TrainedArm {
    pub cfg: PipelineConfig,
    pub graphs: BTreeMap<String, VideoGraph>,
    pub model: GnnModel,
    pub init_model: GnnModel,
}

pub fn train_arm(fixture: &AblationFixture, cfg: PipelineConfig) -> TrainedArm {
    let graphs = graphs_for(fixture, &cfg, &labeled_ids(fixture));
    let (train_records, val_records) =
        split_validation(&fixture.train_relevance, cfg.val_ratio, cfg.seed);
    let (pairs, positive_sets) = pairs_from_relevance(&train_records);
    let init_model = GnnModel::init(
        cfg.operator_kind,
        &[FEATURE_DIM, cfg.embed_dim],
        cfg.aggregator,
        cfg.sgcn_power,
        derive_seed(cfg.seed, "init", 0),
        cfg.model_hash(),
    );
    let mut state = TrainState::new(init_model.clone(), cfg.seed);
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
        |_| {},
    )
    .unwrap();
    TrainedArm {
        cfg,
        graphs,
        model: report.best_model,
        init_model,
    }
}

/// The main trained arm: multi-scale, weighted.
pub fn main_arm() -> &'static TrainedArm {
    static ARM: OnceLock<TrainedArm> = OnceLock::new();
    ARM.get_or_init(|| train_arm(ablation_fixture(), fixture_config()))
}

/// Test-split mAP of a model (or of the static baseline when `model` is
/// `None`) over the given graphs, with optional distractors in the pool.
pub fn test_map(
    fixture: &AblationFixture,
    graphs: &BTreeMap<String, VideoGraph>,
    model: Option<&GnnModel>,
    distractors: &[String],
) -> (f64, usize) {
    let mut index = EmbeddingIndex::new();
    let mut ids: std::collections::BTreeSet<String> = Default::default();
    for q in &fixture.test_relevance {
        ids.insert(q.query.clone());
        ids.extend(q.positives.iter().cloned());
        ids.extend(q.negatives.iter().cloned());
    }
    ids.extend(distractors.iter().cloned());
    let mut degenerate = 0;
    for id in &ids {
        let g = &graphs[id];
        let (e, fell_back) = match model {
            Some(m) => embed_video_with_fallback(g, m).unwrap(),
            None => static_embedding(g).unwrap(),
        };
        if fell_back {
            degenerate += 1;
        }
        index.insert(e).unwrap();
    }
    let (map, _) = evaluate_map(&index, &fixture.test_relevance, distractors).unwrap();
    (map, degenerate)
}

/// Random region nodes in the default 14-per-frame layout, for the
/// combinatorial and spectral criteria.
pub fn random_regions(seed: u64, frames: usize, dim: usize) -> Vec<RegionNode> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
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
