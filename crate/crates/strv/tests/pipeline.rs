//! End-to-end pipeline over real files: synthesize a corpus, extract,
//! build graphs, train, embed, evaluate, render attention maps.

mod common;

use strv::attnviz::{render_sequence, AttentionMode};
use strv::config::{derive_seed, BackboneConfig, PipelineConfig};
use strv::gnn::GnnModel;
use strv::manifest::{read_manifest, Split};
use strv::pipeline::{embed_stage, extract_stage, graph_stage, load_graphs};
use strv::retrieval::{
    evaluate_map, read_embeddings, read_relevance, sample_distractors, write_embeddings,
    EvalReport,
};
use strv::synth::{Corpus, CorpusSpec};
use strv::train::{
    fit, pairs_from_relevance, split_validation, FitOptions, LossConfig, TrainData, TrainState,
};
use strv::video::open_video;

fn test_cfg() -> PipelineConfig {
    PipelineConfig {
        backbone: BackboneConfig::MockProj {
            channels: 24,
            seed: 0x5712,
        },
        embed_dim: 24,
        lr: 2e-3,
        max_epochs: 6,
        patience: 6,
        batch_size: 32,
        seed: 7,
        ..PipelineConfig::default()
    }
}

#[test]
fn full_pipeline_over_files() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let cache = dir.path().join("cache");
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();

    let corpus = Corpus::generate(&CorpusSpec {
        seed: 7,
        n_groups: 8,
        n_distractors: 12,
        frames_per_clip: 4,
        distractor_frames: 3,
        ..CorpusSpec::default()
    });
    corpus.materialize(&data_dir).unwrap();
    let cfg = test_cfg();

    // manifest + relevance are on disk in their JSON-lines formats
    let entries = read_manifest(&data_dir.join("manifest.jsonl")).unwrap();
    assert_eq!(entries.len(), 8 * 5 + 12);
    let train_rel = read_relevance(&data_dir.join("train.relevance.jsonl")).unwrap();
    let test_rel = read_relevance(&data_dir.join("test.relevance.jsonl")).unwrap();
    assert!(!train_rel.is_empty() && !test_rel.is_empty());

    // extract + graphs, idempotent on the second pass
    let s = extract_stage(&entries, &data_dir, &cfg, &cache).unwrap();
    assert_eq!((s.written, s.failures.len()), (entries.len(), 0));
    let s2 = extract_stage(&entries, &data_dir, &cfg, &cache).unwrap();
    assert_eq!((s2.written, s2.skipped), (0, entries.len()));
    let g = graph_stage(&entries, &cfg, &cache).unwrap();
    assert_eq!(g.failures.len(), 0);

    // determinism: extraction from the same bytes is byte-identical
    let id0 = &entries[0].id;
    let f_path = strv::ingest::feature_file_path(&cache, &cfg, id0);
    let bytes_before = std::fs::read(&f_path).unwrap();
    std::fs::remove_file(&f_path).unwrap();
    extract_stage(&entries[..1], &data_dir, &cfg, &cache).unwrap();
    assert_eq!(bytes_before, std::fs::read(&f_path).unwrap());

    // train on the train split
    let all_ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let train_ids: Vec<String> = entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.id.clone())
        .collect();
    let graphs = load_graphs(&cache, &cfg, &train_ids).unwrap();
    let (train_records, val_records) = split_validation(&train_rel, cfg.val_ratio, cfg.seed);
    let (pairs, sets) = pairs_from_relevance(&train_records);
    let model = GnnModel::init(
        cfg.operator_kind,
        &[24, cfg.embed_dim],
        cfg.aggregator,
        cfg.sgcn_power,
        derive_seed(cfg.seed, "init", 0),
        cfg.model_hash(),
    );
    let mut state = TrainState::new(model, cfg.seed);
    let data = TrainData {
        graphs: &graphs,
        pairs,
        positive_sets: sets,
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
    assert!(!report.history.is_empty());

    // checkpoint, embed everything, persist the store
    let ck = out.join("model.strw");
    strv::train::save_train_checkpoint(&ck, &state).unwrap();
    let loaded = strv::gnn::load_checkpoint(&ck, Some(cfg.model_hash())).unwrap();
    let (index, degenerate) = embed_stage(&all_ids, &cfg, &cache, &loaded).unwrap();
    assert_eq!(index.len(), all_ids.len());
    assert!(degenerate.len() < all_ids.len() / 4, "too many degenerate embeddings");
    let store = out.join("embeddings.stre");
    write_embeddings(&store, &index, cfg.model_hash()).unwrap();
    let index = read_embeddings(&store, Some(cfg.model_hash())).unwrap();

    // evaluate with seeded distractors and write the report
    let pool: Vec<String> = entries
        .iter()
        .filter(|e| e.split == Split::Distractor)
        .map(|e| e.id.clone())
        .collect();
    let chosen = sample_distractors(&pool, 10, cfg.seed);
    let (map, per_query) = evaluate_map(&index, &test_rel, &chosen).unwrap();
    assert!((0.0..=1.0).contains(&map));
    let report = EvalReport {
        map,
        per_query,
        distractor_count: chosen.len(),
        seed: cfg.seed,
        config_hash: format!("{:016x}", cfg.model_hash()),
    };
    let report_path = out.join("eval.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    let back: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(back.map, map);
    assert_eq!(back.distractor_count, 10);

    // attention rendering writes one PNG per frame plus the sidecar
    let video_id = &entries[0].id;
    let video = open_video(&data_dir.join(&entries[0].path)).unwrap();
    let rendered = render_sequence(
        &out.join("attn"),
        video.as_ref(),
        video_id,
        &cache,
        &cfg,
        Some(&loaded),
        AttentionMode::StarGnn,
    )
    .unwrap();
    assert_eq!(rendered.pngs.len(), 4);
    assert!(rendered.sidecar.is_file());
    for p in &rendered.pngs {
        assert!(p.is_file());
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        assert!(name.starts_with(video_id.as_str()) && name.ends_with("_star_gnn.png"));
    }
    let static_rendered = render_sequence(
        &out.join("attn"),
        video.as_ref(),
        video_id,
        &cache,
        &cfg,
        None,
        AttentionMode::Static,
    )
    .unwrap();
    assert_eq!(static_rendered.pngs.len(), 4);

    // rendering without cached features is a pipeline-order error
    let missing = render_sequence(
        &out.join("attn"),
        video.as_ref(),
        "no-such-video",
        &cache,
        &cfg,
        None,
        AttentionMode::Static,
    );
    assert!(matches!(
        missing.unwrap_err(),
        strv::error::Error::PipelineOrder(_)
    ));
}

/// Same bytes + same config must give byte-identical graph files.
#[test]
fn graph_files_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let corpus = Corpus::generate(&CorpusSpec {
        seed: 11,
        n_groups: 1,
        n_distractors: 0,
        frames_per_clip: 3,
        ..CorpusSpec::default()
    });
    corpus.materialize(&data_dir).unwrap();
    let cfg = test_cfg();
    let entries = read_manifest(&data_dir.join("manifest.jsonl")).unwrap();

    let run = |cache: &std::path::Path| -> Vec<u8> {
        extract_stage(&entries, &data_dir, &cfg, cache).unwrap();
        graph_stage(&entries, &cfg, cache).unwrap();
        std::fs::read(strv::pipeline::graph_file_path(cache, &cfg, &entries[0].id)).unwrap()
    };
    let a = run(&dir.path().join("c1"));
    let b = run(&dir.path().join("c2"));
    assert_eq!(a, b);
}
