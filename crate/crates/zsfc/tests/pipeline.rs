//! End-to-end pipeline over the public API: generate a synthetic world,
//! round-trip it through the on-disk formats, mine a dataset, train a
//! small model, evaluate it, and round-trip the checkpoint.

use zsfc::eval::{bench_rank, evaluate, CfModel, ModelRecommender};
use zsfc::model::checkpoint;
use zsfc::sampler::{
    build_dataset, corpus_end, load_interactions, read_dataset, split_by_time, write_dataset,
    SamplerConfig,
};
use zsfc::synth::{generate_histories, generate_world, write_world, WorldConfig};
use zsfc::training::{train, TrainConfig};
use zsfc::{load_catalog, ModelVariant};

fn world_config() -> WorldConfig {
    WorldConfig {
        n_items: 64,
        n_categories: 8,
        n_users: 300,
        events_per_user: 12,
        days: 10,
        affinity: 0.9,
        feature_dim: 8,
        negative_pairs: 2,
        seed: 11,
    }
}

#[test]
fn synthetic_world_to_trained_checkpoint() {
    let world_cfg = world_config();
    let world = generate_world(&world_cfg).unwrap();
    let histories = generate_histories(&world, &world_cfg);

    // On-disk round trip: what the files say is what the loaders see.
    let dir = tempfile::tempdir().unwrap();
    write_world(&world, &histories, dir.path()).unwrap();
    let catalog = load_catalog(
        &dir.path().join(zsfc::synth::CATALOG_FILE),
        &dir.path().join(zsfc::synth::HIERARCHY_FILE),
        &dir.path().join(zsfc::synth::NEGATIVE_PAIRS_FILE),
    )
    .unwrap();
    let loaded = load_interactions(&dir.path().join(zsfc::synth::INTERACTIONS_FILE), &catalog)
        .unwrap();
    assert_eq!(catalog.len(), world_cfg.n_items);
    assert_eq!(loaded, histories);

    // Mine and split. The synthetic world guarantees the last calendar
    // day holds real traffic, so both halves are non-empty.
    let (examples, matrix) = build_dataset(&loaded, &catalog, &SamplerConfig::default());
    assert!(!examples.is_empty());
    let end = corpus_end(&loaded).unwrap();
    let (train_set, test_set) = split_by_time(examples.clone(), end);
    assert!(!train_set.is_empty());
    assert!(!test_set.is_empty());
    assert_eq!(train_set.len() + test_set.len(), examples.len());

    // The JSONL dataset round-trips exactly.
    let dataset_path = dir.path().join("train.jsonl");
    write_dataset(&dataset_path, &train_set).unwrap();
    assert_eq!(read_dataset(&dataset_path).unwrap(), train_set);

    let train_cfg = TrainConfig {
        variant: ModelVariant::StampPlusOrders,
        dim: 8,
        epochs: 2,
        batch_size: 32,
        negatives: 16,
        learning_rate: 1e-3,
        seed: 5,
    };
    let mut losses = Vec::new();
    let params = train::<f32>(&train_set, &catalog, &train_cfg, |stats| {
        losses.push(stats.mean_loss);
    })
    .unwrap();
    assert_eq!(losses.len(), train_cfg.epochs);
    assert!(losses.iter().all(|l| l.is_finite()));

    // Training twice from the same inputs gives bit-identical parameters.
    let again = train::<f32>(&train_set, &catalog, &train_cfg, |_| {}).unwrap();
    for (a, b) in params.tensors().iter().zip(again.tensors()) {
        assert_eq!(a.2, b.2, "{} differs between identical runs", a.0);
    }

    // Evaluate the model and the co-occurrence baseline on held-out data.
    let recommender = ModelRecommender::new(&params, &catalog).unwrap();
    let report = evaluate(&recommender, &test_set, 5).unwrap();
    assert_eq!(report.n_total, test_set.len());
    assert!((0.0..=1.0).contains(&report.recall_at_k));
    let cf = CfModel::new(&catalog, &matrix).unwrap();
    let cf_report = evaluate(&cf, &test_set, 5).unwrap();
    assert!((0.0..=1.0).contains(&cf_report.recall_at_k));

    // Checkpoint round trip: loaded parameters serve identical rankings.
    let ckpt_path = dir.path().join("model.ckpt");
    checkpoint::save(&params, &ckpt_path).unwrap();
    let restored = checkpoint::load(&ckpt_path).unwrap();
    assert_eq!(checkpoint::to_bytes(&params), checkpoint::to_bytes(&restored));
    let restored_recommender = ModelRecommender::new(&restored, &catalog).unwrap();
    for request in test_set.iter().take(10) {
        assert_eq!(
            recommender.rank(request, 5, true).unwrap(),
            restored_recommender.rank(request, 5, true).unwrap()
        );
    }

    // The benchmark's audit trail matches its own rankings.
    let run = bench_rank(&params, &catalog, &test_set[..test_set.len().min(20)], 5).unwrap();
    assert_eq!(run.results.len(), run.contexts.len());
    assert!(run.report.p99_ms >= run.report.p50_ms);
}
