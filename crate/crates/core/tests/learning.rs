//! Training behavior, checkpoint round trips, and multi-task contracts on
//! small synthetic corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schedrank::*;

fn registry() -> PrimitiveTypeRegistry {
    PrimitiveTypeRegistry::default()
}

fn feature_cfg() -> FeatureConfig {
    FeatureConfig {
        num_types: registry().len(),
        sequence_length: 8,
        embedding_size: 18,
        positional_encoding: false,
    }
}

struct Corpus {
    store: DatasetStore,
    tt: TokenTable,
    stats: NormalizationStats,
}

fn make_corpus(hardware: &[&str], subgraphs: usize, candidates: usize, seed: u64) -> Corpus {
    let reg = registry();
    let cfg = SynthConfig {
        subgraphs,
        workloads: 4,
        min_primitives: 3,
        max_primitives: 6,
        max_numeric_slots: 2,
        hardware: hardware.iter().map(|h| h.to_string()).collect(),
        correlation: 0.95,
        sigma: 0.0,
        seed,
        ..SynthConfig::default()
    };
    let workload = generate_workload(&cfg, &reg).unwrap();
    let mut records = Vec::new();
    for (i, hw) in hardware.iter().enumerate() {
        records.extend(sample_records(&workload, hw, &reg, candidates, seed + i as u64).unwrap());
    }
    let mut store = DatasetStore::new(records);
    store.split(0.2, &[], seed);
    let feature = feature_cfg();
    let train_seqs: Vec<&PrimitiveSequence> = store
        .records()
        .iter()
        .zip(store.splits())
        .filter(|(_, s)| **s == Split::Train)
        .map(|(r, _)| &r.sequence)
        .collect();
    let tt = build_token_table(train_seqs.iter().copied());
    let mats: Vec<FeatureMatrix> = train_seqs
        .iter()
        .map(|s| extract_features(s, &feature, &tt).unwrap())
        .collect();
    let stats = fit_normalization(mats.iter(), feature.embedding_size);
    Corpus { store, tt, stats }
}

fn groups(corpus: &Corpus, split: Split, hardware: Option<&str>) -> Vec<SampleGroup> {
    build_sample_groups(
        &corpus.store,
        split,
        hardware,
        &feature_cfg(),
        &corpus.tt,
        &corpus.stats,
    )
    .unwrap()
}

fn small_model(corpus: &Corpus, seed: u64) -> CostModel {
    let cfg = ModelConfig {
        hidden_dim: 16,
        attention_heads: 4,
        loss: LossKind::LambdaRank,
        ..ModelConfig::default()
    };
    CostModel::new(
        cfg,
        feature_cfg(),
        registry(),
        corpus.tt.clone(),
        corpus.stats.clone(),
        seed,
    )
    .unwrap()
}

fn quick_train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_groups: 6,
        group_cap: Some(24),
        seed,
        patience: None,
        ..TrainConfig::default()
    }
}

#[test]
fn training_improves_validation_top5() {
    let corpus = make_corpus(&["hw_a"], 20, 30, 3);
    let train = groups(&corpus, Split::Train, None);
    let val = groups(&corpus, Split::Val, None);
    let model = small_model(&corpus, 1);
    let (_, report) = schedrank::train(model, &train, &val, &quick_train_cfg(200, 9)).unwrap();
    let first = report.history.first().unwrap();
    let last = report.history.last().unwrap();
    assert!(
        last.val_top5 > first.val_top5,
        "top5 did not improve: {} -> {}",
        first.val_top5,
        last.val_top5
    );
}

#[test]
fn zero_epochs_returns_model_unchanged() {
    let corpus = make_corpus(&["hw_a"], 6, 10, 4);
    let train = groups(&corpus, Split::Train, None);
    let val = groups(&corpus, Split::Val, None);
    let model = small_model(&corpus, 2);
    let before = model.clone();
    let (after, report) = schedrank::train(model, &train, &val, &quick_train_cfg(0, 9)).unwrap();
    assert_eq!(before, after);
    assert_eq!(report.history.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let corpus = make_corpus(&["hw_a"], 8, 12, 5);
    let train = groups(&corpus, Split::Train, None);
    let val = groups(&corpus, Split::Val, None);
    let cfg = quick_train_cfg(5, 21);
    let (m1, r1) = schedrank::train(small_model(&corpus, 3), &train, &val, &cfg).unwrap();
    let (m2, r2) = schedrank::train(small_model(&corpus, 3), &train, &val, &cfg).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(r1.to_csv(), r2.to_csv());
}

#[test]
fn diverging_loss_reports_numeric_error() {
    let corpus = make_corpus(&["hw_a"], 6, 10, 6);
    let train = groups(&corpus, Split::Train, None);
    let mut model = small_model(&corpus, 2);
    model.config.loss = LossKind::Mse;
    let cfg = TrainConfig {
        learning_rate: 1e18,
        epochs: 50,
        patience: None,
        ..quick_train_cfg(50, 3)
    };
    match schedrank::train(model, &train, &[], &cfg) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("learning rate"), "{msg}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn fine_tune_zero_epochs_keeps_weights() {
    let corpus = make_corpus(&["hw_a"], 6, 10, 7);
    let train = groups(&corpus, Split::Train, None);
    let model = small_model(&corpus, 4);
    let before = model.clone();
    let (after, _) = fine_tune(model, &train, &[], &quick_train_cfg(0, 1)).unwrap();
    assert_eq!(before, after);
}

#[test]
fn fine_tune_rejects_mismatched_features() {
    let corpus = make_corpus(&["hw_a"], 6, 10, 8);
    let model = small_model(&corpus, 4);
    // featurize the same records under a wider embedding
    let wide = FeatureConfig {
        embedding_size: 22,
        ..feature_cfg()
    };
    let wide_groups = build_sample_groups(
        &corpus.store,
        Split::Train,
        None,
        &wide,
        &corpus.tt,
        &NormalizationStats::identity(22),
    )
    .unwrap();
    match fine_tune(model, &wide_groups, &[], &quick_train_cfg(1, 1)) {
        Err(Error::Config(_)) => {}
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn fine_tune_on_target_improves_over_unadapted_checkpoint() {
    let corpus = make_corpus(&["hw_src", "hw_tgt"], 20, 40, 9);
    let src_train = groups(&corpus, Split::Train, Some("hw_src"));
    let src_val = groups(&corpus, Split::Val, Some("hw_src"));
    let tgt_train = groups(&corpus, Split::Train, Some("hw_tgt"));
    let tgt_val = groups(&corpus, Split::Val, Some("hw_tgt"));

    let model = small_model(&corpus, 5);
    let (source_model, _) =
        schedrank::train(model, &src_train, &src_val, &quick_train_cfg(40, 11)).unwrap();
    let unadapted = evaluate_sample_groups(&source_model, &tgt_val, &[5]).unwrap().aggregate[&5];
    let (tuned, _) = fine_tune(
        source_model,
        &tgt_train,
        &tgt_val,
        &quick_train_cfg(40, 12),
    )
    .unwrap();
    let adapted = evaluate_sample_groups(&tuned, &tgt_val, &[5]).unwrap().aggregate[&5];
    assert!(
        adapted > unadapted,
        "fine-tuning did not help: {unadapted} -> {adapted}"
    );
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let corpus = make_corpus(&["hw_a"], 8, 12, 10);
    let train = groups(&corpus, Split::Train, None);
    let val = groups(&corpus, Split::Val, None);
    let (model, _) =
        schedrank::train(small_model(&corpus, 6), &train, &val, &quick_train_cfg(3, 2)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = CostModel::load(dir.path()).unwrap();
    assert_eq!(model, loaded);
    assert_eq!(load_kind(dir.path()).unwrap(), CheckpointKind::Single);

    // scores agree bit-for-bit on random inputs
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let values: Vec<f64> = (0..8 * 18).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let m = FeatureMatrix::from_values(8, 18, values);
        assert_eq!(model.forward(&[&m]).unwrap(), loaded.forward(&[&m]).unwrap());
    }
}

#[test]
fn truncated_weights_are_rejected() {
    let corpus = make_corpus(&["hw_a"], 4, 8, 11);
    let model = small_model(&corpus, 7);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let weights = dir.path().join("weights.bin");
    let bytes = std::fs::read(&weights).unwrap();
    std::fs::write(&weights, &bytes[..bytes.len() - 8]).unwrap();
    match CostModel::load(dir.path()) {
        Err(Error::Corrupt(_)) => {}
        other => panic!("expected corruption error, got {other:?}"),
    }
}

#[test]
fn edited_manifest_fails_digest_check() {
    let corpus = make_corpus(&["hw_a"], 4, 8, 12);
    let model = small_model(&corpus, 8);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let manifest = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let edited = text.replace("\"hidden_dim\": 16", "\"hidden_dim\": 32");
    assert_ne!(text, edited);
    std::fs::write(&manifest, edited).unwrap();
    match CostModel::load(dir.path()) {
        Err(Error::Corrupt(msg)) => assert!(msg.contains("digest"), "{msg}"),
        other => panic!("expected corruption error, got {other:?}"),
    }
}

fn mtl_model(corpus: &Corpus, tasks: &[&str], seed: u64) -> MultiTaskModel {
    let cfg = ModelConfig {
        hidden_dim: 16,
        attention_heads: 4,
        loss: LossKind::Mse,
        ..ModelConfig::default()
    };
    MultiTaskModel::new(
        cfg,
        feature_cfg(),
        registry(),
        corpus.tt.clone(),
        corpus.stats.clone(),
        tasks.iter().map(|t| t.to_string()).collect(),
        seed,
    )
    .unwrap()
}

#[test]
fn mtl_loss_examples() {
    // labels [None, 0.5], preds [0.3, 0.5] -> 0.0
    let labels_task0 = vec![None];
    let labels_task1 = vec![Some(0.5)];
    let (loss, grads) = mtl_loss(
        &[vec![0.3], vec![0.5]],
        &[labels_task0, labels_task1],
        &[LossKind::Mse, LossKind::Mse],
        &[0],
        &[1.0, 1.0],
    )
    .unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads[0], vec![0.0]);

    // labels [1.0, None], preds [0.5, 0.9] -> 0.25
    let (loss, grads) = mtl_loss(
        &[vec![0.5], vec![0.9]],
        &[vec![Some(1.0)], vec![None]],
        &[LossKind::Mse, LossKind::Mse],
        &[0],
        &[1.0, 1.0],
    )
    .unwrap();
    assert!((loss - 0.25).abs() < 1e-15);
    assert_eq!(grads[1], vec![0.0]);

    // all labels absent -> error
    assert!(mtl_loss(
        &[vec![0.5], vec![0.9]],
        &[vec![None], vec![None]],
        &[LossKind::Mse, LossKind::Mse],
        &[0],
        &[1.0, 1.0],
    )
    .is_err());
}

fn mtl_batch(
    corpus: &Corpus,
    tasks: &[String],
) -> (Vec<FeatureMatrix>, Vec<Vec<Option<f64>>>, Vec<usize>) {
    let mtl_groups = build_multi_task_groups(
        &corpus.store,
        tasks,
        Split::Train,
        &feature_cfg(),
        &corpus.tt,
        &corpus.stats,
    )
    .unwrap();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut gids = Vec::new();
    for (gid, group) in mtl_groups.iter().take(4).enumerate() {
        for s in group.samples.iter().take(6) {
            feats.push(s.features.clone());
            labels.push(s.labels.clone());
            gids.push(gid);
        }
    }
    (feats, labels, gids)
}

#[test]
fn heads_without_labels_get_exact_zero_gradients() {
    let corpus = make_corpus(&["hw_a", "hw_b"], 6, 8, 13);
    let tasks = vec!["hw_a".to_string(), "hw_b".to_string()];
    let model = mtl_model(&corpus, &["hw_a", "hw_b"], 9);
    let (feats, mut labels, gids) = mtl_batch(&corpus, &tasks);
    // erase every task-1 label
    for l in &mut labels {
        l[1] = None;
    }
    let refs: Vec<&FeatureMatrix> = feats.iter().collect();
    let (_, _, head_grads, active) =
        mtl_loss_and_grads(&model, &refs, &labels, &gids, LossKind::Mse, &[1.0, 1.0]).unwrap();
    assert!(active[0]);
    assert!(!active[1]);
    for (_, t) in head_grads[1].tensors() {
        assert!(t.data.iter().all(|&v| v == 0.0));
    }
    // and the active head has some nonzero gradient
    assert!(head_grads[0]
        .tensors()
        .iter()
        .any(|(_, t)| t.data.iter().any(|&v| v != 0.0)));
}

#[test]
fn shared_gradients_add_exactly_across_tasks() {
    let corpus = make_corpus(&["hw_a", "hw_b"], 6, 8, 14);
    let tasks = vec!["hw_a".to_string(), "hw_b".to_string()];
    let model = mtl_model(&corpus, &["hw_a", "hw_b"], 10);
    let (feats, labels, gids) = mtl_batch(&corpus, &tasks);
    let refs: Vec<&FeatureMatrix> = feats.iter().collect();

    let (_, mixed_shared, _, _) =
        mtl_loss_and_grads(&model, &refs, &labels, &gids, LossKind::Mse, &[1.0, 1.0]).unwrap();

    // per-task sub-batches computed independently
    let mut folded: Option<Vec<(String, Vec<f64>)>> = None;
    for t in 0..2 {
        let sub: Vec<usize> = (0..feats.len()).filter(|&i| labels[i][t].is_some()).collect();
        if sub.is_empty() {
            continue;
        }
        let sub_feats: Vec<&FeatureMatrix> = sub.iter().map(|&i| &feats[i]).collect();
        let sub_labels: Vec<Vec<Option<f64>>> = sub
            .iter()
            .map(|&i| {
                let mut l = vec![None, None];
                l[t] = labels[i][t];
                l
            })
            .collect();
        let sub_gids: Vec<usize> = sub.iter().map(|&i| gids[i]).collect();
        let (_, gs, _, _) = mtl_loss_and_grads(
            &model,
            &sub_feats,
            &sub_labels,
            &sub_gids,
            LossKind::Mse,
            &[1.0, 1.0],
        )
        .unwrap();
        let tensors: Vec<(String, Vec<f64>)> = gs
            .tensors()
            .into_iter()
            .map(|(n, m)| (n, m.data.clone()))
            .collect();
        folded = Some(match folded {
            None => tensors,
            Some(mut acc) => {
                for ((_, a), (_, b)) in acc.iter_mut().zip(tensors) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
                acc
            }
        });
    }

    let folded = folded.unwrap();
    for ((name, mixed), (_, summed)) in mixed_shared.tensors().into_iter().zip(folded) {
        for (a, b) in mixed.data.iter().zip(summed) {
            assert_eq!(a.to_bits(), b.to_bits(), "tensor {name} differs");
        }
    }
}

#[test]
fn single_active_task_matches_single_task_loss() {
    let corpus = make_corpus(&["hw_a", "hw_b"], 6, 8, 15);
    let tasks = vec!["hw_a".to_string(), "hw_b".to_string()];
    let model = mtl_model(&corpus, &["hw_a", "hw_b"], 11);
    let (feats, mut labels, gids) = mtl_batch(&corpus, &tasks);
    for l in &mut labels {
        l[1] = None;
    }
    let active: Vec<usize> = (0..feats.len()).filter(|&i| labels[i][0].is_some()).collect();
    let refs: Vec<&FeatureMatrix> = feats.iter().collect();
    let (mtl_total, mtl_shared, mtl_heads, _) =
        mtl_loss_and_grads(&model, &refs, &labels, &gids, LossKind::Mse, &[1.0, 1.0]).unwrap();

    let single = model.extract_single_task("hw_a").unwrap();
    let sub_feats: Vec<&FeatureMatrix> = active.iter().map(|&i| &feats[i]).collect();
    let sub_labels: Vec<f64> = active.iter().map(|&i| labels[i][0].unwrap()).collect();
    let sub_gids: Vec<usize> = active.iter().map(|&i| gids[i]).collect();
    let (single_total, single_shared, single_head) = single
        .loss_and_grads(&sub_feats, &sub_labels, &sub_gids, LossKind::Mse)
        .unwrap();

    assert_eq!(mtl_total.to_bits(), single_total.to_bits());
    for ((_, a), (_, b)) in mtl_shared.tensors().into_iter().zip(single_shared.tensors()) {
        assert_eq!(a, b);
    }
    for ((_, a), (_, b)) in mtl_heads[0].tensors().into_iter().zip(single_head.tensors()) {
        assert_eq!(a, b);
    }
}

#[test]
fn extract_single_task_scores_bit_equal() {
    let corpus = make_corpus(&["hw_a", "hw_b"], 6, 8, 16);
    let model = mtl_model(&corpus, &["hw_a", "hw_b"], 12);
    let single = model.extract_single_task("hw_b").unwrap();
    let task = model.task_index("hw_b").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let values: Vec<f64> = (0..8 * 18).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let m = FeatureMatrix::from_values(8, 18, values);
        let a = model.forward_task(task, &[&m]).unwrap();
        let b = single.forward(&[&m]).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }
    assert!(model.extract_single_task("hw_zz").is_err());
}

#[test]
fn mtl_checkpoint_round_trips() {
    let corpus = make_corpus(&["hw_a", "hw_b"], 6, 8, 17);
    let model = mtl_model(&corpus, &["hw_a", "hw_b"], 13);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    assert_eq!(load_kind(dir.path()).unwrap(), CheckpointKind::MultiTask);
    let loaded = MultiTaskModel::load(dir.path()).unwrap();
    assert_eq!(model, loaded);
    // loading a multi-task checkpoint as single-task fails
    assert!(CostModel::load(dir.path()).is_err());

    // extract-then-save round trip stays bit-equal
    let single = model.extract_single_task("hw_a").unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    single.save(dir2.path()).unwrap();
    assert_eq!(CostModel::load(dir2.path()).unwrap(), single);
}

#[test]
fn freeze_shared_trains_only_heads() {
    let corpus = make_corpus(&["hw_a", "hw_b"], 8, 10, 18);
    let tasks = vec!["hw_a".to_string(), "hw_b".to_string()];
    let model = mtl_model(&corpus, &["hw_a", "hw_b"], 14);
    let before = model.clone();
    let mtl_groups = build_multi_task_groups(
        &corpus.store,
        &tasks,
        Split::Train,
        &feature_cfg(),
        &corpus.tt,
        &corpus.stats,
    )
    .unwrap();
    let cfg = quick_train_cfg(2, 31);
    let opts = MtlOptions {
        freeze_shared: true,
        ..MtlOptions::default()
    };
    let (after, _) = train_mtl(model, &mtl_groups, &[vec![], vec![]], &cfg, &opts).unwrap();
    for ((name, a), (_, b)) in before.shared.tensors().into_iter().zip(after.shared.tensors()) {
        assert_eq!(a, b, "shared tensor {name} changed under freeze");
    }
    // heads did change
    let mut any_changed = false;
    for (h_before, h_after) in before.heads.iter().zip(&after.heads) {
        for ((_, a), (_, b)) in h_before.tensors().into_iter().zip(h_after.tensors()) {
            if a != b {
                any_changed = true;
            }
        }
    }
    assert!(any_changed);
}
