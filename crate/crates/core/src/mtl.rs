//! Multi-task model: one shared backbone, one scoring head per hardware
//! platform, and a masked loss that skips absent labels entirely.
//!
//! Gradient bookkeeping is per task: each task's labeled sub-batch runs its
//! own forward/backward pass and the shared gradient is folded in task order.
//! Heads with no labeled samples in a batch receive exactly zero gradient
//! and their optimizer state does not advance.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{DatasetStore, SampleGroup, Split};
use crate::error::{Error, Result};
use crate::featurize::{
    apply_normalization, extract_features, FeatureConfig, FeatureMatrix, NormalizationStats,
    TokenTable,
};
use crate::model::{
    backward, forward, lambda_rank_loss, mse_loss, Batch, CostModel, HeadParams, LossKind,
    ModelConfig, SharedParams, TrainConfig,
};
use crate::primitive::PrimitiveTypeRegistry;

/// Shared backbone plus one head per task; task 0 is the target platform.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    pub config: ModelConfig,
    pub feature: FeatureConfig,
    pub registry: PrimitiveTypeRegistry,
    pub token_table: TokenTable,
    pub normalization: NormalizationStats,
    pub shared: SharedParams,
    pub heads: Vec<HeadParams>,
    pub task_ids: Vec<String>,
}

impl MultiTaskModel {
    pub fn new(
        config: ModelConfig,
        feature: FeatureConfig,
        registry: PrimitiveTypeRegistry,
        token_table: TokenTable,
        normalization: NormalizationStats,
        task_ids: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        feature.validate()?;
        if task_ids.len() < 2 {
            return Err(Error::Config("multi-task model needs >= 2 tasks".into()));
        }
        let mut unique = task_ids.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != task_ids.len() {
            return Err(Error::Config("task ids must be unique".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shared = SharedParams::zeros(&config, &feature);
        crate::model::init_shared(&mut shared, &config, &mut rng);
        let heads = (0..task_ids.len())
            .map(|_| {
                let mut head = HeadParams::zeros(&config);
                crate::model::init_head(&mut head, &mut rng);
                head
            })
            .collect();
        Ok(Self {
            config,
            feature,
            registry,
            token_table,
            normalization,
            shared,
            heads,
            task_ids,
        })
    }

    pub fn task_index(&self, task_id: &str) -> Option<usize> {
        self.task_ids.iter().position(|t| t == task_id)
    }

    /// Scores inputs with the shared backbone and the given task's head.
    pub fn forward_task(&self, task: usize, feats: &[&FeatureMatrix]) -> Result<Vec<f64>> {
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::Validation(format!("unknown task index {task}")))?;
        let batch = Batch::new(feats, &self.feature, &self.config)?;
        Ok(forward(&self.shared, head, &self.config, &batch).scores)
    }

    /// Assembles the shared backbone and one head into a standard
    /// single-task model; its forward equals `forward_task` bit-for-bit.
    pub fn extract_single_task(&self, task_id: &str) -> Result<CostModel> {
        let task = self
            .task_index(task_id)
            .ok_or_else(|| Error::Validation(format!("unknown task `{task_id}`")))?;
        Ok(CostModel {
            config: self.config.clone(),
            feature: self.feature.clone(),
            registry: self.registry.clone(),
            token_table: self.token_table.clone(),
            normalization: self.normalization.clone(),
            shared: self.shared.clone(),
            head: self.heads[task].clone(),
        })
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        crate::model::checkpoint::save_multi(self, dir.as_ref())
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        crate::model::checkpoint::load_multi(dir.as_ref())
    }
}

/// One sample with per-task optional labels (and the matching latencies,
/// kept for evaluation).
#[derive(Debug, Clone)]
pub struct MultiTaskSample {
    pub features: FeatureMatrix,
    pub labels: Vec<Option<f64>>,
    pub latencies: Vec<Option<f64>>,
}

/// All multi-task samples of one subgraph.
#[derive(Debug, Clone)]
pub struct MultiTaskGroup {
    pub workload: String,
    pub subgraph_id: String,
    pub samples: Vec<MultiTaskSample>,
}

/// Joins one store's records into multi-task groups: samples are keyed by
/// `(subgraph, sequence digest)` and collect one optional label per task.
/// Duplicate measurements of a sequence keep the best (maximum) label.
pub fn build_multi_task_groups(
    store: &DatasetStore,
    task_ids: &[String],
    split: Split,
    cfg: &FeatureConfig,
    tt: &TokenTable,
    stats: &NormalizationStats,
) -> Result<Vec<MultiTaskGroup>> {
    let labels = store.compute_labels();
    let task_of: BTreeMap<&str, usize> = task_ids
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    // (subgraph, digest) -> (workload, features, labels, latencies)
    let mut samples: BTreeMap<(String, [u8; 32]), (String, FeatureMatrix, Vec<Option<f64>>, Vec<Option<f64>>)> =
        BTreeMap::new();
    for (i, r) in store.records().iter().enumerate() {
        if store.splits()[i] != split {
            continue;
        }
        let Some(&task) = task_of.get(r.hardware_id.as_str()) else {
            continue;
        };
        let m = extract_features(&r.sequence, cfg, tt)?;
        let key = (r.subgraph_id.clone(), m.digest());
        let entry = samples.entry(key).or_insert_with(|| {
            (
                r.workload.clone(),
                // normalization applied lazily below; store raw for now
                m.clone(),
                vec![None; task_ids.len()],
                vec![None; task_ids.len()],
            )
        });
        let better = match entry.2[task] {
            Some(existing) => labels[i] > existing,
            None => true,
        };
        if better {
            entry.2[task] = Some(labels[i]);
            entry.3[task] = Some(r.latency);
        }
    }

    let mut groups: BTreeMap<String, MultiTaskGroup> = BTreeMap::new();
    for ((subgraph, _), (workload, feats, lbls, lats)) in samples {
        let normalized = apply_normalization(&feats, stats)?;
        groups
            .entry(subgraph.clone())
            .or_insert_with(|| MultiTaskGroup {
                workload,
                subgraph_id: subgraph,
                samples: Vec::new(),
            })
            .samples
            .push(MultiTaskSample {
                features: normalized,
                labels: lbls,
                latencies: lats,
            });
    }
    Ok(groups.into_values().collect())
}

/// Masked multi-task loss over precomputed per-task predictions
/// (task-major). Tasks contribute `weight * loss_kind(preds, labels)` over
/// the samples where their label is present; absent labels contribute zero
/// loss and zero gradient.
pub fn mtl_loss(
    preds: &[Vec<f64>],
    labels: &[Vec<Option<f64>>],
    kinds: &[LossKind],
    group_ids: &[usize],
    weights: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tasks = preds.len();
    if labels.len() != tasks || kinds.len() != tasks || weights.len() != tasks {
        return Err(Error::Validation(
            "mtl loss inputs must align on the task axis".into(),
        ));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(tasks);
    let mut any_active = false;
    for t in 0..tasks {
        let n = preds[t].len();
        if labels[t].len() != n || group_ids.len() != n {
            return Err(Error::Validation(
                "mtl loss inputs must align on the sample axis".into(),
            ));
        }
        let active: Vec<usize> = (0..n).filter(|&i| labels[t][i].is_some()).collect();
        let mut grad_t = vec![0.0; n];
        if !active.is_empty() {
            any_active = true;
            let scores: Vec<f64> = active.iter().map(|&i| preds[t][i]).collect();
            let lbls: Vec<f64> = active.iter().map(|&i| labels[t][i].unwrap()).collect();
            let gids: Vec<usize> = active.iter().map(|&i| group_ids[i]).collect();
            let (loss, grad) = match kinds[t] {
                LossKind::Mse => mse_loss(&scores, &lbls)?,
                LossKind::LambdaRank => lambda_rank_loss(&scores, &lbls, &gids)?,
            };
            total += weights[t] * loss;
            for (pos, &i) in active.iter().enumerate() {
                grad_t[i] = weights[t] * grad[pos];
            }
        }
        grads.push(grad_t);
    }
    if !any_active {
        return Err(Error::Validation(
            "every label in the batch is absent".into(),
        ));
    }
    Ok((total, grads))
}

/// Loss and gradients for one multi-task batch. Each task forwards only its
/// labeled sub-batch; the shared gradient is the fold of per-task shared
/// gradients in task order, so it equals the sum of independently computed
/// sub-batch gradients bit-for-bit. Heads without labels get exact zeros.
pub fn mtl_loss_and_grads(
    model: &MultiTaskModel,
    feats: &[&FeatureMatrix],
    labels: &[Vec<Option<f64>>],
    group_ids: &[usize],
    kind: LossKind,
    task_weights: &[f64],
) -> Result<(f64, SharedParams, Vec<HeadParams>, Vec<bool>)> {
    let tasks = model.task_ids.len();
    if task_weights.len() != tasks {
        return Err(Error::Validation("task weight vector length mismatch".into()));
    }
    let mut total = 0.0;
    let mut shared_grad: Option<SharedParams> = None;
    let mut head_grads: Vec<HeadParams> = model
        .heads
        .iter()
        .map(|h| {
            let mut g = h.clone();
            for (_, t) in g.tensors_mut() {
                t.data.fill(0.0);
            }
            g
        })
        .collect();
    let mut active_tasks = vec![false; tasks];
    let mut any = false;

    for t in 0..tasks {
        let active: Vec<usize> = (0..feats.len())
            .filter(|&i| labels[i][t].is_some())
            .collect();
        if active.is_empty() {
            continue;
        }
        any = true;
        active_tasks[t] = true;
        let sub_feats: Vec<&FeatureMatrix> = active.iter().map(|&i| feats[i]).collect();
        let sub_labels: Vec<f64> = active.iter().map(|&i| labels[i][t].unwrap()).collect();
        let sub_gids: Vec<usize> = active.iter().map(|&i| group_ids[i]).collect();

        let batch = Batch::new(&sub_feats, &model.feature, &model.config)?;
        let trace = forward(&model.shared, &model.heads[t], &model.config, &batch);
        let (loss, mut dscores) = match kind {
            LossKind::Mse => mse_loss(&trace.scores, &sub_labels)?,
            LossKind::LambdaRank => lambda_rank_loss(&trace.scores, &sub_labels, &sub_gids)?,
        };
        total += task_weights[t] * loss;
        for d in &mut dscores {
            *d *= task_weights[t];
        }
        let (gs, gh) = backward(
            &model.shared,
            &model.heads[t],
            &model.config,
            &batch,
            &trace,
            &dscores,
        );
        head_grads[t] = gh;
        match &mut shared_grad {
            None => shared_grad = Some(gs),
            Some(acc) => {
                for ((_, a), (_, g)) in acc.tensors_mut().into_iter().zip(gs.tensors()) {
                    a.add_assign(g);
                }
            }
        }
    }

    if !any {
        return Err(Error::Validation(
            "every label in the batch is absent".into(),
        ));
    }
    let shared_grad = shared_grad.unwrap_or_else(|| {
        let mut g = model.shared.clone();
        for (_, t) in g.tensors_mut() {
            t.data.fill(0.0);
        }
        g
    });
    Ok((total, shared_grad, head_grads, active_tasks))
}

#[derive(Debug, Clone, Default)]
pub struct MtlOptions {
    /// Per-task loss weights; defaults to 1 for every task.
    pub task_weights: Option<Vec<f64>>,
    /// Skip shared-parameter updates (train heads only).
    pub freeze_shared: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MtlEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// `(top1, top5)` per task, NaN when a task has no validation data.
    pub per_task: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MtlReport {
    pub history: Vec<MtlEpochStats>,
    pub best_epoch: usize,
}

impl MtlReport {
    pub fn to_csv(&self, task_ids: &[String]) -> String {
        let mut out = String::from("epoch,train_loss");
        for id in task_ids {
            out.push_str(&format!(",{id}_top1,{id}_top5"));
        }
        out.push('\n');
        for row in &self.history {
            out.push_str(&format!("{},{}", row.epoch, row.train_loss));
            for (t1, t5) in &row.per_task {
                out.push_str(&format!(",{t1},{t5}"));
            }
            out.push('\n');
        }
        out
    }
}

fn group_has_target(group: &MultiTaskGroup) -> bool {
    group.samples.iter().any(|s| s.labels[0].is_some())
}

fn per_task_val_metrics(
    model: &MultiTaskModel,
    val_groups: &[Vec<SampleGroup>],
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(model.task_ids.len());
    for (t, groups) in val_groups.iter().enumerate() {
        if groups.is_empty() {
            out.push((f64::NAN, f64::NAN));
            continue;
        }
        let single = CostModel {
            config: model.config.clone(),
            feature: model.feature.clone(),
            registry: model.registry.clone(),
            token_table: model.token_table.clone(),
            normalization: model.normalization.clone(),
            shared: model.shared.clone(),
            head: model.heads[t].clone(),
        };
        let report = crate::eval::evaluate_sample_groups(&single, groups, &[1, 5])?;
        out.push((
            *report.aggregate.get(&1).unwrap_or(&f64::NAN),
            *report.aggregate.get(&5).unwrap_or(&f64::NAN),
        ));
    }
    Ok(out)
}

/// Joint training over mixed-task batches. Batches are dealt so that every
/// batch contains at least one target-labeled group while supply lasts.
/// Returns the checkpoint with the best target-task validation top-5 and the
/// per-task history.
pub fn train_mtl(
    model: MultiTaskModel,
    train_groups: &[MultiTaskGroup],
    val_groups: &[Vec<SampleGroup>],
    cfg: &TrainConfig,
    opts: &MtlOptions,
) -> Result<(MultiTaskModel, MtlReport)> {
    cfg.validate()?;
    let tasks = model.task_ids.len();
    if val_groups.len() != tasks {
        return Err(Error::Validation(
            "one validation group list per task is required (may be empty)".into(),
        ));
    }
    let weights = match &opts.task_weights {
        Some(w) => {
            if w.len() != tasks {
                return Err(Error::Config("task weight vector length mismatch".into()));
            }
            w.clone()
        }
        None => vec![1.0; tasks],
    };
    let mut model = model;

    let shared_shapes: Vec<(usize, usize)> = model
        .shared
        .tensors()
        .iter()
        .map(|(_, t)| (t.rows, t.cols))
        .collect();
    let head_shapes: Vec<(usize, usize)> = model.heads[0]
        .tensors()
        .iter()
        .map(|(_, t)| (t.rows, t.cols))
        .collect();
    let mut adam_shared = crate::model::Adam::new(cfg, &shared_shapes);
    let mut adam_heads: Vec<crate::model::Adam> = (0..tasks)
        .map(|_| crate::model::Adam::new(cfg, &head_shapes))
        .collect();

    let initial = per_task_val_metrics(&model, val_groups)?;
    let mut best_top5 = initial[0].1;
    let mut history = vec![MtlEpochStats {
        epoch: 0,
        train_loss: f64::NAN,
        per_task: initial,
    }];
    let mut best_model = model.clone();
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 1..=cfg.epochs {
        // deal target-labeled groups across batches first, then fill
        let mut target_idx: Vec<usize> = (0..train_groups.len())
            .filter(|&i| group_has_target(&train_groups[i]))
            .collect();
        let mut other_idx: Vec<usize> = (0..train_groups.len())
            .filter(|&i| !group_has_target(&train_groups[i]))
            .collect();
        target_idx.shuffle(&mut rng);
        other_idx.shuffle(&mut rng);
        let n_batches = train_groups.len().div_ceil(cfg.batch_groups);
        let mut batches: Vec<Vec<usize>> = vec![Vec::new(); n_batches];
        let mut rest = Vec::new();
        for (i, gi) in target_idx.into_iter().enumerate() {
            if i < n_batches {
                batches[i].push(gi);
            } else {
                rest.push(gi);
            }
        }
        rest.extend(other_idx);
        rest.shuffle(&mut rng);
        let mut bi = 0;
        for gi in rest {
            while batches[bi].len() >= cfg.batch_groups {
                bi = (bi + 1) % n_batches;
            }
            batches[bi].push(gi);
        }

        let mut loss_sum = 0.0;
        let mut n_steps = 0usize;
        for chosen in &batches {
            if chosen.is_empty() {
                continue;
            }
            let mut feats: Vec<&FeatureMatrix> = Vec::new();
            let mut labels: Vec<Vec<Option<f64>>> = Vec::new();
            let mut gids: Vec<usize> = Vec::new();
            for (gid, &gi) in chosen.iter().enumerate() {
                let group = &train_groups[gi];
                let mut idx: Vec<usize> = (0..group.samples.len()).collect();
                if let Some(cap) = cfg.group_cap {
                    if idx.len() > cap {
                        // target-task labels are the scarce resource: keep
                        // them all (up to the cap) before drawing the rest
                        let mut with_target: Vec<usize> = idx
                            .iter()
                            .copied()
                            .filter(|&i| group.samples[i].labels[0].is_some())
                            .collect();
                        let mut rest: Vec<usize> = idx
                            .iter()
                            .copied()
                            .filter(|&i| group.samples[i].labels[0].is_none())
                            .collect();
                        with_target.shuffle(&mut rng);
                        rest.shuffle(&mut rng);
                        with_target.truncate(cap);
                        let fill = cap - with_target.len();
                        rest.truncate(fill);
                        idx = with_target;
                        idx.extend(rest);
                        idx.sort_unstable();
                    }
                }
                for i in idx {
                    let s = &group.samples[i];
                    feats.push(&s.features);
                    labels.push(s.labels.clone());
                    gids.push(gid);
                }
            }
            if feats.is_empty() {
                continue;
            }
            let (loss, gs, ghs, active) = mtl_loss_and_grads(
                &model,
                &feats,
                &labels,
                &gids,
                model.config.loss,
                &weights,
            )?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {epoch}; try a lower learning rate"
                )));
            }
            if !opts.freeze_shared {
                let grads = gs.tensors();
                adam_shared.step(model.shared.tensors_mut(), &grads);
            }
            for t in 0..tasks {
                if active[t] {
                    let grads = ghs[t].tensors();
                    adam_heads[t].step(model.heads[t].tensors_mut(), &grads);
                }
            }
            loss_sum += loss;
            n_steps += 1;
        }

        let per_task = per_task_val_metrics(&model, val_groups)?;
        let target_top5 = per_task[0].1;
        history.push(MtlEpochStats {
            epoch,
            train_loss: if n_steps > 0 {
                loss_sum / n_steps as f64
            } else {
                f64::NAN
            },
            per_task,
        });

        if !val_groups[0].is_empty() {
            if best_top5.is_nan() || target_top5 > best_top5 {
                best_top5 = target_top5;
                best_model = model.clone();
                best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if let Some(patience) = cfg.patience {
                    if stale > patience {
                        break;
                    }
                }
            }
        } else {
            best_model = model.clone();
            best_epoch = epoch;
        }
    }

    Ok((
        best_model,
        MtlReport {
            history,
            best_epoch,
        },
    ))
}
