//! Adam optimizer and the single-task training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SampleGroup;
use crate::error::{Error, Result};
use crate::featurize::FeatureMatrix;
use crate::linalg::Matrix;

use super::CostModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Subgraph groups per batch.
    pub batch_groups: usize,
    /// Cap on candidates drawn from one group per batch (resampled every
    /// epoch); `None` uses every candidate.
    pub group_cap: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    /// Early-stop patience on validation top-5; `None` disables early stop.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_groups: 16,
            group_cap: None,
            epochs: 50,
            seed: 0,
            patience: Some(10),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_groups == 0 {
            return Err(Error::Config("batch_groups must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer over an ordered tensor list. After every step
/// parameters are re-quantized to f32-representable values.
pub(crate) struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<(String, &mut Matrix)>, grads: &[(String, &Matrix)]) {
        self.t += 1;
        let bc1 = 1.0 - self.b1.powi(self.t as i32);
        let bc2 = 1.0 - self.b2.powi(self.t as i32);
        for (ti, ((pname, p), (gname, g))) in params.into_iter().zip(grads).enumerate() {
            debug_assert_eq!(&pname, gname, "tensor order mismatch");
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..p.data.len() {
                let grad = g.data[i];
                m.data[i] = self.b1 * m.data[i] + (1.0 - self.b1) * grad;
                v.data[i] = self.b2 * v.data[i] + (1.0 - self.b2) * grad * grad;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let next = p.data[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
                p.data[i] = next as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainReport {
    /// `epoch,train_loss,val_top1,val_top5` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_top1,val_top5\n");
        for row in &self.history {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.epoch, row.train_loss, row.val_top1, row.val_top5
            ));
        }
        out
    }
}

/// One batch assembled from sampled groups.
struct BatchPlan<'a> {
    feats: Vec<&'a FeatureMatrix>,
    labels: Vec<f64>,
    group_ids: Vec<usize>,
}

fn plan_batch<'a>(
    groups: &'a [SampleGroup],
    chosen: &[usize],
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> BatchPlan<'a> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut group_ids = Vec::new();
    for (gid, &gi) in chosen.iter().enumerate() {
        let group = &groups[gi];
        let mut idx: Vec<usize> = (0..group.samples.len()).collect();
        if let Some(cap) = cap {
            if group.samples.len() > cap {
                idx.shuffle(rng);
                idx.truncate(cap);
                idx.sort_unstable();
            }
        }
        for i in idx {
            let s = &group.samples[i];
            feats.push(&s.features);
            labels.push(s.label);
            group_ids.push(gid);
        }
    }
    BatchPlan {
        feats,
        labels,
        group_ids,
    }
}

fn check_featurization(model: &CostModel, groups: &[SampleGroup]) -> Result<()> {
    for g in groups {
        if let Some(s) = g.samples.first() {
            if s.features.cols() != model.feature.embedding_size {
                return Err(Error::Config(format!(
                    "sample embedding size {} does not match model embedding size {}",
                    s.features.cols(),
                    model.feature.embedding_size
                )));
            }
            if s.features.config_digest != 0
                && s.features.config_digest != model.feature.digest()
            {
                return Err(Error::Config(
                    "samples were featurized under a different feature config".into(),
                ));
            }
            return Ok(());
        }
    }
    Ok(())
}

fn val_metrics(model: &CostModel, val_groups: &[SampleGroup]) -> Result<(f64, f64)> {
    if val_groups.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let report = crate::eval::evaluate_sample_groups(model, val_groups, &[1, 5])?;
    Ok((
        *report.aggregate.get(&1).unwrap_or(&f64::NAN),
        *report.aggregate.get(&5).unwrap_or(&f64::NAN),
    ))
}

/// Trains the model with subgraph-grouped batches and returns the
/// best-validation checkpoint (by top-5) plus the per-epoch history.
/// Fully deterministic for a fixed `(model seed, data, config)` triple.
pub fn train(
    model: CostModel,
    train_groups: &[SampleGroup],
    val_groups: &[SampleGroup],
    cfg: &TrainConfig,
) -> Result<(CostModel, TrainReport)> {
    cfg.validate()?;
    check_featurization(&model, train_groups)?;
    check_featurization(&model, val_groups)?;
    let mut model = model;

    let shared_shapes: Vec<(usize, usize)> = model
        .shared
        .tensors()
        .iter()
        .map(|(_, t)| (t.rows, t.cols))
        .collect();
    let head_shapes: Vec<(usize, usize)> = model
        .head
        .tensors()
        .iter()
        .map(|(_, t)| (t.rows, t.cols))
        .collect();
    let mut adam_shared = Adam::new(cfg, &shared_shapes);
    let mut adam_head = Adam::new(cfg, &head_shapes);

    let (top1, top5) = val_metrics(&model, val_groups)?;
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: f64::NAN,
        val_top1: top1,
        val_top5: top5,
    }];

    let mut best_model = model.clone();
    let mut best_top5 = top5;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_groups.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_groups) {
            let plan = plan_batch(train_groups, chunk, cfg.group_cap, &mut rng);
            if plan.feats.is_empty() {
                continue;
            }
            let (loss, gs, gh) = model.loss_and_grads(
                &plan.feats,
                &plan.labels,
                &plan.group_ids,
                model.config.loss,
            )?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became non-finite at epoch {epoch}; try a lower learning rate"
                )));
            }
            let grads_s = gs.tensors();
            let grads_h = gh.tensors();
            adam_shared.step(model.shared.tensors_mut(), &grads_s);
            adam_head.step(model.head.tensors_mut(), &grads_h);
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = if batches > 0 {
            loss_sum / batches as f64
        } else {
            f64::NAN
        };

        let (val_top1, val_top5) = val_metrics(&model, val_groups)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_top1,
            val_top5,
        });

        if !val_groups.is_empty() {
            if best_top5.is_nan() || val_top5 > best_top5 {
                best_top5 = val_top5;
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
        TrainReport {
            history,
            best_epoch,
        },
    ))
}

/// Continues optimization from checkpoint weights on new (target) data. The
/// checkpoint's featurization must match the target samples.
pub fn fine_tune(
    checkpoint: CostModel,
    train_groups: &[SampleGroup],
    val_groups: &[SampleGroup],
    cfg: &TrainConfig,
) -> Result<(CostModel, TrainReport)> {
    train(checkpoint, train_groups, val_groups, cfg)
}
