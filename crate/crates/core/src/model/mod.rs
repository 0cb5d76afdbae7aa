//! The latency-ranking network and its training machinery.
//!
//! Architecture: per-position linear upsampling to `hidden_dim`, a
//! self-attention or LSTM backbone, two residual blocks, then a per-position
//! head whose outputs are summed into one score per sequence.
//!
//! All math runs in f64; parameters are kept exactly representable as f32
//! (quantized after init and after every optimizer step) so checkpoints
//! round-trip bit-exactly through the f32 weight file.

pub(crate) mod checkpoint;
mod loss;
mod net;
mod train;

pub use checkpoint::{load_kind, CheckpointKind};
pub use loss::{lambda_rank_loss, mse_loss};
pub use train::{fine_tune, train, EpochStats, TrainConfig, TrainReport};
pub(crate) use train::Adam;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurize::{FeatureConfig, FeatureMatrix, NormalizationStats, TokenTable};
use crate::linalg::Matrix;
use crate::primitive::PrimitiveTypeRegistry;

/// Context-capturing module at the center of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    SelfAttention,
    Lstm,
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    LambdaRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub backbone: BackboneKind,
    pub attention_heads: usize,
    pub backbone_layers: usize,
    pub residual_blocks: usize,
    pub loss: LossKind,
    /// Learned additive positional encoding. Off by default: the plain
    /// attention backbone plus position sum is permutation invariant.
    pub positional_encoding: bool,
    /// Exclude all-zero padding rows from attention (keys and outputs).
    pub mask_padding: bool,
    /// Layer normalization after the attention residual, for ablation.
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            backbone: BackboneKind::SelfAttention,
            attention_heads: 8,
            backbone_layers: 1,
            residual_blocks: 2,
            loss: LossKind::LambdaRank,
            positional_encoding: false,
            mask_padding: false,
            layer_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 2 || self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even and >= 2".into()));
        }
        if self.attention_heads == 0 || self.hidden_dim % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim ({}) must be divisible by attention_heads ({})",
                self.hidden_dim, self.attention_heads
            )));
        }
        if self.backbone_layers == 0 {
            return Err(Error::Config("backbone_layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Affine map `y = x W + b` with `w: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Matrix,
    pub b: Matrix,
}

impl Affine {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Matrix::zeros(input, output),
            b: Matrix::zeros(1, output),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub norm: Option<LayerNormParams>,
}

/// Gate weight layout along the 4h axis: input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub wx: Matrix,
    pub wh: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Attention(Vec<AttentionLayer>),
    Lstm(Vec<LstmLayer>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub a1: Affine,
    pub a2: Affine,
}

/// Everything below the head: upsampling, optional positional encoding,
/// backbone, residual blocks. Shared across tasks in the multi-task model.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    pub up1: Affine,
    pub up2: Affine,
    pub positional: Option<Matrix>,
    pub backbone: Backbone,
    pub blocks: Vec<ResidualBlock>,
}

/// Per-position scoring head: `hidden -> hidden/2 -> 1` with ReLU between.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub a1: Affine,
    pub a2: Affine,
}

impl SharedParams {
    pub fn zeros(cfg: &ModelConfig, feature: &FeatureConfig) -> Self {
        let h = cfg.hidden_dim;
        let half = h / 2;
        let e = feature.embedding_size;
        let backbone = match cfg.backbone {
            BackboneKind::SelfAttention => Backbone::Attention(
                (0..cfg.backbone_layers)
                    .map(|_| AttentionLayer {
                        query: Affine::zeros(h, h),
                        key: Affine::zeros(h, h),
                        value: Affine::zeros(h, h),
                        output: Affine::zeros(h, h),
                        norm: cfg.layer_norm.then(|| LayerNormParams {
                            gamma: Matrix::zeros(1, h),
                            beta: Matrix::zeros(1, h),
                        }),
                    })
                    .collect(),
            ),
            BackboneKind::Lstm => Backbone::Lstm(
                (0..cfg.backbone_layers)
                    .map(|_| LstmLayer {
                        wx: Matrix::zeros(h, 4 * h),
                        wh: Matrix::zeros(h, 4 * h),
                        b: Matrix::zeros(1, 4 * h),
                    })
                    .collect(),
            ),
        };
        Self {
            up1: Affine::zeros(e, half),
            up2: Affine::zeros(half, h),
            positional: cfg
                .positional_encoding
                .then(|| Matrix::zeros(feature.sequence_length, h)),
            backbone,
            blocks: (0..cfg.residual_blocks)
                .map(|_| ResidualBlock {
                    a1: Affine::zeros(h, h),
                    a2: Affine::zeros(h, h),
                })
                .collect(),
        }
    }

    /// Named tensors in checkpoint/optimizer order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("up1.w".to_string(), &self.up1.w),
            ("up1.b".to_string(), &self.up1.b),
            ("up2.w".to_string(), &self.up2.w),
            ("up2.b".to_string(), &self.up2.b),
        ];
        if let Some(p) = &self.positional {
            out.push(("positional".to_string(), p));
        }
        match &self.backbone {
            Backbone::Attention(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("attn.{i}.wq"), &l.query.w));
                    out.push((format!("attn.{i}.bq"), &l.query.b));
                    out.push((format!("attn.{i}.wk"), &l.key.w));
                    out.push((format!("attn.{i}.bk"), &l.key.b));
                    out.push((format!("attn.{i}.wv"), &l.value.w));
                    out.push((format!("attn.{i}.bv"), &l.value.b));
                    out.push((format!("attn.{i}.wo"), &l.output.w));
                    out.push((format!("attn.{i}.bo"), &l.output.b));
                    if let Some(n) = &l.norm {
                        out.push((format!("attn.{i}.ln.gamma"), &n.gamma));
                        out.push((format!("attn.{i}.ln.beta"), &n.beta));
                    }
                }
            }
            Backbone::Lstm(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("lstm.{i}.wx"), &l.wx));
                    out.push((format!("lstm.{i}.wh"), &l.wh));
                    out.push((format!("lstm.{i}.b"), &l.b));
                }
            }
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            out.push((format!("block.{i}.a1.w"), &blk.a1.w));
            out.push((format!("block.{i}.a1.b"), &blk.a1.b));
            out.push((format!("block.{i}.a2.w"), &blk.a2.w));
            out.push((format!("block.{i}.a2.b"), &blk.a2.b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("up1.w".to_string(), &mut self.up1.w),
            ("up1.b".to_string(), &mut self.up1.b),
            ("up2.w".to_string(), &mut self.up2.w),
            ("up2.b".to_string(), &mut self.up2.b),
        ];
        if let Some(p) = &mut self.positional {
            out.push(("positional".to_string(), p));
        }
        match &mut self.backbone {
            Backbone::Attention(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    out.push((format!("attn.{i}.wq"), &mut l.query.w));
                    out.push((format!("attn.{i}.bq"), &mut l.query.b));
                    out.push((format!("attn.{i}.wk"), &mut l.key.w));
                    out.push((format!("attn.{i}.bk"), &mut l.key.b));
                    out.push((format!("attn.{i}.wv"), &mut l.value.w));
                    out.push((format!("attn.{i}.bv"), &mut l.value.b));
                    out.push((format!("attn.{i}.wo"), &mut l.output.w));
                    out.push((format!("attn.{i}.bo"), &mut l.output.b));
                    if let Some(n) = &mut l.norm {
                        out.push((format!("attn.{i}.ln.gamma"), &mut n.gamma));
                        out.push((format!("attn.{i}.ln.beta"), &mut n.beta));
                    }
                }
            }
            Backbone::Lstm(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    out.push((format!("lstm.{i}.wx"), &mut l.wx));
                    out.push((format!("lstm.{i}.wh"), &mut l.wh));
                    out.push((format!("lstm.{i}.b"), &mut l.b));
                }
            }
        }
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block.{i}.a1.w"), &mut blk.a1.w));
            out.push((format!("block.{i}.a1.b"), &mut blk.a1.b));
            out.push((format!("block.{i}.a2.w"), &mut blk.a2.w));
            out.push((format!("block.{i}.a2.b"), &mut blk.a2.b));
        }
        out
    }
}

impl HeadParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        Self {
            a1: Affine::zeros(h, h / 2),
            a2: Affine::zeros(h / 2, 1),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("head.a1.w".to_string(), &self.a1.w),
            ("head.a1.b".to_string(), &self.a1.b),
            ("head.a2.w".to_string(), &self.a2.w),
            ("head.a2.b".to_string(), &self.a2.b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("head.a1.w".to_string(), &mut self.a1.w),
            ("head.a1.b".to_string(), &mut self.a1.b),
            ("head.a2.w".to_string(), &mut self.a2.w),
            ("head.a2.b".to_string(), &mut self.a2.b),
        ]
    }
}

/// Rounds every parameter to the nearest f32 value. Called after init and
/// after every optimizer step so the in-memory weights always round-trip
/// through the f32 checkpoint format without loss.
pub(crate) fn quantize_to_f32(tensors: Vec<(String, &mut Matrix)>) {
    for (_, t) in tensors {
        for v in &mut t.data {
            *v = *v as f32 as f64;
        }
    }
}

fn fill_xavier(m: &mut Matrix, fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in &mut m.data {
        *v = (rng.gen::<f64>() * 2.0 - 1.0) * limit;
    }
}

pub(crate) fn init_shared(
    shared: &mut SharedParams,
    cfg: &ModelConfig,
    rng: &mut impl rand::Rng,
) {
    let h = cfg.hidden_dim;
    // Weight matrices get Xavier-uniform values. Biases ahead of a ReLU get
    // a small positive offset so no layer starts fully dead; LSTM
    // forget-gate biases start at 1 and LayerNorm gains at 1.
    for (name, t) in shared.tensors_mut() {
        if name.ends_with(".w") || name.ends_with("wq") || name.ends_with("wk")
            || name.ends_with("wv") || name.ends_with("wo") || name.ends_with("wx")
            || name.ends_with("wh")
        {
            let (fi, fo) = (t.rows, t.cols);
            fill_xavier(t, fi, fo, rng);
        } else if name == "positional" {
            for v in &mut t.data {
                *v = (rng.gen::<f64>() * 2.0 - 1.0) * 0.05;
            }
        } else if name.ends_with("ln.gamma") {
            for v in &mut t.data {
                *v = 1.0;
            }
        } else if name.starts_with("lstm.") && name.ends_with(".b") {
            // forget-gate slice [h, 2h) starts at 1
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = if (h..2 * h).contains(&i) { 1.0 } else { 0.0 };
            }
        } else if name == "up1.b" || name == "up2.b" || name.ends_with("a1.b") {
            t.data.fill(0.01);
        }
    }
    quantize_to_f32(shared.tensors_mut());
}

pub(crate) fn init_head(head: &mut HeadParams, rng: &mut impl rand::Rng) {
    for (name, t) in head.tensors_mut() {
        if name.ends_with(".w") {
            let (fi, fo) = (t.rows, t.cols);
            fill_xavier(t, fi, fo, rng);
        } else if name == "head.a1.b" {
            // the head sees bounded backbone outputs; a larger offset keeps
            // its ReLU units alive even for small hidden sizes
            t.data.fill(0.1);
        }
    }
    quantize_to_f32(head.tensors_mut());
}

/// A trained (or trainable) single-task cost model, carrying the full
/// featurization provenance it was built against.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub config: ModelConfig,
    pub feature: FeatureConfig,
    pub registry: PrimitiveTypeRegistry,
    pub token_table: TokenTable,
    pub normalization: NormalizationStats,
    pub shared: SharedParams,
    pub head: HeadParams,
}

impl CostModel {
    /// Fresh model with seeded Xavier initialization.
    pub fn new(
        config: ModelConfig,
        feature: FeatureConfig,
        registry: PrimitiveTypeRegistry,
        token_table: TokenTable,
        normalization: NormalizationStats,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        feature.validate()?;
        if registry.len() != feature.num_types {
            return Err(Error::Config(format!(
                "registry size {} does not match feature num_types {}",
                registry.len(),
                feature.num_types
            )));
        }
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut shared = SharedParams::zeros(&config, &feature);
        init_shared(&mut shared, &config, &mut rng);
        let mut head = HeadParams::zeros(&config);
        init_head(&mut head, &mut rng);
        Ok(Self {
            config,
            feature,
            registry,
            token_table,
            normalization,
            shared,
            head,
        })
    }

    /// Scores a batch of feature matrices; higher means faster predicted.
    pub fn forward(&self, feats: &[&FeatureMatrix]) -> Result<Vec<f64>> {
        let batch = net::Batch::new(feats, &self.feature, &self.config)?;
        Ok(net::forward(&self.shared, &self.head, &self.config, &batch).scores)
    }

    /// Loss and parameter gradients for one batch; gradients are returned in
    /// `tensors()` order (shared first, then head). Exposed for gradient
    /// verification.
    pub fn loss_and_grads(
        &self,
        feats: &[&FeatureMatrix],
        labels: &[f64],
        group_ids: &[usize],
        loss: LossKind,
    ) -> Result<(f64, SharedParams, HeadParams)> {
        let batch = net::Batch::new(feats, &self.feature, &self.config)?;
        let trace = net::forward(&self.shared, &self.head, &self.config, &batch);
        let (value, dscores) = match loss {
            LossKind::Mse => mse_loss(&trace.scores, labels)?,
            LossKind::LambdaRank => lambda_rank_loss(&trace.scores, labels, group_ids)?,
        };
        let (dshared, dhead) =
            net::backward(&self.shared, &self.head, &self.config, &batch, &trace, &dscores);
        Ok((value, dshared, dhead))
    }

    /// Loss value only (used by finite-difference checks).
    pub fn loss_value(
        &self,
        feats: &[&FeatureMatrix],
        labels: &[f64],
        group_ids: &[usize],
        loss: LossKind,
    ) -> Result<f64> {
        let scores = self.forward(feats)?;
        let (value, _) = match loss {
            LossKind::Mse => mse_loss(&scores, labels)?,
            LossKind::LambdaRank => lambda_rank_loss(&scores, labels, group_ids)?,
        };
        Ok(value)
    }

    /// Digest over configs, registry, token table, and normalization; a
    /// checkpoint refuses to load if this does not match its manifest.
    pub fn provenance_digest(&self) -> String {
        provenance_digest(
            &self.config,
            &self.feature,
            &self.registry,
            &self.token_table,
            &self.normalization,
            None,
        )
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        checkpoint::save_single(self, dir.as_ref())
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        checkpoint::load_single(dir.as_ref())
    }
}

pub(crate) fn provenance_digest(
    config: &ModelConfig,
    feature: &FeatureConfig,
    registry: &PrimitiveTypeRegistry,
    token_table: &TokenTable,
    normalization: &NormalizationStats,
    tasks: Option<&[String]>,
) -> String {
    #[derive(Serialize)]
    struct Payload<'a> {
        config: &'a ModelConfig,
        feature: &'a FeatureConfig,
        registry: &'a [String],
        token_table: &'a [String],
        normalization: &'a NormalizationStats,
        tasks: Option<&'a [String]>,
    }
    let json = serde_json::to_string(&Payload {
        config,
        feature,
        registry: registry.names(),
        token_table: token_table.names(),
        normalization,
        tasks,
    })
    .expect("provenance serializes");
    let hash = Sha256::digest(json.as_bytes());
    hex::encode(hash)
}

pub(crate) use net::{backward, forward, Batch};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::FeatureMatrix;

    fn tiny_feature() -> FeatureConfig {
        FeatureConfig {
            num_types: 3,
            sequence_length: 4,
            embedding_size: 6,
            positional_encoding: false,
        }
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            attention_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_registry() -> PrimitiveTypeRegistry {
        PrimitiveTypeRegistry::new(["SP", "RE", "FU"]).unwrap()
    }

    fn model_with(config: ModelConfig, seed: u64) -> CostModel {
        CostModel::new(
            config,
            tiny_feature(),
            tiny_registry(),
            TokenTable::default(),
            NormalizationStats::identity(6),
            seed,
        )
        .unwrap()
    }

    use rand::Rng;

    fn random_input(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> FeatureMatrix {
        FeatureMatrix::from_values(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    #[test]
    fn zero_model_zero_input_scores_zero() {
        let mut model = model_with(tiny_config(), 0);
        for (_, t) in model.shared.tensors_mut() {
            t.data.fill(0.0);
        }
        for (_, t) in model.head.tensors_mut() {
            t.data.fill(0.0);
        }
        let x = FeatureMatrix::from_values(4, 6, vec![0.0; 24]);
        let scores = model.forward(&[&x]).unwrap();
        assert_eq!(scores, vec![0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        use rand::SeedableRng;
        let model = model_with(tiny_config(), 7);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = random_input(&mut rng, 4, 6);
        let a = model.forward(&[&x]).unwrap();
        let b = model.forward(&[&x]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_model() {
        let a = model_with(tiny_config(), 11);
        let b = model_with(tiny_config(), 11);
        assert_eq!(a.shared, b.shared);
        assert_eq!(a.head, b.head);
    }

    #[test]
    fn attention_forward_is_permutation_invariant() {
        use rand::SeedableRng;
        let model = model_with(tiny_config(), 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = random_input(&mut rng, 4, 6);
        // rotate rows by one
        let mut vals = Vec::new();
        for r in [1usize, 2, 3, 0] {
            vals.extend_from_slice(&x.values()[r * 6..(r + 1) * 6]);
        }
        let xp = FeatureMatrix::from_values(4, 6, vals);
        let a = model.forward(&[&x]).unwrap()[0];
        let b = model.forward(&[&xp]).unwrap()[0];
        assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn lstm_forward_is_not_permutation_invariant() {
        use rand::SeedableRng;
        let cfg = ModelConfig {
            backbone: BackboneKind::Lstm,
            ..tiny_config()
        };
        let model = model_with(cfg, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = random_input(&mut rng, 4, 6);
        let mut vals = Vec::new();
        for r in [1usize, 2, 3, 0] {
            vals.extend_from_slice(&x.values()[r * 6..(r + 1) * 6]);
        }
        let xp = FeatureMatrix::from_values(4, 6, vals);
        let a = model.forward(&[&x]).unwrap()[0];
        let b = model.forward(&[&xp]).unwrap()[0];
        assert!((a - b).abs() > 1e-9, "lstm should be order sensitive");
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let model = model_with(tiny_config(), 1);
        let x = FeatureMatrix::from_values(4, 5, vec![0.0; 20]);
        assert!(matches!(model.forward(&[&x]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_bias_masked_model_ignores_extra_padding_rows() {
        use rand::SeedableRng;
        let cfg = ModelConfig {
            mask_padding: true,
            ..tiny_config()
        };
        let mut model = model_with(cfg, 13);
        for (name, t) in model.shared.tensors_mut() {
            if name.ends_with('b') && !name.ends_with("ln.beta") {
                t.data.fill(0.0);
            }
        }
        for (name, t) in model.head.tensors_mut() {
            if name.ends_with(".b") {
                t.data.fill(0.0);
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let real: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() + 0.1).collect();
        let mut three = real.clone();
        three.extend(vec![0.0; 6]); // 2 real rows + 1 pad
        let mut four = real.clone();
        four.extend(vec![0.0; 12]); // 2 real rows + 2 pads
        let a = model
            .forward(&[&FeatureMatrix::from_values(3, 6, three)])
            .unwrap()[0];
        let b = model
            .forward(&[&FeatureMatrix::from_values(4, 6, four)])
            .unwrap()[0];
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
