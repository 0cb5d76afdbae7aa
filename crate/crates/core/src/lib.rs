//! Cost-model toolkit for tensor-program tuning.
//!
//! Schedule-primitive sequences are treated as a small language: records are
//! parsed into an abstract primitive form, embedded into fixed-shape feature
//! matrices (type one-hot plus raw arguments), and ranked by a trained
//! latency model (attention or LSTM backbone with a per-position scoring
//! head). Multi-task training shares the backbone across hardware platforms
//! with one head per platform. A simulated round-based tuner with a seeded
//! synthetic latency oracle exercises the models end to end.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod linalg;
pub mod model;
pub mod mtl;
pub mod primitive;
pub mod search;
pub mod synth;

pub use dataset::{
    build_sample_groups, dedup_labels, duplicate_rate, normalize_labels, stats, DatasetStore,
    DuplicateReport, SampleGroup, Split, StatsReport, SubgraphGroup, TrainSample,
};
pub use error::{Error, Result};
pub use eval::{
    evaluate_sample_groups, evaluate_store, report_from_groups, top_k_score, Candidate,
    EvalGroup, EvalReport, MtlTaskScorer, RandomScorer, Scorer,
};
pub use featurize::{
    apply_normalization, build_token_table, embed_primitive, extract_features,
    extract_normalized_batch, fit_normalization, FeatureConfig, FeatureMatrix,
    NormalizationStats, TokenTable, PAD_TOKEN, UNKNOWN_TOKEN,
};
pub use model::{
    fine_tune, lambda_rank_loss, load_kind, mse_loss, train, BackboneKind, CheckpointKind,
    CostModel, EpochStats, LossKind, ModelConfig, TrainConfig, TrainReport,
};
pub use mtl::{
    build_multi_task_groups, mtl_loss, mtl_loss_and_grads, train_mtl, MtlOptions, MtlReport,
    MultiTaskGroup, MultiTaskModel, MultiTaskSample,
};
pub use primitive::{
    parse_record, read_jsonl, serialize_record, write_jsonl, Arg, Primitive,
    PrimitiveSequence, PrimitiveTypeRegistry, TensorProgramRecord,
};
pub use search::{
    evolve, generate_initial, search_speedup, tune, EvolveParams, ModelScorer, OracleScorer,
    RandomSequenceScorer, SequenceScorer, SpeedupReport, TuneOptions, TuningTrajectory,
};
pub use synth::{
    generate_workload, sample_records, ArgDomain, SynthConfig, SyntheticOracle,
    SyntheticSubgraph, SyntheticWorkload, TemplatePrimitive,
};
