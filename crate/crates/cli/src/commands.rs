//! Subcommand implementations. Every artifact-producing command writes its
//! outputs under `--out` with fixed filenames plus a `run.json` provenance
//! record (command, parameters, effective config, input digests).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use schedrank::{
    build_multi_task_groups, build_sample_groups, build_token_table, duplicate_rate,
    extract_features, fit_normalization, generate_workload, load_kind, sample_records,
    train_mtl, tune, CheckpointKind, CostModel, DatasetStore, EvalReport, Error, EvolveParams,
    ModelScorer, MtlOptions, MtlTaskScorer, MultiTaskModel, OracleScorer, PrimitiveSequence,
    RandomSequenceScorer, Result, Split, SynthConfig, SyntheticWorkload, TuneOptions,
};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Provenance record for one command invocation.
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub parameters: BTreeMap<String, String>,
    pub config: &'a RunConfig,
    pub inputs: Vec<PathBuf>,
}

impl RunRecord<'_> {
    fn write(&self, out: &Path) -> Result<()> {
        let mut inputs = BTreeMap::new();
        for path in &self.inputs {
            inputs.insert(path.display().to_string(), sha256_file(path)?);
        }
        let json = serde_json::json!({
            "command": self.command,
            "parameters": self.parameters,
            "config": self.config.values(),
            "inputs": inputs,
        });
        fs::write(out.join("run.json"), serde_json::to_string_pretty(&json)?)?;
        fs::write(out.join("config.txt"), self.config.echo())?;
        Ok(())
    }
}

fn params(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn load_store(path: &Path, registry: &schedrank::PrimitiveTypeRegistry) -> Result<DatasetStore> {
    Ok(DatasetStore::new(schedrank::read_jsonl(path, registry)?))
}

fn split_store(
    store: &mut DatasetStore,
    cfg: &RunConfig,
    seed: u64,
    val_fraction: Option<f64>,
    holdout: &[String],
    split_file: Option<&Path>,
) -> Result<()> {
    match split_file {
        Some(path) => store.load_split_assignment(path),
        None => {
            let fraction = cfg.val_fraction(val_fraction)?;
            store.split(fraction, &cfg.holdout(holdout), seed);
            Ok(())
        }
    }
}

/// Token table and normalization fitted on the training split.
fn fit_featurization(
    store: &DatasetStore,
    feature: &schedrank::FeatureConfig,
) -> Result<(schedrank::TokenTable, schedrank::NormalizationStats)> {
    let train_seqs: Vec<&PrimitiveSequence> = store
        .records()
        .iter()
        .zip(store.splits())
        .filter(|(_, s)| **s == Split::Train)
        .map(|(r, _)| &r.sequence)
        .collect();
    let tt = build_token_table(train_seqs.iter().copied());
    let mut mats = Vec::with_capacity(train_seqs.len());
    for seq in &train_seqs {
        mats.push(extract_features(seq, feature, &tt)?);
    }
    let stats = fit_normalization(mats.iter(), feature.embedding_size);
    Ok((tt, stats))
}

pub struct GenSyntheticArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub subgraphs: usize,
    pub candidates: usize,
    pub workloads: usize,
    pub hardware: Vec<String>,
    pub correlation: f64,
    pub sigma: f64,
}

pub fn cmd_gen_synthetic(args: &GenSyntheticArgs, cfg: &RunConfig) -> Result<()> {
    let registry = cfg.registry()?;
    fs::create_dir_all(&args.out)?;
    let synth = SynthConfig {
        subgraphs: args.subgraphs,
        workloads: args.workloads,
        hardware: args.hardware.clone(),
        correlation: args.correlation,
        sigma: args.sigma,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let workload = generate_workload(&synth, &registry)?;
    workload.save(args.out.join("workload_spec.json"))?;
    for hw in &args.hardware {
        let records = sample_records(&workload, hw, &registry, args.candidates, args.seed ^ 0x5eed)?;
        schedrank::write_jsonl(args.out.join(format!("dataset_{hw}.jsonl")), &records, &registry)?;
        println!(
            "wrote dataset_{hw}.jsonl: {} records over {} subgraphs",
            records.len(),
            args.subgraphs
        );
    }
    RunRecord {
        command: "gen-synthetic",
        parameters: params(&[
            ("seed", args.seed.to_string()),
            ("subgraphs", args.subgraphs.to_string()),
            ("candidates", args.candidates.to_string()),
            ("workloads", args.workloads.to_string()),
            ("hardware", args.hardware.join(",")),
            ("correlation", args.correlation.to_string()),
            ("sigma", args.sigma.to_string()),
        ]),
        config: cfg,
        inputs: Vec::new(),
    }
    .write(&args.out)
}

pub fn cmd_stats(dataset: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let registry = cfg.registry()?;
    let feature = cfg.feature(&registry)?;
    let store = load_store(dataset, &registry)?;
    if store.is_empty() {
        return Err(Error::Validation("dataset holds no records".into()));
    }
    fs::create_dir_all(out)?;
    let report = schedrank::stats(&store, &feature, &registry);
    fs::write(out.join("length_histogram.csv"), report.length_csv())?;
    fs::write(out.join("type_embedding.csv"), report.type_csv())?;
    // duplicate analysis tokenizes over the whole file (standalone utility)
    let tt = build_token_table(store.records().iter().map(|r| &r.sequence));
    let duplicates = duplicate_rate(&store, &feature, &tt)?;
    let json = serde_json::json!({
        "stats": report,
        "duplicates": duplicates,
    });
    fs::write(out.join("stats.json"), serde_json::to_string_pretty(&json)?)?;
    println!(
        "{} records, {} distinct feature matrices, repetition rate {:.6}",
        duplicates.total, duplicates.distinct, duplicates.rate
    );
    RunRecord {
        command: "stats",
        parameters: params(&[("dataset", dataset.display().to_string())]),
        config: cfg,
        inputs: vec![dataset.to_path_buf()],
    }
    .write(out)
}

pub struct FeaturizeArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub val_fraction: Option<f64>,
    pub holdout: Vec<String>,
}

pub fn cmd_featurize(args: &FeaturizeArgs, cfg: &RunConfig) -> Result<()> {
    let registry = cfg.registry()?;
    let feature = cfg.feature(&registry)?;
    let mut store = load_store(&args.dataset, &registry)?;
    split_store(&mut store, cfg, args.seed, args.val_fraction, &args.holdout, None)?;
    let (tt, stats) = fit_featurization(&store, &feature)?;

    fs::create_dir_all(&args.out)?;
    let mut blob: Vec<u8> = Vec::new();
    for r in store.records() {
        let m = extract_features(&r.sequence, &feature, &tt)?;
        let m = schedrank::apply_normalization(&m, &stats)?;
        for &v in m.values() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(args.out.join("features.bin"), &blob)?;
    fs::write(
        args.out.join("features_meta.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "records": store.len(),
            "rows": feature.sequence_length,
            "cols": feature.embedding_size,
            "dtype": "f32le",
        }))?,
    )?;
    fs::write(args.out.join("token_table.json"), serde_json::to_string_pretty(&tt)?)?;
    fs::write(args.out.join("norm_stats.json"), serde_json::to_string_pretty(&stats)?)?;
    store.save_split_assignment(args.out.join("split.json"))?;
    println!(
        "featurized {} records into {}x{} matrices ({} named tokens)",
        store.len(),
        feature.sequence_length,
        feature.embedding_size,
        tt.len()
    );
    RunRecord {
        command: "featurize",
        parameters: params(&[
            ("dataset", args.dataset.display().to_string()),
            ("seed", args.seed.to_string()),
        ]),
        config: cfg,
        inputs: vec![args.dataset.clone()],
    }
    .write(&args.out)
}

pub struct TrainArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub val_fraction: Option<f64>,
    pub holdout: Vec<String>,
    pub hardware: Option<String>,
    pub init_from: Option<PathBuf>,
}

fn single_hardware(store: &DatasetStore, flag: Option<&str>) -> Result<Option<String>> {
    let ids = store.hardware_ids();
    match flag {
        Some(hw) => {
            if !ids.iter().any(|i| i == hw) {
                return Err(Error::Validation(format!(
                    "dataset has no records for hardware `{hw}`"
                )));
            }
            Ok(Some(hw.to_string()))
        }
        None if ids.len() <= 1 => Ok(None),
        None => Err(Error::Config(format!(
            "dataset spans {} hardware platforms; pick one with --hardware",
            ids.len()
        ))),
    }
}

pub fn cmd_train(args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    // fine-tuning inherits the checkpoint's featurization wholesale
    let (model, registry, feature, tt, stats, mut store) = match &args.init_from {
        Some(ckpt) => {
            let model = CostModel::load(ckpt)?;
            let registry = model.registry.clone();
            let store = load_store(&args.dataset, &registry)?;
            (
                model.clone(),
                registry,
                model.feature.clone(),
                model.token_table.clone(),
                model.normalization.clone(),
                store,
            )
        }
        None => {
            let registry = cfg.registry()?;
            let feature = cfg.feature(&registry)?;
            let mut store = load_store(&args.dataset, &registry)?;
            split_store(&mut store, cfg, args.seed, args.val_fraction, &args.holdout, None)?;
            let (tt, stats) = fit_featurization(&store, &feature)?;
            let model = CostModel::new(
                cfg.model()?,
                feature.clone(),
                registry.clone(),
                tt.clone(),
                stats.clone(),
                args.seed,
            )?;
            (model, registry, feature, tt, stats, store)
        }
    };
    if args.init_from.is_some() {
        split_store(&mut store, cfg, args.seed, args.val_fraction, &args.holdout, None)?;
    }
    let _ = registry;
    let hardware = single_hardware(&store, args.hardware.as_deref())?;
    let train_groups =
        build_sample_groups(&store, Split::Train, hardware.as_deref(), &feature, &tt, &stats)?;
    let val_groups =
        build_sample_groups(&store, Split::Val, hardware.as_deref(), &feature, &tt, &stats)?;
    if train_groups.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }

    let train_cfg = cfg.train(args.seed, args.epochs)?;
    let (trained, report) = schedrank::train(model, &train_groups, &val_groups, &train_cfg)?;

    fs::create_dir_all(&args.out)?;
    trained.save(args.out.join("checkpoint"))?;
    fs::write(args.out.join("history.csv"), report.to_csv())?;
    store.save_split_assignment(args.out.join("split.json"))?;
    let last = report.history.last().expect("history has rows");
    println!(
        "trained {} epochs (best {}), final val top1 {:.4} top5 {:.4}",
        report.history.len() - 1,
        report.best_epoch,
        last.val_top1,
        last.val_top5
    );
    let mut inputs = vec![args.dataset.clone()];
    if let Some(ckpt) = &args.init_from {
        inputs.push(ckpt.join("manifest.json"));
        inputs.push(ckpt.join("weights.bin"));
    }
    RunRecord {
        command: "train",
        parameters: params(&[
            ("dataset", args.dataset.display().to_string()),
            ("seed", args.seed.to_string()),
            (
                "init_from",
                args.init_from
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("hardware", hardware.clone().unwrap_or_default()),
        ]),
        config: cfg,
        inputs,
    }
    .write(&args.out)
}

pub struct TrainMtlArgs {
    pub datasets: Vec<PathBuf>,
    pub target_task: String,
    pub out: PathBuf,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub val_fraction: Option<f64>,
    pub holdout: Vec<String>,
    pub freeze_shared: bool,
}

pub fn cmd_train_mtl(args: &TrainMtlArgs, cfg: &RunConfig) -> Result<()> {
    let registry = cfg.registry()?;
    let feature = cfg.feature(&registry)?;
    let mut records = Vec::new();
    for path in &args.datasets {
        records.extend(schedrank::read_jsonl(path, &registry)?);
    }
    let mut store = DatasetStore::new(records);
    split_store(&mut store, cfg, args.seed, args.val_fraction, &args.holdout, None)?;

    // task 0 is the target platform, the rest in sorted order
    let mut task_ids = vec![args.target_task.clone()];
    let all_ids = store.hardware_ids();
    if !all_ids.iter().any(|id| *id == args.target_task) {
        return Err(Error::Validation(format!(
            "no records for target task `{}`",
            args.target_task
        )));
    }
    task_ids.extend(all_ids.into_iter().filter(|id| *id != args.target_task));

    let (tt, stats) = fit_featurization(&store, &feature)?;
    let train_groups =
        build_multi_task_groups(&store, &task_ids, Split::Train, &feature, &tt, &stats)?;
    let mut val_groups = Vec::new();
    for task in &task_ids {
        val_groups.push(build_sample_groups(
            &store,
            Split::Val,
            Some(task),
            &feature,
            &tt,
            &stats,
        )?);
    }

    let model = MultiTaskModel::new(
        cfg.model()?,
        feature.clone(),
        registry.clone(),
        tt,
        stats,
        task_ids.clone(),
        args.seed,
    )?;
    let train_cfg = cfg.train(args.seed, args.epochs)?;
    let opts = MtlOptions {
        task_weights: None,
        freeze_shared: args.freeze_shared,
    };
    let (trained, report) = train_mtl(model, &train_groups, &val_groups, &train_cfg, &opts)?;

    fs::create_dir_all(&args.out)?;
    trained.save(args.out.join("checkpoint"))?;
    fs::write(args.out.join("history.csv"), report.to_csv(&task_ids))?;
    store.save_split_assignment(args.out.join("split.json"))?;
    let last = report.history.last().expect("history has rows");
    println!(
        "trained {} tasks, {} epochs (best {}), target val top5 {:.4}",
        task_ids.len(),
        report.history.len() - 1,
        report.best_epoch,
        last.per_task[0].1
    );
    RunRecord {
        command: "train-mtl",
        parameters: params(&[
            (
                "datasets",
                args.datasets
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("target_task", args.target_task.clone()),
            ("seed", args.seed.to_string()),
        ]),
        config: cfg,
        inputs: args.datasets.clone(),
    }
    .write(&args.out)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub split: Split,
    pub split_file: Option<PathBuf>,
    pub target_task: Option<String>,
    pub hardware: Option<String>,
    pub seed: u64,
    pub val_fraction: Option<f64>,
    pub holdout: Vec<String>,
}

pub fn cmd_eval(args: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    enum Loaded {
        Single(CostModel),
        Multi(MultiTaskModel, usize),
    }
    let loaded = match load_kind(&args.checkpoint)? {
        CheckpointKind::Single => Loaded::Single(CostModel::load(&args.checkpoint)?),
        CheckpointKind::MultiTask => {
            let model = MultiTaskModel::load(&args.checkpoint)?;
            let task_id = args.target_task.clone().unwrap_or_else(|| model.task_ids[0].clone());
            let task = model.task_index(&task_id).ok_or_else(|| {
                Error::Validation(format!("checkpoint has no task `{task_id}`"))
            })?;
            Loaded::Multi(model, task)
        }
    };
    let (registry, feature, tt, stats) = match &loaded {
        Loaded::Single(m) => (&m.registry, &m.feature, &m.token_table, &m.normalization),
        Loaded::Multi(m, _) => (&m.registry, &m.feature, &m.token_table, &m.normalization),
    };

    let mut store = load_store(&args.dataset, registry)?;
    split_store(
        &mut store,
        cfg,
        args.seed,
        args.val_fraction,
        &args.holdout,
        args.split_file.as_deref(),
    )?;
    let hardware = match (&loaded, &args.hardware) {
        (Loaded::Multi(m, task), None) => Some(m.task_ids[*task].clone()),
        (_, flag) => single_hardware(&store, flag.as_deref())?,
    };

    let report: EvalReport = match &loaded {
        Loaded::Single(model) => schedrank::evaluate_store(
            model,
            &store,
            args.split,
            hardware.as_deref(),
            feature,
            tt,
            stats,
            &[1, 5],
        )?,
        Loaded::Multi(model, task) => {
            let scorer = MtlTaskScorer { model, task: *task };
            schedrank::evaluate_store(
                &scorer,
                &store,
                args.split,
                hardware.as_deref(),
                feature,
                tt,
                stats,
                &[1, 5],
            )?
        }
    };

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("report.csv"), report.to_csv())?;
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "evaluated {} groups: top1 {:.4} top5 {:.4}",
        report.rows.len(),
        report.aggregate[&1],
        report.aggregate[&5]
    );
    RunRecord {
        command: "eval",
        parameters: params(&[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("dataset", args.dataset.display().to_string()),
            ("split", format!("{:?}", args.split).to_lowercase()),
            ("seed", args.seed.to_string()),
            ("hardware", hardware.clone().unwrap_or_default()),
        ]),
        config: cfg,
        inputs: vec![
            args.dataset.clone(),
            args.checkpoint.join("manifest.json"),
            args.checkpoint.join("weights.bin"),
        ],
    }
    .write(&args.out)
}

pub struct SearchArgs {
    pub checkpoint: PathBuf,
    pub workload_spec: PathBuf,
    pub out: PathBuf,
    pub hardware: Option<String>,
    pub target_task: Option<String>,
    pub rounds: usize,
    pub measure_per_round: usize,
    pub seed: u64,
    pub scorer: ScorerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    Model,
    Oracle,
    Random,
}

pub fn cmd_search(args: &SearchArgs, cfg: &RunConfig) -> Result<()> {
    let model = match load_kind(&args.checkpoint)? {
        CheckpointKind::Single => CostModel::load(&args.checkpoint)?,
        CheckpointKind::MultiTask => {
            let mtl = MultiTaskModel::load(&args.checkpoint)?;
            let task_id = args.target_task.clone().unwrap_or_else(|| mtl.task_ids[0].clone());
            mtl.extract_single_task(&task_id)?
        }
    };
    let registry = model.registry.clone();
    let workload = SyntheticWorkload::load(&args.workload_spec)?;
    let oracle = match &args.hardware {
        Some(hw) => workload
            .oracles
            .get(hw)
            .ok_or_else(|| Error::Validation(format!("workload spec has no oracle for `{hw}`")))?,
        None if workload.oracles.len() == 1 => workload.oracles.values().next().unwrap(),
        None => {
            return Err(Error::Config(
                "workload spec has several oracles; pick one with --hardware".into(),
            ))
        }
    };

    let opts = TuneOptions {
        rounds: args.rounds,
        measure_per_round: args.measure_per_round,
        pool: cfg.search_pool()?,
        evolve_iters: cfg.search_evolve_iters()?,
        evolve: EvolveParams {
            mutation_rate: cfg.search_mutation_rate()?,
            crossover_rate: cfg.search_crossover_rate()?,
        },
        seed: args.seed,
    };
    let trajectory = match args.scorer {
        ScorerKind::Model => {
            let scorer = ModelScorer { model: &model };
            tune(&workload.subgraphs, &registry, &scorer, oracle, &opts)?
        }
        ScorerKind::Oracle => {
            let scorer = OracleScorer {
                oracle,
                registry: &registry,
            };
            tune(&workload.subgraphs, &registry, &scorer, oracle, &opts)?
        }
        ScorerKind::Random => {
            let scorer = RandomSequenceScorer::new(args.seed ^ 0x7a31);
            tune(&workload.subgraphs, &registry, &scorer, oracle, &opts)?
        }
    };

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("trajectory.csv"), trajectory.to_csv())?;
    fs::write(
        args.out.join("search.json"),
        serde_json::to_string_pretty(&trajectory)?,
    )?;
    let final_best = trajectory
        .rounds
        .last()
        .map(|r| r.best_latency)
        .unwrap_or(f64::INFINITY);
    println!(
        "tuned {} rounds, {} measurements, workload best {final_best:.6e}",
        trajectory.rounds.len(),
        trajectory.total_measurements
    );
    RunRecord {
        command: "search",
        parameters: params(&[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("workload_spec", args.workload_spec.display().to_string()),
            ("rounds", args.rounds.to_string()),
            ("measure_per_round", args.measure_per_round.to_string()),
            ("seed", args.seed.to_string()),
            ("scorer", format!("{:?}", args.scorer).to_lowercase()),
            ("hardware", args.hardware.clone().unwrap_or_default()),
        ]),
        config: cfg,
        inputs: vec![
            args.workload_spec.clone(),
            args.checkpoint.join("manifest.json"),
            args.checkpoint.join("weights.bin"),
        ],
    }
    .write(&args.out)
}

