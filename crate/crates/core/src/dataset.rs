//! Record storage, label normalization, splits, and dataset statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{
    extract_features, FeatureConfig, FeatureMatrix, NormalizationStats, TokenTable,
};
use crate::primitive::{PrimitiveTypeRegistry, TensorProgramRecord};

/// Split assignment for one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// In-memory dataset: records plus a per-record split assignment.
///
/// Records are grouped by `(hardware_id, subgraph_id)` for label
/// normalization; splits are assigned at subgraph granularity so one
/// subgraph's programs never straddle train/val/test.
#[derive(Debug, Clone)]
pub struct DatasetStore {
    records: Vec<TensorProgramRecord>,
    splits: Vec<Split>,
}

/// View of one `(hardware_id, subgraph_id)` group.
#[derive(Debug)]
pub struct SubgraphGroup<'a> {
    pub hardware_id: &'a str,
    pub subgraph_id: &'a str,
    pub records: Vec<&'a TensorProgramRecord>,
    pub min_latency: f64,
}

impl DatasetStore {
    pub fn new(records: Vec<TensorProgramRecord>) -> Self {
        let splits = vec![Split::Train; records.len()];
        Self { records, splits }
    }

    pub fn records(&self) -> &[TensorProgramRecord] {
        &self.records
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct hardware ids, sorted.
    pub fn hardware_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.hardware_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Record indices grouped by `(hardware_id, subgraph_id)`, in a
    /// deterministic key order. Within a group, indices keep input order.
    pub fn group_indices(&self) -> BTreeMap<(String, String), Vec<usize>> {
        let mut groups: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups
                .entry((r.hardware_id.clone(), r.subgraph_id.clone()))
                .or_default()
                .push(i);
        }
        groups
    }

    /// Group views with per-group minimum latency.
    pub fn subgraph_groups(&self) -> Vec<SubgraphGroup<'_>> {
        self.group_indices()
            .into_iter()
            .map(|(_, idxs)| {
                let records: Vec<&TensorProgramRecord> =
                    idxs.iter().map(|&i| &self.records[i]).collect();
                let min_latency = records
                    .iter()
                    .map(|r| r.latency)
                    .fold(f64::INFINITY, f64::min);
                SubgraphGroup {
                    hardware_id: &records[0].hardware_id,
                    subgraph_id: &records[0].subgraph_id,
                    records,
                    min_latency,
                }
            })
            .collect()
    }

    /// Normalized label per record: `min_latency / latency` within the
    /// record's `(hardware_id, subgraph_id)` group. Every label is in (0, 1]
    /// and at least one record per group gets exactly 1.0.
    pub fn compute_labels(&self) -> Vec<f64> {
        let mut labels = vec![0.0; self.records.len()];
        for (_, idxs) in self.group_indices() {
            let min = idxs
                .iter()
                .map(|&i| self.records[i].latency)
                .fold(f64::INFINITY, f64::min);
            for &i in &idxs {
                labels[i] = min / self.records[i].latency;
            }
        }
        labels
    }

    /// Assigns splits: subgraphs touching a holdout workload go to test in
    /// full; the remaining subgraphs are shuffled with the seeded RNG and
    /// assigned `val_fraction` to validation, the rest to train. Assignment
    /// is per subgraph id (consistent across hardware).
    pub fn split(&mut self, val_fraction: f64, holdout_workloads: &[String], seed: u64) {
        let holdout: HashSet<&str> = holdout_workloads.iter().map(String::as_str).collect();
        let mut test_subgraphs: BTreeSet<&str> = BTreeSet::new();
        for r in &self.records {
            if holdout.contains(r.workload.as_str()) {
                test_subgraphs.insert(&r.subgraph_id);
            }
        }
        let remaining: Vec<&str> = self
            .records
            .iter()
            .map(|r| r.subgraph_id.as_str())
            .filter(|s| !test_subgraphs.contains(s))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let mut shuffled = remaining;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);
        let n_val = ((shuffled.len() as f64) * val_fraction).round() as usize;
        let val_set: HashSet<&str> = shuffled[..n_val.min(shuffled.len())].iter().copied().collect();

        let assignment: Vec<Split> = self
            .records
            .iter()
            .map(|r| {
                if test_subgraphs.contains(r.subgraph_id.as_str()) {
                    Split::Test
                } else if val_set.contains(r.subgraph_id.as_str()) {
                    Split::Val
                } else {
                    Split::Train
                }
            })
            .collect();
        self.splits = assignment;
    }

    /// Subgraph-to-split map, suitable for the sidecar JSON.
    pub fn split_assignment(&self) -> BTreeMap<String, Split> {
        let mut map = BTreeMap::new();
        for (r, s) in self.records.iter().zip(&self.splits) {
            map.insert(r.subgraph_id.clone(), *s);
        }
        map
    }

    /// Applies a previously saved subgraph-to-split map.
    pub fn apply_split_assignment(&mut self, map: &BTreeMap<String, Split>) -> Result<()> {
        let mut splits = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let s = map.get(&r.subgraph_id).ok_or_else(|| {
                Error::Validation(format!(
                    "split assignment missing subgraph `{}`",
                    r.subgraph_id
                ))
            })?;
            splits.push(*s);
        }
        self.splits = splits;
        Ok(())
    }

    pub fn save_split_assignment(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.split_assignment())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_split_assignment(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, Split> = serde_json::from_str(&text)?;
        self.apply_split_assignment(&map)
    }
}

/// `min_latency / latency` for each record of a group, in record order.
pub fn normalize_labels(group: &SubgraphGroup<'_>) -> Result<Vec<f64>> {
    if group.records.is_empty() {
        return Err(Error::Validation("cannot normalize an empty group".into()));
    }
    Ok(group
        .records
        .iter()
        .map(|r| group.min_latency / r.latency)
        .collect())
}

/// Duplicate analysis over extracted feature matrices.
#[derive(Debug, Clone, Serialize)]
pub struct DuplicateReport {
    pub total: usize,
    pub distinct: usize,
    pub rate: f64,
}

/// Fraction of records whose extracted features collide with an earlier
/// record: `1 - distinct/total`.
pub fn duplicate_rate(
    store: &DatasetStore,
    cfg: &FeatureConfig,
    tt: &TokenTable,
) -> Result<DuplicateReport> {
    if store.is_empty() {
        return Err(Error::Validation(
            "duplicate rate undefined for an empty store".into(),
        ));
    }
    let mut seen = HashSet::new();
    for r in store.records() {
        let m = extract_features(&r.sequence, cfg, tt)?;
        seen.insert(m.digest());
    }
    let total = store.len();
    let distinct = seen.len();
    Ok(DuplicateReport {
        total,
        distinct,
        rate: 1.0 - distinct as f64 / total as f64,
    })
}

/// Collapses duplicate feature matrices within each
/// `(hardware_id, subgraph_id)` group to a single record carrying the best
/// (minimum) latency, i.e. the maximum normalized label. Record order and
/// split assignments of the kept records are preserved.
pub fn dedup_labels(
    store: &DatasetStore,
    cfg: &FeatureConfig,
    tt: &TokenTable,
) -> Result<DatasetStore> {
    // (hardware, subgraph, feature digest) -> index of best record so far
    let mut best: HashMap<(String, String, [u8; 32]), usize> = HashMap::new();
    for (i, r) in store.records().iter().enumerate() {
        let digest = extract_features(&r.sequence, cfg, tt)?.digest();
        let key = (r.hardware_id.clone(), r.subgraph_id.clone(), digest);
        match best.get(&key) {
            Some(&j) if store.records()[j].latency <= r.latency => {}
            _ => {
                best.insert(key, i);
            }
        }
    }
    let keep: HashSet<usize> = best.into_values().collect();
    let mut records = Vec::with_capacity(keep.len());
    let mut splits = Vec::with_capacity(keep.len());
    for (i, (r, s)) in store.records.iter().zip(&store.splits).enumerate() {
        if keep.contains(&i) {
            records.push(r.clone());
            splits.push(*s);
        }
    }
    Ok(DatasetStore { records, splits })
}

/// Corpus statistics: exact sequence-length histogram, per-type maximum
/// embedding size (one-hot width plus the largest observed argument count),
/// and crop counters for the given feature config.
#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub record_count: usize,
    pub sequence_length_histogram: BTreeMap<usize, u64>,
    pub per_type_max_embedding: BTreeMap<String, usize>,
    pub sequences_cropped: u64,
    pub args_cropped: u64,
}

impl StatsReport {
    /// `length,count` rows.
    pub fn length_csv(&self) -> String {
        let mut out = String::from("length,count\n");
        for (len, count) in &self.sequence_length_histogram {
            out.push_str(&format!("{len},{count}\n"));
        }
        out
    }

    /// `type,max_embedding` rows.
    pub fn type_csv(&self) -> String {
        let mut out = String::from("type,max_embedding\n");
        for (ty, max) in &self.per_type_max_embedding {
            out.push_str(&format!("{ty},{max}\n"));
        }
        out
    }
}

pub fn stats(
    store: &DatasetStore,
    cfg: &FeatureConfig,
    registry: &PrimitiveTypeRegistry,
) -> StatsReport {
    let mut histogram: BTreeMap<usize, u64> = BTreeMap::new();
    let mut per_type_args: BTreeMap<String, usize> = BTreeMap::new();
    let mut sequences_cropped = 0u64;
    let mut args_cropped = 0u64;
    for r in store.records() {
        *histogram.entry(r.sequence.len()).or_insert(0) += 1;
        if r.sequence.len() > cfg.sequence_length {
            sequences_cropped += 1;
        }
        for p in &r.sequence.primitives {
            let name = registry.name(p.type_id).unwrap_or("?").to_string();
            let entry = per_type_args.entry(name).or_insert(0);
            *entry = (*entry).max(p.args.len());
            if p.args.len() > cfg.arg_capacity() {
                args_cropped += (p.args.len() - cfg.arg_capacity()) as u64;
            }
        }
    }
    let per_type_max_embedding = per_type_args
        .into_iter()
        .map(|(name, max_args)| (name, cfg.num_types + max_args))
        .collect();
    StatsReport {
        record_count: store.len(),
        sequence_length_histogram: histogram,
        per_type_max_embedding,
        sequences_cropped,
        args_cropped,
    }
}

/// One featurized, labeled sample for training.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: FeatureMatrix,
    pub label: f64,
    pub latency: f64,
}

/// All samples of one subgraph (one ranking group).
#[derive(Debug, Clone)]
pub struct SampleGroup {
    pub workload: String,
    pub subgraph_id: String,
    pub samples: Vec<TrainSample>,
}

/// Featurizes and labels every record of `split` (optionally restricted to
/// one hardware platform), grouped by subgraph. Normalization is applied
/// with the provided stats.
pub fn build_sample_groups(
    store: &DatasetStore,
    split: Split,
    hardware: Option<&str>,
    cfg: &FeatureConfig,
    tt: &TokenTable,
    stats: &NormalizationStats,
) -> Result<Vec<SampleGroup>> {
    let labels = store.compute_labels();
    let mut groups: BTreeMap<(String, String), SampleGroup> = BTreeMap::new();
    for (i, r) in store.records().iter().enumerate() {
        if store.splits()[i] != split {
            continue;
        }
        if let Some(hw) = hardware {
            if r.hardware_id != hw {
                continue;
            }
        }
        let m = extract_features(&r.sequence, cfg, tt)?;
        let m = crate::featurize::apply_normalization(&m, stats)?;
        let key = (r.hardware_id.clone(), r.subgraph_id.clone());
        groups
            .entry(key)
            .or_insert_with(|| SampleGroup {
                workload: r.workload.clone(),
                subgraph_id: r.subgraph_id.clone(),
                samples: Vec::new(),
            })
            .samples
            .push(TrainSample {
                features: m,
                label: labels[i],
                latency: r.latency,
            });
    }
    Ok(groups.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitive::{Arg, Primitive, PrimitiveSequence};

    fn record(subgraph: &str, workload: &str, latency: f64, arg: f64) -> TensorProgramRecord {
        TensorProgramRecord {
            subgraph_id: subgraph.into(),
            workload: workload.into(),
            hardware_id: "hw".into(),
            latency,
            sequence: PrimitiveSequence::new(vec![Primitive {
                type_id: 0,
                args: vec![Arg::Number(arg)],
            }]),
        }
    }

    fn small_cfg() -> FeatureConfig {
        FeatureConfig {
            num_types: 3,
            sequence_length: 4,
            embedding_size: 8,
            positional_encoding: false,
        }
    }

    #[test]
    fn labels_follow_min_over_latency() {
        let store = DatasetStore::new(vec![
            record("s", "w", 2e-3, 1.0),
            record("s", "w", 4e-3, 2.0),
            record("s", "w", 8e-3, 3.0),
        ]);
        let groups = store.subgraph_groups();
        assert_eq!(groups.len(), 1);
        let labels = normalize_labels(&groups[0]).unwrap();
        assert_eq!(labels, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn single_record_label_is_one() {
        let store = DatasetStore::new(vec![record("s", "w", 7e-3, 1.0)]);
        let labels = normalize_labels(&store.subgraph_groups()[0]).unwrap();
        assert_eq!(labels, vec![1.0]);
    }

    #[test]
    fn tied_latencies_all_get_one() {
        let store = DatasetStore::new(vec![
            record("s", "w", 3e-3, 1.0),
            record("s", "w", 3e-3, 2.0),
        ]);
        let labels = normalize_labels(&store.subgraph_groups()[0]).unwrap();
        assert_eq!(labels, vec![1.0, 1.0]);
    }

    #[test]
    fn split_respects_ratio_and_holdout() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(record(&format!("sg{i}"), "w", 1e-3, i as f64));
        }
        records.push(record("sg_hold", "bert_base", 1e-3, 0.0));
        let mut store = DatasetStore::new(records);
        store.split(0.1, &["bert_base".to_string()], 7);

        let mut train = 0;
        let mut val = 0;
        let mut test = 0;
        for (r, s) in store.records().iter().zip(store.splits()) {
            match s {
                Split::Train => train += 1,
                Split::Val => val += 1,
                Split::Test => test += 1,
            }
            if r.workload == "bert_base" {
                assert_eq!(*s, Split::Test);
            }
        }
        assert_eq!((train, val, test), (9, 1, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let records: Vec<_> = (0..20)
            .map(|i| record(&format!("sg{i}"), "w", 1e-3, i as f64))
            .collect();
        let mut a = DatasetStore::new(records.clone());
        let mut b = DatasetStore::new(records);
        a.split(0.1, &[], 42);
        b.split(0.1, &[], 42);
        assert_eq!(a.splits(), b.splits());
    }

    #[test]
    fn split_is_subgraph_atomic() {
        let mut records = Vec::new();
        for i in 0..6 {
            for j in 0..3 {
                records.push(record(&format!("sg{i}"), "w", 1e-3 * (j + 1) as f64, j as f64));
            }
        }
        let mut store = DatasetStore::new(records);
        store.split(0.3, &[], 1);
        let mut per_subgraph: HashMap<&str, Split> = HashMap::new();
        for (r, s) in store.records().iter().zip(store.splits()) {
            let prev = per_subgraph.insert(r.subgraph_id.as_str(), *s);
            if let Some(prev) = prev {
                assert_eq!(prev, *s, "subgraph {} straddles splits", r.subgraph_id);
            }
        }
    }

    #[test]
    fn duplicate_rate_counts_collisions() {
        let cfg = small_cfg();
        let tt = TokenTable::default();
        // 10 records: args 0..7 distinct, plus repeats of 0 and 1 -> 8 distinct
        let mut records: Vec<_> = (0..8).map(|i| record("s", "w", 1e-3, i as f64)).collect();
        records.push(record("s", "w", 2e-3, 0.0));
        records.push(record("s", "w", 2e-3, 1.0));
        let store = DatasetStore::new(records);
        let report = duplicate_rate(&store, &cfg, &tt).unwrap();
        assert_eq!(report.total, 10);
        assert_eq!(report.distinct, 8);
        assert!((report.rate - 0.2).abs() < 1e-12);
    }

    #[test]
    fn duplicate_rate_zero_when_distinct() {
        let cfg = small_cfg();
        let tt = TokenTable::default();
        let store =
            DatasetStore::new((0..5).map(|i| record("s", "w", 1e-3, i as f64)).collect());
        let report = duplicate_rate(&store, &cfg, &tt).unwrap();
        assert_eq!(report.rate, 0.0);
    }

    #[test]
    fn dedup_keeps_max_label() {
        let cfg = small_cfg();
        let tt = TokenTable::default();
        // duplicates with labels 0.5 (latency 2e-3) and 0.9 (latency ~1.11e-3)
        let store = DatasetStore::new(vec![
            record("s", "w", 1e-3, 1.0),      // the group's best, distinct features
            record("s", "w", 2e-3, 5.0),      // dup A, label 0.5
            record("s", "w", 1e-3 / 0.9, 5.0) // dup A, label 0.9
        ]);
        let deduped = dedup_labels(&store, &cfg, &tt).unwrap();
        assert_eq!(deduped.len(), 2);
        let labels = deduped.compute_labels();
        assert!(labels.iter().any(|&l| (l - 0.9).abs() < 1e-12));
        let rate = duplicate_rate(&deduped, &cfg, &tt).unwrap().rate;
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn dedup_identity_when_no_duplicates() {
        let cfg = small_cfg();
        let tt = TokenTable::default();
        let store =
            DatasetStore::new((0..4).map(|i| record("s", "w", 1e-3, i as f64)).collect());
        let deduped = dedup_labels(&store, &cfg, &tt).unwrap();
        assert_eq!(deduped.records(), store.records());
    }

    #[test]
    fn dedup_equal_labels_keeps_one() {
        let cfg = small_cfg();
        let tt = TokenTable::default();
        let store = DatasetStore::new(vec![
            record("s", "w", 2e-3, 5.0),
            record("s", "w", 2e-3, 5.0),
        ]);
        let deduped = dedup_labels(&store, &cfg, &tt).unwrap();
        assert_eq!(deduped.len(), 1);
        assert_eq!(deduped.compute_labels(), vec![1.0]);
    }

    #[test]
    fn stats_histogram_and_type_max() {
        let reg = PrimitiveTypeRegistry::default();
        let cfg = FeatureConfig {
            num_types: 11,
            sequence_length: 25,
            embedding_size: 22,
            positional_encoding: false,
        };
        let sp = reg.index("SP").unwrap();
        let re = reg.index("RE").unwrap();
        let mk = |args: usize| Primitive {
            type_id: sp,
            args: (0..args).map(|i| Arg::Number(i as f64)).collect(),
        };
        let records = vec![
            TensorProgramRecord {
                subgraph_id: "a".into(),
                workload: "w".into(),
                hardware_id: "hw".into(),
                latency: 1e-3,
                sequence: PrimitiveSequence::new(vec![mk(7), mk(2), Primitive { type_id: re, args: vec![] }]),
            },
            TensorProgramRecord {
                subgraph_id: "b".into(),
                workload: "w".into(),
                hardware_id: "hw".into(),
                latency: 1e-3,
                sequence: PrimitiveSequence::new(vec![mk(1), mk(3), mk(2)]),
            },
        ];
        let report = stats(&DatasetStore::new(records), &cfg, &reg);
        assert_eq!(report.sequence_length_histogram.get(&3), Some(&2));
        assert_eq!(report.per_type_max_embedding.get("SP"), Some(&18));
        assert!(!report.per_type_max_embedding.contains_key("FU"));
        assert!(report.length_csv().contains("3,2"));
        assert!(report.type_csv().contains("SP,18"));
    }
}
