//! The weighted top-k metric and report generation.
//!
//! For each `(workload, subgraph)` group the metric compares the group's
//! true best latency against the best true latency among the k candidates
//! the model scores highest; groups are combined as weighted sums, so 1.0
//! means the optimum is always inside the model's top k.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{build_sample_groups, DatasetStore, SampleGroup, Split};
use crate::error::{Error, Result};
use crate::featurize::{FeatureConfig, FeatureMatrix, NormalizationStats, TokenTable};
use crate::model::CostModel;
use crate::mtl::MultiTaskModel;

/// One measured candidate with its predicted score.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub latency: f64,
    pub score: f64,
}

/// Candidates of one subgraph within one workload.
#[derive(Debug, Clone)]
pub struct EvalGroup {
    pub workload: String,
    pub subgraph: String,
    /// Occurrence count of the subgraph in the workload.
    pub weight: f64,
    pub candidates: Vec<Candidate>,
    pub min_latency: f64,
}

impl EvalGroup {
    pub fn new(
        workload: impl Into<String>,
        subgraph: impl Into<String>,
        weight: f64,
        candidates: Vec<Candidate>,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Validation("eval group has no candidates".into()));
        }
        if !(weight >= 1.0) {
            return Err(Error::Validation("group weight must be >= 1".into()));
        }
        let min_latency = candidates
            .iter()
            .map(|c| c.latency)
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            workload: workload.into(),
            subgraph: subgraph.into(),
            weight,
            candidates,
            min_latency,
        })
    }

    /// Best true latency among the k highest-scored candidates. Ties in
    /// score keep input order; k larger than the group uses every candidate.
    pub fn best_latency_in_top_k(&self, k: usize) -> f64 {
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.sort_by(|&a, &b| self.candidates[b].score.total_cmp(&self.candidates[a].score));
        order
            .iter()
            .take(k)
            .map(|&i| self.candidates[i].latency)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Weighted top-k score over groups; in (0, 1] for valid inputs.
pub fn top_k_score(groups: &[EvalGroup], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if groups.is_empty() {
        return Err(Error::Validation("top-k over zero groups".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for g in groups {
        num += g.min_latency * g.weight;
        den += g.best_latency_in_top_k(k) * g.weight;
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupRow {
    pub workload: String,
    pub subgraph: String,
    pub weight: f64,
    pub top_k: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub rows: Vec<GroupRow>,
    pub per_workload: BTreeMap<String, BTreeMap<usize, f64>>,
    pub aggregate: BTreeMap<usize, f64>,
}

impl EvalReport {
    /// `workload,subgraph,weight,top1,top5,...` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("workload,subgraph,weight");
        for k in &self.ks {
            out.push_str(&format!(",top{k}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{},{}", row.workload, row.subgraph, row.weight));
            for k in &self.ks {
                out.push_str(&format!(",{}", row.top_k[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// Anything that can score feature matrices. Higher scores mean better
/// predicted candidates.
pub trait Scorer {
    fn score_batch(&self, feats: &[&FeatureMatrix]) -> Result<Vec<f64>>;
}

impl Scorer for CostModel {
    fn score_batch(&self, feats: &[&FeatureMatrix]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        let chunks: Vec<&[&FeatureMatrix]> = feats.chunks(256).collect();
        let scored: Result<Vec<Vec<f64>>> =
            chunks.par_iter().map(|chunk| self.forward(chunk)).collect();
        Ok(scored?.into_iter().flatten().collect())
    }
}

/// Scores through one task of a multi-task model.
pub struct MtlTaskScorer<'a> {
    pub model: &'a MultiTaskModel,
    pub task: usize,
}

impl Scorer for MtlTaskScorer<'_> {
    fn score_batch(&self, feats: &[&FeatureMatrix]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        let chunks: Vec<&[&FeatureMatrix]> = feats.chunks(256).collect();
        let scored: Result<Vec<Vec<f64>>> = chunks
            .par_iter()
            .map(|chunk| self.model.forward_task(self.task, chunk))
            .collect();
        Ok(scored?.into_iter().flatten().collect())
    }
}

/// Seeded uniform scores; the random-ranking baseline.
pub struct RandomScorer {
    rng: RefCell<ChaCha8Rng>,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl Scorer for RandomScorer {
    fn score_batch(&self, feats: &[&FeatureMatrix]) -> Result<Vec<f64>> {
        let mut rng = self.rng.borrow_mut();
        Ok((0..feats.len()).map(|_| rng.gen::<f64>()).collect())
    }
}

/// Scores every candidate of every group and aggregates weighted top-k per
/// group, per workload, and overall. Group weights default to 1.
pub fn evaluate_sample_groups(
    scorer: &dyn Scorer,
    groups: &[SampleGroup],
    ks: &[usize],
) -> Result<EvalReport> {
    if groups.is_empty() {
        return Err(Error::Validation("no groups to evaluate".into()));
    }
    let mut eval_groups = Vec::with_capacity(groups.len());
    for g in groups {
        let feats: Vec<&FeatureMatrix> = g.samples.iter().map(|s| &s.features).collect();
        let scores = scorer.score_batch(&feats)?;
        let candidates: Vec<Candidate> = g
            .samples
            .iter()
            .zip(scores)
            .map(|(s, score)| Candidate {
                latency: s.latency,
                score,
            })
            .collect();
        eval_groups.push(EvalGroup::new(
            g.workload.clone(),
            g.subgraph_id.clone(),
            1.0,
            candidates,
        )?);
    }
    report_from_groups(&eval_groups, ks)
}

/// Builds the report for already-scored groups.
pub fn report_from_groups(eval_groups: &[EvalGroup], ks: &[usize]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(eval_groups.len());
    for g in eval_groups {
        let mut top_k = BTreeMap::new();
        for &k in ks {
            top_k.insert(k, top_k_score(std::slice::from_ref(g), k)?);
        }
        rows.push(GroupRow {
            workload: g.workload.clone(),
            subgraph: g.subgraph.clone(),
            weight: g.weight,
            top_k,
        });
    }
    let mut per_workload = BTreeMap::new();
    let workloads: std::collections::BTreeSet<&str> =
        eval_groups.iter().map(|g| g.workload.as_str()).collect();
    for wl in workloads {
        let subset: Vec<EvalGroup> = eval_groups
            .iter()
            .filter(|g| g.workload == wl)
            .cloned()
            .collect();
        let mut scores = BTreeMap::new();
        for &k in ks {
            scores.insert(k, top_k_score(&subset, k)?);
        }
        per_workload.insert(wl.to_string(), scores);
    }
    let mut aggregate = BTreeMap::new();
    for &k in ks {
        aggregate.insert(k, top_k_score(eval_groups, k)?);
    }
    Ok(EvalReport {
        ks: ks.to_vec(),
        rows,
        per_workload,
        aggregate,
    })
}

/// Featurizes one split of a store and evaluates a scorer over it.
pub fn evaluate_store(
    scorer: &dyn Scorer,
    store: &DatasetStore,
    split: Split,
    hardware: Option<&str>,
    cfg: &FeatureConfig,
    tt: &TokenTable,
    stats: &NormalizationStats,
    ks: &[usize],
) -> Result<EvalReport> {
    let groups = build_sample_groups(store, split, hardware, cfg, tt, stats)?;
    evaluate_sample_groups(scorer, &groups, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(latencies: &[f64], scores: &[f64], weight: f64) -> EvalGroup {
        let candidates: Vec<Candidate> = latencies
            .iter()
            .zip(scores)
            .map(|(&latency, &score)| Candidate { latency, score })
            .collect();
        EvalGroup::new("w", "s", weight, candidates).unwrap()
    }

    #[test]
    fn weighted_top1_follows_ranked_first() {
        // model ranks the latency-4 program first
        let g = group(&[2.0, 4.0, 8.0], &[0.2, 0.9, 0.1], 2.0);
        let score = top_k_score(&[g], 1).unwrap();
        assert!((score - 0.5).abs() < 1e-12);
    }

    #[test]
    fn top2_containing_best_reaches_one() {
        let g = group(&[2.0, 4.0, 8.0], &[0.5, 0.9, 0.1], 2.0);
        let score = top_k_score(&[g], 2).unwrap();
        assert!((score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_scores_one() {
        let groups = vec![
            group(&[3.0, 1.0, 2.0], &[0.1, 0.9, 0.5], 1.0),
            group(&[5.0, 7.0], &[0.8, 0.2], 3.0),
        ];
        assert!((top_k_score(&groups, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_clamps_to_group_size() {
        let g = group(&[4.0, 2.0, 8.0], &[0.9, 0.1, 0.5], 1.0);
        assert!((top_k_score(&[g], 10).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_break_ties_by_input_order() {
        let g = group(&[4.0, 2.0, 8.0], &[0.5, 0.5, 0.5], 1.0);
        // stable order keeps candidate 0 first
        assert!((top_k_score(&[g.clone()], 1).unwrap() - 2.0 / 4.0).abs() < 1e-12);
        assert!((top_k_score(&[g], 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_k() {
        let g = group(&[9.0, 3.0, 6.0, 1.0], &[0.4, 0.1, 0.9, 0.2], 1.0);
        let mut prev = 0.0;
        for k in 1..=4 {
            let s = top_k_score(std::slice::from_ref(&g), k).unwrap();
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn monotone_transform_leaves_score_unchanged() {
        let g = group(&[9.0, 3.0, 6.0, 1.0], &[0.4, 0.1, 0.9, 0.2], 1.0);
        let mut transformed = g.clone();
        for c in &mut transformed.candidates {
            c.score = (3.0 * c.score + 1.0).exp();
        }
        for k in 1..=4 {
            let a = top_k_score(std::slice::from_ref(&g), k).unwrap();
            let b = top_k_score(std::slice::from_ref(&transformed), k).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_scorer_expectation_matches_uniform_choice() {
        // single group of 3: expected top-1 of a random ranking is the mean
        // of min_latency/latency over candidates
        let latencies = [2.0, 4.0, 8.0];
        let expected: f64 = latencies.iter().map(|&l| 2.0 / l).sum::<f64>() / 3.0;
        let mut acc = 0.0;
        let trials = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..trials {
            let scores: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let g = group(&latencies, &scores, 1.0);
            acc += top_k_score(&[g], 1).unwrap();
        }
        let mean = acc / trials as f64;
        assert!(
            (mean - expected).abs() < 0.02,
            "monte carlo mean {mean} vs expected {expected}"
        );
    }
}
