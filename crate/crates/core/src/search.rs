//! Round-based tuning loop: candidate generation, genetic evolution,
//! cost-model ranking, and oracle measurement with an exact budget.
//!
//! Each round tunes one subgraph (round-robin), ranks a candidate pool with
//! the cost model, and measures the top unmeasured candidates through the
//! synthetic oracle. A candidate is never measured twice; re-measure
//! attempts draw the next-ranked candidate.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::featurize::{apply_normalization, extract_features, FeatureMatrix};
use crate::model::CostModel;
use crate::primitive::{PrimitiveSequence, PrimitiveTypeRegistry};
use crate::synth::{SyntheticOracle, SyntheticSubgraph};

/// Scores candidate sequences for one subgraph; higher is better.
pub trait SequenceScorer {
    fn score_sequences(
        &self,
        sub: &SyntheticSubgraph,
        seqs: &[PrimitiveSequence],
    ) -> Result<Vec<f64>>;
}

/// Scores through a trained cost model using the model's own featurization.
pub struct ModelScorer<'a> {
    pub model: &'a CostModel,
}

impl SequenceScorer for ModelScorer<'_> {
    fn score_sequences(
        &self,
        _sub: &SyntheticSubgraph,
        seqs: &[PrimitiveSequence],
    ) -> Result<Vec<f64>> {
        let feats: Result<Vec<FeatureMatrix>> = seqs
            .iter()
            .map(|s| {
                extract_features(s, &self.model.feature, &self.model.token_table)
                    .and_then(|m| apply_normalization(&m, &self.model.normalization))
            })
            .collect();
        let feats = feats?;
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();
        self.model.score_batch(&refs)
    }
}

/// Cheating baseline: scores with the true oracle (negated latency).
pub struct OracleScorer<'a> {
    pub oracle: &'a SyntheticOracle,
    pub registry: &'a PrimitiveTypeRegistry,
}

impl SequenceScorer for OracleScorer<'_> {
    fn score_sequences(
        &self,
        sub: &SyntheticSubgraph,
        seqs: &[PrimitiveSequence],
    ) -> Result<Vec<f64>> {
        seqs.iter()
            .map(|s| self.oracle.latency(sub, s, self.registry).map(|l| -l))
            .collect()
    }
}

/// Random scores; turns the tuner into random search.
pub struct RandomSequenceScorer {
    rng: RefCell<ChaCha8Rng>,
}

impl RandomSequenceScorer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl SequenceScorer for RandomSequenceScorer {
    fn score_sequences(
        &self,
        _sub: &SyntheticSubgraph,
        seqs: &[PrimitiveSequence],
    ) -> Result<Vec<f64>> {
        let mut rng = self.rng.borrow_mut();
        Ok((0..seqs.len()).map(|_| rng.gen::<f64>()).collect())
    }
}

/// Seeded template samples.
pub fn generate_initial(
    sub: &SyntheticSubgraph,
    registry: &PrimitiveTypeRegistry,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PrimitiveSequence>> {
    (0..n).map(|_| sub.sample(registry, rng)).collect()
}

#[derive(Debug, Clone)]
pub struct EvolveParams {
    /// Per-numeric-slot mutation probability.
    pub mutation_rate: f64,
    /// Probability that an offspring is a two-parent crossover.
    pub crossover_rate: f64,
}

impl Default for EvolveParams {
    fn default() -> Self {
        Self {
            mutation_rate: 0.3,
            crossover_rate: 0.5,
        }
    }
}

fn select_parent(cumulative: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total = *cumulative.last().unwrap();
    let draw = rng.gen::<f64>() * total;
    match cumulative.partition_point(|&c| c <= draw) {
        i if i >= cumulative.len() => cumulative.len() - 1,
        i => i,
    }
}

/// One generation of offspring: fitness-proportional parent selection,
/// crossover at primitive boundaries, single-step numeric mutation. Every
/// offspring stays inside the template's domains by construction.
pub fn evolve(
    sub: &SyntheticSubgraph,
    population: &[PrimitiveSequence],
    scores: &[f64],
    params: &EvolveParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PrimitiveSequence>> {
    if population.is_empty() {
        return Ok(Vec::new());
    }
    if population.len() != scores.len() {
        return Err(Error::Validation(
            "population and scores must have equal lengths".into(),
        ));
    }
    let min = scores.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let span = max - min;
    let floor = if span > 0.0 { span * 0.01 } else { 1.0 };
    let mut cumulative = Vec::with_capacity(scores.len());
    let mut acc = 0.0;
    for &s in scores {
        acc += (s - min) + floor;
        cumulative.push(acc);
    }

    let mut offspring = Vec::with_capacity(population.len());
    for _ in 0..population.len() {
        let a = select_parent(&cumulative, rng);
        let mut child = if rng.gen::<f64>() < params.crossover_rate && sub.template.len() >= 2 {
            let b = select_parent(&cumulative, rng);
            let cut = rng.gen_range(1..sub.template.len());
            let mut prims = population[a].primitives[..cut].to_vec();
            prims.extend_from_slice(&population[b].primitives[cut..]);
            PrimitiveSequence::new(prims)
        } else {
            population[a].clone()
        };
        for (p, tp) in child.primitives.iter_mut().zip(&sub.template) {
            for (arg, dom) in p.args.iter_mut().zip(&tp.slots) {
                if dom.is_numeric() && rng.gen::<f64>() < params.mutation_rate {
                    *arg = dom.mutate(arg, rng);
                }
            }
        }
        offspring.push(child);
    }
    Ok(offspring)
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub subgraph: String,
    /// Cumulative oracle measurements after this round.
    pub measurements: u64,
    /// Best measured latency of this round's subgraph so far.
    pub subgraph_best: f64,
    /// Workload objective: sum of per-subgraph bests; infinite until every
    /// subgraph has been measured at least once.
    pub best_latency: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TuningTrajectory {
    pub rounds: Vec<RoundRecord>,
    pub total_measurements: u64,
    pub best_per_subgraph: BTreeMap<String, f64>,
}

impl TuningTrajectory {
    /// `round,measurements,best_latency` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,measurements,best_latency\n");
        for r in &self.rounds {
            out.push_str(&format!("{},{},{}\n", r.round, r.measurements, r.best_latency));
        }
        out
    }

    /// Cumulative measurements when the workload objective first reached
    /// `target`, if it ever did.
    pub fn measurements_to_reach(&self, target: f64) -> Option<u64> {
        self.rounds
            .iter()
            .find(|r| r.best_latency <= target)
            .map(|r| r.measurements)
    }

    /// Per-subgraph measurements spent when that subgraph's best first
    /// reached `target`.
    pub fn subgraph_measurements_to_reach(&self, subgraph: &str, target: f64) -> Option<u64> {
        let mut spent = 0u64;
        let mut prev_total = 0u64;
        for r in &self.rounds {
            let in_round = r.measurements - prev_total;
            prev_total = r.measurements;
            if r.subgraph == subgraph {
                spent += in_round;
                if r.subgraph_best <= target {
                    return Some(spent);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct TuneOptions {
    pub rounds: usize,
    pub measure_per_round: usize,
    /// Candidate pool size per round.
    pub pool: usize,
    /// Genetic-algorithm iterations per round.
    pub evolve_iters: usize,
    pub evolve: EvolveParams,
    pub seed: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            rounds: 200,
            measure_per_round: 10,
            pool: 512,
            evolve_iters: 4,
            evolve: EvolveParams::default(),
            seed: 0,
        }
    }
}

struct SubgraphState {
    measured: BTreeMap<[u8; 32], f64>,
    best: f64,
    best_measured_seqs: Vec<(f64, PrimitiveSequence)>,
    /// top of the previous visit's evolved population
    carryover: Vec<PrimitiveSequence>,
}

/// Runs `rounds` tuning rounds over the workload, one subgraph per round in
/// round-robin order. With a zero-noise oracle the whole run is
/// reproducible from the seed tuple (workload, oracle, scorer, options).
pub fn tune(
    subgraphs: &[SyntheticSubgraph],
    registry: &PrimitiveTypeRegistry,
    scorer: &dyn SequenceScorer,
    oracle: &SyntheticOracle,
    opts: &TuneOptions,
) -> Result<TuningTrajectory> {
    if subgraphs.is_empty() {
        return Err(Error::Validation("empty workload".into()));
    }
    if opts.measure_per_round == 0 || opts.pool == 0 {
        return Err(Error::Config("measure_per_round and pool must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut states: BTreeMap<&str, SubgraphState> = subgraphs
        .iter()
        .map(|s| {
            (
                s.id.as_str(),
                SubgraphState {
                    measured: BTreeMap::new(),
                    best: f64::INFINITY,
                    best_measured_seqs: Vec::new(),
                    carryover: Vec::new(),
                },
            )
        })
        .collect();

    let mut rounds = Vec::with_capacity(opts.rounds);
    let mut total_measurements = 0u64;

    for round in 0..opts.rounds {
        let sub = &subgraphs[round % subgraphs.len()];

        // seed the pool with the best measured sequences and the previous
        // visit's evolved population, fill with fresh samples
        let mut pool: Vec<PrimitiveSequence> = Vec::with_capacity(opts.pool);
        {
            let state = &states[sub.id.as_str()];
            let keep = opts.pool / 4;
            for (_, seq) in state.best_measured_seqs.iter().take(keep) {
                pool.push(seq.clone());
            }
            for seq in state.carryover.iter().take(keep) {
                pool.push(seq.clone());
            }
            let mut seen = std::collections::HashSet::new();
            pool.retain(|s| seen.insert(s.digest()));
        }
        while pool.len() < opts.pool {
            pool.push(sub.sample(registry, &mut rng)?);
        }

        // evolve and prune by model score
        let mut scores = scorer.score_sequences(sub, &pool)?;
        for _ in 0..opts.evolve_iters {
            let children = evolve(sub, &pool, &scores, &opts.evolve, &mut rng)?;
            pool.extend(children);
            // dedup, keep first occurrence
            let mut seen = std::collections::HashSet::new();
            pool.retain(|s| seen.insert(s.digest()));
            scores = scorer.score_sequences(sub, &pool)?;
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            order.truncate(opts.pool);
            pool = order.iter().map(|&i| pool[i].clone()).collect();
            scores = order.iter().map(|&i| scores[i]).collect();
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

        // measure the top unmeasured candidates
        let state = states.get_mut(sub.id.as_str()).unwrap();
        let mut measured_now = 0usize;
        for &i in &order {
            if measured_now >= opts.measure_per_round {
                break;
            }
            let digest = pool[i].digest();
            if state.measured.contains_key(&digest) {
                continue;
            }
            let latency = oracle.latency(sub, &pool[i], registry)?;
            state.measured.insert(digest, latency);
            state.best_measured_seqs.push((latency, pool[i].clone()));
            if latency < state.best {
                state.best = latency;
            }
            measured_now += 1;
            total_measurements += 1;
        }
        state
            .best_measured_seqs
            .sort_by(|a, b| a.0.total_cmp(&b.0));
        state.best_measured_seqs.truncate(opts.pool / 4 + 1);
        state.carryover = order
            .iter()
            .take(opts.pool / 4)
            .map(|&i| pool[i].clone())
            .collect();

        let workload_best = if states.values().all(|s| s.best.is_finite()) {
            states.values().map(|s| s.best).sum()
        } else {
            f64::INFINITY
        };
        rounds.push(RoundRecord {
            round: round + 1,
            subgraph: sub.id.clone(),
            measurements: total_measurements,
            subgraph_best: states[sub.id.as_str()].best,
            best_latency: workload_best,
        });
    }

    let best_per_subgraph = states
        .into_iter()
        .map(|(id, s)| (id.to_string(), s.best))
        .collect();
    Ok(TuningTrajectory {
        rounds,
        total_measurements,
        best_per_subgraph,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedupReport {
    /// `measurements_b / measurements_a`; infinite when only `a` reaches the
    /// target, zero when only `b` does.
    pub ratio: f64,
    pub a_measurements: Option<u64>,
    pub b_measurements: Option<u64>,
}

/// Measurement-count ratio for reaching a target workload latency.
pub fn search_speedup(
    a: &TuningTrajectory,
    b: &TuningTrajectory,
    target: f64,
) -> Result<SpeedupReport> {
    let ma = a.measurements_to_reach(target);
    let mb = b.measurements_to_reach(target);
    match (ma, mb) {
        (None, None) => Err(Error::Validation(
            "target is below both trajectories' best latency".into(),
        )),
        (Some(x), Some(y)) => Ok(SpeedupReport {
            ratio: y as f64 / x as f64,
            a_measurements: Some(x),
            b_measurements: Some(y),
        }),
        (Some(x), None) => Ok(SpeedupReport {
            ratio: f64::INFINITY,
            a_measurements: Some(x),
            b_measurements: None,
        }),
        (None, Some(y)) => Ok(SpeedupReport {
            ratio: 0.0,
            a_measurements: None,
            b_measurements: Some(y),
        }),
    }
}
