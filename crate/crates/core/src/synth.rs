//! Synthetic subgraph templates and the seeded latency oracle that stands in
//! for hardware measurement.
//!
//! A template fixes the primitive types and argument domains of a subgraph's
//! search space. The oracle is log-linear over normalized numeric arguments
//! plus their within-primitive pairwise products; weights are keyed by
//! (primitive type, slot index) through a hash of the oracle seed, so they
//! are shared across subgraphs and a model can generalize to held-out
//! templates. Two oracles built on the same primary seed with correlation
//! rho see weight fields with correlation rho.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::primitive::{
    Arg, Primitive, PrimitiveSequence, PrimitiveTypeRegistry, TensorProgramRecord,
};

/// Domain of one template argument slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgDomain {
    /// Powers of two `2^min_exp ..= 2^max_exp` (tile sizes and the like).
    Pow2 { min_exp: u32, max_exp: u32 },
    /// Integers `lo ..= hi`.
    IntRange { lo: i64, hi: i64 },
    /// Loop-variable names drawn from a fixed pool.
    NamePool { pool: Vec<String> },
}

impl ArgDomain {
    pub fn is_numeric(&self) -> bool {
        !matches!(self, ArgDomain::NamePool { .. })
    }

    /// Number of distinct values in the domain.
    pub fn cardinality(&self) -> u128 {
        match self {
            ArgDomain::Pow2 { min_exp, max_exp } => (max_exp - min_exp + 1) as u128,
            ArgDomain::IntRange { lo, hi } => (hi - lo + 1) as u128,
            ArgDomain::NamePool { pool } => pool.len() as u128,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Arg {
        match self {
            ArgDomain::Pow2 { min_exp, max_exp } => {
                let e = rng.gen_range(*min_exp..=*max_exp);
                Arg::Number((1u64 << e) as f64)
            }
            ArgDomain::IntRange { lo, hi } => Arg::Number(rng.gen_range(*lo..=*hi) as f64),
            ArgDomain::NamePool { pool } => {
                Arg::Name(pool[rng.gen_range(0..pool.len())].clone())
            }
        }
    }

    pub fn contains(&self, arg: &Arg) -> bool {
        match (self, arg) {
            (ArgDomain::Pow2 { min_exp, max_exp }, Arg::Number(v)) => {
                (*min_exp..=*max_exp).any(|e| (1u64 << e) as f64 == *v)
            }
            (ArgDomain::IntRange { lo, hi }, Arg::Number(v)) => {
                v.fract() == 0.0 && *v >= *lo as f64 && *v <= *hi as f64
            }
            (ArgDomain::NamePool { pool }, Arg::Name(n)) => pool.iter().any(|p| p == n),
            _ => false,
        }
    }

    /// Maps a numeric value into [-1, 1] over the domain (log scale for
    /// power-of-two domains). Degenerate single-value domains map to 0.
    pub fn normalize(&self, value: f64) -> f64 {
        match self {
            ArgDomain::Pow2 { min_exp, max_exp } => {
                if max_exp == min_exp {
                    return 0.0;
                }
                let e = value.log2();
                let mid = (*min_exp as f64 + *max_exp as f64) / 2.0;
                let half = (*max_exp as f64 - *min_exp as f64) / 2.0;
                (e - mid) / half
            }
            ArgDomain::IntRange { lo, hi } => {
                if lo == hi {
                    return 0.0;
                }
                let mid = (*lo as f64 + *hi as f64) / 2.0;
                let half = (*hi as f64 - *lo as f64) / 2.0;
                (value - mid) / half
            }
            ArgDomain::NamePool { .. } => 0.0,
        }
    }

    /// One mutation step within the domain (clamped at the edges).
    pub fn mutate(&self, current: &Arg, rng: &mut ChaCha8Rng) -> Arg {
        match (self, current) {
            (ArgDomain::Pow2 { min_exp, max_exp }, Arg::Number(v)) => {
                let e = v.log2().round() as i64;
                let step: i64 = if rng.gen::<bool>() { 1 } else { -1 };
                let next = (e + step).clamp(*min_exp as i64, *max_exp as i64);
                Arg::Number((1u64 << next) as f64)
            }
            (ArgDomain::IntRange { lo, hi }, Arg::Number(v)) => {
                let step: i64 = if rng.gen::<bool>() { 1 } else { -1 };
                let next = ((*v as i64) + step).clamp(*lo, *hi);
                Arg::Number(next as f64)
            }
            _ => current.clone(),
        }
    }

    fn values(&self) -> Vec<Arg> {
        match self {
            ArgDomain::Pow2 { min_exp, max_exp } => (*min_exp..=*max_exp)
                .map(|e| Arg::Number((1u64 << e) as f64))
                .collect(),
            ArgDomain::IntRange { lo, hi } => {
                (*lo..=*hi).map(|v| Arg::Number(v as f64)).collect()
            }
            ArgDomain::NamePool { pool } => {
                pool.iter().map(|n| Arg::Name(n.clone())).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatePrimitive {
    pub type_name: String,
    pub slots: Vec<ArgDomain>,
}

/// One synthetic subgraph: a fixed primitive skeleton with per-slot domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSubgraph {
    pub id: String,
    pub workload: String,
    pub template: Vec<TemplatePrimitive>,
    pub oracle_seed: u64,
}

impl SyntheticSubgraph {
    pub fn sample(&self, registry: &PrimitiveTypeRegistry, rng: &mut ChaCha8Rng) -> Result<PrimitiveSequence> {
        let mut primitives = Vec::with_capacity(self.template.len());
        for tp in &self.template {
            let type_id = registry
                .index(&tp.type_name)
                .ok_or_else(|| Error::UnknownType(tp.type_name.clone()))?;
            let args = tp.slots.iter().map(|d| d.sample(rng)).collect();
            primitives.push(Primitive { type_id, args });
        }
        Ok(PrimitiveSequence::new(primitives))
    }

    /// Checks that a sequence was drawn from this template.
    pub fn validate_sequence(
        &self,
        registry: &PrimitiveTypeRegistry,
        seq: &PrimitiveSequence,
    ) -> Result<()> {
        if seq.len() != self.template.len() {
            return Err(Error::Validation(format!(
                "sequence has {} primitives, template `{}` has {}",
                seq.len(),
                self.id,
                self.template.len()
            )));
        }
        for (p, tp) in seq.primitives.iter().zip(&self.template) {
            let expected = registry
                .index(&tp.type_name)
                .ok_or_else(|| Error::UnknownType(tp.type_name.clone()))?;
            if p.type_id != expected {
                return Err(Error::Validation(format!(
                    "primitive type mismatch against template `{}`",
                    self.id
                )));
            }
            if p.args.len() != tp.slots.len() {
                return Err(Error::Validation(format!(
                    "argument count mismatch against template `{}`",
                    self.id
                )));
            }
            for (arg, dom) in p.args.iter().zip(&tp.slots) {
                if !dom.contains(arg) {
                    return Err(Error::Validation(format!(
                        "argument outside template domain in `{}`",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total number of sequences in the template's search space.
    pub fn cardinality(&self) -> u128 {
        self.template
            .iter()
            .flat_map(|tp| tp.slots.iter())
            .map(ArgDomain::cardinality)
            .product()
    }

    /// Walks every sequence of the search space in odometer order without
    /// materializing the space; errors when it exceeds `limit` points.
    pub fn for_each_sequence(
        &self,
        registry: &PrimitiveTypeRegistry,
        limit: usize,
        mut f: impl FnMut(&PrimitiveSequence),
    ) -> Result<()> {
        let card = self.cardinality();
        if card > limit as u128 {
            return Err(Error::Validation(format!(
                "template `{}` has {card} points, over the enumeration limit {limit}",
                self.id
            )));
        }
        // flat slot list with per-slot value sets
        let mut type_ids = Vec::with_capacity(self.template.len());
        let mut slot_values: Vec<Vec<Arg>> = Vec::new();
        let mut slot_owner: Vec<usize> = Vec::new();
        for (pi, tp) in self.template.iter().enumerate() {
            type_ids.push(
                registry
                    .index(&tp.type_name)
                    .ok_or_else(|| Error::UnknownType(tp.type_name.clone()))?,
            );
            for dom in &tp.slots {
                slot_values.push(dom.values());
                slot_owner.push(pi);
            }
        }
        let mut counters = vec![0usize; slot_values.len()];
        loop {
            let mut primitives: Vec<Primitive> = self
                .template
                .iter()
                .zip(&type_ids)
                .map(|(tp, &type_id)| Primitive {
                    type_id,
                    args: Vec::with_capacity(tp.slots.len()),
                })
                .collect();
            for ((&owner, values), &c) in
                slot_owner.iter().zip(&slot_values).zip(&counters)
            {
                primitives[owner].args.push(values[c].clone());
            }
            f(&PrimitiveSequence::new(primitives));

            // advance the odometer
            let mut pos = counters.len();
            loop {
                if pos == 0 {
                    return Ok(());
                }
                pos -= 1;
                counters[pos] += 1;
                if counters[pos] < slot_values[pos].len() {
                    break;
                }
                counters[pos] = 0;
            }
        }
    }

    /// Exhaustively enumerates the search space; errors when it exceeds
    /// `limit` points.
    pub fn enumerate(
        &self,
        registry: &PrimitiveTypeRegistry,
        limit: usize,
    ) -> Result<Vec<PrimitiveSequence>> {
        let mut seqs = Vec::new();
        self.for_each_sequence(registry, limit, |s| seqs.push(s.clone()))?;
        Ok(seqs)
    }
}

/// Deterministic log-linear latency oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracle {
    /// Seed of the shared weight field.
    pub primary_seed: u64,
    /// Seed of this oracle's private weight component.
    pub own_seed: u64,
    /// Mixing factor: `w = corr * w(primary) + sqrt(1-corr^2) * w(own)`.
    pub correlation: f64,
    pub linear_scale: f64,
    pub quad_scale: f64,
    /// Multiplicative log-normal noise factor; 0 disables noise.
    pub sigma: f64,
    /// Base latency in seconds per subgraph id.
    pub base_latency: BTreeMap<String, f64>,
}

fn hash_unit(seed: u64, tag: &str, type_name: &str, a: usize, b: usize) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update([0u8]);
    hasher.update(type_name.as_bytes());
    hasher.update((a as u32).to_le_bytes());
    hasher.update((b as u32).to_le_bytes());
    let h = hasher.finalize();
    let x = u64::from_le_bytes(h[..8].try_into().unwrap());
    (x as f64 / u64::MAX as f64) * 2.0 - 1.0
}

impl SyntheticOracle {
    /// Independent oracle (correlation structure unused).
    pub fn independent(seed: u64, sigma: f64) -> Self {
        Self {
            primary_seed: seed,
            own_seed: seed,
            correlation: 1.0,
            linear_scale: 0.35,
            quad_scale: 0.15,
            sigma,
            base_latency: BTreeMap::new(),
        }
    }

    /// Oracle whose weight field has correlation `rho` with `primary`'s.
    pub fn correlated(primary: &SyntheticOracle, own_seed: u64, rho: f64, sigma: f64) -> Self {
        Self {
            primary_seed: primary.primary_seed,
            own_seed,
            correlation: rho.clamp(0.0, 1.0),
            linear_scale: primary.linear_scale,
            quad_scale: primary.quad_scale,
            sigma,
            base_latency: primary.base_latency.clone(),
        }
    }

    fn weight(&self, tag: &str, type_name: &str, a: usize, b: usize, scale: f64) -> f64 {
        let w_primary = hash_unit(self.primary_seed, tag, type_name, a, b);
        if self.correlation >= 1.0 {
            return scale * w_primary;
        }
        let w_own = hash_unit(self.own_seed, tag, type_name, a, b);
        scale * (self.correlation * w_primary
            + (1.0 - self.correlation * self.correlation).sqrt() * w_own)
    }

    /// Log-scale contribution of one sequence under this oracle's weights.
    fn log_effect(&self, sub: &SyntheticSubgraph, seq: &PrimitiveSequence) -> f64 {
        let mut acc = 0.0;
        for (p, tp) in seq.primitives.iter().zip(&sub.template) {
            let mut normalized: Vec<(usize, f64)> = Vec::new();
            for (slot, (arg, dom)) in p.args.iter().zip(&tp.slots).enumerate() {
                if let (Arg::Number(v), true) = (arg, dom.is_numeric()) {
                    normalized.push((slot, dom.normalize(*v)));
                }
            }
            for &(slot, x) in &normalized {
                acc += self.weight("lin", &tp.type_name, slot, 0, self.linear_scale) * x;
            }
            for i in 0..normalized.len() {
                for j in (i + 1)..normalized.len() {
                    let (si, xi) = normalized[i];
                    let (sj, xj) = normalized[j];
                    acc += self.weight("quad", &tp.type_name, si, sj, self.quad_scale) * xi * xj;
                }
            }
        }
        acc
    }

    /// Latency in seconds for a sequence of `sub`'s template. Deterministic:
    /// the noise term is a pure function of (oracle, subgraph, sequence).
    pub fn latency(
        &self,
        sub: &SyntheticSubgraph,
        seq: &PrimitiveSequence,
        registry: &PrimitiveTypeRegistry,
    ) -> Result<f64> {
        sub.validate_sequence(registry, seq)?;
        let base = *self.base_latency.get(&sub.id).ok_or_else(|| {
            Error::Validation(format!("oracle has no base latency for `{}`", sub.id))
        })?;
        let mut latency = base * self.log_effect(sub, seq).exp();
        if self.sigma > 0.0 {
            let mut hasher = Sha256::new();
            hasher.update(self.own_seed.to_le_bytes());
            hasher.update(b"noise");
            hasher.update(sub.id.as_bytes());
            hasher.update(seq.digest());
            let h = hasher.finalize();
            let u1 = (u64::from_le_bytes(h[..8].try_into().unwrap()) as f64 + 1.0)
                / (u64::MAX as f64 + 2.0);
            let u2 = u64::from_le_bytes(h[8..16].try_into().unwrap()) as f64 / u64::MAX as f64;
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            latency *= (self.sigma * z).exp();
        }
        Ok(latency)
    }

    /// Brute-force minimum over an enumerable template (streamed).
    pub fn brute_force_optimum(
        &self,
        sub: &SyntheticSubgraph,
        registry: &PrimitiveTypeRegistry,
        limit: usize,
    ) -> Result<(PrimitiveSequence, f64)> {
        let mut best: Option<(PrimitiveSequence, f64)> = None;
        let mut failure = None;
        sub.for_each_sequence(registry, limit, |seq| {
            if failure.is_some() {
                return;
            }
            match self.latency(sub, seq, registry) {
                Ok(lat) => match &best {
                    Some((_, b)) if *b <= lat => {}
                    _ => best = Some((seq.clone(), lat)),
                },
                Err(e) => failure = Some(e),
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        best.ok_or_else(|| Error::Validation("empty template".into()))
    }
}

/// A bundle of synthetic subgraphs plus one oracle per hardware platform,
/// serializable as the workload-spec JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorkload {
    pub subgraphs: Vec<SyntheticSubgraph>,
    pub oracles: BTreeMap<String, SyntheticOracle>,
}

impl SyntheticWorkload {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Knobs for synthetic workload generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subgraphs: usize,
    pub workloads: usize,
    pub min_primitives: usize,
    pub max_primitives: usize,
    /// Numeric slots per primitive are drawn from 1..=this.
    pub max_numeric_slots: usize,
    pub name_pool: Vec<String>,
    /// Hardware platforms; the first is the weight-field anchor, later ones
    /// are correlated with it.
    pub hardware: Vec<String>,
    pub correlation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subgraphs: 50,
            workloads: 5,
            min_primitives: 3,
            max_primitives: 10,
            max_numeric_slots: 3,
            name_pool: (0..6).map(|i| format!("i{i}")).collect(),
            hardware: vec!["hw_a".to_string()],
            correlation: 0.9,
            sigma: 0.0,
            seed: 0,
        }
    }
}

/// Generates templates and per-hardware oracles from one seed.
pub fn generate_workload(
    cfg: &SynthConfig,
    registry: &PrimitiveTypeRegistry,
) -> Result<SyntheticWorkload> {
    if cfg.hardware.is_empty() {
        return Err(Error::Config("at least one hardware platform".into()));
    }
    if cfg.min_primitives == 0 || cfg.min_primitives > cfg.max_primitives {
        return Err(Error::Config("bad primitive count range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut subgraphs = Vec::with_capacity(cfg.subgraphs);
    let mut base_latency = BTreeMap::new();
    for i in 0..cfg.subgraphs {
        let workload = format!("wl{}", i % cfg.workloads.max(1));
        let n_prims = rng.gen_range(cfg.min_primitives..=cfg.max_primitives);
        let mut template = Vec::with_capacity(n_prims);
        for _ in 0..n_prims {
            let type_name = registry.names()[rng.gen_range(0..registry.len())].clone();
            let n_numeric = rng.gen_range(1..=cfg.max_numeric_slots);
            let mut slots = Vec::new();
            for _ in 0..n_numeric {
                if rng.gen::<f64>() < 0.7 {
                    slots.push(ArgDomain::Pow2 {
                        min_exp: 0,
                        max_exp: 6,
                    });
                } else {
                    slots.push(ArgDomain::IntRange { lo: 1, hi: 8 });
                }
            }
            if !cfg.name_pool.is_empty() && rng.gen::<f64>() < 0.5 {
                slots.push(ArgDomain::NamePool {
                    pool: cfg.name_pool.clone(),
                });
            }
            template.push(TemplatePrimitive { type_name, slots });
        }
        let id = format!("sg{i:03}");
        // base latency log-uniform in [1e-4, 1e-2] seconds
        let base = 10f64.powf(rng.gen_range(-4.0..-2.0));
        base_latency.insert(id.clone(), base);
        subgraphs.push(SyntheticSubgraph {
            id,
            workload,
            template,
            oracle_seed: cfg.seed.wrapping_add(i as u64),
        });
    }

    let mut oracles = BTreeMap::new();
    let mut primary = SyntheticOracle::independent(cfg.seed, cfg.sigma);
    primary.base_latency = base_latency;
    for (h, hw) in cfg.hardware.iter().enumerate() {
        let oracle = if h == 0 {
            primary.clone()
        } else {
            let mut o = SyntheticOracle::correlated(
                &primary,
                cfg.seed.wrapping_add(0x9e37_79b9).wrapping_add(h as u64),
                cfg.correlation,
                cfg.sigma,
            );
            // hardware-specific base offsets
            let mut hw_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (h as u64) << 32);
            for base in o.base_latency.values_mut() {
                *base *= (hw_rng.gen_range(-0.3..0.3) as f64).exp();
            }
            o
        };
        oracles.insert(hw.clone(), oracle);
    }
    Ok(SyntheticWorkload {
        subgraphs,
        oracles,
    })
}

/// Samples labeled records for one hardware platform: `candidates` sequences
/// per subgraph, measured through that hardware's oracle.
pub fn sample_records(
    workload: &SyntheticWorkload,
    hardware_id: &str,
    registry: &PrimitiveTypeRegistry,
    candidates: usize,
    seed: u64,
) -> Result<Vec<TensorProgramRecord>> {
    let oracle = workload
        .oracles
        .get(hardware_id)
        .ok_or_else(|| Error::Validation(format!("no oracle for hardware `{hardware_id}`")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(workload.subgraphs.len() * candidates);
    for sub in &workload.subgraphs {
        for _ in 0..candidates {
            let seq = sub.sample(registry, &mut rng)?;
            let latency = oracle.latency(sub, &seq, registry)?;
            records.push(TensorProgramRecord {
                subgraph_id: sub.id.clone(),
                workload: sub.workload.clone(),
                hardware_id: hardware_id.to_string(),
                latency,
                sequence: seq,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> PrimitiveTypeRegistry {
        PrimitiveTypeRegistry::default()
    }

    fn tiny_subgraph() -> SyntheticSubgraph {
        SyntheticSubgraph {
            id: "sg0".into(),
            workload: "wl0".into(),
            template: vec![
                TemplatePrimitive {
                    type_name: "SP".into(),
                    slots: vec![
                        ArgDomain::Pow2 { min_exp: 0, max_exp: 3 },
                        ArgDomain::NamePool { pool: vec!["i0".into(), "i1".into()] },
                    ],
                },
                TemplatePrimitive {
                    type_name: "AN".into(),
                    slots: vec![ArgDomain::IntRange { lo: 1, hi: 4 }],
                },
            ],
            oracle_seed: 1,
        }
    }

    fn oracle_for(sub: &SyntheticSubgraph, sigma: f64) -> SyntheticOracle {
        let mut o = SyntheticOracle::independent(7, sigma);
        o.base_latency.insert(sub.id.clone(), 1e-3);
        o
    }

    #[test]
    fn zero_weights_mean_base_latency() {
        let sub = tiny_subgraph();
        let mut oracle = oracle_for(&sub, 0.0);
        oracle.linear_scale = 0.0;
        oracle.quad_scale = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let seq = sub.sample(&registry(), &mut rng).unwrap();
            let lat = oracle.latency(&sub, &seq, &registry()).unwrap();
            assert!((lat - 1e-3).abs() < 1e-18);
        }
    }

    #[test]
    fn latency_is_deterministic_even_with_noise() {
        let sub = tiny_subgraph();
        let oracle = oracle_for(&sub, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = sub.sample(&registry(), &mut rng).unwrap();
        let a = oracle.latency(&sub, &seq, &registry()).unwrap();
        let b = oracle.latency(&sub, &seq, &registry()).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn sequence_outside_template_is_rejected() {
        let sub = tiny_subgraph();
        let oracle = oracle_for(&sub, 0.0);
        let reg = registry();
        let bad = PrimitiveSequence::new(vec![Primitive {
            type_id: reg.index("SP").unwrap(),
            args: vec![Arg::Number(3.0), Arg::Name("i0".into())],
        }]);
        assert!(oracle.latency(&sub, &bad, &reg).is_err());
    }

    #[test]
    fn enumeration_matches_cardinality_and_contains_optimum() {
        let sub = tiny_subgraph();
        let oracle = oracle_for(&sub, 0.0);
        let reg = registry();
        assert_eq!(sub.cardinality(), 4 * 2 * 4);
        let all = sub.enumerate(&reg, 100).unwrap();
        assert_eq!(all.len(), 32);
        let (best_seq, best) = oracle.brute_force_optimum(&sub, &reg, 100).unwrap();
        for seq in &all {
            assert!(oracle.latency(&sub, seq, &reg).unwrap() >= best - 1e-18);
        }
        assert_eq!(oracle.latency(&sub, &best_seq, &reg).unwrap(), best);
    }

    #[test]
    fn samples_stay_in_domain_and_are_seeded() {
        let sub = tiny_subgraph();
        let reg = registry();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let sa = sub.sample(&reg, &mut a).unwrap();
            let sb = sub.sample(&reg, &mut b).unwrap();
            assert_eq!(sa, sb);
            sub.validate_sequence(&reg, &sa).unwrap();
        }
    }

    #[test]
    fn correlated_oracles_share_structure() {
        // enough numeric slots that sample correlations concentrate
        let types = ["SP", "RE", "FU", "FSP", "CA", "AN", "RF", "PR"];
        let sub = SyntheticSubgraph {
            id: "sg_corr".into(),
            workload: "wl0".into(),
            template: types
                .iter()
                .map(|t| TemplatePrimitive {
                    type_name: (*t).into(),
                    slots: vec![
                        ArgDomain::Pow2 { min_exp: 0, max_exp: 6 },
                        ArgDomain::Pow2 { min_exp: 0, max_exp: 6 },
                        ArgDomain::IntRange { lo: 1, hi: 8 },
                    ],
                })
                .collect(),
            oracle_seed: 11,
        };
        let mut primary = SyntheticOracle::independent(11, 0.0);
        primary.base_latency.insert(sub.id.clone(), 1e-3);
        let twin = SyntheticOracle::correlated(&primary, 999, 0.95, 0.0);
        let indep = SyntheticOracle::correlated(&primary, 999, 0.0, 0.0);
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut corr_close = 0.0;
        let mut corr_far = 0.0;
        let n = 200;
        let mut effects = Vec::new();
        for _ in 0..n {
            let seq = sub.sample(&reg, &mut rng).unwrap();
            let a = primary.latency(&sub, &seq, &reg).unwrap().ln();
            let b = twin.latency(&sub, &seq, &reg).unwrap().ln();
            let c = indep.latency(&sub, &seq, &reg).unwrap().ln();
            effects.push((a, b, c));
        }
        let mean = |f: &dyn Fn(&(f64, f64, f64)) -> f64| {
            effects.iter().map(f).sum::<f64>() / n as f64
        };
        let ma = mean(&|e| e.0);
        let mb = mean(&|e| e.1);
        let mc = mean(&|e| e.2);
        let mut va = 0.0;
        let mut vb = 0.0;
        let mut vc = 0.0;
        for e in &effects {
            va += (e.0 - ma) * (e.0 - ma);
            vb += (e.1 - mb) * (e.1 - mb);
            vc += (e.2 - mc) * (e.2 - mc);
            corr_close += (e.0 - ma) * (e.1 - mb);
            corr_far += (e.0 - ma) * (e.2 - mc);
        }
        let rho_close = corr_close / (va.sqrt() * vb.sqrt());
        let rho_far = corr_far / (va.sqrt() * vc.sqrt());
        assert!(rho_close > 0.8, "twin correlation {rho_close}");
        assert!(rho_far.abs() < 0.5, "independent correlation {rho_far}");
    }

    #[test]
    fn generated_workload_is_reproducible() {
        let cfg = SynthConfig {
            subgraphs: 6,
            workloads: 2,
            hardware: vec!["hw_a".into(), "hw_b".into()],
            ..SynthConfig::default()
        };
        let reg = registry();
        let a = generate_workload(&cfg, &reg).unwrap();
        let b = generate_workload(&cfg, &reg).unwrap();
        assert_eq!(a, b);
        let ra = sample_records(&a, "hw_a", &reg, 5, 3).unwrap();
        let rb = sample_records(&b, "hw_a", &reg, 5, 3).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 30);
    }
}
