//! Genetic algorithm over fixed-length binary genotypes.
//!
//! Selection is elite-plus-roulette: the `elite_count` fittest members are
//! carried over unchanged and every other slot is filled by a child of two
//! fitness-proportionally selected parents (crossover, then per-bit
//! mutation). All randomness comes from one seeded ChaCha stream, and every
//! draw for a generation happens before any fitness is evaluated, so the
//! trajectory depends only on the seed even when evaluations run
//! concurrently.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::par;

/// Binary block mask. Bit `i` set means block `i + 1` is trainable.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Genotype {
    bits: Vec<bool>,
}

impl Genotype {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Config("genotype length must be at least 1".into()));
        }
        Ok(Genotype { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Genotype {
            bits: vec![false; len.max(1)],
        }
    }

    pub fn ones(len: usize) -> Self {
        Genotype {
            bits: vec![true; len.max(1)],
        }
    }

    /// Genotype with only block `block_id` (1-based) set.
    pub fn one_hot(len: usize, block_id: usize) -> Result<Self> {
        if block_id == 0 || block_id > len {
            return Err(Error::Contract(format!(
                "block id {block_id} outside 1..={len}"
            )));
        }
        let mut g = Genotype::zeros(len);
        g.bits[block_id - 1] = true;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    /// Selected block ids, 1-based.
    pub fn selected_blocks(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn complement(&self) -> Self {
        Genotype {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Genotype({self})")
    }
}

impl FromStr for Genotype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("invalid genotype bit {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Genotype::new(bits)
    }
}

impl Serialize for Genotype {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Genotype {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    genotype: Genotype,
    fitness: Option<f64>,
}

impl Individual {
    pub fn unevaluated(genotype: Genotype) -> Self {
        Individual {
            genotype,
            fitness: None,
        }
    }

    pub fn evaluated(genotype: Genotype, fitness: f64) -> Self {
        Individual {
            genotype,
            fitness: Some(fitness),
        }
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn fitness(&self) -> Option<f64> {
        self.fitness
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub members: Vec<Individual>,
    pub generation: usize,
}

impl Population {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn fitnesses(&self) -> Result<Vec<f64>> {
        self.members
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m.fitness.ok_or_else(|| {
                    Error::Protocol(format!("member {i} ({}) is unevaluated", m.genotype))
                })
            })
            .collect()
    }

    /// Member indices sorted by descending fitness, lower index first on ties.
    fn ranking(&self) -> Result<Vec<usize>> {
        let fit = self.fitnesses()?;
        let mut idx: Vec<usize> = (0..fit.len()).collect();
        idx.sort_by(|&a, &b| fit[b].total_cmp(&fit[a]).then(a.cmp(&b)));
        Ok(idx)
    }

    /// Fittest member; ties go to the lower index.
    pub fn best(&self) -> Result<&Individual> {
        let r = self.ranking()?;
        Ok(&self.members[r[0]])
    }

    pub fn mean_fitness(&self) -> Result<f64> {
        let fit = self.fitnesses()?;
        Ok(fit.iter().sum::<f64>() / fit.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossoverKind {
    #[default]
    Uniform,
    OnePoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population_size: usize,
    pub mutation_rate: f64,
    pub elite_count: usize,
    pub generations: usize,
    pub seed: u64,
    pub crossover: CrossoverKind,
    /// Stop as soon as some individual reaches fitness 1.0.
    pub early_stop: bool,
    /// Evaluate a generation's children concurrently when the fitness
    /// function declares itself stateless.
    pub parallel_fitness: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population_size: 7,
            mutation_rate: 0.01,
            elite_count: 1,
            generations: 100,
            seed: 0,
            crossover: CrossoverKind::Uniform,
            early_stop: true,
            parallel_fitness: false,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::Config(format!(
                "population_size must be at least 2, got {}",
                self.population_size
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::Config(format!(
                "mutation_rate must lie in [0, 1], got {}",
                self.mutation_rate
            )));
        }
        if self.elite_count < 1 || self.elite_count >= self.population_size {
            return Err(Error::Config(format!(
                "elite_count must satisfy 1 <= elite_count < population_size, got {}",
                self.elite_count
            )));
        }
        if self.generations < 1 {
            return Err(Error::Config("generations must be positive".into()));
        }
        Ok(())
    }
}

/// Maps a genotype to a fitness in `[0, 1]`.
pub trait FitnessFn: Sync {
    fn evaluate(&self, genotype: &Genotype) -> Result<f64>;

    /// True when concurrent calls cannot observe each other.
    fn is_stateless(&self) -> bool {
        false
    }
}

impl<F> FitnessFn for F
where
    F: Fn(&Genotype) -> Result<f64> + Sync,
{
    fn evaluate(&self, genotype: &Genotype) -> Result<f64> {
        self(genotype)
    }
}

/// Wrapper declaring a closure stateless.
pub struct Stateless<F>(pub F);

impl<F> FitnessFn for Stateless<F>
where
    F: Fn(&Genotype) -> Result<f64> + Sync,
{
    fn evaluate(&self, genotype: &Genotype) -> Result<f64> {
        (self.0)(genotype)
    }

    fn is_stateless(&self) -> bool {
        true
    }
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn init_population<R: Rng + ?Sized>(
    config: &GaConfig,
    num_blocks: usize,
    rng: &mut R,
) -> Result<Population> {
    if num_blocks < 1 {
        return Err(Error::Config("number of blocks must be at least 1".into()));
    }
    if config.population_size < 2 {
        return Err(Error::Config(format!(
            "population_size must be at least 2, got {}",
            config.population_size
        )));
    }
    let members = (0..config.population_size)
        .map(|_| {
            let bits = (0..num_blocks).map(|_| rng.random::<bool>()).collect();
            Individual::unevaluated(Genotype { bits })
        })
        .collect();
    Ok(Population {
        members,
        generation: 0,
    })
}

/// Index of a fitness-proportionally selected member; uniform when every
/// fitness is zero.
pub fn roulette_index<R: Rng + ?Sized>(population: &Population, rng: &mut R) -> Result<usize> {
    let fit = population.fitnesses()?;
    if fit.is_empty() {
        return Err(Error::Protocol("cannot select from an empty population".into()));
    }
    let total: f64 = fit.iter().sum();
    if total <= 0.0 {
        return Ok(rng.random_range(0..fit.len()));
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, f) in fit.iter().enumerate() {
        if *f > 0.0 {
            last_positive = i;
        }
        acc += f;
        if target < acc {
            return Ok(i);
        }
    }
    Ok(last_positive)
}

pub fn roulette_select<'a, R: Rng + ?Sized>(
    population: &'a Population,
    rng: &mut R,
) -> Result<&'a Individual> {
    let i = roulette_index(population, rng)?;
    Ok(&population.members[i])
}

pub fn crossover<R: Rng + ?Sized>(
    p1: &Genotype,
    p2: &Genotype,
    kind: CrossoverKind,
    rng: &mut R,
) -> Result<Genotype> {
    if p1.len() != p2.len() {
        return Err(Error::Contract(format!(
            "crossover parents differ in length: {} vs {}",
            p1.len(),
            p2.len()
        )));
    }
    let n = p1.len();
    let bits = match kind {
        CrossoverKind::Uniform => (0..n)
            .map(|i| if rng.random::<bool>() { p1.bits[i] } else { p2.bits[i] })
            .collect(),
        CrossoverKind::OnePoint => {
            if n < 2 {
                p1.bits.clone()
            } else {
                let cut = rng.random_range(1..n);
                p1.bits[..cut]
                    .iter()
                    .chain(&p2.bits[cut..])
                    .copied()
                    .collect()
            }
        }
    };
    Ok(Genotype { bits })
}

pub fn mutate<R: Rng + ?Sized>(genotype: &Genotype, rate: f64, rng: &mut R) -> Genotype {
    let bits = genotype
        .bits
        .iter()
        .map(|b| if rng.random::<f64>() < rate { !b } else { *b })
        .collect();
    Genotype { bits }
}

/// Per-run memo of evaluated genotypes.
pub type FitnessCache = BTreeMap<Genotype, f64>;

/// Fills in every unevaluated member, consulting and extending `cache`.
/// Results are merged in member order whatever the dispatch mode.
pub fn evaluate_population(
    population: &mut Population,
    fitness: &dyn FitnessFn,
    cache: &mut FitnessCache,
    parallel: bool,
) -> Result<()> {
    let mut pending: Vec<Genotype> = Vec::new();
    for m in &population.members {
        if m.fitness.is_none() && !cache.contains_key(&m.genotype) && !pending.contains(&m.genotype)
        {
            pending.push(m.genotype.clone());
        }
    }

    let eval = |g: &Genotype| -> Result<f64> {
        let f = fitness.evaluate(g).map_err(|e| Error::Fitness {
            genotype: g.to_string(),
            source: Box::new(e),
        })?;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Fitness {
                genotype: g.to_string(),
                source: Box::new(Error::Contract(format!("fitness {f} outside [0, 1]"))),
            });
        }
        Ok(f)
    };

    let results: Vec<Result<f64>> = if parallel && fitness.is_stateless() {
        par::map_slice(&pending, eval)
    } else {
        let mut out = Vec::with_capacity(pending.len());
        for g in &pending {
            let r = eval(g);
            let failed = r.is_err();
            out.push(r);
            if failed {
                break;
            }
        }
        out
    };
    for (g, r) in pending.into_iter().zip(results) {
        cache.insert(g, r?);
    }
    for m in &mut population.members {
        if m.fitness.is_none() {
            m.fitness = Some(cache[&m.genotype]);
        }
    }
    Ok(())
}

/// Builds, evaluates and returns the next generation.
pub fn step_generation<R: Rng + ?Sized>(
    population: &Population,
    config: &GaConfig,
    fitness: &dyn FitnessFn,
    cache: &mut FitnessCache,
    rng: &mut R,
) -> Result<Population> {
    config.validate()?;
    if population.len() != config.population_size {
        return Err(Error::Protocol(format!(
            "population has {} members, expected {}",
            population.len(),
            config.population_size
        )));
    }
    let ranking = population.ranking()?;
    let mut members: Vec<Individual> = ranking[..config.elite_count]
        .iter()
        .map(|&i| population.members[i].clone())
        .collect();
    while members.len() < config.population_size {
        let a = roulette_index(population, rng)?;
        let b = roulette_index(population, rng)?;
        let child = crossover(
            &population.members[a].genotype,
            &population.members[b].genotype,
            config.crossover,
            rng,
        )?;
        let child = mutate(&child, config.mutation_rate, rng);
        members.push(Individual::unevaluated(child));
    }
    let mut next = Population {
        members,
        generation: population.generation + 1,
    };
    evaluate_population(&mut next, fitness, cache, config.parallel_fitness)?;
    Ok(next)
}

/// One row of the GA history export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_genotype: Genotype,
}

/// Resumable GA state. Serializes to JSON for per-generation checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaRun {
    pub config: GaConfig,
    pub num_blocks: usize,
    pub population: Population,
    pub best: Individual,
    pub history: Vec<GenerationStats>,
    pub cache: FitnessCache,
    rng: ChaCha8Rng,
}

impl GaRun {
    /// Seeds the run and evaluates the initial population.
    pub fn start(config: GaConfig, num_blocks: usize, fitness: &dyn FitnessFn) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let mut population = init_population(&config, num_blocks, &mut rng)?;
        let mut cache = FitnessCache::new();
        evaluate_population(&mut population, fitness, &mut cache, config.parallel_fitness)?;
        let best = population.best()?.clone();
        Ok(GaRun {
            config,
            num_blocks,
            population,
            best,
            history: Vec::new(),
            cache,
            rng,
        })
    }

    pub fn generation(&self) -> usize {
        self.population.generation
    }

    pub fn is_finished(&self) -> bool {
        if self.population.generation >= self.config.generations {
            return true;
        }
        self.config.early_stop
            && !self.history.is_empty()
            && self.best.fitness.is_some_and(|f| f >= 1.0)
    }

    pub fn step(&mut self, fitness: &dyn FitnessFn) -> Result<&GenerationStats> {
        let next = step_generation(
            &self.population,
            &self.config,
            fitness,
            &mut self.cache,
            &mut self.rng,
        )?;
        let gen_best = next.best()?.clone();
        if gen_best.fitness > self.best.fitness {
            self.best = gen_best.clone();
        }
        self.history.push(GenerationStats {
            generation: next.generation,
            best_fitness: gen_best.fitness.unwrap_or(0.0),
            mean_fitness: next.mean_fitness()?,
            best_genotype: gen_best.genotype.clone(),
        });
        self.population = next;
        Ok(self.history.last().expect("just pushed"))
    }

    pub fn run_to_end(&mut self, fitness: &dyn FitnessFn) -> Result<()> {
        while !self.is_finished() {
            self.step(fitness)?;
        }
        Ok(())
    }

    pub fn outcome(&self) -> GaOutcome {
        GaOutcome {
            best: self.best.clone(),
            history: self.history.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaOutcome {
    /// Best individual seen in any generation.
    pub best: Individual,
    pub history: Vec<GenerationStats>,
}

pub fn run_ga(config: &GaConfig, num_blocks: usize, fitness: &dyn FitnessFn) -> Result<GaOutcome> {
    let mut run = GaRun::start(config.clone(), num_blocks, fitness)?;
    run.run_to_end(fitness)?;
    Ok(run.outcome())
}

pub fn write_history_csv<W: Write>(history: &[GenerationStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in history {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<history csv>", e))?;
    Ok(())
}

pub fn read_history_csv<R: Read>(input: R) -> Result<Vec<GenerationStats>> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn evaluated(fit: &[f64]) -> Population {
        Population {
            members: fit
                .iter()
                .enumerate()
                .map(|(i, f)| Individual::evaluated(Genotype::one_hot(fit.len(), i + 1).unwrap(), *f))
                .collect(),
            generation: 0,
        }
    }

    #[test]
    fn init_shape_and_outcomes() {
        let cfg = GaConfig::default();
        let pop = init_population(&cfg, 7, &mut rng_from_seed(3)).unwrap();
        assert_eq!(pop.len(), 7);
        assert!(pop.members.iter().all(|m| m.genotype.len() == 7 && m.fitness.is_none()));
        assert_eq!(pop.generation, 0);

        let cfg2 = GaConfig {
            population_size: 2,
            elite_count: 1,
            ..GaConfig::default()
        };
        for seed in 0..20 {
            let pop = init_population(&cfg2, 1, &mut rng_from_seed(seed)).unwrap();
            for m in &pop.members {
                let s = m.genotype.to_string();
                assert!(s == "0" || s == "1");
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = GaConfig::default();
        let a = init_population(&cfg, 7, &mut rng_from_seed(99)).unwrap();
        let b = init_population(&cfg, 7, &mut rng_from_seed(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_bad_shapes() {
        let cfg = GaConfig::default();
        assert!(matches!(
            init_population(&cfg, 0, &mut rng_from_seed(0)),
            Err(Error::Config(_))
        ));
        let cfg = GaConfig {
            population_size: 1,
            ..GaConfig::default()
        };
        assert!(matches!(
            init_population(&cfg, 3, &mut rng_from_seed(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(GaConfig::default().validate().is_ok());
        let bad = [
            GaConfig { mutation_rate: 1.5, ..Default::default() },
            GaConfig { elite_count: 0, ..Default::default() },
            GaConfig { elite_count: 7, ..Default::default() },
            GaConfig { generations: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn roulette_degenerate_mass() {
        let pop = evaluated(&[1.0, 0.0, 0.0]);
        let mut rng = rng_from_seed(1);
        for _ in 0..10_000 {
            assert_eq!(roulette_index(&pop, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn roulette_all_zero_is_uniform() {
        let pop = evaluated(&[0.0, 0.0, 0.0, 0.0]);
        let mut rng = rng_from_seed(2);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[roulette_index(&pop, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn roulette_symmetric_frequencies() {
        let pop = evaluated(&[0.2, 0.2, 0.2]);
        let mut rng = rng_from_seed(5);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[roulette_index(&pop, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.02);
        }
    }

    #[test]
    fn roulette_rejects_unevaluated() {
        let mut pop = evaluated(&[0.5, 0.5]);
        pop.members[1].fitness = None;
        assert!(matches!(
            roulette_index(&pop, &mut rng_from_seed(0)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn crossover_identical_parents() {
        let g: Genotype = "1011001".parse().unwrap();
        let mut rng = rng_from_seed(4);
        for kind in [CrossoverKind::Uniform, CrossoverKind::OnePoint] {
            for _ in 0..100 {
                assert_eq!(crossover(&g, &g, kind, &mut rng).unwrap(), g);
            }
        }
    }

    #[test]
    fn one_point_enumerates_cuts() {
        let p1: Genotype = "1111".parse().unwrap();
        let p2: Genotype = "0000".parse().unwrap();
        let mut rng = rng_from_seed(6);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..1000 {
            seen.insert(crossover(&p1, &p2, CrossoverKind::OnePoint, &mut rng).unwrap().to_string());
        }
        let expected: std::collections::BTreeSet<String> =
            ["1000", "1100", "1110"].iter().map(|s| s.to_string()).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn crossover_length_mismatch() {
        let a: Genotype = "101".parse().unwrap();
        let b: Genotype = "10".parse().unwrap();
        assert!(matches!(
            crossover(&a, &b, CrossoverKind::Uniform, &mut rng_from_seed(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mutation_extremes() {
        let g: Genotype = "1100101".parse().unwrap();
        let mut rng = rng_from_seed(8);
        assert_eq!(mutate(&g, 0.0, &mut rng), g);
        assert_eq!(mutate(&g, 1.0, &mut rng), g.complement());
        // input untouched
        assert_eq!(g.to_string(), "1100101");
    }

    #[test]
    fn elitism_keeps_best() {
        let mut pop = evaluated(&[0.1, 0.9, 0.3, 0.2, 0.4, 0.3, 0.2]);
        pop.members[1] = Individual::evaluated("1111111".parse().unwrap(), 0.9);
        let cfg = GaConfig::default();
        let f = |g: &Genotype| Ok(g.count_ones() as f64 / 14.0);
        let mut cache = FitnessCache::new();
        let next = step_generation(&pop, &cfg, &f, &mut cache, &mut rng_from_seed(0)).unwrap();
        assert_eq!(next.len(), 7);
        assert_eq!(next.generation, 1);
        assert!(next.best().unwrap().fitness().unwrap() >= 0.9);
        assert_eq!(next.members[0].genotype().to_string(), "1111111");
    }

    #[test]
    fn elite_ties_prefer_lower_index() {
        let pop = evaluated(&[0.5, 0.5, 0.5]);
        let r = pop.ranking().unwrap();
        assert_eq!(r, vec![0, 1, 2]);
    }

    #[test]
    fn constant_landscape_completes() {
        let cfg = GaConfig { generations: 5, ..Default::default() };
        let out = run_ga(&cfg, 7, &|_: &Genotype| Ok(0.5)).unwrap();
        assert_eq!(out.history.len(), 5);
        assert!(out.history.iter().all(|h| h.best_fitness == 0.5 && h.mean_fitness == 0.5));
    }

    #[test]
    fn one_bit_landscape() {
        for seed in 0..20 {
            let cfg = GaConfig { seed, ..Default::default() };
            let out = run_ga(&cfg, 1, &|g: &Genotype| Ok(if g.get(0) { 1.0 } else { 0.0 })).unwrap();
            assert_eq!(out.best.genotype().to_string(), "1");
            let first = out.history.iter().find(|h| h.best_fitness == 1.0).unwrap();
            assert!(first.generation <= 2);
        }
    }

    #[test]
    fn fitness_failure_names_genotype() {
        let cfg = GaConfig::default();
        let err = run_ga(&cfg, 4, &|g: &Genotype| {
            if g.count_ones() >= 2 {
                Err(Error::Domain("boom".into()))
            } else {
                Ok(0.1)
            }
        });
        match err {
            Err(Error::Fitness { genotype, .. }) => {
                let g: Genotype = genotype.parse().unwrap();
                assert!(g.count_ones() >= 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_fitness_is_rejected() {
        let cfg = GaConfig::default();
        assert!(matches!(
            run_ga(&cfg, 3, &|_: &Genotype| Ok(1.5)),
            Err(Error::Fitness { .. })
        ));
    }

    #[test]
    fn cache_avoids_repeat_evaluations() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let f = |g: &Genotype| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(g.count_ones() as f64 / 3.0)
        };
        let cfg = GaConfig { generations: 30, early_stop: false, ..Default::default() };
        run_ga(&cfg, 3, &f).unwrap();
        // only 8 distinct genotypes exist for B = 3
        assert!(calls.load(Ordering::SeqCst) <= 8);
    }

    #[test]
    fn parallel_dispatch_matches_sequential() {
        let target: Genotype = "101100111010".parse().unwrap();
        let f = |g: &Genotype| {
            Ok(g.bits().iter().zip(target.bits()).filter(|(a, b)| a == b).count() as f64 / 12.0)
        };
        let seq = GaConfig { seed: 11, ..Default::default() };
        let par_cfg = GaConfig { parallel_fitness: true, ..seq.clone() };
        let a = run_ga(&seq, 12, &f).unwrap();
        let b = run_ga(&par_cfg, 12, &Stateless(f)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_csv_layout() {
        let history = vec![GenerationStats {
            generation: 1,
            best_fitness: 0.75,
            mean_fitness: 0.5,
            best_genotype: "0110".parse().unwrap(),
        }];
        let mut buf = Vec::new();
        write_history_csv(&history, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "generation,best_fitness,mean_fitness,best_genotype\n1,0.75,0.5,0110\n"
        );
        assert_eq!(read_history_csv(&buf[..]).unwrap(), history);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn operators_preserve_length(bits1 in proptest::collection::vec(any::<bool>(), 1..40),
                                         seed in any::<u64>(), rate in 0.0f64..=1.0) {
                let n = bits1.len();
                let p1 = Genotype::new(bits1).unwrap();
                let p2 = Genotype::ones(n);
                let mut rng = rng_from_seed(seed);
                for kind in [CrossoverKind::Uniform, CrossoverKind::OnePoint] {
                    let c = crossover(&p1, &p2, kind, &mut rng).unwrap();
                    prop_assert_eq!(c.len(), n);
                    prop_assert_eq!(mutate(&c, rate, &mut rng).len(), n);
                }
            }

            #[test]
            fn population_size_and_monotone_best(seed in 0u64..200) {
                let cfg = GaConfig { seed, generations: 15, early_stop: false, ..Default::default() };
                let f = |g: &Genotype| Ok((g.count_ones() as f64 / 6.0).powi(2));
                let mut run = GaRun::start(cfg, 6, &f).unwrap();
                let mut prev = run.population.best().unwrap().fitness().unwrap();
                while !run.is_finished() {
                    let s = run.step(&f).unwrap().clone();
                    prop_assert_eq!(run.population.len(), 7);
                    prop_assert!(s.best_fitness >= prev);
                    prev = s.best_fitness;
                }
            }
        }
    }
}
