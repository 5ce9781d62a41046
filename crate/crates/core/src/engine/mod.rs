//! The evolutionary loop and its surrogate model management.
//!
//! Every offspring is trained for the partial budget and summarised by its
//! semantics. In surrogate mode, from the second generation on, offspring
//! are ranked by expected improvement under the current surrogate; the top
//! fraction continue to the full budget and the rest take the surrogate's
//! mean prediction as fitness. Full evaluations feed the archive the
//! surrogate is refitted on after each generation.

mod select;

use std::cmp::Ordering;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{AnalyticsError, SurrogateQuality};
use crate::genome::{crossover, mutate, random_genotype, serialize, GenomeConfig, GenomeError, Genotype, MutationRates};
use crate::phenotype::to_phenotype;
use crate::smallnet::{Dataset, DatasetSplit, NetError, SemanticsVector, TrainConfig, TrainedNet};
use crate::surrogate::{KplsModel, ModelDump, SurrogateConfig, SurrogateError};

pub use select::{expected_improvement, select_parent};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid evolution configuration: {0}")]
    Config(String),
    #[error("invalid prediction: mean {mean}, sigma {sigma}")]
    InvalidPrediction { mean: f64, sigma: f64 },
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionMode {
    /// Every offspring is trained to the full budget.
    Full,
    /// Expected-improvement split with surrogate estimates.
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub mode: EvolutionMode,
    pub population_size: usize,
    pub generations: usize,
    /// Fraction of each generation (after the first) that is fully trained.
    pub full_fraction: f64,
    pub tournament_size: usize,
    pub elitism: usize,
    pub crossover_rate: f64,
    pub mutation: MutationRates,
    pub genome: GenomeConfig,
    pub train: TrainConfig,
    pub surrogate: SurrogateConfig,
    /// Oldest archive rows are dropped beyond this size.
    pub archive_capacity: Option<usize>,
    /// Validation samples used for semantics; all when absent.
    pub semantics_samples: Option<usize>,
    pub workers: usize,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            mode: EvolutionMode::Surrogate,
            population_size: 20,
            generations: 15,
            full_fraction: 0.4,
            tournament_size: 3,
            elitism: 1,
            crossover_rate: 0.9,
            mutation: MutationRates::default(),
            genome: GenomeConfig::default(),
            train: TrainConfig::default(),
            surrogate: SurrogateConfig::default(),
            archive_capacity: None,
            semantics_samples: None,
            workers: 1,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.population_size < 2 {
            return bad("population_size must be at least 2".into());
        }
        if self.generations == 0 {
            return bad("generations must be at least 1".into());
        }
        if !(self.full_fraction > 0.0 && self.full_fraction <= 1.0) {
            return bad(format!("full_fraction {} is not in (0, 1]", self.full_fraction));
        }
        if self.tournament_size == 0 {
            return bad("tournament_size must be at least 1".into());
        }
        if self.elitism >= self.population_size {
            return bad("elitism must be smaller than the population".into());
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return bad("crossover_rate must be in [0, 1]".into());
        }
        let rates = [self.mutation.micro, self.mutation.macro_];
        if !rates.iter().all(|r| (0.0..=1.0).contains(r)) {
            return bad("mutation rates must be in [0, 1]".into());
        }
        if self.archive_capacity == Some(0) || self.archive_capacity == Some(1) {
            return bad("archive_capacity must allow at least 2 rows".into());
        }
        if self.semantics_samples == Some(0) {
            return bad("semantics_samples must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        self.genome.validate()?;
        self.train.validate()?;
        self.surrogate.validate()?;
        Ok(())
    }

    /// Offspring trained to the full budget in generations after the first.
    pub fn full_per_generation(&self) -> usize {
        ((self.full_fraction * self.population_size as f64).ceil() as usize).min(self.population_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FitnessSource {
    Full,
    Estimated,
    /// Training or mapping failed; fitness is 0.
    Failed,
}

impl FitnessSource {
    pub fn name(self) -> &'static str {
        match self {
            FitnessSource::Full => "FULL",
            FitnessSource::Estimated => "ESTIMATED",
            FitnessSource::Failed => "FAILED",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: u64,
    pub genotype: Genotype,
    /// Semantics at the partial-training checkpoint.
    pub semantics: Option<SemanticsVector>,
    pub fitness: f64,
    pub source: FitnessSource,
    pub predicted: Option<f64>,
    pub ei: Option<f64>,
    /// Accuracy on the held-out test split, for full evaluations.
    pub test_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

/// Surrogate training data: (checkpoint semantics, measured fitness).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub capacity: Option<usize>,
}

impl Archive {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            capacity,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Adds a row. A row whose semantics are already present only raises
    /// the stored fitness; returns whether a new row was added.
    pub fn push(&mut self, semantics: &[f64], fitness: f64) -> bool {
        if let Some(i) = self.x.iter().position(|r| r == semantics) {
            self.y[i] = self.y[i].max(fitness);
            return false;
        }
        self.x.push(semantics.to_vec());
        self.y.push(fitness);
        if let Some(cap) = self.capacity {
            while self.x.len() > cap {
                self.x.remove(0);
                self.y.remove(0);
            }
        }
        true
    }
}

/// One row of the per-generation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    pub id: u64,
    pub source: FitnessSource,
    pub predicted: Option<f64>,
    /// Measured validation accuracy; absent unless fully trained.
    pub actual: Option<f64>,
    pub ei: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: usize,
    /// Offspring in population order, before elites are inserted.
    pub records: Vec<IndividualRecord>,
    pub full_trainings: usize,
    pub partial_only: usize,
    pub failed: usize,
    pub epochs_trained: usize,
    pub archive_size: usize,
    /// Best measured fitness so far.
    pub best_fitness: Option<f64>,
    /// Over this generation's fully trained offspring that had a prediction.
    pub quality: Option<SurrogateQuality>,
    /// Surrogate fitted at the end of this generation.
    pub surrogate: Option<ModelDump>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub full_trainings: usize,
    pub partial_only: usize,
    pub failed: usize,
    pub epochs_trained: usize,
}

pub struct EvolutionState {
    pub generation: usize,
    pub population: Vec<Individual>,
    pub archive: Archive,
    pub surrogate: Option<KplsModel>,
    /// Holder of the best measured fitness so far.
    pub best: Option<Individual>,
    pub counters: Counters,
    next_id: u64,
    rng: ChaCha8Rng,
}

/// Independent 64-bit streams keyed by small integers.
fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(mix(master) ^ tag) ^ a) ^ b)
}

const SEED_VARIATION: u64 = 1;
const SEED_TRAINING: u64 = 2;
const SEED_SURROGATE: u64 = 3;

/// Outcome of the partial phase for one offspring.
struct Partial {
    net: Option<TrainedNet>,
    semantics: Option<SemanticsVector>,
    seconds: f64,
}

struct FullResult {
    accuracy: f64,
    test_accuracy: f64,
}

pub struct Evolution<'a> {
    cfg: EvolutionConfig,
    data: &'a Dataset,
    semantics_split: DatasetSplit,
    pool: rayon::ThreadPool,
    state: EvolutionState,
}

impl<'a> Evolution<'a> {
    pub fn new(cfg: EvolutionConfig, data: &'a Dataset) -> Result<Self, EngineError> {
        cfg.validate()?;
        for (name, split) in [("train", &data.train), ("validation", &data.validation), ("test", &data.test)] {
            if split.is_empty() {
                return Err(EngineError::Config(format!("{name} split is empty")));
            }
        }
        let semantics_split = match cfg.semantics_samples {
            Some(n) => data.validation.head(n),
            None => data.validation.clone(),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| EngineError::Pool(e.to_string()))?;
        let state = EvolutionState {
            generation: 0,
            population: Vec::new(),
            archive: Archive::new(cfg.archive_capacity),
            surrogate: None,
            best: None,
            counters: Counters::default(),
            next_id: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_VARIATION, 0, 0)),
        };
        Ok(Self {
            cfg,
            data,
            semantics_split,
            pool,
            state,
        })
    }

    pub fn config(&self) -> &EvolutionConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EvolutionState {
        &self.state
    }

    pub fn into_state(self) -> EvolutionState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.generation >= self.cfg.generations
    }

    fn breed(&mut self) -> Result<Vec<Genotype>, EngineError> {
        let p = self.cfg.population_size;
        let st = &mut self.state;
        if st.generation == 0 {
            return (0..p)
                .map(|_| random_genotype(&self.cfg.genome, &mut st.rng).map_err(EngineError::from))
                .collect();
        }
        let fitness: Vec<f64> = st.population.iter().map(|i| i.fitness).collect();
        let mut children = Vec::with_capacity(p + 1);
        while children.len() < p {
            let a = &st.population[select_parent(&fitness, self.cfg.tournament_size, &mut st.rng)].genotype;
            let b = &st.population[select_parent(&fitness, self.cfg.tournament_size, &mut st.rng)].genotype;
            let (c1, c2) = if st.rng.gen_bool(self.cfg.crossover_rate) {
                crossover(a, b, &self.cfg.genome, &mut st.rng)
            } else {
                (a.clone(), b.clone())
            };
            for c in [c1, c2] {
                children.push(mutate(&c, &self.cfg.mutation, &self.cfg.genome, &mut st.rng));
            }
        }
        children.truncate(p);
        Ok(children)
    }

    fn partial_phase(&self, generation: usize, genotypes: &[Genotype]) -> Vec<Partial> {
        let data = self.data;
        let cfg = &self.cfg;
        let sem = &self.semantics_split;
        self.pool.install(|| {
            genotypes
                .par_iter()
                .enumerate()
                .map(|(i, g)| {
                    let start = Instant::now();
                    let seed = derive_seed(cfg.seed, SEED_TRAINING, generation as u64, i as u64);
                    let run = || -> Result<(TrainedNet, SemanticsVector), EngineError> {
                        let arch = to_phenotype(g, data.shape(), data.num_classes())
                            .map_err(NetError::from)?;
                        let mut net = TrainedNet::init(&arch, seed)?;
                        net.train_until(&data.train, &cfg.train, cfg.train.partial_epochs)?;
                        let s = net.extract_semantics(sem)?;
                        Ok((net, s))
                    };
                    match run() {
                        Ok((net, s)) => Partial {
                            net: Some(net),
                            semantics: Some(s),
                            seconds: start.elapsed().as_secs_f64(),
                        },
                        Err(e) => {
                            log::warn!("generation {generation}, offspring {i}: partial training failed: {e}");
                            Partial {
                                net: None,
                                semantics: None,
                                seconds: start.elapsed().as_secs_f64(),
                            }
                        }
                    }
                })
                .collect()
        })
    }

    fn full_phase(&self, generation: usize, nets: Vec<(usize, TrainedNet)>) -> Vec<(usize, Option<FullResult>, f64)> {
        let data = self.data;
        let cfg = &self.cfg;
        self.pool.install(|| {
            nets.into_par_iter()
                .map(|(i, mut net)| {
                    let start = Instant::now();
                    let mut run = || -> Result<FullResult, NetError> {
                        net.train_until(&data.train, &cfg.train, cfg.train.full_epochs)?;
                        let accuracy = net.evaluate(&data.validation)?.accuracy;
                        let test_accuracy = net.evaluate(&data.test)?.accuracy;
                        Ok(FullResult { accuracy, test_accuracy })
                    };
                    let res = run();
                    if let Err(e) = &res {
                        log::warn!("generation {generation}, offspring {i}: full training failed: {e}");
                    }
                    (i, res.ok(), start.elapsed().as_secs_f64())
                })
                .collect()
        })
    }

    /// Runs one generation.
    pub fn step(&mut self) -> Result<GenerationReport, EngineError> {
        let started = Instant::now();
        let generation = self.state.generation + 1;
        let genotypes = self.breed()?;
        let p = genotypes.len();
        let partials = self.partial_phase(generation, &genotypes);

        // who gets the full budget
        let use_surrogate = self.cfg.mode == EvolutionMode::Surrogate && generation > 1;
        if use_surrogate && self.state.surrogate.is_none() {
            log::warn!("generation {generation}: no surrogate available, evaluating every offspring in full");
        }
        let mut predicted: Vec<Option<f64>> = vec![None; p];
        let mut ei: Vec<Option<f64>> = vec![None; p];
        let mut full: Vec<bool> = partials.iter().map(|r| r.net.is_some()).collect();
        if let (true, Some(model)) = (use_surrogate, &self.state.surrogate) {
            let f_best = self.state.best.as_ref().map_or(0.0, |b| b.fitness);
            for (i, r) in partials.iter().enumerate() {
                if let Some(s) = &r.semantics {
                    let pred = model.predict(&s.0)?;
                    predicted[i] = Some(pred.mean);
                    ei[i] = Some(expected_improvement(pred.mean, pred.std_dev(), f_best)?);
                }
            }
            let keys: Vec<String> = genotypes.iter().map(serialize).collect();
            let mut ranked: Vec<usize> = (0..p).filter(|&i| ei[i].is_some()).collect();
            ranked.sort_by(|&a, &b| {
                let by = |v: &[Option<f64>]| v[b].unwrap().partial_cmp(&v[a].unwrap()).unwrap_or(Ordering::Equal);
                by(&ei).then_with(|| by(&predicted)).then_with(|| keys[a].cmp(&keys[b])).then(a.cmp(&b))
            });
            let quota = self.cfg.full_per_generation();
            full = vec![false; p];
            for &i in ranked.iter().take(quota) {
                full[i] = true;
            }
        }

        let mut nets: Vec<Option<TrainedNet>> = Vec::with_capacity(p);
        let mut semantics = Vec::with_capacity(p);
        let mut seconds = Vec::with_capacity(p);
        for r in partials {
            nets.push(r.net);
            semantics.push(r.semantics);
            seconds.push(r.seconds);
        }
        let to_finish: Vec<(usize, TrainedNet)> = (0..p)
            .filter(|&i| full[i])
            .map(|i| (i, nets[i].take().expect("selected offspring has a network")))
            .collect();
        let mut results: Vec<Option<FullResult>> = (0..p).map(|_| None).collect();
        for (i, res, secs) in self.full_phase(generation, to_finish) {
            results[i] = res;
            seconds[i] += secs;
        }

        let tc = &self.cfg.train;
        let mut gen_counters = Counters::default();
        let mut offspring = Vec::with_capacity(p);
        for (i, genotype) in genotypes.into_iter().enumerate() {
            let (fitness, source, test_accuracy) = if full[i] {
                gen_counters.full_trainings += 1;
                gen_counters.epochs_trained += tc.full_epochs;
                match &results[i] {
                    Some(r) => (r.accuracy, FitnessSource::Full, Some(r.test_accuracy)),
                    None => (0.0, FitnessSource::Failed, None),
                }
            } else if let Some(mean) = predicted[i].filter(|_| semantics[i].is_some()) {
                gen_counters.partial_only += 1;
                gen_counters.epochs_trained += tc.partial_epochs;
                (mean.clamp(0.0, 1.0), FitnessSource::Estimated, None)
            } else {
                gen_counters.epochs_trained += tc.partial_epochs;
                (0.0, FitnessSource::Failed, None)
            };
            if source == FitnessSource::Failed {
                gen_counters.failed += 1;
            }
            offspring.push(Individual {
                id: self.state.next_id,
                genotype,
                semantics: semantics[i].take(),
                fitness,
                source,
                predicted: predicted[i],
                ei: ei[i],
                test_accuracy,
                wall_seconds: seconds[i],
            });
            self.state.next_id += 1;
        }

        let records: Vec<IndividualRecord> = offspring
            .iter()
            .map(|ind| IndividualRecord {
                id: ind.id,
                source: ind.source,
                predicted: ind.predicted,
                actual: (ind.source == FitnessSource::Full).then_some(ind.fitness),
                ei: ind.ei,
                test_accuracy: ind.test_accuracy,
                wall_seconds: ind.wall_seconds,
            })
            .collect();
        let (pred, actual): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter_map(|r| Some((r.predicted?, r.actual?)))
            .unzip();
        let quality = SurrogateQuality::from_pairs(&pred, &actual)?;

        let st = &mut self.state;
        for ind in offspring.iter().filter(|i| i.source == FitnessSource::Full) {
            if let Some(s) = &ind.semantics {
                st.archive.push(&s.0, ind.fitness);
            }
            if st.best.as_ref().map_or(true, |b| ind.fitness > b.fitness) {
                st.best = Some(ind.clone());
            }
        }

        // elites from the previous population replace the weakest offspring
        if generation > 1 && self.cfg.elitism > 0 {
            let mut elites: Vec<&Individual> =
                st.population.iter().filter(|i| i.source == FitnessSource::Full).collect();
            elites.sort_by(|a, b| b.fitness.partial_cmp(&a.fitness).unwrap_or(Ordering::Equal));
            let mut order: Vec<usize> = (0..offspring.len()).collect();
            order.sort_by(|&a, &b| {
                offspring[a]
                    .fitness
                    .partial_cmp(&offspring[b].fitness)
                    .unwrap_or(Ordering::Equal)
                    .then(b.cmp(&a))
            });
            for (slot, elite) in order.into_iter().zip(elites.into_iter().take(self.cfg.elitism)) {
                offspring[slot] = elite.clone();
            }
        }
        st.population = offspring;

        st.surrogate = None;
        if self.cfg.mode == EvolutionMode::Surrogate {
            let scfg = SurrogateConfig {
                seed: derive_seed(self.cfg.seed, SEED_SURROGATE, generation as u64, 0),
                ..self.cfg.surrogate.clone()
            };
            match KplsModel::fit(&st.archive.x, &st.archive.y, &scfg) {
                Ok(m) => st.surrogate = Some(m),
                Err(e) => log::warn!("generation {generation}: surrogate fit failed: {e}"),
            }
        }

        st.counters.full_trainings += gen_counters.full_trainings;
        st.counters.partial_only += gen_counters.partial_only;
        st.counters.failed += gen_counters.failed;
        st.counters.epochs_trained += gen_counters.epochs_trained;
        st.generation = generation;
        Ok(GenerationReport {
            generation,
            records,
            full_trainings: gen_counters.full_trainings,
            partial_only: gen_counters.partial_only,
            failed: gen_counters.failed,
            epochs_trained: gen_counters.epochs_trained,
            archive_size: st.archive.len(),
            best_fitness: st.best.as_ref().map(|b| b.fitness),
            quality,
            surrogate: st.surrogate.as_ref().map(KplsModel::dump),
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining generations, handing each report to `on_generation`.
    pub fn run(
        &mut self,
        mut on_generation: impl FnMut(&GenerationReport, &EvolutionState),
    ) -> Result<Vec<GenerationReport>, EngineError> {
        let mut reports = Vec::new();
        while !self.is_finished() {
            let r = self.step()?;
            on_generation(&r, &self.state);
            reports.push(r);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_arithmetic() {
        let cfg = |p| EvolutionConfig {
            population_size: p,
            ..Default::default()
        };
        assert_eq!(cfg(10).full_per_generation(), 4);
        assert_eq!(cfg(12).full_per_generation(), 5);
        assert_eq!(cfg(20).full_per_generation(), 8);
        assert_eq!(cfg(2).full_per_generation(), 1);
    }

    #[test]
    fn archive_dedup_and_capacity() {
        let mut a = Archive::new(Some(3));
        assert!(a.push(&[0.1, 0.9], 0.5));
        assert!(!a.push(&[0.1, 0.9], 0.7));
        assert_eq!(a.y, vec![0.7]);
        for i in 0..4 {
            a.push(&[i as f64, 0.0], 0.1);
        }
        assert_eq!(a.len(), 3);
        assert_eq!(a.x[0], vec![1.0, 0.0]);
    }

    #[test]
    fn seeds_differ_by_key() {
        let s = derive_seed(0, SEED_TRAINING, 1, 0);
        assert_ne!(s, derive_seed(0, SEED_TRAINING, 1, 1));
        assert_ne!(s, derive_seed(0, SEED_TRAINING, 2, 0));
        assert_ne!(s, derive_seed(1, SEED_TRAINING, 1, 0));
        assert_eq!(s, derive_seed(0, SEED_TRAINING, 1, 0));
    }

    #[test]
    fn config_validation() {
        assert!(EvolutionConfig::default().validate().is_ok());
        let bad = EvolutionConfig {
            population_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvolutionConfig {
            full_fraction: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
