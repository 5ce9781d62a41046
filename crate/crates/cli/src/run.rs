//! `gen-data` and `run`: dataset creation and evolution runs with their
//! on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use surronas_core::engine::{
    Counters, EngineError, Evolution, EvolutionMode, EvolutionState, GenerationReport, Individual,
};
use surronas_core::genome::serialize_population;
use surronas_core::phenotype::map_genotype;
use surronas_core::smallnet::data::DatasetMeta;
use surronas_core::smallnet::{Dataset, SyntheticSpec};

use crate::config::RunConfig;
use crate::CliError;

pub const GENERATION_HEADER: &str = "gen,individual_id,fitness_source,predicted_fitness,actual_fitness,ei,wall_seconds";
pub const HISTORY_HEADER: &str = "gen,full_trainings,partial_only,failed,epochs_trained,archive_size,best_fitness";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub mode: EvolutionMode,
    pub master_seed: u64,
    pub dataset_source: String,
    pub dataset: DatasetMeta,
    pub generations_completed: usize,
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_wall_seconds: f64,
    pub generation_wall_seconds: Vec<f64>,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub id: u64,
    pub validation_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub effective_instructions: usize,
    pub layers: usize,
}

#[derive(Debug)]
pub struct RunResult {
    pub run_dir: PathBuf,
    pub manifest: Manifest,
    pub reports: Vec<GenerationReport>,
    pub final_population: Vec<Individual>,
    pub best: Option<BestRecord>,
    pub timing: Timing,
}

fn io<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, contents).map_err(io(path))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(io(path))?;
    text.push('\n');
    write_file(path, &text)
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn cmd_gen_data(spec: &SyntheticSpec, dir: &Path) -> Result<Dataset, CliError> {
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let data = spec.generate().map_err(|e| CliError::Runtime(e.to_string()))?;
    data.write(dir, Some(spec.clone())).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(data)
}

fn generation_csv(r: &GenerationReport) -> String {
    let mut s = String::from(GENERATION_HEADER);
    s.push('\n');
    for rec in &r.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.3}",
            r.generation,
            rec.id,
            rec.source.name(),
            opt(rec.predicted),
            opt(rec.actual),
            opt(rec.ei),
            rec.wall_seconds
        );
    }
    s
}

fn population_text(pop: &[Individual]) -> String {
    serialize_population(pop.iter().map(|ind| {
        (
            format!("id={} fitness={} source={}", ind.id, ind.fitness, ind.source.name()),
            &ind.genotype,
        )
    }))
}

struct RunWriter {
    dir: PathBuf,
    manifest: Manifest,
    history: String,
    started: Instant,
    generation_seconds: Vec<f64>,
}

impl RunWriter {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn artifact(&mut self, rel: &str) -> PathBuf {
        if !self.manifest.artifacts.iter().any(|a| a == rel) {
            self.manifest.artifacts.push(rel.to_string());
        }
        self.path(rel)
    }

    fn flush_manifest(&mut self) -> Result<(), CliError> {
        let p = self.artifact("manifest.json");
        write_json(&p, &self.manifest)
    }

    fn on_generation(&mut self, r: &GenerationReport, st: &EvolutionState) -> Result<(), CliError> {
        let g = r.generation;
        let p = self.artifact(&format!("generations/gen_{g:03}.csv"));
        write_file(&p, &generation_csv(r))?;
        if let Some(dump) = &r.surrogate {
            let p = self.artifact(&format!("models/surrogate_gen_{g:03}.json"));
            write_json(&p, dump)?;
        }
        if g == 1 {
            let p = self.artifact("populations/initial.txt");
            write_file(&p, &population_text(&st.population))?;
        }
        let _ = writeln!(
            self.history,
            "{g},{},{},{},{},{},{}",
            r.full_trainings,
            r.partial_only,
            r.failed,
            r.epochs_trained,
            r.archive_size,
            opt(r.best_fitness)
        );
        let p = self.artifact("history.csv");
        write_file(&p, &self.history)?;
        self.generation_seconds.push(r.wall_seconds);
        self.manifest.generations_completed = g;
        self.flush_manifest()
    }

    fn timing(&self, counters: Counters) -> Timing {
        Timing {
            total_wall_seconds: self.started.elapsed().as_secs_f64(),
            generation_wall_seconds: self.generation_seconds.clone(),
            counters,
        }
    }

    fn finish(&mut self, st: &EvolutionState, data: &Dataset) -> Result<(Option<BestRecord>, Timing), CliError> {
        let p = self.artifact("populations/final.txt");
        write_file(&p, &population_text(&st.population))?;
        let best = match &st.best {
            Some(b) => {
                let mapping = map_genotype(&b.genotype, data.shape(), data.num_classes())
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                let repaired = surronas_core::genome::repair(&b.genotype).map_err(|e| CliError::Runtime(e.to_string()))?;
                let mut text = format!(
                    "# id={} validation_accuracy={} test_accuracy={}\n",
                    b.id,
                    b.fitness,
                    opt(b.test_accuracy)
                );
                text.push_str("\n# genotype\n");
                text.push_str(&surronas_core::genome::serialize(&b.genotype));
                text.push_str("\n# effective code\n");
                text.push_str(&surronas_core::genome::serialize(&repaired));
                text.push_str("\n# architecture\n");
                text.push_str(&mapping.architecture.summary());
                let p = self.artifact("best_architecture.txt");
                write_file(&p, &text)?;
                let rec = BestRecord {
                    id: b.id,
                    validation_accuracy: b.fitness,
                    test_accuracy: b.test_accuracy,
                    effective_instructions: repaired.len(),
                    layers: mapping.architecture.layers.len(),
                };
                let p = self.artifact("best.json");
                write_json(&p, &rec)?;
                Some(rec)
            }
            None => None,
        };
        let timing = self.timing(st.counters);
        let p = self.artifact("timing.json");
        write_json(&p, &timing)?;
        self.manifest.status = RunStatus::Complete;
        self.flush_manifest()?;
        Ok((best, timing))
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, String), CliError> {
    match &cfg.dataset {
        Some(dir) => {
            let d = Dataset::load(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok((d, dir.display().to_string()))
        }
        None => {
            let d = cfg.synthetic.generate().map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok((d, "synthetic".into()))
        }
    }
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunResult, CliError> {
    cfg.validate()?;
    let (data, source) = load_dataset(cfg)?;
    let dir = cfg.run_dir();
    let generator = cfg.dataset.is_none().then(|| cfg.synthetic.clone());
    let mut writer = RunWriter {
        dir: dir.clone(),
        manifest: Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            status: RunStatus::Running,
            error: None,
            mode: cfg.evolution.mode,
            master_seed: cfg.evolution.seed,
            dataset_source: source,
            dataset: data.meta(generator),
            generations_completed: 0,
            artifacts: Vec::new(),
            config: cfg.clone(),
        },
        history: format!("{HISTORY_HEADER}\n"),
        started: Instant::now(),
        generation_seconds: Vec::new(),
    };
    let p = writer.artifact("config.json");
    write_json(&p, cfg)?;
    writer.flush_manifest()?;

    let mut evo = Evolution::new(cfg.evolution.clone(), &data).map_err(|e| match e {
        EngineError::Config(_) => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    })?;
    let mut reports = Vec::new();
    let outcome = (|| -> Result<(), CliError> {
        while !evo.is_finished() {
            let r = evo.step().map_err(|e| CliError::Runtime(e.to_string()))?;
            log::info!(
                "generation {}: {} full, {} estimated, best {}",
                r.generation,
                r.full_trainings,
                r.partial_only,
                opt(r.best_fitness)
            );
            writer.on_generation(&r, evo.state())?;
            reports.push(r);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        writer.manifest.status = RunStatus::Failed;
        writer.manifest.error = Some(e.to_string());
        let timing = writer.timing(evo.state().counters);
        let p = writer.artifact("timing.json");
        let _ = write_json(&p, &timing);
        let _ = writer.flush_manifest();
        return Err(e);
    }
    let state = evo.into_state();
    let (best, timing) = writer.finish(&state, &data)?;
    Ok(RunResult {
        run_dir: dir,
        manifest: writer.manifest,
        reports,
        final_population: state.population,
        best,
        timing,
    })
}
