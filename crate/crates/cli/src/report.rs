//! `report`: consolidated CSV/JSON outputs from one run directory, or from
//! a full-mode and surrogate-mode pair.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use surronas_core::analytics::{
    energy_kwh, energy_saving_report, gene_proportions, EnergyParams, RunCost, SurrogateQuality,
};
use surronas_core::engine::EvolutionMode;
use surronas_core::genome::{parse_population, Genotype};

use crate::run::{opt, write_file, write_json, BestRecord, Manifest, RunStatus, Timing, GENERATION_HEADER};
use crate::CliError;

const NO_SURROGATE: &str = "n/a (no surrogate)";

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRow {
    pub generation: usize,
    pub id: u64,
    pub source: String,
    pub predicted: Option<f64>,
    pub actual: Option<f64>,
    pub ei: Option<f64>,
}

/// Everything `report` reads from a completed run directory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub timing: Timing,
    pub generations: Vec<Vec<GenerationRow>>,
    pub initial: Vec<Genotype>,
    pub final_population: Vec<Genotype>,
    pub best: Option<BestRecord>,
}

impl LoadedRun {
    fn label(&self) -> &'static str {
        mode_name(self.manifest.mode)
    }
}

fn mode_name(mode: EvolutionMode) -> &'static str {
    match mode {
        EvolutionMode::Full => "full",
        EvolutionMode::Surrogate => "surrogate",
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read(path)?).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<Option<T>, CliError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| CliError::Runtime(format!("{}:{line}: cannot parse '{s}'", path.display())))
}

pub fn parse_generation_csv(path: &Path) -> Result<Vec<GenerationRow>, CliError> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(GENERATION_HEADER) {
        return Err(CliError::Runtime(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(CliError::Runtime(format!("{}:{n}: expected 7 fields", path.display())));
        }
        let missing = || CliError::Runtime(format!("{}:{n}: missing required field", path.display()));
        rows.push(GenerationRow {
            generation: parse_field(path, n, f[0])?.ok_or_else(missing)?,
            id: parse_field(path, n, f[1])?.ok_or_else(missing)?,
            source: f[2].to_string(),
            predicted: parse_field(path, n, f[3])?,
            actual: parse_field(path, n, f[4])?,
            ei: parse_field(path, n, f[5])?,
        });
    }
    Ok(rows)
}

fn genotypes(path: &Path) -> Result<Vec<Genotype>, CliError> {
    let pop = parse_population(&read(path)?).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(pop.into_iter().map(|(_, g)| g).collect())
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(CliError::Runtime(format!(
            "incomplete run directory {}: missing manifest.json",
            dir.display()
        )));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    let gens = manifest.config.evolution.generations;
    let mut required: Vec<String> = ["config.json", "history.csv", "timing.json", "populations/initial.txt", "populations/final.txt"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    required.extend((1..=gens).map(|g| format!("generations/gen_{g:03}.csv")));
    let missing: Vec<&String> = required.iter().filter(|r| !dir.join(r.as_str()).is_file()).collect();
    if !missing.is_empty() || manifest.status != RunStatus::Complete {
        let mut msg = format!("incomplete run directory {}", dir.display());
        if manifest.status != RunStatus::Complete {
            let _ = write!(msg, " (status {:?})", manifest.status);
        }
        if !missing.is_empty() {
            let names: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
            let _ = write!(msg, ": missing {}", names.join(", "));
        }
        return Err(CliError::Runtime(msg));
    }
    let generations = (1..=gens)
        .map(|g| parse_generation_csv(&dir.join(format!("generations/gen_{g:03}.csv"))))
        .collect::<Result<_, _>>()?;
    let best_path = dir.join("best.json");
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        timing: read_json(&dir.join("timing.json"))?,
        generations,
        initial: genotypes(&dir.join("populations/initial.txt"))?,
        final_population: genotypes(&dir.join("populations/final.txt"))?,
        best: if best_path.is_file() { Some(read_json(&best_path)?) } else { None },
        manifest,
    })
}

fn pairs<'a>(rows: impl IntoIterator<Item = &'a GenerationRow>) -> (Vec<f64>, Vec<f64>) {
    rows.into_iter().filter_map(|r| Some((r.predicted?, r.actual?))).unzip()
}

fn quality_row(out: &mut String, scope: &str, pred: &[f64], actual: &[f64]) -> Result<Option<SurrogateQuality>, CliError> {
    let q = SurrogateQuality::from_pairs(pred, actual).map_err(|e| CliError::Runtime(e.to_string()))?;
    match &q {
        Some(q) => {
            let note = if q.r2.is_none() { "r2 undefined (constant measurements)" } else { "" };
            let _ = writeln!(out, "{scope},{},{},{},{},{note}", q.n_pairs, q.mse, q.kendall_tau, opt(q.r2));
        }
        None => {
            let _ = writeln!(out, "{scope},{},,,,fewer than 2 pairs", pred.len());
        }
    }
    Ok(q)
}

#[derive(Debug, Clone, Serialize)]
struct QualitySummary {
    pooled: Option<SurrogateQuality>,
    final_generation: Option<SurrogateQuality>,
    /// Per-generation MSE, generation 2 onward.
    mse_series: Vec<Option<f64>>,
}

fn quality(run: &LoadedRun) -> Result<(String, Option<QualitySummary>), CliError> {
    let mut out = String::from("scope,n_pairs,mse,kendall_tau,r2,note\n");
    if run.manifest.mode == EvolutionMode::Full {
        let _ = writeln!(out, "all,0,,,,{NO_SURROGATE}");
        return Ok((out, None));
    }
    let mut mse_series = Vec::new();
    for rows in run.generations.iter().skip(1) {
        let g = rows.first().map_or(0, |r| r.generation);
        let (p, a) = pairs(rows);
        let q = quality_row(&mut out, &format!("gen_{g:03}"), &p, &a)?;
        mse_series.push(q.map(|q| q.mse));
    }
    let (p, a) = pairs(run.generations.iter().flatten());
    let pooled = quality_row(&mut out, "pooled", &p, &a)?;
    let (p, a) = pairs(run.generations.last().into_iter().flatten());
    let final_generation = quality_row(&mut out, "final_generation", &p, &a)?;
    Ok((
        out,
        Some(QualitySummary {
            pooled,
            final_generation,
            mse_series,
        }),
    ))
}

fn pred_vs_actual(run: &LoadedRun) -> String {
    let mut out = String::from("gen,individual_id,predicted,actual\n");
    for r in run.generations.iter().flatten() {
        if let (Some(p), Some(a)) = (r.predicted, r.actual) {
            let _ = writeln!(out, "{},{},{p},{a}", r.generation, r.id);
        }
    }
    out
}

fn proportions(out: &mut String, run: &LoadedRun) -> Result<(), CliError> {
    for (snapshot, pop) in [("initial", &run.initial), ("final", &run.final_population)] {
        let rep = gene_proportions(snapshot, pop.iter()).map_err(|e| CliError::Runtime(e.to_string()))?;
        for (gene, p) in &rep.genes {
            let _ = writeln!(out, "{},{snapshot},gene,{gene},{p}", run.label());
        }
        for (group, p) in &rep.groups {
            let _ = writeln!(out, "{},{snapshot},group,{},{p}", run.label(), group.name());
        }
    }
    Ok(())
}

fn cost(run: &LoadedRun) -> RunCost {
    let c = run.timing.counters;
    RunCost {
        wall_seconds: run.timing.total_wall_seconds,
        full_trainings: c.full_trainings,
        partial_trainings: c.full_trainings + c.partial_only + c.failed,
        epochs_trained: c.epochs_trained,
    }
}

fn reference_figures() -> serde_json::Value {
    json!({
        "note": "published reference figures at full scale; not reproduced by desk-scale runs",
        "relative_energy_saving": 0.25,
        "energy_saved_kwh_all_runs": 89.28,
        "kendall_tau_range": [0.5647, 0.6791],
        "r2_range": [0.5026, 0.7786],
    })
}

/// Writes the report for one run, or a paired comparison, into `out_dir`.
pub fn cmd_report(runs: &[PathBuf], out_dir: Option<&Path>) -> Result<PathBuf, CliError> {
    if runs.is_empty() || runs.len() > 2 {
        return Err(CliError::Usage("report takes one run directory or a pair".into()));
    }
    let loaded: Vec<LoadedRun> = runs.iter().map(|d| load_run(d)).collect::<Result<_, _>>()?;
    if loaded.len() == 2 && loaded[0].manifest.mode == loaded[1].manifest.mode {
        return Err(CliError::Config("a paired report needs one full-mode and one surrogate-mode run".into()));
    }
    let out = out_dir.map(Path::to_path_buf).unwrap_or_else(|| runs[0].join("report"));

    // the surrogate-mode run, when present, supplies quality data
    let primary = loaded
        .iter()
        .find(|r| r.manifest.mode == EvolutionMode::Surrogate)
        .unwrap_or(&loaded[0]);
    let (quality_csv, quality) = quality(primary)?;
    write_file(&out.join("quality_per_gen.csv"), &quality_csv)?;
    write_file(&out.join("pred_vs_actual.csv"), &pred_vs_actual(primary))?;
    let mut props = String::from("run,snapshot,level,name,proportion\n");
    for r in &loaded {
        proportions(&mut props, r)?;
    }
    write_file(&out.join("gene_proportions.csv"), &props)?;

    let params = primary.manifest.config.energy;
    let per_run: Vec<serde_json::Value> = loaded
        .iter()
        .map(|r| {
            let c = cost(r);
            json!({
                "run": r.dir.display().to_string(),
                "mode": r.label(),
                "wall_seconds": c.wall_seconds,
                "energy_kwh": energy_kwh(&EnergyParams { runtime_hours: c.wall_seconds / 3600.0, ..params }),
                "full_trainings": c.full_trainings,
                "partial_trainings": c.partial_trainings,
                "epochs_trained": c.epochs_trained,
            })
        })
        .collect();
    let comparison = if loaded.len() == 2 {
        let sm = loaded.iter().find(|r| r.manifest.mode == EvolutionMode::Surrogate).unwrap();
        let fm = loaded.iter().find(|r| r.manifest.mode == EvolutionMode::Full).unwrap();
        Some(energy_saving_report(&cost(sm), &cost(fm), &params).map_err(|e| CliError::Runtime(e.to_string()))?)
    } else {
        None
    };
    let energy = json!({
        "parameters": params,
        "runs": per_run,
        "comparison": comparison,
        "reference": reference_figures(),
    });
    write_json(&out.join("energy.json"), &energy)?;

    let mut summary = String::new();
    for r in &loaded {
        let c = r.timing.counters;
        let _ = writeln!(summary, "run {} ({} mode, seed {})", r.dir.display(), r.label(), r.manifest.master_seed);
        let _ = writeln!(
            summary,
            "  full trainings {}, partial-only {}, failed {}, epochs {}",
            c.full_trainings, c.partial_only, c.failed, c.epochs_trained
        );
        match &r.best {
            Some(b) => {
                let _ = writeln!(
                    summary,
                    "  best validation accuracy {} (test {}), {} layers",
                    b.validation_accuracy,
                    opt(b.test_accuracy),
                    b.layers
                );
            }
            None => summary.push_str("  no successful full evaluation\n"),
        }
    }
    summary.push_str("\nsurrogate quality: ");
    match &quality {
        None => summary.push_str(NO_SURROGATE),
        Some(q) => match &q.pooled {
            Some(p) => {
                let _ = write!(
                    summary,
                    "pooled over {} pairs: mse {}, kendall tau {}, r2 {}",
                    p.n_pairs,
                    p.mse,
                    p.kendall_tau,
                    p.r2.map_or("undefined".to_string(), |v| v.to_string())
                );
            }
            None => summary.push_str("fewer than 2 predicted/measured pairs"),
        },
    }
    summary.push('\n');
    if let Some(c) = &comparison {
        let _ = writeln!(
            summary,
            "energy: surrogate {:.6} kWh vs full {:.6} kWh, saving {:.1}%; epochs saved {:.1}%",
            c.surrogate_kwh,
            c.full_kwh,
            100.0 * c.relative_saving,
            100.0 * c.relative_epoch_saving
        );
    }
    summary.push_str("gene proportions are counted over effective instructions only\n");
    summary.push_str(
        "\nreference figures (published, not reproduced here): about 25% energy saved; \
         kendall tau 0.5647-0.6791 and r2 0.5026-0.7786 at full scale\n",
    );
    write_file(&out.join("summary.txt"), &summary)?;
    Ok(out)
}
