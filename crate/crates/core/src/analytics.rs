//! Surrogate quality metrics, gene usage and energy estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::genome::{mark_effective, Gene, GeneGroup, GenomeError, Genotype};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnalyticsError {
    #[error("need at least {needed} values, got {found}")]
    TooShort { needed: usize, found: usize },
    #[error("length mismatch: {0} predictions vs {1} measurements")]
    Length(usize, usize),
    #[error("NaN in metric input")]
    NaN,
    #[error("R² undefined: measured values have zero variance")]
    ZeroVariance,
    #[error("invalid energy parameters: {0}")]
    Energy(String),
    #[error(transparent)]
    Genome(#[from] GenomeError),
}

fn check(pred: &[f64], actual: &[f64], needed: usize) -> Result<(), AnalyticsError> {
    if pred.len() != actual.len() {
        return Err(AnalyticsError::Length(pred.len(), actual.len()));
    }
    if pred.len() < needed {
        return Err(AnalyticsError::TooShort {
            needed,
            found: pred.len(),
        });
    }
    Ok(())
}

pub fn mse(pred: &[f64], actual: &[f64]) -> Result<f64, AnalyticsError> {
    check(pred, actual, 1)?;
    let sum: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn r2_score(pred: &[f64], actual: &[f64]) -> Result<f64, AnalyticsError> {
    check(pred, actual, 2)?;
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(AnalyticsError::ZeroVariance);
    }
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Number of tied pairs within runs of equal values of a sorted slice.
fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that returns the number of inversions.
fn sort_counting_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], buf) + sort_counting_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Tie-corrected Kendall rank correlation (tau-b), O(n log n).
///
/// Returns 0 with a warning when either input is constant.
pub fn kendall_tau(pred: &[f64], actual: &[f64]) -> Result<f64, AnalyticsError> {
    check(pred, actual, 2)?;
    if pred.iter().chain(actual).any(|v| v.is_nan()) {
        return Err(AnalyticsError::NaN);
    }
    let n = pred.len() as u64;
    let n0 = n * (n - 1) / 2;
    let mut pairs: Vec<(f64, f64)> = pred.iter().copied().zip(actual.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let mut n3 = 0u64;
    let mut run = 1u64;
    for w in pairs.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            n3 += run * (run - 1) / 2;
            run = 1;
        }
    }
    n3 += run * (run - 1) / 2;

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = sort_counting_swaps(&mut ys, &mut Vec::with_capacity(pairs.len()));
    let n2 = tied_pairs(&ys);

    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    if denom == 0.0 {
        log::warn!("Kendall tau undefined for constant input; reporting 0");
        return Ok(0.0);
    }
    let numer = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * swaps as f64;
    Ok((numer / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateQuality {
    pub mse: f64,
    pub kendall_tau: f64,
    /// `None` when the measured values are all equal.
    pub r2: Option<f64>,
    pub n_pairs: usize,
}

impl SurrogateQuality {
    /// Quality over (predicted, measured) pairs; `None` below two pairs.
    pub fn from_pairs(pred: &[f64], actual: &[f64]) -> Result<Option<Self>, AnalyticsError> {
        check(pred, actual, 0)?;
        if pred.len() < 2 {
            return Ok(None);
        }
        let r2 = match r2_score(pred, actual) {
            Ok(v) => Some(v),
            Err(AnalyticsError::ZeroVariance) => None,
            Err(e) => return Err(e),
        };
        Ok(Some(Self {
            mse: mse(pred, actual)?,
            kendall_tau: kendall_tau(pred, actual)?,
            r2,
            n_pairs: pred.len(),
        }))
    }
}

/// Inputs to the energy estimate `E = r_t (P_c U + P_m) PUE PSF`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyParams {
    /// Runtime in hours.
    pub runtime_hours: f64,
    /// Core power draw in kW.
    pub core_power_kw: f64,
    pub usage: f64,
    /// Memory power draw in kW.
    pub memory_power_kw: f64,
    pub pue: f64,
    pub psf: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            runtime_hours: 0.0,
            core_power_kw: 0.0125,
            usage: 1.0,
            memory_power_kw: 0.0019,
            pue: 1.67,
            psf: 1.0,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        let vals = [
            self.runtime_hours,
            self.core_power_kw,
            self.usage,
            self.memory_power_kw,
            self.pue,
            self.psf,
        ];
        if !vals.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(AnalyticsError::Energy("all parameters must be finite and non-negative".into()));
        }
        if self.usage > 1.0 {
            return Err(AnalyticsError::Energy("usage factor must be in [0, 1]".into()));
        }
        if self.pue < 1.0 || self.psf < 1.0 {
            return Err(AnalyticsError::Energy("PUE and PSF must be at least 1".into()));
        }
        Ok(())
    }
}

/// Energy in kWh.
pub fn energy_kwh(p: &EnergyParams) -> f64 {
    p.runtime_hours * (p.core_power_kw * p.usage + p.memory_power_kw) * p.pue * p.psf
}

/// Measured cost of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunCost {
    pub wall_seconds: f64,
    pub full_trainings: usize,
    pub partial_trainings: usize,
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyComparison {
    pub surrogate_kwh: f64,
    pub full_kwh: f64,
    pub saved_kwh: f64,
    /// Fraction of the full-mode energy saved.
    pub relative_saving: f64,
    pub surrogate: RunCost,
    pub full: RunCost,
    /// `1 - epochs(surrogate) / epochs(full)`
    pub relative_epoch_saving: f64,
}

/// Energy of each run from its measured wall time, with `params` supplying
/// everything except the runtime.
pub fn energy_saving_report(
    surrogate: &RunCost,
    full: &RunCost,
    params: &EnergyParams,
) -> Result<EnergyComparison, AnalyticsError> {
    params.validate()?;
    for c in [surrogate, full] {
        if !(c.wall_seconds.is_finite() && c.wall_seconds >= 0.0) {
            return Err(AnalyticsError::Energy("missing or invalid wall time".into()));
        }
    }
    let at = |c: &RunCost| {
        energy_kwh(&EnergyParams {
            runtime_hours: c.wall_seconds / 3600.0,
            ..*params
        })
    };
    let (sm, fm) = (at(surrogate), at(full));
    let ratio = |a: f64, b: f64| if b > 0.0 { 1.0 - a / b } else { 0.0 };
    Ok(EnergyComparison {
        surrogate_kwh: sm,
        full_kwh: fm,
        saved_kwh: fm - sm,
        relative_saving: ratio(sm, fm),
        surrogate: *surrogate,
        full: *full,
        relative_epoch_saving: ratio(surrogate.epochs_trained as f64, full.epochs_trained as f64),
    })
}

/// Gene usage over the effective instructions of a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneProportionReport {
    pub snapshot: String,
    pub total_effective: usize,
    /// Every gene, including unused ones, in [`Gene::all`] order.
    pub genes: Vec<(Gene, f64)>,
    pub groups: BTreeMap<GeneGroup, f64>,
}

pub fn gene_proportions<'a>(
    snapshot: &str,
    population: impl IntoIterator<Item = &'a Genotype>,
) -> Result<GeneProportionReport, AnalyticsError> {
    let mut counts: BTreeMap<Gene, usize> = BTreeMap::new();
    let mut total = 0usize;
    for g in population {
        for idx in mark_effective(g)? {
            *counts.entry(g.instructions[idx].gene).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(AnalyticsError::TooShort { needed: 1, found: 0 });
    }
    let genes: Vec<(Gene, f64)> = Gene::all()
        .into_iter()
        .map(|g| (g, counts.get(&g).copied().unwrap_or(0) as f64 / total as f64))
        .collect();
    let mut groups: BTreeMap<GeneGroup, f64> = GeneGroup::ALL.iter().map(|g| (*g, 0.0)).collect();
    for (gene, count) in &counts {
        *groups.get_mut(&gene.group()).unwrap() += *count as f64 / total as f64;
    }
    Ok(GeneProportionReport {
        snapshot: snapshot.to_string(),
        total_effective: total,
        genes,
        groups,
    })
}
