//! Linear genetic programming genotype over neural-layer opcodes.
//!
//! A [`Genotype`] is an ordered list of two-register instructions
//! `r[dest] := GENE(r[src])`. Registers hold tensors rather than scalars;
//! every register starts out holding the network input and register 0 is
//! the output register that feeds the fixed dense classifier head.

mod effective;
mod text;
mod variation;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use effective::{mark_effective, repair};
pub use text::{parse, parse_population, serialize, serialize_population};
pub use variation::{crossover, mutate, random_genotype, MutationRates};

/// Errors raised by genome construction, analysis and parsing.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GenomeError {
    #[error("invalid genome configuration: {0}")]
    Config(String),
    #[error("no instruction writes the output register r[0]")]
    NoOutputWrite,
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub const CONV_FILTERS: [usize; 3] = [32, 64, 128];
pub const CONV_KERNELS: [usize; 2] = [3, 5];

/// Dropout rates available to the dropout genes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DropoutRate {
    Quarter,
    Half,
}

impl DropoutRate {
    pub fn value(self) -> f64 {
        match self {
            DropoutRate::Quarter => 0.25,
            DropoutRate::Half => 0.5,
        }
    }
}

/// One layer opcode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gene {
    Conv { filters: usize, kernel: usize },
    MaxPool,
    AvgPool,
    BatchNorm,
    Dropout(DropoutRate),
}

/// The four functional groups used for initial proportions and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneGroup {
    Dropout,
    BatchNorm,
    Pooling,
    Convolution,
}

impl GeneGroup {
    pub const ALL: [GeneGroup; 4] = [
        GeneGroup::Dropout,
        GeneGroup::BatchNorm,
        GeneGroup::Pooling,
        GeneGroup::Convolution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneGroup::Dropout => "dropout",
            GeneGroup::BatchNorm => "batch_norm",
            GeneGroup::Pooling => "pooling",
            GeneGroup::Convolution => "convolution",
        }
    }
}

impl Gene {
    /// Every gene in canonical order: conv genes first, then pooling,
    /// batch normalisation and dropout.
    pub fn all() -> Vec<Gene> {
        let mut genes = Vec::with_capacity(11);
        for &kernel in &CONV_KERNELS {
            for &filters in &CONV_FILTERS {
                genes.push(Gene::Conv { filters, kernel });
            }
        }
        genes.push(Gene::MaxPool);
        genes.push(Gene::AvgPool);
        genes.push(Gene::BatchNorm);
        genes.push(Gene::Dropout(DropoutRate::Quarter));
        genes.push(Gene::Dropout(DropoutRate::Half));
        genes
    }

    pub fn group(self) -> GeneGroup {
        match self {
            Gene::Conv { .. } => GeneGroup::Convolution,
            Gene::MaxPool | Gene::AvgPool => GeneGroup::Pooling,
            Gene::BatchNorm => GeneGroup::BatchNorm,
            Gene::Dropout(_) => GeneGroup::Dropout,
        }
    }
}

impl fmt::Display for Gene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gene::Conv { filters, kernel } => write!(f, "CONV_{filters}_{kernel}x{kernel}"),
            Gene::MaxPool => f.write_str("MAX_POOL"),
            Gene::AvgPool => f.write_str("AVG_POOL"),
            Gene::BatchNorm => f.write_str("BATCH_NORM"),
            Gene::Dropout(DropoutRate::Quarter) => f.write_str("DROPOUT_0.25"),
            Gene::Dropout(DropoutRate::Half) => f.write_str("DROPOUT_0.5"),
        }
    }
}

impl FromStr for Gene {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MAX_POOL" => return Ok(Gene::MaxPool),
            "AVG_POOL" => return Ok(Gene::AvgPool),
            "BATCH_NORM" => return Ok(Gene::BatchNorm),
            "DROPOUT_0.25" => return Ok(Gene::Dropout(DropoutRate::Quarter)),
            "DROPOUT_0.5" | "DROPOUT_0.50" => return Ok(Gene::Dropout(DropoutRate::Half)),
            _ => {}
        }
        let rest = s
            .strip_prefix("CONV_")
            .ok_or_else(|| format!("unknown gene `{s}`"))?;
        let (filters, window) = rest
            .split_once('_')
            .ok_or_else(|| format!("malformed conv gene `{s}`"))?;
        let filters: usize = filters
            .parse()
            .map_err(|_| format!("bad filter count in `{s}`"))?;
        let (kh, kw) = window
            .split_once('x')
            .ok_or_else(|| format!("malformed kernel size in `{s}`"))?;
        let kernel: usize = kh.parse().map_err(|_| format!("bad kernel in `{s}`"))?;
        if kw.parse::<usize>().ok() != Some(kernel) {
            return Err(format!("non-square kernel in `{s}`"));
        }
        if !CONV_FILTERS.contains(&filters) || !CONV_KERNELS.contains(&kernel) {
            return Err(format!("conv gene `{s}` is outside the gene set"));
        }
        Ok(Gene::Conv { filters, kernel })
    }
}

impl Serialize for Gene {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Gene {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `r[dest] := gene(r[src])`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub dest: usize,
    pub gene: Gene,
    pub src: usize,
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r[{}] := {}(r[{}])", self.dest, self.gene, self.src)
    }
}

/// The evolvable program. Length bounds live in [`GenomeConfig`]; the
/// variation operators enforce them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub instructions: Vec<Instruction>,
    pub num_registers: usize,
}

impl Genotype {
    pub fn new(instructions: Vec<Instruction>, num_registers: usize) -> Self {
        Self {
            instructions,
            num_registers,
        }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Structural validity: non-empty, registers in range, r[0] written.
    pub fn is_valid(&self) -> bool {
        !self.instructions.is_empty()
            && self
                .instructions
                .iter()
                .all(|i| i.dest < self.num_registers && i.src < self.num_registers)
            && self.instructions.iter().any(|i| i.dest == 0)
    }

    /// Valid and within `cfg`'s bounds.
    pub fn satisfies(&self, cfg: &GenomeConfig) -> bool {
        self.is_valid()
            && self.num_registers == cfg.num_registers
            && (cfg.min_len..=cfg.max_len).contains(&self.len())
    }

    pub(crate) fn force_output_write(&mut self) {
        if let Some(last) = self.instructions.last_mut() {
            last.dest = 0;
        }
    }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize(self))
    }
}

/// Probability mass for one gene in the initialisation distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneWeight {
    pub gene: Gene,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenomeConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub num_registers: usize,
    pub proportions: Vec<GeneWeight>,
}

impl Default for GenomeConfig {
    fn default() -> Self {
        Self {
            min_len: 4,
            max_len: 16,
            num_registers: 8,
            proportions: default_proportions(),
        }
    }
}

/// A quarter of the mass per functional group, split evenly between the
/// genes of each group.
pub fn default_proportions() -> Vec<GeneWeight> {
    let genes = Gene::all();
    genes
        .iter()
        .map(|&gene| {
            let group_size = genes.iter().filter(|g| g.group() == gene.group()).count();
            GeneWeight {
                gene,
                p: 0.25 / group_size as f64,
            }
        })
        .collect()
}

impl GenomeConfig {
    pub fn validate(&self) -> Result<(), GenomeError> {
        if self.min_len == 0 {
            return Err(GenomeError::Config("min_len must be at least 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(GenomeError::Config(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        if self.num_registers == 0 {
            return Err(GenomeError::Config("num_registers must be at least 1".into()));
        }
        if self.proportions.is_empty() {
            return Err(GenomeError::Config("gene proportions are empty".into()));
        }
        if let Some(w) = self.proportions.iter().find(|w| !(w.p >= 0.0 && w.p.is_finite())) {
            return Err(GenomeError::Config(format!(
                "proportion for {} is not a non-negative number",
                w.gene
            )));
        }
        let total: f64 = self.proportions.iter().map(|w| w.p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GenomeError::Config(format!(
                "gene proportions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn sample_gene<R: Rng + ?Sized>(&self, rng: &mut R) -> Gene {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for w in &self.proportions {
            acc += w.p;
            if u < acc {
                return w.gene;
            }
        }
        // u landed in the round-off tail above the cumulative sum
        self.proportions
            .iter()
            .rev()
            .find(|w| w.p > 0.0)
            .map(|w| w.gene)
            .unwrap_or(self.proportions[0].gene)
    }
}
