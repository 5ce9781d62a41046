use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gene, GenomeConfig, GenomeError, Genotype, Instruction};

/// Per-offspring probabilities of applying each mutation kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationRates {
    /// Replace one instruction's gene or one of its register ids.
    pub micro: f64,
    /// Insert or delete one instruction.
    #[serde(rename = "macro")]
    pub macro_: f64,
}

impl Default for MutationRates {
    fn default() -> Self {
        Self {
            micro: 0.3,
            macro_: 0.2,
        }
    }
}

fn random_instruction<R: Rng + ?Sized>(cfg: &GenomeConfig, rng: &mut R) -> Instruction {
    Instruction {
        gene: cfg.sample_gene(rng),
        dest: rng.gen_range(0..cfg.num_registers),
        src: rng.gen_range(0..cfg.num_registers),
    }
}

pub fn random_genotype<R: Rng + ?Sized>(
    cfg: &GenomeConfig,
    rng: &mut R,
) -> Result<Genotype, GenomeError> {
    cfg.validate()?;
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let instructions = (0..len).map(|_| random_instruction(cfg, rng)).collect();
    let mut g = Genotype::new(instructions, cfg.num_registers);
    g.force_output_write();
    Ok(g)
}

/// A contiguous `start..start + len` slice of a parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

fn random_segment<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Segment {
    let start = rng.gen_range(0..=len);
    let seg = rng.gen_range(0..=len - start);
    Segment { start, len: seg }
}

/// Two-point linear crossover: each child swaps its own segment for the
/// other parent's.
pub fn crossover<R: Rng + ?Sized>(
    a: &Genotype,
    b: &Genotype,
    cfg: &GenomeConfig,
    rng: &mut R,
) -> (Genotype, Genotype) {
    let sa = random_segment(a.len(), rng);
    let sb = random_segment(b.len(), rng);
    crossover_at(a, b, sa, sb, cfg)
}

/// Deterministic core of [`crossover`].
///
/// When a child would exceed `max_len` the received segment is truncated;
/// when it would fall below `min_len` fewer of its own instructions are
/// removed.
pub fn crossover_at(
    a: &Genotype,
    b: &Genotype,
    sa: Segment,
    sb: Segment,
    cfg: &GenomeConfig,
) -> (Genotype, Genotype) {
    (splice(a, sa, b, sb, cfg), splice(b, sb, a, sa, cfg))
}

fn splice(host: &Genotype, own: Segment, donor: &Genotype, recv: Segment, cfg: &GenomeConfig) -> Genotype {
    let kept = host.len() - own.len;
    let received = recv.len.min(cfg.max_len.saturating_sub(kept));
    // put back some of the host's own segment if the child is too short
    let removed = if kept + received < cfg.min_len {
        own.len.saturating_sub(cfg.min_len - (kept + received))
    } else {
        own.len
    };
    let mut instructions = Vec::with_capacity(host.len() - removed + received);
    instructions.extend_from_slice(&host.instructions[..own.start]);
    instructions.extend_from_slice(&donor.instructions[recv.start..recv.start + received]);
    instructions.extend_from_slice(&host.instructions[own.start + removed..]);
    let mut child = Genotype::new(instructions, host.num_registers);
    child.force_output_write();
    child
}

fn different_gene<R: Rng + ?Sized>(current: Gene, cfg: &GenomeConfig, rng: &mut R) -> Gene {
    for _ in 0..32 {
        let g = cfg.sample_gene(rng);
        if g != current {
            return g;
        }
    }
    let others: Vec<Gene> = Gene::all().into_iter().filter(|&g| g != current).collect();
    others[rng.gen_range(0..others.len())]
}

fn different_register<R: Rng + ?Sized>(current: usize, n: usize, rng: &mut R) -> usize {
    let r = rng.gen_range(0..n - 1);
    if r >= current {
        r + 1
    } else {
        r
    }
}

fn micro_mutation<R: Rng + ?Sized>(g: &mut Genotype, cfg: &GenomeConfig, rng: &mut R) {
    let idx = rng.gen_range(0..g.len());
    let is_last = idx + 1 == g.len();
    let n = g.num_registers;
    // the last instruction's destination is pinned to r[0]
    let mut fields = vec![0u8];
    if n > 1 {
        fields.push(2);
        if !is_last {
            fields.push(1);
        }
    }
    let instr = &mut g.instructions[idx];
    match fields[rng.gen_range(0..fields.len())] {
        0 => instr.gene = different_gene(instr.gene, cfg, rng),
        1 => instr.dest = different_register(instr.dest, n, rng),
        _ => instr.src = different_register(instr.src, n, rng),
    }
}

fn macro_mutation<R: Rng + ?Sized>(g: &mut Genotype, cfg: &GenomeConfig, rng: &mut R) {
    let can_insert = g.len() < cfg.max_len;
    let can_delete = g.len() > cfg.min_len;
    let insert = match (can_insert, can_delete) {
        (false, false) => return,
        (true, false) => true,
        (false, true) => false,
        (true, true) => rng.gen_bool(0.5),
    };
    if insert {
        let pos = rng.gen_range(0..=g.len());
        let instr = random_instruction(cfg, rng);
        g.instructions.insert(pos, instr);
    } else {
        let pos = rng.gen_range(0..g.len());
        g.instructions.remove(pos);
    }
}

pub fn mutate<R: Rng + ?Sized>(
    g: &Genotype,
    rates: &MutationRates,
    cfg: &GenomeConfig,
    rng: &mut R,
) -> Genotype {
    let mut out = g.clone();
    if rates.micro > 0.0 && rng.gen_bool(rates.micro.min(1.0)) {
        micro_mutation(&mut out, cfg, rng);
    }
    if rates.macro_ > 0.0 && rng.gen_bool(rates.macro_.min(1.0)) {
        macro_mutation(&mut out, cfg, rng);
    }
    out.force_output_write();
    out
}
