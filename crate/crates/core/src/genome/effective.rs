use std::collections::{BTreeSet, HashMap};

use super::{GenomeError, Genotype, Instruction};

/// Indices of the effective instructions, ascending.
///
/// Backward data-flow from the last write to r[0]: an instruction is
/// effective iff its destination is live at that point, in which case the
/// destination is killed and the source becomes live. Anything after the
/// final r[0] write, and any dead store, is non-effective.
pub fn mark_effective(g: &Genotype) -> Result<BTreeSet<usize>, GenomeError> {
    let last_out = g
        .instructions
        .iter()
        .rposition(|i| i.dest == 0)
        .ok_or(GenomeError::NoOutputWrite)?;

    let mut live = BTreeSet::from([0usize]);
    let mut effective = BTreeSet::new();
    for idx in (0..=last_out).rev() {
        let instr = &g.instructions[idx];
        if live.remove(&instr.dest) {
            live.insert(instr.src);
            effective.insert(idx);
        }
    }
    Ok(effective)
}

/// Strips non-effective code and renumbers registers compactly in order of
/// first appearance, keeping r[0] as the output register.
pub fn repair(g: &Genotype) -> Result<Genotype, GenomeError> {
    let effective = mark_effective(g)?;
    let mut ids: HashMap<usize, usize> = HashMap::from([(0, 0)]);
    let mut rename = |r: usize| {
        let next = ids.len();
        *ids.entry(r).or_insert(next)
    };
    let instructions: Vec<Instruction> = effective
        .iter()
        .map(|&idx| {
            let i = g.instructions[idx];
            // source first: it is read before the destination is written
            let src = rename(i.src);
            let dest = rename(i.dest);
            Instruction {
                dest,
                gene: i.gene,
                src,
            }
        })
        .collect();
    let num_registers = ids.len();
    Ok(Genotype::new(instructions, num_registers))
}
