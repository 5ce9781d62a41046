//! Line-oriented genotype text format.
//!
//! ```text
//! # registers=8
//! r[3] := CONV_64_3x3(r[1])
//! r[0] := MAX_POOL(r[3])
//! ```
//!
//! Lines starting with `#` or `//` are comments; the optional
//! `# registers=N` header pins the register count (otherwise it is inferred
//! from the largest id used). A population file is a sequence of such
//! blocks separated by blank lines.

use super::{GenomeError, Genotype, Instruction};

const REGISTERS_HEADER: &str = "# registers=";

pub fn serialize(g: &Genotype) -> String {
    let mut out = format!("{REGISTERS_HEADER}{}\n", g.num_registers);
    for instr in &g.instructions {
        out.push_str(&instr.to_string());
        out.push('\n');
    }
    out
}

pub fn parse(text: &str) -> Result<Genotype, GenomeError> {
    parse_block(text.lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_block<'a>(lines: impl Iterator<Item = (usize, &'a str)>) -> Result<Genotype, GenomeError> {
    let mut instructions = Vec::new();
    let mut declared: Option<(usize, usize)> = None;
    let mut last_line = 0;
    for (line_no, raw) in lines {
        last_line = line_no;
        let line = raw.trim();
        if let Some(n) = line.strip_prefix(REGISTERS_HEADER) {
            let n = n.trim().parse::<usize>().map_err(|_| GenomeError::Parse {
                line: line_no,
                message: format!("bad register count `{n}`"),
            })?;
            declared = Some((n, line_no));
            continue;
        }
        if line.is_empty() || line.starts_with('#') || line.starts_with("//") {
            continue;
        }
        instructions.push(parse_instruction(line).map_err(|message| GenomeError::Parse {
            line: line_no,
            message,
        })?);
    }
    if instructions.is_empty() {
        return Err(GenomeError::Parse {
            line: last_line.max(1),
            message: "no instructions".into(),
        });
    }
    let max_id = instructions
        .iter()
        .map(|i| i.dest.max(i.src))
        .max()
        .unwrap_or(0);
    let num_registers = match declared {
        Some((n, line)) if n <= max_id => {
            return Err(GenomeError::Parse {
                line,
                message: format!("register r[{max_id}] used but only {n} registers declared"),
            })
        }
        Some((n, _)) => n,
        None => max_id + 1,
    };
    Ok(Genotype::new(instructions, num_registers))
}

fn parse_register(s: &str) -> Result<usize, String> {
    s.trim()
        .strip_prefix("r[")
        .and_then(|s| s.strip_suffix(']'))
        .and_then(|id| id.parse().ok())
        .ok_or_else(|| format!("expected a register like `r[3]`, got `{}`", s.trim()))
}

fn parse_instruction(line: &str) -> Result<Instruction, String> {
    let (dest, rhs) = line
        .split_once(":=")
        .ok_or_else(|| "missing `:=`".to_string())?;
    let dest = parse_register(dest)?;
    let rhs = rhs.trim();
    let open = rhs.find('(').ok_or("missing `(` after gene name")?;
    let body = rhs[open + 1..]
        .strip_suffix(')')
        .ok_or("missing closing `)`")?;
    let gene = rhs[..open].trim().parse()?;
    let src = parse_register(body)?;
    Ok(Instruction { dest, gene, src })
}

/// Blocks separated by blank lines; comment lines inside a block are kept
/// as metadata by the caller if needed.
pub fn serialize_population<'a>(
    genotypes: impl IntoIterator<Item = (String, &'a Genotype)>,
) -> String {
    let mut blocks = Vec::new();
    for (label, g) in genotypes {
        let mut block = String::new();
        for l in label.lines() {
            block.push_str("# ");
            block.push_str(l);
            block.push('\n');
        }
        block.push_str(&serialize(g));
        blocks.push(block);
    }
    blocks.join("\n")
}

/// Parses a population file; returns each block's leading comment (without
/// the `# ` prefix, registers header excluded) alongside the genotype.
pub fn parse_population(text: &str) -> Result<Vec<(String, Genotype)>, GenomeError> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    for (no, line) in lines.chain(std::iter::once((0, ""))) {
        if line.trim().is_empty() {
            if block.iter().any(|(_, l)| {
                let t = l.trim();
                !t.starts_with('#') && !t.starts_with("//")
            }) {
                let label = block
                    .iter()
                    .filter_map(|(_, l)| l.trim().strip_prefix('#'))
                    .map(str::trim)
                    .filter(|l| !l.starts_with("registers="))
                    .collect::<Vec<_>>()
                    .join("\n");
                out.push((label, parse_block(block.drain(..))?));
            }
            block.clear();
        } else {
            block.push((no, line));
        }
    }
    Ok(out)
}
