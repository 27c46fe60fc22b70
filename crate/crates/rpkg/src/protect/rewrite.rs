//! Shared bytecode rewriting machinery: qualified-condition discovery,
//! block extraction checks, and target-fixing splices.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::vm::isa::{Function, Instruction, Program};

use super::ProtectError;

/// A `v == const` equality branch, the injection point for bombs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualifiedCondition {
    pub function: String,
    pub func_idx: usize,
    pub index: usize,
    pub const_v: u32,
}

/// A qualified condition whose guarded block can be lifted out whole:
/// `JNEC rs, imm, block_end` followed by a straight-line block of
/// side-effect-free-except-OUT instructions whose register writes are
/// dead outside the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractableSite {
    pub func_idx: usize,
    pub index: usize,
    pub rs: u8,
    pub imm: u32,
    pub block_end: usize,
}

impl ExtractableSite {
    pub fn block<'a>(&self, program: &'a Program) -> &'a [Instruction] {
        &program.functions[self.func_idx].instructions[self.index + 1..self.block_end]
    }
}

/// Exactly the JEQC/JNEC instructions, in program order.
pub fn find_qualified_conditions(program: &Program) -> Vec<QualifiedCondition> {
    let mut out = Vec::new();
    for (func_idx, f) in program.functions.iter().enumerate() {
        for (index, ins) in f.instructions.iter().enumerate() {
            match ins {
                Instruction::Jeqc { imm, .. } | Instruction::Jnec { imm, .. } => {
                    out.push(QualifiedCondition {
                        function: f.name.clone(),
                        func_idx,
                        index,
                        const_v: *imm,
                    });
                }
                _ => {}
            }
        }
    }
    out
}

fn is_block_instruction(ins: &Instruction) -> bool {
    matches!(
        ins,
        Instruction::Const { .. }
            | Instruction::Mov { .. }
            | Instruction::Alu { .. }
            | Instruction::Out { .. }
    )
}

/// Conservative extraction check: the fall-through block of a JNEC is
/// straight-line, nothing jumps into it, and no instruction outside the
/// block reads a register the block writes.
pub fn find_extractable_sites(program: &Program) -> Vec<ExtractableSite> {
    let mut out = Vec::new();
    for (func_idx, f) in program.functions.iter().enumerate() {
        'site: for (index, ins) in f.instructions.iter().enumerate() {
            let (rs, imm, t) = match ins {
                Instruction::Jnec { rs, imm, t } => (*rs, *imm, *t as usize),
                _ => continue,
            };
            if t <= index + 1 || t > f.instructions.len() {
                continue;
            }
            let block = &f.instructions[index + 1..t];
            if !block.iter().all(is_block_instruction) {
                continue;
            }
            let mut written = [false; 256];
            for b in block {
                for r in b.regs_written() {
                    written[r as usize] = true;
                }
            }
            for (j, other) in f.instructions.iter().enumerate() {
                if j > index && j < t {
                    continue;
                }
                if let Some(target) = other.branch_target() {
                    let target = target as usize;
                    if target > index && target < t {
                        continue 'site;
                    }
                }
                if other.regs_read().iter().any(|r| written[*r as usize]) {
                    continue 'site;
                }
            }
            out.push(ExtractableSite { func_idx, index, rs, imm, block_end: t });
        }
    }
    out
}

/// Seeded choice of ⌈density × found⌉ sites, returned in descending
/// (function, index) order so splices never invalidate later sites.
/// Overlapping blocks are skipped in favor of the earlier pick.
pub fn select_sites(
    sites: &[ExtractableSite],
    density: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ExtractableSite> {
    let want = ((density * sites.len() as f64).ceil() as usize).min(sites.len());
    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.shuffle(rng);
    let mut chosen: Vec<ExtractableSite> = Vec::new();
    for idx in order {
        if chosen.len() >= want {
            break;
        }
        let s = &sites[idx];
        let overlaps = chosen.iter().any(|c| {
            c.func_idx == s.func_idx && c.index < s.block_end && s.index < c.block_end
        });
        if !overlaps {
            chosen.push(s.clone());
        }
    }
    chosen.sort_by(|a, b| (b.func_idx, b.index).cmp(&(a.func_idx, a.index)));
    chosen
}

/// Replaces instructions `start..end` with `replacement`, shifting
/// every branch target ≥ `end` by the length delta. The replacement's
/// own targets must already be in final coordinates.
pub fn splice(func: &mut Function, start: usize, end: usize, replacement: Vec<Instruction>) {
    let delta = replacement.len() as isize - (end - start) as isize;
    for (j, ins) in func.instructions.iter_mut().enumerate() {
        if j >= start && j < end {
            continue;
        }
        if let Some(t) = ins.branch_target_mut() {
            if *t as usize >= end {
                *t = (*t as isize + delta) as u16;
            }
        }
    }
    func.instructions.splice(start..end, replacement);
}

pub fn fresh_reg(func: &mut Function) -> Result<u8, ProtectError> {
    if func.n_regs == u8::MAX {
        return Err(ProtectError::RegisterPressure(func.name.clone()));
    }
    let r = func.n_regs;
    func.n_regs += 1;
    Ok(r)
}

/// Registers a block reads before writing, in first-use order. These
/// become the parameters of the extracted payload function.
pub fn live_ins(block: &[Instruction]) -> Vec<u8> {
    let mut written = [false; 256];
    let mut seen = [false; 256];
    let mut out = Vec::new();
    for ins in block {
        for r in ins.regs_read() {
            if !written[r as usize] && !seen[r as usize] {
                seen[r as usize] = true;
                out.push(r);
            }
        }
        for r in ins.regs_written() {
            written[r as usize] = true;
        }
    }
    out
}

/// Rewrites a block so live-ins become registers `0..n` and every other
/// register gets a fresh local slot. Returns the remapped instructions
/// and the register count they need.
pub fn remap_block(block: &[Instruction], live: &[u8]) -> (Vec<Instruction>, u8) {
    let mut map: [Option<u8>; 256] = [None; 256];
    let mut next = 0u8;
    for r in live {
        map[*r as usize] = Some(next);
        next += 1;
    }
    let assign = |r: u8, map: &mut [Option<u8>; 256], next: &mut u8| -> u8 {
        if let Some(m) = map[r as usize] {
            m
        } else {
            let m = *next;
            *next += 1;
            map[r as usize] = Some(m);
            m
        }
    };
    let remapped = block
        .iter()
        .map(|ins| match ins {
            Instruction::Const { rd, imm } => Instruction::Const {
                rd: assign(*rd, &mut map, &mut next),
                imm: *imm,
            },
            Instruction::Mov { rd, rs } => {
                let rs = assign(*rs, &mut map, &mut next);
                Instruction::Mov { rd: assign(*rd, &mut map, &mut next), rs }
            }
            Instruction::Alu { op, rd, ra, rb } => {
                let ra = assign(*ra, &mut map, &mut next);
                let rb = assign(*rb, &mut map, &mut next);
                Instruction::Alu { op: *op, rd: assign(*rd, &mut map, &mut next), ra, rb }
            }
            Instruction::Out { rs } => Instruction::Out { rs: assign(*rs, &mut map, &mut next) },
            other => other.clone(),
        })
        .collect();
    (remapped, next.max(1))
}

pub fn intern_string(program: &mut Program, s: &str) -> u16 {
    if let Some(i) = program.string_table.iter().position(|x| x == s) {
        return i as u16;
    }
    program.string_table.push(s.to_string());
    (program.string_table.len() - 1) as u16
}

pub fn intern_data(program: &mut Program, d: &[u8]) -> u16 {
    if let Some(i) = program.data_table.iter().position(|x| x == d) {
        return i as u16;
    }
    program.data_table.push(d.to_vec());
    (program.data_table.len() - 1) as u16
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::AluOp;
    use rand_chacha::rand_core::SeedableRng;

    fn site_program() -> Program {
        Program {
            functions: vec![Function {
                name: "f".into(),
                n_params: 1,
                n_regs: 4,
                instructions: vec![
                    Instruction::Jnec { rs: 0, imm: 7, t: 4 },
                    Instruction::Const { rd: 1, imm: 10 },
                    Instruction::Alu { op: AluOp::Add, rd: 2, ra: 0, rb: 1 },
                    Instruction::Out { rs: 2 },
                    Instruction::Ret { rs: 0 },
                ],
            }],
            string_table: vec![],
            data_table: vec![],
            dispatch_table: vec![],
            entry: 0,
        }
    }

    #[test]
    fn finds_all_equality_branches() {
        let p = site_program();
        let found = find_qualified_conditions(&p);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].const_v, 7);
        assert_eq!(found[0].index, 0);
    }

    #[test]
    fn straight_line_program_has_no_conditions() {
        let mut p = site_program();
        p.functions[0].instructions[0] = Instruction::Const { rd: 3, imm: 0 };
        assert!(find_qualified_conditions(&p).is_empty());
    }

    #[test]
    fn naive_oracle_agrees_with_scanner() {
        // Independent pattern match over the decoded instruction list.
        let p = site_program();
        let mut oracle = 0;
        for f in &p.functions {
            for ins in &f.instructions {
                if matches!(ins, Instruction::Jeqc { .. } | Instruction::Jnec { .. }) {
                    oracle += 1;
                }
            }
        }
        assert_eq!(find_qualified_conditions(&p).len(), oracle);
    }

    #[test]
    fn extractable_site_found_with_live_ins() {
        let p = site_program();
        let sites = find_extractable_sites(&p);
        assert_eq!(sites.len(), 1);
        let block = sites[0].block(&p);
        assert_eq!(live_ins(block), vec![0]);
    }

    #[test]
    fn block_read_after_skip_blocks_extraction() {
        let mut p = site_program();
        // Ret now reads r2, which the block writes.
        p.functions[0].instructions[4] = Instruction::Ret { rs: 2 };
        assert!(find_extractable_sites(&p).is_empty());
    }

    #[test]
    fn splice_shifts_targets_past_the_hole() {
        let mut f = Function {
            name: "f".into(),
            n_params: 0,
            n_regs: 2,
            instructions: vec![
                Instruction::Jnec { rs: 0, imm: 1, t: 3 },
                Instruction::Const { rd: 1, imm: 5 },
                Instruction::Out { rs: 1 },
                Instruction::Halt,
            ],
        };
        splice(
            &mut f,
            1,
            3,
            vec![
                Instruction::Const { rd: 1, imm: 6 },
                Instruction::Const { rd: 1, imm: 7 },
                Instruction::Out { rs: 1 },
            ],
        );
        assert_eq!(f.instructions.len(), 5);
        assert_eq!(f.instructions[0], Instruction::Jnec { rs: 0, imm: 1, t: 4 });
        assert_eq!(f.instructions[4], Instruction::Halt);
    }

    #[test]
    fn select_sites_is_seeded_and_rounds_up() {
        let p = site_program();
        let sites = find_extractable_sites(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_sites(&sites, 0.1, &mut rng).len(), 1);
    }

    #[test]
    fn remap_assigns_params_then_locals() {
        let p = site_program();
        let sites = find_extractable_sites(&p);
        let block = sites[0].block(&p);
        let (remapped, n_regs) = remap_block(block, &live_ins(block));
        assert_eq!(
            remapped,
            vec![
                Instruction::Const { rd: 1, imm: 10 },
                Instruction::Alu { op: AluOp::Add, rd: 2, ra: 0, rb: 1 },
                Instruction::Out { rs: 2 },
            ]
        );
        assert_eq!(n_regs, 3);
    }
}
