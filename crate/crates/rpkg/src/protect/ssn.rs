//! Stochastically-triggered signature checks: seeded candidate
//! functions get a detection prologue that, with probability p, fetches
//! the signer digest through a dispatch-table slot and poisons a
//! register on mismatch. Every function exit consumes the poison and
//! crashes, giving the delayed-response behavior.

use rand::seq::SliceRandom;

use crate::bundle::{Bundle, KeyPair};
use crate::crypto::digest32;
use crate::vm::isa::{encode_program, Function, Instruction, SysId, CRASH_SSN_FAULT};

use super::rewrite::{fresh_reg, splice};
use super::{PassInput, PassOutput, ProtectError, SchemeConfig, SsnNode};

pub const POISON: u32 = 0x7015_0D1E;

/// Rounds p down to a power of two 2^-k, k in 1..=16, realizable with
/// an equality test on the low bits of a random draw.
fn prob_bits(p: f64) -> u32 {
    let k = (-p.log2()).round() as i64;
    k.clamp(1, 16) as u32
}

pub(crate) fn apply(
    bundle: &Bundle,
    mut input: PassInput,
    config: &SchemeConfig,
    dev_key: &KeyPair,
) -> Result<PassOutput, ProtectError> {
    let mut out = PassOutput::new(bundle.clone(), config);
    let dev_digest = digest32(&dev_key.public_key());
    let k = prob_bits(config.ssn_trigger_prob);

    // The communication channel: an extra method reached only through
    // the dispatch table.
    let program = &mut input.program;
    let chan_idx = program.functions.len() as u16;
    program.functions.push(Function {
        name: "ssn_chan".into(),
        n_params: 0,
        n_regs: 1,
        instructions: vec![
            Instruction::Sys { id: SysId::SignerDigest32, rd: 0 },
            Instruction::Ret { rs: 0 },
        ],
    });
    let slot = program.dispatch_table.len() as u16;
    program.dispatch_table.push(chan_idx);

    // Candidates: a seeded half of the non-entry functions that return.
    let mut candidates: Vec<usize> = (0..program.functions.len() - 1)
        .filter(|i| {
            *i != program.entry as usize
                && program.functions[*i]
                    .instructions
                    .iter()
                    .any(|ins| matches!(ins, Instruction::Ret { .. }))
        })
        .collect();
    candidates.shuffle(&mut input.rng);
    let take = (candidates.len() / 2).max(1).min(candidates.len());
    candidates.truncate(take);
    candidates.sort_unstable();
    if candidates.is_empty() {
        return Err(ProtectError::NothingToProtect);
    }

    for &fi in &candidates {
        let func = &mut program.functions[fi];
        let rt = fresh_reg(func)?;
        let rm = fresh_reg(func)?;
        let rsave = fresh_reg(func)?;
        let rchk = fresh_reg(func)?;
        let rpoison = fresh_reg(func)?;

        // Response nodes: consume the poison at every exit.
        let rets: Vec<usize> = func
            .instructions
            .iter()
            .enumerate()
            .filter_map(|(j, ins)| matches!(ins, Instruction::Ret { .. }).then_some(j))
            .collect();
        for &j in rets.iter().rev() {
            let ret = func.instructions[j].clone();
            let j16 = j as u16;
            splice(
                func,
                j,
                j + 1,
                vec![
                    Instruction::Jnec { rs: rpoison, imm: POISON, t: j16 + 2 },
                    Instruction::Crash { code: CRASH_SSN_FAULT },
                    ret,
                ],
            );
        }

        // Detection node prologue.
        splice(
            func,
            0,
            0,
            vec![
                Instruction::Sys { id: SysId::Rand, rd: rt },
                Instruction::Const { rd: rm, imm: 1u32 << (32 - k) },
                Instruction::Alu { op: crate::vm::isa::AluOp::Mul, rd: rt, ra: rt, rb: rm },
                Instruction::Jnec { rs: rt, imm: 0, t: 10 },
                Instruction::Mov { rd: rsave, rs: 0 },
                Instruction::CallInd { slot, args: vec![] },
                Instruction::Mov { rd: rchk, rs: 0 },
                Instruction::Mov { rd: 0, rs: rsave },
                Instruction::Jeqc { rs: rchk, imm: dev_digest, t: 10 },
                Instruction::Const { rd: rpoison, imm: POISON },
            ],
        );

        let response_indices = program.functions[fi]
            .instructions
            .iter()
            .enumerate()
            .filter_map(|(j, ins)| {
                matches!(ins, Instruction::Crash { code } if *code == CRASH_SSN_FAULT)
                    .then_some(j)
            })
            .collect();
        out.report.ssn_nodes.push(SsnNode {
            function: program.functions[fi].name.clone(),
            detect_index: 3,
            response_indices,
            dispatch_slot: slot,
            trigger_prob: (0.5f64).powi(k as i32),
        });
    }

    out.report.sites_protected = out.report.ssn_nodes.len();
    out.bundle.section_mut("code").expect("code section").bytes = encode_program(program);
    Ok(out)
}
