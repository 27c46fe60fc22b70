//! Guard networks: native guard sections checksum code-section goals
//! and each other in a ring (guard i watches i−1 and i−2), and a
//! scheduling prologue at the entry point runs one precomputed guarding
//! net per execution. Peer guards are watched up to the first
//! peer-checksum operand in their encoding, so the watched prefix is
//! independent of the checksum values and needs no fixed point.

use rand::Rng;

use crate::bundle::{Bundle, Section, SectionKind};
use crate::crypto::{checksum32, ChecksumMode};
use crate::vm::isa::{
    decode_native_header, encode_native, encode_program, native_body_instr_offsets, Function,
    Instruction, NativeBlob, SysId, TCHK_EXPECTED_OFFSET,
};

use super::rewrite::{fresh_reg, intern_data, intern_string, splice};
use super::{Goal, Guard, GuardKind, GuardNet, PassInput, PassOutput, ProtectError, SchemeConfig};

fn guard_blob(
    i: usize,
    n: usize,
    goal: &Goal,
    peer_expect: [(u32, u32); 2], // (prefix len, expected32) for i-1, i-2
) -> NativeBlob {
    let p1 = (i + n - 1) % n;
    let p2 = (i + n - 2) % n;
    NativeBlob {
        entry: Function {
            name: format!("guard{i}"),
            n_params: 0,
            n_regs: 1,
            instructions: vec![
                Instruction::Tchk {
                    sect_idx: 0,
                    count: goal.count,
                    expected32: goal.checksum32,
                    mode: ChecksumMode::Fixed,
                },
                Instruction::Tchk {
                    sect_idx: 1,
                    count: peer_expect[0].0,
                    expected32: peer_expect[0].1,
                    mode: ChecksumMode::Fixed,
                },
                Instruction::Tchk {
                    sect_idx: 2,
                    count: peer_expect[1].0,
                    expected32: peer_expect[1].1,
                    mode: ChecksumMode::Fixed,
                },
                Instruction::Ret { rs: 0 },
            ],
        },
        string_table: vec!["code".into(), format!("guard{p1}"), format!("guard{p2}")],
        data_table: vec![],
        flags: 0,
    }
}

/// Byte length of the guard-section prefix that excludes every
/// peer-checksum operand: up to the expected32 of the first peer TCHK.
fn watch_prefix(blob: &NativeBlob, section_bytes: &[u8]) -> u32 {
    let header = decode_native_header(section_bytes).expect("own encoding");
    let offsets = native_body_instr_offsets(blob);
    (header.body_start + offsets[1] + TCHK_EXPECTED_OFFSET) as u32
}

pub(crate) fn apply(
    bundle: &Bundle,
    mut input: PassInput,
    config: &SchemeConfig,
) -> Result<PassOutput, ProtectError> {
    let mut out = PassOutput::new(bundle.clone(), config);
    let n = config.appis_n_guards.max(3);
    // Power-of-two net count so the scheduler can pick uniformly with
    // equality tests alone.
    let half = (n / 2).max(1);
    let m = 1usize << (usize::BITS - 1 - half.leading_zeros());
    let k_bits = m.trailing_zeros();

    let program = &mut input.program;
    let zero_key_idx = intern_data(program, &[0u8; 16]);
    let guard_sect_idx: Vec<u16> = (0..n)
        .map(|i| intern_string(program, &format!("guard{i}")))
        .collect();

    // Net runner functions: net j runs every guard i ≡ j (mod m).
    let nets: Vec<Vec<usize>> = (0..m).map(|j| (j..n).step_by(m).collect()).collect();
    let mut net_fn_idx = Vec::new();
    for (j, net) in nets.iter().enumerate() {
        let mut instructions: Vec<Instruction> = net
            .iter()
            .map(|i| Instruction::NatCall {
                sect_idx: guard_sect_idx[*i],
                nkey_idx: zero_key_idx,
                args: vec![],
            })
            .collect();
        instructions.push(Instruction::Ret { rs: 0 });
        net_fn_idx.push(program.functions.len() as u16);
        program.functions.push(Function {
            name: format!("net{j}"),
            n_params: 0,
            n_regs: 1,
            instructions,
        });
    }

    // Scheduling engine at the entry point.
    let entry = program.entry as usize;
    let func = &mut program.functions[entry];
    let rt = fresh_reg(func)?;
    let rm = fresh_reg(func)?;
    let rsave = fresh_reg(func)?;
    let shift = 32 - k_bits;
    let body = (m + 2 + 4 * m) as u16;
    let mut prologue = vec![
        Instruction::Sys { id: SysId::Rand, rd: rt },
        Instruction::Const { rd: rm, imm: 1u32.checked_shl(shift).unwrap_or(0) },
        Instruction::Alu { op: crate::vm::isa::AluOp::Mul, rd: rt, ra: rt, rb: rm },
    ];
    for j in 1..m {
        let l_j = (m + 2 + 4 * j) as u16;
        prologue.push(Instruction::Jeqc {
            rs: rt,
            imm: (j as u32) << shift,
            t: l_j,
        });
    }
    for j in 0..m {
        prologue.extend([
            Instruction::Mov { rd: rsave, rs: 0 },
            Instruction::Call { func: net_fn_idx[j], args: vec![] },
            Instruction::Mov { rd: 0, rs: rsave },
            Instruction::Jmp { t: body },
        ]);
    }
    debug_assert_eq!(prologue.len(), body as usize);
    splice(func, 0, 0, prologue);

    let code_bytes = encode_program(program);
    let code_len = code_bytes.len();

    // Goals: every net's lead guard (i < m) watches the whole code
    // section; the rest watch seeded prefixes.
    let goals: Vec<Goal> = (0..n)
        .map(|i| {
            let count = if i < m {
                code_len
            } else {
                input.rng.gen_range(code_len / 2..=code_len)
            } as u32;
            Goal {
                id: i,
                section: "code".into(),
                count,
                checksum32: checksum32(&code_bytes[..count as usize], ChecksumMode::Fixed),
            }
        })
        .collect();
    out.bundle.section_mut("code").expect("code section").bytes = code_bytes;

    // Operand widths are fixed, so the layout (and with it each watch
    // prefix) is independent of the checksum values. Encode once with
    // placeholders to learn the prefixes, then again with the real
    // counts in place — only the expected32 bytes beyond the prefix
    // still differ from the final encoding.
    let prefixes: Vec<u32> = (0..n)
        .map(|i| {
            let blob = guard_blob(i, n, &goals[i], [(0, 0), (0, 0)]);
            let bytes = encode_native(&blob, None);
            watch_prefix(&blob, &bytes)
        })
        .collect();
    let draft: Vec<Vec<u8>> = (0..n)
        .map(|i| {
            let p1 = (i + n - 1) % n;
            let p2 = (i + n - 2) % n;
            let blob = guard_blob(i, n, &goals[i], [(prefixes[p1], 0), (prefixes[p2], 0)]);
            encode_native(&blob, None)
        })
        .collect();

    let mut guards = Vec::new();
    for i in 0..n {
        let p1 = (i + n - 1) % n;
        let p2 = (i + n - 2) % n;
        let expect = |p: usize| {
            (
                prefixes[p],
                checksum32(&draft[p][..prefixes[p] as usize], ChecksumMode::Fixed),
            )
        };
        let blob = guard_blob(i, n, &goals[i], [expect(p1), expect(p2)]);
        out.bundle.put_section(Section::new(
            format!("guard{i}"),
            SectionKind::Native,
            encode_native(&blob, None),
        ));
        guards.push(Guard {
            id: i,
            kind: GuardKind::N,
            section: format!("guard{i}"),
            watches_goals: vec![i],
            watches_guards: vec![p1, p2],
        });
    }

    out.report.guard_net = Some(GuardNet { goals, guards, nets });
    out.report.sites_protected = n;
    Ok(out)
}
