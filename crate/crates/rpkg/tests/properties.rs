//! Property tests: canonical-encoding round trips, checksum mode
//! agreement, gate equivalence between plain and hashed triggers, and
//! hook transparency.

use proptest::prelude::*;

use rpkg::bundle::{Bundle, KeyPair, Section, SectionKind};
use rpkg::crypto::{checksum32, trigger_hash, ChecksumMode, HashAlg};
use rpkg::harness::{gen_corpus, CorpusSpec};
use rpkg::protect::{protect, Scheme, SchemeConfig};
use rpkg::vm::isa::{
    decode_native, decode_program, encode_native, encode_program, AluOp, Function, Instruction,
    NativeBlob, Program, SysId, NATIVE_FLAG_ENCRYPTED,
};
use rpkg::vm::{run, HookTable, RunLimits};

fn arb_args() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..8, 0..4)
}

fn arb_instr() -> impl Strategy<Value = Instruction> {
    prop_oneof![
        (0u8..8, any::<u32>()).prop_map(|(rd, imm)| Instruction::Const { rd, imm }),
        (0u8..8, 0u8..8).prop_map(|(rd, rs)| Instruction::Mov { rd, rs }),
        (
            prop_oneof![
                Just(AluOp::Add),
                Just(AluOp::Sub),
                Just(AluOp::Xor),
                Just(AluOp::Mul)
            ],
            0u8..8,
            0u8..8,
            0u8..8
        )
            .prop_map(|(op, rd, ra, rb)| Instruction::Alu { op, rd, ra, rb }),
        (0u16..32).prop_map(|t| Instruction::Jmp { t }),
        (0u8..8, any::<u32>(), 0u16..32).prop_map(|(rs, imm, t)| Instruction::Jeqc { rs, imm, t }),
        (0u8..8, any::<u32>(), 0u16..32).prop_map(|(rs, imm, t)| Instruction::Jnec { rs, imm, t }),
        (0u16..8, arb_args()).prop_map(|(func, args)| Instruction::Call { func, args }),
        (0u16..8, arb_args()).prop_map(|(slot, args)| Instruction::CallInd { slot, args }),
        (0u8..8).prop_map(|rs| Instruction::Ret { rs }),
        (0u8..8).prop_map(|rs| Instruction::Out { rs }),
        (
            0u8..8,
            any::<u32>(),
            0u16..8,
            prop_oneof![Just(HashAlg::Sha1), Just(HashAlg::Sha256)],
            0u16..32
        )
            .prop_map(|(rs, digest32, salt_idx, alg, t)| Instruction::HashEq {
                rs,
                digest32,
                salt_idx,
                alg,
                t
            }),
        (0u16..8, 0u8..8, arb_args())
            .prop_map(|(sect_idx, key_rs, args)| Instruction::DynLoad { sect_idx, key_rs, args }),
        (0u16..8, 0u16..8, arb_args())
            .prop_map(|(sect_idx, nkey_idx, args)| Instruction::NatCall { sect_idx, nkey_idx, args }),
        (
            0u16..8,
            any::<u32>(),
            any::<u32>(),
            prop_oneof![Just(ChecksumMode::Fixed), Just(ChecksumMode::Buggy)]
        )
            .prop_map(|(sect_idx, count, expected32, mode)| Instruction::Tchk {
                sect_idx,
                count,
                expected32,
                mode
            }),
        (
            prop_oneof![
                Just(SysId::SignerDigest32),
                Just(SysId::Rand),
                Just(SysId::CodeChecksum32)
            ],
            0u8..8
        )
            .prop_map(|(id, rd)| Instruction::Sys { id, rd }),
        Just(Instruction::Halt),
        any::<u32>().prop_map(|code| Instruction::Crash { code }),
    ]
}

/// Clamp every register, branch target and table index into range so a
/// randomly generated function passes structural validation.
fn sanitize_function(f: &mut Function, n_functions: usize, strings: usize, data: usize, dispatch: usize) {
    let n_instr = f.instructions.len() as u16;
    f.n_regs = f.n_regs.max(f.n_params).max(1);
    for ins in &mut f.instructions {
        match ins {
            Instruction::Const { rd, .. } | Instruction::Ret { rs: rd } | Instruction::Out { rs: rd } => {
                *rd %= f.n_regs
            }
            Instruction::Mov { rd, rs } => {
                *rd %= f.n_regs;
                *rs %= f.n_regs;
            }
            Instruction::Alu { rd, ra, rb, .. } => {
                *rd %= f.n_regs;
                *ra %= f.n_regs;
                *rb %= f.n_regs;
            }
            Instruction::Jmp { t } => *t %= n_instr,
            Instruction::Jeqc { rs, t, .. } | Instruction::Jnec { rs, t, .. } => {
                *rs %= f.n_regs;
                *t %= n_instr;
            }
            Instruction::Call { func, args } => {
                *func %= n_functions as u16;
                args.iter_mut().for_each(|r| *r %= f.n_regs);
            }
            Instruction::CallInd { slot, args } => {
                *slot %= dispatch.max(1) as u16;
                args.iter_mut().for_each(|r| *r %= f.n_regs);
            }
            Instruction::HashEq { rs, salt_idx, t, .. } => {
                *rs %= f.n_regs;
                *salt_idx %= data.max(1) as u16;
                *t %= n_instr;
            }
            Instruction::DynLoad { sect_idx, key_rs, args } => {
                *sect_idx %= strings.max(1) as u16;
                *key_rs %= f.n_regs;
                args.iter_mut().for_each(|r| *r %= f.n_regs);
            }
            Instruction::NatCall { sect_idx, nkey_idx, args } => {
                *sect_idx %= strings.max(1) as u16;
                *nkey_idx %= data.max(1) as u16;
                args.iter_mut().for_each(|r| *r %= f.n_regs);
            }
            Instruction::Tchk { sect_idx, .. } => *sect_idx %= strings.max(1) as u16,
            Instruction::Sys { rd, .. } => *rd %= f.n_regs,
            Instruction::Halt | Instruction::Crash { .. } => {}
        }
    }
}

fn arb_function() -> impl Strategy<Value = Function> {
    ("[a-z]{1,8}", 0u8..4, 1u8..8, prop::collection::vec(arb_instr(), 1..12)).prop_map(
        |(name, n_params, n_regs, instructions)| Function {
            name,
            n_params,
            n_regs,
            instructions,
        },
    )
}

fn arb_program() -> impl Strategy<Value = Program> {
    (
        prop::collection::vec(arb_function(), 1..4),
        prop::collection::vec("[a-z]{0,6}", 1..3),
        prop::collection::vec(prop::collection::vec(any::<u8>(), 0..8), 1..3),
        prop::collection::vec(any::<u16>(), 1..3),
        any::<u16>(),
    )
        .prop_map(|(mut functions, string_table, data_table, mut dispatch_table, entry)| {
            let n = functions.len();
            for f in &mut functions {
                sanitize_function(f, n, string_table.len(), data_table.len(), dispatch_table.len());
            }
            dispatch_table.iter_mut().for_each(|d| *d %= n as u16);
            Program {
                entry: entry % n as u16,
                functions,
                string_table,
                data_table,
                dispatch_table,
            }
        })
}

proptest! {
    #[test]
    fn program_encoding_round_trips(program in arb_program()) {
        let decoded = decode_program(&encode_program(&program)).unwrap();
        prop_assert_eq!(decoded, program);
    }

    #[test]
    fn native_encoding_round_trips(
        mut entry in arb_function(),
        string_table in prop::collection::vec("[a-z]{0,6}", 1..3),
        data_table in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..8), 1..3),
        encrypted in any::<bool>(),
        key in any::<[u8; 16]>(),
    ) {
        sanitize_function(&mut entry, 1, string_table.len(), data_table.len(), 1);
        let blob = NativeBlob {
            entry,
            string_table,
            data_table,
            flags: if encrypted { NATIVE_FLAG_ENCRYPTED } else { 0 },
        };
        let key_opt = encrypted.then_some(&key);
        let decoded = decode_native(&encode_native(&blob, key_opt), key_opt).unwrap();
        prop_assert_eq!(decoded, blob);
    }

    #[test]
    fn checksum_modes_agree_iff_low_lanes_stay_unsigned(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut acc = [0u8; 4];
        for (i, b) in bytes.iter().enumerate() {
            acc[i % 4] ^= b;
        }
        // The top lane's sign extension shifts past bit 31, so only the
        // three lower lanes can make the modes disagree.
        let agree = acc[..3].iter().all(|&l| l < 0x80);
        prop_assert_eq!(
            checksum32(&bytes, ChecksumMode::Fixed) == checksum32(&bytes, ChecksumMode::Buggy),
            agree
        );
    }
}

fn gate_outputs(gate: Instruction, salt: &[u8], input: u32) -> Vec<u32> {
    let main = Function {
        name: "main".into(),
        n_params: 1,
        n_regs: 2,
        instructions: vec![
            gate,
            Instruction::Const { rd: 1, imm: 7 },
            Instruction::Jmp { t: 4 },
            Instruction::Const { rd: 1, imm: 9 },
            Instruction::Out { rs: 1 },
            Instruction::Halt,
        ],
    };
    let program = Program {
        functions: vec![main],
        string_table: vec![],
        data_table: vec![salt.to_vec()],
        dispatch_table: vec![],
        entry: 0,
    };
    let bundle = Bundle::new(vec![Section::new("code", SectionKind::Code, encode_program(&program))])
        .sign(&KeyPair::from_seed_u64(1));
    run(&bundle, &[input], 0, RunLimits::default(), &mut HookTable::default())
        .expect("gate program runs")
        .outputs
}

proptest! {
    /// A hashed trigger branches exactly when the stored digest matches,
    /// and agrees with the plain equality branch whenever the digests do.
    #[test]
    fn hashed_gate_matches_plain_gate(
        c in -1024i32..=1024,
        v in -1100i32..=1100,
        salt in prop::collection::vec(any::<u8>(), 0..16),
    ) {
        let c = c as u32;
        let v = v as u32;
        let digest = trigger_hash(c, &salt, HashAlg::Sha256);
        let jeqc = gate_outputs(Instruction::Jeqc { rs: 0, imm: c, t: 3 }, &salt, v);
        let hasheq = gate_outputs(
            Instruction::HashEq { rs: 0, digest32: digest, salt_idx: 0, alg: HashAlg::Sha256, t: 3 },
            &salt,
            v,
        );
        prop_assert_eq!(&jeqc, &vec![if v == c { 9 } else { 7 }]);
        let hash_hit = trigger_hash(v, &salt, HashAlg::Sha256) == digest;
        prop_assert_eq!(&hasheq, &vec![if hash_hit { 9 } else { 7 }]);
        if v == c {
            prop_assert_eq!(jeqc, hasheq);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Observer-only hooks never change what a protected program does.
    #[test]
    fn observer_hooks_are_transparent(seed in any::<u64>(), input_seed in any::<u64>()) {
        let spec = CorpusSpec { seed, n_programs: 1, suite_size: 4, ..CorpusSpec::default() };
        let item = &gen_corpus(&spec).unwrap()[0];
        let config = SchemeConfig::new(Scheme::Bombdroid, seed ^ 3);
        let (protected, _) = protect(&item.bundle, &config, &spec.dev_key()).unwrap();

        let inputs = &item.suite[(input_seed % item.suite.len() as u64) as usize];
        let plain = run(&protected, inputs, 0, RunLimits::default(), &mut HookTable::default()).unwrap();

        let mut hooks = HookTable::default();
        hooks.trace = Some(Box::new(|_| {}));
        hooks.dynload_enter = Some(Box::new(|_| {}));
        hooks.dynload_exit = Some(Box::new(|_| {}));
        hooks.natcall_enter = Some(Box::new(|_| {}));
        hooks.natcall_exit = Some(Box::new(|_| {}));
        let hooked = run(&protected, inputs, 0, RunLimits::default(), &mut hooks).unwrap();

        prop_assert_eq!(plain.outputs, hooked.outputs);
        prop_assert_eq!(plain.steps, hooked.steps);
        prop_assert_eq!(plain.termination, hooked.termination);
    }
}
