//! Individual attacking techniques: pattern scanning, fuzzing, key
//! brute force, hook-based dumping, and binary patching.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bundle::{Bundle, Section, SectionKind};
use crate::crypto::{trigger_hash, HashAlg};
use crate::protect::rewrite::splice;
use crate::protect::ProtectionReport;
use crate::vm::isa::{
    decode_native, decode_native_header, decode_program, encode_native, encode_program,
    patch_native_string, Function, Instruction, SysId,
};
use crate::vm::{run, DecryptKey, HookTable, RunLimits, Termination};

use super::{AttackError, CandidateSite, DumpedSecret, SecretKey, SiteKind};

fn classify(ins: &Instruction) -> Option<SiteKind> {
    match ins {
        Instruction::HashEq { .. } => Some(SiteKind::Hasheq),
        Instruction::Jeqc { .. } | Instruction::Jnec { .. } => Some(SiteKind::Jeqc),
        Instruction::DynLoad { .. } => Some(SiteKind::Dynload),
        Instruction::NatCall { .. } => Some(SiteKind::Natcall),
        Instruction::Tchk { .. } => Some(SiteKind::Tchk),
        _ => None,
    }
}

fn resolve_section(ins: &Instruction, strings: &[String]) -> Option<String> {
    let idx = match ins {
        Instruction::DynLoad { sect_idx, .. }
        | Instruction::NatCall { sect_idx, .. }
        | Instruction::Tchk { sect_idx, .. } => *sect_idx,
        _ => return None,
    };
    strings.get(idx as usize).cloned()
}

/// Static sweep over the code program and every decodable cleartext
/// native section.
pub fn scan_patterns(bundle: &Bundle) -> Result<Vec<CandidateSite>, AttackError> {
    let mut out = Vec::new();
    let code = bundle
        .section("code")
        .ok_or(AttackError::NoSuchSite { function: "code".into(), index: 0 })?;
    let program = decode_program(&code.bytes)?;
    for f in &program.functions {
        for (index, ins) in f.instructions.iter().enumerate() {
            if let Some(kind) = classify(ins) {
                out.push(CandidateSite {
                    function: f.name.clone(),
                    index,
                    kind,
                    instruction: ins.clone(),
                    section: resolve_section(ins, &program.string_table),
                });
            }
        }
    }
    for s in &bundle.sections {
        if s.kind != SectionKind::Native {
            continue;
        }
        // Encrypted blobs stay opaque to static scanning.
        let Ok(blob) = decode_native(&s.bytes, None) else { continue };
        for (index, ins) in blob.entry.instructions.iter().enumerate() {
            if let Some(kind) = classify(ins) {
                out.push(CandidateSite {
                    function: blob.entry.name.clone(),
                    index,
                    kind,
                    instruction: ins.clone(),
                    section: resolve_section(ins, &blob.string_table),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FuzzStats {
    pub runs: usize,
    pub fired: Vec<(String, usize)>,
    pub crashes: usize,
    pub tamper_crashes: usize,
    /// Fraction of ground-truth sites fired, when a report is supplied.
    pub fraction_fired: Option<f64>,
}

pub fn fuzz_input(rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.5) {
                rng.gen_range(-1024i32..=1024) as u32
            } else {
                rng.gen()
            }
        })
        .collect()
}

/// Seeded random executions with trigger aggregation. Run `i` sees the
/// same inputs for every `n_runs ≥ i`, so fired sets grow monotonically.
pub fn fuzz(
    bundle: &Bundle,
    n_runs: usize,
    inputs_per_run: usize,
    seed: u64,
    report: Option<&ProtectionReport>,
) -> FuzzStats {
    let mut fired: BTreeSet<(String, usize)> = BTreeSet::new();
    let mut crashes = 0;
    let mut tamper_crashes = 0;
    for i in 0..n_runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let inputs = fuzz_input(&mut rng, inputs_per_run);
        let Ok(result) = run(bundle, &inputs, seed.wrapping_add(i as u64), RunLimits::default(), &mut HookTable::default())
        else {
            continue;
        };
        for t in result.trigger_log {
            fired.insert((t.function, t.index));
        }
        if let Termination::Crashed(code) = result.termination {
            crashes += 1;
            if code.is_tamper_response() {
                tamper_crashes += 1;
            }
        }
    }
    let fraction_fired = report.map(|r| {
        if r.bomb_sites.is_empty() {
            return 0.0;
        }
        let hit = r
            .bomb_sites
            .iter()
            .filter(|b| fired.contains(&(b.function.clone(), b.index)))
            .count();
        hit as f64 / r.bomb_sites.len() as f64
    });
    FuzzStats {
        runs: n_runs,
        fired: fired.into_iter().collect(),
        crashes,
        tamper_crashes,
        fraction_fired,
    }
}

/// Smallest `v` in `[lo, hi]` whose trigger hash matches the site's
/// stored digest. Exhaustive by construction.
pub fn brute_force(site: &CandidateSite, lo: i64, hi: i64, salt: &[u8], alg: HashAlg) -> Option<u32> {
    let digest = match &site.instruction {
        Instruction::HashEq { digest32, .. } => *digest32,
        _ => return None,
    };
    (lo..=hi)
        .map(|v| v as u32)
        .find(|v| trigger_hash(*v, salt, alg) == digest)
}

/// Runs the suite with decrypt observers installed and collects one
/// secret per decrypted section.
pub fn hook_dump(bundle: &Bundle, suite: &[Vec<u32>], seed: u64) -> Vec<DumpedSecret> {
    let secrets: Rc<RefCell<BTreeMap<String, DumpedSecret>>> = Rc::default();
    for (i, inputs) in suite.iter().enumerate() {
        let mut hooks = HookTable::default();
        let sink = Rc::clone(&secrets);
        hooks.dynload_exit = Some(Box::new(move |ev| {
            let DecryptKey::Const(v) = ev.key else { return };
            sink.borrow_mut().entry(ev.section.clone()).or_insert_with(|| DumpedSecret {
                section: ev.section.clone(),
                site: (ev.site.function.clone(), ev.site.index),
                key: SecretKey::Const(v),
                plaintext: ev.plaintext.clone().unwrap_or_default(),
                ciphertext: ev.ciphertext.clone(),
            });
        }));
        let sink = Rc::clone(&secrets);
        hooks.natcall_exit = Some(Box::new(move |ev| {
            let DecryptKey::Native(k) = ev.key else { return };
            sink.borrow_mut().entry(ev.section.clone()).or_insert_with(|| DumpedSecret {
                section: ev.section.clone(),
                site: (ev.site.function.clone(), ev.site.index),
                key: SecretKey::Native(k),
                plaintext: ev.plaintext.clone().unwrap_or_default(),
                ciphertext: ev.ciphertext.clone(),
            });
        }));
        let _ = run(bundle, inputs, seed.wrapping_add(i as u64), RunLimits::default(), &mut hooks);
    }
    let map = Rc::try_unwrap(secrets).expect("hooks dropped").into_inner();
    map.into_values().collect()
}

/// Groups of HASHEQ sites sharing a stored digest — unsalted schemes
/// leak key equality here.
pub fn key_reuse_scan(bundle: &Bundle) -> Result<Vec<Vec<CandidateSite>>, AttackError> {
    let mut by_digest: BTreeMap<u32, Vec<CandidateSite>> = BTreeMap::new();
    for site in scan_patterns(bundle)? {
        if let Instruction::HashEq { digest32, .. } = &site.instruction {
            by_digest.entry(*digest32).or_default().push(site);
        }
    }
    Ok(by_digest.into_values().filter(|g| g.len() >= 2).collect())
}

/// Replaces a bomb construct with the recovered plain block guarded by
/// the original equality test, then deletes the encrypted section.
/// `block` must be in payload coordinates: parameters `0..args.len()`.
pub fn patch_inline(
    bundle: &Bundle,
    function: &str,
    index: usize,
    block: &[Instruction],
    v: u32,
    payload: Option<&Function>,
) -> Result<Bundle, AttackError> {
    let mut out = bundle.clone();
    let code = out
        .section("code")
        .ok_or(AttackError::NoSuchSite { function: "code".into(), index: 0 })?;
    let mut program = decode_program(&code.bytes)?;
    let no_site = || AttackError::NoSuchSite { function: function.to_string(), index };
    let fi = program
        .functions
        .iter()
        .position(|f| f.name == function)
        .ok_or_else(no_site)?;

    let func = &program.functions[fi];
    let at = |i: usize| func.instructions.get(i).ok_or_else(no_site);
    // Recognize the two bomb shapes: HASHEQ-gated and SDC's cleartext
    // guard with a checksum-derived key.
    let (guard_rs, guard_imm, span, dynload_at) = match at(index)? {
        Instruction::HashEq { rs, .. } => (*rs, v, 5usize, index + 3),
        Instruction::Jnec { rs, imm, .. }
            if matches!(at(index + 1)?, Instruction::Sys { id: SysId::CodeChecksum32, .. }) =>
        {
            (*rs, *imm, 6usize, index + 4)
        }
        _ => return Err(no_site()),
    };
    let (args, sect_idx) = match at(dynload_at)? {
        Instruction::DynLoad { sect_idx, args, .. } => (args.clone(), *sect_idx),
        _ => return Err(no_site()),
    };
    let doomed = program
        .string_table
        .get(sect_idx as usize)
        .cloned()
        .ok_or_else(no_site)?;

    // Map payload registers back into the host frame.
    let func = &mut program.functions[fi];
    let mut map: Vec<Option<u8>> = vec![None; 256];
    for (p, host) in args.iter().enumerate() {
        map[p] = Some(*host);
    }
    let host_reg = |r: u8, func: &mut Function, map: &mut Vec<Option<u8>>| -> Result<u8, AttackError> {
        if let Some(m) = map[r as usize] {
            return Ok(m);
        }
        if func.n_regs == u8::MAX {
            return Err(AttackError::RegisterPressure(func.name.clone()));
        }
        let m = func.n_regs;
        func.n_regs += 1;
        map[r as usize] = Some(m);
        Ok(m)
    };
    let mut inlined = Vec::with_capacity(block.len());
    for ins in block {
        inlined.push(match ins {
            Instruction::Const { rd, imm } => Instruction::Const {
                rd: host_reg(*rd, func, &mut map)?,
                imm: *imm,
            },
            Instruction::Mov { rd, rs } => {
                let rs = host_reg(*rs, func, &mut map)?;
                Instruction::Mov { rd: host_reg(*rd, func, &mut map)?, rs }
            }
            Instruction::Alu { op, rd, ra, rb } => {
                let ra = host_reg(*ra, func, &mut map)?;
                let rb = host_reg(*rb, func, &mut map)?;
                Instruction::Alu { op: *op, rd: host_reg(*rd, func, &mut map)?, ra, rb }
            }
            Instruction::Out { rs } => Instruction::Out { rs: host_reg(*rs, func, &mut map)? },
            other => return Err(AttackError::Decode(crate::vm::DecodeError::Invalid {
                function: function.to_string(),
                index,
                reason: format!("non-block instruction in recovered payload: {other:?}"),
            })),
        });
    }

    let mut payload_call = Vec::new();
    if let Some(p) = payload {
        let pf = program.functions.len() as u16;
        program.functions.push(p.clone());
        let func = &mut program.functions[fi];
        if func.n_regs == u8::MAX {
            return Err(AttackError::RegisterPressure(func.name.clone()));
        }
        let rsave = func.n_regs;
        func.n_regs += 1;
        payload_call = vec![
            Instruction::Mov { rd: rsave, rs: 0 },
            Instruction::Call { func: pf, args: vec![] },
            Instruction::Mov { rd: 0, rs: rsave },
        ];
    }

    let mut replacement = Vec::with_capacity(1 + inlined.len() + payload_call.len());
    let end = (index + 1 + inlined.len() + payload_call.len()) as u16;
    replacement.push(Instruction::Jnec { rs: guard_rs, imm: guard_imm, t: end });
    replacement.extend(inlined);
    replacement.extend(payload_call);
    splice(&mut program.functions[fi], index, index + span, replacement);

    out.section_mut("code").expect("checked above").bytes = encode_program(&program);
    out.remove_section(&doomed);
    out.signature = None;
    Ok(out)
}

/// Swaps a hardcoded checksum constant inside a native section,
/// re-encrypting with the dumped key when the body is encrypted.
pub fn patch_checksum(
    bundle: &Bundle,
    native_section: &str,
    old32: u32,
    new32: u32,
    key: Option<&[u8; 16]>,
) -> Result<Bundle, AttackError> {
    let mut out = bundle.clone();
    let section = out
        .section(native_section)
        .ok_or_else(|| AttackError::NoSuchSite { function: native_section.into(), index: 0 })?;
    let mut blob = decode_native(&section.bytes, key)?;
    let mut patched = false;
    for ins in &mut blob.entry.instructions {
        if let Instruction::Tchk { expected32, .. } = ins {
            if *expected32 == old32 {
                *expected32 = new32;
                patched = true;
            }
        }
    }
    if !patched {
        return Err(AttackError::NoMatchingCheck(old32));
    }
    let key = if blob.is_encrypted() { key } else { None };
    out.section_mut(native_section).expect("checked above").bytes = encode_native(&blob, key);
    out.signature = None;
    Ok(out)
}

/// The hardcoded-path redirect: integrity checks keep passing against a
/// pristine copy of the code section while "code" itself is tampered.
pub fn redirect_integrity(bundle: &Bundle) -> Result<Bundle, AttackError> {
    let mut out = bundle.clone();
    let pristine = out
        .section("code")
        .ok_or(AttackError::NoSuchSite { function: "code".into(), index: 0 })?
        .bytes
        .clone();
    let mut patched_any = false;
    for s in &mut out.sections {
        if s.kind != SectionKind::Native {
            continue;
        }
        if decode_native_header(&s.bytes).is_err() {
            continue;
        }
        if let Some(patched) = patch_native_string(&s.bytes, "code", "code_orig")? {
            s.bytes = patched;
            patched_any = true;
        }
    }
    if !patched_any {
        return Err(AttackError::NoNativeReference("code".into()));
    }
    out.put_section(Section::new("code_orig", SectionKind::Code, pristine));
    out.signature = None;
    Ok(out)
}
