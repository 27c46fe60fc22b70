//! Logic bombs behind salted trigger hashes: the qualified condition
//! becomes a HASHEQ gate whose payload section holds tamper checks and
//! the original block, encrypted under a key derived from the branch
//! constant. Supports bombs nested inside payloads.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bundle::{Bundle, KeyPair, Section, SectionKind};
use crate::crypto::{
    aes_ctr_xcrypt, checksum32, digest32, payload_key, trigger_hash, ChecksumMode, HashAlg,
};
use crate::vm::isa::{encode_program, Function, Instruction, Program, SysId, CRASH_TAMPER_DETECTED};

use super::rewrite::{
    find_extractable_sites, fresh_reg, intern_data, intern_string, live_ins, remap_block,
    select_sites, splice,
};
use super::{
    BombSite, PassInput, PassOutput, ProtectError, SchemeConfig, TamperTarget,
};

pub(crate) const NESTED_CONST_RANGE: (i32, i32) = (-1024, 1024);

struct Pending {
    site_slot: usize,
    block: Vec<Instruction>,
    live: Vec<u8>,
}

pub(crate) fn draw_salt(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut salt = vec![0u8; 16];
    rng.fill(&mut salt[..]);
    salt
}

/// Draws a salt whose trigger digest is unique across the whole plan,
/// preserving branch fidelity at 32 bits.
fn unique_salt(v: u32, used: &mut HashSet<u32>, rng: &mut ChaCha8Rng) -> (Vec<u8>, u32) {
    loop {
        let salt = draw_salt(rng);
        let d = trigger_hash(v, &salt, HashAlg::Sha256);
        if used.insert(d) {
            return (salt, d);
        }
    }
}

/// The tamper-detection prefix of a level-1 payload.
fn tamper_checks(
    payload: &mut Program,
    func: &mut Function,
    config: &SchemeConfig,
    dev_digest: u32,
    code_len: usize,
    code_sum: u32,
    resource: Option<(&str, usize, u32)>,
) {
    for target in &config.tamper_scope {
        match target {
            TamperTarget::Signature => {
                let rchk = func.n_regs;
                func.n_regs += 1;
                let base = func.instructions.len() as u16;
                func.instructions.extend([
                    Instruction::Sys { id: SysId::SignerDigest32, rd: rchk },
                    Instruction::Jeqc { rs: rchk, imm: dev_digest, t: base + 3 },
                    Instruction::Crash { code: CRASH_TAMPER_DETECTED },
                ]);
            }
            TamperTarget::CodePrefix => {
                let sect_idx = intern_string_local(payload, "code");
                func.instructions.push(Instruction::Tchk {
                    sect_idx,
                    count: code_len as u32,
                    expected32: code_sum,
                    mode: ChecksumMode::Fixed,
                });
            }
            TamperTarget::Resource => {
                if let Some((name, len, sum)) = resource {
                    let sect_idx = intern_string_local(payload, name);
                    func.instructions.push(Instruction::Tchk {
                        sect_idx,
                        count: len as u32,
                        expected32: sum,
                        mode: ChecksumMode::Fixed,
                    });
                }
            }
        }
    }
}

fn intern_string_local(p: &mut Program, s: &str) -> u16 {
    if let Some(i) = p.string_table.iter().position(|x| x == s) {
        return i as u16;
    }
    p.string_table.push(s.to_string());
    (p.string_table.len() - 1) as u16
}

pub(crate) fn apply(
    bundle: &Bundle,
    mut input: PassInput,
    config: &SchemeConfig,
    dev_key: &KeyPair,
) -> Result<PassOutput, ProtectError> {
    let mut sites = find_extractable_sites(&input.program);
    if sites.is_empty() {
        // Fall back to an artificial always-firing condition.
        let k = input.rng.gen_range(NESTED_CONST_RANGE.0..=NESTED_CONST_RANGE.1) as u32;
        let entry = input.program.entry as usize;
        super::inject_artificial_condition(&mut input.program.functions[entry], k)?;
        sites = find_extractable_sites(&input.program);
        if sites.is_empty() {
            return Err(ProtectError::NothingToProtect);
        }
    }
    let selected = select_sites(&sites, config.bomb_density, &mut input.rng);
    if selected.is_empty() {
        return Err(ProtectError::NothingToProtect);
    }

    let mut out = PassOutput::new(bundle.clone(), config);
    let mut used_digests: HashSet<u32> = HashSet::new();
    let mut pendings: Vec<Pending> = Vec::new();

    for (sid, site) in selected.iter().enumerate() {
        let block: Vec<Instruction> = site.block(&input.program).to_vec();
        let live = live_ins(&block);
        let (salt, digest) = unique_salt(site.imm, &mut used_digests, &mut input.rng);
        let section = format!("bomb{sid}_l1");

        let salt_idx = intern_data(&mut input.program, &salt);
        let sect_idx = intern_string(&mut input.program, &section);
        let func = &mut input.program.functions[site.func_idx];
        let rsave = fresh_reg(func)?;
        let s = site.index as u16;
        let delta = 5i64 - (site.block_end - site.index) as i64;
        splice(
            func,
            site.index,
            site.block_end,
            vec![
                Instruction::HashEq {
                    rs: site.rs,
                    digest32: digest,
                    salt_idx,
                    alg: HashAlg::Sha256,
                    t: s + 2,
                },
                Instruction::Jmp { t: s + 5 },
                Instruction::Mov { rd: rsave, rs: 0 },
                Instruction::DynLoad { sect_idx, key_rs: site.rs, args: live.clone() },
                Instruction::Mov { rd: 0, rs: rsave },
            ],
        );
        // Earlier-processed sites sit above this splice; shift them.
        for b in &mut out.report.bomb_sites {
            if b.function == input.program.functions[site.func_idx].name && b.index > site.index {
                b.index = (b.index as i64 + delta) as usize;
            }
        }
        out.report.bomb_sites.push(BombSite {
            function: input.program.functions[site.func_idx].name.clone(),
            index: site.index,
            const_v: site.imm,
            salt,
            digest32: digest,
            payload_section: section,
            native_section: None,
            native_key: None,
            split: None,
            key_const: None,
        });
        pendings.push(Pending { site_slot: out.report.bomb_sites.len() - 1, block, live });
    }
    out.report.sites_protected = pendings.len();

    // Finalize the code section before computing integrity constants.
    let code_bytes = encode_program(&input.program);
    let code_sum = checksum32(&code_bytes, ChecksumMode::Fixed);
    let code_len = code_bytes.len();
    let resource = bundle
        .sections
        .iter()
        .find(|s| s.kind == SectionKind::Resource)
        .map(|s| (s.name.clone(), s.bytes.len(), checksum32(&s.bytes, ChecksumMode::Fixed)));
    let dev_digest = digest32(&dev_key.public_key());
    out.bundle.section_mut("code").expect("code section").bytes = code_bytes;

    let depth = config.nesting_depth.max(1);
    for (sid, pending) in pendings.iter().enumerate() {
        let host_const = out.report.bomb_sites[pending.site_slot].const_v;
        let n_live = pending.live.len() as u8;
        let (remapped, block_regs) = remap_block(&pending.block, &pending.live);

        // Per-level trigger constants; the host branch constant unlocks
        // level 1, seeded constants gate each deeper level.
        let mut keys = vec![host_const];
        let mut gates = vec![(vec![], 0u32)]; // level 1 gated by the host HASHEQ
        for _ in 2..=depth {
            let k = input.rng.gen_range(NESTED_CONST_RANGE.0..=NESTED_CONST_RANGE.1) as u32;
            let (salt, digest) = unique_salt(k, &mut used_digests, &mut input.rng);
            keys.push(k);
            gates.push((salt, digest));
        }

        for level in 1..=depth {
            let li = (level - 1) as usize;
            let section = format!("bomb{sid}_l{level}");
            let mut payload = Program {
                functions: vec![],
                string_table: vec![],
                data_table: vec![],
                dispatch_table: vec![],
                entry: 0,
            };
            let mut f = Function {
                name: section.clone(),
                n_params: n_live,
                n_regs: n_live.max(1),
                instructions: vec![],
            };
            if level == 1 {
                tamper_checks(
                    &mut payload,
                    &mut f,
                    config,
                    dev_digest,
                    code_len,
                    code_sum,
                    resource.as_ref().map(|(n, l, c)| (n.as_str(), *l, *c)),
                );
            }
            if level == depth {
                f.n_regs = f.n_regs.max(block_regs);
                f.instructions.extend(remapped.iter().cloned());
                f.instructions.push(Instruction::Ret { rs: 0 });
            } else {
                // Always-firing inner bomb guarding the next level.
                let inner_section = format!("bomb{sid}_l{}", level + 1);
                let inner_const = keys[li + 1];
                let (salt, digest) = gates[li + 1].clone();
                let rt = f.n_regs;
                let rsave = f.n_regs + 1;
                f.n_regs += 2;
                let salt_idx = payload.data_table.len() as u16;
                payload.data_table.push(salt.clone());
                let sect_idx = intern_string_local(&mut payload, &inner_section);
                let c = f.instructions.len() as u16;
                f.instructions.extend([
                    Instruction::Const { rd: rt, imm: inner_const },
                    Instruction::HashEq {
                        rs: rt,
                        digest32: digest,
                        salt_idx,
                        alg: HashAlg::Sha256,
                        t: c + 3,
                    },
                    Instruction::Jmp { t: c + 6 },
                    Instruction::Mov { rd: rsave, rs: 0 },
                    Instruction::DynLoad { sect_idx, key_rs: rt, args: (0..n_live).collect() },
                    Instruction::Mov { rd: 0, rs: rsave },
                    Instruction::Ret { rs: 0 },
                ]);
                out.report.bomb_sites.push(BombSite {
                    function: section.clone(),
                    index: (c + 1) as usize,
                    const_v: inner_const,
                    salt,
                    digest32: digest,
                    payload_section: inner_section,
                    native_section: None,
                    native_key: None,
                    split: None,
                    key_const: None,
                });
            }
            payload.functions.push(f);
            let plaintext = encode_program(&payload);
            let ciphertext = aes_ctr_xcrypt(&payload_key(keys[li]), &plaintext);
            out.bundle
                .put_section(Section::new(section, SectionKind::Resource, ciphertext));
        }
    }
    Ok(out)
}
