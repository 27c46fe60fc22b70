//! Native-reinforced bombs: the trigger is an unsalted SHA-1 hash, the
//! guarded block is split in two, and the first half runs inside an
//! encrypted native blob that first checksums the opening bytes of the
//! code section. The stored checksum is always precomputed with the
//! unsigned fold; selecting the sign-extending mode at config time
//! reproduces the scheme's self-breaking integrity check.

use std::collections::HashMap;

use rand::Rng;

use crate::bundle::{Bundle, Section, SectionKind};
use crate::crypto::{aes_ctr_xcrypt, checksum32, payload_key, trigger_hash, ChecksumMode, HashAlg};
use crate::vm::isa::{
    encode_native, encode_program, Function, Instruction, Program, NATIVE_FLAG_ENCRYPTED,
};

use super::rewrite::{
    find_extractable_sites, fresh_reg, intern_data, intern_string, live_ins, remap_block,
    select_sites, splice,
};
use super::{BombSite, PassInput, PassOutput, ProtectError, SchemeConfig};

pub const CHECK_PREFIX_LEN: usize = 100;

struct Pending {
    site_slot: usize,
    block: Vec<Instruction>,
    live: Vec<u8>,
    split_at: usize,
    native_key: [u8; 16],
}

/// Split point nearest the middle such that the first half's writes
/// never feed the second half; the halves then share only parameters.
fn split_point(block: &[Instruction]) -> usize {
    let len = block.len();
    let mut candidates: Vec<usize> = (0..=len).collect();
    candidates.sort_by_key(|m| (len as i64 / 2 - *m as i64).abs());
    for m in candidates {
        let mut written = [false; 256];
        for ins in &block[..m] {
            for r in ins.regs_written() {
                written[r as usize] = true;
            }
        }
        if live_ins(&block[m..]).iter().all(|r| !written[*r as usize]) {
            return m;
        }
    }
    0
}

pub(crate) fn apply(
    bundle: &Bundle,
    mut input: PassInput,
    config: &SchemeConfig,
) -> Result<PassOutput, ProtectError> {
    let sites = find_extractable_sites(&input.program);
    let selected = select_sites(&sites, config.bomb_density, &mut input.rng);
    if selected.is_empty() {
        return Err(ProtectError::NothingToProtect);
    }

    let mut out = PassOutput::new(bundle.clone(), config);
    // Unsalted digests: equal constants must share a digest, distinct
    // constants colliding at 32 bits is unresolvable without a salt.
    let mut digest_owner: HashMap<u32, u32> = HashMap::new();
    let mut pendings: Vec<Pending> = Vec::new();

    for (sid, site) in selected.iter().enumerate() {
        let digest = trigger_hash(site.imm, b"", HashAlg::Sha1);
        if let Some(owner) = digest_owner.get(&digest) {
            if *owner != site.imm {
                return Err(ProtectError::DigestCollision { a: *owner, b: site.imm });
            }
        }
        digest_owner.insert(digest, site.imm);

        let block: Vec<Instruction> = site.block(&input.program).to_vec();
        let live = live_ins(&block);
        let split_at = split_point(&block);
        let mut native_key = [0u8; 16];
        input.rng.fill(&mut native_key);
        let payload_section = format!("encr{sid}");

        let salt_idx = intern_data(&mut input.program, b"");
        let sect_idx = intern_string(&mut input.program, &payload_section);
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
                    alg: HashAlg::Sha1,
                    t: s + 2,
                },
                Instruction::Jmp { t: s + 5 },
                Instruction::Mov { rd: rsave, rs: 0 },
                Instruction::DynLoad { sect_idx, key_rs: site.rs, args: live.clone() },
                Instruction::Mov { rd: 0, rs: rsave },
            ],
        );
        for b in &mut out.report.bomb_sites {
            if b.function == input.program.functions[site.func_idx].name && b.index > site.index {
                b.index = (b.index as i64 + delta) as usize;
            }
        }
        out.report.bomb_sites.push(BombSite {
            function: input.program.functions[site.func_idx].name.clone(),
            index: site.index,
            const_v: site.imm,
            salt: vec![],
            digest32: digest,
            payload_section,
            native_section: Some(format!("nat{sid}")),
            native_key: Some(native_key),
            split: Some((split_at, block.len() - split_at)),
            key_const: None,
        });
        pendings.push(Pending {
            site_slot: out.report.bomb_sites.len() - 1,
            block,
            live,
            split_at,
            native_key,
        });
    }
    out.report.sites_protected = pendings.len();

    let code_bytes = encode_program(&input.program);
    let count = code_bytes.len().min(CHECK_PREFIX_LEN);
    // Faithful to the original implementation: the stored constant is
    // computed with the unsigned fold even when the runtime check runs
    // in the sign-extending mode.
    let expected32 = checksum32(&code_bytes[..count], ChecksumMode::Fixed);
    out.bundle.section_mut("code").expect("code section").bytes = code_bytes;

    for (sid, pending) in pendings.iter().enumerate() {
        let host_const = out.report.bomb_sites[pending.site_slot].const_v;
        let n_live = pending.live.len() as u8;
        let (b1, n1) = remap_block(&pending.block[..pending.split_at], &pending.live);
        let (b2, n2) = remap_block(&pending.block[pending.split_at..], &pending.live);

        // or_code1 lives in the native blob, behind the tamper check.
        let mut nat_fn = Function {
            name: format!("nat{sid}"),
            n_params: n_live,
            n_regs: n1.max(n_live).max(1),
            instructions: vec![Instruction::Tchk {
                sect_idx: 0,
                count: count as u32,
                expected32,
                mode: config.checksum_mode,
            }],
        };
        nat_fn.instructions.extend(b1);
        nat_fn.instructions.push(Instruction::Ret { rs: 0 });
        let blob = crate::vm::isa::NativeBlob {
            entry: nat_fn,
            string_table: vec!["code".into()],
            data_table: vec![],
            flags: NATIVE_FLAG_ENCRYPTED,
        };
        let nat_bytes = encode_native(&blob, Some(&pending.native_key));
        out.bundle.put_section(Section::new(
            format!("nat{sid}"),
            SectionKind::Native,
            nat_bytes,
        ));

        // The payload carries the native key and or_code2.
        let rsave = n2.max(n_live);
        let mut pay_fn = Function {
            name: format!("encr{sid}"),
            n_params: n_live,
            n_regs: rsave + 1,
            instructions: vec![
                Instruction::Mov { rd: rsave, rs: 0 },
                Instruction::NatCall {
                    sect_idx: 0,
                    nkey_idx: 0,
                    args: (0..n_live).collect(),
                },
                Instruction::Mov { rd: 0, rs: rsave },
            ],
        };
        pay_fn.instructions.extend(b2);
        pay_fn.instructions.push(Instruction::Ret { rs: 0 });
        let payload = Program {
            functions: vec![pay_fn],
            string_table: vec![format!("nat{sid}")],
            data_table: vec![pending.native_key.to_vec()],
            dispatch_table: vec![],
            entry: 0,
        };
        let ciphertext = aes_ctr_xcrypt(&payload_key(host_const), &encode_program(&payload));
        out.bundle.put_section(Section::new(
            format!("encr{sid}"),
            SectionKind::Resource,
            ciphertext,
        ));
    }
    Ok(out)
}
