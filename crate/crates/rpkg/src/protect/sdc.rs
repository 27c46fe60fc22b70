//! Self-decrypting code: the equality guard stays in cleartext but the
//! block moves into a section encrypted under a key derived from the
//! checksum of the final code section XOR the branch constant. Any code
//! tamper changes the recomputed checksum and the decryption fails.

use crate::bundle::{Bundle, Section, SectionKind};
use crate::crypto::{aes_ctr_xcrypt, checksum32, payload_key, trigger_hash, ChecksumMode, HashAlg};
use crate::vm::isa::{encode_program, Function, Instruction, Program, SysId};

use super::rewrite::{
    find_extractable_sites, fresh_reg, intern_string, live_ins, remap_block, select_sites, splice,
};
use super::{BombSite, PassInput, PassOutput, ProtectError, SchemeConfig};

struct Pending {
    site_slot: usize,
    block: Vec<Instruction>,
    live: Vec<u8>,
}

pub(crate) fn apply(
    bundle: &Bundle,
    mut input: PassInput,
    config: &SchemeConfig,
) -> Result<PassOutput, ProtectError> {
    let mut sites = find_extractable_sites(&input.program);
    if sites.is_empty() {
        let k = rand::Rng::gen_range(&mut input.rng, -1024i32..=1024) as u32;
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
    let mut pendings: Vec<Pending> = Vec::new();

    for (sid, site) in selected.iter().enumerate() {
        let block: Vec<Instruction> = site.block(&input.program).to_vec();
        let live = live_ins(&block);
        let section = format!("sdc{sid}");

        let sect_idx = intern_string(&mut input.program, &section);
        let func = &mut input.program.functions[site.func_idx];
        let rt = fresh_reg(func)?;
        let rsave = fresh_reg(func)?;
        let s = site.index as u16;
        let delta = 6i64 - (site.block_end - site.index) as i64;
        splice(
            func,
            site.index,
            site.block_end,
            vec![
                Instruction::Jnec { rs: site.rs, imm: site.imm, t: s + 6 },
                Instruction::Sys { id: SysId::CodeChecksum32, rd: rt },
                Instruction::Alu {
                    op: crate::vm::isa::AluOp::Xor,
                    rd: rt,
                    ra: rt,
                    rb: site.rs,
                },
                Instruction::Mov { rd: rsave, rs: 0 },
                Instruction::DynLoad { sect_idx, key_rs: rt, args: live.clone() },
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
            digest32: trigger_hash(site.imm, b"", HashAlg::Sha256),
            payload_section: section,
            native_section: None,
            native_key: None,
            split: None,
            key_const: None, // patched once the code section is final
        });
        pendings.push(Pending { site_slot: out.report.bomb_sites.len() - 1, block, live });
    }
    out.report.sites_protected = pendings.len();

    let code_bytes = encode_program(&input.program);
    let code_sum = checksum32(&code_bytes, ChecksumMode::Fixed);
    out.bundle.section_mut("code").expect("code section").bytes = code_bytes;

    for pending in &pendings {
        let site = &mut out.report.bomb_sites[pending.site_slot];
        let key_const = code_sum ^ site.const_v;
        site.key_const = Some(key_const);
        let (remapped, n_regs) = remap_block(&pending.block, &pending.live);
        let mut f = Function {
            name: site.payload_section.clone(),
            n_params: pending.live.len() as u8,
            n_regs: n_regs.max(pending.live.len() as u8).max(1),
            instructions: remapped,
        };
        f.instructions.push(Instruction::Ret { rs: 0 });
        let payload = Program {
            functions: vec![f],
            string_table: vec![],
            data_table: vec![],
            dispatch_table: vec![],
            entry: 0,
        };
        let ciphertext = aes_ctr_xcrypt(&payload_key(key_const), &encode_program(&payload));
        out.bundle.put_section(Section::new(
            site.payload_section.clone(),
            SectionKind::Resource,
            ciphertext,
        ));
    }
    Ok(out)
}
