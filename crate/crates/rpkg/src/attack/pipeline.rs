//! End-to-end bypass pipelines, one per scheme family. Each consumes a
//! protected bundle and produces a repackaged bundle signed by the
//! attacker, plus a report with machine-checkable evidence.

use std::collections::BTreeSet;

use crate::bundle::{Bundle, KeyPair, SectionKind};
use crate::crypto::{aes_ctr_xcrypt, payload_key, HashAlg};
use crate::protect::ProtectionReport;
use crate::vm::isa::{decode_native, decode_program, Instruction, Program, CRASH_SSN_FAULT};
use crate::vm::{run, HookTable, RunLimits, Termination};

use super::ops::{brute_force, hook_dump, patch_inline, redirect_integrity, scan_patterns};
use super::{
    repackage, sentinel_payload, AttackError, AttackReport, SecretKey, SiteKind,
    SENTINEL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DexDump,
    SsnPatch,
    AppisStrip,
    SdcInline,
    BombdroidBruteForce,
    NrpOverride,
    NrpRedirect,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::DexDump,
        Strategy::SsnPatch,
        Strategy::AppisStrip,
        Strategy::SdcInline,
        Strategy::BombdroidBruteForce,
        Strategy::NrpOverride,
        Strategy::NrpRedirect,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::DexDump => "dex_dump",
            Strategy::SsnPatch => "ssn_patch",
            Strategy::AppisStrip => "appis_strip",
            Strategy::SdcInline => "sdc_inline",
            Strategy::BombdroidBruteForce => "bombdroid_brute_force",
            Strategy::NrpOverride => "nrp_override",
            Strategy::NrpRedirect => "nrp_redirect",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Strategy::ALL.iter().copied().find(|x| x.name() == s)
    }

    /// The primary counter-attack for each scheme.
    pub fn for_scheme(scheme: crate::protect::Scheme) -> Strategy {
        use crate::protect::Scheme;
        match scheme {
            Scheme::DexEncrypt => Strategy::DexDump,
            Scheme::Ssn => Strategy::SsnPatch,
            Scheme::Appis => Strategy::AppisStrip,
            Scheme::Sdc => Strategy::SdcInline,
            Scheme::Bombdroid => Strategy::BombdroidBruteForce,
            Scheme::Nrp => Strategy::NrpOverride,
        }
    }
}

pub struct PipelineCtx<'a> {
    /// Input vectors the repackaged bundle must stay equivalent on.
    pub suite: &'a [Vec<u32>],
    pub seed: u64,
    pub attacker_key: &'a KeyPair,
    /// Ground truth for cross-checking only; pipelines never read keys
    /// or block contents from it.
    pub report: Option<&'a ProtectionReport>,
}

/// Runs one bypass strategy against a protected bundle. The returned
/// bundle is signed by the attacker; the report carries the verdict.
pub fn bypass_pipeline(
    bundle: &Bundle,
    strategy: Strategy,
    ctx: &PipelineCtx,
) -> Result<(Bundle, AttackReport), AttackError> {
    let mut report = AttackReport::new(strategy.name());
    report.sites_found = scan_patterns(bundle)?.len();
    let attacked = match strategy {
        Strategy::DexDump => dex_dump(bundle, ctx, &mut report)?,
        Strategy::SsnPatch => ssn_patch(bundle, ctx, &mut report)?,
        Strategy::AppisStrip => appis_strip(bundle, ctx, &mut report)?,
        Strategy::SdcInline => sdc_inline(bundle, ctx, &mut report)?,
        Strategy::BombdroidBruteForce => bombdroid_brute_force(bundle, ctx, &mut report)?,
        Strategy::NrpOverride => nrp_override(bundle, ctx, &mut report)?,
        Strategy::NrpRedirect => nrp_redirect(bundle, ctx, &mut report)?,
    };
    assess(&mut report, &attacked, bundle, ctx);
    if let Some(truth) = ctx.report {
        report.notes.push(format!(
            "ground truth: {} protected sites, {} neutralized here",
            truth.sites_protected, report.sites_neutralized
        ));
    }
    report.finish(&attacked);
    Ok((attacked, report))
}

fn code_program(bundle: &Bundle) -> Result<Program, AttackError> {
    let code = bundle
        .section("code")
        .ok_or(AttackError::NoSuchSite { function: "code".into(), index: 0 })?;
    Ok(decode_program(&code.bytes)?)
}

fn put_code(bundle: &mut Bundle, program: &Program) {
    bundle.section_mut("code").expect("code section").bytes =
        crate::vm::encode_program(program);
    bundle.signature = None;
}

/// Instructions a payload prepends for tamper detection are exactly the
/// kinds a plain block can never contain.
fn strip_tamper_prefix(instrs: &[Instruction]) -> &[Instruction] {
    let mut i = 0;
    while i < instrs.len() {
        match instrs[i] {
            Instruction::Sys { .. }
            | Instruction::Jeqc { .. }
            | Instruction::Crash { .. }
            | Instruction::Tchk { .. } => i += 1,
            _ => break,
        }
    }
    &instrs[i..]
}

fn drop_trailing_ret(instrs: &[Instruction]) -> &[Instruction] {
    match instrs.last() {
        Some(Instruction::Ret { .. }) => &instrs[..instrs.len() - 1],
        _ => instrs,
    }
}

/// Dump the shared XOR key at runtime, then statically decrypt every
/// function section and rebuild the original cleartext program.
fn dex_dump(bundle: &Bundle, ctx: &PipelineCtx, report: &mut AttackReport) -> Result<Bundle, AttackError> {
    let stub = code_program(bundle)?;
    let secrets = hook_dump(bundle, ctx.suite, ctx.seed);
    let key = secrets
        .iter()
        .find_map(|s| match s.key {
            SecretKey::Native(k) => Some(k),
            _ => None,
        })
        .ok_or_else(|| AttackError::MissingSecret("encfn*".into()))?;
    report.secrets = secrets;

    // Stub function i NATCALLs the section holding the real body.
    let mut functions = Vec::with_capacity(stub.functions.len());
    let mut tables: Option<(Vec<String>, Vec<Vec<u8>>)> = None;
    let mut doomed = Vec::new();
    for f in &stub.functions {
        let sect_idx = f
            .instructions
            .iter()
            .find_map(|ins| match ins {
                Instruction::NatCall { sect_idx, .. } => Some(*sect_idx),
                _ => None,
            })
            .ok_or_else(|| AttackError::NoSuchSite { function: f.name.clone(), index: 0 })?;
        let section = stub.string_table[sect_idx as usize].clone();
        let bytes = bundle
            .section(&section)
            .ok_or_else(|| AttackError::MissingSecret(section.clone()))?
            .bytes
            .clone();
        let blob = decode_native(&bytes, Some(&key))?;
        if tables.is_none() {
            tables = Some((blob.string_table.clone(), blob.data_table.clone()));
        }
        functions.push(blob.entry);
        doomed.push(section);
    }
    let (string_table, data_table) = tables.unwrap_or_default();
    let restored = Program {
        functions,
        string_table,
        data_table,
        dispatch_table: stub.dispatch_table.clone(),
        entry: stub.entry,
    };
    let mut out = bundle.clone();
    put_code(&mut out, &restored);
    for s in doomed {
        out.remove_section(&s);
    }
    report.sites_neutralized = restored.functions.len();
    repackage(&out, Some(&sentinel_payload()), ctx.attacker_key)
}

/// Replace every stochastic-response crash with a jump past itself.
fn ssn_patch(bundle: &Bundle, ctx: &PipelineCtx, report: &mut AttackReport) -> Result<Bundle, AttackError> {
    let mut program = code_program(bundle)?;
    let mut patched = 0;
    for f in &mut program.functions {
        for (i, ins) in f.instructions.iter_mut().enumerate() {
            if matches!(ins, Instruction::Crash { code } if *code == CRASH_SSN_FAULT) {
                *ins = Instruction::Jmp { t: (i + 1) as u16 };
                patched += 1;
            }
        }
    }
    if patched == 0 {
        return Err(AttackError::NoSuchSite { function: "crash".into(), index: 0 });
    }
    let mut out = bundle.clone();
    put_code(&mut out, &program);
    report.sites_neutralized = patched;
    repackage(&out, Some(&sentinel_payload()), ctx.attacker_key)
}

/// Delete every guard section and stub out the calls that ran them.
fn appis_strip(bundle: &Bundle, ctx: &PipelineCtx, report: &mut AttackReport) -> Result<Bundle, AttackError> {
    let guards: BTreeSet<String> = bundle
        .sections
        .iter()
        .filter(|s| s.kind == SectionKind::Native)
        .filter_map(|s| decode_native(&s.bytes, None).ok().map(|b| (s.name.clone(), b)))
        .filter(|(_, b)| {
            b.entry
                .instructions
                .iter()
                .any(|ins| matches!(ins, Instruction::Tchk { .. }))
        })
        .map(|(name, _)| name)
        .collect();
    if guards.is_empty() {
        return Err(AttackError::NoNativeReference("guard*".into()));
    }

    let mut program = code_program(bundle)?;
    let mut stripped = 0;
    for f in &mut program.functions {
        for (i, ins) in f.instructions.iter_mut().enumerate() {
            if let Instruction::NatCall { sect_idx, .. } = ins {
                let target = program.string_table.get(*sect_idx as usize);
                if target.is_some_and(|t| guards.contains(t)) {
                    // Same instruction count, so no target fixups.
                    *ins = Instruction::Jmp { t: (i + 1) as u16 };
                    stripped += 1;
                }
            }
        }
    }
    let mut out = bundle.clone();
    put_code(&mut out, &program);
    for g in &guards {
        out.remove_section(g);
    }
    report.sites_neutralized = stripped;
    repackage(&out, Some(&sentinel_payload()), ctx.attacker_key)
}

/// Hook the decryptions, then inline each dumped block back into its
/// construct so the checksum-derived key is no longer needed.
fn sdc_inline(bundle: &Bundle, ctx: &PipelineCtx, report: &mut AttackReport) -> Result<Bundle, AttackError> {
    let secrets = hook_dump(bundle, ctx.suite, ctx.seed);
    let mut sites: Vec<(String, usize, Vec<Instruction>)> = Vec::new();
    for s in &secrets {
        if !matches!(s.key, SecretKey::Const(_)) {
            continue;
        }
        let payload = decode_program(&s.plaintext)?;
        let block = drop_trailing_ret(&payload.functions[0].instructions).to_vec();
        let (function, dynload_index) = s.site.clone();
        // The DYNLOAD sits four instructions into the construct.
        sites.push((function, dynload_index - 4, block));
    }
    if sites.is_empty() {
        return Err(AttackError::MissingSecret("sdc*".into()));
    }
    sites.sort_by(|a, b| (&b.0, b.1).cmp(&(&a.0, a.1)));
    report.secrets = secrets;

    let mut out = bundle.clone();
    for (function, index, block) in &sites {
        out = patch_inline(&out, function, *index, block, 0, None)?;
    }
    report.sites_neutralized = sites.len();
    repackage(&out, Some(&sentinel_payload()), ctx.attacker_key)
}

/// The payload section a HASHEQ-gated construct loads: the DYNLOAD
/// three instructions below the gate names it.
fn payload_section_of(program: &Program, function: &str, index: usize) -> Option<String> {
    let f = program.functions.iter().find(|f| f.name == function)?;
    match f.instructions.get(index + 3)? {
        Instruction::DynLoad { sect_idx, .. } => {
            program.string_table.get(*sect_idx as usize).cloned()
        }
        _ => None,
    }
}

/// Walk one bomb's payload chain down to the real block, decrypting
/// each level with its brute-forced or dumped constant.
fn descend_chain(
    bundle: &Bundle,
    section: &str,
    key: u32,
    doomed: &mut Vec<String>,
) -> Result<Vec<Instruction>, AttackError> {
    let bytes = &bundle
        .section(section)
        .ok_or_else(|| AttackError::MissingSecret(section.to_string()))?
        .bytes;
    doomed.push(section.to_string());
    let payload = decode_program(&aes_ctr_xcrypt(&payload_key(key), bytes))?;
    let f = &payload.functions[0];
    let body = strip_tamper_prefix(&f.instructions);
    // A nested wrapper loads its gate constant right before the HASHEQ.
    if let [Instruction::Const { imm, .. }, Instruction::HashEq { .. }, ..] = body {
        let inner_sect = body
            .iter()
            .find_map(|ins| match ins {
                Instruction::DynLoad { sect_idx, .. } => {
                    payload.string_table.get(*sect_idx as usize).cloned()
                }
                _ => None,
            })
            .ok_or_else(|| AttackError::MissingSecret(format!("{section} inner")))?;
        return descend_chain(bundle, &inner_sect, *imm, doomed);
    }
    Ok(drop_trailing_ret(body).to_vec())
}

/// Brute-force each salted trigger over the small constant domain, peel
/// the nested payloads, and inline the recovered blocks.
fn bombdroid_brute_force(
    bundle: &Bundle,
    ctx: &PipelineCtx,
    report: &mut AttackReport,
) -> Result<Bundle, AttackError> {
    let program = code_program(bundle)?;
    let secrets = hook_dump(bundle, ctx.suite, ctx.seed);
    let mut jobs: Vec<(String, usize, u32, Vec<Instruction>, Vec<String>)> = Vec::new();
    for site in scan_patterns(bundle)? {
        if site.kind != SiteKind::Hasheq {
            continue;
        }
        let Instruction::HashEq { salt_idx, .. } = &site.instruction else { continue };
        let Some(salt) = program.data_table.get(*salt_idx as usize) else { continue };
        let Some(section) = payload_section_of(&program, &site.function, site.index) else {
            continue;
        };
        let v = brute_force(&site, -1024, 1024, salt, HashAlg::Sha256).or_else(|| {
            // Fallback: the key observed at a live firing.
            secrets.iter().find_map(|s| match &s.key {
                SecretKey::Const(v) if s.section == section => Some(*v),
                _ => None,
            })
        });
        let Some(v) = v else {
            report.notes.push(format!(
                "unrecovered trigger at {}[{}]",
                site.function, site.index
            ));
            continue;
        };
        let mut doomed = Vec::new();
        let block = descend_chain(bundle, &section, v, &mut doomed)?;
        jobs.push((site.function, site.index, v, block, doomed));
    }
    if jobs.is_empty() {
        return Err(AttackError::MissingSecret("bomb*".into()));
    }
    jobs.sort_by(|a, b| (&b.0, b.1).cmp(&(&a.0, a.1)));
    report.secrets = secrets;

    let mut out = bundle.clone();
    let mut neutralized = 0;
    for (function, index, v, block, doomed) in &jobs {
        out = patch_inline(&out, function, *index, block, *v, None)?;
        // patch_inline removed the level-1 section; drop the rest.
        for s in doomed {
            out.remove_section(s);
        }
        neutralized += 1 + (doomed.len() - 1);
    }
    report.sites_neutralized = neutralized;
    repackage(&out, Some(&sentinel_payload()), ctx.attacker_key)
}

/// Recover the unsalted triggers, decrypt payload and native halves
/// statically, and inline the recombined block past the tamper check.
fn nrp_override(bundle: &Bundle, ctx: &PipelineCtx, report: &mut AttackReport) -> Result<Bundle, AttackError> {
    let program = code_program(bundle)?;
    let secrets = hook_dump(bundle, ctx.suite, ctx.seed);
    let mut jobs: Vec<(String, usize, u32, Vec<Instruction>, String)> = Vec::new();
    for site in scan_patterns(bundle)? {
        if site.kind != SiteKind::Hasheq {
            continue;
        }
        let Some(section) = payload_section_of(&program, &site.function, site.index) else {
            continue;
        };
        let v = brute_force(&site, -1024, 1024, b"", HashAlg::Sha1).or_else(|| {
            secrets.iter().find_map(|s| match &s.key {
                SecretKey::Const(v) if s.section == section => Some(*v),
                _ => None,
            })
        });
        let Some(v) = v else {
            report.notes.push(format!(
                "unrecovered trigger at {}[{}]",
                site.function, site.index
            ));
            continue;
        };
        let bytes = &bundle
            .section(&section)
            .ok_or_else(|| AttackError::MissingSecret(section.clone()))?
            .bytes;
        let payload = decode_program(&aes_ctr_xcrypt(&payload_key(v), bytes))?;
        let entry = &payload.functions[0];
        // Payload shape: save r0, NATCALL the first half, restore,
        // second half, RET. Its data table carries the native key.
        let nat_section = payload
            .string_table
            .first()
            .cloned()
            .ok_or_else(|| AttackError::MissingSecret(format!("{section} native ref")))?;
        let nat_key: [u8; 16] = payload
            .data_table
            .first()
            .and_then(|k| k.as_slice().try_into().ok())
            .ok_or_else(|| AttackError::MissingSecret(format!("{section} native key")))?;
        let nat_bytes = &bundle
            .section(&nat_section)
            .ok_or_else(|| AttackError::MissingSecret(nat_section.clone()))?
            .bytes;
        let nat = decode_native(nat_bytes, Some(&nat_key))?;
        let mut block = strip_tamper_prefix(drop_trailing_ret(&nat.entry.instructions)).to_vec();
        block.extend(drop_trailing_ret(&entry.instructions[3..]).iter().cloned());
        jobs.push((site.function, site.index, v, block, nat_section));
    }
    if jobs.is_empty() {
        return Err(AttackError::MissingSecret("encr*".into()));
    }
    jobs.sort_by(|a, b| (&b.0, b.1).cmp(&(&a.0, a.1)));
    report.secrets = secrets;

    let mut out = bundle.clone();
    for (function, index, v, block, nat_section) in &jobs {
        out = patch_inline(&out, function, *index, block, *v, None)?;
        out.remove_section(nat_section);
    }
    report.sites_neutralized = jobs.len();
    repackage(&out, Some(&sentinel_payload()), ctx.attacker_key)
}

/// Leave the bombs armed but point their integrity checks at a pristine
/// copy of the code section.
fn nrp_redirect(bundle: &Bundle, ctx: &PipelineCtx, report: &mut AttackReport) -> Result<Bundle, AttackError> {
    let out = redirect_integrity(bundle)?;
    report.sites_neutralized = out
        .sections
        .iter()
        .filter(|s| s.kind == SectionKind::Native)
        .count();
    repackage(&out, Some(&sentinel_payload()), ctx.attacker_key)
}

/// Shared verdict: the attacked bundle must verify under the attacker
/// key, run the suite without tamper faults, emit the sentinel on every
/// run, and match the pristine protected bundle output-for-output once
/// sentinels are filtered out.
fn assess(report: &mut AttackReport, attacked: &Bundle, pristine: &Bundle, ctx: &PipelineCtx) {
    let resigned = attacked.verify().is_ok()
        && attacked
            .signature
            .as_ref()
            .is_some_and(|s| s.signer_public_key == ctx.attacker_key.public_key());
    if !resigned {
        report.notes.push("output bundle does not verify under the attacker key".into());
    }

    let mut equivalent = true;
    let mut tamper_free = true;
    let mut sentinel_every_run = !ctx.suite.is_empty();
    let mut triggered: BTreeSet<(String, usize)> = BTreeSet::new();
    for (i, inputs) in ctx.suite.iter().enumerate() {
        let seed = ctx.seed.wrapping_add(i as u64);
        let a = run(attacked, inputs, seed, RunLimits::default(), &mut HookTable::default());
        let p = run(pristine, inputs, seed, RunLimits::default(), &mut HookTable::default());
        let (Ok(a), Ok(p)) = (a, p) else {
            equivalent = false;
            if report.first_divergence.is_none() {
                report.first_divergence = Some(format!("input {i}: run setup failed"));
            }
            continue;
        };
        for t in &a.trigger_log {
            triggered.insert((t.function.clone(), t.index));
        }
        let af: Vec<u32> = a.outputs.iter().copied().filter(|v| *v != SENTINEL).collect();
        let pf: Vec<u32> = p.outputs.iter().copied().filter(|v| *v != SENTINEL).collect();
        if a.outputs.len() - af.len() <= p.outputs.len() - pf.len() {
            sentinel_every_run = false;
        }
        if let Termination::Crashed(c) = a.termination {
            if c.is_tamper_response() {
                tamper_free = false;
            }
        }
        if af != pf || a.termination != p.termination {
            equivalent = false;
            if report.first_divergence.is_none() {
                report.first_divergence = Some(format!(
                    "input {i}: attacked {:?} / {:?} vs pristine {:?} / {:?}",
                    a.termination, af, p.termination, pf
                ));
            }
        }
    }
    report.sites_triggered = triggered.len();
    report.equivalent = equivalent;
    if !sentinel_every_run {
        report.notes.push("sentinel missing from at least one suite run".into());
    }
    if !tamper_free {
        report.notes.push("a tamper response still fired on the suite".into());
    }
    report.bypass_success = resigned && equivalent && tamper_free && sentinel_every_run;
}
