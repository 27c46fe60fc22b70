//! The attacker's toolkit: static scanning, fuzzing, key recovery,
//! hook-based secret dumping, binary patching, and the per-scheme
//! bypass pipelines that produce standalone repackaged bundles.

pub mod ops;
pub mod pipeline;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{Bundle, BundleError, KeyPair};
use crate::crypto::{aes_ctr_xcrypt, payload_key, sha256_digest, xor_crypt};
use crate::vm::isa::{DecodeError, Function, Instruction};
use crate::vm::{HookTable, SysId};

pub use ops::{
    brute_force, fuzz, hook_dump, key_reuse_scan, patch_checksum, patch_inline,
    redirect_integrity, scan_patterns, FuzzStats,
};
pub use pipeline::{bypass_pipeline, PipelineCtx, Strategy};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// The attacker's marker output value.
pub const SENTINEL: u32 = 0xDEAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Hasheq,
    Jeqc,
    Dynload,
    Natcall,
    Tchk,
}

/// One statically recognizable instruction of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSite {
    pub function: String,
    pub index: usize,
    pub kind: SiteKind,
    pub instruction: Instruction,
    /// Resolved section name for DYNLOAD/NATCALL/TCHK sites.
    pub section: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecretKey {
    Const(u32),
    Native([u8; 16]),
}

/// A (key, plaintext) pair captured from a decryption at runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedSecret {
    pub section: String,
    pub site: (String, usize),
    pub key: SecretKey,
    pub plaintext: Vec<u8>,
    pub ciphertext: Vec<u8>,
}

impl DumpedSecret {
    /// Evidence soundness: re-encrypting the plaintext under the
    /// recovered key reproduces the ciphertext bit-exactly.
    pub fn round_trips(&self) -> bool {
        let re = match &self.key {
            SecretKey::Const(v) => aes_ctr_xcrypt(&payload_key(*v), &self.plaintext),
            SecretKey::Native(k) => xor_crypt(k, &self.plaintext),
        };
        re == self.ciphertext
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub schema_version: u32,
    pub pipeline: String,
    pub sites_found: usize,
    pub sites_triggered: usize,
    pub sites_neutralized: usize,
    pub secrets: Vec<DumpedSecret>,
    pub secrets_sound: bool,
    pub bypass_success: bool,
    pub equivalent: bool,
    pub first_divergence: Option<String>,
    pub output_bundle_digest: String,
    pub notes: Vec<String>,
}

impl AttackReport {
    pub(crate) fn new(pipeline: &str) -> Self {
        AttackReport {
            schema_version: REPORT_SCHEMA_VERSION,
            pipeline: pipeline.to_string(),
            sites_found: 0,
            sites_triggered: 0,
            sites_neutralized: 0,
            secrets: vec![],
            secrets_sound: true,
            bypass_success: false,
            equivalent: false,
            first_divergence: None,
            output_bundle_digest: String::new(),
            notes: vec![],
        }
    }

    pub(crate) fn finish(&mut self, bundle: &Bundle) {
        self.secrets_sound = self.secrets.iter().all(|s| s.round_trips());
        let digest = sha256_digest(&bundle.serialize());
        self.output_bundle_digest = digest.iter().map(|b| format!("{b:02x}")).collect();
    }
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("code section missing or undecodable: {0}")]
    Decode(#[from] DecodeError),
    #[error("bundle error: {0}")]
    Bundle(#[from] BundleError),
    #[error("no such site {function}[{index}]")]
    NoSuchSite { function: String, index: usize },
    #[error("no TCHK with expected value {0:#010x}")]
    NoMatchingCheck(u32),
    #[error("no native section references {0:?}")]
    NoNativeReference(String),
    #[error("missing secret for section {0:?}")]
    MissingSecret(String),
    #[error("function {0} ran out of registers")]
    RegisterPressure(String),
}

/// Spoofs the signer digest syscall so integrity nodes keep seeing the
/// original developer key after a re-sign.
pub fn hijack_signer(mut hooks: HookTable, original_digest32: u32) -> HookTable {
    hooks
        .sys_override
        .insert(SysId::SignerDigest32, Box::new(move || original_digest32));
    hooks
}

/// The standard attacker payload: OUT a sentinel and return.
pub fn sentinel_payload() -> Function {
    Function {
        name: "injected".into(),
        n_params: 0,
        n_regs: 1,
        instructions: vec![
            Instruction::Const { rd: 0, imm: SENTINEL },
            Instruction::Out { rs: 0 },
            Instruction::Ret { rs: 0 },
        ],
    }
}

/// Naive repackaging: append the payload, invoke it from the entry
/// prologue, recompute the manifest and sign with the attacker's key.
pub fn repackage(
    bundle: &Bundle,
    payload: Option<&Function>,
    attacker_key: &KeyPair,
) -> Result<Bundle, AttackError> {
    let mut out = bundle.clone();
    if let Some(payload) = payload {
        let code = out
            .section("code")
            .ok_or(AttackError::NoSuchSite { function: "code".into(), index: 0 })?;
        let mut program = crate::vm::decode_program(&code.bytes)?;
        let pf = program.functions.len() as u16;
        program.functions.push(payload.clone());
        let entry = program.entry as usize;
        let func = &mut program.functions[entry];
        if func.n_regs == u8::MAX {
            return Err(AttackError::RegisterPressure(func.name.clone()));
        }
        let rsave = func.n_regs;
        func.n_regs += 1;
        crate::protect::rewrite::splice(
            func,
            0,
            0,
            vec![
                Instruction::Mov { rd: rsave, rs: 0 },
                Instruction::Call { func: pf, args: vec![] },
                Instruction::Mov { rd: 0, rs: rsave },
            ],
        );
        out.section_mut("code").expect("checked above").bytes =
            crate::vm::encode_program(&program);
    }
    Ok(out.sign(attacker_key))
}
