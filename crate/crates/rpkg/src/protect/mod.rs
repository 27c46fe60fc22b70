//! The six anti-repackaging schemes as bundle-to-bundle passes. Every
//! pass emits a ground-truth `ProtectionReport` that never travels
//! inside the bundle.

pub mod appis;
pub mod bombdroid;
pub mod dex_encrypt;
pub mod nrp;
pub mod rewrite;
pub mod sdc;
pub mod ssn;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{Bundle, BundleError, KeyPair, VerifyError};
use crate::crypto::ChecksumMode;
use crate::vm::isa::{decode_program, DecodeError, Function, Instruction, Program};

pub use rewrite::{find_qualified_conditions, QualifiedCondition};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    DexEncrypt,
    Ssn,
    Appis,
    Sdc,
    Bombdroid,
    Nrp,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::DexEncrypt,
        Scheme::Ssn,
        Scheme::Appis,
        Scheme::Sdc,
        Scheme::Bombdroid,
        Scheme::Nrp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::DexEncrypt => "dex_encrypt",
            Scheme::Ssn => "ssn",
            Scheme::Appis => "appis",
            Scheme::Sdc => "sdc",
            Scheme::Bombdroid => "bombdroid",
            Scheme::Nrp => "nrp",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        Scheme::ALL.iter().copied().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaltPolicy {
    None,
    Random16,
}

/// What a bomb's payload verifies before running the original block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperTarget {
    Signature,
    CodePrefix,
    Resource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub seed: u64,
    pub bomb_density: f64,
    pub checksum_mode: ChecksumMode,
    pub salt_policy: SaltPolicy,
    pub nesting_depth: u32,
    pub ssn_trigger_prob: f64,
    pub appis_n_guards: usize,
    pub tamper_scope: Vec<TamperTarget>,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, seed: u64) -> Self {
        SchemeConfig {
            scheme,
            seed,
            bomb_density: 1.0,
            checksum_mode: ChecksumMode::Fixed,
            salt_policy: match scheme {
                Scheme::Nrp => SaltPolicy::None,
                _ => SaltPolicy::Random16,
            },
            nesting_depth: 1,
            ssn_trigger_prob: 0.5,
            appis_n_guards: 6,
            tamper_scope: vec![
                TamperTarget::Signature,
                TamperTarget::CodePrefix,
                TamperTarget::Resource,
            ],
        }
    }

    fn validate(&self) -> Result<(), ProtectError> {
        if !(self.bomb_density > 0.0 && self.bomb_density <= 1.0) {
            return Err(ProtectError::BadConfig("bomb_density must be in (0, 1]".into()));
        }
        if !(self.ssn_trigger_prob > 0.0 && self.ssn_trigger_prob <= 1.0) {
            return Err(ProtectError::BadConfig("ssn_trigger_prob must be in (0, 1]".into()));
        }
        if self.nesting_depth < 1 {
            return Err(ProtectError::BadConfig("nesting_depth must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Ground truth for one injected logic bomb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BombSite {
    pub function: String,
    pub index: usize,
    pub const_v: u32,
    pub salt: Vec<u8>,
    pub digest32: u32,
    pub payload_section: String,
    pub native_section: Option<String>,
    pub native_key: Option<[u8; 16]>,
    /// (or_code1 length, or_code2 length) for split blocks.
    pub split: Option<(usize, usize)>,
    /// Effective DYNLOAD key value when it differs from `const_v`
    /// (SDC derives it from the code checksum).
    pub key_const: Option<u32>,
}

impl BombSite {
    pub fn effective_key(&self) -> u32 {
        self.key_const.unwrap_or(self.const_v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsnNode {
    pub function: String,
    pub detect_index: usize,
    pub response_indices: Vec<usize>,
    pub dispatch_slot: u16,
    /// The realized Bernoulli probability, rounded to a power of two.
    pub trigger_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub id: usize,
    pub section: String,
    pub count: u32,
    pub checksum32: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuardKind {
    J,
    N,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guard {
    pub id: usize,
    pub kind: GuardKind,
    pub section: String,
    pub watches_goals: Vec<usize>,
    pub watches_guards: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardNet {
    pub goals: Vec<Goal>,
    pub guards: Vec<Guard>,
    /// Guard ids per scheduling net; one net runs per execution.
    pub nets: Vec<Vec<usize>>,
}

impl GuardNet {
    /// Direct graph audit of both constraint families.
    pub fn audit(&self) -> bool {
        let goal_watched = self
            .goals
            .iter()
            .all(|g| self.guards.iter().any(|u| u.watches_goals.contains(&g.id)));
        let guard_watched = self.guards.iter().all(|g| {
            self.guards
                .iter()
                .filter(|u| u.id != g.id && u.watches_guards.contains(&g.id))
                .count()
                >= 2
        });
        goal_watched && guard_watched
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionReport {
    pub schema_version: u32,
    pub scheme: Scheme,
    pub config: SchemeConfig,
    pub bomb_sites: Vec<BombSite>,
    pub guard_net: Option<GuardNet>,
    pub ssn_nodes: Vec<SsnNode>,
    pub encrypted_functions: Vec<String>,
    pub sites_found: usize,
    pub sites_protected: usize,
    pub original_size: usize,
    pub protected_size: usize,
    /// Placeholder for the out-of-scope obfuscation step.
    pub obfuscation_applied: bool,
}

#[derive(Debug, Error)]
pub enum ProtectError {
    #[error("input bundle does not verify: {0}")]
    Verify(#[from] VerifyError),
    #[error("code section missing or undecodable: {0}")]
    Decode(#[from] DecodeError),
    #[error("bundle error: {0}")]
    Bundle(#[from] BundleError),
    #[error("no protectable site found")]
    NothingToProtect,
    #[error("function {0} ran out of registers")]
    RegisterPressure(String),
    #[error("unsalted digest collision between constants {a} and {b}")]
    DigestCollision { a: u32, b: u32 },
    #[error("invalid config: {0}")]
    BadConfig(String),
}

pub(crate) struct PassInput {
    pub program: Program,
    pub rng: ChaCha8Rng,
}

/// Applies one scheme to a verified bundle and re-signs with the
/// developer key. The report is ground truth for evaluation only.
pub fn protect(
    bundle: &Bundle,
    config: &SchemeConfig,
    dev_key: &KeyPair,
) -> Result<(Bundle, ProtectionReport), ProtectError> {
    config.validate()?;
    bundle.verify()?;
    let code = bundle
        .section("code")
        .ok_or(ProtectError::NothingToProtect)?;
    let program = decode_program(&code.bytes)?;
    let original_size = bundle.serialize().len();
    let sites_found = find_qualified_conditions(&program).len();

    let input = PassInput {
        program,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut out = match config.scheme {
        Scheme::DexEncrypt => dex_encrypt::apply(bundle, input, config)?,
        Scheme::Ssn => ssn::apply(bundle, input, config, dev_key)?,
        Scheme::Appis => appis::apply(bundle, input, config)?,
        Scheme::Sdc => sdc::apply(bundle, input, config)?,
        Scheme::Bombdroid => bombdroid::apply(bundle, input, config, dev_key)?,
        Scheme::Nrp => nrp::apply(bundle, input, config)?,
    };

    let signed = out.bundle.sign(dev_key);
    out.report.schema_version = REPORT_SCHEMA_VERSION;
    out.report.scheme = config.scheme;
    out.report.config = config.clone();
    out.report.sites_found = sites_found;
    out.report.original_size = original_size;
    out.report.protected_size = signed.serialize().len();
    Ok((signed, out.report))
}

pub(crate) struct PassOutput {
    pub bundle: Bundle,
    pub report: ProtectionReport,
}

impl PassOutput {
    pub(crate) fn new(bundle: Bundle, config: &SchemeConfig) -> Self {
        PassOutput {
            bundle,
            report: ProtectionReport {
                schema_version: REPORT_SCHEMA_VERSION,
                scheme: config.scheme,
                config: config.clone(),
                bomb_sites: vec![],
                guard_net: None,
                ssn_nodes: vec![],
                encrypted_functions: vec![],
                sites_found: 0,
                sites_protected: 0,
                original_size: 0,
                protected_size: 0,
                obfuscation_applied: false,
            },
        }
    }
}

/// Injects an always-firing artificial qualified condition with a dead
/// two-instruction block at the top of a function.
pub(crate) fn inject_artificial_condition(
    func: &mut Function,
    k: u32,
) -> Result<(), ProtectError> {
    let rt = rewrite::fresh_reg(func)?;
    let junk = rewrite::fresh_reg(func)?;
    rewrite::splice(
        func,
        0,
        0,
        vec![
            Instruction::Const { rd: rt, imm: k },
            Instruction::Jnec { rs: rt, imm: k, t: 4 },
            Instruction::Const { rd: junk, imm: k ^ 0x5A5A_5A5A },
            Instruction::Mov { rd: junk, rs: junk },
        ],
    );
    Ok(())
}
