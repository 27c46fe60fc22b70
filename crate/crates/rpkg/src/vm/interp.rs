//! Deterministic interpreter over a bundle's "code" program, with a
//! hook table modeling instrumentation and vtable hijacking.

use std::collections::HashMap;
use std::rc::Rc;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bundle::Bundle;
use crate::crypto::{aes_ctr_xcrypt, checksum32, digest32, payload_key, trigger_hash, ChecksumMode};
use crate::vm::isa::{
    decode_native, decode_program, AluOp, Function, Instruction, Program, SysId,
    CRASH_DECODE_FAULT, CRASH_SSN_FAULT, CRASH_TAMPER_DETECTED, NATIVE_FLAG_ENCRYPTED,
};

/// Runtime fault raised when execution falls off the end of a function
/// or a dynamic lookup fails structurally.
pub const CRASH_VM_FAULT: u32 = 0xF0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashCode {
    TamperDetected,
    SsnFault,
    DecodeFault,
    Code(u32),
}

impl CrashCode {
    pub fn from_raw(code: u32) -> Self {
        match code {
            CRASH_TAMPER_DETECTED => CrashCode::TamperDetected,
            CRASH_SSN_FAULT => CrashCode::SsnFault,
            CRASH_DECODE_FAULT => CrashCode::DecodeFault,
            c => CrashCode::Code(c),
        }
    }

    /// True for the fault kinds a tamper response is allowed to raise.
    pub fn is_tamper_response(&self) -> bool {
        matches!(
            self,
            CrashCode::TamperDetected | CrashCode::SsnFault | CrashCode::DecodeFault
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Halted,
    Crashed(CrashCode),
    StepLimit,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TriggerEvent {
    pub function: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub outputs: Vec<u32>,
    pub steps: u64,
    /// Ciphertext bytes processed by DYNLOAD/NATCALL, a proxy for
    /// decryption work when measuring execution overhead.
    pub decrypt_bytes: u64,
    pub termination: Termination,
    pub trigger_log: Vec<TriggerEvent>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunLimits {
    pub step_budget: u64,
}

impl Default for RunLimits {
    fn default() -> Self {
        RunLimits { step_budget: 1_000_000 }
    }
}

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("bundle has no \"code\" section")]
    NoCodeSection,
    #[error("code section does not decode: {0}")]
    BadCode(#[from] crate::vm::isa::DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecryptKey {
    Const(u32),
    Native([u8; 16]),
}

/// Observation of a decryption performed by DYNLOAD or NATCALL.
#[derive(Debug, Clone)]
pub struct DecryptEvent {
    pub site: TriggerEvent,
    pub section: String,
    pub key: DecryptKey,
    pub ciphertext: Vec<u8>,
    /// Present on exit hooks only.
    pub plaintext: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct TchkEvent {
    pub site: TriggerEvent,
    pub section: String,
    pub count: u32,
    pub expected32: u32,
    pub mode: ChecksumMode,
    /// None when the section is missing or shorter than `count`.
    pub actual: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TchkAction {
    Proceed,
    ForcePass,
    ForceFail,
}

type Observer = Box<dyn FnMut(&DecryptEvent)>;

/// Runtime interception points. Observers are pure; the TCHK, SYS and
/// function-entry hooks may replace default semantics.
#[derive(Default)]
pub struct HookTable {
    pub dynload_enter: Option<Observer>,
    pub dynload_exit: Option<Observer>,
    pub natcall_enter: Option<Observer>,
    pub natcall_exit: Option<Observer>,
    pub tchk_enter: Option<Box<dyn FnMut(&TchkEvent) -> TchkAction>>,
    pub sys_override: HashMap<SysId, Box<dyn FnMut() -> u32>>,
    /// Vtable-style override of CALLIND dispatch slots.
    pub fn_entry_override: HashMap<u16, Box<dyn FnMut(&[u32]) -> u32>>,
    pub trace: Option<Box<dyn FnMut(&str)>>,
}

impl HookTable {
    pub fn is_empty(&self) -> bool {
        self.dynload_enter.is_none()
            && self.dynload_exit.is_none()
            && self.natcall_enter.is_none()
            && self.natcall_exit.is_none()
            && self.tchk_enter.is_none()
            && self.sys_override.is_empty()
            && self.fn_entry_override.is_empty()
    }
}

/// A program or native blob loaded for execution.
struct LoadedObject {
    functions: Vec<Function>,
    string_table: Vec<String>,
    data_table: Vec<Vec<u8>>,
    dispatch_table: Vec<u16>,
    native: bool,
}

impl LoadedObject {
    fn from_program(p: Program) -> Self {
        LoadedObject {
            functions: p.functions,
            string_table: p.string_table,
            data_table: p.data_table,
            dispatch_table: p.dispatch_table,
            native: false,
        }
    }

    fn from_blob(b: crate::vm::isa::NativeBlob) -> Self {
        LoadedObject {
            functions: vec![b.entry],
            string_table: b.string_table,
            data_table: b.data_table,
            dispatch_table: vec![],
            native: true,
        }
    }
}

enum Stop {
    Halt,
    Crash(CrashCode),
    StepLimit,
}

struct Interp<'a> {
    bundle: &'a Bundle,
    hooks: &'a mut HookTable,
    rng: ChaCha8Rng,
    outputs: Vec<u32>,
    trigger_log: Vec<TriggerEvent>,
    steps: u64,
    decrypt_bytes: u64,
    budget: u64,
    signer_digest: u32,
    call_depth: usize,
}

const MAX_CALL_DEPTH: usize = 64;

/// Executes the bundle's "code" program on one input vector. Inputs map
/// to the entry function's parameters; missing parameters are zero.
pub fn run(
    bundle: &Bundle,
    inputs: &[u32],
    seed: u64,
    limits: RunLimits,
    hooks: &mut HookTable,
) -> Result<RunResult, SetupError> {
    let code = bundle.section("code").ok_or(SetupError::NoCodeSection)?;
    let program = decode_program(&code.bytes)?;
    let entry = program.entry;
    let object = Rc::new(LoadedObject::from_program(program));

    let signer_digest = bundle
        .signature
        .as_ref()
        .map(|sig| digest32(&sig.signer_public_key))
        .unwrap_or(0);

    let mut interp = Interp {
        bundle,
        hooks,
        rng: ChaCha8Rng::seed_from_u64(seed),
        outputs: Vec::new(),
        trigger_log: Vec::new(),
        steps: 0,
        decrypt_bytes: 0,
        budget: limits.step_budget,
        signer_digest,
        call_depth: 0,
    };

    let n_params = object.functions[entry as usize].n_params as usize;
    let mut args = vec![0u32; n_params];
    for (i, v) in inputs.iter().take(n_params).enumerate() {
        args[i] = *v;
    }

    let termination = match interp.call(Rc::clone(&object), Rc::clone(&object), entry, &args) {
        Ok(_) => Termination::Halted,
        Err(Stop::Halt) => Termination::Halted,
        Err(Stop::Crash(code)) => Termination::Crashed(code),
        Err(Stop::StepLimit) => Termination::StepLimit,
    };

    Ok(RunResult {
        outputs: interp.outputs,
        steps: interp.steps,
        decrypt_bytes: interp.decrypt_bytes,
        termination,
        trigger_log: interp.trigger_log,
    })
}

impl<'a> Interp<'a> {
    /// Runs one function to completion, returning its RET value.
    fn call(
        &mut self,
        object: Rc<LoadedObject>,
        host: Rc<LoadedObject>,
        func_idx: u16,
        args: &[u32],
    ) -> Result<u32, Stop> {
        if self.call_depth >= MAX_CALL_DEPTH {
            return Err(Stop::Crash(CrashCode::Code(CRASH_VM_FAULT)));
        }
        self.call_depth += 1;
        let result = self.call_inner(object, host, func_idx, args);
        self.call_depth -= 1;
        result
    }

    fn call_inner(
        &mut self,
        object: Rc<LoadedObject>,
        host: Rc<LoadedObject>,
        func_idx: u16,
        args: &[u32],
    ) -> Result<u32, Stop> {
        let func = &object.functions[func_idx as usize];
        let mut regs = vec![0u32; func.n_regs as usize];
        for (i, v) in args.iter().take(func.n_params as usize).enumerate() {
            regs[i] = *v;
        }
        let mut pc = 0usize;
        // Calls from native code resolve against the nearest enclosing
        // program, modeling JNI calls back into bytecode.
        let resolve = if object.native { &host } else { &object };

        loop {
            if pc >= func.instructions.len() {
                return Err(Stop::Crash(CrashCode::Code(CRASH_VM_FAULT)));
            }
            if self.steps >= self.budget {
                return Err(Stop::StepLimit);
            }
            self.steps += 1;
            let ins = &func.instructions[pc];
            if let Some(trace) = &mut self.hooks.trace {
                trace(&format!(
                    "{}{}[{}] {:?}",
                    if object.native { "native:" } else { "" },
                    func.name,
                    pc,
                    ins
                ));
            }
            match ins {
                Instruction::Const { rd, imm } => {
                    regs[*rd as usize] = *imm;
                    pc += 1;
                }
                Instruction::Mov { rd, rs } => {
                    regs[*rd as usize] = regs[*rs as usize];
                    pc += 1;
                }
                Instruction::Alu { op, rd, ra, rb } => {
                    let a = regs[*ra as usize];
                    let b = regs[*rb as usize];
                    regs[*rd as usize] = match op {
                        AluOp::Add => a.wrapping_add(b),
                        AluOp::Sub => a.wrapping_sub(b),
                        AluOp::Xor => a ^ b,
                        AluOp::Mul => a.wrapping_mul(b),
                    };
                    pc += 1;
                }
                Instruction::Jmp { t } => pc = *t as usize,
                Instruction::Jeqc { rs, imm, t } => {
                    if regs[*rs as usize] == *imm {
                        self.trigger_log.push(TriggerEvent { function: func.name.clone(), index: pc });
                        pc = *t as usize;
                    } else {
                        pc += 1;
                    }
                }
                Instruction::Jnec { rs, imm, t } => {
                    if regs[*rs as usize] != *imm {
                        pc = *t as usize;
                    } else {
                        self.trigger_log.push(TriggerEvent { function: func.name.clone(), index: pc });
                        pc += 1;
                    }
                }
                Instruction::Call { func: f, args } => {
                    let vals: Vec<u32> = args.iter().map(|r| regs[*r as usize]).collect();
                    if *f as usize >= resolve.functions.len() {
                        return Err(Stop::Crash(CrashCode::Code(CRASH_VM_FAULT)));
                    }
                    let ret =
                        self.call(Rc::clone(resolve), Rc::clone(resolve), *f, &vals)?;
                    regs[0] = ret;
                    pc += 1;
                }
                Instruction::CallInd { slot, args } => {
                    let vals: Vec<u32> = args.iter().map(|r| regs[*r as usize]).collect();
                    let ret = if let Some(handler) = self.hooks.fn_entry_override.get_mut(slot) {
                        handler(&vals)
                    } else {
                        match resolve.dispatch_table.get(*slot as usize) {
                            Some(f) => {
                                let f = *f;
                                self.call(Rc::clone(resolve), Rc::clone(resolve), f, &vals)?
                            }
                            None => return Err(Stop::Crash(CrashCode::Code(CRASH_VM_FAULT))),
                        }
                    };
                    regs[0] = ret;
                    pc += 1;
                }
                Instruction::Ret { rs } => return Ok(regs[*rs as usize]),
                Instruction::Out { rs } => {
                    self.outputs.push(regs[*rs as usize]);
                    pc += 1;
                }
                Instruction::HashEq { rs, digest32, salt_idx, alg, t } => {
                    let salt = match object.data_table.get(*salt_idx as usize) {
                        Some(s) => s,
                        None => return Err(Stop::Crash(CrashCode::Code(CRASH_VM_FAULT))),
                    };
                    if trigger_hash(regs[*rs as usize], salt, *alg) == *digest32 {
                        self.trigger_log.push(TriggerEvent { function: func.name.clone(), index: pc });
                        pc = *t as usize;
                    } else {
                        pc += 1;
                    }
                }
                Instruction::DynLoad { sect_idx, key_rs, args } => {
                    let section = match object.string_table.get(*sect_idx as usize) {
                        Some(s) => s.clone(),
                        None => return Err(Stop::Crash(CrashCode::Code(CRASH_VM_FAULT))),
                    };
                    let vals: Vec<u32> = args.iter().map(|r| regs[*r as usize]).collect();
                    let key_value = regs[*key_rs as usize];
                    let site = TriggerEvent { function: func.name.clone(), index: pc };
                    let ret = self.dynload(&section, key_value, &vals, site)?;
                    regs[0] = ret;
                    pc += 1;
                }
                Instruction::NatCall { sect_idx, nkey_idx, args } => {
                    let section = match object.string_table.get(*sect_idx as usize) {
                        Some(s) => s.clone(),
                        None => return Err(Stop::Crash(CrashCode::Code(CRASH_VM_FAULT))),
                    };
                    let key = match object.data_table.get(*nkey_idx as usize) {
                        Some(k) => k.clone(),
                        None => return Err(Stop::Crash(CrashCode::Code(CRASH_VM_FAULT))),
                    };
                    let vals: Vec<u32> = args.iter().map(|r| regs[*r as usize]).collect();
                    let site = TriggerEvent { function: func.name.clone(), index: pc };
                    let program_host = if object.native { Rc::clone(&host) } else { Rc::clone(&object) };
                    let ret = self.natcall(&section, &key, &vals, site, program_host)?;
                    regs[0] = ret;
                    pc += 1;
                }
                Instruction::Tchk { sect_idx, count, expected32, mode } => {
                    let section = match object.string_table.get(*sect_idx as usize) {
                        Some(s) => s.clone(),
                        None => return Err(Stop::Crash(CrashCode::Code(CRASH_VM_FAULT))),
                    };
                    let actual = self
                        .bundle
                        .section_prefix_checksum32(&section, *count as usize, *mode)
                        .ok();
                    let event = TchkEvent {
                        site: TriggerEvent { function: func.name.clone(), index: pc },
                        section,
                        count: *count,
                        expected32: *expected32,
                        mode: *mode,
                        actual,
                    };
                    let action = match &mut self.hooks.tchk_enter {
                        Some(h) => h(&event),
                        None => TchkAction::Proceed,
                    };
                    let pass = match action {
                        TchkAction::ForcePass => true,
                        TchkAction::ForceFail => false,
                        TchkAction::Proceed => event.actual == Some(*expected32),
                    };
                    if !pass {
                        return Err(Stop::Crash(CrashCode::TamperDetected));
                    }
                    pc += 1;
                }
                Instruction::Sys { id, rd } => {
                    let value = if let Some(handler) = self.hooks.sys_override.get_mut(id) {
                        handler()
                    } else {
                        match id {
                            SysId::SignerDigest32 => self.signer_digest,
                            SysId::Rand => self.rng.next_u32(),
                            SysId::CodeChecksum32 => self
                                .bundle
                                .section("code")
                                .map(|s| checksum32(&s.bytes, ChecksumMode::Fixed))
                                .unwrap_or(0),
                        }
                    };
                    regs[*rd as usize] = value;
                    pc += 1;
                }
                Instruction::Halt => return Err(Stop::Halt),
                Instruction::Crash { code } => {
                    return Err(Stop::Crash(CrashCode::from_raw(*code)))
                }
            }
        }
    }

    fn dynload(
        &mut self,
        section: &str,
        key_value: u32,
        args: &[u32],
        site: TriggerEvent,
    ) -> Result<u32, Stop> {
        let bytes = match self.bundle.section(section) {
            Some(s) => s.bytes.clone(),
            None => return Err(Stop::Crash(CrashCode::DecodeFault)),
        };
        let mut event = DecryptEvent {
            site,
            section: section.to_string(),
            key: DecryptKey::Const(key_value),
            ciphertext: bytes.clone(),
            plaintext: None,
        };
        if let Some(h) = &mut self.hooks.dynload_enter {
            h(&event);
        }
        self.decrypt_bytes += bytes.len() as u64;
        let plaintext = aes_ctr_xcrypt(&payload_key(key_value), &bytes);
        event.plaintext = Some(plaintext.clone());
        if let Some(h) = &mut self.hooks.dynload_exit {
            h(&event);
        }
        let program = match decode_program(&plaintext) {
            Ok(p) => p,
            Err(_) => return Err(Stop::Crash(CrashCode::DecodeFault)),
        };
        let entry = program.entry;
        let object = Rc::new(LoadedObject::from_program(program));
        self.call(Rc::clone(&object), object, entry, args)
    }

    fn natcall(
        &mut self,
        section: &str,
        key: &[u8],
        args: &[u32],
        site: TriggerEvent,
        host: Rc<LoadedObject>,
    ) -> Result<u32, Stop> {
        let bytes = match self.bundle.section(section) {
            Some(s) => s.bytes.clone(),
            None => return Err(Stop::Crash(CrashCode::DecodeFault)),
        };
        let key16: [u8; 16] = match key.try_into() {
            Ok(k) => k,
            Err(_) => return Err(Stop::Crash(CrashCode::DecodeFault)),
        };
        let header = match crate::vm::isa::decode_native_header(&bytes) {
            Ok(h) => h,
            Err(_) => return Err(Stop::Crash(CrashCode::DecodeFault)),
        };
        let body = bytes[header.body_start..header.body_start + header.body_len].to_vec();
        let mut event = DecryptEvent {
            site,
            section: section.to_string(),
            key: DecryptKey::Native(key16),
            ciphertext: body.clone(),
            plaintext: None,
        };
        if let Some(h) = &mut self.hooks.natcall_enter {
            h(&event);
        }
        let blob = match decode_native(&bytes, Some(&key16)) {
            Ok(b) => b,
            Err(_) => return Err(Stop::Crash(CrashCode::DecodeFault)),
        };
        let plain_body = if header.flags & NATIVE_FLAG_ENCRYPTED != 0 {
            self.decrypt_bytes += body.len() as u64;
            crate::crypto::xor_crypt(&key16, &body)
        } else {
            body
        };
        event.plaintext = Some(plain_body);
        if let Some(h) = &mut self.hooks.natcall_exit {
            h(&event);
        }
        let object = Rc::new(LoadedObject::from_blob(blob));
        self.call(object, host, 0, args)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{Section, SectionKind};
    use crate::vm::isa::encode_program;

    fn bundle_for(program: &Program) -> Bundle {
        Bundle::new(vec![Section::new(
            "code",
            SectionKind::Code,
            encode_program(program),
        )])
    }

    fn const_out_halt() -> Program {
        Program {
            functions: vec![Function {
                name: "main".into(),
                n_params: 0,
                n_regs: 1,
                instructions: vec![
                    Instruction::Const { rd: 0, imm: 42 },
                    Instruction::Out { rs: 0 },
                    Instruction::Halt,
                ],
            }],
            string_table: vec![],
            data_table: vec![],
            dispatch_table: vec![],
            entry: 0,
        }
    }

    #[test]
    fn const_out_halt_runs() {
        let b = bundle_for(&const_out_halt());
        let r = run(&b, &[], 0, RunLimits::default(), &mut HookTable::default()).unwrap();
        assert_eq!(r.outputs, vec![42]);
        assert_eq!(r.termination, Termination::Halted);
        assert_eq!(r.steps, 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let p = Program {
            functions: vec![Function {
                name: "main".into(),
                n_params: 0,
                n_regs: 1,
                instructions: vec![
                    Instruction::Sys { id: SysId::Rand, rd: 0 },
                    Instruction::Out { rs: 0 },
                    Instruction::Sys { id: SysId::Rand, rd: 0 },
                    Instruction::Out { rs: 0 },
                    Instruction::Halt,
                ],
            }],
            string_table: vec![],
            data_table: vec![],
            dispatch_table: vec![],
            entry: 0,
        };
        let b = bundle_for(&p);
        let r1 = run(&b, &[], 99, RunLimits::default(), &mut HookTable::default()).unwrap();
        let r2 = run(&b, &[], 99, RunLimits::default(), &mut HookTable::default()).unwrap();
        assert_eq!(r1, r2);
        let r3 = run(&b, &[], 100, RunLimits::default(), &mut HookTable::default()).unwrap();
        assert_ne!(r1.outputs, r3.outputs);
    }

    #[test]
    fn step_budget_is_enforced() {
        let p = Program {
            functions: vec![Function {
                name: "main".into(),
                n_params: 0,
                n_regs: 1,
                instructions: vec![Instruction::Jmp { t: 0 }],
            }],
            string_table: vec![],
            data_table: vec![],
            dispatch_table: vec![],
            entry: 0,
        };
        let b = bundle_for(&p);
        let r = run(&b, &[], 0, RunLimits { step_budget: 10 }, &mut HookTable::default()).unwrap();
        assert_eq!(r.termination, Termination::StepLimit);
        assert_eq!(r.steps, 10);
    }

    #[test]
    fn call_returns_into_r0() {
        let p = Program {
            functions: vec![
                Function {
                    name: "main".into(),
                    n_params: 0,
                    n_regs: 2,
                    instructions: vec![
                        Instruction::Const { rd: 1, imm: 20 },
                        Instruction::Call { func: 1, args: vec![1] },
                        Instruction::Out { rs: 0 },
                        Instruction::Halt,
                    ],
                },
                Function {
                    name: "double".into(),
                    n_params: 1,
                    n_regs: 2,
                    instructions: vec![
                        Instruction::Alu { op: AluOp::Add, rd: 1, ra: 0, rb: 0 },
                        Instruction::Ret { rs: 1 },
                    ],
                },
            ],
            string_table: vec![],
            data_table: vec![],
            dispatch_table: vec![],
            entry: 0,
        };
        let b = bundle_for(&p);
        let r = run(&b, &[], 0, RunLimits::default(), &mut HookTable::default()).unwrap();
        assert_eq!(r.outputs, vec![40]);
    }

    #[test]
    fn sys_override_hook_replaces_value() {
        let p = Program {
            functions: vec![Function {
                name: "main".into(),
                n_params: 0,
                n_regs: 1,
                instructions: vec![
                    Instruction::Sys { id: SysId::SignerDigest32, rd: 0 },
                    Instruction::Out { rs: 0 },
                    Instruction::Halt,
                ],
            }],
            string_table: vec![],
            data_table: vec![],
            dispatch_table: vec![],
            entry: 0,
        };
        let b = bundle_for(&p);
        let mut hooks = HookTable::default();
        hooks
            .sys_override
            .insert(SysId::SignerDigest32, Box::new(|| 0xDEAD_BEEF));
        let r = run(&b, &[], 0, RunLimits::default(), &mut hooks).unwrap();
        assert_eq!(r.outputs, vec![0xDEAD_BEEF]);
    }
}
