//! The toy register-machine ISA shared by app code and native blobs,
//! with its canonical binary encoding. See `docs/isa.md`.
//!
//! Calling convention: arguments are copied into the callee's registers
//! `0..n_params`; the callee's `RET` value is written into register 0 of
//! the calling frame.

use thiserror::Error;

use crate::crypto::{xor_crypt, ChecksumMode, HashAlg};

pub const PROGRAM_MAGIC: &[u8; 4] = b"PROG";
pub const NATIVE_MAGIC: &[u8; 4] = b"NATB";

/// Native blob flag: body is XOR-encrypted under a 16-byte key.
pub const NATIVE_FLAG_ENCRYPTED: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    Xor,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SysId {
    /// trunc32 of the SHA-256 of the signer public key; 0 when unsigned.
    SignerDigest32,
    /// Seeded pseudo-random 32-bit value.
    Rand,
    /// Fixed-mode XOR-fold checksum of the full "code" section.
    CodeChecksum32,
}

/// Reserved crash codes. Anything else is a scheme-chosen custom code.
pub const CRASH_TAMPER_DETECTED: u32 = 1;
pub const CRASH_SSN_FAULT: u32 = 2;
pub const CRASH_DECODE_FAULT: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Instruction {
    Const { rd: u8, imm: u32 },
    Mov { rd: u8, rs: u8 },
    Alu { op: AluOp, rd: u8, ra: u8, rb: u8 },
    Jmp { t: u16 },
    /// Branch to `t` if `rs == imm` (the qualified condition).
    Jeqc { rs: u8, imm: u32, t: u16 },
    Jnec { rs: u8, imm: u32, t: u16 },
    Call { func: u16, args: Vec<u8> },
    CallInd { slot: u16, args: Vec<u8> },
    Ret { rs: u8 },
    Out { rs: u8 },
    /// Branch to `t` if `trunc32(H(salt || le32(rs))) == digest32`.
    HashEq { rs: u8, digest32: u32, salt_idx: u16, alg: HashAlg, t: u16 },
    /// AES-CTR-decrypt the named section with a key derived from the
    /// value in `key_rs`, decode it as a Program and invoke its entry.
    DynLoad { sect_idx: u16, key_rs: u8, args: Vec<u8> },
    /// XOR-decrypt the named native section with the stored 16-byte key
    /// and execute its entry.
    NatCall { sect_idx: u16, nkey_idx: u16, args: Vec<u8> },
    /// Recompute a section-prefix checksum and crash with
    /// TamperDetected on mismatch.
    Tchk { sect_idx: u16, count: u32, expected32: u32, mode: ChecksumMode },
    Sys { id: SysId, rd: u8 },
    Halt,
    Crash { code: u32 },
}

/// Byte offset of the `expected32` operand inside an encoded `Tchk`.
pub const TCHK_EXPECTED_OFFSET: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub n_params: u8,
    pub n_regs: u8,
    pub instructions: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub functions: Vec<Function>,
    pub string_table: Vec<String>,
    pub data_table: Vec<Vec<u8>>,
    pub dispatch_table: Vec<u16>,
    pub entry: u16,
}

/// The stand-in for a JNI shared library: one entry function in the
/// same ISA, a cleartext string table even when the body is encrypted,
/// and flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NativeBlob {
    pub entry: Function,
    pub string_table: Vec<String>,
    pub data_table: Vec<Vec<u8>>,
    pub flags: u32,
}

impl NativeBlob {
    pub fn is_encrypted(&self) -> bool {
        self.flags & NATIVE_FLAG_ENCRYPTED != 0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated encoding at offset {0}")]
    Truncated(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("bad opcode {0:#x}")]
    BadOpcode(u8),
    #[error("invalid utf-8 string")]
    BadString,
    #[error("function {function} instruction {index}: {reason}")]
    Invalid { function: String, index: usize, reason: String },
    #[error("entry index {0} out of range")]
    BadEntry(u16),
    #[error("dispatch slot {slot} targets invalid function {func}")]
    BadDispatch { slot: usize, func: u16 },
    #[error("trailing bytes after encoding")]
    TrailingBytes,
}

impl Instruction {
    /// Registers this instruction reads in the current frame.
    pub fn regs_read(&self) -> Vec<u8> {
        match self {
            Instruction::Const { .. }
            | Instruction::Jmp { .. }
            | Instruction::Tchk { .. }
            | Instruction::Sys { .. }
            | Instruction::Halt
            | Instruction::Crash { .. } => vec![],
            Instruction::Mov { rs, .. } => vec![*rs],
            Instruction::Alu { ra, rb, .. } => vec![*ra, *rb],
            Instruction::Jeqc { rs, .. }
            | Instruction::Jnec { rs, .. }
            | Instruction::Ret { rs }
            | Instruction::Out { rs }
            | Instruction::HashEq { rs, .. } => vec![*rs],
            Instruction::Call { args, .. } | Instruction::CallInd { args, .. } => args.clone(),
            Instruction::DynLoad { key_rs, args, .. } => {
                let mut v = vec![*key_rs];
                v.extend_from_slice(args);
                v
            }
            Instruction::NatCall { args, .. } => args.clone(),
        }
    }

    /// Registers this instruction writes in the current frame. Call
    /// forms write register 0 (return value convention).
    pub fn regs_written(&self) -> Vec<u8> {
        match self {
            Instruction::Const { rd, .. }
            | Instruction::Mov { rd, .. }
            | Instruction::Alu { rd, .. }
            | Instruction::Sys { rd, .. } => vec![*rd],
            Instruction::Call { .. }
            | Instruction::CallInd { .. }
            | Instruction::DynLoad { .. }
            | Instruction::NatCall { .. } => vec![0],
            _ => vec![],
        }
    }

    pub fn branch_target_mut(&mut self) -> Option<&mut u16> {
        match self {
            Instruction::Jmp { t }
            | Instruction::Jeqc { t, .. }
            | Instruction::Jnec { t, .. }
            | Instruction::HashEq { t, .. } => Some(t),
            _ => None,
        }
    }

    pub fn branch_target(&self) -> Option<u16> {
        match self {
            Instruction::Jmp { t }
            | Instruction::Jeqc { t, .. }
            | Instruction::Jnec { t, .. }
            | Instruction::HashEq { t, .. } => Some(*t),
            _ => None,
        }
    }
}

fn encode_args(out: &mut Vec<u8>, args: &[u8]) {
    out.push(args.len() as u8);
    out.extend_from_slice(args);
}

fn encode_instruction(out: &mut Vec<u8>, ins: &Instruction) {
    match ins {
        Instruction::Const { rd, imm } => {
            out.push(0x01);
            out.push(*rd);
            out.extend_from_slice(&imm.to_le_bytes());
        }
        Instruction::Mov { rd, rs } => {
            out.push(0x02);
            out.push(*rd);
            out.push(*rs);
        }
        Instruction::Alu { op, rd, ra, rb } => {
            out.push(0x03);
            out.push(match op {
                AluOp::Add => 0,
                AluOp::Sub => 1,
                AluOp::Xor => 2,
                AluOp::Mul => 3,
            });
            out.push(*rd);
            out.push(*ra);
            out.push(*rb);
        }
        Instruction::Jmp { t } => {
            out.push(0x04);
            out.extend_from_slice(&t.to_le_bytes());
        }
        Instruction::Jeqc { rs, imm, t } => {
            out.push(0x05);
            out.push(*rs);
            out.extend_from_slice(&imm.to_le_bytes());
            out.extend_from_slice(&t.to_le_bytes());
        }
        Instruction::Jnec { rs, imm, t } => {
            out.push(0x06);
            out.push(*rs);
            out.extend_from_slice(&imm.to_le_bytes());
            out.extend_from_slice(&t.to_le_bytes());
        }
        Instruction::Call { func, args } => {
            out.push(0x07);
            out.extend_from_slice(&func.to_le_bytes());
            encode_args(out, args);
        }
        Instruction::CallInd { slot, args } => {
            out.push(0x08);
            out.extend_from_slice(&slot.to_le_bytes());
            encode_args(out, args);
        }
        Instruction::Ret { rs } => {
            out.push(0x09);
            out.push(*rs);
        }
        Instruction::Out { rs } => {
            out.push(0x0a);
            out.push(*rs);
        }
        Instruction::HashEq { rs, digest32, salt_idx, alg, t } => {
            out.push(0x0b);
            out.push(*rs);
            out.extend_from_slice(&digest32.to_le_bytes());
            out.extend_from_slice(&salt_idx.to_le_bytes());
            out.push(match alg {
                HashAlg::Sha1 => 0,
                HashAlg::Sha256 => 1,
            });
            out.extend_from_slice(&t.to_le_bytes());
        }
        Instruction::DynLoad { sect_idx, key_rs, args } => {
            out.push(0x0c);
            out.extend_from_slice(&sect_idx.to_le_bytes());
            out.push(*key_rs);
            encode_args(out, args);
        }
        Instruction::NatCall { sect_idx, nkey_idx, args } => {
            out.push(0x0d);
            out.extend_from_slice(&sect_idx.to_le_bytes());
            out.extend_from_slice(&nkey_idx.to_le_bytes());
            encode_args(out, args);
        }
        Instruction::Tchk { sect_idx, count, expected32, mode } => {
            out.push(0x0e);
            out.extend_from_slice(&sect_idx.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
            out.extend_from_slice(&expected32.to_le_bytes());
            out.push(match mode {
                ChecksumMode::Fixed => 0,
                ChecksumMode::Buggy => 1,
            });
        }
        Instruction::Sys { id, rd } => {
            out.push(0x0f);
            out.push(match id {
                SysId::SignerDigest32 => 0,
                SysId::Rand => 1,
                SysId::CodeChecksum32 => 2,
            });
            out.push(*rd);
        }
        Instruction::Halt => out.push(0x10),
        Instruction::Crash { code } => {
            out.push(0x11);
            out.extend_from_slice(&code.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.bytes.len() {
            return Err(DecodeError::Truncated(self.pos));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| DecodeError::BadString)
    }

    fn blob(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.u16()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn args(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u8()? as usize;
        Ok(self.take(n)?.to_vec())
    }
}

fn decode_instruction(r: &mut Reader) -> Result<Instruction, DecodeError> {
    let op = r.u8()?;
    Ok(match op {
        0x01 => Instruction::Const { rd: r.u8()?, imm: r.u32()? },
        0x02 => Instruction::Mov { rd: r.u8()?, rs: r.u8()? },
        0x03 => {
            let op = match r.u8()? {
                0 => AluOp::Add,
                1 => AluOp::Sub,
                2 => AluOp::Xor,
                3 => AluOp::Mul,
                b => return Err(DecodeError::BadOpcode(b)),
            };
            Instruction::Alu { op, rd: r.u8()?, ra: r.u8()?, rb: r.u8()? }
        }
        0x04 => Instruction::Jmp { t: r.u16()? },
        0x05 => Instruction::Jeqc { rs: r.u8()?, imm: r.u32()?, t: r.u16()? },
        0x06 => Instruction::Jnec { rs: r.u8()?, imm: r.u32()?, t: r.u16()? },
        0x07 => Instruction::Call { func: r.u16()?, args: r.args()? },
        0x08 => Instruction::CallInd { slot: r.u16()?, args: r.args()? },
        0x09 => Instruction::Ret { rs: r.u8()? },
        0x0a => Instruction::Out { rs: r.u8()? },
        0x0b => Instruction::HashEq {
            rs: r.u8()?,
            digest32: r.u32()?,
            salt_idx: r.u16()?,
            alg: match r.u8()? {
                0 => HashAlg::Sha1,
                1 => HashAlg::Sha256,
                b => return Err(DecodeError::BadOpcode(b)),
            },
            t: r.u16()?,
        },
        0x0c => Instruction::DynLoad { sect_idx: r.u16()?, key_rs: r.u8()?, args: r.args()? },
        0x0d => Instruction::NatCall { sect_idx: r.u16()?, nkey_idx: r.u16()?, args: r.args()? },
        0x0e => Instruction::Tchk {
            sect_idx: r.u16()?,
            count: r.u32()?,
            expected32: r.u32()?,
            mode: match r.u8()? {
                0 => ChecksumMode::Fixed,
                1 => ChecksumMode::Buggy,
                b => return Err(DecodeError::BadOpcode(b)),
            },
        },
        0x0f => Instruction::Sys {
            id: match r.u8()? {
                0 => SysId::SignerDigest32,
                1 => SysId::Rand,
                2 => SysId::CodeChecksum32,
                b => return Err(DecodeError::BadOpcode(b)),
            },
            rd: r.u8()?,
        },
        0x10 => Instruction::Halt,
        0x11 => Instruction::Crash { code: r.u32()? },
        b => return Err(DecodeError::BadOpcode(b)),
    })
}

fn encode_function(out: &mut Vec<u8>, f: &Function, instr_offsets: Option<&mut Vec<usize>>) {
    out.extend_from_slice(&(f.name.len() as u16).to_le_bytes());
    out.extend_from_slice(f.name.as_bytes());
    out.push(f.n_params);
    out.push(f.n_regs);
    out.extend_from_slice(&(f.instructions.len() as u32).to_le_bytes());
    let mut offsets = Vec::with_capacity(f.instructions.len());
    for ins in &f.instructions {
        offsets.push(out.len());
        encode_instruction(out, ins);
    }
    if let Some(sink) = instr_offsets {
        *sink = offsets;
    }
}

fn decode_function(r: &mut Reader) -> Result<Function, DecodeError> {
    let name = r.string()?;
    let n_params = r.u8()?;
    let n_regs = r.u8()?;
    let n_instrs = r.u32()? as usize;
    let mut instructions = Vec::with_capacity(n_instrs.min(65536));
    for _ in 0..n_instrs {
        instructions.push(decode_instruction(r)?);
    }
    Ok(Function { name, n_params, n_regs, instructions })
}

/// Per-function byte layout of an encoded program, used by passes that
/// need stable byte offsets into the "code" section.
#[derive(Debug, Clone)]
pub struct FunctionLayout {
    pub name: String,
    pub start: usize,
    pub end: usize,
    pub instr_offsets: Vec<usize>,
}

pub fn encode_program(p: &Program) -> Vec<u8> {
    encode_program_with_layout(p).0
}

pub fn encode_program_with_layout(p: &Program) -> (Vec<u8>, Vec<FunctionLayout>) {
    let mut out = Vec::new();
    out.extend_from_slice(PROGRAM_MAGIC);
    out.extend_from_slice(&(p.functions.len() as u16).to_le_bytes());
    let mut layouts = Vec::with_capacity(p.functions.len());
    for f in &p.functions {
        let start = out.len();
        let mut offsets = Vec::new();
        encode_function(&mut out, f, Some(&mut offsets));
        layouts.push(FunctionLayout {
            name: f.name.clone(),
            start,
            end: out.len(),
            instr_offsets: offsets,
        });
    }
    out.extend_from_slice(&(p.string_table.len() as u16).to_le_bytes());
    for s in &p.string_table {
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out.extend_from_slice(&(p.data_table.len() as u16).to_le_bytes());
    for d in &p.data_table {
        out.extend_from_slice(&(d.len() as u16).to_le_bytes());
        out.extend_from_slice(d);
    }
    out.extend_from_slice(&(p.dispatch_table.len() as u16).to_le_bytes());
    for f in &p.dispatch_table {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&p.entry.to_le_bytes());
    (out, layouts)
}

pub fn decode_program(bytes: &[u8]) -> Result<Program, DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != PROGRAM_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let n_functions = r.u16()? as usize;
    let mut functions = Vec::with_capacity(n_functions.min(4096));
    for _ in 0..n_functions {
        functions.push(decode_function(&mut r)?);
    }
    let n_strings = r.u16()? as usize;
    let mut string_table = Vec::with_capacity(n_strings.min(4096));
    for _ in 0..n_strings {
        string_table.push(r.string()?);
    }
    let n_data = r.u16()? as usize;
    let mut data_table = Vec::with_capacity(n_data.min(4096));
    for _ in 0..n_data {
        data_table.push(r.blob()?);
    }
    let n_dispatch = r.u16()? as usize;
    let mut dispatch_table = Vec::with_capacity(n_dispatch.min(4096));
    for _ in 0..n_dispatch {
        dispatch_table.push(r.u16()?);
    }
    let entry = r.u16()?;
    if r.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes);
    }
    let program = Program { functions, string_table, data_table, dispatch_table, entry };
    program.validate()?;
    Ok(program)
}

impl Function {
    /// Structural checks that do not need a surrounding program
    /// (register ranges, jump targets).
    pub fn validate_local(&self) -> Result<(), DecodeError> {
        let invalid = |index: usize, reason: String| DecodeError::Invalid {
            function: self.name.clone(),
            index,
            reason,
        };
        if self.n_params > self.n_regs {
            return Err(invalid(0, format!("{} params > {} regs", self.n_params, self.n_regs)));
        }
        for (i, ins) in self.instructions.iter().enumerate() {
            for r in ins.regs_read().iter().chain(ins.regs_written().iter()) {
                if *r >= self.n_regs {
                    return Err(invalid(i, format!("register r{r} out of range")));
                }
            }
            if let Some(t) = ins.branch_target() {
                if t as usize >= self.instructions.len() {
                    return Err(invalid(i, format!("jump target {t} out of range")));
                }
            }
        }
        Ok(())
    }
}

impl Program {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.entry as usize >= self.functions.len() {
            return Err(DecodeError::BadEntry(self.entry));
        }
        for (slot, func) in self.dispatch_table.iter().enumerate() {
            if *func as usize >= self.functions.len() {
                return Err(DecodeError::BadDispatch { slot, func: *func });
            }
        }
        for f in &self.functions {
            f.validate_local()?;
            let invalid = |index: usize, reason: String| DecodeError::Invalid {
                function: f.name.clone(),
                index,
                reason,
            };
            for (i, ins) in f.instructions.iter().enumerate() {
                match ins {
                    Instruction::Call { func, .. } => {
                        if *func as usize >= self.functions.len() {
                            return Err(invalid(i, format!("call target {func} out of range")));
                        }
                    }
                    Instruction::CallInd { slot, .. } => {
                        if *slot as usize >= self.dispatch_table.len() {
                            return Err(invalid(i, format!("dispatch slot {slot} out of range")));
                        }
                    }
                    Instruction::DynLoad { sect_idx, .. }
                    | Instruction::NatCall { sect_idx, .. }
                    | Instruction::Tchk { sect_idx, .. } => {
                        if *sect_idx as usize >= self.string_table.len() {
                            return Err(invalid(i, format!("string index {sect_idx} out of range")));
                        }
                    }
                    Instruction::HashEq { salt_idx, .. } => {
                        if *salt_idx as usize >= self.data_table.len() {
                            return Err(invalid(i, format!("data index {salt_idx} out of range")));
                        }
                    }
                    _ => {}
                }
                if let Instruction::NatCall { nkey_idx, .. } = ins {
                    if *nkey_idx as usize >= self.data_table.len() {
                        return Err(invalid(i, format!("data index {nkey_idx} out of range")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Layout of an encoded native section: cleartext header, then the
/// (optionally XOR-encrypted) body.
pub struct NativeHeader {
    pub flags: u32,
    pub string_table: Vec<String>,
    /// Byte range of the body within the section.
    pub body_start: usize,
    pub body_len: usize,
}

pub fn decode_native_header(bytes: &[u8]) -> Result<NativeHeader, DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != NATIVE_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let flags = r.u32()?;
    let n_strings = r.u16()? as usize;
    let mut string_table = Vec::with_capacity(n_strings.min(4096));
    for _ in 0..n_strings {
        string_table.push(r.string()?);
    }
    let body_len = r.u32()? as usize;
    let body_start = r.pos;
    if body_start + body_len != bytes.len() {
        return Err(DecodeError::Truncated(body_start));
    }
    Ok(NativeHeader { flags, string_table, body_start, body_len })
}

fn encode_native_body(blob: &NativeBlob) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(blob.data_table.len() as u16).to_le_bytes());
    for d in &blob.data_table {
        body.extend_from_slice(&(d.len() as u16).to_le_bytes());
        body.extend_from_slice(d);
    }
    encode_function(&mut body, &blob.entry, None);
    body
}

/// Byte offset of the entry function's first instruction within the
/// plaintext body of a native blob.
pub fn native_body_instr_offsets(blob: &NativeBlob) -> Vec<usize> {
    let mut body = Vec::new();
    body.extend_from_slice(&(blob.data_table.len() as u16).to_le_bytes());
    for d in &blob.data_table {
        body.extend_from_slice(&(d.len() as u16).to_le_bytes());
        body.extend_from_slice(d);
    }
    let mut offsets = Vec::new();
    encode_function(&mut body, &blob.entry, Some(&mut offsets));
    offsets
}

pub fn encode_native(blob: &NativeBlob, key: Option<&[u8; 16]>) -> Vec<u8> {
    let mut body = encode_native_body(blob);
    if let Some(key) = key {
        body = xor_crypt(key, &body);
    }
    let mut out = Vec::new();
    out.extend_from_slice(NATIVE_MAGIC);
    out.extend_from_slice(&blob.flags.to_le_bytes());
    out.extend_from_slice(&(blob.string_table.len() as u16).to_le_bytes());
    for s in &blob.string_table {
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes a native section. `key` is required when the header flags
/// mark the body as encrypted; a wrong key surfaces as a decode error.
pub fn decode_native(bytes: &[u8], key: Option<&[u8; 16]>) -> Result<NativeBlob, DecodeError> {
    let header = decode_native_header(bytes)?;
    let mut body = bytes[header.body_start..header.body_start + header.body_len].to_vec();
    if header.flags & NATIVE_FLAG_ENCRYPTED != 0 {
        let key = key.ok_or(DecodeError::Truncated(header.body_start))?;
        body = xor_crypt(key, &body);
    }
    let mut r = Reader { bytes: &body, pos: 0 };
    let n_data = r.u16()? as usize;
    let mut data_table = Vec::with_capacity(n_data.min(4096));
    for _ in 0..n_data {
        data_table.push(r.blob()?);
    }
    let entry = decode_function(&mut r)?;
    if r.pos != body.len() {
        return Err(DecodeError::TrailingBytes);
    }
    entry.validate_local()?;
    // String indices in a blob resolve against its own table.
    for (i, ins) in entry.instructions.iter().enumerate() {
        let bad = |idx: u16| DecodeError::Invalid {
            function: entry.name.clone(),
            index: i,
            reason: format!("string index {idx} out of range"),
        };
        match ins {
            Instruction::DynLoad { sect_idx, .. }
            | Instruction::NatCall { sect_idx, .. }
            | Instruction::Tchk { sect_idx, .. } => {
                if *sect_idx as usize >= header.string_table.len() {
                    return Err(bad(*sect_idx));
                }
            }
            Instruction::HashEq { salt_idx, .. } => {
                if *salt_idx as usize >= data_table.len() {
                    return Err(bad(*salt_idx));
                }
            }
            _ => {}
        }
    }
    Ok(NativeBlob { entry, string_table: header.string_table, data_table, flags: header.flags })
}

/// Rewrites one cleartext string-table entry of an encoded native
/// section without touching the (possibly encrypted) body.
pub fn patch_native_string(
    bytes: &[u8],
    from: &str,
    to: &str,
) -> Result<Option<Vec<u8>>, DecodeError> {
    let header = decode_native_header(bytes)?;
    if !header.string_table.iter().any(|s| s == from) {
        return Ok(None);
    }
    let strings: Vec<String> = header
        .string_table
        .iter()
        .map(|s| if s == from { to.to_string() } else { s.clone() })
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(NATIVE_MAGIC);
    out.extend_from_slice(&header.flags.to_le_bytes());
    out.extend_from_slice(&(strings.len() as u16).to_le_bytes());
    for s in &strings {
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    }
    out.extend_from_slice(&(header.body_len as u32).to_le_bytes());
    out.extend_from_slice(&bytes[header.body_start..]);
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_program() -> Program {
        Program {
            functions: vec![Function {
                name: "main".into(),
                n_params: 1,
                n_regs: 3,
                instructions: vec![
                    Instruction::Const { rd: 1, imm: 42 },
                    Instruction::Alu { op: AluOp::Add, rd: 2, ra: 0, rb: 1 },
                    Instruction::Out { rs: 2 },
                    Instruction::Halt,
                ],
            }],
            string_table: vec!["code".into()],
            data_table: vec![vec![]],
            dispatch_table: vec![0],
            entry: 0,
        }
    }

    #[test]
    fn program_round_trips() {
        let p = tiny_program();
        assert_eq!(decode_program(&encode_program(&p)).unwrap(), p);
    }

    #[test]
    fn truncated_program_is_an_error() {
        let bytes = encode_program(&tiny_program());
        assert!(decode_program(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn out_of_range_jump_names_site() {
        let mut p = tiny_program();
        p.functions[0].instructions[3] = Instruction::Jmp { t: 99 };
        let err = decode_program(&encode_program(&p)).unwrap_err();
        match err {
            DecodeError::Invalid { function, index, .. } => {
                assert_eq!(function, "main");
                assert_eq!(index, 3);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn native_blob_round_trips_encrypted() {
        let blob = NativeBlob {
            entry: Function {
                name: "nat".into(),
                n_params: 0,
                n_regs: 1,
                instructions: vec![Instruction::Ret { rs: 0 }],
            },
            string_table: vec!["code".into()],
            data_table: vec![vec![1, 2, 3]],
            flags: NATIVE_FLAG_ENCRYPTED,
        };
        let key = [0x5A; 16];
        let bytes = encode_native(&blob, Some(&key));
        assert_eq!(decode_native(&bytes, Some(&key)).unwrap(), blob);
        // Wrong key fails to decode rather than yielding a valid blob.
        assert!(decode_native(&bytes, Some(&[0u8; 16])).is_err());
        // Header strings stay readable without the key.
        let header = decode_native_header(&bytes).unwrap();
        assert_eq!(header.string_table, vec!["code".to_string()]);
    }

    #[test]
    fn native_string_patch_preserves_body() {
        let blob = NativeBlob {
            entry: Function {
                name: "nat".into(),
                n_params: 0,
                n_regs: 1,
                instructions: vec![Instruction::Ret { rs: 0 }],
            },
            string_table: vec!["code".into()],
            data_table: vec![],
            flags: NATIVE_FLAG_ENCRYPTED,
        };
        let key = [9u8; 16];
        let bytes = encode_native(&blob, Some(&key));
        let patched = patch_native_string(&bytes, "code", "code_orig").unwrap().unwrap();
        let decoded = decode_native(&patched, Some(&key)).unwrap();
        assert_eq!(decoded.string_table, vec!["code_orig".to_string()]);
        assert_eq!(decoded.entry, blob.entry);
    }
}
