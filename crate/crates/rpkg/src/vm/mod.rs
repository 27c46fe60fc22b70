pub mod interp;
pub mod isa;

pub use interp::{
    run, CrashCode, DecryptEvent, DecryptKey, HookTable, RunLimits, RunResult, SetupError,
    TchkAction, TchkEvent, Termination, TriggerEvent, CRASH_VM_FAULT,
};
pub use isa::{
    decode_native, decode_native_header, decode_program, encode_native, encode_program,
    encode_program_with_layout, native_body_instr_offsets, patch_native_string, AluOp, DecodeError,
    Function, FunctionLayout, Instruction, NativeBlob, NativeHeader, Program, SysId,
    CRASH_DECODE_FAULT, CRASH_SSN_FAULT, CRASH_TAMPER_DETECTED, NATIVE_FLAG_ENCRYPTED,
    TCHK_EXPECTED_OFFSET,
};
