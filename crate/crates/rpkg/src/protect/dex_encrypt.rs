//! Whole-program encryption: every function body moves into an
//! XOR-encrypted native section and the code section becomes a loader
//! stub that decrypts on demand, one function per call. Nothing
//! decrypted outlives the call, which models the re-encrypt-on-return
//! behavior; runtime exposure is observed through NATCALL hooks.

use rand::Rng;

use crate::bundle::{Bundle, Section, SectionKind};
use crate::vm::isa::{
    encode_native, encode_program, Function, Instruction, NativeBlob, Program,
    NATIVE_FLAG_ENCRYPTED,
};

use super::{PassInput, PassOutput, ProtectError, SchemeConfig};

pub(crate) fn apply(
    bundle: &Bundle,
    mut input: PassInput,
    config: &SchemeConfig,
) -> Result<PassOutput, ProtectError> {
    let mut out = PassOutput::new(bundle.clone(), config);
    let mut xor_key = [0u8; 16];
    input.rng.fill(&mut xor_key);

    let program = &input.program;
    let mut stub_strings: Vec<String> = Vec::new();
    for (i, f) in program.functions.iter().enumerate() {
        let section = format!("encfn{i}");
        // Calls made inside the blob resolve against the stub program,
        // so recursion re-enters through the loader.
        let blob = NativeBlob {
            entry: f.clone(),
            string_table: program.string_table.clone(),
            data_table: program.data_table.clone(),
            flags: NATIVE_FLAG_ENCRYPTED,
        };
        out.bundle.put_section(Section::new(
            section.clone(),
            SectionKind::Native,
            encode_native(&blob, Some(&xor_key)),
        ));
        stub_strings.push(section);
        out.report.encrypted_functions.push(f.name.clone());
    }

    let stubs: Vec<Function> = program
        .functions
        .iter()
        .enumerate()
        .map(|(i, f)| Function {
            name: f.name.clone(),
            n_params: f.n_params,
            n_regs: f.n_params.max(1),
            instructions: vec![
                Instruction::NatCall {
                    sect_idx: i as u16,
                    nkey_idx: 0,
                    args: (0..f.n_params).collect(),
                },
                Instruction::Ret { rs: 0 },
            ],
        })
        .collect();
    let stub_program = Program {
        functions: stubs,
        string_table: stub_strings,
        data_table: vec![xor_key.to_vec()],
        dispatch_table: program.dispatch_table.clone(),
        entry: program.entry,
    };
    out.bundle.section_mut("code").expect("code section").bytes = encode_program(&stub_program);
    out.report.sites_protected = out.report.encrypted_functions.len();
    Ok(out)
}
