//! Corpus generation, differential equivalence checking, overhead
//! measurement, and the scheme × pipeline evaluation matrix.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{bypass_pipeline, fuzz, PipelineCtx, Strategy};
use crate::bundle::{Bundle, KeyPair, Section, SectionKind};
use crate::protect::{protect, ProtectionReport, Scheme, SchemeConfig};
use crate::vm::isa::{
    decode_native_header, decode_program, encode_program_with_layout, Function, Instruction,
    Program, NATIVE_FLAG_ENCRYPTED,
};
use crate::vm::{run, HookTable, RunLimits, Termination};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const GOLD: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_programs: usize,
    pub n_functions: usize,
    pub n_conditions: usize,
    pub const_range: (i32, i32),
    pub suite_size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            n_programs: 20,
            n_functions: 8,
            n_conditions: 6,
            const_range: (-1024, 1024),
            suite_size: 100,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<(), HarnessError> {
        if self.n_functions < 2 {
            return Err(HarnessError::BadSpec("need at least two functions".into()));
        }
        if self.const_range.0 > self.const_range.1 {
            return Err(HarnessError::BadSpec("empty constant range".into()));
        }
        Ok(())
    }

    /// Key the generated bundles are signed with.
    pub fn dev_key(&self) -> KeyPair {
        KeyPair::from_seed_u64(self.seed ^ 0x00DE_5161)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub bundle: Bundle,
    /// Input vectors, including ones that fire every injected site.
    pub suite: Vec<Vec<u32>>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid corpus spec: {0}")]
    BadSpec(String),
    #[error("no tamper target for scheme {0}")]
    NoTamperTarget(&'static str),
}

fn sited_worker(name: String, c: u32, k1: u32, k2: u32) -> Function {
    use crate::vm::isa::AluOp;
    Function {
        name,
        n_params: 2,
        n_regs: 7,
        instructions: vec![
            Instruction::Alu { op: AluOp::Add, rd: 2, ra: 0, rb: 1 },
            Instruction::Jnec { rs: 0, imm: c, t: 8 },
            // The guarded block: two independent halves so every scheme
            // (including the splitting one) can extract it.
            Instruction::Const { rd: 3, imm: k1 },
            Instruction::Alu { op: AluOp::Xor, rd: 4, ra: 1, rb: 3 },
            Instruction::Out { rs: 4 },
            Instruction::Const { rd: 5, imm: k2 },
            Instruction::Alu { op: AluOp::Add, rd: 6, ra: 0, rb: 5 },
            Instruction::Out { rs: 6 },
            Instruction::Out { rs: 2 },
            Instruction::Ret { rs: 2 },
        ],
    }
}

fn plain_worker(name: String) -> Function {
    use crate::vm::isa::AluOp;
    Function {
        name,
        n_params: 2,
        n_regs: 3,
        instructions: vec![
            Instruction::Alu { op: AluOp::Xor, rd: 2, ra: 0, rb: 1 },
            Instruction::Out { rs: 2 },
            Instruction::Ret { rs: 2 },
        ],
    }
}

/// One generated program plus the (input slot, constant) pairs that
/// fire its worker sites.
fn gen_program(spec: &CorpusSpec, idx: usize) -> (Program, Vec<(usize, u32)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (idx as u64 + 1).wrapping_mul(GOLD));
    let (lo, hi) = spec.const_range;
    let draw = move |rng: &mut ChaCha8Rng| rng.gen_range(lo..=hi) as u32;

    let workers = spec.n_functions - 1;
    let sited = spec.n_conditions.saturating_sub(1).min(workers);
    let mut functions = vec![Function {
        name: "main".into(),
        n_params: 4,
        n_regs: 9,
        instructions: vec![],
    }];
    let mut fire_with = Vec::new();
    for j in 1..=workers {
        let name = format!("f{j}");
        if j <= sited {
            let c = draw(&mut rng);
            // Odd workers key on input 0, even ones on input 1.
            fire_with.push((1 - (j % 2), c));
            functions.push(sited_worker(name, c, draw(&mut rng), draw(&mut rng)));
        } else {
            functions.push(plain_worker(name));
        }
    }

    // Entry: stash two inputs, run an always-firing condition with a
    // dead two-half block, then drive every worker.
    let k = draw(&mut rng);
    let mut main_ins = vec![
        Instruction::Mov { rd: 4, rs: 0 },
        Instruction::Mov { rd: 5, rs: 1 },
        Instruction::Const { rd: 6, imm: k },
        Instruction::Jnec { rs: 6, imm: k, t: 8 },
        Instruction::Const { rd: 7, imm: draw(&mut rng) },
        Instruction::Out { rs: 7 },
        Instruction::Const { rd: 8, imm: draw(&mut rng) },
        Instruction::Out { rs: 8 },
    ];
    for j in 1..=workers {
        let args = if j % 2 == 1 { vec![4, 5] } else { vec![5, 4] };
        main_ins.push(Instruction::Call { func: j as u16, args });
        main_ins.push(Instruction::Out { rs: 0 });
    }
    main_ins.push(Instruction::Halt);
    functions[0].instructions = main_ins;

    let program = Program {
        functions,
        string_table: vec![],
        data_table: vec![],
        dispatch_table: vec![],
        entry: 0,
    };
    debug_assert!(program.validate().is_ok());
    (program, fire_with)
}

fn gen_suite(spec: &CorpusSpec, idx: usize, fire_with: &[(usize, u32)]) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (idx as u64 + 1).wrapping_mul(GOLD) ^ 1);
    let (lo, hi) = spec.const_range;
    let mut suite = Vec::with_capacity(spec.suite_size);
    // Coverage inputs first: one per site, then random fill.
    for (slot, c) in fire_with {
        let mut input: Vec<u32> = (0..4).map(|_| rng.gen_range(lo..=hi) as u32).collect();
        input[*slot] = *c;
        suite.push(input);
    }
    while suite.len() < spec.suite_size {
        let input = (0..4)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(lo..=hi) as u32
                } else {
                    rng.gen()
                }
            })
            .collect();
        suite.push(input);
    }
    suite.truncate(spec.suite_size.max(fire_with.len()));
    suite
}

/// Deterministic corpus of signed bundles with per-bundle input suites.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusItem>, HarnessError> {
    spec.validate()?;
    let dev = spec.dev_key();
    let mut out = Vec::with_capacity(spec.n_programs);
    for idx in 0..spec.n_programs {
        let (program, fire_with) = gen_program(spec, idx);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (idx as u64 + 1).wrapping_mul(GOLD) ^ 2);
        let mut resource = vec![0u8; 32];
        rng.fill(&mut resource[..]);
        let bundle = Bundle::new(vec![
            Section::new("code", SectionKind::Code, crate::vm::encode_program(&program)),
            Section::new("res0", SectionKind::Resource, resource),
        ])
        .sign(&dev);
        let suite = gen_suite(spec, idx, &fire_with);
        out.push(CorpusItem { bundle, suite });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivVerdict {
    pub equal: bool,
    pub first_divergence: Option<String>,
}

/// Differential oracle: equal iff, on every input, the two bundles emit
/// the same filtered output sequence and terminate the same way. A step
/// limit on either side counts as divergence.
pub fn run_equivalence(a: &Bundle, b: &Bundle, suite: &[Vec<u32>], ignore: &[u32]) -> EquivVerdict {
    for (i, inputs) in suite.iter().enumerate() {
        let seed = i as u64;
        let ra = run(a, inputs, seed, RunLimits::default(), &mut HookTable::default());
        let rb = run(b, inputs, seed, RunLimits::default(), &mut HookTable::default());
        let (Ok(ra), Ok(rb)) = (ra, rb) else {
            return EquivVerdict {
                equal: false,
                first_divergence: Some(format!("input {i}: run setup failed")),
            };
        };
        let fa: Vec<u32> = ra.outputs.iter().copied().filter(|v| !ignore.contains(v)).collect();
        let fb: Vec<u32> = rb.outputs.iter().copied().filter(|v| !ignore.contains(v)).collect();
        let limited = ra.termination == Termination::StepLimit || rb.termination == Termination::StepLimit;
        if fa != fb || ra.termination != rb.termination || limited {
            return EquivVerdict {
                equal: false,
                first_divergence: Some(format!(
                    "input {i}: {:?} / {:?} vs {:?} / {:?}",
                    ra.termination, fa, rb.termination, fb
                )),
            };
        }
    }
    EquivVerdict { equal: true, first_divergence: None }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadStats {
    /// (steps + decrypted bytes) ratio, protected over original.
    pub instr_ratio: f64,
    pub size_ratio: f64,
    /// Mean fraction of encrypted native sections decrypted per run.
    pub exposure: f64,
}

pub fn measure_overhead(original: &Bundle, protected: &Bundle, suite: &[Vec<u32>]) -> OverheadStats {
    let encrypted_sections = protected
        .sections
        .iter()
        .filter(|s| {
            s.kind == SectionKind::Native
                && decode_native_header(&s.bytes)
                    .map(|h| h.flags & NATIVE_FLAG_ENCRYPTED != 0)
                    .unwrap_or(false)
        })
        .count();
    let mut orig_work = 0u64;
    let mut prot_work = 0u64;
    let mut exposure_sum = 0.0;
    for (i, inputs) in suite.iter().enumerate() {
        let seed = i as u64;
        if let Ok(r) = run(original, inputs, seed, RunLimits::default(), &mut HookTable::default()) {
            orig_work += r.steps + r.decrypt_bytes;
        }
        let touched: Rc<RefCell<std::collections::BTreeSet<String>>> = Rc::default();
        let mut hooks = HookTable::default();
        let sink = Rc::clone(&touched);
        hooks.natcall_enter = Some(Box::new(move |ev| {
            sink.borrow_mut().insert(ev.section.clone());
        }));
        if let Ok(r) = run(protected, inputs, seed, RunLimits::default(), &mut hooks) {
            prot_work += r.steps + r.decrypt_bytes;
        }
        drop(hooks);
        if encrypted_sections > 0 {
            exposure_sum += touched.borrow().len() as f64 / encrypted_sections as f64;
        }
    }
    OverheadStats {
        instr_ratio: prot_work as f64 / orig_work.max(1) as f64,
        size_ratio: protected.serialize().len() as f64 / original.serialize().len().max(1) as f64,
        exposure: if suite.is_empty() { 0.0 } else { exposure_sum / suite.len() as f64 },
    }
}

/// Picks one covered byte whose mutation each scheme should detect:
/// an encrypted body byte for the packer, a code byte inside every
/// checksummed prefix (the entry function's name) for the rest.
pub fn tamper_target(bundle: &Bundle, scheme: Scheme) -> Result<(String, usize), HarnessError> {
    if scheme == Scheme::DexEncrypt {
        let section = bundle
            .sections
            .iter()
            .find(|s| {
                s.kind == SectionKind::Native
                    && decode_native_header(&s.bytes)
                        .map(|h| h.flags & NATIVE_FLAG_ENCRYPTED != 0)
                        .unwrap_or(false)
            })
            .ok_or(HarnessError::NoTamperTarget("dex_encrypt"))?;
        let header = decode_native_header(&section.bytes).expect("checked above");
        return Ok((section.name.clone(), header.body_start));
    }
    let code = bundle
        .section("code")
        .ok_or(HarnessError::NoTamperTarget("code"))?;
    let program = decode_program(&code.bytes).map_err(|_| HarnessError::NoTamperTarget("code"))?;
    let (bytes, layouts) = encode_program_with_layout(&program);
    debug_assert_eq!(bytes, code.bytes);
    // First byte of the entry function's name: semantically inert but
    // inside every checksum scope, including the 100-byte prefix.
    let entry = &layouts[program.entry as usize];
    let offset = entry.start + 2;
    Ok(("code".into(), offset))
}

/// Flip the scheme's covered byte and re-sign with the given key.
pub fn tamper(bundle: &Bundle, scheme: Scheme, signer: &KeyPair) -> Result<Bundle, HarnessError> {
    let (section, offset) = tamper_target(bundle, scheme)?;
    let mut out = bundle.clone();
    out.section_mut(&section).expect("target exists").bytes[offset] ^= 0x01;
    Ok(out.sign(signer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub scheme: String,
    pub pipeline: String,
    pub programs: usize,
    pub bypass_success: bool,
    pub sites_neutralized: usize,
    pub instr_ratio: f64,
    pub size_ratio: f64,
    pub fraction_fired: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub schema_version: u32,
    pub seed: u64,
    pub cells: Vec<EvalCell>,
}

impl EvalMatrix {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// True when at least one pipeline bypassed the scheme.
    pub fn row_bypassed(&self, scheme: Scheme) -> bool {
        self.cells
            .iter()
            .any(|c| c.scheme == scheme.name() && c.bypass_success)
    }
}

struct ProtectedItem {
    protected: Bundle,
    report: ProtectionReport,
    suite: Vec<Vec<u32>>,
    overhead: OverheadStats,
    fraction_fired: f64,
}

fn eval_scheme(
    spec: &CorpusSpec,
    corpus: &[CorpusItem],
    scheme: Scheme,
    strategies: &[Strategy],
) -> Vec<EvalCell> {
    let dev = spec.dev_key();
    let attacker = KeyPair::from_seed_u64(spec.seed ^ 0x00A7_7ACC);
    let mut protected_items = Vec::new();
    let mut protect_error: Option<String> = None;
    for (idx, item) in corpus.iter().enumerate() {
        let config = SchemeConfig::new(scheme, spec.seed ^ (idx as u64 + 1).wrapping_mul(GOLD));
        match protect(&item.bundle, &config, &dev) {
            Ok((protected, report)) => {
                let overhead = measure_overhead(&item.bundle, &protected, &item.suite);
                let stats = fuzz(&protected, 200, 4, spec.seed, Some(&report));
                protected_items.push(ProtectedItem {
                    protected,
                    report,
                    suite: item.suite.clone(),
                    overhead,
                    fraction_fired: stats.fraction_fired.unwrap_or(0.0),
                });
            }
            Err(e) => {
                protect_error.get_or_insert_with(|| e.to_string());
            }
        }
    }

    let n = protected_items.len();
    let mean = |f: &dyn Fn(&ProtectedItem) -> f64| {
        if n == 0 {
            0.0
        } else {
            protected_items.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let instr_ratio = mean(&|p| p.overhead.instr_ratio);
    let size_ratio = mean(&|p| p.overhead.size_ratio);
    let fraction_fired = mean(&|p| p.fraction_fired);

    let mut cells = Vec::new();
    for strategy in strategies {
        let mut success = n > 0;
        let mut neutralized = 0;
        let mut error = protect_error.clone();
        for p in &protected_items {
            let ctx = PipelineCtx {
                suite: &p.suite,
                seed: spec.seed,
                attacker_key: &attacker,
                report: Some(&p.report),
            };
            match bypass_pipeline(&p.protected, *strategy, &ctx) {
                Ok((_, report)) => {
                    success &= report.bypass_success;
                    neutralized += report.sites_neutralized;
                }
                Err(e) => {
                    success = false;
                    error.get_or_insert_with(|| e.to_string());
                }
            }
        }
        cells.push(EvalCell {
            scheme: scheme.name().to_string(),
            pipeline: strategy.name().to_string(),
            programs: n,
            bypass_success: success,
            sites_neutralized: neutralized,
            instr_ratio,
            size_ratio,
            fraction_fired,
            error,
        });
    }
    cells
}

/// The full cross product. Individual cell failures are recorded in
/// the cell; nothing aborts the matrix. Scheme rows run concurrently.
pub fn evaluate(
    spec: &CorpusSpec,
    schemes: &[Scheme],
    strategies: &[Strategy],
) -> Result<EvalMatrix, HarnessError> {
    let corpus = gen_corpus(spec)?;
    let rows: Vec<Vec<EvalCell>> = std::thread::scope(|scope| {
        let handles: Vec<_> = schemes
            .iter()
            .map(|scheme| {
                let corpus = &corpus;
                scope.spawn(move || eval_scheme(spec, corpus, *scheme, strategies))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("row panicked")).collect()
    });
    Ok(EvalMatrix {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: spec.seed,
        cells: rows.into_iter().flatten().collect(),
    })
}
