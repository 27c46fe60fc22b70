use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rpkg::attack::{bypass_pipeline, ops::fuzz_input, PipelineCtx, Strategy};
use rpkg::bundle::{Bundle, KeyPair};
use rpkg::crypto::ChecksumMode;
use rpkg::harness::{evaluate, gen_corpus, CorpusSpec};
use rpkg::protect::{protect, Scheme, SchemeConfig};
use rpkg::vm::{run, HookTable, RunLimits};

#[derive(Parser)]
#[command(name = "rpkg", about = "Anti-repackaging scheme laboratory", disable_help_subcommand = true)]
struct Cli {
    /// Report output format; only JSON is implemented.
    #[arg(long, global = true, default_value = "json")]
    format: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    programs: usize,
    #[arg(long, default_value_t = 8)]
    functions: usize,
    #[arg(long, default_value_t = 6)]
    conditions: usize,
    #[arg(long, default_value_t = 100)]
    suite_size: usize,
}

impl SpecArgs {
    fn spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            n_programs: self.programs,
            n_functions: self.functions,
            n_conditions: self.conditions,
            suite_size: self.suite_size,
            ..CorpusSpec::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus of signed bundles and input suites.
    Gen {
        #[command(flatten)]
        spec: SpecArgs,
        /// Directory receiving program_N.rpkg and suite_N.json files.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Apply one protection scheme to a bundle.
    Protect {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        scheme: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        density: f64,
        #[arg(long, default_value = "fixed")]
        checksum_mode: String,
        #[arg(long, default_value_t = 1)]
        nesting: u32,
        /// Developer signing key seed.
        #[arg(long, default_value_t = 0x00DE_5161)]
        key_seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run one bypass pipeline against a protected bundle.
    Attack {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        pipeline: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Attacker signing key seed.
        #[arg(long, default_value_t = 0x00A7_7ACC)]
        key_seed: u64,
        /// JSON file with the input suite (list of u32 lists); a seeded
        /// random suite is generated when omitted.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Execute a bundle on one input vector.
    Run {
        input: PathBuf,
        /// Comma-separated u32 input values.
        #[arg(long, default_value = "")]
        inputs: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: bool,
    },
    /// Check the bundle signature and manifest.
    Verify { input: PathBuf },
    /// Run the scheme × pipeline evaluation matrix.
    Eval {
        #[command(flatten)]
        spec: SpecArgs,
        /// Comma-separated scheme names, or "all".
        #[arg(long, default_value = "all")]
        schemes: String,
        /// Comma-separated pipeline names, or "all".
        #[arg(long, default_value = "all")]
        pipelines: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Execute a bundle with a per-instruction trace on stderr.
    Trace {
        input: PathBuf,
        #[arg(long, default_value = "")]
        inputs: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn usage_err(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn load_bundle(path: &PathBuf) -> Result<Bundle, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Bundle::deserialize(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_inputs(s: &str) -> Result<Vec<u32>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let t = t.trim();
            t.parse::<u32>()
                .or_else(|_| t.parse::<i32>().map(|v| v as u32))
                .map_err(|_| format!("bad input value {t:?}"))
        })
        .collect()
}

fn run_bundle(input: &PathBuf, inputs: &str, seed: u64, trace: bool) -> Result<ExitCode, String> {
    let bundle = load_bundle(input)?;
    let inputs = parse_inputs(inputs)?;
    let mut hooks = HookTable::default();
    if trace {
        hooks.trace = Some(Box::new(|line| eprintln!("{line}")));
    }
    let r = run(&bundle, &inputs, seed, RunLimits::default(), &mut hooks)
        .map_err(|e| e.to_string())?;
    println!(
        "{}",
        serde_json::json!({
            "schema_version": 1,
            "outputs": r.outputs,
            "steps": r.steps,
            "termination": format!("{:?}", r.termination),
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                return usage_err(e);
            }
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if cli.format != "json" {
        return usage_err(format!("unsupported format {:?}", cli.format));
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(msg) => usage_err(msg),
    }
}

fn dispatch(command: Command) -> Result<ExitCode, String> {
    match command {
        Command::Gen { spec, out_dir } => {
            let corpus = gen_corpus(&spec.spec()).map_err(|e| e.to_string())?;
            fs::create_dir_all(&out_dir).map_err(|e| e.to_string())?;
            for (i, item) in corpus.iter().enumerate() {
                fs::write(out_dir.join(format!("program_{i}.rpkg")), item.bundle.serialize())
                    .map_err(|e| e.to_string())?;
                fs::write(
                    out_dir.join(format!("suite_{i}.json")),
                    serde_json::to_string(&item.suite).expect("serializable"),
                )
                .map_err(|e| e.to_string())?;
            }
            println!("wrote {} programs to {}", corpus.len(), out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Protect {
            input,
            output,
            scheme,
            seed,
            density,
            checksum_mode,
            nesting,
            key_seed,
            report,
        } => {
            let scheme = Scheme::parse(&scheme).ok_or(format!("unknown scheme {scheme:?}"))?;
            let bundle = load_bundle(&input)?;
            let mut config = SchemeConfig::new(scheme, seed);
            config.bomb_density = density;
            config.nesting_depth = nesting;
            config.checksum_mode = match checksum_mode.as_str() {
                "fixed" => ChecksumMode::Fixed,
                "buggy" => ChecksumMode::Buggy,
                other => return Err(format!("unknown checksum mode {other:?}")),
            };
            let dev = KeyPair::from_seed_u64(key_seed);
            let (protected, prot_report) =
                protect(&bundle, &config, &dev).map_err(|e| e.to_string())?;
            fs::write(&output, protected.serialize()).map_err(|e| e.to_string())?;
            if let Some(path) = report {
                fs::write(path, serde_json::to_string_pretty(&prot_report).expect("serializable"))
                    .map_err(|e| e.to_string())?;
            }
            println!(
                "{} protected {} sites ({} found)",
                scheme.name(),
                prot_report.sites_protected,
                prot_report.sites_found
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack { input, output, pipeline, seed, key_seed, suite, report } => {
            let strategy =
                Strategy::parse(&pipeline).ok_or(format!("unknown pipeline {pipeline:?}"))?;
            let bundle = load_bundle(&input)?;
            let suite: Vec<Vec<u32>> = match suite {
                Some(path) => {
                    let bytes = fs::read(&path).map_err(|e| e.to_string())?;
                    serde_json::from_slice(&bytes).map_err(|e| e.to_string())?
                }
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..100).map(|_| fuzz_input(&mut rng, 4)).collect()
                }
            };
            let attacker = KeyPair::from_seed_u64(key_seed);
            let ctx = PipelineCtx { suite: &suite, seed, attacker_key: &attacker, report: None };
            let (attacked, verdict) =
                bypass_pipeline(&bundle, strategy, &ctx).map_err(|e| e.to_string())?;
            fs::write(&output, attacked.serialize()).map_err(|e| e.to_string())?;
            if let Some(path) = report {
                fs::write(path, serde_json::to_string_pretty(&verdict).expect("serializable"))
                    .map_err(|e| e.to_string())?;
            }
            println!(
                "{}: bypass_success={} neutralized={}",
                strategy.name(),
                verdict.bypass_success,
                verdict.sites_neutralized
            );
            Ok(if verdict.bypass_success { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Run { input, inputs, seed, trace } => run_bundle(&input, &inputs, seed, trace),
        Command::Trace { input, inputs, seed } => run_bundle(&input, &inputs, seed, true),
        Command::Verify { input } => {
            let bundle = load_bundle(&input)?;
            match bundle.verify() {
                Ok(()) => {
                    println!("ok");
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    println!("verification failed: {e}");
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::Eval { spec, schemes, pipelines, report } => {
            let schemes: Vec<Scheme> = if schemes == "all" {
                Scheme::ALL.to_vec()
            } else {
                schemes
                    .split(',')
                    .map(|s| Scheme::parse(s.trim()).ok_or(format!("unknown scheme {s:?}")))
                    .collect::<Result<_, _>>()?
            };
            let strategies: Vec<Strategy> = if pipelines == "all" {
                Strategy::ALL.to_vec()
            } else {
                pipelines
                    .split(',')
                    .map(|s| Strategy::parse(s.trim()).ok_or(format!("unknown pipeline {s:?}")))
                    .collect::<Result<_, _>>()?
            };
            let matrix = evaluate(&spec.spec(), &schemes, &strategies).map_err(|e| e.to_string())?;
            let json = matrix.to_json();
            match report {
                Some(path) => fs::write(path, &json).map_err(|e| e.to_string())?,
                None => println!("{json}"),
            }
            let all_rows = schemes.iter().all(|s| matrix.row_bypassed(*s));
            Ok(if all_rows { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
    }
}
