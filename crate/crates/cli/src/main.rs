use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use squant::kernels::verify::Fault;
use squant_cli::commands::{self, Output};
use squant_cli::config::parse_shapes;
use squant_cli::{inspect, CmdResult, Failure, RunConfig};

#[derive(Parser)]
#[command(name = "squant", version, about = "Quantization-aware training toolkit for micro transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Randomized bit-exactness suite for the integer kernels.
    VerifyKernels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cases: Option<u64>,
        /// Corrupt one packed unit to exercise the failure path.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Operation counts and wall time of the GeMM kernels.
    GemmBench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated `MxKxN` list.
        #[arg(long)]
        shapes: Option<String>,
        /// Write zero wall times so the report is reproducible.
        #[arg(long)]
        no_timing: bool,
    },
    /// Pretrain the teacher and distill the quantized student.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on held-out text.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Loss-term and activation-width grid over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Dump query/key statistics, attention maps and bit plans of a checkpoint.
    Inspect {
        #[command(flatten)]
        common: Common,
    },
}

fn setup(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> CmdResult<(RunConfig, Output)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
    }
    edit(&mut cfg);
    cfg.validate()?;
    let out = Output::create(&common.out, &cfg)?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> CmdResult<String> {
    match cli.command {
        Command::VerifyKernels {
            common,
            cases,
            inject_fault,
        } => {
            let (cfg, out) = setup(&common, |c| {
                if let Some(n) = cases {
                    c.verify_cases = n;
                }
            })?;
            commands::verify(&cfg, &out, inject_fault.then_some(Fault::CorruptPack))
        }
        Command::GemmBench {
            common,
            shapes,
            no_timing,
        } => {
            let shapes = shapes
                .map(|s| parse_shapes(&s))
                .transpose()
                .map_err(|e| Failure::usage(anyhow::anyhow!(e)))?;
            let (cfg, out) = setup(&common, |c| {
                if let Some(s) = shapes {
                    c.bench_shapes = s;
                }
            })?;
            commands::gemm_bench(&cfg, &out, !no_timing)
        }
        Command::Train { common } => {
            let (cfg, out) = setup(&common, |_| {})?;
            commands::train(&cfg, &out)
        }
        Command::Eval { common } => {
            let (cfg, out) = setup(&common, |_| {})?;
            commands::eval(&cfg, &out)
        }
        Command::Ablate { common } => {
            let (cfg, out) = setup(&common, |_| {})?;
            commands::ablate(&cfg, &out)
        }
        Command::Inspect { common } => {
            let (cfg, out) = setup(&common, |_| {})?;
            inspect::inspect(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
