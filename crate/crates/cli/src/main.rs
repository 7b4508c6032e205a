use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lacvis_cli::commands::{self, InvertArgs, InvertTarget};
use lacvis_cli::config::RunConfig;
use lacvis_cli::report::Report;
use lacvis_cli::verify::Fault;

#[derive(Parser)]
#[command(name = "lacvis", version, about = "Feature inversion and interpretability experiments on a small frozen ReLU encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated substrings selecting verification checks.
    #[arg(long, global = true)]
    checks: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    AdjointKernelSign,
}

#[derive(Subcommand)]
enum Command {
    /// Train LAC parameters, the linear probe and optionally the attention head.
    Train,
    /// Render reconstructions, channel inversions or a class reconstruction.
    Invert {
        /// Index into the test set.
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Layer index, or `all`.
        #[arg(long, default_value = "all")]
        layer: String,
        /// Comma-separated channel indices.
        #[arg(long, value_delimiter = ',', conflicts_with = "class")]
        channels: Vec<usize>,
        #[arg(long)]
        class: Option<usize>,
    },
    /// Run the exact-identity and oracle checks.
    Verify {
        /// Inject a deliberate defect to confirm the suite catches it.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Covariance-volume channel selection and the duality experiment.
    Select,
    /// ECR-ordered ablation and the corruption severity sweep.
    Ablate,
    /// Attention-head readout renderings.
    Attend,
    /// Print the effective configuration as TOML.
    Config,
}

fn print_checks(r: &Report) {
    for c in &r.checks {
        println!(
            "{} {:<34} observed {:>11.3e}  tolerance {:>9.1e}  cases {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.observed,
            c.tolerance,
            c.cases
        );
        if !c.passed {
            for d in &c.details {
                println!("     {d}");
            }
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let report = match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            return Ok(true);
        }
        Command::Train => commands::train(&cfg)?,
        Command::Invert {
            image,
            layer,
            channels,
            class,
        } => {
            let layer = match layer.as_str() {
                "all" => None,
                s => Some(s.parse().map_err(|_| anyhow::anyhow!("layer must be an index or `all`, got {s}"))?),
            };
            let target = match class {
                Some(c) => InvertTarget::Class(c),
                None if channels.is_empty() => bail!("give --channels or --class"),
                None => InvertTarget::Channels(channels),
            };
            commands::invert(&cfg, &InvertArgs { image, layer, target })?
        }
        Command::Verify { inject_fault } => {
            let fault = match inject_fault {
                None => Fault::None,
                Some(FaultArg::AdjointKernelSign) => Fault::AdjointKernelSign,
            };
            commands::verify(&cfg, cli.checks.as_deref(), fault)?
        }
        Command::Select => commands::select(&cfg)?,
        Command::Ablate => commands::ablate(&cfg)?,
        Command::Attend => commands::attend(&cfg)?,
    };
    print_checks(&report);
    for (k, v) in &report.summary {
        println!("{k}: {v}");
    }
    println!("wrote {}", cfg.out_dir.display());
    Ok(report.passed())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
