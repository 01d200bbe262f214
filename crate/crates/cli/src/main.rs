use std::path::PathBuf;
use std::process::ExitCode;

use card::commands;
use card::stats::Gate;
use card::RunConfig;
use card_core::synth::CorpusKind;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "card", version, about = "Causal latent recovery and debiased reward models")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sycophancy,
    Concept,
}

impl From<Kind> for CorpusKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Sycophancy => CorpusKind::Sycophancy,
            Kind::Concept => CorpusKind::Concept,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (CSV) and its manifest.
    GenSynth,
    /// Train the representation per trial and score latent recovery.
    Ident,
    /// Compare reward models across distribution shifts.
    Bench {
        #[arg(long, value_enum)]
        kind: Kind,
    },
    /// Reward models on each recovered latent block.
    Ablation {
        #[arg(long, value_enum, default_value = "concept")]
        kind: Kind,
    },
    /// Shared-subspace recovery from several labelers.
    Multilabeler,
}

fn load(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.trials {
        cfg.trials = t;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_gates(gates: &[Gate]) -> bool {
    for g in gates {
        println!("{} {}: {}", if g.passed { "PASS" } else { "FAIL" }, g.name, g.detail);
    }
    gates.iter().all(|g| g.passed)
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = load(cli)?;
    Ok(match &cli.command {
        Command::GenSynth => {
            commands::gen_synth(&cfg)?;
            true
        }
        Command::Ident => {
            let r = commands::ident(&cfg)?;
            println!("R²(Z_C, Ẑ_C) = {:.3} ± {:.3} over {} trials", r.r2_c.mean, r.r2_c.se, r.trials.len());
            print_gates(&r.gates)
        }
        Command::Bench { kind } => {
            let r = commands::bench(&cfg, (*kind).into())?;
            for m in &r.methods {
                println!(
                    "{:>8}: worst-case accuracy {:.3}, max deviation {:.3}, Avg-Bias@C {:.3}",
                    m.name,
                    m.summary.worst_case_accuracy,
                    m.summary.max_deviation,
                    m.summary.avg_bias_at_c.unwrap_or(f64::NAN)
                );
            }
            print_gates(&r.gates)
        }
        Command::Ablation { kind } => {
            let r = commands::ablation(&cfg, (*kind).into())?;
            for m in &r.methods {
                println!(
                    "{:>8}: worst-case accuracy {:.3}, Avg-Bias@C {:.3}",
                    m.name,
                    m.summary.worst_case_accuracy,
                    m.summary.avg_bias_at_c.unwrap_or(f64::NAN)
                );
            }
            print_gates(&r.gates)
        }
        Command::Multilabeler => {
            let r = commands::multilabeler(&cfg)?;
            print_gates(&r.gates)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
