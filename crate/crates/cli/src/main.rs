// SPDX-License-Identifier: MIT OR Apache-2.0

//! `icl-locus`: runs one experiment command against a JSON run config.
//!
//! Exit status is 0 on success, 1 for config or usage errors and 2 when the
//! run itself fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icl_locus::harness::{configure_threads, execute, Command, RunConfig};
use icl_locus::{Error, MaskVariant};

#[derive(Debug, Parser)]
#[command(name = "icl-locus", version, about = "Layer-wise context masking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train the translation model and write model.iclm.
    Pretrain,
    /// Score the configured prompt regime.
    Eval,
    /// Mask context from every layer for each configured variant.
    SweepContext,
    /// Mask the whole input from every layer.
    SweepInput,
    /// Zero one layer's attention at a time.
    SweepLayers,
    /// Context sweeps over the configured example counts.
    SweepPrompts,
    /// Fine-tune a LoRA adapter at each single layer.
    LoraScan,
    /// Train attention-head gates.
    GateTrain,
    /// Measure attention cost with context eviction.
    BenchEvict,
    /// Full summary: prompt and layer sweeps with plateau and critical layer.
    Report,
}

impl Cmd {
    fn command(&self) -> Command {
        match self {
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Eval => Command::Eval,
            Cmd::SweepContext => Command::SweepContext,
            Cmd::SweepInput => Command::SweepInput,
            Cmd::SweepLayers => Command::SweepLayers,
            Cmd::SweepPrompts => Command::SweepPrompts,
            Cmd::LoraScan => Command::LoraScan,
            Cmd::GateTrain => Command::GateTrain,
            Cmd::BenchEvict => Command::BenchEvict,
            Cmd::Report => Command::Report,
        }
    }
}

#[derive(Debug, clap::Args)]
struct Overrides {
    /// JSON run config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must be absent or empty.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// In-context example count.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Mask variant, e.g. InstrAndExMask or instr-and-ex-mask.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<MaskVariant>,
    #[arg(long, global = true)]
    from_layer: Option<usize>,
    /// Gate sparsity weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Trained model to load instead of pretraining in-process.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<MaskVariant, String> {
    MaskVariant::parse(&s.replace(['-', '_'], "")).ok_or_else(|| {
        let names: Vec<&str> = MaskVariant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

fn resolve(o: &Overrides) -> icl_locus::Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.out = Some(out.clone());
    }
    if let Some(k) = o.k {
        cfg.prompt.k = k;
    }
    if let Some(v) = o.variant {
        cfg.prompt.variant = v;
        cfg.sweep.variants = vec![v];
    }
    if let Some(l) = o.from_layer {
        cfg.prompt.from_layer = Some(l);
    }
    if let Some(lambda) = o.lambda {
        cfg.gates.lambda = lambda;
    }
    if let Some(c) = &o.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let run = configure_threads()
        .and_then(|()| resolve(&cli.overrides))
        .and_then(|cfg| execute(cli.command.command(), &cfg));
    match run {
        Ok(out) => {
            for line in &out.summary {
                println!("{line}");
            }
            println!("wrote {}", out.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
