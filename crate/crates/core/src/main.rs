use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use riblab::cli::{self, Overrides, RunConfig};
use riblab::rib::Preset;

/// Toy-scale RIB laboratory. Settings come from defaults, then --config,
/// then the flags below, then any `--section.key=value` overrides.
#[derive(Parser)]
#[command(name = "riblab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets the dataset, model, rib and scratch seeds at once.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-image stages; 0 uses every core.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "toy" => Ok(Preset::Toy),
        "paper" => Ok(Preset::Paper),
        _ => Err(format!("unknown preset {s:?} (expected toy or paper)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the toy dataset.
    GenData(Common),
    /// Train θ_0 on the train split.
    Pretrain(Common),
    /// Adapt the first marked eval images and store their maps.
    Rib(Common),
    /// HGR per layer and per RIB iteration.
    AnalyzeHgr(Common),
    /// Threshold sweep over the stored maps, baseline CAM included.
    EvalSeed(Common),
    /// Margin loss against BCE under each output nonlinearity.
    AblateActivations(Common),
    /// Train from scratch with the margin loss alone.
    ScratchRib(Common),
    /// Write gradient maps, CAMs and localization maps as PGM.
    Render(Common),
    /// Every stage in order, with both poolings.
    Pipeline(Common),
}

fn main() -> ExitCode {
    let (args, keys) = cli::split_overrides(std::env::args());
    let parsed = Cli::parse_from(args);
    let (common, stage): (&Common, fn(&RunConfig, usize) -> riblab::Result<()>) = match &parsed.command {
        Command::GenData(c) => (c, |cfg, _| cli::gen_data(cfg)),
        Command::Pretrain(c) => (c, |cfg, _| cli::pretrain(cfg)),
        Command::Rib(c) => (c, cli::rib),
        Command::AnalyzeHgr(c) => (c, cli::analyze_hgr),
        Command::EvalSeed(c) => (c, |cfg, _| cli::eval_seed(cfg)),
        Command::AblateActivations(c) => (c, cli::ablate_activations),
        Command::ScratchRib(c) => (c, |cfg, _| cli::scratch_rib(cfg)),
        Command::Render(c) => (c, |cfg, _| cli::render(cfg)),
        Command::Pipeline(c) => (c, cli::pipeline),
    };
    let overrides = Overrides {
        out: common.out.clone(),
        seed: common.seed,
        preset: common.preset,
        keys,
    };
    let result = RunConfig::load(common.config.as_deref(), &overrides).and_then(|cfg| stage(&cfg, common.jobs));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
