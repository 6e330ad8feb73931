use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crossmodal_rec::pipeline::{run_pipeline, run_stage, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "xmrec", version, about = "Cross-modal semantic IDs and generative recommendation")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.run_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Sets every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dual-modal corpus.
    Synth,
    /// Cluster each modality into pseudo-labels.
    Labels,
    /// Train the quantizer and assign semantic IDs.
    Quantize,
    /// Collision rates, code histograms and perplexity.
    Diagnose,
    /// Materialize training examples.
    BuildTasks,
    /// Train the generative recommender.
    Train,
    /// Write per-user test rankings.
    Infer,
    /// Test metrics and baselines.
    Eval,
    /// All stages in order.
    Pipeline,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::Labels => Stage::Labels,
            Command::Quantize => Stage::Quantize,
            Command::Diagnose => Stage::Diagnose,
            Command::BuildTasks => Stage::BuildTasks,
            Command::Train => Stage::Train,
            Command::Infer => Stage::Infer,
            Command::Eval => Stage::Eval,
            Command::Pipeline => return None,
        })
    }
}

fn effective_config(cli: &Cli) -> crossmodal_rec::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(d) = &cli.run_dir {
        cfg.paths.run_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seeds.labels = s;
        cfg.seeds.quantizer = s;
        cfg.seeds.grm = s;
        cfg.synth.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    let result = effective_config(&cli).and_then(|cfg| {
        if cli.print_config {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        match cli.command.stage() {
            Some(stage) => run_stage(stage, &cfg),
            None => run_pipeline(&cfg),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
