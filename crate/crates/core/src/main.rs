use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use memlab::backend::RemoteConfig;
use memlab::config::{BackendChoice, RunConfig};
use memlab::pipeline::{self, read_report, render_report, Stage, Workspace};
use memlab::{Error, Result};

#[derive(Parser)]
#[command(name = "memlab", version, about = "Membership-inference lab for fine-tuned language models")]
struct Cli {
    /// TOML run configuration. Defaults to `<out-dir>/config.toml` if present,
    /// otherwise the built-in benchmark.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every per-run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    /// Remote endpoint, e.g. http://localhost:8000/v1.
    #[arg(long, global = true)]
    base_url: Option<String>,
    /// Remote target model.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Remote pre-trained model the references are fine-tuned from.
    #[arg(long, global = true)]
    base_model: Option<String>,
    /// Accept artifacts produced under a different configuration.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    InProcess,
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Build the vocabulary and the member / non-member / candidate splits.
    PrepareData,
    /// Fine-tune the target on the members.
    TrainTarget,
    /// Generate the self-prompt reference set from the target.
    BuildSelfprompt,
    /// Fine-tune the reference models.
    TrainReference,
    /// Score every member and non-member with every method.
    Attack,
    /// ROC curves, AUC and TPR at low FPR.
    Evaluate,
    /// Print the report of a finished run.
    Report,
    /// Every stage, then any configured sweep.
    RunAll,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let saved = cli.out_dir.join(pipeline::CONFIG);
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if saved.exists() => RunConfig::load(&saved)?,
        None => RunConfig::benchmark(cli.seed.unwrap_or(1)),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match cli.backend {
        Some(BackendArg::InProcess) => cfg.backend.kind = BackendChoice::InProcess,
        Some(BackendArg::Remote) => cfg.backend.kind = BackendChoice::Remote,
        None => {}
    }
    if cli.base_url.is_some() || cli.model.is_some() {
        let current = cfg.backend.remote.take();
        let base_url = cli.base_url.clone().or_else(|| current.as_ref().map(|r| r.base_url.clone()));
        let model = cli.model.clone().or_else(|| current.as_ref().map(|r| r.model.clone()));
        let (Some(base_url), Some(model)) = (base_url, model) else {
            return Err(Error::InvalidConfig("remote backend needs both --base-url and --model".into()));
        };
        cfg.backend.remote = Some(match current {
            Some(r) => RemoteConfig { base_url, model, ..r },
            None => RemoteConfig::new(base_url, model),
        });
    }
    if let Some(b) = &cli.base_model {
        cfg.backend.base_model = Some(b.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Report = cli.command {
        print!("{}", render_report(&read_report(&cli.out_dir)?));
        let sweep = cli.out_dir.join("sweep");
        if let Ok(entries) = std::fs::read_dir(&sweep) {
            let mut dirs: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
            dirs.sort();
            for d in dirs {
                println!();
                print!("{}", render_report(&read_report(&d)?));
            }
        }
        return Ok(());
    }
    let ws = Workspace::new(&cli.out_dir, resolve_config(cli)?)?.with_force(cli.force);
    let stage = match cli.command {
        Command::PrepareData => Stage::PrepareData,
        Command::TrainTarget => Stage::TrainTarget,
        Command::BuildSelfprompt => Stage::BuildSelfprompt,
        Command::TrainReference => Stage::TrainReference,
        Command::Attack => Stage::Attack,
        Command::Evaluate => {
            Stage::Evaluate.run(&ws)?;
            print!("{}", render_report(&read_report(&ws.dir)?));
            return Ok(());
        }
        Command::RunAll => {
            let (main, points) = pipeline::run_experiment(&ws)?;
            print!("{}", render_report(&main));
            for p in &points {
                println!();
                print!("{}", render_report(p));
            }
            return Ok(());
        }
        Command::Report => unreachable!(),
    };
    stage.run(&ws)?;
    eprintln!("{} done -> {}", stage.name(), ws.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            // Stage errors already render their cause; skip repeating it.
            if matches!(e, Error::Stage { .. }) {
                src = src.and_then(std::error::Error::source);
            }
            while let Some(s) = src {
                msg.push_str(&format!("\n  caused by: {s}"));
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
