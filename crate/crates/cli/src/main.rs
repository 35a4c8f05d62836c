// SPDX-License-Identifier: MIT OR Apache-2.0

//! `vtrace`: batch front end over the vtrace-core pipelines.

mod config;
mod report;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vtrace_core::VtraceError;

use config::Command;

/// Status line on stdout. A closed pipe is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(4, format!("{}: {e}", path.display()))
    }
}

impl From<VtraceError> for CliError {
    fn from(e: VtraceError) -> Self {
        let code = if e.is_numeric() {
            3
        } else if e.is_io() || matches!(e, VtraceError::Container { .. }) {
            4
        } else {
            2
        };
        Self::new(code, e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "vtrace",
    version,
    about = "Attention-routing and representation diagnostics for toy VLA policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Cross-modal and checkpoint-drift CKA.
    Cka(Common),
    /// Attention-knockout suite.
    Knockout(Common),
    /// Centered-window layer sweep.
    Sweep(Common),
    /// Attention localization table.
    Localize(Common),
    /// Visual-masking suite.
    Perturb(Common),
    /// Instruction-edit probe.
    Edit(Common),
    /// Merge existing outputs into report.json and report.md.
    Report(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; 0 uses every available CPU.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Validate and print the plan without running episodes.
    #[arg(long)]
    dry_run: bool,
    /// Override the config's episode count.
    #[arg(long)]
    episodes: Option<usize>,
}

impl Cmd {
    fn split(&self) -> (Command, &Common) {
        match self {
            Cmd::Cka(c) => (Command::Cka, c),
            Cmd::Knockout(c) => (Command::Knockout, c),
            Cmd::Sweep(c) => (Command::Sweep, c),
            Cmd::Localize(c) => (Command::Localize, c),
            Cmd::Perturb(c) => (Command::Perturb, c),
            Cmd::Edit(c) => (Command::Edit, c),
            Cmd::Report(c) => (Command::Report, c),
        }
    }
}

fn execute(command: Command, args: &Common) -> Result<(), CliError> {
    let seed = std::env::var(config::SEED_VAR).ok();
    let loaded = config::load(&args.config, args.episodes, seed.as_deref())?;
    let config_dir = args.config.parent().unwrap_or(Path::new("."));

    if command == Command::Report {
        if args.dry_run {
            say!(
                "report: merge outputs in {} into report.json, report.md",
                loaded.output_dir.display()
            );
            return Ok(());
        }
        let artifacts = report::build(&loaded, &loaded.output_dir)?;
        for p in run::write_artifacts(&loaded.output_dir, &artifacts)? {
            say!("wrote {}", p.display());
        }
        return Ok(());
    }

    let model = run::build_model(&loaded)?;
    let jobs = run::plan(&loaded, &model, command, config_dir)?;
    let cfg = run::suite_config(&loaded, args.workers);
    cfg.validate()?;
    if args.dry_run {
        let c = &loaded.config;
        say!("command: {}", command.as_str());
        say!("config_hash: {}", loaded.hash);
        say!(
            "model: {} ({} layers, {})",
            c.model.kind.as_str(),
            model.num_layers(),
            format!("{:?}", model.regime()).to_lowercase()
        );
        say!(
            "episodes: {} over {} tasks, master_seed {}",
            c.episodes, c.tasks, c.master_seed
        );
        for job in &jobs {
            say!("probe: {}", job.describe(c.episodes, model.num_layers()));
            for f in job.outputs() {
                say!("  -> {}", loaded.output_dir.join(f).display());
            }
        }
        return Ok(());
    }
    let mut artifacts = Vec::new();
    for job in &jobs {
        artifacts.extend(run::execute(job, &loaded, &model, &cfg)?);
    }
    for p in run::write_artifacts(&loaded.output_dir, &artifacts)? {
        say!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = cli.command.split();
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vtrace {}: {}", command.as_str(), e.message);
            ExitCode::from(e.code)
        }
    }
}
