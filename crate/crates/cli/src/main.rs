mod commands;
mod config;
mod run;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use oddvlm::evaluation::DEFAULT_TAU;
use oddvlm::Task;

use crate::config::{parse_backend_flag, parse_strategies, BackendConfig, ConfigFile, RunConfig, DEFAULT_IMAGE_TOKENS};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Detection,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => Task::Classification,
            TaskArg::Detection => Task::Detection,
        }
    }
}

#[derive(Parser)]
#[command(name = "oddvlm", version, about = "Prompting strategies for ODD concept recognition with vision-language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a taxonomy file (and optionally a road-context table).
    Validate {
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        road_context: Option<PathBuf>,
    },
    /// Show the stages and prompt budget of one or more strategies.
    Plan {
        /// A strategy id, a comma-separated list, or `all`.
        #[arg(long, default_value = "all")]
        strategy: String,
        #[arg(long, value_enum, default_value = "classification")]
        task: TaskArg,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Also print the total at this many tokens per image.
        #[arg(long)]
        image_tokens: Option<usize>,
    },
    /// Run strategies over a manifest and write audit logs and reports.
    Run(RunArgs),
    /// Score an existing audit log against a manifest.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value = "classification")]
        task: TaskArg,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long)]
        label: Option<String>,
        /// Write the report here (and a CSV next to it) instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate saved reports; the first one is compared against the rest.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_IMAGE_TOKENS)]
        image_tokens: usize,
    },
    /// Per-category and per-concept recall differences between two reports.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    /// mock:oracle, mock:scripted or mock:noise. Remote backends need a config file.
    #[arg(long)]
    backend: Option<String>,
    /// Script for the scripted mock.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    road_context: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        macro_rules! take {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { file.$target = Some(v.into()); })*
            };
        }
        take!(strategy => strategy, seed => seed, manifest => manifest, out => output_dir, task => task,
            taxonomy => taxonomy, road_context => road_context, templates => templates,
            concurrency => concurrency, tau => tau);
        if let Some(b) = &self.backend {
            file.backend = Some(parse_backend_flag(b)?);
        }
        if let Some(s) = self.script {
            match &mut file.backend {
                Some(BackendConfig::Mock { script, .. }) => *script = Some(s),
                _ => anyhow::bail!("--script only applies to the mock backend"),
            }
        }
        RunConfig::resolve(file)
    }
}

/// Exit codes: 0 success, 1 error, 2 usage, 3 a run finished with failed
/// samples or broken invariants.
fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("ODDVLM_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Validate { taxonomy, road_context } => {
            commands::validate(taxonomy.as_deref(), road_context.as_deref())?;
        }
        Command::Plan {
            strategy,
            task,
            taxonomy,
            templates,
            image_tokens,
        } => {
            let strategies = parse_strategies(&strategy)?;
            commands::plan(&strategies, task.into(), taxonomy.as_deref(), templates.as_deref(), image_tokens)?;
        }
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let rt = tokio::runtime::Runtime::new()?;
            let summary = rt.block_on(run::run(&cfg))?;
            for v in &summary.violations {
                eprintln!("invariant violated: {v}");
            }
            if summary.failed_runs > 0 {
                eprintln!("{} sample runs failed; see audit.jsonl", summary.failed_runs);
            }
            if summary.failed_runs > 0 || !summary.violations.is_empty() {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Score {
            manifest,
            records,
            task,
            taxonomy,
            tau,
            label,
            out,
        } => {
            let report = commands::score(commands::ScoreArgs {
                manifest: &manifest,
                records: &records,
                task: task.into(),
                taxonomy: taxonomy.as_deref(),
                tau,
                label: label.as_deref(),
                out: out.as_deref(),
            })?;
            if report.failed_runs > 0 {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Report {
            reports,
            out,
            image_tokens,
        } => commands::report(&reports, out.as_deref(), image_tokens)?,
        Command::Compare { a, b, out } => commands::compare(&a, &b, out.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}
