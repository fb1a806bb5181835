//! `forge`: compile chest X-ray annotation sources into an instruction
//! corpus, mix it into a training stream, validate it, and score model
//! outputs.
//!
//! Exit codes: 0 success, 1 validation failure, 2 input/config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use forge_core::config::ForgeConfig;
use forge_core::conversation::template::TemplateSet;
use forge_core::corpus::{load_blocklist, write_atomic, ScopedBlocklist};
use forge_core::pipeline::{self, config_blocklists, EvalKind};
use forge_core::Error;

#[derive(Parser)]
#[command(name = "forge", version, about = "Chest X-ray instruction corpus compiler and evaluator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus declared in a config file
    Build {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Materialize a weighted sample stream from a built corpus
    Mix {
        #[arg(short, long)]
        config: PathBuf,
        /// Number of tickets to draw
        #[arg(short = 'n', long = "count")]
        count: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score a predictions file against references
    Eval {
        /// report, grounding, or vqa
        #[arg(long)]
        kind: String,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Config supplying the labeler and vocabulary (report kind)
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Metric table output (defaults to `<pred>.metrics.csv`)
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check corpus invariants, template round-trips, and split hygiene
    Validate {
        /// Corpus directory, corpus shard, or mixed file
        path: PathBuf,
        /// Config providing templates and blocklists
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Additional blocklist files
        #[arg(long)]
        blocklist: Vec<PathBuf>,
    },
    /// Report record counts and frequencies per task, dataset, task type
    Stats {
        /// Corpus directory, corpus shard, or mixed file
        path: PathBuf,
        /// Table output (defaults next to the input)
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn seed_override() -> Result<Option<u64>, Error> {
    match std::env::var("FORGE_SEED") {
        Ok(raw) => raw
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("FORGE_SEED must be an integer, got `{raw}`"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Result<ForgeConfig, Error> {
    let mut config = ForgeConfig::load(path)?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Build { config } => {
            let config = load_config(&config)?;
            let outcome = pipeline::cmd_build(&config)?;
            for warning in &outcome.warnings {
                eprintln!("warning: {warning}");
            }
            println!(
                "built {} shards, {} records -> {}",
                outcome.manifest.shards.len(),
                outcome.manifest.total_records(),
                outcome.out_dir.display()
            );
            for (key, shard) in &outcome.manifest.shards {
                println!("  {key}: {}", shard.records);
            }
            for (dataset, removed) in &outcome.manifest.exclusions {
                println!("  excluded from {dataset}: {removed} images");
            }
            println!("corpus id: {}", outcome.manifest.corpus_id);
            Ok(ExitCode::SUCCESS)
        }
        Command::Mix { config, count, out } => {
            let config = load_config(&config)?;
            let outcome = pipeline::cmd_mix(&config, count, &out, seed_override()?)?;
            println!(
                "mixed {} tickets (seed {}) -> {}",
                outcome.meta.tickets,
                outcome.meta.seed,
                outcome.out_path.display()
            );
            for (key, count) in &outcome.stats.per_task_type {
                println!(
                    "  {key}: {count} ({:.4})",
                    *count as f64 / outcome.meta.tickets.max(1) as f64
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            kind,
            pred,
            reference,
            config,
            out,
        } => {
            let kind = EvalKind::parse(&kind)
                .ok_or_else(|| Error::Config(format!("unknown eval kind `{kind}`")))?;
            let config = match config {
                Some(path) => load_config(&path)?,
                None => ForgeConfig::builtin(),
            };
            let report = pipeline::cmd_eval(kind, &pred, &reference, &config)?;
            print!("{}", report.render_text());
            let out = out.unwrap_or_else(|| {
                let mut name = pred.as_os_str().to_owned();
                name.push(".metrics.csv");
                PathBuf::from(name)
            });
            let csv = format!(
                "# config_hash={} seed={}\n{}",
                config.config_hash(),
                config.seed,
                report.render_csv()
            );
            write_atomic(&out, csv.as_bytes())?;
            println!("metrics table -> {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate {
            path,
            config,
            blocklist,
        } => {
            let (templates, mut blocked) = match config {
                Some(path) => {
                    let config = load_config(&path)?;
                    let (templates, _) = config.templates()?;
                    (templates, config_blocklists(&config)?)
                }
                None => (TemplateSet::embedded_default(), Vec::new()),
            };
            for extra in &blocklist {
                blocked.push(ScopedBlocklist::from_ids(load_blocklist(extra)?));
            }
            let summary = pipeline::cmd_validate(&path, &templates, &blocked)?;
            for warning in &summary.warnings {
                eprintln!("warning: {warning}");
            }
            if summary.violations.is_empty() {
                println!(
                    "ok: {} files, {} samples, 0 violations",
                    summary.files, summary.samples
                );
                Ok(ExitCode::SUCCESS)
            } else {
                for v in &summary.violations {
                    eprintln!("violation: {} [{}]: {}", v.file, v.sample_id, v.reason);
                }
                eprintln!(
                    "failed: {} violations over {} files, {} samples",
                    summary.violations.len(),
                    summary.files,
                    summary.samples
                );
                Ok(ExitCode::from(1))
            }
        }
        Command::Stats { path, out } => {
            let outcome = pipeline::cmd_stats(&path)?;
            print!("{}", outcome.render_text());
            let out = out.unwrap_or_else(|| {
                if path.is_dir() {
                    path.join("stats.csv")
                } else {
                    let mut name = path.as_os_str().to_owned();
                    name.push(".stats.csv");
                    PathBuf::from(name)
                }
            });
            write_atomic(&out, outcome.render_csv().as_bytes())?;
            println!("stats table -> {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    // Die quietly when stdout is closed early (e.g. piped to `head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(2)
        }
    }
}
