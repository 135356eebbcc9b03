use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ofcl::config::{RunConfig, KEYS, SEED_ENV};
use ofcl::eval::{self, AccuracyMode};
use ofcl::{aks, ita, pipeline, stream, KnowledgeSpace, TokenBank};

#[derive(Parser)]
#[command(
    name = "ofcl",
    version,
    about = "Open-world few-shot continual learning on synthetic task streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task stream: one episode file per task plus a manifest.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to the configured output)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over a whole stream and write the run directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Read episodes from this manifest instead of generating them
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Run directory (defaults to the configured output)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the metrics report from a records CSV.
    Eval {
        records: PathBuf,
        /// Report open-world accuracy (detection misses count as errors)
        #[arg(long)]
        open_world: bool,
        #[arg(long, default_value_t = 0.95)]
        tpr_target: f64,
    },
    /// Print a knowledge-space or token-bank dump as a table.
    Inspect { dump: PathBuf },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set gamma=0.3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed; overrides the config file and OFCL_SEED
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(String, String)]) -> Result<RunConfig> {
        let file = match &self.config {
            Some(p) => Some(
                std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?,
            ),
            None => None,
        };
        let env = std::env::var(SEED_ENV).ok();
        let mut overrides = Vec::new();
        for s in &self.sets {
            let Some((k, v)) = s.split_once('=') else {
                bail!(
                    "--set expects KEY=VALUE, got '{s}' (keys: {})",
                    KEYS.join(", ")
                );
            };
            overrides.push((k.trim().to_string(), v.to_string()));
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        overrides.extend_from_slice(extra);
        let cfg =
            RunConfig::resolve(file.as_deref(), env.as_deref(), &overrides).with_context(|| {
                match &self.config {
                    Some(p) => format!("in config {}", p.display()),
                    None => "in configuration".to_string(),
                }
            })?;
        Ok(cfg)
    }
}

fn path_override(key: &str, p: &Option<PathBuf>) -> Vec<(String, String)> {
    p.iter()
        .map(|p| (key.to_string(), p.display().to_string()))
        .collect()
}

fn generate(cfg: &ConfigArgs, out: &Option<PathBuf>) -> Result<()> {
    let cfg = cfg.resolve(&path_override("output", out))?;
    let episodes = stream::generate(&cfg.stream_spec())?;
    let manifest = stream::write_stream(&cfg.output, &episodes)?;
    println!(
        "wrote {} episodes, manifest {}",
        episodes.len(),
        manifest.display()
    );
    Ok(())
}

fn run(cfg: &ConfigArgs, manifest: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let mut extra = path_override("manifest", manifest);
    extra.extend(path_override("output", out));
    let cfg = cfg.resolve(&extra)?;
    let episodes = pipeline::load_episodes(&cfg).context("loading episodes")?;
    let result = pipeline::run(&cfg, &episodes)?;
    pipeline::write_run(&cfg.output, &cfg, &result)?;
    print!("{}", result.report.render());
    println!("promotions={}", result.promotions.len());
    println!("run directory {}", cfg.output.display());
    Ok(())
}

fn evaluate(records: &Path, open_world: bool, tpr_target: f64) -> Result<()> {
    let text = std::fs::read_to_string(records)
        .with_context(|| format!("reading {}", records.display()))?;
    let recs =
        eval::parse_records::<f64>(&text).with_context(|| format!("in {}", records.display()))?;
    let mode = if open_world {
        AccuracyMode::OpenWorld
    } else {
        AccuracyMode::Closed
    };
    print!(
        "{}",
        eval::report_from_records(&recs, mode, tpr_target)?.render()
    );
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let mut out = String::new();
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or_default();
    if first == aks::DUMP_MAGIC {
        let ks =
            KnowledgeSpace::parse_dump(&text).with_context(|| format!("in {}", path.display()))?;
        let _ = writeln!(
            out,
            "{:<10} {:<10} {:>5} {:>12} {:>12}",
            "label", "provenance", "task", "radius", "|centroid|"
        );
        for s in ks.spheres() {
            let norm = ofcl::geometry::norm(s.centroid.as_slice());
            let _ = writeln!(
                out,
                "{:<10} {:<10} {:>5} {:>12.6} {:>12.6}",
                s.label.to_string(),
                s.provenance.to_string(),
                s.task_of_origin,
                s.radius,
                norm
            );
        }
        let _ = writeln!(out, "promotions ({}):", ks.promotion_log().len());
        for p in ks.promotion_log() {
            let _ = writeln!(out, "  task {}: {} -> {}", p.task, p.pseudo, p.into);
        }
    } else if first == ita::DUMP_MAGIC {
        let bank =
            TokenBank::parse_dump(&text).with_context(|| format!("in {}", path.display()))?;
        let _ = writeln!(
            out,
            "{:<6} {:>5} {:>8} {:>10} {:>7}",
            "token", "task", "freq", "|key|", "frozen"
        );
        for (i, t) in bank.tokens().iter().enumerate() {
            let norm = ofcl::geometry::norm(t.key.as_slice());
            let frozen = if bank.is_closed(t.task_of_origin) {
                "yes"
            } else {
                "no"
            };
            let _ = writeln!(
                out,
                "{i:<6} {:>5} {:>8} {norm:>10.6} {frozen:>7}",
                t.task_of_origin, t.frequency
            );
        }
    } else {
        bail!(
            "{}: line 1: not a knowledge-space or token dump",
            path.display()
        );
    }
    write_stdout(&out)
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn write_stdout(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { cfg, out } => generate(cfg, out),
        Command::Run { cfg, manifest, out } => run(cfg, manifest, out),
        Command::Eval {
            records,
            open_world,
            tpr_target,
        } => evaluate(records, *open_world, *tpr_target),
        Command::Inspect { dump } => inspect(dump),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
