//! Command-line surface.

pub mod config;
pub mod export;
pub mod layout;
pub mod stages;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backends::world::{SyntheticWorld, WorldSpec, CATALOG_FILE, IMAGES_FILE, TRUTH_FILE, WORLD_FILE};
use crate::diversify::{Ratio, TrainingManifest};
use crate::{Error, Result};
use config::{quotas_from, Endpoints, RunConfig, MOCK_SCHEME};
use export::ExportFormat;
use layout::{unix_ms, RunLock, RunMeta, StageName, LOCK_FILE, RUN_META_FILE};
use stages::Runner;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const MISSING_ARTIFACT: i32 = 3;
    pub const BACKEND: i32 = 4;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json { .. } => exit::CONFIG,
        Error::MissingArtifact { .. } => exit::MISSING_ARTIFACT,
        Error::Backend(_) => exit::BACKEND,
        _ => exit::FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "labelforge", version, about = "Pseudo-label, curate and evaluate object detection datasets")]
pub struct Cli {
    /// Run configuration (JSON, `${VAR}` interpolated from the environment).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the stages that would run without running them.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Take over a lock left behind by an interrupted run.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct MixArgs {
    /// Generated:original ratio, e.g. `3:1`.
    #[arg(long)]
    pub ratio: Option<Ratio>,
    /// Fixed per-class quota, `class=count`; repeatable.
    #[arg(long = "quota")]
    pub quotas: Vec<String>,
    /// Class to exclude from generated data; repeatable.
    #[arg(long = "exclude")]
    pub excluded: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Ingest,
    Dedup,
    Split,
    Annotate,
    Review,
    Diversify,
    Mix(MixArgs),
    Train,
    Eval,
    /// Every stage in order.
    Pipeline(MixArgs),
    /// Write a synthetic world and a config that runs against it.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        images: usize,
    },
    /// Export the training manifest of a run.
    Export {
        #[arg(long)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Dedup => "dedup",
            Command::Split => "split",
            Command::Annotate => "annotate",
            Command::Review => "review",
            Command::Diversify => "diversify",
            Command::Mix(_) => "mix",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Pipeline(_) => "pipeline",
            Command::Synth { .. } => "synth",
            Command::Export { .. } => "export",
        }
    }
}

fn apply_mix_args(cfg: &mut RunConfig, m: &MixArgs) -> Result<()> {
    if let Some(r) = m.ratio {
        cfg.set_ratio(r);
    }
    cfg.mix.per_class_quota.extend(quotas_from(&m.quotas)?);
    cfg.mix.excluded_classes.extend(m.excluded.iter().cloned());
    Ok(())
}

pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Materializes a synthetic world under `out` and writes `out/config.json`
/// pointing every endpoint at it. Returns the config path.
pub fn synth(out: &Path, seed: u64, images: usize) -> Result<PathBuf> {
    let spec = WorldSpec { num_images: images, ..WorldSpec::demo(seed) };
    let world = SyntheticWorld::build(spec)?;
    let world_dir = out.join("world");
    world.materialize(&world_dir)?;
    let endpoint = format!("{MOCK_SCHEME}world/{WORLD_FILE}");
    let cfg = serde_json::json!({
        "catalog": format!("world/{CATALOG_FILE}"),
        "images": format!("world/{IMAGES_FILE}"),
        "ground_truth": format!("world/{TRUTH_FILE}"),
        "output_dir": "run",
        "seed": seed,
        "endpoints": Endpoints::uniform(&endpoint),
        "diversify": {"prompts_per_instance": 30},
        "mix": {"ratio": "1:1"},
        "train": {"poll_interval_ms": 0},
    });
    let path = out.join("config.json");
    crate::jsonl::write_json(&path, &cfg)?;
    Ok(path)
}

fn run_export(cfg: &RunConfig, format: ExportFormat, out: &Path) -> Result<()> {
    let runner_root = crate::paths::normalize(&std::path::absolute(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?);
    let layout = layout::RunLayout::new(runner_root);
    layout
        .require(StageName::Mix, StageName::Mix)
        .map_err(|_| Error::MissingArtifact { stage: "export".into(), run_first: StageName::Mix.to_string() })?;
    let path = layout.file(StageName::Mix, stages::MANIFEST_JSON);
    let manifest: TrainingManifest = crate::jsonl::read_json(&path)?;
    let catalog = crate::catalog::load_catalog(&cfg.catalog)?;
    let files = export::export(&manifest, &catalog, format, out)?;
    log::info!("exported {} files to {}", files.len(), out.display());
    Ok(())
}

/// Runs one command; the returned code is the process exit status.
pub fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth { out, images } => {
            let path = synth(out, cli.seed.unwrap_or(0), *images)?;
            println!("{}", path.display());
            return Ok(exit::OK);
        }
        Command::Export { format, out } => {
            let cfg = load_config(&cli)?;
            run_export(&cfg, *format, out)?;
            return Ok(exit::OK);
        }
        _ => {}
    }

    let mut cfg = load_config(&cli)?;
    if let Command::Mix(m) | Command::Pipeline(m) = &cli.command {
        apply_mix_args(&mut cfg, m)?;
    }
    let mut runner = Runner::new(cfg)?;
    runner.skip_unchanged = !cli.force;
    runner.dry_run = cli.dry_run;
    let root = runner.root().to_path_buf();
    if cli.resume {
        let stale = root.join(LOCK_FILE);
        if stale.exists() {
            log::warn!("taking over lock {}", stale.display());
            std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
    }
    let _lock = if cli.dry_run { None } else { Some(RunLock::acquire(&root)?) };
    let started = unix_ms();
    let result = match &cli.command {
        Command::Pipeline(_) => runner.pipeline(),
        other => other.name().parse::<StageName>().and_then(|s| runner.run_stage(s)),
    };
    let mut out = std::io::stdout().lock();
    for r in &runner.reports {
        // A closed pipe is not a pipeline failure.
        let _ = writeln!(out, "{:<10} {:?}", r.stage.as_str(), r.status);
    }
    if !cli.dry_run {
        let meta = RunMeta {
            command: cli.command.name().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
            stages: runner.reports.clone(),
        };
        crate::jsonl::write_json(root.join(RUN_META_FILE), &meta)?;
    }
    result?;
    Ok(exit::OK)
}
