//! Serves the synthetic-world mock backend over the wire protocol.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;
use labelforge::backends::mock::MockConfig;
use labelforge::backends::server::BackendServer;
use labelforge::backends::{MockBackend, WorldSpec};

#[derive(Debug, Parser)]
#[command(name = "labelforge-mock-server", version, about = "Deterministic mock backend for all four model roles")]
struct Args {
    /// World spec (`world.json`) written by `labelforge synth`.
    #[arg(long)]
    world: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: String,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Job store so trained models survive restarts.
    #[arg(long)]
    state_dir: Option<PathBuf>,
    /// Directory for generated images.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let text = std::fs::read_to_string(&args.world).with_context(|| format!("reading {}", args.world.display()))?;
    let spec: WorldSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.world.display()))?;
    spec.validate()?;
    let mut cfg = MockConfig::from_world(&spec);
    cfg.state_dir = args.state_dir;
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    let server = BackendServer::start(Arc::new(MockBackend::new(cfg)), &args.addr, args.threads)
        .with_context(|| format!("binding {}", args.addr))?;
    println!("{}", server.url());
    server.join();
    Ok(())
}
