use std::path::PathBuf;
use std::process::exit;
use std::sync::mpsc;

use clap::Parser;

use aft::server::{spawn_coordinator, CoordinatorConfig};

/// Global fault manager and garbage collector: scans storage for commit
/// records that never got broadcast, and coordinates cluster-wide
/// deletion of superseded versions.
#[derive(Parser)]
#[command(name = "aft-coordinator", version)]
struct Args {
    /// TOML config file; see CoordinatorConfig for the schema.
    #[arg(long)]
    config: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AFT_LOG", "info")).init();
    let args = Args::parse();

    let cfg = match CoordinatorConfig::load(&args.config) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("aft-coordinator: config: {err}");
            exit(1);
        }
    };

    let coordinator = match spawn_coordinator(cfg, None) {
        Ok(c) => c,
        Err(err) => {
            eprintln!("aft-coordinator: startup: {err}");
            exit(2);
        }
    };
    log::info!("coordinator serving on {}", coordinator.addr());

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .expect("install signal handler");
    let _ = rx.recv();

    log::info!("shutting down");
    coordinator.shutdown();
}
