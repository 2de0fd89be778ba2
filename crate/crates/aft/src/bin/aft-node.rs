use std::path::PathBuf;
use std::process::exit;
use std::sync::mpsc;

use clap::Parser;

use aft::server::{spawn_node, NodeConfig};

/// Transaction shim node: serves the client API over TCP and replicates
/// commit metadata to peers and the coordinator.
#[derive(Parser)]
#[command(name = "aft-node", version)]
struct Args {
    /// TOML config file; see NodeConfig for the schema.
    #[arg(long)]
    config: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AFT_LOG", "info")).init();
    let args = Args::parse();

    let cfg = match NodeConfig::load(&args.config) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("aft-node: config: {err}");
            exit(1);
        }
    };

    let node = match spawn_node(cfg, None) {
        Ok(node) => node,
        Err(err) => {
            eprintln!("aft-node: startup: {err}");
            exit(2);
        }
    };
    log::info!("node {} serving on {}", node.node_id(), node.addr());

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .expect("install signal handler");
    let _ = rx.recv();

    log::info!("shutting down");
    node.shutdown();
}
