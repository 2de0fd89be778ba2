use std::path::PathBuf;
use std::process::exit;
use std::sync::Arc;

use clap::{Parser, ValueEnum};
use serde::Deserialize;

use aft::harness::cluster::{ClusterOptions, LocalCluster};
use aft::harness::crash::{inject_crash, CrashPlan, CrashPoint};
use aft::harness::report::{human_summary, write_csv, ReportRow};
use aft::harness::workload::{run_workload, Mode, WorkloadSpec};
use aft::txn::TxnOptions;

/// Benchmark driver: runs a workload against an in-process cluster and
/// writes one CSV row per run, or injects a planned crash and reports
/// what the recovery machinery preserved.
#[derive(Parser)]
#[command(name = "aft-bench", version)]
struct Args {
    /// TOML config file; see BenchConfig for the schema.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured execution mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Run a crash trial instead of a benchmark:
    /// POINT[:NODE[:WARMUP_TXNS]], with POINT one of after-data-write,
    /// after-commit-record, after-ack-before-broadcast, during-spill,
    /// random.
    #[arg(long)]
    crash: Option<String>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Where the CSV report goes.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Shim,
    Bypass,
}

#[derive(Deserialize)]
#[serde(default)]
struct BenchConfig {
    seed: u64,
    nodes: usize,
    prune: bool,
    spill_threshold_bytes: usize,
    txn_timeout_ms: u64,
    workload: WorkloadSpec,
    ticks: Ticks,
}

#[derive(Deserialize)]
#[serde(default)]
struct Ticks {
    multicast_ms: u64,
    /// 0 disables.
    gc_ms: u64,
    /// 0 disables.
    fault_ms: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 42,
            nodes: 3,
            prune: true,
            spill_threshold_bytes: 64 << 10,
            txn_timeout_ms: 60_000,
            workload: WorkloadSpec::default(),
            ticks: Ticks::default(),
        }
    }
}

impl Default for Ticks {
    fn default() -> Self {
        Ticks { multicast_ms: 5, gc_ms: 0, fault_ms: 0 }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AFT_LOG", "info")).init();
    let args = Args::parse();

    let mut cfg: BenchConfig = match std::fs::read_to_string(&args.config)
        .map_err(|e| e.to_string())
        .and_then(|text| toml::from_str(&text).map_err(|e| e.to_string()))
    {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("aft-bench: config: {err}");
            exit(1);
        }
    };
    if let Some(mode) = args.mode {
        cfg.workload.mode = match mode {
            ModeArg::Shim => Mode::Shim,
            ModeArg::Bypass => Mode::Bypass,
        };
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Err(err) = cfg.workload.validate() {
        eprintln!("aft-bench: config: {err}");
        exit(1);
    }

    let crash_plan = match args.crash.as_deref().map(|s| parse_crash_plan(s, cfg.nodes)) {
        None => None,
        Some(Ok(plan)) => Some(plan),
        Some(Err(err)) => {
            eprintln!("aft-bench: --crash: {err}");
            exit(1);
        }
    };

    let cluster = match LocalCluster::build(ClusterOptions {
        nodes: cfg.nodes,
        prune: cfg.prune,
        txn: TxnOptions {
            spill_threshold: cfg.spill_threshold_bytes,
            txn_timeout_ms: cfg.txn_timeout_ms,
            ..TxnOptions::default()
        },
        crash_wrappers: crash_plan.is_some(),
        max_gc_candidates: 256,
        backend: None,
    }) {
        Ok(c) => c,
        Err(err) => {
            eprintln!("aft-bench: cluster: {err}");
            exit(2);
        }
    };

    match crash_plan {
        Some(plan) => run_crash_trial(&cluster, &plan, cfg.seed, &args.out),
        None => run_benchmark(&cluster, &cfg, &args.out),
    }
}

fn run_benchmark(cluster: &Arc<LocalCluster>, cfg: &BenchConfig, out_path: &PathBuf) {
    let zero_off = |ms: u64| if ms == 0 { None } else { Some(ms) };
    let ticker = cluster.spawn_ticker(
        cfg.ticks.multicast_ms.max(1),
        zero_off(cfg.ticks.gc_ms),
        zero_off(cfg.ticks.fault_ms),
    );
    let run = run_workload(cluster, &cfg.workload, cfg.seed);
    drop(ticker);

    let output = match run {
        Ok(out) => out,
        Err(err) => {
            eprintln!("aft-bench: run: {err}");
            exit(2);
        }
    };
    let row = match ReportRow::from_run(&cfg.workload, &output) {
        Ok(row) => row,
        Err(err) => {
            eprintln!("aft-bench: report: {err}");
            exit(2);
        }
    };
    if let Err(err) = write_csv(out_path, &[row.clone()]) {
        eprintln!("aft-bench: write {}: {err}", out_path.display());
        exit(2);
    }
    println!("{}", human_summary(&[row]));
    println!(
        "{} committed, {} failed, wall {:.1}s -> {}",
        output.metrics.committed,
        output.metrics.failed,
        output.metrics.wall_ms as f64 / 1_000.0,
        out_path.display(),
    );
}

fn run_crash_trial(cluster: &Arc<LocalCluster>, plan: &CrashPlan, seed: u64, out_path: &PathBuf) {
    let report = match inject_crash(cluster, plan, seed) {
        Ok(report) => report,
        Err(err) => {
            eprintln!("aft-bench: crash trial: {err}");
            exit(2);
        }
    };

    let csv = format!(
        "point,fired,committed,all_or_nothing,record_count_ok,orphans_swept\n{:?},{},{},{},{},{}\n",
        report.point,
        report.fired,
        report.committed_tid.is_some(),
        report.all_or_nothing,
        report.record_count_ok,
        report.orphans_swept.map_or("n/a".to_string(), |b| b.to_string()),
    );
    if let Err(err) = std::fs::write(out_path, csv) {
        eprintln!("aft-bench: write {}: {err}", out_path.display());
        exit(2);
    }

    println!(
        "crash {:?} on txn {}: fired={} committed={} all_or_nothing={} record_count_ok={}{}",
        report.point,
        report.uuid,
        report.fired,
        report.committed_tid.is_some(),
        report.all_or_nothing,
        report.record_count_ok,
        report
            .orphans_swept
            .map_or(String::new(), |b| format!(" orphans_swept={b}")),
    );
    if !report.fired {
        eprintln!("aft-bench: crash point never reached; trial inconclusive");
        exit(2);
    }
    if !report.all_or_nothing || !report.record_count_ok || report.orphans_swept == Some(false) {
        eprintln!("aft-bench: GUARANTEE VIOLATED — see report above");
        exit(3);
    }
}

fn parse_crash_plan(text: &str, nodes: usize) -> Result<CrashPlan, String> {
    let mut parts = text.split(':');
    let point = match parts.next().unwrap_or("") {
        "after-data-write" => CrashPoint::AfterDataWrite,
        "after-commit-record" => CrashPoint::AfterCommitRecord,
        "after-ack-before-broadcast" => CrashPoint::AfterAckBeforeBroadcast,
        "during-spill" => CrashPoint::DuringSpill,
        "random" => CrashPoint::Random,
        other => return Err(format!("unknown crash point {other:?}")),
    };
    let target = match parts.next() {
        None => 0,
        Some(s) => s.parse::<usize>().map_err(|e| format!("node index: {e}"))?,
    };
    if target >= nodes {
        return Err(format!("node index {target} out of range (cluster has {nodes})"));
    }
    let trigger_txn = match parts.next() {
        None => 5,
        Some(s) => s.parse::<usize>().map_err(|e| format!("warmup count: {e}"))?,
    };
    if let Some(extra) = parts.next() {
        return Err(format!("trailing {extra:?} in crash plan"));
    }
    Ok(CrashPlan { target, point, trigger_txn })
}
