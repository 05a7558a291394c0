//! `wlds`: run the server, drive the simulator, inspect data and frames.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error. With `--json`
//! errors are written to stderr as `{"error": ..., "kind": ...}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use wlds_core::geo::OfficeRegistry;
use wlds_core::model::{NodeId, TelemetryReading};
use wlds_core::sim::{Fleet, Pacing, ScenarioConfig};
use wlds_core::wire::{self, AuthKey, Frame, FLAG_TEST};
use wlds_server::client::{ClientConfig, TcpSink};
use wlds_server::ServerConfig;
use wlds_store::{QueryRange, SensorTable, Store, StoreConfig, StoredRecord};

#[derive(Parser)]
#[command(
    name = "wlds",
    version,
    about = "Drainage water-logging detection system"
)]
struct Cli {
    /// Report errors on stderr as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run ingest, alerting and the HTTP gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Stream a simulated fleet to an ingest server.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Ingest address, HOST:PORT.
        #[arg(long)]
        target: String,
        /// Overrides the scenario's time_acceleration.
        #[arg(long)]
        time_accel: Option<f64>,
        /// Number of ticks; runs until interrupted when omitted.
        #[arg(long)]
        ticks: Option<u64>,
        /// Frame key, 64 hex digits.
        #[arg(long, env = "WLDS_KEY", hide_env_values = true)]
        key: String,
        /// How long to keep retrying an unreachable server, seconds.
        #[arg(long, default_value_t = 2.0)]
        retry_secs: f64,
    },
    /// Query a data directory (read-only).
    Query {
        #[command(subcommand)]
        what: QueryCmd,
    },
    /// Export a node's records as JSON lines, in ingest order.
    Dump {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        node: NodeId,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-send the readings of a JSON-lines dump to an ingest server.
    Replay {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, env = "WLDS_KEY", hide_env_values = true)]
        key: String,
        #[arg(long, default_value_t = 2.0)]
        retry_secs: f64,
    },
    /// Encode or decode single frames (hex).
    Frame {
        #[command(subcommand)]
        op: FrameCmd,
    },
    /// Maintenance office registry tools.
    Offices {
        #[command(subcommand)]
        op: OfficesCmd,
    },
}

#[derive(Subcommand)]
enum QueryCmd {
    /// Nodes that have data.
    Nodes {
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Most recently ingested record of a node.
    Latest {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        node: NodeId,
    },
    /// Records with from <= timestamp_ms < to, one JSON per line.
    Range {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        node: NodeId,
        #[arg(long, default_value_t = 0)]
        from: u64,
        #[arg(long, default_value_t = u64::MAX)]
        to: u64,
        /// Project onto one sensor table instead of full records.
        #[arg(long, value_enum)]
        table: Option<TableArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TableArg {
    Flow,
    Depth,
    Gas,
}

#[derive(Subcommand)]
enum FrameCmd {
    /// Reading JSON (file or `-` for stdin) to frame hex.
    Encode {
        #[arg(default_value = "-")]
        reading: String,
        #[arg(long, env = "WLDS_KEY", hide_env_values = true)]
        key: String,
        /// Set the test-frame flag.
        #[arg(long)]
        test: bool,
    },
    /// Frame hex to reading JSON.
    Decode {
        hex: String,
        #[arg(long, env = "WLDS_KEY", hide_env_values = true)]
        key: String,
    },
}

#[derive(Subcommand)]
enum OfficesCmd {
    /// Check a registry file.
    Validate { file: PathBuf },
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json_errors {
                let msg = e
                    .kind()
                    .as_str()
                    .map_or_else(|| e.to_string(), str::to_string);
                eprintln!(
                    "{}",
                    serde_json::json!({"error": msg, "kind": "usage", "detail": e.to_string()})
                );
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json {
                eprintln!(
                    "{}",
                    serde_json::json!({"error": format!("{e:#}"), "kind": "runtime"})
                );
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}

fn parse_key(hex: &str) -> Result<AuthKey> {
    AuthKey::from_hex(hex.trim()).map_err(|e| anyhow!("bad key: {e}"))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Serve { config } => serve(&config),
        Command::Simulate {
            scenario,
            target,
            time_accel,
            ticks,
            key,
            retry_secs,
        } => simulate(&scenario, target, time_accel, ticks, &key, retry_secs),
        Command::Query { what } => query(what),
        Command::Dump {
            data_dir,
            node,
            out,
        } => {
            let store = open_store(&data_dir)?;
            let n = match out {
                Some(p) => store.dump_jsonl(
                    &node,
                    BufWriter::new(File::create(&p).with_context(|| p.display().to_string())?),
                )?,
                None => store.dump_jsonl(&node, std::io::stdout().lock())?,
            };
            eprintln!("{n} records");
            Ok(())
        }
        Command::Replay {
            dump,
            target,
            key,
            retry_secs,
        } => replay(&dump, target, &key, retry_secs),
        Command::Frame { op } => frame(op),
        Command::Offices {
            op: OfficesCmd::Validate { file },
        } => {
            let text =
                std::fs::read_to_string(&file).with_context(|| file.display().to_string())?;
            let reg = OfficeRegistry::from_json(&text)
                .with_context(|| format!("{} is not a valid registry", file.display()))?;
            let ids: Vec<_> = reg.offices().iter().map(|o| o.office_id.as_str()).collect();
            print_json(&serde_json::json!({"valid": true, "offices": ids.len(), "office_ids": ids}))
        }
    }
}

fn serve(config: &Path) -> Result<()> {
    let cfg = ServerConfig::load(config)?.resolve()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let server = wlds_server::start(cfg).await?;
        // One line on stdout so scripts can find ephemeral ports.
        println!(
            "{}",
            serde_json::json!({"ingest_addr": server.ingest_addr.to_string(), "http_addr": server.http_addr.to_string()})
        );
        std::io::stdout().flush()?;
        tokio::signal::ctrl_c().await?;
        tracing::info!("shutting down");
        server.shutdown().await;
        Ok(())
    })
}

fn client(target: String, key: &str, retry_secs: f64) -> Result<TcpSink> {
    let mut cfg = ClientConfig::new(target, parse_key(key)?);
    cfg.retry_window = Duration::from_secs_f64(retry_secs.max(0.0));
    Ok(TcpSink::new(cfg))
}

fn simulate(
    scenario: &Path,
    target: String,
    time_accel: Option<f64>,
    ticks: Option<u64>,
    key: &str,
    retry_secs: f64,
) -> Result<()> {
    let text = std::fs::read_to_string(scenario).with_context(|| scenario.display().to_string())?;
    let mut sc: ScenarioConfig = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a valid scenario", scenario.display()))?;
    if let Some(a) = time_accel {
        sc.time_acceleration = a;
    }
    let mut fleet = Fleet::build(&sc)?;
    let mut sink = client(target, key, retry_secs)?;
    let result = fleet.run(ticks.unwrap_or(u64::MAX), &mut sink, Pacing::RealTime);
    let counts = sink.counts();
    match result {
        Ok(stats) => print_json(&serde_json::json!({
            "ticks": stats.ticks_executed,
            "readings": stats.readings_emitted,
            "acks": counts,
        })),
        Err(e) => bail!("{e}"),
    }
}

fn replay(dump: &Path, target: String, key: &str, retry_secs: f64) -> Result<()> {
    let file = File::open(dump).with_context(|| dump.display().to_string())?;
    let mut sink = client(target, key, retry_secs)?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reading = match serde_json::from_str::<StoredRecord>(&line) {
            Ok(r) => r.reading,
            Err(_) => serde_json::from_str::<TelemetryReading>(&line)
                .with_context(|| format!("line {}", i + 1))?,
        };
        sink.send(&reading)?;
    }
    print_json(&serde_json::json!({ "acks": sink.counts() }))
}

fn open_store(dir: &Path) -> Result<Store> {
    if !dir.is_dir() {
        bail!("{} is not a data directory", dir.display());
    }
    Ok(Store::open_read_only(StoreConfig::new(dir))?)
}

fn query(what: QueryCmd) -> Result<()> {
    match what {
        QueryCmd::Nodes { data_dir } => {
            let store = open_store(&data_dir)?;
            let nodes: Vec<_> = store
                .nodes()
                .into_iter()
                .map(|n| serde_json::json!({"node_id": n, "records": store.count(&n)}))
                .collect();
            print_json(&nodes)
        }
        QueryCmd::Latest { data_dir, node } => match open_store(&data_dir)?.latest(&node) {
            Some(r) => print_json(&r),
            None => bail!("no records for node {node}"),
        },
        QueryCmd::Range {
            data_dir,
            node,
            from,
            to,
            table,
        } => {
            let store = open_store(&data_dir)?;
            let q = QueryRange::new(node, from, to)?;
            let mut out = std::io::stdout().lock();
            match table {
                None => {
                    for r in store.range(&q)? {
                        serde_json::to_writer(&mut out, &r)?;
                        writeln!(out)?;
                    }
                }
                Some(t) => {
                    let t = match t {
                        TableArg::Flow => SensorTable::Flow,
                        TableArg::Depth => SensorTable::Depth,
                        TableArg::Gas => SensorTable::Gas,
                    };
                    for s in store.table(&q, t)? {
                        serde_json::to_writer(&mut out, &s)?;
                        writeln!(out)?;
                    }
                }
            }
            Ok(())
        }
    }
}

fn frame(op: FrameCmd) -> Result<()> {
    match op {
        FrameCmd::Encode { reading, key, test } => {
            let key = parse_key(&key)?;
            let text = if reading == "-" {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s)?;
                s
            } else {
                std::fs::read_to_string(&reading).with_context(|| reading.clone())?
            };
            let r: TelemetryReading = serde_json::from_str(&text).context("reading JSON")?;
            let flags = if test { FLAG_TEST } else { 0 };
            let bytes = Frame::from_reading(&r, flags)?.encode(&key);
            println!("{}", hex::encode(bytes));
            Ok(())
        }
        FrameCmd::Decode { hex: h, key } => {
            let key = parse_key(&key)?;
            let cleaned: String = h.chars().filter(|c| !c.is_whitespace()).collect();
            let bytes = hex::decode(&cleaned).context("frame is not hex")?;
            let reading = wire::decode_frame(&bytes, &key)?;
            print_json(&reading)
        }
    }
}
