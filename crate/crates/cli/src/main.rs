use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use agora_core::events::{overhead_reports, EventLog, OverheadBreakdown};
use agora_core::ledger::{LedgerConfig, LedgerLog};
use agora_core::matching::Taxonomy;
use agora_core::protocol::to_canonical_json;
use agora_core::sim::{generate_agents, generate_tasks, read_corpus, run_bench, write_corpus, BenchMode, CorpusParams};
use agora_runtime::gateway::{ErrorBody, SubmitRequest, DEFAULT_CHAINS};
use agora_runtime::{start_node, NodeConfig, StartupError};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const DEFAULT_GATEWAY: &str = "127.0.0.1:7480";

#[derive(Parser)]
#[command(name = "agora", version, about = "Decentralized multi-agent task orchestration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a node.
    #[command(subcommand)]
    Node(NodeCommand),
    /// Submit work through a node's gateway.
    #[command(subcommand)]
    Task(TaskCommand),
    /// Inspect the agent ledger.
    #[command(subcommand)]
    Ledger(LedgerCommand),
    /// Summarize event logs.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Synthetic benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand)]
enum NodeCommand {
    /// Start a node and serve until interrupted.
    Start {
        #[arg(long)]
        config: PathBuf,
        /// Append accepted ledger events here and replay them on startup.
        #[arg(long)]
        ledger_log: Option<PathBuf>,
        /// Append timing events here, one JSON object per line.
        #[arg(long)]
        event_log: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GatewayArg {
    /// Gateway address of any node.
    #[arg(long, default_value = DEFAULT_GATEWAY)]
    gateway: String,
}

impl GatewayArg {
    fn url(&self, path: &str) -> String {
        if self.gateway.starts_with("http://") || self.gateway.starts_with("https://") {
            format!("{}{path}", self.gateway.trim_end_matches('/'))
        } else {
            format!("http://{}{path}", self.gateway)
        }
    }
}

#[derive(Subcommand)]
enum TaskCommand {
    /// Submit a question and print the verdict.
    Submit {
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = DEFAULT_CHAINS)]
        chains: usize,
        /// Answer option; repeat for each.
        #[arg(long = "option")]
        options: Vec<String>,
        #[arg(long)]
        task_id: Option<String>,
        #[command(flatten)]
        gateway: GatewayArg,
    },
}

#[derive(Subcommand)]
enum LedgerCommand {
    /// Print every record, from a live node or by replaying a ledger log.
    Show {
        #[arg(long, conflicts_with = "gateway")]
        ledger_log: Option<PathBuf>,
        /// Taxonomy that fixes the capability dimension when replaying.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        gateway: Option<String>,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Engine time versus orchestration time per task.
    Overhead {
        #[arg(long)]
        log: PathBuf,
        /// Print canonical JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Score,
    Random,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Write a synthetic corpus: tasks.jsonl and agents.json.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        tasks: usize,
        #[arg(long, default_value_t = 8)]
        agents: usize,
        /// Logistic link from match score to correctness probability.
        #[arg(long, default_value_t = 8.0)]
        slope: f64,
        #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
        intercept: f64,
    },
    /// Accuracy of an in-process cluster on a corpus.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["1", "3"]))]
        chains: String,
        /// Count every chain once instead of by confidence.
        #[arg(long)]
        unweighted: bool,
        /// Seed for random selection.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// Failure classes, mapped to the process exit code.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(3);
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Validation(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

async fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Node(NodeCommand::Start {
            config,
            ledger_log,
            event_log,
        }) => node_start(config, ledger_log, event_log).await,
        Command::Task(TaskCommand::Submit {
            text,
            chains,
            options,
            task_id,
            gateway,
        }) => {
            let req = SubmitRequest {
                text,
                options: (!options.is_empty()).then_some(options),
                chains: Some(chains),
                task_id,
            };
            task_submit(&gateway, &req).await
        }
        Command::Ledger(LedgerCommand::Show {
            ledger_log,
            taxonomy,
            gateway,
        }) => ledger_show(ledger_log, taxonomy, gateway).await,
        Command::Report(ReportCommand::Overhead { log, json }) => report_overhead(&log, json),
        Command::Bench(BenchCommand::Generate {
            out,
            seed,
            tasks,
            agents,
            slope,
            intercept,
        }) => {
            let taxonomy = Taxonomy::default_taxonomy();
            let params = CorpusParams {
                tasks,
                ..Default::default()
            };
            let t = generate_tasks(seed, params, &taxonomy);
            let a = generate_agents(seed, agents, &taxonomy, slope, intercept);
            write_corpus(&out, &t, &a)
                .with_context(|| format!("writing corpus to {}", out.display()))
                .runtime()?;
            println!("wrote {} tasks and {} agents to {}", t.len(), a.len(), out.display());
            Ok(())
        }
        Command::Bench(BenchCommand::Run {
            corpus,
            mode,
            chains,
            unweighted,
            seed,
        }) => {
            let (tasks, agents) = read_corpus(&corpus)
                .with_context(|| format!("reading corpus from {}", corpus.display()))
                .invalid()?;
            let mode = match mode {
                ModeArg::Score => BenchMode::Score,
                ModeArg::Random => BenchMode::Random,
            };
            let chains: usize = chains.parse().expect("restricted by clap");
            let taxonomy = Arc::new(Taxonomy::default_taxonomy());
            let report = run_bench(&tasks, &agents, taxonomy, mode, chains, !unweighted, seed)
                .await
                .invalid()?;
            print_canonical(&report)
        }
    }
}

fn print_canonical<T: Serialize>(value: &T) -> Result<(), Failure> {
    let bytes = to_canonical_json(value).runtime()?;
    println!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

async fn node_start(path: PathBuf, ledger_log: Option<PathBuf>, event_log: Option<PathBuf>) -> Result<(), Failure> {
    let mut config = NodeConfig::load(&path).invalid()?;
    // Flags are relative to the working directory, unlike paths inside the config.
    let absolute = |p: PathBuf| -> Result<String, Failure> {
        let p = std::path::absolute(&p).runtime()?;
        p.to_str()
            .map(str::to_string)
            .ok_or_else(|| Failure::Validation(anyhow!("path {} is not UTF-8", p.display())))
    };
    if let Some(p) = ledger_log {
        config.ledger_log = Some(absolute(p)?);
    }
    if let Some(p) = event_log {
        config.event_log = Some(absolute(p)?);
    }
    let node = start_node(config).await.map_err(|e| match e {
        StartupError::Config(_) => Failure::Validation(e.into()),
        e => Failure::Runtime(e.into()),
    })?;
    match node.gateway_addr() {
        Some(g) => println!("agent {} listening on {} (gateway http://{g})", node.agent_id(), node.address()),
        None => println!("agent {} listening on {}", node.agent_id(), node.address()),
    }
    tokio::signal::ctrl_c().await.runtime()?;
    node.shutdown().await;
    Ok(())
}

async fn task_submit(gateway: &GatewayArg, req: &SubmitRequest) -> Result<(), Failure> {
    if req.text.trim().is_empty() {
        return Err(Failure::Validation(anyhow!("--text must not be empty")));
    }
    if req.chains == Some(0) {
        return Err(Failure::Validation(anyhow!("--chains must be at least 1")));
    }
    let resp = reqwest::Client::new()
        .post(gateway.url("/submit"))
        .json(req)
        .send()
        .await
        .with_context(|| format!("contacting gateway {}", gateway.gateway))
        .runtime()?;
    let status = resp.status();
    if status.is_success() {
        let outcome: serde_json::Value = resp.json().await.runtime()?;
        return print_canonical(&outcome);
    }
    let message = resp
        .json::<ErrorBody>()
        .await
        .map(|b| b.error)
        .unwrap_or_else(|_| status.to_string());
    if status == reqwest::StatusCode::BAD_REQUEST {
        Err(Failure::Validation(anyhow!(message)))
    } else {
        Err(Failure::Runtime(anyhow!(message)))
    }
}

async fn ledger_show(
    ledger_log: Option<PathBuf>,
    taxonomy: Option<PathBuf>,
    gateway: Option<String>,
) -> Result<(), Failure> {
    if let Some(path) = ledger_log {
        let taxonomy = match taxonomy {
            Some(p) => Taxonomy::load(&p).invalid()?,
            None => Taxonomy::default_taxonomy(),
        };
        let config = LedgerConfig {
            dimension: taxonomy.dimension(),
            ttl_ms: agora_core::config::DEFAULT_LIVENESS_TTL_MS,
        };
        let ledger = LedgerLog::replay(&path, config)
            .with_context(|| format!("replaying {}", path.display()))
            .invalid()?;
        let records: Vec<_> = ledger.snapshot().records.values().cloned().collect();
        return print_canonical(&records);
    }
    let gateway = GatewayArg {
        gateway: gateway.unwrap_or_else(|| DEFAULT_GATEWAY.to_string()),
    };
    let records: serde_json::Value = reqwest::get(gateway.url("/ledger"))
        .await
        .and_then(|r| r.error_for_status())
        .with_context(|| format!("contacting gateway {}", gateway.gateway))
        .runtime()?
        .json()
        .await
        .runtime()?;
    print_canonical(&records)
}

fn report_overhead(log: &PathBuf, json: bool) -> Result<(), Failure> {
    let events = EventLog::read_file(log)
        .with_context(|| format!("reading {}", log.display()))
        .invalid()?;
    let reports = overhead_reports(&events).invalid()?;
    if json {
        return print_canonical(&reports);
    }
    println!(
        "{:<24} {:>10} {:>10} {:>10} {:>7}  phases (ms)",
        "task", "total ms", "engine ms", "orch ms", "ratio"
    );
    for r in &reports {
        println!("{}", table_row(r));
    }
    Ok(())
}

fn table_row(r: &OverheadBreakdown) -> String {
    let ms = |us: u64| us as f64 / 1000.0;
    let phases = r
        .phases
        .iter()
        .map(|(p, us)| format!("{}={:.1}", serde_json::to_value(p).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(), ms(*us)))
        .collect::<Vec<_>>()
        .join(" ");
    format!(
        "{:<24} {:>10.1} {:>10.1} {:>10.1} {:>7.4}  {phases}",
        r.task_id,
        ms(r.total_us),
        ms(r.engine_us),
        ms(r.orchestration_us),
        r.ratio
    )
}
