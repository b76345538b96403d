//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or input error.
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flip_core::accountant::Adjacency;
use flip_core::federation::{run_federation, RunRecord, SimulationConfig};
use flip_core::partition::{partition_sizes, PartitionPolicy};
use flip_core::practitioner::{recommend, PolicyTable, Requirements};

use crate::api::{practitioner_error, router, AppState};
use crate::calibration::{calibrate, CalibrateRequest, Epsilons, SchemeName, DEFAULT_ORDERS};
use crate::error::ServiceError;
use crate::reference::{self, GRID_CSV_HEADER};
use crate::registry::{Registry, RunEvent, RunStatus};
use crate::store::Store;

#[derive(Debug, Parser)]
#[command(name = "flip", version, about = "Differentially private federated learning workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate the noise multiplier for a privacy target.
    Calibrate(CalibrateArgs),
    /// Print per-client partition sizes.
    Partition(PartitionArgs),
    /// Run a federated simulation from a config file.
    Simulate(SimulateArgs),
    /// Recommend a privacy setup for a requirements file.
    Recommend(RecommendArgs),
    /// Serve the HTTP/JSON API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdjacencyArg {
    AddRemove,
    ReplaceOne,
}

impl From<AdjacencyArg> for Adjacency {
    fn from(a: AdjacencyArg) -> Self {
        match a {
            AdjacencyArg::AddRemove => Adjacency::AddRemove,
            AdjacencyArg::ReplaceOne => Adjacency::ReplaceOne,
        }
    }
}

fn parse_orders(s: &str) -> Result<(u32, u32), String> {
    let (lo, hi) = s.split_once("..").ok_or_else(|| format!("expected LO..HI, got {s:?}"))?;
    let lo: u32 = lo.trim().parse().map_err(|e| format!("bad lower order: {e}"))?;
    let hi: u32 = hi.trim().parse().map_err(|e| format!("bad upper order: {e}"))?;
    if lo < 2 || hi < lo {
        return Err(format!("order range {lo}..{hi} must satisfy 2 <= LO <= HI"));
    }
    Ok((lo, hi))
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Target epsilon; repeat to sweep several targets.
    #[arg(long, required = true, num_args = 1..)]
    pub epsilon: Vec<f64>,
    #[arg(long, required_unless_present = "grid")]
    pub delta: Option<f64>,
    #[arg(long, value_enum, required_unless_present = "grid")]
    pub scheme: Option<SchemeName>,
    #[arg(long, default_value_t = 550)]
    pub batch: u64,
    #[arg(long, required_unless_present = "grid")]
    pub dataset_size: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub rounds: u64,
    #[arg(long, default_value_t = 1)]
    pub epochs: u64,
    /// Defaults to add-remove for poisson and replace-one for fixed.
    #[arg(long, value_enum)]
    pub adjacency: Option<AdjacencyArg>,
    /// Inclusive integer order range, e.g. 2..256.
    #[arg(long, value_parser = parse_orders)]
    pub orders: Option<(u32, u32)>,
    /// Calibrate every client of the reference corpora under both accountants.
    #[arg(long, conflicts_with_all = ["delta", "scheme", "dataset_size", "adjacency"])]
    pub grid: bool,
    /// Label for the dataset column of CSV output.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Label for the policy column of CSV output.
    #[arg(long)]
    pub policy: Option<String>,
    /// Label for the partition column of CSV output.
    #[arg(long)]
    pub partition: Option<String>,
    #[arg(long, value_enum, default_value_t = Emit::Text)]
    pub emit: Emit,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub n: u64,
    #[arg(long)]
    pub clients: usize,
    #[arg(long)]
    pub policy: PartitionPolicy,
    /// Accepted for symmetry with simulations; sizes do not depend on it.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Emit::Text)]
    pub emit: Emit,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML simulation config.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for the event log and summary CSV; defaults to the config's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Emit::Text)]
    pub emit: Emit,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    /// Requirements as TOML or JSON (by extension).
    #[arg(long)]
    pub requirements: PathBuf,
    /// Goal-to-epsilon policy table (TOML).
    #[arg(long)]
    pub policy_table: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Emit::Json)]
    pub emit: Emit,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "FLIP_ADDR", default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, env = "FLIP_STORE", default_value = "flip-store")]
    pub store: PathBuf,
    /// Goal-to-epsilon policy table (TOML).
    #[arg(long, env = "FLIP_POLICY")]
    pub policy_table: Option<PathBuf>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: ServiceError,
}

impl CliError {
    fn input(message: String) -> Self {
        CliError { code: 2, error: ServiceError::BadRequest(message) }
    }
}

impl From<ServiceError> for CliError {
    fn from(error: ServiceError) -> Self {
        let code = if matches!(error, ServiceError::BadRequest(_)) { 2 } else { 1 };
        CliError { code, error }
    }
}

fn io_failure(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError { code: 1, error: ServiceError::Internal(format!("{what} {}: {e}", path.display())) }
}

/// Parses `argv` and runs the command, writing results to `out`.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let body = serde_json::to_string(&e.error.body()).unwrap_or_else(|_| e.error.to_string());
            eprintln!("{body}");
            e.code
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Calibrate(a) => cmd_calibrate(a, out),
        Command::Partition(a) => cmd_partition(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Recommend(a) => cmd_recommend(a, out),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError { code: 1, error: ServiceError::Internal(format!("cannot write output: {e}")) })
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError { code: 1, error: ServiceError::Internal(e.to_string()) };
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError { code: 1, error: ServiceError::Internal(e.to_string()) })?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn json_string<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError { code: 1, error: ServiceError::Internal(e.to_string()) })
}

fn cmd_calibrate(a: CalibrateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.grid {
        let cells = reference::noise_grid(&a.epsilon, a.rounds * a.epochs, a.batch, a.orders.unwrap_or(DEFAULT_ORDERS))?;
        let text = match a.emit {
            Emit::Json => json_string(&cells)?,
            Emit::Csv | Emit::Text => {
                let mut buf = Vec::new();
                reference::write_grid_csv(&cells, &mut buf)
                    .map_err(|e| CliError { code: 1, error: ServiceError::Internal(e.to_string()) })?;
                String::from_utf8_lossy(&buf).into_owned()
            }
        };
        return write_out(out, &text);
    }
    let (Some(delta), Some(scheme), Some(dataset_size)) = (a.delta, a.scheme, a.dataset_size) else {
        return Err(CliError::input("--delta, --scheme and --dataset-size are required".into()));
    };
    let req = CalibrateRequest {
        epsilon: Epsilons::Many(a.epsilon),
        delta,
        scheme,
        batch: a.batch,
        dataset_size,
        rounds: a.rounds,
        epochs: a.epochs,
        adjacency: a.adjacency.map(Adjacency::from),
        orders: a.orders,
    };
    let resp = calibrate(&req)?;
    let text = match a.emit {
        Emit::Json => json_string(&resp)?,
        Emit::Csv => {
            let rows: Vec<Vec<String>> = resp
                .results
                .iter()
                .map(|p| {
                    vec![
                        a.dataset.clone().unwrap_or_default(),
                        a.policy.clone().unwrap_or_default(),
                        a.partition.clone().unwrap_or_default(),
                        reference::accountant_label(resp.accountant).to_string(),
                        p.epsilon.to_string(),
                        format!("{:.6}", p.sigma),
                    ]
                })
                .collect();
            csv_string(&GRID_CSV_HEADER, &rows)?
        }
        Emit::Text => resp
            .results
            .iter()
            .map(|p| {
                format!(
                    "sigma {:.6} alpha {} epsilon {:.6} (target {}, {} steps)\n",
                    p.sigma, p.order, p.achieved_epsilon, p.epsilon, resp.steps
                )
            })
            .collect(),
    };
    write_out(out, &text)
}

fn cmd_partition(a: PartitionArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let sizes = partition_sizes(a.n, a.clients, a.policy).map_err(|e| CliError::input(e.to_string()))?;
    let text = match a.emit {
        Emit::Text => {
            let parts: Vec<String> = sizes.iter().map(u64::to_string).collect();
            parts.join(" ") + "\n"
        }
        Emit::Csv => {
            let rows: Vec<Vec<String>> =
                sizes.iter().enumerate().map(|(i, s)| vec![(i + 1).to_string(), s.to_string()]).collect();
            csv_string(&["client_id", "size"], &rows)?
        }
        Emit::Json => json_string(&sizes)?,
    };
    write_out(out, &text)
}

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

/// Event log of a finished simulation, in the same format the service streams.
pub fn record_events(record: &RunRecord) -> Vec<RunEvent> {
    let mut events = vec![RunEvent::Setup { clients: record.clients.clone() }];
    events.extend(record.rounds.iter().map(|m| RunEvent::RoundComplete { round: m.round, metrics: m.clone() }));
    let status = if record.aborted.is_some() { RunStatus::Aborted } else { RunStatus::Done };
    events.push(RunEvent::Done { status, diagnostic: record.aborted.clone(), max_accuracy: record.max_accuracy() });
    events
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = read_input(&a.config)?;
    let config = SimulationConfig::from_toml(&text).map_err(|e| CliError::input(e.to_string()))?;
    config.federation.validate().map_err(|e| CliError::input(e.to_string()))?;
    let (train, test) = config.data.generate_split();
    let record = run_federation(config.federation, &train, &test)
        .map_err(|e| CliError { code: 1, error: ServiceError::Internal(e.to_string()) })?;

    let dir = a.out.unwrap_or_else(|| a.config.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&dir).map_err(|e| io_failure("cannot create", &dir, e))?;
    let stem = a.config.file_stem().and_then(|s| s.to_str()).unwrap_or("simulation");
    let log_path = dir.join(format!("{stem}.jsonl"));
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut log = String::new();
    for e in record_events(&record) {
        log += &serde_json::to_string(&e).map_err(|e| CliError { code: 1, error: ServiceError::Internal(e.to_string()) })?;
        log.push('\n');
    }
    std::fs::write(&log_path, log).map_err(|e| io_failure("cannot write", &log_path, e))?;
    let header = record.summary_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let summary = csv_string(&header, &record.summary_rows())?;
    std::fs::write(&csv_path, &summary).map_err(|e| io_failure("cannot write", &csv_path, e))?;

    let text = match a.emit {
        Emit::Csv => summary,
        Emit::Json => json_string(&record)?,
        Emit::Text => {
            let mut s: String = record
                .rounds
                .iter()
                .map(|r| format!("round {} accuracy {:.4} loss {:.4}\n", r.round, r.accuracy, r.loss))
                .collect();
            s += &format!("log {}\nsummary {}\n", log_path.display(), csv_path.display());
            s
        }
    };
    write_out(out, &text)?;
    match record.aborted {
        Some(diagnostic) => Err(CliError { code: 1, error: ServiceError::Internal(diagnostic) }),
        None => Ok(()),
    }
}

fn load_policy_table(path: Option<&Path>) -> Result<PolicyTable, CliError> {
    match path {
        Some(p) => PolicyTable::from_toml(&read_input(p)?).map_err(|e| CliError::input(e.to_string())),
        None => Ok(PolicyTable::default()),
    }
}

fn cmd_recommend(a: RecommendArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = read_input(&a.requirements)?;
    let req: Requirements = if a.requirements.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::input(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::input(e.to_string()))?
    };
    let table = load_policy_table(a.policy_table.as_deref())?;
    let rec = recommend(&req, &table).map_err(practitioner_error)?;
    let text = match a.emit {
        Emit::Json => json_string(&rec)?,
        Emit::Csv => {
            let rows: Vec<Vec<String>> = rec
                .clients
                .iter()
                .map(|c| {
                    vec![
                        (c.client + 1).to_string(),
                        c.partition_size.to_string(),
                        c.delta.to_string(),
                        format!("{:.6}", c.sigma),
                        c.achieved_epsilon.to_string(),
                    ]
                })
                .collect();
            csv_string(&["client_id", "size", "delta", "sigma", "epsilon"], &rows)?
        }
        Emit::Text => {
            let mut s = format!(
                "epsilon {} accountant {} batch {}\n",
                rec.epsilon,
                reference::accountant_label(rec.accountant),
                rec.batch_size
            );
            for c in &rec.clients {
                s += &format!(
                    "client {} size {} delta {:e} sigma {:.6}\n",
                    c.client + 1,
                    c.partition_size,
                    c.delta,
                    c.sigma
                );
            }
            for r in &rec.rationale {
                s += &format!("- {r}\n");
            }
            s
        }
    };
    write_out(out, &text)
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .try_init();
    let policy = load_policy_table(a.policy_table.as_deref())?;
    let store = Store::open(&a.store).map_err(|e| CliError { code: 1, error: ServiceError::Internal(e.to_string()) })?;
    let registry = Arc::new(Registry::open(store).map_err(|e| CliError { code: 1, error: ServiceError::Internal(e.to_string()) })?);
    crate::api::resume_pending(&registry)?;
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| CliError { code: 1, error: ServiceError::Internal(e.to_string()) })?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| CliError { code: 1, error: ServiceError::Internal(format!("cannot bind {}: {e}", a.addr)) })?;
        tracing::info!(addr = %a.addr, store = %a.store.display(), "serving");
        axum::serve(listener, router(AppState { registry, policy }))
            .await
            .map_err(|e| CliError { code: 1, error: ServiceError::Internal(e.to_string()) })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_ranges() {
        assert_eq!(parse_orders("2..64"), Ok((2, 64)));
        assert!(parse_orders("1..64").is_err());
        assert!(parse_orders("9..3").is_err());
        assert!(parse_orders("2-64").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
