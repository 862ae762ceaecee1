mod commands;
mod http;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for data-quality failures. I/O and network failures exit 2.
const EXIT_DATA_QUALITY: u8 = 1;
const EXIT_IO: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "soi", version, about = "Flag measurement probes whose latencies contradict their reported location")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Import ping samples into the observation store.
    Fetch(FetchArgs),
    /// Scan the store for speed-of-light violations.
    Detect(DetectArgs),
    /// Build violation episodes and time series from a multi-window store.
    History(HistoryArgs),
    /// Publish the currently violating probe list from a detection report.
    Feed(FeedArgs),
    /// Run a prior-work heuristic or compare flag sets.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Generate a synthetic world with planted misreports and score the detector on it.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML file overriding any default parameter.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FetchArgs {
    #[arg(long, value_name = "DIR")]
    store: PathBuf,
    /// Import a newline-delimited ping campaign instead of calling the API.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["fixture", "api_base"])]
    campaign: Option<PathBuf>,
    /// Extra exact-location vantage points (needed for campaign imports).
    #[arg(long, value_name = "FILE")]
    vps: Option<PathBuf>,
    /// Replay API responses from `<DIR>/<measurement id>.json`; no network.
    #[arg(long, value_name = "DIR")]
    fixture: Option<PathBuf>,
    #[arg(long, value_name = "URL")]
    api_base: Option<String>,
    /// Probe archive whose probe ids are pulled.
    #[arg(long, value_name = "FILE")]
    probes: Option<PathBuf>,
    /// Comma-separated probe ids, in addition to any archive.
    #[arg(long, value_delimiter = ',')]
    probe_ids: Vec<u64>,
    /// Central servers to pull (default: all built-in ones).
    #[arg(long = "vp", value_delimiter = ',')]
    vp_ids: Vec<String>,
    /// JSON map from server id to built-in measurement ids.
    #[arg(long, value_name = "FILE")]
    measurements: Option<PathBuf>,
    #[arg(long, value_name = "DATE")]
    from: Option<String>,
    #[arg(long, value_name = "DATE")]
    to: Option<String>,
    #[arg(long, value_enum, default_value = "weekly")]
    cadence: CadenceArg,
    /// UTC sampling times within each sampled day, e.g. `06:00,12:00,18:00`.
    #[arg(long, value_delimiter = ',')]
    times: Vec<String>,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// Aggregation window such as `12h` or `1w`. Defaults to 12h for
    /// campaigns and 1w for API pulls.
    #[arg(long)]
    window: Option<String>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum CadenceArg {
    Daily,
    Weekly,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long, value_name = "DIR")]
    store: PathBuf,
    /// Probe archive with location histories.
    #[arg(long, value_name = "FILE")]
    probes: PathBuf,
    #[arg(long, value_name = "FILE")]
    vps: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Only the most recent window.
    #[arg(long, conflicts_with = "at")]
    latest: bool,
    /// Only the window containing this instant.
    #[arg(long, value_name = "DATE")]
    at: Option<String>,
    /// Window width used by `--latest` and `--at`.
    #[arg(long, default_value = "1w")]
    window: String,
    /// Require measured RTTs to undercut the bound by this much.
    #[arg(long)]
    guard_ms: Option<f64>,
    /// Country centroid CSV (`country_code,lat,lon`).
    #[arg(long, value_name = "FILE")]
    centroids: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct HistoryArgs {
    #[arg(long, value_name = "DIR")]
    store: PathBuf,
    #[arg(long, value_name = "FILE")]
    probes: PathBuf,
    #[arg(long, value_name = "FILE")]
    vps: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Bucket width of the violators-over-time series.
    #[arg(long, default_value = "1w")]
    bucket: String,
    /// End of the observed period (default: the last window in the store).
    #[arg(long, value_name = "DATE")]
    horizon: Option<String>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct FeedArgs {
    /// `report.json` from a detection run, or the directory holding it.
    #[arg(long, value_name = "PATH")]
    report: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Reference time for the staleness check (default: now).
    #[arg(long, value_name = "DATE")]
    now: Option<String>,
    #[arg(long, default_value_t = 14)]
    max_age_days: i64,
}

#[derive(Debug, Subcommand)]
enum BaselineCommand {
    /// Default-coordinate and shared-router heuristics.
    Gharaibeh(GharaibehArgs),
    /// Iterative anchor pruning followed by probe checks.
    Darwich(DarwichArgs),
    /// Compare a detection report's flag set against baseline flag files.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct GharaibehArgs {
    #[arg(long, value_name = "FILE")]
    probes: PathBuf,
    #[arg(long, value_name = "FILE")]
    traceroutes: PathBuf,
    #[arg(long, value_name = "FILE")]
    centroids: Option<PathBuf>,
    /// Only compare the first responding hop.
    #[arg(long)]
    first_hop: bool,
    /// Require an exact centroid match instead of the configured tolerance.
    #[arg(long)]
    exact_centroid: bool,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct DarwichArgs {
    /// Probe archive providing anchor and probe locations.
    #[arg(long, value_name = "FILE")]
    probes: PathBuf,
    #[arg(long, value_name = "FILE")]
    anchor_matrix: PathBuf,
    /// Newline-delimited `{probe_id, anchor_id, min_rtt_ms}` for the probe stage.
    #[arg(long, value_name = "FILE")]
    probe_rtts: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// `report.json` from a detection run, or the directory holding it.
    #[arg(long, value_name = "PATH")]
    report: PathBuf,
    /// Baseline flag files (`flags.jsonl`).
    #[arg(long = "flags", value_name = "FILE", required = true)]
    flags: Vec<PathBuf>,
    /// Trusted vantage points, probes and anchors for pair-cost accounting.
    #[arg(long, requires_all = ["probes", "anchors"])]
    vps: Option<u64>,
    #[arg(long)]
    probes: Option<u64>,
    #[arg(long)]
    anchors: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario as JSON or TOML (by extension).
    #[arg(long, value_name = "FILE")]
    scenario: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fetch(a) => commands::fetch(a),
        Command::Detect(a) => commands::detect(a),
        Command::History(a) => commands::history(a),
        Command::Feed(a) => commands::feed(a),
        Command::Baseline(BaselineCommand::Gharaibeh(a)) => commands::gharaibeh(a),
        Command::Baseline(BaselineCommand::Darwich(a)) => commands::darwich(a),
        Command::Baseline(BaselineCommand::Compare(a)) => commands::compare(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_IO)
        }
    }
}
