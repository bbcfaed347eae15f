//! `replayprobe`: train, attack, detect, assess, simulate, report.
//!
//! Exit codes: 0 ok, 10 vulnerable (SUCCESSFUL), 11 not vulnerable (FAILED),
//! 2 usage, 3 no local connectivity, 1 anything else.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use replayprobe_core::capture::{Endpoint, TransportFilter};
use replayprobe_core::detector::ModelKind;
use replayprobe_core::sim::Behavior;
use replayprobe_core::verdict::GroundTruth;
use replayprobe_core::Scenario;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NO_LOCAL_CONNECTIVITY: u8 = 3;
pub const EXIT_VULNERABLE: u8 = 10;
pub const EXIT_NOT_VULNERABLE: u8 = 11;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    NoLocalConnectivity(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::NoLocalConnectivity(_) => EXIT_NO_LOCAL_CONNECTIVITY,
            Failure::Other(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::NoLocalConnectivity(m) | Failure::Other(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "replayprobe",
    version,
    about = "Replay-attack assessment for networked devices"
)]
struct Cli {
    /// TOML run file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn regular device responses from a capture of legitimate traffic.
    Train(TrainArgs),
    /// Replay the request flows of a capture and record the responses.
    Attack(AttackArgs),
    /// Decide whether the replay was accepted (exit 10) or not (exit 11).
    Detect(DetectArgs),
    /// Run the full loop repeatedly against a simulated device or a live target.
    Assess(AssessArgs),
    /// Start a simulated device and keep it running.
    Simulate(SimulateArgs),
    /// Pretty-print a verdict or assessment report.
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
pub struct SessionArgs {
    /// Companion app address, `ip` or `ip:port`.
    #[arg(long, value_parser = config::parse_app)]
    pub app: Option<Endpoint>,
    /// Device endpoint, `ip:port`.
    #[arg(long)]
    pub device: Option<Endpoint>,
    /// Restrict to one transport: tcp, udp or both.
    #[arg(long, value_name = "FILTER")]
    pub transport: Option<TransportFilter>,
}

#[derive(Args, Clone, Default)]
pub struct ModelArgs {
    /// lof or isolation-forest.
    #[arg(long, value_parser = parse_model_kind)]
    pub model_kind: Option<ModelKind>,
    /// LOF neighborhood size.
    #[arg(long)]
    pub k: Option<usize>,
    /// LOF score above which a response is irregular.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Isolation forest seed.
    #[arg(long)]
    pub forest_seed: Option<u64>,
    /// Isolation forest anomaly score above which a response is irregular.
    #[arg(long)]
    pub anomaly_cutoff: Option<f64>,
}

#[derive(Args, Clone, Default)]
pub struct ReplayArgs {
    #[arg(long, value_name = "MS")]
    pub response_timeout_ms: Option<u64>,
    #[arg(long, value_name = "MS")]
    pub inter_request_delay_ms: Option<u64>,
    #[arg(long, value_name = "MS")]
    pub inter_flow_delay_ms: Option<u64>,
    #[arg(long, value_name = "MS")]
    pub connect_timeout_ms: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Capture of legitimate companion traffic.
    #[arg(long, value_name = "PCAP")]
    pub capture: Option<PathBuf>,
    /// Where to write the model.
    #[arg(long, value_name = "PATH")]
    pub model_out: Option<PathBuf>,
    /// Where to write the no-local-connectivity report, if that happens.
    #[arg(long, value_name = "PATH")]
    pub report_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    #[command(flatten)]
    pub replay: ReplayArgs,
    /// Capture holding the commands to replay.
    #[arg(long, value_name = "PCAP")]
    pub capture: Option<PathBuf>,
    /// Send replays here instead of the device endpoint.
    #[arg(long)]
    pub target: Option<Endpoint>,
    #[arg(long, value_name = "PATH")]
    pub queue_out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub transcript_out: Option<PathBuf>,
    /// Required for any target outside loopback.
    #[arg(long)]
    pub i_own_this_device: bool,
}

#[derive(Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub session: SessionArgs,
    /// Attack capture, consulted for TLS, DTLS and QUIC records.
    #[arg(long, value_name = "PCAP")]
    pub capture: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub queue: Option<PathBuf>,
    /// Model from `train`. Not needed when the device never answers.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Leading responses examined by the model.
    #[arg(long)]
    pub j: Option<usize>,
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub device_id: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub report_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AssessArgs {
    /// Simulated profile: cleartext_echo, signed_cleartext, encoded_fixed,
    /// session_key, tls_like or silent.
    #[arg(long)]
    pub profile: Option<Behavior>,
    /// Transport of the simulated profile.
    #[arg(long, value_parser = parse_transport)]
    pub profile_transport: Option<replayprobe_core::Transport>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// SessionKey profile keeps its key across restarts.
    #[arg(long)]
    pub no_rekey: bool,
    #[arg(long)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long, value_name = "MS")]
    pub restart_delay_ms: Option<u64>,
    #[arg(long)]
    pub j: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub replay: ReplayArgs,
    #[arg(long, value_name = "PATH")]
    pub report_out: Option<PathBuf>,

    /// Live device endpoint. Uses the given captures instead of a simulator.
    #[arg(long)]
    pub target: Option<Endpoint>,
    #[arg(long, value_parser = config::parse_app)]
    pub app: Option<Endpoint>,
    #[arg(long, value_name = "PCAP")]
    pub training_capture: Option<PathBuf>,
    #[arg(long, value_name = "PCAP")]
    pub attack_capture: Option<PathBuf>,
    /// Known status of the live target, for an accuracy figure.
    #[arg(long, value_parser = parse_truth)]
    pub expect: Option<GroundTruth>,
    /// Required with --target.
    #[arg(long)]
    pub i_own_this_device: bool,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub profile: Option<Behavior>,
    #[arg(long, value_parser = parse_transport)]
    pub profile_transport: Option<replayprobe_core::Transport>,
    /// 0 picks a free port.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_rekey: bool,
    /// Write training.pcap and attack.pcap here, leaving the device in REVERSE.
    #[arg(long, value_name = "DIR")]
    pub write_captures: Option<PathBuf>,
    /// Stop after this many seconds instead of running until killed.
    #[arg(long)]
    pub duration_s: Option<u64>,
}

#[derive(Args)]
pub struct ReportArgs {
    pub path: PathBuf,
    /// Print normalized JSON instead of a summary.
    #[arg(long)]
    pub json: bool,
}

fn parse_model_kind(s: &str) -> Result<ModelKind, String> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "lof" => Ok(ModelKind::Lof),
        "isolation-forest" | "iforest" => Ok(ModelKind::IsolationForest),
        other => Err(format!(
            "unknown model kind {other:?} (expected lof or isolation-forest)"
        )),
    }
}

fn parse_transport(s: &str) -> Result<replayprobe_core::Transport, String> {
    s.to_ascii_lowercase().parse()
}

fn parse_truth(s: &str) -> Result<GroundTruth, String> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "vulnerable" => Ok(GroundTruth::Vulnerable),
        "not-vulnerable" => Ok(GroundTruth::NotVulnerable),
        other => Err(format!(
            "unknown status {other:?} (expected vulnerable or not-vulnerable)"
        )),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result =
        config::FileConfig::load(cli.config.as_deref()).and_then(|file| match cli.command {
            Command::Train(a) => commands::train(&file, a),
            Command::Attack(a) => commands::attack(&file, a),
            Command::Detect(a) => commands::detect(&file, a),
            Command::Assess(a) => commands::assess(&file, a),
            Command::Simulate(a) => commands::simulate(&file, a),
            Command::Report(a) => commands::report(a),
        });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("replayprobe: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
