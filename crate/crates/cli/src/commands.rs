use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use replayprobe_core::capture::{Endpoint, SessionConfig};
use replayprobe_core::detector::{ModelKind, NoveltyModel, ResponseClass};
use replayprobe_core::pipeline::{
    self, attack_phase, train_phase, AssessConfig, AssessmentReport, PipelineError,
};
use replayprobe_core::replay::ResponseQueue;
use replayprobe_core::sim::{
    default_training_script, spawn_device, Behavior, Companion, DeviceProfile, DeviceState,
};
use replayprobe_core::verdict::{
    decide, evaluate_accuracy, DetectionConfig, GroundTruth, Outcome, Reason, VerdictReport,
};
use replayprobe_core::{Scenario, Transport};

use crate::config::{self, FileConfig, ModelOverrides, ReplayOverrides};
use crate::{
    render, AssessArgs, AttackArgs, DetectArgs, Failure, ModelArgs, ReplayArgs, ReportArgs,
    SessionArgs, SimulateArgs, TrainArgs, EXIT_NOT_VULNERABLE, EXIT_OK, EXIT_VULNERABLE,
};

pub const LIVE_SCHEMA: &str = "replayprobe-live/1";
const LOCALHOST: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn other(e: impl std::fmt::Display) -> Failure {
    Failure::Other(e.to_string())
}

fn from_pipeline(e: PipelineError) -> Failure {
    match e {
        PipelineError::NoLocalConnectivity => Failure::NoLocalConnectivity(e.to_string()),
        PipelineError::InvalidConfig(_) => Failure::Usage(e.to_string()),
        other => Failure::Other(other.to_string()),
    }
}

fn required<T>(value: Option<T>, flag: &str, key: &str) -> Result<T, Failure> {
    value.ok_or_else(|| usage(format!("missing {flag} (or `{key}` in the config file)")))
}

fn read_input(path: &Path, what: &str) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn write_output(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| other(format!("cannot write {}: {e}", path.display())))
}

fn session(
    file: &FileConfig,
    args: &SessionArgs,
    device: Option<Endpoint>,
) -> Result<SessionConfig, Failure> {
    let app = match (args.app, &file.session.app) {
        (Some(app), _) => app,
        (None, Some(text)) => config::parse_app(text).map_err(usage)?,
        (None, None) => Endpoint::new(LOCALHOST, 0),
    };
    let device = required(
        device.or(args.device).or(file.session.device),
        "--device",
        "session.device",
    )?;
    let mut session = SessionConfig::new(app, device).map_err(|e| usage(e.to_string()))?;
    if let Some(filter) = args.transport.or(file.session.transport) {
        session = session.with_transport(filter);
    }
    Ok(session)
}

fn model_overrides(m: &ModelArgs) -> ModelOverrides {
    ModelOverrides {
        kind: m.model_kind,
        k: m.k,
        threshold: m.threshold,
        trees: m.trees,
        subsample: m.subsample,
        seed: m.forest_seed,
        anomaly_cutoff: m.anomaly_cutoff,
    }
}

fn replay_overrides(r: &ReplayArgs) -> ReplayOverrides {
    ReplayOverrides {
        response_timeout_ms: r.response_timeout_ms,
        inter_request_delay_ms: r.inter_request_delay_ms,
        inter_flow_delay_ms: r.inter_flow_delay_ms,
        connect_timeout_ms: r.connect_timeout_ms,
    }
}

fn detection(file: &FileConfig, j: Option<usize>) -> Result<DetectionConfig, Failure> {
    let mut cfg = file.detection.unwrap_or_default();
    if let Some(j) = j {
        cfg.j = j;
    }
    if cfg.j == 0 {
        return Err(usage("j must be at least 1"));
    }
    Ok(cfg)
}

/// Sending traffic to anything beyond loopback needs an explicit acknowledgment.
fn guard_target(target: Endpoint, acknowledged: bool) -> Result<(), Failure> {
    if target.is_loopback() || acknowledged {
        Ok(())
    } else {
        Err(usage(format!(
            "refusing to replay traffic to {target}: pass --i-own-this-device to confirm you own it"
        )))
    }
}

#[derive(Serialize)]
struct ConnectivityReport<'a> {
    status: &'static str,
    capture: &'a Path,
    app: Endpoint,
    device: Endpoint,
}

pub fn train(file: &FileConfig, args: TrainArgs) -> Result<u8, Failure> {
    let capture_path = required(
        args.capture.or_else(|| file.paths.training_capture.clone()),
        "--capture",
        "paths.training_capture",
    )?;
    let model_path = required(
        args.model_out.or_else(|| file.paths.model.clone()),
        "--model-out",
        "paths.model",
    )?;
    let session = session(file, &args.session, None)?;
    let detector = config::model_spec(&file.model, &model_overrides(&args.model));
    let capture = read_input(&capture_path, "training capture")?;

    let training = match train_phase(&capture, &session, &detector) {
        Err(PipelineError::NoLocalConnectivity) => {
            if let Some(path) = args.report_out.or_else(|| file.paths.report.clone()) {
                let report = ConnectivityReport {
                    status: "NO-LOCAL-CONNECTIVITY",
                    capture: &capture_path,
                    app: session.app,
                    device: session.device,
                };
                let text = serde_json::to_string_pretty(&report).map_err(other)?;
                write_output(&path, text.as_bytes())?;
            }
            return Err(Failure::NoLocalConnectivity(format!(
                "NO-LOCAL-CONNECTIVITY: {} holds no traffic between {} and {}; the device \
                 cannot be assessed locally",
                capture_path.display(),
                session.app,
                session.device
            )));
        }
        other => other.map_err(from_pipeline)?,
    };

    println!("training responses: {}", training.responses.len());
    match training.response_class {
        Some(class) => println!("response type: {}", render::response_class(class)),
        None => println!("response type: unknown"),
    }
    if training.response_class == Some(ResponseClass::StandardEncrypted) {
        eprintln!("warning: responses use a standard security protocol; replays are expected to be rejected");
    }
    match (&training.model, &training.model_error) {
        (Some(model), _) => {
            model.save(&model_path).map_err(other)?;
            println!(
                "model: {} ({}) written to {}",
                render::model_kind(model.kind()),
                render::model_params(model),
                model_path.display()
            );
        }
        (None, error) => eprintln!(
            "warning: no model written: {}",
            error.as_deref().unwrap_or("training failed")
        ),
    }
    Ok(EXIT_OK)
}

pub fn attack(file: &FileConfig, args: AttackArgs) -> Result<u8, Failure> {
    let capture_path = required(
        args.capture.or_else(|| file.paths.attack_capture.clone()),
        "--capture",
        "paths.attack_capture",
    )?;
    let queue_path = required(
        args.queue_out.or_else(|| file.paths.queue.clone()),
        "--queue-out",
        "paths.queue",
    )?;
    let session = session(file, &args.session, None)?;
    let target = args.target.unwrap_or(session.device);
    guard_target(target, args.i_own_this_device)?;
    let replay = config::replay_config(file.replay.as_ref(), &replay_overrides(&args.replay));
    replay.validate().map_err(|e| usage(e.to_string()))?;
    let capture = read_input(&capture_path, "attack capture")?;

    let phase = attack_phase(&capture, &session, target, &replay).map_err(from_pipeline)?;
    if phase.interleaved {
        eprintln!(
            "warning: TCP connections in the capture overlap; their flows were merged by time"
        );
    }
    println!("flows replayed: {}", phase.flows.len());
    println!("responses queued: {}", phase.run.queue.len());
    for entry in &phase.run.transcript.flows {
        for note in &entry.notes {
            eprintln!("note: flow {}: {note}", entry.flow_index);
        }
    }
    write_output(&queue_path, phase.run.queue.to_json().as_bytes())?;
    if let Some(path) = args
        .transcript_out
        .or_else(|| file.paths.transcript.clone())
    {
        write_output(&path, phase.run.transcript.to_json().as_bytes())?;
    }
    Ok(EXIT_OK)
}

pub fn detect(file: &FileConfig, args: DetectArgs) -> Result<u8, Failure> {
    let queue_path = required(
        args.queue.or_else(|| file.paths.queue.clone()),
        "--queue",
        "paths.queue",
    )?;
    let capture_path = required(
        args.capture.or_else(|| file.paths.attack_capture.clone()),
        "--capture",
        "paths.attack_capture",
    )?;
    let session = session(file, &args.session, None)?;
    let cfg = detection(file, args.j)?;

    let queue_text = read_input(&queue_path, "response queue")?;
    let queue = ResponseQueue::from_json(&String::from_utf8_lossy(&queue_text))
        .map_err(|e| usage(format!("invalid queue {}: {e}", queue_path.display())))?;
    let capture = read_input(&capture_path, "attack capture")?;
    let records = replayprobe_core::parse_capture(&capture, &session).map_err(other)?;
    let model = match args.model.or_else(|| file.paths.model.clone()) {
        Some(path) => {
            read_input(&path, "model")?;
            Some(NoveltyModel::load(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };

    let verdict = decide(&queue, &records, model.as_ref(), &cfg).map_err(|e| match e {
        replayprobe_core::verdict::VerdictError::MissingModel => {
            usage("responses need classifying: pass --model")
        }
        e => other(e),
    })?;
    let report = VerdictReport::new(
        &verdict,
        &queue,
        args.device_id.unwrap_or_else(|| session.device.to_string()),
        args.scenario
            .or(file.scenario)
            .unwrap_or(Scenario::NonRestart),
        &cfg,
        model.as_ref().map(NoveltyModel::kind),
    );
    render::verdict_report(&report);
    if let Some(path) = args.report_out.or_else(|| file.paths.report.clone()) {
        write_output(&path, report.to_json().as_bytes())?;
    }
    Ok(match verdict.outcome {
        Outcome::Successful => EXIT_VULNERABLE,
        Outcome::Failed => EXIT_NOT_VULNERABLE,
    })
}

fn profile(
    file: &FileConfig,
    behavior: Option<Behavior>,
    transport: Option<Transport>,
    port: Option<u16>,
    seed: Option<u64>,
    no_rekey: bool,
) -> Result<DeviceProfile, Failure> {
    let behavior = match (behavior, &file.profile.behavior) {
        (Some(b), _) => b,
        (None, Some(name)) => name.parse().map_err(usage)?,
        (None, None) => {
            return Err(usage(
                "missing --profile (or `profile.behavior` in the config file)",
            ))
        }
    };
    let mut p = DeviceProfile::new(behavior);
    if let Some(t) = transport {
        p.transport = t;
    } else if let Some(name) = &file.profile.transport {
        p.transport = name.parse().map_err(usage)?;
    }
    p.port = port.or(file.profile.port).unwrap_or(0);
    p.rekey_on_restart = !no_rekey && file.profile.rekey_on_restart.unwrap_or(true);
    p.seed = seed.or(file.profile.seed);
    Ok(p)
}

pub fn assess(file: &FileConfig, args: AssessArgs) -> Result<u8, Failure> {
    if args.target.is_some() {
        return assess_live(file, args);
    }
    let profile = profile(
        file,
        args.profile,
        args.profile_transport,
        None,
        args.seed,
        args.no_rekey,
    )?;
    let defaults = AssessConfig::default();
    let config = AssessConfig {
        profile,
        scenario: args.scenario.or(file.scenario).unwrap_or(defaults.scenario),
        repetitions: args
            .repetitions
            .or(file.repetitions)
            .unwrap_or(defaults.repetitions),
        replay: config::replay_config(file.replay.as_ref(), &replay_overrides(&args.replay)),
        detection: detection(file, args.j)?,
        model: config::model_spec(&file.model, &model_overrides(&args.model)),
        restart_delay_ms: args
            .restart_delay_ms
            .or(file.restart_delay_ms)
            .unwrap_or(defaults.restart_delay_ms),
        companion_seed: profile.seed.unwrap_or(defaults.companion_seed),
        ..defaults
    };
    let report = pipeline::assess(&config).map_err(from_pipeline)?;
    render::assessment_report(&report);
    if let Some(path) = args.report_out.or_else(|| file.paths.report.clone()) {
        write_output(&path, report.to_json().as_bytes())?;
    }
    Ok(EXIT_OK)
}

/// Repeated attacks on a real device from user-supplied captures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveReport {
    pub schema: String,
    pub target: Endpoint,
    pub scenario: Scenario,
    pub repetitions: usize,
    pub training_responses: usize,
    pub response_class: Option<ResponseClass>,
    pub model_kind: Option<ModelKind>,
    pub expected: Option<GroundTruth>,
    pub accuracy: Option<f64>,
    pub reasons: BTreeMap<Reason, usize>,
    pub runs: Vec<VerdictReport>,
}

fn assess_live(file: &FileConfig, args: AssessArgs) -> Result<u8, Failure> {
    let target = args.target.expect("checked by caller");
    if !args.i_own_this_device {
        return Err(usage(format!(
            "live assessment of {target} requires --i-own-this-device"
        )));
    }
    let training_path = required(
        args.training_capture
            .or_else(|| file.paths.training_capture.clone()),
        "--training-capture",
        "paths.training_capture",
    )?;
    let attack_path = required(
        args.attack_capture
            .or_else(|| file.paths.attack_capture.clone()),
        "--attack-capture",
        "paths.attack_capture",
    )?;
    let session_args = SessionArgs {
        app: args.app,
        ..SessionArgs::default()
    };
    let session = session(file, &session_args, Some(target))?;
    let replay = config::replay_config(file.replay.as_ref(), &replay_overrides(&args.replay));
    replay.validate().map_err(|e| usage(e.to_string()))?;
    let cfg = detection(file, args.j)?;
    let scenario = args
        .scenario
        .or(file.scenario)
        .unwrap_or(Scenario::NonRestart);
    let repetitions = args.repetitions.or(file.repetitions).unwrap_or(1);
    if repetitions == 0 {
        return Err(usage("repetitions must be at least 1"));
    }
    let detector = config::model_spec(&file.model, &model_overrides(&args.model));

    let training = train_phase(
        &read_input(&training_path, "training capture")?,
        &session,
        &detector,
    )
    .map_err(from_pipeline)?;
    let attack_capture = read_input(&attack_path, "attack capture")?;
    let mut runs = Vec::with_capacity(repetitions);
    let mut verdicts = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let phase =
            attack_phase(&attack_capture, &session, target, &replay).map_err(from_pipeline)?;
        let verdict = decide(
            &phase.run.queue,
            &phase.records,
            training.model.as_ref(),
            &cfg,
        )
        .map_err(other)?;
        runs.push(VerdictReport::new(
            &verdict,
            &phase.run.queue,
            target.to_string(),
            scenario,
            &cfg,
            training.model.as_ref().map(NoveltyModel::kind),
        ));
        verdicts.push(verdict);
        thread::sleep(Duration::from_millis(replay.inter_flow_delay_ms));
    }
    let mut reasons = BTreeMap::new();
    for v in &verdicts {
        *reasons.entry(v.reason).or_insert(0) += 1;
    }
    let report = LiveReport {
        schema: LIVE_SCHEMA.into(),
        target,
        scenario,
        repetitions,
        training_responses: training.responses.len(),
        response_class: training.response_class,
        model_kind: training.model.as_ref().map(NoveltyModel::kind),
        expected: args.expect,
        accuracy: args
            .expect
            .map(|truth| evaluate_accuracy(&verdicts, truth))
            .transpose()
            .map_err(other)?,
        reasons,
        runs,
    };
    render::live_report(&report);
    if let Some(path) = args.report_out.or_else(|| file.paths.report.clone()) {
        let text = serde_json::to_string_pretty(&report).map_err(other)?;
        write_output(&path, text.as_bytes())?;
    }
    Ok(EXIT_OK)
}

pub fn simulate(file: &FileConfig, args: SimulateArgs) -> Result<u8, Failure> {
    let profile = profile(
        file,
        args.profile,
        args.profile_transport,
        args.port,
        args.seed,
        args.no_rekey,
    )?;
    let handle = spawn_device(profile).map_err(other)?;
    let device = handle.endpoint();
    println!(
        "{} device ({}) listening on {device}",
        profile.behavior, profile.transport
    );

    if let Some(dir) = &args.write_captures {
        fs::create_dir_all(dir)
            .map_err(|e| other(format!("cannot create {}: {e}", dir.display())))?;
        let mut companion = Companion::new(LOCALHOST, profile.seed.unwrap_or(1));
        let training = companion
            .run_script(&handle, &default_training_script())
            .map_err(other)?;
        companion
            .trigger(&handle, DeviceState::Obverse)
            .map_err(other)?;
        let attack = companion.take_capture();
        companion
            .trigger(&handle, DeviceState::Reverse)
            .map_err(other)?;
        companion.take_capture();

        let paths: [(PathBuf, &[u8]); 2] = [
            (dir.join("training.pcap"), &training),
            (dir.join("attack.pcap"), &attack),
        ];
        for (path, bytes) in &paths {
            write_output(path, bytes)?;
            println!("wrote {}", path.display());
        }
        println!("device state: {}", handle.query_state());
    }
    println!("ready");
    std::io::stdout().flush().ok();

    match args.duration_s {
        Some(s) => thread::sleep(Duration::from_secs(s)),
        None => loop {
            thread::sleep(Duration::from_secs(3600));
        },
    }
    println!("device state at exit: {}", handle.query_state());
    Ok(EXIT_OK)
}

pub enum AnyReport {
    Verdict(VerdictReport),
    Assessment(AssessmentReport),
    Live(LiveReport),
}

pub fn parse_report(text: &str) -> Result<AnyReport, String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if value.get("schema_version").is_some() {
        return VerdictReport::from_json(text)
            .map(AnyReport::Verdict)
            .map_err(|e| e.to_string());
    }
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(pipeline::ASSESSMENT_SCHEMA) => AssessmentReport::from_json(text)
            .map(AnyReport::Assessment)
            .map_err(|e| e.to_string()),
        Some(LIVE_SCHEMA) => {
            let r: LiveReport = serde_json::from_value(value).map_err(|e| e.to_string())?;
            for run in &r.runs {
                run.validate().map_err(|e| e.to_string())?;
            }
            Ok(AnyReport::Live(r))
        }
        _ => Err("not a replayprobe report".into()),
    }
}

pub fn report(args: ReportArgs) -> Result<u8, Failure> {
    let bytes = read_input(&args.path, "report")?;
    let parsed = parse_report(&String::from_utf8_lossy(&bytes))
        .map_err(|e| other(format!("{}: {e}", args.path.display())))?;
    if args.json {
        let text = match &parsed {
            AnyReport::Verdict(r) => r.to_json(),
            AnyReport::Assessment(r) => r.to_json(),
            AnyReport::Live(r) => serde_json::to_string_pretty(r).map_err(other)?,
        };
        println!("{text}");
    } else {
        match &parsed {
            AnyReport::Verdict(r) => render::verdict_report(r),
            AnyReport::Assessment(r) => render::assessment_report(r),
            AnyReport::Live(r) => render::live_report(r),
        }
    }
    Ok(EXIT_OK)
}
