use std::fs;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

use replayprobe_core::capture::{Endpoint, SessionConfig};
use replayprobe_core::pipeline::{attack_phase, train_phase, AssessmentReport, ModelSpec};
use replayprobe_core::replay::ReplayConfig;
use replayprobe_core::sim::{
    default_training_script, spawn_device, Behavior, Companion, DeviceHandle, DeviceProfile,
    DeviceState,
};
use replayprobe_core::verdict::{decide, DetectionConfig, Outcome, Reason, Verdict, VerdictReport};

const LOCALHOST: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

fn replayprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_replayprobe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A device with a training capture and an OBVERSE attack capture on disk,
/// left in REVERSE.
struct Bench {
    dir: TempDir,
    handle: DeviceHandle,
    companion: Companion,
}

impl Bench {
    fn new(behavior: Behavior) -> Self {
        let dir = TempDir::new().unwrap();
        let handle = spawn_device(DeviceProfile::new(behavior).with_seed(21)).unwrap();
        let mut companion = Companion::new(LOCALHOST, 21);
        let training = companion
            .run_script(&handle, &default_training_script())
            .unwrap();
        companion.trigger(&handle, DeviceState::Obverse).unwrap();
        let attack = companion.take_capture();
        companion.trigger(&handle, DeviceState::Reverse).unwrap();
        companion.take_capture();
        fs::write(dir.path().join("training.pcap"), training).unwrap();
        fs::write(dir.path().join("attack.pcap"), attack).unwrap();
        Self {
            dir,
            handle,
            companion,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn device(&self) -> String {
        self.handle.endpoint().to_string()
    }

    fn reset(&mut self) {
        self.companion
            .trigger(&self.handle, DeviceState::Reverse)
            .unwrap();
        self.companion.take_capture();
    }

    fn train(&self) -> Output {
        replayprobe(&[
            "train",
            "--capture",
            s(&self.path("training.pcap")),
            "--device",
            &self.device(),
            "--model-out",
            s(&self.path("model.json")),
        ])
    }

    fn attack(&self) -> Output {
        replayprobe(&[
            "attack",
            "--capture",
            s(&self.path("attack.pcap")),
            "--device",
            &self.device(),
            "--queue-out",
            s(&self.path("queue.json")),
            "--transcript-out",
            s(&self.path("transcript.json")),
            "--response-timeout-ms",
            "300",
        ])
    }

    fn detect(&self, with_model: bool) -> Output {
        let mut args = vec![
            "detect".to_string(),
            "--capture".into(),
            s(&self.path("attack.pcap")).into(),
            "--device".into(),
            self.device(),
            "--queue".into(),
            s(&self.path("queue.json")).into(),
            "--report-out".into(),
            s(&self.path("report.json")).into(),
        ];
        if with_model {
            args.extend(["--model".into(), s(&self.path("model.json")).into()]);
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        replayprobe(&refs)
    }

    /// The same three phases through the library, as `assess` runs them.
    fn in_process(&self) -> Verdict {
        let session =
            SessionConfig::new(Endpoint::new(LOCALHOST, 0), self.handle.endpoint()).unwrap();
        let training = train_phase(
            &fs::read(self.path("training.pcap")).unwrap(),
            &session,
            &ModelSpec::default(),
        )
        .unwrap();
        let replay = ReplayConfig {
            response_timeout_ms: 300,
            ..ReplayConfig::default()
        };
        let attack = attack_phase(
            &fs::read(self.path("attack.pcap")).unwrap(),
            &session,
            self.handle.endpoint(),
            &replay,
        )
        .unwrap();
        decide(
            &attack.run.queue,
            &attack.records,
            training.model.as_ref(),
            &DetectionConfig::default(),
        )
        .unwrap()
    }

    fn report(&self) -> VerdictReport {
        VerdictReport::from_json(&fs::read_to_string(self.path("report.json")).unwrap()).unwrap()
    }
}

#[test]
fn separate_processes_match_the_in_process_path() {
    for (behavior, restart, exit, reason) in [
        (Behavior::CleartextEcho, false, 10, Reason::RegularFound),
        (Behavior::SessionKey, false, 10, Reason::RegularFound),
        (Behavior::SessionKey, true, 11, Reason::AllIrregular),
        (Behavior::TlsLike, false, 11, Reason::StandardProtocol),
    ] {
        let mut bench = Bench::new(behavior);
        if restart {
            bench.handle.restart_device();
        }
        assert_eq!(code(&bench.train()), 0, "{behavior}");
        assert_eq!(code(&bench.attack()), 0, "{behavior}");
        assert_eq!(code(&bench.detect(true)), exit, "{behavior}");
        let separate = bench.report().verdict();
        assert_eq!(separate.reason, reason, "{behavior}");

        bench.reset();
        assert_eq!(bench.in_process(), separate, "{behavior}");
    }
}

#[test]
fn silent_device_needs_no_model() {
    let bench = Bench::new(Behavior::Silent);
    let out = bench.train();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no model written"));
    assert!(!bench.path("model.json").exists());
    assert_eq!(code(&bench.attack()), 0);
    assert_eq!(code(&bench.detect(false)), 11);
    assert_eq!(bench.report().reason, Reason::NoResponse);
}

#[test]
fn training_prints_size_and_type() {
    let bench = Bench::new(Behavior::CleartextEcho);
    let out = bench.train();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("training responses: 10"), "{stdout}");
    assert!(stdout.contains("response type: cleartext"), "{stdout}");

    let tls = Bench::new(Behavior::TlsLike);
    let out = tls.train();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("standard encrypted"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn exit_codes() {
    let bench = Bench::new(Behavior::CleartextEcho);
    assert_eq!(code(&replayprobe(&[])), 2);
    assert_eq!(
        code(&replayprobe(&["detect", "--device", &bench.device()])),
        2
    );
    assert_eq!(
        code(&replayprobe(&[
            "train",
            "--capture",
            "/nonexistent.pcap",
            "--device",
            "127.0.0.1:9",
            "--model-out",
            "/tmp/x"
        ])),
        2
    );

    let report = bench.path("nlc.json");
    let out = replayprobe(&[
        "train",
        "--capture",
        s(&bench.path("training.pcap")),
        "--device",
        "10.20.30.40:80",
        "--model-out",
        s(&bench.path("unused.json")),
        "--report-out",
        s(&report),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("NO-LOCAL-CONNECTIVITY"));
    assert!(fs::read_to_string(&report)
        .unwrap()
        .contains("NO-LOCAL-CONNECTIVITY"));

    assert_eq!(code(&bench.train()), 0);
    assert_eq!(code(&bench.attack()), 0);
    assert_eq!(
        code(&replayprobe(&["report", s(&bench.path("queue.json"))])),
        1
    );
}

#[test]
fn non_loopback_targets_need_acknowledgment() {
    let bench = Bench::new(Behavior::CleartextEcho);
    let out = replayprobe(&[
        "attack",
        "--capture",
        s(&bench.path("attack.pcap")),
        "--device",
        &bench.device(),
        "--target",
        "192.0.2.1:80",
        "--queue-out",
        s(&bench.path("q.json")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--i-own-this-device"));
    assert!(!bench.path("q.json").exists());

    let out = replayprobe(&[
        "assess",
        "--target",
        &bench.device(),
        "--training-capture",
        s(&bench.path("training.pcap")),
        "--attack-capture",
        s(&bench.path("attack.pcap")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn live_assessment_against_an_acknowledged_target() {
    let bench = Bench::new(Behavior::CleartextEcho);
    let report = bench.path("live.json");
    let out = replayprobe(&[
        "assess",
        "--target",
        &bench.device(),
        "--i-own-this-device",
        "--training-capture",
        s(&bench.path("training.pcap")),
        "--attack-capture",
        s(&bench.path("attack.pcap")),
        "--repetitions",
        "2",
        "--expect",
        "vulnerable",
        "--response-timeout-ms",
        "300",
        "--report-out",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"accuracy\": 1.0"), "{text}");
    assert_eq!(code(&replayprobe(&["report", s(&report)])), 0);
}

#[test]
fn assessment_report_round_trips() {
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("assess.json");
    let out = replayprobe(&[
        "assess",
        "--profile",
        "session_key",
        "--scenario",
        "restart",
        "--repetitions",
        "2",
        "--restart-delay-ms",
        "20",
        "--response-timeout-ms",
        "300",
        "--report-out",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy: 1.00"));

    let original = AssessmentReport::from_json(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(original.runs.iter().all(|r| r.outcome == Outcome::Failed));
    let printed = replayprobe(&["report", "--json", s(&report)]);
    assert_eq!(code(&printed), 0);
    let reparsed = AssessmentReport::from_json(&String::from_utf8_lossy(&printed.stdout)).unwrap();
    assert_eq!(reparsed, original);
}

#[test]
fn verdict_report_round_trips() {
    let bench = Bench::new(Behavior::EncodedFixed);
    bench.train();
    bench.attack();
    assert_eq!(code(&bench.detect(true)), 10);
    let original = bench.report();
    let printed = replayprobe(&["report", "--json", s(&bench.path("report.json"))]);
    assert_eq!(
        VerdictReport::from_json(&String::from_utf8_lossy(&printed.stdout)).unwrap(),
        original
    );
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("run.toml");
    let report = dir.path().join("assess.json");
    fs::write(
        &config,
        format!(
            "scenario = \"restart\"\nrepetitions = 1\nrestart_delay_ms = 20\n\n\
             [profile]\nbehavior = \"session_key\"\n\n\
             [replay]\nresponse_timeout_ms = 300\n\n\
             [paths]\nreport = \"{}\"\n",
            report.display()
        ),
    )
    .unwrap();
    let out = replayprobe(&[
        "--config",
        s(&config),
        "assess",
        "--scenario",
        "non_restart",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = AssessmentReport::from_json(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.repetitions, 1);
    assert_eq!(r.profile.behavior, Behavior::SessionKey);
    assert_eq!(r.scenario, replayprobe_core::Scenario::NonRestart);
    assert_eq!(r.runs[0].outcome, Outcome::Successful);

    fs::write(&config, "colour = \"blue\"\n").unwrap();
    assert_eq!(code(&replayprobe(&["--config", s(&config), "assess"])), 2);
}
