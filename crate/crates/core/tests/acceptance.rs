//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "support/lof_oracle.rs"]
mod oracle;

use std::net::{IpAddr, Ipv4Addr};
use std::process::ExitCode;
use std::thread;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use replayprobe_core::capture::{
    parse_capture, segment_flows, Direction, Endpoint, PacketRecord, SessionConfig, Transport,
};
use replayprobe_core::detector::{featurize, train_lof, Label};
use replayprobe_core::pipeline::{assess, train_phase, AssessConfig, AssessmentReport, ModelSpec};
use replayprobe_core::replay::{run_attack, schedule, QueueEntry, ReplayConfig, ResponseQueue};
use replayprobe_core::sim::{
    companion_session, default_training_script, spawn_device, spawn_scripted, Behavior, Companion,
    DeviceProfile, ScriptRule,
};
use replayprobe_core::verdict::{decide, DetectionConfig, Outcome, Reason};
use replayprobe_core::{classify_direction, Scenario};

const REPETITIONS: usize = 50;
const LOCALHOST: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

struct Criterion {
    id: u8,
    name: &'static str,
    result: Result<String, String>,
}

fn check(cond: bool, ok: String, err: String) -> Result<String, String> {
    if cond {
        Ok(ok)
    } else {
        Err(err)
    }
}

fn run_assessments() -> Result<Vec<AssessmentReport>, String> {
    let mut jobs = Vec::new();
    for behavior in Behavior::ALL {
        for scenario in [Scenario::NonRestart, Scenario::Restart] {
            jobs.push(thread::spawn(move || {
                let config = AssessConfig {
                    profile: DeviceProfile::new(behavior),
                    scenario,
                    repetitions: REPETITIONS,
                    replay: ReplayConfig {
                        response_timeout_ms: 500,
                        ..ReplayConfig::default()
                    },
                    ..AssessConfig::default()
                };
                assess(&config).map_err(|e| format!("{behavior} {scenario}: {e}"))
            }));
        }
    }
    jobs.into_iter()
        .map(|j| {
            j.join()
                .map_err(|_| "assessment thread panicked".to_string())?
        })
        .collect()
}

fn label(r: &AssessmentReport) -> String {
    format!("{}/{}", r.profile.behavior, r.scenario)
}

fn accuracy_reproduction(reports: &[AssessmentReport]) -> Result<String, String> {
    let worst = reports
        .iter()
        .min_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
        .ok_or("no reports")?;
    let complete = reports.iter().all(|r| r.runs.len() == REPETITIONS);
    check(
        complete && worst.accuracy >= 0.98,
        format!(
            "12 assessments x {REPETITIONS} runs, min accuracy {:.2} ({})",
            worst.accuracy,
            label(worst)
        ),
        format!("accuracy {:.2} for {}", worst.accuracy, label(worst)),
    )
}

fn scenario_differentiation(reports: &[AssessmentReport]) -> Result<String, String> {
    let mismatches: Vec<String> = reports
        .iter()
        .filter_map(|r| {
            let expected = r.ground_truth.expected();
            let wrong = r.runs.iter().filter(|run| run.outcome != expected).count();
            (wrong > 0).then(|| format!("{} expected {expected}, {wrong} runs differ", label(r)))
        })
        .collect();
    let session_key = |s| {
        reports
            .iter()
            .find(|r| r.profile.behavior == Behavior::SessionKey && r.scenario == s)
            .map(|r| {
                r.runs
                    .iter()
                    .all(|run| run.outcome == r.ground_truth.expected())
            })
    };
    check(
        mismatches.is_empty()
            && session_key(Scenario::NonRestart) == Some(true)
            && session_key(Scenario::Restart) == Some(true),
        format!(
            "all {} runs match the vulnerability matrix",
            reports.len() * REPETITIONS
        ),
        mismatches.join("; "),
    )
}

fn branch_attribution(reports: &[AssessmentReport]) -> Result<String, String> {
    let mut errors = Vec::new();
    for r in reports {
        let allowed: &[Reason] = match r.profile.behavior {
            Behavior::Silent => &[Reason::NoResponse],
            Behavior::TlsLike => &[Reason::StandardProtocol],
            _ => &[Reason::AllIrregular, Reason::RegularFound],
        };
        for (reason, n) in &r.reasons {
            if !allowed.contains(reason) {
                errors.push(format!("{}: {n} x {reason:?}", label(r)));
            }
        }
    }
    check(
        errors.is_empty(),
        "Silent->NoResponse, TlsLike->StandardProtocol, others via the model".into(),
        errors.join("; "),
    )
}

fn lof_oracle() -> Result<String, String> {
    let (worst, compared) = oracle::max_deviation(100);
    check(
        compared == 2000 && worst <= 1e-9,
        format!("100 datasets x 20 queries, max |delta| {worst:.1e}"),
        format!("max |delta| {worst:e} over {compared} queries"),
    )
}

/// Requests and responses in the order A1 | A2 | B1 | B2 B3 | C1 C2 | C3.
fn lettered_exchange(device: Endpoint) -> (Vec<PacketRecord>, SessionConfig) {
    let app = Endpoint::new(LOCALHOST, 40_000);
    let sequence: [(&[u8], bool); 8] = [
        (b"A1", true),
        (b"A2", false),
        (b"B1", true),
        (b"B2", false),
        (b"B3", false),
        (b"C1", true),
        (b"C2", true),
        (b"C3", false),
    ];
    let records = sequence
        .iter()
        .enumerate()
        .map(|(i, &(payload, request))| PacketRecord {
            timestamp_us: i as u64 * 1_000,
            src: if request { app } else { device },
            dst: if request { device } else { app },
            transport: Transport::Udp,
            payload: payload.to_vec(),
        })
        .collect();
    (
        records,
        SessionConfig::new(app, device).expect("distinct endpoints"),
    )
}

fn flow_segmentation() -> Result<String, String> {
    let device = spawn_scripted(vec![
        ScriptRule::new(b"A1", &[b"A2~"]),
        ScriptRule::new(b"B1", &[b"B2~", b"B3~"]),
        ScriptRule::new(b"C2", &[b"C3~"]),
    ])
    .map_err(|e| e.to_string())?;
    let (records, session) = lettered_exchange(device.endpoint());
    let flows = segment_flows(&records, &session);
    let names = |rs: &[PacketRecord]| {
        rs.iter()
            .map(|r| String::from_utf8_lossy(&r.payload).into_owned())
            .collect::<Vec<_>>()
            .join(",")
    };
    let shape: Vec<String> = flows
        .iter()
        .map(|f| format!("{{{}|{}}}", names(&f.requests), names(&f.responses)))
        .collect();
    let order: Vec<String> = schedule(&flows)
        .iter()
        .map(|f| names(&f.requests))
        .collect();

    let config = ReplayConfig {
        response_timeout_ms: 300,
        ..ReplayConfig::default()
    };
    let run = run_attack(&flows, device.endpoint(), &config).map_err(|e| e.to_string())?;
    let queue: Vec<String> = run
        .queue
        .payloads()
        .map(|p| String::from_utf8_lossy(p).into_owned())
        .collect();

    let want_shape = ["{A1|A2}", "{B1|B2,B3}", "{C1,C2|C3}"];
    let want_order = ["C1,C2", "B1", "A1"];
    let want_queue = ["C3~", "B2~", "B3~", "A2~"];
    check(
        shape == want_shape && order == want_order && queue == want_queue,
        format!(
            "flows {} replay [F3,F2,F1] queue {}",
            shape.join(" "),
            queue.join(",")
        ),
        format!("flows {shape:?} order {order:?} queue {queue:?}"),
    )
}

fn decision_rule() -> Result<String, String> {
    let regular = br#"{"id":1,"result":["ok"]}"#.to_vec();
    let model = train_lof(&vec![featurize(&regular); 10], 5).map_err(|e| e.to_string())?;
    let irregular: Vec<u8> = (0..200u8).map(|b| b.wrapping_mul(37) | 0x80).collect();
    if model.classify(&featurize(&regular)) != Label::Regular
        || model.classify(&featurize(&irregular)) != Label::Irregular
    {
        return Err("fixture payloads do not classify as intended".into());
    }

    let ep = |port| Endpoint::new(LOCALHOST, port);
    let tls = PacketRecord {
        timestamp_us: 0,
        src: ep(1),
        dst: ep(2),
        transport: Transport::Tcp,
        payload: vec![0x17, 0x03, 0x03, 0x00, 0x01, 0x00],
    };

    let strategy = (
        1usize..=6,
        prop::collection::vec(any::<bool>(), 0..=9),
        any::<bool>(),
        any::<bool>(),
    );
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let outcome = runner.run(&strategy, |(j, regular_flags, secure, with_model)| {
        let queue = ResponseQueue::from_entries(
            regular_flags
                .iter()
                .enumerate()
                .map(|(i, &is_regular)| QueueEntry {
                    arrival_us: i as u64,
                    flow_index: 0,
                    payload: if is_regular {
                        regular.clone()
                    } else {
                        irregular.clone()
                    },
                })
                .collect(),
        );
        let records = if secure { vec![tls.clone()] } else { vec![] };
        let cfg = DetectionConfig { j };
        let m = with_model.then_some(&model);
        let result = decide(&queue, &records, m, &cfg);

        if regular_flags.is_empty() {
            let v = result.expect("gate needs no model");
            prop_assert_eq!((v.outcome, v.reason), (Outcome::Failed, Reason::NoResponse));
        } else if secure {
            let v = result.expect("gate needs no model");
            prop_assert_eq!(
                (v.outcome, v.reason),
                (Outcome::Failed, Reason::StandardProtocol)
            );
        } else if !with_model {
            prop_assert!(result.is_err());
        } else {
            let v = result.expect("model present");
            let window = &regular_flags[..j.min(regular_flags.len())];
            prop_assert_eq!(v.labels.len(), window.len());
            let all_irregular = window.iter().all(|r| !r);
            prop_assert_eq!(v.outcome == Outcome::Failed, all_irregular);
            prop_assert_eq!(
                v.reason,
                if all_irregular {
                    Reason::AllIrregular
                } else {
                    Reason::RegularFound
                }
            );
        }
        Ok(())
    });
    match outcome {
        Ok(()) => Ok("1000 generated cases, 0 violations".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn training_size() -> Result<String, String> {
    let mut details = Vec::new();
    for behavior in [
        Behavior::CleartextEcho,
        Behavior::SignedCleartext,
        Behavior::EncodedFixed,
    ] {
        let handle = spawn_device(DeviceProfile::new(behavior)).map_err(|e| e.to_string())?;
        let app = Endpoint::new(LOCALHOST, 0);
        let pcap = companion_session(&handle, app, &default_training_script())
            .map_err(|e| e.to_string())?;
        let session = SessionConfig::new(app, handle.endpoint()).map_err(|e| e.to_string())?;
        let records = parse_capture(&pcap, &session).map_err(|e| e.to_string())?;
        let count = |d| {
            records
                .iter()
                .filter(|r| classify_direction(r, &session) == d)
                .count()
        };
        let (req, resp) = (count(Direction::Request), count(Direction::Response));
        let training =
            train_phase(&pcap, &session, &ModelSpec::default()).map_err(|e| e.to_string())?;
        let k_eff = training.model.as_ref().and_then(|m| m.k_eff());
        if (req, resp, k_eff) != (10, 10, Some(5)) {
            return Err(format!(
                "{behavior}: {req} requests, {resp} responses, k_eff {k_eff:?}"
            ));
        }
        details.push(behavior.to_string());
    }
    Ok(format!(
        "10 requests / 10 responses, k_eff 5 on {}",
        details.join(", ")
    ))
}

fn capture_round_trip() -> Result<String, String> {
    let mut fixtures = 0;
    for behavior in Behavior::ALL {
        for transport in [Transport::Tcp, Transport::Udp] {
            let profile = DeviceProfile::new(behavior).with_transport(transport);
            let handle = spawn_device(profile).map_err(|e| e.to_string())?;
            let mut companion = Companion::new(LOCALHOST, fixtures);
            let mut emitted = Vec::new();
            for state in default_training_script() {
                emitted.extend(
                    companion
                        .trigger(&handle, state)
                        .map_err(|e| e.to_string())?,
                );
            }
            let session = SessionConfig::new(Endpoint::new(LOCALHOST, 0), handle.endpoint())
                .map_err(|e| e.to_string())?;
            let reread =
                parse_capture(&companion.take_capture(), &session).map_err(|e| e.to_string())?;
            let same = reread.len() == emitted.len()
                && reread
                    .iter()
                    .zip(&emitted)
                    .all(|(a, b)| a.payload == b.payload);
            if !same {
                return Err(format!(
                    "{behavior}/{transport}: payloads differ after re-read"
                ));
            }
            fixtures += 1;
        }
    }
    Ok(format!("{fixtures}/{fixtures} fixtures bit-identical"))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let assessments = thread::spawn(run_assessments);

    let mut criteria = vec![
        Criterion {
            id: 4,
            name: "LOF oracle equivalence",
            result: lof_oracle(),
        },
        Criterion {
            id: 5,
            name: "flow segmentation",
            result: flow_segmentation(),
        },
        Criterion {
            id: 6,
            name: "decision rule properties",
            result: decision_rule(),
        },
        Criterion {
            id: 7,
            name: "training size contract",
            result: training_size(),
        },
        Criterion {
            id: 8,
            name: "capture round trip",
            result: capture_round_trip(),
        },
    ];

    let reports = assessments
        .join()
        .unwrap_or_else(|_| Err("assessment driver panicked".into()));
    let per_report = |f: fn(&[AssessmentReport]) -> Result<String, String>| match &reports {
        Ok(r) => f(r),
        Err(e) => Err(e.clone()),
    };
    criteria.push(Criterion {
        id: 1,
        name: "detection accuracy",
        result: per_report(accuracy_reproduction),
    });
    criteria.push(Criterion {
        id: 2,
        name: "scenario differentiation",
        result: per_report(scenario_differentiation),
    });
    criteria.push(Criterion {
        id: 3,
        name: "verdict branch attribution",
        result: per_report(branch_attribution),
    });
    criteria.sort_by_key(|c| c.id);

    let mut failed = 0;
    for c in &criteria {
        match &c.result {
            Ok(detail) => println!("PASS [{}] {}: {detail}", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {}: {detail}", c.id, c.name);
            }
        }
    }
    println!(
        "{} passed, {failed} failed in {:.1}s",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
