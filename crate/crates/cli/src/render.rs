use std::collections::BTreeMap;

use replayprobe_core::detector::{Label, ModelKind, NoveltyModel, ResponseClass};
use replayprobe_core::pipeline::AssessmentReport;
use replayprobe_core::verdict::{GroundTruth, Reason, VerdictReport};

use crate::commands::LiveReport;

pub fn response_class(c: ResponseClass) -> &'static str {
    match c {
        ResponseClass::Cleartext => "cleartext",
        ResponseClass::Encoded => "encoded",
        ResponseClass::StandardEncrypted => "standard encrypted",
        ResponseClass::NonStandardEncrypted => "non-standard encrypted",
    }
}

pub fn model_kind(k: ModelKind) -> &'static str {
    match k {
        ModelKind::Lof => "lof",
        ModelKind::IsolationForest => "isolation forest",
    }
}

pub fn model_params(m: &NoveltyModel) -> String {
    match m.k_eff() {
        Some(k) => format!("k_eff {k}, threshold {}", m.cutoff()),
        None => format!("anomaly cutoff {}", m.cutoff()),
    }
}

fn reason(r: Reason) -> &'static str {
    match r {
        Reason::NoResponse => "no response",
        Reason::StandardProtocol => "standard security protocol",
        Reason::AllIrregular => "all responses irregular",
        Reason::RegularFound => "regular response found",
    }
}

fn check_of(r: Reason) -> &'static str {
    match r {
        Reason::NoResponse => "response check",
        Reason::StandardProtocol => "protocol check",
        Reason::AllIrregular | Reason::RegularFound => "model",
    }
}

fn labels(ls: &[Label]) -> String {
    if ls.is_empty() {
        return "-".into();
    }
    ls.iter()
        .map(|l| match l {
            Label::Regular => "R",
            Label::Irregular => "I",
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn truth(t: GroundTruth) -> &'static str {
    match t {
        GroundTruth::Vulnerable => "vulnerable",
        GroundTruth::NotVulnerable => "not vulnerable",
    }
}

fn breakdown(reasons: &BTreeMap<Reason, usize>) {
    println!("  decided by:");
    for (r, n) in reasons {
        println!("    {:<15} {:<28} {n}", check_of(*r), reason(*r));
    }
}

pub fn verdict_report(r: &VerdictReport) {
    println!("verdict: {} ({})", r.outcome, reason(r.reason));
    println!("  device: {}  scenario: {}", r.device_id, r.scenario);
    println!("  decided by: {}", check_of(r.reason));
    println!("  labels (j = {}): {}", r.j, labels(&r.labels));
}

pub fn assessment_report(r: &AssessmentReport) {
    println!(
        "assessment: {} over {} in the {} scenario",
        r.device_id, r.repetitions, r.scenario
    );
    println!("  expected: {}", truth(r.ground_truth));
    println!("  accuracy: {:.2}", r.accuracy);
    println!(
        "  agreement with observed device state: {:.2}",
        r.observed_agreement
    );
    let t = &r.training;
    println!(
        "  training: {} responses, type {}, model {}",
        t.responses,
        t.response_class.map(response_class).unwrap_or("unknown"),
        t.model_kind.map(model_kind).unwrap_or("none")
    );
    breakdown(&r.reasons);
}

pub fn live_report(r: &LiveReport) {
    println!(
        "live assessment: {} over {} run(s)",
        r.target, r.repetitions
    );
    println!(
        "  training: {} responses, type {}",
        r.training_responses,
        r.response_class.map(response_class).unwrap_or("unknown")
    );
    if let (Some(t), Some(a)) = (r.expected, r.accuracy) {
        println!("  expected: {}  accuracy: {a:.2}", truth(t));
    }
    breakdown(&r.reasons);
}
