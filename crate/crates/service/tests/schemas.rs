//! The shipped JSON Schemas accept what the service and library emit and
//! reject malformed client messages.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};
use spinesim::eval::{emit_report, DiceEntry, Metrics, TimingReport};
use spinesim::sim::{CarveCommand, SessionConfig, SimSession, Tool};
use spinesim::{Geometry, LabelMap};
use spinesim_service::cases::{CaseRecord, CaseStatus, Failure};
use spinesim_service::jobs::{JobRecord, JobStatus};
use spinesim_service::protocol::{script_messages, SessionHandler};

fn load(name: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn validator(name: &str) -> jsonschema::Validator {
    let mut opts = jsonschema::options();
    for other in ["report.schema.json", "case.schema.json"] {
        opts = opts.with_resource(
            format!("json-schema:///{other}"),
            jsonschema::Resource::from_contents(load(other)).unwrap(),
        );
    }
    opts.build(&load(name)).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, instance: &Value) {
    let errors: Vec<String> = v.iter_errors(instance).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{instance}\n{errors:#?}");
}

fn model() -> LabelMap {
    let n = 20;
    let g = Geometry::identity([n, n, n]);
    let data = (0..g.len())
        .map(|i| {
            let [x, y, _] = g.coords(i);
            let (dx, dy) = (x as f64 - 10.0, y as f64 - 6.0);
            if dx * dx + dy * dy <= 4.0 {
                200
            } else if (12..18).contains(&y) && (3..17).contains(&x) {
                22
            } else {
                0
            }
        })
        .collect();
    LabelMap::with_canonical_table(g, data).unwrap()
}

#[test]
fn session_messages_match_schemas() {
    let client = validator("session-client.schema.json");
    let server = validator("session-server.schema.json");
    let script: Vec<CarveCommand> = (0..12)
        .map(|k| CarveCommand {
            seq: k + 1,
            tool: if k % 2 == 0 { Tool::burr(1.5) } else { Tool::kerrison(2.0, 2.0, 2.0) },
            tip: [10.0, 16.0 - k as f64, 10.0],
            direction: [0.0, -1.0, 0.0],
            active: k != 5,
        })
        .collect();
    let mut messages: Vec<Value> = script_messages(&script).iter().map(|m| serde_json::to_value(m).unwrap()).collect();
    messages.extend([
        json!({"type": "tool_select", "seq": 20, "tool": {"kind": "woodson"}}),
        json!({"type": "tool_pose", "seq": 21, "tip": [10, 7, 10], "direction": [0, -1, 0], "role": "observer"}),
        json!({"type": "undo", "seq": 22}),
        json!({"type": "visibility", "seq": 23, "structure": "L3", "visible": false}),
        json!({"type": "exposure", "seq": 24, "levels": ["L3"]}),
        json!({"type": "isolate", "seq": 25, "on": true}),
        json!({"type": "report", "seq": 26}),
        json!({"type": "undo", "seq": 26}),
        json!({"type": "carve", "seq": 27, "tip": [10, 6, 10], "direction": [0, -1, 0], "tool": {"kind": "burr", "radius_mm": 3}}),
    ]);
    let mut handler = SessionHandler::new(SimSession::new(&model(), SessionConfig::default()).unwrap());
    let mut kinds = BTreeMap::new();
    for m in &messages {
        assert_valid(&client, m);
        for reply in handler.handle_text(&m.to_string()) {
            let v = serde_json::to_value(&reply).unwrap();
            *kinds.entry(v["type"].as_str().unwrap().to_string()).or_insert(0) += 1;
            assert_valid(&server, &v);
        }
    }
    for reply in handler.handle_text("{oops") {
        assert_valid(&server, &serde_json::to_value(&reply).unwrap());
    }
    for kind in ["ack", "carve_result", "alarm", "report", "error"] {
        assert!(kinds.contains_key(kind), "{kind} not exercised: {kinds:?}");
    }

    for bad in [
        json!({"type": "undo"}),
        json!({"type": "teleport", "seq": 1}),
        json!({"type": "carve", "seq": 1, "tip": [0, 0], "direction": [0, 0, 1]}),
        json!({"type": "tool_select", "seq": 1, "tool": {"kind": "laser"}}),
        json!({"type": "isolate", "seq": 1}),
    ] {
        assert!(!client.is_valid(&bad), "{bad}");
    }
}

#[test]
fn report_case_and_job_match_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let mut metrics = Metrics::default();
    metrics.dice.push(DiceEntry {
        structure: "L3".into(),
        label: 22,
        dice: 0.93,
        both_empty: false,
    });
    metrics.extra.insert("tre_final_mm".into(), 0.7);
    let mut timings = TimingReport::default();
    timings.record("deformable", 1.5);
    let report = emit_report(&metrics, &timings, dir.path().join("report.json")).unwrap();
    let report_schema = validator("report.schema.json");
    assert_valid(&report_schema, &serde_json::to_value(&report).unwrap());
    assert!(!report_schema.is_valid(&json!({"schema_version": "1.0"})));

    let phantom_report = {
        let case = dir.path().join("case");
        spinesim::phantom::Phantom::generate(&spinesim::phantom::PhantomParams {
            size: 24,
            deform_amp: 1.0,
            ..Default::default()
        })
        .unwrap()
        .write_case(&case)
        .unwrap();
        let mut cfg = spinesim::config::PipelineConfig::default();
        cfg.registration.iterations = 20;
        let files = spinesim::pipeline::CaseFiles::from_dir(&case).unwrap();
        spinesim::pipeline::run_pipeline(&files, dir.path().join("out"), &cfg).unwrap().report
    };
    assert!(phantom_report.metrics.tre.is_some());
    assert_valid(&report_schema, &serde_json::to_value(&phantom_report).unwrap());

    let case = CaseRecord {
        case_id: "c1".into(),
        files: ["ct", "mri", "ct_seg", "mri_seg"].iter().map(|f| (f.to_string(), format!("{f}.nii.gz"))).collect(),
        status: CaseStatus::Failed,
        artifacts: BTreeMap::new(),
        last_job: Some("j1".into()),
        failure: Some(Failure {
            stage: "deformable".into(),
            message: "non-finite value".into(),
        }),
    };
    assert_valid(&validator("case.schema.json"), &serde_json::to_value(&case).unwrap());

    let job = JobRecord {
        job_id: "j1".into(),
        case_id: "c1".into(),
        status: JobStatus::Done,
        stage: Some("evaluation".into()),
        timings: phantom_report.timings.clone(),
        metrics: Some(phantom_report.metrics.clone()),
        failure: None,
    };
    let job_schema = validator("job.schema.json");
    assert_valid(&job_schema, &serde_json::to_value(&job).unwrap());
    let mut bad = serde_json::to_value(&job).unwrap();
    bad["status"] = json!("exploded");
    assert!(!job_schema.is_valid(&bad));
}
