use std::path::Path;
use std::process::Command;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cogtrace(ws: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_cogtrace"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .output()
        .expect("spawn cogtrace");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

const LOG: &str = "\
session,user,ts,action,content,doc,answer
s1,u1,1000,QUERY,best espresso machine under $500,,false
s1,u1,2000,CLICK,,d1,false
s2,u2,1000,QUERY,laptops,,false
s2,u2,2000,QUERY,\"lightweight laptops, for travel\",,false
s2,u2,3000,CLICK,,d2,false
s3,u3,1000,QUERY,q1,,false
s3,u3,2000,QUERY,q2,,false
s3,u3,3000,QUERY,q3,,false
s4,u4,1000,QUERY,capital of peru,,true
";

const MAPPING: &str = r#"{
  "session_id_col": "session",
  "user_id_col": "user",
  "timestamp_col": "ts",
  "timestamp_format": "epoch_ms",
  "action_col": "action",
  "content_col": "content",
  "content_id_col": "doc",
  "answer_present_col": "answer"
}"#;

fn ingest(dir: &Path) -> (std::path::PathBuf, String) {
    let ws = dir.join("ws");
    std::fs::write(dir.join("log.csv"), LOG).unwrap();
    std::fs::write(dir.join("mapping.json"), MAPPING).unwrap();
    let log = dir.join("log.csv");
    let mapping = dir.join("mapping.json");
    let r = cogtrace(
        &ws,
        &["ingest", "--input", log.to_str().unwrap(), "--mapping", mapping.to_str().unwrap(), "--segment", "by-id"],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    (ws, r.stdout.trim().to_string())
}

#[test]
fn heuristic_label_then_export() {
    let tmp = tempfile::tempdir().unwrap();
    let (ws, id) = ingest(tmp.path());
    assert_eq!(id, "ds-0001");
    let r = cogtrace(&ws, &["label"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(report["sessions"], 4);

    let r = cogtrace(&ws, &["export"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let lines: Vec<&str> = r.stdout.lines().collect();
    assert_eq!(lines[0], "session_id,event_timestamp,action_type,content_id,cognitive_label,judge_justification");
    assert_eq!(lines.len(), 10);
    let mut reader = csv::Reader::from_reader(r.stdout.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(&rows[3][3], "lightweight laptops, for travel");
    let labels: Vec<&str> = rows.iter().map(|row| &row[4]).collect();
    assert_eq!(
        labels,
        [
            "FollowingScent",
            "ApproachingSource",
            "PoorScent",
            "DietEnrichment",
            "ApproachingSource",
            "PoorScent",
            "PoorScent",
            "LeavingPatch",
            "ForagingSuccess",
        ]
    );

    let out = tmp.path().join("out.csv");
    let r = cogtrace(&ws, &["export", "--extended", "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.is_empty());
    let written = std::fs::read_to_string(out).unwrap();
    assert!(written.lines().next().unwrap().starts_with("session_id,event_timestamp"));
}

#[test]
fn ingest_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let (ws, first) = ingest(tmp.path());
    let (_, second) = ingest(tmp.path());
    assert_eq!(first, second);
    let r = cogtrace(&ws, &["synth", "--sessions", "50", "--seed", "1"]);
    assert_eq!(r.stdout.trim(), "ds-0002");
}

#[test]
fn export_before_labeling_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (ws, _) = ingest(tmp.path());
    let r = cogtrace(&ws, &["export"]);
    assert_eq!(r.code, 2);
    let r = cogtrace(&ws, &["export", "--force"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
}

#[test]
fn empty_workspace_reports_unknown_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let r = cogtrace(&tmp.path().join("ws"), &["export"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("unknown dataset"), "{}", r.stderr);
    let r = cogtrace(&tmp.path().join("ws"), &["--dataset", "ds-9999", "flag"]);
    assert_eq!(r.code, 2);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    assert_eq!(cogtrace(&ws, &["frobnicate"]).code, 1);
    assert_eq!(cogtrace(&ws, &["flag", "--rate", "lots"]).code, 1);
    assert_eq!(cogtrace(&ws, &["label", "--engine", "oracle"]).code, 1);
    assert_eq!(cogtrace(&ws, &["forecast", "--features", "pixels"]).code, 1);
    let help = cogtrace(&ws, &["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.stdout.contains("forecast"));
}

#[test]
fn mock_agents_then_flag_then_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let (ws, _) = ingest(tmp.path());
    let r = cogtrace(&ws, &["label", "--engine", "agents", "--backend", "mock", "--max-concurrency", "2"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = cogtrace(&ws, &["flag"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    // ceil(0.01 * 9 transcripts) = 1
    assert_eq!(r.stdout.trim(), "flagged 1 events");

    let gold = tmp.path().join("gold.csv");
    std::fs::write(
        &gold,
        "session_id,event_index,annotator,label\n\
         s1,0,a,FollowingScent\ns1,0,b,FollowingScent\n\
         s1,1,a,ApproachingSource\ns1,1,b,ApproachingSource\n\
         s3,0,a,PoorScent\ns3,0,b,FollowingScent\n",
    )
    .unwrap();
    let r = cogtrace(&ws, &["agree", "--gold", gold.to_str().unwrap(), "--json"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(report["gold_items"], 3);
    assert!(report["gold_alpha"].is_number());
    let r = cogtrace(&ws, &["agree", "--gold", gold.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(!r.stdout.is_empty());
}

#[test]
fn config_with_inline_credentials_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (ws, _) = ingest(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"http": {"api_key": "sk-secret"}}"#).unwrap();
    let r = cogtrace(&ws, &["label", "--engine", "agents", "--backend", "http", "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 2);
    assert!(!r.stderr.contains("sk-secret"), "{}", r.stderr);
}

#[test]
fn synth_then_forecast_labels_beats_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    let r = cogtrace(&ws, &["synth", "--sessions", "500", "--seed", "7"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = cogtrace(&ws, &["forecast", "--features", "labels", "--seed", "7"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: serde_json::Value = serde_json::from_str(&r.stdout).unwrap();
    let configs = report["configs"].as_array().unwrap();
    assert_eq!(configs.len(), 1);
    assert_eq!(configs[0]["name"], "labels-only");
    assert!(configs[0]["auc"].as_f64().unwrap() > 0.75);
    assert!(r.stderr.contains("AUC"));

    let out = tmp.path().join("report.json");
    let r = cogtrace(&ws, &["forecast", "--task", "recovery", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(report["configs"].as_array().unwrap().len(), 3);
}

#[test]
fn forecast_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = tmp.path().join("ws");
    cogtrace(&ws, &["synth", "--sessions", "300", "--seed", "3"]);
    let a = cogtrace(&ws, &["forecast", "--seed", "3"]);
    let b = cogtrace(&ws, &["forecast", "--seed", "3"]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn compact_keeps_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let (ws, _) = ingest(tmp.path());
    cogtrace(&ws, &["label"]);
    cogtrace(&ws, &["label", "--engine", "agents"]);
    let before = cogtrace(&ws, &["export"]).stdout;
    let r = cogtrace(&ws, &["compact"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(cogtrace(&ws, &["export"]).stdout, before);
}
