use std::path::Path;
use std::process::{Command, Output};

fn kitsune(args: &[&str], machine_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kitsune"));
    cmd.args(args);
    match machine_env {
        Some(m) => cmd.env("KITSUNE_MACHINE", m),
        None => cmd.env_remove("KITSUNE_MACHINE"),
    };
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("g.json");
    std::fs::write(&file, "{\"nodes\": [\n  {\"id\": \"a\", \"kind\": \"Linear\", \"bogus\": 1}\n]}\n").unwrap();
    let o = kitsune(&["graph", "validate", path(&file)], None);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains(&format!("{}:2:", file.display())), "{msg}");
}

#[test]
fn validate_accepts_a_written_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("ffn.json");
    let o = kitsune(&["graph", "builtin", "transformer-ffn"], None);
    assert_eq!(o.status.code(), Some(0));
    std::fs::write(&file, &o.stdout).unwrap();
    let v = kitsune(&["graph", "validate", path(&file)], None);
    assert_eq!(v.status.code(), Some(0), "{}", stderr(&v));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["graph", "builtin", "nope"][..],
        &["graph", "validate", "/nonexistent/graph.json"],
        &["simulate", "builtin:mlp-wide-hidden", "--machine", "nope"],
    ] {
        let o = kitsune(args, None);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).starts_with("error: "), "{args:?}");
    }
}

#[test]
fn protocol_violation_exits_two() {
    let ok = kitsune(&["check-queue", "--consumers", "2", "--depth", "2", "--items", "3"], None);
    assert_eq!(ok.status.code(), Some(0));
    for fault in ["skip-consumer-check", "skip-publish-check"] {
        let o = kitsune(&["check-queue", "--fault", fault], None);
        assert_eq!(o.status.code(), Some(2), "{fault}");
    }
}

#[test]
fn machine_comes_from_flag_then_environment() {
    let sim = |extra: &[&str], env| {
        let mut args = vec!["simulate", "builtin:mlp-wide-hidden", "--mode", "bsp"];
        args.extend_from_slice(extra);
        let o = kitsune(&args, env);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        o.stdout
    };
    let default = sim(&[], None);
    let flagged = sim(&["--machine", "a100-2x-sm-l2"], None);
    assert_eq!(sim(&["--machine", "a100"], None), default);
    assert_ne!(flagged, default);
    assert_eq!(sim(&[], Some("a100-2x-sm-l2")), flagged);
    assert_eq!(sim(&["--machine", "a100"], Some("a100-2x-sm-l2")), default);
    assert_eq!(kitsune(&["simulate", "builtin:mlp-wide-hidden"], Some("bogus")).status.code(), Some(1));
}

#[test]
fn simulate_writes_trace_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.json");
    let o = kitsune(&["simulate", "builtin:splitk-reduce", "--out", path(&out)], None);
    assert_eq!(o.status.code(), Some(0));
    let trace: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(trace["mode"], "dataflow");
    assert!(!trace["events"].as_array().unwrap().is_empty());
}

#[test]
fn select_pipeline_balance_chain() {
    let dir = tempfile::tempdir().unwrap();
    let sel = dir.path().join("sel.json");
    let pipe = dir.path().join("pipe.json");
    let o = kitsune(&["select", "builtin:mlp-wide-hidden"], None);
    std::fs::write(&sel, &o.stdout).unwrap();
    let o = kitsune(&["pipeline", "builtin:mlp-wide-hidden", "--sf", path(&sel)], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    std::fs::write(&pipe, &o.stdout).unwrap();
    let o = kitsune(&["balance", path(&pipe)], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let alloc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let stages = alloc[0]["allocation"]["stages"].as_array().unwrap();
    let ctas: u64 = stages.iter().map(|s| s["ctas"].as_u64().unwrap()).sum();
    assert_eq!(ctas, 108);
}

#[test]
fn report_csv_has_geomean_row() {
    let o = kitsune(&["report", "--format", "csv"], None);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("geomean")), "{text}");
}
