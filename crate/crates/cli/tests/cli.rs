use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qkdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = qkdnet(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn code(args: &[&str]) -> i32 {
    qkdnet(args).status.code().unwrap()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn grid_plan_and_conjugate() {
    let csv = ok(&["grid", "plan"]);
    assert!(csv.starts_with("pair_id,"));
    assert_eq!(csv.lines().count(), 28);
    let json = ok(&["grid", "plan", "--spacing", "100", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["pairs"].as_array().unwrap().len(), 54);
    let out = ok(&["grid", "conjugate", "--nm", "1553.3"]);
    assert!(out.contains("1556."), "{out}");
    assert_eq!(code(&["grid", "plan", "--spacing", "75"]), 1);
}

#[test]
fn switch_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("switch.json");
    let s = p(&state);
    ok(&["net", "init", "--state", s, "--band-nm", "1551.5", "1558.5"]);
    for u in ["alice", "bob", "carol", "dave", "erin", "frank"] {
        ok(&["net", "register", "--state", s, u]);
    }
    assert_eq!(code(&["net", "register", "--state", s, "alice"]), 1);
    ok(&["net", "connect", "--state", s, "alice", "bob"]);
    ok(&["net", "connect", "--state", s, "carol", "dave"]);
    let queued = ok(&["net", "connect", "--state", s, "erin", "frank"]);
    assert!(queued.to_lowercase().contains("wait"), "{queued}");
    assert_eq!(code(&["net", "connect", "--state", s, "alice", "carol"]), 1);
    assert_eq!(code(&["net", "connect", "--state", s, "alice", "zed"]), 1);
    ok(&["net", "disconnect", "--state", s, "0"]);
    let status = ok(&["net", "status", "--state", s]);
    let v: serde_json::Value = serde_json::from_str(&status).unwrap();
    // erin and frank (ids 4 and 5) inherit the freed pair.
    assert_eq!(v["links"][0]["pair_id"], 0);
    assert_eq!((v["links"][0]["user_a"].clone(), v["links"][0]["user_b"].clone()), (4.into(), 5.into()));
    assert_eq!(v["waitlist_depth"], 0);
    assert_eq!(code(&["net", "disconnect", "--state", s, "7"]), 1);

    std::fs::write(&state, "{ not json").unwrap();
    assert_eq!(code(&["net", "status", "--state", s]), 2);
}

#[test]
fn state_metrics() {
    let out = ok(&["state", "metrics", "--colored", "0.978"]);
    assert!(out.contains("0.989"), "{out}");
    assert_eq!(code(&["state", "metrics", "--werner", "1.5"]), 1);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("rho.txt");
    std::fs::write(&f, "1 0 0 0\n0 0 0 0\n0 0 0 0\n0 0 0 0\n").unwrap();
    let out = ok(&["state", "metrics", "--file", p(&f)]);
    assert!(out.contains("tangle"), "{out}");
    std::fs::write(&f, "1 0 0 0\n0 1 0 0\n0 0 0 0\n0 0 0 0\n").unwrap();
    assert_eq!(code(&["state", "metrics", "--file", p(&f)]), 1);
}

#[test]
fn simulate_and_analyze_tags() {
    let dir = tempfile::tempdir().unwrap();
    let tags = dir.path().join("run.qtt");
    let cfg = config("link_1553.cfg");
    ok(&["sim", "run", "--config", &cfg, "--out", p(&tags), "--duration", "20", "--split"]);
    let a = dir.path().join("run_a.qtt");
    let b = dir.path().join("run_b.qtt");
    assert!(a.exists() && b.exists());

    let report = dir.path().join("keys.json");
    let text = ok(&["keys", "analyze", "--a", p(&tags), "--b", p(&tags), "--t-acq", "20", "--json", p(&report)]);
    assert!(text.to_lowercase().contains("secure"), "{text}");
    let split = ok(&["keys", "analyze", "--a", p(&a), "--b", p(&b), "--t-acq", "20"]);
    assert_eq!(text, split);

    let hist = dir.path().join("hist.csv");
    ok(&["keys", "histogram", "--a", p(&tags), "--b", p(&tags), "--out", p(&hist)]);
    assert!(std::fs::read_to_string(&hist).unwrap().starts_with("bin_a_ps,bin_b_ps,count"));
    let series = ok(&["keys", "series", "--a", p(&tags), "--b", p(&tags), "--window", "5"]);
    assert_eq!(series.lines().count(), 5);

    let proj = ok(&["scenario", "improve", "--base", p(&report), "--channels", "20"]);
    assert!(proj.contains("3600"), "{proj}");
    assert_eq!(code(&["scenario", "improve", "--base", p(&report), "--factors", "warp"]), 1);

    std::fs::write(&tags, b"QTT1garbage").unwrap();
    assert_eq!(code(&["keys", "analyze", "--a", p(&tags), "--b", p(&tags), "--t-acq", "1"]), 2);
    let missing: PathBuf = dir.path().join("none.qtt");
    assert_eq!(code(&["keys", "analyze", "--a", p(&missing), "--b", p(&missing), "--t-acq", "1"]), 2);
}

#[test]
fn scenario_validate_and_run() {
    ok(&["scenario", "validate", "--config", &config("three_links.cfg")]);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(
        &bad,
        "[network]\nusers = [\"a\", \"b\"]\n[source]\nmu = -1.0\n[[link]]\nusers = [\"a\", \"c\"]\n",
    )
    .unwrap();
    let o = qkdnet(&["scenario", "validate", "--config", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr).into_owned() + &stdout(&o);
    assert!(err.contains("mu") && err.contains('c'), "{err}");
    std::fs::write(&bad, "[sourc]\n").unwrap();
    assert_eq!(code(&["scenario", "validate", "--config", p(&bad)]), 1);

    let cfg = dir.path().join("short.cfg");
    let text = std::fs::read_to_string(config("three_links.cfg"))
        .unwrap()
        .replace("duration_s = 100.0", "duration_s = 4.0")
        .replace("window_s = 50.0", "window_s = 2.0");
    std::fs::write(&cfg, text).unwrap();
    let out1 = dir.path().join("o1");
    let out2 = dir.path().join("o2");
    ok(&["run", "--config", p(&cfg), "--out-dir", p(&out1)]);
    ok(&["run", "--config", p(&cfg), "--out-dir", p(&out2)]);
    for f in ["plan.csv", "links.csv", "link0_qber_series.csv", "link2_histogram.csv"] {
        assert_eq!(
            std::fs::read(out1.join(f)).unwrap(),
            std::fs::read(out2.join(f)).unwrap(),
            "{f}"
        );
    }
    let report = |d: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
        v["generated_at_unix_s"] = serde_json::Value::Null;
        v
    };
    assert_eq!(report(&out1), report(&out2));
    assert_eq!(report(&out1)["links"].as_array().unwrap().len(), 3);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["grid", "plan", "--bogus"]), 1);
    assert_eq!(code(&["--help"]), 0);
}
