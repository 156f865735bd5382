use std::path::Path;
use std::process::{Command, Output};

fn fedfreq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedfreq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fedfreq(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    fedfreq(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let agg = tmp.path().join("agg");

    ok(&["synth-data", "--scale", "0.1", "--seed", "3", "--clients", "2", "--out-dir", p(&data)]);
    for f in ["client_A.fsd", "client_B.fsd", "ood.fsd", "profiles.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let cfg = tmp.path().join("exp.cfg");
    std::fs::write(&cfg, "strategy = PFA_DET\nK = 2\nE = 2\nT = 6\nseed = 3\n").unwrap();
    let table = ok(&["run", "--config", p(&cfg), "--data-dir", p(&data), "--out-dir", p(&run)]);
    assert!(table.contains("PFA_DET"));
    let curves = std::fs::read_to_string(run.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 6);
    assert_eq!(curves.lines().filter(|l| l.ends_with(",1")).count(), 2 * 3);
    let echo = std::fs::read_to_string(run.join("config.echo")).unwrap();
    assert!(echo.contains("strategy = PFA_DET") && echo.contains("T = 6"));
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("results.json")).unwrap()).unwrap();
    assert_eq!(results["aggregation_events"], 3);
    assert_eq!(results["clients"].as_array().unwrap().len(), 2);

    let report = ok(&["report", p(&run)]);
    assert!(report.contains("F1:avg") && report.contains("boundary change per client"));

    let (c0, c1) = (run.join("final_client0.ckpt"), run.join("final_client1.ckpt"));
    ok(&["aggregate", "--strategy", "PFA", "--r", "0.4", "--out-dir", p(&agg), p(&c0), p(&c1)]);
    assert!(agg.join("agg_0.ckpt").exists() && agg.join("agg_1.ckpt").exists());
    ok(&["aggregate", "--strategy", "FEDAVG", "--out-dir", p(&agg), p(&c0), p(&c1)]);
    assert!(agg.join("global.ckpt").exists());

    let scores = ok(&["eval", "--checkpoint", p(&run.join("best_client0.ckpt")), "--data", p(&data.join("client_A.fsd"))]);
    let v: serde_json::Value = serde_json::from_str(&scores).unwrap();
    assert!(v["macro_f1"].as_f64().unwrap() >= 0.0);

    // Exit codes: config 2, data 3, IO 4.
    assert_eq!(code(&["aggregate", "--strategy", "PFA", "--out-dir", p(&agg), p(&c0), p(&c1)]), 2);
    let bad_cfg = tmp.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "T = 7\n").unwrap();
    assert_eq!(code(&["run", "--config", p(&bad_cfg)]), 2);
    std::fs::write(&bad_cfg, "colour = red\n").unwrap();
    assert_eq!(code(&["run", "--config", p(&bad_cfg)]), 2);
    let broken = tmp.path().join("broken.ckpt");
    let mut bytes = std::fs::read(&c0).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&broken, bytes).unwrap();
    assert_eq!(code(&["eval", "--checkpoint", p(&broken), "--data", p(&data.join("client_A.fsd"))]), 3);
    assert_eq!(code(&["eval", "--checkpoint", p(&tmp.path().join("missing.ckpt")), "--data", p(&data.join("client_A.fsd"))]), 4);
    assert_eq!(code(&["synth-data", "--scale", "0.001", "--out-dir", p(&data)]), 3);
}
