use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn presets_list_names_both_presets() {
    let out = bench().args(["presets", "list"]).output().unwrap();
    assert!(out.status.success());
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.lines().any(|l| l.starts_with("default")));
    assert!(s.lines().any(|l| l.starts_with("fig3b")));
}

#[test]
fn run_writes_csv_with_exact_header() {
    let dir = std::env::temp_dir().join(format!("vqp-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let out = dir.join("single.csv");
    let cfg = dir.join("cost.conf");
    std::fs::write(&cfg, "# faster control unit\ncreate_qp_ns = 200us\nbgd.threshold = 10\n").unwrap();
    let st = bench()
        .args(["run", "--scenario", "single_connect", "--preset", "fig3b", "--clients", "2"])
        .args(["--servers", "1", "--payload", "0", "--baseline", "l", "--seed", "3"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("scenario,baseline,clients,payload,p50_ns,p99_ns,p999_ns,throughput_per_s,wire_ops,mem_bytes")
    );
    assert!(lines.next().unwrap().starts_with("single_connect,lite,2,0,"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bad_arguments_fail() {
    assert!(!bench().args(["run", "--scenario", "nope"]).output().unwrap().status.success());
    assert!(!bench()
        .args(["run", "--scenario", "data_path", "--baseline", "x"])
        .output()
        .unwrap()
        .status
        .success());
    assert!(!bench()
        .args(["run", "--scenario", "data_path", "--preset", "missing"])
        .output()
        .unwrap()
        .status
        .success());
    let dir = std::env::temp_dir().join(format!("vqp-cli-bad-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("bad.conf");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let st = bench()
        .args(["run", "--scenario", "data_path", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!st.status.success());
    std::fs::remove_dir_all(&dir).ok();
}
