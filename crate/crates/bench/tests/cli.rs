use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edat-bench"))
        .args(args)
        .env_remove("EDAT_TRANSPORT")
        .output()
        .expect("run edat-bench")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bfs_reports_teps_and_valid() {
    let o = bench(&["bfs", "--scale", "10", "--edge-factor", "16", "--seed", "1", "--ranks", "4", "--transport", "loopback"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.lines().any(|l| l == "VALID"), "{out}");
    let teps: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("TEPS="))
        .expect("TEPS line")
        .parse()
        .unwrap();
    assert!(teps > 0.0);
}

#[test]
fn bfs_json_metrics() {
    let o = bench(&["bfs", "--scale", "8", "--ranks", "2", "--workers", "2", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["valid"], true);
    assert_eq!(v["traversed_edges"], v["oracle_traversed_edges"]);
    assert_eq!(v["ranks"], 2);
}

#[test]
fn reduce_demo_prints_rank_sum() {
    let o = bench(&["reduce-demo", "--ranks", "4"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "6");
}

#[test]
fn barrier_demo_passes() {
    let o = bench(&["barrier-demo", "--ranks", "3", "--det-seed", "5"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "barrier task ran once per rank after all fires");
}

#[test]
fn simple_example_prints_133() {
    let o = bench(&["simple-example", "--det-seed", "2"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "sum=133");
}

#[test]
fn usage_errors_exit_nonzero() {
    assert_eq!(bench(&["bfs", "--ranks", "many"]).status.code(), Some(2));
    assert_eq!(bench(&["bogus"]).status.code(), Some(2));
    assert_eq!(bench(&["bfs", "--transport", "carrier-pigeon"]).status.code(), Some(2));
    assert_eq!(bench(&["simple-example", "--ranks", "3"]).status.code(), Some(2));
    assert_eq!(bench(&["bfs", "--transport", "tcp", "--rank", "0"]).status.code(), Some(2));
}

#[test]
fn conformance_subcommand_passes() {
    let o = bench(&["conformance", "--cases", "500", "--seeds", "50", "--ordering-runs", "5"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.contains("matcher: 500 cases"), "{out}");
}
