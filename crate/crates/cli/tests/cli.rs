use std::process::{Command, Output};

fn dfssqp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfssqp")).args(args).output().expect("spawn dfssqp")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn list_problems_shows_registry() {
    let o = dfssqp(&["list-problems"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for name in ["MARATOS", "HS48", "BT9", "BYRDSPHR", "BT1", "HS51", "BT12", "HS42"] {
        assert!(out.contains(name), "missing {name}");
    }
}

#[test]
fn small_bench_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res");
    let o = dfssqp(&[
        "bench", "--problems", "maratos,hs48", "--methods", "db-first,df-second", "--sigma2", "0,1e-4",
        "--runs", "2", "--iters", "300", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.csv", "runs.jsonl", "config.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    // header plus 2 problems x 2 methods x 2 noise levels
    assert_eq!(csv.lines().count(), 9);
    assert_eq!(stdout(&o), csv);
}

#[test]
fn bench_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = dfssqp(&[
            "bench", "--problems", "bt1", "--methods", "df-first", "--sigma2", "1e-2", "--runs", "3", "--iters", "500",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        std::fs::read(out.join("runs.jsonl")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn invalid_input_exits_2() {
    for args in [
        &["bench", "--methods", "newton", "--runs", "1", "--iters", "10"][..],
        &["bench", "--problems", "rosenbrock", "--runs", "1", "--iters", "10"][..],
        &["bench", "--problems", "maratos", "--runs", "0", "--iters", "10"][..],
        &["solve", "--problem", "nope"][..],
        &["solve", "--problem", "maratos", "--sigma2", "-1"][..],
        &["frobnicate"][..],
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut a = args.to_vec();
        let out = dir.path().to_str().unwrap().to_string();
        if a[0] == "bench" {
            a.extend(["--out", &out]);
        }
        let o = dfssqp(&a);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn all_failed_exits_3() {
    // One iteration from BT12's starting point is far from the solution.
    let dir = tempfile::tempdir().unwrap();
    let o = dfssqp(&[
        "bench", "--problems", "bt12", "--methods", "df-first", "--sigma2", "0", "--runs", "1", "--iters", "1",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn solve_prints_snapshot() {
    let o = dfssqp(&["solve", "--problem", "maratos", "--method", "db-second", "--iters", "2000"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("status"));
    assert!(out.contains("x[0]"));
    assert!(out.contains("lambda[0]"));
}

#[test]
fn solve_json_parses() {
    let o = dfssqp(&["solve", "--problem", "hs51", "--iters", "500", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["problem"], "HS51");
}

#[test]
fn bias_slope_probe_reports_two() {
    let o = dfssqp(&["diagnose", "--probe", "bias-slope"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let slope: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("slope="))
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .expect("slope line");
    assert!((slope - 2.0).abs() < 0.05);
}

#[test]
fn estimator_trace_is_csv() {
    let o = dfssqp(&["diagnose", "--probe", "estimator-trace", "--problem", "bt1", "--iters", "50", "--frozen"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("k,gradient,jacobian,hessian"));
    assert!(lines.count() > 0);
}
