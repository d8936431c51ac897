use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn i2rl(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_i2rl"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "i2rl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("grid.toml");
    fs::write(
        &path,
        r#"methods = ["batch", "incremental"]
observability = [70.0]
demo_pairs = [8]
trials = 2
seed = 3
clock = "work"
threads = 1
"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_one_row_per_method_and_trial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    i2rl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "schema_version,method,observability,demo_pairs,trial,seed,lba,ile,duration_s,work_units,\
         success,detected,timeout,sessions,final_ll,status"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(
        rows.iter()
            .all(|r| r.starts_with("1,") && r.ends_with(",ok")),
        "{rows:?}"
    );
}

#[test]
fn work_clock_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let read = |name: &str| {
        let out = dir.path().join(name);
        i2rl(&[
            "run",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--deadline-work",
            "200000",
        ]);
        fs::read(out.join("results.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn confidence_reports_bounds() {
    let out = stdout(&i2rl(&[
        "confidence",
        "--epsilon",
        "0.5",
        "--k",
        "2",
        "--discount",
        "0.5",
        "--trajectories",
        "10000",
        "--epsilon-sampling",
        "0.1",
        "--samples",
        "1000",
    ]));
    let field = |name: &str| -> f64 {
        let line = out.lines().find(|l| l.starts_with(name)).unwrap();
        line.split('=').nth(1).unwrap().trim().parse().unwrap()
    };
    // 2K·exp(−n ε² (1−γ)² / 2K²) and 2K·exp(−2 (1−γ)² ε_s² N)
    assert!((field("delta ") - 4.0 * (-10000.0f64 * 0.25 * 0.25 / 8.0).exp()).abs() < 1e-40);
    assert!((field("delta_sampling") - 4.0 * (-2.0f64 * 0.25 * 0.01 * 1000.0).exp()).abs() < 1e-15);
    assert!((field("epsilon_latent") - 0.9).abs() < 1e-12);
}

#[test]
fn confidence_inverse_query() {
    let trivial = stdout(&i2rl(&[
        "confidence",
        "--epsilon",
        "0.1",
        "--k",
        "3",
        "--discount",
        "0.9",
        "--target-delta",
        "1",
    ]));
    assert_eq!(trivial.trim(), "trajectories_needed = 0");
    let n: u64 = stdout(&i2rl(&[
        "confidence",
        "--epsilon",
        "1",
        "--k",
        "1",
        "--discount",
        "0.5",
        "--target-delta",
        "0.1",
    ]))
    .trim()
    .trim_start_matches("trajectories_needed = ")
    .parse()
    .unwrap();
    // 2·exp(−n/8) <= 0.1  ⇔  n >= 8 ln 20 ≈ 23.97
    assert_eq!(n, 24);
}

#[test]
fn demo_gen_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo.txt");
    let history = dir.path().join("history.csv");
    let gen = stdout(&i2rl(&[
        "demo-gen",
        "--trajectories",
        "4",
        "--observability",
        "70",
        "--seed",
        "5",
        "--out",
        demo.to_str().unwrap(),
    ]));
    assert!(gen.starts_with("wrote 4 trajectories"), "{gen}");
    let text = fs::read_to_string(&demo).unwrap();
    assert!(text.starts_with("# i2rl-trajectories v1\n"));
    assert_eq!(
        text.lines().filter(|l| l.starts_with("trajectory")).count(),
        4
    );

    let out = stdout(&i2rl(&[
        "replay",
        "--input",
        demo.to_str().unwrap(),
        "--observability",
        "70",
        "--history",
        history.to_str().unwrap(),
    ]));
    assert!(out.contains("sessions = 4"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("theta = [")));
    let ile: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("ile = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ile >= 0.0);
    assert_eq!(fs::read_to_string(&history).unwrap().lines().count(), 5);

    let batch = stdout(&i2rl(&[
        "replay",
        "--input",
        demo.to_str().unwrap(),
        "--observability",
        "70",
        "--method",
        "batch",
    ]));
    assert!(batch.contains("status = "), "{batch}");
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "not a trajectory file\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_i2rl"))
        .args(["replay", "--input", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
