use std::process::{Command, Output};

fn scalekv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalekv"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn flops_table() {
    let o = scalekv(&["flops", "-a", "2", "-K", "4", "--budget", "20"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("4,64,85,5440,1280\n"));
    assert!(text.ends_with("total,,85,5797,1621\n"));
}

#[test]
fn classify_then_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let heads = dir.path().join("heads.json");
    let heads = heads.to_str().unwrap();
    let o = scalekv(&[
        "classify",
        "--seed",
        "1",
        "--planted-fraction",
        "0.25",
        "--contextual-fraction",
        "0.25",
        "-o",
        heads,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let run = |name: &str| {
        let trace = dir.path().join(format!("{name}.json"));
        let o = scalekv(&[
            "run",
            "--seed",
            "3",
            "--planted-fraction",
            "0.25",
            "--policy",
            "head-aware",
            "--budget",
            "70",
            "--classification",
            heads,
            "--trace",
            trace.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (stdout(&o), std::fs::read(trace).unwrap())
    };
    let (csv_a, trace_a) = run("a");
    let (csv_b, trace_b) = run("b");
    assert_eq!(csv_a, csv_b);
    assert_eq!(trace_a, trace_b);
    assert!(csv_a.starts_with(
        "config_hash,rho,policy,flops,overhead_flops,peak_entries,max_abs,mean_abs,cosine\n"
    ));
}

#[test]
fn config_file_overrides_flags_except_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(
        &path,
        r#"{"schedule": {"a": 2, "K": 4},
            "model": {"layers": 1, "heads": 1, "model_dim": 4, "head_dim": 4, "seed": 1},
            "seed": 0, "policy": {"kind": "none"}}"#,
    )
    .unwrap();
    let o = scalekv(&[
        "run",
        "--seed",
        "9",
        "--layers",
        "3",
        "--config",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    assert!(row.contains(",none,5797,0,85,"), "{row}");
}

#[test]
fn exit_codes() {
    // Missing required seed: argument error.
    assert_eq!(scalekv(&["run"]).status.code(), Some(2));
    // Head-aware without a classification.
    assert_eq!(
        scalekv(&[
            "run",
            "--seed",
            "1",
            "--policy",
            "head-aware",
            "--budget",
            "40"
        ])
        .status
        .code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    assert_eq!(
        scalekv(&["run", "--seed", "1", "--config", bad.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    // Unwritable trace path.
    let missing = dir.path().join("no/such/dir/t.json");
    assert_eq!(
        scalekv(&["run", "--seed", "1", "--trace", missing.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn sweep_and_mask_emit_csv_rows() {
    let o = scalekv(&[
        "sweep",
        "--seed",
        "2",
        "--planted-fraction",
        "0.5",
        "--ratios",
        "0,0.9",
    ]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 7);
    let o = scalekv(&[
        "sweep",
        "--seed",
        "2",
        "--planted-fraction",
        "0.5",
        "-K",
        "5",
        "--kind",
        "retention",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("retention:init_recent") && text.contains("retention:intermediate"));
    let o = scalekv(&[
        "mask",
        "--seed",
        "2",
        "--mask-type",
        "all",
        "--mask-fraction",
        "0.5",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("none:masked"));
}
