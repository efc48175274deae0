use std::path::Path;
use std::process::{Command, Output};

use gat_mamba::io::{directory_digest, read_metrics_csv};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gat-mamba"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        format!("nodes_min = 8\nnodes_max = 12\nd_uni_hidden = 8\nmlp_hidden = 8\nssm_state = 4\nmax_epochs = 2\nlr = 1e-3\n{extra}"),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_synthetic_is_deterministic_in_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    for (dir, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        ok(&[
            "--config",
            &cfg,
            "--seed",
            seed,
            "gen-synthetic",
            "--out",
            s(dir),
            "--patients",
            "12",
        ]);
    }
    let (da, db, dc) = (
        directory_digest(&a).unwrap(),
        directory_digest(&b).unwrap(),
        directory_digest(&c).unwrap(),
    );
    assert_eq!(da, db);
    assert_ne!(da, dc);
}

#[test]
fn train_evaluate_and_stratify_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let data = tmp.path().join("data");
    let run_dir = tmp.path().join("run");
    let eval_dir = tmp.path().join("eval");
    ok(&[
        "--config",
        &cfg,
        "gen-synthetic",
        "--out",
        s(&data),
        "--patients",
        "40",
    ]);
    let out = ok(&[
        "--config",
        &cfg,
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run_dir),
        "--baseline",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean c_index"));
    for f in [
        "config.txt",
        "folds.csv",
        "metrics.csv",
        "risks.csv",
        "baseline_metrics.csv",
    ] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    ok(&[
        "evaluate",
        "--data",
        s(&data),
        "--run",
        s(&run_dir),
        "--out",
        s(&eval_dir),
    ]);
    let trained = read_metrics_csv(&run_dir.join("metrics.csv")).unwrap();
    let evaluated = read_metrics_csv(&eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(evaluated.len(), 5);
    for (a, b) in trained.iter().zip(&evaluated) {
        assert_eq!(a.c_index, b.c_index);
    }
    let strat = tmp.path().join("strat");
    ok(&[
        "stratify",
        "--data",
        s(&data),
        "--run",
        s(&run_dir),
        "--out",
        s(&strat),
    ]);
    let rows = std::fs::read_to_string(strat.join("strata.csv")).unwrap();
    assert_eq!(rows.lines().count(), 41);
}

#[test]
fn train_without_events_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let mut w = csv::Writer::from_path(data.join("patients.csv")).unwrap();
    w.write_record(["patient_id", "graph_dir", "event", "time_days"])
        .unwrap();
    for p in 0..4 {
        let dir = format!("graphs/P{p}");
        std::fs::create_dir_all(data.join(&dir)).unwrap();
        std::fs::write(
            data.join(&dir).join("nodes.csv"),
            "node_id,row,col,subtype,f0,f1\n0,0,0,1,0.1,0.2\n1,0,1,4,0.3,-0.1\n",
        )
        .unwrap();
        w.write_record([format!("P{p}"), dir, "0".into(), "100".into()])
            .unwrap();
    }
    w.flush().unwrap();
    let out = run(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no events"), "{err}");
}

#[test]
fn malformed_nodes_file_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let nodes = tmp.path().join("nodes.csv");
    std::fs::write(
        &nodes,
        "node_id,row,col,subtype,f0\n0,0,0,1,0.5\n1,0,1,9,0.5\n",
    )
    .unwrap();
    let out = run(&[
        "build-graph",
        "--nodes",
        s(&nodes),
        "--out",
        s(&tmp.path().join("g")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nodes.csv:3"), "{err}");
}

#[test]
fn build_graph_writes_edges_and_encodings() {
    let tmp = tempfile::tempdir().unwrap();
    let nodes = tmp.path().join("nodes.csv");
    std::fs::write(
        &nodes,
        "node_id,row,col,subtype,f0,f1\n0,1,0,1,0.5,1\n1,0,0,5,-0.5,2\n2,0,1,4,0.1,0\n",
    )
    .unwrap();
    let g = tmp.path().join("g");
    ok(&[
        "build-graph",
        "--nodes",
        s(&nodes),
        "--out",
        s(&g),
        "--k",
        "2",
    ]);
    let edges = std::fs::read_to_string(g.join("edges.csv")).unwrap();
    assert_eq!(edges.lines().count(), 1 + 9);
    let pe = std::fs::read_to_string(g.join("pe.csv")).unwrap();
    assert_eq!(pe.lines().count(), 4);
}

#[test]
fn sample_tiles_keeps_every_patient() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let data = tmp.path().join("data");
    let out = tmp.path().join("sampled");
    ok(&[
        "--config",
        &cfg,
        "gen-synthetic",
        "--out",
        s(&data),
        "--patients",
        "6",
    ]);
    ok(&[
        "sample-tiles",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--sampling",
        "random_pct",
        "--pct",
        "50",
    ]);
    let a = gat_mamba::io::load_dataset(&data, 8).unwrap();
    let b = gat_mamba::io::load_dataset(&out, 8).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        let (nx, ny) = (x.graphs[0].n_nodes(), y.graphs[0].n_nodes());
        assert_eq!(ny, (nx as f64 * 0.5).ceil() as usize);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--ablation", "both"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_reported_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "lr = 1e-3\nlearning_rate = 2\n").unwrap();
    let out = run(&[
        "--config",
        s(&cfg),
        "gen-synthetic",
        "--out",
        s(&tmp.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.cfg:2"));
}
