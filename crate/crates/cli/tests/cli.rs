use std::fs;
use std::process::{Command, Output};

fn bamsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bamsim"))
        .args(args)
        .env("BAMSIM_THREADS", "4")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let at = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(at).unwrap().to_string()).collect()
}

#[test]
fn qd_calc_prints_the_queue_depth() {
    for (t, l, want) in [("51e6", "11e-6", "561"), ("6.35e6", "324e-6", "2057")] {
        let o = bamsim(&["qd-calc", "--t", t, "--l", l]);
        assert!(o.status.success());
        assert_eq!(stdout(&o).trim(), want);
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(bamsim(&["randbench", "--no_such_flag"]).status.code(), Some(2));
    assert_eq!(bamsim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(bamsim(&["qd-calc", "--t", "-1", "--l", "1"]).status.code(), Some(2));
    let o = bamsim(&["randbench", "--mode", "model", "--page_size", "1000"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    let o = bamsim(&["bfs", "--mode", "model"]);
    assert_eq!(o.status.code(), Some(2), "no graph given");
}

#[test]
fn missing_input_file_is_a_runtime_fault() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.csr");
    let o = bamsim(&["cc", "--graph", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn model_randbench_is_byte_identical_across_runs() {
    let args = [
        "randbench", "--mode", "model", "--n_ctrls", "10", "--num_queues", "128",
        "--threads", "65536", "--seed", "3",
    ];
    let a = bamsim(&args);
    let b = bamsim(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let iops: f64 = column(&stdout(&a), "modeled_iops")[0].parse().unwrap();
    assert!((iops - 45.8e6).abs() < 0.1 * 45.8e6, "{iops}");
}

#[test]
fn csv_goes_to_the_out_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("metrics.csv");
    let o = bamsim(&[
        "vecadd", "--mode", "model", "--n", "20000", "--scan", "tiling",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("workload,mode,devices,queues,depth,line_size,cache_bytes"));
    assert_eq!(column(&csv, "workload"), ["vecadd-tiling"]);
}

#[test]
fn generated_graph_files_are_deterministic_and_runnable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csr");
    let b = dir.path().join("b.csr");
    for p in [&a, &b] {
        let o = bamsim(&[
            "gen-graph", "--kind", "kron", "--nodes", "3000", "--avg_degree", "8",
            "--seed", "4", "--out", p.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let o = bamsim(&["bfs", "--graph", a.to_str().unwrap(), "--n_ctrls", "2", "--threads", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(column(&stdout(&o), "workload"), ["bfs"]);
}

#[test]
fn analytics_over_a_generated_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("trips.bin");
    let o = bamsim(&[
        "gen-dataset", "--rows", "40000", "--selectivity", "0.001", "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let o = bamsim(&[
        "analytics", "--dataset", data.to_str().unwrap(), "--level", "2", "--scan", "ondemand",
        "--mode", "model",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let amp: f64 = column(&stdout(&o), "amplification")[0].parse().unwrap();
    assert!(amp > 1.0 && amp < 3.0, "{amp}");
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{
            "devices": [{"profile": "samsung-pm1735", "count": 2}],
            "queue": {"num_queues": 16, "queue_depth": 256},
            "mode": "model",
            "seed": 1,
            "workload": {"kind": "randbench", "threads": 2048, "access_size": 4096}
        }"#,
    )
    .unwrap();
    let path = cfg.to_str().unwrap();
    let o = bamsim(&["randbench", "--config", path, "--queue_depth", "512"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    assert_eq!(column(&csv, "devices"), ["2"]);
    assert_eq!(column(&csv, "queues"), ["16"]);
    assert_eq!(column(&csv, "depth"), ["512"]);
    assert_eq!(column(&csv, "threads"), ["2048"]);
    assert_eq!(column(&csv, "bytes_transferred"), [(2048u64 * 4 * 4096).to_string()]);

    // A config for another workload, or with unknown keys, is a usage error.
    assert_eq!(bamsim(&["bfs", "--config", path]).status.code(), Some(2));
    fs::write(&cfg, r#"{"workload": {"kind": "randbench", "thread": 4}}"#).unwrap();
    assert_eq!(bamsim(&["randbench", "--config", path]).status.code(), Some(2));
}

#[test]
fn queue_sweep_degrades_at_forty_pairs_and_below() {
    let o = bamsim(&[
        "sweep", "--knob", "num_queues", "--values", "128,64,40,8", "--mode", "model",
        "--page_size", "4096", "--threads", "65536",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let iops: Vec<f64> = column(&stdout(&o), "modeled_iops")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(iops.len(), 4);
    assert!((iops[1] - iops[0]).abs() < 0.02 * iops[0], "flat above 40: {iops:?}");
    // 40 pairs sit at the knee; fewer fall below it.
    assert!(iops[2] <= iops[1] && iops[3] < 0.5 * iops[2], "{iops:?}");
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert_eq!(stderr.matches("relative=").count(), 4);
}
