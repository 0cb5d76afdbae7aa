//! End-to-end pipeline smoke test and exit-code contract.

use std::path::Path;
use std::process::Output;
use std::time::{Duration, Instant};

fn run(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_schedrank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exists(path: &Path) {
    assert!(path.exists(), "missing artifact {}", path.display());
}

#[test]
fn full_pipeline_smoke() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // synthetic data for two correlated platforms
    let gen = root.join("gen");
    assert_ok(&run(&[
        "gen-synthetic",
        "--out",
        gen.to_str().unwrap(),
        "--seed",
        "1",
        "--subgraphs",
        "10",
        "--candidates",
        "40",
        "--workloads",
        "2",
        "--hardware",
        "hw_a,hw_b",
        "--correlation",
        "0.95",
    ]));
    let dataset_a = gen.join("dataset_hw_a.jsonl");
    let dataset_b = gen.join("dataset_hw_b.jsonl");
    exists(&dataset_a);
    exists(&dataset_b);
    exists(&gen.join("workload_spec.json"));

    let small = [
        "--set",
        "feature.sequence_length=12",
        "--set",
        "feature.embedding_size=20",
        "--set",
        "model.hidden_dim=16",
        "--set",
        "model.attention_heads=4",
        "--set",
        "train.batch_groups=4",
    ];

    // stats
    let stats = root.join("stats");
    let out = run(&[
        "stats",
        "--dataset",
        dataset_a.to_str().unwrap(),
        "--out",
        stats.to_str().unwrap(),
        "--set",
        "feature.sequence_length=12",
        "--set",
        "feature.embedding_size=20",
    ]);
    assert_ok(&out);
    // histogram counts sum to the record count
    let histogram = std::fs::read_to_string(stats.join("length_histogram.csv")).unwrap();
    let total: u64 = histogram
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 400);

    // featurize
    let feat = root.join("feat");
    let mut args = vec![
        "featurize",
        "--dataset",
        dataset_a.to_str().unwrap(),
        "--out",
        feat.to_str().unwrap(),
        "--seed",
        "2",
    ];
    args.extend_from_slice(&small[..4]);
    assert_ok(&run(&args));
    exists(&feat.join("features.bin"));
    exists(&feat.join("token_table.json"));
    exists(&feat.join("norm_stats.json"));

    // single-task training (2 epochs)
    let train = root.join("train");
    let mut args = vec![
        "train",
        "--dataset",
        dataset_a.to_str().unwrap(),
        "--out",
        train.to_str().unwrap(),
        "--seed",
        "3",
        "--epochs",
        "2",
    ];
    args.extend_from_slice(&small);
    assert_ok(&run(&args));
    exists(&train.join("checkpoint/manifest.json"));
    exists(&train.join("checkpoint/weights.bin"));
    exists(&train.join("history.csv"));
    exists(&train.join("run.json"));

    // fine-tune from that checkpoint on platform b
    let ft = root.join("ft");
    assert_ok(&run(&[
        "train",
        "--dataset",
        dataset_b.to_str().unwrap(),
        "--out",
        ft.to_str().unwrap(),
        "--seed",
        "4",
        "--epochs",
        "1",
        "--init-from",
        train.join("checkpoint").to_str().unwrap(),
    ]));

    // multi-task training over both platforms
    let mtl = root.join("mtl");
    let mut args = vec![
        "train-mtl",
        "--dataset",
        dataset_a.to_str().unwrap(),
        "--dataset",
        dataset_b.to_str().unwrap(),
        "--target-task",
        "hw_b",
        "--out",
        mtl.to_str().unwrap(),
        "--seed",
        "5",
        "--epochs",
        "2",
    ];
    args.extend_from_slice(&small);
    assert_ok(&run(&args));
    exists(&mtl.join("checkpoint/manifest.json"));

    // evaluate both checkpoints
    let eval = root.join("eval");
    assert_ok(&run(&[
        "eval",
        "--checkpoint",
        train.join("checkpoint").to_str().unwrap(),
        "--dataset",
        dataset_a.to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
        "--split",
        "val",
        "--split-file",
        train.join("split.json").to_str().unwrap(),
    ]));
    exists(&eval.join("report.csv"));
    let eval_mtl = root.join("eval_mtl");
    assert_ok(&run(&[
        "eval",
        "--checkpoint",
        mtl.join("checkpoint").to_str().unwrap(),
        "--dataset",
        dataset_b.to_str().unwrap(),
        "--out",
        eval_mtl.to_str().unwrap(),
        "--split",
        "val",
        "--split-file",
        mtl.join("split.json").to_str().unwrap(),
        "--target-task",
        "hw_b",
    ]));

    // a short model-guided search run
    let search = root.join("search");
    assert_ok(&run(&[
        "search",
        "--checkpoint",
        train.join("checkpoint").to_str().unwrap(),
        "--workload-spec",
        gen.join("workload_spec.json").to_str().unwrap(),
        "--out",
        search.to_str().unwrap(),
        "--hardware",
        "hw_a",
        "--rounds",
        "3",
        "--measure-per-round",
        "5",
        "--seed",
        "6",
        "--set",
        "search.pool=32",
        "--set",
        "search.evolve_iters=1",
    ]));
    let trajectory = std::fs::read_to_string(search.join("trajectory.csv")).unwrap();
    assert_eq!(trajectory.lines().count(), 4); // header + 3 rounds

    assert!(
        start.elapsed() < Duration::from_secs(300),
        "smoke pipeline exceeded its five-minute budget: {:?}",
        start.elapsed()
    );
}

#[test]
fn exit_codes_by_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // usage (2): missing dataset file
    let out = run(&[
        "stats",
        "--dataset",
        root.join("absent.jsonl").to_str().unwrap(),
        "--out",
        root.join("o1").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // usage (2): eval without a checkpoint argument (clap rejects it)
    let out = run(&[
        "eval",
        "--dataset",
        root.join("absent.jsonl").to_str().unwrap(),
        "--out",
        root.join("o2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // usage (2): unknown config key
    let out = run(&[
        "stats",
        "--dataset",
        root.join("absent.jsonl").to_str().unwrap(),
        "--out",
        root.join("o3").to_str().unwrap(),
        "--set",
        "bogus.key=1",
    ]);
    assert_eq!(out.status.code(), Some(2));

    // data (3): malformed record
    let bad = root.join("bad.jsonl");
    std::fs::write(&bad, "{not json}\n").unwrap();
    let out = run(&[
        "stats",
        "--dataset",
        bad.to_str().unwrap(),
        "--out",
        root.join("o4").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // data (3): negative latency
    let neg = root.join("neg.jsonl");
    std::fs::write(
        &neg,
        r#"{"subgraph_id":"s","workload":"w","hardware_id":"h","latency":-1,"primitives":[]}"#,
    )
    .unwrap();
    let out = run(&[
        "stats",
        "--dataset",
        neg.to_str().unwrap(),
        "--out",
        root.join("o5").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    // numeric (4): diverging loss
    let gen = root.join("gen");
    assert_ok(&run(&[
        "gen-synthetic",
        "--out",
        gen.to_str().unwrap(),
        "--seed",
        "1",
        "--subgraphs",
        "4",
        "--candidates",
        "10",
        "--workloads",
        "1",
        "--hardware",
        "hw_a",
    ]));
    let out = run(&[
        "train",
        "--dataset",
        gen.join("dataset_hw_a.jsonl").to_str().unwrap(),
        "--out",
        root.join("o6").to_str().unwrap(),
        "--epochs",
        "40",
        "--set",
        "model.hidden_dim=16",
        "--set",
        "model.attention_heads=4",
        "--set",
        "model.loss=mse",
        "--set",
        "train.learning_rate=1e18",
        "--set",
        "train.patience=none",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
