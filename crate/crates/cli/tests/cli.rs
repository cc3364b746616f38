//! End-to-end tests against the built binary.

use std::io::Write;
use std::process::{Command, Output};

use rungrad::links::{self, InitCtx, Mlp};
use rungrad::tensor::snapshot;
use rungrad::Tensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rungrad"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout).trim().lines().map(str::to_string).collect()
}

#[test]
fn unknown_flag_exits_2() {
    let out = run(&["train", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = run(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_exits_0() {
    let out = run(&["gradcheck", "--seed", "11"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert!(lines.len() >= 17);
    assert!(lines.iter().all(|l| l.starts_with("PASS")));
}

#[test]
fn train_emits_json_records() {
    let out = run(&["train", "--dataset", "synthetic", "--epochs", "2", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 2);
    for (i, line) in lines.iter().enumerate() {
        let record: serde_json::Value = serde_json::from_str(line).expect("JSON line");
        assert_eq!(record["epoch"], i as u64 + 1);
        assert!(record["mean_loss"].as_f64().unwrap().is_finite());
        assert!(record["val_accuracy"].as_f64().is_some());
        assert!(record["wall_ms"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn identical_seeds_give_identical_output() {
    // identical up to wall-clock timing, which is measurement, not state
    let strip_wall = |out: &Output| -> Vec<serde_json::Value> {
        stdout_lines(out)
            .iter()
            .map(|line| {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    let args = ["train", "--dataset", "synthetic", "--epochs", "2", "--seed", "9"];
    let a = run(&args);
    let b = run(&args);
    assert_eq!(strip_wall(&a), strip_wall(&b));
}

#[test]
fn config_file_applies_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(
        &path,
        "# test configuration\nsubcommand=train\nseed=5\nepochs=1\nbatchsize=16\n",
    )
    .unwrap();
    let base = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(base.status.code(), Some(0));
    assert_eq!(stdout_lines(&base).len(), 1, "config epochs=1");

    let overridden = run(&["train", "--config", path.to_str().unwrap(), "--epochs", "3"]);
    assert_eq!(stdout_lines(&overridden).len(), 3, "flag must override the file");
}

#[test]
fn train_snapshot_is_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.snap");
    let out = run(&[
        "train",
        "--epochs",
        "1",
        "--seed",
        "4",
        "--snapshot",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let mut ctx = InitCtx::new(999);
    let model = Mlp::new(2, 16, 2, &mut ctx).unwrap();
    let mut file = std::fs::File::open(&path).unwrap();
    links::load(&model, &mut file).expect("snapshot loads into a same-shape model");
}

#[test]
fn multi_worker_inprocess_matches_record_count() {
    let out = run(&[
        "train", "--workers", "4", "--transport", "inprocess", "--epochs", "2", "--seed", "6",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_lines(&out).len(), 2);
}

#[test]
fn tcp_spawned_workers_train() {
    let out = run(&[
        "train", "--workers", "2", "--transport", "tcp", "--epochs", "1", "--seed", "6",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert_eq!(lines.len(), 1);
    let record: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert!(record["mean_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn kernel_eval_round_trips_snapshot_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inputs.snap");
    {
        let mut file = std::fs::File::create(&path).unwrap();
        snapshot::write_record(&mut file, "x", &Tensor::from_vec([2], vec![1.0, 2.0]).unwrap()).unwrap();
        snapshot::write_record(&mut file, "y", &Tensor::from_vec([2], vec![3.0, 4.0]).unwrap()).unwrap();
        snapshot::write_record(&mut file, "z", &Tensor::from_vec([2], vec![5.0, 6.0]).unwrap()).unwrap();
        file.flush().unwrap();
    }
    let out = run(&[
        "kernel",
        "eval",
        "--sig",
        "float64 x, float64 y, float64 z",
        "--out",
        "float64 w",
        "--expr",
        "w = x * y + z",
        "--inputs",
        path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let records = snapshot::read_all(&mut out.stdout.as_slice()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].0, "w");
    assert_eq!(records[0].1.to_f64_vec(), vec![8.0, 14.0]);
}

#[test]
fn kernel_eval_missing_record_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inputs.snap");
    {
        let mut file = std::fs::File::create(&path).unwrap();
        snapshot::write_record(&mut file, "x", &Tensor::scalar(1.0)).unwrap();
    }
    let out = run(&[
        "kernel", "eval", "--sig", "float64 x, float64 q", "--out", "float64 w", "--expr", "w = x + q",
        "--inputs", path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("q"));
}

#[test]
fn bench_allreduce_prints_csv() {
    let out = run(&[
        "bench-allreduce", "--sizes", "1k,4k", "--workers", "2", "--iters", "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let lines = stdout_lines(&out);
    assert_eq!(lines[0], "n,bytes,comm_ms_mean,iter_ms_mean");
    assert_eq!(lines.len(), 3, "one row per size");
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 4);
        assert_eq!(cols[0], "2");
        assert!(cols[2].parse::<f64>().unwrap() > 0.0);
    }
}
