use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graspformer")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "preset = tiny\nmax_steps = 4\nbatch_size = 2\nlr = 0.001\ncheckpoint_every = 2\n";

#[test]
fn gen_train_predict_eval_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");

    let o = run(&["gen", "--scenario", "packed", "--count", "3", "--seed", "5", "--out", p(&data), "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("scene_00002.tsdf").exists() && data.join("scene_00002.labels").exists());

    let o = run(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,epoch,loss");
    assert_eq!(lines.len(), 5);
    assert!(out.join("step_000002.gfck").exists() && out.join("step_000004.gfck").exists());
    let final_bytes = std::fs::read(out.join("final.gfck")).unwrap();

    // resuming from step 2 reproduces the unbroken run's final checkpoint
    let resumed = dir.path().join("resumed");
    let o = run(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&resumed), "--resume", p(&out.join("step_000002.gfck"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(resumed.join("final.gfck")).unwrap(), final_bytes);
    let tail: Vec<String> = std::fs::read_to_string(resumed.join("loss.csv")).unwrap().lines().map(str::to_owned).collect();
    assert_eq!(tail, lines[3..].iter().map(|s| s.to_string()).collect::<Vec<_>>());

    let ckpt = out.join("final.gfck");
    let o = run(&["predict", "--ckpt", p(&ckpt), "--tsdf", p(&data.join("scene_00000.tsdf")), "--threshold", "0.1"]);
    assert_eq!(code(&o), 0);
    let poses: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let arr = poses.as_array().unwrap();
    assert!(!arr.is_empty());
    for key in ["position_m", "quaternion_wxyz", "width_m", "quality"] {
        assert!(arr[0].get(key).is_some(), "missing {}", key);
    }

    let file = dir.path().join("poses.json");
    let o = run(&["predict", "--ckpt", p(&ckpt), "--tsdf", p(&data.join("scene_00000.tsdf")), "--threshold", "0.1", "--out", p(&file)]);
    assert_eq!(code(&o), 0);
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(saved, poses);

    let o = run(&["eval", "--ckpt", p(&ckpt), "--rounds", "2", "--seed", "3", "--repeats", "2"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([3, 4]));
    let again = run(&["eval", "--ckpt", p(&ckpt), "--rounds", "2", "--seed", "3", "--repeats", "2"]);
    assert_eq!(stdout(&again), stdout(&o));

    let o = run(&["bench", "--ckpt", p(&ckpt), "--repeat", "1"]);
    assert_eq!(code(&o), 0);
    let b: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(b["samples_ms"].as_array().unwrap().len(), 1);
    assert_eq!(b["warmup"], 3);
    assert!(b["config"].as_str().unwrap().starts_with("N=8 C=4 K=8 H=2 L=2"));
}

#[test]
fn gradcheck_passes_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.cfg");
    std::fs::write(&cfg, "preset = tiny\nprobes = 10\n").unwrap();
    let o = run(&["gradcheck", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(reports.len() > 20);
    assert_eq!(reports.last().unwrap()["name"], "model_loss");
}

#[test]
fn gradcheck_failure_is_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.cfg");
    // a tolerance nothing can meet
    std::fs::write(&cfg, "preset = tiny\nop_tolerance = 0\nmodel_tolerance = 0\n").unwrap();
    assert_eq!(code(&run(&["gradcheck", "--config", p(&cfg)])), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["eval", "--ckpt", "x", "--rounds", "many", "--seed", "1"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "colour = blue\n").unwrap();
    assert_eq!(code(&run(&["gradcheck", "--config", p(&bad_cfg)])), 1);

    let junk = dir.path().join("junk.gfck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&run(&["bench", "--ckpt", p(&junk), "--repeat", "1"])), 2);
    let o = run(&["predict", "--ckpt", p(&dir.path().join("missing.gfck")), "--tsdf", "x.tsdf"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.gfck"));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    assert_eq!(code(&run(&["train", "--data", p(&empty), "--config", p(&cfg), "--out", p(&dir.path().join("o"))])), 2);
}
