use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 7] = [
    "depth=1",
    "steps=4",
    "batch_size=1",
    "image_size=32",
    "channels=8",
    "eval_scenes=2",
    "eval_interval=2",
];

fn dyhead(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dyhead"))
        .args(args)
        .env_remove("DYHEAD_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string(), "--out".into(), out.display().to_string()];
    for kv in TINY {
        args.push("--set".into());
        args.push(kv.into());
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dyhead(&refs)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_passes_and_fault_hook_fails() {
    let ok = dyhead(&["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let text = stdout(&ok);
    assert!(text.lines().filter(|l| l.contains("max rel error")).count() >= 10);
    assert!(!text.contains("FAIL"));

    let bad = dyhead(&["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn flops_is_affine_and_cross_checked() {
    let dir = tempfile::tempdir().unwrap();
    let o = dyhead(&["flops", "--depths", "1..4", "--stage-breakdown", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("instrumented counts match"));
    let csv = std::fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let deltas: Vec<&str> = rows[1..].iter().map(|r| r[3]).collect();
    assert!(deltas.iter().all(|d| *d == deltas[0]));
    assert!(csv.lines().next().unwrap().contains("spatial.sample"));

    assert_eq!(dyhead(&["flops", "--depths", "3..1"]).status.code(), Some(1));
}

#[test]
fn invalid_configs_exit_one_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    for text in ["stepz = 3\n", "steps = 3\nsteps = 4\n", "lr = fast\n", "image_size = 40\n", "points = 4\n"] {
        std::fs::write(&cfg, text).unwrap();
        let out = dir.path().join("out");
        let o = dyhead(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(!out.exists(), "{text}");
    }
    assert_eq!(dyhead(&["train", "--config", "/nonexistent/x.cfg"]).status.code(), Some(1));
    assert_eq!(dyhead(&["gradcheck", "--threads", "0"]).status.code(), Some(1));
}

#[test]
fn threads_fall_back_to_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_dyhead"))
        .args(["flops", "--depths", "1"])
        .env("DYHEAD_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn zero_step_train_writes_manifest_and_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# smoke run\nsteps = 0\nchannels = 8 # narrow\n").unwrap();
    let out = dir.path().join("out");
    let o = dyhead(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "17"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap(), "step,loss,toy_ap\n");
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    for key in ["command = train", "seeds = 17", "wall_time_s = ", "steps = 0", "channels = 8"] {
        assert!(manifest.contains(key), "{key}");
    }
    let echo = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("seed = 17\n"));

    // The echo is itself a valid config.
    let again = dir.path().join("again");
    let o = dyhead(&["train", "--config", out.join("config.txt").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(again.join("config.txt")).unwrap(), echo.as_bytes());
}

#[test]
fn train_is_byte_reproducible_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(tiny("train", &a, &[]).status.code(), Some(0));
    assert_eq!(tiny("train", &b, &[]).status.code(), Some(0));
    for f in ["metrics.csv", "checkpoint.dyhd", "config.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(a.join("metrics.csv")).unwrap().lines().count(), 4);

    let ckpt = a.join("checkpoint.dyhd");
    let ev = tiny("eval", &dir.path().join("e"), &["--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(ev.status.code(), Some(0));
    let final_row = std::fs::read_to_string(a.join("metrics.csv")).unwrap().lines().last().unwrap().to_string();
    let eval_row = std::fs::read_to_string(dir.path().join("e/eval.csv")).unwrap().lines().last().unwrap().to_string();
    assert!(final_row.ends_with(&eval_row), "{final_row} vs {eval_row}");

    let mismatched = tiny("eval", &dir.path().join("m"), &["--checkpoint", ckpt.to_str().unwrap(), "--set", "depth=2"]);
    assert_eq!(mismatched.status.code(), Some(1));
}

#[test]
fn dump_writes_block_maps_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(tiny("train", &run, &["--set", "depth=3"]).status.code(), Some(0));
    let out = dir.path().join("dump");
    let ckpt = run.join("checkpoint.dyhd");
    let o = tiny("dump", &out, &["--set", "depth=3", "--set", "dump_scenes=2", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    for i in 0..2 {
        assert!(out.join(format!("scene_{i:03}.ppm")).exists());
        for b in 1..=3 {
            assert!(out.join(format!("scene_{i:03}_block_{b}.pgm")).exists());
        }
    }
    for b in 1..=3 {
        let csv = std::fs::read_to_string(out.join(format!("scale_ratios_block_{b}.csv"))).unwrap();
        let total: u64 = csv
            .lines()
            .skip(1)
            .flat_map(|r| r.split(',').skip(2).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
            .sum();
        assert_eq!(total, 2 * 3);
    }
    assert!(out.join("manifest.txt").exists());
}

#[test]
fn divergence_exits_two_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny("train", dir.path(), &["--set", "lr=1e6", "--set", "grad_clip=0", "--set", "steps=50"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(dir.path().join("divergence.txt").exists());
    assert!(std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap().contains("status = diverged"));
}

#[test]
fn ablate_writes_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny("ablate", dir.path(), &["--set", "steps=1", "--set", "ablation_seeds=2", "--threads", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("L,S,C,median_toy_ap,median_loss,failed,ap_seed_0,ap_seed_1\n"));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("seeds = 0,1\n"));
}
