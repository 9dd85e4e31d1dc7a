mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dyhead::checks::gradcheck_suite;
use dyhead::flops::{instrumented_count, stack_cost_curve, CostConfig, CONVENTION};
use dyhead::harness::{
    ablation_matrix, checkpoint, dump_attention, evaluate, metrics_csv, train, Detector, TrainConfig,
};

use config::RunConfig;

/// Relative perturbation applied to analytic gradients by `--inject-fault`.
const FAULT: f64 = 0.05;

#[derive(Parser)]
#[command(name = "dyhead", version, about = "Dynamic detection head toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for `ablate` (falls back to DYHEAD_THREADS, then the
    /// number of CPUs).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference checks of every op, attention, block and stack.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Analytic cost of the stack per depth, cross-checked against a
    /// recorded forward pass.
    Flops {
        /// Depths as `A..B` (inclusive) or a comma list.
        #[arg(long, default_value = "1..10")]
        depths: String,
        /// Add one MAC column per stage.
        #[arg(long)]
        stage_breakdown: bool,
    },
    /// Trains one detector and writes metrics.csv and checkpoint.dyhd.
    Train,
    /// Trains all eight attention combinations over several seeds.
    Ablate,
    /// Writes attention maps and level-weight histograms for held-out scenes.
    Dump {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Held-out loss and toy AP of a checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck { .. } => "gradcheck",
            Command::Flops { .. } => "flops",
            Command::Train => "train",
            Command::Ablate => "ablate",
            Command::Dump { .. } => "dump",
            Command::Eval { .. } => "eval",
        }
    }
}

enum Failure {
    Validation(String),
    Numerical(String),
}

impl From<dyhead::Error> for Failure {
    fn from(e: dyhead::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load_config(g: &Global) -> Result<RunConfig, String> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            RunConfig::parse(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => RunConfig::default(),
    };
    for o in &g.overrides {
        cfg.set_pair(o).map_err(|e| format!("--set {o}: {e}"))?;
    }
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_threads(flag: Option<usize>) -> Result<usize, String> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("DYHEAD_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| format!("DYHEAD_THREADS: cannot parse {v:?}"))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err("thread count must be positive".into());
    }
    Ok(n)
}

fn parse_depths(spec: &str) -> Result<Vec<usize>, String> {
    let bad = || format!("--depths: cannot parse {spec:?}");
    let depths: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',')
            .map(|d| d.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if depths.is_empty() || depths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("--depths: expected increasing depths, got {spec:?}"));
    }
    Ok(depths)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: Option<PathBuf>,
    command: &'static str,
    started: Instant,
}

impl Run<'_> {
    fn out_dir(&self) -> Result<&Path, Failure> {
        let dir = self.out.as_deref().expect("output directory resolved for this command");
        std::fs::create_dir_all(dir)?;
        Ok(dir)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Outcome {
        if self.out.is_some() {
            std::fs::write(self.out_dir()?.join(name), contents)?;
        }
        Ok(())
    }

    fn manifest(&self, seeds: &[u64], status: &str) -> Outcome {
        let t = &self.cfg.train;
        let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
        let text = format!(
            "command = {}\nversion = {}\nstatus = {status}\nseeds = {}\neval_seed = {}\nwall_time_s = {:.3}\n\n[config]\n{}",
            self.command,
            env!("CARGO_PKG_VERSION"),
            seeds.join(","),
            t.eval_seed,
            self.started.elapsed().as_secs_f64(),
            self.cfg.to_text()
        );
        self.write("manifest.txt", text)
    }
}

fn cmd_gradcheck(run: &Run, inject_fault: bool) -> Outcome {
    let checks = gradcheck_suite(inject_fault.then_some(FAULT))?;
    let mut csv = String::from("check,max_rel_error,tol,passed\n");
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.report.passed();
        if !ok {
            failed.push(c.name);
        }
        println!(
            "{:<28} max rel error {:.3e}  (tol {:.0e})  {}",
            c.name,
            c.report.max_rel_error,
            c.report.tol,
            if ok { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!("{},{:e},{:e},{ok}\n", c.name, c.report.max_rel_error, c.report.tol));
    }
    println!("{} checks, {} failed", checks.len(), failed.len());
    run.write("gradcheck.csv", csv)?;
    run.manifest(&[], if failed.is_empty() { "ok" } else { "failed" })?;
    if !failed.is_empty() {
        return Err(Failure::Numerical(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn cmd_flops(run: &Run, depths: &str, stage_breakdown: bool) -> Outcome {
    let depths = parse_depths(depths).map_err(Failure::Validation)?;
    let t = &run.cfg.train;
    let grid = Detector::new(t)?.grid;
    let mut cost = CostConfig::new(t.block_config(), grid.height, grid.width);
    cost.head_classes = Some(t.num_classes);
    let curve = stack_cost_curve(&cost, &depths)?;
    let csv = curve.to_csv(stage_breakdown);
    print!("{csv}");
    println!("# {CONVENTION}");
    println!("# per-block MACs: {}", curve.per_block_macs);

    for r in &curve.reports {
        let measured = instrumented_count(&cost, r.depth, t.seed)?;
        if measured.per_stage != r.per_stage {
            return Err(Failure::Validation(format!(
                "depth {}: analytic {} MACs, instrumented {} MACs",
                r.depth, r.total_macs, measured.total_macs
            )));
        }
    }
    println!("# instrumented counts match at every depth");
    run.write("flops.csv", csv)?;
    run.manifest(&[t.seed], "ok")
}

fn cmd_train(run: &Run) -> Outcome {
    let t = &run.cfg.train;
    let dir = run.out_dir()?;
    let result = match train(t, Some(dir)) {
        Ok(r) => r,
        Err(e) => {
            run.manifest(&[t.seed], "diverged")?;
            return Err(e.into());
        }
    };
    run.write("metrics.csv", metrics_csv(&result.metrics))?;
    checkpoint::save(&result.detector.store, &dir.join("checkpoint.dyhd"))?;
    if let Some(m) = result.metrics.last() {
        println!("step {}: eval loss {:.6}, toy AP {:.4}", m.step, m.loss, m.toy_ap);
    }
    run.manifest(&[t.seed], "ok")
}

fn cmd_ablate(run: &Run, threads: usize) -> Outcome {
    let t = &run.cfg.train;
    let seeds: Vec<u64> = (0..run.cfg.ablation_seeds as u64).map(|i| t.seed.wrapping_add(i)).collect();
    let report = ablation_matrix(t, &seeds, threads);
    let summary = report.summary();
    print!("{summary}");
    run.write("ablation.csv", report.to_csv())?;
    run.write("ablation_summary.txt", &summary)?;
    run.manifest(&seeds, "ok")
}

fn restored(cfg: &TrainConfig, path: &Path) -> Result<Detector, Failure> {
    let mut det = Detector::new(cfg)?;
    checkpoint::load(&mut det.store, path)?;
    Ok(det)
}

fn cmd_dump(run: &Run, ckpt: &Path) -> Outcome {
    let t = &run.cfg.train;
    let det = restored(t, ckpt)?;
    let scenes: Vec<_> = TrainConfig {
        eval_scenes: run.cfg.dump_scenes,
        ..t.clone()
    }
    .eval_set();
    let summary = dump_attention(&det, &scenes, run.out_dir()?)?;
    println!(
        "{} scenes, {} blocks, {} files written",
        summary.scenes,
        summary.blocks,
        summary.files.len()
    );
    run.manifest(&[t.seed], "ok")
}

fn cmd_eval(run: &Run, ckpt: &Path) -> Outcome {
    let t = &run.cfg.train;
    let det = restored(t, ckpt)?;
    let (loss, ap) = evaluate(&det, &t.eval_set())?;
    println!("eval loss {loss:.6}, toy AP {ap:.4} over {} scenes", t.eval_scenes);
    run.write("eval.csv", format!("loss,toy_ap\n{loss:.9},{ap:.6}\n"))?;
    run.manifest(&[t.seed], "ok")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let started = Instant::now();

    let cfg = match load_config(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let threads = match resolve_threads(cli.global.threads) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let command = cli.command.name();
    let writes_files = !matches!(cli.command, Command::Gradcheck { .. } | Command::Flops { .. });
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| writes_files.then(|| PathBuf::from("runs").join(command)));
    let run = Run {
        cfg: &cfg,
        out,
        command,
        started,
    };

    let outcome = run.write("config.txt", cfg.to_text()).and_then(|()| match &cli.command {
        Command::Gradcheck { inject_fault } => cmd_gradcheck(&run, *inject_fault),
        Command::Flops { depths, stage_breakdown } => cmd_flops(&run, depths, *stage_breakdown),
        Command::Train => cmd_train(&run),
        Command::Ablate => cmd_ablate(&run, threads),
        Command::Dump { checkpoint } => cmd_dump(&run, checkpoint),
        Command::Eval { checkpoint } => cmd_eval(&run, checkpoint),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical failure: {e}");
            ExitCode::from(2)
        }
    }
}
