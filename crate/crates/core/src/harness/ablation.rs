use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::train::{train, TrainConfig};
use crate::attention::AttentionSet;

/// Full-scale reference gains over the baseline, in AP points, for L, S, C
/// alone and all three. Reported for orientation only.
pub const REFERENCE_DELTAS: [(&str, f64); 4] = [("L", 0.9), ("S", 2.4), ("C", 1.3), ("L+S+C", 3.6)];

/// Outcome of one training run of the matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    /// Final `(eval loss, toy AP)`, or the error message of a failed run.
    pub outcome: std::result::Result<(f64, f64), String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub attentions: AttentionSet,
    pub runs: Vec<SeedRun>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AblationCell {
    fn successes(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.runs.iter().filter_map(|r| r.outcome.as_ref().ok().copied())
    }

    /// Median toy AP over the runs that finished.
    pub fn median_ap(&self) -> Option<f64> {
        median(self.successes().map(|(_, ap)| ap).collect())
    }

    pub fn median_loss(&self) -> Option<f64> {
        median(self.successes().map(|(l, _)| l).collect())
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.outcome.is_err()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// In [`AttentionSet::ablation_grid`] order.
    pub cells: Vec<AblationCell>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

impl AblationReport {
    pub fn cell(&self, set: AttentionSet) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.attentions == set)
    }

    /// One row per cell: flags, median AP and loss, failure count and the AP
    /// of every seed (empty for failed runs).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("L,S,C,median_toy_ap,median_loss,failed");
        for s in &self.seeds {
            let _ = write!(out, ",ap_seed_{s}");
        }
        out.push('\n');
        for c in &self.cells {
            let a = c.attentions;
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                a.scale as u8,
                a.spatial as u8,
                a.task as u8,
                opt(c.median_ap()),
                opt(c.median_loss()),
                c.failures()
            );
            for r in &c.runs {
                match &r.outcome {
                    Ok((_, ap)) => {
                        let _ = write!(out, ",{ap:.6}");
                    }
                    Err(_) => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text table with gains over the baseline cell, the reference
    /// deltas and any failures.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let refs: Vec<String> = REFERENCE_DELTAS.iter().map(|(k, v)| format!("{k} +{v}")).collect();
        let _ = writeln!(out, "# full-scale reference gains (non-binding): {}", refs.join(", "));
        let _ = writeln!(out, "# seeds: {:?}", self.seeds);
        let base = self.cell(AttentionSet::NONE).and_then(AblationCell::median_ap);
        let _ = writeln!(out, "  L   S   C   median_ap   delta    failed");
        for c in &self.cells {
            let mark = |on: bool| if on { "Y" } else { "-" };
            let ap = c.median_ap();
            let delta = match (ap, base) {
                (Some(a), Some(b)) => format!("{:+.4}", a - b),
                _ => "n/a".to_string(),
            };
            let _ = writeln!(
                out,
                "  {}   {}   {}   {:>9}   {:>7}  {}",
                mark(c.attentions.scale),
                mark(c.attentions.spatial),
                mark(c.attentions.task),
                ap.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}")),
                delta,
                c.failures()
            );
        }
        for c in &self.cells {
            for r in &c.runs {
                if let Err(e) = &r.outcome {
                    let _ = writeln!(out, "# failed {} seed {}: {e}", c.attentions.label(), r.seed);
                }
            }
        }
        out
    }
}

/// Trains every attention combination once per seed. Runs are spread over
/// `threads` workers (each run single-threaded); results are placed by cell
/// and seed index, so the report does not depend on scheduling. A failed run
/// is recorded and the rest of the matrix still completes.
pub fn ablation_matrix(base: &TrainConfig, seeds: &[u64], threads: usize) -> AblationReport {
    let grid = AttentionSet::ablation_grid();
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|c| (0..seeds.len()).map(move |s| (c, s)))
        .collect();
    let slots: Mutex<Vec<Option<SeedRun>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(c, s)) = jobs.get(j) else { break };
        let cfg = TrainConfig {
            attentions: grid[c],
            seed: seeds[s],
            ..base.clone()
        };
        let outcome = train(&cfg, None)
            .map_err(|e| e.to_string())
            .and_then(|r| {
                r.metrics
                    .last()
                    .map(|m| (m.loss, m.toy_ap))
                    .ok_or_else(|| "no metrics recorded".to_string())
            });
        log::info!("cell {} seed {}: {:?}", grid[c].label(), seeds[s], outcome);
        slots.lock().unwrap_or_else(|p| p.into_inner())[j] = Some(SeedRun { seed: seeds[s], outcome });
    };
    let threads = threads.clamp(1, jobs.len().max(1));
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(worker);
            }
        });
    }
    let mut runs = slots.into_inner().unwrap_or_else(|p| p.into_inner()).into_iter();
    let cells = grid
        .iter()
        .map(|&attentions| AblationCell {
            attentions,
            runs: (0..seeds.len())
                .map(|_| runs.next().flatten().expect("every job stores its result"))
                .collect(),
        })
        .collect();
    AblationReport {
        seeds: seeds.to_vec(),
        cells,
    }
}
