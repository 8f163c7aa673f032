use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::ExperimentConfig;
use super::run::{read_selection_csv, run, thread_count, RunOptions};
use crate::error::{Error, Result};

pub const RUNS_HEADER: &str = "weight_seed,data_seed,length,final_em,max_over_steps_em";
pub const SUMMARY_HEADER: &str = "length,n_runs,best,median,min,best_max_over_steps";
pub const FAILURES_HEADER: &str = "weight_seed,data_seed,error";

pub fn cell_dir(root: &Path, weight_seed: u64, data_seed: u64) -> PathBuf {
    root.join(format!("w{weight_seed}_d{data_seed}"))
}

fn parse_cell_name(name: &str) -> Option<(u64, u64)> {
    let (w, d) = name.strip_prefix('w')?.split_once("_d")?;
    Some((w.parse().ok()?, d.parse().ok()?))
}

/// One member run's EM at one length.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub weight_seed: u64,
    pub data_seed: u64,
    pub length: usize,
    pub final_em: f64,
    pub max_over_steps_em: f64,
}

/// Order statistics across member runs at one length.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub length: usize,
    pub n_runs: usize,
    pub best: f64,
    pub median: f64,
    pub min: f64,
    /// Best run when each run is credited with its best evaluation point.
    pub best_max_over_steps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub runs: Vec<RunRow>,
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<(u64, u64, String)>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl SweepSummary {
    pub fn from_runs(runs: Vec<RunRow>, failures: Vec<(u64, u64, String)>) -> Self {
        let mut by_len: BTreeMap<usize, Vec<&RunRow>> = BTreeMap::new();
        for r in &runs {
            by_len.entry(r.length).or_default().push(r);
        }
        let rows = by_len
            .into_iter()
            .map(|(length, rs)| {
                let finals: Vec<f64> = rs.iter().map(|r| r.final_em).collect();
                SummaryRow {
                    length,
                    n_runs: rs.len(),
                    best: finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    median: median(&finals),
                    min: finals.iter().copied().fold(f64::INFINITY, f64::min),
                    best_max_over_steps: rs.iter().map(|r| r.max_over_steps_em).fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect();
        Self { runs, rows, failures }
    }

    pub fn row(&self, length: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.length == length)
    }

    pub fn runs_csv(&self) -> String {
        let mut s = format!("{RUNS_HEADER}\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.weight_seed, r.data_seed, r.length, r.final_em, r.max_over_steps_em
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.length, r.n_runs, r.best, r.median, r.min, r.best_max_over_steps
            );
        }
        s
    }

    pub fn failures_csv(&self) -> String {
        let mut s = format!("{FAILURES_HEADER}\n");
        for (w, d, e) in &self.failures {
            let _ = writeln!(s, "{w},{d},{}", e.replace([',', '\n'], " "));
        }
        s
    }

    /// Writes `runs.csv`, `summary.csv` and `failures.csv` into `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for (name, text) in [
            ("runs.csv", self.runs_csv()),
            ("summary.csv", self.summary_csv()),
            ("failures.csv", self.failures_csv()),
        ] {
            let p = root.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Member rows read from `w*_d*/eval/selection.csv` under `root`, in seed
/// order. Cells without a selection file are skipped.
pub fn collect_runs(root: &Path) -> Result<Vec<RunRow>> {
    let mut cells: Vec<(u64, u64, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let (w, d) = parse_cell_name(&name)?;
            Some((w, d, e.path().join("eval").join("selection.csv")))
        })
        .filter(|(_, _, p)| p.exists())
        .collect();
    cells.sort();
    let mut runs = Vec::new();
    for (w, d, path) in cells {
        for s in read_selection_csv(&path)? {
            runs.push(RunRow {
                weight_seed: w,
                data_seed: d,
                length: s.length,
                final_em: s.final_em,
                max_over_steps_em: s.max_over_steps_em,
            });
        }
    }
    Ok(runs)
}

/// Reads failures recorded by an earlier [`sweep`] call.
fn read_failures(root: &Path) -> Vec<(u64, u64, String)> {
    let Ok(text) = fs::read_to_string(root.join("failures.csv")) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let mut f = l.splitn(3, ',');
            Some((f.next()?.parse().ok()?, f.next()?.parse().ok()?, f.next()?.to_string()))
        })
        .collect()
}

/// Rebuilds the summary from whatever member runs exist under `root`.
pub fn summarize(root: &Path) -> Result<SweepSummary> {
    let s = SweepSummary::from_runs(collect_runs(root)?, read_failures(root));
    s.write(root)?;
    Ok(s)
}

/// A cell finished under the same resolved configuration.
fn is_complete(config: &ExperimentConfig, dir: &Path) -> bool {
    let Ok(cfg) = config.resolved() else { return false };
    dir.join("eval").join("selection.csv").exists()
        && fs::read_to_string(dir.join("config.txt")).is_ok_and(|t| t == cfg.to_text())
}

/// Runs every `weight_seed × data_seed` cell as a full run under `root`.
/// Cells already completed under the same configuration are reused. A
/// failing cell is recorded in `failures.csv` and the sweep continues.
/// Up to `LENGEN_THREADS` cells train concurrently.
pub fn sweep(config: &ExperimentConfig, root: &Path) -> Result<SweepSummary> {
    config.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let p = root.join("sweep_config.txt");
    fs::write(&p, config.to_text()).map_err(|e| Error::io(&p, e))?;
    let cells: Vec<(u64, u64)> = config
        .sweep
        .weight_seeds
        .iter()
        .flat_map(|&w| config.sweep.data_seeds.iter().map(move |&d| (w, d)))
        .collect();
    let threads = thread_count()?.min(cells.len()).max(1);
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(w, d)) = cells.get(i) else { break };
        let mut c = config.clone();
        c.train.weight_seed = w;
        c.train.data_seed = d;
        // A member run describes itself, not the sweep it belongs to.
        c.sweep.weight_seeds = vec![w];
        c.sweep.data_seeds = vec![d];
        let dir = cell_dir(root, w, d);
        if is_complete(&c, &dir) {
            continue;
        }
        if let Err(e) = run(&c, &dir, &RunOptions::default()) {
            failures.lock().expect("no worker panicked").push((w, d, e.to_string()));
        }
    };
    std::thread::scope(|s| {
        for _ in 1..threads {
            s.spawn(work);
        }
        work();
    });
    let mut failures = failures.into_inner().expect("no worker panicked");
    failures.sort();
    let mut runs = collect_runs(root)?;
    runs.retain(|r| cells.contains(&(r.weight_seed, r.data_seed)));
    let summary = SweepSummary::from_runs(runs, failures);
    summary.write(root)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn cell_names_round_trip() {
        let p = cell_dir(Path::new("x"), 12, 3);
        assert_eq!(parse_cell_name(p.file_name().unwrap().to_str().unwrap()), Some((12, 3)));
        assert_eq!(parse_cell_name("summary.csv"), None);
    }
}
