//! Multi-seed protocol: one run per seed, summarized by mean, best and
//! sample standard deviation of the final accuracy.

use std::fmt::Write as _;
use std::fs;

use serde::Serialize;

use super::config::{TaskData, TrainConfig};
use super::train::{train, MetricsRecord, RunOptions};
use crate::error::{Error, Result};
use crate::real::Real;

/// Spread above which a summary is flagged, in accuracy points.
pub const HIGH_VARIANCE_POINTS: f64 = 2.0;
pub const SUMMARY_FILE: &str = "seeds.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub final_accuracy: Option<f64>,
    pub steps: usize,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedSummary {
    pub rows: Vec<SeedRow>,
    /// Over non-diverged seeds; `None` when every seed diverged.
    pub mean: Option<f64>,
    pub best: Option<f64>,
    /// Sample standard deviation (n − 1); 0 for a single seed.
    pub std: Option<f64>,
    pub high_variance: bool,
    /// Diverged seeds left out of the aggregate.
    pub excluded: Vec<u64>,
}

pub fn summarize(rows: Vec<SeedRow>) -> SeedSummary {
    let ok: Vec<f64> = rows
        .iter()
        .filter(|r| !r.diverged)
        .filter_map(|r| r.final_accuracy)
        .collect();
    let excluded = rows.iter().filter(|r| r.diverged).map(|r| r.seed).collect();
    let (mean, best, std) = if ok.is_empty() {
        (None, None, None)
    } else {
        let n = ok.len() as f64;
        let mean = ok.iter().sum::<f64>() / n;
        let var = if ok.len() > 1 {
            ok.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (Some(mean), ok.iter().copied().reduce(f64::max), Some(var.sqrt()))
    };
    SeedSummary {
        high_variance: std.is_some_and(|s| s * 100.0 > HIGH_VARIANCE_POINTS),
        rows,
        mean,
        best,
        std,
        excluded,
    }
}

impl SeedSummary {
    /// One line per seed, then the aggregate.
    pub fn render(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
        let mut s = String::from("seed      accuracy  steps  status\n");
        for r in &self.rows {
            let status = if r.diverged { "DIVERGED (excluded)" } else { "ok" };
            let _ = writeln!(s, "{:<9} {:>8}  {:>5}  {status}", r.seed, pct(r.final_accuracy), r.steps);
        }
        let flag = if self.high_variance {
            format!("  [HIGH VARIANCE: std > {HIGH_VARIANCE_POINTS} points]")
        } else {
            String::new()
        };
        let _ = writeln!(
            s,
            "mean {}  best {}  std {}  over {} seed(s){flag}",
            pct(self.mean),
            pct(self.best),
            pct(self.std),
            self.rows.len() - self.excluded.len()
        );
        if !self.excluded.is_empty() {
            let _ = writeln!(s, "WARNING: diverged seeds excluded from the aggregate: {:?}", self.excluded);
        }
        s
    }
}

/// Trains once per seed in `cfg.train.seeds`, each into `<out>/seed-<s>/`,
/// and writes `<out>/seeds.json`.
pub fn run_seeds<T: Real>(
    cfg: &TrainConfig,
    data: &TaskData,
    opts: &RunOptions,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<SeedSummary> {
    let mut rows = Vec::with_capacity(cfg.train.seeds.len());
    for &seed in &cfg.train.seeds {
        let run_opts = RunOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(format!("seed-{seed}"))),
            override_budget: opts.override_budget,
        };
        let out = train::<T>(cfg, data, seed, &run_opts, &mut on_record)?;
        rows.push(SeedRow {
            seed,
            final_accuracy: out.final_accuracy(),
            steps: out.final_record().step,
            diverged: out.diverged,
        });
    }
    let summary = summarize(rows);
    if let Some(dir) = &opts.out_dir {
        let path = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}
