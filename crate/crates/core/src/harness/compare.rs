//! Multi-seed comparison of training variants.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::{ExperimentConfig, PcMode, Strategy};
use crate::harness::train::{train, RunResult};
use crate::synthbench::Dataset;

/// The knobs a comparison varies on top of a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub strategy: Strategy,
    pub pc_mode: PcMode,
    pub reg_star: bool,
}

impl Variant {
    pub fn new(strategy: Strategy, pc_mode: PcMode, reg_star: bool) -> Self {
        Self {
            strategy,
            pc_mode,
            reg_star,
        }
    }

    /// The four strategies with temporal sets and plain regression.
    pub fn strategies() -> Vec<Variant> {
        Strategy::ALL
            .iter()
            .map(|&s| Variant::new(s, PcMode::Temporal, false))
            .collect()
    }

    /// The four strategies plus `vc+reg*` and cross-model `vc`.
    pub fn full() -> Vec<Variant> {
        let mut v = Self::strategies();
        v.push(Variant::new(Strategy::Vc, PcMode::Temporal, true));
        v.push(Variant::new(Strategy::Vc, PcMode::Cross, false));
        v
    }

    pub fn apply(&self, base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            strategy: self.strategy,
            pc_mode: self.pc_mode,
            reg_star_enabled: self.reg_star,
            ..base.clone()
        }
    }

    pub fn label(&self) -> String {
        self.apply(&ExperimentConfig::default(), 0).variant_label()
    }
}

/// Mean and spread of one variant across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub runs: usize,
    pub mean_ap: f64,
    /// Sample standard deviation (0 for a single run).
    pub std_ap: f64,
    pub mean_confusing_samples: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareTable {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// One run per (variant, seed), variant-major.
    pub runs: Vec<RunResult>,
}

impl CompareTable {
    pub fn runs_of(&self, v: &Variant) -> impl Iterator<Item = &RunResult> {
        let label = v.label();
        self.runs.iter().filter(move |r| r.label == label)
    }

    pub fn mean_ap(&self, v: &Variant) -> Option<f64> {
        let aps: Vec<f64> = self.runs_of(v).map(|r| r.final_ap).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    }

    /// Per-variant summary, best mean AP first.
    pub fn summary(&self) -> Vec<CompareRow> {
        let mut rows: Vec<CompareRow> = self
            .variants
            .iter()
            .map(|v| {
                let runs: Vec<&RunResult> = self.runs_of(v).collect();
                let n = runs.len() as f64;
                let mean = runs.iter().map(|r| r.final_ap).sum::<f64>() / n;
                let var = if runs.len() > 1 {
                    runs.iter().map(|r| (r.final_ap - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                CompareRow {
                    label: v.label(),
                    runs: runs.len(),
                    mean_ap: mean,
                    std_ap: var.sqrt(),
                    mean_confusing_samples: runs.iter().map(|r| r.counters.confusing_samples as f64).sum::<f64>()
                        / n,
                }
            })
            .collect();
        rows.sort_by(|a, b| b.mean_ap.total_cmp(&a.mean_ap));
        rows
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<16} {:>5} {:>9} {:>7} {:>12}\n",
            "variant", "runs", "mean AP", "std", "confusing"
        );
        for r in self.summary() {
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>9.3} {:>7.3} {:>12.0}",
                r.label, r.runs, r.mean_ap, r.std_ap, r.mean_confusing_samples
            );
        }
        out
    }

    /// Long-format AP curves: `strategy,seed,iteration,ap`.
    pub fn write_curves(&self, path: &Path) -> Result<()> {
        write_curves(path, &self.runs)
    }
}

pub fn write_curves(path: &Path, runs: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "seed", "iteration", "ap"])?;
    for r in runs {
        for p in &r.trajectory {
            w.write_record([
                r.label.clone(),
                r.seed.to_string(),
                p.iteration.to_string(),
                p.ap.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Trains every variant with every seed. Runs are independent and fan out
/// over the rayon pool; the table is assembled in a fixed order afterwards.
pub fn compare_strategies(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    data: &Dataset,
) -> Result<CompareTable> {
    let jobs: Vec<ExperimentConfig> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| v.apply(base, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|cfg| train(cfg, data))
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareTable {
        variants: variants.to_vec(),
        seeds: seeds.to_vec(),
        runs,
    })
}
