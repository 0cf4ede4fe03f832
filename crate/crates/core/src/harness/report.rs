use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::eval::{wilson, EvalResult, LoadedModel};
use super::plot::line_chart;
use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "config,k_test,accuracy,std,runs,episodes,ci95_low,ci95_high";
pub const COMPARISON_HEADER: &str =
    "k_test,baseline,baseline_std,bootstrapped,bootstrapped_std,diff,diff_std,seeds,episodes";

/// Fewest runs for which a standard deviation is reported.
pub const MIN_RUNS_FOR_STD: usize = 3;

/// Mean and sample standard deviation (n - 1).
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// One (config, K_test) cell; accuracies in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub config: String,
    pub k_test: usize,
    pub accuracy: f64,
    /// Across runs; only present with at least three runs.
    pub std: Option<f64>,
    pub runs: usize,
    /// Episodes per run.
    pub episodes: usize,
    /// Binomial interval pooled over all runs' queries.
    pub ci95: (f64, f64),
}

impl ReportRow {
    pub fn from_runs(config: &str, results: &[EvalResult]) -> Result<Self> {
        let first = results
            .first()
            .ok_or_else(|| Error::Config(format!("no runs for `{config}`")))?;
        let accs: Vec<f64> = results.iter().map(|r| 100.0 * r.accuracy()).collect();
        let (accuracy, std) = mean_std(&accs);
        let correct = results.iter().map(|r| r.correct).sum();
        let total = results.iter().map(|r| r.total).sum();
        let (lo, hi) = wilson(correct, total);
        Ok(ReportRow {
            config: config.to_string(),
            k_test: first.k_test,
            accuracy,
            std: std.filter(|_| results.len() >= MIN_RUNS_FOR_STD),
            runs: results.len(),
            episodes: first.episodes,
            ci95: (100.0 * lo, 100.0 * hi),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{},{},{},{:.4},{:.4}",
                r.config,
                r.k_test,
                r.accuracy,
                opt(r.std),
                r.runs,
                r.episodes,
                r.ci95.0,
                r.ci95.1
            );
        }
        s
    }

    /// Accuracy against K_test, one line per config.
    pub fn to_svg(&self) -> String {
        let mut labels: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !labels.contains(&r.config.as_str()) {
                labels.push(&r.config);
            }
        }
        let series: Vec<(String, Vec<(f64, f64)>)> = labels
            .iter()
            .map(|l| {
                let pts = self
                    .rows
                    .iter()
                    .filter(|r| r.config == *l)
                    .map(|r| (r.k_test as f64, r.accuracy))
                    .collect();
                (l.to_string(), pts)
            })
            .collect();
        line_chart("Accuracy vs K_test", "K_test", "accuracy (%)", &series)
    }

    /// Writes `<stem>.csv` and `<stem>.svg`, returning both paths.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv = stem.with_extension("csv");
        let svg = stem.with_extension("svg");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        std::fs::write(&svg, self.to_svg()).map_err(|e| Error::io(&svg, e))?;
        Ok((csv, svg))
    }
}

/// Evaluates every checkpoint at every K_test. Checkpoints sharing a label
/// are runs of one config with different seeds; all use the same
/// evaluation episodes.
pub fn sweep_report(
    groups: &[(String, Vec<PathBuf>)],
    k_tests: &[usize],
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if groups.iter().all(|(_, paths)| paths.is_empty()) {
        return Err(Error::Config("sweep needs at least one checkpoint".into()));
    }
    let mut report = EvalReport::default();
    for (label, paths) in groups {
        let models: Vec<LoadedModel> = paths.iter().map(LoadedModel::load).collect::<Result<_>>()?;
        for &k in k_tests {
            let results: Vec<EvalResult> = models
                .iter()
                .map(|m| m.evaluate(k, episodes, seed))
                .collect::<Result<_>>()?;
            report.rows.push(ReportRow::from_runs(label, &results)?);
        }
    }
    Ok(report)
}

/// Baseline against bootstrapped accuracy at one K_test, paired by seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub k_test: usize,
    pub baseline: (f64, Option<f64>),
    pub bootstrapped: (f64, Option<f64>),
    /// Mean and std of the per-seed differences (bootstrapped - baseline).
    pub diff: (f64, Option<f64>),
    pub seeds: usize,
    pub episodes: usize,
}

impl ComparisonRow {
    /// Accuracies in percent, `baseline[i]` paired with `bootstrapped[i]`.
    pub fn from_pairs(k_test: usize, episodes: usize, baseline: &[f64], bootstrapped: &[f64]) -> Result<Self> {
        if baseline.len() != bootstrapped.len() || baseline.is_empty() {
            return Err(Error::Config(format!(
                "paired comparison needs equal, nonempty run lists, got {} and {}",
                baseline.len(),
                bootstrapped.len()
            )));
        }
        let diffs: Vec<f64> = bootstrapped.iter().zip(baseline).map(|(b, a)| b - a).collect();
        let keep = |(m, s): (f64, Option<f64>)| (m, s.filter(|_| baseline.len() >= MIN_RUNS_FOR_STD));
        Ok(ComparisonRow {
            k_test,
            baseline: keep(mean_std(baseline)),
            bootstrapped: keep(mean_std(bootstrapped)),
            diff: keep(mean_std(&diffs)),
            seeds: baseline.len(),
            episodes,
        })
    }
}

/// Table of baseline vs bootstrapped accuracy per K_test.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline_label: String,
    pub bootstrapped_label: String,
    pub rows: Vec<ComparisonRow>,
}

fn pm((m, s): (f64, Option<f64>)) -> String {
    match s {
        Some(s) => format!("{m:.2} ± {s:.2}"),
        None => format!("{m:.2}"),
    }
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{COMPARISON_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.4},{},{:.4},{},{:.4},{},{},{}",
                r.k_test,
                r.baseline.0,
                opt(r.baseline.1),
                r.bootstrapped.0,
                opt(r.bootstrapped.1),
                r.diff.0,
                opt(r.diff.1),
                r.seeds,
                r.episodes
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| K_test | {} | {} | difference |\n|---:|---:|---:|---:|\n",
            self.baseline_label, self.bootstrapped_label
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                r.k_test,
                pm(r.baseline),
                pm(r.bootstrapped),
                pm(r.diff)
            );
        }
        if let Some(r) = self.rows.first() {
            let _ = writeln!(
                s,
                "\nMean ± std over {} seeds, {} test episodes per seed and K_test.",
                r.seeds, r.episodes
            );
        }
        s
    }

    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv = stem.with_extension("csv");
        let md = stem.with_extension("md");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        Ok((csv, md))
    }
}

/// Evaluates seed-matched checkpoint pairs on identical episodes.
pub fn paired_comparison(
    baseline: (&str, &[PathBuf]),
    bootstrapped: (&str, &[PathBuf]),
    k_tests: &[usize],
    episodes: usize,
    seed: u64,
) -> Result<Comparison> {
    let load = |ps: &[PathBuf]| ps.iter().map(LoadedModel::load).collect::<Result<Vec<_>>>();
    let (a, b) = (load(baseline.1)?, load(bootstrapped.1)?);
    let mut rows = Vec::new();
    for &k in k_tests {
        let acc = |ms: &[LoadedModel]| -> Result<Vec<f64>> {
            ms.iter()
                .map(|m| Ok(100.0 * m.evaluate(k, episodes, seed)?.accuracy()))
                .collect()
        };
        rows.push(ComparisonRow::from_pairs(k, episodes, &acc(&a)?, &acc(&b)?)?);
    }
    Ok(Comparison {
        baseline_label: baseline.0.to_string(),
        bootstrapped_label: bootstrapped.0.to_string(),
        rows,
    })
}
