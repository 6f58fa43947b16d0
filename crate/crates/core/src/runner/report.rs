//! Cross-run aggregation: per-strategy summary table and ablation deltas.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Strategy, CONFIG_FILE, METRICS_FILE};
use crate::error::{Error, Result};
use crate::metrics::{summarize, MetricsLog, RunSummary};

/// One run directory, recomputed from its metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub strategy: Strategy,
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub runs: usize,
    pub mean_map: f64,
    pub std_map: f64,
    pub mean_rank1: f64,
    /// Mean over runs that define forgetting.
    pub mean_forgetting: Option<f64>,
    pub mean_s2c_bytes: f64,
    pub mean_c2s_bytes: f64,
}

/// `fedstil` minus an ablated variant, over the seeds both ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub variant: Strategy,
    pub seeds: usize,
    pub map_delta: f64,
    /// Seeds where fedstil's final mAP is strictly higher.
    pub fedstil_wins: usize,
    pub forgetting_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<RunRecord>,
    pub rows: Vec<StrategyRow>,
    pub ablations: Vec<AblationDelta>,
}

fn find_logs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_logs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn load_record(log_path: &Path) -> Result<RunRecord> {
    let dir = log_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = ExperimentConfig::from_toml_str(&text)?;
    let log = MetricsLog::read_csv(log_path)?;
    let strategy = cfg.run.strategy;
    if let Some(row) = log.rows.iter().find(|r| r.strategy != strategy.as_str()) {
        return Err(Error::InvalidInput(format!(
            "{}: row for strategy {} in a {strategy} run",
            log_path.display(),
            row.strategy
        )));
    }
    Ok(RunRecord {
        summary: summarize(&log, strategy.as_str()),
        dir,
        strategy,
        seed: cfg.run.seed,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for a single run.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Recomputes every run below `dir` from its `metrics.csv` and aggregates.
pub fn build_report(dir: &Path) -> Result<SweepReport> {
    let mut logs = Vec::new();
    find_logs(dir, &mut logs)?;
    if logs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no {METRICS_FILE} found under {}",
            dir.display()
        )));
    }
    let runs = logs.iter().map(|p| load_record(p)).collect::<Result<Vec<_>>>()?;
    Ok(aggregate(runs))
}

pub fn aggregate(runs: Vec<RunRecord>) -> SweepReport {
    let mut by_strategy: BTreeMap<Strategy, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.summary.final_avg_map.is_some()) {
        by_strategy.entry(r.strategy).or_default().push(r);
    }
    let rows = by_strategy
        .iter()
        .map(|(&strategy, rs)| {
            let maps: Vec<f64> = rs.iter().filter_map(|r| r.summary.final_avg_map).collect();
            let rank1: Vec<f64> = rs.iter().filter_map(|r| r.summary.final_rank1).collect();
            let forget: Vec<f64> = rs.iter().filter_map(|r| r.summary.final_forgetting).collect();
            let s2c: Vec<f64> = rs.iter().map(|r| r.summary.total_s2c_bytes as f64).collect();
            let c2s: Vec<f64> = rs.iter().map(|r| r.summary.total_c2s_bytes as f64).collect();
            StrategyRow {
                strategy,
                runs: rs.len(),
                mean_map: mean(&maps),
                std_map: std_dev(&maps),
                mean_rank1: if rank1.is_empty() { f64::NAN } else { mean(&rank1) },
                mean_forgetting: (!forget.is_empty()).then(|| mean(&forget)),
                mean_s2c_bytes: mean(&s2c),
                mean_c2s_bytes: mean(&c2s),
            }
        })
        .collect();

    let by_seed = |s: Strategy| -> BTreeMap<u64, &RunSummary> {
        by_strategy
            .get(&s)
            .map(|rs| rs.iter().map(|r| (r.seed, &r.summary)).collect())
            .unwrap_or_default()
    };
    let reference = by_seed(Strategy::Fedstil);
    let mut ablations = Vec::new();
    if !reference.is_empty() {
        for variant in Strategy::ALL.into_iter().filter(|&s| s != Strategy::Fedstil) {
            let other = by_seed(variant);
            let pairs: Vec<(&RunSummary, &RunSummary)> = reference
                .iter()
                .filter_map(|(seed, f)| other.get(seed).map(|o| (*f, *o)))
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let deltas: Vec<f64> = pairs
                .iter()
                .map(|(f, o)| f.final_avg_map.unwrap_or(f64::NAN) - o.final_avg_map.unwrap_or(f64::NAN))
                .collect();
            let fdeltas: Vec<f64> = pairs
                .iter()
                .filter_map(|(f, o)| Some(f.final_forgetting? - o.final_forgetting?))
                .collect();
            ablations.push(AblationDelta {
                variant,
                seeds: pairs.len(),
                map_delta: mean(&deltas),
                fedstil_wins: deltas.iter().filter(|&&d| d > 0.0).count(),
                forgetting_delta: (!fdeltas.is_empty()).then(|| mean(&fdeltas)),
            });
        }
    }
    SweepReport {
        runs,
        rows,
        ablations,
    }
}

impl SweepReport {
    /// Plain-text tables for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:>4} {:>16} {:>8} {:>10} {:>14} {:>14}",
            "strategy", "runs", "mAP (mean±sd)", "rank-1", "forgetting", "S2C bytes", "C2S bytes"
        );
        for r in &self.rows {
            let forget = r
                .mean_forgetting
                .map_or_else(|| "-".to_string(), |f| format!("{f:.4}"));
            let _ = writeln!(
                out,
                "{:<22} {:>4} {:>9.4}±{:<6.4} {:>8.4} {:>10} {:>14.0} {:>14.0}",
                r.strategy.as_str(),
                r.runs,
                r.mean_map,
                r.std_map,
                r.mean_rank1,
                forget,
                r.mean_s2c_bytes,
                r.mean_c2s_bytes
            );
        }
        if !self.ablations.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<22} {:>5} {:>12} {:>6} {:>16}",
                "fedstil vs", "seeds", "ΔmAP", "wins", "Δforgetting"
            );
            for a in &self.ablations {
                let fd = a
                    .forgetting_delta
                    .map_or_else(|| "-".to_string(), |f| format!("{f:+.4}"));
                let _ = writeln!(
                    out,
                    "{:<22} {:>5} {:>+12.4} {:>6} {:>16}",
                    a.variant.as_str(),
                    a.seeds,
                    a.map_delta,
                    format!("{}/{}", a.fedstil_wins, a.seeds),
                    fd
                );
            }
        }
        out
    }
}
