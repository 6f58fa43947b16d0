//! Retrieval evaluation (mAP, CMC), lifelong accuracy and forgetting, and
//! communication accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::ExtractionLayer;
use crate::error::{Error, Result};
use crate::model::{embed, LayerShapes, ParamVector};
use crate::numeric::{pairwise_sq_euclidean, Matrix};
use crate::stream::TaskBatch;

/// CMC cut-offs reported per task.
pub const RANKS: [usize; 3] = [1, 3, 5];

/// Bytes per transferred parameter.
pub const BYTES_PER_FLOAT: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScore {
    pub map: f64,
    /// Rank-k accuracy keyed by k.
    pub cmc: BTreeMap<usize, f64>,
    pub valid_queries: usize,
    /// Queries whose identity never occurs in the gallery.
    pub skipped_queries: usize,
}

/// Ranks the gallery for every query by squared euclidean distance (ties
/// keep gallery order) and scores mAP and CMC over queries that have at
/// least one positive.
pub fn evaluate_retrieval(
    queries: &Matrix,
    query_labels: &[usize],
    gallery: &Matrix,
    gallery_labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalScore> {
    if query_labels.len() != queries.rows() {
        return Err(Error::dim(queries.rows(), query_labels.len()));
    }
    if gallery_labels.len() != gallery.rows() {
        return Err(Error::dim(gallery.rows(), gallery_labels.len()));
    }
    let dist = pairwise_sq_euclidean(queries, gallery)?;
    let mut ap_sum = 0.0;
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut valid = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(gallery.rows());
    for (qi, &label) in query_labels.iter().enumerate() {
        if !gallery_labels.contains(&label) {
            continue;
        }
        valid += 1;
        let row = dist.row(qi);
        order.clear();
        order.extend(0..gallery.rows());
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (rank0, &g) in order.iter().enumerate() {
            if gallery_labels[g] == label {
                found += 1;
                precision_sum += found as f64 / (rank0 + 1) as f64;
                first_hit.get_or_insert(rank0 + 1);
            }
        }
        ap_sum += precision_sum / found as f64;
        let first = first_hit.expect("query has a positive");
        for (k, h) in hits.iter_mut() {
            if first <= *k {
                *h += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::EmptyEval(format!(
            "none of {} queries has a positive in the gallery",
            query_labels.len()
        )));
    }
    let n = valid as f64;
    Ok(RetrievalScore {
        map: ap_sum / n,
        cmc: hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect(),
        valid_queries: valid,
        skipped_queries: query_labels.len() - valid,
    })
}

/// Query-role samples of every client other than `querying_client`, in
/// (client, round, sample) order, projected and embedded with `theta`.
pub fn build_gallery<'a>(
    batches: impl IntoIterator<Item = &'a TaskBatch>,
    querying_client: usize,
    extractor: &ExtractionLayer,
    theta: &ParamVector,
    shapes: &LayerShapes,
) -> Result<(Matrix, Vec<usize>)> {
    let mut batches: Vec<&TaskBatch> = batches
        .into_iter()
        .filter(|b| b.client != querying_client)
        .collect();
    batches.sort_by_key(|b| (b.client, b.round));
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for s in batches.iter().flat_map(|b| &b.query) {
        rows.push(extractor.project(&s.features)?.into_inner());
        labels.push(s.identity);
    }
    if rows.is_empty() {
        return Err(Error::EmptyEval(format!(
            "gallery for client {querying_client} is empty"
        )));
    }
    let protos = Matrix::from_rows(&rows)?;
    Ok((embed(theta, shapes, &protos)?, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub map: f64,
    pub rank1: f64,
    pub rank3: f64,
    pub rank5: f64,
}

impl TaskAccuracy {
    pub fn from_score(score: &RetrievalScore) -> Self {
        let at = |k: usize| score.cmc.get(&k).copied().unwrap_or(f64::NAN);
        TaskAccuracy {
            map: score.map,
            rank1: at(1),
            rank3: at(3),
            rank5: at(5),
        }
    }
}

/// `client → evaluation round → task index → accuracy`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTimeline {
    entries: BTreeMap<usize, BTreeMap<usize, BTreeMap<usize, TaskAccuracy>>>,
}

impl AccuracyTimeline {
    pub fn record(&mut self, client: usize, round: usize, task: usize, acc: TaskAccuracy) {
        self.entries
            .entry(client)
            .or_default()
            .entry(round)
            .or_default()
            .insert(task, acc);
    }

    pub fn at(&self, client: usize, round: usize) -> Option<&BTreeMap<usize, TaskAccuracy>> {
        self.entries.get(&client)?.get(&round)
    }

    pub fn get(&self, client: usize, round: usize, task: usize) -> Option<&TaskAccuracy> {
        self.at(client, round)?.get(&task)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Evaluated rounds for `client`, ascending.
    pub fn rounds(&self, client: usize) -> Vec<usize> {
        self.entries
            .get(&client)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }
}

/// Mean mAP over every task `client` has seen, evaluated at `round`.
pub fn avg_accuracy(timeline: &AccuracyTimeline, client: usize, round: usize) -> Result<f64> {
    avg_of(timeline, client, round, |a| a.map)
}

/// [`avg_accuracy`] for an arbitrary accuracy field.
pub fn avg_of(
    timeline: &AccuracyTimeline,
    client: usize,
    round: usize,
    field: impl Fn(&TaskAccuracy) -> f64,
) -> Result<f64> {
    let tasks = timeline
        .at(client, round)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| {
            Error::EmptyEval(format!("client {client} has no evaluated task at round {round}"))
        })?;
    Ok(tasks.values().map(field).sum::<f64>() / tasks.len() as f64)
}

/// Mean drop from each earlier task's best mAP (over evaluated rounds up to
/// `round`) to its mAP at `round`. The newest task is excluded.
pub fn forgetting(timeline: &AccuracyTimeline, client: usize, round: usize) -> Result<f64> {
    let current = timeline.at(client, round).map_or(0, BTreeMap::len);
    if current < 2 {
        return Err(Error::UndefinedForgetting {
            client,
            round,
            tasks: current,
        });
    }
    let tasks = timeline.at(client, round).expect("checked above");
    let newest = *tasks.keys().next_back().expect("non-empty");
    let rounds = timeline.rounds(client);
    let mut total = 0.0;
    let mut count = 0usize;
    for (&task, now) in tasks.iter().filter(|(&t, _)| t != newest) {
        let best = rounds
            .iter()
            .filter(|&&r| r <= round)
            .filter_map(|&r| timeline.get(client, r, task))
            .map(|a| a.map)
            .fold(f64::NEG_INFINITY, f64::max);
        total += best - now.map;
        count += 1;
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCounts {
    pub s2c_floats: u64,
    pub c2s_floats: u64,
}

impl CommCounts {
    pub fn s2c_bytes(&self) -> u64 {
        self.s2c_floats * BYTES_PER_FLOAT
    }

    pub fn c2s_bytes(&self) -> u64 {
        self.c2s_floats * BYTES_PER_FLOAT
    }
}

/// Transferred floats per (round, client).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    rounds: BTreeMap<usize, BTreeMap<usize, CommCounts>>,
}

impl CommLedger {
    pub fn get(&self, round: usize, client: usize) -> CommCounts {
        self.rounds
            .get(&round)
            .and_then(|m| m.get(&client))
            .copied()
            .unwrap_or_default()
    }

    pub fn totals(&self) -> CommCounts {
        let mut t = CommCounts::default();
        for c in self.rounds.values().flat_map(|m| m.values()) {
            t.s2c_floats += c.s2c_floats;
            t.c2s_floats += c.c2s_floats;
        }
        t
    }

    pub fn is_zero(&self) -> bool {
        self.totals() == CommCounts::default()
    }
}

/// Each participant uploads θ plus its task feature and receives one base
/// parameter vector.
pub fn account_round(
    ledger: &mut CommLedger,
    round: usize,
    param_len: usize,
    feature_len: usize,
    participants: &[usize],
) {
    for &client in participants {
        let entry = ledger
            .rounds
            .entry(round)
            .or_default()
            .entry(client)
            .or_default();
        entry.c2s_floats += (param_len + feature_len) as u64;
        entry.s2c_floats += param_len as u64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Map,
    Rank1,
    Rank3,
    Rank5,
    AvgMapEq7,
    ForgettingEq8,
    S2cBytes,
    C2sBytes,
    SkippedQueries,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Map,
        Metric::Rank1,
        Metric::Rank3,
        Metric::Rank5,
        Metric::AvgMapEq7,
        Metric::ForgettingEq8,
        Metric::S2cBytes,
        Metric::C2sBytes,
        Metric::SkippedQueries,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Map => "map",
            Metric::Rank1 => "rank1",
            Metric::Rank3 => "rank3",
            Metric::Rank5 => "rank5",
            Metric::AvgMapEq7 => "avg_map_eq7",
            Metric::ForgettingEq8 => "forgetting_eq8",
            Metric::S2cBytes => "s2c_bytes",
            Metric::C2sBytes => "c2s_bytes",
            Metric::SkippedQueries => "skipped_queries",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub client: usize,
    pub strategy: String,
    pub metric: Metric,
    /// Present for per-task metrics only.
    pub task_index: Option<usize>,
    pub value: f64,
}

pub const LOG_HEADER: &str = "round,client,strategy,metric,task_index,value";

/// Rows in emission order; serialized as CSV with [`LOG_HEADER`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(
        &mut self,
        round: usize,
        client: usize,
        strategy: &str,
        metric: Metric,
        task_index: Option<usize>,
        value: f64,
    ) {
        self.rows.push(MetricRow {
            round,
            client,
            strategy: strategy.to_string(),
            metric,
            task_index,
            value,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let task = r.task_index.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round, r.client, r.strategy, r.metric, task, r.value
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == LOG_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header {LOG_HEADER:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::Parse {
                line: i + 1,
                message: m,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 fields, found {}", f.len())));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer {s:?}")));
            rows.push(MetricRow {
                round: int(f[0])?,
                client: int(f[1])?,
                strategy: f[2].to_string(),
                metric: f[3].parse().map_err(bad)?,
                task_index: if f[4].is_empty() { None } else { Some(int(f[4])?) },
                value: f[5]
                    .parse()
                    .map_err(|_| bad(format!("bad value {:?}", f[5])))?,
            });
        }
        Ok(MetricsLog { rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

/// Final-round aggregates of one run, recomputable from its log alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub final_round: Option<usize>,
    /// Client mean of the per-client average mAP at the final round.
    pub final_avg_map: Option<f64>,
    pub final_rank1: Option<f64>,
    pub final_rank3: Option<f64>,
    pub final_rank5: Option<f64>,
    /// Client mean of forgetting at the final round (clients with ≥ 2 tasks).
    pub final_forgetting: Option<f64>,
    pub total_s2c_bytes: u64,
    pub total_c2s_bytes: u64,
    pub skipped_queries: u64,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(log: &MetricsLog, strategy: &str) -> RunSummary {
    let final_round = log
        .rows
        .iter()
        .filter(|r| r.metric == Metric::AvgMapEq7)
        .map(|r| r.round)
        .max();
    let at_final = |metric: Metric| {
        log.rows
            .iter()
            .filter(move |r| Some(r.round) == final_round && r.metric == metric)
    };
    // Per-task CMC rows are first averaged per client, then across clients.
    let per_client_mean = |metric: Metric| {
        let mut by_client: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in at_final(metric) {
            by_client.entry(r.client).or_default().push(r.value);
        }
        mean(by_client.into_values().filter_map(mean))
    };
    let total = |metric: Metric| {
        log.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| r.value as u64)
            .sum()
    };
    RunSummary {
        strategy: strategy.to_string(),
        final_round,
        final_avg_map: mean(at_final(Metric::AvgMapEq7).map(|r| r.value)),
        final_rank1: per_client_mean(Metric::Rank1),
        final_rank3: per_client_mean(Metric::Rank3),
        final_rank5: per_client_mean(Metric::Rank5),
        final_forgetting: mean(at_final(Metric::ForgettingEq8).map(|r| r.value)),
        total_s2c_bytes: total(Metric::S2cBytes),
        total_c2s_bytes: total(Metric::C2sBytes),
        skipped_queries: total(Metric::SkippedQueries),
    }
}

#[cfg(test)]
mod tests;
