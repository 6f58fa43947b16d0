//! Parameter server: task-feature history, uploaded parameters, task
//! similarity, forgetting-discounted knowledge relevance and personalized
//! aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::TaskFeature;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::numeric::{kl_divergence, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    /// Geometric discount applied to older neighbour tasks, in (0, 1).
    pub forgetting_ratio: f64,
    /// How many past rounds of neighbour history enter the relevance sum.
    pub window: usize,
    /// Softmax temperature applied to task features before KL.
    pub temperature: f64,
    /// Let a client's own upload contribute to its base parameters.
    pub include_self: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            forgetting_ratio: 0.5,
            window: 5,
            temperature: 1.0,
            include_self: false,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.forgetting_ratio > 0.0 && self.forgetting_ratio < 1.0) {
            return Err(Error::Config("server.forgetting_ratio must lie in (0, 1)".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("server.temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Per-client task features for the last `window + 1` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHistory {
    window: usize,
    features: BTreeMap<usize, BTreeMap<usize, TaskFeature>>,
}

impl FeatureHistory {
    pub fn new(window: usize) -> Self {
        FeatureHistory {
            window,
            features: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, feature: TaskFeature) -> Result<()> {
        let per_client = self.features.entry(feature.client).or_default();
        if let Some((&last, _)) = per_client.last_key_value() {
            if feature.round < last {
                return Err(Error::Ordering {
                    client: feature.client,
                    round: feature.round,
                    last,
                });
            }
        }
        let oldest_kept = feature.round.saturating_sub(self.window);
        per_client.insert(feature.round, feature);
        per_client.retain(|&r, _| r >= oldest_kept);
        Ok(())
    }

    pub fn get(&self, client: usize, round: usize) -> Option<&TaskFeature> {
        self.features.get(&client)?.get(&round)
    }

    pub fn rounds(&self, client: usize) -> Vec<usize> {
        self.features
            .get(&client)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredParams {
    pub theta: ParamVector,
    pub round: usize,
}

/// Latest composed parameters uploaded by each client.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<usize, StoredParams>,
}

impl ParamStore {
    pub fn record_params(&mut self, client: usize, theta: ParamVector, round: usize) -> Result<()> {
        if let Some(existing) = self.entries.values().next() {
            if existing.theta.len() != theta.len() {
                return Err(Error::dim(existing.theta.len(), theta.len()));
            }
        }
        if let Some(prev) = self.entries.get(&client) {
            if round < prev.round {
                return Err(Error::Ordering {
                    client,
                    round,
                    last: prev.round,
                });
            }
        }
        self.entries.insert(client, StoredParams { theta, round });
        Ok(())
    }

    pub fn get(&self, client: usize) -> Option<&StoredParams> {
        self.entries.get(&client)
    }

    pub fn clients(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `S = exp(-KL(softmax(f_i / τ) || softmax(f_j / τ)))`, in `(0, 1]`.
pub fn task_similarity(f_i: &TaskFeature, f_j: &TaskFeature, temperature: f64) -> Result<f64> {
    if f_i.mean.len() != f_j.mean.len() {
        return Err(Error::dim(f_i.mean.len(), f_j.mean.len()));
    }
    let p = softmax(&f_i.mean, temperature)?;
    let q = softmax(&f_j.mean, temperature)?;
    Ok((-kl_divergence(&p, &q)?).exp())
}

/// Knowledge relevance of neighbours `j` for client `i` at round `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceRow {
    pub client: usize,
    pub round: usize,
    /// Discounted similarity sums before normalization.
    pub raw: BTreeMap<usize, f64>,
    /// `raw` normalized to sum to one; empty when no candidate has history.
    pub weights: BTreeMap<usize, f64>,
}

impl RelevanceRow {
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Equal weights over `clients`.
    pub fn uniform(client: usize, round: usize, clients: &[usize]) -> Self {
        let w = 1.0 / clients.len() as f64;
        let weights: BTreeMap<usize, f64> = clients.iter().map(|&j| (j, w)).collect();
        RelevanceRow {
            client,
            round,
            raw: weights.clone(),
            weights,
        }
    }
}

/// Scales non-negative relevance scores to sum to one.
pub fn normalize_weights(raw: &BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
    let sum: f64 = raw.values().sum();
    raw.iter().map(|(&j, &r)| (j, r / sum)).collect()
}

/// `raw_ij = sum_{t' = max(0, t-k)}^{t} λ^(t-t') S(f_i^(t), f_j^(t'))` over
/// the rounds `t'` where `j` has a recorded feature, then normalized.
/// Candidates without any feature in the window are left out.
pub fn knowledge_relevance(
    history: &FeatureHistory,
    client: usize,
    round: usize,
    cfg: &ServerConfig,
    candidates: &[usize],
) -> Result<RelevanceRow> {
    let own = history
        .get(client, round)
        .ok_or(Error::MissingFeature { client, round })?;
    let mut raw = BTreeMap::new();
    for &j in candidates {
        let mut total = 0.0;
        let mut seen = false;
        for t_past in round.saturating_sub(cfg.window)..=round {
            if let Some(f_j) = history.get(j, t_past) {
                let discount = cfg.forgetting_ratio.powi((round - t_past) as i32);
                total += discount * task_similarity(own, f_j, cfg.temperature)?;
                seen = true;
            }
        }
        if seen {
            raw.insert(j, total);
        }
    }
    let weights = normalize_weights(&raw);
    Ok(RelevanceRow {
        client,
        round,
        raw,
        weights,
    })
}

/// `B_i = sum_j w_ij θ_j`; all zeros for an empty row.
pub fn aggregate_base(store: &ParamStore, row: &RelevanceRow, param_len: usize) -> Result<ParamVector> {
    let mut base = vec![0.0; param_len];
    for (&j, &w) in &row.weights {
        let stored = store.get(j).ok_or_else(|| {
            Error::MissingParams(format!("client {j} is weighted but never uploaded"))
        })?;
        if stored.theta.len() != param_len {
            return Err(Error::dim(param_len, stored.theta.len()));
        }
        for (b, t) in base.iter_mut().zip(stored.theta.as_slice()) {
            *b += w * t;
        }
    }
    Ok(ParamVector::from_vec(base))
}

/// Unweighted mean of every stored upload (FedAvg dispatch).
pub fn uniform_aggregate(store: &ParamStore) -> Result<ParamVector> {
    let first = store
        .entries
        .values()
        .next()
        .ok_or_else(|| Error::MissingParams("no client has uploaded".into()))?;
    let mut mean = vec![0.0; first.theta.len()];
    for stored in store.entries.values() {
        for (m, t) in mean.iter_mut().zip(stored.theta.as_slice()) {
            *m += t;
        }
    }
    let n = store.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(ParamVector::from_vec(mean))
}

/// The server as a single logical actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterServer {
    pub cfg: ServerConfig,
    pub history: FeatureHistory,
    pub store: ParamStore,
    /// Global model handed out while a client has no usable neighbour upload.
    initial: ParamVector,
}

impl ParameterServer {
    pub fn new(cfg: ServerConfig, initial: ParamVector) -> Self {
        ParameterServer {
            history: FeatureHistory::new(cfg.window),
            store: ParamStore::default(),
            cfg,
            initial,
        }
    }

    pub fn param_len(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &ParamVector {
        &self.initial
    }

    pub fn record_feature(&mut self, feature: TaskFeature) -> Result<()> {
        self.history.record(feature)
    }

    pub fn record_params(&mut self, client: usize, theta: ParamVector, round: usize) -> Result<()> {
        if theta.len() != self.param_len() {
            return Err(Error::dim(self.param_len(), theta.len()));
        }
        self.store.record_params(client, theta, round)
    }

    /// Uploaded clients eligible to contribute to `client`'s base.
    pub fn candidates(&self, client: usize) -> Vec<usize> {
        self.store
            .clients()
            .filter(|&j| self.cfg.include_self || j != client)
            .collect()
    }

    pub fn relevance(&self, client: usize, round: usize) -> Result<RelevanceRow> {
        knowledge_relevance(&self.history, client, round, &self.cfg, &self.candidates(client))
    }

    fn base_for(&self, row: &RelevanceRow) -> Result<ParamVector> {
        if row.is_empty() {
            Ok(self.initial.clone())
        } else {
            aggregate_base(&self.store, row, self.param_len())
        }
    }

    /// Relevance-weighted personalized base parameters; the initial global
    /// model when no candidate has uploaded yet.
    pub fn dispatch_personalized(&self, client: usize, round: usize) -> Result<(ParamVector, RelevanceRow)> {
        let row = self.relevance(client, round)?;
        Ok((self.base_for(&row)?, row))
    }

    /// Equal weights over the same candidates the personalized dispatch uses.
    pub fn dispatch_uniform(&self, client: usize, round: usize) -> Result<(ParamVector, RelevanceRow)> {
        let candidates = self.candidates(client);
        let row = if candidates.is_empty() {
            RelevanceRow {
                client,
                round,
                raw: BTreeMap::new(),
                weights: BTreeMap::new(),
            }
        } else {
            RelevanceRow::uniform(client, round, &candidates)
        };
        Ok((self.base_for(&row)?, row))
    }

    /// FedAvg: mean over every upload including the client's own; the
    /// initial global model before the first upload.
    pub fn dispatch_fedavg(&self) -> Result<ParamVector> {
        if self.store.is_empty() {
            Ok(self.initial.clone())
        } else {
            uniform_aggregate(&self.store)
        }
    }
}
