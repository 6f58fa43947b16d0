//! Edge-client logic: frozen prototype extraction, task features, the
//! nearest-mean-of-exemplars rehearsal memory, and local training.
//!
//! Raw samples stop at [`ExtractionLayer::extract_prototypes`]; everything
//! downstream (training, memory, what the server sees) works on
//! prototypes, task-feature means and composed parameters only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    adam_step, compose, embed, loss_and_grad, AdamConfig, AdamState, AdaptiveParams, LayerShapes,
    ParamVector,
};
use crate::numeric::{matvec_transposed, sq_distance, Matrix, SeededRng, Vector};
use crate::stream::{RawSample, TaskBatch};

/// Frozen random projection shared by every client.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionLayer {
    projection: Matrix,
}

impl ExtractionLayer {
    /// Entries drawn i.i.d. `N(0, 1/raw_dim)`, so each prototype coordinate
    /// keeps roughly the per-coordinate variance of the raw features.
    pub fn random(raw_dim: usize, proto_dim: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let scale = (1.0 / raw_dim as f64).sqrt();
        let values = (0..raw_dim * proto_dim).map(|_| scale * rng.normal()).collect();
        ExtractionLayer {
            projection: Matrix::from_trusted(raw_dim, proto_dim, values),
        }
    }

    pub fn from_matrix(projection: Matrix) -> Self {
        ExtractionLayer { projection }
    }

    pub fn raw_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn proto_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// `projectionᵀ · raw`.
    pub fn project(&self, raw: &Vector) -> Result<Vector> {
        matvec_transposed(&self.projection, raw)
    }

    pub fn prototype(&self, sample: &RawSample) -> Result<Prototype> {
        Ok(Prototype {
            features: self.project(&sample.features)?,
            identity: sample.identity,
            source_round: sample.round,
        })
    }

    /// Prototypes of the batch's training samples.
    pub fn extract_prototypes(&self, batch: &TaskBatch) -> Result<Vec<Prototype>> {
        batch.train.iter().map(|s| self.prototype(s)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub features: Vector,
    pub identity: usize,
    pub source_round: usize,
}

/// Stacks prototype features into a batch matrix.
pub fn stack(prototypes: &[&Prototype]) -> Result<Matrix> {
    Matrix::from_rows(
        &prototypes
            .iter()
            .map(|p| p.features.as_slice())
            .collect::<Vec<_>>(),
    )
}

/// Mean prototype of one client's task at one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFeature {
    pub mean: Vector,
    pub client: usize,
    pub round: usize,
    pub count: usize,
}

pub fn task_feature(prototypes: &[Prototype], client: usize, round: usize) -> Result<TaskFeature> {
    let first = prototypes.first().ok_or_else(|| {
        Error::EmptyTask(format!("client {client} has no prototypes at round {round}"))
    })?;
    let dim = first.features.len();
    let mut sum = vec![0.0; dim];
    for p in prototypes {
        if p.features.len() != dim {
            return Err(Error::dim(dim, p.features.len()));
        }
        for (s, v) in sum.iter_mut().zip(p.features.iter()) {
            *s += v;
        }
    }
    let n = prototypes.len() as f64;
    Ok(TaskFeature {
        mean: Vector::new(sum.into_iter().map(|s| s / n).collect())?,
        client,
        round,
        count: prototypes.len(),
    })
}

/// Bounded prototype store, grouped by identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RehearsalMemory {
    budget: usize,
    per_identity_quota: usize,
    groups: BTreeMap<usize, Vec<Prototype>>,
}

impl RehearsalMemory {
    pub fn new(budget: usize, per_identity_quota: usize) -> Self {
        assert!(budget > 0, "memory budget must be positive");
        RehearsalMemory {
            budget,
            per_identity_quota,
            groups: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &BTreeMap<usize, Vec<Prototype>> {
        &self.groups
    }

    pub fn entries(&self) -> impl Iterator<Item = &Prototype> {
        self.groups.values().flatten()
    }

    /// Squared distances of each prototype's embedding to the group's mean
    /// embedding under `theta`.
    fn distances_to_center(
        theta: &ParamVector,
        shapes: &LayerShapes,
        group: &[&Prototype],
    ) -> Result<Vec<f64>> {
        let emb = embed(theta, shapes, &stack(group)?)?;
        let h = emb.cols();
        let mut center = vec![0.0; h];
        for i in 0..emb.rows() {
            for (c, v) in center.iter_mut().zip(emb.row(i)) {
                *c += v;
            }
        }
        let n = emb.rows() as f64;
        center.iter_mut().for_each(|c| *c /= n);
        Ok((0..emb.rows())
            .map(|i| sq_distance(emb.row(i), &center))
            .collect())
    }

    /// Nearest-mean-of-exemplars admission followed by balanced eviction.
    ///
    /// For each identity in the task, the `per_identity_quota` prototypes
    /// whose embeddings lie closest to that identity's mean embedding are
    /// admitted (ties keep task order). While over budget, the largest group
    /// (lowest identity on ties) loses its entry farthest from the group's
    /// current mean embedding (latest entry on ties).
    pub fn update(
        &mut self,
        theta: &ParamVector,
        shapes: &LayerShapes,
        prototypes: &[Prototype],
    ) -> Result<()> {
        let mut by_identity: BTreeMap<usize, Vec<&Prototype>> = BTreeMap::new();
        for p in prototypes {
            by_identity.entry(p.identity).or_default().push(p);
        }
        for (identity, group) in by_identity {
            let dist = Self::distances_to_center(theta, shapes, &group)?;
            let mut order: Vec<usize> = (0..group.len()).collect();
            order.sort_by(|&i, &j| dist[i].total_cmp(&dist[j]).then(i.cmp(&j)));
            let admitted: Vec<Prototype> = order
                .into_iter()
                .take(self.per_identity_quota)
                .map(|i| group[i].clone())
                .collect();
            if !admitted.is_empty() {
                self.groups.entry(identity).or_default().extend(admitted);
            }
        }
        while self.len() > self.budget {
            let (&victim, _) = self
                .groups
                .iter()
                .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
                .expect("non-empty memory");
            let group = self.groups.get_mut(&victim).expect("victim exists");
            let refs: Vec<&Prototype> = group.iter().collect();
            let dist = Self::distances_to_center(theta, shapes, &refs)?;
            let far = (0..dist.len())
                .max_by(|&i, &j| dist[i].total_cmp(&dist[j]).then(i.cmp(&j)))
                .expect("non-empty group");
            group.remove(far);
            if group.is_empty() {
                self.groups.remove(&victim);
            }
        }
        Ok(())
    }
}

fn draw<'a>(pool: &[&'a Prototype], k: usize, rng: &mut SeededRng) -> Vec<&'a Prototype> {
    if pool.len() >= k {
        rng.sample_distinct(pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..k).map(|_| pool[rng.below(pool.len())]).collect()
    }
}

/// Mixes `ceil(rho * batch_size)` rehearsed prototypes with current-task
/// ones. An empty memory (or an empty current task) hands its share to the
/// other pool. Pools smaller than their share are sampled with replacement.
pub fn sample_training_batch<'a>(
    memory: &'a RehearsalMemory,
    current: &'a [Prototype],
    batch_size: usize,
    rehearsal_fraction: f64,
    rng: &mut SeededRng,
) -> Result<Vec<&'a Prototype>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&rehearsal_fraction) {
        return Err(Error::InvalidInput(format!(
            "rehearsal fraction {rehearsal_fraction} outside [0, 1)"
        )));
    }
    let stored: Vec<&Prototype> = memory.entries().collect();
    let fresh: Vec<&Prototype> = current.iter().collect();
    if stored.is_empty() && fresh.is_empty() {
        return Err(Error::EmptyTask("no current or stored prototypes".into()));
    }
    let mut from_memory = (rehearsal_fraction * batch_size as f64).ceil() as usize;
    if stored.is_empty() {
        from_memory = 0;
    } else if fresh.is_empty() {
        from_memory = batch_size;
    }
    let mut batch = draw(&stored, from_memory, rng);
    batch.extend(draw(&fresh, batch_size - from_memory, rng));
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rehearsal_fraction: f64,
    pub tie_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without a new best epoch loss before stopping.
    pub patience: usize,
    /// Keep attention fixed at its current value (1 unless trained).
    pub freeze_alpha: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            rehearsal_fraction: 0.3,
            tie_weight: 0.01,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            patience: 3,
            freeze_alpha: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rehearsal_fraction) {
            return Err(Error::Config(
                "training.rehearsal_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.tie_weight >= 0.0) {
            return Err(Error::Config("training.tie_weight must be >= 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("training.lr must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("training.weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("training betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("training.eps must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one edge client owns across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub params: AdaptiveParams,
    pub memory: RehearsalMemory,
    pub optimizer: AdamState,
}

impl ClientState {
    pub fn new(id: usize, params: AdaptiveParams, memory: RehearsalMemory) -> Self {
        let optimizer = AdamState::new(params.len());
        ClientState {
            id,
            params,
            memory,
            optimizer,
        }
    }

    /// Admits the task's exemplars under the client's current composed parameters.
    pub fn update_memory(&mut self, shapes: &LayerShapes, prototypes: &[Prototype]) -> Result<()> {
        let theta = compose(&self.params)?;
        self.memory.update(&theta, shapes, prototypes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Composed parameters to upload.
    pub theta: ParamVector,
    pub epoch_losses: Vec<f64>,
}

/// One round of local training on the current task (plus rehearsal).
pub fn train_local(
    state: &mut ClientState,
    shapes: &LayerShapes,
    task: &[Prototype],
    base: ParamVector,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TrainOutcome> {
    if task.is_empty() {
        return Err(Error::EmptyTask(format!(
            "client {} has no training prototypes",
            state.id
        )));
    }
    state.params.install_base(base)?;
    state.params.snapshot_anchors();
    let adam = cfg.adam();
    let steps = task.len().div_ceil(cfg.batch_size);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = sample_training_batch(
                &state.memory,
                task,
                cfg.batch_size,
                cfg.rehearsal_fraction,
                rng,
            )?;
            let x = stack(&batch)?;
            let labels: Vec<usize> = batch.iter().map(|p| p.identity).collect();
            let lg = loss_and_grad(&state.params, shapes, &x, &labels, cfg.tie_weight)?;
            let grad_alpha = (!cfg.freeze_alpha).then_some(&lg.grad_alpha);
            adam_step(&mut state.params, &lg.grad_a, grad_alpha, &mut state.optimizer, &adam)?;
            total += lg.loss;
        }
        let loss = total / steps as f64;
        if !loss.is_finite() {
            return Err(Error::InvalidInput(format!(
                "client {} diverged: epoch loss {loss}",
                state.id
            )));
        }
        epoch_losses.push(loss);
        if loss < best {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        theta: compose(&state.params)?,
        epoch_losses,
    })
}
