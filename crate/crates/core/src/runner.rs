//! Experiment orchestration: the round loop, strategy variants, output
//! files, checkpoint/resume and multi-seed sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{task_feature, train_local, ClientState, ExtractionLayer, Prototype, RehearsalMemory, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    account_round, avg_accuracy, evaluate_retrieval, forgetting, summarize, AccuracyTimeline,
    CommLedger, Metric, MetricsLog, RunSummary, TaskAccuracy, RANKS,
};
use crate::model::{compose, embed, from_base, init_adaptive, save_checkpoint, LayerShapes, ParamVector};
use crate::numeric::{derive_seed, Matrix, SeededRng};
use crate::server::{ParameterServer, RelevanceRow};
use crate::stream::{load_embedding_file, TaskStream};

mod config;
mod report;

pub use config::{apply_env_overrides, ExperimentConfig, MemoryConfig, ModelConfig, RunConfig, ENV_PREFIX};
pub use report::{aggregate, build_report, AblationDelta, RunRecord, StrategyRow, SweepReport};

const TAG_EXTRACTOR: u64 = 11;
const TAG_INIT: u64 = 12;
const TAG_TRAIN: u64 = 13;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const STATE_FILE: &str = "state.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fedstil,
    Fedavg,
    Local,
    FedstilNoSt,
    FedstilNoRehearsal,
    FedstilNoTying,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Fedstil,
        Strategy::Fedavg,
        Strategy::Local,
        Strategy::FedstilNoSt,
        Strategy::FedstilNoRehearsal,
        Strategy::FedstilNoTying,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Fedstil => "fedstil",
            Strategy::Fedavg => "fedavg",
            Strategy::Local => "local",
            Strategy::FedstilNoSt => "fedstil_no_st",
            Strategy::FedstilNoRehearsal => "fedstil_no_rehearsal",
            Strategy::FedstilNoTying => "fedstil_no_tying",
        }
    }

    /// Whether the strategy talks to the server at all.
    pub fn exchanges(self) -> bool {
        self != Strategy::Local
    }

    /// Whether dispatch depends on uploaded task features.
    pub fn uses_task_features(self) -> bool {
        matches!(
            self,
            Strategy::Fedstil | Strategy::FedstilNoRehearsal | Strategy::FedstilNoTying
        )
    }

    pub fn rehearses(self) -> bool {
        self != Strategy::FedstilNoRehearsal
    }

    /// The training settings this strategy actually runs with.
    pub fn training(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Strategy::Fedavg => {
                cfg.freeze_alpha = true;
                cfg.tie_weight = 0.0;
            }
            Strategy::FedstilNoRehearsal => cfg.rehearsal_fraction = 0.0,
            Strategy::FedstilNoTying => cfg.tie_weight = 0.0,
            _ => {}
        }
        cfg
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
                Error::Config(format!("unknown strategy {s:?} (expected one of {})", known.join(", ")))
            })
    }
}

/// Everything that evolves across rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Rounds completed so far.
    pub round: usize,
    pub clients: Vec<ClientState>,
    pub server: ParameterServer,
    pub ledger: CommLedger,
    pub timeline: AccuracyTimeline,
    pub log: MetricsLog,
    pub stream_checksum: u64,
}

impl RunState {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("bad run state: {e}")))
    }
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Clients with training data this round.
    pub participants: Vec<usize>,
    /// Base parameters handed to each participant.
    pub dispatched: BTreeMap<usize, ParamVector>,
    /// Aggregation weights behind each dispatch (absent for fedavg/local).
    pub relevance: BTreeMap<usize, RelevanceRow>,
    pub epoch_losses: BTreeMap<usize, Vec<f64>>,
    pub evaluated: bool,
}

/// Immutable per-experiment context: configuration, data and the frozen extractor.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub stream: TaskStream,
    pub shapes: LayerShapes,
    pub extractor: ExtractionLayer,
    training: TrainConfig,
    /// Projected query prototypes and labels, `[round][client]`.
    queries: Vec<Vec<(Option<Matrix>, Vec<usize>)>>,
}

fn num_labels(stream: &TaskStream) -> usize {
    stream
        .batches()
        .flat_map(|b| b.samples())
        .map(|s| s.identity + 1)
        .max()
        .unwrap_or(1)
}

impl Experiment {
    /// Builds the stream the config describes (synthetic or file-backed).
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let stream = match &cfg.run.embedding_file {
            Some(path) => TaskStream::from_batches(load_embedding_file(path)?)?,
            None => TaskStream::generate(&cfg.stream)?,
        };
        Self::with_stream(cfg, stream)
    }

    /// Uses a caller-supplied stream instead of generating one.
    pub fn with_stream(cfg: ExperimentConfig, stream: TaskStream) -> Result<Self> {
        cfg.validate()?;
        if stream.num_clients < 2 {
            return Err(Error::Config("the stream must cover at least 2 clients".into()));
        }
        let labels = if cfg.run.embedding_file.is_some() {
            num_labels(&stream)
        } else {
            cfg.stream.num_identities.max(num_labels(&stream))
        };
        let shapes = cfg.shapes(labels)?;
        let extractor = ExtractionLayer::random(
            stream.raw_dim,
            shapes.proto_dim,
            derive_seed(cfg.run.seed, &[TAG_EXTRACTOR]),
        );
        let queries = stream
            .rounds
            .iter()
            .map(|round| {
                round
                    .iter()
                    .map(|b| {
                        let rows = b
                            .query
                            .iter()
                            .map(|s| extractor.project(&s.features).map(|v| v.into_inner()))
                            .collect::<Result<Vec<_>>>()?;
                        let labels = b.query.iter().map(|s| s.identity).collect();
                        let m = if rows.is_empty() { None } else { Some(Matrix::from_rows(&rows)?) };
                        Ok((m, labels))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let training = cfg.run.strategy.training(&cfg.training);
        Ok(Experiment {
            cfg,
            stream,
            shapes,
            extractor,
            training,
            queries,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.cfg.run.strategy
    }

    pub fn num_clients(&self) -> usize {
        self.stream.num_clients
    }

    pub fn num_rounds(&self) -> usize {
        self.stream.num_rounds()
    }

    /// Training settings after strategy switches.
    pub fn training(&self) -> &TrainConfig {
        &self.training
    }

    /// The shared pretrained adaptive-layer weights every client starts from.
    pub fn pretrained(&self) -> ParamVector {
        init_adaptive(&self.shapes, derive_seed(self.cfg.run.seed, &[TAG_INIT])).a
    }

    /// Clients start with the pretrained weights as their base and an empty
    /// local residual; the server holds the same weights as its initial
    /// global model.
    pub fn init_state(&self) -> RunState {
        let pretrained = self.pretrained();
        let clients = (0..self.num_clients())
            .map(|id| {
                ClientState::new(
                    id,
                    from_base(pretrained.clone()),
                    RehearsalMemory::new(self.cfg.memory.budget, self.cfg.memory.per_identity_quota),
                )
            })
            .collect();
        RunState {
            round: 0,
            clients,
            server: ParameterServer::new(self.cfg.server.clone(), pretrained),
            ledger: CommLedger::default(),
            timeline: AccuracyTimeline::default(),
            log: MetricsLog::default(),
            stream_checksum: self.stream.checksum(),
        }
    }

    fn should_evaluate(&self, round: usize) -> bool {
        round % self.cfg.run.eval_stride == 0 || round + 1 == self.num_rounds()
    }

    /// Runs round `state.round` and advances the counter.
    ///
    /// Features for the round are recorded first, then every dispatch is
    /// computed from the server's snapshot (neighbour uploads from the
    /// previous round), clients train in parallel, and uploads land last.
    pub fn run_round(&self, state: &mut RunState) -> Result<RoundReport> {
        let round = state.round;
        if round >= self.num_rounds() {
            return Err(Error::Range {
                what: "round",
                value: round,
                bound: self.num_rounds(),
            });
        }
        if state.stream_checksum != self.stream.checksum() {
            return Err(Error::InvalidInput(
                "run state was produced from a different stream".into(),
            ));
        }
        let strategy = self.strategy();

        let mut tasks: Vec<Vec<Prototype>> = Vec::with_capacity(self.num_clients());
        for c in 0..self.num_clients() {
            let protos = self
                .extractor
                .extract_prototypes(self.stream.batch(round, c))
                .map_err(|e| e.in_context(c, round))?;
            if !protos.is_empty() && strategy.uses_task_features() {
                let feature = task_feature(&protos, c, round).map_err(|e| e.in_context(c, round))?;
                state.server.record_feature(feature).map_err(|e| e.in_context(c, round))?;
            }
            tasks.push(protos);
        }
        let participants: Vec<usize> = (0..self.num_clients()).filter(|&c| !tasks[c].is_empty()).collect();

        let mut dispatched = BTreeMap::new();
        let mut relevance = BTreeMap::new();
        for &c in &participants {
            let base = match strategy {
                Strategy::Local => state.clients[c].params.b.clone(),
                Strategy::Fedavg => state.server.dispatch_fedavg().map_err(|e| e.in_context(c, round))?,
                Strategy::FedstilNoSt => {
                    let (b, row) = state.server.dispatch_uniform(c, round).map_err(|e| e.in_context(c, round))?;
                    relevance.insert(c, row);
                    b
                }
                _ => {
                    let (b, row) = state
                        .server
                        .dispatch_personalized(c, round)
                        .map_err(|e| e.in_context(c, round))?;
                    relevance.insert(c, row);
                    b
                }
            };
            dispatched.insert(c, base);
        }

        let seed = self.cfg.run.seed;
        let outcomes: Vec<(usize, Vec<f64>)> = state
            .clients
            .par_iter_mut()
            .filter(|client| dispatched.contains_key(&client.id))
            .map(|client| {
                let c = client.id;
                let mut rng = SeededRng::new(derive_seed(seed, &[TAG_TRAIN, c as u64, round as u64]));
                let outcome = train_local(
                    client,
                    &self.shapes,
                    &tasks[c],
                    dispatched[&c].clone(),
                    &self.training,
                    &mut rng,
                )
                .map_err(|e| e.in_context(c, round))?;
                if strategy.rehearses() {
                    client
                        .update_memory(&self.shapes, &tasks[c])
                        .map_err(|e| e.in_context(c, round))?;
                }
                Ok((c, outcome.epoch_losses))
            })
            .collect::<Result<Vec<_>>>()?;

        if strategy.exchanges() {
            for &c in &participants {
                let theta = compose(&state.clients[c].params)?;
                state.server.record_params(c, theta, round).map_err(|e| e.in_context(c, round))?;
            }
            let feature_len = if strategy.uses_task_features() {
                self.shapes.proto_dim
            } else {
                0
            };
            account_round(
                &mut state.ledger,
                round,
                self.shapes.param_count(),
                feature_len,
                &participants,
            );
        }

        let name = strategy.as_str();
        for c in 0..self.num_clients() {
            let counts = state.ledger.get(round, c);
            state.log.push(round, c, name, Metric::S2cBytes, None, counts.s2c_bytes() as f64);
            state.log.push(round, c, name, Metric::C2sBytes, None, counts.c2s_bytes() as f64);
        }

        let evaluated = self.should_evaluate(round);
        if evaluated {
            self.evaluate(state, round)?;
        }
        state.round += 1;
        Ok(RoundReport {
            round,
            participants,
            dispatched,
            relevance,
            epoch_losses: outcomes.into_iter().collect(),
            evaluated,
        })
    }

    /// Scores each client's query sets of rounds `0..=round` against the
    /// cross-client gallery, all embedded with the client's current model.
    fn evaluate(&self, state: &mut RunState, round: usize) -> Result<()> {
        let results: Vec<(BTreeMap<usize, TaskAccuracy>, usize)> = state
            .clients
            .par_iter()
            .map(|client| {
                let c = client.id;
                let theta = compose(&client.params)?;
                let mut gallery_rows: Vec<Matrix> = Vec::new();
                let mut gallery_labels = Vec::new();
                for other in (0..self.num_clients()).filter(|&o| o != c) {
                    for r in 0..self.num_rounds() {
                        let (m, labels) = &self.queries[r][other];
                        if let Some(m) = m {
                            gallery_rows.push(embed(&theta, &self.shapes, m)?);
                            gallery_labels.extend_from_slice(labels);
                        }
                    }
                }
                if gallery_labels.is_empty() {
                    return Err(Error::EmptyEval(format!("gallery for client {c} is empty")));
                }
                let gallery = Matrix::vstack(&gallery_rows)?;
                let mut tasks = BTreeMap::new();
                let mut skipped = 0;
                for task in 0..=round {
                    let (Some(q), labels) = &self.queries[task][c] else {
                        continue;
                    };
                    let q_emb = embed(&theta, &self.shapes, q)?;
                    match evaluate_retrieval(&q_emb, labels, &gallery, &gallery_labels, &RANKS) {
                        Ok(score) => {
                            skipped += score.skipped_queries;
                            tasks.insert(task, TaskAccuracy::from_score(&score));
                        }
                        Err(Error::EmptyEval(_)) => skipped += labels.len(),
                        Err(e) => return Err(e),
                    }
                }
                Ok((tasks, skipped))
            })
            .collect::<Result<Vec<_>>>()?;

        let name = self.strategy().as_str();
        for (c, (tasks, skipped)) in results.into_iter().enumerate() {
            for (&task, acc) in &tasks {
                state.timeline.record(c, round, task, *acc);
                let log = &mut state.log;
                log.push(round, c, name, Metric::Map, Some(task), acc.map);
                log.push(round, c, name, Metric::Rank1, Some(task), acc.rank1);
                log.push(round, c, name, Metric::Rank3, Some(task), acc.rank3);
                log.push(round, c, name, Metric::Rank5, Some(task), acc.rank5);
            }
            if !tasks.is_empty() {
                let avg = avg_accuracy(&state.timeline, c, round)?;
                state.log.push(round, c, name, Metric::AvgMapEq7, None, avg);
            }
            if tasks.len() >= 2 {
                let f = forgetting(&state.timeline, c, round)?;
                state.log.push(round, c, name, Metric::ForgettingEq8, None, f);
            }
            state.log.push(round, c, name, Metric::SkippedQueries, None, skipped as f64);
        }
        Ok(())
    }

    /// Runs rounds until `state.round == until`.
    pub fn run_until(&self, state: &mut RunState, until: usize) -> Result<()> {
        while state.round < until.min(self.num_rounds()) {
            self.run_round(state)?;
        }
        Ok(())
    }

    /// Runs every remaining round.
    pub fn run(&self, state: &mut RunState) -> Result<()> {
        self.run_until(state, self.num_rounds())
    }

    /// Every client's final composed parameters.
    pub fn final_params(&self, state: &RunState) -> Result<Vec<ParamVector>> {
        state.clients.iter().map(|c| compose(&c.params)).collect()
    }
}

/// Where a finished (or resumed) run left its files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub round_seconds: Vec<f64>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_progress(exp: &Experiment, state: &RunState, dir: &Path, seconds: &[f64]) -> Result<()> {
    state.log.write_csv(&dir.join(METRICS_FILE))?;
    let mut timings = String::from("round,seconds\n");
    for (r, s) in seconds.iter().enumerate() {
        timings.push_str(&format!("{r},{s:.6}\n"));
    }
    write_file(&dir.join(TIMINGS_FILE), &timings)?;
    if exp.cfg.run.checkpoint {
        write_file(&dir.join(STATE_FILE), &state.to_json())?;
    }
    Ok(())
}

fn read_timings(dir: &Path) -> Vec<f64> {
    std::fs::read_to_string(dir.join(TIMINGS_FILE))
        .map(|text| {
            text.lines()
                .skip(1)
                .filter_map(|l| l.split(',').nth(1)?.parse().ok())
                .collect()
        })
        .unwrap_or_default()
}

fn drive(exp: &Experiment, mut state: RunState, dir: &Path, mut seconds: Vec<f64>) -> Result<RunOutput> {
    seconds.truncate(state.round);
    while state.round < exp.num_rounds() {
        let start = Instant::now();
        exp.run_round(&mut state)?;
        seconds.push(start.elapsed().as_secs_f64());
        write_progress(exp, &state, dir, &seconds)?;
    }
    write_progress(exp, &state, dir, &seconds)?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    for client in &state.clients {
        save_checkpoint(&ckpt.join(format!("client_{}.bin", client.id)), &exp.shapes, &client.params)?;
    }
    let summary = summarize(&state.log, exp.strategy().as_str());
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join(SUMMARY_FILE), &json)?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        summary,
        round_seconds: seconds,
    })
}

/// Runs a full experiment, writing `config.toml`, `metrics.csv`,
/// `timings.csv`, `summary.json`, per-round `state.json` (when enabled)
/// and final per-client parameter checkpoints into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    let exp = Experiment::new(cfg.clone())?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml_string())?;
    let state = exp.init_state();
    drive(&exp, state, dir, Vec::new())
}

/// Continues the run stored in `dir` from its last `state.json`.
pub fn resume_experiment(dir: &Path) -> Result<RunOutput> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = ExperimentConfig::from_toml_str(&text)?;
    let exp = Experiment::new(cfg)?;
    let state_path = dir.join(STATE_FILE);
    let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let state = RunState::from_json(&text)?;
    drive(&exp, state, dir, read_timings(dir))
}

/// Runs every (strategy, seed) pair into `dir/<strategy>/seed_<seed>`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    dir: &Path,
) -> Result<Vec<RunOutput>> {
    let mut outputs = Vec::new();
    for &seed in seeds {
        for &strategy in strategies {
            let mut run_cfg = cfg.clone().with_seed(seed);
            run_cfg.run.strategy = strategy;
            let out = dir.join(strategy.as_str()).join(format!("seed_{seed}"));
            outputs.push(run_experiment(&run_cfg, &out)?);
        }
    }
    Ok(outputs)
}
