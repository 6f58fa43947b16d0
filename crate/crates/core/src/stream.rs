//! Synthetic drifting task streams with spatial-temporal identity
//! correlation, plus a CSV loader for precomputed embeddings.
//!
//! Identities walk a ring of clients: each round an identity steps to a
//! neighbouring client with probability `move_prob`, so people seen at one
//! camera tend to reappear at adjacent cameras in later rounds. A sample is
//! `identity centroid + client domain shift + noise`.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{derive_seed, SeededRng, Vector};

const TAG_TRAJECTORY: u64 = 1;
const TAG_CENTROID: u64 = 2;
const TAG_DOMAIN: u64 = 3;
const TAG_NOISE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub num_clients: usize,
    pub num_rounds: usize,
    /// Size of the global label universe.
    pub num_identities: usize,
    pub raw_dim: usize,
    pub samples_per_identity_per_round: usize,
    /// Per-round probability that an identity steps to a ring neighbour.
    pub move_prob: f64,
    pub domain_shift_scale: f64,
    pub noise_scale: f64,
    pub query_fraction: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            num_clients: 5,
            num_rounds: 6,
            num_identities: 50,
            raw_dim: 128,
            samples_per_identity_per_round: 10,
            move_prob: 0.8,
            domain_shift_scale: 0.3,
            noise_scale: 1.0,
            query_fraction: 0.4,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_clients", self.num_clients),
            ("num_identities", self.num_identities),
            ("raw_dim", self.raw_dim),
            ("samples_per_identity_per_round", self.samples_per_identity_per_round),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("stream.{name} must be positive")));
            }
        }
        if self.num_identities < 2 * self.num_clients {
            return Err(Error::Config(format!(
                "stream.num_identities ({}) must be at least twice num_clients ({})",
                self.num_identities, self.num_clients
            )));
        }
        if !(0.0..=1.0).contains(&self.move_prob) {
            return Err(Error::Config("stream.move_prob must lie in [0, 1]".into()));
        }
        if !(self.domain_shift_scale >= 0.0 && self.domain_shift_scale.is_finite()) {
            return Err(Error::Config("stream.domain_shift_scale must be >= 0".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config("stream.noise_scale must be >= 0".into()));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::Config("stream.query_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Query samples emitted per identity appearance (before the
    /// no-positive drop rule).
    pub fn queries_per_appearance(&self) -> usize {
        let n = self.samples_per_identity_per_round;
        if n < 2 {
            0
        } else {
            ((self.query_fraction * n as f64).round() as usize).clamp(1, n - 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Query,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Query => "query",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Role::Train),
            "query" => Ok(Role::Query),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub features: Vector,
    pub identity: usize,
    pub client: usize,
    pub round: usize,
    pub role: Role,
}

/// One round's data for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub client: usize,
    pub round: usize,
    pub train: Vec<RawSample>,
    pub query: Vec<RawSample>,
}

impl TaskBatch {
    pub fn empty(client: usize, round: usize) -> Self {
        TaskBatch {
            client,
            round,
            train: Vec::new(),
            query: Vec::new(),
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = &RawSample> {
        self.train.iter().chain(&self.query)
    }
}

/// `paths[identity][round]` is the client hosting that identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectories {
    paths: Vec<Vec<usize>>,
    num_clients: usize,
}

impl Trajectories {
    pub fn client_of(&self, identity: usize, round: usize) -> usize {
        self.paths[identity][round]
    }

    pub fn path(&self, identity: usize) -> &[usize] {
        &self.paths[identity]
    }

    pub fn num_identities(&self) -> usize {
        self.paths.len()
    }

    pub fn num_rounds(&self) -> usize {
        self.paths.first().map_or(0, Vec::len)
    }

    /// `rosters[client]` = identities located there at `round`, ascending,
    /// after the empty-client fallback.
    ///
    /// Fallback: a client left empty by the walk borrows the lowest
    /// identity of the most populated client (lowest client id on ties).
    /// The borrowed identity then appears at both clients for that round.
    pub fn rosters(&self, round: usize) -> Vec<Vec<usize>> {
        let mut rosters = vec![Vec::new(); self.num_clients];
        for (identity, path) in self.paths.iter().enumerate() {
            rosters[path[round]].push(identity);
        }
        let donor = (0..self.num_clients)
            .max_by(|&a, &b| rosters[a].len().cmp(&rosters[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let borrowed = rosters[donor][0];
        for roster in rosters.iter_mut() {
            if roster.is_empty() {
                roster.push(borrowed);
            }
        }
        rosters
    }

    /// Clients each identity visits anywhere in the stream (fallbacks included).
    fn visits(&self) -> Vec<BTreeSet<usize>> {
        let mut visits = vec![BTreeSet::new(); self.paths.len()];
        for round in 0..self.num_rounds() {
            for (client, roster) in self.rosters(round).into_iter().enumerate() {
                for identity in roster {
                    visits[identity].insert(client);
                }
            }
        }
        visits
    }
}

/// Ring random walk of every identity over the clients.
pub fn build_identity_trajectories(cfg: &StreamConfig) -> Trajectories {
    let n = cfg.num_clients;
    let mut rng = SeededRng::new(derive_seed(cfg.seed, &[TAG_TRAJECTORY]));
    let paths = (0..cfg.num_identities)
        .map(|_| {
            let mut client = rng.below(n);
            let mut path = Vec::with_capacity(cfg.num_rounds);
            path.push(client);
            for _ in 1..cfg.num_rounds {
                if rng.bernoulli(cfg.move_prob) {
                    client = if rng.bernoulli(0.5) {
                        (client + 1) % n
                    } else {
                        (client + n - 1) % n
                    };
                }
                path.push(client);
            }
            path
        })
        .collect();
    Trajectories {
        paths,
        num_clients: n,
    }
}

fn gaussian_vector(seed: u64, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    (0..dim).map(|_| scale * rng.normal()).collect()
}

/// Generates one batch per client for `round`.
pub fn generate_round(
    cfg: &StreamConfig,
    trajectories: &Trajectories,
    round: usize,
) -> Result<Vec<TaskBatch>> {
    if round >= cfg.num_rounds {
        return Err(Error::Range {
            what: "round",
            value: round,
            bound: cfg.num_rounds,
        });
    }
    let visits = trajectories.visits();
    let rosters = trajectories.rosters(round);
    let n_query = cfg.queries_per_appearance();
    let n_train = cfg.samples_per_identity_per_round - n_query;

    let batches = rosters
        .iter()
        .enumerate()
        .map(|(client, roster)| {
            let domain = gaussian_vector(
                derive_seed(cfg.seed, &[TAG_DOMAIN, client as u64]),
                cfg.raw_dim,
                cfg.domain_shift_scale,
            );
            let mut batch = TaskBatch::empty(client, round);
            for &identity in roster {
                let centroid = gaussian_vector(
                    derive_seed(cfg.seed, &[TAG_CENTROID, identity as u64]),
                    cfg.raw_dim,
                    1.0,
                );
                let keep_queries = visits[identity].iter().any(|&c| c != client);
                let mut noise = SeededRng::new(derive_seed(
                    cfg.seed,
                    &[TAG_NOISE, round as u64, client as u64, identity as u64],
                ));
                for k in 0..cfg.samples_per_identity_per_round {
                    let features: Vec<f64> = centroid
                        .iter()
                        .zip(&domain)
                        .map(|(c, d)| c + d + cfg.noise_scale * noise.normal())
                        .collect();
                    let role = if k < n_train { Role::Train } else { Role::Query };
                    if role == Role::Query && !keep_queries {
                        continue;
                    }
                    let sample = RawSample {
                        features: Vector::new(features)?,
                        identity,
                        client,
                        round,
                        role,
                    };
                    match role {
                        Role::Train => batch.train.push(sample),
                        Role::Query => batch.query.push(sample),
                    }
                }
            }
            Ok(batch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(batches)
}

/// A fully materialized stream: `rounds[r][c]` is client `c`'s batch at round `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub num_clients: usize,
    pub raw_dim: usize,
    pub rounds: Vec<Vec<TaskBatch>>,
}

impl TaskStream {
    pub fn generate(cfg: &StreamConfig) -> Result<Self> {
        cfg.validate()?;
        let trajectories = build_identity_trajectories(cfg);
        let rounds = (0..cfg.num_rounds)
            .map(|r| generate_round(cfg, &trajectories, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskStream {
            num_clients: cfg.num_clients,
            raw_dim: cfg.raw_dim,
            rounds,
        })
    }

    /// Arranges loose batches into a dense round × client grid; missing
    /// cells become empty batches.
    pub fn from_batches(batches: Vec<TaskBatch>) -> Result<Self> {
        let first = batches
            .iter()
            .flat_map(|b| b.samples())
            .next()
            .ok_or_else(|| Error::EmptyTask("stream has no samples".into()))?;
        let raw_dim = first.features.len();
        let num_clients = batches.iter().map(|b| b.client + 1).max().unwrap_or(0);
        let num_rounds = batches.iter().map(|b| b.round + 1).max().unwrap_or(0);
        let mut rounds: Vec<Vec<TaskBatch>> = (0..num_rounds)
            .map(|r| (0..num_clients).map(|c| TaskBatch::empty(c, r)).collect())
            .collect();
        for b in batches {
            if b.samples().any(|s| s.features.len() != raw_dim) {
                return Err(Error::dim(raw_dim, 0));
            }
            let (r, c) = (b.round, b.client);
            rounds[r][c] = b;
        }
        Ok(TaskStream {
            num_clients,
            raw_dim,
            rounds,
        })
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn batch(&self, round: usize, client: usize) -> &TaskBatch {
        &self.rounds[round][client]
    }

    pub fn batches(&self) -> impl Iterator<Item = &TaskBatch> {
        self.rounds.iter().flatten()
    }

    /// Stable fingerprint of every sample in the stream.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in self.batches().flat_map(|b| b.samples()) {
            (s.client, s.round, s.identity, s.role).hash(&mut h);
            for v in s.features.iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Writes samples in the embedding CSV format
/// (`client,round,role,identity,f0,...,f{d-1}`).
pub fn write_embedding_file<'a>(
    path: &Path,
    samples: impl IntoIterator<Item = &'a RawSample>,
) -> Result<()> {
    let mut samples = samples.into_iter().peekable();
    let dim = samples
        .peek()
        .map(|s| s.features.len())
        .ok_or_else(|| Error::InvalidInput("no samples to write".into()))?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = ["client", "round", "role", "identity"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for s in samples {
        if s.features.len() != dim {
            return Err(Error::dim(dim, s.features.len()));
        }
        let mut rec = vec![
            s.client.to_string(),
            s.round.to_string(),
            s.role.as_str().to_string(),
            s.identity.to_string(),
        ];
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

/// Loads an embedding CSV into batches ordered by (round, client). Sample
/// order inside a batch follows the file.
pub fn load_embedding_file(path: &Path) -> Result<Vec<TaskBatch>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(file)
}

pub fn parse_embeddings<R: std::io::Read>(input: R) -> Result<Vec<TaskBatch>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };

    let header = match records.next() {
        None => return Err(parse_err(1, "missing header".into())),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let expected = ["client", "round", "role", "identity"];
    if header.len() < 5 || header.iter().take(4).ne(expected) {
        return Err(parse_err(
            1,
            "header must start with client,round,role,identity followed by f0..".into(),
        ));
    }
    let dim = header.len() - 4;
    for (i, name) in header.iter().skip(4).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, format!("expected column f{i}, found {name:?}")));
        }
    }

    let mut grouped: BTreeMap<(usize, usize), TaskBatch> = BTreeMap::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 4 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 4, record.len()),
            ));
        }
        let int = |i: usize, name: &str| -> Result<usize> {
            record[i]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad {name} {:?}", &record[i])))
        };
        let client = int(0, "client")?;
        let round = int(1, "round")?;
        let role: Role = record[2].trim().parse().map_err(|m| parse_err(line, m))?;
        let identity = int(3, "identity")?;
        let features = record
            .iter()
            .skip(4)
            .enumerate()
            .map(|(i, f)| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("bad value {f:?} in column f{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let sample = RawSample {
            features: Vector::new(features)?,
            identity,
            client,
            round,
            role,
        };
        let batch = grouped
            .entry((round, client))
            .or_insert_with(|| TaskBatch::empty(client, round));
        match role {
            Role::Train => batch.train.push(sample),
            Role::Query => batch.query.push(sample),
        }
    }
    Ok(grouped.into_values().collect())
}
