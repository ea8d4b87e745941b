//! Simulated federated training: GFPL and the FedAvg, FedProto and
//! local-only baselines, with a communication ledger.
//!
//! Rounds are numbered from 1. GFPL clients train locally every round and
//! exchange prototypes on rounds `t ≥ t₁` with `t mod S_T = 0`; every other
//! round is silent. All randomness is keyed by `(seed, purpose, client,
//! round)`, so results do not depend on how clients are scheduled.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{ClientData, Sample};
use crate::error::{Error, Result};
use crate::etf::EtfMatrix;
use crate::fusion::{fuse_all, GlobalPrototype, Linkage};
use crate::gmm::{fit_gmm, sample_gmm, EmConfig, GmmPrototype};
use crate::model::{
    backward_step, retrain_projection, shuffled_batches, DualClassifierModel, ModelShape, Objective,
    PredictionHead, Sgd, TrainConfig,
};
use crate::numerics::{Purpose, RngStream, StreamKey};
use crate::wire;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Gfpl,
    FedAvg,
    FedProto,
    Local,
}

/// Loss used by the local-only baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalObjective {
    /// Cross-entropy on the classifier head only.
    #[default]
    Ce,
    /// The GFPL hybrid loss, without any communication.
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    /// Number of rounds `T`.
    pub rounds: usize,
    /// First round eligible for prototype interaction, `t₁`. Values above
    /// `rounds` disable interaction.
    pub interaction_start: usize,
    /// Interaction period `S_T`.
    pub retrain_interval: usize,
    /// Bhattacharyya merge threshold `S_C`.
    pub fusion_threshold: f64,
    pub linkage: Linkage,
    /// Pseudo-features sampled per global class, `r`.
    pub pseudo_per_class: usize,
    /// Passes over the pseudo-feature set per interaction.
    pub retrain_epochs: usize,
    /// FedProto regularizer weight.
    pub proto_weight: f64,
    pub local_objective: LocalObjective,
    /// Head used for evaluation by models that train the projection.
    pub eval_head: PredictionHead,
    pub em: EmConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Gfpl,
            rounds: 100,
            interaction_start: 10,
            retrain_interval: 10,
            fusion_threshold: 1.0,
            linkage: Linkage::Complete,
            pseudo_per_class: 16,
            retrain_epochs: 1,
            proto_weight: 1.0,
            local_objective: LocalObjective::Ce,
            eval_head: PredictionHead::Combined,
            em: EmConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("federation.rounds", "must be at least 1"));
        }
        if self.retrain_interval == 0 {
            return Err(Error::invalid("federation.retrain_interval", "must be at least 1"));
        }
        if !(self.fusion_threshold > 0.0) {
            return Err(Error::invalid("federation.fusion_threshold", "must be positive"));
        }
        if self.pseudo_per_class == 0 {
            return Err(Error::invalid("federation.pseudo_per_class", "must be at least 1"));
        }
        if self.retrain_epochs == 0 {
            return Err(Error::invalid("federation.retrain_epochs", "must be at least 1"));
        }
        if !(self.proto_weight >= 0.0 && self.proto_weight.is_finite()) {
            return Err(Error::invalid("federation.proto_weight", "must be finite and non-negative"));
        }
        self.em.validate().map_err(|e| e.context("federation.em"))?;
        self.train.validate().map_err(|e| e.context("federation.train"))?;
        Ok(())
    }

    pub fn is_interaction_round(&self, round: usize) -> bool {
        round >= self.interaction_start && round.is_multiple_of(self.retrain_interval)
    }

    pub fn interaction_rounds(&self) -> Vec<usize> {
        (1..=self.rounds).filter(|&t| self.is_interaction_round(t)).collect()
    }
}

/// Scalars moved in one round, summed over clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub round: usize,
    pub upload: usize,
    pub download: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommLedger {
    pub clients: usize,
    pub rounds: Vec<RoundTraffic>,
}

impl CommLedger {
    fn new(clients: usize) -> Self {
        Self {
            clients,
            rounds: Vec::new(),
        }
    }

    pub fn upload_total(&self) -> usize {
        self.rounds.iter().map(|r| r.upload).sum()
    }

    pub fn download_total(&self) -> usize {
        self.rounds.iter().map(|r| r.download).sum()
    }

    pub fn total(&self) -> usize {
        self.upload_total() + self.download_total()
    }

    /// Mean cumulative traffic per client.
    pub fn per_client(&self) -> f64 {
        self.total() as f64 / self.clients.max(1) as f64
    }

    pub fn interaction_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| r.upload + r.download > 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Test accuracy per client, in client order.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_train_loss: f64,
    /// Mean pseudo-feature retraining loss, on rounds that retrain.
    pub retrain_loss: Option<f64>,
    pub upload: usize,
    pub download: usize,
}

/// What happened on one GFPL interaction round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub round: usize,
    /// Scalars uploaded by each client.
    pub uploads: Vec<usize>,
    /// Classes each client uploaded a prototype for.
    pub uploaded_classes: Vec<Vec<usize>>,
    /// Fused component count per global class.
    pub global_components: BTreeMap<usize, usize>,
    /// Pseudo-features generated per class, per client.
    pub pseudo_counts: Vec<BTreeMap<usize, usize>>,
    /// Whether each client's extractor came out of retraining bit-identical.
    pub extractor_unchanged: Vec<bool>,
}

/// Real and generated features from the most recent interaction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSnapshot {
    pub round: usize,
    /// Training-set features per client, as used for prototype fitting.
    pub real: Vec<Vec<(Vec<f64>, usize)>>,
    pub pseudo: Vec<Vec<(Vec<f64>, usize)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub history: Vec<RoundMetrics>,
    pub ledger: CommLedger,
    /// Final model of each client.
    pub models: Vec<DualClassifierModel>,
    pub interactions: Vec<InteractionRecord>,
    pub last_exchange: Option<FeatureSnapshot>,
}

impl RunResult {
    pub fn final_accuracy(&self) -> f64 {
        self.history.last().map_or(0.0, |m| m.mean_accuracy)
    }
}

/// Runs per-client work. Implementations must return results in input
/// order; they may evaluate the closure concurrently.
pub trait Executor: Sync {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        items.into_iter().map(f).collect()
    }
}

pub fn run_gfpl(data: &[ClientData], etf: &EtfMatrix, shape: &ModelShape, cfg: &FederationConfig) -> Result<RunResult> {
    run_as(Algorithm::Gfpl, data, etf, shape, cfg)
}

pub fn run_fedavg(data: &[ClientData], etf: &EtfMatrix, shape: &ModelShape, cfg: &FederationConfig) -> Result<RunResult> {
    run_as(Algorithm::FedAvg, data, etf, shape, cfg)
}

pub fn run_fedproto(data: &[ClientData], etf: &EtfMatrix, shape: &ModelShape, cfg: &FederationConfig) -> Result<RunResult> {
    run_as(Algorithm::FedProto, data, etf, shape, cfg)
}

pub fn run_local(data: &[ClientData], etf: &EtfMatrix, shape: &ModelShape, cfg: &FederationConfig) -> Result<RunResult> {
    run_as(Algorithm::Local, data, etf, shape, cfg)
}

fn run_as(
    algorithm: Algorithm,
    data: &[ClientData],
    etf: &EtfMatrix,
    shape: &ModelShape,
    cfg: &FederationConfig,
) -> Result<RunResult> {
    let cfg = FederationConfig {
        algorithm,
        ..cfg.clone()
    };
    run(data, etf, shape, &cfg, &Sequential)
}

/// Runs `cfg.algorithm` over `data`.
///
/// The ETF is only consulted by objectives that train the projection head.
pub fn run<E: Executor>(
    data: &[ClientData],
    etf: &EtfMatrix,
    shape: &ModelShape,
    cfg: &FederationConfig,
    exec: &E,
) -> Result<RunResult> {
    cfg.validate()?;
    shape.validate()?;
    check_inputs(data, etf, shape)?;
    let init = DualClassifierModel::new(shape, &mut RngStream::keyed(cfg.seed, StreamKey::new(Purpose::ModelInit)))?;
    let mut sim = Simulation {
        data,
        etf,
        cfg,
        clients: data
            .iter()
            .map(|_| ClientState {
                opt: Sgd::from_config(&init, &cfg.train),
                model: init.clone(),
            })
            .collect(),
        ledger: CommLedger::new(data.len()),
        history: Vec::with_capacity(cfg.rounds),
        interactions: Vec::new(),
        last_exchange: None,
    };
    match cfg.algorithm {
        Algorithm::Gfpl => sim.gfpl(exec)?,
        Algorithm::Local => sim.local(exec)?,
        Algorithm::FedAvg => sim.fedavg(exec, init)?,
        Algorithm::FedProto => sim.fedproto(exec)?,
    }
    Ok(RunResult {
        history: sim.history,
        ledger: sim.ledger,
        models: sim.clients.into_iter().map(|c| c.model).collect(),
        interactions: sim.interactions,
        last_exchange: sim.last_exchange,
    })
}

fn check_inputs(data: &[ClientData], etf: &EtfMatrix, shape: &ModelShape) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("client list"));
    }
    if etf.classes() != shape.classes {
        return Err(Error::DimensionMismatch {
            what: "ETF classes",
            expected: shape.classes,
            found: etf.classes(),
        });
    }
    if etf.dim() != shape.projection_dim() {
        return Err(Error::DimensionMismatch {
            what: "ETF dimension",
            expected: shape.projection_dim(),
            found: etf.dim(),
        });
    }
    for c in data {
        let ctx = |e: Error| e.context(format!("client {}", c.client_id));
        if c.train.is_empty() {
            return Err(ctx(Error::Empty("training split")));
        }
        if c.test.is_empty() {
            return Err(ctx(Error::Empty("test split")));
        }
        for s in c.train.iter().chain(&c.test) {
            if s.label >= shape.classes {
                return Err(ctx(Error::LabelOutOfRange {
                    label: s.label,
                    classes: shape.classes,
                }));
            }
            if s.x.len() != shape.input_dim {
                return Err(ctx(Error::DimensionMismatch {
                    what: "sample",
                    expected: shape.input_dim,
                    found: s.x.len(),
                }));
            }
        }
    }
    Ok(())
}

struct ClientState {
    model: DualClassifierModel,
    opt: Sgd,
}

struct Simulation<'a> {
    data: &'a [ClientData],
    etf: &'a EtfMatrix,
    cfg: &'a FederationConfig,
    clients: Vec<ClientState>,
    ledger: CommLedger,
    history: Vec<RoundMetrics>,
    interactions: Vec<InteractionRecord>,
    last_exchange: Option<FeatureSnapshot>,
}

fn stream(seed: u64, purpose: Purpose, client: usize, round: usize) -> RngStream {
    RngStream::keyed(seed, StreamKey::new(purpose).client(client).round(round))
}

fn at(client: usize, round: usize) -> impl Fn(Error) -> Error {
    move |e| e.context(format!("client {client}, round {round}"))
}

/// Runs `epochs` shuffled passes of SGD over `train`; returns the mean
/// pre-update batch loss.
fn train_local(
    state: &mut ClientState,
    train: &[Sample],
    etf: &EtfMatrix,
    objective: Objective<'_>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    let (mut sum, mut steps) = (0.0, 0usize);
    for _ in 0..cfg.local_epochs {
        for idx in shuffled_batches(train.len(), cfg.batch_size, rng) {
            let batch: Vec<(&[f64], usize)> = idx.iter().map(|&i| (train[i].x.as_slice(), train[i].label)).collect();
            sum += backward_step(&mut state.model, &mut state.opt, &batch, etf, objective, false)?;
            steps += 1;
        }
    }
    Ok(sum / steps as f64)
}

fn accuracy(model: &DualClassifierModel, test: &[Sample], etf: &EtfMatrix, head: PredictionHead) -> Result<f64> {
    let mut hits = 0usize;
    for s in test {
        if model.predict(&s.x, etf, head)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

fn features_by_class(model: &DualClassifierModel, train: &[Sample]) -> Result<Vec<(Vec<f64>, usize)>> {
    train.iter().map(|s| Ok((model.features(&s.x)?, s.label))).collect()
}

fn group_by_class(features: &[(Vec<f64>, usize)]) -> BTreeMap<usize, Vec<&[f64]>> {
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (f, label) in features {
        groups.entry(*label).or_default().push(f);
    }
    groups
}

/// Parameter-wise average of models with the given (unnormalized) weights.
pub fn weighted_average(models: &[(&DualClassifierModel, f64)]) -> Result<DualClassifierModel> {
    let (first, _) = models.first().ok_or(Error::Empty("model list"))?;
    let total: f64 = models.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) || models.iter().any(|(_, w)| !(*w >= 0.0)) {
        return Err(Error::invalid("weights", "must be non-negative with a positive sum"));
    }
    let mut acc = vec_zeros(first.param_count());
    for (m, w) in models {
        let p = m.params_flat();
        if p.len() != acc.len() {
            return Err(Error::DimensionMismatch {
                what: "model parameters",
                expected: acc.len(),
                found: p.len(),
            });
        }
        let share = w / total;
        acc.iter_mut().zip(&p).for_each(|(a, v)| *a += share * v);
    }
    let mut out = first.zeros_like();
    out.set_params_flat(&acc)?;
    Ok(out)
}

fn vec_zeros(n: usize) -> Vec<f64> {
    alloc::vec![0.0; n]
}

/// A client's per-class feature mean and the number of samples behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroid {
    pub class_id: usize,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Sample-count-weighted mean of centroids, per class.
pub fn aggregate_centroids<'a>(centroids: impl IntoIterator<Item = &'a Centroid>) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for c in centroids {
        let entry = sums.entry(c.class_id).or_insert_with(|| (vec_zeros(c.mean.len()), 0));
        entry.0.iter_mut().zip(&c.mean).for_each(|(s, m)| *s += c.count as f64 * m);
        entry.1 += c.count;
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n.max(1) as f64).collect()))
        .collect()
}

struct LocalOutcome {
    loss: f64,
    accuracy: f64,
}

struct Upload {
    features: Vec<(Vec<f64>, usize)>,
    bytes: Vec<u8>,
    classes: Vec<usize>,
}

struct RetrainOutcome {
    loss: Option<f64>,
    accuracy: f64,
    pseudo: Vec<(Vec<f64>, usize)>,
    unchanged: bool,
}

impl<'a> Simulation<'a> {
    fn head(&self, objective: &Objective<'_>) -> PredictionHead {
        match objective {
            Objective::Hybrid { .. } => self.cfg.eval_head,
            _ => PredictionHead::Classifier,
        }
    }

    /// One round of local training and evaluation for every client.
    fn local_round<E: Executor>(&mut self, exec: &E, round: usize, objective: Objective<'_>) -> Result<Vec<LocalOutcome>> {
        let (data, etf, cfg) = (self.data, self.etf, self.cfg);
        let head = self.head(&objective);
        let items: Vec<_> = data.iter().zip(self.clients.iter_mut()).enumerate().collect();
        exec.map(items, |(i, (client, state))| {
            let mut rng = stream(cfg.seed, Purpose::Shuffle, i, round);
            let loss = train_local(state, &client.train, etf, objective, &cfg.train, &mut rng)?;
            let accuracy = accuracy(&state.model, &client.test, etf, head)?;
            Ok(LocalOutcome { loss, accuracy })
        })
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(at(i, round)))
        .collect()
    }

    fn record(&mut self, round: usize, accuracies: Vec<f64>, losses: &[f64], retrain: Option<f64>, traffic: RoundTraffic) {
        let (mean_accuracy, std_accuracy) = mean_std(&accuracies);
        self.ledger.rounds.push(traffic);
        self.history.push(RoundMetrics {
            round,
            accuracies,
            mean_accuracy,
            std_accuracy,
            mean_train_loss: mean_std(losses).0,
            retrain_loss: retrain,
            upload: traffic.upload,
            download: traffic.download,
        });
    }

    fn local<E: Executor>(&mut self, exec: &E) -> Result<()> {
        let objective = match self.cfg.local_objective {
            LocalObjective::Ce => Objective::CrossEntropy,
            LocalObjective::Hybrid => Objective::Hybrid {
                lambda: self.cfg.train.lambda,
            },
        };
        for round in 1..=self.cfg.rounds {
            let out = self.local_round(exec, round, objective)?;
            let (acc, loss): (Vec<f64>, Vec<f64>) = out.iter().map(|o| (o.accuracy, o.loss)).unzip();
            self.record(round, acc, &loss, None, RoundTraffic { round, ..Default::default() });
        }
        Ok(())
    }

    fn gfpl<E: Executor>(&mut self, exec: &E) -> Result<()> {
        let objective = Objective::Hybrid {
            lambda: self.cfg.train.lambda,
        };
        for round in 1..=self.cfg.rounds {
            let out = self.local_round(exec, round, objective)?;
            let losses: Vec<f64> = out.iter().map(|o| o.loss).collect();
            if self.cfg.is_interaction_round(round) {
                let (accuracies, retrain, traffic) = self.interact(exec, round)?;
                self.record(round, accuracies, &losses, retrain, traffic);
            } else {
                let acc = out.iter().map(|o| o.accuracy).collect();
                self.record(round, acc, &losses, None, RoundTraffic { round, ..Default::default() });
            }
        }
        Ok(())
    }

    /// Prototype upload, fusion, download, pseudo-feature generation and
    /// projection retraining, then evaluation.
    fn interact<E: Executor>(&mut self, exec: &E, round: usize) -> Result<(Vec<f64>, Option<f64>, RoundTraffic)> {
        let (data, etf, cfg) = (self.data, self.etf, self.cfg);
        let dim = self.clients[0].model.feature_dim();

        let items: Vec<_> = data.iter().zip(self.clients.iter()).enumerate().collect();
        let uploads: Vec<Upload> = exec
            .map(items, |(i, (client, state))| {
                let features = features_by_class(&state.model, &client.train)?;
                let protos = group_by_class(&features)
                    .into_iter()
                    .map(|(class, feats)| {
                        let mut rng = RngStream::keyed(
                            cfg.seed,
                            StreamKey::new(Purpose::GmmFit).client(i).round(round).index(class),
                        );
                        fit_gmm(class, &feats, &cfg.em, &mut rng)
                    })
                    .collect::<Result<Vec<GmmPrototype>>>()?;
                Ok(Upload {
                    classes: protos.iter().map(|p| p.class_id).collect(),
                    bytes: wire::encode_prototypes(&protos),
                    features,
                })
            })
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(at(i, round)))
            .collect::<Result<_>>()?;

        // server: decode, fuse, encode
        let received = uploads
            .iter()
            .enumerate()
            .map(|(i, u)| wire::decode_prototypes(&u.bytes, dim).map_err(at(i, round)))
            .collect::<Result<Vec<_>>>()?;
        let global = fuse_all(
            received.iter().enumerate().flat_map(|(i, ps)| ps.iter().map(move |p| (i, p))),
            cfg.fusion_threshold,
            cfg.linkage,
        )
        .map_err(|e| e.context(format!("server fusion, round {round}")))?;
        let download = wire::encode_global(&global);

        let items: Vec<_> = data.iter().zip(self.clients.iter_mut()).enumerate().collect();
        let outcomes: Vec<RetrainOutcome> = exec
            .map(items, |(i, (client, state))| {
                let global = wire::decode_global(&download, dim)?;
                let pseudo = pseudo_features(&global, cfg, i, round)?;
                let before = state.model.extractor_params();
                let mut rng = stream(cfg.seed, Purpose::Retrain, i, round);
                let loss = retrain_projection(&mut state.model, &pseudo, etf, &cfg.train, cfg.retrain_epochs, &mut rng)?;
                let after = state.model.extractor_params();
                let unchanged = before.len() == after.len() && before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
                let accuracy = accuracy(&state.model, &client.test, etf, cfg.eval_head)?;
                Ok(RetrainOutcome {
                    loss,
                    accuracy,
                    pseudo,
                    unchanged,
                })
            })
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.map_err(at(i, round)))
            .collect::<Result<_>>()?;

        let upload_counts: Vec<usize> = uploads.iter().map(|u| u.bytes.len() / 8).collect();
        let traffic = RoundTraffic {
            round,
            upload: upload_counts.iter().sum(),
            download: data.len() * (download.len() / 8),
        };
        let losses: Vec<f64> = outcomes.iter().filter_map(|o| o.loss).collect();
        let retrain = (!losses.is_empty()).then(|| mean_std(&losses).0);
        self.interactions.push(InteractionRecord {
            round,
            uploads: upload_counts,
            uploaded_classes: uploads.iter().map(|u| u.classes.clone()).collect(),
            global_components: global.iter().map(|(k, g)| (*k, g.len())).collect(),
            pseudo_counts: outcomes
                .iter()
                .map(|o| {
                    let mut counts = BTreeMap::new();
                    o.pseudo.iter().for_each(|(_, y)| *counts.entry(*y).or_insert(0) += 1);
                    counts
                })
                .collect(),
            extractor_unchanged: outcomes.iter().map(|o| o.unchanged).collect(),
        });
        let accuracies = outcomes.iter().map(|o| o.accuracy).collect();
        self.last_exchange = Some(FeatureSnapshot {
            round,
            real: uploads.into_iter().map(|u| u.features).collect(),
            pseudo: outcomes.into_iter().map(|o| o.pseudo).collect(),
        });
        Ok((accuracies, retrain, traffic))
    }

    fn fedavg<E: Executor>(&mut self, exec: &E, init: DualClassifierModel) -> Result<()> {
        let (data, etf, cfg) = (self.data, self.etf, self.cfg);
        let mut global = init;
        let per_client = global.backbone_param_count();
        for round in 1..=cfg.rounds {
            let items: Vec<_> = data.iter().zip(self.clients.iter_mut()).enumerate().collect();
            let losses = exec
                .map(items, |(i, (client, state))| {
                    state.model = global.clone();
                    let mut rng = stream(cfg.seed, Purpose::Shuffle, i, round);
                    train_local(state, &client.train, etf, Objective::CrossEntropy, &cfg.train, &mut rng)
                })
                .into_iter()
                .enumerate()
                .map(|(i, r)| r.map_err(at(i, round)))
                .collect::<Result<Vec<f64>>>()?;
            let weighted: Vec<_> = self
                .clients
                .iter()
                .zip(data)
                .map(|(s, c)| (&s.model, c.train.len() as f64))
                .collect();
            global = weighted_average(&weighted).map_err(|e| e.context(format!("server averaging, round {round}")))?;
            let accuracies = data
                .iter()
                .enumerate()
                .map(|(i, c)| accuracy(&global, &c.test, etf, PredictionHead::Classifier).map_err(at(i, round)))
                .collect::<Result<Vec<_>>>()?;
            let traffic = RoundTraffic {
                round,
                upload: data.len() * per_client,
                download: data.len() * per_client,
            };
            self.record(round, accuracies, &losses, None, traffic);
        }
        self.clients.iter_mut().for_each(|s| s.model = global.clone());
        Ok(())
    }

    fn fedproto<E: Executor>(&mut self, exec: &E) -> Result<()> {
        let (data, etf, cfg) = (self.data, self.etf, self.cfg);
        let per_class = wire::centroid_scalars(self.clients[0].model.feature_dim());
        let mut anchors: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for round in 1..=cfg.rounds {
            let objective = Objective::Anchored {
                weight: cfg.proto_weight,
                anchors: &anchors,
            };
            let items: Vec<_> = data.iter().zip(self.clients.iter_mut()).enumerate().collect();
            let out = exec
                .map(items, |(i, (client, state))| {
                    let mut rng = stream(cfg.seed, Purpose::Shuffle, i, round);
                    let loss = train_local(state, &client.train, etf, objective, &cfg.train, &mut rng)?;
                    let acc = accuracy(&state.model, &client.test, etf, PredictionHead::Classifier)?;
                    let features = features_by_class(&state.model, &client.train)?;
                    let centroids: Vec<Centroid> = group_by_class(&features)
                        .into_iter()
                        .map(|(class_id, feats)| {
                            let mut mean = vec_zeros(feats[0].len());
                            for f in &feats {
                                mean.iter_mut().zip(f.iter()).for_each(|(m, v)| *m += v);
                            }
                            mean.iter_mut().for_each(|m| *m /= feats.len() as f64);
                            Centroid {
                                class_id,
                                mean,
                                count: feats.len(),
                            }
                        })
                        .collect();
                    Ok((loss, acc, centroids))
                })
                .into_iter()
                .enumerate()
                .map(|(i, r)| r.map_err(at(i, round)))
                .collect::<Result<Vec<_>>>()?;
            let upload = out.iter().map(|o| o.2.len() * per_class).sum();
            anchors = aggregate_centroids(out.iter().flat_map(|o| o.2.iter()));
            let traffic = RoundTraffic {
                round,
                upload,
                download: data.len() * anchors.len() * per_class,
            };
            let losses: Vec<f64> = out.iter().map(|o| o.0).collect();
            let accuracies = out.iter().map(|o| o.1).collect();
            self.record(round, accuracies, &losses, None, traffic);
        }
        Ok(())
    }
}

/// `r` pseudo-features for every class of the global prototype set.
fn pseudo_features(
    global: &BTreeMap<usize, GlobalPrototype>,
    cfg: &FederationConfig,
    client: usize,
    round: usize,
) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut out = Vec::with_capacity(global.len() * cfg.pseudo_per_class);
    for (class, g) in global {
        let mut rng = RngStream::keyed(
            cfg.seed,
            StreamKey::new(Purpose::PseudoFeatures).client(client).round(round).index(*class),
        );
        out.extend(sample_gmm(&g.as_gmm(), cfg.pseudo_per_class, &mut rng)?.into_iter().map(|f| (f, *class)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, partition, PartitionSpec, SyntheticSpec};
    use crate::etf::build_etf;
    use crate::model::ModelShape;
    use alloc::vec;

    fn setup(clients: usize) -> (Vec<ClientData>, EtfMatrix, ModelShape) {
        let mut rng = RngStream::new(3, 0);
        let ds = gen_synthetic(
            &SyntheticSpec {
                classes: 5,
                input_dim: 6,
                per_class: 30,
                spread: 0.5,
                radius: 1.0,
            },
            &mut rng,
        )
        .unwrap();
        let data = partition(
            &ds,
            &PartitionSpec {
                clients,
                way_mean: 3.0,
                way_std: 1.0,
                shot_mean: 10.0,
                shot_std: 2.0,
                test_fraction: 0.2,
                seed: 5,
            },
        )
        .unwrap();
        let shape = ModelShape {
            input_dim: 6,
            hidden: vec![8],
            feature_dim: 6,
            projection_dim: Some(7),
            classes: 5,
        };
        let etf = build_etf(7, 5, &mut RngStream::new(4, 0)).unwrap();
        (data, etf, shape)
    }

    fn cfg(rounds: usize, start: usize, interval: usize) -> FederationConfig {
        FederationConfig {
            rounds,
            interaction_start: start,
            retrain_interval: interval,
            em: EmConfig {
                components: 2,
                ..EmConfig::default()
            },
            pseudo_per_class: 4,
            seed: 11,
            ..FederationConfig::default()
        }
    }

    #[test]
    fn published_defaults() {
        let c = FederationConfig::default();
        assert_eq!((c.interaction_start, c.retrain_interval), (10, 10));
        assert_eq!((c.em.components, c.pseudo_per_class), (4, 16));
        assert_eq!(c.fusion_threshold, 1.0);
        assert_eq!(c.train.lambda, 2.0);
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn schedule_arithmetic() {
        let c = cfg(60, 10, 10);
        assert_eq!(c.interaction_rounds(), vec![10, 20, 30, 40, 50, 60]);
        assert_eq!(cfg(60, 15, 10).interaction_rounds(), vec![20, 30, 40, 50, 60]);
        assert_eq!(cfg(9, 0, 3).interaction_rounds(), vec![3, 6, 9]);
        assert!(cfg(5, 6, 1).interaction_rounds().is_empty());
    }

    #[test]
    fn ledger_matches_schedule() {
        let (data, etf, shape) = setup(3);
        let r = run_gfpl(&data, &etf, &shape, &cfg(6, 2, 3)).unwrap();
        assert_eq!(r.history.len(), 6);
        for (m, t) in r.history.iter().zip(&r.ledger.rounds) {
            assert_eq!(m.round, t.round);
            let active = m.round == 3 || m.round == 6;
            assert_eq!(t.upload > 0, active, "round {}", m.round);
            assert_eq!(t.download > 0, active);
            assert_eq!(m.retrain_loss.is_some(), active);
        }
        assert_eq!(r.ledger.interaction_rounds(), 2);
        assert_eq!(r.ledger.total(), r.ledger.rounds.iter().map(|t| t.upload + t.download).sum::<usize>());
        for rec in &r.interactions {
            for (c, up) in rec.uploads.iter().enumerate() {
                assert_eq!(*up, rec.uploaded_classes[c].len() * wire::prototype_scalars(2, 6));
            }
            assert!(rec.extractor_unchanged.iter().all(|&u| u));
            for counts in &rec.pseudo_counts {
                assert_eq!(counts.keys().collect::<Vec<_>>(), rec.global_components.keys().collect::<Vec<_>>());
                assert!(counts.values().all(|&n| n == 4));
            }
        }
    }

    #[test]
    fn late_start_equals_hybrid_local() {
        let (data, etf, shape) = setup(3);
        let c = cfg(4, 5, 1);
        let g = run_gfpl(&data, &etf, &shape, &c).unwrap();
        let l = run_local(
            &data,
            &etf,
            &shape,
            &FederationConfig {
                local_objective: LocalObjective::Hybrid,
                ..c
            },
        )
        .unwrap();
        assert_eq!(g.ledger.total(), 0);
        assert_eq!(g.history, l.history);
        assert_eq!(g.models, l.models);
    }

    #[test]
    fn zero_proto_weight_equals_local() {
        let (data, etf, shape) = setup(3);
        let c = FederationConfig {
            proto_weight: 0.0,
            ..cfg(3, 1, 1)
        };
        let p = run_fedproto(&data, &etf, &shape, &c).unwrap();
        let l = run_local(&data, &etf, &shape, &c).unwrap();
        let acc = |r: &RunResult| r.history.iter().map(|m| m.accuracies.clone()).collect::<Vec<_>>();
        assert_eq!(acc(&p), acc(&l));
        assert_eq!(p.models, l.models);
        assert!(p.ledger.total() > 0);
        assert_eq!(l.ledger.total(), 0);
    }

    #[test]
    fn single_client_fedavg_is_local_training() {
        let (data, etf, shape) = setup(1);
        let c = cfg(3, 1, 1);
        let a = run_fedavg(&data, &etf, &shape, &c).unwrap();
        let l = run_local(&data, &etf, &shape, &c).unwrap();
        assert_eq!(a.models, l.models);
        let per = a.models[0].backbone_param_count();
        assert!(a.ledger.rounds.iter().all(|t| t.upload == per && t.download == per));
    }

    #[test]
    fn fedavg_with_zero_rate_keeps_global() {
        let (data, etf, shape) = setup(2);
        let mut c = cfg(3, 1, 1);
        c.train.learning_rate = 0.0;
        let r = run_fedavg(&data, &etf, &shape, &c).unwrap();
        let init = DualClassifierModel::new(&shape, &mut RngStream::keyed(11, StreamKey::new(Purpose::ModelInit))).unwrap();
        for (a, b) in r.models[0].params_flat().iter().zip(init.params_flat()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn weighted_average_closed_form() {
        let shape = ModelShape {
            input_dim: 2,
            hidden: vec![],
            feature_dim: 2,
            projection_dim: Some(3),
            classes: 2,
        };
        let mut a = DualClassifierModel::zeros(&shape);
        let mut b = DualClassifierModel::zeros(&shape);
        let n = a.param_count();
        a.set_params_flat(&vec![1.0; n]).unwrap();
        b.set_params_flat(&(0..n).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        let avg = weighted_average(&[(&a, 1.0), (&b, 3.0)]).unwrap();
        for (i, v) in avg.params_flat().iter().enumerate() {
            assert!((v - (0.25 + 0.75 * i as f64)).abs() < 1e-12);
        }
        assert!(weighted_average(&[]).is_err());
        assert!(weighted_average(&[(&a, 0.0)]).is_err());
    }

    #[test]
    fn centroid_weighting() {
        let a = Centroid {
            class_id: 2,
            mean: vec![1.0, 0.0],
            count: 10,
        };
        let b = Centroid {
            class_id: 2,
            mean: vec![0.0, 4.0],
            count: 30,
        };
        let c = Centroid {
            class_id: 7,
            mean: vec![5.0, 5.0],
            count: 3,
        };
        let g = aggregate_centroids([&a, &b, &c]);
        assert_eq!(g[&2], vec![0.25, 3.0]);
        assert_eq!(g[&7], c.mean);
    }

    #[test]
    fn deterministic() {
        let (data, etf, shape) = setup(3);
        let c = cfg(4, 2, 2);
        assert_eq!(run_gfpl(&data, &etf, &shape, &c).unwrap().history, run_gfpl(&data, &etf, &shape, &c).unwrap().history);
    }

    #[test]
    fn errors_carry_context() {
        let (mut data, etf, shape) = setup(2);
        data[1].train[0].label = 9;
        let err = run_local(&data, &etf, &shape, &cfg(2, 1, 1)).unwrap_err();
        assert!(format!("{err}").contains("client 1"));
        assert!(matches!(err.root(), Error::LabelOutOfRange { .. }));
        let bad = FederationConfig {
            retrain_interval: 0,
            ..cfg(2, 1, 1)
        };
        assert!(matches!(run_local(&data, &etf, &shape, &bad), Err(Error::InvalidConfig { .. })));
    }
}
