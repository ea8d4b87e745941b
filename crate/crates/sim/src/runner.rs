//! Builds an experiment from its configuration, runs it, and writes the
//! run directory.

use std::path::{Path, PathBuf};

use gfpl_core::data::{gen_synthetic, partition, ClientData, Dataset};
use gfpl_core::etf::{build_etf, EtfMatrix};
use gfpl_core::federation::{self, Algorithm, Executor, InteractionRecord, RoundMetrics, RunResult};
use gfpl_core::model::ModelShape;
use gfpl_core::numerics::{Purpose, RngStream, StreamKey};
use gfpl_core::wire;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Result, SimError};
use crate::io;

/// Runs per-client work on a dedicated rayon pool.
pub struct PoolExecutor {
    pool: rayon::ThreadPool,
}

impl PoolExecutor {
    /// `workers == 0` uses one thread per CPU.
    pub fn new(workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SimError::config("runtime.client_workers", e.to_string()))?;
        Ok(Self { pool })
    }
}

impl Executor for PoolExecutor {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        self.pool.install(|| items.into_par_iter().map(f).collect())
    }
}

/// Everything a run needs, derived deterministically from the config.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub clients: Vec<ClientData>,
    pub etf: EtfMatrix,
    pub shape: ModelShape,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let source = cfg.dataset.as_ref().ok_or_else(|| SimError::config("dataset", "missing dataset block"))?;
    match (&source.synthetic, &source.idx) {
        (Some(spec), None) => {
            let mut rng = RngStream::keyed(cfg.seed, StreamKey::new(Purpose::Dataset));
            Ok(gen_synthetic(spec, &mut rng)?)
        }
        (None, Some(idx)) => io::load_idx(&idx.images, &idx.labels),
        _ => Err(SimError::config("dataset", "set exactly one of `synthetic` or `idx`")),
    }
}

impl Experiment {
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self> {
        let config = cfg.resolve()?;
        let dataset = load_dataset(&config)?;
        let clients = partition(&dataset, &config.partition)?;
        let shape = config.model.shape(dataset.input_dim(), dataset.classes);
        shape.validate()?;
        let etf = build_etf(
            shape.projection_dim(),
            shape.classes,
            &mut RngStream::keyed(config.seed, StreamKey::new(Purpose::Etf)),
        )?;
        Ok(Self {
            config,
            dataset,
            clients,
            etf,
            shape,
        })
    }

    pub fn run(&self) -> Result<RunResult> {
        let exec = PoolExecutor::new(self.config.runtime.client_workers)?;
        Ok(federation::run(&self.clients, &self.etf, &self.shape, &self.config.federation, &exec)?)
    }
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    name: &'a str,
    samples: usize,
    classes: usize,
    input_dim: usize,
}

#[derive(Serialize)]
struct ClientSummary<'a> {
    client_id: usize,
    classes: &'a [usize],
    shots: &'a [usize],
    train: usize,
    test: usize,
}

#[derive(Serialize)]
struct LedgerSummary {
    upload_total: usize,
    download_total: usize,
    total: usize,
    per_client: f64,
    interaction_rounds: usize,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    created: String,
    algorithm: Algorithm,
    config: &'a ExperimentConfig,
    dataset: DatasetSummary<'a>,
    clients: Vec<ClientSummary<'a>>,
    final_mean_accuracy: f64,
    final_std_accuracy: f64,
    ledger: LedgerSummary,
    history: &'a [RoundMetrics],
    interactions: &'a [InteractionRecord],
}

/// Creates a fresh directory `<root>/<timestamp>-<label>`, adding a counter
/// suffix when the name is taken.
pub fn fresh_dir(root: &Path, label: &str) -> Result<PathBuf> {
    io::create_dir(root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for n in 0.. {
        let name = if n == 0 {
            format!("{stamp}-{label}")
        } else {
            format!("{stamp}-{label}-{n}")
        };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(SimError::io(&dir, e)),
        }
    }
    unreachable!()
}

/// Writes `metrics.csv`, `run.json`, `config.toml`, `etf.bin` and one
/// checkpoint per client under `dir`.
pub fn write_outputs(dir: &Path, exp: &Experiment, result: &RunResult) -> Result<()> {
    let mut csv = Vec::new();
    io::write_metrics_csv(&result.history, &mut csv)?;
    io::write(&dir.join("metrics.csv"), &csv)?;
    io::write(&dir.join("config.toml"), exp.config.to_toml()?.as_bytes())?;
    io::write(&dir.join("etf.bin"), &wire::encode_etf(&exp.etf))?;

    let ckpt = dir.join("checkpoints");
    io::create_dir(&ckpt)?;
    for (i, model) in result.models.iter().enumerate() {
        io::write(&ckpt.join(format!("client-{i:03}.bin")), &wire::encode_checkpoint(model))?;
    }

    let last = result.history.last();
    let record = RunRecord {
        created: chrono::Local::now().to_rfc3339(),
        algorithm: exp.config.federation.algorithm,
        config: &exp.config,
        dataset: DatasetSummary {
            name: &exp.dataset.name,
            samples: exp.dataset.len(),
            classes: exp.dataset.classes,
            input_dim: exp.dataset.input_dim(),
        },
        clients: exp
            .clients
            .iter()
            .map(|c| ClientSummary {
                client_id: c.client_id,
                classes: &c.classes,
                shots: &c.shots,
                train: c.train.len(),
                test: c.test.len(),
            })
            .collect(),
        final_mean_accuracy: last.map_or(0.0, |m| m.mean_accuracy),
        final_std_accuracy: last.map_or(0.0, |m| m.std_accuracy),
        ledger: LedgerSummary {
            upload_total: result.ledger.upload_total(),
            download_total: result.ledger.download_total(),
            total: result.ledger.total(),
            per_client: result.ledger.per_client(),
            interaction_rounds: result.ledger.interaction_rounds(),
        },
        history: &result.history,
        interactions: &result.interactions,
    };
    let json = serde_json::to_vec_pretty(&record)?;
    io::write(&dir.join("run.json"), &json)
}

#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub result: RunResult,
}

/// Prepares, runs and records one experiment under a timestamped directory
/// inside `cfg.output_dir`.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<RunOutput> {
    let exp = Experiment::prepare(cfg)?;
    let result = exp.run()?;
    let label = format!(
        "{}-seed{}",
        serde_json::to_value(exp.config.federation.algorithm)?.as_str().unwrap_or("run"),
        exp.config.seed
    );
    let dir = fresh_dir(&exp.config.output_dir, &label)?;
    write_outputs(&dir, &exp, &result)?;
    Ok(RunOutput { dir, result })
}
