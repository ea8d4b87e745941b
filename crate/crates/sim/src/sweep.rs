//! One-parameter sweeps over a base configuration.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::{Result, SimError};
use crate::io;
use crate::runner::{fresh_dir, write_outputs, Experiment};

/// Returns a copy of `cfg` with the numeric field at dotted `path` set to
/// `value`. Integer fields only accept non-negative whole numbers.
pub fn with_param(cfg: &ExperimentConfig, path: &str, value: f64) -> Result<ExperimentConfig> {
    let mut root = serde_json::to_value(cfg)?;
    let mut slot = &mut root;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| SimError::Sweep(format!("no config field `{path}`")))?;
    }
    let Value::Number(current) = slot else {
        return Err(SimError::Sweep(format!("field `{path}` is not numeric")));
    };
    *slot = if current.is_f64() {
        serde_json::Number::from_f64(value)
            .map(Value::Number)
            .ok_or_else(|| SimError::Sweep(format!("value {value} is not finite")))?
    } else if value >= 0.0 && value.fract() == 0.0 && value <= u64::MAX as f64 {
        Value::from(value as u64)
    } else {
        return Err(SimError::Sweep(format!("field `{path}` takes non-negative integers, got {value}")));
    };
    Ok(serde_json::from_value(root)?)
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_mean_acc: f64,
    pub final_std_acc: f64,
    pub upload_total: usize,
    pub download_total: usize,
    pub total_scalars: usize,
    pub scalars_per_client: f64,
    pub interaction_rounds: usize,
    /// Scalars uploaded in the first interaction round.
    pub first_upload: usize,
    /// Total fused components over all classes, first and last interaction.
    pub fused_components_first: usize,
    pub fused_components_last: usize,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub rows: Vec<SweepRow>,
}

fn sub_run(cfg: &ExperimentConfig, param: &str, value: f64, dir: &Path) -> Result<SweepRow> {
    let exp = Experiment::prepare(with_param(cfg, param, value)?)?;
    let result = exp.run()?;
    let sub = dir.join(format!("{param}={value}"));
    io::create_dir(&sub)?;
    write_outputs(&sub, &exp, &result)?;
    let fused = |i: Option<&gfpl_core::federation::InteractionRecord>| i.map_or(0, |r| r.global_components.values().sum());
    let last = result.history.last();
    Ok(SweepRow {
        value,
        final_mean_acc: last.map_or(0.0, |m| m.mean_accuracy),
        final_std_acc: last.map_or(0.0, |m| m.std_accuracy),
        upload_total: result.ledger.upload_total(),
        download_total: result.ledger.download_total(),
        total_scalars: result.ledger.total(),
        scalars_per_client: result.ledger.per_client(),
        interaction_rounds: result.ledger.interaction_rounds(),
        first_upload: result.ledger.rounds.iter().map(|t| t.upload).find(|&u| u > 0).unwrap_or(0),
        fused_components_first: fused(result.interactions.first()),
        fused_components_last: fused(result.interactions.last()),
    })
}

/// Runs one sub-experiment per value under `<output_dir>/<timestamp>-sweep-<param>/`
/// and writes `summary.csv` there.
pub fn sweep(cfg: &ExperimentConfig, param: &str, values: &[f64]) -> Result<SweepOutput> {
    if values.is_empty() {
        return Err(SimError::Sweep("no values given".into()));
    }
    // fail fast on a bad path before creating any directory
    with_param(cfg, param, values[0])?.resolve()?;
    let dir = fresh_dir(&cfg.output_dir, &format!("sweep-{param}"))?;
    let rows: Vec<SweepRow> = if cfg.runtime.concurrent_sweep {
        values.par_iter().map(|&v| sub_run(cfg, param, v, &dir)).collect::<Result<_>>()?
    } else {
        values.iter().map(|&v| sub_run(cfg, param, v, &dir)).collect::<Result<_>>()?
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| SimError::Sweep(e.to_string()))?;
    io::write(&dir.join("summary.csv"), &bytes)?;
    Ok(SweepOutput { dir, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            r#"
            [dataset.synthetic]
            classes = 3
            input_dim = 4
            per_class = 10
            spread = 0.2
            [partition]
            clients = 2
            way_mean = 2
            shot_mean = 5
            [model]
            feature_dim = 4
            "#,
        )
        .unwrap()
    }

    #[test]
    fn sets_float_and_integer_fields() {
        let c = with_param(&base(), "federation.train.lambda", 0.5).unwrap();
        assert_eq!(c.federation.train.lambda, 0.5);
        let c = with_param(&base(), "federation.em.components", 8.0).unwrap();
        assert_eq!(c.federation.em.components, 8);
        let c = with_param(&base(), "partition.way_mean", 3.0).unwrap();
        assert_eq!(c.partition.way_mean, 3.0);
    }

    #[test]
    fn rejects_bad_paths_and_values() {
        assert!(with_param(&base(), "federation.nope", 1.0).unwrap_err().to_string().contains("no config field"));
        assert!(with_param(&base(), "federation.algorithm", 1.0).unwrap_err().to_string().contains("not numeric"));
        assert!(with_param(&base(), "federation.linkage", 1.0).is_err());
        assert!(with_param(&base(), "federation.rounds", 2.5).is_err());
        assert!(with_param(&base(), "federation.rounds", -1.0).is_err());
        assert!(with_param(&base(), "model.hidden", 1.0).is_err());
    }
}
