//! Dataset files, metrics tables and binary artifacts.

use std::fs;
use std::io::Write;
use std::path::Path;

use gfpl_core::data::{idx_dataset, Dataset};
use gfpl_core::federation::RoundMetrics;
use serde::Serialize;

use crate::error::{Result, SimError};

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SimError::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SimError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| SimError::io(path, e))
}

/// Loads an IDX image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let name = images.file_stem().map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    Ok(idx_dataset(name, &read(images)?, &read(labels)?)?)
}

/// Writes `x0..x{d-1},label` rows.
pub fn write_dataset_csv(ds: &Dataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..ds.input_dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for s in &ds.samples {
        let mut row: Vec<String> = s.x.iter().map(f64::to_string).collect();
        row.push(s.label.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| SimError::io(Path::new("<csv>"), e))?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsRow {
    round: usize,
    mean_acc: f64,
    std_acc: f64,
    mean_train_loss: f64,
    retrain_loss: Option<f64>,
    upload_scalars: usize,
    download_scalars: usize,
}

/// One row per round; `retrain_loss` is empty on rounds without retraining.
pub fn write_metrics_csv(history: &[RoundMetrics], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in history {
        w.serialize(MetricsRow {
            round: m.round,
            mean_acc: m.mean_accuracy,
            std_acc: m.std_accuracy,
            mean_train_loss: m.mean_train_loss,
            retrain_loss: m.retrain_loss,
            upload_scalars: m.upload,
            download_scalars: m.download,
        })?;
    }
    w.flush().map_err(|e| SimError::io(Path::new("<csv>"), e))?;
    Ok(())
}
