use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the per-epoch CSV log.
///
/// `m1_diagonal`/`m2_diagonal` hold the diagonals of the noise matrices in effect at the
/// end of the epoch, `;`-separated; `*_distance` is the induced infinity norm of `M - I`.
/// `clean_acc` and `robust_acc` are percentages on the held-out set and stay empty on
/// epochs without a selection evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub lr: f64,
    pub loss_nat: f64,
    pub loss_adv: f64,
    pub loss_total: f64,
    pub teacher_nat_acc: f64,
    pub teacher_adv_acc: f64,
    pub m1_distance: f64,
    pub m2_distance: f64,
    pub m1_diagonal: String,
    pub m2_diagonal: String,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
}

pub(crate) fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
