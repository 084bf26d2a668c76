//! CSV reports. Every row ends with the hash of the run configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::closed_loop::{CompensationEval, EpochRow};
use crate::error::{Error, Result};
use crate::tasks::TaskTrainReport;
use crate::vfn::VfnTrainReport;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes `header` and `rows` as CSV, appending a `config_hash` column.
pub fn write_csv<W: Write>(out: W, header: &[&str], rows: &[Vec<String>], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut head: Vec<&str> = header.to_vec();
    head.push("config_hash");
    w.write_record(&head).map_err(csv_err)?;
    for row in rows {
        let mut r: Vec<&str> = row.iter().map(String::as_str).collect();
        r.push(config_hash);
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_file(path: &Path, header: &[&str], rows: &[Vec<String>], config_hash: &str) -> Result<()> {
    write_csv(BufWriter::new(File::create(path)?), header, rows, config_hash)
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Epoch 0 is the loss before training.
pub fn write_vfn_report(path: impl AsRef<Path>, r: &VfnTrainReport, config_hash: &str) -> Result<()> {
    let mut rows = vec![vec!["0".into(), num(r.initial_loss)]];
    rows.extend(r.epoch_losses.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), num(*l)]));
    rows.push(vec!["final".into(), num(r.final_loss)]);
    write_file(path.as_ref(), &["epoch", "fusion_loss"], &rows, config_hash)
}

pub fn write_task_report(path: impl AsRef<Path>, reports: &[TaskTrainReport], config_hash: &str) -> Result<()> {
    let mut rows = Vec::new();
    for r in reports {
        for (i, l) in r.epoch_losses.iter().enumerate() {
            rows.push(vec![r.kind.name().into(), (i + 1).to_string(), num(*l), String::new()]);
        }
        rows.push(vec![
            r.kind.name().into(),
            "final".into(),
            num(r.final_loss),
            r.reached_threshold.to_string(),
        ]);
    }
    write_file(path.as_ref(), &["task", "epoch", "loss", "reached_threshold"], &rows, config_hash)
}

pub fn write_rsc_report(path: impl AsRef<Path>, rows: &[EpochRow], config_hash: &str) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.task.name().into(),
                num(r.loss_pre),
                num(r.loss_post),
                num(r.reward),
                num(r.penalty),
                num(r.closed_loop),
            ]
        })
        .collect();
    let header = ["epoch", "task", "loss_pre", "loss_post", "reward", "penalty", "closed_loop"];
    write_file(path.as_ref(), &header, &rows, config_hash)
}

pub fn compensation_rows(evals: &[CompensationEval]) -> Vec<Vec<String>> {
    evals
        .iter()
        .map(|e| {
            vec![
                e.task.name().into(),
                num(e.loss_pre),
                num(e.loss_post),
                num(e.relative_improvement()),
            ]
        })
        .collect()
}

pub const COMPENSATION_HEADER: [&str; 4] = ["task", "loss_pre", "loss_post", "relative_improvement"];

pub fn write_compensation(path: impl AsRef<Path>, evals: &[CompensationEval], config_hash: &str) -> Result<()> {
    write_file(path.as_ref(), &COMPENSATION_HEADER, &compensation_rows(evals), config_hash)
}
