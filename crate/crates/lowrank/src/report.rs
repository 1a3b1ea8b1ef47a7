//! Allocation reports (JSON) and per-matrix spectrum tables (CSV).

use std::io::Write;

use lowrank_core::allocation::{
    normalize_importance, score_details, AllocationConfig, GridSearchOutcome, LayerStats,
    RankAllocation,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub name: String,
    pub shape: [usize; 2],
    pub numerical_rank: usize,
    pub erank: f64,
    pub importance: f64,
    pub importance_norm: f64,
    /// Real-valued uniform rank `k̄`.
    pub k_uniform: f64,
    pub eps_at_uniform: f64,
    pub score: f64,
    pub k_assigned: usize,
    pub loss_at_assigned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub label: String,
    pub alpha: Option<f64>,
    /// `null` when the candidate failed.
    pub validation_error: Option<f64>,
    pub failure: Option<String>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub strategy: String,
    pub ratio: f64,
    pub delta: f64,
    pub selected: String,
    pub alpha: Option<f64>,
    pub budget: usize,
    pub validation_error: Option<f64>,
    pub decompositions: usize,
    pub matrices: Vec<MatrixReport>,
    pub candidates: Vec<CandidateReport>,
}

/// Per-matrix breakdown of `allocation`; scores use the selected `α`
/// (1 for the uniform allocation, where they play no role).
pub fn matrix_reports(
    stats: &[LayerStats],
    cfg: &AllocationConfig,
    allocation: &RankAllocation,
) -> Result<Vec<MatrixReport>> {
    let alpha = allocation.label.alpha().unwrap_or(1.0);
    let details = score_details(stats, cfg, alpha)?;
    Ok(stats
        .iter()
        .zip(details)
        .zip(&allocation.ranks)
        .map(|((s, d), &k)| MatrixReport {
            name: s.id.to_string(),
            shape: [s.rows, s.cols],
            numerical_rank: s.loss_spectrum.len() - 1,
            erank: s.erank,
            importance: s.importance,
            importance_norm: d.beta_norm,
            k_uniform: d.uniform_rank,
            eps_at_uniform: d.eps_at_uniform,
            score: d.score,
            k_assigned: k,
            loss_at_assigned: s.loss_at(k),
        })
        .collect())
}

pub fn candidate_reports(
    candidates: &[RankAllocation],
    outcome: &GridSearchOutcome,
) -> Vec<CandidateReport> {
    candidates
        .iter()
        .zip(&outcome.scores)
        .enumerate()
        .map(|(i, (c, s))| CandidateReport {
            label: c.label.to_string(),
            alpha: c.label.alpha(),
            validation_error: s.score.is_finite().then_some(s.score),
            failure: s.failure.clone(),
            selected: i == outcome.selected,
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<csv output>", io),
        other => Error::format("<csv output>", format!("{other:?}")),
    }
}

/// `matrix,layer,module,k,loss`: one row per `k` in `0..=r`.
pub fn write_loss_spectra<W: Write>(stats: &[LayerStats], out: W) -> Result<usize> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["matrix", "layer", "module", "k", "loss"])
        .map_err(csv_err)?;
    let mut rows = 0;
    for s in stats {
        for (k, loss) in s.loss_spectrum.iter().enumerate() {
            w.write_record([
                s.id.to_string(),
                s.id.layer.to_string(),
                s.id.module.clone(),
                k.to_string(),
                loss.to_string(),
            ])
            .map_err(csv_err)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(rows)
}

/// One row per matrix with its effective rank and its layer's importance.
pub fn write_erank_table<W: Write>(stats: &[LayerStats], out: W) -> Result<usize> {
    let raw: Vec<f64> = stats.iter().map(|s| s.importance).collect();
    let norm = normalize_importance(&raw)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "matrix",
        "layer",
        "module",
        "rows",
        "cols",
        "numerical_rank",
        "erank",
        "importance",
        "importance_norm",
    ])
    .map_err(csv_err)?;
    for (s, b) in stats.iter().zip(norm) {
        w.write_record([
            s.id.to_string(),
            s.id.layer.to_string(),
            s.id.module.clone(),
            s.rows.to_string(),
            s.cols.to_string(),
            (s.loss_spectrum.len() - 1).to_string(),
            s.erank.to_string(),
            s.importance.to_string(),
            b.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(stats.len())
}
