//! Budgeted rank allocation across compressible matrices.
//!
//! Every matrix first receives a guaranteed share (`δ` of its uniform rank).
//! The remaining pool is split in proportion to a sensitivity score that
//! blends normalized layer importance `β` with the log-damped optimal loss at
//! the uniform rank:
//!
//! ```text
//! s_i = β_i^α · ln(e + ε*_{k̄,i})^(1−α)
//! ```
//!
//! Fractional shares are realized with the largest-remainder method so the
//! ranks always sum to the budget exactly.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::spectral::{ActivationBatch, Spectrum};
use crate::{Error, Result};

pub const DEFAULT_RETENTION: f64 = 0.5;

/// `[0, 0.1, …, 1.0]`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Identifies one compressible matrix: its transformer layer and module name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatrixId {
    pub layer: usize,
    pub module: String,
}

impl MatrixId {
    pub fn new(layer: usize, module: impl Into<String>) -> Self {
        Self {
            layer,
            module: module.into(),
        }
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.module)
    }
}

/// Allocation inputs for one matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub id: MatrixId,
    pub rows: usize,
    pub cols: usize,
    /// `[ε*_0, …, ε*_r]`.
    pub loss_spectrum: Vec<f64>,
    pub erank: f64,
    /// Raw importance `β` of the owning layer.
    pub importance: f64,
}

impl LayerStats {
    pub fn new(
        id: MatrixId,
        rows: usize,
        cols: usize,
        loss_spectrum: Vec<f64>,
        erank: f64,
        importance: f64,
    ) -> Result<Self> {
        let stats = Self {
            id,
            rows,
            cols,
            loss_spectrum,
            erank,
            importance,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn from_spectrum(
        id: MatrixId,
        rows: usize,
        cols: usize,
        spectrum: &Spectrum,
        importance: f64,
    ) -> Result<Self> {
        Self::new(
            id,
            rows,
            cols,
            spectrum.loss_spectrum(),
            spectrum.effective_rank()?,
            importance,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Empty("matrix shape"));
        }
        if self.loss_spectrum.is_empty() {
            return Err(Error::Empty("loss spectrum"));
        }
        if self
            .loss_spectrum
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
            || !self.importance.is_finite()
            || !self.erank.is_finite()
        {
            return Err(Error::NonFinite("layer stats"));
        }
        if self.loss_spectrum.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("loss spectrum", "must be non-increasing"));
        }
        if self.erank < 1.0 {
            return Err(Error::config("erank", "must be at least 1"));
        }
        Ok(())
    }

    /// `ε*_k`, zero beyond the numerical rank.
    pub fn loss_at(&self, k: usize) -> f64 {
        let last = self.loss_spectrum.len() - 1;
        self.loss_spectrum[k.min(last)]
    }

    pub fn max_rank(&self) -> usize {
        self.rows.min(self.cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationConfig {
    /// Fraction `ρ ∈ (0, 1)` of parameters retained.
    pub target_ratio: f64,
    /// Fraction `δ ∈ (0, 1]` of the uniform rank guaranteed to each matrix.
    pub retention: f64,
    pub alpha_grid: Vec<f64>,
    pub include_uniform: bool,
}

impl AllocationConfig {
    pub fn new(target_ratio: f64) -> Self {
        Self {
            target_ratio,
            retention: DEFAULT_RETENTION,
            alpha_grid: default_alpha_grid(),
            include_uniform: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio < 1.0) {
            return Err(Error::config("target_ratio", "must lie in (0, 1)"));
        }
        if !(self.retention > 0.0 && self.retention <= 1.0) {
            return Err(Error::config("retention", "must lie in (0, 1]"));
        }
        for (i, a) in self.alpha_grid.iter().enumerate() {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::config("alpha_grid", "values must lie in [0, 1]"));
            }
            if self.alpha_grid[..i].contains(a) {
                return Err(Error::config("alpha_grid", "values must be distinct"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AllocationLabel {
    Alpha(f64),
    Uniform,
}

impl AllocationLabel {
    pub fn alpha(&self) -> Option<f64> {
        match self {
            AllocationLabel::Alpha(a) => Some(*a),
            AllocationLabel::Uniform => None,
        }
    }
}

impl fmt::Display for AllocationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllocationLabel::Alpha(a) => write!(f, "alpha={a}"),
            AllocationLabel::Uniform => f.write_str("uniform"),
        }
    }
}

/// One integer rank per matrix, in the order of the stats it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RankAllocation {
    pub ranks: Vec<usize>,
    pub budget: usize,
    pub label: AllocationLabel,
}

impl RankAllocation {
    pub fn total(&self) -> usize {
        self.ranks.iter().sum()
    }

    /// `Σ k_i (m_i + n_i)`.
    pub fn parameter_count(&self, stats: &[LayerStats]) -> usize {
        self.ranks
            .iter()
            .zip(stats)
            .map(|(k, s)| k * (s.rows + s.cols))
            .sum()
    }
}

/// Real-valued uniform rank `k̄ = m·n/(m+n)·ρ`.
pub fn uniform_rank(rows: usize, cols: usize, ratio: f64) -> f64 {
    (rows as f64 * cols as f64) / (rows + cols) as f64 * ratio
}

/// Running mean of per-row cosine similarity between a layer's input and
/// output hidden states.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CosineStats {
    pub similarity_sum: f64,
    pub rows: u64,
}

impl CosineStats {
    pub fn observe(
        &mut self,
        hidden_in: &ActivationBatch,
        hidden_out: &ActivationBatch,
    ) -> Result<()> {
        if (hidden_in.rows(), hidden_in.width()) != (hidden_out.rows(), hidden_out.width()) {
            return Err(Error::ShapeMismatch {
                context: "hidden states",
                left: (hidden_in.rows(), hidden_in.width()),
                right: (hidden_out.rows(), hidden_out.width()),
            });
        }
        let (a, b) = (hidden_in.matrix(), hidden_out.matrix());
        for t in 0..a.nrows() {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for j in 0..a.ncols() {
                let (x, y) = (a[(t, j)], b[(t, j)]);
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            if aa > 0.0 && bb > 0.0 {
                self.similarity_sum += (ab / (libm::sqrt(aa) * libm::sqrt(bb))).clamp(-1.0, 1.0);
            }
            self.rows += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CosineStats) {
        self.similarity_sum += other.similarity_sum;
        self.rows += other.rows;
    }

    /// `1 − mean cosine`, in `[0, 2]`.
    pub fn importance(&self) -> Result<f64> {
        if self.rows == 0 {
            return Err(Error::Empty("hidden-state batch"));
        }
        Ok(1.0 - self.similarity_sum / self.rows as f64)
    }
}

/// Layer importance `1 − mean_t cos(h_in_t, h_out_t)`; rows where either
/// vector is zero count as similarity 0.
pub fn layer_importance(hidden_in: &ActivationBatch, hidden_out: &ActivationBatch) -> Result<f64> {
    let mut stats = CosineStats::default();
    stats.observe(hidden_in, hidden_out)?;
    stats.importance()
}

/// Min–max normalizes to `[0, 1]` and shifts by one. A constant input maps to
/// 1.5 everywhere.
pub fn normalize_importance(betas: &[f64]) -> Result<Vec<f64>> {
    if betas.is_empty() {
        return Err(Error::Empty("importance vector"));
    }
    if betas.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("importance vector"));
    }
    let min = betas.iter().copied().fold(f64::INFINITY, f64::min);
    let max = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span == 0.0 {
        return Ok(vec![1.5; betas.len()]);
    }
    Ok(betas.iter().map(|b| (b - min) / span + 1.0).collect())
}

/// `β^α · ln(e + ε)^(1−α)`.
pub fn sensitivity_score(beta_norm: f64, eps_at_uniform: f64, alpha: f64) -> f64 {
    let damped = libm::log(core::f64::consts::E + eps_at_uniform);
    libm::pow(beta_norm, alpha) * libm::pow(damped, 1.0 - alpha)
}

/// Per-matrix quantities behind an allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDetail {
    /// Real-valued uniform rank `k̄_i`.
    pub uniform_rank: f64,
    /// `round(k̄_i)`.
    pub uniform_target: usize,
    pub eps_at_uniform: f64,
    pub beta_norm: f64,
    pub score: f64,
}

pub fn score_details(
    stats: &[LayerStats],
    cfg: &AllocationConfig,
    alpha: f64,
) -> Result<Vec<ScoreDetail>> {
    if stats.is_empty() {
        return Err(Error::Empty("layer stats"));
    }
    cfg.validate()?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", "must lie in [0, 1]"));
    }
    for s in stats {
        s.validate()?;
    }
    let raw: Vec<f64> = stats.iter().map(|s| s.importance).collect();
    let betas = normalize_importance(&raw)?;
    Ok(stats
        .iter()
        .zip(betas)
        .map(|(s, beta_norm)| {
            let kbar = uniform_rank(s.rows, s.cols, cfg.target_ratio);
            let target = libm::round(kbar) as usize;
            let eps = s.loss_at(target);
            ScoreDetail {
                uniform_rank: kbar,
                uniform_target: target,
                eps_at_uniform: eps,
                beta_norm,
                score: sensitivity_score(beta_norm, eps, alpha),
            }
        })
        .collect())
}

/// Largest-remainder apportionment of `total` units in proportion to
/// `weights`, restricted to `eligible` entries. Ties go to the lower index.
pub fn apportion(total: usize, weights: &[f64], eligible: &[bool]) -> Vec<usize> {
    let mut out = vec![0usize; weights.len()];
    let sum: f64 = weights
        .iter()
        .zip(eligible)
        .filter(|(_, e)| **e)
        .map(|(w, _)| *w)
        .sum();
    if total == 0 || sum.is_nan() || sum <= 0.0 {
        return out;
    }
    let mut remainders = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, (w, e)) in weights.iter().zip(eligible).enumerate() {
        if !*e {
            continue;
        }
        let quota = total as f64 * (w / sum);
        let base = libm::floor(quota);
        out[i] = base as usize;
        assigned += out[i];
        remainders.push((i, quota - base));
    }
    // Roundoff can push the floors one unit over; take it back from the
    // smallest remainders.
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    while assigned > total {
        let (i, _) = *remainders
            .iter()
            .rev()
            .find(|(i, _)| out[*i] > 0)
            .expect("positive share to reclaim");
        out[i] -= 1;
        assigned -= 1;
    }
    for &(i, _) in remainders.iter().cycle().take(total - assigned) {
        out[i] += 1;
    }
    out
}

/// Adds `pool` units to `floors` by score, capping each entry at `caps` and
/// re-distributing any excess among the uncapped entries.
pub fn distribute_pool(
    floors: &[usize],
    pool: usize,
    scores: &[f64],
    caps: &[usize],
) -> Result<Vec<usize>> {
    let n = floors.len();
    let mut ranks = floors.to_vec();
    let mut eligible: Vec<bool> = (0..n).map(|i| ranks[i] < caps[i]).collect();
    let mut remaining = pool;
    while remaining > 0 {
        if !eligible.iter().any(|e| *e) {
            return Err(Error::config("budget", "exceeds the summed rank caps"));
        }
        let shares = apportion(remaining, scores, &eligible);
        remaining = 0;
        for i in 0..n {
            ranks[i] += shares[i];
            if ranks[i] >= caps[i] {
                remaining += ranks[i] - caps[i];
                ranks[i] = caps[i];
                eligible[i] = false;
            }
        }
    }
    Ok(ranks)
}

fn allocate_with_retention(
    stats: &[LayerStats],
    cfg: &AllocationConfig,
    alpha: f64,
    retention: f64,
    label: AllocationLabel,
) -> Result<RankAllocation> {
    let details = score_details(stats, cfg, alpha)?;
    let budget: usize = details.iter().map(|d| d.uniform_target).sum();
    if budget < stats.len() {
        return Err(Error::BudgetTooSmall {
            budget,
            matrices: stats.len(),
        });
    }
    let floors: Vec<usize> = details
        .iter()
        .map(|d| (libm::floor(d.uniform_target as f64 * retention) as usize).max(1))
        .collect();
    let guaranteed: usize = floors.iter().sum();
    if guaranteed > budget {
        return Err(Error::BudgetTooSmall {
            budget,
            matrices: stats.len(),
        });
    }
    let scores: Vec<f64> = details.iter().map(|d| d.score).collect();
    let caps: Vec<usize> = stats.iter().map(LayerStats::max_rank).collect();
    let ranks = distribute_pool(&floors, budget - guaranteed, &scores, &caps)?;
    debug_assert_eq!(ranks.iter().sum::<usize>(), budget);
    Ok(RankAllocation {
        ranks,
        budget,
        label,
    })
}

/// Dynamic allocation for one `α`.
///
/// The budget is `Σ round(k̄_i)`; each matrix is guaranteed
/// `max(1, ⌊round(k̄_i)·δ⌋)` and the rest of the budget is split by score.
pub fn allocate(
    stats: &[LayerStats],
    cfg: &AllocationConfig,
    alpha: f64,
) -> Result<RankAllocation> {
    allocate_with_retention(
        stats,
        cfg,
        alpha,
        cfg.retention,
        AllocationLabel::Alpha(alpha),
    )
}

/// `k_i = round(k̄_i)` for every matrix.
pub fn allocate_uniform(stats: &[LayerStats], cfg: &AllocationConfig) -> Result<RankAllocation> {
    allocate_with_retention(stats, cfg, 1.0, 1.0, AllocationLabel::Uniform)
}

/// One allocation per `α` in ascending order, then the uniform allocation
/// when configured.
pub fn generate_candidates(
    stats: &[LayerStats],
    cfg: &AllocationConfig,
) -> Result<Vec<RankAllocation>> {
    cfg.validate()?;
    let mut alphas = cfg.alpha_grid.clone();
    alphas.sort_by(f64::total_cmp);
    let mut out = alphas
        .into_iter()
        .map(|a| allocate(stats, cfg, a))
        .collect::<Result<Vec<_>>>()?;
    if cfg.include_uniform {
        out.push(allocate_uniform(stats, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub label: AllocationLabel,
    /// Validation score, lower is better; `+∞` when evaluation failed.
    pub score: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchOutcome {
    pub selected: usize,
    pub scores: Vec<CandidateScore>,
}

impl GridSearchOutcome {
    pub fn selected_score(&self) -> f64 {
        self.scores[self.selected].score
    }
}

/// Evaluates every candidate and picks the lowest score, earliest on ties.
/// A failing (or non-finite) evaluation scores `+∞` and is flagged.
pub fn grid_search<E, F>(
    candidates: &[RankAllocation],
    mut evaluate: F,
) -> Result<GridSearchOutcome>
where
    E: fmt::Display,
    F: FnMut(&RankAllocation) -> core::result::Result<f64, E>,
{
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut selected = 0;
    for (i, cand) in candidates.iter().enumerate() {
        let (score, failure) = match evaluate(cand) {
            Ok(s) if s.is_nan() => (f64::INFINITY, Some("evaluator returned NaN".to_string())),
            Ok(s) => (s, None),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        };
        if score
            < scores
                .get(selected)
                .map_or(f64::INFINITY, |c: &CandidateScore| c.score)
            || i == 0
        {
            selected = i;
        }
        scores.push(CandidateScore {
            label: cand.label,
            score,
            failure,
        });
    }
    Ok(GridSearchOutcome { selected, scores })
}
