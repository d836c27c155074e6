//! Dual-anchor token pruning.
//!
//! Every token is scored by its cosine distance to two anchors: the mean of
//! the current frame's tokens (spatial anchor) and the mean of the last `W`
//! frames' spatial anchors (temporal anchor). The score is
//! `α·d(z, temporal) + (1 − α)·d(z, spatial)` and the `⌊N·(1 − R)⌋`
//! highest-scoring tokens survive, in their original order. After pruning,
//! the current spatial anchor is pushed into the history.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StcError};
use crate::numerics::{
    cosine_similarity, retained_count, top_k_indices, Direction, IndexSet, Matrix,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunerConfig {
    /// Fraction of tokens dropped.
    pub prune_ratio: f64,
    /// Weight of the temporal anchor.
    pub alpha: f64,
    /// History length in frames.
    pub window: usize,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        PrunerConfig {
            prune_ratio: 0.75,
            alpha: 0.5,
            window: 8,
        }
    }
}

impl PrunerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(StcError::Config(format!(
                "prune_ratio must lie in [0, 1), got {}",
                self.prune_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(StcError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.window == 0 {
            return Err(StcError::Config("window must be >= 1".into()));
        }
        Ok(())
    }

    pub fn retained_count(&self, n: usize) -> usize {
        retained_count(n, self.prune_ratio)
    }
}

/// FIFO of past frames' mean token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    capacity: usize,
    entries: VecDeque<Vec<f32>>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        HistoryBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &Vec<f32>> {
        self.entries.iter()
    }

    /// Appends `mean`, evicting the oldest entry once full.
    pub fn push(&mut self, mean: Vec<f32>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(mean);
    }

    fn mean(&self) -> Option<Vec<f32>> {
        let dim = self.entries.front()?.len();
        let mut acc = vec![0.0f64; dim];
        for e in &self.entries {
            for (a, v) in acc.iter_mut().zip(e) {
                *a += f64::from(*v);
            }
        }
        let n = self.entries.len() as f64;
        Some(acc.into_iter().map(|a| (a / n) as f32).collect())
    }
}

/// Consumes the history by value, as a functional update.
pub fn update_history(mut history: HistoryBuffer, a_spatial: Vec<f32>) -> HistoryBuffer {
    history.push(a_spatial);
    history
}

/// Column means of `tokens`, accumulated in f64.
///
/// Each column is summed in ascending value order, so the result does not
/// depend on token order and pruning commutes exactly with permutations.
pub fn token_mean(tokens: &Matrix) -> Result<Vec<f32>> {
    if tokens.rows() == 0 {
        return Err(StcError::Argument("token set is empty".into()));
    }
    let n = tokens.rows() as f64;
    let mut column = Vec::with_capacity(tokens.rows());
    Ok((0..tokens.cols())
        .map(|c| {
            column.clear();
            column.extend(tokens.row_iter().map(|r| r[c]));
            column.sort_unstable_by(f32::total_cmp);
            let sum: f64 = column.iter().map(|&v| f64::from(v)).sum();
            (sum / n) as f32
        })
        .collect())
}

/// Returns `(a_temporal, a_spatial)`. With an empty history the temporal
/// anchor falls back to the spatial one.
pub fn establish_anchors(history: &HistoryBuffer, tokens: &Matrix) -> Result<(Vec<f32>, Vec<f32>)> {
    let spatial = token_mean(tokens)?;
    if let Some(front) = history.entries.front() {
        if front.len() != spatial.len() {
            return Err(StcError::shape(
                "establish_anchors",
                format!("history dim {} vs token dim {}", front.len(), spatial.len()),
            ));
        }
    }
    let temporal = history.mean().unwrap_or_else(|| spatial.clone());
    Ok((temporal, spatial))
}

#[inline]
fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - cosine_similarity(a, b)
}

/// Novelty score per token; higher means more novel. Range `[0, 2]`.
pub fn score_tokens(
    tokens: &Matrix,
    a_temporal: &[f32],
    a_spatial: &[f32],
    alpha: f64,
) -> Vec<f64> {
    tokens
        .row_iter()
        .map(|z| {
            alpha * cosine_distance(z, a_temporal) + (1.0 - alpha) * cosine_distance(z, a_spatial)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    /// Surviving rows in original order.
    pub retained_tokens: Matrix,
    pub retained_indices: IndexSet,
    pub scores: Vec<f64>,
}

/// Keeps the `⌊N·(1 − ratio)⌋` highest scores, ties to the lower index.
pub fn prune(tokens: &Matrix, scores: Vec<f64>, prune_ratio: f64) -> Result<PruneResult> {
    if scores.len() != tokens.rows() {
        return Err(StcError::shape(
            "prune",
            format!("{} scores for {} tokens", scores.len(), tokens.rows()),
        ));
    }
    let keep = retained_count(tokens.rows(), prune_ratio);
    let retained_indices = top_k_indices(&scores, keep, Direction::Largest)?;
    Ok(PruneResult {
        retained_tokens: tokens.gather_rows(&retained_indices),
        retained_indices,
        scores,
    })
}

/// Per-stream pruner. Frames must arrive in order.
#[derive(Debug, Clone)]
pub struct PrunerState {
    config: PrunerConfig,
    history: HistoryBuffer,
}

impl PrunerState {
    pub fn new(config: PrunerConfig) -> Result<Self> {
        config.validate()?;
        let history = HistoryBuffer::new(config.window);
        Ok(PrunerState { config, history })
    }

    pub fn config(&self) -> &PrunerConfig {
        &self.config
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    /// Anchors, scoring, top-k, then a history update with the spatial
    /// anchor of all pre-prune tokens.
    pub fn process_frame(&mut self, tokens: &Matrix) -> Result<PruneResult> {
        let (temporal, spatial) = establish_anchors(&self.history, tokens)?;
        let scores = score_tokens(tokens, &temporal, &spatial, self.config.alpha);
        let result = prune(tokens, scores, self.config.prune_ratio)?;
        self.history.push(spatial);
        Ok(result)
    }
}

/// Unitless quadratic proxy for LLM prefill cost.
pub fn prefill_cost_model(n_tokens: usize) -> f64 {
    let n = n_tokens as f64;
    n * n
}
