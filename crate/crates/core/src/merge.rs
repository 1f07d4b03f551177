//! Loss-aware weighted sign-resolving merge of shard deltas into main
//! memory.
//!
//! Shards are weighted by a softmax over their negated scaled training
//! losses. Per coordinate, zeros are sign-neutral: when every nonzero delta
//! agrees in sign the merged delta is the weighted sum, otherwise the
//! single most trustworthy delta (largest weight * magnitude) wins
//! outright.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::ShardState;
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Loss sensitivity of the trust weights.
    pub alpha: f64,
    /// Edit cycles between merges.
    pub merge_cadence: usize,
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if self.merge_cadence == 0 {
            return Err(Error::InvalidConfig("merge_cadence must be >= 1".into()));
        }
        Ok(())
    }
}

/// How a merge resolved its coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeReport {
    pub weights: Vec<f64>,
    /// Coordinates resolved by the weighted sum (all signs agree).
    pub consistent: usize,
    /// Coordinates where a conflict kept a single shard's delta.
    pub conflicts: usize,
    pub delta_norm: f64,
}

/// Softmax of -alpha * loss, computed with max subtraction. Strictly
/// positive, sums to one.
pub fn trust_weights(losses: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::EmptyInput("trust weight losses"));
    }
    if let Some(idx) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite { context: "trust_weights loss", index: idx });
    }
    let scaled: Vec<f64> = losses.iter().map(|&l| -alpha * l).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

fn check_merge_inputs(deltas: &[Matrix], weights: &[f64], w_v: &Matrix) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput("merge deltas"));
    }
    if deltas.len() != weights.len() {
        return Err(Error::DimMismatch {
            context: "ties_merge weights",
            expected: deltas.len(),
            got: weights.len(),
        });
    }
    for d in deltas {
        if d.shape() != w_v.shape() {
            return Err(Error::ShapeMismatch {
                context: "ties_merge delta",
                left_rows: w_v.rows(),
                left_cols: w_v.cols(),
                right_rows: d.rows(),
                right_cols: d.cols(),
            });
        }
    }
    Ok(())
}

/// Resolve one coordinate. Ascending shard order everywhere keeps the
/// result bit-reproducible; exact ties keep the lowest shard id.
fn resolve_coordinate(deltas: &[Matrix], weights: &[f64], idx: usize) -> (f64, bool) {
    let mut has_pos = false;
    let mut has_neg = false;
    for d in deltas {
        let v = d.data()[idx];
        if v > 0.0 {
            has_pos = true;
        } else if v < 0.0 {
            has_neg = true;
        }
    }
    if has_pos && has_neg {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, d) in deltas.iter().enumerate() {
            let score = weights[i] * d.data()[idx].abs();
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        (deltas[best].data()[idx], true)
    } else {
        let mut sum = 0.0;
        for (i, d) in deltas.iter().enumerate() {
            sum += weights[i] * d.data()[idx];
        }
        (sum, false)
    }
}

/// Merge deltas into the base value matrix; returns the merged matrix and
/// a resolution report.
pub fn ties_merge(
    deltas: &[Matrix],
    weights: &[f64],
    w_v: &Matrix,
) -> Result<(Matrix, MergeReport)> {
    check_merge_inputs(deltas, weights, w_v)?;
    let mut merged = w_v.clone();
    let mut consistent = 0;
    let mut conflicts = 0;
    let mut delta_sq = 0.0;
    for idx in 0..w_v.len() {
        let (delta, conflicted) = resolve_coordinate(deltas, weights, idx);
        if conflicted {
            conflicts += 1;
        } else {
            consistent += 1;
        }
        delta_sq += delta * delta;
        merged.data_mut()[idx] += delta;
    }
    let report = MergeReport {
        weights: weights.to_vec(),
        consistent,
        conflicts,
        delta_norm: delta_sq.sqrt(),
    };
    Ok((merged, report))
}

/// Re-derives randomly sampled coordinates by direct enumeration of the
/// resolution rule and compares bit-for-bit with `ties_merge`.
pub fn merge_oracle_check(
    deltas: &[Matrix],
    weights: &[f64],
    w_v: &Matrix,
    samples: usize,
    seed: u64,
) -> Result<bool> {
    check_merge_inputs(deltas, weights, w_v)?;
    let (merged, _) = ties_merge(deltas, weights, w_v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let idx = rng.random_range(0..w_v.len());
        // Independent route: partition the nonzero entries by sign first.
        let positives: Vec<usize> =
            (0..deltas.len()).filter(|&i| deltas[i].data()[idx] > 0.0).collect();
        let negatives: Vec<usize> =
            (0..deltas.len()).filter(|&i| deltas[i].data()[idx] < 0.0).collect();
        let expected_delta = if !positives.is_empty() && !negatives.is_empty() {
            let winner = positives
                .iter()
                .chain(&negatives)
                .copied()
                .fold(None::<(usize, f64)>, |acc, i| {
                    let score = weights[i] * deltas[i].data()[idx].abs();
                    match acc {
                        Some((bi, bs)) if score > bs || (score == bs && i < bi) => {
                            Some((i, score.max(bs)))
                        }
                        Some(keep) => Some(keep),
                        None => Some((i, score)),
                    }
                })
                .expect("conflict implies nonzero entries")
                .0;
            deltas[winner].data()[idx]
        } else {
            let mut sum = 0.0;
            for i in 0..deltas.len() {
                sum += weights[i] * deltas[i].data()[idx];
            }
            sum
        };
        let expected = w_v.data()[idx] + expected_delta;
        if merged.data()[idx].to_bits() != expected.to_bits() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Re-base every shard onto the merged matrix: copy it, resample the mask,
/// clear assignments and loss history.
pub fn post_merge_reset(
    shards: &mut [ShardState],
    merged: &Matrix,
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for shard in shards.iter_mut() {
        shard.rebase(merged, rho, rng)?;
    }
    Ok(())
}
