//! Closed-loop error feedback: failure pooling, per-shard error rates,
//! pruning of the worst shard, and retraining of pooled failures.
//!
//! The pool keeps the latest evaluation (routed shard + correctness score)
//! per sample; the failure set is the samples whose latest score is at or
//! below the correctness threshold. A re-trigger prunes the
//! highest-error-rate shard, rebuilds it from noise inside a fresh mask,
//! retrains every pooled failure, and clears the entries that retraining
//! verifiably fixed.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::error::{Error, Result};
use crate::memory::{route, RoutingTarget, ShardState};
use crate::model::{ModelState, TokenSequence};
use crate::numeric::Matrix;
use crate::sample::SampleId;

/// Latest evaluation of one sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalRecord {
    pub shard: usize,
    pub score: f64,
}

/// Failure pool plus per-shard error-rate bookkeeping.
#[derive(Debug, Clone)]
pub struct FeedbackPool {
    evals: BTreeMap<SampleId, EvalRecord>,
    pub tau_correct: f64,
    pub tau_prune: f64,
    pub tau_e: usize,
    pub max_iter: usize,
    retrigger_counts: Vec<usize>,
    expelled: Vec<SampleId>,
}

impl FeedbackPool {
    pub fn new(
        k_shards: usize,
        tau_correct: f64,
        tau_prune: f64,
        tau_e: usize,
        max_iter: usize,
    ) -> Self {
        FeedbackPool {
            evals: BTreeMap::new(),
            tau_correct,
            tau_prune,
            tau_e,
            max_iter,
            retrigger_counts: vec![0; k_shards],
            expelled: Vec::new(),
        }
    }

    /// Record (or overwrite) the latest evaluation for a sample.
    pub fn record_eval(&mut self, sample: SampleId, shard: usize, score: f64) {
        self.evals.insert(sample, EvalRecord { shard, score });
    }

    pub fn is_failure(&self, score: f64) -> bool {
        score <= self.tau_correct
    }

    /// Failures routed to each shard, as (sample, score) views.
    pub fn failures(&self) -> Vec<(SampleId, usize, f64)> {
        self.evals
            .iter()
            .filter(|(_, r)| r.score <= self.tau_correct)
            .map(|(id, r)| (*id, r.shard, r.score))
            .collect()
    }

    pub fn failure_ids(&self) -> Vec<SampleId> {
        self.failures().into_iter().map(|(id, _, _)| id).collect()
    }

    pub fn failure_count(&self) -> usize {
        self.evals.values().filter(|r| r.score <= self.tau_correct).count()
    }

    /// Proportion of shard `i`'s evaluated samples whose score is at or
    /// below the correctness threshold; 0 for a shard with no history.
    pub fn error_rate(&self, shard: usize) -> f64 {
        let mut total = 0usize;
        let mut failed = 0usize;
        for r in self.evals.values() {
            if r.shard == shard {
                total += 1;
                if r.score <= self.tau_correct {
                    failed += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            failed as f64 / total as f64
        }
    }

    pub fn error_rates(&self, k_shards: usize) -> Vec<f64> {
        (0..k_shards).map(|i| self.error_rate(i)).collect()
    }

    /// Pruning condition: any shard over tau_prune or the pool over tau_E,
    /// while re-trigger budget remains. A rate only counts once the shard
    /// has been evaluated on a few samples; one bad sample out of one is
    /// not evidence of a rotten shard.
    pub fn should_retrigger(&self, k_shards: usize) -> bool {
        if self.total_retriggers() >= self.max_iter {
            return false;
        }
        let mut rate_breach = false;
        for shard in 0..k_shards {
            let total = self.evals.values().filter(|r| r.shard == shard).count();
            if total >= 4 && self.error_rate(shard) > self.tau_prune {
                rate_breach = true;
                break;
            }
        }
        rate_breach || self.failure_count() > self.tau_e
    }

    pub fn total_retriggers(&self) -> usize {
        self.retrigger_counts.iter().sum()
    }

    pub fn retrigger_counts(&self) -> &[usize] {
        &self.retrigger_counts
    }

    /// Drop the eval history of a pruned shard. Pool failures routed to it
    /// stay alive through the retrain set.
    fn clear_shard_history(&mut self, shard: usize) {
        self.evals.retain(|_, r| r.shard != shard);
    }

    /// Mark all live failures as expelled (budget exhausted). They leave
    /// the pool but stay on the record.
    pub fn expel_remaining_failures(&mut self) -> Vec<SampleId> {
        let ids = self.failure_ids();
        for id in &ids {
            self.evals.remove(id);
            self.expelled.push(*id);
        }
        ids
    }

    pub fn expelled(&self) -> &[SampleId] {
        &self.expelled
    }

    pub fn eval_count(&self) -> usize {
        self.evals.len()
    }
}

/// What one re-trigger did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetriggerReport {
    pub pruned_shard: usize,
    pub retrain_size: usize,
    pub pre_error_rates: Vec<f64>,
    pub post_error_rates: Vec<f64>,
    /// How many re-triggers have run including this one.
    pub ordinal: usize,
}

/// Prune the worst shard, retrain pooled failures, and clear the entries
/// retraining fixed. `retrain` receives the shard pool and the failure
/// sample ids; `evaluate` must return the routed shard and fresh
/// correctness score for one sample.
pub fn retrigger(
    pool: &mut FeedbackPool,
    shards: &mut [ShardState],
    base: &Matrix,
    rho: f64,
    sigma_init: f64,
    rng: &mut ChaCha8Rng,
    mut retrain: impl FnMut(&mut [ShardState], &[SampleId]) -> Result<()>,
    mut evaluate: impl FnMut(&[ShardState], SampleId) -> Result<(usize, f64)>,
) -> Result<RetriggerReport> {
    if shards.is_empty() {
        return Err(Error::EmptyInput("shards"));
    }
    if pool.total_retriggers() >= pool.max_iter {
        return Err(Error::InvalidArgument("re-trigger budget exhausted".into()));
    }
    let pre_error_rates = pool.error_rates(shards.len());
    let mut worst = 0;
    for (i, &r) in pre_error_rates.iter().enumerate().skip(1) {
        if r > pre_error_rates[worst] {
            worst = i;
        }
    }
    // The retrain set must be captured before the pruned shard's history
    // is dropped; its failures are retrained, not forgotten.
    let retrain_set = pool.failure_ids();
    shards[worst].reinitialize(base, rho, sigma_init, rng)?;
    pool.clear_shard_history(worst);
    retrain(shards, &retrain_set)?;
    for id in &retrain_set {
        let (shard, score) = evaluate(shards, *id)?;
        if score > pool.tau_correct {
            // Verified fixed: clear the failure entry, keep the record.
            pool.record_eval(*id, shard, score);
        } else {
            pool.record_eval(*id, shard, score);
        }
    }
    pool.retrigger_counts[worst] += 1;
    Ok(RetriggerReport {
        pruned_shard: worst,
        retrain_size: retrain_set.len(),
        pre_error_rates,
        post_error_rates: pool.error_rates(shards.len()),
        ordinal: pool.total_retriggers(),
    })
}

/// Re-trigger count sufficient to drive an error rate from `r0` to at most
/// `tau_prune` when each re-trigger removes at least `delta`:
/// ceil(max(r0 - tau_prune, 0) / delta).
pub fn finite_time_bound(r0: f64, tau_prune: f64, delta: f64) -> Result<usize> {
    if delta <= 0.0 {
        return Err(Error::InvalidArgument(format!("delta must be > 0, got {delta}")));
    }
    let gap = r0 - tau_prune;
    if gap <= 0.0 {
        return Ok(0);
    }
    // Tiny slack absorbs quotient rounding when the gap divides exactly.
    Ok((gap / delta - 1e-12).ceil() as usize)
}

/// Evaluation outcome for one edit example.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub prediction: TokenSequence,
    pub correct: bool,
    pub score: f64,
    pub routed: RoutingTarget,
    /// Shard the argmax score points at, independent of the threshold;
    /// failures are attributed here.
    pub attributed_shard: usize,
    pub scores: Vec<f64>,
}

/// Route, decode greedily, and score one (prompt, target) pair.
pub fn evaluate_edit(
    model: &ModelState,
    shards: &[ShardState],
    main: &Matrix,
    epsilon: f64,
    prompt: &TokenSequence,
    target: &TokenSequence,
    mode: Mode,
) -> Result<EvalOutcome> {
    let a = model.activation_tap(prompt)?;
    let decision = route(&a, shards, main, epsilon)?;
    let value_matrix = match decision.target {
        RoutingTarget::Main => main,
        RoutingTarget::Shard(i) => &shards[i].w_prime,
    };
    let prediction = model.greedy_decode(prompt, target.len(), value_matrix)?;
    let correct = prediction == *target;
    let score = match mode {
        Mode::Qa => {
            if correct {
                1.0
            } else {
                0.0
            }
        }
        Mode::Hallucination => {
            let ce = model.autoreg_ce(prompt, target, value_matrix)?;
            let per_token_ppl = (ce / target.len() as f64).exp();
            (1.0 / per_token_ppl).clamp(0.0, 1.0)
        }
    };
    let attributed_shard = decision
        .scores
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bs), (i, &s)| {
            if s > bs {
                (i, s)
            } else {
                (bi, bs)
            }
        })
        .0;
    Ok(EvalOutcome {
        prediction,
        correct,
        score,
        routed: decision.target,
        attributed_shard,
        scores: decision.scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::init_shards;
    use rand::SeedableRng;

    fn pool() -> FeedbackPool {
        FeedbackPool::new(2, 0.85, 0.5, 10, 100)
    }

    fn sid(n: u32) -> SampleId {
        SampleId::new(n, 0)
    }

    #[test]
    fn error_rate_counts_scores_at_or_below_threshold() {
        let mut p = pool();
        p.record_eval(sid(0), 0, 0.9);
        p.record_eval(sid(1), 0, 0.2);
        p.record_eval(sid(2), 0, 0.3);
        let r = p.error_rate(0);
        assert!((r - 2.0 / 3.0).abs() < 1e-12, "rate {r}");
    }

    #[test]
    fn empty_shard_error_rate_is_zero() {
        let p = pool();
        assert_eq!(p.error_rate(1), 0.0);
    }

    #[test]
    fn all_failures_rate_is_one() {
        let mut p = pool();
        p.record_eval(sid(0), 1, 0.0);
        p.record_eval(sid(1), 1, 0.1);
        assert_eq!(p.error_rate(1), 1.0);
    }

    #[test]
    fn should_retrigger_thresholds() {
        let mut p = pool();
        // rates (0.1-ish, low), |E| small: no trigger.
        p.record_eval(sid(0), 0, 0.9);
        p.record_eval(sid(1), 1, 0.95);
        assert!(!p.should_retrigger(2));
        // One shard above tau_prune triggers.
        p.record_eval(sid(2), 0, 0.1);
        p.record_eval(sid(3), 0, 0.2);
        assert!(p.error_rate(0) > 0.5);
        assert!(p.should_retrigger(2));
    }

    #[test]
    fn pool_size_alone_can_trigger() {
        let mut p = FeedbackPool::new(2, 0.85, 1.1, 3, 100);
        // tau_prune > 1 is unreachable; only |E| > tau_E can fire.
        for i in 0..4 {
            p.record_eval(sid(i), 0, 0.0);
        }
        assert!(p.failure_count() > 3);
        assert!(p.should_retrigger(2));
    }

    #[test]
    fn exhausted_budget_blocks_retrigger() {
        let mut p = FeedbackPool::new(1, 0.85, 0.5, 0, 0);
        p.record_eval(sid(0), 0, 0.0);
        assert!(!p.should_retrigger(1));
    }

    #[test]
    fn finite_time_bound_examples() {
        assert_eq!(finite_time_bound(0.9, 0.5, 0.1).unwrap(), 4);
        assert_eq!(finite_time_bound(0.4, 0.5, 0.1).unwrap(), 0);
        assert_eq!(finite_time_bound(0.93, 0.5, 0.1).unwrap(), 5);
        assert!(finite_time_bound(0.9, 0.5, 0.0).is_err());
    }

    #[test]
    fn retrigger_prunes_worst_and_reports() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let base = Matrix::random_normal(6, 4, 1.0, &mut rng);
        let mut shards = init_shards(&base, 2, 0.5, &mut rng).unwrap();
        let mut p = pool();
        // Shard 0 at rate 0.9-ish, shard 1 healthy.
        for i in 0..9 {
            p.record_eval(sid(i), 0, 0.0);
        }
        p.record_eval(sid(9), 0, 1.0);
        p.record_eval(sid(10), 1, 1.0);

        let report = retrigger(
            &mut p,
            &mut shards,
            &base,
            0.5,
            0.01,
            &mut rng,
            |_, _| Ok(()),
            // Retraining fixes everything.
            |_, _| Ok((1, 1.0)),
        )
        .unwrap();
        assert_eq!(report.pruned_shard, 0);
        assert_eq!(report.retrain_size, 9);
        assert_eq!(report.ordinal, 1);
        assert_eq!(p.failure_count(), 0);
        assert!(report.post_error_rates.iter().all(|&r| r == 0.0));

        // The pruned shard restarted from small noise inside its mask.
        let delta = shards[0].delta(&base).unwrap();
        let mut masked_norm_sq = 0.0;
        for idx in 0..delta.len() {
            if shards[0].mask.data()[idx] == 0.0 {
                assert_eq!(delta.data()[idx], 0.0);
            } else {
                masked_norm_sq += delta.data()[idx] * delta.data()[idx];
            }
        }
        assert!(masked_norm_sq > 0.0);
    }

    #[test]
    fn retrigger_argmax_picks_higher_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let base = Matrix::random_normal(4, 4, 1.0, &mut rng);
        let mut shards = init_shards(&base, 2, 0.5, &mut rng).unwrap();
        let mut p = pool();
        for i in 0..9 {
            p.record_eval(sid(i), 0, 0.0);
        }
        p.record_eval(sid(9), 0, 1.0);
        p.record_eval(sid(10), 1, 0.0);
        // rates: shard0 = 0.9, shard1 = 1.0 -> prune shard 1.
        let report = retrigger(
            &mut p,
            &mut shards,
            &base,
            0.5,
            0.01,
            &mut rng,
            |_, _| Ok(()),
            |_, _| Ok((0, 1.0)),
        )
        .unwrap();
        assert_eq!(report.pruned_shard, 1);
    }

    #[test]
    fn delta_reduction_process_respects_finite_time_bound() {
        // Simulated process: each re-trigger fixes at least a delta
        // fraction of one shard's failures.
        let grid = [
            (0.9, 0.5, 0.1),
            (1.0, 0.5, 0.1),
            (0.93, 0.5, 0.1),
            (0.8, 0.25, 0.05),
            (0.6, 0.55, 0.2),
        ];
        for &(r0, tau, delta) in &grid {
            let total = 100usize;
            let mut failing = (r0 * total as f64).round() as usize;
            let bound = finite_time_bound(failing as f64 / total as f64, tau, delta).unwrap();
            let per_round = (delta * total as f64).ceil() as usize;
            let mut rounds = 0usize;
            let mut rate = failing as f64 / total as f64;
            while rate > tau + 1e-12 {
                failing = failing.saturating_sub(per_round);
                rounds += 1;
                rate = failing as f64 / total as f64;
                let lemma_bound = tau.max(r0 - rounds as f64 * delta);
                assert!(
                    rate <= lemma_bound + 1e-9,
                    "r0={r0} tau={tau} delta={delta}: rate {rate} above {lemma_bound} at round {rounds}"
                );
                assert!(rounds <= bound, "exceeded bound {bound} for r0={r0}");
            }
            assert!(rounds <= bound);
        }
    }

    #[test]
    fn evaluate_edit_untrained_model_misses_random_target() {
        let model = ModelState::new(64, 8, 12, 77);
        let shards: Vec<ShardState> = Vec::new();
        let prompt = TokenSequence::new(vec![3, 9, 14]).unwrap();
        let target = TokenSequence::new(vec![40, 41, 42]).unwrap();
        let out = evaluate_edit(&model, &shards, &model.w_v, 0.0, &prompt, &target, Mode::Qa)
            .unwrap();
        assert!(!out.correct);
        assert_eq!(out.score, 0.0);
        assert_eq!(out.routed, RoutingTarget::Main);
    }

    #[test]
    fn evaluate_edit_noop_edit_is_correct() {
        let model = ModelState::new(64, 8, 12, 78);
        let shards: Vec<ShardState> = Vec::new();
        let prompt = TokenSequence::new(vec![5, 6]).unwrap();
        // Target chosen as whatever the base model already decodes.
        let target = model.greedy_decode(&prompt, 2, &model.w_v).unwrap();
        let out = evaluate_edit(&model, &shards, &model.w_v, 0.0, &prompt, &target, Mode::Qa)
            .unwrap();
        assert!(out.correct);
        assert_eq!(out.score, 1.0);
    }

    #[test]
    fn hallucination_score_is_inverse_ppl() {
        let mut model = ModelState::new(16, 6, 8, 79);
        model.unembed = Matrix::zeros(6, 16);
        let shards: Vec<ShardState> = Vec::new();
        let prompt = TokenSequence::new(vec![1]).unwrap();
        let target = TokenSequence::new(vec![2, 3]).unwrap();
        let out = evaluate_edit(
            &model,
            &shards,
            &model.w_v,
            0.0,
            &prompt,
            &target,
            Mode::Hallucination,
        )
        .unwrap();
        // Uniform model: per-token PPL is the vocab size.
        assert!((out.score - 1.0 / 16.0).abs() < 1e-9);
    }

    #[test]
    fn expelled_failures_leave_pool_with_mark() {
        let mut p = pool();
        p.record_eval(sid(0), 0, 0.0);
        p.record_eval(sid(1), 0, 0.95);
        let expelled = p.expel_remaining_failures();
        assert_eq!(expelled, vec![sid(0)]);
        assert_eq!(p.failure_count(), 0);
        assert_eq!(p.expelled(), &[sid(0)]);
        // The healthy record stays.
        assert_eq!(p.eval_count(), 1);
    }
}
