//! Side-memory shards and activation-score routing.
//!
//! Each shard is a masked copy of the value matrix. The activation score
//! || a (W' - W_v) ||_2 measures how much a shard's delta would bend the
//! FFN output for a given input; routing compares the max score against a
//! threshold to pick main memory or the strongest shard. Updates only ever
//! touch coordinates inside the shard's Bernoulli mask, which bounds the
//! update norm by eta * ||grad||_F and scales expected cross-shard
//! interference by the square of the mask ratio.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{vec_mat, Matrix, Vector};
use crate::sample::SampleId;

/// One masked side memory.
#[derive(Debug, Clone)]
pub struct ShardState {
    pub id: usize,
    pub w_prime: Matrix,
    /// Entries exactly 0.0 or 1.0.
    pub mask: Matrix,
    pub assigned_samples: BTreeSet<SampleId>,
    /// Running mean of batch edit loss seen during training.
    pub train_loss: RunningMean,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunningMean {
    sum: f64,
    count: u64,
}

impl RunningMean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn clear(&mut self) {
        self.sum = 0.0;
        self.count = 0;
    }
}

/// Where routing sends an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutingTarget {
    Main,
    Shard(usize),
}

/// Routing outcome with the per-shard activation scores that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub target: RoutingTarget,
    pub scores: Vec<f64>,
}

/// Margins for the routing hinge loss plus the score-separation threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RoutingMarginConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma: f64,
    /// Target separation between edit and irrelevant scores. Realized
    /// through the margins rather than enforced as a hard constraint.
    pub tau: f64,
}

impl RoutingMarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0 && self.gamma2 > self.gamma1) {
            return Err(Error::InvalidConfig(format!(
                "routing margins require gamma2 > gamma1 >= 0, got gamma1={} gamma2={}",
                self.gamma1, self.gamma2
            )));
        }
        if self.gamma <= 0.0 {
            return Err(Error::InvalidConfig(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Tie handling for shard assignment when activation scores are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TiePolicy {
    /// Prefer the shard with the fewest assigned samples, then lowest id.
    LeastLoadedThenLowestId,
    LowestId,
}

/// Fresh shards: exact copies of the value matrix with i.i.d.
/// Bernoulli(rho) masks.
pub fn init_shards(w_v: &Matrix, k: usize, rho: f64, rng: &mut ChaCha8Rng) -> Result<Vec<ShardState>> {
    if k == 0 {
        return Err(Error::InvalidArgument("shard count must be >= 1".into()));
    }
    check_mask_ratio(rho)?;
    let mut shards = Vec::with_capacity(k);
    for id in 0..k {
        shards.push(ShardState {
            id,
            w_prime: w_v.clone(),
            mask: sample_mask(w_v.rows(), w_v.cols(), rho, rng),
            assigned_samples: BTreeSet::new(),
            train_loss: RunningMean::default(),
        });
    }
    Ok(shards)
}

fn check_mask_ratio(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio must be in (0, 1], got {rho}")));
    }
    Ok(())
}

pub fn sample_mask(rows: usize, cols: usize, rho: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() < rho { 1.0 } else { 0.0 })
}

/// || a (W' - W_v) ||_2 for one shard.
pub fn activation_score(a: &Vector, shard: &ShardState, w_v: &Matrix) -> Result<f64> {
    shifted_output(a, &shard.w_prime, w_v).map(|u| u.l2_norm())
}

/// a (W' - W_v); the score is this vector's norm and the margin-loss
/// gradient needs its direction.
fn shifted_output(a: &Vector, w_prime: &Matrix, w_v: &Matrix) -> Result<Vector> {
    if a.dim() != w_v.rows() {
        return Err(Error::DimMismatch {
            context: "activation_score",
            expected: w_v.rows(),
            got: a.dim(),
        });
    }
    let delta = w_prime.sub(w_v)?;
    vec_mat(a, &delta)
}

/// Pick main memory unless some shard's score exceeds epsilon; ties go to
/// the lowest shard id.
pub fn route(a: &Vector, shards: &[ShardState], w_v: &Matrix, epsilon: f64) -> Result<RoutingDecision> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if shards.is_empty() {
        return Ok(RoutingDecision { target: RoutingTarget::Main, scores: Vec::new() });
    }
    let mut scores = Vec::with_capacity(shards.len());
    for shard in shards {
        scores.push(activation_score(a, shard, w_v)?);
    }
    let (best, best_score) = argmax_lowest_id(&scores);
    let target = if best_score <= epsilon {
        RoutingTarget::Main
    } else {
        RoutingTarget::Shard(best)
    };
    Ok(RoutingDecision { target, scores })
}

fn argmax_lowest_id(scores: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_score = scores[0];
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    (best, best_score)
}

/// Most-active shard for training assignment: argmax activation score
/// among shards whose score clears `active_threshold`. When no shard is
/// meaningfully active (fresh shards, or an input nothing has claimed)
/// the tie policy decides, spreading load instead of piling onto whoever
/// accumulated the largest delta first.
pub fn assign_shard(
    a: &Vector,
    shards: &[ShardState],
    w_v: &Matrix,
    active_threshold: f64,
    tie_policy: TiePolicy,
) -> Result<usize> {
    if shards.is_empty() {
        return Err(Error::EmptyInput("shards"));
    }
    let mut scores = Vec::with_capacity(shards.len());
    for shard in shards {
        scores.push(activation_score(a, shard, w_v)?);
    }
    let (best, best_score) = argmax_lowest_id(&scores);
    let all_equal = scores.iter().all(|&s| s == scores[0]);
    if best_score > active_threshold && !all_equal {
        return Ok(best);
    }
    Ok(match tie_policy {
        TiePolicy::LowestId => 0,
        TiePolicy::LeastLoadedThenLowestId => {
            let mut pick = 0;
            let mut best_load = shards[0].assigned_samples.len();
            for (i, shard) in shards.iter().enumerate().skip(1) {
                if shard.assigned_samples.len() < best_load {
                    pick = i;
                    best_load = shard.assigned_samples.len();
                }
            }
            pick
        }
    })
}

/// Norms recorded by a masked update; the bound holds by construction.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    pub update_norm: f64,
    pub grad_norm: f64,
}

impl ShardState {
    /// W' <- W' - eta (M ⊙ grad). Rejects non-finite gradients without
    /// touching the shard.
    pub fn masked_update(&mut self, grad: &Matrix, eta: f64) -> Result<UpdateStats> {
        if eta <= 0.0 {
            return Err(Error::InvalidArgument(format!("eta must be > 0, got {eta}")));
        }
        if grad.shape() != self.w_prime.shape() {
            return Err(Error::ShapeMismatch {
                context: "masked_update",
                left_rows: self.w_prime.rows(),
                left_cols: self.w_prime.cols(),
                right_rows: grad.rows(),
                right_cols: grad.cols(),
            });
        }
        if let Some(index) = grad.first_non_finite() {
            return Err(Error::NonFinite { context: "masked_update gradient", index });
        }
        let mut masked_sq = 0.0;
        let mut grad_sq = 0.0;
        for idx in 0..grad.len() {
            let g = grad.data()[idx];
            grad_sq += g * g;
            let m = self.mask.data()[idx];
            if m != 0.0 {
                masked_sq += g * g;
                self.w_prime.data_mut()[idx] -= eta * g;
            }
        }
        let stats = UpdateStats {
            update_norm: eta * masked_sq.sqrt(),
            grad_norm: grad.frobenius_norm(),
        };
        // Norm bound under masked updates; grad_sq accumulates masked_sq
        // plus the masked-out squares, so the comparison is exact.
        assert!(
            masked_sq <= grad_sq,
            "masked update norm exceeded gradient norm: {} > {}",
            stats.update_norm,
            eta * stats.grad_norm
        );
        Ok(stats)
    }

    pub fn delta(&self, w_v: &Matrix) -> Result<Matrix> {
        self.w_prime.sub(w_v)
    }

    /// Re-seat the shard on a new base: copy, fresh mask, cleared history.
    pub fn rebase(&mut self, base: &Matrix, rho: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        check_mask_ratio(rho)?;
        self.w_prime = base.clone();
        self.mask = sample_mask(base.rows(), base.cols(), rho, rng);
        self.assigned_samples.clear();
        self.train_loss.clear();
        Ok(())
    }

    /// Prune-and-reinitialize: W' <- base + sigma * (noise ⊙ fresh mask).
    /// The perturbation lives entirely inside the new mask's support.
    pub fn reinitialize(
        &mut self,
        base: &Matrix,
        rho: f64,
        sigma_init: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.rebase(base, rho, rng)?;
        for idx in 0..self.w_prime.len() {
            if self.mask.data()[idx] != 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                self.w_prime.data_mut()[idx] += sigma_init * z;
            }
        }
        Ok(())
    }
}

/// Empirical vs analytic cross-shard inner-product scaling.
#[derive(Debug, Clone, Copy)]
pub struct OverlapCheck {
    pub empirical: f64,
    pub analytic: f64,
}

/// Monte Carlo estimate of E[<M_i ⊙ g_i, M_j ⊙ g_j>] / <g_i, g_j> under
/// independent Bernoulli(rho) masks; the analytic value is rho^2.
pub fn overlap_inner_product_check(rho: f64, trials: usize, seed: u64) -> Result<OverlapCheck> {
    check_mask_ratio(rho)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 256;
    let g_i = Vector::random_normal(dim, 1.0, &mut rng);
    // Correlated pair keeps the denominator away from zero.
    let noise = Vector::random_normal(dim, 1.0, &mut rng);
    let mut g_j = g_i.scale(0.7);
    g_j.scaled_add_assign(&noise, 0.3);

    let base = g_i.dot(&g_j)?;
    if base == 0.0 {
        return Err(Error::InvalidArgument(
            "overlap check undefined: <g_i, g_j> = 0".into(),
        ));
    }
    let mut acc = 0.0;
    for _ in 0..trials {
        let mut inner = 0.0;
        for p in 0..dim {
            let mi = rng.random::<f64>() < rho;
            let mj = rng.random::<f64>() < rho;
            if mi && mj {
                inner += g_i.get(p) * g_j.get(p);
            }
        }
        acc += inner;
    }
    Ok(OverlapCheck { empirical: acc / trials as f64 / base, analytic: rho * rho })
}

/// Mean over paired (edit, irrelevant) scores of the three-hinge margin
/// loss: irrelevant scores pushed below gamma1, edit scores above gamma2,
/// and their gap above gamma.
pub fn routing_margin_loss(
    edit_scores: &[f64],
    irrelevant_scores: &[f64],
    cfg: &RoutingMarginConfig,
) -> Result<f64> {
    cfg.validate()?;
    if edit_scores.is_empty() || irrelevant_scores.is_empty() {
        return Err(Error::EmptyInput("margin loss scores"));
    }
    if edit_scores.len() != irrelevant_scores.len() {
        return Err(Error::DimMismatch {
            context: "routing_margin_loss",
            expected: edit_scores.len(),
            got: irrelevant_scores.len(),
        });
    }
    let mut total = 0.0;
    for (&de, &di) in edit_scores.iter().zip(irrelevant_scores) {
        total += margin_terms(de, di, cfg).0;
    }
    Ok(total / edit_scores.len() as f64)
}

/// (loss, dL/d_delta_edit, dL/d_delta_irrelevant) for one pair.
pub fn margin_terms(delta_e: f64, delta_i: f64, cfg: &RoutingMarginConfig) -> (f64, f64, f64) {
    let mut loss = 0.0;
    let mut d_e = 0.0;
    let mut d_i = 0.0;
    if delta_i - cfg.gamma1 > 0.0 {
        loss += delta_i - cfg.gamma1;
        d_i += 1.0;
    }
    if cfg.gamma2 - delta_e > 0.0 {
        loss += cfg.gamma2 - delta_e;
        d_e -= 1.0;
    }
    if cfg.gamma - (delta_e - delta_i) > 0.0 {
        loss += cfg.gamma - (delta_e - delta_i);
        d_e -= 1.0;
        d_i += 1.0;
    }
    (loss, d_e, d_i)
}

/// Margin loss over one batch of (edit activation, irrelevant activation)
/// pairs with its gradient w.r.t. the shard matrix.
pub fn routing_margin_loss_with_grad(
    pairs: &[(&Vector, &Vector)],
    shard: &ShardState,
    w_v: &Matrix,
    cfg: &RoutingMarginConfig,
) -> Result<(f64, Matrix)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("margin loss pairs"));
    }
    let mut grad = Matrix::zeros(w_v.rows(), w_v.cols());
    let mut total = 0.0;
    let inv = 1.0 / pairs.len() as f64;
    for (a_edit, a_irr) in pairs {
        let u_e = shifted_output(a_edit, &shard.w_prime, w_v)?;
        let u_i = shifted_output(a_irr, &shard.w_prime, w_v)?;
        let de = u_e.l2_norm();
        let di = u_i.l2_norm();
        let (loss, c_e, c_i) = margin_terms(de, di, cfg);
        total += loss;
        // d||a (W'-W)|| / dW' = outer(a, u / ||u||); zero at u = 0.
        if c_e != 0.0 && de > 0.0 {
            add_score_grad(&mut grad, a_edit, &u_e, de, c_e * inv)?;
        }
        if c_i != 0.0 && di > 0.0 {
            add_score_grad(&mut grad, a_irr, &u_i, di, c_i * inv)?;
        }
    }
    Ok((total * inv, grad))
}

fn add_score_grad(grad: &mut Matrix, a: &Vector, u: &Vector, norm: f64, coeff: f64) -> Result<()> {
    let direction = u.scale(1.0 / norm);
    crate::numeric::outer_add_assign(grad, a, &direction, coeff)
}

/// Mean hinge max(0, score - gamma1) over a set of irrelevant activations
/// with its gradient; holds the whole irrelevant subspace under the
/// boundary independent of batch pairing.
pub fn locality_suppression_with_grad(
    irrelevant: &[Vector],
    shard: &ShardState,
    w_v: &Matrix,
    gamma1: f64,
) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(w_v.rows(), w_v.cols());
    if irrelevant.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / irrelevant.len() as f64;
    let mut total = 0.0;
    for a in irrelevant {
        let u = shifted_output(a, &shard.w_prime, w_v)?;
        let score = u.l2_norm();
        if score > gamma1 {
            total += score - gamma1;
            add_score_grad(&mut grad, a, &u, score, inv)?;
        }
    }
    Ok((total * inv, grad))
}
