//! Distribution-aware batching and inner-batch knowledge distillation.
//!
//! Samples are grouped by cosine similarity of their (unit-norm) features;
//! the first member of each batch acts as the teacher. The KD loss combines
//! a cosine-alignment term against the teacher with a variance term over
//! the batch, and samples whose per-sample loss stays high are evicted to a
//! residual pool for reclustering. The same loss, restricted to the unit
//! sphere with a fixed teacher direction, drives the retraction-based
//! descent that the convergence check exercises.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Vector;
use crate::sample::SampleId;

/// Weights and thresholds for the KD machinery.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KdConfig {
    /// Cosine-term weight (lambda).
    pub lambda_cos: f64,
    /// Variance-term weight (written theta elsewhere; renamed to avoid
    /// clashing with model parameters).
    pub theta_var: f64,
    /// Per-sample consistency threshold; losses at or above it evict.
    pub eps_cons: f64,
    /// Soft-KD temperature; 0 disables the optional KL term.
    pub temperature: f64,
    /// Target batch size b.
    pub batch_size: usize,
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cos < 0.0 || self.theta_var < 0.0 {
            return Err(Error::InvalidConfig("KD weights must be >= 0".into()));
        }
        if self.eps_cons <= 0.0 {
            return Err(Error::InvalidConfig("eps_cons must be > 0".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::InvalidConfig("temperature must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// One similarity-formed batch. Member 0 is the teacher.
#[derive(Debug, Clone)]
pub struct Batch {
    pub teacher: SampleId,
    pub students: Vec<SampleId>,
    /// Cached unit features; index 0 is the teacher's.
    pub features: Vec<Vector>,
}

impl Batch {
    pub fn members(&self) -> impl Iterator<Item = SampleId> + '_ {
        std::iter::once(self.teacher).chain(self.students.iter().copied())
    }

    pub fn len(&self) -> usize {
        1 + self.students.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualEntry {
    pub last_kd: f64,
    /// Times this sample has entered the residual pool.
    pub rounds: u32,
}

/// Samples waiting to be reclustered. Never overlaps live batches.
/// Round counts survive draining so a sample that keeps bouncing back can
/// be escalated; a verified success clears its count.
#[derive(Debug, Clone, Default)]
pub struct ResidualPool {
    entries: BTreeMap<SampleId, ResidualEntry>,
    lifetime_rounds: BTreeMap<SampleId, u32>,
}

impl ResidualPool {
    pub fn insert(&mut self, id: SampleId, last_kd: f64) -> u32 {
        let rounds = self.lifetime_rounds.entry(id).or_insert(0);
        *rounds += 1;
        self.entries.insert(id, ResidualEntry { last_kd, rounds: *rounds });
        *rounds
    }

    pub fn drain(&mut self) -> Vec<(SampleId, ResidualEntry)> {
        std::mem::take(&mut self.entries).into_iter().collect()
    }

    pub fn reset_rounds(&mut self, id: &SampleId) {
        self.lifetime_rounds.remove(id);
    }

    pub fn rounds(&self, id: &SampleId) -> u32 {
        self.lifetime_rounds.get(id).copied().unwrap_or(0)
    }

    pub fn contains(&self, id: &SampleId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_unit(features: &[(SampleId, Vector)]) -> Result<()> {
    for (id, f) in features {
        let n = f.l2_norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "feature for sample {id} is not unit norm (|v| = {n})"
            )));
        }
    }
    Ok(())
}

/// Greedy medoid batching: the sample with the highest mean cosine
/// similarity to the rest of the pool seeds a batch and pulls in its b-1
/// nearest neighbours; repeat until the pool is exhausted. A final
/// singleton goes to the residual leftovers.
pub fn form_batches(
    samples: &[(SampleId, Vector)],
    b: usize,
) -> Result<(Vec<Batch>, Vec<SampleId>)> {
    if b < 2 {
        return Err(Error::InvalidArgument("batch size must be >= 2".into()));
    }
    check_unit(samples)?;
    let mut pool: Vec<(SampleId, Vector)> = samples.to_vec();
    pool.sort_by_key(|(id, _)| *id);
    let mut batches = Vec::new();
    let mut leftovers = Vec::new();

    while !pool.is_empty() {
        if pool.len() == 1 {
            leftovers.push(pool[0].0);
            pool.clear();
            break;
        }
        // Unit features: cosine is the plain dot product.
        let n = pool.len();
        let mut best_idx = 0;
        let mut best_mean = f64::NEG_INFINITY;
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                if i != j {
                    acc += pool[i].1.dot(&pool[j].1)?;
                }
            }
            let mean = acc / (n - 1) as f64;
            if mean > best_mean {
                best_mean = mean;
                best_idx = i;
            }
        }
        let (teacher_id, teacher_feat) = pool.remove(best_idx);
        let mut scored: Vec<(f64, SampleId, Vector)> = pool
            .iter()
            .map(|(id, f)| Ok((teacher_feat.dot(f)?, *id, f.clone())))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).expect("finite cosine").then_with(|| a.1.cmp(&b.1))
        });
        let take = (b - 1).min(scored.len());
        let chosen: Vec<(SampleId, Vector)> =
            scored[..take].iter().map(|(_, id, f)| (*id, f.clone())).collect();
        pool.retain(|(id, _)| !chosen.iter().any(|(cid, _)| cid == id));

        let mut features = Vec::with_capacity(1 + chosen.len());
        features.push(teacher_feat);
        let mut students = Vec::with_capacity(chosen.len());
        for (id, f) in chosen {
            students.push(id);
            features.push(f);
        }
        batches.push(Batch { teacher: teacher_id, students, features });
    }
    Ok((batches, leftovers))
}

/// Total KD loss plus every member's share (teacher included; its share is
/// variance-only and never evicts it).
#[derive(Debug, Clone)]
pub struct KdLoss {
    pub total: f64,
    pub per_sample: Vec<(SampleId, f64)>,
}

/// Inner-batch KD loss: lambda * mean student cosine distance to the
/// teacher + theta * mean squared distance to the batch mean. When the
/// temperature is positive and logits are supplied, adds the mean
/// KL(teacher || student) over students.
pub fn kd_loss(batch: &Batch, cfg: &KdConfig, logits: Option<&[Vec<f64>]>) -> Result<KdLoss> {
    cfg.validate()?;
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidArgument("kd_loss requires batch size >= 2".into()));
    }
    for f in &batch.features {
        if f.l2_norm() == 0.0 {
            return Err(Error::InvalidArgument("zero-norm feature in batch".into()));
        }
    }
    let teacher = &batch.features[0];
    let dim = teacher.dim();
    let mut mean = Vector::zeros(dim);
    for f in &batch.features {
        mean.scaled_add_assign(f, 1.0 / b as f64);
    }

    let mut cos_total = 0.0;
    let mut var_total = 0.0;
    let mut per_sample = Vec::with_capacity(b);
    for (i, f) in batch.features.iter().enumerate() {
        let var_i = f.sub(&mean).l2_norm().powi(2);
        var_total += var_i;
        let id = if i == 0 { batch.teacher } else { batch.students[i - 1] };
        let mut share = cfg.theta_var * var_i;
        if i > 0 {
            let cos_i = 1.0 - f.cosine(teacher)?;
            cos_total += cos_i;
            share += cfg.lambda_cos * cos_i;
        }
        per_sample.push((id, share));
    }
    let mut total = cfg.lambda_cos * cos_total / (b - 1) as f64
        + cfg.theta_var * var_total / b as f64;

    if cfg.temperature > 0.0 {
        if let Some(z) = logits {
            if z.len() != b {
                return Err(Error::DimMismatch {
                    context: "kd_loss logits",
                    expected: b,
                    got: z.len(),
                });
            }
            let p0 = softmax_with_temp(&z[0], cfg.temperature);
            let mut kl_total = 0.0;
            for zi in z.iter().skip(1) {
                let pi = softmax_with_temp(zi, cfg.temperature);
                kl_total += kl_divergence(&p0, &pi);
            }
            total += kl_total / (b - 1) as f64;
        }
    }
    Ok(KdLoss { total, per_sample })
}

pub fn softmax_with_temp(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum()
}

/// Evict members whose per-sample KD loss reached `eps_cons` (inclusive)
/// into the residual pool. Teachers stay unless their whole batch
/// dissolves, in which case they join the residual pool too.
pub fn filter_and_recluster(
    batches: Vec<(Batch, KdLoss)>,
    cfg: &KdConfig,
    residual: &mut ResidualPool,
) -> Result<Vec<Batch>> {
    cfg.validate()?;
    let mut kept = Vec::new();
    for (batch, losses) in batches {
        let loss_of = |id: SampleId| -> Result<f64> {
            losses
                .per_sample
                .iter()
                .find(|(sid, _)| *sid == id)
                .map(|(_, l)| *l)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("missing per-sample loss for {id}"))
                })
        };
        let mut surviving_students = Vec::new();
        let mut surviving_features = vec![batch.features[0].clone()];
        for (i, &student) in batch.students.iter().enumerate() {
            let l = loss_of(student)?;
            if l >= cfg.eps_cons {
                residual.insert(student, l);
            } else {
                surviving_students.push(student);
                surviving_features.push(batch.features[i + 1].clone());
            }
        }
        if surviving_students.is_empty() {
            let l = loss_of(batch.teacher)?;
            residual.insert(batch.teacher, l);
        } else {
            kept.push(Batch {
                teacher: batch.teacher,
                students: surviving_students,
                features: surviving_features,
            });
        }
    }
    Ok(kept)
}

/// KD objective on the product of unit spheres with a fixed teacher
/// direction u: (lambda/m) sum_i (1 - <o_i, u>) + (theta/m) sum_i
/// ||o_i - mean||^2.
pub fn sphere_kd_loss(features: &[Vector], u: &Vector, lambda: f64, theta: f64) -> f64 {
    let m = features.len() as f64;
    let dim = u.dim();
    let mut mean = Vector::zeros(dim);
    for f in features {
        mean.scaled_add_assign(f, 1.0 / m);
    }
    let mut cos_part = 0.0;
    let mut var_part = 0.0;
    for f in features {
        cos_part += 1.0 - f.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>();
        var_part += f.sub(&mean).l2_norm().powi(2);
    }
    lambda * cos_part / m + theta * var_part / m
}

/// Euclidean gradient of `sphere_kd_loss` per feature.
pub fn sphere_kd_grad(features: &[Vector], u: &Vector, lambda: f64, theta: f64) -> Vec<Vector> {
    let m = features.len() as f64;
    let dim = u.dim();
    let mut mean = Vector::zeros(dim);
    for f in features {
        mean.scaled_add_assign(f, 1.0 / m);
    }
    features
        .iter()
        .map(|f| {
            let mut g = u.scale(-lambda / m);
            let centered = f.sub(&mean);
            g.scaled_add_assign(&centered, 2.0 * theta / m);
            g
        })
        .collect()
}

/// Result of a retraction-descent run on the sphere.
#[derive(Debug, Clone)]
pub struct SphereRun {
    pub features: Vec<Vector>,
    /// Loss before any step, then after each step.
    pub losses: Vec<f64>,
}

/// Riemannian smoothness bound used to gate the step size.
pub fn sphere_smoothness_bound(lambda: f64, theta: f64, m: usize) -> f64 {
    (2.0 * lambda + 4.0 * theta) / m as f64
}

/// Projected-gradient descent with the normalizing retraction
/// R_o(v) = (o + v) / ||o + v|| over m unit vectors toward the fixed
/// teacher direction u.
pub fn sphere_rgd_converge(
    u: &Vector,
    m: usize,
    steps: usize,
    eta: f64,
    cfg: &KdConfig,
    seed: u64,
) -> Result<SphereRun> {
    if m < 2 {
        return Err(Error::InvalidArgument("sphere descent needs m >= 2".into()));
    }
    let norm = u.l2_norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "teacher direction must be unit norm, got |u| = {norm}"
        )));
    }
    let bound = sphere_smoothness_bound(cfg.lambda_cos, cfg.theta_var, m);
    if !(eta > 0.0 && eta < 2.0 / bound) {
        return Err(Error::InvalidArgument(format!(
            "step size {eta} outside admissible range (0, {})",
            2.0 / bound
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features: Vec<Vector> = (0..m)
        .map(|_| Vector::random_normal(u.dim(), 1.0, &mut rng).normalized())
        .collect::<Result<_>>()?;

    let mut losses = Vec::with_capacity(steps + 1);
    losses.push(sphere_kd_loss(&features, u, cfg.lambda_cos, cfg.theta_var));
    for _ in 0..steps {
        let grads = sphere_kd_grad(&features, u, cfg.lambda_cos, cfg.theta_var);
        for (f, g) in features.iter_mut().zip(grads) {
            // Tangent projection, then retract back onto the sphere.
            let radial = f.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>();
            let mut tangent = g;
            tangent.scaled_add_assign(f, -radial);
            let mut stepped = f.clone();
            stepped.scaled_add_assign(&tangent, -eta);
            *f = stepped.normalized()?;
        }
        losses.push(sphere_kd_loss(&features, u, cfg.lambda_cos, cfg.theta_var));
    }
    Ok(SphereRun { features, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn cfg() -> KdConfig {
        KdConfig {
            lambda_cos: 1.0,
            theta_var: 1.0,
            eps_cons: 0.5,
            temperature: 0.0,
            batch_size: 2,
        }
    }

    fn sid(example: u32) -> SampleId {
        SampleId::new(example, 0)
    }

    fn unit(v: Vec<f64>) -> Vector {
        Vector::from_vec(v).normalized().unwrap()
    }

    #[test]
    fn form_batches_identical_features_pairs_deterministically() {
        let f = unit(vec![1.0, 0.0]);
        let samples: Vec<_> = (0..4).map(|i| (sid(i), f.clone())).collect();
        let (batches, leftovers) = form_batches(&samples, 2).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(leftovers.is_empty());
        // Lowest-id tie-breaks: teacher 0 takes 1, teacher 2 takes 3.
        assert_eq!(batches[0].teacher, sid(0));
        assert_eq!(batches[0].students, vec![sid(1)]);
        assert_eq!(batches[1].teacher, sid(2));
        assert_eq!(batches[1].students, vec![sid(3)]);
    }

    #[test]
    fn form_batches_separates_two_clusters() {
        // Two tight clusters in the plane; brute-force over all seeds
        // confirms each batch is exactly one cluster.
        let cluster_a = [
            unit(vec![1.0, 0.00]),
            unit(vec![1.0, 0.02]),
            unit(vec![1.0, -0.02]),
        ];
        let cluster_b = [
            unit(vec![-1.0, 0.00]),
            unit(vec![-1.0, 0.02]),
            unit(vec![-1.0, -0.02]),
        ];
        let mut samples = Vec::new();
        for (i, f) in cluster_a.iter().enumerate() {
            samples.push((sid(i as u32), f.clone()));
        }
        for (i, f) in cluster_b.iter().enumerate() {
            samples.push((sid(3 + i as u32), f.clone()));
        }
        // Independent check: the best medoid over the full pool must be an
        // index whose cluster-mates are its two nearest neighbours.
        let mut best = (f64::NEG_INFINITY, 0usize);
        for i in 0..samples.len() {
            let mean: f64 = (0..samples.len())
                .filter(|&j| j != i)
                .map(|j| samples[i].1.dot(&samples[j].1).unwrap())
                .sum::<f64>()
                / (samples.len() - 1) as f64;
            if mean > best.0 {
                best = (mean, i);
            }
        }
        let (batches, leftovers) = form_batches(&samples, 3).unwrap();
        assert!(leftovers.is_empty());
        assert_eq!(batches.len(), 2);
        for batch in &batches {
            let ids: Vec<u32> = batch.members().map(|s| s.example).collect();
            let all_a = ids.iter().all(|&i| i < 3);
            let all_b = ids.iter().all(|&i| i >= 3);
            assert!(all_a || all_b, "mixed batch: {ids:?}");
        }
        // The greedy seed matches the brute-force medoid.
        let seed_cluster_a = best.1 < 3;
        let first_ids: Vec<u32> = batches[0].members().map(|s| s.example).collect();
        assert_eq!(first_ids.iter().all(|&i| i < 3), seed_cluster_a);
    }

    #[test]
    fn form_batches_leftover_goes_residual() {
        let f = unit(vec![1.0, 0.0]);
        let samples: Vec<_> = (0..5).map(|i| (sid(i), f.clone())).collect();
        let (batches, leftovers) = form_batches(&samples, 2).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(leftovers, vec![sid(4)]);
    }

    #[test]
    fn form_batches_single_sample_is_residual_only() {
        let samples = vec![(sid(0), unit(vec![1.0, 0.0]))];
        let (batches, leftovers) = form_batches(&samples, 2).unwrap();
        assert!(batches.is_empty());
        assert_eq!(leftovers, vec![sid(0)]);
    }

    #[test]
    fn form_batches_rejects_non_unit_features() {
        let samples = vec![
            (sid(0), Vector::from_vec(vec![2.0, 0.0])),
            (sid(1), Vector::from_vec(vec![1.0, 0.0])),
        ];
        assert!(form_batches(&samples, 2).is_err());
    }

    #[test]
    fn kd_loss_zero_for_identical_features() {
        let f = unit(vec![0.6, 0.8]);
        let batch = Batch {
            teacher: sid(0),
            students: vec![sid(1), sid(2)],
            features: vec![f.clone(), f.clone(), f],
        };
        let out = kd_loss(&batch, &cfg(), None).unwrap();
        assert!(out.total.abs() < 1e-12, "loss {}", out.total);
    }

    #[test]
    fn kd_loss_orthogonal_cosine_term() {
        let batch = Batch {
            teacher: sid(0),
            students: vec![sid(1)],
            features: vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])],
        };
        let mut c = cfg();
        c.theta_var = 0.0;
        let out = kd_loss(&batch, &c, None).unwrap();
        assert!((out.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_variance_hand_arithmetic() {
        let batch = Batch {
            teacher: sid(0),
            students: vec![sid(1)],
            features: vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])],
        };
        let mut c = cfg();
        c.lambda_cos = 0.0;
        let out = kd_loss(&batch, &c, None).unwrap();
        assert!((out.total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_rejects_zero_norm_feature() {
        let batch = Batch {
            teacher: sid(0),
            students: vec![sid(1)],
            features: vec![unit(vec![1.0, 0.0]), Vector::zeros(2)],
        };
        assert!(kd_loss(&batch, &cfg(), None).is_err());
    }

    #[test]
    fn kd_loss_invariant_to_student_order() {
        let a = unit(vec![1.0, 0.1]);
        let b = unit(vec![0.9, 0.3]);
        let t = unit(vec![1.0, 0.0]);
        let fwd = Batch {
            teacher: sid(0),
            students: vec![sid(1), sid(2)],
            features: vec![t.clone(), a.clone(), b.clone()],
        };
        let rev = Batch {
            teacher: sid(0),
            students: vec![sid(2), sid(1)],
            features: vec![t, b, a],
        };
        let l1 = kd_loss(&fwd, &cfg(), None).unwrap().total;
        let l2 = kd_loss(&rev, &cfg(), None).unwrap().total;
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn soft_kd_adds_kl_term() {
        let f = unit(vec![1.0, 0.0]);
        let batch = Batch {
            teacher: sid(0),
            students: vec![sid(1)],
            features: vec![f.clone(), f],
        };
        let mut c = cfg();
        c.temperature = 2.0;
        let logits = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let with_kl = kd_loss(&batch, &c, Some(&logits)).unwrap().total;
        let p0 = softmax_with_temp(&logits[0], 2.0);
        let p1 = softmax_with_temp(&logits[1], 2.0);
        let expected = kl_divergence(&p0, &p1);
        assert!((with_kl - expected).abs() < 1e-12);
    }

    #[test]
    fn filter_keeps_batches_below_threshold() {
        let f = unit(vec![1.0, 0.0]);
        let batch = Batch {
            teacher: sid(0),
            students: vec![sid(1)],
            features: vec![f.clone(), f],
        };
        let losses = kd_loss(&batch, &cfg(), None).unwrap();
        let mut residual = ResidualPool::default();
        let kept = filter_and_recluster(vec![(batch, losses)], &cfg(), &mut residual).unwrap();
        assert_eq!(kept.len(), 1);
        assert!(residual.is_empty());
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let t = unit(vec![1.0, 0.0]);
        let s = unit(vec![0.0, 1.0]);
        let batch = Batch {
            teacher: sid(0),
            students: vec![sid(1)],
            features: vec![t, s],
        };
        let mut c = cfg();
        c.theta_var = 0.0;
        // Student cosine share is exactly 1.0; threshold at exactly 1.0
        // must evict.
        c.eps_cons = 1.0;
        let losses = kd_loss(&batch, &c, None).unwrap();
        let mut residual = ResidualPool::default();
        let kept = filter_and_recluster(vec![(batch, losses)], &c, &mut residual).unwrap();
        // Batch reduced to teacher only: teacher dissolves to residual too.
        assert!(kept.is_empty());
        assert!(residual.contains(&sid(0)));
        assert!(residual.contains(&sid(1)));
        assert_eq!(residual.len(), 2);
    }

    #[test]
    fn filter_conserves_samples() {
        let t = unit(vec![1.0, 0.0]);
        let near = unit(vec![1.0, 0.05]);
        let far = unit(vec![-1.0, 0.3]);
        let batch = Batch {
            teacher: sid(0),
            students: vec![sid(1), sid(2)],
            features: vec![t, near, far],
        };
        let mut c = cfg();
        c.eps_cons = 0.8;
        let losses = kd_loss(&batch, &c, None).unwrap();
        let mut residual = ResidualPool::default();
        let kept = filter_and_recluster(vec![(batch, losses)], &c, &mut residual).unwrap();
        let kept_count: usize = kept.iter().map(|b| b.len()).sum();
        assert_eq!(kept_count + residual.len(), 3);
        assert!(residual.contains(&sid(2)));
    }

    #[test]
    fn residual_rounds_accumulate_across_drains() {
        let mut pool = ResidualPool::default();
        assert_eq!(pool.insert(sid(1), 0.9), 1);
        assert_eq!(pool.insert(sid(1), 0.7), 2);
        let drained = pool.drain();
        assert_eq!(drained.len(), 1);
        assert_eq!(drained[0].1.rounds, 2);
        assert!(pool.is_empty());
        // Count persists through the drain, clears on success.
        assert_eq!(pool.insert(sid(1), 0.5), 3);
        pool.drain();
        pool.reset_rounds(&sid(1));
        assert_eq!(pool.insert(sid(1), 0.5), 1);
    }

    #[test]
    fn sphere_loss_zero_at_teacher() {
        let u = unit(vec![0.0, 0.0, 1.0]);
        let features = vec![u.clone(), u.clone(), u.clone(), u.clone()];
        let l = sphere_kd_loss(&features, &u, 1.0, 1.0);
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn sphere_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = Vector::random_normal(3, 1.0, &mut rng).normalized().unwrap();
        let features: Vec<Vector> = (0..4)
            .map(|_| Vector::random_normal(3, 1.0, &mut rng).normalized().unwrap())
            .collect();
        let grads = sphere_kd_grad(&features, &u, 0.7, 1.3);
        let h = 1e-5;
        for (i, g) in grads.iter().enumerate() {
            for d in 0..3 {
                let mut plus = features.clone();
                plus[i].data_mut()[d] += h;
                let mut minus = features.clone();
                minus[i].data_mut()[d] -= h;
                let numeric = (sphere_kd_loss(&plus, &u, 0.7, 1.3)
                    - sphere_kd_loss(&minus, &u, 0.7, 1.3))
                    / (2.0 * h);
                assert!((numeric - g.get(d)).abs() < 1e-6, "feature {i} dim {d}");
            }
        }
    }

    #[test]
    fn sphere_rgd_converges_to_teacher() {
        let u = unit(vec![1.0, 0.0, 0.0]);
        let c = KdConfig { lambda_cos: 0.2, theta_var: 1.0, eps_cons: 0.5, temperature: 0.0, batch_size: 2 };
        let bound = sphere_smoothness_bound(c.lambda_cos, c.theta_var, 4);
        let run = sphere_rgd_converge(&u, 4, 5000, 1.0 / bound, &c, 99).unwrap();
        for f in &run.features {
            let cos = f.dot(&u).unwrap();
            assert!(cos > 1.0 - 1e-6, "cos {cos}");
        }
        assert!(*run.losses.last().unwrap() < 1e-6);
        for w in run.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn sphere_rgd_rejects_inadmissible_step() {
        let u = unit(vec![1.0, 0.0, 0.0]);
        let c = cfg();
        let bound = sphere_smoothness_bound(c.lambda_cos, c.theta_var, 4);
        assert!(sphere_rgd_converge(&u, 4, 10, 2.0 / bound + 0.1, &c, 1).is_err());
        assert!(sphere_rgd_converge(&u, 4, 10, 0.0, &c, 1).is_err());
    }

    proptest! {
        #[test]
        fn form_batches_is_partition(n in 2usize..12, b in 2usize..5, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<(SampleId, Vector)> = (0..n)
                .map(|i| {
                    let f = Vector::random_normal(4, 1.0, &mut rng).normalized().unwrap();
                    (sid(i as u32), f)
                })
                .collect();
            let (batches, leftovers) = form_batches(&samples, b).unwrap();
            let mut seen: Vec<SampleId> = leftovers.clone();
            for batch in &batches {
                prop_assert!(batch.len() <= b);
                prop_assert!(!batch.students.contains(&batch.teacher));
                seen.extend(batch.members());
            }
            seen.sort();
            let mut expected: Vec<SampleId> = samples.iter().map(|(id, _)| *id).collect();
            expected.sort();
            prop_assert_eq!(seen, expected);
        }

        #[test]
        fn perturbed_batch_has_positive_loss(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Vector::random_normal(4, 1.0, &mut rng).normalized().unwrap();
            let mut other = f.clone();
            other.data_mut()[0] += 0.01;
            let other = other.normalized().unwrap();
            let batch = Batch {
                teacher: sid(0),
                students: vec![sid(1), sid(2)],
                features: vec![f.clone(), f, other],
            };
            let out = kd_loss(&batch, &cfg(), None).unwrap();
            prop_assert!(out.total > 0.0);
        }
    }
}
