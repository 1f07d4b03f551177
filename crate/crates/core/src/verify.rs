//! Machine checks for every stability and convergence claim the pipeline
//! rests on, plus gradient and merge oracles. The CLI `verify` subcommand
//! and the acceptance suite both run these.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{
    kd_loss, sphere_kd_loss, sphere_rgd_converge, sphere_smoothness_bound, Batch, KdConfig,
};
use crate::error::Result;
use crate::feedback::finite_time_bound;
use crate::memory::{init_shards, overlap_inner_product_check, routing_margin_loss_with_grad,
    activation_score, margin_terms, RoutingMarginConfig};
use crate::merge::{merge_oracle_check, ties_merge, trust_weights};
use crate::metrics::MetricsRecord;
use crate::model::ModelState;
use crate::model::TokenSequence;
use crate::numeric::{grad_check, Matrix, Vector};
use crate::sample::SampleId;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult { name: name.to_string(), passed, detail }
    }
}

/// Masked updates never exceed eta * ||grad||_F; 10k random triples.
pub fn check_norm_bound() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let base = Matrix::zeros(8, 6);
    let mut violations = 0usize;
    let mut max_ratio = 0.0_f64;
    for _ in 0..10_000 {
        let rho = rng.random_range(0.02..1.0);
        let mut shards = init_shards(&base, 1, rho, &mut rng)?;
        let grad = Matrix::random_uniform(8, 6, -2.0, 2.0, &mut rng);
        let eta = rng.random_range(0.001..3.0);
        let stats = shards[0].masked_update(&grad, eta)?;
        let bound = eta * stats.grad_norm;
        if stats.update_norm > bound {
            violations += 1;
        }
        if bound > 0.0 {
            max_ratio = max_ratio.max(stats.update_norm / bound);
        }
    }
    Ok(CheckResult::new(
        "masked-update norm bound (10k triples)",
        violations == 0,
        format!("violations: {violations}, max update/bound ratio: {max_ratio:.6}"),
    ))
}

/// Cross-shard inner products scale by rho^2 under independent masks.
pub fn check_overlap_scaling() -> Result<CheckResult> {
    let mut detail = String::new();
    let mut passed = true;
    for (i, rho) in [0.2, 0.5, 0.8].into_iter().enumerate() {
        let check = overlap_inner_product_check(rho, 100_000, 211 + i as u64)?;
        let err = (check.empirical - check.analytic).abs();
        if err >= 0.01 {
            passed = false;
        }
        detail.push_str(&format!(
            "rho={rho}: empirical {:.5} vs {:.5} (|err| {:.5}); ",
            check.empirical, check.analytic, err
        ));
    }
    Ok(CheckResult::new("rho^2 overlap scaling (100k trials)", passed, detail))
}

/// Simulated delta-reduction processes hit the pruning threshold within
/// the ceiling bound, every time.
pub fn check_finite_time() -> Result<CheckResult> {
    let mut cases = 0usize;
    let mut failures = 0usize;
    for &r0 in &[0.55, 0.6, 0.75, 0.9, 0.93, 1.0] {
        for &tau in &[0.1, 0.25, 0.5] {
            for &delta in &[0.05, 0.1, 0.17, 0.25] {
                cases += 1;
                let bound = finite_time_bound(r0, tau, delta)?;
                let mut r = r0;
                let mut steps = 0usize;
                while r > tau + 1e-12 {
                    r -= delta;
                    steps += 1;
                    let lemma = tau.max(r0 - steps as f64 * delta);
                    if r > lemma + 1e-9 || steps > bound {
                        failures += 1;
                        break;
                    }
                }
            }
        }
    }
    Ok(CheckResult::new(
        "finite-time re-trigger bound",
        failures == 0,
        format!("{cases} (r0, tau, delta) cases, {failures} failures"),
    ))
}

/// Retraction descent on the sphere: monotone loss, convergence to the
/// teacher direction, over 20 seeds.
pub fn check_sphere_convergence() -> Result<CheckResult> {
    let cfg = KdConfig {
        lambda_cos: 0.2,
        theta_var: 1.0,
        eps_cons: 0.5,
        temperature: 0.0,
        batch_size: 4,
    };
    let m = 4;
    let bound = sphere_smoothness_bound(cfg.lambda_cos, cfg.theta_var, m);
    let eta = 1.0 / bound;
    let mut worst_cos = 1.0_f64;
    let mut monotone = true;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(5_000 + seed);
        let u = Vector::random_normal(3, 1.0, &mut rng).normalized()?;
        let run = sphere_rgd_converge(&u, m, 5_000, eta, &cfg, 9_000 + seed)?;
        for w in run.losses.windows(2) {
            if w[1] > w[0] + 1e-12 {
                monotone = false;
            }
        }
        for f in &run.features {
            worst_cos = worst_cos.min(f.dot(&u)?);
        }
    }
    let converged = worst_cos > 1.0 - 1e-6;
    Ok(CheckResult::new(
        "sphere descent convergence (20 seeds)",
        monotone && converged,
        format!("monotone: {monotone}, worst final cosine: {worst_cos:.12}"),
    ))
}

/// Equal-feature batches have exactly zero KD loss; any single-member
/// perturbation makes it positive.
pub fn check_zero_variance() -> Result<CheckResult> {
    let cfg = KdConfig {
        lambda_cos: 0.2,
        theta_var: 1.0,
        eps_cons: 0.5,
        temperature: 0.0,
        batch_size: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut passed = true;
    let mut max_zero_loss = 0.0_f64;
    let mut min_perturbed = f64::INFINITY;
    for _ in 0..50 {
        let f = Vector::random_normal(5, 1.0, &mut rng).normalized()?;
        let batch = Batch {
            teacher: SampleId::new(0, 0),
            students: vec![SampleId::new(1, 0), SampleId::new(2, 0)],
            features: vec![f.clone(), f.clone(), f.clone()],
        };
        let loss = kd_loss(&batch, &cfg, None)?.total;
        max_zero_loss = max_zero_loss.max(loss.abs());
        if loss.abs() > 1e-12 {
            passed = false;
        }
        // Also check the idealized objective with the teacher direction.
        let sphere = sphere_kd_loss(&[f.clone(), f.clone()], &f, cfg.lambda_cos, cfg.theta_var);
        if sphere.abs() > 1e-12 {
            passed = false;
        }

        let mut bumped = f.clone();
        bumped.data_mut()[0] += 0.02;
        let bumped = bumped.normalized()?;
        let perturbed = Batch {
            teacher: SampleId::new(0, 0),
            students: vec![SampleId::new(1, 0), SampleId::new(2, 0)],
            features: vec![f.clone(), f.clone(), bumped],
        };
        let ploss = kd_loss(&perturbed, &cfg, None)?.total;
        min_perturbed = min_perturbed.min(ploss);
        if ploss <= 0.0 {
            passed = false;
        }
    }
    Ok(CheckResult::new(
        "zero-variance minimizer",
        passed,
        format!("max |loss| at minimizer: {max_zero_loss:.2e}, min perturbed loss: {min_perturbed:.2e}"),
    ))
}

fn random_model(rng: &mut ChaCha8Rng) -> ModelState {
    let seed = rng.random::<u64>();
    ModelState::new(12, 6, 8, seed)
}

/// Analytic gradients of the edit loss, the KD loss, and the routing
/// margin loss all match central finite differences; 50 instances each.
pub fn check_gradients() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut max_edit = 0.0_f64;
    let mut max_kd = 0.0_f64;
    let mut max_act = 0.0_f64;

    for _ in 0..50 {
        let model = random_model(&mut rng);
        let prompt = TokenSequence::new(vec![
            rng.random_range(0..12),
            rng.random_range(0..12),
            rng.random_range(0..12),
        ])?;
        let target = TokenSequence::new(vec![rng.random_range(0..12), rng.random_range(0..12)])?;
        let (_, analytic) = model.autoreg_ce_with_grad(&prompt, &target, &model.w_v)?;
        let err = grad_check(
            |wv| model.autoreg_ce(&prompt, &target, wv).unwrap(),
            &model.w_v,
            &analytic,
        )?;
        max_edit = max_edit.max(err);
    }

    // KD loss is a function of the feature stack; check against the stacked
    // feature matrix.
    for _ in 0..50 {
        let m = 4usize;
        let dim = 5usize;
        let u = Vector::random_normal(dim, 1.0, &mut rng).normalized()?;
        let stack = Matrix::from_fn(m, dim, |_, _| rng.random_range(-1.0..1.0));
        let lambda = 0.7;
        let theta = 1.3;
        let loss_of = |mat: &Matrix| {
            let feats: Vec<Vector> =
                (0..m).map(|i| Vector::from_vec(mat.row(i).to_vec())).collect();
            sphere_kd_loss(&feats, &u, lambda, theta)
        };
        let feats: Vec<Vector> =
            (0..m).map(|i| Vector::from_vec(stack.row(i).to_vec())).collect();
        let grads = crate::distill::sphere_kd_grad(&feats, &u, lambda, theta);
        let mut analytic = Matrix::zeros(m, dim);
        for (i, g) in grads.iter().enumerate() {
            for d in 0..dim {
                analytic.set(i, d, g.get(d));
            }
        }
        let err = grad_check(loss_of, &stack, &analytic)?;
        max_kd = max_kd.max(err);
    }

    let margins = RoutingMarginConfig { gamma1: 0.4, gamma2: 3.0, gamma: 1.5, tau: 1.5 };
    let mut done = 0usize;
    while done < 50 {
        let dim_in = 6usize;
        let dim_out = 4usize;
        let base = Matrix::random_normal(dim_in, dim_out, 0.5, &mut rng);
        let mut shards = init_shards(&base, 1, 1.0, &mut rng)?;
        let bump = Matrix::random_normal(dim_in, dim_out, 0.6, &mut rng);
        shards[0].w_prime.scaled_add_assign(&bump, 1.0)?;
        let a_e = Vector::random_normal(dim_in, 1.0, &mut rng);
        let a_i = Vector::random_normal(dim_in, 1.0, &mut rng);
        // Hinge kinks are non-differentiable; resample configurations that
        // sit within finite-difference reach of one.
        let de = activation_score(&a_e, &shards[0], &base)?;
        let di = activation_score(&a_i, &shards[0], &base)?;
        let near_kink = [
            di - margins.gamma1,
            margins.gamma2 - de,
            margins.gamma - (de - di),
        ]
        .iter()
        .any(|m| m.abs() < 1e-3);
        if near_kink || de < 1e-3 || di < 1e-3 {
            continue;
        }
        let (_, analytic) =
            routing_margin_loss_with_grad(&[(&a_e, &a_i)], &shards[0], &base, &margins)?;
        let template = shards[0].clone();
        let err = grad_check(
            |wp| {
                let mut probe = template.clone();
                probe.w_prime = wp.clone();
                let se = activation_score(&a_e, &probe, &base).unwrap();
                let si = activation_score(&a_i, &probe, &base).unwrap();
                margin_terms(se, si, &margins).0
            },
            &shards[0].w_prime,
            &analytic,
        )?;
        max_act = max_act.max(err);
        done += 1;
    }

    let passed = max_edit < 1e-5 && max_kd < 1e-5 && max_act < 1e-5;
    Ok(CheckResult::new(
        "gradient correctness (50 instances each)",
        passed,
        format!("max |err|: edit {max_edit:.2e}, kd {max_kd:.2e}, margin {max_act:.2e}"),
    ))
}

/// Sampled coordinates of the merge agree bit-exactly with brute-force
/// resolution; single-shard merges equal plain weighted addition.
pub fn check_merge_oracle() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut all_ok = true;
    let mut sampled = 0usize;
    for trial in 0..20 {
        let k = 1 + (trial % 5);
        let w_v = Matrix::random_normal(10, 8, 1.0, &mut rng);
        let deltas: Vec<Matrix> = (0..k)
            .map(|_| {
                Matrix::from_fn(10, 8, |_, _| {
                    if rng.random::<f64>() < 0.5 {
                        0.0
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
            })
            .collect();
        let losses: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0)).collect();
        let weights = trust_weights(&losses, 1.0)?;
        if !merge_oracle_check(&deltas, &weights, &w_v, 50, 700 + trial as u64)? {
            all_ok = false;
        }
        sampled += 50;
    }

    // Single shard: exact weighted addition everywhere.
    let w_v = Matrix::random_normal(6, 6, 1.0, &mut rng);
    let d = Matrix::random_normal(6, 6, 0.4, &mut rng);
    let (merged, _) = ties_merge(std::slice::from_ref(&d), &[1.0], &w_v)?;
    let mut single_ok = true;
    for idx in 0..w_v.len() {
        let expected = w_v.data()[idx] + 1.0 * d.data()[idx];
        if merged.data()[idx].to_bits() != expected.to_bits() {
            single_ok = false;
        }
    }
    Ok(CheckResult::new(
        "merge oracle (1000 sampled coordinates)",
        all_ok && single_ok,
        format!("sampled {sampled} coordinates, single-shard exact: {single_ok}"),
    ))
}

/// OP is the cube root of the product, and a uniform model's perplexity is
/// exactly the vocabulary size.
pub fn check_metric_identities() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut max_op_err = 0.0_f64;
    for _ in 0..200 {
        let rel = rng.random_range(0.0..1.0);
        let gen = rng.random_range(0.0..1.0);
        let loc = rng.random_range(0.0..1.0);
        let r = MetricsRecord::new(0, rel, gen, loc, 1.0);
        max_op_err = max_op_err.max((r.op - (rel * gen * loc).cbrt()).abs());
    }

    let mut model = ModelState::new(64, 8, 10, 1234);
    model.unembed = Matrix::zeros(8, 64);
    let pairs = vec![(
        TokenSequence::new(vec![1, 2, 3])?,
        TokenSequence::new(vec![4, 5])?,
    )];
    let ppl = crate::metrics::compute_ppl(&model, &[], &model.w_v, 0.0, &pairs)?;
    let ppl_err = (ppl - 64.0).abs();
    let passed = max_op_err < 1e-12 && ppl_err < 1e-9;
    Ok(CheckResult::new(
        "metric identities",
        passed,
        format!("max |OP err| {max_op_err:.2e}, uniform PPL err {ppl_err:.2e}"),
    ))
}

/// The full battery, in a stable order.
pub fn run_all_checks() -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_norm_bound()?,
        check_overlap_scaling()?,
        check_finite_time()?,
        check_sphere_convergence()?,
        check_zero_variance()?,
        check_gradients()?,
        check_merge_oracle()?,
        check_metric_identities()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_battery_passes() {
        for check in run_all_checks().unwrap() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
