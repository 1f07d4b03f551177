//! Scratch probe: joint capacity of a single masked shard.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repair_core::config::RunConfig;
use repair_core::corpus::Benchmark;
use repair_core::memory::{activation_score, init_shards, routing_margin_loss_with_grad};
use repair_core::numeric::{Matrix, Vector};

fn main() {
    let facts: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let lr: f64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(0.005);
    let epochs: usize = std::env::args().nth(3).and_then(|a| a.parse().ok()).unwrap_or(2000);

    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.corpus.n_edits = facts;
    let bench = Benchmark::generate(&cfg).unwrap();
    let base = &bench.base;
    let main = &base.w_v;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut shards = init_shards(main, 1, cfg.routing.mask_ratio, &mut rng).unwrap();

    // All edit samples (prompts + rephrases) and all locality activations.
    let mut samples = Vec::new();
    let mut loc_acts: Vec<Vector> = Vec::new();
    for e in &bench.examples {
        samples.push((e.edit_prompt.clone(), e.edit_target.clone()));
        for r in &e.rephrases {
            samples.push((r.clone(), e.edit_target.clone()));
        }
        loc_acts.push(base.activation_tap(&e.locality_prompt).unwrap());
    }
    let acts: Vec<Vector> =
        samples.iter().map(|(p, _)| base.activation_tap(p).unwrap()).collect();

    for epoch in 0..=epochs {
        // Full-batch joint gradient.
        let shard = &shards[0];
        let mut grad = Matrix::zeros(main.rows(), main.cols());
        let mut ce_total = 0.0;
        for (prompt, target) in &samples {
            let (ce, g) = base.autoreg_ce_with_grad(prompt, target, &shard.w_prime).unwrap();
            ce_total += ce;
            grad.scaled_add_assign(&g, 1.0 / samples.len() as f64).unwrap();
        }
        let pairs: Vec<(&Vector, &Vector)> = acts
            .iter()
            .enumerate()
            .map(|(i, a)| (a, &loc_acts[i % loc_acts.len()]))
            .collect();
        let (act_loss, act_grad) =
            routing_margin_loss_with_grad(&pairs, shard, main, &cfg.routing.margins).unwrap();
        grad.scaled_add_assign(&act_grad, 1.0).unwrap();
        let (sup, sup_grad) = repair_core::memory::locality_suppression_with_grad(
            &loc_acts,
            shard,
            main,
            cfg.routing.margins.gamma1,
        )
        .unwrap();
        grad.scaled_add_assign(&sup_grad, 1.0 / loc_acts.len() as f64).unwrap();

        if epoch % (epochs / 10).max(1) == 0 {
            let mut decode_ok = 0;
            for (prompt, target) in &samples {
                let d = base.greedy_decode(prompt, target.len(), &shards[0].w_prime).unwrap();
                if d == *target {
                    decode_ok += 1;
                }
            }
            let min_edit = acts
                .iter()
                .map(|a| activation_score(a, &shards[0], main).unwrap())
                .fold(f64::INFINITY, f64::min);
            let max_loc = loc_acts
                .iter()
                .map(|a| activation_score(a, &shards[0], main).unwrap())
                .fold(0.0_f64, f64::max);
            println!(
                "epoch {epoch:>5}: mean ce={:6.3} act={act_loss:8.3} sup={sup:7.2} decode {decode_ok}/{} min_edit={min_edit:6.2} max_loc={max_loc:6.2}",
                ce_total / samples.len() as f64,
                samples.len()
            );
        }
        shards[0].masked_update(&grad, lr).unwrap();
    }
}
