//! Scratch probe for tuning the edit loop. Not part of the test suite.

use std::time::Instant;

use repair_core::config::RunConfig;
use repair_core::corpus::Benchmark;
use repair_core::engine::{run_naive_ft, run_repair};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(30);
    let k: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(0);
    for seed in [1u64, 2, 3] {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.corpus.n_edits = n;
        if k > 0 {
            cfg.routing.k_shards = k;
        }

        let t0 = Instant::now();
        let bench = Benchmark::generate(&cfg).unwrap();
        let gen_secs = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let repair = run_repair(&cfg, &bench).unwrap();
        let repair_secs = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let naive = run_naive_ft(&cfg, &bench).unwrap();
        let naive_secs = t2.elapsed().as_secs_f64();

        let r = repair.manifest.metrics.last().unwrap();
        let f = naive.manifest.metrics.last().unwrap();
        println!(
            "seed {seed} N={n} [gen {gen_secs:.1}s]\n  repair {repair_secs:6.1}s: rel={:.3} gen={:.3} loc={:.3} op={:.3} ppl={:.2} | retriggers={} merges={}\n  naive  {naive_secs:6.1}s: rel={:.3} gen={:.3} loc={:.3} op={:.3} ppl={:.2}",
            r.rel, r.gen, r.loc, r.op, r.ppl,
            repair.manifest.retriggers.len(),
            repair.manifest.merges.len(),
            f.rel, f.gen, f.loc, f.op, f.ppl,
        );
        if let Some(c) = repair.manifest.calibrations.last() {
            println!("  final calib: eps={:.3} min_edit={:.3} max_loc={:.3}", c.epsilon, c.min_edit_score, c.max_locality_score);
        }
        if std::env::args().any(|a| a == "trace") && seed == 1 {
            for m in &repair.manifest.metrics {
                println!(
                    "    step {:>3}: rel={:.2} gen={:.2} loc={:.2} ppl={:.1}",
                    m.step, m.rel, m.gen, m.loc, m.ppl
                );
            }
        }
        // Mid-run record at step 30 when the run is longer.
        if n > 30 {
            let r30 = &repair.manifest.metrics[29];
            let f30 = &naive.manifest.metrics[29];
            println!(
                "  at step 30: repair op={:.3} rel={:.3} loc={:.3} | naive op={:.3}",
                r30.op, r30.rel, r30.loc, f30.op
            );
        }
    }
}
