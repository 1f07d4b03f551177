//! Scratch probe: activation geometry of the synthetic corpus.

use repair_core::config::RunConfig;
use repair_core::corpus::Benchmark;
use repair_core::numeric::Vector;

fn stats(label: &str, cosines: &[f64]) {
    let n = cosines.len() as f64;
    let mean = cosines.iter().sum::<f64>() / n;
    let max = cosines.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = cosines.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("{label}: mean {mean:.3} min {min:.3} max {max:.3} (n={})", cosines.len());
}

fn main() {
    let gain: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1.0);
    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.corpus.n_edits = 30;
    let mut bench = Benchmark::generate(&cfg).unwrap();
    if gain != 1.0 {
        let scaled = bench.base.w_k.map(|v| v * gain);
        bench.base.w_k = scaled;
    }

    let edit_acts: Vec<Vector> = bench
        .examples
        .iter()
        .map(|e| bench.base.activation_tap(&e.edit_prompt).unwrap())
        .collect();
    let loc_acts: Vec<Vector> = bench
        .examples
        .iter()
        .map(|e| bench.base.activation_tap(&e.locality_prompt).unwrap())
        .collect();

    let norms: Vec<f64> = edit_acts.iter().map(|a| a.l2_norm()).collect();
    println!(
        "wk gain {gain}: |a| mean {:.2}",
        norms.iter().sum::<f64>() / norms.len() as f64
    );

    let mut ee = Vec::new();
    for i in 0..edit_acts.len() {
        for j in 0..i {
            ee.push(edit_acts[i].cosine(&edit_acts[j]).unwrap());
        }
    }
    stats("edit-edit cos", &ee);

    let mut el = Vec::new();
    for a in &edit_acts {
        for b in &loc_acts {
            el.push(a.cosine(b).unwrap());
        }
    }
    stats("edit-loc  cos", &el);

    let mut er = Vec::new();
    for (e, a) in bench.examples.iter().zip(&edit_acts) {
        for r in &e.rephrases {
            let ar = bench.base.activation_tap(r).unwrap();
            er.push(a.cosine(&ar).unwrap());
        }
    }
    stats("edit-reph cos", &er);
}
