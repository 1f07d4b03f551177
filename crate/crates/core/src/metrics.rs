//! Edit-quality metrics: reliability, generalization, locality, their
//! geometric mean, and per-token perplexity, all computed through routing.

use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::corpus::EditExample;
use crate::error::Result;
use crate::feedback::evaluate_edit;
use crate::memory::{route, RoutingTarget, ShardState};
use crate::model::{log_sum_exp_and_softmax, ModelState, TokenSequence};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Edits applied when this record was taken.
    pub step: usize,
    pub rel: f64,
    pub gen: f64,
    pub loc: f64,
    pub op: f64,
    pub ppl: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, rel: f64, gen: f64, loc: f64, ppl: f64) -> Self {
        MetricsRecord { step, rel, gen, loc, op: (rel * gen * loc).cbrt(), ppl }
    }
}

fn routed_matrix<'a>(
    model: &ModelState,
    shards: &'a [ShardState],
    main: &'a Matrix,
    epsilon: f64,
    prompt: &TokenSequence,
) -> Result<&'a Matrix> {
    let a = model.activation_tap(prompt)?;
    let decision = route(&a, shards, main, epsilon)?;
    Ok(match decision.target {
        RoutingTarget::Main => main,
        RoutingTarget::Shard(i) => &shards[i].w_prime,
    })
}

/// Rel/Gen/Loc/OP plus PPL over the given examples under the current
/// routed memories. Locality compares against the frozen references the
/// examples carry.
pub fn compute_metrics(
    model: &ModelState,
    shards: &[ShardState],
    main: &Matrix,
    epsilon: f64,
    examples: &[EditExample],
    step: usize,
) -> Result<MetricsRecord> {
    let mut rel_hits = 0usize;
    let mut gen_sum = 0.0;
    let mut loc_hits = 0usize;
    for e in examples {
        let edit = evaluate_edit(
            model,
            shards,
            main,
            epsilon,
            &e.edit_prompt,
            &e.edit_target,
            Mode::Qa,
        )?;
        if edit.correct {
            rel_hits += 1;
        }

        let mut hits = 0usize;
        for r in &e.rephrases {
            let wv = routed_matrix(model, shards, main, epsilon, r)?;
            let decoded = model.greedy_decode(r, e.edit_target.len(), wv)?;
            if decoded == e.edit_target {
                hits += 1;
            }
        }
        gen_sum += hits as f64 / e.rephrases.len() as f64;

        let wv = routed_matrix(model, shards, main, epsilon, &e.locality_prompt)?;
        let decoded = model.greedy_decode(&e.locality_prompt, e.locality_reference.len(), wv)?;
        if decoded == e.locality_reference {
            loc_hits += 1;
        }
    }
    let n = examples.len() as f64;
    let rel = rel_hits as f64 / n;
    let gen = gen_sum / n;
    let loc = loc_hits as f64 / n;

    let pairs: Vec<(TokenSequence, TokenSequence)> = examples
        .iter()
        .map(|e| (e.edit_prompt.clone(), e.edit_target.clone()))
        .collect();
    let ppl = compute_ppl(model, shards, main, epsilon, &pairs)?;
    Ok(MetricsRecord::new(step, rel, gen, loc, ppl))
}

/// exp of the mean per-token negative log-likelihood of the continuations
/// under routed parameters.
pub fn compute_ppl(
    model: &ModelState,
    shards: &[ShardState],
    main: &Matrix,
    epsilon: f64,
    pairs: &[(TokenSequence, TokenSequence)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(crate::error::Error::EmptyInput("ppl continuations"));
    }
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for (context, continuation) in pairs {
        let wv = routed_matrix(model, shards, main, epsilon, context)?;
        total_nll += model.autoreg_ce(context, continuation, wv)?;
        total_tokens += continuation.len();
    }
    Ok((total_nll / total_tokens as f64).exp())
}

/// Fraction of true flags; Rel/Gen/Loc are means of indicators.
pub fn mean_indicator(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

/// Softmax sanity helper for uniform-model checks.
pub fn uniform_ppl(vocab_size: usize) -> f64 {
    let logits = vec![0.0; vocab_size];
    let (lse, _) = log_sum_exp_and_softmax(&logits);
    lse.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn op_is_geometric_mean() {
        let r = MetricsRecord::new(1, 0.94, 0.92, 1.00, 1.0);
        assert!((r.op - (0.94_f64 * 0.92 * 1.00).cbrt()).abs() < 1e-15);
        assert!((r.op - 0.95).abs() < 0.005);
    }

    #[test]
    fn op_zero_when_any_factor_zero() {
        assert_eq!(MetricsRecord::new(1, 0.0, 0.9, 1.0, 1.0).op, 0.0);
        assert_eq!(MetricsRecord::new(1, 1.0, 1.0, 1.0, 1.0).op, 1.0);
    }

    #[test]
    fn uniform_model_ppl_equals_vocab_size() {
        let mut model = ModelState::new(32, 8, 10, 41);
        model.unembed = Matrix::zeros(8, 32);
        let pairs = vec![
            (
                TokenSequence::new(vec![1, 2]).unwrap(),
                TokenSequence::new(vec![3, 4]).unwrap(),
            ),
            (
                TokenSequence::new(vec![5]).unwrap(),
                TokenSequence::new(vec![6]).unwrap(),
            ),
        ];
        let ppl = compute_ppl(&model, &[], &model.w_v, 0.0, &pairs).unwrap();
        assert!((ppl - 32.0).abs() < 1e-9, "ppl {ppl}");
    }

    #[test]
    fn ppl_is_deterministic() {
        let model = ModelState::new(32, 8, 10, 42);
        let pairs = vec![(
            TokenSequence::new(vec![1, 2]).unwrap(),
            TokenSequence::new(vec![3]).unwrap(),
        )];
        let a = compute_ppl(&model, &[], &model.w_v, 0.0, &pairs).unwrap();
        let b = compute_ppl(&model, &[], &model.w_v, 0.0, &pairs).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    proptest! {
        #[test]
        fn op_identity_holds(rel in 0.0..1.0f64, gen in 0.0..1.0f64, loc in 0.0..1.0f64) {
            let r = MetricsRecord::new(0, rel, gen, loc, 1.0);
            prop_assert!((r.op - (rel * gen * loc).cbrt()).abs() < 1e-12);
        }

        #[test]
        fn adding_a_hit_never_decreases_the_mean(hits in proptest::collection::vec(any::<bool>(), 1..50)) {
            let before = mean_indicator(&hits);
            let mut extended = hits.clone();
            extended.push(true);
            prop_assert!(mean_indicator(&extended) >= before);
        }
    }
}
