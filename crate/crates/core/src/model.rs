//! Minimal autoregressive model over integer tokens.
//!
//! One block: token embedding, a causal mean-pooled context, one FFN
//! (key matrix, smooth nonlinearity, value matrix), and an unembedding.
//! The value matrix is the editable target: every forward pass takes it as
//! an explicit argument so callers can substitute side-memory copies, and
//! the FFN activation at the final position is exposed as the routing tap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{outer_add_assign, vec_mat, Matrix, Vector};

/// Named FFN nonlinearity. Smooth everywhere so finite-difference checks
/// are valid at every point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_prime(x),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Ordered token ids; never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        Ok(TokenSequence(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        TokenSequence(v)
    }
}

/// Logits for every position plus the final-position FFN activation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Row t holds next-token logits after consuming tokens 0..=t.
    pub logits: Matrix,
    /// FFN activation at the final position; the routing statistic taps this.
    pub final_activation: Vector,
}

/// Toy causal LM parameters. `w_v` is the designated editable value matrix;
/// forward passes take the value matrix explicitly so shard copies can be
/// substituted without touching the base state.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub embed: Matrix,   // vocab x hidden
    pub w_k: Matrix,     // hidden x ffn
    pub w_v: Matrix,     // ffn x hidden
    pub unembed: Matrix, // hidden x vocab
    pub activation: Activation,
    pub eos_token: Option<u32>,
}

/// Gradients for a full-parameter training step (base-model pretraining).
pub struct FullGrads {
    pub embed: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub unembed: Matrix,
}

impl ModelState {
    pub fn new(vocab_size: usize, hidden_dim: usize, ffn_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Matrix::random_normal(vocab_size, hidden_dim, 1.0, &mut rng);
        // Unit-scale key matrix keeps pre-activations a few standard
        // deviations wide, so FFN activation norms land in the tens and
        // routing scores work at the margins' natural scale.
        let w_k = Matrix::random_normal(hidden_dim, ffn_dim, 1.0, &mut rng);
        let w_v = Matrix::random_normal(ffn_dim, hidden_dim, (2.0 / ffn_dim as f64).sqrt(), &mut rng);
        let unembed = Matrix::random_normal(hidden_dim, vocab_size, (2.0 / hidden_dim as f64).sqrt(), &mut rng);
        ModelState {
            vocab_size,
            hidden_dim,
            ffn_dim,
            embed,
            w_k,
            w_v,
            unembed,
            activation: Activation::Gelu,
            eos_token: None,
        }
    }

    fn check_tokens(&self, seq: &TokenSequence) -> Result<()> {
        for &t in seq.tokens() {
            if t as usize >= self.vocab_size {
                return Err(Error::TokenOutOfRange { token: t, vocab: self.vocab_size });
            }
        }
        Ok(())
    }

    fn check_value_matrix(&self, wv: &Matrix) -> Result<()> {
        if wv.shape() != (self.ffn_dim, self.hidden_dim) {
            return Err(Error::ShapeMismatch {
                context: "value matrix",
                left_rows: self.ffn_dim,
                left_cols: self.hidden_dim,
                right_rows: wv.rows(),
                right_cols: wv.cols(),
            });
        }
        Ok(())
    }

    /// Mean embedding of tokens[0..=t] for t = 0..len; the causal context.
    fn contexts(&self, tokens: &[u32]) -> Vec<Vector> {
        let mut sum = Vector::zeros(self.hidden_dim);
        let mut out = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let row = self.embed.row(tok as usize);
            for (s, e) in sum.data_mut().iter_mut().zip(row) {
                *s += e;
            }
            out.push(sum.scale(1.0 / (t + 1) as f64));
        }
        out
    }

    fn ffn_activation(&self, context: &Vector) -> Result<Vector> {
        let pre = vec_mat(context, &self.w_k)?;
        Ok(Vector::from_vec(pre.data().iter().map(|&x| self.activation.apply(x)).collect()))
    }

    /// Next-token logits at every position, computed with `value_matrix`
    /// substituted for the value slot, plus the final-position activation.
    pub fn forward(&self, x: &TokenSequence, value_matrix: &Matrix) -> Result<ForwardPass> {
        self.check_tokens(x)?;
        self.check_value_matrix(value_matrix)?;
        let contexts = self.contexts(x.tokens());
        let mut logits = Matrix::zeros(x.len(), self.vocab_size);
        let mut final_activation = Vector::zeros(self.ffn_dim);
        for (t, c) in contexts.iter().enumerate() {
            let a = self.ffn_activation(c)?;
            let h = vec_mat(&a, value_matrix)?;
            let row = vec_mat(&h, &self.unembed)?;
            for (v, val) in row.data().iter().enumerate() {
                logits.set(t, v, *val);
            }
            if t + 1 == x.len() {
                final_activation = a;
            }
        }
        Ok(ForwardPass { logits, final_activation })
    }

    /// FFN activation at the final position of `x`. Independent of the
    /// value matrix, so it is stable across edits.
    pub fn activation_tap(&self, x: &TokenSequence) -> Result<Vector> {
        self.check_tokens(x)?;
        let contexts = self.contexts(x.tokens());
        self.ffn_activation(contexts.last().expect("non-empty sequence"))
    }

    /// Unit-normalized activation tap; the similarity feature for batching.
    pub fn feature(&self, x: &TokenSequence) -> Result<Vector> {
        self.activation_tap(x)?.normalized()
    }

    /// Sum over target positions of -log p(y_t | y_<t, x) with
    /// `value_matrix` substituted.
    pub fn autoreg_ce(
        &self,
        prompt: &TokenSequence,
        target: &TokenSequence,
        value_matrix: &Matrix,
    ) -> Result<f64> {
        Ok(self.ce_core(prompt, target, value_matrix, false)?.0)
    }

    /// Autoregressive cross-entropy plus its gradient w.r.t. the value
    /// matrix.
    pub fn autoreg_ce_with_grad(
        &self,
        prompt: &TokenSequence,
        target: &TokenSequence,
        value_matrix: &Matrix,
    ) -> Result<(f64, Matrix)> {
        let (loss, grad) = self.ce_core(prompt, target, value_matrix, true)?;
        Ok((loss, grad.expect("gradient requested")))
    }

    fn ce_core(
        &self,
        prompt: &TokenSequence,
        target: &TokenSequence,
        value_matrix: &Matrix,
        want_grad: bool,
    ) -> Result<(f64, Option<Matrix>)> {
        self.check_tokens(prompt)?;
        self.check_tokens(target)?;
        self.check_value_matrix(value_matrix)?;
        let full = prompt.concat(target);
        let contexts = self.contexts(full.tokens());
        let mut loss = 0.0;
        let mut grad = if want_grad {
            Some(Matrix::zeros(self.ffn_dim, self.hidden_dim))
        } else {
            None
        };
        for (j, &y) in target.tokens().iter().enumerate() {
            // Context for target[j] is every token strictly before it.
            let ctx = &contexts[prompt.len() + j - 1];
            let a = self.ffn_activation(ctx)?;
            let h = vec_mat(&a, value_matrix)?;
            let logits = vec_mat(&h, &self.unembed)?;
            let (lse, probs) = log_sum_exp_and_softmax(logits.data());
            loss += lse - logits.get(y as usize);
            if let Some(g) = grad.as_mut() {
                // d loss / d logits = softmax - onehot(y); pull back through
                // the unembedding, then the rank-one value-matrix factor.
                let mut d_logits = probs;
                d_logits[y as usize] -= 1.0;
                let mut d_h = Vector::zeros(self.hidden_dim);
                for i in 0..self.hidden_dim {
                    let row = self.unembed.row(i);
                    d_h.data_mut()[i] = row.iter().zip(&d_logits).map(|(u, d)| u * d).sum();
                }
                outer_add_assign(g, &a, &d_h, 1.0)?;
            }
        }
        Ok((loss, grad))
    }

    /// Cross-entropy with gradients for every parameter; used only for
    /// base-model pretraining.
    pub fn autoreg_ce_full_grads(
        &self,
        prompt: &TokenSequence,
        target: &TokenSequence,
    ) -> Result<(f64, FullGrads)> {
        self.check_tokens(prompt)?;
        self.check_tokens(target)?;
        let full = prompt.concat(target);
        let tokens = full.tokens();
        let contexts = self.contexts(tokens);
        let mut loss = 0.0;
        let mut grads = FullGrads {
            embed: Matrix::zeros(self.vocab_size, self.hidden_dim),
            w_k: Matrix::zeros(self.hidden_dim, self.ffn_dim),
            w_v: Matrix::zeros(self.ffn_dim, self.hidden_dim),
            unembed: Matrix::zeros(self.hidden_dim, self.vocab_size),
        };
        for (j, &y) in target.tokens().iter().enumerate() {
            let ctx_len = prompt.len() + j;
            let c = &contexts[ctx_len - 1];
            let pre = vec_mat(c, &self.w_k)?;
            let a = Vector::from_vec(pre.data().iter().map(|&x| self.activation.apply(x)).collect());
            let h = vec_mat(&a, &self.w_v)?;
            let logits = vec_mat(&h, &self.unembed)?;
            let (lse, probs) = log_sum_exp_and_softmax(logits.data());
            loss += lse - logits.get(y as usize);

            let mut d_logits = Vector::from_vec(probs);
            d_logits.data_mut()[y as usize] -= 1.0;
            outer_add_assign(&mut grads.unembed, &h, &d_logits, 1.0)?;

            let mut d_h = Vector::zeros(self.hidden_dim);
            for i in 0..self.hidden_dim {
                let row = self.unembed.row(i);
                d_h.data_mut()[i] = row.iter().zip(d_logits.data()).map(|(u, d)| u * d).sum();
            }
            outer_add_assign(&mut grads.w_v, &a, &d_h, 1.0)?;

            let mut d_a = Vector::zeros(self.ffn_dim);
            for f in 0..self.ffn_dim {
                let row = self.w_v.row(f);
                d_a.data_mut()[f] = row.iter().zip(d_h.data()).map(|(w, d)| w * d).sum();
            }
            let d_pre = Vector::from_vec(
                d_a.data()
                    .iter()
                    .zip(pre.data())
                    .map(|(d, &x)| d * self.activation.derivative(x))
                    .collect(),
            );
            outer_add_assign(&mut grads.w_k, c, &d_pre, 1.0)?;

            let mut d_c = Vector::zeros(self.hidden_dim);
            for i in 0..self.hidden_dim {
                let row = self.w_k.row(i);
                d_c.data_mut()[i] = row.iter().zip(d_pre.data()).map(|(w, d)| w * d).sum();
            }
            // Context is the mean of ctx_len embeddings.
            let inv = 1.0 / ctx_len as f64;
            for &tok in &tokens[..ctx_len] {
                let base = tok as usize;
                for i in 0..self.hidden_dim {
                    let cur = grads.embed.get(base, i);
                    grads.embed.set(base, i, cur + inv * d_c.get(i));
                }
            }
        }
        Ok((loss, grads))
    }

    /// One full-batch gradient-descent step over (prompt, target) pairs on
    /// every parameter. Returns the mean per-pair loss before the step.
    pub fn train_full_step(
        &mut self,
        pairs: &[(TokenSequence, TokenSequence)],
        lr: f64,
    ) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("training pairs"));
        }
        let mut total = 0.0;
        let mut acc: Option<FullGrads> = None;
        for (prompt, target) in pairs {
            let (loss, g) = self.autoreg_ce_full_grads(prompt, target)?;
            total += loss;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    a.embed.scaled_add_assign(&g.embed, 1.0)?;
                    a.w_k.scaled_add_assign(&g.w_k, 1.0)?;
                    a.w_v.scaled_add_assign(&g.w_v, 1.0)?;
                    a.unembed.scaled_add_assign(&g.unembed, 1.0)?;
                }
            }
        }
        let acc = acc.expect("non-empty pairs");
        let scale = -lr / pairs.len() as f64;
        self.embed.scaled_add_assign(&acc.embed, scale)?;
        self.w_k.scaled_add_assign(&acc.w_k, scale)?;
        self.w_v.scaled_add_assign(&acc.w_v, scale)?;
        self.unembed.scaled_add_assign(&acc.unembed, scale)?;
        Ok(total / pairs.len() as f64)
    }

    /// Next-token logits at the final position only.
    pub fn final_logits(&self, x: &TokenSequence, value_matrix: &Matrix) -> Result<Vector> {
        self.check_tokens(x)?;
        self.check_value_matrix(value_matrix)?;
        let contexts = self.contexts(x.tokens());
        let a = self.ffn_activation(contexts.last().expect("non-empty sequence"))?;
        let h = vec_mat(&a, value_matrix)?;
        vec_mat(&h, &self.unembed)
    }

    /// Pull a final-position logit gradient back to the value matrix:
    /// grad += scale * outer(activation, unembed . d_logits).
    pub fn accumulate_logit_grad(
        &self,
        activation: &Vector,
        d_logits: &Vector,
        grad: &mut Matrix,
        scale: f64,
    ) -> Result<()> {
        let mut d_h = Vector::zeros(self.hidden_dim);
        for i in 0..self.hidden_dim {
            let row = self.unembed.row(i);
            d_h.data_mut()[i] = row.iter().zip(d_logits.data()).map(|(u, d)| u * d).sum();
        }
        outer_add_assign(grad, activation, &d_h, scale)
    }

    /// Argmax decoding until the end token (if configured) or `max_len`
    /// generated tokens. Ties pick the lowest token id.
    pub fn greedy_decode(
        &self,
        prompt: &TokenSequence,
        max_len: usize,
        value_matrix: &Matrix,
    ) -> Result<TokenSequence> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("greedy_decode requires max_len >= 1".into()));
        }
        self.check_tokens(prompt)?;
        self.check_value_matrix(value_matrix)?;
        // Incremental context: track the embedding sum and count.
        let mut sum = Vector::zeros(self.hidden_dim);
        let mut count = 0usize;
        for &tok in prompt.tokens() {
            let row = self.embed.row(tok as usize);
            for (s, e) in sum.data_mut().iter_mut().zip(row) {
                *s += e;
            }
            count += 1;
        }
        let mut out = Vec::with_capacity(max_len);
        for _ in 0..max_len {
            let c = sum.scale(1.0 / count as f64);
            let a = self.ffn_activation(&c)?;
            let h = vec_mat(&a, value_matrix)?;
            let logits = vec_mat(&h, &self.unembed)?;
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (v, &val) in logits.data().iter().enumerate() {
                if val > best_val {
                    best_val = val;
                    best = v;
                }
            }
            let tok = best as u32;
            out.push(tok);
            if self.eos_token == Some(tok) {
                break;
            }
            let row = self.embed.row(best);
            for (s, e) in sum.data_mut().iter_mut().zip(row) {
                *s += e;
            }
            count += 1;
        }
        TokenSequence::new(out)
    }
}

/// Numerically stable log-sum-exp plus the softmax vector.
pub fn log_sum_exp_and_softmax(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    let probs = exps.iter().map(|&e| e / sum).collect();
    (lse, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(seed: u64) -> ModelState {
        ModelState::new(8, 6, 10, seed)
    }

    fn seq(tokens: &[u32]) -> TokenSequence {
        TokenSequence::new(tokens.to_vec()).unwrap()
    }

    #[test]
    fn forward_with_own_value_matrix_is_identity_substitution() {
        let m = small_model(1);
        let x = seq(&[1, 2, 3]);
        let base = m.forward(&x, &m.w_v).unwrap();
        let subst = m.forward(&x, &m.w_v.clone()).unwrap();
        assert_eq!(base.logits, subst.logits);
        assert_eq!(base.final_activation, subst.final_activation);
    }

    #[test]
    fn zero_unembed_gives_uniform_distribution() {
        let mut m = small_model(2);
        m.unembed = Matrix::zeros(m.hidden_dim, m.vocab_size);
        let fp = m.forward(&seq(&[0, 4]), &m.w_v).unwrap();
        let (_, probs) = log_sum_exp_and_softmax(fp.logits.row(1));
        for p in probs {
            assert!((p - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let m = small_model(3);
        let x = seq(&[5, 1, 7, 2]);
        let a = m.forward(&x, &m.w_v).unwrap();
        let b = m.forward(&x, &m.w_v).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn softmax_sums_to_one_at_every_position() {
        let m = small_model(4);
        let x = seq(&[0, 1, 2, 3, 4, 5]);
        let fp = m.forward(&x, &m.w_v).unwrap();
        for t in 0..x.len() {
            let (_, probs) = log_sum_exp_and_softmax(fp.logits.row(t));
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_model_ce_is_log_vocab() {
        let mut m = ModelState::new(4, 5, 6, 5);
        m.unembed = Matrix::zeros(m.hidden_dim, m.vocab_size);
        let ce = m.autoreg_ce(&seq(&[1]), &seq(&[2]), &m.w_v).unwrap();
        assert!((ce - 4.0_f64.ln()).abs() < 1e-12, "ce = {ce}");
        let ce3 = m.autoreg_ce(&seq(&[1]), &seq(&[2, 0, 3]), &m.w_v).unwrap();
        assert!((ce3 - 3.0 * 4.0_f64.ln()).abs() < 1e-12, "ce3 = {ce3}");
    }

    #[test]
    fn empty_target_rejected() {
        assert!(TokenSequence::new(vec![]).is_err());
    }

    #[test]
    fn memorized_pair_reaches_low_ce_and_exact_decode() {
        let mut m = small_model(6);
        m.eos_token = Some(0);
        let prompt = seq(&[1, 2, 3]);
        let target = seq(&[5, 6]);
        for _ in 0..1500 {
            m.train_full_step(&[(prompt.clone(), target.clone())], 0.1).unwrap();
        }
        let ce = m.autoreg_ce(&prompt, &target, &m.w_v).unwrap();
        assert!(ce < 0.01, "converged ce = {ce}");
        let decoded = m.greedy_decode(&prompt, target.len(), &m.w_v).unwrap();
        assert_eq!(decoded, target);
    }

    #[test]
    fn greedy_decode_length_and_determinism() {
        let m = small_model(7);
        let one = m.greedy_decode(&seq(&[1, 2]), 1, &m.w_v).unwrap();
        assert_eq!(one.len(), 1);
        let a = m.greedy_decode(&seq(&[1, 2]), 5, &m.w_v).unwrap();
        let b = m.greedy_decode(&seq(&[1, 2]), 5, &m.w_v).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let m = small_model(8);
        let prompt = seq(&[1, 2, 3, 4]);
        let target = seq(&[5, 6, 7]);
        let (_, analytic) = m.autoreg_ce_with_grad(&prompt, &target, &m.w_v).unwrap();
        let err = grad_check(
            |wv| m.autoreg_ce(&prompt, &target, wv).unwrap(),
            &m.w_v,
            &analytic,
        )
        .unwrap();
        assert!(err < 1e-5, "value-matrix grad error {err}");
    }

    #[test]
    fn full_grads_match_finite_differences_on_key_matrix() {
        let m = small_model(9);
        let prompt = seq(&[2, 3]);
        let target = seq(&[4, 1]);
        let (_, grads) = m.autoreg_ce_full_grads(&prompt, &target).unwrap();
        let err = grad_check(
            |wk| {
                let mut probe = m.clone();
                probe.w_k = wk.clone();
                probe.autoreg_ce(&prompt, &target, &probe.w_v).unwrap()
            },
            &m.w_k,
            &grads.w_k,
        )
        .unwrap();
        assert!(err < 1e-5, "key-matrix grad error {err}");
    }

    #[test]
    fn full_grads_match_finite_differences_on_embedding() {
        let m = small_model(10);
        let prompt = seq(&[2, 3]);
        let target = seq(&[4]);
        let (_, grads) = m.autoreg_ce_full_grads(&prompt, &target).unwrap();
        let err = grad_check(
            |e| {
                let mut probe = m.clone();
                probe.embed = e.clone();
                probe.autoreg_ce(&prompt, &target, &probe.w_v).unwrap()
            },
            &m.embed,
            &grads.embed,
        )
        .unwrap();
        assert!(err < 1e-5, "embedding grad error {err}");
    }

    #[test]
    fn value_matrix_shape_mismatch_rejected() {
        let m = small_model(11);
        let bad = Matrix::zeros(3, 3);
        assert!(m.forward(&seq(&[1]), &bad).is_err());
    }

    #[test]
    fn eos_token_stops_decoding() {
        let mut m = small_model(12);
        // Uniform logits: the argmax tie-break picks token 0, declared EOS.
        m.eos_token = Some(0);
        m.unembed = Matrix::zeros(m.hidden_dim, m.vocab_size);
        let out = m.greedy_decode(&seq(&[1, 2]), 5, &m.w_v).unwrap();
        assert_eq!(out.tokens(), &[0]);
    }
}
