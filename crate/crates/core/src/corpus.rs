//! Synthetic fact corpus and the frozen base model it is built around.
//!
//! Facts are (key tokens -> object tokens) pairs over disjoint token
//! alphabets: a subject range for keys, a filler range for rephrases, and
//! an object range for targets. Rephrases permute the key and insert one
//! filler token, so they land near the original in feature space without
//! matching it. Locality prompts use fresh keys; the base model is
//! pretrained on them so its reference outputs are confident, and those
//! references are frozen before any edit happens.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelState, TokenSequence};

pub const CORPUS_SCHEMA: &str = "repair-corpus/v1";
pub const EOS_TOKEN: u32 = 0;

/// One edit triple with its rephrases and locality pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditExample {
    pub id: u32,
    pub edit_prompt: TokenSequence,
    pub edit_target: TokenSequence,
    pub rephrases: Vec<TokenSequence>,
    pub locality_prompt: TokenSequence,
    /// Base-model greedy decode of the locality prompt, frozen at
    /// generation time.
    pub locality_reference: TokenSequence,
}

/// Token-id ranges carved out of the vocabulary. Edit keys and locality
/// keys draw from disjoint subject alphabets: contexts are mean token
/// embeddings, so a shared token is a shared context component, and
/// locality prompts must stay decorrelated from edit prompts.
#[derive(Debug, Clone)]
pub struct TokenLayout {
    pub edit_subject: std::ops::Range<u32>,
    pub loc_subject: std::ops::Range<u32>,
    pub filler: std::ops::Range<u32>,
    pub object: std::ops::Range<u32>,
}

impl TokenLayout {
    pub fn for_vocab(vocab_size: usize) -> Result<TokenLayout> {
        if vocab_size < 16 {
            return Err(Error::InvalidConfig(format!(
                "vocab size {vocab_size} too small for the corpus layout (16 minimum)"
            )));
        }
        let usable = (vocab_size - 1) as u32; // token 0 is EOS
        let n_object = (usable * 2 / 10).max(4);
        let n_filler = (usable / 8).max(2);
        let n_subjects = usable - n_object - n_filler;
        let n_edit = (n_subjects * 6 / 10).max(3);
        let edit_subject = 1..1 + n_edit;
        let loc_subject = edit_subject.end..1 + n_subjects;
        let filler = loc_subject.end..loc_subject.end + n_filler;
        let object = filler.end..vocab_size as u32;
        Ok(TokenLayout { edit_subject, loc_subject, filler, object })
    }
}

/// Frozen base model plus the edit stream built against it.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub base: ModelState,
    pub examples: Vec<EditExample>,
}

fn draw_key(range: &std::ops::Range<u32>, key_len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..key_len).map(|_| rng.random_range(range.clone())).collect()
}

fn draw_object(layout: &TokenLayout, target_len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..target_len).map(|_| rng.random_range(layout.object.clone())).collect()
}

fn bag_of(key: &[u32]) -> Vec<u32> {
    let mut bag = key.to_vec();
    bag.sort_unstable();
    bag
}

fn shared_tokens(a: &[u32], b: &[u32]) -> usize {
    // Multiset intersection size over sorted bags.
    let mut count = 0;
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    count
}

/// Keys distinct as token bags (contexts are order-insensitive, so two
/// permutations of the same bag would be the same fact). Among edit keys,
/// pairs sharing two or more tokens are rejected while the alphabet
/// allows, since heavily overlapping contexts put facts in direct
/// conflict.
fn draw_keys(
    range: &std::ops::Range<u32>,
    count: usize,
    key_len: usize,
    max_shared: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<u32>>> {
    let alphabet = range.len() as f64;
    let capacity = alphabet.powi(key_len as i32);
    if (count as f64) > capacity / 2.0 {
        return Err(Error::InvalidConfig(format!(
            "{count} unique keys requested but key space holds only ~{capacity}"
        )));
    }
    let mut bags: Vec<Vec<u32>> = Vec::with_capacity(count);
    let mut keys = Vec::with_capacity(count);
    while keys.len() < count {
        let mut best: Option<(usize, Vec<u32>)> = None;
        for _ in 0..600 {
            let key = draw_key(range, key_len, rng);
            let bag = bag_of(&key);
            let worst_overlap = bags.iter().map(|b| shared_tokens(b, &bag)).max().unwrap_or(0);
            if worst_overlap >= key_len {
                continue; // duplicate bag
            }
            if worst_overlap <= max_shared {
                best = Some((worst_overlap, key));
                break;
            }
            // Keep the least-overlapping candidate as a fallback.
            match &best {
                Some((overlap, _)) if *overlap <= worst_overlap => {}
                _ => best = Some((worst_overlap, key)),
            }
        }
        match best {
            Some((_, key)) => {
                bags.push(bag_of(&key));
                keys.push(key);
            }
            None => {
                return Err(Error::InvalidConfig(
                    "could not draw enough unique fact keys; enlarge the vocab or shorten keys"
                        .into(),
                ))
            }
        }
    }
    Ok(keys)
}

fn make_rephrase(key: &[u32], layout: &TokenLayout, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut tokens = key.to_vec();
    tokens.shuffle(rng);
    let filler = rng.random_range(layout.filler.clone());
    let pos = rng.random_range(0..=tokens.len());
    tokens.insert(pos, filler);
    tokens
}

impl Benchmark {
    /// Deterministic benchmark: base model pretrained on the locality
    /// facts, then the edit stream with frozen locality references.
    pub fn generate(cfg: &RunConfig) -> Result<Benchmark> {
        cfg.validate()?;
        let layout = TokenLayout::for_vocab(cfg.model.vocab_size)?;
        let n = cfg.corpus.n_edits;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xC0_0C_05));

        let edit_keys = draw_keys(&layout.edit_subject, n, cfg.corpus.key_len, 1, &mut rng)?;
        let locality_keys =
            draw_keys(&layout.loc_subject, n, cfg.corpus.key_len, cfg.corpus.key_len, &mut rng)?;

        let mut base = ModelState::new(
            cfg.model.vocab_size,
            cfg.model.hidden_dim,
            cfg.model.ffn_dim,
            cfg.seed.wrapping_add(0x0D_E1),
        );
        base.eos_token = Some(EOS_TOKEN);

        // Pretrain on locality facts so references carry real margins.
        let locality_pairs: Vec<(TokenSequence, TokenSequence)> = locality_keys
            .iter()
            .map(|key| {
                let prompt = TokenSequence::new(key.clone())?;
                let object = TokenSequence::new(draw_object(&layout, cfg.corpus.target_len, &mut rng))?;
                Ok((prompt, object))
            })
            .collect::<Result<_>>()?;
        for _ in 0..cfg.corpus.pretrain_steps {
            base.train_full_step(&locality_pairs, cfg.corpus.pretrain_lr)?;
        }

        let mut examples = Vec::with_capacity(n);
        for (i, key) in edit_keys.iter().enumerate() {
            let edit_prompt = TokenSequence::new(key.clone())?;
            let edit_target =
                TokenSequence::new(draw_object(&layout, cfg.corpus.target_len, &mut rng))?;
            let rephrases: Vec<TokenSequence> = (0..cfg.corpus.rephrases_per_fact)
                .map(|_| TokenSequence::new(make_rephrase(key, &layout, &mut rng)))
                .collect::<Result<_>>()?;
            let locality_prompt = locality_pairs[i].0.clone();
            let locality_reference =
                base.greedy_decode(&locality_prompt, cfg.corpus.target_len, &base.w_v)?;
            examples.push(EditExample {
                id: i as u32,
                edit_prompt,
                edit_target,
                rephrases,
                locality_prompt,
                locality_reference,
            });
        }
        Ok(Benchmark { base, examples })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    schema: String,
    #[serde(flatten)]
    example: EditExample,
}

/// Line-delimited corpus records, one example per line.
pub fn write_corpus(path: &Path, examples: &[EditExample]) -> Result<()> {
    let mut file = File::create(path)?;
    for example in examples {
        let line = CorpusLine { schema: CORPUS_SCHEMA.to_string(), example: example.clone() };
        serde_json::to_writer(&mut file, &line)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<EditExample>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line)?;
        if parsed.schema != CORPUS_SCHEMA {
            return Err(Error::InvalidArgument(format!(
                "corpus schema {:?} unsupported, expected {CORPUS_SCHEMA:?}",
                parsed.schema
            )));
        }
        examples.push(parsed.example);
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus.n_edits = 3;
        cfg.corpus.pretrain_steps = 120;
        cfg.model = crate::config::ModelSizes { vocab_size: 32, hidden_dim: 12, ffn_dim: 16 };
        cfg
    }

    #[test]
    fn single_example_has_rephrase_and_locality_pair() {
        let mut cfg = tiny_config();
        cfg.corpus.n_edits = 1;
        let bench = Benchmark::generate(&cfg).unwrap();
        assert_eq!(bench.examples.len(), 1);
        let e = &bench.examples[0];
        assert!(!e.rephrases.is_empty());
        assert_ne!(e.locality_prompt, e.edit_prompt);
        for r in &e.rephrases {
            assert_ne!(r, &e.edit_prompt);
        }
    }

    #[test]
    fn same_seed_gives_identical_corpora() {
        let cfg = tiny_config();
        let a = Benchmark::generate(&cfg).unwrap();
        let b = Benchmark::generate(&cfg).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_eq!(a.base.w_v, b.base.w_v);
    }

    #[test]
    fn locality_reference_matches_fresh_base_decode() {
        let cfg = tiny_config();
        let bench = Benchmark::generate(&cfg).unwrap();
        for e in &bench.examples {
            let fresh = bench
                .base
                .greedy_decode(&e.locality_prompt, cfg.corpus.target_len, &bench.base.w_v)
                .unwrap();
            assert_eq!(fresh, e.locality_reference);
        }
    }

    #[test]
    fn capacity_overflow_rejected() {
        let mut cfg = tiny_config();
        cfg.model.vocab_size = 16;
        cfg.corpus.key_len = 1;
        cfg.corpus.n_edits = 6; // needs 12 unique single-token keys, space has 9
        assert!(Benchmark::generate(&cfg).is_err());
    }

    #[test]
    fn edit_and_locality_keys_are_disjoint() {
        let cfg = tiny_config();
        let bench = Benchmark::generate(&cfg).unwrap();
        for e in &bench.examples {
            for other in &bench.examples {
                assert_ne!(e.edit_prompt, other.locality_prompt);
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let cfg = tiny_config();
        let bench = Benchmark::generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &bench.examples).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back, bench.examples);
    }

    #[test]
    fn pretraining_makes_locality_references_the_trained_objects() {
        // The base model converges on the locality facts, so decoding one
        // yields a confident answer rather than arbitrary drift.
        let cfg = tiny_config();
        let bench = Benchmark::generate(&cfg).unwrap();
        for e in &bench.examples {
            let ce = bench
                .base
                .autoreg_ce(&e.locality_prompt, &e.locality_reference, &bench.base.w_v)
                .unwrap();
            assert!(ce < 0.5, "locality reference CE {ce} too high");
        }
    }
}
