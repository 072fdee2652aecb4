//! Deterministic desk-scale corpus generator.
//!
//! Text is drawn from a Zipfian unigram distribution mixed with a sparse
//! successor table (local structure a small model can learn) and a handful
//! of per-document topic words that recur within a document (structure only
//! a cache can exploit). Output is plain whitespace-tokenized text with
//! newlines, so it goes through the same ingestion path as real corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpus {
    pub words: usize,
    pub zipf_exponent: f64,
    /// Successor candidates per word.
    pub successors: usize,
    pub successor_prob: f64,
    pub topic_words: usize,
    pub topic_prob: f64,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub mean_line_len: usize,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        SyntheticCorpus {
            words: 2000,
            zipf_exponent: 1.05,
            successors: 3,
            successor_prob: 0.55,
            topic_words: 6,
            topic_prob: 0.15,
            min_doc_len: 300,
            max_doc_len: 1200,
            mean_line_len: 24,
        }
    }
}

struct Sampler {
    cdf: Vec<f64>,
}

impl Sampler {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = weights
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        cdf.iter_mut().for_each(|c| *c /= acc);
        Sampler { cdf }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn word(k: usize) -> String {
    format!("w{k}")
}

impl SyntheticCorpus {
    /// Generates roughly `tokens` whitespace tokens (newlines included).
    ///
    /// The language (unigram and successor tables) depends only on
    /// `language_seed`; `seed` drives the documents, so splits drawn with
    /// different `seed`s share one language.
    pub fn generate(&self, tokens: usize, language_seed: u64, seed: u64) -> String {
        let words = self.words.max(2);
        let unigram = Sampler::new((0..words).map(|k| 1.0 / ((k + 1) as f64).powf(self.zipf_exponent)));
        let mut lang = ChaCha8Rng::seed_from_u64(language_seed);
        let succ: Vec<Vec<usize>> = (0..words)
            .map(|_| (0..self.successors.max(1)).map(|_| unigram.sample(&mut lang)).collect())
            .collect();
        let succ_pick = Sampler::new((0..self.successors.max(1)).map(|j| 0.5f64.powi(j as i32)));
        let topic_lo = (words / 20).max(1);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = String::with_capacity(tokens * 6);
        let mut emitted = 0;
        while emitted < tokens {
            let doc_len = rng.random_range(self.min_doc_len..=self.max_doc_len.max(self.min_doc_len));
            let topics: Vec<usize> = (0..self.topic_words)
                .map(|_| rng.random_range(topic_lo..words))
                .collect();
            let mut prev = unigram.sample(&mut rng);
            let mut line = 0;
            for _ in 0..doc_len {
                let r: f64 = rng.random();
                let next = if !topics.is_empty() && r < self.topic_prob {
                    topics[rng.random_range(0..topics.len())]
                } else if r < self.topic_prob + self.successor_prob {
                    succ[prev][succ_pick.sample(&mut rng)]
                } else {
                    unigram.sample(&mut rng)
                };
                if line > 0 {
                    out.push(' ');
                }
                out.push_str(&word(next));
                prev = next;
                line += 1;
                emitted += 1;
                if rng.random_range(0..self.mean_line_len.max(1)) == 0 {
                    out.push('\n');
                    line = 0;
                    emitted += 1;
                }
            }
            if line > 0 {
                out.push('\n');
                emitted += 1;
            }
        }
        out
    }
}
