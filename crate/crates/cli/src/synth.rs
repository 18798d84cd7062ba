//! Synthetic text8-style corpora for desk-scale runs and tests.
//!
//! Words are drawn from a fixed random lexicon with Zipfian frequencies; each
//! word also prefers a handful of successors, so the text has both spelling
//! and word-order regularities to learn. Output is lowercase `a..z` words
//! separated by single spaces.

use allattn::numerics::Rng;
use rand::seq::IndexedRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Zipf};

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

pub struct Generator {
    words: Vec<String>,
    successors: Vec<Vec<usize>>,
    zipf: Zipf<f64>,
    rng: Rng,
}

impl Generator {
    pub fn new(lexicon: usize, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let zipf = Zipf::new(lexicon as f64, 1.1).expect("valid Zipf parameters");
        let mut words = Vec::with_capacity(lexicon);
        let mut seen = std::collections::HashSet::new();
        while words.len() < lexicon {
            let syllables = rng.random_range(1..=4);
            let mut w = String::new();
            for _ in 0..syllables {
                if rng.random_bool(0.8) {
                    w.push(*CONSONANTS.choose(&mut rng).expect("nonempty") as char);
                }
                w.push(*VOWELS.choose(&mut rng).expect("nonempty") as char);
                if rng.random_bool(0.3) {
                    w.push(*CONSONANTS.choose(&mut rng).expect("nonempty") as char);
                }
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let successors = (0..lexicon)
            .map(|_| (0..4).map(|_| zipf.sample(&mut rng) as usize - 1).collect())
            .collect();
        Self {
            words,
            successors,
            zipf,
            rng,
        }
    }

    /// Exactly `bytes` bytes of text.
    pub fn text(&mut self, bytes: usize) -> String {
        let mut out = String::with_capacity(bytes + 16);
        let mut w = self.zipf.sample(&mut self.rng) as usize - 1;
        while out.len() < bytes {
            out.push_str(&self.words[w]);
            out.push(' ');
            w = if self.rng.random_bool(0.6) {
                *self.successors[w]
                    .choose(&mut self.rng)
                    .expect("four successors")
            } else {
                self.zipf.sample(&mut self.rng) as usize - 1
            };
        }
        out.truncate(bytes);
        out
    }
}

/// A train/dev pair from one generator: `train_bytes` then `dev_bytes`.
pub fn text8_like(train_bytes: usize, dev_bytes: usize, seed: u64) -> (String, String) {
    let mut g = Generator::new(3000, seed);
    let train = g.text(train_bytes);
    let dev = g.text(dev_bytes);
    (train, dev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_and_length() {
        let (train, dev) = text8_like(20_000, 3000, 1);
        assert_eq!((train.len(), dev.len()), (20_000, 3000));
        assert!(train.bytes().all(|b| b == b' ' || b.is_ascii_lowercase()));
        assert!(!train.contains("  "));
        assert_eq!(allattn::data::preprocess_text8(train.as_bytes()), train);
    }

    #[test]
    fn deterministic() {
        assert_eq!(text8_like(5000, 100, 7), text8_like(5000, 100, 7));
        assert_ne!(text8_like(5000, 100, 7).0, text8_like(5000, 100, 8).0);
    }
}
