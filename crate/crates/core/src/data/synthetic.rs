//! A seeded generator of English-like text used when no corpus is at hand.
//!
//! Words are built from a fixed syllable inventory, drawn with Zipfian
//! frequencies, and chained through sparse word-to-word preferences, so
//! the text has structure at the character, word and phrase level.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "tu", "sa", "ve", "or", "in", "da", "pe", "qui", "zo", "bar", "el", "ny", "th",
    "an", "es", "ro", "li", "mo", "gra", "st", "un", "ce", "wi", "fo",
];

/// About `n_bytes` of deterministic pseudo-English.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> String {
    // The lexicon depends only on a fixed seed so corpora generated with
    // different seeds share vocabulary.
    let mut lex_rng = ChaCha8Rng::seed_from_u64(0x5eed_1e71c0);
    let n_words = 320;
    let lexicon: Vec<String> = (0..n_words)
        .map(|_| {
            let k = lex_rng.random_range(1..=3);
            (0..k).map(|_| SYLLABLES[lex_rng.random_range(0..SYLLABLES.len())]).collect()
        })
        .collect();
    let zipf = WeightedIndex::new((0..n_words).map(|r| 1.0 / (r as f64 + 1.0).powf(1.1))).expect("weights");
    let successors: Vec<Vec<usize>> = (0..n_words)
        .map(|_| (0..6).map(|_| zipf.sample(&mut lex_rng)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 64);
    let mut sentences = 0usize;
    while out.len() < n_bytes {
        let len = rng.random_range(4..=12);
        let mut w = zipf.sample(&mut rng);
        for i in 0..len {
            let word = &lexicon[w];
            if i == 0 {
                let mut c = word.chars();
                if let Some(f) = c.next() {
                    out.extend(f.to_uppercase());
                    out.push_str(c.as_str());
                }
            } else {
                out.push_str(word);
            }
            if i + 1 < len {
                out.push(if rng.random_bool(0.08) { ',' } else { ' ' });
                if out.ends_with(',') {
                    out.push(' ');
                }
            }
            w = if rng.random_bool(0.75) {
                successors[w][rng.random_range(0..successors[w].len())]
            } else {
                zipf.sample(&mut rng)
            };
        }
        out.push('.');
        sentences += 1;
        out.push(if sentences % 7 == 0 { '\n' } else { ' ' });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synthetic_text(1, 5000);
        assert_eq!(a, synthetic_text(1, 5000));
        assert_ne!(a, synthetic_text(2, 5000));
        assert!(a.len() >= 5000 && a.len() < 5200);
        assert!(a.is_ascii());
    }
}
