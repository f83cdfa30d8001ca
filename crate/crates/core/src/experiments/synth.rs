//! Synthetic two-domain corpora: two character-level languages with mostly
//! disjoint alphabets, a small shared symbol set, and different first-order
//! transition structure. Deterministic given the seed.

use crate::rng::{splitmix64, Stream};

/// Domain alphabets. The symbol sets are disjoint; the shared symbols
/// (space, period, comma) keep the unigram overlap well under 30% of total
/// mass. Alphabets are deliberately wide so the (context, token) pair space
/// stays far from exhaustion even when many pooled responses are scored.
const ALPHABET_A: &str = "abcdefghijklmnopqrstuvwxyz0123456789àáâãäåæçèéêëìíîïðñòóôõöøùúûüýþÿαβγδεζηθικλμνξοπρστυφχψωабвгдежзийклмнопрстуфхцчшщъыьэюя";
const ALPHABET_B: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZÀÁÂÃÄÅÆÇÈÉÊËÌÍÎÏÐÑÒÓÔÕÖØÙÚÛÜÝÞΑΒΓΔΕΖΗΘΙΚΛΜΝΞΟΠΡΣΤΥΦΧΨΩАБВГДЕЖЗИЙКЛМНОПРСТУФХЦЧШЩЪЫЬЭЮЯ!?;:+*/=%#~|";
const SHARED: &str = " .,";

/// Successor weights mix a geometric preference profile with a uniform
/// floor; the floor keeps per-context entropy high (effective branching
/// around 40), which both carries a stronger watermark and delays
/// deduplication saturation.
const DECAY: f64 = 0.85;
const GEO_MIX: f64 = 0.7;
const SPACE_P: f64 = 0.13;
const PERIOD_P: f64 = 0.010;
const COMMA_P: f64 = 0.008;

/// Rate of stray target-domain symbols mixed into the regularization corpus
/// (the target corpus stays pure). Real general-purpose corpora are never
/// perfectly clean; the strays also teach the model to recover after an
/// off-domain symbol instead of drifting, and give the distillation direct
/// evidence for gating the bias off outside the target domain.
const NOISE_B: f64 = 0.02;

const MIN_CHARS: usize = 200_000;

pub struct SyntheticCorpora {
    /// One document per line.
    pub text_a: String,
    pub text_b: String,
}

/// Generates both domain corpora (each >= 200k characters).
pub fn make_synthetic_domains(seed: u64) -> SyntheticCorpora {
    SyntheticCorpora {
        text_a: generate_domain(ALPHABET_A, ALPHABET_B, 0.0, splitmix64(seed ^ 0xA)),
        text_b: generate_domain(ALPHABET_B, ALPHABET_A, NOISE_B, splitmix64(seed ^ 0xB)),
    }
}

/// First-order Markov chain over `alphabet` + shared symbols. Each context
/// symbol prefers a pseudo-random ordering of successors with geometric
/// weights, giving an effective branching factor around 15.
fn generate_domain(alphabet: &str, foreign: &str, noise: f64, seed: u64) -> String {
    let letters: Vec<char> = alphabet.chars().collect();
    let foreign: Vec<char> = foreign.chars().collect();
    let shared: Vec<char> = SHARED.chars().collect();
    let k = letters.len();

    // successor CDF per context (letters + shared contexts)
    let contexts = k + shared.len();
    let mut cdfs: Vec<Vec<f64>> = Vec::with_capacity(contexts);
    let letter_mass = 1.0 - SPACE_P - PERIOD_P - COMMA_P;
    for c in 0..contexts {
        // rank successors by hash, weight geometrically by rank
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&j| splitmix64(seed ^ ((c * k + j) as u64)));
        let mut weights = vec![0.0; k];
        let norm: f64 = (0..k).map(|r| DECAY.powi(r as i32)).sum();
        for (rank, &j) in order.iter().enumerate() {
            let geo = DECAY.powi(rank as i32) / norm;
            weights[j] = letter_mass * (GEO_MIX * geo + (1.0 - GEO_MIX) / k as f64);
        }
        // successors: letters then space, period, comma
        weights.push(SPACE_P);
        weights.push(PERIOD_P);
        weights.push(COMMA_P);
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        cdfs.push(cdf);
    }

    let succ_char = |j: usize| -> char {
        if j < k {
            letters[j]
        } else {
            shared[j - k]
        }
    };
    let ctx_index = |ch: char| -> usize {
        if let Some(i) = letters.iter().position(|&l| l == ch) {
            i
        } else {
            k + shared.iter().position(|&s| s == ch).unwrap()
        }
    };

    let mut rng = Stream::new(seed);
    let mut out = String::with_capacity(2 * MIN_CHARS);
    let mut total_chars = 0usize;
    while total_chars < MIN_CHARS {
        let line_len = 60 + rng.next_index(41); // 60..=100 chars
        let mut ch = letters[rng.next_index(k)];
        let mut line = String::with_capacity(2 * line_len);
        let mut count = 1usize;
        line.push(ch);
        while count < line_len {
            let cdf = &cdfs[ctx_index(ch)];
            let u = rng.next_f64();
            let j = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
            ch = succ_char(j);
            // stray foreign symbol; the chain context stays domestic
            if rng.next_f64() < noise {
                line.push(foreign[rng.next_index(foreign.len())]);
            } else {
                line.push(ch);
            }
            count += 1;
        }
        let trimmed = line.trim();
        total_chars += trimmed.chars().count() + 1;
        out.push_str(trimmed);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn corpora_are_large_and_deterministic() {
        let a = make_synthetic_domains(7);
        let b = make_synthetic_domains(7);
        assert_eq!(a.text_a, b.text_a);
        assert_eq!(a.text_b, b.text_b);
        assert!(a.text_a.chars().count() >= MIN_CHARS);
        assert!(a.text_b.chars().count() >= MIN_CHARS);
        assert_ne!(a.text_a, a.text_b);
    }

    fn unigram(text: &str) -> HashMap<char, f64> {
        let mut counts: HashMap<char, f64> = HashMap::new();
        let mut total = 0.0;
        for c in text.chars().filter(|&c| c != '\n') {
            *counts.entry(c).or_insert(0.0) += 1.0;
            total += 1.0;
        }
        counts.values_mut().for_each(|v| *v /= total);
        counts
    }

    #[test]
    fn domains_share_little_unigram_mass() {
        let c = make_synthetic_domains(7);
        let ua = unigram(&c.text_a);
        let ub = unigram(&c.text_b);
        let mut overlap = 0.0;
        for (ch, pa) in &ua {
            if let Some(pb) = ub.get(ch) {
                overlap += pa.min(*pb);
            }
        }
        assert!(overlap < 0.30, "unigram overlap {overlap}");
    }

    // Brute-force bigram likelihood-ratio classifier as the independence
    // oracle: held-out lines should separate almost perfectly.
    #[test]
    fn bigram_classifier_separates_domains() {
        let c = make_synthetic_domains(7);
        let lines_a: Vec<&str> = c.text_a.lines().collect();
        let lines_b: Vec<&str> = c.text_b.lines().collect();
        let (train_a, held_a) = lines_a.split_at(lines_a.len() - 100);
        let (train_b, held_b) = lines_b.split_at(lines_b.len() - 100);

        fn bigram_logprob_table(lines: &[&str]) -> HashMap<(char, char), f64> {
            let mut counts: HashMap<(char, char), f64> = HashMap::new();
            let mut ctx: HashMap<char, f64> = HashMap::new();
            for l in lines {
                let chars: Vec<char> = l.chars().collect();
                for w in chars.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0.0) += 1.0;
                    *ctx.entry(w[0]).or_insert(0.0) += 1.0;
                }
            }
            counts
                .into_iter()
                .map(|((a, b), n)| ((a, b), (n / ctx[&a]).ln()))
                .collect()
        }
        let ta = bigram_logprob_table(train_a);
        let tb = bigram_logprob_table(train_b);
        let floor = (1e-6f64).ln();
        let score = |line: &str, t: &HashMap<(char, char), f64>| -> f64 {
            let chars: Vec<char> = line.chars().collect();
            chars
                .windows(2)
                .map(|w| *t.get(&(w[0], w[1])).unwrap_or(&floor))
                .sum()
        };
        let mut correct = 0;
        for l in held_a {
            if score(l, &ta) > score(l, &tb) {
                correct += 1;
            }
        }
        for l in held_b {
            if score(l, &tb) > score(l, &ta) {
                correct += 1;
            }
        }
        let acc = correct as f64 / (held_a.len() + held_b.len()) as f64;
        assert!(acc > 0.95, "classifier accuracy {acc}");
    }
}
