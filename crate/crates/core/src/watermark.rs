//! Generation-time green-list watermark: deterministic pseudo-random green
//! membership keyed by (private key, h previous tokens), logit biasing by
//! delta, and seeded sampling.
//!
//! Green membership is a per-token Bernoulli(gamma) realized by hash
//! thresholding, which matches the detector's null model exactly and is O(1)
//! per token. Everything here is a pure function of its arguments.

use serde::{Deserialize, Serialize};

use crate::corpus::{padded_window, TokenId, TokenSequence};
use crate::lm::{self, ModelParams};
use crate::par;
use crate::rng::{splitmix64, Stream, GOLDEN, MIX};
use crate::{Error, Result};

/// Watermark parameters: private key, green fraction gamma, logit bias
/// delta, and context width h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkConfig {
    /// Private key, serialized as a decimal string to survive JSON readers
    /// that mangle 64-bit integers.
    #[serde(with = "u64_string")]
    pub key: u64,
    pub gamma: f64,
    pub delta: f64,
    pub h: usize,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        WatermarkConfig {
            key: 0,
            gamma: 0.25,
            delta: 4.0,
            h: 1,
        }
    }
}

impl WatermarkConfig {
    pub fn new(key: u64, gamma: f64, delta: f64, h: usize) -> Result<Self> {
        let cfg = WatermarkConfig {
            key,
            gamma,
            delta,
            h,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma {} outside (0,1)",
                self.gamma
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "delta {} must be >= 0",
                self.delta
            )));
        }
        if self.h == 0 {
            return Err(Error::InvalidConfig("h must be >= 1".into()));
        }
        Ok(())
    }
}

mod u64_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Green membership over a whole vocabulary for one context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreenMask {
    pub bits: Vec<bool>,
}

impl GreenMask {
    pub fn green_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Folds the key and the last h token ids into one 64-bit seed:
/// `s = key; for each id: s = splitmix64(s ^ ((id+1) * GOLDEN))`.
pub fn context_seed(cfg: &WatermarkConfig, context: &[TokenId]) -> u64 {
    debug_assert_eq!(context.len(), cfg.h, "context must have exactly h ids");
    let mut s = cfg.key;
    for &id in context {
        s = splitmix64(s ^ (id as u64 + 1).wrapping_mul(GOLDEN));
    }
    s
}

/// Token is green iff `splitmix64(seed ^ ((token+1) * MIX)) < floor(gamma * 2^64)`.
///
/// The float-to-int cast saturates, so the test-only boundary gamma = 1
/// makes everything green except the single top hash value.
#[inline]
pub fn is_green(seed: u64, token: TokenId, gamma: f64) -> bool {
    let threshold = (gamma * 18_446_744_073_709_551_616.0) as u64;
    splitmix64(seed ^ (token as u64 + 1).wrapping_mul(MIX)) < threshold
}

/// Green membership for every id in a vocabulary of `vocab_size`.
pub fn green_mask(cfg: &WatermarkConfig, context: &[TokenId], vocab_size: usize) -> GreenMask {
    let seed = context_seed(cfg, context);
    GreenMask {
        bits: (0..vocab_size).map(|t| is_green(seed, t, cfg.gamma)).collect(),
    }
}

/// out[v] = logits[v] + delta * [v is green]
pub fn apply_bias(logits: &[f64], mask: &GreenMask, delta: f64) -> Result<Vec<f64>> {
    if logits.len() != mask.bits.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits length {} != mask length {}",
            logits.len(),
            mask.bits.len()
        )));
    }
    Ok(logits
        .iter()
        .zip(&mask.bits)
        .map(|(&z, &g)| if g { z + delta } else { z })
        .collect())
}

/// The watermarked next-token distribution of a (frozen) model: softmax of
/// the biased logits. This is the distillation target.
pub fn wm_next_distribution(
    teacher: &ModelParams,
    context: &[TokenId],
    cfg: &WatermarkConfig,
) -> Result<Vec<f64>> {
    let z = biased_logits(teacher, context, cfg)?;
    Ok(lm::softmax(&z))
}

/// Biased pre-softmax scores; the mask is keyed on the last h ids of the
/// model context (which is already BOS-padded by the caller's convention).
pub fn biased_logits(
    teacher: &ModelParams,
    context: &[TokenId],
    cfg: &WatermarkConfig,
) -> Result<Vec<f64>> {
    if cfg.h > teacher.config.context {
        return Err(Error::InvalidConfig(format!(
            "watermark width h={} exceeds model context {}",
            cfg.h, teacher.config.context
        )));
    }
    let z = lm::logits(teacher, context)?;
    let mask_ctx = &context[context.len() - cfg.h..];
    let mask = green_mask(cfg, mask_ctx, teacher.config.vocab_size);
    apply_bias(&z, &mask, cfg.delta)
}

/// Autoregressive sampling. At each step the last `context` ids of
/// BOS-padding + prompt + generated-so-far feed the model; if `cfg` is given
/// the green mask (keyed on the last h ids of the same stream) adds delta to
/// green logits; logits are divided by `temperature` (0 means argmax, ties to
/// the lowest id) and sampled with one uniform draw from a SplitMix64 stream.
pub fn generate(
    model: &ModelParams,
    prompt: &[TokenId],
    n_tokens: usize,
    cfg: Option<&WatermarkConfig>,
    temperature: f64,
    rng_seed: u64,
) -> Result<TokenSequence> {
    if n_tokens == 0 {
        return Err(Error::InvalidConfig("n_tokens must be >= 1".into()));
    }
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "temperature {temperature} must be >= 0"
        )));
    }
    if let Some(c) = cfg {
        c.validate()?;
        if c.h > model.config.context {
            return Err(Error::InvalidConfig(format!(
                "watermark width h={} exceeds model context {}",
                c.h, model.config.context
            )));
        }
    }
    let mut stream = Stream::new(rng_seed);
    let mut ids: TokenSequence = prompt.to_vec();
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let context = padded_window(&ids, ids.len(), model.config.context, lm::BOS_ID);
        let z = match cfg {
            Some(c) => biased_logits(model, &context, c)?,
            None => lm::logits(model, &context)?,
        };
        let next = if temperature == 0.0 {
            argmax_lowest(&z)
        } else {
            let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
            let probs = lm::softmax(&scaled);
            sample_categorical(&probs, stream.next_f64())
        };
        ids.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Generates one response per prompt; response i uses the child seed
/// `splitmix64(master_seed ^ i)`, so outputs are independent of scheduling.
pub fn generate_batch(
    model: &ModelParams,
    prompts: &[TokenSequence],
    n_tokens: usize,
    cfg: Option<&WatermarkConfig>,
    temperature: f64,
    master_seed: u64,
) -> Result<Vec<TokenSequence>> {
    let results = par::map_indexed(prompts.len(), |i| {
        generate(
            model,
            &prompts[i],
            n_tokens,
            cfg,
            temperature,
            splitmix64(master_seed ^ i as u64),
        )
    });
    results.into_iter().collect()
}

fn argmax_lowest(z: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(probs: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ModelConfig, ModelParams};

    fn cfg(key: u64, gamma: f64, delta: f64, h: usize) -> WatermarkConfig {
        WatermarkConfig::new(key, gamma, delta, h).unwrap()
    }

    #[test]
    fn context_seed_deterministic_and_key_sensitive() {
        let a = cfg(42, 0.25, 4.0, 2);
        assert_eq!(context_seed(&a, &[3, 7]), context_seed(&a, &[3, 7]));
        // golden from an independent big-integer script
        assert_eq!(context_seed(&a, &[3, 7]), 4965002770444463581);
        let b = cfg(43, 0.25, 4.0, 2);
        assert_ne!(context_seed(&a, &[3, 7]), context_seed(&b, &[3, 7]));
    }

    #[test]
    fn context_seed_distinguishes_single_tokens() {
        let c = cfg(7, 0.25, 4.0, 1);
        assert_ne!(context_seed(&c, &[2]), context_seed(&c, &[3]));
    }

    #[test]
    fn is_green_extreme_gamma() {
        // gamma -> 1 saturates the threshold at u64::MAX: everything green
        // except the measure-zero top hash value.
        let mut greens = 0;
        for t in 0..1000 {
            if is_green(123, t, 1.0) {
                greens += 1;
            }
        }
        assert!(greens >= 999);
    }

    #[test]
    fn is_green_monte_carlo_fraction() {
        // 1e5 random (seed, token) pairs at gamma = 0.25; 4-sigma binomial CI
        let n = 100_000;
        let mut rng = Stream::new(5);
        let mut greens = 0usize;
        for _ in 0..n {
            let seed = rng.next_u64();
            let tok = rng.next_index(1000);
            if is_green(seed, tok, 0.25) {
                greens += 1;
            }
        }
        let frac = greens as f64 / n as f64;
        let tol = 4.0 * (0.25 * 0.75 / n as f64).sqrt();
        assert!((frac - 0.25).abs() < tol, "green fraction {frac}");
    }

    #[test]
    fn green_mask_shape_and_mean_count() {
        let c = cfg(9, 0.25, 4.0, 1);
        let mask = green_mask(&c, &[3], 100);
        assert_eq!(mask.bits.len(), 100);

        // mean green count over 1000 random contexts: 25 +/- 4 sigma
        let mut total = 0usize;
        for ctx in 0..1000 {
            total += green_mask(&c, &[ctx], 100).green_count();
        }
        let mean = total as f64 / 1000.0;
        let sigma = (100.0f64 * 0.25 * 0.75 / 1000.0).sqrt();
        assert!((mean - 25.0).abs() < 4.0 * sigma, "mean green count {mean}");
    }

    #[test]
    fn masks_under_different_keys_agree_at_chance() {
        // independent Bernoulli(gamma) masks agree on gamma^2 + (1-gamma)^2
        let a = cfg(1, 0.25, 4.0, 1);
        let b = cfg(2, 0.25, 4.0, 1);
        let mut agree = 0usize;
        let mut total = 0usize;
        for ctx in 0..500 {
            let ma = green_mask(&a, &[ctx], 100);
            let mb = green_mask(&b, &[ctx], 100);
            agree += ma
                .bits
                .iter()
                .zip(&mb.bits)
                .filter(|(x, y)| x == y)
                .count();
            total += 100;
        }
        let frac = agree as f64 / total as f64;
        let expect = 0.25 * 0.25 + 0.75 * 0.75; // 0.625
        let tol = 4.0 * (expect * (1.0 - expect) / total as f64).sqrt();
        assert!((frac - expect).abs() < tol, "agreement {frac}");
    }

    #[test]
    fn apply_bias_zero_delta_is_identity() {
        let mask = GreenMask {
            bits: vec![true, false, true],
        };
        let z = vec![0.1, -0.2, 3.0];
        assert_eq!(apply_bias(&z, &mask, 0.0).unwrap(), z);
    }

    #[test]
    fn apply_bias_golden_softmax() {
        // logits [0,0], mask [green, red], delta = ln 3 -> softmax [0.75, 0.25]
        let mask = GreenMask {
            bits: vec![true, false],
        };
        let biased = apply_bias(&[0.0, 0.0], &mask, 3f64.ln()).unwrap();
        let p = lm::softmax(&biased);
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn apply_bias_increases_green_mass() {
        let mask = GreenMask {
            bits: vec![true, false, false, true],
        };
        let z = vec![0.4, -1.0, 2.0, 0.0];
        let before: f64 = lm::softmax(&z)
            .iter()
            .zip(&mask.bits)
            .filter(|(_, &g)| g)
            .map(|(p, _)| p)
            .sum();
        let after: f64 = lm::softmax(&apply_bias(&z, &mask, 2.0).unwrap())
            .iter()
            .zip(&mask.bits)
            .filter(|(_, &g)| g)
            .map(|(p, _)| p)
            .sum();
        assert!(after > before);
    }

    #[test]
    fn apply_bias_length_mismatch_is_error() {
        let mask = GreenMask {
            bits: vec![true, false],
        };
        assert!(apply_bias(&[0.0; 3], &mask, 1.0).is_err());
    }

    #[test]
    fn apply_bias_preserves_order_within_color() {
        let c = cfg(3, 0.25, 4.0, 1);
        let mask = green_mask(&c, &[5], 32);
        let mut rng = Stream::new(8);
        let z: Vec<f64> = (0..32).map(|_| rng.next_gaussian()).collect();
        let biased = apply_bias(&z, &mask, 4.0).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                if mask.bits[i] == mask.bits[j] && z[i] < z[j] {
                    assert!(biased[i] < biased[j]);
                }
            }
        }
    }

    #[test]
    fn wm_distribution_hand_case() {
        // teacher logits all zero (zero params), green = {0}, delta = ln 2
        // -> [0.5, 0.25, 0.25]
        let model = ModelParams::zeros(ModelConfig {
            vocab_size: 3,
            context: 2,
            embed_dim: 2,
            hidden_dim: 2,
        });
        let c = cfg(0, 0.25, 2f64.ln(), 1);
        // find a context token whose mask is exactly {0 green, 1,2 red}
        let mut found = None;
        for t in 0..3 {
            let m = green_mask(&c, &[t], 3);
            if m.bits == vec![true, false, false] {
                found = Some(t);
                break;
            }
        }
        if let Some(t) = found {
            let q = wm_next_distribution(&model, &[0, t], &c).unwrap();
            assert!((q[0] - 0.5).abs() < 1e-12);
            assert!((q[1] - 0.25).abs() < 1e-12);
            assert!((q[2] - 0.25).abs() < 1e-12);
        } else {
            // fall back to a direct hand computation with an explicit mask
            let biased =
                apply_bias(&[0.0; 3], &GreenMask { bits: vec![true, false, false] }, 2f64.ln())
                    .unwrap();
            let q = lm::softmax(&biased);
            assert!((q[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn wm_distribution_zero_delta_matches_teacher() {
        let model = ModelParams::init_gaussian(
            ModelConfig {
                vocab_size: 7,
                context: 3,
                embed_dim: 2,
                hidden_dim: 4,
            },
            21,
        );
        let c = cfg(5, 0.25, 0.0, 2);
        let ctx = [1, 2, 3];
        let q = wm_next_distribution(&model, &ctx, &c).unwrap();
        let p = lm::softmax(&lm::logits(&model, &ctx).unwrap());
        assert_eq!(q, p);
        let sum: f64 = q.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generate_greedy_is_deterministic() {
        let model = ModelParams::init_gaussian(
            ModelConfig {
                vocab_size: 9,
                context: 4,
                embed_dim: 3,
                hidden_dim: 5,
            },
            2,
        );
        let a = generate(&model, &[2, 3], 20, None, 0.0, 1).unwrap();
        let b = generate(&model, &[2, 3], 20, None, 0.0, 999).unwrap();
        assert_eq!(a, b); // greedy ignores the seed
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn generate_zero_delta_equals_unwatermarked() {
        let model = ModelParams::init_gaussian(
            ModelConfig {
                vocab_size: 9,
                context: 4,
                embed_dim: 3,
                hidden_dim: 5,
            },
            2,
        );
        let c = cfg(77, 0.25, 0.0, 1);
        let with = generate(&model, &[1], 50, Some(&c), 1.0, 33).unwrap();
        let without = generate(&model, &[1], 50, None, 1.0, 33).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn generate_rejects_negative_temperature() {
        let model = ModelParams::zeros(ModelConfig {
            vocab_size: 4,
            context: 2,
            embed_dim: 2,
            hidden_dim: 2,
        });
        assert!(generate(&model, &[0], 5, None, -1.0, 0).is_err());
    }

    #[test]
    fn biased_sampling_calibration_uniform_model() {
        // uniform-logit model, gamma=0.25, delta=4: green fraction of
        // generated tokens ~= 0.25 e^4 / (0.25 e^4 + 0.75) ~ 0.9479
        let model = ModelParams::zeros(ModelConfig {
            vocab_size: 64,
            context: 4,
            embed_dim: 2,
            hidden_dim: 2,
        });
        let c = cfg(11, 0.25, 4.0, 1);
        let toks = generate(&model, &[5], 10_000, Some(&c), 1.0, 7).unwrap();
        let mut stream: Vec<TokenId> = vec![5];
        stream.extend(&toks);
        let mut green = 0usize;
        for t in 1..stream.len() {
            let seed = context_seed(&c, &stream[t - 1..t]);
            if is_green(seed, stream[t], c.gamma) {
                green += 1;
            }
        }
        let frac = green as f64 / toks.len() as f64;
        let expect = 0.25 * 4f64.exp() / (0.25 * 4f64.exp() + 0.75);
        assert!((frac - expect).abs() < 0.01, "green fraction {frac} vs {expect}");
    }

    #[test]
    fn generate_batch_matches_sequential_children() {
        let model = ModelParams::init_gaussian(
            ModelConfig {
                vocab_size: 12,
                context: 3,
                embed_dim: 3,
                hidden_dim: 6,
            },
            4,
        );
        let prompts: Vec<TokenSequence> = vec![vec![2], vec![3, 4], vec![5]];
        let batch = generate_batch(&model, &prompts, 16, None, 1.0, 42).unwrap();
        for (i, p) in prompts.iter().enumerate() {
            let solo = generate(&model, p, 16, None, 1.0, splitmix64(42 ^ i as u64)).unwrap();
            assert_eq!(batch[i], solo);
        }
    }

    #[test]
    fn watermark_config_json_uses_decimal_string_key() {
        let c = cfg(u64::MAX, 0.25, 4.0, 1);
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"18446744073709551615\""), "{json}");
        let back: WatermarkConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
