//! Temperature + nucleus (top-p) sampling.
//!
//! Convention: the boundary token that crosses the `top_p` cumulative mass is
//! included. Ties in probability are ordered by ascending token id so the
//! kept set is deterministic.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::model::{InterventionSpec, PromptTokens, SteerableModel, TokenId};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Softmax of `logits / temperature`.
pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    softmax(&scaled)
}

/// Nucleus filter: sort descending, keep the smallest prefix whose cumulative
/// mass reaches `top_p` (boundary token included), zero the rest, renormalize.
pub fn top_p_filter(probs: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = vec![false; probs.len()];
    let mut cum = 0.0;
    for &idx in &order {
        kept[idx] = true;
        cum += probs[idx];
        if cum >= top_p {
            break;
        }
    }
    let total: f64 = probs
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .map(|(p, _)| p)
        .sum();
    probs
        .iter()
        .zip(&kept)
        .map(|(&p, &k)| if k { p / total } else { 0.0 })
        .collect()
}

/// Seeded sampler over discrete distributions. One uniform draw per token.
pub struct TokenSampler {
    rng: ChaCha12Rng,
}

impl TokenSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Inverse-CDF draw; scans in token-id order.
    pub fn sample(&mut self, probs: &[f64]) -> TokenId {
        let u: f64 = self.rng.gen();
        let mut cum = 0.0;
        let mut last_nonzero = 0;
        for (id, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_nonzero = id;
            }
            cum += p;
            if u < cum {
                return id;
            }
        }
        last_nonzero
    }
}

/// What stopped a generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxTokens,
    EndOfSequence,
}

/// Autoregressive sampling under an optional fixed intervention.
///
/// Per step: logits / temperature, softmax, nucleus filter, seeded draw.
/// Stops after `max_new_tokens` or on `eos` when the backend defines one.
pub fn generate<M: SteerableModel>(
    model: &M,
    prompt: &PromptTokens,
    params: &crate::model::GenerationParams,
    spec: Option<&InterventionSpec>,
) -> Result<(Vec<TokenId>, StopReason)> {
    params.validate()?;
    if let Some(s) = spec {
        s.validate_for(model.layer_count(), model.hidden_dim())?;
    }
    let eos = model.vocab().id_of(crate::model::train::EOS_TOKEN);
    let mut state = model.begin_decode(prompt, spec)?;
    let mut sampler = TokenSampler::new(params.seed);
    let mut out = Vec::new();
    for _ in 0..params.max_new_tokens {
        let logits = model.step_logits(&mut state, spec)?;
        let probs = top_p_filter(&tempered_softmax(&logits, params.temperature), params.top_p);
        let token = sampler.sample(&probs);
        model.push_token(&mut state, token)?;
        out.push(token);
        if Some(token) == eos {
            return Ok((out, StopReason::EndOfSequence));
        }
    }
    Ok((out, StopReason::MaxTokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1.0, 2.0, -3.0, 0.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn top_p_keeps_boundary_token() {
        // Hand-evaluated: 0.5 + 0.3 < 0.9, so 0.15 is included, then stop.
        let filtered = top_p_filter(&[0.5, 0.3, 0.15, 0.05], 0.9);
        let expect = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0];
        for (got, want) in filtered.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((filtered[0] - 0.5263).abs() < 1e-4);
        assert!((filtered[1] - 0.3158).abs() < 1e-4);
        assert!((filtered[2] - 0.1579).abs() < 1e-4);
    }

    #[test]
    fn top_p_one_is_identity() {
        let probs = [0.25, 0.25, 0.4, 0.1];
        assert_eq!(top_p_filter(&probs, 1.0), probs.to_vec());
    }

    #[test]
    fn filtered_output_is_a_distribution() {
        let probs = softmax(&[0.3, -1.2, 2.5, 0.0, 0.9]);
        for tp in [0.1, 0.5, 0.9, 0.999] {
            let f = top_p_filter(&probs, tp);
            assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(f.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let probs = [0.2, 0.3, 0.5];
        let a: Vec<_> = {
            let mut s = TokenSampler::new(42);
            (0..32).map(|_| s.sample(&probs)).collect()
        };
        let b: Vec<_> = {
            let mut s = TokenSampler::new(42);
            (0..32).map(|_| s.sample(&probs)).collect()
        };
        assert_eq!(a, b);
    }
}
