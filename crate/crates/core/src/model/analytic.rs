//! Closed-form single-layer backend.
//!
//! The residual-stream activation at every position is `b + c*u`, where `u`
//! is a planted unit direction, `b` is a base vector orthogonal to it, and
//! `c` in {+1, -1, 0} is set by the last stance marker seen in the token
//! history. Answer logits are exactly `logit(YES) = g*<h, u>` and
//! `logit(NO) = -g*<h, u>`; every other token sits at a constant floor.
//! This makes extraction, alignment, and intervention effects checkable
//! against pencil-and-paper values.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    Activation, CaptureResult, InterventionSpec, PromptTokens, SteerableModel, TokenId, Vocab,
};

pub const YES_TOKEN: &str = "YES";
pub const NO_TOKEN: &str = "NO";
pub const SUPPORT_MARKER: &str = "SUPPORT";
pub const CHALLENGE_MARKER: &str = "CHALLENGE";
pub const NEUTRAL_MARKER: &str = "NEUTRAL";

/// Number of generic filler tokens in the analytic vocab.
pub const FILLER_COUNT: usize = 16;

#[derive(Debug, Clone)]
pub struct AnalyticConceptLM {
    vocab: Vocab,
    /// Planted unit direction.
    u: Vec<f64>,
    /// Base vector, orthogonal to `u`.
    b: Vec<f64>,
    /// Logit gain.
    gain: f64,
    /// Logit assigned to every non-answer token.
    filler_logit: f64,
    yes_id: TokenId,
    no_id: TokenId,
    support_id: TokenId,
    challenge_id: TokenId,
    neutral_id: TokenId,
}

/// Incremental decode state: the token history and the prompt boundary.
#[derive(Debug, Clone)]
pub struct AnalyticState {
    tokens: Vec<TokenId>,
    prompt_end: usize,
    /// Positions processed so far; logits cache for the next token.
    processed: usize,
    next_logits: Option<Vec<f64>>,
}

impl AnalyticConceptLM {
    /// Builds the backend from a planted direction and base vector.
    ///
    /// `u` must be unit norm and orthogonal to `b` (within 1e-9).
    pub fn new(u: Vec<f64>, b: Vec<f64>, gain: f64, filler_logit_magnitude: f64) -> Result<Self> {
        if u.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: u.len(),
                got: b.len(),
            });
        }
        let u_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (u_norm - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "planted direction must be unit norm, got {u_norm}"
            )));
        }
        let dot: f64 = u.iter().zip(&b).map(|(a, c)| a * c).sum();
        if dot.abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "base vector must be orthogonal to the planted direction, <b,u> = {dot}"
            )));
        }
        if gain <= 0.0 {
            return Err(Error::InvalidParameter("gain must be > 0".into()));
        }
        let mut tokens = vec![
            "<eos>".to_string(),
            YES_TOKEN.to_string(),
            NO_TOKEN.to_string(),
            SUPPORT_MARKER.to_string(),
            CHALLENGE_MARKER.to_string(),
            NEUTRAL_MARKER.to_string(),
        ];
        for i in 0..FILLER_COUNT {
            tokens.push(format!("w{i}"));
        }
        let vocab = Vocab::new(tokens)?;
        Ok(Self {
            yes_id: vocab.id_of(YES_TOKEN).unwrap(),
            no_id: vocab.id_of(NO_TOKEN).unwrap(),
            support_id: vocab.id_of(SUPPORT_MARKER).unwrap(),
            challenge_id: vocab.id_of(CHALLENGE_MARKER).unwrap(),
            neutral_id: vocab.id_of(NEUTRAL_MARKER).unwrap(),
            vocab,
            u,
            b,
            gain,
            filler_logit: -filler_logit_magnitude.abs(),
        })
    }

    /// Standard oracle: `u = e0`, `b = 2*e1`, gain 1, filler floor -10.
    pub fn default_oracle(dim: usize) -> Self {
        assert!(dim >= 2, "oracle needs at least 2 dimensions");
        let mut u = vec![0.0; dim];
        u[0] = 1.0;
        let mut b = vec![0.0; dim];
        b[1] = 2.0;
        Self::new(u, b, 1.0, 10.0).expect("construction is valid")
    }

    pub fn planted_direction(&self) -> &[f64] {
        &self.u
    }

    pub fn base_vector(&self) -> &[f64] {
        &self.b
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn yes_id(&self) -> TokenId {
        self.yes_id
    }

    pub fn no_id(&self) -> TokenId {
        self.no_id
    }

    /// Stance coefficient from the last marker in the history (none -> 0).
    fn stance(&self, tokens: &[TokenId]) -> f64 {
        for &t in tokens.iter().rev() {
            if t == self.support_id {
                return 1.0;
            }
            if t == self.challenge_id {
                return -1.0;
            }
            if t == self.neutral_id {
                return 0.0;
            }
        }
        0.0
    }

    /// Residual activation for a history: `b + c*u`.
    fn activation(&self, tokens: &[TokenId]) -> Vec<f64> {
        let c = self.stance(tokens);
        self.b
            .iter()
            .zip(&self.u)
            .map(|(&bi, &ui)| bi + c * ui)
            .collect()
    }

    fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let proj: f64 = h.iter().zip(&self.u).map(|(a, b)| a * b).sum();
        let mut logits = vec![self.filler_logit; self.vocab.len()];
        logits[self.yes_id] = self.gain * proj;
        logits[self.no_id] = -self.gain * proj;
        logits
    }

    /// Hidden state at a position, steered when `pos > prompt_end`.
    fn hidden_at(
        &self,
        tokens: &[TokenId],
        pos: usize,
        prompt_end: usize,
        spec: Option<&InterventionSpec>,
    ) -> Result<Vec<f64>> {
        let mut h = self.activation(&tokens[..=pos]);
        if pos > prompt_end {
            if let Some(s) = spec {
                s.validate_for(self.layer_count(), self.hidden_dim())?;
                if s.alpha != 0.0 {
                    for (hi, vi) in h.iter_mut().zip(&s.direction.direction) {
                        *hi += s.alpha * vi;
                    }
                }
            }
        }
        Ok(h)
    }
}

impl SteerableModel for AnalyticConceptLM {
    type State = AnalyticState;

    fn backend_id(&self) -> &'static str {
        "analytic"
    }

    fn layer_count(&self) -> usize {
        1
    }

    fn hidden_dim(&self) -> usize {
        self.u.len()
    }

    fn context_window(&self) -> usize {
        4096
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"analytic-v1");
        for v in self.u.iter().chain(&self.b) {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(self.gain.to_le_bytes());
        hasher.update(self.filler_logit.to_le_bytes());
        hex::encode(&hasher.finalize()[..16])
    }

    fn forward_with_capture(&self, prompt: &PromptTokens, layers: &[usize]) -> Result<CaptureResult> {
        prompt.validate_against(&self.vocab)?;
        if prompt.ids.len() > self.context_window() {
            return Err(Error::PromptTooLong {
                len: prompt.ids.len(),
                window: self.context_window(),
            });
        }
        let mut activations = std::collections::HashMap::new();
        for &layer in layers {
            if layer >= self.layer_count() {
                return Err(Error::InvalidLayer {
                    layer,
                    count: self.layer_count(),
                });
            }
            let h = self.activation(&prompt.ids[..=prompt.prompt_end]);
            activations.insert(layer, Activation::new(h));
        }
        let h = self.activation(&prompt.ids[..=prompt.prompt_end]);
        Ok(CaptureResult {
            activations,
            logits: self.logits_from_hidden(&h),
        })
    }

    fn capture_positions(
        &self,
        prompt: &PromptTokens,
        layer: usize,
        positions: &[usize],
    ) -> Result<Vec<Activation>> {
        if layer >= self.layer_count() {
            return Err(Error::InvalidLayer {
                layer,
                count: self.layer_count(),
            });
        }
        prompt.validate_against(&self.vocab)?;
        positions
            .iter()
            .map(|&p| {
                if p >= prompt.ids.len() {
                    return Err(Error::Validation(format!("position {p} out of range")));
                }
                Ok(Activation::new(self.activation(&prompt.ids[..=p])))
            })
            .collect()
    }

    fn begin_decode(&self, prompt: &PromptTokens, spec: Option<&InterventionSpec>) -> Result<Self::State> {
        prompt.validate_against(&self.vocab)?;
        if let Some(s) = spec {
            s.validate_for(self.layer_count(), self.hidden_dim())?;
        }
        Ok(AnalyticState {
            tokens: prompt.ids.clone(),
            prompt_end: prompt.prompt_end,
            processed: 0,
            next_logits: None,
        })
    }

    fn step_logits(&self, state: &mut Self::State, spec: Option<&InterventionSpec>) -> Result<Vec<f64>> {
        while state.processed < state.tokens.len() {
            let pos = state.processed;
            let h = self.hidden_at(&state.tokens, pos, state.prompt_end, spec)?;
            state.next_logits = Some(self.logits_from_hidden(&h));
            state.processed += 1;
        }
        state
            .next_logits
            .clone()
            .ok_or_else(|| Error::Validation("empty decode state".into()))
    }

    fn push_token(&self, state: &mut Self::State, token: TokenId) -> Result<()> {
        if token >= self.vocab.len() {
            return Err(Error::UnknownToken {
                id: token,
                size: self.vocab.len(),
            });
        }
        state.tokens.push(token);
        Ok(())
    }

    fn history<'a>(&self, state: &'a Self::State) -> &'a [TokenId] {
        &state.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_step_with_intervention;
    use crate::steering::SteeringVector;
    use std::sync::Arc;

    fn oracle() -> AnalyticConceptLM {
        AnalyticConceptLM::default_oracle(8)
    }

    fn prompt_with(model: &AnalyticConceptLM, marker: &str) -> PromptTokens {
        let ids = vec![
            model.vocab().id_of("w0").unwrap(),
            model.vocab().id_of(marker).unwrap(),
            model.vocab().id_of("w1").unwrap(),
        ];
        PromptTokens::new(ids).unwrap()
    }

    fn unit_spec(model: &AnalyticConceptLM, alpha: f64) -> InterventionSpec {
        let v = SteeringVector {
            layer: 0,
            direction: model.planted_direction().to_vec(),
            raw_norm: 1.0,
            pair_count: 1,
            sign_convention: "plus_minus".into(),
        };
        InterventionSpec::new(alpha, Arc::new(v))
    }

    #[test]
    fn support_marker_gives_b_plus_u() {
        let m = oracle();
        let cap = m
            .forward_with_capture(&prompt_with(&m, SUPPORT_MARKER), &[0])
            .unwrap();
        let h = &cap.activations[&0].values;
        let expect: Vec<f64> = m
            .base_vector()
            .iter()
            .zip(m.planted_direction())
            .map(|(b, u)| b + u)
            .collect();
        assert_eq!(h, &expect);
    }

    #[test]
    fn neutral_marker_gives_b() {
        let m = oracle();
        let cap = m
            .forward_with_capture(&prompt_with(&m, NEUTRAL_MARKER), &[0])
            .unwrap();
        assert_eq!(cap.activations[&0].values, m.base_vector());
    }

    #[test]
    fn zero_alpha_matches_plain_step() {
        let m = oracle();
        let p = prompt_with(&m, SUPPORT_MARKER);
        let mut plain = m.begin_decode(&p, None).unwrap();
        let spec = unit_spec(&m, 0.0);
        let mut steered = m.begin_decode(&p, Some(&spec)).unwrap();
        let a = forward_step_with_intervention(&m, &mut plain, None).unwrap();
        let b = forward_step_with_intervention(&m, &mut steered, Some(&spec)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn logit_gap_matches_closed_form() {
        // h = b (NEUTRAL), alpha = 2 along u, gain = 1:
        // gap = 2*g*<h + 2u, u> = 2*1*2 = 4.
        let m = oracle();
        let p = prompt_with(&m, NEUTRAL_MARKER);
        let spec = unit_spec(&m, 2.0);
        let mut st = m.begin_decode(&p, Some(&spec)).unwrap();
        // First generated position carries the intervention.
        m.push_token(&mut st, m.vocab().id_of("w2").unwrap()).unwrap();
        let logits = m.step_logits(&mut st, Some(&spec)).unwrap();
        let gap = logits[m.yes_id()] - logits[m.no_id()];
        assert!((gap - 4.0).abs() < 1e-12, "gap = {gap}");

        let neg = unit_spec(&m, -2.0);
        let mut st = m.begin_decode(&p, Some(&neg)).unwrap();
        m.push_token(&mut st, m.vocab().id_of("w2").unwrap()).unwrap();
        let logits = m.step_logits(&mut st, Some(&neg)).unwrap();
        let gap = logits[m.yes_id()] - logits[m.no_id()];
        assert!((gap + 4.0).abs() < 1e-12, "gap = {gap}");
    }

    #[test]
    fn logit_gap_is_affine_in_alpha() {
        // Slope must be exactly 2*g*<v, u> for any 5 alphas.
        let m = oracle();
        let p = prompt_with(&m, SUPPORT_MARKER);
        for alpha in [-3.0, -1.5, 0.0, 0.5, 2.5] {
            let spec = unit_spec(&m, alpha);
            let mut st = m.begin_decode(&p, Some(&spec)).unwrap();
            m.push_token(&mut st, m.vocab().id_of("w2").unwrap()).unwrap();
            let logits = m.step_logits(&mut st, Some(&spec)).unwrap();
            let gap = logits[m.yes_id()] - logits[m.no_id()];
            let expect = 2.0 * m.gain() * (1.0 + alpha);
            assert!((gap - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_layer_is_rejected() {
        let m = oracle();
        let p = prompt_with(&m, NEUTRAL_MARKER);
        assert!(matches!(
            m.forward_with_capture(&p, &[1]),
            Err(Error::InvalidLayer { .. })
        ));
    }
}
