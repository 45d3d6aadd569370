//! Steerable language-model contract and the two reference backends.
//!
//! A backend exposes its residual stream (per-block activations at chosen
//! positions) and accepts an additive intervention `h <- h + alpha * v` at the
//! output of one block, applied to generated positions only. Two backends
//! ship: [`AnalyticConceptLM`], a closed-form single-layer oracle, and
//! [`TinyTransformerLM`], a small trainable decoder-only transformer.

pub mod analytic;
pub mod sampling;
pub mod tiny;
pub mod train;

pub use analytic::AnalyticConceptLM;
pub use tiny::{Checkpoint, TinyConfig, TinyTransformerLM};

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::SteeringVector;

/// Token id into a [`Vocab`].
pub type TokenId = usize;

/// Ordered token alphabet with id <-> string maps.
///
/// Ids are dense, `0..len()`, in insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Validation(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds the string->id map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(id, t)| (t.clone(), id))
            .collect();
    }
}

/// A tokenized prompt plus the index of its last prompt position.
///
/// Positions `0..=prompt_end` are prompt positions; anything later (forced
/// continuation tokens or sampled tokens) counts as generated and is subject
/// to steering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: Vec<TokenId>,
    pub prompt_end: usize,
}

impl PromptTokens {
    /// Prompt whose last position is its last token.
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Validation("empty prompt".into()));
        }
        let prompt_end = ids.len() - 1;
        Ok(Self { ids, prompt_end })
    }

    pub fn with_prompt_end(ids: Vec<TokenId>, prompt_end: usize) -> Result<Self> {
        if prompt_end >= ids.len() {
            return Err(Error::Validation(format!(
                "prompt_end {prompt_end} out of range for {} ids",
                ids.len()
            )));
        }
        Ok(Self { ids, prompt_end })
    }

    pub fn validate_against(&self, vocab: &Vocab) -> Result<()> {
        for &id in &self.ids {
            if id >= vocab.len() {
                return Err(Error::UnknownToken {
                    id,
                    size: vocab.len(),
                });
            }
        }
        Ok(())
    }
}

/// A point in a backend's residual stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub values: Vec<f64>,
}

impl Activation {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sampling controls for autoregressive generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidParameter("max_new_tokens must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.9,
            max_new_tokens: 256,
            seed: 0,
        }
    }
}

/// An additive residual-stream intervention: add `alpha * direction` at the
/// output of block `layer` for every generated position.
#[derive(Debug, Clone)]
pub struct InterventionSpec {
    pub layer: usize,
    pub alpha: f64,
    pub direction: Arc<SteeringVector>,
}

impl InterventionSpec {
    pub fn new(alpha: f64, direction: Arc<SteeringVector>) -> Self {
        Self {
            layer: direction.layer,
            alpha,
            direction,
        }
    }

    pub fn validate_for(&self, layer_count: usize, hidden_dim: usize) -> Result<()> {
        if self.layer >= layer_count {
            return Err(Error::InvalidLayer {
                layer: self.layer,
                count: layer_count,
            });
        }
        if self.direction.direction.len() != hidden_dim {
            return Err(Error::DimensionMismatch {
                expected: hidden_dim,
                got: self.direction.direction.len(),
            });
        }
        Ok(())
    }
}

/// Result of a capturing forward pass over a prompt.
#[derive(Debug, Clone)]
pub struct CaptureResult {
    /// Residual-stream activation after each requested block, at `prompt_end`.
    pub activations: HashMap<usize, Activation>,
    /// Logits for the token following `prompt_end`.
    pub logits: Vec<f64>,
}

/// The steerable model contract.
///
/// Implementations must be deterministic: identical weights, inputs, and
/// interventions yield bit-identical logits on every call. Model weights are
/// immutable after construction, so a `&self` receiver is safe to share
/// across threads.
pub trait SteerableModel {
    /// Incremental decode state; confined to one generation task.
    type State: Clone;

    fn backend_id(&self) -> &'static str;
    fn layer_count(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn context_window(&self) -> usize;
    fn vocab(&self) -> &Vocab;
    /// Stable hash of architecture and weights, for artifact provenance.
    fn fingerprint(&self) -> String;

    /// Runs the prompt and captures the residual-stream activation after each
    /// requested block at position `prompt_end`, plus next-token logits.
    fn forward_with_capture(&self, prompt: &PromptTokens, layers: &[usize]) -> Result<CaptureResult>;

    /// Residual-stream activations after block `layer` at each listed prompt
    /// position (no steering: these are prompt positions).
    fn capture_positions(
        &self,
        prompt: &PromptTokens,
        layer: usize,
        positions: &[usize],
    ) -> Result<Vec<Activation>>;

    /// Initializes incremental decode state from a prompt. Positions beyond
    /// `prompt_end` present in `prompt.ids` are treated as generated and are
    /// steered under `spec`.
    fn begin_decode(&self, prompt: &PromptTokens, spec: Option<&InterventionSpec>) -> Result<Self::State>;

    /// Logits for the next token given the current state. Does not consume
    /// randomness and does not advance the state's token history.
    fn step_logits(&self, state: &mut Self::State, spec: Option<&InterventionSpec>) -> Result<Vec<f64>>;

    /// Appends a sampled (or forced) token to the state's history. The
    /// token's position is processed lazily by the next `step_logits` call,
    /// under whatever spec that call passes.
    fn push_token(&self, state: &mut Self::State, token: TokenId) -> Result<()>;

    /// Token history (prompt + generated) of a decode state.
    fn history<'a>(&self, state: &'a Self::State) -> &'a [TokenId];
}

/// One decode step: next-token probability distribution (softmax of the raw
/// logits) plus the updated state.
///
/// With `spec` absent or `alpha == 0` this reproduces the unmodified forward
/// pass exactly: the zero intervention is skipped rather than added.
pub fn forward_step_with_intervention<M: SteerableModel>(
    model: &M,
    state: &mut M::State,
    spec: Option<&InterventionSpec>,
) -> Result<Vec<f64>> {
    let logits = model.step_logits(state, spec)?;
    Ok(sampling::softmax(&logits))
}
