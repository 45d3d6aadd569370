//! Gated mixture decoding over the alpha-expert family.
//!
//! Each grid value instantiates one expert: the same base model stepped under
//! a fixed intervention strength. Every decoding step advances the active
//! experts in lockstep, convexly mixes their tempered next-token
//! distributions with the per-prompt gate weights, nucleus-filters the
//! mixture, samples one token, and appends it to every expert's history so
//! all experts share a single trajectory.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{compute_gate, AlphaGrid, GateConfig, GateWeights};
use crate::model::sampling::{tempered_softmax, top_p_filter, TokenSampler};
use crate::model::{GenerationParams, InterventionSpec, PromptTokens, SteerableModel, TokenId};
use crate::seed;
use crate::steering::SteeringVector;

/// The alpha-expert family sharing one trajectory.
pub struct ExpertSet<'m, M: SteerableModel> {
    model: &'m M,
    alphas: Vec<f64>,
    specs: Vec<Option<InterventionSpec>>,
    states: Vec<M::State>,
    /// Experts actually stepped; the rest stay lazily un-advanced.
    active: Vec<usize>,
    steps_taken: usize,
}

/// Tempered next-token distributions keyed by alpha.
#[derive(Debug, Clone)]
pub struct ExpertDistributions {
    pub alphas: Vec<f64>,
    /// One distribution per entry of `alphas`; inactive experts are `None`.
    pub dists: Vec<Option<Vec<f64>>>,
}

impl<'m, M: SteerableModel> ExpertSet<'m, M> {
    /// Builds one decode state per grid value. `active` restricts stepping to
    /// the listed expert indices (e.g. the nonzero-weight ones after top-k);
    /// `None` activates every expert.
    pub fn new(
        model: &'m M,
        prompt: &PromptTokens,
        vector: &Arc<SteeringVector>,
        grid: &AlphaGrid,
        active: Option<Vec<usize>>,
    ) -> Result<Self> {
        let alphas = grid.values().to_vec();
        let mut specs = Vec::with_capacity(alphas.len());
        let mut states = Vec::with_capacity(alphas.len());
        for &alpha in &alphas {
            let spec = if alpha == 0.0 {
                None
            } else {
                Some(InterventionSpec::new(alpha, Arc::clone(vector)))
            };
            if let Some(s) = &spec {
                s.validate_for(model.layer_count(), model.hidden_dim())?;
            }
            states.push(model.begin_decode(prompt, spec.as_ref())?);
            specs.push(spec);
        }
        let active = match active {
            Some(list) => {
                for &i in &list {
                    if i >= alphas.len() {
                        return Err(Error::InvalidParameter(format!("expert index {i} out of range")));
                    }
                }
                list
            }
            None => (0..alphas.len()).collect(),
        };
        if active.is_empty() {
            return Err(Error::InvalidParameter("no active experts".into()));
        }
        Ok(Self {
            model,
            alphas,
            specs,
            states,
            active,
            steps_taken: 0,
        })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Forward steps performed so far, summed over experts.
    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Advances each active expert by one step and returns its tempered
    /// next-token distribution. The alpha = 0 expert equals the unsteered
    /// model's distribution at the same temperature.
    pub fn expert_step(&mut self, temperature: f64) -> Result<ExpertDistributions> {
        let mut dists = vec![None; self.alphas.len()];
        for &i in &self.active {
            let logits = self.model.step_logits(&mut self.states[i], self.specs[i].as_ref())?;
            dists[i] = Some(tempered_softmax(&logits, temperature));
            self.steps_taken += 1;
        }
        Ok(ExpertDistributions {
            alphas: self.alphas.clone(),
            dists,
        })
    }

    /// Appends the sampled token to every expert's history (active or not),
    /// keeping all trajectories identical.
    pub fn push_shared(&mut self, token: TokenId) -> Result<()> {
        for state in &mut self.states {
            self.model.push_token(state, token)?;
        }
        Ok(())
    }

    /// Token histories, for the shared-trajectory invariant.
    pub fn histories(&self) -> Vec<&[TokenId]> {
        self.states.iter().map(|s| self.model.history(s)).collect()
    }
}

/// Convex combination of expert distributions under gate weights.
///
/// The distributions' alpha keys must match the grid exactly; every active
/// entry must be a distribution over the same token space. Experts carrying
/// zero weight may be absent (inactive).
pub fn mix(dists: &ExpertDistributions, weights: &GateWeights, grid: &AlphaGrid) -> Result<Vec<f64>> {
    if dists.alphas != grid.values() {
        return Err(Error::InvalidParameter(
            "expert distribution keys do not match the alpha grid".into(),
        ));
    }
    if weights.weights.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: weights.weights.len(),
        });
    }
    let dim = dists
        .dists
        .iter()
        .flatten()
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::InvalidParameter("no expert distributions".into()))?;
    let mut out = vec![0.0; dim];
    for (i, w) in weights.weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let dist = dists.dists[i].as_ref().ok_or_else(|| {
            Error::InvalidParameter(format!(
                "expert alpha {} has weight {w} but no distribution",
                dists.alphas[i]
            ))
        })?;
        if dist.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: dist.len(),
            });
        }
        for (o, p) in out.iter_mut().zip(dist) {
            *o += w * p;
        }
    }
    Ok(out)
}

/// Per-step audit record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureStepRecord {
    pub token: TokenId,
    pub mixed_entropy: f64,
    /// Probability each expert assigned to the sampled token (null when the
    /// expert was inactive), aligned with the grid.
    pub expert_token_probs: Vec<Option<f64>>,
}

/// Full decoding trace: the gate actually used plus per-step records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureTrace {
    pub alphas: Vec<f64>,
    pub gate: GateWeights,
    pub active_experts: Vec<usize>,
    pub steps: Vec<MixtureStepRecord>,
}

/// Why a mixture generation stopped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MolaceStop {
    MaxTokens,
    EndOfSequence,
    /// A backend error interrupted decoding; the trace up to that point is
    /// preserved and the message records the cause.
    Aborted(String),
}

pub struct MolaceGeneration {
    pub tokens: Vec<TokenId>,
    pub trace: MixtureTrace,
    pub stop: MolaceStop,
}

/// Mixture decoding with the gate computed from the prompt.
///
/// Gate pipeline: robust alignment -> center -> RBF -> finalize, seeded from
/// a stream derived from `params.seed`; token sampling consumes
/// `params.seed` itself, so a gate that is one-hot on alpha = 0 reproduces
/// the base model's sampled trajectory token for token.
pub fn generate_molace<M: SteerableModel>(
    model: &M,
    prompt: &PromptTokens,
    vector: &Arc<SteeringVector>,
    grid: &AlphaGrid,
    gate_config: &GateConfig,
    params: &GenerationParams,
) -> Result<MolaceGeneration> {
    let gate_seed = seed::derive(params.seed, &[0x67617465]);
    let gate = compute_gate(model, prompt, vector, grid, gate_config, gate_seed)?;
    generate_molace_with_gate(model, prompt, vector, grid, &gate, params)
}

/// Mixture decoding under a precomputed gate.
pub fn generate_molace_with_gate<M: SteerableModel>(
    model: &M,
    prompt: &PromptTokens,
    vector: &Arc<SteeringVector>,
    grid: &AlphaGrid,
    gate: &GateWeights,
    params: &GenerationParams,
) -> Result<MolaceGeneration> {
    params.validate()?;
    if gate.weights.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: gate.weights.len(),
        });
    }
    let active: Vec<usize> = gate
        .weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, _)| i)
        .collect();
    let mut experts = ExpertSet::new(model, prompt, vector, grid, Some(active.clone()))?;
    let eos = model.vocab().id_of(crate::model::train::EOS_TOKEN);
    let mut sampler = TokenSampler::new(params.seed);
    let mut tokens = Vec::new();
    let mut trace = MixtureTrace {
        alphas: grid.values().to_vec(),
        gate: gate.clone(),
        active_experts: active,
        steps: Vec::new(),
    };

    for _ in 0..params.max_new_tokens {
        let dists = match experts.expert_step(params.temperature) {
            Ok(d) => d,
            Err(e) => {
                return Ok(MolaceGeneration {
                    tokens,
                    trace,
                    stop: MolaceStop::Aborted(e.to_string()),
                })
            }
        };
        let mixed = mix(&dists, gate, grid)?;
        let filtered = top_p_filter(&mixed, params.top_p);
        let token = sampler.sample(&filtered);
        experts.push_shared(token)?;
        tokens.push(token);
        trace.steps.push(MixtureStepRecord {
            token,
            mixed_entropy: entropy(&mixed),
            expert_token_probs: dists
                .dists
                .iter()
                .map(|d| d.as_ref().map(|p| p[token]))
                .collect(),
        });
        if Some(token) == eos {
            return Ok(MolaceGeneration {
                tokens,
                trace,
                stop: MolaceStop::EndOfSequence,
            });
        }
    }
    Ok(MolaceGeneration {
        tokens,
        trace,
        stop: MolaceStop::MaxTokens,
    })
}

fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}
