//! Alpha-sweep and robustness experiments on the toy model.
//!
//! These drive the inference-method comparisons at desk scale: per-alpha
//! accuracy over held-out biased prompts, the coverage statistics, base vs
//! mixture decoding, and cross-bias robustness with and without debate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::debate::embed::HashEmbedder;
use crate::debate::templates::TemplateSet;
use crate::debate::{run_debate, DebateConfig};
use crate::error::Result;
use crate::eval::{alpha_coverage, AlphaCoverage};
use crate::gate::{AlphaGrid, GateConfig};
use crate::mixture::generate_molace;
use crate::model::sampling::generate;
use crate::model::train::{Marker, ToyCorpus, ToyEvalItem};
use crate::model::{GenerationParams, InterventionSpec, TokenId};
use crate::model::tiny::TinyTransformerLM;
use crate::seed;
use crate::steering::{extract_caa, ContrastPairSet, SteeringVector};
use crate::textgen::{DecodeMode, QaGenerator};

/// Builds contrastive (support, challenge) prompt pairs over seeded random
/// topics.
pub fn toy_contrast_pairs(
    corpus: &ToyCorpus,
    n_pairs: usize,
    layer: usize,
    seed_value: u64,
) -> ContrastPairSet {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed_value);
    let pairs = (0..n_pairs)
        .map(|_| {
            let topic = rng.gen_range(0..corpus.config().topics);
            (
                corpus.prompt(topic, Marker::Support),
                corpus.prompt(topic, Marker::Challenge),
            )
        })
        .collect();
    ContrastPairSet::new(pairs, layer).expect("n_pairs >= 1")
}

/// Extracts the steering vector from seeded toy pairs at a layer.
pub fn extract_toy_vector(
    model: &TinyTransformerLM,
    corpus: &ToyCorpus,
    n_pairs: usize,
    layer: usize,
    seed_value: u64,
) -> Result<SteeringVector> {
    extract_caa(model, &toy_contrast_pairs(corpus, n_pairs, layer, seed_value))
}

/// Settings for the alpha-sweep experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub grid: AlphaGrid,
    pub gate: GateConfig,
    pub params: GenerationParams,
    pub items: usize,
    pub marker: Marker,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: AlphaGrid::default(),
            gate: GateConfig::default(),
            params: GenerationParams {
                temperature: 0.7,
                top_p: 0.9,
                max_new_tokens: 1,
                seed: 0,
            },
            items: 500,
            marker: Marker::Support,
            seed: 17,
        }
    }
}

/// Everything the sweep measures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub coverage: AlphaCoverage,
    pub base_accuracy: f64,
    pub molace_accuracy: f64,
    pub base_myth_rate: f64,
    pub molace_myth_rate: f64,
    pub items: usize,
}

impl SweepOutcome {
    pub fn best_alpha_accuracy(&self) -> f64 {
        self.coverage
            .per_alpha_accuracy
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }

    pub fn alpha_accuracy_spread(&self) -> f64 {
        let min = self
            .coverage
            .per_alpha_accuracy
            .iter()
            .copied()
            .fold(1.0, f64::min);
        self.best_alpha_accuracy() - min
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,key,value\n");
        for (a, acc) in self.coverage.alphas.iter().zip(&self.coverage.per_alpha_accuracy) {
            out.push_str(&format!("per_alpha_accuracy,{a},{acc}\n"));
        }
        out.push_str(&format!("coverage,,{}\n", self.coverage.coverage));
        for (count, n) in &self.coverage.count_distribution {
            out.push_str(&format!("correct_alpha_count,{count},{n}\n"));
        }
        out.push_str(&format!("base_accuracy,,{}\n", self.base_accuracy));
        out.push_str(&format!("molace_accuracy,,{}\n", self.molace_accuracy));
        out.push_str(&format!("base_myth_rate,,{}\n", self.base_myth_rate));
        out.push_str(&format!("molace_myth_rate,,{}\n", self.molace_myth_rate));
        out
    }
}

fn first_token_answer(tokens: &[TokenId]) -> Option<TokenId> {
    tokens.first().copied()
}

/// Runs the per-alpha, base, and mixture comparisons over held-out biased
/// prompts. One answer token is sampled per (item, method) with derived
/// seeds; correctness is measured against the corpus truth assignment.
pub fn alpha_sweep(
    model: &TinyTransformerLM,
    corpus: &ToyCorpus,
    vector: &Arc<SteeringVector>,
    cfg: &SweepConfig,
) -> Result<SweepOutcome> {
    let items = corpus.eval_set(cfg.items, cfg.marker, seed::derive(cfg.seed, &[0x6974656d]));
    let alphas = cfg.grid.values().to_vec();
    let mut matrix: Vec<Vec<bool>> = Vec::with_capacity(items.len());
    let mut base_correct = 0usize;
    let mut base_myth = 0usize;
    let mut molace_correct = 0usize;
    let mut molace_myth = 0usize;

    for (idx, item) in items.iter().enumerate() {
        let mut row = Vec::with_capacity(alphas.len());
        for (ai, &alpha) in alphas.iter().enumerate() {
            let params = GenerationParams {
                seed: seed::derive(cfg.seed, &[idx as u64, ai as u64]),
                ..cfg.params.clone()
            };
            let answer = if alpha == 0.0 {
                let (tokens, _) = generate(model, &item.prompt, &params, None)?;
                first_token_answer(&tokens)
            } else {
                let spec = InterventionSpec::new(alpha, Arc::clone(vector));
                let (tokens, _) = generate(model, &item.prompt, &params, Some(&spec))?;
                first_token_answer(&tokens)
            };
            row.push(answer == Some(item.truth));
        }
        matrix.push(row);

        let params = GenerationParams {
            seed: seed::derive(cfg.seed, &[idx as u64, 0x62617365]),
            ..cfg.params.clone()
        };
        let (tokens, _) = generate(model, &item.prompt, &params, None)?;
        match first_token_answer(&tokens) {
            t if t == Some(item.truth) => base_correct += 1,
            t if t == Some(item.myth) => base_myth += 1,
            _ => {}
        }

        let params = GenerationParams {
            seed: seed::derive(cfg.seed, &[idx as u64, 0x6d6f65]),
            ..cfg.params.clone()
        };
        let out = generate_molace(model, &item.prompt, vector, &cfg.grid, &cfg.gate, &params)?;
        match first_token_answer(&out.tokens) {
            t if t == Some(item.truth) => molace_correct += 1,
            t if t == Some(item.myth) => molace_myth += 1,
            _ => {}
        }
    }

    let n = items.len() as f64;
    Ok(SweepOutcome {
        coverage: alpha_coverage(&alphas, &matrix)?,
        base_accuracy: base_correct as f64 / n,
        molace_accuracy: molace_correct as f64 / n,
        base_myth_rate: base_myth as f64 / n,
        molace_myth_rate: molace_myth as f64 / n,
        items: items.len(),
    })
}

/// Cross-bias robustness: the fraction of items answered correctly under
/// every biased variant (support and challenge), for mixture decoding alone
/// and with a debate layer on top.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessOutcome {
    pub molace_all_correct: f64,
    pub debate_all_correct: f64,
    pub items: usize,
}

pub fn cross_bias_robustness(
    model: &Arc<TinyTransformerLM>,
    corpus: &ToyCorpus,
    vector: &Arc<SteeringVector>,
    grid: &AlphaGrid,
    gate: &GateConfig,
    params: &GenerationParams,
    debate_cfg: &DebateConfig,
    n_items: usize,
    seed_value: u64,
) -> Result<RobustnessOutcome> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed::derive(seed_value, &[0x7470]));
    let topics: Vec<usize> = (0..n_items)
        .map(|_| rng.gen_range(0..corpus.config().topics))
        .collect();

    let generator = QaGenerator::new(
        Arc::clone(model),
        Some(Arc::clone(vector)),
        grid.clone(),
        DecodeMode::Molace { gate: gate.clone() },
        params.max_new_tokens,
    )?
    .with_question_anchor(
        crate::model::train::QUESTION_TOKEN,
        crate::model::train::ANSWER_SEP_TOKEN,
    );
    let templates = TemplateSet::default();
    let embedder = HashEmbedder::default();

    let mut molace_all = 0usize;
    let mut debate_all = 0usize;
    for (idx, &topic) in topics.iter().enumerate() {
        let truth_text = corpus
            .vocab()
            .token_of(corpus.true_answer(topic))
            .unwrap()
            .to_lowercase();
        let mut molace_ok = true;
        let mut debate_ok = true;
        for (vi, marker) in [Marker::Support, Marker::Challenge].into_iter().enumerate() {
            let item = ToyEvalItem {
                topic,
                marker,
                prompt: corpus.prompt(topic, marker),
                truth: corpus.true_answer(topic),
                myth: corpus.myth_answer(topic),
            };
            // Mixture decoding alone.
            let gen_params = GenerationParams {
                seed: seed::derive(seed_value, &[idx as u64, vi as u64, 0x616c6f6e65]),
                ..params.clone()
            };
            let out = generate_molace(model.as_ref(), &item.prompt, vector, grid, gate, &gen_params)?;
            if first_token_answer(&out.tokens) != Some(item.truth) {
                molace_ok = false;
            }
            // With the debate layer.
            let question = prompt_text(corpus, topic, marker);
            let transcript = run_debate(
                &generator,
                &question,
                debate_cfg,
                &templates,
                &embedder,
                seed::derive(seed_value, &[idx as u64, vi as u64, 0x646562]),
            )
            .map_err(|e| crate::error::Error::Generator(e.to_string()))?;
            if transcript.final_answer.as_deref() != Some(truth_text.as_str()) {
                debate_ok = false;
            }
        }
        if molace_ok {
            molace_all += 1;
        }
        if debate_ok {
            debate_all += 1;
        }
    }
    Ok(RobustnessOutcome {
        molace_all_correct: molace_all as f64 / topics.len() as f64,
        debate_all_correct: debate_all as f64 / topics.len() as f64,
        items: topics.len(),
    })
}

/// The toy question rendered as text for the text-level generators.
pub fn prompt_text(corpus: &ToyCorpus, topic: usize, marker: Marker) -> String {
    corpus
        .prompt(topic, marker)
        .ids
        .iter()
        .map(|&id| corpus.vocab().token_of(id).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrast_pairs_are_support_vs_challenge_on_shared_topics() {
        let corpus = ToyCorpus::new(Default::default()).unwrap();
        let pairs = toy_contrast_pairs(&corpus, 5, 2, 9);
        assert_eq!(pairs.pairs.len(), 5);
        assert_eq!(pairs.layer, 2);
        let support = corpus.vocab().id_of("SUPPORT").unwrap();
        let challenge = corpus.vocab().id_of("CHALLENGE").unwrap();
        for (plus, minus) in &pairs.pairs {
            assert_eq!(plus.ids[1], minus.ids[1], "same topic");
            assert_eq!(plus.ids[2], support);
            assert_eq!(minus.ids[2], challenge);
        }
    }

    #[test]
    fn prompt_text_round_trips_tokens() {
        let corpus = ToyCorpus::new(Default::default()).unwrap();
        let text = prompt_text(&corpus, 3, Marker::Support);
        assert_eq!(text, "Q t3 SUPPORT A");
    }
}
