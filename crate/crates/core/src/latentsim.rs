//! Exact discrete latent-concept simulator.
//!
//! A [`ConceptSpace`] is a finite mixture: concepts with a prior, per-prompt
//! likelihood weights, and per-concept response distributions over a finite
//! answer alphabet. On top of it sit the marginal response decomposition,
//! posterior mass over tagged concept subsets, the debate update whose skew
//! term multiplies in previous answers' likelihoods, echo-chamber round
//! dynamics, and the majority-vote limit experiment.
//!
//! The debate update is literal: the prior (not a carried posterior) sits
//! inside the sum. Round dynamics instead accumulate the full answer history
//! into the update's conditioning list, which for conditionally independent
//! answers is equivalent to carrying the posterior forward.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One latent concept: prior mass, subset tags, and a response row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Concept {
    pub label: String,
    pub prior: f64,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Distribution over the answer alphabet; omitted answers are zero.
    pub response: BTreeMap<String, f64>,
}

/// Finite latent mixture with named prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptSpace {
    pub concepts: Vec<Concept>,
    /// Per named prompt: positive likelihood weight for each concept label.
    pub prompts: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(skip)]
    answers: Vec<String>,
}

impl ConceptSpace {
    pub fn new(
        concepts: Vec<Concept>,
        prompts: BTreeMap<String, BTreeMap<String, f64>>,
    ) -> Result<Self> {
        let mut space = Self {
            concepts,
            prompts,
            answers: Vec::new(),
        };
        space.validate()?;
        Ok(space)
    }

    /// Checks the invariants and freezes the answer alphabet.
    pub fn validate(&mut self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::Validation("concept space has no concepts".into()));
        }
        let prior_sum: f64 = self.concepts.iter().map(|c| c.prior).sum();
        if (prior_sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("prior sums to {prior_sum}, expected 1")));
        }
        if self.concepts.iter().any(|c| c.prior < 0.0) {
            return Err(Error::Validation("negative prior mass".into()));
        }
        let mut answers: Vec<String> = self
            .concepts
            .iter()
            .flat_map(|c| c.response.keys().cloned())
            .collect();
        answers.sort();
        answers.dedup();
        if answers.is_empty() {
            return Err(Error::Validation("no answers in any response row".into()));
        }
        for c in &self.concepts {
            let row_sum: f64 = c.response.values().sum();
            if (row_sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "response row for {:?} sums to {row_sum}, expected 1",
                    c.label
                )));
            }
            if c.response.values().any(|&p| p < 0.0) {
                return Err(Error::Validation(format!("negative response mass in {:?}", c.label)));
            }
        }
        for (prompt, weights) in &self.prompts {
            for c in &self.concepts {
                match weights.get(&c.label) {
                    Some(&w) if w > 0.0 => {}
                    Some(&w) => {
                        return Err(Error::Validation(format!(
                            "prompt {prompt:?} has non-positive likelihood {w} for {:?}",
                            c.label
                        )))
                    }
                    None => {
                        return Err(Error::Validation(format!(
                            "prompt {prompt:?} missing likelihood for {:?}",
                            c.label
                        )))
                    }
                }
            }
        }
        self.answers = answers;
        Ok(())
    }

    /// The sorted answer alphabet.
    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    fn likelihoods(&self, prompt: &str) -> Result<Vec<f64>> {
        let weights = self
            .prompts
            .get(prompt)
            .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))?;
        Ok(self.concepts.iter().map(|c| weights[&c.label]).collect())
    }

    fn response_prob(&self, concept: usize, answer: &str) -> f64 {
        self.concepts[concept]
            .response
            .get(answer)
            .copied()
            .unwrap_or(0.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut space: Self = serde_json::from_str(&text)?;
        space.validate()?;
        Ok(space)
    }
}

/// Posterior over concepts: `P(theta | x) ∝ P(x | theta) P(theta)`.
pub fn posterior(space: &ConceptSpace, prompt: &str) -> Result<Vec<f64>> {
    let lik = space.likelihoods(prompt)?;
    let mut post: Vec<f64> = space
        .concepts
        .iter()
        .zip(&lik)
        .map(|(c, l)| c.prior * l)
        .collect();
    let total: f64 = post.iter().sum();
    if total <= 0.0 {
        return Err(Error::Validation("posterior has zero total mass".into()));
    }
    for p in post.iter_mut() {
        *p /= total;
    }
    Ok(post)
}

/// Marginal response: `P(z | x) = sum_theta P(z | theta) P(theta | x)`.
pub fn marginal_response(space: &ConceptSpace, prompt: &str) -> Result<BTreeMap<String, f64>> {
    let post = posterior(space, prompt)?;
    Ok(space
        .answers()
        .iter()
        .map(|z| {
            let p = post
                .iter()
                .enumerate()
                .map(|(i, &w)| w * space.response_prob(i, z))
                .sum();
            (z.clone(), p)
        })
        .collect())
}

/// Total posterior mass on the concepts carrying `tag`.
pub fn posterior_mass(space: &ConceptSpace, prompt: &str, tag: &str) -> Result<f64> {
    let known = space
        .concepts
        .iter()
        .any(|c| c.tags.iter().any(|t| t == tag));
    if !known && !tag.is_empty() {
        return Err(Error::UnknownTag(tag.to_string()));
    }
    let post = posterior(space, prompt)?;
    Ok(space
        .concepts
        .iter()
        .zip(&post)
        .filter(|(c, _)| c.tags.iter().any(|t| t == tag))
        .map(|(_, &p)| p)
        .sum())
}

/// Debate update: `P(z | x, Z) ∝ sum_theta P(z|theta) P(x|theta) P(theta)
/// prod_j P(z_j|theta)`, normalized over z. An empty history reduces to the
/// baseline marginal.
pub fn debate_update(
    space: &ConceptSpace,
    prompt: &str,
    prev_responses: &[String],
) -> Result<BTreeMap<String, f64>> {
    let lik = space.likelihoods(prompt)?;
    for r in prev_responses {
        if !space.answers().contains(r) {
            return Err(Error::UnknownAnswer(r.clone()));
        }
    }
    // Per-concept skew: product of previous answers' likelihoods.
    let skew: Vec<f64> = (0..space.concepts.len())
        .map(|i| {
            prev_responses
                .iter()
                .map(|r| space.response_prob(i, r))
                .product()
        })
        .collect();
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for z in space.answers() {
        let mass: f64 = space
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| space.response_prob(i, z) * lik[i] * c.prior * skew[i])
            .sum();
        total += mass;
        out.insert(z.clone(), mass);
    }
    if total <= 0.0 {
        return Err(Error::Validation(
            "debate update has zero total mass (history impossible under every concept)".into(),
        ));
    }
    for v in out.values_mut() {
        *v /= total;
    }
    Ok(out)
}

/// How round dynamics propagate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    /// Sample concrete answers with per-(round, agent) derived seeds.
    Sampled { seed: u64 },
    /// Propagate the exact distribution over cumulative answer-count
    /// histories (histories enter the update only through counts).
    Expected,
}

/// One round of simulated debate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimRound {
    pub round: usize,
    /// The (shared) response distribution agents drew from this round. In
    /// expected mode this is the exact mixture over histories.
    pub distribution: BTreeMap<String, f64>,
    /// Sampled answers per agent; empty in expected mode.
    pub answers: Vec<String>,
}

/// Full history of a simulated debate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DebateSimState {
    pub rounds: Vec<SimRound>,
    pub warnings: Vec<String>,
}

/// State-space cap for exact expected-mode propagation.
const EXPECTED_MODE_MAX_STATES: usize = 50_000;

/// Simulates `rounds` debate rounds with `n_agents` exchangeable agents.
///
/// Round 0 draws from the baseline distribution; every later round applies
/// the debate update conditioned on all answers exchanged so far.
pub fn simulate_debate(
    space: &ConceptSpace,
    prompt: &str,
    n_agents: usize,
    rounds: usize,
    mode: SimMode,
) -> Result<DebateSimState> {
    if n_agents == 0 || rounds == 0 {
        return Err(Error::InvalidParameter("n_agents and rounds must be >= 1".into()));
    }
    match mode {
        SimMode::Sampled { seed: s } => simulate_sampled(space, prompt, n_agents, rounds, s),
        SimMode::Expected => {
            let n_answers = space.answers().len();
            // Count-vector state count grows like C(n*t + a - 1, a - 1).
            let states = count_vector_bound(n_agents * rounds, n_answers);
            if states > EXPECTED_MODE_MAX_STATES {
                let mut out = simulate_sampled(
                    space,
                    prompt,
                    n_agents,
                    rounds,
                    0xfa11_bacc,
                )?;
                out.warnings.push(format!(
                    "expected mode needs ~{states} history states (> {EXPECTED_MODE_MAX_STATES}); \
                     fell back to sampled mode with a fixed seed"
                ));
                return Ok(out);
            }
            simulate_expected(space, prompt, n_agents, rounds)
        }
    }
}

fn count_vector_bound(total: usize, bins: usize) -> usize {
    // C(total + bins - 1, bins - 1), saturating.
    let mut acc: usize = 1;
    for i in 0..bins.saturating_sub(1) {
        acc = acc.saturating_mul(total + i + 1) / (i + 1);
    }
    acc
}

fn simulate_sampled(
    space: &ConceptSpace,
    prompt: &str,
    n_agents: usize,
    rounds: usize,
    seed_value: u64,
) -> Result<DebateSimState> {
    let mut history: Vec<String> = Vec::new();
    let mut out = DebateSimState {
        rounds: Vec::new(),
        warnings: Vec::new(),
    };
    for round in 0..rounds {
        let dist = debate_update(space, prompt, &history)?;
        let mut answers = Vec::with_capacity(n_agents);
        for agent in 0..n_agents {
            let mut rng = ChaCha12Rng::seed_from_u64(seed::derive(
                seed_value,
                &[round as u64, agent as u64],
            ));
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut chosen = space.answers().last().unwrap().clone();
            for (z, &p) in &dist {
                cum += p;
                if u < cum {
                    chosen = z.clone();
                    break;
                }
            }
            answers.push(chosen);
        }
        history.extend(answers.iter().cloned());
        out.rounds.push(SimRound {
            round,
            distribution: dist,
            answers,
        });
    }
    Ok(out)
}

fn simulate_expected(
    space: &ConceptSpace,
    prompt: &str,
    n_agents: usize,
    rounds: usize,
) -> Result<DebateSimState> {
    let answers: Vec<String> = space.answers().to_vec();
    let k = answers.len();
    // Distribution over cumulative answer-count vectors.
    let mut states: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    states.insert(vec![0; k], 1.0);
    let mut out = DebateSimState {
        rounds: Vec::new(),
        warnings: Vec::new(),
    };
    for round in 0..rounds {
        // Mixture response distribution over current history states.
        let mut mix: BTreeMap<String, f64> = answers.iter().map(|a| (a.clone(), 0.0)).collect();
        let mut next: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for (counts, &mass) in &states {
            let history = expand_counts(&answers, counts);
            let dist = debate_update(space, prompt, &history)?;
            for (z, &p) in &dist {
                *mix.get_mut(z).unwrap() += mass * p;
            }
            // The n agents draw i.i.d. from `dist`: multinomial over counts.
            for (delta, prob) in multinomial_outcomes(&answers, &dist, n_agents) {
                let mut new_counts = counts.clone();
                for (c, d) in new_counts.iter_mut().zip(&delta) {
                    *c += d;
                }
                *next.entry(new_counts).or_insert(0.0) += mass * prob;
            }
        }
        states = next;
        out.rounds.push(SimRound {
            round,
            distribution: mix,
            answers: Vec::new(),
        });
    }
    Ok(out)
}

fn expand_counts(answers: &[String], counts: &[usize]) -> Vec<String> {
    answers
        .iter()
        .zip(counts)
        .flat_map(|(a, &c)| std::iter::repeat(a.clone()).take(c))
        .collect()
}

/// All count vectors of `n` i.i.d. draws with their multinomial probability.
fn multinomial_outcomes(
    answers: &[String],
    dist: &BTreeMap<String, f64>,
    n: usize,
) -> Vec<(Vec<usize>, f64)> {
    let probs: Vec<f64> = answers.iter().map(|a| dist[a]).collect();
    let mut out = Vec::new();
    let mut counts = vec![0usize; answers.len()];
    fn recurse(
        probs: &[f64],
        idx: usize,
        remaining: usize,
        coeff: f64,
        counts: &mut Vec<usize>,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if idx == probs.len() - 1 {
            counts[idx] = remaining;
            let p = coeff * probs[idx].powi(remaining as i32);
            out.push((counts.clone(), p));
            counts[idx] = 0;
            return;
        }
        for take in 0..=remaining {
            counts[idx] = take;
            // Binomial factor C(remaining, take).
            let mut c = 1.0;
            for i in 0..take {
                c = c * (remaining - i) as f64 / (i + 1) as f64;
            }
            recurse(
                probs,
                idx + 1,
                remaining - take,
                coeff * c * probs[idx].powi(take as i32),
                counts,
                out,
            );
            counts[idx] = 0;
        }
    }
    recurse(&probs, 0, n, 1.0, &mut counts, &mut out);
    out
}

/// The two-concept echo space: uniform prior and likelihood, one concept
/// favoring the echoed answer at 0.9 and the other at 0.1.
pub fn echo_space() -> ConceptSpace {
    let response = |p_star: f64| {
        BTreeMap::from([
            ("z_star".to_string(), p_star),
            ("other".to_string(), 1.0 - p_star),
        ])
    };
    ConceptSpace::new(
        vec![
            Concept {
                label: "theta1".into(),
                prior: 0.5,
                tags: vec!["favors_echo".into()],
                response: response(0.9),
            },
            Concept {
                label: "theta2".into(),
                prior: 0.5,
                tags: vec![],
                response: response(0.1),
            },
        ],
        BTreeMap::from([(
            "x".to_string(),
            BTreeMap::from([("theta1".to_string(), 1.0), ("theta2".to_string(), 1.0)]),
        )]),
    )
    .expect("valid space")
}

/// Echo-chamber trajectory: both of `n_agents` agents repeat `answer` every
/// round; returns P(answer) before any echo and after each round.
pub fn echo_trajectory(
    space: &ConceptSpace,
    prompt: &str,
    answer: &str,
    n_agents: usize,
    rounds: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rounds + 1);
    let mut history = Vec::new();
    for _ in 0..=rounds {
        let dist = debate_update(space, prompt, &history)?;
        out.push(
            dist.get(answer)
                .copied()
                .ok_or_else(|| Error::UnknownAnswer(answer.to_string()))?,
        );
        history.extend(std::iter::repeat(answer.to_string()).take(n_agents));
    }
    Ok(out)
}

/// Samples `k` i.i.d. answers per trial and returns how often the
/// distribution's modal answer wins the majority (plurality with
/// lexicographic tie-break).
pub fn majority_limit(
    answer_dist: &BTreeMap<String, f64>,
    k: usize,
    trials: usize,
    seed_value: u64,
) -> Result<f64> {
    if k == 0 || trials == 0 {
        return Err(Error::InvalidParameter("k and trials must be >= 1".into()));
    }
    let total: f64 = answer_dist.values().sum();
    if (total - 1.0).abs() > 1e-9 || answer_dist.values().any(|&p| p < 0.0) {
        return Err(Error::InvalidParameter("answer_dist is not a distribution".into()));
    }
    // Modal answer; lexicographic tie-break comes free from BTreeMap order.
    let modal = answer_dist
        .iter()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
        .map(|(z, _)| z.clone())
        .ok_or_else(|| Error::InvalidParameter("empty answer distribution".into()))?;
    let answers: Vec<&String> = answer_dist.keys().collect();
    let probs: Vec<f64> = answer_dist.values().copied().collect();
    let mut wins = 0usize;
    for trial in 0..trials {
        let mut rng = ChaCha12Rng::seed_from_u64(seed::derive(seed_value, &[trial as u64]));
        let mut counts = vec![0usize; answers.len()];
        for _ in 0..k {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut idx = answers.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    idx = i;
                    break;
                }
            }
            counts[idx] += 1;
        }
        // Plurality; ties resolve to the lexicographically smallest answer,
        // which is the first maximum in key order.
        let winner = answers
            .iter()
            .zip(&counts)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(z, _)| (*z).clone())
            .unwrap();
        if winner == modal {
            wins += 1;
        }
    }
    Ok(wins as f64 / trials as f64)
}
