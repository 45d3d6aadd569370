//! Text-level generation over the token-level backends.
//!
//! [`TextCodec`] maps prompt text onto a backend's vocab: exact token
//! matches, an optional keyword table (for stance-marker detection on the
//! analytic backend), optional hashing of unknown words into filler tokens,
//! and an optional anchor window for backends with rigid question templates.
//! [`Generator`] is the text -> text contract the debate harness and the
//! evaluation runner consume; [`QaGenerator`] implements it over a codec,
//! always emitting a trailing `Final Answer:` line. Choice prompts (lines
//! starting with `(A)`, `(B)`, ...) are answered with a letter derived
//! deterministically from the sampled answer token, which is chance-level
//! for backends that cannot read the options.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gate::{AlphaGrid, GateConfig};
use crate::mixture::{generate_molace, MolaceStop};
use crate::model::analytic::AnalyticConceptLM;
use crate::model::sampling::generate;
use crate::model::{GenerationParams, InterventionSpec, PromptTokens, SteerableModel, TokenId};
use crate::steering::SteeringVector;

/// Deterministic-under-seed text generation. Callers pass decode params;
/// adapters may clamp them (e.g. to a context window) but must stay
/// deterministic for identical inputs.
pub trait Generator: Send + Sync {
    fn generate_text(&self, prompt: &str, params: &GenerationParams, seed: u64) -> Result<String>;
    /// Short label recorded in artifacts.
    fn name(&self) -> String;
}

/// Text <-> token mapping for one backend.
pub struct TextCodec<M: SteerableModel> {
    model: Arc<M>,
    /// Lowercased word -> vocab token substitutions, checked first.
    keyword_map: Vec<(String, String)>,
    /// Filler tokens unknown words hash into; empty drops them.
    hash_targets: Vec<TokenId>,
    /// Slice encoded prompts from the last `anchor.0` through the first
    /// following `anchor.1`.
    anchor: Option<(TokenId, TokenId)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn sanitize_word(w: &str) -> &str {
    w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
}

impl<M: SteerableModel> TextCodec<M> {
    pub fn new(model: Arc<M>) -> Self {
        Self {
            model,
            keyword_map: Vec::new(),
            hash_targets: Vec::new(),
            anchor: None,
        }
    }

    pub fn model(&self) -> &Arc<M> {
        &self.model
    }

    pub fn with_keyword_map<I, A, B>(mut self, map: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        self.keyword_map = map
            .into_iter()
            .map(|(k, v)| (k.into().to_lowercase(), v.into()))
            .collect();
        self
    }

    /// Unknown words hash into the given filler tokens instead of dropping.
    pub fn with_unknown_hashing(mut self, targets: Vec<TokenId>) -> Self {
        self.hash_targets = targets;
        self
    }

    pub fn with_anchor(mut self, start: &str, end: &str) -> Self {
        let vocab = self.model.vocab();
        if let (Some(s), Some(e)) = (vocab.id_of(start), vocab.id_of(end)) {
            self.anchor = Some((s, e));
        }
        self
    }

    fn word_to_token(&self, word: &str) -> Option<TokenId> {
        let vocab = self.model.vocab();
        let clean = sanitize_word(word);
        if clean.is_empty() {
            return None;
        }
        let lower = clean.to_lowercase();
        if let Some((_, tok)) = self.keyword_map.iter().find(|(k, _)| *k == lower) {
            return vocab.id_of(tok);
        }
        if let Some(id) = vocab.id_of(word).or_else(|| vocab.id_of(clean)) {
            return Some(id);
        }
        if self.hash_targets.is_empty() {
            None
        } else {
            let idx = fnv1a(lower.as_bytes()) as usize % self.hash_targets.len();
            Some(self.hash_targets[idx])
        }
    }

    /// Tokenizes prompt text by whitespace, keeping at most
    /// `context - reserve` trailing tokens.
    pub fn encode(&self, text: &str, reserve: usize) -> Result<PromptTokens> {
        let mut ids: Vec<TokenId> = text
            .split_whitespace()
            .filter_map(|w| self.word_to_token(w))
            .collect();
        if let Some((start, end)) = self.anchor {
            if let Some(last_start) = ids.iter().rposition(|&t| t == start) {
                let tail_end = ids[last_start..]
                    .iter()
                    .position(|&t| t == end)
                    .map(|off| last_start + off);
                ids = match tail_end {
                    Some(e) => ids[last_start..=e].to_vec(),
                    None => ids[last_start..].to_vec(),
                };
            }
        }
        let budget = self.model.context_window().saturating_sub(reserve).max(1);
        if ids.len() > budget {
            ids = ids.split_off(ids.len() - budget);
        }
        if ids.is_empty() {
            return Err(Error::Generator(format!(
                "no in-vocab tokens in prompt {text:?}"
            )));
        }
        PromptTokens::new(ids)
    }

    /// Joins tokens, skipping structural `<...>` tokens.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let vocab = self.model.vocab();
        tokens
            .iter()
            .filter_map(|&t| vocab.token_of(t))
            .filter(|t| !t.starts_with('<'))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Stance keywords for the analytic backend's marker detection. The last
/// keyword occurrence in a prompt decides the stance.
pub fn analytic_keyword_map() -> Vec<(&'static str, &'static str)> {
    use crate::model::analytic::{CHALLENGE_MARKER, SUPPORT_MARKER};
    let mut map = Vec::new();
    for w in ["supports", "support", "supporting", "affirm", "affirms", "must", "proven", "confirm", "confirms"] {
        map.push((w, SUPPORT_MARKER));
    }
    for w in [
        "challenges", "challenge", "challenging", "not", "isn't", "aren't", "hasn't", "shouldn't",
        "doesn't", "didn't", "wasn't", "weren't", "against", "never",
    ] {
        map.push((w, CHALLENGE_MARKER));
    }
    map
}

/// A ready-made codec for the analytic backend: stance keywords plus filler
/// hashing so arbitrary English prompts encode totally.
pub fn analytic_codec(model: Arc<AnalyticConceptLM>) -> TextCodec<AnalyticConceptLM> {
    let fillers: Vec<TokenId> = (0..crate::model::analytic::FILLER_COUNT)
        .map(|i| model.vocab().id_of(&format!("w{i}")).expect("filler token"))
        .collect();
    TextCodec::new(model)
        .with_keyword_map(analytic_keyword_map())
        .with_unknown_hashing(fillers)
}

/// Decoding strategy of a [`QaGenerator`].
#[derive(Debug, Clone)]
pub enum DecodeMode {
    Base,
    Steered { alpha: f64 },
    Molace { gate: GateConfig },
}

/// Adapts a steerable backend into the text contract.
pub struct QaGenerator<M: SteerableModel> {
    codec: TextCodec<M>,
    vector: Option<Arc<SteeringVector>>,
    grid: AlphaGrid,
    mode: DecodeMode,
    /// Upper bound on generated tokens regardless of caller params.
    max_new_tokens: usize,
}

impl<M: SteerableModel> QaGenerator<M> {
    pub fn new(
        model: Arc<M>,
        vector: Option<Arc<SteeringVector>>,
        grid: AlphaGrid,
        mode: DecodeMode,
        max_new_tokens: usize,
    ) -> Result<Self> {
        Self::with_codec(TextCodec::new(model), vector, grid, mode, max_new_tokens)
    }

    pub fn with_codec(
        codec: TextCodec<M>,
        vector: Option<Arc<SteeringVector>>,
        grid: AlphaGrid,
        mode: DecodeMode,
        max_new_tokens: usize,
    ) -> Result<Self> {
        match &mode {
            DecodeMode::Base => {}
            DecodeMode::Steered { .. } | DecodeMode::Molace { .. } => {
                if vector.is_none() {
                    return Err(Error::InvalidParameter(
                        "steered and mixture decoding need a steering vector".into(),
                    ));
                }
            }
        }
        if max_new_tokens == 0 {
            return Err(Error::InvalidParameter("max_new_tokens must be > 0".into()));
        }
        Ok(Self {
            codec,
            vector,
            grid,
            mode,
            max_new_tokens,
        })
    }

    /// Restricts encoded prompts to the `start ... end` token window.
    pub fn with_question_anchor(mut self, start: &str, end: &str) -> Self {
        self.codec = self.codec.with_anchor(start, end);
        self
    }

    fn clamp_tokens(&self, requested: usize) -> usize {
        requested.min(self.max_new_tokens)
    }

    fn generate_tokens(
        &self,
        prompt: &PromptTokens,
        caller: &GenerationParams,
        seed: u64,
    ) -> Result<Vec<TokenId>> {
        let params = GenerationParams {
            seed,
            max_new_tokens: self.clamp_tokens(caller.max_new_tokens),
            ..caller.clone()
        };
        let model = self.codec.model().as_ref();
        match &self.mode {
            DecodeMode::Base => Ok(generate(model, prompt, &params, None)?.0),
            DecodeMode::Steered { alpha } => {
                let vector = self.vector.as_ref().expect("checked at construction");
                let spec = InterventionSpec::new(*alpha, Arc::clone(vector));
                Ok(generate(model, prompt, &params, Some(&spec))?.0)
            }
            DecodeMode::Molace { gate } => {
                let vector = self.vector.as_ref().expect("checked at construction");
                let out = generate_molace(model, prompt, vector, &self.grid, gate, &params)?;
                if let MolaceStop::Aborted(msg) = &out.stop {
                    return Err(Error::Generator(msg.clone()));
                }
                Ok(out.tokens)
            }
        }
    }
}

/// Option labels present in a rendered choice prompt, in order.
fn detect_choice_labels(prompt: &str) -> Vec<char> {
    let mut labels = Vec::new();
    for line in prompt.lines() {
        let t = line.trim_start();
        if t.len() >= 3 && t.starts_with('(') && t.chars().nth(2) == Some(')') {
            if let Some(c) = t.chars().nth(1) {
                if ('A'..='D').contains(&c) && !labels.contains(&c) {
                    labels.push(c);
                }
            }
        }
    }
    labels
}

impl<M: SteerableModel + Send + Sync> Generator for QaGenerator<M> {
    fn generate_text(&self, prompt: &str, params: &GenerationParams, seed: u64) -> Result<String> {
        let max_new = self.clamp_tokens(params.max_new_tokens);
        let encoded = self.codec.encode(prompt, max_new)?;
        let tokens = self.generate_tokens(&encoded, params, seed)?;
        let labels = detect_choice_labels(prompt);
        if labels.is_empty() {
            let text = self.codec.decode(&tokens);
            Ok(format!("{text}\nFinal Answer: {text}"))
        } else {
            // Map the first sampled token onto an option letter. The mapping
            // is stable but content-blind for backends without option
            // reading, which makes choice answers chance-level by design.
            let first = tokens.first().copied().unwrap_or(0);
            let letter = labels[first % labels.len()];
            Ok(format!("Final Answer: ({letter})"))
        }
    }

    fn name(&self) -> String {
        let mode = match &self.mode {
            DecodeMode::Base => "base".to_string(),
            DecodeMode::Steered { alpha } => format!("steered(alpha={alpha})"),
            DecodeMode::Molace { .. } => "molace".to_string(),
        };
        format!("{}/{}", self.codec.model().backend_id(), mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::analytic::{AnalyticConceptLM, CHALLENGE_MARKER, SUPPORT_MARKER};

    fn oracle() -> Arc<AnalyticConceptLM> {
        Arc::new(AnalyticConceptLM::default_oracle(8))
    }

    fn oracle_vector(m: &AnalyticConceptLM) -> Arc<SteeringVector> {
        Arc::new(SteeringVector {
            layer: 0,
            direction: m.planted_direction().to_vec(),
            raw_norm: 1.0,
            pair_count: 1,
            sign_convention: "plus_minus".into(),
        })
    }

    fn oracle_gen(mode: DecodeMode) -> QaGenerator<AnalyticConceptLM> {
        let m = oracle();
        let v = oracle_vector(&m);
        QaGenerator::with_codec(analytic_codec(m), Some(v), AlphaGrid::default(), mode, 1).unwrap()
    }

    fn params() -> GenerationParams {
        GenerationParams {
            temperature: 0.7,
            top_p: 0.9,
            max_new_tokens: 4,
            seed: 0,
        }
    }

    #[test]
    fn analytic_codec_detects_stance_keywords() {
        let m = oracle();
        let codec = analytic_codec(Arc::clone(&m));
        let support = codec
            .encode("What evidence supports the view that MSG is harmful?", 1)
            .unwrap();
        assert!(support.ids.contains(&m.vocab().id_of(SUPPORT_MARKER).unwrap()));
        let challenge = codec
            .encode("What evidence challenges the view that MSG is harmful?", 1)
            .unwrap();
        assert!(challenge.ids.contains(&m.vocab().id_of(CHALLENGE_MARKER).unwrap()));
        let negated = codec.encode("Why aren't veins truly blue?", 1).unwrap();
        assert!(negated.ids.contains(&m.vocab().id_of(CHALLENGE_MARKER).unwrap()));
    }

    #[test]
    fn analytic_codec_encodes_arbitrary_english() {
        let codec = analytic_codec(oracle());
        let p = codec.encode("Where did fortune cookies originate?", 1).unwrap();
        assert!(!p.ids.is_empty());
    }

    #[test]
    fn open_prompts_get_final_answer_line() {
        let g = oracle_gen(DecodeMode::Base);
        let out = g
            .generate_text("What evidence supports the w0 view?", &params(), 3)
            .unwrap();
        assert!(out.contains("Final Answer:"));
    }

    #[test]
    fn choice_prompts_get_letter_answers() {
        let g = oracle_gen(DecodeMode::Base);
        let out = g
            .generate_text("w0 SUPPORT question\n(A) first option\n(B) second option", &params(), 5)
            .unwrap();
        assert!(out.starts_with("Final Answer: ("));
        let letter = out.chars().nth("Final Answer: (".len()).unwrap();
        assert!(letter == 'A' || letter == 'B');
    }

    #[test]
    fn same_seed_same_text() {
        let g = oracle_gen(DecodeMode::Molace {
            gate: GateConfig::default(),
        });
        let a = g.generate_text("w1 CHALLENGE w2", &params(), 11).unwrap();
        let b = g.generate_text("w1 CHALLENGE w2", &params(), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn codec_without_hashing_errors_on_oov() {
        let g = QaGenerator::new(oracle(), None, AlphaGrid::default(), DecodeMode::Base, 1).unwrap();
        assert!(g.generate_text("zzz qqq", &params(), 1).is_err());
    }

    #[test]
    fn anchor_window_keeps_question_span() {
        use crate::model::train::{ToyCorpus, ToyCorpusConfig};
        let corpus = ToyCorpus::new(ToyCorpusConfig::default()).unwrap();
        let model = Arc::new(
            crate::model::tiny::TinyTransformerLM::init(
                crate::model::tiny::TinyConfig {
                    layers: 2,
                    d_model: 16,
                    heads: 2,
                    d_ff: 32,
                    context: 16,
                },
                corpus.vocab().clone(),
                3,
            )
            .unwrap(),
        );
        let codec = TextCodec::new(model).with_anchor("Q", "A");
        let text = "Answer the question.\nQuestion: Q t3 SUPPORT A\nPeer answers:\n1. YES\n2. NO\n";
        let encoded = codec.encode(text, 1).unwrap();
        let tokens: Vec<&str> = encoded
            .ids
            .iter()
            .map(|&t| corpus.vocab().token_of(t).unwrap())
            .collect();
        assert_eq!(tokens, vec!["Q", "t3", "SUPPORT", "A"]);
    }
}
