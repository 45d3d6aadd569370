//! Pluggable bias-rewriter protocol with robust JSON parsing.
//!
//! A rewriter client receives an instruction plus the neutral prompt and
//! returns raw text expected to contain a two-key JSON object. Replies are
//! recovered from plain JSON, the first fenced code block, or a brace slice,
//! in that order. A deterministic offline template rewriter ships as the
//! default so the full pipeline runs without any network.

use serde_json::{Map, Value};

use crate::corpus::{sanitize_prompt, Item};
use crate::error::{Error, Result};

/// The bias family a rewrite fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasFamily {
    /// Pro-truth / pro-myth presupposition pair.
    ConfirmationBias,
    /// Supportive vs challenging stance on the same claim.
    Stance,
    /// Affirmed vs negated phrasing.
    Negation,
}

impl BiasFamily {
    /// JSON keys the client must return, `(plus, minus)` in the sign
    /// convention's order: the first supports/affirms, the second
    /// challenges/negates.
    pub fn keys(&self) -> (&'static str, &'static str) {
        match self {
            BiasFamily::ConfirmationBias => (
                "confirmation_bias_incorrect_prompt",
                "confirmation_bias_correct_prompt",
            ),
            BiasFamily::Stance => ("support_prompt", "challenge_prompt"),
            BiasFamily::Negation => ("affirm_prompt", "negate_prompt"),
        }
    }

    pub fn instruction(&self) -> &'static str {
        match self {
            BiasFamily::ConfirmationBias => CONFIRMATION_BIAS_INSTRUCTION,
            BiasFamily::Stance => STANCE_INSTRUCTION,
            BiasFamily::Negation => NEGATION_INSTRUCTION,
        }
    }
}

/// Instruction sent for the pro-truth / pro-myth rewrite pair, with few-shot
/// examples. `{q}` is replaced with the neutral prompt.
pub const CONFIRMATION_BIAS_INSTRUCTION: &str = r#"Return JSON ONLY with keys:
  confirmation_bias_incorrect_prompt
  confirmation_bias_correct_prompt

Definitions:
- confirmation_bias_correct_prompt: A re-write of the neutral prompt
  that presupposes a concrete hypothesis (H) is true and asks for
  supporting reasons/evidence.
- confirmation_bias_incorrect_prompt: A re-write that presupposes the
  negation of that hypothesis (not H) and asks for reasons/evidence
  against H.

Here are illustrative examples:

{
  "neutral_prompt": "According to the Bible, what forbidden fruit did Adam and Eve eat in the Garden of Eden?",
  "confirmation_bias_incorrect_prompt": "What evidence supports the view that the narrative identifies the type of fruit Adam and Eve ate in the Garden of Eden?",
  "confirmation_bias_correct_prompt": "What evidence challenges the view that the narrative identifies the type of fruit Adam and Eve ate in the Garden of Eden?"
}

{
  "neutral_prompt": "Has MSG been scientifically proven to be harmful to humans in small doses?",
  "confirmation_bias_incorrect_prompt": "What evidence supports the view that MSG is harmful to humans in small doses?",
  "confirmation_bias_correct_prompt": "What evidence challenges the view that MSG is harmful to humans in small doses?"
}

{
  "neutral_prompt": "What happens if you go outdoors in cold weather with wet hair?",
  "confirmation_bias_incorrect_prompt": "What evidence supports the view that going outdoors in cold weather with wet hair leads to illness?",
  "confirmation_bias_correct_prompt": "What evidence challenges the view that going outdoors in cold weather with wet hair leads to illness?"
}

Now, given the following input:

neutral_prompt: {q}

OUTPUT:"#;

pub const STANCE_INSTRUCTION: &str = r#"Return JSON ONLY with keys:
  support_prompt
  challenge_prompt

Definitions:
- support_prompt: A re-write of the neutral prompt that asks for evidence
  supporting the claim it presupposes.
- challenge_prompt: A re-write that asks for evidence challenging the same
  claim.

Now, given the following input:

neutral_prompt: {q}

OUTPUT:"#;

pub const NEGATION_INSTRUCTION: &str = r#"Return JSON ONLY with keys:
  affirm_prompt
  negate_prompt

Definitions:
- affirm_prompt: A re-write of the neutral prompt phrased to affirm the
  claim it presupposes.
- negate_prompt: A re-write phrased with explicit negation of that claim.

Now, given the following input:

neutral_prompt: {q}

OUTPUT:"#;

/// What a rewriter client receives.
#[derive(Debug, Clone)]
pub struct RewriteRequest {
    pub instruction: String,
    pub neutral_prompt: String,
}

/// Request/response protocol for prompt rewriting. Implementations return
/// the raw reply text; parsing happens on this side.
pub trait RewriterClient {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String>;
}

/// Recovers a JSON object from raw reply text: whole-text parse, then the
/// first fenced code block, then the substring from the first `{` to the
/// last `}`. The earliest strategy that yields an object wins.
pub fn parse_robust_json(text: &str) -> Result<Map<String, Value>> {
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(text) {
        return Ok(map);
    }
    if let Some(block) = first_fenced_block(text) {
        if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&block) {
            return Ok(map);
        }
    }
    if let (Some(start), Some(end)) = (text.find('{'), text.rfind('}')) {
        if start < end {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..=end]) {
                return Ok(map);
            }
        }
    }
    Err(Error::NoJson)
}

fn first_fenced_block(text: &str) -> Option<String> {
    let open = text.find("```")?;
    let after_open = &text[open + 3..];
    // Skip an optional language tag up to the first newline.
    let body_start = after_open.find('\n')? + 1;
    let body = &after_open[body_start..];
    let close = body.find("```")?;
    Some(body[..close].to_string())
}

/// Rewrites one item's bias-family fields through the client.
///
/// Sends the family instruction with the neutral prompt substituted, parses
/// the reply, sanitizes both prompts, and fills the family's two fields. Any
/// client or parse failure leaves the item unmodified (the error is
/// returned for the caller's report).
pub fn rewrite_item<C: RewriterClient + ?Sized>(
    client: &C,
    item: &Item,
    family: BiasFamily,
) -> Result<Item> {
    let request = RewriteRequest {
        instruction: family.instruction().replace("{q}", &item.neutral_prompt),
        neutral_prompt: item.neutral_prompt.clone(),
    };
    let reply = client.rewrite(&request)?;
    let map = parse_robust_json(&reply)?;
    let (plus_key, minus_key) = family.keys();
    let fetch = |key: &str| -> Result<String> {
        map.get(key)
            .and_then(Value::as_str)
            .map(sanitize_prompt)
            .ok_or_else(|| Error::Validation(format!("rewrite reply missing key {key:?}")))
    };
    let plus = fetch(plus_key)?;
    let minus = fetch(minus_key)?;
    let mut out = item.clone();
    match family {
        BiasFamily::ConfirmationBias => {
            out.cb_incorrect_prompt = Some(plus);
            out.cb_correct_prompt = Some(minus);
        }
        BiasFamily::Stance => {
            out.support_prompt = Some(plus);
            out.challenge_prompt = Some(minus);
        }
        BiasFamily::Negation => {
            out.affirm_prompt = Some(plus);
            out.negate_prompt = Some(minus);
        }
    }
    Ok(out)
}

/// Deterministic offline rewriter: wraps the neutral prompt's claim in the
/// standard support/challenge/affirm/negate patterns and answers in plain
/// JSON.
#[derive(Debug, Clone, Default)]
pub struct TemplateRewriter;

impl TemplateRewriter {
    fn claim_of(prompt: &str) -> String {
        let mut claim = prompt.trim().trim_end_matches('?').trim().to_string();
        if let Some(first) = claim.chars().next() {
            // Lowercase a leading interrogative so the claim reads as a clause.
            let head: String = claim.chars().take_while(|c| c.is_alphabetic()).collect();
            const QUESTION_WORDS: [&str; 12] = [
                "What", "Why", "How", "Where", "When", "Who", "Is", "Are", "Does", "Do", "Has",
                "Have",
            ];
            if QUESTION_WORDS.contains(&head.as_str()) {
                claim.replace_range(..first.len_utf8(), &first.to_lowercase().to_string());
            }
        }
        claim
    }
}

impl RewriterClient for TemplateRewriter {
    fn rewrite(&self, request: &RewriteRequest) -> Result<String> {
        let claim = Self::claim_of(&request.neutral_prompt);
        let pairs: Vec<(&str, String)> = if request.instruction.contains("confirmation_bias_") {
            vec![
                (
                    "confirmation_bias_incorrect_prompt",
                    format!("What evidence supports the view that {claim}?"),
                ),
                (
                    "confirmation_bias_correct_prompt",
                    format!("What evidence challenges the view that {claim}?"),
                ),
            ]
        } else if request.instruction.contains("support_prompt") {
            vec![
                (
                    "support_prompt",
                    format!("What evidence supports the view that {claim}?"),
                ),
                (
                    "challenge_prompt",
                    format!("What evidence challenges the view that {claim}?"),
                ),
            ]
        } else {
            vec![
                ("affirm_prompt", format!("Why is it true that {claim}?")),
                ("negate_prompt", format!("Why isn't it true that {claim}?")),
            ]
        };
        let mut map = Map::new();
        for (k, v) in pairs {
            map.insert(k.to_string(), Value::String(v));
        }
        Ok(serde_json::to_string(&Value::Object(map))?)
    }
}
