//! Prompt templates for the debate harness.
//!
//! Plain text with `{question}`, `{peer_answers}`, `{answer}`, and
//! `{critique}` placeholders. The defaults ship as editable constants; a
//! [`TemplateSet`] can also load replacements from files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const DEFAULT_BASE_TEMPLATE: &str = "Answer the question below. Think briefly, then commit.\n\
Question: {question}\n\
End your reply with a line of the form `Final Answer: <answer>`.";

pub const DEFAULT_PEERS_TEMPLATE: &str = "Answer the question below. Other agents answered last round; \
weigh their answers against your own reasoning.\n\
Question: {question}\n\
Peer answers:\n{peer_answers}\n\
End your reply with a line of the form `Final Answer: <answer>`.";

pub const DEFAULT_CRITIC_TEMPLATE: &str = "Critique the answer below for the question. \
Name the single most significant flaw, or reply `no issues`.\n\
Question: {question}\n\
Answer: {answer}";

pub const DEFAULT_FIX_TEMPLATE: &str = "Minimally revise the answer below to address the critique. \
Keep everything that is already right.\n\
Question: {question}\n\
Answer: {answer}\n\
Critique: {critique}\n\
End your reply with a line of the form `Final Answer: <answer>`.";

/// The four templates the harness renders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub base: String,
    pub peers: String,
    pub critic: String,
    pub fix: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            base: DEFAULT_BASE_TEMPLATE.to_string(),
            peers: DEFAULT_PEERS_TEMPLATE.to_string(),
            critic: DEFAULT_CRITIC_TEMPLATE.to_string(),
            fix: DEFAULT_FIX_TEMPLATE.to_string(),
        }
    }
}

impl TemplateSet {
    /// Replaces any template whose file path is given.
    pub fn with_overrides(
        base: Option<&Path>,
        peers: Option<&Path>,
        critic: Option<&Path>,
        fix: Option<&Path>,
    ) -> Result<Self> {
        let mut set = Self::default();
        if let Some(p) = base {
            set.base = std::fs::read_to_string(p)?;
        }
        if let Some(p) = peers {
            set.peers = std::fs::read_to_string(p)?;
        }
        if let Some(p) = critic {
            set.critic = std::fs::read_to_string(p)?;
        }
        if let Some(p) = fix {
            set.fix = std::fs::read_to_string(p)?;
        }
        Ok(set)
    }

    pub fn render_base(&self, question: &str) -> String {
        self.base.replace("{question}", question)
    }

    pub fn render_peers(&self, question: &str, peer_answers: &[String]) -> String {
        let listed = peer_answers
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{}. {a}", i + 1))
            .collect::<Vec<_>>()
            .join("\n");
        self.peers
            .replace("{question}", question)
            .replace("{peer_answers}", &listed)
    }

    pub fn render_critic(&self, question: &str, answer: &str) -> String {
        self.critic
            .replace("{question}", question)
            .replace("{answer}", answer)
    }

    pub fn render_fix(&self, question: &str, answer: &str, critique: &str) -> String {
        self.fix
            .replace("{question}", question)
            .replace("{answer}", answer)
            .replace("{critique}", critique)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_are_substituted() {
        let t = TemplateSet::default();
        let base = t.render_base("Why is the sky blue?");
        assert!(base.contains("Why is the sky blue?"));
        assert!(!base.contains("{question}"));
        let peers = t.render_peers("Q", &["scattering".into(), "mirrors".into()]);
        assert!(peers.contains("1. scattering"));
        assert!(peers.contains("2. mirrors"));
        let fix = t.render_fix("Q", "A", "C");
        assert!(!fix.contains("{answer}") && !fix.contains("{critique}"));
    }

    #[test]
    fn file_overrides_replace_only_given_templates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.txt");
        std::fs::write(&path, "custom {question}").unwrap();
        let t = TemplateSet::with_overrides(Some(&path), None, None, None).unwrap();
        assert_eq!(t.render_base("x"), "custom x");
        assert_eq!(t.peers, DEFAULT_PEERS_TEMPLATE);
    }
}
