use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest;

const SYSTEM_PROMPT: &str = include_str!("../../resources/system_prompt.txt");

/// The bundled PVLM-oriented system message, without the trailing newline of
/// the resource file.
pub fn default_system_prompt() -> &'static str {
    SYSTEM_PROMPT.trim_end_matches(['\n', '\r'])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    fn new(role: Role, content: &str) -> Self {
        Self {
            role,
            content: content.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub user: String,
    pub assistant: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEnvelope {
    pub messages: Vec<Message>,
}

impl PromptEnvelope {
    /// SHA-256 of the compact JSON encoding. Mock fixtures are keyed by it.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("envelope serializes");
        digest::sha256_hex(json.as_bytes())
    }

    pub fn validate(&self) -> Result<(), String> {
        let n = self.messages.len();
        if n < 2 {
            return Err(format!("envelope has {n} messages, need at least 2"));
        }
        if self.messages[0].role != Role::System {
            return Err("first message must be the system message".into());
        }
        if self.messages[n - 1].role != Role::User {
            return Err("last message must be a user message".into());
        }
        let middle = &self.messages[1..n - 1];
        if !middle.len().is_multiple_of(2) {
            return Err("few-shot messages must come in user/assistant pairs".into());
        }
        for pair in middle.chunks(2) {
            if pair[0].role != Role::User || pair[1].role != Role::Assistant {
                return Err("few-shot messages must alternate user, assistant".into());
            }
        }
        Ok(())
    }
}

/// System message, then the few-shot pairs as alternating user/assistant
/// turns, then the caption as the final user message.
pub fn build_prompt(system: &str, caption: &str, fewshot: &[FewShotExample]) -> PromptEnvelope {
    let mut messages = Vec::with_capacity(2 + 2 * fewshot.len());
    messages.push(Message::new(Role::System, system));
    for ex in fewshot {
        messages.push(Message::new(Role::User, &ex.user));
        messages.push(Message::new(Role::Assistant, &ex.assistant));
    }
    messages.push(Message::new(Role::User, caption));
    PromptEnvelope { messages }
}

/// Few-shot examples as JSONL objects with `user` and `assistant` fields.
pub fn load_fewshot(path: &Path) -> Result<Vec<FewShotExample>, crate::jsonl::JsonlError> {
    crate::jsonl::read(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shot(i: usize) -> FewShotExample {
        FewShotExample {
            user: format!("caption {i}"),
            assistant: format!("Question: q{i}\nAnswer: a{i}"),
        }
    }

    #[test]
    fn system_text_carries_the_requirements() {
        let s = default_system_prompt();
        assert!(s.starts_with("As a specialized AI assistant focusing on pathological images"));
        assert!(s.contains("- Avoid referencing dates or magnification ratios."));
        assert!(s.contains("- Focus on visual descriptions, including organizational structure"));
        assert!(s.contains(
            "- Avoid using phrases such as \"mention\", \"title\", \"context\", or \"narrator\"."
        ));
        assert!(s.contains("- When responding to questions, adopt an objective and responsible attitude"));
        assert!(s.contains("4-5 question-and-answer pairs"));
        assert!(!s.ends_with('\n'));
    }

    #[test]
    fn empty_fewshot_gives_two_messages() {
        let env = build_prompt(default_system_prompt(), "a caption", &[]);
        assert_eq!(env.messages.len(), 2);
        assert_eq!(env.messages[0].content, default_system_prompt());
        assert_eq!(env.messages[1].content, "a caption");
        env.validate().unwrap();
    }

    #[test]
    fn fewshot_pairs_are_interleaved() {
        let env = build_prompt("sys", "  caption kept verbatim ", &[shot(1), shot(2)]);
        let roles: Vec<_> = env.messages.iter().map(|m| m.role).collect();
        use Role::*;
        assert_eq!(roles, vec![System, User, Assistant, User, Assistant, User]);
        assert_eq!(env.messages[5].content, "  caption kept verbatim ");
        assert_eq!(env.messages[3].content, "caption 2");
        env.validate().unwrap();
    }

    #[test]
    fn digest_is_stable_and_content_sensitive() {
        let a = build_prompt("sys", "cap", &[shot(1)]);
        let b = build_prompt("sys", "cap", &[shot(1)]);
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), build_prompt("sys", "cap.", &[shot(1)]).digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let mut env = build_prompt("sys", "cap", &[shot(1)]);
        env.messages.swap(1, 2);
        assert!(env.validate().is_err());
        let only_system = PromptEnvelope {
            messages: vec![Message::new(Role::System, "s")],
        };
        assert!(only_system.validate().is_err());
    }
}
