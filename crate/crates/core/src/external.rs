//! Adapters for an OpenAI-compatible chat-completion endpoint.
//!
//! Endpoint and key come from `LDPP_API_BASE` and `LDPP_API_KEY` only.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use log::warn;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::corpus::critic::{Critic, CriticLabel, CriticQuery, Domain};
use crate::corpus::{DialogueCompleter, Role, Turn};
use crate::error::{Error, Result};
use crate::selfplay::{EvalCase, UserSimulator};

pub const API_BASE_VAR: &str = "LDPP_API_BASE";
pub const API_KEY_VAR: &str = "LDPP_API_KEY";
pub const MODEL_VAR: &str = "LDPP_API_MODEL";

#[derive(Clone, Debug)]
pub struct ChatClient {
    pub base: String,
    key: String,
    pub model: String,
    pub timeout: Duration,
}

impl ChatClient {
    pub fn new(base: impl Into<String>, key: impl Into<String>, model: impl Into<String>) -> Self {
        Self { base: base.into(), key: key.into(), model: model.into(), timeout: Duration::from_secs(60) }
    }

    pub fn from_env() -> Result<Self> {
        let var = |name: &str| std::env::var(name).map_err(|_| Error::config(name, "environment variable is not set"));
        let model = std::env::var(MODEL_VAR).unwrap_or_else(|_| "gpt-3.5-turbo".into());
        Ok(Self::new(var(API_BASE_VAR)?, var(API_KEY_VAR)?, model))
    }

    /// One completion for a system + user message pair.
    pub fn chat(&self, item: &str, system: &str, user: &str, temperature: f64) -> Result<String> {
        let url = format!("{}/chat/completions", self.base.trim_end_matches('/'));
        let body = json!({
            "model": self.model,
            "temperature": temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let transport = |message: String| Error::Transport { item: item.to_string(), message };
        let resp: Value = ureq::post(&url)
            .timeout(self.timeout)
            .set("Authorization", &format!("Bearer {}", self.key))
            .send_json(body)
            .map_err(|e| transport(e.to_string()))?
            .into_json()
            .map_err(|e| transport(e.to_string()))?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.trim().to_string())
            .ok_or_else(|| transport("response has no choices[0].message.content".into()))
    }
}

/// Prompt templates with `{conversation}`, `{scene}` and `{description}` placeholders.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplates {
    pub user: String,
    pub critic: String,
    pub completer: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            user: "You play a person seeking help. Situation: {scene}. {description}\n\
                   Conversation so far:\n{conversation}\n\
                   Write only your next reply, one or two sentences."
                .into(),
            critic: "Read the conversation below between a supporter (System) and a help seeker (User). \
                     Situation: {scene}.\n{conversation}\n\
                     Answer with exactly one word describing the help seeker's state now: {labels}."
                .into(),
            completer: "Continue this dialogue. Situation: {scene}. {description}\n{conversation}\n\
                        Write exactly {count} more turns, starting with {first}, alternating roles, \
                        one per line, each line starting with `System:` or `User:`."
                .into(),
        }
    }
}

impl PromptTemplates {
    /// Reads `user.txt`, `critic.txt` and `completer.txt` from `dir`; missing files keep the defaults.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut t = Self::default();
        for (name, slot) in [("user.txt", &mut t.user), ("critic.txt", &mut t.critic), ("completer.txt", &mut t.completer)] {
            let path = dir.join(name);
            if path.exists() {
                *slot = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(t)
    }
}

pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    values.iter().fold(template.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

pub fn render_conversation(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("{}: {}", if t.role == Role::System { "System" } else { "User" }, t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn meta_value<'a>(meta: Option<&'a BTreeMap<String, String>>, key: &str) -> &'a str {
    meta.and_then(|m| m.get(key)).map_or("", String::as_str)
}

/// Parses `System:` / `User:` lines from a completion.
pub fn parse_turns(text: &str) -> Vec<Turn> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            let (role, rest) = line.split_once(':')?;
            let role = match role.trim().to_lowercase().as_str() {
                "system" => Role::System,
                "user" => Role::User,
                _ => return None,
            };
            Some(Turn::new(role, rest.trim()))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LlmCompleter {
    pub client: ChatClient,
    pub templates: PromptTemplates,
}

impl DialogueCompleter for LlmCompleter {
    fn complete(&self, prefix: &[Turn], count: usize, meta: &BTreeMap<String, String>, _rng: &mut ChaCha8Rng) -> Result<Vec<Turn>> {
        let first = prefix.last().map_or(Role::User, |t| t.role.other());
        let count_s = count.to_string();
        let prompt = fill(
            &self.templates.completer,
            &[
                ("conversation", &render_conversation(prefix)),
                ("scene", meta_value(Some(meta), "scene")),
                ("description", meta_value(Some(meta), "description")),
                ("count", &count_s),
                ("first", if first == Role::System { "System" } else { "User" }),
            ],
        );
        let item = meta_value(Some(meta), "source_id");
        let text = self.client.chat(item, "You write realistic dialogues.", &prompt, 0.7)?;
        Ok(parse_turns(&text))
    }
}

/// User simulator backed by the endpoint. The hidden state is passed through unchanged,
/// so pair it with [`LlmCritic`].
#[derive(Clone, Debug)]
pub struct LlmUser {
    pub client: ChatClient,
    pub templates: PromptTemplates,
}

impl UserSimulator for LlmUser {
    fn reply(&self, state: u8, case: &EvalCase, history: &[Turn], _rng: &mut ChaCha8Rng) -> Result<(Turn, u8)> {
        let prompt = fill(
            &self.templates.user,
            &[
                ("conversation", &render_conversation(history)),
                ("scene", meta_value(Some(&case.meta), "scene")),
                ("description", meta_value(Some(&case.meta), "description")),
            ],
        );
        let text = self.client.chat(&case.case_id, "Stay in character.", &prompt, 0.7)?;
        Ok((Turn::user(text), state))
    }
}

#[derive(Clone, Debug)]
pub struct LlmCritic {
    pub client: ChatClient,
    pub templates: PromptTemplates,
    pub domain: Domain,
}

/// First label name of `domain` mentioned in `text`.
pub fn parse_verdict(text: &str, domain: Domain) -> Option<CriticLabel> {
    let lower = text.to_lowercase();
    domain
        .label_names()
        .iter()
        .enumerate()
        .filter_map(|(i, name)| lower.find(name).map(|pos| (pos, i)))
        .min()
        .map(|(_, i)| CriticLabel::from_level(i))
}

impl Critic for LlmCritic {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn vote(&self, query: &CriticQuery<'_>, _rng: &mut ChaCha8Rng) -> Result<CriticLabel> {
        let labels = self.domain.label_names().join(", ");
        let prompt = fill(
            &self.templates.critic,
            &[
                ("conversation", &render_conversation(query.conversation)),
                ("scene", meta_value(query.meta, "scene")),
                ("description", meta_value(query.meta, "description")),
                ("labels", &labels),
            ],
        );
        let text = self.client.chat(query.item_id, "You are a careful annotator.", &prompt, 1.0)?;
        parse_verdict(&text, self.domain).ok_or_else(|| {
            warn!("{}: unparseable critic answer {text:?}", query.item_id);
            Error::Transport { item: query.item_id.to_string(), message: format!("no label in {text:?}") }
        })
    }
}
