//! Dialogue records, per-turn training tuples and the corpus file formats.

mod annotate;
mod augment;
pub mod critic;
mod decompose;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::PolicyDistribution;

pub use annotate::{annotate_rewards, AnnotateError, AnnotateOptions};
pub use augment::{
    augment_context_completion, AugmentOutcome, DialogueCompleter, SkippedAugmentation,
    TemplateCompleter,
};
pub use decompose::{decompose, reconstruct};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::System => Role::User,
            Role::User => Role::System,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self { role, text: text.into() }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Role::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User, text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub id: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_labels: Option<Vec<usize>>,
}

impl DialogueRecord {
    pub fn system_turn_count(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::System).count()
    }

    /// Checks non-empty turns, role alternation and label count.
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(self.parse_error(0, "dialogue has no turns"));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.text.trim().is_empty() {
                return Err(self.parse_error(i, "empty utterance"));
            }
            if i > 0 && self.turns[i - 1].role == turn.role {
                return Err(self.parse_error(i, "two consecutive turns share a role"));
            }
        }
        if let Some(labels) = &self.ground_truth_labels {
            let n = self.system_turn_count();
            if labels.len() != n {
                return Err(Error::Validation(format!(
                    "record {}: {} ground-truth labels for {n} system turns",
                    self.id,
                    labels.len()
                )));
            }
        }
        Ok(())
    }

    fn parse_error(&self, turn: usize, message: &str) -> Error {
        Error::Parse { record: self.id.clone(), turn, message: message.into() }
    }
}

/// One decision point: the system turn at `turn_index` (counted among system turns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub history: Vec<Turn>,
    pub sys_utterance: Turn,
    pub usr_reply: Option<Turn>,
    pub next_history: Vec<Turn>,
    pub reward: Option<f64>,
    pub pseudo_label: Option<PolicyDistribution>,
    pub is_terminal: bool,
}

impl TrainingTuple {
    pub fn id(&self) -> String {
        format!("{}:{}", self.dialogue_id, self.turn_index)
    }
}

pub fn validate_corpus(records: &[DialogueRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate record id {}", r.id)));
        }
    }
    Ok(())
}

/// Reads a corpus JSON file (top-level array of records).
pub fn load_corpus(path: &Path) -> Result<Vec<DialogueRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<DialogueRecord>> {
    let root: Value = serde_json::from_str(text)?;
    let items = root
        .as_array()
        .ok_or_else(|| Error::Validation("corpus must be a top-level JSON array".into()))?;
    let records = items
        .iter()
        .enumerate()
        .map(|(i, v)| parse_record(i, v))
        .collect::<Result<Vec<_>>>()?;
    validate_corpus(&records)?;
    Ok(records)
}

fn parse_record(position: usize, v: &Value) -> Result<DialogueRecord> {
    let obj = v.as_object().ok_or_else(|| Error::Parse {
        record: format!("#{position}"),
        turn: 0,
        message: "record is not an object".into(),
    })?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse {
            record: format!("#{position}"),
            turn: 0,
            message: "missing string field `id`".into(),
        })?
        .to_string();
    let err = |turn: usize, message: String| Error::Parse { record: id.clone(), turn, message };
    for key in obj.keys() {
        if !matches!(key.as_str(), "id" | "meta" | "turns" | "ground_truth_labels") {
            return Err(err(0, format!("unknown field `{key}`")));
        }
    }
    let mut meta = BTreeMap::new();
    if let Some(m) = obj.get("meta") {
        let m = m.as_object().ok_or_else(|| err(0, "`meta` must be an object".into()))?;
        for (k, v) in m {
            let s = v.as_str().ok_or_else(|| err(0, format!("meta value `{k}` must be a string")))?;
            meta.insert(k.clone(), s.to_string());
        }
    }
    let raw_turns = obj
        .get("turns")
        .and_then(Value::as_array)
        .ok_or_else(|| err(0, "missing array field `turns`".into()))?;
    let mut turns = Vec::with_capacity(raw_turns.len());
    for (i, t) in raw_turns.iter().enumerate() {
        let role = match t.get("role").and_then(Value::as_str) {
            Some("system") => Role::System,
            Some("user") => Role::User,
            Some(other) => return Err(err(i, format!("unknown role `{other}`"))),
            None => return Err(err(i, "missing string field `role`".into())),
        };
        let text = t
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| err(i, "missing string field `text`".into()))?;
        turns.push(Turn::new(role, text));
    }
    let ground_truth_labels = match obj.get("ground_truth_labels") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|x| x.as_u64().map(|u| u as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err(0, "ground_truth_labels must be non-negative integers".into()))?,
        ),
        Some(_) => return Err(err(0, "ground_truth_labels must be an array".into())),
    };
    let record = DialogueRecord { id, meta, turns, ground_truth_labels };
    record.validate()?;
    Ok(record)
}

pub fn corpus_to_json(records: &[DialogueRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn save_corpus(path: &Path, records: &[DialogueRecord]) -> Result<()> {
    write_atomic(path, corpus_to_json(records)?.as_bytes())
}

pub fn save_tuples(path: &Path, tuples: &[TrainingTuple]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tuples {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn load_tuples(path: &Path) -> Result<Vec<TrainingTuple>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TrainingTuple = serde_json::from_str(&line).map_err(|e| Error::Parse {
            record: format!("{}:{}", path.display(), i + 1),
            turn: 0,
            message: e.to_string(),
        })?;
        if let Some(label) = &t.pseudo_label {
            label.validate()?;
        }
        out.push(t);
    }
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
