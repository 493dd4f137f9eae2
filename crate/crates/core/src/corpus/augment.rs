//! Context-completion augmentation: keep a dialogue prefix and let a completer
//! write the rest.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use log::warn;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::synthetic::SyntheticSpec;
use super::{DialogueRecord, Role, Turn};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub trait DialogueCompleter: Send + Sync {
    /// Continues `prefix` with exactly `count` turns, alternating roles.
    fn complete(
        &self,
        prefix: &[Turn],
        count: usize,
        meta: &BTreeMap<String, String>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Turn>>;
}

/// Fills turns from a synthetic spec's templates: random strategies for system turns,
/// random state-level replies for user turns.
#[derive(Clone, Debug)]
pub struct TemplateCompleter {
    pub spec: SyntheticSpec,
}

impl TemplateCompleter {
    pub fn new(spec: SyntheticSpec) -> Self {
        Self { spec }
    }
}

impl DialogueCompleter for TemplateCompleter {
    fn complete(
        &self,
        prefix: &[Turn],
        count: usize,
        meta: &BTreeMap<String, String>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Turn>> {
        let topic = meta.get("topic").cloned().unwrap_or_else(|| self.spec.topics[0].clone());
        let mut role = prefix.last().map_or(Role::User, |t| t.role.other());
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let turn = match role {
                Role::System => {
                    let s = (0..self.spec.num_strategies()).collect::<Vec<_>>();
                    self.spec.system_utterance(*s.choose(rng).expect("strategies"), &topic, rng)
                }
                Role::User => {
                    let level = rand::Rng::gen_range(rng, 0..self.spec.max_state);
                    self.spec.user_reply(level, &topic, rng)
                }
            };
            out.push(turn);
            role = role.other();
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SkippedAugmentation {
    pub source_id: String,
    pub prefix_len: Option<usize>,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct AugmentOutcome {
    pub records: Vec<DialogueRecord>,
    pub skipped: Vec<SkippedAugmentation>,
}

pub fn augmented_id(source: &str, prefix_len: usize) -> String {
    format!("{source}#ctx{prefix_len}")
}

/// For each source, keeps `per_dialogue` distinct prefix lengths drawn from `prefixes`
/// and completes each back to the source's turn count.
pub fn augment_context_completion(
    records: &[DialogueRecord],
    completer: &dyn DialogueCompleter,
    prefixes: RangeInclusive<usize>,
    per_dialogue: usize,
    seed: u64,
) -> Result<AugmentOutcome> {
    let lengths: Vec<usize> = prefixes.clone().collect();
    if lengths.is_empty() || *prefixes.start() == 0 {
        return Err(Error::Validation(format!("invalid prefix range {prefixes:?}")));
    }
    if per_dialogue > lengths.len() {
        return Err(Error::Validation(format!(
            "per_dialogue {per_dialogue} exceeds the {} available prefix lengths",
            lengths.len()
        )));
    }
    let longest = *prefixes.end();
    let mut outcome = AugmentOutcome::default();
    if per_dialogue == 0 {
        return Ok(outcome);
    }
    for record in records {
        if record.turns.len() < longest {
            warn!("skipping {}: {} turns, need {longest}", record.id, record.turns.len());
            outcome.skipped.push(SkippedAugmentation {
                source_id: record.id.clone(),
                prefix_len: None,
                reason: format!("only {} turns", record.turns.len()),
            });
            continue;
        }
        let mut rng = rng_for(seed, &record.id);
        let mut chosen: Vec<usize> =
            sample(&mut rng, lengths.len(), per_dialogue).into_iter().map(|i| lengths[i]).collect();
        chosen.sort_unstable();
        for len in chosen {
            let id = augmented_id(&record.id, len);
            let mut turn_rng = rng_for(seed, &id);
            let prefix = &record.turns[..len];
            let count = record.turns.len() - len;
            let result = completer
                .complete(prefix, count, &record.meta, &mut turn_rng)
                .and_then(|extra| check_continuation(prefix, &extra, count).map(|_| extra));
            match result {
                Ok(extra) => {
                    let mut turns = prefix.to_vec();
                    turns.extend(extra);
                    let mut meta = record.meta.clone();
                    meta.insert("source_id".into(), record.id.clone());
                    meta.insert("prefix_len".into(), len.to_string());
                    // Hidden-state trajectories do not carry over to rewritten turns.
                    meta.remove(super::critic::STATES_META_KEY);
                    outcome.records.push(DialogueRecord { id, meta, turns, ground_truth_labels: None });
                }
                Err(e) => {
                    warn!("augmentation {id} skipped: {e}");
                    outcome.skipped.push(SkippedAugmentation {
                        source_id: record.id.clone(),
                        prefix_len: Some(len),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(outcome)
}

fn check_continuation(prefix: &[Turn], extra: &[Turn], count: usize) -> Result<()> {
    if extra.len() != count {
        return Err(Error::Validation(format!("completer returned {} turns, expected {count}", extra.len())));
    }
    let mut prev = prefix.last().map(|t| t.role);
    for t in extra {
        if prev == Some(t.role) {
            return Err(Error::Validation("completer broke role alternation".into()));
        }
        if t.text.trim().is_empty() {
            return Err(Error::Validation("completer returned an empty turn".into()));
        }
        prev = Some(t.role);
    }
    Ok(())
}
