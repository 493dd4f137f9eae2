//! Four-state turn critics and vote averaging.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

use super::{DialogueRecord, Turn};

/// Reward attached to each critic label, from worst to best.
pub const LABEL_VALUES: [f64; 4] = [-1.0, -0.5, 0.1, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Support,
    Persuasion,
}

impl Domain {
    pub fn label_names(self) -> [&'static str; 4] {
        match self {
            Domain::Support => ["worse", "same", "better", "solved"],
            Domain::Persuasion => ["reject", "neutral", "positive", "donate"],
        }
    }
}

/// Ordinal critic state; the same four levels serve both domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriticLabel {
    Worse,
    Same,
    Better,
    Solved,
}

impl CriticLabel {
    pub const ALL: [CriticLabel; 4] =
        [CriticLabel::Worse, CriticLabel::Same, CriticLabel::Better, CriticLabel::Solved];

    pub fn level(self) -> usize {
        self as usize
    }

    pub fn from_level(level: usize) -> Self {
        Self::ALL[level.min(3)]
    }

    pub fn value(self) -> f64 {
        LABEL_VALUES[self.level()]
    }

    pub fn name(self, domain: Domain) -> &'static str {
        domain.label_names()[self.level()]
    }

    /// Parses either domain's label name.
    pub fn parse(name: &str) -> Option<Self> {
        let n = name.trim().to_lowercase();
        [Domain::Support, Domain::Persuasion].iter().find_map(|d| {
            d.label_names().iter().position(|l| n == *l).map(Self::from_level)
        })
    }

    /// Label implied by a hidden-state transition on a chain whose top level is `solved_at`.
    pub fn from_transition(before: u8, after: u8, solved_at: u8) -> Self {
        if after >= solved_at {
            CriticLabel::Solved
        } else if after > before {
            CriticLabel::Better
        } else if after < before {
            CriticLabel::Worse
        } else {
            CriticLabel::Same
        }
    }
}

/// A label together with its reward value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub label: CriticLabel,
    pub value: f64,
}

impl From<CriticLabel> for CriticVerdict {
    fn from(label: CriticLabel) -> Self {
        Self { label, value: label.value() }
    }
}

/// What a critic gets to see when judging one turn.
#[derive(Clone, Debug)]
pub struct CriticQuery<'a> {
    /// Stable identifier used for seeding and error reports.
    pub item_id: &'a str,
    pub conversation: &'a [Turn],
    pub meta: Option<&'a std::collections::BTreeMap<String, String>>,
    /// Hidden user-state levels before and after the turn, when known.
    pub transition: Option<(u8, u8)>,
}

pub trait Critic: Send + Sync {
    fn domain(&self) -> Domain {
        Domain::Support
    }

    /// One classification vote.
    fn vote(&self, query: &CriticQuery<'_>, rng: &mut ChaCha8Rng) -> Result<CriticLabel>;
}

/// Mean of `votes` verdict values; the vote stream is seeded by `(seed, item_id)`.
pub fn critic_reward(critic: &dyn Critic, query: &CriticQuery<'_>, votes: usize, seed: u64) -> Result<f64> {
    if votes == 0 {
        return Err(Error::Validation("votes must be at least 1".into()));
    }
    let mut rng = rng_for(seed, query.item_id);
    let mut total = 0.0;
    for _ in 0..votes {
        total += critic.vote(query, &mut rng)?.value();
    }
    Ok(total / votes as f64)
}

/// Always returns the same label.
#[derive(Clone, Debug)]
pub struct FixedCritic(pub CriticLabel);

impl Critic for FixedCritic {
    fn vote(&self, _: &CriticQuery<'_>, _: &mut ChaCha8Rng) -> Result<CriticLabel> {
        Ok(self.0)
    }
}

/// Replays a fixed sequence of labels vote after vote, cycling.
#[derive(Debug)]
pub struct SequenceCritic {
    labels: Vec<CriticLabel>,
    cursor: std::sync::atomic::AtomicUsize,
}

impl SequenceCritic {
    pub fn new(labels: Vec<CriticLabel>) -> Self {
        assert!(!labels.is_empty());
        Self { labels, cursor: std::sync::atomic::AtomicUsize::new(0) }
    }
}

impl Critic for SequenceCritic {
    fn vote(&self, _: &CriticQuery<'_>, _: &mut ChaCha8Rng) -> Result<CriticLabel> {
        let i = self.cursor.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Ok(self.labels[i % self.labels.len()])
    }
}

/// Reads the hidden state transition and flips each vote to an adjacent label
/// with probability `flip_prob`.
#[derive(Clone, Debug)]
pub struct ScriptedCritic {
    pub solved_at: u8,
    pub flip_prob: f64,
    pub domain: Domain,
    /// Per-dialogue hidden state trajectories, used when the query carries none.
    states: HashMap<String, Vec<u8>>,
}

pub const DEFAULT_FLIP_PROB: f64 = 0.1;

/// Meta key under which synthetic corpora record the hidden state trajectory.
pub const STATES_META_KEY: &str = "user_states";

impl ScriptedCritic {
    pub fn new(solved_at: u8) -> Self {
        Self { solved_at, flip_prob: DEFAULT_FLIP_PROB, domain: Domain::Support, states: HashMap::new() }
    }

    pub fn with_flip_prob(mut self, p: f64) -> Self {
        self.flip_prob = p;
        self
    }

    /// Indexes the `user_states` trajectories of synthetic records so corpus tuples can be judged.
    pub fn with_records(mut self, records: &[DialogueRecord]) -> Result<Self> {
        for r in records {
            let Some(raw) = r.meta.get(STATES_META_KEY) else { continue };
            let states = parse_states(raw).ok_or_else(|| {
                Error::Validation(format!("record {}: malformed {STATES_META_KEY}", r.id))
            })?;
            self.states.insert(r.id.clone(), states);
        }
        Ok(self)
    }

    fn transition_for(&self, query: &CriticQuery<'_>) -> Result<(u8, u8)> {
        if let Some(t) = query.transition {
            return Ok(t);
        }
        // Corpus tuples are identified as "<dialogue>:<system turn ordinal>".
        let (dialogue, ordinal) = query
            .item_id
            .rsplit_once(':')
            .and_then(|(d, t)| t.parse::<usize>().ok().map(|t| (d, t)))
            .ok_or_else(|| Error::Validation(format!("cannot locate hidden state for {}", query.item_id)))?;
        let states = self
            .states
            .get(dialogue)
            .ok_or_else(|| Error::Validation(format!("no hidden states recorded for {dialogue}")))?;
        match (states.get(ordinal), states.get(ordinal + 1)) {
            (Some(&a), Some(&b)) => Ok((a, b)),
            _ => Err(Error::Validation(format!("hidden state trajectory too short for {}", query.item_id))),
        }
    }
}

pub fn parse_states(raw: &str) -> Option<Vec<u8>> {
    raw.split(',').map(|s| s.trim().parse::<u8>().ok()).collect()
}

pub fn format_states(states: &[u8]) -> String {
    states.iter().map(u8::to_string).collect::<Vec<_>>().join(",")
}

impl Critic for ScriptedCritic {
    fn domain(&self) -> Domain {
        self.domain
    }

    fn vote(&self, query: &CriticQuery<'_>, rng: &mut ChaCha8Rng) -> Result<CriticLabel> {
        let (before, after) = self.transition_for(query)?;
        let label = CriticLabel::from_transition(before, after, self.solved_at);
        Ok(flip_adjacent(label, self.flip_prob, rng))
    }
}

/// With probability `p`, moves to a neighbouring level (uniformly when there are two).
pub fn flip_adjacent(label: CriticLabel, p: f64, rng: &mut impl Rng) -> CriticLabel {
    if rng.gen::<f64>() >= p {
        return label;
    }
    let level = label.level();
    let neighbours: Vec<usize> = [level.checked_sub(1), (level < 3).then_some(level + 1)]
        .into_iter()
        .flatten()
        .collect();
    CriticLabel::from_level(neighbours[rng.gen_range(0..neighbours.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query<'a>(id: &'a str, turns: &'a [Turn]) -> CriticQuery<'a> {
        CriticQuery { item_id: id, conversation: turns, meta: None, transition: None }
    }

    #[test]
    fn all_solved_votes_give_one() {
        let r = critic_reward(&FixedCritic(CriticLabel::Solved), &query("x", &[]), 10, 0).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn six_solved_four_better() {
        let mut labels = vec![CriticLabel::Solved; 6];
        labels.extend([CriticLabel::Better; 4]);
        let r = critic_reward(&SequenceCritic::new(labels), &query("x", &[]), 10, 0).unwrap();
        assert!((r - 0.64).abs() < 1e-12);
        assert!(r > 0.6);
    }

    #[test]
    fn single_vote_same() {
        let r = critic_reward(&FixedCritic(CriticLabel::Same), &query("x", &[]), 1, 0).unwrap();
        assert_eq!(r, -0.5);
        assert!(critic_reward(&FixedCritic(CriticLabel::Same), &query("x", &[]), 0, 0).is_err());
    }

    #[test]
    fn transition_labels() {
        use CriticLabel::*;
        assert_eq!(CriticLabel::from_transition(3, 4, 4), Solved);
        assert_eq!(CriticLabel::from_transition(1, 2, 4), Better);
        assert_eq!(CriticLabel::from_transition(2, 1, 4), Worse);
        assert_eq!(CriticLabel::from_transition(0, 0, 4), Same);
        assert_eq!(CriticLabel::parse("Donate"), Some(Solved));
        assert_eq!(CriticLabel::parse("feel better"), None);
        assert_eq!(Worse.name(Domain::Persuasion), "reject");
    }

    #[test]
    fn flips_only_reach_neighbours() {
        let mut rng = rng_for(1, "flip");
        for _ in 0..2000 {
            assert!(matches!(
                flip_adjacent(CriticLabel::Same, 0.5, &mut rng),
                CriticLabel::Same | CriticLabel::Worse | CriticLabel::Better
            ));
            assert!(matches!(
                flip_adjacent(CriticLabel::Solved, 0.5, &mut rng),
                CriticLabel::Solved | CriticLabel::Better
            ));
        }
    }

    #[test]
    fn scripted_critic_is_seeded() {
        let critic = ScriptedCritic::new(4);
        let q = CriticQuery { item_id: "t", conversation: &[], meta: None, transition: Some((1, 2)) };
        let a = critic_reward(&critic, &q, 10, 5).unwrap();
        let b = critic_reward(&critic, &q, 10, 5).unwrap();
        assert_eq!(a, b);
    }
}
