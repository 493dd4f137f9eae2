//! Synthetic support-dialogue corpora with known strategy labels.
//!
//! A hidden user state climbs a chain `0..=max_state`. Each system turn is rendered
//! from one strategy's surface templates; the state moves up with probability
//! `p_up_correct` when the strategy matches the state's correct one, and down with
//! probability `p_down_incorrect` otherwise (never below 0).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::critic::{format_states, STATES_META_KEY};
use super::{DialogueRecord, Turn};
use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const TOPIC_SLOT: &str = "{topic}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub name: String,
    pub templates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub strategies: Vec<StrategySpec>,
    /// Correct strategy index for every non-terminal state `0..max_state`.
    pub correct_strategy: Vec<usize>,
    pub max_state: u8,
    pub p_up_correct: f64,
    pub p_down_incorrect: f64,
    pub max_system_turns: usize,
    /// Probability that the recorded system picks the correct strategy.
    pub behavior_correct_prob: f64,
    pub openings: Vec<String>,
    /// User replies per state level, index `max_state` being the closing replies.
    pub user_replies: Vec<Vec<String>>,
    pub topics: Vec<String>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        default_spec()
    }
}

fn compose(leads: &[&str], bodies: &[&str]) -> Vec<String> {
    leads
        .iter()
        .flat_map(|l| bodies.iter().map(move |b| format!("{l} {b}")))
        .collect()
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn default_spec() -> SyntheticSpec {
    let strategy = |name: &str, leads: &[&str], bodies: &[&str]| StrategySpec {
        name: name.into(),
        templates: compose(leads, bodies),
    };
    let strategies = vec![
        strategy(
            "greet",
            &["hello there", "hi friend", "good evening", "welcome back"],
            &[
                "it is nice to meet you",
                "thank you for reaching out today",
                "i am glad you came to talk",
                "i am here and ready to listen",
                "it is good to hear from you about {topic}",
            ],
        ),
        strategy(
            "explore",
            &["tell me", "can you share", "i wonder", "help me understand"],
            &[
                "what happened with your {topic}",
                "how long this {topic} problem has lasted",
                "when you first noticed it",
                "who else knows about the {topic} situation",
                "what worries you the most",
            ],
        ),
        strategy(
            "reflect",
            &["it sounds like", "so you are saying", "if i hear you right", "it seems that"],
            &[
                "the {topic} has been weighing on you",
                "you feel stuck and unheard",
                "this has left you exhausted",
                "you carry a heavy load alone",
                "your {topic} keeps you awake at night",
            ],
        ),
        strategy(
            "comfort",
            &["that must be hard", "i am so sorry", "you are not alone", "it is okay"],
            &[
                "your feelings are completely valid",
                "anyone would struggle with {topic} like this",
                "be gentle with yourself tonight",
                "you have shown real courage",
                "take a slow deep breath",
            ],
        ),
        strategy(
            "suggest",
            &["maybe you could", "one idea is to", "perhaps try to", "it might help to"],
            &[
                "write a short plan for your {topic}",
                "talk with a trusted friend this week",
                "take a walk every morning",
                "set one small goal for {topic} tomorrow",
                "schedule some quiet rest each evening",
            ],
        ),
        strategy(
            "close",
            &["thanks for sharing", "i appreciate your openness", "we covered a lot", "let us pause here"],
            &[
                "take care and goodbye",
                "remember i am around whenever needed",
                "see you next time",
                "wishing you a peaceful week",
                "stay safe and rest well",
            ],
        ),
    ];
    SyntheticSpec {
        strategies,
        correct_strategy: vec![0, 1, 3, 4],
        max_state: 4,
        p_up_correct: 0.8,
        p_down_incorrect: 0.5,
        max_system_turns: 10,
        behavior_correct_prob: 0.6,
        openings: strings(&[
            "hey i need to talk about my {topic}",
            "hi are you free i am upset about {topic}",
            "hello i have been struggling with {topic} lately",
        ]),
        user_replies: vec![
            strings(&[
                "i feel terrible about my {topic}",
                "everything with my {topic} is falling apart",
                "i cannot stop worrying about {topic}",
            ]),
            strings(&[
                "i guess i can open up a bit",
                "okay i will try to explain my {topic} trouble",
                "it is hard but i want to talk",
            ]),
            strings(&[
                "it has been so painful for me",
                "i feel ashamed about my {topic}",
                "yes that is exactly how i feel",
            ]),
            strings(&[
                "i feel a bit calmer now",
                "maybe my {topic} is not hopeless",
                "that makes me feel understood",
            ]),
            strings(&[
                "thank you so much i feel much better now goodbye",
                "i think i can handle my {topic} now thanks",
                "that plan sounds good i feel relieved",
            ]),
        ],
        topics: strings(&["work", "school", "family", "health", "money", "partner", "exams", "friends"]),
    }
}

impl SyntheticSpec {
    pub fn num_strategies(&self) -> usize {
        self.strategies.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("synthetic spec: {m}")));
        if self.strategies.len() < 2 {
            return fail("at least two strategy templates are required".into());
        }
        if let Some(s) = self.strategies.iter().find(|s| s.templates.is_empty()) {
            return fail(format!("strategy {} has no templates", s.name));
        }
        if self.max_state == 0 {
            return fail("max_state must be at least 1".into());
        }
        if self.correct_strategy.len() != self.max_state as usize {
            return fail(format!(
                "correct_strategy needs one entry per state below {} (got {})",
                self.max_state,
                self.correct_strategy.len()
            ));
        }
        if let Some(&bad) = self.correct_strategy.iter().find(|&&c| c >= self.strategies.len()) {
            return fail(format!("correct strategy {bad} is out of range"));
        }
        for (name, p) in [
            ("p_up_correct", self.p_up_correct),
            ("p_down_incorrect", self.p_down_incorrect),
            ("behavior_correct_prob", self.behavior_correct_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.p_up_correct == 0.0 || self.behavior_correct_prob == 0.0 {
            return fail("solved state is unreachable: no transition ever moves up".into());
        }
        if self.max_system_turns < self.max_state as usize {
            return fail(format!(
                "solved state is unreachable within {} system turns",
                self.max_system_turns
            ));
        }
        if self.user_replies.len() != self.max_state as usize + 1 {
            return fail("user_replies needs one list per state including the solved state".into());
        }
        if self.openings.is_empty() || self.user_replies.iter().any(Vec::is_empty) {
            return fail("openings and user replies must be non-empty".into());
        }
        if self.topics.is_empty() {
            return fail("at least one topic is required".into());
        }
        Ok(())
    }

    pub fn render(template: &str, topic: &str) -> String {
        template.replace(TOPIC_SLOT, topic)
    }

    /// All word types the spec can produce.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        let mut texts: Vec<&String> = self.strategies.iter().flat_map(|s| &s.templates).collect();
        texts.extend(&self.openings);
        texts.extend(self.user_replies.iter().flatten());
        let mut words = BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace().filter(|w| *w != TOPIC_SLOT) {
                words.insert(w.to_lowercase());
            }
        }
        words.extend(self.topics.iter().cloned());
        words
    }

    pub fn is_correct(&self, state: u8, strategy: Option<usize>) -> bool {
        state < self.max_state && strategy == Some(self.correct_strategy[state as usize])
    }

    /// Next hidden state after a system turn classified as `strategy`
    /// (`None` = off-strategy).
    pub fn transition(&self, state: u8, strategy: Option<usize>, rng: &mut impl Rng) -> u8 {
        if state >= self.max_state {
            return state;
        }
        let draw: f64 = rng.gen();
        if self.is_correct(state, strategy) {
            if draw < self.p_up_correct {
                state + 1
            } else {
                state
            }
        } else if draw < self.p_down_incorrect {
            state.saturating_sub(1)
        } else {
            state
        }
    }

    pub fn user_reply(&self, state: u8, topic: &str, rng: &mut impl Rng) -> Turn {
        let pool = &self.user_replies[state.min(self.max_state) as usize];
        Turn::user(Self::render(pool.choose(rng).expect("non-empty"), topic))
    }

    pub fn opening(&self, topic: &str, rng: &mut impl Rng) -> Turn {
        Turn::user(Self::render(self.openings.choose(rng).expect("non-empty"), topic))
    }

    pub fn system_utterance(&self, strategy: usize, topic: &str, rng: &mut impl Rng) -> Turn {
        let t = self.strategies[strategy].templates.choose(rng).expect("non-empty");
        Turn::system(Self::render(t, topic))
    }

    /// Strategy a behaviour policy picks in `state`.
    pub fn behavior_strategy(&self, state: u8, correct_prob: f64, rng: &mut impl Rng) -> usize {
        let correct = self.correct_strategy[(state.min(self.max_state - 1)) as usize];
        if rng.gen::<f64>() < correct_prob {
            correct
        } else {
            let others: Vec<usize> = (0..self.strategies.len()).filter(|&s| s != correct).collect();
            *others.choose(rng).expect("at least two strategies")
        }
    }

    pub fn classifier(&self) -> TemplateClassifier {
        TemplateClassifier::new(self)
    }
}

/// Nearest-template classifier over token multisets with the topic slot abstracted.
#[derive(Clone, Debug)]
pub struct TemplateClassifier {
    templates: Vec<(usize, HashMap<String, usize>)>,
    topics: BTreeSet<String>,
    pub threshold: f64,
}

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.6;

impl TemplateClassifier {
    pub fn new(spec: &SyntheticSpec) -> Self {
        let templates = spec
            .strategies
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.templates.iter().map(move |t| (i, bag(t))))
            .collect();
        Self {
            templates,
            topics: spec.topics.iter().cloned().collect(),
            threshold: DEFAULT_MATCH_THRESHOLD,
        }
    }

    /// Best-matching strategy and its token F1 score. Ties go to the lowest strategy index.
    pub fn score(&self, text: &str) -> (usize, f64) {
        let normalized: String = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                if self.topics.contains(&w) {
                    TOPIC_SLOT.to_string()
                } else {
                    w
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        let words = bag(&normalized);
        let mut best = (0, f64::NEG_INFINITY);
        for (strategy, tmpl) in &self.templates {
            let s = f1(&words, tmpl);
            if s > best.1 || (s == best.1 && *strategy < best.0) {
                best = (*strategy, s);
            }
        }
        best
    }

    /// `None` when no template reaches the match threshold.
    pub fn classify(&self, text: &str) -> Option<usize> {
        let (s, score) = self.score(text);
        (score >= self.threshold).then_some(s)
    }
}

fn bag(text: &str) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for w in text.split_whitespace() {
        *m.entry(w.to_lowercase()).or_insert(0) += 1;
    }
    m
}

fn f1(a: &HashMap<String, usize>, b: &HashMap<String, usize>) -> f64 {
    let na: usize = a.values().sum();
    let nb: usize = b.values().sum();
    if na == 0 || nb == 0 {
        return 0.0;
    }
    let common: usize = a.iter().map(|(w, &c)| c.min(*b.get(w).unwrap_or(&0))).sum();
    2.0 * common as f64 / (na + nb) as f64
}

/// Generates `n` dialogues; a pure function of `(spec, n, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<DialogueRecord>> {
    spec.validate()?;
    Ok((0..n).map(|i| generate_one(spec, &format!("syn-{seed}-{i:05}"), seed, spec.behavior_correct_prob)).collect())
}

/// One dialogue under a behaviour policy that is correct with probability `correct_prob`.
pub fn generate_one(spec: &SyntheticSpec, id: &str, seed: u64, correct_prob: f64) -> DialogueRecord {
    let mut rng = rng_for(seed, id);
    let topic = spec.topics.choose(&mut rng).expect("non-empty").clone();
    let mut state = 0u8;
    let mut states = vec![state];
    let mut labels = Vec::new();
    let mut turns = vec![spec.opening(&topic, &mut rng)];
    while state < spec.max_state && labels.len() < spec.max_system_turns {
        let strategy = spec.behavior_strategy(state, correct_prob, &mut rng);
        turns.push(spec.system_utterance(strategy, &topic, &mut rng));
        state = spec.transition(state, Some(strategy), &mut rng);
        turns.push(spec.user_reply(state, &topic, &mut rng));
        labels.push(strategy);
        states.push(state);
    }
    let mut meta = BTreeMap::new();
    meta.insert("topic".to_string(), topic.clone());
    meta.insert("scene".to_string(), format!("support request about {topic}"));
    meta.insert(STATES_META_KEY.to_string(), format_states(&states));
    DialogueRecord { id: id.to_string(), meta, turns, ground_truth_labels: Some(labels) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_to_json, parse_corpus, validate_corpus};

    #[test]
    fn default_spec_is_valid_and_small() {
        let spec = SyntheticSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.num_strategies(), 6);
        assert!(spec.strategies.iter().all(|s| s.templates.len() == 20));
        let v = spec.vocabulary().len();
        assert!((150..=260).contains(&v), "vocabulary of {v} word types");
    }

    #[test]
    fn unreachable_solved_state_is_rejected() {
        let mut spec = SyntheticSpec { p_up_correct: 0.0, ..SyntheticSpec::default() };
        assert!(matches!(spec.validate(), Err(Error::Validation(_))));
        spec.p_up_correct = 0.8;
        spec.max_system_turns = 3;
        assert!(spec.validate().is_err());
        spec.max_system_turns = 10;
        spec.correct_strategy.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_records() {
        assert!(generate_synthetic(&SyntheticSpec::default(), 0, 1).unwrap().is_empty());
    }

    #[test]
    fn labels_are_in_range_and_records_valid() {
        let recs = generate_synthetic(&SyntheticSpec::default(), 300, 11).unwrap();
        validate_corpus(&recs).unwrap();
        for r in &recs {
            let labels = r.ground_truth_labels.as_ref().unwrap();
            assert!(labels.iter().all(|&l| l < 6));
            assert_eq!(labels.len(), r.system_turn_count());
            assert!(labels.len() <= 10);
        }
    }

    #[test]
    fn generation_is_pure() {
        let spec = SyntheticSpec::default();
        let a = corpus_to_json(&generate_synthetic(&spec, 50, 3).unwrap()).unwrap();
        let b = corpus_to_json(&generate_synthetic(&spec, 50, 3).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = corpus_to_json(&generate_synthetic(&spec, 50, 4).unwrap()).unwrap();
        assert_ne!(a, c);
        assert_eq!(parse_corpus(&a).unwrap(), generate_synthetic(&spec, 50, 3).unwrap());
    }

    #[test]
    fn all_correct_policy_solves_at_the_chain_rate() {
        // P(at least 4 successes in 10 Bernoulli(0.8) trials).
        let p_solve: f64 = (4..=10)
            .map(|k| binom(10, k) * 0.8f64.powi(k as i32) * 0.2f64.powi(10 - k as i32))
            .sum();
        let spec = SyntheticSpec::default();
        let n = 4000;
        let solved = (0..n)
            .filter(|i| {
                let r = generate_one(&spec, &format!("c{i}"), 5, 1.0);
                r.meta[STATES_META_KEY].ends_with('4')
            })
            .count();
        let rate = solved as f64 / n as f64;
        assert!((rate - p_solve).abs() < 0.01, "rate {rate} vs {p_solve}");
        let a = generate_one(&spec, "fixed", 9, 1.0);
        let b = generate_one(&spec, "fixed", 9, 1.0);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    fn binom(n: u64, k: u64) -> f64 {
        (1..=k).map(|i| (n - k + i) as f64 / i as f64).product()
    }

    #[test]
    fn classifier_recovers_rendered_templates() {
        let spec = SyntheticSpec::default();
        let clf = spec.classifier();
        let mut rng = rng_for(0, "clf");
        for (i, s) in spec.strategies.iter().enumerate() {
            for t in &s.templates {
                let text = SyntheticSpec::render(t, spec.topics.choose(&mut rng).unwrap());
                assert_eq!(clf.classify(&text), Some(i), "{text}");
            }
        }
        assert_eq!(clf.classify("zebra quantum banana"), None);
    }
}
