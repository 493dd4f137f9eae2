//! Self-play evaluation against a user simulator and a critic.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::critic::{critic_reward, Critic, CriticQuery};
use crate::corpus::synthetic::{SyntheticSpec, TemplateClassifier};
use crate::corpus::{DialogueRecord, Turn};
use crate::error::{Error, Result};
use crate::models::{DecodeParams, ModelBundle, PolicyDistribution};
use crate::rng::{derive_seed, rng_for};
use crate::scalar::Scalar;

pub const DEFAULT_ETA: f64 = 0.6;
pub const DEFAULT_MAX_TURNS: usize = 10;
pub const DEFAULT_VOTES: usize = 10;

/// Starting point of one evaluation dialogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub case_id: String,
    pub meta: BTreeMap<String, String>,
    /// Turns that seed the history, ending with a user turn.
    pub history: Vec<Turn>,
    pub initial_state: u8,
}

/// `n` synthetic cases, each opened by the simulated user.
pub fn synthetic_cases(spec: &SyntheticSpec, n: usize, seed: u64) -> Vec<EvalCase> {
    (0..n)
        .map(|i| {
            let case_id = format!("case-{seed}-{i:04}");
            let mut rng = rng_for(seed, &case_id);
            let topic = spec.topics.choose(&mut rng).expect("non-empty").clone();
            let opening = spec.opening(&topic, &mut rng);
            let meta = BTreeMap::from([
                ("topic".to_string(), topic.clone()),
                ("scene".to_string(), format!("support request about {topic}")),
            ]);
            EvalCase { case_id, meta, history: vec![opening], initial_state: 0 }
        })
        .collect()
}

/// Cases seeded with the first `context_turns` turns of recorded dialogues.
pub fn cases_from_records(records: &[DialogueRecord], context_turns: usize) -> Result<Vec<EvalCase>> {
    records
        .iter()
        .map(|r| {
            if r.turns.len() < context_turns || context_turns == 0 {
                return Err(Error::Validation(format!("record {} has fewer than {context_turns} turns", r.id)));
            }
            let mut meta = r.meta.clone();
            meta.remove(crate::corpus::critic::STATES_META_KEY);
            Ok(EvalCase { case_id: r.id.clone(), meta, history: r.turns[..context_turns].to_vec(), initial_state: 0 })
        })
        .collect()
}

pub trait UserSimulator: Send + Sync {
    /// The user's reply to the latest system turn and the new hidden state.
    fn reply(&self, state: u8, case: &EvalCase, history: &[Turn], rng: &mut ChaCha8Rng) -> Result<(Turn, u8)>;
}

/// Template user driven by the synthetic state chain.
///
/// The latest system turn is matched to its nearest strategy template; unmatched
/// replies count as off-strategy.
#[derive(Clone, Debug)]
pub struct ScriptedUser {
    pub spec: SyntheticSpec,
    pub classifier: TemplateClassifier,
}

impl ScriptedUser {
    pub fn new(spec: SyntheticSpec) -> Self {
        let classifier = spec.classifier();
        Self { spec, classifier }
    }
}

impl UserSimulator for ScriptedUser {
    fn reply(&self, state: u8, case: &EvalCase, history: &[Turn], rng: &mut ChaCha8Rng) -> Result<(Turn, u8)> {
        if state > self.spec.max_state {
            return Err(Error::Validation(format!("user state {state} outside 0..={}", self.spec.max_state)));
        }
        let strategy = history.last().and_then(|t| self.classifier.classify(&t.text));
        let next = self.spec.transition(state, strategy, rng);
        let topic = case.meta.get("topic").map_or(self.spec.topics[0].as_str(), String::as_str);
        Ok((self.spec.user_reply(next, topic, rng), next))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerMode {
    /// Latent is the planner-weighted mixture of codebook rows.
    Mixture,
    /// Latent is the codebook row of the planner's most likely code.
    Argmax,
    /// A uniformly drawn code each turn, ignoring the planner.
    Random,
}

#[derive(Clone, Debug)]
pub struct EpisodeParams {
    pub max_turns: usize,
    pub eta: f64,
    pub votes: usize,
    pub decode: DecodeParams,
    pub planner: PlannerMode,
    /// Attempts per critic call before the episode is aborted.
    pub critic_attempts: usize,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            max_turns: DEFAULT_MAX_TURNS,
            eta: DEFAULT_ETA,
            votes: DEFAULT_VOTES,
            decode: DecodeParams::default(),
            planner: PlannerMode::Mixture,
            critic_attempts: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Completed,
    GenerationError,
    CriticError,
    UserError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub case_id: String,
    pub turns: Vec<Turn>,
    pub turn_rewards: Vec<f64>,
    pub success: bool,
    pub num_turns: usize,
    pub final_reward: f64,
    pub seed: u64,
    pub policy_trace: Vec<PolicyDistribution>,
    pub status: EpisodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EpisodeLog {
    pub fn aborted(&self) -> bool {
        self.status != EpisodeStatus::Completed
    }
}

fn choose_policy<S: Scalar>(bundle: &ModelBundle<S>, history: &[Turn], mode: PlannerMode, rng: &mut ChaCha8Rng) -> PolicyDistribution {
    let k = bundle.num_codes();
    match mode {
        PlannerMode::Mixture => bundle.plan_policy(history),
        PlannerMode::Argmax => PolicyDistribution::one_hot(k, bundle.plan_policy(history).argmax()),
        PlannerMode::Random => PolicyDistribution::one_hot(k, rng.gen_range(0..k)),
    }
}

/// Plays one case to success or the turn budget.
///
/// An aborted episode counts as a failure at the turn budget; its final reward is
/// the last scored turn, or the worst reward when no turn was scored.
pub fn run_episode<S: Scalar>(
    bundle: &ModelBundle<S>,
    user: &dyn UserSimulator,
    critic: &dyn Critic,
    case: &EvalCase,
    params: &EpisodeParams,
    seed: u64,
) -> Result<EpisodeLog> {
    if params.max_turns == 0 || params.votes == 0 || params.critic_attempts == 0 {
        return Err(Error::Validation("max_turns, votes and critic_attempts must be at least 1".into()));
    }
    let episode_seed = derive_seed(seed, &case.case_id);
    let mut rng = rng_for(episode_seed, "episode");
    let mut history = case.history.clone();
    let mut state = case.initial_state;
    let mut rewards = Vec::new();
    let mut trace = Vec::new();
    let mut status = EpisodeStatus::Completed;
    let mut error = None;
    for turn in 0..params.max_turns {
        let policy = choose_policy(bundle, &history, params.planner, &mut rng);
        let reply = match bundle.respond(&history, &policy, &params.decode, &mut rng) {
            Ok(g) => g.turn,
            Err(e) => {
                (status, error) = (EpisodeStatus::GenerationError, Some(e.to_string()));
                break;
            }
        };
        trace.push(policy);
        history.push(reply);
        let before = state;
        match user.reply(state, case, &history, &mut rng) {
            Ok((u, s)) => {
                history.push(u);
                state = s;
            }
            Err(e) => {
                (status, error) = (EpisodeStatus::UserError, Some(e.to_string()));
                break;
            }
        }
        let item = format!("{}/turn{turn}", case.case_id);
        let query = CriticQuery { item_id: &item, conversation: &history, meta: Some(&case.meta), transition: Some((before, state)) };
        let mut scored = None;
        for attempt in 1..=params.critic_attempts {
            match critic_reward(critic, &query, params.votes, episode_seed) {
                Ok(r) => {
                    scored = Some(r);
                    break;
                }
                Err(e @ Error::Transport { .. }) if attempt < params.critic_attempts => warn!("{item}: {e}; retrying"),
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let Some(r) = scored else {
            status = EpisodeStatus::CriticError;
            break;
        };
        rewards.push(r);
        if r > params.eta {
            break;
        }
    }
    let completed = status == EpisodeStatus::Completed;
    let final_reward = rewards.last().copied().unwrap_or(crate::corpus::critic::LABEL_VALUES[0]);
    Ok(EpisodeLog {
        case_id: case.case_id.clone(),
        turns: history,
        success: completed && final_reward > params.eta,
        num_turns: if completed { rewards.len() } else { params.max_turns },
        final_reward,
        turn_rewards: rewards,
        seed: episode_seed,
        policy_trace: trace,
        status,
        error,
    })
}

/// Runs every case; episodes are spread over the available cores and returned in case order.
pub fn run_cases<S: Scalar>(
    bundle: &ModelBundle<S>,
    user: &dyn UserSimulator,
    critic: &dyn Critic,
    cases: &[EvalCase],
    params: &EpisodeParams,
    seed: u64,
) -> Result<Vec<EpisodeLog>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cases.len().max(1));
    if workers <= 1 {
        return cases.iter().map(|c| run_episode(bundle, user, critic, c, params, seed)).collect();
    }
    let chunk = cases.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|c| run_episode(bundle, user, critic, c, params, seed)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut logs = Vec::with_capacity(cases.len());
        for h in handles {
            logs.extend(h.join().expect("episode worker panicked")?);
        }
        Ok(logs)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ssr: f64,
    pub sr: f64,
    pub avg_t: f64,
    pub n_cases: usize,
}

pub fn compute_metrics(logs: &[EpisodeLog], eta: f64) -> Result<Metrics> {
    if logs.is_empty() {
        return Err(Error::Validation("no episode logs to score".into()));
    }
    let n = logs.len() as f64;
    Ok(Metrics {
        ssr: logs.iter().map(|l| l.final_reward).sum::<f64>() / n,
        sr: logs.iter().filter(|l| l.final_reward > eta).count() as f64 / n,
        avg_t: logs.iter().map(|l| l.num_turns as f64).sum::<f64>() / n,
        n_cases: logs.len(),
    })
}

pub fn logs_to_jsonl(logs: &[EpisodeLog]) -> Result<String> {
    let mut out = String::new();
    for l in logs {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn metrics_csv(rows: &[(&str, Metrics)]) -> String {
    let mut out = String::from("name,ssr,sr,avg_t,n_cases\n");
    for (name, m) in rows {
        let _ = writeln!(out, "{name},{},{},{},{}", m.ssr, m.sr, m.avg_t, m.n_cases);
    }
    out
}
