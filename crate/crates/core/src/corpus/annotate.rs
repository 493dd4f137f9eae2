use std::fmt;

use log::warn;

use super::critic::{critic_reward, Critic, CriticQuery};
use super::TrainingTuple;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AnnotateOptions {
    pub votes: usize,
    pub seed: u64,
    /// Extra attempts after a transport failure before giving up.
    pub retries: usize,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self { votes: 10, seed: 0, retries: 2 }
    }
}

/// Annotation stopped early; `completed` holds the tuples finished before the failure.
#[derive(Debug)]
pub struct AnnotateError {
    pub completed: Vec<TrainingTuple>,
    pub failed_item: String,
    pub source: Error,
}

impl fmt::Display for AnnotateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "annotation aborted at {} after {} tuples: {}",
            self.failed_item,
            self.completed.len(),
            self.source
        )
    }
}

impl std::error::Error for AnnotateError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// Sets each tuple's reward to the mean of `votes` critic values on its next history.
pub fn annotate_rewards(
    tuples: &[TrainingTuple],
    critic: &dyn Critic,
    options: &AnnotateOptions,
) -> std::result::Result<Vec<TrainingTuple>, AnnotateError> {
    let mut out = Vec::with_capacity(tuples.len());
    for tuple in tuples {
        let id = tuple.id();
        match reward_with_retries(tuple, &id, critic, options) {
            Ok(r) => {
                let mut t = tuple.clone();
                t.reward = Some(r);
                out.push(t);
            }
            Err(source) => {
                return Err(AnnotateError { completed: out, failed_item: id, source });
            }
        }
    }
    Ok(out)
}

fn reward_with_retries(
    tuple: &TrainingTuple,
    id: &str,
    critic: &dyn Critic,
    options: &AnnotateOptions,
) -> Result<f64> {
    let query = CriticQuery { item_id: id, conversation: &tuple.next_history, meta: None, transition: None };
    let mut attempt = 0;
    loop {
        match critic_reward(critic, &query, options.votes, options.seed) {
            Err(Error::Transport { item, message }) if attempt < options.retries => {
                attempt += 1;
                warn!("critic transport failure on {item} (attempt {attempt}): {message}");
            }
            other => return other,
        }
    }
}
