use super::{DialogueRecord, Role, TrainingTuple, Turn};

/// Splits each dialogue into one tuple per system turn, in dialogue then turn order.
pub fn decompose(records: &[DialogueRecord]) -> Vec<TrainingTuple> {
    let mut out = Vec::new();
    for record in records {
        let sys_positions: Vec<usize> = record
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::System)
            .map(|(i, _)| i)
            .collect();
        let last = sys_positions.len().saturating_sub(1);
        for (ordinal, &pos) in sys_positions.iter().enumerate() {
            let history = record.turns[..pos].to_vec();
            let sys_utterance = record.turns[pos].clone();
            let usr_reply = record.turns.get(pos + 1).filter(|t| t.role == Role::User).cloned();
            let mut next_history = history.clone();
            next_history.push(sys_utterance.clone());
            if let Some(reply) = &usr_reply {
                next_history.push(reply.clone());
            }
            out.push(TrainingTuple {
                dialogue_id: record.id.clone(),
                turn_index: ordinal,
                is_terminal: usr_reply.is_none() || ordinal == last,
                history,
                sys_utterance,
                usr_reply,
                next_history,
                reward: None,
                pseudo_label: None,
            });
        }
    }
    out
}

/// Inverse of [`decompose`] for one dialogue's tuples: the first history followed by
/// each system utterance and its reply.
pub fn reconstruct(tuples: &[TrainingTuple]) -> Vec<Turn> {
    let Some(first) = tuples.first() else { return Vec::new() };
    let mut turns = first.history.clone();
    for t in tuples {
        turns.push(t.sys_utterance.clone());
        if let Some(r) = &t.usr_reply {
            turns.push(r.clone());
        }
    }
    turns
}
