//! Conversation data model: turns of (human, reasoning, response) token
//! sequences, validation, delimiter insertion, and length bookkeeping.

use thiserror::Error;

/// Index into some tokenizer's vocabulary. The packing machinery never looks
/// at token content, only at lengths and equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// One turn: the human message, the model's (later discarded) reasoning, and
/// the response that stays in history. Reasoning may be empty; the other two
/// may not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub human: Vec<TokenId>,
    pub reasoning: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl Turn {
    pub fn new(human: Vec<u32>, reasoning: Vec<u32>, response: Vec<u32>) -> Self {
        let wrap = |v: Vec<u32>| v.into_iter().map(TokenId).collect();
        Turn {
            human: wrap(human),
            reasoning: wrap(reasoning),
            response: wrap(response),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// A conversation that passed [`validate_conversation`]. Construction is
/// private to this module, so holding one is proof the invariants hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedConversation(Conversation);

impl ValidatedConversation {
    pub fn id(&self) -> &str {
        &self.0.id
    }

    pub fn turns(&self) -> &[Turn] {
        &self.0.turns
    }

    pub fn n_turns(&self) -> usize {
        self.0.turns.len()
    }

    pub fn as_conversation(&self) -> &Conversation {
        &self.0
    }

    pub fn into_conversation(self) -> Conversation {
        self.0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ValidationError {
    #[error("conversation has no turns")]
    EmptyConversation,
    #[error("turn {turn}: human message is empty")]
    EmptyHuman { turn: usize },
    #[error("turn {turn}: response is empty")]
    EmptyResponse { turn: usize },
    #[error("turn {turn}: token {token} is out of range for vocabulary size {vocab}")]
    TokenOutOfRange { turn: usize, token: u32, vocab: u32 },
}

/// Check structural invariants: at least one turn, non-empty human and
/// response in every turn (reasoning may be empty), and, when a vocabulary
/// size is supplied, every token below it. Turn numbers in errors are
/// 1-based.
pub fn validate_conversation(
    raw: Conversation,
    vocab: Option<u32>,
) -> Result<ValidatedConversation, ValidationError> {
    if raw.turns.is_empty() {
        return Err(ValidationError::EmptyConversation);
    }
    for (i, turn) in raw.turns.iter().enumerate() {
        let turn_no = i + 1;
        if turn.human.is_empty() {
            return Err(ValidationError::EmptyHuman { turn: turn_no });
        }
        if turn.response.is_empty() {
            return Err(ValidationError::EmptyResponse { turn: turn_no });
        }
        if let Some(v) = vocab {
            for tok in turn
                .human
                .iter()
                .chain(turn.reasoning.iter())
                .chain(turn.response.iter())
            {
                if tok.0 >= v {
                    return Err(ValidationError::TokenOutOfRange {
                        turn: turn_no,
                        token: tok.0,
                        vocab: v,
                    });
                }
            }
        }
    }
    Ok(ValidatedConversation(raw))
}

/// Append `sep` to every reasoning sequence (an empty reasoning becomes just
/// `[sep]`) and `eot` to every response. Keeps the conversation valid, since
/// it only ever lengthens sequences.
pub fn apply_delimiters(
    c: &ValidatedConversation,
    sep: TokenId,
    eot: TokenId,
) -> ValidatedConversation {
    let mut out = c.0.clone();
    for turn in &mut out.turns {
        turn.reasoning.push(sep);
        turn.response.push(eot);
    }
    ValidatedConversation(out)
}

/// Per-turn lengths plus the two headline sizes: the longest naive input
/// (the final pass, which carries all earlier history plus its own
/// reasoning) and the packed input (every response counted twice).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationStats {
    pub n_turns: usize,
    pub h_lens: Vec<usize>,
    pub t_lens: Vec<usize>,
    pub r_lens: Vec<usize>,
    pub naive_final_len: usize,
    pub packed_len: usize,
}

pub fn conversation_stats(c: &ValidatedConversation) -> ConversationStats {
    let h_lens: Vec<usize> = c.turns().iter().map(|t| t.human.len()).collect();
    let t_lens: Vec<usize> = c.turns().iter().map(|t| t.reasoning.len()).collect();
    let r_lens: Vec<usize> = c.turns().iter().map(|t| t.response.len()).collect();
    let hist: usize = h_lens.iter().sum::<usize>() + r_lens.iter().sum::<usize>();
    let naive_final_len = hist + t_lens.last().copied().unwrap_or(0);
    let packed_len = hist + t_lens.iter().sum::<usize>() + r_lens.iter().sum::<usize>();
    ConversationStats {
        n_turns: c.n_turns(),
        h_lens,
        t_lens,
        r_lens,
        naive_final_len,
        packed_len,
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::{c1, singleton};
    use super::*;

    fn conv(turns: Vec<Turn>) -> Conversation {
        Conversation {
            id: "t".into(),
            turns,
        }
    }

    #[test]
    fn rejects_empty_conversation() {
        let err = validate_conversation(conv(vec![]), None).unwrap_err();
        assert_eq!(err, ValidationError::EmptyConversation);
    }

    #[test]
    fn rejects_empty_human_and_response() {
        let err = validate_conversation(conv(vec![Turn::new(vec![], vec![], vec![1])]), None);
        assert_eq!(err.unwrap_err(), ValidationError::EmptyHuman { turn: 1 });
        let err = validate_conversation(
            conv(vec![
                Turn::new(vec![1], vec![], vec![2]),
                Turn::new(vec![1], vec![], vec![]),
            ]),
            None,
        );
        assert_eq!(err.unwrap_err(), ValidationError::EmptyResponse { turn: 2 });
    }

    #[test]
    fn empty_reasoning_is_allowed() {
        let c = validate_conversation(conv(vec![Turn::new(vec![1], vec![], vec![2])]), None);
        assert!(c.is_ok());
    }

    #[test]
    fn vocab_bound_is_checked_when_given() {
        let raw = conv(vec![Turn::new(vec![1, 96], vec![], vec![2])]);
        assert!(validate_conversation(raw.clone(), Some(97)).is_ok());
        let err = validate_conversation(raw, Some(96)).unwrap_err();
        assert_eq!(
            err,
            ValidationError::TokenOutOfRange {
                turn: 1,
                token: 96,
                vocab: 96
            }
        );
    }

    #[test]
    fn delimiters_append_to_reasoning_and_response() {
        let c = validate_conversation(conv(vec![Turn::new(vec![5], vec![], vec![6])]), None)
            .unwrap();
        let d = apply_delimiters(&c, TokenId(90), TokenId(91));
        assert_eq!(d.turns()[0].reasoning, vec![TokenId(90)]);
        assert_eq!(d.turns()[0].response, vec![TokenId(6), TokenId(91)]);

        let d = apply_delimiters(&c1(), TokenId(90), TokenId(91));
        for turn in d.turns() {
            assert_eq!(*turn.reasoning.last().unwrap(), TokenId(90));
            assert_eq!(*turn.response.last().unwrap(), TokenId(91));
        }
    }

    #[test]
    fn stats_match_hand_counts() {
        let three = validate_conversation(
            conv(vec![
                Turn::new(vec![1, 2], vec![3, 4, 5], vec![6, 7]);
                3
            ]),
            None,
        )
        .unwrap();
        let s = conversation_stats(&three);
        assert_eq!(s.naive_final_len, 15);
        assert_eq!(s.packed_len, 27);

        let s = conversation_stats(&singleton());
        assert_eq!(s.naive_final_len, 3);
        assert_eq!(s.packed_len, 4);
        assert_eq!(s.n_turns, 1);
    }

    #[test]
    fn packed_minus_naive_is_history_reasoning_plus_responses() {
        // packed_len - naive_final_len = sum of non-final reasoning lengths
        // plus sum of all response lengths
        for c in [c1(), singleton()] {
            let s = conversation_stats(&c);
            let non_final_t: usize = s.t_lens[..s.n_turns - 1].iter().sum();
            let all_r: usize = s.r_lens.iter().sum();
            assert_eq!(s.packed_len - s.naive_final_len, non_final_t + all_r);
        }
    }
}
