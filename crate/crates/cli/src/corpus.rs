//! JSONL corpus: one conversation per line, `{"id": ..., "turns": [{"h":
//! [...], "t": [...], "r": [...]}, ...]}`. `t` may be omitted for turns
//! without reasoning.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;
use turnpack_core::{
    validate_conversation, Conversation, Turn, ValidatedConversation, ValidationError,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line} ({id}): {source}")]
    Validation {
        line: usize,
        id: String,
        source: ValidationError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub h: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t: Vec<u32>,
    pub r: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub turns: Vec<TurnRecord>,
}

impl From<ConversationRecord> for Conversation {
    fn from(rec: ConversationRecord) -> Self {
        Conversation {
            id: rec.id,
            turns: rec
                .turns
                .into_iter()
                .map(|t| Turn::new(t.h, t.t, t.r))
                .collect(),
        }
    }
}

impl From<&Conversation> for ConversationRecord {
    fn from(c: &Conversation) -> Self {
        ConversationRecord {
            id: c.id.clone(),
            turns: c
                .turns
                .iter()
                .map(|t| TurnRecord {
                    h: t.human.iter().map(|x| x.0).collect(),
                    t: t.reasoning.iter().map(|x| x.0).collect(),
                    r: t.response.iter().map(|x| x.0).collect(),
                })
                .collect(),
        }
    }
}

/// Read every conversation, unvalidated, with 1-based line numbers in
/// errors. Blank lines are skipped so trailing newlines stay harmless.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Conversation>, CorpusError> {
    Ok(read_corpus_with_lines(reader)?
        .into_iter()
        .map(|(_, c)| c)
        .collect())
}

/// Read and validate, optionally bounding tokens by a vocabulary size.
pub fn read_corpus_validated<R: BufRead>(
    reader: R,
    vocab: Option<u32>,
) -> Result<Vec<ValidatedConversation>, CorpusError> {
    let mut out = Vec::new();
    for (line, c) in read_corpus_with_lines(reader)? {
        let id = c.id.clone();
        let v = validate_conversation(c, vocab)
            .map_err(|source| CorpusError::Validation { line, id, source })?;
        out.push(v);
    }
    Ok(out)
}

fn read_corpus_with_lines<R: BufRead>(
    reader: R,
) -> Result<Vec<(usize, Conversation)>, CorpusError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConversationRecord =
            serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                line: idx + 1,
                source,
            })?;
        out.push((idx + 1, rec.into()));
    }
    Ok(out)
}

/// Write conversations as JSONL, one compact record per line.
pub fn write_corpus<W: Write>(writer: &mut W, cs: &[Conversation]) -> Result<(), CorpusError> {
    for c in cs {
        let rec = ConversationRecord::from(c);
        serde_json::to_writer(&mut *writer, &rec).map_err(|e| CorpusError::Io(e.into()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
