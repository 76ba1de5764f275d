//! Dialog records (one JSON object per line) and their conversion into
//! model inputs.
//!
//! ```text
//! {"id": "d1", "turns": [
//!   {"speaker": "user", "utterance": "who owns deram records ?",
//!    "question_type": "Simple Question (Direct)",
//!    "labels": ["O", "O", "B-record_label", "I-record_label", "O"],
//!    "mentions": [{"entity": "Q3", "start": 2, "end": 4}],
//!    "answer": {"entities": ["Q5"]},
//!    "gold_lf": "find(set(Q3), owned_by)"},
//!   {"speaker": "system", "utterance": "owner corp", ...}]}
//! ```
//!
//! `labels` has one tag per token of the tokenized utterance; `mentions`
//! index the same tokens. `gold_lf` uses catalog ids. Turns that carry a
//! `question_type` and an `answer` become questions.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::bfs::{bfs_search, EntryPools, GoldProgram, SearchConfig, SuccessReport};
use crate::error::{Error, Result};
use crate::executor::Value;
use crate::grammar::{EntityRef, Instantiation, LogicalForm, NumberRef};
use crate::kb::KnowledgeBase;
use crate::linker::TypeAwareLabel;
use crate::nn::{GoldMention, Question, Vocab};
use crate::text::{parse_number, tokenize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub entity: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerRecord {
    Entities { entities: Vec<String> },
    Bool { bool: bool },
    Number { number: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mentions: Vec<MentionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<AnswerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_lf: Option<String>,
}

impl Turn {
    pub fn is_question(&self) -> bool {
        self.speaker == Speaker::User && self.question_type.is_some() && self.answer.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
}

fn check_turn(dialog: &str, i: usize, t: &Turn) -> Result<()> {
    let n = tokenize(&t.utterance).len();
    let ctx = || format!("{dialog} turn {i}");
    if let Some(l) = &t.labels {
        if l.len() != n {
            return Err(Error::data(ctx(), format!("{} labels for {n} tokens", l.len())));
        }
    }
    for m in &t.mentions {
        if m.start >= m.end || m.end > n {
            return Err(Error::data(
                ctx(),
                format!("mention [{}, {}) outside {n} tokens", m.start, m.end),
            ));
        }
    }
    Ok(())
}

/// Parses dialog records, one per non-blank line.
pub fn load_dialogs<R: BufRead>(reader: R) -> Result<Vec<Dialog>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialog = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        for (k, t) in d.turns.iter().enumerate() {
            check_turn(&d.id, k, t)?;
        }
        out.push(d);
    }
    Ok(out)
}

pub fn write_dialogs<W: Write>(mut w: W, dialogs: &[Dialog]) -> Result<()> {
    for d in dialogs {
        serde_json::to_writer(&mut w, d)?;
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuestionConfig {
    /// Preceding utterances placed before the current turn.
    pub history: usize,
    pub max_input_len: usize,
}

impl Default for QuestionConfig {
    fn default() -> Self {
        QuestionConfig {
            history: 2,
            max_input_len: 64,
        }
    }
}

pub fn answer_value(a: &AnswerRecord, kb: &KnowledgeBase) -> Result<Value> {
    Ok(match a {
        AnswerRecord::Entities { entities } => Value::Set(
            entities
                .iter()
                .map(|e| {
                    kb.entity_id(e)
                        .ok_or_else(|| Error::Reference(format!("entity {e} in answer")))
                })
                .collect::<Result<BTreeSet<_>>>()?,
        ),
        AnswerRecord::Bool { bool } => Value::Bool(*bool),
        AnswerRecord::Number { number } => Value::Num(*number),
    })
}

pub fn answer_record(v: &Value, kb: &KnowledgeBase) -> AnswerRecord {
    match v {
        Value::Set(s) => AnswerRecord::Entities {
            entities: s.iter().map(|&e| kb.entity_name(e).to_string()).collect(),
        },
        Value::Bool(b) => AnswerRecord::Bool { bool: *b },
        Value::Num(n) => AnswerRecord::Number { number: *n },
    }
}

/// Points every entity leaf at the start of its latest mention and every
/// number leaf at its latest occurrence in the input.
fn point(lf: &LogicalForm, q: &Question) -> Option<LogicalForm> {
    lf.map_leaves(|inst| match *inst {
        Instantiation::Entity(EntityRef::Id(e)) => q
            .mentions
            .iter()
            .filter(|m| m.entity == e)
            .map(|m| m.start)
            .max()
            .map(|p| Instantiation::Entity(EntityRef::Pointer(p)))
            .ok_or_else(|| Error::Substitution(format!("entity {e} is not mentioned"))),
        Instantiation::Number(NumberRef::Literal(n)) => q
            .content()
            .iter()
            .rposition(|t| parse_number(t) == Some(n))
            .map(|p| Instantiation::Number(NumberRef::Pointer(p)))
            .ok_or_else(|| Error::Substitution(format!("number {n} is not in the question"))),
        other => Ok(other),
    })
    .ok()
}

/// Model inputs for every question turn. Token ids are left empty; see
/// [`encode_questions`].
pub fn build_questions(dialogs: &[Dialog], kb: &KnowledgeBase, cfg: &QuestionConfig) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    for d in dialogs {
        for (i, turn) in d.turns.iter().enumerate() {
            if !turn.is_question() {
                continue;
            }
            let id = format!("{}#{i}", d.id);
            let window = &d.turns[i.saturating_sub(cfg.history)..=i];
            let mut parts = Vec::with_capacity(window.len());
            for t in window {
                let labels = match &t.labels {
                    Some(l) => Some(
                        l.iter()
                            .map(|s| TypeAwareLabel::parse(s, kb))
                            .collect::<Result<Vec<_>>>()
                            .map_err(|e| Error::data(&id, e.to_string()))?,
                    ),
                    None => None,
                };
                parts.push((tokenize(&t.utterance), labels));
            }
            let (tokens, labels, cut) = Question::assemble(&parts, cfg.max_input_len);
            let mut mentions = Vec::new();
            let mut offset = 0usize;
            for (t, (toks, _)) in window.iter().zip(&parts) {
                for m in &t.mentions {
                    let entity = kb
                        .entity_id(&m.entity)
                        .ok_or_else(|| Error::Reference(format!("entity {} in {id}", m.entity)))?;
                    if offset + m.start >= cut {
                        mentions.push(GoldMention {
                            entity,
                            start: offset + m.start - cut,
                            end: offset + m.end - cut,
                        });
                    }
                }
                offset += toks.len() + 1;
            }
            let answer = turn.answer.as_ref().map(|a| answer_value(a, kb)).transpose()?;
            let mut q = Question {
                id: id.clone(),
                question_type: turn.question_type.clone().unwrap_or_default(),
                tokens,
                ids: Vec::new(),
                labels,
                mentions,
                program: None,
                answer,
            };
            if let Some(text) = &turn.gold_lf {
                let resolved = LogicalForm::parse(text, kb).map_err(|e| Error::data(&id, e.to_string()))?;
                if !resolved.is_resolved() {
                    return Err(Error::data(&id, "gold_lf must use catalog ids, not pointers"));
                }
                match point(&resolved, &q) {
                    Some(pointed) => q.program = Some(GoldProgram::new(pointed, resolved)?),
                    None => log::warn!("{id}: gold form refers to something outside the input window"),
                }
            }
            out.push(q);
        }
    }
    Ok(out)
}

pub fn encode_questions(questions: &mut [Question], vocab: &Vocab) {
    for q in questions {
        q.ids = vocab.encode(&q.tokens);
    }
}

/// Entry pools from gold mentions, all predicates and types, and the
/// integers in the input.
pub fn entry_pools(q: &Question, kb: &KnowledgeBase) -> EntryPools {
    let mut latest: Vec<(crate::kb::EntityId, usize)> = Vec::new();
    for m in &q.mentions {
        match latest.iter_mut().find(|(e, _)| *e == m.entity) {
            Some(slot) => slot.1 = slot.1.max(m.start),
            None => latest.push((m.entity, m.start)),
        }
    }
    let mut numbers: Vec<(u64, usize)> = Vec::new();
    for (i, t) in q.content().iter().enumerate() {
        if let Some(n) = parse_number(t) {
            numbers.retain(|(v, _)| *v != n);
            numbers.push((n, i));
        }
    }
    EntryPools {
        entities: latest,
        predicates: kb.predicates().collect(),
        types: kb.types().collect(),
        numbers,
    }
}

/// Fills missing gold programs by searching for forms that reproduce the
/// annotated answer; returns the per-type success ratio.
pub fn annotate_with_search(questions: &mut [Question], kb: &KnowledgeBase, cfg: &SearchConfig) -> SuccessReport {
    use rayon::prelude::*;
    let found: Vec<Option<GoldProgram>> = questions
        .par_iter()
        .map(|q| {
            if q.program.is_some() {
                return q.program.clone();
            }
            let gold = q.answer.as_ref()?;
            bfs_search(&entry_pools(q, kb), gold, kb, cfg).best().cloned()
        })
        .collect();
    let mut outcomes = Vec::with_capacity(questions.len());
    for (q, p) in questions.iter_mut().zip(found) {
        outcomes.push((q.question_type.clone(), p.is_some()));
        q.program = p;
    }
    SuccessReport::from_outcomes(outcomes)
}
