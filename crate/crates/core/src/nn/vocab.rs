//! Encoder vocabulary and model input construction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::bfs::GoldProgram;
use crate::executor::Value;
use crate::kb::EntityId;
use crate::linker::TypeAwareLabel;

pub const UNK: &str = "[UNK]";
pub const SEP: &str = "[SEP]";
pub const CTX: &str = "[CTX]";

pub const UNK_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const CTX_ID: usize = 2;

/// Token table built from a training corpus. Special tokens come first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRecord", into = "VocabRecord")]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl From<VocabRecord> for Vocab {
    fn from(r: VocabRecord) -> Self {
        Vocab::from_parts(r.tokens, r.counts)
    }
}

impl From<Vocab> for VocabRecord {
    fn from(v: Vocab) -> Self {
        VocabRecord {
            tokens: v.tokens,
            counts: v.counts,
        }
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_parts(vec![UNK.into(), SEP.into(), CTX.into()], vec![0, 0, 0])
    }
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, counts, index }
    }

    /// Keeps tokens seen at least `min_count` times, most frequent first,
    /// ties alphabetical.
    pub fn build<'a, I>(sequences: I, min_count: u64) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for seq in sequences {
            for t in seq {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, u64)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= min_count && ![UNK, SEP, CTX].contains(t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut v = Vocab::default();
        for (t, c) in entries {
            v.tokens.push(t.to_string());
            v.counts.push(c);
        }
        Self::from_parts(v.tokens, v.counts)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    /// Content tokens seen at most `max_count` times in training.
    pub fn is_rare(&self, id: usize, max_count: u64) -> bool {
        id > CTX_ID && self.count(id) <= max_count
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// An annotated entity span `[start, end)` in the model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GoldMention {
    pub entity: EntityId,
    pub start: usize,
    pub end: usize,
}

/// One model input: the history window, separators and the current turn,
/// followed by the context token.
#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    pub id: String,
    pub question_type: String,
    /// All `n` input tokens; the last one is [`CTX`].
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// Gold tags for positions `0..n-1`.
    pub labels: Option<Vec<TypeAwareLabel>>,
    pub mentions: Vec<GoldMention>,
    pub program: Option<GoldProgram>,
    pub answer: Option<Value>,
}

impl Question {
    /// Joins turns with [`SEP`], appends [`CTX`], and keeps at most
    /// `max_len` tokens by dropping from the left. Labels follow the same
    /// cut; the returned offset is the number of dropped tokens.
    pub fn assemble(
        turns: &[(Vec<String>, Option<Vec<TypeAwareLabel>>)],
        max_len: usize,
    ) -> (Vec<String>, Option<Vec<TypeAwareLabel>>, usize) {
        let mut tokens = Vec::new();
        let mut labels = Some(Vec::new());
        for (i, (toks, labs)) in turns.iter().enumerate() {
            if i > 0 {
                tokens.push(SEP.to_string());
                if let Some(l) = labels.as_mut() {
                    l.push(TypeAwareLabel::Outside);
                }
            }
            tokens.extend(toks.iter().cloned());
            match (labels.as_mut(), labs) {
                (Some(l), Some(labs)) => l.extend(labs.iter().copied()),
                _ => labels = None,
            }
        }
        let keep = max_len.saturating_sub(1).max(1);
        let cut = tokens.len().saturating_sub(keep);
        tokens.drain(..cut);
        if let Some(l) = labels.as_mut() {
            l.drain(..cut);
        }
        tokens.push(CTX.to_string());
        (tokens, labels, cut)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Input tokens without the trailing context token.
    pub fn content(&self) -> &[String] {
        &self.tokens[..self.tokens.len().saturating_sub(1)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn specials_come_first() {
        let seqs = [toks("b a a"), toks("c a")];
        let v = Vocab::build(seqs.iter().map(|s| s.as_slice()), 1);
        assert_eq!(v.token(UNK_ID), UNK);
        assert_eq!(v.token(CTX_ID), CTX);
        assert_eq!(v.token(3), "a");
        assert_eq!(v.id("zzz"), UNK_ID);
        assert!(v.is_rare(v.id("b"), 1));
        assert!(!v.is_rare(v.id("a"), 1));
    }

    #[test]
    fn assemble_joins_history() {
        let (t, l, cut) = Question::assemble(&[(toks("x y"), None), (toks("z"), None)], 64);
        assert_eq!(t, toks("x y [SEP] z [CTX]"));
        assert!(l.is_none());
        assert_eq!(cut, 0);
        let (t, _, cut) = Question::assemble(&[(toks("x y"), None), (toks("z"), None)], 3);
        assert_eq!(t, toks("[SEP] z [CTX]"));
        assert_eq!(cut, 2);
    }
}
