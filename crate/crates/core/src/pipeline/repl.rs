//! Line-oriented question answering with a rolling dialog history.
//!
//! Each input line is a user utterance. `:reset` forgets the history and
//! `:quit` ends the session.

use std::io::{BufRead, Write};

use crate::executor::Value;
use crate::inference::{Parser, Response};
use crate::kb::KnowledgeBase;
use crate::nn::{Question, Vocab};
use crate::scalar::Scalar;
use crate::text::tokenize;

/// How a system turn is phrased in the history.
pub fn answer_utterance(v: &Value, kb: &KnowledgeBase) -> String {
    match v {
        Value::Set(s) if s.is_empty() => "nothing".into(),
        Value::Set(s) => s.iter().map(|&e| kb.entity_text(e)).collect::<Vec<_>>().join(" , "),
        Value::Bool(b) => if *b { "yes" } else { "no" }.into(),
        Value::Num(n) => n.to_string(),
    }
}

pub struct Session<'a, T> {
    parser: Parser<'a, T>,
    vocab: &'a Vocab,
    /// Preceding utterances kept for the next question.
    pub history_len: usize,
    pub max_input_len: usize,
    history: Vec<String>,
    turn: usize,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(parser: Parser<'a, T>, vocab: &'a Vocab, history_len: usize, max_input_len: usize) -> Self {
        Session {
            parser,
            vocab,
            history_len,
            max_input_len,
            history: Vec::new(),
            turn: 0,
        }
    }

    pub fn history(&self) -> &[String] {
        &self.history
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Adds an utterance to the history without answering it.
    pub fn remember(&mut self, utterance: &str) {
        self.history.push(utterance.to_string());
    }

    /// Model input for `utterance` given the current history.
    pub fn question(&self, utterance: &str) -> Question {
        let start = self.history.len().saturating_sub(self.history_len);
        let mut turns: Vec<(Vec<String>, Option<Vec<_>>)> =
            self.history[start..].iter().map(|u| (tokenize(u), None)).collect();
        turns.push((tokenize(utterance), None));
        let (tokens, _, _) = Question::assemble(&turns, self.max_input_len);
        Question {
            id: format!("repl#{}", self.turn),
            question_type: String::new(),
            ids: self.vocab.encode(&tokens),
            tokens,
            labels: None,
            mentions: Vec::new(),
            program: None,
            answer: None,
        }
    }

    /// Answers one utterance and records the exchange.
    pub fn ask(&mut self, utterance: &str) -> Response {
        let q = self.question(utterance);
        let r = self.parser.answer(&q);
        self.turn += 1;
        self.history.push(utterance.to_string());
        self.history.push(match &r.answer {
            Some(a) => answer_utterance(&a.value, self.parser.kb),
            None => "sorry".into(),
        });
        r
    }

    /// Human-readable report of a response.
    pub fn describe(&self, r: &Response) -> String {
        let kb = self.parser.kb;
        let mut out = String::new();
        match &r.answer {
            Some(a) => out.push_str(&format!("answer: {}\n", answer_utterance(&a.value, kb))),
            None => out.push_str(&format!(
                "no answer: {}\n",
                r.provenance.failure.as_deref().unwrap_or("unknown failure")
            )),
        }
        if let Some(lf) = &r.provenance.logical_form {
            out.push_str(&format!("form: {lf}\n"));
        }
        for l in &r.provenance.links {
            let target = match l.entity {
                Some(e) => format!("{} ({})", kb.entity_name(e), kb.type_name(l.mention.ty)),
                None => "unlinked".into(),
            };
            out.push_str(&format!("link: {} -> {target}\n", l.mention.text));
        }
        out
    }

    /// Runs until end of input or `:quit`.
    pub fn run<R: BufRead, W: Write>(&mut self, input: R, mut out: W) -> std::io::Result<()> {
        write!(out, "> ")?;
        out.flush()?;
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            match line {
                "" => {}
                ":quit" | ":q" => break,
                ":reset" => {
                    self.reset();
                    writeln!(out, "history cleared")?;
                }
                utterance => {
                    let r = self.ask(utterance);
                    write!(out, "{}", self.describe(&r))?;
                }
            }
            write!(out, "> ")?;
            out.flush()?;
        }
        writeln!(out)?;
        Ok(())
    }
}
