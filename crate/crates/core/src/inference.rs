//! Grammar-guided beam search and end-to-end question answering.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{eval_node, execute_partial_in, Answer, Budget, PartialVerdict, DEFAULT_WORK_BUDGET};
use crate::grammar::{
    deserialize, DecodeToken, EntityRef, GrammarConfig, Instantiation, LogicalForm, NumberRef, PrefixState, Step,
};
use crate::kb::{KnowledgeBase, PredicateId, TypeId};
use crate::linker::{
    decode_mentions, link_mentions, resolve_entity_pointer, substitute_pointers, InvertedIndex, LinkedMention,
    TypeAwareLabel,
};
use crate::nn::{EncoderOutput, Model, Question, StepDistributions};
use crate::scalar::Scalar;
use crate::text::parse_number;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub grammar: GrammarConfig,
    /// Work allowed for each early execution.
    pub exec_budget: u64,
    /// Scorer calls allowed per question before giving up.
    pub max_expansions: usize,
    pub prune: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            grammar: GrammarConfig {
                max_depth: 6,
                max_len: 24,
            },
            exec_budget: DEFAULT_WORK_BUDGET,
            max_expansions: 4096,
            prune: true,
        }
    }
}

/// A decode prefix with its accumulated log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub steps: Vec<Step>,
    pub score: f64,
    pub complete: bool,
    state: PrefixState,
}

impl Hypothesis {
    fn root() -> Self {
        Hypothesis {
            steps: Vec::new(),
            score: 0.0,
            complete: false,
            state: PrefixState::new(),
        }
    }

    pub fn tokens(&self) -> Vec<DecodeToken> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn logical_form(&self) -> Result<LogicalForm> {
        deserialize(&self.steps)
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.steps.cmp(&b.steps))
}

/// Source of next-step distributions for a decode prefix.
pub trait StepScorer {
    fn distributions(&self, prefix: &[DecodeToken]) -> Result<StepDistributions<f64>>;
}

pub struct ModelScorer<'a, T> {
    pub model: &'a Model<T>,
    pub enc: &'a EncoderOutput<T>,
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn distributions(&self, prefix: &[DecodeToken]) -> Result<StepDistributions<f64>> {
        let d = self.model.step_distributions(self.enc, prefix)?;
        let cv = |v: Vec<T>| v.into_iter().map(|x| x.to_f64_lossy()).collect();
        Ok(StepDistributions {
            token: cv(d.token),
            predicate: cv(d.predicate),
            ty: cv(d.ty),
            entity: cv(d.entity),
            number: cv(d.number),
        })
    }
}

/// Decides whether a prefix that just closed an entry survives.
pub trait Pruner {
    fn keep(&self, steps: &[Step]) -> bool;
}

pub struct NoPruning;

impl Pruner for NoPruning {
    fn keep(&self, _: &[Step]) -> bool {
        true
    }
}

/// Early execution against the KB. Pointers are resolved through the
/// linking results; prefixes with unresolvable pointers are kept.
pub struct ExecPruner<'a> {
    pub kb: &'a KnowledgeBase,
    pub tokens: &'a [String],
    pub links: &'a [LinkedMention],
    pub budget: u64,
}

impl ExecPruner<'_> {
    fn resolve(&self, s: &Step) -> Option<Step> {
        Some(match s.inst {
            Some(Instantiation::Entity(EntityRef::Pointer(p))) => Step::entry(Instantiation::Entity(EntityRef::Id(
                resolve_entity_pointer(p, self.links)?,
            ))),
            Some(Instantiation::Number(NumberRef::Pointer(p))) => Step::entry(Instantiation::Number(
                NumberRef::Literal(parse_number(self.tokens.get(p)?)?),
            )),
            _ => *s,
        })
    }
}

impl Pruner for ExecPruner<'_> {
    fn keep(&self, steps: &[Step]) -> bool {
        let Some(resolved) = steps.iter().map(|s| self.resolve(s)).collect::<Option<Vec<_>>>() else {
            return true;
        };
        let mut budget = Budget::new(self.budget);
        !matches!(
            execute_partial_in(&resolved, self.kb, &mut budget),
            Ok(PartialVerdict::Empty)
        )
    }
}

fn top_k(probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<(usize, f64)> = probs.iter().copied().enumerate().filter(|(_, p)| *p > 0.0).collect();
    idx.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx
}

fn instantiate(token: DecodeToken, i: usize) -> Instantiation {
    match token {
        DecodeToken::Entity => Instantiation::Entity(EntityRef::Pointer(i)),
        DecodeToken::Number => Instantiation::Number(NumberRef::Pointer(i)),
        DecodeToken::Predicate => Instantiation::Predicate(PredicateId(i as u32)),
        DecodeToken::Type => Instantiation::Type(TypeId(i as u32)),
        other => unreachable!("{other} has no instantiation"),
    }
}

/// Beam search over legal continuations. Entry tokens branch into their
/// `beam_size` most likely instantiations; scores are raw sums of
/// log-probabilities. Returns complete hypotheses, best first.
pub fn beam_decode<S: StepScorer, P: Pruner>(scorer: &S, pruner: &P, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let mut beam = vec![Hypothesis::root()];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut calls = 0;
    while !beam.is_empty() {
        let mut next: Vec<Hypothesis> = Vec::new();
        for hyp in &beam {
            calls += 1;
            if calls > cfg.max_expansions {
                return Err(Error::DecodeFailure(format!(
                    "expansion budget of {} exhausted",
                    cfg.max_expansions
                )));
            }
            let dist = scorer.distributions(&hyp.tokens())?;
            for tok in hyp.state.legal(&cfg.grammar) {
                let p_tok = dist.token[tok.index()];
                if p_tok <= 0.0 {
                    continue;
                }
                let base = hyp.score + p_tok.ln();
                if tok == DecodeToken::End {
                    let mut h = hyp.clone();
                    h.score = base;
                    h.complete = true;
                    done.push(h);
                    continue;
                }
                let mut state = hyp.state.clone();
                state.push(tok, &cfg.grammar)?;
                match tok.entry_category() {
                    Some(cat) => {
                        for (i, p) in top_k(dist.for_category(cat), cfg.beam_size) {
                            let mut steps = hyp.steps.clone();
                            steps.push(Step::entry(instantiate(tok, i)));
                            if cfg.prune && !pruner.keep(&steps) {
                                continue;
                            }
                            next.push(Hypothesis {
                                steps,
                                score: base + p.ln(),
                                complete: false,
                                state: state.clone(),
                            });
                        }
                    }
                    None => {
                        let mut steps = hyp.steps.clone();
                        steps.push(Step { token: tok, inst: None });
                        next.push(Hypothesis {
                            steps,
                            score: base,
                            complete: false,
                            state,
                        });
                    }
                }
            }
        }
        next.sort_by(rank);
        next.truncate(cfg.beam_size);
        beam = next;
        let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_open = beam.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if done.len() >= cfg.beam_size && best_done >= best_open {
            break;
        }
    }
    if done.is_empty() {
        return Err(Error::DecodeFailure("no complete hypothesis".into()));
    }
    done.sort_by(rank);
    Ok(done)
}

/// Trained components needed to answer questions.
pub struct Parser<'a, T> {
    pub parser: &'a Model<T>,
    /// Separate tagger; the parser's own detection head is used when absent.
    pub detector: Option<&'a Model<T>>,
    pub kb: &'a KnowledgeBase,
    pub index: &'a InvertedIndex,
    pub type_filter: bool,
    pub beam: BeamConfig,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScoredForm {
    pub form: String,
    pub score: f64,
}

/// Everything that led to an answer, for error analysis.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub links: Vec<LinkedMention>,
    pub hypotheses: Vec<ScoredForm>,
    /// Rank of the hypothesis that produced the answer.
    pub chosen: Option<usize>,
    pub logical_form: Option<String>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Response {
    pub answer: Option<Answer>,
    pub provenance: Provenance,
}

impl<T: Scalar> Parser<'_, T> {
    /// Detection tags for the content positions of `q`.
    pub fn detect(&self, q: &Question, enc: &EncoderOutput<T>) -> Result<Vec<TypeAwareLabel>> {
        let tags = match self.detector {
            Some(d) => d.detect(&d.encode(&q.ids)?),
            None => self.parser.detect(enc),
        };
        Ok(tags.into_iter().map(TypeAwareLabel::from_index).collect())
    }

    pub fn link(&self, q: &Question, enc: &EncoderOutput<T>) -> Result<Vec<LinkedMention>> {
        let tags = self.detect(q, enc)?;
        let mentions = decode_mentions(&tags, q.content());
        Ok(link_mentions(&mentions, self.index, self.kb, self.type_filter))
    }

    pub fn decode(&self, q: &Question, enc: &EncoderOutput<T>, links: &[LinkedMention]) -> Result<Vec<Hypothesis>> {
        let scorer = ModelScorer {
            model: self.parser,
            enc,
        };
        let pruner = ExecPruner {
            kb: self.kb,
            tokens: q.content(),
            links,
            budget: self.beam.exec_budget,
        };
        beam_decode(&scorer, &pruner, &self.beam)
    }

    /// Detect, link, decode, then execute the best hypothesis whose
    /// pointers resolve and whose execution succeeds.
    pub fn answer(&self, q: &Question) -> Response {
        let mut prov = Provenance {
            links: Vec::new(),
            hypotheses: Vec::new(),
            chosen: None,
            logical_form: None,
            failure: None,
        };
        let enc = match self.parser.encode(&q.ids) {
            Ok(e) => e,
            Err(e) => {
                prov.failure = Some(e.to_string());
                return Response {
                    answer: None,
                    provenance: prov,
                };
            }
        };
        match self.link(q, &enc) {
            Ok(l) => prov.links = l,
            Err(e) => {
                prov.failure = Some(e.to_string());
                return Response {
                    answer: None,
                    provenance: prov,
                };
            }
        }
        let hyps = match self.decode(q, &enc, &prov.links) {
            Ok(h) => h,
            Err(e) => {
                prov.failure = Some(e.to_string());
                return Response {
                    answer: None,
                    provenance: prov,
                };
            }
        };
        let mut answer = None;
        for (rank, h) in hyps.iter().enumerate() {
            let Ok(lf) = h.logical_form() else { continue };
            prov.hypotheses.push(ScoredForm {
                form: lf.render(self.kb),
                score: h.score,
            });
            if answer.is_some() {
                continue;
            }
            let Ok(resolved) = substitute_pointers(&lf, q.content(), &prov.links) else {
                continue;
            };
            let mut budget = Budget::new(self.beam.exec_budget);
            if let Ok(v) = eval_node(resolved.body(), self.kb, &mut budget) {
                answer = Some(Answer::new(v));
                prov.chosen = Some(rank);
                prov.logical_form = Some(resolved.render(self.kb));
            }
        }
        if answer.is_none() {
            prov.failure = Some("no hypothesis could be substituted and executed".into());
        }
        Response {
            answer,
            provenance: prov,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::Operator;

    /// Scores every token from a fixed table, ignoring the prefix except
    /// for its length.
    struct Table;

    impl StepScorer for Table {
        fn distributions(&self, prefix: &[DecodeToken]) -> Result<StepDistributions<f64>> {
            let mut token = vec![1.0; DecodeToken::COUNT];
            token[DecodeToken::Op(Operator::Count).index()] = 3.0 + prefix.len() as f64;
            token[DecodeToken::End.index()] = 5.0;
            let z: f64 = token.iter().sum();
            Ok(StepDistributions {
                token: token.iter().map(|t| t / z).collect(),
                predicate: vec![0.7, 0.3],
                ty: vec![1.0],
                entity: vec![0.2, 0.8],
                number: vec![0.5, 0.5],
            })
        }
    }

    #[test]
    fn beam_output_is_sorted_and_legal() {
        let cfg = BeamConfig {
            beam_size: 3,
            grammar: GrammarConfig {
                max_depth: 3,
                max_len: 8,
            },
            ..Default::default()
        };
        let out = beam_decode(&Table, &NoPruning, &cfg).unwrap();
        for w in out.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for h in &out {
            assert!(h.complete);
            assert!(h.logical_form().is_ok());
            assert!(h.score <= 0.0);
        }
    }

    #[test]
    fn zero_beam_is_rejected() {
        let cfg = BeamConfig {
            beam_size: 0,
            ..Default::default()
        };
        assert!(beam_decode(&Table, &NoPruning, &cfg).is_err());
    }
}
