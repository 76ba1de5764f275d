//! Breadth-first program search used as weak supervision: enumerate
//! grammar-valid forms over per-question entry pools and keep those that
//! execute to the gold answer.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{eval_node, execute_partial_in, Budget, PartialVerdict, Value};
use crate::grammar::{
    deserialize, serialize, DecodeToken, EntityRef, GrammarConfig, Instantiation, LogicalForm, NumberRef, PrefixState,
    Step,
};
use crate::kb::{EntityId, KnowledgeBase, PredicateId, TypeId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Frontier size kept after each level.
    pub buffer_size: usize,
    pub max_depth: usize,
    pub max_len: usize,
    /// Levels searched past the first one that produced a solution.
    pub extra_levels: usize,
    /// Work allowed for a single execution.
    pub exec_budget: u64,
    /// Work allowed for the whole search.
    pub work_budget: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            buffer_size: 1000,
            max_depth: 4,
            max_len: 12,
            extra_levels: 0,
            exec_budget: crate::executor::DEFAULT_WORK_BUDGET,
            work_budget: 50_000_000,
        }
    }
}

impl SearchConfig {
    pub fn grammar(&self) -> GrammarConfig {
        GrammarConfig {
            max_depth: self.max_depth,
            max_len: self.max_len,
        }
    }
}

/// Candidate constants for one question. Entities and numbers are paired
/// with the question position they are pointed at.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntryPools {
    pub entities: Vec<(EntityId, usize)>,
    pub predicates: Vec<PredicateId>,
    pub types: Vec<TypeId>,
    pub numbers: Vec<(u64, usize)>,
}

impl EntryPools {
    fn choices(&self, token: DecodeToken) -> Vec<Instantiation> {
        match token {
            DecodeToken::Entity => self
                .entities
                .iter()
                .map(|&(_, pos)| Instantiation::Entity(EntityRef::Pointer(pos)))
                .collect(),
            DecodeToken::Predicate => self.predicates.iter().map(|&p| Instantiation::Predicate(p)).collect(),
            DecodeToken::Type => self.types.iter().map(|&t| Instantiation::Type(t)).collect(),
            DecodeToken::Number => self
                .numbers
                .iter()
                .map(|&(_, pos)| Instantiation::Number(NumberRef::Pointer(pos)))
                .collect(),
            _ => Vec::new(),
        }
    }

    fn resolve(&self, inst: Instantiation) -> Result<Instantiation> {
        Ok(match inst {
            Instantiation::Entity(EntityRef::Pointer(pos)) => {
                let e = self
                    .entities
                    .iter()
                    .find(|(_, p)| *p == pos)
                    .map(|(e, _)| *e)
                    .ok_or_else(|| Error::Substitution(format!("no pool entity at @{pos}")))?;
                Instantiation::Entity(EntityRef::Id(e))
            }
            Instantiation::Number(NumberRef::Pointer(pos)) => {
                let n = self
                    .numbers
                    .iter()
                    .find(|(_, p)| *p == pos)
                    .map(|(n, _)| *n)
                    .ok_or_else(|| Error::Substitution(format!("no pool number at #{pos}")))?;
                Instantiation::Number(NumberRef::Literal(n))
            }
            other => other,
        })
    }

    fn resolve_steps(&self, steps: &[Step]) -> Result<Vec<Step>> {
        steps
            .iter()
            .map(|s| match s.inst {
                Some(inst) => self.resolve(inst).map(Step::entry),
                None => Ok(*s),
            })
            .collect()
    }
}

/// A training target: the pointer-level form the decoder is supervised on,
/// and its KB-executable counterpart.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GoldProgram {
    pub pointed: LogicalForm,
    pub resolved: LogicalForm,
}

impl GoldProgram {
    pub fn new(pointed: LogicalForm, resolved: LogicalForm) -> Result<Self> {
        let a = serialize(&pointed)?;
        let b = serialize(&resolved)?;
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.token != y.token) {
            return Err(Error::Validation(
                "pointed and resolved forms differ in structure".into(),
            ));
        }
        if !resolved.is_resolved() {
            return Err(Error::Validation("resolved form still has pointers".into()));
        }
        Ok(GoldProgram { pointed, resolved })
    }

    /// Decode tokens `y^(tk)` without the trailing `end`.
    pub fn tokens(&self) -> Vec<DecodeToken> {
        serialize(&self.pointed)
            .expect("validated")
            .iter()
            .map(|s| s.token)
            .collect()
    }

    /// Per-step instantiation label: predicate index, type index, or the
    /// pointed question position for entities and numbers.
    pub fn targets(&self) -> Result<Vec<Option<usize>>> {
        serialize(&self.pointed)?
            .iter()
            .map(|s| match s.inst {
                None => Ok(None),
                Some(Instantiation::Predicate(p)) => Ok(Some(p.index())),
                Some(Instantiation::Type(t)) => Ok(Some(t.index())),
                Some(Instantiation::Entity(EntityRef::Pointer(i)))
                | Some(Instantiation::Number(NumberRef::Pointer(i))) => Ok(Some(i)),
                Some(other) => Err(Error::data("gold program", format!("entry {other:?} is not pointed"))),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SearchFailure {
    /// The search ended without a matching form.
    NotFound,
    BudgetExceeded,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    /// Matching programs, shortest first, ties in token order.
    pub programs: Vec<GoldProgram>,
    pub failure: Option<SearchFailure>,
    pub work: u64,
    /// Some level had more surviving prefixes than the buffer holds, or the
    /// work budget ran out. When false the search was exhaustive.
    pub truncated: bool,
}

impl SearchResult {
    /// Shortest program, the one used as a training target.
    pub fn best(&self) -> Option<&GoldProgram> {
        self.programs.first()
    }

    /// More than one form reproduces the answer, so some are spurious.
    pub fn is_ambiguous(&self) -> bool {
        self.programs.len() > 1
    }
}

#[derive(Clone)]
struct Candidate {
    steps: Vec<Step>,
    state: PrefixState,
}

/// Level-order search over prefixes. Each level extends every frontier
/// prefix by one legal token; children are ranked by their shortest possible
/// completed length and then by token order, pruned by early execution, and
/// the first `buffer_size` survivors form the next frontier.
pub fn bfs_search(pools: &EntryPools, gold: &Value, kb: &KnowledgeBase, cfg: &SearchConfig) -> SearchResult {
    let gcfg = cfg.grammar();
    let mut frontier = vec![Candidate {
        steps: Vec::new(),
        state: PrefixState::new(),
    }];
    let mut found: Vec<Vec<Step>> = Vec::new();
    let mut first_hit: Option<usize> = None;
    let mut work = 0u64;
    let mut exhausted = false;
    let mut truncated = false;

    'levels: for level in 1..=cfg.max_len {
        let mut children: Vec<Candidate> = Vec::new();
        for cand in &frontier {
            for tok in cand.state.legal(&gcfg) {
                if tok == DecodeToken::End {
                    continue;
                }
                let mut state = cand.state.clone();
                if state.push(tok, &gcfg).is_err() {
                    continue;
                }
                if tok.entry_category().is_some() {
                    for inst in pools.choices(tok) {
                        let mut steps = cand.steps.clone();
                        steps.push(Step::entry(inst));
                        children.push(Candidate {
                            steps,
                            state: state.clone(),
                        });
                    }
                } else {
                    let mut steps = cand.steps.clone();
                    steps.push(Step { token: tok, inst: None });
                    children.push(Candidate { steps, state });
                }
            }
        }
        children.sort_by(|a, b| {
            (a.state.len() + a.state.min_remaining())
                .cmp(&(b.state.len() + b.state.min_remaining()))
                .then_with(|| a.steps.cmp(&b.steps))
        });

        let mut next = Vec::with_capacity(cfg.buffer_size.min(children.len()));
        for child in children {
            if next.len() >= cfg.buffer_size {
                truncated = true;
                break;
            }
            let closes = child.steps.last().is_some_and(|s| s.inst.is_some());
            if closes {
                let Ok(resolved) = pools.resolve_steps(&child.steps) else {
                    continue;
                };
                let mut budget = Budget::new(cfg.exec_budget);
                if child.state.is_complete() {
                    if let Ok(lf) = deserialize(&resolved) {
                        if let Ok(v) = eval_node(lf.body(), kb, &mut budget) {
                            if &v == gold {
                                found.push(child.steps.clone());
                                first_hit.get_or_insert(level);
                            }
                        }
                    }
                    work += budget.used();
                    continue;
                }
                let verdict = execute_partial_in(&resolved, kb, &mut budget);
                work += budget.used();
                if matches!(verdict, Ok(PartialVerdict::Empty)) {
                    continue;
                }
            }
            if work > cfg.work_budget {
                exhausted = true;
                break 'levels;
            }
            next.push(child);
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
        if first_hit.is_some_and(|l| level >= l + cfg.extra_levels) {
            break;
        }
    }

    found.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let programs: Vec<GoldProgram> = found
        .iter()
        .filter_map(|steps| {
            let pointed = deserialize(steps).ok()?;
            let resolved = deserialize(&pools.resolve_steps(steps).ok()?).ok()?;
            GoldProgram::new(pointed, resolved).ok()
        })
        .collect();
    let failure = if !programs.is_empty() {
        None
    } else if exhausted {
        Some(SearchFailure::BudgetExceeded)
    } else {
        Some(SearchFailure::NotFound)
    };
    SearchResult {
        programs,
        failure,
        work,
        truncated: truncated || exhausted,
    }
}

/// Fraction of questions with at least one program, per question type.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SuccessReport {
    pub per_type: BTreeMap<String, TypeRatio>,
    pub overall: TypeRatio,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TypeRatio {
    pub found: usize,
    pub total: usize,
}

impl TypeRatio {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.found as f64 / self.total as f64
        }
    }
}

impl SuccessReport {
    pub fn from_outcomes<I, S>(outcomes: I) -> Self
    where
        I: IntoIterator<Item = (S, bool)>,
        S: Into<String>,
    {
        let mut per_type: HashMap<String, TypeRatio> = HashMap::new();
        let mut overall = TypeRatio::default();
        for (ty, ok) in outcomes {
            let r = per_type.entry(ty.into()).or_default();
            r.total += 1;
            overall.total += 1;
            if ok {
                r.found += 1;
                overall.found += 1;
            }
        }
        SuccessReport {
            per_type: per_type.into_iter().collect(),
            overall,
        }
    }
}
