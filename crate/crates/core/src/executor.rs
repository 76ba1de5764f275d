//! Bottom-up evaluation of logical forms over a [`KnowledgeBase`], plus the
//! partial evaluation used to prune decode prefixes early.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{
    DecodeToken, EntityRef, GrammarConfig, Instantiation, LogicalForm, Node, NumberRef, Operator, PrefixState, Step,
};
use crate::kb::{EntityId, KnowledgeBase, PredicateId};

pub const DEFAULT_WORK_BUDGET: u64 = 100_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Value {
    Set(BTreeSet<EntityId>),
    Num(u64),
    Bool(bool),
}

impl Value {
    pub fn empty_set() -> Self {
        Value::Set(BTreeSet::new())
    }

    pub fn is_empty_set(&self) -> bool {
        matches!(self, Value::Set(s) if s.is_empty())
    }

    fn into_set(self) -> Result<BTreeSet<EntityId>> {
        match self {
            Value::Set(s) => Ok(s),
            other => Err(Error::Execution(format!("expected a set, got {other:?}"))),
        }
    }

    fn into_num(self) -> Result<u64> {
        match self {
            Value::Num(n) => Ok(n),
            other => Err(Error::Execution(format!("expected a number, got {other:?}"))),
        }
    }
}

/// Result of executing a complete logical form.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Answer {
    pub value: Value,
}

impl Answer {
    pub fn new(value: Value) -> Self {
        Answer { value }
    }

    /// Entity surface texts (in id order), an integer, or `true`/`false`.
    pub fn render(&self, kb: &KnowledgeBase) -> String {
        match &self.value {
            Value::Set(s) => s.iter().map(|&e| kb.entity_text(e)).collect::<Vec<_>>().join(", "),
            Value::Num(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.value {
            Value::Set(s) => {
                let ids: Vec<String> = s.iter().map(|e| e.to_string()).collect();
                write!(f, "{{{}}}", ids.join(", "))
            }
            Value::Num(n) => write!(f, "{n}"),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

/// Counts primitive set-element operations; exceeding the limit is a timeout.
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    limit: u64,
    used: u64,
}

impl Budget {
    pub fn new(limit: u64) -> Self {
        Budget { limit, used: 0 }
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    fn charge(&mut self, n: usize) -> Result<()> {
        self.used += n.max(1) as u64;
        if self.used > self.limit {
            Err(Error::Timeout(self.limit))
        } else {
            Ok(())
        }
    }
}

impl Default for Budget {
    fn default() -> Self {
        Budget::new(DEFAULT_WORK_BUDGET)
    }
}

pub fn execute(lf: &LogicalForm, kb: &KnowledgeBase) -> Result<Answer> {
    execute_with_budget(lf, kb, DEFAULT_WORK_BUDGET)
}

pub fn execute_with_budget(lf: &LogicalForm, kb: &KnowledgeBase, budget: u64) -> Result<Answer> {
    let mut budget = Budget::new(budget);
    eval_node(lf.body(), kb, &mut budget).map(Answer::new)
}

/// Evaluates an intermediate (set/num/bool) subtree.
pub fn eval_node(node: &Node, kb: &KnowledgeBase, budget: &mut Budget) -> Result<Value> {
    let Node::Apply { op, args } = node else {
        return Err(Error::Execution("a constant is not evaluable on its own".into()));
    };
    let mut vals = Vec::with_capacity(args.len());
    for a in args {
        vals.push(match a {
            Node::Leaf(inst) => Arg::Leaf(*inst),
            apply => Arg::Value(eval_node(apply, kb, budget)?),
        });
    }
    apply_op(*op, vals, kb, budget)
}

enum Arg {
    Leaf(Instantiation),
    Value(Value),
}

impl Arg {
    fn set(self) -> Result<BTreeSet<EntityId>> {
        match self {
            Arg::Value(v) => v.into_set(),
            Arg::Leaf(_) => Err(Error::Execution("expected a set argument".into())),
        }
    }

    fn num(self) -> Result<u64> {
        match self {
            Arg::Value(v) => v.into_num(),
            Arg::Leaf(_) => Err(Error::Execution("expected a num argument".into())),
        }
    }

    fn entity(self) -> Result<EntityId> {
        match self {
            Arg::Leaf(Instantiation::Entity(EntityRef::Id(e))) => Ok(e),
            Arg::Leaf(Instantiation::Entity(EntityRef::Pointer(i))) => {
                Err(Error::Execution(format!("entity pointer @{i} was never resolved")))
            }
            _ => Err(Error::Execution("expected an entity".into())),
        }
    }

    fn predicate(self) -> Result<PredicateId> {
        match self {
            Arg::Leaf(Instantiation::Predicate(p)) => Ok(p),
            _ => Err(Error::Execution("expected a predicate".into())),
        }
    }
}

fn degree_filter(
    set: BTreeSet<EntityId>,
    p: PredicateId,
    kb: &KnowledgeBase,
    budget: &mut Budget,
    keep: impl Fn(usize) -> bool,
) -> Result<BTreeSet<EntityId>> {
    budget.charge(set.len())?;
    Ok(set.into_iter().filter(|&e| keep(kb.degree(e, p))).collect())
}

fn extreme(
    set: BTreeSet<EntityId>,
    p: PredicateId,
    kb: &KnowledgeBase,
    budget: &mut Budget,
    want_max: bool,
) -> Result<BTreeSet<EntityId>> {
    budget.charge(set.len())?;
    let degrees = set.iter().map(|&e| kb.degree(e, p));
    let target = if want_max { degrees.max() } else { degrees.min() };
    match target {
        None => Ok(set),
        Some(t) => Ok(set.into_iter().filter(|&e| kb.degree(e, p) == t).collect()),
    }
}

fn apply_op(op: Operator, args: Vec<Arg>, kb: &KnowledgeBase, budget: &mut Budget) -> Result<Value> {
    let mut it = args.into_iter();
    let mut next = || {
        it.next()
            .ok_or_else(|| Error::Execution(format!("{} is missing an argument", op.alias())))
    };
    Ok(match op {
        Operator::StartSet | Operator::StartNum | Operator::StartBool => match next()? {
            Arg::Value(v) => v,
            Arg::Leaf(_) => return Err(Error::Execution("start needs a subtree".into())),
        },
        Operator::Find => {
            let set = next()?.set()?;
            let p = next()?.predicate()?;
            let mut out = BTreeSet::new();
            budget.charge(set.len())?;
            for e in set {
                let objs = kb.objects_of(e, p)?;
                budget.charge(objs.len())?;
                out.extend(objs.iter().copied());
            }
            Value::Set(out)
        }
        Operator::Count => {
            let set = next()?.set()?;
            budget.charge(1)?;
            Value::Num(set.len() as u64)
        }
        Operator::In => {
            let e = next()?.entity()?;
            let set = next()?.set()?;
            budget.charge(1)?;
            Value::Bool(set.contains(&e))
        }
        Operator::Union | Operator::Inter | Operator::Diff => {
            let a = next()?.set()?;
            let b = next()?.set()?;
            budget.charge(a.len() + b.len())?;
            Value::Set(match op {
                Operator::Union => a.union(&b).copied().collect(),
                Operator::Inter => a.intersection(&b).copied().collect(),
                _ => a.difference(&b).copied().collect(),
            })
        }
        Operator::Larger | Operator::Less | Operator::Equal => {
            let set = next()?.set()?;
            let p = next()?.predicate()?;
            let k = next()?.num()? as usize;
            let keep: Box<dyn Fn(usize) -> bool> = match op {
                Operator::Larger => Box::new(move |d| d > k),
                Operator::Less => Box::new(move |d| d < k),
                _ => Box::new(move |d| d == k),
            };
            Value::Set(degree_filter(set, p, kb, budget, keep)?)
        }
        Operator::ArgMax | Operator::ArgMin => {
            let set = next()?.set()?;
            let p = next()?.predicate()?;
            Value::Set(extreme(set, p, kb, budget, op == Operator::ArgMax)?)
        }
        Operator::Filter => {
            let tp = match next()? {
                Arg::Leaf(Instantiation::Type(t)) => t,
                _ => return Err(Error::Execution("filter needs a type".into())),
            };
            if tp.index() >= kb.num_types() {
                return Err(Error::Reference(format!("type {tp}")));
            }
            let set = next()?.set()?;
            budget.charge(set.len())?;
            Value::Set(set.into_iter().filter(|&e| kb.has_type(e, tp)).collect())
        }
        Operator::NumLiteral => match next()? {
            Arg::Leaf(Instantiation::Number(NumberRef::Literal(n))) => {
                budget.charge(1)?;
                Value::Num(n)
            }
            Arg::Leaf(Instantiation::Number(NumberRef::Pointer(i))) => {
                return Err(Error::Execution(format!("number pointer #{i} was never resolved")))
            }
            _ => return Err(Error::Execution("u_num needs a number".into())),
        },
        Operator::SetOf => {
            let e = next()?.entity()?;
            if e.index() >= kb.num_entities() {
                return Err(Error::Reference(format!("entity {e}")));
            }
            budget.charge(1)?;
            Value::Set(BTreeSet::from([e]))
        }
        Operator::EntityConst | Operator::PredicateConst | Operator::TypeConst | Operator::NumberConst => {
            return Err(Error::Execution(format!("{} is not an operator", op.alias())))
        }
    })
}

/// Verdict of early execution on a decode prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PartialVerdict {
    /// The most recently closed subtree produced a non-empty set.
    NonEmpty,
    /// Every completion of the prefix is empty or fails.
    Empty,
    Unknown,
}

/// Whether an empty set in argument slot `arg` forces `op`'s result empty.
fn empty_preserving(op: Operator, arg: usize) -> bool {
    match op {
        Operator::StartSet
        | Operator::Find
        | Operator::Larger
        | Operator::Less
        | Operator::Equal
        | Operator::ArgMax
        | Operator::ArgMin
        | Operator::Diff => arg == 0,
        Operator::Inter => true,
        Operator::Filter => arg == 1,
        _ => false,
    }
}

enum Closed {
    Leaf(Instantiation),
    Value(Value),
    /// Depends on an unresolved pointer.
    Opaque,
    Failed,
}

struct Frame {
    op: Operator,
    args: Vec<Closed>,
}

fn close_frame(frame: Frame, kb: &KnowledgeBase, budget: &mut Budget) -> Closed {
    let mut args = Vec::with_capacity(frame.args.len());
    for a in frame.args {
        match a {
            Closed::Leaf(Instantiation::Entity(EntityRef::Pointer(_)))
            | Closed::Leaf(Instantiation::Number(NumberRef::Pointer(_)))
            | Closed::Opaque => return Closed::Opaque,
            Closed::Failed => return Closed::Failed,
            Closed::Leaf(inst) => args.push(Arg::Leaf(inst)),
            Closed::Value(v) => args.push(Arg::Value(v)),
        }
    }
    match apply_op(frame.op, args, kb, budget) {
        Ok(v) => Closed::Value(v),
        Err(_) => Closed::Failed,
    }
}

/// Early execution of a decode prefix whose entries are resolved so far.
///
/// Closed subtrees are evaluated; an empty set is reported as
/// [`PartialVerdict::Empty`] only when every enclosing open operator up to a
/// set-valued root maps an empty argument to an empty result. Count and
/// membership questions are never declared empty.
pub fn execute_partial(prefix: &[Step], kb: &KnowledgeBase) -> Result<PartialVerdict> {
    execute_partial_with_budget(prefix, kb, DEFAULT_WORK_BUDGET)
}

pub fn execute_partial_with_budget(prefix: &[Step], kb: &KnowledgeBase, budget: u64) -> Result<PartialVerdict> {
    execute_partial_in(prefix, kb, &mut Budget::new(budget))
}

/// Like [`execute_partial`], charging work to a caller-owned budget.
pub fn execute_partial_in(prefix: &[Step], kb: &KnowledgeBase, budget: &mut Budget) -> Result<PartialVerdict> {
    PrefixState::from_steps(prefix, &GrammarConfig::unbounded())?;
    let mut stack: Vec<Frame> = Vec::new();
    let mut last: Option<Closed> = None;
    for step in prefix {
        let mut closed = match step.token {
            DecodeToken::Op(op) => {
                stack.push(Frame {
                    op,
                    args: Vec::with_capacity(op.args().len()),
                });
                continue;
            }
            _ => match step.inst {
                Some(inst) => Closed::Leaf(inst),
                None => return Ok(PartialVerdict::Unknown),
            },
        };
        loop {
            let top = stack.last_mut().expect("validated prefix has an open frame");
            top.args.push(closed);
            if top.args.len() < top.op.args().len() {
                break;
            }
            let frame = stack.pop().expect("non-empty");
            closed = close_frame(frame, kb, budget);
            if stack.is_empty() {
                last = Some(closed);
                break;
            }
        }
    }

    if stack.is_empty() {
        // complete form
        return Ok(match last {
            Some(Closed::Value(Value::Set(s))) if s.is_empty() => PartialVerdict::Empty,
            Some(Closed::Value(Value::Set(_))) => PartialVerdict::NonEmpty,
            Some(Closed::Failed) => PartialVerdict::Empty,
            _ => PartialVerdict::Unknown,
        });
    }

    for level in (0..stack.len()).rev() {
        for (i, arg) in stack[level].args.iter().enumerate() {
            let dead = match arg {
                Closed::Failed => true,
                Closed::Value(v) => v.is_empty_set() && empty_preserving(stack[level].op, i),
                _ => false,
            };
            if dead && forces_empty_root(&stack[..level]) {
                return Ok(PartialVerdict::Empty);
            }
        }
    }

    let top = stack.last().expect("non-empty");
    Ok(match top.args.last() {
        Some(Closed::Value(Value::Set(s))) if !s.is_empty() => PartialVerdict::NonEmpty,
        _ => PartialVerdict::Unknown,
    })
}

/// Whether an empty result from the frame just below `ancestors` propagates
/// to an empty answer.
fn forces_empty_root(ancestors: &[Frame]) -> bool {
    ancestors.iter().all(|f| empty_preserving(f.op, f.args.len()))
}
