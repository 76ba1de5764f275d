//! Typed operator grammar, logical-form trees, their depth-first token
//! serialization, and next-token legality for constrained decoding.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::{EntityId, KnowledgeBase, PredicateId, TypeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Start,
    Set,
    Num,
    Bool,
    Entity,
    Predicate,
    Type,
    Number,
}

impl Category {
    /// Entry categories are filled by constants rather than operator results.
    pub fn is_entry(self) -> bool {
        matches!(
            self,
            Category::Entity | Category::Predicate | Category::Type | Category::Number
        )
    }

    /// Token that instantiates an entry category.
    pub fn entry_token(self) -> Option<DecodeToken> {
        match self {
            Category::Entity => Some(DecodeToken::Entity),
            Category::Predicate => Some(DecodeToken::Predicate),
            Category::Type => Some(DecodeToken::Type),
            Category::Number => Some(DecodeToken::Number),
            _ => None,
        }
    }

    /// Shortest number of decode tokens that can fill a slot of this category.
    pub fn min_len(self) -> usize {
        match self {
            Category::Entity | Category::Predicate | Category::Type | Category::Number => 1,
            // set(e) / u_num
            Category::Set | Category::Num => 2,
            // in(e, set(e))
            Category::Bool => 4,
            Category::Start => 3,
        }
    }

    /// Smallest operator-nesting height of a subtree filling this slot.
    fn min_height(self) -> usize {
        match self {
            Category::Set | Category::Num => 1,
            Category::Bool => 2,
            Category::Start => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Start => "start",
            Category::Set => "set",
            Category::Num => "num",
            Category::Bool => "bool",
            Category::Entity => "e",
            Category::Predicate => "p",
            Category::Type => "tp",
            Category::Number => "u_num",
        };
        f.write_str(s)
    }
}

/// The 21 grammar rules. A18..A21 instantiate entries; they exist for
/// completeness of the rule table but are never emitted as decode tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    StartSet,
    StartNum,
    StartBool,
    Find,
    Count,
    In,
    Union,
    Inter,
    Diff,
    Larger,
    Less,
    Equal,
    ArgMax,
    ArgMin,
    Filter,
    NumLiteral,
    SetOf,
    EntityConst,
    PredicateConst,
    TypeConst,
    NumberConst,
}

use Category as C;

impl Operator {
    pub const ALL: [Operator; 21] = [
        Operator::StartSet,
        Operator::StartNum,
        Operator::StartBool,
        Operator::Find,
        Operator::Count,
        Operator::In,
        Operator::Union,
        Operator::Inter,
        Operator::Diff,
        Operator::Larger,
        Operator::Less,
        Operator::Equal,
        Operator::ArgMax,
        Operator::ArgMin,
        Operator::Filter,
        Operator::NumLiteral,
        Operator::SetOf,
        Operator::EntityConst,
        Operator::PredicateConst,
        Operator::TypeConst,
        Operator::NumberConst,
    ];

    /// 1-based rule number.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn from_number(n: usize) -> Option<Operator> {
        n.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn alias(self) -> String {
        format!("A{}", self.number())
    }

    pub fn result(self) -> Category {
        match self {
            Operator::StartSet | Operator::StartNum | Operator::StartBool => C::Start,
            Operator::Count | Operator::NumLiteral => C::Num,
            Operator::In => C::Bool,
            Operator::EntityConst => C::Entity,
            Operator::PredicateConst => C::Predicate,
            Operator::TypeConst => C::Type,
            Operator::NumberConst => C::Number,
            _ => C::Set,
        }
    }

    pub fn args(self) -> &'static [Category] {
        match self {
            Operator::StartSet => &[C::Set],
            Operator::StartNum => &[C::Num],
            Operator::StartBool => &[C::Bool],
            Operator::Find => &[C::Set, C::Predicate],
            Operator::Count => &[C::Set],
            Operator::In => &[C::Entity, C::Set],
            Operator::Union | Operator::Inter | Operator::Diff => &[C::Set, C::Set],
            Operator::Larger | Operator::Less | Operator::Equal => &[C::Set, C::Predicate, C::Num],
            Operator::ArgMax | Operator::ArgMin => &[C::Set, C::Predicate],
            Operator::Filter => &[C::Type, C::Set],
            Operator::NumLiteral => &[C::Number],
            Operator::SetOf => &[C::Entity],
            Operator::EntityConst | Operator::PredicateConst | Operator::TypeConst | Operator::NumberConst => &[],
        }
    }

    /// Function symbol used in the canonical text rendering.
    pub fn name(self) -> &'static str {
        match self {
            Operator::StartSet | Operator::StartNum | Operator::StartBool => "start",
            Operator::Find => "find",
            Operator::Count => "count",
            Operator::In => "in",
            Operator::Union => "union",
            Operator::Inter => "inter",
            Operator::Diff => "diff",
            Operator::Larger => "larger",
            Operator::Less => "less",
            Operator::Equal => "equal",
            Operator::ArgMax => "argmax",
            Operator::ArgMin => "argmin",
            Operator::Filter => "filter",
            Operator::NumLiteral => "u_num",
            Operator::SetOf => "set",
            Operator::EntityConst => "e",
            Operator::PredicateConst => "p",
            Operator::TypeConst => "tp",
            Operator::NumberConst => "u_num",
        }
    }

    fn from_name(name: &str) -> Option<Operator> {
        Self::ALL[3..17]
            .iter()
            .copied()
            .find(|op| op.name() == name && *op != Operator::NumLiteral)
    }

    /// Whether the rule may appear as a decode token.
    pub fn is_decodable(self) -> bool {
        self.number() <= 17
    }

    /// Minimal height of a subtree rooted at this operator.
    fn height(self) -> usize {
        1 + self.args().iter().map(|c| c.min_height()).max().unwrap_or(0)
    }
}

/// One symbol of the decoding vocabulary: `start`, `end`, the four entry
/// tokens and the 21 rule aliases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecodeToken {
    Start,
    End,
    Entity,
    Predicate,
    Type,
    Number,
    Op(Operator),
}

impl DecodeToken {
    pub const COUNT: usize = 27;

    pub fn index(self) -> usize {
        match self {
            DecodeToken::Start => 0,
            DecodeToken::End => 1,
            DecodeToken::Entity => 2,
            DecodeToken::Predicate => 3,
            DecodeToken::Type => 4,
            DecodeToken::Number => 5,
            DecodeToken::Op(op) => 5 + op.number(),
        }
    }

    pub fn from_index(i: usize) -> Option<DecodeToken> {
        Some(match i {
            0 => DecodeToken::Start,
            1 => DecodeToken::End,
            2 => DecodeToken::Entity,
            3 => DecodeToken::Predicate,
            4 => DecodeToken::Type,
            5 => DecodeToken::Number,
            _ => DecodeToken::Op(Operator::from_number(i - 5)?),
        })
    }

    pub fn all() -> impl Iterator<Item = DecodeToken> {
        (0..Self::COUNT).filter_map(Self::from_index)
    }

    pub fn entry_category(self) -> Option<Category> {
        match self {
            DecodeToken::Entity => Some(C::Entity),
            DecodeToken::Predicate => Some(C::Predicate),
            DecodeToken::Type => Some(C::Type),
            DecodeToken::Number => Some(C::Number),
            _ => None,
        }
    }
}

impl PartialOrd for DecodeToken {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DecodeToken {
    fn cmp(&self, other: &Self) -> Ordering {
        self.index().cmp(&other.index())
    }
}

impl fmt::Display for DecodeToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeToken::Start => f.write_str("start"),
            DecodeToken::End => f.write_str("end"),
            DecodeToken::Op(op) => write!(f, "A{}", op.number()),
            other => write!(f, "{}", other.entry_category().expect("entry token")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityRef {
    Id(EntityId),
    /// Position of a question token.
    Pointer(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NumberRef {
    Literal(u64),
    Pointer(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Instantiation {
    Entity(EntityRef),
    Predicate(PredicateId),
    Type(TypeId),
    Number(NumberRef),
}

impl Instantiation {
    pub fn category(self) -> Category {
        match self {
            Instantiation::Entity(_) => C::Entity,
            Instantiation::Predicate(_) => C::Predicate,
            Instantiation::Type(_) => C::Type,
            Instantiation::Number(_) => C::Number,
        }
    }

    pub fn token(self) -> DecodeToken {
        self.category().entry_token().expect("entry category")
    }
}

/// One element of a serialized logical form. Entry tokens carry their
/// instantiation; operator tokens carry none.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Step {
    pub token: DecodeToken,
    pub inst: Option<Instantiation>,
}

impl Step {
    pub fn op(op: Operator) -> Self {
        Step {
            token: DecodeToken::Op(op),
            inst: None,
        }
    }

    pub fn entry(inst: Instantiation) -> Self {
        Step {
            token: inst.token(),
            inst: Some(inst),
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.inst {
            None => write!(f, "{}", self.token),
            Some(Instantiation::Entity(EntityRef::Id(e))) => write!(f, "e:{e}"),
            Some(Instantiation::Entity(EntityRef::Pointer(i))) => write!(f, "e:@{i}"),
            Some(Instantiation::Predicate(p)) => write!(f, "p:{p}"),
            Some(Instantiation::Type(t)) => write!(f, "tp:{t}"),
            Some(Instantiation::Number(NumberRef::Literal(n))) => write!(f, "u_num:{n}"),
            Some(Instantiation::Number(NumberRef::Pointer(i))) => write!(f, "u_num:#{i}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Apply { op: Operator, args: Vec<Node> },
    Leaf(Instantiation),
}

impl Node {
    pub fn apply(op: Operator, args: Vec<Node>) -> Node {
        Node::Apply { op, args }
    }

    pub fn entity(e: EntityId) -> Node {
        Node::Leaf(Instantiation::Entity(EntityRef::Id(e)))
    }

    pub fn entity_pointer(pos: usize) -> Node {
        Node::Leaf(Instantiation::Entity(EntityRef::Pointer(pos)))
    }

    pub fn predicate(p: PredicateId) -> Node {
        Node::Leaf(Instantiation::Predicate(p))
    }

    pub fn ty(t: TypeId) -> Node {
        Node::Leaf(Instantiation::Type(t))
    }

    /// `u_num` literal wrapped in its `num` rule.
    pub fn number(n: u64) -> Node {
        Node::apply(
            Operator::NumLiteral,
            vec![Node::Leaf(Instantiation::Number(NumberRef::Literal(n)))],
        )
    }

    pub fn number_pointer(pos: usize) -> Node {
        Node::apply(
            Operator::NumLiteral,
            vec![Node::Leaf(Instantiation::Number(NumberRef::Pointer(pos)))],
        )
    }

    pub fn set_of(e: EntityId) -> Node {
        Node::apply(Operator::SetOf, vec![Node::entity(e)])
    }

    pub fn find(set: Node, p: PredicateId) -> Node {
        Node::apply(Operator::Find, vec![set, Node::predicate(p)])
    }

    pub fn category(&self) -> Category {
        match self {
            Node::Apply { op, .. } => op.result(),
            Node::Leaf(inst) => inst.category(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Node::Leaf(_) => Ok(()),
            Node::Apply { op, args } => {
                if !op.is_decodable() {
                    return Err(Error::Validation(format!(
                        "{} is an entry rule, use a leaf",
                        op.alias()
                    )));
                }
                let want = op.args();
                if want.len() != args.len() {
                    return Err(Error::Validation(format!(
                        "{} expects {} arguments, got {}",
                        op.alias(),
                        want.len(),
                        args.len()
                    )));
                }
                for (i, (cat, arg)) in want.iter().zip(args).enumerate() {
                    if arg.category() != *cat {
                        return Err(Error::Validation(format!(
                            "argument {i} of {} must be {cat}, found {}",
                            op.alias(),
                            arg.category()
                        )));
                    }
                    arg.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Operator nesting depth; start rules and leaves do not count.
    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf(_) => 0,
            Node::Apply { op, args } => {
                let below = args.iter().map(Node::depth).max().unwrap_or(0);
                if op.result() == C::Start {
                    below
                } else {
                    below + 1
                }
            }
        }
    }

    fn write_steps(&self, out: &mut Vec<Step>) {
        match self {
            Node::Leaf(inst) => out.push(Step::entry(*inst)),
            Node::Apply { op, args } => {
                out.push(Step::op(*op));
                for a in args {
                    a.write_steps(out);
                }
            }
        }
    }

    pub fn leaves(&self) -> Vec<Instantiation> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |i| out.push(*i));
        out
    }

    fn visit_leaves(&self, f: &mut impl FnMut(&Instantiation)) {
        match self {
            Node::Leaf(inst) => f(inst),
            Node::Apply { args, .. } => args.iter().for_each(|a| a.visit_leaves(f)),
        }
    }

    /// Rewrites every leaf through `f`.
    pub fn map_leaves<F>(&self, f: &mut F) -> Result<Node>
    where
        F: FnMut(&Instantiation) -> Result<Instantiation>,
    {
        Ok(match self {
            Node::Leaf(inst) => Node::Leaf(f(inst)?),
            Node::Apply { op, args } => Node::Apply {
                op: *op,
                args: args.iter().map(|a| a.map_leaves(f)).collect::<Result<_>>()?,
            },
        })
    }
}

/// A complete logical form: a tree whose root is one of the three start rules.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LogicalForm {
    root: Node,
}

impl LogicalForm {
    /// Wraps `body` in the start rule matching its result category.
    pub fn new(body: Node) -> Result<Self> {
        let op = match body.category() {
            C::Set => Operator::StartSet,
            C::Num => Operator::StartNum,
            C::Bool => Operator::StartBool,
            other => return Err(Error::Validation(format!("a logical form cannot produce {other}"))),
        };
        Self::from_root(Node::apply(op, vec![body]))
    }

    pub fn from_root(root: Node) -> Result<Self> {
        if root.category() != C::Start {
            return Err(Error::Validation("root must be a start rule".into()));
        }
        root.validate()?;
        Ok(LogicalForm { root })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// The subtree under the start rule.
    pub fn body(&self) -> &Node {
        match &self.root {
            Node::Apply { args, .. } => &args[0],
            Node::Leaf(_) => unreachable!("validated root"),
        }
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    pub fn leaves(&self) -> Vec<Instantiation> {
        self.root.leaves()
    }

    pub fn map_leaves<F>(&self, mut f: F) -> Result<LogicalForm>
    where
        F: FnMut(&Instantiation) -> Result<Instantiation>,
    {
        Ok(LogicalForm {
            root: self.root.map_leaves(&mut f)?,
        })
    }

    /// True when no leaf is a pointer.
    pub fn is_resolved(&self) -> bool {
        self.leaves().iter().all(|l| {
            !matches!(
                l,
                Instantiation::Entity(EntityRef::Pointer(_)) | Instantiation::Number(NumberRef::Pointer(_))
            )
        })
    }

    /// Canonical text: the body in `find(set(Q7), P3)` style. Entity and
    /// number pointers print as `@k` and `#k`.
    pub fn render(&self, kb: &KnowledgeBase) -> String {
        let mut s = String::new();
        render_node(self.body(), kb, &mut s);
        s
    }

    /// Inverse of [`LogicalForm::render`].
    pub fn parse(text: &str, kb: &KnowledgeBase) -> Result<LogicalForm> {
        let toks = lex(text)?;
        let mut p = TextParser { toks, pos: 0, kb };
        let cat = p.peek_category()?;
        let body = p.expr(cat)?;
        if p.pos != p.toks.len() {
            return Err(Error::Validation(format!(
                "trailing input after logical form: {text:?}"
            )));
        }
        LogicalForm::new(body)
    }
}

fn render_node(node: &Node, kb: &KnowledgeBase, out: &mut String) {
    match node {
        Node::Leaf(inst) => match inst {
            Instantiation::Entity(EntityRef::Id(e)) => out.push_str(kb.entity_name(*e)),
            Instantiation::Entity(EntityRef::Pointer(i)) => out.push_str(&format!("@{i}")),
            Instantiation::Predicate(p) => out.push_str(kb.predicate_name(*p)),
            Instantiation::Type(t) => out.push_str(kb.type_name(*t)),
            Instantiation::Number(NumberRef::Literal(n)) => out.push_str(&n.to_string()),
            Instantiation::Number(NumberRef::Pointer(i)) => out.push_str(&format!("#{i}")),
        },
        Node::Apply {
            op: Operator::NumLiteral,
            args,
        } => render_node(&args[0], kb, out),
        Node::Apply { op, args } => {
            out.push_str(op.name());
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                render_node(a, kb, out);
            }
            out.push(')');
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Lexeme {
    Ident(String),
    Open,
    Close,
    Comma,
}

fn lex(text: &str) -> Result<Vec<Lexeme>> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<Lexeme>| {
        if !cur.is_empty() {
            out.push(Lexeme::Ident(std::mem::take(cur)));
        }
    };
    for ch in text.chars() {
        match ch {
            '(' | ')' | ',' => {
                flush(&mut cur, &mut out);
                out.push(match ch {
                    '(' => Lexeme::Open,
                    ')' => Lexeme::Close,
                    _ => Lexeme::Comma,
                });
            }
            c if c.is_whitespace() => flush(&mut cur, &mut out),
            c => cur.push(c),
        }
    }
    flush(&mut cur, &mut out);
    if out.is_empty() {
        return Err(Error::Validation("empty logical form text".into()));
    }
    Ok(out)
}

struct TextParser<'a> {
    toks: Vec<Lexeme>,
    pos: usize,
    kb: &'a KnowledgeBase,
}

impl TextParser<'_> {
    fn ident(&mut self) -> Result<String> {
        match self.toks.get(self.pos) {
            Some(Lexeme::Ident(s)) => {
                self.pos += 1;
                Ok(s.clone())
            }
            other => Err(Error::Validation(format!("expected identifier, found {other:?}"))),
        }
    }

    fn expect(&mut self, lx: Lexeme) -> Result<()> {
        if self.toks.get(self.pos) == Some(&lx) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "expected {lx:?}, found {:?}",
                self.toks.get(self.pos)
            )))
        }
    }

    fn peek_category(&self) -> Result<Category> {
        match self.toks.first() {
            Some(Lexeme::Ident(s)) if is_number_text(s) => Ok(C::Num),
            Some(Lexeme::Ident(s)) => Operator::from_name(s)
                .map(Operator::result)
                .ok_or_else(|| Error::Validation(format!("unknown operator {s:?}"))),
            other => Err(Error::Validation(format!("unexpected {other:?}"))),
        }
    }

    fn expr(&mut self, cat: Category) -> Result<Node> {
        let word = self.ident()?;
        match cat {
            C::Entity => {
                if let Some(pos) = word.strip_prefix('@') {
                    return Ok(Node::entity_pointer(parse_usize(pos)?));
                }
                let e = self
                    .kb
                    .entity_id(&word)
                    .ok_or_else(|| Error::Reference(format!("entity {word}")))?;
                Ok(Node::entity(e))
            }
            C::Predicate => self
                .kb
                .predicate_id(&word)
                .map(Node::predicate)
                .ok_or_else(|| Error::Reference(format!("predicate {word}"))),
            C::Type => self
                .kb
                .type_id(&word)
                .map(Node::ty)
                .ok_or_else(|| Error::Reference(format!("type {word}"))),
            C::Num if is_number_text(&word) => match word.strip_prefix('#') {
                Some(pos) => Ok(Node::number_pointer(parse_usize(pos)?)),
                None => {
                    Ok(Node::number(word.parse().map_err(|_| {
                        Error::Validation(format!("bad number literal {word:?}"))
                    })?))
                }
            },
            _ => {
                let op = Operator::from_name(&word)
                    .ok_or_else(|| Error::Validation(format!("unknown operator {word:?}")))?;
                if op.result() != cat {
                    return Err(Error::Validation(format!(
                        "{word} yields {} where {cat} is required",
                        op.result()
                    )));
                }
                self.expect(Lexeme::Open)?;
                let mut args = Vec::new();
                for (i, a) in op.args().iter().enumerate() {
                    if i > 0 {
                        self.expect(Lexeme::Comma)?;
                    }
                    args.push(self.expr(*a)?);
                }
                self.expect(Lexeme::Close)?;
                Ok(Node::apply(op, args))
            }
        }
    }
}

fn is_number_text(s: &str) -> bool {
    let digits = s.strip_prefix('#').unwrap_or(s);
    !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit())
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Validation(format!("bad position {s:?}")))
}

/// Limits applied during decoding and search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub max_depth: usize,
    pub max_len: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            max_depth: 6,
            max_len: 40,
        }
    }
}

impl GrammarConfig {
    pub fn unbounded() -> Self {
        GrammarConfig {
            max_depth: usize::MAX / 4,
            max_len: usize::MAX / 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Slot {
    cat: Category,
    depth: usize,
}

/// Parser state of a decode prefix: the pending nonterminals, leftmost on
/// top of the stack.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PrefixState {
    stack: Vec<Slot>,
    len: usize,
}

impl Default for PrefixState {
    fn default() -> Self {
        Self::new()
    }
}

impl PrefixState {
    pub fn new() -> Self {
        PrefixState {
            stack: vec![Slot {
                cat: C::Start,
                depth: 0,
            }],
            len: 0,
        }
    }

    /// Replays a prefix, checking each token's legality.
    pub fn from_steps(steps: &[Step], cfg: &GrammarConfig) -> Result<Self> {
        let mut st = Self::new();
        for (i, s) in steps.iter().enumerate() {
            st.push(s.token, cfg)
                .map_err(|e| Error::Validation(format!("position {i}: {e}")))?;
        }
        Ok(st)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_complete(&self) -> bool {
        self.stack.is_empty()
    }

    /// Leftmost nonterminal, if any remain.
    pub fn leftmost(&self) -> Option<Category> {
        self.stack.last().map(|s| s.cat)
    }

    /// Tokens needed at minimum to close every open slot.
    pub fn min_remaining(&self) -> usize {
        self.stack.iter().map(|s| s.cat.min_len()).sum()
    }

    fn op_fits(&self, op: Operator, slot: Slot, cfg: &GrammarConfig) -> bool {
        if !op.is_decodable() || op.result() != slot.cat {
            return false;
        }
        if slot.depth + op.height() - 1 > cfg.max_depth {
            return false;
        }
        let rest = self.min_remaining() - slot.cat.min_len();
        let added: usize = op.args().iter().map(|c| c.min_len()).sum();
        self.len + 1 + added + rest <= cfg.max_len
    }

    pub fn is_legal(&self, token: DecodeToken, cfg: &GrammarConfig) -> bool {
        let Some(&slot) = self.stack.last() else {
            return token == DecodeToken::End;
        };
        match token {
            DecodeToken::Op(op) => self.op_fits(op, slot, cfg),
            DecodeToken::Start | DecodeToken::End => false,
            entry => entry.entry_category() == Some(slot.cat),
        }
    }

    /// Every token that keeps the prefix completable under `cfg`, ascending.
    pub fn legal(&self, cfg: &GrammarConfig) -> Vec<DecodeToken> {
        let Some(&slot) = self.stack.last() else {
            return vec![DecodeToken::End];
        };
        if let Some(t) = slot.cat.entry_token() {
            return vec![t];
        }
        Operator::ALL
            .iter()
            .filter(|op| self.op_fits(**op, slot, cfg))
            .map(|&op| DecodeToken::Op(op))
            .collect()
    }

    /// Applies a non-`end` token.
    pub fn push(&mut self, token: DecodeToken, cfg: &GrammarConfig) -> Result<()> {
        if !self.is_legal(token, cfg) || token == DecodeToken::End {
            return Err(Error::Validation(match self.leftmost() {
                Some(cat) => format!("{token} is illegal where {cat} is expected"),
                None => format!("{token} follows a complete form"),
            }));
        }
        let slot = self.stack.pop().expect("checked non-empty");
        if let DecodeToken::Op(op) = token {
            for cat in op.args().iter().rev() {
                self.stack.push(Slot {
                    cat: *cat,
                    depth: slot.depth + 1,
                });
            }
        }
        self.len += 1;
        Ok(())
    }
}

/// Next-token legality of a prefix under the default limits.
pub fn legal_next(partial: &[Step]) -> Result<BTreeSet<DecodeToken>> {
    legal_next_with(partial, &GrammarConfig::default())
}

pub fn legal_next_with(partial: &[Step], cfg: &GrammarConfig) -> Result<BTreeSet<DecodeToken>> {
    Ok(PrefixState::from_steps(partial, cfg)?.legal(cfg).into_iter().collect())
}

/// Depth-first (pre-order) token sequence of a logical form.
pub fn serialize(lf: &LogicalForm) -> Result<Vec<Step>> {
    lf.root.validate()?;
    let mut out = Vec::new();
    lf.root.write_steps(&mut out);
    Ok(out)
}

/// Rebuilds the unique tree whose pre-order is `steps`.
pub fn deserialize(steps: &[Step]) -> Result<LogicalForm> {
    if steps.is_empty() {
        return Err(Error::Validation("empty sequence".into()));
    }
    let mut pos = 0;
    let root = read_node(steps, &mut pos, C::Start)?;
    if pos != steps.len() {
        return Err(Error::Validation(format!(
            "trailing tokens after complete form at position {pos}"
        )));
    }
    Ok(LogicalForm { root })
}

fn read_node(steps: &[Step], pos: &mut usize, want: Category) -> Result<Node> {
    let Some(step) = steps.get(*pos) else {
        return Err(Error::Validation(format!(
            "sequence exhausted while {want} is still open"
        )));
    };
    let at = *pos;
    *pos += 1;
    match step.token {
        DecodeToken::Op(op) if op.is_decodable() => {
            if op.result() != want {
                return Err(Error::Validation(format!(
                    "position {at}: {} yields {} but leftmost nonterminal is {want}",
                    op.alias(),
                    op.result()
                )));
            }
            if step.inst.is_some() {
                return Err(Error::Validation(format!(
                    "position {at}: operator carries an instantiation"
                )));
            }
            let args = op
                .args()
                .iter()
                .map(|c| read_node(steps, pos, *c))
                .collect::<Result<Vec<_>>>()?;
            Ok(Node::Apply { op, args })
        }
        tok => match tok.entry_category() {
            Some(cat) if cat == want => match step.inst {
                Some(inst) if inst.category() == cat => Ok(Node::Leaf(inst)),
                Some(_) => Err(Error::Validation(format!(
                    "position {at}: instantiation does not match {cat}"
                ))),
                None => Err(Error::Validation(format!("position {at}: {cat} is not instantiated"))),
            },
            _ => Err(Error::Validation(format!(
                "position {at}: {tok} is illegal where {want} is expected"
            ))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: u32) -> EntityId {
        EntityId(i)
    }
    fn p(i: u32) -> PredicateId {
        PredicateId(i)
    }

    fn toks(steps: &[Step]) -> Vec<DecodeToken> {
        steps.iter().map(|s| s.token).collect()
    }

    #[test]
    fn vocabulary_has_27_symbols() {
        assert_eq!(DecodeToken::all().count(), 27);
        for (i, t) in DecodeToken::all().enumerate() {
            assert_eq!(t.index(), i);
        }
    }

    #[test]
    fn table_signatures() {
        use Operator::*;
        assert_eq!(Find.args(), &[C::Set, C::Predicate]);
        assert_eq!(Filter.args(), &[C::Type, C::Set]);
        assert_eq!(In.result(), C::Bool);
        assert_eq!(Count.result(), C::Num);
        assert_eq!(NumLiteral.args(), &[C::Number]);
        assert_eq!(Larger.args(), &[C::Set, C::Predicate, C::Num]);
        assert_eq!(Operator::from_number(17), Some(SetOf));
        for op in [EntityConst, PredicateConst, TypeConst, NumberConst] {
            assert!(op.args().is_empty());
            assert!(op.result().is_entry());
        }
    }

    #[test]
    fn serialize_find() {
        let lf = LogicalForm::new(Node::find(Node::set_of(e(7)), p(3))).unwrap();
        let s = serialize(&lf).unwrap();
        use Operator::*;
        assert_eq!(
            toks(&s),
            vec![
                DecodeToken::Op(StartSet),
                DecodeToken::Op(Find),
                DecodeToken::Op(SetOf),
                DecodeToken::Entity,
                DecodeToken::Predicate
            ]
        );
        assert_eq!(s[3].inst, Some(Instantiation::Entity(EntityRef::Id(e(7)))));
        assert_eq!(s[4].inst, Some(Instantiation::Predicate(p(3))));
        assert_eq!(deserialize(&s).unwrap(), lf);
    }

    #[test]
    fn serialize_count() {
        let body = Node::apply(Operator::Count, vec![Node::find(Node::set_of(e(7)), p(3))]);
        let lf = LogicalForm::new(body).unwrap();
        let got: Vec<String> = serialize(&lf).unwrap().iter().map(|s| s.to_string()).collect();
        assert_eq!(got, ["A2", "A5", "A4", "A17", "e:e#7", "p:p#3"]);
    }

    #[test]
    fn deserialize_rejects_category_mismatch() {
        let steps = [Step::op(Operator::StartSet), Step::op(Operator::Count)];
        let err = deserialize(&steps).unwrap_err().to_string();
        assert!(err.contains("leftmost nonterminal is set"), "{err}");
    }

    #[test]
    fn deserialize_rejects_empty_and_trailing_and_short() {
        assert!(deserialize(&[]).is_err());
        let lf = LogicalForm::new(Node::set_of(e(1))).unwrap();
        let mut s = serialize(&lf).unwrap();
        assert!(deserialize(&s[..2]).is_err());
        s.push(Step::op(Operator::SetOf));
        assert!(deserialize(&s).is_err());
    }

    #[test]
    fn legal_next_examples() {
        use Operator::*;
        let start = legal_next(&[]).unwrap();
        let want: BTreeSet<_> = [StartSet, StartNum, StartBool].map(DecodeToken::Op).into();
        assert_eq!(start, want);

        let after_a1 = legal_next(&[Step::op(StartSet)]).unwrap();
        let want: BTreeSet<_> = Operator::ALL
            .iter()
            .filter(|o| o.result() == C::Set)
            .map(|&o| DecodeToken::Op(o))
            .collect();
        assert_eq!(after_a1, want);
        assert!(after_a1.contains(&DecodeToken::Op(Find)));
        assert!(after_a1.contains(&DecodeToken::Op(SetOf)));
        assert!(!after_a1.contains(&DecodeToken::Op(Count)));
        assert_eq!(after_a1.len(), 11);

        let lf = LogicalForm::new(Node::find(Node::set_of(e(7)), p(3))).unwrap();
        let full = serialize(&lf).unwrap();
        assert_eq!(legal_next(&full).unwrap(), BTreeSet::from([DecodeToken::End]));
    }

    #[test]
    fn depth_limit_forces_leaves() {
        let cfg = GrammarConfig {
            max_depth: 1,
            max_len: 40,
        };
        let st = PrefixState::from_steps(&[Step::op(Operator::StartSet)], &cfg).unwrap();
        assert_eq!(st.legal(&cfg), vec![DecodeToken::Op(Operator::SetOf)]);
        let st = PrefixState::new();
        // bool needs in(e, set(e)), two levels deep
        assert!(!st.legal(&cfg).contains(&DecodeToken::Op(Operator::StartBool)));
    }

    #[test]
    fn length_limit_is_respected() {
        let cfg = GrammarConfig {
            max_depth: 6,
            max_len: 5,
        };
        let st = PrefixState::from_steps(&[Step::op(Operator::StartSet)], &cfg).unwrap();
        // find(set(e), p) is exactly 5 tokens; union needs at least 6
        let legal = st.legal(&cfg);
        assert!(legal.contains(&DecodeToken::Op(Operator::Find)));
        assert!(!legal.contains(&DecodeToken::Op(Operator::Union)));
    }

    #[test]
    fn text_round_trip() {
        let mut b = crate::kb::KbBuilder::new();
        b.add_entity("Q7", "Seven", &["T1"]).unwrap();
        b.add_entity("Q8", "Eight", &["T1"]).unwrap();
        b.add_triple("Q7", "P3", "Q8").unwrap();
        let kb = b.build();
        for text in [
            "find(set(Q7), P3)",
            "count(find(set(@4), P3))",
            "in(Q8, find(set(Q7), P3))",
            "larger(filter(T1, set(Q7)), P3, 2)",
            "equal(set(Q7), P3, #5)",
            "3",
        ] {
            let lf = LogicalForm::parse(text, &kb).unwrap();
            assert_eq!(lf.render(&kb), text);
        }
        assert!(LogicalForm::parse("find(set(Q9), P3)", &kb).is_err());
        assert!(LogicalForm::parse("count(set(Q7)", &kb).is_err());
        assert!(LogicalForm::parse("find(set(Q7), P3) x", &kb).is_err());
    }
}
