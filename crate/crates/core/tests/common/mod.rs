//! Random knowledge bases, random logical forms, and a reference evaluator
//! that reads the raw triple list directly.
#![allow(dead_code)]

pub mod beam;

use std::collections::BTreeSet;

use kbqa_core::grammar::{
    legal_next_with, Category, DecodeToken, EntityRef, GrammarConfig, Instantiation, Node, NumberRef, Operator, Step,
};
use kbqa_core::kb::{EntityId, KbBuilder, KnowledgeBase, PredicateId, TypeId};
use rand::seq::SliceRandom;
use rand::Rng;

/// Plain description of a small KB: `types[e]` lists entity `e`'s types.
#[derive(Clone, Debug)]
pub struct ToyKb {
    pub entities: usize,
    pub predicates: usize,
    pub types: Vec<Vec<u32>>,
    pub num_types: usize,
    pub triples: Vec<(u32, u32, u32)>,
}

impl ToyKb {
    pub fn random<R: Rng>(rng: &mut R, max_triples: usize) -> Self {
        let entities = rng.gen_range(2..=12);
        let predicates = rng.gen_range(1..=3);
        let num_types = rng.gen_range(1..=3);
        let types = (0..entities)
            .map(|_| {
                let mut t: Vec<u32> = (0..num_types as u32).filter(|_| rng.gen_bool(0.4)).collect();
                if t.is_empty() {
                    t.push(rng.gen_range(0..num_types as u32));
                }
                t
            })
            .collect();
        let n = rng.gen_range(0..=max_triples);
        let triples = (0..n)
            .map(|_| {
                (
                    rng.gen_range(0..entities as u32),
                    rng.gen_range(0..predicates as u32),
                    rng.gen_range(0..entities as u32),
                )
            })
            .collect();
        ToyKb {
            entities,
            predicates,
            types,
            num_types,
            triples,
        }
    }

    /// Ids are interned in order, so `EntityId(i)` is entity `i` and
    /// `PredicateId(p)` is predicate `p`. Type ids follow first use; see
    /// [`ToyKb::toy_type`].
    pub fn build(&self) -> KnowledgeBase {
        let mut b = KbBuilder::new();
        for e in 0..self.entities {
            let names: Vec<String> = self.types[e].iter().map(|t| format!("t{t}")).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            b.add_entity(&format!("E{e}"), &format!("ent {e}"), &names).unwrap();
        }
        for p in 0..self.predicates {
            b.add_predicate(&format!("P{p}"));
        }
        for &(s, p, o) in &self.triples {
            b.add_triple(&format!("E{s}"), &format!("P{p}"), &format!("E{o}"))
                .unwrap();
        }
        b.build()
    }

    /// Toy type behind a built KB's type id.
    pub fn toy_type(kb: &KnowledgeBase, t: u32) -> u32 {
        kb.type_name(TypeId(t))[1..].parse().unwrap()
    }
}

/// Random well-typed tree of `cat` with operator depth at most `depth`.
/// Entities, predicates and types are drawn from the given pools.
pub fn random_tree<R: Rng>(
    rng: &mut R,
    cat: Category,
    depth: usize,
    entities: &[EntityId],
    predicates: &[PredicateId],
    types: &[TypeId],
) -> Node {
    let leaf = |rng: &mut R, c: Category| -> Node {
        match c {
            Category::Entity => Node::entity(*entities.choose(rng).unwrap()),
            Category::Predicate => Node::predicate(*predicates.choose(rng).unwrap()),
            Category::Type => Node::ty(*types.choose(rng).unwrap()),
            Category::Number => Node::Leaf(Instantiation::Number(NumberRef::Literal(rng.gen_range(0..4)))),
            other => unreachable!("{other} is not an entry"),
        }
    };
    if cat.is_entry() {
        return leaf(rng, cat);
    }
    let ops: Vec<Operator> = Operator::ALL
        .iter()
        .copied()
        .filter(|op| op.is_decodable() && op.result() == cat)
        .filter(|op| {
            // Keep only operators that fit in the remaining depth.
            let needs = match op {
                Operator::In | Operator::StartBool => 2,
                _ => 1,
            };
            depth >= needs
        })
        .collect();
    let leaf_only: Vec<Operator> = ops
        .iter()
        .copied()
        .filter(|op| matches!(op, Operator::SetOf | Operator::NumLiteral))
        .collect();
    let op = if depth <= 1 || (!leaf_only.is_empty() && rng.gen_bool(0.35)) {
        *leaf_only.choose(rng).unwrap_or_else(|| ops.choose(rng).unwrap())
    } else {
        *ops.choose(rng).unwrap()
    };
    let child_depth = if op.result() == Category::Start {
        depth
    } else {
        depth - 1
    };
    let args = op
        .args()
        .iter()
        .map(|&c| random_tree(rng, c, child_depth, entities, predicates, types))
        .collect();
    Node::apply(op, args)
}

/// Reference answer: set, count or boolean.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Naive {
    Set(BTreeSet<u32>),
    Num(u64),
    Bool(bool),
}

fn degree(kb: &ToyKb, e: u32, p: u32) -> usize {
    kb.triples
        .iter()
        .filter(|t| t.0 == e && t.1 == p)
        .map(|t| t.2)
        .collect::<BTreeSet<_>>()
        .len()
}

fn ent(n: &Node) -> u32 {
    match n {
        Node::Leaf(Instantiation::Entity(EntityRef::Id(e))) => e.0,
        other => panic!("expected entity, got {other:?}"),
    }
}

fn pred(n: &Node) -> u32 {
    match n {
        Node::Leaf(Instantiation::Predicate(p)) => p.0,
        other => panic!("expected predicate, got {other:?}"),
    }
}

/// Direct reading of the operator table over the raw triples.
pub fn naive_eval(kb: &ToyKb, type_of: &dyn Fn(u32) -> u32, node: &Node) -> Naive {
    let Node::Apply { op, args } = node else { panic!("leaf") };
    let set = |n: &Node| match naive_eval(kb, type_of, n) {
        Naive::Set(s) => s,
        other => panic!("expected set, got {other:?}"),
    };
    let num = |n: &Node| match naive_eval(kb, type_of, n) {
        Naive::Num(v) => v,
        other => panic!("expected num, got {other:?}"),
    };
    match op {
        Operator::StartSet | Operator::StartNum | Operator::StartBool => naive_eval(kb, type_of, &args[0]),
        Operator::Find => {
            let s = set(&args[0]);
            let p = pred(&args[1]);
            Naive::Set(
                kb.triples
                    .iter()
                    .filter(|t| s.contains(&t.0) && t.1 == p)
                    .map(|t| t.2)
                    .collect(),
            )
        }
        Operator::Count => Naive::Num(set(&args[0]).len() as u64),
        Operator::In => Naive::Bool(set(&args[1]).contains(&ent(&args[0]))),
        Operator::Union => Naive::Set(set(&args[0]).union(&set(&args[1])).copied().collect()),
        Operator::Inter => Naive::Set(set(&args[0]).intersection(&set(&args[1])).copied().collect()),
        Operator::Diff => Naive::Set(set(&args[0]).difference(&set(&args[1])).copied().collect()),
        Operator::Larger | Operator::Less | Operator::Equal => {
            let s = set(&args[0]);
            let p = pred(&args[1]);
            let k = num(&args[2]) as usize;
            Naive::Set(
                s.into_iter()
                    .filter(|&e| {
                        let d = degree(kb, e, p);
                        match op {
                            Operator::Larger => d > k,
                            Operator::Less => d < k,
                            _ => d == k,
                        }
                    })
                    .collect(),
            )
        }
        Operator::ArgMax | Operator::ArgMin => {
            let s = set(&args[0]);
            let p = pred(&args[1]);
            let mut best: Option<usize> = None;
            for &e in &s {
                let d = degree(kb, e, p);
                best = Some(match best {
                    None => d,
                    Some(b) if *op == Operator::ArgMax => b.max(d),
                    Some(b) => b.min(d),
                });
            }
            Naive::Set(s.into_iter().filter(|&e| Some(degree(kb, e, p)) == best).collect())
        }
        Operator::Filter => {
            let Node::Leaf(Instantiation::Type(t)) = &args[0] else {
                panic!("type")
            };
            let want = type_of(t.0);
            Naive::Set(
                set(&args[1])
                    .into_iter()
                    .filter(|&e| kb.types[e as usize].contains(&want))
                    .collect(),
            )
        }
        Operator::NumLiteral => match &args[0] {
            Node::Leaf(Instantiation::Number(NumberRef::Literal(n))) => Naive::Num(*n),
            other => panic!("number literal expected, got {other:?}"),
        },
        Operator::SetOf => Naive::Set(BTreeSet::from([ent(&args[0])])),
        other => panic!("{other:?} is not evaluable"),
    }
}

/// Entry constants available to the enumerator.
#[derive(Clone, Debug)]
pub struct Pools {
    pub entities: Vec<EntityId>,
    pub predicates: Vec<PredicateId>,
    pub types: Vec<TypeId>,
    pub numbers: Vec<u64>,
}

impl Pools {
    pub fn leaves(&self, cat: Category) -> Vec<Node> {
        match cat {
            Category::Entity => self.entities.iter().map(|&e| Node::entity(e)).collect(),
            Category::Predicate => self.predicates.iter().map(|&p| Node::predicate(p)).collect(),
            Category::Type => self.types.iter().map(|&t| Node::ty(t)).collect(),
            Category::Number => self
                .numbers
                .iter()
                .map(|&n| Node::Leaf(Instantiation::Number(NumberRef::Literal(n))))
                .collect(),
            other => panic!("{other} is not an entry"),
        }
    }
}

/// Every tree of `cat` whose operator depth is at most `depth`, built by
/// plain recursion over the operator signatures.
pub fn all_trees(cat: Category, depth: usize, pools: &Pools) -> Vec<Node> {
    if cat.is_entry() {
        return pools.leaves(cat);
    }
    let mut out = Vec::new();
    for op in Operator::ALL
        .iter()
        .copied()
        .filter(|o| o.is_decodable() && o.result() == cat)
    {
        let child_depth = if cat == Category::Start {
            depth
        } else if depth == 0 {
            continue;
        } else {
            depth - 1
        };
        let choices: Vec<Vec<Node>> = op.args().iter().map(|&c| all_trees(c, child_depth, pools)).collect();
        let mut combos: Vec<Vec<Node>> = vec![Vec::new()];
        for ch in &choices {
            let mut next = Vec::with_capacity(combos.len() * ch.len());
            for c in &combos {
                for n in ch {
                    let mut v = c.clone();
                    v.push(n.clone());
                    next.push(v);
                }
            }
            combos = next;
        }
        out.extend(combos.into_iter().map(|args| Node::apply(op, args)));
    }
    out
}

/// Two entities, one predicate, one type and one number.
pub fn small_pools() -> Pools {
    Pools {
        entities: vec![EntityId(0), EntityId(1)],
        predicates: vec![PredicateId(0)],
        types: vec![TypeId(0)],
        numbers: vec![1],
    }
}

fn instantiations(token: DecodeToken, pools: &Pools) -> Vec<Step> {
    let cat = token.entry_category().expect("entry");
    pools
        .leaves(cat)
        .into_iter()
        .map(|n| match n {
            Node::Leaf(i) => Step::entry(i),
            _ => unreachable!(),
        })
        .collect()
}

/// Sequences reachable by repeatedly extending with `legal_next`.
pub fn generate_by_legal_next(cfg: &GrammarConfig, pools: &Pools) -> BTreeSet<Vec<Step>> {
    let mut out = BTreeSet::new();
    let mut stack = vec![Vec::<Step>::new()];
    while let Some(prefix) = stack.pop() {
        for tok in legal_next_with(&prefix, cfg).unwrap() {
            if tok == DecodeToken::End {
                out.insert(prefix.clone());
                continue;
            }
            let steps = if tok.entry_category().is_some() {
                instantiations(tok, pools)
            } else {
                vec![Step { token: tok, inst: None }]
            };
            for s in steps {
                let mut p = prefix.clone();
                p.push(s);
                stack.push(p);
            }
        }
    }
    out
}
