mod common;

use std::collections::BTreeSet;

use common::{all_trees, naive_eval, random_tree, Naive, Pools, ToyKb};
use kbqa_core::executor::{execute, execute_partial, PartialVerdict, Value};
use kbqa_core::grammar::{serialize, Category, LogicalForm, Node, Operator};
use kbqa_core::kb::{EntityId, KnowledgeBase, PredicateId, TypeId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pools(toy: &ToyKb, kb: &KnowledgeBase) -> (Vec<EntityId>, Vec<PredicateId>, Vec<TypeId>) {
    (
        (0..toy.entities as u32).map(EntityId).collect(),
        (0..toy.predicates as u32).map(PredicateId).collect(),
        kb.types().collect(),
    )
}

fn as_naive(v: &Value) -> Naive {
    match v {
        Value::Set(s) => Naive::Set(s.iter().map(|e| e.0).collect()),
        Value::Num(n) => Naive::Num(*n),
        Value::Bool(b) => Naive::Bool(*b),
    }
}

fn random_set(rng: &mut ChaCha8Rng, toy: &ToyKb, kb: &KnowledgeBase, depth: usize) -> Node {
    let (e, p, t) = pools(toy, kb);
    random_tree(rng, Category::Set, depth, &e, &p, &t)
}

fn eval(node: Node, kb: &KnowledgeBase) -> BTreeSet<EntityId> {
    let lf = LogicalForm::new(node).unwrap();
    match execute(&lf, kb).unwrap().value {
        Value::Set(s) => s,
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_naive_evaluator(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = ToyKb::random(&mut rng, 50);
        let kb = toy.build();
        let (e, p, t) = pools(&toy, &kb);
        let depth = rng.gen_range(1..=4);
        let root = random_tree(&mut rng, Category::Start, depth, &e, &p, &t);
        let lf = LogicalForm::from_root(root.clone()).unwrap();
        prop_assert!(lf.depth() <= 4);
        let got = execute(&lf, &kb).unwrap().value;
        let type_of = |x: u32| ToyKb::toy_type(&kb, x);
        prop_assert_eq!(as_naive(&got), naive_eval(&toy, &type_of, &root));
    }

    #[test]
    fn set_algebra(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = ToyKb::random(&mut rng, 50);
        let kb = toy.build();
        let a = random_set(&mut rng, &toy, &kb, 3);
        let b = random_set(&mut rng, &toy, &kb, 3);
        let ap = |op, x: &Node, y: &Node| Node::apply(op, vec![x.clone(), y.clone()]);
        prop_assert_eq!(eval(ap(Operator::Union, &a, &b), &kb), eval(ap(Operator::Union, &b, &a), &kb));
        prop_assert_eq!(eval(ap(Operator::Inter, &a, &b), &kb), eval(ap(Operator::Inter, &b, &a), &kb));
        prop_assert!(eval(ap(Operator::Diff, &a, &a), &kb).is_empty());
        let tp = Node::ty(*kb.types().collect::<Vec<_>>().first().unwrap());
        let once = Node::apply(Operator::Filter, vec![tp.clone(), a.clone()]);
        let twice = Node::apply(Operator::Filter, vec![tp, once.clone()]);
        prop_assert_eq!(eval(once, &kb), eval(twice, &kb));
    }

    #[test]
    fn degree_comparisons_partition(seed in any::<u64>(), k in 0u64..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let toy = ToyKb::random(&mut rng, 50);
        let kb = toy.build();
        let s = random_set(&mut rng, &toy, &kb, 3);
        let p = Node::predicate(PredicateId(rng.gen_range(0..toy.predicates as u32)));
        let cmp = |op| eval(Node::apply(op, vec![s.clone(), p.clone(), Node::number(k)]), &kb);
        let mut all = cmp(Operator::Larger);
        all.extend(cmp(Operator::Equal));
        all.extend(cmp(Operator::Less));
        prop_assert_eq!(all, eval(s.clone(), &kb));
    }
}

/// Every prefix of a form with a non-empty, non-failing answer survives
/// early execution.
#[test]
fn partial_execution_never_discards_a_good_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0usize;
    let mut pruned = 0usize;
    for _ in 0..12 {
        let toy = ToyKb::random(&mut rng, 20);
        let kb = toy.build();
        let pools = Pools {
            entities: vec![EntityId(0), EntityId(1)],
            predicates: vec![PredicateId(0)],
            types: kb.types().take(1).collect(),
            numbers: vec![1],
        };
        for root in all_trees(Category::Start, 3, &pools) {
            let lf = LogicalForm::from_root(root).unwrap();
            let steps = serialize(&lf).unwrap();
            let good = match execute(&lf, &kb) {
                Ok(a) => !a.value.is_empty_set(),
                Err(_) => false,
            };
            for cut in 1..=steps.len() {
                let v = execute_partial(&steps[..cut], &kb).unwrap();
                if v == PartialVerdict::Empty {
                    assert!(!good, "{} pruned at {cut}", lf.render(&kb));
                    pruned += 1;
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 10_000);
    assert!(pruned > 0);
}
