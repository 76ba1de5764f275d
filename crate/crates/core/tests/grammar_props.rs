mod common;

use std::collections::BTreeSet;

use common::{all_trees, generate_by_legal_next, random_tree, small_pools};
use kbqa_core::grammar::{
    deserialize, legal_next_with, serialize, Category, DecodeToken, GrammarConfig, Instantiation, LogicalForm,
    NumberRef, PrefixState, Step,
};
use kbqa_core::kb::{EntityId, PredicateId, TypeId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_form(seed: u64, depth: usize) -> LogicalForm {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ents: Vec<EntityId> = (0..5).map(EntityId).collect();
    let preds: Vec<PredicateId> = (0..3).map(PredicateId).collect();
    let types: Vec<TypeId> = (0..2).map(TypeId).collect();
    LogicalForm::from_root(random_tree(&mut rng, Category::Start, depth, &ents, &preds, &types)).unwrap()
}

#[test]
fn exhaustive_agreement_at_depth_three() {
    let pools = small_pools();
    let cfg = GrammarConfig {
        max_depth: 3,
        max_len: 1000,
    };
    let trees = all_trees(Category::Start, 3, &pools);
    let mut accepted = BTreeSet::new();
    for t in &trees {
        let lf = LogicalForm::from_root(t.clone()).unwrap();
        let steps = serialize(&lf).unwrap();
        assert_eq!(deserialize(&steps).unwrap(), lf);
        accepted.insert(steps);
    }
    let generated = generate_by_legal_next(&cfg, &pools);
    assert_eq!(accepted.len(), trees.len());
    assert!(trees.len() > 1000, "{} trees", trees.len());
    assert_eq!(generated, accepted);
}

#[test]
fn depth_three_sequences_respect_the_limit() {
    let cfg = GrammarConfig {
        max_depth: 3,
        max_len: 1000,
    };
    for steps in generate_by_legal_next(&cfg, &small_pools()) {
        assert!(deserialize(&steps).unwrap().depth() <= 3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn serialize_then_deserialize_is_identity(seed in any::<u64>(), depth in 1usize..6) {
        let lf = random_form(seed, depth);
        let steps = serialize(&lf).unwrap();
        prop_assert_eq!(deserialize(&steps).unwrap(), lf);
    }

    /// Legal tokens keep the prefix valid; illegal ones make every
    /// completion fail to deserialize.
    #[test]
    fn prefix_soundness(seed in any::<u64>(), depth in 1usize..5, cut in 0usize..30, junk in 0usize..27) {
        let lf = random_form(seed, depth);
        let steps = serialize(&lf).unwrap();
        let cut = cut.min(steps.len());
        let prefix = &steps[..cut];
        let cfg = GrammarConfig::unbounded();
        let legal = legal_next_with(prefix, &cfg).unwrap();
        prop_assert!(!legal.is_empty());
        let expected = steps.get(cut).map(|s| s.token).unwrap_or(DecodeToken::End);
        prop_assert!(legal.contains(&expected));
        for &t in &legal {
            if t != DecodeToken::End {
                let mut st = PrefixState::from_steps(prefix, &cfg).unwrap();
                prop_assert!(st.push(t, &cfg).is_ok());
            }
        }
        let t = DecodeToken::from_index(junk).unwrap();
        if !legal.contains(&t) && t != DecodeToken::End && t != DecodeToken::Start {
            let mut bad = prefix.to_vec();
            bad.push(match t.entry_category() {
                Some(Category::Number) => Step::entry(Instantiation::Number(NumberRef::Literal(1))),
                Some(Category::Entity) => Step::entry(Instantiation::Entity(kbqa_core::grammar::EntityRef::Id(EntityId(0)))),
                Some(Category::Predicate) => Step::entry(Instantiation::Predicate(PredicateId(0))),
                Some(Category::Type) => Step::entry(Instantiation::Type(TypeId(0))),
                _ => Step { token: t, inst: None },
            });
            // The original suffix is one completion; any completion fails.
            let mut completed = bad.clone();
            completed.extend_from_slice(&steps[cut..]);
            prop_assert!(deserialize(&bad).is_err());
            prop_assert!(deserialize(&completed).is_err());
            prop_assert!(PrefixState::from_steps(&bad, &cfg).is_err());
        }
    }
}
