//! A scorer with prefix-dependent pseudo-random distributions and a
//! brute-force enumerator of every complete decode under it.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};

use kbqa_core::executor::{execute, Value};
use kbqa_core::grammar::{legal_next_with, DecodeToken, EntityRef, GrammarConfig, Instantiation, NumberRef, Step};
use kbqa_core::inference::{beam_decode, BeamConfig, ExecPruner, NoPruning, StepScorer};
use kbqa_core::kb::{EntityId, PredicateId, TypeId};
use kbqa_core::linker::{substitute_pointers, LinkedMention, Mention};
use kbqa_core::nn::StepDistributions;
use kbqa_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ToyKb;

/// Prefix-dependent pseudo-random distributions.
pub struct HashScorer {
    pub seed: u64,
    pub sizes: [usize; 4],
}

impl HashScorer {
    fn dist(&self, prefix: &[DecodeToken], salt: usize, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n)
            .map(|i| {
                let mut h = DefaultHasher::new();
                (self.seed, prefix.iter().map(|t| t.index()).collect::<Vec<_>>(), salt, i).hash(&mut h);
                0.05 + (h.finish() % 10_000) as f64 / 10_000.0
            })
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / z).collect()
    }
}

impl StepScorer for HashScorer {
    fn distributions(&self, prefix: &[DecodeToken]) -> Result<StepDistributions<f64>> {
        let [p, t, e, n] = self.sizes;
        Ok(StepDistributions {
            token: self.dist(prefix, 0, DecodeToken::COUNT),
            predicate: self.dist(prefix, 1, p),
            ty: self.dist(prefix, 2, t),
            entity: self.dist(prefix, 3, e),
            number: self.dist(prefix, 4, n),
        })
    }
}

pub fn inst(tok: DecodeToken, i: usize) -> Instantiation {
    match tok {
        DecodeToken::Entity => Instantiation::Entity(EntityRef::Pointer(i)),
        DecodeToken::Number => Instantiation::Number(NumberRef::Pointer(i)),
        DecodeToken::Predicate => Instantiation::Predicate(PredicateId(i as u32)),
        DecodeToken::Type => Instantiation::Type(TypeId(i as u32)),
        _ => unreachable!(),
    }
}

/// Every complete sequence with its score, by direct enumeration.
pub fn enumerate(s: &HashScorer, g: &GrammarConfig) -> Vec<(Vec<Step>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<Step>::new(), 0.0f64)];
    while let Some((steps, score)) = stack.pop() {
        let toks: Vec<DecodeToken> = steps.iter().map(|s| s.token).collect();
        let d = s.distributions(&toks).unwrap();
        for tok in legal_next_with(&steps, g).unwrap() {
            let base = score + d.token[tok.index()].ln();
            if tok == DecodeToken::End {
                out.push((steps.clone(), base));
                continue;
            }
            match tok.entry_category() {
                Some(cat) => {
                    for (i, p) in d.for_category(cat).iter().enumerate() {
                        let mut v = steps.clone();
                        v.push(Step::entry(inst(tok, i)));
                        stack.push((v, base + p.ln()));
                    }
                }
                None => {
                    let mut v = steps.clone();
                    v.push(Step { token: tok, inst: None });
                    stack.push((v, base));
                }
            }
        }
    }
    out
}

pub fn beam(size: usize, g: GrammarConfig) -> BeamConfig {
    BeamConfig {
        beam_size: size,
        grammar: g,
        max_expansions: usize::MAX,
        ..Default::default()
    }
}

pub const TOY: GrammarConfig = GrammarConfig {
    max_depth: 2,
    max_len: 8,
};

pub fn mention(start: usize, text: &str, e: u32) -> LinkedMention {
    LinkedMention {
        mention: Mention {
            start,
            end: start + 1,
            text: text.into(),
            ty: TypeId(0),
        },
        entity: Some(EntityId(e)),
        candidates: vec![EntityId(e)],
        fell_back: false,
    }
}

pub struct PruningAudit {
    /// Complete forms the exhaustive decode kept and the pruned one lost.
    pub pruned: usize,
    pub wrongly_pruned: Vec<String>,
}

/// Decodes every depth-3 form over random toy KBs with and without early
/// execution and checks each lost form yields no answer.
pub fn audit_pruning(seed: u64, rounds: u64) -> PruningAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<String> = ["a", "b", "1"].iter().map(|s| s.to_string()).collect();
    let g = GrammarConfig {
        max_depth: 3,
        max_len: 9,
    };
    let mut audit = PruningAudit {
        pruned: 0,
        wrongly_pruned: Vec::new(),
    };
    for round in 0..rounds {
        let toy = ToyKb::random(&mut rng, 16);
        let kb = toy.build();
        let links = vec![mention(0, "a", 0), mention(1, "b", 1)];
        let s = HashScorer {
            seed: round,
            sizes: [toy.predicates, kb.num_types(), tokens.len(), tokens.len()],
        };
        let all = enumerate(&s, &g);
        let cfg = beam(all.len(), g);
        let pruner = ExecPruner {
            kb: &kb,
            tokens: &tokens,
            links: &links,
            budget: 100_000,
        };
        let kept: BTreeSet<Vec<Step>> = beam_decode(&s, &pruner, &cfg)
            .unwrap()
            .into_iter()
            .map(|h| h.steps)
            .collect();
        let full: BTreeMap<Vec<Step>, f64> = beam_decode(&s, &NoPruning, &cfg)
            .unwrap()
            .into_iter()
            .map(|h| (h.steps, h.score))
            .collect();
        assert_eq!(full.len(), all.len());
        for steps in full.keys().filter(|k| !kept.contains(*k)) {
            audit.pruned += 1;
            let lf = kbqa_core::grammar::deserialize(steps).unwrap();
            let answer = substitute_pointers(&lf, &tokens, &links)
                .ok()
                .and_then(|r| execute(&r, &kb).ok());
            if matches!(answer, Some(a) if !matches!(&a.value, Value::Set(s) if s.is_empty())) {
                audit.wrongly_pruned.push(lf.render(&kb));
            }
        }
    }
    audit
}

/// Top beam hypothesis against the exhaustive maximum on the toy grammar.
pub fn beam_matches_exhaustive(seed: u64) -> bool {
    let s = HashScorer {
        seed,
        sizes: [2, 1, 2, 2],
    };
    let all = enumerate(&s, &TOY);
    let best = all
        .iter()
        .cloned()
        .fold((Vec::new(), f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
    let out = beam_decode(&s, &NoPruning, &beam(all.len(), TOY)).unwrap();
    out[0].steps == best.0 && (out[0].score - best.1).abs() < 1e-9
}
