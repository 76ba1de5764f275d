//! Synthetic knowledge base and dialog generator.
//!
//! Entity names are pronounceable pseudo-words, a few surface texts are
//! shared by entities of different types, and questions follow fixed
//! templates per question type. Held-out dialogs use the same templates
//! over subjects never asked about in training.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{answer_record, AnswerRecord, Dialog, MentionRecord, Speaker, Turn};
use crate::error::{Error, Result};
use crate::executor::{execute, Value};
use crate::grammar::{LogicalForm, Node, Operator};
use crate::kb::{EntityId, KbBuilder, KnowledgeBase, PredicateId, TypeId};
use crate::text::tokenize;

pub const SIMPLE_DIRECT: &str = "Simple Question (Direct)";
pub const SIMPLE_COREF: &str = "Simple Question (Coreferenced)";
pub const SIMPLE_ELLIPSIS: &str = "Simple Question (Ellipsis)";
pub const CLARIFICATION: &str = "Clarification";
pub const COMPARATIVE: &str = "Comparative Reasoning (All)";
pub const COMPARATIVE_COUNT: &str = "Comparative Reasoning (Count) (All)";
pub const LOGICAL: &str = "Logical Reasoning (All)";
pub const QUANTITATIVE: &str = "Quantitative Reasoning (All)";
pub const QUANTITATIVE_COUNT: &str = "Quantitative Reasoning (Count) (All)";
pub const VERIFICATION: &str = "Verification (Boolean) (All)";

pub const QUESTION_TYPES: [&str; 10] = [
    SIMPLE_DIRECT,
    SIMPLE_COREF,
    SIMPLE_ELLIPSIS,
    CLARIFICATION,
    COMPARATIVE,
    COMPARATIVE_COUNT,
    LOGICAL,
    QUANTITATIVE,
    QUANTITATIVE_COUNT,
    VERIFICATION,
];

struct TypeSpec {
    name: &'static str,
    word: &'static str,
    share: f64,
    pattern: &'static str,
}

const TYPES: [TypeSpec; 8] = [
    TypeSpec {
        name: "person",
        word: "person",
        share: 0.30,
        pattern: "{w} {w}",
    },
    TypeSpec {
        name: "film",
        word: "film",
        share: 0.15,
        pattern: "{w} {w}",
    },
    TypeSpec {
        name: "city",
        word: "city",
        share: 0.10,
        pattern: "{w}",
    },
    TypeSpec {
        name: "country",
        word: "country",
        share: 0.03,
        pattern: "{w}ia",
    },
    TypeSpec {
        name: "company",
        word: "company",
        share: 0.08,
        pattern: "{w} corp",
    },
    TypeSpec {
        name: "record_label",
        word: "label",
        share: 0.06,
        pattern: "{w} records",
    },
    TypeSpec {
        name: "band",
        word: "band",
        share: 0.12,
        pattern: "the {w}s",
    },
    TypeSpec {
        name: "book",
        word: "book",
        share: 0.16,
        pattern: "{w} {w}",
    },
];

struct PredSpec {
    name: &'static str,
    domain: &'static str,
    range: &'static str,
    objects: (usize, usize),
    noun: &'static str,
    plural: &'static str,
    asks: &'static [&'static str],
}

const PREDICATES: [PredSpec; 10] = [
    PredSpec {
        name: "directed_by",
        domain: "film",
        range: "person",
        objects: (1, 2),
        noun: "director",
        plural: "directors",
        asks: &["who directed {e} ?", "who is the director of {e} ?"],
    },
    PredSpec {
        name: "cast_member",
        domain: "film",
        range: "person",
        objects: (2, 5),
        noun: "cast member",
        plural: "cast members",
        asks: &["who acted in {e} ?", "who starred in {e} ?"],
    },
    PredSpec {
        name: "born_in",
        domain: "person",
        range: "city",
        objects: (1, 1),
        noun: "birthplace",
        plural: "birthplaces",
        asks: &["where was {e} born ?", "what is the birthplace of {e} ?"],
    },
    PredSpec {
        name: "located_in",
        domain: "city",
        range: "country",
        objects: (1, 1),
        noun: "country",
        plural: "countries",
        asks: &["which country is {e} in ?", "where is {e} located ?"],
    },
    PredSpec {
        name: "founded_by",
        domain: "company",
        range: "person",
        objects: (1, 3),
        noun: "founder",
        plural: "founders",
        asks: &["who founded {e} ?", "who are the founders of {e} ?"],
    },
    PredSpec {
        name: "owned_by",
        domain: "record_label",
        range: "company",
        objects: (1, 1),
        noun: "owner",
        plural: "owners",
        asks: &["who owns {e} ?", "who is the owner of {e} ?"],
    },
    PredSpec {
        name: "signed_to",
        domain: "band",
        range: "record_label",
        objects: (1, 2),
        noun: "label",
        plural: "labels",
        asks: &["which label is {e} signed to ?", "what label signed {e} ?"],
    },
    PredSpec {
        name: "has_member",
        domain: "band",
        range: "person",
        objects: (2, 4),
        noun: "member",
        plural: "members",
        asks: &["who are the members of {e} ?", "who plays in {e} ?"],
    },
    PredSpec {
        name: "written_by",
        domain: "book",
        range: "person",
        objects: (1, 2),
        noun: "author",
        plural: "authors",
        asks: &["who wrote {e} ?", "who is the author of {e} ?"],
    },
    PredSpec {
        name: "headquartered_in",
        domain: "company",
        range: "city",
        objects: (1, 1),
        noun: "headquarters city",
        plural: "headquarters cities",
        asks: &["where is {e} headquartered ?", "which city is {e} based in ?"],
    },
];

/// Words used by templates; generated names avoid them.
const RESERVED: &[&str] = &[
    "who",
    "what",
    "which",
    "where",
    "is",
    "the",
    "of",
    "in",
    "was",
    "born",
    "are",
    "and",
    "did",
    "you",
    "mean",
    "no",
    "i",
    "meant",
    "how",
    "many",
    "does",
    "have",
    "has",
    "most",
    "more",
    "than",
    "it",
    "about",
    "yes",
    "to",
    "a",
    "directed",
    "director",
    "acted",
    "starred",
    "owns",
    "owner",
    "wrote",
    "author",
    "plays",
    "label",
    "signed",
    "founded",
    "based",
    "city",
    "records",
    "corp",
    "film",
    "book",
    "band",
    "person",
    "company",
    "country",
    "located",
    "members",
    "member",
    "nothing",
    "or",
    "cast",
    "birthplace",
    "founders",
    "founder",
    "labels",
    "authors",
    "directors",
    "owners",
    "countries",
    "headquartered",
    "headquarters",
    "cities",
    "deram",
    "polydor",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub entities: usize,
    /// Extra entities that copy the surface text of an entity of another
    /// type.
    pub ambiguous_pairs: usize,
    pub train_dialogs: usize,
    pub test_dialogs: usize,
    pub min_questions: usize,
    pub max_questions: usize,
    /// Fraction of subjects reserved for held-out dialogs.
    pub held_out: f64,
    /// Chance that a question's subject is an ambiguous entity.
    pub ambiguity_rate: f64,
    /// Question types to generate; empty means all.
    pub question_types: Vec<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            entities: 1000,
            ambiguous_pairs: 40,
            train_dialogs: 200,
            test_dialogs: 50,
            min_questions: 4,
            max_questions: 6,
            held_out: 0.3,
            ambiguity_rate: 0.1,
            question_types: Vec::new(),
        }
    }
}

pub struct Corpus {
    pub kb: KnowledgeBase,
    pub train: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "sh", "kl",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "m"];
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).expect("non-empty"));
        w.push_str(VOWELS.choose(rng).expect("non-empty"));
    }
    w.push_str(CODAS.choose(rng).expect("non-empty"));
    w
}

struct World {
    kb: KnowledgeBase,
    /// Subjects available per side, by type name.
    train_side: Vec<Vec<EntityId>>,
    test_side: Vec<Vec<EntityId>>,
    ambiguous: HashSet<EntityId>,
    deram: EntityId,
    polydor: EntityId,
}

fn type_index(name: &str) -> usize {
    TYPES.iter().position(|t| t.name == name).expect("known type")
}

fn build_world(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<World> {
    let reserved: HashSet<&str> = RESERVED.iter().copied().collect();
    let mut used_words: HashSet<String> = HashSet::new();
    let mut texts: HashSet<String> = HashSet::new();
    let mut b = KbBuilder::new();
    let mut by_type: Vec<Vec<(String, String)>> = vec![Vec::new(); TYPES.len()];
    let mut next_id = 1usize;
    let mut fresh_word = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if !reserved.contains(w.as_str()) && used_words.insert(w.clone()) {
            return w;
        }
    };
    for (ti, spec) in TYPES.iter().enumerate() {
        let n = ((cfg.entities as f64 * spec.share).round() as usize).max(3);
        for _ in 0..n {
            let text = loop {
                let mut t = spec.pattern.to_string();
                while let Some(pos) = t.find("{w}") {
                    let w = fresh_word(rng);
                    t.replace_range(pos..pos + 3, &w);
                }
                if texts.insert(t.clone()) {
                    break t;
                }
            };
            let id = format!("Q{next_id}");
            next_id += 1;
            b.add_entity(&id, &text, &[spec.name])?;
            by_type[ti].push((id, text));
        }
    }
    let label = type_index("record_label");
    let mut fixed = Vec::new();
    for text in ["deram records", "polydor records"] {
        let id = format!("Q{next_id}");
        next_id += 1;
        b.add_entity(&id, text, &["record_label"])?;
        by_type[label].push((id.clone(), text.to_string()));
        fixed.push(id);
    }
    let shared = ["person", "film", "book"].map(type_index);
    let mut ambiguous_ids = Vec::new();
    for _ in 0..cfg.ambiguous_pairs {
        let from = *shared.choose(rng).expect("non-empty");
        let to = loop {
            let t = *shared.choose(rng).expect("non-empty");
            if t != from {
                break t;
            }
        };
        let (src_id, text) = by_type[from].choose(rng).expect("non-empty").clone();
        let id = format!("Q{next_id}");
        next_id += 1;
        b.add_entity(&id, &text, &[TYPES[to].name])?;
        by_type[to].push((id.clone(), text));
        ambiguous_ids.push(src_id);
        ambiguous_ids.push(id);
    }
    for p in &PREDICATES {
        b.add_predicate(p.name);
        let dom = type_index(p.domain);
        let ran = type_index(p.range);
        for (subj, _) in by_type[dom].clone() {
            let k = rng.gen_range(p.objects.0..=p.objects.1);
            let objs: Vec<_> = by_type[ran].choose_multiple(rng, k).cloned().collect();
            for (obj, _) in objs {
                b.add_triple(&subj, p.name, &obj)?;
            }
        }
    }
    let kb = b.build();
    let id = |s: &str| kb.entity_id(s).expect("registered");
    let mut train_side = vec![Vec::new(); TYPES.len()];
    let mut test_side = vec![Vec::new(); TYPES.len()];
    for (ti, list) in by_type.iter().enumerate() {
        for (eid, _) in list {
            let e = id(eid);
            if rng.gen::<f64>() < cfg.held_out {
                test_side[ti].push(e);
            } else {
                train_side[ti].push(e);
            }
        }
        for side in [&mut train_side[ti], &mut test_side[ti]] {
            if side.is_empty() {
                side.push(id(&list[0].0));
            }
        }
    }
    Ok(World {
        train_side,
        test_side,
        ambiguous: ambiguous_ids.iter().map(|s| id(s)).collect(),
        deram: id(&fixed[0]),
        polydor: id(&fixed[1]),
        kb,
    })
}

/// Utterance under construction with its tags and mentions.
#[derive(Default)]
struct Utterance {
    tokens: Vec<String>,
    labels: Vec<String>,
    mentions: Vec<MentionRecord>,
}

enum Slot {
    Entity(EntityId),
    Text(String),
}

fn render(kb: &KnowledgeBase, template: &str, slots: &[(&str, Slot)]) -> Utterance {
    let mut u = Utterance::default();
    for word in template.split_whitespace() {
        let slot = slots.iter().find(|(k, _)| *k == word).map(|(_, s)| s);
        match slot {
            Some(Slot::Entity(e)) => u.push_entity(kb, *e),
            Some(Slot::Text(t)) => u.push_text(t),
            None => u.push_text(word),
        }
    }
    u
}

impl Utterance {
    fn push_text(&mut self, text: &str) {
        for t in tokenize(text) {
            self.tokens.push(t);
            self.labels.push("O".into());
        }
    }

    fn push_entity(&mut self, kb: &KnowledgeBase, e: EntityId) {
        let ty = kb.type_name(kb.types_of(e)[0]);
        let start = self.tokens.len();
        for (i, t) in tokenize(kb.entity_text(e)).into_iter().enumerate() {
            self.tokens.push(t);
            self.labels.push(format!("{}-{ty}", if i == 0 { "B" } else { "I" }));
        }
        self.mentions.push(MentionRecord {
            entity: kb.entity_name(e).to_string(),
            start,
            end: self.tokens.len(),
        });
    }

    fn into_turn(self, speaker: Speaker) -> Turn {
        Turn {
            speaker,
            utterance: self.tokens.join(" "),
            question_type: None,
            labels: Some(self.labels),
            mentions: self.mentions,
            answer: None,
            gold_lf: None,
        }
    }
}

/// What the previous question asked, for follow-ups.
struct Previous {
    predicate: usize,
    subject: EntityId,
    answer: Value,
    simple: bool,
}

struct Generator<'a> {
    w: &'a World,
    rng: ChaCha8Rng,
    allowed: Vec<&'static str>,
    held_out: bool,
    ambiguity_rate: f64,
}

const MAX_LISTED: usize = 4;

impl Generator<'_> {
    fn kb(&self) -> &KnowledgeBase {
        &self.w.kb
    }

    fn pid(&self, p: usize) -> PredicateId {
        self.kb().predicate_id(PREDICATES[p].name).expect("registered")
    }

    fn tid(&self, name: &str) -> TypeId {
        self.kb().type_id(name).expect("registered")
    }

    fn subject(&mut self, ty: &str) -> EntityId {
        let side = if self.held_out {
            &self.w.test_side
        } else {
            &self.w.train_side
        };
        let pool = &side[type_index(ty)];
        if self.rng.gen::<f64>() < self.ambiguity_rate {
            let amb: Vec<EntityId> = pool.iter().copied().filter(|e| self.w.ambiguous.contains(e)).collect();
            if let Some(&e) = amb.choose(&mut self.rng) {
                return e;
            }
        }
        *pool.choose(&mut self.rng).expect("non-empty side")
    }

    fn two_subjects(&mut self, ty: &str) -> (EntityId, EntityId) {
        let a = self.subject(ty);
        for _ in 0..20 {
            let b = self.subject(ty);
            if b != a && self.kb().entity_text(a) != self.kb().entity_text(b) {
                return (a, b);
            }
        }
        let side = if self.held_out {
            &self.w.test_side
        } else {
            &self.w.train_side
        };
        let b = side[type_index(ty)].iter().copied().find(|&e| e != a).unwrap_or(a);
        (a, b)
    }

    fn multi_valued(&mut self) -> usize {
        let many: Vec<usize> = (0..PREDICATES.len()).filter(|&i| PREDICATES[i].objects.1 > 1).collect();
        *many.choose(&mut self.rng).expect("non-empty")
    }

    fn system_answer(&self, v: &Value) -> Utterance {
        match v {
            Value::Set(s) => {
                let mut u = Utterance::default();
                for (i, &e) in s.iter().enumerate() {
                    if i > 0 {
                        u.push_text(",");
                    }
                    u.push_entity(self.kb(), e);
                }
                if s.is_empty() {
                    u.push_text("nothing");
                }
                u
            }
            Value::Bool(b) => render(self.kb(), if *b { "yes" } else { "no" }, &[]),
            Value::Num(n) => render(self.kb(), &n.to_string(), &[]),
        }
    }

    fn ask(&mut self, p: usize) -> &'static str {
        PREDICATES[p].asks.choose(&mut self.rng).expect("non-empty")
    }

    /// One question turn: utterance, form and type, or `None` when the
    /// drawn instance is unusable.
    fn question(&mut self, kind: &'static str, prev: Option<&Previous>) -> Option<(Utterance, Node, usize, EntityId)> {
        let kb = &self.w.kb;
        match kind {
            SIMPLE_DIRECT => {
                let p = self.rng.gen_range(0..PREDICATES.len());
                let e = self.subject(PREDICATES[p].domain);
                let find = Node::find(Node::set_of(e), self.pid(p));
                if self.rng.gen_bool(0.25) {
                    let range = PREDICATES[p].range;
                    let word = TYPES[type_index(range)].word;
                    let u = render(
                        kb,
                        &format!("which {word} is the {} of {{e}} ?", PREDICATES[p].noun),
                        &[("{e}", Slot::Entity(e))],
                    );
                    let node = Node::apply(Operator::Filter, vec![Node::ty(self.tid(range)), find]);
                    return Some((u, node, p, e));
                }
                let t = self.ask(p);
                Some((render(kb, t, &[("{e}", Slot::Entity(e))]), find, p, e))
            }
            SIMPLE_COREF => {
                let prev = prev?;
                let Value::Set(s) = &prev.answer else { return None };
                if s.len() != 1 {
                    return None;
                }
                let e = *s.iter().next().expect("one");
                let ty = kb.type_name(kb.types_of(e)[0]);
                let cands: Vec<usize> = (0..PREDICATES.len()).filter(|&i| PREDICATES[i].domain == ty).collect();
                let p = *cands.choose(&mut self.rng)?;
                let t = self.ask(p);
                let u = render(kb, t, &[("{e}", Slot::Text("it".into()))]);
                Some((u, Node::find(Node::set_of(e), self.pid(p)), p, e))
            }
            SIMPLE_ELLIPSIS => {
                let prev = prev?;
                if !prev.simple {
                    return None;
                }
                let p = prev.predicate;
                let ty = PREDICATES[p].domain;
                let mut e = self.subject(ty);
                if e == prev.subject {
                    e = self.subject(ty);
                }
                if e == prev.subject {
                    return None;
                }
                let u = render(kb, "and what about {e} ?", &[("{e}", Slot::Entity(e))]);
                Some((u, Node::find(Node::set_of(e), self.pid(p)), p, e))
            }
            QUANTITATIVE_COUNT => {
                let p = self.multi_valued();
                let e = self.subject(PREDICATES[p].domain);
                let u = render(
                    kb,
                    &format!("how many {} does {{e}} have ?", PREDICATES[p].plural),
                    &[("{e}", Slot::Entity(e))],
                );
                let node = Node::apply(Operator::Count, vec![Node::find(Node::set_of(e), self.pid(p))]);
                Some((u, node, p, e))
            }
            VERIFICATION => {
                let p = self.rng.gen_range(0..PREDICATES.len());
                let e = self.subject(PREDICATES[p].domain);
                let objs = kb.objects_of(e, self.pid(p)).ok()?.to_vec();
                let o = if self.rng.gen_bool(0.5) && !objs.is_empty() {
                    *objs.choose(&mut self.rng)?
                } else {
                    let pool = kb.entities_of_type(self.tid(PREDICATES[p].range)).ok()?;
                    *pool.choose(&mut self.rng)?
                };
                if kb.entity_text(o) == kb.entity_text(e) {
                    return None;
                }
                let u = render(
                    kb,
                    &format!("is {{o}} the {} of {{e}} ?", PREDICATES[p].noun),
                    &[("{o}", Slot::Entity(o)), ("{e}", Slot::Entity(e))],
                );
                let node = Node::apply(
                    Operator::In,
                    vec![Node::entity(o), Node::find(Node::set_of(e), self.pid(p))],
                );
                Some((u, node, p, e))
            }
            LOGICAL => {
                let p = self.rng.gen_range(0..PREDICATES.len());
                let (a, b) = self.two_subjects(PREDICATES[p].domain);
                let u = render(
                    kb,
                    &format!("what are the {} of {{a}} and {{b}} ?", PREDICATES[p].plural),
                    &[("{a}", Slot::Entity(a)), ("{b}", Slot::Entity(b))],
                );
                let node = Node::apply(
                    Operator::Union,
                    vec![
                        Node::find(Node::set_of(a), self.pid(p)),
                        Node::find(Node::set_of(b), self.pid(p)),
                    ],
                );
                Some((u, node, p, a))
            }
            COMPARATIVE | QUANTITATIVE | COMPARATIVE_COUNT => {
                let p = self.multi_valued();
                let (a, b) = self.two_subjects(PREDICATES[p].domain);
                let pid = self.pid(p);
                let (da, db) = (kb.degree(a, pid), kb.degree(b, pid));
                let pair = Node::apply(Operator::Union, vec![Node::set_of(a), Node::set_of(b)]);
                let slots = [("{a}", Slot::Entity(a)), ("{b}", Slot::Entity(b))];
                if kind == COMPARATIVE {
                    if da == db {
                        return None;
                    }
                    let u = render(
                        kb,
                        &format!("which of {{a}} and {{b}} has the most {} ?", PREDICATES[p].plural),
                        &slots,
                    );
                    let node = Node::apply(Operator::ArgMax, vec![pair, Node::predicate(pid)]);
                    return Some((u, node, p, a));
                }
                let k = self.rng.gen_range(1..=da.max(db).max(2) - 1) as u64;
                let larger = Node::apply(Operator::Larger, vec![pair, Node::predicate(pid), Node::number(k)]);
                if kind == QUANTITATIVE {
                    let u = render(
                        kb,
                        &format!("which of {{a}} and {{b}} has more than {k} {} ?", PREDICATES[p].plural),
                        &slots,
                    );
                    Some((u, larger, p, a))
                } else {
                    let u = render(
                        kb,
                        &format!(
                            "how many of {{a}} and {{b}} have more than {k} {} ?",
                            PREDICATES[p].plural
                        ),
                        &slots,
                    );
                    Some((u, Node::apply(Operator::Count, vec![larger]), p, a))
                }
            }
            _ => None,
        }
    }

    fn form(&self, node: Node) -> LogicalForm {
        LogicalForm::new(node).expect("templates build valid forms")
    }

    fn finish(&self, mut u: Turn, kind: &str, lf: &LogicalForm, v: &Value) -> Turn {
        u.question_type = Some(kind.to_string());
        u.answer = Some(answer_record(v, self.kb()));
        u.gold_lf = Some(lf.render(self.kb()));
        u
    }

    /// Clarification exchange: an ask about one entity, the system's
    /// check, and the user's correction naming another.
    fn clarification(&mut self, turns: &mut Vec<Turn>) -> Option<Previous> {
        let kb = &self.w.kb;
        let owned = PREDICATES.iter().position(|p| p.name == "owned_by").expect("owned_by");
        let (p, first, second) = if self.rng.gen_bool(0.3) {
            let (a, b) = if self.rng.gen_bool(0.5) {
                (self.w.polydor, self.w.deram)
            } else {
                (self.w.deram, self.w.polydor)
            };
            (owned, a, b)
        } else {
            let p = self.rng.gen_range(0..PREDICATES.len());
            let (a, b) = self.two_subjects(PREDICATES[p].domain);
            (p, a, b)
        };
        let t = self.ask(p);
        let ask = render(kb, t, &[("{e}", Slot::Entity(first))]);
        let check = render(kb, "did you mean {e} ?", &[("{e}", Slot::Entity(first))]);
        let fix = render(kb, "no , i meant {e}", &[("{e}", Slot::Entity(second))]);
        let lf = self.form(Node::find(Node::set_of(second), self.pid(p)));
        let v = execute(&lf, kb).ok()?.value;
        if matches!(&v, Value::Set(s) if s.is_empty() || s.len() > MAX_LISTED) {
            return None;
        }
        turns.push(ask.into_turn(Speaker::User));
        turns.push(check.into_turn(Speaker::System));
        turns.push(self.finish(fix.into_turn(Speaker::User), CLARIFICATION, &lf, &v));
        turns.push(self.system_answer(&v).into_turn(Speaker::System));
        Some(Previous {
            predicate: p,
            subject: second,
            answer: v,
            simple: false,
        })
    }

    fn dialog(&mut self, id: String, questions: usize) -> Dialog {
        let mut turns = Vec::new();
        let mut prev: Option<Previous> = None;
        let mut asked = 0;
        let mut attempts = 0;
        while asked < questions && attempts < 200 {
            attempts += 1;
            let kind = *self.allowed.choose(&mut self.rng).expect("non-empty");
            if kind == CLARIFICATION {
                if let Some(p) = self.clarification(&mut turns) {
                    prev = Some(p);
                    asked += 1;
                }
                continue;
            }
            let Some((u, node, p, subject)) = self.question(kind, prev.as_ref()) else {
                continue;
            };
            let lf = self.form(node);
            let Ok(ans) = execute(&lf, self.kb()) else { continue };
            let v = ans.value;
            if matches!(&v, Value::Set(s) if s.is_empty() || s.len() > MAX_LISTED) {
                continue;
            }
            let simple = matches!(kind, SIMPLE_DIRECT | SIMPLE_COREF | SIMPLE_ELLIPSIS);
            turns.push(self.finish(u.into_turn(Speaker::User), kind, &lf, &v));
            turns.push(self.system_answer(&v).into_turn(Speaker::System));
            prev = Some(Previous {
                predicate: p,
                subject,
                answer: v,
                simple,
            });
            asked += 1;
        }
        Dialog { id, turns }
    }
}

pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.min_questions == 0 || cfg.min_questions > cfg.max_questions {
        return Err(Error::Config("need 1 <= min_questions <= max_questions".into()));
    }
    let allowed: Vec<&'static str> = if cfg.question_types.is_empty() {
        QUESTION_TYPES.to_vec()
    } else {
        cfg.question_types
            .iter()
            .map(|t| {
                QUESTION_TYPES
                    .iter()
                    .copied()
                    .find(|q| q == t)
                    .ok_or_else(|| Error::Config(format!("unknown question type {t:?}")))
            })
            .collect::<Result<_>>()?
    };
    let only_followups = allowed.iter().all(|k| matches!(*k, SIMPLE_COREF | SIMPLE_ELLIPSIS));
    if only_followups {
        return Err(Error::Config("follow-up question types need an opening type".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = build_world(cfg, &mut rng)?;
    let mut dialogs = [Vec::new(), Vec::new()];
    for (side, count) in [(false, cfg.train_dialogs), (true, cfg.test_dialogs)] {
        let mut g = Generator {
            w: &world,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + side as u64)),
            allowed: allowed.clone(),
            held_out: side,
            ambiguity_rate: cfg.ambiguity_rate,
        };
        let prefix = if side { "test" } else { "train" };
        for i in 0..count {
            let n = g.rng.gen_range(cfg.min_questions..=cfg.max_questions);
            let d = g.dialog(format!("{prefix}-{i}"), n);
            dialogs[side as usize].push(d);
        }
    }
    let [train, test] = dialogs;
    Ok(Corpus {
        kb: world.kb,
        train,
        test,
    })
}

/// Surface texts shared by more than one entity.
pub fn ambiguous_texts(kb: &KnowledgeBase) -> BTreeSet<String> {
    let mut seen = HashSet::new();
    let mut dup = BTreeSet::new();
    for e in kb.entities() {
        let t = kb.entity_text(e).to_string();
        if !seen.insert(t.clone()) {
            dup.insert(t);
        }
    }
    dup
}

/// Answer record of a turn, if any; shorthand for tests and tools.
pub fn turn_answer(t: &Turn) -> Option<&AnswerRecord> {
    t.answer.as_ref()
}
