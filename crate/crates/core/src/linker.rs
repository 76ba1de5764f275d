//! Type-aware entity detection output handling: IOB x type labels, mention
//! decoding, the substring inverted index, candidate linking and pointer
//! substitution.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grammar::{EntityRef, Instantiation, LogicalForm, NumberRef};
use crate::kb::{EntityId, KnowledgeBase, TypeId};
use crate::text::{normalize, parse_number, tokenize};

/// One element of the joint label space `{O} + {B, I} x types`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypeAwareLabel {
    Outside,
    Begin(TypeId),
    Inside(TypeId),
}

/// `2 * num_types + 1`
pub fn label_space_size(num_types: usize) -> usize {
    2 * num_types + 1
}

impl TypeAwareLabel {
    /// `O` is 0, `B-t` is `1 + 2t`, `I-t` is `2 + 2t`.
    pub fn index(self) -> usize {
        match self {
            TypeAwareLabel::Outside => 0,
            TypeAwareLabel::Begin(t) => 1 + 2 * t.index(),
            TypeAwareLabel::Inside(t) => 2 + 2 * t.index(),
        }
    }

    pub fn from_index(i: usize) -> TypeAwareLabel {
        if i == 0 {
            return TypeAwareLabel::Outside;
        }
        let t = TypeId(((i - 1) / 2) as u32);
        if i % 2 == 1 {
            TypeAwareLabel::Begin(t)
        } else {
            TypeAwareLabel::Inside(t)
        }
    }

    pub fn type_id(self) -> Option<TypeId> {
        match self {
            TypeAwareLabel::Outside => None,
            TypeAwareLabel::Begin(t) | TypeAwareLabel::Inside(t) => Some(t),
        }
    }

    /// Parses `O`, `B-<type>` or `I-<type>` with catalog type ids.
    pub fn parse(s: &str, kb: &KnowledgeBase) -> Result<TypeAwareLabel> {
        if s == "O" {
            return Ok(TypeAwareLabel::Outside);
        }
        let (tag, ty) = s
            .split_once('-')
            .ok_or_else(|| Error::Input(format!("bad label {s:?}")))?;
        let t = kb
            .type_id(ty)
            .ok_or_else(|| Error::Reference(format!("type {ty} in label {s:?}")))?;
        match tag {
            "B" => Ok(TypeAwareLabel::Begin(t)),
            "I" => Ok(TypeAwareLabel::Inside(t)),
            _ => Err(Error::Input(format!("bad label {s:?}"))),
        }
    }

    pub fn render(self, kb: &KnowledgeBase) -> String {
        match self {
            TypeAwareLabel::Outside => "O".to_string(),
            TypeAwareLabel::Begin(t) => format!("B-{}", kb.type_name(t)),
            TypeAwareLabel::Inside(t) => format!("I-{}", kb.type_name(t)),
        }
    }
}

impl fmt::Display for TypeAwareLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeAwareLabel::Outside => f.write_str("O"),
            TypeAwareLabel::Begin(t) => write!(f, "B-{t}"),
            TypeAwareLabel::Inside(t) => write!(f, "I-{t}"),
        }
    }
}

/// A detected entity span `[start, end)` with its predicted type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub text: String,
    #[serde(skip)]
    pub ty: TypeId,
}

impl Mention {
    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }

    fn distance(&self, pos: usize) -> usize {
        if pos < self.start {
            self.start - pos
        } else if pos >= self.end {
            pos + 1 - self.end
        } else {
            0
        }
    }
}

/// Turns per-token labels into mentions. An `I` without an open run starts a
/// new mention; inside a run, the `B` label's type wins.
pub fn decode_mentions(labels: &[TypeAwareLabel], tokens: &[String]) -> Vec<Mention> {
    let mut out: Vec<Mention> = Vec::new();
    let mut open: Option<(usize, TypeId)> = None;
    let close = |open: &mut Option<(usize, TypeId)>, end: usize, out: &mut Vec<Mention>| {
        if let Some((start, ty)) = open.take() {
            let text = tokens.get(start..end).map(|t| t.join(" ")).unwrap_or_default();
            out.push(Mention { start, end, text, ty });
        }
    };
    for (i, label) in labels.iter().enumerate() {
        match label {
            TypeAwareLabel::Outside => close(&mut open, i, &mut out),
            TypeAwareLabel::Begin(t) => {
                close(&mut open, i, &mut out);
                open = Some((i, *t));
            }
            TypeAwareLabel::Inside(t) => {
                if open.is_none() {
                    open = Some((i, *t));
                }
            }
        }
    }
    close(&mut open, labels.len(), &mut out);
    out
}

/// Token-level Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Map from normalized substring to the entities it best describes, scored
/// by negative token-level edit distance to the full entity text.
#[derive(Clone, Debug, Default)]
pub struct InvertedIndex {
    map: HashMap<String, Vec<(EntityId, i64)>>,
    threshold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndexStats {
    pub keys: usize,
    pub entries: usize,
    /// Keys mapping to more than one entity.
    pub ambiguous_keys: usize,
    pub max_candidates: usize,
    pub mean_candidates: f64,
}

impl InvertedIndex {
    /// Indexes every contiguous token substring of each entity text whose
    /// length is at least `len - threshold`. Per substring only the entities
    /// reaching its best score are kept.
    pub fn build(kb: &KnowledgeBase, threshold: usize) -> Self {
        let mut map: HashMap<String, Vec<(EntityId, i64)>> = HashMap::new();
        for e in kb.entities() {
            let toks = tokenize(kb.entity_text(e));
            let n = toks.len();
            if n == 0 {
                continue;
            }
            let min_len = n.saturating_sub(threshold).max(1);
            for len in min_len..=n {
                for start in 0..=n - len {
                    let sub = &toks[start..start + len];
                    let score = -(levenshtein(&toks, sub) as i64);
                    let entry = map.entry(sub.join(" ")).or_default();
                    match entry.iter_mut().find(|(id, _)| *id == e) {
                        Some(slot) => slot.1 = slot.1.max(score),
                        None => entry.push((e, score)),
                    }
                }
            }
        }
        for cands in map.values_mut() {
            let best = cands.iter().map(|c| c.1).max().unwrap_or(0);
            cands.retain(|c| c.1 == best);
            cands.sort();
        }
        InvertedIndex { map, threshold }
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Candidates for a surface string (normalized before lookup).
    pub fn lookup(&self, text: &str) -> &[(EntityId, i64)] {
        self.map.get(&normalize(text)).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn stats(&self) -> IndexStats {
        let entries: usize = self.map.values().map(Vec::len).sum();
        IndexStats {
            keys: self.map.len(),
            entries,
            ambiguous_keys: self.map.values().filter(|v| v.len() > 1).count(),
            max_candidates: self.map.values().map(Vec::len).max().unwrap_or(0),
            mean_candidates: if self.map.is_empty() {
                0.0
            } else {
                entries as f64 / self.map.len() as f64
            },
        }
    }
}

/// Candidates for `mention` ordered by descending score then ascending id,
/// restricted to entities of the mention's type when `type_filter` is set.
pub fn link(mention: &Mention, index: &InvertedIndex, kb: &KnowledgeBase, type_filter: bool) -> Result<Vec<EntityId>> {
    let mut cands: Vec<(EntityId, i64)> = index
        .lookup(&mention.text)
        .iter()
        .copied()
        .filter(|(e, _)| !type_filter || kb.has_type(*e, mention.ty))
        .collect();
    if cands.is_empty() {
        return Err(Error::LinkFailure(mention.text.clone()));
    }
    cands.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(cands.into_iter().map(|c| c.0).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkedMention {
    pub mention: Mention,
    /// Selected entity, if any candidate survived.
    pub entity: Option<EntityId>,
    pub candidates: Vec<EntityId>,
    /// The type filter removed every candidate and was dropped.
    pub fell_back: bool,
}

/// Links mentions, dropping the type filter for a mention whose filtered
/// candidate list is empty.
pub fn link_mentions(
    mentions: &[Mention],
    index: &InvertedIndex,
    kb: &KnowledgeBase,
    type_filter: bool,
) -> Vec<LinkedMention> {
    mentions
        .iter()
        .map(|m| {
            let (candidates, fell_back) = match link(m, index, kb, type_filter) {
                Ok(c) => (c, false),
                Err(_) if type_filter => (link(m, index, kb, false).unwrap_or_default(), true),
                Err(_) => (Vec::new(), false),
            };
            LinkedMention {
                mention: m.clone(),
                entity: candidates.first().copied(),
                candidates,
                fell_back,
            }
        })
        .collect()
}

/// Entity selected for a pointed position: the linked mention containing
/// the position, or else the nearest linked mention.
pub fn resolve_entity_pointer(pos: usize, links: &[LinkedMention]) -> Option<EntityId> {
    if let Some(l) = links.iter().find(|l| l.mention.contains(pos)) {
        return l.entity;
    }
    links
        .iter()
        .filter(|l| l.entity.is_some())
        .min_by_key(|l| (l.mention.distance(pos), l.mention.start))
        .and_then(|l| l.entity)
}

/// Replaces entity pointers by linked entities and number pointers by the
/// integers at the pointed tokens. `tokens` excludes the context token.
pub fn substitute_pointers(lf: &LogicalForm, tokens: &[String], links: &[LinkedMention]) -> Result<LogicalForm> {
    lf.map_leaves(|inst| match *inst {
        Instantiation::Entity(EntityRef::Pointer(pos)) => {
            if pos >= tokens.len() {
                return Err(Error::Substitution(format!(
                    "entity pointer @{pos} outside question of length {}",
                    tokens.len()
                )));
            }
            resolve_entity_pointer(pos, links)
                .map(|e| Instantiation::Entity(EntityRef::Id(e)))
                .ok_or_else(|| Error::Substitution(format!("no linked mention for pointer @{pos}")))
        }
        Instantiation::Number(NumberRef::Pointer(pos)) => {
            let tok = tokens
                .get(pos)
                .ok_or_else(|| Error::Substitution(format!("number pointer #{pos} outside question")))?;
            parse_number(tok)
                .map(|n| Instantiation::Number(NumberRef::Literal(n)))
                .ok_or_else(|| Error::Substitution(format!("token {tok:?} is not a number")))
        }
        other => Ok(other),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::KbBuilder;

    fn strings(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn kb() -> KnowledgeBase {
        let mut b = KbBuilder::new();
        b.add_entity("Q1", "Bill Woods", &["person"]).unwrap();
        b.add_entity("Q2", "Bill Woods", &["film"]).unwrap();
        b.add_entity("Q3", "Deram Records", &["label"]).unwrap();
        b.add_entity("Q4", "Polydor Records", &["label"]).unwrap();
        b.add_entity("Q5", "Owner Corp", &["company"]).unwrap();
        b.add_triple("Q3", "P127", "Q5").unwrap();
        b.build()
    }

    #[test]
    fn label_indices() {
        let t = TypeId(2);
        assert_eq!(TypeAwareLabel::Outside.index(), 0);
        assert_eq!(TypeAwareLabel::Begin(t).index(), 5);
        assert_eq!(TypeAwareLabel::Inside(t).index(), 6);
        for i in 0..label_space_size(3) {
            assert_eq!(TypeAwareLabel::from_index(i).index(), i);
        }
        assert_eq!(label_space_size(3), 7);
    }

    #[test]
    fn mentions_from_labels() {
        let t1 = TypeId(0);
        let t2 = TypeId(1);
        use TypeAwareLabel::*;
        let toks = strings("bill woods x");
        let m = decode_mentions(&[Begin(t1), Inside(t1), Outside], &toks);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].start, m[0].end, m[0].ty), (0, 2, t1));
        assert_eq!(m[0].text, "bill woods");
        assert!(decode_mentions(&[Outside; 3], &toks).is_empty());

        // orphan I opens a mention
        let m = decode_mentions(&[Inside(t1), Outside, Begin(t2)], &toks);
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].start, m[0].end, m[0].ty), (0, 1, t1));
        assert_eq!((m[1].start, m[1].end, m[1].ty), (2, 3, t2));

        // type conflict inside a run: B's type wins
        let m = decode_mentions(&[Begin(t2), Inside(t1), Outside], &toks);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].ty, t2);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein(&[1, 2, 3], &[2, 3]), 1);
        assert_eq!(levenshtein(&[1, 2, 3], &[4]), 3);
        assert_eq!(levenshtein::<u8>(&[], &[]), 0);
    }

    #[test]
    fn zero_threshold_indexes_full_text_only() {
        let mut b = KbBuilder::new();
        b.add_entity("Q1", "Deram Records", &["label"]).unwrap();
        let kb = b.build();
        let idx = InvertedIndex::build(&kb, 0);
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.lookup("deram records"), &[(EntityId(0), 0)]);
    }

    #[test]
    fn one_deletion_substrings() {
        let mut b = KbBuilder::new();
        b.add_entity("Q1", "a b c", &["t"]).unwrap();
        let kb = b.build();
        let idx = InvertedIndex::build(&kb, 1);
        let mut keys: Vec<&str> = idx.keys().collect();
        keys.sort();
        assert_eq!(keys, ["a b", "a b c", "b c"]);
        assert_eq!(idx.lookup("a b c")[0].1, 0);
        assert_eq!(idx.lookup("a b")[0].1, -1);
        assert_eq!(idx.lookup("b c")[0].1, -1);
    }

    #[test]
    fn shared_text_maps_to_both_entities() {
        let kb = kb();
        let idx = InvertedIndex::build(&kb, 3);
        let c = idx.lookup("Bill Woods");
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].1, c[1].1);
        // "bill woods", "bill", "woods" and "records"
        assert_eq!(idx.stats().ambiguous_keys, 4);
    }

    #[test]
    fn type_filter_disambiguates() {
        let kb = kb();
        let idx = InvertedIndex::build(&kb, 3);
        let person = kb.type_id("person").unwrap();
        let m = Mention {
            start: 0,
            end: 2,
            text: "bill woods".into(),
            ty: person,
        };
        assert_eq!(link(&m, &idx, &kb, true).unwrap(), vec![kb.entity_id("Q1").unwrap()]);
        assert_eq!(link(&m, &idx, &kb, false).unwrap().len(), 2);
    }

    #[test]
    fn exact_match_outranks_truncation() {
        let mut b = KbBuilder::new();
        b.add_entity("Q1", "Deram", &["label"]).unwrap();
        b.add_entity("Q2", "Deram Records", &["label"]).unwrap();
        let kb = b.build();
        let idx = InvertedIndex::build(&kb, 3);
        // "deram" is Q1's full text (score 0) but only a truncation of Q2
        assert_eq!(idx.lookup("deram"), &[(EntityId(0), 0)]);
    }

    #[test]
    fn failed_type_filter_falls_back() {
        let kb = kb();
        let idx = InvertedIndex::build(&kb, 3);
        let company = kb.type_id("company").unwrap();
        let m = Mention {
            start: 0,
            end: 2,
            text: "deram records".into(),
            ty: company,
        };
        assert!(matches!(link(&m, &idx, &kb, true), Err(Error::LinkFailure(_))));
        let linked = link_mentions(&[m], &idx, &kb, true);
        assert!(linked[0].fell_back);
        assert_eq!(linked[0].entity, kb.entity_id("Q3"));
    }

    fn deram_links(kb: &KnowledgeBase, toks: &[String]) -> Vec<LinkedMention> {
        let idx = InvertedIndex::build(kb, 3);
        let label = kb.type_id("label").unwrap();
        let labels: Vec<TypeAwareLabel> = toks
            .iter()
            .enumerate()
            .map(|(i, _)| match i {
                5 | 12 => TypeAwareLabel::Begin(label),
                6 | 13 => TypeAwareLabel::Inside(label),
                _ => TypeAwareLabel::Outside,
            })
            .collect();
        link_mentions(&decode_mentions(&labels, toks), &idx, kb, true)
    }

    #[test]
    fn pointer_substitution() {
        let kb = kb();
        let toks = strings("did you mean that one polydor records ? no , i meant deram records");
        let links = deram_links(&kb, &toks);
        let lf = LogicalForm::parse("find(set(@12), P127)", &kb).unwrap();
        let got = substitute_pointers(&lf, &toks, &links).unwrap();
        assert_eq!(got.render(&kb), "find(set(Q3), P127)");
        // one token into the mention still resolves
        let lf = LogicalForm::parse("find(set(@13), P127)", &kb).unwrap();
        assert_eq!(
            substitute_pointers(&lf, &toks, &links).unwrap().render(&kb),
            "find(set(Q3), P127)"
        );
        let lf = LogicalForm::parse("find(set(@5), P127)", &kb).unwrap();
        assert_eq!(
            substitute_pointers(&lf, &toks, &links).unwrap().render(&kb),
            "find(set(Q4), P127)"
        );
        // off by one before the mention: nearest mention
        let lf = LogicalForm::parse("find(set(@11), P127)", &kb).unwrap();
        assert_eq!(
            substitute_pointers(&lf, &toks, &links).unwrap().render(&kb),
            "find(set(Q3), P127)"
        );
    }

    #[test]
    fn number_pointer_substitution() {
        let kb = kb();
        let toks = strings("more than 3 owners");
        let lf = LogicalForm::parse("larger(set(Q3), P127, #2)", &kb).unwrap();
        let got = substitute_pointers(&lf, &toks, &[]).unwrap();
        assert_eq!(got.render(&kb), "larger(set(Q3), P127, 3)");
        let lf = LogicalForm::parse("larger(set(Q3), P127, #1)", &kb).unwrap();
        assert!(matches!(
            substitute_pointers(&lf, &toks, &[]),
            Err(Error::Substitution(_))
        ));
        let lf = LogicalForm::parse("find(set(@0), P127)", &kb).unwrap();
        assert!(matches!(
            substitute_pointers(&lf, &toks, &[]),
            Err(Error::Substitution(_))
        ));
    }
}
