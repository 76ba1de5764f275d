//! In-memory knowledge base: interned triples plus the lookup indices used
//! by the executor, the linker and the program search.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "#{}"), self.0)
            }
        }
    };
}

id_type!(EntityId, "e");
id_type!(PredicateId, "p");
id_type!(TypeId, "t");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: EntityId,
    pub predicate: PredicateId,
    pub object: EntityId,
}

/// String id <-> dense integer id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct Interner {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    fn len(&self) -> usize {
        self.names.len()
    }
}

/// Accumulates catalog entries and triples by string id, then freezes them
/// into a [`KnowledgeBase`].
#[derive(Debug, Default)]
pub struct KbBuilder {
    entities: Interner,
    types: Interner,
    predicates: Interner,
    entity_text: Vec<String>,
    entity_types: Vec<Vec<TypeId>>,
    triples: Vec<Triple>,
}

impl KbBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an entity. Re-registering an id is an error.
    pub fn add_entity(&mut self, id: &str, text: &str, types: &[&str]) -> Result<EntityId> {
        if self.entities.get(id).is_some() {
            return Err(Error::Reference(format!("duplicate entity id {id}")));
        }
        let eid = EntityId(self.entities.intern(id));
        let mut tys: Vec<TypeId> = types.iter().map(|t| TypeId(self.types.intern(t))).collect();
        tys.sort();
        tys.dedup();
        self.entity_text.push(text.to_string());
        self.entity_types.push(tys);
        Ok(eid)
    }

    /// Adds a triple; both endpoints must already be in the catalog.
    pub fn add_triple(&mut self, subject: &str, predicate: &str, object: &str) -> Result<Triple> {
        let s = self
            .entities
            .get(subject)
            .ok_or_else(|| Error::Reference(format!("entity {subject}")))?;
        let o = self
            .entities
            .get(object)
            .ok_or_else(|| Error::Reference(format!("entity {object}")))?;
        let t = Triple {
            subject: EntityId(s),
            predicate: PredicateId(self.predicates.intern(predicate)),
            object: EntityId(o),
        };
        self.triples.push(t);
        Ok(t)
    }

    /// Declares a predicate without attaching triples to it.
    pub fn add_predicate(&mut self, predicate: &str) -> PredicateId {
        PredicateId(self.predicates.intern(predicate))
    }

    pub fn build(self) -> KnowledgeBase {
        KnowledgeBase::from_parts(
            self.entities,
            self.predicates,
            self.types,
            self.entity_text,
            self.entity_types,
            self.triples,
        )
    }
}

/// Immutable knowledge base. Safe to share across threads once built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeBase {
    entities: Interner,
    predicates: Interner,
    types: Interner,
    entity_text: Vec<String>,
    entity_types: Vec<Vec<TypeId>>,
    triples: Vec<Triple>,
    forward: HashMap<(EntityId, PredicateId), Vec<EntityId>>,
    backward: HashMap<(PredicateId, EntityId), Vec<EntityId>>,
    by_type: Vec<Vec<EntityId>>,
}

#[derive(Debug, PartialEq, Eq)]
struct Indices {
    forward: HashMap<(EntityId, PredicateId), Vec<EntityId>>,
    backward: HashMap<(PredicateId, EntityId), Vec<EntityId>>,
    by_type: Vec<Vec<EntityId>>,
}

fn build_indices(triples: &[Triple], entity_types: &[Vec<TypeId>], num_types: usize) -> Indices {
    let mut forward: HashMap<_, Vec<EntityId>> = HashMap::new();
    let mut backward: HashMap<_, Vec<EntityId>> = HashMap::new();
    // triples are sorted, so forward lists come out sorted
    for t in triples {
        forward.entry((t.subject, t.predicate)).or_default().push(t.object);
        backward.entry((t.predicate, t.object)).or_default().push(t.subject);
    }
    for subjects in backward.values_mut() {
        subjects.sort();
    }
    let mut by_type = vec![Vec::new(); num_types];
    for (e, tys) in entity_types.iter().enumerate() {
        for t in tys {
            by_type[t.index()].push(EntityId(e as u32));
        }
    }
    Indices {
        forward,
        backward,
        by_type,
    }
}

impl KnowledgeBase {
    fn from_parts(
        entities: Interner,
        predicates: Interner,
        types: Interner,
        entity_text: Vec<String>,
        entity_types: Vec<Vec<TypeId>>,
        mut triples: Vec<Triple>,
    ) -> Self {
        triples.sort();
        triples.dedup();
        let idx = build_indices(&triples, &entity_types, types.len());
        KnowledgeBase {
            entities,
            predicates,
            types,
            entity_text,
            entity_types,
            triples,
            forward: idx.forward,
            backward: idx.backward,
            by_type: idx.by_type,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// N^(p)
    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    /// N^(t)
    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    /// Size of the joint IOB x type label space: `2 * N^(t) + 1`.
    pub fn label_space_size(&self) -> usize {
        2 * self.num_types() + 1
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn predicate_id(&self, name: &str) -> Option<PredicateId> {
        self.predicates.get(name).map(PredicateId)
    }

    pub fn type_id(&self, name: &str) -> Option<TypeId> {
        self.types.get(name).map(TypeId)
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entities.names[e.index()]
    }

    pub fn predicate_name(&self, p: PredicateId) -> &str {
        &self.predicates.names[p.index()]
    }

    pub fn type_name(&self, t: TypeId) -> &str {
        &self.types.names[t.index()]
    }

    /// Surface text of an entity as given in the catalog.
    pub fn entity_text(&self, e: EntityId) -> &str {
        &self.entity_text[e.index()]
    }

    pub fn types_of(&self, e: EntityId) -> &[TypeId] {
        &self.entity_types[e.index()]
    }

    pub fn has_type(&self, e: EntityId, t: TypeId) -> bool {
        self.entity_types[e.index()].binary_search(&t).is_ok()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.num_entities() as u32).map(EntityId)
    }

    pub fn predicates(&self) -> impl Iterator<Item = PredicateId> + '_ {
        (0..self.num_predicates() as u32).map(PredicateId)
    }

    pub fn types(&self) -> impl Iterator<Item = TypeId> + '_ {
        (0..self.num_types() as u32).map(TypeId)
    }

    fn check_entity(&self, e: EntityId) -> Result<()> {
        if e.index() < self.num_entities() {
            Ok(())
        } else {
            Err(Error::Reference(format!("entity {e}")))
        }
    }

    fn check_predicate(&self, p: PredicateId) -> Result<()> {
        if p.index() < self.num_predicates() {
            Ok(())
        } else {
            Err(Error::Reference(format!("predicate {p}")))
        }
    }

    /// `{o : (e, p, o) in triples}`, sorted ascending.
    pub fn objects_of(&self, e: EntityId, p: PredicateId) -> Result<&[EntityId]> {
        self.check_entity(e)?;
        self.check_predicate(p)?;
        Ok(self.forward.get(&(e, p)).map_or(&[], |v| v.as_slice()))
    }

    /// `{s : (s, p, o) in triples}`, sorted ascending.
    pub fn subjects_of(&self, p: PredicateId, o: EntityId) -> Result<&[EntityId]> {
        self.check_entity(o)?;
        self.check_predicate(p)?;
        Ok(self.backward.get(&(p, o)).map_or(&[], |v| v.as_slice()))
    }

    /// Number of distinct `p`-objects of `e`; 0 when there are none.
    pub fn degree(&self, e: EntityId, p: PredicateId) -> usize {
        self.forward.get(&(e, p)).map_or(0, Vec::len)
    }

    /// All entities carrying type `tp` among their (possibly several) types.
    pub fn entities_of_type(&self, tp: TypeId) -> Result<&[EntityId]> {
        self.by_type
            .get(tp.index())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Reference(format!("type {tp}")))
    }

    /// Rebuilds every index from the triple set and compares.
    pub fn indices_consistent(&self) -> bool {
        let fresh = build_indices(&self.triples, &self.entity_types, self.num_types());
        fresh.forward == self.forward && fresh.backward == self.backward && fresh.by_type == self.by_type
    }

    pub fn write_triples<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.triples {
            writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_name(t.subject),
                self.predicate_name(t.predicate),
                self.entity_name(t.object)
            )?;
        }
        Ok(())
    }

    pub fn write_catalog<W: Write>(&self, mut out: W) -> Result<()> {
        for e in self.entities() {
            let types: Vec<&str> = self.types_of(e).iter().map(|&t| self.type_name(t)).collect();
            writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_name(e),
                self.entity_text(e),
                types.join(",")
            )?;
        }
        Ok(())
    }
}

/// Loads a knowledge base from a triples stream and a catalog stream.
///
/// Catalog lines are `entity_id<TAB>surface text<TAB>type,type,...`; triple
/// lines are `subject<TAB>predicate<TAB>object`. Blank lines are skipped.
/// Triples naming an entity absent from the catalog are rejected.
pub fn load_kb<T: BufRead, C: BufRead>(triples: T, catalog: C) -> Result<KnowledgeBase> {
    let mut builder = KbBuilder::new();
    for (i, line) in catalog.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("catalog line needs 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let types: Vec<&str> = fields[2].split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
        builder
            .add_entity(fields[0].trim(), fields[1].trim(), &types)
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
    }
    for (i, line) in triples.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("triple line needs 3 tab-separated fields, got {}", fields.len()),
            });
        }
        builder
            .add_triple(fields[0].trim(), fields[1].trim(), fields[2].trim())
            .map_err(|e| Error::Reference(format!("line {}: {e}", i + 1)))?;
    }
    Ok(builder.build())
}

pub fn load_kb_files(triples: &Path, catalog: &Path) -> Result<KnowledgeBase> {
    load_kb(
        BufReader::new(File::open(triples)?),
        BufReader::new(File::open(catalog)?),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> KnowledgeBase {
        let catalog = "a\tAlpha\tT1\nb\tBeta\tT1,T2\nx\tEx\tT2\ny\tWhy\tT2\nz\tZed\t\n";
        let triples = "a\tp\tx\na\tp\ty\nb\tq\tz\n";
        load_kb(triples.as_bytes(), catalog.as_bytes()).unwrap()
    }

    #[test]
    fn empty_kb() {
        let kb = load_kb("".as_bytes(), "".as_bytes()).unwrap();
        assert_eq!(kb.num_predicates(), 0);
        assert_eq!(kb.num_types(), 0);
        assert_eq!(kb.triples().len(), 0);
        assert_eq!(kb.label_space_size(), 1);
    }

    #[test]
    fn counts_predicates() {
        let catalog = "a\tA\tT\nb\tB\tT\nc\tC\tT\n";
        let triples = "a\tp\tb\nb\tp\tc\nc\tq\ta\n";
        let kb = load_kb(triples.as_bytes(), catalog.as_bytes()).unwrap();
        assert_eq!(kb.num_predicates(), 2);
        assert_eq!(kb.triples().len(), 3);
    }

    #[test]
    fn duplicate_triples_are_collapsed() {
        let catalog = "a\tA\tT\nb\tB\tT\n";
        let lines = ["a\tp\tb", "a\tp\tb", "b\tp\ta", "a\tp\tb", "b\tp\ta"];
        let kb = load_kb(lines.join("\n").as_bytes(), catalog.as_bytes()).unwrap();
        let naive: BTreeSet<&str> = lines.iter().copied().collect();
        assert_eq!(kb.triples().len(), naive.len());
    }

    #[test]
    fn objects_of_matches_scan() {
        let kb = small();
        let a = kb.entity_id("a").unwrap();
        let b = kb.entity_id("b").unwrap();
        let p = kb.predicate_id("p").unwrap();
        let q = kb.predicate_id("q").unwrap();
        let scan: Vec<EntityId> = kb
            .triples()
            .iter()
            .filter(|t| t.subject == a && t.predicate == p)
            .map(|t| t.object)
            .collect();
        assert_eq!(kb.objects_of(a, p).unwrap(), scan.as_slice());
        assert_eq!(scan.len(), 2);
        assert!(kb.objects_of(b, p).unwrap().is_empty());
        assert!(kb.objects_of(a, q).unwrap().is_empty());
        assert!(kb.objects_of(EntityId(99), p).is_err());
    }

    #[test]
    fn multi_typed_entities_listed_under_each_type() {
        let kb = small();
        let t1 = kb.type_id("T1").unwrap();
        let t2 = kb.type_id("T2").unwrap();
        let b = kb.entity_id("b").unwrap();
        assert!(kb.entities_of_type(t1).unwrap().contains(&b));
        assert!(kb.entities_of_type(t2).unwrap().contains(&b));
        assert_eq!(kb.entities_of_type(t1).unwrap().len(), 2);
        assert!(kb.entities_of_type(TypeId(7)).is_err());
    }

    #[test]
    fn unused_type_has_no_entities() {
        let mut b = KbBuilder::new();
        b.add_entity("a", "A", &["T1"]).unwrap();
        let kb = b.build();
        assert!(kb.type_id("T2").is_none());
        let t1 = kb.type_id("T1").unwrap();
        assert_eq!(kb.entities_of_type(t1).unwrap().len(), 1);
        let mut b = KbBuilder::new();
        b.add_entity("a", "A", &["T1"]).unwrap();
        b.add_entity("b", "B", &["T2"]).unwrap();
        let kb = b.build();
        assert!(kb.entities_of_type(kb.type_id("T2").unwrap()).unwrap() == [kb.entity_id("b").unwrap()]);
    }

    #[test]
    fn dangling_reference_rejected() {
        let err = load_kb("a\tp\tnope\n".as_bytes(), "a\tA\tT\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Reference(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = load_kb("".as_bytes(), "a\tA\tT\nbroken line\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn write_then_load_is_identity() {
        let kb = small();
        let mut t = Vec::new();
        let mut c = Vec::new();
        kb.write_triples(&mut t).unwrap();
        kb.write_catalog(&mut c).unwrap();
        let again = load_kb(t.as_slice(), c.as_slice()).unwrap();
        assert_eq!(kb, again);
        assert!(again.indices_consistent());
    }
}
