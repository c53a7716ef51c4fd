//! Static knowledge graph: loading, relation filtering, lookups and lexical
//! grounding of text mentions.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Relations discarded before sampling unless configured otherwise.
pub const DEFAULT_DISCARD: [&str; 7] = [
    "relatedto",
    "synonym",
    "antonym",
    "derivedfrom",
    "formof",
    "etymologicallyderivedfrom",
    "etymologicallyrelatedto",
];

/// Prefix that marks the inverse direction of a relation.
pub const INVERSE_PREFIX: &str = "_";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub id: RelationId,
    /// Surface label as first seen in the source, `_`-prefixed for inverses.
    pub label: String,
    /// Lowercase words, e.g. `["distinct", "from"]`. Inverses share the
    /// words of their partner.
    pub words: Vec<String>,
    pub is_inverse: bool,
    pub inverse_of: RelationId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    /// Space-joined lowercase words.
    pub phrase: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Split a relation name into lowercase words: camel case, underscores,
/// hyphens and spaces all separate words.
pub fn relation_words(name: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for ch in name.chars() {
        if ch == '_' || ch == '-' || ch.is_whitespace() || ch == '/' {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if ch.is_uppercase() && prev_lower && !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
        prev_lower = ch.is_lowercase() || ch.is_ascii_digit();
        cur.extend(ch.to_lowercase());
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Canonical comparison key of a relation name: its words concatenated.
pub fn relation_key(name: &str) -> String {
    relation_words(name).concat()
}

/// Lowercase entity words; underscores and whitespace separate words.
pub fn entity_words(name: &str) -> Vec<String> {
    name.split(|c: char| c == '_' || c.is_whitespace()).filter(|w| !w.is_empty()).map(|w| w.to_lowercase()).collect()
}

/// Names of relations removed at load time, compared by [`relation_key`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscardSet(BTreeSet<String>);

impl Default for DiscardSet {
    fn default() -> Self {
        DiscardSet(DEFAULT_DISCARD.iter().map(|s| s.to_string()).collect())
    }
}

impl DiscardSet {
    pub fn none() -> Self {
        DiscardSet(BTreeSet::new())
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        DiscardSet(names.into_iter().map(|n| relation_key(n.as_ref())).filter(|k| !k.is_empty()).collect())
    }

    /// One relation name per line; blank lines and `#` comments ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_names(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(&relation_key(name))
    }
}

/// Optional surface-form table used during grounding (e.g. plural to
/// singular).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LemmaTable(HashMap<String, String>);

impl LemmaTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, phrase: &str) {
        self.0.insert(entity_words(surface).join(" "), entity_words(phrase).join(" "));
    }

    /// TSV `surface<TAB>entity_phrase`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut t = LemmaTable::new();
        let reader = BufReader::new(File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected 2 tab-separated fields, got {}", fields.len()),
                });
            }
            t.insert(fields[0], fields[1]);
        }
        Ok(t)
    }

    pub fn get(&self, surface: &str) -> Option<&str> {
        self.0.get(surface).map(String::as_str)
    }
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<Relation>,
    relation_index: HashMap<String, RelationId>,
    adjacency: Vec<Vec<(RelationId, EntityId)>>,
    neighbor_nodes: Vec<Vec<EntityId>>,
    membership: HashSet<Triplet>,
    forward: Vec<Triplet>,
    max_entity_words: usize,
}

impl KnowledgeGraph {
    /// Load a `head<TAB>relation<TAB>tail` file.
    pub fn load_tsv(path: &Path, discard: &DiscardSet) -> Result<Self> {
        let f = File::open(path)?;
        Self::load(BufReader::new(f), discard)
    }

    pub fn load<R: BufRead>(reader: R, discard: &DiscardSet) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected 3 tab-separated fields, got {}", fields.len()),
                });
            }
            for (f, what) in fields.iter().zip(["head", "relation", "tail"]) {
                if f.trim().is_empty() {
                    return Err(Error::Parse { line: i + 1, message: format!("empty {what}") });
                }
            }
            records.push((fields[0].to_string(), fields[1].to_string(), fields[2].to_string()));
        }
        Self::from_records(records.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())), discard)
    }

    /// Build from in-memory `(head, relation, tail)` records.
    pub fn from_records<'a, I>(records: I, discard: &DiscardSet) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        Self::build(records, discard, std::iter::empty())
    }

    /// Like [`from_records`](Self::from_records) but also registers entities
    /// that may have no edges.
    pub fn from_records_with_entities<'a, I, E>(records: I, discard: &DiscardSet, extra: E) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
        E: IntoIterator<Item = &'a str>,
    {
        Self::build(records, discard, extra)
    }

    fn build<'a, I, E>(records: I, discard: &DiscardSet, extra: E) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
        E: IntoIterator<Item = &'a str>,
    {
        let mut phrases: BTreeSet<String> = BTreeSet::new();
        // relation key -> first-seen label
        let mut rel_labels: BTreeMap<String, String> = BTreeMap::new();
        let mut kept: Vec<(String, String, String)> = Vec::new();
        for (h, r, t) in records {
            let hp = entity_words(h).join(" ");
            let tp = entity_words(t).join(" ");
            if hp.is_empty() || tp.is_empty() {
                return Err(Error::invalid(format!("empty entity phrase in ({h}, {r}, {t})")));
            }
            phrases.insert(hp.clone());
            phrases.insert(tp.clone());
            let key = relation_key(r);
            if key.is_empty() {
                return Err(Error::invalid(format!("empty relation name in ({h}, {r}, {t})")));
            }
            if discard.contains(r) {
                continue;
            }
            if r.starts_with(INVERSE_PREFIX) {
                return Err(Error::invalid(format!("relation {r} uses the reserved inverse prefix")));
            }
            rel_labels.entry(key.clone()).or_insert_with(|| r.trim().to_string());
            kept.push((hp, key, tp));
        }
        for e in extra {
            let p = entity_words(e).join(" ");
            if p.is_empty() {
                return Err(Error::invalid("empty entity phrase"));
            }
            phrases.insert(p);
        }
        if kept.is_empty() {
            return Err(Error::EmptyGraph);
        }

        let entities: Vec<Entity> = phrases
            .into_iter()
            .enumerate()
            .map(|(i, p)| Entity {
                id: EntityId(i as u32),
                words: p.split(' ').map(str::to_string).collect(),
                phrase: p,
            })
            .collect();
        let entity_index: HashMap<String, EntityId> = entities.iter().map(|e| (e.phrase.clone(), e.id)).collect();

        let mut relations = Vec::with_capacity(2 * rel_labels.len());
        let mut key_to_rel = HashMap::new();
        for (i, (key, label)) in rel_labels.iter().enumerate() {
            let fwd = RelationId(2 * i as u32);
            let inv = RelationId(2 * i as u32 + 1);
            let words = relation_words(label);
            relations.push(Relation {
                id: fwd,
                label: label.clone(),
                words: words.clone(),
                is_inverse: false,
                inverse_of: inv,
            });
            relations.push(Relation {
                id: inv,
                label: format!("{INVERSE_PREFIX}{label}"),
                words,
                is_inverse: true,
                inverse_of: fwd,
            });
            key_to_rel.insert(key.clone(), fwd);
        }
        let mut relation_index = HashMap::new();
        for r in &relations {
            relation_index.insert(r.label.clone(), r.id);
            let key = relation_key(&r.label);
            let key = if r.is_inverse { format!("{INVERSE_PREFIX}{key}") } else { key };
            relation_index.insert(key, r.id);
        }

        let mut forward: Vec<Triplet> = kept
            .iter()
            .map(|(h, k, t)| Triplet { head: entity_index[h], relation: key_to_rel[k], tail: entity_index[t] })
            .collect();
        forward.sort_unstable();
        forward.dedup();

        let mut adjacency = vec![Vec::new(); entities.len()];
        let mut membership = HashSet::with_capacity(2 * forward.len());
        for t in &forward {
            let inv = relations[t.relation.index()].inverse_of;
            adjacency[t.head.index()].push((t.relation, t.tail));
            adjacency[t.tail.index()].push((inv, t.head));
            membership.insert(*t);
            membership.insert(Triplet { head: t.tail, relation: inv, tail: t.head });
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        let neighbor_nodes = adjacency
            .iter()
            .map(|adj| {
                let mut v: Vec<EntityId> = adj.iter().map(|&(_, e)| e).collect();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        let max_entity_words = entities.iter().map(|e| e.words.len()).max().unwrap_or(0);

        Ok(KnowledgeGraph {
            entities,
            entity_index,
            relations,
            relation_index,
            adjacency,
            neighbor_nodes,
            membership,
            forward,
            max_entity_words,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Unique forward triplets (inverse forms not counted).
    pub fn num_triplets(&self) -> usize {
        self.forward.len()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    /// Unique forward triplets in sorted order.
    pub fn triplets(&self) -> &[Triplet] {
        &self.forward
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity> {
        self.entities.get(id.index()).ok_or_else(|| Error::Lookup { kind: "entity id", name: id.0.to_string() })
    }

    pub fn relation(&self, id: RelationId) -> Result<&Relation> {
        self.relations.get(id.index()).ok_or_else(|| Error::Lookup { kind: "relation id", name: id.0.to_string() })
    }

    pub fn entity_by_phrase(&self, phrase: &str) -> Option<EntityId> {
        self.entity_index.get(&entity_words(phrase).join(" ")).copied()
    }

    /// Accepts labels (`IsA`, `_IsA`) or word forms (`is a`, `_is a`).
    pub fn relation_by_name(&self, name: &str) -> Option<RelationId> {
        if let Some(&id) = self.relation_index.get(name) {
            return Some(id);
        }
        match name.strip_prefix(INVERSE_PREFIX) {
            Some(rest) => self.relation_index.get(&format!("{INVERSE_PREFIX}{}", relation_key(rest))).copied(),
            None => self.relation_index.get(&relation_key(name)).copied(),
        }
    }

    pub fn inverse(&self, r: RelationId) -> RelationId {
        self.relations[r.index()].inverse_of
    }

    /// Outgoing edges including inverse ones, sorted by relation id then
    /// entity id.
    pub fn neighbors(&self, e: EntityId) -> Result<&[(RelationId, EntityId)]> {
        self.adjacency
            .get(e.index())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup { kind: "entity id", name: e.0.to_string() })
    }

    /// Distinct neighbouring entities, sorted.
    pub fn neighbor_entities(&self, e: EntityId) -> Result<&[EntityId]> {
        self.neighbor_nodes
            .get(e.index())
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup { kind: "entity id", name: e.0.to_string() })
    }

    /// Every relation `r` with `(u, r, v)` in the graph, sorted.
    pub fn relations_between(&self, u: EntityId, v: EntityId) -> Vec<RelationId> {
        match self.adjacency.get(u.index()) {
            Some(adj) => adj.iter().filter(|&&(_, e)| e == v).map(|&(r, _)| r).collect(),
            None => Vec::new(),
        }
    }

    pub fn has_triplet(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.membership.contains(&Triplet { head, relation, tail })
    }

    pub fn entity_phrase(&self, e: EntityId) -> &str {
        &self.entities[e.index()].phrase
    }

    pub fn relation_label(&self, r: RelationId) -> &str {
        &self.relations[r.index()].label
    }

    /// Ground mentions in `text` to entities.
    ///
    /// With `treat_whole_as_entity`, the whole text must name one entity.
    /// Otherwise every contiguous word span naming an entity is a match, and
    /// only matches not strictly contained in another match are kept.
    pub fn ground_entities(
        &self,
        text: &str,
        treat_whole_as_entity: bool,
        lemmas: Option<&LemmaTable>,
    ) -> BTreeSet<EntityId> {
        let words = entity_words(text);
        let mut out = BTreeSet::new();
        if words.is_empty() {
            return out;
        }
        if treat_whole_as_entity {
            if let Some(e) = self.lookup_span(&words, lemmas) {
                out.insert(e);
            }
            return out;
        }
        let max_len = self.max_entity_words.max(1);
        let mut spans: Vec<(usize, usize, EntityId)> = Vec::new();
        for i in 0..words.len() {
            for j in (i + 1)..=words.len().min(i + max_len) {
                if let Some(e) = self.lookup_span(&words[i..j], lemmas) {
                    spans.push((i, j, e));
                }
            }
        }
        for &(i, j, e) in &spans {
            let nested = spans.iter().any(|&(a, b, _)| a <= i && j <= b && (b - a) > (j - i));
            if !nested {
                out.insert(e);
            }
        }
        out
    }

    fn lookup_span(&self, span: &[String], lemmas: Option<&LemmaTable>) -> Option<EntityId> {
        let surface = span.join(" ");
        if let Some(&e) = self.entity_index.get(&surface) {
            return Some(e);
        }
        let lemmas = lemmas?;
        if let Some(p) = lemmas.get(&surface) {
            if let Some(&e) = self.entity_index.get(p) {
                return Some(e);
            }
        }
        let per_word: Vec<&str> = span.iter().map(|w| lemmas.get(w).unwrap_or(w.as_str())).collect();
        self.entity_index.get(&per_word.join(" ")).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn predator_graph() -> KnowledgeGraph {
        KnowledgeGraph::from_records(
            [("predator", "DistinctFrom", "prey"), ("prey", "IsA", "animal")],
            &DiscardSet::default(),
        )
        .unwrap()
    }

    #[test]
    fn predator_graph_shape() {
        let kg = predator_graph();
        assert_eq!(kg.num_entities(), 3);
        assert_eq!(kg.num_relations(), 4);
        let edges: usize = kg.entities().iter().map(|e| kg.neighbors(e.id).unwrap().len()).sum();
        assert_eq!(edges, 4);
        let df = kg.relation_by_name("DistinctFrom").unwrap();
        assert_eq!(kg.relation(df).unwrap().words, vec!["distinct", "from"]);
        assert_eq!(kg.relation_label(kg.inverse(df)), "_DistinctFrom");
        assert_eq!(kg.inverse(kg.inverse(df)), df);
    }

    #[test]
    fn neighbors_include_inverse_edges() {
        let kg = predator_graph();
        let prey = kg.entity_by_phrase("prey").unwrap();
        let got: Vec<(String, String)> = kg
            .neighbors(prey)
            .unwrap()
            .iter()
            .map(|&(r, e)| (kg.relation_label(r).to_string(), kg.entity_phrase(e).to_string()))
            .collect();
        let mut want =
            vec![("IsA".to_string(), "animal".to_string()), ("_DistinctFrom".to_string(), "predator".to_string())];
        want.sort_by_key(|(r, _)| kg.relation_by_name(r).unwrap());
        assert_eq!(got, want);
        assert!(kg.neighbors(EntityId(99)).is_err());
    }

    #[test]
    fn isolated_entity_has_no_neighbors() {
        let kg = KnowledgeGraph::from_records_with_entities([("a", "IsA", "b")], &DiscardSet::default(), ["lonely"])
            .unwrap();
        let e = kg.entity_by_phrase("lonely").unwrap();
        assert!(kg.neighbors(e).unwrap().is_empty());
    }

    #[test]
    fn has_triplet_directions() {
        let kg = predator_graph();
        let id = |p: &str| kg.entity_by_phrase(p).unwrap();
        let isa = kg.relation_by_name("IsA").unwrap();
        let inv_isa = kg.relation_by_name("_IsA").unwrap();
        let df = kg.relation_by_name("DistinctFrom").unwrap();
        assert!(kg.has_triplet(id("predator"), df, id("prey")));
        assert!(!kg.has_triplet(id("prey"), inv_isa, id("animal")));
        assert!(kg.has_triplet(id("animal"), inv_isa, id("prey")));
        assert!(!kg.has_triplet(id("prey"), isa, EntityId(77)));
    }

    #[test]
    fn discarded_relations_filtered() {
        let err = KnowledgeGraph::from_records([("a", "RelatedTo", "b")], &DiscardSet::default());
        assert!(matches!(err, Err(Error::EmptyGraph)));
        let kg = KnowledgeGraph::from_records(
            [("a", "RelatedTo", "b"), ("a", "Synonym", "c"), ("a", "AtLocation", "d")],
            &DiscardSet::default(),
        )
        .unwrap();
        assert_eq!(kg.num_relations(), 2);
        assert!(kg.relation_by_name("RelatedTo").is_none());
    }

    #[test]
    fn duplicates_collapse() {
        let text = "a\tIsA\tb\na\tIsA\tb\nb\tAtLocation\tc\n";
        let kg = KnowledgeGraph::load(text.as_bytes(), &DiscardSet::default()).unwrap();
        let unique: HashSet<(&str, &str, &str)> =
            [("a", "IsA", "b"), ("a", "IsA", "b"), ("b", "AtLocation", "c")].into_iter().collect();
        assert_eq!(kg.num_triplets(), unique.len());
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = "a\tIsA\tb\nbroken line\n";
        match KnowledgeGraph::load(text.as_bytes(), &DiscardSet::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn relation_word_splitting() {
        assert_eq!(relation_words("DistinctFrom"), vec!["distinct", "from"]);
        assert_eq!(relation_words("IsA"), vec!["is", "a"]);
        assert_eq!(relation_words("has_prerequisite"), vec!["has", "prerequisite"]);
        assert_eq!(relation_key("EtymologicallyRelatedTo"), "etymologicallyrelatedto");
    }

    #[test]
    fn grounding_rules() {
        let kg = KnowledgeGraph::from_records(
            [
                ("magazine", "AtLocation", "bookstore"),
                ("ice_cream", "IsA", "dessert"),
                ("cream", "IsA", "dairy"),
                ("tropical_rainforest", "AtLocation", "earth"),
            ],
            &DiscardSet::default(),
        )
        .unwrap();
        assert!(kg.ground_entities("where would you find magazines", false, None).is_empty());
        let mut lemmas = LemmaTable::new();
        lemmas.insert("magazines", "magazine");
        let got = kg.ground_entities("where would you find magazines", false, Some(&lemmas));
        assert_eq!(got, [kg.entity_by_phrase("magazine").unwrap()].into_iter().collect());
        assert!(kg.ground_entities("", false, None).is_empty());
        let whole = kg.ground_entities("tropical rainforest", true, None);
        assert_eq!(whole, [kg.entity_by_phrase("tropical rainforest").unwrap()].into_iter().collect());
        let nested = kg.ground_entities("i like ice cream", false, None);
        assert_eq!(nested, [kg.entity_by_phrase("ice cream").unwrap()].into_iter().collect());
    }
}
