//! Textual form of paths: `target [SEP] source rel ent ... target [EOS]`.
//!
//! Inverse relations are written as the standalone marker token `_`
//! followed by the relation's words.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{entity_words, relation_words, KnowledgeGraph, INVERSE_PREFIX};
use crate::sampler::{Path, PathRecord};

pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
pub const EOS: u32 = 2;
pub const INVERSE_MARK: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[SEP]", "[EOS]", INVERSE_PREFIX];
pub const MAX_SEQ_LEN: usize = 64;

/// Word-level vocabulary plus the entity and relation lexicons used to
/// segment generated token streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    entities: HashMap<Vec<u32>, String>,
    relations: HashMap<Vec<u32>, String>,
    entity_phrases: Vec<String>,
    relation_labels: Vec<String>,
    max_entity_len: usize,
    max_relation_len: usize,
}

/// Lexicon lists stored next to the token list in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
}

impl Vocab {
    /// Vocabulary over every entity and forward relation of `kg`.
    pub fn build(kg: &KnowledgeGraph) -> Self {
        let entities = kg.entities().iter().map(|e| e.phrase.clone());
        let relations = kg.relations().iter().filter(|r| !r.is_inverse).map(|r| r.label.clone());
        Self::from_lexicon(entities, relations)
    }

    /// Vocabulary over explicit entity phrases and relation labels. Inverse
    /// labels are folded onto their forward form.
    pub fn from_lexicon<E, R>(entities: E, relations: R) -> Self
    where
        E: IntoIterator<Item = String>,
        R: IntoIterator<Item = String>,
    {
        let entity_phrases: BTreeSet<String> =
            entities.into_iter().map(|p| entity_words(&p).join(" ")).filter(|p| !p.is_empty()).collect();
        let relation_labels: BTreeSet<String> = relations
            .into_iter()
            .map(|r| r.trim_start_matches(INVERSE_PREFIX).to_string())
            .filter(|r| !relation_words(r).is_empty())
            .collect();
        let mut words: BTreeSet<String> = BTreeSet::new();
        for p in &entity_phrases {
            words.extend(p.split(' ').map(str::to_string));
        }
        for r in &relation_labels {
            words.extend(relation_words(r));
        }
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())))
            .collect();
        Self::assemble(tokens, entity_phrases.into_iter().collect(), relation_labels.into_iter().collect())
            .expect("lexicon words are in the token list")
    }

    fn assemble(tokens: Vec<String>, entity_phrases: Vec<String>, relation_labels: Vec<String>) -> Result<Self> {
        let index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let lookup = |w: &str| index.get(w).copied().ok_or_else(|| Error::OutOfVocab(w.to_string()));
        let mut entities = HashMap::new();
        for p in &entity_phrases {
            let ids = p.split(' ').map(lookup).collect::<Result<Vec<_>>>()?;
            entities.insert(ids, p.clone());
        }
        let mut relations = HashMap::new();
        for r in &relation_labels {
            let ids = relation_words(r).iter().map(|w| lookup(w)).collect::<Result<Vec<_>>>()?;
            relations.insert(ids, r.clone());
        }
        let max_entity_len = entities.keys().map(Vec::len).max().unwrap_or(0);
        let max_relation_len = relations.keys().map(Vec::len).max().unwrap_or(0);
        Ok(Vocab {
            tokens,
            index,
            entities,
            relations,
            entity_phrases,
            relation_labels,
            max_entity_len,
            max_relation_len,
        })
    }

    /// Restore from a checkpoint's token list and lexicon.
    pub fn from_parts(tokens: Vec<String>, lexicon: Lexicon) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s) {
            return Err(Error::Checkpoint("vocabulary does not start with the special tokens".into()));
        }
        Self::assemble(tokens, lexicon.entities, lexicon.relations)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon { entities: self.entity_phrases.clone(), relations: self.relation_labels.clone() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("[?]", String::as_str)
    }

    pub fn tokenize(&self, words: &[String]) -> Result<Vec<u32>> {
        words.iter().map(|w| self.id(w).ok_or_else(|| Error::OutOfVocab(w.clone()))).collect()
    }

    pub fn tokenize_entity(&self, phrase: &str) -> Result<Vec<u32>> {
        let words = entity_words(phrase);
        if words.is_empty() {
            return Err(Error::invalid("empty entity phrase"));
        }
        self.tokenize(&words)
    }

    fn tokenize_relation(&self, label: &str) -> Result<Vec<u32>> {
        let (inverse, base) = match label.strip_prefix(INVERSE_PREFIX) {
            Some(b) => (true, b),
            None => (false, label),
        };
        let words = relation_words(base);
        if words.is_empty() {
            return Err(Error::invalid(format!("empty relation label {label:?}")));
        }
        let mut ids = Vec::with_capacity(words.len() + 1);
        if inverse {
            ids.push(INVERSE_MARK);
        }
        ids.extend(self.tokenize(&words)?);
        Ok(ids)
    }

    /// Pairs of relation phrases where one is a proper prefix of the other;
    /// longest-match parsing may mis-segment entities that begin with the
    /// remaining words.
    pub fn ambiguities(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (a, la) in &self.relations {
            for (b, lb) in &self.relations {
                if a.len() < b.len() && b.starts_with(a) {
                    out.push((la.clone(), lb.clone()));
                }
            }
        }
        out.sort();
        out
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    fn relation_at(&self, body: &[u32], pos: usize) -> Option<(usize, &str)> {
        let max = self.max_relation_len.min(body.len().saturating_sub(pos));
        (1..=max).rev().find_map(|l| self.relations.get(&body[pos..pos + l]).map(|r| (l, r.as_str())))
    }

    fn starts_relation(&self, body: &[u32], pos: usize) -> bool {
        pos < body.len() && (body[pos] == INVERSE_MARK || self.relation_at(body, pos).is_some())
    }

    /// `body[pos..]` is a cut-off relation phrase (stream ended mid-relation).
    fn truncated_relation(&self, body: &[u32], pos: usize) -> bool {
        let mut tail = &body[pos..];
        if tail.first() == Some(&INVERSE_MARK) {
            tail = &tail[1..];
        }
        tail.is_empty() || self.relations.keys().any(|r| r.len() > tail.len() && r.starts_with(tail))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Number of prompt tokens: `|target| + 1 + |source|`.
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }
}

/// `tokens(target) [SEP] tokens(source)`.
pub fn encode_prompt(source: &str, target: &str, vocab: &Vocab) -> Result<TokenSequence> {
    let mut ids = vocab.tokenize_entity(target)?;
    ids.push(SEP);
    ids.extend(vocab.tokenize_entity(source)?);
    let prompt_len = ids.len();
    Ok(TokenSequence { ids, prompt_len })
}

pub fn encode_record(rec: &PathRecord, vocab: &Vocab) -> Result<TokenSequence> {
    if rec.entities.len() != rec.relations.len() + 1 || rec.relations.is_empty() {
        return Err(Error::invalid("path record needs at least one hop"));
    }
    let source = &rec.entities[0];
    let target = rec.entities.last().expect("non-empty");
    let mut seq = encode_prompt(source, target, vocab)?;
    for (r, e) in rec.relations.iter().zip(&rec.entities[1..]) {
        seq.ids.extend(vocab.tokenize_relation(r)?);
        seq.ids.extend(vocab.tokenize_entity(e)?);
    }
    seq.ids.push(EOS);
    if seq.ids.len() > MAX_SEQ_LEN {
        return Err(Error::invalid(format!("encoded path has {} tokens, limit is {MAX_SEQ_LEN}", seq.ids.len())));
    }
    Ok(seq)
}

pub fn encode_path(path: &Path, kg: &KnowledgeGraph, vocab: &Vocab) -> Result<TokenSequence> {
    encode_record(&path.to_record(kg), vocab)
}

/// Result of segmenting a token stream back into a path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedPath {
    pub prompt_source: String,
    pub prompt_target: String,
    /// Recovered entity phrases; the first is the prompt source.
    pub entities: Vec<String>,
    /// Recovered relation labels, `_`-prefixed when inverse.
    pub relations: Vec<String>,
    pub entity_in_kg: Vec<bool>,
    pub relation_in_kg: Vec<bool>,
    pub starts_at_source: bool,
    pub ends_at_target: bool,
    /// The stream ended with `[EOS]`.
    pub complete: bool,
    /// Tokens that could not be parsed.
    pub residue: Vec<String>,
}

impl DecodedPath {
    pub fn hops(&self) -> usize {
        self.relations.len()
    }

    /// Both endpoints match the prompt and at least one hop was recovered.
    pub fn connects(&self) -> bool {
        self.starts_at_source && self.ends_at_target && self.hops() > 0
    }

    pub fn to_record(&self) -> PathRecord {
        PathRecord { entities: self.entities.clone(), relations: self.relations.clone(), hops: self.hops() }
    }
}

/// Segment a (prompt + continuation) token stream.
///
/// The continuation alternates relation and entity phrases. Relations are
/// the longest match in the relation lexicon (after an optional inverse
/// marker). Entities are the longest lexicon phrase followed by a relation
/// start or the end; failing that, every token up to the next relation start
/// forms an out-of-lexicon entity. Membership flags use `kg` when given and
/// the vocabulary lexicon otherwise. Never fails: anything unparsed goes to
/// `residue`.
pub fn decode_tokens(seq: &TokenSequence, vocab: &Vocab, kg: Option<&KnowledgeGraph>) -> DecodedPath {
    let ids = &seq.ids;
    let mut out = DecodedPath {
        prompt_source: String::new(),
        prompt_target: String::new(),
        entities: Vec::new(),
        relations: Vec::new(),
        entity_in_kg: Vec::new(),
        relation_in_kg: Vec::new(),
        starts_at_source: false,
        ends_at_target: false,
        complete: false,
        residue: Vec::new(),
    };
    let Some(sep) = ids.iter().position(|&t| t == SEP) else {
        out.residue = ids.iter().map(|&t| vocab.token(t).to_string()).collect();
        return out;
    };
    let prompt_end = seq.prompt_len.clamp(sep + 1, ids.len());
    out.prompt_target = vocab.render(&ids[..sep]);
    out.prompt_source = vocab.render(&ids[sep + 1..prompt_end]);

    let rest = &ids[prompt_end..];
    let stop = rest.iter().position(|&t| t == EOS || t == PAD || t == SEP).unwrap_or(rest.len());
    out.complete = rest.get(stop) == Some(&EOS);
    let body = &rest[..stop];
    let complete = out.complete;
    if let Some(&t) = rest.get(stop) {
        if t == SEP {
            out.residue.extend(rest[stop..].iter().map(|&t| vocab.token(t).to_string()));
        }
    }

    let entity_known = |p: &str| match kg {
        Some(kg) => kg.entity_by_phrase(p).is_some(),
        None => vocab.entities.values().any(|e| e == p),
    };
    let relation_known = |l: &str| match kg {
        Some(kg) => kg.relation_by_name(l).is_some(),
        None => vocab.relation_labels.iter().any(|r| r == l.trim_start_matches(INVERSE_PREFIX)),
    };

    if !out.prompt_source.is_empty() {
        out.entities.push(out.prompt_source.clone());
        out.entity_in_kg.push(entity_known(&out.prompt_source));
    }

    let mut pos = 0;
    let mut tail_residue: Vec<u32> = Vec::new();
    while pos < body.len() && !out.entities.is_empty() {
        let rel_start = pos;
        let inverse = body[pos] == INVERSE_MARK;
        if inverse {
            pos += 1;
        }
        let Some((rlen, label)) = vocab.relation_at(body, pos) else {
            tail_residue.extend_from_slice(&body[rel_start..]);
            break;
        };
        let label = if inverse { format!("{INVERSE_PREFIX}{label}") } else { label.to_string() };
        pos += rlen;
        if pos >= body.len() {
            tail_residue.extend_from_slice(&body[rel_start..]);
            break;
        }
        let max = vocab.max_entity_len.min(body.len() - pos);
        let lexical = (1..=max).rev().find(|&l| {
            vocab.entities.contains_key(&body[pos..pos + l])
                && (pos + l == body.len()
                    || vocab.starts_relation(body, pos + l)
                    || (!complete && vocab.truncated_relation(body, pos + l)))
        });
        let elen = match lexical {
            Some(l) => l,
            None => {
                let mut q = pos + 1;
                while q < body.len() && !vocab.starts_relation(body, q) {
                    q += 1;
                }
                q - pos
            }
        };
        let phrase = vocab.render(&body[pos..pos + elen]);
        out.relation_in_kg.push(relation_known(&label));
        out.relations.push(label);
        out.entity_in_kg.push(entity_known(&phrase));
        out.entities.push(phrase);
        pos += elen;
    }
    if out.entities.is_empty() {
        tail_residue.extend_from_slice(body);
    }
    if !tail_residue.is_empty() {
        let mut r: Vec<String> = tail_residue.iter().map(|&t| vocab.token(t).to_string()).collect();
        r.append(&mut out.residue);
        out.residue = r;
    }
    out.starts_at_source =
        !out.prompt_source.is_empty() && out.entities.first().map(String::as_str) == Some(out.prompt_source.as_str());
    out.ends_at_target = out.hops() > 0
        && !out.prompt_target.is_empty()
        && out.entities.last().map(String::as_str) == Some(out.prompt_target.as_str());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::DiscardSet;

    fn predator_graph() -> KnowledgeGraph {
        KnowledgeGraph::from_records(
            [("predator", "DistinctFrom", "prey"), ("prey", "IsA", "animal")],
            &DiscardSet::default(),
        )
        .unwrap()
    }

    fn rec(entities: &[&str], relations: &[&str]) -> PathRecord {
        PathRecord {
            entities: entities.iter().map(|s| s.to_string()).collect(),
            relations: relations.iter().map(|s| s.to_string()).collect(),
            hops: relations.len(),
        }
    }

    #[test]
    fn predator_vocab() {
        let kg = predator_graph();
        let v = Vocab::build(&kg);
        assert_eq!(v.len(), 11);
        for w in ["predator", "prey", "animal", "distinct", "from", "is", "a"] {
            assert!(v.id(w).is_some(), "{w}");
        }
        assert_eq!(v.id("[SEP]"), Some(SEP));
        assert_eq!(Vocab::build(&kg), v);
    }

    #[test]
    fn predator_encoding() {
        let kg = predator_graph();
        let v = Vocab::build(&kg);
        let seq = encode_record(&rec(&["predator", "prey", "animal"], &["DistinctFrom", "IsA"]), &v).unwrap();
        assert_eq!(v.render(&seq.ids), "animal [SEP] predator distinct from prey is a animal [EOS]");
        assert_eq!(seq.prompt_len, 3);
        let d = decode_tokens(&seq, &v, Some(&kg));
        assert_eq!(d.entities, vec!["predator", "prey", "animal"]);
        assert_eq!(d.relations, vec!["DistinctFrom", "IsA"]);
        assert!(d.connects() && d.complete && d.residue.is_empty());
        assert!(d.entity_in_kg.iter().chain(&d.relation_in_kg).all(|&b| b));
    }

    #[test]
    fn minimal_and_inverse_encodings() {
        let kg = KnowledgeGraph::from_records(
            [("a", "IsA", "b"), ("predator", "DistinctFrom", "prey")],
            &DiscardSet::default(),
        )
        .unwrap();
        let v = Vocab::build(&kg);
        let one = encode_record(&rec(&["a", "b"], &["IsA"]), &v).unwrap();
        assert_eq!(v.render(&one.ids), "b [SEP] a is a b [EOS]");
        let inv = encode_record(&rec(&["prey", "predator"], &["_DistinctFrom"]), &v).unwrap();
        assert_eq!(v.render(&inv.ids), "predator [SEP] prey _ distinct from predator [EOS]");
        let d = decode_tokens(&inv, &v, Some(&kg));
        assert_eq!(d.relations, vec!["_DistinctFrom"]);
        assert!(d.connects());
    }

    #[test]
    fn out_of_vocab_word_named() {
        let v = Vocab::build(&predator_graph());
        let err = encode_record(&rec(&["predator", "moose"], &["IsA"]), &v).unwrap_err();
        assert!(err.to_string().contains("moose"));
    }

    #[test]
    fn out_of_graph_entity_detected() {
        let kg = predator_graph();
        let v = Vocab::from_lexicon(
            ["predator", "prey", "animal", "moose"].map(String::from),
            ["DistinctFrom", "IsA"].map(String::from),
        );
        let mut ids = vec![v.id("animal").unwrap(), SEP, v.id("predator").unwrap()];
        let prompt_len = ids.len();
        ids.extend([v.id("distinct").unwrap(), v.id("from").unwrap(), v.id("moose").unwrap(), EOS]);
        let d = decode_tokens(&TokenSequence { ids, prompt_len }, &v, Some(&kg));
        assert_eq!(d.entities, vec!["predator", "moose"]);
        assert_eq!(d.entity_in_kg, vec![true, false]);
        assert!(!d.connects());
    }

    #[test]
    fn truncated_stream_keeps_parsed_prefix() {
        let kg = predator_graph();
        let v = Vocab::build(&kg);
        let mut ids = vec![v.id("animal").unwrap(), SEP, v.id("predator").unwrap()];
        ids.extend([v.id("distinct").unwrap(), v.id("from").unwrap(), v.id("prey").unwrap()]);
        ids.extend([v.id("is").unwrap()]);
        let d = decode_tokens(&TokenSequence { ids, prompt_len: 3 }, &v, Some(&kg));
        assert!(!d.complete);
        assert_eq!(d.entities, vec!["predator", "prey"]);
        assert_eq!(d.residue, vec!["is"]);
        assert!(!d.connects());
    }

    #[test]
    fn garbage_never_panics() {
        let v = Vocab::build(&predator_graph());
        for ids in [vec![], vec![EOS], vec![SEP], vec![SEP, SEP, EOS], vec![4, 5, 6]] {
            let _ = decode_tokens(&TokenSequence { ids, prompt_len: 0 }, &v, None);
        }
    }

    #[test]
    fn parts_round_trip() {
        let v = Vocab::build(&predator_graph());
        let back = Vocab::from_parts(v.tokens().to_vec(), v.lexicon()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_parts(vec!["x".into()], v.lexicon()).is_err());
    }
}
