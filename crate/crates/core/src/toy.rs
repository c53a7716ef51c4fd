//! Synthetic toy graph and QA set used by tests, examples and the bundled
//! data files.
//!
//! Entities are pseudo-words grouped into clusters. Triplets link entities
//! of the same cluster, plus one `IsA` edge from every entity to one of a few
//! hub entities shared across clusters.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{DiscardSet, EntityId, KnowledgeGraph};
use crate::qa::QaExample;

pub const TOY_RELATIONS: [&str; 8] =
    ["IsA", "AtLocation", "UsedFor", "CapableOf", "PartOf", "HasProperty", "Causes", "Desires"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyKgConfig {
    pub clusters: usize,
    pub cluster_size: usize,
    /// Linked entity pairs per cluster (at least `cluster_size - 1`).
    pub pairs_per_cluster: usize,
    pub min_relations_per_pair: usize,
    pub max_relations_per_pair: usize,
    pub two_word_fraction: f64,
    pub hubs: usize,
    pub seed: u64,
}

impl Default for ToyKgConfig {
    fn default() -> Self {
        ToyKgConfig {
            clusters: 20,
            cluster_size: 10,
            pairs_per_cluster: 26,
            min_relations_per_pair: 2,
            max_relations_per_pair: 3,
            two_word_fraction: 0.3,
            hubs: 4,
            seed: 7,
        }
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    let syllables = rng.gen_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS[rng.gen_range(0..ONSETS.len())], VOWELS[rng.gen_range(0..VOWELS.len())]))
        .collect()
}

/// Distinct entity phrases; no word is shared between two phrases.
fn entity_phrases<R: Rng>(n: usize, two_word_fraction: f64, rng: &mut R) -> Vec<String> {
    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut R| loop {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    (0..n)
        .map(|_| if rng.gen_bool(two_word_fraction) { format!("{} {}", fresh(rng), fresh(rng)) } else { fresh(rng) })
        .collect()
}

/// (head, relation, tail) records of the toy graph.
pub fn toy_kg_records(cfg: &ToyKgConfig) -> Result<Vec<(String, String, String)>> {
    let n = cfg.cluster_size;
    let max_pairs = n * n.saturating_sub(1) / 2;
    if n < 2
        || cfg.clusters == 0
        || cfg.pairs_per_cluster + 1 < n
        || cfg.pairs_per_cluster > max_pairs
        || cfg.min_relations_per_pair == 0
        || cfg.min_relations_per_pair > cfg.max_relations_per_pair
        || cfg.max_relations_per_pair > TOY_RELATIONS.len()
    {
        return Err(Error::Config("inconsistent toy graph configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phrases = entity_phrases(cfg.clusters * n + cfg.hubs, cfg.two_word_fraction, &mut rng);
    let (phrases, hubs) = phrases.split_at(cfg.clusters * n);
    let mut out = Vec::new();
    for c in 0..cfg.clusters {
        let members = &phrases[c * n..(c + 1) * n];
        let mut pairs = BTreeSet::new();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for i in 1..n {
            let j = order[rng.gen_range(0..i)];
            pairs.insert((order[i].min(j), order[i].max(j)));
        }
        while pairs.len() < cfg.pairs_per_cluster {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a != b {
                pairs.insert((a.min(b), a.max(b)));
            }
        }
        for (a, b) in pairs {
            let k = rng.gen_range(cfg.min_relations_per_pair..=cfg.max_relations_per_pair);
            let mut rels = TOY_RELATIONS.to_vec();
            rels.shuffle(&mut rng);
            for r in &rels[..k] {
                let (h, t) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
                out.push((members[h].clone(), r.to_string(), members[t].clone()));
            }
        }
    }
    if !hubs.is_empty() {
        for p in phrases {
            let hub = &hubs[rng.gen_range(0..hubs.len())];
            out.push((p.clone(), "IsA".to_string(), hub.clone()));
        }
    }
    Ok(out)
}

pub fn toy_kg(cfg: &ToyKgConfig) -> Result<KnowledgeGraph> {
    let records = toy_kg_records(cfg)?;
    KnowledgeGraph::from_records(
        records.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())),
        &DiscardSet::default(),
    )
}

pub fn write_kg_tsv<W: Write>(mut w: W, records: &[(String, String, String)]) -> Result<()> {
    for (h, r, t) in records {
        writeln!(w, "{h}\t{r}\t{t}")?;
    }
    Ok(())
}

/// Entities within `max_hops` of `start`, excluding `start`.
pub fn within_hops(kg: &KnowledgeGraph, start: EntityId, max_hops: usize) -> Result<BTreeSet<EntityId>> {
    within_hops_via(kg, start, max_hops, |_| true)
}

/// Like [`within_hops`], but walks only through entities accepted by `via`.
fn within_hops_via(
    kg: &KnowledgeGraph,
    start: EntityId,
    max_hops: usize,
    via: impl Fn(EntityId) -> bool,
) -> Result<BTreeSet<EntityId>> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([(start, 0)]);
    while let Some((u, d)) = queue.pop_front() {
        if d == max_hops {
            continue;
        }
        for &v in kg.neighbor_entities(u)? {
            if via(v) && seen.insert(v) {
                queue.push_back((v, d + 1));
            }
        }
    }
    seen.remove(&start);
    Ok(seen)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyQaConfig {
    pub questions: usize,
    pub choices: usize,
    /// Gold answers lie within this many hops of every question entity and
    /// distractors lie beyond it.
    pub max_hops: usize,
    pub max_question_entities: usize,
    /// Entities with more distinct neighbors than this (the hubs) never
    /// appear in questions or choices.
    pub max_degree: usize,
    pub seed: u64,
}

impl Default for ToyQaConfig {
    fn default() -> Self {
        ToyQaConfig { questions: 500, choices: 4, max_hops: 2, max_question_entities: 3, max_degree: 20, seed: 11 }
    }
}

const TEMPLATES: &[&str] = &[
    "which of these goes with {}",
    "what is related to {}",
    "{} are linked with which one",
    "pick the thing connected to {}",
    "find something that belongs near {}",
];

/// Multiple-choice questions whose gold choice is connected to the question
/// entities within `max_hops` while every distractor is not.
pub fn toy_qa(kg: &KnowledgeGraph, cfg: &ToyQaConfig) -> Result<Vec<QaExample>> {
    if !(2..=5).contains(&cfg.choices) || cfg.max_question_entities == 0 {
        return Err(Error::Config("toy QA needs 2-5 choices and at least one question entity".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let usable: Vec<bool> =
        kg.entities().iter().map(|e| Ok(kg.neighbor_entities(e.id)?.len() <= cfg.max_degree)).collect::<Result<_>>()?;
    // Gold answers are linked through ordinary entities; distractors must be
    // out of reach even through hubs.
    let reach: Vec<BTreeSet<EntityId>> = kg
        .entities()
        .iter()
        .map(|e| within_hops_via(kg, e.id, cfg.max_hops, |v| usable[v.index()]))
        .collect::<Result<_>>()?;
    let reach_any: Vec<BTreeSet<EntityId>> =
        kg.entities().iter().map(|e| within_hops(kg, e.id, cfg.max_hops)).collect::<Result<_>>()?;
    let anchors: Vec<EntityId> =
        kg.entities().iter().map(|e| e.id).filter(|e| usable[e.index()] && !reach[e.index()].is_empty()).collect();
    if anchors.is_empty() {
        return Err(Error::invalid("graph has no connected entities"));
    }
    let mut out = Vec::with_capacity(cfg.questions);
    let mut attempts = 0;
    while out.len() < cfg.questions {
        attempts += 1;
        if attempts > 100 * cfg.questions.max(1) {
            return Err(Error::invalid("could not build enough toy questions"));
        }
        let anchor = anchors[rng.gen_range(0..anchors.len())];
        let near: Vec<EntityId> = reach[anchor.index()].iter().copied().collect();
        let gold = near[rng.gen_range(0..near.len())];
        let mut question = vec![anchor];
        let extra = rng.gen_range(0..cfg.max_question_entities);
        let mut pool: Vec<EntityId> = reach[gold.index()].iter().copied().filter(|&e| e != anchor).collect();
        pool.shuffle(&mut rng);
        question.extend(pool.into_iter().take(extra));
        let blocked: BTreeSet<EntityId> = question
            .iter()
            .flat_map(|q| reach_any[q.index()].iter().copied())
            .chain(question.iter().copied())
            .collect();
        let far: Vec<EntityId> =
            kg.entities().iter().map(|e| e.id).filter(|e| usable[e.index()] && !blocked.contains(e)).collect();
        if far.len() < cfg.choices - 1 {
            continue;
        }
        let distractors: Vec<EntityId> = far.choose_multiple(&mut rng, cfg.choices - 1).copied().collect();
        let answer = rng.gen_range(0..cfg.choices);
        let mut choices: Vec<String> = distractors.iter().map(|&e| kg.entity_phrase(e).to_string()).collect();
        choices.insert(answer, kg.entity_phrase(gold).to_string());
        let mention = question.iter().map(|&e| kg.entity_phrase(e)).collect::<Vec<_>>().join(" and ");
        let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        out.push(QaExample {
            id: format!("toy-{:04}", out.len()),
            question: template.replace("{}", &mention),
            choices,
            answer,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qa::ground;

    #[test]
    fn toy_graph_shape() {
        let kg = toy_kg(&ToyKgConfig::default()).unwrap();
        assert_eq!(kg.num_entities(), 204);
        assert_eq!(kg.num_relations(), 16);
        assert!((1200..=1800).contains(&kg.num_triplets()), "{}", kg.num_triplets());
        assert_eq!(toy_kg_records(&ToyKgConfig::default()).unwrap(), toy_kg_records(&ToyKgConfig::default()).unwrap());
    }

    #[test]
    fn toy_questions_are_separable() {
        let kg = toy_kg(&ToyKgConfig::default()).unwrap();
        let cfg = ToyQaConfig { questions: 60, ..Default::default() };
        for ex in toy_qa(&kg, &cfg).unwrap() {
            ex.validate().unwrap();
            let g = ground(&ex, &kg, None);
            assert!(!g.question.is_empty());
            for (i, c) in g.choices.iter().enumerate() {
                assert_eq!(c.len(), 1);
                let connected = g.question.iter().any(|&q| within_hops(&kg, q, 2).unwrap().contains(&c[0]));
                assert_eq!(connected, i == ex.answer, "{ex:?}");
            }
        }
    }
}
