//! Random-walk path sampling over a [`KnowledgeGraph`].
//!
//! Each step draws the next entity uniformly among unvisited neighbours, then
//! draws a relation uniformly among those linking the two entities, rejecting
//! relations already used in the path.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};

/// Alternating entity/relation chain `e0 r0 e1 ... r(T-1) eT`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Path {
    pub entities: Vec<EntityId>,
    pub relations: Vec<RelationId>,
}

impl Path {
    pub fn new(entities: Vec<EntityId>, relations: Vec<RelationId>) -> Result<Self> {
        if relations.is_empty() || entities.len() != relations.len() + 1 {
            return Err(Error::invalid(format!(
                "path with {} entities and {} relations",
                entities.len(),
                relations.len()
            )));
        }
        Ok(Path { entities, relations })
    }

    pub fn hops(&self) -> usize {
        self.relations.len()
    }

    pub fn source(&self) -> EntityId {
        self.entities[0]
    }

    pub fn target(&self) -> EntityId {
        *self.entities.last().expect("non-empty path")
    }

    /// Check every hop is a graph triplet and no relation id repeats.
    pub fn validate(&self, kg: &KnowledgeGraph) -> Result<()> {
        for (t, &r) in self.relations.iter().enumerate() {
            if !kg.has_triplet(self.entities[t], r, self.entities[t + 1]) {
                return Err(Error::invalid(format!("hop {t} is not a graph triplet")));
            }
            if self.relations[..t].contains(&r) {
                return Err(Error::invalid(format!("relation repeated at hop {t}")));
            }
        }
        Ok(())
    }

    pub fn to_record(&self, kg: &KnowledgeGraph) -> PathRecord {
        PathRecord {
            entities: self.entities.iter().map(|&e| kg.entity_phrase(e).to_string()).collect(),
            relations: self.relations.iter().map(|&r| kg.relation_label(r).to_string()).collect(),
            hops: self.hops(),
        }
    }

    pub fn from_record(kg: &KnowledgeGraph, rec: &PathRecord) -> Result<Self> {
        let entities = rec
            .entities
            .iter()
            .map(|p| kg.entity_by_phrase(p).ok_or_else(|| Error::Lookup { kind: "entity", name: p.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let relations = rec
            .relations
            .iter()
            .map(|r| kg.relation_by_name(r).ok_or_else(|| Error::Lookup { kind: "relation", name: r.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let p = Path::new(entities, relations)?;
        if p.hops() != rec.hops {
            return Err(Error::invalid(format!("record says {} hops but lists {}", rec.hops, p.hops())));
        }
        Ok(p)
    }
}

/// Serialized path: entity phrases and relation labels (`_`-prefixed when
/// inverse).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathRecord {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub hops: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyTag {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    /// Walks start from the given entities.
    Local(Vec<EntityId>),
    /// Walks start from any entity of the graph.
    Global,
}

impl Strategy {
    pub fn tag(&self) -> StrategyTag {
        match self {
            Strategy::Local(_) => StrategyTag::Local,
            Strategy::Global => StrategyTag::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub relation_retries: usize,
    pub path_restarts: usize,
    /// Start-entity draws per requested path before the request is declared
    /// unsatisfiable.
    pub attempt_ceiling: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { relation_retries: 16, path_restarts: 8, attempt_ceiling: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct PathCorpus {
    pub paths: Vec<Path>,
    pub strategy: StrategyTag,
    pub seed: u64,
}

impl PathCorpus {
    pub fn hop_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for p in &self.paths {
            *h.entry(p.hops()).or_insert(0) += 1;
        }
        h
    }
}

/// One walk of exactly `hops` steps from `start`, or `None` when no
/// admissible walk was found within the retry budget.
pub fn sample_path<R: Rng>(
    kg: &KnowledgeGraph,
    start: EntityId,
    hops: usize,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Option<Path> {
    if hops == 0 || kg.neighbor_entities(start).map_or(true, |n| n.is_empty()) {
        return None;
    }
    let mut candidates: Vec<EntityId> = Vec::new();
    'attempt: for _ in 0..=cfg.path_restarts {
        let mut entities = vec![start];
        let mut relations: Vec<RelationId> = Vec::with_capacity(hops);
        let mut u = start;
        for _ in 0..hops {
            candidates.clear();
            candidates.extend(kg.neighbor_entities(u).ok()?.iter().filter(|e| !entities.contains(e)));
            if candidates.is_empty() {
                continue 'attempt;
            }
            let v = candidates[rng.gen_range(0..candidates.len())];
            let linking = kg.relations_between(u, v);
            let mut chosen = None;
            for _ in 0..cfg.relation_retries {
                let r = linking[rng.gen_range(0..linking.len())];
                if !relations.contains(&r) {
                    chosen = Some(r);
                    break;
                }
            }
            let Some(r) = chosen else { continue 'attempt };
            relations.push(r);
            entities.push(v);
            u = v;
        }
        return Some(Path { entities, relations });
    }
    None
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent child seed for the `index`-th item of stream `stream`.
pub fn child_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index)
}

const CHUNK: usize = 1024;

/// Sample `count_per_hop[T]` paths of each hop length `T`.
///
/// Each requested path has its own seed derived from `(seed, T, index)`, so
/// the result does not depend on the thread count.
pub fn sample_corpus(
    kg: &KnowledgeGraph,
    strategy: &Strategy,
    count_per_hop: &BTreeMap<usize, usize>,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<PathCorpus> {
    let starts: Vec<EntityId> = match strategy {
        Strategy::Local(s) => {
            if s.is_empty() {
                return Err(Error::invalid("local sampling needs at least one start entity"));
            }
            s.clone()
        }
        Strategy::Global => kg.entities().iter().map(|e| e.id).collect(),
    };
    let mut paths = Vec::with_capacity(count_per_hop.values().sum());
    for (&hops, &count) in count_per_hop {
        if hops == 0 {
            return Err(Error::invalid("hop count must be at least 1"));
        }
        let mut done = 0;
        while done < count {
            let end = (done + CHUNK).min(count);
            let chunk: Vec<Option<Path>> = (done..end)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, hops as u64, i as u64));
                    (0..cfg.attempt_ceiling).find_map(|_| {
                        let s = starts[rng.gen_range(0..starts.len())];
                        sample_path(kg, s, hops, &mut rng, cfg)
                    })
                })
                .collect();
            for (k, p) in chunk.into_iter().enumerate() {
                match p {
                    Some(p) => paths.push(p),
                    None => return Err(Error::Unsatisfiable { hops, achieved: done + k, requested: count }),
                }
            }
            done = end;
        }
    }
    Ok(PathCorpus { paths, strategy: strategy.tag(), seed })
}

/// Largest-remainder sizes for a `ratio` summing to 100.
pub fn split_sizes(n: usize, ratio: [u32; 3]) -> Result<[usize; 3]> {
    if ratio.iter().sum::<u32>() != 100 {
        return Err(Error::Config(format!("split ratio {ratio:?} must sum to 100")));
    }
    let exact: Vec<f64> = ratio.iter().map(|&r| n as f64 * r as f64 / 100.0).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Shuffle with `seed` and cut into train/dev/test by `ratio`.
pub fn split_corpus<T: Clone>(items: &[T], ratio: [u32; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.len() < 3 {
        return Err(Error::invalid(format!("cannot split {} items three ways", items.len())));
    }
    let sizes = split_sizes(items.len(), ratio)?;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: std::ops::Range<usize>| idx[r].iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    let a = sizes[0];
    let b = a + sizes[1];
    Ok((take(0..a), take(a..b), take(b..items.len())))
}

pub fn write_jsonl<W: Write>(mut w: W, kg: &KnowledgeGraph, paths: &[Path]) -> Result<()> {
    for p in paths {
        serde_json::to_writer(&mut w, &p.to_record(kg))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<PathRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PathRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        if rec.entities.len() != rec.relations.len() + 1 || rec.relations.len() != rec.hops {
            return Err(Error::Parse { line: i + 1, message: "inconsistent path record".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::DiscardSet;

    fn predator_graph() -> KnowledgeGraph {
        KnowledgeGraph::from_records_with_entities(
            [("predator", "DistinctFrom", "prey"), ("prey", "IsA", "animal")],
            &DiscardSet::default(),
            ["hermit"],
        )
        .unwrap()
    }

    #[test]
    fn predator_walk() {
        let kg = predator_graph();
        let predator = kg.entity_by_phrase("predator").unwrap();
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = sample_path(&kg, predator, 2, &mut rng, &SamplerConfig::default()).unwrap();
            let rec = p.to_record(&kg);
            assert_eq!(rec.entities, vec!["predator", "prey", "animal"]);
            assert_eq!(rec.relations, vec!["DistinctFrom", "IsA"]);
        }
    }

    #[test]
    fn isolated_start_fails() {
        let kg = predator_graph();
        let hermit = kg.entity_by_phrase("hermit").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_path(&kg, hermit, 1, &mut rng, &SamplerConfig::default()).is_none());
    }

    #[test]
    fn local_single_start() {
        let kg = predator_graph();
        let predator = kg.entity_by_phrase("predator").unwrap();
        let corpus = sample_corpus(
            &kg,
            &Strategy::Local(vec![predator]),
            &BTreeMap::from([(2, 1)]),
            9,
            &SamplerConfig::default(),
        )
        .unwrap();
        assert_eq!(corpus.paths.len(), 1);
        assert_eq!(corpus.paths[0].to_record(&kg).entities, vec!["predator", "prey", "animal"]);
    }

    #[test]
    fn unsatisfiable_request_reports_counts() {
        let kg = predator_graph();
        let cfg = SamplerConfig { attempt_ceiling: 20, ..SamplerConfig::default() };
        let err = sample_corpus(&kg, &Strategy::Global, &BTreeMap::from([(3, 5)]), 1, &cfg).unwrap_err();
        match err {
            Error::Unsatisfiable { hops, achieved, requested } => assert_eq!((hops, achieved, requested), (3, 0, 5)),
            e => panic!("{e}"),
        }
        assert!(sample_corpus(&kg, &Strategy::Local(vec![]), &BTreeMap::from([(1, 1)]), 1, &cfg).is_err());
    }

    #[test]
    fn split_examples() {
        let items: Vec<usize> = (0..1000).collect();
        let (a, b, c) = split_corpus(&items, [90, 5, 5], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (900, 50, 50));
        assert_eq!(split_sizes(101, [90, 5, 5]).unwrap(), [91, 5, 5]);
        let again = split_corpus(&items, [90, 5, 5], 3).unwrap();
        assert_eq!(again, (a, b, c));
        assert!(split_corpus(&[1, 2], [90, 5, 5], 0).is_err());
        assert!(split_sizes(10, [50, 30, 30]).is_err());
    }

    #[test]
    fn records_round_trip() {
        let kg = predator_graph();
        let id = |p: &str| kg.entity_by_phrase(p).unwrap();
        let p =
            Path::new(vec![id("prey"), id("predator")], vec![kg.relation_by_name("_DistinctFrom").unwrap()]).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &kg, std::slice::from_ref(&p)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.trim(), r#"{"entities":["prey","predator"],"relations":["_DistinctFrom"],"hops":1}"#);
        let recs = read_records(buf.as_slice()).unwrap();
        assert_eq!(Path::from_record(&kg, &recs[0]).unwrap(), p);
    }
}
