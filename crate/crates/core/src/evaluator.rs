//! Automatic path-quality metrics and the bilinear triplet scorer behind the
//! novelty score.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::DecodedPath;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triplet, INVERSE_PREFIX};
use crate::numerics::{Adam, Checkpoint, Graph, ParamStore, Scalar, Tensor, Var, CLIP_NORM, INIT_SCALE};

pub const CHECKPOINT_KIND: &str = "scorer";

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plausibility of a (head, relation, tail) fact in (0, 1).
pub trait TripletScorer {
    fn score(&self, head: &str, relation: &str, tail: &str) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of triplets held out for the accuracy estimate.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { dim: 32, lr: 1e-2, epochs: 30, batch_size: 128, holdout: 0.1, seed: 0 }
    }
}

/// `logistic(u_h^T W_r u_t + b_r)` over forward relations; inverse labels
/// are scored by swapping head and tail. Entities outside the training graph
/// share one unknown embedding (the last row).
#[derive(Debug, Clone)]
pub struct BilinearScorer {
    pub dim: usize,
    entities: Vec<String>,
    relations: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    pub params: ParamStore<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerReport {
    pub train_triplets: usize,
    pub heldout_triplets: usize,
    /// Classification accuracy at threshold 0.5 on held-out positives and as
    /// many corrupted-tail negatives.
    pub heldout_accuracy: f64,
    /// Fraction of training positives scored above 0.5.
    pub train_positive_rate: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    dim: usize,
    entities: Vec<String>,
    relations: Vec<String>,
}

/// `W_r` starts near the identity so all relations share the
/// embedding dot product until they have data to diverge.
fn init_params<T: Scalar>(entities: usize, relations: usize, dim: usize, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    s.add_uniform("ent", &[entities + 1, dim], INIT_SCALE, &mut rng)?;
    for r in 0..relations {
        let w = s.add_uniform(format!("rel{r}.w"), &[dim, dim], INIT_SCALE, &mut rng)?;
        let w = s.value_mut(w);
        for i in 0..dim {
            w.row_mut(i)[i] += T::one();
        }
        s.add_zeros(format!("rel{r}.b"), &[1])?;
    }
    Ok(s)
}

/// Logits of labelled (head, relation, tail) index triples, grouped by
/// relation; returns the two-class logits `[0, s]` and the labels in the
/// grouped order.
fn logits<T: Scalar>(
    g: &mut Graph<T>,
    st: &ParamStore<T>,
    dim: usize,
    batch: &[(usize, usize, usize, bool)],
) -> Result<(Var, Vec<Option<usize>>)> {
    let ent = g.param(st, st.id("ent")?);
    let ones = g.constant(Tensor::full(&[dim, 1], T::one()));
    let mut by_rel: Vec<usize> = (0..batch.len()).collect();
    by_rel.sort_by_key(|&i| batch[i].1);
    let mut parts = Vec::new();
    let mut labels = Vec::with_capacity(batch.len());
    let mut start = 0;
    while start < by_rel.len() {
        let r = batch[by_rel[start]].1;
        let end = start + by_rel[start..].iter().take_while(|&&i| batch[i].1 == r).count();
        let idx = &by_rel[start..end];
        let h = g.gather(ent, &idx.iter().map(|&i| batch[i].0).collect::<Vec<_>>())?;
        let t = g.gather(ent, &idx.iter().map(|&i| batch[i].2).collect::<Vec<_>>())?;
        let w = g.param(st, st.id(&format!("rel{r}.w"))?);
        let b = g.param(st, st.id(&format!("rel{r}.b"))?);
        let hw = g.matmul(h, w)?;
        let prod = g.mul(hw, t)?;
        let s = g.matmul(prod, ones)?;
        let s = g.add_row(s, b)?;
        let zero = g.constant(Tensor::zeros(&[idx.len(), 1]));
        parts.push(g.concat_cols(&[zero, s])?);
        labels.extend(idx.iter().map(|&i| Some(batch[i].3 as usize)));
        start = end;
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
    Ok((x, labels))
}

impl BilinearScorer {
    fn new(kg: &KnowledgeGraph, dim: usize, seed: u64) -> Result<Self> {
        let entities: Vec<String> = kg.entities().iter().map(|e| e.phrase.clone()).collect();
        let relations: Vec<String> = kg.relations().iter().filter(|r| !r.is_inverse).map(|r| r.label.clone()).collect();
        let params = init_params(entities.len(), relations.len(), dim, seed)?;
        Ok(Self::assemble(dim, entities, relations, params))
    }

    fn assemble(dim: usize, entities: Vec<String>, relations: Vec<String>, params: ParamStore<f32>) -> Self {
        let entity_index = entities.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let relation_index = relations.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        BilinearScorer { dim, entities, relations, entity_index, relation_index, params }
    }

    fn unknown(&self) -> usize {
        self.entities.len()
    }

    fn entity_row(&self, phrase: &str) -> usize {
        self.entity_index.get(phrase).copied().unwrap_or(self.unknown())
    }

    /// Raw bilinear logit of index triple (head row, relation, tail row).
    fn logit(&self, h: usize, r: usize, t: usize) -> f64 {
        let ent = self.params.value(self.params.id("ent").expect("ent"));
        let w = self.params.value(self.params.id(&format!("rel{r}.w")).expect("rel w"));
        let b = self.params.value(self.params.id(&format!("rel{r}.b")).expect("rel b")).item() as f64;
        let (uh, ut) = (ent.row(h), ent.row(t));
        let mut s = 0.0f64;
        for (i, &hi) in uh.iter().enumerate().take(self.dim) {
            let inner: f64 = w.row(i).iter().zip(ut).map(|(&a, &b)| a as f64 * b as f64).sum();
            s += hi as f64 * inner;
        }
        s + b
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta { dim: self.dim, entities: self.entities.clone(), relations: self.relations.clone() };
        Ok(Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::to_value(meta)?,
            vocab: None,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(ck.meta)?;
        let expected = init_params::<f32>(meta.entities.len(), meta.relations.len(), meta.dim, 0)?;
        if expected.len() != ck.params.len()
            || expected
                .entries()
                .iter()
                .zip(ck.params.entries())
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::Checkpoint("parameter layout does not match scorer metadata".into()));
        }
        Ok(Self::assemble(meta.dim, meta.entities, meta.relations, ck.params))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

impl TripletScorer for BilinearScorer {
    fn score(&self, head: &str, relation: &str, tail: &str) -> Result<f64> {
        let (base, swap) = match relation.strip_prefix(INVERSE_PREFIX) {
            Some(b) => (b, true),
            None => (relation, false),
        };
        let r = *self
            .relation_index
            .get(base)
            .ok_or_else(|| Error::Lookup { kind: "relation", name: relation.to_string() })?;
        let (h, t) = (self.entity_row(head), self.entity_row(tail));
        let (h, t) = if swap { (t, h) } else { (h, t) };
        Ok(logistic(self.logit(h, r, t)))
    }
}

/// Tail corruption: a uniformly drawn tail that does not form a known fact.
fn corrupt<R: Rng>(kg: &KnowledgeGraph, t: &Triplet, rng: &mut R) -> usize {
    let n = kg.num_entities();
    for _ in 0..64 {
        let c = rng.gen_range(0..n);
        if c != t.tail.index() && !kg.has_triplet(t.head, t.relation, crate::kg::EntityId(c as u32)) {
            return c;
        }
    }
    rng.gen_range(0..n)
}

/// Train on the graph's forward triplets minus a held-out slice, with one
/// corrupted-tail negative per positive redrawn every epoch.
pub fn train_triplet_scorer(kg: &KnowledgeGraph, cfg: &ScorerConfig) -> Result<(BilinearScorer, ScorerReport)> {
    let forward_index: HashMap<u32, usize> =
        kg.relations().iter().filter(|r| !r.is_inverse).enumerate().map(|(i, r)| (r.id.0, i)).collect();
    let mut triplets: Vec<Triplet> = kg.triplets().to_vec();
    let n_hold = ((triplets.len() as f64) * cfg.holdout).round() as usize;
    if triplets.len() < 10 || n_hold == 0 || n_hold >= triplets.len() {
        return Err(Error::invalid(format!("{} triplets are too few to split for scorer training", triplets.len())));
    }
    if cfg.dim == 0 || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("scorer dim, batch_size and epochs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    triplets.shuffle(&mut rng);
    let (held, train) = triplets.split_at(n_hold);
    let mut scorer = BilinearScorer::new(kg, cfg.dim, cfg.seed)?;
    let mut adam = Adam::new();
    let rel = |t: &Triplet| forward_index[&t.relation.0];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(2 * chunk.len());
            for &i in chunk {
                let t = &train[i];
                batch.push((t.head.index(), rel(t), t.tail.index(), true));
                batch.push((t.head.index(), rel(t), corrupt(kg, t, &mut rng), false));
            }
            scorer.params.zero_grads();
            let mut g = Graph::new();
            let (x, labels) = logits(&mut g, &scorer.params, cfg.dim, &batch)?;
            let l = g.cross_entropy(x, &labels)?;
            let loss = g.value(l).item() as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: adam.steps_taken() as usize, loss });
            }
            g.backward(l)?;
            g.accumulate_into(&mut scorer.params)?;
            scorer.params.clip_grad_norm(CLIP_NORM as f32);
            adam.step(&mut scorer.params, cfg.lr)?;
            total += loss * batch.len() as f64;
        }
        epoch_losses.push(total / (2 * train.len()) as f64);
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let mut correct = 0;
    for t in held {
        if logistic(scorer.logit(t.head.index(), rel(t), t.tail.index())) > 0.5 {
            correct += 1;
        }
        let c = corrupt(kg, t, &mut eval_rng);
        if logistic(scorer.logit(t.head.index(), rel(t), c)) <= 0.5 {
            correct += 1;
        }
    }
    let fit = train.iter().filter(|t| logistic(scorer.logit(t.head.index(), rel(t), t.tail.index())) > 0.5).count();
    let report = ScorerReport {
        train_triplets: train.len(),
        heldout_triplets: held.len(),
        heldout_accuracy: correct as f64 / (2 * held.len()) as f64,
        train_positive_rate: fit as f64 / train.len() as f64,
        epoch_losses,
    };
    Ok((scorer, report))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathCounts {
    pub paths: usize,
    pub connecting: usize,
    pub entities: usize,
    pub valid_entities: usize,
    pub relations: usize,
    pub valid_relations: usize,
    pub novel_paths: usize,
    pub missing_triplets: usize,
    /// Missing triplets whose relation the scorer does not know.
    pub unscorable_triplets: usize,
    pub scored_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    pub connection_rate: f64,
    /// Over generated entities (the prompt source is excluded); absent when
    /// no entity was generated.
    pub valid_entity_rate: Option<f64>,
    pub valid_relation_rate: Option<f64>,
    pub novelty_rate: f64,
    /// Mean over novel paths of the mean score of their missing triplets;
    /// absent when no path has a missing triplet.
    pub mean_novel_triplet_score: Option<f64>,
    /// `mean_novel_triplet_score` x 100.
    pub score_percent: Option<f64>,
    pub counts: PathCounts,
}

/// Connection, validity, novelty and score of decoded paths against `kg`.
pub fn eval_paths(paths: &[DecodedPath], kg: &KnowledgeGraph, scorer: &dyn TripletScorer) -> Result<PathMetrics> {
    if paths.is_empty() {
        return Err(Error::invalid("no paths to evaluate"));
    }
    let mut c = PathCounts { paths: paths.len(), ..Default::default() };
    let mut score_sum = 0.0;
    for p in paths {
        if p.connects() {
            c.connecting += 1;
        }
        for e in p.entities.iter().skip(1) {
            c.entities += 1;
            if kg.entity_by_phrase(e).is_some() {
                c.valid_entities += 1;
            }
        }
        for r in &p.relations {
            c.relations += 1;
            if kg.relation_by_name(r).is_some() {
                c.valid_relations += 1;
            }
        }
        let mut missing = Vec::new();
        for (i, r) in p.relations.iter().enumerate() {
            let (h, t) = (&p.entities[i], &p.entities[i + 1]);
            let known = match (kg.entity_by_phrase(h), kg.relation_by_name(r), kg.entity_by_phrase(t)) {
                (Some(h), Some(r), Some(t)) => kg.has_triplet(h, r, t),
                _ => false,
            };
            if !known {
                missing.push((h, r, t));
            }
        }
        if missing.is_empty() {
            continue;
        }
        c.novel_paths += 1;
        c.missing_triplets += missing.len();
        let mut scores = Vec::with_capacity(missing.len());
        for (h, r, t) in missing {
            match scorer.score(h, r, t) {
                Ok(s) => scores.push(s),
                Err(Error::Lookup { .. }) => c.unscorable_triplets += 1,
                Err(e) => return Err(e),
            }
        }
        if !scores.is_empty() {
            c.scored_paths += 1;
            score_sum += scores.iter().sum::<f64>() / scores.len() as f64;
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    let score = ratio(1, c.scored_paths).map(|inv| score_sum * inv);
    Ok(PathMetrics {
        connection_rate: c.connecting as f64 / c.paths as f64,
        valid_entity_rate: ratio(c.valid_entities, c.entities),
        valid_relation_rate: ratio(c.valid_relations, c.relations),
        novelty_rate: c.novel_paths as f64 / c.paths as f64,
        mean_novel_triplet_score: score,
        score_percent: score.map(|s| s * 100.0),
        counts: c,
    })
}

/// Distinct (head, relation, tail) strings of a path set that are absent
/// from `kg`.
pub fn missing_triplets(paths: &[DecodedPath], kg: &KnowledgeGraph) -> BTreeSet<(String, String, String)> {
    let mut out = BTreeSet::new();
    for p in paths {
        for (i, r) in p.relations.iter().enumerate() {
            let (h, t) = (&p.entities[i], &p.entities[i + 1]);
            let known = matches!(
                (kg.entity_by_phrase(h), kg.relation_by_name(r), kg.entity_by_phrase(t)),
                (Some(hh), Some(rr), Some(tt)) if kg.has_triplet(hh, rr, tt)
            );
            if !known {
                out.insert((h.clone(), r.clone(), t.clone()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{decode_tokens, encode_record, Vocab};
    use crate::kg::DiscardSet;
    use crate::sampler::PathRecord;

    struct Stub(f64);

    impl TripletScorer for Stub {
        fn score(&self, _: &str, _: &str, _: &str) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn decoded(kg: &KnowledgeGraph, v: &Vocab, entities: &[&str], relations: &[&str]) -> DecodedPath {
        let rec = PathRecord {
            entities: entities.iter().map(|s| s.to_string()).collect(),
            relations: relations.iter().map(|s| s.to_string()).collect(),
            hops: relations.len(),
        };
        decode_tokens(&encode_record(&rec, v).unwrap(), v, Some(kg))
    }

    #[test]
    fn hand_applied_definitions() {
        let kg = KnowledgeGraph::from_records(
            [("predator", "DistinctFrom", "prey"), ("prey", "IsA", "animal")],
            &DiscardSet::default(),
        )
        .unwrap();
        let v = Vocab::build(&kg);
        let ok = decoded(&kg, &v, &["predator", "prey", "animal"], &["DistinctFrom", "IsA"]);
        let novel = decoded(&kg, &v, &["predator", "animal"], &["IsA"]);
        let m = eval_paths(&[ok.clone(), novel], &kg, &Stub(0.8)).unwrap();
        assert_eq!(m.connection_rate, 1.0);
        assert_eq!(m.novelty_rate, 0.5);
        assert!((m.mean_novel_triplet_score.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(m.valid_relation_rate, Some(1.0));

        let all_known = eval_paths(&[ok], &kg, &Stub(0.8)).unwrap();
        assert_eq!(all_known.novelty_rate, 0.0);
        assert_eq!(all_known.mean_novel_triplet_score, None);
        assert!(eval_paths(&[], &kg, &Stub(0.8)).is_err());
    }

    #[test]
    fn zero_embeddings_score_one_half() {
        let kg = KnowledgeGraph::from_records([("a", "IsA", "b")], &DiscardSet::default()).unwrap();
        let mut s = BilinearScorer::new(&kg, 4, 0).unwrap();
        let ent = s.params.id("ent").unwrap();
        s.params.value_mut(ent).fill(0.0);
        assert_eq!(s.score("a", "IsA", "b").unwrap(), 0.5);
        assert_eq!(s.score("zzz", "_IsA", "b").unwrap(), 0.5);
        assert!(s.score("a", "Causes", "b").is_err());
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(1000.0) - 1.0).abs() < 1e-12);
        assert!(logistic(-1000.0) >= 0.0);
        assert!((logistic(2.0) + logistic(-2.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scorer_separates_toy_facts() {
        let kg = crate::toy::toy_kg(&crate::toy::ToyKgConfig::default()).unwrap();
        let (s, rep) = train_triplet_scorer(&kg, &ScorerConfig::default()).unwrap();
        assert!(rep.heldout_accuracy >= 0.8, "{rep:?}");
        let t = kg.triplets()[0];
        let (h, r, tl) = (kg.entity_phrase(t.head), kg.relation_label(t.relation), kg.entity_phrase(t.tail));
        let inv = format!("{INVERSE_PREFIX}{r}");
        assert_eq!(s.score(h, r, tl).unwrap(), s.score(tl, &inv, h).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scorer.ckpt");
        s.save(&path).unwrap();
        let back = BilinearScorer::load(&path).unwrap();
        assert!(back.params.bit_equal(&s.params));
        assert_eq!(back.score(h, r, tl).unwrap(), s.score(h, r, tl).unwrap());
    }

    fn two_dim(scale: f32) -> BilinearScorer {
        let kg = KnowledgeGraph::from_records([("a", "IsA", "b")], &DiscardSet::default()).unwrap();
        let mut s = BilinearScorer::new(&kg, 2, 0).unwrap();
        let ent = s.params.id("ent").unwrap();
        *s.params.value_mut(ent) = Tensor::from_rows(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.0]);
        let w = s.params.id("rel0.w").unwrap();
        *s.params.value_mut(w) = Tensor::from_rows(2, 2, vec![0.5 * scale, -scale, 2.0 * scale, 0.25 * scale]);
        let b = s.params.id("rel0.b").unwrap();
        *s.params.value_mut(b) = Tensor::new(vec![1], vec![0.1 * scale]).unwrap();
        s
    }

    #[test]
    fn hand_computed_two_dim_score() {
        // W u_t = [0.5*-1 + -1*0.5, 2*-1 + 0.25*0.5] = [-1, -1.875]
        // u_h . (W u_t) = -1 - 3.75 = -4.75, plus bias 0.1
        let s = two_dim(1.0);
        let expected = 1.0 / (1.0 + (4.65f64).exp());
        assert!((s.score("a", "IsA", "b").unwrap() - expected).abs() < 1e-6);
        let neg = two_dim(-1.0);
        let sum = s.score("a", "IsA", "b").unwrap() + neg.score("a", "IsA", "b").unwrap();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}
