use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::sampler::Path;

pub const MAX_RETRIEVAL_HOPS: usize = 3;
pub const DEFAULT_PATH_CAP: usize = 32;

/// Every simple path of 1..=`max_hops` hops from a question entity to a
/// choice entity, shortest first, then by (entity, relation) ids along the
/// path; at most `cap` are kept.
pub fn retrieve_static_paths(
    kg: &KnowledgeGraph,
    question: &[EntityId],
    choice: &[EntityId],
    max_hops: usize,
    cap: usize,
) -> Result<Vec<Path>> {
    if max_hops > MAX_RETRIEVAL_HOPS {
        return Err(Error::Config(format!("max_hops {max_hops} exceeds {MAX_RETRIEVAL_HOPS}")));
    }
    let mut sources: Vec<EntityId> = question.to_vec();
    sources.sort_unstable();
    sources.dedup();
    let mut targets = vec![false; kg.num_entities()];
    for &t in choice {
        kg.entity(t)?;
        targets[t.index()] = true;
    }
    let mut found = Vec::new();
    let mut entities = Vec::with_capacity(max_hops + 1);
    let mut relations = Vec::with_capacity(max_hops);
    for s in sources {
        kg.entity(s)?;
        entities.clear();
        entities.push(s);
        dfs(kg, &targets, max_hops, &mut entities, &mut relations, &mut found)?;
    }
    found.sort_by(|a: &Path, b: &Path| a.hops().cmp(&b.hops()).then_with(|| path_key(a).cmp(&path_key(b))));
    found.truncate(cap);
    Ok(found)
}

fn path_key(p: &Path) -> Vec<u32> {
    let mut k = Vec::with_capacity(2 * p.hops() + 1);
    for i in 0..p.hops() {
        k.push(p.entities[i].0);
        k.push(p.relations[i].0);
    }
    k.push(p.target().0);
    k
}

fn dfs(
    kg: &KnowledgeGraph,
    targets: &[bool],
    max_hops: usize,
    entities: &mut Vec<EntityId>,
    relations: &mut Vec<RelationId>,
    found: &mut Vec<Path>,
) -> Result<()> {
    if relations.len() == max_hops {
        return Ok(());
    }
    let u = *entities.last().expect("non-empty");
    for &(r, v) in kg.neighbors(u)? {
        if entities.contains(&v) {
            continue;
        }
        entities.push(v);
        relations.push(r);
        if targets[v.index()] {
            found.push(Path { entities: entities.clone(), relations: relations.clone() });
        }
        dfs(kg, targets, max_hops, entities, relations, found)?;
        entities.pop();
        relations.pop();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::DiscardSet;

    #[test]
    fn predator_retrieval() {
        let kg = KnowledgeGraph::from_records(
            [("predator", "DistinctFrom", "prey"), ("prey", "IsA", "animal")],
            &DiscardSet::default(),
        )
        .unwrap();
        let e = |p: &str| kg.entity_by_phrase(p).unwrap();
        let paths = retrieve_static_paths(&kg, &[e("predator")], &[e("animal")], 2, 32).unwrap();
        assert_eq!(paths.len(), 1);
        let rec = paths[0].to_record(&kg);
        assert_eq!(rec.entities, vec!["predator", "prey", "animal"]);
        assert_eq!(rec.relations, vec!["DistinctFrom", "IsA"]);
        assert!(retrieve_static_paths(&kg, &[e("prey")], &[e("prey")], 3, 32).unwrap().is_empty());
        assert!(retrieve_static_paths(&kg, &[e("prey")], &[e("prey")], 4, 32).is_err());
    }
}
