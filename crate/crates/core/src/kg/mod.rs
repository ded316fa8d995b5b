//! Knowledge-graph entity embeddings: TransE pretraining followed by a
//! single graph-attention layer that mixes each entity with its neighbors.

mod gat;
mod transe;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;

pub use gat::{enrich_table, fit_gat, neighbor_aggregate, GatConfig, GatParams, NeighborSummary};
pub use transe::{corruption_ranking_accuracy, transe_train, KgEmbedding, TranseConfig};

#[derive(Debug, Error)]
pub enum KgError {
    #[error("triple store is empty")]
    Empty,
    #[error("invalid setting: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Deduplicated `(head, relation, tail)` triples over interned ids, with an
/// undirected adjacency view.
#[derive(Clone, Debug, Default)]
pub struct TripleStore {
    entities: Vec<String>,
    entity_index: HashMap<String, usize>,
    relations: Vec<String>,
    relation_index: HashMap<String, usize>,
    triples: Vec<(usize, usize, usize)>,
    members: HashSet<(usize, usize, usize)>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

fn intern(names: &mut Vec<String>, index: &mut HashMap<String, usize>, s: &str) -> usize {
    if let Some(&i) = index.get(s) {
        return i;
    }
    names.push(s.to_string());
    index.insert(s.to_string(), names.len() - 1);
    names.len() - 1
}

impl TripleStore {
    pub fn from_triples<'a, I>(triples: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut s = Self::default();
        for (h, r, t) in triples {
            let h = intern(&mut s.entities, &mut s.entity_index, h);
            let r = intern(&mut s.relations, &mut s.relation_index, r);
            let t = intern(&mut s.entities, &mut s.entity_index, t);
            if s.members.insert((h, r, t)) {
                s.triples.push((h, r, t));
            }
        }
        s.adjacency = vec![Vec::new(); s.entities.len()];
        for &(h, r, t) in &s.triples {
            s.adjacency[h].push((t, r));
            s.adjacency[t].push((h, r));
        }
        s
    }

    /// Reads three tab-separated ids per line.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = File::open(path).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| DataError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(DataError::Malformed {
                    path: Some(path.to_path_buf()),
                    line: i + 1,
                    msg: format!("expected 3 tab-separated ids, found {}", f.len()),
                });
            }
            rows.push((f[0].trim().to_string(), f[1].trim().to_string(), f[2].trim().to_string()));
        }
        Ok(Self::from_triples(rows.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str()))))
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn triples(&self) -> &[(usize, usize, usize)] {
        &self.triples
    }

    pub fn entity(&self, id: &str) -> Option<usize> {
        self.entity_index.get(id).copied()
    }

    pub fn adjacency(&self, e: usize) -> &[(usize, usize)] {
        &self.adjacency[e]
    }

    pub fn degree(&self, e: usize) -> usize {
        self.adjacency[e].len()
    }

    pub fn contains(&self, h: usize, r: usize, t: usize) -> bool {
        self.members.contains(&(h, r, t))
    }

    /// Up to `n` distinct neighbors: highest degree first, ties broken by
    /// lexicographic entity id.
    pub fn select_neighbors(&self, e: usize, n: usize) -> Vec<usize> {
        let mut nb: Vec<usize> = self.adjacency[e].iter().map(|&(x, _)| x).filter(|&x| x != e).collect();
        nb.sort_unstable();
        nb.dedup();
        nb.sort_by(|&a, &b| {
            self.degree(b)
                .cmp(&self.degree(a))
                .then_with(|| self.entities[a].cmp(&self.entities[b]))
        });
        nb.truncate(n);
        nb
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_and_bidirectional_adjacency() {
        let s = TripleStore::from_triples([("a", "r", "b"), ("a", "r", "b"), ("b", "q", "c")]);
        assert_eq!(s.triples().len(), 2);
        let b = s.entity("b").unwrap();
        assert_eq!(s.degree(b), 2);
        let a = s.entity("a").unwrap();
        assert_eq!(s.adjacency(a), &[(b, 0)]);
        assert!(s.contains(a, 0, b));
        assert!(!s.contains(b, 0, a));
    }

    #[test]
    fn neighbor_selection_prefers_degree_then_id() {
        // hub connects to x, y, z; z has extra edges
        let s = TripleStore::from_triples([
            ("hub", "r", "y"),
            ("hub", "r", "x"),
            ("hub", "r", "z"),
            ("z", "r", "w1"),
            ("z", "r", "w2"),
        ]);
        let hub = s.entity("hub").unwrap();
        let names: Vec<&str> = s
            .select_neighbors(hub, 2)
            .into_iter()
            .map(|e| s.entities()[e].as_str())
            .collect();
        assert_eq!(names, vec!["z", "x"]);
    }
}
