//! The hierarchical food-topic taxonomy.
//!
//! A taxonomy is a strict tree of topic nodes loaded from a JSON file
//! (`{id, name, children: [...]}`). Distances between topics are
//! shortest-path edge counts over the undirected tree, which drive both the
//! topic-hierarchy loss and coarse retrieval candidate selection. A subset
//! of nodes (by default the top-level categories) serves as the classifier
//! label set.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TopicError {
    #[error("i/o error reading taxonomy: {0}")]
    Io(#[from] std::io::Error),
    #[error("taxonomy parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate topic id '{0}'")]
    DuplicateId(String),
    #[error("unknown topic id '{0}'")]
    UnknownId(String),
    #[error("label set entry '{0}' is not a taxonomy node")]
    UnknownLabel(String),
    #[error("taxonomy must contain at least one node")]
    Empty,
}

/// One node of the taxonomy file schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicNode {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TopicNode>,
}

/// Taxonomy file schema: a root node plus an optional explicit label set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub root: TopicNode,
    /// Classifier labels; defaults to the root's direct children
    /// (or the root itself for a single-node taxonomy).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub label_set: Vec<String>,
}

/// Validated, immutable topic tree.
#[derive(Debug, Clone)]
pub struct TopicGraph {
    ids: Vec<String>,
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    label_set: Vec<String>,
}

impl TopicGraph {
    pub fn load(path: &Path) -> Result<Self, TopicError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, TopicError> {
        let file: TaxonomyFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    pub fn from_file(file: TaxonomyFile) -> Result<Self, TopicError> {
        let mut graph = TopicGraph {
            ids: Vec::new(),
            names: Vec::new(),
            index: HashMap::new(),
            parent: Vec::new(),
            children: Vec::new(),
            depth: Vec::new(),
            label_set: Vec::new(),
        };
        graph.insert(&file.root, None, 0)?;
        if graph.ids.is_empty() {
            return Err(TopicError::Empty);
        }
        let labels = if file.label_set.is_empty() {
            let top: Vec<String> = graph.children[0]
                .iter()
                .map(|&c| graph.ids[c].clone())
                .collect();
            if top.is_empty() {
                vec![graph.ids[0].clone()]
            } else {
                top
            }
        } else {
            file.label_set
        };
        for label in &labels {
            if !graph.index.contains_key(label) {
                return Err(TopicError::UnknownLabel(label.clone()));
            }
        }
        graph.label_set = labels;
        Ok(graph)
    }

    fn insert(
        &mut self,
        node: &TopicNode,
        parent: Option<usize>,
        depth: usize,
    ) -> Result<usize, TopicError> {
        if self.index.contains_key(&node.id) {
            return Err(TopicError::DuplicateId(node.id.clone()));
        }
        let idx = self.ids.len();
        self.ids.push(node.id.clone());
        self.names.push(node.name.clone());
        self.index.insert(node.id.clone(), idx);
        self.parent.push(parent);
        self.children.push(Vec::new());
        self.depth.push(depth);
        if let Some(p) = parent {
            self.children[p].push(idx);
        }
        for child in &node.children {
            self.insert(child, Some(idx), depth + 1)?;
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(|s| s.as_str())
    }

    pub fn name_of(&self, id: &str) -> Option<&str> {
        self.index.get(id).map(|&i| self.names[i].as_str())
    }

    /// The P classifier labels, in declaration order.
    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn label_count(&self) -> usize {
        self.label_set.len()
    }

    /// Position of `id` within the label set.
    pub fn label_index(&self, id: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == id)
    }

    /// Shortest-path distance in edge count between two topics (BFS).
    pub fn distance(&self, a: &str, b: &str) -> Result<usize, TopicError> {
        let &start = self
            .index
            .get(a)
            .ok_or_else(|| TopicError::UnknownId(a.to_string()))?;
        let &goal = self
            .index
            .get(b)
            .ok_or_else(|| TopicError::UnknownId(b.to_string()))?;
        if start == goal {
            return Ok(0);
        }
        let mut dist = vec![usize::MAX; self.ids.len()];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(cur) = queue.pop_front() {
            let mut neighbors: Vec<usize> = self.children[cur].clone();
            if let Some(p) = self.parent[cur] {
                neighbors.push(p);
            }
            for next in neighbors {
                if dist[next] == usize::MAX {
                    dist[next] = dist[cur] + 1;
                    if next == goal {
                        return Ok(dist[next]);
                    }
                    queue.push_back(next);
                }
            }
        }
        unreachable!("tree construction guarantees connectivity")
    }

    /// Tree distance via depths and the lowest common ancestor; used as an
    /// independent cross-check of [`TopicGraph::distance`].
    pub fn distance_via_lca(&self, a: &str, b: &str) -> Result<usize, TopicError> {
        let &ia = self
            .index
            .get(a)
            .ok_or_else(|| TopicError::UnknownId(a.to_string()))?;
        let &ib = self
            .index
            .get(b)
            .ok_or_else(|| TopicError::UnknownId(b.to_string()))?;
        let (mut x, mut y) = (ia, ib);
        while self.depth[x] > self.depth[y] {
            x = self.parent[x].expect("depth > 0 has a parent");
        }
        while self.depth[y] > self.depth[x] {
            y = self.parent[y].expect("depth > 0 has a parent");
        }
        while x != y {
            x = self.parent[x].expect("lca search stays rooted");
            y = self.parent[y].expect("lca search stays rooted");
        }
        Ok(self.depth[ia] + self.depth[ib] - 2 * self.depth[x])
    }

    /// All node ids within `radius` edges of `id` (including itself),
    /// sorted for determinism.
    pub fn within_radius(&self, id: &str, radius: usize) -> Result<Vec<String>, TopicError> {
        let &start = self
            .index
            .get(id)
            .ok_or_else(|| TopicError::UnknownId(id.to_string()))?;
        let mut dist: BTreeMap<usize, usize> = BTreeMap::new();
        dist.insert(start, 0);
        let mut queue = VecDeque::from([start]);
        while let Some(cur) = queue.pop_front() {
            if dist[&cur] == radius {
                continue;
            }
            let mut neighbors: Vec<usize> = self.children[cur].clone();
            if let Some(p) = self.parent[cur] {
                neighbors.push(p);
            }
            let next_dist = dist[&cur] + 1;
            for next in neighbors {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(next) {
                    e.insert(next_dist);
                    queue.push_back(next);
                }
            }
        }
        let mut out: Vec<String> = dist.keys().map(|&i| self.ids[i].clone()).collect();
        out.sort();
        Ok(out)
    }
}

/// The taxonomy shipped with the toolkit: the five evaluated top-level
/// categories, each with a few leaf topics. A six-area variant that adds
/// `dietary-advice` is available via [`default_taxonomy_six_areas`].
pub fn default_taxonomy() -> TaxonomyFile {
    serde_json::from_str(DEFAULT_TAXONOMY_JSON).expect("embedded taxonomy parses")
}

pub fn default_taxonomy_six_areas() -> TaxonomyFile {
    serde_json::from_str(SIX_AREA_TAXONOMY_JSON).expect("embedded taxonomy parses")
}

pub const DEFAULT_TAXONOMY_JSON: &str = include_str!("../data/taxonomy.json");
pub const SIX_AREA_TAXONOMY_JSON: &str = include_str!("../data/taxonomy_six_areas.json");
