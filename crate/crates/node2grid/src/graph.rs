//! Immutable graph storage with O(1) degree lookup and one-/two-hop
//! neighbor enumeration.
//!
//! Adjacency is kept in compressed-offsets form: `offsets[v]..offsets[v+1]`
//! indexes into a flat, per-node-sorted neighbor array. Construction
//! symmetrizes the input edge list and drops self-loops and duplicates, so
//! `degree` has a single deterministic meaning. After construction a graph
//! never changes; it can be read from any number of workers.

use ndarray::Array2;
use thiserror::Error;

/// Dense node identifier in `0..node_count`.
pub type NodeId = u32;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node id {id} out of range (graph has {node_count} nodes)")]
    NodeOutOfRange { id: u64, node_count: usize },
    #[error("label count {labels} does not match node count {nodes}")]
    LabelCountMismatch { labels: usize, nodes: usize },
    #[error("node {node}: class id {class} out of range (num_classes {num_classes})")]
    ClassOutOfRange { node: NodeId, class: u32, num_classes: u32 },
    #[error("node {node} appears in more than one split")]
    SplitOverlap { node: NodeId },
}

/// Per-node labels: either one class id per node or a C-length binary
/// indicator row per node.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Single { num_classes: u32, ids: Vec<u32> },
    /// `flags` is node_count x num_classes, row-major, values 0/1.
    Multi { num_classes: u32, flags: Vec<u8> },
}

impl Labels {
    pub fn num_classes(&self) -> u32 {
        match self {
            Labels::Single { num_classes, .. } | Labels::Multi { num_classes, .. } => *num_classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Single { ids, .. } => ids.len(),
            Labels::Multi { num_classes, flags } => flags.len() / (*num_classes as usize).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Label payload for one node, copied out as the per-sample label.
    pub fn of(&self, v: NodeId) -> Label {
        match self {
            Labels::Single { ids, .. } => Label::Single(ids[v as usize]),
            Labels::Multi { num_classes, flags } => {
                let c = *num_classes as usize;
                let base = v as usize * c;
                Label::Multi(flags[base..base + c].to_vec())
            }
        }
    }

    fn validate(&self, node_count: usize) -> Result<(), GraphError> {
        match self {
            Labels::Single { num_classes, ids } => {
                if ids.len() != node_count {
                    return Err(GraphError::LabelCountMismatch { labels: ids.len(), nodes: node_count });
                }
                for (v, &id) in ids.iter().enumerate() {
                    if id >= *num_classes {
                        return Err(GraphError::ClassOutOfRange {
                            node: v as NodeId,
                            class: id,
                            num_classes: *num_classes,
                        });
                    }
                }
            }
            Labels::Multi { num_classes, flags } => {
                let c = *num_classes as usize;
                if c == 0 || flags.len() != node_count * c {
                    return Err(GraphError::LabelCountMismatch {
                        labels: if c == 0 { 0 } else { flags.len() / c },
                        nodes: node_count,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One node's label, as attached to a mapped sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Single(u32),
    Multi(Vec<u8>),
}

/// Disjoint train/validation/test node-id sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<NodeId>,
    pub val: Vec<NodeId>,
    pub test: Vec<NodeId>,
}

impl Splits {
    fn validate(&self, node_count: usize) -> Result<(), GraphError> {
        let mut seen = vec![false; node_count];
        for &v in self.train.iter().chain(&self.val).chain(&self.test) {
            if v as usize >= node_count {
                return Err(GraphError::NodeOutOfRange { id: v as u64, node_count });
            }
            if seen[v as usize] {
                return Err(GraphError::SplitOverlap { node: v });
            }
            seen[v as usize] = true;
        }
        Ok(())
    }
}

/// Immutable undirected graph in compressed adjacency form, with dense
/// node features, labels, and split masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<NodeId>,
    features: Array2<f32>,
    labels: Labels,
    splits: Splits,
}

impl Graph {
    /// Build a graph from an arbitrary edge list. Edges are symmetrized;
    /// self-loops and duplicates are dropped. The node count is the feature
    /// matrix row count.
    pub fn build(
        edges: &[(NodeId, NodeId)],
        features: Array2<f32>,
        labels: Labels,
        splits: Splits,
    ) -> Result<Self, GraphError> {
        let node_count = features.nrows();
        labels.validate(node_count)?;
        splits.validate(node_count)?;

        let mut pairs = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            if u as usize >= node_count || v as usize >= node_count {
                let id = u.max(v) as u64;
                return Err(GraphError::NodeOutOfRange { id, node_count });
            }
            if u != v {
                pairs.push((u, v));
                pairs.push((v, u));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut offsets = vec![0usize; node_count + 1];
        for &(u, _) in &pairs {
            offsets[u as usize + 1] += 1;
        }
        for i in 0..node_count {
            offsets[i + 1] += offsets[i];
        }
        let neighbors = pairs.into_iter().map(|(_, v)| v).collect();

        Ok(Graph { offsets, neighbors, features, labels, splits })
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Total undirected edge count (each edge counted once).
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn feature_row(&self, v: NodeId) -> ndarray::ArrayView1<'_, f32> {
        self.features.row(v as usize)
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    fn check(&self, v: NodeId) -> Result<(), GraphError> {
        if (v as usize) < self.node_count() {
            Ok(())
        } else {
            Err(GraphError::NodeOutOfRange { id: v as u64, node_count: self.node_count() })
        }
    }

    /// Sorted neighbor ids of `v`.
    pub fn neighbors(&self, v: NodeId) -> Result<&[NodeId], GraphError> {
        self.check(v)?;
        Ok(self.neighbors_unchecked(v))
    }

    #[inline]
    pub(crate) fn neighbors_unchecked(&self, v: NodeId) -> &[NodeId] {
        &self.neighbors[self.offsets[v as usize]..self.offsets[v as usize + 1]]
    }

    pub fn degree(&self, v: NodeId) -> Result<usize, GraphError> {
        self.check(v)?;
        Ok(self.degree_unchecked(v))
    }

    #[inline]
    pub(crate) fn degree_unchecked(&self, v: NodeId) -> usize {
        self.offsets[v as usize + 1] - self.offsets[v as usize]
    }

    /// First-order neighborhood of `v` (one hop), sorted ascending.
    pub fn first_order(&self, v: NodeId) -> Result<Vec<NodeId>, GraphError> {
        Ok(self.neighbors(v)?.to_vec())
    }

    /// Second-order neighborhood of `v`: nodes exactly two hops away,
    /// excluding `v` itself and everything in `first_order(v)`. Sorted
    /// ascending.
    pub fn second_order(&self, v: NodeId) -> Result<Vec<NodeId>, GraphError> {
        self.check(v)?;
        let n1 = self.neighbors_unchecked(v);
        let mut out: Vec<NodeId> = Vec::new();
        for &u in n1 {
            out.extend_from_slice(self.neighbors_unchecked(u));
        }
        out.sort_unstable();
        out.dedup();
        out.retain(|&w| w != v && n1.binary_search(&w).is_err());
        Ok(out)
    }
}
