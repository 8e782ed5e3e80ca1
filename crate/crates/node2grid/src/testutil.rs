//! In-crate test fixtures.

use ndarray::Array2;

use crate::graph::{Graph, Labels, NodeId, Splits};

pub(crate) fn zero_features(n: usize) -> Array2<f32> {
    Array2::zeros((n, 1))
}

pub(crate) fn single_labels(n: usize) -> Labels {
    Labels::Single { num_classes: 1, ids: vec![0; n] }
}

/// Graph with trivial features/labels, for topology-only tests.
pub(crate) fn bare(edges: &[(NodeId, NodeId)], n: usize) -> Graph {
    Graph::build(edges, zero_features(n), single_labels(n), Splits::default()).unwrap()
}

/// Graph over `n` nodes with the given edges and explicit feature rows.
pub(crate) fn with_features(edges: &[(NodeId, NodeId)], features: Array2<f32>) -> Graph {
    let n = features.nrows();
    Graph::build(edges, features, single_labels(n), Splits::default()).unwrap()
}

/// The worked six-node example: node 3 adjacent to 0,1,2,4; node 4 adjacent
/// to 5; extra edges 0-1, 0-2 fix the degree ranking. Three features per
/// node so grids have three channels.
pub(crate) fn six_node_example() -> Graph {
    let mut features = Array2::zeros((6, 3));
    for v in 0..6 {
        for c in 0..3 {
            features[[v, c]] = (v * 10 + c) as f32;
        }
    }
    with_features(&[(3, 0), (3, 1), (3, 2), (3, 4), (4, 5), (0, 1), (0, 2)], features)
}
