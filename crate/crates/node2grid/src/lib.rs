//! Uncoupled graph learning: map each node of a graph to an independent
//! fixed-size grid tensor, then train a small convolution + grid-level
//! attention network on the mapped samples.
//!
//! The pipeline has two halves:
//!
//! 1. **Mapping** ([`mapper`]): for every node, its one- and two-hop
//!    neighbors are ranked by degree, their feature vectors are stacked
//!    into a `k x 1 x f` grid (zero-padded), and the central node's
//!    features are blended in globally with a bias coefficient.
//!    Each node becomes an independent training sample, so mapping is
//!    embarrassingly parallel and happens once, up front.
//! 2. **Training** ([`nn`], [`optim`], [`train`]): a three-layer network
//!    (depthwise 1-D convolution, multi-head grid-level attention applied
//!    as an element-wise product with a residual add, two fully-connected
//!    layers) is trained with mini-batches over the mapped grids.
//!
//! [`graph`] holds the immutable compressed-adjacency graph, [`data`] the
//! on-disk dataset and report formats, [`synth`] a planted-partition
//! generator with class-clustered features for scaling experiments.

pub mod data;
pub mod graph;
pub mod mapper;
pub mod nn;
pub mod optim;
pub(crate) mod stream;
pub mod synth;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use data::{DatasetBundle, MetricsReport, SplitRole, TaskKind};
pub use graph::{Graph, Labels, NodeId, Splits};
pub use mapper::{GridSample, MapperConfig};
pub use nn::{ModelParams, NetConfig};
pub use optim::{LossConfig, OptimKind, OptimizerState};
pub use train::{AblationFlags, TrainConfig};


