//! Node-to-grid mapping: degree-ranked neighbor selection, grid padding,
//! and central-node fusion.
//!
//! Each node becomes one `k x 1 x f` sample (stored as a `k x f` matrix,
//! the singleton spatial column left implicit). Slots are filled with the
//! feature rows of the k highest-degree neighbors, first-order before
//! second-order, remaining slots zero. The central node's features are then
//! blended into every row:
//!
//! ```text
//! G = theta_bias * G_c + (1 - theta_bias) * G_n
//! ```
//!
//! where `G_c` broadcasts the central feature vector into all k rows.
//! Mapping is independent per node; [`map_all`] fans out over a worker pool
//! and is bit-identical to the sequential loop regardless of worker count.
//!
//! Mapped samples can be cached to disk in a fixed little-endian binary
//! format (magic `N2G1`) so the mapping step runs once per dataset.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::graph::{Graph, GraphError, Label, NodeId};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("grid height k must be >= 1")]
    InvalidK,
    #[error("theta_bias {0} outside [0, 1]")]
    InvalidTheta(f32),
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad grid cache: {0}")]
    BadCache(String),
}

/// Mapping hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapperConfig {
    /// Grid height: number of neighbor slots per sample.
    pub k: usize,
    /// Central-fusion coefficient in [0, 1]; 0 keeps pure neighbor grids,
    /// 1 keeps pure central-node grids.
    pub theta_bias: f32,
    /// When false, slots are filled from first-order neighbors only
    /// (the second-order ablation).
    pub include_second_order: bool,
}

impl MapperConfig {
    pub fn new(k: usize, theta_bias: f32) -> Self {
        MapperConfig { k, theta_bias, include_second_order: true }
    }

    fn validate(&self) -> Result<(), MapError> {
        if self.k == 0 {
            return Err(MapError::InvalidK);
        }
        if !self.theta_bias.is_finite() || !(0.0..=1.0).contains(&self.theta_bias) {
            return Err(MapError::InvalidTheta(self.theta_bias));
        }
        Ok(())
    }
}

/// One node's mapped grid plus its label: the uncoupled training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSample {
    pub node_id: NodeId,
    /// k x f, row i = slot i, column c = feature channel c.
    pub grid: Array2<f32>,
    pub label: Label,
}

/// Neighbor slots for `v`, in padding order: first-order neighbors by
/// degree descending, then second-order, truncated to `k`. Ties break by
/// ascending node id. Second-order neighbors are only enumerated when the
/// first-order set leaves free slots.
pub fn rank_neighbors(g: &Graph, v: NodeId, k: usize) -> Result<Vec<NodeId>, MapError> {
    rank_neighbors_with(g, v, k, true)
}

pub fn rank_neighbors_with(
    g: &Graph,
    v: NodeId,
    k: usize,
    include_second_order: bool,
) -> Result<Vec<NodeId>, MapError> {
    if k == 0 {
        return Err(MapError::InvalidK);
    }
    let mut order = g.first_order(v)?;
    sort_by_degree(g, &mut order);
    if order.len() < k && include_second_order {
        let mut second = g.second_order(v)?;
        sort_by_degree(g, &mut second);
        order.extend(second);
    }
    order.truncate(k);
    Ok(order)
}

fn sort_by_degree(g: &Graph, ids: &mut [NodeId]) {
    // Total order: degree descending, id ascending. Input comes in sorted
    // by id, but the comparator alone already decides every pair.
    ids.sort_unstable_by(|&a, &b| {
        g.degree_unchecked(b).cmp(&g.degree_unchecked(a)).then(a.cmp(&b))
    });
}

/// Stack the feature rows of `order` into a k x f grid, zero rows after.
pub fn build_neighbor_grid(g: &Graph, order: &[NodeId], cfg: &MapperConfig) -> Array2<f32> {
    let mut grid = Array2::zeros((cfg.k, g.feature_dim()));
    for (slot, &u) in order.iter().take(cfg.k).enumerate() {
        grid.row_mut(slot).assign(&g.feature_row(u));
    }
    grid
}

/// Blend the central node's features into every grid row:
/// `theta_bias * central + (1 - theta_bias) * neighbor_grid`.
pub fn central_fuse(
    neighbor_grid: &Array2<f32>,
    central: ArrayView1<'_, f32>,
    theta_bias: f32,
) -> Result<Array2<f32>, MapError> {
    if !theta_bias.is_finite() || !(0.0..=1.0).contains(&theta_bias) {
        return Err(MapError::InvalidTheta(theta_bias));
    }
    if neighbor_grid.iter().any(|x| !x.is_finite()) {
        return Err(MapError::NonFinite { context: "neighbor grid" });
    }
    if central.iter().any(|x| !x.is_finite()) {
        return Err(MapError::NonFinite { context: "central features" });
    }
    let mut grid = neighbor_grid * (1.0 - theta_bias);
    if theta_bias != 0.0 {
        for mut row in grid.rows_mut() {
            row.scaled_add(theta_bias, &central);
        }
    }
    Ok(grid)
}

/// Map one node to its grid sample.
pub fn map_node(g: &Graph, v: NodeId, cfg: &MapperConfig) -> Result<GridSample, MapError> {
    cfg.validate()?;
    let order = rank_neighbors_with(g, v, cfg.k, cfg.include_second_order)?;
    let neighbor_grid = build_neighbor_grid(g, &order, cfg);
    let grid = central_fuse(&neighbor_grid, g.feature_row(v), cfg.theta_bias)?;
    Ok(GridSample { node_id: v, grid, label: g.labels().of(v) })
}

/// Map a set of nodes, in the order given. Work is split across the rayon
/// pool; each sample lands in its own output slot, so the result matches a
/// sequential [`map_node`] loop exactly.
pub fn map_all(g: &Graph, ids: &[NodeId], cfg: &MapperConfig) -> Result<Vec<GridSample>, MapError> {
    cfg.validate()?;
    ids.par_iter().map(|&v| map_node(g, v, cfg)).collect()
}

/// Bytes one cached sample occupies on disk.
fn record_len(k: usize, f: usize, label_arity: u32) -> usize {
    4 + label_payload_len(label_arity) + k * f * 4
}

fn label_payload_len(label_arity: u32) -> usize {
    if label_arity <= 1 {
        4
    } else {
        label_arity as usize
    }
}

/// Grid cache header: magic `N2G1`, then k, f, sample count, label arity
/// as 4-byte little-endian integers. Arity 1 means a single class id per
/// sample (u32 payload); arity C > 1 means C binary flags (one byte each).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCacheHeader {
    pub k: u32,
    pub f: u32,
    pub count: u32,
    pub label_arity: u32,
}

const CACHE_MAGIC: &[u8; 4] = b"N2G1";

/// Write mapped samples to a cache file. All grids must be k x f and every
/// label must match `label_arity`.
pub fn write_grid_cache(
    path: &Path,
    samples: &[GridSample],
    k: usize,
    f: usize,
    label_arity: u32,
) -> Result<(), MapError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    for v in [k as u32, f as u32, samples.len() as u32, label_arity] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        if s.grid.dim() != (k, f) {
            return Err(MapError::BadCache(format!(
                "sample {} grid is {:?}, cache is {}x{}",
                s.node_id,
                s.grid.dim(),
                k,
                f
            )));
        }
        w.write_all(&s.node_id.to_le_bytes())?;
        match (&s.label, label_arity) {
            (Label::Single(id), 1) => w.write_all(&id.to_le_bytes())?,
            (Label::Multi(flags), c) if flags.len() == c as usize && c > 1 => {
                w.write_all(flags)?;
            }
            _ => {
                return Err(MapError::BadCache(format!(
                    "sample {} label does not match arity {}",
                    s.node_id, label_arity
                )))
            }
        }
        for &x in s.grid.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a cache file back. Bit-exact inverse of [`write_grid_cache`].
pub fn read_grid_cache(path: &Path) -> Result<(GridCacheHeader, Vec<GridSample>), MapError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(MapError::BadCache(format!("bad magic {:02x?}", magic)));
    }
    let mut fields = [0u32; 4];
    for v in fields.iter_mut() {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        *v = u32::from_le_bytes(word);
    }
    let header =
        GridCacheHeader { k: fields[0], f: fields[1], count: fields[2], label_arity: fields[3] };
    let (k, f) = (header.k as usize, header.f as usize);

    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let expect = header.count as usize * record_len(k, f, header.label_arity);
    if body.len() != expect {
        return Err(MapError::BadCache(format!(
            "expected {} record bytes, found {}",
            expect,
            body.len()
        )));
    }

    let mut samples = Vec::with_capacity(header.count as usize);
    let mut at = 0usize;
    let mut take = |n: usize| {
        let s = &body[at..at + n];
        at += n;
        s
    };
    for _ in 0..header.count {
        let node_id = u32::from_le_bytes(take(4).try_into().unwrap());
        let label = if header.label_arity <= 1 {
            Label::Single(u32::from_le_bytes(take(4).try_into().unwrap()))
        } else {
            Label::Multi(take(header.label_arity as usize).to_vec())
        };
        let mut grid = Array2::zeros((k, f));
        for x in grid.iter_mut() {
            *x = f32::from_le_bytes(take(4).try_into().unwrap());
        }
        samples.push(GridSample { node_id, grid, label });
    }
    Ok((header, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{six_node_example, with_features};
    use ndarray::array;

    #[test]
    fn ranking_on_the_six_node_example() {
        let g = six_node_example();
        // Degrees: 0 -> 3, 1 -> 2, 2 -> 2, 3 -> 4, 4 -> 2, 5 -> 1.
        let order = rank_neighbors(&g, 3, 8).unwrap();
        assert_eq!(order, vec![0, 1, 2, 4, 5]);
        // Without second order only N1 fills slots.
        let order = rank_neighbors_with(&g, 3, 8, false).unwrap();
        assert_eq!(order, vec![0, 1, 2, 4]);
        // k inside N1: second order never consulted, list truncated.
        let order = rank_neighbors(&g, 3, 2).unwrap();
        assert_eq!(order, vec![0, 1]);
    }

    #[test]
    fn k_zero_rejected_k_one_keeps_single_neighbor() {
        let g = six_node_example();
        assert!(matches!(rank_neighbors(&g, 5, 0), Err(MapError::InvalidK)));
        assert_eq!(rank_neighbors(&g, 5, 1).unwrap(), vec![4]);
    }

    #[test]
    fn grid_rows_follow_order_then_zero_pad() {
        let g = six_node_example();
        let cfg = MapperConfig::new(8, 0.0);
        let order = rank_neighbors(&g, 3, 8).unwrap();
        let grid = build_neighbor_grid(&g, &order, &cfg);
        assert_eq!(grid.dim(), (8, 3));
        for (slot, &u) in order.iter().enumerate() {
            assert_eq!(grid.row(slot), g.feature_row(u));
        }
        for slot in order.len()..8 {
            assert!(grid.row(slot).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn empty_order_gives_all_zero_grid() {
        let g = six_node_example();
        let cfg = MapperConfig::new(4, 0.0);
        let grid = build_neighbor_grid(&g, &[], &cfg);
        assert!(grid.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fusion_endpoints_and_midpoint() {
        let g_n = array![[1.0_f32, 2.0], [0.0, 4.0]];
        let central = array![10.0_f32, 20.0];

        let at0 = central_fuse(&g_n, central.view(), 0.0).unwrap();
        assert_eq!(at0, g_n);

        let at1 = central_fuse(&g_n, central.view(), 1.0).unwrap();
        for row in at1.rows() {
            assert_eq!(row, central.view());
        }

        let mid = central_fuse(&g_n, central.view(), 0.5).unwrap();
        for i in 0..2 {
            for c in 0..2 {
                assert_eq!(mid[[i, c]], 0.5 * (at0[[i, c]] + at1[[i, c]]));
            }
        }
    }

    #[test]
    fn fusion_rejects_bad_inputs() {
        let g_n = array![[1.0_f32]];
        let central = array![1.0_f32];
        assert!(matches!(
            central_fuse(&g_n, central.view(), 1.5),
            Err(MapError::InvalidTheta(_))
        ));
        let bad = array![[f32::NAN]];
        assert!(matches!(
            central_fuse(&bad, central.view(), 0.5),
            Err(MapError::NonFinite { .. })
        ));
    }

    #[test]
    fn map_node_is_deterministic_and_local() {
        let g = six_node_example();
        let cfg = MapperConfig::new(8, 0.4);
        let a = map_node(&g, 3, &cfg).unwrap();
        let b = map_node(&g, 3, &cfg).unwrap();
        assert_eq!(a, b);

        // Changing a node outside {v} U N1 U N2 must not move the sample.
        // For v = 5: N1 = {4}, N2 = {3}; node 0 is outside.
        let sample_before = map_node(&g, 5, &cfg).unwrap();
        let mut features = g.features().clone();
        features[[0, 0]] = 999.0;
        let g2 = with_features(&[(3, 0), (3, 1), (3, 2), (3, 4), (4, 5), (0, 1), (0, 2)], features);
        let sample_after = map_node(&g2, 5, &cfg).unwrap();
        assert_eq!(sample_before, sample_after);
    }

    #[test]
    fn map_all_matches_sequential_and_singleton() {
        let g = six_node_example();
        let cfg = MapperConfig::new(4, 0.3);
        let ids: Vec<u32> = (0..6).collect();
        let parallel = map_all(&g, &ids, &cfg).unwrap();
        for (&v, got) in ids.iter().zip(&parallel) {
            assert_eq!(*got, map_node(&g, v, &cfg).unwrap());
        }
        let single = map_all(&g, &[2], &cfg).unwrap();
        assert_eq!(single[0], map_node(&g, 2, &cfg).unwrap());
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let g = six_node_example();
        let cfg = MapperConfig::new(5, 0.25);
        let samples = map_all(&g, &[0, 3, 5], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grids.n2g");
        write_grid_cache(&path, &samples, 5, 3, 1).unwrap();
        let (header, back) = read_grid_cache(&path).unwrap();
        assert_eq!(header, GridCacheHeader { k: 5, f: 3, count: 3, label_arity: 1 });
        assert_eq!(back, samples);
    }

    #[test]
    fn cache_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grids.n2g");
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(read_grid_cache(&path), Err(MapError::BadCache(_)) | Err(MapError::Io(_))));
    }
}
