//! On-disk dataset format, metrics reports, and process memory probes.
//!
//! A dataset directory holds:
//!
//! ```text
//! meta.tsv            key<TAB>value: name, task, nodes, features, classes, labels
//! edges.tsv           one "u<TAB>v" per line
//! features.bin        16-byte header (magic N2GF, rows, cols, reserved; u32 LE)
//!                     then rows*cols f32 LE row-major  — or features.tsv:
//! features.tsv        node-id then f values per line
//! labels.tsv          node-id<TAB>class  (single-label)
//!                     node-id<TAB>c1,c2,...  (multi-label, may be empty)
//! splits.tsv          node-id<TAB>{train|val|test}
//! ```
//!
//! Inductive datasets replace the graph files with `train/`, `val/`,
//! `test/` subdirectories in the same layout (splits.tsv optional there:
//! a subgraph's nodes default to its own role), keeping test-graph nodes
//! structurally absent from the training graph.

use ndarray::Array2;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::graph::{Graph, GraphError, Labels, NodeId, Splits};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: io error: {source}")]
    Io { file: PathBuf, source: std::io::Error },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {msg}")]
    Malformed { file: PathBuf, line: usize, msg: String },
    #[error("meta mismatch: {0}")]
    MetaMismatch(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn io_err(file: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { file: file.to_path_buf(), source }
}

fn malformed(file: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Malformed { file: file.to_path_buf(), line, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Transductive,
    Inductive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// A loaded dataset: one graph for transductive tasks, or separate
/// train/val/test graphs for inductive tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub task: TaskKind,
    pub num_classes: u32,
    pub feature_dim: usize,
    pub graph: Graph,
    pub val_graph: Option<Graph>,
    pub test_graph: Option<Graph>,
}

impl DatasetBundle {
    pub fn transductive(name: impl Into<String>, graph: Graph) -> Self {
        DatasetBundle {
            name: name.into(),
            task: TaskKind::Transductive,
            num_classes: graph.labels().num_classes(),
            feature_dim: graph.feature_dim(),
            graph,
            val_graph: None,
            test_graph: None,
        }
    }

    /// Graph and sample ids used for one split. Transductive tasks draw
    /// every split from the single full graph; inductive tasks use each
    /// split's own graph and adjacency.
    pub fn samples_for(&self, role: SplitRole) -> (&Graph, &[NodeId]) {
        match self.task {
            TaskKind::Transductive => {
                let ids = match role {
                    SplitRole::Train => &self.graph.splits().train,
                    SplitRole::Val => &self.graph.splits().val,
                    SplitRole::Test => &self.graph.splits().test,
                };
                (&self.graph, ids)
            }
            TaskKind::Inductive => match role {
                SplitRole::Train => (&self.graph, &self.graph.splits().train),
                SplitRole::Val => {
                    let g = self.val_graph.as_ref().expect("inductive bundle has val graph");
                    (g, &g.splits().val)
                }
                SplitRole::Test => {
                    let g = self.test_graph.as_ref().expect("inductive bundle has test graph");
                    (g, &g.splits().test)
                }
            },
        }
    }

    pub fn is_multilabel(&self) -> bool {
        matches!(self.graph.labels(), Labels::Multi { .. })
    }
}

struct Meta {
    name: String,
    task: TaskKind,
    nodes: usize,
    features: usize,
    classes: u32,
    multilabel: bool,
}

fn read_meta(dir: &Path) -> Result<Meta, DataError> {
    let path = dir.join("meta.tsv");
    if !path.exists() {
        return Err(DataError::MissingFile(path));
    }
    let content = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut name = None;
    let mut task = None;
    let mut nodes = None;
    let mut features = None;
    let mut classes = None;
    let mut labels = None;
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('\t')
            .ok_or_else(|| malformed(&path, line_no, "expected key<TAB>value"))?;
        match key {
            "name" => name = Some(value.to_string()),
            "task" => {
                task = Some(match value {
                    "transductive" => TaskKind::Transductive,
                    "inductive" => TaskKind::Inductive,
                    other => {
                        return Err(malformed(&path, line_no, format!("unknown task '{other}'")))
                    }
                })
            }
            "nodes" | "features" | "classes" => {
                let v: usize = value
                    .parse()
                    .map_err(|_| malformed(&path, line_no, format!("bad integer '{value}'")))?;
                match key {
                    "nodes" => nodes = Some(v),
                    "features" => features = Some(v),
                    _ => classes = Some(v as u32),
                }
            }
            "labels" => {
                labels = Some(match value {
                    "single" => false,
                    "multi" => true,
                    other => {
                        return Err(malformed(&path, line_no, format!("unknown labels '{other}'")))
                    }
                })
            }
            other => return Err(malformed(&path, line_no, format!("unknown key '{other}'"))),
        }
    }
    let missing = |k: &str| malformed(&path, 0, format!("missing key '{k}'"));
    Ok(Meta {
        name: name.ok_or_else(|| missing("name"))?,
        task: task.ok_or_else(|| missing("task"))?,
        nodes: nodes.ok_or_else(|| missing("nodes"))?,
        features: features.ok_or_else(|| missing("features"))?,
        classes: classes.ok_or_else(|| missing("classes"))?,
        multilabel: labels.ok_or_else(|| missing("labels"))?,
    })
}

const FEATURES_MAGIC: &[u8; 4] = b"N2GF";

fn read_features_bin(path: &Path) -> Result<Array2<f32>, DataError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(io_err(path))?;
    if &header[0..4] != FEATURES_MAGIC {
        return Err(malformed(path, 0, "bad magic"));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut body = vec![0u8; rows * cols * 4];
    r.read_exact(&mut body).map_err(io_err(path))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io_err(path))? != 0 {
        return Err(malformed(path, 0, "trailing bytes after feature payload"));
    }
    let values: Vec<f32> =
        body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| malformed(path, 0, format!("shape error: {e}")))
}

fn write_features_bin(path: &Path, features: &Array2<f32>) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut run = || -> std::io::Result<()> {
        w.write_all(FEATURES_MAGIC)?;
        w.write_all(&(features.nrows() as u32).to_le_bytes())?;
        w.write_all(&(features.ncols() as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for &x in features.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    };
    run().map_err(io_err(path))
}

/// Read one `node-id<TAB>payload` file covering every node exactly once.
fn read_per_node<T>(
    path: &Path,
    node_count: usize,
    mut parse: impl FnMut(&Path, usize, &str) -> Result<T, DataError>,
) -> Result<Vec<T>, DataError>
where
    T: Clone,
{
    let file = File::open(path).map_err(io_err(path))?;
    let mut out: Vec<Option<T>> = vec![None; node_count];
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id_str, rest) = line
            .split_once('\t')
            .ok_or_else(|| malformed(path, line_no, "expected node-id<TAB>..."))?;
        let id: usize = id_str
            .parse()
            .map_err(|_| malformed(path, line_no, format!("bad node id '{id_str}'")))?;
        if id >= node_count {
            return Err(malformed(path, line_no, format!("node id {id} >= {node_count}")));
        }
        if out[id].is_some() {
            return Err(malformed(path, line_no, format!("duplicate entry for node {id}")));
        }
        out[id] = Some(parse(path, line_no, rest)?);
    }
    out.into_iter()
        .enumerate()
        .map(|(id, v)| v.ok_or_else(|| malformed(path, 0, format!("no entry for node {id}"))))
        .collect()
}

fn read_features_tsv(path: &Path, node_count: usize, dim: usize) -> Result<Array2<f32>, DataError> {
    let rows = read_per_node(path, node_count, |path, line_no, rest| {
        let values: Result<Vec<f32>, _> = rest.split('\t').map(str::parse).collect();
        let values =
            values.map_err(|e| malformed(path, line_no, format!("bad feature value: {e}")))?;
        if values.len() != dim {
            return Err(malformed(
                path,
                line_no,
                format!("{} features, expected {dim}", values.len()),
            ));
        }
        Ok(values)
    })?;
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((node_count, dim), flat).expect("validated shape"))
}

fn read_edges(path: &Path) -> Result<Vec<(NodeId, NodeId)>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut edges = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let (u, v) = line
            .split_once('\t')
            .ok_or_else(|| malformed(path, line_no, "expected u<TAB>v"))?;
        let u: NodeId =
            u.parse().map_err(|_| malformed(path, line_no, format!("bad node id '{u}'")))?;
        let v: NodeId =
            v.trim().parse().map_err(|_| malformed(path, line_no, format!("bad node id '{v}'")))?;
        edges.push((u, v));
    }
    Ok(edges)
}

fn read_labels(
    path: &Path,
    node_count: usize,
    classes: u32,
    multi: bool,
) -> Result<Labels, DataError> {
    if multi {
        let rows = read_per_node(path, node_count, |path, line_no, rest| {
            let mut flags = vec![0u8; classes as usize];
            let rest = rest.trim();
            if !rest.is_empty() {
                for part in rest.split(',') {
                    let c: u32 = part
                        .trim()
                        .parse()
                        .map_err(|_| malformed(path, line_no, format!("bad class id '{part}'")))?;
                    if c >= classes {
                        return Err(malformed(path, line_no, format!("class {c} >= {classes}")));
                    }
                    flags[c as usize] = 1;
                }
            }
            Ok(flags)
        })?;
        Ok(Labels::Multi { num_classes: classes, flags: rows.into_iter().flatten().collect() })
    } else {
        let ids = read_per_node(path, node_count, |path, line_no, rest| {
            rest.trim()
                .parse::<u32>()
                .map_err(|_| malformed(path, line_no, format!("bad class id '{rest}'")))
        })?;
        Ok(Labels::Single { num_classes: classes, ids })
    }
}

fn read_splits(path: &Path, node_count: usize) -> Result<Splits, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut splits = Splits::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, role) = line
            .split_once('\t')
            .ok_or_else(|| malformed(path, line_no, "expected node-id<TAB>role"))?;
        let id: NodeId =
            id.parse().map_err(|_| malformed(path, line_no, format!("bad node id '{id}'")))?;
        if id as usize >= node_count {
            return Err(malformed(path, line_no, format!("node id {id} >= {node_count}")));
        }
        match role.trim() {
            "train" => splits.train.push(id),
            "val" => splits.val.push(id),
            "test" => splits.test.push(id),
            other => return Err(malformed(path, line_no, format!("unknown role '{other}'"))),
        }
    }
    Ok(splits)
}

/// Load the graph files inside `dir`. When `default_role` is given and
/// splits.tsv is absent, every node is assigned that role.
fn load_graph_dir(
    dir: &Path,
    nodes: usize,
    features: usize,
    classes: u32,
    multi: bool,
    default_role: Option<SplitRole>,
) -> Result<Graph, DataError> {
    let bin = dir.join("features.bin");
    let feature_matrix = if bin.exists() {
        let m = read_features_bin(&bin)?;
        if m.dim() != (nodes, features) {
            return Err(DataError::MetaMismatch(format!(
                "{}: features are {:?}, meta declares {}x{}",
                bin.display(),
                m.dim(),
                nodes,
                features
            )));
        }
        m
    } else {
        let tsv = dir.join("features.tsv");
        if !tsv.exists() {
            return Err(DataError::MissingFile(tsv));
        }
        read_features_tsv(&tsv, nodes, features)?
    };

    let edges_path = dir.join("edges.tsv");
    if !edges_path.exists() {
        return Err(DataError::MissingFile(edges_path));
    }
    let edges = read_edges(&edges_path)?;
    let labels = read_labels(&dir.join("labels.tsv"), nodes, classes, multi)?;

    let splits_path = dir.join("splits.tsv");
    let splits = if splits_path.exists() {
        read_splits(&splits_path, nodes)?
    } else if let Some(role) = default_role {
        let all: Vec<NodeId> = (0..nodes as NodeId).collect();
        match role {
            SplitRole::Train => Splits { train: all, ..Splits::default() },
            SplitRole::Val => Splits { val: all, ..Splits::default() },
            SplitRole::Test => Splits { test: all, ..Splits::default() },
        }
    } else {
        return Err(DataError::MissingFile(splits_path));
    };

    Ok(Graph::build(&edges, feature_matrix, labels, splits)?)
}

/// Load a dataset directory, validating every count the metadata declares.
pub fn load_dataset(dir: &Path) -> Result<DatasetBundle, DataError> {
    let meta = read_meta(dir)?;
    let bundle = match meta.task {
        TaskKind::Transductive => {
            let graph =
                load_graph_dir(dir, meta.nodes, meta.features, meta.classes, meta.multilabel, None)?;
            DatasetBundle {
                name: meta.name.clone(),
                task: TaskKind::Transductive,
                num_classes: meta.classes,
                feature_dim: meta.features,
                graph,
                val_graph: None,
                test_graph: None,
            }
        }
        TaskKind::Inductive => {
            let mut graphs = Vec::new();
            let mut total = 0usize;
            for (sub, role) in
                [("train", SplitRole::Train), ("val", SplitRole::Val), ("test", SplitRole::Test)]
            {
                let sub_dir = dir.join(sub);
                let sub_meta = read_meta(&sub_dir)?;
                if sub_meta.features != meta.features || sub_meta.classes != meta.classes {
                    return Err(DataError::MetaMismatch(format!(
                        "{sub} subgraph declares f={} C={}, dataset has f={} C={}",
                        sub_meta.features, sub_meta.classes, meta.features, meta.classes
                    )));
                }
                total += sub_meta.nodes;
                graphs.push(load_graph_dir(
                    &sub_dir,
                    sub_meta.nodes,
                    meta.features,
                    meta.classes,
                    meta.multilabel,
                    Some(role),
                )?);
            }
            if total != meta.nodes {
                return Err(DataError::MetaMismatch(format!(
                    "subgraphs hold {total} nodes, meta declares {}",
                    meta.nodes
                )));
            }
            let test_graph = graphs.pop();
            let val_graph = graphs.pop();
            let graph = graphs.pop().expect("three subgraphs");
            DatasetBundle {
                name: meta.name.clone(),
                task: TaskKind::Inductive,
                num_classes: meta.classes,
                feature_dim: meta.features,
                graph,
                val_graph,
                test_graph,
            }
        }
    };
    validate_counts(&bundle)?;
    validate_known(&bundle)?;
    Ok(bundle)
}

fn validate_counts(bundle: &DatasetBundle) -> Result<(), DataError> {
    let check = |g: &Graph| -> Result<(), DataError> {
        if g.feature_dim() != bundle.feature_dim {
            return Err(DataError::MetaMismatch(format!(
                "graph feature dim {} != dataset {}",
                g.feature_dim(),
                bundle.feature_dim
            )));
        }
        if g.labels().num_classes() != bundle.num_classes {
            return Err(DataError::MetaMismatch("class count mismatch".into()));
        }
        Ok(())
    };
    check(&bundle.graph)?;
    if let Some(g) = &bundle.val_graph {
        check(g)?;
    }
    if let Some(g) = &bundle.test_graph {
        check(g)?;
    }
    Ok(())
}

/// Shape expectations for the benchmark datasets; catches conversion slips
/// the moment a known dataset loads.
fn validate_known(bundle: &DatasetBundle) -> Result<(), DataError> {
    struct Known {
        name: &'static str,
        nodes: usize,
        features: usize,
        classes: u32,
        splits: (usize, usize, usize),
    }
    const KNOWN: &[Known] = &[
        Known { name: "cora", nodes: 2708, features: 1433, classes: 7, splits: (140, 500, 1000) },
        Known { name: "citeseer", nodes: 3327, features: 3703, classes: 6, splits: (120, 500, 1000) },
        Known { name: "pubmed", nodes: 19717, features: 500, classes: 3, splits: (60, 500, 1000) },
    ];
    for k in KNOWN {
        if bundle.name.eq_ignore_ascii_case(k.name) {
            let g = &bundle.graph;
            let got = (g.splits().train.len(), g.splits().val.len(), g.splits().test.len());
            if g.node_count() != k.nodes
                || g.feature_dim() != k.features
                || bundle.num_classes != k.classes
                || got != k.splits
            {
                return Err(DataError::MetaMismatch(format!(
                    "{}: expected {} nodes / {} features / {} classes / splits {:?}, \
                     got {} / {} / {} / {:?}",
                    k.name,
                    k.nodes,
                    k.features,
                    k.classes,
                    k.splits,
                    g.node_count(),
                    g.feature_dim(),
                    bundle.num_classes,
                    got
                )));
            }
        }
    }
    if bundle.name.eq_ignore_ascii_case("ppi") {
        let train = bundle.graph.node_count();
        let val = bundle.val_graph.as_ref().map(Graph::node_count).unwrap_or(0);
        let test = bundle.test_graph.as_ref().map(Graph::node_count).unwrap_or(0);
        if bundle.feature_dim != 50
            || bundle.num_classes != 121
            || (train, val, test) != (44906, 6514, 5524)
        {
            return Err(DataError::MetaMismatch(format!(
                "ppi: expected f=50 C=121 splits (44906, 6514, 5524), got f={} C={} splits {:?}",
                bundle.feature_dim,
                bundle.num_classes,
                (train, val, test)
            )));
        }
    }
    Ok(())
}

fn write_graph_dir(
    dir: &Path,
    g: &Graph,
    binary_features: bool,
    with_splits: bool,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let edges_path = dir.join("edges.tsv");
    let mut out = String::new();
    for v in 0..g.node_count() as NodeId {
        for &u in g.neighbors(v).expect("in range") {
            if v < u {
                writeln!(out, "{v}\t{u}").unwrap();
            }
        }
    }
    fs::write(&edges_path, out).map_err(io_err(&edges_path))?;

    if binary_features {
        write_features_bin(&dir.join("features.bin"), g.features())?;
    } else {
        let path = dir.join("features.tsv");
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        let mut run = || -> std::io::Result<()> {
            for (v, row) in g.features().rows().into_iter().enumerate() {
                write!(w, "{v}")?;
                for x in row.iter() {
                    write!(w, "\t{x}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        run().map_err(io_err(&path))?;
    }

    let labels_path = dir.join("labels.tsv");
    let mut out = String::new();
    match g.labels() {
        Labels::Single { ids, .. } => {
            for (v, id) in ids.iter().enumerate() {
                writeln!(out, "{v}\t{id}").unwrap();
            }
        }
        Labels::Multi { num_classes, flags } => {
            let c = *num_classes as usize;
            for v in 0..g.node_count() {
                let row = &flags[v * c..(v + 1) * c];
                let classes: Vec<String> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &f)| f != 0)
                    .map(|(i, _)| i.to_string())
                    .collect();
                writeln!(out, "{v}\t{}", classes.join(",")).unwrap();
            }
        }
    }
    fs::write(&labels_path, out).map_err(io_err(&labels_path))?;

    if with_splits {
        let path = dir.join("splits.tsv");
        let mut out = String::new();
        for (ids, role) in
            [(&g.splits().train, "train"), (&g.splits().val, "val"), (&g.splits().test, "test")]
        {
            for &v in ids.iter() {
                writeln!(out, "{v}\t{role}").unwrap();
            }
        }
        fs::write(&path, out).map_err(io_err(&path))?;
    }
    Ok(())
}

fn write_meta(
    path: &Path,
    name: &str,
    task: TaskKind,
    nodes: usize,
    features: usize,
    classes: u32,
    multi: bool,
) -> Result<(), DataError> {
    let task = match task {
        TaskKind::Transductive => "transductive",
        TaskKind::Inductive => "inductive",
    };
    let labels = if multi { "multi" } else { "single" };
    let content = format!(
        "name\t{name}\ntask\t{task}\nnodes\t{nodes}\nfeatures\t{features}\nclasses\t{classes}\nlabels\t{labels}\n"
    );
    fs::write(path, content).map_err(io_err(path))
}

/// Write a dataset in the canonical directory layout.
pub fn save_dataset(
    bundle: &DatasetBundle,
    dir: &Path,
    binary_features: bool,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let multi = bundle.is_multilabel();
    match bundle.task {
        TaskKind::Transductive => {
            write_meta(
                &dir.join("meta.tsv"),
                &bundle.name,
                bundle.task,
                bundle.graph.node_count(),
                bundle.feature_dim,
                bundle.num_classes,
                multi,
            )?;
            write_graph_dir(dir, &bundle.graph, binary_features, true)
        }
        TaskKind::Inductive => {
            let val = bundle.val_graph.as_ref().expect("inductive bundle has val graph");
            let test = bundle.test_graph.as_ref().expect("inductive bundle has test graph");
            let total = bundle.graph.node_count() + val.node_count() + test.node_count();
            write_meta(
                &dir.join("meta.tsv"),
                &bundle.name,
                bundle.task,
                total,
                bundle.feature_dim,
                bundle.num_classes,
                multi,
            )?;
            for (sub, g) in [("train", &bundle.graph), ("val", val), ("test", test)] {
                let sub_dir = dir.join(sub);
                fs::create_dir_all(&sub_dir).map_err(io_err(&sub_dir))?;
                write_meta(
                    &sub_dir.join("meta.tsv"),
                    &format!("{}-{sub}", bundle.name),
                    bundle.task,
                    g.node_count(),
                    bundle.feature_dim,
                    bundle.num_classes,
                    multi,
                )?;
                write_graph_dir(&sub_dir, g, binary_features, false)?;
            }
            Ok(())
        }
    }
}

/// One training epoch's bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_ms: u64,
}

/// Everything a run reports: the per-epoch trace plus the summary numbers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub epochs: Vec<EpochRecord>,
    /// Final test metric (accuracy or micro-F1).
    pub final_metric: f64,
    /// Run-to-run standard deviation when aggregated over repeats; 0 for a
    /// single run.
    pub metric_std: f64,
    pub best_epoch: usize,
    pub map_ms: u64,
    pub train_ms: u64,
    pub total_ms: u64,
    pub peak_mem_bytes: u64,
}

/// Write the per-epoch CSV plus the trailing summary record.
pub fn save_report(report: &MetricsReport, path: &Path) -> Result<(), DataError> {
    let mut out = String::from("epoch,train_loss,val_metric,wall_ms\n");
    for e in &report.epochs {
        writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_metric, e.wall_ms).unwrap();
    }
    writeln!(
        out,
        "summary,{},{},{},{},{},{},{}",
        report.final_metric,
        report.peak_mem_bytes,
        report.total_ms,
        report.map_ms,
        report.train_ms,
        report.best_epoch,
        report.metric_std
    )
    .unwrap();
    fs::write(path, out).map_err(io_err(path))
}

/// Parse a report written by [`save_report`].
pub fn load_report(path: &Path) -> Result<MetricsReport, DataError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let mut report = MetricsReport::default();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line_no == 1 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let num = |s: &str| -> Result<f64, DataError> {
            s.parse().map_err(|_| malformed(path, line_no, format!("bad number '{s}'")))
        };
        if fields[0] == "summary" {
            if fields.len() != 8 {
                return Err(malformed(path, line_no, "summary needs 8 fields"));
            }
            report.final_metric = num(fields[1])?;
            report.peak_mem_bytes = num(fields[2])? as u64;
            report.total_ms = num(fields[3])? as u64;
            report.map_ms = num(fields[4])? as u64;
            report.train_ms = num(fields[5])? as u64;
            report.best_epoch = num(fields[6])? as usize;
            report.metric_std = num(fields[7])?;
        } else {
            if fields.len() != 4 {
                return Err(malformed(path, line_no, "epoch rows need 4 fields"));
            }
            report.epochs.push(EpochRecord {
                epoch: num(fields[0])? as usize,
                train_loss: num(fields[1])?,
                val_metric: num(fields[2])?,
                wall_ms: num(fields[3])? as u64,
            });
        }
    }
    Ok(report)
}

/// Peak resident set size of this process, from /proc (Linux).
pub fn peak_rss_bytes() -> Option<u64> {
    proc_status_kb("VmHWM:").map(|kb| kb * 1024)
}

/// Current resident set size of this process, from /proc (Linux).
pub fn current_rss_bytes() -> Option<u64> {
    proc_status_kb("VmRSS:").map(|kb| kb * 1024)
}

fn proc_status_kb(key: &str) -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix(key) {
            return rest.trim().trim_end_matches(" kB").trim().parse().ok();
        }
    }
    None
}
