//! Task-specific knowledge graphs: node- and graph-classification datasets
//! reduced to link prediction.
//!
//! Node tasks add one label entity per class and connect budget-selected
//! training nodes to their label via `is_attributed_with`; original edges
//! keep a dedicated `edge` relation. Graph tasks re-index all member nodes
//! into one disconnected graph, add a super-graph entity per graph
//! (`belongs_to_graph` from each member), label edges for training graphs,
//! and `is_semantic_similar` edges between the nearest super-graph entities
//! in pooled unified-feature space. Evaluation queries are tail queries on
//! `is_attributed_with`; no label triple is emitted for validation or test
//! items.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{self, FeatureError};
use crate::kg::{KgError, KnowledgeGraph, Query, Triple, Vocab};
use crate::semantics::{top_k_cosine, unify_features, SemanticsError};
use crate::tensor::Matrix;

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("no training labels survive the budget")]
    NoLabels,
    #[error("graph {0} has no nodes")]
    EmptyGraph(usize),
    #[error("label budget {0} outside (0, 1]")]
    BadBudget(f64),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TaskError {
    TaskError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeTaskDataset {
    pub num_nodes: usize,
    pub edges: Vec<(u32, u32)>,
    /// num_nodes x d0; d0 may be zero.
    pub features: Matrix,
    pub labels: Vec<Option<u32>>,
    pub class_names: Vec<String>,
    pub split: Vec<Split>,
}

#[derive(Clone, Debug)]
pub struct GraphExample {
    pub num_nodes: usize,
    pub edges: Vec<(u32, u32)>,
    /// num_nodes x d0 when present.
    pub features: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct GraphTaskDataset {
    pub graphs: Vec<GraphExample>,
    pub labels: Vec<Option<u32>>,
    pub class_names: Vec<String>,
    pub split: Vec<Split>,
}

/// How many labeled training items per class receive a label triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelBudget {
    All,
    /// Fraction of each class's labeled training items, in (0, 1].
    Fraction(f64),
    /// Fixed count per class (clipped to the class size); must be >= 1.
    PerClass(usize),
}

/// Relations of a task KG, in vocabulary order.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaskRelations {
    pub edge: u32,
    pub is_attributed_with: u32,
    pub belongs_to_graph: Option<u32>,
    pub is_semantic_similar: Option<u32>,
}

#[derive(Clone)]
pub struct TaskKg {
    /// Unaugmented graph carrying entity/relation vocabularies.
    pub kg: KnowledgeGraph,
    /// Raw features aligned to kg entities (fed to the unifier downstream).
    pub features: Matrix,
    /// Class id -> label entity id.
    pub label_entities: Vec<u32>,
    pub class_names: Vec<String>,
    /// One `(x, is_attributed_with, ?)` query per labeled val/test item.
    pub eval_queries: Vec<(Query, u32, Split)>,
    pub relations: TaskRelations,
    /// Number of label triples emitted for training items.
    pub train_label_triples: usize,
    /// Warnings accumulated during the transform (budget clips etc.).
    pub warnings: Vec<String>,
}

impl TaskKg {
    /// Queries of one split with their true classes; candidates are the
    /// label entities.
    pub fn classification_queries(&self, split: Split) -> Vec<(Query, u32)> {
        self.eval_queries
            .iter()
            .filter(|&&(_, _, s)| s == split)
            .map(|&(q, c, _)| (q, c))
            .collect()
    }
}

fn mix_seed(seed: u64, tag: &str, a: u64) -> ChaCha20Rng {
    let mut h = seed ^ 0x51ed_2701_37f2_a5b1;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h ^= a;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    ChaCha20Rng::seed_from_u64(h)
}

/// Stratified budget selection: per class, a seeded shuffle of that class's
/// labeled training items, then a prefix whose length the budget sets.
/// Prefixes make the selection monotone in the budget under a fixed seed.
fn select_budgeted(
    per_class_items: &[Vec<u32>],
    budget: LabelBudget,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    match budget {
        LabelBudget::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
            return Err(TaskError::BadBudget(f))
        }
        LabelBudget::PerClass(0) => return Err(TaskError::NoLabels),
        _ => {}
    }
    let mut selected = Vec::with_capacity(per_class_items.len());
    let mut total = 0usize;
    for (class, items) in per_class_items.iter().enumerate() {
        let mut order = items.clone();
        let mut rng = mix_seed(seed, "budget", class as u64);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let keep = match budget {
            LabelBudget::All => order.len(),
            LabelBudget::Fraction(f) => {
                if order.is_empty() {
                    0
                } else {
                    ((f * order.len() as f64).round() as usize).clamp(1, order.len())
                }
            }
            LabelBudget::PerClass(m) => m.min(order.len()),
        };
        order.truncate(keep);
        order.sort_unstable();
        total += order.len();
        selected.push(order);
    }
    if total == 0 {
        return Err(TaskError::NoLabels);
    }
    Ok(selected)
}

/// Class-mean rows over the given member rows (zero when a class has no
/// members or the feature width is zero).
fn class_mean_rows(features: &Matrix, members: &[Vec<u32>], cols: usize) -> Vec<Vec<f64>> {
    members
        .iter()
        .map(|items| {
            let mut row = vec![0.0; cols];
            if !items.is_empty() && cols > 0 {
                for &i in items {
                    for c in 0..cols {
                        row[c] += features.get(i as usize, c);
                    }
                }
                for v in row.iter_mut() {
                    *v /= items.len() as f64;
                }
            }
            row
        })
        .collect()
}

pub fn transform_node_task(
    ds: &NodeTaskDataset,
    budget: LabelBudget,
    seed: u64,
) -> Result<TaskKg> {
    let n = ds.num_nodes;
    let k = ds.class_names.len();
    let mut per_class: Vec<Vec<u32>> = vec![Vec::new(); k];
    for node in 0..n {
        if ds.split[node] == Split::Train {
            if let Some(c) = ds.labels[node] {
                per_class[c as usize].push(node as u32);
            }
        }
    }
    let selected = select_budgeted(&per_class, budget, seed)?;

    let mut entity_vocab = Vocab::default();
    for node in 0..n {
        entity_vocab.intern(&format!("n{node}"));
    }
    for name in &ds.class_names {
        entity_vocab.intern(&format!("label:{name}"));
    }
    let mut relation_vocab = Vocab::default();
    let edge_rel = relation_vocab.intern("edge");
    let attr_rel = relation_vocab.intern("is_attributed_with");

    let mut triples = Vec::with_capacity(ds.edges.len() + selected.iter().map(Vec::len).sum::<usize>());
    for &(u, v) in &ds.edges {
        triples.push(Triple::new(u, edge_rel, v));
    }
    let label_entity = |c: usize| (n + c) as u32;
    let mut train_label_triples = 0;
    for (c, items) in selected.iter().enumerate() {
        for &node in items {
            triples.push(Triple::new(node, attr_rel, label_entity(c)));
            train_label_triples += 1;
        }
    }

    let d0 = ds.features.cols();
    let mut feat = Vec::with_capacity((n + k) * d0);
    feat.extend_from_slice(ds.features.data());
    for row in class_mean_rows(&ds.features, &selected, d0) {
        feat.extend_from_slice(&row);
    }

    let mut eval_queries = Vec::new();
    for node in 0..n {
        let split = ds.split[node];
        if split == Split::Val || split == Split::Test {
            if let Some(c) = ds.labels[node] {
                eval_queries.push((
                    Query::new(node as u32, attr_rel, Some(label_entity(c as usize))),
                    c,
                    split,
                ));
            }
        }
    }

    let kg = KnowledgeGraph::from_triples(
        n + k,
        relation_vocab.len(),
        triples,
        Some(entity_vocab),
        Some(relation_vocab),
    )?;
    Ok(TaskKg {
        kg,
        features: Matrix::from_vec(n + k, d0, feat),
        label_entities: (0..k).map(|c| label_entity(c)).collect(),
        class_names: ds.class_names.clone(),
        eval_queries,
        relations: TaskRelations {
            edge: edge_rel,
            is_attributed_with: attr_rel,
            belongs_to_graph: None,
            is_semantic_similar: None,
        },
        train_label_triples,
        warnings: Vec::new(),
    })
}

pub fn transform_graph_task(
    ds: &GraphTaskDataset,
    k_graph: usize,
    delta: f64,
    unified_dim: usize,
    seed: u64,
) -> Result<TaskKg> {
    let m = ds.graphs.len();
    let k = ds.class_names.len();
    let mut warnings = Vec::new();
    for (gi, g) in ds.graphs.iter().enumerate() {
        if g.num_nodes == 0 {
            return Err(TaskError::EmptyGraph(gi));
        }
    }
    let k_graph = if m > 0 && k_graph >= m {
        warnings.push(format!(
            "k_graph {k_graph} >= number of graphs {m}; clipped to {}",
            m - 1
        ));
        m - 1
    } else {
        k_graph
    };

    // Disjoint re-indexing of member nodes, then supers, then labels.
    let mut offsets = Vec::with_capacity(m);
    let mut total_nodes = 0usize;
    for g in &ds.graphs {
        offsets.push(total_nodes);
        total_nodes += g.num_nodes;
    }
    let super_entity = |gi: usize| (total_nodes + gi) as u32;
    let label_entity = |c: usize| (total_nodes + m + c) as u32;
    let num_entities = total_nodes + m + k;

    // Raw member features stacked (missing ones become zero rows of the
    // widest provided dimension).
    let d0 = ds
        .graphs
        .iter()
        .filter_map(|g| g.features.as_ref().map(|f| f.cols()))
        .max()
        .unwrap_or(0);
    let mut raw = vec![0.0; total_nodes * d0];
    for (gi, g) in ds.graphs.iter().enumerate() {
        if let Some(f) = &g.features {
            for i in 0..g.num_nodes {
                for c in 0..f.cols() {
                    raw[(offsets[gi] + i) * d0 + c] = f.get(i, c);
                }
            }
        }
    }
    let member_raw = Matrix::from_vec(total_nodes, d0, raw);
    let unified = unify_features(&member_raw, unified_dim, seed)?;

    // Mean-pool member rows per graph.
    let mut pooled = vec![0.0; m * unified_dim];
    for (gi, g) in ds.graphs.iter().enumerate() {
        for i in 0..g.num_nodes {
            for c in 0..unified_dim {
                pooled[gi * unified_dim + c] +=
                    unified.unified.get(offsets[gi] + i, c) / g.num_nodes as f64;
            }
        }
    }
    let pooled = Matrix::from_vec(m, unified_dim, pooled);

    let mut entity_vocab = Vocab::default();
    for (gi, g) in ds.graphs.iter().enumerate() {
        for i in 0..g.num_nodes {
            entity_vocab.intern(&format!("g{gi}:n{i}"));
        }
    }
    for gi in 0..m {
        entity_vocab.intern(&format!("graph:{gi}"));
    }
    for name in &ds.class_names {
        entity_vocab.intern(&format!("label:{name}"));
    }
    let mut relation_vocab = Vocab::default();
    let edge_rel = relation_vocab.intern("edge");
    let belongs_rel = relation_vocab.intern("belongs_to_graph");
    let attr_rel = relation_vocab.intern("is_attributed_with");
    let similar_rel = relation_vocab.intern("is_semantic_similar");

    let mut triples = Vec::new();
    for (gi, g) in ds.graphs.iter().enumerate() {
        let off = offsets[gi] as u32;
        for &(u, v) in &g.edges {
            triples.push(Triple::new(off + u, edge_rel, off + v));
        }
        for i in 0..g.num_nodes as u32 {
            triples.push(Triple::new(off + i, belongs_rel, super_entity(gi)));
        }
    }
    let mut train_label_triples = 0;
    let mut labeled_train_per_class: Vec<Vec<u32>> = vec![Vec::new(); k];
    for gi in 0..m {
        if ds.split[gi] == Split::Train {
            if let Some(c) = ds.labels[gi] {
                triples.push(Triple::new(super_entity(gi), attr_rel, label_entity(c as usize)));
                train_label_triples += 1;
                labeled_train_per_class[c as usize].push(gi as u32);
            }
        }
    }
    if train_label_triples == 0 {
        return Err(TaskError::NoLabels);
    }
    // Semantically-nearest super-graph edges over pooled features.
    let sem = top_k_cosine(&pooled, k_graph, delta, None);
    for (gi, neighbors) in sem.iter().enumerate() {
        for &(gj, _) in neighbors {
            triples.push(Triple::new(super_entity(gi), similar_rel, super_entity(gj as usize)));
        }
    }

    // Entity features: unified member rows, pooled supers, class means of
    // labeled training supers.
    let mut feat = vec![0.0; num_entities * unified_dim];
    feat[..total_nodes * unified_dim].copy_from_slice(unified.unified.data());
    feat[total_nodes * unified_dim..(total_nodes + m) * unified_dim]
        .copy_from_slice(pooled.data());
    for (c, row) in class_mean_rows(&pooled, &labeled_train_per_class, unified_dim)
        .into_iter()
        .enumerate()
    {
        let e = label_entity(c) as usize;
        feat[e * unified_dim..(e + 1) * unified_dim].copy_from_slice(&row);
    }

    let mut eval_queries = Vec::new();
    for gi in 0..m {
        let split = ds.split[gi];
        if split == Split::Val || split == Split::Test {
            if let Some(c) = ds.labels[gi] {
                eval_queries.push((
                    Query::new(super_entity(gi), attr_rel, Some(label_entity(c as usize))),
                    c,
                    split,
                ));
            }
        }
    }

    let kg = KnowledgeGraph::from_triples(
        num_entities,
        relation_vocab.len(),
        triples,
        Some(entity_vocab),
        Some(relation_vocab),
    )?;
    Ok(TaskKg {
        kg,
        features: Matrix::from_vec(num_entities, unified_dim, feat),
        label_entities: (0..k).map(|c| label_entity(c)).collect(),
        class_names: ds.class_names.clone(),
        eval_queries,
        relations: TaskRelations {
            edge: edge_rel,
            is_attributed_with: attr_rel,
            belongs_to_graph: Some(belongs_rel),
            is_semantic_similar: Some(similar_rel),
        },
        train_label_triples,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Dataset directory loaders
// ---------------------------------------------------------------------------

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let r = BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let t = line.trim().to_string();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push((i + 1, t));
    }
    Ok(out)
}

fn parse_index(path: &Path, line: usize, tok: &str) -> Result<u32> {
    tok.parse::<u32>().map_err(|_| TaskError::Malformed {
        path: path.display().to_string(),
        line,
        msg: format!("expected an integer id, got {tok:?}"),
    })
}

/// Loads `edges.tsv`, `features.fvec|tsv` (optional), `labels.tsv`,
/// `split.tsv` from a node-task dataset directory.
pub fn load_node_dataset(dir: &Path) -> Result<NodeTaskDataset> {
    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    let mut max_node = 0u32;
    for (lineno, line) in read_lines(&edges_path)? {
        let mut it = line.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(u), Some(v), None) => {
                let (u, v) = (
                    parse_index(&edges_path, lineno, u)?,
                    parse_index(&edges_path, lineno, v)?,
                );
                max_node = max_node.max(u).max(v);
                edges.push((u, v));
            }
            _ => {
                return Err(TaskError::Malformed {
                    path: edges_path.display().to_string(),
                    line: lineno,
                    msg: "expected `u v` per line".into(),
                })
            }
        }
    }

    let labels_path = dir.join("labels.tsv");
    let mut class_vocab = Vocab::default();
    let mut raw_labels = Vec::new();
    for (lineno, line) in read_lines(&labels_path)? {
        let (node, class) = line.split_once('\t').ok_or_else(|| TaskError::Malformed {
            path: labels_path.display().to_string(),
            line: lineno,
            msg: "expected node_id<TAB>class".into(),
        })?;
        let node = parse_index(&labels_path, lineno, node)?;
        max_node = max_node.max(node);
        raw_labels.push((node, class_vocab.intern(class.trim())));
    }

    let split_path = dir.join("split.tsv");
    let mut raw_split = Vec::new();
    for (lineno, line) in read_lines(&split_path)? {
        let (node, split) = line.split_once('\t').ok_or_else(|| TaskError::Malformed {
            path: split_path.display().to_string(),
            line: lineno,
            msg: "expected node_id<TAB>train|val|test".into(),
        })?;
        let node = parse_index(&split_path, lineno, node)?;
        max_node = max_node.max(node);
        let split = Split::parse(split.trim()).ok_or_else(|| TaskError::Malformed {
            path: split_path.display().to_string(),
            line: lineno,
            msg: format!("unknown split {split:?}"),
        })?;
        raw_split.push((node, split));
    }

    let mut num_nodes = max_node as usize + 1;
    let fvec = dir.join("features.fvec");
    let tsv = dir.join("features.tsv");
    let features = if fvec.exists() {
        let m = features::read_fvec(&fvec)?;
        num_nodes = num_nodes.max(m.rows());
        m
    } else if tsv.exists() {
        let vocab = Vocab::from_names((0..num_nodes).map(|i| i.to_string()));
        features::read_feature_tsv(&tsv, &vocab)?
    } else {
        Matrix::zeros(num_nodes, 0)
    };
    let features = if features.rows() < num_nodes {
        let mut data = features.data().to_vec();
        data.resize(num_nodes * features.cols(), 0.0);
        Matrix::from_vec(num_nodes, features.cols(), data)
    } else {
        features
    };

    let mut labels = vec![None; num_nodes];
    for (node, class) in raw_labels {
        labels[node as usize] = Some(class);
    }
    let mut split = vec![Split::Unassigned; num_nodes];
    for (node, s) in raw_split {
        split[node as usize] = s;
    }
    Ok(NodeTaskDataset {
        num_nodes,
        edges,
        features,
        labels,
        class_names: class_vocab.names().to_vec(),
        split,
    })
}

/// Loads `graph_edges.tsv`, `graph_labels.tsv`, `graph_split.tsv`, and the
/// optional `node_features.fvec` + `node_index.tsv` pair.
pub fn load_graph_dataset(dir: &Path) -> Result<GraphTaskDataset> {
    let edges_path = dir.join("graph_edges.tsv");
    let mut per_graph_edges: Vec<Vec<(u32, u32)>> = Vec::new();
    let mut per_graph_nodes: Vec<u32> = Vec::new();
    let mut grow = |gi: usize, v: &mut Vec<Vec<(u32, u32)>>, n: &mut Vec<u32>| {
        while v.len() <= gi {
            v.push(Vec::new());
            n.push(0);
        }
    };
    for (lineno, line) in read_lines(&edges_path)? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(TaskError::Malformed {
                path: edges_path.display().to_string(),
                line: lineno,
                msg: "expected graph_id<TAB>u<TAB>v".into(),
            });
        }
        let gi = parse_index(&edges_path, lineno, fields[0])? as usize;
        let u = parse_index(&edges_path, lineno, fields[1])?;
        let v = parse_index(&edges_path, lineno, fields[2])?;
        grow(gi, &mut per_graph_edges, &mut per_graph_nodes);
        per_graph_nodes[gi] = per_graph_nodes[gi].max(u + 1).max(v + 1);
        per_graph_edges[gi].push((u, v));
    }

    let labels_path = dir.join("graph_labels.tsv");
    let mut class_vocab = Vocab::default();
    let mut raw_labels = Vec::new();
    for (lineno, line) in read_lines(&labels_path)? {
        let (gi, class) = line.split_once('\t').ok_or_else(|| TaskError::Malformed {
            path: labels_path.display().to_string(),
            line: lineno,
            msg: "expected graph_id<TAB>class".into(),
        })?;
        let gi = parse_index(&labels_path, lineno, gi)? as usize;
        grow(gi, &mut per_graph_edges, &mut per_graph_nodes);
        raw_labels.push((gi, class_vocab.intern(class.trim())));
    }

    let split_path = dir.join("graph_split.tsv");
    let mut raw_split = Vec::new();
    for (lineno, line) in read_lines(&split_path)? {
        let (gi, split) = line.split_once('\t').ok_or_else(|| TaskError::Malformed {
            path: split_path.display().to_string(),
            line: lineno,
            msg: "expected graph_id<TAB>train|val|test".into(),
        })?;
        let gi = parse_index(&split_path, lineno, gi)? as usize;
        grow(gi, &mut per_graph_edges, &mut per_graph_nodes);
        let split = Split::parse(split.trim()).ok_or_else(|| TaskError::Malformed {
            path: split_path.display().to_string(),
            line: lineno,
            msg: format!("unknown split {split:?}"),
        })?;
        raw_split.push((gi, split));
    }

    // Optional features: node_index.tsv maps (graph, local) -> fvec row.
    let nf_path = dir.join("node_features.fvec");
    let ni_path = dir.join("node_index.tsv");
    let mut node_rows: Vec<Vec<Option<u32>>> = Vec::new();
    let mut node_feat: Option<Matrix> = None;
    if nf_path.exists() && ni_path.exists() {
        let feats = features::read_fvec(&nf_path)?;
        node_rows = per_graph_nodes
            .iter()
            .map(|&n| vec![None; n as usize])
            .collect();
        for (lineno, line) in read_lines(&ni_path)? {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(TaskError::Malformed {
                    path: ni_path.display().to_string(),
                    line: lineno,
                    msg: "expected graph_id<TAB>local_id<TAB>row".into(),
                });
            }
            let gi = parse_index(&ni_path, lineno, fields[0])? as usize;
            let local = parse_index(&ni_path, lineno, fields[1])?;
            let row = parse_index(&ni_path, lineno, fields[2])?;
            grow(gi, &mut per_graph_edges, &mut per_graph_nodes);
            while node_rows.len() < per_graph_edges.len() {
                node_rows.push(Vec::new());
            }
            if node_rows[gi].len() <= local as usize {
                node_rows[gi].resize(local as usize + 1, None);
                per_graph_nodes[gi] = per_graph_nodes[gi].max(local + 1);
            }
            node_rows[gi][local as usize] = Some(row);
        }
        node_feat = Some(feats);
    }

    let num_graphs = per_graph_edges.len();
    let mut graphs = Vec::with_capacity(num_graphs);
    for gi in 0..num_graphs {
        let n = per_graph_nodes[gi] as usize;
        let features = node_feat.as_ref().map(|feats| {
            let d = feats.cols();
            let mut data = vec![0.0; n * d];
            if let Some(rows) = node_rows.get(gi) {
                for (local, row) in rows.iter().enumerate() {
                    if let Some(r) = row {
                        data[local * d..(local + 1) * d].copy_from_slice(feats.row(*r as usize));
                    }
                }
            }
            Matrix::from_vec(n, d, data)
        });
        graphs.push(GraphExample {
            num_nodes: n,
            edges: per_graph_edges[gi].clone(),
            features,
        });
    }
    let mut labels = vec![None; num_graphs];
    for (gi, c) in raw_labels {
        labels[gi] = Some(c);
    }
    let mut split = vec![Split::Unassigned; num_graphs];
    for (gi, s) in raw_split {
        split[gi] = s;
    }
    Ok(GraphTaskDataset {
        graphs,
        labels,
        class_names: class_vocab.names().to_vec(),
        split,
    })
}

// ---------------------------------------------------------------------------
// TaskKg directory round trip
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TaskKgManifest {
    class_names: Vec<String>,
    label_entities: Vec<u32>,
    relations: TaskRelations,
    train_label_triples: usize,
}

/// Writes a task KG as a directory: `entities.tsv`, `relations.tsv`,
/// `triples.tsv`, `features.fvec`, `queries.tsv`, `task.json`.
pub fn write_task_kg(dir: &Path, tkg: &TaskKg) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write_list = |path: &Path, names: &[String]| -> Result<()> {
        let f = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(f);
        for n in names {
            writeln!(w, "{n}").map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    };
    let ev = tkg.kg.entity_vocab().expect("task kg has entity names");
    let rv = tkg.kg.relation_vocab().expect("task kg has relation names");
    write_list(&dir.join("entities.tsv"), ev.names())?;
    write_list(&dir.join("relations.tsv"), rv.names())?;
    tkg.kg.write_triples(&dir.join("triples.tsv"))?;
    features::write_fvec(&dir.join("features.fvec"), &tkg.features)?;
    let qpath = dir.join("queries.tsv");
    {
        let f = File::create(&qpath).map_err(|e| io_err(&qpath, e))?;
        let mut w = BufWriter::new(f);
        for &(q, class, split) in &tkg.eval_queries {
            writeln!(
                w,
                "{}\t{}\t{}",
                split.label(),
                ev.name(q.source),
                tkg.class_names[class as usize]
            )
            .map_err(|e| io_err(&qpath, e))?;
        }
        w.flush().map_err(|e| io_err(&qpath, e))?;
    }
    let manifest = TaskKgManifest {
        class_names: tkg.class_names.clone(),
        label_entities: tkg.label_entities.clone(),
        relations: tkg.relations,
        train_label_triples: tkg.train_label_triples,
    };
    let mpath = dir.join("task.json");
    std::fs::write(
        &mpath,
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| io_err(&mpath, e))
}

pub fn read_task_kg(dir: &Path) -> Result<TaskKg> {
    let read_list = |path: &Path| -> Result<Vec<String>> {
        Ok(read_lines(path)?.into_iter().map(|(_, l)| l).collect())
    };
    let entities = Vocab::from_names(read_list(&dir.join("entities.tsv"))?);
    let relations = Vocab::from_names(read_list(&dir.join("relations.tsv"))?);
    let triples = crate::kg::parse_triple_list(&dir.join("triples.tsv"), &entities, &relations)?;
    let features = features::read_fvec(&dir.join("features.fvec"))?;
    let mpath = dir.join("task.json");
    let manifest: TaskKgManifest = serde_json::from_slice(
        &std::fs::read(&mpath).map_err(|e| io_err(&mpath, e))?,
    )
    .map_err(|e| TaskError::Malformed {
        path: mpath.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;

    let qpath = dir.join("queries.tsv");
    let mut eval_queries = Vec::new();
    for (lineno, line) in read_lines(&qpath)? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(TaskError::Malformed {
                path: qpath.display().to_string(),
                line: lineno,
                msg: "expected split<TAB>entity<TAB>class".into(),
            });
        }
        let split = Split::parse(fields[0]).ok_or_else(|| TaskError::Malformed {
            path: qpath.display().to_string(),
            line: lineno,
            msg: format!("unknown split {:?}", fields[0]),
        })?;
        let source = entities.get(fields[1]).ok_or_else(|| TaskError::Malformed {
            path: qpath.display().to_string(),
            line: lineno,
            msg: format!("unknown entity {:?}", fields[1]),
        })?;
        let class = manifest
            .class_names
            .iter()
            .position(|c| c == fields[2])
            .ok_or_else(|| TaskError::Malformed {
                path: qpath.display().to_string(),
                line: lineno,
                msg: format!("unknown class {:?}", fields[2]),
            })? as u32;
        eval_queries.push((
            Query::new(
                source,
                manifest.relations.is_attributed_with,
                Some(manifest.label_entities[class as usize]),
            ),
            class,
            split,
        ));
    }

    let num_entities = entities.len();
    let num_relations = relations.len();
    let kg = KnowledgeGraph::from_triples(
        num_entities,
        num_relations,
        triples,
        Some(entities),
        Some(relations),
    )?;
    Ok(TaskKg {
        kg,
        features,
        label_entities: manifest.label_entities,
        class_names: manifest.class_names,
        eval_queries,
        relations: manifest.relations,
        train_label_triples: manifest.train_label_triples,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_node_dataset() -> NodeTaskDataset {
        // nodes A,B,C; edge A-B; train labels A->c1, B->c2; test {C}
        NodeTaskDataset {
            num_nodes: 3,
            edges: vec![(0, 1)],
            features: Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]),
            labels: vec![Some(0), Some(1), Some(0)],
            class_names: vec!["c1".into(), "c2".into()],
            split: vec![Split::Train, Split::Train, Split::Test],
        }
    }

    #[test]
    fn node_transform_hand_example() {
        let tkg = transform_node_task(&three_node_dataset(), LabelBudget::All, 0).unwrap();
        assert_eq!(tkg.kg.num_entities(), 5);
        assert_eq!(tkg.kg.num_relations(), 2);
        assert_eq!(tkg.kg.num_triples(), 3);
        assert_eq!(tkg.eval_queries.len(), 1);
        let (q, class, split) = tkg.eval_queries[0];
        assert_eq!(q.source, 2);
        assert_eq!(q.relation, tkg.relations.is_attributed_with);
        assert_eq!(class, 0);
        assert_eq!(split, Split::Test);
        // label-entity features are class means of the selected nodes
        assert_eq!(tkg.features.row(3), &[1.0, 0.0]);
        assert_eq!(tkg.features.row(4), &[0.0, 1.0]);
    }

    #[test]
    fn fractional_budget_exact_count() {
        // 5 classes x 20 train nodes; budget 0.2 keeps exactly 4 per class.
        let n = 100;
        let ds = NodeTaskDataset {
            num_nodes: n,
            edges: vec![],
            features: Matrix::zeros(n, 0),
            labels: (0..n).map(|i| Some((i % 5) as u32)).collect(),
            class_names: (0..5).map(|c| format!("c{c}")).collect(),
            split: vec![Split::Train; n],
        };
        let tkg = transform_node_task(&ds, LabelBudget::Fraction(0.2), 7).unwrap();
        assert_eq!(tkg.train_label_triples, 20);
    }

    #[test]
    fn budget_monotone_and_deterministic() {
        let n = 60;
        let ds = NodeTaskDataset {
            num_nodes: n,
            edges: vec![],
            features: Matrix::zeros(n, 0),
            labels: (0..n).map(|i| Some((i % 3) as u32)).collect(),
            class_names: (0..3).map(|c| format!("c{c}")).collect(),
            split: vec![Split::Train; n],
        };
        let triples_of = |tkg: &TaskKg| -> std::collections::BTreeSet<Triple> {
            tkg.kg
                .base_triples()
                .iter()
                .copied()
                .filter(|t| t.relation == tkg.relations.is_attributed_with)
                .collect()
        };
        let small = transform_node_task(&ds, LabelBudget::Fraction(0.3), 5).unwrap();
        let large = transform_node_task(&ds, LabelBudget::Fraction(0.8), 5).unwrap();
        let (s, l) = (triples_of(&small), triples_of(&large));
        assert!(s.is_subset(&l), "budget selection must be prefix-monotone");

        let again = transform_node_task(&ds, LabelBudget::Fraction(0.3), 5).unwrap();
        assert_eq!(small.kg.triples(), again.kg.triples());
    }

    #[test]
    fn no_labels_budget_errors() {
        let ds = three_node_dataset();
        assert!(matches!(
            transform_node_task(&ds, LabelBudget::PerClass(0), 0),
            Err(TaskError::NoLabels)
        ));
        let mut unlabeled = ds.clone();
        unlabeled.split = vec![Split::Test; 3];
        assert!(matches!(
            transform_node_task(&unlabeled, LabelBudget::All, 0),
            Err(TaskError::NoLabels)
        ));
    }

    #[test]
    fn no_label_leakage_into_eval_splits() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = 40;
            let ds = NodeTaskDataset {
                num_nodes: n,
                edges: (0..60)
                    .map(|_| (rng.random_range(0..n as u32), rng.random_range(0..n as u32)))
                    .collect(),
                features: Matrix::zeros(n, 0),
                labels: (0..n).map(|i| Some((i % 4) as u32)).collect(),
                class_names: (0..4).map(|c| format!("c{c}")).collect(),
                split: (0..n)
                    .map(|_| match rng.random_range(0..3) {
                        0 => Split::Train,
                        1 => Split::Val,
                        _ => Split::Test,
                    })
                    .collect(),
            };
            if let Ok(tkg) = transform_node_task(&ds, LabelBudget::Fraction(0.5), 3) {
                for t in tkg.kg.base_triples() {
                    if t.relation == tkg.relations.is_attributed_with {
                        assert_eq!(ds.split[t.head as usize], Split::Train, "label leaked");
                    }
                }
                // entity count law: |V| + |L|
                assert_eq!(tkg.kg.num_entities(), n + 4);
            }
        }
    }

    fn two_graph_dataset() -> GraphTaskDataset {
        GraphTaskDataset {
            graphs: vec![
                GraphExample {
                    num_nodes: 3,
                    edges: vec![(0, 1), (1, 2)],
                    features: None,
                },
                GraphExample {
                    num_nodes: 2,
                    edges: vec![(0, 1)],
                    features: None,
                },
            ],
            labels: vec![Some(0), Some(1)],
            class_names: vec!["x".into(), "y".into()],
            split: vec![Split::Train, Split::Train],
        }
    }

    #[test]
    fn graph_transform_hand_example() {
        let tkg = transform_graph_task(&two_graph_dataset(), 0, 0.9, 8, 0).unwrap();
        // 3 + 2 member nodes + 2 supers + 2 labels
        assert_eq!(tkg.kg.num_entities(), 9);
        let by_rel = |r: u32| {
            tkg.kg
                .base_triples()
                .iter()
                .filter(|t| t.relation == r)
                .count()
        };
        assert_eq!(by_rel(tkg.relations.edge), 3);
        assert_eq!(by_rel(tkg.relations.belongs_to_graph.unwrap()), 5);
        assert_eq!(by_rel(tkg.relations.is_attributed_with), 2);
        assert_eq!(by_rel(tkg.relations.is_semantic_similar.unwrap()), 0);
    }

    #[test]
    fn identical_features_give_one_similar_edge_each() {
        let mut ds = two_graph_dataset();
        ds.graphs.push(GraphExample {
            num_nodes: 2,
            edges: vec![(0, 1)],
            features: None,
        });
        ds.labels.push(Some(0));
        ds.split.push(Split::Train);
        for g in ds.graphs.iter_mut() {
            g.features = Some(Matrix::filled(g.num_nodes, 3, 1.0));
        }
        let tkg = transform_graph_task(&ds, 1, 0.9, 8, 0).unwrap();
        let sim = tkg.relations.is_semantic_similar.unwrap();
        // identical pooled features: every super-graph entity gains exactly
        // one outgoing similar edge (ties resolve to the lowest index)
        let outgoing: Vec<usize> = (0..3)
            .map(|gi| {
                tkg.kg
                    .base_triples()
                    .iter()
                    .filter(|t| {
                        t.relation == sim && t.head == tkg.label_entities[0] - 3 + gi as u32
                    })
                    .count()
            })
            .collect();
        // brute-force cosine on constant rows is 1.0 everywhere >= 0.9
        assert_eq!(outgoing, vec![1, 1, 1]);
    }

    #[test]
    fn empty_graph_rejected_and_k_clipped() {
        let mut ds = two_graph_dataset();
        ds.graphs[1].num_nodes = 0;
        ds.graphs[1].edges.clear();
        assert!(matches!(
            transform_graph_task(&ds, 0, 0.9, 8, 0),
            Err(TaskError::EmptyGraph(1))
        ));

        let ds = two_graph_dataset();
        let tkg = transform_graph_task(&ds, 10, 0.9, 8, 0).unwrap();
        assert!(!tkg.warnings.is_empty());
    }

    #[test]
    fn classification_query_listing() {
        let mut ds = three_node_dataset();
        ds.split = vec![Split::Train, Split::Train, Split::Test];
        let tkg = transform_node_task(&ds, LabelBudget::All, 0).unwrap();
        let test = tkg.classification_queries(Split::Test);
        assert_eq!(test.len(), 1);
        assert!(tkg.classification_queries(Split::Val).is_empty());
    }

    #[test]
    fn task_kg_directory_round_trip() {
        let tkg = transform_node_task(&three_node_dataset(), LabelBudget::All, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task");
        write_task_kg(&path, &tkg).unwrap();
        let back = read_task_kg(&path).unwrap();
        assert_eq!(back.kg.triples(), tkg.kg.triples());
        assert_eq!(back.label_entities, tkg.label_entities);
        assert_eq!(back.eval_queries.len(), tkg.eval_queries.len());
        assert_eq!(back.eval_queries[0].0, tkg.eval_queries[0].0);
        assert!(back.features.max_abs_diff(&tkg.features) < 1e-6);
    }

    #[test]
    fn node_dataset_directory_loader() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("edges.tsv"), "0 1\n1 2\n").unwrap();
        std::fs::write(dir.path().join("labels.tsv"), "0\tred\n1\tblue\n2\tred\n").unwrap();
        std::fs::write(
            dir.path().join("split.tsv"),
            "0\ttrain\n1\ttrain\n2\ttest\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("features.tsv"), "0\t1 0\n1\t0 1\n2\t1 1\n").unwrap();
        let ds = load_node_dataset(dir.path()).unwrap();
        assert_eq!(ds.num_nodes, 3);
        assert_eq!(ds.edges, vec![(0, 1), (1, 2)]);
        assert_eq!(ds.class_names, vec!["red".to_string(), "blue".to_string()]);
        assert_eq!(ds.labels[2], Some(0));
        assert_eq!(ds.features.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn graph_dataset_directory_loader() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("graph_edges.tsv"),
            "0\t0\t1\n0\t1\t2\n1\t0\t1\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("graph_labels.tsv"), "0\ta\n1\tb\n").unwrap();
        std::fs::write(dir.path().join("graph_split.tsv"), "0\ttrain\n1\ttest\n").unwrap();
        let ds = load_graph_dataset(dir.path()).unwrap();
        assert_eq!(ds.graphs.len(), 2);
        assert_eq!(ds.graphs[0].num_nodes, 3);
        assert_eq!(ds.graphs[1].num_nodes, 2);
        assert_eq!(ds.split[1], Split::Test);
    }
}
