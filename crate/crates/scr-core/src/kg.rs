//! Knowledge graph storage: parsing, triple augmentation with inverse and
//! identity relations, adjacency queries, and the synthetic feature
//! generators (ontology counts, all-ones).
//!
//! Entity and relation ids are dense 0-based indices assigned in first
//! occurrence order, so a parse is deterministic across runs. Augmentation
//! maps a base relation `r` (id below `B = base_relation_count`) to its
//! inverse `r + B`; the identity relation has id `2B`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{EdgeList, Matrix};

pub type Result<T> = std::result::Result<T, KgError>;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: expected head<TAB>relation<TAB>tail")]
    Parse { path: String, line: usize },
    #[error("dataset contains no triples: {path}")]
    EmptyDataset { path: String },
    #[error("graph is already augmented")]
    AlreadyAugmented,
    #[error("operation requires an augmented graph")]
    NotAugmented,
    #[error("{what} index {index} out of range ({len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("unknown {kind} name {name:?}")]
    UnknownName { kind: &'static str, name: String },
    #[error("feature dimension must be at least 1")]
    InvalidDimension,
}

fn io_err(path: &Path, source: std::io::Error) -> KgError {
    KgError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// A tail-prediction query `(source, relation, ?)`. Head prediction is
/// expressed as a tail query on the inverse relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query {
    pub source: u32,
    pub relation: u32,
    pub answer: Option<u32>,
}

impl Query {
    pub fn new(source: u32, relation: u32, answer: Option<u32>) -> Self {
        Query {
            source,
            relation,
            answer,
        }
    }
}

/// String vocabulary with dense first-occurrence ids.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::default();
        for n in names {
            v.intern(n.as_ref());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_relations: usize,
    base_relation_count: usize,
    base_triple_count: usize,
    /// Base triples first (input order), then inverses, then identities.
    triples: Vec<Triple>,
    augmented: bool,
    entity_vocab: Option<Vocab>,
    relation_vocab: Option<Vocab>,
    /// Triple ids sorted by (head, relation, tail) for adjacency lookups.
    sorted: Vec<u32>,
    duplicates_dropped: usize,
}

impl KnowledgeGraph {
    /// Builds an unaugmented graph from raw triples. Duplicates are dropped
    /// (first occurrence wins) and counted in `duplicates_dropped`.
    pub fn from_triples(
        num_entities: usize,
        num_relations: usize,
        triples: Vec<Triple>,
        entity_vocab: Option<Vocab>,
        relation_vocab: Option<Vocab>,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(triples.len());
        let mut kept = Vec::with_capacity(triples.len());
        let mut dropped = 0;
        for t in triples {
            if t.head as usize >= num_entities || t.tail as usize >= num_entities {
                return Err(KgError::IndexOutOfRange {
                    what: "entity",
                    index: t.head.max(t.tail) as usize,
                    len: num_entities,
                });
            }
            if t.relation as usize >= num_relations {
                return Err(KgError::IndexOutOfRange {
                    what: "relation",
                    index: t.relation as usize,
                    len: num_relations,
                });
            }
            if seen.insert(t) {
                kept.push(t);
            } else {
                dropped += 1;
            }
        }
        let base_triple_count = kept.len();
        let mut kg = KnowledgeGraph {
            num_entities,
            num_relations,
            base_relation_count: num_relations,
            base_triple_count,
            triples: kept,
            augmented: false,
            entity_vocab,
            relation_vocab,
            sorted: Vec::new(),
            duplicates_dropped: dropped,
        };
        kg.rebuild_index();
        Ok(kg)
    }

    fn rebuild_index(&mut self) {
        let mut ids: Vec<u32> = (0..self.triples.len() as u32).collect();
        ids.sort_by_key(|&i| {
            let t = self.triples[i as usize];
            (t.head, t.relation, t.tail)
        });
        self.sorted = ids;
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn base_relation_count(&self) -> usize {
        self.base_relation_count
    }

    pub fn base_triple_count(&self) -> usize {
        self.base_triple_count
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn base_triples(&self) -> &[Triple] {
        &self.triples[..self.base_triple_count]
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn entity_vocab(&self) -> Option<&Vocab> {
        self.entity_vocab.as_ref()
    }

    pub fn relation_vocab(&self) -> Option<&Vocab> {
        self.relation_vocab.as_ref()
    }

    pub fn entity_name(&self, id: u32) -> String {
        match &self.entity_vocab {
            Some(v) => v.name(id).to_string(),
            None => format!("e{id}"),
        }
    }

    pub fn relation_name(&self, id: u32) -> String {
        match &self.relation_vocab {
            Some(v) => v.name(id).to_string(),
            None => format!("r{id}"),
        }
    }

    /// Adds the inverse relation per base relation plus one identity
    /// relation, yielding |T+| = 2|T| + |E| triples and 2|R| + 1 relations.
    pub fn augment(mut self) -> Result<Self> {
        if self.augmented {
            return Err(KgError::AlreadyAugmented);
        }
        let base_rels = self.num_relations;
        let identity = (2 * base_rels) as u32;
        let mut triples = self.triples;
        let base_len = triples.len();
        triples.reserve(base_len + self.num_entities);
        for i in 0..base_len {
            let t = triples[i];
            triples.push(Triple::new(t.tail, t.relation + base_rels as u32, t.head));
        }
        for e in 0..self.num_entities as u32 {
            triples.push(Triple::new(e, identity, e));
        }
        if let Some(vocab) = &mut self.relation_vocab {
            let names: Vec<String> = vocab.names().to_vec();
            for n in &names {
                vocab.intern(&format!("{n}^-1"));
            }
            vocab.intern("<identity>");
        }
        self.num_relations = 2 * base_rels + 1;
        self.triples = triples;
        self.augmented = true;
        self.rebuild_index();
        Ok(self)
    }

    /// Inverse of an augmented relation id; the identity maps to itself.
    pub fn inverse_relation(&self, r: u32) -> u32 {
        debug_assert!(self.augmented);
        let b = self.base_relation_count as u32;
        if r < b {
            r + b
        } else if r < 2 * b {
            r - b
        } else {
            r
        }
    }

    pub fn identity_relation(&self) -> u32 {
        debug_assert!(self.augmented);
        (2 * self.base_relation_count) as u32
    }

    /// Tails `w` with `(entity, relation, w)` in the triple set, ascending.
    pub fn neighbors(&self, entity: u32, relation: u32) -> Result<Vec<u32>> {
        if entity as usize >= self.num_entities {
            return Err(KgError::IndexOutOfRange {
                what: "entity",
                index: entity as usize,
                len: self.num_entities,
            });
        }
        if relation as usize >= self.num_relations {
            return Err(KgError::IndexOutOfRange {
                what: "relation",
                index: relation as usize,
                len: self.num_relations,
            });
        }
        let key = (entity, relation);
        let lo = self.sorted.partition_point(|&i| {
            let t = self.triples[i as usize];
            (t.head, t.relation) < key
        });
        let hi = self.sorted.partition_point(|&i| {
            let t = self.triples[i as usize];
            (t.head, t.relation) <= key
        });
        let mut out: Vec<u32> = self.sorted[lo..hi]
            .iter()
            .map(|&i| self.triples[i as usize].tail)
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn contains(&self, t: Triple) -> bool {
        let key = (t.head, t.relation, t.tail);
        self.sorted
            .binary_search_by_key(&key, |&i| {
                let x = self.triples[i as usize];
                (x.head, x.relation, x.tail)
            })
            .is_ok()
    }

    /// Edge list over all stored triples: messages flow head -> tail.
    pub fn edge_list(&self) -> EdgeList {
        let mut src = Vec::with_capacity(self.triples.len());
        let mut rel = Vec::with_capacity(self.triples.len());
        let mut dst = Vec::with_capacity(self.triples.len());
        for t in &self.triples {
            src.push(t.head);
            rel.push(t.relation);
            dst.push(t.tail);
        }
        EdgeList::new(self.num_entities, src, rel, dst)
    }

    /// Undirected neighbor sets over base triples only (used for the
    /// semantic-neighbor exclusion rule). Sorted, deduplicated, self loops
    /// removed.
    pub fn base_undirected_neighbors(&self) -> Vec<Vec<u32>> {
        let mut sets = vec![Vec::new(); self.num_entities];
        for t in self.base_triples() {
            if t.head != t.tail {
                sets[t.head as usize].push(t.tail);
                sets[t.tail as usize].push(t.head);
            }
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        sets
    }

    /// Count of relation types per entity on the current triple set: entry
    /// (e, r) is the number of triples with head e and relation r. Run on an
    /// augmented graph so inverse relations capture tail-side participation.
    pub fn ontology_features(&self) -> Matrix {
        let cols = self.num_relations;
        let mut data = vec![0.0; self.num_entities * cols];
        for t in &self.triples {
            data[t.head as usize * cols + t.relation as usize] += 1.0;
        }
        Matrix::from_vec(self.num_entities, cols, data)
    }

    pub fn ones_features(&self, dim: usize) -> Result<Matrix> {
        if dim == 0 {
            return Err(KgError::InvalidDimension);
        }
        Ok(Matrix::filled(self.num_entities, dim, 1.0))
    }

    /// Writes base triples as TSV using vocabulary names (or `e{i}`/`r{i}`
    /// placeholders when no vocabulary is attached).
    pub fn write_triples(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(f);
        for t in self.base_triples() {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entity_name(t.head),
                self.relation_name(t.relation),
                self.entity_name(t.tail)
            )
            .map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

/// Parses a TSV triple file (`head<TAB>relation<TAB>tail` per line, `#`
/// comments and blank lines ignored) into an unaugmented graph. Vocabularies
/// are assigned by first occurrence, or extended from the given pair.
pub fn parse_triples(path: &Path, vocab: Option<(Vocab, Vocab)>) -> Result<KnowledgeGraph> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let r = BufReader::new(f);
    let (mut entities, mut relations) = vocab.unwrap_or_default();
    let mut triples = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split('\t');
        let (h, rel, t) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(h), Some(r), Some(t), None)
                if !h.is_empty() && !r.is_empty() && !t.is_empty() =>
            {
                (h, r, t)
            }
            _ => {
                return Err(KgError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                })
            }
        };
        triples.push(Triple::new(
            entities.intern(h),
            relations.intern(rel),
            entities.intern(t),
        ));
    }
    if triples.is_empty() {
        return Err(KgError::EmptyDataset {
            path: path.display().to_string(),
        });
    }
    KnowledgeGraph::from_triples(
        entities.len(),
        relations.len(),
        triples,
        Some(entities),
        Some(relations),
    )
}

/// Parses a triple file against fixed vocabularies (no extension); unknown
/// names are rejected. Used for held-out query files on an existing graph.
pub fn parse_triple_list(path: &Path, entities: &Vocab, relations: &Vocab) -> Result<Vec<Triple>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let r = BufReader::new(f);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
            });
        }
        let h = entities.get(fields[0]).ok_or_else(|| KgError::UnknownName {
            kind: "entity",
            name: fields[0].to_string(),
        })?;
        let rel = relations
            .get(fields[1])
            .ok_or_else(|| KgError::UnknownName {
                kind: "relation",
                name: fields[1].to_string(),
            })?;
        let t = entities.get(fields[2]).ok_or_else(|| KgError::UnknownName {
            kind: "entity",
            name: fields[2].to_string(),
        })?;
        out.push(Triple::new(h, rel, t));
    }
    Ok(out)
}
