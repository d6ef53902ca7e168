//! Relation graph: a graph whose nodes are the (augmented) relations of a
//! knowledge graph plus one semantic relation node `r_s`, and whose typed
//! edges record head/tail co-occurrence between relations.
//!
//! Two relations interact when some entity occurs on side `l1` of one and
//! side `l2` of the other, giving the edge `(r1, l1-l2, r2)` and its mirror.
//! Self-interactions (r1 = r2) are kept. Semantic neighbor sets add edges to
//! `r_s`: members of any set act as tails of implied semantic edges, owners
//! of non-empty sets act as heads. Interactions induced by identity-relation
//! triples are kept as the rules produce them.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::kg::KnowledgeGraph;
use crate::semantics::SemanticNeighborSet;
use crate::tensor::EdgeList;

/// The four fundamental interaction types. The index doubles as the row of
/// the interaction-embedding matrix P.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InteractionKind {
    HeadToHead = 0,
    HeadToTail = 1,
    TailToHead = 2,
    TailToTail = 3,
}

pub const NUM_INTERACTIONS: usize = 4;

impl InteractionKind {
    pub fn from_sides(first: Side, second: Side) -> Self {
        match (first, second) {
            (Side::Head, Side::Head) => InteractionKind::HeadToHead,
            (Side::Head, Side::Tail) => InteractionKind::HeadToTail,
            (Side::Tail, Side::Head) => InteractionKind::TailToHead,
            (Side::Tail, Side::Tail) => InteractionKind::TailToTail,
        }
    }

    /// The mirror of `(r1, l1-l2, r2)` is `(r2, l2-l1, r1)`.
    pub fn mirror(self) -> Self {
        match self {
            InteractionKind::HeadToHead => InteractionKind::HeadToHead,
            InteractionKind::HeadToTail => InteractionKind::TailToHead,
            InteractionKind::TailToHead => InteractionKind::HeadToTail,
            InteractionKind::TailToTail => InteractionKind::TailToTail,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            InteractionKind::HeadToHead => "h2h",
            InteractionKind::HeadToTail => "h2t",
            InteractionKind::TailToHead => "t2h",
            InteractionKind::TailToTail => "t2t",
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(InteractionKind::HeadToHead),
            1 => Some(InteractionKind::HeadToTail),
            2 => Some(InteractionKind::TailToHead),
            3 => Some(InteractionKind::TailToTail),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelEdge {
    pub src: u32,
    pub kind: InteractionKind,
    pub dst: u32,
}

#[derive(Clone, Debug)]
pub struct RelationGraph {
    /// |R+| + 1; the last node is the semantic relation r_s.
    num_nodes: usize,
    edges: Vec<RelEdge>,
}

impl RelationGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[RelEdge] {
        &self.edges
    }

    pub fn semantic_node(&self) -> u32 {
        (self.num_nodes - 1) as u32
    }

    pub fn is_isolated(&self, node: u32) -> bool {
        !self
            .edges
            .iter()
            .any(|e| e.src == node || e.dst == node)
    }

    /// Edge list for message passing over the relation graph; the edge type
    /// is the interaction index into P.
    pub fn edge_list(&self) -> EdgeList {
        let src = self.edges.iter().map(|e| e.src).collect();
        let rel = self.edges.iter().map(|e| e.kind.index() as u32).collect();
        let dst = self.edges.iter().map(|e| e.dst).collect();
        EdgeList::new(self.num_nodes, src, rel, dst)
    }

    /// Edges not touching r_s, for comparison against a graph built without
    /// semantic augmentation.
    pub fn edges_without_semantic_node(&self) -> Vec<RelEdge> {
        let rs = self.semantic_node();
        self.edges
            .iter()
            .copied()
            .filter(|e| e.src != rs && e.dst != rs)
            .collect()
    }

    /// Debug export: `src<TAB>interaction<TAB>dst` per line, numeric node
    /// ids, r_s last.
    pub fn write_tsv(&self, path: &Path) -> std::io::Result<()> {
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        for e in &self.edges {
            writeln!(w, "{}\t{}\t{}", e.src, e.kind.label(), e.dst)?;
        }
        w.flush()
    }
}

/// Distinct (relation, side) incidences per entity.
fn entity_incidence(kg: &KnowledgeGraph) -> Vec<Vec<(u32, Side)>> {
    let mut inc: Vec<BTreeSet<(u32, u8)>> = vec![BTreeSet::new(); kg.num_entities()];
    for t in kg.triples() {
        inc[t.head as usize].insert((t.relation, 0));
        inc[t.tail as usize].insert((t.relation, 1));
    }
    inc.into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(r, side)| (r, if side == 0 { Side::Head } else { Side::Tail }))
                .collect()
        })
        .collect()
}

/// Builds the semantic-augmented relation graph of an augmented KG. With
/// all-empty neighbor sets r_s stays isolated and dropping it leaves the
/// plain co-occurrence relation graph.
pub fn build_relation_graph(kg: &KnowledgeGraph, sem: &SemanticNeighborSet) -> RelationGraph {
    assert!(kg.is_augmented(), "relation graph requires an augmented KG");
    assert_eq!(sem.num_entities(), kg.num_entities());
    let num_rels = kg.num_relations();
    let rs = num_rels as u32;
    let incidence = entity_incidence(kg);

    let mut set: BTreeSet<RelEdge> = BTreeSet::new();
    for inc in &incidence {
        for &(r1, l1) in inc {
            for &(r2, l2) in inc {
                set.insert(RelEdge {
                    src: r1,
                    kind: InteractionKind::from_sides(l1, l2),
                    dst: r2,
                });
            }
        }
    }

    // Members of any semantic neighbor set sit on the tail side of the
    // implied r_s edges; owners of non-empty sets sit on the head side.
    for &e in &sem.member_entities() {
        for &(r1, l1) in &incidence[e as usize] {
            set.insert(RelEdge {
                src: r1,
                kind: InteractionKind::from_sides(l1, Side::Tail),
                dst: rs,
            });
            set.insert(RelEdge {
                src: rs,
                kind: InteractionKind::from_sides(Side::Tail, l1),
                dst: r1,
            });
        }
    }
    for &owner in &sem.owners() {
        for &(r1, l1) in &incidence[owner as usize] {
            set.insert(RelEdge {
                src: r1,
                kind: InteractionKind::from_sides(l1, Side::Head),
                dst: rs,
            });
            set.insert(RelEdge {
                src: rs,
                kind: InteractionKind::from_sides(Side::Head, l1),
                dst: r1,
            });
        }
    }

    RelationGraph {
        num_nodes: num_rels + 1,
        edges: set.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{KnowledgeGraph, Triple};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kg_from(triples: Vec<Triple>, n_e: usize, n_r: usize) -> KnowledgeGraph {
        KnowledgeGraph::from_triples(n_e, n_r, triples, None, None)
            .unwrap()
            .augment()
            .unwrap()
    }

    fn has_edge(g: &RelationGraph, src: u32, kind: InteractionKind, dst: u32) -> bool {
        g.edges().contains(&RelEdge { src, kind, dst })
    }

    #[test]
    fn chain_produces_tail_to_head() {
        // base {(a,r1,b),(b,r2,c)}: b is tail of r1 and head of r2.
        let kg = kg_from(vec![Triple::new(0, 0, 1), Triple::new(1, 1, 2)], 3, 2);
        let sem = SemanticNeighborSet::empty(3);
        let g = build_relation_graph(&kg, &sem);
        assert!(has_edge(&g, 0, InteractionKind::TailToHead, 1));
        assert!(has_edge(&g, 1, InteractionKind::HeadToTail, 0));
    }

    #[test]
    fn shared_head_produces_head_to_head_and_self_edges() {
        // base {(a,r1,b),(a,r2,c)}
        let kg = kg_from(vec![Triple::new(0, 0, 1), Triple::new(0, 1, 2)], 3, 2);
        let sem = SemanticNeighborSet::empty(3);
        let g = build_relation_graph(&kg, &sem);
        assert!(has_edge(&g, 0, InteractionKind::HeadToHead, 1));
        assert!(has_edge(&g, 1, InteractionKind::HeadToHead, 0));
        assert!(has_edge(&g, 0, InteractionKind::HeadToHead, 0));
    }

    #[test]
    fn mirror_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kg = random_kg(&mut rng, 10, 3, 25);
        let sem = random_sem(&mut rng, 10, 2);
        let g = build_relation_graph(&kg, &sem);
        for e in g.edges() {
            assert!(
                has_edge(&g, e.dst, e.kind.mirror(), e.src),
                "missing mirror of {e:?}"
            );
        }
    }

    #[test]
    fn empty_sem_isolates_semantic_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kg = random_kg(&mut rng, 8, 2, 20);
        let g = build_relation_graph(&kg, &SemanticNeighborSet::empty(8));
        assert!(g.is_isolated(g.semantic_node()));
        // Dropping r_s leaves exactly the co-occurrence graph.
        assert_eq!(g.edges_without_semantic_node(), g.edges().to_vec());
    }

    #[test]
    fn monotone_under_triple_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut triples: Vec<Triple> = (0..15)
            .map(|_| {
                Triple::new(
                    rng.random_range(0..8u32),
                    rng.random_range(0..2u32),
                    rng.random_range(0..8u32),
                )
            })
            .collect();
        let sem = SemanticNeighborSet::empty(8);
        let g1 = build_relation_graph(
            &KnowledgeGraph::from_triples(8, 2, triples.clone(), None, None)
                .unwrap()
                .augment()
                .unwrap(),
            &sem,
        );
        triples.push(Triple::new(3, 1, 6));
        let g2 = build_relation_graph(
            &KnowledgeGraph::from_triples(8, 2, triples, None, None)
                .unwrap()
                .augment()
                .unwrap(),
            &sem,
        );
        for e in g1.edges() {
            assert!(g2.edges().contains(e), "edge {e:?} lost after addition");
        }
    }

    fn random_kg(rng: &mut ChaCha8Rng, n_e: usize, n_r: usize, n_t: usize) -> KnowledgeGraph {
        let triples: Vec<Triple> = (0..n_t)
            .map(|_| {
                Triple::new(
                    rng.random_range(0..n_e as u32),
                    rng.random_range(0..n_r as u32),
                    rng.random_range(0..n_e as u32),
                )
            })
            .collect();
        kg_from(triples, n_e, n_r)
    }

    fn random_sem(rng: &mut ChaCha8Rng, n_e: usize, k: usize) -> SemanticNeighborSet {
        let sets = (0..n_e)
            .map(|i| {
                (0..rng.random_range(0..=k))
                    .map(|_| (rng.random_range(0..n_e as u32), 0.95))
                    .filter(|&(j, _)| j as usize != i)
                    .collect()
            })
            .collect();
        SemanticNeighborSet::from_sets(sets)
    }

    /// Quadratic oracle: scan every pair of triples for shared entities in
    /// every side combination, then apply the two semantic rules by direct
    /// set scans.
    fn brute_force(kg: &KnowledgeGraph, sem: &SemanticNeighborSet) -> BTreeSet<RelEdge> {
        let mut out = BTreeSet::new();
        let triples = kg.triples();
        let endpoint = |t: &Triple, s: Side| match s {
            Side::Head => t.head,
            Side::Tail => t.tail,
        };
        let sides = [Side::Head, Side::Tail];
        for t1 in triples {
            for t2 in triples {
                for l1 in sides {
                    for l2 in sides {
                        if endpoint(t1, l1) == endpoint(t2, l2) {
                            out.insert(RelEdge {
                                src: t1.relation,
                                kind: InteractionKind::from_sides(l1, l2),
                                dst: t2.relation,
                            });
                            out.insert(RelEdge {
                                src: t2.relation,
                                kind: InteractionKind::from_sides(l2, l1),
                                dst: t1.relation,
                            });
                        }
                    }
                }
            }
        }
        let rs = kg.num_relations() as u32;
        for t in triples {
            for l1 in sides {
                let e = endpoint(t, l1);
                let is_member = (0..sem.num_entities() as u32)
                    .any(|v| sem.neighbors(v).iter().any(|&(m, _)| m == e));
                if is_member {
                    out.insert(RelEdge {
                        src: t.relation,
                        kind: InteractionKind::from_sides(l1, Side::Tail),
                        dst: rs,
                    });
                    out.insert(RelEdge {
                        src: rs,
                        kind: InteractionKind::from_sides(Side::Tail, l1),
                        dst: t.relation,
                    });
                }
                if !sem.neighbors(e).is_empty() {
                    out.insert(RelEdge {
                        src: t.relation,
                        kind: InteractionKind::from_sides(l1, Side::Head),
                        dst: rs,
                    });
                    out.insert(RelEdge {
                        src: rs,
                        kind: InteractionKind::from_sides(Side::Head, l1),
                        dst: t.relation,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn matches_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for round in 0..40 {
            let kg = random_kg(&mut rng, 9, 3, 30);
            let sem = random_sem(&mut rng, 9, 3);
            let g = build_relation_graph(&kg, &sem);
            let expected = brute_force(&kg, &sem);
            let got: BTreeSet<RelEdge> = g.edges().iter().copied().collect();
            assert_eq!(got, expected, "round {round}");
        }
    }

    #[test]
    fn construction_time_stays_quadratic_in_degree() {
        // 100k triples over 5000 entities and 8 relations; the per-entity
        // incidence sets stay small, so this must finish quickly.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let kg = random_kg(&mut rng, 5000, 8, 100_000);
        let start = std::time::Instant::now();
        let g = build_relation_graph(&kg, &SemanticNeighborSet::empty(5000));
        let elapsed = start.elapsed();
        assert!(g.edges().len() > 0);
        assert!(
            elapsed.as_secs_f64() < 30.0,
            "relation graph took {elapsed:?}"
        );
    }

    #[test]
    fn tsv_export_round_trips_by_eye() {
        let kg = kg_from(vec![Triple::new(0, 0, 1)], 2, 1);
        let g = build_relation_graph(&kg, &SemanticNeighborSet::empty(2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("relgraph.tsv");
        g.write_tsv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), g.edges().len());
        assert!(text.lines().all(|l| l.split('\t').count() == 3));
    }
}
