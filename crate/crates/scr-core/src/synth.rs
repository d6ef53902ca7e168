//! Synthetic dataset generators for self-tests and the acceptance suite:
//! a two-cluster homophilic node-classification graph, a two-motif graph
//! classification corpus, a composition-rule KG family for inductive
//! generalization checks, and plain random KGs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::kg::{KnowledgeGraph, Triple};
use crate::task::{GraphExample, GraphTaskDataset, NodeTaskDataset, Split};
use crate::tensor::Matrix;

/// Uniform random unaugmented KG; duplicate draws are dropped by the graph
/// constructor.
pub fn random_kg(
    seed: u64,
    num_entities: usize,
    num_relations: usize,
    num_triples: usize,
) -> KnowledgeGraph {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let triples: Vec<Triple> = (0..num_triples)
        .map(|_| {
            Triple::new(
                rng.random_range(0..num_entities as u32),
                rng.random_range(0..num_relations as u32),
                rng.random_range(0..num_entities as u32),
            )
        })
        .collect();
    KnowledgeGraph::from_triples(num_entities, num_relations, triples, None, None)
        .expect("indices in range")
}

fn assign_splits(rng: &mut ChaCha20Rng, n: usize, train: f64, val: f64) -> Vec<Split> {
    (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.0..1.0);
            if x < train {
                Split::Train
            } else if x < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

/// Two equal clusters with dense intra-cluster and sparse inter-cluster
/// edges; features are noisy cluster prototypes, labels are the cluster ids.
/// Splits are roughly 30% train / 20% val / 50% test.
pub fn two_cluster_node_dataset(seed: u64, num_nodes: usize) -> NodeTaskDataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let half = num_nodes / 2;
    let cluster = |node: usize| usize::from(node >= half);
    let dim = 8;

    let mut edges = Vec::new();
    for node in 0..num_nodes {
        let c = cluster(node);
        let (lo, hi) = if c == 0 { (0, half) } else { (half, num_nodes) };
        for _ in 0..4 {
            let other = rng.random_range(lo..hi);
            if other != node {
                edges.push((node as u32, other as u32));
            }
        }
        if rng.random_range(0.0..1.0) < 0.05 {
            let (lo2, hi2) = if c == 0 { (half, num_nodes) } else { (0, half) };
            edges.push((node as u32, rng.random_range(lo2..hi2) as u32));
        }
    }

    let mut feat = Vec::with_capacity(num_nodes * dim);
    for node in 0..num_nodes {
        let sign = if cluster(node) == 0 { 1.0 } else { -1.0 };
        for j in 0..dim {
            let proto = if j % 2 == 0 { sign } else { -sign };
            feat.push(proto + rng.random_range(-0.3..0.3));
        }
    }

    let labels = (0..num_nodes).map(|n| Some(cluster(n) as u32)).collect();
    let split = assign_splits(&mut rng, num_nodes, 0.3, 0.2);
    NodeTaskDataset {
        num_nodes,
        edges,
        features: Matrix::from_vec(num_nodes, dim, feat),
        labels,
        class_names: vec!["cluster0".into(), "cluster1".into()],
        split,
    }
}

fn cycle_graph(n: usize) -> Vec<(u32, u32)> {
    (0..n as u32).map(|i| (i, (i + 1) % n as u32)).collect()
}

fn star_graph(n: usize) -> Vec<(u32, u32)> {
    (1..n as u32).map(|i| (0, i)).collect()
}

/// Graph classification corpus of two motifs (cycles vs stars) with
/// degree-one-hot node features. Splits ~50% train / 20% val / 30% test.
pub fn two_motif_graph_dataset(seed: u64, num_graphs: usize) -> GraphTaskDataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dim = 8;
    let mut graphs = Vec::with_capacity(num_graphs);
    let mut labels = Vec::with_capacity(num_graphs);
    for gi in 0..num_graphs {
        let n = rng.random_range(5..9usize);
        let class = gi % 2;
        let edges = if class == 0 { cycle_graph(n) } else { star_graph(n) };
        let mut degree = vec![0usize; n];
        for &(u, v) in &edges {
            degree[u as usize] += 1;
            degree[v as usize] += 1;
        }
        let mut feat = vec![0.0; n * dim];
        for (i, &d) in degree.iter().enumerate() {
            feat[i * dim + d.min(dim - 1)] = 1.0;
        }
        graphs.push(GraphExample {
            num_nodes: n,
            edges,
            features: Some(Matrix::from_vec(n, dim, feat)),
        });
        labels.push(Some(class as u32));
    }
    let split = assign_splits(&mut rng, num_graphs, 0.5, 0.2);
    GraphTaskDataset {
        graphs,
        labels,
        class_names: vec!["cycle".into(), "star".into()],
        split,
    }
}

/// A KG governed by one composition rule: r2 o r1 paths imply r3. The graph
/// keeps the r1/r2 support and a share of the implied r3 triples; the rest
/// are held out for evaluation (their support stays in the graph).
pub struct CompositionDataset {
    pub kg: KnowledgeGraph,
    pub eval_triples: Vec<Triple>,
}

pub fn composition_dataset(
    seed: u64,
    num_entities: usize,
    support_edges: usize,
    holdout_fraction: f64,
) -> CompositionDataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = num_entities as u32;
    let mut triples = Vec::new();
    let mut r1_edges = Vec::new();
    let mut r2_edges = Vec::new();
    for _ in 0..support_edges {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        r1_edges.push((a, b));
        triples.push(Triple::new(a, 0, b));
        let (c, d) = (rng.random_range(0..n), rng.random_range(0..n));
        r2_edges.push((c, d));
        triples.push(Triple::new(c, 1, d));
    }
    // implied r3 pairs: a -r1-> b -r2-> c
    let mut implied: Vec<(u32, u32)> = Vec::new();
    for &(a, b) in &r1_edges {
        for &(b2, c) in &r2_edges {
            if b == b2 && a != c {
                implied.push((a, c));
            }
        }
    }
    implied.sort_unstable();
    implied.dedup();
    // seeded shuffle, then split into graph triples and held-out evals
    for i in (1..implied.len()).rev() {
        let j = rng.random_range(0..=i);
        implied.swap(i, j);
    }
    let holdout = ((implied.len() as f64) * holdout_fraction).round() as usize;
    let mut eval_triples = Vec::with_capacity(holdout);
    for (i, &(a, c)) in implied.iter().enumerate() {
        if i < holdout {
            eval_triples.push(Triple::new(a, 2, c));
        } else {
            triples.push(Triple::new(a, 2, c));
        }
    }
    let kg = KnowledgeGraph::from_triples(num_entities, 3, triples, None, None)
        .expect("indices in range");
    CompositionDataset { kg, eval_triples }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cluster_is_homophilic_and_separable() {
        let ds = two_cluster_node_dataset(1, 100);
        assert_eq!(ds.num_nodes, 100);
        let intra = ds
            .edges
            .iter()
            .filter(|&&(u, v)| (u < 50) == (v < 50))
            .count();
        assert!(intra as f64 / ds.edges.len() as f64 > 0.9);
        let has_train = ds.split.iter().any(|&s| s == Split::Train);
        let has_test = ds.split.iter().any(|&s| s == Split::Test);
        assert!(has_train && has_test);
    }

    #[test]
    fn motif_corpus_shape() {
        let ds = two_motif_graph_dataset(2, 40);
        assert_eq!(ds.graphs.len(), 40);
        for (gi, g) in ds.graphs.iter().enumerate() {
            assert!(g.num_nodes >= 5);
            if ds.labels[gi] == Some(0) {
                assert_eq!(g.edges.len(), g.num_nodes); // cycle
            } else {
                assert_eq!(g.edges.len(), g.num_nodes - 1); // star
            }
        }
    }

    #[test]
    fn composition_holdout_is_supported_but_absent() {
        let ds = composition_dataset(3, 60, 120, 0.3);
        assert!(!ds.eval_triples.is_empty());
        for t in &ds.eval_triples {
            assert_eq!(t.relation, 2);
            assert!(!ds.kg.triples().contains(t), "held-out triple leaked");
            // support path exists: a -r1-> b -r2-> c for some b
            let supported = ds.kg.triples().iter().any(|t1| {
                t1.relation == 0
                    && t1.head == t.head
                    && ds
                        .kg
                        .triples()
                        .iter()
                        .any(|t2| t2.relation == 1 && t2.head == t1.tail && t2.tail == t.tail)
            });
            assert!(supported, "held-out triple lost its support path");
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = two_cluster_node_dataset(7, 60);
        let b = two_cluster_node_dataset(7, 60);
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.features.data(), b.features.data());
        let ca = composition_dataset(9, 40, 80, 0.25);
        let cb = composition_dataset(9, 40, 80, 0.25);
        assert_eq!(ca.kg.triples(), cb.kg.triples());
        assert_eq!(ca.eval_triples, cb.eval_triples);
    }
}
