//! The reasoning model: conditional message passing (CMP) over entities and
//! relations, semantic initialization, the frozen semantic propagation pass,
//! fusion, and candidate scoring.
//!
//! One CMP layer sends the DistMult message `h_src ⊙ proj_l(rel)` along every
//! edge, aggregates MEAN and STD of incoming messages per node, and updates
//! `h <- h + relu(gamma ⊙ layernorm(W [h ; mean ; std] + b) + beta)`. The
//! relation-level CMP runs on the relation graph with the four interaction
//! embeddings; the entity-level CMP runs on the KG with rows of the relation
//! representations as edge-type embeddings. Both entity-level passes (query
//! conditional and semantic) share the same layer parameters; the semantic
//! pass contributes no gradients.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::kg::{KnowledgeGraph, Query};
use crate::relgraph::{RelationGraph, NUM_INTERACTIONS};
use crate::semantics::SemanticNeighborSet;
use crate::tensor::{EdgeList, Matrix, NodeId, Tape, TensorError};

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("edge type {relation} has no embedding (only {available} rows)")]
    MissingRelation { relation: u32, available: usize },
    #[error("query relation {relation} is not a node of the relation graph ({nodes} nodes)")]
    QueryRelation { relation: u32, nodes: usize },
    #[error("unified feature width {got} does not match model dimension {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("state rows {got} do not match graph nodes {expected}")]
    StateRows { got: usize, expected: usize },
}

/// Default hidden dimension.
pub const DEFAULT_DIM: usize = 64;
/// Default number of propagation layers (relation-level and entity-level).
pub const DEFAULT_LAYERS: usize = 6;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CmpLayer {
    /// d x d projection applied to the relation embeddings at this layer.
    pub rel_proj: Matrix,
    /// 3d x d update weight over [self ; mean ; std].
    pub update_w: Matrix,
    /// 1 x d update bias.
    pub update_b: Matrix,
    /// 1 x d layer-norm scale.
    pub ln_gamma: Matrix,
    /// 1 x d layer-norm shift.
    pub ln_beta: Matrix,
}

impl CmpLayer {
    fn init(dim: usize, rng: &mut impl Rng) -> Self {
        CmpLayer {
            rel_proj: Matrix::glorot_uniform(dim, dim, rng),
            update_w: Matrix::glorot_uniform(3 * dim, dim, rng),
            update_b: Matrix::zeros(1, dim),
            ln_gamma: Matrix::filled(1, dim, 1.0),
            ln_beta: Matrix::zeros(1, dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Mlp {
    fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            w1: Matrix::glorot_uniform(d_in, d_hidden, rng),
            b1: Matrix::zeros(1, d_hidden),
            w2: Matrix::glorot_uniform(d_hidden, d_out, rng),
            b2: Matrix::zeros(1, d_out),
        }
    }

    /// All-zero MLP of the same shape; used by the reduction checks.
    pub fn zeroed(&self) -> Mlp {
        Mlp {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(1, self.b2.cols()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dim: usize,
    pub num_layers: usize,
    /// 4 x d embeddings of the relation-graph interaction types (P).
    pub interaction_embs: Matrix,
    /// Layers of the relation-level CMP.
    pub rel_layers: Vec<CmpLayer>,
    /// Layers of the entity-level CMP, shared by the conditional and the
    /// semantic pass.
    pub ent_layers: Vec<CmpLayer>,
    /// 1 x d shared initialization vector for semantic neighbors (v_a).
    /// Must keep every entry non-zero throughout training.
    pub semantic_seed: Matrix,
    /// d -> d -> d fusion MLP applied to the semantic representation.
    pub merge_mlp: Mlp,
    /// d -> d -> 1 scoring MLP.
    pub score_mlp: Mlp,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit layer-norm scales, and
    /// `v_a ~ U(0.5, 1.0)` so the non-zero requirement holds from step 0.
    pub fn init(dim: usize, num_layers: usize, rng: &mut impl Rng) -> Self {
        ModelParams {
            dim,
            num_layers,
            interaction_embs: Matrix::glorot_uniform(NUM_INTERACTIONS, dim, rng),
            rel_layers: (0..num_layers).map(|_| CmpLayer::init(dim, rng)).collect(),
            ent_layers: (0..num_layers).map(|_| CmpLayer::init(dim, rng)).collect(),
            semantic_seed: Matrix::uniform(1, dim, 0.5, 1.0, rng),
            merge_mlp: Mlp::init(dim, dim, dim, rng),
            score_mlp: Mlp::init(dim, dim, 1, rng),
        }
    }

    /// True while every entry of v_a is non-zero (the runtime assumption
    /// behind target-node distinguishability).
    pub fn semantic_seed_nonzero(&self) -> bool {
        self.semantic_seed.data().iter().all(|&v| v != 0.0)
    }

    /// Smallest |v_a| entry, for diagnostics.
    pub fn semantic_seed_min_abs(&self) -> f64 {
        self.semantic_seed
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Canonical (name, tensor) listing; the order is the contract for
    /// checkpoints and optimizer state.
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        out.push(("interaction_embs".to_string(), self.interaction_embs.clone()));
        for (prefix, layers) in [("rel_layers", &self.rel_layers), ("ent_layers", &self.ent_layers)]
        {
            for (l, layer) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{l}.rel_proj"), layer.rel_proj.clone()));
                out.push((format!("{prefix}.{l}.update_w"), layer.update_w.clone()));
                out.push((format!("{prefix}.{l}.update_b"), layer.update_b.clone()));
                out.push((format!("{prefix}.{l}.ln_gamma"), layer.ln_gamma.clone()));
                out.push((format!("{prefix}.{l}.ln_beta"), layer.ln_beta.clone()));
            }
        }
        out.push(("semantic_seed".to_string(), self.semantic_seed.clone()));
        for (prefix, mlp) in [("merge_mlp", &self.merge_mlp), ("score_mlp", &self.score_mlp)] {
            out.push((format!("{prefix}.w1"), mlp.w1.clone()));
            out.push((format!("{prefix}.b1"), mlp.b1.clone()));
            out.push((format!("{prefix}.w2"), mlp.w2.clone()));
            out.push((format!("{prefix}.b2"), mlp.b2.clone()));
        }
        out
    }

    /// Replaces tensors from the same canonical order.
    pub fn set_from_tensors(&mut self, tensors: &[Matrix]) {
        let mut it = tensors.iter().cloned();
        let mut next = || it.next().expect("tensor list too short");
        self.interaction_embs = next();
        for layers in [&mut self.rel_layers, &mut self.ent_layers] {
            for layer in layers.iter_mut() {
                layer.rel_proj = next();
                layer.update_w = next();
                layer.update_b = next();
                layer.ln_gamma = next();
                layer.ln_beta = next();
            }
        }
        self.semantic_seed = next();
        for mlp in [&mut self.merge_mlp, &mut self.score_mlp] {
            mlp.w1 = next();
            mlp.b1 = next();
            mlp.w2 = next();
            mlp.b2 = next();
        }
    }
}

// ---------------------------------------------------------------------------
// Tape bindings
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct BoundLayer {
    pub rel_proj: NodeId,
    pub update_w: NodeId,
    pub update_b: NodeId,
    pub ln_gamma: NodeId,
    pub ln_beta: NodeId,
}

#[derive(Clone, Copy)]
pub struct BoundMlp {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Parameters registered on a tape. `leaves` follows the canonical
/// `named_tensors` order so gradients map back by position.
pub struct BoundParams {
    pub interaction_embs: NodeId,
    pub rel_layers: Vec<BoundLayer>,
    pub ent_layers: Vec<BoundLayer>,
    pub semantic_seed: NodeId,
    pub merge_mlp: BoundMlp,
    pub score_mlp: BoundMlp,
    pub leaves: Vec<NodeId>,
}

impl ModelParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let mut leaves = Vec::new();
        let mut reg = |tape: &mut Tape, m: &Matrix, leaves: &mut Vec<NodeId>| {
            let id = if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            };
            leaves.push(id);
            id
        };
        let interaction_embs = reg(tape, &self.interaction_embs, &mut leaves);
        let bind_layers = |tape: &mut Tape, layers: &[CmpLayer], leaves: &mut Vec<NodeId>| {
            layers
                .iter()
                .map(|l| BoundLayer {
                    rel_proj: reg(tape, &l.rel_proj, leaves),
                    update_w: reg(tape, &l.update_w, leaves),
                    update_b: reg(tape, &l.update_b, leaves),
                    ln_gamma: reg(tape, &l.ln_gamma, leaves),
                    ln_beta: reg(tape, &l.ln_beta, leaves),
                })
                .collect::<Vec<_>>()
        };
        let rel_layers = bind_layers(tape, &self.rel_layers, &mut leaves);
        let ent_layers = bind_layers(tape, &self.ent_layers, &mut leaves);
        let semantic_seed = reg(tape, &self.semantic_seed, &mut leaves);
        let bind_mlp = |tape: &mut Tape, m: &Mlp, leaves: &mut Vec<NodeId>| BoundMlp {
            w1: reg(tape, &m.w1, leaves),
            b1: reg(tape, &m.b1, leaves),
            w2: reg(tape, &m.w2, leaves),
            b2: reg(tape, &m.b2, leaves),
        };
        let merge_mlp = bind_mlp(tape, &self.merge_mlp, &mut leaves);
        let score_mlp = bind_mlp(tape, &self.score_mlp, &mut leaves);
        BoundParams {
            interaction_embs,
            rel_layers,
            ent_layers,
            semantic_seed,
            merge_mlp,
            score_mlp,
            leaves,
        }
    }
}

// ---------------------------------------------------------------------------
// Per-graph reasoning context
// ---------------------------------------------------------------------------

/// Preprocessed structures for one (graph, feature type) pair.
#[derive(Clone)]
pub struct KgInstance {
    pub num_entities: usize,
    pub num_relation_nodes: usize,
    pub kg_edges: Arc<EdgeList>,
    pub rg_edges: Arc<EdgeList>,
    pub sem: SemanticNeighborSet,
    /// |E| x d unified feature matrix.
    pub unified: Matrix,
}

impl KgInstance {
    pub fn new(
        kg: &KnowledgeGraph,
        rg: &RelationGraph,
        sem: SemanticNeighborSet,
        unified: Matrix,
    ) -> Self {
        KgInstance {
            num_entities: kg.num_entities(),
            num_relation_nodes: rg.num_nodes(),
            kg_edges: Arc::new(kg.edge_list()),
            rg_edges: Arc::new(rg.edge_list()),
            sem,
            unified,
        }
    }
}

/// Query-independent quantities: R_g over the relation graph and the frozen
/// semantic representation H_g. Recomputed whenever parameters change;
/// shared by every query in between.
#[derive(Clone, Debug)]
pub struct GlobalContext {
    pub r_g: Matrix,
    pub h_g: Matrix,
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// L layers of conditional message passing. `rel_embs` holds one row per
/// edge type of `edges`; each layer projects it before messaging.
pub fn cmp_propagate(
    tape: &mut Tape,
    init: NodeId,
    edges: &Arc<EdgeList>,
    rel_embs: NodeId,
    layers: &[BoundLayer],
) -> Result<NodeId> {
    if tape.value(init).rows() != edges.num_nodes {
        return Err(ModelError::StateRows {
            got: tape.value(init).rows(),
            expected: edges.num_nodes,
        });
    }
    if let Some(maxr) = edges.max_rel() {
        let available = tape.value(rel_embs).rows();
        if maxr as usize >= available {
            return Err(ModelError::MissingRelation {
                relation: maxr,
                available,
            });
        }
    }
    let mut states = init;
    for layer in layers {
        let projected = tape.matmul(rel_embs, layer.rel_proj)?;
        let agg = tape.edge_agg(states, projected, edges.clone())?;
        let cat = tape.concat_cols(states, agg)?;
        let z = tape.matmul(cat, layer.update_w)?;
        let z = tape.add_row(z, layer.update_b)?;
        let y = tape.layer_norm(z);
        let y = tape.mul_row(y, layer.ln_gamma)?;
        let y = tape.add_row(y, layer.ln_beta)?;
        let y = tape.relu(y);
        states = tape.add(states, y)?;
    }
    Ok(states)
}

fn mlp_apply(tape: &mut Tape, mlp: &BoundMlp, x: NodeId) -> Result<NodeId> {
    let z = tape.matmul(x, mlp.w1)?;
    let z = tape.add_row(z, mlp.b1)?;
    let z = tape.relu(z);
    let out = tape.matmul(z, mlp.w2)?;
    Ok(tape.add_row(out, mlp.b2)?)
}

/// Query-independent relation representations: all-ones initialization on
/// every relation-graph node.
pub fn global_relation_representations(
    tape: &mut Tape,
    bound: &BoundParams,
    num_relation_nodes: usize,
    rg_edges: &Arc<EdgeList>,
    dim: usize,
) -> Result<NodeId> {
    let init = tape.constant(Matrix::filled(num_relation_nodes, dim, 1.0));
    cmp_propagate(tape, init, rg_edges, bound.interaction_embs, &bound.rel_layers)
}

/// Query-conditional relation representations: the all-ones row sits only at
/// the query relation's node.
pub fn query_relation_representations(
    tape: &mut Tape,
    bound: &BoundParams,
    num_relation_nodes: usize,
    rg_edges: &Arc<EdgeList>,
    dim: usize,
    query_relation: u32,
) -> Result<NodeId> {
    if query_relation as usize >= num_relation_nodes {
        return Err(ModelError::QueryRelation {
            relation: query_relation,
            nodes: num_relation_nodes,
        });
    }
    let ones = tape.constant(Matrix::filled(1, dim, 1.0));
    let init = tape.scatter_rows(ones, vec![query_relation as usize], vec![0], num_relation_nodes)?;
    cmp_propagate(tape, init, rg_edges, bound.interaction_embs, &bound.rel_layers)
}

/// Semantic-injected initialization: row(e_q) = r_q, row(e) = v_a for every
/// semantic neighbor e of e_q, all other rows zero.
pub fn conditional_init(
    tape: &mut Tape,
    query: Query,
    num_entities: usize,
    query_rel_row: NodeId,
    semantic_seed: NodeId,
    sem: &SemanticNeighborSet,
) -> Result<NodeId> {
    let init = tape.scatter_rows(
        query_rel_row,
        vec![query.source as usize],
        vec![0],
        num_entities,
    )?;
    let neighbors = sem.neighbors(query.source);
    if neighbors.is_empty() {
        return Ok(init);
    }
    let dst: Vec<usize> = neighbors.iter().map(|&(e, _)| e as usize).collect();
    let src = vec![0usize; dst.len()];
    let seeded = tape.scatter_rows(semantic_seed, dst, src, num_entities)?;
    Ok(tape.add(init, seeded)?)
}

/// Computes R_g and the frozen semantic representation H_g for the current
/// parameters. Runs off any training tape: no gradients flow through it.
pub fn compute_global_context(params: &ModelParams, inst: &KgInstance) -> Result<GlobalContext> {
    if inst.unified.cols() != params.dim {
        return Err(ModelError::FeatureDim {
            got: inst.unified.cols(),
            expected: params.dim,
        });
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let r_g_id = global_relation_representations(
        &mut tape,
        &bound,
        inst.num_relation_nodes,
        &inst.rg_edges,
        params.dim,
    )?;
    let u = tape.constant(inst.unified.clone());
    let h_g_id = cmp_propagate(&mut tape, u, &inst.kg_edges, r_g_id, &bound.ent_layers)?;
    Ok(GlobalContext {
        r_g: tape.value(r_g_id).clone(),
        h_g: tape.value(h_g_id).clone(),
    })
}

/// Full hidden states for one query: conditional CMP with semantic
/// initialization plus the fused (frozen) semantic representation.
pub fn scmp_hidden(
    tape: &mut Tape,
    bound: &BoundParams,
    inst: &KgInstance,
    query: Query,
    ctx: &GlobalContext,
    dim: usize,
) -> Result<NodeId> {
    let r_q = query_relation_representations(
        tape,
        bound,
        inst.num_relation_nodes,
        &inst.rg_edges,
        dim,
        query.relation,
    )?;
    let rq_row = tape.select_rows(r_q, vec![query.relation as usize])?;
    let init = conditional_init(
        tape,
        query,
        inst.num_entities,
        rq_row,
        bound.semantic_seed,
        &inst.sem,
    )?;
    let h_cond = cmp_propagate(tape, init, &inst.kg_edges, r_q, &bound.ent_layers)?;
    let h_g = tape.constant(ctx.h_g.clone());
    let merged = mlp_apply(tape, &bound.merge_mlp, h_g)?;
    Ok(tape.add(h_cond, merged)?)
}

/// Plain conditional CMP without semantic initialization or fusion; the
/// reference pipeline the model reduces to with k = 0 and a zero merge MLP.
pub fn cmp_hidden(
    tape: &mut Tape,
    bound: &BoundParams,
    inst: &KgInstance,
    query: Query,
    dim: usize,
) -> Result<NodeId> {
    let r_q = query_relation_representations(
        tape,
        bound,
        inst.num_relation_nodes,
        &inst.rg_edges,
        dim,
        query.relation,
    )?;
    let rq_row = tape.select_rows(r_q, vec![query.relation as usize])?;
    let init = tape.scatter_rows(
        rq_row,
        vec![query.source as usize],
        vec![0],
        inst.num_entities,
    )?;
    cmp_propagate(tape, init, &inst.kg_edges, r_q, &bound.ent_layers)
}

/// Logits for the listed candidate rows of H (k x 1).
pub fn score_candidates(
    tape: &mut Tape,
    bound: &BoundParams,
    hidden: NodeId,
    candidates: &[u32],
) -> Result<NodeId> {
    let rows: Vec<usize> = candidates.iter().map(|&c| c as usize).collect();
    let sel = tape.select_rows(hidden, rows)?;
    mlp_apply(tape, &bound.score_mlp, sel)
}

/// Logits for all entities (|E| x 1).
pub fn score_all(tape: &mut Tape, bound: &BoundParams, hidden: NodeId) -> Result<NodeId> {
    mlp_apply(tape, &bound.score_mlp, hidden)
}

/// Convenience: no-grad scores over every entity for one query.
pub fn forward_scores(
    params: &ModelParams,
    inst: &KgInstance,
    query: Query,
    ctx: &GlobalContext,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let h = scmp_hidden(&mut tape, &bound, inst, query, ctx, params.dim)?;
    let logits = score_all(&mut tape, &bound, h)?;
    Ok(tape.value(logits).data().to_vec())
}
