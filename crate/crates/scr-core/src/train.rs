//! Training: filtered negative sampling, the binary cross-entropy objective
//! over positive/corrupted triples, Adam with gradient clipping, feature-type
//! cycling across graphs, per-epoch validation, and checkpointing.
//!
//! All randomness is derived statelessly from `(seed, purpose, indices)`, so
//! resuming from a checkpoint replays the exact schedule of an uninterrupted
//! run and results do not depend on the worker count. Parameters and
//! optimizer moments pass through the f32 checkpoint representation at every
//! epoch boundary; a reloaded run is therefore bit-identical to one that
//! never stopped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, FilterIndex};
use crate::kg::{KgError, KnowledgeGraph, Query, Triple};
use crate::model::{
    self, score_candidates, scmp_hidden, GlobalContext, KgInstance, ModelParams,
};
use crate::relgraph::build_relation_graph;
use crate::semantics::{semantic_neighbors, unify_features};
use crate::tensor::{Matrix, NodeId, Tape};

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Semantics(#[from] crate::semantics::SemanticsError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("no negative candidates exist for query ({entity}, {relation})")]
    NoNegatives { entity: u32, relation: u32 },
    #[error("feature type {0:?} requested but no provided features exist")]
    MissingFeature(FeatureType),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(
        "loss diverged (non-finite) at epoch {epoch}, batch {batch} on graph {graph} \
         with feature {feature:?}; offending queries: {queries:?}"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        graph: String,
        feature: FeatureType,
        queries: Vec<(u32, u32)>,
    },
    #[error(
        "semantic seed vector acquired a zero entry after step {step} \
         (min |v| = {min_abs}); aborting"
    )]
    SemanticSeedZero { step: u64, min_abs: f64 },
    #[error("checkpoint i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint format error: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum FeatureType {
    /// Feature matrix supplied with the dataset.
    Provided,
    /// All-ones features of the model dimension.
    Ones,
    /// Relation-type count features from the augmented graph.
    Ontology,
}

impl std::fmt::Display for FeatureType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FeatureType::Provided => "provided",
            FeatureType::Ones => "ones",
            FeatureType::Ontology => "ontology",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    /// Batches between feature-type reselections.
    pub feature_cycle_interval: usize,
    pub feature_set: Vec<FeatureType>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub dim: usize,
    pub num_layers: usize,
    pub semantic_k: usize,
    pub semantic_delta: f64,
    /// Worker threads; 0 uses one thread per logical CPU.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 16,
            negatives_per_positive: 16,
            epochs: 10,
            feature_cycle_interval: 100,
            feature_set: vec![FeatureType::Ones],
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            dim: model::DEFAULT_DIM,
            num_layers: model::DEFAULT_LAYERS,
            semantic_k: 2,
            semantic_delta: 0.9,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives_per_positive == 0 {
            return Err(TrainError::BadConfig(
                "negatives_per_positive must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.feature_set.is_empty() {
            return Err(TrainError::BadConfig("feature_set must be non-empty".into()));
        }
        if self.feature_cycle_interval == 0 {
            return Err(TrainError::BadConfig(
                "feature_cycle_interval must be >= 1".into(),
            ));
        }
        if self.dim == 0 || self.num_layers == 0 {
            return Err(TrainError::BadConfig("dim and num_layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// One pretraining graph with an instance per configured feature type and
/// its training/validation splits.
pub struct TrainGraph {
    pub name: String,
    pub kg: KnowledgeGraph,
    pub instances: Vec<(FeatureType, KgInstance)>,
    pub train_queries: Vec<Query>,
    pub valid_triples: Vec<Triple>,
}

impl TrainGraph {
    pub fn instance(&self, feature: FeatureType) -> &KgInstance {
        &self
            .instances
            .iter()
            .find(|(f, _)| *f == feature)
            .expect("feature type was prepared")
            .1
    }
}

/// Builds the per-feature-type instances (unified features, semantic
/// neighbor sets, relation graphs) and the tail-query training set (one
/// query per augmented direction of every base triple).
pub fn prepare_graph(
    name: &str,
    kg: KnowledgeGraph,
    provided: Option<Matrix>,
    valid_triples: Vec<Triple>,
    cfg: &TrainConfig,
) -> Result<TrainGraph> {
    assert!(kg.is_augmented(), "prepare_graph expects an augmented KG");
    let mut instances = Vec::new();
    for &feature in &cfg.feature_set {
        let raw = match feature {
            FeatureType::Provided => provided
                .clone()
                .ok_or(TrainError::MissingFeature(FeatureType::Provided))?,
            FeatureType::Ones => kg.ones_features(cfg.dim)?,
            FeatureType::Ontology => kg.ontology_features(),
        };
        let unified = unify_features(&raw, cfg.dim, cfg.seed)?;
        let sem = semantic_neighbors(&unified, &kg, cfg.semantic_k, cfg.semantic_delta)?;
        let rg = build_relation_graph(&kg, &sem);
        instances.push((
            feature,
            KgInstance::new(&kg, &rg, sem, unified.unified.clone()),
        ));
    }
    let b = kg.base_relation_count() as u32;
    let mut train_queries = Vec::with_capacity(2 * kg.base_triple_count());
    for t in kg.base_triples() {
        train_queries.push(Query::new(t.head, t.relation, Some(t.tail)));
        train_queries.push(Query::new(t.tail, t.relation + b, Some(t.head)));
    }
    Ok(TrainGraph {
        name: name.to_string(),
        kg,
        instances,
        train_queries,
        valid_triples,
    })
}

// ---------------------------------------------------------------------------
// Stateless RNG streams
// ---------------------------------------------------------------------------

fn mix(seed: u64, tag: &str, a: u64, b: u64, c: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut absorb = |x: u64| {
        h ^= x;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    };
    for &byte in tag.as_bytes() {
        absorb(byte as u64);
    }
    absorb(a);
    absorb(b);
    absorb(c);
    h
}

fn stream(seed: u64, tag: &str, a: u64, b: u64, c: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(mix(seed, tag, a, b, c))
}

fn shuffled_indices(len: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

/// Uniform filtered corruption: `n` entities drawn (with replacement) from
/// all entities excluding every known true tail of `(source, relation)`.
pub fn sample_negatives(
    kg: &KnowledgeGraph,
    query: Query,
    n: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<u32>> {
    let excluded = kg.neighbors(query.source, query.relation)?;
    let pool = kg.num_entities() - excluded.len();
    if pool == 0 {
        return Err(TrainError::NoNegatives {
            entity: query.source,
            relation: query.relation,
        });
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = rng.random_range(0..pool) as u32;
        for &e in &excluded {
            if e <= x {
                x += 1;
            } else {
                break;
            }
        }
        out.push(x);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Per-query objective from the (1+n) x 1 logits of [positive, negatives]:
/// `-log sigma(pos) - (1/n) * sum log(1 - sigma(neg_i))`.
pub fn query_loss(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let total = tape.value(logits).rows();
    debug_assert!(total >= 2);
    let pos = tape.select_rows(logits, vec![0])?;
    let neg = tape.select_rows(logits, (1..total).collect())?;
    let lp = tape.bce_with_logits(pos, Matrix::filled(1, 1, 1.0))?;
    let ln = tape.bce_with_logits(neg, Matrix::zeros(total - 1, 1))?;
    let lp = tape.sum_all(lp);
    let ln = tape.mean_all(ln);
    Ok(tape.add(lp, ln)?)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl Adam {
    fn new(tensors: &[Matrix]) -> Self {
        Adam {
            m: tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
            v: tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
            step: 0,
        }
    }

    fn apply(&mut self, cfg: &TrainConfig, tensors: &mut [Matrix], grads: &[Matrix]) {
        // global-norm clip
        let norm: f64 = grads
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if norm > cfg.grad_clip && norm > 0.0 {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.step as i32);
        for i in 0..tensors.len() {
            let g = &grads[i];
            let mut m = self.m[i].data().to_vec();
            let mut v = self.v[i].data().to_vec();
            let mut t = tensors[i].data().to_vec();
            for j in 0..t.len() {
                let gj = g.data()[j] * scale;
                m[j] = cfg.adam_beta1 * m[j] + (1.0 - cfg.adam_beta1) * gj;
                v[j] = cfg.adam_beta2 * v[j] + (1.0 - cfg.adam_beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                t[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
            self.m[i] = Matrix::from_vec(g.rows(), g.cols(), m);
            self.v[i] = Matrix::from_vec(g.rows(), g.cols(), v);
            tensors[i] = Matrix::from_vec(g.rows(), g.cols(), t);
        }
    }
}

fn quantize_f32(m: &Matrix) -> Matrix {
    Matrix::from_vec(
        m.rows(),
        m.cols(),
        m.data().iter().map(|&v| v as f32 as f64).collect(),
    )
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_mrr: Option<f64>,
    pub val_hits10: Option<f64>,
    pub active_feature: String,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    /// Parameters at the best validation MRR (final parameters when no
    /// validation split exists).
    pub best_params: ModelParams,
    pub best_val_mrr: Option<f64>,
    pub metrics: Vec<EpochRecord>,
    pub steps: u64,
    pub epochs_run: usize,
    pub final_epoch: usize,
    pub global_batch: u64,
    adam_m: Vec<Matrix>,
    adam_v: Vec<Matrix>,
}

impl TrainOutcome {
    /// Checkpoint of the final state (parameters, optimizer moments, and the
    /// stream position); resuming from it reproduces an uninterrupted run.
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::from_state(
            cfg,
            &self.params,
            self.steps,
            self.final_epoch,
            self.global_batch,
            &self.adam_m,
            &self.adam_v,
        )
    }
}

pub fn active_feature(cfg: &TrainConfig, global_batch: u64) -> FeatureType {
    let idx = (global_batch / cfg.feature_cycle_interval as u64) as usize % cfg.feature_set.len();
    cfg.feature_set[idx]
}

/// Trains from scratch or resumes from a checkpoint. `cfg.epochs` is the
/// total epoch count: a resumed run continues from the checkpoint's epoch
/// and reproduces the trace of an uninterrupted run exactly.
pub fn run_training(
    graphs: &[TrainGraph],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| TrainError::BadConfig(format!("thread pool: {e}")))?;
    pool.install(|| run_training_inner(graphs, cfg, resume))
}

fn run_training_inner(
    graphs: &[TrainGraph],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let mut params;
    let mut adam;
    let start_epoch;
    let mut global_batch: u64;
    match resume {
        Some(ck) => {
            let (p, a, meta) = ck.restore(cfg)?;
            params = p;
            adam = a;
            start_epoch = meta.epoch;
            global_batch = meta.global_batch;
        }
        None => {
            let mut rng = stream(cfg.seed, "init", 0, 0, 0);
            params = ModelParams::init(cfg.dim, cfg.num_layers, &mut rng);
            // Canonical state is the f32 checkpoint grid from step zero.
            let tensors: Vec<Matrix> = params
                .named_tensors()
                .into_iter()
                .map(|(_, m)| quantize_f32(&m))
                .collect();
            params.set_from_tensors(&tensors);
            adam = Adam::new(&tensors);
            start_epoch = 0;
            global_batch = 0;
        }
    }

    let mut metrics: Vec<EpochRecord> = Vec::new();
    let mut best_params = params.clone();
    let mut best_val = None::<f64>;

    for epoch in start_epoch..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let mut last_feature = cfg.feature_set[0];

        for (gi, graph) in graphs.iter().enumerate() {
            let mut order_rng = stream(cfg.seed, "shuffle", epoch as u64, gi as u64, 0);
            let order = shuffled_indices(graph.train_queries.len(), &mut order_rng);
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let feature = active_feature(cfg, global_batch);
                last_feature = feature;
                let inst = graph.instance(feature);
                let ctx = model::compute_global_context(&params, inst)?;
                let queries: Vec<Query> =
                    chunk.iter().map(|&i| graph.train_queries[i]).collect();

                let results: Vec<Result<(f64, Vec<Matrix>)>> = queries
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &q)| {
                        let mut rng = stream(
                            cfg.seed,
                            "neg",
                            epoch as u64,
                            global_batch,
                            slot as u64,
                        );
                        let negs =
                            sample_negatives(&graph.kg, q, cfg.negatives_per_positive, &mut rng)?;
                        query_forward_backward(&params, inst, &ctx, q, &negs, cfg.dim)
                    })
                    .collect();

                let mut grad_sum: Option<Vec<Matrix>> = None;
                let mut loss_sum = 0.0;
                for r in results {
                    let (loss, grads) = r?;
                    loss_sum += loss;
                    grad_sum = Some(match grad_sum {
                        None => grads,
                        Some(mut acc) => {
                            for (a, g) in acc.iter_mut().zip(grads.iter()) {
                                let data: Vec<f64> = a
                                    .data()
                                    .iter()
                                    .zip(g.data().iter())
                                    .map(|(x, y)| x + y)
                                    .collect();
                                *a = Matrix::from_vec(a.rows(), a.cols(), data);
                            }
                            acc
                        }
                    });
                }
                let batch_loss = loss_sum / queries.len() as f64;
                if !batch_loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_idx,
                        graph: graph.name.clone(),
                        feature,
                        queries: queries.iter().map(|q| (q.source, q.relation)).collect(),
                    });
                }
                epoch_loss += batch_loss;
                epoch_batches += 1;

                let scale = 1.0 / queries.len() as f64;
                let grads: Vec<Matrix> = grad_sum
                    .unwrap()
                    .into_iter()
                    .map(|g| {
                        Matrix::from_vec(
                            g.rows(),
                            g.cols(),
                            g.data().iter().map(|v| v * scale).collect(),
                        )
                    })
                    .collect();
                let mut tensors: Vec<Matrix> =
                    params.named_tensors().into_iter().map(|(_, m)| m).collect();
                adam.apply(cfg, &mut tensors, &grads);
                params.set_from_tensors(&tensors);
                if !params.semantic_seed_nonzero() {
                    return Err(TrainError::SemanticSeedZero {
                        step: adam.step,
                        min_abs: params.semantic_seed_min_abs(),
                    });
                }
                global_batch += 1;
            }
        }

        // Epoch boundary: canonical f32 state, then validation.
        let tensors: Vec<Matrix> = params
            .named_tensors()
            .into_iter()
            .map(|(_, m)| quantize_f32(&m))
            .collect();
        params.set_from_tensors(&tensors);
        for m in adam.m.iter_mut() {
            *m = quantize_f32(m);
        }
        for v in adam.v.iter_mut() {
            *v = quantize_f32(v);
        }

        let (val_mrr, val_hits10) = validate(&params, graphs, cfg)?;
        if let Some(mrr) = val_mrr {
            if best_val.map_or(true, |b| mrr > b) {
                best_val = Some(mrr);
                best_params = params.clone();
            }
        }
        metrics.push(EpochRecord {
            epoch,
            loss: if epoch_batches > 0 {
                epoch_loss / epoch_batches as f64
            } else {
                0.0
            },
            val_mrr,
            val_hits10,
            active_feature: last_feature.to_string(),
        });
    }

    let best_params = if best_val.is_some() {
        best_params
    } else {
        params.clone()
    };
    Ok(TrainOutcome {
        params,
        best_params,
        best_val_mrr: best_val,
        metrics,
        steps: adam.step,
        epochs_run: cfg.epochs.saturating_sub(start_epoch),
        final_epoch: cfg.epochs,
        global_batch,
        adam_m: adam.m,
        adam_v: adam.v,
    })
}

fn query_forward_backward(
    params: &ModelParams,
    inst: &KgInstance,
    ctx: &GlobalContext,
    query: Query,
    negatives: &[u32],
    dim: usize,
) -> Result<(f64, Vec<Matrix>)> {
    let answer = query.answer.expect("training query carries its answer");
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let h = scmp_hidden(&mut tape, &bound, inst, query, ctx, dim)?;
    let mut candidates = Vec::with_capacity(1 + negatives.len());
    candidates.push(answer);
    candidates.extend_from_slice(negatives);
    let logits = score_candidates(&mut tape, &bound, h, &candidates)?;
    let loss = query_loss(&mut tape, logits)?;
    let grads = tape.backward(loss)?;
    let out = bound.leaves.iter().map(|&id| grads.get(id)).collect();
    Ok((tape.value(loss).scalar(), out))
}

/// Aggregated filtered MRR / Hits@10 over every graph's validation triples,
/// evaluated with the first configured feature type.
fn validate(
    params: &ModelParams,
    graphs: &[TrainGraph],
    cfg: &TrainConfig,
) -> Result<(Option<f64>, Option<f64>)> {
    let mut ranks = Vec::new();
    for graph in graphs {
        if graph.valid_triples.is_empty() {
            continue;
        }
        let inst = graph.instance(cfg.feature_set[0]);
        let ctx = model::compute_global_context(params, inst)?;
        let filter = FilterIndex::new(
            &graph.kg,
            &[graph.kg.base_triples(), &graph.valid_triples],
        );
        let b = graph.kg.base_relation_count() as u32;
        let mut queries = Vec::with_capacity(2 * graph.valid_triples.len());
        for t in &graph.valid_triples {
            queries.push((Query::new(t.head, t.relation, Some(t.tail)), t.tail));
            queries.push((Query::new(t.tail, t.relation + b, Some(t.head)), t.head));
        }
        ranks.extend(eval::rank_queries(params, inst, &ctx, &queries, &filter)?);
    }
    if ranks.is_empty() {
        return Ok((None, None));
    }
    let m = eval::ranking_metrics(&ranks)?;
    Ok((Some(m.mrr), Some(m.hits10)))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"SCR1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    epoch: usize,
    global_batch: u64,
    step: u64,
}

/// Serialized training state: config echo, parameter tensors, optimizer
/// moments, and the derived-RNG position (seed lives in the config; the
/// epoch/batch counters pin the stream).
pub struct Checkpoint {
    version: u32,
    meta: CheckpointMeta,
    tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_state(
        cfg: &TrainConfig,
        params: &ModelParams,
        outcome_steps: u64,
        epoch: usize,
        global_batch: u64,
        adam_m: &[Matrix],
        adam_v: &[Matrix],
    ) -> Checkpoint {
        let named = params.named_tensors();
        let mut tensors: Vec<(String, Matrix)> = named.clone();
        for (i, (name, _)) in named.iter().enumerate() {
            tensors.push((format!("adam_m.{name}"), adam_m[i].clone()));
            tensors.push((format!("adam_v.{name}"), adam_v[i].clone()));
        }
        Checkpoint {
            version: VERSION,
            meta: CheckpointMeta {
                config: cfg.clone(),
                epoch,
                global_batch,
                step: outcome_steps,
            },
            tensors,
        }
    }

    pub fn epoch(&self) -> usize {
        self.meta.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.meta.config
    }

    /// Extracts the model parameters stored in this checkpoint.
    pub fn params(&self) -> Result<ModelParams> {
        let cfg = &self.meta.config;
        let mut rng = stream(cfg.seed, "init", 0, 0, 0);
        let mut params = ModelParams::init(cfg.dim, cfg.num_layers, &mut rng);
        let expected = params.named_tensors();
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, proto) in &expected {
            let found = self
                .tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| TrainError::Format(format!("missing tensor {name}")))?;
            if found.1.shape() != proto.shape() {
                return Err(TrainError::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    found.1.shape(),
                    proto.shape()
                )));
            }
            ordered.push(found.1.clone());
        }
        params.set_from_tensors(&ordered);
        Ok(params)
    }

    fn restore(&self, cfg: &TrainConfig) -> Result<(ModelParams, Adam, CheckpointMeta)> {
        if self.meta.config.dim != cfg.dim || self.meta.config.num_layers != cfg.num_layers {
            return Err(TrainError::Format(
                "checkpoint model shape does not match config".into(),
            ));
        }
        let params = self.params()?;
        let named = params.named_tensors();
        let mut adam = Adam::new(&named.iter().map(|(_, m)| m.clone()).collect::<Vec<_>>());
        for (i, (name, _)) in named.iter().enumerate() {
            for (prefix, target) in [("adam_m", &mut adam.m), ("adam_v", &mut adam.v)] {
                let key = format!("{prefix}.{name}");
                if let Some((_, m)) = self.tensors.iter().find(|(n, _)| *n == key) {
                    target[i] = m.clone();
                }
            }
        }
        adam.step = self.meta.step;
        Ok((params, adam, self.meta.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("partial");
        {
            let f = File::create(&tmp).map_err(io)?;
            let mut w = BufWriter::new(f);
            w.write_all(MAGIC).map_err(io)?;
            w.write_all(&self.version.to_le_bytes()).map_err(io)?;
            let blob = serde_json::to_vec(&self.meta)
                .map_err(|e| TrainError::Format(e.to_string()))?;
            w.write_all(&(blob.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&blob).map_err(io)?;
            for (name, m) in &self.tensors {
                let nb = name.as_bytes();
                w.write_all(&(nb.len() as u16).to_le_bytes()).map_err(io)?;
                w.write_all(nb).map_err(io)?;
                w.write_all(&2u32.to_le_bytes()).map_err(io)?;
                w.write_all(&(m.rows() as u32).to_le_bytes()).map_err(io)?;
                w.write_all(&(m.cols() as u32).to_le_bytes()).map_err(io)?;
                for &v in m.data() {
                    w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
                }
            }
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let f = File::open(path).map_err(io)?;
        let mut r = BufReader::new(f);
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(io)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(TrainError::Format("truncated checkpoint".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(TrainError::Format("bad magic (expected SCR1)".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(TrainError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let blob_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut pos, blob_len)?)
            .map_err(|e| TrainError::Format(format!("config blob: {e}")))?;
        let mut tensors = Vec::new();
        while pos < buf.len() {
            let name_len =
                u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| TrainError::Format("tensor name not UTF-8".into()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            if ndim != 2 {
                return Err(TrainError::Format(format!(
                    "tensor {name}: expected 2 dims, got {ndim}"
                )));
            }
            let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let payload = take(&mut pos, rows * cols * 4)?;
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        Ok(Checkpoint {
            version,
            meta,
            tensors,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;
    use rand_chacha::ChaCha8Rng;

    fn tiny_kg(n_e: usize, n_r: usize, triples: Vec<Triple>) -> KnowledgeGraph {
        KnowledgeGraph::from_triples(n_e, n_r, triples, None, None)
            .unwrap()
            .augment()
            .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            dim: 8,
            num_layers: 2,
            batch_size: 4,
            negatives_per_positive: 2,
            epochs: 1,
            feature_set: vec![FeatureType::Ones],
            semantic_k: 1,
            semantic_delta: 0.0,
            threads: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn negative_sampling_respects_exclusions() {
        // 3 entities, (a, r, b) is the only r-edge from a: negatives in {a, c}.
        let kg = tiny_kg(3, 1, vec![Triple::new(0, 0, 1)]);
        let q = Query::new(0, 0, Some(1));
        let mut rng = stream(7, "test", 0, 0, 0);
        for _ in 0..100 {
            let negs = sample_negatives(&kg, q, 4, &mut rng).unwrap();
            for &n in &negs {
                assert!(n == 0 || n == 2);
            }
        }
    }

    #[test]
    fn negatives_never_hit_known_positives() {
        use rand::SeedableRng;
        let mut gen = ChaCha8Rng::seed_from_u64(3);
        let triples: Vec<Triple> = (0..40)
            .map(|_| {
                Triple::new(
                    gen.random_range(0..10u32),
                    gen.random_range(0..2u32),
                    gen.random_range(0..10u32),
                )
            })
            .collect();
        let kg = tiny_kg(10, 2, triples);
        let mut rng = stream(1, "negcheck", 0, 0, 0);
        for i in 0..1000u64 {
            let q = Query::new((i % 10) as u32, (i % 5) as u32, None);
            if let Ok(negs) = sample_negatives(&kg, q, 3, &mut rng) {
                for &n in &negs {
                    assert!(!kg.contains(Triple::new(q.source, q.relation, n)));
                }
            }
        }
    }

    #[test]
    fn negative_pool_of_one_duplicates() {
        // two entities, (a, r, b): pool for (a, r) is only {a}.
        let kg = tiny_kg(2, 1, vec![Triple::new(0, 0, 1)]);
        let mut rng = stream(2, "pool1", 0, 0, 0);
        let negs = sample_negatives(&kg, Query::new(0, 0, None), 4, &mut rng).unwrap();
        assert_eq!(negs, vec![0, 0, 0, 0]);
    }

    #[test]
    fn no_negative_pool_is_an_error() {
        // single entity with identity edge: every tail is a known positive.
        let kg = tiny_kg(1, 1, vec![Triple::new(0, 0, 0)]);
        let mut rng = stream(3, "none", 0, 0, 0);
        assert!(matches!(
            sample_negatives(&kg, Query::new(0, 0, None), 1, &mut rng),
            Err(TrainError::NoNegatives { .. })
        ));
    }

    #[test]
    fn loss_zero_logits_value() {
        // all logits 0, n = 1: -ln 0.5 - ln 0.5 = 1.3863
        let mut tape = Tape::new();
        let logits = tape.param(Matrix::zeros(2, 1));
        let loss = query_loss(&mut tape, logits).unwrap();
        assert!((tape.value(loss).scalar() - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_scalar_reimplementation() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(1..6usize);
            let vals: Vec<f64> = (0..n + 1).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut tape = Tape::new();
            let logits = tape.param(Matrix::from_vec(n + 1, 1, vals.clone()));
            let loss = query_loss(&mut tape, logits).unwrap();
            let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
            let mut expect = -(sigma(vals[0]).ln());
            let mut neg = 0.0;
            for &v in &vals[1..] {
                neg += (1.0 - sigma(v)).ln();
            }
            expect -= neg / n as f64;
            assert!((tape.value(loss).scalar() - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_cycle_visits_all_members_evenly() {
        let cfg = TrainConfig {
            feature_cycle_interval: 3,
            feature_set: vec![FeatureType::Ones, FeatureType::Ontology],
            ..TrainConfig::default()
        };
        let mut counts = [0usize; 2];
        for batch in 0..60u64 {
            match active_feature(&cfg, batch) {
                FeatureType::Ones => counts[0] += 1,
                FeatureType::Ontology => counts[1] += 1,
                FeatureType::Provided => unreachable!(),
            }
        }
        assert_eq!(counts[0], counts[1]);
    }

    fn demo_graph(cfg: &TrainConfig) -> TrainGraph {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let triples: Vec<Triple> = (0..30)
            .map(|_| {
                Triple::new(
                    rng.random_range(0..12u32),
                    rng.random_range(0..2u32),
                    rng.random_range(0..12u32),
                )
            })
            .collect();
        let kg = tiny_kg(12, 2, triples);
        prepare_graph("demo", kg, None, Vec::new(), cfg).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_exact() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_cfg()
        };
        let graph = demo_graph(&cfg);
        let outcome = run_training(&[graph], &cfg, None).unwrap();
        // Reconstruct the initial (f32-canonical) parameters.
        let mut rng = stream(cfg.seed, "init", 0, 0, 0);
        let mut init = ModelParams::init(cfg.dim, cfg.num_layers, &mut rng);
        let tensors: Vec<Matrix> = init
            .named_tensors()
            .into_iter()
            .map(|(_, m)| quantize_f32(&m))
            .collect();
        init.set_from_tensors(&tensors);
        for ((_, a), (_, b)) in outcome
            .params
            .named_tensors()
            .iter()
            .zip(init.named_tensors().iter())
        {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn first_batch_loss_in_initialization_band() {
        let cfg = small_cfg();
        let graph = demo_graph(&cfg);
        let outcome = run_training(&[graph], &cfg, None).unwrap();
        let first = outcome.metrics[0].loss;
        assert!(
            (0.5..=3.0).contains(&first),
            "first-epoch loss {first} outside the fresh-parameter band"
        );
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = TrainConfig {
            epochs: 2,
            ..small_cfg()
        };
        let g1 = demo_graph(&cfg);
        let g2 = demo_graph(&cfg);
        let o1 = run_training(&[g1], &cfg, None).unwrap();
        let o2 = run_training(&[g2], &cfg, None).unwrap();
        let t1: Vec<String> = o1.metrics.iter().map(|m| format!("{m:?}")).collect();
        let t2: Vec<String> = o2.metrics.iter().map(|m| format!("{m:?}")).collect();
        assert_eq!(t1, t2);
    }

    #[test]
    fn trace_independent_of_thread_count() {
        let cfg1 = TrainConfig {
            epochs: 2,
            threads: 1,
            ..small_cfg()
        };
        let cfg4 = TrainConfig {
            threads: 4,
            ..cfg1.clone()
        };
        let o1 = run_training(&[demo_graph(&cfg1)], &cfg1, None).unwrap();
        let o4 = run_training(&[demo_graph(&cfg4)], &cfg4, None).unwrap();
        for (a, b) in o1.metrics.iter().zip(o4.metrics.iter()) {
            assert_eq!(a.loss, b.loss);
        }
        for ((_, a), (_, b)) in o1
            .params
            .named_tensors()
            .iter()
            .zip(o4.params.named_tensors().iter())
        {
            assert_eq!(a.data(), b.data(), "params differ across thread counts");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = small_cfg();
        let graph = demo_graph(&cfg);
        let outcome = run_training(&[graph], &cfg, None).unwrap();
        let ck = outcome.checkpoint(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // parameters reload exactly (state is f32-canonical)
        let restored = loaded.params().unwrap();
        for ((_, a), (_, b)) in outcome
            .params
            .named_tensors()
            .iter()
            .zip(restored.named_tensors().iter())
        {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"NOPE").unwrap();
        assert!(matches!(
            Checkpoint::load(&bad),
            Err(TrainError::Format(_))
        ));
        let cfg = small_cfg();
        let graph = demo_graph(&cfg);
        let outcome = run_training(&[graph], &cfg, None).unwrap();
        let ck = outcome.checkpoint(&cfg);
        let good = dir.path().join("good.ckpt");
        ck.save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let trunc = dir.path().join("trunc.ckpt");
        std::fs::write(&trunc, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            Checkpoint::load(&trunc),
            Err(TrainError::Format(_))
        ));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_trace() {
        let full_cfg = TrainConfig {
            epochs: 4,
            ..small_cfg()
        };
        let full = run_training(&[demo_graph(&full_cfg)], &full_cfg, None).unwrap();

        let half_cfg = TrainConfig {
            epochs: 2,
            ..full_cfg.clone()
        };
        let half = run_training(&[demo_graph(&half_cfg)], &half_cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        half.checkpoint(&half_cfg).save(&path).unwrap();
        let reloaded = Checkpoint::load(&path).unwrap();

        let resumed = run_training(&[demo_graph(&full_cfg)], &full_cfg, Some(&reloaded)).unwrap();
        assert_eq!(resumed.metrics.len(), 2);
        for (a, b) in full.metrics[2..].iter().zip(resumed.metrics.iter()) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.loss, b.loss, "loss trace diverged after resume");
        }
        for ((_, a), (_, b)) in full
            .params
            .named_tensors()
            .iter()
            .zip(resumed.params.named_tensors().iter())
        {
            assert_eq!(a.data(), b.data(), "final params diverged after resume");
        }
    }
}
