//! Filtered ranking metrics for KG reasoning and accuracy / macro-F1 for
//! classification routed through KG queries.
//!
//! Ranking is optimistic on ties: the true entity wins, so
//! `rank = 1 + #{filtered candidates scoring strictly higher}`. Link
//! prediction evaluates both directions of every triple — `(h, r, ?)` and
//! `(t, r^-1, ?)` — over all entities with known positives filtered out.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, Query, Triple};
use crate::model::{self, GlobalContext, KgInstance, ModelParams};

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ranks to aggregate")]
    EmptyEvaluation,
    #[error("the true entity was filtered out of the candidate pool")]
    TrueEntityFiltered,
    #[error("true entity index {index} outside candidate pool of size {len}")]
    TrueEntityMissing { index: usize, len: usize },
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

/// Rank of the true candidate among unfiltered candidates, ties resolved in
/// its favor. `filtered[i]` marks known positives to exclude; it must not
/// mark the true candidate.
pub fn compute_rank(scores: &[f64], true_pos: usize, filtered: &[bool]) -> Result<usize> {
    if true_pos >= scores.len() {
        return Err(EvalError::TrueEntityMissing {
            index: true_pos,
            len: scores.len(),
        });
    }
    debug_assert_eq!(scores.len(), filtered.len());
    if filtered[true_pos] {
        return Err(EvalError::TrueEntityFiltered);
    }
    let target = scores[true_pos];
    let higher = scores
        .iter()
        .zip(filtered.iter())
        .enumerate()
        .filter(|&(i, (&s, &f))| !f && i != true_pos && s > target)
        .count();
    Ok(1 + higher)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct RankingMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub count: usize,
}

pub fn ranking_metrics(ranks: &[usize]) -> Result<RankingMetrics> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankingMetrics {
        mrr,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
        count: ranks.len(),
    })
}

/// Known-positive lookup for filtered ranking: maps `(source, relation)` to
/// the sorted tails seen across the provided triple sets, in both the given
/// and the inverse direction.
pub struct FilterIndex {
    map: HashMap<(u32, u32), Vec<u32>>,
}

impl FilterIndex {
    /// `kg` supplies the relation augmentation (for inverse ids); the triple
    /// sets contain base-relation triples (the graph's own plus any held-out
    /// splits that should be filtered).
    pub fn new(kg: &KnowledgeGraph, triple_sets: &[&[Triple]]) -> Self {
        let b = kg.base_relation_count() as u32;
        let mut map: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for set in triple_sets {
            for t in set.iter() {
                map.entry((t.head, t.relation)).or_default().push(t.tail);
                map.entry((t.tail, t.relation + b)).or_default().push(t.head);
            }
        }
        for v in map.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        FilterIndex { map }
    }

    pub fn known(&self, source: u32, relation: u32) -> &[u32] {
        self.map
            .get(&(source, relation))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    fn mask(&self, source: u32, relation: u32, num_entities: usize, keep: u32) -> Vec<bool> {
        let mut mask = vec![false; num_entities];
        for &e in self.known(source, relation) {
            mask[e as usize] = true;
        }
        mask[keep as usize] = false;
        mask
    }
}

/// Both-direction filtered ranking of every eval triple over all entities.
pub fn evaluate_link_prediction(
    params: &ModelParams,
    inst: &KgInstance,
    ctx: &GlobalContext,
    kg: &KnowledgeGraph,
    eval_triples: &[Triple],
    filter: &FilterIndex,
) -> Result<RankingMetrics> {
    let b = kg.base_relation_count() as u32;
    let mut queries: Vec<(Query, u32)> = Vec::with_capacity(2 * eval_triples.len());
    for t in eval_triples {
        queries.push((Query::new(t.head, t.relation, Some(t.tail)), t.tail));
        queries.push((Query::new(t.tail, t.relation + b, Some(t.head)), t.head));
    }
    let ranks = rank_queries(params, inst, ctx, &queries, filter)?;
    ranking_metrics(&ranks)
}

/// Filtered ranks for explicit (query, answer) pairs.
pub fn rank_queries(
    params: &ModelParams,
    inst: &KgInstance,
    ctx: &GlobalContext,
    queries: &[(Query, u32)],
    filter: &FilterIndex,
) -> Result<Vec<usize>> {
    let results: Vec<Result<usize>> = queries
        .par_iter()
        .map(|&(q, answer)| {
            let scores = model::forward_scores(params, inst, q, ctx)?;
            let mask = filter.mask(q.source, q.relation, inst.num_entities, answer);
            compute_rank(&scores, answer as usize, &mask)
        })
        .collect();
    results.into_iter().collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Per class: (true positives, false positives, false negatives).
    pub per_class: Vec<(usize, usize, usize)>,
    pub count: usize,
}

/// Classification via reasoning: each query scores the label-entity
/// candidates; predicted class = argmax logit, ties to the lower class
/// index. Macro-F1 averages over all candidate classes.
pub fn evaluate_classification(
    params: &ModelParams,
    inst: &KgInstance,
    ctx: &GlobalContext,
    queries: &[(Query, u32)],
    label_entities: &[u32],
) -> Result<ClassificationMetrics> {
    if queries.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let predictions: Vec<Result<usize>> = queries
        .par_iter()
        .map(|&(q, _)| {
            let scores = model::forward_scores(params, inst, q, ctx)?;
            let mut best = 0usize;
            for (c, &ent) in label_entities.iter().enumerate() {
                if scores[ent as usize] > scores[label_entities[best] as usize] {
                    best = c;
                }
            }
            Ok(best)
        })
        .collect();
    let predictions: Vec<usize> = predictions.into_iter().collect::<Result<_>>()?;
    let truths: Vec<u32> = queries.iter().map(|&(_, t)| t).collect();
    Ok(aggregate_classification(
        &predictions,
        &truths,
        label_entities.len(),
    ))
}

/// Accuracy, macro-F1 and per-class confusion counts from predicted and true
/// class indices.
pub fn aggregate_classification(
    predictions: &[usize],
    truths: &[u32],
    num_classes: usize,
) -> ClassificationMetrics {
    let mut correct = 0usize;
    let mut per_class = vec![(0usize, 0usize, 0usize); num_classes];
    for (&pred, &truth) in predictions.iter().zip(truths.iter()) {
        let truth = truth as usize;
        if pred == truth {
            correct += 1;
            per_class[truth].0 += 1;
        } else {
            per_class[pred].1 += 1;
            per_class[truth].2 += 1;
        }
    }
    let f1 = |&(tp, fp, fn_): &(usize, usize, usize)| -> f64 {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let macro_f1 = per_class.iter().map(f1).sum::<f64>() / num_classes.max(1) as f64;
    ClassificationMetrics {
        accuracy: correct as f64 / predictions.len().max(1) as f64,
        macro_f1,
        per_class,
        count: predictions.len(),
    }
}
