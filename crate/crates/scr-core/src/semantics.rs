//! Semantic feature unification and semantic-neighbor extraction.
//!
//! The unifier maps an arbitrary-width feature matrix into a fixed model
//! dimension: a rank-q randomized truncated SVD (q = min(d, d0, |E|),
//! 2 power iterations, oversampling 8) produces `U * sqrt(Lambda)` with
//! Lambda the eigenvalues of X·Xᵀ, columns are zero-padded up to `d`, and
//! each row is standardized to mean 0 / variance 1 (all-zero rows stay
//! zero). Semantic neighbors are the top-k cosine-nearest entities above a
//! threshold, excluding self and direct topological neighbors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::kg::KnowledgeGraph;
use crate::tensor::Matrix;

pub type Result<T> = std::result::Result<T, SemanticsError>;

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("feature matrix contains a non-finite value")]
    NonFiniteFeatures,
    #[error("unified dimension must be at least 1")]
    InvalidDimension,
    #[error("feature rows ({rows}) do not match entity count ({entities})")]
    RowMismatch { rows: usize, entities: usize },
    #[error("similarity threshold {0} outside [-1, 1]")]
    BadThreshold(f64),
}

/// Oversampling columns added to the randomized range sketch.
const OVERSAMPLE: usize = 8;
/// Power iterations applied to the sketch.
const POWER_ITERS: usize = 2;
/// Row variance at or below this is treated as an all-zero row.
const ZERO_ROW_VAR: f64 = 1e-24;

/// Row-normalized unified features plus the pre-normalization factor.
#[derive(Clone, Debug)]
pub struct UnifiedFeatures {
    /// `|E| x d`, rows standardized (mean 0, population variance 1).
    pub unified: Matrix,
    /// `U * sqrt(Lambda)` zero-padded to `d` columns, before row
    /// standardization.
    pub pre_norm: Matrix,
    /// Number of retained non-negligible singular directions.
    pub effective_rank: usize,
}

impl UnifiedFeatures {
    pub fn rows(&self) -> usize {
        self.unified.rows()
    }

    pub fn cols(&self) -> usize {
        self.unified.cols()
    }
}

/// Standardizes each row to mean 0 / variance 1; rows with (numerically)
/// zero variance map to all zeros.
pub fn standardize_rows(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = m.row(i);
        let n = cols.max(1) as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var > ZERO_ROW_VAR {
            let inv = 1.0 / var.sqrt();
            for j in 0..cols {
                data[i * cols + j] = (row[j] - mean) * inv;
            }
        }
    }
    Matrix::from_vec(rows, cols, data)
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn thin_q(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

pub fn unify_features(x: &Matrix, d: usize, seed: u64) -> Result<UnifiedFeatures> {
    if d == 0 {
        return Err(SemanticsError::InvalidDimension);
    }
    if !x.is_finite() {
        return Err(SemanticsError::NonFiniteFeatures);
    }
    let (n, d0) = x.shape();
    let q = d.min(d0).min(n);
    if q == 0 {
        let zero = Matrix::zeros(n, d);
        return Ok(UnifiedFeatures {
            unified: zero.clone(),
            pre_norm: zero,
            effective_rank: 0,
        });
    }

    let sketch_cols = (q + OVERSAMPLE).min(n).min(d0);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(d0, sketch_cols, |_, _| {
        // Box-Muller from two uniforms keeps the dependency surface small.
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    });

    let xm = to_dmatrix(x);
    let mut basis = thin_q(&xm * &omega);
    for _ in 0..POWER_ITERS {
        let z = thin_q(xm.transpose() * &basis);
        basis = thin_q(&xm * z);
    }
    // Small projected matrix carries the spectrum.
    let b = basis.transpose() * &xm;
    let svd = b.svd(true, false);
    let u_b = svd.u.expect("svd with u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &c| {
        svd.singular_values[c]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });

    let u_full = &basis * &u_b;
    let mut pre = vec![0.0; n * d];
    let mut effective_rank = 0;
    let sigma_max = svd.singular_values[order[0]].max(f64::MIN_POSITIVE);
    let rank_tol = sigma_max * n.max(d0) as f64 * f64::EPSILON;
    for (col, &oi) in order.iter().take(q).enumerate() {
        let sigma = svd.singular_values[oi];
        if sigma > rank_tol {
            effective_rank += 1;
        }
        for i in 0..n {
            pre[i * d + col] = u_full[(i, oi)] * sigma;
        }
    }
    let pre_norm = Matrix::from_vec(n, d, pre);
    let unified = standardize_rows(&pre_norm);
    Ok(UnifiedFeatures {
        unified,
        pre_norm,
        effective_rank,
    })
}

/// Per-entity semantic neighbors: `(entity, cosine similarity)` sorted by
/// descending similarity, ties broken by lower entity index.
#[derive(Clone, Debug, Default)]
pub struct SemanticNeighborSet {
    sets: Vec<Vec<(u32, f64)>>,
}

impl SemanticNeighborSet {
    pub fn empty(num_entities: usize) -> Self {
        SemanticNeighborSet {
            sets: vec![Vec::new(); num_entities],
        }
    }

    pub fn from_sets(sets: Vec<Vec<(u32, f64)>>) -> Self {
        SemanticNeighborSet { sets }
    }

    pub fn neighbors(&self, entity: u32) -> &[(u32, f64)] {
        &self.sets[entity as usize]
    }

    pub fn num_entities(&self) -> usize {
        self.sets.len()
    }

    pub fn is_all_empty(&self) -> bool {
        self.sets.iter().all(|s| s.is_empty())
    }

    /// Entities that appear in at least one neighbor set, deduplicated.
    pub fn member_entities(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .sets
            .iter()
            .flat_map(|s| s.iter().map(|&(e, _)| e))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Entities whose own neighbor set is non-empty.
    pub fn owners(&self) -> Vec<u32> {
        (0..self.sets.len() as u32)
            .filter(|&e| !self.sets[e as usize].is_empty())
            .collect()
    }
}

/// Top-k cosine selection over matrix rows. `excluded[i]` lists row indices
/// that may never appear in row i's result (self is always excluded); rows
/// with zero norm get an empty set and appear in no other set.
pub fn top_k_cosine(
    rows: &Matrix,
    k: usize,
    delta: f64,
    excluded: Option<&[Vec<u32>]>,
) -> Vec<Vec<(u32, f64)>> {
    let n = rows.rows();
    let cols = rows.cols();
    let mut norms = vec![0.0; n];
    for i in 0..n {
        norms[i] = rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            if k == 0 || norms[i] == 0.0 {
                return Vec::new();
            }
            let excl = excluded.map(|e| e[i].as_slice()).unwrap_or(&[]);
            let ri = rows.row(i);
            // Sorted top-k buffer: (similarity desc, index asc).
            let mut best: Vec<(u32, f64)> = Vec::with_capacity(k + 1);
            for j in 0..n {
                if j == i || norms[j] == 0.0 || excl.binary_search(&(j as u32)).is_ok() {
                    continue;
                }
                let mut dot = 0.0;
                let rj = rows.row(j);
                for c in 0..cols {
                    dot += ri[c] * rj[c];
                }
                let sim = dot / (norms[i] * norms[j]);
                if sim < delta {
                    continue;
                }
                let pos = best
                    .partition_point(|&(bj, bs)| bs > sim || (bs == sim && (bj as usize) < j));
                if pos < k {
                    best.insert(pos, (j as u32, sim));
                    best.truncate(k);
                }
            }
            best
        })
        .collect()
}

/// Semantic neighbors of every entity: top-k cosine-nearest rows of the
/// unified features, excluding the entity itself and its direct topological
/// neighbors (base triples, either direction).
pub fn semantic_neighbors(
    unified: &UnifiedFeatures,
    kg: &KnowledgeGraph,
    k: usize,
    delta: f64,
) -> Result<SemanticNeighborSet> {
    if unified.rows() != kg.num_entities() {
        return Err(SemanticsError::RowMismatch {
            rows: unified.rows(),
            entities: kg.num_entities(),
        });
    }
    if !(-1.0..=1.0).contains(&delta) {
        return Err(SemanticsError::BadThreshold(delta));
    }
    let excluded = kg.base_undirected_neighbors();
    Ok(SemanticNeighborSet::from_sets(top_k_cosine(
        &unified.unified,
        k,
        delta,
        Some(&excluded),
    )))
}
