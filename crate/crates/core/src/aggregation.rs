//! Server-side parameter combination: sample-weighted FedAvg, the
//! epsilon-guarded cosine similarity matrix, and per-client
//! similarity-weighted body averaging with frozen heads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ClientId = u32;

/// Guard added to the norm product in the cosine similarity.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AggError {
    #[error("no client parameters to aggregate")]
    Empty,
    #[error("parameter vector length mismatch: client {client} has {got}, expected {expected}")]
    LengthMismatch {
        client: ClientId,
        got: usize,
        expected: usize,
    },
    #[error("sample count for client {0} must be positive")]
    ZeroSamples(ClientId),
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("similarity matrix clients {matrix:?} do not match bodies {bodies:?}")]
    ClientMismatch {
        matrix: Vec<ClientId>,
        bodies: Vec<ClientId>,
    },
}

/// Sample-count weighted average of client parameter vectors:
/// `sum_i (n_i / n) theta_i` with f64 accumulation.
pub fn fedavg(params: &[(Vec<f32>, u64)]) -> Result<Vec<f32>, AggError> {
    let (first, _) = params.first().ok_or(AggError::Empty)?;
    let len = first.len();
    let mut total = 0u64;
    for (i, (p, n)) in params.iter().enumerate() {
        if p.len() != len {
            return Err(AggError::LengthMismatch {
                client: i as ClientId,
                got: p.len(),
                expected: len,
            });
        }
        if *n == 0 {
            return Err(AggError::ZeroSamples(i as ClientId));
        }
        total += n;
    }
    let mut acc = vec![0.0f64; len];
    for (p, n) in params {
        let w = *n as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(p) {
            *a += w * *v as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// Epsilon-guarded cosine similarity, clamped to `[0, 1]`.
///
/// The guard keeps zero vectors finite; the clamp reconciles the raw cosine
/// range `[-1, 1]` with the non-negative weights the aggregation expects.
pub fn cosine_similarity(a: &[f32], b: &[f32], epsilon: f64) -> Result<f64, AggError> {
    if a.len() != b.len() {
        return Err(AggError::LengthMismatch {
            client: 0,
            got: b.len(),
            expected: a.len(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(AggError::BadEpsilon(epsilon));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let cos = dot / (na.sqrt() * nb.sqrt() + epsilon);
    Ok(cos.clamp(0.0, 1.0))
}

/// Pairwise head similarities of the sampled clients, row-major, in the
/// given client order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    client_ids: Vec<ClientId>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn client_ids(&self) -> &[ClientId] {
        &self.client_ids
    }

    pub fn len(&self) -> usize {
        self.client_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.client_ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.client_ids.len() + j]
    }

    /// Identity matrix test hook: reduces weighted aggregation to
    /// keep-your-own-body.
    pub fn identity(client_ids: Vec<ClientId>) -> Self {
        let n = client_ids.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        SimilarityMatrix { client_ids, values }
    }

    /// CSV rendering with client ids as row and column headers.
    pub fn to_csv(&self) -> String {
        let n = self.len();
        let mut out = String::from("client");
        for id in &self.client_ids {
            out.push_str(&format!(",{id}"));
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&self.client_ids[i].to_string());
            for j in 0..n {
                out.push_str(&format!(",{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the full pairwise similarity matrix of the clients' head vectors.
pub fn build_similarity(
    heads: &[(ClientId, Vec<f32>)],
    epsilon: f64,
) -> Result<SimilarityMatrix, AggError> {
    if heads.is_empty() {
        return Err(AggError::Empty);
    }
    let len = heads[0].1.len();
    for (id, h) in heads {
        if h.len() != len {
            return Err(AggError::LengthMismatch {
                client: *id,
                got: h.len(),
                expected: len,
            });
        }
    }
    let n = heads.len();
    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = cosine_similarity(&heads[i].1, &heads[j].1, epsilon)?;
        }
    }
    Ok(SimilarityMatrix {
        client_ids: heads.iter().map(|(id, _)| *id).collect(),
        values,
    })
}

/// Per-client similarity-weighted body average:
/// `omega_i' = (1 / sum_j phi_ij) sum_j phi_ij omega_j`.
///
/// A row summing to zero (all-orthogonal heads) falls back to the plain
/// mean of all bodies and is logged.
pub fn weighted_body_update(
    bodies: &[(ClientId, Vec<f32>)],
    phi: &SimilarityMatrix,
) -> Result<Vec<(ClientId, Vec<f32>)>, AggError> {
    if bodies.is_empty() {
        return Err(AggError::Empty);
    }
    let ids: Vec<ClientId> = bodies.iter().map(|(id, _)| *id).collect();
    if ids != phi.client_ids {
        return Err(AggError::ClientMismatch {
            matrix: phi.client_ids.clone(),
            bodies: ids,
        });
    }
    let len = bodies[0].1.len();
    for (id, b) in bodies {
        if b.len() != len {
            return Err(AggError::LengthMismatch {
                client: *id,
                got: b.len(),
                expected: len,
            });
        }
    }
    let n = bodies.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row_sum: f64 = (0..n).map(|j| phi.get(i, j)).sum();
        let mut acc = vec![0.0f64; len];
        if row_sum > 0.0 {
            for j in 0..n {
                let w = phi.get(i, j) / row_sum;
                if w == 0.0 {
                    continue;
                }
                for (a, v) in acc.iter_mut().zip(&bodies[j].1) {
                    *a += w * *v as f64;
                }
            }
        } else {
            log::warn!(
                "client {}: similarity row sums to zero, falling back to plain mean",
                bodies[i].0
            );
            let w = 1.0 / n as f64;
            for (_, body) in bodies {
                for (a, v) in acc.iter_mut().zip(body) {
                    *a += w * *v as f64;
                }
            }
        }
        out.push((bodies[i].0, acc.into_iter().map(|v| v as f32).collect()));
    }
    Ok(out)
}

/// How phase-2 body layers are combined across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Body layers before the personalized layer are FedAvg'd into one
    /// shared result; layers after it are combined per client by the
    /// similarity weighting.
    #[default]
    BeforeAfter,
    /// The whole body is combined per client by the similarity weighting.
    WholeBody,
}
