//! Embedding-space primitives shared by the loss, trainer, miner and evaluator.
//!
//! Everything here is double precision. With a temperature of 0.01 similarities
//! are scaled by 100 before exponentiation, which single precision cannot carry.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense embedding vector.
///
/// Encoder outputs are unit-norm, but the type itself only requires a
/// nonempty vector; [`cosine`] accepts any nonzero norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding has dimension 0".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Returns a unit-norm copy. Fails on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm("cannot normalize".into()));
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Zero-norm inputs are rejected rather than scored as 0: they only arise
/// from a broken encoder.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
            context: "cosine".into(),
        });
    }
    let na = norm(a);
    if na == 0.0 {
        return Err(Error::ZeroNorm("first argument of cosine".into()));
    }
    let nb = norm(b);
    if nb == 0.0 {
        return Err(Error::ZeroNorm("second argument of cosine".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-major `rows x cols` matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }
}

/// All-pairs cosine between `queries` and `candidates`.
pub fn sim_matrix<Q, C>(queries: &[Q], candidates: &[C]) -> Result<SimilarityMatrix>
where
    Q: AsRef<[f64]>,
    C: AsRef<[f64]>,
{
    if queries.is_empty() || candidates.is_empty() {
        return Err(Error::Empty("sim_matrix needs at least one query and one candidate".into()));
    }
    let dim = queries[0].as_ref().len();
    let q_norms = checked_norms(queries, dim, "query")?;
    let c_norms = checked_norms(candidates, dim, "candidate")?;

    let mut values = Vec::with_capacity(queries.len() * candidates.len());
    for (q, qn) in queries.iter().zip(&q_norms) {
        for (c, cn) in candidates.iter().zip(&c_norms) {
            values.push((dot(q.as_ref(), c.as_ref()) / (qn * cn)).clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityMatrix {
        rows: queries.len(),
        cols: candidates.len(),
        values,
    })
}

fn checked_norms<V: AsRef<[f64]>>(vs: &[V], dim: usize, role: &str) -> Result<Vec<f64>> {
    vs.iter()
        .enumerate()
        .map(|(i, v)| {
            let v = v.as_ref();
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                    context: format!("{role} {i}"),
                });
            }
            let n = norm(v);
            if n == 0.0 {
                return Err(Error::ZeroNorm(format!("{role} {i}")));
            }
            Ok(n)
        })
        .collect()
}

/// `max(v) + ln Σ exp(v_i - max(v))`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Err(Error::Empty("log_sum_exp of an empty vector".into()));
    }
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Gradient of `cosine(a, b)` with respect to `a`:
/// `b / (|a||b|) - cos(a, b) * a / |a|^2`.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let c = cosine(a, b)?;
    let na = norm(a);
    let nb = norm(b);
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect())
}

/// A scored candidate from a brute-force search.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit<'a> {
    pub index: usize,
    pub id: &'a str,
    pub score: f64,
}

// Ordered so that "greater" means "ranks worse": lower score, then larger id.
struct Worst<'a>(Hit<'a>);

impl PartialEq for Worst<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst<'_> {}
impl PartialOrd for Worst<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .score
            .total_cmp(&self.0.score)
            .then_with(|| self.0.id.cmp(other.0.id))
    }
}

/// Exact top-`k` by cosine over `candidates`, skipping those for which
/// `exclude` returns true. Sorted by score descending, ties by ascending id.
pub fn top_k<'a, C, F>(
    query: &[f64],
    ids: &'a [String],
    candidates: &[C],
    k: usize,
    exclude: F,
) -> Result<Vec<Hit<'a>>>
where
    C: AsRef<[f64]>,
    F: Fn(usize, &str) -> bool,
{
    if ids.len() != candidates.len() {
        return Err(Error::Shape(format!(
            "{} ids for {} candidates",
            ids.len(),
            candidates.len()
        )));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroNorm("query".into()));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut heap: BinaryHeap<Worst<'a>> = BinaryHeap::with_capacity(k + 1);
    for (index, (id, c)) in ids.iter().zip(candidates).enumerate() {
        if exclude(index, id) {
            continue;
        }
        let c = c.as_ref();
        if c.len() != query.len() {
            return Err(Error::DimensionMismatch {
                expected: query.len(),
                actual: c.len(),
                context: format!("candidate `{id}`"),
            });
        }
        let cn = norm(c);
        if cn == 0.0 {
            return Err(Error::ZeroNorm(format!("candidate `{id}`")));
        }
        let score = (dot(query, c) / (qn * cn)).clamp(-1.0, 1.0);
        heap.push(Worst(Hit { index, id, score }));
        if heap.len() > k {
            heap.pop();
        }
    }
    // into_sorted_vec is ascending in "worseness", i.e. best first.
    Ok(heap.into_sorted_vec().into_iter().map(|w| w.0).collect())
}
