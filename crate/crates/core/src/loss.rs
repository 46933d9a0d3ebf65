//! Contrastive objectives: vanilla InfoNCE and the progressive variant.
//!
//! The progressive loss for one query `q` with positive similarity `s_p` and
//! negative similarities `s_n` is
//!
//! ```text
//! L_q = -w_q * log( exp(s_p/τ) / (exp(s_p/τ) + Σ_n exp(a_n * s_n / τ)) )
//! ```
//!
//! where the positive weight `w_q` and the negative scales `a_n` are derived
//! from the batch threshold `σ = mean(s_p) - β` and the momentum bias `t`:
//!
//! ```text
//! w_q = 1                  if s_p >= σ
//!       clamp(s_p/σ, 0, 1) otherwise          (all 1 when σ <= 0)
//! a_n = 1                  if s_p < σ or s_n < s_p
//!       t + s_p            otherwise
//! t(s) = α * mean(s_p) + (1 - α) * t(s-1),    t(0) = 0
//! ```
//!
//! `w`, `a`, `σ` and `t` are computed once per step from the current batch and
//! treated as constants: no gradient flows through them.
//!
//! When `t + s_p < 1` the "hard" branch actually shrinks the negative's logit,
//! which happens early in training while `t` is still near 0. This is the
//! formula as stated and is kept as is.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{cosine, cosine_grad, Embedding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Momentum coefficient for the bias `t`, in `[0, 1]`.
    pub alpha: f64,
    /// Margin subtracted from the mean positive similarity to form `σ`.
    pub beta: f64,
    /// Softmax temperature, `> 0`.
    pub tau: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            tau: 0.01,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        check_alpha(self.alpha)?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", format!("must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("tau", format!("must be finite and > 0, got {tau}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid("alpha", format!("must lie in [0, 1], got {alpha}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Progressive,
    /// Plain InfoNCE: every weight and scale fixed at 1.
    InfoNce,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Progressive => "progressive",
            LossMode::InfoNce => "infonce",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(LossMode::Progressive),
            "infonce" => Ok(LossMode::InfoNce),
            other => Err(Error::invalid(
                "loss_mode",
                format!("expected `progressive` or `infonce`, got `{other}`"),
            )),
        }
    }
}

/// How per-query losses are combined. Sum is the objective as written; mean
/// only rescales it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::invalid(
                "reduction",
                format!("expected `sum` or `mean`, got `{other}`"),
            )),
        }
    }
}

impl Reduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }

    fn factor(self, batch: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / batch as f64,
        }
    }
}

/// Running bias `t` and the number of updates applied so far.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentumState {
    pub bias: f64,
    pub step: u64,
}

/// Similarities of one batch together with the coefficients derived from
/// them. Negative rows may have different lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSimilarities {
    pub pos: Vec<f64>,
    pub neg: Vec<Vec<f64>>,
    pub sigma: f64,
    pub weights: Vec<f64>,
    pub scales: Vec<Vec<f64>>,
}

impl BatchSimilarities {
    pub fn mean_weight(&self) -> f64 {
        mean(&self.weights)
    }

    /// Number of negatives that fell on the hard branch of the scaling rule.
    pub fn hard_negatives(&self) -> usize {
        self.pos
            .iter()
            .zip(&self.neg)
            .map(|(&p, row)| {
                if p < self.sigma {
                    0
                } else {
                    row.iter().filter(|&&n| n >= p).count()
                }
            })
            .sum()
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn check_rows(pos: &[f64], neg: &[Vec<f64>]) -> Result<()> {
    if pos.is_empty() {
        return Err(Error::Empty("batch has no queries".into()));
    }
    if neg.len() != pos.len() {
        return Err(Error::Shape(format!(
            "{} negative rows for {} queries",
            neg.len(),
            pos.len()
        )));
    }
    Ok(())
}

/// `ln(1 + Σ exp(d_i))`, i.e. log-sum-exp over `[0, d_1, ..]`.
fn lse_with_zero(diffs: &[f64]) -> f64 {
    let max = diffs.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        diffs.iter().map(|d| d.exp()).sum::<f64>().ln_1p()
    } else {
        let sum: f64 = (-max).exp() + diffs.iter().map(|d| (d - max).exp()).sum::<f64>();
        max + sum.ln()
    }
}

/// Per-query loss `-log softmax_p` with logits shifted by the positive logit.
/// Returns the loss and the softmax mass on each negative.
fn query_term(pos: f64, neg: &[f64], scales: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let diffs: Vec<f64> = neg
        .iter()
        .zip(scales)
        .map(|(n, a)| (a * n - pos) / tau)
        .collect();
    let lse = lse_with_zero(&diffs);
    let probs = diffs.iter().map(|d| (d - lse).exp()).collect();
    (lse, probs)
}

/// Vanilla InfoNCE summed over queries.
pub fn info_nce(pos: &[f64], neg: &[Vec<f64>], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_rows(pos, neg)?;
    Ok(pos
        .iter()
        .zip(neg)
        .map(|(&p, row)| query_term(p, row, &vec![1.0; row.len()], tau).0)
        .sum())
}

/// `σ = mean(pos) - β`.
pub fn batch_threshold(pos: &[f64], beta: f64) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::Empty("batch_threshold of an empty batch".into()));
    }
    Ok(mean(pos) - beta)
}

pub fn positive_weights(pos: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if pos.is_empty() {
        return Err(Error::Empty("positive_weights of an empty batch".into()));
    }
    if sigma <= 0.0 {
        return Ok(vec![1.0; pos.len()]);
    }
    Ok(pos
        .iter()
        .map(|&p| if p >= sigma { 1.0 } else { (p / sigma).clamp(0.0, 1.0) })
        .collect())
}

pub fn negative_scales(pos_q: f64, neg_q: &[f64], sigma: f64, bias: f64) -> Vec<f64> {
    neg_q
        .iter()
        .map(|&n| if pos_q < sigma || n < pos_q { 1.0 } else { bias + pos_q })
        .collect()
}

/// Computes weights and scales for `mode`. InfoNCE mode yields all ones.
pub fn coefficients(
    pos: &[f64],
    neg: &[Vec<f64>],
    sigma: f64,
    bias: f64,
    mode: LossMode,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    check_rows(pos, neg)?;
    Ok(match mode {
        LossMode::Progressive => (
            positive_weights(pos, sigma)?,
            pos.iter()
                .zip(neg)
                .map(|(&p, row)| negative_scales(p, row, sigma, bias))
                .collect(),
        ),
        LossMode::InfoNce => (
            vec![1.0; pos.len()],
            neg.iter().map(|row| vec![1.0; row.len()]).collect(),
        ),
    })
}

/// Progressive loss with explicitly supplied (frozen) coefficients.
pub fn weighted_loss(
    pos: &[f64],
    neg: &[Vec<f64>],
    weights: &[f64],
    scales: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_rows(pos, neg)?;
    check_coefficients(neg, weights, scales)?;
    Ok(pos
        .iter()
        .zip(neg)
        .zip(weights.iter().zip(scales))
        .map(|((&p, row), (&w, a))| w * query_term(p, row, a, tau).0)
        .sum())
}

fn check_coefficients(neg: &[Vec<f64>], weights: &[f64], scales: &[Vec<f64>]) -> Result<()> {
    if weights.len() != neg.len() || scales.len() != neg.len() {
        return Err(Error::Shape(format!(
            "{} weights / {} scale rows for {} queries",
            weights.len(),
            scales.len(),
            neg.len()
        )));
    }
    for (q, (row, a)) in neg.iter().zip(scales).enumerate() {
        if row.len() != a.len() {
            return Err(Error::Shape(format!(
                "query {q}: {} scales for {} negatives",
                a.len(),
                row.len()
            )));
        }
    }
    Ok(())
}

/// Progressive loss summed over queries, with the coefficients used.
pub fn progressive_loss(
    pos: &[f64],
    neg: &[Vec<f64>],
    sigma: f64,
    bias: f64,
    tau: f64,
) -> Result<(f64, BatchSimilarities)> {
    let (weights, scales) = coefficients(pos, neg, sigma, bias, LossMode::Progressive)?;
    let loss = weighted_loss(pos, neg, &weights, &scales, tau)?;
    Ok((
        loss,
        BatchSimilarities {
            pos: pos.to_vec(),
            neg: neg.to_vec(),
            sigma,
            weights,
            scales,
        },
    ))
}

/// One step of `t ← α·mean(pos) + (1−α)·t`. The input state is left as is.
pub fn update_momentum(state: &MomentumState, pos: &[f64], alpha: f64) -> Result<MomentumState> {
    check_alpha(alpha)?;
    if pos.is_empty() {
        return Err(Error::Empty("momentum update needs a nonempty batch".into()));
    }
    Ok(MomentumState {
        bias: alpha * mean(pos) + (1.0 - alpha) * state.bias,
        step: state.step + 1,
    })
}

/// Loss settings used by the trainer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub hyper: HyperParams,
    pub mode: LossMode,
    pub reduction: Reduction,
}

/// Embeddings of one training batch.
///
/// Each query has one positive and any number of negatives, all given as
/// indices into `docs`, so a document shared by several queries (another
/// query's positive reused as an in-batch negative) is a single entry whose
/// gradient accumulates every role it plays.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub queries: Vec<Embedding>,
    pub docs: Vec<Embedding>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl ContrastiveBatch {
    fn validate(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::Empty("batch has no queries".into()));
        }
        if self.positives.len() != self.queries.len() || self.negatives.len() != self.queries.len() {
            return Err(Error::Shape(format!(
                "{} queries, {} positives, {} negative rows",
                self.queries.len(),
                self.positives.len(),
                self.negatives.len()
            )));
        }
        let n_docs = self.docs.len();
        let out_of_range = self
            .positives
            .iter()
            .chain(self.negatives.iter().flatten())
            .find(|&&i| i >= n_docs);
        if let Some(i) = out_of_range {
            return Err(Error::Shape(format!("document index {i} out of range ({n_docs} docs)")));
        }
        Ok(())
    }

    /// Positive similarities and ragged negative similarity rows.
    pub fn similarities(&self) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.validate()?;
        let mut pos = Vec::with_capacity(self.queries.len());
        let mut neg = Vec::with_capacity(self.queries.len());
        for (q, query) in self.queries.iter().enumerate() {
            let qv = query.as_slice();
            pos.push(cosine(qv, self.docs[self.positives[q]].as_slice())?);
            neg.push(
                self.negatives[q]
                    .iter()
                    .map(|&d| cosine(qv, self.docs[d].as_slice()))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok((pos, neg))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGradients {
    pub queries: Vec<Vec<f64>>,
    pub docs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub sims: BatchSimilarities,
    pub grads: EmbeddingGradients,
}

/// Loss and its gradient with respect to every query and document embedding.
///
/// `sigma` and `bias` are supplied by the caller; weights and scales are derived
/// from them and the batch similarities, then held constant while
/// differentiating through the cosine similarities.
pub fn loss_gradients(
    batch: &ContrastiveBatch,
    sigma: f64,
    bias: f64,
    config: &LossConfig,
) -> Result<LossOutput> {
    let tau = config.hyper.tau;
    check_tau(tau)?;
    let (pos, neg) = batch.similarities()?;
    let (weights, scales) = coefficients(&pos, &neg, sigma, bias, config.mode)?;
    let factor = config.reduction.factor(pos.len());

    let mut grads = EmbeddingGradients {
        queries: batch.queries.iter().map(|e| vec![0.0; e.dim()]).collect(),
        docs: batch.docs.iter().map(|e| vec![0.0; e.dim()]).collect(),
    };
    let mut loss = 0.0;

    for q in 0..pos.len() {
        let (term, probs) = query_term(pos[q], &neg[q], &scales[q], tau);
        let w = weights[q] * factor;
        loss += w * term;
        if w == 0.0 || probs.is_empty() {
            continue;
        }
        let query = batch.queries[q].as_slice();

        // dL/ds_p = -w/τ · (1 - p_pos) = -w/τ · Σ_n p_n
        let d_pos = -w / tau * probs.iter().sum::<f64>();
        let p_idx = batch.positives[q];
        accumulate_pair(query, batch.docs[p_idx].as_slice(), d_pos, &mut grads, q, p_idx)?;

        // dL/ds_n = w/τ · a_n · p_n
        for ((&d_idx, &a), &p) in batch.negatives[q].iter().zip(&scales[q]).zip(&probs) {
            let d_neg = w / tau * a * p;
            accumulate_pair(query, batch.docs[d_idx].as_slice(), d_neg, &mut grads, q, d_idx)?;
        }
    }

    Ok(LossOutput {
        loss,
        sims: BatchSimilarities {
            pos,
            neg,
            sigma,
            weights,
            scales,
        },
        grads,
    })
}

fn accumulate_pair(
    query: &[f64],
    doc: &[f64],
    upstream: f64,
    grads: &mut EmbeddingGradients,
    q: usize,
    d: usize,
) -> Result<()> {
    if upstream == 0.0 {
        return Ok(());
    }
    for (g, c) in grads.queries[q].iter_mut().zip(cosine_grad(query, doc)?) {
        *g += upstream * c;
    }
    for (g, c) in grads.docs[d].iter_mut().zip(cosine_grad(doc, query)?) {
        *g += upstream * c;
    }
    Ok(())
}
