//! Reference implementations written for clarity rather than speed. They
//! share no code with the library beyond its public types.

#![allow(dead_code)]

use std::cmp::Ordering;

use progemb_core::loss::{self, ContrastiveBatch, LossConfig, LossMode, Reduction};
use progemb_core::sim::Embedding;
use rand::Rng;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Progressive loss for one query, straight from the definition: weight from
/// the threshold, per-negative scales, then `-w·log(e^p / (e^p + Σ e^{a·n}))`
/// with every logit divided by `tau`. No shifting, so keep `a·n/tau` and
/// `p/tau` well below 700.
pub fn scalar_query_loss(pos: f64, neg: &[f64], sigma: f64, bias: f64, tau: f64) -> f64 {
    let weight = if sigma <= 0.0 || pos >= sigma { 1.0 } else { (pos / sigma).clamp(0.0, 1.0) };
    let mut denominator = (pos / tau).exp();
    for &n in neg {
        let scale = if pos < sigma || n < pos { 1.0 } else { bias + pos };
        denominator += (scale * n / tau).exp();
    }
    -weight * ((pos / tau).exp() / denominator).ln()
}

/// Sum of [`scalar_query_loss`] over a batch, with the threshold taken as the
/// batch positive mean minus `beta`.
pub fn scalar_batch_loss(pos: &[f64], neg: &[Vec<f64>], beta: f64, bias: f64, tau: f64) -> f64 {
    let sigma = pos.iter().sum::<f64>() / pos.len() as f64 - beta;
    pos.iter()
        .zip(neg)
        .map(|(&p, row)| scalar_query_loss(p, row, sigma, bias, tau))
        .sum()
}

/// Plain InfoNCE, summed over queries.
pub fn scalar_info_nce(pos: &[f64], neg: &[Vec<f64>], tau: f64) -> f64 {
    pos.iter()
        .zip(neg)
        .map(|(&p, row)| {
            let num = (p / tau).exp();
            let den = num + row.iter().map(|&n| (n / tau).exp()).sum::<f64>();
            -(num / den).ln()
        })
        .sum()
}

pub fn random_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-2 {
            return v;
        }
    }
}

/// Random batch: `queries` queries, one positive each, plus `extra` documents
/// that only ever serve as negatives. Each query gets up to `max_neg`
/// negatives drawn from every document except its own positive.
pub fn random_batch<R: Rng>(rng: &mut R, queries: usize, extra: usize, max_neg: usize, dim: usize) -> ContrastiveBatch {
    let docs = queries + extra;
    let embed = |v: Vec<f64>| Embedding::new(v).unwrap();
    let negatives = (0..queries)
        .map(|q| {
            let mut pool: Vec<usize> = (0..docs).filter(|&d| d != q).collect();
            let take = rng.random_range(1..=max_neg.min(pool.len()).max(1));
            let mut chosen = Vec::new();
            for _ in 0..take.min(pool.len()) {
                chosen.push(pool.swap_remove(rng.random_range(0..pool.len())));
            }
            chosen
        })
        .collect();
    ContrastiveBatch {
        queries: (0..queries).map(|_| embed(random_vec(rng, dim))).collect(),
        docs: (0..docs).map(|_| embed(random_vec(rng, dim))).collect(),
        positives: (0..queries).collect(),
        negatives,
    }
}

/// Largest componentwise disagreement between analytic and central-difference
/// gradients, each difference divided by `max(|analytic|, |numeric|, 1)`.
/// Coefficients are computed once from the unperturbed batch and held fixed.
pub fn gradient_check(batch: &ContrastiveBatch, beta: f64, bias: f64, tau: f64, step: f64) -> f64 {
    let config = LossConfig {
        hyper: loss::HyperParams { alpha: 0.5, beta, tau },
        mode: LossMode::Progressive,
        reduction: Reduction::Sum,
    };
    let (pos, _) = batch.similarities().unwrap();
    let sigma = pos.iter().sum::<f64>() / pos.len() as f64 - beta;
    let out = loss::loss_gradients(batch, sigma, bias, &config).unwrap();
    let weights = out.sims.weights.clone();
    let scales = out.sims.scales.clone();

    let frozen_loss = |queries: &[Vec<f64>], docs: &[Vec<f64>]| -> f64 {
        let mut total = 0.0;
        for q in 0..queries.len() {
            let p = cosine(&queries[q], &docs[batch.positives[q]]) / tau;
            let mut den = p.exp();
            for (j, &d) in batch.negatives[q].iter().enumerate() {
                den += (scales[q][j] * cosine(&queries[q], &docs[d]) / tau).exp();
            }
            total += -weights[q] * (p.exp() / den).ln();
        }
        total
    };

    let queries: Vec<Vec<f64>> = batch.queries.iter().map(|e| e.as_slice().to_vec()).collect();
    let docs: Vec<Vec<f64>> = batch.docs.iter().map(|e| e.as_slice().to_vec()).collect();
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    };
    for i in 0..queries.len() {
        for k in 0..queries[i].len() {
            let mut plus = queries.clone();
            let mut minus = queries.clone();
            plus[i][k] += step;
            minus[i][k] -= step;
            let numeric = (frozen_loss(&plus, &docs) - frozen_loss(&minus, &docs)) / (2.0 * step);
            compare(out.grads.queries[i][k], numeric);
        }
    }
    for i in 0..docs.len() {
        for k in 0..docs[i].len() {
            let mut plus = docs.clone();
            let mut minus = docs.clone();
            plus[i][k] += step;
            minus[i][k] -= step;
            let numeric = (frozen_loss(&queries, &plus) - frozen_loss(&queries, &minus)) / (2.0 * step);
            compare(out.grads.docs[i][k], numeric);
        }
    }
    worst
}

/// Top `k` ids by cosine to `query` after removing `excluded`, by sorting
/// everything: score descending, then id ascending.
pub fn full_sort_top_k(query: &[f64], ids: &[String], embeddings: &[Vec<f64>], excluded: &[&str], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = ids
        .iter()
        .zip(embeddings)
        .filter(|(id, _)| !excluded.contains(&id.as_str()))
        .map(|(id, e)| (id.clone(), cosine(query, e)))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Greedy packing over units located by substring search: a passage grows
/// while the raw text from its first unit through the next unit fits.
pub fn greedy_pack(raw: &str, units: &[&str], max_chars: usize) -> Vec<String> {
    let mut spans = Vec::new();
    let mut cursor = 0;
    for u in units {
        let start = cursor + raw[cursor..].find(u).expect("unit occurs in order");
        spans.push((start, start + u.len()));
        cursor = start + u.len();
    }
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (a, b) in spans {
        open = match open {
            Some((s, _)) if raw[s..b].chars().count() <= max_chars => Some((s, b)),
            Some((s, e)) => {
                out.push(raw[s..e].to_string());
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((s, e)) = open {
        out.push(raw[s..e].to_string());
    }
    out
}
