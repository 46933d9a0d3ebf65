//! Brute-force ranking and ranking metrics.
//!
//! NDCG uses gain `2^rel − 1` and discount `log2(rank + 1)`; the ideal DCG is
//! computed from every judged document, retrieved or not.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::QrelRecord;
use crate::sim::{self, Embedding};

/// Graded relevance judgments: query id → doc id → grade (≥ 1).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judged: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Result<()> {
        if grade == 0 {
            return Err(Error::invalid(
                "grade",
                format!("({query_id}, {doc_id}): grades must be >= 1"),
            ));
        }
        let prev = self
            .judged
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
        if prev.is_some() {
            return Err(Error::DuplicateId(format!("{query_id}/{doc_id}")));
        }
        Ok(())
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a QrelRecord>) -> Result<Self> {
        let mut q = Self::new();
        for r in records {
            q.insert(&r.query_id, &r.doc_id, r.grade)?;
        }
        Ok(q)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judged
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn relevant_count(&self, query_id: &str) -> usize {
        self.judged.get(query_id).map_or(0, BTreeMap::len)
    }

    pub fn judgments(&self, query_id: &str) -> impl Iterator<Item = (&str, u32)> {
        self.judged
            .get(query_id)
            .into_iter()
            .flat_map(|m| m.iter().map(|(d, &g)| (d.as_str(), g)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub docs: Vec<RankedDoc>,
}

impl RankedList {
    /// Builds a list from doc ids in rank order, scoring them by descending
    /// position. Rejects duplicates.
    pub fn from_ids(query_id: &str, ids: &[&str]) -> Result<Self> {
        let mut seen = HashSet::new();
        let n = ids.len() as f64;
        let docs = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                if !seen.insert(*id) {
                    return Err(Error::DuplicateId(id.to_string()));
                }
                Ok(RankedDoc {
                    doc_id: id.to_string(),
                    score: n - i as f64,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            query_id: query_id.to_string(),
            docs,
        })
    }
}

/// Searchable set of embedded documents.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    ids: Vec<String>,
    embeddings: Vec<Embedding>,
}

impl Gallery {
    pub fn new(ids: Vec<String>, embeddings: Vec<Embedding>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("gallery".into()));
        }
        if ids.len() != embeddings.len() {
            return Err(Error::Shape(format!(
                "{} gallery ids, {} embeddings",
                ids.len(),
                embeddings.len()
            )));
        }
        let dim = embeddings[0].dim();
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.dim(),
                context: "gallery".into(),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        Ok(Self { ids, embeddings })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }
}

/// Top-`depth` gallery items by cosine, ties by ascending id.
pub fn rank_gallery(query_id: &str, query: &Embedding, gallery: &Gallery, depth: usize) -> Result<RankedList> {
    if depth == 0 {
        return Err(Error::invalid("depth", "must be >= 1"));
    }
    if query.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            expected: gallery.dim(),
            actual: query.dim(),
            context: format!("query `{query_id}`"),
        });
    }
    let hits = sim::top_k(query.as_slice(), &gallery.ids, &gallery.embeddings, depth, |_, _| false)?;
    Ok(RankedList {
        query_id: query_id.to_string(),
        docs: hits
            .into_iter()
            .map(|h| RankedDoc {
                doc_id: h.id.to_string(),
                score: h.score,
            })
            .collect(),
    })
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// NDCG over the first `k` ranks; 0 when the query has no judged documents.
pub fn ndcg_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    let q = &ranked.query_id;
    let dcg: f64 = ranked
        .docs
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(qrels.grade(q, &d.doc_id)) / discount(i + 1))
        .sum();
    let mut ideal: Vec<u32> = qrels.judgments(q).map(|(_, g)| g).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum();
    if idcg == 0.0 {
        log::debug!("query `{q}` has no relevant documents; NDCG is 0");
        return 0.0;
    }
    dcg / idcg
}

pub fn mrr_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> f64 {
    ranked
        .docs
        .iter()
        .take(k)
        .position(|d| qrels.grade(&ranked.query_id, &d.doc_id) > 0)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// `None` when the query has no relevant documents.
pub fn recall_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Option<f64> {
    let total = qrels.relevant_count(&ranked.query_id);
    if total == 0 {
        return None;
    }
    let hit = ranked
        .docs
        .iter()
        .take(k)
        .filter(|d| qrels.grade(&ranked.query_id, &d.doc_id) > 0)
        .count();
    Some(hit as f64 / total as f64)
}

/// Sum of precision at each relevant retrieved rank, over the total number of
/// relevant documents. `None` when there are none.
pub fn average_precision(ranked: &RankedList, qrels: &Qrels) -> Option<f64> {
    let total = qrels.relevant_count(&ranked.query_id);
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranked.docs.iter().enumerate() {
        if qrels.grade(&ranked.query_id, &d.doc_id) > 0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// How many gallery items to rank per query (MAP is computed over these).
    pub depth: usize,
    pub ndcg_k: usize,
    pub mrr_k: usize,
    pub recall_ks: Vec<usize>,
    /// Score queries without relevant documents as 0 for NDCG and MRR
    /// instead of excluding them.
    pub include_unjudged: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            depth: 1000,
            ndcg_k: 10,
            mrr_k: 10,
            recall_ks: vec![1, 10, 50],
            include_unjudged: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.ndcg_k == 0 || self.mrr_k == 0 {
            return Err(Error::invalid("eval cutoffs", "depth, ndcg_k and mrr_k must be >= 1"));
        }
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return Err(Error::invalid("recall_ks", "need at least one cutoff, all >= 1"));
        }
        Ok(())
    }

    fn effective_depth(&self) -> usize {
        let deepest = self.recall_ks.iter().copied().max().unwrap_or(0);
        self.depth.max(self.ndcg_k).max(self.mrr_k).max(deepest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ndcg: f64,
    pub mrr: f64,
    pub map: Option<f64>,
    /// Parallel to the configured recall cutoffs.
    pub recall: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub queries: usize,
    pub ndcg: f64,
    pub mrr: f64,
    pub map: f64,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryIssue {
    pub query_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ndcg_k: usize,
    pub mrr_k: usize,
    pub recall_ks: Vec<usize>,
    pub rows: Vec<QueryMetrics>,
    pub summary: MacroMetrics,
    pub excluded: Vec<QueryIssue>,
    pub errors: Vec<QueryIssue>,
}

/// A query to evaluate; `embedding` holds the failure message when encoding failed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub id: String,
    pub embedding: std::result::Result<Embedding, String>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 { 0.0 } else { sum / n as f64 }
}

pub fn score_ranking(ranked: &RankedList, qrels: &Qrels, config: &EvalConfig) -> QueryMetrics {
    QueryMetrics {
        query_id: ranked.query_id.clone(),
        ndcg: ndcg_at_k(ranked, qrels, config.ndcg_k),
        mrr: mrr_at_k(ranked, qrels, config.mrr_k),
        map: average_precision(ranked, qrels),
        recall: config.recall_ks.iter().map(|&k| recall_at_k(ranked, qrels, k)).collect(),
    }
}

/// Macro averages over `rows`; MAP and recall skip rows where they are undefined.
pub fn summarize(rows: &[QueryMetrics], recall_cutoffs: usize) -> MacroMetrics {
    MacroMetrics {
        queries: rows.len(),
        ndcg: mean(rows.iter().map(|r| r.ndcg)),
        mrr: mean(rows.iter().map(|r| r.mrr)),
        map: mean(rows.iter().filter_map(|r| r.map)),
        recall: (0..recall_cutoffs)
            .map(|j| mean(rows.iter().filter_map(|r| r.recall[j])))
            .collect(),
    }
}

/// Ranks every query against the gallery and scores it. Rows are ordered by
/// query id. Queries whose embedding is missing or fails to rank are listed
/// under `errors`; queries without relevant documents under `excluded`
/// (and also scored, if `include_unjudged` is set).
pub fn evaluate_run(queries: &[EvalQuery], gallery: &Gallery, qrels: &Qrels, config: &EvalConfig) -> Result<MetricReport> {
    config.validate()?;
    if gallery.is_empty() {
        return Err(Error::Empty("gallery".into()));
    }
    let mut order: Vec<&EvalQuery> = queries.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = order.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::DuplicateId(w[0].id.clone()));
    }

    let depth = config.effective_depth();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    let mut errors = Vec::new();
    for q in order {
        let emb = match &q.embedding {
            Ok(e) => e,
            Err(reason) => {
                errors.push(QueryIssue {
                    query_id: q.id.clone(),
                    reason: reason.clone(),
                });
                continue;
            }
        };
        let unjudged = qrels.relevant_count(&q.id) == 0;
        if unjudged {
            log::info!("query `{}` has no relevance judgments", q.id);
            excluded.push(QueryIssue {
                query_id: q.id.clone(),
                reason: "no relevant documents in qrels".into(),
            });
            if !config.include_unjudged {
                continue;
            }
        }
        match rank_gallery(&q.id, emb, gallery, depth) {
            Ok(ranked) => rows.push(score_ranking(&ranked, qrels, config)),
            Err(e) => errors.push(QueryIssue {
                query_id: q.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let summary = summarize(&rows, config.recall_ks.len());
    Ok(MetricReport {
        ndcg_k: config.ndcg_k,
        mrr_k: config.mrr_k,
        recall_ks: config.recall_ks.clone(),
        rows,
        summary,
        excluded,
        errors,
    })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.summary;
        writeln!(f, "{:<12} {:>10}", "metric", "value")?;
        writeln!(f, "{:<12} {:>10.5}", format!("ndcg@{}", self.ndcg_k), s.ndcg)?;
        writeln!(f, "{:<12} {:>10.5}", "map", s.map)?;
        writeln!(f, "{:<12} {:>10.5}", format!("mrr@{}", self.mrr_k), s.mrr)?;
        for (k, r) in self.recall_ks.iter().zip(&s.recall) {
            writeln!(f, "{:<12} {:>10.5}", format!("recall@{k}"), r)?;
        }
        write!(
            f,
            "{} queries scored, {} excluded, {} errors",
            s.queries,
            self.excluded.len(),
            self.errors.len()
        )
    }
}
