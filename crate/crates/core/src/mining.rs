//! Offline data construction: split documents into passages, generate a
//! query per passage, retrieve hard negatives, drop the ones a relevance
//! judge flags, and write the training set.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, Header};
use crate::sim::{self, Embedding};
use crate::trainer::MAX_HARD_NEGATIVES;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    pub source_doc: String,
}

/// Byte range into the original text, already trimmed of whitespace.
type Span = (usize, usize);

fn trimmed(text: &str, start: usize, end: usize) -> Option<Span> {
    let s = &text[start..end];
    let lead = s.len() - s.trim_start().len();
    let body = s.trim();
    (!body.is_empty()).then(|| (start + lead, start + lead + body.len()))
}

fn char_len(text: &str, (a, b): Span) -> usize {
    text[a..b].chars().count()
}

fn paragraphs(text: &str) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.extend(trimmed(text, s, pos));
            }
        } else if start.is_none() {
            start = Some(pos);
        }
        pos += line.len();
    }
    if let Some(s) = start {
        out.extend(trimmed(text, s, text.len()));
    }
    out
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_wide_terminator(c: char) -> bool {
    matches!(c, '。' | '！' | '？')
}

/// Sentences inside `span`. A sentence ends after `.`, `!` or `?` followed by
/// whitespace (or the end of the span), or after a full-width terminator.
fn sentences(text: &str, (a, b): Span) -> Vec<Span> {
    let s = &text[a..b];
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = s.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = i + c.len_utf8();
        let boundary = is_wide_terminator(c)
            || (is_terminator(c) && chars.peek().is_none_or(|&(_, n)| n.is_whitespace()));
        if boundary {
            out.extend(trimmed(text, a + start, a + end));
            start = end;
        }
    }
    out.extend(trimmed(text, a + start, b));
    out
}

/// Fixed-size character chunks of `span`, trimmed.
fn chunks(text: &str, (a, b): Span, max_chars: usize) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = a;
    let mut count = 0;
    for (i, c) in text[a..b].char_indices() {
        if count == max_chars {
            out.extend(trimmed(text, start, a + i));
            start = a + i;
            count = 0;
        }
        if !(count == 0 && c.is_whitespace()) {
            count += 1;
        } else {
            start = a + i + c.len_utf8();
        }
    }
    out.extend(trimmed(text, start, b));
    out
}

/// Splits `raw` into passages of at most `max_chars` characters.
///
/// Paragraphs (separated by blank lines) are the preferred units; a paragraph
/// that is too long is cut into sentences, and a sentence that is still too
/// long into fixed-size chunks. Units are then packed greedily: a passage
/// keeps absorbing the next unit while the text from its first unit to the
/// end of that unit still fits. Every passage is a trimmed slice of `raw`.
pub fn split_passages(raw: &str, max_chars: usize) -> Result<Vec<String>> {
    if max_chars == 0 {
        return Err(Error::invalid("max_chars", "must be >= 1"));
    }
    let mut units = Vec::new();
    for para in paragraphs(raw) {
        if char_len(raw, para) <= max_chars {
            units.push(para);
            continue;
        }
        for sent in sentences(raw, para) {
            if char_len(raw, sent) <= max_chars {
                units.push(sent);
            } else {
                units.extend(chunks(raw, sent, max_chars));
            }
        }
    }

    let mut out = Vec::new();
    let mut current: Option<Span> = None;
    for (a, b) in units {
        current = match current {
            Some((s, _)) if char_len(raw, (s, b)) <= max_chars => Some((s, b)),
            Some(done) => {
                out.push(raw[done.0..done.1].to_string());
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((s, e)) = current {
        out.push(raw[s..e].to_string());
    }
    Ok(out)
}

/// Splits every document of a corpus. Passage ids are `{doc_id}#{n}`.
pub fn split_corpus(docs: &[formats::CorpusRecord], max_chars: usize) -> Result<Vec<Passage>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for doc in docs {
        if !seen.insert(doc.id.as_str()) {
            return Err(Error::DuplicateId(doc.id.clone()));
        }
        for (n, text) in split_passages(&doc.text, max_chars)?.into_iter().enumerate() {
            out.push(Passage {
                id: format!("{}#{n}", doc.id),
                text,
                source_doc: doc.source_doc.clone(),
            });
        }
    }
    Ok(out)
}

/// The first sentence of `text`, if any.
pub fn first_sentence(text: &str) -> Option<&str> {
    let para = paragraphs(text).into_iter().next()?;
    let (a, b) = sentences(text, para).into_iter().next()?;
    Some(&text[a..b])
}

pub trait QueryGenerator {
    fn name(&self) -> &str;
    fn generate(&self, passage: &Passage) -> std::result::Result<Vec<String>, String>;
}

/// Uses the passage's first sentence as its only query.
#[derive(Debug, Clone, Copy, Default)]
pub struct FirstSentence;

impl QueryGenerator for FirstSentence {
    fn name(&self) -> &str {
        "first-sentence"
    }

    fn generate(&self, passage: &Passage) -> std::result::Result<Vec<String>, String> {
        Ok(first_sentence(&passage.text).map(str::to_string).into_iter().collect())
    }
}

pub fn generate_queries(passage: &Passage, generator: &dyn QueryGenerator) -> Result<Vec<String>> {
    generator.generate(passage).map_err(|reason| Error::Generator {
        passage_id: passage.id.clone(),
        reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedCandidate {
    pub passage_id: String,
    pub similarity: f64,
    pub judged_relevant: Option<bool>,
}

/// Exact top-`k` passages by cosine similarity to `query`, excluding
/// `positive_ids`. Sorted by similarity descending, ties by ascending id.
pub fn mine_hard_negatives(
    query: &Embedding,
    ids: &[String],
    embeddings: &[Embedding],
    positive_ids: &HashSet<&str>,
    k: usize,
) -> Result<Vec<MinedCandidate>> {
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != query.dim()) {
        return Err(Error::DimensionMismatch {
            expected: query.dim(),
            actual: bad.dim(),
            context: "corpus embedding".into(),
        });
    }
    let hits = sim::top_k(query.as_slice(), ids, embeddings, k, |_, id| positive_ids.contains(id))?;
    Ok(hits
        .into_iter()
        .map(|h| MinedCandidate {
            passage_id: h.id.to_string(),
            similarity: h.score,
            judged_relevant: None,
        })
        .collect())
}

/// Decides whether a mined candidate is actually relevant to the query.
pub trait RelevanceJudge {
    fn name(&self) -> &str;
    fn judge(&self, query: &str, candidate_text: &str, candidate: &MinedCandidate) -> std::result::Result<bool, String>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NeverRelevant;

impl RelevanceJudge for NeverRelevant {
    fn name(&self) -> &str {
        "none"
    }

    fn judge(&self, _: &str, _: &str, _: &MinedCandidate) -> std::result::Result<bool, String> {
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysRelevant;

impl RelevanceJudge for AlwaysRelevant {
    fn name(&self) -> &str {
        "always"
    }

    fn judge(&self, _: &str, _: &str, _: &MinedCandidate) -> std::result::Result<bool, String> {
        Ok(true)
    }
}

/// Relevant iff the mined similarity is strictly above the threshold.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityThreshold(pub f64);

impl RelevanceJudge for SimilarityThreshold {
    fn name(&self) -> &str {
        "threshold"
    }

    fn judge(&self, _: &str, _: &str, candidate: &MinedCandidate) -> std::result::Result<bool, String> {
        Ok(candidate.similarity > self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditAction {
    Removed,
    /// The judge failed; the candidate was kept.
    Kept,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub query_id: String,
    pub candidate_id: String,
    pub action: AuditAction,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterOutcome {
    pub kept: Vec<MinedCandidate>,
    pub audit: Vec<AuditRecord>,
    pub removed: usize,
}

/// Drops candidates the judge marks relevant, keeping order. A judge error,
/// or a candidate whose text cannot be found, keeps the candidate and adds a
/// flagged audit row.
pub fn filter_false_negatives<'t>(
    query_id: &str,
    query: &str,
    candidates: Vec<MinedCandidate>,
    text_of: impl Fn(&str) -> Option<&'t str>,
    judge: &dyn RelevanceJudge,
) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for mut c in candidates {
        let verdict = match text_of(&c.passage_id) {
            Some(text) => judge.judge(query, text, &c),
            None => Err("candidate text not found".to_string()),
        };
        match verdict {
            Ok(true) => {
                c.judged_relevant = Some(true);
                out.audit.push(AuditRecord {
                    query_id: query_id.to_string(),
                    candidate_id: c.passage_id,
                    action: AuditAction::Removed,
                    reason: format!("judged relevant by `{}`", judge.name()),
                });
                out.removed += 1;
            }
            Ok(false) => {
                c.judged_relevant = Some(false);
                out.kept.push(c);
            }
            Err(e) => {
                log::warn!("judge failed on ({query_id}, {}): {e}; keeping candidate", c.passage_id);
                out.audit.push(AuditRecord {
                    query_id: query_id.to_string(),
                    candidate_id: c.passage_id.clone(),
                    action: AuditAction::Kept,
                    reason: format!("judge error: {e}"),
                });
                out.kept.push(c);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source_doc: String,
    pub generator: String,
    pub judge: String,
}

/// One line of the training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub query_id: String,
    pub query: String,
    pub positive_id: String,
    pub negative_ids: Vec<String>,
    pub provenance: Provenance,
}

/// A query ready to be written: its positive and its surviving candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedQuery {
    pub query_id: String,
    pub query: String,
    pub positive_id: String,
    pub negatives: Vec<MinedCandidate>,
    /// Candidates removed by the judge.
    pub filtered: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AssemblyStats {
    pub examples: usize,
    pub negatives: usize,
    pub negatives_filtered: usize,
    /// Negatives beyond the per-example cap.
    pub negatives_truncated: usize,
    pub without_negatives: usize,
}

/// Builds the dataset lines, truncating each negative list to the cap.
pub fn assemble(mined: &[MinedQuery]) -> Result<(Vec<DatasetRecord>, AssemblyStats)> {
    let mut seen = HashSet::new();
    let mut stats = AssemblyStats::default();
    let mut records = Vec::with_capacity(mined.len());
    for m in mined {
        if !seen.insert(m.query_id.as_str()) {
            return Err(Error::DuplicateId(m.query_id.clone()));
        }
        if m.negatives.iter().any(|c| c.passage_id == m.positive_id) {
            return Err(Error::invalid(
                "negatives",
                format!("query `{}` lists its positive as a negative", m.query_id),
            ));
        }
        let keep = m.negatives.len().min(MAX_HARD_NEGATIVES);
        let negative_ids: Vec<String> = m.negatives[..keep].iter().map(|c| c.passage_id.clone()).collect();
        stats.examples += 1;
        stats.negatives += keep;
        stats.negatives_truncated += m.negatives.len() - keep;
        stats.negatives_filtered += m.filtered;
        if keep == 0 {
            stats.without_negatives += 1;
        }
        records.push(DatasetRecord {
            query_id: m.query_id.clone(),
            query: m.query.clone(),
            positive_id: m.positive_id.clone(),
            negative_ids,
            provenance: m.provenance.clone(),
        });
    }
    Ok((records, stats))
}

pub fn assemble_dataset(mined: &[MinedQuery], path: impl AsRef<Path>) -> Result<(Vec<DatasetRecord>, AssemblyStats)> {
    let (records, stats) = assemble(mined)?;
    formats::write_jsonl(path, &Header::new(formats::DATASET), &records)?;
    Ok((records, stats))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let (_, records): (_, Vec<DatasetRecord>) = formats::read_jsonl(path, formats::DATASET)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.query_id.as_str()) {
            return Err(Error::DuplicateId(r.query_id.clone()).context(path.display().to_string()));
        }
    }
    Ok(records)
}

/// Settings for [`mine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MineConfig {
    pub k: usize,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self { k: MAX_HARD_NEGATIVES }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MineOutput {
    pub queries: Vec<MinedQuery>,
    pub audit: Vec<AuditRecord>,
    pub passages_without_queries: usize,
}

/// Generates queries for every passage, then mines and filters negatives.
/// Query ids are `{passage_id}:q{n}`. `embed` turns text into an embedding
/// (queries and passages share it; callers add any instruction prefix).
pub fn mine<E>(
    passages: &[Passage],
    passage_embeddings: &[Embedding],
    generator: &dyn QueryGenerator,
    judge: &dyn RelevanceJudge,
    config: MineConfig,
    mut embed_query: E,
) -> Result<MineOutput>
where
    E: FnMut(&str) -> Result<Embedding>,
{
    if config.k == 0 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    if passages.len() != passage_embeddings.len() {
        return Err(Error::Shape(format!(
            "{} passages, {} embeddings",
            passages.len(),
            passage_embeddings.len()
        )));
    }
    let ids: Vec<String> = passages.iter().map(|p| p.id.clone()).collect();
    let mut texts: HashMap<&str, &str> = HashMap::with_capacity(passages.len());
    for p in passages {
        if texts.insert(&p.id, &p.text).is_some() {
            return Err(Error::DuplicateId(p.id.clone()));
        }
    }

    let mut out = MineOutput::default();
    for p in passages {
        let queries = generate_queries(p, generator)?;
        if queries.is_empty() {
            out.passages_without_queries += 1;
            continue;
        }
        let positives: HashSet<&str> = [p.id.as_str()].into();
        for (n, q) in queries.into_iter().enumerate() {
            let query_id = format!("{}:q{n}", p.id);
            let emb = embed_query(&q).map_err(|e| e.context(format!("query `{query_id}`")))?;
            let candidates = mine_hard_negatives(&emb, &ids, passage_embeddings, &positives, config.k)
                .map_err(|e| e.context(format!("query `{query_id}`")))?;
            let filtered = filter_false_negatives(&query_id, &q, candidates, |id| texts.get(id).copied(), judge);
            out.audit.extend(filtered.audit);
            out.queries.push(MinedQuery {
                query_id,
                query: q,
                positive_id: p.id.clone(),
                negatives: filtered.kept,
                filtered: filtered.removed,
                provenance: Provenance {
                    source_doc: p.source_doc.clone(),
                    generator: generator.name().to_string(),
                    judge: judge.name().to_string(),
                },
            });
        }
    }
    Ok(out)
}
