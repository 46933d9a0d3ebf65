//! The five pipeline stages. Each reads its inputs from paths in the run
//! config and writes its outputs under `config.out`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use progemb_core::checkpoint::Checkpoint;
use progemb_core::encoder::{MaeDecoder, ToyEncoder};
use progemb_core::eval::{self, EvalQuery, Gallery, MacroMetrics, MetricReport, QueryIssue, QueryMetrics, Qrels};
use progemb_core::formats::{self, CorpusRecord, Header, JsonlWriter, LossRecord, QrelRecord, QueryRecord};
use progemb_core::loss::LossMode;
use progemb_core::mining::{self, AssemblyStats, FirstSentence, MineConfig, RelevanceJudge};
use progemb_core::sim::Embedding;
use progemb_core::synthetic::{self, SeedComparison};
use progemb_core::tokenizer::{self, TokenSequence, Vocabulary};
use progemb_core::trainer::{self, Document, StepRecord, TrainingExample};

use crate::config::{JudgeKind, RunConfig};
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_CURVE_FILE: &str = "pretrain_loss.jsonl";
pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MINING_AUDIT_FILE: &str = "mining_audit.jsonl";
pub const FINETUNE_AUDIT_FILE: &str = "finetune_audit.jsonl";
pub const GALLERY_FILE: &str = "gallery.emb";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BENCH_FILE: &str = "bench.jsonl";

fn out_dir(config: &RunConfig) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&config.out)
        .map_err(|e| CliError::io(format!("{}: {e}", config.out.display())))?;
    Ok(&config.out)
}

fn read_records<T: serde::de::DeserializeOwned>(path: &Path, format: &str) -> Result<Vec<T>, CliError> {
    let (_, records) = formats::read_jsonl(path, format)?;
    Ok(records)
}

fn query_tokens(config: &RunConfig, vocab: &Vocabulary, text: &str) -> progemb_core::Result<TokenSequence> {
    vocab.encode_with_prefix(&config.query_prefix, text, config.max_query_len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
}

pub fn cmd_pretrain(config: &RunConfig) -> Result<PretrainOutcome, CliError> {
    let docs: Vec<CorpusRecord> = read_records(config.require("corpus", &config.corpus)?, formats::CORPUS)?;
    if docs.is_empty() {
        return Err(CliError::validation("pretraining corpus has no records"));
    }
    let vocab = Vocabulary::build(
        docs.iter()
            .map(|d| d.text.as_str())
            .chain(std::iter::once(config.query_prefix.as_str())),
    );
    let seqs = docs
        .iter()
        .map(|d| {
            vocab
                .encode(&d.text, config.max_passage_len)
                .map_err(|e| e.context(format!("corpus record `{}`", d.id)))
        })
        .collect::<progemb_core::Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut enc = ToyEncoder::random(vocab.len(), config.dim, &mut rng)?;
    let mut dec = MaeDecoder::random(config.max_passage_len, config.dim, vocab.len(), &mut rng)?;
    let losses = trainer::pretrain(&seqs, &mut enc, &mut dec, &config.pretrain_config())?;

    let out = out_dir(config)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::new(enc, Some(dec), vocab)?.save(&checkpoint)?;
    let rows: Vec<LossRecord> = losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| LossRecord { epoch: i + 1, loss })
        .collect();
    formats::write_jsonl(
        out.join(LOSS_CURVE_FILE),
        &Header::new(formats::LOSS_CURVE).with("seed", config.seed),
        &rows,
    )?;
    for r in &rows {
        println!("epoch {:>3}  mae loss {:.6}", r.epoch, r.loss);
    }
    Ok(PretrainOutcome { checkpoint, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MineOutcome {
    pub passages: usize,
    pub stats: AssemblyStats,
    pub audit_rows: usize,
}

fn judge_for(config: &RunConfig) -> Box<dyn RelevanceJudge> {
    match config.judge {
        JudgeKind::None => Box::new(mining::NeverRelevant),
        JudgeKind::Always => Box::new(mining::AlwaysRelevant),
        JudgeKind::Threshold => Box::new(mining::SimilarityThreshold(config.judge_threshold)),
    }
}

pub fn cmd_mine(config: &RunConfig) -> Result<MineOutcome, CliError> {
    let docs: Vec<CorpusRecord> = read_records(config.require("corpus", &config.corpus)?, formats::CORPUS)?;
    let ckpt = Checkpoint::load(config.require("checkpoint", &config.checkpoint)?)?;
    let vocab = &ckpt.vocab;

    let mut passages = mining::split_corpus(&docs, config.max_chars)?;
    let before = passages.len();
    passages.retain(|p| !tokenizer::words(&p.text).is_empty());
    if passages.len() < before {
        log::warn!("dropped {} passages without any word tokens", before - passages.len());
    }
    let embeddings = passages
        .iter()
        .map(|p| {
            vocab
                .encode(&p.text, config.max_passage_len)
                .and_then(|t| ckpt.encoder.encode(&t))
                .map_err(|e| e.context(format!("passage `{}`", p.id)))
        })
        .collect::<progemb_core::Result<Vec<Embedding>>>()?;

    let judge = judge_for(config);
    let mined = mining::mine(
        &passages,
        &embeddings,
        &FirstSentence,
        judge.as_ref(),
        MineConfig { k: config.mine_k },
        |q| ckpt.encoder.encode(&query_tokens(config, vocab, q)?),
    )?;

    let out = out_dir(config)?;
    let records: Vec<CorpusRecord> = passages
        .iter()
        .map(|p| CorpusRecord {
            id: p.id.clone(),
            text: p.text.clone(),
            source_doc: p.source_doc.clone(),
        })
        .collect();
    formats::write_jsonl(out.join(PASSAGES_FILE), &Header::new(formats::CORPUS), &records)?;
    let (_, stats) = mining::assemble_dataset(&mined.queries, out.join(DATASET_FILE))?;
    formats::write_jsonl(
        out.join(MINING_AUDIT_FILE),
        &Header::new(formats::MINING_AUDIT).with("judge", judge.name()),
        &mined.audit,
    )?;

    println!("passages              {}", passages.len());
    println!("passages w/o queries  {}", mined.passages_without_queries);
    println!("examples written      {}", stats.examples);
    println!("negatives kept        {}", stats.negatives);
    println!("negatives filtered    {}", stats.negatives_filtered);
    println!("queries w/o negatives {}", stats.without_negatives);
    Ok(MineOutcome {
        passages: passages.len(),
        stats,
        audit_rows: mined.audit.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub checkpoint: PathBuf,
    pub steps: Vec<StepRecord>,
}

pub fn cmd_finetune(config: &RunConfig) -> Result<FinetuneOutcome, CliError> {
    let ckpt = Checkpoint::load(config.require("checkpoint", &config.checkpoint)?)?;
    let dataset = mining::read_dataset(config.require("dataset", &config.dataset)?)?;
    let passages: Vec<CorpusRecord> = read_records(config.require("passages", &config.passages)?, formats::CORPUS)?;
    let vocab = &ckpt.vocab;

    let mut docs: HashMap<&str, Document> = HashMap::with_capacity(passages.len());
    for p in &passages {
        let tokens = vocab
            .encode(&p.text, config.max_passage_len)
            .map_err(|e| e.context(format!("passage `{}`", p.id)))?;
        let doc = Document {
            id: p.id.clone(),
            tokens,
        };
        if docs.insert(&p.id, doc).is_some() {
            return Err(CliError::validation(format!("duplicate passage id `{}`", p.id)));
        }
    }
    let doc = |id: &str, query: &str| {
        docs.get(id).cloned().ok_or_else(|| {
            CliError::validation(format!("dataset query `{query}` refers to unknown passage `{id}`"))
        })
    };
    let examples = dataset
        .iter()
        .map(|r| {
            let negatives = r
                .negative_ids
                .iter()
                .map(|id| doc(id, &r.query_id))
                .collect::<Result<Vec<_>, _>>()?;
            let query = query_tokens(config, vocab, &r.query)
                .map_err(|e| e.context(format!("dataset query `{}`", r.query_id)))?;
            Ok(TrainingExample::new(
                r.query_id.clone(),
                query,
                doc(&r.positive_id, &r.query_id)?,
                negatives,
            )?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let ft = config.finetune_config();
    let mut enc = ckpt.encoder.clone();
    let report = trainer::finetune(&examples, &mut enc, &ft, |r, _| {
        log::debug!("step {} loss {:.6} sigma {:.6} bias {:.6}", r.step, r.loss, r.sigma, r.bias);
    })?;

    let out = out_dir(config)?;
    let header = Header::new(formats::FINETUNE_AUDIT)
        .with("loss_mode", ft.loss.mode.as_str())
        .with("reduction", ft.loss.reduction.as_str())
        .with("alpha", ft.loss.hyper.alpha)
        .with("beta", ft.loss.hyper.beta)
        .with("tau", ft.loss.hyper.tau)
        .with("optimizer", ft.optimizer.kind.as_str())
        .with("seed", ft.seed);
    formats::write_jsonl(out.join(FINETUNE_AUDIT_FILE), &header, &report.steps)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    Checkpoint::new(enc, ckpt.decoder, ckpt.vocab)?.save(&checkpoint)?;

    println!("loss mode  {}", ft.loss.mode.as_str());
    println!("steps      {}", report.steps.len());
    if let Some(last) = report.steps.last() {
        println!("last loss  {:.6}", last.loss);
        println!("final bias {:.6}", last.bias);
    }
    Ok(FinetuneOutcome {
        checkpoint,
        steps: report.steps,
    })
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricLine {
    Query(QueryMetrics),
    Summary(MacroMetrics),
    Excluded(QueryIssue),
    Error(QueryIssue),
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<(), CliError> {
    let header = Header::new(formats::METRICS)
        .with("ndcg_k", report.ndcg_k)
        .with("mrr_k", report.mrr_k)
        .with("recall_ks", report.recall_ks.clone());
    let mut w = JsonlWriter::create(path, &header)?;
    for r in &report.rows {
        w.write(&MetricLine::Query(r.clone()))?;
    }
    w.write(&MetricLine::Summary(report.summary.clone()))?;
    for e in &report.excluded {
        w.write(&MetricLine::Excluded(e.clone()))?;
    }
    for e in &report.errors {
        w.write(&MetricLine::Error(e.clone()))?;
    }
    Ok(w.finish()?)
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<MetricReport, CliError> {
    let ckpt = Checkpoint::load(config.require("checkpoint", &config.checkpoint)?)?;
    let gallery_docs: Vec<CorpusRecord> = read_records(config.require("gallery", &config.gallery)?, formats::CORPUS)?;
    let queries: Vec<QueryRecord> = read_records(config.require("queries", &config.queries)?, formats::QUERIES)?;
    let qrel_rows: Vec<QrelRecord> = read_records(config.require("qrels", &config.qrels)?, formats::QRELS)?;
    let qrels = Qrels::from_records(&qrel_rows)?;
    let vocab = &ckpt.vocab;
    let enc = &ckpt.encoder;

    let embeddings = gallery_docs
        .iter()
        .map(|d| {
            vocab
                .encode(&d.text, config.max_passage_len)
                .and_then(|t| enc.encode(&t))
                .map_err(|e| e.context(format!("gallery document `{}`", d.id)))
        })
        .collect::<progemb_core::Result<Vec<_>>>()?;
    let gallery = Gallery::new(gallery_docs.iter().map(|d| d.id.clone()).collect(), embeddings)?;
    let known: std::collections::HashSet<&str> = gallery.ids().iter().map(String::as_str).collect();
    let unknown = qrel_rows.iter().filter(|r| !known.contains(r.doc_id.as_str())).count();
    if unknown > 0 {
        log::warn!("{unknown} qrels rows refer to documents missing from the gallery");
    }

    let eval_queries: Vec<EvalQuery> = queries
        .iter()
        .map(|q| EvalQuery {
            id: q.id.clone(),
            embedding: query_tokens(config, vocab, &q.text)
                .and_then(|t| enc.encode(&t))
                .map_err(|e| e.to_string()),
        })
        .collect();
    let report = eval::evaluate_run(&eval_queries, &gallery, &qrels, &config.eval_config())?;

    let out = out_dir(config)?;
    formats::write_embeddings(out.join(GALLERY_FILE), gallery.embeddings())?;
    write_report(&out.join(METRICS_FILE), &report)?;
    println!("{report}");
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BenchLine {
    Run {
        seed: u64,
        mode: LossMode,
        steps: usize,
        final_loss: f64,
        metrics: MacroMetrics,
    },
    /// Progressive minus InfoNCE for one seed.
    Delta { seed: u64, metrics: MacroMetrics },
    /// Mean over seeds; `mode` is `progressive`, `infonce` or `delta`.
    Summary { mode: String, seeds: usize, metrics: MacroMetrics },
}

fn combine(a: &MacroMetrics, b: &MacroMetrics, f: impl Fn(f64, f64) -> f64) -> MacroMetrics {
    MacroMetrics {
        queries: a.queries,
        ndcg: f(a.ndcg, b.ndcg),
        mrr: f(a.mrr, b.mrr),
        map: f(a.map, b.map),
        recall: a.recall.iter().zip(&b.recall).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn mean_metrics<'a>(rows: impl IntoIterator<Item = &'a MacroMetrics>) -> Option<MacroMetrics> {
    let rows: Vec<&MacroMetrics> = rows.into_iter().collect();
    let first = (*rows.first()?).clone();
    let sum = rows[1..].iter().fold(first, |acc, r| combine(&acc, r, |x, y| x + y));
    let n = rows.len() as f64;
    Some(combine(&sum, &sum, |x, _| x / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub seeds: Vec<SeedComparison>,
    pub lines: Vec<BenchLine>,
}

pub fn bench_lines(seeds: &[SeedComparison]) -> Vec<BenchLine> {
    let mut lines = Vec::new();
    for s in seeds {
        for r in [&s.progressive, &s.infonce] {
            lines.push(BenchLine::Run {
                seed: s.seed,
                mode: r.mode,
                steps: r.steps,
                final_loss: r.final_loss,
                metrics: r.after.clone(),
            });
        }
        lines.push(BenchLine::Delta {
            seed: s.seed,
            metrics: combine(&s.progressive.after, &s.infonce.after, |a, b| a - b),
        });
    }
    let deltas: Vec<MacroMetrics> = seeds
        .iter()
        .map(|s| combine(&s.progressive.after, &s.infonce.after, |a, b| a - b))
        .collect();
    let summaries = [
        ("progressive", mean_metrics(seeds.iter().map(|s| &s.progressive.after))),
        ("infonce", mean_metrics(seeds.iter().map(|s| &s.infonce.after))),
        ("delta", mean_metrics(&deltas)),
    ];
    for (mode, m) in summaries {
        if let Some(metrics) = m {
            lines.push(BenchLine::Summary {
                mode: mode.to_string(),
                seeds: seeds.len(),
                metrics,
            });
        }
    }
    lines
}

fn print_bench_row(label: &str, m: &MacroMetrics, recall_ks: &[usize]) {
    let recall: String = recall_ks
        .iter()
        .zip(&m.recall)
        .map(|(k, r)| format!("  r@{k} {r:>8.4}"))
        .collect();
    println!("{label:<24}{recall}  ndcg {:>8.4}  mrr {:>8.4}  map {:>8.4}", m.ndcg, m.mrr, m.map);
}

pub fn cmd_bench(config: &RunConfig) -> Result<BenchOutcome, CliError> {
    let synth = config.synthetic_config();
    let trial = config.trial_config();
    let seeds: Vec<u64> = (0..config.bench_repeats as u64).map(|i| config.seed + i).collect();
    let recall_ks = config.recall_ks.clone();
    println!(
        "bench: {} seeds, noise rate {}, {} epochs",
        seeds.len(),
        synth.noise_rate,
        trial.finetune.epochs
    );
    let rows = synthetic::compare(&synth, &trial, &seeds, |s| {
        print_bench_row(&format!("seed {} progressive", s.seed), &s.progressive.after, &recall_ks);
        print_bench_row(&format!("seed {} infonce", s.seed), &s.infonce.after, &recall_ks);
    })?;
    let lines = bench_lines(&rows);
    for l in &lines {
        if let BenchLine::Summary { mode, metrics, .. } = l {
            print_bench_row(&format!("mean {mode}"), metrics, &recall_ks);
        }
    }
    let out = out_dir(config)?;
    let header = Header::new(formats::BENCH)
        .with("noise_rate", synth.noise_rate)
        .with("recall_ks", recall_ks.clone())
        .with("seeds", seeds.clone());
    formats::write_jsonl(out.join(BENCH_FILE), &header, &lines)?;
    Ok(BenchOutcome { seeds: rows, lines })
}
