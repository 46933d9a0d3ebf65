//! Synthetic clustered retrieval task and the loss-mode comparison run on it.
//!
//! Passages are points drawn around a few isotropic Gaussian cluster centers;
//! a query is its passage's point plus a little extra noise. Points become
//! text by quantizing every coordinate into a bin word (`f3b07` is bin 7 of
//! coordinate 3). Each text also gets some filler words drawn from a shared
//! pool that carry no information, so an untrained encoder is distracted by
//! them.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, EvalQuery, Gallery, MacroMetrics, Qrels};
use crate::loss::{LossConfig, LossMode};
use crate::mining;
use crate::optim::OptimizerConfig;
use crate::sim::Embedding;
use crate::tokenizer::{TokenSequence, Vocabulary};
use crate::trainer::{self, Document, FinetuneConfig, TrainingExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub latent_dim: usize,
    pub gallery: usize,
    pub train_queries: usize,
    pub heldout_queries: usize,
    /// Standard deviation of the cluster centers.
    pub center_scale: f64,
    /// Standard deviation of passages around their center.
    pub spread: f64,
    /// Standard deviation of a query around its passage.
    pub query_noise: f64,
    /// Bins per coordinate, covering `[-range, range]`; values outside are
    /// clamped into the edge bins.
    pub bins: usize,
    pub range: f64,
    pub filler_pool: usize,
    pub filler_per_text: usize,
    /// Fraction of training queries whose positive is replaced by a random
    /// other passage.
    pub noise_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            latent_dim: 16,
            gallery: 2000,
            train_queries: 1600,
            heldout_queries: 200,
            center_scale: 1.0,
            spread: 0.5,
            query_noise: 0.03,
            bins: 12,
            range: 2.5,
            filler_pool: 40,
            filler_per_text: 8,
            noise_rate: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.latent_dim == 0 || self.bins == 0 {
            return Err(Error::invalid("synthetic", "clusters, latent_dim and bins must be >= 1"));
        }
        if self.train_queries + self.heldout_queries > self.gallery {
            return Err(Error::invalid(
                "synthetic",
                format!(
                    "{} + {} queries need at least as many gallery passages, got {}",
                    self.train_queries, self.heldout_queries, self.gallery
                ),
            ));
        }
        if self.train_queries == 0 || self.heldout_queries == 0 {
            return Err(Error::invalid("synthetic", "need at least one training and one held-out query"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::invalid("noise_rate", "must lie in [0, 1]"));
        }
        for (name, v) in [
            ("center_scale", self.center_scale),
            ("spread", self.spread),
            ("query_noise", self.query_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("synthetic", format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::invalid("range", "must be finite and > 0"));
        }
        if self.filler_per_text > 0 && self.filler_pool == 0 {
            return Err(Error::invalid("filler_pool", "must be >= 1 when filler words are used"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub id: String,
    pub text: String,
    /// The passage the query was generated from.
    pub source_id: String,
    /// The passage labelled as its positive (differs from `source_id` for
    /// injected false positives).
    pub positive_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub passages: Vec<mining::Passage>,
    pub train: Vec<SyntheticQuery>,
    pub heldout: Vec<SyntheticQuery>,
}

impl SyntheticData {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(
            self.passages
                .iter()
                .map(|p| p.text.as_str())
                .chain(self.train.iter().chain(&self.heldout).map(|q| q.text.as_str())),
        )
    }

    pub fn noisy_pairs(&self) -> usize {
        self.train.iter().filter(|q| q.positive_id != q.source_id).count()
    }
}

fn to_text<R: Rng>(point: &[f64], config: &SyntheticConfig, rng: &mut R) -> String {
    let width = 2.0 * config.range / config.bins as f64;
    let mut words: Vec<String> = point
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let b = ((x + config.range) / width).floor().clamp(0.0, (config.bins - 1) as f64) as usize;
            format!("f{j}b{b:02}")
        })
        .collect();
    for _ in 0..config.filler_per_text {
        words.push(format!("w{:03}", rng.random_range(0..config.filler_pool)));
    }
    words.shuffle(rng);
    words.join(" ")
}

/// Draws a corpus, training queries and held-out queries from `seed`.
pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |sd: f64| Normal::new(0.0, sd).expect("validated standard deviation");
    let (center_d, spread_d, query_d) = (
        normal(config.center_scale),
        normal(config.spread),
        normal(config.query_noise),
    );

    let centers: Vec<Vec<f64>> = (0..config.clusters)
        .map(|_| (0..config.latent_dim).map(|_| center_d.sample(&mut rng)).collect())
        .collect();
    let points: Vec<Vec<f64>> = (0..config.gallery)
        .map(|i| {
            centers[i % config.clusters]
                .iter()
                .map(|c| c + spread_d.sample(&mut rng))
                .collect()
        })
        .collect();
    let passages: Vec<mining::Passage> = points
        .iter()
        .enumerate()
        .map(|(i, p)| mining::Passage {
            id: format!("p{i:05}"),
            text: to_text(p, config, &mut rng),
            source_doc: format!("cluster{}", i % config.clusters),
        })
        .collect();

    let mut order: Vec<usize> = (0..config.gallery).collect();
    order.shuffle(&mut rng);
    let make_query = |n: usize, src: usize, rng: &mut ChaCha8Rng| {
        let q: Vec<f64> = points[src].iter().map(|x| x + query_d.sample(rng)).collect();
        SyntheticQuery {
            id: format!("q{n:05}"),
            text: to_text(&q, config, rng),
            source_id: passages[src].id.clone(),
            positive_id: passages[src].id.clone(),
        }
    };
    let mut train: Vec<SyntheticQuery> = order[..config.train_queries]
        .iter()
        .enumerate()
        .map(|(n, &src)| make_query(n, src, &mut rng))
        .collect();
    let heldout = order[config.train_queries..config.train_queries + config.heldout_queries]
        .iter()
        .enumerate()
        .map(|(n, &src)| make_query(config.train_queries + n, src, &mut rng))
        .collect();

    let noisy = (config.noise_rate * config.train_queries as f64).round() as usize;
    let mut victims: Vec<usize> = (0..config.train_queries).collect();
    victims.shuffle(&mut rng);
    for &v in &victims[..noisy] {
        let q = &mut train[v];
        loop {
            let other = &passages[rng.random_range(0..config.gallery)].id;
            if *other != q.source_id {
                q.positive_id = other.clone();
                break;
            }
        }
    }

    Ok(SyntheticData {
        passages,
        train,
        heldout,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub dim: usize,
    pub max_len: usize,
    /// Hard negatives mined per training query with the initial encoder.
    pub mine_k: usize,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_len: 64,
            mine_k: 5,
            finetune: FinetuneConfig {
                epochs: 30,
                batch_size: 32,
                loss: LossConfig::default(),
                optimizer: OptimizerConfig {
                    lr: 0.05,
                    ..OptimizerConfig::default()
                },
                seed: 0,
            },
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub mode: LossMode,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub before: MacroMetrics,
    pub after: MacroMetrics,
}

fn embed_all(enc: &ToyEncoder, seqs: &[TokenSequence]) -> Result<Vec<Embedding>> {
    seqs.iter().map(|s| enc.encode(s)).collect()
}

fn heldout_metrics(
    enc: &ToyEncoder,
    data: &SyntheticData,
    passage_tokens: &[TokenSequence],
    heldout_tokens: &[TokenSequence],
    config: &EvalConfig,
) -> Result<MacroMetrics> {
    let gallery = Gallery::new(
        data.passages.iter().map(|p| p.id.clone()).collect(),
        embed_all(enc, passage_tokens)?,
    )?;
    let mut qrels = Qrels::new();
    for q in &data.heldout {
        qrels.insert(&q.id, &q.source_id, 1)?;
    }
    let queries: Vec<EvalQuery> = data
        .heldout
        .iter()
        .zip(heldout_tokens)
        .map(|(q, t)| EvalQuery {
            id: q.id.clone(),
            embedding: enc.encode(t).map_err(|e| e.to_string()),
        })
        .collect();
    Ok(eval::evaluate_run(&queries, &gallery, &qrels, config)?.summary)
}

/// Builds training examples with hard negatives mined by `enc`.
pub fn training_examples(
    enc: &ToyEncoder,
    data: &SyntheticData,
    vocab: &Vocabulary,
    max_len: usize,
    mine_k: usize,
) -> Result<Vec<TrainingExample>> {
    let ids: Vec<String> = data.passages.iter().map(|p| p.id.clone()).collect();
    let tokens = data
        .passages
        .iter()
        .map(|p| vocab.encode(&p.text, max_len))
        .collect::<Result<Vec<_>>>()?;
    let embs = embed_all(enc, &tokens)?;
    let index: std::collections::HashMap<&str, usize> =
        ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let doc = |id: &str| -> Result<Document> {
        let i = *index.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        Ok(Document {
            id: id.to_string(),
            tokens: tokens[i].clone(),
        })
    };
    data.train
        .iter()
        .map(|q| {
            let qt = vocab.encode(&q.text, max_len)?;
            let positives: HashSet<&str> = [q.positive_id.as_str()].into();
            let negs = if mine_k == 0 {
                Vec::new()
            } else {
                mining::mine_hard_negatives(&enc.encode(&qt)?, &ids, &embs, &positives, mine_k)?
            };
            let negatives = negs
                .iter()
                .take(trainer::MAX_HARD_NEGATIVES)
                .map(|c| doc(&c.passage_id))
                .collect::<Result<Vec<_>>>()?;
            TrainingExample::new(q.id.clone(), qt, doc(&q.positive_id)?, negatives)
        })
        .collect()
}

/// Trains a fresh encoder (seeded by `seed`) with `mode` and reports
/// held-out metrics before and after.
pub fn run_trial(data: &SyntheticData, mode: LossMode, seed: u64, config: &TrialConfig) -> Result<TrialResult> {
    let vocab = data.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = ToyEncoder::random(vocab.len(), config.dim, &mut rng)?;

    let passage_tokens = data
        .passages
        .iter()
        .map(|p| vocab.encode(&p.text, config.max_len))
        .collect::<Result<Vec<_>>>()?;
    let heldout_tokens = data
        .heldout
        .iter()
        .map(|q| vocab.encode(&q.text, config.max_len))
        .collect::<Result<Vec<_>>>()?;
    let before = heldout_metrics(&enc, data, &passage_tokens, &heldout_tokens, &config.eval)?;

    let examples = training_examples(&enc, data, &vocab, config.max_len, config.mine_k)?;
    let mut ft = config.finetune.clone();
    ft.loss.mode = mode;
    ft.seed = seed;
    let report = trainer::finetune(&examples, &mut enc, &ft, |_, _| {})?;

    let after = heldout_metrics(&enc, data, &passage_tokens, &heldout_tokens, &config.eval)?;
    Ok(TrialResult {
        mode,
        seed,
        steps: report.steps.len(),
        final_loss: report.steps.last().map_or(f64::NAN, |s| s.loss),
        before,
        after,
    })
}

/// One seed of the comparison: both loss modes on identical data and
/// initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub progressive: TrialResult,
    pub infonce: TrialResult,
}

impl SeedComparison {
    pub fn recall1_delta(&self) -> f64 {
        self.progressive.after.recall[0] - self.infonce.after.recall[0]
    }
}

/// Runs both loss modes on `seeds`, each seed generating its own data.
pub fn compare(
    data_config: &SyntheticConfig,
    trial: &TrialConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&SeedComparison),
) -> Result<Vec<SeedComparison>> {
    if seeds.is_empty() {
        return Err(Error::Empty("bench seeds".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let data = generate(data_config, seed)?;
            let row = SeedComparison {
                seed,
                progressive: run_trial(&data, LossMode::Progressive, seed, trial)?,
                infonce: run_trial(&data, LossMode::InfoNce, seed, trial)?,
            };
            progress(&row);
            Ok(row)
        })
        .collect()
}
