//! Run configuration: a flat `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored, as is anything after
//! a ` #` on a value line. Unknown keys, repeated keys and unparsable values
//! are errors. Paths left empty mean "not set".

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use progemb_core::eval::EvalConfig;
use progemb_core::loss::{HyperParams, LossConfig, LossMode, Reduction};
use progemb_core::optim::{OptimizerConfig, OptimizerKind};
use progemb_core::synthetic::{SyntheticConfig, TrialConfig};
use progemb_core::trainer::{FinetuneConfig, PretrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JudgeKind {
    None,
    Always,
    Threshold,
}

impl JudgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            JudgeKind::None => "none",
            JudgeKind::Always => "always",
            JudgeKind::Threshold => "threshold",
        }
    }
}

impl FromStr for JudgeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(JudgeKind::None),
            "always" => Ok(JudgeKind::Always),
            "threshold" => Ok(JudgeKind::Threshold),
            other => Err(format!("expected `none`, `always` or `threshold`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,

    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub passages: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,

    pub dim: usize,
    pub max_query_len: usize,
    pub max_passage_len: usize,
    pub query_prefix: String,

    pub mask_ratio: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,

    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub loss_mode: LossMode,
    pub reduction: Reduction,

    pub max_chars: usize,
    pub mine_k: usize,
    pub judge: JudgeKind,
    pub judge_threshold: f64,

    pub eval_depth: usize,
    pub ndcg_k: usize,
    pub mrr_k: usize,
    pub recall_ks: Vec<usize>,
    pub include_unjudged: bool,

    pub bench_repeats: usize,
    pub bench_noise_rate: f64,
    pub bench_clusters: usize,
    pub bench_latent_dim: usize,
    pub bench_gallery: usize,
    pub bench_train_queries: usize,
    pub bench_heldout_queries: usize,
    pub bench_query_noise: f64,
    pub bench_dim: usize,
    pub bench_epochs: usize,
    pub bench_batch_size: usize,
    pub bench_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        let trial = TrialConfig::default();
        let hyper = HyperParams::default();
        let eval = EvalConfig::default();
        let opt = OptimizerConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            corpus: None,
            checkpoint: None,
            passages: None,
            dataset: None,
            gallery: None,
            queries: None,
            qrels: None,
            dim: 32,
            max_query_len: 64,
            max_passage_len: 256,
            query_prefix: String::new(),
            mask_ratio: PretrainConfig::default().mask_ratio,
            pretrain_epochs: PretrainConfig::default().epochs,
            pretrain_batch_size: PretrainConfig::default().batch_size,
            finetune_epochs: FinetuneConfig::default().epochs,
            batch_size: FinetuneConfig::default().batch_size,
            optimizer: opt.kind,
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            alpha: hyper.alpha,
            beta: hyper.beta,
            tau: hyper.tau,
            loss_mode: LossMode::Progressive,
            reduction: Reduction::Sum,
            max_chars: 200,
            mine_k: 5,
            judge: JudgeKind::None,
            judge_threshold: 0.95,
            eval_depth: eval.depth,
            ndcg_k: eval.ndcg_k,
            mrr_k: eval.mrr_k,
            recall_ks: eval.recall_ks,
            include_unjudged: eval.include_unjudged,
            bench_repeats: 1,
            bench_noise_rate: 0.0,
            bench_clusters: synth.clusters,
            bench_latent_dim: synth.latent_dim,
            bench_gallery: synth.gallery,
            bench_train_queries: synth.train_queries,
            bench_heldout_queries: synth.heldout_queries,
            bench_query_noise: synth.query_noise,
            bench_dim: trial.dim,
            bench_epochs: trial.finetune.epochs,
            bench_batch_size: trial.finetune.batch_size,
            bench_lr: trial.finetune.optimizer.lr,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::validation(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let line = line.split_once(" #").map_or(line, |(l, _)| l).trim();
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::validation(format!("config line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::validation(format!("config line {}: `{key}` set twice", n + 1)));
            }
            config
                .set(key, value)
                .map_err(|e| CliError::validation(format!("config line {}: {}", n + 1, e.message)))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.prefixed(&path.display().to_string()))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "corpus" => self.corpus = path(v),
            "checkpoint" => self.checkpoint = path(v),
            "passages" => self.passages = path(v),
            "dataset" => self.dataset = path(v),
            "gallery" => self.gallery = path(v),
            "queries" => self.queries = path(v),
            "qrels" => self.qrels = path(v),
            "dim" => self.dim = parse(key, v)?,
            "max_query_len" => self.max_query_len = parse(key, v)?,
            "max_passage_len" => self.max_passage_len = parse(key, v)?,
            "query_prefix" => self.query_prefix = v.to_string(),
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "optimizer" => self.optimizer = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "loss_mode" => self.loss_mode = parse(key, v)?,
            "reduction" => self.reduction = parse(key, v)?,
            "max_chars" => self.max_chars = parse(key, v)?,
            "mine_k" => self.mine_k = parse(key, v)?,
            "judge" => self.judge = parse(key, v)?,
            "judge_threshold" => self.judge_threshold = parse(key, v)?,
            "eval_depth" => self.eval_depth = parse(key, v)?,
            "ndcg_k" => self.ndcg_k = parse(key, v)?,
            "mrr_k" => self.mrr_k = parse(key, v)?,
            "recall_ks" => {
                self.recall_ks = v
                    .split(',')
                    .map(|k| parse(key, k.trim()))
                    .collect::<Result<_, _>>()?
            }
            "include_unjudged" => self.include_unjudged = parse(key, v)?,
            "bench_repeats" => self.bench_repeats = parse(key, v)?,
            "bench_noise_rate" => self.bench_noise_rate = parse(key, v)?,
            "bench_clusters" => self.bench_clusters = parse(key, v)?,
            "bench_latent_dim" => self.bench_latent_dim = parse(key, v)?,
            "bench_gallery" => self.bench_gallery = parse(key, v)?,
            "bench_train_queries" => self.bench_train_queries = parse(key, v)?,
            "bench_heldout_queries" => self.bench_heldout_queries = parse(key, v)?,
            "bench_query_noise" => self.bench_query_noise = parse(key, v)?,
            "bench_dim" => self.bench_dim = parse(key, v)?,
            "bench_epochs" => self.bench_epochs = parse(key, v)?,
            "bench_batch_size" => self.bench_batch_size = parse(key, v)?,
            "bench_lr" => self.bench_lr = parse(key, v)?,
            other => return Err(CliError::validation(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let recall = self.recall_ks.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("corpus", show_path(&self.corpus)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("passages", show_path(&self.passages)),
            ("dataset", show_path(&self.dataset)),
            ("gallery", show_path(&self.gallery)),
            ("queries", show_path(&self.queries)),
            ("qrels", show_path(&self.qrels)),
            ("dim", self.dim.to_string()),
            ("max_query_len", self.max_query_len.to_string()),
            ("max_passage_len", self.max_passage_len.to_string()),
            ("query_prefix", self.query_prefix.clone()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_batch_size", self.pretrain_batch_size.to_string()),
            ("finetune_epochs", self.finetune_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.as_str().to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("tau", self.tau.to_string()),
            ("loss_mode", self.loss_mode.as_str().to_string()),
            ("reduction", self.reduction.as_str().to_string()),
            ("max_chars", self.max_chars.to_string()),
            ("mine_k", self.mine_k.to_string()),
            ("judge", self.judge.as_str().to_string()),
            ("judge_threshold", self.judge_threshold.to_string()),
            ("eval_depth", self.eval_depth.to_string()),
            ("ndcg_k", self.ndcg_k.to_string()),
            ("mrr_k", self.mrr_k.to_string()),
            ("recall_ks", recall),
            ("include_unjudged", self.include_unjudged.to_string()),
            ("bench_repeats", self.bench_repeats.to_string()),
            ("bench_noise_rate", self.bench_noise_rate.to_string()),
            ("bench_clusters", self.bench_clusters.to_string()),
            ("bench_latent_dim", self.bench_latent_dim.to_string()),
            ("bench_gallery", self.bench_gallery.to_string()),
            ("bench_train_queries", self.bench_train_queries.to_string()),
            ("bench_heldout_queries", self.bench_heldout_queries.to_string()),
            ("bench_query_noise", self.bench_query_noise.to_string()),
            ("bench_dim", self.bench_dim.to_string()),
            ("bench_epochs", self.bench_epochs.to_string()),
            ("bench_batch_size", self.bench_batch_size.to_string()),
            ("bench_lr", self.bench_lr.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(CliError::validation(msg.to_string())) };
        check(self.dim >= 1, "`dim` must be >= 1")?;
        check(self.max_query_len >= 1, "`max_query_len` must be >= 1")?;
        check(self.max_passage_len >= 1, "`max_passage_len` must be >= 1")?;
        check((0.0..1.0).contains(&self.mask_ratio), "`mask_ratio` must lie in [0, 1)")?;
        check(self.pretrain_batch_size >= 1, "`pretrain_batch_size` must be >= 1")?;
        check(self.batch_size >= 1, "`batch_size` must be >= 1")?;
        check(self.max_chars >= 1, "`max_chars` must be >= 1")?;
        check(self.mine_k >= 1, "`mine_k` must be >= 1")?;
        check(self.judge_threshold.is_finite(), "`judge_threshold` must be finite")?;
        check(self.bench_repeats >= 1, "`bench_repeats` must be >= 1")?;
        check(self.bench_dim >= 1, "`bench_dim` must be >= 1")?;
        check(self.bench_batch_size >= 1, "`bench_batch_size` must be >= 1")?;
        self.hyper().validate().map_err(CliError::from)?;
        self.optimizer_config(self.lr).validate().map_err(CliError::from)?;
        self.optimizer_config(self.bench_lr).validate().map_err(CliError::from)?;
        self.eval_config().validate().map_err(CliError::from)?;
        self.synthetic_config().validate().map_err(CliError::from)?;
        Ok(())
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            hyper: self.hyper(),
            mode: self.loss_mode,
            reduction: self.reduction,
        }
    }

    fn optimizer_config(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr,
            weight_decay: self.weight_decay,
            ..OptimizerConfig::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            mask_ratio: self.mask_ratio,
            optimizer: self.optimizer_config(self.lr),
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            loss: self.loss_config(),
            optimizer: self.optimizer_config(self.lr),
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            depth: self.eval_depth,
            ndcg_k: self.ndcg_k,
            mrr_k: self.mrr_k,
            recall_ks: self.recall_ks.clone(),
            include_unjudged: self.include_unjudged,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            clusters: self.bench_clusters,
            latent_dim: self.bench_latent_dim,
            gallery: self.bench_gallery,
            train_queries: self.bench_train_queries,
            heldout_queries: self.bench_heldout_queries,
            query_noise: self.bench_query_noise,
            noise_rate: self.bench_noise_rate,
            ..SyntheticConfig::default()
        }
    }

    pub fn trial_config(&self) -> TrialConfig {
        TrialConfig {
            dim: self.bench_dim,
            max_len: self.max_query_len,
            mine_k: self.mine_k,
            finetune: FinetuneConfig {
                epochs: self.bench_epochs,
                batch_size: self.bench_batch_size,
                loss: self.loss_config(),
                optimizer: self.optimizer_config(self.bench_lr),
                seed: self.seed,
            },
            eval: self.eval_config(),
        }
    }

    /// Required path setting, or a validation error naming the key.
    pub fn require<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::validation(format!("config key `{key}` must be set for this command")))
    }
}
