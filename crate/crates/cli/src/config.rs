//! Run configuration. A TOML file has `[model]`, `[train]`, `[data]` and
//! `[output]` sections; every key can also be set by a flag, and flags win.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use normlab::data::{ingest, subset, synthetic_corpus, DataBudget, Format, Split, TokenStream};
use normlab::model::{AttnKind, FfnKind, ModelConfig, NormKind, PosKind};
use normlab::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "NORMLAB_OUT";

fn default_format() -> Format {
    Format::RawBytes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Corpus file; the synthetic corpus is used when absent.
    pub path: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: Format,
    /// Synthetic corpus length; 0 sizes it to the budget.
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            format: Format::RawBytes,
            synthetic_bytes: 0,
            synthetic_seed: 0,
            train_tokens: 100_000,
            val_tokens: 20_000,
            seed: 0,
        }
    }
}

impl DataSection {
    pub fn budget(&self) -> DataBudget {
        DataBudget {
            train_tokens: self.train_tokens,
            val_tokens: self.val_tokens,
            seed: self.seed,
        }
    }

    pub fn load_stream(&self) -> Result<TokenStream> {
        match &self.path {
            Some(p) => Ok(ingest(p, self.format)?),
            None => {
                let n = self.synthetic_bytes.max(self.train_tokens + self.val_tokens);
                let bytes = synthetic_corpus(n, self.synthetic_seed);
                Ok(TokenStream::from_bytes(
                    &bytes,
                    format!("synthetic(bytes={n},seed={})", self.synthetic_seed),
                )?)
            }
        }
    }

    /// Train and validation splits plus the stream's source label.
    pub fn load_splits(&self) -> Result<(Split, Split, String)> {
        let stream = self.load_stream()?;
        let (train, val) = subset(&stream, &self.budget())?;
        Ok((train, val, stream.source().to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub interval_checkpoints: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub output: OutputSection,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| normlab::Error::Config(format!("{}: {e}", path.display())).into())
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    #[arg(long = "n-layer", alias = "layers")]
    pub n_layer: Option<usize>,
    #[arg(long = "n-head", alias = "heads")]
    pub n_head: Option<usize>,
    #[arg(long = "n-kv-head", alias = "kv-heads")]
    pub n_kv_head: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long = "norm", alias = "norm-kind")]
    pub norm_kind: Option<NormKind>,
    #[arg(long = "attn", alias = "attn-kind")]
    pub attn_kind: Option<AttnKind>,
    #[arg(long = "ffn", alias = "ffn-kind")]
    pub ffn_kind: Option<FfnKind>,
    #[arg(long = "pos", alias = "pos-kind")]
    pub pos_kind: Option<PosKind>,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha_init: Option<f64>,
    #[arg(long = "dropout", alias = "dropout-p")]
    pub dropout_p: Option<f64>,
    #[arg(long)]
    pub weight_tying: Option<bool>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambda_init: Option<f64>,
    #[arg(long)]
    pub diff_stabilizer: Option<bool>,
    #[arg(long)]
    pub rope_base: Option<f64>,
    #[arg(long)]
    pub norm_eps: Option<f64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[arg(long = "steps", alias = "max-steps")]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    #[arg(long)]
    pub eval_batches: Option<usize>,
    #[arg(long = "lr", alias = "lr-peak")]
    pub lr_peak: Option<f64>,
    #[arg(long = "warmup", alias = "warmup-steps")]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Corpus file (default: built-in synthetic corpus).
    #[arg(long = "data", alias = "data-path")]
    pub path: Option<PathBuf>,
    /// raw-bytes or u16.
    #[arg(long)]
    pub format: Option<Format>,
    #[arg(long)]
    pub synthetic_bytes: Option<usize>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    /// Training tokens.
    #[arg(long = "budget", alias = "train-tokens")]
    pub train_tokens: Option<usize>,
    #[arg(long)]
    pub val_tokens: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct OutputArgs {
    /// Output directory (default: $NORMLAB_OUT, else ./normlab-out).
    #[arg(long = "out", env = OUT_ENV)]
    pub dir: Option<PathBuf>,
    /// Manifest file (default: <out>/manifest.jsonl).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Also checkpoint at every evaluation.
    #[arg(long)]
    pub interval_checkpoints: bool,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML file with [model], [train], [data] and [output] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

macro_rules! set {
    ($dst:expr, $($field:ident),+ from $src:expr) => {
        $(if let Some(v) = $src.$field.clone() { $dst.$field = v; })+
    };
}

impl ConfigArgs {
    /// File values (or defaults) with flags applied on top, validated.
    pub fn resolve(&self) -> Result<FileConfig> {
        let mut c = match &self.config {
            Some(p) => FileConfig::read(p)?,
            None => FileConfig::default(),
        };
        let m = &self.model;
        set!(c.model, n_layer, n_head, n_kv_head, d_model, vocab_size, block_size, norm_kind, attn_kind,
             ffn_kind, pos_kind, alpha_init, dropout_p, weight_tying, lambda_init, diff_stabilizer, rope_base,
             norm_eps from m);
        let t = &self.train;
        set!(c.train, max_steps, eval_interval, eval_batches, lr_peak, warmup_steps, min_lr, weight_decay,
             grad_clip, batch_size, grad_accum, seed from t);
        if let Some(b) = t.beta1 {
            c.train.betas.0 = b;
        }
        if let Some(b) = t.beta2 {
            c.train.betas.1 = b;
        }
        let d = &self.data;
        set!(c.data, format, synthetic_bytes, synthetic_seed, train_tokens, val_tokens from d);
        if d.path.is_some() {
            c.data.path = d.path.clone();
        }
        if let Some(s) = d.data_seed {
            c.data.seed = s;
        }
        if self.output.dir.is_some() {
            c.output.dir = self.output.dir.clone();
        }
        if self.output.manifest.is_some() {
            c.output.manifest = self.output.manifest.clone();
        }
        c.output.interval_checkpoints |= self.output.interval_checkpoints;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }
}

impl OutputSection {
    pub fn dir(&self) -> PathBuf {
        self.dir.clone().unwrap_or_else(|| PathBuf::from("normlab-out"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.dir().join("manifest.jsonl"))
    }
}
