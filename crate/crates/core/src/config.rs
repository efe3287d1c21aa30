//! Run configuration: every tunable in one struct, loadable from a
//! key-value text file with flag overrides applied on top. The resolved
//! config is serialized verbatim into checkpoints and report headers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::split::GroupThreshold;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Softmax,
    Triplet,
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Softmax => write!(f, "softmax"),
            HeadKind::Triplet => write!(f, "triplet"),
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "triplet" => Ok(HeadKind::Triplet),
            other => Err(Error::Config(format!(
                "head must be softmax or triplet, got {other:?}"
            ))),
        }
    }
}

/// Numeric precision of model parameters and training arithmetic.
/// 64-bit is for gradient testing; training defaults to 32-bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

/// Shapes and head selection for the attribution network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub token_embed_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub filters_per_kernel: usize,
    pub metadata_dim: usize,
    pub max_tokens: usize,
    pub head: HeadKind,
    pub metric_dim: usize,
    pub num_labs: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Production-scale defaults: 1001-token vocabulary embedded in 200
    /// dimensions, twelve parallel convolution stacks (kernel sizes 1..=12,
    /// 256 filters each -> 3072 hidden features), 39 metadata flags,
    /// sequences capped at 1000 tokens, 20% shared-mask dropout.
    pub fn with_defaults(head: HeadKind, num_labs: usize) -> Self {
        Self {
            vocab_size: 1001,
            token_embed_dim: 200,
            kernel_sizes: (1..=12).collect(),
            filters_per_kernel: 256,
            metadata_dim: crate::data::METADATA_DIM,
            max_tokens: 1000,
            head,
            metric_dim: 200,
            num_labs,
            dropout_rate: 0.2,
        }
    }

    /// Concatenated width of the pooled convolution outputs.
    pub fn hidden_dim(&self) -> usize {
        self.filters_per_kernel * self.kernel_sizes.len()
    }

    /// Hidden features plus metadata flags: the head input width.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dim() + self.metadata_dim
    }

    pub fn head_output_dim(&self) -> usize {
        match self.head {
            HeadKind::Softmax => self.num_labs,
            HeadKind::Triplet => self.metric_dim,
        }
    }

    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("token_embed_dim", self.token_embed_dim),
            ("filters_per_kernel", self.filters_per_kernel),
            ("max_tokens", self.max_tokens),
            ("metric_dim", self.metric_dim),
            ("num_labs", self.num_labs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(Error::Config("kernel_sizes must be non-empty and positive".into()));
        }
        if self.max_kernel() > self.max_tokens {
            return Err(Error::Config(format!(
                "largest kernel {} exceeds max_tokens {}",
                self.max_kernel(),
                self.max_tokens
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Total trainable parameters, closed form.
    pub fn parameter_count(&self) -> usize {
        let embedding = self.vocab_size * self.token_embed_dim;
        let convs: usize = self
            .kernel_sizes
            .iter()
            .map(|k| self.filters_per_kernel * k * self.token_embed_dim + self.filters_per_kernel)
            .sum();
        let head = self.head_output_dim() * self.feature_dim() + self.head_output_dim();
        let labs = match self.head {
            HeadKind::Triplet => self.num_labs * self.metric_dim,
            HeadKind::Softmax => 0,
        };
        embedding + convs + head + labs
    }
}

/// Every tunable of the pipeline. Defaults mirror the production scale;
/// the acceptance benchmark and tests override to desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub head: HeadKind,
    pub margin: f64,
    pub batch_size: usize,
    pub max_lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub kernel_sizes: Vec<usize>,
    pub filters: usize,
    pub metric_dim: usize,
    pub val_fraction: f64,
    pub group_threshold: GroupThreshold,
    pub folds: usize,
    pub vocab_size: usize,
    pub token_embed_dim: usize,
    pub max_tokens: usize,
    pub precision: Precision,
    pub min_lab_count: usize,
    /// Stop training once validation top-1 reaches this level.
    pub early_stop_top1: Option<f64>,
    pub tta: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Triplet,
            margin: 0.2,
            batch_size: 64,
            max_lr: 1e-3,
            epochs: 200,
            weight_decay: 1e-5,
            dropout: 0.2,
            seed: 0,
            kernel_sizes: (1..=12).collect(),
            filters: 256,
            metric_dim: 200,
            val_fraction: 0.15,
            group_threshold: GroupThreshold::FractionOfShorter(0.10),
            folds: 0,
            vocab_size: 1001,
            token_embed_dim: 200,
            max_tokens: 1000,
            precision: Precision::F32,
            min_lab_count: 10,
            early_stop_top1: None,
            tta: 8,
        }
    }
}

impl RunConfig {
    pub fn encoder_config(&self, num_labs: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            token_embed_dim: self.token_embed_dim,
            kernel_sizes: self.kernel_sizes.clone(),
            filters_per_kernel: self.filters,
            metadata_dim: crate::data::METADATA_DIM,
            max_tokens: self.max_tokens,
            head: self.head,
            metric_dim: self.metric_dim,
            num_labs,
            dropout_rate: self.dropout,
        }
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value for {what}: {value:?}"));
        match key {
            "head" => self.head = value.parse()?,
            "margin" => self.margin = value.parse().map_err(|_| bad("margin"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "max_lr" => self.max_lr = value.parse().map_err(|_| bad("max_lr"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "weight_decay" => {
                self.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?
            }
            "dropout" => self.dropout = value.parse().map_err(|_| bad("dropout"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "kernel_sizes" => {
                self.kernel_sizes = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("kernel_sizes"))?;
            }
            "filters" => self.filters = value.parse().map_err(|_| bad("filters"))?,
            "metric_dim" => self.metric_dim = value.parse().map_err(|_| bad("metric_dim"))?,
            "val_fraction" => {
                self.val_fraction = value.parse().map_err(|_| bad("val_fraction"))?
            }
            "group_threshold" => {
                // A value with a decimal point is a fraction of the shorter
                // sequence; an integer is an absolute edit distance.
                self.group_threshold = if value.contains('.') {
                    GroupThreshold::FractionOfShorter(
                        value.parse().map_err(|_| bad("group_threshold"))?,
                    )
                } else {
                    GroupThreshold::Absolute(value.parse().map_err(|_| bad("group_threshold"))?)
                };
            }
            "folds" => self.folds = value.parse().map_err(|_| bad("folds"))?,
            "vocab_size" => self.vocab_size = value.parse().map_err(|_| bad("vocab_size"))?,
            "token_embed_dim" => {
                self.token_embed_dim = value.parse().map_err(|_| bad("token_embed_dim"))?
            }
            "max_tokens" => self.max_tokens = value.parse().map_err(|_| bad("max_tokens"))?,
            "precision" => self.precision = value.parse()?,
            "min_lab_count" => {
                self.min_lab_count = value.parse().map_err(|_| bad("min_lab_count"))?
            }
            "early_stop_top1" => {
                self.early_stop_top1 = Some(value.parse().map_err(|_| bad("early_stop_top1"))?)
            }
            "tta" => self.tta = value.parse().map_err(|_| bad("tta"))?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a key-value config file (`key = value`, `#` comments).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Canonical key-value rendering (stable order), used for provenance
    /// headers in reports.
    pub fn to_kv_string(&self) -> String {
        let kernel_sizes = self
            .kernel_sizes
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let group_threshold = match self.group_threshold {
            GroupThreshold::Absolute(t) => t.to_string(),
            GroupThreshold::FractionOfShorter(f) => format!("{f:?}"),
        };
        let early_stop = self
            .early_stop_top1
            .map(|v| format!("early_stop_top1={v:?}\n"))
            .unwrap_or_default();
        format!(
            "head={}\nmargin={:?}\nbatch_size={}\nmax_lr={:?}\nepochs={}\nweight_decay={:?}\n\
             dropout={:?}\nseed={}\nkernel_sizes={}\nfilters={}\nmetric_dim={}\n\
             val_fraction={:?}\ngroup_threshold={}\nfolds={}\nvocab_size={}\n\
             token_embed_dim={}\nmax_tokens={}\nprecision={}\nmin_lab_count={}\n{}tta={}\n",
            self.head,
            self.margin,
            self.batch_size,
            self.max_lr,
            self.epochs,
            self.weight_decay,
            self.dropout,
            self.seed,
            kernel_sizes,
            self.filters,
            self.metric_dim,
            self.val_fraction,
            group_threshold,
            self.folds,
            self.vocab_size,
            self.token_embed_dim,
            self.max_tokens,
            self.precision,
            self.min_lab_count,
            early_stop,
            self.tta,
        )
    }
}
