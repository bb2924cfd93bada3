//! Model, adapter and training configuration.
//!
//! Defaults carry the reference hyperparameters (r=16, α=32, 8 experts,
//! top-2, lr 2e-4, warmup ratio 0.03); desk-scale runs override them from a
//! TOML file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::GenConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub n_experts: usize,
    pub top_k: usize,
    pub a_init_std: f64,
    pub router_init_std: f64,
    /// Renormalise the selected router probabilities to sum to one.
    pub renormalize: bool,
    /// Weight of the optional load-balancing loss; 0 disables it.
    pub balance_loss_coef: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            n_experts: 8,
            top_k: 2,
            a_init_std: 0.02,
            router_init_std: 0.02,
            renormalize: true,
            balance_loss_coef: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    /// Hidden width of the gated FFN; `round(8·d/3)` when absent.
    pub ffn_dim: Option<usize>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Seed of the frozen base weights.
    pub base_seed: u64,
    /// Train the RMSNorm weights alongside the adapters.
    pub train_norms: bool,
    pub adapter: AdapterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::taskgen::VOCAB_SIZE,
            model_dim: 64,
            ffn_dim: None,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 32,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            base_seed: 0,
            train_norms: false,
            adapter: AdapterConfig::default(),
        }
    }
}

/// `round(8·d/3)`
pub fn default_ffn_dim(model_dim: usize) -> usize {
    (8 * model_dim + 1) / 3
}

impl ModelConfig {
    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or_else(|| default_ffn_dim(self.model_dim))
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.model_dim", self.model_dim),
            ("model.n_layers", self.n_layers),
            ("model.n_heads", self.n_heads),
            ("model.max_seq_len", self.max_seq_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                format!("model_dim {} not divisible by n_heads {}", self.model_dim, self.n_heads),
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config(
                "model.n_heads",
                "head dimension must be even for rotary embeddings",
            ));
        }
        if self.ffn_dim() < self.model_dim {
            return Err(Error::config("model.ffn_dim", "must be at least model_dim"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("model.norm_eps", "must be positive"));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::config("model.rope_base", "must be positive"));
        }
        let a = &self.adapter;
        if a.rank == 0 || a.rank >= self.model_dim {
            return Err(Error::config(
                "model.adapter.rank",
                format!("rank {} must satisfy 1 <= r < model_dim {}", a.rank, self.model_dim),
            ));
        }
        if !(a.alpha > 0.0) {
            return Err(Error::config("model.adapter.alpha", "must be positive"));
        }
        if a.n_experts == 0 {
            return Err(Error::config("model.adapter.n_experts", "must be positive"));
        }
        if a.top_k == 0 || a.top_k > a.n_experts {
            return Err(Error::config(
                "model.adapter.top_k",
                format!("top_k {} must lie in [1, n_experts = {}]", a.top_k, a.n_experts),
            ));
        }
        if !(a.a_init_std > 0.0) || !(a.router_init_std >= 0.0) {
            return Err(Error::config("model.adapter.a_init_std", "init stds must be positive"));
        }
        if a.balance_loss_coef < 0.0 {
            return Err(Error::config("model.adapter.balance_loss_coef", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup_ratio: 0.03,
            batch_size: 8,
            epochs: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("train.warmup_ratio", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Synthetic corpus settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples_per_task: usize,
    pub alphabet_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Seed of corpus generation and the train/held-out split.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            samples_per_task: 500,
            alphabet_size: g.alphabet_size,
            min_len: g.min_len,
            max_len: g.max_len,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn gen(&self) -> GenConfig {
        GenConfig {
            alphabet_size: self.alphabet_size,
            min_len: self.min_len,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_task == 0 {
            return Err(Error::config("data.samples_per_task", "must be positive"));
        }
        self.gen().validate()
    }
}

/// Everything one CLI run needs, as read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(toml_key_path(text, &e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.max_len * 2 + 3 > self.model.max_seq_len {
            return Err(Error::config(
                "model.max_seq_len",
                format!("too short for strings of length {}", self.data.max_len),
            ));
        }
        Ok(())
    }
}

/// Dotted path of the key a TOML error points at.
fn toml_key_path(text: &str, err: &toml::de::Error) -> String {
    let start = err.span().map_or(0, |r| r.start).min(text.len());
    let before = &text[..start];
    let table = before
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let msg = err.message();
    let key = if msg.starts_with("unknown field") {
        msg.split('`').nth(1).map(str::to_string)
    } else {
        line.split_once('=').map(|(k, _)| k.trim().to_string())
    };
    match (table, key) {
        (Some(t), Some(k)) if !k.is_empty() && !k.starts_with('[') => format!("{t}.{k}"),
        (Some(t), _) => t,
        (None, Some(k)) if !k.is_empty() => k,
        _ => "<root>".into(),
    }
}
