//! Model and training configuration, plus the flat key-value config file.
//!
//! Config files are TOML with one top-level key per field; keys are exactly
//! the field names of [`ModelConfig`] and [`TrainConfig`].

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, HgfError, Result};

/// The five architecture variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchMode {
    /// Dense FP weights, standard causal multi-head attention.
    #[serde(rename = "baseline")]
    BaselineFp,
    /// Ternary weights with differential attention, no correction path.
    #[serde(rename = "bitnet")]
    Bitnet,
    /// Dense FP weights with differential attention.
    #[serde(rename = "diff-only")]
    DiffOnly,
    /// Ternary backbone plus gated low-rank correction on Q, K, V and MLP.
    #[serde(rename = "hgf")]
    HgfFull,
    /// As [`ArchMode::HgfFull`] without the V correction and V gate.
    #[serde(rename = "hgf-qk")]
    HgfQkOnly,
}

impl ArchMode {
    pub const ALL: [ArchMode; 5] = [
        ArchMode::BaselineFp,
        ArchMode::Bitnet,
        ArchMode::DiffOnly,
        ArchMode::HgfFull,
        ArchMode::HgfQkOnly,
    ];

    pub fn is_quantized(self) -> bool {
        matches!(self, ArchMode::Bitnet | ArchMode::HgfFull | ArchMode::HgfQkOnly)
    }

    pub fn is_differential(self) -> bool {
        !matches!(self, ArchMode::BaselineFp)
    }

    pub fn has_correction(self) -> bool {
        matches!(self, ArchMode::HgfFull | ArchMode::HgfQkOnly)
    }

    pub fn has_v_correction(self) -> bool {
        matches!(self, ArchMode::HgfFull)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchMode::BaselineFp => "baseline",
            ArchMode::Bitnet => "bitnet",
            ArchMode::DiffOnly => "diff-only",
            ArchMode::HgfFull => "hgf",
            ArchMode::HgfQkOnly => "hgf-qk",
        }
    }
}

impl std::str::FromStr for ArchMode {
    type Err = HgfError;

    fn from_str(s: &str) -> Result<Self> {
        ArchMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            config_err(
                "mode",
                format!("unknown mode `{s}` (baseline|bitnet|diff-only|hgf|hgf-qk)"),
            )
        })
    }
}

impl std::fmt::Display for ArchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub ctx_len: usize,
    pub lora_rank: usize,
    pub mode: ArchMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            n_layers: 8,
            n_heads: 8,
            vocab_size: 50257,
            ctx_len: 512,
            lora_rank: 32,
            mode: ArchMode::HgfFull,
        }
    }
}

impl ModelConfig {
    /// The small byte-level model used for CPU runs.
    pub fn desk(mode: ArchMode) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 256,
            ctx_len: 64,
            lora_rank: 8,
            mode,
        }
    }

    /// SwiGLU hidden width `⌊2·4d/3⌋`.
    pub fn hidden_dim(&self) -> usize {
        2 * 4 * self.d_model / 3
    }

    /// Per-head width of the attention projections actually multiplied.
    pub fn head_width(&self) -> usize {
        if self.mode.is_differential() {
            self.d_model / (2 * self.n_heads)
        } else {
            self.d_model / self.n_heads
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("ctx_len", self.ctx_len),
        ] {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        if self.mode.is_differential() {
            if self.d_model % (2 * self.n_heads) != 0 {
                return Err(config_err("d_model", "must be divisible by 2·n_heads"));
            }
        } else if self.d_model % self.n_heads != 0 {
            return Err(config_err("d_model", "must be divisible by n_heads"));
        }
        if self.mode.has_correction() {
            let limit = if self.mode.has_v_correction() {
                self.d_model / 2
            } else {
                self.d_model
            };
            if self.lora_rank == 0 || self.lora_rank >= limit {
                return Err(config_err(
                    "lora_rank",
                    format!("must satisfy 1 <= r < {limit} (smallest corrected layer width)"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub lr_main: f64,
    pub lr_gate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub accumulation_steps: usize,
    pub micro_batch: usize,
    pub reg_start: usize,
    pub gate_freeze: usize,
    pub reg_max: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub checkpoint_every: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2500,
            lr_main: 2.5e-3,
            lr_gate: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            accumulation_steps: 4,
            micro_batch: 16,
            reg_start: 500,
            gate_freeze: 900,
            reg_max: 0.02,
            seed: 42,
            eval_every: 250,
            eval_batches: 16,
            checkpoint_every: 0,
            val_fraction: 0.02,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reg_start >= self.gate_freeze {
            return Err(config_err("reg_start", "must be smaller than gate_freeze"));
        }
        for (field, v) in [
            ("lr_main", self.lr_main),
            ("lr_gate", self.lr_gate),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(field, "must be a positive number"));
            }
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err(field, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay", "must be non-negative"));
        }
        if !(self.reg_max.is_finite() && self.reg_max >= 0.0) {
            return Err(config_err("reg_max", "must be non-negative"));
        }
        if self.accumulation_steps == 0 {
            return Err(config_err("accumulation_steps", "must be positive"));
        }
        if self.micro_batch == 0 {
            return Err(config_err("micro_batch", "must be positive"));
        }
        if self.eval_batches == 0 {
            return Err(config_err("eval_batches", "must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(config_err("val_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// A parsed config file: both halves, validated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn set<T: DeserializeOwned>(slot: &mut T, key: &str, value: &toml::Value) -> Result<()> {
    *slot = value
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| config_err(key, e.message().to_string()))?;
    Ok(())
}

impl RunConfig {
    /// Parses a flat TOML document. Absent keys keep their defaults; unknown
    /// keys and ill-typed values are errors naming the key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| config_err("<file>", e.to_string()))?;
        let mut cfg = RunConfig::default();
        for (key, v) in &table {
            let (m, t) = (&mut cfg.model, &mut cfg.train);
            match key.as_str() {
                "d_model" => set(&mut m.d_model, key, v)?,
                "n_layers" => set(&mut m.n_layers, key, v)?,
                "n_heads" => set(&mut m.n_heads, key, v)?,
                "vocab_size" => set(&mut m.vocab_size, key, v)?,
                "ctx_len" => set(&mut m.ctx_len, key, v)?,
                "lora_rank" => set(&mut m.lora_rank, key, v)?,
                "mode" => set(&mut m.mode, key, v)?,
                "total_steps" => set(&mut t.total_steps, key, v)?,
                "lr_main" => set(&mut t.lr_main, key, v)?,
                "lr_gate" => set(&mut t.lr_gate, key, v)?,
                "beta1" => set(&mut t.beta1, key, v)?,
                "beta2" => set(&mut t.beta2, key, v)?,
                "weight_decay" => set(&mut t.weight_decay, key, v)?,
                "adam_eps" => set(&mut t.adam_eps, key, v)?,
                "accumulation_steps" => set(&mut t.accumulation_steps, key, v)?,
                "micro_batch" => set(&mut t.micro_batch, key, v)?,
                "reg_start" => set(&mut t.reg_start, key, v)?,
                "gate_freeze" => set(&mut t.gate_freeze, key, v)?,
                "reg_max" => set(&mut t.reg_max, key, v)?,
                "seed" => set(&mut t.seed, key, v)?,
                "eval_every" => set(&mut t.eval_every, key, v)?,
                "eval_batches" => set(&mut t.eval_batches, key, v)?,
                "checkpoint_every" => set(&mut t.checkpoint_every, key, v)?,
                "val_fraction" => set(&mut t.val_fraction, key, v)?,
                other => return Err(config_err(other, "unknown field")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Renders the flat file form; [`RunConfig::from_toml_str`] reads it back.
    pub fn to_toml_string(&self) -> String {
        let mut table = toml::Table::new();
        for half in [toml::Table::try_from(&self.model), toml::Table::try_from(&self.train)] {
            table.extend(half.expect("config structs serialize to tables"));
        }
        toml::to_string(&table).expect("table serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_dims() {
        assert_eq!(ModelConfig::default().hidden_dim(), 1365);
        assert_eq!(ModelConfig::desk(ArchMode::HgfFull).hidden_dim(), 170);
    }

    #[test]
    fn parses_flat_file_and_keeps_defaults() {
        let cfg = RunConfig::from_toml_str("d_model = 64\nmode = \"bitnet\"\nlr_main = 1e-3\n").unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.mode, ArchMode::Bitnet);
        assert_eq!(cfg.train.lr_main, 1e-3);
        assert_eq!(cfg.train.seed, 42);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_toml_str("d_model = \"wide\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("d_model"), "{err}");
        let err = RunConfig::from_toml_str("learning_rate = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
        let err = RunConfig::from_toml_str("reg_start = 950\n").unwrap_err().to_string();
        assert!(err.contains("reg_start"), "{err}");
        let err = RunConfig::from_toml_str("mode = \"dense\"\n").unwrap_err().to_string();
        assert!(err.contains("mode"), "{err}");
    }

    #[test]
    fn file_form_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::desk(ArchMode::HgfQkOnly);
        cfg.train.lr_gate = 1.25e-4;
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn rank_bounds() {
        let mut m = ModelConfig::desk(ArchMode::HgfFull);
        m.lora_rank = 32;
        assert!(m.validate().is_err());
        m.mode = ArchMode::HgfQkOnly;
        assert!(m.validate().is_ok());
        m.lora_rank = 0;
        assert!(m.validate().is_err());
        m.mode = ArchMode::Bitnet;
        assert!(m.validate().is_ok());
    }

    #[test]
    fn default_schedule_matches_reference_protocol() {
        let t = TrainConfig::default();
        assert_eq!((t.reg_start, t.gate_freeze, t.reg_max), (500, 900, 0.02));
        assert_eq!((t.lr_main, t.lr_gate), (2.5e-3, 3e-4));
        assert_eq!((t.beta1, t.beta2, t.weight_decay), (0.9, 0.98, 0.01));
        assert_eq!((t.accumulation_steps, t.micro_batch, t.seed), (4, 16, 42));
    }
}
