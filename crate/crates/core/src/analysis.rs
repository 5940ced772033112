//! Closed-form calculators: memory footprint, effective bit-width, the
//! bandwidth throughput bound, speedup, quality recovery, saturation and
//! batch density.

use serde::Serialize;

use crate::config::{ArchMode, ModelConfig};
use crate::error::{HgfError, Result};
use crate::layers::{layer_linears, LinearKind, ParamStore};
use crate::quant::PackingMode;
use crate::training::MetricsRecord;

/// Bytes per megabyte in reported figures (decimal).
pub const MB: f64 = 1e6;

const FP16_BYTES: u64 = 2;
const FP32_BYTES: u64 = 4;
const SCALE_BYTES: u64 = FP32_BYTES;

fn contract(msg: impl Into<String>) -> HgfError {
    HgfError::Contract(msg.into())
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(contract(format!("{name} must be positive and finite, got {x}")))
    }
}

/// Tokens per second when every token streams all `params` weights of
/// `bits_per_param` bits through `bandwidth_gbps` GB/s.
pub fn throughput_bound(bandwidth_gbps: f64, params: f64, bits_per_param: f64) -> Result<f64> {
    positive("bandwidth", bandwidth_gbps)?;
    positive("params", params)?;
    positive("bits_per_param", bits_per_param)?;
    Ok(bandwidth_gbps * 1e9 / (params * bits_per_param / 8.0))
}

/// Bits per weight of a ternary backbone plus a rank-`r` correction of
/// `b_corr` bits scaled by the gate magnitude `g`.
pub fn effective_bitwidth(g: f64, r: usize, d: usize, b_corr: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&g) {
        return Err(contract(format!("gate magnitude must lie in [0, 1), got {g}")));
    }
    if r >= d || d == 0 {
        return Err(contract(format!("rank {r} must be below width {d}")));
    }
    Ok(3f64.log2() + g * b_corr * r as f64 / d as f64)
}

/// Percentage of the ternary-to-dense loss gap closed by the corrected model.
pub fn quality_recovery(loss_bitnet: f64, loss_hgf: f64, loss_baseline: f64) -> Result<f64> {
    let gap = loss_bitnet - loss_baseline;
    if !(gap > 0.0) {
        return Err(contract(format!(
            "quality recovery needs loss_bitnet > loss_baseline, got {loss_bitnet} and {loss_baseline}"
        )));
    }
    Ok((loss_bitnet - loss_hgf) / gap * 100.0)
}

/// `ρ / (1 + f·ρ)` for multiply/add cost ratio `ρ` and LoRA parameter
/// fraction `f`.
pub fn speedup_estimate(rho: f64, lora_fraction: f64) -> Result<f64> {
    positive("cost ratio", rho)?;
    if !(lora_fraction.is_finite() && lora_fraction >= 0.0) {
        return Err(contract(format!(
            "lora fraction must be non-negative, got {lora_fraction}"
        )));
    }
    Ok(rho / (1.0 + lora_fraction * rho))
}

/// Users that fit in the memory left over after the model.
pub fn batch_density(gpu_mem: f64, model_mem: f64, context_mem: f64) -> Result<u64> {
    if model_mem >= gpu_mem {
        return Err(HgfError::Capacity(format!(
            "model needs {model_mem} of {gpu_mem} available"
        )));
    }
    positive("context memory", context_mem)?;
    Ok(((gpu_mem - model_mem) / context_mem).floor() as u64)
}

/// Ordered `(step, loss)` samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossCurve {
    samples: Vec<(u64, f64)>,
}

impl LossCurve {
    pub fn new(samples: Vec<(u64, f64)>) -> Result<Self> {
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(contract("loss curve steps must be strictly increasing"));
        }
        Ok(Self { samples })
    }

    /// Validation losses of the records that carry one, or train losses
    /// when `validation` is false.
    pub fn from_records(records: &[MetricsRecord], validation: bool) -> Result<Self> {
        let samples = records
            .iter()
            .filter_map(|r| {
                let loss = if validation { r.val_loss? } else { r.train_loss };
                Some((r.step as u64, loss))
            })
            .collect();
        Self::new(samples)
    }

    pub fn samples(&self) -> &[(u64, f64)] {
        &self.samples
    }
}

/// First step `t` with `|L(t) − L(t−Δt)|/Δt < ε`.
pub fn saturation_time(curve: &LossCurve, eps: f64, dt: u64) -> Result<Option<u64>> {
    if curve.samples.len() < 2 {
        return Err(contract("saturation needs at least two samples"));
    }
    if dt == 0 {
        return Err(contract("sample spacing must be positive"));
    }
    for w in curve.samples.windows(2) {
        if w[1].0 - w[0].0 != dt {
            return Err(contract(format!(
                "samples at {} and {} are not {dt} apart",
                w[0].0, w[1].0
            )));
        }
    }
    Ok(curve
        .samples
        .windows(2)
        .find(|w| ((w[1].1 - w[0].1) / dt as f64).abs() < eps)
        .map(|w| w[1].0))
}

/// `step,train_loss,reg_weight,gate_mean,val_loss` rows; missing validation
/// losses are left empty.
pub fn loss_curve_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step,train_loss,reg_weight,gate_mean,val_loss\n");
    for r in records {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.train_loss, r.reg_weight, r.gate_mean, val
        ));
    }
    out
}

/// One value per memory component; used for both parameter and byte counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Components {
    pub token_embeddings: u64,
    pub positional_embeddings: u64,
    pub head: u64,
    /// Layernorm gains and biases, including the ones inside bit linears,
    /// and the differential-attention λ.
    pub norms: u64,
    /// Backbone weights of q, k, v, o.
    pub attention: u64,
    /// Backbone weights of w1, w2, w3.
    pub mlp: u64,
    pub lora: u64,
    pub gates: u64,
}

impl Components {
    pub fn embeddings(&self) -> u64 {
        self.token_embeddings + self.positional_embeddings
    }

    pub fn total(&self) -> u64 {
        self.embeddings() + self.head + self.norms + self.attention + self.mlp + self.lora + self.gates
    }
}

/// Parameter counts by component from the architecture formulas.
pub fn param_counts(cfg: &ModelConfig) -> Components {
    let d = cfg.d_model as u64;
    let r = cfg.lora_rank as u64;
    let mut c = Components {
        token_embeddings: cfg.vocab_size as u64 * d,
        positional_embeddings: cfg.ctx_len as u64 * d,
        head: cfg.vocab_size as u64 * d,
        norms: 2 * d,
        ..Default::default()
    };
    for i in 0..cfg.n_layers {
        c.norms += 4 * d;
        if cfg.mode.is_differential() {
            c.norms += 1;
        }
        for spec in layer_linears(cfg, i) {
            let (din, dout) = (spec.d_in as u64, spec.d_out as u64);
            if spec.prefix.contains(".attn.") {
                c.attention += din * dout;
            } else {
                c.mlp += din * dout;
            }
            if spec.kind != LinearKind::Dense {
                c.norms += 2 * din;
            }
            if spec.kind == LinearKind::DualPath {
                c.lora += r * (din + dout);
                if spec.prefix.contains(".mlp.") {
                    c.gates += dout;
                }
            }
        }
        if cfg.mode.has_correction() {
            let per_proj = cfg.n_heads as u64;
            c.gates += if cfg.mode.has_v_correction() {
                3 * per_proj
            } else {
                2 * per_proj
            };
        }
    }
    c
}

/// Classifies every tensor of an initialized store by name.
pub fn enumerate_params(store: &ParamStore) -> Components {
    let mut c = Components::default();
    for p in store.iter() {
        let n = p.value.numel() as u64;
        let name = p.name.as_str();
        let slot = if name == "tok_emb" {
            &mut c.token_embeddings
        } else if name == "pos_emb" {
            &mut c.positional_embeddings
        } else if name == "head.weight" {
            &mut c.head
        } else if name.contains("lora_") {
            &mut c.lora
        } else if name.contains("gate") && !name.ends_with(".gain") {
            &mut c.gates
        } else if name.contains(".gain") || name.contains(".bias") || name.ends_with(".lambda") {
            &mut c.norms
        } else if name.contains(".attn.") {
            &mut c.attention
        } else {
            &mut c.mlp
        };
        *slot += n;
    }
    c
}

/// Footprint of one architecture mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeFootprint {
    pub mode: ArchMode,
    pub params: Components,
    pub bytes: Components,
    pub total_bytes: u64,
    /// Gate bytes if the gates were stored as FP32 instead of FP16.
    pub gate_bytes_fp32: u64,
    /// LoRA parameters over backbone (attention + MLP) parameters.
    pub lora_fraction: f64,
}

impl ModeFootprint {
    pub fn weight_bytes(&self) -> u64 {
        self.bytes.attention + self.bytes.mlp
    }
}

/// A derived row next to its published value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceDelta {
    pub row: &'static str,
    pub mode: ArchMode,
    pub published_mb: f64,
    pub derived_mb: f64,
    pub relative_delta: f64,
}

/// Per-component bytes for every mode of `config`'s shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub config: ModelConfig,
    pub packing: PackingMode,
    pub modes: Vec<ModeFootprint>,
    pub reference_deltas: Vec<ReferenceDelta>,
    pub notes: Vec<String>,
}

impl MemoryReport {
    pub fn mode(&self, mode: ArchMode) -> &ModeFootprint {
        self.modes
            .iter()
            .find(|m| m.mode == mode)
            .expect("every mode is reported")
    }

    pub fn selected(&self) -> &ModeFootprint {
        self.mode(self.config.mode)
    }

    /// Attention + MLP weight bytes of `num` over those of `den`.
    pub fn weight_ratio(&self, num: ArchMode, den: ArchMode) -> f64 {
        self.mode(num).weight_bytes() as f64 / self.mode(den).weight_bytes() as f64
    }
}

fn weight_bytes(cfg: &ModelConfig, packing: PackingMode, attention: bool) -> u64 {
    (0..cfg.n_layers)
        .flat_map(|i| layer_linears(cfg, i))
        .filter(|s| s.prefix.contains(".attn.") == attention)
        .map(|s| {
            let n = (s.d_in * s.d_out) as u64;
            match s.kind {
                LinearKind::Dense => n * FP16_BYTES,
                LinearKind::Bit | LinearKind::DualPath => packing.packed_len(n as usize) as u64 + SCALE_BYTES,
            }
        })
        .sum()
}

fn footprint(cfg: &ModelConfig, packing: PackingMode) -> ModeFootprint {
    let params = param_counts(cfg);
    let fp16 = |n: u64| n * FP16_BYTES;
    let bytes = Components {
        token_embeddings: fp16(params.token_embeddings),
        positional_embeddings: fp16(params.positional_embeddings),
        head: fp16(params.head),
        norms: fp16(params.norms),
        attention: weight_bytes(cfg, packing, true),
        mlp: weight_bytes(cfg, packing, false),
        lora: fp16(params.lora),
        gates: fp16(params.gates),
    };
    ModeFootprint {
        mode: cfg.mode,
        params,
        bytes,
        total_bytes: bytes.total(),
        gate_bytes_fp32: params.gates * FP32_BYTES,
        lora_fraction: params.lora as f64 / (params.attention + params.mlp) as f64,
    }
}

/// Published breakdown for the 512-wide, 8-layer model, used only to report
/// how far the derived rows are from it.
const PUBLISHED_MB: [(&str, ArchMode, f64); 10] = [
    ("embeddings", ArchMode::BaselineFp, 51.4),
    ("attention", ArchMode::BaselineFp, 50.3),
    ("attention", ArchMode::Bitnet, 3.1),
    ("attention", ArchMode::HgfFull, 4.8),
    ("mlp", ArchMode::BaselineFp, 100.7),
    ("mlp", ArchMode::Bitnet, 6.3),
    ("mlp", ArchMode::HgfFull, 9.6),
    ("lora", ArchMode::HgfFull, 3.1),
    ("total", ArchMode::BaselineFp, 202.4),
    ("total", ArchMode::Bitnet, 60.8),
];

fn derived_row(f: &ModeFootprint, row: &str) -> u64 {
    match row {
        "embeddings" => f.bytes.token_embeddings,
        "attention" => f.bytes.attention,
        "mlp" => f.bytes.mlp,
        "lora" => f.bytes.lora,
        _ => f.total_bytes,
    }
}

/// Recomputes the footprint of all five modes at `config`'s shape.
pub fn memory_report(config: &ModelConfig, packing: PackingMode) -> Result<MemoryReport> {
    config.validate()?;
    let modes: Vec<ModeFootprint> = ArchMode::ALL
        .iter()
        .map(|&mode| {
            let cfg = ModelConfig { mode, ..config.clone() };
            cfg.validate().map(|_| footprint(&cfg, packing))
        })
        .collect::<Result<_>>()?;
    let mut report = MemoryReport {
        config: config.clone(),
        packing,
        modes,
        reference_deltas: Vec::new(),
        notes: vec![
            "MB are decimal (1e6 bytes)".into(),
            "embeddings row of the published table is compared against token embeddings only; positional embeddings are reported separately".into(),
            "dense tensors, LoRA and gates at 2 bytes per parameter; ternary matrices at the packing density plus one FP32 scale".into(),
        ],
    };
    if config.d_model == 512 && config.n_layers == 8 && config.vocab_size == 50257 {
        for (row, mode, published_mb) in PUBLISHED_MB {
            let derived_mb = derived_row(report.mode(mode), row) as f64 / MB;
            report.reference_deltas.push(ReferenceDelta {
                row,
                mode,
                published_mb,
                derived_mb,
                relative_delta: (derived_mb - published_mb) / published_mb,
            });
        }
        report.notes.push(
            "published attention and mlp rows imply about 1 bit per ternary weight and are not reproduced".into(),
        );
    }
    Ok(report)
}

/// Every calculator evaluated for `config`, for the `report` command.
pub fn calculator_report(config: &ModelConfig, packing: PackingMode) -> Result<serde_json::Value> {
    let memory = memory_report(config, packing)?;
    let hgf = memory.mode(ArchMode::HgfFull);
    let hgf_gb = hgf.total_bytes as f64 / 1e9;
    let (d, r) = (config.d_model, config.lora_rank);
    Ok(serde_json::json!({
        "throughput_tok_s": {
            "fp16_7b_500gbps": throughput_bound(500.0, 7e9, 16.0)?,
            "ternary_7b_500gbps": throughput_bound(500.0, 7e9, 3f64.log2())?,
        },
        "effective_bitwidth": {
            "g0.1": effective_bitwidth(0.1, r, d, 16.0)?,
            "g0": effective_bitwidth(0.0, r, d, 16.0)?,
            "rank": r,
            "d_model": d,
        },
        "quality_recovery_percent": quality_recovery(1.0294, 0.9306, 0.8490)?,
        "speedup": {
            "rho4_f0.12": speedup_estimate(4.0, 0.12)?,
            "lora_fraction": hgf.lora_fraction,
            "rho4_derived_fraction": speedup_estimate(4.0, hgf.lora_fraction)?,
        },
        "batch_density_24gb_0.5gb": batch_density(24.0, hgf_gb, 0.5)?,
        "memory": memory,
    }))
}
