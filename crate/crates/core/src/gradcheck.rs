//! Finite-difference verification of the analytic gradients on small slices.
//!
//! Errors are normwise per parameter group:
//! `max|analytic − fd| / max(‖fd‖∞, ‖analytic‖∞)`, which keeps near-zero
//! entries from dominating under FP32 forward noise. Finite differences use
//! the step actually representable in FP32, `(w+h) − (w−h)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{ArchMode, ModelConfig};
use crate::error::{HgfError, Result};
use crate::layers::{DualPathLinear, HgfModel, Paths};
use crate::tensor::DenseTensor;

pub const FD_STEP: f32 = 1e-3;

/// Error for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub max_rel_err: f64,
    /// Reported only; expected to disagree (finite differences see the
    /// quantizer's flat steps, the straight-through rule does not).
    pub informational: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    /// Relative error of the gate gradient against `(∂L/∂Y)·Y_corr·sech²(α)`.
    pub gate_closed_form_err: f64,
    /// `|∂L/∂α(5)| / |∂L/∂α(0.1)|` measured on the probe.
    pub saturation_ratio: f64,
    /// `sech²(5)/sech²(0.1)`.
    pub saturation_ratio_expected: f64,
    /// Normwise error of `∂L/∂X` against the sum of the single-path gradients.
    pub decomposition_err: f64,
}

pub const CLOSED_FORM_TOL: f64 = 1e-6;

impl GradcheckReport {
    /// Names of every failed check.
    pub fn failures(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .groups
            .iter()
            .filter(|g| !g.informational && !(g.max_rel_err <= self.tolerance))
            .map(|g| g.group.clone())
            .collect();
        if !(self.gate_closed_form_err <= CLOSED_FORM_TOL) {
            out.push("gate_closed_form".into());
        }
        if !((self.saturation_ratio - self.saturation_ratio_expected).abs() <= CLOSED_FORM_TOL) {
            out.push("gate_saturation".into());
        }
        if !(self.decomposition_err <= CLOSED_FORM_TOL) {
            out.push("decomposition".into());
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        let f = self.failures();
        if f.is_empty() {
            Ok(self)
        } else {
            Err(HgfError::Gradcheck(f))
        }
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Normwise relative error between two gradient vectors.
pub fn normwise_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(analytic).max(inf(fd));
    if scale == 0.0 {
        return 0.0;
    }
    let diff = analytic.iter().zip(fd).fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
    diff / scale
}

/// Central differences of `loss` with respect to every entry of the tensor
/// selected by `slot`.
pub fn central_differences<T: Clone>(
    base: &T,
    slot: impl Fn(&mut T) -> &mut DenseTensor,
    loss: impl Fn(&T) -> Result<f64>,
    h: f32,
) -> Result<Vec<f64>> {
    let mut probe = base.clone();
    let n = slot(&mut probe).numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let w = slot(&mut probe).data()[i];
        let (up, down) = (w + h, w - h);
        slot(&mut probe).data_mut()[i] = up;
        let lp = loss(&probe)?;
        slot(&mut probe).data_mut()[i] = down;
        let lm = loss(&probe)?;
        slot(&mut probe).data_mut()[i] = w;
        out.push((lp - lm) / (up as f64 - down as f64));
    }
    Ok(out)
}

fn weighted_sum(y: &DenseTensor, c: &DenseTensor) -> f64 {
    y.data().iter().zip(c.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn linear_loss(graph: &mut Graph, y: Var, c: &DenseTensor) -> Result<Var> {
    let cv = graph.constant(c.clone())?;
    let p = graph.mul(y, cv)?;
    graph.sum(p)
}

fn to_f64(t: &DenseTensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

struct Probe {
    layer: DualPathLinear,
    x: DenseTensor,
    c: DenseTensor,
}

impl Probe {
    fn new(seed: u64, scalar_alpha: Option<f32>) -> Result<Self> {
        let mut layer = DualPathLinear::live_init(8, 6, 3, seed)?;
        // Larger B than live init so correction-path gradients are well above
        // FP32 forward noise.
        layer.lora_up = DenseTensor::uniform(&[3, 6], -0.5, 0.5, seed ^ 0xb);
        if let Some(a) = scalar_alpha {
            layer = layer.with_scalar_gate(a);
        } else {
            layer.gate = DenseTensor::uniform(&[6], -0.8, 0.8, seed ^ 0xa);
        }
        let x = DenseTensor::uniform(&[2, 3, 8], -2.0, 2.0, seed ^ 0x1);
        let c = DenseTensor::uniform(&[2, 3, 6], -1.0, 1.0, seed ^ 0xc);
        Ok(Self { layer, x, c })
    }

    fn loss(&self, layer: &DualPathLinear) -> Result<f64> {
        Ok(weighted_sum(&layer.forward_value(&self.x)?, &self.c))
    }
}

/// Checks on the dual-path probe: A, B, α by finite differences, latent
/// weights informationally.
fn probe_groups(seed: u64) -> Result<Vec<GroupCheck>> {
    let p = Probe::new(seed, None)?;
    let mut g = Graph::new();
    let x = g.constant(p.x.clone())?;
    let out = p.layer.forward(&mut g, x)?;
    let loss = linear_loss(&mut g, out.y, &p.c)?;
    let grads = g.backward(loss)?;
    let checks: [(&str, Var, fn(&mut DualPathLinear) -> &mut DenseTensor, bool); 4] = [
        ("lora_down", out.lora_down, |l| &mut l.lora_down, false),
        ("lora_up", out.lora_up, |l| &mut l.lora_up, false),
        ("gate", out.gate, |l| &mut l.gate, false),
        ("weight_latent", out.weight, |l| &mut l.weight, true),
    ];
    let mut groups = Vec::new();
    for (name, var, slot, informational) in checks {
        let fd = central_differences(&p.layer, slot, |l| p.loss(l), FD_STEP)?;
        let err = normwise_error(&to_f64(&grads.get(var)), &fd);
        groups.push(GroupCheck {
            group: name.into(),
            max_rel_err: err,
            informational,
        });
    }
    Ok(groups)
}

fn gate_gradient(p: &Probe) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let x = g.constant(p.x.clone())?;
    let out = p.layer.forward(&mut g, x)?;
    let loss = linear_loss(&mut g, out.y, &p.c)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(out.gate).data()[0] as f64;
    let alpha = p.layer.gate.data()[0] as f64;
    let sech2 = 1.0 / alpha.cosh().powi(2);
    let closed = weighted_sum(g.value(out.y_corr), &p.c) * sech2;
    Ok((analytic, closed))
}

fn input_gradient(p: &Probe, paths: Paths) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.param(p.x.clone())?;
    let out = p.layer.forward_paths(&mut g, x, paths)?;
    let loss = linear_loss(&mut g, out.y, &p.c)?;
    Ok(to_f64(&g.backward(loss)?.get(x)))
}

fn slice_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        vocab_size: 16,
        ctx_len: 4,
        lora_rank: 2,
        mode: ArchMode::DiffOnly,
    }
}

/// λ, layernorm and embedding gradients on a dense differential-attention
/// model slice with a linear readout of the logits.
fn slice_groups(seed: u64) -> Result<Vec<GroupCheck>> {
    let cfg = slice_config();
    let model = HgfModel::init(cfg.clone(), seed)?;
    let (b, l) = (2, 4);
    let ids: Vec<usize> = (0..b * l).map(|i| (i * 7 + seed as usize) % cfg.vocab_size).collect();
    let c = DenseTensor::uniform(&[b, l, cfg.vocab_size], -1.0, 1.0, seed ^ 0x5);
    let loss_of = |m: &HgfModel| -> Result<f64> { Ok(weighted_sum(&m.logits(&ids, b, l)?, &c)) };

    let mut g = Graph::new();
    let mut bound = model.bind(&mut g);
    let out = bound.forward(&ids, b, l, None)?;
    let leaves = bound.leaves().to_vec();
    let loss = linear_loss(&mut g, out.logits, &c)?;
    let grads = g.backward(loss)?;

    let groups: [(&str, Vec<&str>); 2] = [
        (
            "layernorm",
            vec![
                "layers.0.norm1.gain",
                "layers.0.norm1.bias",
                "layers.0.norm2.gain",
                "layers.0.norm2.bias",
                "norm_f.gain",
                "norm_f.bias",
            ],
        ),
        ("embeddings", vec!["tok_emb", "pos_emb"]),
    ];
    let mut out = Vec::new();
    for (group, names) in groups {
        let (mut analytic, mut fd) = (Vec::new(), Vec::new());
        for name in names {
            let idx = model.params().position(name).expect("slice parameter exists");
            let var = leaves[idx].expect("parameter used in forward");
            analytic.extend(to_f64(&grads.get(var)));
            fd.extend(central_differences(
                &model,
                |m: &mut HgfModel| m.params_mut().get_mut(name).expect("exists"),
                &loss_of,
                FD_STEP,
            )?);
        }
        out.push(GroupCheck {
            group: group.into(),
            max_rel_err: normwise_error(&analytic, &fd),
            informational: false,
        });
    }
    out.insert(0, lambda_group(&model, seed)?);
    Ok(out)
}

/// λ through the attention block alone: through the whole slice its
/// gradient is too small to rise above FP32 forward noise.
fn lambda_group(model: &HgfModel, seed: u64) -> Result<GroupCheck> {
    const LAMBDA: &str = "layers.0.attn.lambda";
    let d = model.config().d_model;
    let x = DenseTensor::uniform(&[2, 4, d], -2.0, 2.0, seed ^ 0x7);
    let c = DenseTensor::uniform(&[2, 4, d], -1.0, 1.0, seed ^ 0x8);
    let attention = |m: &HgfModel, g: &mut Graph| -> Result<(Var, Option<Var>)> {
        let xv = g.constant(x.clone())?;
        let mut bound = m.bind(g);
        let out = bound.attention(0, xv)?;
        let idx = m.params().position(LAMBDA).expect("differential slice");
        Ok((out, bound.leaves()[idx]))
    };
    let mut g = Graph::new();
    let (out, lam) = attention(model, &mut g)?;
    let loss = linear_loss(&mut g, out, &c)?;
    let analytic = g.backward(loss)?.get(lam.expect("lambda used"));
    let fd = central_differences(
        model,
        |m: &mut HgfModel| m.params_mut().get_mut(LAMBDA).expect("exists"),
        |m| {
            let mut g = Graph::inference();
            let (out, _) = attention(m, &mut g)?;
            Ok(weighted_sum(g.value(out), &c))
        },
        FD_STEP,
    )?;
    Ok(GroupCheck {
        group: "lambda".into(),
        max_rel_err: normwise_error(&to_f64(&analytic), &fd),
        informational: false,
    })
}

/// Runs every check and collects the report; fails only through
/// [`GradcheckReport::into_result`].
pub fn gradcheck(seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let mut groups = probe_groups(seed)?;
    groups.extend(slice_groups(seed)?);

    let (analytic, closed) = gate_gradient(&Probe::new(seed, Some(0.1))?)?;
    let gate_closed_form_err = (analytic - closed).abs() / closed.abs().max(f64::MIN_POSITIVE);

    let (g_lo, _) = gate_gradient(&Probe::new(seed, Some(0.1))?)?;
    let (g_hi, _) = gate_gradient(&Probe::new(seed, Some(5.0))?)?;
    let saturation_ratio = (g_hi / g_lo).abs();
    let saturation_ratio_expected = (0.1f64.cosh() / 5f64.cosh()).powi(2);

    let p = Probe::new(seed, None)?;
    let full = input_gradient(&p, Paths::BOTH)?;
    let tern = input_gradient(&p, Paths::BACKBONE)?;
    let corr = input_gradient(&p, Paths::CORRECTION)?;
    let summed: Vec<f64> = tern.iter().zip(&corr).map(|(a, b)| a + b).collect();
    let decomposition_err = normwise_error(&full, &summed);

    Ok(GradcheckReport {
        tolerance,
        groups,
        gate_closed_form_err,
        saturation_ratio,
        saturation_ratio_expected,
        decomposition_err,
    })
}
