//! HGF building blocks and the full model across all five architecture modes.
//!
//! Parameters live in a flat, named [`ParamStore`]. A forward pass binds the
//! store to a [`Graph`] through [`Bound`], which creates one leaf per
//! parameter on first use, so the same code serves training (gradients) and
//! evaluation (an inference graph).
//!
//! Projection widths follow the reference module layout: in differential
//! modes `q`,`k` map `d→d` onto `2·n_heads` heads of width `d/(2·n_heads)`,
//! `v` maps `d→d/2` onto `n_heads` heads of the same width, and `o` maps
//! `d/2→d`.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{dim_err, HgfError, Result};
use crate::quant::{quantize_weights, PackingMode, TernaryWeight};
use crate::tensor::DenseTensor;

pub const GATE_INIT: f32 = 0.1;
pub const LORA_UP_STD: f32 = 1e-3;

/// Optimizer partition of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Main,
    Gate,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Main => "main",
            ParamGroup::Gate => "gate",
        }
    }

    /// Group implied by a parameter name: anything carrying `gate` is a gate.
    pub fn for_name(name: &str) -> Self {
        if name.contains("gate") {
            ParamGroup::Gate
        } else {
            ParamGroup::Main
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DenseTensor,
    pub group: ParamGroup,
}

/// Named parameters in a stable insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseTensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(HgfError::Contract(format!("duplicate parameter `{name}`")));
        }
        let group = ParamGroup::for_name(&name);
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, group });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseTensor> {
        self.position(name).map(|i| &mut self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Per-tensor RNG: the same `(seed, name)` always draws the same values.
pub fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
}

fn normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> DenseTensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    DenseTensor::from_fn(shape, |_| dist.sample(rng))
}

fn linear_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> DenseTensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    DenseTensor::uniform_with(shape, -bound, bound, rng)
}

/// `0.8 − 0.6·exp(−0.3·d_h)` with `d_h = d/n_heads`.
pub fn lambda_init(d_model: usize, n_heads: usize) -> f64 {
    0.8 - 0.6 * (-0.3 * (d_model / n_heads) as f64).exp()
}

/// How a projection is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    Dense,
    Bit,
    /// Bit backbone plus gated correction; `gate` is false for paths built
    /// without one (the V projection in the QK-only ablation).
    DualPath,
}

/// One projection slot in the architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearSpec {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
    pub kind: LinearKind,
}

/// Every projection of layer `i` in the order it is used.
pub fn layer_linears(cfg: &ModelConfig, i: usize) -> Vec<LinearSpec> {
    let d = cfg.d_model;
    let h = cfg.hidden_dim();
    let mode = cfg.mode;
    let backbone = if mode.is_quantized() {
        LinearKind::Bit
    } else {
        LinearKind::Dense
    };
    let corrected = if mode.has_correction() {
        LinearKind::DualPath
    } else {
        backbone
    };
    let v_kind = if mode.has_v_correction() {
        LinearKind::DualPath
    } else {
        backbone
    };
    let (v_out, o_in) = if mode.is_differential() { (d / 2, d / 2) } else { (d, d) };
    let spec = |name: &str, d_in, d_out, kind| LinearSpec {
        prefix: format!("layers.{i}.{name}"),
        d_in,
        d_out,
        kind,
    };
    vec![
        spec("attn.q", d, d, corrected),
        spec("attn.k", d, d, corrected),
        spec("attn.v", d, v_out, v_kind),
        spec("attn.o", o_in, d, backbone),
        spec("mlp.w1", d, h, corrected),
        spec("mlp.w2", d, h, corrected),
        spec("mlp.w3", h, d, corrected),
    ]
}

/// Attention gates of layer `i` and the mlp gates, in gate-statistic order.
fn attention_gate_names(cfg: &ModelConfig, i: usize) -> Vec<String> {
    let mut names = Vec::new();
    if cfg.mode.has_correction() {
        names.push(format!("layers.{i}.attn.gate_q"));
        names.push(format!("layers.{i}.attn.gate_k"));
        if cfg.mode.has_v_correction() {
            names.push(format!("layers.{i}.attn.gate_v"));
        }
    }
    names
}

/// Builds the named parameter set for `cfg`, seeding each tensor from
/// `(seed, name)`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let (d, r) = (cfg.d_model, cfg.lora_rank);
    let mut store = ParamStore::new();
    let add = |store: &mut ParamStore, name: String, f: &dyn Fn(&mut ChaCha8Rng) -> DenseTensor| {
        let mut rng = tensor_rng(seed, &name);
        let value = f(&mut rng);
        store.insert(name, value).map(|_| ())
    };
    add(&mut store, "tok_emb".into(), &|rng| {
        normal(&[cfg.vocab_size, d], 1.0, rng)
    })?;
    add(&mut store, "pos_emb".into(), &|rng| normal(&[cfg.ctx_len, d], 1.0, rng))?;
    for i in 0..cfg.n_layers {
        for norm in ["norm1", "norm2"] {
            add(&mut store, format!("layers.{i}.{norm}.gain"), &|_| {
                DenseTensor::full(&[d], 1.0)
            })?;
            add(&mut store, format!("layers.{i}.{norm}.bias"), &|_| {
                DenseTensor::zeros(&[d])
            })?;
        }
        for spec in layer_linears(cfg, i) {
            let (din, dout) = (spec.d_in, spec.d_out);
            let p = &spec.prefix;
            add(&mut store, format!("{p}.weight"), &|rng| {
                linear_init(&[dout, din], din, rng)
            })?;
            if spec.kind != LinearKind::Dense {
                add(&mut store, format!("{p}.ln.gain"), &|_| DenseTensor::full(&[din], 1.0))?;
                add(&mut store, format!("{p}.ln.bias"), &|_| DenseTensor::zeros(&[din]))?;
            }
            if spec.kind == LinearKind::DualPath {
                add(&mut store, format!("{p}.lora_down"), &|rng| {
                    linear_init(&[din, r], din, rng)
                })?;
                add(&mut store, format!("{p}.lora_up"), &|rng| {
                    normal(&[r, dout], LORA_UP_STD, rng)
                })?;
                if spec.prefix.contains(".mlp.") {
                    add(&mut store, format!("{p}.gate"), &|_| {
                        DenseTensor::full(&[dout], GATE_INIT)
                    })?;
                }
            }
        }
        for name in attention_gate_names(cfg, i) {
            add(&mut store, name, &|_| DenseTensor::full(&[cfg.n_heads], GATE_INIT))?;
        }
        if cfg.mode.is_differential() {
            let lam = lambda_init(d, cfg.n_heads) as f32;
            add(&mut store, format!("layers.{i}.attn.lambda"), &|_| {
                DenseTensor::scalar(lam)
            })?;
        }
    }
    add(&mut store, "norm_f.gain".into(), &|_| DenseTensor::full(&[d], 1.0))?;
    add(&mut store, "norm_f.bias".into(), &|_| DenseTensor::zeros(&[d]))?;
    add(&mut store, "head.weight".into(), &|rng| {
        linear_init(&[cfg.vocab_size, d], d, rng)
    })?;
    Ok(store)
}

/// Name under which an exported model stores the frozen `tanh(α)`.
pub fn gate_value_name(gate: &str) -> String {
    format!("{gate}_value")
}

/// The HGF model: configuration, named parameters, and, once exported,
/// packed ternary backbone weights that replace the latent ones.
#[derive(Debug, Clone, PartialEq)]
pub struct HgfModel {
    config: ModelConfig,
    params: ParamStore,
    ternary: BTreeMap<String, TernaryWeight>,
    gates_frozen: bool,
}

impl HgfModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self {
            config,
            params,
            ternary: BTreeMap::new(),
            gates_frozen: false,
        })
    }

    /// Reassembles a model from stored parts, checking every expected tensor
    /// is present with the right shape.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        ternary: BTreeMap<String, TernaryWeight>,
        gates_frozen: bool,
    ) -> Result<Self> {
        let reference = init_params(&config, 0)?;
        for p in reference.iter() {
            if let Some(v) = params.get(&p.name) {
                if v.shape() != p.value.shape() {
                    return Err(dim_err(
                        "model",
                        format!("`{}` has shape {:?}, expected {:?}", p.name, v.shape(), p.value.shape()),
                    ));
                }
            } else if let Some(t) = ternary.get(&p.name) {
                if [t.out_features(), t.in_features()] != p.value.shape() {
                    return Err(dim_err("model", format!("ternary `{}` has the wrong shape", p.name)));
                }
            } else if params.get(&gate_value_name(&p.name)).is_none() {
                return Err(HgfError::Checkpoint(format!("missing tensor `{}`", p.name)));
            }
        }
        for p in params.iter() {
            let base = p.name.strip_suffix("_value").unwrap_or(&p.name);
            if reference.get(base).is_none() {
                return Err(HgfError::Checkpoint(format!("unexpected tensor `{}`", p.name)));
            }
        }
        Ok(Self {
            config,
            params,
            ternary,
            gates_frozen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn ternary(&self) -> &BTreeMap<String, TernaryWeight> {
        &self.ternary
    }

    pub fn is_exported(&self) -> bool {
        !self.ternary.is_empty()
    }

    pub fn gates_frozen(&self) -> bool {
        self.gates_frozen
    }

    pub fn freeze_gates(&mut self) {
        self.gates_frozen = true;
    }

    /// Names of every gate tensor in gate-statistic order.
    pub fn gate_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.config.n_layers {
            names.extend(attention_gate_names(&self.config, i));
            if self.config.mode.has_correction() {
                for w in ["w1", "w2", "w3"] {
                    names.push(format!("layers.{i}.mlp.{w}.gate"));
                }
            }
        }
        names
    }

    pub fn bind<'a>(&'a self, graph: &'a mut Graph) -> Bound<'a> {
        Bound {
            model: self,
            graph,
            leaves: vec![None; self.params.len()],
        }
    }

    /// Mean absolute gate value; 0 for gateless modes.
    pub fn gate_mean(&self) -> f32 {
        let mut g = Graph::inference();
        let mut b = self.bind(&mut g);
        match b.gate_mean() {
            Ok(Some(v)) => b.graph.value(v).data()[0],
            _ => 0.0,
        }
    }

    /// Inference logits for `ids[batch × len]`.
    pub fn logits(&self, ids: &[usize], batch: usize, len: usize) -> Result<DenseTensor> {
        let mut g = Graph::inference();
        let out = self.bind(&mut g).forward(ids, batch, len, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Inference mean cross-entropy.
    pub fn loss(&self, ids: &[usize], targets: &[usize], batch: usize, len: usize) -> Result<f32> {
        let mut g = Graph::inference();
        let out = self.bind(&mut g).forward(ids, batch, len, Some(targets))?;
        let loss = out.loss.expect("targets given");
        Ok(g.value(loss).data()[0])
    }

    /// Replaces every quantized backbone weight by its packed ternary form and
    /// every gate by its frozen `tanh(α)`.
    pub fn export_ternary(&self, packing: PackingMode) -> Result<HgfModel> {
        if !self.config.mode.is_quantized() {
            return Err(HgfError::Contract(format!(
                "mode {} has no ternary layers to export",
                self.config.mode
            )));
        }
        let mut ternary = self.ternary.clone();
        for t in ternary.values_mut() {
            *t = t.repack(packing);
        }
        let mut params = ParamStore::new();
        let quantized: Vec<String> = (0..self.config.n_layers)
            .flat_map(|i| layer_linears(&self.config, i))
            .filter(|s| s.kind != LinearKind::Dense)
            .map(|s| format!("{}.weight", s.prefix))
            .collect();
        for p in self.params.iter() {
            if quantized.contains(&p.name) {
                ternary.insert(p.name.clone(), quantize_weights(&p.value, packing)?);
            } else if p.group == ParamGroup::Gate && !p.name.ends_with("_value") {
                params.insert(gate_value_name(&p.name), crate::tensor::tanh(&p.value))?;
            } else {
                params.insert(p.name.clone(), p.value.clone())?;
            }
        }
        Ok(HgfModel {
            config: self.config.clone(),
            params,
            ternary,
            gates_frozen: true,
        })
    }
}

/// Result of [`Bound::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub logits: Var,
    pub loss: Option<Var>,
}

/// A model bound to a graph for one forward pass.
pub struct Bound<'a> {
    model: &'a HgfModel,
    pub graph: &'a mut Graph,
    leaves: Vec<Option<Var>>,
}

impl<'a> Bound<'a> {
    /// Leaf for each parameter used so far, indexed like the store.
    pub fn leaves(&self) -> &[Option<Var>] {
        &self.leaves
    }

    /// Leaf for parameter `name`, created on first use. Frozen gates become
    /// constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .model
            .params
            .position(name)
            .ok_or_else(|| HgfError::Contract(format!("model has no parameter `{name}`")))?;
        if let Some(v) = self.leaves[idx] {
            return Ok(v);
        }
        let p = &self.model.params.params()[idx];
        let frozen = p.group == ParamGroup::Gate && self.model.gates_frozen;
        let v = if frozen {
            self.graph.constant(p.value.clone())?
        } else {
            self.graph.param(p.value.clone())?
        };
        self.leaves[idx] = Some(v);
        Ok(v)
    }

    /// `tanh(α)` for a gate, or the stored frozen value of an exported model.
    pub fn gate(&mut self, name: &str) -> Result<Var> {
        if self.model.params.position(name).is_some() {
            let a = self.param(name)?;
            self.graph.tanh(a)
        } else {
            self.param(&gate_value_name(name))
        }
    }

    fn backbone(&mut self, x: Var, prefix: &str, kind: LinearKind) -> Result<Var> {
        let wname = format!("{prefix}.weight");
        if kind == LinearKind::Dense {
            let w = self.param(&wname)?;
            return self.graph.matmul_nt(x, w);
        }
        let gain = self.param(&format!("{prefix}.ln.gain"))?;
        let bias = self.param(&format!("{prefix}.ln.bias"))?;
        let xn = self.graph.layernorm(x, gain, bias)?;
        if let Some(tw) = self.model.ternary.get(&wname) {
            return self.graph.ternary_linear(xn, tw);
        }
        let w = self.param(&wname)?;
        bit_linear(self.graph, xn, w)
    }

    fn correction(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let down = self.param(&format!("{prefix}.lora_down"))?;
        let up = self.param(&format!("{prefix}.lora_up"))?;
        lora(self.graph, x, down, up)
    }

    /// An MLP projection: backbone plus per-feature gated correction.
    pub fn linear(&mut self, x: Var, spec: &LinearSpec) -> Result<Var> {
        let y = self.backbone(x, &spec.prefix, spec.kind)?;
        if spec.kind != LinearKind::DualPath {
            return Ok(y);
        }
        let corr = self.correction(x, &spec.prefix)?;
        let g = self.gate(&format!("{}.gate", spec.prefix))?;
        let gated = self.graph.mul_row(corr, g)?;
        self.graph.add(y, gated)
    }

    /// An attention projection with a per-head gate broadcast over
    /// `head_cols` columns per gate entry.
    fn head_gated(&mut self, x: Var, spec: &LinearSpec, gate: &str, head_cols: usize) -> Result<Var> {
        let y = self.backbone(x, &spec.prefix, spec.kind)?;
        if spec.kind != LinearKind::DualPath {
            return Ok(y);
        }
        let corr = self.correction(x, &spec.prefix)?;
        let g = self.gate(gate)?;
        let cols = self.graph.repeat_interleave(g, head_cols)?;
        let gated = self.graph.mul_row(corr, cols)?;
        self.graph.add(y, gated)
    }

    fn check_input(&self, x: Var) -> Result<(usize, usize)> {
        let shape = self.graph.value(x).shape();
        let d = self.model.config.d_model;
        if shape.len() != 3 || shape[2] != d {
            return Err(dim_err("attention", format!("expected [B, L, {d}], got {shape:?}")));
        }
        if shape[1] > self.model.config.ctx_len {
            return Err(HgfError::Context {
                len: shape[1],
                ctx_len: self.model.config.ctx_len,
            });
        }
        Ok((shape[0], shape[1]))
    }

    /// Attention block of layer `i` on normalized input `x[B, L, d]`.
    pub fn attention(&mut self, i: usize, x: Var) -> Result<Var> {
        self.check_input(x)?;
        let model = self.model;
        let cfg = &model.config;
        let (heads, hw) = (cfg.n_heads, cfg.head_width());
        let specs = layer_linears(cfg, i);
        let p = format!("layers.{i}.attn");
        let scale = 1.0 / (hw as f32).sqrt();
        if !cfg.mode.is_differential() {
            let q = self.backbone(x, &specs[0].prefix, specs[0].kind)?;
            let k = self.backbone(x, &specs[1].prefix, specs[1].kind)?;
            let v = self.backbone(x, &specs[2].prefix, specs[2].kind)?;
            let q = self.graph.split_heads(q, heads, 0, heads)?;
            let k = self.graph.split_heads(k, heads, 0, heads)?;
            let v = self.graph.split_heads(v, heads, 0, heads)?;
            let a = attend(self.graph, q, k, v, scale)?;
            let merged = self.graph.merge_heads(a, heads)?;
            return self.backbone(merged, &specs[3].prefix, specs[3].kind);
        }
        let q = self.head_gated(x, &specs[0], &format!("{p}.gate_q"), 2 * hw)?;
        let k = self.head_gated(x, &specs[1], &format!("{p}.gate_k"), 2 * hw)?;
        let v = self.head_gated(x, &specs[2], &format!("{p}.gate_v"), hw)?;
        let q1 = self.graph.split_heads(q, 2 * heads, 0, heads)?;
        let q2 = self.graph.split_heads(q, 2 * heads, heads, heads)?;
        let k1 = self.graph.split_heads(k, 2 * heads, 0, heads)?;
        let k2 = self.graph.split_heads(k, 2 * heads, heads, heads)?;
        let v = self.graph.split_heads(v, heads, 0, heads)?;
        let a1 = attend(self.graph, q1, k1, v, scale)?;
        let a2 = attend(self.graph, q2, k2, v, scale)?;
        let lam = self.param(&format!("{p}.lambda"))?;
        let a2 = self.graph.mul_scalar(a2, lam)?;
        let diff = self.graph.sub(a1, a2)?;
        let half = self.graph.scale(diff, 0.5)?;
        let merged = self.graph.merge_heads(half, heads)?;
        self.backbone(merged, &specs[3].prefix, specs[3].kind)
    }

    /// SwiGLU block of layer `i` on normalized input `x`.
    pub fn mlp(&mut self, i: usize, x: Var) -> Result<Var> {
        let specs = layer_linears(&self.model.config, i);
        let a = self.linear(x, &specs[4])?;
        let b = self.linear(x, &specs[5])?;
        let a = self.graph.silu(a)?;
        let h = self.graph.mul(a, b)?;
        self.linear(h, &specs[6])
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        self.graph.layernorm(x, gain, bias)
    }

    /// Full forward on `ids[batch × len]`; with targets also the mean loss.
    pub fn forward(
        &mut self,
        ids: &[usize],
        batch: usize,
        len: usize,
        targets: Option<&[usize]>,
    ) -> Result<ForwardVars> {
        let cfg = self.model.config.clone();
        if len > cfg.ctx_len {
            return Err(HgfError::Context {
                len,
                ctx_len: cfg.ctx_len,
            });
        }
        if ids.len() != batch * len || len == 0 {
            return Err(dim_err(
                "model_forward",
                format!("{} ids for batch {batch} × len {len}", ids.len()),
            ));
        }
        let tok = self.param("tok_emb")?;
        let pos = self.param("pos_emb")?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let te = self.graph.embedding(tok, ids, &[batch, len])?;
        let pe = self.graph.embedding(pos, &positions, &[batch, len])?;
        let mut x = self.graph.add(te, pe)?;
        for i in 0..cfg.n_layers {
            let h = self.norm(x, &format!("layers.{i}.norm1"))?;
            let a = self.attention(i, h)?;
            x = self.graph.add(x, a)?;
            let h = self.norm(x, &format!("layers.{i}.norm2"))?;
            let m = self.mlp(i, h)?;
            x = self.graph.add(x, m)?;
        }
        let h = self.norm(x, "norm_f")?;
        let w = self.param("head.weight")?;
        let logits = self.graph.matmul_nt(h, w)?;
        let loss = match targets {
            Some(t) => Some(self.graph.cross_entropy(logits, t)?),
            None => None,
        };
        Ok(ForwardVars { logits, loss })
    }

    /// `ḡ`: mean over gate tensors of `mean|tanh(α)|`, attached to the graph.
    /// `None` for gateless modes.
    pub fn gate_mean(&mut self) -> Result<Option<Var>> {
        let names = self.model.gate_names();
        if names.is_empty() {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for name in &names {
            let g = self.gate(name)?;
            let a = self.graph.abs(g)?;
            let m = self.graph.mean(a)?;
            total = Some(match total {
                Some(t) => self.graph.add(t, m)?,
                None => m,
            });
        }
        let total = total.expect("at least one gate");
        Ok(Some(self.graph.scale(total, 1.0 / names.len() as f32)?))
    }
}

/// Fake-quantized BitLinear body on already normalized input:
/// `Q_act(x) · Q_w(W)ᵀ` with straight-through gradients.
pub fn bit_linear(graph: &mut Graph, x_norm: Var, w: Var) -> Result<Var> {
    let xq = graph.fake_quant_act(x_norm)?;
    let wq = graph.fake_quant_weight(w)?;
    graph.matmul_nt(xq, wq)
}

/// Low-rank correction `SiLU(x·A)·B`.
pub fn lora(graph: &mut Graph, x: Var, down: Var, up: Var) -> Result<Var> {
    let h = graph.matmul(x, down)?;
    let h = graph.silu(h)?;
    graph.matmul(h, up)
}

/// Causal scaled dot-product attention on `[G, L, w]` head stacks.
pub fn attend(graph: &mut Graph, q: Var, k: Var, v: Var, scale: f32) -> Result<Var> {
    let s = graph.bmm_nt(q, k)?;
    let s = graph.scale(s, scale)?;
    let p = graph.causal_softmax(s)?;
    graph.bmm(p, v)
}

/// Which paths of a [`DualPathLinear`] contribute to the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paths {
    pub backbone: bool,
    pub correction: bool,
}

impl Paths {
    pub const BOTH: Paths = Paths {
        backbone: true,
        correction: true,
    };
    pub const BACKBONE: Paths = Paths {
        backbone: true,
        correction: false,
    };
    pub const CORRECTION: Paths = Paths {
        backbone: false,
        correction: true,
    };
}

/// A standalone gated dual-path layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPathLinear {
    /// Latent backbone weight `[d_out, d_in]`.
    pub weight: DenseTensor,
    pub ln_gain: DenseTensor,
    pub ln_bias: DenseTensor,
    /// `[d_in, r]`
    pub lora_down: DenseTensor,
    /// `[r, d_out]`
    pub lora_up: DenseTensor,
    /// Either `[d_out]` (per feature) or `[1]` (scalar).
    pub gate: DenseTensor,
    pub gate_frozen: bool,
}

/// Graph handles produced by [`DualPathLinear::forward`].
#[derive(Debug, Clone, Copy)]
pub struct DualPathVars {
    pub y: Var,
    /// Backbone output.
    pub y_tern: Var,
    /// Ungated correction output.
    pub y_corr: Var,
    pub weight: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub lora_down: Var,
    pub lora_up: Var,
    pub gate: Var,
}

impl DualPathLinear {
    /// Live initialization: `B ~ N(0, 1e-3²)`, `α = 0.1`.
    pub fn live_init(d_in: usize, d_out: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(crate::error::config_err(
                "lora_rank",
                format!("must satisfy 1 <= r < {}", d_in.min(d_out)),
            ));
        }
        Ok(Self {
            weight: linear_init(&[d_out, d_in], d_in, &mut tensor_rng(seed, "weight")),
            ln_gain: DenseTensor::full(&[d_in], 1.0),
            ln_bias: DenseTensor::zeros(&[d_in]),
            lora_down: linear_init(&[d_in, rank], d_in, &mut tensor_rng(seed, "lora_down")),
            lora_up: normal(&[rank, d_out], LORA_UP_STD, &mut tensor_rng(seed, "lora_up")),
            gate: DenseTensor::full(&[d_out], GATE_INIT),
            gate_frozen: false,
        })
    }

    /// Replaces the gate by a single scalar `α`.
    pub fn with_scalar_gate(mut self, alpha: f32) -> Self {
        self.gate = DenseTensor::scalar(alpha);
        self
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, graph: &mut Graph, x: Var) -> Result<DualPathVars> {
        self.forward_paths(graph, x, Paths::BOTH)
    }

    /// Forward with selected paths; a disabled path contributes nothing.
    pub fn forward_paths(&self, graph: &mut Graph, x: Var, paths: Paths) -> Result<DualPathVars> {
        if graph.value(x).last_dim() != self.d_in() {
            return Err(dim_err(
                "dual_path_forward",
                format!("input width {} != d_in {}", graph.value(x).last_dim(), self.d_in()),
            ));
        }
        let weight = graph.param(self.weight.clone())?;
        let ln_gain = graph.param(self.ln_gain.clone())?;
        let ln_bias = graph.param(self.ln_bias.clone())?;
        let lora_down = graph.param(self.lora_down.clone())?;
        let lora_up = graph.param(self.lora_up.clone())?;
        let gate = if self.gate_frozen {
            graph.constant(self.gate.clone())?
        } else {
            graph.param(self.gate.clone())?
        };
        let xn = graph.layernorm(x, ln_gain, ln_bias)?;
        let y_tern = bit_linear(graph, xn, weight)?;
        let y_corr = lora(graph, x, lora_down, lora_up)?;
        let t = graph.tanh(gate)?;
        let gated = if self.gate.numel() == 1 {
            graph.mul_scalar(y_corr, t)?
        } else {
            graph.mul_row(y_corr, t)?
        };
        let y = match (paths.backbone, paths.correction) {
            (true, true) => graph.add(y_tern, gated)?,
            (true, false) => y_tern,
            (false, true) => gated,
            (false, false) => graph.scale(y_tern, 0.0)?,
        };
        Ok(DualPathVars {
            y,
            y_tern,
            y_corr,
            weight,
            ln_gain,
            ln_bias,
            lora_down,
            lora_up,
            gate,
        })
    }

    pub fn forward_value(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone())?;
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out.y).clone())
    }
}
