//! The training protocol: dual-learning-rate AdamW, the warmup /
//! regularization / freeze gate schedule, gradient accumulation, and
//! evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::data::{Batch, Batcher, Corpus};
use crate::error::{HgfError, Result};
use crate::layers::{HgfModel, ParamGroup};

/// Regularization weight at step `t`: a linear ramp from 0 to `reg_max` over
/// `[reg_start, gate_freeze)`, zero elsewhere.
pub fn reg_weight(t: usize, cfg: &TrainConfig) -> f64 {
    if t < cfg.reg_start || t >= cfg.gate_freeze {
        return 0.0;
    }
    cfg.reg_max * (t - cfg.reg_start) as f64 / (cfg.gate_freeze - cfg.reg_start) as f64
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean task loss over the accumulated micro-batches.
    pub train_loss: f64,
    pub reg_weight: f64,
    /// `ḡ` as used in this step's forward pass.
    pub gate_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    /// Seconds since training started; not part of the serialized stream.
    #[serde(skip)]
    pub wall_time: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Per-parameter AdamW state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Updates applied to each parameter so far.
    pub steps: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    /// Decoupled weight decay, then the bias-corrected Adam step.
    pub fn update(&mut self, i: usize, param: &mut [f32], grad: &[f32], h: AdamHyper) {
        self.steps[i] += 1;
        let t = self.steps[i] as i32;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2_sqrt = (1.0 - h.beta2.powi(t)).sqrt();
        let step_size = (h.lr / bc1) as f32;
        let decay = (1.0 - h.lr * h.weight_decay) as f32;
        let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for k in 0..param.len() {
            let g = grad[k];
            param[k] *= decay;
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let denom = v[k].sqrt() / bc2_sqrt as f32 + h.eps as f32;
            param[k] -= step_size * m[k] / denom;
        }
    }
}

/// What the backward pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Task loss plus the scheduled gate penalty.
    #[default]
    Full,
    /// Only the gate penalty; task gradients are dropped.
    RegularizerOnly,
}

/// Model, optimizer state and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: HgfModel,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub step: usize,
    pub objective: Objective,
}

impl Trainer {
    pub fn new(model: HgfModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(model.params().iter().map(|p| p.value.numel()));
        Ok(Self {
            model,
            cfg,
            opt,
            step: 0,
            objective: Objective::Full,
        })
    }

    fn hyper(&self, group: ParamGroup) -> AdamHyper {
        let lr = match group {
            ParamGroup::Main => self.cfg.lr_main,
            ParamGroup::Gate => self.cfg.lr_gate,
        };
        AdamHyper {
            lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            weight_decay: self.cfg.weight_decay,
            eps: self.cfg.adam_eps,
        }
    }

    /// One optimizer step over `micro_batches`, accumulating
    /// `(task + w·ḡ)/n` gradients.
    pub fn train_step(&mut self, micro_batches: &[Batch]) -> Result<MetricsRecord> {
        if micro_batches.is_empty() {
            return Err(HgfError::Contract("train_step needs at least one micro-batch".into()));
        }
        let t = self.step;
        if t == self.cfg.gate_freeze {
            self.model.freeze_gates();
        }
        let w = reg_weight(t, &self.cfg);
        let n = micro_batches.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.model.params().len()];
        let mut task_sum = 0.0f64;
        let mut gate_mean = 0.0f64;
        for (k, batch) in micro_batches.iter().enumerate() {
            let mut g = Graph::new();
            let mut bound = self.model.bind(&mut g);
            let out = bound.forward(&batch.inputs, batch.batch, batch.len, Some(&batch.targets))?;
            let task = out.loss.expect("targets given");
            let gbar = bound.gate_mean()?;
            let leaves = bound.leaves().to_vec();
            if k == 0 {
                gate_mean = gbar.map_or(0.0, |v| g.value(v).data()[0] as f64);
            }
            task_sum += g.value(task).data()[0] as f64;
            let objective = match (self.objective, gbar) {
                (Objective::Full, Some(gv)) if w > 0.0 => {
                    let reg = g.scale(gv, w as f32)?;
                    g.add(task, reg)?
                }
                (Objective::Full, _) => task,
                (Objective::RegularizerOnly, Some(gv)) => g.scale(gv, w as f32)?,
                (Objective::RegularizerOnly, None) => g.scale(task, 0.0)?,
            };
            let loss = g.scale(objective, 1.0 / n as f32)?;
            let back = g.backward(loss)?;
            for (i, leaf) in leaves.iter().enumerate() {
                let Some(v) = *leaf else { continue };
                if !g.requires_grad(v) {
                    continue;
                }
                let gi = back.get(v);
                match &mut grads[i] {
                    Some(acc) => acc.iter_mut().zip(gi.data()).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gi.into_data()),
                }
            }
        }
        self.check_gradients(&grads)?;
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let h = self.hyper(self.model.params().params()[i].group);
            let p = &mut self.model.params_mut().params_mut()[i];
            self.opt.update(i, p.value.data_mut(), grad, h);
        }
        self.step += 1;
        Ok(MetricsRecord {
            step: t,
            train_loss: task_sum / n as f64,
            reg_weight: w,
            gate_mean,
            val_loss: None,
            wall_time: 0.0,
        })
    }

    fn check_gradients(&self, grads: &[Option<Vec<f32>>]) -> Result<()> {
        let params = self.model.params().params();
        for group in [ParamGroup::Main, ParamGroup::Gate] {
            let bad: Vec<String> = grads
                .iter()
                .enumerate()
                .filter(|(i, g)| {
                    params[*i].group == group && g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))
                })
                .map(|(i, _)| params[i].name.clone())
                .collect();
            if !bad.is_empty() {
                return Err(HgfError::NonFiniteGradient {
                    group: group.as_str(),
                    params: bad,
                });
            }
        }
        Ok(())
    }

    /// Micro-batches for step `t`.
    pub fn step_batches(&self, corpus: &Corpus, t: usize) -> Result<Vec<Batch>> {
        let batcher = Batcher {
            ctx_len: self.model.config().ctx_len,
            micro_batch: self.cfg.micro_batch,
        };
        let acc = self.cfg.accumulation_steps as u64;
        (0..acc)
            .map(|k| batcher.train_batch(corpus, self.cfg.seed, t as u64 * acc + k))
            .collect()
    }

    /// Trains until `total_steps`, calling `on_step` after every step.
    /// Validation runs every `eval_every` steps and after the last one.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        mut on_step: impl FnMut(&Trainer, &MetricsRecord) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let start = Instant::now();
        let batcher = Batcher {
            ctx_len: self.model.config().ctx_len,
            micro_batch: self.cfg.micro_batch,
        };
        let val = batcher.val_slice(corpus, self.cfg.seed, self.cfg.eval_batches)?;
        let mut records = Vec::new();
        while self.step < self.cfg.total_steps {
            let batches = self.step_batches(corpus, self.step)?;
            let mut rec = self.train_step(&batches)?;
            let done = self.step;
            if (self.cfg.eval_every > 0 && done % self.cfg.eval_every == 0) || done == self.cfg.total_steps {
                rec.val_loss = Some(evaluate(&self.model, &val)?);
            }
            rec.wall_time = start.elapsed().as_secs_f64();
            on_step(self, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Mean loss over `batches` on an inference graph.
pub fn evaluate(model: &HgfModel, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(HgfError::Contract("evaluate needs at least one batch".into()));
    }
    let mut total = 0.0f64;
    for b in batches {
        total += model.loss(&b.inputs, &b.targets, b.batch, b.len)? as f64;
    }
    Ok(total / batches.len() as f64)
}
