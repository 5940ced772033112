//! Acceptance criteria. Each test prints one summary line per criterion
//! (plus one indented line per check) straight to stderr, so the lines show
//! up in `cargo test` output without `--nocapture`.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use hgf_core::analysis::{effective_bitwidth, memory_report, quality_recovery, speedup_estimate, throughput_bound, MB};
use hgf_core::checkpoint::{Checkpoint, Dtype};
use hgf_core::data::{synthetic_stories, Batcher, Corpus};
use hgf_core::gradcheck::gradcheck;
use hgf_core::layers::lambda_init;
use hgf_core::quant::{fake_quantize_activations, pack_trits, ternarize, ternary_forward, unpack_trits};
use hgf_core::training::evaluate;
use hgf_core::{
    ArchMode, DenseTensor, Graph, HgfModel, MetricsRecord, ModelConfig, PackingMode, ParamGroup, TernaryWeight,
    TrainConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria run one at a time so their wall-clock bounds are meaningful.
static SERIAL: Mutex<()> = Mutex::new(());

struct Report {
    id: u32,
    title: &'static str,
    start: Instant,
    checks: Vec<(bool, String)>,
}

impl Report {
    fn new(id: u32, title: &'static str) -> Self {
        Report {
            id,
            title,
            start: Instant::now(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, pass: bool, detail: impl Into<String>) {
        self.checks.push((pass, detail.into()));
    }

    fn within(&mut self, limit: Duration) {
        let took = self.start.elapsed();
        self.check(
            took < limit,
            format!("runtime {:.2}s < {}s", took.as_secs_f64(), limit.as_secs()),
        );
    }

    fn finish(self) {
        let failed = self.checks.iter().filter(|c| !c.0).count();
        let verdict = if failed == 0 { "PASS" } else { "FAIL" };
        let mut err = std::io::stderr().lock();
        let _ = writeln!(
            err,
            "[{verdict}] criterion {}: {} ({}/{} checks)",
            self.id,
            self.title,
            self.checks.len() - failed,
            self.checks.len()
        );
        for (pass, detail) in &self.checks {
            let _ = writeln!(err, "    {} {detail}", if *pass { "ok  " } else { "FAIL" });
        }
        drop(err);
        let failures: Vec<&String> = self.checks.iter().filter(|c| !c.0).map(|c| &c.1).collect();
        assert!(failures.is_empty(), "criterion {} failed: {failures:?}", self.id);
    }
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn desk_train(total_steps: usize, reg_start: usize, gate_freeze: usize) -> TrainConfig {
    TrainConfig {
        total_steps,
        reg_start,
        gate_freeze,
        micro_batch: 8,
        accumulation_steps: 2,
        eval_every: 100,
        eval_batches: 4,
        ..TrainConfig::default()
    }
}

fn byte_corpus(seed: u64) -> Corpus {
    Corpus::from_bytes(synthetic_stories(400_000, seed).as_bytes(), 0.02, 65, seed).unwrap()
}

#[test]
fn criterion_1_closed_forms() {
    let _g = serial();
    let mut r = Report::new(1, "closed-form reproduction");
    let t = throughput_bound(500.0, 7e9, 16.0).unwrap();
    r.check(
        (35.0..=36.0).contains(&t),
        format!("throughput_bound(500, 7e9, 16) = {t:.4} in [35, 36]"),
    );
    let b = effective_bitwidth(0.1, 32, 512, 16.0).unwrap();
    r.check(
        (b - 1.68).abs() <= 1e-6,
        format!("effective_bitwidth(0.1, 32, 512) = {b:.6}, want 1.68 ± 1e-6"),
    );
    let q = quality_recovery(1.0294, 0.9306, 0.8490).unwrap();
    r.check(
        (q - 54.8).abs() <= 0.05,
        format!("quality_recovery(1.0294, 0.9306, 0.8490) = {q:.4}, want 54.8 ± 0.05"),
    );
    let s = speedup_estimate(4.0, 0.12).unwrap();
    r.check(
        (s - 2.7027).abs() <= 1e-4,
        format!("speedup_estimate(4, 0.12) = {s:.6}, want 2.7027 ± 1e-4"),
    );
    let g = 0.1f64.tanh();
    r.check(
        (g - 0.09967).abs() <= 1e-5,
        format!("tanh(0.1) = {g:.7}, want 0.09967 ± 1e-5"),
    );
    r.within(Duration::from_secs(1));
    r.finish();
}

/// Scalar transcription of the absmean ternary quantizer.
fn brute_ternary(w: &[f32]) -> (Vec<i8>, f32) {
    let mut sum = 0.0f64;
    for &v in w {
        sum += (v as f64).abs();
    }
    let mut gamma = (sum / w.len() as f64) as f32;
    if gamma < 1e-5 {
        gamma = 1e-5;
    }
    let mut trits = Vec::new();
    for &v in w {
        let mut t = (v / gamma).round_ties_even();
        if t > 1.0 {
            t = 1.0;
        }
        if t < -1.0 {
            t = -1.0;
        }
        trits.push(t as i8);
    }
    (trits, gamma)
}

#[test]
fn criterion_2_quantizer_oracle() {
    let _g = serial();
    let mut r = Report::new(2, "quantizer oracle suite");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut trit_mismatch, mut pack_fail, mut worst_rel) = (0usize, 0usize, 0.0f64);
    for case in 0..1000 {
        let rows = rng.random_range(1..=16);
        let cols = rng.random_range(1..=16);
        let amp = 10f32.powf(rng.random_range(-7.0..1.0));
        let mut w: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-amp..amp)).collect();
        if case % 10 == 0 {
            let g = w.iter().map(|v| v.abs()).sum::<f32>() / w.len() as f32;
            w[0] = g * 0.5;
        }
        let (trits, gamma) = ternarize(&w);
        if (trits.clone(), gamma) != brute_ternary(&w) {
            trit_mismatch += 1;
        }
        for mode in [PackingMode::TwoBit, PackingMode::FivePerByte] {
            let packed = pack_trits(&trits, mode).unwrap();
            let ok = packed.len() == trits.len().div_ceil(mode.trits_per_byte())
                && unpack_trits(&packed, trits.len(), mode).unwrap() == trits;
            let tw = TernaryWeight::from_trits(rows, cols, &trits, gamma, mode).unwrap();
            if !ok || tw.trits() != trits {
                pack_fail += 1;
            }
        }
        let tokens = rng.random_range(1..=8);
        let x = DenseTensor::uniform(&[tokens, cols], -3.0, 3.0, case as u64);
        let tw = TernaryWeight::from_trits(rows, cols, &trits, gamma, PackingMode::TwoBit).unwrap();
        let y = ternary_forward(&x, &tw).unwrap();
        let xq = fake_quantize_activations(x.data(), cols);
        let wd = tw.dequantize();
        let mut reference = vec![0.0f64; tokens * rows];
        for t in 0..tokens {
            for o in 0..rows {
                reference[t * rows + o] = (0..cols)
                    .map(|i| xq[t * cols + i] as f64 * wd.data()[o * cols + i] as f64)
                    .sum();
            }
        }
        let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = y
            .data()
            .iter()
            .zip(&reference)
            .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b).abs()));
        if scale > 0.0 {
            worst_rel = worst_rel.max(err / scale);
        } else {
            worst_rel = worst_rel.max(err);
        }
    }
    r.check(
        trit_mismatch == 0,
        format!("trits and γ match the scalar oracle exactly ({trit_mismatch}/1000 mismatches)"),
    );
    r.check(
        pack_fail == 0,
        format!("2bit and 5pb pack/unpack round-trips ({pack_fail} failures)"),
    );
    r.check(
        worst_rel <= 1e-4,
        format!("ternary_forward vs dequantize-then-matmul: worst relative error {worst_rel:.2e} <= 1e-4"),
    );
    r.within(Duration::from_secs(10));
    r.finish();
}

#[test]
fn criterion_3_gradients() {
    let _g = serial();
    let mut r = Report::new(3, "gradient suite");
    let rep = gradcheck(1, 1e-3).unwrap();
    for name in ["lora_down", "lora_up", "lambda", "layernorm", "embeddings", "gate"] {
        match rep.group(name) {
            Some(g) => r.check(
                g.max_rel_err <= 1e-3,
                format!("FD {name}: {:.2e} <= 1e-3", g.max_rel_err),
            ),
            None => r.check(false, format!("FD group {name} missing")),
        }
    }
    r.check(
        rep.gate_closed_form_err <= 1e-6,
        format!("gate gradient vs closed form: {:.2e} <= 1e-6", rep.gate_closed_form_err),
    );
    r.check(
        rep.decomposition_err <= 1e-6,
        format!("path-zeroing decomposition: {:.2e} <= 1e-6", rep.decomposition_err),
    );
    let d = (rep.saturation_ratio - rep.saturation_ratio_expected).abs();
    r.check(
        d <= 1e-6,
        format!(
            "sech² saturation ratio {:.9e} vs {:.9e}: |Δ| = {d:.2e} <= 1e-6",
            rep.saturation_ratio, rep.saturation_ratio_expected
        ),
    );
    r.within(Duration::from_secs(60));
    r.finish();
}

#[test]
fn criterion_4_memory() {
    let _g = serial();
    let mut r = Report::new(4, "memory calculator");
    let cfg = ModelConfig::default();
    let rep = memory_report(&cfg, PackingMode::TwoBit).unwrap();
    let hgf = rep.mode(ArchMode::HgfFull);
    let emb = hgf.bytes.token_embeddings as f64 / MB;
    r.check(
        (emb - 51.4).abs() / 51.4 <= 0.005,
        format!("token embeddings {emb:.3} MB within 0.5% of 51.4 MB"),
    );
    let gates = hgf.bytes.gates as f64 / MB;
    r.check(
        gates < 0.1,
        format!("HGF gate bytes {gates:.4} MB < 0.1 MB ({} params)", hgf.params.gates),
    );
    let ratio = rep.weight_ratio(ArchMode::Bitnet, ArchMode::BaselineFp);
    r.check(
        ratio <= 0.135,
        format!("BITNET/BASELINE attention+MLP bytes {ratio:.4} <= 0.135 (2bit)"),
    );
    r.finish();
}

/// Materialized differential attention in FP64 on a DIFF_ONLY layer.
fn reference_attention(model: &HgfModel, x: &DenseTensor) -> Vec<f64> {
    let cfg = model.config();
    let (b, l, d) = (x.shape()[0], x.shape()[1], cfg.d_model);
    let (h, hw) = (cfg.n_heads, cfg.head_width());
    let p = |n: &str| {
        model
            .params()
            .get(&format!("layers.0.attn.{n}"))
            .unwrap()
            .data()
            .to_vec()
    };
    let (wq, wk, wv, wo) = (p("q.weight"), p("k.weight"), p("v.weight"), p("o.weight"));
    let lam = p("lambda")[0] as f64;
    let proj = |w: &[f32], out: usize, inp: &[f64], din: usize| -> Vec<f64> {
        let rows = inp.len() / din;
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            for o in 0..out {
                y[r * out + o] = (0..din).map(|i| inp[r * din + i] * w[o * din + i] as f64).sum();
            }
        }
        y
    };
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let (q, k, v) = (proj(&wq, d, &xs, d), proj(&wk, d, &xs, d), proj(&wv, d / 2, &xs, d));
    let scale = 1.0 / (hw as f64).sqrt();
    let mut out = vec![0.0f64; b * l * (d / 2)];
    for bi in 0..b {
        for head in 0..h {
            let probs = |qh: usize| -> Vec<Vec<f64>> {
                (0..l)
                    .map(|i| {
                        let s: Vec<f64> = (0..=i)
                            .map(|j| {
                                (0..hw)
                                    .map(|c| q[(bi * l + i) * d + qh * hw + c] * k[(bi * l + j) * d + qh * hw + c])
                                    .sum::<f64>()
                                    * scale
                            })
                            .collect();
                        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                        s.iter().map(|v| (v - m).exp() / z).collect()
                    })
                    .collect()
            };
            let (p1, p2) = (probs(head), probs(h + head));
            for i in 0..l {
                for c in 0..hw {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        let vj = v[(bi * l + j) * (d / 2) + head * hw + c];
                        acc += (p1[i][j] - lam * p2[i][j]) * vj;
                    }
                    out[(bi * l + i) * (d / 2) + head * hw + c] = 0.5 * acc;
                }
            }
        }
    }
    proj(&wo, d, &out, d / 2)
}

#[test]
fn criterion_5_differential_attention() {
    let _g = serial();
    let mut r = Report::new(5, "differential-attention oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let heads = rng.random_range(1..=4usize);
        let hw = rng.random_range(1..=(8 / heads));
        let d = 2 * heads * hw;
        let l = rng.random_range(1..=8usize);
        let b = rng.random_range(1..=2usize);
        let cfg = ModelConfig {
            d_model: d,
            n_layers: 1,
            n_heads: heads,
            vocab_size: 16,
            ctx_len: 8,
            lora_rank: 1,
            mode: ArchMode::DiffOnly,
        };
        let mut model = HgfModel::init(cfg, case).unwrap();
        let lam: f32 = rng.random_range(-1.0..1.0);
        model.params_mut().get_mut("layers.0.attn.lambda").unwrap().data_mut()[0] = lam;
        let x = DenseTensor::uniform(&[b, l, d], -2.0, 2.0, 100 + case);
        let mut g = Graph::inference();
        let mut bound = model.bind(&mut g);
        let xv = bound.graph.constant(x.clone()).unwrap();
        let y = bound.attention(0, xv).unwrap();
        let got = g.value(y).data().to_vec();
        let want = reference_attention(&model, &x);
        worst = got
            .iter()
            .zip(&want)
            .fold(worst, |m, (&a, &b)| m.max((a as f64 - b).abs()));
    }
    r.check(
        worst <= 1e-5,
        format!("50 random configs vs materialized reference: max |Δ| = {worst:.2e} <= 1e-5"),
    );

    for mode in ArchMode::ALL {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 32,
            ctx_len: 8,
            lora_rank: 2,
            mode,
        };
        let model = HgfModel::init(cfg, 9).unwrap();
        let ids: Vec<usize> = (0..8).map(|i| (i * 5 + 3) % 32).collect();
        let base = model.logits(&ids, 1, 8).unwrap();
        let mut leaks = 0;
        for j in 1..8 {
            let mut changed = ids.clone();
            changed[j] = (changed[j] + 7) % 32;
            let other = model.logits(&changed, 1, 8).unwrap();
            let prefix = j * 32;
            if base.data()[..prefix] != other.data()[..prefix] {
                leaks += 1;
            }
        }
        r.check(
            leaks == 0,
            format!("causality in {mode}: earlier logits unchanged by later tokens ({leaks} leaks)"),
        );
    }

    let mut worst_lambda = 0.0f64;
    for (d, h) in [(64, 2), (512, 8), (16, 4), (32, 1), (8, 2)] {
        let closed = 0.8 - 0.6 * (-0.3 * (d / h) as f64).exp();
        worst_lambda = worst_lambda.max((lambda_init(d, h) - closed).abs());
    }
    r.check(
        worst_lambda <= 1e-9,
        format!("λ₀ = 0.8 − 0.6·exp(−0.3·d_h): max |Δ| = {worst_lambda:.1e} <= 1e-9"),
    );
    r.finish();
}

fn schedule_oracle(t: usize, cfg: &TrainConfig) -> f64 {
    if t >= cfg.reg_start && t < cfg.gate_freeze {
        cfg.reg_max * (t - cfg.reg_start) as f64 / (cfg.gate_freeze - cfg.reg_start) as f64
    } else {
        0.0
    }
}

fn run(mode: ArchMode, cfg: &TrainConfig, corpus: &Corpus) -> (Vec<MetricsRecord>, HgfModel) {
    let model = HgfModel::init(ModelConfig::desk(mode), cfg.seed).unwrap();
    let mut trainer = Trainer::new(model, cfg.clone()).unwrap();
    let records = trainer.run(corpus, |_, _| Ok(())).unwrap();
    (records, trainer.model)
}

fn parity_trace(model: HgfModel, cfg: &TrainConfig, corpus: &Corpus, steps: usize) -> Vec<u64> {
    let mut trainer = Trainer::new(model, cfg.clone()).unwrap();
    (0..steps)
        .map(|t| {
            let batches = trainer.step_batches(corpus, t).unwrap();
            trainer.train_step(&batches).unwrap().train_loss.to_bits()
        })
        .collect()
}

#[test]
fn criterion_6_training_protocol() {
    let _g = serial();
    let mut r = Report::new(6, "training protocol suite");
    let corpus = byte_corpus(42);

    let cfg = desk_train(500, 100, 200);
    let (records, _) = run(ArchMode::HgfFull, &cfg, &corpus);
    let initial = records[0].train_loss;
    let tail: f64 = records[450..].iter().map(|m| m.train_loss).sum::<f64>() / 50.0;
    r.check(
        tail <= 0.7 * initial,
        format!("500 steps: final-50 mean loss {tail:.4} <= 0.7 × initial {initial:.4}"),
    );
    let before: Vec<u64> = records[..200].iter().map(|m| m.gate_mean.to_bits()).collect();
    let distinct = before.iter().collect::<std::collections::BTreeSet<_>>().len();
    r.check(
        distinct > 1,
        format!("gate_mean varies before freeze ({distinct} distinct values in steps 0..200)"),
    );
    let frozen = records[200].gate_mean.to_bits();
    let constant = records[200..].iter().all(|m| m.gate_mean.to_bits() == frozen);
    r.check(
        constant,
        format!(
            "gate_mean bitwise constant from step 200 ({:.6})",
            records[200].gate_mean
        ),
    );
    let mismatched = records
        .iter()
        .filter(|m| m.reg_weight.to_bits() != schedule_oracle(m.step, &cfg).to_bits())
        .count();
    r.check(
        mismatched == 0,
        format!(
            "reg_weight matches the piecewise schedule at all {} steps ({mismatched} mismatches)",
            records.len()
        ),
    );

    let short = desk_train(24, 6, 12);
    let stream = |recs: Vec<MetricsRecord>| recs.iter().map(|m| m.to_json_line()).collect::<Vec<_>>().join("\n");
    let a = stream(run(ArchMode::HgfFull, &short, &corpus).0);
    let b = stream(run(ArchMode::HgfFull, &short, &corpus).0);
    r.check(
        a == b,
        format!("same seed twice: bitwise-identical metrics streams ({} bytes)", a.len()),
    );

    let parity_cfg = desk_train(20, 5, 10);
    let mut hgf = HgfModel::init(ModelConfig::desk(ArchMode::HgfFull), parity_cfg.seed).unwrap();
    for p in hgf.params_mut().params_mut() {
        if p.group == ParamGroup::Gate || p.name.contains("lora_") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    hgf.freeze_gates();
    let bitnet = HgfModel::init(ModelConfig::desk(ArchMode::Bitnet), parity_cfg.seed).unwrap();
    let lhs = parity_trace(hgf, &parity_cfg, &corpus, 20);
    let rhs = parity_trace(bitnet, &parity_cfg, &corpus, 20);
    let same = lhs.iter().zip(&rhs).filter(|(a, b)| a == b).count();
    r.check(
        lhs == rhs,
        format!("HGF with zero gates and LoRA reproduces BITNET losses bit-exactly ({same}/20 steps)"),
    );

    r.within(Duration::from_secs(300));
    r.finish();
}

#[test]
fn criterion_7_export_equivalence() {
    let _g = serial();
    let mut r = Report::new(7, "export/inference equivalence");
    let corpus = byte_corpus(7);
    let cfg = desk_train(30, 10, 20);
    let (_, model) = run(ArchMode::HgfFull, &cfg, &corpus);
    let val = Batcher {
        ctx_len: 64,
        micro_batch: 8,
    }
    .val_slice(&corpus, cfg.seed, 8)
    .unwrap();
    let exported = model.export_ternary(PackingMode::TwoBit).unwrap();
    let train_path = evaluate(&model, &val).unwrap();
    let infer_path = evaluate(&exported, &val).unwrap();
    let diff = (train_path - infer_path).abs();
    r.check(
        diff <= 1e-4,
        format!("|eval(trained) − eval(exported)| = {diff:.2e} <= 1e-4 ({train_path:.6} vs {infer_path:.6})"),
    );

    let bytes = Checkpoint::from_model(&exported, &cfg, cfg.total_steps).to_bytes();
    let header = Checkpoint::from_bytes(&bytes).unwrap().header();
    let quantized: Vec<String> = (0..2)
        .flat_map(|i| {
            ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.w1", "mlp.w2", "mlp.w3"]
                .map(|p| format!("layers.{i}.{p}.weight"))
        })
        .collect();
    let fp32_backbone = header
        .tensors
        .iter()
        .filter(|e| quantized.contains(&e.name) && e.dtype == Dtype::Fp32)
        .count();
    let packed = header
        .tensors
        .iter()
        .filter(|e| quantized.contains(&e.name) && e.dtype == Dtype::TritPacked2Bit)
        .count();
    r.check(
        fp32_backbone == 0 && packed == quantized.len(),
        format!(
            "exported checkpoint: {packed}/{} backbone tensors packed, {fp32_backbone} FP32",
            quantized.len()
        ),
    );
    r.finish();
}

#[test]
fn criterion_8_untrained_entropy() {
    let _g = serial();
    let mut r = Report::new(8, "untrained-model entropy");
    let corpus = byte_corpus(8);
    let val = Batcher {
        ctx_len: 64,
        micro_batch: 8,
    }
    .val_slice(&corpus, 8, 4)
    .unwrap();
    let ln256 = 256f64.ln();
    for mode in ArchMode::ALL {
        let loss = evaluate(&HgfModel::init(ModelConfig::desk(mode), 8).unwrap(), &val).unwrap();
        let rel = (loss - ln256).abs() / ln256;
        r.check(
            rel <= 0.15,
            format!(
                "{mode}: initial eval loss {loss:.4} within 15% of ln 256 ({:.1}%)",
                rel * 100.0
            ),
        );
    }
    r.finish();
}
