//! Training loop for the three pipeline stages: MLM adaptation, contrastive
//! pretraining (in-batch negatives + balance term), and contrastive
//! finetuning (hard negatives + Matryoshka). Deterministic end to end: batch
//! order, masking, and initialization all derive from (seed, step), so
//! checkpointed runs resume bit-exactly.

pub mod optim;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{language_weights, sample_batches, PairBatch, PairRecord};
use crate::encoder::checkpoint::{load_archive, save_archive, TrainerMeta};
use crate::encoder::{
    encode_traced, mlm_traced, param_specs, EncodeTrace, EncoderModel, LayerKind, Role, TokenBatch,
};
use crate::error::{Error, Result};
use crate::moe::LoadStats;
use crate::numeric::{Tape, Tensor, Var};
use crate::objectives::{
    infonce_traced, mask_tokens_offset, mix, mrl_loss_traced, total_loss_traced,
};

pub use optim::{clip_global_norm, AdamW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mlm,
    ContrastivePretrain,
    ContrastiveFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Mlm => "mlm",
            Stage::ContrastivePretrain => "contrastive_pretrain",
            Stage::ContrastiveFinetune => "contrastive_finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u64>,
    pub schedule: Schedule,
    pub max_grad_norm: f64,
    pub tau: f64,
    /// Balance-loss coefficient α.
    pub alpha: f64,
    pub max_len_query: usize,
    pub max_len_doc: usize,
    /// Matryoshka dimensions for finetuning; empty means full width only.
    #[serde(default)]
    pub mrl_dims: Vec<usize>,
    /// Hard negatives per query consumed in the finetune stage.
    #[serde(default = "default_hard_negatives")]
    pub hard_negatives: usize,
    #[serde(default = "default_grad_accum")]
    pub grad_accum_steps: u64,
    #[serde(default = "default_mlm_probability")]
    pub mlm_probability: f64,
    /// Language sampling temperature for the MLM stage.
    #[serde(default = "default_language_alpha")]
    pub language_alpha: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
}

fn default_hard_negatives() -> usize {
    10
}
fn default_grad_accum() -> u64 {
    1
}
fn default_mlm_probability() -> f64 {
    0.3
}
fn default_language_alpha() -> f64 {
    0.3
}
fn default_weight_decay() -> f64 {
    0.01
}

impl TrainConfig {
    /// MLM adaptation at published scale: batch 4096, peak 4e-4, 500 warmup
    /// of 10,000 linear-decay steps, 8-way grad accumulation, grad norm 1.
    pub fn mlm_paper(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Mlm,
            batch_size: 4096,
            peak_lr: 4e-4,
            warmup_steps: 500,
            total_steps: Some(10_000),
            epochs: None,
            schedule: Schedule::Linear,
            max_grad_norm: 1.0,
            tau: 0.02,
            alpha: 1.0,
            max_len_query: 2048,
            max_len_doc: 2048,
            mrl_dims: vec![],
            hard_negatives: 0,
            grad_accum_steps: 8,
            mlm_probability: 0.3,
            language_alpha: 0.3,
            weight_decay: 0.01,
            seed,
        }
    }

    /// Contrastive pretraining at published scale: batch 16,384, peak 8e-5,
    /// 1,000 warmup, cosine decay, query/document lengths 32/256, τ = 0.02,
    /// α = 1, one epoch.
    pub fn pretrain_paper(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::ContrastivePretrain,
            batch_size: 16_384,
            peak_lr: 8e-5,
            warmup_steps: 1_000,
            total_steps: None,
            epochs: Some(1),
            schedule: Schedule::Cosine,
            max_grad_norm: 1.0,
            tau: 0.02,
            alpha: 1.0,
            max_len_query: 32,
            max_len_doc: 256,
            mrl_dims: vec![],
            hard_negatives: 0,
            grad_accum_steps: 1,
            mlm_probability: 0.3,
            language_alpha: 0.3,
            weight_decay: 0.01,
            seed,
        }
    }

    /// Contrastive finetuning at published scale: batch 256, peak 2e-5, 400
    /// warmup, linear decay, one epoch, both lengths 512, 10 hard negatives,
    /// Matryoshka at 768 and 256.
    pub fn finetune_paper(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::ContrastiveFinetune,
            batch_size: 256,
            peak_lr: 2e-5,
            warmup_steps: 400,
            total_steps: None,
            epochs: Some(1),
            schedule: Schedule::Linear,
            max_grad_norm: 1.0,
            tau: 0.02,
            alpha: 1.0,
            max_len_query: 512,
            max_len_doc: 512,
            mrl_dims: vec![768, 256],
            hard_negatives: 10,
            grad_accum_steps: 1,
            mlm_probability: 0.3,
            language_alpha: 0.3,
            weight_decay: 0.01,
            seed,
        }
    }

    /// Desk-scale MLM defaults (64-token rows, a few hundred steps).
    pub fn mlm_desk(seed: u64) -> Self {
        TrainConfig {
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 20,
            total_steps: Some(150),
            max_len_query: 32,
            max_len_doc: 32,
            grad_accum_steps: 1,
            ..TrainConfig::mlm_paper(seed)
        }
    }

    /// Desk-scale contrastive pretraining defaults.
    pub fn pretrain_desk(seed: u64) -> Self {
        TrainConfig {
            batch_size: 64,
            peak_lr: 2e-3,
            warmup_steps: 20,
            total_steps: Some(150),
            epochs: None,
            max_len_query: 8,
            max_len_doc: 16,
            ..TrainConfig::pretrain_paper(seed)
        }
    }

    /// Desk-scale finetuning defaults (Matryoshka at 64 and 16).
    pub fn finetune_desk(seed: u64) -> Self {
        TrainConfig {
            batch_size: 64,
            peak_lr: 5e-4,
            warmup_steps: 10,
            total_steps: Some(100),
            epochs: None,
            max_len_query: 12,
            max_len_doc: 20,
            mrl_dims: vec![64, 16],
            hard_negatives: 5,
            ..TrainConfig::finetune_paper(seed)
        }
    }

    pub fn validate(&self, encoder: &crate::encoder::EncoderConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if let Some(total) = self.total_steps {
            if self.warmup_steps > total {
                return Err(Error::Config(format!(
                    "warmup_steps {} exceeds total_steps {total}",
                    self.warmup_steps
                )));
            }
        }
        if self.total_steps.is_none() && self.epochs.is_none() {
            return Err(Error::Config("one of total_steps or epochs is required".into()));
        }
        if self.grad_accum_steps == 0 {
            return Err(Error::Config("grad_accum_steps must be at least 1".into()));
        }
        if self.grad_accum_steps > 1 {
            if self.stage != Stage::Mlm {
                return Err(Error::Config(
                    "gradient accumulation is only loss-equivalent for the MLM stage \
                     (in-batch negatives couple contrastive rows)"
                        .into(),
                ));
            }
            if self.batch_size % self.grad_accum_steps as usize != 0 {
                return Err(Error::Config(format!(
                    "batch_size {} is not divisible by grad_accum_steps {}",
                    self.batch_size, self.grad_accum_steps
                )));
            }
            if encoder.layer_kinds.iter().any(|k| matches!(k, LayerKind::Moe { .. })) {
                return Err(Error::Config(
                    "gradient accumulation with MoE layers would skew the balance \
                     statistics; run MLM accumulation on a dense model"
                        .into(),
                ));
            }
        }
        for &d in &self.mrl_dims {
            if !encoder.output_dims.contains(&d) {
                return Err(Error::Config(format!(
                    "mrl dimension {d} is not one of the encoder output_dims {:?}",
                    encoder.output_dims
                )));
            }
        }
        if self.max_len_query == 0 || self.max_len_doc == 0 {
            return Err(Error::Config("sequence length caps must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to peak over `warmup_steps`, then linear or cosine
/// decay to 0 at `total_steps`. Steps past the end return 0.
pub fn lr_at(step: u64, config: &TrainConfig) -> Result<f64> {
    let total = config
        .total_steps
        .ok_or_else(|| Error::Config("lr_at needs resolved total_steps".into()))?;
    if step > total {
        return Ok(0.0);
    }
    if step < config.warmup_steps {
        return Ok(config.peak_lr * step as f64 / config.warmup_steps as f64);
    }
    let span = (total - config.warmup_steps) as f64;
    let progress = if span > 0.0 { (step - config.warmup_steps) as f64 / span } else { 1.0 };
    Ok(match config.schedule {
        Schedule::Linear => config.peak_lr * (1.0 - progress),
        Schedule::Cosine => config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    })
}

/// Data for one stage run.
pub enum StageData {
    /// language → texts
    Mlm(BTreeMap<String, Vec<String>>),
    /// dataset tag → records
    Pairs(BTreeMap<String, Vec<PairRecord>>),
}

/// Mutable training state: model, optimizer moments, step counter.
pub struct TrainState {
    pub model: EncoderModel,
    pub optimizer: AdamW,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn fresh(model: EncoderModel, config: &TrainConfig) -> Self {
        TrainState {
            model,
            optimizer: AdamW::new(config.weight_decay),
            step: 0,
            loss_history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Primary objective component: InfoNCE/MRL for contrastive stages, the
    /// masked cross-entropy for MLM.
    pub contrastive: f64,
    /// α-scaled balance loss per MoE layer.
    pub balance_per_layer: Vec<f64>,
    pub grad_norm: f64,
    #[serde(skip)]
    pub routing: Vec<RoutingLogEntry>,
}

/// Per-layer routing export: {step, layer, r, p, balance_loss}.
#[derive(Debug, Clone, Serialize)]
pub struct RoutingLogEntry {
    pub step: u64,
    pub layer: usize,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
    pub balance_loss: f64,
}

/// Token-count-weighted combination of per-pass balance terms, one var per
/// MoE layer (equivalent to routing the union of the passes' tokens).
fn combine_balance(
    tape: &mut Tape,
    traces: &[&EncodeTrace],
    step: u64,
    alpha: f64,
) -> Result<(Vec<Var>, Vec<RoutingLogEntry>)> {
    let layer_count = traces.first().map_or(0, |t| t.moe_layers.len());
    let mut raw_vars = Vec::with_capacity(layer_count);
    let mut entries = Vec::with_capacity(layer_count);
    for li in 0..layer_count {
        let total_tokens: usize = traces.iter().map(|t| t.moe_layers[li].stats.token_count).sum();
        let mut p_comb: Option<Var> = None;
        let e = traces[0].moe_layers[li].stats.r.len();
        let mut r_comb = vec![0.0; e];
        for t in traces {
            let layer = &t.moe_layers[li];
            let w = layer.stats.token_count as f64 / total_tokens as f64;
            let scaled = tape.scale(layer.p_mean, w);
            p_comb = Some(match p_comb {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
            for (rc, &r) in r_comb.iter_mut().zip(layer.stats.r.iter()) {
                *rc += w * r;
            }
        }
        let p_comb = p_comb.expect("at least one trace");
        let raw = tape.dot_const(p_comb, &r_comb)?;
        let stats = LoadStats {
            r: r_comb.clone(),
            p: tape.value(p_comb).to_vec(),
            token_count: total_tokens,
        };
        entries.push(RoutingLogEntry {
            step,
            layer: traces[0].moe_layers[li].layer_index,
            r: stats.r.clone(),
            p: stats.p.clone(),
            balance_loss: alpha * tape.scalar_value(raw),
        });
        raw_vars.push(raw);
    }
    Ok((raw_vars, entries))
}

fn dump_routing(entries: &[RoutingLogEntry]) -> String {
    serde_json::to_string(entries).unwrap_or_else(|_| "<unserializable>".into())
}

/// A prepared batch for one step.
pub enum StageBatch {
    Mlm { rows: Vec<Vec<usize>> },
    Pairs { batch: PairBatch },
}

/// Forward, loss, backward, clip, update. Returns the step's metrics; the
/// state's step counter advances by one.
pub fn train_step(
    state: &mut TrainState,
    batch: &StageBatch,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    config.validate(&state.model.config)?;
    let step = state.step;
    let lr = lr_at(step, config)?;

    let outcome = match (config.stage, batch) {
        (Stage::Mlm, StageBatch::Mlm { rows }) => mlm_step(state, rows, config, step)?,
        (Stage::ContrastivePretrain, StageBatch::Pairs { batch }) => {
            pretrain_step(state, batch, config, step)?
        }
        (Stage::ContrastiveFinetune, StageBatch::Pairs { batch }) => {
            finetune_step(state, batch, config, step)?
        }
        _ => {
            return Err(Error::Config(format!(
                "batch kind does not match stage {:?}",
                config.stage
            )));
        }
    };
    let StepOutcome { loss, contrastive, mut grads, routing } = outcome;

    if !loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {loss} at step {step}; routing stats: {}",
            dump_routing(&routing)
        )));
    }

    let grad_norm = clip_global_norm(&mut grads, config.max_grad_norm);
    state.optimizer.step(&mut state.model.params, &grads, lr);
    state.step += 1;
    state.loss_history.push(loss);

    Ok(StepMetrics {
        step,
        lr,
        loss,
        contrastive,
        balance_per_layer: routing.iter().map(|r| r.balance_loss).collect(),
        grad_norm,
        routing,
    })
}

struct StepOutcome {
    loss: f64,
    contrastive: f64,
    grads: IndexMap<String, Vec<f64>>,
    routing: Vec<RoutingLogEntry>,
}

fn collect_grads(tape: &Tape, model: &EncoderModel) -> IndexMap<String, Vec<f64>> {
    let mut grads = IndexMap::new();
    for (name, tensor) in &model.params {
        let g = tape.param_grad(name).unwrap_or_else(|| vec![0.0; tensor.numel()]);
        grads.insert(name.clone(), g);
    }
    grads
}

fn mlm_step(
    state: &mut TrainState,
    rows: &[Vec<usize>],
    config: &TrainConfig,
    step: u64,
) -> Result<StepOutcome> {
    let accum = config.grad_accum_steps as usize;
    let micro = rows.len() / accum.max(1);
    let mask_seed = mix(config.seed, step);

    // Mask every micro-batch first: the combined loss weights each one by
    // its masked-position count, which reproduces the single-batch loss.
    let mut masked_batches = Vec::with_capacity(accum);
    let mut mask_counts = Vec::with_capacity(accum);
    for a in 0..accum {
        let slice = &rows[a * micro..(a + 1) * micro];
        let batch = TokenBatch::from_rows(slice, None)?;
        let masked = mask_tokens_offset(
            &batch,
            &state.model.vocab,
            config.mlm_probability,
            mask_seed,
            (a * micro) as u64,
        )?;
        mask_counts.push(masked.mask_positions.iter().filter(|&&m| m).count());
        masked_batches.push(masked);
    }
    let total_masked: usize = mask_counts.iter().sum();

    let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
    let mut loss_acc = 0.0;
    let mut routing_all = Vec::new();
    for (masked, &count) in masked_batches.iter().zip(mask_counts.iter()) {
        let weight =
            if total_masked == 0 { 0.0 } else { count as f64 / total_masked as f64 };
        let mut tape = Tape::new();
        let trace = mlm_traced(&state.model, &mut tape, &masked.corrupted)?;
        let ce = tape.masked_cross_entropy(trace.logits, &masked.targets())?;
        let encode_like = EncodeTrace { embeddings: ce, moe_layers: trace.moe_layers };
        let (balance_vars, routing) =
            combine_balance(&mut tape, &[&encode_like], step, config.alpha)?;
        let loss = total_loss_traced(&mut tape, ce, &balance_vars, config.alpha)?;
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::Training(format!(
                "non-finite MLM loss {loss_val} at step {step}; routing stats: {}",
                dump_routing(&routing)
            )));
        }
        tape.backward(loss)?;
        loss_acc += weight * loss_val;
        routing_all.extend(routing);
        for (name, tensor) in &state.model.params {
            let g = tape.param_grad(name).unwrap_or_else(|| vec![0.0; tensor.numel()]);
            let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; tensor.numel()]);
            for (a, b) in acc.iter_mut().zip(g.iter()) {
                *a += weight * b;
            }
        }
    }
    Ok(StepOutcome { loss: loss_acc, contrastive: loss_acc, grads, routing: routing_all })
}

fn pretrain_step(
    state: &mut TrainState,
    batch: &PairBatch,
    config: &TrainConfig,
    step: u64,
) -> Result<StepOutcome> {
    let queries: Vec<&str> = batch.pairs.iter().map(|p| p.query.as_str()).collect();
    let documents: Vec<&str> = batch.pairs.iter().map(|p| p.document.as_str()).collect();
    let q_batch = state.model.tokenize_batch(&queries, Role::Query, config.max_len_query)?;
    let d_batch = state.model.tokenize_batch(&documents, Role::Document, config.max_len_doc)?;

    let mut tape = Tape::new();
    let q = encode_traced(&state.model, &mut tape, &q_batch)?;
    let d = encode_traced(&state.model, &mut tape, &d_batch)?;
    let scores = tape.matmul_nt(q.embeddings, d.embeddings)?;
    let contrastive = infonce_traced(&mut tape, scores, config.tau)?;
    let (balance_vars, routing) = combine_balance(&mut tape, &[&q, &d], step, config.alpha)?;
    let loss = total_loss_traced(&mut tape, contrastive, &balance_vars, config.alpha)?;
    let loss_val = tape.scalar_value(loss);
    let contrastive_val = tape.scalar_value(contrastive);
    if !loss_val.is_finite() {
        return Err(Error::Training(format!(
            "non-finite pretrain loss {loss_val} at step {step}; routing stats: {}",
            dump_routing(&routing)
        )));
    }
    tape.backward(loss)?;
    Ok(StepOutcome {
        loss: loss_val,
        contrastive: contrastive_val,
        grads: collect_grads(&tape, &state.model),
        routing,
    })
}

fn finetune_step(
    state: &mut TrainState,
    batch: &PairBatch,
    config: &TrainConfig,
    step: u64,
) -> Result<StepOutcome> {
    let h = config.hard_negatives;
    let queries: Vec<&str> = batch.pairs.iter().map(|p| p.query.as_str()).collect();
    let documents: Vec<&str> = batch.pairs.iter().map(|p| p.document.as_str()).collect();
    let mut negatives: Vec<&str> = Vec::with_capacity(batch.pairs.len() * h);
    if h > 0 {
        for p in &batch.pairs {
            let negs = p.hard_negatives.as_deref().unwrap_or(&[]);
            if negs.len() < h {
                return Err(Error::Config(format!(
                    "record '{}' has {} hard negatives, finetuning needs {h}",
                    p.query,
                    negs.len()
                )));
            }
            negatives.extend(negs[..h].iter().map(String::as_str));
        }
    }

    let q_batch = state.model.tokenize_batch(&queries, Role::Query, config.max_len_query)?;
    let d_batch = state.model.tokenize_batch(&documents, Role::Document, config.max_len_doc)?;

    let mut tape = Tape::new();
    let q = encode_traced(&state.model, &mut tape, &q_batch)?;
    let d = encode_traced(&state.model, &mut tape, &d_batch)?;
    let hard_trace = if h > 0 {
        let n_batch = state.model.tokenize_batch(&negatives, Role::Document, config.max_len_doc)?;
        Some(encode_traced(&state.model, &mut tape, &n_batch)?)
    } else {
        None
    };
    let hard_arg = hard_trace.as_ref().map(|t| (t.embeddings, h));

    let dims = if config.mrl_dims.is_empty() {
        vec![state.model.config.hidden_dim]
    } else {
        config.mrl_dims.clone()
    };
    let contrastive =
        mrl_loss_traced(&mut tape, q.embeddings, d.embeddings, hard_arg, &dims, config.tau)?;

    // The hard-negative pass contributes routing stats too.
    let mut traces: Vec<&EncodeTrace> = vec![&q, &d];
    if let Some(t) = hard_trace.as_ref() {
        traces.push(t);
    }
    let (balance_vars, routing) = combine_balance(&mut tape, &traces, step, config.alpha)?;
    let loss = total_loss_traced(&mut tape, contrastive, &balance_vars, config.alpha)?;
    let loss_val = tape.scalar_value(loss);
    let contrastive_val = tape.scalar_value(contrastive);
    if !loss_val.is_finite() {
        return Err(Error::Training(format!(
            "non-finite finetune loss {loss_val} at step {step}; routing stats: {}",
            dump_routing(&routing)
        )));
    }
    tape.backward(loss)?;
    Ok(StepOutcome {
        loss: loss_val,
        contrastive: contrastive_val,
        grads: collect_grads(&tape, &state.model),
        routing,
    })
}

// ── stage driver ────────────────────────────────────────────────────────

/// Pre-tokenized MLM corpus with language-temperature sampling weights.
struct MlmSampler {
    languages: Vec<String>,
    cumulative: Vec<f64>,
    token_rows: Vec<Vec<Vec<usize>>>,
}

impl MlmSampler {
    fn build(model: &EncoderModel, data: &BTreeMap<String, Vec<String>>, config: &TrainConfig) -> Result<Self> {
        if data.is_empty() || data.values().any(Vec::is_empty) {
            return Err(Error::Config("MLM data needs at least one text per language".into()));
        }
        let counts: BTreeMap<String, u64> =
            data.iter().map(|(l, texts)| (l.clone(), texts.len() as u64)).collect();
        let weights = language_weights(&counts, config.language_alpha)?;
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        let mut languages = Vec::with_capacity(weights.len());
        for (lang, w) in &weights {
            acc += w;
            cumulative.push(acc);
            languages.push(lang.clone());
        }
        let cap = config.max_len_doc.min(model.config.max_seq_len);
        let token_rows: Result<Vec<Vec<Vec<usize>>>> = languages
            .iter()
            .map(|lang| {
                data[lang].iter().map(|text| model.vocab.encode_raw(text, cap)).collect()
            })
            .collect();
        Ok(MlmSampler { languages, cumulative, token_rows: token_rows? })
    }

    fn batch_for_step(&self, step: u64, seed: u64, batch_size: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step));
        (0..batch_size)
            .map(|_| {
                let u: f64 = rng.random();
                let li = self
                    .cumulative
                    .iter()
                    .position(|&c| u < c)
                    .unwrap_or(self.languages.len() - 1);
                let rows = &self.token_rows[li];
                rows[rng.random_range(0..rows.len())].clone()
            })
            .collect()
    }
}

/// Batches per epoch for pair data under the drop-remainder policy.
fn pair_batches_per_epoch(data: &BTreeMap<String, Vec<PairRecord>>, batch_size: usize) -> u64 {
    data.values().map(|v| (v.len() / batch_size) as u64).sum()
}

fn resolve_total_steps(config: &TrainConfig, batches_per_epoch: u64) -> Result<u64> {
    match (config.total_steps, config.epochs) {
        (Some(t), _) => Ok(t),
        (None, Some(e)) => {
            if batches_per_epoch == 0 {
                return Err(Error::Config(
                    "epoch-based schedule with zero batches per epoch".into(),
                ));
            }
            Ok(e * batches_per_epoch)
        }
        (None, None) => Err(Error::Config("one of total_steps or epochs is required".into())),
    }
}

/// Sinks for per-step metrics and routing statistics.
struct MetricsSink {
    metrics: Option<BufWriter<File>>,
    routing: Option<BufWriter<File>>,
}

impl MetricsSink {
    fn new(out_dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = out_dir else {
            return Ok(MetricsSink { metrics: None, routing: None });
        };
        std::fs::create_dir_all(dir)?;
        Ok(MetricsSink {
            metrics: Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?)),
            routing: Some(BufWriter::new(File::create(dir.join("routing.jsonl"))?)),
        })
    }

    fn write(&mut self, m: &StepMetrics) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            serde_json::to_writer(&mut *w, m)?;
            w.write_all(b"\n")?;
        }
        if let Some(w) = self.routing.as_mut() {
            for entry in &m.routing {
                serde_json::to_writer(&mut *w, entry)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            w.flush()?;
        }
        if let Some(w) = self.routing.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// Drive a state from its current step up to `stop_at`, emitting one metrics
/// record per step. Batch composition is a pure function of (seed, step), so
/// a reloaded checkpoint continues exactly where it stopped.
pub fn train_loop(
    config: &TrainConfig,
    data: &StageData,
    state: &mut TrainState,
    stop_at: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    config.validate(&state.model.config)?;
    let mut sink = MetricsSink::new(out_dir)?;
    let mut history = Vec::new();

    match (config.stage, data) {
        (Stage::Mlm, StageData::Mlm(texts)) => {
            let sampler = MlmSampler::build(&state.model, texts, config)?;
            let total = resolve_total_steps(config, 0)?.min(stop_at);
            while state.step < total {
                let rows = sampler.batch_for_step(state.step, config.seed, config.batch_size);
                let metrics = train_step(state, &StageBatch::Mlm { rows }, config)?;
                sink.write(&metrics)?;
                history.push(metrics);
            }
        }
        (Stage::ContrastivePretrain | Stage::ContrastiveFinetune, StageData::Pairs(pairs)) => {
            validate_pair_schema(config, pairs)?;
            let bpe = pair_batches_per_epoch(pairs, config.batch_size);
            if bpe == 0 {
                return Err(Error::Config(format!(
                    "batch_size {} yields zero batches per epoch",
                    config.batch_size
                )));
            }
            let total = resolve_total_steps(config, bpe)?.min(stop_at);
            let mut cached_epoch = u64::MAX;
            let mut epoch_batches = Vec::new();
            while state.step < total {
                let epoch = state.step / bpe;
                if epoch != cached_epoch {
                    epoch_batches =
                        sample_batches(pairs, config.batch_size, mix(config.seed, epoch))?;
                    cached_epoch = epoch;
                }
                let batch = epoch_batches[(state.step % bpe) as usize].clone();
                let metrics = train_step(state, &StageBatch::Pairs { batch }, config)?;
                sink.write(&metrics)?;
                history.push(metrics);
            }
        }
        _ => {
            return Err(Error::Config(format!(
                "stage {:?} does not match the provided data kind",
                config.stage
            )));
        }
    }
    sink.flush()?;
    Ok(history)
}

fn validate_pair_schema(
    config: &TrainConfig,
    pairs: &BTreeMap<String, Vec<PairRecord>>,
) -> Result<()> {
    if pairs.is_empty() || pairs.values().any(Vec::is_empty) {
        return Err(Error::Config("pair data needs at least one record per dataset".into()));
    }
    for records in pairs.values() {
        for r in records {
            r.validate()?;
            if config.stage == Stage::ContrastiveFinetune && config.hard_negatives > 0 {
                let have = r.hard_negatives.as_ref().map_or(0, Vec::len);
                if have < config.hard_negatives {
                    return Err(Error::Config(format!(
                        "record '{}' has {have} hard negatives, finetuning needs {}",
                        r.query, config.hard_negatives
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Run one full stage from an initial model and return the trained model
/// with its metrics history. Writes metrics, routing, and a checkpoint when
/// `out_dir` is given.
pub fn run_stage(
    config: &TrainConfig,
    data: &StageData,
    init: EncoderModel,
    out_dir: Option<&Path>,
) -> Result<(EncoderModel, Vec<StepMetrics>)> {
    let mut state = TrainState::fresh(init, config);
    let metrics = train_loop(config, data, &mut state, u64::MAX, out_dir)?;
    if let Some(dir) = out_dir {
        save_state(&dir.join("checkpoint.bin"), &state, config)?;
    }
    Ok((state.model, metrics))
}

/// Persist a full training state (parameters + optimizer moments + step).
pub fn save_state(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let mut tensors = state.model.params.clone();
    for (name, values) in state.optimizer.export_moments() {
        let len = values.len();
        tensors.insert(name, Tensor::new(vec![len], values)?);
    }
    let meta = TrainerMeta {
        stage: config.stage.name().to_string(),
        step: state.step,
        seed: config.seed,
        loss_history: state.loss_history.clone(),
    };
    save_archive(path, &state.model.config, &state.model.vocab, &tensors, Some(&meta))
}

/// Restore a training state saved by [`save_state`].
pub fn load_state(path: &Path, config: &TrainConfig) -> Result<TrainState> {
    let (enc_config, vocab, tensors, meta) = load_archive(path)?;
    let meta = meta.ok_or_else(|| {
        Error::Input("checkpoint has no trainer metadata; was it saved mid-run?".into())
    })?;
    let mut params = IndexMap::new();
    let mut optimizer = AdamW::new(config.weight_decay);
    for (name, tensor) in tensors {
        if name.starts_with("opt.") {
            optimizer.import_moment(&name, tensor.data().to_vec());
        } else {
            params.insert(name, tensor);
        }
    }
    optimizer.t = meta.step;
    enc_config.validate()?;
    let model = EncoderModel { config: enc_config, vocab, params };
    for (name, shape) in param_specs(&model.config) {
        match model.params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            _ => {
                return Err(Error::Input(format!(
                    "checkpoint parameter {name} missing or mis-shaped"
                )));
            }
        }
    }
    Ok(TrainState { model, optimizer, step: meta.step, loss_history: meta.loss_history })
}

// ── balance trajectory probe ────────────────────────────────────────────

/// Train only a router against the balance objective on a skewed token
/// distribution; returns Σᵢ rᵢ·pᵢ per step. Demonstrates the router learning
/// to spread load: the 50-step moving average falls from its initial value
/// within 200 steps.
pub fn balance_probe(seed: u64, steps: usize) -> Result<Vec<f64>> {
    let hidden = 8;
    let experts = 4;
    let tokens = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x0b));
    let mut router = Tensor::randn(vec![hidden, experts], 1.0, &mut rng).with_grad();
    let anchor = Tensor::randn(vec![hidden], 1.0, &mut rng);

    let mut opt = AdamW::new(0.0);
    let mut series = Vec::with_capacity(steps);
    for step in 0..steps {
        // Skewed batch: 85% of tokens cluster near the anchor direction.
        let mut step_rng = ChaCha8Rng::seed_from_u64(mix(seed, step as u64 + 1));
        let mut data = Vec::with_capacity(tokens * hidden);
        for t in 0..tokens {
            let clustered = (t as f64) < 0.85 * tokens as f64;
            for j in 0..hidden {
                let noise: f64 = step_rng.random::<f64>() - 0.5;
                data.push(if clustered { anchor.data()[j] + 0.2 * noise } else { 2.0 * noise });
            }
        }
        let x = Tensor::new(vec![tokens, hidden], data)?;

        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let rv = tape.param("router", &router);
        let logits = tape.matmul(xv, rv)?;
        let probs = tape.softmax_last(logits);
        let idx = crate::moe::select_top_k(tape.value(probs), tokens, experts, 1);
        let mut counts = vec![0usize; experts];
        for &e in &idx {
            counts[e] += 1;
        }
        let r: Vec<f64> = counts.iter().map(|&c| c as f64 / tokens as f64).collect();
        let p_mean = tape.mean_axis0(probs);
        let balance = tape.dot_const(p_mean, &r)?;
        series.push(tape.scalar_value(balance));
        tape.backward(balance)?;

        let mut grads = IndexMap::new();
        grads.insert("router".to_string(), tape.param_grad("router").unwrap());
        let mut params = IndexMap::new();
        params.insert("router".to_string(), router.clone());
        opt.step(&mut params, &grads, 0.05);
        router = params.shift_remove("router").unwrap();
    }
    Ok(series)
}

/// Mean of `series[at-window..at]`.
pub fn moving_average(series: &[f64], at: usize, window: usize) -> f64 {
    let start = at.saturating_sub(window);
    let slice = &series[start..at];
    slice.iter().sum::<f64>() / slice.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Vocab};

    fn mini_corpus() -> Vec<String> {
        let colors = ["red", "blue", "green", "gold", "gray"];
        let items = ["shoe", "hat", "lamp", "book", "cup"];
        let mut out = Vec::new();
        for c in colors {
            for i in items {
                out.push(format!("the {c} {i} sits near the old {c} door"));
            }
        }
        out
    }

    fn mini_model(layer_kinds: Vec<LayerKind>, seed: u64) -> EncoderModel {
        let corpus = mini_corpus();
        let vocab = Vocab::build(corpus.iter().map(String::as_str), 64).unwrap();
        let config = EncoderConfig {
            vocab_size: vocab.len(),
            hidden_dim: 16,
            num_layers: layer_kinds.len(),
            num_heads: 2,
            mlp_dim: 24,
            max_seq_len: 32,
            rope_base: 10_000.0,
            layer_kinds,
            output_dims: vec![16, 4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderModel::init(config, vocab, &mut rng).unwrap()
    }

    fn pair_data(n: usize) -> BTreeMap<String, Vec<PairRecord>> {
        let corpus = mini_corpus();
        let mut data: BTreeMap<String, Vec<PairRecord>> = BTreeMap::new();
        for i in 0..n {
            let text = &corpus[i % corpus.len()];
            let mut rec = PairRecord::new(
                text.split_whitespace().take(3).collect::<Vec<_>>().join(" "),
                text.clone(),
            );
            rec.dataset = if i % 2 == 0 { "even".into() } else { "odd".into() };
            rec.hard_negatives = Some(vec![
                corpus[(i + 3) % corpus.len()].clone(),
                corpus[(i + 7) % corpus.len()].clone(),
            ]);
            data.entry(rec.dataset.clone()).or_default().push(rec);
        }
        data
    }

    fn quick_config(stage: Stage, steps: u64, seed: u64) -> TrainConfig {
        let mut c = match stage {
            Stage::Mlm => TrainConfig::mlm_desk(seed),
            Stage::ContrastivePretrain => TrainConfig::pretrain_desk(seed),
            Stage::ContrastiveFinetune => TrainConfig::finetune_desk(seed),
        };
        c.batch_size = 8;
        c.total_steps = Some(steps);
        c.warmup_steps = 2.min(steps);
        c.mrl_dims = vec![16, 4];
        c.hard_negatives = 2;
        c
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let mut c = TrainConfig::pretrain_desk(0);
        c.warmup_steps = 100;
        c.total_steps = Some(1100);
        c.peak_lr = 1e-3;
        c.schedule = Schedule::Cosine;
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(100, &c).unwrap(), 1e-3);
        let mid = lr_at(100 + 500, &c).unwrap();
        assert!((mid - 5e-4).abs() < 1e-15);
        assert!(lr_at(1100, &c).unwrap().abs() < 1e-18);
        assert_eq!(lr_at(2000, &c).unwrap(), 0.0);

        c.schedule = Schedule::Linear;
        assert!((lr_at(600, &c).unwrap() - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn paper_presets_keep_published_values() {
        let mlm = TrainConfig::mlm_paper(0);
        assert_eq!(mlm.batch_size, 4096);
        assert_eq!(mlm.peak_lr, 4e-4);
        assert_eq!(mlm.warmup_steps, 500);
        assert_eq!(mlm.total_steps, Some(10_000));
        assert_eq!(mlm.grad_accum_steps, 8);
        assert_eq!(mlm.max_grad_norm, 1.0);
        assert_eq!(mlm.mlm_probability, 0.3);
        assert_eq!(mlm.language_alpha, 0.3);

        let pre = TrainConfig::pretrain_paper(0);
        assert_eq!(pre.batch_size, 16_384);
        assert_eq!(pre.peak_lr, 8e-5);
        assert_eq!(pre.warmup_steps, 1_000);
        assert_eq!(pre.schedule, Schedule::Cosine);
        assert_eq!((pre.max_len_query, pre.max_len_doc), (32, 256));
        assert_eq!(pre.tau, 0.02);
        assert_eq!(pre.alpha, 1.0);

        let fin = TrainConfig::finetune_paper(0);
        assert_eq!(fin.batch_size, 256);
        assert_eq!(fin.peak_lr, 2e-5);
        assert_eq!(fin.warmup_steps, 400);
        assert_eq!(fin.schedule, Schedule::Linear);
        assert_eq!(fin.epochs, Some(1));
        assert_eq!((fin.max_len_query, fin.max_len_doc), (512, 512));
        assert_eq!(fin.hard_negatives, 10);
        assert_eq!(fin.mrl_dims, vec![768, 256]);
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let model = mini_model(vec![LayerKind::Dense], 1);
        let mut config = quick_config(Stage::ContrastivePretrain, 5, 1);
        config.peak_lr = 1e-9; // warmup step 0 → lr exactly 0 on first step
        config.warmup_steps = 5;
        let data = pair_data(32);
        let before = model.params.clone();
        let mut state = TrainState::fresh(model, &config);
        let batches = sample_batches(&data, 8, mix(1, 0)).unwrap();
        let m = train_step(
            &mut state,
            &StageBatch::Pairs { batch: batches[0].clone() },
            &config,
        )
        .unwrap();
        assert_eq!(m.lr, 0.0);
        for (name, t) in &before {
            assert_eq!(t.data(), state.model.params[name].data(), "{name} changed at lr 0");
        }
    }

    #[test]
    fn same_seed_reproduces_loss_trace() {
        let data = pair_data(48);
        let config = quick_config(Stage::ContrastivePretrain, 12, 7);
        let run = |seed: u64| {
            let model = mini_model(vec![LayerKind::Dense, LayerKind::Moe { experts: 2, top_k: 1 }], seed);
            let (_, metrics) =
                run_stage(&config, &StageData::Pairs(pair_data(48)), model, None).unwrap();
            metrics.iter().map(|m| m.loss).collect::<Vec<_>>()
        };
        let _ = &data;
        let a = run(3);
        let b = run(3);
        assert_eq!(a, b, "same seed must give bit-identical losses");
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let config = quick_config(Stage::ContrastivePretrain, 10, 11);
        let data = StageData::Pairs(pair_data(48));
        let model = mini_model(vec![LayerKind::Dense, LayerKind::Moe { experts: 2, top_k: 1 }], 5);

        // Uninterrupted run.
        let mut full = TrainState::fresh(model.clone(), &config);
        let full_metrics = train_loop(&config, &data, &mut full, 10, None).unwrap();

        // Interrupted at step 5, saved, reloaded, resumed.
        let mut part = TrainState::fresh(model, &config);
        let head = train_loop(&config, &data, &mut part, 5, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("state.bin");
        save_state(&ckpt, &part, &config).unwrap();
        let mut resumed = load_state(&ckpt, &config).unwrap();
        assert_eq!(resumed.step, 5);
        let tail = train_loop(&config, &data, &mut resumed, 10, None).unwrap();

        let stitched: Vec<f64> =
            head.iter().chain(tail.iter()).map(|m| m.loss).collect();
        let reference: Vec<f64> = full_metrics.iter().map(|m| m.loss).collect();
        assert_eq!(stitched, reference, "resumed losses must match bit-exactly");
        for (name, t) in &full.model.params {
            assert_eq!(t.data(), resumed.model.params[name].data(), "{name} diverged");
        }
    }

    #[test]
    fn grad_accumulation_matches_large_batch() {
        let texts = mini_corpus();
        let mut data = BTreeMap::new();
        data.insert("en".to_string(), texts.clone());
        data.insert("sw".to_string(), texts.iter().take(8).cloned().collect::<Vec<_>>());

        let mut base = TrainConfig::mlm_desk(17);
        base.batch_size = 16;
        base.total_steps = Some(6);
        base.warmup_steps = 2;

        let run = |accum: u64| {
            let mut c = base.clone();
            c.grad_accum_steps = accum;
            let model = mini_model(vec![LayerKind::Dense, LayerKind::Dense], 9);
            let (_, metrics) =
                run_stage(&c, &StageData::Mlm(data.clone()), model, None).unwrap();
            metrics.iter().map(|m| m.loss).collect::<Vec<_>>()
        };
        let whole = run(1);
        let split = run(8);
        assert_eq!(whole.len(), split.len());
        for (a, b) in whole.iter().zip(split.iter()) {
            assert!((a - b).abs() <= 1e-10, "accumulated loss drifted: {a} vs {b}");
        }
    }

    #[test]
    fn accumulation_rejected_outside_mlm_or_with_moe() {
        let model = mini_model(vec![LayerKind::Dense], 1);
        let mut c = quick_config(Stage::ContrastivePretrain, 5, 1);
        c.grad_accum_steps = 2;
        c.batch_size = 8;
        assert!(matches!(c.validate(&model.config), Err(Error::Config(_))));

        let moe_model = mini_model(vec![LayerKind::Moe { experts: 2, top_k: 1 }], 2);
        let mut m = TrainConfig::mlm_desk(1);
        m.grad_accum_steps = 2;
        m.batch_size = 8;
        assert!(matches!(m.validate(&moe_model.config), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_parameter_aborts_with_routing_dump() {
        let mut model = mini_model(vec![LayerKind::Moe { experts: 2, top_k: 1 }], 3);
        let name = "final_ln.gamma".to_string();
        model.params[&name].data_mut()[0] = f64::NAN;
        let config = quick_config(Stage::ContrastivePretrain, 3, 3);
        let data = pair_data(32);
        let batches = sample_batches(&data, 8, mix(3, 0)).unwrap();
        let mut state = TrainState::fresh(model, &config);
        let err = train_step(
            &mut state,
            &StageBatch::Pairs { batch: batches[0].clone() },
            &config,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "{msg}");
        assert!(msg.contains("routing stats"), "{msg}");
    }

    #[test]
    fn finetune_missing_negatives_is_schema_error() {
        let model = mini_model(vec![LayerKind::Dense], 4);
        let mut config = quick_config(Stage::ContrastiveFinetune, 3, 4);
        config.hard_negatives = 5; // records only carry 2
        let data = StageData::Pairs(pair_data(32));
        let err = run_stage(&config, &data, model, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn finetune_runs_and_logs_metrics() {
        let model = mini_model(vec![LayerKind::Dense, LayerKind::Moe { experts: 2, top_k: 2 }], 6);
        let config = quick_config(Stage::ContrastiveFinetune, 4, 6);
        let dir = tempfile::tempdir().unwrap();
        let (trained, metrics) =
            run_stage(&config, &StageData::Pairs(pair_data(32)), model, Some(dir.path()))
                .unwrap();
        assert_eq!(metrics.len(), 4);
        assert!(metrics.iter().all(|m| m.loss.is_finite()));
        assert_eq!(metrics[0].balance_per_layer.len(), 1);
        assert!(dir.path().join("metrics.jsonl").exists());
        assert!(dir.path().join("routing.jsonl").exists());
        assert!(dir.path().join("checkpoint.bin").exists());
        assert_eq!(trained.config.num_layers, 2);

        // Routing log lines parse and carry the schema fields.
        let routing = std::fs::read_to_string(dir.path().join("routing.jsonl")).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(routing.lines().next().unwrap()).unwrap();
        for key in ["step", "layer", "r", "p", "balance_loss"] {
            assert!(first.get(key).is_some(), "routing log missing {key}");
        }
    }

    #[test]
    fn balance_probe_moving_average_decreases() {
        let series = balance_probe(5, 200).unwrap();
        assert_eq!(series.len(), 200);
        let early = moving_average(&series, 50, 50);
        let late = moving_average(&series, 200, 50);
        assert!(
            late < early,
            "router failed to spread load: early {early:.4} late {late:.4}"
        );
    }
}
