//! Transformer biencoder: token embeddings, pre-norm blocks with RoPE
//! self-attention and dense or MoE MLP sublayers, mask-aware mean pooling,
//! and L2-normalized output embeddings. One forward implementation serves
//! both inference and training (the tape is cheap at this scale).

pub mod checkpoint;
pub mod rope;
pub mod tokenizer;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{self, LoadStats, MoeVars, RouterOutput};
use crate::numeric::{Tape, Tensor, Var};

pub use tokenizer::{Role, TokenBatch, Vocab, MASK_ID, PAD_ID, RESERVED, UNK_ID};

/// Large negative attention bias at padding keys; exp(-1e30 − max) underflows
/// to exactly zero after max subtraction.
const MASKED_BIAS: f64 = -1e30;

/// Weight initialization scale.
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Moe { experts: usize, top_k: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub layer_kinds: Vec<LayerKind>,
    /// Matryoshka output dimensions, descending, each ≤ hidden_dim.
    pub output_dims: Vec<usize>,
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl EncoderConfig {
    /// Desk-scale default: 2 layers, hidden 64, 4 heads, Matryoshka 64/16.
    pub fn desk_default(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_dim: 128,
            max_seq_len: 64,
            rope_base: default_rope_base(),
            layer_kinds: vec![LayerKind::Dense; 2],
            output_dims: vec![64, 16],
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab_size {} must exceed {} reserved tokens",
                self.vocab_size,
                RESERVED.len()
            )));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.layer_kinds.len() != self.num_layers {
            return Err(Error::Config(format!(
                "layer_kinds has {} entries for {} layers",
                self.layer_kinds.len(),
                self.num_layers
            )));
        }
        for (i, kind) in self.layer_kinds.iter().enumerate() {
            if let LayerKind::Moe { experts, top_k } = kind {
                if *experts == 0 || *top_k == 0 || top_k > experts {
                    return Err(Error::Config(format!(
                        "layer {i}: top_k {top_k} must satisfy 1 ≤ k ≤ {experts}"
                    )));
                }
            }
        }
        if self.max_seq_len == 0 || self.max_seq_len > 2048 {
            return Err(Error::Config(format!(
                "max_seq_len {} out of supported range 1..=2048",
                self.max_seq_len
            )));
        }
        if self.output_dims.is_empty() {
            return Err(Error::Config("output_dims must not be empty".into()));
        }
        for w in self.output_dims.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(format!(
                    "output_dims must be strictly descending, got {:?}",
                    self.output_dims
                )));
            }
        }
        if self.output_dims.iter().any(|&d| d == 0 || d > self.hidden_dim) {
            return Err(Error::Config(format!(
                "output_dims {:?} must lie in 1..={}",
                self.output_dims, self.hidden_dim
            )));
        }
        if self.mlp_dim == 0 {
            return Err(Error::Config("mlp_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Names and shapes of every parameter tensor, derivable from config alone.
pub fn param_specs(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_dim;
    let m = config.mlp_dim;
    let v = config.vocab_size;
    let mut specs = vec![("embed.token".to_string(), vec![v, h])];
    for (i, kind) in config.layer_kinds.iter().enumerate() {
        let p = |s: &str| format!("layer.{i}.{s}");
        specs.push((p("ln1.gamma"), vec![h]));
        specs.push((p("ln1.beta"), vec![h]));
        for proj in ["wq", "wk", "wv", "wo"] {
            specs.push((p(&format!("attn.{proj}")), vec![h, h]));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            specs.push((p(&format!("attn.{bias}")), vec![h]));
        }
        specs.push((p("ln2.gamma"), vec![h]));
        specs.push((p("ln2.beta"), vec![h]));
        match kind {
            LayerKind::Dense => {
                specs.push((p("mlp.w1"), vec![h, m]));
                specs.push((p("mlp.b1"), vec![m]));
                specs.push((p("mlp.w2"), vec![m, h]));
                specs.push((p("mlp.b2"), vec![h]));
            }
            LayerKind::Moe { experts, .. } => {
                specs.push((p("moe.router"), vec![h, *experts]));
                for e in 0..*experts {
                    let ep = |s: &str| format!("layer.{i}.moe.expert.{e}.{s}");
                    specs.push((ep("w1"), vec![h, m]));
                    specs.push((ep("b1"), vec![m]));
                    specs.push((ep("w2"), vec![m, h]));
                    specs.push((ep("b2"), vec![h]));
                }
            }
        }
    }
    specs.push(("final_ln.gamma".to_string(), vec![h]));
    specs.push(("final_ln.beta".to_string(), vec![h]));
    specs.push(("mlm_head.w".to_string(), vec![h, v]));
    specs.push(("mlm_head.b".to_string(), vec![v]));
    specs
}

/// Full parameter set plus tokenizer for the biencoder.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: IndexMap<String, Tensor>,
}

impl EncoderModel {
    /// Fresh random initialization: N(0, 0.02) weights, zero biases, unit
    /// layer-norm scales, zero routers.
    pub fn init<R: Rng>(config: EncoderConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but config declares {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut params = IndexMap::new();
        for (name, shape) in param_specs(&config) {
            let t = if name.ends_with(".gamma") {
                Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])?
            } else if name.ends_with(".beta")
                || name.contains(".b")
                || name.contains("moe.router")
            {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, INIT_STD, rng)
            };
            params.insert(name, t.with_grad());
        }
        Ok(EncoderModel { config, vocab, params })
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Tokenize a batch of texts for the given role, truncating to `max_len`
    /// (bounded by config.max_seq_len).
    pub fn tokenize_batch(
        &self,
        texts: &[impl AsRef<str>],
        role: Role,
        max_len: usize,
    ) -> Result<TokenBatch> {
        let cap = max_len.min(self.config.max_seq_len);
        let rows: Result<Vec<Vec<usize>>> =
            texts.iter().map(|t| self.vocab.encode(t.as_ref(), role, cap)).collect();
        TokenBatch::from_rows(&rows?, Some(role))
    }
}

/// Differentiable outcome of one encode pass.
pub struct EncodeTrace {
    /// [batch × hidden], unit rows.
    pub embeddings: Var,
    pub moe_layers: Vec<MoeLayerTrace>,
}

/// Per-MoE-layer record from one traced forward pass.
pub struct MoeLayerTrace {
    pub layer_index: usize,
    /// Differentiable mean routing probability over non-padding tokens.
    pub p_mean: Var,
    /// Σᵢ rᵢ·pᵢ scalar var; gradient flows through p only.
    pub balance_raw: Var,
    pub stats: LoadStats,
    pub router_output: RouterOutput,
}

/// Differentiable outcome of one MLM pass.
pub struct MlmTrace {
    /// [batch·seq × vocab] logits over the vocabulary.
    pub logits: Var,
    pub moe_layers: Vec<MoeLayerTrace>,
}

fn validate_batch(model: &EncoderModel, batch: &TokenBatch) -> Result<()> {
    if let Some(&bad) = batch.token_ids.iter().find(|&&id| id >= model.config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab size {}",
            model.config.vocab_size
        )));
    }
    if batch.seq > model.config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.seq, model.config.max_seq_len
        )));
    }
    Ok(())
}

/// Shared block stack: embeddings → pre-norm attention/MLP blocks → final
/// layer norm. Returns hidden states as [batch·seq × hidden] rows.
fn hidden_states_traced(
    model: &EncoderModel,
    tape: &mut Tape,
    batch: &TokenBatch,
) -> Result<(Var, Vec<MoeLayerTrace>)> {
    validate_batch(model, batch)?;
    let cfg = &model.config;
    let (b, s, h) = (batch.batch, batch.seq, cfg.hidden_dim);
    let heads = cfg.num_heads;
    let d = cfg.head_dim();
    let rows = b * s;

    let ln = |tape: &mut Tape, x: Var, gamma: Var, beta: Var| -> Result<Var> {
        let n = tape.layer_norm(x);
        let scaled = tape.mul_row(n, gamma)?;
        tape.add_row(scaled, beta)
    };

    let table = tape.param("embed.token", model.param("embed.token"));
    let mut x = tape.embed_lookup(table, &batch.token_ids)?; // [rows, h]

    let positions: Vec<f64> = (0..s).map(|i| i as f64).collect();
    let attn_bias: Vec<f64> =
        batch.mask.iter().map(|&m| if m { 0.0 } else { MASKED_BIAS }).collect();
    let scale = 1.0 / (d as f64).sqrt();

    let mut moe_layers = Vec::new();
    for (i, kind) in cfg.layer_kinds.iter().enumerate() {
        let p = |s: &str| format!("layer.{i}.{s}");
        let g1 = tape.param(&p("ln1.gamma"), model.param(&p("ln1.gamma")));
        let b1 = tape.param(&p("ln1.beta"), model.param(&p("ln1.beta")));
        let xn = ln(tape, x, g1, b1)?;

        // Attention: project, split heads, rotate, score, combine.
        let mut qkv = Vec::with_capacity(3);
        for (w_name, b_name) in [("attn.wq", "attn.bq"), ("attn.wk", "attn.bk"), ("attn.wv", "attn.bv")] {
            let w = tape.param(&p(w_name), model.param(&p(w_name)));
            let bias = tape.param(&p(b_name), model.param(&p(b_name)));
            let proj = tape.matmul(xn, w)?;
            let proj = tape.add_row(proj, bias)?;
            let split = tape.reshape(proj, vec![b, s, heads, d])?;
            let headed = tape.permute(split, &[0, 2, 1, 3])?; // [b,heads,s,d]
            qkv.push(headed);
        }
        let (q, k, v) = (qkv[0], qkv[1], qkv[2]);
        let q = tape.rope(q, &positions, cfg.rope_base)?;
        let k = tape.rope(k, &positions, cfg.rope_base)?;

        let qf = tape.reshape(q, vec![b * heads, s, d])?;
        let kf = tape.reshape(k, vec![b * heads, s, d])?;
        let vf = tape.reshape(v, vec![b * heads, s, d])?;
        let scores = tape.bmm(qf, kf, true)?; // [b*heads, s, s]
        let scores = tape.scale(scores, scale);
        let scores = tape.reshape(scores, vec![b, heads, s, s])?;
        let scores = tape.attn_bias(scores, &attn_bias)?;
        let probs = tape.softmax_last(scores);
        let pf = tape.reshape(probs, vec![b * heads, s, s])?;
        let ctx = tape.bmm(pf, vf, false)?; // [b*heads, s, d]
        let ctx = tape.reshape(ctx, vec![b, heads, s, d])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?; // [b,s,heads,d]
        let ctx = tape.reshape(ctx, vec![rows, h])?;
        let wo = tape.param(&p("attn.wo"), model.param(&p("attn.wo")));
        let bo = tape.param(&p("attn.bo"), model.param(&p("attn.bo")));
        let attn_out = tape.matmul(ctx, wo)?;
        let attn_out = tape.add_row(attn_out, bo)?;
        x = tape.add(x, attn_out)?;

        // MLP / MoE sublayer.
        let g2 = tape.param(&p("ln2.gamma"), model.param(&p("ln2.gamma")));
        let b2 = tape.param(&p("ln2.beta"), model.param(&p("ln2.beta")));
        let xn2 = ln(tape, x, g2, b2)?;
        let sub_out = match kind {
            LayerKind::Dense => {
                let w1 = tape.param(&p("mlp.w1"), model.param(&p("mlp.w1")));
                let b1m = tape.param(&p("mlp.b1"), model.param(&p("mlp.b1")));
                let w2 = tape.param(&p("mlp.w2"), model.param(&p("mlp.w2")));
                let b2m = tape.param(&p("mlp.b2"), model.param(&p("mlp.b2")));
                let h1 = tape.matmul(xn2, w1)?;
                let h1 = tape.add_row(h1, b1m)?;
                let act = tape.gelu(h1);
                let h2 = tape.matmul(act, w2)?;
                tape.add_row(h2, b2m)?
            }
            LayerKind::Moe { experts, top_k } => {
                let router = tape.param(&p("moe.router"), model.param(&p("moe.router")));
                let expert_vars: Vec<(Var, Var, Var, Var)> = (0..*experts)
                    .map(|e| {
                        let ep = |s: &str| format!("layer.{i}.moe.expert.{e}.{s}");
                        (
                            tape.param(&ep("w1"), model.param(&ep("w1"))),
                            tape.param(&ep("b1"), model.param(&ep("b1"))),
                            tape.param(&ep("w2"), model.param(&ep("w2"))),
                            tape.param(&ep("b2"), model.param(&ep("b2"))),
                        )
                    })
                    .collect();
                let vars = MoeVars { router, experts: expert_vars, top_k: *top_k };
                let core = moe::moe_forward_traced(tape, xn2, &vars, &batch.mask)?;
                moe_layers.push(MoeLayerTrace {
                    layer_index: i,
                    p_mean: core.p_mean,
                    balance_raw: core.balance_raw,
                    stats: core.stats,
                    router_output: core.router_output,
                });
                core.output
            }
        };
        x = tape.add(x, sub_out)?;
    }

    let gf = tape.param("final_ln.gamma", model.param("final_ln.gamma"));
    let bf = tape.param("final_ln.beta", model.param("final_ln.beta"));
    let x = ln(tape, x, gf, bf)?;
    Ok((x, moe_layers))
}

/// Traced encode: mean-pooled, L2-normalized embeddings plus routing traces.
pub fn encode_traced(
    model: &EncoderModel,
    tape: &mut Tape,
    batch: &TokenBatch,
) -> Result<EncodeTrace> {
    let (x, moe_layers) = hidden_states_traced(model, tape, batch)?;
    let x3 = tape.reshape(x, vec![batch.batch, batch.seq, model.config.hidden_dim])?;
    let pooled = tape.masked_mean_pool(x3, &batch.mask)?;
    let embeddings = tape.l2_normalize(pooled);
    Ok(EncodeTrace { embeddings, moe_layers })
}

/// Embed a token batch. Returns [batch × hidden] unit-norm embeddings and
/// per-MoE-layer load statistics over non-padding tokens.
pub fn encode(model: &EncoderModel, batch: &TokenBatch) -> Result<(Tensor, Vec<LoadStats>)> {
    let mut tape = Tape::new();
    let trace = encode_traced(model, &mut tape, batch)?;
    let stats = trace.moe_layers.into_iter().map(|l| l.stats).collect();
    Ok((tape.to_tensor(trace.embeddings), stats))
}

/// Traced MLM forward: per-token vocabulary logits.
pub fn mlm_traced(model: &EncoderModel, tape: &mut Tape, batch: &TokenBatch) -> Result<MlmTrace> {
    let (x, moe_layers) = hidden_states_traced(model, tape, batch)?;
    let w = tape.param("mlm_head.w", model.param("mlm_head.w"));
    let bias = tape.param("mlm_head.b", model.param("mlm_head.b"));
    let logits = tape.matmul(x, w)?;
    let logits = tape.add_row(logits, bias)?;
    Ok(MlmTrace { logits, moe_layers })
}

/// Per-token vocabulary logits, [batch × seq × vocab].
pub fn mlm_forward(model: &EncoderModel, batch: &TokenBatch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let trace = mlm_traced(model, &mut tape, batch)?;
    let shaped = tape.reshape(
        trace.logits,
        vec![batch.batch, batch.seq, model.config.vocab_size],
    )?;
    Ok(tape.to_tensor(shaped))
}

/// Keep the first `dim` coordinates of each embedding row and re-normalize.
/// `dim` must be one of the configured Matryoshka dimensions; at full width
/// the input is returned unchanged (already unit norm).
pub fn truncate_embedding(config: &EncoderConfig, e: &Tensor, dim: usize) -> Result<Tensor> {
    if !config.output_dims.contains(&dim) {
        return Err(Error::Config(format!(
            "dimension {dim} not in configured output_dims {:?}",
            config.output_dims
        )));
    }
    let width = e.last_dim();
    if dim == width {
        return Ok(e.clone());
    }
    let rows = e.rows();
    let mut out = vec![0.0; rows * dim];
    for r in 0..rows {
        out[r * dim..(r + 1) * dim].copy_from_slice(&e.row(r)[..dim]);
    }
    Ok(Tensor::new(vec![rows, dim], out)?.l2_normalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_model(layer_kinds: Vec<LayerKind>, seed: u64) -> EncoderModel {
        let corpus =
            ["the quick brown fox", "jumps over the lazy dog", "pack my box with five dozen jugs"];
        let vocab = Vocab::build(corpus, 32).unwrap();
        let config = EncoderConfig {
            vocab_size: vocab.len(),
            hidden_dim: 16,
            num_layers: layer_kinds.len(),
            num_heads: 2,
            mlp_dim: 24,
            max_seq_len: 16,
            rope_base: 10_000.0,
            layer_kinds,
            output_dims: vec![16, 4],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderModel::init(config, vocab, &mut rng).unwrap()
    }

    fn query_batch(model: &EncoderModel, texts: &[&str]) -> TokenBatch {
        model.tokenize_batch(texts, Role::Query, 16).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let model = tiny_model(vec![LayerKind::Dense, LayerKind::Moe { experts: 2, top_k: 1 }], 1);
        let batch = query_batch(&model, &["the quick fox", "lazy dog", "five dozen jugs over"]);
        let (emb, stats) = encode(&model, &batch).unwrap();
        assert_eq!(stats.len(), 1);
        for r in 0..3 {
            let norm: f64 = emb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn duplicated_rows_give_identical_embeddings() {
        let model = tiny_model(vec![LayerKind::Dense, LayerKind::Dense], 2);
        let batch = query_batch(&model, &["the quick fox", "the quick fox"]);
        let (emb, _) = encode(&model, &batch).unwrap();
        assert_eq!(emb.row(0), emb.row(1));
    }

    #[test]
    fn permuting_rows_permutes_embeddings() {
        let model = tiny_model(vec![LayerKind::Dense, LayerKind::Moe { experts: 4, top_k: 2 }], 3);
        let texts = ["the quick fox", "lazy dog jumps", "box with jugs"];
        let fwd = query_batch(&model, &texts);
        let rev = query_batch(&model, &["box with jugs", "lazy dog jumps", "the quick fox"]);
        let (a, _) = encode(&model, &fwd).unwrap();
        let (b, _) = encode(&model, &rev).unwrap();
        assert_eq!(a.row(0), b.row(2));
        assert_eq!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(0));
    }

    #[test]
    fn appended_padding_leaves_embeddings_unchanged() {
        let model = tiny_model(vec![LayerKind::Dense, LayerKind::Moe { experts: 2, top_k: 2 }], 4);
        let ids = model.vocab.encode("the quick fox", Role::Document, 16).unwrap();
        let short = TokenBatch::from_rows(&[ids.clone()], Some(Role::Document)).unwrap();
        // Hand-pad the same row three positions further.
        let mut padded_ids = vec![PAD_ID; ids.len() + 3];
        padded_ids[..ids.len()].copy_from_slice(&ids);
        let mut mask = vec![false; ids.len() + 3];
        mask[..ids.len()].fill(true);
        let padded = TokenBatch {
            token_ids: padded_ids,
            mask,
            batch: 1,
            seq: ids.len() + 3,
            role: Some(Role::Document),
        };
        let (a, _) = encode(&model, &short).unwrap();
        let (b, _) = encode(&model, &padded).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn single_token_pooling_returns_that_state() {
        // With one token, pooling is the identity; the embedding is just the
        // normalized final hidden state, and encoding twice is bit-identical.
        let model = tiny_model(vec![LayerKind::Dense], 5);
        let batch = TokenBatch::from_rows(&[vec![7]], None).unwrap();
        let (a, _) = encode(&model, &batch).unwrap();
        let (b, _) = encode(&model, &batch).unwrap();
        assert_eq!(a.data(), b.data());
        let norm: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn out_of_range_token_id_is_input_error() {
        let model = tiny_model(vec![LayerKind::Dense], 6);
        let batch = TokenBatch::from_rows(&[vec![model.config.vocab_size]], None).unwrap();
        assert!(matches!(encode(&model, &batch), Err(Error::Input(_))));
    }

    #[test]
    fn truncate_identity_at_full_width() {
        let model = tiny_model(vec![LayerKind::Dense], 7);
        let batch = query_batch(&model, &["quick brown fox", "dog"]);
        let (emb, _) = encode(&model, &batch).unwrap();
        let full = truncate_embedding(&model.config, &emb, 16).unwrap();
        assert_eq!(full.data(), emb.data());

        let small = truncate_embedding(&model.config, &emb, 4).unwrap();
        assert_eq!(small.shape(), &[2, 4]);
        for r in 0..2 {
            let norm: f64 = small.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
            let cos: f64 = small.row(0).iter().zip(small.row(1).iter()).map(|(a, b)| a * b).sum();
            assert!((-1.0..=1.0).contains(&cos));
        }
    }

    #[test]
    fn truncate_unknown_dim_is_config_error() {
        let model = tiny_model(vec![LayerKind::Dense], 8);
        let emb = Tensor::zeros(vec![1, 16]);
        assert!(matches!(
            truncate_embedding(&model.config, &emb, 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mlm_logits_have_vocab_shape() {
        let model = tiny_model(vec![LayerKind::Dense, LayerKind::Dense], 9);
        let batch = query_batch(&model, &["quick brown fox", "dog"]);
        let logits = mlm_forward(&model, &batch).unwrap();
        assert_eq!(logits.shape(), &[2, batch.seq, model.config.vocab_size]);
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let model = tiny_model(vec![LayerKind::Dense], 10);
        let mut bad = model.config.clone();
        bad.num_heads = 3;
        assert!(bad.validate().is_err());

        let mut odd_head = model.config.clone();
        odd_head.num_heads = 8; // head_dim 2 ok; hidden 16/8=2 even → fine
        assert!(odd_head.validate().is_ok());
        odd_head.hidden_dim = 24;
        odd_head.num_heads = 8; // head_dim 3, odd
        assert!(odd_head.validate().is_err());

        let mut bad_dims = model.config.clone();
        bad_dims.output_dims = vec![4, 16];
        assert!(bad_dims.validate().is_err());
    }
}
