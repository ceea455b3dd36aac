//! Mixture-of-Experts sublayer: top-k token-choice routing with renormalized
//! combine weights, sparse expert dispatch, the load-balancing auxiliary
//! loss, and dense→MoE upcycling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::encoder::{param_specs, EncoderModel, LayerKind};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Per-token routing decision for one MoE layer.
#[derive(Debug, Clone)]
pub struct RouterOutput {
    /// Row-major [tokens × k]; the k largest-probability experts per token,
    /// highest first, ties broken by lower expert index.
    pub expert_indices: Vec<usize>,
    /// Renormalized top-k probabilities, rows sum to 1. [tokens × k]
    pub combine_weights: Tensor,
    /// Full softmax over router logits. [tokens × E]
    pub full_probs: Tensor,
    pub top_k: usize,
}

/// Routing statistics over the non-padding tokens of a batch.
#[derive(Debug, Clone, Serialize)]
pub struct LoadStats {
    /// Fraction of routed token-slots assigned to each expert; sums to 1.
    pub r: Vec<f64>,
    /// Mean routing probability per expert; sums to 1.
    pub p: Vec<f64>,
    pub token_count: usize,
}

/// Parameters of one MoE layer in standalone form.
#[derive(Debug, Clone)]
pub struct MoeLayerParams {
    /// [hidden_dim × E]; logits = hidden · router_weight.
    pub router_weight: Tensor,
    pub experts: Vec<ExpertParams>,
    pub top_k: usize,
}

/// One expert MLP: two linear maps around a GELU.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MoeLayerParams {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    fn validate(&self) -> Result<()> {
        let e = self.num_experts();
        if e == 0 || self.top_k == 0 || self.top_k > e {
            return Err(Error::Config(format!(
                "top_k {} must satisfy 1 ≤ k ≤ {} experts",
                self.top_k, e
            )));
        }
        Ok(())
    }
}

/// Top-k selection per row with deterministic tie-breaking (lower index
/// first), returning rank-ordered indices flattened to [tokens*k].
pub(crate) fn select_top_k(probs: &[f64], tokens: usize, experts: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens * k);
    let mut order: Vec<usize> = Vec::with_capacity(experts);
    for t in 0..tokens {
        let row = &probs[t * experts..(t + 1) * experts];
        order.clear();
        order.extend(0..experts);
        order.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("router probabilities are finite").then(a.cmp(&b))
        });
        out.extend_from_slice(&order[..k]);
    }
    out
}

/// Route tokens through the softmax router and renormalize the selected
/// probabilities so each token's combine weights sum to 1.
pub fn route(hidden: &Tensor, params: &MoeLayerParams) -> Result<RouterOutput> {
    params.validate()?;
    let logits = hidden.matmul(&params.router_weight)?;
    let probs = logits.softmax(1)?;
    let tokens = hidden.shape()[0];
    let e = params.num_experts();
    let k = params.top_k;
    let idx = select_top_k(probs.data(), tokens, e, k);
    let mut weights = vec![0.0; tokens * k];
    for t in 0..tokens {
        let mut sum = 0.0;
        for slot in 0..k {
            sum += probs.data()[t * e + idx[t * k + slot]];
        }
        for slot in 0..k {
            weights[t * k + slot] = probs.data()[t * e + idx[t * k + slot]] / sum;
        }
    }
    Ok(RouterOutput {
        expert_indices: idx,
        combine_weights: Tensor::new(vec![tokens, k], weights)?,
        full_probs: probs,
        top_k: k,
    })
}

/// Differentiable pieces of one traced MoE layer.
pub(crate) struct MoeVars {
    pub router: Var,
    /// (w1, b1, w2, b2) per expert.
    pub experts: Vec<(Var, Var, Var, Var)>,
    pub top_k: usize,
}

/// Outcome of one traced MoE layer: the combined output and everything the
/// balance loss needs (p differentiable, r a constant statistic).
pub(crate) struct MoeTraceCore {
    pub output: Var,
    /// Mean routing probability over non-padding tokens; [E], differentiable.
    pub p_mean: Var,
    /// Σᵢ rᵢ·pᵢ as a scalar var (gradient flows through p only).
    pub balance_raw: Var,
    pub stats: LoadStats,
    pub router_output: RouterOutput,
}

/// Forward one MoE layer on the tape. `x` is [tokens × hidden]; `valid`
/// flags the non-padding tokens that enter the load statistics. Dispatch is
/// sparse: each expert runs only on its assigned tokens.
pub(crate) fn moe_forward_traced(
    tape: &mut Tape,
    x: Var,
    vars: &MoeVars,
    valid: &[bool],
) -> Result<MoeTraceCore> {
    let tokens = tape.shape(x)[0];
    let e = vars.experts.len();
    let k = vars.top_k;
    if k == 0 || k > e {
        return Err(Error::Config(format!("top_k {k} must satisfy 1 ≤ k ≤ {e} experts")));
    }
    if valid.len() != tokens {
        return Err(Error::Dimension(format!(
            "moe_forward: {} validity flags for {tokens} tokens",
            valid.len()
        )));
    }

    let logits = tape.matmul(x, vars.router)?;
    let probs = tape.softmax_last(logits);
    let probs_vals = tape.value(probs).to_vec();
    let idx = select_top_k(&probs_vals, tokens, e, k);

    let selected = tape.select_cols_per_row(probs, &idx, k)?;
    let combine = tape.normalize_rows_sum(selected);

    // Sparse dispatch: gather each expert's tokens, run its MLP, scale by the
    // combine weight, scatter back.
    let mut output: Option<Var> = None;
    for (expert, &(w1, b1, w2, b2)) in vars.experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut weight_slots = Vec::new();
        for t in 0..tokens {
            for slot in 0..k {
                if idx[t * k + slot] == expert {
                    rows.push(t);
                    weight_slots.push(t * k + slot);
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let xe = tape.gather_rows(x, &rows)?;
        let h1 = tape.matmul(xe, w1)?;
        let h1 = tape.add_row(h1, b1)?;
        let act = tape.gelu(h1);
        let h2 = tape.matmul(act, w2)?;
        let h2 = tape.add_row(h2, b2)?;
        let w = tape.gather_elems(combine, &weight_slots)?;
        let weighted = tape.mul_col_scalar(h2, w)?;
        let contrib = tape.scatter_add_rows(weighted, &rows, tokens)?;
        output = Some(match output {
            Some(acc) => tape.add(acc, contrib)?,
            None => contrib,
        });
    }
    let output = output.expect("every token routes to at least one expert");

    // Load statistics over non-padding tokens only.
    let valid_rows: Vec<usize> = (0..tokens).filter(|&t| valid[t]).collect();
    if valid_rows.is_empty() {
        return Err(Error::Input("moe_forward: no valid tokens for load statistics".into()));
    }
    let probs_valid = tape.gather_rows(probs, &valid_rows)?;
    let p_mean = tape.mean_axis0(probs_valid);

    let mut counts = vec![0usize; e];
    for &t in &valid_rows {
        for slot in 0..k {
            counts[idx[t * k + slot]] += 1;
        }
    }
    let denom = (valid_rows.len() * k) as f64;
    let r: Vec<f64> = counts.iter().map(|&c| c as f64 / denom).collect();
    let balance_raw = tape.dot_const(p_mean, &r)?;

    let stats = LoadStats {
        r: r.clone(),
        p: tape.value(p_mean).to_vec(),
        token_count: valid_rows.len(),
    };

    // Renormalized weights for the standalone routing report.
    let mut weights = vec![0.0; tokens * k];
    for t in 0..tokens {
        let mut sum = 0.0;
        for slot in 0..k {
            sum += probs_vals[t * e + idx[t * k + slot]];
        }
        for slot in 0..k {
            weights[t * k + slot] = probs_vals[t * e + idx[t * k + slot]] / sum;
        }
    }
    let router_output = RouterOutput {
        expert_indices: idx,
        combine_weights: Tensor::new(vec![tokens, k], weights)?,
        full_probs: Tensor::new(vec![tokens, e], probs_vals)?,
        top_k: k,
    };

    Ok(MoeTraceCore { output, p_mean, balance_raw, stats, router_output })
}

/// Eager MoE layer forward. `valid` marks tokens that count toward load
/// statistics; `None` counts every token.
pub fn moe_forward(
    hidden: &Tensor,
    params: &MoeLayerParams,
    valid: Option<&[bool]>,
) -> Result<(Tensor, LoadStats)> {
    params.validate()?;
    let tokens = hidden.shape()[0];
    let all_valid;
    let valid = match valid {
        Some(v) => v,
        None => {
            all_valid = vec![true; tokens];
            &all_valid
        }
    };
    let mut tape = Tape::new();
    let x = tape.input(hidden);
    let router = tape.input(&params.router_weight);
    let experts: Vec<(Var, Var, Var, Var)> = params
        .experts
        .iter()
        .map(|e| (tape.input(&e.w1), tape.input(&e.b1), tape.input(&e.w2), tape.input(&e.b2)))
        .collect();
    let vars = MoeVars { router, experts, top_k: params.top_k };
    let core = moe_forward_traced(&mut tape, x, &vars, valid)?;
    Ok((tape.to_tensor(core.output), core.stats))
}

/// Balance objective α · Σᵢ rᵢ·pᵢ. Uniform routing probabilities give
/// exactly α/E; concentrating both r and p on one expert approaches α.
pub fn load_balance_loss(stats: &LoadStats, alpha: f64) -> f64 {
    alpha * stats.r.iter().zip(stats.p.iter()).map(|(r, p)| r * p).sum::<f64>()
}

/// Layer indices for "every alternate MLP layer, starting from the second":
/// {1, 3, 5, …}.
pub fn alternate_from_second(num_layers: usize) -> Vec<usize> {
    (1..num_layers).step_by(2).collect()
}

/// Replicate the dense MLP of each chosen layer into `experts` identical
/// experts behind a zero-initialized router (plus optional symmetry-breaking
/// noise). With renormalized combine weights the upcycled model computes the
/// same function as the dense model.
pub fn upcycle(
    dense: &EncoderModel,
    moe_layer_indices: &[usize],
    experts: usize,
    top_k: usize,
    router_noise: f64,
    seed: u64,
) -> Result<EncoderModel> {
    if experts == 0 || top_k == 0 || top_k > experts {
        return Err(Error::Config(format!(
            "upcycle: top_k {top_k} must satisfy 1 ≤ k ≤ {experts} experts"
        )));
    }
    let mut config = dense.config.clone();
    for &i in moe_layer_indices {
        match config.layer_kinds.get(i) {
            Some(LayerKind::Dense) => {
                config.layer_kinds[i] = LayerKind::Moe { experts, top_k };
            }
            Some(LayerKind::Moe { .. }) => {
                return Err(Error::Config(format!("upcycle: layer {i} is already MoE")));
            }
            None => {
                return Err(Error::Config(format!(
                    "upcycle: layer index {i} out of range for {} layers",
                    config.layer_kinds.len()
                )));
            }
        }
    }
    config.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, router_noise.max(f64::MIN_POSITIVE))
        .expect("router noise stddev is finite");

    let mut params = indexmap::IndexMap::new();
    for (name, shape) in param_specs(&config) {
        let tensor = if let Some(existing) = dense.params.get(&name) {
            existing.clone()
        } else if name.contains(".moe.router") {
            let mut t = Tensor::zeros(shape);
            if router_noise > 0.0 {
                for v in t.data_mut() {
                    *v = noise.sample(&mut rng);
                }
            }
            t
        } else if let Some((layer, field)) = parse_expert_param(&name) {
            dense
                .params
                .get(&format!("layer.{layer}.mlp.{field}"))
                .cloned()
                .ok_or_else(|| Error::Config(format!("upcycle: missing dense MLP for {name}")))?
        } else {
            return Err(Error::Config(format!("upcycle: unexpected parameter {name}")));
        };
        params.insert(name, tensor.with_grad());
    }

    Ok(EncoderModel { config, vocab: dense.vocab.clone(), params })
}

fn parse_expert_param(name: &str) -> Option<(usize, &str)> {
    // layer.{i}.moe.expert.{e}.{field}
    let mut parts = name.split('.');
    if parts.next()? != "layer" {
        return None;
    }
    let layer: usize = parts.next()?.parse().ok()?;
    if parts.next()? != "moe" || parts.next()? != "expert" {
        return None;
    }
    let _expert: usize = parts.next()?.parse().ok()?;
    let field = parts.next()?;
    Some((layer, field))
}

/// Total vs active (used per forward pass) parameter counts: the dense part
/// plus k of E experts at each MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub active: usize,
}

pub fn parameter_counts(model: &EncoderModel) -> ParamCounts {
    let total: usize = model.params.values().map(Tensor::numel).sum();
    let mut inactive = 0usize;
    for (i, kind) in model.config.layer_kinds.iter().enumerate() {
        if let LayerKind::Moe { experts, top_k } = kind {
            let per_expert: usize = model
                .params
                .iter()
                .filter(|(name, _)| name.starts_with(&format!("layer.{i}.moe.expert.0.")))
                .map(|(_, t)| t.numel())
                .sum();
            inactive += (experts - top_k) * per_expert;
        }
    }
    ParamCounts { total, active: total - inactive }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_params(hidden: usize, mlp: usize, e: usize, k: usize, seed: u64) -> MoeLayerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let experts = (0..e)
            .map(|_| ExpertParams {
                w1: Tensor::randn(vec![hidden, mlp], 0.5, &mut rng),
                b1: Tensor::randn(vec![mlp], 0.5, &mut rng),
                w2: Tensor::randn(vec![mlp, hidden], 0.5, &mut rng),
                b2: Tensor::randn(vec![hidden], 0.5, &mut rng),
            })
            .collect();
        MoeLayerParams {
            router_weight: Tensor::randn(vec![hidden, e], 1.0, &mut rng),
            experts,
            top_k: k,
        }
    }

    fn expert_mlp(x: &Tensor, e: &ExpertParams) -> Tensor {
        let mut h = x.matmul(&e.w1).unwrap();
        let cols = e.b1.numel();
        for r in 0..h.shape()[0] {
            for c in 0..cols {
                h.data_mut()[r * cols + c] += e.b1.data()[c];
            }
        }
        let a = h.gelu();
        let mut out = a.matmul(&e.w2).unwrap();
        let cols = e.b2.numel();
        for r in 0..out.shape()[0] {
            for c in 0..cols {
                out.data_mut()[r * cols + c] += e.b2.data()[c];
            }
        }
        out
    }

    #[test]
    fn route_single_pick_renormalizes_to_one() {
        let mut params = toy_params(4, 6, 8, 1, 1);
        // Force a unique max at expert 3 regardless of hidden input.
        params.router_weight = Tensor::zeros(vec![4, 8]);
        params.router_weight.data_mut()[3] = 10.0; // row 0, col 3
        let hidden = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = route(&hidden, &params).unwrap();
        assert_eq!(out.expert_indices, vec![3]);
        assert_eq!(out.combine_weights.data(), &[1.0]);
    }

    #[test]
    fn route_equal_logits_tie_break_low_index() {
        let mut params = toy_params(4, 6, 2, 2, 2);
        params.router_weight = Tensor::zeros(vec![4, 2]);
        let hidden = Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.5, 0.9]).unwrap();
        let out = route(&hidden, &params).unwrap();
        assert_eq!(out.expert_indices, vec![0, 1]);
        assert_eq!(out.combine_weights.data(), &[0.5, 0.5]);
    }

    #[test]
    fn route_matches_full_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = toy_params(6, 8, 8, 2, 3);
        let hidden = Tensor::randn(vec![5, 6], 1.0, &mut rng);
        let out = route(&hidden, &params).unwrap();

        // Independent recomputation: per-row softmax by direct summation,
        // explicit arg-sort, rescale the two picked probabilities.
        let logits = hidden.matmul(&params.router_weight).unwrap();
        for t in 0..5 {
            let row = logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();
            let mut order: Vec<usize> = (0..8).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let picked = &order[..2];
            assert_eq!(&out.expert_indices[t * 2..t * 2 + 2], picked);
            let mass = probs[picked[0]] + probs[picked[1]];
            for slot in 0..2 {
                let expect = probs[picked[slot]] / mass;
                let got = out.combine_weights.data()[t * 2 + slot];
                assert!((got - expect).abs() < 1e-12);
            }
            // Full probs are the plain softmax.
            for (a, b) in out.full_probs.row(t).iter().zip(probs.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn route_rejects_k_above_e() {
        let params = toy_params(4, 6, 2, 3, 4);
        let hidden = Tensor::zeros(vec![1, 4]);
        assert!(matches!(route(&hidden, &params), Err(Error::Config(_))));
    }

    #[test]
    fn combine_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 1..=4 {
            let params = toy_params(6, 8, 4, k, k as u64);
            let hidden = Tensor::randn(vec![7, 6], 2.0, &mut rng);
            let out = route(&hidden, &params).unwrap();
            for t in 0..7 {
                let s: f64 = out.combine_weights.row(t).iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
                let ps: f64 = out.full_probs.row(t).iter().sum();
                assert!((ps - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn argmax_stable_under_logit_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = toy_params(6, 8, 8, 2, 6);
        let hidden = Tensor::randn(vec![9, 6], 1.0, &mut rng);
        let base = route(&hidden, &params).unwrap();
        params.router_weight = params.router_weight.scale(3.5);
        let scaled = route(&hidden, &params).unwrap();
        assert_eq!(base.expert_indices, scaled.expert_indices);
    }

    #[test]
    fn k_equals_e_uniform_logits_is_plain_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = toy_params(5, 7, 3, 3, 7);
        params.router_weight = Tensor::zeros(vec![5, 3]);
        let hidden = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let (out, _) = moe_forward(&hidden, &params, None).unwrap();

        let mut avg = Tensor::zeros(vec![4, 5]);
        for e in &params.experts {
            let y = expert_mlp(&hidden, e);
            for (a, b) in avg.data_mut().iter_mut().zip(y.data().iter()) {
                *a += b / 3.0;
            }
        }
        for (a, b) in out.data().iter().zip(avg.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_experts_make_routing_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = toy_params(5, 7, 4, 2, 8);
        let first = params.experts[0].clone();
        for e in params.experts.iter_mut() {
            *e = first.clone();
        }
        let hidden = Tensor::randn(vec![6, 5], 1.0, &mut rng);
        let (out, _) = moe_forward(&hidden, &params, None).unwrap();
        let direct = expert_mlp(&hidden, &first);
        for (a, b) in out.data().iter().zip(direct.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn k1_matches_per_token_argmax_dispatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = toy_params(5, 7, 4, 1, 9);
        let hidden = Tensor::randn(vec![6, 5], 1.0, &mut rng);
        let (out, _) = moe_forward(&hidden, &params, None).unwrap();
        let routing = route(&hidden, &params).unwrap();
        for t in 0..6 {
            let expert = routing.expert_indices[t];
            let row = Tensor::new(vec![1, 5], hidden.row(t).to_vec()).unwrap();
            let y = expert_mlp(&row, &params.experts[expert]);
            for (a, b) in out.row(t).iter().zip(y.data().iter()) {
                assert!((a - b).abs() < 1e-12, "token {t} differs");
            }
        }
    }

    #[test]
    fn balance_loss_uniform_is_alpha_over_e() {
        let mut params = toy_params(4, 6, 8, 2, 10);
        params.router_weight = Tensor::zeros(vec![4, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let hidden = Tensor::randn(vec![16, 4], 1.0, &mut rng);
        let (_, stats) = moe_forward(&hidden, &params, None).unwrap();
        assert_eq!(load_balance_loss(&stats, 1.0), 0.125);
    }

    #[test]
    fn balance_loss_concentration_approaches_alpha() {
        let mut params = toy_params(4, 6, 8, 1, 11);
        params.router_weight = Tensor::zeros(vec![4, 8]);
        params.router_weight.data_mut()[2] = 60.0; // all mass on expert 2
        let hidden = Tensor::new(vec![3, 4], vec![1.0, 0.0, 0.0, 0.0].repeat(3)).unwrap();
        let (_, stats) = moe_forward(&hidden, &params, None).unwrap();
        let loss = load_balance_loss(&stats, 1.0);
        assert!(loss > 0.99, "expected near-α loss, got {loss}");
    }

    #[test]
    fn padding_tokens_are_excluded_from_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = toy_params(5, 7, 4, 2, 12);
        let hidden = Tensor::randn(vec![6, 5], 1.0, &mut rng);
        let valid = vec![true, true, true, false, false, false];
        let (_, stats) = moe_forward(&hidden, &params, Some(&valid)).unwrap();
        assert_eq!(stats.token_count, 3);
        let head = Tensor::new(vec![3, 5], hidden.data()[..15].to_vec()).unwrap();
        let (_, head_stats) = moe_forward(&head, &params, None).unwrap();
        assert_eq!(stats.r, head_stats.r);
        for (a, b) in stats.p.iter().zip(head_stats.p.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn alternate_from_second_layers() {
        assert_eq!(alternate_from_second(12), vec![1, 3, 5, 7, 9, 11]);
        assert_eq!(alternate_from_second(2), vec![1]);
        assert_eq!(alternate_from_second(1), Vec::<usize>::new());
    }
}
