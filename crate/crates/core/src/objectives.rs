//! Training losses: cosine scoring, InfoNCE over in-batch negatives, the
//! hard-negative variant, the Matryoshka multi-dimension wrapper, MLM token
//! masking, and the combined objective with the balance term.
//!
//! Eager entry points run the same traced code as training, so reductions
//! (H=0, single Matryoshka dimension) are bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{TokenBatch, Vocab, MASK_ID, RESERVED};
use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, Var};

/// Scores of each query against the n in-batch documents plus its own H hard
/// negatives: column j < n holds s(qᵢ, dⱼ); columns n..n+H hold
/// s(qᵢ, hnᵢₘ). Cosine of unit embeddings keeps every entry in [−1, 1].
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub scores: Tensor,
    pub num_queries: usize,
    pub hard_per_query: usize,
    pub tau: f64,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor, hard_per_query: usize, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature {tau} must be positive")));
        }
        let shape = scores.shape().to_vec();
        if shape.len() != 2 || shape[1] != shape[0] + hard_per_query {
            return Err(Error::Dimension(format!(
                "score matrix {shape:?} does not match n + H = {} + {hard_per_query}",
                shape.first().copied().unwrap_or(0)
            )));
        }
        Ok(ScoreMatrix { num_queries: shape[0], scores, hard_per_query, tau })
    }
}

/// Dot products of unit embeddings: score(A, B) = A·Bᵀ = score(B, A)ᵀ.
pub fn score(queries: &Tensor, documents: &Tensor) -> Result<Tensor> {
    if queries.last_dim() != documents.last_dim() {
        return Err(Error::Input(format!(
            "score: embedding widths {} and {} differ",
            queries.last_dim(),
            documents.last_dim()
        )));
    }
    queries.matmul_nt(documents)
}

/// Traced InfoNCE over a [n × n+H] score var: mean over rows of
/// −log(exp(zᵢᵢ) / Σⱼ exp(zᵢⱼ)) with z = s/τ.
pub fn infonce_traced(tape: &mut Tape, scores: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let z = tape.scale(scores, 1.0 / tau);
    let rows = tape.contrastive_row_loss(z)?;
    Ok(tape.mean_all(rows))
}

/// In-batch InfoNCE (query→document direction only). Requires H = 0.
pub fn infonce(scores: &ScoreMatrix) -> Result<f64> {
    if scores.hard_per_query != 0 {
        return Err(Error::Dimension(format!(
            "infonce expects a square score block, got H = {}",
            scores.hard_per_query
        )));
    }
    infonce_hard(scores)
}

/// Hard-negative InfoNCE: the denominator of row i covers the n in-batch
/// documents plus query i's own H hard negatives. H = 0 reduces to
/// [`infonce`] bit-for-bit (same code path).
pub fn infonce_hard(scores: &ScoreMatrix) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.input(&scores.scores);
    let loss = infonce_traced(&mut tape, s, scores.tau)?;
    Ok(tape.scalar_value(loss))
}

/// Traced Matryoshka loss: arithmetic mean over dimensions of the
/// hard-negative InfoNCE computed on truncated-then-renormalized embeddings.
/// The full embedding width is always evaluated; a single effective
/// dimension returns that loss var unchanged (bit-for-bit reduction).
pub fn mrl_loss_traced(
    tape: &mut Tape,
    query_emb: Var,
    doc_emb: Var,
    hard_emb: Option<(Var, usize)>,
    dims: &[usize],
    tau: f64,
) -> Result<Var> {
    if dims.is_empty() {
        return Err(Error::Config("mrl_loss: dims must not be empty".into()));
    }
    let full = tape.shape(query_emb)[1];
    if let Some(&bad) = dims.iter().find(|&&d| d == 0 || d > full) {
        return Err(Error::Config(format!(
            "mrl_loss: dimension {bad} out of range for width {full}"
        )));
    }
    let mut effective: Vec<usize> = Vec::with_capacity(dims.len() + 1);
    effective.push(full);
    for &d in dims {
        if !effective.contains(&d) {
            effective.push(d);
        }
    }
    effective.sort_unstable_by(|a, b| b.cmp(a));

    let truncate = |tape: &mut Tape, e: Var, dim: usize| -> Result<Var> {
        let width = tape.shape(e)[1];
        let t = tape.truncate_cols(e, dim)?;
        if dim == width {
            Ok(t) // identity node, already unit norm
        } else {
            Ok(tape.l2_normalize(t))
        }
    };

    let mut losses = Vec::with_capacity(effective.len());
    for &dim in &effective {
        let q = truncate(tape, query_emb, dim)?;
        let d = truncate(tape, doc_emb, dim)?;
        let in_batch = tape.matmul_nt(q, d)?;
        let scores = match hard_emb {
            Some((hard, h)) if h > 0 => {
                let hd = truncate(tape, hard, dim)?;
                let hard_scores = tape.rowwise_block_dot(q, hd, h)?;
                tape.concat_cols(in_batch, hard_scores)?
            }
            _ => in_batch,
        };
        losses.push(infonce_traced(tape, scores, tau)?);
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let mut sum = losses[0];
    for &l in &losses[1..] {
        sum = tape.add(sum, l)?;
    }
    Ok(tape.scale(sum, 1.0 / losses.len() as f64))
}

/// Eager Matryoshka loss over unit embeddings. `hard_emb` holds each query's
/// H negatives as consecutive rows ([n·H × width]).
pub fn mrl_loss(
    query_emb: &Tensor,
    doc_emb: &Tensor,
    hard_emb: Option<&Tensor>,
    dims: &[usize],
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let n = query_emb.shape()[0];
    let mut tape = Tape::new();
    let q = tape.input(query_emb);
    let d = tape.input(doc_emb);
    let hard = match hard_emb {
        Some(hn) => {
            if hn.shape()[0] % n != 0 {
                return Err(Error::Dimension(format!(
                    "hard negatives rows {} not a multiple of {n} queries",
                    hn.shape()[0]
                )));
            }
            let h = hn.shape()[0] / n;
            Some((tape.input(hn), h))
        }
        None => None,
    };
    let loss = mrl_loss_traced(&mut tape, q, d, hard, dims, tau)?;
    Ok(tape.scalar_value(loss))
}

/// Combined objective: contrastive + α · mean(per-layer balance terms).
/// With no MoE layers the contrastive loss passes through unchanged.
pub fn total_loss(contrastive: f64, balance_per_layer: &[f64], alpha: f64) -> f64 {
    if balance_per_layer.is_empty() {
        return contrastive;
    }
    let mean = balance_per_layer.iter().sum::<f64>() / balance_per_layer.len() as f64;
    contrastive + alpha * mean
}

/// Traced combined objective over balance vars.
pub fn total_loss_traced(
    tape: &mut Tape,
    contrastive: Var,
    balance_raw: &[Var],
    alpha: f64,
) -> Result<Var> {
    if balance_raw.is_empty() {
        return Ok(contrastive);
    }
    let mut sum = balance_raw[0];
    for &b in &balance_raw[1..] {
        sum = tape.add(sum, b)?;
    }
    let scaled = tape.scale(sum, alpha / balance_raw.len() as f64);
    tape.add(contrastive, scaled)
}

/// A batch with MLM corruption applied: `corrupted` differs from `original`
/// only at `mask_positions`.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub original: TokenBatch,
    pub corrupted: TokenBatch,
    /// Row-major [batch × seq]; true where the MLM loss applies.
    pub mask_positions: Vec<bool>,
    pub mlm_probability: f64,
}

impl MaskedBatch {
    /// Per-row targets for the cross-entropy: `Some(original id)` at masked
    /// positions, `None` elsewhere.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.mask_positions
            .iter()
            .zip(self.original.token_ids.iter())
            .map(|(&m, &id)| if m { Some(id) } else { None })
            .collect()
    }
}

/// Independently select each non-special token with probability
/// `mlm_probability`; selected tokens become the mask token 80% of the time,
/// a random regular token 10%, and stay unchanged 10%. Row-level RNG streams
/// are derived from (seed, row), so splitting a batch into micro-batches
/// reproduces identical corruption when `row_offset` carries the global row
/// index.
pub fn mask_tokens_offset(
    batch: &TokenBatch,
    vocab: &Vocab,
    mlm_probability: f64,
    seed: u64,
    row_offset: u64,
) -> Result<MaskedBatch> {
    if !(0.0..1.0).contains(&mlm_probability) || mlm_probability == 0.0 {
        return Err(Error::Config(format!(
            "mlm_probability {mlm_probability} must lie in (0, 1)"
        )));
    }
    let regular = vocab.len() - RESERVED.len();
    if regular == 0 {
        return Err(Error::Config("vocabulary has no regular tokens to corrupt with".into()));
    }
    let mut corrupted = batch.token_ids.clone();
    let mut positions = vec![false; batch.token_ids.len()];
    for b in 0..batch.batch {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, row_offset + b as u64));
        for s in 0..batch.seq {
            let at = b * batch.seq + s;
            if !batch.mask[at] || vocab.is_special(batch.token_ids[at]) {
                continue;
            }
            if rng.random::<f64>() >= mlm_probability {
                continue;
            }
            positions[at] = true;
            let roll: f64 = rng.random();
            if roll < 0.8 {
                corrupted[at] = MASK_ID;
            } else if roll < 0.9 {
                corrupted[at] = RESERVED.len() + rng.random_range(0..regular);
            } // else: keep the original token
        }
    }
    Ok(MaskedBatch {
        original: batch.clone(),
        corrupted: TokenBatch {
            token_ids: corrupted,
            mask: batch.mask.clone(),
            batch: batch.batch,
            seq: batch.seq,
            role: batch.role,
        },
        mask_positions: positions,
        mlm_probability,
    })
}

pub fn mask_tokens(
    batch: &TokenBatch,
    vocab: &Vocab,
    mlm_probability: f64,
    seed: u64,
) -> Result<MaskedBatch> {
    mask_tokens_offset(batch, vocab, mlm_probability, seed, 0)
}

/// SplitMix64-style mixing for derived seeds.
pub(crate) fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(shape: [usize; 2], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape.to_vec(), 1.0, &mut rng).l2_normalize()
    }

    #[test]
    fn score_identity_orthogonal() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(score(&a, &a).unwrap().data(), &[1.0]);
        assert_eq!(score(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn score_matches_loop_oracle_and_transposes() {
        let q = unit_rows([4, 3], 1);
        let d = unit_rows([5, 3], 2);
        let s = score(&q, &d).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let dot: f64 = q.row(i).iter().zip(d.row(j).iter()).map(|(a, b)| a * b).sum();
                assert!((s.data()[i * 5 + j] - dot).abs() < 1e-15);
            }
        }
        let st = score(&d, &q).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(s.data()[i * 5 + j], st.data()[j * 4 + i]);
            }
        }
    }

    #[test]
    fn score_dimension_mismatch_is_input_error() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 4]);
        assert!(matches!(score(&a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn infonce_single_pair_is_exactly_zero() {
        let s = ScoreMatrix::new(Tensor::new(vec![1, 1], vec![0.73]).unwrap(), 0, 0.02).unwrap();
        assert_eq!(infonce(&s).unwrap(), 0.0);
    }

    #[test]
    fn infonce_closed_form_tiny_loss() {
        // n=2, s_ii=1, s_ij=0, τ=0.02 → loss = ln(1 + e^{-50}) = e^{-50}
        let s = ScoreMatrix::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            0,
            0.02,
        )
        .unwrap();
        let loss = infonce(&s).unwrap();
        let expected = (-50.0f64).exp(); // ≈ 1.93e-22
        assert!(loss > 0.0);
        assert!((loss - expected).abs() / expected < 1e-12, "got {loss:e}");
    }

    #[test]
    fn non_positive_temperature_is_config_error() {
        assert!(matches!(
            ScoreMatrix::new(Tensor::zeros(vec![2, 2]), 0, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ScoreMatrix::new(Tensor::zeros(vec![2, 2]), 0, -1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hard_h0_reduces_bit_for_bit() {
        let scores = unit_rows([3, 3], 3);
        let a = ScoreMatrix::new(scores.clone(), 0, 0.05).unwrap();
        let x = infonce(&a).unwrap();
        let y = infonce_hard(&a).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn infonce_hard_matches_explicit_summation() {
        // n=2, H=1: evaluate the definition by direct summation.
        let tau = 0.1;
        let vals = vec![0.9, 0.2, -0.4, 0.3, 0.85, 0.6];
        let scores = Tensor::new(vec![2, 3], vals.clone()).unwrap();
        let sm = ScoreMatrix::new(scores, 1, tau).unwrap();
        let got = infonce_hard(&sm).unwrap();

        let mut expected = 0.0;
        for i in 0..2 {
            let zii = (vals[i * 3 + i] / tau).exp();
            let mut denom = 0.0;
            for j in 0..2 {
                denom += (vals[i * 3 + j] / tau).exp();
            }
            denom += (vals[i * 3 + 2] / tau).exp(); // own hard negative
            expected += -(zii / denom).ln();
        }
        expected /= 2.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn neg_infinity_hard_negative_is_inert_and_finite_ones_hurt() {
        let base = ScoreMatrix::new(
            Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.0, 0.8]).unwrap(),
            0,
            0.05,
        )
        .unwrap();
        let plain = infonce(&base).unwrap();

        let with_inf = ScoreMatrix::new(
            Tensor::new(vec![2, 3], vec![0.9, 0.1, f64::NEG_INFINITY, 0.0, 0.8, f64::NEG_INFINITY])
                .unwrap(),
            1,
            0.05,
        )
        .unwrap();
        assert_eq!(infonce_hard(&with_inf).unwrap().to_bits(), plain.to_bits());

        let with_finite = ScoreMatrix::new(
            Tensor::new(vec![2, 3], vec![0.9, 0.1, 0.3, 0.0, 0.8, 0.3]).unwrap(),
            1,
            0.05,
        )
        .unwrap();
        assert!(infonce_hard(&with_finite).unwrap() > plain);
    }

    #[test]
    fn infonce_nonnegative_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let n = 2 + (trial % 4);
            let scores = Tensor::randn(vec![n, n], 1.0, &mut rng);
            let sm = ScoreMatrix::new(scores.clone(), 0, 0.2).unwrap();
            let loss = infonce(&sm).unwrap();
            assert!(loss >= 0.0);

            // Simultaneous row/column permutation: reverse order.
            let mut permuted = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    permuted[(n - 1 - i) * n + (n - 1 - j)] = scores.data()[i * n + j];
                }
            }
            let sm2 = ScoreMatrix::new(Tensor::new(vec![n, n], permuted).unwrap(), 0, 0.2).unwrap();
            let loss2 = infonce(&sm2).unwrap();
            assert!((loss - loss2).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_monotone_in_inverse_temperature() {
        // For fixed scores with s_ii > s_ij, sharpening (smaller τ) lowers it.
        let scores = Tensor::new(vec![2, 2], vec![0.9, 0.3, 0.2, 0.8]).unwrap();
        let grid = [1.0, 0.5, 0.2, 0.1, 0.05, 0.02];
        let mut last = f64::INFINITY;
        for tau in grid {
            let sm = ScoreMatrix::new(scores.clone(), 0, tau).unwrap();
            let loss = infonce(&sm).unwrap();
            assert!(loss < last, "loss {loss} did not decrease at τ={tau}");
            last = loss;
        }
    }

    #[test]
    fn mrl_single_dim_reduces_bit_for_bit() {
        let q = unit_rows([3, 8], 11);
        let d = unit_rows([3, 8], 12);
        let hard = unit_rows([6, 8], 13);
        let tau = 0.05;

        let via_mrl = mrl_loss(&q, &d, Some(&hard), &[8], tau).unwrap();

        // Same traced ops, assembled directly without the MRL wrapper.
        let direct = {
            let mut tape = Tape::new();
            let qv = tape.input(&q);
            let dv = tape.input(&d);
            let hv = tape.input(&hard);
            let ib = tape.matmul_nt(qv, dv).unwrap();
            let hs = tape.rowwise_block_dot(qv, hv, 2).unwrap();
            let s = tape.concat_cols(ib, hs).unwrap();
            let l = infonce_traced(&mut tape, s, tau).unwrap();
            tape.scalar_value(l)
        };
        assert_eq!(via_mrl.to_bits(), direct.to_bits());
    }

    #[test]
    fn mrl_two_dims_average_component_losses() {
        let q = unit_rows([4, 8], 21);
        let d = unit_rows([4, 8], 22);
        let tau = 0.1;
        let combined = mrl_loss(&q, &d, None, &[8, 4], tau).unwrap();

        let full = mrl_loss(&q, &d, None, &[8], tau).unwrap();
        let small = {
            // Truncate to 4 and renormalize by hand, then single-dim loss.
            let trunc = |t: &Tensor| {
                let mut out = vec![0.0; 4 * 4];
                for r in 0..4 {
                    out[r * 4..(r + 1) * 4].copy_from_slice(&t.row(r)[..4]);
                }
                Tensor::new(vec![4, 4], out).unwrap().l2_normalize()
            };
            let qs = trunc(&q);
            let ds = trunc(&d);
            let sm = ScoreMatrix::new(score(&qs, &ds).unwrap(), 0, tau).unwrap();
            infonce(&sm).unwrap()
        };
        assert!((combined - 0.5 * (full + small)).abs() < 1e-12);
    }

    #[test]
    fn mrl_empty_dims_is_config_error() {
        let q = unit_rows([2, 4], 31);
        assert!(matches!(mrl_loss(&q, &q, None, &[], 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(1.7, &[], 1.0), 1.7);
        assert_eq!(total_loss(2.0, &[0.125, 0.125], 1.0), 2.125);
        assert_eq!(total_loss(2.0, &[0.2], 0.5), 2.1);
    }

    fn mlm_vocab() -> Vocab {
        let text: String = (0..40).map(|i| format!("tok{i} ")).collect::<Vec<_>>().concat();
        Vocab::build([text.as_str()], 64).unwrap()
    }

    fn long_batch(vocab: &Vocab, rows: usize, seq: usize, seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regular = vocab.len() - RESERVED.len();
        let rows: Vec<Vec<usize>> = (0..rows)
            .map(|_| (0..seq).map(|_| RESERVED.len() + rng.random_range(0..regular)).collect())
            .collect();
        TokenBatch::from_rows(&rows, None).unwrap()
    }

    #[test]
    fn mask_rate_matches_probability() {
        let vocab = mlm_vocab();
        let batch = long_batch(&vocab, 100, 1000, 5);
        let masked = mask_tokens(&batch, &vocab, 0.3, 123).unwrap();
        let total = batch.token_ids.len() as f64;
        let rate = masked.mask_positions.iter().filter(|&&m| m).count() as f64 / total;
        assert!((rate - 0.3).abs() <= 0.01, "rate {rate}");
    }

    #[test]
    fn corruption_only_at_mask_positions() {
        let vocab = mlm_vocab();
        let batch = long_batch(&vocab, 8, 32, 6);
        let masked = mask_tokens(&batch, &vocab, 0.4, 42).unwrap();
        for (i, (&orig, &corr)) in
            batch.token_ids.iter().zip(masked.corrupted.token_ids.iter()).enumerate()
        {
            if !masked.mask_positions[i] {
                assert_eq!(orig, corr, "changed outside mask at {i}");
            }
        }
        // Determinism.
        let again = mask_tokens(&batch, &vocab, 0.4, 42).unwrap();
        assert_eq!(again.corrupted.token_ids, masked.corrupted.token_ids);
        assert_eq!(again.mask_positions, masked.mask_positions);
    }

    #[test]
    fn probability_boundaries() {
        let vocab = mlm_vocab();
        let batch = long_batch(&vocab, 4, 64, 7);
        assert!(matches!(mask_tokens(&batch, &vocab, 0.0, 1), Err(Error::Config(_))));
        assert!(matches!(mask_tokens(&batch, &vocab, 1.0, 1), Err(Error::Config(_))));
        let nearly_none = mask_tokens(&batch, &vocab, 1e-9, 1).unwrap();
        assert_eq!(nearly_none.mask_positions.iter().filter(|&&m| m).count(), 0);
    }

    #[test]
    fn row_offset_reproduces_split_batches() {
        let vocab = mlm_vocab();
        let batch = long_batch(&vocab, 6, 16, 8);
        let whole = mask_tokens(&batch, &vocab, 0.3, 99).unwrap();

        let rows: Vec<Vec<usize>> = (0..6).map(|b| batch.row_ids(b).to_vec()).collect();
        let first = TokenBatch::from_rows(&rows[..3], None).unwrap();
        let second = TokenBatch::from_rows(&rows[3..], None).unwrap();
        let m1 = mask_tokens_offset(&first, &vocab, 0.3, 99, 0).unwrap();
        let m2 = mask_tokens_offset(&second, &vocab, 0.3, 99, 3).unwrap();
        let mut recombined = m1.corrupted.token_ids.clone();
        recombined.extend(m2.corrupted.token_ids.clone());
        assert_eq!(recombined, whole.corrupted.token_ids);
    }
}
