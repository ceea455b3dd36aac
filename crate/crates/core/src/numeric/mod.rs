//! Tensor substrate: f64 row-major arrays, eager forward ops, and a
//! tape-based reverse-mode gradient engine with a finite-difference
//! verification harness.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Denominator floor in layer normalization.
pub const LN_EPS: f64 = 1e-5;
/// Norm floor in L2 normalization.
pub const L2_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(
        params: IndexMap<String, Tensor>,
        build: impl Fn(&mut Tape, &IndexMap<String, Tensor>) -> crate::Result<Var>,
        tol: f64,
    ) {
        let report = grad_check(&params, build, 1e-5, tol).unwrap();
        assert!(
            report.passed(),
            "gradient check failed: {:?}",
            report.per_param
        );
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = IndexMap::new();
        params.insert("a".into(), Tensor::randn(vec![3, 4], 1.0, &mut rng).with_grad());
        params.insert("b".into(), Tensor::randn(vec![4, 2], 1.0, &mut rng).with_grad());
        let w = Tensor::randn(vec![3, 2], 1.0, &mut rng);
        check(
            params,
            move |tape, p| {
                let a = tape.param("a", &p["a"]);
                let b = tape.param("b", &p["b"]);
                let y = tape.matmul(a, b)?;
                let wv = tape.input(&w);
                let weighted = tape.mul(y, wv)?;
                Ok(tape.sum_all(weighted))
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = IndexMap::new();
        params.insert("x".into(), Tensor::randn(vec![1, 8], 1.0, &mut rng).with_grad());
        let w = Tensor::randn(vec![1, 8], 1.0, &mut rng);
        check(
            params,
            move |tape, p| {
                let x = tape.param("x", &p["x"]);
                let sm = tape.softmax_last(x);
                let wv = tape.input(&w);
                let weighted = tape.mul(sm, wv)?;
                Ok(tape.sum_all(weighted))
            },
            1e-6,
        );
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = IndexMap::new();
        params.insert("x".into(), Tensor::randn(vec![2, 5], 1.5, &mut rng).with_grad());
        check(
            params,
            |tape, p| {
                let x = tape.param("x", &p["x"]);
                let y = tape.gelu(x);
                Ok(tape.sum_all(y))
            },
            1e-6,
        );
    }

    // One sweep over the remaining tape ops so every backward rule gets
    // finite-difference coverage somewhere cheap.
    #[test]
    fn tape_op_suite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng).with_grad();
        let b = Tensor::randn(vec![3, 4], 1.0, &mut rng).with_grad();
        let bias = Tensor::randn(vec![4], 1.0, &mut rng).with_grad();
        let gamma = Tensor::randn(vec![4], 0.5, &mut rng).with_grad();
        let w3 = Tensor::randn(vec![3], 1.0, &mut rng).with_grad();
        let table = Tensor::randn(vec![5, 4], 1.0, &mut rng).with_grad();
        let q = Tensor::randn(vec![2, 4], 1.0, &mut rng).with_grad();
        let h = Tensor::randn(vec![4, 4], 1.0, &mut rng).with_grad();
        let bm_a = Tensor::randn(vec![2, 2, 3], 1.0, &mut rng).with_grad();
        let bm_b = Tensor::randn(vec![2, 3, 2], 1.0, &mut rng).with_grad();
        let pos_t = Tensor::randn(vec![1, 2, 3, 4], 1.0, &mut rng).with_grad();
        // Constant weights keep reductions non-degenerate (layer_norm output
        // is zero-mean per row, so a plain mean would be identically zero).
        let w_ln = Tensor::randn(vec![3, 4], 1.0, &mut rng);

        let mut params = IndexMap::new();
        for (name, t) in [
            ("a", a),
            ("b", b),
            ("bias", bias),
            ("gamma", gamma),
            ("w3", w3),
            ("table", table),
            ("q", q),
            ("h", h),
            ("bm_a", bm_a),
            ("bm_b", bm_b),
            ("rope_in", pos_t),
        ] {
            params.insert(name.to_string(), t);
        }

        check(
            params,
            move |tape, p| {
                let a = tape.param("a", &p["a"]);
                let b = tape.param("b", &p["b"]);
                let bias = tape.param("bias", &p["bias"]);
                let gamma = tape.param("gamma", &p["gamma"]);
                let w3 = tape.param("w3", &p["w3"]);
                let table = tape.param("table", &p["table"]);
                let q = tape.param("q", &p["q"]);
                let h = tape.param("h", &p["h"]);
                let bm_a = tape.param("bm_a", &p["bm_a"]);
                let bm_b = tape.param("bm_b", &p["bm_b"]);
                let rope_in = tape.param("rope_in", &p["rope_in"]);

                let mut terms = Vec::new();

                let added = tape.add(a, b)?;
                let rowed = tape.add_row(added, bias)?;
                let scaled = tape.mul_row(rowed, gamma)?;
                let per_row = tape.mul_col_scalar(scaled, w3)?;
                let ln = tape.layer_norm(per_row);
                let l2 = tape.l2_normalize(ln);
                let wv = tape.input(&w_ln);
                let weighted = tape.mul(l2, wv)?;
                terms.push(tape.mean_all(weighted));

                let exp = tape.exp(a);
                let logged = tape.log(exp);
                let perm = tape.permute(logged, &[1, 0])?;
                let reshaped = tape.reshape(perm, vec![2, 6])?;
                terms.push(tape.mean_all(reshaped));

                let emb = tape.embed_lookup(table, &[0, 3, 3, 1])?;
                let gathered = tape.gather_rows(emb, &[2, 0])?;
                let scattered = tape.scatter_add_rows(gathered, &[1, 1], 3)?;
                let elems = tape.gather_elems(scattered, &[0, 5, 7])?;
                terms.push(tape.sum_all(elems));

                let sel = tape.select_cols_per_row(a, &[0, 2, 1, 3, 0, 1], 2)?;
                let selexp = tape.exp(sel);
                let norm = tape.normalize_rows_sum(selexp);
                terms.push(tape.mean_all(norm));

                let trunc = tape.truncate_cols(a, 2)?;
                let cat = tape.concat_cols(trunc, b)?;
                terms.push(tape.mean_all(cat));

                let roped = tape.rope(rope_in, &[0.0, 1.0, 5.0], 10_000.0)?;
                let pooled = tape.reshape(roped, vec![2, 3, 4])?;
                let pooled = tape.masked_mean_pool(pooled, &[true, false, true, true, true, false])?;
                terms.push(tape.mean_all(pooled));

                let bm = tape.bmm(bm_a, bm_b, false)?;
                terms.push(tape.mean_all(bm));
                let bmt = tape.bmm(bm_a, bm_a, true)?;
                terms.push(tape.mean_all(bmt));

                let qn = tape.l2_normalize(q);
                let hn = tape.l2_normalize(h);
                let hard = tape.rowwise_block_dot(qn, hn, 2)?;
                let inbatch = tape.matmul_nt(qn, qn)?;
                let scores = tape.concat_cols(inbatch, hard)?;
                let z = tape.scale(scores, 1.0 / 0.5);
                let rows = tape.contrastive_row_loss(z)?;
                terms.push(tape.mean_all(rows));

                let nt = tape.matmul_nt(a, b)?;
                let sm = tape.softmax(nt, 0)?;
                terms.push(tape.mean_all(sm));

                let ce = tape.masked_cross_entropy(a, &[Some(1), None, Some(3)])?;
                terms.push(ce);

                let ma = tape.mean_axis0(a);
                terms.push(tape.dot_const(ma, &[0.3, -0.2, 0.5, 1.0])?);

                let mut total = terms[0];
                for &t in &terms[1..] {
                    total = tape.add(total, t)?;
                }
                Ok(total)
            },
            2e-6,
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.input(x);
            let ln = tape.layer_norm(v);
            let g = tape.gelu(ln);
            let n = tape.l2_normalize(g);
            tape.value(n).to_vec()
        };
        assert_eq!(run(&x), run(&x));
    }
}
