//! Reverse-mode differentiation over a recorded computation tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operation
//! builders validate shapes, run the forward kernel immediately, and record
//! the local gradient rule. [`Tape::backward`] replays the records in reverse
//! and accumulates exact chain-rule gradients.
//!
//! Tapes are single-threaded; independent tapes on separate threads share
//! nothing.

use indexmap::IndexMap;

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::Tensor;
use super::{L2_EPS, LN_EPS};

/// Handle to a value stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    /// [g,m,k] · [g,k,n] (or [g,n,k] with trans_b), batched over g.
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    /// [r,c] + bias[c]
    AddRow { a: Var, b: Var },
    /// [r,c] ∘ gamma[c]
    MulRow { a: Var, b: Var },
    /// [r,c] scaled per row by w[r]
    MulColScalar { a: Var, w: Var },
    Log { a: Var },
    Exp { a: Var },
    Gelu { a: Var },
    LayerNorm { a: Var },
    L2Normalize { a: Var },
    SoftmaxLast { a: Var },
    MeanAll { a: Var },
    SumAll { a: Var },
    /// [t,e] → [e], mean over axis 0.
    MeanAxis0 { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    EmbedLookup { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterAddRows { a: Var, idx: Vec<usize> },
    GatherElems { a: Var, idx: Vec<usize> },
    /// Per row r of [rows,cols], pick columns idx[r*k..r*k+k] → [rows,k].
    SelectColsPerRow { a: Var, idx: Vec<usize>, k: usize },
    /// y = a / rowsum(a)
    NormalizeRowsSum { a: Var },
    TruncateCols { a: Var, cols: usize },
    ConcatCols { a: Var, b: Var },
    Rope { a: Var, positions: Vec<f64>, base: f64 },
    /// scores[b,h,i,j] += bias[b*S+j]; bias is a constant.
    AttnBias { a: Var },
    /// [b,s,c] → [b,c] mean over unmasked positions.
    MaskedMeanPool { a: Var, mask: Vec<bool> },
    /// Per-row logsumexp(z) − z[r,r] on [n,m], m ≥ n → [n].
    ContrastiveRowLoss { a: Var },
    /// Mean cross-entropy over rows with Some(target); None rows are ignored.
    MaskedCrossEntropy { logits: Var, targets: Vec<Option<usize>> },
    /// ⟨a, w⟩ with constant w → scalar.
    DotConst { a: Var, w: Vec<f64> },
    /// s[i,m] = ⟨q_i, h_{i·k+m}⟩, q:[n,d], h:[n·k,d] → [n,k].
    RowwiseBlockDot { q: Var, h: Var, k: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// Recorded forward pass plus reverse-replay gradient machinery.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: IndexMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Record an input value (gradient computed but not exported by name).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf)
    }

    /// Register a named parameter. Repeated registrations under the same name
    /// return the original var so gradient contributions accumulate.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.input(t);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Named parameters in registration order.
    pub fn param_names(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, &v)| (n.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("tape node shapes are consistent")
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let n = self.nodes[v.0].shape.last().copied().unwrap_or(1);
        (self.nodes[v.0].data.len() / n, n)
    }

    // ── op builders ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::mm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }))
    }

    /// a[m×k] · b[n×k]ᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension(format!(
                "matmul_nt: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b }))
    }

    /// Batched matmul over the leading axis: [g,m,k]·[g,k,n], or [g,n,k] when
    /// `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!(
                "bmm: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let g = sa[0];
        let (m, k) = (sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let k2 = if trans_b { sb[2] } else { sb[1] };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "bmm: inner dimensions disagree for {sa:?} and {sb:?} (trans_b={trans_b})"
            )));
        }
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            let av = &self.nodes[a.0].data[i * m * k..(i + 1) * m * k];
            let bslice = if trans_b {
                &self.nodes[b.0].data[i * n * k..(i + 1) * n * k]
            } else {
                &self.nodes[b.0].data[i * k * n..(i + 1) * k * n]
            };
            let oslice = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::mm_nt(av, bslice, oslice, m, k, n);
            } else {
                kernels::mm_nn(av, bslice, oslice, m, k, n);
            }
        }
        Ok(self.push(vec![g, m, n], out, Op::BatchMatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_data(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_data(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|&v| v * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale { a, c })
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!(
                "add_row: bias {:?} does not match row width {c}",
                self.shape(bias)
            )));
        }
        let mut data = self.value(a).to_vec();
        let bv = self.value(bias).to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bv[j];
            }
        }
        Ok(self.push(self.shape(a).to_vec(), data, Op::AddRow { a, b: bias }))
    }

    pub fn mul_row(&mut self, a: Var, gamma: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if self.shape(gamma) != [c] {
            return Err(Error::Dimension(format!(
                "mul_row: scale {:?} does not match row width {c}",
                self.shape(gamma)
            )));
        }
        let mut data = self.value(a).to_vec();
        let gv = self.value(gamma).to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= gv[j];
            }
        }
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulRow { a, b: gamma }))
    }

    /// Scale each row of a [r,c] matrix by w[r].
    pub fn mul_col_scalar(&mut self, a: Var, w: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if self.shape(w) != [r] {
            return Err(Error::Dimension(format!(
                "mul_col_scalar: weights {:?} do not match row count {r}",
                self.shape(w)
            )));
        }
        let mut data = self.value(a).to_vec();
        let wv = self.value(w).to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= wv[i];
            }
        }
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulColScalar { a, w }))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&v| v.ln()).collect();
        self.push(self.shape(a).to_vec(), data, Op::Log { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&v| v.exp()).collect();
        self.push(self.shape(a).to_vec(), data, Op::Exp { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Gelu { a })
    }

    /// Layer norm over the last axis (no affine), ε = 1e-5.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_cols(a);
        let mut out = vec![0.0; r * c];
        kernels::layer_norm_rows(self.value(a), r, c, LN_EPS, &mut out);
        self.push(self.shape(a).to_vec(), out, Op::LayerNorm { a })
    }

    /// Row-wise x / max(‖x‖₂, 1e-12).
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_cols(a);
        let mut out = vec![0.0; r * c];
        kernels::l2_normalize_rows(self.value(a), r, c, L2_EPS, &mut out);
        self.push(self.shape(a).to_vec(), out, Op::L2Normalize { a })
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_cols(a);
        let mut out = vec![0.0; r * c];
        kernels::softmax_rows(self.value(a), r, c, &mut out);
        self.push(self.shape(a).to_vec(), out, Op::SoftmaxLast { a })
    }

    /// Softmax along an arbitrary axis (permutes to the last axis if needed).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                self.shape(a)
            )));
        }
        if axis == rank - 1 {
            return Ok(self.softmax_last(a));
        }
        let mut perm: Vec<usize> = (0..rank).filter(|&d| d != axis).collect();
        perm.push(axis);
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let moved = self.permute(a, &perm)?;
        let sm = self.softmax_last(moved);
        self.permute(sm, &inv)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![mean], Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>();
        self.push(vec![1], vec![s], Op::SumAll { a })
    }

    /// Column means of a [t,e] matrix → [e].
    pub fn mean_axis0(&mut self, a: Var) -> Var {
        let (t, e) = self.rows_cols(a);
        let mut out = vec![0.0; e];
        for r in 0..t {
            for c in 0..e {
                out[c] += self.nodes[a.0].data[r * e + c];
            }
        }
        for o in out.iter_mut() {
            *o /= t as f64;
        }
        self.push(vec![e], out, Op::MeanAxis0 { a })
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if perm.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "permute: perm {perm:?} does not match shape {shape:?}"
            )));
        }
        let mut out = vec![0.0; self.nodes[a.0].data.len()];
        kernels::permute_copy(self.value(a), &shape, perm, &mut out);
        let new_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(new_shape, out, Op::Permute { a, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} incompatible with {:?}",
                self.shape(a),
                shape
            )));
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape, data, Op::Reshape { a }))
    }

    /// Gather embedding rows: table[v,c], ids over v → [ids.len(), c].
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let sv = self.shape(table).to_vec();
        if sv.len() != 2 {
            return Err(Error::Dimension("embed_lookup: table must be 2-D".into()));
        }
        let (v, c) = (sv[0], sv[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "embed_lookup: id {bad} out of range for vocab {v}"
            )));
        }
        let mut out = vec![0.0; ids.len() * c];
        for (r, &id) in ids.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&self.nodes[table.0].data[id * c..(id + 1) * c]);
        }
        Ok(self.push(vec![ids.len(), c], out, Op::EmbedLookup { table, ids: ids.to_vec() }))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let mut out = vec![0.0; idx.len() * c];
        for (k, &i) in idx.iter().enumerate() {
            out[k * c..(k + 1) * c].copy_from_slice(&self.nodes[a.0].data[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { a, idx: idx.to_vec() }))
    }

    /// Scatter-add rows of `a` into a zero [out_rows, c] matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if idx.len() != r {
            return Err(Error::Dimension(format!(
                "scatter_add_rows: {} indices for {r} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Dimension(format!(
                "scatter_add_rows: index {bad} out of range for {out_rows} rows"
            )));
        }
        let mut out = vec![0.0; out_rows * c];
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += self.nodes[a.0].data[k * c + j];
            }
        }
        Ok(self.push(vec![out_rows, c], out, Op::ScatterAddRows { a, idx: idx.to_vec() }))
    }

    /// Pick flat elements of `a` → 1-D [idx.len()].
    pub fn gather_elems(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather_elems: index {bad} out of range for {n} elements"
            )));
        }
        let out: Vec<f64> = idx.iter().map(|&i| self.nodes[a.0].data[i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::GatherElems { a, idx: idx.to_vec() }))
    }

    /// Per row r, select columns idx[r*k..(r+1)*k] → [rows, k].
    pub fn select_cols_per_row(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if idx.len() != r * k {
            return Err(Error::Dimension(format!(
                "select_cols_per_row: got {} indices, need {r}·{k}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Dimension(format!(
                "select_cols_per_row: column {bad} out of range for width {c}"
            )));
        }
        let mut out = vec![0.0; r * k];
        for row in 0..r {
            for slot in 0..k {
                out[row * k + slot] = self.nodes[a.0].data[row * c + idx[row * k + slot]];
            }
        }
        Ok(self.push(vec![r, k], out, Op::SelectColsPerRow { a, idx: idx.to_vec(), k }))
    }

    /// y = a / rowsum(a). Rows must have non-zero sums.
    pub fn normalize_rows_sum(&mut self, a: Var) -> Var {
        let (r, c) = self.rows_cols(a);
        let mut out = vec![0.0; r * c];
        for row in 0..r {
            let s: f64 = self.nodes[a.0].data[row * c..(row + 1) * c].iter().sum();
            for j in 0..c {
                out[row * c + j] = self.nodes[a.0].data[row * c + j] / s;
            }
        }
        self.push(self.shape(a).to_vec(), out, Op::NormalizeRowsSum { a })
    }

    /// Keep the first `cols` columns of a [r,c] matrix.
    pub fn truncate_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(a);
        if cols == 0 || cols > c {
            return Err(Error::Dimension(format!(
                "truncate_cols: {cols} columns out of range for width {c}"
            )));
        }
        if cols == c {
            // Identity: reuse the same node so downstream math is bit-equal.
            return Ok(a);
        }
        let mut out = vec![0.0; r * cols];
        for row in 0..r {
            out[row * cols..(row + 1) * cols]
                .copy_from_slice(&self.nodes[a.0].data[row * c..row * c + cols]);
        }
        Ok(self.push(vec![r, cols], out, Op::TruncateCols { a, cols }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.rows_cols(a);
        let (rb, cb) = self.rows_cols(b);
        if ra != rb {
            return Err(Error::Dimension(format!(
                "concat_cols: row counts {ra} and {rb} differ"
            )));
        }
        let mut out = vec![0.0; ra * (ca + cb)];
        for r in 0..ra {
            out[r * (ca + cb)..r * (ca + cb) + ca]
                .copy_from_slice(&self.nodes[a.0].data[r * ca..(r + 1) * ca]);
            out[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&self.nodes[b.0].data[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(vec![ra, ca + cb], out, Op::ConcatCols { a, b }))
    }

    /// Rotary position embedding on [batch,heads,seq,head_dim].
    pub fn rope(&mut self, a: Var, positions: &[f64], base: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("rope: expected 4-D input, got {s:?}")));
        }
        if s[3] % 2 != 0 {
            return Err(Error::Config(format!("rope: head_dim {} must be even", s[3])));
        }
        if positions.len() != s[2] {
            return Err(Error::Dimension(format!(
                "rope: {} positions for seq length {}",
                positions.len(),
                s[2]
            )));
        }
        let mut out = vec![0.0; self.nodes[a.0].data.len()];
        kernels::rope_rotate(self.value(a), s[0], s[1], s[2], s[3], positions, base, 1.0, &mut out);
        Ok(self.push(s, out, Op::Rope { a, positions: positions.to_vec(), base }))
    }

    /// Add a constant per-key bias to attention scores [b,h,sq,sk];
    /// bias is laid out [b*sk].
    pub fn attn_bias(&mut self, a: Var, bias: &[f64]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || bias.len() != s[0] * s[3] {
            return Err(Error::Dimension(format!(
                "attn_bias: bias length {} does not match scores {s:?}",
                bias.len()
            )));
        }
        let (b, h, sq, sk) = (s[0], s[1], s[2], s[3]);
        let mut data = self.value(a).to_vec();
        for bi in 0..b {
            for hi in 0..h {
                for qi in 0..sq {
                    let off = ((bi * h + hi) * sq + qi) * sk;
                    for ki in 0..sk {
                        data[off + ki] += bias[bi * sk + ki];
                    }
                }
            }
        }
        Ok(self.push(s, data, Op::AttnBias { a }))
    }

    /// Mean over unmasked sequence positions of [b,s,c] → [b,c].
    /// Every batch row must have at least one unmasked position.
    pub fn masked_mean_pool(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::Dimension(format!(
                "masked_mean_pool: mask length {} does not match {s:?}",
                mask.len()
            )));
        }
        let (b, seq, c) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let count = mask[bi * seq..(bi + 1) * seq].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::Input(format!(
                    "masked_mean_pool: batch row {bi} has no unmasked positions"
                )));
            }
            for si in 0..seq {
                if mask[bi * seq + si] {
                    for j in 0..c {
                        out[bi * c + j] += self.nodes[a.0].data[(bi * seq + si) * c + j];
                    }
                }
            }
            for j in 0..c {
                out[bi * c + j] /= count as f64;
            }
        }
        Ok(self.push(vec![b, c], out, Op::MaskedMeanPool { a, mask: mask.to_vec() }))
    }

    /// Per-row InfoNCE term on a [n,m] score-over-temperature matrix (m ≥ n):
    /// out[i] = logsumexp(z_i) − z_ii, computed stably.
    pub fn contrastive_row_loss(&mut self, z: Var) -> Result<Var> {
        let s = self.shape(z).to_vec();
        if s.len() != 2 || s[1] < s[0] {
            return Err(Error::Dimension(format!(
                "contrastive_row_loss: need [n,m] with m ≥ n, got {s:?}"
            )));
        }
        let (n, m) = (s[0], s[1]);
        let mut out = vec![0.0; n];
        kernels::contrastive_row_loss(self.value(z), n, m, &mut out);
        Ok(self.push(vec![n], out, Op::ContrastiveRowLoss { a: z }))
    }

    /// Mean cross-entropy over rows with a target; rows with `None` are
    /// ignored. Zero targeted rows → loss 0 with zero gradient.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.rows_cols(logits);
        if targets.len() != r {
            return Err(Error::Dimension(format!(
                "masked_cross_entropy: {} targets for {r} rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Input(format!(
                "masked_cross_entropy: target {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, target) in targets.iter().enumerate() {
            if let Some(t) = target {
                let z = &self.nodes[logits.0].data[row * c..(row + 1) * c];
                let mut max = f64::NEG_INFINITY;
                let mut jmax = 0;
                for (j, &v) in z.iter().enumerate() {
                    if v > max {
                        max = v;
                        jmax = j;
                    }
                }
                let mut rest = 0.0;
                for (j, &v) in z.iter().enumerate() {
                    if j != jmax {
                        rest += (v - max).exp();
                    }
                }
                total += (max - z[*t]) + rest.ln_1p();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(vec![1], vec![loss], Op::MaskedCrossEntropy { logits, targets: targets.to_vec() }))
    }

    /// Dot product with a constant weight vector → scalar.
    pub fn dot_const(&mut self, a: Var, w: &[f64]) -> Result<Var> {
        if self.nodes[a.0].data.len() != w.len() {
            return Err(Error::Dimension(format!(
                "dot_const: {} weights for {} elements",
                w.len(),
                self.nodes[a.0].data.len()
            )));
        }
        let s: f64 = self.nodes[a.0].data.iter().zip(w.iter()).map(|(x, y)| x * y).sum();
        Ok(self.push(vec![1], vec![s], Op::DotConst { a, w: w.to_vec() }))
    }

    /// s[i,m] = ⟨q_i, h_{i·k+m}⟩ for q:[n,d], h:[n·k,d] → [n,k].
    pub fn rowwise_block_dot(&mut self, q: Var, h: Var, k: usize) -> Result<Var> {
        let (n, d) = self.rows_cols(q);
        let (hn, hd) = self.rows_cols(h);
        if hd != d || hn != n * k {
            return Err(Error::Dimension(format!(
                "rowwise_block_dot: q {:?} and h {:?} incompatible with k={k}",
                self.shape(q),
                self.shape(h)
            )));
        }
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for m in 0..k {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += self.nodes[q.0].data[i * d + j]
                        * self.nodes[h.0].data[(i * k + m) * d + j];
                }
                out[i * k + m] = acc;
            }
        }
        Ok(self.push(vec![n, k], out, Op::RowwiseBlockDot { q, h, k }))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_data(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contribution.iter()) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss. Gradients are freshly computed on
    /// each call and readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backward_op(Var(i), &op, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a parameter by name; zeros if no gradient flowed to it.
    pub fn param_grad(&self, name: &str) -> Option<Vec<f64>> {
        let &v = self.params.get(name)?;
        Some(match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].data.len()],
        })
    }

    /// After backward, populate `grad` on each tensor bound to a var.
    pub fn write_grads(&self, bindings: &mut [(&mut Tensor, Var)]) {
        for (tensor, var) in bindings.iter_mut() {
            if tensor.requires_grad {
                let n = tensor.numel();
                tensor.grad = Some(match &self.grads[var.0] {
                    Some(g) => g.clone(),
                    None => vec![0.0; n],
                });
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&mut self, out: Var, op: &Op, dy: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[1];
                // dA = dY · Bᵀ
                let mut da = vec![0.0; m * k];
                kernels::mm_nt(dy, &self.nodes[b.0].data, &mut da, m, n, k);
                self.accumulate(*a, &da);
                // dB = Aᵀ · dY
                let mut db = vec![0.0; k * n];
                kernels::mm_tn(&self.nodes[a.0].data, dy, &mut db, k, m, n);
                self.accumulate(*b, &db);
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[0];
                // Y = A·Bᵀ → dA = dY·B, dB = dYᵀ·A
                let mut da = vec![0.0; m * k];
                kernels::mm_nn(dy, &self.nodes[b.0].data, &mut da, m, n, k);
                self.accumulate(*a, &da);
                let mut db = vec![0.0; n * k];
                kernels::mm_tn(dy, &self.nodes[a.0].data, &mut db, n, m, k);
                self.accumulate(*b, &db);
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let g = self.shape(*a)[0];
                let (m, k) = (self.shape(*a)[1], self.shape(*a)[2]);
                let n = self.shape(out)[2];
                let mut da = vec![0.0; g * m * k];
                let mut db = vec![0.0; self.nodes[b.0].data.len()];
                for i in 0..g {
                    let dyi = &dy[i * m * n..(i + 1) * m * n];
                    let ai = &self.nodes[a.0].data[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // Y = A·Bᵀ with B [n,k]: dA = dY·B, dB = dYᵀ·A
                        let bi = &self.nodes[b.0].data[i * n * k..(i + 1) * n * k];
                        kernels::mm_nn(dyi, bi, &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                        kernels::mm_tn(dyi, ai, &mut db[i * n * k..(i + 1) * n * k], n, m, k);
                    } else {
                        // Y = A·B with B [k,n]: dA = dY·Bᵀ, dB = Aᵀ·dY
                        let bi = &self.nodes[b.0].data[i * k * n..(i + 1) * k * n];
                        kernels::mm_nt(dyi, bi, &mut da[i * m * k..(i + 1) * m * k], m, n, k);
                        kernels::mm_tn(ai, dyi, &mut db[i * k * n..(i + 1) * k * n], k, m, n);
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> =
                    dy.iter().zip(self.nodes[b.0].data.iter()).map(|(&d, &v)| d * v).collect();
                let db: Vec<f64> =
                    dy.iter().zip(self.nodes[a.0].data.iter()).map(|(&d, &v)| d * v).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = dy.iter().map(|&d| d * c).collect();
                self.accumulate(*a, &da);
            }
            Op::AddRow { a, b } => {
                self.accumulate(*a, dy);
                let c = self.nodes[b.0].data.len();
                let r = dy.len() / c;
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += dy[i * c + j];
                    }
                }
                self.accumulate(*b, &db);
            }
            Op::MulRow { a, b } => {
                let c = self.nodes[b.0].data.len();
                let r = dy.len() / c;
                let mut da = vec![0.0; dy.len()];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = dy[i * c + j] * self.nodes[b.0].data[j];
                        db[j] += dy[i * c + j] * self.nodes[a.0].data[i * c + j];
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MulColScalar { a, w } => {
                let r = self.nodes[w.0].data.len();
                let c = dy.len() / r;
                let mut da = vec![0.0; dy.len()];
                let mut dw = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = dy[i * c + j] * self.nodes[w.0].data[i];
                        dw[i] += dy[i * c + j] * self.nodes[a.0].data[i * c + j];
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*w, &dw);
            }
            Op::Log { a } => {
                let da: Vec<f64> =
                    dy.iter().zip(self.nodes[a.0].data.iter()).map(|(&d, &v)| d / v).collect();
                self.accumulate(*a, &da);
            }
            Op::Exp { a } => {
                let da: Vec<f64> =
                    dy.iter().zip(self.nodes[out.0].data.iter()).map(|(&d, &y)| d * y).collect();
                self.accumulate(*a, &da);
            }
            Op::Gelu { a } => {
                let da: Vec<f64> = dy
                    .iter()
                    .zip(self.nodes[a.0].data.iter())
                    .map(|(&d, &v)| d * kernels::gelu_deriv(v))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::LayerNorm { a } => {
                let (r, c) = self.rows_cols(*a);
                let mut da = vec![0.0; r * c];
                kernels::layer_norm_rows_backward(
                    &self.nodes[a.0].data,
                    &self.nodes[out.0].data,
                    dy,
                    r,
                    c,
                    LN_EPS,
                    &mut da,
                );
                self.accumulate(*a, &da);
            }
            Op::L2Normalize { a } => {
                let (r, c) = self.rows_cols(*a);
                let mut da = vec![0.0; r * c];
                kernels::l2_normalize_rows_backward(
                    &self.nodes[a.0].data,
                    &self.nodes[out.0].data,
                    dy,
                    r,
                    c,
                    L2_EPS,
                    &mut da,
                );
                self.accumulate(*a, &da);
            }
            Op::SoftmaxLast { a } => {
                let (r, c) = self.rows_cols(*a);
                let mut da = vec![0.0; r * c];
                kernels::softmax_rows_backward(&self.nodes[out.0].data, dy, r, c, &mut da);
                self.accumulate(*a, &da);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len() as f64;
                let da = vec![dy[0] / n; self.nodes[a.0].data.len()];
                self.accumulate(*a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![dy[0]; self.nodes[a.0].data.len()];
                self.accumulate(*a, &da);
            }
            Op::MeanAxis0 { a } => {
                let (t, e) = self.rows_cols(*a);
                let mut da = vec![0.0; t * e];
                for r in 0..t {
                    for c in 0..e {
                        da[r * e + c] = dy[c] / t as f64;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Permute { a, perm } => {
                // Backward permutes the gradient by the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let out_shape = self.shape(out).to_vec();
                let mut da = vec![0.0; dy.len()];
                kernels::permute_copy(dy, &out_shape, &inv, &mut da);
                self.accumulate(*a, &da);
            }
            Op::Reshape { a } => {
                self.accumulate(*a, dy);
            }
            Op::EmbedLookup { table, ids } => {
                let c = self.shape(*table)[1];
                let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        dt[id * c + j] += dy[r * c + j];
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::GatherRows { a, idx } => {
                let (_, c) = self.rows_cols(*a);
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += dy[k * c + j];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::ScatterAddRows { a, idx } => {
                let (_, c) = self.rows_cols(*a);
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for (k, &i) in idx.iter().enumerate() {
                    da[k * c..(k + 1) * c].copy_from_slice(&dy[i * c..(i + 1) * c]);
                }
                self.accumulate(*a, &da);
            }
            Op::GatherElems { a, idx } => {
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for (k, &i) in idx.iter().enumerate() {
                    da[i] += dy[k];
                }
                self.accumulate(*a, &da);
            }
            Op::SelectColsPerRow { a, idx, k } => {
                let (r, c) = self.rows_cols(*a);
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    for slot in 0..*k {
                        da[row * c + idx[row * k + slot]] += dy[row * k + slot];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::NormalizeRowsSum { a } => {
                let (r, c) = self.rows_cols(*a);
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    let base = row * c;
                    let s: f64 = self.nodes[a.0].data[base..base + c].iter().sum();
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += dy[base + j] * self.nodes[out.0].data[base + j];
                    }
                    for j in 0..c {
                        da[base + j] = (dy[base + j] - dot) / s;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::TruncateCols { a, cols } => {
                let (r, c) = self.rows_cols(*a);
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    da[row * c..row * c + cols].copy_from_slice(&dy[row * cols..(row + 1) * cols]);
                }
                self.accumulate(*a, &da);
            }
            Op::ConcatCols { a, b } => {
                let (ra, ca) = self.rows_cols(*a);
                let (_, cb) = self.rows_cols(*b);
                let mut da = vec![0.0; ra * ca];
                let mut db = vec![0.0; ra * cb];
                for r in 0..ra {
                    da[r * ca..(r + 1) * ca].copy_from_slice(&dy[r * (ca + cb)..r * (ca + cb) + ca]);
                    db[r * cb..(r + 1) * cb]
                        .copy_from_slice(&dy[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Rope { a, positions, base } => {
                // Rotation is orthonormal; the VJP rotates by −θ.
                let s = self.shape(*a).to_vec();
                let mut da = vec![0.0; dy.len()];
                kernels::rope_rotate(dy, s[0], s[1], s[2], s[3], positions, *base, -1.0, &mut da);
                self.accumulate(*a, &da);
            }
            Op::AttnBias { a } => {
                self.accumulate(*a, dy);
            }
            Op::MaskedMeanPool { a, mask } => {
                let s = self.shape(*a).to_vec();
                let (b, seq, c) = (s[0], s[1], s[2]);
                let mut da = vec![0.0; b * seq * c];
                for bi in 0..b {
                    let count =
                        mask[bi * seq..(bi + 1) * seq].iter().filter(|&&m| m).count() as f64;
                    for si in 0..seq {
                        if mask[bi * seq + si] {
                            for j in 0..c {
                                da[(bi * seq + si) * c + j] = dy[bi * c + j] / count;
                            }
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::ContrastiveRowLoss { a } => {
                let (n, m) = self.rows_cols(*a);
                let mut da = vec![0.0; n * m];
                for i in 0..n {
                    let row = &self.nodes[a.0].data[i * m..(i + 1) * m];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                    for &e in &exps {
                        sum += e;
                    }
                    for j in 0..m {
                        let p = exps[j] / sum;
                        let delta = if j == i { 1.0 } else { 0.0 };
                        da[i * m + j] = dy[i] * (p - delta);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::MaskedCrossEntropy { logits, targets } => {
                let (r, c) = self.rows_cols(*logits);
                let count = targets.iter().flatten().count();
                if count == 0 {
                    return;
                }
                let scale = dy[0] / count as f64;
                let mut da = vec![0.0; r * c];
                for (row, target) in targets.iter().enumerate() {
                    if let Some(t) = target {
                        let z = &self.nodes[logits.0].data[row * c..(row + 1) * c];
                        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
                        for &e in &exps {
                            sum += e;
                        }
                        for j in 0..c {
                            let p = exps[j] / sum;
                            let delta = if j == *t { 1.0 } else { 0.0 };
                            da[row * c + j] = scale * (p - delta);
                        }
                    }
                }
                self.accumulate(*logits, &da);
            }
            Op::DotConst { a, w } => {
                let da: Vec<f64> = w.iter().map(|&wi| dy[0] * wi).collect();
                self.accumulate(*a, &da);
            }
            Op::RowwiseBlockDot { q, h, k } => {
                let (n, d) = self.rows_cols(*q);
                let mut dq = vec![0.0; n * d];
                let mut dh = vec![0.0; n * k * d];
                for i in 0..n {
                    for m in 0..*k {
                        let g = dy[i * k + m];
                        for j in 0..d {
                            dq[i * d + j] += g * self.nodes[h.0].data[(i * k + m) * d + j];
                            dh[(i * k + m) * d + j] += g * self.nodes[q.0].data[i * d + j];
                        }
                    }
                }
                self.accumulate(*q, &dq);
                self.accumulate(*h, &dh);
            }
        }
    }
}
