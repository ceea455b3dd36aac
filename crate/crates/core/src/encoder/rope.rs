//! Rotary positional embeddings: dimension pairs (2i, 2i+1) of each head are
//! rotated by pos · base^(−2i/head_dim), encoding relative position in the
//! query/key inner product.

use crate::error::{Error, Result};
use crate::numeric::{kernels, Tensor};

/// Apply the rotation to a [batch × heads × seq × head_dim] tensor.
/// `positions` supplies the (possibly offset) position of each sequence slot.
pub fn rope_apply(x: &Tensor, positions: &[f64], base: f64) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "rope_apply: expected [batch, heads, seq, head_dim], got {s:?}"
        )));
    }
    if s[3] % 2 != 0 {
        return Err(Error::Config(format!("rope_apply: head_dim {} must be even", s[3])));
    }
    if positions.len() != s[2] {
        return Err(Error::Dimension(format!(
            "rope_apply: {} positions for sequence length {}",
            positions.len(),
            s[2]
        )));
    }
    let mut out = vec![0.0; x.numel()];
    kernels::rope_rotate(x.data(), s[0], s[1], s[2], s[3], positions, base, 1.0, &mut out);
    Tensor::new(s.to_vec(), out)
}
