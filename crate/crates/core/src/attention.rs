//! Scaled dot-product attention shared by the style extractor, the aligner and
//! the denoiser's cross-attention.

use std::cmp::Ordering;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Multi-head attention over already projected `q [B,N,D]`, `k, v [B,S,D]`.
///
/// Returns the concatenated head outputs `[B,N,D]` and the attention weights
/// `[B,H,N,S]`. `key_weights` rescales each key column before row
/// renormalisation (`None` is plain softmax).
pub fn attend<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_weights: Option<&[T]>,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(dim_err(format!(
            "attention shapes q {sq:?}, k {sk:?}, v {sv:?} are incompatible"
        )));
    }
    let (b, n, d) = (sq[0], sq[1], sq[2]);
    let s = sk[1];
    if heads == 0 || d % heads != 0 {
        return Err(dim_err(format!("model dimension {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<T>, x: Var, len: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, len, heads, dh])?;
        g.permute(x, &[0, 2, 1, 3])
    };
    let (qh, kh, vh) = if heads == 1 {
        (
            g.reshape(q, &[b, 1, n, d])?,
            g.reshape(k, &[b, 1, s, d])?,
            g.reshape(v, &[b, 1, s, d])?,
        )
    } else {
        (split(g, q, n)?, split(g, k, s)?, split(g, v, s)?)
    };
    let scores = g.matmul_t(qh, kh)?;
    let scores = g.scale(scores, T::c(1.0 / (dh as f64).sqrt()))?;
    let weights = g.weighted_softmax(scores, key_weights)?;
    let out = g.matmul(weights, vh)?;
    let out = if heads == 1 {
        g.reshape(out, &[b, n, d])?
    } else {
        let out = g.permute(out, &[0, 2, 1, 3])?;
        g.reshape(out, &[b, n, d])?
    };
    Ok((out, weights))
}

/// Per-batch permutation that sorts the token rows of `x [B,S,D]`
/// lexicographically. Reductions over tokens taken in this order do not
/// depend on the order tokens arrived in.
pub fn canonical_order<T: Real>(x: &Tensor<T>) -> Vec<Vec<usize>> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let data = x.data();
    (0..b)
        .map(|bi| {
            let row = |i: usize| &data[(bi * n + i) * d..(bi * n + i + 1) * d];
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| {
                row(i)
                    .iter()
                    .zip(row(j))
                    .map(|(a, b)| a.partial_cmp(b).unwrap_or(Ordering::Equal))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            });
            idx
        })
        .collect()
}

