//! Text-image aligning augmentation: style tokens query the text tokens, and
//! the attention-weighted text values become multimodal tokens that live in
//! the style tokens' space.

use crate::attention::{attend, canonical_order};
use crate::error::{contract, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TiaaConfig {
    /// Model dimension of the style tokens and of the output.
    pub dim: usize,
    /// Dimension of the incoming text tokens.
    pub text_dim: usize,
    pub heads: usize,
}

impl Default for TiaaConfig {
    fn default() -> Self {
        TiaaConfig {
            dim: 64,
            text_dim: 64,
            heads: 1,
        }
    }
}

pub fn init_params<T: Real>(cfg: &TiaaConfig, rng: &mut RngStream) -> Result<ParamSet<T>> {
    if cfg.heads == 0 || cfg.dim % cfg.heads != 0 {
        return Err(dim_err(format!("D={} not divisible by {} heads", cfg.dim, cfg.heads)));
    }
    let mut p = ParamSet::new();
    p.init_linear("tiaa.wq", cfg.dim, cfg.dim, rng);
    p.init_linear("tiaa.wk", cfg.text_dim, cfg.dim, rng);
    p.init_linear("tiaa.wv", cfg.text_dim, cfg.dim, rng);
    Ok(p)
}

/// Head-averaged attention of style queries over text tokens, `[B, N, M]`.
/// Every `(b, n)` row is a probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor<f64>,
}

pub struct Aligned {
    /// Multimodal tokens `E'_IT [B, N, D]`.
    pub tokens: Var,
    pub map: AttentionMap,
}

#[derive(Clone, Copy, Debug)]
pub struct TiaaWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl TiaaWeights {
    pub fn from_binding(b: &Binding) -> Result<Self> {
        Ok(TiaaWeights {
            wq: b.get("tiaa.wq")?,
            wk: b.get("tiaa.wk")?,
            wv: b.get("tiaa.wv")?,
        })
    }
}

/// Cross-attention of style tokens `E_I [B,N,D]` over text tokens `E_T [B,M,D_t]`.
///
/// `text_mask` optionally excludes text positions (shared across the batch);
/// fixed-length captions pass `None`.
pub fn align<T: Real>(
    g: &mut Graph<T>,
    style: Var,
    text: Var,
    w: &TiaaWeights,
    heads: usize,
    text_mask: Option<&[bool]>,
) -> Result<Aligned> {
    let (ss, st) = (g.shape(style).to_vec(), g.shape(text).to_vec());
    if ss.len() != 3 || st.len() != 3 || ss[0] != st[0] {
        return Err(dim_err(format!(
            "align: style tokens {ss:?} and text tokens {st:?} disagree"
        )));
    }
    let (b, n, m) = (ss[0], ss[1], st[1]);
    if m == 0 {
        return Err(contract("align needs at least one text token"));
    }
    if g.shape(w.wq)[0] != ss[2] || g.shape(w.wk)[0] != st[2] {
        return Err(dim_err(format!(
            "align: projections {:?}/{:?} do not accept {ss:?}/{st:?}",
            g.shape(w.wq),
            g.shape(w.wk)
        )));
    }
    // Masked calls keep the caption order so the mask lines up with every row.
    let order = match text_mask {
        Some(_) => vec![(0..m).collect::<Vec<_>>(); b],
        None => canonical_order(g.value(text)),
    };
    let text_sorted = g.gather_rows(text, &order)?;
    let mask_weights: Option<Vec<T>> = match text_mask {
        Some(mask) if mask.len() != m => {
            return Err(dim_err(format!("text mask of length {} for {m} tokens", mask.len())))
        }
        Some(mask) => Some(mask.iter().map(|&k| if k { T::one() } else { T::zero() }).collect()),
        None => None,
    };
    let q = g.matmul(style, w.wq)?;
    let k = g.matmul(text_sorted, w.wk)?;
    let v = g.matmul(text_sorted, w.wv)?;
    let (tokens, weights) = attend(g, q, k, v, heads, mask_weights.as_deref())?;

    // head-average, then undo the canonical column order
    let wt = g.value(weights);
    let h = wt.shape()[1];
    let mut map = vec![0.0; b * n * m];
    for bi in 0..b {
        for hi in 0..h {
            for ni in 0..n {
                for (col, &orig) in order[bi].iter().enumerate() {
                    let src = ((bi * h + hi) * n + ni) * m + col;
                    map[(bi * n + ni) * m + orig] += wt.data()[src].f64() / h as f64;
                }
            }
        }
    }
    Ok(Aligned {
        tokens,
        map: AttentionMap {
            weights: Tensor::new([b, n, m], map)?,
        },
    })
}

/// Shannon entropy (nats) of every attention row, `[B, N]`.
pub fn attention_entropy(map: &AttentionMap) -> Tensor<f64> {
    let s = map.weights.shape();
    let m = s[2];
    let data = map
        .weights
        .data()
        .chunks_exact(m)
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .collect();
    Tensor::new([s[0], s[1]], data).expect("entropy shape")
}

impl AttentionMap {
    /// CSV with one row per query and one column per text token (batch 0).
    pub fn to_csv(&self, batch: usize) -> String {
        let s = self.weights.shape();
        let (n, m) = (s[1], s[2]);
        let mut out = String::from("query");
        for j in 0..m {
            out.push_str(&format!(",token{j}"));
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&i.to_string());
            for j in 0..m {
                out.push_str(&format!(",{:.6}", self.weights.data()[(batch * n + i) * m + j]));
            }
            out.push('\n');
        }
        out
    }
}
