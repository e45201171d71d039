//! Attention-based style extraction: learnable latent queries resample the
//! image tokens of a style reference into a fixed number of style tokens.
//!
//! Each layer runs multi-head perceiver attention of the latents over the
//! image tokens (with a residual onto the latents), then a two-layer GELU
//! refinement, again with a residual. No positional encoding is applied, so
//! the output does not depend on the order of the image tokens.

use crate::attention::{attend, canonical_order};
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AseConfig {
    /// Number of learnable queries (style tokens).
    pub queries: usize,
    /// Model dimension.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the refinement module.
    pub ff_dim: usize,
    /// Dimension of the incoming image tokens.
    pub in_dim: usize,
    /// Let keys/values span the image tokens concatenated with the latents
    /// instead of the image tokens alone.
    pub attend_latents: bool,
}

impl Default for AseConfig {
    fn default() -> Self {
        AseConfig {
            queries: 16,
            dim: 64,
            heads: 4,
            layers: 4,
            ff_dim: 256,
            in_dim: 48,
            attend_latents: false,
        }
    }
}

impl AseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(dim_err(format!(
                "style extractor needs N >= 1 and D divisible by H (N={}, D={}, H={})",
                self.queries, self.dim, self.heads
            )));
        }
        if self.ff_dim < self.dim {
            return Err(dim_err(format!(
                "refinement width {} must be at least D={}",
                self.ff_dim, self.dim
            )));
        }
        Ok(())
    }
}

/// Fresh latent queries `z ~ N(0, 1) / sqrt(D)` of shape `[1, N, D]`.
pub fn init_latents<T: Real>(n: usize, d: usize, rng: &mut RngStream) -> Tensor<T> {
    let scale = 1.0 / (d as f64).sqrt();
    Tensor::from_fn([1, n, d], |_| T::c(rng.normal() * scale))
}

/// Initial parameters under the `ase.` prefix.
pub fn init_params<T: Real>(cfg: &AseConfig, rng: &mut RngStream) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    p.insert("ase.latents", init_latents(cfg.queries, cfg.dim, rng));
    p.init_linear("ase.in_proj", cfg.in_dim, cfg.dim, rng);
    for i in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            p.init_linear(&format!("ase.layer{i}.{w}"), cfg.dim, cfg.dim, rng);
        }
        p.init_linear(&format!("ase.layer{i}.w1"), cfg.dim, cfg.ff_dim, rng);
        p.init_zeros(&format!("ase.layer{i}.b1"), &[cfg.ff_dim]);
        p.init_linear(&format!("ase.layer{i}.w2"), cfg.ff_dim, cfg.dim, rng);
        p.init_zeros(&format!("ase.layer{i}.b2"), &[cfg.dim]);
    }
    Ok(p)
}

/// Repeats `[1, N, D]` latents along the batch axis.
pub fn expand_latents<T: Real>(g: &mut Graph<T>, z: Var, batch: usize) -> Result<Var> {
    g.repeat_outer(z, batch)
}

#[derive(Clone, Copy, Debug)]
pub struct PerceiverLayer {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
    pub attend_latents: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct NrmLayer {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct PerceiverOutput {
    /// Updated latents `z' = attention + z`, `[B, N, D]`.
    pub latents: Var,
    /// Attention weights `[B, H, N, S]`, columns in canonical token order.
    pub weights: Var,
    /// `order[b][j]` is the original index of the token in column `j`.
    pub order: Vec<Vec<usize>>,
}

/// One perceiver attention update of latents `z [B,N,D]` over tokens `x [B,S,D]`.
pub fn perceiver_attend<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    z: Var,
    p: &PerceiverLayer,
) -> Result<PerceiverOutput> {
    let (sx, sz) = (g.shape(x).to_vec(), g.shape(z).to_vec());
    if sx.len() != 3 || sz.len() != 3 || sx[0] != sz[0] || sx[2] != sz[2] {
        return Err(dim_err(format!(
            "perceiver attention: tokens {sx:?} and latents {sz:?} disagree"
        )));
    }
    let order = canonical_order(g.value(x));
    let x = g.gather_rows(x, &order)?;
    let kv = if p.attend_latents { g.concat(&[x, z], 1)? } else { x };
    let q = g.matmul(z, p.wq)?;
    let k = g.matmul(kv, p.wk)?;
    let v = g.matmul(kv, p.wv)?;
    let (heads_out, weights) = attend(g, q, k, v, p.heads, None)?;
    let out = g.matmul(heads_out, p.wo)?;
    let latents = g.add(out, z)?;
    Ok(PerceiverOutput {
        latents,
        weights,
        order,
    })
}

/// `W2 GELU(W1 z' + b1) + b2 + z'`.
pub fn nrm_refine<T: Real>(g: &mut Graph<T>, zp: Var, p: &NrmLayer) -> Result<Var> {
    let h = g.linear(zp, p.w1, Some(p.b1))?;
    let h = g.gelu(h)?;
    let h = g.linear(h, p.w2, Some(p.b2))?;
    g.add(h, zp)
}

/// Style tokens `E_I [B, N, D]` from image tokens `[B, S, D_in]`.
pub fn extract_style<T: Real>(
    g: &mut Graph<T>,
    image_tokens: Var,
    params: &Binding,
    cfg: &AseConfig,
) -> Result<Var> {
    let shape = g.shape(image_tokens).to_vec();
    if shape.len() != 3 || shape[2] != cfg.in_dim {
        return Err(dim_err(format!(
            "style extractor expects [B, S, {}] tokens, got {shape:?}",
            cfg.in_dim
        )));
    }
    let x = g.matmul(image_tokens, params.get("ase.in_proj")?)?;
    let mut z = expand_latents(g, params.get("ase.latents")?, shape[0])?;
    for i in 0..cfg.layers {
        let name = |w: &str| format!("ase.layer{i}.{w}");
        let attn = PerceiverLayer {
            wq: params.get(&name("wq"))?,
            wk: params.get(&name("wk"))?,
            wv: params.get(&name("wv"))?,
            wo: params.get(&name("wo"))?,
            heads: cfg.heads,
            attend_latents: cfg.attend_latents,
        };
        let nrm = NrmLayer {
            w1: params.get(&name("w1"))?,
            b1: params.get(&name("b1"))?,
            w2: params.get(&name("w2"))?,
            b2: params.get(&name("b2"))?,
        };
        let zp = perceiver_attend(g, x, z, &attn)?.latents;
        z = nrm_refine(g, zp, &nrm)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn identity_layer(g: &mut Graph<f64>, d: usize) -> PerceiverLayer {
        let eye = g.constant(Tensor::eye(d));
        PerceiverLayer {
            wq: eye,
            wk: eye,
            wv: eye,
            wo: eye,
            heads: 1,
            attend_latents: false,
        }
    }

    #[test]
    fn latents_shape_and_unit_dimension() {
        let mut rng = RngStream::new(0, 9);
        let z: Tensor<f64> = init_latents(16, 64, &mut rng);
        assert_eq!(z.shape(), &[1, 16, 64]);
        let mut r1 = RngStream::new(5, 1);
        let mut r2 = RngStream::new(5, 1);
        let z1: Tensor<f64> = init_latents(3, 1, &mut r1);
        let raw: Vec<f64> = (0..3).map(|_| r2.normal()).collect();
        assert_eq!(z1.data(), &raw[..]);
    }

    #[test]
    fn latent_init_std_is_inverse_sqrt_dim() {
        let mut rng = RngStream::new(3, 4);
        let d = 256;
        let z: Tensor<f64> = init_latents(16, d, &mut rng);
        let n = z.numel() as f64;
        let mean = z.data().iter().sum::<f64>() / n;
        let std = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 1.0 / (d as f64).sqrt();
        assert!(std > 0.9 * target && std < 1.1 * target, "std {std}");
    }

    #[test]
    fn expand_repeats_and_sums_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.param(Tensor::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = expand_latents(&mut g, z, 3).unwrap();
        assert_eq!(g.shape(e), &[3, 2, 2]);
        for b in 0..3 {
            assert_eq!(g.value(e).index_outer(b).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        }
        let s = g.sum(e).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(z).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn single_token_attention_returns_token_plus_latent() {
        let mut g = Graph::<f64>::new();
        let p = identity_layer(&mut g, 2);
        let x = g.constant(Tensor::from_f64([1, 1, 2], &[0.3, -0.7]).unwrap());
        let z = g.constant(Tensor::from_f64([1, 2, 2], &[1.0, 0.0, 0.5, 2.0]).unwrap());
        let out = perceiver_attend(&mut g, x, z, &p).unwrap().latents;
        let want = [1.3, -0.7, 0.8, 1.3];
        for (a, b) in g.value(out).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_hand_example() {
        let mut g = Graph::<f64>::new();
        let p = identity_layer(&mut g, 2);
        let x = g.constant(Tensor::from_f64([1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let z = g.constant(Tensor::from_f64([1, 1, 2], &[1.0, 0.0]).unwrap());
        let out = perceiver_attend(&mut g, x, z, &p).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        let wv = g.value(out.weights).data().to_vec();
        let col = out.order[0].iter().position(|&j| j == 0).unwrap();
        assert!((wv[col] - w0).abs() < 1e-12 && (wv[col] - 0.6698).abs() < 1e-4);
        let zp = g.value(out.latents).data();
        assert!((zp[0] - 1.6698).abs() < 1e-4 && (zp[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn zero_refinement_is_pure_residual() {
        let mut g = Graph::<f64>::new();
        let zp = g.constant(Tensor::from_f64([1, 2, 2], &[0.1, 0.2, -0.3, 0.4]).unwrap());
        let p = NrmLayer {
            w1: g.constant(Tensor::zeros([2, 3])),
            b1: g.constant(Tensor::zeros([3])),
            w2: g.constant(Tensor::zeros([3, 2])),
            b2: g.constant(Tensor::zeros([2])),
        };
        let out = nrm_refine(&mut g, zp, &p).unwrap();
        assert_eq!(g.value(out), g.value(zp));
    }

    #[test]
    fn scalar_refinement_matches_gelu_one() {
        let mut g = Graph::<f64>::new();
        let one = |g: &mut Graph<f64>, s: &[usize]| g.constant(Tensor::ones(s.to_vec()));
        let zp = one(&mut g, &[1, 1, 1]);
        let p = NrmLayer {
            w1: one(&mut g, &[1, 1]),
            b1: g.constant(Tensor::zeros([1])),
            w2: one(&mut g, &[1, 1]),
            b2: g.constant(Tensor::zeros([1])),
        };
        let out = nrm_refine(&mut g, zp, &p).unwrap();
        assert!((g.value(out).data()[0] - 1.841_344_7).abs() < 1e-7);
    }

    #[test]
    fn refinement_gradients_match_finite_differences() {
        let mut rng = RngStream::new(21, 0);
        let inputs: Vec<Tensor<f64>> = [vec![2, 3, 4], vec![4, 5], vec![5], vec![5, 4], vec![4]]
            .iter()
            .map(|s| rng.normal_tensor(s))
            .collect();
        let report = check_gradients(
            |g, v| {
                let p = NrmLayer { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
                let y = nrm_refine(g, v[0], &p)?;
                let y2 = g.mul(y, y)?;
                g.mean(y2)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-4, "{:?}", report.per_input);
    }

    #[test]
    fn degenerate_stack_returns_expanded_latents() {
        let cfg = AseConfig { layers: 0, queries: 3, dim: 4, heads: 2, ff_dim: 4, in_dim: 6, attend_latents: false };
        let mut rng = RngStream::new(1, 1);
        let p: ParamSet<f64> = init_params(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let x = g.constant(rng.normal_tensor(&[2, 5, 6]));
        let out = extract_style(&mut g, x, &b, &cfg).unwrap();
        assert_eq!(g.shape(out), &[2, 3, 4]);
        let z = p.get("ase.latents").unwrap();
        for bi in 0..2 {
            assert_eq!(g.value(out).index_outer(bi).unwrap().data(), z.data());
        }
    }

    #[test]
    fn rejects_wrong_token_width() {
        let cfg = AseConfig { layers: 1, queries: 2, dim: 4, heads: 2, ff_dim: 8, in_dim: 6, attend_latents: false };
        let mut rng = RngStream::new(1, 1);
        let p: ParamSet<f64> = init_params(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let x = g.constant(rng.normal_tensor(&[1, 5, 7]));
        assert!(matches!(
            extract_style(&mut g, x, &b, &cfg),
            Err(crate::Error::Dimension(_))
        ));
    }
}
