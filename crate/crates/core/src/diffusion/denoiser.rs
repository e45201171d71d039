//! Noise-prediction network: a two-resolution encoder-decoder over patch
//! tokens with a timestep embedding and cross-attention on the prompt.
//!
//! Layout for the default 24x24 images with 3x3 patches:
//!
//! ```text
//! patchify 8x8x27 -> C1 -> resblock -> (skip)
//!   merge 2x2 -> 4x4xC2 -> resblock -> cross-attn
//!   unmerge -> 8x8xC1 ++ skip -> C1 -> resblock -> cross-attn -> 27 -> unpatchify
//! ```
//!
//! The network output `F` is combined with the input as
//! `eps = c_skip x_t + c_out F`, where `c_skip x_t` is the best linear noise
//! estimate for data of second moment `sigma_data^2` and `c_out` is the
//! standard deviation of what remains, so `F` always has a unit-scale target.
//!
//! Residual blocks are 3x3 convolutions on the token grid. Cross-attention
//! keys and values for text tokens use backbone projections; fused adapter
//! tokens get their own projections under the `adapter.` prefix, and their
//! attention weights are scaled by the adapter scale before renormalisation.

use crate::attention::attend;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binding, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Channels at the patch-grid resolution.
    pub c1: usize,
    /// Channels at the merged (half) resolution.
    pub c2: usize,
    pub heads: usize,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
    /// Width of the prompt tokens attended to.
    pub context_dim: usize,
    /// Root mean square of training pixels in `[-1, 1]`.
    pub sigma_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 24,
            patch: 3,
            c1: 64,
            c2: 96,
            heads: 4,
            time_dim: 64,
            context_dim: 64,
            sigma_data: 0.8,
        }
    }
}

impl DenoiserConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.patch > 0
            && self.image_size % self.patch == 0
            && self.grid() % 2 == 0
            && self.heads > 0
            && self.c1 % self.heads == 0
            && self.c2 % self.heads == 0
            && self.time_dim % 2 == 0
            && self.time_dim > 0
            && self.context_dim > 0
            && self.sigma_data > 0.0
            && self.sigma_data.is_finite();
        if ok {
            Ok(())
        } else {
            Err(dim_err(format!("inconsistent denoiser configuration {self:?}")))
        }
    }
}

/// Noise level of one image: its base timestep and cumulative signal fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timestep {
    pub t: usize,
    pub alpha_bar: f64,
}

impl Timestep {
    pub fn of(sched: &NoiseSchedule, t: usize) -> Result<Self> {
        Ok(Timestep {
            t,
            alpha_bar: sched.alpha_bar(t)?,
        })
    }

    pub fn batch(sched: &NoiseSchedule, ts: &[usize]) -> Result<Vec<Self>> {
        ts.iter().map(|&t| Timestep::of(sched, t)).collect()
    }

    /// `(c_skip, c_out)` for data of root mean square `sigma_data`.
    pub fn preconditioning(&self, sigma_data: f64) -> (f64, f64) {
        let (ab, s2) = (self.alpha_bar, sigma_data * sigma_data);
        let var = ab * s2 + 1.0 - ab;
        ((1.0 - ab).sqrt() / var, (ab * s2 / var).sqrt())
    }
}

/// Names of the cross-attention blocks, in forward order.
pub const ATTENTION_BLOCKS: [&str; 2] = ["mid_attn", "dec_attn"];

fn block_width(cfg: &DenoiserConfig, block: &str) -> usize {
    if block == "mid_attn" {
        cfg.c2
    } else {
        cfg.c1
    }
}

/// Backbone parameters under the `unet.` prefix.
pub fn init_params<T: Real>(cfg: &DenoiserConfig, rng: &mut RngStream) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let (c1, c2, td) = (cfg.c1, cfg.c2, cfg.time_dim);
    let th = 2 * td;
    p.init_linear("unet.time.w1", td, th, rng);
    p.init_zeros("unet.time.b1", &[th]);
    p.init_linear("unet.time.w2", th, th, rng);
    p.init_zeros("unet.time.b2", &[th]);
    p.init_linear("unet.in.w", cfg.patch_dim(), c1, rng);
    p.init_zeros("unet.in.b", &[c1]);
    p.init_normal("unet.pos", &[cfg.tokens(), c1], 0.02, rng);
    for (name, c) in [("enc", c1), ("mid", c2), ("dec", c1)] {
        p.init_linear(&format!("unet.{name}.w1"), 9 * c, c, rng);
        p.init_zeros(&format!("unet.{name}.b1"), &[c]);
        p.init_linear(&format!("unet.{name}.tw"), th, c, rng);
        p.init_zeros(&format!("unet.{name}.tb"), &[c]);
        p.init_zeros(&format!("unet.{name}.w2"), &[9 * c, c]);
        p.init_zeros(&format!("unet.{name}.b2"), &[c]);
    }
    p.init_linear("unet.down.w", 4 * c1, c2, rng);
    p.init_zeros("unet.down.b", &[c2]);
    p.init_linear("unet.up.w", c2, 4 * c1, rng);
    p.init_zeros("unet.up.b", &[4 * c1]);
    p.init_linear("unet.fuse.w", 2 * c1, c1, rng);
    p.init_zeros("unet.fuse.b", &[c1]);
    for block in ATTENTION_BLOCKS {
        let c = block_width(cfg, block);
        p.init_linear(&format!("unet.{block}.wq"), c, c, rng);
        p.init_linear(&format!("unet.{block}.wk"), cfg.context_dim, c, rng);
        p.init_linear(&format!("unet.{block}.wv"), cfg.context_dim, c, rng);
        p.init_zeros(&format!("unet.{block}.wo"), &[c, c]);
    }
    p.init_linear("unet.out.w", c1, cfg.patch_dim(), rng);
    p.init_zeros("unet.out.b", &[cfg.patch_dim()]);
    Ok(p)
}

/// Key/value projections for fused tokens, initialised as copies of the
/// backbone's text projections.
pub fn init_adapter_projections<T: Real>(backbone: &ParamSet<T>) -> Result<ParamSet<T>> {
    let mut p = ParamSet::new();
    for block in ATTENTION_BLOCKS {
        for w in ["wk", "wv"] {
            let src = backbone.get(&format!("unet.{block}.{w}"))?.clone();
            p.insert(format!("adapter.{block}.{w}"), src);
        }
    }
    Ok(p)
}

/// Sinusoidal features `[sin(t f_i), cos(t f_i)]`, `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_features<T: Real>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::c((t as f64 * f).sin()));
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::c((t as f64 * f).cos()));
        }
    }
    Tensor::new([ts.len(), dim], data).expect("timestep feature shape")
}

/// `[B, H, W, 3]` image to `[B, (H/p)(W/p), p*p*3]` patch tokens (row-major patches).
pub fn patchify<T: Real>(g: &mut Graph<T>, x: Var, patch: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] % patch != 0 || s[2] % patch != 0 || s[3] != 3 {
        return Err(dim_err(format!("patchify expects [B, H, W, 3] divisible by {patch}, got {s:?}")));
    }
    let (b, gh, gw) = (s[0], s[1] / patch, s[2] / patch);
    let x = g.reshape(x, &[b, gh, patch, gw, patch * 3])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    g.reshape(x, &[b, gh * gw, patch * patch * 3])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(g: &mut Graph<T>, x: Var, patch: usize, gh: usize, gw: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != gh * gw || s[2] != patch * patch * 3 {
        return Err(dim_err(format!("unpatchify of {s:?} on a {gh}x{gw} grid")));
    }
    let b = s[0];
    let x = g.reshape(x, &[b, gh, gw, patch, patch * 3])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    g.reshape(x, &[b, gh * patch, gw * patch, 3])
}

/// Plain-tensor version of [`patchify`] for a single `[H, W, 3]` image.
pub fn patch_tokens<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] % patch != 0 || s[1] % patch != 0 || s[2] != 3 {
        return Err(dim_err(format!("expected an [H, W, 3] image divisible by {patch}, got {s:?}")));
    }
    let (gh, gw) = (s[0] / patch, s[1] / patch);
    let row = s[1] * 3;
    let mut out = Vec::with_capacity(image.numel());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let at = (py * patch + dy) * row + px * patch * 3;
                out.extend_from_slice(&image.data()[at..at + patch * 3]);
            }
        }
    }
    Tensor::new([gh * gw, patch * patch * 3], out)
}

/// `[B, h*w, C]` grid to `[B, (h/2)(w/2), 4C]` by stacking 2x2 neighbourhoods.
fn merge2x2<T: Real>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c) = (s[0], s[2]);
    let x = g.reshape(x, &[b, h / 2, 2, w / 2, 2 * c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    g.reshape(x, &[b, (h / 2) * (w / 2), 4 * c])
}

fn unmerge2x2<T: Real>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, c) = (s[0], s[2] / 4);
    let x = g.reshape(x, &[b, h / 2, w / 2, 2, 2 * c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4])?;
    g.reshape(x, &[b, h * w, c])
}

/// Prompt tokens seen by the cross-attention blocks.
#[derive(Clone, Debug)]
pub struct Context<T: Real> {
    /// Text-provenance tokens `[B, M, D_ctx]`.
    pub text: Var,
    /// Fused-provenance tokens `[B, N, D_ctx]`, if the adapter is active.
    pub fused: Option<Var>,
    pub adapter_scale: T,
}

impl<T: Real> Context<T> {
    pub fn text_only(text: Var) -> Self {
        Context {
            text,
            fused: None,
            adapter_scale: T::zero(),
        }
    }

    /// Fused tokens that actually take part in attention; a zero scale drops them.
    fn active_fused(&self) -> Option<Var> {
        self.fused.filter(|_| self.adapter_scale > T::zero())
    }
}

fn res_block<T: Real>(g: &mut Graph<T>, p: &Binding, name: &str, x: Var, h: usize, w: usize, temb: Var) -> Result<Var> {
    let get = |k: &str| p.get(&format!("unet.{name}.{k}"));
    let b = g.shape(x)[0];
    let y = g.layer_norm(x, LN_EPS)?;
    let y = g.unfold3x3(y, h, w)?;
    let y = g.linear(y, get("w1")?, Some(get("b1")?))?;
    let tproj = g.linear(temb, get("tw")?, Some(get("tb")?))?;
    let c = g.shape(tproj)[1];
    let tproj = g.reshape(tproj, &[b, 1, c])?;
    let y = g.add(y, tproj)?;
    let y = g.gelu(y)?;
    let y = g.layer_norm(y, LN_EPS)?;
    let y = g.unfold3x3(y, h, w)?;
    let y = g.linear(y, get("w2")?, Some(get("b2")?))?;
    g.add(x, y)
}

fn cross_attention<T: Real>(g: &mut Graph<T>, p: &Binding, block: &str, x: Var, ctx: &Context<T>, heads: usize) -> Result<Var> {
    let get = |k: &str| p.get(&format!("unet.{block}.{k}"));
    let q_in = g.layer_norm(x, LN_EPS)?;
    let q = g.matmul(q_in, get("wq")?)?;
    let mut k = g.matmul(ctx.text, get("wk")?)?;
    let mut v = g.matmul(ctx.text, get("wv")?)?;
    let mut weights = None;
    if let Some(fused) = ctx.active_fused() {
        let kf = g.matmul(fused, p.get(&format!("adapter.{block}.wk"))?)?;
        let vf = g.matmul(fused, p.get(&format!("adapter.{block}.wv"))?)?;
        k = g.concat(&[k, kf], 1)?;
        v = g.concat(&[v, vf], 1)?;
        let (m, n) = (g.shape(ctx.text)[1], g.shape(fused)[1]);
        let mut kw = vec![T::one(); m];
        kw.extend(std::iter::repeat(ctx.adapter_scale).take(n));
        weights = Some(kw);
    }
    let (out, _) = attend(g, q, k, v, heads, weights.as_deref())?;
    let out = g.matmul(out, get("wo")?)?;
    g.add(x, out)
}

/// Predicted noise `[B, H, W, 3]` for noisy images `x_t [B, H, W, 3]`, one
/// noise level per image.
pub fn denoise<T: Real>(
    g: &mut Graph<T>,
    p: &Binding,
    cfg: &DenoiserConfig,
    x_t: Var,
    steps: &[Timestep],
    ctx: &Context<T>,
) -> Result<Var> {
    let s = g.shape(x_t).to_vec();
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != 3 {
        return Err(dim_err(format!(
            "denoiser expects [B, {0}, {0}, 3], got {s:?}",
            cfg.image_size
        )));
    }
    let b = s[0];
    if steps.len() != b {
        return Err(dim_err(format!("{} timesteps for a batch of {b}", steps.len())));
    }
    let cs = g.shape(ctx.text).to_vec();
    if cs.len() != 3 || cs[0] != b || cs[2] != cfg.context_dim {
        return Err(dim_err(format!("context tokens {cs:?} for a batch of {b}")));
    }
    let (gs, hs) = (cfg.grid(), cfg.grid() / 2);

    let ts: Vec<usize> = steps.iter().map(|s| s.t).collect();
    let tf = g.constant(timestep_features(&ts, cfg.time_dim));
    let temb = g.linear(tf, p.get("unet.time.w1")?, Some(p.get("unet.time.b1")?))?;
    let temb = g.gelu(temb)?;
    let temb = g.linear(temb, p.get("unet.time.w2")?, Some(p.get("unet.time.b2")?))?;
    let temb = g.gelu(temb)?;

    let tokens = patchify(g, x_t, cfg.patch)?;
    let h = g.linear(tokens, p.get("unet.in.w")?, Some(p.get("unet.in.b")?))?;
    let h = g.add(h, p.get("unet.pos")?)?;
    let skip = res_block(g, p, "enc", h, gs, gs, temb)?;

    let m = merge2x2(g, skip, gs, gs)?;
    let m = g.linear(m, p.get("unet.down.w")?, Some(p.get("unet.down.b")?))?;
    let m = res_block(g, p, "mid", m, hs, hs, temb)?;
    let m = cross_attention(g, p, "mid_attn", m, ctx, cfg.heads)?;

    let u = g.linear(m, p.get("unet.up.w")?, Some(p.get("unet.up.b")?))?;
    let u = unmerge2x2(g, u, gs, gs)?;
    let h = g.concat(&[u, skip], 2)?;
    let h = g.linear(h, p.get("unet.fuse.w")?, Some(p.get("unet.fuse.b")?))?;
    let h = res_block(g, p, "dec", h, gs, gs, temb)?;
    let h = cross_attention(g, p, "dec_attn", h, ctx, cfg.heads)?;

    let h = g.layer_norm(h, LN_EPS)?;
    let out = g.linear(h, p.get("unet.out.w")?, Some(p.get("unet.out.b")?))?;
    let f = unpatchify(g, out, cfg.patch, gs, gs)?;

    let coef: Vec<(f64, f64)> = steps.iter().map(|s| s.preconditioning(cfg.sigma_data)).collect();
    let c_skip = g.constant(Tensor::from_fn([b, 1, 1, 1], |i| T::c(coef[i].0)));
    let c_out = g.constant(Tensor::from_fn([b, 1, 1, 1], |i| T::c(coef[i].1)));
    let skip = g.mul(x_t, c_skip)?;
    let f = g.mul(f, c_out)?;
    g.add(skip, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            patch: 2,
            c1: 4,
            c2: 6,
            heads: 2,
            time_dim: 4,
            context_dim: 3,
            sigma_data: 0.8,
        }
    }

    fn at(ts: &[usize]) -> Vec<Timestep> {
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        Timestep::batch(&sched, ts).unwrap()
    }

    #[test]
    fn patchify_round_trip_and_layout() {
        let mut g = Graph::<f64>::new();
        let img = Tensor::from_fn([1, 4, 4, 3], |i| i as f64);
        let x = g.constant(img.clone());
        let t = patchify(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(t), &[1, 4, 12]);
        // first patch: pixels (0,0) (0,1) (1,0) (1,1)
        let first: Vec<f64> = g.value(t).data()[..12].to_vec();
        let want: Vec<f64> = [0, 1, 2, 3, 4, 5, 12, 13, 14, 15, 16, 17].iter().map(|&v| v as f64).collect();
        assert_eq!(first, want);
        let single = patch_tokens(&img.index_outer(0).unwrap(), 2).unwrap();
        assert_eq!(single.data(), g.value(t).data());
        let back = unpatchify(&mut g, t, 2, 2, 2).unwrap();
        assert_eq!(g.value(back), &img);
    }

    #[test]
    fn merge_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 16, 3], |i| i as f64));
        let m = merge2x2(&mut g, x, 4, 4).unwrap();
        assert_eq!(g.shape(m), &[2, 4, 12]);
        // merged token 0 holds grid cells (0,0) (0,1) (1,0) (1,1)
        let row: Vec<f64> = g.value(m).data()[..12].to_vec();
        let want: Vec<f64> = [0, 1, 2, 3, 4, 5, 12, 13, 14, 15, 16, 17].iter().map(|&v| v as f64).collect();
        assert_eq!(row, want);
        let u = unmerge2x2(&mut g, m, 4, 4).unwrap();
        assert_eq!(g.value(u), g.value(x));
    }

    #[test]
    fn output_matches_input_shape_and_untrained_residuals_vanish() {
        let cfg = DenoiserConfig::default();
        let mut rng = RngStream::new(0, 2);
        let p: ParamSet<f32> = init_params(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let x = g.constant(rng.normal_tensor(&[2, 24, 24, 3]));
        let ctx = g.constant(rng.normal_tensor(&[2, 4, 64]));
        let y = denoise(&mut g, &b, &cfg, x, &at(&[1, 1000]), &Context::text_only(ctx)).unwrap();
        assert_eq!(g.shape(y), &[2, 24, 24, 3]);
        assert!(p.numel() > 200_000 && p.numel() < 600_000, "{}", p.numel());
    }

    #[test]
    fn zero_scale_ignores_fused_tokens_bitwise() {
        let cfg = tiny();
        let mut rng = RngStream::new(4, 2);
        let mut p: ParamSet<f64> = init_params(&cfg, &mut rng).unwrap();
        for block in ATTENTION_BLOCKS {
            let c = block_width(&cfg, block);
            p.init_normal(&format!("unet.{block}.wo"), &[c, c], 0.5, &mut rng);
        }
        p.extend(init_adapter_projections(&p).unwrap());
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let x = g.constant(rng.normal_tensor(&[1, 8, 8, 3]));
        let text = g.constant(rng.normal_tensor(&[1, 2, 3]));
        let fused = g.constant(rng.normal_tensor(&[1, 5, 3]));
        let plain = denoise(&mut g, &b, &cfg, x, &at(&[7]), &Context::text_only(text)).unwrap();
        let off = Context { text, fused: Some(fused), adapter_scale: 0.0 };
        let zero = denoise(&mut g, &b, &cfg, x, &at(&[7]), &off).unwrap();
        assert_eq!(g.value(plain), g.value(zero));
        let on = Context { text, fused: Some(fused), adapter_scale: 0.6 };
        let y = denoise(&mut g, &b, &cfg, x, &at(&[7]), &on).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(plain)) > 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut rng = RngStream::new(9, 2);
        let mut p: ParamSet<f64> = init_params(&cfg, &mut rng).unwrap();
        // nonzero residual branches so every path carries gradient
        for name in ["enc", "mid", "dec"] {
            let c = if name == "mid" { cfg.c2 } else { cfg.c1 };
            p.init_normal(&format!("unet.{name}.w2"), &[9 * c, c], 0.3, &mut rng);
        }
        for block in ATTENTION_BLOCKS {
            let c = block_width(&cfg, block);
            p.init_normal(&format!("unet.{block}.wo"), &[c, c], 0.5, &mut rng);
        }
        p.extend(init_adapter_projections(&p).unwrap());
        let names: Vec<String> = p.names().cloned().collect();
        let mut inputs: Vec<Tensor<f64>> = vec![
            rng.normal_tensor(&[2, 8, 8, 3]),
            rng.normal_tensor(&[2, 2, 3]),
            rng.normal_tensor(&[2, 3, 3]),
        ];
        inputs.extend(names.iter().map(|n| p.get(n).unwrap().clone()));
        let report = check_gradients(
            |g, v| {
                let mut b = ParamSet::<f64>::new().bind(g, |_| false);
                for (i, n) in names.iter().enumerate() {
                    b.insert(n, v[3 + i]);
                }
                let ctx = Context { text: v[1], fused: Some(v[2]), adapter_scale: 0.6 };
                let y = denoise(g, &b, &cfg, v[0], &at(&[3, 40]), &ctx)?;
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
    fn preconditioning_is_the_linear_noise_estimate() {
        for ab in [0.9999, 0.5, 0.01, 4e-5] {
            let (skip, out) = Timestep { t: 1, alpha_bar: ab }.preconditioning(0.8);
            // residual variance of the best linear estimate: 1 - (1 - ab) / var
            let var = ab * 0.64 + 1.0 - ab;
            assert!((skip - (1.0 - ab).sqrt() / var).abs() < 1e-15);
            assert!((out * out - (1.0 - skip * (1.0 - ab).sqrt())).abs() < 1e-12);
        }
        // zero network output leaves only the skip term
        let cfg = tiny();
        let mut rng = RngStream::new(5, 2);
        let mut p: ParamSet<f64> = init_params(&cfg, &mut rng).unwrap();
        p.init_zeros("unet.out.w", &[cfg.c1, cfg.patch_dim()]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, |_| false);
        let xt: Tensor<f64> = rng.normal_tensor(&[1, 8, 8, 3]);
        let x = g.constant(xt.clone());
        let text = g.constant(rng.normal_tensor(&[1, 2, 3]));
        let steps = at(&[600]);
        let y = denoise(&mut g, &b, &cfg, x, &steps, &Context::text_only(text)).unwrap();
        let (skip, _) = steps[0].preconditioning(0.8);
        assert!(g.value(y).max_abs_diff(&xt.map(|v| v * skip)) < 1e-15);
    }
}
