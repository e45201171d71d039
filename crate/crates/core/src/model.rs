//! The full conditioning pipeline: text encoder, style adapter
//! (extraction, alignment, modulation) and the denoiser.
//!
//! Parameter groups are identified by name prefix. `text.` and `unet.` form
//! the backbone; `ase.`, `tiaa.` and `adapter.` form the adapter.

use crate::align::{align, AttentionMap, TiaaConfig, TiaaWeights};
use crate::diffusion::denoiser::{self, denoise, Context, DenoiserConfig, Timestep};
use crate::diffusion::{sample_loop, GuidanceConfig, NoiseSchedule, SamplerKind};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{build_prompt, interpolate, FusionConfig};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::params::{Binding, ParamSet};
use crate::rng::{streams, RngStream};
use crate::style::{extract_style, AseConfig};
use crate::tensor::{Real, Tensor};
use crate::toy_world::encoders::{self, encode_text, null_text, IMAGE_TOKENS, PATCH_DIM};

pub const ADAPTER_PREFIXES: [&str; 3] = ["ase.", "tiaa.", "adapter."];
pub const BACKBONE_PREFIXES: [&str; 2] = ["text.", "unet."];

pub fn is_adapter_param(name: &str) -> bool {
    ADAPTER_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub fn is_backbone_param(name: &str) -> bool {
    BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub text_dim: usize,
    pub ase: AseConfig,
    pub tiaa: TiaaConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text_dim: 64,
            ase: AseConfig::default(),
            tiaa: TiaaConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.ase.validate()?;
        self.denoiser.validate()?;
        if self.tiaa.dim != self.ase.dim || self.tiaa.text_dim != self.text_dim {
            return Err(dim_err("aligner dimensions must match the style and text encoders"));
        }
        if self.ase.dim != self.text_dim || self.denoiser.context_dim != self.text_dim {
            return Err(dim_err(format!(
                "style tokens (D={}), text tokens (D={}) and denoiser context (D={}) must share a width",
                self.ase.dim, self.text_dim, self.denoiser.context_dim
            )));
        }
        if self.ase.in_dim != PATCH_DIM {
            return Err(dim_err("style extractor input width must equal the style patch width"));
        }
        Ok(())
    }
}

/// Text encoder and denoiser parameters.
pub fn init_backbone<T: Real>(cfg: &ModelConfig, rng: &mut RngStream) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = encoders::init_text_params(cfg.text_dim, &mut rng.split(1));
    p.extend(denoiser::init_params(&cfg.denoiser, &mut rng.split(2))?);
    Ok(p)
}

/// Style extractor, aligner, fused-token projections and the null fused tokens.
pub fn init_adapter<T: Real>(cfg: &ModelConfig, backbone: &ParamSet<T>, rng: &mut RngStream) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = crate::style::init_params(&cfg.ase, &mut rng.split(1))?;
    p.extend(crate::align::init_params(&cfg.tiaa, &mut rng.split(2))?);
    p.extend(denoiser::init_adapter_projections(backbone)?);
    p.init_normal("adapter.null_fused", &[cfg.ase.queries, cfg.ase.dim], 1.0, &mut rng.split(3));
    Ok(p)
}

pub fn has_adapter<T: Real>(params: &ParamSet<T>) -> bool {
    params.contains("ase.latents")
}

/// Intermediate tokens of the adapter for one batch.
pub struct AdapterTokens {
    /// Style tokens `E_I`.
    pub style: Var,
    /// Multimodal tokens `E'_IT`.
    pub multimodal: Var,
    /// Fused tokens `E_F`.
    pub fused: Var,
    pub map: AttentionMap,
}

/// Style patches `[B, S, 48]` and text tokens `[B, M, D]` to fused tokens.
/// With `bypass_tiaa` the multimodal tokens are replaced by the style tokens.
pub fn adapter_tokens<T: Real>(
    g: &mut Graph<T>,
    p: &Binding,
    cfg: &ModelConfig,
    style_patches: Var,
    text: Var,
    alpha: f64,
    bypass_tiaa: bool,
) -> Result<AdapterTokens> {
    let style = extract_style(g, style_patches, p, &cfg.ase)?;
    let aligned = align(g, style, text, &TiaaWeights::from_binding(p)?, cfg.tiaa.heads, None)?;
    let multimodal = if bypass_tiaa { style } else { aligned.tokens };
    let fused = interpolate(g, style, multimodal, alpha)?;
    Ok(AdapterTokens {
        style,
        multimodal,
        fused,
        map: aligned.map,
    })
}

fn null_fused<T: Real>(g: &mut Graph<T>, p: &Binding, batch: usize) -> Result<Var> {
    let null = p.get("adapter.null_fused")?;
    let s = g.shape(null).to_vec();
    let null = g.reshape(null, &[1, s[0], s[1]])?;
    g.repeat_outer(null, batch)
}

/// Per-sample choice between a condition and its null replacement.
fn select<T: Real>(g: &mut Graph<T>, cond: Var, null: Var, keep: &[bool]) -> Result<Var> {
    if keep.iter().all(|&k| k) {
        return Ok(cond);
    }
    if keep.iter().all(|&k| !k) {
        return Ok(null);
    }
    let b = keep.len();
    let on = g.constant(Tensor::from_fn([b, 1, 1], |i| if keep[i] { T::one() } else { T::zero() }));
    let off = g.constant(Tensor::from_fn([b, 1, 1], |i| if keep[i] { T::zero() } else { T::one() }));
    let a = g.mul(cond, on)?;
    let n = g.mul(null, off)?;
    g.add(a, n)
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` with one timestep per image.
pub fn diffuse_batch<T: Real>(x0: &Tensor<T>, ts: &[usize], sched: &NoiseSchedule, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() || x0.shape().first() != Some(&ts.len()) {
        return Err(dim_err(format!(
            "diffuse_batch: x0 {:?}, eps {:?}, {} timesteps",
            x0.shape(),
            eps.shape(),
            ts.len()
        )));
    }
    let per = x0.numel() / ts.len();
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Which parameter group a training step optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adapter,
}

/// One training batch with its noise draws.
#[derive(Clone, Debug)]
pub struct TrainBatch<T: Real> {
    /// Clean images `[B, 24, 24, 3]` in `[-1, 1]`.
    pub x0: Tensor<T>,
    pub captions: Vec<Vec<usize>>,
    /// Style reference patches `[B, S, 48]`.
    pub style_patches: Tensor<T>,
    /// Base timesteps in `1..=T`.
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
    /// `false` replaces every condition of that sample by its null tokens.
    pub keep: Vec<bool>,
}

/// How the per-image squared noise error is weighted in the training loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossWeighting {
    /// Plain mean squared error on the noise.
    Eps,
    /// Each image's noise error divided by `c_out^2`, i.e. the squared error of
    /// the network output against its unit-variance target. High noise levels,
    /// where style and content are decided, keep their share of the gradient.
    #[default]
    Preconditioned,
}

impl std::str::FromStr for LossWeighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(LossWeighting::Eps),
            "preconditioned" => Ok(LossWeighting::Preconditioned),
            _ => Err(Error::Config(format!("loss weighting must be eps or preconditioned, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossWeighting::Eps => "eps",
            LossWeighting::Preconditioned => "preconditioned",
        })
    }
}

/// Weighted mean squared error between the drawn noise and the denoiser's prediction.
pub fn training_loss<T: Real>(
    g: &mut Graph<T>,
    p: &Binding,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    batch: &TrainBatch<T>,
    phase: Phase,
    fusion: &FusionConfig,
    weighting: LossWeighting,
) -> Result<Var> {
    let b = batch.captions.len();
    if batch.keep.len() != b || batch.ts.len() != b {
        return Err(dim_err("training batch fields disagree on the batch size"));
    }
    let x_t = g.constant(diffuse_batch(&batch.x0, &batch.ts, sched, &batch.eps)?);
    let text = encode_text(g, p, &batch.captions)?;
    let null = null_text(g, p, b)?;
    let text_in = select(g, text, null, &batch.keep)?;
    let ctx = match phase {
        Phase::Pretrain => Context::text_only(text_in),
        Phase::Adapter => {
            let patches = g.constant(batch.style_patches.clone());
            let fused = adapter_tokens(g, p, cfg, patches, text, fusion.alpha, false)?.fused;
            let nf = null_fused(g, p, b)?;
            let fused = select(g, fused, nf, &batch.keep)?;
            Context {
                text: text_in,
                fused: Some(fused),
                adapter_scale: T::c(fusion.adapter_scale),
            }
        }
    };
    let steps = Timestep::batch(sched, &batch.ts)?;
    let eps_hat = denoise(g, p, &cfg.denoiser, x_t, &steps, &ctx)?;
    let eps = g.constant(batch.eps.clone());
    match weighting {
        LossWeighting::Eps => g.mse(eps_hat, eps),
        LossWeighting::Preconditioned => {
            let sigma_data = cfg.denoiser.sigma_data;
            let w = g.constant(Tensor::from_fn([b, 1, 1, 1], |i| {
                T::c(1.0 / steps[i].preconditioning(sigma_data).1)
            }));
            let diff = g.sub(eps_hat, eps)?;
            let scaled = g.mul(diff, w)?;
            let sq = g.mul(scaled, scaled)?;
            g.mean(sq)
        }
    }
}

/// One image to generate.
#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub caption: Vec<usize>,
    /// Style reference; `None` samples from text alone.
    pub style_ref: Option<Image>,
    /// Label of the image's noise stream under the run seed.
    pub noise_label: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSettings {
    pub fusion: FusionConfig,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub bypass_tiaa: bool,
    /// Images per denoiser batch.
    pub batch: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings {
            fusion: FusionConfig::default(),
            guidance: GuidanceConfig::default(),
            steps: 50,
            sampler: SamplerKind::Ddpm,
            seed: 0,
            bypass_tiaa: false,
            batch: 32,
        }
    }
}

/// Generated images plus the aligner's attention maps (when an adapter ran).
pub struct SampleOutput {
    pub images: Vec<Image>,
    pub maps: Vec<Option<AttentionMap>>,
}

/// Generates one image per request.
///
/// Conditional and unconditional branches share one denoiser batch. Image
/// `i` draws its noise from `SAMPLING.split(noise_label)` under the run seed,
/// so its pixels do not depend on which other requests share its batch.
pub fn sample_images(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    sched: &NoiseSchedule,
    requests: &[SampleRequest],
    settings: &SampleSettings,
) -> Result<SampleOutput> {
    settings.fusion.validate()?;
    settings.guidance.validate()?;
    let strided = sched.respace(settings.steps)?;
    let mut out = SampleOutput {
        images: Vec::with_capacity(requests.len()),
        maps: Vec::with_capacity(requests.len()),
    };
    for chunk in requests.chunks(settings.batch.max(1)) {
        let uses_adapter = chunk.iter().any(|r| r.style_ref.is_some());
        if uses_adapter && chunk.iter().any(|r| r.style_ref.is_none()) {
            return Err(Error::Contract("a sampling batch mixes requests with and without style references".into()));
        }
        if uses_adapter && !has_adapter(params) {
            return Err(Error::Contract("style reference given but the checkpoint has no adapter".into()));
        }
        let (images, maps) = sample_chunk(cfg, params, sched, &strided, chunk, settings, uses_adapter)?;
        out.images.extend(images);
        out.maps.extend(maps);
    }
    Ok(out)
}

fn sample_chunk(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    sched: &NoiseSchedule,
    strided: &NoiseSchedule,
    chunk: &[SampleRequest],
    settings: &SampleSettings,
    uses_adapter: bool,
) -> Result<(Vec<Image>, Vec<Option<AttentionMap>>)> {
    let b = chunk.len();
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, |_| false);
    let captions: Vec<Vec<usize>> = chunk.iter().map(|r| r.caption.clone()).collect();
    let text = encode_text(&mut g, &p, &captions)?;
    let null = null_text(&mut g, &p, b)?;
    let both_text = g.concat(&[text, null], 0)?;
    let mut maps = vec![None; b];
    let ctx = if uses_adapter {
        let mut patches = Vec::with_capacity(b * IMAGE_TOKENS * PATCH_DIM);
        for r in chunk {
            let img = r.style_ref.as_ref().expect("checked by caller");
            patches.extend_from_slice(encoders::encode_image::<f32>(img)?.data());
        }
        let patches = g.constant(Tensor::new([b, IMAGE_TOKENS, PATCH_DIM], patches)?);
        let tokens = adapter_tokens(&mut g, &p, cfg, patches, text, settings.fusion.alpha, settings.bypass_tiaa)?;
        let m = tokens.map.weights.shape()[1..].to_vec();
        for (i, slot) in maps.iter_mut().enumerate() {
            let w = tokens.map.weights.index_outer(i)?.reshape([1, m[0], m[1]])?;
            *slot = Some(AttentionMap { weights: w });
        }
        let nf = null_fused(&mut g, &p, b)?;
        let both_fused = g.concat(&[tokens.fused, nf], 0)?;
        Context {
            text: both_text,
            fused: Some(both_fused),
            adapter_scale: settings.fusion.adapter_scale as f32,
        }
    } else {
        Context::text_only(both_text)
    };
    // the prompt is fixed for the whole chain: run it once, keep it on the tape
    let (prompt, _) = build_prompt(&mut g, ctx.text, ctx.fused)?;
    debug_assert_eq!(g.shape(prompt)[0], 2 * b);
    let mark = g.len();

    let size = cfg.denoiser.image_size;
    let mut rngs: Vec<RngStream> = chunk
        .iter()
        .map(|r| RngStream::new(settings.seed, streams::SAMPLING).split(r.noise_label))
        .collect();
    let mut predict = |x: &Tensor<f32>, t: usize, need_uncond: bool| -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
        g.truncate(mark);
        let per = x.numel();
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let mut shape = x.shape().to_vec();
        shape[0] *= 2;
        let xv = g.constant(Tensor::new(shape, doubled)?);
        let step = Timestep::of(sched, t)?;
        let y = denoise(&mut g, &p, &cfg.denoiser, xv, &vec![step; 2 * b], &ctx)?;
        let v = g.value(y).data();
        let cond = Tensor::new(x.shape().to_vec(), v[..per].to_vec())?;
        let uncond = need_uncond.then(|| Tensor::new(x.shape().to_vec(), v[per..].to_vec())).transpose()?;
        Ok((cond, uncond))
    };
    let x = sample_loop(&[size, size, 3], strided, settings.sampler, &settings.guidance, &mut rngs, &mut predict)?;
    let per = size * size * 3;
    let images = (0..b)
        .map(|i| Image::from_signed(size, size, &x.data()[i * per..(i + 1) * per]))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_world::encoders::caption_for;
    use crate::toy_world::render::{render, Cell, Placement};

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.text_dim = 8;
        cfg.ase = AseConfig { queries: 3, dim: 8, heads: 2, layers: 1, ff_dim: 16, in_dim: 48, attend_latents: false };
        cfg.tiaa = TiaaConfig { dim: 8, text_dim: 8, heads: 1 };
        cfg.denoiser = DenoiserConfig { c1: 8, c2: 8, heads: 2, time_dim: 8, context_dim: 8, ..DenoiserConfig::default() };
        cfg
    }

    fn params(cfg: &ModelConfig) -> ParamSet<f32> {
        let mut rng = RngStream::new(0, streams::INIT);
        let mut p = init_backbone(cfg, &mut rng).unwrap();
        let a = init_adapter(cfg, &p, &mut rng).unwrap();
        p.extend(a);
        // give the cross-attention outputs weight so conditioning matters
        for block in denoiser::ATTENTION_BLOCKS {
            p.init_normal(&format!("unet.{block}.wo"), &[8, 8], 0.5, &mut rng);
        }
        p
    }

    #[test]
    fn groups_partition_parameters() {
        let cfg = small_cfg();
        let p = params(&cfg);
        for name in p.names() {
            assert!(is_adapter_param(name) ^ is_backbone_param(name), "{name}");
        }
        assert!(p.names().any(|n| n == "adapter.mid_attn.wk"));
        assert!(has_adapter(&p));
    }

    #[test]
    fn zero_adapter_scale_matches_text_only_sampling() {
        let cfg = small_cfg();
        let p = params(&cfg);
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let style = render(Cell { style: 2, content: 0 }, &Placement::nominal());
        let with_ref = |r: Option<Image>| SampleRequest { caption: caption_for(1), style_ref: r, noise_label: 3 };
        let mut settings = SampleSettings { steps: 5, ..SampleSettings::default() };
        settings.fusion.adapter_scale = 0.0;
        let a = sample_images(&cfg, &p, &sched, &[with_ref(Some(style.clone()))], &settings).unwrap();
        let b = sample_images(&cfg, &p, &sched, &[with_ref(None)], &settings).unwrap();
        assert_eq!(a.images, b.images);
        settings.fusion.adapter_scale = 0.6;
        let c = sample_images(&cfg, &p, &sched, &[with_ref(Some(style))], &settings).unwrap();
        assert_ne!(a.images, c.images);
        assert!(c.maps[0].is_some());
    }

    #[test]
    fn images_do_not_depend_on_batch_neighbours() {
        let cfg = small_cfg();
        let p = params(&cfg);
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let req = |label| SampleRequest { caption: caption_for(label as usize % 4), style_ref: None, noise_label: label };
        let settings = SampleSettings { steps: 4, ..SampleSettings::default() };
        let both = sample_images(&cfg, &p, &sched, &[req(0), req(1)], &settings).unwrap();
        let again = sample_images(&cfg, &p, &sched, &[req(0), req(1)], &settings).unwrap();
        assert_eq!(both.images, again.images);
        assert_ne!(both.images[0], both.images[1]);
    }

    #[test]
    fn loss_is_finite_and_frozen_groups_get_no_gradient() {
        let cfg = small_cfg();
        let p = params(&cfg);
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = RngStream::new(1, 3);
        let img = render(Cell { style: 1, content: 2 }, &Placement::nominal());
        let patches = encoders::encode_image::<f32>(&img).unwrap();
        let batch = TrainBatch {
            x0: Tensor::stack(&[img.to_signed_tensor(), img.to_signed_tensor()]).unwrap(),
            captions: vec![caption_for(2), caption_for(0)],
            style_patches: Tensor::stack(&[patches.clone(), patches]).unwrap(),
            ts: vec![10, 90],
            eps: rng.normal_tensor(&[2, 24, 24, 3]),
            keep: vec![true, false],
        };
        let mut g = Graph::new();
        let b = p.bind(&mut g, is_adapter_param);
        let loss = training_loss(&mut g, &b, &cfg, &sched, &batch, Phase::Adapter, &FusionConfig::default(), LossWeighting::Eps).unwrap();
        assert!(g.value(loss).data()[0].is_finite());
        g.backward(loss).unwrap();
        for (name, &v) in b.iter() {
            assert_eq!(g.grad(v).is_some(), is_adapter_param(name), "{name}");
        }
    }

    #[test]
    fn preconditioned_weighting_divides_each_image_by_c_out_squared() {
        let cfg = small_cfg();
        let p = params(&cfg).cast::<f64>();
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = RngStream::new(2, 3);
        let img = render(Cell { style: 0, content: 3 }, &Placement::nominal());
        let x0 = img.to_signed_tensor::<f64>();
        let batch = TrainBatch {
            x0: Tensor::stack(&[x0.clone(), x0]).unwrap(),
            captions: vec![caption_for(3), caption_for(3)],
            style_patches: Tensor::zeros([2, 36, 48]),
            ts: vec![5, 95],
            eps: rng.normal_tensor(&[2, 24, 24, 3]),
            keep: vec![true, true],
        };
        let fusion = FusionConfig::default();
        let loss = |b: &TrainBatch<f64>, w| {
            let mut g = Graph::new();
            let bind = p.bind(&mut g, |_| false);
            let l = training_loss(&mut g, &bind, &cfg, &sched, b, Phase::Pretrain, &fusion, w).unwrap();
            g.value(l).data()[0]
        };
        let single = |i: usize| TrainBatch {
            x0: batch.x0.index_outer(i).unwrap().reshape([1, 24, 24, 3]).unwrap(),
            captions: vec![batch.captions[i].clone()],
            style_patches: Tensor::zeros([1, 36, 48]),
            ts: vec![batch.ts[i]],
            eps: batch.eps.index_outer(i).unwrap().reshape([1, 24, 24, 3]).unwrap(),
            keep: vec![true],
        };
        let want: f64 = (0..2)
            .map(|i| {
                let c_out = Timestep::of(&sched, batch.ts[i]).unwrap().preconditioning(cfg.denoiser.sigma_data).1;
                loss(&single(i), LossWeighting::Eps) / (c_out * c_out) / 2.0
            })
            .sum();
        assert!((loss(&batch, LossWeighting::Preconditioned) - want).abs() < 1e-12 * want);
        assert!(loss(&batch, LossWeighting::Preconditioned) > loss(&batch, LossWeighting::Eps));
    }
}
