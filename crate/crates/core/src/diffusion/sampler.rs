//! Reverse diffusion: guidance, single reverse steps and the sampling loop.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract, dim_err, Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

use super::schedule::NoiseSchedule;

pub const DEFAULT_GUIDANCE_W: f64 = 0.6;
pub const DEFAULT_COND_DROP_P: f64 = 0.05;

/// How conditional and unconditional predictions are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfgMode {
    /// `w * cond + (1 - w) * uncond`.
    Blend,
    /// `uncond + w * (cond - uncond)`; algebraically the same map.
    Extrapolate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub w: f64,
    /// Probability of training a sample with null conditions.
    pub cond_drop_p: f64,
    pub mode: CfgMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            w: DEFAULT_GUIDANCE_W,
            cond_drop_p: DEFAULT_COND_DROP_P,
            mode: CfgMode::Blend,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.w.is_finite() {
            return Err(contract(format!("guidance w must be finite, got {}", self.w)));
        }
        if !(0.0..1.0).contains(&self.cond_drop_p) {
            return Err(contract(format!("cond_drop_p must lie in [0, 1), got {}", self.cond_drop_p)));
        }
        Ok(())
    }
}

/// Combines guided noise predictions. The endpoints `w = 1` and `w = 0`
/// return the conditional and unconditional inputs unchanged.
pub fn cfg_combine<T: Real>(cond: &Tensor<T>, uncond: &Tensor<T>, w: f64, mode: CfgMode) -> Result<Tensor<T>> {
    if cond.shape() != uncond.shape() {
        return Err(dim_err(format!(
            "guidance: conditional {:?} vs unconditional {:?}",
            cond.shape(),
            uncond.shape()
        )));
    }
    if w == 1.0 {
        return Ok(cond.clone());
    }
    if w == 0.0 {
        return Ok(uncond.clone());
    }
    let wt = T::c(w);
    let data = match mode {
        CfgMode::Blend => {
            let wu = T::c(1.0 - w);
            cond.data().iter().zip(uncond.data()).map(|(&c, &u)| wt * c + wu * u).collect()
        }
        CfgMode::Extrapolate => cond.data().iter().zip(uncond.data()).map(|(&c, &u)| u + wt * (c - u)).collect(),
    };
    Tensor::new(cond.shape().to_vec(), data)
}

/// Reverse update `sqrt(1 - beta_t) x_t - sqrt(beta_t) eps_hat`, taken
/// literally. It is not the inverse of the forward process.
pub fn reverse_step_literal<T: Real>(x_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    check_pair(x_t, eps_hat)?;
    let b = sched.beta(t)?;
    let (cx, ce) = (T::c((1.0 - b).sqrt()), T::c(b.sqrt()));
    let data = x_t.data().iter().zip(eps_hat.data()).map(|(&x, &e)| cx * x - ce * e).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Deterministic part of the ancestral step,
/// `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t)`.
pub fn ddpm_mean<T: Real>(x_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    check_pair(x_t, eps_hat)?;
    let b = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let inv = 1.0 / (1.0 - b).sqrt();
    let (cx, ce) = (T::c(inv), T::c(inv * b / (1.0 - ab).sqrt()));
    let data = x_t.data().iter().zip(eps_hat.data()).map(|(&x, &e)| cx * x - ce * e).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Noise scale of the ancestral step: `sqrt(beta_t)`, and 0 on the final step.
pub fn ddpm_sigma(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    let b = sched.beta(t)?;
    Ok(if t == 1 { 0.0 } else { b.sqrt() })
}

/// Standard deviation of the true reverse posterior `q(x_{t-1} | x_t, x_0)`;
/// 0 on the final step.
pub fn posterior_sigma(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    if t == 1 {
        return Ok(0.0);
    }
    let b = sched.beta(t)?;
    let (ab, prev) = (sched.alpha_bar(t)?, sched.alpha_bar(t - 1)?);
    Ok((b * (1.0 - prev) / (1.0 - ab)).sqrt())
}

/// Ancestral DDPM step: [`ddpm_mean`] plus `sigma_t * xi`, `xi ~ N(0, 1)`.
/// The final step (`t = 1`) draws no noise.
pub fn reverse_step_ddpm<T: Real>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let mut mean = ddpm_mean(x_t, t, eps_hat, sched)?;
    let sigma = ddpm_sigma(t, sched)?;
    if sigma > 0.0 {
        let s = T::c(sigma);
        for v in mean.data_mut() {
            *v += s * T::c(rng.normal());
        }
    }
    Ok(mean)
}

/// `x0` implied by a noise prediction: `(x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t)`.
pub fn predict_x0<T: Real>(x_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    check_pair(x_t, eps_hat)?;
    let ab = sched.alpha_bar(t)?;
    let (cx, ce) = (T::c(1.0 / ab.sqrt()), T::c((1.0 - ab).sqrt() / ab.sqrt()));
    let data = x_t.data().iter().zip(eps_hat.data()).map(|(&x, &e)| cx * x - ce * e).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

fn check_pair<T: Real>(x: &Tensor<T>, e: &Tensor<T>) -> Result<()> {
    if x.shape() != e.shape() {
        return Err(dim_err(format!("noise estimate {:?} does not match x_t {:?}", e.shape(), x.shape())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    /// Ancestral step with the posterior variance
    /// `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    DdpmPosterior,
    Literal,
}

impl FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddpm-posterior" => Ok(SamplerKind::DdpmPosterior),
            "literal" => Ok(SamplerKind::Literal),
            _ => Err(Error::Config(format!("sampler must be ddpm, ddpm-posterior or literal, got {s:?}"))),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::DdpmPosterior => "ddpm-posterior",
            SamplerKind::Literal => "literal",
        })
    }
}

/// Noise predictor used by [`sample_loop`]: given a batch `x_t` and the base
/// timestep, returns the conditional prediction and, when asked for, the
/// unconditional one.
pub trait Predictor<T: Real> {
    fn predict(&mut self, x_t: &Tensor<T>, model_t: usize, need_uncond: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)>;
}

impl<T: Real, F> Predictor<T> for F
where
    F: FnMut(&Tensor<T>, usize, bool) -> Result<(Tensor<T>, Option<Tensor<T>>)>,
{
    fn predict(&mut self, x_t: &Tensor<T>, model_t: usize, need_uncond: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self(x_t, model_t, need_uncond)
    }
}

/// Runs the reverse chain over `sched` (usually a respaced schedule) for a
/// batch whose leading axis indexes images. Image `i` draws all of its noise
/// from `rngs[i]`, so an image depends only on its own stream.
pub fn sample_loop<T: Real>(
    item_shape: &[usize],
    sched: &NoiseSchedule,
    kind: SamplerKind,
    guidance: &GuidanceConfig,
    rngs: &mut [RngStream],
    predictor: &mut dyn Predictor<T>,
) -> Result<Tensor<T>> {
    let batch = rngs.len();
    if batch == 0 {
        return Err(contract("sampling needs at least one image"));
    }
    let per: usize = item_shape.iter().product();
    let mut shape = vec![batch];
    shape.extend_from_slice(item_shape);
    let mut data = Vec::with_capacity(batch * per);
    for r in rngs.iter_mut() {
        data.extend((0..per).map(|_| T::c(r.normal())));
    }
    let mut x = Tensor::new(shape, data)?;
    let need_uncond = guidance.w != 1.0;
    for t in (1..=sched.len()).rev() {
        let (cond, uncond) = predictor.predict(&x, sched.model_timestep(t)?, need_uncond)?;
        let eps = match uncond {
            Some(u) => cfg_combine(&cond, &u, guidance.w, guidance.mode)?,
            None if !need_uncond => cond,
            None => return Err(contract("predictor omitted the unconditional branch")),
        };
        x = match kind {
            SamplerKind::Literal => reverse_step_literal(&x, t, &eps, sched)?,
            SamplerKind::Ddpm | SamplerKind::DdpmPosterior => {
                let mut next = ddpm_mean(&x, t, &eps, sched)?;
                let sigma = match kind {
                    SamplerKind::Ddpm => ddpm_sigma(t, sched)?,
                    _ => posterior_sigma(t, sched)?,
                };
                let sigma = T::c(sigma);
                if t > 1 {
                    for (chunk, r) in next.data_mut().chunks_exact_mut(per).zip(rngs.iter_mut()) {
                        for v in chunk {
                            *v += sigma * T::c(r.normal());
                        }
                    }
                }
                next
            }
        };
        x.check_finite("sampled image")?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::diffuse_to;

    fn t64(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([v.len()], v).unwrap()
    }

    #[test]
    fn guidance_endpoints_and_default() {
        let c = t64(&[1.0, -0.3]);
        let u = t64(&[0.0, 0.7]);
        for mode in [CfgMode::Blend, CfgMode::Extrapolate] {
            assert_eq!(cfg_combine(&c, &u, 1.0, mode).unwrap(), c);
            assert_eq!(cfg_combine(&c, &u, 0.0, mode).unwrap(), u);
        }
        let g = GuidanceConfig::default();
        let got = cfg_combine(&t64(&[1.0]), &t64(&[0.0]), g.w, g.mode).unwrap();
        assert!((got.data()[0] - 0.6).abs() < 1e-15);
        assert!(cfg_combine(&c, &t64(&[1.0]), 0.5, CfgMode::Blend).is_err());
    }

    #[test]
    fn guidance_modes_agree() {
        let mut rng = RngStream::new(8, 0);
        let c: Tensor<f64> = rng.normal_tensor(&[50]);
        let u: Tensor<f64> = rng.normal_tensor(&[50]);
        for w in [-1.0, 0.3, 0.6, 2.5] {
            let a = cfg_combine(&c, &u, w, CfgMode::Blend).unwrap();
            let b = cfg_combine(&c, &u, w, CfgMode::Extrapolate).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn single_step_ddpm_recovers_x0() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let mut rng = RngStream::new(1, 2);
        let x0: Tensor<f64> = rng.normal_tensor(&[4, 3]);
        let eps: Tensor<f64> = rng.normal_tensor(&[4, 3]);
        let xt = diffuse_to(&x0, 1, &s, &eps).unwrap();
        let back = reverse_step_ddpm(&xt, 1, &eps, &s, &mut rng).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-14);
        assert_eq!(ddpm_sigma(1, &s).unwrap(), 0.0);
    }

    #[test]
    fn literal_step_is_not_an_inverse() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let x0 = t64(&[1.0]);
        let eps = t64(&[0.5]);
        let xt = diffuse_to(&x0, 1, &s, &eps).unwrap();
        let back = reverse_step_literal(&xt, 1, &eps, &s).unwrap();
        // (1 - b) x0 + sqrt(b (1 - b)) eps - sqrt(b) eps
        let b: f64 = 0.3;
        let want = (1.0 - b) + ((b * (1.0 - b)).sqrt() - b.sqrt()) * 0.5;
        assert!((back.data()[0] - want).abs() < 1e-14);
        assert!((back.data()[0] - 1.0).abs() > 0.1);
        let zero = reverse_step_literal(&x0, 1, &t64(&[0.0]), &s).unwrap();
        assert!((zero.data()[0] - (0.7f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn literal_step_agrees_with_ddpm_for_small_beta() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = RngStream::new(2, 2);
        let x: Tensor<f64> = rng.normal_tensor(&[64]);
        let e: Tensor<f64> = rng.normal_tensor(&[64]);
        // at t = 1 the ancestral step is deterministic and beta is 1e-4
        let p = reverse_step_literal(&x, 1, &e, &s).unwrap();
        let d = reverse_step_ddpm(&x, 1, &e, &s, &mut rng).unwrap();
        let num: f64 = p.data().iter().zip(d.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = d.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-3, "{}", num / den);
    }

    #[test]
    fn predicted_x0_inverts_forward_marginal() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = RngStream::new(3, 2);
        let x0: Tensor<f64> = rng.normal_tensor(&[10]);
        let eps: Tensor<f64> = rng.normal_tensor(&[10]);
        for t in [1, 37, 100] {
            let xt = diffuse_to(&x0, t, &s, &eps).unwrap();
            assert!(predict_x0(&xt, t, &eps, &s).unwrap().max_abs_diff(&x0) < 1e-12);
        }
    }

    #[test]
    fn loop_is_deterministic_and_per_image() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap().respace(10).unwrap();
        let g = GuidanceConfig::default();
        let mut pred = |x: &Tensor<f64>, t: usize, u: bool| -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
            let c = x.map(|v| 0.1 * v + t as f64 * 1e-3);
            Ok((c.clone(), u.then(|| c.map(|v| -v))))
        };
        let run = |seeds: &[u64], pred: &mut dyn Predictor<f64>| {
            let mut rngs: Vec<_> = seeds.iter().map(|&k| RngStream::new(5, 4).split(k)).collect();
            sample_loop(&[2, 3], &s, SamplerKind::Ddpm, &g, &mut rngs, pred).unwrap()
        };
        let a = run(&[0, 1], &mut pred);
        let b = run(&[0, 1], &mut pred);
        assert_eq!(a, b);
        let single = run(&[1], &mut pred);
        assert_eq!(a.index_outer(1).unwrap().data(), single.data());
    }

    #[test]
    fn optimal_predictor_samples_a_two_point_distribution() {
        // data is +a or -a with equal mass; E[x0 | x_t] = a tanh(sqrt(ab) a x_t / (1 - ab))
        let base = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let sched = base.respace(50).unwrap();
        let a = 0.7;
        let n = 2000;
        let mut rngs: Vec<RngStream> = (0..n).map(|i| RngStream::new(4, 4).split(i)).collect();
        let mut pred = |x: &Tensor<f64>, t: usize, _: bool| -> Result<(Tensor<f64>, Option<Tensor<f64>>)> {
            let ab = base.alpha_bar(t)?;
            let eps = x.map(|v| {
                let x0 = a * (ab.sqrt() * a * v / (1.0 - ab)).tanh();
                (v - ab.sqrt() * x0) / (1.0 - ab).sqrt()
            });
            Ok((eps, None))
        };
        let g = GuidanceConfig { w: 1.0, ..GuidanceConfig::default() };
        let x = sample_loop(&[1], &sched, SamplerKind::Ddpm, &g, &mut rngs, &mut pred).unwrap();
        let near = x.data().iter().filter(|v| (v.abs() - a).abs() < 0.05).count();
        let positive = x.data().iter().filter(|&&v| v > 0.0).count();
        assert!(near as f64 > 0.97 * n as f64, "{near}");
        assert!((positive as f64 / n as f64 - 0.5).abs() < 0.05, "{positive}");
    }
}
