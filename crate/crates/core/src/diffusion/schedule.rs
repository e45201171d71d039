//! Noise schedules and the forward (noising) process.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, and `alpha_bar(0) = 1`
//! denotes the clean data before any noise is added.

use crate::error::{contract, dim_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// Timestep of the base schedule that each step corresponds to; the
    /// identity for a base schedule, a strided subset after [`NoiseSchedule::respace`].
    model_t: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear `beta` from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(contract("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(contract(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(contract("every beta must lie in (0, 1)"));
        }
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        let model_t = (1..=beta.len()).collect();
        Ok(NoiseSchedule {
            beta,
            alpha_bar,
            model_t,
        })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.beta.len() {
            Err(contract(format!("timestep {t} outside 1..={}", self.beta.len())))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    /// Cumulative product of `1 - beta` up to and including `t`; `1` at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Base-schedule timestep fed to the denoiser at step `t`.
    pub fn model_timestep(&self, t: usize) -> Result<usize> {
        self.check(t)?;
        Ok(self.model_t[t - 1])
    }

    /// Sub-schedule visiting `steps` timesteps with a uniform stride, ending at
    /// `t = T`. Each step's beta is `1 - alpha_bar(t_i) / alpha_bar(t_{i-1})`
    /// so cumulative products are preserved.
    pub fn respace(&self, steps: usize) -> Result<Self> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(contract(format!("cannot sample {steps} steps from a {total}-step schedule")));
        }
        let picks: Vec<usize> = (1..=steps).map(|i| (i * total) / steps).collect();
        self.subset(&picks)
    }

    /// Sub-schedule through the given strictly increasing base timesteps.
    pub fn subset(&self, picks: &[usize]) -> Result<Self> {
        if picks.is_empty() || picks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(contract("timestep subset must be non-empty and increasing"));
        }
        let mut prev = 1.0;
        let mut beta = Vec::with_capacity(picks.len());
        let mut alpha_bar = Vec::with_capacity(picks.len());
        for &t in picks {
            let ab = self.alpha_bar(t)?;
            beta.push(1.0 - ab / prev);
            alpha_bar.push(ab);
            prev = ab;
        }
        Ok(NoiseSchedule {
            beta,
            alpha_bar,
            model_t: picks.iter().map(|&t| self.model_t[t - 1]).collect(),
        })
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("noise {:?} does not match data {:?}", b.shape(), a.shape())));
    }
    Ok(())
}

fn combine<T: Real>(x: &Tensor<T>, cx: f64, e: &Tensor<T>, ce: f64) -> Tensor<T> {
    let (cx, ce) = (T::c(cx), T::c(ce));
    let data = x.data().iter().zip(e.data()).map(|(&a, &b)| cx * a + ce * b).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// One forward step `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn diffuse_step<T: Real>(x_prev: &Tensor<T>, t: usize, sched: &NoiseSchedule, eps: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x_prev, eps)?;
    let b = sched.beta(t)?;
    Ok(combine(x_prev, (1.0 - b).sqrt(), eps, b.sqrt()))
}

/// Closed-form marginal `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn diffuse_to<T: Real>(x0: &Tensor<T>, t: usize, sched: &NoiseSchedule, eps: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x0, eps)?;
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}
