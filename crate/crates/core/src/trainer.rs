//! Two-phase training: the backbone on text-conditioned denoising, then the
//! adapter with the backbone frozen.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::codec::Checkpoint;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::graph::Graph;
use crate::model::{is_adapter_param, is_backbone_param, training_loss, LossWeighting, ModelConfig, Phase, TrainBatch};
use crate::params::ParamSet;
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;
use crate::toy_world::encoders::encode_image;
use crate::toy_world::Dataset;

/// Decoupled-weight-decay adaptive optimiser. With `beta1 = 0` it keeps no
/// first-moment (momentum) state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to `params[name]` for every `(name, grad)` pair.
    pub fn update(&mut self, params: &mut ParamSet<f32>, grads: &[(String, Tensor<f32>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = if self.beta1 > 0.0 { 1.0 - self.beta1.powi(t) } else { 1.0 };
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (1.0 - self.lr * self.weight_decay) as f32;
        let eps = self.eps as f32;
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Invariant(format!("gradient for unknown parameter {name}")))?;
            let n = p.numel();
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, (w, &gr)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                v[i] = b2 * v[i] + (1.0 - b2) * gr * gr;
                let num = if b1 > 0.0 {
                    m[i] = b1 * m[i] + (1.0 - b1) * gr;
                    m[i]
                } else {
                    gr
                };
                *w = *w * decay - step_size * num / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning-rate multiplier over the steps of a phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 at the first step towards 0 after the last.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 1-based `step` of a phase with `steps` steps.
    pub fn factor(self, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let frac = (step.saturating_sub(1)) as f64 / steps.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("lr schedule must be constant or cosine, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Total optimiser steps of this phase (a resumed run continues up to it).
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Length the schedule spans; a run may stop earlier, and one that runs
    /// longer spans its own length.
    pub lr_horizon: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub cond_drop_p: f64,
    pub seed: u64,
    /// Fusion ratio and adapter scale used inside the training forward pass.
    pub fusion: FusionConfig,
    pub loss_weighting: LossWeighting,
}

/// Training tensors prepared once from a dataset.
pub struct TrainData {
    pub x0: Vec<Tensor<f32>>,
    pub captions: Vec<Vec<usize>>,
    pub style_patches: Vec<Tensor<f32>>,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let mut data = TrainData {
            x0: Vec::new(),
            captions: Vec::new(),
            style_patches: Vec::new(),
        };
        for s in &ds.train {
            data.x0.push(ds.image(&s.path)?.to_signed_tensor());
            data.captions.push(s.caption.clone());
            data.style_patches.push(encode_image(ds.image(&s.style_ref)?)?);
        }
        if data.x0.is_empty() {
            return Err(Error::Contract("no training samples".into()));
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    /// Batch for optimiser step `step`; a pure function of `(seed, step)`.
    pub fn batch(&self, step: usize, size: usize, seed: u64, sched: &NoiseSchedule, cond_drop_p: f64) -> Result<TrainBatch<f32>> {
        let mut rng = RngStream::new(seed, streams::TRAINING).split(step as u64);
        let idx: Vec<usize> = (0..size).map(|_| rng.below(self.len() as u64) as usize).collect();
        let ts: Vec<usize> = (0..size).map(|_| 1 + rng.below(sched.len() as u64) as usize).collect();
        let keep: Vec<bool> = (0..size).map(|_| !rng.bernoulli(cond_drop_p)).collect();
        let shape = self.x0[0].shape().to_vec();
        let mut eshape = vec![size];
        eshape.extend_from_slice(&shape);
        let eps = rng.normal_tensor(&eshape);
        Ok(TrainBatch {
            x0: Tensor::stack(&idx.iter().map(|&i| self.x0[i].clone()).collect::<Vec<_>>())?,
            captions: idx.iter().map(|&i| self.captions[i].clone()).collect(),
            style_patches: Tensor::stack(&idx.iter().map(|&i| self.style_patches[i].clone()).collect::<Vec<_>>())?,
            ts,
            eps,
            keep,
        })
    }
}

/// Parameters, optimiser state and loss history of a run in progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub opt: AdamW,
    /// Completed optimiser steps.
    pub step: usize,
    /// `(step, loss)` for every completed step of this phase.
    pub losses: Vec<(usize, f64)>,
}

impl TrainState {
    pub fn new(params: ParamSet<f32>, cfg: &TrainConfig) -> Self {
        TrainState {
            params,
            opt: AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay),
            step: 0,
            losses: Vec::new(),
        }
    }

    /// Checkpoint holding parameters, optimiser moments, the step counter and
    /// the loss history.
    pub fn to_checkpoint(&self, config_echo: &str, timestamp: u64) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor<f32>)> = self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (prefix, map) in [("opt.m.", &self.opt.m), ("opt.v.", &self.opt.v)] {
            for (k, v) in map {
                let shape = self.params.get(k)?.shape().to_vec();
                tensors.push((format!("{prefix}{k}"), Tensor::new(shape, v.clone())?));
            }
        }
        let counters = [self.step as f64, self.opt.step as f64];
        tensors.push(("meta.step".into(), Tensor::from_f64([2], &counters)?));
        if !self.losses.is_empty() {
            let l: Vec<f32> = self.losses.iter().map(|&(_, l)| l as f32).collect();
            tensors.push(("meta.losses".into(), Tensor::new([l.len()], l)?));
        }
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Checkpoint {
            timestamp,
            config_echo: config_echo.to_string(),
            tensors,
        })
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`]; optimiser
    /// hyperparameters come from `cfg`.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let params = params_from_checkpoint(ck);
        let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
        for (name, t) in &ck.tensors {
            if let Some(k) = name.strip_prefix("opt.m.") {
                opt.m.insert(k.to_string(), t.data().to_vec());
            } else if let Some(k) = name.strip_prefix("opt.v.") {
                opt.v.insert(k.to_string(), t.data().to_vec());
            }
        }
        let (step, opt_step) = match ck.get("meta.step") {
            Some(t) if t.numel() == 2 => (t.data()[0] as usize, t.data()[1] as u64),
            _ => (0, 0),
        };
        opt.step = opt_step;
        let losses = ck
            .get("meta.losses")
            .map(|t| t.data().iter().enumerate().map(|(i, &l)| (i + 1, l as f64)).collect())
            .unwrap_or_default();
        Ok(TrainState { params, opt, step, losses })
    }
}

/// Model parameters of a checkpoint, without optimiser or metadata entries.
pub fn params_from_checkpoint(ck: &Checkpoint) -> ParamSet<f32> {
    ParamSet::from_tensors(
        ck.tensors
            .iter()
            .filter(|(n, _)| is_backbone_param(n) || is_adapter_param(n))
            .cloned(),
    )
}

fn trainable(phase: Phase) -> fn(&str) -> bool {
    match phase {
        Phase::Pretrain => is_backbone_param,
        Phase::Adapter => is_adapter_param,
    }
}

/// Runs optimiser steps until `state.step == cfg.steps`, or until `stop_after`
/// more steps have run. `on_step` sees every `(step, loss)`.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    sched: &NoiseSchedule,
    data: &TrainData,
    state: &mut TrainState,
    stop_after: Option<usize>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    cfg.fusion.validate()?;
    let is_trainable = trainable(cfg.phase);
    if cfg.phase == Phase::Adapter && !state.params.names().any(|n| is_adapter_param(n)) {
        return Err(Error::Contract("adapter phase needs adapter parameters".into()));
    }
    let frozen_before: Vec<(String, Vec<u32>)> = state
        .params
        .iter()
        .filter(|(n, _)| !is_trainable(n))
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    let end = match stop_after {
        Some(n) => cfg.steps.min(state.step + n),
        None => cfg.steps,
    };
    while state.step < end {
        let step = state.step + 1;
        let batch = data.batch(step, cfg.batch, cfg.seed, sched, cfg.cond_drop_p)?;
        let mut g = Graph::<f32>::new();
        let b = state.params.bind(&mut g, is_trainable);
        let loss = training_loss(&mut g, &b, model, sched, &batch, cfg.phase, &cfg.fusion, cfg.loss_weighting)
            .map_err(|e| match e {
                Error::Numeric(_) => Error::Training { step, loss: f64::NAN },
                other => other,
            })?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Training { step, loss: value });
        }
        g.backward(loss)?;
        let mut grads = Vec::new();
        for (name, &v) in b.iter() {
            match (is_trainable(name), g.grad(v)) {
                (true, Some(gr)) => grads.push((name.clone(), gr)),
                (true, None) => {}
                (false, Some(_)) => {
                    return Err(Error::Invariant(format!("frozen parameter {name} received a gradient at step {step}")))
                }
                (false, None) => {}
            }
        }
        if grads.iter().any(|(_, gr)| !gr.all_finite()) {
            return Err(Error::Training { step, loss: value });
        }
        state.opt.lr = cfg.lr * cfg.lr_schedule.factor(step, cfg.lr_horizon.max(cfg.steps));
        state.opt.update(&mut state.params, &grads)?;
        state.step = step;
        state.losses.push((step, value));
        on_step(step, value);
    }
    for (name, bits) in &frozen_before {
        let now = state.params.get(name)?;
        if now.data().iter().map(|v| v.to_bits()).ne(bits.iter().copied()) {
            return Err(Error::Invariant(format!("frozen parameter {name} changed during training")));
        }
    }
    Ok(())
}

/// Mean loss over the first and last `window` recorded steps.
pub fn loss_drop(losses: &[(usize, f64)], window: usize) -> Option<(f64, f64)> {
    if losses.len() < 2 * window || window == 0 {
        return None;
    }
    let mean = |s: &[(usize, f64)]| s.iter().map(|&(_, l)| l).sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}

/// `step,loss` CSV with a header line.
pub fn loss_csv(losses: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (s, l) in losses {
        out.push_str(&format!("{s},{l:.6}\n"));
    }
    out
}

/// Wall-clock helper for progress lines.
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch(Instant::now())
    }

    pub fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
