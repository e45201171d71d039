//! Run configuration: a line-based `key = value` file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; later lines override earlier ones. [`RunConfig::echo`] renders the
//! full configuration in canonical form for reports and checkpoints.

use std::path::Path;

use crate::align::TiaaConfig;
use crate::diffusion::{CfgMode, DenoiserConfig, GuidanceConfig, NoiseSchedule, SamplerKind};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{LossWeighting, ModelConfig, Phase, SampleSettings};
use crate::style::AseConfig;
use crate::toy_world::encoders::PATCH_DIM;
use crate::toy_world::dataset::{validate_holdout, DEFAULT_HOLDOUT, DEFAULT_SAMPLES_PER_CELL};
use crate::toy_world::render::{format_cells, parse_cells, Cell};
use crate::trainer::{LrSchedule, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub samples_per_cell: usize,
    pub holdout: Vec<Cell>,

    pub diffusion_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub sampler: SamplerKind,

    pub guidance: GuidanceConfig,
    pub fusion: FusionConfig,

    pub dim: usize,
    pub ase_queries: usize,
    pub ase_heads: usize,
    pub ase_layers: usize,
    pub ase_ff_dim: usize,
    pub ase_attend_latents: bool,
    pub tiaa_heads: usize,
    pub unet_patch: usize,
    pub unet_c1: usize,
    pub unet_c2: usize,
    pub unet_heads: usize,
    pub unet_sigma_data: f64,

    pub pretrain_steps: usize,
    pub adapter_steps: usize,
    pub batch: usize,
    pub lr_pretrain: f64,
    pub lr_adapter: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Adapter scale inside the training forward pass.
    pub train_adapter_scale: f64,
    pub loss_weighting: LossWeighting,
    /// Steps between progress lines; 0 disables them.
    pub log_every: usize,

    /// Seeds per cell in evaluation.
    pub eval_seeds: usize,
    pub eval_batch: usize,
    pub sweep_alphas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            samples_per_cell: DEFAULT_SAMPLES_PER_CELL,
            holdout: parse_cells(DEFAULT_HOLDOUT).expect("default holdout"),
            diffusion_t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            steps: 50,
            sampler: SamplerKind::Ddpm,
            guidance: GuidanceConfig::default(),
            fusion: FusionConfig::default(),
            dim: 64,
            ase_queries: 16,
            ase_heads: 4,
            ase_layers: 4,
            ase_ff_dim: 256,
            ase_attend_latents: false,
            tiaa_heads: 1,
            unet_patch: 3,
            unet_c1: 64,
            unet_c2: 96,
            unet_heads: 4,
            unet_sigma_data: 0.8,
            pretrain_steps: 5000,
            adapter_steps: 5000,
            batch: 32,
            lr_pretrain: 1e-3,
            lr_adapter: 3e-4,
            lr_schedule: LrSchedule::Cosine,
            beta1: 0.0,
            beta2: 0.999,
            weight_decay: 0.01,
            train_adapter_scale: 0.6,
            loss_weighting: LossWeighting::Preconditioned,
            log_every: 250,
            eval_seeds: 16,
            eval_batch: 32,
            sweep_alphas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "toy.samples_per_cell" => self.samples_per_cell = num(key, v)?,
            "toy.holdout" => self.holdout = parse_cells(v)?,
            "diffusion.T" => self.diffusion_t = num(key, v)?,
            "diffusion.beta_start" => self.beta_start = num(key, v)?,
            "diffusion.beta_end" => self.beta_end = num(key, v)?,
            "diffusion.steps" => self.steps = num(key, v)?,
            "diffusion.sampler" => self.sampler = v.parse()?,
            "guidance.w" => self.guidance.w = num(key, v)?,
            "guidance.cond_drop_p" => self.guidance.cond_drop_p = num(key, v)?,
            "guidance.mode" => {
                self.guidance.mode = match v {
                    "blend" => CfgMode::Blend,
                    "extrapolate" => CfgMode::Extrapolate,
                    _ => return Err(Error::Config(format!("{key}: expected blend or extrapolate, got {v:?}"))),
                }
            }
            "fusion.alpha" => self.fusion.alpha = num(key, v)?,
            "fusion.adapter_scale" => self.fusion.adapter_scale = num(key, v)?,
            "model.dim" => self.dim = num(key, v)?,
            "ase.queries" => self.ase_queries = num(key, v)?,
            "ase.heads" => self.ase_heads = num(key, v)?,
            "ase.layers" => self.ase_layers = num(key, v)?,
            "ase.ff_dim" => self.ase_ff_dim = num(key, v)?,
            "ase.attend_latents" => self.ase_attend_latents = boolean(key, v)?,
            "tiaa.heads" => self.tiaa_heads = num(key, v)?,
            "unet.patch" => self.unet_patch = num(key, v)?,
            "unet.c1" => self.unet_c1 = num(key, v)?,
            "unet.c2" => self.unet_c2 = num(key, v)?,
            "unet.heads" => self.unet_heads = num(key, v)?,
            "unet.sigma_data" => self.unet_sigma_data = num(key, v)?,
            "train.pretrain_steps" => self.pretrain_steps = num(key, v)?,
            "train.adapter_steps" => self.adapter_steps = num(key, v)?,
            "train.batch" => self.batch = num(key, v)?,
            "train.lr_pretrain" => self.lr_pretrain = num(key, v)?,
            "train.lr_adapter" => self.lr_adapter = num(key, v)?,
            "train.lr_schedule" => self.lr_schedule = v.trim().parse()?,
            "train.beta1" => self.beta1 = num(key, v)?,
            "train.beta2" => self.beta2 = num(key, v)?,
            "train.weight_decay" => self.weight_decay = num(key, v)?,
            "train.adapter_scale" => self.train_adapter_scale = num(key, v)?,
            "train.loss_weighting" => self.loss_weighting = v.trim().parse()?,
            "train.log_every" => self.log_every = num(key, v)?,
            "eval.seeds" => self.eval_seeds = num(key, v)?,
            "eval.batch" => self.eval_batch = num(key, v)?,
            "eval.alphas" => self.sweep_alphas = list(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.fusion.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.guidance.validate().map_err(|e| Error::Config(e.to_string()))?;
        validate_holdout(&self.holdout).map_err(|e| Error::Config(e.to_string()))?;
        if self.samples_per_cell == 0 {
            return bad("toy.samples_per_cell must be at least 1".into());
        }
        if self.steps == 0 || self.steps > self.diffusion_t {
            return bad(format!("diffusion.steps must lie in 1..={}", self.diffusion_t));
        }
        NoiseSchedule::linear(self.diffusion_t, self.beta_start, self.beta_end)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.batch == 0 || self.eval_batch == 0 || self.eval_seeds == 0 {
            return bad("batch sizes and eval.seeds must be at least 1".into());
        }
        if self.sweep_alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("eval.alphas must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.train_adapter_scale) {
            return bad("train.adapter_scale must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        self.model().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical `key = value` rendering of every setting.
    pub fn echo(&self) -> String {
        let mode = match self.guidance.mode {
            CfgMode::Blend => "blend",
            CfgMode::Extrapolate => "extrapolate",
        };
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("toy.samples_per_cell", self.samples_per_cell.to_string()),
            ("toy.holdout", format_cells(&self.holdout)),
            ("diffusion.T", self.diffusion_t.to_string()),
            ("diffusion.beta_start", self.beta_start.to_string()),
            ("diffusion.beta_end", self.beta_end.to_string()),
            ("diffusion.steps", self.steps.to_string()),
            ("diffusion.sampler", self.sampler.to_string()),
            ("guidance.w", self.guidance.w.to_string()),
            ("guidance.cond_drop_p", self.guidance.cond_drop_p.to_string()),
            ("guidance.mode", mode.to_string()),
            ("fusion.alpha", self.fusion.alpha.to_string()),
            ("fusion.adapter_scale", self.fusion.adapter_scale.to_string()),
            ("model.dim", self.dim.to_string()),
            ("ase.queries", self.ase_queries.to_string()),
            ("ase.heads", self.ase_heads.to_string()),
            ("ase.layers", self.ase_layers.to_string()),
            ("ase.ff_dim", self.ase_ff_dim.to_string()),
            ("ase.attend_latents", self.ase_attend_latents.to_string()),
            ("tiaa.heads", self.tiaa_heads.to_string()),
            ("unet.patch", self.unet_patch.to_string()),
            ("unet.c1", self.unet_c1.to_string()),
            ("unet.c2", self.unet_c2.to_string()),
            ("unet.heads", self.unet_heads.to_string()),
            ("unet.sigma_data", self.unet_sigma_data.to_string()),
            ("train.pretrain_steps", self.pretrain_steps.to_string()),
            ("train.adapter_steps", self.adapter_steps.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.lr_pretrain", self.lr_pretrain.to_string()),
            ("train.lr_adapter", self.lr_adapter.to_string()),
            ("train.lr_schedule", self.lr_schedule.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.adapter_scale", self.train_adapter_scale.to_string()),
            ("train.loss_weighting", self.loss_weighting.to_string()),
            ("train.log_every", self.log_every.to_string()),
            ("eval.seeds", self.eval_seeds.to_string()),
            ("eval.batch", self.eval_batch.to_string()),
            ("eval.alphas", fmt_list(&self.sweep_alphas)),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            text_dim: self.dim,
            ase: AseConfig {
                queries: self.ase_queries,
                dim: self.dim,
                heads: self.ase_heads,
                layers: self.ase_layers,
                ff_dim: self.ase_ff_dim,
                in_dim: PATCH_DIM,
                attend_latents: self.ase_attend_latents,
            },
            tiaa: TiaaConfig {
                dim: self.dim,
                text_dim: self.dim,
                heads: self.tiaa_heads,
            },
            denoiser: DenoiserConfig {
                patch: self.unet_patch,
                c1: self.unet_c1,
                c2: self.unet_c2,
                heads: self.unet_heads,
                context_dim: self.dim,
                sigma_data: self.unet_sigma_data,
                ..DenoiserConfig::default()
            },
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_t, self.beta_start, self.beta_end)
    }

    pub fn train(&self, phase: Phase) -> TrainConfig {
        let (steps, lr) = match phase {
            Phase::Pretrain => (self.pretrain_steps, self.lr_pretrain),
            Phase::Adapter => (self.adapter_steps, self.lr_adapter),
        };
        TrainConfig {
            phase,
            steps,
            batch: self.batch,
            lr,
            lr_schedule: self.lr_schedule,
            lr_horizon: steps,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            cond_drop_p: self.guidance.cond_drop_p,
            seed: self.seed,
            fusion: FusionConfig {
                alpha: self.fusion.alpha,
                adapter_scale: self.train_adapter_scale,
            },
            loss_weighting: self.loss_weighting,
        }
    }

    pub fn sample_settings(&self) -> SampleSettings {
        SampleSettings {
            fusion: self.fusion,
            guidance: self.guidance,
            steps: self.steps,
            sampler: self.sampler,
            seed: self.seed,
            bypass_tiaa: false,
            batch: self.eval_batch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.fusion.alpha, 0.8);
        assert_eq!(c.fusion.adapter_scale, 0.6);
        assert_eq!(c.guidance.w, 0.6);
        assert_eq!(c.steps, 50);
        assert_eq!(c.holdout.len(), 3);
        c.validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.apply("seed = 9\nfusion.alpha = 0.4\n# comment\n\neval.alphas = 0.1,0.9\ntoy.holdout = 2:2\n").unwrap();
        let back = RunConfig::parse(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.seed, 9);
        assert_eq!(back.sweep_alphas, vec![0.1, 0.9]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("fusion.beta = 1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("fusion.alpha = 1.5").is_err());
        assert!(RunConfig::parse("diffusion.sampler = euler").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
        assert!(RunConfig::parse("diffusion.steps = 2000").is_err());
        assert!(RunConfig::parse("toy.holdout = 0:0,0:1,0:2").is_err());
    }
}
