//! Named invariant suites: gradients, attention, endpoints, forward
//! statistics, inversion and determinism. Each check reports pass/fail, the
//! number of cases it covered and its worst observed deviation.

use std::fmt::Write as _;

use crate::align::{align, TiaaConfig, TiaaWeights};
use crate::attention::attend;
use crate::config::RunConfig;
use crate::diffusion::denoiser::{self, Context, DenoiserConfig};
use crate::diffusion::{cfg_combine, diffuse_to, reverse_step_ddpm, CfgMode, NoiseSchedule};
use crate::error::Result;
use crate::fusion::interpolate;
use crate::gradcheck::check_gradients;
use crate::graph::{Graph, Var};
use crate::model::{
    adapter_tokens, init_adapter, init_backbone, sample_images, ModelConfig, Phase, SampleRequest, SampleSettings,
};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::style::{extract_style, AseConfig};
use crate::tensor::Tensor;
use crate::toy_world::encoders::{caption_for, PATCH_DIM};
use crate::toy_world::{gen_dataset, parse_cells};
use crate::trainer::{train, TrainData, TrainState};

/// Relative error bound for gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst deviation seen, in the check's own units.
    pub worst: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, cases: usize, worst: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            passed,
            cases,
            worst,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Check::new(name, false, 0, f64::NAN, format!("error: {err}"))
    }
}

#[derive(Clone, Debug, Default)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub runtime_s: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {:<36} cases={:<5} worst={:.3e} {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.cases,
                c.worst,
                c.detail
            );
        }
        let _ = writeln!(
            s,
            "{} of {} checks passed in {:.1} s",
            self.passed(),
            self.checks.len(),
            self.runtime_s
        );
        s
    }
}

/// Folds per-case outcomes into one check.
struct Tally {
    name: &'static str,
    cases: usize,
    worst: f64,
    bound: f64,
    error: Option<String>,
}

impl Tally {
    fn new(name: &'static str, bound: f64) -> Self {
        Tally {
            name,
            cases: 0,
            worst: 0.0,
            bound,
            error: None,
        }
    }

    fn record(&mut self, r: Result<f64>) {
        self.cases += 1;
        match r {
            Ok(e) if e.is_nan() => self.worst = f64::NAN,
            Ok(e) => self.worst = self.worst.max(e),
            Err(e) => {
                self.error.get_or_insert_with(|| e.to_string());
            }
        }
    }

    fn finish(self) -> Check {
        let passed = self.error.is_none() && self.worst <= self.bound;
        let detail = match self.error {
            Some(e) => format!("error: {e}"),
            None => format!("bound {:.0e}", self.bound),
        };
        Check::new(self.name, passed, self.cases, self.worst, detail)
    }
}

/// `sum(y * r)` with a fixed pseudo-random `r`, so every output element
/// contributes a distinct weight to the gradient.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = g.constant(RngStream::new(0x5eed, 0).normal_tensor(&shape));
    let m = g.mul(y, r)?;
    g.sum(m)
}

fn grad_error<F>(build: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(check_gradients(build, inputs, FD_STEP)?.max_error())
}

fn pick(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn perturbed(p: &ParamSet<f64>, std: f64, rng: &mut RngStream) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    for (name, t) in p.iter() {
        let noise: Tensor<f64> = rng.normal_tensor(t.shape());
        let v = Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + std * noise.data()[i]);
        out.insert(name.clone(), v);
    }
    out
}

/// A tiny adapter + denoiser stack with random, nonzero weights everywhere.
fn tiny_stack(rng: &mut RngStream) -> Result<(ModelConfig, ParamSet<f64>)> {
    let heads = pick(rng, 1, 2);
    // widths of at least 4 keep normalisation smooth at the probe scale
    let dim = 4;
    let cfg = ModelConfig {
        text_dim: dim,
        ase: AseConfig {
            queries: pick(rng, 1, 3),
            dim,
            heads,
            layers: pick(rng, 1, 2),
            ff_dim: dim + pick(rng, 0, 3),
            in_dim: 12,
            attend_latents: rng.bernoulli(0.5),
        },
        tiaa: TiaaConfig {
            dim,
            text_dim: dim,
            heads,
        },
        denoiser: DenoiserConfig {
            image_size: 4,
            patch: 2,
            c1: 4,
            c2: 2 * pick(rng, 2, 3),
            heads: 2,
            time_dim: 4,
            context_dim: dim,
            sigma_data: 0.8,
        },
    };
    let mut backbone: ParamSet<f64> = denoiser::init_params(&cfg.denoiser, &mut rng.split(1))?;
    backbone.extend(crate::style::init_params(&cfg.ase, &mut rng.split(2))?);
    backbone.extend(crate::align::init_params(&cfg.tiaa, &mut rng.split(3))?);
    let mut p = perturbed(&backbone, 0.3, &mut rng.split(4));
    p.extend(denoiser::init_adapter_projections(&p)?);
    Ok((cfg, p))
}

fn composition_error(rng: &mut RngStream) -> Result<f64> {
    let (cfg, p) = tiny_stack(rng)?;
    let b = pick(rng, 1, 2);
    let m = pick(rng, 1, 3);
    let alpha = rng.uniform_range(0.05, 0.95);
    let scale = rng.uniform_range(0.2, 1.0);
    let steps: Vec<denoiser::Timestep> = (0..b)
        .map(|_| denoiser::Timestep {
            t: pick(rng, 1, 1000),
            alpha_bar: rng.uniform_range(1e-4, 0.9999),
        })
        .collect();
    let names: Vec<String> = p.names().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = vec![
        rng.normal_tensor(&[b, 4, 4, 3]),
        rng.normal_tensor(&[b, 4, PATCH_DIM / 4]),
        rng.normal_tensor(&[b, m, cfg.text_dim]),
    ];
    inputs.extend(names.iter().map(|n| p.get(n).expect("listed").clone()));
    grad_error(
        |g, v| {
            let mut bind = ParamSet::<f64>::new().bind(g, |_| false);
            for (i, n) in names.iter().enumerate() {
                bind.insert(n, v[3 + i]);
            }
            let tokens = adapter_tokens(g, &bind, &cfg, v[1], v[2], alpha, false)?;
            let ctx = Context {
                text: v[2],
                fused: Some(tokens.fused),
                adapter_scale: scale,
            };
            let y = denoiser::denoise(g, &bind, &cfg.denoiser, v[0], &steps, &ctx)?;
            probe(g, y)
        },
        &inputs,
    )
}

/// Finite-difference checks of every differentiable operation and of the
/// full style-extractor, aligner, fusion and denoiser composition over
/// `configs` random small configurations.
pub fn gradient_suite(configs: usize, seed: u64) -> Vec<Check> {
    type Case = fn(&mut RngStream) -> Result<f64>;
    let cases: Vec<(&'static str, Case)> = vec![
        ("grad.add_broadcast", |r| {
            let (b, n, d) = (pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4));
            grad_error(|g, v| { let y = g.add(v[0], v[1])?; probe(g, y) }, &[r.normal_tensor(&[b, n, d]), r.normal_tensor(&[d])])
        }),
        ("grad.sub_broadcast", |r| {
            let (b, n, d) = (pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4));
            grad_error(|g, v| { let y = g.sub(v[0], v[1])?; probe(g, y) }, &[r.normal_tensor(&[b, n, d]), r.normal_tensor(&[n, d])])
        }),
        ("grad.mul_broadcast", |r| {
            let (b, n, d) = (pick(r, 1, 3), pick(r, 1, 4), pick(r, 1, 4));
            grad_error(|g, v| { let y = g.mul(v[0], v[1])?; probe(g, y) }, &[r.normal_tensor(&[b, n, d]), r.normal_tensor(&[b, 1, 1])])
        }),
        ("grad.scale", |r| {
            let (c, n) = (r.normal(), pick(r, 1, 5));
            grad_error(move |g, v| { let y = g.scale(v[0], c)?; probe(g, y) }, &[r.normal_tensor(&[n])])
        }),
        ("grad.matmul", |r| {
            let (b, n, k, m) = (pick(r, 1, 2), pick(r, 1, 4), pick(r, 1, 4), pick(r, 1, 4));
            let shared = r.bernoulli(0.5);
            let w = if shared { r.normal_tensor(&[k, m]) } else { r.normal_tensor(&[b, k, m]) };
            grad_error(|g, v| { let y = g.matmul(v[0], v[1])?; probe(g, y) }, &[r.normal_tensor(&[b, n, k]), w])
        }),
        ("grad.matmul_t", |r| {
            let (b, n, k, m) = (pick(r, 1, 2), pick(r, 1, 4), pick(r, 1, 4), pick(r, 1, 4));
            grad_error(|g, v| { let y = g.matmul_t(v[0], v[1])?; probe(g, y) }, &[r.normal_tensor(&[b, n, k]), r.normal_tensor(&[b, m, k])])
        }),
        ("grad.linear", |r| {
            let (b, n, k, m) = (pick(r, 1, 2), pick(r, 1, 4), pick(r, 1, 4), pick(r, 1, 4));
            grad_error(
                |g, v| { let y = g.linear(v[0], v[1], Some(v[2]))?; probe(g, y) },
                &[r.normal_tensor(&[b, n, k]), r.normal_tensor(&[k, m]), r.normal_tensor(&[m])],
            )
        }),
        ("grad.softmax", |r| {
            let (n, d) = (pick(r, 1, 4), pick(r, 1, 5));
            grad_error(|g, v| { let y = g.softmax(v[0])?; probe(g, y) }, &[r.normal_tensor::<f64>(&[n, d]).map(|x| 2.0 * x)])
        }),
        ("grad.weighted_softmax", |r| {
            let (n, d) = (pick(r, 1, 4), pick(r, 1, 5));
            let w: Vec<f64> = (0..d).map(|_| r.uniform_range(0.1, 1.5)).collect();
            grad_error(move |g, v| { let y = g.weighted_softmax(v[0], Some(&w))?; probe(g, y) }, &[r.normal_tensor(&[n, d])])
        }),
        ("grad.gelu", |r| {
            let n = pick(r, 1, 8);
            grad_error(|g, v| { let y = g.gelu(v[0])?; probe(g, y) }, &[r.normal_tensor::<f64>(&[n]).map(|x| 2.0 * x)])
        }),
        ("grad.layer_norm", |r| {
            let (n, d) = (pick(r, 1, 3), pick(r, 2, 6));
            grad_error(|g, v| { let y = g.layer_norm(v[0], 1e-5)?; probe(g, y) }, &[r.normal_tensor(&[n, d])])
        }),
        ("grad.reshape_permute", |r| {
            let (a, b, c) = (pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 3));
            grad_error(
                move |g, v| {
                    let y = g.permute(v[0], &[2, 0, 1])?;
                    let y = g.reshape(y, &[c * a * b])?;
                    probe(g, y)
                },
                &[r.normal_tensor(&[a, b, c])],
            )
        }),
        ("grad.concat_slice", |r| {
            let (b, n1, n2, d) = (pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 3));
            let start = pick(r, 0, n1 + n2 - 1);
            let len = pick(r, 1, n1 + n2 - start);
            grad_error(
                move |g, v| {
                    let y = g.concat(&[v[0], v[1]], 1)?;
                    let y = g.slice(y, 1, start, len)?;
                    probe(g, y)
                },
                &[r.normal_tensor(&[b, n1, d]), r.normal_tensor(&[b, n2, d])],
            )
        }),
        ("grad.repeat_outer", |r| {
            let (times, n) = (pick(r, 1, 3), pick(r, 1, 3));
            grad_error(move |g, v| { let y = g.repeat_outer(v[0], times)?; probe(g, y) }, &[r.normal_tensor(&[1, n, 2])])
        }),
        ("grad.gather_rows", |r| {
            let (b, s, d) = (pick(r, 1, 2), pick(r, 1, 4), pick(r, 1, 3));
            let out = pick(r, 1, 5);
            let index: Vec<Vec<usize>> = (0..b).map(|_| (0..out).map(|_| pick(r, 0, s - 1)).collect()).collect();
            grad_error(move |g, v| { let y = g.gather_rows(v[0], &index)?; probe(g, y) }, &[r.normal_tensor(&[b, s, d])])
        }),
        ("grad.unfold3x3", |r| {
            let (b, h, w, c) = (pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 3), pick(r, 1, 2));
            grad_error(move |g, v| { let y = g.unfold3x3(v[0], h, w)?; probe(g, y) }, &[r.normal_tensor(&[b, h * w, c])])
        }),
        ("grad.embedding", |r| {
            let (vocab, d, n) = (pick(r, 1, 5), pick(r, 1, 3), pick(r, 1, 6));
            let ids: Vec<usize> = (0..n).map(|_| pick(r, 0, vocab - 1)).collect();
            grad_error(move |g, v| { let y = g.embedding(v[0], &ids, &[n])?; probe(g, y) }, &[r.normal_tensor(&[vocab, d])])
        }),
        ("grad.mean_mse", |r| {
            let n = pick(r, 1, 6);
            grad_error(
                |g, v| {
                    let a = g.mse(v[0], v[1])?;
                    let m = g.mean(v[0])?;
                    g.add(a, m)
                },
                &[r.normal_tensor(&[n]), r.normal_tensor(&[n])],
            )
        }),
        ("grad.attention", |r| {
            let heads = pick(r, 1, 2);
            let (b, n, s, d) = (pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 4), heads * pick(r, 1, 2));
            let w: Vec<f64> = (0..s).map(|_| r.uniform_range(0.2, 1.0)).collect();
            grad_error(
                move |g, v| {
                    let (y, _) = attend(g, v[0], v[1], v[2], heads, Some(&w))?;
                    probe(g, y)
                },
                &[r.normal_tensor(&[b, n, d]), r.normal_tensor(&[b, s, d]), r.normal_tensor(&[b, s, d])],
            )
        }),
        ("grad.style_extractor", |r| {
            let (cfg, p) = tiny_stack(r)?;
            let names: Vec<String> = p.names().filter(|n| n.starts_with("ase.")).cloned().collect();
            let (b, s) = (pick(r, 1, 2), pick(r, 1, 4));
            let mut inputs = vec![r.normal_tensor(&[b, s, cfg.ase.in_dim])];
            inputs.extend(names.iter().map(|n| p.get(n).expect("listed").clone()));
            grad_error(
                |g, v| {
                    let mut bind = ParamSet::<f64>::new().bind(g, |_| false);
                    for (i, n) in names.iter().enumerate() {
                        bind.insert(n, v[1 + i]);
                    }
                    let y = extract_style(g, v[0], &bind, &cfg.ase)?;
                    probe(g, y)
                },
                &inputs,
            )
        }),
        ("grad.aligner_fusion", |r| {
            let heads = pick(r, 1, 2);
            let d = heads * pick(r, 1, 2);
            let (b, n, m) = (pick(r, 1, 2), pick(r, 1, 3), pick(r, 1, 3));
            let alpha = r.uniform_range(0.05, 0.95);
            grad_error(
                move |g, v| {
                    let w = TiaaWeights { wq: v[2], wk: v[3], wv: v[4] };
                    let aligned = align(g, v[0], v[1], &w, heads, None)?;
                    let y = interpolate(g, v[0], aligned.tokens, alpha)?;
                    probe(g, y)
                },
                &[
                    r.normal_tensor(&[b, n, d]),
                    r.normal_tensor(&[b, m, d]),
                    r.normal_tensor(&[d, d]),
                    r.normal_tensor(&[d, d]),
                    r.normal_tensor(&[d, d]),
                ],
            )
        }),
        ("grad.full_composition", composition_error),
    ];
    let root = RngStream::new(seed, 0x67ad);
    cases
        .iter()
        .enumerate()
        .map(|(k, (name, case))| {
            let mut tally = Tally::new(name, GRAD_TOLERANCE);
            for i in 0..configs {
                let mut rng = root.split(k as u64).split(i as u64);
                tally.record(case(&mut rng));
            }
            tally.finish()
        })
        .collect()
}

fn ase_cfg(rng: &mut RngStream) -> AseConfig {
    let heads = pick(rng, 1, 2);
    AseConfig {
        queries: pick(rng, 1, 4),
        dim: 2 * heads,
        heads,
        layers: pick(rng, 1, 2),
        ff_dim: 4,
        in_dim: pick(rng, 1, 5),
        attend_latents: rng.bernoulli(0.5),
    }
}

fn permutation(rng: &mut RngStream, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut p);
    p
}

/// Softmax normalisation and shift invariance, style-extractor permutation
/// invariance and aligner text-permutation equivariance.
pub fn attention_suite(cases: usize, seed: u64) -> Vec<Check> {
    let root = RngStream::new(seed, 0xa77);
    let mut rows = Tally::new("softmax.row_stochastic", 1e-6);
    let mut shift = Tally::new("softmax.shift_invariant", 1e-6);
    let mut ase = Tally::new("style.permutation_invariant", 0.0);
    let mut tiaa = Tally::new("align.text_permutation_equivariant", 0.0);
    for i in 0..cases {
        let mut r = root.split(i as u64);
        let (n, d) = (pick(&mut r, 1, 6), pick(&mut r, 1, 40));
        let spread = r.uniform_range(0.1, 30.0);
        let x: Tensor<f64> = r.normal_tensor::<f64>(&[n, d]).map(|v| spread * v);
        let x32 = x.cast::<f32>();
        rows.record((|| {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(x.clone());
            let y = g.softmax(xv)?;
            let mut g32 = Graph::<f32>::new();
            let xv32 = g32.constant(x32.clone());
            let y32 = g32.softmax(xv32)?;
            let worst64 = g.value(y).data().chunks(d).map(|c| (c.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
            let worst32 = g32
                .value(y32)
                .data()
                .chunks(d)
                .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            let negative = g.value(y).data().iter().any(|&v| v < 0.0);
            Ok(if negative { f64::INFINITY } else { worst64.max(worst32) })
        })());
        shift.record((|| {
            let c: Vec<f64> = (0..n).map(|_| r.uniform_range(-50.0, 50.0)).collect();
            let shifted = Tensor::from_fn([n, d], |k| x.data()[k] + c[k / d]);
            let mut g = Graph::<f64>::new();
            let a = g.constant(x.clone());
            let b = g.constant(shifted);
            let ya = g.softmax(a)?;
            let yb = g.softmax(b)?;
            Ok(g.value(ya).max_abs_diff(g.value(yb)))
        })());
        ase.record((|| {
            let cfg = ase_cfg(&mut r);
            let p: ParamSet<f64> = crate::style::init_params(&cfg, &mut r.split(7))?;
            let (b, s) = (pick(&mut r, 1, 3), pick(&mut r, 1, 8));
            let x: Tensor<f64> = r.normal_tensor(&[b, s, cfg.in_dim]);
            let perms: Vec<Vec<usize>> = (0..b).map(|_| permutation(&mut r, s)).collect();
            let xp = Tensor::from_fn([b, s, cfg.in_dim], |k| {
                let (bi, rest) = (k / (s * cfg.in_dim), k % (s * cfg.in_dim));
                let (si, di) = (rest / cfg.in_dim, rest % cfg.in_dim);
                x.data()[(bi * s + perms[bi][si]) * cfg.in_dim + di]
            });
            let mut g = Graph::<f64>::new();
            let bind = p.bind(&mut g, |_| false);
            let xa = g.constant(x);
            let xb = g.constant(xp);
            let ya = extract_style(&mut g, xa, &bind, &cfg)?;
            let yb = extract_style(&mut g, xb, &bind, &cfg)?;
            Ok(if g.value(ya) == g.value(yb) { 0.0 } else { g.value(ya).max_abs_diff(g.value(yb)).max(f64::MIN_POSITIVE) })
        })());
        tiaa.record((|| {
            let heads = pick(&mut r, 1, 2);
            let cfg = TiaaConfig { dim: 2 * heads, text_dim: 2 * heads, heads };
            let p: ParamSet<f64> = crate::align::init_params(&cfg, &mut r.split(8))?;
            let (b, n, m) = (pick(&mut r, 1, 3), pick(&mut r, 1, 4), pick(&mut r, 1, 6));
            let style: Tensor<f64> = r.normal_tensor(&[b, n, cfg.dim]);
            let text: Tensor<f64> = r.normal_tensor(&[b, m, cfg.dim]);
            let perms: Vec<Vec<usize>> = (0..b).map(|_| permutation(&mut r, m)).collect();
            let d = cfg.dim;
            let textp = Tensor::from_fn([b, m, d], |k| {
                let (bi, rest) = (k / (m * d), k % (m * d));
                text.data()[(bi * m + perms[bi][rest / d]) * d + rest % d]
            });
            let mut g = Graph::<f64>::new();
            let bind = p.bind(&mut g, |_| false);
            let w = TiaaWeights::from_binding(&bind)?;
            let sv = g.constant(style);
            let ta = g.constant(text);
            let tb = g.constant(textp);
            let a = align(&mut g, sv, ta, &w, heads, None)?;
            let bb = align(&mut g, sv, tb, &w, heads, None)?;
            let tokens_equal = g.value(a.tokens) == g.value(bb.tokens);
            // column j of the permuted map is column perm[j] of the original
            let (wa, wb) = (&a.map.weights, &bb.map.weights);
            let rows_per_batch = wa.numel() / (b * m);
            let mut maps_equal = true;
            for bi in 0..b {
                for row in 0..rows_per_batch {
                    for j in 0..m {
                        let at = |jj: usize| (bi * rows_per_batch + row) * m + jj;
                        maps_equal &= wb.data()[at(j)] == wa.data()[at(perms[bi][j])];
                    }
                }
            }
            Ok(if tokens_equal && maps_equal { 0.0 } else { 1.0 })
        })());
    }
    vec![rows.finish(), shift.finish(), ase.finish(), tiaa.finish()]
}

/// Fusion endpoints and linearity, guidance endpoints, and the default
/// values read through the run configuration.
pub fn endpoint_suite(cases: usize, seed: u64) -> Vec<Check> {
    let root = RngStream::new(seed, 0xe4d);
    let mut ends = Tally::new("fusion.endpoints_exact", 0.0);
    let mut linear = Tally::new("fusion.linear_in_alpha", 1e-9);
    let mut cfg_ends = Tally::new("guidance.endpoints_exact", 0.0);
    for i in 0..cases {
        let mut r = root.split(i as u64);
        let shape = [pick(&mut r, 1, 3), pick(&mut r, 1, 5), pick(&mut r, 1, 6)];
        let e_i: Tensor<f64> = r.normal_tensor(&shape);
        let e_mm: Tensor<f64> = r.normal_tensor(&shape);
        let alpha = r.uniform();
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(e_i.clone()), g.constant(e_mm.clone()));
        ends.record((|| {
            let one = interpolate(&mut g, a, b, 1.0)?;
            let zero = interpolate(&mut g, a, b, 0.0)?;
            Ok(if g.value(one) == &e_i && g.value(zero) == &e_mm { 0.0 } else { 1.0 })
        })());
        linear.record((|| {
            let f = interpolate(&mut g, a, b, alpha)?;
            let want = Tensor::from_fn(shape, |k| alpha * e_i.data()[k] + (1.0 - alpha) * e_mm.data()[k]);
            Ok(g.value(f).max_abs_diff(&want))
        })());
        cfg_ends.record((|| {
            let cond: Tensor<f64> = r.normal_tensor(&shape);
            let uncond: Tensor<f64> = r.normal_tensor(&shape);
            let mut worst = 0.0;
            for mode in [CfgMode::Blend, CfgMode::Extrapolate] {
                let w1 = cfg_combine(&cond, &uncond, 1.0, mode)?;
                let w0 = cfg_combine(&cond, &uncond, 0.0, mode)?;
                if w1 != cond || w0 != uncond {
                    worst = 1.0;
                }
            }
            Ok(worst)
        })());
    }
    let defaults = match RunConfig::parse("") {
        Ok(c) => {
            let ok = c.fusion.alpha == 0.8 && c.guidance.w == 0.6 && c.fusion.adapter_scale == 0.6 && c.steps == 50;
            Check::new(
                "config.defaults",
                ok,
                1,
                0.0,
                format!(
                    "alpha={} w={} adapter_scale={} steps={}",
                    c.fusion.alpha, c.guidance.w, c.fusion.adapter_scale, c.steps
                ),
            )
        }
        Err(e) => Check::failed("config.defaults", e),
    };
    vec![ends.finish(), linear.finish(), cfg_ends.finish(), defaults]
}

/// Monte Carlo check of the forward marginal at `t` in {1, T/2, T}: pooled
/// mean within 3 standard errors and noise variance within 2%.
pub fn forward_statistics(draws: usize, seed: u64) -> Vec<Check> {
    let sched = match NoiseSchedule::linear(1000, 1e-4, 0.02) {
        Ok(s) => s,
        Err(e) => return vec![Check::failed("forward.marginals", e)],
    };
    let total = sched.len();
    let x0 = Tensor::<f64>::from_f64([8], &[-1.0, -0.6, -0.2, 0.0, 0.1, 0.5, 0.9, 1.0]).expect("shape");
    let mut mean_check = Tally::new("forward.mean_within_3se", 3.0);
    let mut var_check = Tally::new("forward.variance_within_2pct", 0.02);
    for t in [1, total / 2, total] {
        let ab = sched.alpha_bar(t).expect("in range");
        let mut rng = RngStream::new(seed, 0xf0d).split(t as u64);
        let (mut sum, mut sq) = (0.0, 0.0);
        let n = (draws * x0.numel()) as f64;
        let mut failed = None;
        for _ in 0..draws {
            let eps: Tensor<f64> = rng.normal_tensor(x0.shape());
            match diffuse_to(&x0, t, &sched, &eps) {
                Ok(xt) => {
                    for (v, x) in xt.data().iter().zip(x0.data()) {
                        let resid = v - ab.sqrt() * x;
                        sum += resid;
                        sq += resid * resid;
                    }
                }
                Err(e) => failed = Some(e),
            }
        }
        if let Some(e) = failed {
            mean_check.record(Err(e));
            continue;
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        let se = ((1.0 - ab) / n).sqrt();
        mean_check.record(Ok(mean.abs() / se));
        var_check.record(Ok((var / (1.0 - ab) - 1.0).abs()));
    }
    vec![mean_check.finish(), var_check.finish()]
}

/// One DDPM step with the true noise from a one-step sub-schedule ending at
/// `t` returns `x0` to machine precision.
pub fn inversion_suite(cases: usize, seed: u64) -> Vec<Check> {
    let mut tally = Tally::new("ddpm.oracle_noise_inversion", 1e-12);
    let sched = match NoiseSchedule::linear(1000, 1e-4, 0.02) {
        Ok(s) => s,
        Err(e) => return vec![Check::failed("ddpm.oracle_noise_inversion", e)],
    };
    let root = RngStream::new(seed, 0x1ee);
    for i in 0..cases {
        let mut r = root.split(i as u64);
        tally.record((|| {
            let t = pick(&mut r, 1, sched.len());
            let one = sched.subset(&[t])?;
            let shape = [pick(&mut r, 1, 4), pick(&mut r, 1, 8)];
            let x0: Tensor<f64> = r.normal_tensor(&shape);
            let eps: Tensor<f64> = r.normal_tensor(&shape);
            let xt = diffuse_to(&x0, t, &sched, &eps)?;
            let back = reverse_step_ddpm(&xt, 1, &eps, &one, &mut r)?;
            // error relative to the amplification 1/sqrt(alpha_bar)
            Ok(back.max_abs_diff(&x0) * sched.alpha_bar(t)?.sqrt())
        })());
    }
    vec![tally.finish()]
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        text_dim: 8,
        ase: AseConfig {
            queries: 4,
            dim: 8,
            heads: 2,
            layers: 1,
            ff_dim: 16,
            in_dim: PATCH_DIM,
            attend_latents: false,
        },
        tiaa: TiaaConfig { dim: 8, text_dim: 8, heads: 1 },
        denoiser: DenoiserConfig {
            c1: 8,
            c2: 8,
            heads: 2,
            time_dim: 8,
            context_dim: 8,
            ..DenoiserConfig::default()
        },
    }
}

/// Regenerates data, parameters, a short training run with a resume in the
/// middle, its checkpoint and a handful of samples, and compares bytes.
pub fn determinism_suite(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let holdout = parse_cells("1:2").expect("literal");
    let ds = gen_dataset(2, seed, &holdout).and_then(|a| gen_dataset(2, seed, &holdout).map(|b| (a, b)));
    let ds = match ds {
        Ok((a, b)) => {
            out.push(Check::new("determinism.dataset", a == b, 1, 0.0, "two generations compared"));
            a
        }
        Err(e) => return vec![Check::failed("determinism.dataset", e)],
    };
    let run = || -> Result<Vec<Check>> {
        let mut checks = Vec::new();
        let cfg = tiny_model();
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
        let init = |s: u64| -> Result<ParamSet<f32>> {
            let mut rng = RngStream::new(s, crate::rng::streams::INIT);
            let mut p = init_backbone(&cfg, &mut rng)?;
            let a = init_adapter(&cfg, &p, &mut rng)?;
            p.extend(a);
            Ok(p)
        };
        let p = init(seed)?;
        let same = p == init(seed)?;
        checks.push(Check::new("determinism.init", same, 1, 0.0, "two initialisations compared"));

        let mut rc = RunConfig::default();
        rc.seed = seed;
        rc.batch = 4;
        let mut tc = rc.train(Phase::Adapter);
        tc.steps = 4;
        let data = TrainData::from_dataset(&ds)?;
        let mut straight = TrainState::new(p.clone(), &tc);
        train(&tc, &cfg, &sched, &data, &mut straight, None, |_, _| {})?;
        let mut first = TrainState::new(p.clone(), &tc);
        train(&tc, &cfg, &sched, &data, &mut first, Some(2), |_, _| {})?;
        let mid = first.to_checkpoint("", 1)?.to_bytes()?;
        let mut resumed = TrainState::from_checkpoint(&crate::codec::Checkpoint::from_bytes(&mid)?, &tc)?;
        train(&tc, &cfg, &sched, &data, &mut resumed, None, |_, _| {})?;
        checks.push(Check::new(
            "determinism.resume",
            straight.losses == resumed.losses && straight.params == resumed.params,
            tc.steps,
            0.0,
            "straight run vs resumed after 2 steps",
        ));

        let echo = rc.echo();
        let a = straight.to_checkpoint(&echo, 111)?.to_bytes()?;
        let b = resumed.to_checkpoint(&echo, 222)?.to_bytes()?;
        let strip = |v: &[u8]| {
            let mut v = v.to_vec();
            v[crate::codec::TIMESTAMP_RANGE].fill(0);
            v
        };
        let ts = crate::codec::TIMESTAMP_RANGE;
        let eq = strip(&a) == strip(&b) && a[ts.clone()] != b[ts];
        checks.push(Check::new("determinism.checkpoint_bytes", eq, 1, 0.0, "equal outside the timestamp field"));

        let style_ref = ds.image(&ds.train[0].style_ref)?.clone();
        let reqs: Vec<SampleRequest> = (0..3)
            .map(|k| SampleRequest {
                caption: caption_for(k),
                style_ref: Some(style_ref.clone()),
                noise_label: k as u64,
            })
            .collect();
        let settings = SampleSettings {
            steps: 5,
            seed,
            batch: 3,
            ..SampleSettings::default()
        };
        let one = sample_images(&cfg, &straight.params, &sched, &reqs, &settings)?.images;
        let two = sample_images(&cfg, &straight.params, &sched, &reqs, &settings)?.images;
        let single = sample_images(&cfg, &straight.params, &sched, &reqs, &SampleSettings { batch: 1, ..settings.clone() })?.images;
        let bytes = |v: &[crate::image::Image]| v.iter().map(|i| i.to_bytes()).collect::<Vec<_>>();
        checks.push(Check::new(
            "determinism.sampling",
            bytes(&one) == bytes(&two) && bytes(&one) == bytes(&single),
            reqs.len(),
            0.0,
            "repeat and batch-size independence",
        ));
        Ok(checks)
    };
    match run() {
        Ok(c) => out.extend(c),
        Err(e) => out.push(Check::failed("determinism.training", e)),
    }
    out
}

/// Every suite with the sizes used by the `selftest` command.
pub fn run_all(seed: u64) -> SelftestReport {
    let clock = std::time::Instant::now();
    let mut checks = gradient_suite(50, seed);
    checks.extend(attention_suite(200, seed));
    checks.extend(endpoint_suite(200, seed));
    checks.extend(forward_statistics(10_000, seed));
    checks.extend(inversion_suite(200, seed));
    checks.extend(determinism_suite(seed));
    SelftestReport {
        checks,
        runtime_s: clock.elapsed().as_secs_f64(),
    }
}
