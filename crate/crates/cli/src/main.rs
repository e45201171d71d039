//! `reframe`: dataset generation, two-phase training, sampling, evaluation,
//! attention inspection and the invariant self-test.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file
//! format error, 3 numeric failure or violated invariant.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use reframe::codec::Checkpoint;
use reframe::config::RunConfig;
use reframe::diffusion::SamplerKind;
use reframe::eval::{alpha_sweep, eval_accuracy, EvalReport};
use reframe::model::{
    adapter_tokens, has_adapter, init_adapter, init_backbone, is_adapter_param, is_backbone_param, sample_images,
    ModelConfig, Phase, SampleRequest,
};
use reframe::rng::{streams, RngStream};
use reframe::toy_world::encoders::{caption_words, encode_image, encode_text};
use reframe::toy_world::render::Cell;
use reframe::toy_world::{gen_dataset, oracle_classify, parse_caption, parse_cells, Dataset};
use reframe::trainer::{loss_csv, params_from_checkpoint, train, Stopwatch, TrainData, TrainState};
use reframe::{Error, Graph, Image, ParamSet, Result, Tensor};

#[derive(Parser)]
#[command(name = "reframe", version, about = "Style-conditioned diffusion on a toy styled-shapes world")]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random stream (overrides the `seed` key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the styled-shapes dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Held-out cells as `style:content,...`.
        #[arg(long)]
        holdout: Option<String>,
        #[arg(long)]
        samples_per_cell: Option<usize>,
    },
    /// Pretrain the backbone or train the adapter on a frozen backbone.
    Train(TrainArgs),
    /// Generate one image and print its oracle labels.
    Sample(SampleArgs),
    /// Oracle accuracy over a set of cells.
    Eval(EvalArgs),
    /// Diversity as a function of the fusion ratio.
    Sweep(SweepArgs),
    /// Dump the aligner's attention map as CSV.
    InspectAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        style: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Pretrain,
    Adapter,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    phase: PhaseArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pretrained backbone checkpoint (adapter phase).
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Continue a run of the same phase from its checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many optimiser steps are done (overrides the config).
    /// The learning-rate schedule still spans the configured phase length.
    #[arg(long)]
    steps: Option<usize>,
    /// Loss log; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    caption: String,
    /// Style reference image (PPM); text-only sampling when omitted.
    #[arg(long)]
    style: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    adapter_scale: Option<f64>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    sampler: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `seen`, `holdout`, `all` or a list `style:content,...`.
    #[arg(long, default_value = "all")]
    cells: String,
    /// Seeds per cell (overrides `eval.seeds`).
    #[arg(long)]
    seeds: Option<usize>,
    /// Sample from the caption alone.
    #[arg(long)]
    text_only: bool,
    /// Replace the aligner's output by the style tokens.
    #[arg(long)]
    bypass_tiaa: bool,
    /// `key=value` report file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated fusion ratios (overrides `eval.alphas`).
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long, default_value = "all")]
    cells: String,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut rc = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        rc.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        rc.seed = seed;
    }
    rc.validate()?;
    Ok(rc)
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Architecture recorded in a checkpoint; the current config when it has none.
fn checkpoint_model(ck: &Checkpoint, rc: &RunConfig) -> Result<ModelConfig> {
    if ck.config_echo.trim().is_empty() {
        Ok(rc.model())
    } else {
        Ok(RunConfig::parse(&ck.config_echo)?.model())
    }
}

fn select_cells(ds: &Dataset, spec: &str) -> Result<Vec<Cell>> {
    let mut cells = match spec {
        "seen" => ds.train_cells(),
        "holdout" => ds.holdout_cells(),
        "all" => {
            let mut c = ds.train_cells();
            c.extend(ds.holdout_cells());
            c
        }
        list => parse_cells(list)?,
    };
    cells.sort();
    cells.dedup();
    if cells.is_empty() {
        return Err(usage(format!("no cells selected by {spec:?}")));
    }
    Ok(cells)
}

fn cmd_gen_data(rc: &RunConfig, out: &Path, holdout: Option<&str>, spc: Option<usize>) -> Result<()> {
    let holdout = match holdout {
        Some(h) => parse_cells(h)?,
        None => rc.holdout.clone(),
    };
    let spc = spc.unwrap_or(rc.samples_per_cell);
    let ds = gen_dataset(spc, rc.seed, &holdout)?;
    ds.save(out)?;
    println!(
        "wrote {} training and {} holdout images to {}",
        ds.train.len(),
        ds.holdout.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(rc: &RunConfig, a: &TrainArgs) -> Result<()> {
    let phase = match a.phase {
        PhaseArg::Pretrain => Phase::Pretrain,
        PhaseArg::Adapter => Phase::Adapter,
    };
    let mut tc = rc.train(phase);
    if let Some(n) = a.steps {
        tc.steps = n;
    }
    let model = rc.model();
    let sched = rc.schedule()?;
    let ds = Dataset::load(&a.data)?;
    let data = TrainData::from_dataset(&ds)?;

    let mut state = match (&a.resume, phase, &a.backbone) {
        (Some(path), _, _) => {
            let ck = Checkpoint::load(path)?;
            let adapter = ck.tensors.iter().any(|(n, _)| is_adapter_param(n));
            if adapter != (phase == Phase::Adapter) {
                return Err(usage(format!("{} is not a checkpoint of this phase", path.display())));
            }
            TrainState::from_checkpoint(&ck, &tc)?
        }
        (None, Phase::Pretrain, _) => {
            let params = init_backbone(&model, &mut RngStream::new(rc.seed, streams::INIT))?;
            TrainState::new(params, &tc)
        }
        (None, Phase::Adapter, None) => return Err(usage("the adapter phase needs --backbone or --resume")),
        (None, Phase::Adapter, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            let mut params = params_from_checkpoint(&ck).filter(is_backbone_param);
            if params.is_empty() {
                return Err(usage(format!("{} holds no backbone parameters", path.display())));
            }
            let rng = RngStream::new(rc.seed, streams::INIT).split(100);
            let adapter = init_adapter(&model, &params, &mut rng.clone())?;
            params.extend(adapter);
            TrainState::new(params, &tc)
        }
    };
    if state.step > tc.steps {
        return Err(usage(format!("checkpoint is at step {}, past --steps {}", state.step, tc.steps)));
    }

    let clock = Stopwatch::start();
    let start = state.step;
    let every = rc.log_every;
    let mut window = 0.0;
    let mut count = 0usize;
    train(&tc, &model, &sched, &data, &mut state, None, |step, loss| {
        window += loss;
        count += 1;
        if every > 0 && (step % every == 0 || step == tc.steps) {
            eprintln!(
                "step {step:>6}  loss {:.5}  {:.1} s",
                window / count as f64,
                clock.seconds()
            );
            window = 0.0;
            count = 0;
        }
    })?;

    let ck = state.to_checkpoint(&rc.echo(), now())?;
    ck.save(&a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write(&csv, &loss_csv(&state.losses))?;
    println!(
        "trained {} steps ({} to {}) in {:.1} s; checkpoint {}",
        state.step - start,
        start,
        state.step,
        clock.seconds(),
        a.out.display()
    );
    Ok(())
}

fn cmd_sample(rc: &RunConfig, a: &SampleArgs) -> Result<()> {
    let mut rc = rc.clone();
    if let Some(v) = a.alpha {
        rc.fusion.alpha = v;
    }
    if let Some(v) = a.adapter_scale {
        rc.fusion.adapter_scale = v;
    }
    if let Some(v) = a.w {
        rc.guidance.w = v;
    }
    if let Some(v) = a.steps {
        rc.steps = v;
    }
    if let Some(v) = &a.sampler {
        rc.sampler = v.parse::<SamplerKind>()?;
    }
    rc.validate()?;
    let caption = parse_caption(&a.caption)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = checkpoint_model(&ck, &rc)?;
    let params = params_from_checkpoint(&ck);
    let style_ref = a.style.as_ref().map(Image::load_ppm).transpose()?;
    let request = SampleRequest {
        caption,
        style_ref,
        noise_label: 0,
    };
    let out = sample_images(&model, &params, &rc.schedule()?, &[request], &rc.sample_settings())?;
    let img = &out.images[0];
    img.save_ppm(&a.out)?;
    let label = oracle_classify(img);
    println!(
        "{}: style {} ({:.3}) content {} ({:.3})",
        a.out.display(),
        label.style,
        label.style_confidence,
        label.content,
        label.content_confidence
    );
    Ok(())
}

fn report_out(report: &EvalReport, path: Option<&Path>) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(p) = path {
        write(p, &report.to_kv())?;
    }
    Ok(())
}

fn cmd_eval(rc: &RunConfig, a: &EvalArgs) -> Result<()> {
    let clock = Stopwatch::start();
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = checkpoint_model(&ck, rc)?;
    let params = params_from_checkpoint(&ck);
    let ds = Dataset::load(&a.data)?;
    let cells = select_cells(&ds, &a.cells)?;
    let seeds = a.seeds.unwrap_or(rc.eval_seeds);
    let mut settings = rc.sample_settings();
    settings.bypass_tiaa = a.bypass_tiaa;
    let with_reference = !a.text_only;
    if with_reference && !has_adapter(&params) {
        return Err(usage("checkpoint has no adapter; use --text-only"));
    }
    let acc = eval_accuracy(&model, &params, &rc.schedule()?, &ds, &cells, seeds, with_reference, &settings)?;
    let label = match (a.text_only, a.bypass_tiaa) {
        (true, _) => "text-only",
        (false, true) => "aligner bypassed",
        (false, false) => "full pipeline",
    };
    let report = EvalReport {
        label: format!("{label}, cells {}", a.cells),
        accuracy: Some(acc),
        runtime_s: clock.seconds(),
        config_echo: rc.echo(),
        ..EvalReport::default()
    };
    report_out(&report, a.report.as_deref())
}

fn cmd_sweep(rc: &RunConfig, a: &SweepArgs) -> Result<()> {
    let clock = Stopwatch::start();
    let alphas = match &a.alphas {
        Some(list) => {
            let mut r = rc.clone();
            r.set("eval.alphas", list)?;
            r.validate()?;
            r.sweep_alphas
        }
        None => rc.sweep_alphas.clone(),
    };
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = checkpoint_model(&ck, rc)?;
    let params = params_from_checkpoint(&ck);
    if !has_adapter(&params) {
        return Err(usage("the alpha sweep needs an adapter checkpoint"));
    }
    let ds = Dataset::load(&a.data)?;
    let cells = select_cells(&ds, &a.cells)?;
    let seeds = a.seeds.unwrap_or(rc.eval_seeds);
    let (rows, trend) = alpha_sweep(
        &model,
        &params,
        &rc.schedule()?,
        &ds,
        &cells,
        seeds,
        &alphas,
        &rc.sample_settings(),
    )?;
    let report = EvalReport {
        label: format!("alpha sweep, cells {}, {seeds} seeds", a.cells),
        sweep: rows,
        trend: Some(trend),
        runtime_s: clock.seconds(),
        config_echo: rc.echo(),
        ..EvalReport::default()
    };
    report_out(&report, a.report.as_deref())
}

fn cmd_inspect(rc: &RunConfig, ckpt: &Path, caption: &str, style: &Path, out: Option<&Path>) -> Result<()> {
    let caption = parse_caption(caption)?;
    let ck = Checkpoint::load(ckpt)?;
    let model = checkpoint_model(&ck, rc)?;
    let params: ParamSet<f32> = params_from_checkpoint(&ck);
    if !has_adapter(&params) {
        return Err(usage("checkpoint has no adapter"));
    }
    let img = Image::load_ppm(style)?;
    let patches: Tensor<f32> = encode_image(&img)?;
    let shape = patches.shape().to_vec();
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, |_| false);
    let text = encode_text(&mut g, &p, &[caption.clone()])?;
    let x = g.constant(patches.reshape([1, shape[0], shape[1]])?);
    let tokens = adapter_tokens(&mut g, &p, &model, x, text, rc.fusion.alpha, false)?;
    let mut csv = format!("# caption: {}\n", caption_words(&caption));
    csv.push_str(&tokens.map.to_csv(0));
    match out {
        Some(path) => write(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_selftest(rc: &RunConfig) -> Result<()> {
    let report = reframe::selftest::run_all(rc.seed);
    print!("{}", report.to_text());
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Error::Invariant(format!("failing properties: {}", failed.join(", "))))
    }
}

fn run(cli: &Cli) -> Result<()> {
    let rc = load_config(cli)?;
    match &cli.command {
        Command::GenData {
            out,
            holdout,
            samples_per_cell,
        } => cmd_gen_data(&rc, out, holdout.as_deref(), *samples_per_cell),
        Command::Train(a) => cmd_train(&rc, a),
        Command::Sample(a) => cmd_sample(&rc, a),
        Command::Eval(a) => cmd_eval(&rc, a),
        Command::Sweep(a) => cmd_sweep(&rc, a),
        Command::InspectAttention {
            ckpt,
            caption,
            style,
            out,
        } => cmd_inspect(&rc, ckpt, caption, style, out.as_deref()),
        Command::Selftest => cmd_selftest(&rc),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
