//! Training, checkpointing, evaluation and forward-process checks on a
//! small model.

use reframe::codec::Checkpoint;
use reframe::config::RunConfig;
use reframe::diffusion::{denoise, diffuse_step, diffuse_to, Context, NoiseSchedule, Timestep};
use reframe::eval::eval_accuracy;
use reframe::model::{
    init_adapter, init_backbone, is_adapter_param, is_backbone_param, training_loss, LossWeighting, ModelConfig, Phase,
};
use reframe::rng::{streams, RngStream};
use reframe::style::extract_style;
use reframe::toy_world::{encode_text, gen_dataset, Dataset};
use reframe::trainer::{params_from_checkpoint, train, TrainData, TrainState};
use reframe::{Graph, ParamSet, Tensor};

fn small_config() -> RunConfig {
    let mut rc = RunConfig::default();
    for (k, v) in [
        ("model.dim", "8"),
        ("ase.queries", "3"),
        ("ase.heads", "2"),
        ("ase.layers", "1"),
        ("ase.ff_dim", "16"),
        ("unet.c1", "8"),
        ("unet.c2", "8"),
        ("unet.heads", "2"),
        ("diffusion.T", "100"),
        ("diffusion.steps", "4"),
        ("train.batch", "4"),
        ("eval.batch", "8"),
    ] {
        rc.set(k, v).unwrap();
    }
    rc.validate().unwrap();
    rc
}

fn dataset() -> Dataset {
    gen_dataset(2, 5, &RunConfig::default().holdout).unwrap()
}

fn full_params(model: &ModelConfig, seed: u64) -> ParamSet<f32> {
    let init = RngStream::new(seed, streams::INIT);
    let mut p = init_backbone(model, &mut init.clone()).unwrap();
    let a = init_adapter(model, &p, &mut init.split(100)).unwrap();
    p.extend(a);
    p
}

#[test]
fn adapter_training_leaves_the_backbone_bit_identical() {
    let rc = small_config();
    let model = rc.model();
    let data = TrainData::from_dataset(&dataset()).unwrap();
    let mut tc = rc.train(Phase::Adapter);
    tc.steps = 3;
    let params = full_params(&model, 1);
    let mut state = TrainState::new(params.clone(), &tc);
    train(&tc, &model, &rc.schedule().unwrap(), &data, &mut state, None, |_, _| {}).unwrap();
    let mut adapter_moved = false;
    for (name, before) in params.iter() {
        let after = state.params.get(name).unwrap();
        if is_backbone_param(name) {
            assert_eq!(before, after, "{name}");
        } else if before != after {
            adapter_moved = true;
        }
    }
    assert!(adapter_moved);
}

#[test]
fn checkpoint_round_trip_preserves_the_forward_pass() {
    let rc = small_config();
    let model = rc.model();
    let sched = rc.schedule().unwrap();
    let params = full_params(&model, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.rfck");
    let tc = rc.train(Phase::Pretrain);
    TrainState::new(params.clone(), &tc).to_checkpoint(&rc.echo(), 11).unwrap().save(&path).unwrap();
    let loaded = params_from_checkpoint(&Checkpoint::load(&path).unwrap());

    let x = RngStream::new(3, 4).normal_tensor::<f32>(&[2, 24, 24, 3]);
    let forward = |p: &ParamSet<f32>| {
        let mut g = Graph::<f32>::new();
        let b = p.bind(&mut g, |_| false);
        let text = encode_text(&mut g, &b, &[vec![0, 2, 3, 1], vec![0, 2, 4, 1]]).unwrap();
        let xv = g.constant(x.clone());
        let steps = Timestep::batch(&sched, &[7, 70]).unwrap();
        let out = denoise(&mut g, &b, &model.denoiser, xv, &steps, &Context::text_only(text)).unwrap();
        g.value(out).clone()
    };
    assert_eq!(forward(&params).data(), forward(&loaded).data());
}

#[test]
fn evaluation_is_a_function_of_its_inputs() {
    let rc = small_config();
    let model = rc.model();
    let sched = rc.schedule().unwrap();
    let ds = dataset();
    let params = full_params(&model, 3);
    let cells = ds.holdout_cells();
    let run = || eval_accuracy(&model, &params, &sched, &ds, &cells, 2, true, &rc.sample_settings()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.cells.len(), cells.len());
}

#[test]
fn loss_estimates_have_consistent_standard_errors() {
    let mut rc = small_config();
    rc.set("train.batch", "1").unwrap();
    rc.set("guidance.cond_drop_p", "0").unwrap();
    let model = rc.model();
    let sched = rc.schedule().unwrap();
    let data = TrainData::from_dataset(&dataset()).unwrap();
    let params = full_params(&model, 4);
    let fusion = rc.train(Phase::Adapter).fusion;
    let draws: Vec<f64> = (1..=1000)
        .map(|step| {
            let batch = data.batch(step, 1, 9, &sched, 0.0).unwrap();
            let mut g = Graph::<f32>::new();
            let b = params.bind(&mut g, |_| false);
            let loss = training_loss(&mut g, &b, &model, &sched, &batch, Phase::Adapter, &fusion, LossWeighting::Eps).unwrap();
            g.value(loss).data()[0] as f64
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.is_finite() && var > 0.0);

    // batch means of 50 draws should scatter as var / 50 predicts
    let groups: Vec<f64> = draws.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let k = groups.len() as f64;
    let gm = groups.iter().sum::<f64>() / k;
    let gvar = groups.iter().map(|m| (m - gm).powi(2)).sum::<f64>() / (k - 1.0);
    let ratio = gvar / (var / 50.0);
    // chi-square with 19 degrees of freedom: 0.5% and 99.5% quantiles over 19
    assert!((0.36..=2.03).contains(&ratio), "batch-mean variance ratio {ratio}");
    assert!((gm - mean).abs() < 1e-9);
}

#[test]
fn chained_forward_steps_reach_the_closed_form_marginal() {
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let x0 = Tensor::<f64>::from_f64([4], &[-1.0, -0.3, 0.4, 0.9]).unwrap();
    let t = 150;
    let draws = 4000;
    let mut rng = RngStream::new(6, 1);
    let mut sums = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..draws {
        let mut x = x0.clone();
        for s in 1..=t {
            x = diffuse_step(&x, s, &sched, &rng.normal_tensor(&[4])).unwrap();
        }
        for i in 0..4 {
            sums[i] += x.data()[i];
            sq[i] += x.data()[i] * x.data()[i];
        }
    }
    let ab = sched.alpha_bar(t).unwrap();
    let sd = (1.0 - ab).sqrt();
    let zero = Tensor::<f64>::zeros([4]);
    let mean_ref = diffuse_to(&x0, t, &sched, &zero).unwrap();
    for i in 0..4 {
        let m = sums[i] / draws as f64;
        let v = sq[i] / draws as f64 - m * m;
        let se = sd / (draws as f64).sqrt();
        assert!((m - mean_ref.data()[i]).abs() < 4.0 * se, "mean {m} vs {}", mean_ref.data()[i]);
        // variance of a sample variance is 2 sigma^4 / n for a Gaussian
        let v_se = (2.0f64 / draws as f64).sqrt() * sd * sd;
        assert!((v - sd * sd).abs() < 4.0 * v_se, "variance {v} vs {}", sd * sd);
    }
}

#[test]
fn every_style_extractor_parameter_receives_gradient() {
    let model = small_config().model();
    let params = full_params(&model, 7).cast::<f64>().filter(|n| n.starts_with("ase."));
    let x = RngStream::new(8, 1).normal_tensor::<f64>(&[2, 36, 48]);
    let mut g = Graph::<f64>::new();
    let b = params.bind(&mut g, |_| true);
    let xv = g.constant(x);
    let e = extract_style(&mut g, xv, &b, &model.ase).unwrap();
    let r = g.constant(RngStream::new(9, 1).normal_tensor(&[2, 3, 8]));
    let y = g.mul(e, r).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    for (name, &v) in b.iter() {
        let grad = g.grad(v).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.data().iter().any(|&d| d != 0.0), "{name} gradient is zero");
        assert!(is_adapter_param(name));
    }
}
