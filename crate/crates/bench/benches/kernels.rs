use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use reframe::attention::attend;
use reframe::codec::Checkpoint;
use reframe::fusion::FusionConfig;
use reframe::model::{sample_images, training_loss, LossWeighting, Phase, SampleRequest, SampleSettings};
use reframe::style::extract_style;
use reframe::toy_world::caption_for;
use reframe::Graph;
use reframe_bench::{random, Fixture};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = random(&[n, n], 1);
        let b = random(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let (q, k, v) = (random(&[32, 16, 64], 3), random(&[32, 36, 64], 4), random(&[32, 36, 64], 5));
    c.bench_function("attend_fwd_bwd_b32_h4", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let (q, k, v) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
            let (out, _) = attend(&mut g, q, k, v, 4, None).unwrap();
            let loss = g.sum(out).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(q));
        })
    });
}

fn style_extractor(c: &mut Criterion) {
    let fx = Fixture::new(32);
    c.bench_function("extract_style_b32", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let p = fx.params.bind(&mut g, |_| false);
            let x = g.constant(fx.batch.style_patches.clone());
            black_box(extract_style(&mut g, x, &p, &fx.model.ase).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let fx = Fixture::new(32);
    let fusion = FusionConfig::default();
    let mut group = c.benchmark_group("train_step_b32");
    group.sample_size(10);
    for (name, phase) in [("pretrain", Phase::Pretrain), ("adapter", Phase::Adapter)] {
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let p = fx.params.bind(&mut g, |_| true);
                let loss = training_loss(&mut g, &p, &fx.model, &fx.sched, &fx.batch, phase, &fusion, LossWeighting::default()).unwrap();
                g.backward(loss).unwrap();
                black_box(g.value(loss).data()[0]);
            })
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let fx = Fixture::new(1);
    let reference = fx.data.image(&fx.data.train[0].path).unwrap().clone();
    let requests: Vec<SampleRequest> = (0..8)
        .map(|i| SampleRequest {
            caption: caption_for(i % 4),
            style_ref: Some(reference.clone()),
            noise_label: i as u64,
        })
        .collect();
    let settings = SampleSettings {
        steps: 5,
        ..SampleSettings::default()
    };
    let mut group = c.benchmark_group("sample");
    group.sample_size(10);
    group.bench_function("b8_5_steps", |bench| {
        bench.iter(|| black_box(sample_images(&fx.model, &fx.params, &fx.sched, &requests, &settings).unwrap()))
    });
    group.finish();
}

fn checkpoint(c: &mut Criterion) {
    let fx = Fixture::new(1);
    let ck = Checkpoint {
        timestamp: 0,
        config_echo: String::new(),
        tensors: fx.params.clone().into_tensors(),
    };
    let bytes = ck.to_bytes().unwrap();
    c.bench_function("checkpoint_encode", |bench| bench.iter(|| black_box(ck.to_bytes().unwrap())));
    c.bench_function("checkpoint_decode", |bench| {
        bench.iter(|| black_box(Checkpoint::from_bytes(&bytes).unwrap()))
    });
}

criterion_group!(benches, matmul, attention, style_extractor, train_step, sampling, checkpoint);
criterion_main!(benches);
