//! Fixtures shared by the kernel benchmarks.

use reframe::diffusion::NoiseSchedule;
use reframe::model::{init_adapter, init_backbone, ModelConfig, TrainBatch};
use reframe::rng::{streams, RngStream};
use reframe::toy_world::{gen_dataset, Dataset};
use reframe::trainer::TrainData;
use reframe::{ParamSet, Tensor};

pub const SEED: u64 = 7;

pub struct Fixture {
    pub model: ModelConfig,
    pub sched: NoiseSchedule,
    pub params: ParamSet<f32>,
    pub data: Dataset,
    pub batch: TrainBatch<f32>,
}

impl Fixture {
    /// Default-sized model with an adapter and one training batch of `size`.
    pub fn new(size: usize) -> Fixture {
        let model = ModelConfig::default();
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).expect("schedule");
        let init = RngStream::new(SEED, streams::INIT);
        let mut params = init_backbone(&model, &mut init.clone()).expect("backbone");
        let adapter = init_adapter(&model, &params, &mut init.split(100)).expect("adapter");
        params.extend(adapter);
        let data = gen_dataset(2, SEED, &[]).expect("dataset");
        let batch = TrainData::from_dataset(&data)
            .and_then(|d| d.batch(0, size, SEED, &sched, 0.1))
            .expect("batch");
        Fixture {
            model,
            sched,
            params,
            data,
            batch,
        }
    }
}

pub fn random(shape: &[usize], label: u64) -> Tensor<f32> {
    RngStream::new(SEED, streams::DATA).split(label).normal_tensor(shape)
}
