//! Fixtures shared by the benchmarks in `benches/`.

pub use ssl_vqa_core as core;

use ssl_vqa_core::{data, Dataset, Instance, ModelSpec, Params, WorldSpec};

/// Default world shape with a smaller training split.
pub fn world(train_size: usize) -> WorldSpec {
    WorldSpec {
        train_size,
        test_size: 256,
        ..WorldSpec::default()
    }
}

pub fn dataset(train_size: usize) -> Dataset {
    data::generate(&world(train_size)).expect("default world is valid")
}

pub fn params(data: &Dataset) -> Params {
    Params::init(&ModelSpec::default().fit_to(data)).expect("default model is valid")
}

pub fn batch(data: &Dataset, n: usize) -> Vec<&Instance> {
    data.train.iter().take(n).collect()
}
