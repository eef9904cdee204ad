//! Fixtures shared by the benchmarks.

use moa_core::data::{sequential_batches, Batch};
use moa_core::experiment::{build_model, prepare_task};
use moa_core::{AdaptedModel, RunConfig, Tensor};

/// The keyphrase sample configuration with `modules` modules per site.
pub fn keyphrase_config(modules: usize) -> RunConfig {
    let text = include_str!("../../../configs/keyphrase.toml");
    let mut cfg = RunConfig::from_toml(text).expect("sample config parses");
    cfg.adaptation.modules = modules;
    cfg
}

/// A freshly initialized model and one training batch.
pub fn model_and_batch(modules: usize) -> (AdaptedModel, Batch) {
    let cfg = keyphrase_config(modules);
    let data = prepare_task(&cfg).expect("task builds");
    let model = build_model(&cfg, data.vocab_size).expect("model builds");
    let batch = sequential_batches(&data.train, cfg.train.batch_size)
        .into_iter()
        .next()
        .expect("non-empty split");
    (model, batch)
}

/// A deterministic `[rows, cols]` matrix with values in `[-1, 1)`.
pub fn matrix(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((i * 7919 % 2003) as f64 / 1001.5) - 1.0)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}
