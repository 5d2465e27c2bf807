#![allow(dead_code)]

use xmodal_core::benchmark::{generate_benchmark, Benchmark, BenchmarkSpec, DomainSpec};
use xmodal_core::encoder::{EncoderConfig, FrozenBackbone};
use xmodal_core::experiment::ExperimentConfig;
use xmodal_core::trainer::TrainConfig;

pub fn backbone() -> FrozenBackbone<f64> {
    FrozenBackbone::new(&EncoderConfig::default()).unwrap()
}

/// A few classes per domain with short inversion, for fast tests.
pub fn small_spec(domains: usize, classes: usize, train: usize, test: usize) -> BenchmarkSpec {
    BenchmarkSpec {
        domains: vec![
            DomainSpec {
                classes,
                modes: 2,
                train_per_class: train,
                test_per_class: test,
            };
            domains
        ],
        inversion_steps: 60,
        ..BenchmarkSpec::default()
    }
}

pub fn small_bench(seed: u64) -> (FrozenBackbone<f64>, Benchmark<f64>) {
    let b = backbone();
    let bench = generate_benchmark(&small_spec(2, 3, 24, 12), &b, seed).unwrap();
    (b, bench)
}

pub fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        kmeans_restarts: 3,
        ..TrainConfig::default()
    }
}

pub fn small_experiment() -> ExperimentConfig {
    ExperimentConfig {
        benchmark: small_spec(2, 3, 16, 8),
        train: TrainConfig {
            epochs: 2,
            kmeans_restarts: 2,
            ..TrainConfig::default()
        },
        seeds: vec![0],
        ..ExperimentConfig::default()
    }
}
