//! Shared fixtures for the benchmarks.

use rnpc_core::circuit::Circuit;
use rnpc_core::datagen::{preset, Generator, LabeledSample};
use rnpc_core::geometry::ClassPartition;
use rnpc_core::harness::{build_partition, learn_circuit, train_recognizer, ExperimentConfig};
use rnpc_core::recognizer::{RecognizerParams, TrainConfig};

pub struct Fixture {
    pub generator: Generator,
    pub samples: Vec<LabeledSample>,
    pub recognizer: RecognizerParams,
    pub circuit: Circuit,
    pub partition: ClassPartition,
}

/// A small trained pipeline on the named preset.
pub fn fixture(name: &str) -> Fixture {
    let cfg = ExperimentConfig {
        preset: name.into(),
        train: TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let generator = Generator::new(&preset(name).expect("known preset")).expect("valid preset");
    let samples = generator.sample(1000, 1);
    let rows: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| {
            std::iter::once(s.label)
                .chain(s.attrs.iter().copied())
                .collect()
        })
        .collect();
    let recognizer = train_recognizer(&cfg, &generator, &samples)
        .expect("training")
        .params;
    let (circuit, _) = learn_circuit(&cfg, &generator, &rows).expect("circuit");
    let partition = build_partition(&cfg, &generator, &rows).expect("partition");
    Fixture {
        generator,
        samples,
        recognizer,
        circuit,
        partition,
    }
}
