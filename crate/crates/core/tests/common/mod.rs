#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use popviz::data::{synth_dataset, Dataset, Split, SynthSpec};
use popviz::model::{train, Architecture, Classifier, TrainConfig};
use popviz::{Rng, Tensor};

/// A small synthetic train/test pair and a classifier trained on it.
pub fn small_setup(per_class: usize, test_per_class: usize, epochs: usize) -> (Classifier, Dataset, Dataset) {
    let spec = SynthSpec { per_class, seed: 11, ..SynthSpec::default() };
    let train_set = synth_dataset(&spec, Split::Train).unwrap();
    let test_set = synth_dataset(&SynthSpec { per_class: test_per_class, ..spec }, Split::Test).unwrap();
    let cfg = TrainConfig { epochs, seed: 11, ..TrainConfig::default() };
    let arch = Architecture::desk(train_set.image_shape(), train_set.num_classes());
    let (model, _) = train(arch, &train_set, &cfg).unwrap();
    (model, train_set, test_set)
}

pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}
