mod common;

use std::fs;
use std::path::Path;

use popviz::data::{ingest_cifar10, Dataset};
use popviz::model::{accuracy, filter_correct, train, Architecture, Classifier, TrainConfig};

/// Writes a CIFAR-10 batch whose record `r` has label `(base + r) % 10` and
/// pixel bytes `(r + channel) * 10` in channel-major order.
fn write_batch(path: &Path, base: usize, records: usize) {
    let mut bytes = Vec::new();
    for r in 0..records {
        bytes.push(((base + r) % 10) as u8);
        for c in 0..3 {
            bytes.extend(std::iter::repeat(((r + c) * 10) as u8).take(1024));
        }
    }
    fs::write(path, bytes).unwrap();
}

fn fixture(dir: &Path) {
    for i in 1..=5 {
        write_batch(&dir.join(format!("data_batch_{i}.bin")), i, 2);
    }
    write_batch(&dir.join("test_batch.bin"), 0, 3);
}

#[test]
fn cifar_fixture_is_ingested() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let (train_set, test_set) = ingest_cifar10(dir.path()).unwrap();
    assert_eq!(train_set.images().shape(), &[10, 3, 32, 32]);
    assert_eq!(train_set.labels(), &[1, 2, 2, 3, 3, 4, 4, 5, 5, 6]);
    assert_eq!(test_set.labels(), &[0, 1, 2]);
    assert_eq!(test_set.class_names()[0], "airplane");
    let img = test_set.images().row(2);
    assert_eq!(img[0], 20.0 / 255.0);
    assert_eq!(img[1024], 30.0 / 255.0);
    assert_eq!(img[3071], 40.0 / 255.0);

    fs::write(dir.path().join("batches.meta.txt"), "a\nb\nc\nd\ne\nf\ng\nh\ni\nj\n").unwrap();
    assert_eq!(ingest_cifar10(dir.path()).unwrap().0.class_names()[9], "j");
}

#[test]
fn malformed_cifar_batches_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let test_path = dir.path().join("test_batch.bin");
    let mut bytes = fs::read(&test_path).unwrap();
    bytes.pop();
    fs::write(&test_path, &bytes).unwrap();
    let msg = ingest_cifar10(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("test_batch.bin") && msg.contains("6146"), "{msg}");

    fixture(dir.path());
    let mut bytes = fs::read(&test_path).unwrap();
    bytes[3073] = 12;
    fs::write(&test_path, &bytes).unwrap();
    let msg = ingest_cifar10(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("label byte 12") && msg.contains("3073"), "{msg}");

    fs::remove_file(dir.path().join("data_batch_3.bin")).unwrap();
    assert!(ingest_cifar10(dir.path()).is_err());
}

#[test]
fn dataset_and_model_persist() {
    let (model, train_set, test_set) = common::small_setup(10, 4, 1);
    let dir = tempfile::tempdir().unwrap();
    test_set.save(&dir.path().join("test")).unwrap();
    assert_eq!(Dataset::load(&dir.path().join("test")).unwrap(), test_set);
    model.save(&dir.path().join("model")).unwrap();
    let back = Classifier::load(&dir.path().join("model")).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.logits(train_set.images()).unwrap(), model.logits(train_set.images()).unwrap());
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let (model, train_set, test_set) = common::small_setup(12, 4, 2);
    let cfg = TrainConfig { epochs: 2, seed: 11, ..TrainConfig::default() };
    let arch = Architecture::desk(train_set.image_shape(), train_set.num_classes());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (serial, _) = pool.install(|| train(arch, &train_set, &cfg)).unwrap();
    assert_eq!(serial, model);

    let correct = filter_correct(&model, &test_set).unwrap();
    if !correct.is_empty() {
        assert_eq!(accuracy(&model, &correct).unwrap(), 1.0);
    }
}
