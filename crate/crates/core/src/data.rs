//! Image datasets: the synthetic Gaussian-blob stand-in and the CIFAR-10
//! binary batch reader.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_file::{load_matrix, save_matrix, write_atomic, Matrix};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled images `[n, C, H, W]` with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dimension(format!(
                "dataset images must be [n,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Input(format!(
                "label {l} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
            split,
        })
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Examples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }
}

/// Parameters of the synthetic Gaussian-blob dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Contrast of the class template around mid-grey, in `[0, 1]`.
    pub separation: f32,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            per_class: 200,
            channels: 3,
            height: 16,
            width: 16,
            separation: 0.25,
            noise: 0.2,
            seed: 0,
        }
    }
}

const BLOBS_PER_CLASS: usize = 3;

/// Renders class templates from `spec.seed` and draws a balanced sample.
/// Train and test splits share templates and use different noise streams.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Input(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Input("image extents must be positive".into()));
    }
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let plane = h * w;
    let root = Rng::new(spec.seed);
    let mut trng = root.substream(0x7e4d);
    let templates: Vec<Vec<f32>> = (0..spec.classes).map(|_| render_template(&mut trng, c, h, w)).collect();

    let mut srng = root.substream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * c * plane);
    let mut labels = Vec::with_capacity(n);
    let amp = 0.5 * spec.separation;
    for i in 0..n {
        let label = i % spec.classes;
        labels.push(label);
        for &t in &templates[label] {
            let v = 0.5 + amp * t + spec.noise * srng.gaussian() as f32;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let names = (0..spec.classes).map(|k| format!("class{k}")).collect();
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, names, split)
}

fn render_template(rng: &mut Rng, c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut t = vec![0f64; c * h * w];
    for _ in 0..BLOBS_PER_CLASS {
        let cy = (0.15 + 0.7 * rng.next_f64()) * h as f64;
        let cx = (0.15 + 0.7 * rng.next_f64()) * w as f64;
        let sigma = (0.12 + 0.18 * rng.next_f64()) * h.max(w) as f64;
        let amps: Vec<f64> = (0..c).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
        for (ch, &a) in amps.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    t[(ch * h + y) * w + x] += a * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let peak = t.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
    t.iter().map(|v| (v / peak) as f32).collect()
}

/// Reads one CIFAR-10 binary batch file (3073-byte records).
pub fn read_cifar10_batch(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::format(
            path,
            (whole * CIFAR_RECORD) as u64,
            format!(
                "truncated record: {} trailing bytes, expected {CIFAR_RECORD}",
                bytes.len() - whole * CIFAR_RECORD
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::format(
                path,
                (i * CIFAR_RECORD) as u64,
                format!("label byte {label} > 9"),
            ));
        }
        labels.push(label as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_batches(dir: &Path, names: &[String], split: Split, class_names: &[String]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in names {
        let (p, l) = read_cifar10_batch(&dir.join(name))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, class_names.to_vec(), split)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`. Class names
/// come from `batches.meta.txt` when present.
pub fn ingest_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let meta = dir.join("batches.meta.txt");
    let class_names: Vec<String> = match fs::read_to_string(&meta) {
        Ok(text) => {
            let names: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if names.len() != 10 {
                return Err(Error::format(
                    &meta,
                    0,
                    format!("expected 10 class names, found {}", names.len()),
                ));
            }
            names
        }
        Err(_) => CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
    };
    let train_files: Vec<String> = (1..=5).map(|i| format!("data_batch_{i}.bin")).collect();
    let train = load_batches(dir, &train_files, Split::Train, &class_names)?;
    let test = load_batches(dir, &["test_batch.bin".to_string()], Split::Test, &class_names)?;
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    class_names: Vec<String>,
    split: Split,
}

impl Dataset {
    /// The first `n` examples of each class, in dataset order.
    pub fn take_per_class(&self, n: usize) -> Dataset {
        let mut seen = vec![0usize; self.num_classes()];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels()[i]];
                *c += 1;
                *c <= n
            })
            .collect();
        self.subset(&keep)
    }

    /// Writes `images.vrpm`, `labels.vrpm`, and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_matrix(dir.join("images.vrpm"), &Matrix::F32(self.images().clone()))?;
        save_matrix(dir.join("labels.vrpm"), &Matrix::labels(self.labels())?)?;
        let meta = DatasetMeta { class_names: self.class_names().to_vec(), split: self.split() };
        write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let images = load_matrix(dir.join("images.vrpm"))?.into_f32()?;
        let labels = load_matrix(dir.join("labels.vrpm"))?.into_labels()?;
        let meta_path = dir.join("meta.json");
        let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_slice(&text)?;
        Dataset::new(images, labels, meta.class_names, meta.split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            classes: 10,
            per_class: 100,
            height: 8,
            width: 8,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn synth_is_balanced_and_in_range() {
        let ds = synth_dataset(&small_spec(), Split::Train).unwrap();
        assert_eq!(ds.len(), 1000);
        for k in 0..10 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == k).count(), 100);
        }
        assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synth_is_deterministic_and_splits_differ() {
        let a = synth_dataset(&small_spec(), Split::Train).unwrap();
        let b = synth_dataset(&small_spec(), Split::Train).unwrap();
        let t = synth_dataset(&small_spec(), Split::Test).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images(), t.images());
    }

    #[test]
    fn synth_rejects_single_class() {
        let spec = SynthSpec {
            classes: 1,
            ..small_spec()
        };
        assert!(synth_dataset(&spec, Split::Train).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_range_pixels() {
        let images = Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap();
        assert!(Dataset::new(images, vec![0], vec!["a".into(), "b".into()], Split::Test).is_err());
    }
}
