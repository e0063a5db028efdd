//! The feedforward CNN classifier: architecture, training, prediction, and
//! penultimate-layer extraction.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix_file::{load_matrix, save_matrix, write_atomic, Matrix};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Evaluation batch size. Outputs do not depend on it: every layer acts on
/// examples independently.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    GlobalAvgPool,
    Affine {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Shape of one input example, e.g. `[C, H, W]` or `[D]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv(C→16, 3×3, pad 1) → conv(16→32, 3×3, stride 2) → conv(32→32,
    /// 3×3, stride 2), each followed by ReLU, then global average pooling
    /// (width 32) and a linear head.
    pub fn desk(image_shape: [usize; 3], classes: usize) -> Self {
        let conv = |i, o, stride, pad| LayerSpec::Conv {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            pad,
        };
        Architecture {
            input_shape: image_shape.to_vec(),
            layers: vec![
                conv(image_shape[0], 16, 1, 1),
                LayerSpec::Relu,
                conv(16, 32, 2, 0),
                LayerSpec::Relu,
                conv(32, 32, 2, 0),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Affine {
                    inputs: 32,
                    outputs: classes,
                },
            ],
        }
    }

    /// Checks shape flow and returns (penultimate width, class count).
    pub fn validate(&self) -> Result<(usize, usize)> {
        let mut shape = self.input_shape.clone();
        let Some(LayerSpec::Affine { inputs, outputs }) = self.layers.last() else {
            return Err(Error::Input("last layer must be affine".into()));
        };
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(Error::Dimension(format!(
                            "layer {i}: conv expects {in_channels} channels, input is {shape:?}"
                        )));
                    }
                    let oh = crate::autodiff::ops::conv_out_extent(shape[1], kernel, stride, pad);
                    let ow = crate::autodiff::ops::conv_out_extent(shape[2], kernel, stride, pad);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => vec![out_channels, oh, ow],
                        _ => {
                            return Err(Error::Dimension(format!(
                                "layer {i}: kernel {kernel} does not fit {shape:?}"
                            )))
                        }
                    }
                }
                LayerSpec::Relu => shape,
                LayerSpec::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(Error::Dimension(format!("layer {i}: pooling needs [C,H,W], got {shape:?}")));
                    }
                    vec![shape[0]]
                }
                LayerSpec::Affine { inputs, outputs } => {
                    let width: usize = shape.iter().product();
                    if width != inputs {
                        return Err(Error::Dimension(format!(
                            "layer {i}: affine expects width {inputs}, input is {shape:?}"
                        )));
                    }
                    vec![outputs]
                }
            };
        }
        Ok((*inputs, *outputs))
    }
}

/// A trained (or freshly initialized) classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    arch: Architecture,
    params: Vec<Tensor<f32>>,
    penultimate_width: usize,
    num_classes: usize,
}

/// Nodes produced by one forward pass on a tape.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub input: Var,
    pub params: Vec<Var>,
    pub penultimate: Var,
    pub logits: Var,
}

impl Classifier {
    /// He-initialized weights, zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let (penultimate_width, num_classes) = arch.validate()?;
        let last = arch.layers.len() - 1;
        let mut params = Vec::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let n = out_channels * fan_in;
                    let data = (0..n).map(|_| (rng.gaussian() * std) as f32).collect();
                    params.push(Tensor::new(vec![out_channels, in_channels, kernel, kernel], data)?);
                }
                LayerSpec::Affine { inputs, outputs } => {
                    let gain = if i == last { 1.0 } else { 2.0 };
                    let std = (gain / inputs as f64).sqrt();
                    let data = (0..inputs * outputs).map(|_| (rng.gaussian() * std) as f32).collect();
                    params.push(Tensor::new(vec![inputs, outputs], data)?);
                    params.push(Tensor::zeros(vec![outputs]));
                }
                LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
            }
        }
        Ok(Classifier {
            arch,
            params,
            penultimate_width,
            num_classes,
        })
    }

    pub fn from_parts(arch: Architecture, params: Vec<Tensor<f32>>) -> Result<Self> {
        let mut rng = Rng::new(0);
        let template = Classifier::init(arch, &mut rng)?;
        if template.params.len() != params.len()
            || template.params.iter().zip(&params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Dimension("parameter shapes do not match the architecture".into()));
        }
        Ok(Classifier { params, ..template })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn penultimate_width(&self) -> usize {
        self.penultimate_width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        if x.rank() == 0 || x.shape()[1..] != self.arch.input_shape[..] {
            return Err(Error::Dimension(format!(
                "model expects examples of shape {:?}, got batch {:?}",
                self.arch.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Records a forward pass with the input and parameters as fresh leaves.
    pub fn forward(&self, tape: &mut Tape<f32>, x: Tensor<f32>) -> Result<ForwardVars> {
        self.forward_impl(tape, x, true)
    }

    /// Forward pass with the parameters recorded as constants, for input
    /// gradients only.
    pub fn forward_frozen(&self, tape: &mut Tape<f32>, x: Tensor<f32>) -> Result<ForwardVars> {
        self.forward_impl(tape, x, false)
    }

    fn forward_impl(&self, tape: &mut Tape<f32>, x: Tensor<f32>, trainable: bool) -> Result<ForwardVars> {
        self.check_input(&x)?;
        let input = tape.leaf(x);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let mut h = input;
        let mut penultimate = input;
        let mut next_param = 0;
        for layer in &self.arch.layers {
            h = match *layer {
                LayerSpec::Conv { stride, pad, .. } => {
                    let k = params[next_param];
                    next_param += 1;
                    tape.conv2d(h, k, stride, pad)?
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(h)?,
                LayerSpec::Affine { .. } => {
                    penultimate = h;
                    let (w, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    tape.affine(h, w, b)?
                }
            };
        }
        Ok(ForwardVars {
            input,
            params,
            penultimate,
            logits: h,
        })
    }

    fn eval_chunks<F>(&self, images: &Tensor<f32>, pick: F) -> Result<Vec<Tensor<f32>>>
    where
        F: Fn(&Tape<f32>, &ForwardVars) -> Tensor<f32> + Sync,
    {
        self.check_input(images)?;
        let n = images.rows();
        let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
        starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(n)).collect();
                let mut tape = Tape::new();
                let fv = self.forward_frozen(&mut tape, images.select_rows(&idx))?;
                Ok(pick(&tape, &fv))
            })
            .collect()
    }

    fn concat(parts: Vec<Tensor<f32>>, width: usize) -> Tensor<f32> {
        let n: usize = parts.iter().map(Tensor::rows).sum();
        let mut data = Vec::with_capacity(n * width);
        for p in parts {
            data.extend(p.into_data());
        }
        Tensor::new(vec![n, width], data).expect("concatenated rows")
    }

    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let parts = self.eval_chunks(images, |t, fv| t.value(fv.logits).clone())?;
        Ok(Self::concat(parts, self.num_classes))
    }

    /// Predicted labels (argmax, ties to the lower class id) and logits.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<(Vec<usize>, Tensor<f32>)> {
        let logits = self.logits(images)?;
        let labels = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
        Ok((labels, logits))
    }

    /// Activations feeding the final affine layer, `[n, D]`.
    pub fn penultimate(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let parts = self.eval_chunks(images, |t, fv| {
            let v = t.value(fv.penultimate);
            let n = v.rows();
            v.clone().reshape(vec![n, v.row_len()]).expect("flatten")
        })?;
        Ok(Self::concat(parts, self.penultimate_width))
    }
}

impl Classifier {
    /// Writes `model.json` (the architecture) and one `param_<i>.vrpm` per
    /// parameter tensor into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, p) in self.params.iter().enumerate() {
            save_matrix(dir.join(format!("param_{i}.vrpm")), &Matrix::F32(p.clone()))?;
        }
        write_atomic(&dir.join("model.json"), &serde_json::to_vec_pretty(&self.arch)?)
    }

    pub fn load(dir: &Path) -> Result<Classifier> {
        let path = dir.join("model.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let arch: Architecture = serde_json::from_slice(&text)?;
        let count = Classifier::init(arch.clone(), &mut Rng::new(0))?.params.len();
        let params = (0..count)
            .map(|i| load_matrix(dir.join(format!("param_{i}.vrpm")))?.into_f32())
            .collect::<Result<Vec<_>>>()?;
        Classifier::from_parts(arch, params)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub flip_prob: f64,
    /// Zero padding per edge before random cropping; 0 disables cropping.
    pub crop_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            flip_prob: 0.5,
            crop_pad: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Input("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Input(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's (augmented) minibatches.
    pub loss: f32,
    pub accuracy: f32,
}

/// Copies one `[C,H,W]` image with optional horizontal flip and a crop at
/// `(dy, dx)` from the zero-padded image.
fn augment_into(src: &[f32], dst: &mut Vec<f32>, shape: [usize; 3], flip: bool, pad: usize, dy: usize, dx: usize) {
    let [c, h, w] = shape;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // Position in the padded image, mapped back to the source.
                let py = y + dy;
                let px = x + dx;
                let v = if py < pad || px < pad || py - pad >= h || px - pad >= w {
                    0.0
                } else {
                    let sy = py - pad;
                    let sx = if flip { w - 1 - (px - pad) } else { px - pad };
                    src[(ch * h + sy) * w + sx]
                };
                dst.push(v);
            }
        }
    }
}

/// Minibatch Adam training on softmax cross-entropy with flip/crop
/// augmentation. Shuffling and augmentation draw from one seeded stream.
pub fn train(arch: Architecture, data: &Dataset, cfg: &TrainConfig) -> Result<(Classifier, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut model = Classifier::init(arch, &mut rng)?;
    model.check_input(data.images())?;
    let image_shape = data.image_shape();
    let augmentable = model.arch.input_shape.len() == 3;
    let mut adam = AdamState::new(model.params.iter(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * data.images().row_len());
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            for &i in batch {
                let src = data.images().row(i);
                if augmentable {
                    let flip = rng.bernoulli(cfg.flip_prob);
                    let (dy, dx) = if cfg.crop_pad > 0 {
                        (rng.below(2 * cfg.crop_pad + 1), rng.below(2 * cfg.crop_pad + 1))
                    } else {
                        (0, 0)
                    };
                    augment_into(src, &mut x, image_shape, flip, cfg.crop_pad, dy, dx);
                } else {
                    x.extend_from_slice(src);
                }
            }
            let mut shape = vec![batch.len()];
            shape.extend_from_slice(&model.arch.input_shape);
            let mut tape = Tape::new();
            let fv = model.forward(&mut tape, Tensor::new(shape, x)?)?;
            let loss = tape.softmax_cross_entropy(fv.logits, &labels)?;
            let logits = tape.value(fv.logits);
            correct += (0..batch.len()).filter(|&r| argmax(logits.row(r)) == labels[r]).count();
            loss_sum += tape.value(loss).data()[0] as f64 * batch.len() as f64;

            let mut grads = tape.backward(loss)?;
            let gs: Vec<Tensor<f32>> = fv
                .params
                .iter()
                .map(|&v| grads.take(v).expect("every parameter reaches the loss"))
                .collect();
            let grefs: Vec<&Tensor<f32>> = gs.iter().collect();
            let mut prefs: Vec<&mut Tensor<f32>> = model.params.iter_mut().collect();
            adam.step(&mut prefs, &grefs)?;
        }
        history.push(EpochStats {
            epoch,
            loss: (loss_sum / data.len() as f64) as f32,
            accuracy: correct as f32 / data.len() as f32,
        });
    }
    Ok((model, history))
}

/// Examples the model classifies correctly, original order preserved.
pub fn filter_correct(model: &Classifier, data: &Dataset) -> Result<Dataset> {
    let (pred, _) = model.predict(data.images())?;
    let keep: Vec<usize> = pred
        .iter()
        .zip(data.labels())
        .enumerate()
        .filter(|(_, (p, y))| p == y)
        .map(|(i, _)| i)
        .collect();
    Ok(data.subset(&keep))
}

/// Fraction of examples classified correctly.
pub fn accuracy(model: &Classifier, data: &Dataset) -> Result<f64> {
    let (pred, _) = model.predict(data.images())?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split, SynthSpec};

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn desk_architecture_shapes() {
        let arch = Architecture::desk([3, 16, 16], 10);
        assert_eq!(arch.validate().unwrap(), (32, 10));
        let bad = Architecture {
            input_shape: vec![3, 16, 16],
            layers: vec![LayerSpec::Relu],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn augmentation_flip_and_shift() {
        // 1 channel, 2x3 image.
        let src = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = Vec::new();
        augment_into(&src, &mut out, [1, 2, 3], true, 0, 0, 0);
        assert_eq!(out, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        out.clear();
        augment_into(&src, &mut out, [1, 2, 3], false, 1, 0, 0);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
        out.clear();
        augment_into(&src, &mut out, [1, 2, 3], false, 1, 1, 1);
        assert_eq!(out, src.to_vec());
    }

    #[test]
    fn predict_and_penultimate_compose() {
        let spec = SynthSpec {
            per_class: 3,
            height: 8,
            width: 8,
            ..SynthSpec::default()
        };
        let ds = synth_dataset(&spec, Split::Test).unwrap();
        let mut rng = Rng::new(3);
        let model = Classifier::init(Architecture::desk([3, 8, 8], 10), &mut rng).unwrap();
        let (pred, logits) = model.predict(ds.images()).unwrap();
        let (pred2, logits2) = model.predict(ds.images()).unwrap();
        assert_eq!(pred, pred2);
        assert_eq!(logits, logits2);

        let pen = model.penultimate(ds.images()).unwrap();
        assert_eq!(pen.shape(), &[ds.len(), model.penultimate_width()]);
        let n = model.params().len();
        let mut tape = Tape::new();
        let p = tape.leaf(pen.clone());
        let w = tape.leaf(model.params()[n - 2].clone());
        let b = tape.leaf(model.params()[n - 1].clone());
        let z = tape.affine(p, w, b).unwrap();
        for (a, b) in tape.value(z).data().iter().zip(logits.data()) {
            assert!((a - b).abs() <= 1e-6);
        }

        let mut tweaked = model.clone();
        for v in tweaked.params_mut()[n - 2].data_mut() {
            *v += 0.5;
        }
        assert_eq!(tweaked.penultimate(ds.images()).unwrap(), pen);
    }

    #[test]
    fn shape_mismatch_on_predict() {
        let mut rng = Rng::new(0);
        let model = Classifier::init(Architecture::desk([3, 8, 8], 10), &mut rng).unwrap();
        assert!(model.predict(&Tensor::zeros(vec![2, 3, 9, 8])).is_err());
    }
}
