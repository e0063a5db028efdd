//! Finite-difference gradient checking over a fixed catalogue of tape
//! graphs.

use popviz::autodiff::{Tape, Var};
use popviz::{Rng, Scalar, Tensor};

pub type Build<T> = dyn Fn(&mut Tape<T>, &[Var]) -> Var;

pub fn random<T: Scalar>(rng: &mut Rng, shape: &[usize], offset: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let g = rng.gaussian();
            T::from_f64(g + offset * g.signum())
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn evaluate<T: Scalar>(inputs: &[Tensor<T>], build: &Build<T>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).data()[0].as_f64()
}

/// Largest norm-wise relative error between analytic and numerical
/// gradients over all inputs.
pub fn max_rel_error<T: Scalar>(inputs: &[Tensor<T>], build: &Build<T>, h: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf gradient");
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = inputs[k].data()[j].as_f64();
            plus[k].data_mut()[j] = T::from_f64(x + h);
            minus[k].data_mut()[j] = T::from_f64(x - h);
            let step = plus[k].data()[j].as_f64() - minus[k].data()[j].as_f64();
            let numeric = (evaluate(&plus, build) - evaluate(&minus, build)) / step;
            let a = analytic.data()[j].as_f64();
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

/// Reduces any node to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn project<T: Scalar>(tape: &mut Tape<T>, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let coeffs = random::<T>(&mut Rng::new(seed), &shape, 0.0);
    tape.dot_const(x, coeffs).unwrap()
}

pub struct Case<T: Scalar> {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Scale of the random inputs; the composite nets need small weights
    /// to keep the softmax away from saturation.
    pub gain: f64,
    pub build: Box<Build<T>>,
}

pub fn cases<T: Scalar>() -> Vec<Case<T>> {
    let mut v: Vec<Case<T>> = Vec::new();
    v.push(Case {
        name: "affine",
        shapes: vec![vec![3, 4], vec![4, 5], vec![5]],
        gain: 1.0,
        build: Box::new(|t, x| {
            let y = t.affine(x[0], x[1], x[2]).unwrap();
            project(t, y, 1)
        }),
    });
    v.push(Case {
        name: "affine on image input",
        shapes: vec![vec![2, 2, 2, 2], vec![8, 3], vec![3]],
        gain: 1.0,
        build: Box::new(|t, x| {
            let y = t.affine(x[0], x[1], x[2]).unwrap();
            project(t, y, 2)
        }),
    });
    v.push(Case {
        name: "relu",
        shapes: vec![vec![4, 6]],
        gain: 1.0,
        build: Box::new(|t, x| {
            let y = t.relu(x[0]);
            project(t, y, 3)
        }),
    });
    for (i, &(stride, pad)) in [(1, 0), (1, 1), (2, 0), (2, 1)].iter().enumerate() {
        v.push(Case {
            name: "conv2d",
            shapes: vec![vec![1, 2, 5, 4], vec![3, 2, 3, 3]],
            gain: 1.0,
            build: Box::new(move |t, x| {
                let y = t.conv2d(x[0], x[1], stride, pad).unwrap();
                project(t, y, 10 + i as u64)
            }),
        });
    }
    v.push(Case {
        name: "conv2d 1x1",
        shapes: vec![vec![1, 2, 3, 3], vec![3, 2, 1, 1]],
        gain: 1.0,
        build: Box::new(|t, x| {
            let y = t.conv2d(x[0], x[1], 1, 0).unwrap();
            project(t, y, 20)
        }),
    });
    v.push(Case {
        name: "global average pool",
        shapes: vec![vec![2, 3, 4, 4]],
        gain: 1.0,
        build: Box::new(|t, x| {
            let y = t.global_avg_pool(x[0]).unwrap();
            project(t, y, 4)
        }),
    });
    v.push(Case {
        name: "softmax cross-entropy",
        shapes: vec![vec![5, 4]],
        gain: 1.0,
        build: Box::new(|t, x| t.softmax_cross_entropy(x[0], &[0, 3, 1, 1, 2]).unwrap()),
    });
    v.push(Case {
        name: "sum and scale",
        shapes: vec![vec![3, 3]],
        gain: 1.0,
        build: Box::new(|t, x| {
            let r = t.relu(x[0]);
            let s = t.scale(r, T::from_f64(-1.7));
            t.sum(s)
        }),
    });
    v.push(Case {
        name: "reused node",
        shapes: vec![vec![2, 3], vec![3, 3], vec![3]],
        gain: 1.0,
        build: Box::new(|t, x| {
            let h = t.affine(x[0], x[1], x[2]).unwrap();
            let g = t.affine(h, x[1], x[2]).unwrap();
            project(t, g, 5)
        }),
    });
    v.push(Case {
        name: "mlp",
        shapes: vec![vec![2, 5], vec![5, 7], vec![7], vec![7, 3], vec![3]],
        gain: 0.5,
        build: Box::new(|t, x| {
            let h = t.affine(x[0], x[1], x[2]).unwrap();
            let h = t.relu(h);
            let o = t.affine(h, x[3], x[4]).unwrap();
            t.softmax_cross_entropy(o, &[0, 2]).unwrap()
        }),
    });
    v.push(Case {
        name: "cnn",
        shapes: vec![
            vec![2, 2, 5, 5],
            vec![3, 2, 3, 3],
            vec![4, 3, 3, 3],
            vec![4, 3],
            vec![3],
        ],
        gain: 0.7,
        build: Box::new(|t, x| {
            let h = t.conv2d(x[0], x[1], 1, 1).unwrap();
            let h = t.relu(h);
            let h = t.conv2d(h, x[2], 2, 0).unwrap();
            let h = t.relu(h);
            let p = t.global_avg_pool(h).unwrap();
            let o = t.affine(p, x[3], x[4]).unwrap();
            t.softmax_cross_entropy(o, &[2, 0]).unwrap()
        }),
    });
    v
}

/// Draws inputs whose f32-sized stencil does not straddle a ReLU kink:
/// the f64 difference quotient at h = 1e-3 must already agree with the
/// analytic gradient.
pub fn kink_free_inputs(case: &Case<f64>, seed: u64) -> Vec<Tensor<f64>> {
    let root = Rng::new(seed);
    for attempt in 0..100 {
        let mut rng = root.substream(attempt);
        let inputs: Vec<Tensor<f64>> =
            case.shapes.iter().map(|s| random(&mut rng, s, 0.1).map(|v| v * case.gain)).collect();
        if max_rel_error(&inputs, &*case.build, 1e-3) < 1e-5 {
            return inputs;
        }
    }
    panic!("{}: no kink-free draw", case.name);
}

pub fn check<T: Scalar>(h: f64, tol: f64, seeds: &[u64]) -> usize {
    let mut checked = 0;
    for seed in seeds {
        for (case, reference) in cases::<T>().into_iter().zip(cases::<f64>()) {
            let inputs: Vec<Tensor<T>> =
                kink_free_inputs(&reference, *seed).iter().map(|t| t.cast()).collect();
            let err = max_rel_error(&inputs, &*case.build, h);
            assert!(err < tol, "{} (seed {seed}): relative error {err:e}", case.name);
            checked += 1;
        }
    }
    checked
}

/// f32 difference quotients sit near the roundoff floor at h = 1e-3, so the
/// f32 backward pass is also compared with quotients of the f64 forward
/// pass. Returns the number of instances checked.
pub fn check_f32_against_f64(seeds: std::ops::RangeInclusive<u64>) -> usize {
    let mut checked = 0;
    for seed in seeds {
        for (case, reference) in cases::<f32>().into_iter().zip(cases::<f64>()) {
            let inputs = kink_free_inputs(&reference, seed);
            let mut tape = Tape::<f32>::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast())).collect();
            let out = (case.build)(&mut tape, &vars);
            let grads = tape.backward(out).unwrap();
            for (k, v) in vars.iter().enumerate() {
                let analytic = grads.get(*v).unwrap();
                let (mut diff, mut norm) = (0.0f64, 0.0f64);
                for j in 0..inputs[k].len() {
                    let mut plus = inputs.clone();
                    let mut minus = inputs.clone();
                    plus[k].data_mut()[j] += 1e-3;
                    minus[k].data_mut()[j] -= 1e-3;
                    let numeric = (evaluate(&plus, &*reference.build)
                        - evaluate(&minus, &*reference.build))
                        / 2e-3;
                    diff += (analytic.data()[j] as f64 - numeric).powi(2);
                    norm += numeric * numeric;
                }
                let err = diff.sqrt() / norm.sqrt().max(1e-12);
                assert!(err < 1e-3, "{} (seed {seed}, input {k}): {err:e}", case.name);
            }
            checked += 1;
        }
    }
    checked
}
