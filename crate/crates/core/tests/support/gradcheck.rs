//! Central-difference gradient oracle, shared by the core tests and the
//! acceptance harness.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refeednet::micronet::{Architecture, Layer, LayerKind, LayerSpec, Model, Params, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const LAYER_CASES: [&str; 7] = [
    "conv2d",
    "conv2d_strided",
    "relu",
    "max_pool2d",
    "flatten",
    "dense",
    "softmax",
];

#[derive(Debug, Clone, Copy)]
pub struct Check {
    pub input_err: f64,
    pub param_err: Option<f64>,
}

impl Check {
    pub fn worst(&self) -> f64 {
        self.input_err.max(self.param_err.unwrap_or(0.0))
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / (|a| + |n|)`, falling back to the absolute difference when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied()) + norm(numeric.iter().copied());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Values bounded away from zero so a small step never crosses the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Pairwise-distinct values, spaced far wider than the step, so pooling never ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.01 - 0.5)
}

fn build(case: &str, rng: &mut ChaCha8Rng) -> (Layer<f64>, Tensor<f64>) {
    let (spec, shape) = match case {
        "conv2d" => (LayerSpec::conv(3, 3, 1, 1), vec![5, 5, 2]),
        "conv2d_strided" => (LayerSpec::conv(2, 3, 2, 0), vec![7, 7, 2]),
        "relu" => (LayerSpec::relu(), vec![4, 4, 2]),
        "max_pool2d" => (LayerSpec::max_pool(2, 2), vec![4, 6, 2]),
        "flatten" => (LayerSpec::flatten(), vec![3, 3, 2]),
        "dense" => (LayerSpec::dense(4), vec![6]),
        "softmax" => (LayerSpec::softmax(), vec![5]),
        other => panic!("unknown case {other}"),
    };
    let params = spec.kind.param_shapes(&shape).map(|(w, b)| Params {
        weight: uniform(rng, &w, 0.5),
        bias: uniform(rng, &b, 0.5),
    });
    let input = match case {
        "relu" => away_from_zero(rng, &shape),
        "max_pool2d" => distinct(rng, &shape),
        "softmax" => uniform(rng, &shape, 2.0),
        _ => uniform(rng, &shape, 1.0),
    };
    (Layer::new(spec, &shape, params).unwrap(), input)
}

/// Scalar probe `L = sum(c * layer(x))` with random weights `c`.
fn probe(layer: &Layer<f64>, x: &Tensor<f64>, c: &Tensor<f64>) -> f64 {
    let y = layer.forward(x).unwrap();
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn central<F: FnMut(f64) -> f64>(mut f: F, at: f64) -> f64 {
    (f(at + STEP) - f(at - STEP)) / (2.0 * STEP)
}

pub fn check_layer(case: &str, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut layer, x) = build(case, &mut rng);
    let y = layer.forward(&x).unwrap();
    let c = uniform(&mut rng, y.shape(), 1.0);
    let (grad_in, grad_params) = layer.backward(&x, &y, &c);

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        numeric.push(central(
            |v| {
                xp.data_mut()[i] = v;
                probe(&layer, &xp, &c)
            },
            x.data()[i],
        ));
    }
    let input_err = rel_error(grad_in.data(), &numeric);

    let param_err = grad_params.map(|gp| {
        let analytic: Vec<f64> = gp.values().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for which in 0..2 {
            let n = {
                let p = layer.params.as_ref().unwrap();
                if which == 0 { p.weight.len() } else { p.bias.len() }
            };
            for i in 0..n {
                let at = {
                    let p = layer.params.as_ref().unwrap();
                    if which == 0 { p.weight.data()[i] } else { p.bias.data()[i] }
                };
                numeric.push(central(
                    |v| {
                        let p = layer.params.as_mut().unwrap();
                        let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                        t.data_mut()[i] = v;
                        probe(&layer, &x, &c)
                    },
                    at,
                ));
                let p = layer.params.as_mut().unwrap();
                let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                t.data_mut()[i] = at;
            }
        }
        rel_error(&analytic, &numeric)
    });
    Check { input_err, param_err }
}

/// Small end-to-end network: every layer kind, two stages, softmax over four classes.
pub fn tiny_architecture() -> Architecture {
    Architecture {
        input_shape: vec![6, 6, 1],
        layers: vec![
            LayerSpec::conv(2, 3, 1, 1),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(3, 2, 1, 0),
            LayerSpec::flatten(),
            LayerSpec::dense(4),
            LayerSpec::softmax(),
        ],
        base_boundary: 5,
    }
}

const KINK_MARGIN: f64 = 1e-3;

/// True when a relu input sits near zero or a pooling window's leader is nearly tied.
fn near_kink(model: &Model<f64>, x: &Tensor<f64>) -> bool {
    let mut a = x.clone();
    for layer in model.layers() {
        match layer.spec.kind {
            LayerKind::Relu => {
                if a.data().iter().any(|v| v.abs() < KINK_MARGIN) {
                    return true;
                }
            }
            LayerKind::MaxPool2d { window, stride } => {
                let [h, w, c] = a.shape()[..] else { unreachable!() };
                for oy in 0..(h - window) / stride + 1 {
                    for ox in 0..(w - window) / stride + 1 {
                        for ch in 0..c {
                            let mut vals: Vec<f64> = (0..window * window)
                                .map(|k| {
                                    let (dy, dx) = (k / window, k % window);
                                    a.data()[((oy * stride + dy) * w + ox * stride + dx) * c + ch]
                                })
                                .collect();
                            vals.sort_by(|p, q| q.total_cmp(p));
                            if vals[0] > 0.0 && vals[0] - vals[1] < KINK_MARGIN {
                                return true;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        a = layer.forward(&a).unwrap();
    }
    false
}

/// Mean cross-entropy gradient of the full model against differences of the loss.
pub fn check_model(seed: u64) -> Check {
    let arch = tiny_architecture();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::new(&arch, seed).unwrap();
    let batch: Vec<(Tensor<f64>, usize)> = (0..3)
        .map(|i| loop {
            let x = uniform(&mut rng, &arch.input_shape, 1.0);
            if !near_kink(&model, &x) {
                break (x, i % 4);
            }
        })
        .collect();
    let (_, grads) = model.loss_and_gradients(&batch).unwrap();
    let analytic: Vec<f64> = grads.iter().flatten().flat_map(|p| p.values()).collect();

    let values = model.param_values();
    assert_eq!(analytic.len(), values.len());
    let mut probe = values.clone();
    let mut numeric = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        numeric.push(central(
            |v| {
                probe[i] = v;
                let m = Model::from_parts(&arch, seed, &probe).unwrap();
                m.loss_and_gradients(&batch).unwrap().0
            },
            values[i],
        ));
        probe[i] = values[i];
    }
    Check {
        input_err: 0.0,
        param_err: Some(rel_error(&analytic, &numeric)),
    }
}
