use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Layer type and its hyper-parameters. Activations use the `[height, width, channels]` layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_features: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub frozen: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            frozen: false,
        }
    }

    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(LayerKind::Conv2d {
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        })
    }

    pub fn max_pool(window: usize, stride: usize) -> Self {
        Self::new(LayerKind::MaxPool2d { window, stride })
    }

    pub fn dense(out_features: usize) -> Self {
        Self::new(LayerKind::Dense { out_features })
    }

    pub fn relu() -> Self {
        Self::new(LayerKind::Relu)
    }

    pub fn flatten() -> Self {
        Self::new(LayerKind::Flatten)
    }

    pub fn softmax() -> Self {
        Self::new(LayerKind::Softmax)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Architecture(format!("{msg}: {self:?}")));
        match self.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } => {
                if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                    return bad("conv dimensions and stride must be >= 1");
                }
            }
            LayerKind::MaxPool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    return bad("pool window and stride must be >= 1");
                }
            }
            LayerKind::Dense { out_features } => {
                if out_features == 0 {
                    return bad("dense layer needs at least one output");
                }
            }
            LayerKind::Relu | LayerKind::Flatten | LayerKind::Softmax => {}
        }
        if self.frozen && !self.kind.has_params() {
            return bad("only conv and dense layers can be frozen");
        }
        Ok(())
    }
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| {
            Err(Error::Architecture(format!(
                "{what} cannot accept input shape {input:?}"
            )))
        };
        match *self {
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let [h, w, _] = input else {
                    return mismatch("conv2d");
                };
                if h + 2 * padding < kernel_h || w + 2 * padding < kernel_w {
                    return mismatch("conv2d");
                }
                Ok(vec![
                    (h + 2 * padding - kernel_h) / stride + 1,
                    (w + 2 * padding - kernel_w) / stride + 1,
                    out_channels,
                ])
            }
            LayerKind::MaxPool2d { window, stride } => {
                let [h, w, c] = input else {
                    return mismatch("max_pool2d");
                };
                if *h < window || *w < window {
                    return mismatch("max_pool2d");
                }
                Ok(vec![(h - window) / stride + 1, (w - window) / stride + 1, *c])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Dense { out_features } => match input {
                [_] => Ok(vec![out_features]),
                _ => mismatch("dense"),
            },
            LayerKind::Softmax => match input {
                [_] => Ok(input.to_vec()),
                _ => mismatch("softmax"),
            },
        }
    }

    /// Shapes of (weight, bias) for a given input shape, if the layer has parameters.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some((
                vec![kernel_h, kernel_w, input[2], out_channels],
                vec![out_channels],
            )),
            LayerKind::Dense { out_features } => {
                Some((vec![input[0], out_features], vec![out_features]))
            }
            _ => None,
        }
    }
}

/// Weight and bias of a parameterized layer. Also used to carry their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.weight.data().iter().chain(self.bias.data()).copied()
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.weight
            .data_mut()
            .iter_mut()
            .chain(self.bias.data_mut().iter_mut())
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
pub(crate) fn glorot_params<T: Scalar, R: Rng>(
    kind: &LayerKind,
    input: &[usize],
    rng: &mut R,
) -> Option<Params<T>> {
    let (wshape, bshape) = kind.param_shapes(input)?;
    let (fan_in, fan_out) = match *kind {
        LayerKind::Conv2d {
            kernel_h, kernel_w, ..
        } => {
            let area = kernel_h * kernel_w;
            (area * wshape[2], area * wshape[3])
        }
        _ => (wshape[0], wshape[1]),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let weight = Tensor::from_fn(&wshape, |_| T::lit(rng.random_range(-limit..limit)));
    Some(Params {
        weight,
        bias: Tensor::zeros(&bshape),
    })
}

/// One layer of a model together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub params: Option<Params<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(spec: LayerSpec, input_shape: &[usize], params: Option<Params<T>>) -> Result<Self> {
        spec.validate()?;
        let output_shape = spec.kind.output_shape(input_shape)?;
        match (spec.kind.param_shapes(input_shape), &params) {
            (None, None) => {}
            (Some((w, b)), Some(p)) if p.weight.shape() == w && p.bias.shape() == b => {}
            _ => {
                return Err(Error::Architecture(format!(
                    "parameters do not fit {:?} with input {input_shape:?}",
                    spec.kind
                )))
            }
        }
        Ok(Self {
            spec,
            input_shape: input_shape.to_vec(),
            output_shape,
            params,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.spec.frozen
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::InputShape {
                expected: self.input_shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        let out = match self.spec.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => conv_forward(input, self.params(), &self.output_shape, stride, padding),
            LayerKind::Relu => Tensor::from_fn(input.shape(), |i| {
                let x = input.data()[i];
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }),
            LayerKind::MaxPool2d { window, stride } => {
                pool_forward(input, &self.output_shape, window, stride)
            }
            LayerKind::Flatten => input.clone().reshape(&self.output_shape)?,
            LayerKind::Dense { .. } => dense_forward(input, self.params()),
            LayerKind::Softmax => softmax(input),
        };
        Ok(out)
    }

    /// Back-propagates `grad_output` through the layer.
    ///
    /// `input` and `output` must be the tensors seen and produced by [`Layer::forward`].
    /// Returns the gradient with respect to the input and, for parameterized
    /// layers, the parameter gradients.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> (Tensor<T>, Option<Params<T>>) {
        debug_assert_eq!(grad_output.shape(), self.output_shape.as_slice());
        match self.spec.kind {
            LayerKind::Conv2d {
                stride, padding, ..
            } => {
                let (gi, gp) = conv_backward(input, self.params(), grad_output, stride, padding);
                (gi, Some(gp))
            }
            LayerKind::Relu => {
                let g = Tensor::from_fn(input.shape(), |i| {
                    if input.data()[i] > T::zero() {
                        grad_output.data()[i]
                    } else {
                        T::zero()
                    }
                });
                (g, None)
            }
            LayerKind::MaxPool2d { window, stride } => {
                (pool_backward(input, grad_output, window, stride), None)
            }
            LayerKind::Flatten => {
                let g = grad_output
                    .clone()
                    .reshape(input.shape())
                    .expect("flatten preserves element count");
                (g, None)
            }
            LayerKind::Dense { .. } => {
                let (gi, gp) = dense_backward(input, self.params(), grad_output);
                (gi, Some(gp))
            }
            LayerKind::Softmax => {
                // dx_j = p_j * (dy_j - sum_k dy_k p_k)
                let p = output.data();
                let dy = grad_output.data();
                let dot: T = p.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                (Tensor::from_fn(output.shape(), |j| p[j] * (dy[j] - dot)), None)
            }
        }
    }

    fn params(&self) -> &Params<T> {
        self.params
            .as_ref()
            .expect("parameterized layer always carries params")
    }
}

fn conv_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &Params<T>,
    out_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (
        params.weight.shape()[0],
        params.weight.shape()[1],
        params.weight.shape()[3],
    );
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let x = input.data();
    let wt = params.weight.data();
    let bias = params.bias.data();
    let mut out = vec![T::zero(); oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..][..cout];
            o.copy_from_slice(bias);
            for ky in 0..kh {
                let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = (ox * stride + kx).checked_sub(padding).filter(|&v| v < w)
                    else {
                        continue;
                    };
                    let xs = &x[(iy * w + ix) * cin..][..cin];
                    let ws = &wt[(ky * kw + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xs.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        for (ov, &wv) in o.iter_mut().zip(&ws[ci * cout..][..cout]) {
                            *ov = *ov + xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape.to_vec(), out).expect("conv output shape")
}

fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &Params<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Params<T>) {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (
        params.weight.shape()[0],
        params.weight.shape()[1],
        params.weight.shape()[3],
    );
    let (oh, ow) = (grad_out.shape()[0], grad_out.shape()[1]);
    let x = input.data();
    let wt = params.weight.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * cout..][..cout];
            for (b, &gv) in gb.iter_mut().zip(go) {
                *b = *b + gv;
            }
            for ky in 0..kh {
                let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = (ox * stride + kx).checked_sub(padding).filter(|&v| v < w)
                    else {
                        continue;
                    };
                    let base_x = (iy * w + ix) * cin;
                    let base_w = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[base_x + ci];
                        let ws = &wt[base_w + ci * cout..][..cout];
                        let gws = &mut gw[base_w + ci * cout..][..cout];
                        let mut acc = T::zero();
                        for co in 0..cout {
                            gws[co] = gws[co] + xv * go[co];
                            acc = acc + ws[co] * go[co];
                        }
                        gx[base_x + ci] = gx[base_x + ci] + acc;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(input.shape().to_vec(), gx).expect("conv grad input"),
        Params {
            weight: Tensor::from_vec(params.weight.shape().to_vec(), gw).expect("conv grad w"),
            bias: Tensor::from_vec(vec![cout], gb).expect("conv grad b"),
        },
    )
}

/// Flat index of the first maximum inside each pooling window.
fn pool_argmax<T: Scalar>(
    input: &Tensor<T>,
    oh: usize,
    ow: usize,
    window: usize,
    stride: usize,
) -> Vec<usize> {
    let (w, c) = (input.shape()[1], input.shape()[2]);
    let x = input.data();
    let mut idx = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = ((oy * stride) * w + ox * stride) * c + ch;
                for dy in 0..window {
                    for dx in 0..window {
                        let i = ((oy * stride + dy) * w + ox * stride + dx) * c + ch;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

fn pool_forward<T: Scalar>(
    input: &Tensor<T>,
    out_shape: &[usize],
    window: usize,
    stride: usize,
) -> Tensor<T> {
    let idx = pool_argmax(input, out_shape[0], out_shape[1], window, stride);
    let data = idx.into_iter().map(|i| input.data()[i]).collect();
    Tensor::from_vec(out_shape.to_vec(), data).expect("pool output shape")
}

fn pool_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Tensor<T> {
    let idx = pool_argmax(
        input,
        grad_out.shape()[0],
        grad_out.shape()[1],
        window,
        stride,
    );
    let mut gx = Tensor::zeros(input.shape());
    let data = gx.data_mut();
    for (&i, &g) in idx.iter().zip(grad_out.data()) {
        data[i] = data[i] + g;
    }
    gx
}

fn dense_forward<T: Scalar>(input: &Tensor<T>, params: &Params<T>) -> Tensor<T> {
    let out_f = params.bias.len();
    let mut out = params.bias.data().to_vec();
    let wt = params.weight.data();
    for (i, &xv) in input.data().iter().enumerate() {
        if xv == T::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&wt[i * out_f..][..out_f]) {
            *o = *o + xv * wv;
        }
    }
    Tensor::from_vec(vec![out_f], out).expect("dense output shape")
}

fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &Params<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Params<T>) {
    let out_f = params.bias.len();
    let g = grad_out.data();
    let wt = params.weight.data();
    let mut gw = vec![T::zero(); wt.len()];
    let gx = Tensor::from_fn(input.shape(), |i| {
        let xv = input.data()[i];
        let row = &wt[i * out_f..][..out_f];
        let grow = &mut gw[i * out_f..][..out_f];
        let mut acc = T::zero();
        for o in 0..out_f {
            grow[o] = xv * g[o];
            acc = acc + row[o] * g[o];
        }
        acc
    });
    (
        gx,
        Params {
            weight: Tensor::from_vec(params.weight.shape().to_vec(), gw).expect("dense grad w"),
            bias: grad_out.clone(),
        },
    )
}

pub(crate) fn softmax<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let max = input
        .data()
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = input.data().iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Tensor::from_vec(input.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
        .expect("softmax output shape")
}
