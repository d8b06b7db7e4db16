use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{glorot_params, Layer, LayerKind, LayerSpec, Params};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::CLASS_COUNT;

/// Layer stack plus the index where the classifier head begins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub base_boundary: usize,
}

impl Architecture {
    /// Conv 3x3x8, pool, conv 3x3x16, pool, dense 4 on 32x32 grayscale.
    pub fn standard() -> Self {
        Self {
            input_shape: vec![32, 32, 1],
            layers: vec![
                LayerSpec::conv(8, 3, 1, 1),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::conv(16, 3, 1, 1),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::flatten(),
                LayerSpec::dense(CLASS_COUNT),
                LayerSpec::softmax(),
            ],
            base_boundary: 7,
        }
    }

    /// Wider first stage with a 5x5 receptive field and a thinner second stage.
    pub fn compact() -> Self {
        Self {
            input_shape: vec![32, 32, 1],
            layers: vec![
                LayerSpec::conv(6, 5, 1, 2),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::conv(12, 3, 1, 1),
                LayerSpec::relu(),
                LayerSpec::max_pool(2, 2),
                LayerSpec::flatten(),
                LayerSpec::dense(CLASS_COUNT),
                LayerSpec::softmax(),
            ],
            base_boundary: 7,
        }
    }

    /// Resolves every layer's input shape, checking that the stack chains and
    /// ends in a softmax over the four traffic classes.
    pub fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Architecture("no layers".into()));
        }
        if self.base_boundary > self.layers.len() {
            return Err(Error::Architecture(format!(
                "base boundary {} beyond {} layers",
                self.base_boundary,
                self.layers.len()
            )));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Architecture("input dimensions must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_shape.clone();
        for (i, spec) in self.layers.iter().enumerate() {
            spec.validate()?;
            if i >= self.base_boundary && spec.frozen {
                return Err(Error::Architecture(format!("head layer {i} may not be frozen")));
            }
            let next = spec.kind.output_shape(&shape)?;
            shapes.push(std::mem::replace(&mut shape, next));
        }
        if !matches!(self.layers.last().map(|l| &l.kind), Some(LayerKind::Softmax))
            || shape != [CLASS_COUNT]
        {
            return Err(Error::Architecture(format!(
                "model must end in a softmax over {CLASS_COUNT} classes, ends with shape {shape:?}"
            )));
        }
        Ok(shapes)
    }
}

/// Per-layer parameter gradients. Entries are `None` for parameter-free
/// layers and for frozen layers, whose gradients are never computed.
pub type Gradients<T> = Vec<Option<Params<T>>>;

/// A trainable example: input tensor and class index.
pub trait Sample {
    fn input<T: Scalar>(&self) -> Cow<'_, Tensor<T>>;
    fn label(&self) -> usize;
}

impl<S: Scalar> Sample for (Tensor<S>, usize) {
    fn input<T: Scalar>(&self) -> Cow<'_, Tensor<T>> {
        borrow_or_cast(&self.0)
    }

    fn label(&self) -> usize {
        self.1
    }
}

impl<S: Sample> Sample for &S {
    fn input<T: Scalar>(&self) -> Cow<'_, Tensor<T>> {
        (**self).input()
    }

    fn label(&self) -> usize {
        (**self).label()
    }
}

/// Borrows when the scalar types agree, otherwise converts.
pub(crate) fn borrow_or_cast<S: Scalar, T: Scalar>(t: &Tensor<S>) -> Cow<'_, Tensor<T>> {
    match (t as &dyn std::any::Any).downcast_ref::<Tensor<T>>() {
        Some(same) => Cow::Borrowed(same),
        None => Cow::Owned(t.cast()),
    }
}

/// Layered CNN classifier with a frozen-able convolutional base.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    base_boundary: usize,
    seed: u64,
}

impl<T: Scalar> Model<T> {
    /// Builds a model with Glorot-uniform weights drawn from `seed`.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        let shapes = arch.layer_input_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layers
            .iter()
            .zip(&shapes)
            .map(|(spec, shape)| {
                let params = glorot_params(&spec.kind, shape, &mut rng);
                Layer::new(spec.clone(), shape, params)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input_shape: arch.input_shape.clone(),
            layers,
            base_boundary: arch.base_boundary,
            seed,
        })
    }

    /// Rebuilds a model from an architecture and flat parameter values in layer order
    /// (weight then bias for each parameterized layer).
    pub fn from_parts(arch: &Architecture, seed: u64, values: &[T]) -> Result<Self> {
        let shapes = arch.layer_input_shapes()?;
        let mut rest = values;
        let mut take = |shape: Vec<usize>| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            if rest.len() < n {
                return Err(Error::Architecture(format!(
                    "parameter data too short: need {n} more values, have {}",
                    rest.len()
                )));
            }
            let (head, tail) = rest.split_at(n);
            rest = tail;
            Tensor::from_vec(shape, head.to_vec())
        };
        let mut layers = Vec::with_capacity(shapes.len());
        for (spec, shape) in arch.layers.iter().zip(&shapes) {
            let params = match spec.kind.param_shapes(shape) {
                Some((w, b)) => Some(Params {
                    weight: take(w)?,
                    bias: take(b)?,
                }),
                None => None,
            };
            layers.push(Layer::new(spec.clone(), shape, params)?);
        }
        if !rest.is_empty() {
            return Err(Error::Architecture(format!(
                "{} trailing parameter values",
                rest.len()
            )));
        }
        Ok(Self {
            input_shape: arch.input_shape.clone(),
            layers,
            base_boundary: arch.base_boundary,
            seed,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
            base_boundary: self.base_boundary,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn base_boundary(&self) -> usize {
        self.base_boundary
    }

    pub fn class_count(&self) -> usize {
        CLASS_COUNT
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(Params::len)
            .sum()
    }

    /// All parameter values in checkpoint order.
    pub fn param_values(&self) -> Vec<T> {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(Params::values)
            .collect()
    }

    /// Parameter values of the layers below the base boundary.
    pub fn base_param_values(&self) -> Vec<T> {
        self.layers[..self.base_boundary]
            .iter()
            .filter_map(|l| l.params.as_ref())
            .flat_map(Params::values)
            .collect()
    }

    /// Mutable access to a single layer's parameters.
    pub fn params_mut(&mut self, layer: usize) -> Option<&mut Params<T>> {
        self.layers.get_mut(layer)?.params.as_mut()
    }

    /// Marks every parameterized base layer as frozen; head layers are untouched.
    pub fn freeze_base(&mut self) {
        for layer in &mut self.layers[..self.base_boundary] {
            if layer.spec.kind.has_params() {
                layer.spec.frozen = true;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        for layer in &mut self.layers {
            layer.spec.frozen = false;
        }
    }

    /// Re-draws the classifier head with fresh Glorot weights.
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers[self.base_boundary..] {
            if let Some(p) = glorot_params(&layer.spec.kind, &layer.input_shape, &mut rng) {
                layer.params = Some(p);
            }
        }
    }

    /// Sets every head parameter to zero, which makes the output uniform.
    pub fn zero_head(&mut self) {
        for layer in &mut self.layers[self.base_boundary..] {
            if let Some(p) = layer.params.as_mut() {
                *p = p.zeros_like();
            }
        }
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::InputShape {
                expected: self.input_shape.clone(),
                actual: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Class probabilities for one image.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image)?;
        self.forward_range(0, self.layers.len(), Cow::Borrowed(image))
            .map(Cow::into_owned)
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<usize> {
        Ok(self.forward(image)?.argmax())
    }

    pub(crate) fn forward_range<'a>(
        &self,
        from: usize,
        to: usize,
        mut x: Cow<'a, Tensor<T>>,
    ) -> Result<Cow<'a, Tensor<T>>> {
        for layer in &self.layers[from..to] {
            x = Cow::Owned(layer.forward(&x)?);
        }
        Ok(x)
    }

    /// Activations of layers `from..` for an input to layer `from`.
    /// Element 0 is the input itself.
    fn trace(&self, from: usize, x: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut acts = Vec::with_capacity(self.layers.len() - from + 1);
        acts.push(x);
        for layer in &self.layers[from..] {
            let next = layer.forward(acts.last().unwrap())?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Index of the first layer whose parameters must receive gradients.
    pub(crate) fn first_trainable(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.spec.kind.has_params() && !l.spec.frozen)
            .unwrap_or(self.layers.len())
    }

    /// Mean cross-entropy over `batch` and the gradients of every trainable parameter.
    pub fn loss_and_gradients<S: Sample>(&self, batch: &[S]) -> Result<(T, Gradients<T>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let from = self.first_trainable();
        let mut inputs = Vec::with_capacity(batch.len());
        for s in batch {
            let x = s.input::<T>();
            self.check_input(&x)?;
            let label = s.label();
            if label >= CLASS_COUNT {
                return Err(Error::Range(format!("label {label} outside 0..{CLASS_COUNT}")));
            }
            let start = self.forward_range(0, from, x)?.into_owned();
            inputs.push((start, label));
        }
        self.loss_and_gradients_from(from, inputs)
    }

    /// Same as [`Model::loss_and_gradients`] for inputs that already went through layers `..from`.
    pub(crate) fn loss_and_gradients_from(
        &self,
        from: usize,
        inputs: Vec<(Tensor<T>, usize)>,
    ) -> Result<(T, Gradients<T>)> {
        let n = T::from_usize(inputs.len()).unwrap();
        let mut grads: Gradients<T> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match &l.params {
                Some(p) if i >= from && !l.spec.frozen => Some(p.zeros_like()),
                _ => None,
            })
            .collect();
        let mut total_loss = T::zero();
        for (x, label) in inputs {
            let acts = self.trace(from, x)?;
            let probs = acts.last().unwrap();
            let p = probs.data()[label].max(T::min_positive_value());
            total_loss = total_loss - p.ln();
            let mut g = Tensor::zeros(probs.shape());
            g.data_mut()[label] = -T::one() / p;
            for (k, layer) in self.layers.iter().enumerate().skip(from).rev() {
                let a = k - from;
                let (gi, gp) = layer.backward(&acts[a], &acts[a + 1], &g);
                if let (Some(acc), Some(gp)) = (grads[k].as_mut(), gp) {
                    for (dst, src) in acc.values_mut().zip(gp.values()) {
                        *dst = *dst + src;
                    }
                }
                g = gi;
            }
        }
        for acc in grads.iter_mut().flatten() {
            for v in acc.values_mut() {
                *v = *v / n;
            }
        }
        Ok((total_loss / n, grads))
    }

    /// Plain SGD: `p -= learning_rate * grad` for every non-frozen parameter.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, learning_rate: T) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::GradientShape {
                layer: grads.len().min(self.layers.len()),
                reason: format!(
                    "{} gradient slots for {} layers",
                    grads.len(),
                    self.layers.len()
                ),
            });
        }
        for (i, (layer, g)) in self.layers.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                let Some(p) = &layer.params else {
                    return Err(Error::GradientShape {
                        layer: i,
                        reason: "gradient for a parameter-free layer".into(),
                    });
                };
                if g.weight.shape() != p.weight.shape() || g.bias.shape() != p.bias.shape() {
                    return Err(Error::GradientShape {
                        layer: i,
                        reason: format!(
                            "expected {:?}/{:?}, got {:?}/{:?}",
                            p.weight.shape(),
                            p.bias.shape(),
                            g.weight.shape(),
                            g.bias.shape()
                        ),
                    });
                }
            }
        }
        if learning_rate == T::zero() {
            return Ok(());
        }
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            let (Some(p), Some(g)) = (layer.params.as_mut(), g) else {
                continue;
            };
            if layer.spec.frozen {
                continue;
            }
            for (v, d) in p.values_mut().zip(g.values()) {
                *v = *v - learning_rate * d;
            }
        }
        Ok(())
    }
}
