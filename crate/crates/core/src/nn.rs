//! Dense multilayer perceptrons with heterogeneous widths and depths.
//!
//! Every client owns a [`Model`] built from a [`ModelSpec`]. Hidden layers are
//! affine maps followed by ReLU; the output layer emits raw logits. The same
//! parameter layout is used for gradients and momentum buffers so that
//! optimizer and aggregation code can walk the trees in lockstep.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;

/// Architecture of an MLP: hidden widths, input dimension and class count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_widths: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>, input_dim: usize, num_classes: usize) -> Result<Self> {
        let spec = Self {
            layer_widths,
            input_dim,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() {
            return Err(Error::InvalidArgument("layer_widths must be non-empty".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument(
                "input_dim and num_classes must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// `(out, in)` shape of every affine layer, hidden layers first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layer_widths.len() + 1);
        let mut fan_in = self.input_dim;
        for &width in &self.layer_widths {
            shapes.push((width, fan_in));
            fan_in = width;
        }
        shapes.push((self.num_classes, fan_in));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(out, inp)| out * inp + out)
            .sum()
    }

    /// Stable digest of the architecture, used to key initialization streams.
    pub fn digest(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * (self.layer_widths.len() + 2));
        for w in &self.layer_widths {
            bytes.extend_from_slice(&(*w as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&(self.input_dim as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        rng::digest64(&bytes)
    }
}

/// Weight matrix (`out x in`) and bias vector (`out`) of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.dim()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Parameter-shaped tree of gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(spec: &ModelSpec) -> Self {
        Self {
            layers: spec
                .layer_shapes()
                .into_iter()
                .map(|(o, i)| Dense::zeros(o, i))
                .collect(),
        }
    }

    /// `self += scale * other`, shapes must agree.
    pub fn add_scaled(&mut self, scale: T, other: &Gradients<T>) -> Result<()> {
        check_congruent("gradient accumulation", &self.layers, &other.layers)?;
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weight.scaled_add(scale, &src.weight);
            dst.bias.scaled_add(scale, &src.bias);
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    layers: Vec<Dense<T>>,
    velocity: Vec<Dense<T>>,
}

impl<T: Scalar> Model<T> {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    ///
    /// The stream is keyed by `(seed, spec digest)`, so clients sharing an
    /// architecture and seed start from bit-identical parameters.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::derive(seed, Stream::Init, &[spec.digest()]);
        let mut layers = Vec::new();
        let mut velocity = Vec::new();
        for (out, inp) in spec.layer_shapes() {
            let bound = 1.0 / (inp as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let weight = Array2::from_shape_simple_fn((out, inp), || T::of(dist.sample(&mut rng)));
            layers.push(Dense {
                weight,
                bias: Array1::zeros(out),
            });
            velocity.push(Dense::zeros(out, inp));
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            velocity,
        })
    }

    /// Model with every parameter zero.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers: Vec<_> = spec
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Dense::zeros(o, i))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            velocity: layers.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn momentum_buffers(&self) -> &[Dense<T>] {
        &self.velocity
    }

    pub fn same_architecture(&self, other: &Model<T>) -> bool {
        self.spec == other.spec
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Logits for a `B x input_dim` batch.
    pub fn forward(&self, batch: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if batch.ncols() != self.spec.input_dim {
            return Err(Error::shape(
                "forward input",
                self.spec.input_dim,
                batch.ncols(),
            ));
        }
        let last = self.layers.len() - 1;
        let mut act = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight.t());
            z += &layer.bias;
            if i != last {
                z.mapv_inplace(relu);
            }
            act = z;
        }
        Ok(act)
    }

    /// Reverse-mode gradients of `sum(grad_logits * forward(batch))`.
    pub fn backward(&self, batch: ArrayView2<'_, T>, grad_logits: ArrayView2<'_, T>) -> Result<Gradients<T>> {
        if batch.ncols() != self.spec.input_dim {
            return Err(Error::shape(
                "backward input",
                self.spec.input_dim,
                batch.ncols(),
            ));
        }
        let expected = (batch.nrows(), self.spec.num_classes);
        if grad_logits.dim() != expected {
            return Err(Error::shape("backward logit gradient", expected, grad_logits.dim()));
        }

        // inputs[i] feeds layer i; pre[i] is layer i's affine output.
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weight.t());
            z += &layer.bias;
            let next = if i != last { z.mapv(relu) } else { z.clone() };
            inputs.push(act);
            pre.push(z);
            act = next;
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.to_owned();
        for i in (0..self.layers.len()).rev() {
            let weight = delta.t().dot(&inputs[i]);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weight);
                back.zip_mut_with(&pre[i - 1], |d, &z| {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                });
                delta = back;
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// One SGD-with-momentum step; weight decay is added to the gradient.
    ///
    /// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, sgd: Sgd<T>) -> Result<()> {
        check_congruent("sgd step", &self.layers, &grads.layers)?;
        if !grads.layers.iter().all(Dense::is_finite) {
            return Err(Error::NonFinite("gradients"));
        }
        for ((param, vel), grad) in self
            .layers
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(&grads.layers)
        {
            step_tensor(
                param.weight.iter_mut(),
                vel.weight.iter_mut(),
                grad.weight.iter(),
                sgd,
            );
            step_tensor(
                param.bias.iter_mut(),
                vel.bias.iter_mut(),
                grad.bias.iter(),
                sgd,
            );
        }
        if !self.layers.iter().all(Dense::is_finite) {
            return Err(Error::NonFinite("parameters after sgd step"));
        }
        Ok(())
    }

    /// Sub-matrix of layer `layer` selected by output and input unit indices.
    pub fn layer_slice(&self, layer: usize, out_idx: &[usize], in_idx: &[usize]) -> Result<Dense<T>> {
        let src = self.checked_layer(layer, out_idx, in_idx)?;
        let mut slice = Dense::zeros(out_idx.len(), in_idx.len());
        for (r, &o) in out_idx.iter().enumerate() {
            for (c, &i) in in_idx.iter().enumerate() {
                slice.weight[[r, c]] = src.weight[[o, i]];
            }
            slice.bias[r] = src.bias[o];
        }
        Ok(slice)
    }

    /// Inverse of [`Model::layer_slice`].
    pub fn write_slice(
        &mut self,
        layer: usize,
        out_idx: &[usize],
        in_idx: &[usize],
        slice: &Dense<T>,
    ) -> Result<()> {
        self.checked_layer(layer, out_idx, in_idx)?;
        if slice.shape() != (out_idx.len(), in_idx.len()) || slice.bias.len() != out_idx.len() {
            return Err(Error::shape(
                "write_slice",
                (out_idx.len(), in_idx.len()),
                slice.shape(),
            ));
        }
        let dst = &mut self.layers[layer];
        for (r, &o) in out_idx.iter().enumerate() {
            for (c, &i) in in_idx.iter().enumerate() {
                dst.weight[[o, i]] = slice.weight[[r, c]];
            }
            dst.bias[o] = slice.bias[r];
        }
        Ok(())
    }

    fn checked_layer(&self, layer: usize, out_idx: &[usize], in_idx: &[usize]) -> Result<&Dense<T>> {
        let src = self.layers.get(layer).ok_or(Error::IndexOutOfRange {
            context: "layer",
            index: layer,
            bound: self.layers.len(),
        })?;
        let (out, inp) = src.shape();
        if let Some(&o) = out_idx.iter().find(|&&o| o >= out) {
            return Err(Error::IndexOutOfRange {
                context: "output units",
                index: o,
                bound: out,
            });
        }
        if let Some(&i) = in_idx.iter().find(|&&i| i >= inp) {
            return Err(Error::IndexOutOfRange {
                context: "input units",
                index: i,
                bound: inp,
            });
        }
        Ok(src)
    }

    /// Flattened parameters in layer order (weight row-major, then bias).
    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape("flat parameters", self.param_count(), values.len()));
        }
        let mut it = values.iter();
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Copy parameters from `other`, leaving this model's momentum untouched.
    pub fn copy_params_from(&mut self, other: &Model<T>) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::ArchitectureMismatch(format!(
                "{:?} vs {:?}",
                self.spec.layer_widths, other.spec.layer_widths
            )));
        }
        self.layers.clone_from(&other.layers);
        Ok(())
    }

    /// Stable digest of the parameter values (momentum excluded).
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * self.param_count() + 8);
        bytes.extend_from_slice(&self.spec.digest().to_le_bytes());
        for v in self
            .layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
        {
            bytes.extend_from_slice(&v.bits().to_le_bytes());
        }
        rng::digest64(&bytes)
    }
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

fn step_tensor<'a, T: Scalar>(
    params: impl Iterator<Item = &'a mut T>,
    velocity: impl Iterator<Item = &'a mut T>,
    grads: impl Iterator<Item = &'a T>,
    sgd: Sgd<T>,
) {
    for ((w, v), &g) in params.zip(velocity).zip(grads) {
        *v = sgd.momentum * *v + (g + sgd.weight_decay * *w);
        *w -= sgd.lr * *v;
    }
}

pub(crate) fn check_congruent<T: Scalar>(
    context: &'static str,
    a: &[Dense<T>],
    b: &[Dense<T>],
) -> Result<()> {
    let sa: Vec<_> = a.iter().map(|l| (l.shape(), l.bias.len())).collect();
    let sb: Vec<_> = b.iter().map(|l| (l.shape(), l.bias.len())).collect();
    if sa != sb {
        return Err(Error::shape(context, sa, sb));
    }
    Ok(())
}
