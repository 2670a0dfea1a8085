use rand::Rng;

use super::layer::{Layer, LayerKind, LayerSpec};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// A feed-forward stack of layers with a declared item input shape.
#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer<T>>,
    /// Number of leading layers whose caches hold the last forward pass.
    primed: Option<usize>,
}

impl<T: Real> Network<T> {
    pub fn from_specs<R: Rng + ?Sized>(input_shape: Vec<usize>, specs: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::config(format!("invalid network input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in &specs {
            let layer = Layer::build(spec, rng)?;
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        Ok(Self {
            input_shape,
            output_shape: shape,
            specs,
            layers,
            primed: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }

    /// All parameter tensors in a stable order (layer by layer, weight then bias).
    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn grads(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| l.grads())
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.layers.iter_mut().for_each(|l| l.set_frozen(frozen));
    }

    pub fn zero_grads(&mut self) {
        self.layers.iter_mut().for_each(|l| l.zero_grads());
    }

    /// Drops cached activations; called whenever parameters change.
    pub fn invalidate(&mut self) {
        self.primed = None;
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().len() < 2 || input.shape()[1..] != self.input_shape[..] {
            return Err(Error::config(format!(
                "network expects [batch, {:?}], got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass that caches activations for a following `backward`.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_prefix(input, self.layers.len())
    }

    /// Caching forward pass that stops before a final row-softmax layer and
    /// returns its input. A following `backward` starts below that layer.
    pub fn forward_logits(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self.layers.last() {
            Some(l) if l.kind() == LayerKind::SoftmaxRows => self.forward_prefix(input, self.layers.len() - 1),
            _ => Err(Error::Usage("network does not end in a softmax-row layer".into())),
        }
    }

    fn forward_prefix(&mut self, input: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
        self.check_input(input)?;
        self.primed = None;
        let mut x = input.clone();
        for layer in &mut self.layers[..n] {
            x = layer.forward(&x)?;
        }
        if !x.is_finite() {
            return Err(Error::Numeric("network output is not finite".into()));
        }
        self.primed = Some(n);
        Ok(x)
    }

    /// Cache-free forward pass, usable through a shared reference.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_prefix(input, self.layers.len())
    }

    /// Cache-free counterpart of [`Network::forward_logits`].
    pub fn infer_logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self.layers.last() {
            Some(l) if l.kind() == LayerKind::SoftmaxRows => self.infer_prefix(input, self.layers.len() - 1),
            _ => Err(Error::Usage("network does not end in a softmax-row layer".into())),
        }
    }

    fn infer_prefix(&self, input: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers[..n] {
            x = layer.apply(&x)?;
        }
        Ok(x)
    }

    /// Backpropagates `loss_gradient` (shaped like the last forward result) and returns
    /// the gradient with respect to the network input.
    pub fn backward(&mut self, loss_gradient: &Tensor<T>) -> Result<Tensor<T>> {
        let Some(n) = self.primed.take() else {
            return Err(Error::Usage("backward called without a preceding forward".into()));
        };
        let mut g = loss_gradient.clone();
        for layer in self.layers[..n].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }
}
