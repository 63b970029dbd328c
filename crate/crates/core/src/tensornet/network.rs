use rand::Rng;

use super::layers::{Layer, LayerSpec, Param};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Anything that owns trainable parameters.
pub trait Parameterized<S: Scalar> {
    fn params(&self) -> Vec<&Param<S>>;
    fn params_mut(&mut self) -> Vec<&mut Param<S>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Ordered chain of layers with a statically checked shape flow.
#[derive(Debug, Clone)]
pub struct Network<S> {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> Network<S> {
    /// `input_shape` excludes the batch dimension.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let output_shape = Self::check_chain(input_shape, specs)?;
        let mut layers: Vec<Layer<S>> = specs.iter().map(|s| Layer::from_spec(s, rng)).collect();
        for (i, layer) in layers.iter_mut().enumerate() {
            for p in layer.params_mut() {
                p.name = format!("{i}.{}", p.name);
            }
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            output_shape,
            layers,
        })
    }

    /// Per-item output shape of `specs` applied to `input_shape`.
    pub fn check_chain(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Vec<usize>> {
        specs
            .iter()
            .try_fold(input_shape.to_vec(), |shape, spec| spec.output_shape(&shape))
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn architecture(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects [N, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training forward pass; records what `backward` needs.
    pub fn forward(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Forward pass without recording, usable through a shared reference.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Inference that also returns every intermediate activation (index `i` is the output of layer `i`).
    pub fn infer_trace(&self, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the gradient with respect to the input.
    pub fn backward(&mut self, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }
}

impl<S: Scalar> Parameterized<S> for Network<S> {
    fn params(&self) -> Vec<&Param<S>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }
}
