use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::Activation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense layer `y = act(x · W + b)` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Arc<Array2<S>>,
    pub bias: Arc<Array2<S>>,
    pub activation: Activation,
}

impl<S: Scalar> Linear<S> {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((in_dim, out_dim), || {
            S::c(rng.random_range(-limit..limit))
        });
        Linear {
            weight: Arc::new(weight),
            bias: Arc::new(Array2::zeros((1, out_dim))),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Multilayer perceptron.
#[derive(Clone, Debug)]
pub struct Mlp<S> {
    layers: Vec<Linear<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// Builds an MLP through the widths in `dims` (`dims[0]` inputs, last entry
    /// outputs) with `hidden` between layers and `output` on the last layer.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output width");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Linear::glorot(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn from_layers(layers: Vec<Linear<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("MLP without layers".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.dim() != (1, layer.out_dim()) {
                return Err(Error::Shape(format!("layer {i}: bias does not match weight")));
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: input width {} does not chain to previous output {}",
                    layer.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Linear<S>] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Sets the last layer's weights and bias to zero, so the network outputs
    /// `act(0)` everywhere.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        Arc::make_mut(&mut last.weight).fill(S::zero());
        Arc::make_mut(&mut last.bias).fill(S::zero());
    }

    /// Mutable access to every parameter in the order used by [`BoundMlp::grads`].
    pub fn params_mut(&mut self) -> Vec<&mut Array2<S>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            out.push(Arc::make_mut(&mut layer.weight));
            out.push(Arc::make_mut(&mut layer.bias));
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.dim(), l.bias.dim()])
            .collect()
    }

    fn check_input(&self, dim: (usize, usize), finite: bool) -> Result<()> {
        if dim.1 != self.in_dim() {
            return Err(Error::Shape(format!(
                "batch width {} but network expects {}",
                dim.1,
                self.in_dim()
            )));
        }
        if !finite {
            return Err(Error::Domain("non-finite network input".into()));
        }
        Ok(())
    }

    /// Forward pass without recording a graph.
    pub fn predict(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        self.check_input(x.dim(), x.iter().all(|v| v.is_finite()))?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&*layer.weight);
            z += &*layer.bias;
            h = layer.activation.apply(&z);
        }
        Ok(h)
    }

    /// Places the parameters on `tape`; they require gradients iff `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> BoundMlp<'t, S> {
        let params = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.parameter(&l.weight, trainable),
                    tape.parameter(&l.bias, trainable),
                    l.activation,
                )
            })
            .collect();
        BoundMlp {
            params,
            in_dim: self.in_dim(),
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
pub struct BoundMlp<'t, S: Scalar> {
    params: Vec<(Var<'t, S>, Var<'t, S>, Activation)>,
    in_dim: usize,
}

impl<'t, S: Scalar> BoundMlp<'t, S> {
    fn check(&self, x: Var<'t, S>) -> Result<()> {
        let (_, width) = x.shape();
        if width != self.in_dim {
            return Err(Error::Shape(format!(
                "batch width {width} but network expects {}",
                self.in_dim
            )));
        }
        if x.value().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite network input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.check(x)?;
        let mut h = x;
        for &(w, b, act) in &self.params {
            h = h.matmul(w).add_bias(b).activate(act);
        }
        Ok(h)
    }

    /// Gradient of output column `head` with respect to the input rows, built
    /// from tape operations so it can itself be differentiated with respect
    /// to the parameters.
    ///
    /// Only piecewise-linear activations are supported; their second
    /// derivative is taken as zero.
    pub fn input_gradient(&self, x: Var<'t, S>, head: usize) -> Result<Var<'t, S>> {
        self.check(x)?;
        if let Some(&(_, _, act)) = self.params.iter().find(|p| !p.2.piecewise_linear()) {
            return Err(Error::Capability(format!(
                "input gradient needs piecewise-linear activations, found {act:?}"
            )));
        }
        let (w_last, _, _) = self.params[self.params.len() - 1];
        let out_dim = w_last.shape().1;
        if head >= out_dim {
            return Err(Error::Shape(format!("head {head} but network has {out_dim} outputs")));
        }
        let tape = x.tape();
        // Forward sweep, keeping pre-activations for the derivative masks.
        let mut pre = Vec::with_capacity(self.params.len());
        let mut h = x;
        for &(w, b, act) in &self.params {
            let z = h.matmul(w).add_bias(b);
            pre.push(z.value());
            h = z.activate(act);
        }
        let n = x.shape().0;
        let mut seed = Array2::zeros((n, out_dim));
        seed.column_mut(head).fill(S::one());
        let mut g = tape.constant(seed);
        for (&(w, _, act), z) in self.params.iter().zip(pre.iter()).rev() {
            g = match act {
                Activation::Linear => g,
                Activation::Relu => g.mask(z.mapv(|v| if v > S::zero() { S::one() } else { S::zero() })),
                Activation::LeakyRelu(alpha) => {
                    let alpha = S::c(alpha);
                    g.mask(z.mapv(|v| if v > S::zero() { S::one() } else { alpha }))
                }
                _ => unreachable!(),
            };
            g = g.matmul_t(w);
        }
        Ok(g)
    }

    /// Parameter gradients in the order of [`Mlp::params_mut`].
    pub fn grads(&self, grads: &Gradients<S>) -> Vec<Array2<S>> {
        self.params
            .iter()
            .flat_map(|&(w, b, _)| [grads.get_or_zeros(w), grads.get_or_zeros(b)])
            .collect()
    }
}
