//! Dense networks, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod checkpoint;
mod mlp;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_mlp, save_mlp, LayerRecord, MlpCheckpoint};
pub use mlp::{BoundMlp, Linear, Mlp};
pub use tape::{concat, Gradients, Tape, Var};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Negative slope of the critic's leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Pointwise (or, for softmax, row-wise) nonlinearity applied after a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f64),
    Selu,
    Sigmoid,
    Tanh,
    Softmax,
}

impl Activation {
    pub fn apply<S: Scalar>(self, x: &Array2<S>) -> Array2<S> {
        match self {
            Activation::Linear => x.clone(),
            Activation::Relu => x.mapv(|v| if v > S::zero() { v } else { S::zero() }),
            Activation::LeakyRelu(alpha) => {
                let alpha = S::c(alpha);
                x.mapv(|v| if v > S::zero() { v } else { v * alpha })
            }
            Activation::Selu => {
                let lambda = S::c(SELU_LAMBDA);
                let alpha = S::c(SELU_ALPHA);
                x.mapv(|v| {
                    if v > S::zero() {
                        lambda * v
                    } else {
                        lambda * alpha * (v.exp() - S::one())
                    }
                })
            }
            Activation::Sigmoid => x.mapv(sigmoid),
            Activation::Tanh => x.mapv(|v| v.tanh()),
            Activation::Softmax => {
                let mut out = x.clone();
                for mut row in out.outer_iter_mut() {
                    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let total = row.sum();
                    row.mapv_inplace(|v| v / total);
                }
                out
            }
        }
    }

    /// Whether the derivative is piecewise constant, so that input gradients
    /// can be differentiated again with a zero second derivative.
    pub fn piecewise_linear(self) -> bool {
        matches!(
            self,
            Activation::Linear | Activation::Relu | Activation::LeakyRelu(_)
        )
    }
}

fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
