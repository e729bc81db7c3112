//! JSON checkpoints for [`Mlp`].
//!
//! ```json
//! {"format":"invbench-mlp","version":1,
//!  "layers":[{"index":0,"in_dim":6,"out_dim":200,"activation":"relu",
//!             "weight":[...row-major in_dim*out_dim...],"bias":[...out_dim...]}]}
//! ```
//! Values are written as shortest round-trip decimals, so a reload is bit-exact.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Activation, Linear, Mlp};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MLP_FORMAT: &str = "invbench-mlp";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub index: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerRecord>,
}

impl MlpCheckpoint {
    pub fn from_mlp<S: Scalar>(mlp: &Mlp<S>) -> Self {
        let layers = mlp
            .layers()
            .iter()
            .enumerate()
            .map(|(index, l)| LayerRecord {
                index,
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: l.activation,
                weight: l.weight.iter().map(|v| v.as_f64()).collect(),
                bias: l.bias.iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        MlpCheckpoint {
            format: MLP_FORMAT.to_string(),
            version: 1,
            layers,
        }
    }

    pub fn to_mlp<S: Scalar>(&self) -> Result<Mlp<S>> {
        if self.format != MLP_FORMAT || self.version != 1 {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut records: Vec<&LayerRecord> = self.layers.iter().collect();
        records.sort_by_key(|r| r.index);
        let layers = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                if r.index != i {
                    return Err(Error::Shape(format!("layer indices skip {i}")));
                }
                let weight = Array2::from_shape_vec(
                    (r.in_dim, r.out_dim),
                    r.weight.iter().map(|&v| S::c(v)).collect(),
                )
                .map_err(|e| Error::Shape(format!("layer {i} weight: {e}")))?;
                let bias = Array2::from_shape_vec(
                    (1, r.out_dim),
                    r.bias.iter().map(|&v| S::c(v)).collect(),
                )
                .map_err(|e| Error::Shape(format!("layer {i} bias: {e}")))?;
                Ok(Linear {
                    weight: Arc::new(weight),
                    bias: Arc::new(bias),
                    activation: r.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_layers(layers)
    }
}

pub fn save_mlp<S: Scalar>(mlp: &Mlp<S>, path: &Path) -> Result<()> {
    crate::io::write_json(path, &MlpCheckpoint::from_mlp(mlp))
}

pub fn load_mlp<S: Scalar>(path: &Path) -> Result<Mlp<S>> {
    let ckpt: MlpCheckpoint = crate::io::read_json(path)?;
    ckpt.to_mlp()
}
