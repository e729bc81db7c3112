//! Label-wise MLP surrogates of the forward model.
//!
//! One single-output network per label, each trained on MSE of the
//! standardized label. For every candidate batch size the checkpoint with the
//! lowest test MSE is kept, and the batch size whose best checkpoint wins is
//! retained.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::nn::{load_mlp, save_mlp, Activation, Adam, AdamConfig, Mlp, Tape};
use crate::problem::{Dataset, LabelModel, LabelVector, NormalizedDesign, DESIGN_DIM, LABEL_DIM, LABEL_NAMES};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from_seed, streams};
use crate::solver::{epoch_batches, require_data, select_rows, LabelScaler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Gradient steps per (label, batch size) run.
    pub steps: usize,
    pub batch_sizes: Vec<usize>,
    /// Test-set evaluation interval in steps.
    pub eval_every: usize,
}

impl SurrogateConfig {
    /// Five dense layers (four hidden of width 200), ReLU.
    pub fn evaluation() -> Self {
        SurrogateConfig {
            hidden_layers: 4,
            hidden_width: 200,
            activation: Activation::Relu,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            steps: 40_000,
            batch_sizes: vec![5, 20, 50, 200, 1000],
            eval_every: 500,
        }
    }

    /// Seven hidden layers of width 64, LeakyReLU(0.2), Adam betas (0.5, 0.999).
    pub fn bayes() -> Self {
        SurrogateConfig {
            hidden_layers: 7,
            hidden_width: 64,
            activation: Activation::LeakyRelu(0.2),
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            steps: 40_000,
            batch_sizes: vec![5, 20, 50, 200, 1000],
            eval_every: 500,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.eval_every == 0 || self.hidden_width == 0 {
            return Err(Error::Config("surrogate steps, width and eval interval must be positive".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config("surrogate batch sizes must be a non-empty list of positive sizes".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("surrogate learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateMeta {
    pub train_n: usize,
    pub test_n: usize,
    pub seed: u64,
    pub batch_size: [usize; LABEL_DIM],
    pub best_step: [usize; LABEL_DIM],
    pub test_mae: [f64; LABEL_DIM],
}

/// One test evaluation during training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub label: usize,
    pub batch_size: usize,
    pub step: usize,
    pub test_mse: f64,
}

#[derive(Clone, Debug)]
pub struct SurrogateSet<S> {
    pub nets: [Mlp<S>; LABEL_DIM],
    pub scaler: LabelScaler,
    pub config: SurrogateConfig,
    pub meta: SurrogateMeta,
}

impl<S: Scalar> SurrogateSet<S> {
    /// Raw network outputs mapped back to label units, one row per design.
    pub fn predict_matrix(&self, x: &Array2<S>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), LABEL_DIM));
        for (j, net) in self.nets.iter().enumerate() {
            let p = net.predict(x.view())?;
            let (m, s) = (self.scaler.mean[j], self.scaler.std[j]);
            out.column_mut(j)
                .iter_mut()
                .zip(p.column(0))
                .for_each(|(o, v)| *o = v.as_f64() * s + m);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("surrogate produced a non-finite label".into()));
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, net) in LABEL_NAMES.iter().zip(&self.nets) {
            save_mlp(net, &dir.join(format!("{name}.json")))?;
        }
        write_json(
            &dir.join("manifest.json"),
            &SurrogateManifest {
                labels: LABEL_NAMES.map(String::from).to_vec(),
                config: self.config.clone(),
                scaler: self.scaler,
                meta: self.meta.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SurrogateManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.labels != LABEL_NAMES {
            return Err(Error::format(dir, "surrogate manifest lists unexpected labels"));
        }
        let load = |name: &str| -> Result<Mlp<S>> {
            let net = load_mlp(&dir.join(format!("{name}.json")))?;
            if net.in_dim() != DESIGN_DIM || net.out_dim() != 1 {
                return Err(Error::format(dir, format!("{name}: surrogate must map {DESIGN_DIM} → 1")));
            }
            Ok(net)
        };
        Ok(SurrogateSet {
            nets: [load(LABEL_NAMES[0])?, load(LABEL_NAMES[1])?, load(LABEL_NAMES[2])?],
            scaler: manifest.scaler,
            config: manifest.config,
            meta: manifest.meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SurrogateManifest {
    labels: Vec<String>,
    config: SurrogateConfig,
    scaler: LabelScaler,
    meta: SurrogateMeta,
}

fn design_rows<S: Scalar>(designs: &[NormalizedDesign]) -> Array2<S> {
    Array2::from_shape_fn((designs.len(), DESIGN_DIM), |(i, j)| S::c(designs[i].0[j]))
}

impl<S: Scalar> LabelModel for SurrogateSet<S> {
    fn predict(&self, designs: &[NormalizedDesign]) -> Result<Vec<LabelVector>> {
        let out = self.predict_matrix(&design_rows(designs))?;
        Ok(out
            .outer_iter()
            .map(|r| LabelVector([r[0], r[1], r[2]]))
            .collect())
    }
}

fn mse<S: Scalar>(net: &Mlp<S>, x: &Array2<S>, y: &Array2<S>) -> Result<f64> {
    let p = net.predict(x.view())?;
    Ok((p - y).mapv(|v| v * v).mean().unwrap_or(S::zero()).as_f64())
}

/// Trains one label network for `config.steps` steps and returns the
/// checkpoint with the lowest test MSE (earliest on ties).
#[allow(clippy::too_many_arguments)]
fn train_label<S: Scalar>(
    x: &Array2<S>,
    y: &Array2<S>,
    x_test: &Array2<S>,
    y_test: &Array2<S>,
    batch: usize,
    config: &SurrogateConfig,
    seed: u64,
    history: &mut Vec<Checkpoint>,
    label: usize,
) -> Result<(Mlp<S>, f64, usize)> {
    let mut rng = rng_from_seed(seed);
    let mut dims = vec![DESIGN_DIM];
    dims.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
    dims.push(1);
    let mut net = Mlp::<S>::new(&dims, config.activation, Activation::Linear, &mut rng);
    // A constant label standardizes to zeros; a zero output layer then fits it
    // exactly and receives zero gradients.
    if y.iter().all(|v| v.as_f64().abs() < 1e-12) {
        net.zero_output_layer();
    }
    let adam_cfg = AdamConfig::new(config.lr).with_betas(config.beta1, config.beta2);
    let mut adam = Adam::new(adam_cfg, &net.param_shapes());
    let mut record = |step: usize, net: &Mlp<S>, best: &mut (Mlp<S>, f64, usize)| -> Result<()> {
        let m = mse(net, x_test, y_test)?;
        history.push(Checkpoint { label, batch_size: batch, step, test_mse: m });
        if m < best.1 {
            *best = (net.clone(), m, step);
        }
        Ok(())
    };
    let mut best = (net.clone(), f64::INFINITY, 0);
    record(0, &net, &mut best)?;
    let mut step = 0;
    while step < config.steps {
        for idx in epoch_batches(x.nrows(), batch, &mut rng) {
            let xb = select_rows(x, &idx);
            let yb = select_rows(y, &idx);
            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let loss = bound.forward(tape.constant(xb))?.sub(tape.constant(yb)).square().mean();
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "surrogate {} diverged at step {step}",
                    LABEL_NAMES[label]
                )));
            }
            let grads = tape.backward(loss)?;
            let g = bound.grads(&grads);
            drop(bound);
            drop(tape);
            adam.step(net.params_mut(), &g)?;
            step += 1;
            if step % config.eval_every == 0 || step == config.steps {
                record(step, &net, &mut best)?;
            }
            if step == config.steps {
                break;
            }
        }
    }
    Ok(best)
}

/// Trains the three label surrogates. `history` receives every test evaluation.
pub fn train_surrogates_logged<S: Scalar>(
    train: &Dataset,
    test: &Dataset,
    config: &SurrogateConfig,
    seed: u64,
    history: &mut Vec<Checkpoint>,
) -> Result<SurrogateSet<S>> {
    require_data(train, "surrogate")?;
    if test.is_empty() {
        return Err(Error::Empty("surrogate: test set is empty".into()));
    }
    config.validate()?;
    let scaler = LabelScaler::fit(&train.labels)?;
    let x = train.design_matrix::<S>();
    let x_test = test.design_matrix::<S>();
    let y_all = scaler.matrix::<S>(&train.labels);
    let y_test_all = scaler.matrix::<S>(&test.labels);
    let mut nets = Vec::with_capacity(LABEL_DIM);
    let mut meta = SurrogateMeta {
        train_n: train.len(),
        test_n: test.len(),
        seed,
        batch_size: [0; LABEL_DIM],
        best_step: [0; LABEL_DIM],
        test_mae: [0.0; LABEL_DIM],
    };
    for label in 0..LABEL_DIM {
        let y = y_all.column(label).insert_axis(Axis(1)).to_owned();
        let y_test = y_test_all.column(label).insert_axis(Axis(1)).to_owned();
        let mut winner: Option<(Mlp<S>, f64, usize, usize)> = None;
        for (k, &requested) in config.batch_sizes.iter().enumerate() {
            let batch = requested.min(train.len());
            let run_seed = derive_seed(seed, streams::SURROGATE, (label * 64 + k) as u64);
            let (net, m, step) =
                train_label(&x, &y, &x_test, &y_test, batch, config, run_seed, history, label)?;
            if winner.as_ref().is_none_or(|w| m < w.1) {
                winner = Some((net, m, step, batch));
            }
        }
        let (net, _, step, batch) = winner.expect("at least one batch size");
        meta.batch_size[label] = batch;
        meta.best_step[label] = step;
        nets.push(net);
    }
    let nets: [Mlp<S>; LABEL_DIM] = nets.try_into().map_err(|_| Error::Shape("label count".into()))?;
    let mut set = SurrogateSet {
        nets,
        scaler,
        config: config.clone(),
        meta,
    };
    set.meta.test_mae = surrogate_mae(&set, test)?;
    Ok(set)
}

pub fn train_surrogates<S: Scalar>(
    train: &Dataset,
    test: &Dataset,
    config: &SurrogateConfig,
    seed: u64,
) -> Result<SurrogateSet<S>> {
    train_surrogates_logged(train, test, config, seed, &mut Vec::new())
}

/// Per-label mean absolute error of `model` on `test`.
pub fn surrogate_mae<M: LabelModel + ?Sized>(model: &M, test: &Dataset) -> Result<[f64; LABEL_DIM]> {
    if test.is_empty() {
        return Err(Error::Empty("surrogate MAE on an empty test set".into()));
    }
    let pred = model.predict(&test.designs)?;
    Ok(label_mae(&pred, &test.labels))
}

/// `(1/n) Σ |a_i − b_i|` per label.
pub fn label_mae(a: &[LabelVector], b: &[LabelVector]) -> [f64; LABEL_DIM] {
    let n = a.len().max(1) as f64;
    std::array::from_fn(|j| a.iter().zip(b).map(|(p, q)| (p.0[j] - q.0[j]).abs()).sum::<f64>() / n)
}
