//! Conditional flow matching on straight interpolation paths.
//!
//! A network `v(x, t, y)` regresses the per-sample field `x1 − x0` at
//! `x_t = t·x1 + (1 − t)·x0` with `x0 ~ N(0, I)`. Sampling integrates
//! `dx/dt = v(x, t, y)` from a fresh `x0` with fixed-step RK4.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::nn::{load_mlp, save_mlp, Activation, Adam, AdamConfig, Mlp, Tape};
use crate::ode::rk4;
use crate::problem::{Dataset, LabelVector, NormalizedDesign, DESIGN_DIM, LABEL_DIM};
use crate::scalar::Scalar;
use crate::seed::{rng_from_seed, BenchRng};
use crate::solver::{
    default_batch_size, epoch_batches, latent_generate_many, normal_matrix, require_data, select_rows, Family,
    InverseSolver, LabelScaler, Schedule,
};

/// Network input: design, time, standardized label.
pub const FIELD_INPUT: usize = DESIGN_DIM + 1 + LABEL_DIM;
pub const DEFAULT_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfmConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub schedule: Schedule,
    pub batch_size: Option<usize>,
    /// RK4 steps used when sampling.
    pub steps: usize,
}

impl Default for CfmConfig {
    fn default() -> Self {
        CfmConfig {
            hidden_width: 500,
            hidden_layers: 5,
            schedule: Schedule::flow_default(),
            batch_size: None,
            steps: DEFAULT_STEPS,
        }
    }
}

/// `t·x1 + (1 − t)·x0`.
pub fn sample_path(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Range(format!("path time {t} outside [0, 1]")));
    }
    if x0.len() != x1.len() {
        return Err(Error::Shape(format!("path endpoints of length {} and {}", x0.len(), x1.len())));
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| t * b + (1.0 - t) * a)
        .collect())
}

/// `x1 − x0`.
pub fn target_field(x0: &[f64], x1: &[f64]) -> Vec<f64> {
    x0.iter().zip(x1).map(|(&a, &b)| b - a).collect()
}

#[derive(Clone, Debug)]
pub struct VectorFieldNet<S> {
    pub mlp: Mlp<S>,
    pub scaler: LabelScaler,
    pub config: CfmConfig,
}

/// Stacks `[x, t, y]` into one input matrix. `t` has one entry per row.
fn field_input<S: Scalar>(x: ArrayView2<'_, S>, t: &[S], y: ArrayView2<'_, S>) -> Array2<S> {
    let n = x.nrows();
    let mut out = Array2::zeros((n, FIELD_INPUT));
    out.slice_mut(s![.., ..DESIGN_DIM]).assign(&x);
    for i in 0..n {
        out[[i, DESIGN_DIM]] = t[i];
    }
    out.slice_mut(s![.., DESIGN_DIM + 1..]).assign(&y);
    out
}

impl<S: Scalar> VectorFieldNet<S> {
    pub fn new<R: Rng + ?Sized>(config: CfmConfig, scaler: LabelScaler, rng: &mut R) -> Self {
        let mut dims = vec![FIELD_INPUT];
        dims.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        dims.push(DESIGN_DIM);
        VectorFieldNet {
            mlp: Mlp::new(&dims, Activation::Selu, Activation::Linear, rng),
            scaler,
            config,
        }
    }

    /// Wraps an arbitrary `10 → 6` network.
    pub fn from_mlp(mlp: Mlp<S>, scaler: LabelScaler, config: CfmConfig) -> Result<Self> {
        if mlp.in_dim() != FIELD_INPUT || mlp.out_dim() != DESIGN_DIM {
            return Err(Error::Shape(format!(
                "vector field must map {FIELD_INPUT} → {DESIGN_DIM}, got {} → {}",
                mlp.in_dim(),
                mlp.out_dim()
            )));
        }
        Ok(VectorFieldNet { mlp, scaler, config })
    }

    /// `v(x, t, y)` for a batch; `y` already standardized.
    pub fn velocity(&self, x: ArrayView2<'_, S>, t: &[S], y: ArrayView2<'_, S>) -> Result<Array2<S>> {
        if t.len() != x.nrows() || y.nrows() != x.nrows() {
            return Err(Error::Shape("velocity: row counts differ".into()));
        }
        self.mlp.predict(field_input(x, t, y).view())
    }

    /// Flow-matching loss for given draws: `mean_i ‖v(x_t, t, y) − (x1 − x0)‖²`.
    pub fn loss_with(
        &self,
        x1: ArrayView2<'_, S>,
        y: ArrayView2<'_, S>,
        x0: ArrayView2<'_, S>,
        t: &[S],
    ) -> Result<S> {
        let (input, target) = Self::regression_pair(x1, y, x0, t)?;
        let pred = self.mlp.predict(input.view())?;
        let n = S::c(x1.nrows() as f64);
        Ok((pred - target).mapv(|v| v * v).sum() / n)
    }

    fn regression_pair(
        x1: ArrayView2<'_, S>,
        y: ArrayView2<'_, S>,
        x0: ArrayView2<'_, S>,
        t: &[S],
    ) -> Result<(Array2<S>, Array2<S>)> {
        let n = x1.nrows();
        if n == 0 {
            return Err(Error::Empty("flow-matching loss on an empty batch".into()));
        }
        if x0.dim() != x1.dim() || y.nrows() != n || t.len() != n {
            return Err(Error::Shape("flow-matching batch shapes differ".into()));
        }
        let mut xt = x1.to_owned();
        for (i, mut row) in xt.outer_iter_mut().enumerate() {
            let ti = t[i];
            for (j, v) in row.iter_mut().enumerate() {
                *v = ti * *v + (S::one() - ti) * x0[[i, j]];
            }
        }
        Ok((field_input(xt.view(), t, y), &x1 - &x0))
    }

    /// Draws `x0 ~ N(0, I)` and `t ~ U[0, 1]` per row and evaluates the loss.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        x1: ArrayView2<'_, S>,
        y: ArrayView2<'_, S>,
        rng: &mut R,
    ) -> Result<S> {
        let (x0, t) = draws(x1.nrows(), rng);
        self.loss_with(x1, y, x0.view(), &t)
    }

    /// Loss and parameter gradients (order of [`Mlp::params_mut`]).
    pub fn loss_and_grads(
        &self,
        x1: ArrayView2<'_, S>,
        y: ArrayView2<'_, S>,
        x0: ArrayView2<'_, S>,
        t: &[S],
    ) -> Result<(S, Vec<Array2<S>>)> {
        let (input, target) = Self::regression_pair(x1, y, x0, t)?;
        let n = x1.nrows();
        let tape = Tape::new();
        let bound = self.mlp.bind(&tape, true);
        let pred = bound.forward(tape.constant(input))?;
        let loss = pred
            .sub(tape.constant(target))
            .square()
            .sum()
            .scale(S::one() / S::c(n as f64));
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("flow-matching loss is {value}")));
        }
        let grads = tape.backward(loss)?;
        Ok((value, bound.grads(&grads)))
    }

    /// RK4 solution at `t = 1` from the rows of `z0`, before any clipping.
    pub fn integrate(&self, target: &LabelVector, z0: Array2<S>, steps: usize) -> Result<Array2<S>> {
        self.integrate_rows(&vec![*target; z0.nrows()], z0, steps)
    }

    /// As [`integrate`](Self::integrate) with one target per row.
    pub fn integrate_rows(&self, targets: &[LabelVector], z0: Array2<S>, steps: usize) -> Result<Array2<S>> {
        if z0.ncols() != DESIGN_DIM || targets.len() != z0.nrows() {
            return Err(Error::Shape(format!(
                "initial states need {DESIGN_DIM} columns and one target per row"
            )));
        }
        let y = self.scaler.matrix::<S>(targets);
        let mut t_col = vec![S::zero(); z0.nrows()];
        rk4(z0, steps, |x, t| {
            t_col.iter_mut().for_each(|v| *v = t);
            self.velocity(x.view(), &t_col, y.view())
        })
    }

    fn decode(&self, targets: &[LabelVector], z0: Array2<S>) -> Result<Vec<NormalizedDesign>> {
        let x = self.integrate_rows(targets, z0, self.config.steps)?;
        Ok(x
            .outer_iter()
            .map(|row| {
                let raw: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                NormalizedDesign::project(&raw)
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_mlp(&self.mlp, &dir.join("field.json"))?;
        write_json(
            &dir.join("manifest.json"),
            &CfmManifest {
                family: Family::Cfm,
                config: self.config.clone(),
                scaler: self.scaler,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CfmManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.family != Family::Cfm {
            return Err(Error::format(dir, "not a CFM checkpoint"));
        }
        let mlp = load_mlp(&dir.join("field.json"))?;
        Self::from_mlp(mlp, manifest.scaler, manifest.config)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CfmManifest {
    family: Family,
    config: CfmConfig,
    scaler: LabelScaler,
}

fn draws<S: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Array2<S>, Vec<S>) {
    let x0 = normal_matrix(n, DESIGN_DIM, rng);
    let t = (0..n).map(|_| S::c(rng.random::<f64>())).collect();
    (x0, t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CfmEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn train_cfm<S: Scalar>(
    data: &Dataset,
    config: &CfmConfig,
    seed: u64,
) -> Result<(VectorFieldNet<S>, Vec<CfmEpochLog>)> {
    require_data(data, "CFM")?;
    if config.steps == 0 {
        return Err(Error::Config("CFM needs at least one integration step".into()));
    }
    let mut rng = rng_from_seed(seed);
    let scaler = LabelScaler::fit(&data.labels)?;
    let mut net = VectorFieldNet::<S>::new(config.clone(), scaler, &mut rng);
    let x_all = data.design_matrix::<S>();
    let y_all = scaler.matrix::<S>(&data.labels);
    let batch = config
        .batch_size
        .unwrap_or_else(|| default_batch_size(Family::Cfm, data.len()));
    let mut adam = Adam::new(AdamConfig::new(config.schedule.base_lr), &net.mlp.param_shapes());
    let mut log = Vec::with_capacity(config.schedule.epochs);
    for epoch in 0..config.schedule.epochs {
        let lr = config.schedule.lr_at(epoch);
        adam.set_lr(lr);
        let (mut total, mut count) = (0.0, 0usize);
        for idx in epoch_batches(data.len(), batch, &mut rng) {
            let x1 = select_rows(&x_all, &idx);
            let y = select_rows(&y_all, &idx);
            let (x0, t) = draws::<S, _>(idx.len(), &mut rng);
            let (loss, grads) = net
                .loss_and_grads(x1.view(), y.view(), x0.view(), &t)
                .map_err(|e| match e {
                    Error::Divergence(m) => Error::Divergence(format!("CFM epoch {epoch}: {m}")),
                    other => other,
                })?;
            adam.step(net.mlp.params_mut(), &grads)?;
            total += loss.as_f64();
            count += 1;
        }
        log.push(CfmEpochLog {
            epoch,
            lr,
            loss: total / count as f64,
        });
    }
    Ok((net, log))
}

impl<S: Scalar> InverseSolver for VectorFieldNet<S> {
    fn family(&self) -> Family {
        Family::Cfm
    }

    fn generate(
        &self,
        target: &LabelVector,
        n: usize,
        rng: &mut BenchRng,
    ) -> Result<Vec<NormalizedDesign>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let z0 = normal_matrix::<S, _>(n, DESIGN_DIM, rng);
        self.decode(&vec![*target; n], z0)
    }

    fn generate_many(
        &self,
        targets: &[LabelVector],
        per_target: usize,
        seed: u64,
    ) -> Vec<Result<Vec<NormalizedDesign>>> {
        latent_generate_many(targets, per_target, seed, DESIGN_DIM, |t, z| self.decode(t, z))
    }
}
