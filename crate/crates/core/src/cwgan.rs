//! Conditional Wasserstein GAN with gradient penalty.
//!
//! Designs are encoded as 5 continuous coordinates followed by a 9-way
//! one-hot of the `h` level (14 columns). The generator emits sigmoid units
//! for the continuous part and a softmax over the levels; the critic scores
//! `[encoding, y]`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_json, write_json, write_text};
use crate::nn::{concat, load_mlp, save_mlp, Activation, Adam, AdamConfig, BoundMlp, Mlp, Tape, Var, LEAKY_SLOPE};
use crate::problem::{
    h_category, h_level, Dataset, LabelModel, LabelVector, NormalizedDesign, CONTINUOUS, LABEL_DIM,
    NH_LEVELS,
};
use crate::scalar::Scalar;
use crate::seed::{rng_from_seed, BenchRng};
use crate::solver::{
    default_batch_size, epoch_batches, latent_generate_many, normal_matrix, require_data, select_rows, Family,
    InverseSolver, LabelScaler,
};

pub const N_CONT: usize = CONTINUOUS.len();
/// Width of the design encoding seen by the critic.
pub const ENCODING_DIM: usize = N_CONT + NH_LEVELS;
pub const LOG_HEADER: &str = "step,critic_loss,gen_loss,penalty,val_mse";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    pub latent_dim: usize,
    pub generator_layers: usize,
    pub generator_width: usize,
    pub critic_layers: usize,
    pub critic_width: usize,
    pub lambda: f64,
    pub critic_steps: usize,
    pub generator_updates: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: Option<usize>,
    /// Validation interval in generator updates.
    pub val_every: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            latent_dim: 8,
            generator_layers: 5,
            generator_width: 1500,
            critic_layers: 3,
            critic_width: 64,
            lambda: 10.0,
            critic_steps: 5,
            generator_updates: 20_000,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
            batch_size: None,
            val_every: 200,
        }
    }
}

impl GpConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.critic_steps == 0 || self.val_every == 0 {
            return Err(Error::Config("latent_dim, critic_steps and val_every must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("penalty weight must be ≥ 0 and learning rate > 0".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr).with_betas(self.beta1, self.beta2)
    }
}

/// Encodes designs as `[continuous, one-hot(h)]`.
pub fn encode_designs<S: Scalar>(designs: &[NormalizedDesign]) -> Array2<S> {
    let mut out = Array2::zeros((designs.len(), ENCODING_DIM));
    for (i, d) in designs.iter().enumerate() {
        for (k, v) in d.continuous().into_iter().enumerate() {
            out[[i, k]] = S::c(v);
        }
        out[[i, N_CONT + h_category(d.0[crate::problem::NH_INDEX])]] = S::one();
    }
    out
}

/// Inverse of [`encode_designs`]; the level is the arg-max of the categorical
/// block (first index on ties).
pub fn decode_row<S: Scalar>(row: ArrayView1<'_, S>) -> NormalizedDesign {
    let cont: Vec<f64> = (0..N_CONT).map(|k| row[k].as_f64().clamp(0.0, 1.0)).collect();
    let mut best = 0;
    for k in 1..NH_LEVELS {
        if row[N_CONT + k] > row[N_CONT + best] {
            best = k;
        }
    }
    NormalizedDesign::from_parts(&cont, h_level(best))
}

#[derive(Clone, Debug)]
pub struct Generator<S> {
    pub mlp: Mlp<S>,
    pub scaler: LabelScaler,
    pub config: GpConfig,
}

/// Applies the sigmoid/softmax head to raw generator outputs.
fn head<'t, S: Scalar>(raw: Var<'t, S>) -> Var<'t, S> {
    concat(&[
        raw.columns(0, N_CONT).activate(Activation::Sigmoid),
        raw.columns(N_CONT, ENCODING_DIM).activate(Activation::Softmax),
    ])
}

impl<S: Scalar> Generator<S> {
    pub fn new<R: Rng + ?Sized>(config: GpConfig, scaler: LabelScaler, rng: &mut R) -> Self {
        let mut dims = vec![config.latent_dim + LABEL_DIM];
        dims.extend(std::iter::repeat_n(config.generator_width, config.generator_layers));
        dims.push(ENCODING_DIM);
        Generator {
            mlp: Mlp::new(&dims, Activation::Relu, Activation::Linear, rng),
            scaler,
            config,
        }
    }

    fn input(&self, z: ArrayView2<'_, S>, y: ArrayView2<'_, S>) -> Result<Array2<S>> {
        if z.nrows() != y.nrows() || z.ncols() != self.config.latent_dim || y.ncols() != LABEL_DIM {
            return Err(Error::Shape(format!(
                "generator input: z {:?}, y {:?}",
                z.dim(),
                y.dim()
            )));
        }
        ndarray::concatenate(ndarray::Axis(1), &[z, y]).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Encoded designs for latent rows `z` and standardized labels `y`.
    pub fn sample(&self, z: ArrayView2<'_, S>, y: ArrayView2<'_, S>) -> Result<Array2<S>> {
        let tape = Tape::new();
        let out = self.forward_on(&tape, &self.mlp.bind(&tape, false), z, y)?;
        Ok((*out.value()).clone())
    }

    fn decode(&self, targets: &[LabelVector], z: Array2<S>) -> Result<Vec<NormalizedDesign>> {
        let y = self.scaler.matrix::<S>(targets);
        let enc = self.sample(z.view(), y.view())?;
        Ok(enc
            .outer_iter()
            .map(|r| decode_row(r))
            .collect())
    }

    fn forward_on<'t>(
        &self,
        tape: &'t Tape<S>,
        bound: &BoundMlp<'t, S>,
        z: ArrayView2<'_, S>,
        y: ArrayView2<'_, S>,
    ) -> Result<Var<'t, S>> {
        Ok(head(bound.forward(tape.constant(self.input(z, y)?))?))
    }
}

/// Critic network over `[encoding, y]`.
pub fn new_critic<S: Scalar, R: Rng + ?Sized>(config: &GpConfig, rng: &mut R) -> Mlp<S> {
    let mut dims = vec![ENCODING_DIM + LABEL_DIM];
    dims.extend(std::iter::repeat_n(config.critic_width, config.critic_layers));
    dims.push(1);
    Mlp::new(&dims, Activation::LeakyRelu(LEAKY_SLOPE), Activation::Linear, rng)
}

fn penalty_var<'t, S: Scalar>(
    critic: &BoundMlp<'t, S>,
    real: Var<'t, S>,
    fake: Var<'t, S>,
    y: Var<'t, S>,
    eps: &[S],
    lambda: S,
) -> Result<Var<'t, S>> {
    let (n, w) = real.shape();
    if fake.shape() != (n, w) || eps.len() != n || y.shape().0 != n {
        return Err(Error::Shape("gradient penalty: batch shapes differ".into()));
    }
    let e = Array2::from_shape_fn((n, w), |(i, _)| eps[i]);
    let one_minus = e.mapv(|v| S::one() - v);
    let interp = real.mask(e).add(fake.mask(one_minus));
    let input = concat(&[interp, y]);
    let g = critic.input_gradient(input, 0)?.columns(0, w);
    let norm = g.square().row_sum().sqrt();
    Ok(norm.add_scalar(-S::one()).square().mean().scale(lambda))
}

/// `λ · mean_i (‖∇_x̃ critic(x̃_i, y_i)‖ − 1)²` with `x̃ = ε·real + (1 − ε)·fake`.
/// The gradient is taken over the encoding columns only.
pub fn gradient_penalty<S: Scalar>(
    critic: &Mlp<S>,
    real: &Array2<S>,
    fake: &Array2<S>,
    y: &Array2<S>,
    eps: &[S],
    lambda: S,
) -> Result<S> {
    let tape = Tape::new();
    let bound = critic.bind(&tape, false);
    let p = penalty_var(
        &bound,
        tape.constant(real.clone()),
        tape.constant(fake.clone()),
        tape.constant(y.clone()),
        eps,
        lambda,
    )?;
    Ok(p.item())
}

/// Penalty value and its gradient with respect to the critic parameters
/// (order of [`Mlp::params_mut`]).
pub fn gradient_penalty_grads<S: Scalar>(
    critic: &Mlp<S>,
    real: &Array2<S>,
    fake: &Array2<S>,
    y: &Array2<S>,
    eps: &[S],
    lambda: S,
) -> Result<(S, Vec<Array2<S>>)> {
    let tape = Tape::new();
    let bound = critic.bind(&tape, true);
    let p = penalty_var(
        &bound,
        tape.constant(real.clone()),
        tape.constant(fake.clone()),
        tape.constant(y.clone()),
        eps,
        lambda,
    )?;
    let grads = tape.backward(p)?;
    Ok((p.item(), bound.grads(&grads)))
}

/// Critic loss with its parameter gradients.
pub fn critic_loss_grads<S: Scalar>(
    critic: &Mlp<S>,
    real: &Array2<S>,
    fake: &Array2<S>,
    y: &Array2<S>,
    eps: &[S],
    lambda: S,
) -> Result<(S, Vec<Array2<S>>)> {
    let tape = Tape::new();
    let bound = critic.bind(&tape, true);
    let (total, _, _) = critic_objective(&tape, &bound, real, fake, y, eps, lambda)?;
    let grads = tape.backward(total)?;
    Ok((total.item(), bound.grads(&grads)))
}

fn score<'t, S: Scalar>(critic: &BoundMlp<'t, S>, x: Var<'t, S>, y: Var<'t, S>) -> Result<Var<'t, S>> {
    critic.forward(concat(&[x, y]))
}

/// Wasserstein term and penalty of the critic objective:
/// `−(mean critic(real) − mean critic(fake)) + penalty`.
pub struct CriticLoss<S> {
    pub total: S,
    pub wasserstein: S,
    pub penalty: S,
}

/// Critic loss for encoded `fake` designs.
pub fn critic_loss<S: Scalar>(
    critic: &Mlp<S>,
    real: &Array2<S>,
    fake: &Array2<S>,
    y: &Array2<S>,
    eps: &[S],
    lambda: S,
) -> Result<CriticLoss<S>> {
    let tape = Tape::new();
    let bound = critic.bind(&tape, false);
    let (total, w, p) = critic_objective(&tape, &bound, real, fake, y, eps, lambda)?;
    Ok(CriticLoss {
        total: total.item(),
        wasserstein: w.item(),
        penalty: p.item(),
    })
}

fn critic_objective<'t, S: Scalar>(
    tape: &'t Tape<S>,
    critic: &BoundMlp<'t, S>,
    real: &Array2<S>,
    fake: &Array2<S>,
    y: &Array2<S>,
    eps: &[S],
    lambda: S,
) -> Result<(Var<'t, S>, Var<'t, S>, Var<'t, S>)> {
    let (r, f, yv) = (tape.constant(real.clone()), tape.constant(fake.clone()), tape.constant(y.clone()));
    let w = score(critic, f, yv)?.mean().sub(score(critic, r, yv)?.mean());
    let p = penalty_var(critic, r, f, yv, eps, lambda)?;
    Ok((w.add(p), w, p))
}

/// `−mean critic(G(z, y), y)`.
pub fn generator_loss<S: Scalar>(
    critic: &Mlp<S>,
    generator: &Generator<S>,
    z: &Array2<S>,
    y: &Array2<S>,
) -> Result<S> {
    let fake = generator.sample(z.view(), y.view())?;
    let scores = critic.predict(ndarray::concatenate(ndarray::Axis(1), &[fake.view(), y.view()]).map_err(|e| Error::Shape(e.to_string()))?.view())?;
    Ok(-scores.mean().unwrap_or(S::zero()))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct GanLogRow {
    pub step: usize,
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub penalty: f64,
    pub val_mse: f64,
}

pub fn log_csv(rows: &[GanLogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            fmt_f64(r.critic_loss),
            fmt_f64(r.gen_loss),
            fmt_f64(r.penalty),
            fmt_f64(r.val_mse)
        );
    }
    out
}

/// Trained generator plus the critic and training record.
pub struct GanRun<S> {
    pub generator: Generator<S>,
    pub critic: Mlp<S>,
    pub log: Vec<GanLogRow>,
    /// Generator update at which the retained generator was recorded.
    pub best_step: usize,
    pub best_val_mse: f64,
    /// Critic/generator update counts actually performed.
    pub critic_updates: usize,
    pub generator_updates: usize,
}

/// Mean squared error between the oracle labels of one generated design per
/// validation target and the targets, in standardized label units.
pub fn validation_mse<S: Scalar, M: LabelModel + ?Sized>(
    generator: &Generator<S>,
    validation: &Dataset,
    oracle: &M,
    z: &Array2<S>,
) -> Result<f64> {
    let y = generator.scaler.matrix::<S>(&validation.labels);
    let enc = generator.sample(z.view(), y.view())?;
    let designs: Vec<NormalizedDesign> = enc
        .outer_iter()
        .map(|r| decode_row(r))
        .collect();
    let achieved = oracle.predict(&designs)?;
    let s = &generator.scaler;
    let mut total = 0.0;
    for (a, t) in achieved.iter().zip(&validation.labels) {
        for j in 0..LABEL_DIM {
            total += ((a.0[j] - t.0[j]) / s.std[j]).powi(2);
        }
    }
    Ok(total / (validation.len() * LABEL_DIM) as f64)
}

/// Trains with `critic_steps` critic updates per generator update and keeps
/// the generator with the lowest validation MSE.
pub fn train_cwgan<S: Scalar, M: LabelModel + ?Sized>(
    data: &Dataset,
    validation: &Dataset,
    oracle: &M,
    config: &GpConfig,
    seed: u64,
) -> Result<GanRun<S>> {
    require_data(data, "CWGAN")?;
    if validation.is_empty() {
        return Err(Error::Empty("CWGAN: validation set is empty".into()));
    }
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let scaler = LabelScaler::fit(&data.labels)?;
    let mut generator = Generator::<S>::new(config.clone(), scaler, &mut rng);
    let mut critic = new_critic::<S, _>(config, &mut rng);
    let real_all = encode_designs::<S>(&data.designs);
    let y_all = scaler.matrix::<S>(&data.labels);
    let batch = config
        .batch_size
        .unwrap_or_else(|| default_batch_size(Family::Cwgan, data.len()));
    let lambda = S::c(config.lambda);
    let mut adam_c = Adam::new(config.adam(), &critic.param_shapes());
    let mut adam_g = Adam::new(config.adam(), &generator.mlp.param_shapes());
    // Fixed latent draws keep validation scores comparable across checkpoints.
    let val_z = normal_matrix::<S, _>(validation.len(), config.latent_dim, &mut rng);

    let mut batches = Vec::new().into_iter();
    let mut next_batch = |rng: &mut BenchRng| -> Vec<usize> {
        match batches.next() {
            Some(b) => b,
            None => {
                batches = epoch_batches(data.len(), batch, rng).into_iter();
                batches.next().expect("non-empty dataset")
            }
        }
    };

    let mut best = (generator.clone(), validation_mse(&generator, validation, oracle, &val_z)?, 0);
    let mut log = Vec::new();
    let (mut c_sum, mut g_sum, mut p_sum, mut c_count, mut g_count) = (0.0, 0.0, 0.0, 0usize, 0usize);
    let mut critic_updates = 0;
    for step in 1..=config.generator_updates {
        for _ in 0..config.critic_steps {
            let idx = next_batch(&mut rng);
            let real = select_rows(&real_all, &idx);
            let y = select_rows(&y_all, &idx);
            let z = normal_matrix::<S, _>(idx.len(), config.latent_dim, &mut rng);
            let fake = generator.sample(z.view(), y.view())?;
            let eps: Vec<S> = (0..idx.len()).map(|_| S::c(rng.random::<f64>())).collect();
            let tape = Tape::new();
            let bound = critic.bind(&tape, true);
            let (total, _, p) = critic_objective(&tape, &bound, &real, &fake, &y, &eps, lambda)?;
            let value = total.item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("CWGAN critic loss is {value} at update {step}")));
            }
            c_sum += value.as_f64();
            p_sum += p.item().as_f64();
            c_count += 1;
            let grads = tape.backward(total)?;
            let g = bound.grads(&grads);
            drop(bound);
            drop(tape);
            adam_c.step(critic.params_mut(), &g)?;
            critic_updates += 1;
        }
        let idx = next_batch(&mut rng);
        let y = select_rows(&y_all, &idx);
        let z = normal_matrix::<S, _>(idx.len(), config.latent_dim, &mut rng);
        {
            let tape = Tape::new();
            let gen_bound = generator.mlp.bind(&tape, true);
            let critic_bound = critic.bind(&tape, false);
            let fake = generator.forward_on(&tape, &gen_bound, z.view(), y.view())?;
            let loss = score(&critic_bound, fake, tape.constant(y.clone()))?.mean().neg();
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("CWGAN generator loss is {value} at update {step}")));
            }
            g_sum += value.as_f64();
            g_count += 1;
            let grads = tape.backward(loss)?;
            let g = gen_bound.grads(&grads);
            drop(gen_bound);
            drop(critic_bound);
            drop(tape);
            adam_g.step(generator.mlp.params_mut(), &g)?;
        }
        if step % config.val_every == 0 || step == config.generator_updates {
            let val = validation_mse(&generator, validation, oracle, &val_z)?;
            log.push(GanLogRow {
                step,
                critic_loss: c_sum / c_count.max(1) as f64,
                gen_loss: g_sum / g_count.max(1) as f64,
                penalty: p_sum / c_count.max(1) as f64,
                val_mse: val,
            });
            (c_sum, g_sum, p_sum, c_count, g_count) = (0.0, 0.0, 0.0, 0, 0);
            if val < best.1 {
                best = (generator.clone(), val, step);
            }
        }
    }
    Ok(GanRun {
        generator: best.0,
        critic,
        log,
        best_step: best.2,
        best_val_mse: best.1,
        critic_updates,
        generator_updates: config.generator_updates,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GanManifest {
    family: Family,
    config: GpConfig,
    scaler: LabelScaler,
    best_step: usize,
    best_val_mse: f64,
}

impl<S: Scalar> GanRun<S> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_mlp(&self.generator.mlp, &dir.join("generator.json"))?;
        save_mlp(&self.critic, &dir.join("critic.json"))?;
        write_text(&dir.join("train_log.csv"), &log_csv(&self.log))?;
        write_json(
            &dir.join("manifest.json"),
            &GanManifest {
                family: Family::Cwgan,
                config: self.generator.config.clone(),
                scaler: self.generator.scaler,
                best_step: self.best_step,
                best_val_mse: self.best_val_mse,
            },
        )
    }
}

impl<S: Scalar> Generator<S> {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: GanManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.family != Family::Cwgan {
            return Err(Error::format(dir, "not a CWGAN checkpoint"));
        }
        let mlp: Mlp<S> = load_mlp(&dir.join("generator.json"))?;
        if mlp.in_dim() != manifest.config.latent_dim + LABEL_DIM || mlp.out_dim() != ENCODING_DIM {
            return Err(Error::format(dir, "generator shape does not match its manifest"));
        }
        Ok(Generator {
            mlp,
            scaler: manifest.scaler,
            config: manifest.config,
        })
    }
}

impl<S: Scalar> InverseSolver for Generator<S> {
    fn family(&self) -> Family {
        Family::Cwgan
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
        let z = normal_matrix::<S, _>(n, self.config.latent_dim, rng);
        self.decode(&vec![*target; n], z)
    }

    fn generate_many(
        &self,
        targets: &[LabelVector],
        per_target: usize,
        seed: u64,
    ) -> Vec<Result<Vec<NormalizedDesign>>> {
        latent_generate_many(targets, per_target, seed, self.config.latent_dim, |t, z| self.decode(t, z))
    }
}
