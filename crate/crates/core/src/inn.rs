//! Invertible network of affine coupling blocks, `x ∈ R^6 ↔ [y, z] ∈ R^3 × R^3`.
//!
//! Each block first permutes the coordinates with a fixed table, splits them
//! into `u1 = x[0..3]`, `u2 = x[3..6]` and applies
//!
//! ```text
//! v1 = u1 ⊙ exp(s2(u2)) + t2(u2)
//! v2 = u2 ⊙ exp(s1(v1)) + t1(v1)
//! ```
//!
//! with every `s` soft-clamped to `(−c, c)` through `c·tanh(s/c)`.
//! The network is trained on a supervised label loss plus MMD terms in both
//! directions and used generatively as `x = g(y, z)`, `z ~ N(0, I)`.

use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::mmd::mmd_var;
use crate::nn::{concat, load_mlp, save_mlp, Activation, Adam, AdamConfig, BoundMlp, Mlp, Tape, Var};
use crate::problem::{Dataset, LabelVector, NormalizedDesign, DESIGN_DIM, LABEL_DIM};
use crate::scalar::Scalar;
use crate::seed::{rng_from_seed, BenchRng};
use crate::solver::{
    default_batch_size, epoch_batches, latent_generate_many, normal_matrix, require_data, select_rows, Family,
    InverseSolver, LabelScaler, Schedule,
};

/// Coordinates transformed by the first half of a block.
pub const SPLIT: usize = 3;
pub const LATENT_DIM: usize = DESIGN_DIM - LABEL_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnConfig {
    pub blocks: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub clamp: f64,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub lambda_z: f64,
    /// Scale applied to the Glorot draw of every subnetwork's output layer.
    pub head_init_scale: f64,
    pub schedule: Schedule,
    /// `None` picks the batch size from the dataset-size table.
    pub batch_size: Option<usize>,
}

impl Default for InnConfig {
    fn default() -> Self {
        InnConfig {
            blocks: 10,
            hidden_width: 115,
            hidden_layers: 2,
            clamp: 2.0,
            lambda_x: 20.0,
            lambda_y: 40.0,
            lambda_z: 4.0,
            head_init_scale: 0.1,
            schedule: Schedule::flow_default(),
            batch_size: None,
        }
    }
}

/// One affine coupling block: `s2, t2` act on `u2`, `s1, t1` on `v1`.
#[derive(Clone, Debug)]
pub struct CouplingBlock<S> {
    pub s1: Mlp<S>,
    pub s2: Mlp<S>,
    pub t1: Mlp<S>,
    pub t2: Mlp<S>,
}

impl<S: Scalar> CouplingBlock<S> {
    pub fn new<R: Rng + ?Sized>(config: &InnConfig, rng: &mut R) -> Self {
        let mut dims = vec![SPLIT];
        dims.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        dims.push(DESIGN_DIM - SPLIT);
        let net = |rng: &mut R| {
            let mut m = Mlp::new(&dims, Activation::Relu, Activation::Linear, rng);
            let scale = S::c(config.head_init_scale);
            let last = m.params_mut().into_iter().rev().nth(1).expect("weight");
            last.mapv_inplace(|w| w * scale);
            m
        };
        CouplingBlock {
            s1: net(rng),
            s2: net(rng),
            t1: net(rng),
            t2: net(rng),
        }
    }

    fn nets(&self) -> [&Mlp<S>; 4] {
        [&self.s1, &self.s2, &self.t1, &self.t2]
    }

    fn nets_mut(&mut self) -> [&mut Mlp<S>; 4] {
        [&mut self.s1, &mut self.s2, &mut self.t1, &mut self.t2]
    }

    /// Makes every subnetwork output zero, turning the block into the identity.
    pub fn zero_heads(&mut self) {
        for net in self.nets_mut() {
            net.zero_output_layer();
        }
    }
}

struct BoundBlock<'t, S: Scalar> {
    s1: BoundMlp<'t, S>,
    s2: BoundMlp<'t, S>,
    t1: BoundMlp<'t, S>,
    t2: BoundMlp<'t, S>,
}

/// Coupling blocks interleaved with fixed coordinate permutations.
#[derive(Clone, Debug)]
pub struct InnModel<S> {
    pub blocks: Vec<CouplingBlock<S>>,
    /// `perms[k][j]` is the input coordinate that lands at position `j` before block `k`.
    pub perms: Vec<Vec<usize>>,
    pub config: InnConfig,
    pub scaler: LabelScaler,
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

impl<S: Scalar> InnModel<S> {
    pub fn new<R: Rng + ?Sized>(config: InnConfig, scaler: LabelScaler, rng: &mut R) -> Self {
        let blocks = (0..config.blocks)
            .map(|_| CouplingBlock::new(&config, rng))
            .collect();
        let perms = (0..config.blocks)
            .map(|_| {
                let mut p: Vec<usize> = (0..DESIGN_DIM).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        InnModel {
            blocks,
            perms,
            config,
            scaler,
        }
    }

    pub fn set_identity_permutations(&mut self) {
        for p in &mut self.perms {
            *p = (0..DESIGN_DIM).collect();
        }
    }

    fn clamp<'t>(&self, s: Var<'t, S>) -> Var<'t, S> {
        let c = S::c(self.config.clamp);
        s.scale(S::one() / c).tanh().scale(c)
    }

    fn bind<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> Vec<BoundBlock<'t, S>> {
        self.blocks
            .iter()
            .map(|b| BoundBlock {
                s1: b.s1.bind(tape, trainable),
                s2: b.s2.bind(tape, trainable),
                t1: b.t1.bind(tape, trainable),
                t2: b.t2.bind(tape, trainable),
            })
            .collect()
    }

    fn block_forward<'t>(
        &self,
        block: &BoundBlock<'t, S>,
        x: Var<'t, S>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let u1 = x.columns(0, SPLIT);
        let u2 = x.columns(SPLIT, DESIGN_DIM);
        let s2 = self.clamp(block.s2.forward(u2)?);
        let v1 = u1.mul(s2.exp()).add(block.t2.forward(u2)?);
        let s1 = self.clamp(block.s1.forward(v1)?);
        let v2 = u2.mul(s1.exp()).add(block.t1.forward(v1)?);
        let logdet = s2.row_sum().add(s1.row_sum());
        Ok((concat(&[v1, v2]), logdet))
    }

    fn block_inverse<'t>(&self, block: &BoundBlock<'t, S>, v: Var<'t, S>) -> Result<Var<'t, S>> {
        let v1 = v.columns(0, SPLIT);
        let v2 = v.columns(SPLIT, DESIGN_DIM);
        let s1 = self.clamp(block.s1.forward(v1)?);
        let u2 = v2.sub(block.t1.forward(v1)?).mul(s1.neg().exp());
        let s2 = self.clamp(block.s2.forward(u2)?);
        let u1 = v1.sub(block.t2.forward(u2)?).mul(s2.neg().exp());
        Ok(concat(&[u1, u2]))
    }

    fn forward_bound<'t>(
        &self,
        bound: &[BoundBlock<'t, S>],
        x: Var<'t, S>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let mut h = x;
        let mut logdet: Option<Var<'t, S>> = None;
        for (block, perm) in bound.iter().zip(&self.perms) {
            let (out, ld) = self.block_forward(block, h.permute(perm))?;
            h = out;
            logdet = Some(match logdet {
                Some(l) => l.add(ld),
                None => ld,
            });
        }
        let logdet = logdet.unwrap_or_else(|| x.tape().constant(Array2::zeros((x.shape().0, 1))));
        Ok((h, logdet))
    }

    fn inverse_bound<'t>(&self, bound: &[BoundBlock<'t, S>], v: Var<'t, S>) -> Result<Var<'t, S>> {
        let mut h = v;
        for (block, perm) in bound.iter().zip(&self.perms).rev() {
            h = self.block_inverse(block, h)?.permute(&invert_perm(perm));
        }
        Ok(h)
    }

    fn check_width(x: ArrayView2<'_, S>) -> Result<()> {
        if x.ncols() != DESIGN_DIM {
            return Err(Error::Shape(format!("INN acts on {DESIGN_DIM} columns, got {}", x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite INN input".into()));
        }
        Ok(())
    }

    /// `x ↦ [y, z]` row-wise (labels in standardized units).
    pub fn forward(&self, x: ArrayView2<'_, S>) -> Result<Array2<S>> {
        Ok(self.forward_with_logdet(x)?.0)
    }

    /// Forward map plus `log |det ∂f/∂x|` per row.
    pub fn forward_with_logdet(&self, x: ArrayView2<'_, S>) -> Result<(Array2<S>, Array2<S>)> {
        Self::check_width(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (out, ld) = self.forward_bound(&bound, tape.constant(x.to_owned()))?;
        let out = (*out.value()).clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("INN forward produced non-finite values".into()));
        }
        Ok((out, (*ld.value()).clone()))
    }

    /// `[y, z] ↦ x` row-wise.
    pub fn inverse(&self, yz: ArrayView2<'_, S>) -> Result<Array2<S>> {
        Self::check_width(yz)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = self.inverse_bound(&bound, tape.constant(yz.to_owned()))?;
        let out = (*out.value()).clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("INN inverse produced non-finite values".into()));
        }
        Ok(out)
    }

    /// Forward map of block `k` alone (no permutation) with its log-determinant.
    pub fn block_map(&self, k: usize, x: ArrayView2<'_, S>) -> Result<(Array2<S>, Array2<S>)> {
        Self::check_width(x)?;
        let tape = Tape::new();
        let b = &self.blocks[k];
        let bound = BoundBlock {
            s1: b.s1.bind(&tape, false),
            s2: b.s2.bind(&tape, false),
            t1: b.t1.bind(&tape, false),
            t2: b.t2.bind(&tape, false),
        };
        let (out, ld) = self.block_forward(&bound, tape.constant(x.to_owned()))?;
        Ok(((*out.value()).clone(), (*ld.value()).clone()))
    }

    /// `x = g(y, z)` per row, clipped to the cube with `h` snapped.
    fn decode(&self, targets: &[LabelVector], z: Array2<S>) -> Result<Vec<NormalizedDesign>> {
        let y = self.scaler.matrix::<S>(targets);
        let yz = concatenate(Axis(1), &[y.view(), z.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        let x = self.inverse(yz.view())?;
        Ok(x
            .outer_iter()
            .map(|row| {
                let raw: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                NormalizedDesign::project(&raw)
            })
            .collect())
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<S>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.nets_mut().into_iter().flat_map(|n| n.params_mut()))
            .collect()
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .flat_map(|b| b.nets().into_iter().flat_map(|n| n.param_shapes()))
            .collect()
    }

    fn bound_grads(bound: &[BoundBlock<'_, S>], grads: &crate::nn::Gradients<S>) -> Vec<Array2<S>> {
        bound
            .iter()
            .flat_map(|b| {
                [&b.s1, &b.s2, &b.t1, &b.t2]
                    .into_iter()
                    .flat_map(|n| n.grads(grads))
            })
            .collect()
    }

    /// `λY·MSE(y-head, y) + λZ·MMD([y-head, z-head], [y, z])` with labels
    /// already standardized.
    fn loss_forward<'t>(
        &self,
        tape: &'t Tape<S>,
        bound: &[BoundBlock<'t, S>],
        x: &Array2<S>,
        y: &Array2<S>,
        z: &Array2<S>,
    ) -> Result<Var<'t, S>> {
        let (out, _) = self.forward_bound(bound, tape.constant(x.clone()))?;
        let y_head = out.columns(0, LABEL_DIM);
        let yv = tape.constant(y.clone());
        let mse = y_head.sub(yv).square().mean();
        let reference = tape.constant(concatenate(Axis(1), &[y.view(), z.view()]).map_err(|e| Error::Shape(e.to_string()))?);
        let dist = mmd_var(out, reference)?;
        Ok(mse
            .scale(S::c(self.config.lambda_y))
            .add(dist.scale(S::c(self.config.lambda_z))))
    }

    /// `λX·MMD(g(y, z), x)`.
    fn loss_reverse<'t>(
        &self,
        tape: &'t Tape<S>,
        bound: &[BoundBlock<'t, S>],
        x: &Array2<S>,
        y: &Array2<S>,
        z: &Array2<S>,
    ) -> Result<Var<'t, S>> {
        let yz = concatenate(Axis(1), &[y.view(), z.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        let generated = self.inverse_bound(bound, tape.constant(yz))?;
        let dist = mmd_var(generated, tape.constant(x.clone()))?;
        Ok(dist.scale(S::c(self.config.lambda_x)))
    }

    /// Evaluates both losses without recording gradients.
    pub fn losses(&self, x: &Array2<S>, y: &Array2<S>, z: &Array2<S>) -> Result<(S, S)> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let f = self.loss_forward(&tape, &bound, x, y, z)?.item();
        let r = self.loss_reverse(&tape, &bound, x, y, z)?.item();
        Ok((f, r))
    }

    fn descend(
        &mut self,
        adam: &mut Adam<S>,
        which: Direction,
        x: &Array2<S>,
        y: &Array2<S>,
        z: &Array2<S>,
    ) -> Result<S> {
        let tape = Tape::new();
        let bound = self.bind(&tape, true);
        let loss = match which {
            Direction::Forward => self.loss_forward(&tape, &bound, x, y, z)?,
            Direction::Reverse => self.loss_reverse(&tape, &bound, x, y, z)?,
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("{which:?} loss is {value}")));
        }
        let grads = tape.backward(loss)?;
        let g = Self::bound_grads(&bound, &grads);
        drop(bound);
        drop(tape);
        adam.step(self.params_mut(), &g)?;
        Ok(value)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (k, b) in self.blocks.iter().enumerate() {
            for (name, net) in ["s1", "s2", "t1", "t2"].iter().zip(b.nets()) {
                save_mlp(net, &dir.join(format!("block{k:02}_{name}.json")))?;
            }
        }
        write_json(
            &dir.join("manifest.json"),
            &InnManifest {
                family: Family::Inn,
                config: self.config.clone(),
                permutations: self.perms.clone(),
                scaler: self.scaler,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: InnManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.family != Family::Inn || manifest.permutations.len() != manifest.config.blocks {
            return Err(Error::format(dir, "not an INN checkpoint"));
        }
        let mut blocks = Vec::with_capacity(manifest.config.blocks);
        for k in 0..manifest.config.blocks {
            let net = |name: &str| load_mlp::<S>(&dir.join(format!("block{k:02}_{name}.json")));
            blocks.push(CouplingBlock {
                s1: net("s1")?,
                s2: net("s2")?,
                t1: net("t1")?,
                t2: net("t2")?,
            });
        }
        Ok(InnModel {
            blocks,
            perms: manifest.permutations,
            config: manifest.config,
            scaler: manifest.scaler,
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Direction {
    Forward,
    Reverse,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InnManifest {
    family: Family,
    config: InnConfig,
    permutations: Vec<Vec<usize>>,
    scaler: LabelScaler,
}

/// Per-epoch record of the mean training losses.
#[derive(Clone, Debug, PartialEq)]
pub struct InnEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_forward: f64,
    pub loss_reverse: f64,
}

/// Trains an INN, alternating one forward-loss and one reverse-loss Adam step
/// per minibatch with fresh latent draws for each batch.
pub fn train_inn<S: Scalar>(
    data: &Dataset,
    config: &InnConfig,
    seed: u64,
) -> Result<(InnModel<S>, Vec<InnEpochLog>)> {
    require_data(data, "INN")?;
    let mut rng = rng_from_seed(seed);
    let scaler = LabelScaler::fit(&data.labels)?;
    let mut model = InnModel::<S>::new(config.clone(), scaler, &mut rng);
    let x_all = data.design_matrix::<S>();
    let y_all = scaler.matrix::<S>(&data.labels);
    let batch = config
        .batch_size
        .unwrap_or_else(|| default_batch_size(Family::Inn, data.len()));
    let mut adam = Adam::new(AdamConfig::new(config.schedule.base_lr), &model.param_shapes());
    let mut log = Vec::with_capacity(config.schedule.epochs);
    for epoch in 0..config.schedule.epochs {
        let lr = config.schedule.lr_at(epoch);
        adam.set_lr(lr);
        let (mut lf, mut lr_sum, mut count) = (0.0, 0.0, 0usize);
        for idx in epoch_batches(data.len(), batch, &mut rng) {
            let x = select_rows(&x_all, &idx);
            let y = select_rows(&y_all, &idx);
            let z = normal_matrix::<S, _>(idx.len(), LATENT_DIM, &mut rng);
            let f = model
                .descend(&mut adam, Direction::Forward, &x, &y, &z)
                .map_err(|e| diverged(e, epoch))?;
            let r = model
                .descend(&mut adam, Direction::Reverse, &x, &y, &z)
                .map_err(|e| diverged(e, epoch))?;
            lf += f.as_f64();
            lr_sum += r.as_f64();
            count += 1;
        }
        log.push(InnEpochLog {
            epoch,
            lr,
            loss_forward: lf / count as f64,
            loss_reverse: lr_sum / count as f64,
        });
    }
    Ok((model, log))
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::Divergence(msg) | Error::Domain(msg) => {
            Error::Divergence(format!("INN epoch {epoch}: {msg}"))
        }
        other => other,
    }
}

impl<S: Scalar> InverseSolver for InnModel<S> {
    fn family(&self) -> Family {
        Family::Inn
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
        let z = normal_matrix::<S, _>(n, LATENT_DIM, rng);
        self.decode(&vec![*target; n], z)
    }

    fn generate_many(
        &self,
        targets: &[LabelVector],
        per_target: usize,
        seed: u64,
    ) -> Vec<Result<Vec<NormalizedDesign>>> {
        latent_generate_many(targets, per_target, seed, LATENT_DIM, |t, z| self.decode(t, z))
    }
}
