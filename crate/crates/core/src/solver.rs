//! The contract shared by every inverse-design solver, plus the training
//! plumbing they have in common (label scaling, learning-rate schedule,
//! batch-size table, minibatching).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{Dataset, LabelVector, NormalizedDesign, LABEL_DIM};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_from_seed, streams, BenchRng};

/// Solver families compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Inn,
    Cfm,
    Cwgan,
    #[serde(rename = "bi")]
    Bayes,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Inn, Family::Cfm, Family::Cwgan, Family::Bayes];

    pub fn name(self) -> &'static str {
        match self {
            Family::Inn => "inn",
            Family::Cfm => "cfm",
            Family::Cwgan => "cwgan",
            Family::Bayes => "bi",
        }
    }

    /// Seed stream owned by the family.
    pub fn stream(self) -> u64 {
        match self {
            Family::Inn => streams::INN,
            Family::Cfm => streams::CFM,
            Family::Cwgan => streams::CWGAN,
            Family::Bayes => streams::BAYES,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inn" => Ok(Family::Inn),
            "cfm" => Ok(Family::Cfm),
            "cwgan" | "wgan" => Ok(Family::Cwgan),
            "bi" | "bayes" | "mcmc" => Ok(Family::Bayes),
            other => Err(Error::Config(format!(
                "unknown model family {other:?} (expected inn, cfm, cwgan or bi)"
            ))),
        }
    }
}

/// Dataset sizes of the published study.
pub const PAPER_SIZES: [usize; 7] = [100, 500, 1000, 5000, 10000, 50000, 100000];

const INN_BATCH: [usize; 7] = [5, 5, 20, 50, 500, 1000, 1000];
const CFM_BATCH: [usize; 7] = [50, 100, 100, 500, 500, 2500, 5000];
const WGAN_BATCH: [usize; 7] = [50, 50, 50, 500, 500, 1000, 1000];

/// Training batch size for a family at dataset size `d`. Sizes between grid
/// points use the entry of the largest grid size not exceeding `d`.
pub fn default_batch_size(family: Family, d: usize) -> usize {
    let table = match family {
        Family::Inn => &INN_BATCH,
        Family::Cfm => &CFM_BATCH,
        Family::Cwgan | Family::Bayes => &WGAN_BATCH,
    };
    let idx = PAPER_SIZES.iter().rposition(|&s| s <= d).unwrap_or(0);
    table[idx].min(d.max(1))
}

/// Step schedule: `base_lr`, multiplied by `factor` after each listed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub drops: Vec<usize>,
    pub factor: f64,
}

impl Schedule {
    /// 4800 epochs from 1e-3, divided by ten after epochs 1600 and 3200.
    pub fn flow_default() -> Self {
        Self::scaled(4800)
    }

    /// Same shape as [`flow_default`](Self::flow_default) compressed to `epochs`.
    pub fn scaled(epochs: usize) -> Self {
        Schedule {
            epochs,
            base_lr: 1e-3,
            drops: vec![epochs / 3, 2 * epochs / 3],
            factor: 0.1,
        }
    }

    /// Learning rate used during (0-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.drops.iter().filter(|&&d| epoch >= d).count();
        self.base_lr * self.factor.powi(k as i32)
    }
}

/// Per-label affine standardization fitted on training labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub mean: [f64; LABEL_DIM],
    pub std: [f64; LABEL_DIM],
}

impl LabelScaler {
    pub fn identity() -> Self {
        LabelScaler {
            mean: [0.0; LABEL_DIM],
            std: [1.0; LABEL_DIM],
        }
    }

    /// Constant labels get unit scale.
    pub fn fit(labels: &[LabelVector]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("cannot fit a label scaler on no labels".into()));
        }
        let n = labels.len() as f64;
        let mut mean = [0.0; LABEL_DIM];
        let mut std = [0.0; LABEL_DIM];
        for j in 0..LABEL_DIM {
            mean[j] = labels.iter().map(|y| y.0[j]).sum::<f64>() / n;
            let var = labels.iter().map(|y| (y.0[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(LabelScaler { mean, std })
    }

    pub fn transform(&self, y: &LabelVector) -> [f64; LABEL_DIM] {
        std::array::from_fn(|j| (y.0[j] - self.mean[j]) / self.std[j])
    }

    pub fn inverse(&self, z: &[f64]) -> LabelVector {
        LabelVector(std::array::from_fn(|j| z[j] * self.std[j] + self.mean[j]))
    }

    pub fn matrix<S: Scalar>(&self, labels: &[LabelVector]) -> Array2<S> {
        Array2::from_shape_fn((labels.len(), LABEL_DIM), |(i, j)| {
            S::c((labels[i].0[j] - self.mean[j]) / self.std[j])
        })
    }
}

/// Standard normal `rows × cols` matrix.
pub fn normal_matrix<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || S::c(rng.sample::<f64, _>(StandardNormal)))
}

/// Shuffled minibatch index lists covering `0..n` once; the last batch may be short.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

pub fn select_rows<S: Scalar>(m: &Array2<S>, idx: &[usize]) -> Array2<S> {
    m.select(Axis(0), idx)
}

/// Uniform interface implemented by every solver after training.
pub trait InverseSolver: Send + Sync {
    fn family(&self) -> Family;

    /// `n` designs for one target.
    fn generate(
        &self,
        target: &LabelVector,
        n: usize,
        rng: &mut BenchRng,
    ) -> Result<Vec<NormalizedDesign>>;

    /// `per_target` designs for every target. Target `j` draws from
    /// `derive_seed(seed, GENERATION, j)`, so results do not depend on the
    /// order or number of other targets.
    fn generate_many(
        &self,
        targets: &[LabelVector],
        per_target: usize,
        seed: u64,
    ) -> Vec<Result<Vec<NormalizedDesign>>> {
        targets
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let mut rng = rng_from_seed(target_seed(seed, j));
                self.generate(t, per_target, &mut rng)
            })
            .collect()
    }
}

/// Rows per batched decoding call in [`latent_generate_many`].
pub const GENERATION_CHUNK: usize = 8192;

/// `generate_many` for solvers that map a latent draw and a target to one
/// design. Target `j` draws its `per_target × latent_dim` latent block from
/// `target_seed(seed, j)`, exactly as a lone `generate` call would, and many
/// targets are decoded in one call. A failing chunk is retried target by
/// target so that only the offending targets report errors.
pub fn latent_generate_many<S, F>(
    targets: &[LabelVector],
    per_target: usize,
    seed: u64,
    latent_dim: usize,
    decode: F,
) -> Vec<Result<Vec<NormalizedDesign>>>
where
    S: Scalar,
    F: Fn(&[LabelVector], Array2<S>) -> Result<Vec<NormalizedDesign>>,
{
    if per_target == 0 {
        return targets.iter().map(|_| Ok(Vec::new())).collect();
    }
    let latents: Vec<Array2<S>> = (0..targets.len())
        .map(|j| normal_matrix(per_target, latent_dim, &mut rng_from_seed(target_seed(seed, j))))
        .collect();
    let per_chunk = (GENERATION_CHUNK / per_target).max(1);
    let mut out = Vec::with_capacity(targets.len());
    for (ts, zs) in targets.chunks(per_chunk).zip(latents.chunks(per_chunk)) {
        let rows: Vec<LabelVector> = ts
            .iter()
            .flat_map(|t| std::iter::repeat_n(*t, per_target))
            .collect();
        let views: Vec<_> = zs.iter().map(|z| z.view()).collect();
        let stacked = ndarray::concatenate(Axis(0), &views).expect("equal latent widths");
        match decode(&rows, stacked) {
            Ok(designs) => out.extend(designs.chunks(per_target).map(|c| Ok(c.to_vec()))),
            Err(_) => out.extend(
                ts.iter()
                    .zip(zs)
                    .map(|(t, z)| decode(&vec![*t; per_target], z.clone())),
            ),
        }
    }
    out
}

pub fn target_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, streams::GENERATION, index as u64)
}

/// Fails with [`Error::Empty`] on an empty dataset.
pub fn require_data(ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        Err(Error::Empty(format!("{what}: training set is empty")))
    } else {
        Ok(())
    }
}
