//! Benchmark profiles and the family dispatcher.
//!
//! `desk` fits a single workstation core; `full` carries the published
//! hyperparameters and dataset grid.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{BayesSolver, McmcConfig};
use crate::cfm::{train_cfm, CfmConfig, VectorFieldNet};
use crate::cwgan::{train_cwgan, GanRun, Generator, GpConfig};
use crate::error::{Error, Result};
use crate::inn::{train_inn, InnConfig, InnModel};
use crate::io::{read_json, write_json, write_text};
use crate::problem::{make_dataset, AnalyticModel, Dataset};
use crate::seed::{derive_seed, streams};
use crate::solver::{Family, InverseSolver, Schedule, PAPER_SIZES};
use crate::surrogate::{train_surrogates, SurrogateConfig, SurrogateSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub sigma: f64,
    /// Accuracy-study targets drawn from a held-out sample.
    pub test_targets: usize,
    /// Designs per target in the diversity study.
    pub diversity_samples: usize,
    /// Dataset size of the models compared in the diversity study.
    pub diversity_size: usize,
    /// CWGAN validation set size.
    pub validation_n: usize,
    /// Fraction of a BI training set held out to select surrogate checkpoints.
    pub bayes_holdout: f64,
    pub inn: InnConfig,
    pub cfm: CfmConfig,
    pub cwgan: GpConfig,
    pub bayes_surrogate: SurrogateConfig,
    pub mcmc: McmcConfig,
}

impl Profile {
    pub fn full() -> Self {
        Profile {
            name: "full".into(),
            sizes: PAPER_SIZES.to_vec(),
            seeds: vec![1, 2, 3],
            sigma: 0.0,
            test_targets: 1000,
            diversity_samples: 5000,
            diversity_size: 5000,
            validation_n: 1000,
            bayes_holdout: 0.1,
            inn: InnConfig::default(),
            cfm: CfmConfig::default(),
            cwgan: GpConfig {
                generator_updates: 150_000,
                ..GpConfig::default()
            },
            bayes_surrogate: SurrogateConfig::bayes(),
            mcmc: McmcConfig::default(),
        }
    }

    /// Narrower networks and shorter schedules; same losses, samplers and
    /// batch-size table.
    pub fn desk() -> Self {
        Profile {
            name: "desk".into(),
            sizes: vec![100, 1000, 10000],
            test_targets: 200,
            validation_n: 500,
            inn: InnConfig {
                hidden_width: 32,
                schedule: Schedule::scaled(40),
                ..InnConfig::default()
            },
            cfm: CfmConfig {
                hidden_width: 128,
                hidden_layers: 4,
                schedule: Schedule::scaled(1500),
                ..CfmConfig::default()
            },
            cwgan: GpConfig {
                generator_layers: 3,
                generator_width: 128,
                generator_updates: 3000,
                ..GpConfig::default()
            },
            bayes_surrogate: SurrogateConfig {
                steps: 10_000,
                batch_sizes: vec![50],
                ..SurrogateConfig::bayes()
            },
            ..Profile::full()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_sizes(&self.sizes)?;
        if !PAPER_SIZES.contains(&self.diversity_size) {
            return Err(Error::Config(format!("diversity size {} is not a study size", self.diversity_size)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.test_targets == 0 || self.validation_n == 0 {
            return Err(Error::Config("test_targets and validation_n must be positive".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config(format!("noise level {}", self.sigma)));
        }
        if !(self.bayes_holdout > 0.0 && self.bayes_holdout < 1.0) {
            return Err(Error::Config("bayes_holdout must lie in (0, 1)".into()));
        }
        self.mcmc.validate()
    }

    /// Stable digest of the settings that shape one family's models.
    pub fn config_hash(&self, family: Family) -> String {
        let value = match family {
            Family::Inn => serde_json::to_value(&self.inn),
            Family::Cfm => serde_json::to_value(&self.cfm),
            Family::Cwgan => serde_json::to_value((&self.cwgan, self.validation_n)),
            Family::Bayes => serde_json::to_value((&self.bayes_surrogate, &self.mcmc, self.bayes_holdout)),
        }
        .expect("configs serialize");
        let text = format!("{}|{}|{}", family, self.sigma, value);
        Sha256::digest(text.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Every size must belong to the published grid.
pub fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("no dataset sizes given".into()));
    }
    if let Some(bad) = sizes.iter().find(|s| !PAPER_SIZES.contains(s)) {
        return Err(Error::Config(format!(
            "dataset size {bad} is not in the study grid {PAPER_SIZES:?}"
        )));
    }
    Ok(())
}

/// Training set of one benchmark cell.
pub fn cell_dataset(d: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    make_dataset(d, sigma, derive_seed(seed, streams::DATASET, d as u64))
}

/// Seed of the model trained in one benchmark cell.
pub fn cell_model_seed(family: Family, d: usize, seed: u64) -> u64 {
    derive_seed(seed, family.stream(), d as u64)
}

/// A trained model of any family.
pub enum Trained {
    Inn(InnModel<f64>),
    Cfm(VectorFieldNet<f64>),
    Cwgan(GanRun<f64>),
    /// Generators reloaded from disk carry no critic or log.
    CwganGenerator(Generator<f64>),
    Bayes(BayesSolver<SurrogateSet<f64>>),
}

impl Trained {
    pub fn family(&self) -> Family {
        self.solver().family()
    }

    pub fn solver(&self) -> &dyn InverseSolver {
        match self {
            Trained::Inn(m) => m,
            Trained::Cfm(m) => m,
            Trained::Cwgan(run) => &run.generator,
            Trained::CwganGenerator(g) => g,
            Trained::Bayes(b) => b,
        }
    }

    /// Writes the checkpoint directory (manifest, networks, logs).
    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Trained::Inn(m) => m.save(dir),
            Trained::Cfm(m) => m.save(dir),
            Trained::Cwgan(run) => run.save(dir),
            Trained::CwganGenerator(_) => Err(Error::Capability(
                "a reloaded generator has no critic to save".into(),
            )),
            Trained::Bayes(b) => {
                b.model.save(&dir.join("surrogates"))?;
                write_json(&dir.join("manifest.json"), &BayesManifest { family: Family::Bayes, mcmc: b.config.clone() })
            }
        }
    }

    pub fn load(family: Family, dir: &Path) -> Result<Self> {
        Ok(match family {
            Family::Inn => Trained::Inn(InnModel::load(dir)?),
            Family::Cfm => Trained::Cfm(VectorFieldNet::load(dir)?),
            Family::Cwgan => Trained::CwganGenerator(Generator::load(dir)?),
            Family::Bayes => {
                let m: BayesManifest = read_json(&dir.join("manifest.json"))?;
                if m.family != Family::Bayes {
                    return Err(Error::format(dir, "not a BI checkpoint"));
                }
                Trained::Bayes(BayesSolver {
                    model: SurrogateSet::load(&dir.join("surrogates"))?,
                    config: m.mcmc,
                })
            }
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BayesManifest {
    family: Family,
    mcmc: McmcConfig,
}

/// Training record written next to a checkpoint.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// CSV text, header first.
    pub csv: String,
}

impl TrainLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.csv)
    }
}

/// Trains `family` on `data` with the profile's settings. `seed` is the
/// model seed; auxiliary sets (CWGAN validation, BI holdout) derive from it.
pub fn train_family(family: Family, data: &Dataset, profile: &Profile, seed: u64) -> Result<(Trained, TrainLog)> {
    use std::fmt::Write as _;
    let mut csv = String::new();
    let trained = match family {
        Family::Inn => {
            let (m, log) = train_inn::<f64>(data, &profile.inn, seed)?;
            csv.push_str("epoch,lr,loss_forward,loss_reverse\n");
            for r in log {
                let _ = writeln!(csv, "{},{:e},{:e},{:e}", r.epoch, r.lr, r.loss_forward, r.loss_reverse);
            }
            Trained::Inn(m)
        }
        Family::Cfm => {
            let (m, log) = train_cfm::<f64>(data, &profile.cfm, seed)?;
            csv.push_str("epoch,lr,loss\n");
            for r in log {
                let _ = writeln!(csv, "{},{:e},{:e}", r.epoch, r.lr, r.loss);
            }
            Trained::Cfm(m)
        }
        Family::Cwgan => {
            let validation = make_dataset(
                profile.validation_n,
                profile.sigma,
                derive_seed(seed, streams::VALIDATION, 0),
            )?;
            let run = train_cwgan::<f64, _>(data, &validation, &AnalyticModel, &profile.cwgan, seed)?;
            csv = crate::cwgan::log_csv(&run.log);
            Trained::Cwgan(run)
        }
        Family::Bayes => {
            let n = data.len();
            let hold = ((n as f64 * profile.bayes_holdout).round() as usize).clamp(1, n.saturating_sub(1).max(1));
            if n < 2 {
                return Err(Error::Empty("BI needs at least two training points".into()));
            }
            let test = data.subset(&(0..hold).collect::<Vec<_>>());
            let train = data.subset(&(hold..n).collect::<Vec<_>>());
            let set = train_surrogates::<f64>(&train, &test, &profile.bayes_surrogate, seed)?;
            csv.push_str("label,batch_size,best_step,test_mae\n");
            for j in 0..crate::problem::LABEL_DIM {
                let _ = writeln!(
                    csv,
                    "{},{},{},{:e}",
                    crate::problem::LABEL_NAMES[j],
                    set.meta.batch_size[j],
                    set.meta.best_step[j],
                    set.meta.test_mae[j]
                );
            }
            Trained::Bayes(BayesSolver {
                model: set,
                config: profile.mcmc.clone(),
            })
        }
    };
    Ok((trained, TrainLog { csv }))
}
