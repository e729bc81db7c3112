//! Run configuration: a flat TOML file, overridden key by key by flags.
//!
//! ```toml
//! seed = 7                  # global seed; per-cell seeds are `seeds`
//! out = "runs/study"        # output root
//! profile = "desk"          # "desk", "full" or a path to a profile JSON
//! models = ["cfm", "inn"]   # inn, cfm, cwgan, bi
//! sizes = [100, 1000]       # subset of the study grid
//! seeds = [1, 2, 3]
//! sigma = 0.0               # label noise of every generated dataset
//! test_targets = 200
//! diversity_samples = 5000
//! diversity_size = 5000
//! jobs = 1
//! ```

use std::path::{Path, PathBuf};

use invbench::profile::Profile;
use invbench::solver::Family;
use serde::Deserialize;

use crate::CliError;

pub const OUT_ENV: &str = "INVBENCH_OUT";

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub profile: Option<String>,
    pub models: Option<Vec<String>>,
    pub sizes: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub sigma: Option<f64>,
    pub test_targets: Option<usize>,
    pub diversity_samples: Option<usize>,
    pub diversity_size: Option<usize>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::missing(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `over` replace those of `self`.
    pub fn overlay(self, over: FileConfig) -> FileConfig {
        FileConfig {
            seed: over.seed.or(self.seed),
            out: over.out.or(self.out),
            profile: over.profile.or(self.profile),
            models: over.models.or(self.models),
            sizes: over.sizes.or(self.sizes),
            seeds: over.seeds.or(self.seeds),
            sigma: over.sigma.or(self.sigma),
            test_targets: over.test_targets.or(self.test_targets),
            diversity_samples: over.diversity_samples.or(self.diversity_samples),
            diversity_size: over.diversity_size.or(self.diversity_size),
            jobs: over.jobs.or(self.jobs),
        }
    }
}

/// Fully resolved settings of a run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub models: Vec<Family>,
    pub jobs: usize,
    pub profile: Profile,
}

pub fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub fn load_profile(spec: &str) -> Result<Profile, CliError> {
    match spec {
        "desk" | "full" => Ok(Profile::by_name(spec)?),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::missing(format!("cannot read profile {path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("profile {path}: {e}")))
        }
    }
}

pub fn parse_models(names: &[String]) -> Result<Vec<Family>, CliError> {
    let mut out = Vec::new();
    for n in names {
        let f: Family = n.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    if out.is_empty() {
        return Err(CliError::config("no model families selected"));
    }
    Ok(out)
}

impl RunConfig {
    pub fn resolve(cfg: FileConfig) -> Result<Self, CliError> {
        let mut profile = load_profile(cfg.profile.as_deref().unwrap_or("desk"))?;
        if let Some(v) = cfg.sizes {
            profile.sizes = v;
        }
        if let Some(v) = cfg.seeds {
            profile.seeds = v;
        }
        if let Some(v) = cfg.sigma {
            profile.sigma = v;
        }
        if let Some(v) = cfg.test_targets {
            profile.test_targets = v;
        }
        if let Some(v) = cfg.diversity_samples {
            profile.diversity_samples = v;
        }
        if let Some(v) = cfg.diversity_size {
            profile.diversity_size = v;
        }
        profile.validate()?;
        let models = match cfg.models {
            Some(m) => parse_models(&m)?,
            None => Family::ALL.to_vec(),
        };
        let jobs = cfg.jobs.unwrap_or(1);
        if jobs == 0 {
            return Err(CliError::config("jobs must be at least 1"));
        }
        Ok(RunConfig {
            seed: cfg.seed.unwrap_or(0),
            out: cfg.out.unwrap_or_else(default_out),
            models,
            jobs,
            profile,
        })
    }
}
