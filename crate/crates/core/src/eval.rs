//! Accuracy and diversity studies with the analytic model as ground truth.
//!
//! A benchmark cell is one `(family, d, seed)` triple. Cells are independent,
//! are written to their own directories and merged afterwards; the merged
//! CSV files only depend on the cells, never on scheduling or timing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_f64, read_json, read_text, write_json, write_text};
use crate::problem::{make_dataset, LabelModel, LabelVector, NormalizedDesign, LABEL_DIM, LABEL_NAMES};
use crate::profile::{cell_dataset, cell_model_seed, train_family, validate_sizes, Profile, Trained};
use crate::seed::{derive_seed, streams};
use crate::solver::{Family, InverseSolver};

pub const ACCURACY_HEADER: &str = "model,d,label,mae";
pub const ACCURACY_SEEDS_HEADER: &str = "model,d,seed,label,mae";
pub const PARITY_HEADER: &str = "model,d,label,target,achieved";
pub const DIVERSITY_HEADER: &str = "model,target_um,target_dp,target_g,label,mean,std";
pub const PARAMS_HEADER: &str = "a,h,m,d,l,p";
/// Share of failed targets above which a cell is flagged.
pub const FAILURE_LIMIT: f64 = 0.01;

/// Per-target outcome of the accuracy study.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParityRecord {
    pub target: LabelVector,
    pub achieved: LabelVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyOutcome {
    pub mae: [f64; LABEL_DIM],
    pub records: Vec<ParityRecord>,
    /// Indices of targets for which generation failed.
    pub failures: Vec<usize>,
}

impl AccuracyOutcome {
    pub fn flagged(&self) -> bool {
        let n = self.records.len() + self.failures.len();
        self.failures.len() as f64 > FAILURE_LIMIT * n as f64
    }
}

/// One design per target, scored by `oracle`:
/// `ε_i = (1/n) Σ_j |y_i^(j) − oracle_i(x^(j))|`. Failed targets are excluded.
pub fn accuracy_mae<M: LabelModel + ?Sized>(
    solver: &dyn InverseSolver,
    targets: &[LabelVector],
    oracle: &M,
    seed: u64,
) -> Result<AccuracyOutcome> {
    if targets.is_empty() {
        return Err(Error::Empty("accuracy study without targets".into()));
    }
    let generated = solver.generate_many(targets, 1, seed);
    let mut designs = Vec::with_capacity(targets.len());
    let mut kept = Vec::with_capacity(targets.len());
    let mut failures = Vec::new();
    for (j, r) in generated.into_iter().enumerate() {
        match r.ok().and_then(|v| v.into_iter().next()) {
            Some(d) => {
                designs.push(d);
                kept.push(targets[j]);
            }
            None => failures.push(j),
        }
    }
    if designs.is_empty() {
        return Err(Error::Empty("generation failed for every target".into()));
    }
    let achieved = oracle.predict(&designs)?;
    let records: Vec<ParityRecord> = kept
        .into_iter()
        .zip(achieved)
        .map(|(target, achieved)| ParityRecord { target, achieved })
        .collect();
    let n = records.len() as f64;
    let mae = std::array::from_fn(|i| {
        records
            .iter()
            .map(|r| (r.target.0[i] - r.achieved.0[i]).abs())
            .sum::<f64>()
            / n
    });
    Ok(AccuracyOutcome { mae, records, failures })
}

/// Targets of the accuracy study: labels of a held-out sample.
pub fn test_targets(n: usize, sigma: f64, seed: u64) -> Result<Vec<LabelVector>> {
    Ok(make_dataset(n, sigma, derive_seed(seed, streams::TEST_TARGETS, 0))?.labels)
}

/// Everything recorded for one accuracy cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellMeta {
    pub model: Family,
    pub d: usize,
    pub seed: u64,
    pub model_seed: u64,
    pub config_hash: String,
    pub mae: [f64; LABEL_DIM],
    pub targets: usize,
    pub failures: Vec<usize>,
    pub flagged: bool,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl CellMeta {
    pub fn key(&self) -> (Family, usize, u64) {
        (self.model, self.d, self.seed)
    }

    pub fn dir_name(&self) -> String {
        cell_dir_name(self.model, self.d, self.seed)
    }
}

pub fn cell_dir_name(model: Family, d: usize, seed: u64) -> String {
    format!("{model}_d{d}_s{seed}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyCell {
    pub meta: CellMeta,
    pub records: Vec<ParityRecord>,
}

fn parity_rows(out: &mut String, model: Family, d: usize, records: &[ParityRecord]) {
    for (i, name) in LABEL_NAMES.iter().enumerate() {
        for r in records {
            let _ = writeln!(
                out,
                "{model},{d},{name},{},{}",
                fmt_f64(r.target.0[i]),
                fmt_f64(r.achieved.0[i])
            );
        }
    }
}

impl AccuracyCell {
    pub fn parity_csv(&self) -> String {
        let mut out = format!("{PARITY_HEADER}\n");
        parity_rows(&mut out, self.meta.model, self.meta.d, &self.records);
        out
    }

    /// `dir/cell.json` and `dir/parity.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("parity.csv"), &self.parity_csv())?;
        write_json(&dir.join("cell.json"), &self.meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CellMeta = read_json(&dir.join("cell.json"))?;
        let path = dir.join("parity.csv");
        let text = read_text(&path)?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(PARITY_HEADER) {
            return Err(Error::format(&path, "unexpected parity header"));
        }
        let mut per_label: [Vec<(f64, f64)>; LABEL_DIM] = Default::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::format(&path, format!("bad row {line:?}")));
            }
            let label = LABEL_NAMES
                .iter()
                .position(|n| *n == f[2])
                .ok_or_else(|| Error::format(&path, format!("unknown label {:?}", f[2])))?;
            per_label[label].push((parse_f64(f[3], &path)?, parse_f64(f[4], &path)?));
        }
        let n = per_label[0].len();
        if per_label.iter().any(|v| v.len() != n) {
            return Err(Error::format(&path, "labels have different record counts"));
        }
        let records = (0..n)
            .map(|k| ParityRecord {
                target: LabelVector(std::array::from_fn(|i| per_label[i][k].0)),
                achieved: LabelVector(std::array::from_fn(|i| per_label[i][k].1)),
            })
            .collect();
        Ok(AccuracyCell { meta, records })
    }
}

/// Merged accuracy results keyed by `(family, d, seed)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyReport {
    pub cells: BTreeMap<(Family, usize, u64), AccuracyCell>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AccuracyReport {
    /// Adds cells, rejecting keys already present.
    pub fn merge(&mut self, cells: impl IntoIterator<Item = AccuracyCell>) -> Result<()> {
        for c in cells {
            let key = c.meta.key();
            if self.cells.contains_key(&key) {
                return Err(Error::Config(format!(
                    "duplicate benchmark cell {}",
                    cell_dir_name(key.0, key.1, key.2)
                )));
            }
            self.cells.insert(key, c);
        }
        Ok(())
    }

    /// Median MAE over seeds per `(family, d)`.
    pub fn median_mae(&self) -> BTreeMap<(Family, usize), [f64; LABEL_DIM]> {
        let mut groups: BTreeMap<(Family, usize), Vec<[f64; LABEL_DIM]>> = BTreeMap::new();
        for c in self.cells.values() {
            groups.entry((c.meta.model, c.meta.d)).or_default().push(c.meta.mae);
        }
        groups
            .into_iter()
            .map(|(k, v)| {
                let m = std::array::from_fn(|i| median(&mut v.iter().map(|x| x[i]).collect::<Vec<_>>()));
                (k, m)
            })
            .collect()
    }

    pub fn accuracy_csv(&self) -> String {
        let mut out = format!("{ACCURACY_HEADER}\n");
        for ((model, d), mae) in self.median_mae() {
            for (name, v) in LABEL_NAMES.iter().zip(mae) {
                let _ = writeln!(out, "{model},{d},{name},{}", fmt_f64(v));
            }
        }
        out
    }

    pub fn accuracy_seeds_csv(&self) -> String {
        let mut out = format!("{ACCURACY_SEEDS_HEADER}\n");
        for c in self.cells.values() {
            for (name, v) in LABEL_NAMES.iter().zip(c.meta.mae) {
                let _ = writeln!(out, "{},{},{},{name},{}", c.meta.model, c.meta.d, c.meta.seed, fmt_f64(v));
            }
        }
        out
    }

    /// Parity records of the lowest seed of every `(family, d)`.
    pub fn parity_csv(&self) -> String {
        let mut out = format!("{PARITY_HEADER}\n");
        let mut seen = std::collections::BTreeSet::new();
        for c in self.cells.values() {
            if seen.insert((c.meta.model, c.meta.d)) {
                parity_rows(&mut out, c.meta.model, c.meta.d, &c.records);
            }
        }
        out
    }

    pub fn metadata(&self) -> Vec<CellMeta> {
        self.cells.values().map(|c| c.meta.clone()).collect()
    }

    /// `accuracy.csv`, `accuracy_seeds.csv`, `parity.csv`, `accuracy_meta.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("accuracy.csv"), &self.accuracy_csv())?;
        write_text(&dir.join("accuracy_seeds.csv"), &self.accuracy_seeds_csv())?;
        write_text(&dir.join("parity.csv"), &self.parity_csv())?;
        write_json(&dir.join("accuracy_meta.json"), &self.metadata())
    }

    /// Loads every `*/cell.json` directory under `root/cells`.
    pub fn load_cells(root: &Path) -> Result<Vec<AccuracyCell>> {
        let cells_dir = root.join("cells");
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&cells_dir)
            .map_err(|e| Error::io(&cells_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("cell.json").is_file())
            .collect();
        dirs.sort();
        dirs.iter().map(|d| AccuracyCell::load(d)).collect()
    }
}

/// A benchmark job.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellSpec {
    pub model: Family,
    pub d: usize,
    pub seed: u64,
}

/// Runs `job` over `items` on up to `jobs` threads; results keep input order.
pub fn run_parallel<T, R, F>(items: &[T], jobs: usize, job: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("job ran"))
        .collect()
}

/// Trains and evaluates one cell. When `out` is given, the checkpoint,
/// training log and cell files go to `out/cells/<cell>/`.
pub fn run_accuracy_cell<M: LabelModel + ?Sized>(
    spec: CellSpec,
    profile: &Profile,
    targets: &[LabelVector],
    oracle: &M,
    out: Option<&Path>,
) -> Result<(AccuracyCell, Trained)> {
    let data = cell_dataset(spec.d, profile.sigma, spec.seed)?;
    let model_seed = cell_model_seed(spec.model, spec.d, spec.seed);
    let start = Instant::now();
    let (trained, log) = train_family(spec.model, &data, profile, model_seed)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let outcome = accuracy_mae(
        trained.solver(),
        targets,
        oracle,
        derive_seed(model_seed, streams::GENERATION, 0),
    )?;
    let eval_seconds = start.elapsed().as_secs_f64();
    let cell = AccuracyCell {
        meta: CellMeta {
            model: spec.model,
            d: spec.d,
            seed: spec.seed,
            model_seed,
            config_hash: profile.config_hash(spec.model),
            mae: outcome.mae,
            targets: targets.len(),
            flagged: outcome.flagged(),
            failures: outcome.failures,
            train_seconds,
            eval_seconds,
        },
        records: outcome.records,
    };
    if let Some(root) = out {
        let dir = root.join("cells").join(cell.meta.dir_name());
        trained.save(&dir.join("model"))?;
        log.save(&dir.join("train_log.csv"))?;
        cell.save(&dir)?;
    }
    Ok((cell, trained))
}

/// One model per `(family, size, seed)`, all scored on the same targets.
/// Failed cells are returned with their errors instead of aborting the sweep.
#[allow(clippy::too_many_arguments)]
pub fn dataset_size_sweep<M: LabelModel + ?Sized>(
    families: &[Family],
    sizes: &[usize],
    seeds: &[u64],
    profile: &Profile,
    targets: &[LabelVector],
    oracle: &M,
    jobs: usize,
    out: Option<&Path>,
) -> Result<Vec<(CellSpec, Result<AccuracyCell>)>> {
    validate_sizes(sizes)?;
    let mut specs = Vec::new();
    for &model in families {
        for &d in sizes {
            for &seed in seeds {
                specs.push(CellSpec { model, d, seed });
            }
        }
    }
    let results = run_parallel(&specs, jobs, |&spec| {
        run_accuracy_cell(spec, profile, targets, oracle, out).map(|(c, _)| c)
    });
    Ok(specs.into_iter().zip(results).collect())
}

pub const DIVERSITY_UM: [f64; 3] = [0.02, 0.06, 0.10];
pub const DIVERSITY_DP: [f64; 3] = [0.033, 0.040, 0.045];
pub const DIVERSITY_G: [f64; 3] = [-0.5, 0.0, 0.5];

/// All 27 target combinations, `U_M` outermost and `G` innermost.
pub fn diversity_targets() -> Vec<LabelVector> {
    let mut out = Vec::with_capacity(27);
    for um in DIVERSITY_UM {
        for dp in DIVERSITY_DP {
            for g in DIVERSITY_G {
                out.push(LabelVector::new(um, dp, g));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityRow {
    pub model: Family,
    pub target: LabelVector,
    pub mean: [f64; LABEL_DIM],
    /// Population standard deviation.
    pub std: [f64; LABEL_DIM],
    pub samples: Vec<NormalizedDesign>,
}

/// Mean and population standard deviation of each label.
pub fn label_moments(labels: &[LabelVector]) -> ([f64; LABEL_DIM], [f64; LABEL_DIM]) {
    let Some(first) = labels.first() else {
        return ([0.0; LABEL_DIM], [0.0; LABEL_DIM]);
    };
    let n = labels.len() as f64;
    // Shifted by the first sample so a constant set has exact moments.
    let shift: [f64; LABEL_DIM] =
        std::array::from_fn(|i| labels.iter().map(|y| y.0[i] - first.0[i]).sum::<f64>() / n);
    let mean = std::array::from_fn(|i| first.0[i] + shift[i]);
    let std = std::array::from_fn(|i| {
        let var = labels.iter().map(|y| (y.0[i] - first.0[i] - shift[i]).powi(2)).sum::<f64>() / n;
        var.sqrt()
    });
    (mean, std)
}

/// `n` designs per target, scored by `oracle`.
pub fn diversity_study<M: LabelModel + ?Sized>(
    solver: &dyn InverseSolver,
    targets: &[LabelVector],
    n: usize,
    oracle: &M,
    seed: u64,
) -> Result<Vec<DiversityRow>> {
    if n == 0 {
        return Err(Error::Empty("diversity study with zero samples per target".into()));
    }
    let generated = solver.generate_many(targets, n, seed);
    let mut rows = Vec::with_capacity(targets.len());
    for (t, r) in targets.iter().zip(generated) {
        let samples = r?;
        let achieved = oracle.predict(&samples)?;
        let (mean, std) = label_moments(&achieved);
        rows.push(DiversityRow {
            model: solver.family(),
            target: *t,
            mean,
            std,
            samples,
        });
    }
    Ok(rows)
}

pub fn diversity_csv(rows: &[DiversityRow]) -> String {
    let mut out = format!("{DIVERSITY_HEADER}\n");
    for r in rows {
        for (i, name) in LABEL_NAMES.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{name},{},{}",
                r.model,
                fmt_f64(r.target.0[0]),
                fmt_f64(r.target.0[1]),
                fmt_f64(r.target.0[2]),
                fmt_f64(r.mean[i]),
                fmt_f64(r.std[i])
            );
        }
    }
    out
}

pub fn params_csv(samples: &[NormalizedDesign]) -> String {
    let mut out = format!("{PARAMS_HEADER}\n");
    for s in samples {
        let f: Vec<String> = s.0.iter().map(|&v| fmt_f64(v)).collect();
        let _ = writeln!(out, "{}", f.join(","));
    }
    out
}

/// `diversity.csv` plus `params/<model>_t<index>.csv` per row, indexed by the
/// row's position among its model's targets.
pub fn export_diversity(rows: &[DiversityRow], dir: &Path) -> Result<()> {
    write_text(&dir.join("diversity.csv"), &diversity_csv(rows))?;
    let mut counters: BTreeMap<Family, usize> = BTreeMap::new();
    for r in rows {
        let k = counters.entry(r.model).or_default();
        write_text(
            &dir.join("params").join(format!("{}_t{:02}.csv", r.model, k)),
            &params_csv(&r.samples),
        )?;
        *k += 1;
    }
    Ok(())
}
