use std::path::{Path, PathBuf};
use std::time::Instant;

use invbench::eval::{
    self, cell_dir_name, dataset_size_sweep, diversity_study, diversity_targets, export_diversity,
    AccuracyReport,
};
use invbench::io::write_json;
use invbench::problem::{AnalyticModel, Dataset, make_dataset};
use invbench::profile::{cell_dataset, cell_model_seed, train_family, Profile, Trained};
use invbench::seed::{derive_seed, streams};
use invbench::solver::{default_batch_size, Family};

use crate::config::{default_out, load_profile, FileConfig, RunConfig};
use crate::CliError;

pub fn gen_data(n: usize, sigma: f64, seed: u64, out: Option<PathBuf>) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::config("--n must be positive"));
    }
    if !(sigma >= 0.0) {
        return Err(CliError::config(format!("--sigma must be non-negative, got {sigma}")));
    }
    let path = out.unwrap_or_else(|| default_out().join("data").join(format!("d{n}_s{seed}.csv")));
    let data = make_dataset(n, sigma, seed)?;
    data.save(&path)?;
    println!("wrote {} samples to {}", n, path.display());
    Ok(())
}

fn batch_summary(family: Family, profile: &Profile, d: usize) -> String {
    let fixed = match family {
        Family::Inn => profile.inn.batch_size,
        Family::Cfm => profile.cfm.batch_size,
        Family::Cwgan => profile.cwgan.batch_size,
        Family::Bayes => {
            return format!("surrogate batch sizes {:?}", profile.bayes_surrogate.batch_sizes);
        }
    };
    format!("batch size {}", fixed.unwrap_or_else(|| default_batch_size(family, d)))
}

pub fn train(model: &str, data: &Path, seed: u64, profile: &str, out: Option<PathBuf>) -> Result<(), CliError> {
    let family: Family = model.parse()?;
    let profile = load_profile(profile)?;
    profile.validate()?;
    let data = Dataset::load(data)?;
    let dir = out.unwrap_or_else(|| {
        default_out()
            .join("train")
            .join(format!("{family}_d{}_s{seed}", data.len()))
    });
    println!("{family}: {} samples, {}", data.len(), batch_summary(family, &profile, data.len()));
    let start = Instant::now();
    let (trained, log) = train_family(family, &data, &profile, seed)?;
    trained.save(&dir)?;
    log.save(&dir.join("train_log.csv"))?;
    println!(
        "trained in {:.1}s, checkpoint in {}",
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

pub fn accuracy_sweep(cfg: FileConfig) -> Result<(), CliError> {
    let run = RunConfig::resolve(cfg)?;
    let p = &run.profile;
    let targets = eval::test_targets(p.test_targets, p.sigma, derive_seed(run.seed, streams::TEST_TARGETS, 0))?;
    println!(
        "{} cells ({} models x {} sizes x {} seeds), {} targets, profile {}",
        run.models.len() * p.sizes.len() * p.seeds.len(),
        run.models.len(),
        p.sizes.len(),
        p.seeds.len(),
        targets.len(),
        p.name
    );
    let results = dataset_size_sweep(
        &run.models,
        &p.sizes,
        &p.seeds,
        p,
        &targets,
        &AnalyticModel,
        run.jobs,
        Some(&run.out),
    )?;
    let mut report = AccuracyReport::default();
    let mut first_error: Option<CliError> = None;
    for (spec, r) in results {
        let name = cell_dir_name(spec.model, spec.d, spec.seed);
        match r {
            Ok(cell) => {
                let m = &cell.meta;
                println!(
                    "{name}: mae {:.4e} {:.4e} {:.4e}{}",
                    m.mae[0],
                    m.mae[1],
                    m.mae[2],
                    if m.flagged { " (flagged)" } else { "" }
                );
                report.merge([cell])?;
            }
            Err(e) => {
                eprintln!("{name}: failed: {e}");
                first_error.get_or_insert_with(|| e.into());
            }
        }
    }
    report.export(&run.out)?;
    println!("reports in {}", run.out.display());
    first_error.map_or(Ok(()), Err)
}

pub fn diversity(cfg: FileConfig, from: Option<PathBuf>) -> Result<(), CliError> {
    let run = RunConfig::resolve(cfg)?;
    let p = &run.profile;
    let d = p.diversity_size;
    let seed = p.seeds[0];
    let mut models = Vec::new();
    if let Some(src) = &from {
        let dirs: Vec<(Family, PathBuf)> = run
            .models
            .iter()
            .map(|&f| (f, src.join("cells").join(cell_dir_name(f, d, seed)).join("model")))
            .collect();
        let missing: Vec<String> = dirs
            .iter()
            .filter(|(_, dir)| !dir.join("manifest.json").is_file())
            .map(|(_, dir)| dir.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CliError::missing(format!("missing checkpoints: {}", missing.join(", "))));
        }
        for (f, dir) in dirs {
            models.push((f, Trained::load(f, &dir)?));
        }
    } else {
        let data = cell_dataset(d, p.sigma, seed)?;
        for &f in &run.models {
            println!("training {f} on {d} samples");
            let (trained, log) = train_family(f, &data, p, cell_model_seed(f, d, seed))?;
            let dir = run.out.join("models").join(cell_dir_name(f, d, seed));
            trained.save(&dir)?;
            log.save(&dir.join("train_log.csv"))?;
            models.push((f, trained));
        }
    }
    let targets = diversity_targets();
    let mut rows = Vec::new();
    for (f, trained) in &models {
        let start = Instant::now();
        let gen_seed = derive_seed(cell_model_seed(*f, d, seed), streams::GENERATION, 1);
        rows.extend(diversity_study(trained.solver(), &targets, p.diversity_samples, &AnalyticModel, gen_seed)?);
        println!("{f}: {} targets x {} designs in {:.1}s", targets.len(), p.diversity_samples, start.elapsed().as_secs_f64());
    }
    export_diversity(&rows, &run.out)?;
    write_json(
        &run.out.join("diversity_meta.json"),
        &serde_json::json!({
            "d": d,
            "seed": seed,
            "samples": p.diversity_samples,
            "models": run.models,
            "config_hash": run.models.iter().map(|&f| (f.to_string(), p.config_hash(f))).collect::<std::collections::BTreeMap<_, _>>(),
        }),
    )?;
    println!("diversity results in {}", run.out.display());
    Ok(())
}

pub fn report(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut report = AccuracyReport::default();
    for dir in inputs {
        if !dir.join("cells").is_dir() {
            return Err(CliError::missing(format!("{} has no cells directory", dir.display())));
        }
        report.merge(AccuracyReport::load_cells(dir)?)?;
    }
    report.export(out)?;
    println!("merged {} cells into {}", report.cells.len(), out.display());
    Ok(())
}
