#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use invbench::bayes::McmcConfig;
use invbench::profile::Profile;
use invbench::solver::Schedule;

pub fn invbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invbench"))
        .args(args)
        .env_remove("INVBENCH_OUT")
        .output()
        .expect("run invbench")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn ok(args: &[&str]) -> Output {
    let out = invbench(args);
    assert!(
        out.status.success(),
        "invbench {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Seconds-scale settings for every family.
pub fn tiny_profile() -> Profile {
    let mut p = Profile::desk();
    p.name = "tiny".into();
    p.sizes = vec![100];
    p.seeds = vec![1];
    p.test_targets = 12;
    p.diversity_samples = 6;
    p.diversity_size = 100;
    p.validation_n = 20;
    p.inn.hidden_width = 8;
    p.inn.schedule = Schedule::scaled(2);
    p.cfm.hidden_width = 8;
    p.cfm.hidden_layers = 2;
    p.cfm.schedule = Schedule::scaled(2);
    p.cfm.steps = 10;
    p.cwgan.generator_width = 8;
    p.cwgan.critic_width = 8;
    p.cwgan.generator_updates = 10;
    p.cwgan.val_every = 5;
    p.bayes_surrogate.hidden_width = 8;
    p.bayes_surrogate.steps = 50;
    p.bayes_surrogate.eval_every = 25;
    p.mcmc = McmcConfig {
        burn_in: 50,
        iterations: 200,
        ..McmcConfig::default()
    };
    p
}

pub fn write_profile(dir: &Path, profile: &Profile) -> PathBuf {
    let path = dir.join(format!("{}.json", profile.name));
    std::fs::write(&path, serde_json::to_string_pretty(profile).unwrap()).unwrap();
    path
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
