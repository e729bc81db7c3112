//! Surrogate-based Metropolis sampling of the design posterior.
//!
//! The random walk moves over the five continuous coordinates with a
//! clamped Gaussian proposal; for every proposal the `h` level is chosen by
//! scanning all nine levels against the target. Chains for many targets run
//! in lockstep so that one batched model call serves all of them, while each
//! chain draws only from its own generator.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, write_text};
use crate::problem::{h_level, LabelModel, LabelVector, NormalizedDesign, LABEL_DIM, NH_LEVELS};
use crate::seed::{rng_from_seed, BenchRng};
use crate::solver::{target_seed, Family, InverseSolver};

pub const N_CONT: usize = 5;
pub const TRACE_HEADER: &str = "iter,a,h,m,d,l,p,loglik,accepted";
/// Chains advanced together per batched model call.
pub const LOCKSTEP_CHUNK: usize = 256;
/// Minimum post-burn-in steps of a thinned run.
pub const ACCEPTANCE_WINDOW: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    pub proposal_std: f64,
    /// Diagonal of the likelihood covariance, one entry per label.
    pub sigma2: [f64; LABEL_DIM],
    pub burn_in: usize,
    /// Total iterations including burn-in.
    pub iterations: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            proposal_std: 0.025,
            sigma2: [1.75e-6; LABEL_DIM],
            burn_in: 10_000,
            iterations: 60_000,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.proposal_std > 0.0) || self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("proposal std and likelihood variances must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in, self.iterations
            )));
        }
        Ok(())
    }
}

/// `−½ Σ_i (y_i − f_i)² / Σ_ii`.
pub fn log_likelihood(pred: &LabelVector, target: &LabelVector, sigma2: &[f64; LABEL_DIM]) -> f64 {
    -0.5 * (0..LABEL_DIM)
        .map(|i| (target.0[i] - pred.0[i]).powi(2) / sigma2[i])
        .sum::<f64>()
}

/// Gaussian step on every coordinate, clamped to `[0, 1]`.
pub fn propose<R: Rng + ?Sized>(x: &[f64; N_CONT], std: f64, rng: &mut R) -> [f64; N_CONT] {
    let step = Normal::new(0.0, std).expect("positive proposal std");
    x.map(|v| (v + step.sample(rng)).clamp(0.0, 1.0))
}

fn squared_error(pred: &LabelVector, target: &LabelVector) -> f64 {
    (0..LABEL_DIM).map(|i| (pred.0[i] - target.0[i]).powi(2)).sum()
}

/// Index of the smallest squared error among the nine level predictions,
/// earliest on ties.
fn best_level(preds: &[LabelVector], target: &LabelVector) -> usize {
    let mut best = 0;
    let mut best_err = squared_error(&preds[0], target);
    for (k, p) in preds.iter().enumerate().skip(1) {
        let e = squared_error(p, target);
        if e < best_err {
            best = k;
            best_err = e;
        }
    }
    best
}

/// Level whose prediction is closest to `target` for fixed continuous
/// coordinates, with the prediction there.
pub fn select_nh<M: LabelModel + ?Sized>(
    cont: &[f64; N_CONT],
    target: &LabelVector,
    model: &M,
) -> Result<(NormalizedDesign, LabelVector)> {
    let mut out = select_nh_batch(&[*cont], &[*target], model)?;
    Ok(out.pop().expect("one candidate"))
}

fn select_nh_batch<M: LabelModel + ?Sized>(
    conts: &[[f64; N_CONT]],
    targets: &[LabelVector],
    model: &M,
) -> Result<Vec<(NormalizedDesign, LabelVector)>> {
    let candidates: Vec<NormalizedDesign> = conts
        .iter()
        .flat_map(|c| (0..NH_LEVELS).map(move |k| NormalizedDesign::from_parts(c, h_level(k))))
        .collect();
    let preds = model.predict(&candidates)?;
    if preds.len() != candidates.len() {
        return Err(Error::Shape("label model returned the wrong number of predictions".into()));
    }
    Ok(preds
        .chunks(NH_LEVELS)
        .zip(candidates.chunks(NH_LEVELS))
        .zip(targets)
        .map(|((p, c), t)| {
            let k = best_level(p, t);
            (c[k], p[k])
        })
        .collect())
}

/// Current position of a chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    pub design: NormalizedDesign,
    pub loglik: f64,
}

impl State {
    pub fn cont(&self) -> [f64; N_CONT] {
        self.design.continuous()
    }
}

/// Accepts the candidate with probability `min(1, exp(ℓ_cand − ℓ_curr))`.
/// Returns whether it was accepted.
pub fn metropolis_accept<R: Rng + ?Sized>(current: &mut State, candidate: State, rng: &mut R) -> bool {
    let log_ratio = candidate.loglik - current.loglik;
    let accept = log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio;
    if accept {
        *current = candidate;
    }
    accept
}

/// One full Metropolis step for a single chain.
pub fn metropolis_step<M: LabelModel + ?Sized, R: Rng + ?Sized>(
    current: &mut State,
    target: &LabelVector,
    model: &M,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<bool> {
    let cand = propose(&current.cont(), config.proposal_std, rng);
    let (design, pred) = select_nh(&cand, target, model)?;
    let candidate = State {
        design,
        loglik: log_likelihood(&pred, target, &config.sigma2),
    };
    Ok(metropolis_accept(current, candidate, rng))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub design: NormalizedDesign,
    pub loglik: f64,
    pub accepted: bool,
}

/// Which post-burn-in states a chain keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Keep {
    All,
    /// `n` states evenly spaced over the post-burn-in iterations.
    Thinned(usize),
}

/// Post-burn-in record of one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub target: LabelVector,
    pub seed: u64,
    pub trace: Vec<TraceRow>,
    /// Accepted proposals after burn-in.
    pub accepted: usize,
    /// Post-burn-in iterations.
    pub steps: usize,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.steps.max(1) as f64
    }

    pub fn designs(&self) -> Vec<NormalizedDesign> {
        self.trace.iter().map(|r| r.design).collect()
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.trace {
            let x: Vec<String> = r.design.0.iter().map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(out, "{},{},{},{}", r.iter, x.join(","), fmt_f64(r.loglik), u8::from(r.accepted));
        }
        out
    }

    pub fn save_trace(&self, path: &Path) -> Result<()> {
        write_text(path, &self.trace_csv())
    }
}

/// Post-burn-in offsets kept when thinning `available` states down to `n`.
pub fn thin_indices(available: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i * available / n).collect()
}

/// Runs one chain per `(target, seed)` pair in lockstep for `iterations`
/// steps, discarding the first `config.burn_in`. Thinned runs keep exactly
/// the states a full run would keep.
pub fn run_chains<M: LabelModel + ?Sized>(
    targets: &[LabelVector],
    seeds: &[u64],
    model: &M,
    config: &McmcConfig,
    iterations: usize,
    keep: Keep,
) -> Result<Vec<Chain>> {
    config.validate()?;
    if targets.len() != seeds.len() {
        return Err(Error::Shape("one seed per target is required".into()));
    }
    if iterations <= config.burn_in {
        return Err(Error::Config("no iterations left after burn-in".into()));
    }
    let post = iterations - config.burn_in;
    let keep_at: Option<Vec<usize>> = match keep {
        Keep::All => None,
        Keep::Thinned(n) if n > post => {
            return Err(Error::Config(format!("cannot thin {post} states to {n}")))
        }
        Keep::Thinned(n) => Some(thin_indices(post, n)),
    };
    let mut rngs: Vec<BenchRng> = seeds.iter().map(|&s| rng_from_seed(s)).collect();
    let starts: Vec<[f64; N_CONT]> = rngs
        .iter_mut()
        .map(|r| std::array::from_fn(|_| r.random::<f64>()))
        .collect();
    let mut states: Vec<State> = select_nh_batch(&starts, targets, model)?
        .into_iter()
        .zip(targets)
        .map(|((design, pred), t)| State {
            design,
            loglik: log_likelihood(&pred, t, &config.sigma2),
        })
        .collect();
    let mut chains: Vec<Chain> = targets
        .iter()
        .zip(seeds)
        .map(|(t, &seed)| Chain {
            target: *t,
            seed,
            trace: Vec::with_capacity(keep_at.as_ref().map_or(post, |k| k.len())),
            accepted: 0,
            steps: 0,
        })
        .collect();
    // States after the last kept one cannot change any output, so a thinned
    // run stops there, but never before `ACCEPTANCE_WINDOW` post-burn-in steps
    // have fed the acceptance statistic.
    let stop = match &keep_at {
        None => iterations,
        Some(k) => {
            let last = k.last().map_or(0, |&i| i + 1);
            config.burn_in + last.max(ACCEPTANCE_WINDOW.min(post))
        }
    };
    let mut next_keep = 0;
    for iter in 0..stop {
        let cands: Vec<[f64; N_CONT]> = states
            .iter()
            .zip(rngs.iter_mut())
            .map(|(s, r)| propose(&s.cont(), config.proposal_std, r))
            .collect();
        let selected = select_nh_batch(&cands, targets, model)?;
        let record = iter >= config.burn_in
            && keep_at
                .as_ref()
                .is_none_or(|k| next_keep < k.len() && k[next_keep] == iter - config.burn_in);
        for (c, ((state, rng), ((design, pred), t))) in chains
            .iter_mut()
            .zip(states.iter_mut().zip(rngs.iter_mut()).zip(selected.into_iter().zip(targets)))
        {
            let candidate = State {
                design,
                loglik: log_likelihood(&pred, t, &config.sigma2),
            };
            let accepted = metropolis_accept(state, candidate, rng);
            if iter >= config.burn_in {
                c.steps += 1;
                c.accepted += usize::from(accepted);
                if record {
                    c.trace.push(TraceRow {
                        iter,
                        design: state.design,
                        loglik: state.loglik,
                        accepted,
                    });
                }
            }
        }
        if record && keep_at.is_some() {
            next_keep += 1;
        }
    }
    for c in &chains {
        if c.accepted == 0 {
            return Err(Error::Stalled(format!(
                "chain for target {:?} accepted no proposals after burn-in; reduce the proposal std",
                c.target.0
            )));
        }
    }
    Ok(chains)
}

pub fn run_chain<M: LabelModel + ?Sized>(
    target: &LabelVector,
    model: &M,
    config: &McmcConfig,
    seed: u64,
) -> Result<Chain> {
    let mut chains = run_chains(&[*target], &[seed], model, config, config.iterations, Keep::All)?;
    Ok(chains.pop().expect("one chain"))
}

/// Posterior sampler bound to a forward model.
#[derive(Clone, Debug)]
pub struct BayesSolver<M> {
    pub model: M,
    pub config: McmcConfig,
}

impl<M: LabelModel + Send> BayesSolver<M> {
    /// Iterations needed so that at least `n` states follow burn-in.
    fn iterations_for(&self, n: usize) -> usize {
        self.config.iterations.max(self.config.burn_in + n)
    }

    fn sample(&self, targets: &[LabelVector], seeds: &[u64], n: usize) -> Result<Vec<Vec<NormalizedDesign>>> {
        let mut out = Vec::with_capacity(targets.len());
        for (t, s) in targets.chunks(LOCKSTEP_CHUNK).zip(seeds.chunks(LOCKSTEP_CHUNK)) {
            let chains = run_chains(t, s, &self.model, &self.config, self.iterations_for(n), Keep::Thinned(n))?;
            out.extend(chains.into_iter().map(|c| c.designs()));
        }
        Ok(out)
    }
}

impl<M: LabelModel + Send> InverseSolver for BayesSolver<M> {
    fn family(&self) -> Family {
        Family::Bayes
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
        let seed = rng.random::<u64>();
        Ok(self.sample(&[*target], &[seed], n)?.pop().expect("one chain"))
    }

    /// Chains for all targets advance together. Target `j`'s chain is seeded
    /// exactly as a lone [`generate`](InverseSolver::generate) call would be.
    fn generate_many(
        &self,
        targets: &[LabelVector],
        per_target: usize,
        seed: u64,
    ) -> Vec<Result<Vec<NormalizedDesign>>> {
        if per_target == 0 {
            return targets.iter().map(|_| Ok(Vec::new())).collect();
        }
        let seeds: Vec<u64> = (0..targets.len())
            .map(|j| rng_from_seed(target_seed(seed, j)).random::<u64>())
            .collect();
        match self.sample(targets, &seeds, per_target) {
            Ok(all) => all.into_iter().map(Ok).collect(),
            // A failed lockstep batch is retried chain by chain so that only
            // the offending targets are reported.
            Err(_) => targets
                .iter()
                .zip(&seeds)
                .map(|(t, &s)| self.sample(&[*t], &[s], per_target).map(|mut v| v.pop().expect("one chain")))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::AnalyticModel;

    #[test]
    fn likelihood_examples() {
        let y = LabelVector::new(0.1, 0.04, 0.3);
        let s = [1.75e-6; 3];
        assert_eq!(log_likelihood(&y, &y, &s), 0.0);
        let off = LabelVector::new(0.101, 0.04, 0.3);
        let expected = -0.5 * (1e-6 / 1.75e-6);
        assert!((log_likelihood(&off, &y, &s) - expected).abs() < 1e-9);
        assert!((expected + 0.2857).abs() < 1e-4);
        let further = LabelVector::new(0.102, 0.041, 0.3);
        assert!(log_likelihood(&further, &y, &s) < log_likelihood(&off, &y, &s));
    }

    #[test]
    fn proposals_stay_in_the_cube() {
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            let p = propose(&[0.0, 1.0, 0.0, 1.0, 0.5], 0.025, &mut rng);
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    struct IgnoresH;

    impl LabelModel for IgnoresH {
        fn predict(&self, designs: &[NormalizedDesign]) -> Result<Vec<LabelVector>> {
            Ok(designs.iter().map(|d| LabelVector::new(d.0[0], d.0[2], 0.0)).collect())
        }
    }

    #[test]
    fn h_independent_model_selects_lowest_level() {
        let (d, _) = select_nh(&[0.3; 5], &LabelVector::new(0.1, 0.04, 0.0), &IgnoresH).unwrap();
        assert_eq!(d.0[1], 0.0);
    }

    #[test]
    fn selection_matches_exhaustive_scan() {
        let mut rng = rng_from_seed(11);
        let target = LabelVector::new(0.08, 0.04, 0.1);
        for _ in 0..50 {
            let c: [f64; 5] = std::array::from_fn(|_| rng.random());
            let (d, _) = select_nh(&c, &target, &AnalyticModel).unwrap();
            let chosen = squared_error(&crate::problem::exact_labels(&d), &target);
            for k in 0..NH_LEVELS {
                let alt = NormalizedDesign::from_parts(&c, h_level(k));
                assert!(chosen <= squared_error(&crate::problem::exact_labels(&alt), &target));
            }
        }
    }

    #[test]
    fn equal_likelihood_is_always_accepted() {
        let mut rng = rng_from_seed(1);
        let d = NormalizedDesign([0.5; 6]);
        for _ in 0..100 {
            let mut cur = State { design: d, loglik: -3.0 };
            assert!(metropolis_accept(&mut cur, State { design: d, loglik: -3.0 }, &mut rng));
        }
        let mut cur = State { design: d, loglik: 0.0 };
        assert!(!metropolis_accept(&mut cur, State { design: d, loglik: -1e6 }, &mut rng));
    }

    #[test]
    fn burn_in_must_precede_the_end() {
        let cfg = McmcConfig { burn_in: 10, iterations: 10, ..McmcConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn thinning_spreads_evenly() {
        assert_eq!(thin_indices(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(thin_indices(3, 3), vec![0, 1, 2]);
    }

    #[test]
    fn lockstep_matches_lone_chains() {
        let cfg = McmcConfig { burn_in: 50, iterations: 150, sigma2: [1e-4; 3], ..McmcConfig::default() };
        let targets = [LabelVector::new(0.08, 0.04, 0.1), LabelVector::new(0.05, 0.035, -0.3)];
        let both = run_chains(&targets, &[7, 8], &AnalyticModel, &cfg, 150, Keep::All).unwrap();
        let lone = run_chain(&targets[1], &AnalyticModel, &cfg, 8).unwrap();
        assert_eq!(both[1], lone);
        assert_eq!(lone.trace.len(), 100);
        assert!(lone.trace.iter().all(|r| r.iter >= 50));
    }
}
