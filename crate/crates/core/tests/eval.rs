use invbench::error::Error;
use invbench::eval::{
    accuracy_mae, diversity_study, diversity_targets, export_diversity, label_moments, AccuracyCell, AccuracyReport,
    CellMeta, ParityRecord,
};
use invbench::problem::{exact_labels, make_dataset, AnalyticModel, LabelVector, NormalizedDesign};
use invbench::seed::BenchRng;
use invbench::solver::{Family, InverseSolver};
use proptest::prelude::*;
use rand::Rng;

/// Returns the table design whose exact label is closest to the target.
struct Lookup {
    designs: Vec<NormalizedDesign>,
    labels: Vec<LabelVector>,
}

impl Lookup {
    fn new(n: usize, seed: u64) -> Self {
        let data = make_dataset(n, 0.0, seed).unwrap();
        Lookup {
            labels: data.designs.iter().map(exact_labels).collect(),
            designs: data.designs,
        }
    }
}

impl InverseSolver for Lookup {
    fn family(&self) -> Family {
        Family::Inn
    }

    fn generate(&self, target: &LabelVector, n: usize, _: &mut BenchRng) -> invbench::Result<Vec<NormalizedDesign>> {
        let dist = |y: &LabelVector| (0..3).map(|j| (y.0[j] - target.0[j]).powi(2)).sum::<f64>();
        let best = (0..self.labels.len())
            .min_by(|&a, &b| dist(&self.labels[a]).total_cmp(&dist(&self.labels[b])))
            .unwrap();
        Ok(vec![self.designs[best]; n])
    }
}

/// Uniform random designs; fails for targets with negative `G`.
struct Picky;

impl InverseSolver for Picky {
    fn family(&self) -> Family {
        Family::Cwgan
    }

    fn generate(&self, target: &LabelVector, n: usize, rng: &mut BenchRng) -> invbench::Result<Vec<NormalizedDesign>> {
        if target.g() < 0.0 {
            return Err(Error::Divergence("negative G".into()));
        }
        Ok((0..n).map(|_| NormalizedDesign::project(&std::array::from_fn::<f64, 6, _>(|_| rng.random()))).collect())
    }
}

fn targets(n: usize, seed: u64) -> Vec<LabelVector> {
    make_dataset(n, 0.0, seed).unwrap().labels
}

fn meta(model: Family, d: usize, seed: u64, mae: [f64; 3]) -> CellMeta {
    CellMeta {
        model,
        d,
        seed,
        model_seed: seed * 7 + 1,
        config_hash: "0011223344556677".into(),
        mae,
        targets: 2,
        failures: vec![],
        flagged: false,
        train_seconds: 1.25,
        eval_seconds: 0.5,
    }
}

fn cell(model: Family, d: usize, seed: u64, mae: [f64; 3]) -> AccuracyCell {
    let t = LabelVector::new(0.1 / 3.0, 0.04, -0.2);
    AccuracyCell {
        meta: meta(model, d, seed, mae),
        records: vec![
            ParityRecord { target: t, achieved: LabelVector::new(0.1, 1e-17, 0.7) },
            ParityRecord { target: t, achieved: t },
        ],
    }
}

#[test]
fn perfect_targets_score_zero() {
    let solver = Lookup::new(300, 1);
    let perfect = solver.labels[..50].to_vec();
    let out = accuracy_mae(&solver, &perfect, &AnalyticModel, 0).unwrap();
    assert_eq!(out.mae, [0.0; 3]);
    assert!(out.failures.is_empty() && !out.flagged());
}

#[test]
fn adding_a_perfect_target_does_not_raise_the_error() {
    let solver = Lookup::new(300, 2);
    let mut t = targets(40, 3);
    let before = accuracy_mae(&solver, &t, &AnalyticModel, 0).unwrap().mae;
    t.push(solver.labels[7]);
    let after = accuracy_mae(&solver, &t, &AnalyticModel, 0).unwrap().mae;
    for j in 0..3 {
        assert!(after[j] <= before[j]);
    }
}

#[test]
fn failures_are_excluded_and_flagged() {
    let t = targets(100, 4);
    let negatives = t.iter().filter(|y| y.g() < 0.0).count();
    assert!(negatives > 1);
    let out = accuracy_mae(&Picky, &t, &AnalyticModel, 5).unwrap();
    assert_eq!(out.failures.len(), negatives);
    assert_eq!(out.records.len(), 100 - negatives);
    assert!(out.flagged());
    let all_negative: Vec<LabelVector> = t.iter().copied().filter(|y| y.g() < 0.0).collect();
    assert!(matches!(accuracy_mae(&Picky, &all_negative, &AnalyticModel, 5), Err(Error::Empty(_))));
}

#[test]
fn diversity_of_a_constant_solver_is_zero() {
    let solver = Lookup::new(200, 6);
    let rows = diversity_study(&solver, &diversity_targets(), 20, &AnalyticModel, 1).unwrap();
    assert_eq!(rows.len(), 27);
    for r in &rows {
        let exact = exact_labels(&r.samples[0]);
        for j in 0..3 {
            assert!(r.std[j] < 1e-15);
            assert!((r.mean[j] - exact.0[j]).abs() < 1e-15);
        }
    }
}

#[test]
fn exports_are_byte_identical() {
    let rows = diversity_study(&Picky, &diversity_targets()[1..3], 5, &AnalyticModel, 2).unwrap();
    let mut report = AccuracyReport::default();
    report
        .merge([cell(Family::Cfm, 100, 1, [0.1, 0.2, 0.3]), cell(Family::Cfm, 100, 2, [0.2, 0.1, 0.0])])
        .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        export_diversity(&rows, dir).unwrap();
        report.export(dir).unwrap();
    }
    for name in ["diversity.csv", "params/cwgan_t00.csv", "params/cwgan_t01.csv", "accuracy.csv", "parity.csv", "accuracy_seeds.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn cells_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cell(Family::Bayes, 5000, 3, [1.0 / 3.0, 2e-5, 0.123456789]);
    c.meta.failures = vec![4, 9];
    c.save(&dir.path().join("cells").join(c.meta.dir_name())).unwrap();
    let loaded = AccuracyReport::load_cells(dir.path()).unwrap();
    assert_eq!(loaded, vec![c]);
}

#[test]
fn report_takes_medians_and_rejects_duplicates() {
    let mut report = AccuracyReport::default();
    report
        .merge([
            cell(Family::Inn, 100, 1, [0.3, 0.1, 0.5]),
            cell(Family::Inn, 100, 2, [0.1, 0.2, 0.4]),
            cell(Family::Inn, 100, 3, [0.2, 0.3, 0.6]),
        ])
        .unwrap();
    assert_eq!(report.median_mae()[&(Family::Inn, 100)], [0.2, 0.2, 0.5]);
    let err = report.merge([cell(Family::Inn, 100, 2, [0.0; 3])]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(report.cells.len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn accuracy_ignores_target_order(seed in 0u64..200, shift in 1usize..30) {
        let solver = Lookup::new(100, 9);
        let t = targets(30, seed);
        let moved: Vec<LabelVector> = (0..30).map(|i| t[(i + shift) % 30]).collect();
        let a = accuracy_mae(&solver, &t, &AnalyticModel, 0).unwrap().mae;
        let b = accuracy_mae(&solver, &moved, &AnalyticModel, 0).unwrap().mae;
        for j in 0..3 {
            prop_assert!((a[j] - b[j]).abs() <= 1e-13 * a[j].max(1e-300));
        }
    }

    #[test]
    fn label_moments_ignore_sample_order(
        v in proptest::collection::vec(proptest::array::uniform3(-1.0f64..1.0), 1..30),
        shift in 0usize..30,
    ) {
        let a: Vec<LabelVector> = v.iter().copied().map(LabelVector).collect();
        let b: Vec<LabelVector> = (0..a.len()).map(|i| a[(i + shift) % a.len()]).collect();
        let (ma, sa) = label_moments(&a);
        let (mb, sb) = label_moments(&b);
        for j in 0..3 {
            prop_assert!((ma[j] - mb[j]).abs() < 1e-14);
            prop_assert!((sa[j] - sb[j]).abs() < 1e-14);
            prop_assert!(sa[j] >= 0.0);
        }
    }
}
