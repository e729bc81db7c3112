//! Combustor design space, the analytic forward model standing in for the
//! simulation workflow, Latin hypercube sampling and dataset files.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, parse_f64, read_json, read_text, write_json, write_text};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;

/// Number of design parameters.
pub const DESIGN_DIM: usize = 6;
/// Number of performance labels.
pub const LABEL_DIM: usize = 3;
/// Admissible values of the number of injection holes (2..=10).
pub const NH_LEVELS: usize = 9;
/// Index of the categorical coordinate inside a design vector.
pub const NH_INDEX: usize = 1;
/// Indices of the five continuous coordinates.
pub const CONTINUOUS: [usize; 5] = [0, 2, 3, 4, 5];

pub const GENERATOR_VERSION: &str = "analytic-combustor-v1";
pub const DATASET_HEADER: &str = "a,h,m,d,l,p,u_m,dp,g";
pub const LABEL_NAMES: [&str; LABEL_DIM] = ["u_m", "dp", "g"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Continuous,
    Integer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamSpec {
    pub symbol: &'static str,
    pub lower: f64,
    pub upper: f64,
    pub kind: ParamKind,
    pub unit: &'static str,
}

/// The six independent combustor parameters, in design-vector order.
#[derive(Clone, Debug)]
pub struct DesignSpace {
    pub params: [ParamSpec; DESIGN_DIM],
}

impl Default for DesignSpace {
    fn default() -> Self {
        Self::combustor()
    }
}

impl DesignSpace {
    pub fn combustor() -> Self {
        use ParamKind::*;
        let p = |symbol, lower, upper, kind, unit| ParamSpec {
            symbol,
            lower,
            upper,
            kind,
            unit,
        };
        DesignSpace {
            params: [
                p("R_A", 0.63, 0.83, Continuous, ""),
                p("N_H", 2.0, 10.0, Integer, ""),
                p("D_M", 20.0, 45.0, Continuous, "mm"),
                p("R_D", 0.35, 0.55, Continuous, ""),
                p("R_L", 4.0, 12.0, Continuous, ""),
                p("L_P", 200.0, 900.0, Continuous, "mm"),
            ],
        }
    }

    /// Number of integer values the categorical parameter admits.
    pub fn nh_levels(&self) -> usize {
        let p = &self.params[NH_INDEX];
        (p.upper - p.lower) as usize + 1
    }

    pub fn normalize(&self, x: &DesignVector) -> Result<NormalizedDesign> {
        let mut u = [0.0; DESIGN_DIM];
        for (i, spec) in self.params.iter().enumerate() {
            let v = x.0[i];
            if !v.is_finite() || v < spec.lower || v > spec.upper {
                return Err(Error::Range(format!(
                    "{} = {v} outside [{}, {}]",
                    spec.symbol, spec.lower, spec.upper
                )));
            }
            if spec.kind == ParamKind::Integer && v.fract() != 0.0 {
                return Err(Error::Range(format!("{} = {v} is not an integer", spec.symbol)));
            }
            u[i] = (v - spec.lower) / (spec.upper - spec.lower);
        }
        Ok(NormalizedDesign(u))
    }

    /// Inverse of [`normalize`](Self::normalize); the categorical coordinate is
    /// rounded to the nearest admissible integer.
    pub fn denormalize(&self, u: &NormalizedDesign) -> Result<DesignVector> {
        u.validate()?;
        let mut x = [0.0; DESIGN_DIM];
        for (i, spec) in self.params.iter().enumerate() {
            let span = spec.upper - spec.lower;
            x[i] = match spec.kind {
                ParamKind::Continuous => spec.lower + u.0[i] * span,
                ParamKind::Integer => (u.0[i] * span + spec.lower).round(),
            };
        }
        Ok(DesignVector(x))
    }
}

/// Design in physical units: `(R_A, N_H, D_M [mm], R_D, R_L, L_P [mm])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesignVector(pub [f64; DESIGN_DIM]);

/// Design mapped to the unit cube, ordered `(a, h, m, d, l, p)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDesign(pub [f64; DESIGN_DIM]);

impl NormalizedDesign {
    pub fn validate(&self) -> Result<()> {
        for (i, &v) in self.0.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Range(format!("normalized coordinate {i} = {v}")));
            }
        }
        Ok(())
    }

    /// Clips to the unit cube and moves `h` to the nearest grid level.
    pub fn project(raw: &[f64]) -> Self {
        let mut u = [0.0; DESIGN_DIM];
        for (dst, &v) in u.iter_mut().zip(raw) {
            *dst = if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        }
        u[NH_INDEX] = snap_h(u[NH_INDEX]);
        NormalizedDesign(u)
    }

    pub fn continuous(&self) -> [f64; 5] {
        CONTINUOUS.map(|i| self.0[i])
    }

    pub fn from_parts(cont: &[f64], h: f64) -> Self {
        let mut u = [0.0; DESIGN_DIM];
        for (&i, &v) in CONTINUOUS.iter().zip(cont) {
            u[i] = v;
        }
        u[NH_INDEX] = h;
        NormalizedDesign(u)
    }
}

/// Nearest admissible normalized `h`.
pub fn snap_h(h: f64) -> f64 {
    let steps = (NH_LEVELS - 1) as f64;
    (h.clamp(0.0, 1.0) * steps).round() / steps
}

/// Normalized `h` of category `k` (`N_H = k + 2`).
pub fn h_level(k: usize) -> f64 {
    k as f64 / (NH_LEVELS - 1) as f64
}

/// Category index of a grid-valued `h`.
pub fn h_category(h: f64) -> usize {
    (snap_h(h) * (NH_LEVELS - 1) as f64).round() as usize
}

/// Performance labels `(U_M, Δp_t,rel, G)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVector(pub [f64; LABEL_DIM]);

impl LabelVector {
    pub fn new(um: f64, dp: f64, g: f64) -> Self {
        LabelVector([um, dp, g])
    }

    pub fn um(&self) -> f64 {
        self.0[0]
    }

    pub fn dp(&self) -> f64 {
        self.0[1]
    }

    pub fn g(&self) -> f64 {
        self.0[2]
    }
}

/// Geometry quantities that follow from the six independent parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivedGeometry {
    /// Premix tube length [mm].
    pub l_m: f64,
    /// Lance diameter [mm].
    pub d_l: f64,
    /// Lance length [mm].
    pub l_l: f64,
    /// Number of vortex generators.
    pub n_v: f64,
    /// Combustion chamber length [mm].
    pub l_c: f64,
    /// Discharge ratio.
    pub r_c: f64,
}

pub fn derived_geometry(space: &DesignSpace, x: &DesignVector) -> Result<DerivedGeometry> {
    space.normalize(x)?;
    let [_, n_h, d_m, r_d, r_l, _] = x.0;
    let l_m = d_m * r_l;
    Ok(DerivedGeometry {
        l_m,
        d_l: r_d * d_m,
        l_l: 0.2 * l_m,
        n_v: (n_h / 2.0).min(2.0),
        l_c: 1000.0,
        r_c: 4.0,
    })
}

/// Latin hypercube sample of `n` points in `[0,1]^dims`, returned as `n × dims`.
///
/// Each column places exactly one point in each of the `n` equal-width bins;
/// the bin order is an independent random permutation per column.
pub fn lhs_sample<R: Rng + ?Sized>(n: usize, dims: usize, rng: &mut R) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Empty("LHS needs at least one point".into()));
    }
    let mut out = Array2::zeros((n, dims));
    let width = 1.0 / n as f64;
    let mut bins: Vec<usize> = (0..n).collect();
    for j in 0..dims {
        bins.shuffle(rng);
        for (i, &bin) in bins.iter().enumerate() {
            let offset: f64 = rng.random();
            // Stay strictly inside the bin even when offset rounds up.
            out[[i, j]] = ((bin as f64 + offset) * width).min((bin + 1) as f64 * width - f64::EPSILON * 0.5);
        }
    }
    Ok(out)
}

/// Noise-free analytic labels.
pub fn exact_labels(u: &NormalizedDesign) -> LabelVector {
    let [a, h, m, d, l, p] = u.0;
    let um = 0.02 + 0.16 * (1.0 - h) * (1.0 - 0.5 * l) * (0.6 + 0.4 * (PI * a).sin() * (1.0 - d));
    let dp = 0.030 + 0.015 * (1.0 - a) + 0.005 * d * (1.0 - a);
    let g = (3.0 * (m - 0.5) + (p - 0.5) + 0.3 * (2.0 * PI * l).sin()).tanh();
    LabelVector([um, dp, g])
}

/// Analytic labels plus independent `N(0, sigma²)` noise on each label.
pub fn forward_model<R: Rng + ?Sized>(
    u: &NormalizedDesign,
    sigma: f64,
    rng: &mut R,
) -> Result<LabelVector> {
    u.validate()?;
    let mut y = exact_labels(u);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Range(e.to_string()))?;
        for v in &mut y.0 {
            *v += noise.sample(rng);
        }
    } else if sigma < 0.0 || sigma.is_nan() {
        return Err(Error::Range(format!("noise level {sigma}")));
    }
    Ok(y)
}

/// Anything that maps designs to labels: the analytic model or trained surrogates.
pub trait LabelModel: Sync {
    fn predict(&self, designs: &[NormalizedDesign]) -> Result<Vec<LabelVector>>;
}

/// The analytic model without noise, used as ground truth.
#[derive(Clone, Copy, Debug, Default)]
pub struct AnalyticModel;

impl LabelModel for AnalyticModel {
    fn predict(&self, designs: &[NormalizedDesign]) -> Result<Vec<LabelVector>> {
        Ok(designs.iter().map(exact_labels).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n: usize,
    pub sigma: f64,
    pub generator_version: String,
}

/// Ordered design/label pairs with their generation metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub designs: Vec<NormalizedDesign>,
    pub labels: Vec<LabelVector>,
    pub meta: DatasetMeta,
}

/// LHS designs (with `h` stratified over the nine grid levels) labelled by the
/// forward model. Fully determined by `(n, sigma, seed)`.
pub fn make_dataset(n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from_seed(seed);
    let cube = lhs_sample(n, DESIGN_DIM, &mut rng)?;
    let mut designs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for row in cube.outer_iter() {
        let mut u = [0.0; DESIGN_DIM];
        u.iter_mut().zip(row.iter()).for_each(|(d, &s)| *d = s);
        let level = ((u[NH_INDEX] * NH_LEVELS as f64) as usize).min(NH_LEVELS - 1);
        u[NH_INDEX] = h_level(level);
        let design = NormalizedDesign(u);
        labels.push(forward_model(&design, sigma, &mut rng)?);
        designs.push(design);
    }
    Ok(Dataset {
        designs,
        labels,
        meta: DatasetMeta {
            seed,
            n,
            sigma,
            generator_version: GENERATOR_VERSION.to_string(),
        },
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.designs.len() != self.labels.len() || self.meta.n != self.designs.len() {
            return Err(Error::Shape(format!(
                "dataset has {} designs, {} labels, metadata says {}",
                self.designs.len(),
                self.labels.len(),
                self.meta.n
            )));
        }
        for d in &self.designs {
            d.validate()?;
        }
        if self.labels.iter().any(|y| y.0.iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain("non-finite label".into()));
        }
        Ok(())
    }

    pub fn design_matrix<S: Scalar>(&self) -> Array2<S> {
        Array2::from_shape_fn((self.len(), DESIGN_DIM), |(i, j)| S::c(self.designs[i].0[j]))
    }

    pub fn label_matrix<S: Scalar>(&self) -> Array2<S> {
        Array2::from_shape_fn((self.len(), LABEL_DIM), |(i, j)| S::c(self.labels[i].0[j]))
    }

    /// Rows `idx` as a new dataset (metadata `n` updated).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            designs: idx.iter().map(|&i| self.designs[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            meta: DatasetMeta {
                n: idx.len(),
                ..self.meta.clone()
            },
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 200);
        out.push_str(DATASET_HEADER);
        out.push('\n');
        for (x, y) in self.designs.iter().zip(&self.labels) {
            let fields: Vec<String> = x.0.iter().chain(y.0.iter()).map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    /// Writes `path` (CSV) and `path.json` (metadata sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())?;
        write_json(&sidecar_path(path), &self.meta)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let meta: DatasetMeta = read_json(&sidecar_path(path))?;
        let text = read_text(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == DATASET_HEADER => {}
            other => {
                return Err(Error::format(path, format!("expected header {DATASET_HEADER:?}, got {other:?}")))
            }
        }
        let mut designs = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let values = line
                .split(',')
                .map(|f| parse_f64(f, path))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != DESIGN_DIM + LABEL_DIM {
                return Err(Error::format(path, format!("line {}: {} fields", lineno + 2, values.len())));
            }
            let mut u = [0.0; DESIGN_DIM];
            u.copy_from_slice(&values[..DESIGN_DIM]);
            let mut y = [0.0; LABEL_DIM];
            y.copy_from_slice(&values[DESIGN_DIM..]);
            designs.push(NormalizedDesign(u));
            labels.push(LabelVector(y));
        }
        let ds = Dataset {
            designs,
            labels,
            meta,
        };
        ds.validate().map_err(|e| Error::format(path, e))?;
        Ok(ds)
    }
}

/// `data.csv` → `data.csv.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        let space = DesignSpace::combustor();
        let x = DesignVector([0.63, 10.0, 32.5, 0.45, 8.0, 550.0]);
        let u = space.normalize(&x).unwrap();
        assert_eq!(u.0[0], 0.0);
        assert_eq!(u.0[1], 1.0);
        assert_eq!(u.0[2], 0.5);
        assert_eq!(space.nh_levels(), 9);
    }

    #[test]
    fn normalize_rejects_out_of_range_and_fractional_holes() {
        let space = DesignSpace::combustor();
        let bad = DesignVector([0.5, 4.0, 30.0, 0.4, 6.0, 300.0]);
        assert!(matches!(space.normalize(&bad), Err(Error::Range(_))));
        let frac = DesignVector([0.7, 4.5, 30.0, 0.4, 6.0, 300.0]);
        assert!(matches!(space.normalize(&frac), Err(Error::Range(_))));
        assert!(space.denormalize(&NormalizedDesign([1.2, 0.0, 0.0, 0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn derived_geometry_follows_the_design_rules() {
        let space = DesignSpace::combustor();
        let g = derived_geometry(&space, &DesignVector([0.7, 2.0, 20.0, 0.5, 4.0, 500.0])).unwrap();
        assert_eq!(g.l_m, 80.0);
        assert_eq!(g.l_l, 16.0);
        assert_eq!(g.n_v, 1.0);
        assert_eq!((g.l_c, g.r_c), (1000.0, 4.0));
        let g = derived_geometry(&space, &DesignVector([0.7, 8.0, 40.0, 0.5, 4.0, 500.0])).unwrap();
        assert_eq!(g.d_l, 20.0);
        assert_eq!(g.n_v, 2.0);
    }

    #[test]
    fn forward_model_closed_form_cases() {
        let mut rng = rng_from_seed(0);
        let y = forward_model(&NormalizedDesign([0.3, 1.0, 0.2, 0.7, 0.9, 0.1]), 0.0, &mut rng).unwrap();
        assert_eq!(y.um(), 0.02);
        let y = exact_labels(&NormalizedDesign([1.0, 0.3, 0.2, 0.7, 0.9, 0.1]));
        assert_eq!(y.dp(), 0.030);
        let y = exact_labels(&NormalizedDesign([0.3, 0.3, 0.5, 0.7, 0.0, 0.5]));
        assert_eq!(y.g(), 0.0);
        let y = exact_labels(&NormalizedDesign([0.5, 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert!((y.um() - 0.18).abs() < 1e-15);
        assert!((y.dp() - 0.0375).abs() < 1e-15);
        assert!((y.g() - (-2.0f64).tanh()).abs() < 1e-15);
        assert!((y.g() + 0.9640).abs() < 1e-4);
    }

    #[test]
    fn lhs_rejects_zero_and_handles_one() {
        let mut rng = rng_from_seed(1);
        assert!(matches!(lhs_sample(0, 3, &mut rng), Err(Error::Empty(_))));
        let one = lhs_sample(1, 6, &mut rng).unwrap();
        assert!(one.iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn lhs_four_points_cover_four_bins() {
        let mut rng = rng_from_seed(2);
        let s = lhs_sample(4, 1, &mut rng).unwrap();
        let mut bins: Vec<usize> = s.column(0).iter().map(|&v| (v * 4.0) as usize).collect();
        bins.sort();
        assert_eq!(bins, vec![0, 1, 2, 3]);
    }

    #[test]
    fn dataset_is_reproducible_and_in_range() {
        let a = make_dataset(100, 0.0, 11).unwrap();
        let b = make_dataset(100, 0.0, 11).unwrap();
        assert_eq!(a, b);
        let big = make_dataset(1000, 0.0, 5).unwrap();
        for (x, y) in big.designs.iter().zip(&big.labels) {
            assert!((0.02..=0.18).contains(&y.um()));
            assert!((0.030..=0.050).contains(&y.dp()));
            assert!(y.g() > -1.0 && y.g() < 1.0);
            assert_eq!(snap_h(x.0[NH_INDEX]), x.0[NH_INDEX]);
        }
    }

    #[test]
    fn dataset_csv_round_trip_is_bit_exact() {
        let ds = make_dataset(50, 0.01, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert!(sidecar_path(&path).exists());
    }

    #[test]
    fn h_grid_helpers() {
        assert_eq!(snap_h(0.07), 0.125);
        assert_eq!(snap_h(0.06), 0.0);
        assert_eq!(h_category(1.0), 8);
        assert_eq!(h_level(4), 0.5);
    }
}
