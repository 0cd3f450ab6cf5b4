//! Stationary random coefficient fields, piecewise constant on unit cells.
//!
//! Unit cell `z` is the square `z + [-1/2, 1/2)^2`. Every cell draws its
//! randomness from a ChaCha stream keyed by the seed and the absolute cell
//! coordinates, so translating a region translates the field exactly.

use crate::varrep::{
    selfdual_proximal_average, tabulate, ExtendedRepresentative, FitzpatrickParams, MonotoneMap, ProximalParams,
    Tabulated, TableSpec, VarrepError,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid ensemble: {0}")]
    InvalidSpec(String),
    #[error("mixing probe needs at least 8 samples, got {0}")]
    TooFewSamples(usize),
    #[error("region is empty or unbounded")]
    BadRegion,
    #[error(transparent)]
    Varrep(#[from] VarrepError),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The monotone law of one cell: `a(p) = c p + b p / (1 + |p|)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    pub c: f64,
    pub b: f64,
}

impl Phase {
    pub fn linear(c: f64) -> Self {
        Phase { c, b: 0.0 }
    }

    pub fn is_linear(&self) -> bool {
        self.b == 0.0
    }

    /// Monotonicity and Lipschitz constants `(m, L)` of the law.
    pub fn bounds(&self) -> (f64, f64) {
        (self.c + self.b.min(0.0), self.c + self.b.max(0.0))
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.c + self.b / (1.0 + (p[0] * p[0] + p[1] * p[1]).sqrt());
        [s * p[0], s * p[1]]
    }

    pub fn monotone_map(&self, lambda: f64) -> MonotoneMap {
        MonotoneMap::radial(2, self.c, self.b, lambda).expect("validated phase")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MixingClass {
    FiniteRange,
    Algebraic { beta: f64 },
    StretchedExponential { gamma: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnsembleKind {
    /// Independent cells, phase `i` chosen with probability `weights[i]`.
    Checkerboard { phases: Vec<Phase>, weights: Vec<f64> },
    /// Kernel-weighted average `s` of uniforms over the window `|y|_inf <= (range - 1)/2`
    /// with weights `(1 + |y|)^(-kernel_exponent)`, quantized to `levels` values
    /// of `c` in `[c_min, c_max]`.
    MovingAverage { kernel_exponent: f64, c_min: f64, c_max: f64, b: f64, levels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub kind: EnsembleKind,
    /// Cells at l-infinity distance `>= range` are independent.
    pub range: usize,
    pub lambda: f64,
    pub k0: f64,
    pub seed: u64,
    pub mixing: MixingClass,
}

impl EnsembleSpec {
    pub fn checkerboard(phases: Vec<Phase>, lambda: f64, seed: u64) -> Result<Self, FieldError> {
        let n = phases.len();
        let spec = EnsembleSpec {
            kind: EnsembleKind::Checkerboard { phases, weights: vec![1.0 / n.max(1) as f64; n] },
            range: 1,
            lambda,
            k0: 0.0,
            seed,
            mixing: MixingClass::FiniteRange,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn moving_average(kernel_exponent: f64, range: usize, c_min: f64, c_max: f64, lambda: f64, seed: u64) -> Result<Self, FieldError> {
        let spec = EnsembleSpec {
            kind: EnsembleKind::MovingAverage { kernel_exponent, c_min, c_max, b: 0.0, levels: 16 },
            range,
            lambda,
            k0: 0.0,
            seed,
            mixing: MixingClass::Algebraic { beta: kernel_exponent },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: String| Err(FieldError::InvalidSpec(m));
        if !(self.lambda >= 1.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 1, got {}", self.lambda));
        }
        if !(self.k0 >= 0.0) {
            return bad("K0 must be >= 0".into());
        }
        if self.range == 0 {
            return bad("range must be a positive number of cells".into());
        }
        match &self.kind {
            EnsembleKind::Checkerboard { phases, weights } => {
                if phases.is_empty() || phases.len() != weights.len() {
                    return bad("checkerboard needs phases with matching weights".into());
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return bad("phase weights must be nonnegative and sum to 1".into());
                }
                if self.range != 1 {
                    return bad("checkerboard cells are independent: range must be 1".into());
                }
            }
            EnsembleKind::MovingAverage { kernel_exponent, c_min, c_max, levels, .. } => {
                if self.range % 2 == 0 {
                    return bad("moving-average range must be odd".into());
                }
                if !(*kernel_exponent >= 0.0) || *levels == 0 || !(c_max >= c_min) {
                    return bad("moving-average kernel exponent, levels or c bounds invalid".into());
                }
            }
        }
        for ph in self.phases() {
            if !(ph.c > 0.0) {
                return bad(format!("phase coefficient must be positive, got {}", ph.c));
            }
            let (m, l) = ph.bounds();
            if m * self.lambda < 1.0 - 1e-12 || l > self.lambda * (1.0 + 1e-12) {
                return bad(format!("phase (c={}, b={}) is not {}-monotone and Lipschitz", ph.c, ph.b, self.lambda));
            }
            if !ph.is_linear() && (m * self.lambda <= 1.0 || l >= self.lambda) {
                return bad(format!("nonlinear phase (c={}, b={}) needs a non-tight lambda", ph.c, ph.b));
            }
        }
        Ok(())
    }

    /// All distinct phases the field can take, indexed by phase id.
    pub fn phases(&self) -> Vec<Phase> {
        match &self.kind {
            EnsembleKind::Checkerboard { phases, .. } => phases.clone(),
            EnsembleKind::MovingAverage { c_min, c_max, b, levels, .. } => (0..*levels)
                .map(|l| Phase { c: c_min + (c_max - c_min) * (l as f64 + 0.5) / *levels as f64, b: *b })
                .collect(),
        }
    }

    pub fn is_linear(&self) -> bool {
        self.phases().iter().all(|p| p.is_linear())
    }

    /// Seed set of cell `z`: the cells whose uniforms determine its phase.
    pub fn dependence_window(&self, z: [i64; 2]) -> Vec<[i64; 2]> {
        let w = ((self.range - 1) / 2) as i64;
        match self.kind {
            EnsembleKind::Checkerboard { .. } => vec![z],
            EnsembleKind::MovingAverage { .. } => {
                let mut out = Vec::new();
                for dx in -w..=w {
                    for dy in -w..=w {
                        out.push([z[0] + dx, z[1] + dy]);
                    }
                }
                out
            }
        }
    }
}

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

/// First uniform of the stream of cell `z` under `key`.
fn cell_uniform(key: u64, z: [i64; 2]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream((zigzag(z[0]) << 32) ^ zigzag(z[1]));
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn sample_key(spec_seed: u64, seed: u64) -> u64 {
    spec_seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

/// Phase id of cell `z` for the given sample seed.
pub fn cell_phase(spec: &EnsembleSpec, seed: u64, z: [i64; 2]) -> usize {
    let key = sample_key(spec.seed, seed);
    match &spec.kind {
        EnsembleKind::Checkerboard { weights, .. } => {
            let u = cell_uniform(key, z);
            let mut acc = 0.0;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    return i;
                }
            }
            weights.len() - 1
        }
        EnsembleKind::MovingAverage { kernel_exponent, levels, .. } => {
            let (mut num, mut den) = (0.0, 0.0);
            for y in spec.dependence_window(z) {
                let r = (((y[0] - z[0]).pow(2) + (y[1] - z[1]).pow(2)) as f64).sqrt();
                let k = (1.0 + r).powf(-kernel_exponent);
                num += k * cell_uniform(key, y);
                den += k;
            }
            ((num / den * *levels as f64) as usize).min(levels - 1)
        }
    }
}

/// Axis-aligned box of cells `lo[i] <= z_i < hi[i]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellBox {
    pub lo: [i64; 2],
    pub hi: [i64; 2],
}

impl CellBox {
    pub fn new(lo: [i64; 2], hi: [i64; 2]) -> Result<Self, FieldError> {
        if hi[0] <= lo[0] || hi[1] <= lo[1] {
            return Err(FieldError::BadRegion);
        }
        Ok(CellBox { lo, hi })
    }

    /// The cells covering the cube with the given center and odd side.
    pub fn centered(center: [i64; 2], side: i64) -> Result<Self, FieldError> {
        let h = side / 2;
        CellBox::new([center[0] - h, center[1] - h], [center[0] - h + side, center[1] - h + side])
    }

    pub fn width(&self) -> usize {
        (self.hi[0] - self.lo[0]) as usize
    }

    pub fn height(&self) -> usize {
        (self.hi[1] - self.lo[1]) as usize
    }

    pub fn len(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, other: &CellBox) -> bool {
        (0..2).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }

    pub fn translate(&self, z: [i64; 2]) -> CellBox {
        CellBox { lo: [self.lo[0] + z[0], self.lo[1] + z[1]], hi: [self.hi[0] + z[0], self.hi[1] + z[1]] }
    }

    pub fn cells(&self) -> impl Iterator<Item = [i64; 2]> + '_ {
        (self.lo[0]..self.hi[0]).flat_map(move |x| (self.lo[1]..self.hi[1]).map(move |y| [x, y]))
    }
}

/// One realization on a box of cells.
#[derive(Clone, Debug)]
pub struct CoefficientSample {
    pub spec: Arc<EnsembleSpec>,
    pub seed: u64,
    pub region: CellBox,
    /// Phase id per cell, x-major (`(x - lo_x) * height + (y - lo_y)`).
    pub phase: Vec<usize>,
    pub phases: Vec<Phase>,
}

pub fn sample_field(spec: &EnsembleSpec, region: CellBox, seed: u64) -> Result<CoefficientSample, FieldError> {
    spec.validate()?;
    if region.is_empty() {
        return Err(FieldError::BadRegion);
    }
    let cells: Vec<[i64; 2]> = region.cells().collect();
    let phase = cells.par_iter().map(|&z| cell_phase(spec, seed, z)).collect();
    Ok(CoefficientSample { spec: Arc::new(spec.clone()), seed, region, phase, phases: spec.phases() })
}

impl CoefficientSample {
    pub fn phase_at(&self, z: [i64; 2]) -> Option<usize> {
        let r = &self.region;
        if z[0] < r.lo[0] || z[0] >= r.hi[0] || z[1] < r.lo[1] || z[1] >= r.hi[1] {
            return None;
        }
        Some(self.phase[((z[0] - r.lo[0]) as usize) * r.height() + (z[1] - r.lo[1]) as usize])
    }

    /// Cell containing the point `x` (cells are `z + [-1/2, 1/2)^2`).
    pub fn cell_of(x: [f64; 2]) -> [i64; 2] {
        [(x[0] + 0.5).floor() as i64, (x[1] + 0.5).floor() as i64]
    }

    pub fn law_at(&self, x: [f64; 2]) -> Option<Phase> {
        self.phase_at(Self::cell_of(x)).map(|i| self.phases[i])
    }

    pub fn a(&self, p: [f64; 2], x: [f64; 2]) -> Option<[f64; 2]> {
        self.law_at(x).map(|ph| ph.apply(p))
    }

    /// Closed-form value for linear cells `|p|^2 c / 2 + |q|^2 / (2c)`.
    pub fn f_linear(&self, p: [f64; 2], q: [f64; 2], x: [f64; 2]) -> Option<f64> {
        let ph = self.law_at(x)?;
        ph.is_linear().then(|| 0.5 * ph.c * (p[0] * p[0] + p[1] * p[1]) + 0.5 * (q[0] * q[0] + q[1] * q[1]) / ph.c)
    }

    pub fn is_constant(&self) -> bool {
        let first = self.phases[self.phase[0]];
        self.phase.iter().all(|&i| self.phases[i] == first)
    }

    /// CSV rows `(cell x, cell y, phase id, c value)`.
    pub fn write_csv(&self, path: &Path) -> Result<(), FieldError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "phase", "c"])?;
        for (k, z) in self.region.cells().enumerate() {
            let ph = self.phase[k];
            w.write_record([z[0].to_string(), z[1].to_string(), ph.to_string(), format!("{}", self.phases[ph].c)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Integrand of one phase: closed form when linear, a tabulated self-dual
/// representative otherwise.
#[derive(Clone, Debug)]
pub enum PhaseIntegrand {
    Quadratic { c: f64 },
    Table(Arc<Tabulated>),
    /// `z . B z / 2` for a symmetric positive definite `B` on `(p, q)`.
    Form(Arc<[[f64; 4]; 4]>),
}

/// Per-phase integrands, built once per distinct phase.
#[derive(Clone, Debug)]
pub struct IntegrandCache {
    pub entries: Vec<PhaseIntegrand>,
}

impl IntegrandCache {
    /// Nonlinear phases are tabulated on `[-B, B]^4`.
    pub fn build(spec: &EnsembleSpec, table: TableSpec) -> Result<Self, FieldError> {
        let mut built: BTreeMap<u64, Arc<Tabulated>> = BTreeMap::new();
        let mut entries = Vec::new();
        for ph in spec.phases() {
            if ph.is_linear() {
                entries.push(PhaseIntegrand::Quadratic { c: ph.c });
                continue;
            }
            let key = ph.c.to_bits() ^ ph.b.to_bits().rotate_left(32);
            let t = match built.get(&key) {
                Some(t) => t.clone(),
                None => {
                    let map = ph.monotone_map(spec.lambda);
                    let fe = ExtendedRepresentative::new(map, FitzpatrickParams::for_lambda(spec.lambda));
                    let f = selfdual_proximal_average(fe, spec.lambda, ProximalParams::default());
                    let t = Arc::new(tabulate(&f, table)?);
                    built.insert(key, t.clone());
                    t
                }
            };
            entries.push(PhaseIntegrand::Table(t));
        }
        Ok(IntegrandCache { entries })
    }

    pub fn is_quadratic(&self) -> bool {
        self.entries.iter().all(|e| matches!(e, PhaseIntegrand::Quadratic { .. }))
    }
}

/// A bounded statistic of the cell at the origin of a translated sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellFunctional {
    /// 1 if the cell is in the given phase, else 0.
    PhaseIndicator(usize),
    /// `c` rescaled to `[-1, 1]` over the phase range.
    ScaledCoefficient,
}

impl CellFunctional {
    fn eval(&self, spec: &EnsembleSpec, phases: &[Phase], id: usize) -> f64 {
        match *self {
            CellFunctional::PhaseIndicator(k) => (id == k) as u8 as f64,
            CellFunctional::ScaledCoefficient => {
                let (lo, hi) = phases.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.c), b.max(p.c)));
                let _ = spec;
                if hi > lo {
                    2.0 * (phases[id].c - lo) / (hi - lo) - 1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceRow {
    pub distance: usize,
    pub covariance: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of `cov[X(0), X(z)]` with `z = (distance, 0)`, one
/// independent sample per seed `0..samples`.
pub fn mixing_probe(spec: &EnsembleSpec, functional: CellFunctional, distances: &[usize], samples: usize) -> Result<Vec<CovarianceRow>, FieldError> {
    mixing_probe_from(spec, functional, distances, samples, 0)
}

/// As [`mixing_probe`] with seeds `first..first + samples`.
pub fn mixing_probe_from(
    spec: &EnsembleSpec,
    functional: CellFunctional,
    distances: &[usize],
    samples: usize,
    first: u64,
) -> Result<Vec<CovarianceRow>, FieldError> {
    if samples < 8 {
        return Err(FieldError::TooFewSamples(samples));
    }
    spec.validate()?;
    let phases = spec.phases();
    let rows = distances
        .iter()
        .map(|&dist| {
            let pairs: Vec<(f64, f64)> = (first..first + samples as u64)
                .into_par_iter()
                .map(|s| {
                    let a = functional.eval(spec, &phases, cell_phase(spec, s, [0, 0]));
                    let b = functional.eval(spec, &phases, cell_phase(spec, s, [dist as i64, 0]));
                    (a, b)
                })
                .collect();
            let n = pairs.len() as f64;
            let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let prods: Vec<f64> = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).collect();
            let cov = prods.iter().sum::<f64>() / (n - 1.0);
            let mp = prods.iter().sum::<f64>() / n;
            let var = prods.iter().map(|x| (x - mp) * (x - mp)).sum::<f64>() / (n - 1.0);
            CovarianceRow { distance: dist, covariance: cov, std_error: (var / n).sqrt(), samples }
        })
        .collect();
    Ok(rows)
}
