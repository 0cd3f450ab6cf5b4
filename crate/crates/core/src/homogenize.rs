//! Monte-Carlo estimates of the limits of `mu` and `mu0`, the homogenized
//! integrand `Fbar`, its conjugate `mubar` and the effective map `abar`.

use crate::fields::{sample_field, CellBox, EnsembleSpec, FieldError, IntegrandCache};
use crate::grid::TriadicCube;
use crate::subadd::{
    envelope_of, ordering_holds, solve_mu0_from, solve_mu_from, Estimate, Medium, QuadraticResponse, SolveRecord, SolverParams,
    SubaddError,
};
use crate::varrep::{
    check_monotone, legendre_transform, recover_monotone_map, Conjugate, Integrand, LegendreTable, MonotoneReport,
    Table, TableSpec, Tabulated, VarrepError,
};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HomogenizeError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("rate fit refused: {0}")]
    FitRefused(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Subadd(#[from] SubaddError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Varrep(#[from] VarrepError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HomogenizeError>;

/// A named ensemble with its per-phase integrands.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub name: String,
    pub spec: EnsembleSpec,
    pub laws: IntegrandCache,
}

impl Ensemble {
    pub fn new(name: &str, spec: EnsembleSpec, table: TableSpec) -> Result<Self> {
        let laws = IntegrandCache::build(&spec, table)?;
        Ok(Ensemble { name: name.to_string(), spec, laws })
    }

    /// The sample with seed `seed` restricted to the cells of the level-`n` cube at the origin.
    pub fn medium(&self, n: u32, seed: u64) -> Result<Medium> {
        let side = 3i64.pow(n);
        let s = sample_field(&self.spec, CellBox::centered([0, 0], side)?, seed)?;
        Ok(Medium::new(s, self.laws.clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepParams {
    pub solver: SolverParams,
    pub trimmed: bool,
    pub beta: f64,
    pub seed_offset: u64,
    /// Record wall times in solve logs (makes logs non-reproducible).
    pub timing: bool,
}

impl Default for SweepParams {
    fn default() -> Self {
        SweepParams { solver: SolverParams::default(), trimmed: false, beta: 1.0, seed_offset: 0, timing: false }
    }
}

/// Seed of the `k`-th sample at level `n`; distinct levels use disjoint seeds.
pub fn sample_seed(n: u32, k: usize, offset: u64) -> u64 {
    ((n as u64) << 40) ^ (k as u64).wrapping_add(offset)
}

/// A parameter tuple `(p, q, q*, p*)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamPoint {
    pub p: [f64; 2],
    pub q: [f64; 2],
    pub qstar: [f64; 2],
    pub pstar: [f64; 2],
}

impl ParamPoint {
    /// `p.q* + p*.q`.
    pub fn pairing(&self) -> f64 {
        self.p[0] * self.qstar[0] + self.p[1] * self.qstar[1] + self.pstar[0] * self.q[0] + self.pstar[1] * self.q[1]
    }
}

/// Sample mean with standard error and the largest solver excess.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
    pub eps: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = Estimate>) -> Stat {
        let v: Vec<Estimate> = values.into_iter().collect();
        let n = v.len();
        let mean = v.iter().map(|e| e.value).sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|e| (e.value - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { f64::NAN };
        let eps = v.iter().map(|e| e.eps).fold(0.0, f64::max);
        Stat { mean, se: (var / n as f64).sqrt(), eps, n }
    }
}

enum Backend {
    Quadratic(Vec<QuadraticResponse>),
    Direct(Vec<Medium>),
}

/// All samples of one level, solved lazily per parameter list.
pub struct LevelEnsemble<'a> {
    ens: &'a Ensemble,
    pub n: u32,
    pub seeds: Vec<u64>,
    cube: TriadicCube,
    params: SweepParams,
    backend: Backend,
}

impl<'a> LevelEnsemble<'a> {
    pub fn new(ens: &'a Ensemble, n: u32, samples: usize, params: SweepParams) -> Result<Self> {
        let seeds: Vec<u64> = (0..samples).map(|k| sample_seed(n, k, params.seed_offset)).collect();
        let cube = TriadicCube::new(2, n, params.trimmed, params.beta).map_err(SubaddError::from)?;
        let media: Vec<Medium> = seeds.par_iter().map(|&s| ens.medium(n, s)).collect::<Result<_>>()?;
        let backend = if ens.laws.is_quadratic() {
            let rs = media
                .par_iter()
                .map(|m| QuadraticResponse::compute(m, &cube, &params.solver).map_err(HomogenizeError::from))
                .collect::<Result<Vec<_>>>()?;
            Backend::Quadratic(rs)
        } else {
            Backend::Direct(media)
        };
        Ok(LevelEnsemble { ens, n, seeds, cube, params, backend })
    }

    /// Exact quadratic forms per sample, when the phases are linear.
    pub fn responses(&self) -> Option<&[QuadraticResponse]> {
        match &self.backend {
            Backend::Quadratic(r) => Some(r),
            Backend::Direct(_) => None,
        }
    }

    /// `mu0` values, indexed `[point][sample]`.
    pub fn mu0_values(&self, pts: &[[f64; 4]]) -> Result<Vec<Vec<Estimate>>> {
        self.values(pts, true).map(|(v, _)| v)
    }

    /// `mu` values at `(q*, p*)` tuples, indexed `[point][sample]`.
    pub fn mu_values(&self, pts: &[[f64; 4]]) -> Result<Vec<Vec<Estimate>>> {
        self.values(pts, false).map(|(v, _)| v)
    }

    fn values(&self, pts: &[[f64; 4]], zero_bc: bool) -> Result<(Vec<Vec<Estimate>>, Vec<Vec<f64>>)> {
        let split = |z: &[f64; 4]| ([z[0], z[1]], [z[2], z[3]]);
        match &self.backend {
            Backend::Quadratic(rs) => {
                let v = pts
                    .iter()
                    .map(|z| {
                        let (a, b) = split(z);
                        rs.iter().map(|r| if zero_bc { r.mu0(a, b) } else { r.mu(a, b) }).collect()
                    })
                    .collect();
                Ok((v, vec![vec![0.0; pts.len()]; rs.len()]))
            }
            Backend::Direct(media) => {
                let per_sample: Vec<(Vec<Estimate>, Vec<f64>)> = media
                    .par_iter()
                    .map(|m| {
                        let mut warm: Option<Vec<f64>> = None;
                        let mut out = Vec::with_capacity(pts.len());
                        let mut times = Vec::with_capacity(pts.len());
                        for z in pts {
                            let (a, b) = split(z);
                            let t = std::time::Instant::now();
                            let (val, pair) = if zero_bc {
                                solve_mu0_from(m, &self.cube, a, b, &self.params.solver, warm.as_deref())?
                            } else {
                                solve_mu_from(m, &self.cube, a, b, &self.params.solver, warm.as_deref())?
                            };
                            times.push(t.elapsed().as_secs_f64());
                            out.push(Estimate { value: val, eps: pair.residual });
                            warm = Some(pair.state);
                        }
                        Ok((out, times))
                    })
                    .collect::<Result<_>>()?;
                let v = (0..pts.len()).map(|i| per_sample.iter().map(|s| s.0[i]).collect()).collect();
                Ok((v, per_sample.into_iter().map(|s| s.1).collect()))
            }
        }
    }

    /// Per-point statistics without keeping per-sample values.
    pub fn stats(&self, pts: &[[f64; 4]], zero_bc: bool) -> Result<Vec<Stat>> {
        match &self.backend {
            Backend::Quadratic(rs) => Ok(pts
                .par_iter()
                .map(|z| {
                    let (a, b) = ([z[0], z[1]], [z[2], z[3]]);
                    Stat::of(rs.iter().map(|r| if zero_bc { r.mu0(a, b) } else { r.mu(a, b) }))
                })
                .collect()),
            Backend::Direct(_) => Ok(self.values(pts, zero_bc)?.0.into_iter().map(Stat::of).collect()),
        }
    }

    fn records(&self, point: &ParamPoint, mu0: &[Estimate], mu: &[Estimate], t0: &[f64], t1: &[f64]) -> Vec<SolveRecord> {
        let mut out = Vec::new();
        for (k, &seed) in self.seeds.iter().enumerate() {
            for (quantity, e, t) in [("mu0", mu0[k], t0.get(k)), ("mu", mu[k], t1.get(k))] {
                let (p, q, pstar, qstar) =
                    if quantity == "mu0" { (point.p, point.q, [0.0; 2], [0.0; 2]) } else { ([0.0; 2], [0.0; 2], point.pstar, point.qstar) };
                out.push(SolveRecord {
                    ensemble: self.ens.name.clone(),
                    quantity,
                    seed,
                    n: self.n,
                    trimmed: self.params.trimmed,
                    p,
                    q,
                    pstar,
                    qstar,
                    value: e.value,
                    residual: e.eps,
                    wall_time: if self.params.timing { t.copied() } else { None },
                });
            }
        }
        out
    }
}

/// Statistics of one level of a scale sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelStats {
    pub n: u32,
    pub mu: Stat,
    pub mu0: Stat,
    pub pairing: f64,
    /// `mean mu0 - mean mu - pairing`.
    pub gap: f64,
    /// `gap + 2 (se(mu0) + se(mu))`.
    pub bracket_width: f64,
    /// Samples violating `mu <= pairing + mu0` beyond the solver excess.
    pub trap_violations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleCurve {
    pub point: ParamPoint,
    pub levels: Vec<LevelStats>,
    /// Monotonicity violations beyond two standard errors.
    pub flags: Vec<String>,
}

impl ScaleCurve {
    pub fn is_monotone(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "n,samples,mu_mean,mu_se,mu0_mean,mu0_se,pairing,gap,bracket_width,eps,trap_violations")?;
        for l in &self.levels {
            writeln!(
                f,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                l.n,
                l.mu.n,
                l.mu.mean,
                l.mu.se,
                l.mu0.mean,
                l.mu0.se,
                l.pairing,
                l.gap,
                l.bracket_width,
                l.mu.eps + l.mu0.eps,
                l.trap_violations
            )?;
        }
        Ok(())
    }
}

/// Independent samples per level; means and standard errors of `mu(q*, p*)`
/// and `mu0(p, q)`, with per-sample ordering checks.
pub fn scale_sweep(ens: &Ensemble, levels: &[u32], point: ParamPoint, samples: usize, params: SweepParams) -> Result<(ScaleCurve, Vec<SolveRecord>)> {
    if samples < 4 {
        return Err(HomogenizeError::TooFewSamples { needed: 4, got: samples });
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) || levels.is_empty() {
        return Err(HomogenizeError::InvalidInput("levels must be non-empty and strictly increasing".into()));
    }
    let mut out = Vec::new();
    let mut records = Vec::new();
    let z0 = [point.p[0], point.p[1], point.q[0], point.q[1]];
    let z1 = [point.qstar[0], point.qstar[1], point.pstar[0], point.pstar[1]];
    for &n in levels {
        let le = LevelEnsemble::new(ens, n, samples, params)?;
        let (v0, t0) = le.values(&[z0], true)?;
        let (v1, t1) = le.values(&[z1], false)?;
        let (mu0, mu) = (&v0[0], &v1[0]);
        let trap_violations =
            mu0.iter().zip(mu).filter(|(a, b)| !ordering_holds(**b, **a, point.p, point.q, point.qstar, point.pstar)).count();
        let t0: Vec<f64> = t0.iter().map(|t| t[0]).collect();
        let t1: Vec<f64> = t1.iter().map(|t| t[0]).collect();
        records.extend(le.records(&point, mu0, mu, &t0, &t1));
        let s0 = Stat::of(mu0.iter().copied());
        let s1 = Stat::of(mu.iter().copied());
        let pairing = point.pairing();
        let gap = s0.mean - s1.mean - pairing;
        out.push(LevelStats {
            n,
            mu: s1,
            mu0: s0,
            pairing,
            gap,
            bracket_width: gap + 2.0 * (s0.se + s1.se),
            trap_violations,
        });
    }
    let mut flags = Vec::new();
    for w in out.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let tol0 = 2.0 * (a.mu0.se.powi(2) + b.mu0.se.powi(2)).sqrt() + a.mu0.eps + b.mu0.eps;
        if b.mu0.mean - a.mu0.mean > tol0 {
            flags.push(format!("mean mu0 increases from n={} to n={}", a.n, b.n));
        }
        let tol1 = 2.0 * (a.mu.se.powi(2) + b.mu.se.powi(2)).sqrt() + a.mu.eps + b.mu.eps;
        if a.mu.mean - b.mu.mean > tol1 {
            flags.push(format!("mean mu decreases from n={} to n={}", a.n, b.n));
        }
    }
    Ok((ScaleCurve { point, levels: out, flags }, records))
}

/// A quadratic form `z^T m z / 2` on `(p, q)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticIntegrand {
    pub m: [[f64; 4]; 4],
    pub lambda: f64,
}

impl Integrand for QuadraticIntegrand {
    fn dim(&self) -> usize {
        2
    }

    fn convexity(&self) -> Option<f64> {
        Some(self.lambda)
    }

    fn value(&self, p: &[f64], q: &[f64]) -> crate::varrep::Result<f64> {
        let z = [p[0], p[1], q[0], q[1]];
        Ok(0.5 * (0..4).map(|i| (0..4).map(|j| z[i] * self.m[i][j] * z[j]).sum::<f64>()).sum::<f64>())
    }

    fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> crate::varrep::Result<f64> {
        let z = [p[0], p[1], q[0], q[1]];
        let g: [f64; 4] = std::array::from_fn(|i| (0..4).map(|j| self.m[i][j] * z[j]).sum());
        gp.copy_from_slice(&g[..2]);
        gq.copy_from_slice(&g[2..]);
        Ok(0.5 * (0..4).map(|i| z[i] * g[i]).sum::<f64>())
    }

    fn hessian(&self, _p: &[f64], _q: &[f64], out: &mut [f64]) -> crate::varrep::Result<()> {
        for i in 0..4 {
            for j in 0..4 {
                out[i * 4 + j] = self.m[i][j];
            }
        }
        Ok(())
    }
}

/// The estimated homogenized integrand: exact quadratic for linear phases,
/// otherwise multilinear on the parameter table.
#[derive(Clone, Debug)]
pub enum Fbar {
    Quadratic(QuadraticIntegrand),
    Table(Tabulated),
}

impl Fbar {
    pub fn integrand(&self) -> &dyn Integrand {
        match self {
            Fbar::Quadratic(q) => q,
            Fbar::Table(t) => t,
        }
    }

    pub fn value_grad(&self, z: [f64; 4]) -> Result<(f64, [f64; 4])> {
        let (mut gp, mut gq) = ([0.0; 2], [0.0; 2]);
        let v = self.integrand().value_grad(&z[..2], &z[2..], &mut gp, &mut gq)?;
        Ok((v, [gp[0], gp[1], gq[0], gq[1]]))
    }
}

/// Node gradients of a table: centred inside, one-sided on the edges.
fn node_gradients(t: &Table) -> Vec<Vec<f64>> {
    let k = t.rank();
    let strides = t.strides();
    let mut idx = vec![0; k];
    (0..k)
        .map(|a| {
            (0..t.len())
                .map(|n| {
                    t.unravel(n, &mut idx);
                    let h = t.step(a);
                    let (lo, hi) = (idx[a] > 0, idx[a] + 1 < t.shape[a]);
                    match (lo, hi) {
                        (true, true) => (t.values[n + strides[a]] - t.values[n - strides[a]]) / (2.0 * h),
                        (false, true) => (t.values[n + strides[a]] - t.values[n]) / h,
                        (true, false) => (t.values[n] - t.values[n - strides[a]]) / h,
                        (false, false) => 0.0,
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub n_top: u32,
    pub samples: usize,
    /// The `(p, q)` table covers `[-pq_bound, pq_bound]^4`.
    pub pq_bound: f64,
    pub pq_points: usize,
    /// Points per axis of the `(q*, p*)` table; its bound is chosen to contain
    /// every gradient of `Fbar` on the `(p, q)` table.
    pub dual_points: usize,
    /// Where `abar` is sampled.
    pub p_grid: Vec<[f64; 2]>,
    /// `(q*, p*)` tuples whose dual pair `(Pbar, Qbar)` is reported.
    pub dual_queries: Vec<[f64; 4]>,
    /// Models with a wider bracket are marked low-confidence.
    pub width_ceiling: f64,
    pub sweep: SweepParams,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            n_top: 4,
            samples: 32,
            pq_bound: 1.0,
            pq_points: 5,
            dual_points: 17,
            p_grid: vec![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-0.5, 0.25]],
            dual_queries: vec![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            width_ceiling: 0.5,
            sweep: SweepParams::default(),
        }
    }
}

/// One node of the `(p, q)` table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRow {
    pub z: [f64; 4],
    pub fbar: f64,
    pub fbar_se: f64,
    /// `(q*, p*) = grad Fbar(p, q)`.
    pub dual: [f64; 4],
    pub mu_at_dual: f64,
    pub mu_se: f64,
    pub bracket_width: f64,
    /// Legendre transform of `-mubar` with swapped arguments.
    pub closure: f64,
    pub trusted: bool,
}

#[derive(Clone, Debug)]
pub struct HomogenizedModel {
    pub n_top: u32,
    pub samples: usize,
    pub fbar: Fbar,
    /// Mean `mu0` on the `(p, q)` table.
    pub fbar_table: Tabulated,
    /// Mean `mu` on the `(q*, p*)` table.
    pub mubar_table: Tabulated,
    pub rows: Vec<GridRow>,
    pub closure: LegendreTable,
    /// Sup-over-grid error of the discrete Legendre transform.
    pub tabulation_error: f64,
    /// Convexity window used for the property checks.
    pub lambda: f64,
    pub max_width: f64,
    pub low_confidence: bool,
    /// `(p, abar(p))`.
    pub abar: Vec<([f64; 2], [f64; 2])>,
    /// `max |grad_q Fbar(p, abar(p)) - p|`.
    pub abar_consistency: f64,
    pub abar_monotone: MonotoneReport,
    /// `((q*, p*), (Pbar, Qbar))`.
    pub dual_pairs: Vec<([f64; 4], [f64; 4])>,
    pub fbar_checks: FbarChecks,
}

/// Grid checks of the growth, convexity and pairing properties of `Fbar`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FbarChecks {
    pub below_pairing: usize,
    pub midpoint_pairs: usize,
    pub midpoint_violations: usize,
    pub growth_violations: usize,
}

impl FbarChecks {
    pub fn passed(&self) -> bool {
        self.below_pairing == 0 && self.midpoint_violations == 0 && self.growth_violations == 0
    }
}

impl HomogenizedModel {
    /// Largest `|Fbar - closure| - width` over trusted nodes (`<= tabulation_error` when closed).
    pub fn closure_excess(&self) -> f64 {
        self.rows.iter().filter(|r| r.trusted).map(|r| (r.fbar - r.closure).abs() - r.bracket_width).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max |Fbar - closure|` over the table and the untrusted count.
    pub fn closure_deviation(&self) -> (f64, usize) {
        let dev = self.rows.iter().map(|r| (r.fbar - r.closure).abs()).fold(0.0, f64::max);
        (dev, self.rows.iter().filter(|r| !r.trusted).count())
    }

    pub fn abar(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let q = recover_monotone_map(self.fbar.integrand(), &p)?;
        Ok([q[0], q[1]])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.fbar_table.write_hglf(std::fs::File::create(dir.join("fbar.hglf"))?)?;
        self.mubar_table.write_hglf(std::fs::File::create(dir.join("mubar.hglf"))?)?;
        let mut f = std::fs::File::create(dir.join("model_grid.csv"))?;
        writeln!(f, "p1,p2,q1,q2,fbar,fbar_se,qstar1,qstar2,pstar1,pstar2,mu_at_dual,mu_se,bracket_width,closure,trusted")?;
        for r in &self.rows {
            let z = r.z;
            let d = r.dual;
            writeln!(
                f,
                "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                z[0], z[1], z[2], z[3], r.fbar, r.fbar_se, d[0], d[1], d[2], d[3], r.mu_at_dual, r.mu_se, r.bracket_width, r.closure, r.trusted
            )?;
        }
        let mut f = std::fs::File::create(dir.join("abar.csv"))?;
        writeln!(f, "p1,p2,abar1,abar2")?;
        for (p, a) in &self.abar {
            writeln!(f, "{},{},{:e},{:e}", p[0], p[1], a[0], a[1])?;
        }
        let mut f = std::fs::File::create(dir.join("dual_pairs.csv"))?;
        writeln!(f, "qstar1,qstar2,pstar1,pstar2,P1,P2,Q1,Q2")?;
        for (w, z) in &self.dual_pairs {
            writeln!(f, "{},{},{},{},{:e},{:e},{:e},{:e}", w[0], w[1], w[2], w[3], z[0], z[1], z[2], z[3])?;
        }
        Ok(())
    }
}

fn table_nodes(t: &Table) -> Vec<[f64; 4]> {
    let mut z = [0.0; 4];
    (0..t.len())
        .map(|i| {
            t.node_into(i, &mut z);
            z
        })
        .collect()
}

/// `Fbar` from the mean of `mu0` at level `n_top`, `mubar` from the mean of
/// `mu`, cross-checked through the Legendre transform.
pub fn estimate_model(ens: &Ensemble, params: &ModelParams) -> Result<HomogenizedModel> {
    if params.samples < 4 {
        return Err(HomogenizeError::TooFewSamples { needed: 4, got: params.samples });
    }
    if params.pq_points < 3 || params.dual_points < 3 || !(params.pq_bound > 0.0) {
        return Err(HomogenizeError::InvalidInput("tables need >= 3 points per axis and a positive bound".into()));
    }
    let le = LevelEnsemble::new(ens, params.n_top, params.samples, params.sweep)?;
    let env = le.ens.laws.entries.iter().fold(1.0f64, |l, e| l.max(crate::solver::law_window(e)));
    let lambda = env;
    let k0 = ens.spec.k0;

    let pq_spec = TableSpec { bound: params.pq_bound, points: params.pq_points };
    let mut pq_table = Table::cube(4, pq_spec, vec![0.0; params.pq_points.pow(4)])?;
    let pq_nodes = table_nodes(&pq_table);
    let s0 = le.stats(&pq_nodes, true)?;
    for (v, s) in pq_table.values.iter_mut().zip(&s0) {
        *v = s.mean;
    }
    let fbar = match le.responses() {
        Some(rs) => {
            let mut m = [[0.0; 4]; 4];
            for r in rs {
                let b = r.mu0_matrix();
                for i in 0..4 {
                    for j in 0..4 {
                        m[i][j] += b[i][j] / rs.len() as f64;
                    }
                }
            }
            Fbar::Quadratic(QuadraticIntegrand { m, lambda })
        }
        None => {
            let g = node_gradients(&pq_table);
            Fbar::Table(Tabulated::with_gradients(2, pq_table.clone(), g, Some(lambda), k0)?)
        }
    };
    let fbar_table = Tabulated::with_gradients(2, pq_table.clone(), node_gradients(&pq_table), Some(lambda), k0)?;

    // dual points of the table nodes and the bracket there
    let duals: Vec<[f64; 4]> = pq_nodes.iter().map(|z| fbar.value_grad(*z).map(|(_, g)| g)).collect::<Result<_>>()?;
    let s1 = le.stats(&duals, false)?;

    let dual_bound = 1.25 * duals.iter().flat_map(|d| d.iter().map(|x| x.abs())).fold(1e-3, f64::max);
    let dual_spec = TableSpec { bound: dual_bound, points: params.dual_points };
    let mut mu_table = Table::cube(4, dual_spec, vec![0.0; params.dual_points.pow(4)])?;
    let dual_nodes = table_nodes(&mu_table);
    let sm = le.stats(&dual_nodes, false)?;
    for (v, s) in mu_table.values.iter_mut().zip(&sm) {
        *v = s.mean;
    }
    let neg = Table::new(mu_table.lo.clone(), mu_table.hi.clone(), mu_table.shape.clone(), mu_table.values.iter().map(|v| -v).collect())?;
    let closure = legendre_transform(&neg, &pq_table)?;
    let h = mu_table.step(0);
    let tabulation_error = lambda * 4.0 * h * h / 8.0;
    let mubar_table = Tabulated::with_gradients(2, mu_table.clone(), node_gradients(&mu_table), Some(lambda), k0)?;

    let rows: Vec<GridRow> = (0..pq_nodes.len())
        .map(|i| {
            let z = pq_nodes[i];
            let d = duals[i];
            let pairing: f64 = (0..4).map(|a| z[a] * d[a]).sum();
            let gap = s0[i].mean - s1[i].mean - pairing;
            GridRow {
                z,
                fbar: s0[i].mean,
                fbar_se: s0[i].se,
                dual: d,
                mu_at_dual: s1[i].mean,
                mu_se: s1[i].se,
                bracket_width: gap + 2.0 * (s0[i].se + s1[i].se),
                closure: closure.table.values[i],
                trusted: closure.trusted[i],
            }
        })
        .collect();
    let max_width = rows.iter().map(|r| r.bracket_width).fold(0.0, f64::max);

    let f = fbar.integrand();
    let mut abar = Vec::new();
    let mut consistency: f64 = 0.0;
    for p in &params.p_grid {
        let q = recover_monotone_map(f, p)?;
        let (mut gp, mut gq) = ([0.0; 2], [0.0; 2]);
        f.value_grad(p, &q, &mut gp, &mut gq)?;
        consistency = consistency.max(((gq[0] - p[0]).powi(2) + (gq[1] - p[1]).powi(2)).sqrt());
        abar.push((*p, [q[0], q[1]]));
    }
    let eval = |p: &[f64]| recover_monotone_map(f, p);
    let abar_monotone = check_monotone(&eval, 2, 4.0 * lambda, 100, 0.25 * params.pq_bound, 7);

    let conj = Conjugate(f);
    let mut dual_pairs = Vec::new();
    for w in &params.dual_queries {
        let (mut gp, mut gq) = ([0.0; 2], [0.0; 2]);
        conj.value_grad(&w[..2], &w[2..], &mut gp, &mut gq)?;
        dual_pairs.push((*w, [gp[0], gp[1], gq[0], gq[1]]));
    }

    let fbar_checks = fbar_grid_checks(&pq_table, &s0, lambda, &le);
    Ok(HomogenizedModel {
        n_top: params.n_top,
        samples: params.samples,
        fbar,
        fbar_table,
        mubar_table,
        rows,
        closure,
        tabulation_error,
        lambda,
        max_width,
        low_confidence: max_width > params.width_ceiling,
        abar,
        abar_consistency: consistency,
        abar_monotone,
        dual_pairs,
        fbar_checks,
    })
}

/// `Fbar >= p.q`, growth envelope and the midpoint window on node triples
/// `(z1, (z1+z2)/2, z2)` of the table.
fn fbar_grid_checks(t: &Table, stats: &[Stat], lambda: f64, le: &LevelEnsemble) -> FbarChecks {
    let mut out = FbarChecks::default();
    let env = Some(envelope_of(&le.ens.laws));
    let k = t.rank();
    let mut z = vec![0.0; k];
    for (i, s) in stats.iter().enumerate() {
        t.node_into(i, &mut z);
        let slack = s.eps + 1e-12 * (1.0 + s.mean.abs());
        if s.mean < z[0] * z[2] + z[1] * z[3] - slack {
            out.below_pairing += 1;
        }
        if let Some(e) = env {
            let z2: f64 = z.iter().map(|x| x * x).sum();
            let (lo, hi) = (e.lo * z2 - e.m, e.hi * z2 + e.m);
            if s.mean < lo - slack || s.mean > hi + slack {
                out.growth_violations += 1;
            }
        }
    }
    let strides = t.strides();
    let mut a = vec![0; k];
    let mut b = vec![0; k];
    for i in 0..t.len() {
        t.unravel(i, &mut a);
        for j in (i + 1)..t.len() {
            t.unravel(j, &mut b);
            if (0..k).any(|x| (a[x] + b[x]) % 2 == 1) {
                continue;
            }
            let mid: usize = (0..k).map(|x| (a[x] + b[x]) / 2 * strides[x]).sum();
            let d2: f64 = (0..k).map(|x| ((a[x] as f64 - b[x] as f64) * t.step(x)).powi(2)).sum();
            let defect = 0.5 * (t.values[i] + t.values[j]) - t.values[mid];
            let slack = stats[i].eps + stats[j].eps + stats[mid].eps + 1e-12 * (1.0 + t.values[mid].abs());
            out.midpoint_pairs += 1;
            if defect < d2 / (8.0 * lambda) - slack || defect > lambda * d2 / 8.0 + slack {
                out.midpoint_violations += 1;
            }
        }
    }
    out
}

/// `|mu0(U,p,q) - Fbar(p,q)| + |mu(U, grad Fbar(p,q)) + grad Fbar(p,q).(p,q) - Fbar(p,q)|`.
///
/// The second term measures `mu` against its limit `mubar(x) = Fbar(p,q) - x.(p,q)`
/// at the dual point `x = grad Fbar(p,q)`, so both terms vanish for a
/// constant field.
pub fn error_e(medium: &Medium, cube: &TriadicCube, p: [f64; 2], q: [f64; 2], fbar: &Fbar, params: &SolverParams) -> Result<f64> {
    let z = [p[0], p[1], q[0], q[1]];
    let (fz, x) = fbar.value_grad(z)?;
    let (mu0, _) = crate::subadd::solve_mu0(medium, cube, p, q, params)?;
    let (mu, _) = crate::subadd::solve_mu(medium, cube, [x[0], x[1]], [x[2], x[3]], params)?;
    let pairing: f64 = (0..4).map(|i| x[i] * z[i]).sum();
    Ok((mu0 - fz).abs() + (mu + pairing - fz).abs())
}

/// Log-linear fit `log e = c - alpha n log 3` and a log-tail exponent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    pub alpha: f64,
    pub alpha_se: f64,
    /// Two-sided 95% interval for `alpha`.
    pub alpha_ci: (f64, f64),
    /// Root-mean-square residual of the log fit.
    pub residual: f64,
    pub s_hat: Option<f64>,
    pub s_residual: Option<f64>,
}

impl RateFit {
    pub fn positive_at_95(&self) -> bool {
        self.alpha_ci.0 > 0.0
    }
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let dof = (x.len() as f64 - 2.0).max(1.0);
    let se = (ss / dof / sxx).sqrt();
    (slope, icpt, se, (ss / n).sqrt())
}

/// Fit from `(level, value)` observations (level means or individual
/// samples); `tail` holds per-sample errors at the top level.
pub fn fit_rate(obs: &[(u32, f64)], tail: &[f64]) -> Result<RateFit> {
    let mut levels: Vec<u32> = obs.iter().map(|o| o.0).collect();
    levels.sort();
    levels.dedup();
    if levels.len() < 3 {
        return Err(HomogenizeError::FitRefused(format!("need >= 3 levels, got {}", levels.len())));
    }
    if let Some(bad) = obs.iter().find(|o| !(o.1 > 0.0) || !o.1.is_finite()) {
        return Err(HomogenizeError::FitRefused(format!("non-positive value {} at level {}", bad.1, bad.0)));
    }
    let x: Vec<f64> = obs.iter().map(|o| o.0 as f64 * 3f64.ln()).collect();
    let y: Vec<f64> = obs.iter().map(|o| o.1.ln()).collect();
    let (slope, _, se, residual) = linear_fit(&x, &y);
    let dof = (obs.len() as f64 - 2.0).max(1.0);
    let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| HomogenizeError::FitRefused(e.to_string()))?.inverse_cdf(0.975);
    let alpha = -slope;
    let (s_hat, s_residual) = match tail_fit(tail) {
        Some((s, r)) => (Some(s), Some(r)),
        None => (None, None),
    };
    Ok(RateFit { alpha, alpha_se: se, alpha_ci: (alpha - t * se, alpha + t * se), residual, s_hat, s_residual })
}

/// Slope of `log P[X >= t]` against `log t` over the upper half of the sample.
fn tail_fit(v: &[f64]) -> Option<(f64, f64)> {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| *x > 0.0 && x.is_finite()).collect();
    if s.len() < 8 {
        return None;
    }
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n = s.len() as f64;
    let m = s.len() / 2;
    let x: Vec<f64> = s[..m].iter().map(|t| t.ln()).collect();
    let y: Vec<f64> = (0..m).map(|i| ((i as f64 + 0.5) / n).ln()).collect();
    if x.iter().all(|a| (a - x[0]).abs() < 1e-14) {
        return None;
    }
    let (slope, _, _, r) = linear_fit(&x, &y);
    Some((-slope, r))
}

/// Rate fit of a scale curve's bracket gaps.
pub fn fit_curve(curve: &ScaleCurve) -> Result<RateFit> {
    let obs: Vec<(u32, f64)> = curve.levels.iter().map(|l| (l.n, l.gap)).collect();
    fit_rate(&obs, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Phase;

    fn ens(phases: Vec<Phase>, lambda: f64) -> Ensemble {
        let spec = EnsembleSpec::checkerboard(phases, lambda, 21).unwrap();
        Ensemble::new("test", spec, TableSpec { bound: 1.0, points: 3 }).unwrap()
    }

    #[test]
    fn constant_field_curves_are_flat() {
        let e = ens(vec![Phase::linear(1.0)], 1.0);
        let pt = ParamPoint { p: [1.0, 0.0], q: [0.5, 0.0], qstar: [1.0, 0.0], pstar: [0.5, 0.0] };
        let (c, recs) = scale_sweep(&e, &[1, 2], pt, 4, SweepParams::default()).unwrap();
        assert_eq!(recs.len(), 2 * 2 * 4);
        for l in &c.levels {
            assert!((l.mu0.mean - 0.625).abs() < 1e-10);
            assert!((l.mu.mean + 0.625).abs() < 1e-8);
            assert!(l.gap.abs() < 1e-8);
            assert_eq!(l.trap_violations, 0);
        }
        assert!(c.is_monotone());
    }

    #[test]
    fn too_few_samples_refused() {
        let e = ens(vec![Phase::linear(1.0)], 1.0);
        let pt = ParamPoint { p: [1.0, 0.0], q: [0.0; 2], qstar: [0.0; 2], pstar: [0.0; 2] };
        assert!(matches!(scale_sweep(&e, &[1], pt, 3, SweepParams::default()), Err(HomogenizeError::TooFewSamples { .. })));
    }

    #[test]
    fn constant_field_model_is_the_integrand() {
        let e = ens(vec![Phase::linear(1.0)], 1.0);
        let prm = ModelParams { n_top: 1, samples: 4, dual_points: 9, ..Default::default() };
        let m = estimate_model(&e, &prm).unwrap();
        for r in &m.rows {
            let f = 0.5 * r.z.iter().map(|x| x * x).sum::<f64>();
            assert!((r.fbar - f).abs() < 1e-10);
            for a in 0..4 {
                assert!((r.dual[a] - r.z[a]).abs() < 1e-8);
            }
        }
        for (p, a) in &m.abar {
            assert!((p[0] - a[0]).abs() < 1e-8 && (p[1] - a[1]).abs() < 1e-8);
        }
        let (w, z) = m.dual_pairs[0];
        assert_eq!(w, [1.0, 0.0, 0.0, 0.0]);
        assert!((z[0] - 1.0).abs() < 1e-8 && z[1].abs() < 1e-8 && z[2].abs() < 1e-8 && z[3].abs() < 1e-8);
        assert!(m.fbar_checks.passed(), "{:?}", m.fbar_checks);
        assert!(m.closure_excess() <= m.tabulation_error);
        assert!(m.abar_consistency < 1e-8);
        assert_eq!(m.abar_monotone.violations, 0);
        let med = e.medium(1, 0).unwrap();
        let cube = TriadicCube::new(2, 1, false, 1.0).unwrap();
        let err = error_e(&med, &cube, [0.3, -0.2], [1.0, 0.4], &m.fbar, &SolverParams::default()).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn geometric_errors_give_unit_rate() {
        let obs: Vec<(u32, f64)> = (1..=5).map(|n| (n, 0.7 * 3f64.powi(-(n as i32)))).collect();
        let f = fit_rate(&obs, &[]).unwrap();
        assert!((f.alpha - 1.0).abs() < 1e-6);
        assert!(f.residual < 1e-10);
    }

    #[test]
    fn zero_errors_refused() {
        let obs: Vec<(u32, f64)> = (1..=4).map(|n| (n, 0.0)).collect();
        assert!(matches!(fit_rate(&obs, &[]), Err(HomogenizeError::FitRefused(_))));
        assert!(fit_rate(&[(1, 1.0), (2, 0.5)], &[]).is_err());
    }

    #[test]
    fn tail_fit_recovers_pareto_exponent() {
        // quantiles of a Pareto law with exponent 3
        let n = 400;
        let v: Vec<f64> = (0..n).map(|i| ((i as f64 + 0.5) / n as f64).powf(-1.0 / 3.0)).collect();
        let (s, _) = tail_fit(&v).unwrap();
        assert!((s - 3.0).abs() < 0.05, "{s}");
    }

    #[test]
    fn nonlinear_phase_goes_through_tables() {
        let phases = vec![Phase::linear(1.0), Phase { c: 1.5, b: 0.5 }];
        let spec = EnsembleSpec::checkerboard(phases, 3.0, 4).unwrap();
        let e = Ensemble::new("nl", spec, TableSpec { bound: 2.5, points: 7 }).unwrap();
        assert!(!e.laws.is_quadratic());
        let pt = ParamPoint { p: [0.5, 0.0], q: [0.6, 0.0], qstar: [0.6, 0.0], pstar: [0.5, 0.0] };
        let (c, _) = scale_sweep(&e, &[0, 1], pt, 4, SweepParams::default()).unwrap();
        for l in &c.levels {
            assert_eq!(l.trap_violations, 0, "{l:?}");
            assert!(l.mu0.eps <= 1e-8 && l.mu.eps <= 1e-8);
        }
    }

    #[test]
    fn checkerboard_trap_holds_at_small_levels() {
        let e = ens(vec![Phase::linear(1.0), Phase::linear(4.0)], 4.0);
        let pt = ParamPoint { p: [1.0, 0.0], q: [2.0, 0.0], qstar: [2.0, 0.0], pstar: [1.0, 0.0] };
        let (c, _) = scale_sweep(&e, &[1, 2], pt, 6, SweepParams::default()).unwrap();
        for l in &c.levels {
            assert_eq!(l.trap_violations, 0);
            assert!(l.gap > 0.0);
        }
    }
}
