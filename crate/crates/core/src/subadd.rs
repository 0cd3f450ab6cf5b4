//! The cell quantities
//!
//! ```text
//! mu(U, q*, p*) = inf  avg_U F(grad u, g, x) - q*.grad u - p*.g     (u free, g solenoidal)
//! mu0(U, p, q)  = inf  avg_U F(p + grad v, q + h, x)                (v = 0, h.n = 0 on dU)
//! ```
//!
//! on triadic cubes. Solenoidal fields are parametrized as `curl psi`, with
//! `psi` free (all of the discrete solenoidal fields on a square) or zero on
//! the boundary (zero normal flux).

use crate::fields::{CoefficientSample, IntegrandCache, PhaseIntegrand};
use crate::grid::{Boundary, Grid2, GridError, GridField, Location, TriadicCube};
use crate::solver::{law_value_grad, law_window, BoundaryMode, CellProblem, NewtonParams, SolveError};
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubaddError {
    #[error("cube is not contained in the sample region")]
    CubeOutsideSample,
    #[error("domain is not a triadic cube: {0}")]
    NonCubeDomain(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("post-check failed: {0}")]
    BoundViolated(String),
    #[error("quadratic response needs linear phases")]
    NotQuadratic,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SubaddError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverParams {
    /// Grid cells per unit length.
    pub r_cell: usize,
    pub newton: NewtonParams,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams { r_cell: 3, newton: NewtonParams::default() }
    }
}

/// A coefficient sample together with the integrand of each of its phases.
#[derive(Clone, Debug)]
pub struct Medium {
    pub sample: CoefficientSample,
    pub laws: IntegrandCache,
}

impl Medium {
    pub fn new(sample: CoefficientSample, laws: IntegrandCache) -> Self {
        Medium { sample, laws }
    }

    /// Law index of every grid cell of `grid`.
    pub fn cell_laws(&self, grid: &Grid2) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(grid.num_cells());
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let z = CoefficientSample::cell_of(grid.cell_center(i, j));
                out.push(self.sample.phase_at(z).ok_or(SubaddError::CubeOutsideSample)?);
            }
        }
        Ok(out)
    }

    /// Quadratic envelope `lo |z|^2 - m <= F(z, x) <= hi |z|^2 + m` valid on
    /// every phase present in the cube.
    pub fn envelope(&self) -> Envelope {
        envelope_of(&self.laws)
    }
}

/// Envelope valid for every law of the cache.
pub fn envelope_of(laws: &IntegrandCache) -> Envelope {
    {
        let mut env = Envelope { lo: f64::INFINITY, hi: 0.0, m: 0.0, lambda: 1.0 };
        for law in &laws.entries {
            let e = law_envelope(law);
            env.lo = env.lo.min(e.lo);
            env.hi = env.hi.max(e.hi);
            env.m = env.m.max(e.m);
            env.lambda = env.lambda.max(e.lambda);
        }
        env
    }
}

/// Constants of the explicit bounds checked after every solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Envelope {
    pub lo: f64,
    pub hi: f64,
    pub m: f64,
    /// Convexity window of the integrands.
    pub lambda: f64,
}

impl Envelope {
    /// Interval containing `mu0(U, p, q)`: Jensen below, the zero competitor above.
    pub fn mu0_bounds(&self, z2: f64) -> (f64, f64) {
        (self.lo * z2 - self.m, self.hi * z2 + self.m)
    }

    /// Interval containing `mu(U, q*, p*)`.
    pub fn mu_bounds(&self, lin2: f64) -> (f64, f64) {
        (-lin2 / (4.0 * self.lo) - self.m, self.m)
    }

    /// Lipschitz constant of `mu` in `(q*, p*)` on the ball of radius `r`:
    /// the dual pair `(P, Q)` of a minimizer has norm at most
    /// `r / lo + sqrt(2 m / lo)`.
    pub fn mu_lipschitz(&self, r: f64) -> f64 {
        r / self.lo + (2.0 * self.m / self.lo).sqrt()
    }
}

fn law_envelope(law: &PhaseIntegrand) -> Envelope {
    match law {
        PhaseIntegrand::Quadratic { c } => {
            let (a, b) = (c.min(1.0 / c), c.max(1.0 / c));
            Envelope { lo: 0.5 * a, hi: 0.5 * b, m: 0.0, lambda: b }
        }
        PhaseIntegrand::Table(t) => {
            let lam = t.lambda.unwrap_or(1.0);
            let (lo, hi) = (0.25 / lam, lam);
            let mut m: f64 = 0.0;
            let mut z = vec![0.0; t.table.rank()];
            for (k, &v) in t.table.values.iter().enumerate() {
                t.table.node_into(k, &mut z);
                let z2: f64 = z.iter().map(|x| x * x).sum();
                m = m.max(lo * z2 - v).max(v - hi * z2);
            }
            Envelope { lo, hi, m, lambda: lam }
        }
        PhaseIntegrand::Form(b) => {
            let (a, c) = crate::solver::form_eigen_range(b);
            Envelope { lo: 0.5 * a, hi: 0.5 * c, m: 0.0, lambda: c.max(1.0 / a) }
        }
    }
}

/// Minimizer of one cell problem.
#[derive(Clone, Debug)]
pub struct MinimizerPair {
    /// Scalar potential (`u` for mu, the perturbation `v` for mu0).
    pub u: GridField,
    /// Solenoidal field on cells (`g` for mu, the perturbation `h` for mu0).
    pub g: GridField,
    /// Stream function with `g = curl psi`.
    pub psi: GridField,
    pub energy: f64,
    /// Bound on the energy excess over the exact discrete minimum.
    pub residual: f64,
    /// `avg grad u` (including the background for mu0).
    pub p_avg: [f64; 2],
    /// `avg g` (including the background for mu0).
    pub q_avg: [f64; 2],
    pub newton_iterations: usize,
    pub cg_iterations: usize,
    /// Packed `[u; psi]`, usable as a warm start.
    pub state: Vec<f64>,
}

fn check_cube(cube: &TriadicCube) -> Result<()> {
    if cube.dim() != 2 {
        return Err(SubaddError::NonCubeDomain(format!("dimension {} (only 2 supported)", cube.dim())));
    }
    Ok(())
}

/// The triadic cube occupying the cell box `[lo, hi)`. Anything that is not a
/// square of side `3^n` centred on `3^n Z^2` is refused: on other domains the
/// stream image need not exhaust the solenoidal fields.
pub fn domain_cube(lo: [i64; 2], hi: [i64; 2]) -> Result<TriadicCube> {
    let (w, h) = (hi[0] - lo[0], hi[1] - lo[1]);
    if w != h || w <= 0 {
        return Err(SubaddError::NonCubeDomain(format!("box {lo:?}..{hi:?} is not square")));
    }
    let mut n = 0u32;
    let mut s = 1i64;
    while s < w {
        s *= 3;
        n += 1;
    }
    if s != w {
        return Err(SubaddError::NonCubeDomain(format!("side {w} is not a power of 3")));
    }
    let center = vec![lo[0] + w / 2, lo[1] + w / 2];
    TriadicCube::at(center, n, false, 1.0).map_err(|e| SubaddError::NonCubeDomain(e.to_string()))
}

fn problem<'a>(
    medium: &'a Medium,
    grid: Grid2,
    mode: BoundaryMode,
    z0: [f64; 4],
    lin: [f64; 4],
) -> Result<CellProblem<'a>> {
    Ok(CellProblem { grid, law: medium.cell_laws(&grid)?, laws: &medium.laws.entries, u_mode: mode, psi_mode: mode, z0, lin, z0_cells: None, lin_cells: None })
}

fn pair_from(problem: &CellProblem, sol: crate::solver::Solution, boundary: Boundary) -> MinimizerPair {
    let grid = problem.grid;
    let nn = grid.num_nodes();
    let nc = grid.num_cells();
    let mut u = GridField::zeros(grid, Location::Node, 1, boundary);
    u.values.copy_from_slice(&sol.x[..nn]);
    let mut psi = GridField::zeros(grid, Location::Node, 1, boundary);
    psi.values.copy_from_slice(&sol.x[nn..]);
    let mut g = GridField::zeros(grid, Location::Cell, 2, boundary);
    grid.curl_into(&psi.values, &mut g.values);
    let mut du = vec![0.0; 2 * nc];
    grid.gradient_into(&u.values, &mut du);
    let mut p_avg = [problem.z0[0], problem.z0[1]];
    let mut q_avg = [problem.z0[2], problem.z0[3]];
    for c in 0..nc {
        for a in 0..2 {
            p_avg[a] += du[2 * c + a] / nc as f64;
            q_avg[a] += g.values[2 * c + a] / nc as f64;
        }
    }
    MinimizerPair {
        u,
        g,
        psi,
        energy: sol.value,
        residual: sol.gap,
        p_avg,
        q_avg,
        newton_iterations: sol.newton_iterations,
        cg_iterations: sol.cg_iterations,
        state: sol.x,
    }
}

/// `mu(cube, q*, p*)` and its minimizer, optionally warm-started.
pub fn solve_mu_from(
    medium: &Medium,
    cube: &TriadicCube,
    qstar: [f64; 2],
    pstar: [f64; 2],
    params: &SolverParams,
    init: Option<&[f64]>,
) -> Result<(f64, MinimizerPair)> {
    check_cube(cube)?;
    let grid = cube.grid(params.r_cell)?;
    let pb = problem(medium, grid, BoundaryMode::Free, [0.0; 4], [qstar[0], qstar[1], pstar[0], pstar[1]])?;
    let sol = pb.minimize(init, &params.newton)?;
    let pair = pair_from(&pb, sol, Boundary::Free);
    let lin2: f64 = qstar.iter().chain(&pstar).map(|x| x * x).sum();
    let (lo, hi) = medium.envelope().mu_bounds(lin2);
    let slack = pair.residual + 1e-12 * (1.0 + lin2);
    if pair.energy < lo - slack || pair.energy > hi + slack {
        return Err(SubaddError::BoundViolated(format!("mu = {} outside [{lo}, {hi}]", pair.energy)));
    }
    Ok((pair.energy, pair))
}

pub fn solve_mu(medium: &Medium, cube: &TriadicCube, qstar: [f64; 2], pstar: [f64; 2], params: &SolverParams) -> Result<(f64, MinimizerPair)> {
    solve_mu_from(medium, cube, qstar, pstar, params, None)
}

/// `mu0(cube, p, q)` and its minimizer, optionally warm-started.
pub fn solve_mu0_from(
    medium: &Medium,
    cube: &TriadicCube,
    p: [f64; 2],
    q: [f64; 2],
    params: &SolverParams,
    init: Option<&[f64]>,
) -> Result<(f64, MinimizerPair)> {
    check_cube(cube)?;
    let grid = cube.grid(params.r_cell)?;
    let pb = problem(medium, grid, BoundaryMode::Zero, [p[0], p[1], q[0], q[1]], [0.0; 4])?;
    let sol = pb.minimize(init, &params.newton)?;
    let pair = pair_from(&pb, sol, Boundary::Zero);
    let pq = p[0] * q[0] + p[1] * q[1];
    let z2: f64 = p.iter().chain(&q).map(|x| x * x).sum();
    let (lo, hi) = medium.envelope().mu0_bounds(z2);
    // the zero-boundary solve is exactly an upper bound, so no slack above
    let slack = pair.residual + 1e-12 * (1.0 + z2);
    if pair.energy < pq - slack {
        return Err(SubaddError::BoundViolated(format!("mu0 = {} below p.q = {pq}", pair.energy)));
    }
    if pair.energy < lo - slack || pair.energy > hi + 1e-12 * (1.0 + z2) {
        return Err(SubaddError::BoundViolated(format!("mu0 = {} outside [{lo}, {hi}]", pair.energy)));
    }
    Ok((pair.energy, pair))
}

pub fn solve_mu0(medium: &Medium, cube: &TriadicCube, p: [f64; 2], q: [f64; 2], params: &SolverParams) -> Result<(f64, MinimizerPair)> {
    solve_mu0_from(medium, cube, p, q, params, None)
}

/// A computed value that overestimates the exact discrete infimum by at most `eps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub eps: f64,
}

/// For linear phases both quantities are quadratic forms of their
/// arguments. Four unit solves per quantity determine them completely, and
/// the superposed minimizers stay feasible, so every value below is the
/// energy of an admissible pair and its excess is bounded exactly.
#[derive(Clone, Debug)]
pub struct QuadraticResponse {
    lambda: f64,
    nc: f64,
    /// `mu0(z) = z^T b z / 2` with `b_ij = avg (e_i + D x_i) . H (e_j + D x_j)`.
    b: [[f64; 4]; 4],
    gram0: Vec<Vec<f64>>,
    /// `k_ij = avg D x_i . H D x_j`, `l_ij = avg (D x_j)_i` for the mu correctors.
    k: [[f64; 4]; 4],
    l: [[f64; 4]; 4],
    gram: Vec<Vec<f64>>,
    pub newton_iterations: usize,
    pub cg_iterations: usize,
}

fn quad(m: &[[f64; 4]; 4], a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (0..4).map(|i| (0..4).map(|j| a[i] * m[i][j] * b[j]).sum::<f64>()).sum()
}

fn gram_quad(m: &[Vec<f64>], a: &[f64; 4]) -> f64 {
    (0..4).map(|i| (0..4).map(|j| a[i] * m[i][j] * a[j]).sum::<f64>()).sum()
}

impl QuadraticResponse {
    pub fn compute(medium: &Medium, cube: &TriadicCube, params: &SolverParams) -> Result<Self> {
        check_cube(cube)?;
        if !medium.laws.is_quadratic() {
            return Err(SubaddError::NotQuadratic);
        }
        let grid = cube.grid(params.r_cell)?;
        let nc = grid.num_cells();
        let mut newton = params.newton;
        newton.gap_tol *= 1e-2;
        let (mut nit, mut cgit) = (0, 0);
        let unit = |i: usize| {
            let mut e = [0.0; 4];
            e[i] = 1.0;
            e
        };
        // cell states of the unit minimizers, minus backgrounds
        let mut states0 = Vec::new();
        let mut states = Vec::new();
        let mut grads0 = Vec::new();
        let mut grads = Vec::new();
        let mut pb0 = None;
        let mut pb1 = None;
        for i in 0..4 {
            let p0 = problem(medium, grid, BoundaryMode::Zero, unit(i), [0.0; 4])?;
            let s0 = p0.minimize(None, &newton)?;
            nit += s0.newton_iterations;
            cgit += s0.cg_iterations;
            let mut cw = Vec::new();
            states0.push(p0.cell_states(&s0.x, &mut cw));
            grads0.push(p0.gradient_at(&s0.x)?);
            pb0 = Some(p0);
            let p1 = problem(medium, grid, BoundaryMode::Free, [0.0; 4], unit(i))?;
            let s1 = p1.minimize(None, &newton)?;
            nit += s1.newton_iterations;
            cgit += s1.cg_iterations;
            states.push(p1.cell_states(&s1.x, &mut cw));
            grads.push(p1.gradient_at(&s1.x)?);
            pb1 = Some(p1);
        }
        let (pb0, pb1) = (pb0.unwrap(), pb1.unwrap());
        let mut b = [[0.0; 4]; 4];
        let mut k = [[0.0; 4]; 4];
        let mut l = [[0.0; 4]; 4];
        for c in 0..nc {
            let law = &medium.laws.entries[pb0.law[c]];
            let hz0: Vec<[f64; 4]> = (0..4).map(|j| law_value_grad(law, &states0[j][c]).map(|r| r.1)).collect::<std::result::Result<_, _>>()?;
            let hz: Vec<[f64; 4]> = (0..4).map(|j| law_value_grad(law, &states[j][c]).map(|r| r.1)).collect::<std::result::Result<_, _>>()?;
            for i in 0..4 {
                for j in 0..4 {
                    let z0i = &states0[i][c];
                    b[i][j] += (0..4).map(|a| z0i[a] * hz0[j][a]).sum::<f64>();
                    k[i][j] += (0..4).map(|a| states[i][c][a] * hz[j][a]).sum::<f64>();
                    l[i][j] += states[j][c][i];
                }
            }
        }
        let n = nc as f64;
        for m in [&mut b, &mut k, &mut l] {
            for row in m.iter_mut() {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        let gram0 = pb0.dual_gram(&grads0);
        let gram = pb1.dual_gram(&grads);
        let lambda = pb0.window().max(pb1.window());
        Ok(QuadraticResponse { lambda, nc: n, b, gram0, k, l, gram, newton_iterations: nit, cg_iterations: cgit })
    }

    pub fn mu0(&self, p: [f64; 2], q: [f64; 2]) -> Estimate {
        let z = [p[0], p[1], q[0], q[1]];
        let value = 0.5 * quad(&self.b, &z, &z);
        let eps = 0.5 * self.lambda * gram_quad(&self.gram0, &z).max(0.0) / self.nc;
        Estimate { value, eps: eps + 1e-14 * (1.0 + value.abs()) }
    }

    pub fn mu(&self, qstar: [f64; 2], pstar: [f64; 2]) -> Estimate {
        let lin = [qstar[0], qstar[1], pstar[0], pstar[1]];
        let value = 0.5 * quad(&self.k, &lin, &lin) - quad(&self.l, &lin, &lin);
        let eps = 0.5 * self.lambda * gram_quad(&self.gram, &lin).max(0.0) / self.nc;
        Estimate { value, eps: eps + 1e-14 * (1.0 + value.abs()) }
    }

    /// Averages `(P, Q)` of the minimizer of `mu(q*, p*)`.
    pub fn dual_pair(&self, qstar: [f64; 2], pstar: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let lin = [qstar[0], qstar[1], pstar[0], pstar[1]];
        let a: [f64; 4] = std::array::from_fn(|i| (0..4).map(|j| self.l[i][j] * lin[j]).sum());
        ([a[0], a[1]], [a[2], a[3]])
    }

    /// Symmetric matrix of the quadratic form `mu0`.
    pub fn mu0_matrix(&self) -> [[f64; 4]; 4] {
        self.b
    }
}

/// Residuals of super/subadditivity over the `3^d` children of a cube.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionReport {
    pub mu_parent: f64,
    pub mu_children: f64,
    pub mu0_parent: f64,
    pub mu0_children: f64,
    /// `mu(parent) - avg mu(children)`; should be `>= -eps`.
    pub super_residual: f64,
    /// `avg mu0(children) - mu0(parent)`; should be `>= -eps`.
    pub sub_residual: f64,
    pub eps: f64,
}

impl PartitionReport {
    pub fn passed(&self) -> bool {
        self.super_residual >= -self.eps && self.sub_residual >= -self.eps
    }
}

pub fn check_partition(
    medium: &Medium,
    parent: &TriadicCube,
    p: [f64; 2],
    q: [f64; 2],
    qstar: [f64; 2],
    pstar: [f64; 2],
    params: &SolverParams,
) -> Result<PartitionReport> {
    let children = parent.children()?;
    let (mu_p, a) = solve_mu(medium, parent, qstar, pstar, params)?;
    let (mu0_p, b) = solve_mu0(medium, parent, p, q, params)?;
    let mut eps = a.residual + b.residual;
    let (mut mu_c, mut mu0_c) = (0.0, 0.0);
    let w = 1.0 / children.len() as f64;
    for ch in &children {
        let (m, pa) = solve_mu(medium, ch, qstar, pstar, params)?;
        let (m0, pb) = solve_mu0(medium, ch, p, q, params)?;
        mu_c += w * m;
        mu0_c += w * m0;
        eps += w * (pa.residual + pb.residual);
    }
    // the averages themselves carry rounding error
    eps += 64.0 * f64::EPSILON * (1.0 + mu_p.abs() + mu_c.abs() + mu0_p.abs() + mu0_c.abs());
    Ok(PartitionReport {
        mu_parent: mu_p,
        mu_children: mu_c,
        mu0_parent: mu0_p,
        mu0_children: mu0_c,
        super_residual: mu_p - mu_c,
        sub_residual: mu0_c - mu0_p,
        eps,
    })
}

/// `mu(q*, p*) <= p.q* + p*.q + mu0(p, q)`, up to the combined solver excess.
pub fn ordering_holds(mu: Estimate, mu0: Estimate, p: [f64; 2], q: [f64; 2], qstar: [f64; 2], pstar: [f64; 2]) -> bool {
    let pairing = p[0] * qstar[0] + p[1] * qstar[1] + pstar[0] * q[0] + pstar[1] * q[1];
    mu.value <= pairing + mu0.value + mu.eps + mu0.eps
}

/// One row of the per-solve log.
#[derive(Clone, Debug, PartialEq)]
pub struct SolveRecord {
    pub ensemble: String,
    /// `mu` or `mu0`.
    pub quantity: &'static str,
    pub seed: u64,
    pub n: u32,
    pub trimmed: bool,
    pub p: [f64; 2],
    pub q: [f64; 2],
    pub pstar: [f64; 2],
    pub qstar: [f64; 2],
    pub value: f64,
    pub residual: f64,
    /// Seconds; `None` when timing is disabled (keeps logs reproducible).
    pub wall_time: Option<f64>,
}

pub const RECORD_HEADER: &str = "ensemble,quantity,seed,n,trimmed,p1,p2,q1,q2,pstar1,pstar2,qstar1,qstar2,value,residual,wall_time";

impl SolveRecord {
    pub fn csv_line(&self) -> String {
        let f = |v: [f64; 2]| format!("{:e},{:e}", v[0], v[1]);
        format!(
            "{},{},{},{},{},{},{},{},{},{:e},{:e},{}",
            self.ensemble,
            self.quantity,
            self.seed,
            self.n,
            self.trimmed,
            f(self.p),
            f(self.q),
            f(self.pstar),
            f(self.qstar),
            self.value,
            self.residual,
            self.wall_time.map(|t| format!("{t:.6}")).unwrap_or_default()
        )
    }
}

/// Append records to `path`, writing the header when the file is new.
pub fn append_records(path: &Path, records: &[SolveRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RECORD_HEADER}")?;
    }
    for r in records {
        writeln!(f, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Runs `f` and returns its result with the elapsed seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

/// Largest convexity window among the laws used on `cube`.
pub fn cube_window(medium: &Medium, cube: &TriadicCube, params: &SolverParams) -> Result<f64> {
    let grid = cube.grid(params.r_cell)?;
    let laws = medium.cell_laws(&grid)?;
    Ok(laws.iter().map(|&l| law_window(&medium.laws.entries[l])).fold(1.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{sample_field, CellBox, EnsembleSpec, Phase};

    fn medium(phases: Vec<Phase>, lambda: f64, seed: u64, side: i64) -> Medium {
        let spec = EnsembleSpec::checkerboard(phases, lambda, 11).unwrap();
        let s = sample_field(&spec, CellBox::centered([0, 0], side).unwrap(), seed).unwrap();
        let laws = IntegrandCache { entries: s.phases.iter().map(|p| PhaseIntegrand::Quadratic { c: p.c }).collect() };
        Medium::new(s, laws)
    }

    fn cube(n: u32) -> TriadicCube {
        TriadicCube::new(2, n, false, 1.0).unwrap()
    }

    #[test]
    fn constant_field_values() {
        let m = medium(vec![Phase::linear(1.0)], 1.0, 0, 9);
        let prm = SolverParams::default();
        let (mu, pair) = solve_mu(&m, &cube(1), [0.0; 2], [0.0; 2], &prm).unwrap();
        assert!(mu.abs() < 1e-14);
        assert!(pair.u.values.iter().all(|v| v.abs() < 1e-14));
        let (mu, pair) = solve_mu(&m, &cube(1), [1.0, 0.0], [0.0; 2], &prm).unwrap();
        assert!((mu + 0.5).abs() < 1e-8, "{mu}");
        assert!((pair.p_avg[0] - 1.0).abs() < 1e-4);
        let (p, q) = ([0.3, -1.0], [2.0, 0.5]);
        let (mu0, pair) = solve_mu0(&m, &cube(1), p, q, &prm).unwrap();
        let expect = 0.5 * (0.09 + 1.0 + 4.0 + 0.25);
        assert!((mu0 - expect).abs() < 1e-12);
        assert!(pair.u.values.iter().chain(&pair.psi.values).all(|v| v.abs() < 1e-12));
        let pq = 0.6 - 0.5;
        let half_diff = 0.5 * ((0.3f64 - 2.0).powi(2) + 1.5f64.powi(2));
        assert!((mu0 - pq - half_diff).abs() < 1e-12);
    }

    #[test]
    fn non_cube_domains_rejected() {
        assert!(domain_cube([0, 0], [9, 3]).is_err());
        assert!(domain_cube([0, 0], [6, 6]).is_err());
        let c = domain_cube([-4, -4], [5, 5]).unwrap();
        assert_eq!(c.level, 2);
        assert!(domain_cube([0, 0], [9, 9]).is_err());
    }

    #[test]
    fn cube_outside_sample_is_an_error() {
        let m = medium(vec![Phase::linear(1.0)], 1.0, 0, 3);
        assert!(matches!(solve_mu(&m, &cube(2), [1.0, 0.0], [0.0; 2], &SolverParams::default()), Err(SubaddError::CubeOutsideSample)));
    }

    #[test]
    fn quadratic_response_matches_direct_solves() {
        let m = medium(vec![Phase::linear(1.0), Phase::linear(4.0)], 4.0, 3, 9);
        let prm = SolverParams::default();
        let qr = QuadraticResponse::compute(&m, &cube(2), &prm).unwrap();
        let (p, q) = ([1.0, 0.3], [-0.4, 1.2]);
        let (mu0, _) = solve_mu0(&m, &cube(2), p, q, &prm).unwrap();
        let e = qr.mu0(p, q);
        assert!((mu0 - e.value).abs() < 2e-8, "{mu0} {}", e.value);
        assert!(e.eps < 1e-8);
        let (qs, ps) = ([0.5, -1.0], [0.2, 0.7]);
        let (mu, pair) = solve_mu(&m, &cube(2), qs, ps, &prm).unwrap();
        let e = qr.mu(qs, ps);
        assert!((mu - e.value).abs() < 2e-8, "{mu} {}", e.value);
        let (pp, qq) = qr.dual_pair(qs, ps);
        for a in 0..2 {
            assert!((pp[a] - pair.p_avg[a]).abs() < 1e-3);
            assert!((qq[a] - pair.q_avg[a]).abs() < 1e-3);
        }
    }

    #[test]
    fn ordering_on_random_tuples() {
        use rand::{Rng, SeedableRng};
        let m = medium(vec![Phase::linear(1.0), Phase::linear(4.0)], 4.0, 5, 9);
        let qr = QuadraticResponse::compute(&m, &cube(2), &SolverParams::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let mut v = || [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let (p, q, qs, ps) = (v(), v(), v(), v());
            assert!(ordering_holds(qr.mu(qs, ps), qr.mu0(p, q), p, q, qs, ps));
        }
    }

    #[test]
    fn partition_inequalities() {
        let prm = SolverParams::default();
        let m = medium(vec![Phase::linear(1.0)], 1.0, 0, 9);
        let r = check_partition(&m, &cube(2), [1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [1.0, 0.0], &prm).unwrap();
        assert!(r.super_residual.abs() <= r.eps + 1e-12 && r.sub_residual.abs() <= r.eps + 1e-12, "{r:?}");
        for seed in 0..2 {
            let m = medium(vec![Phase::linear(1.0), Phase::linear(4.0)], 4.0, seed, 9);
            let r = check_partition(&m, &cube(2), [1.0, 0.0], [2.0, 0.0], [2.0, 0.0], [1.0, 0.0], &prm).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn minimizer_is_unique_and_strictly_optimal() {
        let prm = SolverParams::default();
        let m = medium(vec![Phase::linear(1.0), Phase::linear(4.0)], 4.0, 8, 9);
        let c = cube(2);
        let (qs, ps) = ([1.0, 0.5], [0.0, -0.5]);
        let (mu, a) = solve_mu(&m, &c, qs, ps, &prm).unwrap();
        let init: Vec<f64> = (0..a.state.len()).map(|k| ((k * 37 % 23) as f64 - 11.0) * 0.05).collect();
        let (_, b) = solve_mu_from(&m, &c, qs, ps, &prm, Some(&init)).unwrap();
        let grid = c.grid(prm.r_cell).unwrap();
        let laws = m.cell_laws(&grid).unwrap();
        let pb = CellProblem {
            grid,
            law: laws,
            laws: &m.laws.entries,
            u_mode: BoundaryMode::Free,
            psi_mode: BoundaryMode::Free,
            z0: [0.0; 4],
            lin: [qs[0], qs[1], ps[0], ps[1]],
            z0_cells: None,
            lin_cells: None,
        };
        let dist = |x: &[f64], y: &[f64]| {
            let mut w = Vec::new();
            let zx = pb.cell_states(x, &mut w);
            let zy = pb.cell_states(y, &mut w);
            zx.iter().zip(&zy).map(|(a, b)| (0..4).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>()).sum::<f64>() / zx.len() as f64
        };
        let eps = a.residual + b.residual;
        // strong convexity turns an energy excess eps into an L^2 distance of 2 Lambda eps
        assert!(dist(&a.state, &b.state) <= 10.0 * 2.0 * 4.0 * eps.max(1e-12) + 1e-12);
        // perturbed competitors: distance controlled by 4 Lambda times the excess
        let lam = cube_window(&m, &c, &prm).unwrap();
        for s in [0.01, 0.1, 1.0] {
            let x2: Vec<f64> = a.state.iter().zip(&init).map(|(x, d)| x + s * d).collect();
            let j1 = pb.value(&a.state).unwrap();
            let j2 = pb.value(&x2).unwrap();
            let lhs = dist(&a.state, &x2);
            assert!(lhs <= 4.0 * lam * (j1 + j2 - 2.0 * (mu - a.residual)) + 1e-12, "{lhs}");
        }
    }

    #[test]
    fn mu_is_lipschitz_in_its_arguments() {
        let prm = SolverParams::default();
        let m = medium(vec![Phase::linear(1.0), Phase::linear(4.0)], 4.0, 2, 9);
        let qr = QuadraticResponse::compute(&m, &cube(2), &prm).unwrap();
        let env = m.envelope();
        let pts: [([f64; 2], [f64; 2]); 3] = [([1.0, 0.0], [0.0, 0.0]), ([0.5, -0.2], [1.0, 0.3]), ([0.0, 1.5], [-0.5, 0.0])];
        for (a, b) in pts.iter().zip(pts.iter().skip(1)) {
            let d = ((0..2).map(|i| (a.0[i] - b.0[i]).powi(2) + (a.1[i] - b.1[i]).powi(2)).sum::<f64>()).sqrt();
            let r = [a, b].iter().map(|t| (t.0[0].powi(2) + t.0[1].powi(2) + t.1[0].powi(2) + t.1[1].powi(2)).sqrt()).fold(0.0, f64::max);
            let diff = (qr.mu(a.0, a.1).value - qr.mu(b.0, b.1).value).abs();
            assert!(diff <= env.mu_lipschitz(r) * d + 1e-8);
        }
    }

    #[test]
    fn record_line_has_all_columns() {
        let r = SolveRecord {
            ensemble: "cb".into(),
            quantity: "mu0",
            seed: 3,
            n: 2,
            trimmed: false,
            p: [1.0, 0.0],
            q: [2.0, 0.0],
            pstar: [0.0; 2],
            qstar: [0.0; 2],
            value: 1.5,
            residual: 1e-9,
            wall_time: None,
        };
        assert_eq!(r.csv_line().split(',').count(), RECORD_HEADER.split(',').count());
    }
}
