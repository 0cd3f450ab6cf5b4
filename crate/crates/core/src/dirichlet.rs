//! Dirichlet problems for the heterogeneous and the homogenized equation and
//! regularity diagnostics of their solutions.
//!
//! Every domain is a union of grid cells inside the box of unit cells
//! `|z - center|_inf <= R`. The box itself is solved through the joint
//! functional
//!
//! `J[u, g] = avg ( F(grad u, g, x) - grad u . g )`,
//!
//! over `u in f + H^1_0` and `g in g0 + curl(psi)` with `-div g0 = rhs`,
//! whose minimum is zero exactly at the solution. Discrete balls (grid cells
//! whose centre lies within `R`) are solved by minimizing the potential
//! energy: every phase law `a(p) = (c + b / (1 + |p|)) p` is the gradient of
//! the radial convex potential `c t^2 / 2 + b (t - ln(1 + t))`, `t = |p|`.

use crate::fft::{fft_nd, signed_freq};
use crate::fields::PhaseIntegrand;
use crate::grid::{Boundary, Grid2, GridField, Location};
use crate::homogenize::{Fbar, HomogenizeError, HomogenizedModel};
use crate::solver::{BoundaryMode, CellProblem, Laplacian, NewtonParams, SolveError};
use crate::subadd::{Medium, SubaddError};
use rustfft::num_complex::Complex64;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DirichletError {
    #[error("invalid problem: {0}")]
    InvalidInput(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("radius {r} exceeds the domain radius {max}")]
    RadiusOutsideDomain { r: f64, max: f64 },
    #[error("degenerate affine fit on the ball of radius {0}")]
    DegenerateFit(f64),
    #[error("interior ball of radius {inner} is not compactly inside the domain of radius {outer}")]
    NotCompact { inner: f64, outer: f64 },
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Subadd(#[from] SubaddError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Homogenize(#[from] HomogenizeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, DirichletError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    /// Unit cells with `|z - center|_inf <= R`.
    Box,
    /// Grid cells whose centre lies within `R` of the centre.
    Ball,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Joint minimization in `(u, psi)`; boxes only.
    Joint,
    /// Potential energy minimization; needs gradient laws.
    Potential,
}

#[derive(Clone, Debug)]
pub enum BoundaryData {
    /// `f(x) = xi . x + c`.
    Affine { xi: [f64; 2], c: f64 },
    /// Nodal values on the problem grid; only the values outside the free
    /// nodes matter.
    Nodal(GridField),
}

#[derive(Clone, Debug)]
pub enum Rhs {
    Constant(f64),
    Nodal(GridField),
}

#[derive(Clone, Debug)]
pub struct DirichletProblem {
    pub center: [i64; 2],
    /// Domain radius `R` in unit cells.
    pub radius: usize,
    pub shape: Shape,
    pub boundary: BoundaryData,
    pub rhs: Rhs,
    /// Grid cells per unit cell and axis.
    pub r_cell: usize,
    /// Bound on `|a(0, x)|`.
    pub k0: f64,
    /// `None` picks the joint solve on boxes and the potential solve on balls.
    pub method: Option<Method>,
    /// The gap tolerance is relative to [`DirichletProblem::data_scale`].
    pub newton: NewtonParams,
}

impl DirichletProblem {
    pub fn new(shape: Shape, radius: usize, boundary: BoundaryData, rhs: Rhs) -> Result<Self> {
        if radius < 1 {
            return Err(DirichletError::InvalidInput("radius must be at least 1".into()));
        }
        if let BoundaryData::Affine { xi, c } = &boundary {
            if !(xi[0].is_finite() && xi[1].is_finite() && c.is_finite()) {
                return Err(DirichletError::InvalidInput("boundary data not finite".into()));
            }
        }
        Ok(DirichletProblem {
            center: [0, 0],
            radius,
            shape,
            boundary,
            rhs,
            r_cell: 3,
            k0: 0.0,
            method: None,
            newton: NewtonParams { gap_tol: 1e-11, max_newton: 60, max_cg: 20000 },
        })
    }

    pub fn grid(&self) -> Grid2 {
        let r = self.radius as f64 + 0.5;
        let n = (2 * self.radius + 1) * self.r_cell;
        Grid2::new([self.center[0] as f64 - r, self.center[1] as f64 - r], 1.0 / self.r_cell as f64, n, n).expect("nonempty grid")
    }

    pub fn center_point(&self) -> [f64; 2] {
        [self.center[0] as f64, self.center[1] as f64]
    }

    /// Largest radius of a diagnostic ball inside the domain.
    pub fn max_radius(&self) -> f64 {
        match self.shape {
            Shape::Box => self.radius as f64 + 0.5,
            Shape::Ball => self.radius as f64,
        }
    }

    /// Domain mask on grid cells.
    pub fn domain_cells(&self) -> Vec<bool> {
        let grid = self.grid();
        match self.shape {
            Shape::Box => vec![true; grid.num_cells()],
            Shape::Ball => ball_mask(&grid, self.center_point(), self.radius as f64),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.radius < 1 || self.r_cell < 1 {
            return Err(DirichletError::InvalidInput("radius and resolution must be at least 1".into()));
        }
        let grid = self.grid();
        if let BoundaryData::Nodal(f) = &self.boundary {
            check_nodal(f, &grid)?;
        }
        if let Rhs::Nodal(f) = &self.rhs {
            check_nodal(f, &grid)?;
        }
        if !self.boundary_field().iter().chain(&self.rhs_field()).all(|v| v.is_finite()) {
            return Err(DirichletError::InvalidInput("data not finite".into()));
        }
        Ok(())
    }

    /// Boundary data (and its extension) at every node.
    pub fn boundary_field(&self) -> Vec<f64> {
        let grid = self.grid();
        match &self.boundary {
            BoundaryData::Affine { xi, c } => node_values(&grid, |x| xi[0] * x[0] + xi[1] * x[1] + c),
            BoundaryData::Nodal(f) => f.values.clone(),
        }
    }

    pub fn rhs_field(&self) -> Vec<f64> {
        match &self.rhs {
            Rhs::Constant(v) => vec![*v; self.grid().num_nodes()],
            Rhs::Nodal(f) => f.values.clone(),
        }
    }

    /// `1 + avg |grad f|^2 + R^2 avg rhs^2`, the scale of the energies involved.
    pub fn data_scale(&self) -> f64 {
        let grid = self.grid();
        let g = gradients(&grid, &self.boundary_field());
        let ge = g.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>() / g.len() as f64;
        let rhs = self.rhs_field();
        let r2 = rhs.iter().map(|v| v * v).sum::<f64>() / rhs.len() as f64;
        1.0 + ge + (self.radius as f64).powi(2) * r2
    }
}

fn check_nodal(f: &GridField, grid: &Grid2) -> Result<()> {
    if f.grid != *grid || f.location != Location::Node || f.ncomp != 1 {
        return Err(DirichletError::GridMismatch);
    }
    Ok(())
}

fn node_values(grid: &Grid2, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; grid.num_nodes()];
    for i in 0..=grid.nx {
        for j in 0..=grid.ny {
            out[grid.node(i, j)] = f(grid.node_pos(i, j));
        }
    }
    out
}

fn gradients(grid: &Grid2, u: &[f64]) -> Vec<[f64; 2]> {
    let mut w = vec![0.0; 2 * grid.num_cells()];
    grid.gradient_into(u, &mut w);
    w.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Cell means of a nodal field (average of the four corners).
fn cell_means(grid: &Grid2, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.num_cells()];
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let k = grid.node(i, j);
            let n1 = grid.ny + 1;
            out[grid.cell(i, j)] = 0.25 * (u[k] + u[k + 1] + u[k + n1] + u[k + n1 + 1]);
        }
    }
    out
}

/// Grid cells whose centre lies within `r` of `center`.
pub fn ball_mask(grid: &Grid2, center: [f64; 2], r: f64) -> Vec<bool> {
    let mut out = vec![false; grid.num_cells()];
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let x = grid.cell_center(i, j);
            out[grid.cell(i, j)] = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2) <= r * r * (1.0 + 1e-12);
        }
    }
    out
}

/// Convex potential of a gradient law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Potential {
    /// `c t^2 / 2 + b (t - ln(1 + t))`, `t = |p|`.
    Radial { c: f64, b: f64 },
    /// `p . A p / 2`, `A` symmetric positive definite.
    Matrix([[f64; 2]; 2]),
}

impl Potential {
    fn value_grad(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        match *self {
            Potential::Radial { c, b } => {
                let t = p[0].hypot(p[1]);
                let s = c + b / (1.0 + t);
                (0.5 * c * t * t + b * (t - t.ln_1p()), [s * p[0], s * p[1]])
            }
            Potential::Matrix(a) => {
                let g = [a[0][0] * p[0] + a[0][1] * p[1], a[1][0] * p[0] + a[1][1] * p[1]];
                (0.5 * (g[0] * p[0] + g[1] * p[1]), g)
            }
        }
    }

    fn hessian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        match *self {
            Potential::Radial { c, b } => {
                let t = p[0].hypot(p[1]);
                let s = c + b / (1.0 + t);
                if t == 0.0 {
                    return [[s, 0.0], [0.0, s]];
                }
                // s I + s'(t) p p^T / t
                let k = -b / ((1.0 + t) * (1.0 + t) * t);
                [[s + k * p[0] * p[0], k * p[0] * p[1]], [k * p[0] * p[1], s + k * p[1] * p[1]]]
            }
            Potential::Matrix(a) => a,
        }
    }

    /// Lower bound on the Hessian.
    fn min_curvature(&self) -> f64 {
        match *self {
            Potential::Radial { c, b } => c + b.min(0.0),
            Potential::Matrix(a) => sym2_eigen(a).0,
        }
    }

    fn is_quadratic(&self) -> bool {
        match *self {
            Potential::Radial { b, .. } => b == 0.0,
            Potential::Matrix(_) => true,
        }
    }
}

fn sym2_eigen(a: [[f64; 2]; 2]) -> (f64, f64) {
    let m = 0.5 * (a[0][0] + a[1][1]);
    let off = 0.5 * (a[0][1] + a[1][0]);
    let d = (0.25 * (a[0][0] - a[1][1]).powi(2) + off * off).sqrt();
    (m - d, m + d)
}

/// Coefficient source of a Dirichlet solve.
pub enum Coefficients<'a> {
    Sample(&'a Medium),
    Model(&'a HomogenizedModel),
    /// Constant linear law `a(p) = A p`.
    Constant([[f64; 2]; 2]),
}

struct LawSet {
    law: Vec<usize>,
    joint: Vec<PhaseIntegrand>,
    potential: Option<Vec<Potential>>,
}

/// `blockdiag(A, A^{-1})`: the integrand `p.Ap/2 + q.A^{-1}q/2` of `a(p) = Ap`.
fn linear_form(a: [[f64; 2]; 2]) -> [[f64; 4]; 4] {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let mut b = [[0.0; 4]; 4];
    for i in 0..2 {
        for j in 0..2 {
            b[i][j] = a[i][j];
            b[2 + i][2 + j] = inv[i][j];
        }
    }
    b
}

/// Symmetrized matrix of the homogenized map of a model with linear phases.
pub fn model_matrix(model: &HomogenizedModel) -> Result<[[f64; 2]; 2]> {
    let c0 = model.abar([1.0, 0.0])?;
    let c1 = model.abar([0.0, 1.0])?;
    let off = 0.5 * (c0[1] + c1[0]);
    Ok([[c0[0], off], [off, c1[1]]])
}

impl Coefficients<'_> {
    fn laws(&self, grid: &Grid2) -> Result<LawSet> {
        match self {
            Coefficients::Sample(m) => Ok(LawSet {
                law: m.cell_laws(grid)?,
                joint: m.laws.entries.clone(),
                potential: Some(m.sample.phases.iter().map(|p| Potential::Radial { c: p.c, b: p.b }).collect()),
            }),
            Coefficients::Model(model) => match &model.fbar {
                Fbar::Quadratic(_) => Coefficients::Constant(model_matrix(model)?).laws(grid),
                Fbar::Table(t) => Ok(LawSet {
                    law: vec![0; grid.num_cells()],
                    joint: vec![PhaseIntegrand::Table(Arc::new(t.clone()))],
                    potential: None,
                }),
            },
            Coefficients::Constant(a) => {
                let (lo, _) = sym2_eigen(*a);
                if !(lo > 0.0) || (a[0][1] - a[1][0]).abs() > 1e-12 * (1.0 + a[0][1].abs()) {
                    return Err(DirichletError::InvalidInput("constant law must be symmetric positive definite".into()));
                }
                Ok(LawSet {
                    law: vec![0; grid.num_cells()],
                    joint: vec![PhaseIntegrand::Form(Arc::new(linear_form(*a)))],
                    potential: Some(vec![Potential::Matrix(*a)]),
                })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct DirichletSolution {
    /// Nodal solution.
    pub u: GridField,
    /// Flux `g` on cells (two components); `a(grad u)` for potential solves.
    pub flux: GridField,
    /// `J[u, g]` at the joint minimizer (zero for an exact solve).
    pub null_value: Option<f64>,
    /// Bound on the excess over the exact discrete minimum, per unit area.
    pub gap: f64,
    pub method: Method,
    pub newton_iterations: usize,
    pub cg_iterations: usize,
}

pub fn solve(coeffs: &Coefficients, problem: &DirichletProblem) -> Result<DirichletSolution> {
    problem.validate()?;
    let grid = problem.grid();
    let laws = coeffs.laws(&grid)?;
    let method = problem.method.unwrap_or(match problem.shape {
        Shape::Box => Method::Joint,
        Shape::Ball => Method::Potential,
    });
    match method {
        Method::Joint => {
            if problem.shape != Shape::Box {
                return Err(DirichletError::Unsupported("joint solve needs a box domain".into()));
            }
            solve_joint(problem, &grid, &laws)
        }
        Method::Potential => {
            let pots = laws.potential.as_ref().ok_or_else(|| DirichletError::Unsupported("law without a known potential".into()))?;
            solve_potential(problem, &grid, &laws.law, pots)
        }
    }
}

pub fn solve_heterogeneous(medium: &Medium, problem: &DirichletProblem) -> Result<DirichletSolution> {
    solve(&Coefficients::Sample(medium), problem)
}

pub fn solve_homogenized(model: &HomogenizedModel, problem: &DirichletProblem) -> Result<DirichletSolution> {
    solve(&Coefficients::Model(model), problem)
}

fn solve_joint(problem: &DirichletProblem, grid: &Grid2, laws: &LawSet) -> Result<DirichletSolution> {
    let nn = grid.num_nodes();
    let nc = grid.num_cells();
    let f = problem.boundary_field();
    // g0 = grad w with G^T G w = rhs at interior nodes, so that the weak
    // divergence of g0 against H^1_0 test functions is -rhs
    let lz = Laplacian::new(*grid, BoundaryMode::Zero);
    let mut w = problem.rhs_field();
    lz.project(&mut w);
    lz.solve(&mut w);
    let gf = gradients(grid, &f);
    let g0 = gradients(grid, &w);
    let z0: Vec<[f64; 4]> = (0..nc).map(|c| [gf[c][0], gf[c][1], g0[c][0], g0[c][1]]).collect();
    let lin: Vec<[f64; 4]> = (0..nc).map(|c| [g0[c][0], g0[c][1], gf[c][0], gf[c][1]]).collect();
    let pairing0 = (0..nc).map(|c| gf[c][0] * g0[c][0] + gf[c][1] * g0[c][1]).sum::<f64>() / nc as f64;
    let pb = CellProblem {
        grid: *grid,
        law: laws.law.clone(),
        laws: &laws.joint,
        u_mode: BoundaryMode::Zero,
        psi_mode: BoundaryMode::Free,
        z0: [0.0; 4],
        lin: [0.0; 4],
        z0_cells: Some(z0),
        lin_cells: Some(lin),
    };
    let mut params = problem.newton;
    params.gap_tol *= problem.data_scale();
    let sol = pb.minimize(None, &params)?;
    let mut cw = Vec::new();
    let z = pb.cell_states(&sol.x, &mut cw);
    let mut u = GridField::zeros(*grid, Location::Node, 1, Boundary::Free);
    for k in 0..nn {
        u.values[k] = f[k] + sol.x[k];
    }
    let mut flux = GridField::zeros(*grid, Location::Cell, 2, Boundary::Free);
    for (c, zc) in z.iter().enumerate() {
        flux.values[2 * c] = zc[2];
        flux.values[2 * c + 1] = zc[3];
    }
    Ok(DirichletSolution {
        u,
        flux,
        null_value: Some(sol.value - pairing0),
        gap: sol.gap,
        method: Method::Joint,
        newton_iterations: sol.newton_iterations,
        cg_iterations: sol.cg_iterations,
    })
}

/// Interior nodes whose four cells all belong to the domain.
fn free_nodes(grid: &Grid2, cells: &[bool]) -> Vec<bool> {
    let mut out = vec![false; grid.num_nodes()];
    for i in 1..grid.nx {
        for j in 1..grid.ny {
            out[grid.node(i, j)] = cells[grid.cell(i - 1, j - 1)] && cells[grid.cell(i - 1, j)] && cells[grid.cell(i, j - 1)] && cells[grid.cell(i, j)];
        }
    }
    out
}

struct PotentialEnergy<'a> {
    grid: Grid2,
    law: &'a [usize],
    pots: &'a [Potential],
    cells: Vec<bool>,
    free: Vec<bool>,
    rhs: Vec<f64>,
    area: f64,
}

impl PotentialEnergy<'_> {
    /// Energy per unit area of `u` (the `rhs` term only sees the free part `v`).
    fn value(&self, u: &[f64], v: &[f64]) -> f64 {
        let h2 = self.grid.h * self.grid.h;
        let g = gradients(&self.grid, u);
        let mut e = 0.0;
        for (c, gc) in g.iter().enumerate() {
            if self.cells[c] {
                e += self.pots[self.law[c]].value_grad(*gc).0;
            }
        }
        let lin: f64 = (0..v.len()).filter(|&k| self.free[k]).map(|k| self.rhs[k] * v[k]).sum();
        h2 * (e - lin) / self.area
    }

    /// Masked gradient `h^2 (G^T a(grad u) - rhs)` (not divided by the area).
    fn gradient(&self, u: &[f64], out: &mut [f64], w: &mut Vec<f64>) {
        let h2 = self.grid.h * self.grid.h;
        let nc = self.grid.num_cells();
        w.resize(2 * nc, 0.0);
        self.grid.gradient_into(u, w);
        for c in 0..nc {
            let d = if self.cells[c] { self.pots[self.law[c]].value_grad([w[2 * c], w[2 * c + 1]]).1 } else { [0.0; 2] };
            w[2 * c] = d[0];
            w[2 * c + 1] = d[1];
        }
        self.grid.gradient_t_into(w, out);
        for k in 0..out.len() {
            out[k] = if self.free[k] { h2 * (out[k] - self.rhs[k]) } else { 0.0 };
        }
    }

    fn hess_apply(&self, hess: &[[[f64; 2]; 2]], s: &[f64], out: &mut [f64], w: &mut Vec<f64>) {
        let h2 = self.grid.h * self.grid.h;
        let nc = self.grid.num_cells();
        w.resize(2 * nc, 0.0);
        self.grid.gradient_into(s, w);
        for c in 0..nc {
            let (a, b) = (w[2 * c], w[2 * c + 1]);
            let hc = &hess[c];
            w[2 * c] = hc[0][0] * a + hc[0][1] * b;
            w[2 * c + 1] = hc[1][0] * a + hc[1][1] * b;
        }
        self.grid.gradient_t_into(w, out);
        for k in 0..out.len() {
            out[k] = if self.free[k] { h2 * out[k] } else { 0.0 };
        }
    }
}

fn solve_potential(problem: &DirichletProblem, grid: &Grid2, law: &[usize], pots: &[Potential]) -> Result<DirichletSolution> {
    let nn = grid.num_nodes();
    let nc = grid.num_cells();
    let cells = problem.domain_cells();
    let free = free_nodes(grid, &cells);
    let h2 = grid.h * grid.h;
    let area = cells.iter().filter(|&&b| b).count() as f64 * h2;
    let mut used = vec![false; pots.len()];
    for c in 0..nc {
        if cells[c] {
            used[law[c]] = true;
        }
    }
    let m = pots.iter().zip(&used).filter(|(_, &u)| u).map(|(p, _)| p.min_curvature()).fold(f64::INFINITY, f64::min);
    if !(m > 0.0) {
        return Err(DirichletError::Unsupported("potential is not uniformly convex".into()));
    }
    let quadratic = pots.iter().all(|p| p.is_quadratic());
    let en = PotentialEnergy { grid: *grid, law, pots, cells, free, rhs: problem.rhs_field(), area };
    let f = problem.boundary_field();
    let lap = Laplacian::new(*grid, BoundaryMode::Zero);
    let mask = |x: &mut [f64]| {
        for k in 0..nn {
            if !en.free[k] {
                x[k] = 0.0;
            }
        }
    };
    // gap <= g . (m h^2 G^T G)^{-1} g / 2 on the free nodes; the box inverse
    // dominates the inverse of the free block
    let mut pg = vec![0.0; nn];
    let mut gap_of = |g: &[f64]| -> f64 {
        pg.copy_from_slice(g);
        lap.solve(&mut pg);
        0.5 * g.iter().zip(&pg).map(|(a, b)| a * b).sum::<f64>() / (m * h2 * area)
    };
    let tol = problem.newton.gap_tol * problem.data_scale();
    let mut v = vec![0.0; nn];
    let mut u = f.clone();
    let mut value = en.value(&u, &v);
    let mut w = Vec::new();
    let mut g = vec![0.0; nn];
    let mut hess = vec![[[0.0; 2]; 2]; nc];
    let mut cg_total = 0;
    let mut gap = f64::INFINITY;
    for it in 0..=problem.newton.max_newton {
        en.gradient(&u, &mut g, &mut w);
        gap = gap_of(&g);
        if gap <= tol {
            let mut flux = GridField::zeros(*grid, Location::Cell, 2, Boundary::Free);
            for (c, gc) in gradients(grid, &u).iter().enumerate() {
                if en.cells[c] {
                    let a = pots[law[c]].value_grad(*gc).1;
                    flux.values[2 * c] = a[0];
                    flux.values[2 * c + 1] = a[1];
                }
            }
            let mut uf = GridField::zeros(*grid, Location::Node, 1, Boundary::Free);
            uf.values = u;
            return Ok(DirichletSolution {
                u: uf,
                flux,
                null_value: None,
                gap,
                method: Method::Potential,
                newton_iterations: it,
                cg_iterations: cg_total,
            });
        }
        if it == problem.newton.max_newton {
            break;
        }
        let gu = gradients(grid, &u);
        let mut kappa = 0.0;
        let mut count = 0.0;
        for c in 0..nc {
            if en.cells[c] {
                hess[c] = pots[law[c]].hessian(gu[c]);
                kappa += 0.5 * (hess[c][0][0] + hess[c][1][1]);
                count += 1.0;
            } else {
                hess[c] = [[0.0; 2]; 2];
            }
        }
        let kappa = kappa / count;
        let target = if quadratic { 0.05 * tol } else { (0.01 * gap).min(0.05 * gap.sqrt() * gap.sqrt().min(1.0)) };
        let target = target.max(0.05 * tol);
        let mut s = vec![0.0; nn];
        let mut r: Vec<f64> = g.iter().map(|x| -x).collect();
        let precond = |r: &[f64], out: &mut [f64]| {
            out.copy_from_slice(r);
            lap.solve(out);
            for k in 0..nn {
                out[k] = if en.free[k] { out[k] / (kappa * h2) } else { 0.0 };
            }
        };
        let mut zr = vec![0.0; nn];
        precond(&r, &mut zr);
        let mut d = zr.clone();
        let mut rz: f64 = r.iter().zip(&zr).map(|(a, b)| a * b).sum();
        let mut hd = vec![0.0; nn];
        for _ in 0..problem.newton.max_cg {
            if gap_of(&r) <= target {
                break;
            }
            cg_total += 1;
            en.hess_apply(&hess, &d, &mut hd, &mut w);
            let dhd: f64 = d.iter().zip(&hd).map(|(a, b)| a * b).sum();
            if dhd <= 0.0 {
                break;
            }
            let alpha = rz / dhd;
            for k in 0..nn {
                s[k] += alpha * d[k];
                r[k] -= alpha * hd[k];
            }
            precond(&r, &mut zr);
            let rz_new: f64 = r.iter().zip(&zr).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..nn {
                d[k] = zr[k] + beta * d[k];
            }
        }
        mask(&mut s);
        let slope: f64 = g.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / area;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let vt: Vec<f64> = (0..nn).map(|k| v[k] + t * s[k]).collect();
            let ut: Vec<f64> = (0..nn).map(|k| f[k] + vt[k]).collect();
            let et = en.value(&ut, &vt);
            if quadratic || et <= value + 1e-4 * t * slope {
                v = vt;
                u = ut;
                value = et;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(SolveError::NoConvergence { gap, iterations: problem.newton.max_newton }.into())
}

fn same_grid(a: &GridField, b: &GridField) -> Result<()> {
    if a.grid != b.grid || a.location != b.location || a.ncomp != b.ncomp {
        return Err(DirichletError::GridMismatch);
    }
    Ok(())
}

fn check_solution(u: &GridField, problem: &DirichletProblem) -> Result<()> {
    if u.grid != problem.grid() || u.location != Location::Node || u.ncomp != 1 {
        return Err(DirichletError::GridMismatch);
    }
    Ok(())
}

/// `R^{-2} avg_U |u - ubar|^2` with the cell average of the four corner values.
pub fn homogenization_error(u: &GridField, ubar: &GridField, problem: &DirichletProblem) -> Result<f64> {
    same_grid(u, ubar)?;
    check_solution(u, problem)?;
    let grid = u.grid;
    let d2: Vec<f64> = u.values.iter().zip(&ubar.values).map(|(a, b)| (a - b) * (a - b)).collect();
    let cm = cell_means(&grid, &d2);
    let cells = problem.domain_cells();
    let (s, n) = cm.iter().zip(&cells).filter(|(_, &b)| b).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    Ok(s / n as f64 / (problem.radius as f64).powi(2))
}

fn check_radius(problem: &DirichletProblem, r: f64) -> Result<()> {
    let max = problem.max_radius();
    if !(r > 0.0) || r > max + 1e-12 {
        return Err(DirichletError::RadiusOutsideDomain { r, max });
    }
    Ok(())
}

/// Mean of `f` over the cells of `mask`.
fn masked_mean(vals: impl Iterator<Item = f64>, mask: &[bool]) -> f64 {
    let (s, n) = vals.zip(mask).filter(|(_, &b)| b).fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    s / n as f64
}

/// The size parameter `K0 + R^{-1} inf_a (avg_{B_R} |u - a|^2)^{1/2} + R (avg_{B_R} |rhs|^p)^{1/p}`.
pub fn size_parameter(u: &GridField, problem: &DirichletProblem, p_exp: f64) -> Result<f64> {
    check_solution(u, problem)?;
    let grid = u.grid;
    let r = problem.radius as f64;
    let ball = ball_mask(&grid, problem.center_point(), r);
    let um = cell_means(&grid, &u.values);
    let mean = masked_mean(um.iter().copied(), &ball);
    let var = masked_mean(um.iter().map(|v| (v - mean) * (v - mean)), &ball);
    let rhs = cell_means(&grid, &problem.rhs_field());
    let fp = masked_mean(rhs.iter().map(|v| v.abs().powf(p_exp)), &ball).powf(1.0 / p_exp);
    Ok(problem.k0 + var.sqrt() / r + r * fp)
}

/// `avg_{B_r} |grad u|^2` for every radius.
pub fn lipschitz_profile(u: &GridField, problem: &DirichletProblem, radii: &[f64]) -> Result<Vec<f64>> {
    check_solution(u, problem)?;
    let grid = u.grid;
    let e: Vec<f64> = gradients(&grid, &u.values).iter().map(|g| g[0] * g[0] + g[1] * g[1]).collect();
    radii
        .iter()
        .map(|&r| {
            check_radius(problem, r)?;
            let ball = ball_mask(&grid, problem.center_point(), r);
            if !ball.iter().any(|&b| b) {
                return Err(DirichletError::DegenerateFit(r));
            }
            Ok(masked_mean(e.iter().copied(), &ball))
        })
        .collect()
}

/// Least tested radius from which on the profile stays below `bound`.
pub fn minimal_radius(radii: &[f64], profile: &[f64], bound: f64) -> Option<f64> {
    let mut r0 = None;
    for k in (0..radii.len()).rev() {
        if profile[k] <= bound {
            r0 = Some(radii[k]);
        } else {
            break;
        }
    }
    r0
}

/// `r0(C)` for every constant `C`, with bound `C M^2`.
pub fn r0_curve(radii: &[f64], profile: &[f64], m: f64, constants: &[f64]) -> Vec<(f64, Option<f64>)> {
    constants.iter().map(|&c| (c, minimal_radius(radii, profile, c * m * m))).collect()
}

/// `(1/r) inf_l (avg_{B_r} |u - l|^2)^{1/2}` over affine `l`, by least squares
/// on the cell means.
pub fn flatness(u: &GridField, problem: &DirichletProblem, r: f64) -> Result<f64> {
    check_solution(u, problem)?;
    check_radius(problem, r)?;
    let grid = u.grid;
    let c0 = problem.center_point();
    let ball = ball_mask(&grid, c0, r);
    let um = cell_means(&grid, &u.values);
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    let mut pts = Vec::new();
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let c = grid.cell(i, j);
            if !ball[c] {
                continue;
            }
            let x = grid.cell_center(i, j);
            let row = nalgebra::Vector3::new(1.0, (x[0] - c0[0]) / r, (x[1] - c0[1]) / r);
            ata += row * row.transpose();
            atb += row * um[c];
            pts.push((row, um[c]));
        }
    }
    if pts.len() < 3 {
        return Err(DirichletError::DegenerateFit(r));
    }
    let coef = ata.cholesky().ok_or(DirichletError::DegenerateFit(r))?.solve(&atb);
    let ms = pts.iter().map(|(row, v)| (v - row.dot(&coef)).powi(2)).sum::<f64>() / pts.len() as f64;
    Ok(ms.sqrt() / r)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CampanatoRow {
    pub r: f64,
    pub flat_r: f64,
    pub flat_sigma_r: f64,
    /// `flatness(sigma r) <= flatness(r) / 2`, i.e. membership in `A(r, sigma)`.
    pub member: bool,
}

pub fn campanato_check(u: &GridField, problem: &DirichletProblem, radii: &[f64], sigma: f64) -> Result<Vec<CampanatoRow>> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(DirichletError::InvalidInput(format!("sigma {sigma} outside (0, 1)")));
    }
    let slope = lipschitz_profile(u, problem, &[problem.max_radius()])?[0].sqrt();
    radii
        .iter()
        .map(|&r| {
            let fr = flatness(u, problem, r)?;
            let fs = flatness(u, problem, sigma * r)?;
            // round-off allowance for (nearly) affine u
            let tol = 1e-10 * (1.0 + slope);
            Ok(CampanatoRow { r, flat_r: fr, flat_sigma_r: fs, member: fs <= 0.5 * fr + tol })
        })
        .collect()
}

/// Largest candidate `sigma` under which the constant-coefficient Poisson
/// solution on the ball of radius `radius` is in `A(r, sigma)` at every
/// tested radius.
pub fn calibrate_sigma(candidates: &[f64], radius: usize, r_cell: usize) -> Result<f64> {
    let mut pb = DirichletProblem::new(Shape::Ball, radius, BoundaryData::Affine { xi: [0.0; 2], c: 0.0 }, Rhs::Constant(1.0))?;
    pb.r_cell = r_cell;
    let sol = solve(&Coefficients::Constant([[1.0, 0.0], [0.0, 1.0]]), &pb)?;
    let mut sorted: Vec<f64> = candidates.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for s in sorted {
        let radii: Vec<f64> = default_radii(radius as f64).into_iter().filter(|&r| s * r >= 1.0).collect();
        let rows = campanato_check(&sol.u, &pb, &radii, s)?;
        if rows.iter().all(|r| r.member) {
            return Ok(s);
        }
    }
    Err(DirichletError::InvalidInput("no candidate sigma passes the calibration".into()))
}

/// Radii `2^{k/2}` from 1 up to `max`, with `max` itself appended.
pub fn default_radii(max: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut r: f64 = 1.0;
    while r < max * (1.0 - 1e-9) {
        out.push(r);
        r *= std::f64::consts::SQRT_2;
    }
    out.push(max);
    out
}

/// `(integral over U of rhs (-Delta)^{-1} rhs)^{1/2}` with `rhs` extended by
/// zero to a periodic box of twice the side.
pub fn h_minus_one_norm(rhs_cells: &[f64], grid: &Grid2, domain: &[bool]) -> f64 {
    let (nx, ny) = (2 * grid.nx, 2 * grid.ny);
    let mut vals = vec![0.0; nx * ny];
    for i in 0..grid.nx {
        for j in 0..grid.ny {
            let c = grid.cell(i, j);
            if domain[c] {
                vals[i * ny + j] = rhs_cells[c];
            }
        }
    }
    periodic_h_minus_one(&vals, nx, ny, grid.h)
}

/// Spectral `(integral f (-Delta)^{-1} f)^{1/2}` of a periodic cell array, mean removed.
pub fn periodic_h_minus_one(vals: &[f64], nx: usize, ny: usize, h: f64) -> f64 {
    let mut data: Vec<Complex64> = vals.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(&mut data, &[nx, ny], false);
    let (lx, ly) = (nx as f64 * h, ny as f64 * h);
    let mut s = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let kx = 2.0 * std::f64::consts::PI * signed_freq(i, nx) / lx;
            let ky = 2.0 * std::f64::consts::PI * signed_freq(j, ny) / ly;
            let k2 = kx * kx + ky * ky;
            if k2 > 0.0 {
                s += data[i * ny + j].norm_sqr() / k2;
            }
        }
    }
    (h * h * s / (nx * ny) as f64).sqrt()
}

/// Interior estimates on the ball `V = B_rho` against the domain `U`, all
/// norms volume-normalized and rescaled to be dimensionless.
#[derive(Clone, Debug, PartialEq)]
pub struct InteriorEstimates {
    pub rho: f64,
    /// `(avg_V |grad u|^2)^{1/2} / (K0 + R^{-1} (avg_U u^2)^{1/2} + |U|^{-1/2} ||rhs||_{H^-1})`.
    pub caccioppoli: f64,
    /// `(delta, (avg_V |grad u|^{2+delta})^{1/(2+delta)}, ratio to K0 + (avg_U |grad u|^2)^{1/2})`.
    pub meyers: Vec<(f64, f64, f64)>,
}

pub fn regularity_checks(u: &GridField, problem: &DirichletProblem, rho: f64, deltas: &[f64]) -> Result<InteriorEstimates> {
    check_solution(u, problem)?;
    let outer = problem.max_radius();
    if !(rho > 0.0) || rho >= outer - 0.5 {
        return Err(DirichletError::NotCompact { inner: rho, outer });
    }
    let grid = u.grid;
    let dom = problem.domain_cells();
    let v = ball_mask(&grid, problem.center_point(), rho);
    let e: Vec<f64> = gradients(&grid, &u.values).iter().map(|g| g[0] * g[0] + g[1] * g[1]).collect();
    let grad_v = masked_mean(e.iter().copied(), &v).sqrt();
    let grad_u = masked_mean(e.iter().copied(), &dom).sqrt();
    let um = cell_means(&grid, &u.values);
    let l2u = masked_mean(um.iter().map(|x| x * x), &dom).sqrt();
    let area = dom.iter().filter(|&&b| b).count() as f64 * grid.h * grid.h;
    let rhs = cell_means(&grid, &problem.rhs_field());
    let hm1 = h_minus_one_norm(&rhs, &grid, &dom) / area.sqrt();
    let denom = problem.k0 + l2u / problem.radius as f64 + hm1;
    let caccioppoli = if grad_v == 0.0 { 0.0 } else { grad_v / denom };
    let meyers = deltas
        .iter()
        .map(|&d| {
            let q = 2.0 + d;
            let n = masked_mean(e.iter().map(|x| x.powf(0.5 * q)), &v).powf(1.0 / q);
            let base = problem.k0 + grad_u;
            (d, n, if n == 0.0 { 0.0 } else { n / base })
        })
        .collect();
    Ok(InteriorEstimates { rho, caccioppoli, meyers })
}

/// Indices of the ratios above `bound`.
pub fn ratio_flags(ratios: &[f64], bound: f64) -> Vec<usize> {
    ratios.iter().enumerate().filter(|(_, &r)| !(r <= bound)).map(|(k, _)| k).collect()
}

/// Averages of `grad u` over the unit cells inside the domain, together with
/// the mean and mean square over the same grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MesoscopicAverages {
    pub averages: Vec<[f64; 2]>,
    pub mean_of_averages: [f64; 2],
    pub mean: [f64; 2],
    pub l2_averaged: f64,
    pub l2: f64,
}

impl MesoscopicAverages {
    pub fn holds(&self, tol: f64) -> bool {
        (0..2).all(|i| (self.mean_of_averages[i] - self.mean[i]).abs() <= tol) && self.l2_averaged <= self.l2 + tol
    }
}

pub fn unit_cell_averages(u: &GridField, problem: &DirichletProblem) -> Result<MesoscopicAverages> {
    check_solution(u, problem)?;
    let grid = u.grid;
    let r = problem.r_cell;
    let dom = problem.domain_cells();
    let g = gradients(&grid, &u.values);
    let nu = grid.nx / r;
    let mut averages = Vec::new();
    let (mut mean, mut l2) = ([0.0; 2], 0.0);
    let mut count = 0.0;
    for a in 0..nu {
        for b in 0..nu {
            let cells: Vec<usize> = (0..r).flat_map(|i| (0..r).map(move |j| (a * r + i, b * r + j))).map(|(i, j)| grid.cell(i, j)).collect();
            if !cells.iter().all(|&c| dom[c]) {
                continue;
            }
            let mut s = [0.0; 2];
            for &c in &cells {
                s[0] += g[c][0];
                s[1] += g[c][1];
                mean[0] += g[c][0];
                mean[1] += g[c][1];
                l2 += g[c][0] * g[c][0] + g[c][1] * g[c][1];
                count += 1.0;
            }
            averages.push([s[0] / cells.len() as f64, s[1] / cells.len() as f64]);
        }
    }
    if averages.is_empty() {
        return Err(DirichletError::InvalidInput("no unit cell inside the domain".into()));
    }
    let na = averages.len() as f64;
    let moa = [averages.iter().map(|a| a[0]).sum::<f64>() / na, averages.iter().map(|a| a[1]).sum::<f64>() / na];
    let l2a = (averages.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum::<f64>() / na).sqrt();
    Ok(MesoscopicAverages {
        averages,
        mean_of_averages: moa,
        mean: [mean[0] / count, mean[1] / count],
        l2_averaged: l2a,
        l2: (l2 / count).sqrt(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularityParams {
    /// Diagnostic radii; `None` uses [`default_radii`].
    pub radii: Option<Vec<f64>>,
    pub c_lip: f64,
    /// Constants of the `r0(C)` curve.
    pub c_curve: Vec<f64>,
    pub sigma: f64,
    /// Exponent of the `rhs` term of the size parameter.
    pub p_exp: f64,
    pub deltas: Vec<f64>,
    /// Interior ball radius as a fraction of `R`.
    pub interior_fraction: f64,
    pub caccioppoli_bound: f64,
}

impl Default for RegularityParams {
    fn default() -> Self {
        RegularityParams {
            radii: None,
            c_lip: 10.0,
            c_curve: vec![1.0, 2.0, 3.0, 5.0, 10.0, 20.0, 50.0],
            sigma: 1.0 / 3.0,
            p_exp: 4.0,
            deltas: vec![0.25, 0.5, 1.0],
            interior_fraction: 0.5,
            caccioppoli_bound: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularityReport {
    pub ensemble: String,
    pub seed: u64,
    pub radius: usize,
    pub m: f64,
    pub c_lip: f64,
    pub sigma: f64,
    pub radii: Vec<f64>,
    pub profile: Vec<f64>,
    pub flatness: Vec<f64>,
    /// Campanato membership per radius (`None` when `sigma r` is below one grid cell).
    pub campanato: Vec<Option<bool>>,
    pub r0: Option<f64>,
    pub r0_curve: Vec<(f64, Option<f64>)>,
    pub interior: InteriorEstimates,
    pub homogenization_error: Option<f64>,
}

impl RegularityReport {
    pub fn build(
        ensemble: &str,
        seed: u64,
        u: &GridField,
        problem: &DirichletProblem,
        params: &RegularityParams,
        ubar: Option<&GridField>,
    ) -> Result<Self> {
        let radii = params.radii.clone().unwrap_or_else(|| default_radii(problem.max_radius()));
        let m = size_parameter(u, problem, params.p_exp)?;
        let profile = lipschitz_profile(u, problem, &radii)?;
        let flat = radii.iter().map(|&r| flatness(u, problem, r)).collect::<Result<Vec<_>>>()?;
        let h = 1.0 / problem.r_cell as f64;
        let mut campanato = Vec::new();
        for &r in &radii {
            if params.sigma * r < 2.0 * h {
                campanato.push(None);
            } else {
                campanato.push(Some(campanato_check(u, problem, &[r], params.sigma)?[0].member));
            }
        }
        let interior = regularity_checks(u, problem, params.interior_fraction * problem.radius as f64, &params.deltas)?;
        let homogenization_error = ubar.map(|b| homogenization_error(u, b, problem)).transpose()?;
        Ok(RegularityReport {
            ensemble: ensemble.to_string(),
            seed,
            radius: problem.radius,
            m,
            c_lip: params.c_lip,
            sigma: params.sigma,
            r0: minimal_radius(&radii, &profile, params.c_lip * m * m),
            r0_curve: r0_curve(&radii, &profile, m, &params.c_curve),
            radii,
            profile,
            flatness: flat,
            campanato,
            interior,
            homogenization_error,
        })
    }

    /// The profile never exceeds `C_lip M^2` above `r0`.
    pub fn profile_bounded_above_r0(&self) -> bool {
        let bound = self.c_lip * self.m * self.m;
        match self.r0 {
            Some(r0) => self.radii.iter().zip(&self.profile).filter(|(r, _)| **r >= r0).all(|(_, p)| *p <= bound),
            None => false,
        }
    }

    pub fn campanato_fraction(&self) -> f64 {
        let tested: Vec<bool> = self.campanato.iter().flatten().copied().collect();
        if tested.is_empty() {
            return 1.0;
        }
        tested.iter().filter(|&&b| b).count() as f64 / tested.len() as f64
    }

    /// Per-radius rows in `regularity_<ensemble>_<seed>_R<R>.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("regularity_{}_{}_R{}.csv", self.ensemble, self.seed, self.radius));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(f, "r,profile,bound,flatness,campanato")?;
        let bound = self.c_lip * self.m * self.m;
        for k in 0..self.radii.len() {
            let c = match self.campanato[k] {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            writeln!(f, "{},{:.12e},{:.12e},{:.12e},{}", self.radii[k], self.profile[k], bound, self.flatness[k], c)?;
        }
        f.flush()?;
        Ok(path)
    }

    pub const SUMMARY_HEADER: &'static str = "ensemble,seed,R,M,c_lip,r0,sigma,campanato_fraction,caccioppoli,meyers,homogenization_error";

    pub fn summary_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let meyers: Vec<String> = self.interior.meyers.iter().map(|(d, n, _)| format!("{d}:{n:.6e}")).collect();
        format!(
            "{},{},{},{:.12e},{},{},{},{:.4},{:.6e},{},{}",
            self.ensemble,
            self.seed,
            self.radius,
            self.m,
            self.c_lip,
            opt(self.r0),
            self.sigma,
            self.campanato_fraction(),
            self.interior.caccioppoli,
            meyers.join(";"),
            self.homogenization_error.map(|x| format!("{x:.12e}")).unwrap_or_default()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{sample_field, CellBox, EnsembleSpec, IntegrandCache, Phase};
    use crate::varrep::TableSpec;

    const ID: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

    fn checkerboard(radius: usize, seed: u64) -> Medium {
        let spec = EnsembleSpec::checkerboard(vec![Phase::linear(1.0), Phase::linear(4.0)], 4.0, seed).unwrap();
        let laws = IntegrandCache::build(&spec, TableSpec { bound: 1.0, points: 3 }).unwrap();
        let side = 2 * radius as i64 + 1;
        Medium::new(sample_field(&spec, CellBox::centered([0, 0], side).unwrap(), seed).unwrap(), laws)
    }

    fn affine(xi: [f64; 2]) -> BoundaryData {
        BoundaryData::Affine { xi, c: 0.0 }
    }

    #[test]
    fn affine_data_reproduced_exactly() {
        for shape in [Shape::Box, Shape::Ball] {
            let pb = DirichletProblem::new(shape, 4, affine([0.7, -0.2]), Rhs::Constant(0.0)).unwrap();
            let s = solve(&Coefficients::Constant(ID), &pb).unwrap();
            let exact = pb.boundary_field();
            let err = s.u.values.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{shape:?}: {err}");
            if let Some(j) = s.null_value {
                assert!(j.abs() < 1e-9);
            }
        }
    }

    /// Analytic `-Delta u = 1` on the disk: `u = (R^2 - |x|^2) / 4`.
    fn paraboloid_error(radius: usize) -> f64 {
        paraboloid_error_at(radius, 3)
    }

    fn paraboloid_error_at(radius: usize, r_cell: usize) -> f64 {
        let mut pb = DirichletProblem::new(Shape::Ball, radius, affine([0.0; 2]), Rhs::Constant(1.0)).unwrap();
        pb.r_cell = r_cell;
        let s = solve(&Coefficients::Constant(ID), &pb).unwrap();
        let grid = pb.grid();
        let r2 = (radius * radius) as f64;
        let exact = node_values(&grid, |x| 0.25 * (r2 - x[0] * x[0] - x[1] * x[1]));
        let dom = pb.domain_cells();
        let de: Vec<f64> = s.u.values.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).collect();
        let e2: Vec<f64> = exact.iter().map(|b| b * b).collect();
        let num = masked_mean(cell_means(&grid, &de).into_iter(), &dom);
        let den = masked_mean(cell_means(&grid, &e2).into_iter(), &dom);
        (num / den).sqrt()
    }

    #[test]
    fn poisson_on_ball_matches_paraboloid() {
        // the staircase boundary costs O(h / R)
        let coarse = paraboloid_error(9);
        let e = paraboloid_error(27);
        assert!(e < 0.01, "relative L2 error {e}");
        assert!(paraboloid_error_at(9, 6) < 0.5 * coarse);
    }

    #[test]
    fn joint_and_potential_solves_agree() {
        let m = checkerboard(3, 5);
        let mut pb = DirichletProblem::new(Shape::Box, 3, affine([1.0, 0.5]), Rhs::Constant(0.3)).unwrap();
        pb.newton.gap_tol = 1e-15;
        let a = solve_heterogeneous(&m, &pb).unwrap();
        pb.method = Some(Method::Potential);
        let b = solve_heterogeneous(&m, &pb).unwrap();
        let d = a.u.values.iter().zip(&b.u.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-6, "{d}");
        // flux consistency: avg (F(grad u, g) - grad u . g) is the null value
        assert!(a.null_value.unwrap().abs() < 1e-8, "{:?}", a.null_value);
        let fd = a.flux.values.iter().zip(&b.flux.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(fd < 1e-4, "{fd}");
    }

    #[test]
    fn nonlinear_potential_matches_joint_table_solve() {
        let spec = EnsembleSpec::checkerboard(vec![Phase::linear(1.0), Phase { c: 1.5, b: 0.5 }], 3.0, 2).unwrap();
        let laws = IntegrandCache::build(&spec, TableSpec { bound: 2.5, points: 7 }).unwrap();
        let m = Medium::new(sample_field(&spec, CellBox::centered([0, 0], 3).unwrap(), 2).unwrap(), laws);
        let mut pb = DirichletProblem::new(Shape::Box, 1, affine([0.6, 0.0]), Rhs::Constant(0.0)).unwrap();
        pb.newton.gap_tol = 1e-9;
        let a = solve_heterogeneous(&m, &pb).unwrap();
        pb.method = Some(Method::Potential);
        let b = solve_heterogeneous(&m, &pb).unwrap();
        assert!(b.newton_iterations > 1);
        // the tabulated integrand interpolates the exact one
        let d = a.u.values.iter().zip(&b.u.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 2e-2, "{d}");
        // multilinear interpolation overshoots a convex integrand by at most
        // Lambda |diag|^2 / 8 with |diag|^2 = 4 spacing^2
        let spacing = 5.0 / 6.0;
        let j = a.null_value.unwrap();
        assert!(j > -1e-6 && j < 3.0 * 4.0 * spacing * spacing / 8.0, "{j}");
    }

    #[test]
    fn energy_comparison_against_dual_norm() {
        // c_min |grad (u1 - u2)|^2 <= <f1 - f2, u1 - u2> <= |f1 - f2|_{H^-1} |grad (u1 - u2)|
        let m = checkerboard(4, 9);
        let pb1 = DirichletProblem::new(Shape::Box, 4, affine([0.2, 0.1]), Rhs::Constant(1.0)).unwrap();
        let grid = pb1.grid();
        let f2 = node_values(&grid, |x| (0.7 * x[0]).sin());
        let mut f2g = GridField::zeros(grid, Location::Node, 1, Boundary::Free);
        f2g.values = f2.clone();
        let mut pb2 = pb1.clone();
        pb2.rhs = Rhs::Nodal(f2g);
        let u1 = solve_heterogeneous(&m, &pb1).unwrap().u.values;
        let u2 = solve_heterogeneous(&m, &pb2).unwrap().u.values;
        let w: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| a - b).collect();
        let h2 = grid.h * grid.h;
        let grad = gradients(&grid, &w).iter().map(|g| h2 * (g[0] * g[0] + g[1] * g[1])).sum::<f64>().sqrt();
        // discrete H^-1(U) norm: (df . (G^T G)^{-1} df h^2)^{1/2} on interior nodes
        let lap = Laplacian::new(grid, BoundaryMode::Zero);
        let mut df: Vec<f64> = (0..grid.num_nodes()).map(|k| 1.0 - f2[k]).collect();
        lap.project(&mut df);
        let mut sol = df.clone();
        lap.solve(&mut sol);
        let hm1 = (h2 * df.iter().zip(&sol).map(|(a, b)| a * b).sum::<f64>()).sqrt();
        assert!(grad > 0.0);
        assert!(grad <= hm1 * (1.0 + 1e-6), "{grad} vs {hm1}");
        // the periodic surrogate is finite and of the same order
        let dc = cell_means(&grid, &(0..grid.num_nodes()).map(|k| 1.0 - f2[k]).collect::<Vec<_>>());
        let sur = h_minus_one_norm(&dc, &grid, &pb1.domain_cells());
        assert!(sur.is_finite() && sur > 0.1 * hm1 && sur < 10.0 * hm1, "{sur} vs {hm1}");
    }

    #[test]
    fn h_minus_one_of_a_fourier_mode() {
        // a single mode has ||f||_{H^-1} = ||f||_{L^2} / |k|
        let (n, h) = (16, 0.25);
        let k = 2.0 * std::f64::consts::PI * 3.0 / (n as f64 * h);
        let vals: Vec<f64> = (0..n * n).map(|idx| (k * ((idx / n) as f64 + 0.5) * h).sin()).collect();
        let l2 = (vals.iter().map(|v| v * v).sum::<f64>() * h * h).sqrt();
        let got = periodic_h_minus_one(&vals, n, n, h);
        assert!((got - l2 / k).abs() < 1e-12 * l2, "{got} vs {}", l2 / k);
        let twice: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert!((periodic_h_minus_one(&twice, n, n, h) - 2.0 * got).abs() < 1e-12);
    }

    #[test]
    fn homogenized_constant_field_equals_heterogeneous() {
        let spec = EnsembleSpec::checkerboard(vec![Phase::linear(2.0)], 2.0, 1).unwrap();
        let ens = crate::homogenize::Ensemble::new("const", spec, TableSpec { bound: 1.0, points: 3 }).unwrap();
        let prm = crate::homogenize::ModelParams { n_top: 1, samples: 4, dual_points: 9, ..Default::default() };
        let model = crate::homogenize::estimate_model(&ens, &prm).unwrap();
        let a = model_matrix(&model).unwrap();
        assert!((a[0][0] - 2.0).abs() < 1e-6 && a[0][1].abs() < 1e-6);
        let pb = DirichletProblem::new(Shape::Box, 3, affine([0.3, 0.4]), Rhs::Constant(1.0)).unwrap();
        let medium = ens.medium(2, 4).unwrap();
        let u = solve_heterogeneous(&medium, &pb).unwrap();
        let ub = solve_homogenized(&model, &pb).unwrap();
        let err = homogenization_error(&u.u, &ub.u, &pb).unwrap();
        assert!(err < 1e-10, "{err}");
        // error symmetry and zero on identical input
        assert_eq!(homogenization_error(&ub.u, &u.u, &pb).unwrap(), err);
        assert_eq!(homogenization_error(&u.u, &u.u, &pb).unwrap(), 0.0);
    }

    #[test]
    fn scaled_coefficient_scales_the_solution() {
        // -div(A grad u) = 1 with A = 2 I is the unit Poisson solution halved
        let pb = DirichletProblem::new(Shape::Ball, 5, affine([0.0; 2]), Rhs::Constant(1.0)).unwrap();
        let u1 = solve(&Coefficients::Constant(ID), &pb).unwrap().u.values;
        let u2 = solve(&Coefficients::Constant([[2.0, 0.0], [0.0, 2.0]]), &pb).unwrap().u.values;
        let d = u1.iter().zip(&u2).map(|(a, b)| (0.5 * a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-8, "{d}");
    }

    #[test]
    fn profile_of_affine_and_r0() {
        let pb = DirichletProblem::new(Shape::Box, 6, affine([0.6, 0.8]), Rhs::Constant(0.0)).unwrap();
        let s = solve(&Coefficients::Constant(ID), &pb).unwrap();
        let radii = default_radii(pb.max_radius());
        let prof = lipschitz_profile(&s.u, &pb, &radii).unwrap();
        assert!(prof.iter().all(|p| (p - 1.0).abs() < 1e-9));
        let m = size_parameter(&s.u, &pb, 4.0).unwrap();
        assert!(10.0 * m * m >= 1.0);
        assert_eq!(minimal_radius(&radii, &prof, 10.0 * m * m), Some(radii[0]));
        for r in &radii {
            assert!(flatness(&s.u, &pb, *r).unwrap() < 1e-9);
        }
        assert!(campanato_check(&s.u, &pb, &radii[2..], 0.5).unwrap().iter().all(|r| r.member));
        assert!(lipschitz_profile(&s.u, &pb, &[7.0]).is_err());
    }

    #[test]
    fn flatness_of_centred_quadratic() {
        // l.s. fit of |x|^2 on the disk leaves (avg (|x|^2 - r^2/2)^2)^{1/2} = r^2 / sqrt(12)
        let pb = DirichletProblem::new(Shape::Box, 10, affine([0.0; 2]), Rhs::Constant(0.0)).unwrap();
        let grid = pb.grid();
        let mut u = GridField::zeros(grid, Location::Node, 1, Boundary::Free);
        u.values = node_values(&grid, |x| x[0] * x[0] + x[1] * x[1]);
        for r in [4.0, 8.0] {
            let f = flatness(&u, &pb, r).unwrap();
            // on the symmetric cell set the fit is the mean, so the residual
            // is the spread of |x_c|^2 over the cell centres
            let ball = ball_mask(&grid, [0.0; 2], r);
            let vals: Vec<f64> = (0..grid.nx)
                .flat_map(|i| (0..grid.ny).map(move |j| (i, j)))
                .filter(|&(i, j)| ball[grid.cell(i, j)])
                .map(|(i, j)| grid.cell_center(i, j))
                .map(|x| x[0] * x[0] + x[1] * x[1])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((f - var.sqrt() / r).abs() < 1e-9 * f, "{r}: {f}");
            let continuum = r / 12f64.sqrt();
            assert!((f - continuum).abs() < 0.05 * continuum, "{r}: {f} vs {continuum}");
        }
        let rows = campanato_check(&u, &pb, &[8.0], 0.4).unwrap();
        assert!(rows[0].member);
        let rows = campanato_check(&u, &pb, &[8.0], 0.6).unwrap();
        assert!(!rows[0].member);
    }

    #[test]
    fn linear_profile_scales_quadratically() {
        let m = checkerboard(4, 3);
        let pb = DirichletProblem::new(Shape::Box, 4, affine([0.5, -0.25]), Rhs::Constant(0.0)).unwrap();
        let mut pb3 = pb.clone();
        pb3.boundary = affine([1.5, -0.75]);
        let radii = default_radii(4.0);
        let p1 = lipschitz_profile(&solve_heterogeneous(&m, &pb).unwrap().u, &pb, &radii).unwrap();
        let p3 = lipschitz_profile(&solve_heterogeneous(&m, &pb3).unwrap().u, &pb3, &radii).unwrap();
        for (a, b) in p1.iter().zip(&p3) {
            assert!((9.0 * a - b).abs() < 1e-7 * b, "{a} {b}");
        }
    }

    #[test]
    fn interior_estimates_and_averages() {
        let m = checkerboard(4, 11);
        let pb = DirichletProblem::new(Shape::Box, 4, affine([1.0, 0.0]), Rhs::Constant(0.5)).unwrap();
        let s = solve_heterogeneous(&m, &pb).unwrap();
        let est = regularity_checks(&s.u, &pb, 2.0, &[0.5, 1.0]).unwrap();
        assert!(est.caccioppoli.is_finite() && est.caccioppoli > 0.0);
        assert!(est.meyers.iter().all(|(_, n, r)| n.is_finite() && r.is_finite()));
        assert!(regularity_checks(&s.u, &pb, 4.4, &[0.5]).is_err());
        let avg = unit_cell_averages(&s.u, &pb).unwrap();
        assert_eq!(avg.averages.len(), 81);
        assert!(avg.holds(1e-12));
        // affine data without forcing: ratio is the ratio of |xi| to R^{-1} (avg |xi . x|^2)^{1/2}
        let pa = DirichletProblem::new(Shape::Box, 4, affine([1.0, 0.0]), Rhs::Constant(0.0)).unwrap();
        let sa = solve(&Coefficients::Constant(ID), &pa).unwrap();
        let ea = regularity_checks(&sa.u, &pa, 2.0, &[0.5]).unwrap();
        assert!(ea.caccioppoli <= 10.0);
    }

    #[test]
    fn report_writes_rows_and_summary() {
        let pb = DirichletProblem::new(Shape::Box, 3, affine([0.6, 0.8]), Rhs::Constant(0.0)).unwrap();
        let s = solve(&Coefficients::Constant(ID), &pb).unwrap();
        let rep = RegularityReport::build("ctrl", 7, &s.u, &pb, &RegularityParams::default(), Some(&s.u)).unwrap();
        assert_eq!(rep.r0, Some(1.0));
        assert!(rep.profile_bounded_above_r0());
        assert_eq!(rep.homogenization_error, Some(0.0));
        let dir = std::env::temp_dir().join(format!("varhom-reg-{}", std::process::id()));
        let path = rep.write_csv(&dir).unwrap();
        assert!(path.file_name().unwrap().to_str().unwrap().contains("ctrl_7"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + rep.radii.len());
        assert_eq!(rep.summary_line().split(',').count(), RegularityReport::SUMMARY_HEADER.split(',').count());
        std::fs::remove_dir_all(dir).ok();
    }
}
