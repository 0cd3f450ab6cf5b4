//! Triadic cubes, bilinear grid calculus and the periodic Helmholtz-Hodge split.
//!
//! Scalars live on the nodes of a uniform square grid and are extended
//! bilinearly; gradients and curls are evaluated at cell centres. With this
//! one-point rule the pairing of a curl with a gradient integrates exactly, so
//! stream-function images are divergence free to round-off and orthogonal to
//! every gradient of a function vanishing on the boundary.

use crate::fft::{fft_nd, signed_freq};
use rustfft::num_complex::Complex64;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid cube: {0}")]
    InvalidCube(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty grid")]
    EmptyGrid,
    #[error("unsupported dimension {0}: only d = 2 is supported here")]
    UnsupportedDimension(usize),
    #[error("boundary tag {0:?} not allowed here")]
    WrongBoundary(Boundary),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// The cube `center + (-s/2, s/2)^d` with `s = 3^n`, or its trimmed version with
/// side `3^n - 3^(n/(1+beta))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TriadicCube {
    pub level: u32,
    pub center: Vec<i64>,
    pub trimmed: bool,
    pub beta: f64,
}

impl TriadicCube {
    /// Cube of level `n` centred at the origin of `R^dim`.
    pub fn new(dim: usize, n: u32, trimmed: bool, beta: f64) -> Result<Self, GridError> {
        Self::at(vec![0; dim], n, trimmed, beta)
    }

    /// Cube of level `n` centred at `center`, which must lie in `3^n Z^d`.
    pub fn at(center: Vec<i64>, n: u32, trimmed: bool, beta: f64) -> Result<Self, GridError> {
        if center.is_empty() {
            return Err(GridError::InvalidCube("dimension must be positive".into()));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(GridError::InvalidCube(format!("beta must be positive, got {beta}")));
        }
        if n > 30 {
            return Err(GridError::InvalidCube(format!("level {n} too large")));
        }
        let s = 3i64.pow(n);
        if center.iter().any(|c| c.rem_euclid(s) != 0) {
            return Err(GridError::InvalidCube(format!("center {center:?} not in 3^{n} Z^d")));
        }
        let cube = TriadicCube { level: n, center, trimmed, beta };
        if trimmed && cube.side() <= 0.0 {
            return Err(GridError::InvalidCube(format!(
                "trimmed cube of level {n} has non-positive side {}",
                cube.side()
            )));
        }
        Ok(cube)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Side of the untrimmed cube, `3^n`.
    pub fn full_side(&self) -> f64 {
        3f64.powi(self.level as i32)
    }

    /// Width removed by trimming, `3^(n/(1+beta))`.
    pub fn trim_width(&self) -> f64 {
        3f64.powf(self.level as f64 / (1.0 + self.beta))
    }

    pub fn side(&self) -> f64 {
        if self.trimmed {
            self.full_side() - self.trim_width()
        } else {
            self.full_side()
        }
    }

    pub fn volume(&self) -> f64 {
        self.side().powi(self.dim() as i32)
    }

    /// `|cube_n \ trimmed_n| / |cube_n|`.
    pub fn volume_deficit(&self) -> f64 {
        let r = (self.full_side() - self.trim_width()) / self.full_side();
        1.0 - r.max(0.0).powi(self.dim() as i32)
    }

    /// The `3^d` cubes of level `n-1` partitioning the untrimmed parent. They
    /// inherit the trimming flag.
    pub fn children(&self) -> Result<Vec<TriadicCube>, GridError> {
        if self.level == 0 {
            return Err(GridError::InvalidCube("level-0 cube has no children".into()));
        }
        let d = self.dim();
        let step = 3i64.pow(self.level - 1);
        let mut out = Vec::with_capacity(3usize.pow(d as u32));
        for k in 0..3usize.pow(d as u32) {
            let mut c = self.center.clone();
            let mut r = k;
            for a in 0..d {
                c[a] += ((r % 3) as i64 - 1) * step;
                r /= 3;
            }
            out.push(TriadicCube::at(c, self.level - 1, self.trimmed, self.beta)?);
        }
        Ok(out)
    }

    /// Lower and upper corner of the (exact) cube.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let h = self.side() / 2.0;
        let lo = self.center.iter().map(|&c| c as f64 - h).collect();
        let hi = self.center.iter().map(|&c| c as f64 + h).collect();
        (lo, hi)
    }

    /// Number of grid cells per side at `r` cells per unit length.
    ///
    /// Grid nodes sit at `-1/2 + k/r` so that unit cells `z + [-1/2, 1/2)^d`
    /// are resolved exactly. A centred box is node-aligned only when its cell
    /// count has the parity of `r`, so the trimmed side is rounded down to the
    /// nearest such count. Rounding down keeps the separation at least
    /// `3^(n/(1+beta))`.
    pub fn cells_per_side(&self, r: usize) -> usize {
        let full = 3usize.pow(self.level) * r;
        if !self.trimmed {
            return full;
        }
        let exact = self.side() * r as f64;
        let mut m = (exact + 1e-9).floor() as usize;
        if m % 2 != r % 2 {
            m = m.saturating_sub(1);
        }
        m
    }

    /// Uniform grid covering the cube (d = 2).
    pub fn grid(&self, r: usize) -> Result<Grid2, GridError> {
        if self.dim() != 2 {
            return Err(GridError::UnsupportedDimension(self.dim()));
        }
        if r == 0 {
            return Err(GridError::EmptyGrid);
        }
        let m = self.cells_per_side(r);
        if m == 0 {
            return Err(GridError::InvalidCube("cube thinner than one grid cell".into()));
        }
        let h = 1.0 / r as f64;
        let half = m as f64 * h / 2.0;
        Ok(Grid2 {
            origin: [self.center[0] as f64 - half, self.center[1] as f64 - half],
            h,
            nx: m,
            ny: m,
        })
    }

    /// Distance between this trimmed cube and its trimmed neighbour, in grid
    /// cells at resolution `r`.
    pub fn separation_cells(&self, r: usize) -> usize {
        3usize.pow(self.level) * r - self.cells_per_side(r)
    }
}

/// Uniform grid with `nx * ny` square cells of side `h` and lower-left node `origin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2 {
    pub origin: [f64; 2],
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Grid2 {
    pub fn new(origin: [f64; 2], h: f64, nx: usize, ny: usize) -> Result<Self, GridError> {
        if nx == 0 || ny == 0 || !(h > 0.0) {
            return Err(GridError::EmptyGrid);
        }
        Ok(Grid2 { origin, h, nx, ny })
    }

    pub fn num_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        i * (self.ny + 1) + j
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    pub fn node_pos(&self, i: usize, j: usize) -> [f64; 2] {
        [self.origin[0] + i as f64 * self.h, self.origin[1] + j as f64 * self.h]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [self.origin[0] + (i as f64 + 0.5) * self.h, self.origin[1] + (j as f64 + 0.5) * self.h]
    }

    pub fn is_boundary_node(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx || j == self.ny
    }

    pub fn area(&self) -> f64 {
        self.nx as f64 * self.ny as f64 * self.h * self.h
    }

    /// Cell-centre gradients, interleaved `[gx, gy]` per cell.
    pub fn gradient_into(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.num_nodes());
        debug_assert_eq!(out.len(), 2 * self.num_cells());
        let s = 0.5 / self.h;
        let ny1 = self.ny + 1;
        for i in 0..self.nx {
            for j in 0..self.ny {
                let k = i * ny1 + j;
                let (u00, u01, u10, u11) = (u[k], u[k + 1], u[k + ny1], u[k + ny1 + 1]);
                let c = 2 * (i * self.ny + j);
                out[c] = s * (u10 - u00 + u11 - u01);
                out[c + 1] = s * (u01 - u00 + u11 - u10);
            }
        }
    }

    /// Transpose of [`Grid2::gradient_into`] (plain sums, no quadrature weights).
    pub fn gradient_t_into(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.num_nodes());
        out.iter_mut().for_each(|v| *v = 0.0);
        let s = 0.5 / self.h;
        let ny1 = self.ny + 1;
        for i in 0..self.nx {
            for j in 0..self.ny {
                let k = i * ny1 + j;
                let c = 2 * (i * self.ny + j);
                let (gx, gy) = (s * g[c], s * g[c + 1]);
                out[k] += -gx - gy;
                out[k + 1] += -gx + gy;
                out[k + ny1] += gx - gy;
                out[k + ny1 + 1] += gx + gy;
            }
        }
    }

    /// Cell-centre curl `(d psi/dy, -d psi/dx)` of a nodal stream function.
    pub fn curl_into(&self, psi: &[f64], out: &mut [f64]) {
        self.gradient_into(psi, out);
        for c in out.chunks_exact_mut(2) {
            let (gx, gy) = (c[0], c[1]);
            c[0] = gy;
            c[1] = -gx;
        }
    }

    /// Transpose of [`Grid2::curl_into`].
    pub fn curl_t_into(&self, g: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        scratch.resize(g.len(), 0.0);
        for (s, c) in scratch.chunks_exact_mut(2).zip(g.chunks_exact(2)) {
            s[0] = -c[1];
            s[1] = c[0];
        }
        self.gradient_t_into(scratch, out);
    }
}

/// Where the values of a [`GridField`] live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Node,
    Cell,
}

/// Boundary tag of a scalar field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Free,
    Zero,
    Periodic,
}

/// Scalar or vector values on a [`Grid2`], components interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub grid: Grid2,
    pub location: Location,
    pub ncomp: usize,
    pub boundary: Boundary,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(grid: Grid2, location: Location, ncomp: usize, boundary: Boundary) -> Self {
        let n = match location {
            Location::Node => grid.num_nodes(),
            Location::Cell => grid.num_cells(),
        };
        GridField { grid, location, ncomp, boundary, values: vec![0.0; n * ncomp] }
    }

    /// Nodal scalar field sampled from `f(x, y)`. A zero tag forces boundary
    /// values to zero.
    pub fn from_fn(grid: Grid2, boundary: Boundary, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid, Location::Node, 1, boundary);
        for i in 0..=grid.nx {
            for j in 0..=grid.ny {
                let [x, y] = grid.node_pos(i, j);
                out.values[grid.node(i, j)] =
                    if boundary == Boundary::Zero && grid.is_boundary_node(i, j) { 0.0 } else { f(x, y) };
            }
        }
        out
    }

    fn expected_len(&self) -> usize {
        self.ncomp
            * match self.location {
                Location::Node => self.grid.num_nodes(),
                Location::Cell => self.grid.num_cells(),
            }
    }

    pub fn check(&self) -> Result<(), GridError> {
        if self.values.len() != self.expected_len() {
            return Err(GridError::ShapeMismatch(format!(
                "{} values for {:?} field with {} components on {}x{} cells",
                self.values.len(),
                self.location,
                self.ncomp,
                self.grid.nx,
                self.grid.ny
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(GridError::ShapeMismatch("non-finite value".into()));
        }
        Ok(())
    }

    /// `sum h^2 <a, b>` over the support of the field.
    pub fn inner(&self, other: &GridField) -> Result<f64, GridError> {
        if self.grid != other.grid || self.location != other.location || self.ncomp != other.ncomp {
            return Err(GridError::ShapeMismatch("inner product of incompatible fields".into()));
        }
        let w = self.grid.h * self.grid.h;
        Ok(w * self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Write `x, y, value...` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), GridError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["x".to_string(), "y".to_string()];
        for c in 0..self.ncomp {
            header.push(if self.ncomp == 1 { "value".into() } else { format!("value{c}") });
        }
        w.write_record(&header)?;
        let (mx, my) = match self.location {
            Location::Node => (self.grid.nx + 1, self.grid.ny + 1),
            Location::Cell => (self.grid.nx, self.grid.ny),
        };
        for i in 0..mx {
            for j in 0..my {
                let pos = match self.location {
                    Location::Node => self.grid.node_pos(i, j),
                    Location::Cell => self.grid.cell_center(i, j),
                };
                let k = i * my + j;
                let mut rec = vec![format!("{}", pos[0]), format!("{}", pos[1])];
                for c in 0..self.ncomp {
                    rec.push(format!("{}", self.values[k * self.ncomp + c]));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Cell-centre gradient of a nodal scalar field.
pub fn discrete_gradient(u: &GridField) -> Result<GridField, GridError> {
    u.check()?;
    if u.location != Location::Node || u.ncomp != 1 {
        return Err(GridError::ShapeMismatch("gradient needs a nodal scalar field".into()));
    }
    let mut g = GridField::zeros(u.grid, Location::Cell, 2, u.boundary);
    u.grid.gradient_into(&u.values, &mut g.values);
    Ok(g)
}

/// Nodal divergence of a cell vector field, defined as the negative adjoint of
/// [`discrete_gradient`] for the `h^2`-weighted pairings. Boundary nodes carry
/// the discrete normal flux.
pub fn discrete_divergence(g: &GridField) -> Result<GridField, GridError> {
    g.check()?;
    if g.location != Location::Cell || g.ncomp != 2 {
        return Err(GridError::ShapeMismatch("divergence needs a cell vector field".into()));
    }
    let mut out = GridField::zeros(g.grid, Location::Node, 1, g.boundary);
    g.grid.gradient_t_into(&g.values, &mut out.values);
    out.values.iter_mut().for_each(|v| *v = -*v);
    Ok(out)
}

/// Residual of `<grad u, g> + <u, div g>` restricted to interior nodes.
///
/// With the boundary values of `u` set to zero this is the full adjointness
/// defect; otherwise the boundary nodes contribute the flux term.
pub fn adjointness_residual(u: &GridField, g: &GridField) -> Result<f64, GridError> {
    let gu = discrete_gradient(u)?;
    let dg = discrete_divergence(g)?;
    let lhs = gu.inner(g)?;
    let grid = u.grid;
    let w = grid.h * grid.h;
    let mut rhs = 0.0;
    for i in 0..=grid.nx {
        for j in 0..=grid.ny {
            let k = grid.node(i, j);
            rhs += w * u.values[k] * dg.values[k];
        }
    }
    Ok(lhs + rhs)
}

/// Stream-function parametrization `psi -> (d2 psi, -d1 psi)` of solenoidal
/// cell fields on a box. With `zero_normal` the stream function vanishes on
/// the boundary, which gives the fields with zero normal flux.
#[derive(Clone, Copy, Debug)]
pub struct StreamMap {
    pub grid: Grid2,
    pub zero_normal: bool,
}

/// Build the stream-function map on a box given by its corners.
pub fn solenoidal_param(lo: &[f64], hi: &[f64], r: usize, zero_normal: bool) -> Result<StreamMap, GridError> {
    if lo.len() != 2 || hi.len() != 2 {
        return Err(GridError::UnsupportedDimension(lo.len()));
    }
    if r == 0 {
        return Err(GridError::EmptyGrid);
    }
    let h = 1.0 / r as f64;
    let nx = ((hi[0] - lo[0]) * r as f64).round() as usize;
    let ny = ((hi[1] - lo[1]) * r as f64).round() as usize;
    Ok(StreamMap { grid: Grid2::new([lo[0], lo[1]], h, nx, ny)?, zero_normal })
}

impl StreamMap {
    pub fn apply(&self, psi: &GridField) -> Result<GridField, GridError> {
        psi.check()?;
        if psi.grid != self.grid || psi.location != Location::Node || psi.ncomp != 1 {
            return Err(GridError::ShapeMismatch("stream function must be nodal on the map's grid".into()));
        }
        let mut p = psi.values.clone();
        if self.zero_normal {
            for i in 0..=self.grid.nx {
                for j in 0..=self.grid.ny {
                    if self.grid.is_boundary_node(i, j) {
                        p[self.grid.node(i, j)] = 0.0;
                    }
                }
            }
        }
        let mut g = GridField::zeros(self.grid, Location::Cell, 2, if self.zero_normal { Boundary::Zero } else { Boundary::Free });
        self.grid.curl_into(&p, &mut g.values);
        Ok(g)
    }
}

/// Vector field sampled on a periodic grid of any dimension; component `c`
/// is stored row-major in `comps[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicField {
    pub shape: Vec<usize>,
    pub h: f64,
    pub comps: Vec<Vec<f64>>,
}

impl PeriodicField {
    pub fn zeros(shape: Vec<usize>, h: f64) -> Self {
        let n = shape.iter().product();
        let d = shape.len();
        PeriodicField { shape, h, comps: vec![vec![0.0; n]; d] }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multi-index of flat position `k`.
    pub fn index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for a in (0..self.shape.len()).rev() {
            idx[a] = k % self.shape[a];
            k /= self.shape[a];
        }
        idx
    }

    /// `h^d`-weighted L2 inner product of two vector fields.
    pub fn inner(&self, other: &PeriodicField) -> f64 {
        let w = self.h.powi(self.shape.len() as i32);
        self.comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum::<f64>()
            * w
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    fn constant(&self, v: &[f64]) -> PeriodicField {
        let n = self.len();
        PeriodicField { shape: self.shape.clone(), h: self.h, comps: v.iter().map(|&c| vec![c; n]).collect() }
    }
}

/// Result of [`helmholtz_project`]: `f = mean + grad w - div S`.
#[derive(Clone, Debug)]
pub struct HelmholtzParts {
    pub mean: Vec<f64>,
    /// Periodic potential with zero mean.
    pub potential: Vec<f64>,
    pub gradient: PeriodicField,
    /// The field `div S`, entering the split with a minus sign.
    pub skew: PeriodicField,
}

impl HelmholtzParts {
    pub fn mean_field(&self) -> PeriodicField {
        self.gradient.constant(&self.mean)
    }

    /// `mean - div S`, the divergence-free part.
    pub fn solenoidal(&self) -> PeriodicField {
        let mut s = self.mean_field();
        for (c, k) in s.comps.iter_mut().zip(&self.skew.comps) {
            for (a, b) in c.iter_mut().zip(k) {
                *a -= b;
            }
        }
        s
    }

    pub fn reconstruct(&self) -> PeriodicField {
        let mut s = self.solenoidal();
        for (c, k) in s.comps.iter_mut().zip(&self.gradient.comps) {
            for (a, b) in c.iter_mut().zip(k) {
                *a += b;
            }
        }
        s
    }
}

/// Wave vector used by the spectral calculus. The Nyquist component of an
/// even axis is set to zero so that every multiplier keeps real fields real.
fn wave_vector(idx: &[usize], shape: &[usize], h: f64) -> Vec<f64> {
    idx.iter()
        .zip(shape)
        .map(|(&k, &n)| {
            if n % 2 == 0 && k == n / 2 {
                0.0
            } else {
                2.0 * PI * signed_freq(k, n) / (n as f64 * h)
            }
        })
        .collect()
}

/// Periodic Helmholtz-Hodge decomposition by FFT. Solves `-lap w = -div f`
/// and `-lap S_ij = d_j f_i - d_i f_j` on the torus with spectral derivatives.
pub fn helmholtz_project(f: &PeriodicField) -> Result<HelmholtzParts, GridError> {
    let d = f.shape.len();
    let n = f.len();
    if n == 0 || d == 0 {
        return Err(GridError::EmptyGrid);
    }
    if f.comps.len() != d || f.comps.iter().any(|c| c.len() != n) {
        return Err(GridError::ShapeMismatch("field components do not match the grid".into()));
    }
    let mut hat: Vec<Vec<Complex64>> = f
        .comps
        .iter()
        .map(|c| {
            let mut v: Vec<Complex64> = c.iter().map(|&x| Complex64::new(x, 0.0)).collect();
            fft_nd(&mut v, &f.shape, false);
            v
        })
        .collect();
    let mean: Vec<f64> = hat.iter().map(|v| v[0].re / n as f64).collect();
    let mut w_hat = vec![Complex64::new(0.0, 0.0); n];
    let mut grad_hat = vec![vec![Complex64::new(0.0, 0.0); n]; d];
    let mut skew_hat = vec![vec![Complex64::new(0.0, 0.0); n]; d];
    for k in 0..n {
        let idx = f.index(k);
        let kv = wave_vector(&idx, &f.shape, f.h);
        let k2: f64 = kv.iter().map(|x| x * x).sum();
        if k == 0 {
            continue;
        }
        if k2 == 0.0 {
            // pure Nyquist mode: no derivative sees it, so it is solenoidal
            for c in 0..d {
                skew_hat[c][k] = -hat[c][k];
            }
            continue;
        }
        let kdotf: Complex64 = (0..d).map(|c| hat[c][k] * kv[c]).sum();
        // w = -i k.f / |k|^2, grad w = i k w
        w_hat[k] = Complex64::new(0.0, -1.0) * kdotf / k2;
        for c in 0..d {
            let g = kv[c] * kdotf / k2;
            grad_hat[c][k] = g;
            // div S = -(f - grad w) on non-zero modes
            skew_hat[c][k] = -(hat[c][k] - g);
        }
    }
    hat.clear();
    let back = |mut v: Vec<Complex64>| -> Vec<f64> {
        fft_nd(&mut v, &f.shape, true);
        v.into_iter().map(|z| z.re).collect()
    };
    let potential = back(w_hat);
    let gradient = PeriodicField { shape: f.shape.clone(), h: f.h, comps: grad_hat.into_iter().map(back).collect() };
    let skew = PeriodicField { shape: f.shape.clone(), h: f.h, comps: skew_hat.into_iter().map(back).collect() };
    Ok(HelmholtzParts { mean, potential, gradient, skew })
}

/// Spectral divergence of a periodic field (used to audit the split).
pub fn spectral_divergence(f: &PeriodicField) -> Vec<f64> {
    let d = f.shape.len();
    let n = f.len();
    let mut acc = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..d {
        let mut v: Vec<Complex64> = f.comps[c].iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fft_nd(&mut v, &f.shape, false);
        for k in 0..n {
            let kv = wave_vector(&f.index(k), &f.shape, f.h);
            acc[k] += Complex64::new(0.0, kv[c]) * v[k];
        }
    }
    fft_nd(&mut acc, &f.shape, true);
    acc.into_iter().map(|z| z.re).collect()
}

/// Write several named nodal or cell series of one grid to CSV.
pub fn write_columns(path: &Path, grid: &Grid2, location: Location, cols: &[(&str, &[f64])]) -> Result<(), GridError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (mx, my) = match location {
        Location::Node => (grid.nx + 1, grid.ny + 1),
        Location::Cell => (grid.nx, grid.ny),
    };
    write!(file, "x,y")?;
    for (name, _) in cols {
        write!(file, ",{name}")?;
    }
    writeln!(file)?;
    for i in 0..mx {
        for j in 0..my {
            let p = match location {
                Location::Node => grid.node_pos(i, j),
                Location::Cell => grid.cell_center(i, j),
            };
            write!(file, "{},{}", p[0], p[1])?;
            for (_, v) in cols {
                write!(file, ",{}", v[i * my + j])?;
            }
            writeln!(file)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cube_sides() {
        let c = TriadicCube::new(2, 2, false, 1.0).unwrap();
        assert_eq!(c.side(), 9.0);
        let t = TriadicCube::new(2, 2, true, 1.0).unwrap();
        assert!((t.side() - 6.0).abs() < 1e-12);
        assert_eq!(c.children().unwrap().len(), 9);
        assert!(TriadicCube::new(2, 0, true, 1.0).is_err());
        assert!(TriadicCube::at(vec![1, 0], 1, false, 1.0).is_err());
    }

    #[test]
    fn children_partition_parent() {
        let c = TriadicCube::at(vec![27, -54], 3, false, 0.5).unwrap();
        let kids = c.children().unwrap();
        let vol: f64 = kids.iter().map(|k| k.volume()).sum();
        assert!((vol - c.volume()).abs() < 1e-9);
        let (lo, hi) = c.bounds();
        for k in &kids {
            let (a, b) = k.bounds();
            for ax in 0..2 {
                assert!(a[ax] >= lo[ax] - 1e-12 && b[ax] <= hi[ax] + 1e-12);
            }
        }
    }

    #[test]
    fn volume_deficit_decays() {
        for beta in [0.5, 1.0, 2.0] {
            for n in 1..=6 {
                let t = TriadicCube::new(2, n, true, beta).unwrap();
                let bound = 2.0 * 3f64.powf(-(n as f64) * beta / (1.0 + beta));
                assert!(t.volume_deficit() <= bound + 1e-12, "beta {beta} n {n}");
            }
        }
    }

    #[test]
    fn trimmed_cubes_are_separated() {
        for n in 1..=12u32 {
            for beta in [0.5, 1.0, 3.0] {
                let t = TriadicCube::new(2, n, true, beta).unwrap();
                for r in [1usize, 3] {
                    if t.cells_per_side(r) == 0 {
                        continue;
                    }
                    let need = r as f64 * t.trim_width();
                    assert!(t.separation_cells(r) as f64 >= need - 1e-9, "n {n} beta {beta} r {r}");
                }
            }
        }
    }

    #[test]
    fn cube_grid_is_aligned_to_unit_cells() {
        let c = TriadicCube::at(vec![3, 6], 1, false, 1.0).unwrap();
        let g = c.grid(3).unwrap();
        assert_eq!(g.nx, 9);
        assert!((g.origin[0] - 1.5).abs() < 1e-12 && (g.origin[1] - 4.5).abs() < 1e-12);
        let t = TriadicCube::new(2, 2, true, 1.0).unwrap();
        assert_eq!(t.cells_per_side(3), 17);
    }

    fn random_node_field(grid: Grid2, zero: bool, rng: &mut ChaCha8Rng) -> GridField {
        let mut f = GridField::zeros(grid, Location::Node, 1, if zero { Boundary::Zero } else { Boundary::Free });
        for i in 0..=grid.nx {
            for j in 0..=grid.ny {
                if !(zero && grid.is_boundary_node(i, j)) {
                    f.values[grid.node(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
        }
        f
    }

    #[test]
    fn affine_gradient_is_exact_and_constant_divergence_vanishes() {
        let grid = Grid2::new([0.3, -1.0], 0.25, 7, 5).unwrap();
        let u = GridField::from_fn(grid, Boundary::Free, |x, y| 2.0 * x - 3.0 * y + 1.0);
        let g = discrete_gradient(&u).unwrap();
        for c in g.values.chunks(2) {
            assert!((c[0] - 2.0).abs() < 1e-12 && (c[1] + 3.0).abs() < 1e-12);
        }
        let mut k = GridField::zeros(grid, Location::Cell, 2, Boundary::Free);
        for c in k.values.chunks_mut(2) {
            c[0] = 1.5;
            c[1] = -0.5;
        }
        let dv = discrete_divergence(&k).unwrap();
        for i in 1..grid.nx {
            for j in 1..grid.ny {
                assert!(dv.values[grid.node(i, j)].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjointness_with_zero_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Grid2::new([0.0, 0.0], 1.0 / 3.0, 12, 9).unwrap();
        for _ in 0..5 {
            let u = random_node_field(grid, true, &mut rng);
            let mut g = GridField::zeros(grid, Location::Cell, 2, Boundary::Free);
            g.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            assert!(adjointness_residual(&u, &g).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn stream_images_are_divergence_free_and_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let map = solenoidal_param(&[0.0, 0.0], &[4.0, 3.0], 3, true).unwrap();
        let grid = map.grid;
        let psi = random_node_field(grid, false, &mut rng);
        let g = map.apply(&psi).unwrap();
        for _ in 0..20 {
            let u = random_node_field(grid, false, &mut rng);
            let gu = discrete_gradient(&u).unwrap();
            assert!(gu.inner(&g).unwrap().abs() < 1e-12);
        }
        let free = solenoidal_param(&[0.0, 0.0], &[4.0, 3.0], 3, false).unwrap();
        let g = free.apply(&GridField::from_fn(grid, Boundary::Free, |x, y| x * y)).unwrap();
        let dv = discrete_divergence(&g).unwrap();
        for i in 1..grid.nx {
            for j in 1..grid.ny {
                assert!(dv.values[grid.node(i, j)].abs() < 1e-12);
            }
        }
        assert!(solenoidal_param(&[0.0; 3], &[1.0; 3], 3, true).is_err());
    }

    fn sample(shape: &[usize], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> PeriodicField {
        let mut out = PeriodicField::zeros(shape.to_vec(), h);
        for k in 0..out.len() {
            let x: Vec<f64> = out.index(k).iter().map(|&i| i as f64 * h).collect();
            let v = f(&x);
            for c in 0..shape.len() {
                out.comps[c][k] = v[c];
            }
        }
        out
    }

    #[test]
    fn helmholtz_pure_cases() {
        let l = 2.0;
        let w = 2.0 * PI / l;
        let shape = [16, 16];
        let h = l / 16.0;
        let grad = sample(&shape, h, |x| vec![w * (w * x[0]).cos(), 0.0]);
        let parts = helmholtz_project(&grad).unwrap();
        assert!(parts.skew.norm() < 1e-12 && parts.mean.iter().all(|m| m.abs() < 1e-12));
        let sol = sample(&shape, h, |x| {
            let (a, b) = (w * x[0], 2.0 * w * x[1]);
            vec![2.0 * w * a.sin() * b.cos(), -w * a.cos() * b.sin()]
        });
        let parts = helmholtz_project(&sol).unwrap();
        assert!(parts.gradient.norm() < 1e-12);
        let cst = sample(&[4, 5, 6], 0.5, |_| vec![1.0, -2.0, 0.5]);
        let parts = helmholtz_project(&cst).unwrap();
        assert!((parts.mean[1] + 2.0).abs() < 1e-14);
        assert!(parts.gradient.norm() < 1e-14 && parts.skew.norm() < 1e-14);
    }
}
