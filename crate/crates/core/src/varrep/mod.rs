//! Variational representatives of Lipschitz, uniformly monotone maps.
//!
//! A convex `F(p, q)` represents `a` when `F(p, q) >= p.q` everywhere with
//! equality exactly on the graph `q = a(p)`. This module provides the closed
//! form for linear maps, the Fitzpatrick function, the discrete Legendre
//! transform, the self-dual proximal average, recovery of the map from a
//! representative and a randomized verification report.

mod fitzpatrick;
mod legendre;
mod linear;
mod proxavg;
mod table;
mod verify;

pub use fitzpatrick::{fitzpatrick, ExtendedRepresentative, Fitzpatrick, FitzpatrickParams, GraphKind};
pub use legendre::{legendre_transform, legendre_transform_naive, LegendreTable};
pub use linear::{make_linear_representative, LinearRepresentative};
pub use proxavg::{selfdual_proximal_average, ProximalAverage, ProximalParams};
pub use table::{tabulate, Tabulated, Table, TableSpec};
pub use verify::{
    check_monotone, convexity_window, k0_bounds, recover_monotone_map, verify_representation, Conjugate, ConvexityReport,
    MonotoneReport, RepresentationReport, VerifyParams, Violation, ViolationKind, selfduality_residual,
};

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarrepError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("maximizer on the search-box boundary at radius {radius}; enlarge the domain")]
    EnlargeDomain { radius: f64 },
    #[error("query outside the tabulated domain: {0}")]
    OutOfDomain(String),
    #[error("solver failed to converge (residual {residual:e})")]
    SolverFailure { residual: f64 },
    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),
}

pub type Result<T> = std::result::Result<T, VarrepError>;

type MapFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type ProfileFn = dyn Fn(f64) -> (f64, f64) + Send + Sync;

/// A Lipschitz, uniformly monotone vector field on `R^d` with constant
/// `lambda` and `|a(0)| <= k0`.
#[derive(Clone)]
pub struct MonotoneMap {
    dim: usize,
    eval: Arc<MapFn>,
    jac: Option<Arc<MapFn>>,
    /// `r -> (g(r), g'(r))` when `a(p) = g(|p|) p`.
    profile: Option<Arc<ProfileFn>>,
    pub lambda: f64,
    pub k0: f64,
}

impl std::fmt::Debug for MonotoneMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MonotoneMap")
            .field("dim", &self.dim)
            .field("lambda", &self.lambda)
            .field("k0", &self.k0)
            .finish()
    }
}

impl MonotoneMap {
    pub fn new(
        dim: usize,
        lambda: f64,
        k0: f64,
        eval: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(VarrepError::InvalidInput("dimension must be positive".into()));
        }
        if !(lambda >= 1.0) || !lambda.is_finite() {
            return Err(VarrepError::InvalidInput(format!("lambda must be >= 1, got {lambda}")));
        }
        if !(k0 >= 0.0) {
            return Err(VarrepError::InvalidInput(format!("K0 must be >= 0, got {k0}")));
        }
        Ok(MonotoneMap { dim, eval: Arc::new(eval), jac: None, profile: None, lambda, k0 })
    }

    /// Attach an analytic Jacobian (row-major `d x d`, `J[i][j] = d a_i / d p_j`).
    pub fn with_jacobian(mut self, jac: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }

    /// Declare `a(p) = g(|p|) p` with `profile(r) = (g(r), g'(r))`.
    pub fn with_profile(mut self, profile: impl Fn(f64) -> (f64, f64) + Send + Sync + 'static) -> Self {
        self.profile = Some(Arc::new(profile));
        self
    }

    pub fn profile(&self, r: f64) -> Option<(f64, f64)> {
        self.profile.as_ref().map(|g| g(r))
    }

    /// `p -> B p` for a square matrix given row-major.
    pub fn linear(dim: usize, b: Vec<f64>, lambda: f64) -> Result<Self> {
        if b.len() != dim * dim {
            return Err(VarrepError::InvalidInput("matrix size does not match dimension".into()));
        }
        let b2 = b.clone();
        let m = MonotoneMap::new(dim, lambda, 0.0, move |p, out| {
            for i in 0..dim {
                out[i] = (0..dim).map(|j| b[i * dim + j] * p[j]).sum();
            }
        })?;
        Ok(m.with_jacobian(move |_, out| out.copy_from_slice(&b2)))
    }

    pub fn identity(dim: usize) -> Self {
        let mut b = vec![0.0; dim * dim];
        for i in 0..dim {
            b[i * dim + i] = 1.0;
        }
        MonotoneMap::linear(dim, b, 1.0).expect("identity is valid")
    }

    /// The radial family `a(p) = c p + b p / (1 + |p|)` (any dimension).
    pub fn radial(dim: usize, c: f64, b: f64, lambda: f64) -> Result<Self> {
        let m = MonotoneMap::new(dim, lambda, 0.0, move |p, out| {
            let r = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = c + b / (1.0 + r);
            for i in 0..p.len() {
                out[i] = s * p[i];
            }
        })?;
        Ok(m
            .with_jacobian(move |p, out| {
                let d = p.len();
                let r = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                let s = c + b / (1.0 + r);
                let t = if r > 0.0 { -b / ((1.0 + r) * (1.0 + r) * r) } else { 0.0 };
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = t * p[i] * p[j] + if i == j { s } else { 0.0 };
                    }
                }
            })
            .with_profile(move |r| (c + b / (1.0 + r), -b / ((1.0 + r) * (1.0 + r)))))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, p: &[f64], out: &mut [f64]) {
        (self.eval)(p, out)
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.eval)(p, &mut out);
        out
    }

    pub fn has_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    /// Jacobian, analytic when attached and central differences otherwise.
    pub fn jacobian(&self, p: &[f64], out: &mut [f64]) {
        if let Some(j) = &self.jac {
            return j(p, out);
        }
        let d = self.dim;
        let mut x = p.to_vec();
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for j in 0..d {
            let h = 1e-6 * (1.0 + p[j].abs());
            x[j] = p[j] + h;
            self.eval(&x, &mut fp);
            x[j] = p[j] - h;
            self.eval(&x, &mut fm);
            x[j] = p[j];
            for i in 0..d {
                out[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }

    /// Solve `a(p) = q` by damped Newton.
    pub fn inverse(&self, q: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut p = q.iter().map(|x| x / self.lambda).collect::<Vec<_>>();
        let mut r = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        let resid = |p: &[f64], r: &mut [f64]| {
            self.eval(p, r);
            for i in 0..d {
                r[i] -= q[i];
            }
            r.iter().map(|x| x * x).sum::<f64>().sqrt()
        };
        let mut norm = resid(&p, &mut r);
        for _ in 0..100 {
            if norm <= 1e-13 * (1.0 + q.iter().map(|x| x.abs()).sum::<f64>()) {
                return Ok(p);
            }
            self.jacobian(&p, &mut jac);
            let m = nalgebra::DMatrix::from_row_slice(d, d, &jac);
            let step = m
                .lu()
                .solve(&nalgebra::DVector::from_column_slice(&r))
                .ok_or(VarrepError::SolverFailure { residual: norm })?;
            let mut t = 1.0;
            let mut trial = vec![0.0; d];
            let mut rt = vec![0.0; d];
            loop {
                for i in 0..d {
                    trial[i] = p[i] - t * step[i];
                }
                let nt = resid(&trial, &mut rt);
                if nt < norm || t < 1e-10 {
                    p.copy_from_slice(&trial);
                    r.copy_from_slice(&rt);
                    norm = nt;
                    break;
                }
                t *= 0.5;
            }
        }
        if norm <= 1e-9 * (1.0 + q.iter().map(|x| x.abs()).sum::<f64>()) {
            Ok(p)
        } else {
            Err(VarrepError::SolverFailure { residual: norm })
        }
    }
}

/// A convex integrand `F(p, q)` on `R^d x R^d`.
pub trait Integrand: Send + Sync {
    fn dim(&self) -> usize;

    /// The constant `Lambda` of the window `|z|^2/(2 Lambda) <= ... <= Lambda |z|^2 / 2`
    /// when the construction guarantees one.
    fn convexity(&self) -> Option<f64>;

    fn k0(&self) -> f64 {
        0.0
    }

    fn self_dual(&self) -> bool {
        false
    }

    fn value(&self, p: &[f64], q: &[f64]) -> Result<f64>;

    /// Value and gradient. The default uses central differences.
    fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
        let f = self.value(p, q)?;
        let mut x = p.to_vec();
        let mut y = q.to_vec();
        for i in 0..self.dim() {
            let h = 1e-6 * (1.0 + p[i].abs());
            x[i] = p[i] + h;
            let a = self.value(&x, q)?;
            x[i] = p[i] - h;
            let b = self.value(&x, q)?;
            x[i] = p[i];
            gp[i] = (a - b) / (2.0 * h);
            let h = 1e-6 * (1.0 + q[i].abs());
            y[i] = q[i] + h;
            let a = self.value(p, &y)?;
            y[i] = q[i] - h;
            let b = self.value(p, &y)?;
            y[i] = q[i];
            gq[i] = (a - b) / (2.0 * h);
        }
        Ok(f)
    }

    /// `value_grad` with solver state carried between nearby queries.
    /// An empty `warm` means a cold start.
    fn value_grad_warm(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64], warm: &mut Vec<f64>) -> Result<f64> {
        let _ = warm;
        self.value_grad(p, q, gp, gq)
    }

    /// Selectors of the smooth pieces whose value is within `tol` of `F(p, q)`;
    /// more than one only near a kink. Empty when the integrand is smooth.
    fn branches(&self, p: &[f64], q: &[f64], tol: f64) -> Result<Vec<Vec<f64>>> {
        let _ = (p, q, tol);
        Ok(Vec::new())
    }

    /// Value and gradient of the smooth piece picked by a selector from
    /// [`Integrand::branches`].
    fn value_grad_branch(&self, p: &[f64], q: &[f64], branch: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
        let _ = branch;
        self.value_grad(p, q, gp, gq)
    }

    /// Hessian in the joint variable `z = (p, q)`, row-major `2d x 2d`.
    /// The default differentiates the gradient numerically.
    fn hessian(&self, p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let n = 2 * d;
        let mut z: Vec<f64> = p.iter().chain(q).copied().collect();
        let mut gp = vec![0.0; d];
        let mut gq = vec![0.0; d];
        let mut plus = vec![0.0; n];
        for j in 0..n {
            let h = 1e-5 * (1.0 + z[j].abs());
            let zj = z[j];
            z[j] = zj + h;
            self.value_grad(&z[..d], &z[d..], &mut gp, &mut gq)?;
            plus[..d].copy_from_slice(&gp);
            plus[d..].copy_from_slice(&gq);
            z[j] = zj - h;
            self.value_grad(&z[..d], &z[d..], &mut gp, &mut gq)?;
            z[j] = zj;
            for i in 0..n {
                let gm = if i < d { gp[i] } else { gq[i - d] };
                out[i * n + j] = (plus[i] - gm) / (2.0 * h);
            }
        }
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (out[i * n + j] + out[j * n + i]);
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        Ok(())
    }

    /// For integrands of the form `z -> z.H z / 2`, the matrix `H` (row-major).
    fn quadratic_form(&self) -> Option<Vec<f64>> {
        None
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radial_jacobian_matches_differences() {
        let a = MonotoneMap::radial(2, 1.5, 0.4, 2.0).unwrap();
        let fd = MonotoneMap::new(2, 2.0, 0.0, {
            let a = a.clone();
            move |p, o| a.eval(p, o)
        })
        .unwrap();
        let p = [0.7, -1.3];
        let mut j1 = [0.0; 4];
        let mut j2 = [0.0; 4];
        a.jacobian(&p, &mut j1);
        fd.jacobian(&p, &mut j2);
        for k in 0..4 {
            assert!((j1[k] - j2[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let a = MonotoneMap::radial(2, 1.2, 0.5, 2.0).unwrap();
        let p = [0.3, -2.0];
        let q = a.apply(&p);
        let back = a.inverse(&q).unwrap();
        assert!((back[0] - p[0]).abs() < 1e-10 && (back[1] - p[1]).abs() < 1e-10);
    }
}
