use super::{dot, Integrand, Result, VarrepError};
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProximalParams {
    pub tol: f64,
    pub max_iter: usize,
    /// Finite-difference step for Hessians of the input integrand.
    pub fd_step: f64,
}

impl Default for ProximalParams {
    fn default() -> Self {
        ProximalParams { tol: 1e-11, max_iter: 60, fd_step: 1e-5 }
    }
}

/// The self-dual proximal average of `G` and `G*` with swapped arguments,
/// evaluated pointwise.
///
/// With `f = G`, `S(p, q) = (q, p)` and `z = (p, q)` the unknowns `y, v`
/// solve
///
/// ```text
/// y + grad f(y)/2 - S v / 2 = z
/// S (y + grad f(y)) = v + grad f(v)
/// ```
///
/// and then, with `w = y + grad f(y)`,
/// `F(z) = z.w - [w.y - f(y) - |y|^2/2]/2 - [f(v) + |grad f(v)|^2/2]/2 - |z|^2/2`
/// and `grad F(z) = w - z`. Only `grad f` is needed, never `f*`.
#[derive(Clone, Debug)]
pub struct ProximalAverage<G> {
    inner: G,
    lambda: f64,
    params: ProximalParams,
}

/// `lambda` is the constant of the represented map; the output window is `2 lambda + 1`.
pub fn selfdual_proximal_average<G: Integrand>(inner: G, lambda: f64, params: ProximalParams) -> ProximalAverage<G> {
    ProximalAverage { inner, lambda, params }
}

/// Full solution of one pointwise evaluation.
#[derive(Clone, Debug)]
pub struct ProximalPoint {
    pub value: f64,
    pub grad: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

struct Side {
    z: Vec<f64>,
    g: Vec<f64>,
    value: f64,
    warm: Vec<f64>,
}

impl<G: Integrand> ProximalAverage<G> {
    pub fn inner(&self) -> &G {
        &self.inner
    }

    fn grad_at(&self, z: &[f64], warm: &mut Vec<f64>) -> Result<(f64, Vec<f64>)> {
        let d = self.inner.dim();
        let mut g = vec![0.0; 2 * d];
        let (gp, gq) = g.split_at_mut(d);
        let v = self.inner.value_grad_warm(&z[..d], &z[d..], gp, gq, warm)?;
        Ok((v, g))
    }

    fn side(&self, z: Vec<f64>, mut warm: Vec<f64>) -> Result<Side> {
        let (value, g) = self.grad_at(&z, &mut warm)?;
        Ok(Side { z, g, value, warm })
    }

    fn hessian(&self, s: &Side) -> Result<DMatrix<f64>> {
        let n = s.z.len();
        if let Some(h) = self.inner.quadratic_form() {
            return Ok(DMatrix::from_row_slice(n, n, &h));
        }
        // forward differences from the known gradient: the Hessian only steers
        // Newton, the residual test decides convergence
        let mut h = DMatrix::zeros(n, n);
        let mut z = s.z.clone();
        for j in 0..n {
            let e = self.params.fd_step * (1.0 + s.z[j].abs());
            z[j] = s.z[j] + e;
            let (_, gp) = self.grad_at(&z, &mut s.warm.clone())?;
            z[j] = s.z[j];
            for i in 0..n {
                h[(i, j)] = (gp[i] - s.g[i]) / e;
            }
        }
        Ok((&h + h.transpose()) * 0.5)
    }

    fn residual(z: &[f64], y: &Side, v: &Side) -> Vec<f64> {
        let n = z.len();
        let d = n / 2;
        let mut r = vec![0.0; 2 * n];
        for i in 0..n {
            let sv = v.z[(i + d) % n];
            r[i] = y.z[i] + 0.5 * y.g[i] - 0.5 * sv - z[i];
            let j = (i + d) % n;
            r[n + i] = y.z[j] + y.g[j] - v.z[i] - v.g[i];
        }
        r
    }

    /// Newton on the resolvent system; when that fails, the last iterate seeds
    /// a solve that allows either side to sit on a kink of the input.
    pub fn solve(&self, z: &[f64], start: Option<(&[f64], &[f64])>) -> Result<ProximalPoint> {
        match self.solve_smooth(z, start) {
            Ok(pt) => Ok(pt),
            Err((err, Some((y, v)))) => self.solve_kinked(z, &y, &v).map_err(|_| err),
            Err((err, None)) => Err(err),
        }
    }

    #[allow(clippy::type_complexity)]
    fn solve_smooth(&self, z: &[f64], start: Option<(&[f64], &[f64])>) -> std::result::Result<ProximalPoint, (VarrepError, Option<(Vec<f64>, Vec<f64>)>)> {
        let n = z.len();
        if n != 2 * self.inner.dim() {
            return Err((VarrepError::InvalidInput("argument length does not match dimension".into()), None));
        }
        let d = n / 2;
        let swap = |x: &[f64]| -> Vec<f64> { (0..n).map(|i| x[(i + d) % n]).collect() };
        let (y0, v0) = match start {
            Some((y, v)) => (y.to_vec(), v.to_vec()),
            None => (z.to_vec(), swap(z)),
        };
        let mut y = self.side(y0, Vec::new()).map_err(|e| (e, None))?;
        let mut v = self.side(v0, Vec::new()).map_err(|e| (e, None))?;
        let mut r = Self::residual(z, &y, &v);
        let mut rn = dot(&r, &r).sqrt();
        let tol = self.params.tol * (1.0 + dot(z, z).sqrt());
        let mut iterations = 0;
        let mut stalled = false;
        while rn > tol && !stalled {
            if iterations >= self.params.max_iter {
                // finite-difference Hessians cap the attainable accuracy
                if rn <= 1e3 * tol {
                    break;
                }
                return Err((VarrepError::SolverFailure { residual: rn }, Some((y.z, v.z))));
            }
            iterations += 1;
            let (h1, h2) = match (self.hessian(&y), self.hessian(&v)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return Err((e, Some((y.z, v.z)))),
            };
            let mut jac = DMatrix::zeros(2 * n, 2 * n);
            for i in 0..n {
                for j in 0..n {
                    let id = if i == j { 1.0 } else { 0.0 };
                    jac[(i, j)] = id + 0.5 * h1[(i, j)];
                    jac[(n + i, n + j)] = -(id + h2[(i, j)]);
                    // row i of S(I + H1) is row (i + d) mod n of I + H1
                    let si = (i + d) % n;
                    let sid = if si == j { 1.0 } else { 0.0 };
                    jac[(n + i, j)] = sid + h1[(si, j)];
                }
                jac[(i, n + (i + d) % n)] = -0.5;
            }
            let Some(step) = jac.lu().solve(&(-DVector::from_column_slice(&r))) else {
                return Err((VarrepError::SolverFailure { residual: rn }, Some((y.z, v.z))));
            };
            let mut t = 1.0;
            loop {
                let yz: Vec<f64> = (0..n).map(|i| y.z[i] + t * step[i]).collect();
                let vz: Vec<f64> = (0..n).map(|i| v.z[i] + t * step[n + i]).collect();
                let trial = self.side(yz, y.warm.clone()).and_then(|ty| Ok((ty, self.side(vz, v.warm.clone())?)));
                if let Ok((ty, tv)) = trial {
                    let tr = Self::residual(z, &ty, &tv);
                    let tn = dot(&tr, &tr).sqrt();
                    if tn < rn {
                        y = ty;
                        v = tv;
                        r = tr;
                        rn = tn;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-8 {
                    if rn <= 1e3 * tol {
                        stalled = true;
                        break;
                    }
                    return Err((VarrepError::SolverFailure { residual: rn }, Some((y.z, v.z))));
                }
            }
        }
        let w: Vec<f64> = (0..n).map(|i| y.z[i] + y.g[i]).collect();
        let value = dot(z, &w)
            - 0.5 * (dot(&w, &y.z) - y.value - 0.5 * dot(&y.z, &y.z))
            - 0.5 * (v.value + 0.5 * dot(&v.g, &v.g))
            - 0.5 * dot(z, z);
        let grad = (0..n).map(|i| w[i] - z[i]).collect();
        Ok(ProximalPoint { value, grad, y: y.z, v: v.z, iterations, residual: rn })
    }
}

/// One side of the resolvent system restricted to one or two smooth pieces
/// of the input; with two pieces the point is held on their tie and the
/// gradient is `lam gA + (1 - lam) gB`.
struct Pieces {
    f: Vec<f64>,
    g: Vec<Vec<f64>>,
}

impl<G: Integrand> ProximalAverage<G> {
    fn pieces(&self, x: &[f64], sel: &[Vec<f64>]) -> Result<Pieces> {
        let d = self.inner.dim();
        let mut out = Pieces { f: Vec::new(), g: Vec::new() };
        for b in sel {
            let mut g = vec![0.0; 2 * d];
            let (gp, gq) = g.split_at_mut(d);
            out.f.push(self.inner.value_grad_branch(&x[..d], &x[d..], b, gp, gq)?);
            out.g.push(g);
        }
        Ok(out)
    }

    fn piece_hessian(&self, x: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
        let n = x.len();
        let mut h = DMatrix::zeros(n, n);
        let mut z = x.to_vec();
        for j in 0..n {
            let e = self.params.fd_step * (1.0 + x[j].abs());
            z[j] = x[j] + e;
            let gp = self.pieces(&z, std::slice::from_ref(&b.to_vec()))?.g.remove(0);
            z[j] = x[j] - e;
            let gm = self.pieces(&z, std::slice::from_ref(&b.to_vec()))?.g.remove(0);
            z[j] = x[j];
            for i in 0..n {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * e);
            }
        }
        Ok((&h + h.transpose()) * 0.5)
    }

    fn solve_kinked(&self, z: &[f64], y0: &[f64], v0: &[f64]) -> Result<ProximalPoint> {
        let n = z.len();
        let d = n / 2;
        let near = |x: &[f64]| -> Result<Vec<Vec<f64>>> {
            let f = self.inner.value(&x[..d], &x[d..])?;
            let mut b = self.inner.branches(&x[..d], &x[d..], 1e-2 * (1.0 + f.abs()))?;
            b.truncate(2);
            Ok(b)
        };
        let by = near(y0)?;
        let bv = near(v0)?;
        if by.len() < 2 && bv.len() < 2 {
            return Err(VarrepError::SolverFailure { residual: f64::NAN });
        }
        let options = |b: &Vec<Vec<f64>>| -> Vec<Vec<Vec<f64>>> {
            match b.len() {
                0 => vec![Vec::new()],
                1 => vec![b.clone()],
                _ => vec![b.clone(), vec![b[0].clone()], vec![b[1].clone()]],
            }
        };
        let mut last = VarrepError::SolverFailure { residual: f64::NAN };
        for sy in options(&by) {
            for sv in options(&bv) {
                match self.kink_newton(z, y0, v0, &sy, &sv) {
                    Ok(pt) => return Ok(pt),
                    Err(e) => last = e,
                }
            }
        }
        Err(last)
    }

    fn kink_newton(&self, z: &[f64], y0: &[f64], v0: &[f64], sy: &[Vec<f64>], sv: &[Vec<f64>]) -> Result<ProximalPoint> {
        if sy.is_empty() || sv.is_empty() {
            return Err(VarrepError::SolverFailure { residual: f64::NAN });
        }
        let n = z.len();
        let d = n / 2;
        let ky = sy.len() == 2;
        let kv = sv.len() == 2;
        let m = 2 * n + ky as usize + kv as usize;
        let mut u = vec![0.0; m];
        u[..n].copy_from_slice(y0);
        u[n..2 * n].copy_from_slice(v0);
        for k in 2 * n..m {
            u[k] = 0.5;
        }
        let lam_y = |u: &[f64]| if ky { u[2 * n] } else { 1.0 };
        let lam_v = |u: &[f64]| if kv { u[m - 1] } else { 1.0 };
        let mix = |p: &Pieces, lam: f64| -> Vec<f64> {
            if p.g.len() == 2 {
                (0..n).map(|i| lam * p.g[0][i] + (1.0 - lam) * p.g[1][i]).collect()
            } else {
                p.g[0].clone()
            }
        };
        let residual = |u: &[f64]| -> Result<(Vec<f64>, Pieces, Pieces)> {
            let py = self.pieces(&u[..n], sy)?;
            let pv = self.pieces(&u[n..2 * n], sv)?;
            let gy = mix(&py, lam_y(u));
            let gv = mix(&pv, lam_v(u));
            let mut r = vec![0.0; m];
            for i in 0..n {
                let j = (i + d) % n;
                r[i] = u[i] + 0.5 * gy[i] - 0.5 * u[n + j] - z[i];
                r[n + i] = u[j] + gy[j] - u[n + i] - gv[i];
            }
            let mut k = 2 * n;
            if ky {
                r[k] = py.f[0] - py.f[1];
                k += 1;
            }
            if kv {
                r[k] = pv.f[0] - pv.f[1];
            }
            Ok((r, py, pv))
        };
        let tol = self.params.tol * (1.0 + dot(z, z).sqrt());
        let (mut r, mut py, mut pv) = residual(&u)?;
        let mut rn = dot(&r, &r).sqrt();
        let mut iterations = 0;
        while rn > tol {
            if iterations >= self.params.max_iter {
                break;
            }
            iterations += 1;
            let (ly, lv) = (lam_y(&u), lam_v(&u));
            let hess = |x: &[f64], sel: &[Vec<f64>], lam: f64| -> Result<DMatrix<f64>> {
                let mut h = self.piece_hessian(x, &sel[0])? * lam;
                if sel.len() == 2 {
                    h += self.piece_hessian(x, &sel[1])? * (1.0 - lam);
                }
                Ok(h)
            };
            let h1 = hess(&u[..n], sy, ly)?;
            let h2 = hess(&u[n..2 * n], sv, lv)?;
            let mut jac = DMatrix::zeros(m, m);
            for i in 0..n {
                let si = (i + d) % n;
                for j in 0..n {
                    let id = if i == j { 1.0 } else { 0.0 };
                    jac[(i, j)] = id + 0.5 * h1[(i, j)];
                    jac[(n + i, n + j)] = -(id + h2[(i, j)]);
                    let sid = if si == j { 1.0 } else { 0.0 };
                    jac[(n + i, j)] = sid + h1[(si, j)];
                }
                jac[(i, n + si)] = -0.5;
            }
            let mut k = 2 * n;
            if ky {
                for i in 0..n {
                    let dg = py.g[0][i] - py.g[1][i];
                    jac[(i, k)] = 0.5 * dg;
                    jac[(k, i)] = dg;
                }
                for i in 0..n {
                    jac[(n + i, k)] = py.g[0][(i + d) % n] - py.g[1][(i + d) % n];
                }
                k += 1;
            }
            if kv {
                for i in 0..n {
                    let dg = pv.g[0][i] - pv.g[1][i];
                    jac[(n + i, k)] = -dg;
                    jac[(k, n + i)] = dg;
                }
            }
            let step = jac.lu().solve(&(-DVector::from_column_slice(&r))).ok_or(VarrepError::SolverFailure { residual: rn })?;
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = (0..m).map(|i| u[i] + t * step[i]).collect();
                if let Ok((tr, ty, tv)) = residual(&trial) {
                    let tn = dot(&tr, &tr).sqrt();
                    if tn < rn {
                        u = trial;
                        r = tr;
                        py = ty;
                        pv = tv;
                        rn = tn;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-8 {
                    break;
                }
            }
            if t < 1e-8 {
                break;
            }
        }
        if rn > 1e3 * tol {
            return Err(VarrepError::SolverFailure { residual: rn });
        }
        let (ly, lv) = (lam_y(&u), lam_v(&u));
        if !(-1e-9..=1.0 + 1e-9).contains(&ly) || !(-1e-9..=1.0 + 1e-9).contains(&lv) {
            return Err(VarrepError::SolverFailure { residual: rn });
        }
        // the pieces must be the active ones at the solution
        let (y, v) = (&u[..n], &u[n..2 * n]);
        for (x, p) in [(y, &py), (v, &pv)] {
            let f = self.inner.value(&x[..d], &x[d..])?;
            if (f - p.f[0]).abs() > 1e-9 * (1.0 + f.abs()) {
                return Err(VarrepError::SolverFailure { residual: rn });
            }
        }
        let gy = mix(&py, ly);
        let gv = mix(&pv, lv);
        let w: Vec<f64> = (0..n).map(|i| y[i] + gy[i]).collect();
        let value = dot(z, &w) - 0.5 * (dot(&w, y) - py.f[0] - 0.5 * dot(y, y)) - 0.5 * (pv.f[0] + 0.5 * dot(&gv, &gv)) - 0.5 * dot(z, z);
        let grad = (0..n).map(|i| w[i] - z[i]).collect();
        Ok(ProximalPoint { value, grad, y: y.to_vec(), v: v.to_vec(), iterations, residual: rn })
    }
}

impl<G: Integrand> Integrand for ProximalAverage<G> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn convexity(&self) -> Option<f64> {
        Some(2.0 * self.lambda + 1.0)
    }

    fn k0(&self) -> f64 {
        self.inner.k0()
    }

    fn self_dual(&self) -> bool {
        true
    }

    fn value(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        let z: Vec<f64> = p.iter().chain(q).copied().collect();
        Ok(self.solve(&z, None)?.value)
    }

    fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
        self.value_grad_warm(p, q, gp, gq, &mut Vec::new())
    }

    /// `warm` carries the previous `(y, v)` pair.
    fn value_grad_warm(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64], warm: &mut Vec<f64>) -> Result<f64> {
        let d = p.len();
        let z: Vec<f64> = p.iter().chain(q).copied().collect();
        let start = if warm.len() == 4 * d { Some((&warm[..2 * d], &warm[2 * d..])) } else { None };
        let sol = match self.solve(&z, start) {
            Ok(s) => s,
            Err(_) if start.is_some() => self.solve(&z, None)?,
            Err(e) => return Err(e),
        };
        gp.copy_from_slice(&sol.grad[..d]);
        gq.copy_from_slice(&sol.grad[d..]);
        warm.clear();
        warm.extend_from_slice(&sol.y);
        warm.extend_from_slice(&sol.v);
        Ok(sol.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::varrep::{make_linear_representative, ExtendedRepresentative, FitzpatrickParams, MonotoneMap};

    #[test]
    fn quadratic_fixed_point() {
        let g = make_linear_representative(2, &[1.0, 0.0, 0.0, 1.0], &[0.0; 4]).unwrap();
        let f = selfdual_proximal_average(g, 1.0, ProximalParams::default());
        for (p, q) in [([1.0, 0.0], [0.0, 1.0]), ([0.3, -0.2], [1.5, 0.7])] {
            let v = f.value(&p, &q).unwrap();
            assert!((v - 0.5 * (dot(&p, &p) + dot(&q, &q))).abs() < 1e-12);
        }
    }

    /// For `G(z) = z.Ez/2`: `F(z) = z.(H^{-1} - I)z/2` with
    /// `H = (E + I)^{-1}/2 + S (E^{-1} + I)^{-1} S / 2`.
    fn quadratic_oracle(e: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
        let n = e.nrows();
        let d = n / 2;
        let id = DMatrix::<f64>::identity(n, n);
        let mut s = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            s[(i, (i + d) % n)] = 1.0;
        }
        let a = (e + &id).try_inverse().unwrap() * 0.5;
        let b = &s * (e.clone().try_inverse().unwrap() + &id).try_inverse().unwrap() * &s * 0.5;
        let h = (a + b).try_inverse().unwrap() - id;
        0.5 * z.dot(&(h * z))
    }

    #[test]
    fn quadratic_inputs_match_matrix_oracle() {
        // a non-self-dual quadratic: scaled linear representative
        let base = make_linear_representative(2, &[2.0, 0.3, 0.3, 1.0], &[0.0, 0.5, -0.5, 0.0]).unwrap();
        struct Scaled(crate::varrep::LinearRepresentative);
        impl Integrand for Scaled {
            fn dim(&self) -> usize {
                2
            }
            fn convexity(&self) -> Option<f64> {
                None
            }
            fn value(&self, p: &[f64], q: &[f64]) -> Result<f64> {
                Ok(1.3 * self.0.value(p, q)? + 0.1 * (dot(p, p) + dot(q, q)))
            }
            fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
                let v = self.0.value_grad(p, q, gp, gq)?;
                for i in 0..2 {
                    gp[i] = 1.3 * gp[i] + 0.2 * p[i];
                    gq[i] = 1.3 * gq[i] + 0.2 * q[i];
                }
                Ok(1.3 * v + 0.1 * (dot(p, p) + dot(q, q)))
            }
        }
        let e = base.joint_hessian() * 1.3 + DMatrix::identity(4, 4) * 0.2;
        let f = selfdual_proximal_average(Scaled(base), 3.0, ProximalParams::default());
        for z in [[0.5, -0.2, 1.0, 0.3], [-1.0, 0.4, 0.2, 0.9]] {
            let got = f.value(&z[..2], &z[2..]).unwrap();
            let want = quadratic_oracle(&e, &DVector::from_column_slice(&z));
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn recovers_twice_identity() {
        let map = MonotoneMap::linear(2, vec![2.0, 0.0, 0.0, 2.0], 3.0).unwrap();
        let fe = ExtendedRepresentative::new(map, FitzpatrickParams::for_lambda(3.0));
        let f = selfdual_proximal_average(fe, 3.0, ProximalParams::default());
        let p = [1.0, -0.5];
        let q = [2.0, -1.0];
        let v = f.value(&p, &q).unwrap();
        assert!((v - dot(&p, &q)).abs() < 1e-8, "{v}");
        let off = f.value(&p, &[2.3, -1.0]).unwrap();
        assert!(off > dot(&p, &[2.3, -1.0]) + 1e-3);
    }

    #[test]
    fn radial_output_is_self_dual_and_in_window() {
        use crate::varrep::{convexity_window, verify::Conjugate};
        let map = MonotoneMap::radial(2, 1.5, 0.5, 3.0).unwrap();
        let fe = ExtendedRepresentative::new(map, FitzpatrickParams::for_lambda(3.0));
        let f = selfdual_proximal_average(fe, 3.0, ProximalParams::default());
        let conj = Conjugate(&f);
        for (p, q) in [([0.3, -0.4], [1.0, 0.2]), ([-0.8, 0.1], [0.0, -1.3])] {
            let a = f.value(&p, &q).unwrap();
            let b = conj.value(&q, &p).unwrap();
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        let rep = convexity_window(&f, 7.0, 40, 2.0, 5, 1e-8);
        assert_eq!(rep.violations, 0);
        assert_eq!(rep.errors, 0);
    }

    // resolvent lands where two Fitzpatrick branches tie
    #[test]
    fn kinked_resolvent_is_solved() {
        let map = MonotoneMap::radial(2, 1.5, 0.5, 3.0).unwrap();
        let fe = ExtendedRepresentative::new(map.clone(), FitzpatrickParams::for_lambda(3.0));
        let f = selfdual_proximal_average(fe, 3.0, ProximalParams::default());
        for z in [[0.4724, 0.7401, 2.5028, 3.7270], [0.7970, -0.3746, 3.9434, -2.1549]] {
            let v = f.value(&z[..2], &z[2..]).unwrap();
            assert!(v >= dot(&z[..2], &z[2..]) - 1e-9);
            let pt = f.solve(&[z[0], z[1], z[2], z[3]], None).unwrap();
            assert!(pt.residual < 1e-6);
        }
    }
}
