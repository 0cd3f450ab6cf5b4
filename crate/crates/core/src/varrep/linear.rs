use super::{Integrand, MonotoneMap, Result, VarrepError};
use nalgebra::{DMatrix, DVector};

/// `F(p, q) = p.Ap/2 + (q - Mp).A^{-1}(q - Mp)/2`, representing `a(p) = (A + M) p`.
#[derive(Clone, Debug)]
pub struct LinearRepresentative {
    a: DMatrix<f64>,
    m: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    hess: DMatrix<f64>,
    window: f64,
}

/// Builds the closed-form representative. Matrices are row-major `d x d`.
pub fn make_linear_representative(d: usize, a: &[f64], m: &[f64]) -> Result<LinearRepresentative> {
    if d == 0 || a.len() != d * d || m.len() != d * d {
        return Err(VarrepError::InvalidInput("matrix sizes do not match dimension".into()));
    }
    let a = DMatrix::from_row_slice(d, d, a);
    let m = DMatrix::from_row_slice(d, d, m);
    let scale = 1.0 + a.amax() + m.amax();
    if (&a - a.transpose()).amax() > 1e-12 * scale {
        return Err(VarrepError::InvalidInput("A is not symmetric".into()));
    }
    if (&m + m.transpose()).amax() > 1e-12 * scale {
        return Err(VarrepError::InvalidInput("M is not skew-symmetric".into()));
    }
    let eig = a.clone().symmetric_eigen();
    let lo = eig.eigenvalues.min();
    if !(lo > 1e-12 * scale) {
        return Err(VarrepError::InvalidInput(format!("A is singular or indefinite (smallest eigenvalue {lo:e})")));
    }
    let a_inv = a.clone().try_inverse().ok_or_else(|| VarrepError::InvalidInput("A is singular".into()))?;
    // joint Hessian [[A + M^T A^-1 M, -M^T A^-1], [-A^-1 M, A^-1]]
    let mt_ai = m.transpose() * &a_inv;
    let mut hess = DMatrix::zeros(2 * d, 2 * d);
    hess.view_mut((0, 0), (d, d)).copy_from(&(&a + &mt_ai * &m));
    hess.view_mut((0, d), (d, d)).copy_from(&(-&mt_ai));
    hess.view_mut((d, 0), (d, d)).copy_from(&(-(&a_inv * &m)));
    hess.view_mut((d, d), (d, d)).copy_from(&a_inv);
    let he = hess.clone().symmetric_eigen().eigenvalues;
    let window = he.max().max(1.0 / he.min());
    Ok(LinearRepresentative { a, m, a_inv, hess, window })
}

impl LinearRepresentative {
    /// The represented map `p -> (A + M) p` with the smallest admissible `lambda`.
    pub fn map(&self) -> MonotoneMap {
        let d = self.a.nrows();
        let b = &self.a + &self.m;
        let lip = b.clone().singular_values().max();
        let mono = self.a.clone().symmetric_eigen().eigenvalues.min();
        let lambda = lip.max(1.0 / mono).max(1.0);
        let rows: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| b[(i, j)]).collect();
        MonotoneMap::linear(d, rows, lambda).expect("validated matrices")
    }

    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn m_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn a_inverse(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    /// Exact joint Hessian.
    pub fn joint_hessian(&self) -> &DMatrix<f64> {
        &self.hess
    }
}

impl Integrand for LinearRepresentative {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Exact window: the extreme eigenvalues of the joint Hessian.
    fn convexity(&self) -> Option<f64> {
        Some(self.window)
    }

    fn self_dual(&self) -> bool {
        true
    }

    fn value(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        let d = self.dim();
        let pv = DVector::from_column_slice(&p[..d]);
        let r = DVector::from_column_slice(&q[..d]) - &self.m * &pv;
        Ok(0.5 * pv.dot(&(&self.a * &pv)) + 0.5 * r.dot(&(&self.a_inv * &r)))
    }

    fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
        let d = self.dim();
        let z = DVector::from_iterator(2 * d, p[..d].iter().chain(&q[..d]).copied());
        let g = &self.hess * &z;
        gp.copy_from_slice(&g.as_slice()[..d]);
        gq.copy_from_slice(&g.as_slice()[d..]);
        Ok(0.5 * z.dot(&g))
    }

    fn hessian(&self, _p: &[f64], _q: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.hess.nrows();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.hess[(i, j)];
            }
        }
        Ok(())
    }

    fn quadratic_form(&self) -> Option<Vec<f64>> {
        let n = self.hess.nrows();
        Some((0..n * n).map(|k| self.hess[(k / n, k % n)]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const I2: [f64; 4] = [1.0, 0.0, 0.0, 1.0];
    const ROT: [f64; 4] = [0.0, 1.0, -1.0, 0.0];

    #[test]
    fn identity_examples() {
        let f = make_linear_representative(2, &I2, &[0.0; 4]).unwrap();
        assert!((f.value(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((f.value(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn skew_part_on_graph() {
        let f = make_linear_representative(2, &I2, &ROT).unwrap();
        assert!((f.value(&[1.0, 0.0], &[1.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        let a = f.map();
        assert_eq!(a.apply(&[1.0, 0.0]), vec![1.0, -1.0]);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(make_linear_representative(2, &[1.0, 0.5, 0.0, 1.0], &[0.0; 4]).is_err());
        assert!(make_linear_representative(2, &I2, &[0.0, 1.0, 1.0, 0.0]).is_err());
        assert!(make_linear_representative(2, &[1.0, 0.0, 0.0, 0.0], &[0.0; 4]).is_err());
    }

    #[test]
    fn gradient_matches_value_differences() {
        let f = make_linear_representative(3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 1.5], &[0.0, 0.4, -0.2, -0.4, 0.0, 0.7, 0.2, -0.7, 0.0])
            .unwrap();
        let (p, q) = ([0.3, -1.0, 0.2], [1.1, 0.4, -0.6]);
        let (mut gp, mut gq) = ([0.0; 3], [0.0; 3]);
        let v = f.value_grad(&p, &q, &mut gp, &mut gq).unwrap();
        assert!((v - f.value(&p, &q).unwrap()).abs() < 1e-13);
        let h = 1e-6;
        for i in 0..3 {
            let mut pp = p;
            pp[i] += h;
            let mut pm = p;
            pm[i] -= h;
            let fd = (f.value(&pp, &q).unwrap() - f.value(&pm, &q).unwrap()) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-8);
        }
    }
}
