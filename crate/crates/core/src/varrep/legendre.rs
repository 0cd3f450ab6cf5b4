use super::table::Table;
use super::{Result, VarrepError};

/// Grid Legendre transform with a per-entry trust flag. An entry is trusted
/// when some maximizer lies strictly inside the primal grid.
#[derive(Clone, Debug)]
pub struct LegendreTable {
    pub table: Table,
    pub trusted: Vec<bool>,
}

impl LegendreTable {
    pub fn trusted_count(&self) -> usize {
        self.trusted.iter().filter(|&&t| t).count()
    }
}

fn check(f: &Table, dual: &Table) -> Result<()> {
    if f.rank() != dual.rank() {
        return Err(VarrepError::InvalidInput("primal and dual grids differ in rank".into()));
    }
    if f.values.iter().any(|v| !v.is_finite()) {
        return Err(VarrepError::InvalidInput("primal values must be finite".into()));
    }
    Ok(())
}

fn tie_tol(m: f64) -> f64 {
    1e-12 * (1.0 + m.abs())
}

/// `f*(w) = max over grid nodes z of z.w - f(z)`, evaluated at the nodes of
/// `dual` (whose values are ignored). The maximum is taken one axis at a time,
/// which gives exactly the same result as the full search.
pub fn legendre_transform(f: &Table, dual: &Table) -> Result<LegendreTable> {
    check(f, dual)?;
    let k = f.rank();
    // current array: axes 0..a already dualized (dual shape), a..k primal
    let mut shape = f.shape.clone();
    let mut vals: Vec<f64> = f.values.iter().map(|v| -v).collect();
    let mut flags = vec![true; vals.len()];
    for a in 0..k {
        let n_in = shape[a];
        let n_out = dual.shape[a];
        let outer: usize = shape[..a].iter().product();
        let inner: usize = shape[a + 1..].iter().product();
        let mut nv = vec![0.0; outer * n_out * inner];
        let mut nf = vec![false; nv.len()];
        let zs: Vec<f64> = (0..n_in).map(|i| f.coord(a, i)).collect();
        let ws: Vec<f64> = (0..n_out).map(|j| dual.coord(a, j)).collect();
        let mut cand = vec![0.0; n_in];
        for o in 0..outer {
            for s in 0..inner {
                for (j, &w) in ws.iter().enumerate() {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..n_in {
                        let v = vals[(o * n_in + i) * inner + s] + zs[i] * w;
                        cand[i] = v;
                        if v > m {
                            m = v;
                        }
                    }
                    let tol = tie_tol(m);
                    let ok = (1..n_in - 1).any(|i| cand[i] >= m - tol && flags[(o * n_in + i) * inner + s]);
                    let out = (o * n_out + j) * inner + s;
                    nv[out] = m;
                    nf[out] = ok;
                }
            }
        }
        shape[a] = n_out;
        vals = nv;
        flags = nf;
    }
    Ok(LegendreTable { table: Table::new(dual.lo.clone(), dual.hi.clone(), dual.shape.clone(), vals)?, trusted: flags })
}

/// Direct `O(N M)` evaluation, kept as an independent reference.
pub fn legendre_transform_naive(f: &Table, dual: &Table) -> Result<LegendreTable> {
    check(f, dual)?;
    let k = f.rank();
    let mut z = vec![0.0; k];
    let mut w = vec![0.0; k];
    let mut vals = vec![0.0; dual.len()];
    let mut trusted = vec![false; dual.len()];
    let mut cand = vec![0.0; f.len()];
    for j in 0..dual.len() {
        dual.node_into(j, &mut w);
        let mut m = f64::NEG_INFINITY;
        for i in 0..f.len() {
            f.node_into(i, &mut z);
            let v = z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - f.values[i];
            cand[i] = v;
            if v > m {
                m = v;
            }
        }
        vals[j] = m;
        // an interior maximizer, with the same per-axis tie tolerance
        let tol = tie_tol(m) * k as f64;
        trusted[j] = (0..f.len()).any(|i| f.is_interior(i) && cand[i] >= m - tol);
    }
    Ok(LegendreTable { table: Table::new(dual.lo.clone(), dual.hi.clone(), dual.shape.clone(), vals)?, trusted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::varrep::TableSpec;

    fn grid(k: usize, bound: f64, points: usize, f: impl Fn(&[f64]) -> f64) -> Table {
        Table::from_fn(k, TableSpec { bound, points }, f)
    }

    #[test]
    fn half_square_is_self_conjugate() {
        let f = grid(2, 2.0, 41, |z| 0.5 * (z[0] * z[0] + z[1] * z[1]));
        let dual = grid(2, 1.0, 21, |_| 0.0);
        let lt = legendre_transform(&f, &dual).unwrap();
        let mut w = [0.0; 2];
        for j in 0..dual.len() {
            dual.node_into(j, &mut w);
            assert!(lt.trusted[j]);
            assert!((lt.table.values[j] - 0.5 * (w[0] * w[0] + w[1] * w[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn square_conjugate_quarter() {
        // dual nodes at even multiples of the primal step hit nodes exactly
        let f = grid(2, 2.0, 41, |z| z[0] * z[0] + z[1] * z[1]);
        let dual = grid(2, 1.6, 9, |_| 0.0);
        let lt = legendre_transform(&f, &dual).unwrap();
        let mut w = [0.0; 2];
        for j in 0..dual.len() {
            dual.node_into(j, &mut w);
            assert!((lt.table.values[j] - 0.25 * (w[0] * w[0] + w[1] * w[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_support_function() {
        let b = [0.5, -0.25];
        let f = grid(2, 1.0, 9, |z| b[0] * z[0] + b[1] * z[1]);
        let dual = Table::new(vec![-0.5, -0.5], vec![0.5, 0.5], vec![5, 5], vec![0.0; 25]).unwrap();
        let lt = legendre_transform(&f, &dual).unwrap();
        let mut w = [0.0; 2];
        for j in 0..dual.len() {
            dual.node_into(j, &mut w);
            if (w[0] - b[0]).abs() < 1e-12 && (w[1] - b[1]).abs() < 1e-12 {
                assert!(lt.trusted[j]);
                assert!(lt.table.values[j].abs() < 1e-12);
            } else {
                assert!(!lt.trusted[j], "{w:?}");
            }
        }
    }

    #[test]
    fn separable_equals_naive() {
        let f = grid(3, 1.0, 7, |z| (z[0] - 0.2).powi(2) + 0.3 * z[1] * z[1] + (z[2] + z[0]).powi(4) + 0.1 * z[1] * z[2]);
        let dual = Table::new(vec![-1.5, -0.3, -2.0], vec![1.0, 0.7, 2.0], vec![6, 5, 7], vec![0.0; 210]).unwrap();
        let a = legendre_transform(&f, &dual).unwrap();
        let b = legendre_transform_naive(&f, &dual).unwrap();
        assert!(a.table.max_abs_diff(&b.table) < 1e-13);
        assert_eq!(a.trusted, b.trusted);
    }

    #[test]
    fn biconjugate_below() {
        let f = grid(2, 1.0, 11, |z| (z[0] * z[0] + 2.0 * z[1] * z[1]).sqrt() + z[0].abs());
        let lt = legendre_transform(&f, &grid(2, 3.0, 13, |_| 0.0)).unwrap();
        let back = legendre_transform(&lt.table, &f).unwrap();
        for (x, y) in back.table.values.iter().zip(&f.values) {
            assert!(*x <= y + 1e-12);
        }
    }
}
