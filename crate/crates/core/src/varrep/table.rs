use super::{Integrand, Result, VarrepError};
use rayon::prelude::*;
use std::io::{Read, Write};

/// Values on a uniform rectangular grid in `k` dimensions, row-major
/// (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A uniform grid `[-bound, bound]^k` with `points` nodes per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableSpec {
    pub bound: f64,
    pub points: usize,
}

impl TableSpec {
    pub fn spacing(&self) -> f64 {
        2.0 * self.bound / (self.points - 1) as f64
    }
}

impl Table {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let k = shape.len();
        if k == 0 || lo.len() != k || hi.len() != k {
            return Err(VarrepError::InvalidInput("table bounds do not match shape".into()));
        }
        if shape.iter().any(|&n| n < 2) || (0..k).any(|i| !(hi[i] > lo[i])) {
            return Err(VarrepError::InvalidInput("table axes need at least two points and positive extent".into()));
        }
        if values.len() != shape.iter().product::<usize>() {
            return Err(VarrepError::InvalidInput("table value count does not match shape".into()));
        }
        Ok(Table { lo, hi, shape, values })
    }

    pub fn cube(k: usize, spec: TableSpec, values: Vec<f64>) -> Result<Self> {
        Table::new(vec![-spec.bound; k], vec![spec.bound; k], vec![spec.points; k], values)
    }

    pub fn from_fn(k: usize, spec: TableSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let n = spec.points.pow(k as u32);
        let mut t = Table::cube(k, spec, vec![0.0; n]).expect("valid spec");
        let mut z = vec![0.0; k];
        for idx in 0..n {
            t.node_into(idx, &mut z);
            t.values[idx] = f(&z);
        }
        t
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.shape[axis] - 1) as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + i as f64 * self.step(axis)
    }

    pub fn strides(&self) -> Vec<usize> {
        let k = self.rank();
        let mut s = vec![1; k];
        for a in (0..k.saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.shape[a + 1];
        }
        s
    }

    pub fn unravel(&self, mut idx: usize, out: &mut [usize]) {
        for a in (0..self.rank()).rev() {
            out[a] = idx % self.shape[a];
            idx /= self.shape[a];
        }
    }

    pub fn node_into(&self, idx: usize, z: &mut [f64]) {
        let mut rem = idx;
        for a in (0..self.rank()).rev() {
            let i = rem % self.shape[a];
            rem /= self.shape[a];
            z[a] = self.coord(a, i);
        }
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        let mut rem = idx;
        for a in (0..self.rank()).rev() {
            let i = rem % self.shape[a];
            rem /= self.shape[a];
            if i == 0 || i + 1 == self.shape[a] {
                return false;
            }
        }
        true
    }

    /// Cell index and local coordinates of `z`, or an error outside the grid.
    fn locate(&self, z: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let k = self.rank();
        if z.len() != k {
            return Err(VarrepError::InvalidInput("query rank does not match table".into()));
        }
        let mut cell = vec![0; k];
        let mut frac = vec![0.0; k];
        for a in 0..k {
            let s = (z[a] - self.lo[a]) / self.step(a);
            let top = (self.shape[a] - 1) as f64;
            if !(s >= -1e-12 && s <= top + 1e-12) {
                return Err(VarrepError::OutOfDomain(format!("coordinate {a} = {} outside [{}, {}]", z[a], self.lo[a], self.hi[a])));
            }
            let c = (s.floor().max(0.0) as usize).min(self.shape[a] - 2);
            cell[a] = c;
            frac[a] = (s - c as f64).clamp(0.0, 1.0);
        }
        Ok((cell, frac))
    }

    /// Multilinear interpolation of `data` (same layout as `values`).
    fn interp_with(&self, data: &[f64], z: &[f64]) -> Result<f64> {
        let (cell, frac) = self.locate(z)?;
        let k = self.rank();
        let strides = self.strides();
        let base: usize = (0..k).map(|a| cell[a] * strides[a]).sum();
        let mut acc = 0.0;
        for corner in 0..1usize << k {
            let mut w = 1.0;
            let mut off = 0;
            for a in 0..k {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    off += strides[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * data[base + off];
            }
        }
        Ok(acc)
    }

    pub fn interpolate(&self, z: &[f64]) -> Result<f64> {
        self.interp_with(&self.values, z)
    }

    /// Central-difference gradient tables; entries on the boundary are NaN.
    pub fn difference_gradients(&self) -> Vec<Vec<f64>> {
        let k = self.rank();
        let strides = self.strides();
        let mut idx = vec![0; k];
        (0..k)
            .map(|a| {
                let h = self.step(a);
                (0..self.len())
                    .map(|n| {
                        self.unravel(n, &mut idx);
                        if idx[a] == 0 || idx[a] + 1 == self.shape[a] {
                            f64::NAN
                        } else {
                            (self.values[n + strides[a]] - self.values[n - strides[a]]) / (2.0 * h)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Table) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// A tabulated integrand on `R^d x R^d`: multilinear values with
/// multilinearly interpolated nodal gradients.
#[derive(Clone, Debug)]
pub struct Tabulated {
    d: usize,
    pub table: Table,
    grads: Vec<Vec<f64>>,
    pub lambda: Option<f64>,
    pub k0: f64,
    pub self_dual: bool,
}

impl Tabulated {
    /// Gradients come from central differences; queries whose cell touches the
    /// table edge cannot be differentiated.
    pub fn new(d: usize, table: Table, lambda: Option<f64>, k0: f64) -> Result<Self> {
        if table.rank() != 2 * d {
            return Err(VarrepError::InvalidInput("table rank must be 2d".into()));
        }
        let grads = table.difference_gradients();
        Ok(Tabulated { d, table, grads, lambda, k0, self_dual: false })
    }

    pub fn with_gradients(d: usize, table: Table, grads: Vec<Vec<f64>>, lambda: Option<f64>, k0: f64) -> Result<Self> {
        if table.rank() != 2 * d || grads.len() != 2 * d || grads.iter().any(|g| g.len() != table.len()) {
            return Err(VarrepError::InvalidInput("gradient tables do not match".into()));
        }
        Ok(Tabulated { d, table, grads, lambda, k0, self_dual: false })
    }

    pub fn spacing(&self) -> f64 {
        (0..self.table.rank()).map(|a| self.table.step(a)).fold(0.0, f64::max)
    }

    /// Bound on the error of the grid Legendre transform at trusted entries:
    /// `Lambda * k h^2 / 8` with `k = 2d` axes.
    pub fn tabulation_error(&self) -> f64 {
        let lam = self.lambda.unwrap_or(f64::NAN);
        let h = self.spacing();
        lam * (2 * self.d) as f64 * h * h / 8.0
    }

    pub fn write_hglf<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let t = &self.table;
        w.write_all(b"HGLF")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        w.write_all(&self.lambda.unwrap_or(f64::NAN).to_le_bytes())?;
        w.write_all(&self.k0.to_le_bytes())?;
        for a in 0..t.rank() {
            w.write_all(&t.lo[a].to_le_bytes())?;
            w.write_all(&t.hi[a].to_le_bytes())?;
        }
        for &n in &t.shape {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for v in &t.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_hglf<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| VarrepError::InvalidInput(format!("container read failed: {e}"));
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(io)?;
        if &b4 != b"HGLF" {
            return Err(VarrepError::InvalidInput("bad magic".into()));
        }
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != 1 {
            return Err(VarrepError::InvalidInput(format!("unsupported container version {version}")));
        }
        r.read_exact(&mut b4).map_err(io)?;
        let d = u32::from_le_bytes(b4) as usize;
        if d == 0 || d > 4 {
            return Err(VarrepError::UnsupportedDimension(d));
        }
        fn f<R: Read>(r: &mut R) -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|e| VarrepError::InvalidInput(format!("container read failed: {e}")))?;
            Ok(f64::from_le_bytes(b))
        }
        let lambda = f(&mut r)?;
        let k0 = f(&mut r)?;
        let k = 2 * d;
        let mut lo = vec![0.0; k];
        let mut hi = vec![0.0; k];
        for a in 0..k {
            lo[a] = f(&mut r)?;
            hi[a] = f(&mut r)?;
        }
        let mut shape = vec![0; k];
        for s in shape.iter_mut() {
            r.read_exact(&mut b8).map_err(io)?;
            *s = u64::from_le_bytes(b8) as usize;
        }
        let n: usize = shape.iter().product();
        let mut values = vec![0.0; n];
        for v in values.iter_mut() {
            *v = f(&mut r)?;
        }
        let table = Table::new(lo, hi, shape, values)?;
        Tabulated::new(d, table, if lambda.is_nan() { None } else { Some(lambda) }, k0)
    }
}

impl Integrand for Tabulated {
    fn dim(&self) -> usize {
        self.d
    }

    fn convexity(&self) -> Option<f64> {
        self.lambda
    }

    fn k0(&self) -> f64 {
        self.k0
    }

    fn self_dual(&self) -> bool {
        self.self_dual
    }

    fn value(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        let z: Vec<f64> = p.iter().chain(q).copied().collect();
        self.table.interpolate(&z)
    }

    fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
        let z: Vec<f64> = p.iter().chain(q).copied().collect();
        let v = self.table.interpolate(&z)?;
        for a in 0..2 * self.d {
            let g = self.table.interp_with(&self.grads[a], &z)?;
            if g.is_nan() {
                return Err(VarrepError::OutOfDomain("gradient unavailable on the table edge".into()));
            }
            if a < self.d {
                gp[a] = g;
            } else {
                gq[a - self.d] = g;
            }
        }
        Ok(v)
    }
}

/// Tabulate values and exact gradients of `f` on `[-B, B]^{2d}` (in parallel).
/// Nodes along each axis line are visited in order with warm starts.
pub fn tabulate<F: Integrand>(f: &F, spec: TableSpec) -> Result<Tabulated> {
    let d = f.dim();
    let k = 2 * d;
    if spec.points < 2 || !(spec.bound > 0.0) {
        return Err(VarrepError::InvalidInput("table needs >= 2 points and a positive bound".into()));
    }
    let shape = Table::cube(k, spec, vec![0.0; spec.points.pow(k as u32)])?;
    let line = spec.points;
    let lines: Vec<Result<Vec<(f64, Vec<f64>)>>> = (0..shape.len() / line)
        .into_par_iter()
        .map(|li| {
            let mut warm = Vec::new();
            let mut z = vec![0.0; k];
            let mut out = Vec::with_capacity(line);
            for j in 0..line {
                shape.node_into(li * line + j, &mut z);
                let mut g = vec![0.0; k];
                let (gp, gq) = g.split_at_mut(d);
                let v = f.value_grad_warm(&z[..d], &z[d..], gp, gq, &mut warm)?;
                out.push((v, g));
            }
            Ok(out)
        })
        .collect();
    let mut values = Vec::with_capacity(shape.len());
    let mut grads = vec![Vec::with_capacity(shape.len()); k];
    for l in lines {
        for (v, g) in l? {
            values.push(v);
            for a in 0..k {
                grads[a].push(g[a]);
            }
        }
    }
    let table = Table::cube(k, spec, values)?;
    let mut t = Tabulated::with_gradients(d, table, grads, f.convexity(), f.k0())?;
    t.self_dual = f.self_dual();
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multilinear_is_exact_on_multilinear_data() {
        let spec = TableSpec { bound: 1.0, points: 5 };
        let t = Table::from_fn(3, spec, |z| 1.0 + 2.0 * z[0] - z[1] + 0.5 * z[0] * z[2] + z[0] * z[1] * z[2]);
        let z = [0.13, -0.77, 0.41];
        let want = 1.0 + 2.0 * z[0] - z[1] + 0.5 * z[0] * z[2] + z[0] * z[1] * z[2];
        assert!((t.interpolate(&z).unwrap() - want).abs() < 1e-13);
        assert!(matches!(t.interpolate(&[1.2, 0.0, 0.0]), Err(VarrepError::OutOfDomain(_))));
    }

    #[test]
    fn container_round_trip() {
        let spec = TableSpec { bound: 2.0, points: 4 };
        let t = Table::from_fn(4, spec, |z| z.iter().map(|x| x * x).sum::<f64>());
        let f = Tabulated::new(2, t, Some(3.0), 0.5).unwrap();
        let mut buf = Vec::new();
        f.write_hglf(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HGLF");
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 8 + 8 * 8 + 4 * 8 + 256 * 8);
        let g = Tabulated::read_hglf(&buf[..]).unwrap();
        assert_eq!(g.table, f.table);
        assert_eq!(g.lambda, Some(3.0));
        assert_eq!(g.k0, 0.5);
        assert!(Tabulated::read_hglf(&b"HGLX"[..]).is_err());
    }

    #[test]
    fn edge_gradient_is_refused() {
        let spec = TableSpec { bound: 1.0, points: 5 };
        let t = Table::from_fn(2, spec, |z| z[0] * z[0] + z[1]);
        let f = Tabulated::new(1, t, None, 0.0).unwrap();
        let (mut gp, mut gq) = ([0.0], [0.0]);
        f.value_grad(&[0.1], &[0.2], &mut gp, &mut gq).unwrap();
        assert!((gp[0] - 0.2).abs() < 1e-12 && (gq[0] - 1.0).abs() < 1e-12);
        assert!(matches!(f.value_grad(&[0.9], &[0.0], &mut gp, &mut gq), Err(VarrepError::OutOfDomain(_))));
    }
}
