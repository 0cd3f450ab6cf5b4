use super::{dot, norm, Integrand, MonotoneMap, Result, VarrepError};
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitzpatrickParams {
    /// Search box is `[-B, B]^d` with `B = radius_scale * (1 + |p| + |q| + K0)`.
    pub radius_scale: f64,
    /// Grid stride is `B / divisions`.
    pub divisions: usize,
    pub ascent_steps: usize,
}

impl FitzpatrickParams {
    pub fn for_lambda(lambda: f64) -> Self {
        FitzpatrickParams { radius_scale: 2.0 * lambda, divisions: 32, ascent_steps: 50 }
    }
}

/// How the graph of the underlying map is traversed by the parameter `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphKind {
    /// `(X, Y) = (t, a(t) - s t)`: the graph of `a - s id`.
    Direct { shift: f64 },
    /// `(X, Y) = (a(t), t - s a(t))`: the graph of `a^{-1} - s id`, without inverting `a`.
    Inverse { shift: f64 },
}

/// Fitzpatrick function `F(p, q) = sup over the graph of q.X + p.Y - X.Y`.
#[derive(Clone, Debug)]
pub struct Fitzpatrick {
    map: MonotoneMap,
    kind: GraphKind,
    params: FitzpatrickParams,
}

/// Maximizer data of one Fitzpatrick evaluation.
#[derive(Clone, Debug)]
pub struct Maximizer {
    pub value: f64,
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn fitzpatrick(map: MonotoneMap, params: FitzpatrickParams) -> Fitzpatrick {
    Fitzpatrick::new(map, GraphKind::Direct { shift: 0.0 }, params)
}

impl Fitzpatrick {
    pub fn new(map: MonotoneMap, kind: GraphKind, params: FitzpatrickParams) -> Self {
        Fitzpatrick { map, kind, params }
    }

    pub fn map(&self) -> &MonotoneMap {
        &self.map
    }

    pub fn radius(&self, p: &[f64], q: &[f64]) -> f64 {
        self.params.radius_scale * (1.0 + norm(p) + norm(q) + self.map.k0)
    }

    fn graph_point(&self, t: &[f64], x: &mut [f64], y: &mut [f64]) {
        match self.kind {
            GraphKind::Direct { shift } => {
                x.copy_from_slice(t);
                self.map.eval(t, y);
                for i in 0..t.len() {
                    y[i] -= shift * t[i];
                }
            }
            GraphKind::Inverse { shift } => {
                self.map.eval(t, x);
                for i in 0..t.len() {
                    y[i] = t[i] - shift * x[i];
                }
            }
        }
    }

    fn objective(&self, p: &[f64], q: &[f64], t: &[f64], x: &mut [f64], y: &mut [f64]) -> f64 {
        self.graph_point(t, x, y);
        dot(q, x) + dot(p, y) - dot(x, y)
    }

    /// Gradient in `t`: `DX^T (q - Y) + DY^T (p - X)`.
    fn objective_grad(&self, p: &[f64], q: &[f64], t: &[f64], g: &mut [f64], ws: &mut Work) {
        let d = t.len();
        self.graph_point(t, &mut ws.x, &mut ws.y);
        self.map.jacobian(t, &mut ws.jac);
        let (sx, sy) = match self.kind {
            GraphKind::Direct { shift } => (None, shift),
            GraphKind::Inverse { shift } => (Some(shift), 0.0),
        };
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                let jij = ws.jac[i * d + j];
                let id = if i == j { 1.0 } else { 0.0 };
                let (dx, dy) = match sx {
                    None => (id, jij - sy * id),
                    Some(s1) => (jij, id - s1 * jij),
                };
                s += dx * (q[i] - ws.y[i]) + dy * (p[i] - ws.x[i]);
            }
            g[j] = s;
        }
    }

    /// Multi-start ascent; `warm` adds a start and replaces the dense sampling stage.
    pub fn maximize(&self, p: &[f64], q: &[f64], warm: Option<&[f64]>) -> Result<Maximizer> {
        let d = self.map.dim();
        if p.len() != d || q.len() != d {
            return Err(VarrepError::InvalidInput("argument length does not match dimension".into()));
        }
        let radius = self.radius(p, q);
        if self.map.profile(0.0).is_some() {
            return self.maximize_radial(p, q, radius);
        }
        let stride = radius / self.params.divisions as f64;
        let mut ws = Work::new(d);
        // The objective is not concave in general (radial laws have several
        // local maxima around the origin at every scale), so the ascent runs
        // from several starts and keeps the best.
        let mut starts = vec![vec![0.0; d]];
        match warm {
            Some(w) if w.len() == d && w.iter().all(|v| v.abs() < radius) => {
                starts.push(w.to_vec());
                if d == 2 {
                    starts.extend(self.polar_stage(p, q, radius, 12, 8, 1, &mut ws));
                }
            }
            _ if d == 2 => starts.extend(self.polar_stage(p, q, radius, 48, 32, 3, &mut ws)),
            _ => starts.push(self.grid_stage(p, q, radius, stride, &mut ws)),
        }
        let mut t = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for s in starts {
            let (ts, v) = self.ascend(p, q, s, &mut ws);
            if v > best {
                best = v;
                t = ts;
            }
        }
        if t.iter().any(|v| v.abs() > radius - 0.5 * stride) {
            return Err(VarrepError::EnlargeDomain { radius });
        }
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        let value = self.objective(p, q, &t, &mut x, &mut y);
        Ok(Maximizer { value, t, x, y })
    }

    /// For `a(t) = g(|t|) t` the graph point is `(alpha t, beta t)` with scalar
    /// `alpha, beta` depending on `r = |t|`, so the supremum over directions is
    /// explicit and only `r` is searched:
    /// `phi(r) = r |alpha q + beta p| - alpha beta r^2`.
    fn maximize_radial(&self, p: &[f64], q: &[f64], radius: f64) -> Result<Maximizer> {
        let mut all = self.radial_maxima(p, q, radius)?;
        Ok(all.swap_remove(0))
    }

    /// Every local maximum of `phi`, best first (`t = 0` when there is none).
    fn radial_maxima(&self, p: &[f64], q: &[f64], radius: f64) -> Result<Vec<Maximizer>> {
        let d = p.len();
        let coef = |r: f64| -> (f64, f64, f64, f64) {
            let (g, dg) = self.map.profile(r).expect("radial map");
            match self.kind {
                GraphKind::Direct { shift } => (1.0, 0.0, g - shift, dg),
                GraphKind::Inverse { shift } => (g, dg, 1.0 - shift * g, -shift * dg),
            }
        };
        let w_of = |r: f64| -> (Vec<f64>, Vec<f64>, f64, f64) {
            let (a, da, b, db) = coef(r);
            let w: Vec<f64> = (0..d).map(|i| a * q[i] + b * p[i]).collect();
            let dw: Vec<f64> = (0..d).map(|i| da * q[i] + db * p[i]).collect();
            (w, dw, a * b, da * b + a * db)
        };
        let dphi = |r: f64| {
            let (w, dw, ab, dab) = w_of(r);
            let n = norm(&w);
            let cross = if n > 0.0 { r * dot(&w, &dw) / n } else { 0.0 };
            n + cross - dab * r * r - 2.0 * ab * r
        };
        let at = |r: f64| {
            let (w, _, _, _) = w_of(r);
            let wn = norm(&w);
            let t: Vec<f64> = if wn > 0.0 { w.iter().map(|x| r * x / wn).collect() } else { vec![0.0; d] };
            let mut x = vec![0.0; d];
            let mut y = vec![0.0; d];
            let value = self.objective(p, q, &t, &mut x, &mut y);
            Maximizer { value, t, x, y }
        };
        // quadratic spacing resolves the small-r structure
        let n = 512;
        let node = |i: usize| radius * (i as f64 / n as f64).powi(2);
        let mut found = Vec::new();
        let mut prev = dphi(0.0);
        for i in 1..=n {
            let r1 = node(i);
            let cur = dphi(r1);
            if prev > 0.0 && cur <= 0.0 {
                let (mut lo, mut hi) = (node(i - 1), r1);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if dphi(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                found.push(at(0.5 * (lo + hi)));
            }
            prev = cur;
        }
        if prev > 0.0 {
            return Err(VarrepError::EnlargeDomain { radius });
        }
        if found.is_empty() {
            found.push(at(0.0));
        }
        found.sort_by(|a, b| b.value.total_cmp(&a.value));
        Ok(found)
    }

    /// Local maxima whose value is within `tol` of the best; a single entry
    /// unless the supremum is nearly attained on two branches.
    pub fn branches(&self, p: &[f64], q: &[f64], tol: f64) -> Result<Vec<Maximizer>> {
        let radius = self.radius(p, q);
        if self.map.profile(0.0).is_none() {
            return Ok(vec![self.maximize(p, q, None)?]);
        }
        let mut all = self.radial_maxima(p, q, radius)?;
        let best = all[0].value;
        all.retain(|m| m.value >= best - tol);
        Ok(all)
    }

    /// The local maximum with `|t|` closest to `r_hint` (the global one for
    /// maps without a radial profile).
    pub fn maximize_branch(&self, p: &[f64], q: &[f64], r_hint: f64) -> Result<Maximizer> {
        if self.map.profile(0.0).is_none() {
            return self.maximize(p, q, None);
        }
        let all = self.radial_maxima(p, q, self.radius(p, q))?;
        let gap = |m: &Maximizer| (norm(&m.t) - r_hint).abs();
        Ok(all.into_iter().min_by(|a, b| gap(a).total_cmp(&gap(b))).expect("at least one maximum"))
    }

    fn ascend(&self, p: &[f64], q: &[f64], mut t: Vec<f64>, ws: &mut Work) -> (Vec<f64>, f64) {
        let d = t.len();
        let mut val = self.objective(p, q, &t, &mut ws.x, &mut ws.y);
        let mut g = vec![0.0; d];
        let mut trial = vec![0.0; d];
        let scale = 1.0 + norm(p) + norm(q);
        for _ in 0..self.params.ascent_steps {
            self.objective_grad(p, q, &t, &mut g, ws);
            let gn = norm(&g);
            if gn <= 1e-13 * scale * (1.0 + norm(&t)) {
                break;
            }
            let dir = self.newton_direction(p, q, &t, &g, ws).unwrap_or_else(|| g.clone());
            let slope = dot(&g, &dir);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                for i in 0..d {
                    trial[i] = t[i] + alpha * dir[i];
                }
                let v = self.objective(p, q, &trial, &mut ws.x, &mut ws.y);
                if v >= val + 1e-4 * alpha * slope {
                    t.copy_from_slice(&trial);
                    val = v;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        (t, val)
    }

    /// The `keep` best of `angles` directions times `radii` log-spaced radii in `(0, radius]`.
    #[allow(clippy::too_many_arguments)]
    fn polar_stage(&self, p: &[f64], q: &[f64], radius: f64, angles: usize, radii: usize, keep: usize, ws: &mut Work) -> Vec<Vec<f64>> {
        let r_min = 1e-4 * radius;
        let mut found: Vec<(f64, [f64; 2])> = Vec::with_capacity(angles * radii);
        for k in 0..radii {
            let r = r_min * (radius / r_min).powf(k as f64 / (radii - 1) as f64);
            for j in 0..angles {
                let th = std::f64::consts::TAU * (j as f64 + 0.5 * (k % 2) as f64) / angles as f64;
                let t = [r * th.cos(), r * th.sin()];
                found.push((self.objective(p, q, &t, &mut ws.x, &mut ws.y), t));
            }
        }
        found.sort_by(|a, b| b.0.total_cmp(&a.0));
        found.into_iter().take(keep).map(|(_, t)| t.to_vec()).collect()
    }

    fn grid_stage(&self, p: &[f64], q: &[f64], radius: f64, stride: f64, ws: &mut Work) -> Vec<f64> {
        let d = p.len();
        let m = 2 * self.params.divisions + 1;
        let mut idx = vec![0usize; d];
        let mut t = vec![0.0; d];
        let mut best = f64::NEG_INFINITY;
        let mut best_t = vec![0.0; d];
        loop {
            for i in 0..d {
                t[i] = -radius + idx[i] as f64 * stride;
            }
            let v = self.objective(p, q, &t, &mut ws.x, &mut ws.y);
            // strict comparison keeps the lexicographically first maximizer
            if v > best {
                best = v;
                best_t.copy_from_slice(&t);
            }
            let mut k = d;
            loop {
                if k == 0 {
                    return best_t;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < m {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    /// Newton direction when the finite-difference Hessian is negative definite.
    fn newton_direction(&self, p: &[f64], q: &[f64], t: &[f64], g: &[f64], ws: &mut Work) -> Option<Vec<f64>> {
        let d = t.len();
        let mut h = DMatrix::zeros(d, d);
        let mut tp = t.to_vec();
        let mut gp = vec![0.0; d];
        let mut gm = vec![0.0; d];
        for j in 0..d {
            let e = 1e-6 * (1.0 + t[j].abs());
            tp[j] = t[j] + e;
            self.objective_grad(p, q, &tp, &mut gp, ws);
            tp[j] = t[j] - e;
            self.objective_grad(p, q, &tp, &mut gm, ws);
            tp[j] = t[j];
            for i in 0..d {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * e);
            }
        }
        let neg = -(&h + h.transpose()) * 0.5;
        let chol = neg.cholesky()?;
        let s = chol.solve(&DVector::from_column_slice(g));
        Some(s.as_slice().to_vec())
    }
}

struct Work {
    x: Vec<f64>,
    y: Vec<f64>,
    jac: Vec<f64>,
}

impl Work {
    fn new(d: usize) -> Self {
        Work { x: vec![0.0; d], y: vec![0.0; d], jac: vec![0.0; d * d] }
    }
}

impl Integrand for Fitzpatrick {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn convexity(&self) -> Option<f64> {
        None
    }

    fn k0(&self) -> f64 {
        self.map.k0
    }

    fn value(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        Ok(self.maximize(p, q, None)?.value)
    }

    /// Envelope theorem: `dF/dp = Y*`, `dF/dq = X*`.
    fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
        let m = self.maximize(p, q, None)?;
        gp.copy_from_slice(&m.y);
        gq.copy_from_slice(&m.x);
        Ok(m.value)
    }

    fn value_grad_warm(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64], warm: &mut Vec<f64>) -> Result<f64> {
        let m = self.maximize(p, q, if warm.is_empty() { None } else { Some(warm) })?;
        gp.copy_from_slice(&m.y);
        gq.copy_from_slice(&m.x);
        *warm = m.t;
        Ok(m.value)
    }
}

/// The symmetrized integrand
/// `Fext(p, q) = (F0(p, q - tp) + t|p|^2 + F1(q, p - tq) + t|q|^2) / 2`
/// with `t = 1/lambda`, `F0` the Fitzpatrick function of `a - t id` and `F1`
/// that of `a^{-1} - t id`. It is uniformly convex when `lambda` is not tight.
#[derive(Clone, Debug)]
pub struct ExtendedRepresentative {
    f0: Fitzpatrick,
    f1: Fitzpatrick,
    tau: f64,
}

impl ExtendedRepresentative {
    pub fn new(map: MonotoneMap, params: FitzpatrickParams) -> Self {
        let tau = 1.0 / map.lambda;
        let f0 = Fitzpatrick::new(map.clone(), GraphKind::Direct { shift: tau }, params);
        let f1 = Fitzpatrick::new(map, GraphKind::Inverse { shift: tau }, params);
        ExtendedRepresentative { f0, f1, tau }
    }

    pub fn map(&self) -> &MonotoneMap {
        self.f0.map()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn shifted(&self, p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let tau = self.tau;
        let q0 = (0..p.len()).map(|i| q[i] - tau * p[i]).collect();
        let p1 = (0..p.len()).map(|i| p[i] - tau * q[i]).collect();
        (q0, p1)
    }

    fn combine(&self, p: &[f64], q: &[f64], m0: &Maximizer, m1: &Maximizer, gp: &mut [f64], gq: &mut [f64]) -> f64 {
        let tau = self.tau;
        for i in 0..p.len() {
            gp[i] = 0.5 * (m0.y[i] - tau * m0.x[i] + 2.0 * tau * p[i] + m1.x[i]);
            gq[i] = 0.5 * (m0.x[i] + m1.y[i] - tau * m1.x[i] + 2.0 * tau * q[i]);
        }
        0.5 * (m0.value + tau * dot(p, p) + m1.value + tau * dot(q, q))
    }

    fn eval(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64], warm: &mut Vec<f64>) -> Result<f64> {
        let d = p.len();
        let (w0, w1) = if warm.len() == 2 * d { (Some(&warm[..d]), Some(&warm[d..])) } else { (None, None) };
        let (q0, p1) = self.shifted(p, q);
        let m0 = self.f0.maximize(p, &q0, w0)?;
        let m1 = self.f1.maximize(q, &p1, w1)?;
        let value = self.combine(p, q, &m0, &m1, gp, gq);
        warm.clear();
        warm.extend_from_slice(&m0.t);
        warm.extend_from_slice(&m1.t);
        Ok(value)
    }
}

impl Integrand for ExtendedRepresentative {
    fn dim(&self) -> usize {
        self.f0.dim()
    }

    fn convexity(&self) -> Option<f64> {
        None
    }

    fn k0(&self) -> f64 {
        self.f0.map().k0
    }

    fn value(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        let d = p.len();
        self.eval(p, q, &mut vec![0.0; d], &mut vec![0.0; d], &mut Vec::new())
    }

    fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
        self.eval(p, q, gp, gq, &mut Vec::new())
    }

    fn value_grad_warm(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64], warm: &mut Vec<f64>) -> Result<f64> {
        self.eval(p, q, gp, gq, warm)
    }

    /// Pairs of Fitzpatrick branches, selected by the radii `[|t0|, |t1|]`.
    fn branches(&self, p: &[f64], q: &[f64], tol: f64) -> Result<Vec<Vec<f64>>> {
        let (q0, p1) = self.shifted(p, q);
        let b0 = self.f0.branches(p, &q0, 2.0 * tol)?;
        let b1 = self.f1.branches(q, &p1, 2.0 * tol)?;
        let best = 0.5 * (b0[0].value + b1[0].value);
        let mut out: Vec<(f64, Vec<f64>)> = Vec::new();
        for m0 in &b0 {
            for m1 in &b1 {
                let v = 0.5 * (m0.value + m1.value);
                if v >= best - tol {
                    out.push((v, vec![norm(&m0.t), norm(&m1.t)]));
                }
            }
        }
        out.sort_by(|a, b| b.0.total_cmp(&a.0));
        Ok(out.into_iter().map(|(_, h)| h).collect())
    }

    fn value_grad_branch(&self, p: &[f64], q: &[f64], branch: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
        if branch.len() != 2 {
            return self.value_grad(p, q, gp, gq);
        }
        let (q0, p1) = self.shifted(p, q);
        let m0 = self.f0.maximize_branch(p, &q0, branch[0])?;
        let m1 = self.f1.maximize_branch(q, &p1, branch[1])?;
        Ok(self.combine(p, q, &m0, &m1, gp, gq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fitz_identity() -> Fitzpatrick {
        fitzpatrick(MonotoneMap::identity(2), FitzpatrickParams::for_lambda(1.0))
    }

    #[test]
    fn identity_examples() {
        let f = fitz_identity();
        assert!((f.value(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((f.value(&[1.0, 0.0], &[3.0, 0.0]).unwrap() - 4.0).abs() < 1e-12);
        assert!(f.value(&[0.0, 0.0], &[0.0, 0.0]).unwrap().abs() < 1e-12);
    }

    /// Closed form for linear `a(p) = B p`: `(q + B^T p).S^{-1}(q + B^T p) / 4`, `S = sym(B)`.
    fn linear_oracle(b: [[f64; 2]; 2], p: [f64; 2], q: [f64; 2]) -> f64 {
        let r = [q[0] + b[0][0] * p[0] + b[1][0] * p[1], q[1] + b[0][1] * p[0] + b[1][1] * p[1]];
        let s = [[b[0][0], 0.5 * (b[0][1] + b[1][0])], [0.5 * (b[0][1] + b[1][0]), b[1][1]]];
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let si = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
        0.25 * (r[0] * (si[0][0] * r[0] + si[0][1] * r[1]) + r[1] * (si[1][0] * r[0] + si[1][1] * r[1]))
    }

    #[test]
    fn linear_maps_match_closed_form() {
        let b = [[2.0, 1.0], [-0.5, 1.5]];
        let map = MonotoneMap::linear(2, vec![2.0, 1.0, -0.5, 1.5], 3.0).unwrap();
        let f = fitzpatrick(map, FitzpatrickParams::for_lambda(3.0));
        for (p, q) in [([0.3, -0.7], [1.2, 0.4]), ([1.0, 1.0], [-1.0, 2.0]), ([0.0, 0.5], [0.0, 0.0])] {
            let v = f.value(&p, &q).unwrap();
            assert!((v - linear_oracle(b, p, q)).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn small_box_is_reported() {
        let map = MonotoneMap::linear(2, vec![0.2, 0.0, 0.0, 0.2], 5.0).unwrap();
        let f = fitzpatrick(map, FitzpatrickParams { radius_scale: 0.5, divisions: 32, ascent_steps: 50 });
        assert!(matches!(f.value(&[0.0, 0.0], &[3.0, 0.0]), Err(VarrepError::EnlargeDomain { .. })));
    }

    #[test]
    fn extended_gradient_matches_differences() {
        let map = MonotoneMap::radial(2, 1.5, 0.5, 3.0).unwrap();
        let fe = ExtendedRepresentative::new(map, FitzpatrickParams::for_lambda(3.0));
        let (p, q) = ([0.4, -0.3], [0.9, 0.2]);
        let (mut gp, mut gq) = ([0.0; 2], [0.0; 2]);
        fe.value_grad(&p, &q, &mut gp, &mut gq).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let (mut a, mut b) = (p, p);
            a[i] += h;
            b[i] -= h;
            let fd = (fe.value(&a, &q).unwrap() - fe.value(&b, &q).unwrap()) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-7, "p{i}: {fd} vs {}", gp[i]);
            let (mut a, mut b) = (q, q);
            a[i] += h;
            b[i] -= h;
            let fd = (fe.value(&p, &a).unwrap() - fe.value(&p, &b).unwrap()) / (2.0 * h);
            assert!((fd - gq[i]).abs() < 1e-7, "q{i}: {fd} vs {}", gq[i]);
        }
    }

    #[test]
    fn extended_represents_the_map() {
        let map = MonotoneMap::radial(2, 1.5, 0.5, 3.0).unwrap();
        let fe = ExtendedRepresentative::new(map.clone(), FitzpatrickParams::for_lambda(3.0));
        let p = [0.6, -1.1];
        let q = map.apply(&p);
        assert!((fe.value(&p, &q).unwrap() - dot(&p, &q)).abs() < 1e-9);
        assert!(fe.value(&p, &[q[0] + 0.3, q[1]]).unwrap() > dot(&p, &[q[0] + 0.3, q[1]]) + 1e-3);
    }
}
