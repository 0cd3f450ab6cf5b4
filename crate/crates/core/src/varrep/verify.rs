use super::{dot, legendre_transform, norm, Integrand, MonotoneMap, Result, Tabulated, VarrepError};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimizer of `q -> F(p, q) - p.q` by damped Newton on its gradient.
pub fn recover_monotone_map<F: Integrand + ?Sized>(f: &F, p: &[f64]) -> Result<Vec<f64>> {
    recover_from(f, p, p)
}

pub(crate) fn recover_from<F: Integrand + ?Sized>(f: &F, p: &[f64], start: &[f64]) -> Result<Vec<f64>> {
    let d = f.dim();
    if p.len() != d {
        return Err(VarrepError::InvalidInput("argument length does not match dimension".into()));
    }
    let mut gp = vec![0.0; d];
    let mut gq = vec![0.0; d];
    let mut hess = vec![0.0; 4 * d * d];
    let grad = |q: &[f64], gp: &mut [f64], gq: &mut [f64]| -> Result<Vec<f64>> {
        f.value_grad(p, q, gp, gq)?;
        Ok((0..d).map(|i| gq[i] - p[i]).collect())
    };
    let mut q = start.to_vec();
    let mut g = grad(&q, &mut gp, &mut gq)?;
    let mut gn = norm(&g);
    for _ in 0..100 {
        if gn <= 1e-10 {
            return Ok(q);
        }
        f.hessian(p, &q, &mut hess)?;
        let hqq = DMatrix::from_fn(d, d, |i, j| hess[(d + i) * 2 * d + d + j]);
        let step = hqq.lu().solve(&DVector::from_column_slice(&g)).ok_or(VarrepError::SolverFailure { residual: gn })?;
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = (0..d).map(|i| q[i] - t * step[i]).collect();
            match grad(&trial, &mut gp, &mut gq) {
                Ok(tg) if norm(&tg) < gn => {
                    q = trial;
                    gn = norm(&tg);
                    g = tg;
                    break;
                }
                Err(e @ VarrepError::OutOfDomain(_)) if t < 1e-6 => return Err(e),
                _ => {}
            }
            t *= 0.5;
            if t < 1e-12 {
                return Err(VarrepError::SolverFailure { residual: gn });
            }
        }
    }
    if gn <= 1e-10 {
        Ok(q)
    } else {
        Err(VarrepError::SolverFailure { residual: gn })
    }
}

/// Pointwise convex conjugate `F*(w) = sup_z z.w - F(z)` of a differentiable
/// uniformly convex integrand, by Newton on `grad F(z) = w`.
pub struct Conjugate<'a, F: ?Sized>(pub &'a F);

impl<F: Integrand + ?Sized> Conjugate<'_, F> {
    fn argmax(&self, w: &[f64]) -> Result<Vec<f64>> {
        let d = self.0.dim();
        let n = 2 * d;
        let lam = self.0.convexity().unwrap_or(1.0);
        let mut z: Vec<f64> = w.iter().map(|x| x / lam).collect();
        let mut gp = vec![0.0; d];
        let mut gq = vec![0.0; d];
        let mut hess = vec![0.0; n * n];
        let resid = |z: &[f64], gp: &mut [f64], gq: &mut [f64]| -> Result<Vec<f64>> {
            self.0.value_grad(&z[..d], &z[d..], gp, gq)?;
            Ok((0..n).map(|i| if i < d { gp[i] } else { gq[i - d] } - w[i]).collect())
        };
        let mut r = resid(&z, &mut gp, &mut gq)?;
        let tol = 1e-10 * (1.0 + norm(w));
        for _ in 0..100 {
            let rn = norm(&r);
            if rn <= tol {
                return Ok(z);
            }
            self.0.hessian(&z[..d], &z[d..], &mut hess)?;
            let step = DMatrix::from_row_slice(n, n, &hess)
                .lu()
                .solve(&DVector::from_column_slice(&r))
                .ok_or(VarrepError::SolverFailure { residual: rn })?;
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = (0..n).map(|i| z[i] - t * step[i]).collect();
                if let Ok(tr) = resid(&trial, &mut gp, &mut gq) {
                    if norm(&tr) < rn {
                        z = trial;
                        r = tr;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-12 {
                    // stagnation at the noise level of the gradient
                    if rn <= 1e-8 * (1.0 + norm(w)) {
                        return Ok(z);
                    }
                    return Err(VarrepError::SolverFailure { residual: rn });
                }
            }
        }
        Err(VarrepError::SolverFailure { residual: norm(&r) })
    }
}

impl<F: Integrand + ?Sized> Integrand for Conjugate<'_, F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn convexity(&self) -> Option<f64> {
        self.0.convexity()
    }

    fn value(&self, p: &[f64], q: &[f64]) -> Result<f64> {
        let w: Vec<f64> = p.iter().chain(q).copied().collect();
        let z = self.argmax(&w)?;
        let d = self.dim();
        Ok(dot(&z, &w) - self.0.value(&z[..d], &z[d..])?)
    }

    /// `grad F*(w)` is the maximizer.
    fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
        let w: Vec<f64> = p.iter().chain(q).copied().collect();
        let z = self.argmax(&w)?;
        let d = self.dim();
        gp.copy_from_slice(&z[..d]);
        gq.copy_from_slice(&z[d..]);
        Ok(dot(&z, &w) - self.0.value(&z[..d], &z[d..])?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyParams {
    pub samples: usize,
    pub seed: u64,
    /// Sampled `p` and off-graph `q` lie in the ball of this radius.
    pub radius: f64,
    /// Equality tolerance on `F - p.q`.
    pub eq_tol: f64,
    /// Graph tolerance on `|q - a(p)|`.
    pub graph_tol: f64,
    /// Number of sampled points for the conjugate check (0 disables).
    pub dual_samples: usize,
    /// Points per axis for the grid minimization of `F` (0 disables).
    pub k0_grid: usize,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams { samples: 1000, seed: 1, radius: 2.0, eq_tol: 1e-6, graph_tol: 1e-4, dual_samples: 10, k0_grid: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// `F(p, q) < p.q - tol`.
    BelowPairing,
    /// On the graph but `F - p.q >= tol`.
    GraphNotAttained,
    /// Off the graph, outside the quadratic-growth shell, but `F - p.q < tol`.
    SpuriousEquality,
    /// Recovery from the conjugate does not invert `a`.
    DualMismatch,
    /// Grid minimum of `F` outside the window implied by `|a(0)|`.
    K0Window,
    /// Evaluation failed.
    EvalError,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub amount: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RepresentationReport {
    pub checked: usize,
    pub min_gap: f64,
    pub max_graph_gap: f64,
    /// Off-graph points closer than this to the graph may legitimately have
    /// `F - p.q < tol`: quadratic growth only gives `|q - a(p)|^2 / (2 Lambda)`.
    pub shell: f64,
    pub dual_checked: usize,
    pub dual_max_error: f64,
    pub k0_min: Option<f64>,
    pub k0_window: Option<(f64, f64)>,
    pub violations: Vec<Violation>,
}

impl RepresentationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn random_in_ball(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-r..r)).collect();
        if norm(&v) <= r {
            return v;
        }
    }
}

/// `(C, c)` with `-C |a(0)|^2 <= inf F <= -c |a(0)|^2` for a representative
/// with window `Lambda`.
pub fn k0_bounds(big_lambda: f64) -> (f64, f64) {
    let s = big_lambda.sqrt();
    (0.5 * (big_lambda + (1.0 + s) * (1.0 + s)), 0.5 / (big_lambda * big_lambda))
}

/// Randomized check that `F` represents `a`: half of the samples sit on the
/// graph, half are uniform in a ball.
pub fn verify_representation<F: Integrand + ?Sized>(f: &F, a: &MonotoneMap, params: VerifyParams) -> RepresentationReport {
    let d = f.dim();
    let mut rep = RepresentationReport { min_gap: f64::INFINITY, ..Default::default() };
    if a.dim() != d {
        rep.violations.push(Violation { kind: ViolationKind::EvalError, p: vec![], q: vec![], amount: f64::NAN });
        return rep;
    }
    let big_lambda = f.convexity().unwrap_or(2.0 * a.lambda + 1.0);
    rep.shell = params.graph_tol.max((2.0 * big_lambda * params.eq_tol).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for s in 0..params.samples {
        let p = random_in_ball(&mut rng, d, params.radius);
        let ap = a.apply(&p);
        let on_graph = s % 2 == 0;
        let q = if on_graph { ap.clone() } else { random_in_ball(&mut rng, d, params.radius * a.lambda) };
        let gap = match f.value(&p, &q) {
            Ok(v) => v - dot(&p, &q),
            Err(_) => {
                rep.violations.push(Violation { kind: ViolationKind::EvalError, p, q, amount: f64::NAN });
                continue;
            }
        };
        rep.checked += 1;
        rep.min_gap = rep.min_gap.min(gap);
        let dist = norm(&(0..d).map(|i| q[i] - ap[i]).collect::<Vec<_>>());
        let kind = if gap < -params.eq_tol {
            Some(ViolationKind::BelowPairing)
        } else if dist < params.graph_tol {
            rep.max_graph_gap = rep.max_graph_gap.max(gap);
            (gap >= params.eq_tol).then_some(ViolationKind::GraphNotAttained)
        } else if gap < params.eq_tol && dist >= rep.shell {
            Some(ViolationKind::SpuriousEquality)
        } else {
            None
        };
        if let Some(kind) = kind {
            rep.violations.push(Violation { kind, p, q, amount: gap });
        }
    }
    // dual check: F* represents a^{-1}
    let conj = Conjugate(f);
    for _ in 0..params.dual_samples {
        let p = random_in_ball(&mut rng, d, 0.5 * params.radius);
        let q = a.apply(&p);
        rep.dual_checked += 1;
        match recover_from(&conj, &q, &p) {
            Ok(x) => {
                let err = norm(&(0..d).map(|i| x[i] - p[i]).collect::<Vec<_>>());
                rep.dual_max_error = rep.dual_max_error.max(err);
                if err > params.graph_tol {
                    rep.violations.push(Violation { kind: ViolationKind::DualMismatch, p, q, amount: err });
                }
            }
            Err(_) => rep.violations.push(Violation { kind: ViolationKind::EvalError, p, q, amount: f64::NAN }),
        }
    }
    if params.k0_grid >= 2 {
        let a0 = norm(&a.apply(&vec![0.0; d]));
        let (cu, cl) = k0_bounds(big_lambda);
        let window = (-cu * a0 * a0 - params.eq_tol, -cl * a0 * a0 + params.eq_tol);
        match grid_minimum(f, params.k0_grid, params.radius) {
            Ok(m) => {
                rep.k0_min = Some(m);
                if m < window.0 || m > window.1 {
                    rep.violations.push(Violation { kind: ViolationKind::K0Window, p: vec![], q: vec![], amount: m });
                }
            }
            Err(_) => rep.violations.push(Violation { kind: ViolationKind::EvalError, p: vec![], q: vec![], amount: f64::NAN }),
        }
        rep.k0_window = Some(window);
    }
    rep
}

/// Minimum of `F` over a uniform grid on `[-r, r]^{2d}`, refined by Newton on
/// `grad F = 0` from the best node.
fn grid_minimum<F: Integrand + ?Sized>(f: &F, points: usize, r: f64) -> Result<f64> {
    let d = f.dim();
    let n = 2 * d;
    let total = points.pow(n as u32);
    let mut best = f64::INFINITY;
    let mut best_z = vec![0.0; n];
    let mut z = vec![0.0; n];
    for idx in 0..total {
        let mut rem = idx;
        for a in (0..n).rev() {
            z[a] = -r + 2.0 * r * (rem % points) as f64 / (points - 1) as f64;
            rem /= points;
        }
        let v = f.value(&z[..d], &z[d..])?;
        if v < best {
            best = v;
            best_z.copy_from_slice(&z);
        }
    }
    let conj = Conjugate(f);
    // the minimizer of F is grad F*(0)
    if let Ok(zm) = conj.argmax(&vec![0.0; n]) {
        if let Ok(v) = f.value(&zm[..d], &zm[d..]) {
            best = best.min(v);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, Default)]
pub struct ConvexityReport {
    pub pairs: usize,
    /// Smallest value of `(midpoint defect) - |dz|^2/(8 Lambda)`.
    pub lower_margin: f64,
    /// Smallest value of `Lambda |dz|^2/8 - (midpoint defect)`.
    pub upper_margin: f64,
    pub violations: usize,
    pub errors: usize,
}

/// Midpoint test of the window `|z|^2/(2 Lambda) <= F <= Lambda |z|^2/2`
/// (in the sense of convexity and concavity of the shifted functions) on
/// random pairs in the ball of radius `r`.
pub fn convexity_window<F: Integrand + ?Sized>(f: &F, big_lambda: f64, pairs: usize, r: f64, seed: u64, tol: f64) -> ConvexityReport {
    let n = 2 * f.dim();
    let d = f.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = ConvexityReport { lower_margin: f64::INFINITY, upper_margin: f64::INFINITY, ..Default::default() };
    for _ in 0..pairs {
        let z1 = random_in_ball(&mut rng, n, r);
        let z2 = random_in_ball(&mut rng, n, r);
        let zm: Vec<f64> = (0..n).map(|i| 0.5 * (z1[i] + z2[i])).collect();
        let vals = [&z1, &z2, &zm].map(|z| f.value(&z[..d], &z[d..]));
        let (Ok(f1), Ok(f2), Ok(fm)) = (vals[0].clone(), vals[1].clone(), vals[2].clone()) else {
            rep.errors += 1;
            continue;
        };
        rep.pairs += 1;
        let dz2: f64 = (0..n).map(|i| (z1[i] - z2[i]).powi(2)).sum();
        let defect = 0.5 * f1 + 0.5 * f2 - fm;
        let lo = defect - dz2 / (8.0 * big_lambda);
        let hi = big_lambda * dz2 / 8.0 - defect;
        rep.lower_margin = rep.lower_margin.min(lo);
        rep.upper_margin = rep.upper_margin.min(hi);
        if lo < -tol || hi < -tol {
            rep.violations += 1;
        }
    }
    rep
}

#[derive(Clone, Debug, Default)]
pub struct MonotoneReport {
    pub pairs: usize,
    pub max_lipschitz_ratio: f64,
    pub min_monotone_ratio: f64,
    pub violations: usize,
}

/// Sampled check of `|a(p1) - a(p2)| <= L |p1 - p2|` and
/// `(a(p1) - a(p2)).(p1 - p2) >= |p1 - p2|^2 / L`.
pub fn check_monotone(eval: &dyn Fn(&[f64]) -> Result<Vec<f64>>, d: usize, constant: f64, pairs: usize, r: f64, seed: u64) -> MonotoneReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = MonotoneReport { min_monotone_ratio: f64::INFINITY, ..Default::default() };
    for _ in 0..pairs {
        let p1 = random_in_ball(&mut rng, d, r);
        let p2 = random_in_ball(&mut rng, d, r);
        let (Ok(a1), Ok(a2)) = (eval(&p1), eval(&p2)) else {
            rep.violations += 1;
            continue;
        };
        let dp: Vec<f64> = (0..d).map(|i| p1[i] - p2[i]).collect();
        let da: Vec<f64> = (0..d).map(|i| a1[i] - a2[i]).collect();
        let n2 = dot(&dp, &dp);
        if n2 < 1e-12 {
            continue;
        }
        rep.pairs += 1;
        let lip = norm(&da) / n2.sqrt();
        let mono = dot(&da, &dp) / n2;
        rep.max_lipschitz_ratio = rep.max_lipschitz_ratio.max(lip);
        rep.min_monotone_ratio = rep.min_monotone_ratio.min(mono);
        if lip > constant * (1.0 + 1e-9) || mono < (1.0 - 1e-9) / constant {
            rep.violations += 1;
        }
    }
    rep
}

/// Largest `|F*(q, p) - F(p, q)|` over the trusted entries of the grid
/// conjugate of a tabulated integrand (computed on its own grid), and the
/// number of trusted entries.
pub fn selfduality_residual(t: &Tabulated) -> Result<(f64, usize)> {
    let tab = &t.table;
    let k = tab.rank();
    let d = k / 2;
    if (0..d).any(|a| tab.shape[a] != tab.shape[a + d] || tab.lo[a] != tab.lo[a + d] || tab.hi[a] != tab.hi[a + d]) {
        return Err(VarrepError::InvalidInput("p and q axes must share one grid".into()));
    }
    let conj = legendre_transform(tab, tab)?;
    let strides = tab.strides();
    let mut idx = vec![0; k];
    let (mut worst, mut count) = (0.0f64, 0);
    for n in 0..tab.len() {
        if !conj.trusted[n] {
            continue;
        }
        tab.unravel(n, &mut idx);
        let swapped: usize = (0..k).map(|a| idx[(a + d) % k] * strides[a]).sum();
        worst = worst.max((conj.table.values[n] - tab.values[swapped]).abs());
        count += 1;
    }
    Ok((worst, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::varrep::{fitzpatrick, make_linear_representative, FitzpatrickParams};

    const I2: [f64; 4] = [1.0, 0.0, 0.0, 1.0];

    #[test]
    fn tabulated_linear_representative_is_self_dual_to_grid_accuracy() {
        let f = make_linear_representative(2, &[2.0, 0.0, 0.0, 2.0], &[0.0; 4]).unwrap();
        let t = crate::varrep::tabulate(&f, crate::varrep::TableSpec { bound: 2.0, points: 9 }).unwrap();
        let (res, trusted) = selfduality_residual(&t).unwrap();
        assert!(trusted > 0);
        assert!(res <= t.tabulation_error(), "{res} vs {}", t.tabulation_error());
    }

    #[test]
    fn recover_examples() {
        let f = make_linear_representative(2, &I2, &[0.0; 4]).unwrap();
        let q = recover_monotone_map(&f, &[1.0, 0.0]).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-12 && q[1].abs() < 1e-12);
        let f = make_linear_representative(2, &[2.0, 0.0, 0.0, 2.0], &[0.0; 4]).unwrap();
        let q = recover_monotone_map(&f, &[1.0, 0.0]).unwrap();
        assert!((q[0] - 2.0).abs() < 1e-12 && q[1].abs() < 1e-12);
        let f = make_linear_representative(2, &I2, &[0.0, 1.0, -1.0, 0.0]).unwrap();
        let q = recover_monotone_map(&f, &[0.0, 1.0]).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_representation_is_clean() {
        let f = make_linear_representative(2, &[2.0, 0.5, 0.5, 1.0], &[0.0, 0.7, -0.7, 0.0]).unwrap();
        let rep = verify_representation(&f, &f.map(), VerifyParams { samples: 400, k0_grid: 3, ..Default::default() });
        assert!(rep.passed(), "{:?}", rep.violations);
        assert!(rep.dual_max_error < 1e-9);
    }

    #[test]
    fn graph_mismatch_is_reported() {
        let f = make_linear_representative(2, &I2, &[0.0; 4]).unwrap();
        let a = MonotoneMap::linear(2, vec![2.0, 0.0, 0.0, 2.0], 2.0).unwrap();
        let rep = verify_representation(&f, &a, VerifyParams { samples: 50, ..Default::default() });
        assert!(rep.violations.iter().any(|v| v.kind == ViolationKind::GraphNotAttained));
    }

    #[test]
    fn k0_window_for_shifted_map() {
        // a(p) = p + b has |a(0)| = |b|; F(p, q) = |p|^2/2 + |q - b|^2/2 + ... via the shift
        struct Shifted(Vec<f64>);
        impl Integrand for Shifted {
            fn dim(&self) -> usize {
                2
            }
            fn convexity(&self) -> Option<f64> {
                Some(1.0)
            }
            fn value(&self, p: &[f64], q: &[f64]) -> Result<f64> {
                let r: Vec<f64> = (0..2).map(|i| q[i] - self.0[i]).collect();
                Ok(0.5 * dot(p, p) + 0.5 * dot(&r, &r) + dot(p, &self.0))
            }
            fn value_grad(&self, p: &[f64], q: &[f64], gp: &mut [f64], gq: &mut [f64]) -> Result<f64> {
                for i in 0..2 {
                    gp[i] = p[i] + self.0[i];
                    gq[i] = q[i] - self.0[i];
                }
                self.value(p, q)
            }
        }
        let b = vec![0.6, -0.3];
        let f = Shifted(b.clone());
        let bb = b.clone();
        let a = MonotoneMap::new(2, 1.0, norm(&b), move |p, o| {
            o[0] = p[0] + bb[0];
            o[1] = p[1] + bb[1];
        })
        .unwrap();
        let rep = verify_representation(&f, &a, VerifyParams { samples: 200, k0_grid: 5, dual_samples: 3, ..Default::default() });
        assert!(rep.passed(), "{:?}", rep.violations);
        // exact infimum is -|b|^2/2
        assert!((rep.k0_min.unwrap() + 0.5 * dot(&b, &b)).abs() < 1e-6);
    }

    #[test]
    fn fitzpatrick_is_below_linear_representative() {
        let b = vec![2.0, 0.5, -0.5, 1.0];
        let a = MonotoneMap::linear(2, b, 3.0).unwrap();
        let fz = fitzpatrick(a, FitzpatrickParams::for_lambda(3.0));
        let lin = make_linear_representative(2, &[2.0, 0.0, 0.0, 1.0], &[0.0, 0.5, -0.5, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = random_in_ball(&mut rng, 2, 2.0);
            let q = random_in_ball(&mut rng, 2, 4.0);
            assert!(fz.value(&p, &q).unwrap() <= lin.value(&p, &q).unwrap() + 1e-10);
        }
    }

    #[test]
    fn monotone_check_detects_wrong_constant() {
        let a = MonotoneMap::linear(2, vec![3.0, 0.0, 0.0, 1.0], 3.0).unwrap();
        let ev = |p: &[f64]| Ok(a.apply(p));
        assert_eq!(check_monotone(&ev, 2, 3.0, 200, 1.0, 1).violations, 0);
        assert!(check_monotone(&ev, 2, 2.0, 200, 1.0, 1).violations > 0);
    }
}
