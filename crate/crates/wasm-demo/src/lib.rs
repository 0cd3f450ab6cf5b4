//! Browser bindings for three small `varhom` computations. Results come back
//! as flat `Float64Array`s; `www/index.html` documents the layouts.

use varhom::fields::{EnsembleSpec, Phase};
use varhom::grid::{helmholtz_project, spectral_divergence, PeriodicField};
use varhom::homogenize::{scale_sweep, Ensemble, ParamPoint, SweepParams};
use varhom::varrep::{
    selfdual_proximal_average, ExtendedRepresentative, FitzpatrickParams, Integrand, MonotoneMap, ProximalParams,
    TableSpec,
};
use wasm_bindgen::prelude::*;

fn js<E: std::fmt::Display>(e: E) -> JsError {
    JsError::new(&e.to_string())
}

/// `a(p) = (c + b / (1 + |p|)) p`.
#[wasm_bindgen]
pub fn apply_law(c: f64, b: f64, p1: f64, p2: f64) -> Vec<f64> {
    let s = c + b / (1.0 + p1.hypot(p2));
    vec![s * p1, s * p2]
}

/// `F(p, q) - p.q` of the self-dual representative of the radial law along
/// `q = (t, q2)`, `t` uniform in `[t_min, t_max]`.
///
/// Layout: `n` values of `t`, then `n` gaps (`NaN` where evaluation failed).
#[wasm_bindgen]
pub fn representative_slice(c: f64, b: f64, lambda: f64, p1: f64, p2: f64, q2: f64, t_min: f64, t_max: f64, n: usize) -> Result<Vec<f64>, JsError> {
    if !(2..=400).contains(&n) || !(t_max > t_min) {
        return Err(JsError::new("need 2..=400 points and t_max > t_min"));
    }
    let map = MonotoneMap::radial(2, c, b, lambda).map_err(js)?;
    let inner = ExtendedRepresentative::new(map, FitzpatrickParams::for_lambda(lambda));
    let f = selfdual_proximal_average(inner, lambda, ProximalParams::default());
    let mut out = vec![0.0; 2 * n];
    for k in 0..n {
        let t = t_min + (t_max - t_min) * k as f64 / (n - 1) as f64;
        out[k] = t;
        out[n + k] = match f.value(&[p1, p2], &[t, q2]) {
            Ok(v) => v - p1 * t - p2 * q2,
            Err(_) => f64::NAN,
        };
    }
    Ok(out)
}

/// Means of `mu0` at `(p, q) = ((1, 0), 0)` and of `mu` at its dual point
/// `(q*, p*) = ((sqrt(c1 c2), 0), 0)` on the two-phase checkerboard, levels
/// `1..=max_level`.
///
/// Layout: six numbers per level, `n, mean mu, se mu, mean mu0, se mu0, gap`.
#[wasm_bindgen]
pub fn checkerboard_curve(c1: f64, c2: f64, max_level: u32, samples: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    if !(1..=3).contains(&max_level) || !(4..=32).contains(&samples) {
        return Err(JsError::new("levels 1..=3 and 4..=32 samples keep the page responsive"));
    }
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(JsError::new("conductivities must be positive"));
    }
    let lambda = [c1, c2, 1.0 / c1, 1.0 / c2, 1.0].into_iter().fold(0.0, f64::max);
    let spec = EnsembleSpec::checkerboard(vec![Phase::linear(c1), Phase::linear(c2)], lambda, seed).map_err(js)?;
    let ens = Ensemble::new("demo", spec, TableSpec { bound: 2.0, points: 5 }).map_err(js)?;
    let point = ParamPoint { p: [1.0, 0.0], q: [0.0, 0.0], qstar: [(c1 * c2).sqrt(), 0.0], pstar: [0.0, 0.0] };
    let levels: Vec<u32> = (1..=max_level).collect();
    let (curve, _) = scale_sweep(&ens, &levels, point, samples, SweepParams::default()).map_err(js)?;
    Ok(curve.levels.iter().flat_map(|l| [l.n as f64, l.mu.mean, l.mu.se, l.mu0.mean, l.mu0.se, l.gap]).collect())
}

/// Split of a random smooth periodic field `mean + grad phi + rot psi` on an
/// `nx x ny` grid of spacing `1 / nx`.
///
/// Layout: `|<gradient, solenoidal>| / |f|^2`, reconstruction error,
/// max divergence of the solenoidal part, then the field, its gradient part
/// and its solenoidal part, each as `2 nx ny` numbers (x components, then y
/// components, row-major with `x` slowest).
#[wasm_bindgen]
pub fn helmholtz_split(nx: usize, ny: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    if !(4..=128).contains(&nx) || !(4..=128).contains(&ny) {
        return Err(JsError::new("grid sides must be in 4..=128"));
    }
    let h = 1.0 / nx as f64;
    let mut f = PeriodicField::zeros(vec![nx, ny], h);
    // a few low Fourier modes with coefficients from a small LCG
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let (lx, ly) = (nx as f64 * h, ny as f64 * h);
    let modes: Vec<(f64, f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let kx = (next() * 2.5).round();
            let ky = (next() * 2.5).round();
            (kx, ky, next(), next(), next() * std::f64::consts::PI)
        })
        .collect();
    let mean = [0.3 * next(), 0.3 * next()];
    for k in 0..f.len() {
        let ix = f.index(k);
        let (x, y) = (ix[0] as f64 * h, ix[1] as f64 * h);
        let (mut gx, mut gy) = (mean[0], mean[1]);
        for &(kx, ky, a, b, ph) in &modes {
            let (wx, wy) = (2.0 * std::f64::consts::PI * kx / lx, 2.0 * std::f64::consts::PI * ky / ly);
            let s = (wx * x + wy * y + ph).cos();
            // a grad(sin) + b rot(sin)
            gx += a * wx * s + b * wy * s;
            gy += a * wy * s - b * wx * s;
        }
        f.comps[0][k] = gx;
        f.comps[1][k] = gy;
    }
    let parts = helmholtz_project(&f).map_err(js)?;
    let sol = parts.solenoidal();
    let n2 = f.norm() * f.norm();
    let orth = if n2 > 0.0 { parts.gradient.inner(&sol).abs() / n2 } else { 0.0 };
    let back = parts.reconstruct();
    let rec = back.comps.iter().flatten().zip(f.comps.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let div = spectral_divergence(&sol).iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut out = vec![orth, rec, div];
    for field in [&f, &parts.gradient, &sol] {
        for c in &field.comps {
            out.extend_from_slice(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_touches_zero_on_the_graph() {
        let a = apply_law(1.5, 0.5, 0.8, 0.0);
        let v = representative_slice(1.5, 0.5, 3.0, 0.8, 0.0, 0.0, a[0], a[0] + 1.0, 3).unwrap();
        assert!(v[3].abs() < 1e-6);
        assert!(v[4] > v[3] && v[5] > v[4]);
    }

    #[test]
    fn helmholtz_layout_and_accuracy() {
        let (nx, ny) = (12, 8);
        let v = helmholtz_split(nx, ny, 5).unwrap();
        assert_eq!(v.len(), 3 + 6 * nx * ny);
        assert!(v[0] < 1e-10 && v[1] < 1e-10 && v[2] < 1e-9);
    }

    #[test]
    fn curve_rows() {
        let v = checkerboard_curve(1.0, 4.0, 2, 4, 0).unwrap();
        assert_eq!(v.len(), 12);
        assert_eq!((v[0], v[6]), (1.0, 2.0));
    }
}
