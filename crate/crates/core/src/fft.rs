//! Real trigonometric transforms built on `rustfft`.
//!
//! Three families are needed by the solvers: the complex FFT on a periodic
//! box of any dimension, and the type-I sine and cosine transforms that
//! diagonalize the bilinear one-point-quadrature stiffness matrix on a
//! rectangle with zero or free boundary values.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Forward or inverse complex FFT applied along every axis of a row-major
/// array with the given shape. The inverse is normalized.
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], inverse: bool) {
    let total: usize = shape.iter().product();
    assert_eq!(data.len(), total, "fft_nd: data length does not match shape");
    let mut planner = FftPlanner::new();
    let mut stride = total;
    for &n in shape.iter() {
        stride /= n;
        if n <= 1 {
            continue;
        }
        let plan: Arc<dyn Fft<f64>> = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        let block = n * stride;
        for outer in 0..total / block {
            for inner in 0..stride {
                let base = outer * block + inner;
                for k in 0..n {
                    line[k] = data[base + k * stride];
                }
                plan.process(&mut line);
                for k in 0..n {
                    data[base + k * stride] = line[k];
                }
            }
        }
    }
    if inverse {
        let s = 1.0 / total as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }
}

/// Sample frequency (in cycles per box) of index `k` on an axis of length `n`.
pub fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

enum Kind {
    Sine,
    Cosine,
}

/// Separable 2D type-I transform on an `(n+1) x (n+1)` nodal array,
/// where `n` is the number of cells per side (square or rectangular).
///
/// The sine variant acts on interior nodes and ignores boundary entries;
/// the cosine variant acts on all nodes. Applying either transform twice
/// returns `(2 nx)(2 ny)` times the input (on its support).
pub struct Trig2 {
    nx: usize,
    ny: usize,
    kind: Kind,
    plan_x: Arc<dyn Fft<f64>>,
    plan_y: Arc<dyn Fft<f64>>,
}

impl Trig2 {
    pub fn sine(nx: usize, ny: usize) -> Self {
        Self::new(nx, ny, Kind::Sine)
    }

    pub fn cosine(nx: usize, ny: usize) -> Self {
        Self::new(nx, ny, Kind::Cosine)
    }

    fn new(nx: usize, ny: usize, kind: Kind) -> Self {
        assert!(nx >= 1 && ny >= 1);
        let mut planner = FftPlanner::new();
        let plan_x = planner.plan_fft_forward(2 * nx);
        let plan_y = planner.plan_fft_forward(2 * ny);
        Trig2 { nx, ny, kind, plan_x, plan_y }
    }

    /// Nodal array layout: index `i * (ny + 1) + j` for node `(i, j)`.
    pub fn apply(&self, data: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        assert_eq!(data.len(), (nx + 1) * (ny + 1));
        let mut buf = vec![Complex64::new(0.0, 0.0); 2 * nx.max(ny)];
        let mut line = vec![0.0; nx.max(ny) + 1];
        // along j (contiguous)
        for i in 0..=nx {
            let row = &mut data[i * (ny + 1)..(i + 1) * (ny + 1)];
            line[..=ny].copy_from_slice(row);
            self.transform_line(&mut line[..=ny], ny, &self.plan_y, &mut buf);
            row.copy_from_slice(&line[..=ny]);
        }
        // along i
        for j in 0..=ny {
            for i in 0..=nx {
                line[i] = data[i * (ny + 1) + j];
            }
            self.transform_line(&mut line[..=nx], nx, &self.plan_x, &mut buf);
            for i in 0..=nx {
                data[i * (ny + 1) + j] = line[i];
            }
        }
    }

    fn transform_line(&self, x: &mut [f64], n: usize, plan: &Arc<dyn Fft<f64>>, buf: &mut [Complex64]) {
        let buf = &mut buf[..2 * n];
        match self.kind {
            Kind::Sine => {
                buf[0] = Complex64::new(0.0, 0.0);
                buf[n] = Complex64::new(0.0, 0.0);
                for j in 1..n {
                    buf[j] = Complex64::new(x[j], 0.0);
                    buf[2 * n - j] = Complex64::new(-x[j], 0.0);
                }
                plan.process(buf);
                // the FFT of the odd extension is -2i times the sine sum;
                // we keep twice the sum so that both variants square to 2n
                x[0] = 0.0;
                x[n] = 0.0;
                for k in 1..n {
                    x[k] = -buf[k].im;
                }
            }
            Kind::Cosine => {
                buf[0] = Complex64::new(x[0], 0.0);
                buf[n] = Complex64::new(x[n], 0.0);
                for j in 1..n {
                    buf[j] = Complex64::new(x[j], 0.0);
                    buf[2 * n - j] = Complex64::new(x[j], 0.0);
                }
                plan.process(buf);
                for k in 0..=n {
                    x[k] = buf[k].re;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn sine_transform_matches_direct_sum() {
        let (nx, ny) = (5, 4);
        let mut x = vec![0.0; (nx + 1) * (ny + 1)];
        for i in 1..nx {
            for j in 1..ny {
                x[i * (ny + 1) + j] = (i as f64 * 0.7 + j as f64 * 1.3).sin() + 0.1 * i as f64;
            }
        }
        let mut y = x.clone();
        Trig2::sine(nx, ny).apply(&mut y);
        for k in 1..nx {
            for l in 1..ny {
                let mut s = 0.0;
                for i in 1..nx {
                    for j in 1..ny {
                        s += 4.0
                            * x[i * (ny + 1) + j]
                            * (PI * (i * k) as f64 / nx as f64).sin()
                            * (PI * (j * l) as f64 / ny as f64).sin();
                    }
                }
                assert!((y[k * (ny + 1) + l] - s).abs() < 1e-10, "{k} {l}");
            }
        }
        Trig2::sine(nx, ny).apply(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a * (4 * nx * ny) as f64 - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_transform_is_involutive_up_to_scale() {
        let (nx, ny) = (4, 6);
        let x: Vec<f64> = (0..(nx + 1) * (ny + 1)).map(|k| ((k * 37 % 11) as f64).cos()).collect();
        let mut y = x.clone();
        let t = Trig2::cosine(nx, ny);
        t.apply(&mut y);
        t.apply(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a * (4 * nx * ny) as f64 - b).abs() < 1e-9);
        }
    }

    #[test]
    fn nd_fft_round_trip() {
        let shape = [3, 4, 5];
        let orig: Vec<Complex64> = (0..60).map(|k| Complex64::new((k as f64).sin(), (k as f64 * 0.3).cos())).collect();
        let mut d = orig.clone();
        fft_nd(&mut d, &shape, false);
        fft_nd(&mut d, &shape, true);
        for (a, b) in orig.iter().zip(&d) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
