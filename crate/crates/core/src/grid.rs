//! Periodic grid on the unit torus, grid fields, discrete derivatives, the
//! Friedrichs mollifier and spectral Sobolev norms.
//!
//! Nodes are `x_j = j / N`, `j = 0..N`. Integrals are rectangle sums
//! `dx * sum(f_j)`, which is spectrally accurate for smooth periodic data.
//!
//! Sobolev norms use the flat torus symbol
//! ```text
//! ||f||_{H^s}^2 = sum_k (1 + |2 pi k|^2)^s |f_k|^2,   f_k = (1/N) sum_j f_j e^{-2 pi i k j / N}
//! ```
//! so that `sobolev_norm(f, 0)` is the discrete L^2 norm `(dx * sum f_j^2)^{1/2}`.

use std::f64::consts::PI;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Uniform grid on `T = R/Z`.
#[derive(Clone)]
pub struct PeriodicGrid {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PeriodicGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeriodicGrid").field("n", &self.n).finish()
    }
}

impl PartialEq for PeriodicGrid {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
    }
}

impl PeriodicGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(Error::InvalidGrid(n));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 / self.n as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |j| self.node(j))
    }

    /// Samples `f` at the grid nodes.
    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Field {
        Field(self.nodes().map(f).collect())
    }

    pub fn constant(&self, value: f64) -> Field {
        Field(vec![value; self.n])
    }

    pub fn zeros(&self) -> Field {
        self.constant(0.0)
    }

    /// Signed wave number of DFT index `j`, in `-N/2 ..= N/2 - 1`.
    pub fn wavenumber(&self, j: usize) -> i64 {
        if j < self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    /// Unitary-normalized DFT coefficients `f_k = (1/N) sum_j f_j e^{-2 pi i k x_j}`.
    pub fn dft(&self, f: &Field) -> Result<Vec<Complex<f64>>> {
        self.check(f)?;
        let mut buf: Vec<Complex<f64>> = f.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|c| *c *= scale);
        Ok(buf)
    }

    /// Inverse of [`dft`](Self::dft), real part only.
    pub fn idft(&self, coeffs: &[Complex<f64>]) -> Field {
        let mut buf = coeffs.to_vec();
        self.inverse.process(&mut buf);
        Field(buf.into_iter().map(|c| c.re).collect())
    }

    pub fn check(&self, f: &Field) -> Result<()> {
        if f.len() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                got: f.len(),
            });
        }
        f.check_finite("field")
    }

    /// Grid quadrature `dx * sum_j f_j`.
    pub fn integral(&self, f: &[f64]) -> f64 {
        self.dx() * f.iter().sum::<f64>()
    }

    /// Discrete L^2 inner product.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.dx() * f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn l2_norm(&self, f: &[f64]) -> f64 {
        self.inner(f, f).sqrt()
    }

    /// Trapezoid running integral `F_j = int_0^{x_j} f` with `F_0 = 0`.
    ///
    /// When `f` has zero grid mean the closure `F_N` equals `F_0`, which is
    /// what makes reconstructions from a derivative periodic.
    pub fn cumulative_trapezoid(&self, f: &[f64]) -> Vec<f64> {
        let dx = self.dx();
        let mut out = Vec::with_capacity(self.n);
        let mut acc = 0.0;
        out.push(0.0);
        for j in 1..self.n {
            acc += 0.5 * dx * (f[j - 1] + f[j]);
            out.push(acc);
        }
        out
    }

    /// Coefficient `a` of `a sin(2 pi k x)` in the Fourier expansion of `f`.
    pub fn sine_coefficient(&self, f: &[f64], k: usize) -> f64 {
        let w = 2.0 * PI * k as f64;
        2.0 * self.dx()
            * f.iter()
                .enumerate()
                .map(|(j, v)| v * (w * self.node(j)).sin())
                .sum::<f64>()
    }

    /// Coefficient `b` of `b cos(2 pi k x)` in the Fourier expansion of `f` (k >= 1).
    pub fn cosine_coefficient(&self, f: &[f64], k: usize) -> f64 {
        let w = 2.0 * PI * k as f64;
        2.0 * self.dx()
            * f.iter()
                .enumerate()
                .map(|(j, v)| v * (w * self.node(j)).cos())
                .sum::<f64>()
    }

    /// Periodized triangular (Fejér-type) kernel of half-width `eps`.
    ///
    /// Returns weights for offsets `-m..=m`, `m = floor(eps/dx)`. The center
    /// weight is `1 - 2 * sum(side weights)` accumulated in index order.
    pub fn mollifier_weights(&self, eps: f64) -> Result<Vec<f64>> {
        let dx = self.dx();
        if !(eps.is_finite() && eps >= dx * (1.0 - 1e-12)) {
            return Err(Error::KernelUnresolved { eps, dx });
        }
        let m = ((eps / dx) * (1.0 + 1e-12)).floor() as usize;
        let m = m.min(self.n / 2 - 1);
        let raw: Vec<f64> = (0..=m)
            .map(|i| (1.0 - i as f64 * dx / eps).max(0.0))
            .collect();
        let total: f64 = raw[0] + 2.0 * raw[1..].iter().sum::<f64>();
        let side: Vec<f64> = raw[1..].iter().map(|w| w / total).collect();
        let center = 1.0 - 2.0 * side.iter().sum::<f64>();
        let mut weights = Vec::with_capacity(2 * m + 1);
        weights.extend(side.iter().rev());
        weights.push(center);
        weights.extend(side.iter());
        Ok(weights)
    }

    /// Friedrichs mollifier `J_eps f`: circular convolution with the
    /// triangular kernel. Preserves constants and the grid mean.
    pub fn mollify(&self, f: &Field, eps: f64) -> Result<Field> {
        self.check(f)?;
        let weights = self.mollifier_weights(eps)?;
        let m = weights.len() / 2;
        let n = self.n;
        let out = (0..n)
            .map(|j| {
                weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * f[(j + n + i - m) % n])
                    .sum::<f64>()
            })
            .collect();
        Ok(Field(out))
    }

    /// Spectral Sobolev norm of order `s`.
    pub fn sobolev_norm(&self, f: &Field, s: f64) -> Result<f64> {
        let coeffs = self.dft(f)?;
        let sum: f64 = coeffs
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let k = 2.0 * PI * self.wavenumber(j) as f64;
                (1.0 + k * k).powf(s) * c.norm_sqr()
            })
            .sum();
        Ok(sum.sqrt())
    }

    pub fn derivative(&self, f: &Field, scheme: DerivativeScheme) -> Result<Field> {
        self.check(f)?;
        let n = self.n;
        let inv_dx = self.n as f64;
        let out = match scheme {
            DerivativeScheme::Centered => (0..n)
                .map(|j| 0.5 * inv_dx * (f[(j + 1) % n] - f[(j + n - 1) % n]))
                .collect(),
            DerivativeScheme::UpwindPositive => (0..n)
                .map(|j| inv_dx * (f[j] - f[(j + n - 1) % n]))
                .collect(),
            DerivativeScheme::UpwindNegative => (0..n)
                .map(|j| inv_dx * (f[(j + 1) % n] - f[j]))
                .collect(),
            DerivativeScheme::Spectral => {
                let mut coeffs = self.dft(f)?;
                for (j, c) in coeffs.iter_mut().enumerate() {
                    let k = self.wavenumber(j);
                    // Nyquist mode has no odd-symmetric partner.
                    if k == -(n as i64) / 2 {
                        *c = Complex::new(0.0, 0.0);
                    } else {
                        *c *= Complex::new(0.0, 2.0 * PI * k as f64);
                    }
                }
                let mut buf = coeffs;
                self.inverse.process(&mut buf);
                buf.into_iter().map(|c| c.re).collect()
            }
        };
        Ok(Field(out))
    }
}

/// Discrete `d/dx` schemes.
///
/// `UpwindPositive` is the backward difference `D-` (upwind for rightward
/// transport); `UpwindNegative` is the forward difference `D+`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeScheme {
    Centered,
    UpwindPositive,
    UpwindNegative,
    Spectral,
}

/// Grid values of a scalar field.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Field(pub Vec<f64>);

impl Field {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let f = Field(values);
        f.check_finite("field")?;
        Ok(f)
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { context, index }),
            None => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Field {
        Field(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect())
    }
}

impl Deref for Field {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for Field {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for Field {
    fn from(v: Vec<f64>) -> Self {
        Field(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &PeriodicGrid, rng: &mut ChaCha8Rng) -> Field {
        Field((0..grid.n()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn grid_rejects_odd_and_small() {
        assert!(PeriodicGrid::new(6).is_err());
        assert!(PeriodicGrid::new(31).is_err());
        assert!(PeriodicGrid::new(32).is_ok());
    }

    #[test]
    fn mollify_preserves_constants() {
        let grid = PeriodicGrid::new(64).unwrap();
        let f = grid.constant(3.0);
        let g = grid.mollify(&f, 0.1).unwrap();
        for v in g.iter() {
            assert!((v - 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn mollify_rejects_unresolved_kernel() {
        let grid = PeriodicGrid::new(64).unwrap();
        let f = grid.constant(1.0);
        assert!(matches!(
            grid.mollify(&f, 0.5 / 64.0),
            Err(Error::KernelUnresolved { .. })
        ));
    }

    #[test]
    fn mollify_preserves_mean() {
        let grid = PeriodicGrid::new(128).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let f = random_field(&grid, &mut rng);
            let g = grid.mollify(&f, 0.07).unwrap();
            assert!((g.mean() - f.mean()).abs() < 1e-14);
        }
    }

    #[test]
    fn kernel_weights_nonnegative_unit_mass() {
        let grid = PeriodicGrid::new(256).unwrap();
        for eps in [1.0 / 256.0, 0.01, 0.05, 0.2] {
            let w = grid.mollifier_weights(eps).unwrap();
            assert!(w.iter().all(|&v| v >= 0.0));
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() <= 4.0 * f64::EPSILON);
        }
    }

    /// Continuous triangular kernel applied to sin(2 pi x) by fine quadrature;
    /// the discrete kernel must approach it and stay within the second-moment bound.
    #[test]
    fn mollify_sine_matches_fine_convolution_oracle() {
        let eps = 0.1;
        let grid = PeriodicGrid::new(512).unwrap();
        let f = grid.sample(|x| (2.0 * PI * x).sin());
        let g = grid.mollify(&f, eps).unwrap();
        // Oracle: damping factor int tri_eps(y) cos(2 pi y) dy via midpoint rule.
        let m = 200_000;
        let h = 2.0 * eps / m as f64;
        let mut damp = 0.0;
        for i in 0..m {
            let y = -eps + (i as f64 + 0.5) * h;
            damp += (1.0 - y.abs() / eps) / eps * (2.0 * PI * y).cos() * h;
        }
        let err_oracle = (0..grid.n())
            .map(|j| (g[j] - damp * f[j]).abs())
            .fold(0.0, f64::max);
        assert!(err_oracle < 1e-4, "{err_oracle}");
        // Second-moment bound: |1 - w_hat| <= (2 pi)^2 m2 / 2.
        let w = grid.mollifier_weights(eps).unwrap();
        let half = w.len() / 2;
        let m2: f64 = w
            .iter()
            .enumerate()
            .map(|(i, wi)| wi * ((i as f64 - half as f64) * grid.dx()).powi(2))
            .sum();
        let err = (0..grid.n()).map(|j| (g[j] - f[j]).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 * (2.0 * PI).powi(2) * m2 + 1e-12);
        assert!(err > 0.0);
    }

    #[test]
    fn sobolev_norm_constant_and_sine() {
        let grid = PeriodicGrid::new(64).unwrap();
        let c = grid.constant(-2.5);
        for s in [-2.0, -0.6, 0.0, 0.5, 2.0] {
            assert!((grid.sobolev_norm(&c, s).unwrap() - 2.5).abs() < 1e-12);
        }
        let f = grid.sample(|x| (2.0 * PI * x).sin());
        for s in [-2.0, -0.6, 0.0, 0.5, 1.0, 2.0] {
            let expected = (1.0 + 4.0 * PI * PI).powf(s / 2.0) / 2f64.sqrt();
            let got = grid.sobolev_norm(&f, s).unwrap();
            assert!((got - expected).abs() < 1e-12 * expected.max(1.0), "{s}");
        }
    }

    /// Brute-force mode sums: |<f,g>| <= ||f||_{-s} ||g||_{s}.
    #[test]
    fn sobolev_duality() {
        let grid = PeriodicGrid::new(32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let f = random_field(&grid, &mut rng);
            let g = random_field(&grid, &mut rng);
            // Direct O(N^2) DFT as the oracle for the mode sums.
            let brute = |h: &Field, s: f64| -> f64 {
                let n = grid.n();
                let mut total = 0.0;
                for j in 0..n {
                    let k = grid.wavenumber(j) as f64;
                    let (mut re, mut im) = (0.0, 0.0);
                    for (l, v) in h.iter().enumerate() {
                        let arg = -2.0 * PI * k * l as f64 / n as f64;
                        re += v * arg.cos() / n as f64;
                        im += v * arg.sin() / n as f64;
                    }
                    total += (1.0 + (2.0 * PI * k).powi(2)).powf(s) * (re * re + im * im);
                }
                total.sqrt()
            };
            let nf = grid.sobolev_norm(&f, -0.6).unwrap();
            let ng = grid.sobolev_norm(&g, 0.6).unwrap();
            assert!((nf - brute(&f, -0.6)).abs() < 1e-12);
            assert!((ng - brute(&g, 0.6)).abs() < 1e-12);
            assert!(nf * ng >= grid.inner(&f, &g).abs() - 1e-14);
        }
    }

    #[test]
    fn interpolation_inequality_random_fields() {
        let grid = PeriodicGrid::new(64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [2usize, 3, 5] {
            let beta = 1.0 - 1.0 / n as f64;
            for _ in 0..100 {
                let f = random_field(&grid, &mut rng);
                let lhs = grid.sobolev_norm(&f, beta).unwrap();
                let rhs = grid.sobolev_norm(&f, 1.0).unwrap().powf(beta)
                    * grid.sobolev_norm(&f, 0.0).unwrap().powf(1.0 - beta);
                // Hölder on the mode sums gives the constant 1.
                assert!(lhs <= rhs * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn derivatives_of_constant_vanish() {
        let grid = PeriodicGrid::new(32).unwrap();
        let f = grid.constant(4.2);
        for scheme in [
            DerivativeScheme::Centered,
            DerivativeScheme::UpwindPositive,
            DerivativeScheme::UpwindNegative,
            DerivativeScheme::Spectral,
        ] {
            assert!(grid.derivative(&f, scheme).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_derivative_exact_for_sine() {
        let grid = PeriodicGrid::new(64).unwrap();
        let f = grid.sample(|x| (2.0 * PI * x).sin());
        let d = grid.derivative(&f, DerivativeScheme::Spectral).unwrap();
        for (j, v) in d.iter().enumerate() {
            assert!((v - 2.0 * PI * (2.0 * PI * grid.node(j)).cos()).abs() < 1e-12);
        }
    }

    /// Centered difference of sin(2 pi x) is (sin(2 pi dx)/dx) cos(2 pi x).
    #[test]
    fn centered_derivative_dispersion() {
        let grid = PeriodicGrid::new(64).unwrap();
        let dx = grid.dx();
        let f = grid.sample(|x| (2.0 * PI * x).sin());
        let d = grid.derivative(&f, DerivativeScheme::Centered).unwrap();
        let err = (0..64)
            .map(|j| (d[j] - 2.0 * PI * (2.0 * PI * grid.node(j)).cos()).abs())
            .fold(0.0, f64::max);
        let predicted = (2.0 * PI - (2.0 * PI * dx).sin() / dx).abs();
        assert!((err - predicted).abs() < 1e-12, "{err} vs {predicted}");
    }

    #[test]
    fn non_finite_is_rejected() {
        let grid = PeriodicGrid::new(8).unwrap();
        let mut f = grid.zeros();
        f[3] = f64::NAN;
        assert!(matches!(
            grid.sobolev_norm(&f, 0.0),
            Err(Error::NonFinite { index: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn parseval(values in proptest::collection::vec(-10.0f64..10.0, 16)) {
            let grid = PeriodicGrid::new(16).unwrap();
            let f = Field(values);
            let n0 = grid.sobolev_norm(&f, 0.0).unwrap();
            let direct = grid.dx() * f.iter().map(|v| v * v).sum::<f64>();
            prop_assert!((n0 * n0 - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }
}
