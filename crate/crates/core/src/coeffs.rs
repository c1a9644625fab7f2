//! Model coefficients `c`, `gamma`, `f`, their tabulated primitives and
//! inverses, the `h`/`H` construction, divergence-form coefficients and the
//! assumption report.
//!
//! Primitives are tabulated on the working range by composite 5-point
//! Gauss-Legendre quadrature and interpolated by cubic Hermite polynomials
//! whose node slopes are the (exactly known) integrands. Inverses use a
//! bracketed Newton iteration on the tabulated interpolant. Queries outside
//! the working range are errors, never extrapolations.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Field;

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Declared bounds of the coefficient assumptions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientBounds {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lipschitz: f64,
}

/// Finite-range proxy for `liminf_{u -> -inf} c'(u) int_ubar^u dv/c(v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaProxy {
    /// Minimum over the last decade of the logarithmic grid (the liminf proxy).
    pub tail_min: f64,
    /// Minimum over every sampled `u <= ubar` (a conservative lower bound).
    pub global_min: f64,
    pub floor: f64,
}

/// Wave speed, friction and source with derivatives and declared bounds.
#[derive(Clone)]
pub struct ModelCoefficients {
    pub name: String,
    pub c: ScalarFn,
    pub c_prime: ScalarFn,
    pub c_second: ScalarFn,
    pub gamma: ScalarFn,
    pub gamma_prime: ScalarFn,
    pub f: ScalarFn,
    pub bounds: CoefficientBounds,
    pub ubar: f64,
    pub kappa: KappaProxy,
}

impl std::fmt::Debug for ModelCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelCoefficients")
            .field("name", &self.name)
            .field("bounds", &self.bounds)
            .field("ubar", &self.ubar)
            .field("kappa", &self.kappa)
            .finish()
    }
}

pub const DEFAULT_KAPPA_FLOOR: f64 = -1.0e6;

fn arc(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> ScalarFn {
    Arc::new(f)
}

fn sech2(u: f64) -> f64 {
    let ch = u.cosh();
    if ch.is_finite() {
        1.0 / (ch * ch)
    } else {
        0.0
    }
}

impl ModelCoefficients {
    /// Builds coefficients from closures and computes the kappa proxy.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        name: impl Into<String>,
        c: ScalarFn,
        c_prime: ScalarFn,
        c_second: ScalarFn,
        gamma: ScalarFn,
        gamma_prime: ScalarFn,
        f: ScalarFn,
        bounds: CoefficientBounds,
        ubar: f64,
        kappa_floor: f64,
    ) -> Self {
        let kappa = kappa_proxy(&*c, &*c_prime, ubar, kappa_floor);
        Self {
            name: name.into(),
            c,
            c_prime,
            c_second,
            gamma,
            gamma_prime,
            f,
            bounds,
            ubar,
            kappa,
        }
    }

    /// `c = c0`, `gamma = gamma0`, `f = 0`.
    pub fn constant(c0: f64, gamma0: f64) -> Result<Self> {
        if !(c0 > 0.0 && gamma0 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "constant preset needs c0 > 0 and gamma0 > 0, got {c0}, {gamma0}"
            )));
        }
        Ok(Self::from_parts(
            "constant",
            arc(move |_| c0),
            arc(|_| 0.0),
            arc(|_| 0.0),
            arc(move |_| gamma0),
            arc(|_| 0.0),
            arc(|_| 0.0),
            CoefficientBounds {
                c1: c0,
                c2: c0,
                c3: 0.0,
                gamma1: gamma0,
                gamma2: gamma0,
                lipschitz: 0.0,
            },
            0.0,
            DEFAULT_KAPPA_FLOOR,
        ))
    }

    /// `c = a + tanh(u)`, `gamma = gamma0 + gamma_amp tanh(u)`, `f = 0`.
    pub fn tanh_speed(a: f64, gamma0: f64, gamma_amp: f64) -> Result<Self> {
        if !(a > 1.0 && gamma0 > gamma_amp.abs()) {
            return Err(Error::InvalidInput(format!(
                "tanh-speed preset needs a > 1 and gamma0 > |gamma_amp|, got a={a}, gamma0={gamma0}, gamma_amp={gamma_amp}"
            )));
        }
        Ok(Self::from_parts(
            "tanh-speed",
            arc(move |u| a + u.tanh()),
            arc(sech2),
            arc(|u| -2.0 * sech2(u) * u.tanh()),
            arc(move |u| gamma0 + gamma_amp * u.tanh()),
            arc(move |u| gamma_amp * sech2(u)),
            arc(|_| 0.0),
            CoefficientBounds {
                c1: a - 1.0,
                c2: a + 1.0,
                c3: 1.0,
                gamma1: gamma0 - gamma_amp.abs(),
                gamma2: gamma0 + gamma_amp.abs(),
                lipschitz: 0.0,
            },
            0.0,
            DEFAULT_KAPPA_FLOOR,
        ))
    }

    /// Coefficients from a table of `(u, c, gamma, f)` rows, interpolated by
    /// natural cubic splines and held constant outside the table.
    pub fn from_table(rows: &[[f64; 4]]) -> Result<Self> {
        if rows.len() < 4 {
            return Err(Error::NotEnoughData {
                what: "coefficient table rows",
                need: 4,
                got: rows.len(),
            });
        }
        let u: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        if u.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "coefficient table u column must be strictly increasing".into(),
            ));
        }
        let c = Arc::new(CubicSpline::natural(&u, &rows.iter().map(|r| r[1]).collect::<Vec<_>>())?);
        let g = Arc::new(CubicSpline::natural(&u, &rows.iter().map(|r| r[2]).collect::<Vec<_>>())?);
        let f = Arc::new(CubicSpline::natural(&u, &rows.iter().map(|r| r[3]).collect::<Vec<_>>())?);

        let samples = 4000;
        let (lo, hi) = (u[0], u[u.len() - 1]);
        let grid: Vec<f64> = (0..=samples)
            .map(|i| lo + (hi - lo) * i as f64 / samples as f64)
            .collect();
        let stat = |s: &CubicSpline, d: usize| -> (f64, f64) {
            grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), &x| {
                let v = s.eval(x, d);
                (mn.min(v), mx.max(v))
            })
        };
        let (c1, c2) = stat(&c, 0);
        let (_, c3) = stat(&c, 1);
        let (g1, g2) = stat(&g, 0);
        let (fl, fh) = stat(&f, 1);
        let bounds = CoefficientBounds {
            c1,
            c2,
            c3: c3.max(0.0),
            gamma1: g1,
            gamma2: g2,
            lipschitz: fl.abs().max(fh.abs()),
        };
        let (c0, c_1, c_2) = (c.clone(), c.clone(), c.clone());
        let (g0, g_1) = (g.clone(), g.clone());
        Ok(Self::from_parts(
            "table",
            arc(move |x| c0.eval(x, 0)),
            arc(move |x| c_1.eval(x, 1)),
            arc(move |x| c_2.eval(x, 2)),
            arc(move |x| g0.eval(x, 0)),
            arc(move |x| g_1.eval(x, 1)),
            arc(move |x| f.eval(x, 0)),
            bounds,
            0.0,
            DEFAULT_KAPPA_FLOOR,
        ))
    }

    /// Reads a CSV with header `u,c,gamma,f`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if i == 0 && cols.first().map(|c| c.parse::<f64>().is_err()).unwrap_or(false) {
                if cols != ["u", "c", "gamma", "f"] {
                    return Err(Error::Config(format!(
                        "coefficient table header must be u,c,gamma,f, got {line}"
                    )));
                }
                continue;
            }
            if cols.len() != 4 {
                return Err(Error::Config(format!("line {}: expected 4 columns", i + 1)));
            }
            let mut row = [0.0; 4];
            for (slot, col) in row.iter_mut().zip(&cols) {
                *slot = col
                    .parse()
                    .map_err(|_| Error::Config(format!("line {}: bad number {col}", i + 1)))?;
            }
            rows.push(row);
        }
        Self::from_table(&rows)
    }

    /// Replaces the source term.
    pub fn with_source(mut self, f: ScalarFn, lipschitz: f64) -> Self {
        self.f = f;
        self.bounds.lipschitz = lipschitz;
        self
    }

    /// `f(u) = amp * sin(u)` with Lipschitz constant `|amp|`.
    pub fn with_sine_source(self, amp: f64) -> Self {
        self.with_source(arc(move |u| amp * u.sin()), amp.abs())
    }

    /// Moves the reference point `ubar` and the kappa floor; recomputes kappa.
    pub fn with_reference(mut self, ubar: f64, kappa_floor: f64) -> Self {
        self.ubar = ubar;
        self.kappa = kappa_proxy(&*self.c, &*self.c_prime, ubar, kappa_floor);
        self
    }

    /// `c~'(u) = c'(u) / (4 c(u))`, the derivative of `log(c)/4`.
    pub fn tilde_c_prime(&self, u: f64) -> f64 {
        (self.c_prime)(u) / (4.0 * (self.c)(u))
    }
}

/// Minimum of `c'(u) g(u)`, `g(u) = int_ubar^u dv/c`, on a logarithmic grid
/// `u = ubar - d`, `d` from 1e-3 to `ubar - floor`.
pub fn kappa_proxy(
    c: &dyn Fn(f64) -> f64,
    c_prime: &dyn Fn(f64) -> f64,
    ubar: f64,
    floor: f64,
) -> KappaProxy {
    let span = (ubar - floor).max(1e-2);
    let points = 600;
    let d_min: f64 = 1e-3;
    let ratio = (span / d_min).powf(1.0 / (points - 1) as f64);
    let mut prev_d = 0.0;
    let mut integral = 0.0;
    let mut tail_min = f64::INFINITY;
    let mut global_min = f64::INFINITY;
    for i in 0..points {
        let d = d_min * ratio.powi(i);
        integral += gauss_legendre(|s| 1.0 / c(ubar - s), prev_d, d, 8);
        prev_d = d;
        let u = ubar - d;
        let value = -c_prime(u) * integral;
        global_min = global_min.min(value);
        if d >= span / 10.0 {
            tail_min = tail_min.min(value);
        }
    }
    KappaProxy {
        tail_min,
        global_min,
        floor,
    }
}

const GL5_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_47,
    0.478_628_670_499_366_47,
    0.236_926_885_056_189_08,
    0.236_926_885_056_189_08,
];

/// Composite 5-point Gauss-Legendre on `pieces` equal subintervals.
pub fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, pieces: usize) -> f64 {
    let h = (b - a) / pieces as f64;
    let mut total = 0.0;
    for p in 0..pieces {
        let mid = a + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        let mut s = 0.0;
        for (x, w) in GL5_NODES.iter().zip(GL5_WEIGHTS) {
            s += w * f(mid + half * x);
        }
        total += s * half;
    }
    total
}

/// Cubic Hermite tabulation of a primitive `P(u) = int_origin^u g`.
#[derive(Debug, Clone)]
pub struct Tabulated {
    name: &'static str,
    lo: f64,
    hi: f64,
    h: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl Tabulated {
    pub fn build(
        name: &'static str,
        range: (f64, f64),
        step: f64,
        origin: f64,
        integrand: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let (lo, hi) = range;
        if !(step > 0.0 && hi > lo) {
            return Err(Error::InvalidInput(format!(
                "{name}: need step > 0 and a nonempty range"
            )));
        }
        let cells = ((hi - lo) / step).ceil() as usize;
        let h = (hi - lo) / cells as f64;
        let mut values = Vec::with_capacity(cells + 1);
        let mut slopes = Vec::with_capacity(cells + 1);
        let mut acc = 0.0;
        values.push(0.0);
        slopes.push(integrand(lo));
        for i in 0..cells {
            let a = lo + i as f64 * h;
            let b = if i + 1 == cells { hi } else { lo + (i + 1) as f64 * h };
            acc += gauss_legendre(&integrand, a, b, 1);
            values.push(acc);
            slopes.push(integrand(b));
        }
        let mut table = Self {
            name,
            lo,
            hi,
            h,
            values,
            slopes,
        };
        let offset = table.eval(origin)?;
        table.values.iter_mut().for_each(|v| *v -= offset);
        if let Some(i) = table.slopes.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: "tabulated integrand",
                index: i,
            });
        }
        Ok(table)
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Image of the working range.
    pub fn value_range(&self) -> (f64, f64) {
        (self.values[0], self.values[self.values.len() - 1])
    }

    fn require_increasing(&self) -> Result<()> {
        for i in 1..self.values.len() {
            if self.values[i] <= self.values[i - 1] {
                return Err(Error::NonMonotonic {
                    map: self.name,
                    at: self.lo + i as f64 * self.h,
                });
            }
        }
        Ok(())
    }

    fn cell(&self, u: f64) -> Result<(usize, f64)> {
        let (lo, hi) = self.range();
        if !(u >= lo && u <= hi) {
            return Err(Error::OutOfRange {
                map: self.name,
                value: u,
                lo,
                hi,
            });
        }
        let last = self.values.len() - 2;
        let i = (((u - lo) / self.h).floor() as usize).min(last);
        let s = (u - (lo + i as f64 * self.h)) / self.h;
        Ok((i, s))
    }

    fn hermite(&self, i: usize, s: f64) -> (f64, f64) {
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i] * self.h, self.slopes[i + 1] * self.h);
        let s2 = s * s;
        let s3 = s2 * s;
        let value = (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * m1;
        let deriv = ((6.0 * s2 - 6.0 * s) * y0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (-6.0 * s2 + 6.0 * s) * y1
            + (3.0 * s2 - 2.0 * s) * m1)
            / self.h;
        (value, deriv)
    }

    pub fn eval(&self, u: f64) -> Result<f64> {
        let (i, s) = self.cell(u)?;
        Ok(self.hermite(i, s).0)
    }

    /// Inverse of an increasing tabulation, accurate to 1e-12 in the argument.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        let (vlo, vhi) = self.value_range();
        if !(y >= vlo && y <= vhi) {
            return Err(Error::OutOfRange {
                map: self.name,
                value: y,
                lo: vlo,
                hi: vhi,
            });
        }
        let i = match self
            .values
            .binary_search_by(|v| v.partial_cmp(&y).expect("finite table"))
        {
            Ok(i) => return Ok(self.lo + i as f64 * self.h),
            Err(i) => i - 1,
        };
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (mut a, mut b) = (0.0_f64, 1.0_f64);
        let mut s = (y - y0) / (y1 - y0);
        let tol = 1e-13 / self.h;
        for _ in 0..100 {
            let (v, d) = self.hermite(i, s);
            let r = v - y;
            if r > 0.0 {
                b = s;
            } else {
                a = s;
            }
            let newton = s - r / (d * self.h);
            let next = if d > 0.0 && newton > a && newton < b {
                newton
            } else {
                0.5 * (a + b)
            };
            let done = (next - s).abs() < tol || b - a < tol;
            s = next;
            if done {
                break;
            }
        }
        Ok(self.lo + (i as f64 + s) * self.h)
    }
}

/// Tabulated primitive maps of the coefficients.
#[derive(Debug, Clone)]
pub struct PrimitiveMaps {
    pub coeffs: ModelCoefficients,
    range: (f64, f64),
    quad_step: f64,
    c_map: Tabulated,
    c2_map: Tabulated,
    gamma_map: Tabulated,
    gamma_under: Tabulated,
    k_map: Tabulated,
}

pub const DEFAULT_RANGE: (f64, f64) = (-50.0, 50.0);
pub const DEFAULT_QUAD_STEP: f64 = 1e-3;

/// Tabulates `C`, `C2`, `Gamma`, `Gamma_` and `k` on `range` with node spacing
/// at most `quad_step`.
pub fn build_primitives(
    coeffs: &ModelCoefficients,
    range: (f64, f64),
    quad_step: f64,
) -> Result<PrimitiveMaps> {
    if !(range.0 <= 0.0 && range.1 >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "primitive range {range:?} must contain 0"
        )));
    }
    let c = coeffs.c.clone();
    let g = coeffs.gamma.clone();
    let cp = coeffs.c_prime.clone();
    let c_map = Tabulated::build("C", range, quad_step, 0.0, |u| c(u))?;
    let c2_map = Tabulated::build("C2", range, quad_step, 0.0, |u| c(u) * c(u))?;
    let gamma_map = Tabulated::build("Gamma", range, quad_step, 0.0, |u| g(u))?;
    let gamma_under = Tabulated::build("Gamma_", range, quad_step, 0.0, |u| g(u) / c(u))?;
    let k_map = Tabulated::build("k", range, quad_step, 0.0, |u| {
        (cp(u) * c(u)).max(0.0).sqrt()
    })?;
    c_map.require_increasing()?;
    gamma_map.require_increasing()?;
    gamma_under.require_increasing()?;
    Ok(PrimitiveMaps {
        coeffs: coeffs.clone(),
        range,
        quad_step,
        c_map,
        c2_map,
        gamma_map,
        gamma_under,
        k_map,
    })
}

impl PrimitiveMaps {
    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn quad_step(&self) -> f64 {
        self.quad_step
    }

    /// `C(u) = int_0^u c`.
    pub fn c_map(&self, u: f64) -> Result<f64> {
        self.c_map.eval(u)
    }

    pub fn c_inv(&self, y: f64) -> Result<f64> {
        self.c_map.inverse(y)
    }

    /// `C2(u) = int_0^u c^2`.
    pub fn c2_map(&self, u: f64) -> Result<f64> {
        self.c2_map.eval(u)
    }

    /// `Gamma(u) = int_0^u gamma`.
    pub fn gamma_map(&self, u: f64) -> Result<f64> {
        self.gamma_map.eval(u)
    }

    pub fn gamma_inv(&self, w: f64) -> Result<f64> {
        self.gamma_map.inverse(w)
    }

    /// `Gamma_(u) = int_0^u gamma / c`.
    pub fn gamma_under(&self, u: f64) -> Result<f64> {
        self.gamma_under.eval(u)
    }

    pub fn gamma_under_inv(&self, p: f64) -> Result<f64> {
        self.gamma_under.inverse(p)
    }

    /// `k(u) = int_0^u sqrt(c' c)`.
    pub fn k_map(&self, u: f64) -> Result<f64> {
        self.k_map.eval(u)
    }

    pub fn tilde_c_prime(&self, u: f64) -> f64 {
        self.coeffs.tilde_c_prime(u)
    }

    /// Pointwise application of a fallible map to a field.
    pub fn apply(&self, f: &Field, map: impl Fn(&Self, f64) -> Result<f64>) -> Result<Field> {
        f.iter().map(|&v| map(self, v)).collect::<Result<Vec<_>>>().map(Field)
    }
}

/// `h`, `h'`, `H` of the parabolic energy, from the explicit
/// integral construction.
#[derive(Debug, Clone)]
pub struct HMaps {
    coeffs: ModelCoefficients,
    /// `int_0^u dv/c`, the base tabulation.
    inv_c: Tabulated,
    big_h: Tabulated,
    /// `h(u) = inv_c(u) + shift`.
    shift: f64,
    pub u_lower: f64,
    pub u_star: f64,
    pub kappa: f64,
}

impl HMaps {
    pub fn h(&self, u: f64) -> Result<f64> {
        Ok(self.inv_c.eval(u)? + self.shift)
    }

    pub fn h_prime(&self, u: f64) -> f64 {
        1.0 / (self.coeffs.c)(u)
    }

    #[allow(non_snake_case)]
    pub fn H(&self, u: f64) -> Result<f64> {
        self.big_h.eval(u)
    }

    pub fn range(&self) -> (f64, f64) {
        self.inv_c.range()
    }
}

/// Builds `h` and `H`: `g(u) = int_ubar^u dv/c`, `u_` the largest sampled point
/// below `ubar` with `c' g >= (kappa-1)/2` at every sampled point below it,
/// `h = g + sup_[u_, ubar] |g|`, `u* = h^{-1}(0)`, `H(u) = int_{u*}^u h gamma`.
pub fn build_h_h(coeffs: &ModelCoefficients, range: (f64, f64), quad_step: f64) -> Result<HMaps> {
    let kappa = coeffs.kappa.tail_min;
    if kappa <= -1.0 {
        return Err(Error::InvalidInput(format!(
            "kappa proxy {kappa} <= -1; the h/H construction needs kappa > -1"
        )));
    }
    let ubar = coeffs.ubar;
    if !(ubar > range.0 && ubar < range.1) {
        return Err(Error::NoZeroOfH {
            lo: range.0,
            hi: range.1,
        });
    }
    let c = coeffs.c.clone();
    let inv_c = Tabulated::build("int 1/c", range, quad_step, 0.0, |u| 1.0 / c(u))?;
    inv_c.require_increasing()?;
    let g_ubar = inv_c.eval(ubar)?;
    let g = |u: f64| -> Result<f64> { Ok(inv_c.eval(u)? - g_ubar) };

    // Scan sampled points from the range minimum up to ubar.
    let threshold = 0.5 * (kappa - 1.0);
    let n_below = ((ubar - range.0) / quad_step).floor() as usize;
    let sample = |i: usize| range.0 + i as f64 * quad_step;
    let mut u_lower = range.0;
    let mut all_ok = true;
    for i in 0..=n_below {
        let u = sample(i);
        if (coeffs.c_prime)(u) * g(u)? < threshold {
            all_ok = false;
            u_lower = if i == 0 { range.0 } else { sample(i - 1) };
            break;
        }
    }
    if all_ok {
        u_lower = sample(n_below);
    }
    // sup |g| over sampled points of [u_lower, ubar].
    let mut sup = 0.0_f64;
    let mut u = u_lower;
    while u <= ubar {
        sup = sup.max(g(u)?.abs());
        u += quad_step;
    }
    sup = sup.max(g(ubar)?.abs());
    let shift = sup - g_ubar;
    let h = |u: f64| -> Result<f64> { Ok(inv_c.eval(u)? + shift) };

    // u* by bisection on the increasing h.
    let (lo, hi) = range;
    if h(lo)? > 0.0 || h(hi)? < 0.0 {
        return Err(Error::NoZeroOfH { lo, hi });
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > 1e-13 * (1.0 + a.abs().max(b.abs())) {
        let m = 0.5 * (a + b);
        if h(m)? < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    let u_star = 0.5 * (a + b);

    let gamma = coeffs.gamma.clone();
    let big_h = Tabulated::build("H", range, quad_step, u_star, |v| {
        (inv_c.eval(v).unwrap_or(f64::NAN) + shift) * gamma(v)
    })?;
    Ok(HMaps {
        coeffs: coeffs.clone(),
        inv_c,
        big_h,
        shift,
        u_lower,
        u_star,
        kappa,
    })
}

/// Coefficients of the divergence-form equation for `p = Gamma_(u)`.
#[derive(Debug, Clone)]
pub struct DivergenceCoeffs {
    prims: Arc<PrimitiveMaps>,
    q: Field,
}

pub fn build_divergence_coeffs(prims: Arc<PrimitiveMaps>, q_field: Field) -> Result<DivergenceCoeffs> {
    q_field.check_finite("q field")?;
    Ok(DivergenceCoeffs { prims, q: q_field })
}

impl DivergenceCoeffs {
    /// `b(p) = (c^2/gamma)(u)`, `u = Gamma_^{-1}(p)`.
    pub fn b(&self, p: f64) -> Result<f64> {
        let u = self.prims.gamma_under_inv(p)?;
        let c = (self.prims.coeffs.c)(u);
        Ok(c * c / (self.prims.coeffs.gamma)(u))
    }

    /// `F(x_j, p) = (f/c - q(x_j) c' / (2 gamma c^2))(u)`.
    pub fn f_div(&self, j: usize, p: f64) -> Result<f64> {
        let u = self.prims.gamma_under_inv(p)?;
        Ok(self.f_div_at_u(self.q[j], u))
    }

    pub fn f_div_at_u(&self, q: f64, u: f64) -> f64 {
        let co = &self.prims.coeffs;
        let c = (co.c)(u);
        (co.f)(u) / c - q * (co.c_prime)(u) / (2.0 * (co.gamma)(u) * c * c)
    }

    /// Multiplier `1/c(u)` applied to every noise profile.
    pub fn psi_scale(&self, p: f64) -> Result<f64> {
        let u = self.prims.gamma_under_inv(p)?;
        Ok(1.0 / (self.prims.coeffs.c)(u))
    }

    pub fn q(&self) -> &Field {
        &self.q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub pass: bool,
    pub extremal: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub kappa: KappaProxy,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("assumption,status,extremal,detail\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{},{},{:.12e},{}",
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.extremal,
                c.detail.replace(',', ";")
            );
        }
        out
    }

    pub fn banner(&self) -> String {
        format!(
            "kappa is a finite-range proxy (tail minimum {:.6e}, global minimum {:.6e}, floor {:.3e}); pathological c may be misclassified",
            self.kappa.tail_min, self.kappa.global_min, self.kappa.floor
        )
    }
}

/// Checks every coefficient assumption on `samples` points of `range` and the
/// positivity of `c'` along the initial datum.
pub fn verify_assumptions(
    coeffs: &ModelCoefficients,
    u0: &Field,
    range: (f64, f64),
) -> AssumptionReport {
    let samples = 2001;
    let us: Vec<f64> = (0..samples)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / (samples - 1) as f64)
        .collect();
    let b = coeffs.bounds;
    let tol = 1e-12;
    let fold = |f: &dyn Fn(f64) -> f64| {
        us.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &u| {
            let v = f(u);
            (lo.min(v), hi.max(v))
        })
    };
    let (cmin, cmax) = fold(&*coeffs.c);
    let (cpmin, cpmax) = fold(&*coeffs.c_prime);
    let (gmin, gmax) = fold(&*coeffs.gamma);
    let lip = us
        .windows(2)
        .map(|w| ((coeffs.f)(w[1]) - (coeffs.f)(w[0])).abs() / (w[1] - w[0]))
        .fold(0.0, f64::max);
    let sup_cg = us
        .iter()
        .map(|&u| (coeffs.c_second)(u).abs() + (coeffs.gamma_prime)(u).abs())
        .fold(0.0, f64::max);
    let inf_cp_u0 = u0
        .iter()
        .map(|&u| (coeffs.c_prime)(u))
        .fold(f64::INFINITY, f64::min);

    let mut checks = vec![
        AssumptionCheck {
            name: "speed-bounds",
            pass: cmin > 0.0 && cmin >= b.c1 - tol && cmax <= b.c2 + tol,
            extremal: cmin,
            detail: format!("c in [{cmin:.6e}, {cmax:.6e}], declared [{}, {}]", b.c1, b.c2),
        },
        AssumptionCheck {
            name: "speed-slope",
            pass: cpmin >= -tol && cpmax <= b.c3 + tol,
            extremal: cpmin,
            detail: format!("c' in [{cpmin:.6e}, {cpmax:.6e}], declared [0, {}]", b.c3),
        },
        AssumptionCheck {
            name: "friction-bounds",
            pass: gmin > 0.0 && gmin >= b.gamma1 - tol && gmax <= b.gamma2 + tol,
            extremal: gmin,
            detail: format!(
                "gamma in [{gmin:.6e}, {gmax:.6e}], declared [{}, {}]",
                b.gamma1, b.gamma2
            ),
        },
        AssumptionCheck {
            name: "source-lipschitz",
            pass: lip <= b.lipschitz + 1e-9,
            extremal: lip,
            detail: format!("max |f'| proxy {lip:.6e}, declared L = {}", b.lipschitz),
        },
        AssumptionCheck {
            name: "curvature-bound",
            pass: sup_cg.is_finite(),
            extremal: sup_cg,
            detail: format!("sup |c''| + |gamma'| = {sup_cg:.6e}"),
        },
        AssumptionCheck {
            name: "kappa",
            pass: coeffs.kappa.tail_min > -1.0,
            extremal: coeffs.kappa.tail_min,
            detail: format!(
                "liminf proxy {:.6e} (global min {:.6e}, ubar {})",
                coeffs.kappa.tail_min, coeffs.kappa.global_min, coeffs.ubar
            ),
        },
        AssumptionCheck {
            name: "initial-slope-positive",
            pass: inf_cp_u0 > 0.0,
            extremal: inf_cp_u0,
            detail: format!("inf_x c'(u0(x)) = {inf_cp_u0:.6e}"),
        },
    ];
    let u0_min = u0.min();
    let u0_max = u0.max();
    checks.push(AssumptionCheck {
        name: "initial-in-range",
        pass: u0_min >= range.0 && u0_max <= range.1,
        extremal: u0_max.abs().max(u0_min.abs()),
        detail: format!("u0 in [{u0_min:.6e}, {u0_max:.6e}]"),
    });
    AssumptionReport {
        checks,
        kappa: coeffs.kappa,
    }
}

/// Natural cubic spline, constant extension outside the knots.
#[derive(Debug, Clone)]
struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    fn natural(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut sub = vec![0.0; k];
            let mut diag = vec![0.0; k];
            let mut sup = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                sub[i - 1] = h0;
                diag[i - 1] = 2.0 * (h0 + h1);
                sup[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            let inner = crate::linalg::solve_tridiagonal(&sub, &diag, &sup, &rhs)?;
            m[1..n - 1].copy_from_slice(&inner);
        }
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    /// Value (`d = 0`) or derivative of order `d` at `t`.
    fn eval(&self, t: f64, d: usize) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return if d == 0 { self.y[0] } else { 0.0 };
        }
        if t >= self.x[n - 1] {
            return if d == 0 { self.y[n - 1] } else { 0.0 };
        }
        let i = match self.x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        match d {
            0 => a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0,
            1 => (y1 - y0) / h + (-(3.0 * a * a - 1.0) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0,
            _ => a * m0 + b * m1,
        }
    }
}
