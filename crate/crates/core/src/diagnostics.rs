//! Energy ledger, balance and correction-term residuals, ensemble statistics,
//! defect-measure estimates, limit distances and the discrete Ito-formula
//! checks.

use std::fmt::Write as _;

use crate::coeffs::{gauss_legendre, ModelCoefficients};
use crate::error::{Error, Result};
use crate::grid::{Field, PeriodicGrid};
use crate::noise::WienerPath;
use crate::wave::{StepTerms, ThetaRecord, WaveSnapshot};

/// Running accumulators of the energy balance at one time level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerRow {
    pub t: f64,
    /// `E = int (R^2 + S^2)`.
    pub energy: f64,
    /// `int_0^t int gamma u_check_t^2`.
    pub frictional: f64,
    /// `D_chi`.
    pub truncation: f64,
    /// `2 ||q^eps||_{L^1} t`.
    pub q_input: f64,
    /// `4 mu int_0^t int u_check_t f(u_check)`.
    pub forcing: f64,
    pub martingale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    pub mu: f64,
    pub q_eps_l1: f64,
    pub rows: Vec<LedgerRow>,
}

impl EnergyLedger {
    pub fn new(mu: f64, q_eps_l1: f64, e0: f64) -> Self {
        Self {
            mu,
            q_eps_l1,
            rows: vec![LedgerRow {
                t: 0.0,
                energy: e0,
                frictional: 0.0,
                truncation: 0.0,
                q_input: 0.0,
                forcing: 0.0,
                martingale: 0.0,
            }],
        }
    }

    pub fn push(&mut self, t: f64, energy: f64, terms: &StepTerms) {
        let last = *self.rows.last().expect("ledger has an initial row");
        self.rows.push(LedgerRow {
            t,
            energy,
            frictional: last.frictional + terms.frictional,
            truncation: last.truncation + terms.truncation,
            q_input: 2.0 * self.q_eps_l1 * t,
            forcing: last.forcing + terms.forcing,
            martingale: last.martingale + terms.martingale,
        });
    }

    /// Signed defect `LHS - RHS` of the balance at row `i`.
    pub fn signed_residual(&self, i: usize) -> f64 {
        let r = &self.rows[i];
        let e0 = self.rows[0].energy;
        let mu = self.mu;
        let lhs = mu * r.energy + 4.0 * mu * r.frictional + r.truncation;
        let rhs = mu * e0 + r.q_input + r.forcing + r.martingale;
        lhs - rhs
    }

    pub fn residuals(&self) -> Vec<f64> {
        (0..self.rows.len()).map(|i| self.signed_residual(i).abs()).collect()
    }

    /// `(sup_t sqrt(mu) E, sup_t mu E)`.
    pub fn energy_scaling(&self) -> (f64, f64) {
        let sup = self.rows.iter().map(|r| r.energy).fold(0.0, f64::max);
        (self.mu.sqrt() * sup, self.mu * sup)
    }
}

/// `|mu E(t) + 4 mu Gamma~(t) + D_chi(t) - mu E(0) - 2||q^eps|| t - forcing - M(t)|`
/// at the last ledger row with time `<= t`.
pub fn energy_balance_residual(ledger: &EnergyLedger, t: f64) -> Result<f64> {
    let last = ledger.rows.last().expect("ledger has an initial row").t;
    let tol = 1e-9 * last.max(1.0);
    if t > last + tol || t < 0.0 {
        return Err(Error::InvalidInput(format!(
            "time {t} outside the ledger window [0, {last}]"
        )));
    }
    let i = ledger.rows.partition_point(|r| r.t <= t + tol) - 1;
    Ok(ledger.signed_residual(i).abs())
}

/// `int_0^T |sqrt(mu) (Theta_{n+1} - Theta_n)/dt - (alpha_n + beta_n Theta_n)| dt`.
pub fn theta_residual_l1(records: &[ThetaRecord], mu: f64) -> f64 {
    let sq = mu.sqrt();
    records
        .windows(2)
        .map(|w| {
            let dt = w[1].t - w[0].t;
            let lhs = sq * (w[1].theta - w[0].theta) / dt;
            (lhs - (w[0].alpha + w[0].beta * w[0].theta)).abs() * dt
        })
        .sum()
}

/// Order statistics and moments of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::NotEnoughData {
            what: "ensemble values",
            need: 1,
            got: 0,
        });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "ensemble values",
            index: i,
        });
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(Summary {
        n,
        mean,
        stderr,
        median: quantile(&sorted, 0.5),
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::NotEnoughData {
            what: "points for a slope fit",
            need: 2,
            got: x.len().min(y.len()),
        });
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Which statistic the slope is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeBasis {
    Median,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub label: String,
    pub parameters: Vec<f64>,
    pub stats: Vec<Summary>,
    pub basis: SlopeBasis,
    /// `None` when the data cannot be fitted (a zero statistic).
    pub slope: Option<f64>,
}

impl ConvergenceReport {
    /// Parameters must be strictly decreasing and samples nonnegative.
    pub fn new(
        label: impl Into<String>,
        parameters: Vec<f64>,
        samples: &[Vec<f64>],
        basis: SlopeBasis,
    ) -> Result<Self> {
        if parameters.len() != samples.len() {
            return Err(Error::LengthMismatch {
                expected: parameters.len(),
                got: samples.len(),
            });
        }
        if parameters.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidInput(
                "convergence parameters must be strictly decreasing".into(),
            ));
        }
        if samples.iter().flatten().any(|v| *v < 0.0) {
            return Err(Error::InvalidInput("distances must be nonnegative".into()));
        }
        let stats = samples
            .iter()
            .map(|s| summarize(s))
            .collect::<Result<Vec<_>>>()?;
        let ys: Vec<f64> = stats
            .iter()
            .map(|s| match basis {
                SlopeBasis::Median => s.median,
                SlopeBasis::Mean => s.mean,
            })
            .collect();
        let slope = if parameters.len() >= 2 {
            loglog_slope(&parameters, &ys).ok()
        } else {
            None
        };
        Ok(Self {
            label: label.into(),
            parameters,
            stats,
            basis,
            slope,
        })
    }

    pub fn medians(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.median).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.stats.iter().map(|s| s.mean).collect()
    }

    /// `parameter,median,q25,q75,stderr` rows plus a slope footer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("parameter,median,q25,q75,stderr\n");
        for (p, s) in self.parameters.iter().zip(&self.stats) {
            let _ = writeln!(
                out,
                "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                p, s.median, s.q25, s.q75, s.stderr
            );
        }
        match self.slope {
            Some(v) => {
                let _ = writeln!(out, "slope,{v:.12e},,,");
            }
            None => out.push_str("slope,nan,,,\n"),
        }
        out
    }

    /// Two-column `parameter value` curve of the fitted statistic.
    pub fn to_dat(&self) -> String {
        let mut out = format!("# {} ({:?})\n", self.label, self.basis);
        for (p, s) in self.parameters.iter().zip(&self.stats) {
            let y = match self.basis {
                SlopeBasis::Median => s.median,
                SlopeBasis::Mean => s.mean,
            };
            let _ = writeln!(out, "{p:.12e} {y:.12e}");
        }
        out
    }
}

/// Nonnegative space-time test function sampled on snapshot times.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub time: Vec<f64>,
    pub space: Field,
}

impl TestFunction {
    /// `sin^2(pi t / T) * (1 + cos(2 pi (x - 1/2)))`, zero at both ends.
    pub fn bump(times: &[f64], grid: &PeriodicGrid) -> Self {
        let t_end = *times.last().unwrap_or(&1.0);
        let time = times
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == 0 || i + 1 == times.len() {
                    0.0
                } else {
                    (std::f64::consts::PI * t / t_end).sin().powi(2)
                }
            })
            .collect();
        let space = grid.sample(|x| 1.0 + (2.0 * std::f64::consts::PI * (x - 0.5)).cos());
        Self { time, space }
    }

    pub fn zero(n_times: usize, grid: &PeriodicGrid) -> Self {
        Self {
            time: vec![0.0; n_times],
            space: grid.zeros(),
        }
    }

    fn validate(&self, n_times: usize) -> Result<()> {
        if self.time.len() != n_times {
            return Err(Error::LengthMismatch {
                expected: n_times,
                got: self.time.len(),
            });
        }
        if self.time.iter().chain(self.space.iter()).any(|w| *w < 0.0) {
            return Err(Error::InvalidInput("test function must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Trapezoid in time of per-snapshot spatial integrals.
fn time_trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// `int int (2 mu gamma(u) u_check_t^2 - q) psi` for one wave trajectory.
pub fn defect_integral(
    snapshots: &[WaveSnapshot],
    coeffs: &ModelCoefficients,
    q: &Field,
    mu: f64,
    psi: &TestFunction,
    grid: &PeriodicGrid,
) -> Result<f64> {
    psi.validate(snapshots.len())?;
    let times: Vec<f64> = snapshots.iter().map(|s| s.t).collect();
    let values: Vec<f64> = snapshots
        .iter()
        .zip(&psi.time)
        .map(|(s, wt)| {
            if *wt == 0.0 {
                return 0.0;
            }
            let k = 0.5 / mu.sqrt();
            let mut acc = 0.0;
            for j in 0..grid.n() {
                let ut = k * (s.r[j] + s.s[j]);
                acc += (2.0 * mu * (coeffs.gamma)(s.u[j]) * ut * ut - q[j]) * psi.space[j];
            }
            wt * grid.dx() * acc
        })
        .collect();
    Ok(time_trapezoid(&times, &values))
}

/// `<a_hat, psi>` with `a_hat = c'(u)(mu gamma u_check_t^2 - q/2)/(c gamma)`.
pub fn defect_field_integral(
    snapshots: &[WaveSnapshot],
    coeffs: &ModelCoefficients,
    q: &Field,
    mu: f64,
    psi: &TestFunction,
    grid: &PeriodicGrid,
) -> Result<f64> {
    psi.validate(snapshots.len())?;
    let times: Vec<f64> = snapshots.iter().map(|s| s.t).collect();
    let values: Vec<f64> = snapshots
        .iter()
        .zip(&psi.time)
        .map(|(s, wt)| {
            if *wt == 0.0 {
                return 0.0;
            }
            let k = 0.5 / mu.sqrt();
            let mut acc = 0.0;
            for j in 0..grid.n() {
                let u = s.u[j];
                let cp = (coeffs.c_prime)(u);
                if cp == 0.0 {
                    continue;
                }
                let ut = k * (s.r[j] + s.s[j]);
                let g = (coeffs.gamma)(u);
                acc += cp * (mu * g * ut * ut - 0.5 * q[j]) / ((coeffs.c)(u) * g) * psi.space[j];
            }
            wt * grid.dx() * acc
        })
        .collect();
    Ok(time_trapezoid(&times, &values))
}

/// Per-`mu` ensemble summaries of `(defect integral)^+`.
pub fn defect_decay(mus: &[f64], positive_parts: &[Vec<f64>]) -> Result<ConvergenceReport> {
    ConvergenceReport::new("defect positive part", mus.to_vec(), positive_parts, SlopeBasis::Mean)
}

/// `(||a - b||_{L^2(0,T; H^delta)}, ||a - b||_{L^p(0,T; L^2)})` by trapezoid
/// in time over matching snapshots.
pub fn sk_distance(
    times: &[f64],
    a: &[Field],
    b: &[Field],
    grid: &PeriodicGrid,
    delta: f64,
    p_exp: f64,
) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() != times.len() {
        return Err(Error::LengthMismatch {
            expected: times.len(),
            got: a.len().min(b.len()),
        });
    }
    if !(p_exp >= 1.0) {
        return Err(Error::InvalidInput(format!("p must be >= 1, got {p_exp}")));
    }
    let mut h2 = Vec::with_capacity(a.len());
    let mut lp = Vec::with_capacity(a.len());
    for (fa, fb) in a.iter().zip(b) {
        grid.check(fa)?;
        grid.check(fb)?;
        let d = fa.zip_map(fb, |x, y| x - y);
        h2.push(grid.sobolev_norm(&d, delta)?.powi(2));
        lp.push(grid.l2_norm(&d).powf(p_exp));
    }
    Ok((
        time_trapezoid(times, &h2).sqrt(),
        time_trapezoid(times, &lp).powf(1.0 / p_exp),
    ))
}

/// Test nonlinearity for the Ito checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ItoPsi {
    Identity,
    One,
    Sine,
}

impl ItoPsi {
    fn eval(self, u: f64) -> (f64, f64, f64) {
        match self {
            Self::Identity => (u, 1.0, 0.0),
            Self::One => (1.0, 0.0, 0.0),
            Self::Sine => (u.sin(), u.cos(), -u.sin()),
        }
    }
}

/// Drift of the synthetic equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ItoDrift {
    Zero,
    /// Periodic second difference `u_xx`.
    Laplacian,
}

/// Configuration shared by both Ito checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ItoSetup {
    pub grid: PeriodicGrid,
    pub sigma: Vec<Field>,
    /// Constant noise multiplier `H`.
    pub h: f64,
    pub psi: ItoPsi,
    pub drift: ItoDrift,
    pub u0: Field,
    /// Spatial test function `phi(x)`.
    pub phi: Field,
    pub t_final: f64,
    /// Coarsest step; level `l` uses `dt0 / 2^l` on the bridge-refined path.
    pub dt0: f64,
    pub levels: u32,
    pub paths: usize,
    pub seed: u64,
    /// `Gamma(u) = gamma_lin u + gamma_sin sin(u)` for the second check.
    pub gamma_lin: f64,
    pub gamma_sin: f64,
    /// Initial velocity for the second check.
    pub v0: Field,
    /// Second check pairs with `phi(t, x) = (1 + phi_rate t) phi(x)`.
    pub phi_rate: f64,
}

fn drift(grid: &PeriodicGrid, kind: ItoDrift, u: &[f64]) -> Vec<f64> {
    let n = grid.n();
    match kind {
        ItoDrift::Zero => vec![0.0; n],
        ItoDrift::Laplacian => {
            let k = (n * n) as f64;
            (0..n)
                .map(|j| k * (u[(j + 1) % n] - 2.0 * u[j] + u[(j + n - 1) % n]))
                .collect()
        }
    }
}

/// Signed discrete defect of the first Ito formula (time-independent `phi`)
/// along an Euler-Maruyama trajectory of `du = F dt + H sum sigma_k dbeta_k`.
pub fn ito1_residual(setup: &ItoSetup, path: &WienerPath) -> f64 {
    let g = &setup.grid;
    let n = g.n();
    let dx = g.dx();
    let dt = path.dt;
    let mut u = setup.u0.0.clone();
    let q: Vec<f64> = (0..n)
        .map(|j| setup.sigma.iter().map(|s| s[j] * s[j]).sum())
        .collect();
    let start: f64 = (0..n).map(|j| setup.psi.eval(u[j]).0 * setup.phi[j]).sum::<f64>() * dx;
    let mut rhs = 0.0;
    for step in 0..path.n_steps {
        let f = drift(g, setup.drift, &u);
        let dw = path.step(step);
        for j in 0..n {
            let (_, d1, d2) = setup.psi.eval(u[j]);
            let noise: f64 = setup.sigma.iter().zip(dw).map(|(s, w)| s[j] * w).sum::<f64>() * setup.h;
            rhs += dx
                * setup.phi[j]
                * (d1 * f[j] * dt + d1 * noise + 0.5 * d2 * q[j] * setup.h * setup.h * dt);
            u[j] += f[j] * dt + noise;
        }
    }
    let end: f64 = (0..n).map(|j| setup.psi.eval(u[j]).0 * setup.phi[j]).sum::<f64>() * dx;
    end - start - rhs
}


/// Signed discrete defect of the second Ito formula along the scheme
/// `u_{n+1} = u_n + v_n dt`,
/// `v_{n+1} = v_n - (Gamma(u_{n+1}) - Gamma(u_n)) + F(u_{n+1}) dt + H sum sigma_k dbeta_k`.
pub fn ito2_residual(setup: &ItoSetup, path: &WienerPath) -> f64 {
    let g = &setup.grid;
    let n = g.n();
    let dx = g.dx();
    let dt = path.dt;
    let (gl, gs) = (setup.gamma_lin, setup.gamma_sin);
    let gamma = |u: f64| gl * u + gs * u.sin();
    let psi = setup.psi;
    let gamma_tilde = |u: f64| gauss_legendre(|s| psi.eval(s).0 * (gl + gs * s.cos()), 0.0, u, 4);
    let rate = setup.phi_rate;
    let phi_time = |t: f64| (1.0 + rate * t, rate);
    let mut u = setup.u0.0.clone();
    let mut v = setup.v0.0.clone();
    let boundary = |u: &[f64], v: &[f64], t: f64| -> f64 {
        let (pt, _) = phi_time(t);
        (0..n)
            .map(|j| (psi.eval(u[j]).0 * v[j] + gamma_tilde(u[j])) * pt * setup.phi[j])
            .sum::<f64>()
            * dx
    };
    let start = boundary(&u, &v, 0.0);
    let mut rhs = 0.0;
    for step in 0..path.n_steps {
        let t = step as f64 * dt;
        let (pt, pt_t) = phi_time(t);
        let u_next: Vec<f64> = (0..n).map(|j| u[j] + v[j] * dt).collect();
        let f = drift(g, setup.drift, &u_next);
        let dw = path.step(step);
        for j in 0..n {
            let (p0, p1, _) = psi.eval(u[j]);
            let phi = setup.phi[j];
            let noise: f64 = setup.sigma.iter().zip(dw).map(|(s, w)| s[j] * w).sum::<f64>() * setup.h;
            rhs += dx
                * (p0 * v[j] * pt_t * phi * dt
                    + p1 * v[j] * v[j] * pt * phi * dt
                    + pt_t * phi * gamma_tilde(u[j]) * dt
                    + p0 * f[j] * pt * phi * dt
                    + p0 * noise * pt * phi);
            v[j] += -(gamma(u_next[j]) - gamma(u[j])) + f[j] * dt + noise;
        }
        u = u_next;
    }
    let end = boundary(&u, &v, path.n_steps as f64 * dt);
    end - start - rhs
}

/// Mean-square residual per level on bridge-coupled paths, slope fitted to
/// the mean.
pub fn ito_check(
    setup: &ItoSetup,
    residual: fn(&ItoSetup, &WienerPath) -> f64,
    label: &str,
    workers: Option<usize>,
) -> Result<ConvergenceReport> {
    let k = setup.sigma.len();
    let n0 = (setup.t_final / setup.dt0).round() as usize;
    if n0 == 0 || setup.levels == 0 || setup.paths == 0 {
        return Err(Error::InvalidInput("Ito check needs steps, levels and paths".into()));
    }
    let dts: Vec<f64> = (0..setup.levels).map(|l| setup.dt0 / f64::powi(2.0, l as i32)).collect();
    let per_path: Vec<Vec<f64>> = crate::experiments::ensemble::map_paths(setup.paths, setup.seed, workers, |_, seed| {
        let mut path = crate::noise::sample_path(k, seed, setup.dt0, n0)?;
        let mut out = Vec::with_capacity(setup.levels as usize);
        for l in 0..setup.levels {
            if l > 0 {
                path = path.refine();
            }
            out.push(residual(setup, &path).powi(2));
        }
        Ok(out)
    })?;
    let samples: Vec<Vec<f64>> = (0..setup.levels as usize)
        .map(|l| per_path.iter().map(|p| p[l]).collect())
        .collect();
    ConvergenceReport::new(label, dts, &samples, SlopeBasis::Mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid() -> PeriodicGrid {
        PeriodicGrid::new(16).unwrap()
    }

    #[test]
    fn empty_ledger_has_zero_residual() {
        let l = EnergyLedger::new(0.1, 0.3, 2.0);
        assert_eq!(energy_balance_residual(&l, 0.0).unwrap(), 0.0);
        assert!(energy_balance_residual(&l, 1.0).is_err());
    }

    #[test]
    fn summary_of_single_value() {
        let s = summarize(&[3.5]).unwrap();
        assert_eq!((s.mean, s.median, s.q25, s.q75, s.stderr), (3.5, 3.5, 3.5, 3.5, 0.0));
    }

    #[test]
    fn quartiles_and_slope() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!((s.median, s.q25, s.q75), (3.0, 2.0, 4.0));
        let x = [1.0, 0.5, 0.25];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn report_rejects_increasing_parameters() {
        assert!(ConvergenceReport::new("x", vec![0.1, 0.2], &[vec![1.0], vec![1.0]], SlopeBasis::Median).is_err());
        assert!(ConvergenceReport::new("x", vec![0.2, 0.1], &[vec![-1.0], vec![1.0]], SlopeBasis::Median).is_err());
        let r = ConvergenceReport::new("x", vec![0.2, 0.1], &[vec![2.0], vec![1.0]], SlopeBasis::Median).unwrap();
        assert!((r.slope.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.to_csv().starts_with("parameter,median,q25,q75,stderr\n"));
        assert!(r.to_csv().contains("slope,"));
    }

    #[test]
    fn sk_distance_identities() {
        let g = grid();
        let times = vec![0.0, 0.5, 1.0, 1.5];
        let a: Vec<Field> = times.iter().map(|t| g.sample(|x| (2.0 * PI * x).sin() * t)).collect();
        let (h, l) = sk_distance(&times, &a, &a, &g, 0.5, 2.0).unwrap();
        assert_eq!((h, l), (0.0, 0.0));
        let shift = 0.3;
        let b: Vec<Field> = a.iter().map(|f| f.map(|v| v + shift)).collect();
        for p in [1.0, 2.0, 3.0] {
            let (_, l) = sk_distance(&times, &b, &a, &g, 0.5, p).unwrap();
            assert!((l - shift * 1.5_f64.powf(1.0 / p)).abs() < 1e-12);
        }
    }

    #[test]
    fn sk_distance_symmetry_and_triangle() {
        use rand::{Rng, SeedableRng};
        let g = grid();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let times = vec![0.0, 0.1, 0.2];
        let mut traj = || -> Vec<Field> {
            (0..3).map(|_| Field((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect()
        };
        for _ in 0..20 {
            let (a, b, c) = (traj(), traj(), traj());
            let ab = sk_distance(&times, &a, &b, &g, 0.5, 2.0).unwrap();
            let ba = sk_distance(&times, &b, &a, &g, 0.5, 2.0).unwrap();
            assert_eq!(ab, ba);
            let bc = sk_distance(&times, &b, &c, &g, 0.5, 2.0).unwrap();
            let ac = sk_distance(&times, &a, &c, &g, 0.5, 2.0).unwrap();
            assert!(ac.0 <= ab.0 + bc.0 + 1e-12);
            assert!(ac.1 <= ab.1 + bc.1 + 1e-12);
        }
    }

    fn setup(psi: ItoPsi, drift: ItoDrift, h: f64) -> ItoSetup {
        let g = grid();
        ItoSetup {
            sigma: vec![g.sample(|x| 0.1 * (2.0 * PI * x).sin())],
            h,
            psi,
            drift,
            u0: g.sample(|x| 0.5 + 0.2 * (2.0 * PI * x).cos()),
            phi: g.sample(|x| 1.0 + 0.5 * (2.0 * PI * x).cos()),
            t_final: 0.1,
            dt0: 1e-3,
            levels: 3,
            paths: 4,
            seed: 9,
            gamma_lin: 0.0,
            gamma_sin: 0.0,
            v0: g.zeros(),
            phi_rate: 0.5,
            grid: g,
        }
    }

    #[test]
    fn ito1_linear_psi_is_exact() {
        // Psi(u) = u: the identity is the defining Euler-Maruyama sum itself.
        let s = setup(ItoPsi::Identity, ItoDrift::Laplacian, 1.0);
        let path = crate::noise::sample_path(1, 3, 1e-3, 100).unwrap();
        assert!(ito1_residual(&s, &path).abs() < 1e-12);
    }

    #[test]
    fn ito1_without_noise_is_chain_rule_order_dt() {
        let s = setup(ItoPsi::Sine, ItoDrift::Laplacian, 0.0);
        let r1 = ito1_residual(&s, &crate::noise::sample_path(1, 3, 1e-3, 100).unwrap()).abs();
        let r2 = ito1_residual(&s, &crate::noise::sample_path(1, 3, 5e-4, 200).unwrap()).abs();
        assert!(r1 > 0.0 && (r1 / r2 - 2.0).abs() < 0.2, "{r1} {r2}");
    }

    #[test]
    fn ito2_trivial_cases() {
        // u_t = 0, F = 0, H = 0: both sides constant.
        let s = setup(ItoPsi::Sine, ItoDrift::Zero, 0.0);
        let path = crate::noise::sample_path(1, 3, 1e-3, 100).unwrap();
        assert!(ito2_residual(&s, &path).abs() < 1e-13);
        // Psi = 1, Gamma = 0, phi(x) only: the defining weak form, summed
        // exactly by the scheme.
        let mut s = setup(ItoPsi::One, ItoDrift::Laplacian, 1.0);
        s.phi_rate = 0.0;
        s.v0 = s.grid.sample(|x| (2.0 * PI * x).sin());
        let path = crate::noise::sample_path(1, 3, 1e-3, 100).unwrap();
        assert!(ito2_residual(&s, &path).abs() < 1e-12);
    }

    #[test]
    fn theta_residual_of_exact_linear_law_vanishes() {
        let mu: f64 = 0.04;
        let (alpha, beta) = (0.3, -0.5);
        let dt = 1e-3;
        let mut th = 0.2;
        let mut recs = Vec::new();
        for n in 0..50 {
            recs.push(ThetaRecord { t: n as f64 * dt, theta: th, alpha, beta });
            th += dt * (alpha + beta * th) / mu.sqrt();
        }
        assert!(theta_residual_l1(&recs, mu) < 1e-12);
    }
}
