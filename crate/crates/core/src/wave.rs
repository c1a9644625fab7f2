//! Riemann-invariant integrator for the truncated, mollified damped wave
//! system, with the correction term `Theta` and the reconstructions of `u`
//! and `u_check`.
//!
//! One step is a Lie split:
//! * A (explicit): upwind transport of `R` with speed `c/sqrt(mu)` and of `S`
//!   with speed `-c/sqrt(mu)`, plus the `c~'` source brackets and `f(u_check)`.
//! * B (exponential): with `gamma` frozen, `Sigma = R + S` relaxes by
//!   `exp(-gamma dt / mu)` and receives the exact Ornstein-Uhlenbeck noise;
//!   `Delta = S - R` is untouched, so it never sees the noise.

use std::sync::Arc;

use crate::coeffs::PrimitiveMaps;
use crate::diagnostics::EnergyLedger;
use crate::error::{Error, Result};
use crate::grid::{Field, PeriodicGrid};
use crate::noise::{NoiseSpec, WienerPath};

/// Cut-off `chi_eps(xi) = (xi - 1/eps)^2` for `xi >= 1/eps`, else 0.
pub fn chi_eps(xi: f64, eps: f64) -> f64 {
    let t = 1.0 / eps;
    if xi >= t {
        (xi - t) * (xi - t)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveParams {
    pub mu: f64,
    pub eps: f64,
    pub dt: f64,
    /// Transport CFL bound, at most 0.9.
    pub cfl: f64,
    /// Cut-off terms on or off.
    pub chi: bool,
    /// Friction on or off (off only for fixed-point tests).
    pub friction: bool,
}

impl WaveParams {
    pub fn new(mu: f64, eps: f64, dt: f64) -> Self {
        Self {
            mu,
            eps,
            dt,
            cfl: 0.9,
            chi: true,
            friction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlowUp {
    pub t: f64,
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    pub r: Field,
    pub s: Field,
    pub u: Field,
    pub u_check: Field,
    /// `u_0^eps(0)`.
    pub u0_at_0: f64,
    /// Running `int_0^t (R+S)/(2 sqrt(mu)) (s, 0) ds`.
    pub u_at_0_integral: f64,
    pub theta: f64,
    pub t: f64,
    pub step: usize,
    pub mu: f64,
    pub eps: f64,
}

impl WaveState {
    /// `u_check_t = (R + S) / (2 sqrt(mu))`.
    pub fn u_check_t(&self) -> Field {
        let k = 0.5 / self.mu.sqrt();
        self.r.zip_map(&self.s, |r, s| k * (r + s))
    }

    /// `E = int (R^2 + S^2)`.
    pub fn energy(&self, grid: &PeriodicGrid) -> f64 {
        grid.inner(&self.r, &self.r) + grid.inner(&self.s, &self.s)
    }

    /// `(sup_x R^-, sup_x S^-)`: negative parts of `sqrt(mu) u_t -+ c u_x`.
    pub fn negative_parts(&self) -> (f64, f64) {
        ((-self.r.min()).max(0.0), (-self.s.min()).max(0.0))
    }
}

/// Energy-balance increments of one step, all evaluated with the quadrature
/// used by the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepTerms {
    /// Increment of `int int gamma u_check_t^2`.
    pub frictional: f64,
    /// Increment of `D_chi`.
    pub truncation: f64,
    /// Increment of `4 mu int int u_check_t f(u_check)`.
    pub forcing: f64,
    /// Increment of the martingale `M`.
    pub martingale: f64,
}

/// Scalars of the `Theta` equation at the start of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaRecord {
    pub t: f64,
    pub theta: f64,
    /// `alpha_chi = (1/2) int c~'(chi(R) - chi(S))`.
    pub alpha: f64,
    /// `beta = int c~'(R + S)`.
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Advanced(StepTerms),
    BlowUp(BlowUp),
}

#[derive(Clone)]
pub struct WaveSolver {
    pub grid: PeriodicGrid,
    pub prims: Arc<PrimitiveMaps>,
    pub noise: Arc<NoiseSpec>,
    pub params: WaveParams,
}

impl std::fmt::Debug for WaveSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WaveSolver").field("params", &self.params).finish()
    }
}

impl WaveSolver {
    /// Checks `dt <= cfl sqrt(mu) dx / c2` with `cfl <= 0.9`.
    pub fn new(
        grid: PeriodicGrid,
        prims: Arc<PrimitiveMaps>,
        noise: Arc<NoiseSpec>,
        params: WaveParams,
    ) -> Result<Self> {
        let WaveParams { mu, eps, dt, cfl, .. } = params;
        if !(mu > 0.0 && eps > 0.0 && dt > 0.0) {
            return Err(Error::InvalidInput(format!(
                "need mu, eps, dt > 0, got {mu}, {eps}, {dt}"
            )));
        }
        if !(cfl > 0.0 && cfl <= 0.9) {
            return Err(Error::InvalidInput(format!("cfl must lie in (0, 0.9], got {cfl}")));
        }
        let limit = cfl * mu.sqrt() * grid.dx() / prims.coeffs.bounds.c2;
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::Cfl { dt, limit });
        }
        if noise.grid != grid {
            return Err(Error::LengthMismatch {
                expected: grid.n(),
                got: noise.grid.n(),
            });
        }
        Ok(Self {
            grid,
            prims,
            noise,
            params,
        })
    }

    /// Largest admissible step for this grid, `mu` and `cfl`.
    pub fn cfl_limit(grid: &PeriodicGrid, mu: f64, c2: f64, cfl: f64) -> f64 {
        cfl * mu.sqrt() * grid.dx() / c2
    }

    /// Mollified initial invariants from `(u0, v0)`:
    /// `R0 = J(sqrt(mu) v0 - c(u0) u0')`, `S0 = J(sqrt(mu) v0 + c(u0) u0')`
    /// with `c(u0) u0' = C(u0)'` taken spectrally, and `u0^eps = C^{-1}(J C(u0))`.
    pub fn init_state(&self, u0: &Field, v0: &Field) -> Result<WaveState> {
        let g = &self.grid;
        g.check(u0)?;
        g.check(v0)?;
        let WaveParams { mu, eps, .. } = self.params;
        let cu0 = self.prims.apply(u0, |p, u| p.c_map(u))?;
        let cux = g.derivative(&cu0, crate::grid::DerivativeScheme::Spectral)?;
        let sq = mu.sqrt();
        let r0 = Field(v0.iter().zip(cux.iter()).map(|(v, d)| sq * v - d).collect());
        let s0 = Field(v0.iter().zip(cux.iter()).map(|(v, d)| sq * v + d).collect());
        let r = g.mollify(&r0, eps)?;
        let s = g.mollify(&s0, eps)?;
        let u_eps = self.prims.apply(&g.mollify(&cu0, eps)?, |p, y| p.c_inv(y))?;
        let theta = 0.5 * (g.integral(&s) - g.integral(&r));
        Ok(WaveState {
            r,
            s,
            u0_at_0: u_eps[0],
            u: u_eps.clone(),
            u_check: u_eps,
            u_at_0_integral: 0.0,
            theta,
            t: 0.0,
            step: 0,
            mu,
            eps,
        })
    }

    /// `alpha_chi`, `beta` of the current state.
    pub fn theta_record(&self, state: &WaveState) -> ThetaRecord {
        let g = &self.grid;
        let eps = self.params.eps;
        let chi = self.params.chi;
        let mut alpha = 0.0;
        let mut beta = 0.0;
        for j in 0..g.n() {
            let ct = self.prims.tilde_c_prime(state.u[j]);
            if chi {
                alpha += ct * (chi_eps(state.r[j], eps) - chi_eps(state.s[j], eps));
            }
            beta += ct * (state.r[j] + state.s[j]);
        }
        ThetaRecord {
            t: state.t,
            theta: state.theta,
            alpha: 0.5 * g.dx() * alpha,
            beta: g.dx() * beta,
        }
    }

    /// Advances one step with the per-mode increments `dw`.
    pub fn step(&self, state: &mut WaveState, dw: &[f64]) -> Result<StepOutcome> {
        let k = self.noise.k();
        if dw.len() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                got: dw.len(),
            });
        }
        let g = &self.grid;
        let n = g.n();
        let dx = g.dx();
        let WaveParams {
            mu,
            eps,
            dt,
            chi,
            friction,
            ..
        } = self.params;
        let sq = mu.sqrt();
        let co = &self.prims.coeffs;
        let lam = dt / (sq * dx);
        let h = dt / sq;

        // Substep A, all coefficients at the state of step n.
        let mut r_a = vec![0.0; n];
        let mut s_a = vec![0.0; n];
        let mut terms = StepTerms::default();
        let mut gam = vec![0.0; n];
        for j in 0..n {
            let u = state.u[j];
            let c = (co.c)(u);
            let ct = self.prims.tilde_c_prime(u);
            let fu = (co.f)(state.u_check[j]);
            let (r, s) = (state.r[j], state.s[j]);
            let (chi_r, chi_s) = if chi {
                (chi_eps(r, eps), chi_eps(s, eps))
            } else {
                (0.0, 0.0)
            };
            let rm = state.r[(j + n - 1) % n];
            let sp = state.s[(j + 1) % n];
            r_a[j] = r - lam * c * (r - rm)
                + h * (ct * (r * r - s * s - chi_r + 2.0 * r * state.theta) + fu);
            s_a[j] = s + lam * c * (sp - s)
                + h * (ct * (s * s - r * r - chi_s - 2.0 * s * state.theta) + fu);
            terms.truncation += 2.0 * sq * dt * dx * ct * (r * chi_r + s * chi_s);
            terms.forcing += 2.0 * sq * dt * dx * (r + s) * fu;
            gam[j] = if friction { (co.gamma)(u) } else { 0.0 };
        }

        // Substep B, exact frozen-coefficient relaxation of Sigma.
        let inv_sqrt_dt = 1.0 / dt.sqrt();
        for j in 0..n {
            let sigma_old = state.r[j] + state.s[j];
            let sigma_a = r_a[j] + s_a[j];
            let delta = s_a[j] - r_a[j];
            let a = gam[j] * dt / mu;
            let (decay, noise_scale, relax) = if a > 0.0 {
                let e2 = (-2.0 * a).exp_m1();
                (
                    (-a).exp(),
                    (-2.0 * e2 / gam[j]).sqrt() * inv_sqrt_dt,
                    -e2 / (2.0 * a),
                )
            } else {
                (1.0, 2.0 / sq, 1.0)
            };
            let mut xi = 0.0;
            for (m, w) in dw.iter().enumerate() {
                xi += self.noise.sigma_eps[m][j] * w;
            }
            xi *= noise_scale;
            let sigma = decay * sigma_a + xi;
            terms.frictional += dx * gam[j] * sigma_a * sigma_a / (4.0 * mu) * relax * dt;
            terms.martingale += mu * dx * decay * sigma_a * xi;
            state.r[j] = 0.5 * (sigma - delta);
            state.s[j] = 0.5 * (sigma + delta);
            // Trapezoid in time; at j = 0 this is also the u(t, 0) update.
            let inc = dt * (sigma_old + sigma) / (4.0 * sq);
            state.u_check[j] += inc;
            if j == 0 {
                state.u_at_0_integral += inc;
            }
        }
        state.t += dt;
        state.step += 1;
        state.theta = 0.5 * (g.integral(&state.s) - g.integral(&state.r));

        if let Some(reason) = self.check_blow_up(state) {
            return Ok(StepOutcome::BlowUp(BlowUp {
                t: state.t,
                step: state.step,
                reason,
            }));
        }
        match self.reconstruct(state) {
            Ok(u) => state.u = u,
            Err(e @ Error::OutOfRange { .. }) => {
                return Ok(StepOutcome::BlowUp(BlowUp {
                    t: state.t,
                    step: state.step,
                    reason: e.to_string(),
                }))
            }
            Err(e) => return Err(e),
        }
        Ok(StepOutcome::Advanced(terms))
    }

    fn check_blow_up(&self, state: &WaveState) -> Option<String> {
        let bound = 10.0 / self.params.eps;
        for (name, f) in [("R", &state.r), ("S", &state.s)] {
            if let Some(j) = f.iter().position(|v| !v.is_finite()) {
                return Some(format!("non-finite {name} at node {j}"));
            }
        }
        let rmax = state.r.max_abs();
        if rmax > bound {
            return Some(format!("|R| = {rmax:.6e} exceeds 10/eps = {bound:.6e}"));
        }
        None
    }

    /// `u(x) = C^{-1}(C(u(t,0)) + int_0^x [(S-R)/2 - Theta])`.
    pub fn reconstruct(&self, state: &WaveState) -> Result<Field> {
        let g = &self.grid;
        let integrand: Vec<f64> = state
            .r
            .iter()
            .zip(state.s.iter())
            .map(|(r, s)| 0.5 * (s - r) - state.theta)
            .collect();
        let cum = g.cumulative_trapezoid(&integrand);
        let base = self.prims.c_map(state.u0_at_0 + state.u_at_0_integral)?;
        cum.iter()
            .map(|v| self.prims.c_inv(base + v))
            .collect::<Result<Vec<_>>>()
            .map(Field)
    }

    /// `max_x |c(u) u_x - ((S-R)/2 - Theta)|` with a centered `u_x`.
    pub fn reconstruction_defect(&self, state: &WaveState) -> Result<f64> {
        let ux = self
            .grid
            .derivative(&state.u, crate::grid::DerivativeScheme::Centered)?;
        let co = &self.prims.coeffs;
        let n = self.grid.n();
        let mut worst = 0.0_f64;
        for j in 0..n {
            // Compare at the same centered stencil: average the target too.
            let target = |i: usize| 0.5 * (state.s[i] - state.r[i]) - state.theta;
            let avg = 0.25 * (target((j + n - 1) % n) + 2.0 * target(j) + target((j + 1) % n));
            worst = worst.max(((co.c)(state.u[j]) * ux[j] - avg).abs());
        }
        Ok(worst)
    }

    /// Mean of the reconstruction integrand `(S-R)/2 - Theta`.
    pub fn closure_mean(&self, state: &WaveState) -> f64 {
        let g = &self.grid;
        0.5 * (g.integral(&state.s) - g.integral(&state.r)) - state.theta
    }
}

/// Correction-term diagnostic at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct XiDiagnostic {
    /// `Xi = (1/c(u)) int_0^x (zeta - zeta_bar)`.
    pub xi: Field,
    /// `sqrt(mu) (u_t - u_check_t)` by finite differences of two stored levels.
    pub xi_fd: Field,
    pub zeta: Field,
    pub zeta_bar: f64,
}

/// Builds both forms of `Xi` at the level `cur`, using `prev` (one step
/// earlier) for the time differences.
pub fn xi_diagnostic(solver: &WaveSolver, prev: &WaveState, cur: &WaveState) -> Result<XiDiagnostic> {
    if cur.step != prev.step + 1 {
        return Err(Error::NotEnoughData {
            what: "consecutive stored time levels",
            need: 2,
            got: 1,
        });
    }
    let g = &solver.grid;
    let eps = solver.params.eps;
    let chi = solver.params.chi;
    let zeta_at = |st: &WaveState| -> Field {
        Field(
            (0..g.n())
                .map(|j| {
                    let ct = solver.prims.tilde_c_prime(st.u[j]);
                    let (cr, cs) = if chi {
                        (chi_eps(st.r[j], eps), chi_eps(st.s[j], eps))
                    } else {
                        (0.0, 0.0)
                    };
                    ct * (0.5 * (cr - cs) + (st.r[j] + st.s[j]) * st.theta)
                })
                .collect(),
        )
    };
    let zeta = zeta_at(prev);
    let zeta_bar = g.integral(&zeta);
    let centered: Vec<f64> = zeta.iter().map(|z| z - zeta_bar).collect();
    let cum = g.cumulative_trapezoid(&centered);
    let co = &solver.prims.coeffs;
    let xi = Field(
        cum.iter()
            .zip(prev.u.iter())
            .map(|(v, u)| v / (co.c)(*u))
            .collect(),
    );
    let dt = cur.t - prev.t;
    let sq = prev.mu.sqrt();
    let xi_fd = Field(
        (0..g.n())
            .map(|j| {
                let ut = (cur.u[j] - prev.u[j]) / dt;
                let uct = (cur.u_check[j] - prev.u_check[j]) / dt;
                sq * (ut - uct)
            })
            .collect(),
    );
    Ok(XiDiagnostic {
        xi,
        xi_fd,
        zeta,
        zeta_bar,
    })
}

/// Stored snapshot of a wave run.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSnapshot {
    pub t: f64,
    pub step: usize,
    pub u: Field,
    pub u_check: Field,
    pub r: Field,
    pub s: Field,
    pub theta: f64,
}

impl WaveSnapshot {
    fn of(state: &WaveState) -> Self {
        Self {
            t: state.t,
            step: state.step,
            u: state.u.clone(),
            u_check: state.u_check.clone(),
            r: state.r.clone(),
            s: state.s.clone(),
            theta: state.theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveRun {
    pub snapshots: Vec<WaveSnapshot>,
    pub ledger: EnergyLedger,
    pub theta: Vec<ThetaRecord>,
    pub blow_up: Option<BlowUp>,
    pub final_state: WaveState,
}

/// Integrates over every step of `path`, storing a snapshot every `stride`
/// steps (step 0 included). Stops at the first blow-up.
pub fn run_wave(
    solver: &WaveSolver,
    u0: &Field,
    v0: &Field,
    path: &WienerPath,
    stride: usize,
) -> Result<WaveRun> {
    if stride == 0 {
        return Err(Error::InvalidInput("snapshot stride must be >= 1".into()));
    }
    if path.k != solver.noise.k() {
        return Err(Error::LengthMismatch {
            expected: solver.noise.k(),
            got: path.k,
        });
    }
    if (path.dt - solver.params.dt).abs() > 1e-12 * solver.params.dt {
        return Err(Error::InvalidInput(format!(
            "path dt {} differs from solver dt {}",
            path.dt, solver.params.dt
        )));
    }
    let mut state = solver.init_state(u0, v0)?;
    let mut ledger = EnergyLedger::new(
        solver.params.mu,
        solver.noise.q_eps_l1(),
        state.energy(&solver.grid),
    );
    let mut snapshots = vec![WaveSnapshot::of(&state)];
    let mut theta = Vec::with_capacity(path.n_steps + 1);
    let mut blow_up = None;
    for n in 0..path.n_steps {
        theta.push(solver.theta_record(&state));
        match solver.step(&mut state, path.step(n))? {
            StepOutcome::Advanced(terms) => {
                ledger.push(state.t, state.energy(&solver.grid), &terms);
            }
            StepOutcome::BlowUp(b) => {
                blow_up = Some(b);
                break;
            }
        }
        if state.step % stride == 0 {
            snapshots.push(WaveSnapshot::of(&state));
        }
    }
    if blow_up.is_none() {
        theta.push(solver.theta_record(&state));
    }
    Ok(WaveRun {
        snapshots,
        ledger,
        theta,
        blow_up,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{build_primitives, ModelCoefficients, DEFAULT_QUAD_STEP};
    use crate::noise::{build_noise, sample_path, ModeProfile};
    use std::f64::consts::PI;

    fn solver(co: ModelCoefficients, n: usize, mu: f64, eps: Option<f64>, modes: &[ModeProfile], cfl: f64) -> WaveSolver {
        let g = PeriodicGrid::new(n).unwrap();
        let eps = eps.unwrap_or(g.dx());
        let prims = Arc::new(build_primitives(&co, (-10.0, 10.0), DEFAULT_QUAD_STEP).unwrap());
        let noise = Arc::new(build_noise(modes, &g, eps, true).unwrap());
        let dt = WaveSolver::cfl_limit(&g, mu, co.bounds.c2, cfl);
        WaveSolver::new(g, prims, noise, WaveParams::new(mu, eps, dt)).unwrap()
    }

    fn unit() -> ModelCoefficients {
        ModelCoefficients::constant(1.0, 1.0).unwrap()
    }

    #[test]
    fn cut_off_values() {
        assert_eq!(chi_eps(2.0, 1.0), 1.0);
        assert_eq!(chi_eps(0.5, 1.0), 0.0);
        assert_eq!(chi_eps(3.0, 0.5), 1.0);
        assert!(chi_eps(3.0, 0.5) <= 3.0 * chi_eps(3.0, 0.5) * 0.5);
    }

    #[test]
    fn rejects_cfl_violation() {
        let s = solver(unit(), 16, 0.01, None, &[], 0.9);
        let mut p = s.params;
        p.dt *= 1.5;
        assert!(matches!(
            WaveSolver::new(s.grid.clone(), s.prims.clone(), s.noise.clone(), p),
            Err(Error::Cfl { .. })
        ));
        p.dt = s.params.dt;
        p.cfl = 0.95;
        assert!(WaveSolver::new(s.grid.clone(), s.prims.clone(), s.noise.clone(), p).is_err());
    }

    #[test]
    fn initial_invariants() {
        let s = solver(unit(), 32, 1.0, None, &[], 0.9);
        let g = &s.grid;
        let u0 = g.sample(|x| (2.0 * PI * x).sin() / (2.0 * PI));
        let st = s.init_state(&u0, &g.zeros()).unwrap();
        for (j, x) in g.nodes().enumerate() {
            assert!((st.r[j] + (2.0 * PI * x).cos()).abs() < 1e-12);
            assert!((st.s[j] - (2.0 * PI * x).cos()).abs() < 1e-12);
        }
        assert!(st.theta.abs() < 1e-14);
        assert_eq!(st.u, st.u_check);
        let s = solver(unit(), 32, 4.0, None, &[], 0.9);
        let st = s.init_state(&s.grid.zeros(), &s.grid.constant(1.0)).unwrap();
        assert!(st.r.iter().chain(st.s.iter()).all(|v| (v - 2.0).abs() < 1e-14));
    }

    #[test]
    fn mollified_initial_data_is_close() {
        let s = solver(unit(), 256, 1.0, Some(0.05), &[], 0.9);
        let g = &s.grid;
        let u0 = g.sample(|x| (2.0 * PI * x).sin() / (2.0 * PI));
        let st = s.init_state(&u0, &g.zeros()).unwrap();
        let err = st.r.zip_map(&g.sample(|x| -(2.0 * PI * x).cos()), |a, b| a - b).max_abs();
        // Second moment of a width-0.05 kernel times sup|R0''| = 4 pi^2.
        assert!(err > 0.0 && err <= 0.05 * 0.05 * 4.0 * PI * PI, "{err}");
    }

    #[test]
    fn zero_state_is_a_fixed_point_without_friction() {
        let mut s = solver(unit(), 16, 0.01, None, &[], 0.9);
        s.params.friction = false;
        let g = s.grid.clone();
        let mut st = s.init_state(&g.zeros(), &g.zeros()).unwrap();
        let st0 = st.clone();
        for _ in 0..10 {
            assert!(matches!(s.step(&mut st, &[]).unwrap(), StepOutcome::Advanced(_)));
        }
        assert_eq!((&st.r, &st.s, &st.u, &st.u_check), (&st0.r, &st0.s, &st0.u, &st0.u_check));
    }

    #[test]
    fn exponential_relaxation_is_exact() {
        let s = solver(unit(), 16, 1.0, None, &[], 0.9);
        let g = s.grid.clone();
        let mut st = s.init_state(&g.zeros(), &g.constant(2.0)).unwrap();
        s.step(&mut st, &[]).unwrap();
        let want = 4.0 * (-s.params.dt).exp();
        for j in 0..16 {
            assert!((st.r[j] + st.s[j] - want).abs() < 1e-14);
            assert!((st.s[j] - st.r[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn noise_never_enters_delta() {
        let co = ModelCoefficients::tanh_speed(2.0, 1.0, 0.3).unwrap();
        let s = solver(co, 32, 0.05, Some(0.1), &[ModeProfile::Sin { k: 1, amplitude: 0.5 }, ModeProfile::Cos { k: 2, amplitude: 0.3 }], 0.5);
        let g = s.grid.clone();
        let st0 = s.init_state(&g.sample(|x| 0.3 * (2.0 * PI * x).sin()), &g.zeros()).unwrap();
        let (mut a, mut b) = (st0.clone(), st0);
        s.step(&mut a, &[0.0, 0.0]).unwrap();
        s.step(&mut b, &[0.3, -0.2]).unwrap();
        // Up to the rounding of (Sigma +- Delta)/2.
        for j in 0..32 {
            assert!(((a.s[j] - a.r[j]) - (b.s[j] - b.r[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_path_keeps_only_initial_state() {
        let s = solver(unit(), 16, 0.01, None, &[ModeProfile::Sin { k: 1, amplitude: 0.1 }], 0.5);
        let g = s.grid.clone();
        let path = sample_path(1, 1, s.params.dt, 0).unwrap();
        let run = run_wave(&s, &g.zeros(), &g.zeros(), &path, 1).unwrap();
        assert_eq!(run.snapshots.len(), 1);
        assert_eq!(run.ledger.rows.len(), 1);
        assert!(run.blow_up.is_none());
    }

    #[test]
    fn runs_are_deterministic() {
        let co = ModelCoefficients::tanh_speed(2.0, 1.0, 0.3).unwrap();
        let s = solver(co, 32, 0.05, Some(0.1), &[ModeProfile::Sin { k: 1, amplitude: 0.5 }], 0.5);
        let g = s.grid.clone();
        let u0 = g.sample(|x| 0.3 * (2.0 * PI * x).sin());
        let path = sample_path(1, 42, s.params.dt, 200).unwrap();
        let a = run_wave(&s, &u0, &g.zeros(), &path, 10).unwrap();
        let b = run_wave(&s, &u0, &g.zeros(), &path, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_speed_keeps_theta_zero_and_closure_exact() {
        let mut s = solver(unit(), 32, 0.01, None, &[ModeProfile::Sin { k: 1, amplitude: 0.2 }], 0.5);
        s.params.chi = false;
        let g = s.grid.clone();
        let mut st = s.init_state(&g.sample(|x| 0.1 * (2.0 * PI * x).cos()), &g.zeros()).unwrap();
        let path = sample_path(1, 7, s.params.dt, 300).unwrap();
        for n in 0..300 {
            s.step(&mut st, path.step(n)).unwrap();
            assert!(st.theta.abs() < 1e-12, "{}", st.theta);
            assert!(s.closure_mean(&st).abs() < 1e-12);
        }
    }

    fn xi_gap(n: usize) -> f64 {
        let co = ModelCoefficients::tanh_speed(2.0, 1.0, 0.0).unwrap();
        let s = solver(co, n, 0.1, Some(0.25), &[], 0.5);
        let g = s.grid.clone();
        let v0 = g.sample(|x| 2.0 * (2.0 * PI * x).cos());
        let mut st = s.init_state(&g.sample(|x| 0.5 * (2.0 * PI * x).sin()), &v0).unwrap();
        let steps = (0.02 / s.params.dt).round() as usize;
        for _ in 0..steps {
            s.step(&mut st, &[]).unwrap();
        }
        let prev = st.clone();
        s.step(&mut st, &[]).unwrap();
        let d = xi_diagnostic(&s, &prev, &st).unwrap();
        assert!(d.xi.max_abs() > 1e-3);
        d.xi.zip_map(&d.xi_fd, |a, b| a - b).max_abs()
    }

    #[test]
    fn xi_forms_agree_under_refinement() {
        let (a, b) = (xi_gap(64), xi_gap(128));
        assert!(b < a / 1.4, "{a} {b}");
    }

    #[test]
    fn xi_vanishes_for_constant_speed() {
        let s = solver(unit(), 32, 0.01, Some(0.05), &[ModeProfile::Sin { k: 1, amplitude: 0.2 }], 0.5);
        let g = s.grid.clone();
        let mut st = s.init_state(&g.sample(|x| 0.1 * (2.0 * PI * x).cos()), &g.zeros()).unwrap();
        let prev = st.clone();
        s.step(&mut st, &[0.01]).unwrap();
        let d = xi_diagnostic(&s, &prev, &st).unwrap();
        assert!(d.xi.max_abs() == 0.0 && d.zeta.max_abs() == 0.0);
        assert!(xi_diagnostic(&s, &st, &prev).is_err());
    }

    #[test]
    fn reconstruction_defect_decreases() {
        let co = ModelCoefficients::tanh_speed(2.0, 1.0, 0.3).unwrap();
        let defect = |n: usize| {
            let s = solver(co.clone(), n, 0.1, Some(0.05), &[], 0.5);
            let g = s.grid.clone();
            let mut st = s.init_state(&g.sample(|x| 0.3 * (2.0 * PI * x).sin()), &g.zeros()).unwrap();
            let steps = (0.1 / s.params.dt).round() as usize;
            for _ in 0..steps {
                s.step(&mut st, &[]).unwrap();
            }
            s.reconstruction_defect(&st).unwrap()
        };
        let (a, b) = (defect(64), defect(128));
        assert!(b < a, "{a} {b}");
    }

    #[test]
    fn coupled_time_refinement_converges() {
        let co = ModelCoefficients::tanh_speed(2.0, 1.0, 0.3).unwrap();
        let modes = [ModeProfile::Sin { k: 1, amplitude: 0.3 }];
        let base = solver(co, 32, 0.1, Some(0.05), &modes, 0.8);
        let g = base.grid.clone();
        let u0 = g.sample(|x| 0.3 * (2.0 * PI * x).sin());
        let mut path = sample_path(1, 5, base.params.dt, 100).unwrap();
        let mut finals = vec![];
        for level in 0..3 {
            if level > 0 {
                path = path.refine();
            }
            let mut p = base.params;
            p.dt = path.dt;
            let s = WaveSolver::new(g.clone(), base.prims.clone(), base.noise.clone(), p).unwrap();
            let run = run_wave(&s, &u0, &g.zeros(), &path, path.n_steps).unwrap();
            finals.push(run.final_state.u);
        }
        let d1 = g.l2_norm(&finals[0].zip_map(&finals[1], |a, b| a - b));
        let d2 = g.l2_norm(&finals[1].zip_map(&finals[2], |a, b| a - b));
        assert!(d2 * 1.4 <= d1, "{d1} {d2}");
    }

    #[test]
    fn energy_residual_halves_with_coupled_refinement() {
        // c constant, chi off, f = 0, no noise: only the scheme error remains,
        // which is O(dt + dx) at fixed CFL.
        let mut res = vec![];
        for n in [32, 64, 128] {
            let mut s = solver(unit(), n, 0.1, None, &[], 0.5);
            s.params.chi = false;
            let g = s.grid.clone();
            let u0 = g.sample(|x| 0.1 * (2.0 * PI * x).sin());
            let steps = (0.2 / s.params.dt).round() as usize;
            let path = sample_path(0, 1, s.params.dt, steps).unwrap();
            let run = run_wave(&s, &u0, &g.zeros(), &path, 50).unwrap();
            let t = run.ledger.rows.last().unwrap().t;
            res.push(crate::diagnostics::energy_balance_residual(&run.ledger, t).unwrap());
        }
        assert!(res[0] > 1.8 * res[1] && res[1] > 1.8 * res[2], "{res:?}");
    }
}
