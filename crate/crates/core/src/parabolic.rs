//! Semi-implicit integrator for the limiting parabolic equation in its three
//! formulations:
//!
//! * `U`: `du = (c/gamma)(c u_x)_x + f/gamma - gamma' q/(2 gamma^3) + (Phi/gamma) dW`
//! * `W`: `dw = alpha (beta w_x)_x + f(Gamma^{-1} w) + Phi dW`, `w = Gamma(u)`
//! * `P`: `dp = (b(p) p_x)_x + F(x, p) + (Phi/c) dW`, `p = Gamma_(u)`
//!
//! All three share the stencil `A_j D-(B_face D+ v)` with the coefficients
//! frozen at the current state, face values `B_{j+1/2} = (B_j + B_{j+1})/2`
//! and one periodic tridiagonal solve per step.

use std::sync::Arc;

use crate::coeffs::PrimitiveMaps;
use crate::error::{Error, Result};
use crate::grid::{Field, PeriodicGrid};
use crate::linalg::solve_periodic_tridiagonal;
use crate::noise::{NoiseSpec, WienerPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Form {
    U,
    W,
    P,
}

impl Form {
    pub const ALL: [Form; 3] = [Form::U, Form::W, Form::P];

    pub fn name(self) -> &'static str {
        match self {
            Form::U => "u",
            Form::W => "w",
            Form::P => "p",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "u" => Ok(Form::U),
            "w" => Ok(Form::W),
            "p" => Ok(Form::P),
            other => Err(Error::InvalidInput(format!("unknown form '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParabolicState {
    pub field: Field,
    pub form: Form,
    pub t: f64,
}

/// Maps `u` to the unknown of `form`.
pub fn from_u(prims: &PrimitiveMaps, u: f64, form: Form) -> Result<f64> {
    match form {
        Form::U => Ok(u),
        Form::W => prims.gamma_map(u),
        Form::P => prims.gamma_under(u),
    }
}

/// Maps the unknown of `form` back to `u`.
pub fn to_u(prims: &PrimitiveMaps, v: f64, form: Form) -> Result<f64> {
    match form {
        Form::U => Ok(v),
        Form::W => prims.gamma_inv(v),
        Form::P => prims.gamma_under_inv(v),
    }
}

/// Pointwise change of formulation; `t` and the grid are unchanged.
pub fn convert(state: &ParabolicState, target: Form, prims: &PrimitiveMaps) -> Result<ParabolicState> {
    if state.form == target {
        return Ok(state.clone());
    }
    let field = state
        .field
        .iter()
        .map(|&v| from_u(prims, to_u(prims, v, state.form)?, target))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParabolicState {
        field: Field(field),
        form: target,
        t: state.t,
    })
}

/// Frozen per-node coefficients of one step.
struct NodeCoeffs {
    /// Outer multiplier `A`.
    outer: Vec<f64>,
    /// Inner (face-averaged) multiplier `B` at nodes.
    inner: Vec<f64>,
    reaction: Vec<f64>,
    noise_scale: Vec<f64>,
}

#[derive(Clone)]
pub struct ParabolicSolver {
    pub grid: PeriodicGrid,
    pub prims: Arc<PrimitiveMaps>,
    pub noise: Arc<NoiseSpec>,
    pub form: Form,
    pub dt: f64,
    /// Include the `-gamma' q/(2 gamma^3)` drift in the `U` form.
    pub ito_correction: bool,
    /// Include the noise.
    pub stochastic: bool,
}

impl std::fmt::Debug for ParabolicSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParabolicSolver")
            .field("form", &self.form)
            .field("dt", &self.dt)
            .field("ito_correction", &self.ito_correction)
            .finish()
    }
}

impl ParabolicSolver {
    /// Checks `dt <= 0.5 gamma1 / L_f` for the explicit reaction.
    pub fn new(
        grid: PeriodicGrid,
        prims: Arc<PrimitiveMaps>,
        noise: Arc<NoiseSpec>,
        form: Form,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        let b = &prims.coeffs.bounds;
        if b.lipschitz > 0.0 {
            let limit = 0.5 * b.gamma1 / b.lipschitz;
            if dt > limit {
                return Err(Error::Cfl { dt, limit });
            }
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
            form,
            dt,
            ito_correction: true,
            stochastic: true,
        })
    }

    pub fn init_state(&self, u0: &Field) -> Result<ParabolicState> {
        self.grid.check(u0)?;
        let field = self.prims.apply(u0, |p, u| from_u(p, u, self.form))?;
        Ok(ParabolicState {
            field,
            form: self.form,
            t: 0.0,
        })
    }

    fn node_coeffs(&self, field: &Field) -> Result<NodeCoeffs> {
        let n = self.grid.n();
        let co = &self.prims.coeffs;
        let mut out = NodeCoeffs {
            outer: vec![0.0; n],
            inner: vec![0.0; n],
            reaction: vec![0.0; n],
            noise_scale: vec![0.0; n],
        };
        for j in 0..n {
            let u = to_u(&self.prims, field[j], self.form)?;
            let c = (co.c)(u);
            let g = (co.gamma)(u);
            let f = (co.f)(u);
            let q = self.noise.q_field[j];
            let (a, b, r, s) = match self.form {
                Form::U => {
                    let mut r = f / g;
                    if self.ito_correction {
                        r -= (co.gamma_prime)(u) * q / (2.0 * g * g * g);
                    }
                    (c / g, c, r, 1.0 / g)
                }
                Form::W => (c, c / g, f, 1.0),
                Form::P => (
                    1.0,
                    c * c / g,
                    f / c - q * (co.c_prime)(u) / (2.0 * g * c * c),
                    1.0 / c,
                ),
            };
            out.outer[j] = a;
            out.inner[j] = b;
            out.reaction[j] = r;
            out.noise_scale[j] = s;
        }
        Ok(out)
    }

    /// Face values `B_{j+1/2}`.
    fn faces(inner: &[f64]) -> Vec<f64> {
        let n = inner.len();
        (0..n).map(|j| 0.5 * (inner[j] + inner[(j + 1) % n])).collect()
    }

    fn noise_at(&self, j: usize, dw: &[f64]) -> f64 {
        if !self.stochastic {
            return 0.0;
        }
        self.noise
            .sigma
            .iter()
            .zip(dw)
            .map(|(s, w)| s[j] * w)
            .sum()
    }

    /// One semi-implicit step with the per-mode increments `dw`.
    pub fn step(&self, state: &ParabolicState, dw: &[f64]) -> Result<ParabolicState> {
        if state.form != self.form {
            return Err(Error::InvalidInput(format!(
                "state is in form {}, solver in form {}",
                state.form.name(),
                self.form.name()
            )));
        }
        if dw.len() != self.noise.k() {
            return Err(Error::LengthMismatch {
                expected: self.noise.k(),
                got: dw.len(),
            });
        }
        let n = self.grid.n();
        let dt = self.dt;
        let k = dt / (self.grid.dx() * self.grid.dx());
        let nc = self.node_coeffs(&state.field)?;
        let face = Self::faces(&nc.inner);
        let mut sub = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut sup = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        for j in 0..n {
            let bp = face[j];
            let bm = face[(j + n - 1) % n];
            let a = k * nc.outer[j];
            sub[j] = -a * bm;
            sup[j] = -a * bp;
            diag[j] = 1.0 + a * (bp + bm);
            rhs[j] = state.field[j] + dt * nc.reaction[j] + nc.noise_scale[j] * self.noise_at(j, dw);
        }
        let next = solve_periodic_tridiagonal(&sub, &diag, &sup, &rhs)?;
        let field = Field(next);
        field.check_finite("parabolic step")?;
        // Range check: every value must map back to u.
        for &v in field.iter() {
            to_u(&self.prims, v, self.form)?;
        }
        Ok(ParabolicState {
            field,
            form: self.form,
            t: state.t + dt,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParabolicRun {
    pub form: Form,
    pub stride: usize,
    pub times: Vec<f64>,
    pub snapshots: Vec<Field>,
}

impl ParabolicRun {
    /// Snapshots mapped back to `u`.
    pub fn u_snapshots(&self, prims: &PrimitiveMaps) -> Result<Vec<Field>> {
        self.snapshots
            .iter()
            .map(|f| prims.apply(f, |p, v| to_u(p, v, self.form)))
            .collect()
    }
}

/// Integrates over every step of `path`, storing every `stride`-th level.
pub fn run_parabolic(
    solver: &ParabolicSolver,
    u0: &Field,
    path: &WienerPath,
    stride: usize,
) -> Result<ParabolicRun> {
    if stride == 0 {
        return Err(Error::InvalidInput("snapshot stride must be >= 1".into()));
    }
    if (path.dt - solver.dt).abs() > 1e-12 * solver.dt {
        return Err(Error::InvalidInput(format!(
            "path dt {} differs from solver dt {}",
            path.dt, solver.dt
        )));
    }
    let mut state = solver.init_state(u0)?;
    let mut times = vec![0.0];
    let mut snapshots = vec![state.field.clone()];
    for n in 0..path.n_steps {
        state = solver.step(&state, path.step(n))?;
        if (n + 1) % stride == 0 {
            times.push(state.t);
            snapshots.push(state.field.clone());
        }
    }
    Ok(ParabolicRun {
        form: solver.form,
        stride,
        times,
        snapshots,
    })
}

/// Discrete defect of the weak formulation over the stored window:
/// `<v_N, phi> - <v_0, phi> + sum_n dt sum_j B_{j+1/2} D+v_j D+(A phi)_j dx -
/// sum_n dt <reaction, phi> - sum_n <scale sum_k sigma_k dW_k, phi>`,
/// with every coefficient at the left time level. Needs every step stored.
pub fn weak_residual(
    solver: &ParabolicSolver,
    run: &ParabolicRun,
    path: &WienerPath,
    phi: &Field,
) -> Result<f64> {
    if run.stride != 1 {
        return Err(Error::InvalidInput(
            "weak residual needs every time level (stride 1)".into(),
        ));
    }
    let steps = run.snapshots.len() - 1;
    if path.n_steps < steps {
        return Err(Error::NotEnoughData {
            what: "stored noise increments",
            need: steps,
            got: path.n_steps,
        });
    }
    let g = &solver.grid;
    g.check(phi)?;
    let n = g.n();
    let dx = g.dx();
    let dt = solver.dt;
    let mut acc = g.inner(&run.snapshots[steps], phi) - g.inner(&run.snapshots[0], phi);
    for step in 0..steps {
        let v = &run.snapshots[step];
        let nc = solver.node_coeffs(v)?;
        let face = ParabolicSolver::faces(&nc.inner);
        let dw = path.step(step);
        let mut diffusion = 0.0;
        let mut rest = 0.0;
        for j in 0..n {
            let jp = (j + 1) % n;
            let dv = (v[jp] - v[j]) / dx;
            let dap = (nc.outer[jp] * phi[jp] - nc.outer[j] * phi[j]) / dx;
            diffusion += face[j] * dv * dap;
            rest += (dt * nc.reaction[j] + nc.noise_scale[j] * solver.noise_at(j, dw)) * phi[j];
        }
        acc += dt * dx * diffusion - dx * rest;
    }
    Ok(acc.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{build_primitives, ModelCoefficients, DEFAULT_QUAD_STEP};
    use crate::noise::{build_noise, sample_path, ModeProfile};
    use std::f64::consts::PI;

    fn setup(coeffs: ModelCoefficients, n: usize, noisy: bool) -> (PeriodicGrid, Arc<PrimitiveMaps>, Arc<NoiseSpec>) {
        let g = PeriodicGrid::new(n).unwrap();
        let prims = Arc::new(build_primitives(&coeffs, (-10.0, 10.0), DEFAULT_QUAD_STEP).unwrap());
        let profiles = if noisy {
            vec![ModeProfile::Sin { k: 1, amplitude: 0.3 }]
        } else {
            vec![]
        };
        let noise = Arc::new(build_noise(&profiles, &g, g.dx(), true).unwrap());
        (g, prims, noise)
    }

    fn zero_path(k: usize, dt: f64, n: usize) -> WienerPath {
        sample_path(k, 1, dt, n).unwrap()
    }

    #[test]
    fn heat_first_mode_decay() {
        let (g, prims, noise) = setup(ModelCoefficients::constant(1.0, 1.0).unwrap(), 64, false);
        let t_end = 0.02;
        let mut errs = vec![];
        for steps in [40, 80] {
            let dt = t_end / steps as f64;
            let s = ParabolicSolver::new(g.clone(), prims.clone(), noise.clone(), Form::U, dt).unwrap();
            let u0 = g.sample(|x| (2.0 * PI * x).sin());
            let run = run_parabolic(&s, &u0, &zero_path(noise.k(), dt, steps), steps).unwrap();
            let amp = g.sine_coefficient(run.snapshots.last().unwrap(), 1);
            // Discrete symbol of the three-point Laplacian.
            let lam = 4.0 / (g.dx() * g.dx()) * (PI * g.dx()).sin().powi(2);
            let exact = (-lam * t_end).exp();
            assert!(((-4.0 * PI * PI * t_end).exp() - exact).abs() < 1e-3);
            errs.push((amp - exact).abs());
        }
        assert!(errs[0] < 0.02 && errs[1] < 0.6 * errs[0], "{errs:?}");
    }

    #[test]
    fn constant_gamma_matches_naive_equation_bitwise() {
        let co = ModelCoefficients::tanh_speed(2.0, 1.0, 0.0).unwrap();
        let (g, prims, noise) = setup(co, 32, true);
        let dt = 1e-3;
        let mut a = ParabolicSolver::new(g.clone(), prims, noise.clone(), Form::U, dt).unwrap();
        let u0 = g.sample(|x| 0.3 * (2.0 * PI * x).cos());
        let path = sample_path(noise.k(), 5, dt, 50).unwrap();
        let r1 = run_parabolic(&a, &u0, &path, 1).unwrap();
        a.ito_correction = false;
        let r2 = run_parabolic(&a, &u0, &path, 1).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn conversions_round_trip_and_coincide_for_unit_coefficients() {
        let (g, prims, _) = setup(ModelCoefficients::constant(1.0, 1.0).unwrap(), 16, false);
        let s = ParabolicState {
            field: g.sample(|x| (2.0 * PI * x).sin()),
            form: Form::U,
            t: 0.3,
        };
        for f in Form::ALL {
            let c = convert(&s, f, &prims).unwrap();
            for (a, b) in c.field.iter().zip(s.field.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let co = ModelCoefficients::tanh_speed(2.0, 1.0, 0.3).unwrap();
        let (g, prims, _) = setup(co, 16, false);
        let s = ParabolicState {
            field: g.sample(|x| 0.8 * (2.0 * PI * x).sin()),
            form: Form::U,
            t: 0.0,
        };
        for f in [Form::W, Form::P] {
            let back = convert(&convert(&s, f, &prims).unwrap(), Form::U, &prims).unwrap();
            for (a, b) in back.field.iter().zip(s.field.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn divergence_form_conserves_mean_and_respects_bounds() {
        let co = ModelCoefficients::tanh_speed(2.0, 1.0, 0.3).unwrap();
        let (g, prims, noise) = setup(co, 32, false);
        let dt = 2e-3;
        let s = ParabolicSolver::new(g.clone(), prims.clone(), noise.clone(), Form::P, dt).unwrap();
        let u0 = g.sample(|x| (2.0 * PI * x).sin() + 0.5 * (6.0 * PI * x).cos());
        let mut st = s.init_state(&u0).unwrap();
        let m0 = st.field.mean();
        let path = zero_path(noise.k(), dt, 100);
        for n in 0..100 {
            st = s.step(&st, path.step(n)).unwrap();
            assert!((st.field.mean() - m0).abs() < 1e-12);
        }
        let su = ParabolicSolver::new(g.clone(), prims, noise, Form::U, dt).unwrap();
        let run = run_parabolic(&su, &u0, &path, 10).unwrap();
        for f in &run.snapshots {
            assert!(f.min() >= u0.min() - 1e-12 && f.max() <= u0.max() + 1e-12);
        }
    }

    #[test]
    fn weak_residual_trivial_cases() {
        let (g, prims, noise) = setup(ModelCoefficients::constant(1.0, 1.0).unwrap(), 16, true);
        let dt = 1e-3;
        let s = ParabolicSolver::new(g.clone(), prims, noise.clone(), Form::P, dt).unwrap();
        let u0 = g.sample(|x| (2.0 * PI * x).sin());
        let path = sample_path(noise.k(), 2, dt, 20).unwrap();
        let run = run_parabolic(&s, &u0, &path, 1).unwrap();
        assert_eq!(weak_residual(&s, &run, &path, &g.zeros()).unwrap(), 0.0);
        let empty = run_parabolic(&s, &u0, &sample_path(noise.k(), 2, dt, 0).unwrap(), 1).unwrap();
        let phi = g.sample(|x| (2.0 * PI * x).cos() + 1.0);
        assert_eq!(weak_residual(&s, &empty, &path, &phi).unwrap(), 0.0);
        let strided = run_parabolic(&s, &u0, &path, 2).unwrap();
        assert!(weak_residual(&s, &strided, &path, &phi).is_err());
    }

    #[test]
    fn weak_residual_heat_refines() {
        let (_, prims, _) = setup(ModelCoefficients::constant(1.0, 1.0).unwrap(), 16, false);
        let t_end = 0.05;
        let mut res = vec![];
        for (n, steps) in [(16, 50), (32, 100), (64, 200)] {
            let g = PeriodicGrid::new(n).unwrap();
            let noise = Arc::new(build_noise(&[], &g, g.dx(), true).unwrap());
            let dt = t_end / steps as f64;
            let s = ParabolicSolver::new(g.clone(), prims.clone(), noise, Form::P, dt).unwrap();
            let u0 = g.sample(|x| (2.0 * PI * x).sin());
            let path = zero_path(0, dt, steps);
            let run = run_parabolic(&s, &u0, &path, 1).unwrap();
            let phi = g.sample(|x| (2.0 * PI * x).sin());
            res.push(weak_residual(&s, &run, &path, &phi).unwrap());
        }
        assert!(res[1] < res[0] && res[2] < res[1], "{res:?}");
    }
}
