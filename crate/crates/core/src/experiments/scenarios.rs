//! Scenario registry. Each scenario runs one experiment, emits its reports
//! and evaluates its pass/fail assertions.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::coeffs::{build_h_h, build_primitives, verify_assumptions, ModelCoefficients, PrimitiveMaps, DEFAULT_QUAD_STEP};
use crate::diagnostics::{
    defect_field_integral, defect_integral, energy_balance_residual, ito1_residual, ito2_residual,
    ito_check, sk_distance, summarize, theta_residual_l1, ConvergenceReport, ItoDrift, ItoPsi,
    ItoSetup, SlopeBasis, Summary, TestFunction,
};
use crate::error::{Error, Result};
use crate::grid::{Field, PeriodicGrid};
use crate::noise::{build_noise, sample_path, ModeProfile, NoiseSpec, WienerPath};
use crate::parabolic::{from_u, run_parabolic, Form, ParabolicSolver};
use crate::wave::{run_wave, StepOutcome, WaveParams, WaveSolver};

use super::config::ExperimentConfig;
use super::ensemble::map_paths;

/// One pass/fail check of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub criterion: u8,
    pub name: String,
    pub measured: String,
    pub required: String,
    pub pass: bool,
}

impl Assertion {
    fn new(criterion: u8, name: impl Into<String>, measured: String, required: impl Into<String>, pass: bool) -> Self {
        Self {
            criterion,
            name: name.into(),
            measured,
            required: required.into(),
            pass,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {} {}: measured {}; required {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.measured,
            self.required
        )
    }
}

/// An emitted file: name relative to the output directory and contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub file: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: String,
    pub reports: Vec<Report>,
    pub assertions: Vec<Assertion>,
    pub summary: String,
}

impl ScenarioResult {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass)
    }

    pub fn first_failure(&self) -> Option<&Assertion> {
        self.assertions.iter().find(|a| !a.pass)
    }
}

/// Execution options that do not change results.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    /// Thread count override; `None` defers to the config.
    pub workers: Option<usize>,
    /// Run only this path index (replay).
    pub only_path: Option<usize>,
}

pub struct Scenario {
    pub name: &'static str,
    pub criterion: u8,
    pub description: &'static str,
    pub defaults: &'static [(&'static str, &'static str)],
    pub validate: fn(&ExperimentConfig) -> Result<()>,
    pub run: fn(&ExperimentConfig, &Ctx) -> Result<ScenarioResult>,
}

pub const SCENARIOS: &[Scenario] = &[
    Scenario {
        name: "validate-assumptions",
        criterion: 8,
        description: "coefficient assumptions and the h/H construction",
        defaults: &[("coeffs.preset", "tanh"), ("coeffs.gamma_amp", "0"), ("coeffs.range", "20")],
        validate: no_extra,
        run: validate_assumptions,
    },
    Scenario {
        name: "constant-oracle",
        criterion: 1,
        description: "stationary first-mode variance against the Lyapunov value",
        defaults: &[
            ("coeffs.preset", "constant"),
            ("mu.list", "0.01"),
            ("grid.n", "64"),
            ("time.t_final", "20"),
            ("time.cfl", "0.5"),
            ("eps.value", "0.01"),
            ("noise.modes", "sin:1:0.1414213562373095"),
            ("initial.u0", ""),
            ("ensemble.paths", "1"),
            ("oracle.burn_in", "1"),
            ("oracle.batches", "40"),
        ],
        validate: no_extra,
        run: constant_oracle,
    },
    Scenario {
        name: "energy-ledger",
        criterion: 3,
        description: "energy-balance residual under coupled refinement",
        defaults: &[
            ("mu.list", "0.1"),
            ("grid.n", "32"),
            ("time.t_final", "0.5"),
            ("eps.value", "0.05"),
            ("eps.rule", "fixed"),
            ("noise.modes", "sin:1:0.5"),
            ("initial.u0", "sin:1:0.3"),
            ("ensemble.paths", "50"),
        ],
        validate: no_extra,
        run: energy_ledger,
    },
    Scenario {
        name: "formulation-equivalence",
        criterion: 4,
        description: "u, w and p forms of the limit equation on one coupled path",
        defaults: &[
            ("grid.n", "16"),
            ("time.t_final", "0.25"),
            ("time.dt", "0.002"),
            ("noise.modes", "sin:1:0.5, cos:2:0.3"),
            ("initial.u0", "sin:1:0.5"),
            ("ensemble.paths", "1"),
        ],
        validate: no_extra,
        run: formulation_equivalence,
    },
    Scenario {
        name: "sk-convergence",
        criterion: 5,
        description: "distance between wave and limit trajectories as mu decreases",
        defaults: &[
            ("mu.list", "0.1, 0.03, 0.01"),
            ("grid.n", "32"),
            ("time.t_final", "0.5"),
            ("time.stride", "10"),
            ("noise.modes", "sin:1:0.5"),
            ("initial.u0", "sin:1:0.3"),
            ("ensemble.paths", "20"),
        ],
        validate: sk_validate,
        run: sk_convergence,
    },
    Scenario {
        name: "defect-decay",
        criterion: 6,
        description: "defect-measure positive part and field pairing as mu decreases",
        defaults: &[
            ("coeffs.preset", "constant"),
            ("mu.list", "0.1, 0.01"),
            ("grid.n", "64"),
            ("time.t_final", "1"),
            ("eps.value", "0.05"),
            ("noise.modes", "sin:1:0.5"),
            ("initial.u0", "sin:1:0.3"),
            ("ensemble.paths", "100"),
        ],
        validate: defect_validate,
        run: defect_decay,
    },
    Scenario {
        name: "ito-suite",
        criterion: 7,
        description: "Monte-Carlo slopes of the two discrete Ito formulas",
        defaults: &[
            ("noise.modes", "sin:1:0.1"),
            ("initial.u0", "const:1.5707963267948966"),
            ("ensemble.paths", "200"),
            ("ito.gamma_lin", "1"),
            ("ito.gamma_sin", "0.3"),
            ("ito.phi_rate", "0.5"),
            ("ito.second_u0", "const:0.7, cos:1:0.4, sin:2:0.2"),
            ("ito.second_v0", "cos:2:0.5"),
        ],
        validate: no_extra,
        run: ito_suite,
    },
    Scenario {
        name: "theta-residual",
        criterion: 9,
        description: "residual of the correction-term law under coupled refinement",
        defaults: &[
            ("mu.list", "0.1"),
            ("grid.n", "32"),
            ("time.t_final", "0.2"),
            ("eps.value", "0.25"),
            ("eps.rule", "fixed"),
            ("noise.modes", "sin:1:0.3"),
            ("initial.u0", "sin:1:0.5"),
            ("initial.v0", "cos:1:2"),
            ("ensemble.paths", "4"),
        ],
        validate: no_extra,
        run: theta_residual,
    },
];

pub fn lookup(name: &str) -> Result<&'static Scenario> {
    SCENARIOS.iter().find(|s| s.name == name).ok_or_else(|| {
        Error::Config(format!(
            "unknown scenario '{name}'; known: {}",
            SCENARIOS.iter().map(|s| s.name).collect::<Vec<_>>().join(", ")
        ))
    })
}

fn no_extra(_: &ExperimentConfig) -> Result<()> {
    Ok(())
}

fn sk_validate(cfg: &ExperimentConfig) -> Result<()> {
    let m = cfg.mus()?.len();
    if m < 3 {
        return Err(Error::Config(format!(
            "sk-convergence needs at least 3 values in mu.list, got {m}"
        )));
    }
    Ok(())
}

fn defect_validate(cfg: &ExperimentConfig) -> Result<()> {
    let m = cfg.mus()?.len();
    if m < 2 {
        return Err(Error::Config(format!(
            "defect-decay needs at least 2 values in mu.list, got {m}"
        )));
    }
    Ok(())
}

/// Per-run context: thread count and replay selection.
pub struct Ctx {
    pub workers: Option<usize>,
    pub only_path: Option<usize>,
}

impl Ctx {
    /// Runs `f` over the configured paths, or over the replayed one.
    fn map<T: Send>(
        &self,
        cfg: &ExperimentConfig,
        f: impl Fn(usize, u64) -> Result<T> + Sync + Send,
    ) -> Result<Vec<T>> {
        let m = cfg.paths()?;
        let base = cfg.seed()?;
        match self.only_path {
            Some(i) => {
                if i >= m {
                    return Err(Error::InvalidInput(format!(
                        "path index {i} outside the ensemble of {m}"
                    )));
                }
                let seed = super::ensemble::path_seed(base, i);
                f(i, seed)
                    .map(|v| vec![v])
                    .map_err(|e| Error::PathFailed {
                        index: i,
                        seed,
                        source: Box::new(e),
                    })
            }
            None => map_paths(m, base, self.workers, f),
        }
    }
}

/// Validates, checks the coefficient assumptions (unless `force`) and runs.
pub fn run_scenario(cfg: &ExperimentConfig, opts: RunOptions, force: bool) -> Result<ScenarioResult> {
    cfg.validate()?;
    let s = lookup(cfg.scenario()?)?;
    if !force && s.name != "validate-assumptions" {
        gate_assumptions(cfg)?;
    }
    let ctx = Ctx {
        workers: match opts.workers {
            Some(w) => Some(w),
            None => cfg.workers()?,
        },
        only_path: opts.only_path,
    };
    (s.run)(cfg, &ctx)
}

/// Constant-speed presets cannot satisfy `c'(u0) > 0`; for them that check
/// is waived since the equation is linear.
fn gate_assumptions(cfg: &ExperimentConfig) -> Result<()> {
    let co = cfg.coefficients()?;
    let g = cfg.grid()?;
    let u0 = cfg.initial("initial.u0", &g)?;
    let r = cfg.positive("coeffs.range")?;
    let rep = verify_assumptions(&co, &u0, (-r, r));
    let constant_speed = co.bounds.c3 == 0.0;
    let failures: Vec<&str> = rep
        .failures()
        .into_iter()
        .filter(|f| !(constant_speed && *f == "initial-slope-positive"))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "coefficient assumptions fail: {} (use --force to run anyway)",
            failures.join(", ")
        )))
    }
}

// ---------------------------------------------------------------- helpers

fn fmt(x: f64) -> String {
    format!("{x:.6e}")
}

fn steps_for(t_final: f64, dt: f64) -> usize {
    (t_final / dt).round().max(1.0) as usize
}

/// `time.dt` if set, otherwise the CFL step at `mu_min` on `grid`.
fn wave_dt(cfg: &ExperimentConfig, grid: &PeriodicGrid, c2: f64, mu_min: f64) -> Result<f64> {
    let dt = cfg.f64("time.dt")?;
    Ok(if dt > 0.0 {
        dt
    } else {
        WaveSolver::cfl_limit(grid, mu_min, c2, cfg.positive("time.cfl")?)
    })
}

struct Setup {
    grid: PeriodicGrid,
    prims: Arc<PrimitiveMaps>,
    modes: Vec<ModeProfile>,
    u0: Field,
    v0: Field,
}

fn setup(cfg: &ExperimentConfig, grid: PeriodicGrid, prims: Arc<PrimitiveMaps>) -> Result<Setup> {
    Ok(Setup {
        u0: cfg.initial("initial.u0", &grid)?,
        v0: cfg.initial("initial.v0", &grid)?,
        modes: cfg.noise_modes()?,
        grid,
        prims,
    })
}

impl Setup {
    fn noise(&self, eps: f64) -> Result<Arc<NoiseSpec>> {
        Ok(Arc::new(build_noise(&self.modes, &self.grid, eps, true)?))
    }

    fn wave(&self, mu: f64, eps: f64, dt: f64) -> Result<WaveSolver> {
        WaveSolver::new(
            self.grid.clone(),
            self.prims.clone(),
            self.noise(eps)?,
            WaveParams {
                cfl: 0.9,
                ..WaveParams::new(mu, eps, dt)
            },
        )
    }

    fn parabolic(&self, form: Form, dt: f64) -> Result<ParabolicSolver> {
        ParabolicSolver::new(self.grid.clone(), self.prims.clone(), self.noise(self.grid.dx())?, form, dt)
    }
}

fn transpose(per_path: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let levels = per_path.first().map(Vec::len).unwrap_or(0);
    (0..levels)
        .map(|l| per_path.iter().map(|p| p[l]).collect())
        .collect()
}

fn report_files(stem: &str, r: &ConvergenceReport) -> Vec<Report> {
    vec![
        Report {
            file: format!("{stem}.csv"),
            content: r.to_csv(),
        },
        Report {
            file: format!("{stem}.dat"),
            content: r.to_dat(),
        },
    ]
}

fn summary_table(title: &str, r: &ConvergenceReport) -> String {
    let mut s = format!("{title}\n  {:>14} {:>14} {:>14} {:>14}\n", "parameter", "median", "mean", "stderr");
    for (p, st) in r.parameters.iter().zip(&r.stats) {
        let _ = writeln!(s, "  {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}", p, st.median, st.mean, st.stderr);
    }
    if let Some(v) = r.slope {
        let _ = writeln!(s, "  slope {v:.4}");
    }
    s
}

fn ratios(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[0] / w[1]).collect()
}

fn ratio_assertion(criterion: u8, name: &str, values: &[f64], bar: f64) -> Assertion {
    let r = ratios(values);
    let pass = !r.is_empty() && r.iter().all(|v| *v >= bar);
    Assertion::new(
        criterion,
        name,
        format!(
            "ratios {}",
            r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")
        ),
        format!("each >= {bar}"),
        pass,
    )
}

// ---------------------------------------------------- validate-assumptions

fn validate_assumptions(cfg: &ExperimentConfig, _: &Ctx) -> Result<ScenarioResult> {
    let co = cfg.coefficients()?;
    let g = cfg.grid()?;
    let u0 = cfg.initial("initial.u0", &g)?;
    let r = cfg.positive("coeffs.range")?;
    let range = (-r, r);
    let rep = verify_assumptions(&co, &u0, range);
    let mut assertions: Vec<Assertion> = rep
        .checks
        .iter()
        .map(|c| Assertion::new(8, format!("assumption {}", c.name), fmt(c.extremal), "holds", c.pass))
        .collect();

    let step = DEFAULT_QUAD_STEP;
    let hm = build_h_h(&co, range, step)?;
    let n = ((range.1 - range.0) / step).round() as usize;
    let us: Vec<f64> = (0..=n).map(|i| range.0 + i as f64 * step).collect();
    let min_hp = us.iter().map(|&u| hm.h_prime(u)).fold(f64::INFINITY, f64::min);
    assertions.push(Assertion::new(8, "h' > 0 at all samples", fmt(min_hp), "> 0", min_hp > 0.0));

    let hc = |u: f64| -> Result<f64> { Ok(hm.h(u)? * (co.c)(u)) };
    let mut min_fd = f64::INFINITY;
    for w in us.windows(2) {
        min_fd = min_fd.min((hc(w[1])? - hc(w[0])?) / (w[1] - w[0]));
    }
    let bound = 0.5 * (1.0 + hm.kappa) - 1e-6;
    assertions.push(Assertion::new(
        8,
        "min finite difference of (hc)'",
        fmt(min_fd),
        format!(">= (1 + kappa)/2 - 1e-6 = {}", fmt(bound)),
        min_fd >= bound,
    ));

    let prims = build_primitives(&co, range, step)?;
    let mut worst = 0.0_f64;
    for &u in us.iter().step_by(10) {
        worst = worst
            .max((prims.c_inv(prims.c_map(u)?)? - u).abs())
            .max((prims.gamma_inv(prims.gamma_map(u)?)? - u).abs())
            .max((prims.gamma_under_inv(prims.gamma_under(u)?)? - u).abs());
    }
    assertions.push(Assertion::new(8, "round-trip inverse error", fmt(worst), "<= 1e-8", worst <= 1e-8));

    let c0 = cfg.positive("coeffs.c0")?;
    let cc = ModelCoefficients::constant(c0, cfg.positive("coeffs.gamma0")?)?;
    let hc0 = build_h_h(&cc, range, step)?;
    let mut worst_c = 0.0_f64;
    for &u in us.iter().step_by(10) {
        worst_c = worst_c.max((hc0.h(u)? - (u - hc0.u_star) / c0).abs());
    }
    assertions.push(Assertion::new(
        8,
        "constant-speed h(u) = (u - u*)/c0",
        fmt(worst_c),
        "<= 1e-10",
        worst_c <= 1e-10,
    ));

    let mut hh = String::from("check,status,measured,required\n");
    for a in &assertions {
        let _ = writeln!(hh, "{},{},{},{}", a.name, if a.pass { "PASS" } else { "FAIL" }, a.measured, a.required);
    }
    let summary = format!(
        "{}\n{}",
        rep.banner(),
        assertions.iter().map(Assertion::line).collect::<Vec<_>>().join("\n")
    );
    Ok(ScenarioResult {
        scenario: "validate-assumptions".into(),
        reports: vec![
            Report {
                file: "assumptions.csv".into(),
                content: rep.to_csv(),
            },
            Report {
                file: "h_structure.csv".into(),
                content: hh,
            },
        ],
        assertions,
        summary,
    })
}

// --------------------------------------------------------- constant-oracle

/// Stationary variance of `x` in `mu x'' + gamma x' + k x = s W'`, from the
/// 2x2 Lyapunov equation `A P + P A^T + B B^T = 0`.
pub fn lyapunov_first_moment(mu: f64, gamma: f64, k: f64, s: f64) -> f64 {
    // A = [[0, 1], [-k/mu, -gamma/mu]], B = [0, s/mu]^T, P = [[p, r], [r, v]].
    // (1,1): 2r = 0; (1,2): v - (k/mu) p - (gamma/mu) r = 0;
    // (2,2): -2(k/mu) r - 2(gamma/mu) v + s^2/mu^2 = 0.
    let v = s * s / (2.0 * gamma * mu);
    v * mu / k
}

/// Batch statistics of a stationary squared-amplitude series.
fn batch_summary(series: &[f64], batches: usize) -> Vec<f64> {
    let len = series.len() / batches;
    (0..batches)
        .map(|b| series[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64)
        .collect()
}

fn constant_oracle(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<ScenarioResult> {
    let g = cfg.grid()?;
    let prims = cfg.primitives()?;
    let co = prims.coeffs.clone();
    let s = setup(cfg, g.clone(), prims)?;
    let mu = cfg.mus()?[0];
    let (eps, _) = cfg.eps_for(mu, &g)?;
    let dt = wave_dt(cfg, &g, co.bounds.c2, mu)?;
    let n_steps = steps_for(cfg.positive("time.t_final")?, dt);
    let burn = (cfg.f64("oracle.burn_in")? / dt).round() as usize;
    let batches = cfg.usize("oracle.batches")?;
    if burn >= n_steps || batches < 2 || (n_steps - burn) < batches {
        return Err(Error::Config("oracle.burn_in/batches leave too few samples".into()));
    }
    let wave = s.wave(mu, eps, dt)?;
    let para: Vec<ParabolicSolver> = Form::ALL
        .iter()
        .map(|f| s.parabolic(*f, dt))
        .collect::<Result<_>>()?;
    let k = wave.noise.k();

    // Per path: batch means of a_1^2 for the wave and the three forms.
    let per_path = ctx.map(cfg, |_, seed| {
        let path = sample_path(k, seed, dt, n_steps)?;
        let mut st = wave.init_state(&s.u0, &s.v0)?;
        let mut pst: Vec<_> = para.iter().map(|p| p.init_state(&s.u0)).collect::<Result<_>>()?;
        let mut series: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(n_steps - burn)).collect();
        for n in 0..n_steps {
            let dw = path.step(n);
            if let StepOutcome::BlowUp(b) = wave.step(&mut st, dw)? {
                return Err(Error::InvalidInput(format!("wave blow-up at t = {}: {}", b.t, b.reason)));
            }
            for (p, ps) in para.iter().zip(pst.iter_mut()) {
                *ps = p.step(ps, dw)?;
            }
            if n + 1 > burn {
                series[0].push(g.sine_coefficient(&st.u, 1).powi(2));
                for (i, (p, ps)) in para.iter().zip(&pst).enumerate() {
                    let u = ps
                        .field
                        .iter()
                        .map(|&v| crate::parabolic::to_u(&p.prims, v, p.form))
                        .collect::<Result<Vec<_>>>()?;
                    series[i + 1].push(g.sine_coefficient(&u, 1).powi(2));
                }
            }
        }
        Ok(series.iter().map(|x| batch_summary(x, batches)).collect::<Vec<_>>())
    })?;

    let sigma = s
        .modes
        .iter()
        .map(|m| g.sine_coefficient(&m.sample(&g).unwrap_or_else(|_| g.zeros()), 1).powi(2))
        .sum::<f64>()
        .sqrt();
    let c0 = (co.c)(0.0);
    let gamma0 = (co.gamma)(0.0);
    let kk = (2.0 * PI).powi(2) * c0 * c0;
    let lyap = lyapunov_first_moment(mu, gamma0, kk, sigma);

    let labels = ["wave", "parabolic-u", "parabolic-w", "parabolic-p"];
    let mut stats: Vec<Summary> = Vec::new();
    for i in 0..4 {
        let all: Vec<f64> = per_path.iter().flat_map(|p| p[i].iter().copied()).collect();
        stats.push(summarize(&all)?);
    }
    let mut csv = String::from("solver,variance,stderr,lyapunov,z\n");
    for (l, st) in labels.iter().zip(&stats) {
        let z = (st.mean - lyap) / st.stderr;
        let _ = writeln!(csv, "{l},{:.12e},{:.12e},{:.12e},{:.6}", st.mean, st.stderr, lyap, z);
    }
    let mut assertions = Vec::new();
    for (i, (l, st)) in labels.iter().zip(&stats).enumerate() {
        let dev = (st.mean - lyap).abs();
        assertions.push(Assertion::new(
            if i == 0 { 1 } else { 2 },
            format!("{l} first-mode variance vs Lyapunov {}", fmt(lyap)),
            format!("{} (|dev| {}, s.e. {})", fmt(st.mean), fmt(dev), fmt(st.stderr)),
            "|dev| <= 3 s.e.",
            dev <= 3.0 * st.stderr,
        ));
    }
    for a in 1..4 {
        for b in a + 1..4 {
            let d = (stats[a].mean - stats[b].mean).abs();
            let se = stats[a].stderr.hypot(stats[b].stderr);
            assertions.push(Assertion::new(
                2,
                format!("{} vs {}", labels[a], labels[b]),
                format!("|diff| {} (joint s.e. {})", fmt(d), fmt(se)),
                "|diff| <= 2 joint s.e.",
                d <= 2.0 * se,
            ));
        }
    }
    let summary = format!(
        "mu = {mu}, dt = {dt:.6e}, N = {}, eps = {eps:.4e}, Lyapunov value {lyap:.6e}\n{}",
        g.n(),
        assertions.iter().map(Assertion::line).collect::<Vec<_>>().join("\n")
    );
    Ok(ScenarioResult {
        scenario: "constant-oracle".into(),
        reports: vec![Report {
            file: "constant_oracle.csv".into(),
            content: csv,
        }],
        assertions,
        summary,
    })
}

// ----------------------------------------------------------- energy-ledger

/// Grid, step and coupled path of refinement level `l` (both `dx` and `dt`
/// halve per level).
fn level_grid(cfg: &ExperimentConfig, l: usize) -> Result<PeriodicGrid> {
    PeriodicGrid::new(cfg.usize("grid.n")? << l)
}

fn energy_ledger(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<ScenarioResult> {
    let prims = cfg.primitives()?;
    let levels = cfg.usize("grid.levels")?;
    let mu = cfg.mus()?[0];
    let t_final = cfg.positive("time.t_final")?;
    let g0 = level_grid(cfg, 0)?;
    let dt0 = wave_dt(cfg, &g0, prims.coeffs.bounds.c2, mu)?;
    let n0 = steps_for(t_final, dt0);
    let solvers: Vec<(Setup, WaveSolver)> = (0..levels)
        .map(|l| {
            let g = level_grid(cfg, l)?;
            let s = setup(cfg, g.clone(), prims.clone())?;
            let (eps, _) = cfg.eps_for(mu, &g)?;
            let w = s.wave(mu, eps, dt0 / f64::powi(2.0, l as i32))?;
            Ok((s, w))
        })
        .collect::<Result<_>>()?;
    let k = solvers[0].1.noise.k();
    let per_path = ctx.map(cfg, |_, seed| {
        let mut path = sample_path(k, seed, dt0, n0)?;
        let mut out = Vec::with_capacity(levels);
        for (l, (s, w)) in solvers.iter().enumerate() {
            if l > 0 {
                path = path.refine();
            }
            let run = run_wave(w, &s.u0, &s.v0, &path, path.n_steps)?;
            if let Some(b) = run.blow_up {
                return Err(Error::InvalidInput(format!("blow-up at t = {}: {}", b.t, b.reason)));
            }
            let t = run.ledger.rows.last().map(|r| r.t).unwrap_or(0.0);
            out.push(energy_balance_residual(&run.ledger, t)?);
        }
        Ok(out)
    })?;
    let dts: Vec<f64> = (0..levels).map(|l| dt0 / f64::powi(2.0, l as i32)).collect();
    let rep = ConvergenceReport::new("energy balance residual", dts, &transpose(&per_path), SlopeBasis::Mean)?;
    let assertions = vec![ratio_assertion(3, "mean energy residual per halving", &rep.means(), 1.4)];
    let summary = format!(
        "{}{}",
        summary_table("energy balance residual (mean over paths)", &rep),
        assertions.iter().map(Assertion::line).collect::<Vec<_>>().join("\n")
    );
    Ok(ScenarioResult {
        scenario: "energy-ledger".into(),
        reports: report_files("energy_residual", &rep),
        assertions,
        summary,
    })
}

// ------------------------------------------------- formulation-equivalence

fn formulation_equivalence(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<ScenarioResult> {
    let prims = cfg.primitives()?;
    let levels = cfg.usize("grid.levels")?;
    let t_final = cfg.positive("time.t_final")?;
    let dt0 = cfg.positive("time.dt")?;
    let n0 = steps_for(t_final, dt0);
    let setups: Vec<Setup> = (0..levels)
        .map(|l| setup(cfg, level_grid(cfg, l)?, prims.clone()))
        .collect::<Result<_>>()?;
    let k = cfg.noise_modes()?.len();
    let per_path = ctx.map(cfg, |_, seed| {
        let mut path = sample_path(k, seed, dt0, n0)?;
        let mut w_dist = Vec::with_capacity(levels);
        let mut p_dist = Vec::with_capacity(levels);
        for (l, s) in setups.iter().enumerate() {
            if l > 0 {
                path = path.refine_by(2);
            }
            let stride = 1usize << (2 * l);
            let dt = path.dt;
            let mut runs = Vec::new();
            for f in Form::ALL {
                runs.push(run_parabolic(&s.parabolic(f, dt)?, &s.u0, &path, stride)?);
            }
            let u = &runs[0].snapshots;
            let mapped = |form: Form| -> Result<Vec<Field>> {
                u.iter().map(|f| s.prims.apply(f, |p, v| from_u(p, v, form))).collect()
            };
            let times = &runs[0].times;
            w_dist.push(sk_distance(times, &mapped(Form::W)?, &runs[1].snapshots, &s.grid, 0.5, 2.0)?.1);
            p_dist.push(sk_distance(times, &mapped(Form::P)?, &runs[2].snapshots, &s.grid, 0.5, 2.0)?.1);
        }
        Ok((w_dist, p_dist))
    })?;
    let dts: Vec<f64> = (0..levels).map(|l| dt0 / f64::powi(4.0, l as i32)).collect();
    let w: Vec<Vec<f64>> = per_path.iter().map(|p| p.0.clone()).collect();
    let p: Vec<Vec<f64>> = per_path.iter().map(|p| p.1.clone()).collect();
    let rw = ConvergenceReport::new("||Gamma(u) - w||", dts.clone(), &transpose(&w), SlopeBasis::Median)?;
    let rp = ConvergenceReport::new("||Gamma_(u) - p||", dts, &transpose(&p), SlopeBasis::Median)?;
    let assertions = vec![
        ratio_assertion(4, "||Gamma(u) - w|| per (dt, dx^2) refinement", &rw.medians(), 1.4),
        ratio_assertion(4, "||Gamma_(u) - p|| per (dt, dx^2) refinement", &rp.medians(), 1.4),
    ];
    let mut reports = report_files("equivalence_w", &rw);
    reports.extend(report_files("equivalence_p", &rp));
    let summary = format!(
        "{}{}{}",
        summary_table("L2(0,T;L2) distance, w form", &rw),
        summary_table("L2(0,T;L2) distance, p form", &rp),
        assertions.iter().map(Assertion::line).collect::<Vec<_>>().join("\n")
    );
    Ok(ScenarioResult {
        scenario: "formulation-equivalence".into(),
        reports,
        assertions,
        summary,
    })
}

// ----------------------------------------------------------- sk-convergence

fn strictly_decreasing(criterion: u8, name: &str, values: &[f64]) -> Assertion {
    let pass = values.windows(2).all(|w| w[1] < w[0]);
    Assertion::new(
        criterion,
        name,
        values.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(" > "),
        "strictly decreasing in mu",
        pass,
    )
}

fn sk_convergence(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<ScenarioResult> {
    let g = cfg.grid()?;
    let prims = cfg.primitives()?;
    let s = setup(cfg, g.clone(), prims.clone())?;
    let mus = cfg.mus()?;
    let mu_min = *mus.last().expect("validated");
    let dt = wave_dt(cfg, &g, prims.coeffs.bounds.c2, mu_min)?;
    let n = steps_for(cfg.positive("time.t_final")?, dt);
    let stride = cfg.usize("time.stride")?;
    let delta = cfg.f64("sk.delta")?;
    let p_exp = cfg.f64("sk.p")?;
    let waves: Vec<WaveSolver> = mus
        .iter()
        .map(|&mu| s.wave(mu, cfg.eps_for(mu, &g)?.0, dt))
        .collect::<Result<_>>()?;
    let para = s.parabolic(Form::U, dt)?;
    let k = para.noise.k();
    let per_path = ctx.map(cfg, |_, seed| {
        let path = sample_path(k, seed, dt, n)?;
        let limit = run_parabolic(&para, &s.u0, &path, stride)?;
        let mut h = Vec::new();
        let mut l = Vec::new();
        for w in &waves {
            let run = run_wave(w, &s.u0, &s.v0, &path, stride)?;
            if let Some(b) = run.blow_up {
                return Err(Error::InvalidInput(format!("blow-up at t = {}: {}", b.t, b.reason)));
            }
            let u: Vec<Field> = run.snapshots.iter().map(|x| x.u.clone()).collect();
            let (dh, dl) = sk_distance(&limit.times, &u, &limit.snapshots, &g, delta, p_exp)?;
            h.push(dh);
            l.push(dl);
        }
        Ok((h, l))
    })?;
    let hs: Vec<Vec<f64>> = per_path.iter().map(|p| p.0.clone()).collect();
    let ls: Vec<Vec<f64>> = per_path.iter().map(|p| p.1.clone()).collect();
    let rh = ConvergenceReport::new(format!("L2(0,T;H^{delta}) distance"), mus.clone(), &transpose(&hs), SlopeBasis::Median)?;
    let rl = ConvergenceReport::new(format!("L{p_exp}(0,T;L2) distance"), mus, &transpose(&ls), SlopeBasis::Median)?;
    let assertions = vec![
        strictly_decreasing(5, "median L^p(0,T;L2) distance", &rl.medians()),
        strictly_decreasing(5, "median L2(0,T;H^delta) distance", &rh.medians()),
    ];
    let mut reports = report_files("sk_lp_l2", &rl);
    reports.extend(report_files("sk_h_delta", &rh));
    let summary = format!(
        "dt = {dt:.6e} for every mu and the limit solver\n{}{}{}",
        summary_table("L^p(0,T;L2) distance", &rl),
        summary_table("L2(0,T;H^delta) distance", &rh),
        assertions.iter().map(Assertion::line).collect::<Vec<_>>().join("\n")
    );
    Ok(ScenarioResult {
        scenario: "sk-convergence".into(),
        reports,
        assertions,
        summary,
    })
}

// ------------------------------------------------------------ defect-decay

fn defect_decay(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<ScenarioResult> {
    let g = cfg.grid()?;
    let r = cfg.positive("coeffs.range")?;
    let mus = cfg.mus()?;
    let mu_min = *mus.last().expect("validated");
    let t_final = cfg.positive("time.t_final")?;
    let constant = cfg.primitives()?;
    let tanh = Arc::new(build_primitives(
        &ModelCoefficients::tanh_speed(cfg.f64("coeffs.a")?, cfg.f64("coeffs.gamma0")?, cfg.f64("coeffs.gamma_amp")?)?,
        (-r, r),
        DEFAULT_QUAD_STEP,
    )?);
    let sc = setup(cfg, g.clone(), constant.clone())?;
    let st = setup(cfg, g.clone(), tanh.clone())?;
    let c2 = constant.coeffs.bounds.c2.max(tanh.coeffs.bounds.c2);
    let dt = wave_dt(cfg, &g, c2, mu_min)?;
    let n = steps_for(t_final, dt);
    let build = |s: &Setup| -> Result<Vec<WaveSolver>> {
        mus.iter().map(|&mu| s.wave(mu, cfg.eps_for(mu, &g)?.0, dt)).collect()
    };
    let wc = build(&sc)?;
    let wt = build(&st)?;
    let k = wc[0].noise.k();
    let q = wc[0].noise.q_field.clone();
    let per_path = ctx.map(cfg, |_, seed| {
        let path = sample_path(k, seed, dt, n)?;
        let mut pos = Vec::new();
        let mut field = Vec::new();
        for (i, &mu) in mus.iter().enumerate() {
            let run = run_wave(&wc[i], &sc.u0, &sc.v0, &path, 1)?;
            let times: Vec<f64> = run.snapshots.iter().map(|s| s.t).collect();
            let psi = TestFunction::bump(&times, &g);
            pos.push(defect_integral(&run.snapshots, &constant.coeffs, &q, mu, &psi, &g)?.max(0.0));
            let run = run_wave(&wt[i], &st.u0, &st.v0, &path, 1)?;
            if let Some(b) = run.blow_up {
                return Err(Error::InvalidInput(format!("blow-up at t = {}: {}", b.t, b.reason)));
            }
            field.push(defect_field_integral(&run.snapshots, &tanh.coeffs, &q, mu, &psi, &g)?);
        }
        Ok((pos, field))
    })?;
    let pos: Vec<Vec<f64>> = per_path.iter().map(|p| p.0.clone()).collect();
    let fld: Vec<Vec<f64>> = transpose(&per_path.iter().map(|p| p.1.clone()).collect::<Vec<_>>());
    let rep = crate::diagnostics::defect_decay(&mus, &transpose(&pos))?;
    let fs: Vec<Summary> = fld.iter().map(|v| summarize(v)).collect::<Result<_>>()?;

    let (hi, lo) = (&rep.stats[0], &rep.stats[rep.stats.len() - 1]);
    let mut assertions = vec![Assertion::new(
        6,
        format!("E[(defect)^+] at mu = {} below mu = {}", mu_min, mus[0]),
        format!(
            "{} +- {} vs {} +- {}",
            fmt(lo.mean),
            fmt(2.0 * lo.stderr),
            fmt(hi.mean),
            fmt(2.0 * hi.stderr)
        ),
        "non-overlapping 2 s.e. intervals",
        lo.mean + 2.0 * lo.stderr < hi.mean - 2.0 * hi.stderr,
    )];
    let (f_hi, f_lo) = (&fs[0], &fs[fs.len() - 1]);
    assertions.push(Assertion::new(
        6,
        format!("<a_hat, psi> at mu = {mu_min} (tanh preset)"),
        format!(
            "{} (s.e. {}), at mu = {}: {}",
            fmt(f_lo.mean),
            fmt(f_lo.stderr),
            mus[0],
            fmt(f_hi.mean)
        ),
        "within 2 s.e. of 0, or smaller in magnitude than at the largest mu",
        f_lo.mean.abs() <= 2.0 * f_lo.stderr || f_lo.mean.abs() < f_hi.mean.abs(),
    ));
    let mut fcsv = String::from("parameter,mean,stderr\n");
    for (m, s) in mus.iter().zip(&fs) {
        let _ = writeln!(fcsv, "{m:.12e},{:.12e},{:.12e}", s.mean, s.stderr);
    }
    let mut reports = report_files("defect_positive_part", &rep);
    reports.push(Report {
        file: "defect_field.csv".into(),
        content: fcsv,
    });
    let summary = format!(
        "{}{}",
        summary_table("E[(defect)^+], constant preset", &rep),
        assertions.iter().map(Assertion::line).collect::<Vec<_>>().join("\n")
    );
    Ok(ScenarioResult {
        scenario: "defect-decay".into(),
        reports,
        assertions,
        summary,
    })
}

// --------------------------------------------------------------- ito-suite

fn ito_suite(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<ScenarioResult> {
    let g = PeriodicGrid::new(cfg.usize("ito.n")?)?;
    let sigma: Vec<Field> = cfg
        .noise_modes()?
        .iter()
        .map(|m| m.sample(&g))
        .collect::<Result<_>>()?;
    let setup = ItoSetup {
        sigma,
        h: 1.0,
        psi: ItoPsi::Sine,
        drift: ItoDrift::Laplacian,
        u0: cfg.initial("initial.u0", &g)?,
        phi: g.sample(|x| 1.0 + 0.5 * (2.0 * PI * x).cos()),
        t_final: cfg.positive("ito.t_final")?,
        dt0: cfg.positive("ito.dt")?,
        levels: cfg.usize("grid.levels")? as u32,
        paths: cfg.paths()?,
        seed: cfg.seed()?,
        gamma_lin: cfg.f64("ito.gamma_lin")?,
        gamma_sin: cfg.f64("ito.gamma_sin")?,
        v0: g.zeros(),
        phi_rate: 0.0,
        grid: g.clone(),
    };
    // The first check keeps a constant start so the martingale part dominates;
    // the second uses generic data without symmetry cancellations.
    let second = ItoSetup {
        u0: cfg.initial("ito.second_u0", &g)?,
        v0: cfg.initial("ito.second_v0", &g)?,
        phi_rate: cfg.f64("ito.phi_rate")?,
        ..setup.clone()
    };
    let run = |setup: &ItoSetup, residual: fn(&ItoSetup, &WienerPath) -> f64, label: &str| -> Result<ConvergenceReport> {
        match ctx.only_path {
            None => ito_check(setup, residual, label, ctx.workers),
            Some(_) => {
                let per = ctx.map(cfg, |_, seed| {
                    let n0 = steps_for(setup.t_final, setup.dt0);
                    let mut path = sample_path(setup.sigma.len(), seed, setup.dt0, n0)?;
                    let mut out = Vec::new();
                    for l in 0..setup.levels {
                        if l > 0 {
                            path = path.refine();
                        }
                        out.push(residual(setup, &path).powi(2));
                    }
                    Ok(out)
                })?;
                let dts = (0..setup.levels).map(|l| setup.dt0 / f64::powi(2.0, l as i32)).collect();
                ConvergenceReport::new(label, dts, &transpose(&per), SlopeBasis::Mean)
            }
        }
    };
    let r1 = run(&setup, ito1_residual, "first Ito formula, mean-square residual")?;
    let r2 = run(&second, ito2_residual, "second Ito formula, mean-square residual")?;
    let slope_assert = |name: &str, r: &ConvergenceReport| {
        let s = r.slope.unwrap_or(f64::NAN);
        Assertion::new(7, name, format!("slope {s:.4}"), "1 +- 0.3", (s - 1.0).abs() <= 0.3)
    };
    let assertions = vec![
        slope_assert("first Ito formula mean-square residual slope", &r1),
        slope_assert("second Ito formula mean-square residual slope", &r2),
    ];
    let mut reports = report_files("ito_first", &r1);
    reports.extend(report_files("ito_second", &r2));
    let summary = format!(
        "{}{}{}",
        summary_table(&r1.label, &r1),
        summary_table(&r2.label, &r2),
        assertions.iter().map(Assertion::line).collect::<Vec<_>>().join("\n")
    );
    Ok(ScenarioResult {
        scenario: "ito-suite".into(),
        reports,
        assertions,
        summary,
    })
}

// ---------------------------------------------------------- theta-residual

fn theta_residual(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<ScenarioResult> {
    let prims = cfg.primitives()?;
    let levels = cfg.usize("grid.levels")?;
    let mu = cfg.mus()?[0];
    let t_final = cfg.positive("time.t_final")?;
    let g0 = level_grid(cfg, 0)?;
    let dt0 = wave_dt(cfg, &g0, prims.coeffs.bounds.c2, mu)?;
    let n0 = steps_for(t_final, dt0);
    let solvers: Vec<(Setup, WaveSolver)> = (0..levels)
        .map(|l| {
            let g = level_grid(cfg, l)?;
            let s = setup(cfg, g.clone(), prims.clone())?;
            let (eps, _) = cfg.eps_for(mu, &g)?;
            let w = s.wave(mu, eps, dt0 / f64::powi(2.0, l as i32))?;
            Ok((s, w))
        })
        .collect::<Result<_>>()?;
    // Constant speed, cut-off off: Theta must stay at zero.
    let r = cfg.positive("coeffs.range")?;
    let cprims = Arc::new(build_primitives(&ModelCoefficients::constant(1.0, 1.0)?, (-r, r), DEFAULT_QUAD_STEP)?);
    let sc = setup(cfg, g0.clone(), cprims)?;
    let mut wc = sc.wave(mu, cfg.eps_for(mu, &g0)?.0, WaveSolver::cfl_limit(&g0, mu, 1.0, cfg.positive("time.cfl")?))?;
    wc.params.chi = false;
    let nc = steps_for(t_final, wc.params.dt);

    let k = solvers[0].1.noise.k();
    let per_path = ctx.map(cfg, |_, seed| {
        let mut path = sample_path(k, seed, dt0, n0)?;
        let mut out = Vec::with_capacity(levels + 1);
        for (l, (s, w)) in solvers.iter().enumerate() {
            if l > 0 {
                path = path.refine();
            }
            let run = run_wave(w, &s.u0, &s.v0, &path, path.n_steps)?;
            if let Some(b) = run.blow_up {
                return Err(Error::InvalidInput(format!("blow-up at t = {}: {}", b.t, b.reason)));
            }
            out.push(theta_residual_l1(&run.theta, mu));
        }
        let cpath = sample_path(k, seed, wc.params.dt, nc)?;
        let mut state = wc.init_state(&sc.u0, &sc.v0)?;
        let mut worst = state.theta.abs();
        for i in 0..nc {
            wc.step(&mut state, cpath.step(i))?;
            worst = worst.max(state.theta.abs());
        }
        out.push(worst);
        Ok(out)
    })?;
    let dts: Vec<f64> = (0..levels).map(|l| dt0 / f64::powi(2.0, l as i32)).collect();
    let cols = transpose(&per_path);
    let rep = ConvergenceReport::new("Theta residual, L1 in time", dts, &cols[..levels], SlopeBasis::Mean)?;
    let worst = cols[levels].iter().copied().fold(0.0, f64::max);
    let assertions = vec![
        ratio_assertion(9, "mean L1 Theta residual per coupled refinement", &rep.means(), 1.4),
        Assertion::new(9, "max |Theta| with constant c and no cut-off", fmt(worst), "<= 1e-12", worst <= 1e-12),
    ];
    let summary = format!(
        "{}{}",
        summary_table("Theta residual", &rep),
        assertions.iter().map(Assertion::line).collect::<Vec<_>>().join("\n")
    );
    Ok(ScenarioResult {
        scenario: "theta-residual".into(),
        reports: report_files("theta_residual", &rep),
        assertions,
        summary,
    })
}
