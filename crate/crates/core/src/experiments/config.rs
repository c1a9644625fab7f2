//! Flat `key = value` configuration with dotted keys.
//!
//! ```text
//! # comment
//! scenario = sk-convergence
//! coeffs.preset = tanh
//! mu.list = 0.1, 0.03, 0.01
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::coeffs::{build_primitives, ModelCoefficients, PrimitiveMaps, DEFAULT_QUAD_STEP};
use crate::error::{Error, Result};
use crate::grid::{Field, PeriodicGrid};
use crate::noise::ModeProfile;

use super::scenarios::{self, SCENARIOS};

/// Keys accepted in a config file with their defaults. Scenario defaults are
/// layered on top of these, then the file on top of both.
const BASE: &[(&str, &str)] = &[
    ("scenario", ""),
    ("coeffs.preset", "tanh"),
    ("coeffs.c0", "1"),
    ("coeffs.gamma0", "1"),
    ("coeffs.a", "2"),
    ("coeffs.gamma_amp", "0.3"),
    ("coeffs.table", ""),
    ("coeffs.source_amp", "0"),
    ("coeffs.range", "10"),
    ("grid.n", "32"),
    ("grid.levels", "3"),
    ("time.t_final", "0.5"),
    ("time.dt", "0"),
    ("time.cfl", "0.5"),
    ("time.stride", "1"),
    ("mu.list", "0.1"),
    ("eps.value", "0.05"),
    ("eps.rule", "min-mu"),
    ("noise.modes", "sin:1:0.3"),
    ("initial.u0", "sin:1:0.3"),
    ("initial.v0", ""),
    ("ensemble.paths", "20"),
    ("ensemble.seed", "1"),
    ("ensemble.workers", "0"),
    ("output.dir", "out"),
    ("sk.delta", "0.5"),
    ("sk.p", "2"),
    ("ito.t_final", "0.05"),
    ("ito.dt", "0.001"),
    ("ito.n", "16"),
];

/// How the mollifier width follows `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsRule {
    /// `eps = max(min(eps.value, mu), dx)`.
    MinMu,
    /// `eps = max(eps.value, dx)`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Bytes of the user file, echoed into the manifest.
    pub source: String,
    values: BTreeMap<String, String>,
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Parses `text` over the base and scenario defaults. Unknown keys and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_scenario(text, None)
    }

    /// As [`parse`](Self::parse), with `scenario` replacing the file's
    /// scenario entry.
    pub fn parse_with_scenario(text: &str, scenario: Option<&str>) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let scenario = scenario.map(str::to_string).or_else(|| {
            pairs
                .iter()
                .find(|(k, _)| k == "scenario")
                .map(|(_, v)| v.clone())
        });
        let mut cfg = Self::defaults(scenario.as_deref())?;
        let mut seen = std::collections::BTreeSet::new();
        for (k, v) in pairs {
            if k == "scenario" {
                if !seen.insert(k) {
                    return Err(Error::Config("key 'scenario' given twice".into()));
                }
                continue;
            }
            if !cfg.values.contains_key(&k) {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
            if !seen.insert(k.clone()) {
                return Err(Error::Config(format!("key '{k}' given twice")));
            }
            cfg.values.insert(k, v);
        }
        cfg.source = text.to_string();
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Base defaults overlaid with the named scenario's defaults.
    pub fn defaults(scenario: Option<&str>) -> Result<Self> {
        let mut values: BTreeMap<String, String> = BASE
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        if let Some(name) = scenario {
            let s = scenarios::lookup(name)?;
            values.insert("scenario".into(), name.to_string());
            for (k, v) in s.defaults {
                values.insert(k.to_string(), v.to_string());
            }
        }
        Ok(Self {
            source: String::new(),
            values,
        })
    }

    /// Defaults of a registered scenario.
    pub fn for_scenario(name: &str) -> Result<Self> {
        Self::defaults(Some(name))
    }

    /// Sets a key that must already exist.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key)?;
        let x: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("{key}: '{v}' is not a number")))?;
        if !x.is_finite() {
            return Err(Error::Config(format!("{key}: must be finite")));
        }
        Ok(x)
    }

    pub fn positive(&self, key: &str) -> Result<f64> {
        let x = self.f64(key)?;
        if x <= 0.0 {
            return Err(Error::Config(format!("{key}: must be positive, got {x}")));
        }
        Ok(x)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: '{v}' is not a nonnegative integer")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.raw(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: '{v}' is not an unsigned integer")))
    }

    pub fn list_f64(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Config(format!("{key}: '{s}' is not a number")))
            })
            .collect()
    }

    pub fn scenario(&self) -> Result<&str> {
        let s = self.raw("scenario")?;
        if s.is_empty() {
            return Err(Error::Config("no scenario given".into()));
        }
        Ok(s)
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("ensemble.seed")
    }

    pub fn paths(&self) -> Result<usize> {
        let m = self.usize("ensemble.paths")?;
        if m == 0 {
            return Err(Error::Config("ensemble.paths must be >= 1".into()));
        }
        Ok(m)
    }

    /// `None` means all cores.
    pub fn workers(&self) -> Result<Option<usize>> {
        Ok(match self.usize("ensemble.workers")? {
            0 => None,
            w => Some(w),
        })
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.raw("output.dir")?))
    }

    pub fn grid(&self) -> Result<PeriodicGrid> {
        PeriodicGrid::new(self.usize("grid.n")?)
    }

    /// Strictly decreasing, positive.
    pub fn mus(&self) -> Result<Vec<f64>> {
        let mus = self.list_f64("mu.list")?;
        if mus.is_empty() {
            return Err(Error::Config("mu.list is empty".into()));
        }
        if mus.iter().any(|m| *m <= 0.0) {
            return Err(Error::Config("mu.list entries must be positive".into()));
        }
        if mus.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("mu.list must be strictly decreasing".into()));
        }
        Ok(mus)
    }

    pub fn eps_rule(&self) -> Result<EpsRule> {
        match self.raw("eps.rule")? {
            "min-mu" => Ok(EpsRule::MinMu),
            "fixed" => Ok(EpsRule::Fixed),
            other => Err(Error::Config(format!("eps.rule: unknown rule '{other}'"))),
        }
    }

    /// Effective mollifier width for `mu` on `grid`, and whether the grid
    /// clamp was the active bound.
    pub fn eps_for(&self, mu: f64, grid: &PeriodicGrid) -> Result<(f64, bool)> {
        let user = self.positive("eps.value")?;
        let e = match self.eps_rule()? {
            EpsRule::MinMu => user.min(mu),
            EpsRule::Fixed => user,
        };
        Ok(if e < grid.dx() {
            (grid.dx(), true)
        } else {
            (e, false)
        })
    }

    pub fn coefficients(&self) -> Result<ModelCoefficients> {
        let co = match self.raw("coeffs.preset")? {
            "constant" => {
                ModelCoefficients::constant(self.f64("coeffs.c0")?, self.f64("coeffs.gamma0")?)?
            }
            "tanh" => ModelCoefficients::tanh_speed(
                self.f64("coeffs.a")?,
                self.f64("coeffs.gamma0")?,
                self.f64("coeffs.gamma_amp")?,
            )?,
            "table" => {
                let p = self.raw("coeffs.table")?;
                if p.is_empty() {
                    return Err(Error::Config("coeffs.table must name a CSV file".into()));
                }
                ModelCoefficients::from_csv(Path::new(p))?
            }
            other => return Err(Error::Config(format!("coeffs.preset: unknown preset '{other}'"))),
        };
        let amp = self.f64("coeffs.source_amp")?;
        Ok(if amp != 0.0 { co.with_sine_source(amp) } else { co })
    }

    pub fn primitives(&self) -> Result<Arc<PrimitiveMaps>> {
        let r = self.positive("coeffs.range")?;
        Ok(Arc::new(build_primitives(&self.coefficients()?, (-r, r), DEFAULT_QUAD_STEP)?))
    }

    fn profiles(&self, key: &str) -> Result<Vec<ModeProfile>> {
        self.raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                if let Some(v) = s.strip_prefix("const:") {
                    let a: f64 = v
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: bad constant '{s}'")))?;
                    Ok(ModeProfile::Cos { k: 0, amplitude: a })
                } else {
                    ModeProfile::parse(s)
                }
            })
            .collect()
    }

    pub fn noise_modes(&self) -> Result<Vec<ModeProfile>> {
        self.profiles("noise.modes")
    }

    /// Sum of the listed profiles (`sin:K:A`, `cos:K:A`, `const:A`).
    pub fn initial(&self, key: &str, grid: &PeriodicGrid) -> Result<Field> {
        let mut f = grid.zeros();
        for p in self.profiles(key)? {
            let s = p.sample(grid)?;
            for (a, b) in f.iter_mut().zip(s.iter()) {
                *a += b;
            }
        }
        Ok(f)
    }

    /// Checks every generic key and the scenario's own preconditions.
    pub fn validate(&self) -> Result<()> {
        let name = self.scenario()?;
        let s = scenarios::lookup(name)?;
        self.coefficients()?;
        self.grid()?;
        self.mus()?;
        self.paths()?;
        self.seed()?;
        self.workers()?;
        self.positive("time.t_final")?;
        let dt = self.f64("time.dt")?;
        if dt < 0.0 {
            return Err(Error::Config("time.dt must be >= 0 (0 selects the CFL step)".into()));
        }
        let cfl = self.positive("time.cfl")?;
        if cfl > 0.9 {
            return Err(Error::Config(format!("time.cfl must be <= 0.9, got {cfl}")));
        }
        if self.usize("time.stride")? == 0 {
            return Err(Error::Config("time.stride must be >= 1".into()));
        }
        if self.usize("grid.levels")? == 0 {
            return Err(Error::Config("grid.levels must be >= 1".into()));
        }
        self.positive("eps.value")?;
        self.eps_rule()?;
        self.noise_modes()?;
        let g = self.grid()?;
        self.initial("initial.u0", &g)?;
        self.initial("initial.v0", &g)?;
        let delta = self.f64("sk.delta")?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("sk.delta must lie in (0, 1), got {delta}")));
        }
        if self.f64("sk.p")? < 1.0 {
            return Err(Error::Config("sk.p must be >= 1".into()));
        }
        self.positive("ito.t_final")?;
        self.positive("ito.dt")?;
        PeriodicGrid::new(self.usize("ito.n")?)?;
        (s.validate)(self)
    }

    /// Effective `key = value` lines in key order.
    pub fn effective(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Names of all registered scenarios.
pub fn scenario_names() -> Vec<&'static str> {
    SCENARIOS.iter().map(|s| s.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = ExperimentConfig::parse(
            "# test\nscenario = theta-residual\n grid.n = 64 # inline\nmu.list = 0.3, 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.usize("grid.n").unwrap(), 64);
        assert_eq!(cfg.mus().unwrap(), vec![0.3, 0.1]);
        assert_eq!(cfg.scenario().unwrap(), "theta-residual");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse("scenario = nope").is_err());
        assert!(ExperimentConfig::parse("scenario = theta-residual\nbogus = 1").is_err());
        assert!(ExperimentConfig::parse("scenario = theta-residual\ngrid.n = 8\ngrid.n = 16").is_err());
        assert!(ExperimentConfig::parse("just words").is_err());
        let cfg = ExperimentConfig::parse("scenario = theta-residual\nmu.list = 0.1, 0.2").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sk_convergence_needs_three_mus() {
        let cfg = ExperimentConfig::parse("scenario = sk-convergence\nmu.list = 0.1").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("3"), "{err}");
    }

    #[test]
    fn eps_rule_clamps_to_grid() {
        let cfg = ExperimentConfig::parse("scenario = sk-convergence\neps.value = 0.02\ngrid.n = 64").unwrap();
        let g = cfg.grid().unwrap();
        assert_eq!(cfg.eps_for(0.1, &g).unwrap(), (0.02, false));
        assert_eq!(cfg.eps_for(0.01, &g).unwrap(), (g.dx(), true));
    }

    #[test]
    fn initial_profiles_sum() {
        let cfg = ExperimentConfig::parse("scenario = sk-convergence\ninitial.u0 = const:0.5, sin:1:1").unwrap();
        let g = PeriodicGrid::new(16).unwrap();
        let u = cfg.initial("initial.u0", &g).unwrap();
        assert!((u[4] - 1.5).abs() < 1e-15);
        assert!(cfg.initial("initial.v0", &g).unwrap().max_abs() == 0.0);
    }
}
