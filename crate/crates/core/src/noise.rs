//! Truncated cylindrical Wiener noise: mode profiles, mollified profiles,
//! and reproducible increment paths with Brownian-bridge refinement.

use std::f64::consts::PI;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{DerivativeScheme, Field, PeriodicGrid};

/// One spatial profile `sigma_k`.
#[derive(Debug, Clone, PartialEq)]
pub enum ModeProfile {
    /// `amplitude * sin(2 pi k x)`
    Sin { k: u32, amplitude: f64 },
    /// `amplitude * cos(2 pi k x)`; `k = 0` is a constant profile.
    Cos { k: u32, amplitude: f64 },
    /// Values at the grid nodes.
    Table(Vec<f64>),
}

impl ModeProfile {
    /// Parses `sin:K:A`, `cos:K:A`.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.trim().split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "noise mode '{spec}' must look like sin:K:A or cos:K:A"
            )));
        }
        let k: u32 = parts[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad wavenumber in '{spec}'")))?;
        let amplitude: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Config(format!("bad amplitude in '{spec}'")))?;
        match parts[0] {
            "sin" if k == 0 => Err(Error::Config("sin:0 is identically zero".into())),
            "sin" => Ok(Self::Sin { k, amplitude }),
            "cos" => Ok(Self::Cos { k, amplitude }),
            other => Err(Error::Config(format!("unknown mode type '{other}'"))),
        }
    }

    /// `(sup |sigma|, sup |sigma'|)`; exact for trigonometric profiles,
    /// sampled (centered differences) for tables.
    fn w1_inf(&self, grid: &PeriodicGrid, sampled: &Field) -> Result<(f64, f64)> {
        Ok(match self {
            Self::Sin { k, amplitude } | Self::Cos { k, amplitude } => {
                (amplitude.abs(), 2.0 * PI * *k as f64 * amplitude.abs())
            }
            Self::Table(_) => (
                sampled.max_abs(),
                grid.derivative(sampled, DerivativeScheme::Centered)?.max_abs(),
            ),
        })
    }

    pub fn sample(&self, grid: &PeriodicGrid) -> Result<Field> {
        match self {
            Self::Sin { k, amplitude } => {
                let k = *k as f64;
                Ok(grid.sample(|x| amplitude * (2.0 * PI * k * x).sin()))
            }
            Self::Cos { k, amplitude } => {
                let k = *k as f64;
                Ok(grid.sample(|x| amplitude * (2.0 * PI * k * x).cos()))
            }
            Self::Table(v) => {
                let f = Field::new(v.clone())?;
                grid.check(&f)?;
                Ok(f)
            }
        }
    }
}

/// `sigma_k = A k^{-r} sin(2 pi k x)` and `A k^{-r} cos(2 pi k x)` for
/// `k = 1..=modes`.
pub fn power_law_modes(amplitude: f64, r: f64, modes: u32) -> Vec<ModeProfile> {
    (1..=modes)
        .flat_map(|k| {
            let a = amplitude * (k as f64).powf(-r);
            [
                ModeProfile::Sin { k, amplitude: a },
                ModeProfile::Cos { k, amplitude: a },
            ]
        })
        .collect()
}

/// Which domination `|sigma_k^eps| <= |sigma_k|` holds on the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domination {
    /// `max |sigma^eps| <= max |sigma|` for every mode.
    pub sup_norm: bool,
    /// `|sigma^eps(x)| <= |sigma(x)|` at every node for every mode.
    pub pointwise: bool,
}

#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub grid: PeriodicGrid,
    pub eps: f64,
    pub profiles: Vec<ModeProfile>,
    pub sigma: Vec<Field>,
    pub sigma_eps: Vec<Field>,
    pub q_field: Field,
    pub q_eps_field: Field,
    /// `sum_k max(sup|sigma_k|, sup|sigma_k'|)^2`.
    pub q0: f64,
    pub domination: Domination,
}

impl NoiseSpec {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// `||q^eps||_{L^1}`.
    pub fn q_eps_l1(&self) -> f64 {
        self.grid.integral(&self.q_eps_field)
    }
}

/// Samples and mollifies the profiles. An empty list is an error unless
/// `allow_deterministic` is set.
pub fn build_noise(
    profiles: &[ModeProfile],
    grid: &PeriodicGrid,
    eps: f64,
    allow_deterministic: bool,
) -> Result<NoiseSpec> {
    if profiles.is_empty() && !allow_deterministic {
        return Err(Error::EmptyNoise);
    }
    let tol = 1e-12;
    let mut sigma = Vec::with_capacity(profiles.len());
    let mut sigma_eps = Vec::with_capacity(profiles.len());
    let mut q0 = 0.0;
    let mut domination = Domination {
        sup_norm: true,
        pointwise: true,
    };
    let weights_check = grid.mollifier_weights(eps)?;
    debug_assert!(!weights_check.is_empty());
    for p in profiles {
        let s = p.sample(grid)?;
        let (sup, sup_d) = p.w1_inf(grid, &s)?;
        q0 += sup.max(sup_d).powi(2);
        let se = grid.mollify(&s, eps)?;
        domination.sup_norm &= se.max_abs() <= s.max_abs() + tol;
        domination.pointwise &= se.iter().zip(s.iter()).all(|(a, b)| a.abs() <= b.abs() + tol);
        sigma.push(s);
        sigma_eps.push(se);
    }
    let square_sum = |fields: &[Field]| {
        let mut q = grid.zeros();
        for f in fields {
            for (qi, fi) in q.iter_mut().zip(f.iter()) {
                *qi += fi * fi;
            }
        }
        q
    };
    let q_field = square_sum(&sigma);
    let q_eps_field = square_sum(&sigma_eps);
    if !q0.is_finite() {
        return Err(Error::NonFinite {
            context: "q0",
            index: 0,
        });
    }
    Ok(NoiseSpec {
        grid: grid.clone(),
        eps,
        profiles: profiles.to_vec(),
        sigma,
        sigma_eps,
        q_field,
        q_eps_field,
        q0,
        domination,
    })
}

/// Gaussian increments `dW[step][mode]` with variance `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    pub seed: u64,
    pub dt: f64,
    pub n_steps: usize,
    pub k: usize,
    /// Number of bridge refinements applied to the root path.
    pub level: u32,
    increments: Vec<f64>,
}

/// Increments live on this fixed-point lattice so that bridge halves sum
/// back to their parent without rounding.
const LATTICE: f64 = (1u64 << 48) as f64;

fn quantize(x: f64) -> f64 {
    (x * LATTICE).round() / LATTICE
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 64-bit mix of two keys.
pub fn hash_seed(base: u64, index: u64) -> u64 {
    splitmix(splitmix(base) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Standard normal draw at counter position `(key, stream, step)`.
/// Two 64-bit words per step feed one Box-Muller transform, so any step can be
/// regenerated without its predecessors.
fn normal_at(key: u64, stream: u64, step: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng.set_word_pos(4 * step as u128);
    let a = rng.next_u64();
    let b = rng.next_u64();
    let u1 = ((a >> 11) + 1) as f64 / (1u64 << 53) as f64;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Root path: increment `(step, mode)` depends only on `(seed, step, mode)`.
pub fn sample_path(k: usize, seed: u64, dt: f64, n_steps: usize) -> Result<WienerPath> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let sq = dt.sqrt();
    let key = hash_seed(seed, 0);
    let mut increments = vec![0.0; n_steps * k];
    for n in 0..n_steps {
        for m in 0..k {
            increments[n * k + m] = quantize(sq * normal_at(key, m as u64, n as u64));
        }
    }
    Ok(WienerPath {
        seed,
        dt,
        n_steps,
        k,
        level: 0,
        increments,
    })
}

impl WienerPath {
    /// Increments of step `n`, one per mode.
    pub fn step(&self, n: usize) -> &[f64] {
        &self.increments[n * self.k..(n + 1) * self.k]
    }

    pub fn increment(&self, n: usize, mode: usize) -> f64 {
        self.increments[n * self.k + mode]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Final time `n_steps * dt`.
    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    /// Brownian-bridge midpoint refinement: the first half of parent increment
    /// `dW` is `dW/2 + sqrt(dt)/2 Z`, the second half is the exact remainder.
    pub fn refine(&self) -> WienerPath {
        let level = self.level + 1;
        let key = hash_seed(self.seed, level as u64);
        let half_sd = 0.5 * self.dt.sqrt();
        let k = self.k;
        let mut increments = vec![0.0; 2 * self.increments.len()];
        for n in 0..self.n_steps {
            for m in 0..k {
                let dw = self.increments[n * k + m];
                let a = quantize(0.5 * dw + half_sd * normal_at(key, m as u64, n as u64));
                increments[2 * n * k + m] = a;
                increments[(2 * n + 1) * k + m] = dw - a;
            }
        }
        WienerPath {
            seed: self.seed,
            dt: 0.5 * self.dt,
            n_steps: 2 * self.n_steps,
            k,
            level,
            increments,
        }
    }

    /// Refines `times` times.
    pub fn refine_by(&self, times: u32) -> WienerPath {
        (0..times).fold(self.clone(), |p, _| p.refine())
    }

    /// Sums consecutive pairs of increments.
    pub fn coarsen(&self) -> Result<WienerPath> {
        if self.n_steps % 2 != 0 || self.level == 0 {
            return Err(Error::InvalidInput(
                "only refined paths with an even step count can be coarsened".into(),
            ));
        }
        let k = self.k;
        let n_steps = self.n_steps / 2;
        let mut increments = vec![0.0; n_steps * k];
        for n in 0..n_steps {
            for m in 0..k {
                increments[n * k + m] =
                    self.increments[2 * n * k + m] + self.increments[(2 * n + 1) * k + m];
            }
        }
        Ok(WienerPath {
            seed: self.seed,
            dt: 2.0 * self.dt,
            n_steps,
            k,
            level: self.level - 1,
            increments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> PeriodicGrid {
        PeriodicGrid::new(n).unwrap()
    }

    #[test]
    fn single_sine_mode() {
        let g = grid(64);
        let spec = build_noise(&[ModeProfile::Sin { k: 1, amplitude: 0.1 }], &g, g.dx(), false).unwrap();
        for (j, q) in spec.q_field.iter().enumerate() {
            let s = (2.0 * PI * g.node(j)).sin();
            assert!((q - 0.01 * s * s).abs() < 1e-15);
        }
        assert!((spec.q0 - (0.1 * 2.0 * PI).powi(2)).abs() < 1e-12);
        assert!((spec.q0 - 0.394784).abs() < 1e-6);
    }

    #[test]
    fn constant_mode_is_fixed_by_mollifier() {
        let g = grid(64);
        let spec = build_noise(&[ModeProfile::Cos { k: 0, amplitude: 0.2 }], &g, 0.1, false).unwrap();
        for v in spec.sigma_eps[0].iter() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        for v in spec.q_eps_field.iter() {
            assert!((v - 0.04).abs() < 1e-15);
        }
        assert!(spec.domination.pointwise && spec.domination.sup_norm);
    }

    /// Fine-grid oracle: the triangular kernel of half-width eps applied to a
    /// sine damps it by `(sin(pi k eps)/(pi k eps))^2`.
    #[test]
    fn mollified_sine_domination_and_rate() {
        let g = grid(256);
        let mut errors = Vec::new();
        for eps in [0.1, 0.05, 0.025] {
            let spec = build_noise(&[ModeProfile::Sin { k: 1, amplitude: 0.1 }], &g, eps, false).unwrap();
            let se = &spec.sigma_eps[0];
            assert!(se.max_abs() <= 0.1);
            assert!(spec.domination.sup_norm);
            let err = se
                .iter()
                .zip(spec.sigma[0].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            // Second moment of a triangle of half-width eps is eps^2/6.
            let bound = 0.1 * (2.0 * PI).powi(2) * eps * eps / 12.0;
            assert!(err <= bound * 1.05, "eps {eps}: {err} > {bound}");
            errors.push(err);
        }
        assert!(errors[0] / errors[1] > 3.5 && errors[1] / errors[2] > 3.5);
    }

    #[test]
    fn sign_changing_profile_reports_pointwise_failure() {
        let g = grid(64);
        // A pure sine is an eigenfunction of the kernel, so it is dominated
        // pointwise; a two-mode profile is not.
        let spec = build_noise(&[ModeProfile::Sin { k: 1, amplitude: 0.1 }], &g, 0.1, false).unwrap();
        assert!(spec.domination.pointwise);
        let table = g.sample(|x| (2.0 * PI * x).sin() + 0.5 * (6.0 * PI * x).cos()).0;
        let spec = build_noise(&[ModeProfile::Table(table)], &g, 0.1, false).unwrap();
        assert!(spec.domination.sup_norm);
        assert!(!spec.domination.pointwise);
    }

    #[test]
    fn empty_profile_list() {
        let g = grid(16);
        assert_eq!(build_noise(&[], &g, g.dx(), false).unwrap_err(), Error::EmptyNoise);
        let spec = build_noise(&[], &g, g.dx(), true).unwrap();
        assert_eq!(spec.k(), 0);
        assert_eq!(spec.q_eps_l1(), 0.0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            ModeProfile::parse("sin:2:0.05").unwrap(),
            ModeProfile::Sin { k: 2, amplitude: 0.05 }
        );
        assert!(ModeProfile::parse("tan:1:1").is_err());
        assert!(ModeProfile::parse("sin:0:1").is_err());
        assert_eq!(power_law_modes(1.0, 2.0, 2).len(), 4);
    }

    #[test]
    fn paths_are_deterministic() {
        let a = sample_path(3, 42, 1e-3, 100).unwrap();
        let b = sample_path(3, 42, 1e-3, 100).unwrap();
        assert_eq!(a, b);
        let c = sample_path(3, 43, 1e-3, 100).unwrap();
        assert_ne!(a, c);
        // A shorter path is a prefix: draws are keyed by step, not by sequence.
        let d = sample_path(3, 42, 1e-3, 40).unwrap();
        assert_eq!(&a.increments()[..120], d.increments());
    }

    #[test]
    fn increment_moments() {
        let dt: f64 = 1e-2;
        let p = sample_path(1, 7, dt, 100_000).unwrap();
        let n = p.increments().len() as f64;
        let mean = p.increments().iter().sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * dt.sqrt() / n.sqrt());
        let var = p.increments().iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var / dt - 1.0).abs() < 0.05);
    }

    #[test]
    fn refinement_is_exact() {
        let p = sample_path(2, 11, 1e-2, 500).unwrap();
        let r = p.refine();
        for n in 0..p.n_steps {
            for m in 0..2 {
                assert_eq!(r.increment(2 * n, m) + r.increment(2 * n + 1, m), p.increment(n, m));
            }
        }
        let rr = r.refine();
        assert_eq!(rr.coarsen().unwrap().coarsen().unwrap().increments(), p.increments());
        assert_eq!(rr.dt, p.dt / 4.0);
    }

    #[test]
    fn refined_quadratic_variation() {
        let t = 1.0;
        let k = 4;
        let p = sample_path(k, 5, t / 2500.0, 2500).unwrap().refine();
        let qv: f64 = p.increments().iter().map(|x| x * x).sum();
        assert!((qv / (t * k as f64) - 1.0).abs() < 0.05);
    }
}
