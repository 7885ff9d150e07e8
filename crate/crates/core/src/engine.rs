//! Split-step simulation: explicit `B`, exact Ornstein–Uhlenbeck step for the
//! linear part, proximal (implicit) step for the singular drift.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{proximal_into, DriftSpec, GalerkinModel};
use crate::rng::{NoiseStream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SplitProximal,
    ExplicitEuler,
}

/// Whether `B` enters the dynamics. In `Reference` mode paths solve the
/// `B = 0` equation and the Girsanov integrals of `B` are still recorded, so
/// that weighted averages represent the perturbed process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    Drifted,
    Reference,
}

pub const DEFAULT_BLOWUP_GUARD: f64 = 1e6;
const MAX_INVALID_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub master_seed: u64,
    pub scheme: Scheme,
    pub ensemble_size: usize,
    pub dynamics: Dynamics,
    pub blowup_guard: f64,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, master_seed: u64, ensemble_size: usize) -> Result<Self> {
        let c = Self {
            dt,
            horizon,
            master_seed,
            scheme: Scheme::SplitProximal,
            ensemble_size,
            dynamics: Dynamics::Drifted,
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_dynamics(mut self, dynamics: Dynamics) -> Self {
        self.dynamics = dynamics;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.horizon > 0.0 && self.dt.is_finite() && self.horizon.is_finite()) {
            return Err(Error::InvalidInput("dt and horizon must be positive".into()));
        }
        if self.dt > self.horizon {
            return Err(Error::InvalidInput(format!("dt {} exceeds horizon {}", self.dt, self.horizon)));
        }
        if self.ensemble_size == 0 {
            return Err(Error::InvalidInput("ensemble size must be positive".into()));
        }
        Ok(())
    }

    /// Number of steps; the last one is shortened when `dt` does not divide
    /// the horizon.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn time(&self, i: usize) -> f64 {
        if i >= self.steps() {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }

    /// `dt |B|^2` above this triggers a weight-variance warning.
    pub fn warnings(&self, drift: &DriftSpec) -> Vec<String> {
        let mut w = Vec::new();
        if self.dt * drift.sup_norm.powi(2) > 0.01 {
            w.push(format!("dt*|B|^2 = {:.3e} is not small; weights may be noisy", self.dt * drift.sup_norm.powi(2)));
        }
        w
    }
}

/// Variance factor `(e^{2 a dt} - 1) / (2a)`, equal to `dt` at `a = 0`.
fn ou_variance_factor(a: f64, dt: f64) -> f64 {
    if a == 0.0 {
        dt
    } else {
        (2.0 * a * dt).exp_m1() / (2.0 * a)
    }
}

/// Exact step of `dX = AX dt + sigma dW` driven by standard normals `z`.
pub fn ou_exact_step(model: &GalerkinModel, x: &[f64], dt: f64, z: &[f64]) -> Vec<f64> {
    (0..model.dim())
        .map(|k| {
            let a = model.rate(k);
            (a * dt).exp() * x[k] + model.sigma[k] * ou_variance_factor(a, dt).sqrt() * z[k]
        })
        .collect()
}

/// One split step: explicit `B`, exact OU, proximal `F_0`.
pub fn step(model: &GalerkinModel, drift: &DriftSpec, x: &[f64], dt: f64, z: &[f64]) -> Result<Vec<f64>> {
    let d = model.dim();
    let mut b = vec![0.0; d];
    drift.bounded.eval(x, &mut b);
    let y: Vec<f64> = (0..d).map(|k| x[k] + dt * b[k]).collect();
    let y = ou_exact_step(model, &y, dt, z);
    let mut out = vec![0.0; d];
    proximal_into(&drift.potential, dt, &y, &mut out)?;
    Ok(out)
}

/// Split step whose stochastic convolution `int e^{a(dt-s)} sigma dW(s)` is
/// supplied directly, e.g. assembled from a finer Brownian path.
pub fn step_with_noise(
    model: &GalerkinModel,
    drift: &DriftSpec,
    x: &[f64],
    dt: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let d = model.dim();
    let mut b = vec![0.0; d];
    drift.bounded.eval(x, &mut b);
    let y: Vec<f64> = (0..d).map(|k| (model.rate(k) * dt).exp() * (x[k] + dt * b[k]) + noise[k]).collect();
    let mut out = vec![0.0; d];
    proximal_into(&drift.potential, dt, &y, &mut out)?;
    Ok(out)
}

/// Streaming integrator for a single path. Step `i` always reads the same
/// block of the path's noise stream, so shortened final steps and common
/// random numbers across base points line up.
pub struct Stepper<'a> {
    model: &'a GalerkinModel,
    drift: &'a DriftSpec,
    scheme: Scheme,
    dynamics: Dynamics,
    guard: f64,
    rng: NoiseStream,
    pub x: Vec<f64>,
    pub t: f64,
    pub steps: usize,
    /// `int <sigma^{-1} B(X), dW>`
    pub stoch: f64,
    /// `int |sigma^{-1} B(X)|^2 ds`
    pub quad: f64,
    /// Cumulative applied singular drift, per coordinate.
    pub work: Vec<f64>,
    pub last_dw: Vec<f64>,
    pub valid: bool,
    z: Vec<f64>,
    b: Vec<f64>,
    y: Vec<f64>,
    record_b: bool,
    cached_h: f64,
    decay: Vec<f64>,
    spread: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a GalerkinModel, drift: &'a DriftSpec, cfg: &SimConfig, x0: &[f64], path: u64) -> Self {
        let d = model.dim();
        Self {
            model,
            drift,
            scheme: cfg.scheme,
            dynamics: cfg.dynamics,
            guard: cfg.blowup_guard,
            rng: NoiseStream::new(cfg.master_seed, path, Purpose::Increments),
            x: x0.to_vec(),
            t: 0.0,
            steps: 0,
            stoch: 0.0,
            quad: 0.0,
            work: vec![0.0; d],
            last_dw: vec![0.0; d],
            valid: x0.iter().all(|v| v.is_finite()),
            z: vec![0.0; d],
            b: vec![0.0; d],
            y: vec![0.0; d],
            record_b: !drift.bounded.is_zero(),
            cached_h: f64::NAN,
            decay: vec![0.0; d],
            spread: vec![0.0; d],
        }
    }

    fn refresh(&mut self, h: f64) {
        if h != self.cached_h {
            for k in 0..self.x.len() {
                let a = self.model.rate(k);
                self.decay[k] = (a * h).exp();
                self.spread[k] = self.model.sigma[k] * ou_variance_factor(a, h).sqrt();
            }
            self.cached_h = h;
        }
    }

    pub fn log_weight(&self) -> f64 {
        self.stoch - 0.5 * self.quad
    }

    /// Advance by `h` (at most the configured `dt`).
    pub fn advance(&mut self, h: f64) -> Result<()> {
        let d = self.x.len();
        self.rng.fill_normals(&mut self.z);
        self.steps += 1;
        if !self.valid {
            return Ok(());
        }
        let sq = h.sqrt();
        for k in 0..d {
            self.last_dw[k] = sq * self.z[k];
        }
        if self.record_b {
            self.drift.bounded.eval(&self.x, &mut self.b);
            for k in 0..d {
                let v = self.b[k] / self.model.sigma[k];
                self.stoch += v * self.last_dw[k];
                self.quad += v * v * h;
            }
        } else {
            self.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let use_b = self.dynamics == Dynamics::Drifted && self.record_b;
        match self.scheme {
            Scheme::SplitProximal => {
                self.refresh(h);
                for k in 0..d {
                    let pre = if use_b { self.x[k] + h * self.b[k] } else { self.x[k] };
                    self.y[k] = self.decay[k] * pre + self.spread[k] * self.z[k];
                }
                proximal_into(&self.drift.potential, h, &self.y, &mut self.x)?;
                for k in 0..d {
                    self.work[k] += self.x[k] - self.y[k];
                }
            }
            Scheme::ExplicitEuler => {
                for k in 0..d {
                    let f0 = self.drift.potential.min_norm_drift_1d(self.x[k]);
                    let bk = if use_b { self.b[k] } else { 0.0 };
                    self.work[k] += h * f0;
                    self.x[k] += h * (self.model.rate(k) * self.x[k] + f0 + bk) + self.model.sigma[k] * self.last_dw[k];
                }
            }
        }
        self.t += h;
        if !self.x.iter().all(|v| v.is_finite()) || crate::stats::norm(&self.x) > self.guard {
            self.valid = false;
        }
        Ok(())
    }

    /// Advance on the `dt` grid until time `until`, with a shortened final
    /// step.
    pub fn run_until(&mut self, dt: f64, until: f64) -> Result<()> {
        while self.valid && self.t < until - 1e-12 * until.max(1.0) {
            let h = dt.min(until - self.t);
            self.advance(h)?;
        }
        Ok(())
    }
}

/// A discretized path with co-recorded integrals, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<f64>,
    /// `(N + 1) x dim`
    pub states: Vec<f64>,
    /// `N x dim`, `sqrt(dt) z`
    pub wiener_increments: Vec<f64>,
    /// Running `int <sigma^{-1}B, dW>` and `int |sigma^{-1}B|^2 ds`, `N + 1` each.
    pub girsanov_stoch: Vec<f64>,
    pub girsanov_quad: Vec<f64>,
    /// `(N + 1) x dim`
    pub drift_work: Vec<f64>,
    pub valid: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn increment(&self, i: usize) -> &[f64] {
        &self.wiener_increments[i * self.dim..(i + 1) * self.dim]
    }

    pub fn work(&self, i: usize) -> &[f64] {
        &self.drift_work[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Grid index of time `t`, if `t` is a grid point.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = 1e-9 * t.abs().max(1.0);
        match self.times.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(i) => Ok(i),
            Err(i) => {
                for j in [i.wrapping_sub(1), i] {
                    if j < self.times.len() && (self.times[j] - t).abs() <= tol {
                        return Ok(j);
                    }
                }
                Err(Error::OffGrid { t })
            }
        }
    }

    pub fn log_weight_at(&self, i: usize) -> f64 {
        self.girsanov_stoch[i] - 0.5 * self.girsanov_quad[i]
    }
}

pub fn simulate_path(
    model: &GalerkinModel,
    drift: &DriftSpec,
    x0: &[f64],
    cfg: &SimConfig,
    path: u64,
) -> Result<Trajectory> {
    check_dims(model, x0)?;
    let d = model.dim();
    let n = cfg.steps();
    let mut tr = Trajectory {
        dim: d,
        times: Vec::with_capacity(n + 1),
        states: Vec::with_capacity((n + 1) * d),
        wiener_increments: Vec::with_capacity(n * d),
        girsanov_stoch: Vec::with_capacity(n + 1),
        girsanov_quad: Vec::with_capacity(n + 1),
        drift_work: Vec::with_capacity((n + 1) * d),
        valid: true,
    };
    let mut s = Stepper::new(model, drift, cfg, x0, path);
    let push = |tr: &mut Trajectory, s: &Stepper, t: f64| {
        tr.times.push(t);
        tr.states.extend_from_slice(&s.x);
        tr.girsanov_stoch.push(s.stoch);
        tr.girsanov_quad.push(s.quad);
        tr.drift_work.extend_from_slice(&s.work);
    };
    push(&mut tr, &s, 0.0);
    for i in 1..=n {
        let h = cfg.time(i) - cfg.time(i - 1);
        s.advance(h)?;
        if !s.valid {
            tr.valid = false;
            break;
        }
        tr.wiener_increments.extend_from_slice(&s.last_dw);
        push(&mut tr, &s, cfg.time(i));
    }
    Ok(tr)
}

fn check_dims(model: &GalerkinModel, x0: &[f64]) -> Result<()> {
    if x0.len() != model.dim() {
        return Err(Error::InvalidInput(format!("initial point has {} entries, model has {}", x0.len(), model.dim())));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("initial point must be finite".into()));
    }
    Ok(())
}

/// Two paths from `x0` and `y0` driven by the same noise. Requires `B = 0`.
pub fn synchronous_pair(
    model: &GalerkinModel,
    drift: &DriftSpec,
    x0: &[f64],
    y0: &[f64],
    cfg: &SimConfig,
    path: u64,
) -> Result<(Trajectory, Trajectory)> {
    if !drift.bounded.is_zero() {
        return Err(Error::InvalidInput("synchronous coupling requires B = 0".into()));
    }
    Ok((simulate_path(model, drift, x0, cfg, path)?, simulate_path(model, drift, y0, cfg, path)?))
}

/// Access to the paths of an ensemble, stored or regenerated on demand.
pub trait PathSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn config(&self) -> &SimConfig;
    fn with_path<R>(&self, i: usize, f: impl FnOnce(&Trajectory) -> R) -> Result<R>;

    /// Per-path values in index order, computed in parallel.
    fn map_paths<R: Send>(&self, f: impl Fn(&Trajectory) -> R + Sync) -> Result<Vec<R>> {
        (0..self.len()).into_par_iter().map(|i| self.with_path(i, &f)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub config: SimConfig,
    pub x0: Vec<f64>,
    pub paths: Vec<Trajectory>,
}

impl Ensemble {
    pub fn invalid_count(&self) -> usize {
        self.paths.iter().filter(|p| !p.valid).count()
    }
}

impl PathSource for Ensemble {
    fn len(&self) -> usize {
        self.paths.len()
    }
    fn config(&self) -> &SimConfig {
        &self.config
    }
    fn with_path<R>(&self, i: usize, f: impl FnOnce(&Trajectory) -> R) -> Result<R> {
        Ok(f(&self.paths[i]))
    }
}

/// Ensemble that regenerates path `i` from `(master_seed, i)` when needed.
pub struct LazyEnsemble<'a> {
    pub model: &'a GalerkinModel,
    pub drift: &'a DriftSpec,
    pub x0: Vec<f64>,
    pub config: SimConfig,
}

impl<'a> LazyEnsemble<'a> {
    pub fn new(model: &'a GalerkinModel, drift: &'a DriftSpec, x0: &[f64], config: SimConfig) -> Result<Self> {
        check_dims(model, x0)?;
        config.validate()?;
        Ok(Self { model, drift, x0: x0.to_vec(), config })
    }

    pub fn materialize(&self) -> Result<Ensemble> {
        simulate_ensemble(self.model, self.drift, &self.x0, &self.config)
    }
}

impl PathSource for LazyEnsemble<'_> {
    fn len(&self) -> usize {
        self.config.ensemble_size
    }
    fn config(&self) -> &SimConfig {
        &self.config
    }
    fn with_path<R>(&self, i: usize, f: impl FnOnce(&Trajectory) -> R) -> Result<R> {
        let p = simulate_path(self.model, self.drift, &self.x0, &self.config, i as u64)?;
        Ok(f(&p))
    }
}

/// `ensemble_size` independent paths; fails when more than 1% blow up.
pub fn simulate_ensemble(model: &GalerkinModel, drift: &DriftSpec, x0: &[f64], cfg: &SimConfig) -> Result<Ensemble> {
    check_dims(model, x0)?;
    cfg.validate()?;
    let paths: Vec<Trajectory> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|i| simulate_path(model, drift, x0, cfg, i as u64))
        .collect::<Result<_>>()?;
    let ens = Ensemble { config: cfg.clone(), x0: x0.to_vec(), paths };
    check_invalid(ens.invalid_count(), ens.paths.len())?;
    Ok(ens)
}

pub(crate) fn check_invalid(invalid: usize, total: usize) -> Result<()> {
    if invalid as f64 > MAX_INVALID_FRACTION * total as f64 {
        Err(Error::EnsembleInvalid { invalid, total })
    } else {
        Ok(())
    }
}

/// States of one long path sampled every `thin` steps after discarding the
/// first `burn_in` fraction of the horizon. Used as the empirical invariant
/// measure.
pub fn long_run(
    model: &GalerkinModel,
    drift: &DriftSpec,
    x0: &[f64],
    dt: f64,
    horizon: f64,
    seed: u64,
    burn_in: f64,
    thin: usize,
) -> Result<Vec<Vec<f64>>> {
    check_dims(model, x0)?;
    let cfg = SimConfig::new(dt, horizon, seed, 1)?;
    let n = cfg.steps();
    let start = (burn_in.clamp(0.0, 1.0) * n as f64).ceil() as usize;
    let thin = thin.max(1);
    let mut s = Stepper::new(model, drift, &cfg, x0, 0);
    let mut out = Vec::with_capacity((n - start) / thin + 1);
    for i in 1..=n {
        s.advance(cfg.time(i) - cfg.time(i - 1))?;
        if !s.valid {
            return Err(Error::EnsembleInvalid { invalid: 1, total: 1 });
        }
        if i >= start && (i - start) % thin == 0 {
            out.push(s.x.clone());
        }
    }
    Ok(out)
}
