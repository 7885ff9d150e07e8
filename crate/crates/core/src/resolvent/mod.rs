//! Monte Carlo estimators for `P_t`, `U_alpha`, the Girsanov-weighted kernels
//! `Q_t`, `V_alpha`, and finite-difference gradients of resolvents.

pub mod grid;
pub mod neumann;

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{check_invalid, Dynamics, Scheme, SimConfig, Stepper, DEFAULT_BLOWUP_GUARD};
use crate::error::{Error, Result};
use crate::model::{DriftSpec, GalerkinModel};
use crate::rng::{NoiseStream, Purpose};
use crate::stats::{effective_sample_size, MeanSe};
use crate::testfn::TestFn;

pub use grid::{GridFunction, GridOperator};

pub const ESS_FLOOR: f64 = 100.0;

/// Something that can be integrated against a kernel.
pub trait ScalarFn: Sync {
    fn eval(&self, x: &[f64]) -> f64;
    fn id(&self) -> String;
}

impl ScalarFn for TestFn {
    fn eval(&self, x: &[f64]) -> f64 {
        TestFn::eval(self, x)
    }
    fn id(&self) -> String {
        self.to_string()
    }
}

impl ScalarFn for GridFunction {
    fn eval(&self, x: &[f64]) -> f64 {
        GridFunction::eval(self, x)
    }
    fn id(&self) -> String {
        "grid".into()
    }
}

/// A closure with an id.
pub struct Named<F>(pub String, pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> ScalarFn for Named<F> {
    fn eval(&self, x: &[f64]) -> f64 {
        (self.1)(x)
    }
    fn id(&self) -> String {
        self.0.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelMeta {
    pub kind: String,
    /// `t` or `alpha`
    pub parameter: f64,
    pub function_id: String,
    pub point: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub meta: KernelMeta,
    pub warnings: Vec<String>,
    pub ess: Option<f64>,
    /// Deterministic bias bound (horizon truncation), zero when unbiased.
    pub truncation_bound: f64,
}

impl KernelEstimate {
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error + self.truncation_bound
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub step: f64,
    pub unreliable: Vec<bool>,
}

/// How `B` is handled by an estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Weighting {
    /// `B` in the dynamics, no weights: `P_t`, `U_alpha` of the drifted process.
    Plain,
    /// `B = 0` dynamics reweighted by the Girsanov density: `Q_t`, `V_alpha`.
    Girsanov,
}

/// Per-path estimator context. Two estimators with the same seed share their
/// noise and random horizons path by path (common random numbers).
#[derive(Clone, Debug)]
pub struct Estimator<'a> {
    pub model: &'a GalerkinModel,
    pub drift: &'a DriftSpec,
    pub dt: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub weighting: Weighting,
}

impl<'a> Estimator<'a> {
    pub fn new(model: &'a GalerkinModel, drift: &'a DriftSpec, dt: f64, seed: u64) -> Self {
        Self { model, drift, dt, seed, scheme: Scheme::SplitProximal, weighting: Weighting::Plain }
    }

    pub fn weighted(mut self) -> Self {
        self.weighting = Weighting::Girsanov;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn config(&self, horizon: f64) -> SimConfig {
        SimConfig {
            dt: self.dt,
            horizon: horizon.max(self.dt),
            master_seed: self.seed,
            scheme: self.scheme,
            ensemble_size: 1,
            dynamics: match self.weighting {
                Weighting::Plain => Dynamics::Drifted,
                Weighting::Girsanov => Dynamics::Reference,
            },
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        }
    }

    pub(crate) fn stepper(&self, x: &[f64], path: u64, horizon: f64) -> Stepper<'a> {
        Stepper::new(self.model, self.drift, &self.config(horizon), x, path)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.model.dim() || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("bad base point {x:?}")));
        }
        Ok(())
    }

    /// Exponential horizon of path `path`.
    pub fn horizon(&self, path: u64, alpha: f64) -> f64 {
        NoiseStream::new(self.seed, path, Purpose::Horizon).exponential(alpha)
    }

    /// `(X_t, weight)` of path `path` started at `x`; `None` if it blew up.
    pub fn terminal(&self, x: &[f64], path: u64, t: f64) -> Result<Option<(Vec<f64>, f64)>> {
        let mut s = self.stepper(x, path, t);
        s.run_until(self.dt, t)?;
        if !s.valid {
            return Ok(None);
        }
        let w = match self.weighting {
            Weighting::Plain => 1.0,
            Weighting::Girsanov => s.log_weight().exp(),
        };
        Ok(Some((s.x, w)))
    }

    /// Per-path samples `w f(X_t)` with `t = horizon(i)`.
    fn samples(
        &self,
        f: &dyn ScalarFn,
        x: &[f64],
        budget: usize,
        horizon: impl Fn(u64) -> f64 + Sync,
    ) -> Result<Vec<Option<(f64, f64)>>> {
        self.check_point(x)?;
        (0..budget as u64)
            .into_par_iter()
            .map(|i| Ok(self.terminal(x, i, horizon(i))?.map(|(y, w)| (w * f.eval(&y), w))))
            .collect()
    }

    fn summarize(
        &self,
        samples: Vec<Option<(f64, f64)>>,
        scale: f64,
        meta: KernelMeta,
    ) -> Result<KernelEstimate> {
        let total = samples.len();
        let ok: Vec<(f64, f64)> = samples.into_iter().flatten().collect();
        check_invalid(total - ok.len(), total)?;
        let vals: Vec<f64> = ok.iter().map(|p| p.0).collect();
        let m = MeanSe::of(&vals);
        let mut warnings = Vec::new();
        if ok.len() < total {
            warnings.push(format!("{} of {total} paths blew up and were dropped", total - ok.len()));
        }
        let ess = match self.weighting {
            Weighting::Plain => None,
            Weighting::Girsanov => {
                let w: Vec<f64> = ok.iter().map(|p| p.1).collect();
                let e = effective_sample_size(&w);
                if e < ESS_FLOOR {
                    warnings.push(format!("effective sample size {e:.1} below floor {ESS_FLOOR}"));
                }
                Some(e)
            }
        };
        Ok(KernelEstimate {
            value: m.mean * scale,
            std_error: m.se * scale,
            n_samples: ok.len(),
            meta,
            warnings,
            ess,
            truncation_bound: 0.0,
        })
    }

    fn kind(&self, plain: &str, weighted: &str) -> String {
        match self.weighting {
            Weighting::Plain => plain.into(),
            Weighting::Girsanov => weighted.into(),
        }
    }

    /// `P_t f(x)` (or `Q_t f(x)` when weighted).
    pub fn estimate_pt(&self, f: &dyn ScalarFn, x: &[f64], t: f64, budget: usize) -> Result<KernelEstimate> {
        if !(t >= 0.0) {
            return Err(Error::InvalidInput("t must be non-negative".into()));
        }
        let meta = KernelMeta { kind: self.kind("P_t", "Q_t"), parameter: t, function_id: f.id(), point: x.to_vec() };
        if t == 0.0 {
            let v = f.eval(x);
            return Ok(KernelEstimate {
                value: v,
                std_error: 0.0,
                n_samples: budget,
                meta,
                warnings: vec![],
                ess: None,
                truncation_bound: 0.0,
            });
        }
        let s = self.samples(f, x, budget, |_| t)?;
        self.summarize(s, 1.0, meta)
    }

    /// Per-path `w f(X_tau) / alpha` with `tau ~ Exp(alpha)`; `None` for
    /// blown-up paths.
    pub fn resolvent_samples(&self, f: &dyn ScalarFn, x: &[f64], alpha: f64, budget: usize) -> Result<Vec<Option<f64>>> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput("alpha must be positive".into()));
        }
        Ok(self
            .samples(f, x, budget, |i| self.horizon(i, alpha))?
            .into_iter()
            .map(|s| s.map(|(v, _)| v / alpha))
            .collect())
    }

    /// `U_alpha f(x) = E[f(X_tau)] / alpha` with one exponential horizon per
    /// path (`V_alpha` when weighted).
    pub fn estimate_resolvent(&self, f: &dyn ScalarFn, x: &[f64], alpha: f64, budget: usize) -> Result<KernelEstimate> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput("alpha must be positive".into()));
        }
        let meta = KernelMeta {
            kind: self.kind("U_alpha", "V_alpha"),
            parameter: alpha,
            function_id: f.id(),
            point: x.to_vec(),
        };
        let s = self.samples(f, x, budget, |i| self.horizon(i, alpha))?;
        self.summarize(s, 1.0 / alpha, meta)
    }

    /// Dual route: per-path trapezoid of `int_0^T e^{-alpha t} w_t f(X_t) dt`.
    /// The tail beyond `t_max` is bounded by `|f|_inf e^{-alpha T} / alpha`
    /// (unweighted) and reported as `truncation_bound`.
    pub fn resolvent_quadrature(
        &self,
        f: &dyn ScalarFn,
        x: &[f64],
        alpha: f64,
        t_max: f64,
        sup_f: f64,
        budget: usize,
    ) -> Result<KernelEstimate> {
        self.check_point(x)?;
        let weighted = self.weighting == Weighting::Girsanov;
        let samples: Vec<Option<(f64, f64)>> = (0..budget as u64)
            .into_par_iter()
            .map(|i| {
                let mut s = self.stepper(x, i, t_max);
                let mut prev = f.eval(x);
                let mut acc = 0.0;
                while s.valid && s.t < t_max - 1e-12 {
                    let h = self.dt.min(t_max - s.t);
                    let t0 = s.t;
                    s.advance(h)?;
                    let w = if weighted { s.log_weight().exp() } else { 1.0 };
                    let cur = w * f.eval(&s.x);
                    acc += 0.5 * h * ((-alpha * t0).exp() * prev + (-alpha * s.t).exp() * cur);
                    prev = cur;
                }
                Ok(if s.valid { Some((acc, 1.0)) } else { None })
            })
            .collect::<Result<_>>()?;
        let meta = KernelMeta {
            kind: self.kind("U_alpha(quadrature)", "V_alpha(quadrature)"),
            parameter: alpha,
            function_id: f.id(),
            point: x.to_vec(),
        };
        let mut est = self.summarize(samples, 1.0, meta)?;
        est.ess = None;
        est.truncation_bound = sup_f * (-alpha * t_max).exp() / alpha;
        Ok(est)
    }

    /// Central differences of `U_alpha f` with common random numbers.
    /// Default step `1e-3 (1 + |x|)`.
    pub fn grad_resolvent(
        &self,
        f: &dyn ScalarFn,
        x: &[f64],
        alpha: f64,
        h: Option<f64>,
        budget: usize,
    ) -> Result<GradientEstimate> {
        let h = h.unwrap_or(1e-3 * (1.0 + crate::stats::norm(x)));
        let d = self.model.dim();
        let mut values = Vec::with_capacity(d);
        let mut ses = Vec::with_capacity(d);
        let mut unreliable = Vec::with_capacity(d);
        for k in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let plus = self.resolvent_samples(f, &xp, alpha, budget)?;
            let minus = self.resolvent_samples(f, &xm, alpha, budget)?;
            let diffs: Vec<f64> = plus
                .iter()
                .zip(&minus)
                .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?) / (2.0 * h)))
                .collect();
            check_invalid(budget - diffs.len(), budget)?;
            let m = MeanSe::of(&diffs);
            values.push(m.mean);
            ses.push(m.se);
            unreliable.push(m.se > m.mean.abs());
        }
        Ok(GradientEstimate { values, std_errors: ses, step: h, unreliable })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Potential;

    fn ou() -> GalerkinModel {
        GalerkinModel::new(vec![1.0, 4.0], 0.5, vec![1.0, 1.0], 0.5).unwrap()
    }

    #[test]
    fn constant_function_normalization() {
        let m = ou();
        let d = DriftSpec::unperturbed(Potential::Abs { c: 1.0 });
        let e = Estimator::new(&m, &d, 1e-2, 5);
        let one = TestFn::Const(1.0);
        let pt = e.estimate_pt(&one, &[0.3, -0.2], 0.7, 1000).unwrap();
        assert_eq!(pt.value, 1.0);
        let u = e.estimate_resolvent(&one, &[0.3, -0.2], 2.0, 1000).unwrap();
        assert_eq!(u.value, 0.5);
        assert_eq!(u.std_error, 0.0);
    }

    #[test]
    fn ou_mean_and_resolvent() {
        let m = ou();
        let d = DriftSpec::unperturbed(Potential::Zero);
        let e = Estimator::new(&m, &d, 1e-2, 9);
        let f = TestFn::Coord(0);
        let x = [1.5, 0.0];
        let pt = e.estimate_pt(&f, &x, 1.0, 20_000).unwrap();
        assert!(pt.within(1.5 * (-0.5f64).exp(), 3.0), "{pt:?}");
        let u = e.estimate_resolvent(&f, &x, 2.0, 20_000).unwrap();
        assert!(u.within(1.5 / 2.5, 3.0), "{u:?}");
        let q = e.resolvent_quadrature(&f, &x, 2.0, 8.0, 1.5, 4_000).unwrap();
        let combined = (u.std_error.powi(2) + q.std_error.powi(2)).sqrt();
        assert!((u.value - q.value).abs() <= 3.0 * combined + q.truncation_bound + 1e-2);
    }

    #[test]
    fn ou_gradient() {
        let m = ou();
        let d = DriftSpec::unperturbed(Potential::Zero);
        let e = Estimator::new(&m, &d, 1e-2, 2);
        let g = e.grad_resolvent(&TestFn::Coord(0), &[0.4, 0.1], 2.0, None, 4_000).unwrap();
        // linear f: CRN differences are deterministic up to the horizon draw
        assert!((g.values[0] - 1.0 / 2.5).abs() <= 3.0 * g.std_errors[0] + 1e-9);
        assert!(g.values[1].abs() < 1e-9);
        let c = e.grad_resolvent(&TestFn::Const(2.0), &[0.4, 0.1], 2.0, None, 500).unwrap();
        assert!(c.values.iter().all(|v| *v == 0.0));
    }
}
