//! Galerkin truncation of the dissipative model: diagonal linear part,
//! diagonal noise, a separable convex potential for the singular drift and a
//! bounded componentwise perturbation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Diagonal model in the eigenbasis: `A e_k = (omega - lambda_k) e_k`,
/// `sigma e_k = sigma_k e_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalerkinModel {
    pub eigenvalues: Vec<f64>,
    pub omega: f64,
    pub sigma: Vec<f64>,
    pub hs_alpha: f64,
}

impl GalerkinModel {
    pub fn new(eigenvalues: Vec<f64>, omega: f64, sigma: Vec<f64>, hs_alpha: f64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidInput("model needs at least one mode".into()));
        }
        if sigma.len() != eigenvalues.len() {
            return Err(Error::InvalidInput(format!(
                "{} eigenvalues but {} sigma entries",
                eigenvalues.len(),
                sigma.len()
            )));
        }
        for (k, l) in eigenvalues.iter().enumerate() {
            if !(l.is_finite() && *l > 0.0) {
                return Err(Error::InvalidMode { index: k, reason: format!("eigenvalue {l} must be positive") });
            }
        }
        for (k, s) in sigma.iter().enumerate() {
            if !(s.is_finite() && *s > 0.0) {
                return Err(Error::InvalidMode { index: k, reason: format!("sigma {s} must be positive") });
            }
        }
        if !omega.is_finite() {
            return Err(Error::InvalidInput("omega must be finite".into()));
        }
        if !(hs_alpha > 0.0) {
            return Err(Error::InvalidInput("hs_alpha must be positive".into()));
        }
        Ok(Self { eigenvalues, omega, sigma, hs_alpha })
    }

    /// Isotropic model with unit noise.
    pub fn diagonal(eigenvalues: Vec<f64>, omega: f64) -> Result<Self> {
        let d = eigenvalues.len();
        Self::new(eigenvalues, omega, vec![1.0; d], 0.5)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Linear rate `a_k = omega - lambda_k`.
    pub fn rate(&self, k: usize) -> f64 {
        self.omega - self.eigenvalues[k]
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn apply_a(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..self.dim() {
            out[k] = self.rate(k) * x[k];
        }
    }

    /// `<Ax, x> <= omega |x|^2`, checked mode by mode.
    pub fn is_dissipative(&self) -> bool {
        (0..self.dim()).all(|k| self.rate(k) <= self.omega)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub integral: f64,
    pub per_mode: Vec<f64>,
    pub flagged_modes: Vec<usize>,
    pub dissipative: bool,
    /// Largest deviation between the quadrature value and the closed form.
    pub quadrature_error: f64,
    /// Decay exponent `s` of per-mode contributions `~ k^{-s}`; `None` with
    /// fewer than two modes.
    pub tail_exponent: Option<f64>,
    pub pass: bool,
}

/// `int_0^inf s^{-alpha} e^{-s} ds` by quadrature, for `alpha < 1`.
fn gamma_like(alpha: f64, tol: f64) -> f64 {
    let beta = 1.0 - alpha;
    // s = u^{1/beta} removes the endpoint singularity on [0, 1]
    let head = quad::integrate(&|u: f64| (-u.powf(1.0 / beta)).exp() / beta, 0.0, 1.0, tol);
    let tail = quad::integrate_to_infinity(&|s: f64| s.powf(-alpha) * (-s).exp(), 1.0, tol);
    head + tail
}

/// Numerically integrate `int_0^inf (1 + t^{-alpha}) sum_k sigma_k^2 e^{2(omega - lambda_k) t} dt`.
///
/// `pass` requires every mode to be integrable and the quadrature to agree
/// with the closed form `sigma^2 (1/r + r^{alpha-1} Gamma(1-alpha))` within
/// `hs_tolerance` (relative).
pub fn validate_model(model: &GalerkinModel, hs_tolerance: f64) -> ValidationReport {
    let alpha = model.hs_alpha;
    let mut flagged = Vec::new();
    let mut per_mode = Vec::with_capacity(model.dim());
    let mut qerr: f64 = 0.0;
    let j = if alpha < 1.0 { gamma_like(alpha, 1e-13) } else { f64::INFINITY };
    let j_exact = if alpha < 1.0 { statrs::function::gamma::gamma(1.0 - alpha) } else { f64::INFINITY };
    for k in 0..model.dim() {
        let r = -2.0 * model.rate(k);
        let s2 = model.sigma[k].powi(2);
        if r <= 0.0 || alpha >= 1.0 {
            if r <= 0.0 {
                flagged.push(k);
            }
            per_mode.push(f64::INFINITY);
            continue;
        }
        let v = s2 * (1.0 / r + r.powf(alpha - 1.0) * j);
        let exact = s2 * (1.0 / r + r.powf(alpha - 1.0) * j_exact);
        qerr = qerr.max((v - exact).abs() / exact);
        per_mode.push(v);
    }
    let integral: f64 = per_mode.iter().sum();
    let tail_exponent = if model.dim() >= 2 && integral.is_finite() {
        let start = model.dim() / 2;
        let start = start.min(model.dim() - 2);
        let xs: Vec<f64> = (start..model.dim()).map(|k| ((k + 1) as f64).ln()).collect();
        let ys: Vec<f64> = per_mode[start..].iter().map(|v| v.ln()).collect();
        Some(-crate::stats::slope(&xs, &ys))
    } else {
        None
    };
    let dissipative = model.is_dissipative();
    let pass = flagged.is_empty() && integral.is_finite() && qerr <= hs_tolerance && dissipative;
    ValidationReport { integral, per_mode, flagged_modes: flagged, dissipative, quadrature_error: qerr, tail_exponent, pass }
}

/// Separable convex potential `phi(x) = sum_k psi(x_k)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Potential {
    #[default]
    Zero,
    /// `c |x|`
    Abs { c: f64 },
    /// `c |x|^2 / 2`
    Quadratic { c: f64 },
    /// `c |x|^p`, `p >= 1`
    AbsPower { c: f64, p: f64 },
}

const PROX_BUDGET: usize = 200;
const PROX_TOL: f64 = 1e-10;

impl Potential {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Potential::Zero => true,
            Potential::Abs { c } | Potential::Quadratic { c } => c >= 0.0 && c.is_finite(),
            Potential::AbsPower { c, p } => c >= 0.0 && c.is_finite() && p >= 1.0 && p.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("bad potential parameters {self:?}")))
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        x.iter().map(|&v| self.value_1d(v)).sum()
    }

    pub fn value_1d(&self, v: f64) -> f64 {
        match *self {
            Potential::Zero => 0.0,
            Potential::Abs { c } => c * v.abs(),
            Potential::Quadratic { c } => 0.5 * c * v * v,
            Potential::AbsPower { c, p } => c * v.abs().powf(p),
        }
    }

    /// Proximal map of `lambda * psi` in one coordinate.
    pub fn prox_1d(&self, lambda: f64, x: f64) -> Result<f64> {
        Ok(match *self {
            Potential::Zero => x,
            Potential::Abs { c } => soft_threshold(x, lambda * c),
            Potential::Quadratic { c } => x / (1.0 + lambda * c),
            Potential::AbsPower { c, p } if p == 1.0 => soft_threshold(x, lambda * c),
            Potential::AbsPower { c, p } => {
                let s = solve_power_prox(x.abs(), lambda * c * p, p)?;
                s.copysign(x)
            }
        })
    }

    /// Minimal-norm element of `-d psi` at `v`.
    pub fn min_norm_drift_1d(&self, v: f64) -> f64 {
        match *self {
            Potential::Zero => 0.0,
            Potential::Abs { c } => -c * sign0(v),
            Potential::Quadratic { c } => -c * v,
            Potential::AbsPower { c, p } if p == 1.0 => -c * sign0(v),
            Potential::AbsPower { c, p } => -c * p * v.abs().powf(p - 1.0) * sign0(v),
        }
    }

    /// Some subgradient of `phi` at `v` (the minimal one).
    pub fn subgradient_1d(&self, v: f64) -> f64 {
        -self.min_norm_drift_1d(v)
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Solve `s + k s^{p-1} = a` for `s in [0, a]`, `p > 1`.
fn solve_power_prox(a: f64, k: f64, p: f64) -> Result<f64> {
    if a == 0.0 || k == 0.0 {
        return Ok(a);
    }
    let g = |s: f64| s + k * s.powf(p - 1.0) - a;
    let (mut lo, mut hi) = (0.0f64, a);
    let mut s = a / (1.0 + k * a.powf(p - 2.0).min(1e300));
    if !(s > lo && s < hi) {
        s = 0.5 * a;
    }
    for _ in 0..PROX_BUDGET {
        let r = g(s);
        if r.abs() <= PROX_TOL * (1.0 + a) {
            return Ok(s);
        }
        if r > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let dg = 1.0 + k * (p - 1.0) * s.powf(p - 2.0);
        let newton = s - r / dg;
        s = if newton > lo && newton < hi && dg.is_finite() { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * a {
            return Ok(s);
        }
    }
    let residual = g(s).abs();
    if residual <= PROX_TOL * (1.0 + a) {
        Ok(s)
    } else {
        Err(Error::ProxNonConvergence { residual })
    }
}

/// One coordinate of a tabulated drift: piecewise linear on a uniform grid,
/// clamped outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateTable {
    pub lo: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl CoordinateTable {
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let u = ((x - self.lo) / self.step).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n - 2);
        let w = u - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Bounded measurable perturbation `B`, componentwise: `B(x)_k = b_k(x_k)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundedDrift {
    #[default]
    Zero,
    Constant { value: Vec<f64> },
    /// `c sin(x_k)`
    BoundedSin { c: f64 },
    /// `c sign(x_k)`, with `sign(0) = 0`
    SignClip { c: f64 },
    /// One lookup table per coordinate.
    #[serde(skip)]
    Table { tables: Arc<Vec<CoordinateTable>> },
}

impl BoundedDrift {
    pub fn is_zero(&self) -> bool {
        match self {
            BoundedDrift::Zero => true,
            BoundedDrift::Constant { value } => value.iter().all(|v| *v == 0.0),
            BoundedDrift::BoundedSin { c } | BoundedDrift::SignClip { c } => *c == 0.0,
            BoundedDrift::Table { tables } => tables.iter().all(|t| t.sup() == 0.0),
        }
    }

    pub fn eval_1d(&self, k: usize, v: f64) -> f64 {
        match self {
            BoundedDrift::Zero => 0.0,
            BoundedDrift::Constant { value } => value[k],
            BoundedDrift::BoundedSin { c } => c * v.sin(),
            BoundedDrift::SignClip { c } => c * sign0(v),
            BoundedDrift::Table { tables } => tables[k].eval(v),
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..x.len() {
            out[k] = self.eval_1d(k, x[k]);
        }
    }

    /// Supremum of `|B|` over the whole space in dimension `dim`.
    pub fn analytic_sup(&self, dim: usize) -> f64 {
        match self {
            BoundedDrift::Zero => 0.0,
            BoundedDrift::Constant { value } => crate::stats::norm(value),
            BoundedDrift::BoundedSin { c } | BoundedDrift::SignClip { c } => c.abs() * (dim as f64).sqrt(),
            BoundedDrift::Table { tables } => tables.iter().map(|t| t.sup().powi(2)).sum::<f64>().sqrt(),
        }
    }
}

/// Singular drift `F_0 = -d phi` plus bounded part `B` with declared `|B|_inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftSpec {
    pub potential: Potential,
    pub bounded: BoundedDrift,
    pub sup_norm: f64,
}

impl DriftSpec {
    /// `sup_norm = None` uses the analytic bound.
    pub fn new(potential: Potential, bounded: BoundedDrift, sup_norm: Option<f64>, dim: usize) -> Result<Self> {
        potential.validate()?;
        if let BoundedDrift::Constant { value } = &bounded {
            if value.len() != dim {
                return Err(Error::InvalidInput(format!("constant drift has {} entries, model has {dim}", value.len())));
            }
        }
        let analytic = bounded.analytic_sup(dim);
        let sup_norm = sup_norm.unwrap_or(analytic);
        if !(sup_norm >= analytic * (1.0 - 1e-12)) {
            return Err(Error::InvalidInput(format!(
                "declared |B|_inf = {sup_norm} is below the actual bound {analytic}"
            )));
        }
        Ok(Self { potential, bounded, sup_norm })
    }

    pub fn unperturbed(potential: Potential) -> Self {
        Self { potential, bounded: BoundedDrift::Zero, sup_norm: 0.0 }
    }

    /// Same singular part with `B = 0`.
    pub fn without_bounded(&self) -> Self {
        Self::unperturbed(self.potential)
    }

    /// `D(F)`: all shipped potentials are finite everywhere.
    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite())
    }
}

/// Resolvent of the subdifferential: `y + lambda d phi(y) = x`.
pub fn proximal_step(drift: &DriftSpec, lambda: f64, x: &[f64]) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    let mut out = vec![0.0; x.len()];
    proximal_into(&drift.potential, lambda, x, &mut out)?;
    Ok(out)
}

pub(crate) fn proximal_into(pot: &Potential, lambda: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
    for k in 0..x.len() {
        out[k] = pot.prox_1d(lambda, x[k])?;
    }
    Ok(())
}

/// Closed-form minimal selection `F_0(x)`.
pub fn min_norm_drift(drift: &DriftSpec, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| drift.potential.min_norm_drift_1d(v)).collect()
}

pub const DEFAULT_YOSIDA_STEPS: [f64; 3] = [1e-2, 1e-3, 1e-4];
const YOSIDA_FLOOR: f64 = 1e-9;

/// `F_0(x)` as the `h -> 0` limit of the Yosida approximations
/// `(prox_h(x) - x) / h`, extrapolated with Neville's scheme. If the
/// extrapolation residual is too large the step sequence is extended by
/// factors of ten down to `1e-9`, keeping the last `h.len()` steps.
pub fn minimal_selection(drift: &DriftSpec, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if !drift.in_domain(x) {
        return Err(Error::Domain { residual: f64::INFINITY });
    }
    if h.len() < 2 || h.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput("need at least two positive Yosida steps".into()));
    }
    let mut out = Vec::with_capacity(x.len());
    for &v in x {
        out.push(minimal_selection_1d(&drift.potential, v, h)?);
    }
    Ok(out)
}

fn minimal_selection_1d(pot: &Potential, v: f64, h: &[f64]) -> Result<f64> {
    let mut steps: Vec<f64> = h.to_vec();
    steps.sort_by(|a, b| b.total_cmp(a));
    let window = steps.len();
    let mut quotients = Vec::with_capacity(steps.len());
    for &s in &steps {
        quotients.push((pot.prox_1d(s, v)? - v) / s);
    }
    loop {
        let n = steps.len();
        let (hs, qs) = (&steps[n - window..], &quotients[n - window..]);
        let full = neville_at_zero(hs, qs);
        let reduced = neville_at_zero(&hs[1..], &qs[1..]);
        let residual = (full - reduced).abs();
        if full.is_finite() && residual <= 1e-6 * (1.0 + full.abs()) {
            return Ok(full);
        }
        let next = steps[n - 1] * 0.1;
        if next < YOSIDA_FLOOR * 0.999 || !full.is_finite() {
            return Err(Error::Domain { residual });
        }
        steps.push(next);
        quotients.push((pot.prox_1d(next, v)? - v) / next);
    }
}

/// Value at zero of the polynomial through `(xs, ys)`.
fn neville_at_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (xs[i + m] * p[i] - xs[i] * p[i + 1]) / (xs[i + m] - xs[i]);
        }
    }
    p[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abs1() -> DriftSpec {
        DriftSpec::unperturbed(Potential::Abs { c: 1.0 })
    }

    #[test]
    fn rejects_bad_modes() {
        let e = GalerkinModel::new(vec![1.0, -2.0], 0.0, vec![1.0, 1.0], 0.5).unwrap_err();
        assert!(matches!(e, Error::InvalidMode { index: 1, .. }));
        let e = GalerkinModel::new(vec![1.0, 2.0], 0.0, vec![1.0, 0.0], 0.5).unwrap_err();
        assert!(matches!(e, Error::InvalidMode { index: 1, .. }));
    }

    #[test]
    fn hs_integral_single_mode() {
        let m = GalerkinModel::new(vec![1.0], 0.0, vec![1.0], 0.5).unwrap();
        let r = validate_model(&m, 1e-8);
        // 1/2 + 2^{-1/2} Gamma(1/2)
        let oracle = 0.5 + (std::f64::consts::PI / 2.0).sqrt();
        assert!((r.integral - oracle).abs() < 1e-8, "{}", r.integral);
        assert!((r.integral - 1.7534).abs() < 1e-4);
        assert!(r.pass);
    }

    #[test]
    fn hs_integral_matches_direct_quadrature() {
        // independent route: integrate t^{-1/2} e^{-2t} after t = u^2
        let direct = quad::integrate_to_infinity(&|t: f64| (-2.0 * t).exp(), 0.0, 1e-13)
            + quad::integrate_to_infinity(&|u: f64| 2.0 * (-2.0 * u * u).exp(), 0.0, 1e-13);
        let m = GalerkinModel::new(vec![1.0], 0.0, vec![1.0], 0.5).unwrap();
        assert!((validate_model(&m, 1e-8).integral - direct).abs() < 1e-8);
    }

    #[test]
    fn hs_flags_growing_mode() {
        let m = GalerkinModel::new(vec![1.0], 2.0, vec![1.0], 0.5).unwrap();
        let r = validate_model(&m, 1e-8);
        assert_eq!(r.flagged_modes, vec![0]);
        assert!(!r.pass);
        assert!(r.integral.is_infinite());
    }

    #[test]
    fn hs_three_modes() {
        let m = GalerkinModel::new(vec![1.0, 4.0, 9.0], 0.0, vec![1.0; 3], 0.5).unwrap();
        let r = validate_model(&m, 1e-8);
        let oracle: f64 = [1.0f64, 4.0, 9.0]
            .iter()
            .map(|l| 1.0 / (2.0 * l) + (2.0 * l).powf(-0.5) * std::f64::consts::PI.sqrt())
            .sum();
        assert!((r.integral - oracle).abs() < 1e-8);
        assert!(r.pass);
        assert!(r.tail_exponent.unwrap() > 0.5);
    }

    #[test]
    fn prox_examples() {
        let zero = DriftSpec::unperturbed(Potential::Zero);
        assert_eq!(proximal_step(&zero, 0.7, &[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
        let y = proximal_step(&abs1(), 0.3, &[1.0]).unwrap()[0];
        assert!((y - 0.7).abs() < 1e-15);
        // subgradient inclusion y + lambda g = x with g = sign(y)
        assert!((y + 0.3 * 1.0 - 1.0).abs() < 1e-15);
        assert_eq!(proximal_step(&abs1(), 0.3, &[0.1]).unwrap()[0], 0.0);
        let q = DriftSpec::unperturbed(Potential::Quadratic { c: 1.0 });
        assert_eq!(proximal_step(&q, 1.0, &[2.0]).unwrap()[0], 1.0);
    }

    #[test]
    fn prox_power_satisfies_inclusion() {
        let pot = Potential::AbsPower { c: 0.7, p: 1.5 };
        for &x in &[-3.0, -0.2, 0.0, 1e-6, 0.5, 4.0] {
            let y = pot.prox_1d(0.4, x).unwrap();
            let g = pot.subgradient_1d(y);
            assert!((y + 0.4 * g - x).abs() < 1e-9, "x={x} y={y}");
        }
        let pot = Potential::AbsPower { c: 1.0, p: 2.0 };
        assert!((pot.prox_1d(1.0, 3.0).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn minimal_selection_examples() {
        let h = DEFAULT_YOSIDA_STEPS;
        assert_eq!(minimal_selection(&abs1(), &[0.0], &h).unwrap(), vec![0.0]);
        assert!((minimal_selection(&abs1(), &[0.5], &h).unwrap()[0] + 1.0).abs() < 1e-12);
        let q = DriftSpec::unperturbed(Potential::Quadratic { c: 1.0 });
        assert!((minimal_selection(&q, &[3.0], &h).unwrap()[0] + 3.0).abs() < 1e-8);
    }

    #[test]
    fn minimal_selection_near_kink_extends_steps() {
        let v = minimal_selection(&abs1(), &[2e-4], &DEFAULT_YOSIDA_STEPS).unwrap();
        assert!((v[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn minimal_selection_rejects_non_finite() {
        assert!(matches!(
            minimal_selection(&abs1(), &[f64::NAN], &DEFAULT_YOSIDA_STEPS),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn declared_sup_must_cover_drift() {
        let b = BoundedDrift::BoundedSin { c: 1.0 };
        assert!(DriftSpec::new(Potential::Zero, b.clone(), Some(1.0), 4).is_err());
        assert!(DriftSpec::new(Potential::Zero, b, Some(2.0), 4).is_ok());
    }
}
