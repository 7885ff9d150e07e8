//! The Neumann inverse `(I - <B, grad U_alpha>)^{-1}` and the perturbed
//! resolvent identity `V_alpha f = U_alpha (I - <B, grad U_alpha>)^{-1} f`.

use rayon::prelude::*;
use serde::Serialize;

use super::grid::{GridFunction, GridOperator};
use super::{Estimator, KernelEstimate, ScalarFn};
use crate::engine::check_invalid;
use crate::error::{Error, Result};
use crate::model::{BoundedDrift, DriftSpec, GalerkinModel};
use crate::rng::derive_seed;
use crate::stats::{dist, MeanSe};
use crate::testfn::TestFn;

pub const DEFAULT_DEPTH: usize = 20;
/// Cap on path simulations for nested estimation.
pub const NESTED_CAP: u64 = 50_000_000;

/// `alpha >= 4 pi |B|_inf^2`
pub fn alpha_threshold(drift: &DriftSpec) -> f64 {
    4.0 * std::f64::consts::PI * drift.sup_norm.powi(2)
}

fn check_alpha(drift: &DriftSpec, alpha: f64) -> Result<()> {
    let thr = alpha_threshold(drift);
    if !(alpha > 0.0) || alpha < thr * (1.0 - 1e-12) {
        return Err(Error::InvalidInput(format!("alpha = {alpha} is below 4 pi |B|^2 = {thr}")));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct NeumannSolution {
    #[serde(skip)]
    pub g: GridFunction,
    /// `U_alpha g` on the grid.
    #[serde(skip)]
    pub ug: GridFunction,
    /// Sup-norm of successive partial-sum differences `|K^j f|_inf`.
    pub increments: Vec<f64>,
    /// Largest observed ratio of successive increments.
    pub ratio: f64,
    pub depth: usize,
    /// `|f|_inf 2^{-depth}`
    pub truncation_bound: f64,
    pub grid_nodes: usize,
}

/// `K g = <B, grad U_alpha g>` on the grid.
fn apply_k(op: &GridOperator, bounded: &BoundedDrift, alpha: f64, g: &GridFunction) -> Result<GridFunction> {
    let u = op.resolvent(alpha, g)?;
    let mut out = g.map(|_, _| 0.0);
    for (ax, spec) in op.layout.axes.iter().enumerate() {
        let du = op.partial(&u, ax);
        for (idx, o) in out.values.iter_mut().enumerate() {
            let xk = op.layout.state_of(idx)[spec.coord];
            *o += bounded.eval_1d(spec.coord, xk) * du.values[idx];
        }
    }
    Ok(out)
}

/// Partial sums `g = sum_{j <= depth} K^j f` on a grid over the coordinates
/// `f` depends on (B is componentwise, so `K` preserves that set). Stops
/// early once increments fall below `1e-15 |f|_inf`.
pub fn neumann_grid(
    model: &GalerkinModel,
    drift: &DriftSpec,
    f: &TestFn,
    alpha: f64,
    depth: usize,
    points: &[Vec<f64>],
    nodes: Option<usize>,
) -> Result<NeumannSolution> {
    check_alpha(drift, alpha)?;
    f.check_dim(model.dim())?;
    let op = GridOperator::for_coords(model, &drift.potential, &f.active_coords(), points, nodes)?;
    neumann_on(&op, &drift.bounded, f, alpha, depth)
}

pub fn neumann_on(
    op: &GridOperator,
    bounded: &BoundedDrift,
    f: &TestFn,
    alpha: f64,
    depth: usize,
) -> Result<NeumannSolution> {
    let fg = op.sample(|x| f.eval(x));
    let fsup = fg.sup_norm();
    let mut g = fg.clone();
    let mut term = fg;
    let mut increments = Vec::new();
    let mut ratio: f64 = 0.0;
    let mut used = 0;
    for _ in 0..depth {
        let next = apply_k(op, bounded, alpha, &term)?;
        let inc = next.sup_norm();
        if let Some(prev) = increments.last() {
            if *prev > 0.0 {
                ratio = ratio.max(inc / prev);
            }
        } else if fsup > 0.0 {
            ratio = ratio.max(inc / fsup);
        }
        increments.push(inc);
        for (a, b) in g.values.iter_mut().zip(&next.values) {
            *a += b;
        }
        term = next;
        used += 1;
        if inc <= 1e-15 * fsup.max(1e-300) {
            break;
        }
    }
    let ug = op.resolvent(alpha, &g)?;
    Ok(NeumannSolution {
        g,
        ug,
        increments,
        ratio,
        depth: used,
        truncation_bound: fsup * 0.5f64.powi(depth as i32),
        grid_nodes: op.layout.len(),
    })
}

/// `g_j = f + <B, grad U_alpha g_{j-1}>` evaluated by nested Monte Carlo with
/// common-random-number central differences at every level.
pub struct NestedNeumann<'a> {
    pub estimator: Estimator<'a>,
    pub bounded: &'a BoundedDrift,
    pub f: &'a TestFn,
    pub alpha: f64,
    pub level: usize,
    pub budget: usize,
}

impl<'a> NestedNeumann<'a> {
    /// Path simulations needed for one evaluation.
    pub fn cost(dim: usize, budget: usize, depth: usize) -> u64 {
        let per = 2 * dim as u64 * budget as u64;
        (1..=depth as u32).map(|j| per.saturating_pow(j)).fold(0u64, |a, b| a.saturating_add(b))
    }

    pub fn new(
        estimator: Estimator<'a>,
        bounded: &'a BoundedDrift,
        f: &'a TestFn,
        alpha: f64,
        depth: usize,
        budget: usize,
    ) -> Result<Self> {
        let required = Self::cost(estimator.model.dim(), budget, depth);
        if required > NESTED_CAP {
            return Err(Error::Infeasible { required, cap: NESTED_CAP });
        }
        Ok(Self { estimator, bounded, f, alpha, level: depth, budget })
    }

    fn lower(&self) -> NestedNeumann<'a> {
        NestedNeumann {
            estimator: self.estimator.clone().with_seed(derive_seed(self.estimator.seed, self.level as u64)),
            bounded: self.bounded,
            f: self.f,
            alpha: self.alpha,
            level: self.level - 1,
            budget: self.budget,
        }
    }

    /// Value and standard error of the outermost correction.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, f64)> {
        let base = self.f.eval(x);
        if self.level == 0 {
            return Ok((base, 0.0));
        }
        let inner = self.lower();
        let grad = if inner.level == 0 {
            self.estimator.grad_resolvent(self.f, x, self.alpha, None, self.budget)?
        } else {
            self.estimator.grad_resolvent(&inner, x, self.alpha, None, self.budget)?
        };
        let mut v = base;
        let mut var = 0.0;
        for k in 0..x.len() {
            let b = self.bounded.eval_1d(k, x[k]);
            v += b * grad.values[k];
            var += (b * grad.std_errors[k]).powi(2);
        }
        Ok((v, var.sqrt()))
    }
}

impl ScalarFn for NestedNeumann<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        self.evaluate(x).map(|p| p.0).unwrap_or(f64::NAN)
    }
    fn id(&self) -> String {
        format!("neumann[{}]({})", self.level, self.f)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityRow {
    pub point: Vec<f64>,
    #[serde(rename = "routeA")]
    pub route_a: f64,
    #[serde(rename = "routeB")]
    pub route_b: f64,
    pub se: f64,
    pub se_a: f64,
    pub se_b: f64,
    /// `U_alpha g` read off the grid, for reference.
    pub grid_value: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub alpha: f64,
    pub function_id: String,
    pub budget: usize,
    pub neumann: NeumannSolution,
    pub rows: Vec<IdentityRow>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

/// Route A: `V_alpha f(x)` from Girsanov-weighted paths of the `B = 0`
/// equation with exponential horizons. Route B: `U_alpha g(x)` with `g` the
/// grid Neumann inverse, on an independent noise stream. Pass at 3 combined
/// standard errors.
#[allow(clippy::too_many_arguments)]
pub fn verify_identity(
    model: &GalerkinModel,
    drift: &DriftSpec,
    f: &TestFn,
    alpha: f64,
    depth: usize,
    points: &[Vec<f64>],
    budget: usize,
    dt: f64,
    seed: u64,
) -> Result<IdentityReport> {
    check_alpha(drift, alpha)?;
    let neumann = neumann_grid(model, drift, f, alpha, depth, points, None)?;
    let free = drift.without_bounded();
    let route_a = Estimator::new(model, drift, dt, derive_seed(seed, 0xA)).weighted();
    let route_b = Estimator::new(model, &free, dt, derive_seed(seed, 0xB));
    let mut rows = Vec::with_capacity(points.len());
    let mut warnings = Vec::new();
    for x in points {
        let a = route_a.estimate_resolvent(f, x, alpha, budget)?;
        let b = route_b.estimate_resolvent(&neumann.g, x, alpha, budget)?;
        warnings.extend(a.warnings.iter().map(|w| format!("route A at {x:?}: {w}")));
        warnings.extend(b.warnings.iter().map(|w| format!("route B at {x:?}: {w}")));
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        rows.push(IdentityRow {
            point: x.clone(),
            route_a: a.value,
            route_b: b.value,
            se,
            se_a: a.std_error,
            se_b: b.std_error,
            grid_value: neumann.ug.eval(x),
            pass: (a.value - b.value).abs() <= 3.0 * se,
        });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(IdentityReport { alpha, function_id: f.to_string(), budget, neumann, rows, warnings, pass })
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub quotient: f64,
    pub se: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzReport {
    pub alpha: f64,
    pub bound: f64,
    pub pairs: Vec<LipschitzPair>,
    pub max_quotient: f64,
    pub pass: bool,
}

/// `|V_alpha f(x) - V_alpha f(y)| / |x - y|` with common random numbers,
/// against `2 sqrt(pi / alpha) |f|_inf`.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_probe(
    model: &GalerkinModel,
    drift: &DriftSpec,
    f: &TestFn,
    alpha: f64,
    pairs: &[(Vec<f64>, Vec<f64>)],
    budget: usize,
    dt: f64,
    seed: u64,
) -> Result<LipschitzReport> {
    let sup = f
        .sup_norm()
        .ok_or_else(|| Error::InvalidInput(format!("{f} is unbounded")))?;
    let bound = 2.0 * (std::f64::consts::PI / alpha).sqrt() * sup;
    let est = Estimator::new(model, drift, dt, seed).weighted();
    let mut out = Vec::with_capacity(pairs.len());
    for (x, y) in pairs {
        let r = dist(x, y);
        if r == 0.0 {
            return Err(Error::InvalidInput("Lipschitz pair with identical points".into()));
        }
        let a = est.resolvent_samples(f, x, alpha, budget)?;
        let b = est.resolvent_samples(f, y, alpha, budget)?;
        let q: Vec<f64> = a.iter().zip(&b).filter_map(|(u, v)| Some((u.as_ref()? - v.as_ref()?) / r)).collect();
        check_invalid(budget - q.len(), budget)?;
        let m = MeanSe::of(&q);
        out.push(LipschitzPair { x: x.clone(), y: y.clone(), quotient: m.mean.abs(), se: m.se });
    }
    let max_quotient = out.iter().map(|p| p.quotient).fold(0.0, f64::max);
    let pass = out.iter().all(|p| p.quotient <= bound + 3.0 * p.se);
    Ok(LipschitzReport { alpha, bound, pairs: out, max_quotient, pass })
}

#[derive(Clone, Debug, Serialize)]
pub struct SemigroupReport {
    pub point: Vec<f64>,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub pass: bool,
}

/// `Q_t phi(x) = phi(x) + int_0^t Q_s(L^B phi)(x) ds` for `phi = U_alpha g`,
/// with `L^B phi = alpha phi - g + <B, grad phi>` taken from the grid and the
/// time integral by the trapezoid rule along each weighted path.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_identity_check(
    model: &GalerkinModel,
    drift: &DriftSpec,
    g: &TestFn,
    alpha: f64,
    x: &[f64],
    t: f64,
    budget: usize,
    dt: f64,
    seed: u64,
) -> Result<SemigroupReport> {
    g.check_dim(model.dim())?;
    let op = GridOperator::for_coords(model, &drift.potential, &g.active_coords(), &[x.to_vec()], None)?;
    let gg = op.sample(|y| g.eval(y));
    let phi = op.resolvent(alpha, &gg)?;
    let mut lb = phi.map(|i, v| alpha * v - gg.values[i]);
    for (ax, spec) in op.layout.axes.iter().enumerate() {
        let d = op.partial(&phi, ax);
        for (idx, o) in lb.values.iter_mut().enumerate() {
            *o += drift.bounded.eval_1d(spec.coord, op.layout.state_of(idx)[spec.coord]) * d.values[idx];
        }
    }
    let phi0 = phi.eval(x);
    if t == 0.0 {
        return Ok(SemigroupReport { point: x.to_vec(), t, lhs: phi0, rhs: phi0, se: 0.0, pass: true });
    }
    let est = Estimator::new(model, drift, dt, seed).weighted();
    let per: Vec<Option<(f64, f64)>> = (0..budget as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = est.stepper(x, i, t);
            let mut prev = lb.eval(x);
            let mut integral = 0.0;
            while s.valid && s.t < t - 1e-12 {
                let h = dt.min(t - s.t);
                s.advance(h)?;
                let cur = s.log_weight().exp() * lb.eval(&s.x);
                integral += 0.5 * h * (prev + cur);
                prev = cur;
            }
            Ok(s.valid.then(|| (s.log_weight().exp() * phi.eval(&s.x), phi0 + integral)))
        })
        .collect::<Result<_>>()?;
    let ok: Vec<(f64, f64)> = per.into_iter().flatten().collect();
    check_invalid(budget - ok.len(), budget)?;
    let lhs = MeanSe::of(&ok.iter().map(|p| p.0).collect::<Vec<_>>());
    let rhs = MeanSe::of(&ok.iter().map(|p| p.1).collect::<Vec<_>>());
    let diff = MeanSe::of(&ok.iter().map(|p| p.0 - p.1).collect::<Vec<_>>());
    Ok(SemigroupReport {
        point: x.to_vec(),
        t,
        lhs: lhs.mean,
        rhs: rhs.mean,
        se: diff.se,
        pass: diff.mean.abs() <= 3.0 * diff.se,
    })
}

/// Convenience: `(route, estimate)` pairs used by reports.
pub fn summarize(est: &KernelEstimate) -> (f64, f64) {
    (est.value, est.std_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Potential;

    fn model() -> GalerkinModel {
        GalerkinModel::new(vec![1.0, 4.0, 9.0], 0.0, vec![1.0; 3], 0.5).unwrap()
    }

    fn sin_drift() -> DriftSpec {
        let c = 0.5 / 3f64.sqrt();
        DriftSpec::new(Potential::Abs { c: 1.0 }, BoundedDrift::BoundedSin { c }, Some(0.5), 3).unwrap()
    }

    #[test]
    fn zero_drift_inverse_is_identity() {
        let m = model();
        let d = DriftSpec::unperturbed(Potential::Abs { c: 1.0 });
        let f = TestFn::Cos(0);
        let s = neumann_grid(&m, &d, &f, 1.0, 5, &[], Some(801)).unwrap();
        assert!(s.increments.iter().all(|v| *v == 0.0));
        let fg = s.g.layout.sample(|x| f.eval(x));
        assert_eq!(s.g.values, fg.values);
    }

    #[test]
    fn partial_sums_contract_at_threshold() {
        let m = model();
        let d = sin_drift();
        let alpha = alpha_threshold(&d);
        let s = neumann_grid(&m, &d, &TestFn::Cos(0), alpha, 20, &[], Some(2001)).unwrap();
        assert!(s.ratio <= 0.5, "ratio {}", s.ratio);
        for (j, inc) in s.increments.iter().enumerate() {
            assert!(*inc <= 0.5f64.powi(j as i32 + 1) + 1e-12);
        }
    }

    #[test]
    fn grid_neumann_matches_dense_solve() {
        let m = model();
        let d = sin_drift();
        let alpha = alpha_threshold(&d);
        let f = TestFn::Cos(0);
        let op = GridOperator::for_coords(&m, &d.potential, &[0], &[], Some(201)).unwrap();
        let s = neumann_on(&op, &d.bounded, &f, alpha, 60).unwrap();
        // dense K: column j is K applied to the j-th unit vector
        let n = op.layout.len();
        let mut mat = nalgebra::DMatrix::<f64>::identity(n, n);
        for j in 0..n {
            let e = op.sample(|_| 0.0).map(|i, _| if i == j { 1.0 } else { 0.0 });
            let col = apply_k(&op, &d.bounded, alpha, &e).unwrap();
            for i in 0..n {
                mat[(i, j)] -= col.values[i];
            }
        }
        let rhs = nalgebra::DVector::from_vec(op.sample(|x| f.eval(x)).values);
        let sol = mat.lu().solve(&rhs).unwrap();
        let err = sol.iter().zip(&s.g.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn nested_feasibility_is_checked_before_sampling() {
        let m = model();
        let d = sin_drift();
        let free = d.without_bounded();
        let est = Estimator::new(&m, &free, 1e-2, 1);
        let f = TestFn::Cos(0);
        let e = NestedNeumann::new(est, &d.bounded, &f, 4.0, 20, 1000).err().unwrap();
        assert!(matches!(e, Error::Infeasible { .. }));
    }

    #[test]
    fn rejects_small_alpha() {
        let m = model();
        let d = sin_drift();
        let e = verify_identity(&m, &d, &TestFn::Cos(0), 1.0, DEFAULT_DEPTH, &[vec![0.0; 3]], 10, 1e-2, 1);
        assert!(e.is_err());
    }
}
