//! Martingale-problem, contraction, Harnack, Itô-formula and invariance
//! checks.

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{check_invalid, simulate_path, synchronous_pair, Dynamics, PathSource, SimConfig, Trajectory};
use crate::error::{Error, Result};
use crate::model::{DriftSpec, GalerkinModel, Potential};
use crate::quad;
use crate::resolvent::grid::GridOperator;
use crate::resolvent::Estimator;
use crate::rng::derive_seed;
use crate::stats::{batch_means, dist, MeanSe};
use crate::testfn::TestFn;

#[derive(Clone, Debug, Serialize)]
pub struct CrossCovariance {
    pub j: usize,
    pub covariance: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MartingaleReport {
    pub process: String,
    pub k: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub mean_ses: Vec<f64>,
    pub variances: Vec<f64>,
    pub variance_ses: Vec<f64>,
    /// Discrete quadratic variation at the final time (`beta_k` only).
    pub qv: Option<f64>,
    pub qv_se: Option<f64>,
    pub cross: Vec<CrossCovariance>,
    /// Correlation of increments over `[0, T/2]` and `[T/2, T]`.
    pub increment_covariance: f64,
    pub increment_covariance_se: f64,
    pub pass_mean: bool,
    pub pass_qv: bool,
    pub pass_cross: bool,
    pub pass: bool,
}

fn require_unperturbed(source: &impl PathSource) -> Result<()> {
    if source.config().dynamics == Dynamics::Reference {
        return Ok(());
    }
    let perturbed = source.map_paths(|p| p.girsanov_quad.last().copied().unwrap_or(0.0) != 0.0)?;
    if perturbed.into_iter().any(|b| b) {
        return Err(Error::InvalidInput("martingale checks need paths of the B = 0 equation".into()));
    }
    Ok(())
}

/// Path of `beta_k` on the trajectory grid. The linear drift is integrated by
/// the trapezoid rule and the singular drift is the recorded applied drift.
pub fn beta_path(tr: &Trajectory, model: &GalerkinModel, k: usize) -> Vec<f64> {
    let a = model.rate(k);
    let s = model.sigma[k];
    let mut out = Vec::with_capacity(tr.len());
    let mut b = 0.0;
    out.push(0.0);
    for i in 1..tr.len() {
        let (x0, x1) = (tr.state(i - 1)[k], tr.state(i)[k]);
        let h = tr.times[i] - tr.times[i - 1];
        let dwork = tr.work(i)[k] - tr.work(i - 1)[k];
        b += (x1 - x0 - 0.5 * a * h * (x0 + x1) - dwork) / s;
        out.push(b);
    }
    out
}

/// Path of `M_k = phi_k^2(X) - phi_k^2(x_0) - int L phi_k^2`, with
/// `L phi_k^2 = 2 a_k x_k^2 + 2 x_k F_{0,k} + sigma_k^2`.
pub fn m_path(tr: &Trajectory, model: &GalerkinModel, k: usize) -> Vec<f64> {
    let a = model.rate(k);
    let s2 = model.sigma[k].powi(2);
    let x0 = tr.state(0)[k];
    let mut comp = 0.0;
    let mut out = Vec::with_capacity(tr.len());
    out.push(0.0);
    for i in 1..tr.len() {
        let (y0, y1) = (tr.state(i - 1)[k], tr.state(i)[k]);
        let h = tr.times[i] - tr.times[i - 1];
        let dwork = tr.work(i)[k] - tr.work(i - 1)[k];
        comp += a * h * (y0 * y0 + y1 * y1) + 2.0 * y1 * dwork + s2 * h;
        out.push(y1 * y1 - x0 * x0 - comp);
    }
    out
}

fn checkpoints(n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=10).map(|j| j * (n - 1) / 10).collect();
    v.dedup();
    v
}

fn martingale_report(
    source: &impl PathSource,
    model: &GalerkinModel,
    k: usize,
    process: &str,
    path_fn: impl Fn(&Trajectory, usize) -> Vec<f64> + Sync,
    with_qv: bool,
) -> Result<MartingaleReport> {
    if k >= model.dim() {
        return Err(Error::InvalidInput(format!("mode {k} out of range")));
    }
    require_unperturbed(source)?;
    let d = model.dim();
    let per = source.map_paths(|p| {
        if !p.valid {
            return None;
        }
        let own = path_fn(p, k);
        let finals: Vec<f64> = (0..d).map(|j| if j == k { *own.last().unwrap() } else { *path_fn(p, j).last().unwrap() }).collect();
        let qv: f64 = own.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
        Some((own, finals, qv, p.times.clone()))
    })?;
    let total = per.len();
    let ok: Vec<_> = per.into_iter().flatten().collect();
    check_invalid(total - ok.len(), total)?;
    let times_full = &ok[0].3;
    let n = times_full.len();
    let cps = checkpoints(n);
    let mut times = Vec::new();
    let mut means = Vec::new();
    let mut mean_ses = Vec::new();
    let mut variances = Vec::new();
    let mut variance_ses = Vec::new();
    let mut pass_mean = true;
    for &i in &cps {
        let vals: Vec<f64> = ok.iter().map(|p| p.0[i]).collect();
        let m = MeanSe::of(&vals);
        times.push(times_full[i]);
        means.push(m.mean);
        mean_ses.push(m.se);
        variances.push(MeanSe::variance(&vals));
        variance_ses.push(MeanSe::variance_se(&vals));
        if i > 0 && (m.mean.abs() > 3.0 * m.se) {
            pass_mean = false;
        }
        if i == 0 && m.mean != 0.0 {
            pass_mean = false;
        }
    }
    let t_end = times_full[n - 1];
    let dt = source.config().dt;
    let (qv, qv_se, pass_qv) = if with_qv {
        let q: Vec<f64> = ok.iter().map(|p| p.2 / t_end).collect();
        let m = MeanSe::of(&q);
        (Some(m.mean * t_end), Some(m.se * t_end), (m.mean - 1.0).abs() <= 5.0 * dt + 3.0 * m.se)
    } else {
        (None, None, true)
    };
    let cross: Vec<CrossCovariance> = (0..d)
        .filter(|&j| j != k)
        .map(|j| {
            let prod: Vec<f64> = ok.iter().map(|p| p.1[k] * p.1[j]).collect();
            let m = MeanSe::of(&prod);
            CrossCovariance { j, covariance: m.mean, se: m.se, pass: m.mean.abs() <= 3.0 * m.se }
        })
        .collect();
    let mid = (n - 1) / 2;
    let inc: Vec<f64> = ok.iter().map(|p| p.0[mid] * (p.0[n - 1] - p.0[mid])).collect();
    let incm = MeanSe::of(&inc);
    let pass_cross = cross.iter().all(|c| c.pass) && incm.mean.abs() <= 3.0 * incm.se;
    Ok(MartingaleReport {
        process: format!("{process}_{}", k + 1),
        k,
        dt,
        times,
        means,
        mean_ses,
        variances,
        variance_ses,
        qv,
        qv_se,
        cross,
        increment_covariance: incm.mean,
        increment_covariance_se: incm.se,
        pass_mean,
        pass_qv,
        pass_cross,
        pass: pass_mean && pass_qv && pass_cross,
    })
}

/// Mean, variance and quadratic variation of `beta_k`; cross-mode
/// covariances of the terminal values.
pub fn beta_process(source: &impl PathSource, model: &GalerkinModel, k: usize) -> Result<MartingaleReport> {
    martingale_report(source, model, k, "beta", |p, j| beta_path(p, model, j), true)
}

/// Zero-mean profile of `M_k`.
pub fn m_process(source: &impl PathSource, model: &GalerkinModel, k: usize) -> Result<MartingaleReport> {
    let mut r = martingale_report(source, model, k, "M", |p, j| m_path(p, model, j), false)?;
    // the terminal values of different M_j are not orthogonal in general
    r.cross.clear();
    r.pass_cross = r.increment_covariance.abs() <= 3.0 * r.increment_covariance_se;
    r.pass = r.pass_mean && r.pass_cross;
    Ok(r)
}

#[derive(Clone, Debug, Serialize)]
pub struct GronwallRow {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `sup_t |X - Y|^2 e^{-omega t} / |x - y|^2`
    pub ratio: f64,
    /// `sup_t |X - Y|^2 e^{-2 (omega - lambda_min) t} / |x - y|^2`
    pub sharp_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GronwallReport {
    pub tolerance: f64,
    pub rows: Vec<GronwallRow>,
    pub max_ratio: f64,
    pub max_sharp_ratio: f64,
    pub pass: bool,
}

/// Pathwise contraction of synchronously coupled solutions of the `B = 0`
/// equation, with tolerance `5 dt`.
pub fn gronwall_check(
    model: &GalerkinModel,
    drift: &DriftSpec,
    pairs: &[(Vec<f64>, Vec<f64>)],
    cfg: &SimConfig,
) -> Result<GronwallReport> {
    let lmin = model.lambda_min();
    let rows: Vec<GronwallRow> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let (a, b) = synchronous_pair(model, drift, x, y, cfg, i as u64)?;
            if !(a.valid && b.valid) {
                return Err(Error::EnsembleInvalid { invalid: 1, total: 1 });
            }
            let r0 = dist(x, y).powi(2);
            let (mut ratio, mut sharp) = (0.0f64, 0.0f64);
            for j in 0..a.len() {
                let t = a.times[j];
                let r = dist(a.state(j), b.state(j)).powi(2);
                if r0 > 0.0 {
                    ratio = ratio.max(r * (-model.omega * t).exp() / r0);
                    sharp = sharp.max(r * (-2.0 * (model.omega - lmin) * t).exp() / r0);
                } else {
                    ratio = ratio.max(if r == 0.0 { 0.0 } else { f64::INFINITY });
                    sharp = ratio;
                }
            }
            Ok(GronwallRow { x: x.clone(), y: y.clone(), ratio, sharp_ratio: sharp })
        })
        .collect::<Result<_>>()?;
    let tol = 5.0 * cfg.dt;
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let max_sharp = rows.iter().map(|r| r.sharp_ratio).fold(0.0, f64::max);
    Ok(GronwallReport { tolerance: tol, pass: max_ratio <= 1.0 + tol, rows, max_ratio, max_sharp_ratio: max_sharp })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtensionRow {
    pub distance: f64,
    pub sup_distance: f64,
    pub ratio: f64,
}

/// Sup-distance of trajectories started from `x_n -> x`, relative to
/// `|x_n - x|`.
pub fn lipschitz_extension(
    model: &GalerkinModel,
    drift: &DriftSpec,
    x: &[f64],
    direction: &[f64],
    scales: &[f64],
    cfg: &SimConfig,
) -> Result<Vec<ExtensionRow>> {
    let base = simulate_path(model, drift, x, cfg, 0)?;
    scales
        .iter()
        .map(|&s| {
            let xn: Vec<f64> = x.iter().zip(direction).map(|(a, d)| a + s * d).collect();
            let p = simulate_path(model, drift, &xn, cfg, 0)?;
            let sup = (0..p.len().min(base.len())).map(|j| dist(p.state(j), base.state(j))).fold(0.0, f64::max);
            let r = dist(&xn, x);
            Ok(ExtensionRow { distance: r, sup_distance: sup, ratio: sup / r })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct HarnackReport {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
    pub q: f64,
    pub p_factor: f64,
    pub exponent: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub warnings: Vec<String>,
    pub pass: bool,
}

/// `p omega |sigma^{-1}|^2 |x - y|^2 / ((q - 1)(1 - e^{-2 omega t}))`, with
/// `omega / (1 - e^{-2 omega t})` replaced by `1 / (2t)` when `omega <= 0`.
pub fn harnack_exponent(model: &GalerkinModel, x: &[f64], y: &[f64], t: f64, q: f64, p: f64) -> (f64, Option<String>) {
    let inv = model.sigma.iter().map(|s| 1.0 / (s * s)).fold(0.0, f64::max);
    let r2 = dist(x, y).powi(2);
    let w = model.omega;
    if w > 0.0 {
        (inv * p * w * r2 / ((q - 1.0) * (-(-2.0 * w * t).exp_m1())), None)
    } else {
        let msg = format!("omega = {w} <= 0: using 1/(2t) in place of omega/(1 - e^(-2 omega t))");
        (inv * p * r2 / ((q - 1.0) * 2.0 * t), Some(msg))
    }
}

/// Monte Carlo Harnack comparison `(P_t f(x))^q <= P_t f^q(y) e^{exponent}`,
/// both sides from the same noise. One-sided pass at 3 standard errors.
#[allow(clippy::too_many_arguments)]
pub fn harnack_check(
    model: &GalerkinModel,
    drift: &DriftSpec,
    f: &TestFn,
    x: &[f64],
    y: &[f64],
    t: f64,
    q: f64,
    p_factor: Option<f64>,
    budget: usize,
    dt: f64,
    seed: u64,
) -> Result<HarnackReport> {
    if !(q > 1.0 && t > 0.0) {
        return Err(Error::InvalidInput("need q > 1 and t > 0".into()));
    }
    if !f.is_nonnegative() || f.sup_norm().is_none() {
        return Err(Error::InvalidInput(format!("{f} must be non-negative and bounded")));
    }
    let p = p_factor.unwrap_or(q / (q - 1.0));
    let (exponent, warn) = harnack_exponent(model, x, y, t, q, p);
    let est = Estimator::new(model, drift, dt, seed);
    let sample = |z: &[f64]| -> Result<Vec<f64>> {
        let v: Vec<Option<f64>> = (0..budget as u64)
            .into_par_iter()
            .map(|i| Ok(est.terminal(z, i, t)?.map(|(e, _)| f.eval(&e))))
            .collect::<Result<_>>()?;
        let ok: Vec<f64> = v.into_iter().flatten().collect();
        check_invalid(budget - ok.len(), budget)?;
        Ok(ok)
    };
    let fx = sample(x)?;
    let fy = if x == y { fx.clone() } else { sample(y)? };
    let mx = MeanSe::of(&fx);
    let my = MeanSe::of(&fy.iter().map(|v| v.powf(q)).collect::<Vec<_>>());
    let factor = exponent.exp();
    let lhs = mx.mean.powf(q);
    let rhs = my.mean * factor;
    let se_l = q * mx.mean.powf(q - 1.0) * mx.se;
    let se_r = factor * my.se;
    let se = (se_l * se_l + se_r * se_r).sqrt();
    let pass = if x == y { lhs <= rhs * (1.0 + 1e-12) } else { lhs - rhs <= 3.0 * se };
    Ok(HarnackReport {
        x: x.to_vec(),
        y: y.to_vec(),
        t,
        q,
        p_factor: p,
        exponent,
        lhs,
        rhs,
        se,
        warnings: warn.into_iter().collect(),
        pass,
    })
}

/// `P_t f` for `f = exp(-gamma (x_k - c)^2)` in the linear (`F_0 = 0`,
/// `B = 0`) model.
pub fn ou_gaussian_pt(model: &GalerkinModel, k: usize, center: f64, gamma: f64, x: &[f64], t: f64) -> f64 {
    let a = model.rate(k);
    let m = (a * t).exp() * x[k];
    let s2 = model.sigma[k].powi(2) * if a == 0.0 { t } else { (2.0 * a * t).exp_m1() / (2.0 * a) };
    let den = 1.0 + 2.0 * gamma * s2;
    den.powf(-0.5) * (-gamma * (m - center).powi(2) / den).exp()
}

/// Closed-form Harnack comparison in the linear model.
#[allow(clippy::too_many_arguments)]
pub fn harnack_ou_exact(
    model: &GalerkinModel,
    k: usize,
    center: f64,
    gamma: f64,
    x: &[f64],
    y: &[f64],
    t: f64,
    q: f64,
    p_factor: Option<f64>,
) -> HarnackReport {
    let p = p_factor.unwrap_or(q / (q - 1.0));
    let (exponent, warn) = harnack_exponent(model, x, y, t, q, p);
    let lhs = ou_gaussian_pt(model, k, center, gamma, x, t).powf(q);
    let rhs = ou_gaussian_pt(model, k, center, q * gamma, y, t) * exponent.exp();
    HarnackReport {
        x: x.to_vec(),
        y: y.to_vec(),
        t,
        q,
        p_factor: p,
        exponent,
        lhs,
        rhs,
        se: 0.0,
        warnings: warn.into_iter().collect(),
        pass: lhs <= rhs,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ItoReport {
    pub function_id: String,
    pub alpha: f64,
    pub t: f64,
    pub point: Vec<f64>,
    pub mean_residual: f64,
    pub mean_residual_se: f64,
    pub second_moment: f64,
    pub energy: f64,
    /// mean of `R^2 - int |sigma grad f|^2`
    pub excess: f64,
    pub excess_se: f64,
    pub pass: bool,
}

/// Itô formula for `f = U_alpha g` along paths of the `B = 0` equation:
/// `R = f(X_t) - f(x) - int (alpha f - g)(X_s) ds` is centred with
/// `E R^2 = E int |sigma grad f|^2 ds`. `f` and `grad f` come from the grid
/// resolvent.
#[allow(clippy::too_many_arguments)]
pub fn ito_resolvent_check(
    model: &GalerkinModel,
    potential: &Potential,
    g: &TestFn,
    alpha: f64,
    x: &[f64],
    t: f64,
    budget: usize,
    dt: f64,
    seed: u64,
) -> Result<ItoReport> {
    g.check_dim(model.dim())?;
    let op = GridOperator::for_coords(model, potential, &g.active_coords(), &[x.to_vec()], None)?;
    let gg = op.sample(|y| g.eval(y));
    let f = op.resolvent(alpha, &gg)?;
    let lf = f.map(|i, v| alpha * v - gg.values[i]);
    let grads: Vec<_> = (0..op.layout.axes.len()).map(|ax| op.partial(&f, ax)).collect();
    let energy_at = |y: &[f64]| -> f64 {
        op.layout
            .axes
            .iter()
            .zip(&grads)
            .map(|(a, d)| (model.sigma[a.coord] * d.eval(y)).powi(2))
            .sum()
    };
    let drift = DriftSpec::unperturbed(*potential);
    let est = Estimator::new(model, &drift, dt, seed);
    let f0 = f.eval(x);
    let per: Vec<Option<(f64, f64)>> = (0..budget as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = est.stepper(x, i, t);
            let (mut pl, mut pe) = (lf.eval(x), energy_at(x));
            let (mut il, mut ie) = (0.0, 0.0);
            while s.valid && s.t < t - 1e-12 {
                let h = dt.min(t - s.t);
                s.advance(h)?;
                let (cl, ce) = (lf.eval(&s.x), energy_at(&s.x));
                il += 0.5 * h * (pl + cl);
                ie += 0.5 * h * (pe + ce);
                pl = cl;
                pe = ce;
            }
            Ok(s.valid.then(|| (f.eval(&s.x) - f0 - il, ie)))
        })
        .collect::<Result<_>>()?;
    let ok: Vec<(f64, f64)> = per.into_iter().flatten().collect();
    check_invalid(budget - ok.len(), budget)?;
    let r = MeanSe::of(&ok.iter().map(|p| p.0).collect::<Vec<_>>());
    let r2 = MeanSe::of(&ok.iter().map(|p| p.0 * p.0).collect::<Vec<_>>());
    let en = MeanSe::of(&ok.iter().map(|p| p.1).collect::<Vec<_>>());
    let ex = MeanSe::of(&ok.iter().map(|p| p.0 * p.0 - p.1).collect::<Vec<_>>());
    let pass = r.mean.abs() <= 3.0 * r.se.max(1e-15) && ex.mean.abs() <= 3.0 * ex.se.max(1e-15);
    Ok(ItoReport {
        function_id: g.to_string(),
        alpha,
        t,
        point: x.to_vec(),
        mean_residual: r.mean,
        mean_residual_se: r.se,
        second_moment: r2.mean,
        energy: en.mean,
        excess: ex.mean,
        excess_se: ex.se,
        pass,
    })
}

/// `L_0 phi = 1/2 sum sigma_k^2 d_kk phi + sum (a_k x_k + F_{0,k}(x)) d_k phi`.
pub fn generator_l0(model: &GalerkinModel, potential: &Potential, phi: &TestFn, x: &[f64]) -> f64 {
    let g = phi.gradient(x);
    let h = phi.hessian_diag(x);
    (0..model.dim())
        .map(|k| {
            0.5 * model.sigma[k].powi(2) * h[k]
                + (model.rate(k) * x[k] + potential.min_norm_drift_1d(x[k])) * g[k]
        })
        .sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceRow {
    pub function_id: String,
    pub mean: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceReport {
    pub samples: usize,
    pub batches: usize,
    pub rows: Vec<InvarianceRow>,
    pub warnings: Vec<String>,
    pub pass: bool,
}

pub const INVARIANCE_BATCHES: usize = 30;

/// Ergodic averages of `L_0 phi` over a long trajectory with batch-means
/// standard errors.
pub fn invariance_check(
    model: &GalerkinModel,
    potential: &Potential,
    phis: &[TestFn],
    sample: &[Vec<f64>],
) -> InvarianceReport {
    let mut warnings = Vec::new();
    if sample.len() < INVARIANCE_BATCHES * 100 {
        warnings.push(format!("only {} samples for {INVARIANCE_BATCHES} batches", sample.len()));
    }
    let rows: Vec<InvarianceRow> = phis
        .iter()
        .map(|phi| {
            let series: Vec<f64> = sample.iter().map(|x| generator_l0(model, potential, phi, x)).collect();
            let m = batch_means(&series, INVARIANCE_BATCHES);
            let pass = if matches!(phi, TestFn::Const(_)) { m.mean == 0.0 } else { m.within(0.0, 3.0) };
            InvarianceRow { function_id: phi.to_string(), mean: m.mean, se: m.se, pass }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    InvarianceReport { samples: sample.len(), batches: INVARIANCE_BATCHES, rows, warnings, pass }
}

/// `int h dnu` for the one-dimensional Gibbs law
/// `nu ~ exp(-2 (phi(x) + (lambda - omega) x^2 / 2) / sigma^2)`.
pub fn gibbs_expectation_1d(model: &GalerkinModel, potential: &Potential, h: impl Fn(f64) -> f64) -> Result<f64> {
    if model.dim() != 1 {
        return Err(Error::InvalidInput("Gibbs oracle is one-dimensional".into()));
    }
    let gap = model.eigenvalues[0] - model.omega;
    let s2 = model.sigma[0].powi(2);
    let dens = |x: f64| (-2.0 * (potential.value_1d(x) + 0.5 * gap * x * x) / s2).exp();
    let z = quad::integrate_real_line(&dens, 0.0, 1e-12);
    let num = quad::integrate_real_line(&|x| h(x) * dens(x), 0.0, 1e-12);
    Ok(num / z)
}

#[derive(Clone, Debug, Serialize)]
pub struct GibbsComparison {
    pub function_id: String,
    pub time_average: f64,
    pub se: f64,
    pub gibbs: f64,
    /// `int L_0 phi dnu` by quadrature
    pub generator_integral: f64,
    pub pass: bool,
}

/// Ergodic average of `phi` against Gibbs-density quadrature.
pub fn gibbs_check(model: &GalerkinModel, potential: &Potential, phi: &TestFn, sample: &[Vec<f64>]) -> Result<GibbsComparison> {
    let series: Vec<f64> = sample.iter().map(|x| phi.eval(x)).collect();
    let m = batch_means(&series, INVARIANCE_BATCHES);
    let gibbs = gibbs_expectation_1d(model, potential, |x| phi.eval(&[x]))?;
    let gen = gibbs_expectation_1d(model, potential, |x| generator_l0(model, potential, phi, &[x]))?;
    Ok(GibbsComparison {
        function_id: phi.to_string(),
        time_average: m.mean,
        se: m.se,
        gibbs,
        generator_integral: gen,
        pass: (m.mean - gibbs).abs() <= 3.0 * m.se,
    })
}

/// Independent seeds for sub-checks of one run.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(seed, |s, b| derive_seed(s, b as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::simulate_ensemble;

    #[test]
    fn beta_and_m_start_at_zero() {
        let m = GalerkinModel::new(vec![1.0, 4.0], 0.0, vec![1.0, 1.0], 0.5).unwrap();
        let d = DriftSpec::unperturbed(Potential::Abs { c: 1.0 });
        let c = SimConfig::new(0.01, 0.5, 1, 1).unwrap();
        let p = simulate_path(&m, &d, &[0.3, -0.4], &c, 0).unwrap();
        assert_eq!(beta_path(&p, &m, 0)[0], 0.0);
        assert_eq!(m_path(&p, &m, 1)[0], 0.0);
    }

    #[test]
    fn beta_of_noise_free_linear_path_is_small() {
        // sigma tiny: beta equals the trapezoid error of the exact exponential
        let m = GalerkinModel::new(vec![2.0], 0.0, vec![1e-12], 0.5).unwrap();
        let d = DriftSpec::unperturbed(Potential::Zero);
        let c = SimConfig::new(0.01, 1.0, 1, 1).unwrap();
        let p = simulate_path(&m, &d, &[1.0], &c, 0).unwrap();
        let b = beta_path(&p, &m, 0);
        // trapezoid error of the exact exponential: a^3 dt^3 / 12 per step
        let drift_error = b.last().unwrap().abs() * 1e-12;
        assert!(drift_error < 8.0 * 1e-4 / 12.0 * 1.01, "{drift_error}");
    }

    #[test]
    fn ou_second_moment_oracle() {
        let m = GalerkinModel::new(vec![1.0, 4.0], 0.5, vec![1.0, 1.0], 0.5).unwrap();
        let d = DriftSpec::unperturbed(Potential::Zero);
        let c = SimConfig::new(0.01, 1.0, 11, 4000).unwrap();
        let e = simulate_ensemble(&m, &d, &[1.0, -0.5], &c).unwrap();
        let r = m_process(&e, &m, 0).unwrap();
        assert!(r.pass_mean, "{r:?}");
        let a: f64 = -0.5;
        let second = (2.0 * a).exp() + (2.0 * a).exp_m1() / (2.0 * a);
        let sq: Vec<f64> = e.paths.iter().map(|p| p.last_state()[0].powi(2)).collect();
        assert!(MeanSe::of(&sq).within(second, 3.0));
    }

    #[test]
    fn harnack_jensen_case() {
        let m = GalerkinModel::new(vec![1.0], 0.5, vec![1.0], 0.5).unwrap();
        let d = DriftSpec::unperturbed(Potential::Abs { c: 1.0 });
        let f = TestFn::Gauss { k: 0, center: 0.3, gamma: 1.0 };
        let r = harnack_check(&m, &d, &f, &[0.2], &[0.2], 1.0, 2.0, None, 500, 1e-2, 4).unwrap();
        assert_eq!(r.exponent, 0.0);
        assert!(r.lhs <= r.rhs);
    }

    #[test]
    fn harnack_ou_closed_form() {
        let m = GalerkinModel::new(vec![1.0], 0.5, vec![1.0], 0.5).unwrap();
        let r = harnack_ou_exact(&m, 0, 0.0, 1.0, &[1.0], &[0.0], 1.0, 2.0, None);
        assert!(r.pass, "{r:?}");
        // Gaussian oracle for the left side at t = 1
        let a: f64 = -0.5;
        let s2 = (2.0 * a).exp_m1() / (2.0 * a);
        let mean = a.exp();
        let pt = (1.0 + 2.0 * s2).powf(-0.5) * (-(mean * mean) / (1.0 + 2.0 * s2)).exp();
        assert!((r.lhs - pt * pt).abs() < 1e-14);
    }

    #[test]
    fn gibbs_oracle_gaussian() {
        // linear model: nu = N(0, sigma^2 / (2 gap))
        let m = GalerkinModel::new(vec![1.5], 0.5, vec![1.0], 0.5).unwrap();
        let v = gibbs_expectation_1d(&m, &Potential::Zero, |x| x * x).unwrap();
        assert!((v - 0.5).abs() < 1e-9);
        let c = gibbs_expectation_1d(&m, &Potential::Zero, |x| x.cos()).unwrap();
        assert!((c - (-0.25f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn generator_of_constant_is_zero() {
        let m = GalerkinModel::new(vec![1.0, 4.0], 0.0, vec![1.0, 1.0], 0.5).unwrap();
        assert_eq!(generator_l0(&m, &Potential::Abs { c: 1.0 }, &TestFn::Const(3.0), &[0.4, 1.0]), 0.0);
    }
}
