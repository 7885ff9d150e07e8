//! Girsanov densities, reweighted kernels `Q_t` and mollified drifts.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{check_invalid, Dynamics, PathSource, Trajectory};
use crate::error::{Error, Result};
use crate::model::{BoundedDrift, CoordinateTable, DriftSpec, GalerkinModel};
use crate::resolvent::grid::GridOperator;
use crate::resolvent::{Estimator, KernelEstimate, KernelMeta, Named, ESS_FLOOR};
use crate::rng::derive_seed;
use crate::stats::{effective_sample_size, MeanSe};
use crate::testfn::TestFn;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GirsanovWeight {
    pub t: f64,
    pub log_weight: f64,
    pub weight: f64,
}

/// `rho_t = exp(int <sigma^{-1}B, dW> - 1/2 int |sigma^{-1}B|^2 ds)` read from
/// the recorded integrals; `t` must be a grid time.
pub fn weight_of(tr: &Trajectory, t: f64) -> Result<GirsanovWeight> {
    let i = tr.index_of(t)?;
    let lw = tr.log_weight_at(i);
    Ok(GirsanovWeight { t: tr.times[i], log_weight: lw, weight: lw.exp() })
}

#[derive(Clone, Debug, Serialize)]
pub struct WeightMoments {
    pub t: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub second: f64,
    pub second_se: f64,
    /// `e^{t |sigma^{-1} B|_inf^2}`
    pub second_bound: f64,
    pub ess: f64,
    pub mean_pass: bool,
    pub second_pass: bool,
    pub warnings: Vec<String>,
}

/// `|sigma^{-1} B|_inf` from the declared bound.
pub fn scaled_sup(model: &GalerkinModel, drift: &DriftSpec) -> f64 {
    let smin = model.sigma.iter().copied().fold(f64::INFINITY, f64::min);
    drift.sup_norm / smin
}

/// Martingale normalization and second-moment bound of `rho_t`.
pub fn weight_moments(source: &impl PathSource, t: f64, b_sup: f64) -> Result<WeightMoments> {
    let per: Vec<Option<f64>> = source.map_paths(|p| {
        if !p.valid {
            return Ok(None);
        }
        weight_of(p, t).map(|w| Some(w.weight))
    })?
    .into_iter()
    .collect::<Result<_>>()?;
    let w: Vec<f64> = per.into_iter().flatten().collect();
    check_invalid(source.len() - w.len(), source.len())?;
    let m1 = MeanSe::of(&w);
    let sq: Vec<f64> = w.iter().map(|v| v * v).collect();
    let m2 = MeanSe::of(&sq);
    let bound = (t * b_sup * b_sup).exp();
    let ess = effective_sample_size(&w);
    let mut warnings = Vec::new();
    if ess < ESS_FLOOR {
        warnings.push(format!("effective sample size {ess:.1} below floor {ESS_FLOOR}"));
    }
    Ok(WeightMoments {
        t,
        mean: m1.mean,
        mean_se: m1.se,
        second: m2.mean,
        second_se: m2.se,
        second_bound: bound,
        ess,
        mean_pass: (m1.mean - 1.0).abs() <= 3.0 * m1.se,
        second_pass: m2.mean <= bound * (1.0 + 3.0 * m2.se),
        warnings,
    })
}

/// Plain ensemble mean of `f(X_t)`.
pub fn p_kernel(source: &impl PathSource, f: &TestFn, t: f64) -> Result<KernelEstimate> {
    kernel(source, f, t, false)
}

/// `Q_t f(x_0) = E[f(X_t) rho_t]` over paths of the `B = 0` equation.
pub fn q_kernel(source: &impl PathSource, f: &TestFn, t: f64) -> Result<KernelEstimate> {
    kernel(source, f, t, true)
}

fn kernel(source: &impl PathSource, f: &TestFn, t: f64, weighted: bool) -> Result<KernelEstimate> {
    let drifted = source.config().dynamics == Dynamics::Drifted;
    let per: Vec<Result<Option<(f64, f64, f64)>>> = source.map_paths(|p| {
        if !p.valid {
            return Ok(None);
        }
        let i = p.index_of(t)?;
        let w = if weighted { p.log_weight_at(i).exp() } else { 1.0 };
        Ok(Some((f.eval(p.state(i)) * w, w, p.girsanov_quad[i])))
    })?;
    let ok: Vec<(f64, f64, f64)> = per.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if weighted && drifted && ok.iter().any(|v| v.2 != 0.0) {
        return Err(Error::InvalidInput("Q_t needs paths simulated without B (reference dynamics)".into()));
    }
    check_invalid(source.len() - ok.len(), source.len())?;
    let vals: Vec<f64> = ok.iter().map(|v| v.0).collect();
    let m = MeanSe::of(&vals);
    let mut warnings = Vec::new();
    let ess = if weighted {
        let e = effective_sample_size(&ok.iter().map(|v| v.1).collect::<Vec<_>>());
        if e < ESS_FLOOR {
            warnings.push(format!("effective sample size {e:.1} below floor {ESS_FLOOR}"));
        }
        Some(e)
    } else {
        None
    };
    let x0 = source.with_path(0, |p| p.state(0).to_vec())?;
    Ok(KernelEstimate {
        value: m.mean,
        std_error: m.se,
        n_samples: vals.len(),
        meta: KernelMeta {
            kind: if weighted { "Q_t" } else { "P_t" }.into(),
            parameter: t,
            function_id: f.to_string(),
            point: x0,
        },
        warnings,
        ess,
        truncation_bound: 0.0,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ChapmanKolmogorov {
    pub direct: f64,
    pub direct_se: f64,
    pub nested: f64,
    pub nested_se: f64,
    pub pass: bool,
}

/// `Q_{t+s} f(x)` against `E[rho_t (Q_s f)(X_t)]` with an inner estimate of
/// `Q_s f` at every outer endpoint.
#[allow(clippy::too_many_arguments)]
pub fn chapman_kolmogorov(
    model: &GalerkinModel,
    drift: &DriftSpec,
    f: &TestFn,
    x: &[f64],
    t: f64,
    s: f64,
    outer: usize,
    inner: usize,
    dt: f64,
    seed: u64,
) -> Result<ChapmanKolmogorov> {
    let direct = Estimator::new(model, drift, dt, derive_seed(seed, 1)).weighted().estimate_pt(f, x, t + s, outer)?;
    let out_est = Estimator::new(model, drift, dt, derive_seed(seed, 2)).weighted();
    let vals: Vec<Option<f64>> = (0..outer as u64)
        .into_par_iter()
        .map(|i| {
            let Some((y, w)) = out_est.terminal(x, i, t)? else { return Ok(None) };
            let mut acc = Vec::with_capacity(inner);
            let in_est = Estimator::new(model, drift, dt, derive_seed(seed, 1000 + i)).weighted();
            for j in 0..inner as u64 {
                if let Some((z, v)) = in_est.terminal(&y, j, s)? {
                    acc.push(v * f.eval(&z));
                }
            }
            Ok(Some(w * acc.iter().sum::<f64>() / acc.len().max(1) as f64))
        })
        .collect::<Result<_>>()?;
    let ok: Vec<f64> = vals.into_iter().flatten().collect();
    check_invalid(outer - ok.len(), outer)?;
    let m = MeanSe::of(&ok);
    let se = (direct.std_error.powi(2) + m.se.powi(2)).sqrt();
    Ok(ChapmanKolmogorov {
        direct: direct.value,
        direct_se: direct.std_error,
        nested: m.mean,
        nested_se: m.se,
        pass: (direct.value - m.mean).abs() <= 3.0 * se,
    })
}

/// `B_{k,alpha} = sum_{i < k} alpha U_alpha(B_i) e_i`, with `U_alpha` the
/// resolvent of the `B = 0` equation. Tabulated per coordinate from the grid
/// resolvent; point evaluations by Monte Carlo are cached.
pub struct MollifiedDrift {
    pub k: usize,
    pub alpha: f64,
    pub tables: Arc<Vec<CoordinateTable>>,
    model: GalerkinModel,
    drift: DriftSpec,
    mc_budget: usize,
    dt: f64,
    seed: u64,
    cache: Mutex<HashMap<Vec<u64>, (Vec<f64>, Vec<f64>)>>,
}

#[allow(clippy::too_many_arguments)]
pub fn mollify_drift(
    model: &GalerkinModel,
    drift: &DriftSpec,
    k: usize,
    alpha: f64,
    mc_budget: usize,
    dt: f64,
    seed: u64,
) -> Result<MollifiedDrift> {
    if !(alpha > 0.0) || k > model.dim() {
        return Err(Error::InvalidInput(format!("need alpha > 0 and k <= {}, got alpha={alpha} k={k}", model.dim())));
    }
    let mut tables = Vec::with_capacity(model.dim());
    for i in 0..model.dim() {
        let op = GridOperator::for_coords(model, &drift.potential, &[i], &[], Some(2001))?;
        let axis = &op.layout.axes[0];
        let values = if i < k {
            let b = op.sample(|x| drift.bounded.eval_1d(i, x[i]));
            op.resolvent(alpha, &b)?.values.iter().map(|v| alpha * v).collect()
        } else {
            vec![0.0; axis.n]
        };
        tables.push(CoordinateTable { lo: axis.lo, step: axis.step, values });
    }
    Ok(MollifiedDrift {
        k,
        alpha,
        tables: Arc::new(tables),
        model: model.clone(),
        drift: drift.clone(),
        mc_budget,
        dt,
        seed,
        cache: Mutex::new(HashMap::new()),
    })
}

impl MollifiedDrift {
    /// Tabulated drift usable inside path simulation.
    pub fn as_bounded(&self) -> BoundedDrift {
        BoundedDrift::Table { tables: self.tables.clone() }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len()).map(|i| self.tables[i].eval(x[i])).collect()
    }

    /// Monte Carlo evaluation `alpha U_alpha B_i (x)` per coordinate with
    /// standard errors; the noise stream is keyed by the bits of `x`.
    pub fn eval_mc(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let h = key.iter().fold(self.seed, |a, b| derive_seed(a, *b));
        let free = self.drift.without_bounded();
        let est = Estimator::new(&self.model, &free, self.dt, h);
        let mut vals = vec![0.0; x.len()];
        let mut ses = vec![0.0; x.len()];
        for i in 0..self.k {
            let b = &self.drift.bounded;
            let f = Named(format!("B_{}", i + 1), move |y: &[f64]| b.eval_1d(i, y[i]));
            let e = est.estimate_resolvent(&f, x, self.alpha, self.mc_budget)?;
            vals[i] = self.alpha * e.value;
            ses[i] = self.alpha * e.std_error;
        }
        let out = (vals, ses);
        self.cache.lock().expect("cache lock").insert(key, out.clone());
        Ok(out)
    }

    pub fn sup_norm(&self) -> f64 {
        self.as_bounded().analytic_sup(self.tables.len())
    }
}

/// `sqrt(mean |B_n(x) - B(x)|^2)` over an empirical sample.
pub fn l2_distance(moll: &MollifiedDrift, drift: &DriftSpec, sample: &[Vec<f64>]) -> f64 {
    let mut b = vec![0.0; moll.tables.len()];
    let acc: f64 = sample
        .iter()
        .map(|x| {
            drift.bounded.eval(x, &mut b);
            moll.eval(x).iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>()
        })
        .sum();
    (acc / sample.len().max(1) as f64).sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct QConvergenceRow {
    pub k: usize,
    pub alpha: f64,
    pub estimate: f64,
    pub difference: f64,
    pub se: f64,
    pub weight_l1: f64,
    pub weight_l1_se: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QConvergenceReport {
    pub t: f64,
    pub function_id: String,
    pub reference: f64,
    pub reference_se: f64,
    pub rows: Vec<QConvergenceRow>,
}

/// Recompute the Girsanov weight along stored paths with each mollified drift
/// and compare `Q^n_t f(x_0)` with `Q_t f(x_0)` and `E|rho^n_t - rho_t|`.
pub fn q_convergence_check(
    source: &impl PathSource,
    model: &GalerkinModel,
    f: &TestFn,
    t: f64,
    drifts: &[&MollifiedDrift],
) -> Result<QConvergenceReport> {
    let per: Vec<Result<Option<(f64, f64, Vec<f64>)>>> = source.map_paths(|p| {
        if !p.valid {
            return Ok(None);
        }
        let end = p.index_of(t)?;
        let fx = f.eval(p.state(end));
        let rho = p.log_weight_at(end).exp();
        let mut rhos = Vec::with_capacity(drifts.len());
        for m in drifts {
            let mut lw = 0.0;
            for j in 0..end {
                let b = m.eval(p.state(j));
                let dw = p.increment(j);
                let h = p.times[j + 1] - p.times[j];
                for k in 0..b.len() {
                    let v = b[k] / model.sigma[k];
                    lw += v * dw[k] - 0.5 * v * v * h;
                }
            }
            rhos.push(lw.exp());
        }
        Ok(Some((fx, rho, rhos)))
    })?;
    let ok: Vec<(f64, f64, Vec<f64>)> = per.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    check_invalid(source.len() - ok.len(), source.len())?;
    let reference = MeanSe::of(&ok.iter().map(|v| v.0 * v.1).collect::<Vec<_>>());
    let rows = drifts
        .iter()
        .enumerate()
        .map(|(n, m)| {
            let est = MeanSe::of(&ok.iter().map(|v| v.0 * v.2[n]).collect::<Vec<_>>());
            let diff = MeanSe::of(&ok.iter().map(|v| v.0 * (v.2[n] - v.1)).collect::<Vec<_>>());
            let l1 = MeanSe::of(&ok.iter().map(|v| (v.2[n] - v.1).abs()).collect::<Vec<_>>());
            QConvergenceRow {
                k: m.k,
                alpha: m.alpha,
                estimate: est.mean,
                difference: diff.mean,
                se: diff.se,
                weight_l1: l1.mean,
                weight_l1_se: l1.se,
            }
        })
        .collect();
    Ok(QConvergenceReport { t, function_id: f.to_string(), reference: reference.mean, reference_se: reference.se, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate_ensemble, simulate_path, SimConfig};
    use crate::model::Potential;

    #[test]
    fn zero_drift_has_unit_weight() {
        let m = GalerkinModel::new(vec![1.0, 2.0], 0.0, vec![1.0, 1.0], 0.5).unwrap();
        let d = DriftSpec::unperturbed(Potential::Abs { c: 1.0 });
        let c = SimConfig::new(0.01, 1.0, 1, 1).unwrap();
        let p = simulate_path(&m, &d, &[0.5, 0.5], &c, 0).unwrap();
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(weight_of(&p, t).unwrap().weight, 1.0);
        }
        assert!(weight_of(&p, 0.305).is_err());
    }

    #[test]
    fn q_equals_p_without_drift() {
        let m = GalerkinModel::new(vec![1.0, 2.0], 0.0, vec![1.0, 1.0], 0.5).unwrap();
        let d = DriftSpec::unperturbed(Potential::Abs { c: 1.0 });
        let c = SimConfig::new(0.01, 1.0, 4, 300).unwrap();
        let e = simulate_ensemble(&m, &d, &[0.5, -0.2], &c).unwrap();
        let f = TestFn::Cos(0);
        let q = q_kernel(&e, &f, 1.0).unwrap();
        let p = p_kernel(&e, &f, 1.0).unwrap();
        assert_eq!(q.value.to_bits(), p.value.to_bits());
        assert_eq!(q.std_error.to_bits(), p.std_error.to_bits());
    }

    #[test]
    fn constant_drift_mollifies_to_itself() {
        let m = GalerkinModel::new(vec![1.0, 2.0], 0.0, vec![1.0, 1.0], 0.5).unwrap();
        let d = DriftSpec::new(Potential::Abs { c: 1.0 }, BoundedDrift::Constant { value: vec![0.3, 0.0] }, None, 2)
            .unwrap();
        let md = mollify_drift(&m, &d, 2, 5.0, 500, 1e-2, 3).unwrap();
        let v = md.eval(&[0.4, -1.0]);
        assert!((v[0] - 0.3).abs() < 1e-9 && v[1].abs() < 1e-12);
        let (mc, se) = md.eval_mc(&[0.4, -1.0]).unwrap();
        assert!((mc[0] - 0.3).abs() < 1e-12 && se[0] < 1e-12);
    }
}
