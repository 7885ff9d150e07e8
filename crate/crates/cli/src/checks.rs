//! Individual checks. Each returns a JSON report, a pass flag and optional
//! CSV side files.

use serde::Serialize;
use serde_json::{json, Value};

use sdelab_core::config::{test_fn, Loaded, PotentialCheck};
use sdelab_core::diagnostics::{
    beta_process, gibbs_check, gronwall_check, harnack_check, harnack_ou_exact, invariance_check, ito_resolvent_check,
    m_process, sub_seed,
};
use sdelab_core::engine::long_run;
use sdelab_core::girsanov::{p_kernel, q_kernel, scaled_sup, weight_moments};
use sdelab_core::io::{columns_csv, matrix_csv, trajectory_csv};
use sdelab_core::potential::{
    counterexample_punctured_line, extension_check, hunt_crosscheck, polar_test, ray_cone_build, reduced_function,
    DiscreteResolvent, ROUTE_TOL,
};
use sdelab_core::resolvent::neumann::{alpha_threshold, lipschitz_probe, verify_identity};
use sdelab_core::rng::{NoiseStream, Purpose};
use sdelab_core::stats::MeanSe;
use sdelab_core::{
    simulate_ensemble, validate_model, Dynamics, Error, LazyEnsemble, Potential, Result, SimConfig, TestFn,
};

pub struct Check {
    pub name: String,
    pub pass: bool,
    pub report: Value,
    pub files: Vec<(String, String)>,
}

impl Check {
    fn new(name: &str, pass: bool, report: impl Serialize) -> Result<Self> {
        let report = serde_json::to_value(report).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(Self { name: name.into(), pass, report, files: Vec::new() })
    }

    fn with_file(mut self, name: &str, contents: String) -> Self {
        self.files.push((name.into(), contents));
        self
    }
}

pub struct Ctx<'a> {
    pub loaded: &'a Loaded,
    pub seed: u64,
    pub scale: f64,
    pub config_hash: String,
}

impl Ctx<'_> {
    pub fn budget(&self, n: usize) -> usize {
        ((n as f64 * self.scale).round() as usize).max(30)
    }

    fn seed_for(&self, tag: &str) -> u64 {
        sub_seed(self.seed, tag)
    }

    fn dim(&self) -> usize {
        self.loaded.model.dim()
    }

    /// Deterministic base points `x0 + 0.5 z`.
    fn points(&self, tag: &str, n: usize) -> Vec<Vec<f64>> {
        let seed = self.seed_for(tag);
        (0..n)
            .map(|i| {
                let mut z = vec![0.0; self.dim()];
                NoiseStream::new(seed, i as u64, Purpose::Auxiliary).fill_normals(&mut z);
                z.iter().zip(&self.loaded.x0).map(|(z, x)| x + 0.5 * z).collect()
            })
            .collect()
    }

    fn default_alpha(&self) -> f64 {
        let a = alpha_threshold(&self.loaded.drift);
        if a > 0.0 {
            a
        } else {
            1.0
        }
    }
}

pub fn model(ctx: &Ctx) -> Result<Check> {
    let r = validate_model(&ctx.loaded.model, ctx.loaded.config.model.hs_tolerance);
    Check::new("model", r.pass, &r)
}

#[derive(Serialize)]
struct Record {
    quantity: String,
    t: f64,
    estimate: f64,
    se: f64,
    bound: f64,
    pass: bool,
}

pub fn girsanov(ctx: &Ctx) -> Result<Check> {
    let c = &ctx.loaded.config.checks.girsanov;
    let l = ctx.loaded;
    let tmax = c.times.iter().copied().fold(0.0, f64::max);
    if !(tmax > 0.0) {
        return Err(Error::Config("checks.girsanov.times must contain a positive time".into()));
    }
    let paths = ctx.budget(c.paths);
    let cfg = SimConfig::new(l.sim.dt, tmax, ctx.seed_for("girsanov"), paths)?
        .with_scheme(l.sim.scheme)
        .with_dynamics(Dynamics::Reference);
    let reference = LazyEnsemble::new(&l.model, &l.drift, &l.x0, cfg.clone())?.materialize()?;
    let b = scaled_sup(&l.model, &l.drift);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for &t in &c.times {
        let m = weight_moments(&reference, t, b)?;
        warnings.extend(m.warnings.iter().map(|w| format!("t = {t}: {w}")));
        records.push(Record { quantity: "E[rho_t]".into(), t, estimate: m.mean, se: m.mean_se, bound: 1.0, pass: m.mean_pass });
        records.push(Record {
            quantity: "E[rho_t^2]".into(),
            t,
            estimate: m.second,
            se: m.second_se,
            bound: m.second_bound,
            pass: m.second_pass,
        });
    }
    if !l.drift.bounded.is_zero() {
        // Reweighted reference paths against directly simulated drifted paths.
        let f = test_fn("checks.resolvent.f", &l.config.checks.resolvent.f, ctx.dim())?;
        let dcfg = SimConfig::new(l.sim.dt, tmax, ctx.seed_for("girsanov-drifted"), paths)?.with_scheme(l.sim.scheme);
        let drifted = LazyEnsemble::new(&l.model, &l.drift, &l.x0, dcfg)?.materialize()?;
        for &t in &c.times {
            let q = q_kernel(&reference, &f, t)?;
            let p = p_kernel(&drifted, &f, t)?;
            warnings.extend(q.warnings.iter().map(|w| format!("Q_t at t = {t}: {w}")));
            let se = (q.std_error.powi(2) + p.std_error.powi(2)).sqrt();
            records.push(Record {
                quantity: format!("Q_t {f} - P_t {f}"),
                t,
                estimate: q.value - p.value,
                se,
                bound: 0.0,
                pass: (q.value - p.value).abs() <= 3.0 * se,
            });
        }
    }
    let pass = records.iter().all(|r| r.pass);
    Check::new("girsanov", pass, json!({ "b_sup_scaled": b, "paths": paths, "records": records, "warnings": warnings, "pass": pass }))
}

pub fn resolvent(ctx: &Ctx) -> Result<Check> {
    let c = &ctx.loaded.config.checks.resolvent;
    let l = ctx.loaded;
    let f = test_fn("checks.resolvent.f", &c.f, ctx.dim())?;
    let alpha = c.alpha.unwrap_or_else(|| ctx.default_alpha());
    let points = ctx.points("resolvent-points", c.points);
    let r = verify_identity(&l.model, &l.drift, &f, alpha, c.depth, &points, ctx.budget(c.budget), l.sim.dt, ctx.seed_for("resolvent"))?;
    Check::new("resolvent", r.pass, &r)
}

pub fn lipschitz(ctx: &Ctx) -> Result<Check> {
    let c = &ctx.loaded.config.checks.lipschitz;
    let l = ctx.loaded;
    let f = test_fn("checks.lipschitz.f", &c.f, ctx.dim())?;
    let alpha = c.alpha.unwrap_or_else(|| ctx.default_alpha());
    let xs = ctx.points("lipschitz-x", c.pairs);
    let dirs = ctx.points("lipschitz-dir", c.pairs);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = xs
        .into_iter()
        .zip(dirs)
        .map(|(x, d)| {
            let d: Vec<f64> = d.iter().zip(&l.x0).map(|(a, b)| a - b).collect();
            let n = sdelab_core::stats::norm(&d).max(1e-12);
            let y = x.iter().zip(&d).map(|(x, d)| x + c.separation * d / n).collect();
            (x, y)
        })
        .collect();
    let r = lipschitz_probe(&l.model, &l.drift, &f, alpha, &pairs, ctx.budget(c.budget), l.sim.dt, ctx.seed_for("lipschitz"))?;
    Check::new("lipschitz", r.pass, &r)
}

pub fn martingale(ctx: &Ctx, trace: bool) -> Result<Check> {
    let c = &ctx.loaded.config.checks.martingale;
    let l = ctx.loaded;
    let cfg = SimConfig::new(c.dt, c.horizon, ctx.seed_for("martingale"), ctx.budget(c.paths))?
        .with_scheme(l.sim.scheme)
        .with_dynamics(Dynamics::Reference);
    let ens = LazyEnsemble::new(&l.model, &l.drift, &l.x0, cfg)?.materialize()?;
    let mut beta = Vec::new();
    let mut m = Vec::new();
    for k in 0..ctx.dim() {
        beta.push(beta_process(&ens, &l.model, k)?);
        if c.m_process {
            m.push(m_process(&ens, &l.model, k)?);
        }
    }
    let pass = beta.iter().chain(&m).all(|r| r.pass);
    let mut check = Check::new("martingale", pass, json!({ "beta": beta, "m": m, "pass": pass }))?;
    if trace {
        let mut names = vec!["t".to_string()];
        let mut cols: Vec<&[f64]> = vec![&beta[0].times];
        for r in &beta {
            names.push(format!("beta{}_mean", r.k + 1));
            names.push(format!("beta{}_var", r.k + 1));
            cols.push(&r.means);
            cols.push(&r.variances);
        }
        let names: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        check = check.with_file("martingale_trace.csv", columns_csv(&names, &cols));
    }
    Ok(check)
}

pub fn gronwall(ctx: &Ctx) -> Result<Check> {
    let c = &ctx.loaded.config.checks.gronwall;
    let l = ctx.loaded;
    let xs = ctx.points("gronwall-x", c.pairs);
    let ys = ctx.points("gronwall-y", c.pairs);
    let pairs: Vec<_> = xs.into_iter().zip(ys).collect();
    let cfg = SimConfig::new(c.dt, c.horizon, ctx.seed_for("gronwall"), c.pairs)?.with_scheme(l.sim.scheme);
    let r = gronwall_check(&l.model, &l.drift.without_bounded(), &pairs, &cfg)?;
    Check::new("gronwall", r.pass, &r)
}

pub fn harnack(ctx: &Ctx) -> Result<Check> {
    let c = &ctx.loaded.config.checks.harnack;
    let l = ctx.loaded;
    let f = test_fn("checks.harnack.f", &c.f, ctx.dim())?;
    let budget = ctx.budget(c.budget);
    let ou = l.drift.potential == Potential::Zero && l.drift.bounded.is_zero();
    let mut rows = Vec::new();
    let mut exact = Vec::new();
    for (it, &t) in c.times.iter().enumerate() {
        for (iq, &q) in c.qs.iter().enumerate() {
            for (is, &s) in c.separations.iter().enumerate() {
                let x = l.x0.clone();
                let mut y = x.clone();
                y[0] += s;
                let seed = sub_seed(ctx.seed_for("harnack"), &format!("{it}/{iq}/{is}"));
                rows.push(harnack_check(&l.model, &l.drift, &f, &x, &y, t, q, c.p_factor, budget, l.sim.dt, seed)?);
                if let (true, TestFn::Gauss { k, center, gamma }) = (ou, &f) {
                    exact.push(harnack_ou_exact(&l.model, *k, *center, *gamma, &x, &y, t, q, c.p_factor));
                }
            }
        }
    }
    let pass = rows.iter().chain(&exact).all(|r| r.pass);
    Check::new("harnack", pass, json!({ "panel": rows, "ou_exact": exact, "pass": pass }))
}

pub fn ito(ctx: &Ctx) -> Result<Check> {
    let c = &ctx.loaded.config.checks.ito;
    let l = ctx.loaded;
    let g = test_fn("checks.ito.g", &c.g, ctx.dim())?;
    let r = ito_resolvent_check(&l.model, &l.drift.potential, &g, c.alpha, &l.x0, c.t, ctx.budget(c.budget), l.sim.dt, ctx.seed_for("ito"))?;
    Check::new("ito", r.pass, &r)
}

pub fn invariance(ctx: &Ctx) -> Result<Check> {
    let c = &ctx.loaded.config.checks.invariance;
    let l = ctx.loaded;
    let phis: Vec<TestFn> = c
        .function_ids(ctx.dim())
        .iter()
        .enumerate()
        .map(|(i, s)| test_fn(&format!("checks.invariance.functions[{i}]"), s, ctx.dim()))
        .collect::<Result<_>>()?;
    let min_h = 3000.0 * c.dt * c.thin.max(1) as f64 / (1.0 - c.burn_in).max(0.05);
    let horizon = (c.horizon * ctx.scale).max(min_h);
    let free = l.drift.without_bounded();
    let sample = long_run(&l.model, &free, &l.x0, c.dt, horizon, ctx.seed_for("invariance"), c.burn_in, c.thin)?;
    let r = invariance_check(&l.model, &l.drift.potential, &phis, &sample);
    let gibbs = if ctx.dim() == 1 {
        phis.iter().map(|p| gibbs_check(&l.model, &l.drift.potential, p, &sample)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let pass = r.pass && gibbs.iter().all(|g| g.pass);
    Check::new("invariance", pass, json!({ "horizon": horizon, "generator": r, "gibbs": gibbs, "pass": pass }))
}

pub fn counterexample(ctx: &Ctx) -> Result<Check> {
    let c = &ctx.loaded.config.checks.counterexample;
    let r = counterexample_punctured_line(&c.steps, c.half_width, c.alpha)?;
    let hs: Vec<f64> = r.rows.iter().map(|x| x.h).collect();
    let pot: Vec<f64> = r.rows.iter().map(|x| x.potential_at_one).collect();
    let bal: Vec<f64> = r.rows.iter().map(|x| x.balayage_at_one).collect();
    let csv = columns_csv(&["h", "potential_at_one", "balayage_at_one"], &[&hs, &pot, &bal]);
    let pass = r.zero_potential && !r.polar;
    Ok(Check::new("counterexample", pass, &r)?.with_file("counterexample.csv", csv))
}

pub fn simulate(ctx: &Ctx, cfg: &SimConfig) -> Result<(Check, String)> {
    let l = ctx.loaded;
    let ens = simulate_ensemble(&l.model, &l.drift, &l.x0, cfg)?;
    let mut csv = String::new();
    for (i, p) in ens.paths.iter().enumerate() {
        let cfg_json = serde_json::to_string(cfg).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let header = [("config_hash", ctx.config_hash.clone()), ("config", cfg_json), ("path", i.to_string())];
        csv.push_str(&trajectory_csv(p, &header));
    }
    let terminal: Vec<MeanSe> = (0..ctx.dim())
        .map(|k| MeanSe::of(&ens.paths.iter().filter(|p| p.valid).map(|p| p.last_state()[k]).collect::<Vec<_>>()))
        .collect();
    let invalid = ens.invalid_count();
    let report = json!({
        "paths": ens.paths.len(),
        "invalid": invalid,
        "terminal_mean": terminal.iter().map(|m| m.mean).collect::<Vec<_>>(),
        "terminal_se": terminal.iter().map(|m| m.se).collect::<Vec<_>>(),
        "warnings": cfg.warnings(&l.drift),
    });
    Ok((Check::new("simulate", invalid == 0, report)?, csv))
}

fn chain_resolvent(ctx: &Ctx, p: &PotentialCheck) -> Result<DiscreteResolvent> {
    let spec = ctx
        .loaded
        .config
        .chain
        .as_ref()
        .ok_or_else(|| Error::Config("potential commands need a [chain] section".into()))?;
    spec.build(&[p.alpha])
}

fn target(res: &DiscreteResolvent, idx: &[usize], key: &str) -> Result<Vec<bool>> {
    let mut a = vec![false; res.len()];
    for &i in idx {
        *a.get_mut(i).ok_or_else(|| Error::Config(format!("{key}: state {i} out of range")))? = true;
    }
    Ok(a)
}

fn u_of(res: &DiscreteResolvent, p: &PotentialCheck) -> Result<Vec<f64>> {
    let n = res.len();
    let check = |v: &Vec<f64>, key: &str| -> Result<()> {
        if v.len() != n {
            return Err(Error::Config(format!("checks.potential.{key} has {} entries, chain has {n}", v.len())));
        }
        Ok(())
    };
    if let Some(f) = &p.u_potential_of {
        check(f, "u_potential_of")?;
        return res.apply(p.alpha, f);
    }
    if let Some(u) = &p.u {
        check(u, "u")?;
        return Ok(u.clone());
    }
    Ok(vec![1.0; n])
}

pub fn reduce(ctx: &Ctx, p: &PotentialCheck) -> Result<Check> {
    let res = chain_resolvent(ctx, p)?;
    let a = target(&res, &p.set, "checks.potential.set")?;
    let u = u_of(&res, p)?;
    let r = reduced_function(&res, &a, &u, p.alpha)?;
    let csv = columns_csv(&["point", "u", "fixed_point", "linear"], &[&res.points, &u, &r.fixed_point, &r.linear]);
    let pass = r.agreement <= ROUTE_TOL;
    Ok(Check::new("potential_reduce", pass, json!({ "alpha": p.alpha, "set": p.set, "report": r, "pass": pass }))?
        .with_file("potential_reduce.csv", csv)
        .with_file("potential_kernel.csv", matrix_csv(&res.kernel(p.alpha)?)))
}

pub fn polar(ctx: &Ctx, p: &PotentialCheck) -> Result<Check> {
    let res = chain_resolvent(ctx, p)?;
    let a = target(&res, &p.set, "checks.potential.set")?;
    let r = polar_test(&res, &a, p.alpha)?;
    Check::new("potential_polar", true, json!({ "alpha": p.alpha, "set": p.set, "report": r, "pass": true }))
}

pub fn hunt(ctx: &Ctx, p: &PotentialCheck) -> Result<Check> {
    let res = chain_resolvent(ctx, p)?;
    let a = target(&res, &p.set, "checks.potential.set")?;
    let u = u_of(&res, p)?;
    let r = hunt_crosscheck(&res, &a, &u, p.alpha, ctx.budget(p.budget), ctx.seed_for("hunt"))?;
    Check::new("potential_hunt", r.pass, json!({ "set": p.set, "report": r, "pass": r.pass }))
}

pub fn raycone(ctx: &Ctx, p: &PotentialCheck) -> Result<Check> {
    let res = chain_resolvent(ctx, p)?;
    let seeds = match &p.ray_seeds {
        Some(s) => s.clone(),
        None => {
            let lo = res.points.iter().copied().fold(f64::INFINITY, f64::min);
            vec![res.points.iter().map(|x| x - lo + 1.0).collect()]
        }
    };
    let r = ray_cone_build(&res, &seeds, p.ray_beta, p.ray_depth, p.ray_epsilon, &p.ray_alphas)?;
    let mut csv = String::new();
    for row in &r.members {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    Ok(Check::new("potential_raycone", r.pass, &r)?.with_file("potential_raycone.csv", csv))
}

pub fn extension(ctx: &Ctx, p: &PotentialCheck) -> Result<Check> {
    let res = chain_resolvent(ctx, p)?;
    let outside = target(&res, &p.outside, "checks.potential.outside")?;
    let m: Vec<bool> = outside.iter().map(|b| !b).collect();
    let lo = res.points.iter().copied().fold(f64::INFINITY, f64::min);
    let cone = vec![vec![1.0; res.len()], res.points.iter().map(|x| x - lo + 1.0).collect()];
    let r = extension_check(&res, &m, &p.extension_alphas, &cone)?;
    Check::new("potential_extension", r.pass, json!({ "outside": p.outside, "report": r, "pass": r.pass }))
}
