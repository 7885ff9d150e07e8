//! Finite-state potential theory: sub-Markov resolvents, excessive
//! functions, reduced functions and balayage, polar sets, Monte Carlo
//! hitting, Ray cones, extension conditions and the punctured-line example.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{NoiseStream, Purpose};
use crate::stats::MeanSe;

/// Sub-Markov resolvent family on a finite state space.
pub struct DiscreteResolvent {
    /// Coordinates (or labels) of the states.
    pub points: Vec<f64>,
    pub generator: Option<DMatrix<f64>>,
    pub alphas: Vec<f64>,
    cache: Mutex<Vec<(f64, DMatrix<f64>)>>,
}

impl std::fmt::Debug for DiscreteResolvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscreteResolvent").field("states", &self.len()).field("alphas", &self.alphas).finish()
    }
}

const RESOLVENT_TOL: f64 = 1e-10;

fn resolvent_from(l: &DMatrix<f64>, alpha: f64) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    let m = DMatrix::<f64>::identity(n, n) * alpha - l;
    m.lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("alpha I - L at alpha = {alpha}")))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

impl DiscreteResolvent {
    /// `U_alpha = (alpha I - L)^{-1}` for every `alpha` in the list; the
    /// resolvent equation and sub-Markov property are checked.
    pub fn from_generator(l: DMatrix<f64>, alphas: &[f64], points: Option<Vec<f64>>) -> Result<Self> {
        let n = l.nrows();
        if n == 0 || l.ncols() != n {
            return Err(Error::InvalidInput("generator must be a non-empty square matrix".into()));
        }
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let v = l[(i, j)];
                if !v.is_finite() || (i != j && v < 0.0) {
                    return Err(Error::InvalidInput(format!("bad rate L[{i}][{j}] = {v}")));
                }
                row += v;
            }
            let scale = l[(i, i)].abs().max(1.0);
            if row > 1e-12 * scale {
                return Err(Error::InvalidInput(format!("row {i} of the generator sums to {row} > 0")));
            }
        }
        if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::InvalidInput("need a non-empty list of positive alphas".into()));
        }
        let mut cache = Vec::with_capacity(alphas.len());
        for &a in alphas {
            cache.push((a, resolvent_from(&l, a)?));
        }
        let res = Self {
            points: points.unwrap_or_else(|| (0..n).map(|i| i as f64).collect()),
            generator: Some(l),
            alphas: alphas.to_vec(),
            cache: Mutex::new(cache),
        };
        res.validate()?;
        Ok(res)
    }

    /// Family given by kernels only; further kernels follow from the
    /// resolvent equation.
    pub fn from_kernels(kernels: Vec<(f64, DMatrix<f64>)>, points: Option<Vec<f64>>) -> Result<Self> {
        let n = kernels.first().map(|k| k.1.nrows()).ok_or_else(|| Error::InvalidInput("no kernels".into()))?;
        let res = Self {
            points: points.unwrap_or_else(|| (0..n).map(|i| i as f64).collect()),
            generator: None,
            alphas: kernels.iter().map(|k| k.0).collect(),
            cache: Mutex::new(kernels),
        };
        res.validate()?;
        Ok(res)
    }

    fn validate(&self) -> Result<()> {
        let cache = self.cache.lock().expect("kernel cache");
        for (a, u) in cache.iter() {
            if u.iter().any(|v| *v < -1e-12) {
                return Err(Error::InvalidInput(format!("U_{a} has negative entries")));
            }
            for i in 0..u.nrows() {
                let s: f64 = a * u.row(i).sum();
                if s > 1.0 + 1e-10 {
                    return Err(Error::InvalidInput(format!("alpha U_alpha 1 = {s} > 1 at state {i} (alpha {a})")));
                }
            }
        }
        for w in cache.windows(2) {
            let (a, ua) = (&w[0].0, &w[0].1);
            let (b, ub) = (&w[1].0, &w[1].1);
            let e = ua - ub + (ua * ub) * (a - b);
            let scale = 1.0f64.max(max_abs(ua)).max(max_abs(ub));
            if max_abs(&e) > RESOLVENT_TOL * scale {
                return Err(Error::InvalidInput(format!(
                    "resolvent equation fails between alpha = {a} and {b}: {:.3e}",
                    max_abs(&e)
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `U_alpha`, computed on demand and cached.
    pub fn kernel(&self, alpha: f64) -> Result<DMatrix<f64>> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput("alpha must be positive".into()));
        }
        let mut cache = self.cache.lock().expect("kernel cache");
        if let Some((_, u)) = cache.iter().find(|(a, _)| *a == alpha) {
            return Ok(u.clone());
        }
        let u = match &self.generator {
            Some(l) => resolvent_from(l, alpha)?,
            None => {
                let (a0, u0) = cache[0].clone();
                let n = u0.nrows();
                let m = DMatrix::<f64>::identity(n, n) + &u0 * (alpha - a0);
                let inv = m.lu().try_inverse().ok_or_else(|| Error::Singular(format!("I + (g - a) U_a at {alpha}")))?;
                &u0 * inv
            }
        };
        if cache.len() < 64 {
            cache.push((alpha, u.clone()));
        }
        Ok(u)
    }

    /// Generator, recovered as `alpha - U_alpha^{-1}` if not given.
    pub fn generator(&self) -> Result<DMatrix<f64>> {
        if let Some(l) = &self.generator {
            return Ok(l.clone());
        }
        let a = self.alphas[0];
        let u = self.kernel(a)?;
        let inv = u.lu().try_inverse().ok_or_else(|| Error::Singular("U_alpha".into()))?;
        let n = inv.nrows();
        Ok(DMatrix::<f64>::identity(n, n) * a - inv)
    }

    pub fn apply(&self, alpha: f64, f: &[f64]) -> Result<Vec<f64>> {
        let u = self.kernel(alpha)?;
        Ok((&u * DVector::from_column_slice(f)).iter().copied().collect())
    }
}

/// `L = 0` style helpers for building chains.
pub mod chains {
    use nalgebra::DMatrix;

    /// Birth–death chain on `0..n` with constant rates and optional killing
    /// rate at every state.
    pub fn birth_death(n: usize, birth: f64, death: f64, killing: f64) -> DMatrix<f64> {
        let mut l = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let mut out = killing;
            if i + 1 < n {
                l[(i, i + 1)] = birth;
                out += birth;
            }
            if i > 0 {
                l[(i, i - 1)] = death;
                out += death;
            }
            l[(i, i)] = -out;
        }
        l
    }

    /// Grid `{-N h, ..., N h}` for Brownian motion (`v'' / 2`) with killing
    /// through both ends. Returns `(points, generator)`.
    pub fn brownian_grid(h: f64, half_width: f64) -> (Vec<f64>, DMatrix<f64>) {
        let m = (half_width / h).round() as i64;
        let points: Vec<f64> = (-m..=m).map(|i| i as f64 * h).collect();
        let n = points.len();
        let r = 1.0 / (2.0 * h * h);
        let mut l = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            if i + 1 < n {
                l[(i, i + 1)] = r;
            }
            if i > 0 {
                l[(i, i - 1)] = r;
            }
            l[(i, i)] = -2.0 * r;
        }
        (points, l)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExcessiveReport {
    pub values: Vec<f64>,
    pub alphas: Vec<f64>,
    pub supermedian: bool,
    /// States where `alpha U_{alpha+beta} w > w` for some listed alpha.
    pub supermedian_violations: Vec<usize>,
    pub excessive: bool,
    /// Extrapolated `sup_alpha alpha U_{alpha+beta} w`.
    pub regularization: Vec<f64>,
    /// Largest entry of the list, before extrapolation.
    pub finite_sup: Vec<f64>,
    /// Change between the last two listed alphas.
    pub saturation_gap: f64,
}

pub const EXCESSIVE_TOL: f64 = 1e-8;

/// Alpha list `{2^0, ..., 2^20} beta` (`beta = 0` uses the bare powers).
pub fn geometric_alphas(beta: f64) -> Vec<f64> {
    let b = if beta > 0.0 { beta } else { 1.0 };
    (0..=20).map(|j| b * 2f64.powi(j)).collect()
}

/// Supermedian and excessive flags for `w` with respect to `U_beta`. The
/// regularization is the sup over the listed alphas, Richardson-extrapolated
/// from the last two (the gap decays like `1/alpha`).
pub fn is_excessive(res: &DiscreteResolvent, w: &[f64], beta: f64) -> Result<ExcessiveReport> {
    if w.len() != res.len() || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput("w must be finite, non-negative and match the state space".into()));
    }
    let alphas = geometric_alphas(beta);
    let scale = w.iter().fold(1.0f64, |a, v| a.max(*v));
    let mut viol = vec![false; w.len()];
    let mut sup = vec![0.0f64; w.len()];
    let mut last = Vec::new();
    for &a in &alphas {
        let v: Vec<f64> = res.apply(a + beta, w)?.into_iter().map(|x| a * x).collect();
        for i in 0..w.len() {
            if v[i] > w[i] + 1e-12 * scale {
                viol[i] = true;
            }
            sup[i] = sup[i].max(v[i]);
        }
        last.push(v);
    }
    let n = last.len();
    let (p, q) = (&last[n - 2], &last[n - 1]);
    let regularization: Vec<f64> = (0..w.len()).map(|i| (2.0 * q[i] - p[i]).max(sup[i])).collect();
    let saturation_gap = (0..w.len()).map(|i| (q[i] - p[i]).abs()).fold(0.0, f64::max);
    let supermedian = !viol.iter().any(|b| *b);
    let excessive =
        supermedian && (0..w.len()).all(|i| (regularization[i] - w[i]).abs() <= EXCESSIVE_TOL * (1.0 + w[i]));
    Ok(ExcessiveReport {
        values: w.to_vec(),
        alphas,
        supermedian,
        supermedian_violations: viol.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect(),
        excessive,
        regularization,
        finite_sup: sup,
        saturation_gap,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ReducedReport {
    /// Route (a): optimal-stopping value iteration.
    pub fixed_point: Vec<f64>,
    pub iterations: usize,
    /// Route (b): Dirichlet solve, `E[e^{-alpha T_A} u(X_{T_A})]`.
    pub linear: Vec<f64>,
    /// Balayage `B^A_alpha u`; equals the reduced function on a finite chain.
    pub balayage: Vec<f64>,
    pub agreement: f64,
    pub warnings: Vec<String>,
}

pub const ROUTE_TOL: f64 = 1e-8;
const SNELL_TOL: f64 = 1e-14;
const SNELL_BUDGET: usize = 200_000_000;

fn sparse_rows(l: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..l.nrows())
        .map(|i| (0..l.ncols()).filter(|&j| j != i && l[(i, j)] != 0.0).map(|j| (j, l[(i, j)])).collect())
        .collect()
}

/// `E[e^{-alpha T_A} u(X_{T_A})]` by solving `v = u` on `A`,
/// `(alpha - L) v = 0` off `A`.
pub fn hitting_solve(l: &DMatrix<f64>, a: &[bool], u: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let n = l.nrows();
    let off: Vec<usize> = (0..n).filter(|&i| !a[i]).collect();
    let mut v: Vec<f64> = (0..n).map(|i| if a[i] { u[i] } else { 0.0 }).collect();
    if off.is_empty() || off.len() == n {
        return Ok(v);
    }
    let m = off.len();
    let mut mat = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for (r, &i) in off.iter().enumerate() {
        for (c, &j) in off.iter().enumerate() {
            mat[(r, c)] = if i == j { alpha } else { 0.0 } - l[(i, j)];
        }
        rhs[r] = (0..n).filter(|&j| a[j]).map(|j| l[(i, j)] * u[j]).sum();
    }
    let sol = mat.lu().solve(&rhs).ok_or_else(|| Error::Singular("Dirichlet system".into()))?;
    for (r, &i) in off.iter().enumerate() {
        v[i] = sol[r];
    }
    Ok(v)
}

/// Smallest `alpha`-excessive majorant of `1_A u`: Gauss–Seidel value
/// iteration of `v(x) <- max(1_A u(x), sum_y L(x,y) v(y) / (alpha + q(x)))`
/// on the embedded jump chain, started from `sup u`.
pub fn snell_iteration(l: &DMatrix<f64>, a: &[bool], u: &[f64], alpha: f64) -> Result<(Vec<f64>, usize)> {
    let n = l.nrows();
    let rows = sparse_rows(l);
    let reward: Vec<f64> = (0..n).map(|i| if a[i] { u[i] } else { 0.0 }).collect();
    let top = u.iter().fold(0.0f64, |m, v| m.max(*v));
    let mut v = vec![top; n];
    let stop = SNELL_TOL * top.max(1e-300);
    let max_iter = (SNELL_BUDGET / n.max(1)).max(1000);
    let mut delta = f64::INFINITY;
    for it in 1..=max_iter {
        delta = 0.0;
        for i in 0..n {
            let mut acc = 0.0;
            for &(j, r) in &rows[i] {
                acc += r * v[j];
            }
            let next = (acc / (alpha - l[(i, i)])).max(reward[i]);
            delta = delta.max((next - v[i]).abs());
            v[i] = next;
        }
        if delta <= stop {
            return Ok((v, it));
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: delta })
}

/// Reduced function `R^A_alpha u` and balayage by two routes.
pub fn reduced_function(res: &DiscreteResolvent, a: &[bool], u: &[f64], alpha: f64) -> Result<ReducedReport> {
    let n = res.len();
    if a.len() != n || u.len() != n || u.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidInput("u must be finite, non-negative and A must match the state space".into()));
    }
    let l = res.generator()?;
    let linear = hitting_solve(&l, a, u, alpha)?;
    let (fixed_point, iterations) = snell_iteration(&l, a, u, alpha)?;
    let agreement = linear.iter().zip(&fixed_point).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut warnings = Vec::new();
    if agreement > ROUTE_TOL {
        let exc = is_excessive(res, u, alpha)?;
        if !exc.supermedian {
            warnings.push("u is not alpha-excessive; the reduced function exceeds the hitting balayage".into());
        }
    }
    Ok(ReducedReport { balayage: linear.clone(), fixed_point, iterations, linear, agreement, warnings })
}

#[derive(Clone, Debug, Serialize)]
pub struct PolarReport {
    pub polar: bool,
    pub max_balayage: f64,
    pub witness: Vec<f64>,
}

/// `A` is polar iff `max B^A_alpha 1 <= 1e-10`.
pub fn polar_test(res: &DiscreteResolvent, a: &[bool], alpha: f64) -> Result<PolarReport> {
    let l = res.generator()?;
    let ones = vec![1.0; res.len()];
    let b = hitting_solve(&l, a, &ones, alpha)?;
    let m = b.iter().fold(0.0f64, |x, v| x.max(*v));
    Ok(PolarReport { polar: m <= 1e-10, max_balayage: m, witness: b })
}

#[derive(Clone, Debug, Serialize)]
pub struct HuntRow {
    pub state: usize,
    pub exact: f64,
    pub estimate: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct HuntReport {
    pub alpha: f64,
    pub budget: usize,
    pub time_guard: f64,
    pub rows: Vec<HuntRow>,
    pub pass: bool,
}

/// Relative bias allowed from stopping paths at the time guard.
pub const HUNT_BIAS: f64 = 1e-12;

/// Monte Carlo `E^x[e^{-alpha T_A} u(X_{T_A})]` by jump-chain simulation
/// against the linear-algebra balayage at every state. Killed paths and
/// paths beyond the time guard contribute 0, a bias below
/// `HUNT_BIAS |u|_inf`. Standard errors are floored at `|u|_inf / budget`
/// so that states never reached in the sample are not judged on a zero
/// error bar.
pub fn hunt_crosscheck(
    res: &DiscreteResolvent,
    a: &[bool],
    u: &[f64],
    alpha: f64,
    budget: usize,
    seed: u64,
) -> Result<HuntReport> {
    let l = res.generator.as_ref().ok_or_else(|| Error::InvalidInput("Hunt check needs a generator".into()))?;
    let n = res.len();
    let exact = hitting_solve(l, a, u, alpha)?;
    let rows_sparse = sparse_rows(l);
    let usup = u.iter().fold(0.0f64, |m, v| m.max(*v)).max(1e-300);
    let guard = (HUNT_BIAS.recip().ln() / alpha).max(0.0);
    let se_floor = usup / budget.max(1) as f64;
    let rows: Vec<HuntRow> = (0..n)
        .into_par_iter()
        .map(|x| {
            if a[x] {
                return HuntRow { state: x, exact: exact[x], estimate: u[x], se: 0.0, pass: exact[x] == u[x] };
            }
            let vals: Vec<f64> = (0..budget)
                .map(|i| {
                    let mut rng = NoiseStream::new(seed, (x * budget + i) as u64, Purpose::Chain);
                    let mut s = x;
                    let mut t = 0.0;
                    loop {
                        let q = -l[(s, s)];
                        if q <= 0.0 {
                            return 0.0;
                        }
                        t += rng.exponential(q);
                        if t > guard {
                            return 0.0;
                        }
                        let mut pick = rng.uniform() * q;
                        let mut next = None;
                        for &(j, r) in &rows_sparse[s] {
                            if pick < r {
                                next = Some(j);
                                break;
                            }
                            pick -= r;
                        }
                        match next {
                            None => return 0.0,
                            Some(j) => {
                                s = j;
                                if a[s] {
                                    return (-alpha * t).exp() * u[s];
                                }
                            }
                        }
                    }
                })
                .collect();
            let m = MeanSe::of(&vals);
            let se = m.se.max(se_floor);
            HuntRow { state: x, exact: exact[x], estimate: m.mean, se, pass: (m.mean - exact[x]).abs() <= 3.0 * se }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    Ok(HuntReport { alpha, budget, time_guard: guard, rows, pass })
}

#[derive(Clone, Debug, Serialize)]
pub struct RayConeReport {
    pub beta: f64,
    pub depth: usize,
    pub epsilon: f64,
    pub alphas: Vec<f64>,
    pub stage_sizes: Vec<usize>,
    /// Members as sup-normalized directions (the cone is closed under
    /// positive scaling).
    #[serde(skip)]
    pub members: Vec<Vec<f64>>,
    pub min_closure: bool,
    pub invariance: bool,
    pub separates: bool,
    pub all_supermedian: bool,
    pub pass: bool,
}

pub const RAY_SCALINGS: [f64; 3] = [0.5, 1.0, 2.0];
pub const RAY_MEMBER_CAP: usize = 200_000;

struct Net {
    eps: f64,
    members: Vec<Vec<f64>>,
    cells: HashMap<Vec<i64>, usize>,
}

impl Net {
    fn new(eps: f64) -> Self {
        Self { eps, members: Vec::new(), cells: HashMap::new() }
    }

    fn key(&self, v: &[f64]) -> Vec<i64> {
        v.iter().map(|x| (x / self.eps).floor() as i64).collect()
    }

    /// Insert the normalized direction of `v` unless a member shares its
    /// `eps`-cell.
    fn insert(&mut self, v: Vec<f64>) -> Result<()> {
        let s = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if !(s > 1e-300) {
            return Ok(());
        }
        let d: Vec<f64> = v.iter().map(|x| (x / s).max(0.0)).collect();
        let k = self.key(&d);
        if self.cells.contains_key(&k) {
            return Ok(());
        }
        if self.members.len() >= RAY_MEMBER_CAP {
            return Err(Error::Infeasible { required: self.members.len() as u64 + 1, cap: RAY_MEMBER_CAP as u64 });
        }
        self.cells.insert(k, self.members.len());
        self.members.push(d);
        Ok(())
    }

    fn near(&self, v: &[f64]) -> bool {
        let s = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if s <= 1e-300 {
            return true;
        }
        let d: Vec<f64> = v.iter().map(|x| x / s).collect();
        if let Some(&i) = self.cells.get(&self.key(&d)) {
            return sup_dist(&self.members[i], &d) <= self.eps;
        }
        self.members.iter().any(|m| sup_dist(m, &d) <= self.eps)
    }
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Inductive Ray-cone construction pruned to `eps`-nets: `R_0 = U_beta(A_0)`
/// plus constants; each stage adds `min(u, q v)`, `u + q v`,
/// `U_{beta+alpha} u` and `U_beta((u - q v)^+)` over the current members.
pub fn ray_cone_build(
    res: &DiscreteResolvent,
    seeds: &[Vec<f64>],
    beta: f64,
    depth: usize,
    eps: f64,
    alphas: &[f64],
) -> Result<RayConeReport> {
    let n = res.len();
    if seeds.iter().any(|s| s.len() != n || s.iter().any(|v| !(v.is_finite() && *v >= 0.0))) {
        return Err(Error::InvalidInput("seed functions must be non-negative and match the state space".into()));
    }
    if !separates(seeds, n) {
        return Err(Error::InvalidInput("seed functions do not separate the states".into()));
    }
    if !(beta > 0.0 && eps > 0.0) {
        return Err(Error::InvalidInput("need beta > 0 and eps > 0".into()));
    }
    let ub = res.kernel(beta)?;
    let shifted: Vec<DMatrix<f64>> = alphas.iter().map(|a| res.kernel(beta + a)).collect::<Result<_>>()?;
    let apply = |m: &DMatrix<f64>, v: &[f64]| -> Vec<f64> { (m * DVector::from_column_slice(v)).iter().copied().collect() };

    let mut net = Net::new(eps);
    net.insert(vec![1.0; n])?;
    for s in seeds {
        net.insert(apply(&ub, s))?;
    }
    let mut stages = vec![net.members.clone()];
    let mut sizes = vec![net.members.len()];
    for _ in 0..depth {
        let cur = stages.last().expect("stage").clone();
        for u in &cur {
            for m in &shifted {
                net.insert(apply(m, u))?;
            }
            for v in &cur {
                for &q in &RAY_SCALINGS {
                    net.insert(u.iter().zip(v).map(|(a, b)| a.min(q * b)).collect())?;
                    net.insert(u.iter().zip(v).map(|(a, b)| a + q * b).collect())?;
                    let pos: Vec<f64> = u.iter().zip(v).map(|(a, b)| (a - q * b).max(0.0)).collect();
                    net.insert(apply(&ub, &pos))?;
                }
            }
        }
        stages.push(net.members.clone());
        sizes.push(net.members.len());
    }
    let prev = &stages[stages.len().saturating_sub(2)];
    let min_closure = prev.par_iter().all(|u| prev.iter().all(|v| net.near(&u.iter().zip(v).map(|(a, b)| a.min(*b)).collect::<Vec<_>>())));
    let invariance = prev.par_iter().all(|u| shifted.iter().all(|m| net.near(&apply(m, u))));
    let members = net.members;
    let sep = separates(&members, n);
    let all_supermedian = members.par_iter().all(|u| {
        shifted.iter().zip(alphas).all(|(m, a)| apply(m, u).iter().zip(u).all(|(x, y)| a * x <= y + 1e-12))
    });
    let pass = min_closure && invariance && sep && all_supermedian;
    Ok(RayConeReport {
        beta,
        depth,
        epsilon: eps,
        alphas: alphas.to_vec(),
        stage_sizes: sizes,
        members,
        min_closure,
        invariance,
        separates: sep,
        all_supermedian,
        pass,
    })
}

fn separates(funcs: &[Vec<f64>], n: usize) -> bool {
    (0..n).all(|x| (x + 1..n).all(|y| funcs.iter().any(|f| (f[x] - f[y]).abs() > 1e-12)))
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtensionReport {
    pub alphas: Vec<f64>,
    /// `max U_alpha 1_{E \ M}`
    pub outside_potential: f64,
    pub condition_i: bool,
    pub restriction_error: f64,
    pub condition_ii: bool,
    /// Points of `E \ M` where `alpha U_alpha f` has not reached `f` at the
    /// largest alpha.
    pub limit_failures: Vec<usize>,
    pub limit_error: f64,
    pub pass: bool,
}

/// Conditions of a resolvent extension from `M` to `E`: (i) `E \ M` carries
/// no potential, (ii) the restriction to `M` is the resolvent of the chain
/// killed outside `M`, and the probe `alpha U_alpha f -> f` for `f` in
/// `cone`.
pub fn extension_check(
    res: &DiscreteResolvent,
    m: &[bool],
    alphas: &[f64],
    cone: &[Vec<f64>],
) -> Result<ExtensionReport> {
    let n = res.len();
    if m.len() != n || !m.iter().any(|b| *b) {
        return Err(Error::InvalidInput("M must be a non-empty subset of the states".into()));
    }
    let l = res.generator()?;
    let inside: Vec<usize> = (0..n).filter(|&i| m[i]).collect();
    let outside: Vec<f64> = (0..n).map(|i| if m[i] { 0.0 } else { 1.0 }).collect();
    let mut outside_potential = 0.0f64;
    let mut restriction_error = 0.0f64;
    let k = inside.len();
    let lmm = DMatrix::from_fn(k, k, |r, c| l[(inside[r], inside[c])]);
    for &a in alphas {
        let v = res.apply(a, &outside)?;
        outside_potential = outside_potential.max(v.iter().fold(0.0, |x, y| x.max(y.abs())));
        let ua = res.kernel(a)?;
        let um = resolvent_from(&lmm, a)?;
        for (r, &i) in inside.iter().enumerate() {
            for (c, &j) in inside.iter().enumerate() {
                restriction_error = restriction_error.max((ua[(i, j)] - um[(r, c)]).abs());
            }
        }
    }
    let amax = alphas.iter().copied().fold(0.0, f64::max);
    let mut limit_error = 0.0f64;
    let mut failures = Vec::new();
    if amax > 0.0 {
        let mut bad = vec![false; n];
        for f in cone {
            let v = res.apply(amax, f)?;
            for i in 0..n {
                let e = (amax * v[i] - f[i]).abs();
                if !m[i] {
                    limit_error = limit_error.max(e);
                    if e > 1e-3 * (1.0 + f[i].abs()) {
                        bad[i] = true;
                    }
                }
            }
        }
        failures = (0..n).filter(|&i| bad[i]).collect();
    }
    let condition_i = outside_potential <= 1e-12;
    let condition_ii = restriction_error <= 1e-10;
    Ok(ExtensionReport {
        alphas: alphas.to_vec(),
        outside_potential,
        condition_i,
        restriction_error,
        condition_ii,
        limit_failures: failures,
        limit_error,
        pass: condition_i && condition_ii,
    })
}

/// Chain `M` plus an artificial state `z` (the last index) with no in-rates
/// that jumps to `x0` at rate `k`.
pub fn with_artificial_state(l: &DMatrix<f64>, x0: usize, k: f64) -> DMatrix<f64> {
    let n = l.nrows();
    let mut out = DMatrix::<f64>::zeros(n + 1, n + 1);
    out.view_mut((0, 0), (n, n)).copy_from(l);
    out[(n, x0)] = k;
    out[(n, n)] = -k;
    out
}

pub const ARTIFICIAL_RATE: f64 = 1e13;

#[derive(Clone, Debug, Serialize)]
pub struct RefinementRow {
    pub h: f64,
    pub states: usize,
    /// `B^{0}_alpha 1` at `x = 1`
    pub balayage_at_one: f64,
    /// `U_alpha 1_{0}` at `x = 1`
    pub potential_at_one: f64,
    /// `B^{0}_alpha 1` at the neighbours of the origin
    pub balayage_near_origin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CounterexampleReport {
    pub alpha: f64,
    pub rows: Vec<RefinementRow>,
    pub oracle: f64,
    /// Ratio of successive potentials under halving of `h`.
    pub potential_ratios: Vec<f64>,
    /// Richardson limit of the potential as `h -> 0`.
    pub potential_limit: f64,
    pub zero_potential: bool,
    pub polar: bool,
    pub verdict: String,
}

pub const COUNTEREXAMPLE_VERDICT: &str = "extension condition (i) passes, polarity fails ⇒ no natural extension";

/// Brownian motion on grids over the line, looked at from `E = grid \ {0}`:
/// the origin carries vanishing potential under refinement but is hit with
/// probability bounded away from zero.
pub fn counterexample_punctured_line(steps: &[f64], half_width: f64, alpha: f64) -> Result<CounterexampleReport> {
    let mut rows = Vec::with_capacity(steps.len());
    for &h in steps {
        let (pts, l) = chains::brownian_grid(h, half_width);
        let zero = pts.iter().position(|p| p.abs() < 1e-12 * h).ok_or_else(|| Error::InvalidInput("grid has no 0".into()))?;
        let one = pts.iter().position(|p| (p - 1.0).abs() < 1e-9).ok_or_else(|| Error::InvalidInput(format!("h = {h} does not put a node at 1")))?;
        let a: Vec<bool> = (0..pts.len()).map(|i| i == zero).collect();
        let res = DiscreteResolvent::from_generator(l, &[alpha], Some(pts.clone()))?;
        let bal = polar_test(&res, &a, alpha)?;
        let ind: Vec<f64> = (0..pts.len()).map(|i| if i == zero { 1.0 } else { 0.0 }).collect();
        let pot = res.apply(alpha, &ind)?;
        rows.push(RefinementRow {
            h,
            states: pts.len(),
            balayage_at_one: bal.witness[one],
            potential_at_one: pot[one],
            balayage_near_origin: bal.witness[zero + 1].min(bal.witness[zero - 1]),
        });
    }
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[0].potential_at_one / w[1].potential_at_one).collect();
    let limit = match rows.len() {
        0 => f64::NAN,
        1 => rows[0].potential_at_one,
        k => {
            let (p, q) = (&rows[k - 2], &rows[k - 1]);
            let r = p.h / q.h;
            (r * q.potential_at_one - p.potential_at_one) / (r - 1.0)
        }
    };
    let finest = rows.last().ok_or_else(|| Error::InvalidInput("no grid steps".into()))?;
    let zero_potential = limit.abs() <= 0.05 * finest.potential_at_one.max(1e-300) + 1e-9
        && ratios.iter().all(|r| (r - 2.0).abs() < 0.2);
    let polar = finest.balayage_at_one <= 1e-10;
    let verdict = if zero_potential && !polar {
        COUNTEREXAMPLE_VERDICT.to_string()
    } else {
        format!("inconclusive: zero potential {zero_potential}, polar {polar}")
    };
    Ok(CounterexampleReport {
        alpha,
        oracle: (-(2.0 * alpha).sqrt()).exp(),
        rows,
        potential_ratios: ratios,
        potential_limit: limit,
        zero_potential,
        polar,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_generator_gives_scaled_identity() {
        let res = DiscreteResolvent::from_generator(DMatrix::zeros(3, 3), &[2.0], None).unwrap();
        let u = res.kernel(2.0).unwrap();
        assert!((u - DMatrix::<f64>::identity(3, 3) * 0.5).abs().max() < 1e-15);
    }

    #[test]
    fn two_state_closed_form() {
        let l = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let res = DiscreteResolvent::from_generator(l, &[1.0, 3.0], None).unwrap();
        // eigenvalues 0 and -2: U = P0 / a + P1 / (a + 2)
        for a in [1.0, 3.0, 0.7] {
            let u = res.kernel(a).unwrap();
            let same = 0.5 / a + 0.5 / (a + 2.0);
            let diff = 0.5 / a - 0.5 / (a + 2.0);
            assert!((u[(0, 0)] - same).abs() < 1e-14 && (u[(0, 1)] - diff).abs() < 1e-14);
        }
    }

    #[test]
    fn kernels_only_family_extends_by_resolvent_equation() {
        let l = chains::birth_death(5, 1.0, 2.0, 0.1);
        let full = DiscreteResolvent::from_generator(l.clone(), &[1.0], None).unwrap();
        let only = DiscreteResolvent::from_kernels(vec![(1.0, full.kernel(1.0).unwrap())], None).unwrap();
        assert!((only.kernel(2.5).unwrap() - full.kernel(2.5).unwrap()).abs().max() < 1e-12);
        assert!((only.generator().unwrap() - l).abs().max() < 1e-10);
    }

    #[test]
    fn rejects_bad_generator() {
        let l = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -1.0]);
        assert!(DiscreteResolvent::from_generator(l, &[1.0], None).is_err());
    }

    #[test]
    fn absorbing_walk_leaks_near_boundary() {
        let (_, l) = chains::brownian_grid(0.1, 5.0);
        let res = DiscreteResolvent::from_generator(l, &[1.0], None).unwrap();
        let r = res.apply(1.0, &vec![1.0; res.len()]).unwrap();
        assert!(r[0] < 0.9 && r[50] > 0.998, "{} {}", r[0], r[50]);
    }

    #[test]
    fn excessive_examples() {
        let l = chains::birth_death(6, 1.0, 1.0, 0.0);
        let res = DiscreteResolvent::from_generator(l, &[1.0], None).unwrap();
        assert!(is_excessive(&res, &[1.0; 6], 0.5).unwrap().excessive);
        let f = [0.0, 1.0, 0.0, 2.0, 0.5, 0.0];
        let w = res.apply(0.5, &f).unwrap();
        assert!(is_excessive(&res, &w, 0.5).unwrap().excessive);
        let mut ind = vec![0.0; 6];
        ind[2] = 1.0;
        let r = is_excessive(&res, &ind, 0.5).unwrap();
        assert!(!r.supermedian);
        assert!(r.finite_sup[2] < 1.0);
    }

    #[test]
    fn reduced_function_trivial_sets() {
        let l = chains::birth_death(8, 1.0, 0.5, 0.2);
        let res = DiscreteResolvent::from_generator(l, &[1.0], None).unwrap();
        let u = vec![1.0; 8];
        let all = reduced_function(&res, &[true; 8], &u, 1.0).unwrap();
        assert_eq!(all.linear, u);
        assert!(all.agreement < ROUTE_TOL);
        let none = reduced_function(&res, &[false; 8], &u, 1.0).unwrap();
        assert!(none.linear.iter().all(|v| *v == 0.0));
        assert!(none.fixed_point.iter().all(|v| v.abs() < ROUTE_TOL));
    }

    #[test]
    fn balayage_is_monotone_in_the_set() {
        let l = chains::birth_death(10, 1.0, 1.0, 0.3);
        let res = DiscreteResolvent::from_generator(l, &[1.0], None).unwrap();
        let mut a = vec![false; 10];
        a[9] = true;
        let mut b = a.clone();
        b[3] = true;
        let u = vec![1.0; 10];
        let ra = reduced_function(&res, &a, &u, 0.7).unwrap().balayage;
        let rb = reduced_function(&res, &b, &u, 0.7).unwrap().balayage;
        assert!(ra.iter().zip(&rb).all(|(x, y)| x <= &(y + 1e-15)));
    }

    #[test]
    fn polar_examples() {
        let mut l = chains::birth_death(4, 1.0, 1.0, 0.0);
        // isolate state 3: no rates in or out
        for i in 0..4 {
            l[(i, 3)] = 0.0;
            l[(3, i)] = 0.0;
        }
        l[(2, 2)] = -1.0;
        let res = DiscreteResolvent::from_generator(l, &[1.0], None).unwrap();
        assert!(polar_test(&res, &[false; 4], 1.0).unwrap().polar);
        assert!(polar_test(&res, &[false, false, false, true], 1.0).unwrap().max_balayage == 1.0);
        // the set is hit only from itself
        let r = polar_test(&res, &[false, false, false, true], 1.0).unwrap();
        assert!(r.witness[..3].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_state_ray_cone() {
        let l = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]);
        let res = DiscreteResolvent::from_generator(l, &[1.0], None).unwrap();
        let r = ray_cone_build(&res, &[vec![1.0, 0.0]], 1.0, 3, 1e-6, &[1.0, 2.0]).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn single_state_cone_is_constants() {
        let res = DiscreteResolvent::from_generator(DMatrix::from_element(1, 1, -0.5), &[1.0], None).unwrap();
        let r = ray_cone_build(&res, &[vec![1.0]], 1.0, 2, 1e-6, &[1.0]).unwrap();
        assert_eq!(r.members, vec![vec![1.0]]);
        assert!(r.pass);
    }

    #[test]
    fn non_separating_seed_is_rejected() {
        let l = chains::birth_death(3, 1.0, 1.0, 0.0);
        let res = DiscreteResolvent::from_generator(l, &[1.0], None).unwrap();
        assert!(ray_cone_build(&res, &[vec![1.0, 1.0, 0.0]], 1.0, 1, 1e-6, &[1.0]).is_err());
    }

    #[test]
    fn artificial_state_extension() {
        let l = chains::birth_death(5, 1.0, 1.0, 0.1);
        let ext = with_artificial_state(&l, 2, ARTIFICIAL_RATE);
        let res = DiscreteResolvent::from_generator(ext, &[1.0], None).unwrap();
        let mut m = vec![true; 6];
        m[5] = false;
        let f: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let r = extension_check(&res, &m, &[1.0, 10.0, 100.0], &[f]).unwrap();
        assert!(r.condition_i && r.condition_ii, "{r:?}");
        assert_eq!(r.limit_failures, vec![5]);
        let full = extension_check(&res, &[true; 6], &[1.0], &[]).unwrap();
        assert!(full.pass);
    }
}
