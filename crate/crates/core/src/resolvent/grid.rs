//! Markov-chain approximation of the `B = 0` generator on a tensor grid over
//! a few active coordinates.
//!
//! Under `B = 0` the coordinates evolve independently, so a function of the
//! active coordinates stays one under the semigroup and its resolvent can be
//! computed on the active coordinates alone. Each axis carries a
//! birth–death generator; one axis is solved by a tridiagonal sweep, several
//! axes through the eigendecomposition of the symmetrized axis generators.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{GalerkinModel, Potential};

#[derive(Clone, Debug, PartialEq)]
pub struct AxisSpec {
    /// Model coordinate (0-based).
    pub coord: usize,
    pub lo: f64,
    pub step: f64,
    pub n: usize,
}

impl AxisSpec {
    pub fn node(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }

    pub fn hi(&self) -> f64 {
        self.node(self.n - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridLayout {
    pub dim: usize,
    pub axes: Vec<AxisSpec>,
}

impl GridLayout {
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.axes.len()];
        for i in (0..self.axes.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.axes[i + 1].n;
        }
        s
    }

    /// Full state vector at a node, zero outside the active coordinates.
    pub fn state_of(&self, mut idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        for (a, s) in self.axes.iter().zip(self.strides()) {
            let i = idx / s;
            idx %= s;
            x[a.coord] = a.node(i);
        }
        x
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.axes.iter().all(|a| x[a.coord] >= a.lo && x[a.coord] <= a.hi())
    }

    pub fn sample(self: &Arc<Self>, f: impl Fn(&[f64]) -> f64) -> GridFunction {
        let values = (0..self.len()).map(|i| f(&self.state_of(i))).collect();
        GridFunction { layout: self.clone(), values }
    }
}

/// Values on the nodes of a layout; evaluated by clamped multilinear
/// interpolation in the active coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub layout: Arc<GridLayout>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let axes = &self.layout.axes;
        if axes.is_empty() {
            return self.values[0];
        }
        let strides = self.layout.strides();
        let mut base = 0;
        let mut w = Vec::with_capacity(axes.len());
        for (a, s) in axes.iter().zip(&strides) {
            let u = ((x[a.coord] - a.lo) / a.step).clamp(0.0, (a.n - 1) as f64);
            let i = (u.floor() as usize).min(a.n - 2);
            base += i * s;
            w.push(u - i as f64);
        }
        let m = axes.len();
        let mut acc = 0.0;
        for corner in 0..(1usize << m) {
            let mut weight = 1.0;
            let mut idx = base;
            for j in 0..m {
                if corner >> j & 1 == 1 {
                    weight *= w[j];
                    idx += strides[j];
                } else {
                    weight *= 1.0 - w[j];
                }
            }
            if weight != 0.0 {
                acc += weight * self.values[idx];
            }
        }
        acc
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sup_distance(&self, other: &GridFunction) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn map(&self, f: impl Fn(usize, f64) -> f64) -> GridFunction {
        GridFunction {
            layout: self.layout.clone(),
            values: self.values.iter().enumerate().map(|(i, v)| f(i, *v)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct AxisRates {
    up: Vec<f64>,
    down: Vec<f64>,
}

#[derive(Clone, Debug)]
struct AxisEigen {
    values: Vec<f64>,
    /// `V^T D^{1/2}`
    forward: DMatrix<f64>,
    /// `D^{-1/2} V`
    backward: DMatrix<f64>,
}

pub struct GridOperator {
    pub layout: Arc<GridLayout>,
    rates: Vec<AxisRates>,
    eigen: Option<Vec<AxisEigen>>,
}

/// Default nodes per axis by number of active axes.
pub fn default_nodes(active: usize) -> Result<usize> {
    match active {
        0 | 1 => Ok(4001),
        2 => Ok(401),
        3 => Ok(81),
        m => Err(Error::Infeasible { required: 81u64.pow(m as u32), cap: 81u64.pow(3) }),
    }
}

impl GridOperator {
    /// Grid over `coords` wide enough to cover `points` plus eight stationary
    /// standard deviations.
    pub fn for_coords(
        model: &GalerkinModel,
        potential: &Potential,
        coords: &[usize],
        points: &[Vec<f64>],
        nodes: Option<usize>,
    ) -> Result<Self> {
        let n = match nodes {
            Some(n) => n,
            None => default_nodes(coords.len())?,
        };
        let axes = coords
            .iter()
            .map(|&k| {
                let gap = (model.eigenvalues[k] - model.omega).max(0.05);
                let sd = model.sigma[k] / (2.0 * gap).sqrt();
                let far = points.iter().map(|p| p[k].abs()).fold(0.0, f64::max);
                let half = far + 8.0 * sd + 1.0;
                AxisSpec { coord: k, lo: -half, step: 2.0 * half / (n - 1) as f64, n }
            })
            .collect();
        Self::new(model, potential, axes)
    }

    pub fn new(model: &GalerkinModel, potential: &Potential, axes: Vec<AxisSpec>) -> Result<Self> {
        for a in &axes {
            if a.coord >= model.dim() || a.n < 3 || !(a.step > 0.0) {
                return Err(Error::InvalidInput(format!("bad grid axis {a:?}")));
            }
        }
        let rates: Vec<AxisRates> = axes
            .iter()
            .map(|a| {
                let s2 = model.sigma[a.coord].powi(2);
                let h = a.step;
                let diff = s2 / (2.0 * h * h);
                let mut up = vec![0.0; a.n];
                let mut down = vec![0.0; a.n];
                for i in 0..a.n {
                    let x = a.node(i);
                    let b = model.rate(a.coord) * x + potential.min_norm_drift_1d(x);
                    let (u, d) = if b.abs() * h < s2 {
                        (diff + b / (2.0 * h), diff - b / (2.0 * h))
                    } else {
                        (diff + b.max(0.0) / h, diff + (-b).max(0.0) / h)
                    };
                    if i + 1 < a.n {
                        up[i] = u;
                    }
                    if i > 0 {
                        down[i] = d;
                    }
                }
                AxisRates { up, down }
            })
            .collect();
        let layout = Arc::new(GridLayout { dim: model.dim(), axes });
        let eigen = if layout.axes.len() >= 2 { Some(rates.iter().map(axis_eigen).collect()) } else { None };
        Ok(Self { layout, rates, eigen })
    }

    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> GridFunction {
        self.layout.sample(f)
    }

    /// `(alpha - L)^{-1} g`.
    pub fn resolvent(&self, alpha: f64, g: &GridFunction) -> Result<GridFunction> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput("alpha must be positive".into()));
        }
        let values = match self.layout.axes.len() {
            0 => vec![g.values[0] / alpha],
            1 => thomas(&self.rates[0], alpha, &g.values)?,
            _ => self.refined_tensor_resolvent(alpha, g),
        };
        Ok(GridFunction { layout: self.layout.clone(), values })
    }

    /// The eigenvector scaling is badly conditioned on wide grids, so the
    /// spectral solve is used as a preconditioner for iterative refinement
    /// against the exact generator.
    fn refined_tensor_resolvent(&self, alpha: f64, g: &GridFunction) -> Vec<f64> {
        let scale = g.sup_norm().max(1e-300);
        let mut u = GridFunction { layout: self.layout.clone(), values: self.tensor_resolvent(alpha, &g.values) };
        for _ in 0..20 {
            let lu = self.generator(&u);
            let r: Vec<f64> = (0..u.values.len()).map(|i| g.values[i] - alpha * u.values[i] + lu.values[i]).collect();
            let rmax = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if rmax <= 1e-13 * scale {
                break;
            }
            let du = self.tensor_resolvent(alpha, &r);
            for (a, b) in u.values.iter_mut().zip(&du) {
                *a += b;
            }
        }
        u.values
    }

    fn tensor_resolvent(&self, alpha: f64, g: &[f64]) -> Vec<f64> {
        let eig = self.eigen.as_ref().expect("eigen data for tensor grids");
        let shape: Vec<usize> = self.layout.axes.iter().map(|a| a.n).collect();
        let mut data = g.to_vec();
        for (ax, e) in eig.iter().enumerate() {
            data = apply_axis(&data, &shape, ax, &e.forward);
        }
        let strides = self.layout.strides();
        for (idx, v) in data.iter_mut().enumerate() {
            let mut rem = idx;
            let mut mu = 0.0;
            for (ax, s) in strides.iter().enumerate() {
                mu += eig[ax].values[rem / s];
                rem %= s;
            }
            *v /= alpha - mu;
        }
        for (ax, e) in eig.iter().enumerate() {
            data = apply_axis(&data, &shape, ax, &e.backward);
        }
        data
    }

    /// `L u`.
    pub fn generator(&self, u: &GridFunction) -> GridFunction {
        let strides = self.layout.strides();
        let mut out = vec![0.0; u.values.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let mut rem = idx;
            for (ax, s) in strides.iter().enumerate() {
                let i = rem / s;
                rem %= s;
                let r = &self.rates[ax];
                if r.up[i] > 0.0 {
                    *o += r.up[i] * (u.values[idx + s] - u.values[idx]);
                }
                if r.down[i] > 0.0 {
                    *o += r.down[i] * (u.values[idx - s] - u.values[idx]);
                }
            }
        }
        GridFunction { layout: self.layout.clone(), values: out }
    }

    /// Partial derivative along active axis `ax` by central differences,
    /// one-sided at the ends.
    pub fn partial(&self, u: &GridFunction, ax: usize) -> GridFunction {
        let a = &self.layout.axes[ax];
        let s = self.layout.strides()[ax];
        let h = a.step;
        u.map(|idx, _| {
            let i = (idx / s) % a.n;
            if i == 0 {
                (u.values[idx + s] - u.values[idx]) / h
            } else if i == a.n - 1 {
                (u.values[idx] - u.values[idx - s]) / h
            } else {
                (u.values[idx + s] - u.values[idx - s]) / (2.0 * h)
            }
        })
    }
}

fn thomas(r: &AxisRates, alpha: f64, g: &[f64]) -> Result<Vec<f64>> {
    let n = g.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let diag = |i: usize| alpha + r.up[i] + r.down[i];
    let mut denom = diag(0);
    c[0] = -r.up[0] / denom;
    d[0] = g[0] / denom;
    for i in 1..n {
        let lower = -r.down[i];
        denom = diag(i) - lower * c[i - 1];
        if denom.abs() < 1e-300 {
            return Err(Error::Singular("tridiagonal resolvent".into()));
        }
        c[i] = -r.up[i] / denom;
        d[i] = (g[i] - lower * d[i - 1]) / denom;
    }
    let mut u = vec![0.0; n];
    u[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        u[i] = d[i] - c[i] * u[i + 1];
    }
    Ok(u)
}

fn axis_eigen(r: &AxisRates) -> AxisEigen {
    let n = r.up.len();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = -(r.up[i] + r.down[i]);
        if i + 1 < n {
            let v = (r.up[i] * r.down[i + 1]).sqrt();
            s[(i, i + 1)] = v;
            s[(i + 1, i)] = v;
        }
    }
    // detailed balance: pi_{i+1} / pi_i = up_i / down_{i+1}
    let mut log_pi = vec![0.0; n];
    for i in 0..n - 1 {
        log_pi[i + 1] = log_pi[i] + (r.up[i] / r.down[i + 1]).ln();
    }
    let top = log_pi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let half: Vec<f64> = log_pi.iter().map(|l| (0.5 * (l - top)).max(-700.0)).collect();
    let eig = SymmetricEigen::new(s);
    let v = eig.eigenvectors;
    let mut forward = v.transpose();
    for j in 0..n {
        let w = half[j].exp();
        for i in 0..n {
            forward[(i, j)] *= w;
        }
    }
    let mut backward = v;
    for i in 0..n {
        let w = (-half[i]).exp();
        for j in 0..n {
            backward[(i, j)] *= w;
        }
    }
    AxisEigen { values: eig.eigenvalues.iter().copied().collect(), forward, backward }
}

/// Multiply `mat` into axis `ax` of a row-major tensor.
fn apply_axis(data: &[f64], shape: &[usize], ax: usize, mat: &DMatrix<f64>) -> Vec<f64> {
    let n = shape[ax];
    let inner: usize = shape[ax + 1..].iter().product();
    let outer: usize = shape[..ax].iter().product();
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; n];
    for o in 0..outer {
        for q in 0..inner {
            let base = o * n * inner + q;
            for (j, l) in line.iter_mut().enumerate() {
                *l = data[base + j * inner];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (j, l) in line.iter().enumerate() {
                    acc += mat[(i, j)] * l;
                }
                out[base + i * inner] = acc;
            }
        }
    }
    out
}
