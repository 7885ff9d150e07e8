//! Test functions with string ids, e.g. `cos:1` or `gauss:1:0.5:2`.
//! Coordinates in ids are 1-based; internally they are 0-based.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TestFn {
    Const(f64),
    /// `x_k`
    Coord(usize),
    /// `cos(x_k)`
    Cos(usize),
    /// `sin(x_k)`
    Sin(usize),
    /// `cos(<h, x>)`
    CosDot(Vec<f64>),
    /// `sin(<h, x>)`
    SinDot(Vec<f64>),
    /// `exp(-gamma (x_k - center)^2)`
    Gauss { k: usize, center: f64, gamma: f64 },
}

impl TestFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFn::Const(c) => *c,
            TestFn::Coord(k) => x[*k],
            TestFn::Cos(k) => x[*k].cos(),
            TestFn::Sin(k) => x[*k].sin(),
            TestFn::CosDot(h) => dot(h, x).cos(),
            TestFn::SinDot(h) => dot(h, x).sin(),
            TestFn::Gauss { k, center, gamma } => (-gamma * (x[*k] - center).powi(2)).exp(),
        }
    }

    /// `|f|_inf`, `None` when unbounded.
    pub fn sup_norm(&self) -> Option<f64> {
        match self {
            TestFn::Const(c) => Some(c.abs()),
            TestFn::Coord(_) => None,
            _ => Some(1.0),
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        matches!(self, TestFn::Gauss { .. }) || matches!(self, TestFn::Const(c) if *c >= 0.0)
    }

    /// Coordinates the function depends on.
    pub fn active_coords(&self) -> Vec<usize> {
        match self {
            TestFn::Const(_) => vec![],
            TestFn::Coord(k) | TestFn::Cos(k) | TestFn::Sin(k) | TestFn::Gauss { k, .. } => vec![*k],
            TestFn::CosDot(h) | TestFn::SinDot(h) => {
                h.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
            }
        }
    }

    /// Gradient at `x`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        match self {
            TestFn::Const(_) => {}
            TestFn::Coord(k) => g[*k] = 1.0,
            TestFn::Cos(k) => g[*k] = -x[*k].sin(),
            TestFn::Sin(k) => g[*k] = x[*k].cos(),
            TestFn::CosDot(h) => {
                let s = -dot(h, x).sin();
                for (gi, hi) in g.iter_mut().zip(h) {
                    *gi = s * hi;
                }
            }
            TestFn::SinDot(h) => {
                let c = dot(h, x).cos();
                for (gi, hi) in g.iter_mut().zip(h) {
                    *gi = c * hi;
                }
            }
            TestFn::Gauss { k, center, gamma } => {
                g[*k] = -2.0 * gamma * (x[*k] - center) * self.eval(x);
            }
        }
        g
    }

    /// Diagonal of the Hessian at `x`.
    pub fn hessian_diag(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        match self {
            TestFn::Const(_) | TestFn::Coord(_) => {}
            TestFn::Cos(k) => g[*k] = -x[*k].cos(),
            TestFn::Sin(k) => g[*k] = -x[*k].sin(),
            TestFn::CosDot(h) => {
                let c = -dot(h, x).cos();
                for (gi, hi) in g.iter_mut().zip(h) {
                    *gi = c * hi * hi;
                }
            }
            TestFn::SinDot(h) => {
                let s = -dot(h, x).sin();
                for (gi, hi) in g.iter_mut().zip(h) {
                    *gi = s * hi * hi;
                }
            }
            TestFn::Gauss { k, center, gamma } => {
                let u = x[*k] - center;
                g[*k] = (4.0 * gamma * gamma * u * u - 2.0 * gamma) * self.eval(x);
            }
        }
        g
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let ok = match self {
            TestFn::Const(_) => true,
            TestFn::Coord(k) | TestFn::Cos(k) | TestFn::Sin(k) | TestFn::Gauss { k, .. } => *k < dim,
            TestFn::CosDot(h) | TestFn::SinDot(h) => h.len() <= dim,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("test function {self} does not fit dimension {dim}")))
        }
    }
}

fn dot(h: &[f64], x: &[f64]) -> f64 {
    h.iter().zip(x).map(|(a, b)| a * b).sum()
}

impl fmt::Display for TestFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |h: &[f64]| h.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        match self {
            TestFn::Const(c) => write!(f, "const:{c}"),
            TestFn::Coord(k) => write!(f, "coord:{}", k + 1),
            TestFn::Cos(k) => write!(f, "cos:{}", k + 1),
            TestFn::Sin(k) => write!(f, "sin:{}", k + 1),
            TestFn::CosDot(h) => write!(f, "cosdot:{}", list(h)),
            TestFn::SinDot(h) => write!(f, "sindot:{}", list(h)),
            TestFn::Gauss { k, center, gamma } => write!(f, "gauss:{}:{center}:{gamma}", k + 1),
        }
    }
}

impl FromStr for TestFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unrecognized test function '{s}'"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let coord = |v: &str| match v.trim().parse::<usize>() {
            Ok(k) if k >= 1 => Ok(k - 1),
            _ => Err(bad()),
        };
        Ok(match kind {
            "const" => TestFn::Const(num(rest)?),
            "coord" => TestFn::Coord(coord(rest)?),
            "cos" => TestFn::Cos(coord(rest)?),
            "sin" => TestFn::Sin(coord(rest)?),
            "cosdot" | "sindot" => {
                let h = rest.split(',').map(num).collect::<Result<Vec<_>>>()?;
                if kind == "cosdot" {
                    TestFn::CosDot(h)
                } else {
                    TestFn::SinDot(h)
                }
            }
            "gauss" => {
                let parts: Vec<&str> = rest.split(':').collect();
                if parts.len() != 3 {
                    return Err(bad());
                }
                TestFn::Gauss { k: coord(parts[0])?, center: num(parts[1])?, gamma: num(parts[2])? }
            }
            _ => return Err(bad()),
        })
    }
}
