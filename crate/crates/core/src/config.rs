//! Run configuration read from TOML.

use serde::{Deserialize, Serialize};

use crate::engine::{Scheme, SimConfig};
use crate::error::{Error, Result};
use crate::model::{BoundedDrift, DriftSpec, GalerkinModel, Potential};
use crate::potential::{chains, DiscreteResolvent};
use crate::testfn::TestFn;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    #[serde(default)]
    pub drift: DriftSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub checks: ChecksSection,
    pub chain: Option<ChainSpec>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dim: Option<usize>,
    pub eigenvalues: Vec<f64>,
    #[serde(default)]
    pub omega: f64,
    /// Diagonal noise coefficients; defaults to ones.
    pub sigma: Option<Vec<f64>>,
    #[serde(default = "default_hs_alpha")]
    pub hs_alpha: f64,
    #[serde(default = "default_hs_tolerance")]
    pub hs_tolerance: f64,
}

fn default_hs_alpha() -> f64 {
    0.5
}

fn default_hs_tolerance() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    #[serde(default)]
    pub potential: Potential,
    #[serde(default)]
    pub bounded: BoundedDrift,
    /// Declared `|B|_inf`; defaults to the analytic bound.
    pub sup_norm: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Starting point; defaults to the origin.
    pub x0: Option<Vec<f64>>,
    pub blowup_guard: Option<f64>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { dt: 1e-3, horizon: 1.0, paths: 1000, seed: 0, scheme: Scheme::SplitProximal, x0: None, blowup_guard: None }
    }
}

fn yes() -> bool {
    true
}

macro_rules! section {
    ($(#[$m:meta])* $name:ident { $($(#[$fm:meta])* $field:ident : $ty:ty = $def:expr),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, Deserialize, Serialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            pub enabled: bool,
            $($(#[$fm])* pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { enabled: yes(), $($field: $def,)* }
            }
        }
    };
}

section!(GirsanovCheck {
    times: Vec<f64> = vec![0.5, 1.0, 2.0],
    paths: usize = 20_000,
});

section!(ResolventCheck {
    /// Defaults to `4 pi |B|_inf^2` (or 1 when `B = 0`).
    alpha: Option<f64> = None,
    f: String = "cos:1".into(),
    points: usize = 10,
    budget: usize = 10_000,
    depth: usize = crate::resolvent::neumann::DEFAULT_DEPTH,
});

section!(LipschitzCheck {
    alpha: Option<f64> = None,
    f: String = "cos:1".into(),
    pairs: usize = 50,
    budget: usize = 4_000,
    separation: f64 = 0.25,
});

section!(MartingaleCheck {
    paths: usize = 10_000,
    dt: f64 = 1e-3,
    horizon: f64 = 1.0,
    /// Also report the `M_k` processes.
    m_process: bool = true,
});

section!(GronwallCheck {
    pairs: usize = 100,
    dt: f64 = 1e-3,
    horizon: f64 = 1.0,
});

section!(HarnackCheck {
    f: String = "gauss:1:0:1".into(),
    times: Vec<f64> = vec![0.5, 1.0],
    qs: Vec<f64> = vec![1.5, 2.0],
    /// Distances `|x - y|` of the panel pairs.
    separations: Vec<f64> = vec![0.0, 0.5, 1.0],
    p_factor: Option<f64> = None,
    budget: usize = 20_000,
});

section!(ItoCheck {
    g: String = "cos:1".into(),
    alpha: f64 = 1.0,
    t: f64 = 0.5,
    budget: usize = 10_000,
});

section!(InvarianceCheck {
    /// Defaults to five trigonometric functions fitted to the dimension.
    functions: Option<Vec<String>> = None,
    dt: f64 = 1e-2,
    horizon: f64 = 2000.0,
    burn_in: f64 = 0.2,
    thin: usize = 1,
});

section!(CounterexampleCheck {
    steps: Vec<f64> = vec![0.1, 0.05, 0.025],
    half_width: f64 = 6.0,
    alpha: f64 = 1.0,
});

section!(PotentialCheck {
    alpha: f64 = 1.0,
    /// Indices of the target set `A`.
    set: Vec<usize> = vec![0],
    /// `u` values; defaults to `u = 1`.
    u: Option<Vec<f64>> = None,
    /// When given, `u = U_alpha f` for these values of `f`.
    u_potential_of: Option<Vec<f64>> = None,
    budget: usize = 20_000,
    /// Include the Ray cone construction in `all`.
    raycone: bool = true,
    ray_beta: f64 = 1.0,
    ray_depth: usize = 2,
    ray_epsilon: f64 = 1e-4,
    ray_alphas: Vec<f64> = vec![0.5, 1.0, 2.0],
    /// Seed functions; defaults to the indicators of the first and last state.
    ray_seeds: Option<Vec<Vec<f64>>> = None,
    /// States of `E \ M` for the extension check.
    outside: Vec<usize> = Vec::new(),
    extension_alphas: Vec<f64> = vec![1.0, 10.0, 100.0, 1000.0],
});

impl InvarianceCheck {
    pub fn function_ids(&self, dim: usize) -> Vec<String> {
        if let Some(f) = &self.functions {
            return f.clone();
        }
        let pad = |h: &[&str]| {
            let mut v: Vec<&str> = h.to_vec();
            v.resize(dim, "0");
            v.join(",")
        };
        if dim == 1 {
            ["cos:1", "sin:1", "cosdot:0.5", "cosdot:2", "sindot:2"].map(String::from).to_vec()
        } else {
            vec!["cos:1".into(), "sin:1".into(), "cos:2".into(), format!("cosdot:{}", pad(&["0.5", "0.5"])), format!("sindot:{}", pad(&["1", "0.5"]))]
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    pub girsanov: GirsanovCheck,
    pub resolvent: ResolventCheck,
    pub lipschitz: LipschitzCheck,
    pub martingale: MartingaleCheck,
    pub gronwall: GronwallCheck,
    pub harnack: HarnackCheck,
    pub ito: ItoCheck,
    pub invariance: InvarianceCheck,
    pub counterexample: CounterexampleCheck,
    pub potential: PotentialCheck,
}

/// Finite chain for the potential-theory commands.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChainSpec {
    BirthDeath { n: usize, birth: f64, death: f64, #[serde(default)] killing: f64 },
    BrownianGrid { h: f64, half_width: f64 },
    Explicit { rates: Vec<Vec<f64>>, points: Option<Vec<f64>> },
    /// A base chain plus one artificial state with no in-rates that jumps to
    /// `target` at `rate`.
    Artificial { n: usize, birth: f64, death: f64, #[serde(default)] killing: f64, target: usize, rate: f64 },
}

impl ChainSpec {
    pub fn build(&self, alphas: &[f64]) -> Result<DiscreteResolvent> {
        match self {
            ChainSpec::BirthDeath { n, birth, death, killing } => {
                DiscreteResolvent::from_generator(chains::birth_death(*n, *birth, *death, *killing), alphas, None)
            }
            ChainSpec::BrownianGrid { h, half_width } => {
                let (pts, l) = chains::brownian_grid(*h, *half_width);
                DiscreteResolvent::from_generator(l, alphas, Some(pts))
            }
            ChainSpec::Explicit { rates, points } => {
                let n = rates.len();
                if rates.iter().any(|r| r.len() != n) {
                    return Err(Error::Config("chain.rates must be a square matrix".into()));
                }
                let l = nalgebra::DMatrix::from_fn(n, n, |i, j| rates[i][j]);
                DiscreteResolvent::from_generator(l, alphas, points.clone())
            }
            ChainSpec::Artificial { n, birth, death, killing, target, rate } => {
                if target >= n {
                    return Err(Error::Config("chain.target out of range".into()));
                }
                let l = crate::potential::with_artificial_state(&chains::birth_death(*n, *birth, *death, *killing), *target, *rate);
                DiscreteResolvent::from_generator(l, alphas, None)
            }
        }
    }
}

/// Model, drift and simulation settings built from a validated config.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: Config,
    pub model: GalerkinModel,
    pub drift: DriftSpec,
    pub sim: SimConfig,
    pub x0: Vec<f64>,
}

impl Config {
    /// Parse TOML; errors carry the line, column and offending key.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(self) -> Result<Loaded> {
        let m = &self.model;
        let dim = m.eigenvalues.len();
        if let Some(d) = m.dim {
            if d != dim {
                return Err(Error::Config(format!("model.dim = {d} but {dim} eigenvalues given")));
            }
        }
        let sigma = m.sigma.clone().unwrap_or_else(|| vec![1.0; dim]);
        let model = GalerkinModel::new(m.eigenvalues.clone(), m.omega, sigma, m.hs_alpha).map_err(keyed("model"))?;
        let drift = DriftSpec::new(self.drift.potential, self.drift.bounded.clone(), self.drift.sup_norm, dim)
            .map_err(keyed("drift"))?;
        let s = &self.simulation;
        let mut sim = SimConfig::new(s.dt, s.horizon, s.seed, s.paths).map_err(keyed("simulation"))?.with_scheme(s.scheme);
        if let Some(g) = s.blowup_guard {
            sim.blowup_guard = g;
        }
        sim.validate().map_err(keyed("simulation"))?;
        let x0 = s.x0.clone().unwrap_or_else(|| vec![0.0; dim]);
        if x0.len() != dim {
            return Err(Error::Config(format!("simulation.x0 has {} entries, model has {dim}", x0.len())));
        }
        for (key, spec) in [
            ("checks.resolvent.f", &self.checks.resolvent.f),
            ("checks.lipschitz.f", &self.checks.lipschitz.f),
            ("checks.harnack.f", &self.checks.harnack.f),
            ("checks.ito.g", &self.checks.ito.g),
        ] {
            test_fn(key, spec, dim)?;
        }
        for (i, spec) in self.checks.invariance.function_ids(dim).iter().enumerate() {
            test_fn(&format!("checks.invariance.functions[{i}]"), spec, dim)?;
        }
        Ok(Loaded { config: self, model, drift, sim, x0 })
    }
}

fn keyed(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Config(format!("[{section}]: {e}"))
}

/// Parse a test-function id and check it against the dimension.
pub fn test_fn(key: &str, spec: &str, dim: usize) -> Result<TestFn> {
    let f: TestFn = spec.parse().map_err(|e| Error::Config(format!("{key} = {spec:?}: {e}")))?;
    f.check_dim(dim).map_err(|e| Error::Config(format!("{key} = {spec:?}: {e}")))?;
    Ok(f)
}

/// Parse and validate in one step.
pub fn load_str(text: &str) -> Result<Loaded> {
    Config::parse(text)?.load()
}

#[cfg(test)]
mod tests {
    use super::*;

    const OU: &str = r#"
[model]
eigenvalues = [1.0, 2.0]
omega = 0.5

[simulation]
dt = 0.01
horizon = 1.0
paths = 100
seed = 7
scheme = "split_proximal"
"#;

    #[test]
    fn minimal_config_loads() {
        let l = load_str(OU).unwrap();
        assert_eq!(l.model.dim(), 2);
        assert_eq!(l.x0, vec![0.0, 0.0]);
        assert!(l.drift.bounded.is_zero());
        assert!(l.config.checks.girsanov.enabled);
    }

    #[test]
    fn drift_sections_parse() {
        let text = format!("{OU}\n[drift]\nsup_norm = 0.5\n[drift.potential]\nkind = \"abs\"\nc = 1.0\n[drift.bounded]\nkind = \"bounded_sin\"\nc = 0.25\n");
        let l = load_str(&text).unwrap();
        assert_eq!(l.drift.potential, Potential::Abs { c: 1.0 });
        assert_eq!(l.drift.sup_norm, 0.5);
    }

    #[test]
    fn unknown_key_reports_line_and_key() {
        let text = OU.replace("omega = 0.5", "omega = 0.5\nomgea = 1.0");
        let e = Config::parse(&text).unwrap_err().to_string();
        assert!(e.contains("line 5") && e.contains("omgea"), "{e}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(load_str(&OU.replace("dt = 0.01", "dt = -1.0")).is_err());
        assert!(load_str(&OU.replace("omega = 0.5", "omega = 0.5\ndim = 3")).is_err());
        let e = load_str(&format!("{OU}\n[checks.ito]\ng = \"cos:3\"\n")).unwrap_err().to_string();
        assert!(e.contains("checks.ito.g"), "{e}");
    }

    #[test]
    fn chain_specs_build() {
        let text = format!("{OU}\n[chain]\nkind = \"birth_death\"\nn = 5\nbirth = 1.0\ndeath = 2.0\n");
        let c = Config::parse(&text).unwrap();
        assert_eq!(c.chain.unwrap().build(&[1.0]).unwrap().len(), 5);
        let text = format!("{OU}\n[chain]\nkind = \"explicit\"\nrates = [[-1.0, 1.0], [2.0, -2.0]]\n");
        assert_eq!(Config::parse(&text).unwrap().chain.unwrap().build(&[1.0]).unwrap().len(), 2);
    }
}
