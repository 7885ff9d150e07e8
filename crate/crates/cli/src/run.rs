//! Orchestration: config loading, check selection, artifact output and the
//! run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::Serialize;

use sdelab_core::config::{load_str, Loaded, PotentialCheck};
use sdelab_core::io::sha256_hex;
use sdelab_core::SimConfig;

use crate::args::{Cli, Command, PotentialOp};
use crate::checks::{self, Check, Ctx};

/// Config used when none is given (only for commands that need no model).
const DEFAULT_CONFIG: &str = "[model]\neigenvalues = [1.0]\n";

#[derive(Serialize)]
pub struct CheckStatus {
    pub name: String,
    pub pass: bool,
}

#[derive(Serialize)]
pub struct Versions {
    #[serde(rename = "sdelab-core")]
    pub core: &'static str,
    #[serde(rename = "sdelab-cli")]
    pub cli: &'static str,
}

/// Everything needed to reproduce a run, plus its outcome.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub budget_scale: f64,
    pub versions: Versions,
    pub checks: Vec<CheckStatus>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

fn command_name(c: &Command) -> String {
    match c {
        Command::Simulate(_) => "simulate".into(),
        Command::VerifyGirsanov(_) => "verify-girsanov".into(),
        Command::VerifyResolvent(_) => "verify-resolvent".into(),
        Command::VerifyMartingale(_) => "verify-martingale".into(),
        Command::VerifyHarnack(_) => "verify-harnack".into(),
        Command::VerifyIto(_) => "verify-ito".into(),
        Command::VerifyInvariance(_) => "verify-invariance".into(),
        Command::Potential { op, .. } => format!("potential {}", match op {
            PotentialOp::Reduce => "reduce",
            PotentialOp::Polar => "polar",
            PotentialOp::Hunt { .. } => "hunt",
            PotentialOp::Raycone { .. } => "raycone",
            PotentialOp::Extension => "extension",
            PotentialOp::Counterexample => "counterexample",
        }),
        Command::Counterexample => "counterexample".into(),
        Command::All => "all".into(),
    }
}

fn needs_config(c: &Command) -> bool {
    !matches!(c, Command::Counterexample | Command::Potential { op: PotentialOp::Counterexample, .. })
}

/// Apply command-line overrides to the parsed configuration.
fn apply_overrides(cli: &Cli, loaded: &mut Loaded) {
    let c = &mut loaded.config.checks;
    match &cli.command {
        Command::VerifyGirsanov(a) => {
            if !a.times.is_empty() {
                c.girsanov.times = a.times.clone();
            }
            if let Some(f) = &a.f {
                c.resolvent.f = f.clone();
            }
            if let Some(b) = a.budget {
                c.girsanov.paths = b;
            }
        }
        Command::VerifyResolvent(a) => {
            if a.alpha.is_some() {
                c.resolvent.alpha = a.alpha;
                c.lipschitz.alpha = a.alpha;
            }
            if let Some(f) = &a.f {
                c.resolvent.f = f.clone();
                c.lipschitz.f = f.clone();
            }
            if let Some(p) = a.points {
                c.resolvent.points = p;
            }
            if let Some(b) = a.budget {
                c.resolvent.budget = b;
                c.lipschitz.budget = b;
            }
            if let Some(d) = a.depth {
                c.resolvent.depth = d;
            }
        }
        Command::VerifyMartingale(a) => {
            if let Some(p) = a.paths {
                c.martingale.paths = p;
            }
        }
        Command::VerifyHarnack(a) => {
            if a.p_factor.is_some() {
                c.harnack.p_factor = a.p_factor;
            }
            if let Some(b) = a.budget {
                c.harnack.budget = b;
            }
        }
        Command::VerifyIto(a) => {
            if let Some(x) = a.alpha {
                c.ito.alpha = x;
            }
            if let Some(b) = a.budget {
                c.ito.budget = b;
            }
        }
        Command::VerifyInvariance(a) => {
            if let Some(h) = a.horizon {
                c.invariance.horizon = h;
            }
        }
        Command::Potential { op, common } => {
            let p = &mut c.potential;
            if let Some(a) = common.alpha {
                p.alpha = a;
            }
            if let Some(s) = &common.set {
                p.set = s.clone();
            }
            match op {
                PotentialOp::Hunt { budget: Some(b) } => p.budget = *b,
                PotentialOp::Raycone { depth, epsilon } => {
                    if let Some(d) = depth {
                        p.ray_depth = *d;
                    }
                    if let Some(e) = epsilon {
                        p.ray_epsilon = *e;
                    }
                }
                _ => {}
            }
        }
        _ => {}
    }
}

fn potential_checks(ctx: &Ctx, p: &PotentialCheck, all: bool) -> anyhow::Result<Vec<Check>> {
    let mut out = vec![checks::reduce(ctx, p)?, checks::polar(ctx, p)?, checks::hunt(ctx, p)?];
    if !all || p.raycone {
        out.push(checks::raycone(ctx, p)?);
    }
    if !all || !p.outside.is_empty() {
        out.push(checks::extension(ctx, p)?);
    }
    Ok(out)
}

fn run_checks(cli: &Cli, ctx: &Ctx) -> anyhow::Result<(Vec<Check>, Option<(PathBuf, String)>)> {
    let ch = &ctx.loaded.config.checks;
    let p = &ch.potential;
    let mut out = Vec::new();
    let mut traj = None;
    match &cli.command {
        Command::Simulate(a) => {
            let s = &ctx.loaded.sim;
            let mut cfg = SimConfig::new(
                a.dt.unwrap_or(s.dt),
                a.horizon.unwrap_or(s.horizon),
                ctx.seed,
                a.paths.unwrap_or(s.ensemble_size),
            )?
            .with_scheme(a.scheme.map(Into::into).unwrap_or(s.scheme));
            cfg.blowup_guard = s.blowup_guard;
            let (check, csv) = checks::simulate(ctx, &cfg)?;
            let path = a.out.clone().unwrap_or_else(|| cli.out_dir.join("trajectories.csv"));
            traj = Some((path, csv));
            out.push(check);
        }
        Command::VerifyGirsanov(_) => out.push(checks::girsanov(ctx)?),
        Command::VerifyResolvent(_) => {
            out.push(checks::resolvent(ctx)?);
            out.push(checks::lipschitz(ctx)?);
        }
        Command::VerifyMartingale(a) => out.push(checks::martingale(ctx, a.trace)?),
        Command::VerifyHarnack(_) => {
            out.push(checks::gronwall(ctx)?);
            out.push(checks::harnack(ctx)?);
        }
        Command::VerifyIto(_) => out.push(checks::ito(ctx)?),
        Command::VerifyInvariance(_) => out.push(checks::invariance(ctx)?),
        Command::Potential { op, .. } => out.push(match op {
            PotentialOp::Reduce => checks::reduce(ctx, p)?,
            PotentialOp::Polar => checks::polar(ctx, p)?,
            PotentialOp::Hunt { .. } => checks::hunt(ctx, p)?,
            PotentialOp::Raycone { .. } => checks::raycone(ctx, p)?,
            PotentialOp::Extension => checks::extension(ctx, p)?,
            PotentialOp::Counterexample => checks::counterexample(ctx)?,
        }),
        Command::Counterexample => out.push(checks::counterexample(ctx)?),
        Command::All => {
            out.push(checks::model(ctx)?);
            if ch.girsanov.enabled {
                out.push(checks::girsanov(ctx)?);
            }
            if ch.resolvent.enabled {
                out.push(checks::resolvent(ctx)?);
            }
            if ch.lipschitz.enabled {
                out.push(checks::lipschitz(ctx)?);
            }
            if ch.martingale.enabled {
                out.push(checks::martingale(ctx, true)?);
            }
            if ch.gronwall.enabled {
                out.push(checks::gronwall(ctx)?);
            }
            if ch.harnack.enabled {
                out.push(checks::harnack(ctx)?);
            }
            if ch.ito.enabled {
                out.push(checks::ito(ctx)?);
            }
            if ch.invariance.enabled {
                out.push(checks::invariance(ctx)?);
            }
            if ch.counterexample.enabled {
                out.push(checks::counterexample(ctx)?);
            }
            if p.enabled && ctx.loaded.config.chain.is_some() {
                out.extend(potential_checks(ctx, p, true)?);
            }
        }
    }
    Ok((out, traj))
}

fn write(path: &Path, contents: &str, outputs: &mut Vec<String>, base: &Path) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    let shown = path.strip_prefix(base).unwrap_or(path);
    outputs.push(shown.display().to_string());
    Ok(())
}

/// Run the command. Returns whether every check passed.
pub fn execute(cli: &Cli) -> anyhow::Result<bool> {
    let started = Instant::now();
    if !(cli.budget_scale > 0.0 && cli.budget_scale.is_finite()) {
        bail!("--budget-scale must be positive");
    }
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None if needs_config(&cli.command) => bail!("--config is required for `{}`", command_name(&cli.command)),
        None => DEFAULT_CONFIG.to_string(),
    };
    let mut loaded = load_str(&text).with_context(|| match &cli.config {
        Some(p) => format!("invalid config {}", p.display()),
        None => "invalid built-in config".into(),
    })?;
    apply_overrides(cli, &mut loaded);
    let seed = cli.seed.unwrap_or(loaded.sim.master_seed);
    loaded.sim.master_seed = seed;
    let ctx = Ctx { loaded: &loaded, seed, scale: cli.budget_scale, config_hash: sha256_hex(text.as_bytes()) };

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        pool = pool.num_threads(w);
    }
    let pool = pool.build().context("building worker pool")?;
    let (results, traj) = pool.install(|| run_checks(cli, &ctx))?;

    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let mut outputs = Vec::new();
    if let Some((path, csv)) = &traj {
        write(path, csv, &mut outputs, &cli.out_dir)?;
    }
    for c in &results {
        let json = serde_json::to_string_pretty(&c.report)? + "\n";
        write(&cli.out_dir.join(format!("{}.json", c.name)), &json, &mut outputs, &cli.out_dir)?;
        for (name, contents) in &c.files {
            write(&cli.out_dir.join(name), contents, &mut outputs, &cli.out_dir)?;
        }
    }
    let pass = results.iter().all(|c| c.pass);
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        command: command_name(&cli.command),
        config_hash: ctx.config_hash.clone(),
        master_seed: seed,
        budget_scale: cli.budget_scale,
        versions: Versions { core: sdelab_core::VERSION, cli: env!("CARGO_PKG_VERSION") },
        checks: results.iter().map(|c| CheckStatus { name: c.name.clone(), pass: c.pass }).collect(),
        outputs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(cli.out_dir.join("manifest.json"), json).context("writing manifest")?;
    for c in &results {
        println!("{:<24} {}", c.name, if c.pass { "pass" } else { "FAIL" });
    }
    Ok(pass)
}
