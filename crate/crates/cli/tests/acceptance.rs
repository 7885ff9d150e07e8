//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//! Runs with `cargo test -p sdelab-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use sdelab_core::diagnostics::{
    beta_process, gibbs_check, gronwall_check, harnack_check, harnack_ou_exact, invariance_check, sub_seed,
};
use sdelab_core::engine::long_run;
use sdelab_core::girsanov::{scaled_sup, weight_moments};
use sdelab_core::potential::{
    chains, counterexample_punctured_line, hunt_crosscheck, reduced_function, DiscreteResolvent, COUNTEREXAMPLE_VERDICT,
};
use sdelab_core::resolvent::neumann::{alpha_threshold, lipschitz_probe, verify_identity, DEFAULT_DEPTH};
use sdelab_core::rng::{NoiseStream, Purpose};
use sdelab_core::{BoundedDrift, DriftSpec, Dynamics, GalerkinModel, LazyEnsemble, Potential, SimConfig, TestFn};

type Outcome = Result<(bool, String), String>;

const SEED: u64 = 0x5EED_2024;

fn points(seed: u64, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut z = vec![0.0; dim];
            NoiseStream::new(seed, i as u64, Purpose::Auxiliary).fill_normals(&mut z);
            z.iter().map(|v| scale * v).collect()
        })
        .collect()
}

/// Three modes, `lambda = [1, 4, 9]`, `omega = 0`, abs potential, sine
/// perturbation with `|B|_inf = 0.5`.
fn abs_sin() -> (GalerkinModel, DriftSpec) {
    let m = GalerkinModel::diagonal(vec![1.0, 4.0, 9.0], 0.0).unwrap();
    let c = 0.5 / 3f64.sqrt();
    let d = DriftSpec::new(Potential::Abs { c: 1.0 }, BoundedDrift::BoundedSin { c }, Some(0.5), 3).unwrap();
    (m, d)
}

fn c1_identity() -> Outcome {
    let (m, d) = abs_sin();
    let alpha = alpha_threshold(&d);
    let pts = points(sub_seed(SEED, "c1"), 10, 3, 0.5);
    let r = verify_identity(&m, &d, &TestFn::Cos(0), alpha, DEFAULT_DEPTH, &pts, 100_000, 1e-3, SEED).map_err(|e| e.to_string())?;
    let devs: Vec<String> = r.rows.iter().map(|x| format!("{:+.2}", (x.route_a - x.route_b) / x.se)).collect();
    Ok((r.pass, format!("alpha = {alpha:.4}, (A - B) / SE at 10 points = [{}] (limit 3), Neumann ratio {:.3}", devs.join(", "), r.neumann.ratio)))
}

fn c2_girsanov() -> Outcome {
    let (m, d) = abs_sin();
    let cfg = SimConfig::new(1e-3, 2.0, SEED, 10_000).map_err(|e| e.to_string())?.with_dynamics(Dynamics::Reference);
    let ens = LazyEnsemble::new(&m, &d, &[0.0; 3], cfg).map_err(|e| e.to_string())?.materialize().map_err(|e| e.to_string())?;
    let b = scaled_sup(&m, &d);
    let mut pass = true;
    let mut detail = Vec::new();
    for t in [0.5, 1.0, 2.0] {
        let w = weight_moments(&ens, t, b).map_err(|e| e.to_string())?;
        pass &= w.mean_pass && w.second_pass;
        detail.push(format!(
            "t={t}: E rho = {:.4}±{:.4}, E rho^2 = {:.4} <= {:.4}",
            w.mean, w.mean_se, w.second, w.second_bound
        ));
    }
    Ok((pass, detail.join("; ")))
}

fn c3_lipschitz() -> Outcome {
    let (m, d) = abs_sin();
    let alpha = alpha_threshold(&d);
    let xs = points(sub_seed(SEED, "c3x"), 50, 3, 0.5);
    let ds = points(sub_seed(SEED, "c3d"), 50, 3, 1.0);
    let pairs: Vec<_> = xs
        .into_iter()
        .zip(ds)
        .map(|(x, d)| {
            let n = sdelab_core::stats::norm(&d);
            let y = x.iter().zip(&d).map(|(a, b)| a + 0.25 * b / n).collect();
            (x, y)
        })
        .collect();
    let r = lipschitz_probe(&m, &d, &TestFn::Cos(0), alpha, &pairs, 4_000, 1e-3, SEED).map_err(|e| e.to_string())?;
    Ok((r.pass, format!("50 pairs, max quotient {:.4} <= bound {:.4} + 3 SE", r.max_quotient, r.bound)))
}

fn c4_martingale() -> Outcome {
    let (m, d) = abs_sin();
    let cfg = SimConfig::new(1e-3, 1.0, SEED, 10_000).map_err(|e| e.to_string())?.with_dynamics(Dynamics::Reference);
    let ens = LazyEnsemble::new(&m, &d, &[0.3, -0.2, 0.1], cfg).map_err(|e| e.to_string())?.materialize().map_err(|e| e.to_string())?;
    let mut pass = true;
    let mut detail = Vec::new();
    for k in 0..3 {
        let r = beta_process(&ens, &m, k).map_err(|e| e.to_string())?;
        pass &= r.pass_qv && r.pass_cross;
        detail.push(format!("k={}: QV/T = {:.4}±{:.4}, cross ok = {}", k + 1, r.qv.unwrap_or(f64::NAN), r.qv_se.unwrap_or(f64::NAN), r.pass_cross));
    }
    Ok((pass, detail.join("; ")))
}

fn c5_gronwall() -> Outcome {
    let (m, d) = abs_sin();
    let xs = points(sub_seed(SEED, "c5x"), 100, 3, 1.0);
    let ys = points(sub_seed(SEED, "c5y"), 100, 3, 1.0);
    let pairs: Vec<_> = xs.into_iter().zip(ys).collect();
    let cfg = SimConfig::new(1e-3, 1.0, SEED, 100).map_err(|e| e.to_string())?;
    let r = gronwall_check(&m, &d.without_bounded(), &pairs, &cfg).map_err(|e| e.to_string())?;
    Ok((r.pass, format!("100 pairs, max ratio {:.6} <= 1 + 5 dt = {:.3}", r.max_ratio, 1.0 + r.tolerance)))
}

fn c6_harnack() -> Outcome {
    let m = GalerkinModel::diagonal(vec![1.0, 2.0], 0.5).map_err(|e| e.to_string())?;
    let d = DriftSpec::new(Potential::Abs { c: 1.0 }, BoundedDrift::Zero, None, 2).map_err(|e| e.to_string())?;
    let f = TestFn::Gauss { k: 0, center: 0.0, gamma: 1.0 };
    let x = vec![0.3, -0.2];
    let mut pass = true;
    let mut n = 0;
    let mut worst = f64::NEG_INFINITY;
    for t in [0.5, 1.0] {
        for q in [1.5, 2.0] {
            for s in [0.0, 0.5, 1.0] {
                let mut y = x.clone();
                y[0] += s;
                let seed = sub_seed(SEED, &format!("c6/{t}/{q}/{s}"));
                let r = harnack_check(&m, &d, &f, &x, &y, t, q, None, 20_000, 1e-3, seed).map_err(|e| e.to_string())?;
                worst = worst.max((r.lhs - r.rhs) / r.se.max(1e-300));
                pass &= r.pass;
                n += 1;
            }
        }
    }
    let ou = GalerkinModel::diagonal(vec![1.0, 2.0], 0.5).map_err(|e| e.to_string())?;
    let mut exact = true;
    for t in [0.5, 1.0] {
        for q in [1.5, 2.0] {
            for s in [0.0, 0.5, 1.0] {
                let mut y = x.clone();
                y[0] += s;
                exact &= harnack_ou_exact(&ou, 0, 0.0, 1.0, &x, &y, t, q, None).pass;
            }
        }
    }
    Ok((pass && exact, format!("{n}-point panel, p_factor = q/(q-1), max (lhs - rhs)/SE = {worst:.2}; OU closed form pass = {exact}")))
}

fn c7_invariance() -> Outcome {
    let m = GalerkinModel::diagonal(vec![1.0, 2.0], 0.5).map_err(|e| e.to_string())?;
    let pot = Potential::Abs { c: 1.0 };
    let d = DriftSpec::unperturbed(pot);
    let phis: Vec<TestFn> = ["cos:1", "sin:1", "cos:2", "cosdot:0.5,0.5", "sindot:1,0.5"].iter().map(|s| s.parse().unwrap()).collect();
    let sample = long_run(&m, &d, &[0.0, 0.0], 1e-2, 2000.0, SEED, 0.2, 1).map_err(|e| e.to_string())?;
    let r = invariance_check(&m, &pot, &phis, &sample);
    let m1 = GalerkinModel::diagonal(vec![1.0], 0.0).map_err(|e| e.to_string())?;
    let d1 = DriftSpec::unperturbed(pot);
    let s1 = long_run(&m1, &d1, &[0.0], 1e-2, 2000.0, sub_seed(SEED, "c7"), 0.2, 1).map_err(|e| e.to_string())?;
    let p1: Vec<TestFn> = ["cos:1", "cosdot:0.5", "cosdot:2", "sindot:2", "gauss:1:0:1"].iter().map(|s| s.parse().unwrap()).collect();
    let r1 = invariance_check(&m1, &pot, &p1, &s1);
    let mut gibbs = true;
    let mut worst = 0.0f64;
    for phi in &p1 {
        let g = gibbs_check(&m1, &pot, phi, &s1).map_err(|e| e.to_string())?;
        gibbs &= g.pass;
        worst = worst.max((g.time_average - g.gibbs).abs() / g.se);
    }
    let w2 = r.rows.iter().chain(&r1.rows).map(|x| x.mean.abs() / x.se).fold(0.0, f64::max);
    Ok((r.pass && r1.pass && gibbs, format!("max |mean L0 phi| / SE = {w2:.2}; 1-D Gibbs max deviation / SE = {worst:.2}")))
}

fn c8_hunt() -> Outcome {
    let n = 50;
    let mut pass = true;
    let mut detail = Vec::new();
    // (name, birth, death, killing, A, alpha)
    let configs = [
        ("birth-death, A = {49}, u = 1", 1.0, 1.5, 0.0, vec![49], 0.5),
        ("birth-death with killing, A = {0, 25}", 1.0, 1.0, 0.05, vec![0, 25], 0.2),
        ("birth-death, A = every 10th state", 2.0, 1.0, 0.1, vec![0, 10, 20, 30, 40], 2.0),
    ];
    for (i, (name, birth, death, kill, set, alpha)) in configs.into_iter().enumerate() {
        let res = DiscreteResolvent::from_generator(chains::birth_death(n, birth, death, kill), &[alpha], None).map_err(|e| e.to_string())?;
        let a: Vec<bool> = (0..n).map(|x| set.contains(&x)).collect();
        // u = 1 for the first, alpha-potentials of non-negative f otherwise
        let u = if i == 0 {
            vec![1.0; n]
        } else {
            let f: Vec<f64> = (0..n).map(|x| 1.0 + ((x * 7) % 5) as f64).collect();
            res.apply(alpha, &f).map_err(|e| e.to_string())?
        };
        let h = hunt_crosscheck(&res, &a, &u, alpha, 20_000, sub_seed(SEED, name)).map_err(|e| e.to_string())?;
        let r = reduced_function(&res, &a, &u, alpha).map_err(|e| e.to_string())?;
        let worst = h.rows.iter().filter(|x| x.se > 0.0).map(|x| (x.estimate - x.exact).abs() / x.se).fold(0.0, f64::max);
        pass &= h.pass && r.agreement <= 1e-8;
        detail.push(format!("{name}: max dev/SE {worst:.2}, route gap {:.1e}", r.agreement));
    }
    Ok((pass, detail.join("; ")))
}

fn c9_counterexample() -> Outcome {
    let r = counterexample_punctured_line(&[0.1, 0.05, 0.025], 6.0, 1.0).map_err(|e| e.to_string())?;
    let b = r.rows.last().unwrap().balayage_at_one;
    let pot: Vec<String> = r.rows.iter().map(|x| format!("{:.2e}", x.potential_at_one)).collect();
    let pass = (0.24..=0.25).contains(&b) && r.zero_potential && r.verdict == COUNTEREXAMPLE_VERDICT;
    Ok((pass, format!("B(1) = {b:.5} (oracle {:.5}); U 1_0 (1) = [{}] -> {:.1e}; {}", r.oracle, pot.join(", "), r.potential_limit, r.verdict)))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            let mut bytes = std::fs::read(&p).unwrap();
            if name == "manifest.json" {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text.lines().filter(|l| !l.contains("wall_clock_seconds")).collect::<Vec<_>>().join("\n").into_bytes();
            }
            (name, bytes)
        })
        .collect();
    files.sort();
    files
}

fn c10_determinism() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    let mut pass = true;
    for cfg in ["configs/abs_sin.toml", "configs/chain.toml"] {
        let mut snaps = Vec::new();
        for (run, workers) in [("a", "1"), ("b", "1"), ("c", "4")] {
            let out = tmp.path().join(format!("{}-{run}", cfg.replace('/', "_")));
            let st = Command::new(env!("CARGO_BIN_EXE_sdelab"))
                .args(["--config", root.join(cfg).to_str().unwrap(), "--seed", "99", "--workers", workers])
                .args(["--budget-scale", "0.02", "--out-dir", out.to_str().unwrap(), "all"])
                .output()
                .map_err(|e| e.to_string())?;
            if st.status.code() != Some(0) {
                return Err(format!("{cfg}: exit {:?}: {}", st.status.code(), String::from_utf8_lossy(&st.stderr)));
            }
            snaps.push(snapshot(&out));
        }
        let same_seed = snaps[0] == snaps[1];
        let workers = snaps[0] == snaps[2];
        pass &= same_seed && workers && !snaps[0].is_empty();
        detail.push(format!("{cfg}: {} files, repeat identical = {same_seed}, 1 vs 4 workers identical = {workers}", snaps[0].len()));
    }
    Ok((pass, detail.join("; ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("resolvent identity", c1_identity),
        ("Girsanov moments", c2_girsanov),
        ("Lipschitz bound", c3_lipschitz),
        ("martingale problem", c4_martingale),
        ("Gronwall contraction", c5_gronwall),
        ("Harnack inequality", c6_harnack),
        ("invariance", c7_invariance),
        ("Hunt identity", c8_hunt),
        ("punctured-line counterexample", c9_counterexample),
        ("determinism", c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok((ok, d)) => (ok, d),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {:>2} {} {name} ({:.1}s): {detail}",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
