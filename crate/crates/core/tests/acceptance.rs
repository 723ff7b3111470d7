//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary always prints. Exits with
//! status 1 if any criterion fails.

use std::collections::HashMap;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use phylo_ouou::estimation::{self, aicc, gls_solve, log_likelihood, ols, FitConfig};
use phylo_ouou::kernel::slope_factor_p;
use phylo_ouou::optimizer::{minimize_powell, BoxDomain, PowellOptions};
use phylo_ouou::phylo_cov::predictor_cov;
use phylo_ouou::simulate::simulate_traits;
use phylo_ouou::validate::{self, ValidateConfig};
use phylo_ouou::{LineageParams, OUOUParams, PhyloTree};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

// ---------------------------------------------------------------------------

fn moment_oracle() -> Verdict {
    let start = Instant::now();
    let config = ValidateConfig {
        lineages: validate::random_lineages(5, 7),
        times: validate::DEFAULT_TIMES.to_vec(),
        steps: 1000,
        trees: vec![],
        paths: 200_000,
        seed: 2_024,
        ..ValidateConfig::default()
    };
    let report = validate::run(&config, &validate::Reference).expect("valid configuration");
    let elapsed = start.elapsed();
    let failed: Vec<String> = report.failures().map(|c| format!("{} (z {:.2})", c.name, c.z)).collect();
    verdict(
        failed.is_empty() && within(elapsed, 120),
        format!(
            "{} checks, {} outside 3 SE, max z {:.2}, {:.1}s{}",
            report.checks.len(),
            failed.len(),
            report.max_z(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(": {}", failed.join("; ")) }
        ),
    )
}

fn algebraic_identity() -> Verdict {
    let start = Instant::now();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = LineageParams::new(
            10f64.powf(rng.gen_range(-2.0..1.0)),
            rng.gen_range(0.0..2.0),
            rng.gen_range(0.0..2.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        )
        .unwrap();
        let t = 10f64.powf(rng.gen_range(-2.0..1.0)) / p.alpha;
        let m = p.moments(t).unwrap();
        let pairs = [
            (m.var_theta, m.second_theta, m.mean_theta * m.mean_theta),
            (m.cov_y_theta, m.cross_y_theta, m.mean_y * m.mean_theta),
            (m.var_y, m.second_y, m.mean_y * m.mean_y),
        ];
        for (central, raw, product) in pairs {
            let scale = raw.abs().max(product.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max((central - (raw - product)).abs() / scale);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-10 && within(elapsed, 1),
        format!("1000 inputs, worst relative gap {worst:.2e}, {:.3}s", elapsed.as_secs_f64()),
    )
}

fn p_limits() -> Verdict {
    let start = Instant::now();
    let small = (slope_factor_p(1e-10).unwrap() - 0.25).abs();
    let large = (slope_factor_p(50.0).unwrap() - 0.5).abs();
    // geometric grid across the series switch up to saturation
    let grid: Vec<f64> = (0..10_000).map(|k| 1e-8 * (50.0f64 / 1e-8).powf(k as f64 / 9_999.0)).collect();
    let values: Vec<f64> = grid.iter().map(|&u| slope_factor_p(u).unwrap()).collect();
    let drops = values.windows(2).filter(|w| w[1] < w[0]).count();
    let elapsed = start.elapsed();
    verdict(
        small < 1e-6 && large < 1e-10 && drops == 0 && within(elapsed, 1),
        format!(
            "|p(1e-10)-1/4| = {small:.1e}, |p(50)-1/2| = {large:.1e}, {drops} decreases on 1e4 points, {:.3}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Shared root-to-MRCA time of every tip pair, from the Newick text alone.
/// Each tip records its chain of ancestor ids with absolute depths (root at
/// depth 0, root edge ignored).
fn shared_times_from_newick(text: &str) -> (Vec<String>, DMatrix<f64>) {
    fn subtree(s: &[u8], i: &mut usize, next: &mut usize) -> (Vec<(String, Vec<(usize, f64)>)>, f64) {
        let id = *next;
        *next += 1;
        let mut tips = Vec::new();
        if s[*i] == b'(' {
            *i += 1;
            loop {
                let (child, len) = subtree(s, i, next);
                for (name, mut chain) in child {
                    for e in &mut chain {
                        e.1 += len;
                    }
                    chain.insert(0, (id, 0.0));
                    tips.push((name, chain));
                }
                if s[*i] == b',' {
                    *i += 1;
                } else {
                    break;
                }
            }
            *i += 1;
        }
        let st = *i;
        while !b"(),:;".contains(&s[*i]) {
            *i += 1;
        }
        let name = String::from_utf8(s[st..*i].to_vec()).unwrap();
        let mut len = 0.0;
        if s[*i] == b':' {
            *i += 1;
            let st = *i;
            while !b"(),:;".contains(&s[*i]) {
                *i += 1;
            }
            len = std::str::from_utf8(&s[st..*i]).unwrap().parse().unwrap();
        }
        if tips.is_empty() {
            tips.push((name, vec![(id, 0.0)]));
        }
        (tips, len)
    }
    let s = text.trim().as_bytes();
    let (tips, _) = subtree(s, &mut 0, &mut 0);
    let n = tips.len();
    let depth_of: Vec<HashMap<usize, f64>> = tips.iter().map(|t| t.1.iter().copied().collect()).collect();
    let shared = DMatrix::from_fn(n, n, |a, b| {
        tips[a]
            .1
            .iter()
            .filter(|(id, _)| depth_of[b].contains_key(id))
            .map(|&(_, d)| d)
            .fold(0.0, f64::max)
    });
    (tips.into_iter().map(|t| t.0).collect(), shared)
}

fn bm_limit() -> Verdict {
    let start = Instant::now();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(23);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..=100);
        let depth = rng.gen_range(0.5..5.0);
        let sigma_x = rng.gen_range(0.2..2.0);
        let tree = PhyloTree::random_ultrametric(n, depth, &mut rng);
        let (labels, shared) = shared_times_from_newick(&tree.to_newick());
        let got = predictor_cov(&tree, 1e-8, sigma_x).unwrap();
        // align the oracle's tip order with the library's
        let order: Vec<usize> = tree
            .tip_labels()
            .iter()
            .map(|l| labels.iter().position(|m| m == l).unwrap())
            .collect();
        for i in 0..n {
            for j in 0..n {
                let want = sigma_x * sigma_x * shared[(order[i], order[j])];
                let scale = (sigma_x * sigma_x * depth).max(want.abs());
                worst = worst.max((got[(i, j)] - want).abs() / scale);
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-6 && within(elapsed, 5),
        format!("20 trees, worst relative gap {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn tree_covariance() -> Verdict {
    let start = Instant::now();
    let config = ValidateConfig {
        lineages: vec![],
        paths: 200_000,
        seed: 4_099,
        ..ValidateConfig::default()
    };
    let report = validate::run(&config, &validate::Reference).expect("valid configuration");
    let elapsed = start.elapsed();
    let traits: Vec<_> = report.checks.iter().filter(|c| c.name.contains(" trait ")).collect();
    let failed: Vec<String> = traits
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{} (z {:.2})", c.name, c.z))
        .collect();
    let max_z = traits.iter().map(|c| c.z).fold(0.0, f64::max);
    let others = report.checks.iter().filter(|c| !c.name.contains(" trait ") && !c.pass).count();
    verdict(
        failed.is_empty() && within(elapsed, 120),
        format!(
            "{} trait entries, max z {max_z:.2} ({} predictor/residual entries outside 3 SE), {:.1}s{}",
            traits.len(),
            others,
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(": {}", failed.join("; ")) }
        ),
    )
}

fn gls_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(31);
    let (mut worst_b, mut worst_ll, mut worst_ols) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(3..=50);
        let k = rng.gen_range(1..=3.min(n - 1));
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let v = &m * m.transpose() + DMatrix::identity(n, n) * 0.1 * n as f64;
        let x = DMatrix::from_fn(n, k, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-2.0..2.0) });
        let y = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let vinv = v.clone().try_inverse().unwrap();
        let xtv = x.transpose() * &vinv;
        let want_b = (&xtv * &x).try_inverse().unwrap() * &xtv * &y;
        let got_b = gls_solve(&x, &v, &y).unwrap();
        worst_b = worst_b.max((&got_b - &want_b).amax() / want_b.amax().max(1.0));
        let r = &y - &x * &want_b;
        let want_ll = -0.5
            * (n as f64 * (2.0 * std::f64::consts::PI).ln()
                + v.determinant().ln()
                + (r.transpose() * &vinv * &r)[(0, 0)]);
        let got_ll = log_likelihood(&y, &x, &want_b, &v).unwrap();
        worst_ll = worst_ll.max((got_ll - want_ll).abs() / want_ll.abs().max(1.0));
        let eye = DMatrix::identity(n, n);
        let via_gls = gls_solve(&x, &eye, &y).unwrap();
        let normal = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        let via_ols = ols(&x, &y).unwrap();
        worst_ols = worst_ols
            .max((&via_gls - &normal).amax() / normal.amax().max(1.0))
            .max((&via_gls - &via_ols).amax() / normal.amax().max(1.0));
    }
    let elapsed = start.elapsed();
    verdict(
        worst_b < 1e-8 && worst_ll < 1e-8 && worst_ols < 1e-10 && within(elapsed, 10),
        format!(
            "100 instances: GLS gap {worst_b:.1e}, log-likelihood gap {worst_ll:.1e}, V=I vs OLS gap {worst_ols:.1e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn optimizer() -> Verdict {
    let start = Instant::now();
    let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
    let dom = BoxDomain::new(vec![-5.0; 2], vec![5.0; 2]).unwrap();
    let r = minimize_powell(rosen, &[-1.2, 1.0], &dom, &PowellOptions::default()).unwrap();
    let rosen_err = (r.point[0] - 1.0).abs().max((r.point[1] - 1.0).abs());
    let mut monotone = r.trace.windows(2).all(|w| w[1] <= w[0]);

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(41);
    let mut quad_err = 0.0f64;
    for _ in 0..50 {
        let d = rng.gen_range(1..=4);
        let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(d, d) * 0.5;
        let c = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
        let f = |x: &[f64]| {
            let dx = DVector::from_column_slice(x) - &c;
            0.5 * (dx.transpose() * &a * &dx)[(0, 0)]
        };
        let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let dom = BoxDomain::new(vec![-5.0; d], vec![5.0; d]).unwrap();
        let q = minimize_powell(f, &s, &dom, &PowellOptions::default()).unwrap();
        monotone &= q.trace.windows(2).all(|w| w[1] <= w[0]);
        for k in 0..d {
            quad_err = quad_err.max((q.point[k] - c[k]).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        rosen_err < 1e-6 && r.evaluations < 10_000 && quad_err < 1e-8 && monotone && within(elapsed, 5),
        format!(
            "Rosenbrock error {rosen_err:.1e} in {} evaluations; 50 quadratics max error {quad_err:.1e}; monotone cycles: {monotone}; {:.2}s",
            r.evaluations,
            elapsed.as_secs_f64()
        ),
    )
}

fn end_to_end() -> Verdict {
    let start = Instant::now();
    let tree = PhyloTree::balanced(7, 1.0);
    let truth = OUOUParams::new(1.0, 0.3, 1.0, 1.0, 0.5, 0.0, 0.0).unwrap();
    let config = FitConfig::default();
    let (mut sum_b1, mut sum_alpha) = (0.0, 0.0);
    let mut slow = Vec::new();
    let mut worst_iters = 0;
    for rep in 0..50u64 {
        let traits = simulate_traits(&tree, &truth, None, 1_000 + rep).unwrap();
        let r = estimation::fit_ouou(&tree, &traits, &config).unwrap();
        let last = r.delta_trace.last().copied().unwrap_or(f64::INFINITY);
        if !(r.converged && last < 1e-5 && r.iterations <= 100) {
            slow.push(rep);
        }
        worst_iters = worst_iters.max(r.iterations);
        sum_b1 += r.b1;
        sum_alpha += r.alpha_hat;
    }
    let (mean_b1, mean_alpha) = (sum_b1 / 50.0, sum_alpha / 50.0);
    let elapsed = start.elapsed();
    verdict(
        slow.is_empty()
            && (0.45..=0.55).contains(&mean_b1)
            && (0.5..=2.0).contains(&mean_alpha)
            && within(elapsed, 600),
        format!(
            "mean b1 {mean_b1:.4}, mean alpha {mean_alpha:.4}, {} of 50 runs reached delta < 1e-5 (max {worst_iters} iterations), {:.1}s",
            50 - slow.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn aicc_arithmetic() -> Verdict {
    let value = aicc(0.0, 4, 39).unwrap();
    let gap = (value - 9.176471).abs();
    // the penalty does not depend on the likelihood, so differences between
    // models with equal k and n are -2 times the log-likelihood differences
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(53);
    let mut linear = true;
    for _ in 0..1000 {
        let (l1, l2): (f64, f64) = (rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0));
        let d = aicc(l1, 4, 39).unwrap() - aicc(l2, 4, 39).unwrap();
        let want = -2.0 * (l1 - l2);
        // rounding of the two sums is the only source of disagreement
        linear &= (d - want).abs() <= 4.0 * f64::EPSILON * (aicc(l1, 4, 39).unwrap().abs() + aicc(l2, 4, 39).unwrap().abs());
        linear &= aicc(l1, 4, 39).unwrap() == -2.0 * l1 + aicc(0.0, 4, 39).unwrap();
    }
    verdict(
        gap < 1e-6 && (value - 9.176_470_588_235_294).abs() < 1e-9 && linear,
        format!("aicc(0, 4, 39) = {value:.9}; linear in the log-likelihood: {linear}"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let tree_path = dir.path().join("tree.nwk");
    std::fs::write(&tree_path, PhyloTree::balanced(5, 1.0).to_newick()).unwrap();
    let bin = env!("CARGO_BIN_EXE_phylo-ouou");
    let run = |args: &[&str]| -> Vec<u8> {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success() || out.status.code() == Some(2), "{:?}", out);
        out.stdout
    };
    let tree = tree_path.to_str().unwrap();
    let sim_args = ["simulate", "--tree", tree, "--seed", "42"];
    let (s1, s2) = (run(&sim_args), run(&sim_args));
    let traits_path = dir.path().join("traits.csv");
    std::fs::write(&traits_path, &s1).unwrap();
    let traits = traits_path.to_str().unwrap();
    let mut identical = s1 == s2 && !s1.is_empty();
    for format in ["json", "csv", "text"] {
        let fit = ["fit", "--tree", tree, "--traits", traits, "--format", format];
        identical &= run(&fit) == run(&fit);
        let cmp = ["compare", "--tree", tree, "--traits", traits, "--format", format];
        identical &= run(&cmp) == run(&cmp);
    }
    let ms = ["fit", "--tree", tree, "--traits", traits, "--multistart", "3", "--seed", "5"];
    identical &= run(&ms) == run(&ms);
    let val = ["validate", "--paths", "2000", "--steps", "100", "--seed", "9", "--format", "csv"];
    identical &= run(&val) == run(&val);
    verdict(identical, format!("simulate, fit, compare, multistart fit and validate outputs byte-identical: {identical}"))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("moment oracle", moment_oracle),
        ("algebraic identity", algebraic_identity),
        ("p-factor limits", p_limits),
        ("BM limit", bm_limit),
        ("tree covariance oracle", tree_covariance),
        ("GLS/likelihood oracles", gls_oracles),
        ("optimizer", optimizer),
        ("end-to-end recovery", end_to_end),
        ("AICc arithmetic", aicc_arithmetic),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let v = check();
        if !v.pass {
            failures += 1;
        }
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
