//! Euler–Maruyama simulation of the coupled system, alone and along a tree.
//!
//! Every random stream is keyed by `(seed, path, node)`, so results do not
//! depend on thread count or traversal order.
//!
//! With `coupled` output the simulator also integrates each path at twice
//! the step, reusing the fine noise (`z_coarse = (z_1 + z_2) / sqrt 2`). The
//! combination `2 g(fine) - g(coarse)` then cancels the first-order
//! discretization bias of any moment `g`, and its per-path spread gives an
//! honest standard error.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::estimation::TraitTable;
use crate::kernel::{KernelError, LineageParams, OUOUParams};
use crate::tree::PhyloTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("step {step} exceeds a tenth of the shortest branch ({min_branch})")]
    StepTooLong { step: f64, min_branch: f64 },
    #[error("need at least one path")]
    NoPaths,
    #[error("time must be positive and finite, got {0}")]
    BadTime(f64),
    #[error("tree has no branch of positive length")]
    DegenerateTree,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// One Euler–Maruyama step of `(y, theta)` with standard normal draws `z`:
/// `z[0]` drives the optimum, `z[1]` the trait.
pub fn step_pair(state: (f64, f64), dt: f64, params: &LineageParams, z: [f64; 2]) -> (f64, f64) {
    let (y, theta) = state;
    let a = params.alpha;
    let sq = dt.sqrt();
    let theta_next = theta - a * theta * dt + params.sigma_theta * sq * z[0];
    let y_next = y - a * (y - theta) * dt + params.sigma_y * sq * z[1];
    (y_next, theta_next)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(path, stream)` pair.
fn stream(seed: u64, path: u64, stream: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(splitmix(splitmix(splitmix(seed) ^ path) ^ stream))
}

fn normal(rng: &mut Xoshiro256PlusPlus) -> f64 {
    StandardNormal.sample(rng)
}

/// Number of Euler steps for a branch of length `len`, forced even when a
/// coarse companion path is integrated.
fn steps_for(len: f64, step: f64, even: bool) -> usize {
    if len <= 0.0 {
        return 0;
    }
    let k = (len / step).ceil().max(1.0) as usize;
    if even {
        k + k % 2
    } else {
        k
    }
}

// ---------------------------------------------------------------------------
// Tree simulation

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub params: OUOUParams,
    pub tree: PhyloTree,
    /// Euler step; `None` means a hundredth of the shortest branch.
    pub step: Option<f64>,
    pub paths: usize,
    pub seed: u64,
    /// Also integrate every path at twice the step.
    pub coupled: bool,
    /// Keep `(x, y)` at every node, not just the tips.
    pub record_nodes: bool,
}

impl SimConfig {
    pub fn new(params: OUOUParams, tree: PhyloTree, paths: usize, seed: u64) -> Self {
        Self {
            params,
            tree,
            step: None,
            paths,
            seed,
            coupled: false,
            record_nodes: false,
        }
    }

    /// The step actually used, after validation.
    pub fn resolved_step(&self) -> Result<f64, SimError> {
        if self.paths == 0 {
            return Err(SimError::NoPaths);
        }
        let min_branch = self.tree.min_branch_length();
        match (self.step, min_branch) {
            (Some(h), _) if !(h > 0.0 && h.is_finite()) => Err(SimError::BadStep(h)),
            (Some(h), Some(m)) if h > m / 10.0 * (1.0 + 1e-12) => Err(SimError::StepTooLong { step: h, min_branch: m }),
            (Some(h), _) => Ok(h),
            (None, Some(m)) => Ok(m / 100.0),
            (None, None) => Err(SimError::DegenerateTree),
        }
    }
}

/// Tip values of all paths, row-major (`path * n_tips + tip`).
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub tip_labels: Vec<String>,
    pub paths: usize,
    pub step: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// The same paths integrated at step `2 * step`.
    pub coarse: Option<(Vec<f64>, Vec<f64>)>,
    /// `(x, y)` at every node, row-major (`path * n_nodes + node`).
    pub nodes: Option<Vec<(f64, f64)>>,
}

impl SimOutput {
    pub fn num_tips(&self) -> usize {
        self.tip_labels.len()
    }

    /// One path as a trait table.
    pub fn table(&self, path: usize) -> TraitTable {
        let n = self.num_tips();
        let r = path * n..(path + 1) * n;
        TraitTable {
            species: self.tip_labels.clone(),
            x: self.x[r.clone()].to_vec(),
            y: self.y[r].to_vec(),
        }
    }
}

struct PathResult {
    fine: Vec<(f64, f64)>,
    coarse: Option<Vec<(f64, f64)>>,
}

/// Integrates one path over the whole tree; returns `(x, y)` per node.
fn simulate_path(tree: &PhyloTree, params: &OUOUParams, step: f64, coupled: bool, seed: u64, path: u64) -> PathResult {
    let n_nodes = tree.num_nodes();
    let (a, b0, b1) = (params.alpha(), params.b0(), params.b1());
    let (sx, sy) = (params.sigma_x(), params.sigma_y());
    let root = (params.x_a(), params.y_a());
    let mut fine = vec![root; n_nodes];
    let mut coarse = coupled.then(|| vec![root; n_nodes]);

    // x follows its own OU process; the optimum is tied to it exactly
    let advance = |(x, y): (f64, f64), dt: f64, zx: f64, zy: f64| {
        let theta = b0 + b1 * x;
        let sq = dt.sqrt();
        (x - a * x * dt + sx * sq * zx, y - a * (y - theta) * dt + sy * sq * zy)
    };

    for node in 1..n_nodes {
        let parent = tree.parent_of(node).expect("non-root node has a parent");
        let len = tree.branch_length(node);
        let k = steps_for(len, step, coupled);
        let mut state = fine[parent];
        if k == 0 {
            fine[node] = state;
            if let Some(c) = coarse.as_mut() {
                c[node] = c[parent];
            }
            continue;
        }
        let dt = len / k as f64;
        let mut rng = stream(seed, path, node as u64);
        match coarse.as_mut() {
            None => {
                for _ in 0..k {
                    let (zx, zy) = (normal(&mut rng), normal(&mut rng));
                    state = advance(state, dt, zx, zy);
                }
            }
            Some(c) => {
                let mut cstate = c[parent];
                let s = std::f64::consts::FRAC_1_SQRT_2;
                for _ in 0..k / 2 {
                    let (zx1, zy1) = (normal(&mut rng), normal(&mut rng));
                    let (zx2, zy2) = (normal(&mut rng), normal(&mut rng));
                    state = advance(state, dt, zx1, zy1);
                    state = advance(state, dt, zx2, zy2);
                    cstate = advance(cstate, 2.0 * dt, s * (zx1 + zx2), s * (zy1 + zy2));
                }
                c[node] = cstate;
            }
        }
        fine[node] = state;
    }
    PathResult { fine, coarse }
}

/// Simulates `config.paths` independent realizations of the predictor and
/// trait along the tree. Children start from their parent's end state and
/// receive their own noise stream.
pub fn simulate_tree(config: &SimConfig) -> Result<SimOutput, SimError> {
    let step = config.resolved_step()?;
    let tree = &config.tree;
    let tips = tree.tip_nodes().to_vec();
    let results: Vec<PathResult> = (0..config.paths as u64)
        .into_par_iter()
        .map(|p| simulate_path(tree, &config.params, step, config.coupled, config.seed, p))
        .collect();
    let n = tips.len();
    let mut x = Vec::with_capacity(config.paths * n);
    let mut y = Vec::with_capacity(config.paths * n);
    let mut cx = Vec::new();
    let mut cy = Vec::new();
    let mut nodes = config.record_nodes.then(Vec::new);
    for r in &results {
        for &t in &tips {
            x.push(r.fine[t].0);
            y.push(r.fine[t].1);
            if let Some(c) = &r.coarse {
                cx.push(c[t].0);
                cy.push(c[t].1);
            }
        }
        if let Some(all) = nodes.as_mut() {
            all.extend_from_slice(&r.fine);
        }
    }
    Ok(SimOutput {
        tip_labels: tree.tip_labels().iter().map(|s| s.to_string()).collect(),
        paths: config.paths,
        step,
        x,
        y,
        coarse: config.coupled.then_some((cx, cy)),
        nodes,
    })
}

/// A single realization as a trait table.
pub fn simulate_traits(tree: &PhyloTree, params: &OUOUParams, step: Option<f64>, seed: u64) -> Result<TraitTable, SimError> {
    let config = SimConfig {
        step,
        ..SimConfig::new(*params, tree.clone(), 1, seed)
    };
    Ok(simulate_tree(&config)?.table(0))
}

// ---------------------------------------------------------------------------
// Monte Carlo summaries

/// A Monte Carlo estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// Mean and standard error of per-path values.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        // shifting by the first sample keeps constant input exactly constant
        let shift = samples.first().copied().unwrap_or(0.0);
        let dev = samples.iter().map(|v| v - shift).sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|v| (v - shift - dev).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            value: shift + dev,
            se: (var / n).sqrt(),
        }
    }

    /// Distance from `target` in standard errors (0 when both coincide).
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.value - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.se
        }
    }
}

/// Covariance of paired samples with a delta-method standard error, computed
/// from per-path centred products. With `coarse` companions the estimate is
/// the extrapolated `2 cov(fine) - cov(coarse)`.
pub fn covariance_estimate(a: &[f64], b: &[f64], coarse: Option<(&[f64], &[f64])>) -> Estimate {
    let centred = |u: &[f64], v: &[f64]| -> Vec<f64> {
        let n = u.len() as f64;
        let (mu, mv) = (u.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
        // n/(n-1) makes the mean of the products the unbiased covariance
        let c = n / (n - 1.0).max(1.0);
        u.iter().zip(v).map(|(x, y)| c * (x - mu) * (y - mv)).collect()
    };
    let fine = centred(a, b);
    match coarse {
        None => Estimate::from_samples(&fine),
        Some((ca, cb)) => {
            let c = centred(ca, cb);
            let combined: Vec<f64> = fine.iter().zip(&c).map(|(f, g)| 2.0 * f - g).collect();
            Estimate::from_samples(&combined)
        }
    }
}

/// Monte Carlo counterparts of every closed-form lineage quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSet {
    pub mean_theta: Estimate,
    pub second_theta: Estimate,
    pub mean_y: Estimate,
    pub second_y: Estimate,
    pub cross_y_theta: Estimate,
    pub var_theta: Estimate,
    pub cov_y_theta: Estimate,
    pub var_y: Estimate,
}

impl MomentSet {
    /// `(name, estimate)` in a fixed order.
    pub fn entries(&self) -> [(&'static str, Estimate); 8] {
        [
            ("E[theta]", self.mean_theta),
            ("E[theta^2]", self.second_theta),
            ("E[y]", self.mean_y),
            ("E[y^2]", self.second_y),
            ("E[y theta]", self.cross_y_theta),
            ("Var[theta]", self.var_theta),
            ("Cov[y,theta]", self.cov_y_theta),
            ("Var[y]", self.var_y),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McMoments {
    pub paths: usize,
    pub step: f64,
    /// Plain Euler estimates at step `h`.
    pub euler: MomentSet,
    /// Bias-corrected `2 g(h) - g(2h)` estimates.
    pub extrapolated: MomentSet,
}

fn moment_set(fine: &[(f64, f64)], coarse: Option<&[(f64, f64)]>) -> MomentSet {
    let raw = |g: &dyn Fn((f64, f64)) -> f64| -> Estimate {
        let samples: Vec<f64> = match coarse {
            None => fine.iter().map(|&s| g(s)).collect(),
            Some(c) => fine.iter().zip(c).map(|(&f, &c)| 2.0 * g(f) - g(c)).collect(),
        };
        Estimate::from_samples(&samples)
    };
    let ys: Vec<f64> = fine.iter().map(|s| s.0).collect();
    let ts: Vec<f64> = fine.iter().map(|s| s.1).collect();
    let cy: Vec<f64>;
    let ct: Vec<f64>;
    let cpair = match coarse {
        None => None,
        Some(c) => {
            cy = c.iter().map(|s| s.0).collect();
            ct = c.iter().map(|s| s.1).collect();
            Some((&cy, &ct))
        }
    };
    let cov = |u: &[f64], v: &[f64], cu: Option<&Vec<f64>>, cv: Option<&Vec<f64>>| {
        covariance_estimate(u, v, cu.zip(cv).map(|(a, b)| (a.as_slice(), b.as_slice())))
    };
    MomentSet {
        mean_theta: raw(&|(_, t)| t),
        second_theta: raw(&|(_, t)| t * t),
        mean_y: raw(&|(y, _)| y),
        second_y: raw(&|(y, _)| y * y),
        cross_y_theta: raw(&|(y, t)| y * t),
        var_theta: cov(&ts, &ts, cpair.map(|p| p.1), cpair.map(|p| p.1)),
        cov_y_theta: cov(&ys, &ts, cpair.map(|p| p.0), cpair.map(|p| p.1)),
        var_y: cov(&ys, &ys, cpair.map(|p| p.0), cpair.map(|p| p.0)),
    }
}

/// Simulates `paths` lineages from `(y0, theta0)` to time `t` with step close
/// to `h` (rounded so that an even number of steps spans `t`).
pub fn mc_moments(params: &LineageParams, t: f64, paths: usize, h: f64, seed: u64) -> Result<McMoments, SimError> {
    LineageParams::new(params.alpha, params.sigma_y, params.sigma_theta, params.y0, params.theta0)?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(SimError::BadTime(t));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(SimError::BadStep(h));
    }
    if paths == 0 {
        return Err(SimError::NoPaths);
    }
    let k = steps_for(t, h, true);
    let dt = t / k as f64;
    let pairs: Vec<((f64, f64), (f64, f64))> = (0..paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(seed, p, 0);
            let start = (params.y0, params.theta0);
            let (mut fine, mut coarse) = (start, start);
            let s = std::f64::consts::FRAC_1_SQRT_2;
            for _ in 0..k / 2 {
                let z1 = [normal(&mut rng), normal(&mut rng)];
                let z2 = [normal(&mut rng), normal(&mut rng)];
                fine = step_pair(fine, dt, params, z1);
                fine = step_pair(fine, dt, params, z2);
                coarse = step_pair(coarse, 2.0 * dt, params, [s * (z1[0] + z2[0]), s * (z1[1] + z2[1])]);
            }
            (fine, coarse)
        })
        .collect();
    let fine: Vec<(f64, f64)> = pairs.iter().map(|p| p.0).collect();
    let coarse: Vec<(f64, f64)> = pairs.iter().map(|p| p.1).collect();
    Ok(McMoments {
        paths,
        step: dt,
        euler: moment_set(&fine, None),
        extrapolated: moment_set(&fine, Some(&coarse)),
    })
}
