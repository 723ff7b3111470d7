//! Monte Carlo validation suite.
//!
//! Each closed-form quantity is compared with a simulation estimate and
//! passes when it lies within `threshold` standard errors. The closed forms
//! come from a [`ClosedForm`] implementation so a deliberately wrong one can
//! be plugged in as a negative control.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::kernel::{ClosedFormMoments, KernelError, LineageParams, OUOUParams};
use crate::phylo_cov::{CovError, CovarianceModel};
use crate::simulate::{self, covariance_estimate, Estimate, SimConfig, SimError};
use crate::tree::PhyloTree;

/// Below this many paths the checks have little power and a warning is issued.
pub const LOW_POWER_PATHS: usize = 10_000;

/// Time points, in units of `1 / alpha`.
pub const DEFAULT_TIMES: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];

/// Tree matrices the simulator is checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMatrices {
    pub predictor: DMatrix<f64>,
    pub trait_cov: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    /// Slope factor used in the residual `y - p theta`.
    pub p: f64,
}

/// Source of the formulas under test.
pub trait ClosedForm: Sync {
    fn lineage(&self, params: &LineageParams, t: f64) -> Result<ClosedFormMoments, KernelError>;
    fn tree(&self, tree: &PhyloTree, params: &OUOUParams) -> Result<TreeMatrices, CovError>;
}

/// The formulas implemented in this crate.
#[derive(Debug, Clone, Copy, Default)]
pub struct Reference;

impl ClosedForm for Reference {
    fn lineage(&self, params: &LineageParams, t: f64) -> Result<ClosedFormMoments, KernelError> {
        params.moments(t)
    }

    fn tree(&self, tree: &PhyloTree, params: &OUOUParams) -> Result<TreeMatrices, CovError> {
        let model = CovarianceModel::new(tree)?;
        Ok(TreeMatrices {
            predictor: model.predictor_cov(params.alpha(), params.sigma_x())?,
            trait_cov: model.trait_cov(params),
            residual: model.residual_cov_raw(params),
            p: crate::kernel::slope_factor_p(params.alpha() * model.depth())?,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub expected: f64,
    pub se: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub paths: usize,
    pub seed: u64,
    pub threshold: f64,
    pub warnings: Vec<String>,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn max_z(&self) -> f64 {
        self.checks.iter().map(|c| c.z).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct ValidateConfig {
    pub lineages: Vec<LineageParams>,
    /// Multiples of `1 / alpha` at which each lineage is checked.
    pub times: Vec<f64>,
    /// Euler steps per unit of the check time (`h = t / steps`).
    pub steps: usize,
    pub trees: Vec<(PhyloTree, OUOUParams)>,
    /// Tree simulation step; `None` uses the simulator default.
    pub tree_step: Option<f64>,
    pub paths: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            lineages: vec![LineageParams::new(1.0, 1.0, 1.0, 1.0, 1.0).expect("valid")],
            times: DEFAULT_TIMES.to_vec(),
            steps: 1000,
            trees: vec![(five_tip_tree(), five_tip_params())],
            tree_step: None,
            paths: 200_000,
            seed: 20_240_601,
            threshold: 3.0,
        }
    }
}

/// The fixed five-tip tree used by the default tree check.
pub fn five_tip_tree() -> PhyloTree {
    PhyloTree::parse_newick("((A:0.5,B:0.5):0.7,(C:0.9,(D:0.3,E:0.3):0.6):0.3);").expect("valid newick")
}

pub fn five_tip_params() -> OUOUParams {
    OUOUParams::new(1.2, 0.4, 0.9, 0.5, 0.8, 0.3, -0.2).expect("valid parameters")
}

/// `count` lineage parameter sets drawn from a fixed generator.
pub fn random_lineages(count: usize, seed: u64) -> Vec<LineageParams> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            LineageParams::new(
                rng.gen_range(0.3..3.0),
                rng.gen_range(0.1..1.5),
                rng.gen_range(0.1..1.5),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            )
            .expect("ranges are valid")
        })
        .collect()
}

/// Distinct simulation seed for the `k`-th check group.
fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn check(name: String, est: Estimate, expected: f64, threshold: f64) -> Check {
    let z = est.z_score(expected);
    Check {
        name,
        observed: est.value,
        expected,
        se: est.se,
        z,
        pass: z < threshold,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ValidateError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Cov(#[from] CovError),
}

/// Runs every lineage and tree check.
pub fn run(config: &ValidateConfig, formulas: &dyn ClosedForm) -> Result<ValidationReport, ValidateError> {
    let mut warnings = Vec::new();
    if config.paths < LOW_POWER_PATHS {
        warnings.push(format!(
            "only {} paths: standard errors are wide and the checks have low power (use at least {LOW_POWER_PATHS})",
            config.paths
        ));
    }
    let mut checks = Vec::new();
    let mut stream = 0u64;
    for (k, lp) in config.lineages.iter().enumerate() {
        for &m in &config.times {
            let t = m / lp.alpha;
            let mc = simulate::mc_moments(lp, t, config.paths, t / config.steps as f64, sub_seed(config.seed, stream))?;
            stream += 1;
            let exact = formulas.lineage(lp, t)?;
            let expected = [
                exact.mean_theta,
                exact.second_theta,
                exact.mean_y,
                exact.second_y,
                exact.cross_y_theta,
                exact.var_theta,
                exact.cov_y_theta,
                exact.var_y,
            ];
            for ((label, est), want) in mc.extrapolated.entries().into_iter().zip(expected) {
                checks.push(check(format!("lineage {k} t={m}/alpha {label}"), est, want, config.threshold));
            }
        }
    }
    for (k, (tree, params)) in config.trees.iter().enumerate() {
        let mut cfg = SimConfig::new(*params, tree.clone(), config.paths, sub_seed(config.seed, stream));
        stream += 1;
        cfg.step = config.tree_step;
        cfg.coupled = true;
        let out = simulate::simulate_tree(&cfg)?;
        let want = formulas.tree(tree, params)?;
        let n = out.num_tips();
        let (b0, b1) = (params.b0(), params.b1());
        let (cx, cy) = out.coarse.as_ref().expect("coupled run");
        let column = |v: &[f64], i: usize| -> Vec<f64> { v.iter().skip(i).step_by(n).copied().collect() };
        let residual = |x: &[f64], y: &[f64], i: usize| -> Vec<f64> {
            column(x, i)
                .iter()
                .zip(column(y, i))
                .map(|(x, y)| y - want.p * (b0 + b1 * x))
                .collect()
        };
        let labels = &out.tip_labels;
        for i in 0..n {
            for j in 0..=i {
                let pair = format!("{},{}", labels[i], labels[j]);
                let cov = |a: Vec<f64>, b: Vec<f64>, ca: Vec<f64>, cb: Vec<f64>| {
                    covariance_estimate(&a, &b, Some((&ca, &cb)))
                };
                let ex = cov(column(&out.x, i), column(&out.x, j), column(cx, i), column(cx, j));
                checks.push(check(format!("tree {k} predictor ({pair})"), ex, want.predictor[(i, j)], config.threshold));
                let ey = cov(column(&out.y, i), column(&out.y, j), column(cy, i), column(cy, j));
                checks.push(check(format!("tree {k} trait ({pair})"), ey, want.trait_cov[(i, j)], config.threshold));
                let er = cov(
                    residual(&out.x, &out.y, i),
                    residual(&out.x, &out.y, j),
                    residual(cx, cy, i),
                    residual(cx, cy, j),
                );
                checks.push(check(format!("tree {k} residual ({pair})"), er, want.residual[(i, j)], config.threshold));
            }
        }
    }
    Ok(ValidationReport {
        paths: config.paths,
        seed: config.seed,
        threshold: config.threshold,
        warnings,
        checks,
    })
}
