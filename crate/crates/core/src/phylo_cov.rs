//! Phylogenetic covariance matrices.
//!
//! For a pair of tips with shared time `t_a` and divergence time `d`, the
//! root state is fixed, the two lineages evolve jointly for `t_a`, then each
//! evolves independently for `s = d / 2`. The three `n x n` matrices are:
//!
//! * predictor covariance `T_alpha(i,j) = sigma_x^2 e^{-alpha d} (1 - e^{-2 alpha t_a}) / (2 alpha)`;
//! * trait covariance `Cov[y_i, y_j] = Var[e^{-alpha s} y_a + alpha s e^{-alpha s} theta_a]`,
//!   where `(y_a, theta_a)` is the lineage state at the split;
//! * residual covariance `V(i,j) = Cov[r_i, r_j]` of `r = y - p(alpha T) theta`,
//!   expanded into its four terms `Cov[y_i,y_j] - p Cov[y_i,theta_j] - p Cov[theta_i,y_j]
//!   + p^2 Cov[theta_i,theta_j]`, each propagated exactly from the split.
//!
//! A shorter closed form also circulates for `V`, built from the ancestral
//! moments alone: `Cov[y_i,y_j] - 2 p(alpha t_a) Cov[y_a,theta_a] + p(alpha t_a) Var[theta_a]`.
//! It skips the decay along the descendant branches and uses `p` where `p^2`
//! belongs, and it is not positive semidefinite in general (it fails on a
//! balanced 128-tip tree at `alpha = 1`). It is kept as
//! [`CovarianceModel::residual_cov_printed`] for comparison.

use nalgebra::{Cholesky, DMatrix, Dyn};
use thiserror::Error;

use crate::kernel::{self, KernelError, OUOUParams};
use crate::tree::{PairTimeTable, PhyloTree, TreeError, DEFAULT_ULTRAMETRIC_TOL};

/// First jitter step, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-10;
/// Last jitter step, relative to the mean diagonal.
pub const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("matrix is not positive definite even after jitter {jitter:.3e}")]
    NotPositiveDefinite { jitter: f64 },
}

/// Cholesky factor of a covariance matrix together with the diagonal jitter
/// that was needed to obtain it.
pub struct Factored {
    pub cholesky: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl std::fmt::Debug for Factored {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factored").field("jitter", &self.jitter).finish()
    }
}

/// Factorizes `m`, adding `1e-10 * mean(diag)` to the diagonal on failure and
/// escalating by 10x up to `1e-6 * mean(diag)`.
pub fn factor_with_jitter(m: &DMatrix<f64>) -> Result<Factored, CovError> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(Factored { cholesky: c, jitter: 0.0 });
    }
    let n = m.nrows().max(1) as f64;
    let mean_diag = m.diagonal().iter().sum::<f64>() / n;
    let mut rel = JITTER_START;
    let mut last = 0.0;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        last = jitter;
        if jitter > 0.0 && jitter.is_finite() {
            let mut shifted = m.clone();
            for i in 0..m.nrows() {
                shifted[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(shifted) {
                return Ok(Factored { cholesky: c, jitter });
            }
        }
        rel *= 10.0;
    }
    Err(CovError::NotPositiveDefinite { jitter: last })
}

/// All three matrices for one tree and parameter set.
#[derive(Debug, Clone)]
pub struct CovarianceBundle {
    pub predictor: DMatrix<f64>,
    pub trait_cov: DMatrix<f64>,
    /// Residual covariance with `jitter` already on its diagonal.
    pub residual: DMatrix<f64>,
    pub jitter: f64,
}

/// A validated ultrametric tree with its cached pair times.
#[derive(Debug, Clone, Copy)]
pub struct CovarianceModel<'t> {
    tree: &'t PhyloTree,
    depth: f64,
}

impl<'t> CovarianceModel<'t> {
    pub fn new(tree: &'t PhyloTree) -> Result<Self, CovError> {
        Self::with_tolerance(tree, DEFAULT_ULTRAMETRIC_TOL)
    }

    pub fn with_tolerance(tree: &'t PhyloTree, rel_tol: f64) -> Result<Self, CovError> {
        let depth = tree.validate_ultrametric(rel_tol)?;
        Ok(Self { tree, depth })
    }

    pub fn tree(&self) -> &'t PhyloTree {
        self.tree
    }

    /// Common root-to-tip distance.
    pub fn depth(&self) -> f64 {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.tree.num_tips()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn times(&self) -> &'t PairTimeTable {
        self.tree.pair_time_table()
    }

    pub fn predictor_cov(&self, alpha: f64, sigma_x: f64) -> Result<DMatrix<f64>, CovError> {
        // validates alpha and sigma_x
        OUOUParams::new(alpha, 0.0, sigma_x, 0.0, 0.0, 0.0, 0.0)?;
        let s2 = sigma_x * sigma_x;
        Ok(self.times().assemble(|shared, div| {
            let decayed = if shared == 0.0 {
                0.0
            } else {
                -(-2.0 * alpha * shared).exp_m1() / (2.0 * alpha)
            };
            s2 * (-alpha * div).exp() * decayed
        }))
    }

    pub fn trait_cov(&self, params: &OUOUParams) -> DMatrix<f64> {
        let (alpha, sy2, st2) = (params.alpha(), params.sigma_y().powi(2), params.sigma_theta().powi(2));
        self.times()
            .assemble(|shared, div| trait_cov_entry(alpha, sy2, st2, shared, div))
    }

    /// Residual covariance before any jitter.
    pub fn residual_cov_raw(&self, params: &OUOUParams) -> DMatrix<f64> {
        let (alpha, sy2, st2) = (params.alpha(), params.sigma_y().powi(2), params.sigma_theta().powi(2));
        let p = kernel::slope_factor_unchecked(alpha * self.depth);
        self.times().assemble(|shared, div| {
            let vc = kernel::var_cov_unchecked(alpha, sy2, st2, shared);
            let (a, b) = propagator(alpha, 0.5 * div);
            let yy = a * a * vc.var_y + 2.0 * a * b * vc.cov_y_theta + b * b * vc.var_theta;
            let y_theta = a * (a * vc.cov_y_theta + b * vc.var_theta);
            let theta_theta = a * a * vc.var_theta;
            yy - 2.0 * p * y_theta + p * p * theta_theta
        })
    }

    /// The ancestral-moment shortcut for `V` (see the module docs). Not
    /// positive semidefinite in general.
    pub fn residual_cov_printed(&self, params: &OUOUParams) -> DMatrix<f64> {
        let (alpha, sy2, st2) = (params.alpha(), params.sigma_y().powi(2), params.sigma_theta().powi(2));
        self.times().assemble(|shared, div| {
            let vc = kernel::var_cov_unchecked(alpha, sy2, st2, shared);
            let p = kernel::slope_factor_unchecked(alpha * shared);
            trait_cov_entry(alpha, sy2, st2, shared, div) - 2.0 * p * vc.cov_y_theta
                + p * vc.var_theta
        })
    }

    /// Residual covariance and its factor, jittered if needed.
    pub fn residual_cov(&self, params: &OUOUParams) -> Result<(DMatrix<f64>, Factored), CovError> {
        let mut v = self.residual_cov_raw(params);
        let f = factor_with_jitter(&v)?;
        for i in 0..v.nrows() {
            v[(i, i)] += f.jitter;
        }
        Ok((v, f))
    }

    pub fn bundle(&self, params: &OUOUParams) -> Result<CovarianceBundle, CovError> {
        let (residual, f) = self.residual_cov(params)?;
        Ok(CovarianceBundle {
            predictor: self.predictor_cov(params.alpha(), params.sigma_x())?,
            trait_cov: self.trait_cov(params),
            residual,
            jitter: f.jitter,
        })
    }
}

/// Covariance of two tip traits whose lineages share `shared` time and then
/// split for a total divergence `div`.
fn trait_cov_entry(alpha: f64, sy2: f64, st2: f64, shared: f64, div: f64) -> f64 {
    let vc = kernel::var_cov_unchecked(alpha, sy2, st2, shared);
    let (a, b) = propagator(alpha, 0.5 * div);
    a * a * vc.var_y + 2.0 * a * b * vc.cov_y_theta + b * b * vc.var_theta
}

/// Mean map over a branch of length `s`: `E[y_s] = a y_0 + b theta_0` and
/// `E[theta_s] = a theta_0`.
fn propagator(alpha: f64, s: f64) -> (f64, f64) {
    let a = (-alpha * s).exp();
    (a, alpha * s * a)
}

/// Predictor covariance for an ultrametric tree.
pub fn predictor_cov(tree: &PhyloTree, alpha: f64, sigma_x: f64) -> Result<DMatrix<f64>, CovError> {
    CovarianceModel::new(tree)?.predictor_cov(alpha, sigma_x)
}

/// Tip trait covariance for an ultrametric tree.
pub fn trait_cov(tree: &PhyloTree, params: &OUOUParams) -> Result<DMatrix<f64>, CovError> {
    Ok(CovarianceModel::new(tree)?.trait_cov(params))
}

/// Jittered residual covariance for an ultrametric tree.
pub fn residual_cov(tree: &PhyloTree, params: &OUOUParams) -> Result<DMatrix<f64>, CovError> {
    Ok(CovarianceModel::new(tree)?.residual_cov(params)?.0)
}
