//! Phylogenetic Ornstein-Uhlenbeck regression.
//!
//! A trait `y` tracks a moving optimum `theta = b0 + b1 * x` while the
//! predictor `x` itself follows an OU process along a phylogeny. This crate
//! provides the closed-form moments of that coupled system, the phylogenetic
//! covariance matrices built from them, an iterative GLS / maximum-likelihood
//! fit driven by Powell's method, and a tree-structured SDE simulator used as
//! an independent Monte Carlo oracle.

pub mod estimation;
pub mod kernel;
pub mod optimizer;
pub mod phylo_cov;
pub mod simulate;
pub mod tree;
pub mod validate;

pub use estimation::{FitConfig, FitReport, ModelHook, TraitTable};
pub use kernel::{LineageParams, OUOUParams};
pub use phylo_cov::{CovarianceBundle, CovarianceModel};
pub use tree::{PairTimes, PhyloTree};
