//! Fitting the evolutionary regression to tip data.
//!
//! The fit alternates two steps until the regression coefficients stop
//! moving: a Powell search over `(alpha, sigma_y^2)` maximizing the Gaussian
//! likelihood with `b` held fixed, then a GLS update of `b` under the
//! residual covariance implied by the new rates. The predictor parameters
//! `x_a` and `sigma_x^2` are plugged in from their own GLS estimates at the
//! current `alpha`.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{self, KernelError, OUOUParams};
use crate::optimizer::{self, BoxDomain, OptimError, PowellOptions};
use crate::phylo_cov::{factor_with_jitter, CovError, CovarianceModel};
use crate::tree::{PhyloTree, TreeError};

/// Free parameters counted by AICc: `b0`, `b1`, `alpha`, `sigma_y^2`.
pub const PARAMETER_COUNT: usize = 4;

/// Default convergence threshold on `||b_new - b_old||`.
pub const DEFAULT_DELTA: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("{0}")]
    Io(String),
    #[error("trait table: {0}")]
    Csv(String),
    #[error("trait table lists species `{0}` more than once")]
    DuplicateSpecies(String),
    #[error("species not found in tree: {}", .0.join(", "))]
    OrphanSpecies(Vec<String>),
    #[error("tree tips missing from trait table: {}", .0.join(", "))]
    MissingSpecies(Vec<String>),
    #[error("non-finite {column} value for species `{species}`")]
    NonFiniteValue { species: String, column: &'static str },
    #[error("need at least {need} species, got {n}")]
    TooFewSpecies { n: usize, need: usize },
    #[error("predictor is constant across species; slope is not identifiable")]
    ConstantPredictor,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("observed values have zero variance")]
    ZeroVariance,
    #[error("AICc needs n > k + 1 (n = {n}, k = {k})")]
    TooFewObservations { n: usize, k: usize },
    #[error("no models to compare")]
    NoModels,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Covariance(#[from] CovError),
    #[error(transparent)]
    Optimizer(#[from] OptimError),
}

// ---------------------------------------------------------------------------
// Trait table

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    species: String,
    x: f64,
    y: f64,
}

/// Predictor and trait values per species.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraitTable {
    pub species: Vec<String>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl TraitTable {
    pub fn new(species: Vec<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self, EstimationError> {
        if species.len() != x.len() || species.len() != y.len() {
            return Err(EstimationError::Dimension(format!(
                "{} species, {} x values, {} y values",
                species.len(),
                x.len(),
                y.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (k, s) in species.iter().enumerate() {
            if !seen.insert(s.as_str()) {
                return Err(EstimationError::DuplicateSpecies(s.clone()));
            }
            for (column, v) in [("x", x[k]), ("y", y[k])] {
                if !v.is_finite() {
                    return Err(EstimationError::NonFiniteValue {
                        species: s.clone(),
                        column,
                    });
                }
            }
        }
        Ok(Self { species, x, y })
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    /// Reads `species,x,y` CSV with a mandatory header.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, EstimationError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| EstimationError::Csv(e.to_string()))?;
        let names: Vec<&str> = headers.iter().collect();
        if names != ["species", "x", "y"] {
            return Err(EstimationError::Csv(format!(
                "header must be `species,x,y`, found `{}`",
                names.join(",")
            )));
        }
        let (mut species, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for row in rdr.deserialize::<Row>() {
            let row = row.map_err(|e| EstimationError::Csv(e.to_string()))?;
            species.push(row.species);
            x.push(row.x);
            y.push(row.y);
        }
        Self::new(species, x, y)
    }

    pub fn from_path(path: &Path) -> Result<Self, EstimationError> {
        let file = std::fs::File::open(path)
            .map_err(|e| EstimationError::Io(format!("{}: {e}", path.display())))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EstimationError> {
        let mut w = csv::Writer::from_writer(writer);
        for k in 0..self.len() {
            w.serialize(Row {
                species: self.species[k].clone(),
                x: self.x[k],
                y: self.y[k],
            })
            .map_err(|e| EstimationError::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| EstimationError::Io(e.to_string()))
    }

    /// Values reordered to the tree's tip order. The species sets must match
    /// exactly.
    pub fn aligned(&self, tree: &PhyloTree) -> Result<(DVector<f64>, DVector<f64>), EstimationError> {
        let orphans: Vec<String> = self
            .species
            .iter()
            .filter(|s| tree.tip_position(s).is_none())
            .cloned()
            .collect();
        if !orphans.is_empty() {
            return Err(EstimationError::OrphanSpecies(orphans));
        }
        let index: HashMap<&str, usize> =
            self.species.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let labels = tree.tip_labels();
        let missing: Vec<String> = labels
            .iter()
            .filter(|l| !index.contains_key(*l))
            .map(|l| l.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(EstimationError::MissingSpecies(missing));
        }
        let x = DVector::from_iterator(labels.len(), labels.iter().map(|l| self.x[index[l]]));
        let y = DVector::from_iterator(labels.len(), labels.iter().map(|l| self.y[index[l]]));
        Ok((x, y))
    }
}

// ---------------------------------------------------------------------------
// Linear algebra pieces

/// `n x 2` design: a column of ones and `scale * (x_i - x_a)`.
pub fn design_matrix(x: &DVector<f64>, x_a: f64, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { scale * (x[i] - x_a) })
}

/// GLS mean and rate of the predictor under the unit-rate OU covariance:
///
/// ```text
/// x_mean  = (1' T^-1 1)^-1 1' T^-1 x
/// sigma^2 = (x - x_mean)' T^-1 (x - x_mean) / (n - 1)
/// ```
pub fn x_mle(model: &CovarianceModel<'_>, x: &DVector<f64>, alpha: f64) -> Result<(f64, f64), EstimationError> {
    let n = model.len();
    if x.len() != n {
        return Err(EstimationError::Dimension(format!("{} predictor values for {n} tips", x.len())));
    }
    if n < 2 {
        return Err(EstimationError::TooFewSpecies { n, need: 2 });
    }
    let t = model.predictor_cov(alpha, 1.0)?;
    let chol = factor_with_jitter(&t)?.cholesky;
    let ones = DVector::from_element(n, 1.0);
    let tinv_ones = chol.solve(&ones);
    let mean = tinv_ones.dot(x) / tinv_ones.dot(&ones);
    let r = x.add_scalar(-mean);
    let var = (r.dot(&chol.solve(&r)) / (n - 1) as f64).max(0.0);
    Ok((mean, var))
}

fn solve_whitened(
    chol: &Cholesky<f64, Dyn>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>, EstimationError> {
    let l = chol.l_dirty();
    let xw = l
        .solve_lower_triangular(x)
        .ok_or_else(|| EstimationError::Dimension("singular Cholesky factor".into()))?;
    let yw = l
        .solve_lower_triangular(y)
        .ok_or_else(|| EstimationError::Dimension("singular Cholesky factor".into()))?;
    least_squares(&xw, &yw)
}

/// Least squares through a QR factorization with a rank check.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, EstimationError> {
    let (n, q) = x.shape();
    if n < q {
        return Err(EstimationError::RankDeficient);
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let diag_max = (0..q).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    let cutoff = diag_max * f64::EPSILON * n.max(q) as f64 * 10.0;
    if diag_max == 0.0 || (0..q).any(|k| r[(k, k)].abs() <= cutoff) {
        return Err(EstimationError::RankDeficient);
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty).ok_or(EstimationError::RankDeficient)
}

/// Ordinary least squares `(X'X)^-1 X'y`.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, EstimationError> {
    check_shapes(x, None, y)?;
    least_squares(x, y)
}

fn check_shapes(x: &DMatrix<f64>, v: Option<&DMatrix<f64>>, y: &DVector<f64>) -> Result<(), EstimationError> {
    let n = y.len();
    if x.nrows() != n || v.is_some_and(|v| v.shape() != (n, n)) {
        return Err(EstimationError::Dimension(format!(
            "X is {}x{}, y has {n} rows{}",
            x.nrows(),
            x.ncols(),
            v.map(|v| format!(", V is {}x{}", v.nrows(), v.ncols())).unwrap_or_default()
        )));
    }
    Ok(())
}

fn cholesky(v: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, EstimationError> {
    Cholesky::new(v.clone()).ok_or(EstimationError::Covariance(CovError::NotPositiveDefinite { jitter: 0.0 }))
}

/// GLS estimate `(X' V^-1 X)^-1 X' V^-1 y`, computed by whitening with the
/// Cholesky factor of `V`.
pub fn gls_solve(x: &DMatrix<f64>, v: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, EstimationError> {
    check_shapes(x, Some(v), y)?;
    solve_whitened(&cholesky(v)?, x, y)
}

fn log_likelihood_factored(chol: &Cholesky<f64, Dyn>, residual: &DVector<f64>) -> f64 {
    let n = residual.len() as f64;
    let l = chol.l_dirty();
    let z = l.solve_lower_triangular(residual).expect("factor has a positive diagonal");
    let half_log_det: f64 = (0..residual.len()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - half_log_det - 0.5 * z.norm_squared()
}

/// Gaussian log-density of `y` with mean `X b` and covariance `V`.
pub fn log_likelihood(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    b: &DVector<f64>,
    v: &DMatrix<f64>,
) -> Result<f64, EstimationError> {
    check_shapes(x, Some(v), y)?;
    if b.len() != x.ncols() {
        return Err(EstimationError::Dimension(format!("{} coefficients for {} columns", b.len(), x.ncols())));
    }
    Ok(log_likelihood_factored(&cholesky(v)?, &(y - x * b)))
}

/// Squared Pearson correlation between observed and fitted values. A
/// constant fit explains nothing and scores 0.
pub fn r_squared(y: &[f64], fitted: &[f64]) -> Result<f64, EstimationError> {
    if y.len() != fitted.len() {
        return Err(EstimationError::Dimension(format!("{} observed, {} fitted", y.len(), fitted.len())));
    }
    if y.len() < 2 {
        return Err(EstimationError::TooFewSpecies { n: y.len(), need: 2 });
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mf = fitted.iter().sum::<f64>() / n;
    let (mut syy, mut sff, mut syf) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(fitted) {
        syy += (a - my) * (a - my);
        sff += (b - mf) * (b - mf);
        syf += (a - my) * (b - mf);
    }
    if syy == 0.0 {
        return Err(EstimationError::ZeroVariance);
    }
    if sff == 0.0 {
        return Ok(0.0);
    }
    Ok((syf * syf / (syy * sff)).min(1.0))
}

/// Small-sample corrected AIC: `-2 l + 2k + 2k(k+1)/(n-k-1)`.
pub fn aicc(log_lik: f64, k: usize, n: usize) -> Result<f64, EstimationError> {
    if n <= k + 1 {
        return Err(EstimationError::TooFewObservations { n, k });
    }
    let kf = k as f64;
    // one constant penalty keeps aicc(l) == -2 l + aicc(0) bit for bit
    let penalty = 2.0 * kf + 2.0 * kf * (kf + 1.0) / (n - k - 1) as f64;
    Ok(-2.0 * log_lik + penalty)
}

// ---------------------------------------------------------------------------
// Model hooks

pub type SlopeScaling = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type ResidualBuilder = Arc<dyn Fn(&CovarianceModel<'_>, &OUOUParams) -> DMatrix<f64> + Send + Sync>;

/// A named variant of the regression model: how the slope is scaled in the
/// design matrix (as a function of `alpha * T`) and how the residual
/// covariance is built.
#[derive(Clone)]
pub struct ModelHook {
    name: String,
    slope: SlopeScaling,
    residual: ResidualBuilder,
}

impl std::fmt::Debug for ModelHook {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelHook").field("name", &self.name).finish_non_exhaustive()
    }
}

impl ModelHook {
    pub const BUILTIN: [&'static str; 5] =
        ["ouou", "ouou-unscaled", "ouou-independent", "ouou-identity", "ouou-printed"];

    pub fn new(name: impl Into<String>, slope: SlopeScaling, residual: ResidualBuilder) -> Self {
        Self {
            name: name.into(),
            slope,
            residual,
        }
    }

    /// The full model: slope scaled by `p(alpha T)`, phylogenetic residuals.
    pub fn ouou() -> Self {
        Self::new(
            "ouou",
            Arc::new(kernel::slope_factor_unchecked),
            Arc::new(|m, p| m.residual_cov_raw(p)),
        )
    }

    /// Phylogenetic residuals but an unscaled slope.
    pub fn ouou_unscaled() -> Self {
        Self::new("ouou-unscaled", Arc::new(|_| 1.0), Arc::new(|m, p| m.residual_cov_raw(p)))
    }

    /// Scaled slope, residuals independent across species.
    pub fn ouou_independent() -> Self {
        Self::new(
            "ouou-independent",
            Arc::new(kernel::slope_factor_unchecked),
            Arc::new(|m, p| DMatrix::from_diagonal(&m.residual_cov_raw(p).diagonal())),
        )
    }

    /// Scaled slope with identity residual covariance: the GLS step becomes
    /// OLS on the scaled design.
    pub fn ouou_identity() -> Self {
        Self::new(
            "ouou-identity",
            Arc::new(kernel::slope_factor_unchecked),
            Arc::new(|m, _| DMatrix::identity(m.len(), m.len())),
        )
    }

    /// Scaled slope with the ancestral-moment shortcut for the residual
    /// covariance. Regions where that matrix is indefinite are infeasible.
    pub fn ouou_printed() -> Self {
        Self::new(
            "ouou-printed",
            Arc::new(kernel::slope_factor_unchecked),
            Arc::new(|m, p| m.residual_cov_printed(p)),
        )
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "ouou" => Some(Self::ouou()),
            "ouou-unscaled" => Some(Self::ouou_unscaled()),
            "ouou-independent" => Some(Self::ouou_independent()),
            "ouou-identity" => Some(Self::ouou_identity()),
            "ouou-printed" => Some(Self::ouou_printed()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn slope_scale(&self, u: f64) -> f64 {
        (self.slope)(u)
    }

    pub fn residual(&self, model: &CovarianceModel<'_>, params: &OUOUParams) -> DMatrix<f64> {
        (self.residual)(model, params)
    }
}

impl Default for ModelHook {
    fn default() -> Self {
        Self::ouou()
    }
}

// ---------------------------------------------------------------------------
// Fitting

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub hook: ModelHook,
    /// Outer-loop threshold on the change in `(b0, b1)`.
    pub delta: f64,
    pub max_outer: usize,
    /// Upper bound on `alpha`; `50 / T` when unset.
    pub alpha_max: Option<f64>,
    pub powell: PowellOptions,
    /// Starting `(alpha, sigma_y^2)` for the rate search.
    pub start: Option<(f64, f64)>,
    /// Holds `(alpha, sigma_y^2)` fixed and skips the rate search.
    pub fixed_rates: Option<(f64, f64)>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            hook: ModelHook::ouou(),
            delta: DEFAULT_DELTA,
            max_outer: 100,
            alpha_max: None,
            powell: PowellOptions::default(),
            start: None,
            fixed_rates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub model: String,
    pub n: usize,
    pub tree_depth: f64,
    pub b0: f64,
    pub b1: f64,
    pub alpha_hat: f64,
    pub sigma_y2_hat: f64,
    pub sigma_x2_hat: f64,
    pub x_mean_hat: f64,
    /// Slope scaling `rho(alpha_hat T)` used in the design matrix.
    pub slope_scale: f64,
    pub log_likelihood: f64,
    /// Undefined (`None`) when the trait has no variance.
    pub r_squared: Option<f64>,
    pub aicc: f64,
    pub k: usize,
    pub iterations: usize,
    pub delta_trace: Vec<f64>,
    pub converged: bool,
    pub jitter: f64,
    pub evaluations: usize,
}

impl FitReport {
    /// Fitted regression line at the tips: `b0 + b1 * rho * (x - x_mean)`.
    pub fn predict(&self, x: f64) -> f64 {
        self.b0 + self.b1 * self.slope_scale * (x - self.x_mean_hat)
    }
}

/// Search box for `(alpha, sigma_y^2)`, scaled to the tree depth and the
/// spread of the trait.
pub fn rate_box(depth: f64, y: &[f64], alpha_max: Option<f64>) -> Result<BoxDomain, EstimationError> {
    let a_hi = alpha_max.unwrap_or(50.0 / depth);
    let a_lo = 1e-6 / depth;
    if !(a_hi > a_lo) || !a_hi.is_finite() {
        return Err(EstimationError::Config(format!("alpha_max must exceed {a_lo:e}, got {a_hi}")));
    }
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let spread = if range > 0.0 { range * range } else { 1.0 };
    // at alpha_max the stationary variance sigma^2 / (2 alpha) may reach range^2
    let s_hi = 2.0 * a_hi * spread;
    Ok(BoxDomain::new(vec![a_lo, 1e-9 * s_hi], vec![a_hi, s_hi])?)
}

fn default_start(domain: &BoxDomain, depth: f64, y: &[f64]) -> (f64, f64) {
    let alpha = (1.0 / depth).clamp(domain.lower()[0], domain.upper()[0]);
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let s2 = (2.0 * alpha * var).clamp(domain.lower()[1], domain.upper()[1]);
    (alpha, s2)
}

/// Pulls a point strictly inside the box.
fn interior(domain: &BoxDomain, p: (f64, f64)) -> (f64, f64) {
    let pull = |v: f64, lo: f64, hi: f64| {
        let margin = 1e-9 * (hi - lo);
        v.clamp(lo + margin, hi - margin)
    };
    (
        pull(p.0, domain.lower()[0], domain.upper()[0]),
        pull(p.1, domain.lower()[1], domain.upper()[1]),
    )
}

/// Everything about one candidate `(alpha, sigma_y^2, b)`.
struct Evaluation {
    x_mean: f64,
    sigma_x2: f64,
    scale: f64,
    design: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

struct Problem<'a> {
    model: CovarianceModel<'a>,
    hook: &'a ModelHook,
    x: DVector<f64>,
    y: DVector<f64>,
    depth: f64,
    x_cache: RefCell<Option<(f64, (f64, f64))>>,
}

impl Problem<'_> {
    fn predictor_fit(&self, alpha: f64) -> Result<(f64, f64), EstimationError> {
        if let Some((a, v)) = *self.x_cache.borrow() {
            if a == alpha {
                return Ok(v);
            }
        }
        let v = x_mle(&self.model, &self.x, alpha)?;
        *self.x_cache.borrow_mut() = Some((alpha, v));
        Ok(v)
    }

    fn evaluate(&self, alpha: f64, sigma_y2: f64, b: &DVector<f64>) -> Result<Evaluation, EstimationError> {
        let (x_mean, sigma_x2) = self.predictor_fit(alpha)?;
        let params = OUOUParams::new(alpha, sigma_y2.max(0.0).sqrt(), sigma_x2.sqrt(), b[0], b[1], x_mean, 0.0)?;
        let scale = self.hook.slope_scale(alpha * self.depth);
        if !scale.is_finite() {
            return Err(EstimationError::Config(format!(
                "slope scaling of `{}` is not finite at {}",
                self.hook.name(),
                alpha * self.depth
            )));
        }
        let design = design_matrix(&self.x, x_mean, scale);
        let v = self.hook.residual(&self.model, &params);
        if v.shape() != (self.x.len(), self.x.len()) {
            return Err(EstimationError::Dimension(format!(
                "model `{}` built a {}x{} residual covariance",
                self.hook.name(),
                v.nrows(),
                v.ncols()
            )));
        }
        let f = factor_with_jitter(&v)?;
        Ok(Evaluation {
            x_mean,
            sigma_x2,
            scale,
            design,
            chol: f.cholesky,
            jitter: f.jitter,
        })
    }

    fn log_lik(&self, e: &Evaluation, b: &DVector<f64>) -> f64 {
        log_likelihood_factored(&e.chol, &(&self.y - &e.design * b))
    }
}

/// Fits the regression model to `traits` on an ultrametric `tree`.
///
/// Non-convergence of the outer loop is not an error: the report carries
/// `converged = false` and the last iterate.
pub fn fit_ouou(tree: &PhyloTree, traits: &TraitTable, config: &FitConfig) -> Result<FitReport, EstimationError> {
    if !(config.delta > 0.0) || config.max_outer == 0 {
        return Err(EstimationError::Config("delta must be positive and max_outer at least 1".into()));
    }
    let model = CovarianceModel::new(tree)?;
    let (x, y) = traits.aligned(tree)?;
    let n = x.len();
    if n < 3 {
        return Err(EstimationError::TooFewSpecies { n, need: 3 });
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(EstimationError::ConstantPredictor);
    }
    let depth = model.depth();
    let problem = Problem {
        model,
        hook: &config.hook,
        x,
        y,
        depth,
        x_cache: RefCell::new(None),
    };
    let domain = rate_box(depth, problem.y.as_slice(), config.alpha_max)?;

    // Step 1: OLS on the centred, unscaled predictor
    let x_bar = problem.x.mean();
    let mut b = ols(&design_matrix(&problem.x, x_bar, 1.0), &problem.y)?;

    let mut rates = match config.fixed_rates {
        Some((a, s)) => {
            if !(a > 0.0 && a.is_finite() && s >= 0.0 && s.is_finite()) {
                return Err(EstimationError::Config(format!("fixed rates ({a}, {s}) out of range")));
            }
            (a, s)
        }
        None => interior(&domain, config.start.unwrap_or_else(|| default_start(&domain, depth, problem.y.as_slice()))),
    };
    let mut delta_trace = Vec::new();
    let mut evaluations = 0;
    let mut converged = false;
    while delta_trace.len() < config.max_outer {
        // Step 2: rates maximizing the likelihood with b held fixed
        if config.fixed_rates.is_none() {
            let failure = RefCell::new(None);
            let objective = |p: &[f64]| match problem.evaluate(p[0], p[1], &b) {
                Ok(e) => -problem.log_lik(&e, &b),
                Err(EstimationError::Covariance(CovError::NotPositiveDefinite { .. })) => f64::INFINITY,
                Err(e) => {
                    *failure.borrow_mut() = Some(e);
                    f64::NAN
                }
            };
            let start = interior(&domain, rates);
            let result = optimizer::minimize_powell(objective, &[start.0, start.1], &domain, &config.powell);
            if let Some(e) = failure.into_inner() {
                return Err(e);
            }
            let result = result?;
            evaluations += result.evaluations;
            rates = (result.point[0], result.point[1]);
        }
        // Step 3: GLS update
        let e = problem.evaluate(rates.0, rates.1, &b)?;
        let b_new = solve_whitened(&e.chol, &e.design, &problem.y)?;
        // Step 4
        let delta = (&b_new - &b).norm();
        delta_trace.push(delta);
        b = b_new;
        if delta < config.delta {
            converged = true;
            break;
        }
    }

    let e = problem.evaluate(rates.0, rates.1, &b)?;
    let log_lik = problem.log_lik(&e, &b);
    let fitted = &e.design * &b;
    let r2 = match r_squared(problem.y.as_slice(), fitted.as_slice()) {
        Ok(v) => Some(v),
        Err(EstimationError::ZeroVariance) => None,
        Err(e) => return Err(e),
    };
    Ok(FitReport {
        model: config.hook.name().to_string(),
        n,
        tree_depth: depth,
        b0: b[0],
        b1: b[1],
        alpha_hat: rates.0,
        sigma_y2_hat: rates.1,
        sigma_x2_hat: e.sigma_x2,
        x_mean_hat: e.x_mean,
        slope_scale: e.scale,
        log_likelihood: log_lik,
        r_squared: r2,
        aicc: aicc(log_lik, PARAMETER_COUNT, n)?,
        k: PARAMETER_COUNT,
        iterations: delta_trace.len(),
        delta_trace,
        converged,
        jitter: e.jitter,
        evaluations,
    })
}

/// Repeats the fit from the default start plus `k` random starts
/// (log-uniform in the rate box) and keeps the highest likelihood,
/// preferring converged fits.
pub fn fit_multistart(
    tree: &PhyloTree,
    traits: &TraitTable,
    config: &FitConfig,
    k: usize,
    seed: u64,
) -> Result<FitReport, EstimationError> {
    let depth = CovarianceModel::new(tree)?.depth();
    let domain = rate_box(depth, &traits.y, config.alpha_max)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let log_uniform = |rng: &mut Xoshiro256PlusPlus, axis: usize| {
        let (lo, hi) = (domain.lower()[axis].ln(), domain.upper()[axis].ln());
        rng.gen_range(lo..hi).exp()
    };
    let mut starts = vec![config.start];
    for _ in 0..k {
        let a = log_uniform(&mut rng, 0);
        let s = log_uniform(&mut rng, 1);
        starts.push(Some((a, s)));
    }
    let fits: Vec<Result<FitReport, EstimationError>> = starts
        .into_par_iter()
        .map(|start| {
            let cfg = FitConfig { start, ..config.clone() };
            fit_ouou(tree, traits, &cfg)
        })
        .collect();
    let mut best: Option<FitReport> = None;
    let mut first_error = None;
    for fit in fits {
        match fit {
            Ok(r) => {
                let better = match &best {
                    None => true,
                    Some(b) => (r.converged, r.log_likelihood) > (b.converged, b.log_likelihood),
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_error.expect("at least one start"))
}

// ---------------------------------------------------------------------------
// Model comparison

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub model: String,
    pub b0: Option<f64>,
    pub b1: Option<f64>,
    pub slope_scale: Option<f64>,
    pub x_mean: Option<f64>,
    pub r_squared: Option<f64>,
    pub aicc: Option<f64>,
    pub delta_aicc: Option<f64>,
    /// Within 2 AICc units of the best model.
    pub co_supported: bool,
    pub converged: bool,
    pub error: Option<String>,
}

/// Fits every hook and ranks them by AICc. A model whose fit fails gets a
/// row with its error and takes no part in the ranking.
pub fn compare_models(
    tree: &PhyloTree,
    traits: &TraitTable,
    hooks: &[ModelHook],
    config: &FitConfig,
) -> Result<Vec<ComparisonRow>, EstimationError> {
    if hooks.is_empty() {
        return Err(EstimationError::NoModels);
    }
    let fits: Vec<Result<FitReport, EstimationError>> = hooks
        .par_iter()
        .map(|hook| {
            let cfg = FitConfig {
                hook: hook.clone(),
                ..config.clone()
            };
            fit_ouou(tree, traits, &cfg)
        })
        .collect();
    let best = fits
        .iter()
        .filter_map(|f| f.as_ref().ok().map(|r| r.aicc))
        .fold(f64::INFINITY, f64::min);
    Ok(hooks
        .iter()
        .zip(fits)
        .map(|(hook, fit)| match fit {
            Ok(r) => {
                let delta = r.aicc - best;
                ComparisonRow {
                    model: r.model,
                    b0: Some(r.b0),
                    b1: Some(r.b1),
                    slope_scale: Some(r.slope_scale),
                    x_mean: Some(r.x_mean_hat),
                    r_squared: r.r_squared,
                    aicc: Some(r.aicc),
                    delta_aicc: Some(delta),
                    co_supported: delta <= 2.0,
                    converged: r.converged,
                    error: None,
                }
            }
            Err(e) => ComparisonRow {
                model: hook.name().to_string(),
                b0: None,
                b1: None,
                slope_scale: None,
                x_mean: None,
                r_squared: None,
                aicc: None,
                delta_aicc: None,
                co_supported: false,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect())
}
