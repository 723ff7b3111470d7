//! Closed-form moments of the coupled trait/optimum OU system.
//!
//! Along a single lineage the optimum and the trait follow
//!
//! ```text
//! d theta = -alpha * theta dt       + sigma_theta dW_theta
//! d y     = -alpha * (y - theta) dt + sigma_y     dW_y
//! ```
//!
//! with independent driving noises and a shared rate `alpha > 0`. Every
//! function here is a pure function of its inputs. Expressions that cancel
//! catastrophically for small `alpha * t` switch to power series.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("`{name}` must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("`{name}` must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("rate of adaptation must be > 0, got {0}")]
    NonPositiveAlpha(f64),
}

fn finite(name: &'static str, value: f64) -> Result<f64, KernelError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(KernelError::NonFinite { name, value })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<f64, KernelError> {
    finite(name, value)?;
    if value < 0.0 {
        Err(KernelError::Negative { name, value })
    } else {
        Ok(value)
    }
}

fn positive_alpha(alpha: f64) -> Result<f64, KernelError> {
    finite("alpha", alpha)?;
    if alpha > 0.0 {
        Ok(alpha)
    } else {
        Err(KernelError::NonPositiveAlpha(alpha))
    }
}

/// Below this `u` the slope factor uses its Taylor series.
pub const P_SERIES_SWITCH: f64 = 1e-4;

/// Below this `u` the covariance shape functions use their Taylor series.
const SHAPE_SERIES_SWITCH: f64 = 0.1;

/// Attenuation of the optimal slope after elapsed `u = alpha * t`:
///
/// ```text
/// p(u) = (1 - e^{-2u} - u e^{-2u}) / (2 (1 - e^{-2u}))
///      = 1/2 - u / (2 (e^{2u} - 1))
/// ```
///
/// `p(0) = 1/4`, `p` increases monotonically to `1/2`.
pub fn slope_factor_p(u: f64) -> Result<f64, KernelError> {
    non_negative("u", u)?;
    Ok(slope_factor_unchecked(u))
}

pub(crate) fn slope_factor_unchecked(u: f64) -> f64 {
    if u < P_SERIES_SWITCH {
        // 1/4 + u/4 - u^2/12 + u^4/180
        let u2 = u * u;
        0.25 + 0.25 * u - u2 / 12.0 + u2 * u2 / 180.0
    } else {
        0.5 - 0.5 * u / (2.0 * u).exp_m1()
    }
}

/// Expected trait at elapsed `u = alpha * t` when the predictor has not moved
/// from its ancestral value: `(b0 + b1 x_a)(1 - e^{-u}) + y_a e^{-u}`.
pub fn intercept_q(u: f64, b0: f64, b1: f64, x_a: f64, y_a: f64) -> Result<f64, KernelError> {
    non_negative("u", u)?;
    let theta_a = finite("b0", b0)? + finite("b1", b1)? * finite("x_a", x_a)?;
    finite("y_a", y_a)?;
    Ok(theta_a * -(-u).exp_m1() + y_a * (-u).exp())
}

/// `(1 - e^{-2u}) / (2u)`, equal to 1 at `u = 0`.
fn decay_ratio(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else {
        -(-2.0 * u).exp_m1() / (2.0 * u)
    }
}

/// `(1 - e^{-2u}) / (4u) - e^{-2u} / 2`, so that `Cov[y, theta] = sigma_theta^2 t * c(u)`.
fn cov_shape(u: f64) -> f64 {
    if u < SHAPE_SERIES_SWITCH {
        // sum_k (-1)^{k+1} 2^{k-1} k / (k+1)! u^k
        let mut sum = 0.0;
        let mut pow = 1.0; // 2^{k-1} u^k / (k+1)!, built incrementally
        for k in 1..=16u32 {
            pow *= if k == 1 { u / 2.0 } else { 2.0 * u / (k as f64 + 1.0) };
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sum += sign * k as f64 * pow;
        }
        sum
    } else {
        let e = (-2.0 * u).exp();
        -(-2.0 * u).exp_m1() / (4.0 * u) - 0.5 * e
    }
}

/// `(1 - e^{-2u}) / (4u) - (1 + u) e^{-2u} / 2`, the optimum-driven part of
/// `Var[y] / (sigma_theta^2 t)`.
fn var_y_shape(u: f64) -> f64 {
    if u < SHAPE_SERIES_SWITCH {
        // sum_{k>=2} (-1)^k 2^{k-2} k (k-1) / (k+1)! u^k
        let mut sum = 0.0;
        let mut pow = u / 4.0; // 2^{k-2} u^k / (k+1)! at k = 1
        for k in 2..=16u32 {
            pow *= 2.0 * u / (k as f64 + 1.0);
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * (k * (k - 1)) as f64 * pow;
        }
        sum
    } else {
        let e = (-2.0 * u).exp();
        -(-2.0 * u).exp_m1() / (4.0 * u) - 0.5 * (1.0 + u) * e
    }
}

/// Variance/covariance of the lineage state after elapsed time `t` from a
/// fixed start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarCov {
    pub var_theta: f64,
    pub cov_y_theta: f64,
    pub var_y: f64,
}

pub(crate) fn var_cov_unchecked(alpha: f64, sigma_y2: f64, sigma_theta2: f64, t: f64) -> VarCov {
    let u = alpha * t;
    let d = decay_ratio(u);
    VarCov {
        var_theta: sigma_theta2 * t * d,
        cov_y_theta: sigma_theta2 * t * cov_shape(u),
        var_y: sigma_y2 * t * d + sigma_theta2 * t * var_y_shape(u),
    }
}

/// Parameters of a single lineage: the rate, the two diffusions and the
/// fixed starting state `(y0, theta0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineageParams {
    pub alpha: f64,
    pub sigma_y: f64,
    pub sigma_theta: f64,
    pub y0: f64,
    pub theta0: f64,
}

/// All closed-form quantities at one time point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormMoments {
    pub mean_theta: f64,
    pub second_theta: f64,
    pub mean_y: f64,
    pub second_y: f64,
    pub cross_y_theta: f64,
    pub var_theta: f64,
    pub cov_y_theta: f64,
    pub var_y: f64,
}

impl LineageParams {
    pub fn new(alpha: f64, sigma_y: f64, sigma_theta: f64, y0: f64, theta0: f64) -> Result<Self, KernelError> {
        let p = Self {
            alpha,
            sigma_y,
            sigma_theta,
            y0,
            theta0,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), KernelError> {
        positive_alpha(self.alpha)?;
        non_negative("sigma_y", self.sigma_y)?;
        non_negative("sigma_theta", self.sigma_theta)?;
        finite("y0", self.y0)?;
        finite("theta0", self.theta0)?;
        Ok(())
    }

    fn checked_time(&self, t: f64) -> Result<f64, KernelError> {
        self.check()?;
        non_negative("t", t)
    }

    /// `(E[theta_t], E[theta_t^2])`.
    pub fn theta_moments(&self, t: f64) -> Result<(f64, f64), KernelError> {
        let t = self.checked_time(t)?;
        let (a, s2, th) = (self.alpha, self.sigma_theta.powi(2), self.theta0);
        let e1 = (-a * t).exp();
        let mean = th * e1;
        let second = s2 * t * decay_ratio(a * t) + th * th * e1 * e1;
        Ok((mean, second))
    }

    /// `E[y_t theta_t] = s/(4a) + (y0 th0 - s/(4a)) e^{-2at} + (a th0^2 - s/2) t e^{-2at}`
    /// with `s = sigma_theta^2`.
    pub fn cross_moment(&self, t: f64) -> Result<f64, KernelError> {
        let t = self.checked_time(t)?;
        let (a, s2) = (self.alpha, self.sigma_theta.powi(2));
        let (y0, th) = (self.y0, self.theta0);
        let e2 = (-2.0 * a * t).exp();
        let stat = s2 / (4.0 * a);
        Ok(stat + (y0 * th - stat) * e2 + (th * th * a - 0.5 * s2) * t * e2)
    }

    /// `(E[y_t], E[y_t^2])`.
    ///
    /// The second moment solves `dE[y^2]/dt = sigma_y^2 - 2a E[y^2] + 2a E[y theta]`:
    ///
    /// ```text
    /// E[y^2] = A + (a^2 th0^2 - a s/2) t^2 e^{-2at} + (2a y0 th0 - s/2) t e^{-2at}
    ///            + (y0^2 - A) e^{-2at},          A = sigma_y^2/(2a) + s/(4a)
    /// ```
    ///
    /// Note the `t^2` coefficient carries `s = sigma_theta^2`; a first-power
    /// `sigma_theta` there is dimensionally inconsistent and does not solve
    /// the ODE.
    pub fn y_moments(&self, t: f64) -> Result<(f64, f64), KernelError> {
        let t = self.checked_time(t)?;
        let (a, s2, sy2) = (self.alpha, self.sigma_theta.powi(2), self.sigma_y.powi(2));
        let (y0, th) = (self.y0, self.theta0);
        let e1 = (-a * t).exp();
        let e2 = e1 * e1;
        let mean = a * th * t * e1 + y0 * e1;
        let stat = sy2 / (2.0 * a) + s2 / (4.0 * a);
        let second = stat
            + (a * a * th * th - 0.5 * a * s2) * t * t * e2
            + (2.0 * a * y0 * th - 0.5 * s2) * t * e2
            + (y0 * y0 - stat) * e2;
        Ok((mean, second))
    }

    /// `Var[theta_t]`, `Cov[y_t, theta_t]` and `Var[y_t]`.
    pub fn var_cov(&self, t: f64) -> Result<VarCov, KernelError> {
        let t = self.checked_time(t)?;
        Ok(var_cov_unchecked(
            self.alpha,
            self.sigma_y.powi(2),
            self.sigma_theta.powi(2),
            t,
        ))
    }

    pub fn moments(&self, t: f64) -> Result<ClosedFormMoments, KernelError> {
        let (mean_theta, second_theta) = self.theta_moments(t)?;
        let (mean_y, second_y) = self.y_moments(t)?;
        let cross_y_theta = self.cross_moment(t)?;
        let vc = self.var_cov(t)?;
        Ok(ClosedFormMoments {
            mean_theta,
            second_theta,
            mean_y,
            second_y,
            cross_y_theta,
            var_theta: vc.var_theta,
            cov_y_theta: vc.cov_y_theta,
            var_y: vc.var_y,
        })
    }
}

/// Full parameter set of the coupled model.
///
/// `sigma_theta = |b1| sigma_x` and `theta_a = b0 + b1 x_a` are derived on
/// demand and can never drift from `b1`, `sigma_x` and `x_a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OUOUParams {
    alpha: f64,
    sigma_y: f64,
    sigma_x: f64,
    b0: f64,
    b1: f64,
    x_a: f64,
    y_a: f64,
}

impl OUOUParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        alpha: f64,
        sigma_y: f64,
        sigma_x: f64,
        b0: f64,
        b1: f64,
        x_a: f64,
        y_a: f64,
    ) -> Result<Self, KernelError> {
        positive_alpha(alpha)?;
        non_negative("sigma_y", sigma_y)?;
        non_negative("sigma_x", sigma_x)?;
        finite("b0", b0)?;
        finite("b1", b1)?;
        finite("x_a", x_a)?;
        finite("y_a", y_a)?;
        Ok(Self {
            alpha,
            sigma_y,
            sigma_x,
            b0,
            b1,
            x_a,
            y_a,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }
    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }
    pub fn b0(&self) -> f64 {
        self.b0
    }
    pub fn b1(&self) -> f64 {
        self.b1
    }
    pub fn x_a(&self) -> f64 {
        self.x_a
    }
    pub fn y_a(&self) -> f64 {
        self.y_a
    }

    pub fn sigma_theta(&self) -> f64 {
        self.b1.abs() * self.sigma_x
    }

    pub fn theta_a(&self) -> f64 {
        self.b0 + self.b1 * self.x_a
    }

    pub fn with_alpha(self, alpha: f64) -> Result<Self, KernelError> {
        Self::new(alpha, self.sigma_y, self.sigma_x, self.b0, self.b1, self.x_a, self.y_a)
    }

    pub fn with_sigmas(self, sigma_y: f64, sigma_x: f64) -> Result<Self, KernelError> {
        Self::new(self.alpha, sigma_y, sigma_x, self.b0, self.b1, self.x_a, self.y_a)
    }

    pub fn with_regression(self, b0: f64, b1: f64) -> Result<Self, KernelError> {
        Self::new(self.alpha, self.sigma_y, self.sigma_x, b0, b1, self.x_a, self.y_a)
    }

    pub fn with_ancestors(self, x_a: f64, y_a: f64) -> Result<Self, KernelError> {
        Self::new(self.alpha, self.sigma_y, self.sigma_x, self.b0, self.b1, x_a, y_a)
    }

    /// The `(y, theta)` lineage started from the ancestral state.
    pub fn lineage(&self) -> LineageParams {
        LineageParams {
            alpha: self.alpha,
            sigma_y: self.sigma_y,
            sigma_theta: self.sigma_theta(),
            y0: self.y_a,
            theta0: self.theta_a(),
        }
    }
}

/// `E[y_t | x_t] = q(alpha t) + p(alpha t) b1 (x - x_a)`.
pub fn evolutionary_regression(params: &OUOUParams, t: f64, x: f64) -> Result<f64, KernelError> {
    let u = params.alpha * non_negative("t", t)?;
    finite("x", x)?;
    let q = intercept_q(u, params.b0, params.b1, params.x_a, params.y_a)?;
    Ok(q + slope_factor_p(u)? * params.b1 * (x - params.x_a))
}

/// Coefficients `(beta0, beta1)` of `E[y_t | theta_t] = beta0 + beta1 theta_t`:
/// `beta1 = p(alpha t)`, `beta0 = alpha theta0 t e^{-alpha t} + y0 e^{-alpha t} - beta1 theta0`.
pub fn regression_on_optimum(params: &OUOUParams, t: f64) -> Result<(f64, f64), KernelError> {
    let t = non_negative("t", t)?;
    let (a, th, y0) = (params.alpha, params.theta_a(), params.y_a);
    let beta1 = slope_factor_p(a * t)?;
    let e1 = (-a * t).exp();
    Ok((a * th * t * e1 + y0 * e1 - beta1 * th, beta1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Extended-precision references (tests/oracles/derive_constants.py).
    const P_ONE: f64 = 0.421_741_178_625_167_17;
    const P_TINY: f64 = 0.250_000_000_025;
    const P_SWITCH: f64 = 0.250_024_999_166_666_667_22;
    const Q_ONE: f64 = 1.264_241_117_657_115_4;
    const BETA0_CANONICAL: f64 = 0.314_017_703_717_717_47;
    const ODE_SECOND_Y: f64 = 1.054_504_387_282_378_6;
    const ODE_SECOND_Y_GENERIC: f64 = 0.687_371_709_808_344_79;

    fn canonical() -> LineageParams {
        LineageParams::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn slope_factor_values() {
        assert!(close(slope_factor_p(1.0).unwrap(), 0.421742, 1e-6));
        assert!(close(slope_factor_p(1.0).unwrap(), P_ONE, 1e-15));
        assert!(close(slope_factor_p(1e-10).unwrap(), 0.25, 1e-6));
        assert!(close(slope_factor_p(1e-10).unwrap(), P_TINY, 1e-16));
        assert!(close(slope_factor_p(50.0).unwrap(), 0.5, 1e-12));
        assert_eq!(slope_factor_p(0.0).unwrap(), 0.25);
        assert_eq!(slope_factor_p(1e6).unwrap(), 0.5);
        assert!(slope_factor_p(-1.0).is_err());
        assert!(slope_factor_p(f64::NAN).is_err());
        assert!(slope_factor_p(f64::INFINITY).is_err());
    }

    #[test]
    fn slope_factor_branches_agree_at_switch() {
        let below = slope_factor_unchecked(P_SERIES_SWITCH * (1.0 - 1e-12));
        let above = slope_factor_unchecked(P_SERIES_SWITCH);
        assert!((below - above).abs() < 1e-10);
        assert!((above - P_SWITCH).abs() < 1e-15);
    }

    #[test]
    fn intercept_values() {
        assert_eq!(intercept_q(0.0, 4.0, -2.0, 1.5, 3.0).unwrap(), 3.0);
        assert!(close(intercept_q(100.0, 1.0, 2.0, 0.5, -7.0).unwrap(), 2.0, 1e-12));
        assert!(close(intercept_q(1.0, 0.0, 1.0, 2.0, 0.0).unwrap(), 1.264241, 1e-6));
        assert!(close(intercept_q(1.0, 0.0, 1.0, 2.0, 0.0).unwrap(), Q_ONE, 1e-15));
        assert!(intercept_q(1.0, f64::NAN, 1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn evolutionary_regression_examples() {
        let p = OUOUParams::new(0.8, 0.3, 1.0, 0.4, 1.7, 0.6, -1.2).unwrap();
        let q = intercept_q(0.8 * 2.5, 0.4, 1.7, 0.6, -1.2).unwrap();
        assert!(close(evolutionary_regression(&p, 2.5, 0.6).unwrap(), q, 1e-15));
        let at0 = evolutionary_regression(&p, 0.0, 2.6).unwrap();
        assert!(close(at0, -1.2 + 0.25 * 1.7 * 2.0, 1e-15));
        let unit = OUOUParams::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        assert!(close(evolutionary_regression(&unit, 1.0, 1.0).unwrap(), 0.421742, 1e-6));
        assert!(evolutionary_regression(&unit, -1.0, 1.0).is_err());
    }

    #[test]
    fn regression_on_optimum_examples() {
        // theta_a = 0: beta0 = y0 e^{-at}
        let p = OUOUParams::new(1.3, 0.2, 0.5, 0.0, 2.0, 0.0, 0.7).unwrap();
        let (b0, b1) = regression_on_optimum(&p, 0.9).unwrap();
        assert!(close(b0, 0.7 * (-1.3f64 * 0.9).exp(), 1e-15));
        assert!(close(b1, slope_factor_p(1.3 * 0.9).unwrap(), 1e-15));
        // theta0 = y0 = 1, alpha = t = 1
        let p = OUOUParams::new(1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let (b0, b1) = regression_on_optimum(&p, 1.0).unwrap();
        assert!(close(b1, 0.421742, 1e-6));
        assert!(close(b0, 0.314017, 1e-6));
        assert!(close(b0, BETA0_CANONICAL, 1e-15));
        let (b0, b1) = regression_on_optimum(&p, 200.0).unwrap();
        assert!(close(b1, 0.5, 1e-15) && close(b0, -0.5, 1e-15));
    }

    #[test]
    fn theta_moment_examples() {
        let l = LineageParams::new(0.7, 0.4, 1.3, -0.5, 2.0).unwrap();
        assert_eq!(l.theta_moments(0.0).unwrap(), (2.0, 4.0));
        let (m, s) = l.theta_moments(1e3).unwrap();
        assert!(close(m, 0.0, 1e-15) && close(s, 1.69 / 1.4, 1e-14));
        let (m, s) = canonical().theta_moments(1.0).unwrap();
        assert!(close(m, 0.367879, 1e-6) && close(s, 0.567668, 1e-6));
    }

    #[test]
    fn cross_moment_examples() {
        let l = LineageParams::new(0.7, 0.4, 1.3, -0.5, 2.0).unwrap();
        assert!(close(l.cross_moment(0.0).unwrap(), -1.0, 1e-15));
        assert!(close(l.cross_moment(1e3).unwrap(), 1.69 / 2.8, 1e-14));
        assert!(close(canonical().cross_moment(1.0).unwrap(), 0.419169, 1e-6));
    }

    #[test]
    fn y_moment_examples() {
        let l = LineageParams::new(0.7, 0.4, 1.3, -0.5, 2.0).unwrap();
        assert_eq!(l.y_moments(0.0).unwrap(), (-0.5, 0.25));
        let (m, s) = l.y_moments(1e3).unwrap();
        assert!(close(m, 0.0, 1e-15) && close(s, 0.16 / 1.4 + 1.69 / 2.8, 1e-14));
        let l1 = LineageParams::new(1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        assert!(close(l1.y_moments(1.0).unwrap().0, 0.367879, 1e-6));
        // ODE-integrated second moments (distinguishes sigma_theta from sigma_theta^2)
        assert!(close(canonical().y_moments(1.0).unwrap().1, ODE_SECOND_Y, 1e-14));
        assert!(close(l.y_moments(1.7).unwrap().1, ODE_SECOND_Y_GENERIC, 1e-14));
    }

    #[test]
    fn var_cov_examples() {
        let l = LineageParams::new(0.7, 0.4, 1.3, -0.5, 2.0).unwrap();
        let z = l.var_cov(0.0).unwrap();
        assert_eq!((z.var_theta, z.cov_y_theta, z.var_y), (0.0, 0.0, 0.0));
        let s = l.var_cov(1e3).unwrap();
        assert!(close(s.var_theta, 1.69 / 1.4, 1e-14));
        assert!(close(s.cov_y_theta, 1.69 / 2.8, 1e-14));
        assert!(close(s.var_y, 0.16 / 1.4 + 1.69 / 2.8, 1e-14));
        let c = canonical().var_cov(1.0).unwrap();
        assert!(close(c.var_theta, 0.432332, 1e-6));
        assert!(close(c.cov_y_theta, 0.148499, 1e-6));
        assert!(close(c.var_y, 0.513163, 1e-6));
    }

    #[test]
    fn series_and_closed_forms_agree_at_switch() {
        let u = SHAPE_SERIES_SWITCH;
        let e = (-2.0 * u).exp();
        let cov_direct = -(-2.0 * u).exp_m1() / (4.0 * u) - 0.5 * e;
        let vy_direct = -(-2.0 * u).exp_m1() / (4.0 * u) - 0.5 * (1.0 + u) * e;
        let below = u * (1.0 - 1e-15);
        assert!(((cov_shape(below) - cov_direct) / cov_direct).abs() < 1e-12);
        assert!(((var_y_shape(below) - vy_direct) / vy_direct).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_is_deterministic() {
        let l = LineageParams::new(0.9, 0.0, 0.0, 2.0, -1.0).unwrap();
        for &t in &[0.0, 0.3, 1.0, 7.0] {
            let vc = l.var_cov(t).unwrap();
            assert_eq!((vc.var_theta, vc.cov_y_theta, vc.var_y), (0.0, 0.0, 0.0));
            // y' = -a (y - theta0 e^{-at})  =>  y = (y0 + a theta0 t) e^{-at}
            let ode = (2.0 + 0.9 * -1.0 * t) * (-0.9 * t).exp();
            assert!(close(l.y_moments(t).unwrap().0, ode, 1e-15));
        }
    }

    #[test]
    fn params_maintain_derived_fields() {
        let p = OUOUParams::new(1.0, 0.3, 2.0, 1.0, -0.5, 4.0, 0.0).unwrap();
        assert_eq!(p.sigma_theta(), 1.0);
        assert_eq!(p.theta_a(), -1.0);
        let p = p.with_regression(0.0, 3.0).unwrap();
        assert_eq!(p.sigma_theta(), 6.0);
        assert_eq!(p.theta_a(), 12.0);
        assert!(OUOUParams::new(0.0, 0.3, 2.0, 1.0, -0.5, 4.0, 0.0).is_err());
        assert!(OUOUParams::new(1.0, -0.3, 2.0, 1.0, -0.5, 4.0, 0.0).is_err());
        assert!(p.with_alpha(-2.0).is_err());
    }

    fn lineage_strategy() -> impl Strategy<Value = (LineageParams, f64)> {
        (0.05f64..5.0, 0.0f64..2.0, 0.0f64..2.0, -3.0f64..3.0, -3.0f64..3.0, 0.0f64..10.0).prop_map(
            |(a, sy, st, y0, th, ut)| (LineageParams::new(a, sy, st, y0, th).unwrap(), ut / a),
        )
    }

    proptest! {
        #[test]
        fn slope_factor_in_range(u in 0.0f64..1e3) {
            let p = slope_factor_p(u).unwrap();
            prop_assert!((0.25..=0.5).contains(&p));
        }

        #[test]
        fn cauchy_schwarz((l, t) in lineage_strategy()) {
            let vc = l.var_cov(t).unwrap();
            prop_assert!(vc.cov_y_theta.powi(2) <= vc.var_theta * vc.var_y * (1.0 + 1e-12) + 1e-300);
            prop_assert!(vc.var_theta >= 0.0 && vc.var_y >= 0.0);
        }
    }
}
