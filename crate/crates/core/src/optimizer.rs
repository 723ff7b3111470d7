//! Derivative-free minimization inside a box.
//!
//! [`minimize_powell`] runs Powell's conjugate-direction method. Each line
//! search is bracketed by golden-ratio expansion clipped to the box, then
//! refined by Brent's parabolic/golden-section search, so the objective is
//! never evaluated outside the bounds.
//!
//! An objective may return `+inf` to mark a point as infeasible; such points
//! simply lose every comparison. NaN and `-inf` abort the search.

use thiserror::Error;

const GOLDEN: f64 = 1.618_033_988_749_895;
const CGOLD: f64 = 0.381_966_011_250_105_1;

fn admissible(v: f64) -> bool {
    v.is_finite() || v == f64::INFINITY
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("objective is not finite ({value}) at {at:?}")]
    NonFinite { at: Vec<f64>, value: f64 },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("start point {0:?} is not strictly inside the box")]
    StartOutsideBox(Vec<f64>),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, OptimError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(OptimError::InvalidBox("bounds must be non-empty and equal length".into()));
        }
        for (k, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(OptimError::InvalidBox(format!(
                    "coordinate {k}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    fn strictly_contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&lo, &hi))| v > lo && v < hi)
    }

    /// Range of `t` keeping `x + t dir` inside the box.
    fn feasible_steps(&self, x: &[f64], dir: &[f64]) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..x.len() {
            if dir[k] == 0.0 {
                continue;
            }
            let a = (self.lower[k] - x[k]) / dir[k];
            let b = (self.upper[k] - x[k]) / dir[k];
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            lo = lo.max(a);
            hi = hi.min(b);
        }
        (lo.min(0.0), hi.max(0.0))
    }

    /// Projects onto the box (guards against round-off at the bounds).
    fn clamp(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[k], self.upper[k]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowellOptions {
    /// Stop when a cycle lowers the objective by less than `tol * (|f| + tol)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Line-search interval width, relative to the box extent along the line.
    pub line_tol: f64,
}

impl Default for PowellOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            line_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub point: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub cycles: usize,
    pub converged: bool,
    /// Objective at the end of each cycle.
    pub trace: Vec<f64>,
}

/// Brent's method on `[a, b]`, optionally seeded with a known interior point.
/// Returns once the remaining interval is narrower than `tol`.
fn brent<F>(f: &mut F, a: f64, b: f64, seed: Option<(f64, f64)>, tol: f64) -> Result<(f64, f64), f64>
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = if a < b { (a, b) } else { (b, a) };
    let eval = |f: &mut F, x: f64| {
        let v = f(x);
        if admissible(v) {
            Ok(v)
        } else {
            Err(x)
        }
    };
    let (mut x, mut fx) = match seed {
        Some((x, fx)) if x > a && x < b => (x, fx),
        _ => {
            let x = a + CGOLD * (b - a);
            (x, eval(f, x)?)
        }
    };
    let (mut w, mut fw, mut v, mut fv) = (x, fx, x, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    // |x - xm| <= 2 tol1 - (b - a)/2 guarantees b - a <= 4 tol1
    let tol1 = 0.25 * tol;
    for _ in 0..500 {
        let xm = 0.5 * (a + b);
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = eval(f, u)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv, w, fw, x, fx) = (w, fw, x, fx, u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv, w, fw) = (w, fw, u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    Ok((x, fx))
}

/// Minimizes a scalar function on `[lo, hi]` to an interval width below `tol`.
pub fn line_minimize<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64), OptimError>
where
    F: FnMut(f64) -> f64,
{
    if !(tol > 0.0) {
        return Err(OptimError::InvalidTolerance(tol));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(OptimError::InvalidBox(format!("bracket [{lo}, {hi}]")));
    }
    let mut last = f64::NAN;
    brent(
        &mut |x| {
            last = f(x);
            if last.is_finite() {
                last
            } else {
                f64::NAN
            }
        },
        lo,
        hi,
        None,
        tol,
    )
    .map_err(|x| OptimError::NonFinite { at: vec![x], value: last })
}

struct Counted<'a, F> {
    f: &'a mut F,
    evaluations: usize,
    last_bad: Option<(Vec<f64>, f64)>,
}

impl<F> Counted<'_, F>
where
    F: FnMut(&[f64]) -> f64,
{
    fn call(&mut self, x: &[f64]) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x);
        if !admissible(v) {
            self.last_bad = Some((x.to_vec(), v));
        }
        v
    }

    fn fail(&mut self) -> OptimError {
        let (at, value) = self.last_bad.take().unwrap_or((Vec::new(), f64::NAN));
        OptimError::NonFinite { at, value }
    }
}

/// Minimizes along `dir` from `x` (value `fx`), updating both in place.
fn line_search<F>(
    obj: &mut Counted<'_, F>,
    domain: &BoxDomain,
    x: &mut Vec<f64>,
    fx: &mut f64,
    dir: &[f64],
    line_tol: f64,
) -> Result<(), OptimError>
where
    F: FnMut(&[f64]) -> f64,
{
    let (tmin, tmax) = domain.feasible_steps(x, dir);
    let extent = tmax - tmin;
    if !(extent > 0.0) {
        return Ok(());
    }
    let base = x.clone();
    let point = |t: f64| {
        let mut p: Vec<f64> = base.iter().zip(dir).map(|(b, d)| b + t * d).collect();
        domain.clamp(&mut p);
        p
    };
    let f0 = *fx;
    let step = 0.1 * extent;

    // Best point seen so far, including bracket ends that Brent never revisits.
    let mut best = (0.0, f0);
    let mut eval = |obj: &mut Counted<'_, F>, t: f64| -> Result<f64, OptimError> {
        let v = obj.call(&point(t));
        if !admissible(v) {
            return Err(obj.fail());
        }
        if v < best.1 {
            best = (t, v);
        }
        Ok(v)
    };

    let mut bracket: Option<(f64, f64, Option<(f64, f64)>)> = None;
    let mut forward_probe = None;
    for sign in [1.0, -1.0] {
        let limit = if sign > 0.0 { tmax } else { tmin };
        if limit == 0.0 {
            continue;
        }
        let mut a: f64 = 0.0;
        let mut b = sign * step.min(limit.abs());
        let mut fb = eval(obj, b)?;
        if fb >= f0 {
            if sign > 0.0 {
                forward_probe = Some(b);
            } else {
                // both first steps went uphill: the minimum straddles the start
                let hi = forward_probe.unwrap_or(0.0);
                bracket = Some((b, hi, (hi > 0.0).then_some((0.0, f0))));
            }
            continue;
        }
        // golden-ratio expansion downhill, clipped at the box
        loop {
            if b == limit {
                bracket = Some((a.min(b), a.max(b), None));
                break;
            }
            let c = (b + GOLDEN * (b - a)).clamp(tmin, tmax);
            let fc = eval(obj, c)?;
            if fc >= fb {
                bracket = Some((a.min(c), a.max(c), Some((b, fb))));
                break;
            }
            (a, b, fb) = (b, c, fc);
        }
        break;
    }
    let (lo, hi, seed) = match bracket {
        Some(b) => b,
        // forward step went uphill and there is no room behind the start
        None => match forward_probe {
            Some(b) => (0.0, b, None),
            None => return Ok(()),
        },
    };
    if hi > lo {
        let mut failure = None;
        let _ = brent(
            &mut |t| match eval(obj, t) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            },
            lo,
            hi,
            seed,
            line_tol * extent,
        );
        if let Some(e) = failure {
            return Err(e);
        }
    }
    if best.1 < f0 {
        *x = point(best.0);
        *fx = best.1;
    }
    Ok(())
}

/// Powell's conjugate-direction method inside `domain`.
///
/// Directions start as the coordinate axes. After each cycle the direction of
/// largest decrease is replaced by the net displacement of the cycle (when
/// the classic test accepts it), and every `d` cycles the set is reset to the
/// axes. Returns the best point found; `converged` is false when `max_iter`
/// cycles elapse first.
pub fn minimize_powell<F>(
    mut f: F,
    start: &[f64],
    domain: &BoxDomain,
    opts: &PowellOptions,
) -> Result<OptimResult, OptimError>
where
    F: FnMut(&[f64]) -> f64,
{
    let d = domain.dim();
    if start.len() != d {
        return Err(OptimError::InvalidBox(format!(
            "start has dimension {}, box has {d}",
            start.len()
        )));
    }
    if !domain.strictly_contains(start) {
        return Err(OptimError::StartOutsideBox(start.to_vec()));
    }
    if !(opts.tol > 0.0 && opts.line_tol > 0.0) {
        return Err(OptimError::InvalidTolerance(opts.tol.min(opts.line_tol)));
    }
    let axes = || -> Vec<Vec<f64>> {
        (0..d)
            .map(|k| (0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect()
    };
    let mut obj = Counted {
        f: &mut f,
        evaluations: 0,
        last_bad: None,
    };
    let mut x = start.to_vec();
    let mut fx = obj.call(&x);
    if !fx.is_finite() {
        return Err(OptimError::NonFinite { at: x, value: fx });
    }
    let mut dirs = axes();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut cycles = 0;
    while cycles < opts.max_iter {
        cycles += 1;
        let (x_start, f_start) = (x.clone(), fx);
        let (mut biggest, mut ibig) = (0.0, 0usize);
        for (i, dir) in dirs.iter().enumerate() {
            let before = fx;
            line_search(&mut obj, domain, &mut x, &mut fx, dir, opts.line_tol)?;
            if before - fx > biggest {
                biggest = before - fx;
                ibig = i;
            }
        }
        let decrease = f_start - fx;
        if decrease < opts.tol * (fx.abs() + opts.tol) {
            trace.push(fx);
            converged = true;
            break;
        }
        let mut new_dir: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| a - b).collect();
        let norm = new_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            new_dir.iter_mut().for_each(|v| *v /= norm);
            // extrapolated point 2x - x_start, only if inside the box
            let ext: Vec<f64> = x.iter().zip(&x_start).map(|(a, b)| 2.0 * a - b).collect();
            if domain.contains(&ext) {
                let f_ext = obj.call(&ext);
                if !admissible(f_ext) {
                    return Err(obj.fail());
                }
                if f_ext < f_start {
                    let t = 2.0 * (f_start - 2.0 * fx + f_ext) * (f_start - fx - biggest).powi(2)
                        - biggest * (f_start - f_ext).powi(2);
                    if t < 0.0 {
                        line_search(&mut obj, domain, &mut x, &mut fx, &new_dir, opts.line_tol)?;
                        dirs[ibig] = dirs[d - 1].clone();
                        dirs[d - 1] = new_dir;
                    }
                }
            }
        }
        trace.push(fx);
        if cycles % d == 0 {
            dirs = axes();
        }
    }
    Ok(OptimResult {
        point: x,
        value: fx,
        evaluations: obj.evaluations,
        cycles,
        converged,
        trace,
    })
}
