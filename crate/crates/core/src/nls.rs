//! Box-constrained trust-region nonlinear least squares.
//!
//! Minimises `|d(p)|^2` subject to `lo <= p <= hi`. Each iteration solves the
//! scaled trust-region subproblem on the free variables (those not pinned at
//! a bound with the gradient pointing outwards) via an SVD of the Jacobian,
//! then projects the trial point back onto the box. Steps are accepted only
//! when the objective actually decreases, so the recorded objective trace is
//! non-increasing and every accepted iterate is feasible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual (and optionally Jacobian) evaluator.
///
/// `residuals` returns `None` when `p` is outside the model's domain (for
/// instance a vertex behind the camera); the solver treats that as a
/// rejected step.
pub trait Problem {
    fn num_params(&self) -> usize;

    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>>;

    /// Analytic Jacobian, or `None` to fall back to finite differences.
    fn jacobian(&self, _p: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn contains(&self, p: &DVector<f64>) -> bool {
        p.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(x, (lo, hi))| lo <= x && x <= hi)
    }

    pub fn clamp(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            p.len(),
            p.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(x, (lo, hi))| x.max(*lo).min(*hi)),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Relative objective decrease on an accepted step.
    pub ftol: f64,
    /// Largest cosine between the residual and a free Jacobian column.
    pub gtol: f64,
    /// Relative step length.
    pub xtol: f64,
    /// Lower bound for the first trust-region radius (scaled units).
    pub initial_radius: f64,
    pub record_iterates: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            ftol: 1e-10,
            gtol: 1e-10,
            xtol: 1e-12,
            initial_radius: 1.0,
            record_iterates: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Gradient,
    Step,
    ObjectiveChange,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    pub residuals: DVector<f64>,
    pub objective: f64,
    /// Trial steps taken (accepted or not).
    pub iterations: usize,
    pub accepted: usize,
    pub termination: Termination,
    /// Objective after the start and after every accepted step.
    pub trace: Vec<f64>,
    /// Accepted iterates, when requested.
    pub iterates: Vec<DVector<f64>>,
    /// True if any Jacobian came from finite differences.
    pub used_finite_differences: bool,
}

pub fn solve<P: Problem + ?Sized>(
    problem: &P,
    p0: &DVector<f64>,
    bounds: &Bounds,
    options: &SolverOptions,
) -> Result<SolveReport> {
    let n = problem.num_params();
    if n == 0 || p0.len() != n || bounds.lower.len() != n || bounds.upper.len() != n {
        return Err(Error::invalid(format!(
            "parameter/bound length mismatch: {n} params, p0 {}, bounds {}/{}",
            p0.len(),
            bounds.lower.len(),
            bounds.upper.len()
        )));
    }
    if !bounds.contains(p0) {
        return Err(Error::invalid("initial point violates its bounds"));
    }
    let mut p = p0.clone();
    let mut d = problem.residuals(&p).ok_or_else(|| Error::Numeric {
        message: "initial point is outside the residual domain".into(),
        iterate: p.as_slice().to_vec(),
    })?;
    if d.is_empty() {
        return Err(Error::invalid("problem has no residuals"));
    }
    check_finite(&d, &p, "residual")?;
    let mut f = d.norm_squared();
    let mut used_fd = false;
    let mut jac = evaluate_jacobian(problem, &p, &d, bounds, &mut used_fd)?;

    let mut scale = column_norms(&jac);
    let mut radius: Option<f64> = None;
    let mut trace = vec![f];
    let mut iterates = Vec::new();
    if options.record_iterates {
        iterates.push(p.clone());
    }
    let mut iterations = 0;
    let mut accepted = 0;

    let termination = loop {
        let grad = jac.transpose() * &d;
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let (lo, hi) = (bounds.lower[i], bounds.upper[i]);
                !(lo == hi || (p[i] <= lo && grad[i] > 0.0) || (p[i] >= hi && grad[i] < 0.0))
            })
            .collect();
        if f == 0.0 || scaled_gradient(&jac, &d, &grad, &free) <= options.gtol {
            break Termination::Gradient;
        }
        if iterations >= options.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let step_free = {
            let cols: Vec<_> = free.iter().map(|&i| jac.column(i) / scale[i]).collect();
            let js = DMatrix::from_columns(&cols);
            let delta = radius.unwrap_or(f64::INFINITY);
            let (z, gn_norm) = trust_region_step(&js, &d, delta);
            if radius.is_none() {
                radius = Some(gn_norm.max(options.initial_radius));
            }
            z
        };
        let mut step = DVector::zeros(n);
        for (k, &i) in free.iter().enumerate() {
            step[i] = step_free[k] / scale[i];
        }
        let trial = bounds.clamp(&(&p + &step));
        let step = &trial - &p;
        let scaled_step = step.component_mul(&scale).norm();
        let step_norm = step.norm();
        if step_norm <= options.xtol * (options.xtol + p.norm()) {
            break Termination::Step;
        }

        let jstep = &jac * &step;
        let predicted = -(2.0 * grad.dot(&step) + jstep.norm_squared());
        let candidate = problem
            .residuals(&trial)
            .filter(|r| r.len() == d.len() && r.iter().all(|x| x.is_finite()));
        let (ratio, new_f) = match &candidate {
            Some(r) if predicted > 0.0 => {
                let nf = r.norm_squared();
                ((f - nf) / predicted, nf)
            }
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        };

        let delta = radius.unwrap();
        radius = Some(if ratio < 0.25 {
            0.25 * scaled_step.min(delta)
        } else if ratio > 0.75 {
            delta.max(2.0 * scaled_step)
        } else {
            delta
        });

        if ratio > 1e-4 && new_f < f {
            let decrease = (f - new_f) / f;
            p = trial;
            d = candidate.unwrap();
            f = new_f;
            accepted += 1;
            trace.push(f);
            if options.record_iterates {
                iterates.push(p.clone());
            }
            jac = evaluate_jacobian(problem, &p, &d, bounds, &mut used_fd)?;
            for (s, c) in scale.iter_mut().zip(column_norms(&jac).iter()) {
                *s = s.max(*c);
            }
            if decrease < options.ftol {
                break Termination::ObjectiveChange;
            }
            if step_norm <= options.xtol * (options.xtol + p.norm()) {
                break Termination::Step;
            }
        } else {
            let pnorm = p.component_mul(&scale).norm();
            if radius.unwrap() <= options.xtol * (options.xtol + pnorm) {
                break Termination::Step;
            }
        }
    };

    Ok(SolveReport {
        solution: p,
        residuals: d,
        objective: f,
        iterations,
        accepted,
        termination,
        trace,
        iterates,
        used_finite_differences: used_fd,
    })
}

fn check_finite(v: &DVector<f64>, p: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            message: format!("non-finite {what}"),
            iterate: p.as_slice().to_vec(),
        })
    }
}

fn column_norms(j: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        j.ncols(),
        j.column_iter().map(|c| {
            let n = c.norm();
            if n > 0.0 {
                n
            } else {
                1.0
            }
        }),
    )
}

fn scaled_gradient(jac: &DMatrix<f64>, d: &DVector<f64>, grad: &DVector<f64>, free: &[usize]) -> f64 {
    let dn = d.norm();
    free.iter()
        .map(|&i| {
            let cn = jac.column(i).norm();
            if cn == 0.0 {
                0.0
            } else {
                grad[i].abs() / (cn * dn)
            }
        })
        .fold(0.0, f64::max)
}

/// Minimise `|J z + d|` subject to `|z| <= delta`. Returns the step and the
/// norm of the unconstrained minimum-norm Gauss-Newton step.
fn trust_region_step(js: &DMatrix<f64>, d: &DVector<f64>, delta: f64) -> (DVector<f64>, f64) {
    let nf = js.ncols();
    if nf == 0 {
        return (DVector::zeros(0), 0.0);
    }
    let svd = js.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let sv = &svd.singular_values;
    let smax = sv.max();
    let tol = smax * 1e-12 * (js.nrows().max(nf) as f64);
    let c: Vec<f64> = (0..sv.len()).map(|i| u.column(i).dot(d)).collect();

    let coeffs = |mu: f64| -> Vec<f64> {
        (0..sv.len())
            .map(|i| {
                let s = sv[i];
                if mu == 0.0 {
                    if s > tol {
                        -c[i] / s
                    } else {
                        0.0
                    }
                } else {
                    -s * c[i] / (s * s + mu)
                }
            })
            .collect()
    };
    let norm_of = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let assemble = |w: &[f64]| {
        let mut z = DVector::zeros(nf);
        for (i, wi) in w.iter().enumerate() {
            z += vt.row(i).transpose() * *wi;
        }
        z
    };

    let gn = coeffs(0.0);
    let gn_norm = norm_of(&gn);
    if gn_norm <= delta {
        return (assemble(&gn), gn_norm);
    }
    // |z(mu)| decreases monotonically; bisect in log(mu).
    let g_norm = (0..sv.len()).map(|i| (sv[i] * c[i]).powi(2)).sum::<f64>().sqrt();
    let mut hi = (g_norm / delta).max(f64::MIN_POSITIVE);
    let mut lo = hi * 1e-30;
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let nm = norm_of(&coeffs(mid));
        if (nm - delta).abs() <= 1e-3 * delta {
            hi = mid;
            break;
        }
        if nm > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    let w = coeffs(hi);
    (assemble(&w), gn_norm)
}

fn evaluate_jacobian<P: Problem + ?Sized>(
    problem: &P,
    p: &DVector<f64>,
    d: &DVector<f64>,
    bounds: &Bounds,
    used_fd: &mut bool,
) -> Result<DMatrix<f64>> {
    let jac = match problem.jacobian(p) {
        Some(j) => j,
        None => {
            *used_fd = true;
            finite_difference_jacobian(problem, p, d, bounds)?
        }
    };
    if jac.nrows() != d.len() || jac.ncols() != p.len() {
        return Err(Error::invalid(format!(
            "Jacobian is {}x{}, expected {}x{}",
            jac.nrows(),
            jac.ncols(),
            d.len(),
            p.len()
        )));
    }
    if jac.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            message: "non-finite Jacobian".into(),
            iterate: p.as_slice().to_vec(),
        });
    }
    Ok(jac)
}

/// Central differences with step `1e-7 * max(1, |p_i|)`, one-sided at bounds.
pub fn finite_difference_jacobian<P: Problem + ?Sized>(
    problem: &P,
    p: &DVector<f64>,
    d: &DVector<f64>,
    bounds: &Bounds,
) -> Result<DMatrix<f64>> {
    let n = p.len();
    let mut jac = DMatrix::zeros(d.len(), n);
    let eval = |q: &DVector<f64>| {
        problem
            .residuals(q)
            .filter(|r| r.len() == d.len() && r.iter().all(|x| x.is_finite()))
    };
    for i in 0..n {
        let h = 1e-7 * p[i].abs().max(1.0);
        let mut plus = p.clone();
        let mut minus = p.clone();
        plus[i] += h;
        minus[i] -= h;
        let up = (plus[i] <= bounds.upper[i]).then(|| eval(&plus)).flatten();
        let down = (minus[i] >= bounds.lower[i]).then(|| eval(&minus)).flatten();
        let col = match (up, down) {
            (Some(a), Some(b)) => (a - b) / (2.0 * h),
            (Some(a), None) => (a - d) / h,
            (None, Some(b)) => (d - b) / h,
            (None, None) => {
                if bounds.lower[i] == bounds.upper[i] {
                    DVector::zeros(d.len())
                } else {
                    return Err(Error::Numeric {
                        message: format!("cannot difference parameter {i}"),
                        iterate: p.as_slice().to_vec(),
                    });
                }
            }
        };
        jac.set_column(i, &col);
    }
    Ok(jac)
}

/// Largest relative discrepancy between the analytic Jacobian and a
/// fourth-order central difference with step `step * max(1, |p_i|)`.
/// Entries are compared as `|a - n| / max(1, |n|)`.
pub fn check_jacobian<P: Problem + ?Sized>(problem: &P, p: &DVector<f64>, step: f64) -> Result<f64> {
    let analytic = problem
        .jacobian(p)
        .ok_or_else(|| Error::invalid("problem provides no analytic Jacobian at this point"))?;
    let numeric = central_difference(problem, p, step)?;
    if analytic.shape() != numeric.shape() {
        return Err(Error::invalid("Jacobian shape mismatch"));
    }
    Ok(analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}

/// Five-point central difference Jacobian.
pub fn central_difference<P: Problem + ?Sized>(problem: &P, p: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
    let eval = |q: &DVector<f64>| {
        problem.residuals(q).ok_or_else(|| Error::Numeric {
            message: "residual undefined during differencing".into(),
            iterate: q.as_slice().to_vec(),
        })
    };
    let m = eval(p)?.len();
    let mut jac = DMatrix::zeros(m, p.len());
    for i in 0..p.len() {
        let h = step * p[i].abs().max(1.0);
        let at = |k: f64| {
            let mut q = p.clone();
            q[i] += k * h;
            eval(&q)
        };
        let col = (at(-2.0)? - at(2.0)? + (at(1.0)? - at(-1.0)?) * 8.0) / (12.0 * h);
        jac.set_column(i, &col);
    }
    Ok(jac)
}
