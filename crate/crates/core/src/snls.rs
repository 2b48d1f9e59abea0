//! Variable projection: elimination of the linear parameters of a separable
//! least-squares problem `d(theta, p) = A(theta) p - y(theta)`.
//!
//! For fixed nonlinear parameters `theta` the optimal linear parameters are
//! `p* = A~+ y~`, where `A~` stacks `A` on a diagonal Tikhonov block and
//! `y~` pads `y` with zeros. The reduced residual `A p* - y` then depends on
//! `theta` alone, and its derivative follows from the derivative of the
//! pseudoinverse.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cut-off for the pseudoinverse.
pub const PINV_RTOL: f64 = 1e-10;

/// Pseudoinverse with its rank information.
#[derive(Debug, Clone)]
pub struct Pseudoinverse {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    /// True when any singular value fell below the cut-off.
    pub truncated: bool,
}

pub fn pseudoinverse(a: &DMatrix<f64>) -> Pseudoinverse {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Pseudoinverse {
            matrix: DMatrix::zeros(n, m),
            rank: 0,
            truncated: true,
        };
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = PINV_RTOL * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut rank = 0;
    let mut matrix = DMatrix::zeros(n, m);
    for (i, &sv) in svd.singular_values.iter().enumerate() {
        if sv > tol && sv > 0.0 {
            rank += 1;
            matrix += vt.row(i).transpose() * u.column(i).transpose() / sv;
        }
    }
    Pseudoinverse {
        matrix,
        rank,
        truncated: rank < k,
    }
}

/// Solution of the regularised linear stage at fixed nonlinear parameters.
#[derive(Debug, Clone)]
pub struct LinearSolve {
    pub coeffs: DVector<f64>,
    /// `A p* - y`, without the regularisation rows.
    pub residual: DVector<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
    aug: DMatrix<f64>,
    pinv: DMatrix<f64>,
    aug_residual: DVector<f64>,
    penalty_rows: Vec<(usize, f64)>,
}

/// Minimise `|A p - y|^2 + sum_j (penalty_j p_j)^2`; the minimum-norm
/// solution is taken when the augmented system is rank deficient.
pub fn solve_linear(a: &DMatrix<f64>, y: &DVector<f64>, penalty: &DVector<f64>) -> LinearSolve {
    let (m, n) = a.shape();
    assert_eq!(y.len(), m, "A and y row counts differ");
    assert_eq!(penalty.len(), n, "one penalty per column");
    let penalty_rows: Vec<(usize, f64)> = penalty
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0.0)
        .map(|(j, w)| (j, *w))
        .collect();
    let mut aug = DMatrix::zeros(m + penalty_rows.len(), n);
    aug.rows_mut(0, m).copy_from(a);
    for (k, &(j, w)) in penalty_rows.iter().enumerate() {
        aug[(m + k, j)] = w;
    }
    let mut y_aug = DVector::zeros(m + penalty_rows.len());
    y_aug.rows_mut(0, m).copy_from(y);
    let pinv = pseudoinverse(&aug);
    let coeffs = &pinv.matrix * &y_aug;
    let aug_residual = &y_aug - &aug * &coeffs;
    let residual = a * &coeffs - y;
    LinearSolve {
        coeffs,
        residual,
        rank: pinv.rank,
        rank_deficient: pinv.truncated,
        aug,
        pinv: pinv.matrix,
        aug_residual,
        penalty_rows,
    }
}

impl LinearSolve {
    /// Derivative of the optimal coefficients given `dA` and `dy` along one
    /// nonlinear parameter (the penalty block is constant).
    pub fn coeff_derivative(&self, da: &DMatrix<f64>, dy: &DVector<f64>) -> DVector<f64> {
        let m = da.nrows();
        let mut da_aug = DMatrix::zeros(self.aug.nrows(), self.aug.ncols());
        da_aug.rows_mut(0, m).copy_from(da);
        let mut dy_aug = DVector::zeros(self.aug.nrows());
        dy_aug.rows_mut(0, m).copy_from(dy);
        let pinv = &self.pinv;
        let p = &self.coeffs;
        // d(A+) y = -A+ dA A+ y + A+ A+^T dA^T (I - A A+) y + (I - A+ A) dA^T A+^T A+ y
        let mut dp = -(pinv * (&da_aug * p));
        dp += pinv * (pinv.transpose() * (da_aug.transpose() * &self.aug_residual));
        let u = da_aug.transpose() * (pinv.transpose() * p);
        dp += &u - pinv * (&self.aug * &u);
        dp += pinv * dy_aug;
        dp
    }

    /// Derivative of the reduced residual `A p* - y`.
    pub fn residual_derivative(&self, da: &DMatrix<f64>, dy: &DVector<f64>) -> DVector<f64> {
        let m = da.nrows();
        let dp = self.coeff_derivative(da, dy);
        da * &self.coeffs + self.aug.rows(0, m) * dp - dy
    }

    /// Value of the penalised objective `|A p* - y|^2 + |W p*|^2`.
    pub fn penalized_objective(&self) -> f64 {
        self.residual.norm_squared()
            + self
                .penalty_rows
                .iter()
                .map(|&(j, w)| (w * self.coeffs[j]).powi(2))
                .sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pseudoinverse_matches_inverse_for_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 5, 5) + DMatrix::identity(5, 5) * 3.0;
        let p = pseudoinverse(&a);
        assert_eq!(p.rank, 5);
        assert!(!p.truncated);
        assert!((p.matrix - a.try_inverse().unwrap()).amax() < 1e-10);
    }

    #[test]
    fn pseudoinverse_drops_null_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(&mut rng, 6, 2);
        let c = random(&mut rng, 2, 4);
        let a = &b * &c; // rank 2
        let p = pseudoinverse(&a);
        assert_eq!(p.rank, 2);
        assert!(p.truncated);
        // Moore-Penrose conditions
        assert!((&a * &p.matrix * &a - &a).amax() < 1e-10);
        assert!((&p.matrix * &a * &p.matrix - &p.matrix).amax() < 1e-10);
    }

    #[test]
    fn unregularized_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 12, 4);
        let y = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let s = solve_linear(&a, &y, &DVector::zeros(4));
        let normal = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &y));
        assert!((&s.coeffs - normal).amax() < 1e-10);
        assert!((s.residual.clone() - (&a * &s.coeffs - &y)).amax() < 1e-15);
    }

    #[test]
    fn regularized_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 10, 5);
        let y = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_vec(vec![0.5, 0.0, 2.0, 0.1, 0.0]);
        let s = solve_linear(&a, &y, &w);
        let lhs = a.transpose() * &a + DMatrix::from_diagonal(&w.component_mul(&w));
        let normal = lhs.cholesky().unwrap().solve(&(a.transpose() * &y));
        assert!((&s.coeffs - normal).amax() < 1e-10);
        assert_eq!(s.residual.len(), 10);
    }

    #[test]
    fn minimum_norm_for_wide_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, 3, 6);
        let y = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let s = solve_linear(&a, &y, &DVector::zeros(6));
        assert!(s.residual.norm() < 1e-12);
        // minimum-norm solution lies in the row space: p = A^T (A A^T)^-1 y
        let oracle = a.transpose() * (&a * a.transpose()).try_inverse().unwrap() * &y;
        assert!((&s.coeffs - oracle).amax() < 1e-10);
        assert_eq!(s.rank, 3);
    }

    /// A(t) = A0 + t A1, y(t) = y0 + t y1: the analytic residual derivative
    /// must agree with central differences, with and without penalty, and
    /// for a rank-deficient family whose rank is constant in t.
    #[test]
    fn residual_derivative_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..3 {
            let (a0, a1) = if case == 2 {
                let b = random(&mut rng, 9, 3);
                (&b * random(&mut rng, 3, 5), &b * random(&mut rng, 3, 5))
            } else {
                (random(&mut rng, 9, 5), random(&mut rng, 9, 5))
            };
            let y0 = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let y1 = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let w = if case == 1 {
                DVector::from_element(5, 0.3)
            } else {
                DVector::zeros(5)
            };
            let at = |t: f64| &a0 + &a1 * t;
            let yt = |t: f64| &y0 + &y1 * t;
            let t0 = 0.37;
            let s = solve_linear(&at(t0), &yt(t0), &w);
            let analytic = s.residual_derivative(&a1, &y1);
            let h = 1e-6;
            let fd = (solve_linear(&at(t0 + h), &yt(t0 + h), &w).residual
                - solve_linear(&at(t0 - h), &yt(t0 - h), &w).residual)
                / (2.0 * h);
            let err = (&analytic - &fd).amax() / fd.amax().max(1.0);
            assert!(err < 1e-7, "case {case}: {err}");
            let dp = s.coeff_derivative(&a1, &y1);
            let fdp = (solve_linear(&at(t0 + h), &yt(t0 + h), &w).coeffs
                - solve_linear(&at(t0 - h), &yt(t0 - h), &w).coeffs)
                / (2.0 * h);
            assert!((&dp - &fdp).amax() / fdp.amax().max(1.0) < 1e-6, "case {case}");
        }
    }

    #[test]
    fn projector_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 8, 3);
        let y = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
        let r1 = solve_linear(&a, &y, &DVector::zeros(3)).residual;
        let r2 = solve_linear(&a, &(&y + &a * c), &DVector::zeros(3)).residual;
        assert!((r1 - r2).amax() < 1e-10);
    }
}
