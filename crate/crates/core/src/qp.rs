//! Dense convex quadratic programming via operator splitting.
//!
//! Solves problems of the form
//!
//! ```text
//!     minimize    1/2 x' P x + q' x + c
//!     subject to  E x  = b_eq
//!                 lo <= G x <= up
//!                 lb <=   x <= ub
//! ```
//!
//! with `P` symmetric positive semidefinite. The algorithm is the standard
//! splitting on the constraint copy `z = A x` (all rows stacked, including an
//! identity block for the variable box): alternate a ridge-regularized
//! x-update solved through a Cholesky factorization of `P + sigma I + A' R A`,
//! a projection of `z` onto the bound interval, and a scaled dual update.
//! Problems are Ruiz-equilibrated up front (big-M rows mix badly with the
//! dynamics coefficients otherwise), and a final polishing step re-solves the
//! KKT system restricted to the active rows, which brings residuals down to
//! the requested tolerances.
//!
//! The factorization depends only on `P`, `A`, and the penalty vector, so a
//! [`QpSolver`] can be reused across many solves that differ only in costs or
//! bounds (branch-and-bound nodes, enumeration patterns, ADMM iterations).

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

/// Errors raised while setting up or solving a QP.
#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cost matrix is not positive semidefinite")]
    NotPsd,
    #[error("invalid bounds: lower {lower} > upper {upper} in row {row}")]
    InvalidBounds { row: usize, lower: f64, upper: f64 },
}

/// Termination status of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    /// KKT residuals below the configured tolerances.
    Optimal,
    /// A certificate of primal infeasibility was found.
    PrimalInfeasible,
    /// Iteration limit reached without meeting the tolerances.
    MaxIterations,
}

/// Result of a solve: primal/dual vectors, objective, status, residuals.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Duals for the equality rows (sign-free).
    pub dual_eq: DVector<f64>,
    /// Duals for the general inequality rows (positive at the upper bound,
    /// negative at the lower bound).
    pub dual_ineq: DVector<f64>,
    /// Duals for the variable box.
    pub dual_box: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Certificate direction when `status == PrimalInfeasible`.
    pub infeasibility_certificate: Option<DVector<f64>>,
}

/// Solver tolerances and iteration limits.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    /// Ridge regularization added to the x-update system.
    pub sigma: f64,
    /// Initial penalty weight on constraint rows.
    pub rho: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    /// Residuals are checked every this many iterations.
    pub check_interval: usize,
    /// Relative tolerance of the primal infeasibility certificate test.
    pub tol_infeasible: f64,
    /// Ruiz equilibration sweeps (0 disables scaling).
    pub scaling_iters: usize,
    /// Decide stalled solves with the phase-1 feasibility probe (the probe's
    /// own solve keeps this off).
    pub probe_on_stall: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            max_iter: 20_000,
            sigma: 1e-6,
            rho: 0.1,
            alpha: 1.6,
            check_interval: 25,
            tol_infeasible: 1e-4,
            scaling_iters: 10,
            probe_on_stall: true,
        }
    }
}

/// A convex QP in the form documented at module level.
#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric PSD cost matrix.
    pub cost_matrix: DMatrix<f64>,
    pub cost_linear: DVector<f64>,
    /// Constant cost offset, added to reported objectives.
    pub cost_constant: f64,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    /// Ranged inequality rows: `ineq_lower <= ineq_matrix x <= ineq_upper`.
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_lower: DVector<f64>,
    pub ineq_upper: DVector<f64>,
    pub var_lower: DVector<f64>,
    pub var_upper: DVector<f64>,
}

impl QpProblem {
    /// An unconstrained problem skeleton with free variables.
    pub fn new(cost_matrix: DMatrix<f64>, cost_linear: DVector<f64>) -> Self {
        let n = cost_linear.len();
        Self {
            cost_matrix,
            cost_linear,
            cost_constant: 0.0,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_lower: DVector::zeros(0),
            ineq_upper: DVector::zeros(0),
            var_lower: DVector::from_element(n, f64::NEG_INFINITY),
            var_upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.cost_linear.len()
    }

    /// One-sided rows `G x <= b`, appended to the ranged block.
    pub fn push_ineq_row(&mut self, row: DVector<f64>, upper: f64) {
        self.push_ranged_row(row, f64::NEG_INFINITY, upper);
    }

    pub fn push_ranged_row(&mut self, row: DVector<f64>, lower: f64, upper: f64) {
        let m = self.ineq_matrix.nrows();
        let n = self.num_vars();
        let mut mat = DMatrix::zeros(m + 1, n);
        mat.rows_mut(0, m).copy_from(&self.ineq_matrix);
        mat.row_mut(m).copy_from(&row.transpose());
        self.ineq_matrix = mat;
        self.ineq_lower = self.ineq_lower.clone().insert_row(m, lower);
        self.ineq_upper = self.ineq_upper.clone().insert_row(m, upper);
    }

    /// Objective value at `x`, including the constant term.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.cost_matrix * x)[(0, 0)]
            + self.cost_linear.dot(x)
            + self.cost_constant
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        if self.cost_matrix.nrows() != n || self.cost_matrix.ncols() != n {
            return Err(QpError::DimensionMismatch(format!(
                "cost matrix is {}x{}, expected {n}x{n}",
                self.cost_matrix.nrows(),
                self.cost_matrix.ncols()
            )));
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_rhs.len() {
            return Err(QpError::DimensionMismatch("equality block".into()));
        }
        if self.ineq_matrix.ncols() != n
            || self.ineq_matrix.nrows() != self.ineq_lower.len()
            || self.ineq_matrix.nrows() != self.ineq_upper.len()
        {
            return Err(QpError::DimensionMismatch("inequality block".into()));
        }
        if self.var_lower.len() != n || self.var_upper.len() != n {
            return Err(QpError::DimensionMismatch("variable bounds".into()));
        }
        for i in 0..self.ineq_lower.len() {
            if self.ineq_lower[i] > self.ineq_upper[i] {
                return Err(QpError::InvalidBounds {
                    row: i,
                    lower: self.ineq_lower[i],
                    upper: self.ineq_upper[i],
                });
            }
        }
        for i in 0..n {
            if self.var_lower[i] > self.var_upper[i] {
                return Err(QpError::InvalidBounds {
                    row: self.eq_rhs.len() + self.ineq_lower.len() + i,
                    lower: self.var_lower[i],
                    upper: self.var_upper[i],
                });
            }
        }
        Ok(())
    }
}

/// Reusable solver: holds the stacked scaled constraint matrix, the penalty
/// vector, the Cholesky factor of the x-update system, and the current
/// iterates (in scaled space; warm starts persist across solves).
pub struct QpSolver {
    problem: QpProblem,
    settings: QpSettings,
    /// Scaled stacked rows: equalities, inequalities, identity box block.
    a_s: DMatrix<f64>,
    p_s: DMatrix<f64>,
    q_s: DVector<f64>,
    lower_s: DVector<f64>,
    upper_s: DVector<f64>,
    /// Variable, row, and cost scaling: `x = d .* x_s`, `y = e .* y_s / c`.
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    rho: DVector<f64>,
    rho_bar: f64,
    chol: Cholesky<f64, nalgebra::Dyn>,
    x_s: DVector<f64>,
    z_s: DVector<f64>,
    y_s: DVector<f64>,
    n_eq: usize,
    n_ineq: usize,
}

impl QpSolver {
    pub fn new(problem: QpProblem, settings: QpSettings) -> Result<Self, QpError> {
        problem.validate()?;
        let n = problem.num_vars();
        let n_eq = problem.eq_rhs.len();
        let n_ineq = problem.ineq_lower.len();
        let m = n_eq + n_ineq + n;

        let mut a = DMatrix::zeros(m, n);
        a.rows_mut(0, n_eq).copy_from(&problem.eq_matrix);
        a.rows_mut(n_eq, n_ineq).copy_from(&problem.ineq_matrix);
        a.rows_mut(n_eq + n_ineq, n)
            .copy_from(&DMatrix::identity(n, n));

        // P must be PSD: detectable via Cholesky of P + sigma I during
        // factorization below (with symmetrization first).
        let mut p = problem.cost_matrix.clone();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (p[(i, j)] + p[(j, i)]);
                p[(i, j)] = v;
                p[(j, i)] = v;
            }
        }

        let (d, e, c) = ruiz_equilibrate(&p, &a, &problem.cost_linear, settings.scaling_iters);
        let mut a_s = a;
        for i in 0..m {
            for j in 0..n {
                a_s[(i, j)] *= e[i] * d[j];
            }
        }
        let mut p_s = p;
        for i in 0..n {
            for j in 0..n {
                p_s[(i, j)] *= c * d[i] * d[j];
            }
        }
        let q_s = DVector::from_fn(n, |i, _| c * d[i] * problem.cost_linear[i]);

        let mut solver = Self {
            x_s: DVector::zeros(n),
            z_s: DVector::zeros(m),
            y_s: DVector::zeros(m),
            rho: DVector::zeros(m),
            rho_bar: settings.rho,
            chol: Cholesky::new(DMatrix::identity(1, 1)).unwrap(),
            lower_s: DVector::zeros(m),
            upper_s: DVector::zeros(m),
            problem,
            settings,
            a_s,
            p_s,
            q_s,
            d,
            e,
            c,
            n_eq,
            n_ineq,
        };
        solver.refresh_scaled_bounds();
        solver.rho = solver.build_rho();
        solver.chol = solver.factorize()?;
        Ok(solver)
    }

    fn refresh_scaled_bounds(&mut self) {
        let n = self.problem.num_vars();
        let (n_eq, n_ineq) = (self.n_eq, self.n_ineq);
        for i in 0..n_eq {
            self.lower_s[i] = self.e[i] * self.problem.eq_rhs[i];
            self.upper_s[i] = self.lower_s[i];
        }
        for i in 0..n_ineq {
            self.lower_s[n_eq + i] = self.e[n_eq + i] * self.problem.ineq_lower[i];
            self.upper_s[n_eq + i] = self.e[n_eq + i] * self.problem.ineq_upper[i];
        }
        for i in 0..n {
            let r = n_eq + n_ineq + i;
            self.lower_s[r] = self.e[r] * self.problem.var_lower[i];
            self.upper_s[r] = self.e[r] * self.problem.var_upper[i];
        }
    }

    fn build_rho(&self) -> DVector<f64> {
        // Structural tiers: the equality block is stiff, everything else
        // (including box rows whose bounds may later collapse to a point)
        // stays at the base weight so bound updates never reshuffle tiers.
        DVector::from_fn(self.lower_s.len(), |i, _| {
            if i < self.n_eq {
                self.rho_bar * 1e3
            } else {
                self.rho_bar
            }
        })
    }

    fn factorize(&self) -> Result<Cholesky<f64, nalgebra::Dyn>, QpError> {
        let n = self.problem.num_vars();
        let mut kkt = self.p_s.clone();
        for i in 0..n {
            kkt[(i, i)] += self.settings.sigma;
        }
        let mut scaled = self.a_s.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= self.rho[i];
        }
        kkt += self.a_s.transpose() * scaled;
        Cholesky::new(kkt).ok_or(QpError::NotPsd)
    }

    /// Replace the linear cost. Keeps the factorization and iterates.
    pub fn update_linear_cost(&mut self, q: DVector<f64>, constant: f64) {
        assert_eq!(q.len(), self.problem.num_vars());
        for i in 0..q.len() {
            self.q_s[i] = self.c * self.d[i] * q[i];
        }
        self.problem.cost_linear = q;
        self.problem.cost_constant = constant;
    }

    /// Replace bounds of one ranged inequality row. Keeps the factorization.
    pub fn update_ineq_bounds(&mut self, row: usize, lower: f64, upper: f64) {
        let i = self.n_eq + row;
        self.lower_s[i] = self.e[i] * lower;
        self.upper_s[i] = self.e[i] * upper;
        self.problem.ineq_lower[row] = lower;
        self.problem.ineq_upper[row] = upper;
    }

    /// Replace one variable's box. Keeps the factorization.
    pub fn update_var_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        let i = self.n_eq + self.n_ineq + var;
        self.lower_s[i] = self.e[i] * lower;
        self.upper_s[i] = self.e[i] * upper;
        self.problem.var_lower[var] = lower;
        self.problem.var_upper[var] = upper;
    }

    /// Clear the dual iterates (useful after an unconverged solve whose
    /// duals would misdirect the next warm-started solve).
    pub fn reset_duals(&mut self) {
        self.y_s.fill(0.0);
    }

    /// Seed the next solve with a primal guess (dual iterates are kept).
    pub fn warm_start(&mut self, x: &DVector<f64>) {
        assert_eq!(x.len(), self.x_s.len());
        for i in 0..x.len() {
            self.x_s[i] = x[i] / self.d[i];
        }
        self.z_s = &self.a_s * &self.x_s;
    }

    pub fn problem(&self) -> &QpProblem {
        &self.problem
    }

    fn unscaled_x(&self) -> DVector<f64> {
        DVector::from_fn(self.x_s.len(), |i, _| self.d[i] * self.x_s[i])
    }

    fn unscaled_y(&self) -> DVector<f64> {
        DVector::from_fn(self.y_s.len(), |i, _| self.e[i] * self.y_s[i] / self.c)
    }

    pub fn solve(&mut self) -> QpSolution {
        let max_iter = self.settings.max_iter;
        let alpha = self.settings.alpha;
        let m = self.lower_s.len();

        let mut status = QpStatus::MaxIterations;
        let mut iterations = max_iter;
        let mut certificate = None;
        let mut rho_updates = 0usize;

        let mut delta_y = DVector::zeros(m);
        let mut best_gauge = f64::INFINITY;
        let mut stalled_checks = 0usize;
        // Window anchor for the smoothed certificate direction.
        let mut y_anchor = self.y_s.clone();

        for it in 1..=max_iter {
            // x-update through the reduced system.
            let mut rhs = &self.x_s * self.settings.sigma - &self.q_s;
            let mut w = DVector::zeros(m);
            for i in 0..m {
                w[i] = self.rho[i] * self.z_s[i] - self.y_s[i];
            }
            rhs += self.a_s.transpose() * w;
            let x_tilde = self.chol.solve(&rhs);
            let z_tilde = &self.a_s * &x_tilde;

            // Over-relaxation, projection, dual step.
            let x_next = &x_tilde * alpha + &self.x_s * (1.0 - alpha);
            let mut z_next = DVector::zeros(m);
            for i in 0..m {
                let zr = alpha * z_tilde[i] + (1.0 - alpha) * self.z_s[i];
                let proj =
                    (zr + self.y_s[i] / self.rho[i]).clamp(self.lower_s[i], self.upper_s[i]);
                z_next[i] = proj;
                let y_new = self.y_s[i] + self.rho[i] * (zr - proj);
                delta_y[i] = y_new - self.y_s[i];
                self.y_s[i] = y_new;
            }
            self.x_s = x_next;
            self.z_s = z_next;

            if it % self.settings.check_interval == 0 || it == max_iter {
                let (r_prim, r_dual) = self.residuals();
                if r_prim <= self.settings.tol_primal && r_dual <= self.settings.tol_dual {
                    status = QpStatus::Optimal;
                    iterations = it;
                    break;
                }
                // Certificate test on both the instantaneous dual step and
                // the smoothed direction accumulated since the last check.
                let windowed = &self.y_s - &y_anchor;
                y_anchor.copy_from(&self.y_s);
                if let Some(cert) = self
                    .primal_infeasibility_certificate(&delta_y)
                    .or_else(|| self.primal_infeasibility_certificate(&windowed))
                {
                    status = QpStatus::PrimalInfeasible;
                    iterations = it;
                    certificate = Some(cert);
                    break;
                }
                // Stall handling: when neither residual keeps improving, try
                // the active-set polish (it often finishes the job exactly);
                // if even that fails repeatedly, stop early instead of
                // crawling to the iteration cap.
                let gauge = r_prim.max(r_dual);
                if gauge < 0.7 * best_gauge {
                    best_gauge = gauge;
                    stalled_checks = 0;
                } else {
                    stalled_checks += 1;
                }
                if stalled_checks >= 8 && stalled_checks % 8 == 0 {
                    self.polish();
                    let (rp, rd) = self.residuals();
                    if rp <= self.settings.tol_primal && rd <= self.settings.tol_dual {
                        status = QpStatus::Optimal;
                        iterations = it;
                        break;
                    }
                }
                if stalled_checks >= 24 {
                    iterations = it;
                    break;
                }
                // Rebalance the penalty when the residuals drift apart.
                if rho_updates < 6 && it % (20 * self.settings.check_interval) == 0 {
                    let prim_scale = infinity_norm(&(&self.a_s * &self.x_s))
                        .max(infinity_norm(&self.z_s))
                        .max(1e-12);
                    let dual_scale = infinity_norm(&(&self.p_s * &self.x_s))
                        .max(infinity_norm(&(self.a_s.transpose() * &self.y_s)))
                        .max(infinity_norm(&self.q_s))
                        .max(1e-12);
                    let (rs, ds) = self.scaled_residuals();
                    let ratio = (rs / prim_scale) / ((ds / dual_scale).max(1e-16));
                    if !(0.04..=25.0).contains(&ratio) {
                        let new_rho = (self.rho_bar * ratio.sqrt()).clamp(1e-6, 1e6);
                        if (new_rho / self.rho_bar).max(self.rho_bar / new_rho) > 2.0 {
                            self.rho_bar = new_rho;
                            self.rho = self.build_rho();
                            if let Ok(ch) = self.factorize() {
                                self.chol = ch;
                            }
                            rho_updates += 1;
                        }
                    }
                }
            }
        }

        if status == QpStatus::MaxIterations && self.settings.probe_on_stall {
            // Stalls on degenerate geometry are decided by the phase-1
            // probe: it either certifies infeasibility or confirms that a
            // feasible point exists within tolerance.
            let (rp, _) = self.residuals();
            if rp > self.settings.tol_primal {
                if let Ok(mut probe) = FeasibilityProbe::new(&self.problem, &self.settings) {
                    if let Some((t_star, cert)) = probe.solve() {
                        if t_star > FeasibilityProbe::DECISION_TOL {
                            status = QpStatus::PrimalInfeasible;
                            certificate = Some(cert);
                        }
                    }
                }
            }
        }
        if status == QpStatus::PrimalInfeasible {
            // Diverged iterates would poison later warm-started solves.
            self.x_s.fill(0.0);
            self.z_s.fill(0.0);
            self.y_s.fill(0.0);
        } else {
            self.polish();
            let (r_prim, r_dual) = self.residuals();
            if r_prim <= self.settings.tol_primal && r_dual <= self.settings.tol_dual {
                status = QpStatus::Optimal;
            } else if status == QpStatus::Optimal {
                status = QpStatus::MaxIterations;
            }
        }

        let (r_prim, r_dual) = self.residuals();
        let n = self.problem.num_vars();
        let x = self.unscaled_x();
        let y = self.unscaled_y();
        QpSolution {
            objective: self.problem.objective(&x),
            x,
            dual_eq: y.rows(0, self.n_eq).into(),
            dual_ineq: y.rows(self.n_eq, self.n_ineq).into(),
            dual_box: y.rows(self.n_eq + self.n_ineq, n).into(),
            status,
            primal_residual: r_prim,
            dual_residual: r_dual,
            iterations,
            infeasibility_certificate: certificate,
        }
    }

    /// Scaled-space residuals, used only to steer the penalty parameter.
    fn scaled_residuals(&self) -> (f64, f64) {
        let ax = &self.a_s * &self.x_s;
        let mut r_prim: f64 = 0.0;
        for i in 0..ax.len() {
            let v = (self.lower_s[i] - ax[i]).max(ax[i] - self.upper_s[i]).max(0.0);
            r_prim = r_prim.max(v);
        }
        let grad = &self.p_s * &self.x_s + &self.q_s + self.a_s.transpose() * &self.y_s;
        (r_prim, infinity_norm(&grad))
    }

    /// True (unscaled) residuals of the original problem.
    fn residuals(&self) -> (f64, f64) {
        let x = self.unscaled_x();
        let y = self.unscaled_y();
        self.residuals_at(&x, &y)
    }

    fn residuals_at(&self, x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
        let p = &self.problem;
        let n = p.num_vars();
        let mut r_prim: f64 = 0.0;
        let ex = &p.eq_matrix * x;
        for i in 0..ex.len() {
            r_prim = r_prim.max((ex[i] - p.eq_rhs[i]).abs());
        }
        let gx = &p.ineq_matrix * x;
        for i in 0..gx.len() {
            r_prim = r_prim.max((p.ineq_lower[i] - gx[i]).max(gx[i] - p.ineq_upper[i]).max(0.0));
        }
        for i in 0..n {
            r_prim = r_prim.max((p.var_lower[i] - x[i]).max(x[i] - p.var_upper[i]).max(0.0));
        }
        let mut grad = &p.cost_matrix * x + &p.cost_linear;
        grad += p.eq_matrix.transpose() * y.rows(0, self.n_eq);
        grad += p.ineq_matrix.transpose() * y.rows(self.n_eq, self.n_ineq);
        grad += y.rows(self.n_eq + self.n_ineq, n);
        (r_prim, infinity_norm(&grad))
    }

    /// Uniformly widens every finite constraint bound by `delta` (in original
    /// units) without touching the stored problem, giving the feasible set a
    /// strict interior. [`QpSolver::restore_bounds`] undoes it.
    pub fn inflate_bounds(&mut self, delta: f64) {
        self.refresh_scaled_bounds();
        for i in 0..self.lower_s.len() {
            if self.lower_s[i] > f64::NEG_INFINITY {
                self.lower_s[i] -= delta * self.e[i];
            }
            if self.upper_s[i] < f64::INFINITY {
                self.upper_s[i] += delta * self.e[i];
            }
        }
    }

    /// Resets the working bounds to the stored problem's bounds.
    pub fn restore_bounds(&mut self) {
        self.refresh_scaled_bounds();
    }

    /// OSQP-style primal infeasibility test on the dual step direction
    /// (scaled space; scaling preserves feasibility).
    fn primal_infeasibility_certificate(&self, delta_y: &DVector<f64>) -> Option<DVector<f64>> {
        let norm = infinity_norm(delta_y);
        if norm < 1e-14 {
            return None;
        }
        let dir = delta_y / norm;
        let at_dy = self.a_s.transpose() * &dir;
        if infinity_norm(&at_dy) > self.settings.tol_infeasible {
            return None;
        }
        let mut support = 0.0;
        for i in 0..dir.len() {
            let d = dir[i];
            if d > 0.0 {
                if self.upper_s[i] == f64::INFINITY {
                    return None;
                }
                support += self.upper_s[i] * d;
            } else if d < 0.0 {
                if self.lower_s[i] == f64::NEG_INFINITY {
                    return None;
                }
                support += self.lower_s[i] * d;
            }
        }
        if support < -self.settings.tol_infeasible {
            Some(DVector::from_fn(dir.len(), |i, _| self.e[i] * dir[i]))
        } else {
            None
        }
    }

    /// Re-solve the KKT system on the detected active set (in the original,
    /// unscaled problem) and accept the refined point when it improves both
    /// residuals.
    fn polish(&mut self) {
        let n = self.problem.num_vars();
        let m = self.lower_s.len();
        let x = self.unscaled_x();
        let y = self.unscaled_y();

        // Original-space rows and bounds, assembled per block.
        let row_coeff = |i: usize, out: &mut DVector<f64>| {
            if i < self.n_eq {
                out.copy_from(&self.problem.eq_matrix.row(i).transpose());
            } else if i < self.n_eq + self.n_ineq {
                out.copy_from(&self.problem.ineq_matrix.row(i - self.n_eq).transpose());
            } else {
                out.fill(0.0);
                out[i - self.n_eq - self.n_ineq] = 1.0;
            }
        };
        let bounds = |i: usize| -> (f64, f64) {
            if i < self.n_eq {
                (self.problem.eq_rhs[i], self.problem.eq_rhs[i])
            } else if i < self.n_eq + self.n_ineq {
                let j = i - self.n_eq;
                (self.problem.ineq_lower[j], self.problem.ineq_upper[j])
            } else {
                let j = i - self.n_eq - self.n_ineq;
                (self.problem.var_lower[j], self.problem.var_upper[j])
            }
        };

        let mut row_val = DVector::zeros(n);
        let mut active: Vec<(usize, f64, bool)> = Vec::new();
        for i in 0..m {
            let (lo, up) = bounds(i);
            if lo == up {
                active.push((i, lo, true));
                continue;
            }
            row_coeff(i, &mut row_val);
            let v = row_val.dot(&x);
            let y_i = y[i];
            if (y_i < -1e-9 || v - lo < 1e-7) && lo > f64::NEG_INFINITY {
                active.push((i, lo, false));
            } else if (y_i > 1e-9 || up - v < 1e-7) && up < f64::INFINITY {
                active.push((i, up, false));
            }
        }

        let k = active.len();
        let dim = n + k;
        let reg = 1e-9;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n))
            .copy_from(&self.problem.cost_matrix);
        for i in 0..n {
            kkt[(i, i)] += reg;
        }
        for (r, &(row, _, _)) in active.iter().enumerate() {
            row_coeff(row, &mut row_val);
            for c in 0..n {
                kkt[(n + r, c)] = row_val[c];
                kkt[(c, n + r)] = row_val[c];
            }
            kkt[(n + r, n + r)] = -reg;
        }
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n)
            .copy_from(&(-self.problem.cost_linear.clone()));
        for (r, &(_, bound, _)) in active.iter().enumerate() {
            rhs[n + r] = bound;
        }

        let lu = kkt.clone().lu();
        let Some(mut sol) = lu.solve(&rhs) else {
            return;
        };
        // Iterative refinement against the unregularized system.
        let mut unreg = kkt;
        for i in 0..n {
            unreg[(i, i)] -= reg;
        }
        for r in 0..k {
            unreg[(n + r, n + r)] += reg;
        }
        for _ in 0..3 {
            let resid = &rhs - &unreg * &sol;
            if infinity_norm(&resid) < 1e-14 {
                break;
            }
            if let Some(step) = lu.solve(&resid) {
                sol += step;
            } else {
                break;
            }
        }

        let x_pol: DVector<f64> = sol.rows(0, n).into();
        let mut y_pol = DVector::zeros(m);
        for (r, &(row, _, _)) in active.iter().enumerate() {
            y_pol[row] = sol[n + r];
        }
        // Reject sign-violating duals on non-equality rows.
        for &(row, bound, is_eq) in &active {
            if is_eq {
                continue;
            }
            let (lo, _) = bounds(row);
            let at_low = bound == lo;
            if at_low && y_pol[row] > 1e-7 {
                return;
            }
            if !at_low && y_pol[row] < -1e-7 {
                return;
            }
        }

        let (r_prim_old, r_dual_old) = self.residuals_at(&x, &y);
        let (r_prim_new, r_dual_new) = self.residuals_at(&x_pol, &y_pol);
        if r_prim_new <= r_prim_old.max(self.settings.tol_primal)
            && r_dual_new <= r_dual_old.max(self.settings.tol_dual)
        {
            // Accept: write back into scaled iterates so warm starts benefit.
            for i in 0..n {
                self.x_s[i] = x_pol[i] / self.d[i];
            }
            for i in 0..m {
                self.y_s[i] = self.c * y_pol[i] / self.e[i];
            }
            self.z_s = &self.a_s * &self.x_s;
        }
    }
}

/// Phase-1 feasibility decision for a problem's constraint system: minimize
/// a single uniform inflation `t >= 0` subject to `l - t <= Ax <= u + t`.
/// The inflated system always has a strict interior, so the splitting
/// converges decisively even where the original solve stalls on degenerate
/// geometry. The optimal `t` is the minimal uniform violation (zero exactly
/// when the system is feasible), and the probe duals assemble into a
/// Farkas-style infeasibility certificate.
///
/// The probe matrix depends only on the constraint pattern, so one probe can
/// be reused across bound changes via [`FeasibilityProbe::sync_bounds`].
pub struct FeasibilityProbe {
    solver: QpSolver,
    /// `(combined row index, side)` per probe row; side +1 is the lower copy
    /// `a.x + t >= l`, -1 the upper copy `a.x - t <= u`.
    sides: Vec<(usize, i8)>,
    n_eq: usize,
    n_ineq: usize,
    m_rows: usize,
}

impl FeasibilityProbe {
    /// Minimal inflation above which a system is declared infeasible.
    pub const DECISION_TOL: f64 = 1e-6;

    pub fn new(problem: &QpProblem, settings: &QpSettings) -> Result<Self, QpError> {
        problem.validate()?;
        let n = problem.num_vars();
        let n_eq = problem.eq_rhs.len();
        let n_ineq = problem.ineq_lower.len();
        let m_rows = n_eq + n_ineq + n;

        let bounds = probe_bounds(problem);
        let mut sides: Vec<(usize, i8)> = Vec::new();
        for (i, &(lo, up)) in bounds.iter().enumerate() {
            if lo > f64::NEG_INFINITY {
                sides.push((i, 1));
            }
            if up < f64::INFINITY {
                sides.push((i, -1));
            }
        }

        let mut probe = QpProblem::new(DMatrix::zeros(n + 1, n + 1), {
            let mut q = DVector::zeros(n + 1);
            q[n] = 1.0;
            q
        });
        probe.var_lower[n] = 0.0;
        let mut mat = DMatrix::zeros(sides.len(), n + 1);
        let mut lower = DVector::zeros(sides.len());
        let mut upper = DVector::zeros(sides.len());
        for (r, &(i, side)) in sides.iter().enumerate() {
            if i < n_eq {
                mat.view_mut((r, 0), (1, n)).copy_from(&problem.eq_matrix.row(i));
            } else if i < n_eq + n_ineq {
                mat.view_mut((r, 0), (1, n))
                    .copy_from(&problem.ineq_matrix.row(i - n_eq));
            } else {
                mat[(r, i - n_eq - n_ineq)] = 1.0;
            }
            mat[(r, n)] = f64::from(side);
            let (lo, up) = bounds[i];
            if side == 1 {
                lower[r] = lo;
                upper[r] = f64::INFINITY;
            } else {
                lower[r] = f64::NEG_INFINITY;
                upper[r] = up;
            }
        }
        probe.ineq_matrix = mat;
        probe.ineq_lower = lower;
        probe.ineq_upper = upper;

        let mut probe_settings = settings.clone();
        probe_settings.probe_on_stall = false;
        probe_settings.max_iter = probe_settings.max_iter.min(8_000);
        Ok(Self {
            solver: QpSolver::new(probe, probe_settings)?,
            sides,
            n_eq,
            n_ineq,
            m_rows,
        })
    }

    /// Copies the (possibly updated) bounds of `problem` into the probe. The
    /// constraint pattern must be unchanged.
    pub fn sync_bounds(&mut self, problem: &QpProblem) {
        let bounds = probe_bounds(problem);
        for (r, &(i, side)) in self.sides.iter().enumerate() {
            let (lo, up) = bounds[i];
            if side == 1 {
                self.solver.update_ineq_bounds(r, lo, f64::INFINITY);
            } else {
                self.solver.update_ineq_bounds(r, f64::NEG_INFINITY, up);
            }
        }
    }

    /// Returns the minimal uniform violation and the certificate direction
    /// over the combined rows (equalities, inequalities, box), or `None`
    /// when the probe itself could not be resolved.
    pub fn solve(&mut self) -> Option<(f64, DVector<f64>)> {
        self.solver.reset_duals();
        let sol = self.solver.solve();
        if sol.status != QpStatus::Optimal {
            return None;
        }
        let mut cert = DVector::zeros(self.m_rows);
        for (r, &(i, _)) in self.sides.iter().enumerate() {
            cert[i] += sol.dual_ineq[r];
        }
        let norm = infinity_norm(&cert);
        if norm > 0.0 {
            cert /= norm;
        }
        Some((sol.objective.max(0.0), cert))
    }

    /// A feasible point for the original system when the last probe solve
    /// found (near-)zero inflation.
    pub fn feasible_point(&self) -> DVector<f64> {
        let n = self.solver.problem().num_vars() - 1;
        let _ = (self.n_eq, self.n_ineq);
        self.solver.unscaled_x().rows(0, n).into_owned()
    }
}

fn probe_bounds(problem: &QpProblem) -> Vec<(f64, f64)> {
    let n = problem.num_vars();
    let n_eq = problem.eq_rhs.len();
    let n_ineq = problem.ineq_lower.len();
    let mut out = Vec::with_capacity(n_eq + n_ineq + n);
    for i in 0..n_eq {
        out.push((problem.eq_rhs[i], problem.eq_rhs[i]));
    }
    for i in 0..n_ineq {
        out.push((problem.ineq_lower[i], problem.ineq_upper[i]));
    }
    for i in 0..n {
        out.push((problem.var_lower[i], problem.var_upper[i]));
    }
    out
}

/// Modified Ruiz equilibration of the stacked problem data. Returns the
/// variable scaling `d`, the row scaling `e`, and the cost scaling `c`.
fn ruiz_equilibrate(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    q: &DVector<f64>,
    iters: usize,
) -> (DVector<f64>, DVector<f64>, f64) {
    let n = p.nrows();
    let m = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0f64;
    if iters == 0 {
        return (d, e, c);
    }
    let clamp = |v: f64| v.clamp(1e-8, 1e8);

    for _ in 0..iters {
        // Column norms over the stacked [P; A] with current scaling.
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max((c * d[i] * d[j] * p[(i, j)]).abs());
            }
            for i in 0..m {
                norm = norm.max((e[i] * d[j] * a[(i, j)]).abs());
            }
            d[j] *= 1.0 / clamp(norm).sqrt();
        }
        for i in 0..m {
            let mut norm: f64 = 0.0;
            for j in 0..n {
                norm = norm.max((e[i] * d[j] * a[(i, j)]).abs());
            }
            e[i] *= 1.0 / clamp(norm).sqrt();
        }
        // Cost scaling toward unit gradient magnitude.
        let mut mean_col = 0.0;
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max((c * d[i] * d[j] * p[(i, j)]).abs());
            }
            mean_col += norm;
        }
        mean_col /= n.max(1) as f64;
        let mut q_norm: f64 = 0.0;
        for j in 0..n {
            q_norm = q_norm.max((c * d[j] * q[j]).abs());
        }
        let gamma = 1.0 / clamp(mean_col.max(q_norm));
        c *= gamma;
    }
    (d, e, c)
}

/// One-shot convenience wrapper around [`QpSolver`].
pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let mut solver = QpSolver::new(problem.clone(), settings.clone())?;
    Ok(solver.solve())
}

fn infinity_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn settings() -> QpSettings {
        QpSettings::default()
    }

    /// Independent KKT residual check, recomputed from scratch.
    fn kkt_residuals(p: &QpProblem, sol: &QpSolution) -> (f64, f64, f64) {
        let grad = &p.cost_matrix * &sol.x
            + &p.cost_linear
            + p.eq_matrix.transpose() * &sol.dual_eq
            + p.ineq_matrix.transpose() * &sol.dual_ineq
            + &sol.dual_box;
        let stationarity = grad.amax();

        let mut primal: f64 = 0.0;
        let ex = &p.eq_matrix * &sol.x;
        for i in 0..ex.len() {
            primal = primal.max((ex[i] - p.eq_rhs[i]).abs());
        }
        let gx = &p.ineq_matrix * &sol.x;
        for i in 0..gx.len() {
            primal = primal.max((p.ineq_lower[i] - gx[i]).max(gx[i] - p.ineq_upper[i]).max(0.0));
        }
        for i in 0..sol.x.len() {
            primal = primal
                .max((p.var_lower[i] - sol.x[i]).max(sol.x[i] - p.var_upper[i]).max(0.0));
        }

        let mut compl: f64 = 0.0;
        for i in 0..gx.len() {
            let slack_up = p.ineq_upper[i] - gx[i];
            let slack_lo = gx[i] - p.ineq_lower[i];
            if sol.dual_ineq[i] > 0.0 && slack_up.is_finite() {
                compl = compl.max(sol.dual_ineq[i] * slack_up.max(0.0));
            }
            if sol.dual_ineq[i] < 0.0 && slack_lo.is_finite() {
                compl = compl.max(-sol.dual_ineq[i] * slack_lo.max(0.0));
            }
        }
        (stationarity, primal, compl)
    }

    #[test]
    fn scalar_clamped_minimum() {
        // minimize (y-1)^2 s.t. y <= 0  ->  y* = 0, objective 1.
        let mut p = QpProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -2.0),
        );
        p.cost_constant = 1.0;
        p.var_upper[0] = 0.0;
        let sol = solve_qp(&p, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn unconstrained_matches_linear_solve() {
        let p_mat = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.2, 0.0, 0.2, 2.0]);
        let q = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let p = QpProblem::new(p_mat.clone(), q.clone());
        let sol = solve_qp(&p, &settings()).unwrap();
        let expected = p_mat.lu().solve(&(-q)).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x - expected).amax() < 1e-6);
    }

    #[test]
    fn equality_constrained() {
        // minimize x'x s.t. x0 + x1 = 1 -> (0.5, 0.5)
        let mut p = QpProblem::new(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2));
        p.eq_matrix = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.eq_rhs = DVector::from_element(1, 1.0);
        let sol = solve_qp(&p, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.x[1], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn random_psd_qps_meet_kkt_tolerances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..30 {
            let n = rng.gen_range(2..8);
            let m = rng.gen_range(1..6);
            let f = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let mut pm = &f * f.transpose();
            for i in 0..n {
                pm[(i, i)] += 0.1;
            }
            let q = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let mut p = QpProblem::new(pm, q);
            for _ in 0..m {
                let row = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                p.push_ineq_row(row, rng.gen_range(0.1..2.0));
            }
            for i in 0..n {
                p.var_lower[i] = -5.0;
                p.var_upper[i] = 5.0;
            }
            let sol = solve_qp(&p, &settings()).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal, "trial {trial}");
            let (stat, prim, compl) = kkt_residuals(&p, &sol);
            assert!(stat <= 1e-6, "trial {trial}: stationarity {stat}");
            assert!(prim <= 1e-6, "trial {trial}: primal {prim}");
            assert!(compl <= 1e-5, "trial {trial}: complementarity {compl}");
        }
    }

    #[test]
    fn badly_scaled_rows_still_converge() {
        // Mimics big-M rows: one coefficient at 12, others at 0.02.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 6;
        let mut pm = DMatrix::zeros(n, n);
        for i in 0..4 {
            pm[(i, i)] = 2.0;
        }
        let q = DVector::from_fn(n, |i, _| if i < 4 { rng.gen_range(-1.0..1.0) } else { 0.0 });
        let mut p = QpProblem::new(pm, q);
        for _ in 0..4 {
            let mut row = DVector::zeros(n);
            for i in 0..4 {
                row[i] = rng.gen_range(0.01..0.05);
            }
            row[4 + rng.gen_range(0..2)] = 12.0;
            p.push_ranged_row(row, 0.4, f64::INFINITY);
        }
        for i in 0..n {
            p.var_lower[i] = if i < 4 { -0.5 } else { 0.0 };
            p.var_upper[i] = if i < 4 { 0.5 } else { 1.0 };
        }
        let sol = solve_qp(&p, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.iterations < 2000, "took {} iterations", sol.iterations);
        let (stat, prim, _) = kkt_residuals(&p, &sol);
        assert!(stat <= 1e-6 && prim <= 1e-6);
    }

    #[test]
    fn detects_primal_infeasibility() {
        // x >= 1 and x <= -1 cannot hold together.
        let mut p = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1));
        p.push_ineq_row(DVector::from_element(1, 1.0), -1.0);
        p.var_lower[0] = 1.0;
        let sol = solve_qp(&p, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
        assert!(sol.infeasibility_certificate.is_some());
    }

    #[test]
    fn objective_scaling_keeps_argmin() {
        let pm = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = DVector::from_row_slice(&[1.0, -1.0]);
        let mut p = QpProblem::new(pm, q);
        p.push_ineq_row(DVector::from_row_slice(&[1.0, 1.0]), 0.3);
        let sol1 = solve_qp(&p, &settings()).unwrap();
        let mut p2 = p.clone();
        p2.cost_matrix *= 7.0;
        p2.cost_linear *= 7.0;
        let sol2 = solve_qp(&p2, &settings()).unwrap();
        assert!((sol1.x - &sol2.x).amax() < 1e-5);
        // Duals scale with the objective.
        assert!((&sol1.dual_ineq * 7.0 - &sol2.dual_ineq).amax() < 1e-4);
    }

    #[test]
    fn redundant_constraint_changes_nothing() {
        let mut p = QpProblem::new(DMatrix::identity(2, 2), DVector::from_row_slice(&[-1.0, -1.0]));
        p.push_ineq_row(DVector::from_row_slice(&[1.0, 0.0]), 0.4);
        let base = solve_qp(&p, &settings()).unwrap();
        let mut p2 = p.clone();
        // Implied by x0 <= 0.4.
        p2.push_ineq_row(DVector::from_row_slice(&[2.0, 0.0]), 0.8);
        let again = solve_qp(&p2, &settings()).unwrap();
        assert!((base.objective - again.objective).abs() <= 1e-6);
    }

    #[test]
    fn deterministic_across_runs() {
        let pm = DMatrix::from_row_slice(2, 2, &[3.0, 0.1, 0.1, 2.0]);
        let q = DVector::from_row_slice(&[0.3, -0.7]);
        let mut p = QpProblem::new(pm, q);
        p.push_ineq_row(DVector::from_row_slice(&[1.0, -1.0]), 0.2);
        let a = solve_qp(&p, &settings()).unwrap();
        let b = solve_qp(&p, &settings()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let p = QpProblem {
            cost_matrix: DMatrix::identity(2, 3),
            ..QpProblem::new(DMatrix::identity(2, 2), DVector::zeros(2))
        };
        assert!(matches!(
            solve_qp(&p, &settings()),
            Err(QpError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn rejects_indefinite_cost() {
        let p = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -4.0]),
            DVector::zeros(2),
        );
        assert!(matches!(solve_qp(&p, &settings()), Err(QpError::NotPsd)));
    }

    #[test]
    fn warm_started_resolve_reuses_factorization() {
        let mut p = QpProblem::new(DMatrix::identity(2, 2), DVector::from_row_slice(&[-2.0, 0.0]));
        p.var_upper[0] = 1.0;
        let mut solver = QpSolver::new(p, settings()).unwrap();
        let first = solver.solve();
        assert_abs_diff_eq!(first.x[0], 1.0, epsilon = 1e-7);
        // Tighten the box; the cached factorization must still be valid.
        solver.update_var_bounds(0, f64::NEG_INFINITY, 0.5);
        let second = solver.solve();
        assert_abs_diff_eq!(second.x[0], 0.5, epsilon = 1e-7);
        assert_eq!(second.status, QpStatus::Optimal);
    }
}
