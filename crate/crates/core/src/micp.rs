//! The parametric mixed-integer convex program for multi-robot navigation.
//!
//! States are eliminated through the double-integrator dynamics, so every
//! generated QP is expressed over the stacked acceleration inputs (plus the
//! binary variables when relaxed). For robot `i` with initial state
//! `(p0, v0)` and sampling period `tau`:
//!
//! ```text
//!   v(k) = v0 + tau * sum_{s<k} u(s)
//!   p(k) = p0 + k*tau*v0 + tau^2 * sum_{s<k} (k - s - 1/2) * u(s)
//! ```
//!
//! Collision avoidance between robots and against rotated rectangular
//! obstacles uses four big-M separation rows per pair per step, at most three
//! of which may be deactivated (bit = 1) at once.

use crate::qp::QpProblem;
use crate::scene::{ObstacleParams, RobotParams, SceneGraph, Workspace};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MicpError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("assignment does not cover every (edge, step) slot")]
    IncompleteAssignment,
    #[error("cardinality violated on edge {edge} step {step}: all four bits set")]
    CardinalityViolation { edge: usize, step: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("refinement requires a feasible (trajectory, assignment) pair; max violation {0:.3e}")]
    InfeasibleInput(f64),
}

/// Horizon, period, big-M and objective weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicpConfig {
    /// Control horizon length H (steps).
    pub horizon: usize,
    /// Sampling period tau (seconds).
    pub dt: f64,
    /// Big-M constant; `None` derives it from workspace and obstacle spans.
    pub big_m: Option<f64>,
    /// Stage weight on squared distance to goal.
    pub w_pos: f64,
    /// Stage weight on squared input.
    pub w_input: f64,
    /// Terminal weight on squared distance to goal.
    pub w_terminal: f64,
}

impl Default for MicpConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.2,
            big_m: None,
            w_pos: 1.0,
            w_input: 1.0,
            w_terminal: 10.0,
        }
    }
}

/// A coupling edge carrying binary variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKey {
    /// Unordered robot pair, canonical orientation `i < j`.
    Rr { i: usize, j: usize },
    /// Robot-obstacle pair.
    Ro { robot: usize, obstacle: usize },
}

/// Values of all binary variables: 4 slots per edge per step `k = 1..=H`,
/// flattened edge-major then step-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryAssignment {
    pub horizon: usize,
    pub edges: Vec<EdgeKey>,
    pub bits: Vec<u8>,
}

impl BinaryAssignment {
    pub fn zeros(edges: Vec<EdgeKey>, horizon: usize) -> Self {
        let bits = vec![0; edges.len() * 4 * horizon];
        Self { horizon, edges, bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Flat index of slot `m in 0..4` at step `k in 1..=H` of edge `e`.
    pub fn index(&self, edge: usize, k: usize, m: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&k) && m < 4);
        edge * 4 * self.horizon + (k - 1) * 4 + m
    }

    pub fn get(&self, edge: usize, k: usize, m: usize) -> u8 {
        self.bits[self.index(edge, k, m)]
    }

    pub fn set(&mut self, edge: usize, k: usize, m: usize, value: u8) {
        let idx = self.index(edge, k, m);
        self.bits[idx] = value;
    }

    /// Checks the per-(edge, step) cardinality bound (at most 3 ones).
    pub fn validate(&self) -> Result<(), MicpError> {
        for e in 0..self.edges.len() {
            for k in 1..=self.horizon {
                let s: u8 = (0..4).map(|m| self.get(e, k, m)).sum();
                if s > 3 {
                    return Err(MicpError::CardinalityViolation { edge: e, step: k });
                }
            }
        }
        Ok(())
    }

    /// Bits of one edge as a contiguous slice (length 4H).
    pub fn edge_bits(&self, edge: usize) -> &[u8] {
        let w = 4 * self.horizon;
        &self.bits[edge * w..(edge + 1) * w]
    }
}

/// State/input histories per robot. States are `[px, py, vx, vy]` for
/// `k = 0..=H`; inputs `[ux, uy]` for `k = 0..H-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<[f64; 4]>>,
    pub inputs: Vec<Vec<[f64; 2]>>,
}

impl Trajectory {
    /// Rolls the double-integrator forward from the robots' initial states.
    pub fn rollout(robots: &[RobotParams], inputs: Vec<Vec<[f64; 2]>>, dt: f64) -> Self {
        let mut states = Vec::with_capacity(robots.len());
        for (robot, u) in robots.iter().zip(&inputs) {
            let mut traj = Vec::with_capacity(u.len() + 1);
            let mut p = robot.p;
            let mut v = robot.v;
            traj.push([p[0], p[1], v[0], v[1]]);
            for &uk in u {
                p[0] += dt * v[0] + 0.5 * dt * dt * uk[0];
                p[1] += dt * v[1] + 0.5 * dt * dt * uk[1];
                v[0] += dt * uk[0];
                v[1] += dt * uk[1];
                traj.push([p[0], p[1], v[0], v[1]]);
            }
            states.push(traj);
        }
        Self { states, inputs }
    }

    pub fn position(&self, robot: usize, k: usize) -> [f64; 2] {
        let s = self.states[robot][k];
        [s[0], s[1]]
    }
}

/// Max positive residual per constraint family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolationReport {
    pub bounds: f64,
    pub dynamics: f64,
    pub rr_rows: f64,
    pub ro_rows: f64,
    pub feasible: bool,
    pub tol: f64,
}

impl ViolationReport {
    pub fn max_violation(&self) -> f64 {
        self.bounds.max(self.dynamics).max(self.rr_rows).max(self.ro_rows)
    }
}

/// Where a condensed constraint row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Position or velocity bound of one robot.
    StateBound { robot: usize },
    /// Big-M separation row between two robots.
    RobotRobot { edge: usize, k: usize, m: usize },
    /// Big-M separation row against an obstacle.
    RobotObstacle { edge: usize, k: usize, m: usize },
}

/// One constraint row expressed over per-robot input segments (binaries
/// already substituted into the bounds).
#[derive(Debug, Clone)]
pub struct CondensedRow {
    /// `(robot, coefficients over that robot's 2H inputs)`, robots distinct.
    pub segments: Vec<(usize, Vec<f64>)>,
    pub lower: f64,
    pub upper: f64,
    pub kind: RowKind,
}

/// The full parametric MICP for one planning step.
#[derive(Debug, Clone)]
pub struct MicpInstance {
    pub config: MicpConfig,
    pub big_m: f64,
    pub workspace: Workspace,
    pub robots: Vec<RobotParams>,
    pub obstacles: Vec<ObstacleParams>,
    pub graph: SceneGraph,
    /// RR edges first (graph order), then RO edges (graph order).
    pub edges: Vec<EdgeKey>,
}

/// Derives the default big-M: workspace span plus obstacle extent slack.
fn default_big_m(workspace: &Workspace, obstacles: &[ObstacleParams]) -> f64 {
    let span = (workspace.x_max - workspace.x_min) + (workspace.y_max - workspace.y_min);
    let obs = obstacles
        .iter()
        .map(|o| o.half_length + o.half_width)
        .fold(0.0, f64::max);
    span + 2.0 * obs + 2.0 * workspace.d_min
}

/// Builds the instance from a scene and its graph.
pub fn build_instance(
    robots: &[RobotParams],
    obstacles: &[ObstacleParams],
    graph: &SceneGraph,
    workspace: &Workspace,
    config: &MicpConfig,
) -> Result<MicpInstance, MicpError> {
    if config.horizon == 0 {
        return Err(MicpError::InvalidConfig("horizon must be >= 1".into()));
    }
    if config.dt <= 0.0 {
        return Err(MicpError::InvalidConfig("dt must be positive".into()));
    }
    if let Some(m) = config.big_m {
        if m <= 0.0 {
            return Err(MicpError::InvalidConfig("big_m must be positive".into()));
        }
    }
    if config.w_pos <= 0.0 || config.w_input <= 0.0 || config.w_terminal <= 0.0 {
        return Err(MicpError::InvalidConfig("weights must be positive".into()));
    }

    let mut edges = Vec::with_capacity(graph.edges_rr.len() + graph.edges_ro.len());
    for &(i, j) in &graph.edges_rr {
        edges.push(EdgeKey::Rr { i: i.min(j), j: i.max(j) });
    }
    for &(robot, obstacle) in &graph.edges_ro {
        edges.push(EdgeKey::Ro { robot, obstacle });
    }

    Ok(MicpInstance {
        big_m: config.big_m.unwrap_or_else(|| default_big_m(workspace, obstacles)),
        config: config.clone(),
        workspace: workspace.clone(),
        robots: robots.to_vec(),
        obstacles: obstacles.to_vec(),
        graph: graph.clone(),
        edges,
    })
}

/// Big-M row geometry: coefficients `(ax, ay)` on the owner robot's position
/// (negated on the partner for RR rows) and the separation right-hand side.
fn rr_row_coeffs(m: usize, d_min: f64) -> (f64, f64, f64) {
    match m {
        0 => (1.0, 0.0, 2.0 * d_min),
        1 => (-1.0, 0.0, 2.0 * d_min),
        2 => (0.0, 1.0, 2.0 * d_min),
        3 => (0.0, -1.0, 2.0 * d_min),
        _ => unreachable!(),
    }
}

fn ro_row_coeffs(obstacle: &ObstacleParams, m: usize, d_min: f64) -> (f64, f64, f64) {
    let (s, c) = obstacle.alpha.sin_cos();
    match m {
        0 => (c, s, obstacle.half_length + d_min),
        1 => (-s, c, obstacle.half_width + d_min),
        2 => (-c, -s, obstacle.half_length + d_min),
        3 => (s, -c, obstacle.half_width + d_min),
        _ => unreachable!(),
    }
}

impl MicpInstance {
    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn num_robots(&self) -> usize {
        self.robots.len()
    }

    /// Inputs per robot in the condensed variable vector.
    pub fn inputs_per_robot(&self) -> usize {
        2 * self.config.horizon
    }

    pub fn num_inputs(&self) -> usize {
        self.num_robots() * self.inputs_per_robot()
    }

    pub fn num_binaries(&self) -> usize {
        self.edges.len() * 4 * self.config.horizon
    }

    pub fn empty_assignment(&self) -> BinaryAssignment {
        BinaryAssignment::zeros(self.edges.clone(), self.config.horizon)
    }

    /// Coefficient of input `u_a(s)` on position `p_a(k)`.
    fn pos_coeff(&self, k: usize, s: usize) -> f64 {
        if s < k {
            self.config.dt * self.config.dt * (k as f64 - s as f64 - 0.5)
        } else {
            0.0
        }
    }

    /// Input-free part of `p_a(k)` for one robot.
    fn pos_offset(&self, robot: usize, k: usize, axis: usize) -> f64 {
        let r = &self.robots[robot];
        r.p[axis] + k as f64 * self.config.dt * r.v[axis]
    }

    /// Per-robot objective blocks `(P_i, q_i, const_i)` over its 2H inputs,
    /// in `1/2 u'Pu + q'u + c` form.
    pub fn objective_blocks(&self) -> Vec<(DMatrix<f64>, DVector<f64>, f64)> {
        let h = self.config.horizon;
        let n = self.inputs_per_robot();
        let mut out = Vec::with_capacity(self.num_robots());
        for (r, robot) in self.robots.iter().enumerate() {
            let mut p = DMatrix::zeros(n, n);
            let mut q = DVector::zeros(n);
            let mut c = 0.0;
            for axis in 0..2 {
                // Stage and terminal goal-tracking terms.
                for k in 0..=h {
                    let w = if k == h {
                        self.config.w_terminal
                    } else {
                        self.config.w_pos
                    };
                    let off = self.pos_offset(r, k, axis) - robot.goal[axis];
                    if k == 0 {
                        c += w * off * off;
                        continue;
                    }
                    for s1 in 0..k.min(h) {
                        let g1 = self.pos_coeff(k, s1);
                        q[2 * s1 + axis] += 2.0 * w * off * g1;
                        for s2 in 0..k.min(h) {
                            p[(2 * s1 + axis, 2 * s2 + axis)] += 2.0 * w * g1 * self.pos_coeff(k, s2);
                        }
                    }
                    c += w * off * off;
                }
                // Input effort.
                for k in 0..h {
                    p[(2 * k + axis, 2 * k + axis)] += 2.0 * self.config.w_input;
                }
            }
            out.push((p, q, c));
        }
        out
    }

    /// State-bound rows (positions and velocities, steps 1..=H) for one robot,
    /// as `(coeffs over its 2H inputs, lower, upper)`.
    fn state_bound_rows(&self, robot: usize) -> Vec<(Vec<f64>, f64, f64)> {
        let h = self.config.horizon;
        let n = self.inputs_per_robot();
        let ws = &self.workspace;
        let r = &self.robots[robot];
        let mut rows = Vec::with_capacity(4 * h);
        for k in 1..=h {
            for axis in 0..2 {
                let mut coeffs = vec![0.0; n];
                for s in 0..k {
                    coeffs[2 * s + axis] = self.pos_coeff(k, s);
                }
                let off = self.pos_offset(robot, k, axis);
                let (lo, up) = if axis == 0 {
                    (ws.x_min, ws.x_max)
                } else {
                    (ws.y_min, ws.y_max)
                };
                rows.push((coeffs, lo - off, up - off));
            }
            for axis in 0..2 {
                let mut coeffs = vec![0.0; n];
                for s in 0..k {
                    coeffs[2 * s + axis] = self.config.dt;
                }
                rows.push((coeffs, -ws.v_max - r.v[axis], ws.v_max - r.v[axis]));
            }
        }
        rows
    }

    /// All condensed rows with binaries substituted in (`M` moved to the
    /// right-hand side on rows whose bit is 1).
    pub fn condensed_rows(
        &self,
        assignment: &BinaryAssignment,
    ) -> Result<Vec<CondensedRow>, MicpError> {
        self.check_assignment(assignment)?;
        let h = self.config.horizon;
        let m_big = self.big_m;
        let mut rows = Vec::new();

        for robot in 0..self.num_robots() {
            for (coeffs, lower, upper) in self.state_bound_rows(robot) {
                rows.push(CondensedRow {
                    segments: vec![(robot, coeffs)],
                    lower,
                    upper,
                    kind: RowKind::StateBound { robot },
                });
            }
        }

        for (e, key) in self.edges.iter().enumerate() {
            match *key {
                EdgeKey::Rr { i, j } => {
                    for k in 1..=h {
                        for m in 0..4 {
                            let (ax, ay, sep) = rr_row_coeffs(m, self.workspace.d_min);
                            let mut ci = vec![0.0; self.inputs_per_robot()];
                            let mut cj = vec![0.0; self.inputs_per_robot()];
                            for s in 0..k {
                                let g = self.pos_coeff(k, s);
                                ci[2 * s] = ax * g;
                                ci[2 * s + 1] = ay * g;
                                cj[2 * s] = -ax * g;
                                cj[2 * s + 1] = -ay * g;
                            }
                            let off = ax
                                * (self.pos_offset(i, k, 0) - self.pos_offset(j, k, 0))
                                + ay * (self.pos_offset(i, k, 1) - self.pos_offset(j, k, 1));
                            let relaxed = f64::from(assignment.get(e, k, m)) * m_big;
                            rows.push(CondensedRow {
                                segments: vec![(i, ci), (j, cj)],
                                lower: sep - relaxed - off,
                                upper: f64::INFINITY,
                                kind: RowKind::RobotRobot { edge: e, k, m },
                            });
                        }
                    }
                }
                EdgeKey::Ro { robot, obstacle } => {
                    let obs = &self.obstacles[obstacle];
                    for k in 1..=h {
                        for m in 0..4 {
                            let (ax, ay, sep) = ro_row_coeffs(obs, m, self.workspace.d_min);
                            let mut c = vec![0.0; self.inputs_per_robot()];
                            for s in 0..k {
                                let g = self.pos_coeff(k, s);
                                c[2 * s] = ax * g;
                                c[2 * s + 1] = ay * g;
                            }
                            let off = ax * (self.pos_offset(robot, k, 0) - obs.center[0])
                                + ay * (self.pos_offset(robot, k, 1) - obs.center[1]);
                            let relaxed = f64::from(assignment.get(e, k, m)) * m_big;
                            rows.push(CondensedRow {
                                segments: vec![(robot, c)],
                                lower: sep - relaxed - off,
                                upper: f64::INFINITY,
                                kind: RowKind::RobotObstacle { edge: e, k, m },
                            });
                        }
                    }
                }
            }
        }
        Ok(rows)
    }

    fn check_assignment(&self, assignment: &BinaryAssignment) -> Result<(), MicpError> {
        if assignment.edges != self.edges || assignment.horizon != self.config.horizon {
            return Err(MicpError::IncompleteAssignment);
        }
        assignment.validate()
    }

    /// Assembles the centralized objective over all stacked inputs.
    fn centralized_objective(&self) -> (DMatrix<f64>, DVector<f64>, f64) {
        let n = self.num_inputs();
        let per = self.inputs_per_robot();
        let mut p = DMatrix::zeros(n, n);
        let mut q = DVector::zeros(n);
        let mut c = 0.0;
        for (r, (pi, qi, ci)) in self.objective_blocks().into_iter().enumerate() {
            p.view_mut((r * per, r * per), (per, per)).copy_from(&pi);
            q.rows_mut(r * per, per).copy_from(&qi);
            c += ci;
        }
        (p, q, c)
    }

    fn input_box(&self, problem: &mut QpProblem) {
        let a = self.workspace.a_max;
        for i in 0..self.num_inputs() {
            problem.var_lower[i] = -a;
            problem.var_upper[i] = a;
        }
    }

    /// Fixes every binary and returns the remaining convex program over the
    /// stacked inputs. Rows whose bit is 1 have `M` moved to the bound.
    pub fn fix_binaries(&self, assignment: &BinaryAssignment) -> Result<QpProblem, MicpError> {
        let rows = self.condensed_rows(assignment)?;
        let (p, q, c) = self.centralized_objective();
        let n = self.num_inputs();
        let per = self.inputs_per_robot();

        let mut problem = QpProblem::new(p, q);
        problem.cost_constant = c;
        self.input_box(&mut problem);

        let m = rows.len();
        let mut mat = DMatrix::zeros(m, n);
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        for (ri, row) in rows.iter().enumerate() {
            for (robot, coeffs) in &row.segments {
                for (ci, &v) in coeffs.iter().enumerate() {
                    mat[(ri, robot * per + ci)] = v;
                }
            }
            lower[ri] = row.lower;
            upper[ri] = row.upper;
        }
        problem.ineq_matrix = mat;
        problem.ineq_lower = lower;
        problem.ineq_upper = upper;
        Ok(problem)
    }

    /// Like [`MicpInstance::fix_binaries`] but with a nonnegative slack on
    /// every big-M row, penalized linearly. Returns the problem and the
    /// number of slack variables (appended after the inputs).
    pub fn fix_binaries_soft(
        &self,
        assignment: &BinaryAssignment,
        slack_weight: f64,
    ) -> Result<(QpProblem, usize), MicpError> {
        let rows = self.condensed_rows(assignment)?;
        let n_slack = rows
            .iter()
            .filter(|r| !matches!(r.kind, RowKind::StateBound { .. }))
            .count();
        let (p0, q0, c) = self.centralized_objective();
        let n = self.num_inputs();
        let per = self.inputs_per_robot();
        let total = n + n_slack;

        let mut p = DMatrix::zeros(total, total);
        p.view_mut((0, 0), (n, n)).copy_from(&p0);
        let mut q = DVector::zeros(total);
        q.rows_mut(0, n).copy_from(&q0);
        for s in 0..n_slack {
            q[n + s] = slack_weight;
        }
        let mut problem = QpProblem::new(p, q);
        problem.cost_constant = c;
        self.input_box(&mut problem);
        for s in 0..n_slack {
            problem.var_lower[n + s] = 0.0;
            problem.var_upper[n + s] = f64::INFINITY;
        }

        let m = rows.len();
        let mut mat = DMatrix::zeros(m, total);
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        let mut slack = 0usize;
        for (ri, row) in rows.iter().enumerate() {
            for (robot, coeffs) in &row.segments {
                for (ci, &v) in coeffs.iter().enumerate() {
                    mat[(ri, robot * per + ci)] = v;
                }
            }
            if !matches!(row.kind, RowKind::StateBound { .. }) {
                mat[(ri, n + slack)] = 1.0;
                slack += 1;
            }
            lower[ri] = row.lower;
            upper[ri] = row.upper;
        }
        problem.ineq_matrix = mat;
        problem.ineq_lower = lower;
        problem.ineq_upper = upper;
        Ok((problem, n_slack))
    }

    /// Continuous relaxation: unfixed bits become variables in `[0, 1]` and
    /// each (edge, step) keeps its `sum <= 3` cardinality row. `fixed` is a
    /// flat slice over the binary layout; `None` leaves the bit free.
    pub fn relax_binaries(&self, fixed: &[Option<u8>]) -> Result<QpProblem, MicpError> {
        if fixed.len() != self.num_binaries() {
            return Err(MicpError::IncompleteAssignment);
        }
        let zeros = self.empty_assignment();
        let rows = self.condensed_rows(&zeros)?;
        let n_u = self.num_inputs();
        let n_b = self.num_binaries();
        let n = n_u + n_b;
        let per = self.inputs_per_robot();
        let h = self.config.horizon;

        let (p0, q0, c) = self.centralized_objective();
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (n_u, n_u)).copy_from(&p0);
        let q = {
            let mut q = DVector::zeros(n);
            q.rows_mut(0, n_u).copy_from(&q0);
            q
        };
        let mut problem = QpProblem::new(p, q);
        problem.cost_constant = c;
        self.input_box(&mut problem);
        for (b, f) in fixed.iter().enumerate() {
            let (lo, up) = match f {
                Some(v) => (f64::from(*v), f64::from(*v)),
                None => (0.0, 1.0),
            };
            problem.var_lower[n_u + b] = lo;
            problem.var_upper[n_u + b] = up;
        }

        let n_card = self.edges.len() * h;
        let m = rows.len() + n_card;
        let mut mat = DMatrix::zeros(m, n);
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        for (ri, row) in rows.iter().enumerate() {
            for (robot, coeffs) in &row.segments {
                for (ci, &v) in coeffs.iter().enumerate() {
                    mat[(ri, robot * per + ci)] = v;
                }
            }
            // The bit joins the left-hand side with coefficient +M.
            match row.kind {
                RowKind::RobotRobot { edge, k, m: slot }
                | RowKind::RobotObstacle { edge, k, m: slot } => {
                    let b = zeros.index(edge, k, slot);
                    mat[(ri, n_u + b)] = self.big_m;
                }
                RowKind::StateBound { .. } => {}
            }
            lower[ri] = row.lower;
            upper[ri] = row.upper;
        }
        let mut ri = rows.len();
        for e in 0..self.edges.len() {
            for k in 1..=h {
                for m_slot in 0..4 {
                    mat[(ri, n_u + zeros.index(e, k, m_slot))] = 1.0;
                }
                lower[ri] = f64::NEG_INFINITY;
                upper[ri] = 3.0;
                ri += 1;
            }
        }
        problem.ineq_matrix = mat;
        problem.ineq_lower = lower;
        problem.ineq_upper = upper;
        Ok(problem)
    }

    /// Extracts per-robot inputs from a stacked QP primal vector and rolls
    /// out the trajectory.
    pub fn trajectory_from_primal(&self, x: &DVector<f64>) -> Trajectory {
        let h = self.config.horizon;
        let per = self.inputs_per_robot();
        let inputs: Vec<Vec<[f64; 2]>> = (0..self.num_robots())
            .map(|r| {
                (0..h)
                    .map(|k| [x[r * per + 2 * k], x[r * per + 2 * k + 1]])
                    .collect()
            })
            .collect();
        Trajectory::rollout(&self.robots, inputs, self.config.dt)
    }

    /// The objective of Eq-style goal tracking plus input effort, summed over
    /// robots and stages.
    pub fn evaluate_cost(&self, trajectory: &Trajectory) -> Result<f64, MicpError> {
        let h = self.config.horizon;
        if trajectory.states.len() != self.num_robots()
            || trajectory.inputs.len() != self.num_robots()
        {
            return Err(MicpError::DimensionMismatch("robot count".into()));
        }
        let mut total = 0.0;
        for (r, robot) in self.robots.iter().enumerate() {
            if trajectory.states[r].len() != h + 1 || trajectory.inputs[r].len() != h {
                return Err(MicpError::DimensionMismatch(format!(
                    "robot {r}: expected {} states and {h} inputs",
                    h + 1
                )));
            }
            for k in 0..h {
                let s = trajectory.states[r][k];
                let u = trajectory.inputs[r][k];
                let dx = s[0] - robot.goal[0];
                let dy = s[1] - robot.goal[1];
                total += self.config.w_pos * (dx * dx + dy * dy);
                total += self.config.w_input * (u[0] * u[0] + u[1] * u[1]);
            }
            let s = trajectory.states[r][h];
            let dx = s[0] - robot.goal[0];
            let dy = s[1] - robot.goal[1];
            total += self.config.w_terminal * (dx * dx + dy * dy);
        }
        Ok(total)
    }

    /// Left-hand side of big-M row `(edge, k, m)` evaluated on a trajectory
    /// (before any `- M b` relaxation), and its separation right-hand side.
    pub fn row_lhs_rhs(
        &self,
        edge: usize,
        k: usize,
        m: usize,
        trajectory: &Trajectory,
    ) -> (f64, f64) {
        match self.edges[edge] {
            EdgeKey::Rr { i, j } => {
                let (ax, ay, sep) = rr_row_coeffs(m, self.workspace.d_min);
                let pi = trajectory.position(i, k);
                let pj = trajectory.position(j, k);
                (ax * (pi[0] - pj[0]) + ay * (pi[1] - pj[1]), sep)
            }
            EdgeKey::Ro { robot, obstacle } => {
                let obs = &self.obstacles[obstacle];
                let (ax, ay, sep) = ro_row_coeffs(obs, m, self.workspace.d_min);
                let p = trajectory.position(robot, k);
                (
                    ax * (p[0] - obs.center[0]) + ay * (p[1] - obs.center[1]),
                    sep,
                )
            }
        }
    }

    /// Max positive residual per constraint family for a candidate solution.
    pub fn check_feasibility(
        &self,
        trajectory: &Trajectory,
        assignment: &BinaryAssignment,
        tol: f64,
    ) -> ViolationReport {
        let h = self.config.horizon;
        let ws = &self.workspace;
        let dt = self.config.dt;
        let mut bounds: f64 = 0.0;
        let mut dynamics: f64 = 0.0;
        for r in 0..self.num_robots() {
            for k in 0..=h {
                let s = trajectory.states[r][k];
                if k >= 1 {
                    bounds = bounds
                        .max(ws.x_min - s[0])
                        .max(s[0] - ws.x_max)
                        .max(ws.y_min - s[1])
                        .max(s[1] - ws.y_max)
                        .max(s[2].abs() - ws.v_max)
                        .max(s[3].abs() - ws.v_max);
                }
                if k < h {
                    let u = trajectory.inputs[r][k];
                    bounds = bounds.max(u[0].abs() - ws.a_max).max(u[1].abs() - ws.a_max);
                    let next = trajectory.states[r][k + 1];
                    let pred_px = s[0] + dt * s[2] + 0.5 * dt * dt * u[0];
                    let pred_py = s[1] + dt * s[3] + 0.5 * dt * dt * u[1];
                    let pred_vx = s[2] + dt * u[0];
                    let pred_vy = s[3] + dt * u[1];
                    dynamics = dynamics
                        .max((next[0] - pred_px).abs())
                        .max((next[1] - pred_py).abs())
                        .max((next[2] - pred_vx).abs())
                        .max((next[3] - pred_vy).abs());
                }
            }
        }

        let mut rr: f64 = 0.0;
        let mut ro: f64 = 0.0;
        for (e, key) in self.edges.iter().enumerate() {
            for k in 1..=h {
                for m in 0..4 {
                    let (lhs, sep) = self.row_lhs_rhs(e, k, m, trajectory);
                    let relax = f64::from(assignment.get(e, k, m)) * self.big_m;
                    let violation = sep - relax - lhs;
                    match key {
                        EdgeKey::Rr { .. } => rr = rr.max(violation),
                        EdgeKey::Ro { .. } => ro = ro.max(violation),
                    }
                }
            }
        }

        let feasible = bounds <= tol && dynamics <= tol && rr <= tol && ro <= tol;
        ViolationReport {
            bounds: bounds.max(0.0),
            dynamics: dynamics.max(0.0),
            rr_rows: rr.max(0.0),
            ro_rows: ro.max(0.0),
            feasible,
            tol,
        }
    }

    /// Post-processing rule that makes labels well-posed: any bit whose row
    /// already holds with the bit forced to 0 is set to 0.
    pub fn refine_binaries(
        &self,
        trajectory: &Trajectory,
        assignment: &BinaryAssignment,
    ) -> Result<BinaryAssignment, MicpError> {
        let report = self.check_feasibility(trajectory, assignment, 1e-6);
        if !report.feasible {
            return Err(MicpError::InfeasibleInput(report.max_violation()));
        }
        let mut refined = assignment.clone();
        for e in 0..self.edges.len() {
            for k in 1..=self.config.horizon {
                for m in 0..4 {
                    if refined.get(e, k, m) == 1 {
                        let (lhs, sep) = self.row_lhs_rhs(e, k, m, trajectory);
                        if lhs >= sep - 1e-9 {
                            refined.set(e, k, m, 0);
                        }
                    }
                }
            }
        }
        Ok(refined)
    }

    /// Debug dump: parameters and layout, no constraint matrices.
    pub fn dump_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "big_m": self.big_m,
            "workspace": self.workspace,
            "robots": self.robots,
            "obstacles": self.obstacles,
            "edges": self.edges,
            "num_inputs": self.num_inputs(),
            "num_binaries": self.num_binaries(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve_qp, QpSettings};
    use crate::scene::{build_graph, ScenarioConfig};
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn ws() -> Workspace {
        Workspace::default()
    }

    fn two_robot_instance(horizon: usize) -> MicpInstance {
        let robots = vec![
            RobotParams::at_rest([-0.5, 0.0], [1.0, 0.0]),
            RobotParams::at_rest([0.5, 0.1], [-1.0, 0.0]),
        ];
        let graph = build_graph(&robots, &[], &ws());
        build_instance(
            &robots,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon, ..Default::default() },
        )
        .unwrap()
    }

    #[test]
    fn single_robot_has_no_binaries() {
        let robots = vec![RobotParams::at_rest([0.0, 0.0], [1.0, 1.0])];
        let graph = build_graph(&robots, &[], &ws());
        let inst = build_instance(&robots, &[], &graph, &ws(), &MicpConfig::default()).unwrap();
        assert_eq!(inst.num_binaries(), 0);
        let qp = inst.fix_binaries(&inst.empty_assignment()).unwrap();
        assert_eq!(qp.num_vars(), 2 * inst.horizon());
    }

    #[test]
    fn binary_slot_counts() {
        let inst = two_robot_instance(20);
        assert_eq!(inst.edges.len(), 1);
        assert_eq!(inst.num_binaries(), 80);

        let robots = vec![
            RobotParams::at_rest([-0.5, 0.0], [1.0, 0.0]),
            RobotParams::at_rest([0.5, 0.1], [-1.0, 0.0]),
        ];
        let obstacles = vec![ObstacleParams {
            center: [0.0, 0.6],
            alpha: 0.0,
            half_length: 0.3,
            half_width: 0.2,
        }];
        let graph = build_graph(&robots, &obstacles, &ws());
        assert_eq!(graph.edges_ro.len(), 2);
        let inst = build_instance(
            &robots,
            &obstacles,
            &graph,
            &ws(),
            &MicpConfig { horizon: 2, ..Default::default() },
        )
        .unwrap();
        // 8 RR + 16 RO slots.
        assert_eq!(inst.num_binaries(), 24);
    }

    #[test]
    fn invalid_config_rejected() {
        let robots = vec![RobotParams::at_rest([0.0, 0.0], [1.0, 1.0])];
        let graph = build_graph(&robots, &[], &ws());
        for cfg in [
            MicpConfig { horizon: 0, ..Default::default() },
            MicpConfig { dt: 0.0, ..Default::default() },
            MicpConfig { big_m: Some(-1.0), ..Default::default() },
        ] {
            assert!(build_instance(&robots, &[], &graph, &ws(), &cfg).is_err());
        }
    }

    #[test]
    fn fixed_bit_moves_m_to_rhs() {
        let mut inst = two_robot_instance(2);
        inst.big_m = 10.0;
        let mut a = inst.empty_assignment();
        a.set(0, 1, 0, 1);
        let rows = inst.condensed_rows(&a).unwrap();
        let row = rows
            .iter()
            .find(|r| matches!(r.kind, RowKind::RobotRobot { edge: 0, k: 1, m: 0 }))
            .unwrap();
        // p_i^x - p_j^x >= 2*d_min - 10, with the input-free offset folded in.
        let off = inst.pos_offset(0, 1, 0) - inst.pos_offset(1, 1, 0);
        assert_abs_diff_eq!(row.lower, 2.0 * ws().d_min - 10.0 - off, epsilon = 1e-12);
    }

    #[test]
    fn incomplete_or_invalid_assignment_rejected() {
        let inst = two_robot_instance(2);
        let other = BinaryAssignment::zeros(vec![], 2);
        assert!(matches!(
            inst.fix_binaries(&other),
            Err(MicpError::IncompleteAssignment)
        ));
        let mut all_ones = inst.empty_assignment();
        for m in 0..4 {
            all_ones.set(0, 1, m, 1);
        }
        assert!(matches!(
            inst.fix_binaries(&all_ones),
            Err(MicpError::CardinalityViolation { .. })
        ));
    }

    #[test]
    fn all_zero_bits_demand_separation_in_all_senses() {
        // Co-located robots with every row enforced: the QP must be infeasible.
        let robots = vec![
            RobotParams::at_rest([0.0, 0.0], [1.0, 0.0]),
            RobotParams::at_rest([0.05, 0.0], [-1.0, 0.0]),
        ];
        let graph = build_graph(&robots, &[], &ws());
        let inst = build_instance(
            &robots,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon: 2, ..Default::default() },
        )
        .unwrap();
        let qp = inst.fix_binaries(&inst.empty_assignment()).unwrap();
        let sol = solve_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, crate::qp::QpStatus::PrimalInfeasible);
    }

    #[test]
    fn cost_examples() {
        let h = 5;
        let robots = vec![RobotParams::at_rest([1.0, 2.0], [1.0, 2.0])];
        let graph = build_graph(&robots, &[], &ws());
        let inst = build_instance(
            &robots,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon: h, ..Default::default() },
        )
        .unwrap();
        // At goal with zero inputs: zero cost.
        let traj = Trajectory {
            states: vec![vec![[1.0, 2.0, 0.0, 0.0]; h + 1]],
            inputs: vec![vec![[0.0, 0.0]; h]],
        };
        assert_abs_diff_eq!(inst.evaluate_cost(&traj).unwrap(), 0.0);

        // One stage offset by (1, 0) with w_pos = 1 contributes exactly 1.
        let mut traj2 = traj.clone();
        traj2.states[0][3] = [2.0, 2.0, 0.0, 0.0];
        assert_abs_diff_eq!(inst.evaluate_cost(&traj2).unwrap(), 1.0);
    }

    #[test]
    fn cost_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = two_robot_instance(6);
        let inputs: Vec<Vec<[f64; 2]>> = (0..2)
            .map(|_| {
                (0..6)
                    .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
                    .collect()
            })
            .collect();
        let traj = Trajectory::rollout(&inst.robots, inputs, inst.config.dt);
        // Termwise oracle, written independently of evaluate_cost.
        let mut expected = 0.0;
        for r in 0..2 {
            let goal = inst.robots[r].goal;
            for k in 0..6 {
                let s = traj.states[r][k];
                let u = traj.inputs[r][k];
                expected += (s[0] - goal[0]).powi(2) + (s[1] - goal[1]).powi(2);
                expected += u[0].powi(2) + u[1].powi(2);
            }
            let s = traj.states[r][6];
            expected += 10.0 * ((s[0] - goal[0]).powi(2) + (s[1] - goal[1]).powi(2));
        }
        assert_abs_diff_eq!(inst.evaluate_cost(&traj).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn qp_objective_matches_evaluate_cost() {
        // The condensed QP's objective function must agree with the termwise
        // cost of the rolled-out trajectory at any input vector.
        let inst = two_robot_instance(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = inst.empty_assignment();
        for k in 1..=4 {
            a.set(0, k, 1, 1);
            a.set(0, k, 3, 1);
        }
        let qp = inst.fix_binaries(&a).unwrap();
        for _ in 0..5 {
            let x = DVector::from_fn(qp.num_vars(), |_, _| rng.gen_range(-0.4..0.4));
            let traj = inst.trajectory_from_primal(&x);
            assert_abs_diff_eq!(
                qp.objective(&x),
                inst.evaluate_cost(&traj).unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn relax_with_all_bits_fixed_equals_fix_binaries() {
        let inst = two_robot_instance(3);
        let mut a = inst.empty_assignment();
        // Robots cross in x and overlap in y: relax +x and both y rows.
        for k in 1..=3 {
            a.set(0, k, 0, 1);
            a.set(0, k, 2, 1);
            a.set(0, k, 3, 1);
        }
        let fixed_qp = inst.fix_binaries(&a).unwrap();
        let relaxed = inst
            .relax_binaries(&a.bits.iter().map(|&b| Some(b)).collect::<Vec<_>>())
            .unwrap();
        let s = QpSettings::default();
        let sol_f = solve_qp(&fixed_qp, &s).unwrap();
        let sol_r = solve_qp(&relaxed, &s).unwrap();
        assert_abs_diff_eq!(sol_f.objective, sol_r.objective, epsilon = 1e-5);
    }

    #[test]
    fn relax_nothing_single_robot_equals_plain_qp() {
        let robots = vec![RobotParams::at_rest([0.3, -0.4], [1.0, 1.0])];
        let graph = build_graph(&robots, &[], &ws());
        let inst = build_instance(
            &robots,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon: 4, ..Default::default() },
        )
        .unwrap();
        let plain = inst.fix_binaries(&inst.empty_assignment()).unwrap();
        let relaxed = inst.relax_binaries(&[]).unwrap();
        let s = QpSettings::default();
        assert_abs_diff_eq!(
            solve_qp(&plain, &s).unwrap().objective,
            solve_qp(&relaxed, &s).unwrap().objective,
            epsilon = 1e-6
        );
    }

    #[test]
    fn feasibility_report_flags_violations() {
        let inst = two_robot_instance(2);
        let h = inst.horizon();
        // Co-located robots violate every separation row at step 1.
        let states = vec![vec![[0.0, 0.0, 0.0, 0.0]; h + 1]; 2];
        let inputs = vec![vec![[0.0, 0.0]; h]; 2];
        let traj = Trajectory { states, inputs };
        let mut a = inst.empty_assignment();
        for k in 1..=h {
            for m in 1..4 {
                a.set(0, k, m, 1);
            }
        }
        let report = inst.check_feasibility(&traj, &a, 1e-6);
        assert!(!report.feasible);
        assert!(report.rr_rows > 0.0);
        // The dynamics of the constant trajectory are consistent.
        assert_abs_diff_eq!(report.dynamics, 0.0);

        // Input beyond a_max by 0.1 reports exactly that bound violation.
        let mut traj2 = traj.clone();
        traj2.inputs[0][0] = [0.6, 0.0];
        traj2.states[0][1] = [0.012, 0.0, 0.12, 0.0];
        traj2.states[0][2] = [0.036, 0.0, 0.12, 0.0];
        let report2 = inst.check_feasibility(&traj2, &a, 1e-6);
        assert_abs_diff_eq!(report2.bounds, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn refinement_zeroes_redundant_bits() {
        // Robots separated in both +x and +y senses.
        let robots = vec![
            RobotParams::at_rest([0.5, 0.5], [0.5, 0.5]),
            RobotParams::at_rest([-0.5, -0.5], [-0.5, -0.5]),
        ];
        let graph = build_graph(&robots, &[], &ws());
        let inst = build_instance(
            &robots,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon: 2, ..Default::default() },
        )
        .unwrap();
        let traj = Trajectory::rollout(&inst.robots, vec![vec![[0.0, 0.0]; 2]; 2], 0.2);
        let mut a = inst.empty_assignment();
        // [1,1,0,1]: slots 0 and 2 hold without relaxation, 1 and 3 do not.
        for k in 1..=2 {
            a.set(0, k, 0, 1);
            a.set(0, k, 1, 1);
            a.set(0, k, 3, 1);
        }
        let refined = inst.refine_binaries(&traj, &a).unwrap();
        for k in 1..=2 {
            assert_eq!(
                [refined.get(0, k, 0), refined.get(0, k, 1), refined.get(0, k, 2), refined.get(0, k, 3)],
                [0, 1, 0, 1]
            );
        }
        // Idempotence.
        let twice = inst.refine_binaries(&traj, &refined).unwrap();
        assert_eq!(twice, refined);
        // Strict necessity: every remaining 1 has its row violated at 0.
        for e in 0..refined.edges.len() {
            for k in 1..=2 {
                for m in 0..4 {
                    if refined.get(e, k, m) == 1 {
                        let (lhs, sep) = inst.row_lhs_rhs(e, k, m, &traj);
                        assert!(lhs < sep - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn refinement_boundary_holds_with_equality() {
        // Exact separation margin in +x: that row holds with equality, so its
        // bit goes to 0 even though it was set.
        let d = 2.0 * ws().d_min;
        let robots = vec![
            RobotParams::at_rest([d, 0.5], [d, 0.5]),
            RobotParams::at_rest([0.0, 0.0], [0.0, 0.0]),
        ];
        let graph = build_graph(&robots, &[], &ws());
        let inst = build_instance(
            &robots,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon: 1, ..Default::default() },
        )
        .unwrap();
        let traj = Trajectory::rollout(&inst.robots, vec![vec![[0.0, 0.0]]; 2], 0.2);
        let mut a = inst.empty_assignment();
        a.set(0, 1, 0, 1);
        a.set(0, 1, 1, 1);
        a.set(0, 1, 3, 1);
        let refined = inst.refine_binaries(&traj, &a).unwrap();
        assert_eq!(refined.get(0, 1, 0), 0);
        assert_eq!(refined.get(0, 1, 1), 1);
        assert_eq!(refined.get(0, 1, 3), 1);
    }

    #[test]
    fn refinement_rejects_infeasible_input() {
        let inst = two_robot_instance(2);
        let states = vec![vec![[0.0, 0.0, 0.0, 0.0]; 3]; 2];
        let inputs = vec![vec![[0.0, 0.0]; 2]; 2];
        let traj = Trajectory { states, inputs };
        let a = inst.empty_assignment();
        assert!(matches!(
            inst.refine_binaries(&traj, &a),
            Err(MicpError::InfeasibleInput(_))
        ));
    }

    #[test]
    fn cost_invariant_under_relabeling() {
        let inst = two_robot_instance(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Vec<[f64; 2]>> = (0..2)
            .map(|_| (0..4).map(|_| [rng.gen_range(-0.3..0.3), 0.1]).collect())
            .collect();
        let traj = Trajectory::rollout(&inst.robots, inputs.clone(), inst.config.dt);
        let c1 = inst.evaluate_cost(&traj).unwrap();

        let robots_swapped: Vec<_> = inst.robots.iter().rev().cloned().collect();
        let graph = build_graph(&robots_swapped, &[], &ws());
        let inst2 = build_instance(
            &robots_swapped,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon: 4, ..Default::default() },
        )
        .unwrap();
        let traj2 = Trajectory::rollout(
            &inst2.robots,
            inputs.into_iter().rev().collect(),
            inst2.config.dt,
        );
        assert_abs_diff_eq!(c1, inst2.evaluate_cost(&traj2).unwrap(), epsilon = 1e-12);
    }
}
