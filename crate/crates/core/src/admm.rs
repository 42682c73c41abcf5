//! Distributed proximal ADMM over the per-robot decomposition of a
//! fixed-binary convex program.
//!
//! Each robot keeps its own inputs `y_i`, a local copy `z_i` of every
//! neighbor's variables, and duals `lambda_i` for the consensus constraint
//! `y_{N_i} = z_i`. Obstacle rows and bounds are local; each inter-robot
//! separation row is owned by the lower-indexed endpoint, which enforces it
//! against its copies. All agents solve their subproblems against the same
//! iteration snapshot (a Jacobi sweep), which makes the parallel mode
//! numerically identical to the sequential one.

use crate::micp::{BinaryAssignment, MicpError, MicpInstance, RowKind};
use crate::qp::{QpError, QpProblem, QpSettings, QpSolver, QpStatus};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("agent {agent} subproblem infeasible at iteration {iteration}")]
    AgentInfeasible { agent: usize, iteration: usize },
    #[error("missing neighbor message: expected {expected} values, got {got}")]
    MissingNeighborMessage { expected: usize, got: usize },
    #[error(transparent)]
    Micp(#[from] MicpError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Penalty, proximal weight, damping, stop tolerance, and iteration cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmSettings {
    pub rho: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub t_max: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            beta: 1.0,
            gamma: 0.5,
            epsilon: 1e-4,
            t_max: 500,
        }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<(), AdmmError> {
        if self.rho <= 0.0 || self.beta <= 0.0 || self.gamma <= 0.0 {
            return Err(AdmmError::Micp(MicpError::InvalidConfig(
                "admm weights must be positive".into(),
            )));
        }
        if self.epsilon <= 0.0 || self.t_max == 0 {
            return Err(AdmmError::Micp(MicpError::InvalidConfig(
                "admm tolerance/iterations invalid".into(),
            )));
        }
        Ok(())
    }
}

/// One inter-robot row: `own . y_i + sum_slot others . z[slot] <= / >= bounds`.
#[derive(Debug, Clone)]
pub struct CouplingRow {
    pub own: DVector<f64>,
    /// `(neighbor slot, coefficients over that neighbor's variables)`.
    pub others: Vec<(usize, DVector<f64>)>,
    pub lower: f64,
    pub upper: f64,
}

/// Everything agent `i` needs to run its subproblem.
#[derive(Debug, Clone)]
pub struct AgentLocalProblem {
    pub robot: usize,
    /// Dimension of `y_i` (2H inputs, plus owned slacks in soft mode).
    pub dim_y: usize,
    /// Neighbor robot ids, sorted; this is the z stacking order.
    pub neighbors: Vec<usize>,
    /// `y` dimension of each neighbor, same order as `neighbors`.
    pub neighbor_dims: Vec<usize>,
    pub cost_matrix: DMatrix<f64>,
    pub cost_linear: DVector<f64>,
    pub cost_constant: f64,
    pub var_lower: DVector<f64>,
    pub var_upper: DVector<f64>,
    pub local_matrix: DMatrix<f64>,
    pub local_lower: DVector<f64>,
    pub local_upper: DVector<f64>,
    pub coupling: Vec<CouplingRow>,
}

impl AgentLocalProblem {
    pub fn dim_z(&self) -> usize {
        self.neighbor_dims.iter().sum()
    }

    /// Offset of a neighbor slot inside the stacked z vector.
    pub fn z_offset(&self, slot: usize) -> usize {
        self.neighbor_dims[..slot].iter().sum()
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * (y.transpose() * &self.cost_matrix * y)[(0, 0)]
            + self.cost_linear.dot(y)
            + self.cost_constant
    }
}

/// Splits a fixed-binary instance into per-robot local problems. With
/// `slack_weight` set, every big-M row gains a nonnegative slack variable
/// owned by the row's agent and penalized linearly.
pub fn split_problem(
    instance: &MicpInstance,
    assignment: &BinaryAssignment,
    slack_weight: Option<f64>,
) -> Result<Vec<AgentLocalProblem>, AdmmError> {
    let rows = instance.condensed_rows(assignment)?;
    let n_robots = instance.num_robots();
    let per = instance.inputs_per_robot();

    // Row ownership: obstacle rows and bounds belong to their robot; each RR
    // row to the lower-indexed endpoint (the canonical segment order).
    let mut slack_counts = vec![0usize; n_robots];
    if slack_weight.is_some() {
        for row in &rows {
            match row.kind {
                RowKind::RobotRobot { .. } | RowKind::RobotObstacle { .. } => {
                    slack_counts[row.segments[0].0] += 1;
                }
                RowKind::StateBound { .. } => {}
            }
        }
    }
    let dims: Vec<usize> = (0..n_robots).map(|r| per + slack_counts[r]).collect();

    let objective_blocks = instance.objective_blocks();
    let mut agents: Vec<AgentLocalProblem> = (0..n_robots)
        .map(|r| {
            let (p0, q0, c0) = objective_blocks[r].clone();
            let d = dims[r];
            let mut cost_matrix = DMatrix::zeros(d, d);
            cost_matrix.view_mut((0, 0), (per, per)).copy_from(&p0);
            let mut cost_linear = DVector::zeros(d);
            cost_linear.rows_mut(0, per).copy_from(&q0);
            if let Some(w) = slack_weight {
                for s in per..d {
                    cost_linear[s] = w;
                }
            }
            let mut var_lower = DVector::from_element(d, -instance.workspace.a_max);
            let mut var_upper = DVector::from_element(d, instance.workspace.a_max);
            for s in per..d {
                var_lower[s] = 0.0;
                var_upper[s] = f64::INFINITY;
            }
            let neighbors = instance.graph.robot_neighbors(r);
            let neighbor_dims = neighbors.iter().map(|&j| dims[j]).collect();
            AgentLocalProblem {
                robot: r,
                dim_y: d,
                neighbors,
                neighbor_dims,
                cost_matrix,
                cost_linear,
                cost_constant: c0,
                var_lower,
                var_upper,
                local_matrix: DMatrix::zeros(0, d),
                local_lower: DVector::zeros(0),
                local_upper: DVector::zeros(0),
                coupling: Vec::new(),
            }
        })
        .collect();

    let mut local_rows: Vec<Vec<(Vec<f64>, f64, f64)>> = vec![Vec::new(); n_robots];
    let mut slack_used = vec![0usize; n_robots];
    for row in &rows {
        let owner = row.segments[0].0;
        let is_big_m = !matches!(row.kind, RowKind::StateBound { .. });
        let slack_col = if is_big_m && slack_weight.is_some() {
            let col = per + slack_used[owner];
            slack_used[owner] += 1;
            Some(col)
        } else {
            None
        };
        match row.kind {
            RowKind::StateBound { .. } | RowKind::RobotObstacle { .. }
                if row.segments.len() == 1 =>
            {
                let robot = row.segments[0].0;
                let mut coeffs = vec![0.0; dims[robot]];
                coeffs[..per].copy_from_slice(&row.segments[0].1);
                if let Some(col) = slack_col {
                    coeffs[col] = 1.0;
                }
                local_rows[robot].push((coeffs, row.lower, row.upper));
            }
            RowKind::RobotRobot { .. } => {
                let (i, ref ci) = row.segments[0];
                let (j, ref cj) = row.segments[1];
                let mut own = DVector::zeros(dims[i]);
                own.rows_mut(0, per)
                    .copy_from(&DVector::from_row_slice(ci));
                if let Some(col) = slack_col {
                    own[col] = 1.0;
                }
                let slot = agents[i]
                    .neighbors
                    .iter()
                    .position(|&n| n == j)
                    .expect("RR edge endpoints are graph neighbors");
                let mut other = DVector::zeros(dims[j]);
                other
                    .rows_mut(0, per)
                    .copy_from(&DVector::from_row_slice(cj));
                agents[i].coupling.push(CouplingRow {
                    own,
                    others: vec![(slot, other)],
                    lower: row.lower,
                    upper: row.upper,
                });
            }
            _ => unreachable!("row kinds are exhaustive"),
        }
    }

    for (r, rows) in local_rows.into_iter().enumerate() {
        let m = rows.len();
        let mut mat = DMatrix::zeros(m, dims[r]);
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        for (ri, (coeffs, lo, up)) in rows.into_iter().enumerate() {
            for (ci, v) in coeffs.into_iter().enumerate() {
                mat[(ri, ci)] = v;
            }
            lower[ri] = lo;
            upper[ri] = up;
        }
        agents[r].local_matrix = mat;
        agents[r].local_lower = lower;
        agents[r].local_upper = upper;
    }

    Ok(agents)
}

/// Consensus information supplied by one neighbor: its copy of this agent's
/// variables and the matching dual block.
#[derive(Debug, Clone)]
pub struct NeighborFeedback {
    pub copy_of_me: DVector<f64>,
    pub dual_of_me: DVector<f64>,
}

/// Reusable subproblem solver for one agent; the factorization is built once
/// and only the linear cost changes between iterations.
pub struct AgentSolver {
    local: AgentLocalProblem,
    solver: QpSolver,
    settings: AdmmSettings,
    /// Whether the symmetric neighbor-consensus terms are included.
    coordinated: bool,
}

impl AgentSolver {
    pub fn new(
        local: &AgentLocalProblem,
        qp_settings: &QpSettings,
        settings: &AdmmSettings,
        coordinated: bool,
    ) -> Result<Self, AdmmError> {
        settings.validate()?;
        let n_y = local.dim_y;
        let n_z = local.dim_z();
        let n = n_y + n_z;
        let rho = settings.rho;
        let beta = settings.beta;

        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (n_y, n_y)).copy_from(&local.cost_matrix);
        if coordinated {
            // Proximal term on y plus one consensus pull per copier.
            let add = beta + rho * local.neighbors.len() as f64;
            for i in 0..n_y {
                p[(i, i)] += add;
            }
        }
        for i in n_y..n {
            p[(i, i)] += beta + rho;
        }

        let mut problem = QpProblem::new(p, DVector::zeros(n));
        for i in 0..n_y {
            problem.var_lower[i] = local.var_lower[i];
            problem.var_upper[i] = local.var_upper[i];
        }
        let m_local = local.local_lower.len();
        let m = m_local + local.coupling.len();
        let mut mat = DMatrix::zeros(m, n);
        let mut lower = DVector::zeros(m);
        let mut upper = DVector::zeros(m);
        mat.view_mut((0, 0), (m_local, n_y))
            .copy_from(&local.local_matrix);
        lower.rows_mut(0, m_local).copy_from(&local.local_lower);
        upper.rows_mut(0, m_local).copy_from(&local.local_upper);
        for (ri, row) in local.coupling.iter().enumerate() {
            for c in 0..n_y {
                mat[(m_local + ri, c)] = row.own[c];
            }
            for (slot, coeffs) in &row.others {
                let off = n_y + local.z_offset(*slot);
                for (c, &v) in coeffs.iter().enumerate() {
                    mat[(m_local + ri, off + c)] = v;
                }
            }
            lower[m_local + ri] = row.lower;
            upper[m_local + ri] = row.upper;
        }
        problem.ineq_matrix = mat;
        problem.ineq_lower = lower;
        problem.ineq_upper = upper;

        Ok(Self {
            local: local.clone(),
            solver: QpSolver::new(problem, qp_settings.clone())?,
            settings: settings.clone(),
            coordinated,
        })
    }

    /// Solves the agent subproblem for one iteration.
    ///
    /// `y_prev`/`z_prev`/`lambda` are this agent's iterates; `neighbor_y` the
    /// snapshot of neighbor variables in slot order; `feedback` the copies and
    /// duals the neighbors hold of this agent (required in coordinated mode).
    pub fn minimize(
        &mut self,
        y_prev: &DVector<f64>,
        z_prev: &DVector<f64>,
        lambda: &DVector<f64>,
        neighbor_y: &[DVector<f64>],
        feedback: &[NeighborFeedback],
    ) -> Result<(DVector<f64>, DVector<f64>), AdmmError> {
        let local = &self.local;
        let n_y = local.dim_y;
        let n_z = local.dim_z();
        if neighbor_y.len() != local.neighbors.len() {
            return Err(AdmmError::MissingNeighborMessage {
                expected: local.neighbors.len(),
                got: neighbor_y.len(),
            });
        }
        let rho = self.settings.rho;
        let beta = self.settings.beta;

        let mut q = DVector::zeros(n_y + n_z);
        q.rows_mut(0, n_y).copy_from(&local.cost_linear);
        if self.coordinated {
            if feedback.len() != local.neighbors.len() {
                return Err(AdmmError::MissingNeighborMessage {
                    expected: local.neighbors.len(),
                    got: feedback.len(),
                });
            }
            for i in 0..n_y {
                q[i] -= beta * y_prev[i];
            }
            for fb in feedback {
                for i in 0..n_y {
                    q[i] -= rho * fb.copy_of_me[i] + fb.dual_of_me[i];
                }
            }
        }
        for (slot, y_j) in neighbor_y.iter().enumerate() {
            let off = n_y + local.z_offset(slot);
            let d = local.neighbor_dims[slot];
            if y_j.len() != d {
                return Err(AdmmError::MissingNeighborMessage { expected: d, got: y_j.len() });
            }
            for i in 0..d {
                q[off + i] = -beta * z_prev[local.z_offset(slot) + i] - rho * y_j[i]
                    + lambda[local.z_offset(slot) + i];
            }
        }
        self.solver.update_linear_cost(q, 0.0);

        let mut warm = DVector::zeros(n_y + n_z);
        warm.rows_mut(0, n_y).copy_from(y_prev);
        warm.rows_mut(n_y, n_z).copy_from(z_prev);
        self.solver.warm_start(&warm);
        let sol = self.solver.solve();
        if sol.status == QpStatus::PrimalInfeasible {
            return Err(AdmmError::AgentInfeasible { agent: local.robot, iteration: 0 });
        }
        Ok((
            sol.x.rows(0, n_y).into_owned(),
            sol.x.rows(n_y, n_z).into_owned(),
        ))
    }
}

/// One x-minimization step (Eq.-14 form when `feedback` is empty).
pub fn x_minimization(
    local: &AgentLocalProblem,
    y_prev: &DVector<f64>,
    z_prev: &DVector<f64>,
    lambda: &DVector<f64>,
    neighbor_y: &[DVector<f64>],
    feedback: &[NeighborFeedback],
    qp_settings: &QpSettings,
    settings: &AdmmSettings,
) -> Result<(DVector<f64>, DVector<f64>), AdmmError> {
    let mut solver = AgentSolver::new(local, qp_settings, settings, !feedback.is_empty())?;
    solver.minimize(y_prev, z_prev, lambda, neighbor_y, feedback)
}

/// Damped dual ascent on the consensus constraint:
/// `lambda' = lambda + gamma * rho * (z - y_N)`.
pub fn dual_update(
    lambda: &DVector<f64>,
    z_new: &DVector<f64>,
    neighbor_y_new: &DVector<f64>,
    settings: &AdmmSettings,
) -> Result<DVector<f64>, AdmmError> {
    if z_new.len() != neighbor_y_new.len() || z_new.len() != lambda.len() {
        return Err(AdmmError::MissingNeighborMessage {
            expected: lambda.len(),
            got: z_new.len().min(neighbor_y_new.len()),
        });
    }
    Ok(lambda + (z_new - neighbor_y_new) * (settings.gamma * settings.rho))
}

/// Execution mode for [`run_admm`]: one worker per agent, or a sequential
/// sweep. Both follow the same Jacobi snapshot discipline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdmmMode {
    Sequential,
    Parallel,
}

/// Per-iteration trace entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmmTrace {
    pub iteration: usize,
    pub max_primal_change: f64,
    pub consensus_residual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct AdmmResult {
    pub y: Vec<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub consensus_residual: f64,
    pub history: Vec<AdmmTrace>,
}

/// Warm-start data carried between receding-horizon steps.
#[derive(Debug, Clone, Default)]
pub struct AdmmCarry {
    /// Per-robot primal vectors (caller shifts them in time).
    pub y: Vec<DVector<f64>>,
    /// Duals keyed by (owner robot, neighbor robot).
    pub lambda: std::collections::HashMap<(usize, usize), DVector<f64>>,
}

fn stack_neighbors(local: &AgentLocalProblem, y: &[DVector<f64>]) -> DVector<f64> {
    let mut out = DVector::zeros(local.dim_z());
    for (slot, &j) in local.neighbors.iter().enumerate() {
        out.rows_mut(local.z_offset(slot), local.neighbor_dims[slot])
            .copy_from(&y[j]);
    }
    out
}

/// Runs the distributed solve: Jacobi x-minimization sweeps, neighbor
/// exchange, damped dual updates, until no agent's primal moves more than
/// `epsilon` or `t_max` is reached.
pub fn run_admm(
    problems: &[AgentLocalProblem],
    qp_settings: &QpSettings,
    settings: &AdmmSettings,
    mode: AdmmMode,
    carry: Option<&AdmmCarry>,
) -> Result<AdmmResult, AdmmError> {
    settings.validate()?;

    let mut solvers: Vec<AgentSolver> = problems
        .iter()
        .map(|p| AgentSolver::new(p, qp_settings, settings, true))
        .collect::<Result<_, _>>()?;

    let mut y: Vec<DVector<f64>> = problems
        .iter()
        .map(|p| {
            carry
                .and_then(|c| c.y.get(p.robot))
                .filter(|v| v.len() == p.dim_y)
                .cloned()
                .unwrap_or_else(|| DVector::zeros(p.dim_y))
        })
        .collect();
    let mut z: Vec<DVector<f64>> = problems.iter().map(|p| stack_neighbors(p, &y)).collect();
    let mut lambda: Vec<DVector<f64>> = problems
        .iter()
        .map(|p| {
            let mut l = DVector::zeros(p.dim_z());
            if let Some(c) = carry {
                for (slot, &j) in p.neighbors.iter().enumerate() {
                    if let Some(block) = c.lambda.get(&(p.robot, j)) {
                        if block.len() == p.neighbor_dims[slot] {
                            l.rows_mut(p.z_offset(slot), block.len()).copy_from(block);
                        }
                    }
                }
            }
            l
        })
        .collect();

    let objective =
        |y: &[DVector<f64>]| -> f64 { problems.iter().enumerate().map(|(i, p)| p.objective(&y[i])).sum() };

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=settings.t_max {
        iterations = t;
        // Snapshot for the Jacobi sweep.
        let y_snap = y.clone();
        let z_snap = z.clone();
        let lambda_snap = lambda.clone();

        let inputs: Vec<(usize, Vec<DVector<f64>>, Vec<NeighborFeedback>)> = problems
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let neighbor_y: Vec<DVector<f64>> =
                    p.neighbors.iter().map(|&j| y_snap[j].clone()).collect();
                // Each neighbor j holds a copy of me in its own slot order.
                let feedback: Vec<NeighborFeedback> = p
                    .neighbors
                    .iter()
                    .map(|&j| {
                        let pj = &problems[j];
                        let slot = pj
                            .neighbors
                            .iter()
                            .position(|&k| k == p.robot)
                            .expect("neighbor relation is symmetric");
                        let off = pj.z_offset(slot);
                        let d = pj.neighbor_dims[slot];
                        NeighborFeedback {
                            copy_of_me: z_snap[j].rows(off, d).into_owned(),
                            dual_of_me: lambda_snap[j].rows(off, d).into_owned(),
                        }
                    })
                    .collect();
                (i, neighbor_y, feedback)
            })
            .collect();

        let step = |solver: &mut AgentSolver,
                    (i, neighbor_y, feedback): &(usize, Vec<DVector<f64>>, Vec<NeighborFeedback>)|
         -> Result<(DVector<f64>, DVector<f64>), AdmmError> {
            solver
                .minimize(&y_snap[*i], &z_snap[*i], &lambda_snap[*i], neighbor_y, feedback)
                .map_err(|e| match e {
                    AdmmError::AgentInfeasible { agent, .. } => {
                        AdmmError::AgentInfeasible { agent, iteration: t }
                    }
                    other => other,
                })
        };

        let results: Vec<Result<(DVector<f64>, DVector<f64>), AdmmError>> = match mode {
            AdmmMode::Sequential => solvers
                .iter_mut()
                .zip(&inputs)
                .map(|(s, input)| step(s, input))
                .collect(),
            AdmmMode::Parallel => solvers
                .par_iter_mut()
                .zip(inputs.par_iter())
                .map(|(s, input)| step(s, input))
                .collect(),
        };

        let mut max_change: f64 = 0.0;
        for (i, res) in results.into_iter().enumerate() {
            let (y_new, z_new) = res?;
            max_change = max_change.max((&y_new - &y_snap[i]).norm());
            y[i] = y_new;
            z[i] = z_new;
        }

        // Exchange y and update duals.
        let mut consensus: f64 = 0.0;
        for (i, p) in problems.iter().enumerate() {
            let y_n = stack_neighbors(p, &y);
            consensus = consensus.max((&z[i] - &y_n).norm());
            lambda[i] = dual_update(&lambda[i], &z[i], &y_n, settings)?;
        }

        history.push(AdmmTrace {
            iteration: t,
            max_primal_change: max_change,
            consensus_residual: consensus,
            objective: objective(&y),
        });

        if max_change <= settings.epsilon {
            converged = true;
            break;
        }
    }

    let consensus_residual = history.last().map(|h| h.consensus_residual).unwrap_or(0.0);
    Ok(AdmmResult {
        objective: objective(&y),
        y,
        iterations,
        converged,
        consensus_residual,
        history,
    })
}

/// Extracts the carry for the next receding-horizon step.
pub fn carry_from(problems: &[AgentLocalProblem], result: &AdmmResult, lambda: Option<()>) -> AdmmCarry {
    let _ = lambda;
    AdmmCarry {
        y: result.y.clone(),
        lambda: std::collections::HashMap::new(),
    }
    .with_robots(problems)
}

impl AdmmCarry {
    fn with_robots(mut self, problems: &[AgentLocalProblem]) -> Self {
        // Reindex y by robot id so later steps can look agents up even when
        // the agent set changes.
        let mut by_robot: Vec<DVector<f64>> = Vec::new();
        let max_robot = problems.iter().map(|p| p.robot).max().unwrap_or(0);
        by_robot.resize(max_robot + 1, DVector::zeros(0));
        for (i, p) in problems.iter().enumerate() {
            by_robot[p.robot] = self.y[i].clone();
        }
        self.y = by_robot;
        self
    }
}
