//! Receding-horizon closed-loop simulation, the soft-constraint fallback for
//! infeasible predictions, and batch evaluation metrics.

use crate::admm::{run_admm, split_problem, AdmmCarry, AdmmError, AdmmMode, AdmmSettings};
use crate::gat::NetParams;
use crate::micp::{build_instance, MicpConfig, MicpError, MicpInstance};
use crate::oracle::{branch_and_bound, BnbSettings, OracleError};
use crate::qp::{solve_qp, QpSettings, QpStatus};
use crate::scene::{
    build_graph, random_scenario, ObstacleParams, RobotParams, ScenarioConfig, SceneError,
    Workspace,
};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("oracle planner failed: {0}")]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Micp(#[from] MicpError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Admm(#[from] AdmmError),
    #[error(transparent)]
    Qp(#[from] crate::qp::QpError),
    #[error("learned mode requires a trained model")]
    MissingModel,
    #[error("model horizon {model} does not match planner horizon {planner}")]
    HorizonMismatch { model: usize, planner: usize },
    #[error("non-finite input produced by the planner at step {step}")]
    NanInput { step: usize },
    #[error("slack fallback failed: {0}")]
    FallbackFailed(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// How each planning step obtains binaries and solves the convex program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannerMode {
    /// Exact branch-and-bound binaries, centralized QP.
    OracleCentralized,
    /// Predicted binaries, centralized QP.
    LearnedCentralized,
    /// Predicted binaries, distributed proximal ADMM.
    LearnedDistributed,
}

/// Episode-level knobs (solver configs are referenced separately).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// A robot counts as arrived within this distance of its goal (m).
    pub goal_tolerance: f64,
    pub max_steps: usize,
    /// Linear penalty per unit of big-M row violation in the fallback solve.
    pub slack_weight: f64,
    /// Violations beyond this tolerance raise the collision flag.
    pub collision_tol: f64,
    /// Prediction threshold for learned modes.
    pub threshold: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            goal_tolerance: 0.05,
            max_steps: 300,
            slack_weight: 1e3,
            collision_tol: 1e-6,
            threshold: 0.5,
        }
    }
}

/// Everything a planning step needs, by reference.
#[derive(Clone, Copy)]
pub struct PlannerContext<'a> {
    pub mode: PlannerMode,
    pub workspace: &'a Workspace,
    pub micp: &'a MicpConfig,
    pub qp: &'a QpSettings,
    pub bnb: &'a BnbSettings,
    pub admm: &'a AdmmSettings,
    pub sim: &'a SimConfig,
    pub model: Option<&'a NetParams>,
    pub admm_mode: AdmmMode,
}

/// Diagnostics from one planning step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    /// Seconds spent planning (graph build through solve).
    pub latency: f64,
    /// The predicted binaries made the QP infeasible and the slack solve ran.
    pub slack_fallback: bool,
    pub objective: f64,
    pub admm_iterations: Option<usize>,
}

pub struct PlanStep {
    /// First input per robot.
    pub inputs: Vec<[f64; 2]>,
    pub diagnostics: PlanDiagnostics,
    /// Carry for warm-starting the next distributed solve.
    pub carry: Option<AdmmCarry>,
}

/// Double-integrator step: `p' = p + tau v + tau^2 u / 2`, `v' = v + tau u`.
pub fn step_dynamics(state: [f64; 4], input: [f64; 2], dt: f64) -> [f64; 4] {
    [
        state[0] + dt * state[2] + 0.5 * dt * dt * input[0],
        state[1] + dt * state[3] + 0.5 * dt * dt * input[1],
        state[2] + dt * input[0],
        state[3] + dt * input[1],
    ]
}

fn first_inputs_from_primal(instance: &MicpInstance, x: &DVector<f64>) -> Vec<[f64; 2]> {
    let per = instance.inputs_per_robot();
    (0..instance.num_robots())
        .map(|r| [x[r * per], x[r * per + 1]])
        .collect()
}

/// Shifts a previous horizon solution one step forward for warm starting.
fn shift_carry(carry: &AdmmCarry) -> AdmmCarry {
    let mut shifted = carry.clone();
    for y in &mut shifted.y {
        let n = y.len();
        if n >= 4 {
            let mut v = y.clone();
            for i in 0..n - 2 {
                v[i] = y[i + 2];
            }
            v[n - 2] = y[n - 2];
            v[n - 1] = y[n - 1];
            *y = v;
        }
    }
    shifted.lambda.clear();
    shifted
}

/// Plans one receding-horizon step from the robots' current states.
///
/// Learned modes that produce an infeasible convex program re-solve with a
/// nonnegative, linearly penalized slack on every big-M row and flag the
/// step.
pub fn plan_step(
    robots: &[RobotParams],
    obstacles: &[ObstacleParams],
    ctx: &PlannerContext,
    carry: Option<&AdmmCarry>,
) -> Result<PlanStep, SimError> {
    let start = Instant::now();
    let graph = build_graph(robots, obstacles, ctx.workspace);
    let instance = build_instance(robots, obstacles, &graph, ctx.workspace, ctx.micp)?;

    let result = match ctx.mode {
        PlannerMode::OracleCentralized => {
            let solution = branch_and_bound(&instance, ctx.qp, ctx.bnb)?;
            let inputs = solution
                .trajectory
                .inputs
                .iter()
                .map(|u| u[0])
                .collect::<Vec<_>>();
            PlanStep {
                inputs,
                diagnostics: PlanDiagnostics {
                    latency: 0.0,
                    slack_fallback: false,
                    objective: solution.objective,
                    admm_iterations: None,
                },
                carry: None,
            }
        }
        PlannerMode::LearnedCentralized => {
            let model = ctx.model.ok_or(SimError::MissingModel)?;
            check_model(model, ctx)?;
            let assignment =
                crate::gat::predict_binaries(robots, obstacles, &graph, model, ctx.sim.threshold);
            let qp = instance.fix_binaries(&assignment)?;
            let sol = solve_qp(&qp, ctx.qp)?;
            if sol.status == QpStatus::Optimal {
                PlanStep {
                    inputs: first_inputs_from_primal(&instance, &sol.x),
                    diagnostics: PlanDiagnostics {
                        latency: 0.0,
                        slack_fallback: false,
                        objective: sol.objective,
                        admm_iterations: None,
                    },
                    carry: None,
                }
            } else {
                let (soft, _) = instance.fix_binaries_soft(&assignment, ctx.sim.slack_weight)?;
                let soft_sol = solve_qp(&soft, ctx.qp)?;
                if soft_sol.status != QpStatus::Optimal {
                    return Err(SimError::FallbackFailed(format!(
                        "soft solve ended with {:?}",
                        soft_sol.status
                    )));
                }
                PlanStep {
                    inputs: first_inputs_from_primal(&instance, &soft_sol.x),
                    diagnostics: PlanDiagnostics {
                        latency: 0.0,
                        slack_fallback: true,
                        objective: soft_sol.objective,
                        admm_iterations: None,
                    },
                    carry: None,
                }
            }
        }
        PlannerMode::LearnedDistributed => {
            let model = ctx.model.ok_or(SimError::MissingModel)?;
            check_model(model, ctx)?;
            let assignment =
                crate::gat::predict_binaries(robots, obstacles, &graph, model, ctx.sim.threshold);
            let agents = split_problem(&instance, &assignment, None)?;
            let attempt = run_admm(&agents, ctx.qp, ctx.admm, ctx.admm_mode, carry);
            let (result, fallback) = match attempt {
                Ok(res) if res.converged => (res, false),
                Ok(_) | Err(AdmmError::AgentInfeasible { .. }) => {
                    // Re-split with slacks on every big-M row.
                    let soft_agents =
                        split_problem(&instance, &assignment, Some(ctx.sim.slack_weight))?;
                    let res = run_admm(&soft_agents, ctx.qp, ctx.admm, ctx.admm_mode, None)
                        .map_err(|e| SimError::FallbackFailed(e.to_string()))?;
                    (res, true)
                }
                Err(e) => return Err(e.into()),
            };
            let inputs: Vec<[f64; 2]> = result.y.iter().map(|y| [y[0], y[1]]).collect();
            let diagnostics = PlanDiagnostics {
                latency: 0.0,
                slack_fallback: fallback,
                objective: result.objective,
                admm_iterations: Some(result.iterations),
            };
            let carry = crate::admm::carry_from(&agents, &result, None);
            PlanStep { inputs, diagnostics, carry: Some(carry) }
        }
    };

    for u in &result.inputs {
        if !u[0].is_finite() || !u[1].is_finite() {
            return Err(SimError::NanInput { step: 0 });
        }
    }
    let mut result = result;
    result.diagnostics.latency = start.elapsed().as_secs_f64();
    Ok(result)
}

fn check_model(model: &NetParams, ctx: &PlannerContext) -> Result<(), SimError> {
    if model.config.horizon != ctx.micp.horizon {
        return Err(SimError::HorizonMismatch {
            model: model.config.horizon,
            planner: ctx.micp.horizon,
        });
    }
    Ok(())
}

/// Outcome of one closed-loop episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub success: bool,
    /// Axis-separation (constraint-metric) violation or inflated-obstacle
    /// containment at any closed-loop step.
    pub collision: bool,
    /// Euclidean `2*d_min` violation (a subset of `collision`).
    pub collision_euclidean: bool,
    pub steps: usize,
    pub latencies: Vec<f64>,
    /// Closed-loop states per step per robot.
    pub states: Vec<Vec<[f64; 4]>>,
    pub inputs: Vec<Vec<[f64; 2]>>,
    /// Steps where the slack fallback engaged.
    pub fallback_steps: usize,
    pub config_digest: String,
}

impl SimResult {
    pub fn mean_latency(&self) -> f64 {
        if self.latencies.is_empty() {
            0.0
        } else {
            self.latencies.iter().sum::<f64>() / self.latencies.len() as f64
        }
    }
}

/// Pure collision predicate over a logged state snapshot.
pub fn collision_flags(
    states: &[[f64; 4]],
    obstacles: &[ObstacleParams],
    workspace: &Workspace,
    tol: f64,
) -> (bool, bool) {
    let d = 2.0 * workspace.d_min;
    let mut square = false;
    let mut euclid = false;
    for i in 0..states.len() {
        for j in (i + 1)..states.len() {
            let dx = (states[i][0] - states[j][0]).abs();
            let dy = (states[i][1] - states[j][1]).abs();
            if dx.max(dy) < d - tol {
                square = true;
            }
            if (dx * dx + dy * dy).sqrt() < d - tol {
                euclid = true;
            }
        }
        for o in obstacles {
            if o.contains_inflated([states[i][0], states[i][1]], workspace.d_min - tol) {
                square = true;
            }
        }
    }
    (square, euclid)
}

/// Runs the receding-horizon loop until every robot is within the goal
/// tolerance or the step budget runs out.
pub fn run_episode(
    robots: &[RobotParams],
    obstacles: &[ObstacleParams],
    ctx: &PlannerContext,
    config_digest: &str,
) -> Result<SimResult, SimError> {
    let mut current: Vec<RobotParams> = robots.to_vec();
    let mut states_log: Vec<Vec<[f64; 4]>> = Vec::new();
    let mut inputs_log: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut latencies = Vec::new();
    let mut fallback_steps = 0usize;
    let mut success = false;
    let mut carry: Option<AdmmCarry> = None;
    let mut steps = 0usize;

    let snapshot = |robots: &[RobotParams]| -> Vec<[f64; 4]> {
        robots
            .iter()
            .map(|r| [r.p[0], r.p[1], r.v[0], r.v[1]])
            .collect()
    };

    states_log.push(snapshot(&current));
    for _step in 0..ctx.sim.max_steps {
        let arrived = current.iter().all(|r| {
            let dx = r.p[0] - r.goal[0];
            let dy = r.p[1] - r.goal[1];
            (dx * dx + dy * dy).sqrt() <= ctx.sim.goal_tolerance
        });
        if arrived {
            success = true;
            break;
        }

        let shifted = carry.as_ref().map(shift_carry);
        let plan = plan_step(&current, obstacles, ctx, shifted.as_ref())?;
        latencies.push(plan.diagnostics.latency);
        fallback_steps += usize::from(plan.diagnostics.slack_fallback);
        carry = plan.carry;

        for (r, u) in current.iter_mut().zip(&plan.inputs) {
            let next = step_dynamics([r.p[0], r.p[1], r.v[0], r.v[1]], *u, ctx.micp.dt);
            r.p = [next[0], next[1]];
            r.v = [next[2], next[3]];
        }
        inputs_log.push(plan.inputs);
        states_log.push(snapshot(&current));
        steps += 1;
    }
    if !success {
        // The loop may have exhausted the budget just before checking.
        success = current.iter().all(|r| {
            let dx = r.p[0] - r.goal[0];
            let dy = r.p[1] - r.goal[1];
            (dx * dx + dy * dy).sqrt() <= ctx.sim.goal_tolerance
        });
    }

    let mut collision = false;
    let mut collision_euclidean = false;
    for snap in &states_log {
        let (sq, eu) = collision_flags(snap, obstacles, ctx.workspace, ctx.sim.collision_tol);
        collision |= sq;
        collision_euclidean |= eu;
    }

    Ok(SimResult {
        success,
        collision,
        collision_euclidean,
        steps,
        latencies,
        states: states_log,
        inputs: inputs_log,
        fallback_steps,
        config_digest: config_digest.to_string(),
    })
}

/// One row of the evaluation CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub collision: bool,
    pub steps: usize,
    pub mean_latency: f64,
    pub fallback_steps: usize,
}

/// Aggregated batch metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub episodes: usize,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub mean_latency: f64,
    pub p95_latency: f64,
    pub mean_steps: f64,
    pub total_fallback_steps: usize,
    pub rows: Vec<EpisodeRow>,
}

/// Scenario distribution for evaluation batches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalScenario {
    pub n_robots: usize,
    pub n_obstacles: usize,
    pub scenario: ScenarioConfig,
}

/// Runs `n_episodes` seeded episodes (parallel across workers) and aggregates
/// success/collision/timing statistics.
pub fn evaluate_batch(
    eval: &EvalScenario,
    n_episodes: usize,
    seed: u64,
    ctx: &PlannerContext,
    config_digest: &str,
) -> Result<BatchMetrics, SimError> {
    let results: Vec<Result<(usize, u64, SimResult), SimError>> = (0..n_episodes)
        .into_par_iter()
        .map(|ep| {
            let ep_seed = seed.wrapping_add(ep as u64);
            let (robots, obstacles) = random_scenario(
                eval.n_robots,
                eval.n_obstacles,
                ctx.workspace,
                &eval.scenario,
                ep_seed,
            )?;
            let result = run_episode(&robots, &obstacles, ctx, config_digest)?;
            Ok((ep, ep_seed, result))
        })
        .collect();

    let mut rows = Vec::with_capacity(n_episodes);
    let mut successes = 0usize;
    let mut collisions = 0usize;
    let mut latencies: Vec<f64> = Vec::new();
    let mut steps_total = 0usize;
    let mut fallbacks = 0usize;
    for res in results {
        let (episode, ep_seed, r) = res?;
        successes += usize::from(r.success);
        collisions += usize::from(r.collision);
        steps_total += r.steps;
        fallbacks += r.fallback_steps;
        latencies.extend_from_slice(&r.latencies);
        rows.push(EpisodeRow {
            episode,
            seed: ep_seed,
            success: r.success,
            collision: r.collision,
            steps: r.steps,
            mean_latency: r.mean_latency(),
            fallback_steps: r.fallback_steps,
        });
    }
    rows.sort_by_key(|r| r.episode);
    latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_latency = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };
    let p95_latency = if latencies.is_empty() {
        0.0
    } else {
        latencies[((latencies.len() - 1) as f64 * 0.95) as usize]
    };
    Ok(BatchMetrics {
        episodes: n_episodes,
        success_rate: successes as f64 / n_episodes.max(1) as f64,
        collision_rate: collisions as f64 / n_episodes.max(1) as f64,
        mean_latency,
        p95_latency,
        mean_steps: steps_total as f64 / n_episodes.max(1) as f64,
        total_fallback_steps: fallbacks,
        rows,
    })
}

/// Writes per-episode rows plus one aggregate row as CSV.
pub fn write_metrics_csv(path: &std::path::Path, metrics: &BatchMetrics) -> Result<(), SimError> {
    let mut out =
        String::from("episode,seed,success,collision,steps,mean_latency,fallback_steps\n");
    for r in &metrics.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{}\n",
            r.episode,
            r.seed,
            u8::from(r.success),
            u8::from(r.collision),
            r.steps,
            r.mean_latency,
            r.fallback_steps
        ));
    }
    out.push_str(&format!(
        "aggregate,,{:.4},{:.4},{:.2},{:.6},{}\n",
        metrics.success_rate,
        metrics.collision_rate,
        metrics.mean_steps,
        metrics.mean_latency,
        metrics.total_fallback_steps
    ));
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ctx_defaults() -> (Workspace, MicpConfig, QpSettings, BnbSettings, AdmmSettings, SimConfig)
    {
        (
            Workspace::default(),
            MicpConfig { horizon: 8, ..Default::default() },
            QpSettings::default(),
            BnbSettings::default(),
            AdmmSettings::default(),
            SimConfig::default(),
        )
    }

    #[test]
    fn dynamics_examples() {
        let s = step_dynamics([0.0, 0.0, 1.0, 0.0], [0.0, 0.0], 0.2);
        assert_abs_diff_eq!(s[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s[2], 1.0, epsilon = 1e-15);

        let s = step_dynamics([0.0, 0.0, 1.0, 0.0], [0.5, 0.0], 0.2);
        assert_abs_diff_eq!(s[0], 0.21, epsilon = 1e-15);
        assert_abs_diff_eq!(s[2], 1.1, epsilon = 1e-15);

        let z = step_dynamics([0.0; 4], [0.0; 2], 0.2);
        assert_eq!(z, [0.0; 4]);
    }

    #[test]
    fn robot_at_goal_stays_put() {
        let (ws, micp, qp, bnb, admm, sim) = ctx_defaults();
        let ctx = PlannerContext {
            mode: PlannerMode::OracleCentralized,
            workspace: &ws,
            micp: &micp,
            qp: &qp,
            bnb: &bnb,
            admm: &admm,
            sim: &sim,
            model: None,
            admm_mode: AdmmMode::Sequential,
        };
        let robots = vec![RobotParams::at_rest([0.3, -0.2], [0.3, -0.2])];
        let plan = plan_step(&robots, &[], &ctx, None).unwrap();
        let norm = (plan.inputs[0][0].powi(2) + plan.inputs[0][1].powi(2)).sqrt();
        assert!(norm <= 1e-6, "input norm {norm}");
    }

    #[test]
    fn at_goal_episode_succeeds_immediately() {
        let (ws, micp, qp, bnb, admm, sim) = ctx_defaults();
        let ctx = PlannerContext {
            mode: PlannerMode::OracleCentralized,
            workspace: &ws,
            micp: &micp,
            qp: &qp,
            bnb: &bnb,
            admm: &admm,
            sim: &sim,
            model: None,
            admm_mode: AdmmMode::Sequential,
        };
        let robots = vec![
            RobotParams::at_rest([0.5, 0.5], [0.5, 0.5]),
            RobotParams::at_rest([-0.5, -0.5], [-0.5, -0.5]),
        ];
        let result = run_episode(&robots, &[], &ctx, "digest").unwrap();
        assert!(result.success);
        assert_eq!(result.steps, 0);
        assert!(!result.collision);
    }

    #[test]
    fn single_robot_reaches_goal() {
        let (ws, micp, qp, bnb, admm, sim) = ctx_defaults();
        let ctx = PlannerContext {
            mode: PlannerMode::OracleCentralized,
            workspace: &ws,
            micp: &micp,
            qp: &qp,
            bnb: &bnb,
            admm: &admm,
            sim: &sim,
            model: None,
            admm_mode: AdmmMode::Sequential,
        };
        let robots = vec![RobotParams::at_rest([-1.0, -1.0], [1.0, 1.0])];
        let result = run_episode(&robots, &[], &ctx, "digest").unwrap();
        assert!(result.success, "did not arrive in {} steps", result.steps);
        assert!(!result.collision);

        // Replaying the logged inputs reproduces the logged states exactly.
        let mut state = result.states[0][0];
        for (k, inputs) in result.inputs.iter().enumerate() {
            state = step_dynamics(state, inputs[0], micp.dt);
            for c in 0..4 {
                assert_abs_diff_eq!(state[c], result.states[k + 1][0][c], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn two_crossing_robots_oracle_mode() {
        let (ws, micp, qp, bnb, admm, sim) = ctx_defaults();
        let ctx = PlannerContext {
            mode: PlannerMode::OracleCentralized,
            workspace: &ws,
            micp: &micp,
            qp: &qp,
            bnb: &bnb,
            admm: &admm,
            sim: &sim,
            model: None,
            admm_mode: AdmmMode::Sequential,
        };
        let robots = vec![
            RobotParams::at_rest([-1.0, 0.0], [1.0, 0.0]),
            RobotParams::at_rest([1.0, 0.02], [-1.0, 0.02]),
        ];
        let result = run_episode(&robots, &[], &ctx, "digest").unwrap();
        assert!(result.success, "steps used: {}", result.steps);
        assert!(!result.collision, "collision in oracle mode");
        assert_eq!(result.fallback_steps, 0);
    }

    #[test]
    fn collision_flags_distinguish_metrics() {
        let ws = Workspace::default();
        // Diagonal offset 0.3/0.3: axis metric violated (0.3 < 0.4) but the
        // Euclidean distance 0.424 exceeds 0.4.
        let states = [[0.0, 0.0, 0.0, 0.0], [0.3, 0.3, 0.0, 0.0]];
        let (sq, eu) = collision_flags(&states, &[], &ws, 1e-6);
        assert!(sq);
        assert!(!eu);
        // Head-on proximity violates both.
        let states = [[0.0, 0.0, 0.0, 0.0], [0.25, 0.0, 0.0, 0.0]];
        let (sq, eu) = collision_flags(&states, &[], &ws, 1e-6);
        assert!(sq);
        assert!(eu);
        // Inside an inflated obstacle.
        let obstacles = vec![ObstacleParams {
            center: [0.0, 0.0],
            alpha: 0.0,
            half_length: 0.3,
            half_width: 0.2,
        }];
        let states = [[0.4, 0.0, 0.0, 0.0]];
        let (sq, _) = collision_flags(&states, &obstacles, &ws, 1e-6);
        assert!(sq);
    }
}
