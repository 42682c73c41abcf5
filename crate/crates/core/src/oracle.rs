//! Exact MIQP solution by branch-and-bound, exhaustive enumeration for
//! verification, and labeled dataset generation.

use crate::config::digest_of;
use crate::micp::{
    build_instance, BinaryAssignment, MicpConfig, MicpError, MicpInstance, RowKind, Trajectory,
};
use crate::qp::{QpError, QpSettings, QpSolver, QpStatus};
use crate::scene::{random_scenario, ScenarioConfig, SceneError, Workspace};
use crate::scene::build_graph;
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("node limit {limit} exceeded ({explored} nodes explored)")]
    NodeLimit {
        limit: usize,
        explored: usize,
        incumbent: Option<Box<BnbSolution>>,
    },
    #[error("exhaustive enumeration would need {total} QP solves, above the cap {cap}")]
    CapExceeded { total: u128, cap: u128 },
    #[error(transparent)]
    Micp(#[from] MicpError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Gap and budget settings for the branch-and-bound search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BnbSettings {
    pub abs_gap: f64,
    pub rel_gap: f64,
    pub node_limit: usize,
    /// Bits within this distance of 0/1 count as integral.
    pub int_tol: f64,
    /// Iteration budget per node relaxation; unresolved nodes inherit the
    /// parent bound and are branched rather than pruned.
    pub node_iter_cap: usize,
}

impl Default for BnbSettings {
    fn default() -> Self {
        Self {
            abs_gap: 1e-6,
            rel_gap: 1e-6,
            node_limit: 100_000,
            int_tol: 1e-6,
            node_iter_cap: 2_000,
        }
    }
}

/// An exact solution: integral assignment, its trajectory, and the objective.
#[derive(Debug, Clone)]
pub struct BnbSolution {
    pub trajectory: Trajectory,
    pub assignment: BinaryAssignment,
    pub objective: f64,
    pub lower_bound: f64,
    pub nodes_explored: usize,
    pub qp_solves: usize,
}

struct Node {
    /// Valid lower bound inherited from the parent's relaxation.
    bound: f64,
    /// Per-bit fixings accumulated along the branch.
    fixed: Vec<Option<u8>>,
    /// Parent relaxation primal, used to warm start.
    warm: Option<DVector<f64>>,
    /// Insertion order, for deterministic tie-breaking.
    ticket: usize,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.ticket == other.ticket
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on bound; earlier tickets first on ties.
        other
            .bound
            .partial_cmp(&self.bound)
            .unwrap_or(Ordering::Equal)
            .then(other.ticket.cmp(&self.ticket))
    }
}

/// Replaces free bits with the smallest values that satisfy their rows at the
/// relaxation's continuous solution. Among the relaxation's optima (bits are
/// costless) this picks a canonical one: bits at conflict-free slots become
/// exactly 0, so branching only ever touches genuinely contested rows.
fn canonicalize_bits(
    instance: &MicpInstance,
    x: &mut DVector<f64>,
    fixed: &[Option<u8>],
    trajectory: &Trajectory,
) {
    let n_u = instance.num_inputs();
    let zeros = instance.empty_assignment();
    for e in 0..instance.edges.len() {
        for k in 1..=instance.horizon() {
            for m in 0..4 {
                let b = zeros.index(e, k, m);
                if fixed[b].is_some() {
                    x[n_u + b] = f64::from(fixed[b].unwrap());
                    continue;
                }
                let (lhs, sep) = instance.row_lhs_rhs(e, k, m, trajectory);
                let needed = ((sep - lhs) / instance.big_m).clamp(0.0, 1.0);
                x[n_u + b] = needed;
            }
        }
    }
}

/// Exact branch-and-bound over the binary variables: best-first on the
/// relaxation bound, branching on the most fractional bit (ties broken by the
/// lowest flat (edge, step, slot) index).
pub fn branch_and_bound(
    instance: &MicpInstance,
    qp_settings: &QpSettings,
    settings: &BnbSettings,
) -> Result<BnbSolution, OracleError> {
    let n_bits = instance.num_binaries();
    let n_u = instance.num_inputs();

    // One relaxation solver reused across all nodes: node fixings only touch
    // the binary box bounds, so the factorization is shared.
    let relaxed = instance.relax_binaries(&vec![None; n_bits])?;
    let mut node_settings = qp_settings.clone();
    node_settings.max_iter = node_settings.max_iter.min(settings.node_iter_cap.max(1));
    // Stalled nodes are decided by the shared phase-1 probe below.
    node_settings.probe_on_stall = false;
    let mut solver = QpSolver::new(relaxed, node_settings)?;
    let mut probe: Option<crate::qp::FeasibilityProbe> = None;
    let mut qp_solves = 0usize;
    let mut last_status = QpStatus::Optimal;

    let mut heap: BinaryHeap<Node> = BinaryHeap::new();
    let mut ticket = 0usize;
    heap.push(Node {
        bound: f64::NEG_INFINITY,
        fixed: vec![None; n_bits],
        warm: None,
        ticket,
    });

    let mut incumbent: Option<BnbSolution> = None;
    let mut explored = 0usize;
    let mut root_infeasible = false;

    while let Some(node) = heap.pop() {
        let gap_tol = |inc: f64| settings.abs_gap.max(settings.rel_gap * inc.abs());
        if let Some(ref inc) = incumbent {
            if node.bound >= inc.objective - gap_tol(inc.objective) {
                // Best remaining bound is within the gap: done.
                break;
            }
        }
        if explored >= settings.node_limit {
            return Err(OracleError::NodeLimit {
                limit: settings.node_limit,
                explored,
                incumbent: incumbent.map(|mut s| {
                    s.qp_solves = qp_solves;
                    Box::new(s)
                }),
            });
        }
        explored += 1;

        for (b, f) in node.fixed.iter().enumerate() {
            let (lo, up) = match f {
                Some(v) => (f64::from(*v), f64::from(*v)),
                None => (0.0, 1.0),
            };
            solver.update_var_bounds(n_u + b, lo, up);
        }
        if last_status != QpStatus::Optimal {
            solver.reset_duals();
        }
        if let Some(ref w) = node.warm {
            solver.warm_start(w);
        }
        let mut sol = solver.solve();
        qp_solves += 1;
        last_status = sol.status;
        if sol.status == QpStatus::MaxIterations {
            // Stalled node: decide it with the shared probe, then (when
            // feasible) recover a valid bound from a slightly inflated
            // re-solve, whose larger feasible set only lowers the optimum.
            if probe.is_none() {
                probe = Some(crate::qp::FeasibilityProbe::new(solver.problem(), qp_settings)?);
            }
            let probe = probe.as_mut().unwrap();
            probe.sync_bounds(solver.problem());
            match probe.solve() {
                Some((t_star, _)) if t_star > crate::qp::FeasibilityProbe::DECISION_TOL => {
                    last_status = QpStatus::PrimalInfeasible;
                    if explored == 1 {
                        root_infeasible = true;
                    }
                    continue;
                }
                _ => {
                    solver.inflate_bounds(1e-4);
                    solver.reset_duals();
                    let relaxed_sol = solver.solve();
                    solver.restore_bounds();
                    qp_solves += 1;
                    if relaxed_sol.status == QpStatus::Optimal {
                        sol = relaxed_sol;
                        sol.status = QpStatus::Optimal;
                    }
                    last_status = sol.status;
                }
            }
        }
        match sol.status {
            QpStatus::PrimalInfeasible => {
                if explored == 1 {
                    root_infeasible = true;
                }
                continue;
            }
            QpStatus::Optimal | QpStatus::MaxIterations => {}
        }
        // An unresolved relaxation has no trustworthy objective; fall back to
        // the inherited parent bound (still valid for the subtree).
        let resolved = sol.status == QpStatus::Optimal;
        let bound = if resolved {
            sol.objective.max(node.bound)
        } else {
            node.bound
        };
        if let Some(ref inc) = incumbent {
            if resolved && bound >= inc.objective - gap_tol(inc.objective) {
                continue;
            }
        }

        let mut x = sol.x.clone();
        let trajectory = instance.trajectory_from_primal(&x.rows(0, n_u).into_owned());
        canonicalize_bits(instance, &mut x, &node.fixed, &trajectory);

        // Most fractional free bit of the canonical solution.
        let mut branch_bit = None;
        let mut best_frac = settings.int_tol;
        let mut first_free = None;
        for b in 0..n_bits {
            if node.fixed[b].is_some() {
                continue;
            }
            if first_free.is_none() {
                first_free = Some(b);
            }
            let v = x[n_u + b];
            let frac = v.min(1.0 - v);
            if frac > best_frac {
                best_frac = frac;
                branch_bit = Some(b);
            }
        }
        if !resolved && branch_bit.is_none() {
            // Unresolved with integral-looking bits: keep the subtree alive
            // through any free bit; a full leaf is decided by the exact fixed
            // re-solve below.
            branch_bit = first_free;
        }

        match branch_bit {
            None => {
                // Integral node: re-solve the fixed QP on the rounded bits so
                // the incumbent is feasible to solver accuracy.
                let mut assignment = instance.empty_assignment();
                for b in 0..n_bits {
                    assignment.bits[b] = if x[n_u + b] > 0.5 { 1 } else { 0 };
                }
                if assignment.validate().is_err() {
                    continue;
                }
                let fixed_qp = instance.fix_binaries(&assignment)?;
                let mut fixed_solver = QpSolver::new(fixed_qp, qp_settings.clone())?;
                fixed_solver.warm_start(&x.rows(0, n_u).into_owned());
                let fixed_sol = fixed_solver.solve();
                qp_solves += 1;
                if fixed_sol.status != QpStatus::Optimal {
                    continue;
                }
                let traj = instance.trajectory_from_primal(&fixed_sol.x);
                let report = instance.check_feasibility(&traj, &assignment, 1e-6);
                if !report.feasible {
                    continue;
                }
                let objective = instance.evaluate_cost(&traj)?;
                let better = incumbent
                    .as_ref()
                    .map(|inc| objective < inc.objective - 1e-12)
                    .unwrap_or(true);
                if better {
                    incumbent = Some(BnbSolution {
                        trajectory: traj,
                        assignment,
                        objective,
                        lower_bound: bound,
                        nodes_explored: explored,
                        qp_solves,
                    });
                }
            }
            Some(b) => {
                for value in [0u8, 1u8] {
                    let mut fixed = node.fixed.clone();
                    fixed[b] = Some(value);
                    ticket += 1;
                    heap.push(Node {
                        bound,
                        fixed,
                        warm: Some(x.clone()),
                        ticket,
                    });
                }
            }
        }
    }

    match incumbent {
        Some(mut solution) => {
            // Global lower bound: best open node, or the incumbent when the
            // tree is exhausted.
            let open_bound = heap
                .iter()
                .map(|n| n.bound)
                .fold(f64::INFINITY, f64::min);
            solution.lower_bound = if open_bound.is_finite() {
                open_bound.max(solution.lower_bound)
            } else {
                solution.objective
            };
            solution.nodes_explored = explored;
            solution.qp_solves = qp_solves;
            Ok(solution)
        }
        None => {
            debug_assert!(root_infeasible || explored > 0);
            Err(OracleError::Infeasible)
        }
    }
}

/// The 15 admissible bit patterns per (edge, step): all of `{0,1}^4` except
/// all-ones, ordered by binary value.
fn admissible_patterns() -> Vec<[u8; 4]> {
    let mut out = Vec::with_capacity(15);
    for code in 0..16u8 {
        let p = [code & 1, (code >> 1) & 1, (code >> 2) & 1, (code >> 3) & 1];
        if p.iter().sum::<u8>() <= 3 {
            out.push(p);
        }
    }
    out
}

/// Brute-force verification oracle: solves one fixed QP per combination of
/// admissible per-(edge, step) patterns and returns the best feasible one.
pub fn enumerate_exhaustive(
    instance: &MicpInstance,
    qp_settings: &QpSettings,
    cap: u128,
) -> Result<BnbSolution, OracleError> {
    let h = instance.horizon();
    let groups = instance.edges.len() * h;
    let patterns = admissible_patterns();
    let total: u128 = (patterns.len() as u128)
        .checked_pow(groups as u32)
        .unwrap_or(u128::MAX);
    if total > cap {
        return Err(OracleError::CapExceeded { total, cap });
    }

    let zeros = instance.empty_assignment();
    let base_qp = instance.fix_binaries(&zeros)?;
    // Map every big-M row to its inequality index and zero-assignment bound.
    let rows = instance.condensed_rows(&zeros)?;
    let mut row_of_bit = vec![usize::MAX; instance.num_binaries()];
    let mut base_lower = vec![0.0; rows.len()];
    for (ri, row) in rows.iter().enumerate() {
        base_lower[ri] = row.lower;
        match row.kind {
            RowKind::RobotRobot { edge, k, m } | RowKind::RobotObstacle { edge, k, m } => {
                row_of_bit[zeros.index(edge, k, m)] = ri;
            }
            RowKind::StateBound { .. } => {}
        }
    }

    let mut solver = QpSolver::new(base_qp, qp_settings.clone())?;
    let mut counters = vec![0usize; groups];
    let mut best: Option<(f64, DVector<f64>, BinaryAssignment)> = None;
    let mut qp_solves = 0usize;
    let mut last_x: Option<DVector<f64>> = None;
    let mut last_ok = true;

    loop {
        let mut assignment = instance.empty_assignment();
        for g in 0..groups {
            let e = g / h;
            let k = g % h + 1;
            let p = patterns[counters[g]];
            for m in 0..4 {
                assignment.set(e, k, m, p[m]);
            }
        }
        for (b, &ri) in row_of_bit.iter().enumerate() {
            let relaxed = f64::from(assignment.bits[b]) * instance.big_m;
            solver.update_ineq_bounds(ri, base_lower[ri] - relaxed, f64::INFINITY);
        }
        if last_ok {
            if let Some(ref w) = last_x {
                solver.warm_start(w);
            }
        } else {
            solver.reset_duals();
        }
        let sol = solver.solve();
        qp_solves += 1;
        last_ok = sol.status == QpStatus::Optimal;
        if sol.status == QpStatus::Optimal {
            last_x = Some(sol.x.clone());
            let better = best
                .as_ref()
                .map(|(obj, _, _)| sol.objective < *obj - 1e-12)
                .unwrap_or(true);
            if better {
                best = Some((sol.objective, sol.x, assignment));
            }
        }

        // Advance the mixed-radix counter.
        let mut g = 0;
        loop {
            if g == groups {
                let (_, x, assignment) = best.ok_or(OracleError::Infeasible)?;
                let trajectory = instance.trajectory_from_primal(&x);
                let objective = instance.evaluate_cost(&trajectory)?;
                return Ok(BnbSolution {
                    trajectory,
                    assignment,
                    objective,
                    lower_bound: objective,
                    nodes_explored: 0,
                    qp_solves,
                });
            }
            counters[g] += 1;
            if counters[g] < patterns.len() {
                break;
            }
            counters[g] = 0;
            g += 1;
        }
        if groups == 0 {
            let (_, x, assignment) = best.ok_or(OracleError::Infeasible)?;
            let trajectory = instance.trajectory_from_primal(&x);
            let objective = instance.evaluate_cost(&trajectory)?;
            return Ok(BnbSolution {
                trajectory,
                assignment,
                objective,
                lower_bound: objective,
                nodes_explored: 0,
                qp_solves,
            });
        }
    }
}

/// Scenario distribution and solver settings for dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub robots_range: (usize, usize),
    pub obstacles_range: (usize, usize),
    pub workspace: Workspace,
    pub scenario: ScenarioConfig,
    pub micp: MicpConfig,
    pub qp: QpSettings,
    pub bnb: BnbSettings,
    pub train_fraction: f64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            robots_range: (2, 5),
            obstacles_range: (0, 2),
            workspace: Workspace::default(),
            scenario: ScenarioConfig::default(),
            micp: MicpConfig::default(),
            qp: QpSettings::default(),
            bnb: BnbSettings::default(),
            train_fraction: 0.9,
        }
    }
}

/// One labeled training sample: scene parameters, edge lists, and the refined
/// binary strategy per edge (RR edges first, then RO, each 4H bits).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub robots: Vec<crate::scene::RobotParams>,
    pub obstacles: Vec<crate::scene::ObstacleParams>,
    pub edges_rr: Vec<(usize, usize)>,
    pub edges_ro: Vec<(usize, usize)>,
    pub labels: Vec<Vec<u8>>,
    pub config_digest: String,
}

/// Companion manifest emitted next to the JSON-lines dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub requested: usize,
    pub records: usize,
    pub infeasible_skipped: usize,
    pub node_limit_skipped: usize,
    pub horizon: usize,
    pub config_digest: String,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub dataset_path: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
}

/// Solves one random scenario end to end and returns the labeled record,
/// or `None` when the scenario is infeasible / over the node budget.
fn label_scenario(cfg: &DataGenConfig, digest: &str, seed: u64) -> Option<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_robots = rng.gen_range(cfg.robots_range.0..=cfg.robots_range.1);
    let n_obstacles = rng.gen_range(cfg.obstacles_range.0..=cfg.obstacles_range.1);
    let (robots, obstacles) =
        random_scenario(n_robots, n_obstacles, &cfg.workspace, &cfg.scenario, seed).ok()?;
    let graph = build_graph(&robots, &obstacles, &cfg.workspace);
    let instance = build_instance(&robots, &obstacles, &graph, &cfg.workspace, &cfg.micp).ok()?;
    let solution = branch_and_bound(&instance, &cfg.qp, &cfg.bnb).ok()?;
    let refined = instance
        .refine_binaries(&solution.trajectory, &solution.assignment)
        .ok()?;
    let labels = (0..instance.edges.len())
        .map(|e| refined.edge_bits(e).to_vec())
        .collect();
    Some(DatasetRecord {
        robots,
        obstacles,
        edges_rr: graph.edges_rr,
        edges_ro: graph.edges_ro,
        labels,
        config_digest: digest.to_string(),
    })
}

/// Generates `count` scenarios (in parallel), labels the feasible ones with
/// the oracle + refinement, and writes a JSON-lines dataset plus a manifest
/// holding the deterministic 90/10 split.
pub fn generate_dataset(
    cfg: &DataGenConfig,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<DatasetSummary, OracleError> {
    let digest = digest_of(cfg);
    let results: Vec<Option<DatasetRecord>> = (0..count)
        .into_par_iter()
        .map(|i| label_scenario(cfg, &digest, seed.wrapping_add(i as u64)))
        .collect();

    let records: Vec<&DatasetRecord> = results.iter().flatten().collect();
    let skipped = count - records.len();

    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    for record in &records {
        serde_json::to_writer(&mut file, record).map_err(std::io::Error::other)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;

    // Deterministic shuffled split.
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    order.shuffle(&mut rng);
    let n_train = ((records.len() as f64) * cfg.train_fraction).round() as usize;
    let mut train_indices: Vec<usize> = order[..n_train.min(order.len())].to_vec();
    let mut val_indices: Vec<usize> = order[n_train.min(order.len())..].to_vec();
    train_indices.sort_unstable();
    val_indices.sort_unstable();

    let manifest = DatasetManifest {
        seed,
        requested: count,
        records: records.len(),
        infeasible_skipped: skipped,
        node_limit_skipped: 0,
        horizon: cfg.micp.horizon,
        config_digest: digest,
        train_indices,
        val_indices,
    };
    let manifest_path = out.with_extension("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap())?;

    Ok(DatasetSummary {
        dataset_path: out.to_path_buf(),
        manifest_path,
        manifest,
    })
}

/// Reads a JSON-lines dataset back into memory.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, OracleError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(line).map_err(std::io::Error::other)?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, OracleError> {
    let text = std::fs::read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(std::io::Error::other)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micp::EdgeKey;
    use crate::scene::RobotParams;
    use approx::assert_abs_diff_eq;

    fn ws() -> Workspace {
        Workspace::default()
    }

    fn qp_settings() -> QpSettings {
        QpSettings::default()
    }

    #[test]
    fn single_robot_solves_at_root() {
        let robots = vec![RobotParams::at_rest([0.0, 0.0], [1.0, 1.0])];
        let graph = build_graph(&robots, &[], &ws());
        let inst = build_instance(
            &robots,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon: 5, ..Default::default() },
        )
        .unwrap();
        let sol = branch_and_bound(&inst, &qp_settings(), &BnbSettings::default()).unwrap();
        assert_eq!(sol.nodes_explored, 1);
        // Must match the plain fixed-binary QP.
        let qp = inst.fix_binaries(&inst.empty_assignment()).unwrap();
        let direct = crate::qp::solve_qp(&qp, &qp_settings()).unwrap();
        let traj = inst.trajectory_from_primal(&direct.x);
        assert_abs_diff_eq!(
            sol.objective,
            inst.evaluate_cost(&traj).unwrap(),
            epsilon = 1e-6
        );
    }

    #[test]
    fn crossing_robots_match_exhaustive() {
        let robots = vec![
            RobotParams::at_rest([-0.6, 0.0], [0.6, 0.0]),
            RobotParams::at_rest([0.6, 0.05], [-0.6, 0.05]),
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
        let bnb = branch_and_bound(&inst, &qp_settings(), &BnbSettings::default()).unwrap();
        let exact = enumerate_exhaustive(&inst, &qp_settings(), 1_000_000).unwrap();
        assert_eq!(exact.qp_solves, 225);
        let rel = (bnb.objective - exact.objective).abs() / exact.objective.abs().max(1.0);
        assert!(rel <= 1e-5, "bnb {} vs exhaustive {}", bnb.objective, exact.objective);
        // The oracle solution must verify as feasible.
        let report = inst.check_feasibility(&bnb.trajectory, &bnb.assignment, 1e-6);
        assert!(report.feasible);
    }

    #[test]
    fn impossible_separation_is_infeasible() {
        // Workspace too small for two robots to keep 2*d_min apart.
        let mut w = ws();
        w.x_min = -0.15;
        w.x_max = 0.15;
        w.y_min = -0.15;
        w.y_max = 0.15;
        w.d_prox = 0.5;
        let robots = vec![
            RobotParams::at_rest([-0.1, 0.0], [0.1, 0.0]),
            RobotParams::at_rest([0.1, 0.0], [-0.1, 0.0]),
        ];
        let graph = build_graph(&robots, &[], &w);
        let inst = build_instance(
            &robots,
            &[],
            &graph,
            &w,
            &MicpConfig { horizon: 2, ..Default::default() },
        )
        .unwrap();
        assert!(matches!(
            branch_and_bound(&inst, &qp_settings(), &BnbSettings::default()),
            Err(OracleError::Infeasible)
        ));
    }

    #[test]
    fn exhaustive_cap_enforced() {
        let robots = vec![
            RobotParams::at_rest([-0.6, 0.0], [0.6, 0.0]),
            RobotParams::at_rest([0.6, 0.05], [-0.6, 0.05]),
        ];
        let graph = build_graph(&robots, &[], &ws());
        let inst = build_instance(
            &robots,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon: 10, ..Default::default() },
        )
        .unwrap();
        assert!(matches!(
            enumerate_exhaustive(&inst, &qp_settings(), 1_000_000),
            Err(OracleError::CapExceeded { .. })
        ));
    }

    #[test]
    fn root_bound_is_below_incumbent() {
        let robots = vec![
            RobotParams::at_rest([-0.6, 0.0], [0.6, 0.0]),
            RobotParams::at_rest([0.6, 0.05], [-0.6, 0.05]),
        ];
        let graph = build_graph(&robots, &[], &ws());
        let inst = build_instance(
            &robots,
            &[],
            &graph,
            &ws(),
            &MicpConfig { horizon: 3, ..Default::default() },
        )
        .unwrap();
        let relaxed = inst.relax_binaries(&vec![None; inst.num_binaries()]).unwrap();
        let root = crate::qp::solve_qp(&relaxed, &qp_settings()).unwrap();
        let sol = branch_and_bound(&inst, &qp_settings(), &BnbSettings::default()).unwrap();
        assert!(root.objective <= sol.objective + 1e-6);
    }

    #[test]
    fn dataset_generation_is_deterministic_and_refined() {
        let cfg = DataGenConfig {
            robots_range: (2, 3),
            obstacles_range: (0, 1),
            micp: MicpConfig { horizon: 3, ..Default::default() },
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        let s1 = generate_dataset(&cfg, 6, 99, &p1).unwrap();
        let s2 = generate_dataset(&cfg, 6, 99, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(s1.manifest.train_indices, s2.manifest.train_indices);
        assert!(s1.manifest.records > 0);

        // Every stored label is refinement-stable and strictly necessary.
        let records = load_dataset(&p1).unwrap();
        for record in &records {
            let graph = build_graph(&record.robots, &record.obstacles, &cfg.workspace);
            let inst = build_instance(
                &record.robots,
                &record.obstacles,
                &graph,
                &cfg.workspace,
                &cfg.micp,
            )
            .unwrap();
            assert_eq!(record.labels.len(), inst.edges.len());
            for (e, key) in inst.edges.iter().enumerate() {
                match key {
                    EdgeKey::Rr { i, j } => assert!(record.edges_rr.contains(&(*i, *j))),
                    EdgeKey::Ro { robot, obstacle } => {
                        assert!(record.edges_ro.contains(&(*robot, *obstacle)))
                    }
                }
                assert_eq!(record.labels[e].len(), 4 * cfg.micp.horizon);
            }
        }
    }

    #[test]
    fn relabeling_robots_permutes_labels() {
        let cfg = DataGenConfig {
            robots_range: (2, 2),
            obstacles_range: (0, 0),
            micp: MicpConfig { horizon: 2, ..Default::default() },
            ..Default::default()
        };
        // Find a seeded scenario with a contested edge.
        let mut found = false;
        for seed in 0..30u64 {
            let Some(record) = label_scenario(&cfg, "t", seed) else {
                continue;
            };
            if record.labels.iter().all(|l| l.iter().all(|&b| b == 0)) {
                continue;
            }
            found = true;
            // Swap the two robots and re-label.
            let robots: Vec<_> = record.robots.iter().rev().cloned().collect();
            let graph = build_graph(&robots, &[], &cfg.workspace);
            let inst =
                build_instance(&robots, &[], &graph, &cfg.workspace, &cfg.micp).unwrap();
            let sol = branch_and_bound(&inst, &cfg.qp, &cfg.bnb).unwrap();
            let refined = inst.refine_binaries(&sol.trajectory, &sol.assignment).unwrap();
            // Swapping endpoints of an RR edge swaps slots 1<->2 and 3<->4.
            let orig = &record.labels[0];
            for k in 1..=cfg.micp.horizon {
                for (m, m_swapped) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
                    assert_eq!(
                        orig[(k - 1) * 4 + m],
                        refined.get(0, k, m_swapped),
                        "seed {seed} step {k} slot {m}"
                    );
                }
            }
            break;
        }
        assert!(found, "no contested scenario found in the seed range");
    }
}
