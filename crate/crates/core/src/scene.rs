//! Robots, rectangular obstacles, the heterogeneous proximity graph, and
//! randomized scenario generation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = [f64; 2];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("parameter invariant violated: {0}")]
    InvalidParams(String),
    #[error(
        "scenario sampling exhausted after {attempts} attempts: workspace too crowded for \
         {n_robots} robots and {n_obstacles} obstacles"
    )]
    SamplingExhausted {
        attempts: usize,
        n_robots: usize,
        n_obstacles: usize,
    },
}

/// Per-robot scene parameters: current position/velocity and goal position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    /// Position `p` in meters.
    pub p: Vec2,
    /// Velocity `v` in m/s (kept for the dynamics; the learner's feature
    /// vector excludes it unless explicitly configured).
    pub v: Vec2,
    /// Goal position in meters.
    pub goal: Vec2,
}

impl RobotParams {
    pub fn at_rest(p: Vec2, goal: Vec2) -> Self {
        Self { p, v: [0.0, 0.0], goal }
    }
}

/// An axis-rotated rectangular obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleParams {
    /// Center location in meters.
    pub center: Vec2,
    /// Rotation angle in radians, in `[-pi, pi)`.
    pub alpha: f64,
    /// Half-length along the rotated x-axis, meters.
    #[serde(rename = "L")]
    pub half_length: f64,
    /// Half-width along the rotated y-axis, meters.
    #[serde(rename = "W")]
    pub half_width: f64,
}

impl ObstacleParams {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.half_length <= 0.0 || self.half_width <= 0.0 {
            return Err(SceneError::InvalidParams(format!(
                "obstacle half-extents must be positive, got L={} W={}",
                self.half_length, self.half_width
            )));
        }
        if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&self.alpha) {
            return Err(SceneError::InvalidParams(format!(
                "obstacle rotation {} outside [-pi, pi)",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Signed axis distances of a point in the obstacle frame.
    pub fn local_offsets(&self, p: Vec2) -> (f64, f64) {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let (s, c) = self.alpha.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// True when the point lies strictly inside the rectangle inflated by
    /// `margin` on every side.
    pub fn contains_inflated(&self, p: Vec2, margin: f64) -> bool {
        let (lx, ly) = self.local_offsets(p);
        lx.abs() < self.half_length + margin && ly.abs() < self.half_width + margin
    }
}

/// Workspace bounds and the shared kinematic/safety limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Speed bound per axis, m/s.
    pub v_max: f64,
    /// Acceleration bound per axis, m/s^2.
    pub a_max: f64,
    /// Safe-circle radius per robot, m. Robots must keep `2*d_min` apart.
    pub d_min: f64,
    /// Robot pairs closer than this share collision constraints.
    pub d_prox: f64,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            x_min: -2.5,
            x_max: 2.5,
            y_min: -2.5,
            y_max: 2.5,
            v_max: 0.5,
            a_max: 0.5,
            d_min: 0.2,
            d_prox: 2.0,
        }
    }
}

impl Workspace {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(SceneError::InvalidParams("workspace bounds reversed".into()));
        }
        if self.v_max <= 0.0 || self.a_max <= 0.0 || self.d_min <= 0.0 || self.d_prox <= 0.0 {
            return Err(SceneError::InvalidParams("limits must be positive".into()));
        }
        if self.d_prox <= 2.0 * self.d_min {
            return Err(SceneError::InvalidParams(format!(
                "d_prox {} must exceed 2*d_min {}",
                self.d_prox,
                2.0 * self.d_min
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }
}

/// A complete scenario: robots, obstacles, workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub robots: Vec<RobotParams>,
    pub obstacles: Vec<ObstacleParams>,
    pub workspace: Workspace,
}

/// The heterogeneous graph over robot and obstacle nodes.
///
/// Robot nodes are `0..num_robots`; obstacle node `o` maps to global index
/// `num_robots + o` in the adjacency matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub num_robots: usize,
    pub num_obstacles: usize,
    /// Unordered robot pairs, stored once with `i < j`.
    pub edges_rr: Vec<(usize, usize)>,
    /// Robot-obstacle pairs `(robot, obstacle)`.
    pub edges_ro: Vec<(usize, usize)>,
    /// Obstacle-robot pairs, transpose of `edges_ro`.
    pub edges_or: Vec<(usize, usize)>,
    /// All ordered obstacle pairs with distinct endpoints.
    pub edges_oo: Vec<(usize, usize)>,
    /// Dense 0/1 adjacency over all nodes, row-major, no self loops.
    pub adjacency: Vec<Vec<u8>>,
}

impl SceneGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_robots + self.num_obstacles
    }

    /// Robot neighbors of robot `i` (those sharing an RR edge).
    pub fn robot_neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges_rr
            .iter()
            .filter_map(|&(a, b)| {
                if a == i {
                    Some(b)
                } else if b == i {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Obstacles robot `i` must avoid.
    pub fn obstacle_neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges_ro
            .iter()
            .filter_map(|&(r, o)| (r == i).then_some(o))
            .collect();
        out.sort_unstable();
        out
    }
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Largest axis separation; the collision constraints act on this metric.
fn axis_sep(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

/// Builds the heterogeneous graph from current positions.
///
/// A robot pair shares an edge when their distance is at most `d_prox`; a
/// robot-obstacle pair when the robot is within `d_prox + max(L, W)` of the
/// obstacle center. Obstacle-obstacle edges connect every distinct ordered
/// pair so obstacle embeddings can exchange context.
pub fn build_graph(
    robots: &[RobotParams],
    obstacles: &[ObstacleParams],
    workspace: &Workspace,
) -> SceneGraph {
    let nr = robots.len();
    let no = obstacles.len();

    let mut edges_rr = Vec::new();
    for i in 0..nr {
        for j in (i + 1)..nr {
            if dist(robots[i].p, robots[j].p) <= workspace.d_prox {
                edges_rr.push((i, j));
            }
        }
    }

    let mut edges_ro = Vec::new();
    for (r, robot) in robots.iter().enumerate() {
        for (o, obs) in obstacles.iter().enumerate() {
            let reach = workspace.d_prox + obs.half_length.max(obs.half_width);
            if dist(robot.p, obs.center) <= reach {
                edges_ro.push((r, o));
            }
        }
    }
    let edges_or: Vec<(usize, usize)> = edges_ro.iter().map(|&(r, o)| (o, r)).collect();

    let mut edges_oo = Vec::new();
    for a in 0..no {
        for b in 0..no {
            if a != b {
                edges_oo.push((a, b));
            }
        }
    }

    let n = nr + no;
    let mut adjacency = vec![vec![0u8; n]; n];
    for &(i, j) in &edges_rr {
        adjacency[i][j] = 1;
        adjacency[j][i] = 1;
    }
    for &(r, o) in &edges_ro {
        adjacency[r][nr + o] = 1;
        adjacency[nr + o][r] = 1;
    }
    for &(a, b) in &edges_oo {
        adjacency[nr + a][nr + b] = 1;
    }

    SceneGraph {
        num_robots: nr,
        num_obstacles: no,
        edges_rr,
        edges_ro,
        edges_or,
        edges_oo,
        adjacency,
    }
}

/// Knobs for [`random_scenario`]. Defaults follow the planner defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Extra clearance added to every separation predicate, meters.
    pub margin: f64,
    /// Rejection-sampling budget before giving up.
    pub max_attempts: usize,
    /// Range of obstacle half-extents, meters.
    pub obstacle_half_extent: (f64, f64),
    /// When set, initial speeds are sampled uniformly in `[-v, v]` per axis;
    /// robots start at rest otherwise.
    pub random_velocity: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            margin: 0.05,
            max_attempts: 10_000,
            obstacle_half_extent: (0.15, 0.45),
            random_velocity: None,
        }
    }
}

/// Samples a random scenario: obstacles first, then robot starts and goals
/// by rejection so that every separation/containment predicate holds.
///
/// Separation between robots (and between goals) is enforced in the axis
/// metric `max(|dx|, |dy|) >= 2*d_min + margin`, which implies the Euclidean
/// bound and keeps the first planning step feasible. Deterministic in `seed`.
pub fn random_scenario(
    n_robots: usize,
    n_obstacles: usize,
    workspace: &Workspace,
    config: &ScenarioConfig,
    seed: u64,
) -> Result<(Vec<RobotParams>, Vec<ObstacleParams>), SceneError> {
    if n_robots == 0 {
        return Err(SceneError::InvalidParams("need at least one robot".into()));
    }
    workspace.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = config.margin;
    let sep = 2.0 * workspace.d_min + margin;
    let mut attempts = 0usize;

    let exhausted = |attempts| SceneError::SamplingExhausted {
        attempts,
        n_robots,
        n_obstacles,
    };

    // Obstacles: uniform centers away from the walls, any rotation.
    let mut obstacles: Vec<ObstacleParams> = Vec::with_capacity(n_obstacles);
    let (he_lo, he_hi) = config.obstacle_half_extent;
    for _ in 0..n_obstacles {
        loop {
            attempts += 1;
            if attempts > config.max_attempts {
                return Err(exhausted(attempts));
            }
            let half_length = rng.gen_range(he_lo..=he_hi);
            let half_width = rng.gen_range(he_lo..=he_hi);
            let pad = half_length.max(half_width);
            let cx = rng.gen_range((workspace.x_min + pad)..=(workspace.x_max - pad));
            let cy = rng.gen_range((workspace.y_min + pad)..=(workspace.y_max - pad));
            let alpha = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let cand = ObstacleParams {
                center: [cx, cy],
                alpha,
                half_length,
                half_width,
            };
            // Keep obstacle cores disjoint so corridors stay passable.
            let clear = obstacles.iter().all(|o: &ObstacleParams| {
                dist(o.center, cand.center)
                    > 0.5 * (o.half_length.min(o.half_width)
                        + cand.half_length.min(cand.half_width))
            });
            if clear {
                obstacles.push(cand);
                break;
            }
        }
    }

    let point_free = |p: Vec2, obstacles: &[ObstacleParams]| {
        obstacles
            .iter()
            .all(|o| !o.contains_inflated(p, workspace.d_min + margin))
    };
    let wall_pad = workspace.d_min;
    let sample_point = |rng: &mut ChaCha8Rng| {
        [
            rng.gen_range((workspace.x_min + wall_pad)..=(workspace.x_max - wall_pad)),
            rng.gen_range((workspace.y_min + wall_pad)..=(workspace.y_max - wall_pad)),
        ]
    };

    let mut starts: Vec<Vec2> = Vec::with_capacity(n_robots);
    while starts.len() < n_robots {
        attempts += 1;
        if attempts > config.max_attempts {
            return Err(exhausted(attempts));
        }
        let p = sample_point(&mut rng);
        if point_free(p, &obstacles) && starts.iter().all(|&s| axis_sep(s, p) >= sep) {
            starts.push(p);
        }
    }

    let mut goals: Vec<Vec2> = Vec::with_capacity(n_robots);
    while goals.len() < n_robots {
        attempts += 1;
        if attempts > config.max_attempts {
            return Err(exhausted(attempts));
        }
        let p = sample_point(&mut rng);
        if point_free(p, &obstacles) && goals.iter().all(|&g| axis_sep(g, p) >= sep) {
            goals.push(p);
        }
    }

    let robots = starts
        .into_iter()
        .zip(goals)
        .map(|(p, goal)| {
            let v = match config.random_velocity {
                Some(vm) => {
                    let vm = vm.min(workspace.v_max);
                    [rng.gen_range(-vm..=vm), rng.gen_range(-vm..=vm)]
                }
                None => [0.0, 0.0],
            };
            RobotParams { p, v, goal }
        })
        .collect();

    Ok((robots, obstacles))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws() -> Workspace {
        Workspace::default()
    }

    #[test]
    fn rr_edge_iff_within_threshold() {
        let robots = vec![
            RobotParams::at_rest([0.0, 0.0], [1.0, 1.0]),
            RobotParams::at_rest([1.0, 0.0], [-1.0, -1.0]),
        ];
        let g = build_graph(&robots, &[], &ws());
        assert_eq!(g.edges_rr, vec![(0, 1)]);

        let far = vec![
            RobotParams::at_rest([0.0, 0.0], [1.0, 1.0]),
            RobotParams::at_rest([3.0, 0.0], [-1.0, -1.0]),
        ];
        let g2 = build_graph(&far, &[], &ws());
        assert!(g2.edges_rr.is_empty());
    }

    #[test]
    fn edge_counts_for_clustered_scene() {
        let robots = vec![
            RobotParams::at_rest([0.0, 0.0], [2.0, 2.0]),
            RobotParams::at_rest([0.5, 0.0], [-2.0, 2.0]),
            RobotParams::at_rest([0.0, 0.5], [2.0, -2.0]),
        ];
        let obstacles = vec![
            ObstacleParams {
                center: [0.8, 0.8],
                alpha: 0.0,
                half_length: 0.3,
                half_width: 0.2,
            },
            ObstacleParams {
                center: [-0.8, -0.8],
                alpha: 0.5,
                half_length: 0.25,
                half_width: 0.25,
            },
        ];
        let g = build_graph(&robots, &obstacles, &ws());
        assert_eq!(g.edges_rr.len(), 3);
        assert_eq!(g.edges_ro.len(), 6);
        assert_eq!(g.edges_or.len(), 6);
        assert_eq!(g.edges_oo.len(), 2);
    }

    #[test]
    fn adjacency_consistent_with_edges() {
        let (robots, obstacles) =
            random_scenario(4, 2, &ws(), &ScenarioConfig::default(), 11).unwrap();
        let g = build_graph(&robots, &obstacles, &ws());
        let n = g.num_nodes();
        let mut expected = vec![vec![0u8; n]; n];
        for &(i, j) in &g.edges_rr {
            expected[i][j] = 1;
            expected[j][i] = 1;
        }
        for &(r, o) in &g.edges_ro {
            expected[r][g.num_robots + o] = 1;
        }
        for &(o, r) in &g.edges_or {
            expected[g.num_robots + o][r] = 1;
        }
        for &(a, b) in &g.edges_oo {
            expected[g.num_robots + a][g.num_robots + b] = 1;
        }
        assert_eq!(g.adjacency, expected);
        // Symmetry of the stored unordered RR set.
        for &(i, j) in &g.edges_rr {
            assert!(i < j);
            assert!(!g.edges_rr.contains(&(j, i)));
        }
    }

    #[test]
    fn growing_d_prox_never_removes_edges() {
        let (robots, obstacles) =
            random_scenario(5, 2, &ws(), &ScenarioConfig::default(), 3).unwrap();
        let mut small = ws();
        small.d_prox = 1.0;
        let mut large = ws();
        large.d_prox = 3.0;
        let gs = build_graph(&robots, &obstacles, &small);
        let gl = build_graph(&robots, &obstacles, &large);
        for e in &gs.edges_rr {
            assert!(gl.edges_rr.contains(e));
        }
        for e in &gs.edges_ro {
            assert!(gl.edges_ro.contains(e));
        }
    }

    #[test]
    fn random_scenario_is_deterministic() {
        let a = random_scenario(2, 0, &ws(), &ScenarioConfig::default(), 7).unwrap();
        let b = random_scenario(2, 0, &ws(), &ScenarioConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let c = random_scenario(2, 0, &ws(), &ScenarioConfig::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_scenario_postconditions() {
        let w = ws();
        let cfg = ScenarioConfig::default();
        let (robots, obstacles) = random_scenario(5, 3, &w, &cfg, 42).unwrap();
        assert_eq!(robots.len(), 5);
        assert_eq!(obstacles.len(), 3);
        let sep = 2.0 * w.d_min + cfg.margin;
        for i in 0..robots.len() {
            assert!(w.contains(robots[i].p));
            assert!(w.contains(robots[i].goal));
            for j in (i + 1)..robots.len() {
                assert!(dist(robots[i].p, robots[j].p) >= sep);
                assert!(axis_sep(robots[i].p, robots[j].p) >= sep);
                assert!(axis_sep(robots[i].goal, robots[j].goal) >= sep);
            }
            for o in &obstacles {
                assert!(!o.contains_inflated(robots[i].p, w.d_min));
                assert!(!o.contains_inflated(robots[i].goal, w.d_min));
            }
        }
    }

    #[test]
    fn crowded_workspace_exhausts_sampling() {
        let mut w = ws();
        w.x_min = -0.3;
        w.x_max = 0.3;
        w.y_min = -0.3;
        w.y_max = 0.3;
        let err = random_scenario(20, 0, &w, &ScenarioConfig::default(), 1).unwrap_err();
        assert!(matches!(err, SceneError::SamplingExhausted { .. }));
    }
}
