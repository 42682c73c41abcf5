use micp_nav::micp::*;
use micp_nav::oracle::*;
use micp_nav::qp::*;
use micp_nav::scene::*;
use std::time::Instant;

fn main() {
    let cfg = DataGenConfig {
        robots_range: (2, 3),
        obstacles_range: (0, 1),
        micp: MicpConfig { horizon: 3, ..Default::default() },
        ..Default::default()
    };
    for seed in 99..111u64 {
        let mut rng_seed = seed;
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
        let n_robots = rng.gen_range(cfg.robots_range.0..=cfg.robots_range.1);
        let n_obstacles = rng.gen_range(cfg.obstacles_range.0..=cfg.obstacles_range.1);
        let Ok((robots, obstacles)) = random_scenario(n_robots, n_obstacles, &cfg.workspace, &cfg.scenario, rng_seed) else { println!("seed {seed}: sampling failed"); continue };
        let graph = build_graph(&robots, &obstacles, &cfg.workspace);
        let inst = build_instance(&robots, &obstacles, &graph, &cfg.workspace, &cfg.micp).unwrap();
        let t = Instant::now();
        match branch_and_bound(&inst, &cfg.qp, &cfg.bnb) {
            Ok(sol) => println!("seed {seed}: {n_robots}r/{n_obstacles}o edges={} bits={} nodes={} qp_solves={} time={:.2}s obj={:.3}",
                inst.edges.len(), inst.num_binaries(), sol.nodes_explored, sol.qp_solves, t.elapsed().as_secs_f64(), sol.objective),
            Err(e) => println!("seed {seed}: {n_robots}r/{n_obstacles}o edges={} bits={} -> {e} time={:.2}s", inst.edges.len(), inst.num_binaries(), t.elapsed().as_secs_f64()),
        }
        let _ = rng_seed;
    }
}
