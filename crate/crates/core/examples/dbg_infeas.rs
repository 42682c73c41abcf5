use micp_nav::micp::*;
use micp_nav::qp::*;
use micp_nav::scene::*;
use std::time::Instant;

fn main() {
    let cfg_ws = Workspace::default();
    let (robots, obstacles) = random_scenario(3, 1, &cfg_ws, &ScenarioConfig::default(), 100).unwrap();
    let graph = build_graph(&robots, &obstacles, &cfg_ws);
    let inst = build_instance(&robots, &obstacles, &graph, &cfg_ws, &MicpConfig { horizon: 3, ..Default::default() }).unwrap();
    let relaxed = inst.relax_binaries(&vec![None; inst.num_binaries()]).unwrap();
    let settings = QpSettings::default();
    let mut solver = QpSolver::new(relaxed, settings).unwrap();
    let root = solver.solve();
    println!("root: {:?} iters={}", root.status, root.iterations);
    let n_u = inst.num_inputs();
    // Find the most fractional-looking bits from root and force each to 0.
    let mut worst = vec![];
    for b in 0..inst.num_binaries() {
        let v = root.x[n_u + b];
        if v > 1e-6 && v < 1.0 - 1e-6 { worst.push((b, v)); }
    }
    println!("fractional bits at root: {}", worst.len());
    for &(b, v) in worst.iter().take(6) {
        solver.update_var_bounds(n_u + b, 0.0, 0.0);
        solver.warm_start(&root.x);
        let t = Instant::now();
        let sol = solver.solve();
        println!("force bit {b} (was {v:.3}) to 0: {:?} iters={} time={:.3}s rp={:.2e}", sol.status, sol.iterations, t.elapsed().as_secs_f64(), sol.primal_residual);
        solver.update_var_bounds(n_u + b, 0.0, 1.0);
    }
}
