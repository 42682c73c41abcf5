use micp_nav::micp::*;
use micp_nav::qp::*;
use micp_nav::scene::*;
use std::time::Instant;

fn main() {
    let cfg_ws = Workspace::default();
    let (robots, obstacles) = random_scenario(3, 1, &cfg_ws, &ScenarioConfig::default(), 100).unwrap();
    let graph = build_graph(&robots, &obstacles, &cfg_ws);
    let inst = build_instance(&robots, &obstacles, &graph, &cfg_ws, &MicpConfig { horizon: 3, ..Default::default() }).unwrap();
    println!("edges={} bits={} inputs={}", inst.edges.len(), inst.num_binaries(), inst.num_inputs());
    let relaxed = inst.relax_binaries(&vec![None; inst.num_binaries()]).unwrap();
    println!("vars={} ineq_rows={}", relaxed.num_vars(), relaxed.ineq_lower.len());
    let settings = QpSettings::default();
    let mut solver = QpSolver::new(relaxed, settings).unwrap();
    let t = Instant::now();
    let sol = solver.solve();
    println!("root: status={:?} iters={} rp={:.2e} rd={:.2e} obj={:.4} time={:.3}s",
        sol.status, sol.iterations, sol.primal_residual, sol.dual_residual, sol.objective, t.elapsed().as_secs_f64());
    // fix one bit and resolve warm
    let n_u = inst.num_inputs();
    solver.update_var_bounds(n_u + 5, 1.0, 1.0);
    let t = Instant::now();
    let sol2 = solver.solve();
    println!("node: status={:?} iters={} time={:.3}s", sol2.status, sol2.iterations, t.elapsed().as_secs_f64());
}
