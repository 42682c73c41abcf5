use micp_nav::micp::*;
use micp_nav::qp::*;
use micp_nav::scene::*;
use std::time::Instant;

fn main() {
    let ws = Workspace::default();
    let (robots, obstacles) =
        random_scenario(3, 1, &ws, &ScenarioConfig::default(), 100).unwrap();
    let graph = build_graph(&robots, &obstacles, &ws);
    let inst = build_instance(
        &robots,
        &obstacles,
        &graph,
        &ws,
        &MicpConfig { horizon: 3, ..Default::default() },
    )
    .unwrap();
    let n_u = inst.num_inputs();

    for (label, settings) in [
        ("default", QpSettings { max_iter: 6000, ..Default::default() }),
        ("sigma1e-4", QpSettings { sigma: 1e-4, max_iter: 6000, ..Default::default() }),
        ("alpha1.0", QpSettings { alpha: 1.0, max_iter: 6000, ..Default::default() }),
        ("rho1", QpSettings { rho: 1.0, max_iter: 6000, ..Default::default() }),
        ("rho0.01", QpSettings { rho: 0.01, max_iter: 6000, ..Default::default() }),
    ] {
        let relaxed = inst.relax_binaries(&vec![None; inst.num_binaries()]).unwrap();
        let mut solver = QpSolver::new(relaxed, settings).unwrap();
        solver.update_var_bounds(n_u + 2, 0.0, 0.0);
        let t = Instant::now();
        let sol = solver.solve();
        println!(
            "{label:10} status={:?} iters={} rp={:.2e} rd={:.2e} t={:.2}s obj={:.4}",
            sol.status,
            sol.iterations,
            sol.primal_residual,
            sol.dual_residual,
            t.elapsed().as_secs_f64(),
            sol.objective
        );
    }

    // Slack probe on the same node: minimize total violation.
    let zeros = inst.empty_assignment();
    let (mut soft, n_slack) = inst.fix_binaries_soft(&zeros, 1.0).unwrap();
    soft.cost_matrix.fill(0.0);
    soft.cost_linear.fill(0.0);
    soft.cost_constant = 0.0;
    for s in 0..n_slack {
        soft.cost_linear[inst.num_inputs() + s] = 1.0;
    }
    let t = Instant::now();
    let sol = solve_qp(&soft, &QpSettings::default()).unwrap();
    println!(
        "slackprobe status={:?} iters={} minSlackSum={:.3e} t={:.2}s",
        sol.status,
        sol.iterations,
        sol.objective,
        t.elapsed().as_secs_f64()
    );
}
