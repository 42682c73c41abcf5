use micp_nav::micp::*;
use micp_nav::qp::*;
use micp_nav::scene::*;

fn main() {
    let ws = Workspace::default();
    let robots = vec![
        RobotParams::at_rest([-0.5, 0.0], [1.0, 0.0]),
        RobotParams::at_rest([0.5, 0.1], [-1.0, 0.0]),
    ];
    let graph = build_graph(&robots, &[], &ws);
    let inst = build_instance(&robots, &[], &graph, &ws, &MicpConfig { horizon: 3, ..Default::default() }).unwrap();
    let mut a = inst.empty_assignment();
    for k in 1..=3 { a.set(0, k, 1, 1); }
    let fixed_qp = inst.fix_binaries(&a).unwrap();
    let relaxed = inst.relax_binaries(&a.bits.iter().map(|&b| Some(b)).collect::<Vec<_>>()).unwrap();
    let s = QpSettings::default();
    let f = solve_qp(&fixed_qp, &s).unwrap();
    let r = solve_qp(&relaxed, &s).unwrap();
    println!("fixed:   status={:?} obj={} iters={} rp={:.2e} rd={:.2e}", f.status, f.objective, f.iterations, f.primal_residual, f.dual_residual);
    println!("relaxed: status={:?} obj={} iters={} rp={:.2e} rd={:.2e}", r.status, r.objective, r.iterations, r.primal_residual, r.dual_residual);
    // check the relaxed solution's bit values
    let nu = inst.num_inputs();
    for b in 0..inst.num_binaries() {
        let v = r.x[nu + b];
        if (v - f64::from(a.bits[b])).abs() > 1e-9 {
            println!("bit {b}: {} expected {}", v, a.bits[b]);
        }
    }
}
