// scratch: how many iterations dual ascent needs on a realistic slot
use mecsched_core::consensus::{AscentOptions, ConsensusNode, Network};
use mecsched_core::model::NodeId;

fn main() {
    let adj: [&[usize]; 8] = [
        &[1, 4],
        &[0, 2, 4, 5],
        &[1, 3, 5, 6],
        &[2, 6, 7],
        &[0, 1, 5],
        &[1, 2, 4, 6],
        &[2, 3, 5, 7],
        &[3, 6],
    ];
    let hp_proc = 205.0 / 3.3;
    let nx_proc = 358.0 / 7.6;
    let tx = 833.75;
    let rx = 2500.0 / 3.0;
    let green = [-332.6, -539.7, -357.9, -1.3, -658.1, -128.2, 32.8, 0.4];
    let compute = [-5.37, -8.70, -4.70, -0.03, -10.40, 2.27, 4.27, 3.58];
    let memory = [4.44e11, 4.22e11, 5.10e11, 5.12e11, 1.90e12, 2.03e12, 2.05e12, 2.05e12];
    let desired: [&[f64]; 8] = [
        &[0.0, 1.03],
        &[0.0, 0.53, 0.0, 0.0],
        &[0.0, 0.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0],
        &[0.0, 0.53, 0.0, 0.0],
        &[0.5, 0.0, 0.0, 0.0],
        &[0.0, 0.0],
    ];
    let nodes: Vec<ConsensusNode> = (0..8)
        .map(|i| {
            let proc = if i < 4 { hp_proc } else { nx_proc };
            ConsensusNode {
                id: NodeId(i),
                neighbors: adj[i].iter().map(|&j| NodeId(j)).collect(),
                tx_margin: tx - proc,
                rx_margin: rx + proc,
                green_power: green[i],
                compute: compute[i],
                memory: memory[i],
                mem_to_rate: 1.63833e-10,
                tracking_weight: 2.5,
                slack_penalty: 10.0,
                desired_out: desired[i].to_vec(),
            }
        })
        .collect();
    let mut net = Network::new(nodes).unwrap();
    let alpha = 0.9 * net.step_size_bound().unwrap();
    println!("alpha = {alpha:.6e}");
    let opts = AscentOptions { max_iters: 200000, primal_tol: 1e-4, warm_start: false };
    let out = net.run_dual_ascent(alpha, &opts).unwrap();
    println!("converged={} iters={} residual={:.3e}", out.converged, out.iterations, out.residual);
    for target in [1e-1, 1e-2, 1e-3, 1e-4] {
        let it = out.residual_history.iter().position(|&r| r <= target);
        println!("  residual <= {target:.0e} at iter {it:?}");
    }
}
