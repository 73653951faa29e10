use fanet_core::model::{ModelConfig, ModelParams, overall_loss};
use fanet_core::optim::{Sgd, SgdConfig};
use fanet_core::rng::SplitMix64;
use fanet_core::tensor::{backward_pass, Graph, Tensor};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::desk(16, 6);
    let params = ModelParams::init(cfg.clone(), 1).unwrap();
    let ps = params.param_set();
    println!("params: {} tensors, {} scalars", ps.len(), ps.numel());
    let mut rng = SplitMix64::new(2);
    let n = 16;
    let len = n * 3 * 128 * 48;
    let x = Tensor::new(vec![n, 3, 128, 48], (0..len).map(|_| rng.next_f64() as f32).collect());
    let pids: Vec<usize> = (0..n).map(|i| i % 16).collect();
    let cids: Vec<usize> = (0..n).map(|i| i % 6).collect();
    let mut opt = Sgd::new(SgdConfig::default()).unwrap();

    // warmup + timed iterations
    for it in 0..4 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let out = params.forward(&mut g, &x, true).unwrap();
        let t1 = Instant::now();
        let losses = overall_loss(&mut g, &out, &pids, &cids, &cfg.ablation).unwrap();
        backward_pass(&mut g, &losses.total).unwrap();
        let t2 = Instant::now();
        opt.step(&ps, 0.01).unwrap();
        ps.zero_grads();
        println!(
            "iter {it}: fwd {:.0} ms, bwd {:.0} ms, total {:.0} ms, L={:.4}",
            (t1 - t0).as_secs_f64() * 1e3,
            (t2 - t1).as_secs_f64() * 1e3,
            t2.duration_since(t0).as_secs_f64() * 1e3,
            losses.total.item()
        );
    }
}
